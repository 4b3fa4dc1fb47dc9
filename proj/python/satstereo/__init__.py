"""Satellite-stereo groundtruthing toolkit: RPC cameras, epipolar
rectification, census SGM, DSM fusion, LiDAR alignment and groundtruth
disparity generation, bound from the C++ core."""

from ._core import (  # noqa: F401
    RpcModel,
    SatStereoError,
    align_translation,
    census_transform,
    fuse_median,
    intersection_angle,
    lrrl_check,
    read_float_raster,
    read_rpc,
    run_all,
    run_stage,
    select_pairs,
    sgm_match,
    write_float_raster,
    write_rpc,
)

__all__ = [
    "RpcModel",
    "SatStereoError",
    "align_translation",
    "census_transform",
    "fuse_median",
    "intersection_angle",
    "lrrl_check",
    "read_float_raster",
    "read_rpc",
    "run_all",
    "run_stage",
    "select_pairs",
    "sgm_match",
    "write_float_raster",
    "write_rpc",
]
