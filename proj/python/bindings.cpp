#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "satstereo/dsm.hpp"
#include "satstereo/errors.hpp"
#include "satstereo/groundtruth.hpp"
#include "satstereo/pair_selection.hpp"
#include "satstereo/pipeline.hpp"
#include "satstereo/rpc_model.hpp"
#include "satstereo/sgm.hpp"

namespace py = pybind11;
using namespace satstereo;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

FloatRaster to_raster(const FloatArray& a) {
  if (a.ndim() != 2) throw std::invalid_argument("expected a 2-D float array");
  FloatRaster r(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)));
  std::memcpy(r.data(), a.data(), r.size() * sizeof(float));
  return r;
}

py::array_t<float> from_raster(const FloatRaster& r) {
  py::array_t<float> a({r.height(), r.width()});
  std::memcpy(a.mutable_data(), r.data(), r.size() * sizeof(float));
  return a;
}

py::array_t<bool> from_mask(const MaskRaster& m) {
  py::array_t<bool> a({m.height(), m.width()});
  auto* out = a.mutable_data();
  for (size_t i = 0; i < m.size(); ++i) out[i] = m.data()[i] != 0;
  return a;
}

MaskRaster to_mask(const py::array_t<bool, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 2) throw std::invalid_argument("expected a 2-D bool array");
  MaskRaster m(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)));
  for (size_t i = 0; i < m.size(); ++i) m.data()[i] = a.data()[i] ? 1 : 0;
  return m;
}

DisparityMap to_disparity(const FloatArray& disp,
                          const py::array_t<bool, py::array::c_style>& valid) {
  DisparityMap d{to_raster(disp), to_mask(valid)};
  if (d.disp.width() != d.valid.width() || d.disp.height() != d.valid.height())
    throw std::invalid_argument("disparity and validity shapes differ");
  return d;
}

GridSpec unit_grid(int width, int height, double cell_m) {
  // Anchorless metric grid for array-level entry points.
  GridSpec g;
  g.cell_m = cell_m;
  g.dlat = cell_m / kMetersPerDegLat;
  g.dlon = cell_m / kMetersPerDegLat;
  g.lat0 = 0;
  g.lon0 = 0;
  g.width = width;
  g.height = height;
  return g;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "satellite-stereo groundtruthing core";

  py::register_exception<Error>(m, "SatStereoError");

  py::class_<RpcModel>(m, "RpcModel")
      .def(py::init<>())
      .def_readwrite("line_offset", &RpcModel::line_offset)
      .def_readwrite("line_scale", &RpcModel::line_scale)
      .def_readwrite("samp_offset", &RpcModel::samp_offset)
      .def_readwrite("samp_scale", &RpcModel::samp_scale)
      .def_readwrite("lat_offset", &RpcModel::lat_offset)
      .def_readwrite("lat_scale", &RpcModel::lat_scale)
      .def_readwrite("lon_offset", &RpcModel::lon_offset)
      .def_readwrite("lon_scale", &RpcModel::lon_scale)
      .def_readwrite("height_offset", &RpcModel::height_offset)
      .def_readwrite("height_scale", &RpcModel::height_scale)
      .def_readwrite("line_num", &RpcModel::line_num)
      .def_readwrite("line_den", &RpcModel::line_den)
      .def_readwrite("samp_num", &RpcModel::samp_num)
      .def_readwrite("samp_den", &RpcModel::samp_den)
      .def_readwrite("bias_x", &RpcModel::bias_x)
      .def_readwrite("bias_y", &RpcModel::bias_y)
      .def_readwrite("validity_bound", &RpcModel::validity_bound)
      .def("project",
           [](const RpcModel& r, double lat, double lon, double h) {
             const PixelPoint p = r.project({lat, lon, h});
             return py::make_tuple(p.x, p.y);
           },
           py::arg("lat"), py::arg("lon"), py::arg("h"))
      .def("inverse_project",
           [](const RpcModel& r, double x, double y, double h) {
             const GeoPoint g = r.inverse_project({x, y}, h);
             return py::make_tuple(g.lat, g.lon, g.h);
           },
           py::arg("x"), py::arg("y"), py::arg("h"))
      .def("affine_approximate", [](const RpcModel& r, double lat, double lon,
                                    double h) {
        const AffineCamera cam = r.affine_approximate({lat, lon, h});
        py::array_t<double> a({3, 4});
        for (int i = 0; i < 3; ++i)
          for (int j = 0; j < 4; ++j) a.mutable_at(i, j) = cam.m(i, j);
        return a;
      });

  m.def("read_rpc", &read_rpc_text, py::arg("path"));
  m.def("write_rpc", &write_rpc_text, py::arg("path"), py::arg("rpc"));

  m.def("intersection_angle",
        [](double az1, double el1, double az2, double el2) {
          return intersection_angle_deg({az1, el1, ""}, {az2, el2, ""});
        },
        py::arg("azimuth1"), py::arg("elevation1"), py::arg("azimuth2"),
        py::arg("elevation2"));

  m.def("census_transform",
        [](const FloatArray& img, int window) {
          const CensusRaster c = census_transform(to_raster(img), window);
          py::array_t<uint64_t> codes({c.code.height(), c.code.width()});
          std::memcpy(codes.mutable_data(), c.code.data(),
                      c.code.size() * sizeof(uint64_t));
          return py::make_tuple(codes, from_mask(c.valid));
        },
        py::arg("image"), py::arg("window") = 5);

  m.def("sgm_match",
        [](const FloatArray& ref, const FloatArray& sec, int census_window,
           int p1, int p2, int paths, int d_min, int d_max, double lr_tolerance,
           bool subpixel) {
          SgmParams p{census_window, p1, p2, paths, d_min, d_max, lr_tolerance,
                      subpixel};
          const DisparityMap d = sgm_match(to_raster(ref), to_raster(sec), p);
          return py::make_tuple(from_raster(d.disp), from_mask(d.valid));
        },
        py::arg("reference"), py::arg("secondary"), py::arg("census_window") = 5,
        py::arg("p1") = 10, py::arg("p2") = 120, py::arg("paths") = 8,
        py::arg("d_min") = -16, py::arg("d_max") = 16,
        py::arg("lr_tolerance") = 1.0, py::arg("subpixel") = true);

  m.def("lrrl_check",
        [](const FloatArray& disp, const py::array_t<bool, py::array::c_style>& valid,
           const FloatArray& other, const py::array_t<bool, py::array::c_style>& other_valid,
           double tol, int direction, bool subpixel) {
          const DisparityMap out =
              lrrl_check(to_disparity(disp, valid), to_disparity(other, other_valid),
                         tol, direction, subpixel);
          return py::make_tuple(from_raster(out.disp), from_mask(out.valid));
        },
        py::arg("disp"), py::arg("valid"), py::arg("other"), py::arg("other_valid"),
        py::arg("tol") = 1.0, py::arg("direction") = 1, py::arg("subpixel") = false);

  m.def("fuse_median",
        [](const std::vector<FloatArray>& arrays, double cell_m) {
          if (arrays.empty()) throw std::invalid_argument("no inputs");
          std::vector<Dsm> dsms;
          const GridSpec g = unit_grid(static_cast<int>(arrays[0].shape(1)),
                                       static_cast<int>(arrays[0].shape(0)), cell_m);
          for (const auto& a : arrays) dsms.push_back({g, to_raster(a)});
          return from_raster(fuse_median(dsms).heights);
        },
        py::arg("heights"), py::arg("cell_m") = 0.5);

  m.def("align_translation",
        [](const FloatArray& lidar, const FloatArray& fused, double cell_m,
           double bound_m, double coarse_step_m, int refine_levels) {
          const GridSpec g = unit_grid(static_cast<int>(lidar.shape(1)),
                                       static_cast<int>(lidar.shape(0)), cell_m);
          AlignSearch search;
          search.bound_m = bound_m;
          search.coarse_step_m = coarse_step_m;
          search.refine_levels = refine_levels;
          const AlignmentOffset off =
              align_lidar({g, to_raster(lidar)}, {g, to_raster(fused)}, search);
          return py::make_tuple(off.dx_m, off.dy_m, off.dz_m);
        },
        py::arg("lidar"), py::arg("fused"), py::arg("cell_m") = 0.5,
        py::arg("bound_m") = 8.0, py::arg("coarse_step_m") = 2.0,
        py::arg("refine_levels") = 2);

  m.def("select_pairs",
        [](const std::vector<std::tuple<std::string, std::string, double, double>>&
               records,
           double off_nadir_min, double off_nadir_max, double max_view_diff,
           double max_time_diff, double min_intersection, double max_intersection) {
          std::vector<ImageMeta> metas;
          for (const auto& [id, time, az, el] : records)
            metas.push_back({id, {az, el, time}});
          SelectionConfig cfg{off_nadir_min, off_nadir_max, max_view_diff,
                              max_time_diff, min_intersection, max_intersection};
          py::list out;
          for (const auto& p : select_pairs(metas, cfg))
            out.append(py::make_tuple(p.id_a, p.id_b, p.tau_days, p.dview_deg,
                                      p.theta_deg));
          return out;
        },
        py::arg("records"), py::arg("off_nadir_min") = 5.0,
        py::arg("off_nadir_max") = 35.0, py::arg("max_view_diff") = 35.0,
        py::arg("max_time_diff") = 300.0, py::arg("min_intersection") = 5.0,
        py::arg("max_intersection") = 45.0);

  m.def("read_float_raster",
        [](const std::filesystem::path& path) {
          py::list out;
          for (const auto& r : read_float_raster(path)) out.append(from_raster(r));
          return out;
        },
        py::arg("path"));
  m.def("write_float_raster",
        [](const std::filesystem::path& path, const std::vector<FloatArray>& arrays) {
          std::vector<FloatRaster> rs;
          std::vector<const FloatRaster*> ptrs;
          for (const auto& a : arrays) rs.push_back(to_raster(a));
          for (const auto& r : rs) ptrs.push_back(&r);
          write_float_raster(path, ptrs);
        },
        py::arg("path"), py::arg("channels"));

  m.def("run_stage",
        [](const std::string& name, const std::filesystem::path& config) {
          run_stage(name, load_config(config));
        },
        py::arg("stage"), py::arg("config"));
  m.def("run_all",
        [](const std::filesystem::path& config) { run_all(load_config(config)); },
        py::arg("config"));
}
