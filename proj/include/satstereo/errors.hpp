#pragma once

#include <stdexcept>
#include <string>

namespace satstereo {

// Base class for all pipeline errors so callers can catch the whole family.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

#define SATSTEREO_DEFINE_ERROR(Name)                          \
  class Name : public Error {                                 \
   public:                                                    \
    explicit Name(const std::string& msg) : Error(msg) {}     \
  }

// rpc_camera
SATSTEREO_DEFINE_ERROR(OutOfValidityVolume);
SATSTEREO_DEFINE_ERROR(DenominatorNearZero);
SATSTEREO_DEFINE_ERROR(NoConvergence);
SATSTEREO_DEFINE_ERROR(SingularJacobian);

// tie_points
SATSTEREO_DEFINE_ERROR(TooFewMatches);
SATSTEREO_DEFINE_ERROR(DegenerateConfiguration);
SATSTEREO_DEFINE_ERROR(TooFewInliers);
SATSTEREO_DEFINE_ERROR(UnderconstrainedTrack);

// rectification
SATSTEREO_DEFINE_ERROR(EpipoleInsideImage);
SATSTEREO_DEFINE_ERROR(InconsistentTiles);

// stereo_sgm
SATSTEREO_DEFINE_ERROR(EmptyDisparityRange);

// dsm_fusion
SATSTEREO_DEFINE_ERROR(IllConditionedPair);
SATSTEREO_DEFINE_ERROR(GridMismatch);
SATSTEREO_DEFINE_ERROR(InsufficientOverlap);

// groundtruth_gen
SATSTEREO_DEFINE_ERROR(RayMissesField);

// synth_scene
SATSTEREO_DEFINE_ERROR(FitResidualTooLarge);

// pipeline
SATSTEREO_DEFINE_ERROR(MissingUpstream);
SATSTEREO_DEFINE_ERROR(ConfigInvalid);
SATSTEREO_DEFINE_ERROR(IoError);

#undef SATSTEREO_DEFINE_ERROR

}  // namespace satstereo
