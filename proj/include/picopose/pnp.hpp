#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "picopose/geometry.hpp"
#include "picopose/synth.hpp"

namespace picopose {

struct Pair2D3D {
  Vec2 pixel;   // full-image coordinates
  Vec3 point;   // object frame, meters
  double weight = 1.0;
};

// Observation pixels whose certainty exceeds `threshold` (strictly), paired
// with the template surface point at P (see template_point); pairs landing
// off the mask are dropped.
std::vector<Pair2D3D> assemble_pairs(const PositionMap& p, const CertaintyMap& c, const View& tmpl,
                                     const Mask& obs_mask, const Affine2D& obs_crop, double threshold = 0.5);

// Template surface point at continuous crop position q, which must fall in a
// masked pixel: bilinear over the four neighbours, extended affinely from
// three when one is off the mask, else the containing pixel's point.
bool template_point(const View& tmpl, const Vec2& q, Vec3& out);

// Reprojection error of one pair; +inf when the point is behind the camera.
double reprojection_error(const Pair2D3D& pair, const Intrinsics& k, const Pose& pose);
double reprojection_rms(std::span<const Pair2D3D> pairs, const Intrinsics& k, const Pose& pose);

struct EpnpResult {
  Pose pose;
  double rms = 0.0;
  bool planar = false;
};

// Control-point EPnP with Gauss-Newton refinement of the null-space weights,
// optionally followed by a reprojection polish. Throws kInsufficientData
// below 4 pairs and kDegenerate for collinear points.
EpnpResult epnp(std::span<const Pair2D3D> pairs, const Intrinsics& k, bool polish = true);

// Levenberg-Marquardt on the reprojection error; only improving steps are
// taken, so the RMS never increases.
Pose polish_pose(std::span<const Pair2D3D> pairs, const Intrinsics& k, const Pose& start, int iterations = 20);

struct PnpConfig {
  int iterations = 150;
  double reproj_threshold = 2.0;  // pixels
  int max_pairs = 2000;
  std::uint64_t seed = 0;
  void validate() const;
};

struct PoseEstimate {
  Pose pose;
  int inliers = 0;
  double reproj_rms = 0.0;  // over inliers
  int hypothesis_index = 0;
  int pairs = 0;
  std::vector<std::uint8_t> inlier_mask;  // per input pair
  double minimal_rms = 0.0;  // winning minimal model, on its own consensus set
  double refit_rms = 0.0;    // returned pose, on the same set
};

// Four-point EPnP hypotheses scored by reprojection consensus, then a refit on
// the consensus set. Inliers are exactly the pairs with error below the
// threshold under the returned pose. Throws kNoPose without a 4-inlier model.
PoseEstimate pnp_ransac(std::span<const Pair2D3D> pairs, const Intrinsics& k, const PnpConfig& cfg = {});

// Pair subset used for hypothesis generation when the input exceeds the cap:
// the highest-weight 2*cap pairs, then every other one in input order.
std::vector<int> cap_pairs(std::span<const Pair2D3D> pairs, int cap);

// Most inliers, then lower RMS, then lower hypothesis index.
bool better_estimate(const PoseEstimate& a, const PoseEstimate& b);

nlohmann::json to_json(const PoseEstimate& e);

}  // namespace picopose
