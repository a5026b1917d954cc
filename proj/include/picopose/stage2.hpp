#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "picopose/geometry.hpp"

namespace picopose {

// Exact similarity through two correspondences p1->q1, p2->q2.
Affine2D similarity_from_two_pairs(const Vec2& p1, const Vec2& q1, const Vec2& p2, const Vec2& q2);

struct RansacConfig {
  int iterations = 500;
  double inlier_threshold = 2.0;  // pixels
  int min_inliers = 0;            // 0: max(6, ceil(5% of pairs))
  std::uint64_t seed = 0;

  void validate() const;
  int required_inliers(size_t pairs) const;
};

struct RansacFit {
  Affine2D affine;
  std::vector<std::uint8_t> inliers;
  int inlier_count = 0;
  int hypothesis = -1;         // iteration that produced the winning minimal model
  Affine2D minimal;            // winning minimal model before refit
  double minimal_rms = 0.0;    // residual RMS of `minimal` on its consensus set
  double refit_rms = 0.0;      // residual RMS of the refit on the same set
};

// Two-point RANSAC for dst ~ M src followed by a least-squares refit on the
// consensus set. Throws kInsufficientData below 2 pairs and kNoModel when no
// hypothesis reaches the required consensus.
RansacFit fit_similarity_ransac(std::span<const Vec2> src, std::span<const Vec2> dst, const RansacConfig& cfg);

struct GeodesicLoss {
  double value = 0.0;
  double d_alpha = 0.0;      // derivative w.r.t. the prediction
  double d_alpha_hat = 0.0;  // derivative w.r.t. the target
  bool at_kink = false;      // value is 0 or pi; subgradient 0 returned
};

// acos(cos a cos a_hat + sin a sin a_hat), evaluated through atan2 for accuracy.
GeodesicLoss loss_geodesic(double alpha, double alpha_hat);

struct SmoothWeights {
  double geo = 1.0;
  double log_scale = 1.0;
  double trans_u = 1.0;
  double trans_v = 1.0;
};

struct SmoothLossTerms {
  double geo = 0.0;
  double log_scale = 0.0;
  double trans_u = 0.0;
  double trans_v = 0.0;
  double total = 0.0;
  std::array<double, 4> gradient{};  // d total / d (alpha, scale, t_u, t_v) of pred
};

SmoothLossTerms loss_smooth(const Affine2D& pred, const Affine2D& gt, const SmoothWeights& w = {});

}  // namespace picopose
