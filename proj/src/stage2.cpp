#include "picopose/stage2.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <random>

#include "picopose/error.hpp"

namespace picopose {

namespace {

using Complex = std::complex<double>;

Complex to_complex(const Vec2& p) { return {p.x(), p.y()}; }

double sign(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

}  // namespace

Affine2D similarity_from_two_pairs(const Vec2& p1, const Vec2& q1, const Vec2& p2, const Vec2& q2) {
  const Complex dp = to_complex(p2) - to_complex(p1);
  if (std::abs(dp) < 1e-12) throw Error(ErrorKind::kDegenerate, "coincident source points");
  const Complex a = (to_complex(q2) - to_complex(q1)) / dp;
  if (std::abs(a) < 1e-300) throw Error(ErrorKind::kDegenerate, "coincident target points");
  const Complex t = to_complex(q1) - a * to_complex(p1);
  return {std::arg(a), std::abs(a), t.real(), t.imag()};
}

void RansacConfig::validate() const {
  if (iterations < 1) throw Error(ErrorKind::kInvalidParameter, "RANSAC needs at least one iteration");
  if (!(inlier_threshold > 0.0)) throw Error(ErrorKind::kInvalidParameter, "inlier threshold must be positive");
  if (min_inliers < 0) throw Error(ErrorKind::kInvalidParameter, "min_inliers must be non-negative");
}

int RansacConfig::required_inliers(size_t pairs) const {
  if (min_inliers > 0) return min_inliers;
  return std::max(6, static_cast<int>(std::ceil(0.05 * static_cast<double>(pairs))));
}

RansacFit fit_similarity_ransac(std::span<const Vec2> src, std::span<const Vec2> dst, const RansacConfig& cfg) {
  cfg.validate();
  if (src.size() != dst.size()) throw Error(ErrorKind::kDimensionMismatch, "source and target counts differ");
  const int n = static_cast<int>(src.size());
  if (n < 2) throw Error(ErrorKind::kInsufficientData, "similarity RANSAC needs at least 2 pairs");
  const int need = cfg.required_inliers(src.size());
  const double thr2 = cfg.inlier_threshold * cfg.inlier_threshold;

  auto consensus = [&](const Affine2D& a, std::vector<std::uint8_t>& mask, double& sq) {
    const AffineMatrix m = affine_matrix(a);
    int count = 0;
    sq = 0.0;
    for (int i = 0; i < n; ++i) {
      const double e2 = (m.leftCols<2>() * src[i] + m.col(2) - dst[i]).squaredNorm();
      mask[i] = e2 < thr2;
      if (mask[i]) {
        ++count;
        sq += e2;
      }
    }
    return count;
  };

  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<int> pick(0, n - 1);
  std::vector<std::uint8_t> mask(n), best_mask;
  int best_count = 0;
  double best_sq = 0.0;
  RansacFit fit;
  for (int it = 0; it < cfg.iterations; ++it) {
    const int i = pick(rng);
    int j = pick(rng);
    if (n > 1) {
      while (j == i) j = pick(rng);
    }
    Affine2D model;
    try {
      model = similarity_from_two_pairs(src[i], dst[i], src[j], dst[j]);
    } catch (const Error&) {
      continue;
    }
    double sq = 0.0;
    const int count = consensus(model, mask, sq);
    if (count > best_count || (count == best_count && count > 0 && sq < best_sq)) {
      best_count = count;
      best_sq = sq;
      best_mask = mask;
      fit.minimal = model;
      fit.hypothesis = it;
    }
  }
  if (best_count < need) {
    throw Error(ErrorKind::kNoModel, "similarity RANSAC consensus " + std::to_string(best_count) + " below " +
                                         std::to_string(need));
  }
  fit.minimal_rms = std::sqrt(best_sq / best_count);

  std::vector<Vec2> s, d;
  for (int i = 0; i < n; ++i) {
    if (best_mask[i]) {
      s.push_back(src[i]);
      d.push_back(dst[i]);
    }
  }
  const SimilarityFit ls = fit_similarity(s, d);
  fit.affine = ls.affine;
  fit.refit_rms = ls.rms;

  double sq = 0.0;
  const int refit_count = consensus(fit.affine, mask, sq);
  if (refit_count >= best_count) {
    fit.inliers = mask;
    fit.inlier_count = refit_count;
  } else {
    fit.inliers = best_mask;
    fit.inlier_count = best_count;
  }
  return fit;
}

GeodesicLoss loss_geodesic(double alpha, double alpha_hat) {
  const double d = alpha - alpha_hat;
  const double sd = std::sin(d);
  GeodesicLoss l;
  l.value = std::abs(std::atan2(sd, std::cos(d)));
  if (l.value < 1e-12 || std::numbers::pi - l.value < 1e-12) {
    l.at_kink = true;
    return l;
  }
  l.d_alpha = sign(sd);
  l.d_alpha_hat = -l.d_alpha;
  return l;
}

SmoothLossTerms loss_smooth(const Affine2D& pred, const Affine2D& gt, const SmoothWeights& w) {
  if (!(pred.scale > 0.0) || !(gt.scale > 0.0)) throw Error(ErrorKind::kInvalidParameter, "scale must be positive");
  SmoothLossTerms t;
  const GeodesicLoss g = loss_geodesic(pred.alpha, gt.alpha);
  const double dl = std::log(pred.scale) - std::log(gt.scale);
  const double du = pred.t_u - gt.t_u;
  const double dv = pred.t_v - gt.t_v;
  t.geo = w.geo * g.value;
  t.log_scale = w.log_scale * std::abs(dl);
  t.trans_u = w.trans_u * std::abs(du);
  t.trans_v = w.trans_v * std::abs(dv);
  t.total = t.geo + t.log_scale + t.trans_u + t.trans_v;
  t.gradient = {w.geo * g.d_alpha, w.log_scale * sign(dl) / pred.scale, w.trans_u * sign(du), w.trans_v * sign(dv)};
  return t;
}

}  // namespace picopose
