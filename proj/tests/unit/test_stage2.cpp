#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "picopose/error.hpp"
#include "picopose/stage2.hpp"

using namespace picopose;
constexpr double kPi = std::numbers::pi;

namespace {

struct Synthetic {
  Affine2D truth;
  std::vector<Vec2> src, dst;
};

Synthetic make_pairs(std::mt19937_64& rng, int n, double outlier_fraction) {
  std::uniform_real_distribution<double> ang(-kPi, kPi), sc(0.5, 2.0), tr(-50, 50), px(0, 224);
  Synthetic s;
  s.truth = {ang(rng), sc(rng), tr(rng), tr(rng)};
  const int outliers = static_cast<int>(std::lround(n * outlier_fraction));
  for (int i = 0; i < n; ++i) {
    s.src.emplace_back(px(rng), px(rng));
    s.dst.push_back(i < outliers ? Vec2(px(rng), px(rng)) : oracle::affine_apply(s.truth.alpha, s.truth.scale, s.truth.t_u, s.truth.t_v, s.src.back()));
  }
  return s;
}

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorKind::kIo;
}

}  // namespace

TEST(TwoPoint, Examples) {
  Affine2D a = similarity_from_two_pairs({0, 0}, {0, 0}, {1, 0}, {0, 1});
  EXPECT_NEAR(a.alpha, kPi / 2, 1e-12);
  EXPECT_NEAR(a.scale, 1, 1e-12);
  EXPECT_NEAR(a.t_u, 0, 1e-12);
  EXPECT_NEAR(a.t_v, 0, 1e-12);
  a = similarity_from_two_pairs({0, 0}, {5, 4}, {1, 0}, {7, 4});
  EXPECT_NEAR(a.alpha, 0, 1e-12);
  EXPECT_NEAR(a.scale, 2, 1e-12);
  EXPECT_NEAR(a.t_u, 5, 1e-12);
  EXPECT_NEAR(a.t_v, 4, 1e-12);
  EXPECT_EQ(kind_of([] { similarity_from_two_pairs({1, 1}, {0, 0}, {1, 1}, {3, 3}); }), ErrorKind::kDegenerate);
}

TEST(TwoPoint, ExactOnRandomPairs) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> px(-300, 300);
  for (int i = 0; i < 1000; ++i) {
    Vec2 p1(px(rng), px(rng)), q1(px(rng), px(rng)), p2(px(rng), px(rng)), q2(px(rng), px(rng));
    Affine2D a = similarity_from_two_pairs(p1, q1, p2, q2);
    EXPECT_LT((affine_apply(a, p1) - q1).norm(), 1e-9);
    EXPECT_LT((affine_apply(a, p2) - q2).norm(), 1e-9);
  }
}

TEST(RansacConfig, Validation) {
  RansacConfig c;
  EXPECT_EQ(c.required_inliers(10), 6);
  EXPECT_EQ(c.required_inliers(120), 6);
  EXPECT_EQ(c.required_inliers(121), 7);
  EXPECT_EQ(c.required_inliers(1000), 50);
  c.min_inliers = 3;
  EXPECT_EQ(c.required_inliers(1000), 3);
  c.iterations = 0;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.inlier_threshold = 0;
  EXPECT_THROW(c.validate(), Error);
}

TEST(Ransac, ExactConsensus) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    Synthetic s = make_pairs(rng, 50, 0.0);
    RansacFit f = fit_similarity_ransac(s.src, s.dst, {});
    EXPECT_NEAR(wrap_angle(f.affine.alpha - s.truth.alpha), 0, 1e-6);
    EXPECT_NEAR(f.affine.scale, s.truth.scale, 1e-6);
    EXPECT_NEAR(f.affine.t_u, s.truth.t_u, 1e-6);
    EXPECT_NEAR(f.affine.t_v, s.truth.t_v, 1e-6);
    EXPECT_EQ(f.inlier_count, 50);
  }
}

TEST(Ransac, ThirtyPercentOutliers) {
  std::mt19937_64 rng(3);
  int ok = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Synthetic s = make_pairs(rng, 100, 0.3);
    RansacConfig cfg;
    cfg.seed = trial;
    RansacFit f = fit_similarity_ransac(s.src, s.dst, cfg);
    ok += std::abs(wrap_angle(f.affine.alpha - s.truth.alpha)) <= 0.02 &&
          std::abs(f.affine.scale / s.truth.scale - 1) <= 0.02 && std::abs(f.affine.t_u - s.truth.t_u) <= 1 &&
          std::abs(f.affine.t_v - s.truth.t_v) <= 1;
  }
  EXPECT_GE(ok, 99);
}

TEST(Ransac, RefitNeverWorseThanMinimalModel) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> noise(0, 0.7);
  for (int trial = 0; trial < 50; ++trial) {
    Synthetic s = make_pairs(rng, 80, 0.25);
    for (auto& d : s.dst) d += Vec2(noise(rng), noise(rng));
    RansacFit f = fit_similarity_ransac(s.src, s.dst, {});
    EXPECT_LE(f.refit_rms, f.minimal_rms + 1e-12);
    // the refit mask replaces the consensus set only when it is not smaller
    int n = 0, reported = 0;
    std::vector<std::uint8_t> refit_mask;
    for (size_t i = 0; i < s.src.size(); ++i) {
      refit_mask.push_back((affine_apply(f.affine, s.src[i]) - s.dst[i]).norm() < 2.0);
      n += refit_mask.back();
      reported += f.inliers[i] != 0;
    }
    EXPECT_EQ(reported, f.inlier_count);
    EXPECT_GE(f.inlier_count, n);
    if (n == f.inlier_count) EXPECT_EQ(std::vector<std::uint8_t>(f.inliers.begin(), f.inliers.end()), refit_mask);
  }
}

TEST(Ransac, DeterministicForSeed) {
  std::mt19937_64 rng(5);
  Synthetic s = make_pairs(rng, 60, 0.4);
  RansacConfig cfg;
  cfg.seed = 42;
  RansacFit a = fit_similarity_ransac(s.src, s.dst, cfg), b = fit_similarity_ransac(s.src, s.dst, cfg);
  EXPECT_EQ(a.affine.alpha, b.affine.alpha);
  EXPECT_EQ(a.affine.t_u, b.affine.t_u);
  EXPECT_EQ(a.hypothesis, b.hypothesis);
  EXPECT_EQ(a.inliers, b.inliers);
}

TEST(Ransac, Errors) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> px(0, 224);
  std::vector<Vec2> src, dst;
  for (int i = 0; i < 100; ++i) {
    src.emplace_back(px(rng), px(rng));
    dst.emplace_back(px(rng), px(rng));
  }
  RansacConfig cfg;
  cfg.min_inliers = 20;
  EXPECT_EQ(kind_of([&] { fit_similarity_ransac(src, dst, cfg); }), ErrorKind::kNoModel);
  std::vector<Vec2> one{Vec2(1, 2)};
  EXPECT_EQ(kind_of([&] { fit_similarity_ransac(one, one, {}); }), ErrorKind::kInsufficientData);
  std::vector<Vec2> two{Vec2(1, 2), Vec2(3, 4)}, three{Vec2(1, 2), Vec2(3, 4), Vec2(5, 6)};
  EXPECT_EQ(kind_of([&] { fit_similarity_ransac(two, three, {}); }), ErrorKind::kDimensionMismatch);
}

TEST(Geodesic, Examples) {
  GeodesicLoss g = loss_geodesic(0.7, 0.7);
  EXPECT_EQ(g.value, 0.0);
  EXPECT_TRUE(g.at_kink);
  g = loss_geodesic(0, kPi);
  EXPECT_NEAR(g.value, kPi, 1e-15);
  EXPECT_TRUE(g.at_kink);
  g = loss_geodesic(0.3, -0.2);
  EXPECT_NEAR(g.value, 0.5, 1e-15);
  EXPECT_FALSE(g.at_kink);
  auto f = [](double a) { return loss_geodesic(a, -0.2).value; };
  EXPECT_LT(oracle::relative_error(g.d_alpha, oracle::central_difference(f, 0.3, 1e-6)), 1e-4);
  auto h = [](double b) { return loss_geodesic(0.3, b).value; };
  EXPECT_LT(oracle::relative_error(g.d_alpha_hat, oracle::central_difference(h, -0.2, 1e-6)), 1e-4);
}

TEST(Geodesic, Properties) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-20, 20);
  for (int i = 0; i < 10000; ++i) {
    const double a = u(rng), b = u(rng);
    const double v = loss_geodesic(a, b).value;
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, kPi);
    EXPECT_NEAR(v, loss_geodesic(b, a).value, 1e-12);
    EXPECT_NEAR(v, loss_geodesic(a + 2 * kPi, b).value, 1e-9);
    EXPECT_NEAR(v, std::acos(std::clamp(std::cos(a) * std::cos(b) + std::sin(a) * std::sin(b), -1.0, 1.0)), 1e-7);
  }
  EXPECT_NEAR(loss_geodesic(1.0, 1.0 + 4 * kPi).value, 0.0, 1e-12);
}

TEST(Smooth, Examples) {
  Affine2D gt{0.4, 1.3, 10, -4};
  EXPECT_EQ(loss_smooth(gt, gt).total, 0.0);
  Affine2D pred = gt;
  pred.scale = 2 * gt.scale;
  SmoothLossTerms t = loss_smooth(pred, gt);
  EXPECT_NEAR(t.total, std::log(2.0), 1e-15);
  EXPECT_NEAR(t.log_scale, std::log(2.0), 1e-15);
}

TEST(Smooth, LogScaleInvariance) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> s(0.1, 10), k(0.01, 100);
  for (int i = 0; i < 1000; ++i) {
    Affine2D p{0, s(rng), 0, 0}, g{0, s(rng), 0, 0};
    const double kk = k(rng);
    Affine2D p2 = p, g2 = g;
    p2.scale *= kk;
    g2.scale *= kk;
    EXPECT_NEAR(loss_smooth(p, g).log_scale, loss_smooth(p2, g2).log_scale, 1e-12);
  }
}

TEST(Smooth, WeightedGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> ang(-kPi, kPi), sc(0.3, 3), tr(-20, 20), w(0.1, 3);
  int checked = 0;
  while (checked < 100) {
    Affine2D p{ang(rng), sc(rng), tr(rng), tr(rng)}, g{ang(rng), sc(rng), tr(rng), tr(rng)};
    SmoothWeights wt{w(rng), w(rng), w(rng), w(rng)};
    SmoothLossTerms t = loss_smooth(p, g, wt);
    // terms are reported already weighted
    if (t.geo < 1e-3 || kPi - t.geo / wt.geo < 1e-3 || t.log_scale < 1e-3 || t.trans_u < 1e-3 || t.trans_v < 1e-3) continue;
    EXPECT_NEAR(t.total, t.geo + t.log_scale + t.trans_u + t.trans_v, 1e-12);
    EXPECT_NEAR(t.geo, wt.geo * loss_geodesic(p.alpha, g.alpha).value, 1e-12);
    std::vector<double> analytic(t.gradient.begin(), t.gradient.end()), numeric;
    for (int k = 0; k < 4; ++k) {
      auto f = [&](double x) {
        Affine2D q = p;
        (k == 0 ? q.alpha : k == 1 ? q.scale : k == 2 ? q.t_u : q.t_v) = x;
        return loss_smooth(q, g, wt).total;
      };
      const double x0 = k == 0 ? p.alpha : k == 1 ? p.scale : k == 2 ? p.t_u : p.t_v;
      numeric.push_back(oracle::central_difference(f, x0, 1e-7));
    }
    EXPECT_LT(oracle::relative_error(analytic, numeric), 1e-4);
    ++checked;
  }
}
