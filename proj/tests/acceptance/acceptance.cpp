// End-to-end acceptance run. One PASS/FAIL line per criterion; exit code 1 if
// any line fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "picopose/experiment.hpp"
#include "picopose/features.hpp"
#include "picopose/io.hpp"
#include "picopose/metrics.hpp"
#include "picopose/pipeline.hpp"
#include "picopose/pnp.hpp"
#include "picopose/stage2.hpp"
#include "picopose/stage3.hpp"

using namespace picopose;
namespace fs = std::filesystem;
constexpr double kPi = std::numbers::pi;

namespace {

int failures = 0;

void report(const char* name, bool ok, const std::string& detail) {
  std::printf("%s %-28s %s\n", ok ? "PASS" : "FAIL", name, detail.c_str());
  std::fflush(stdout);
  failures += !ok;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// --- gradient checks -------------------------------------------------------

double infonce_worst() {
  std::mt19937_64 rng(1001);
  std::uniform_real_distribution<double> u(-1, 1), tau(0.05, 0.5);
  std::uniform_int_distribution<int> n(2, 12);
  double worst = 0;
  for (int inst = 0; inst < 100; ++inst) {
    std::vector<InfoNceRow> rows(n(rng) % 4 + 1);
    for (auto& row : rows) {
      row.similarities.resize(n(rng));
      for (auto& s : row.similarities) s = u(rng);
      row.positive = std::uniform_int_distribution<int>(0, static_cast<int>(row.similarities.size()) - 1)(rng);
    }
    const double t = tau(rng);
    const InfoNceResult r = loss_coarse_infonce(rows, t);
    std::vector<double> analytic, numeric;
    for (size_t i = 0; i < rows.size(); ++i)
      for (size_t k = 0; k < rows[i].similarities.size(); ++k) {
        auto f = [&](double x) {
          auto copy = rows;
          copy[i].similarities[k] = x;
          return loss_coarse_infonce(copy, t).loss;
        };
        analytic.push_back(r.gradient[i][k]);
        numeric.push_back(oracle::central_difference(f, rows[i].similarities[k], 1e-5));
      }
    worst = std::max(worst, oracle::relative_error(analytic, numeric));
  }
  return worst;
}

double geodesic_worst() {
  std::mt19937_64 rng(1002);
  std::uniform_real_distribution<double> u(-3 * kPi, 3 * kPi);
  double worst = 0;
  int checked = 0;
  while (checked < 100) {
    const double a = u(rng), b = u(rng);
    const GeodesicLoss g = loss_geodesic(a, b);
    if (g.value < 1e-3 || kPi - g.value < 1e-3) continue;
    const double na = oracle::central_difference([&](double x) { return loss_geodesic(x, b).value; }, a, 1e-6);
    const double nb = oracle::central_difference([&](double x) { return loss_geodesic(a, x).value; }, b, 1e-6);
    worst = std::max(worst, oracle::relative_error({g.d_alpha, g.d_alpha_hat}, {na, nb}));
    ++checked;
  }
  return worst;
}

double smooth_worst() {
  std::mt19937_64 rng(1003);
  std::uniform_real_distribution<double> ang(-kPi, kPi), sc(0.3, 3), tr(-20, 20), w(0.1, 3);
  double worst = 0;
  int checked = 0;
  while (checked < 100) {
    const Affine2D p{ang(rng), sc(rng), tr(rng), tr(rng)}, g{ang(rng), sc(rng), tr(rng), tr(rng)};
    const SmoothWeights wt{w(rng), w(rng), w(rng), w(rng)};
    const SmoothLossTerms t = loss_smooth(p, g, wt);
    if (t.geo < 1e-3 || kPi - t.geo / wt.geo < 1e-3 || t.log_scale < 1e-3 || t.trans_u < 1e-3 || t.trans_v < 1e-3)
      continue;
    std::vector<double> analytic(t.gradient.begin(), t.gradient.end()), numeric;
    for (int k = 0; k < 4; ++k) {
      auto field = [k](Affine2D& a) -> double& { return k == 0 ? a.alpha : k == 1 ? a.scale : k == 2 ? a.t_u : a.t_v; };
      auto f = [&](double x) {
        Affine2D q = p;
        field(q) = x;
        return loss_smooth(q, g, wt).total;
      };
      Affine2D p0 = p;
      numeric.push_back(oracle::central_difference(f, field(p0), 1e-7));
    }
    worst = std::max(worst, oracle::relative_error(analytic, numeric));
    ++checked;
  }
  return worst;
}

double fine_worst() {
  std::mt19937_64 rng(1004);
  std::uniform_real_distribution<double> off(-3, 3), cert(0.05, 0.95), u(0, 1), wt(0.1, 2);
  double worst = 0;
  int checked = 0;
  while (checked < 100) {
    const int levels = 1 + checked % 3;
    std::vector<FineLevel> lvs;
    bool near_kink = false;
    for (int l = 0; l < levels; ++l) {
      const int n = 2 << l;
      FineLevel lv{PositionMap(n, n), CertaintyMap(n, n), PositionMap(n, n), CertaintyMap(n, n)};
      for (size_t i = 0; i < lv.delta.size(); ++i) {
        lv.delta.values()[i] = Vec2(off(rng), off(rng));
        lv.delta_gt.values()[i] = Vec2(off(rng), off(rng));
        lv.certainty.values()[i] = cert(rng);
        lv.certainty_gt.values()[i] = u(rng) < 0.5 ? 0.0 : u(rng);
        const Vec2 d = lv.delta.values()[i] - lv.delta_gt.values()[i];
        near_kink |= std::abs(d.x()) < 1e-3 || std::abs(d.y()) < 1e-3;
      }
      lvs.push_back(lv);
    }
    if (near_kink) continue;
    const double lambda = wt(rng), mu = wt(rng);
    const FineLossResult r = loss_fine(lvs, lambda, mu);
    std::vector<double> analytic, numeric;
    for (int l = 0; l < levels; ++l)
      for (size_t i = 0; i < lvs[l].delta.size(); ++i)
        for (int comp = 0; comp < 3; ++comp) {
          auto f = [&](double x) {
            auto copy = lvs;
            if (comp < 2)
              copy[l].delta.values()[i][comp] = x;
            else
              copy[l].certainty.values()[i] = x;
            return loss_fine(copy, lambda, mu).loss;
          };
          const double x0 = comp < 2 ? lvs[l].delta.values()[i][comp] : lvs[l].certainty.values()[i];
          analytic.push_back(comp < 2 ? r.grad_delta[l].values()[i][comp] : r.grad_certainty[l].values()[i]);
          numeric.push_back(oracle::central_difference(f, x0, 1e-6));
        }
    worst = std::max(worst, oracle::relative_error(analytic, numeric));
    ++checked;
  }
  return worst;
}

// --- robust fits -----------------------------------------------------------

int stage2_monte_carlo() {
  std::mt19937_64 rng(2001);
  std::uniform_real_distribution<double> ang(-kPi, kPi), sc(0.5, 2.0), tr(-50, 50), px(0, 224);
  int ok = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const Affine2D truth{ang(rng), sc(rng), tr(rng), tr(rng)};
    std::vector<Vec2> src, dst;
    for (int i = 0; i < 100; ++i) {
      src.emplace_back(px(rng), px(rng));
      dst.push_back(i < 30 ? Vec2(px(rng), px(rng))
                           : oracle::affine_apply(truth.alpha, truth.scale, truth.t_u, truth.t_v, src.back()));
    }
    RansacConfig cfg;  // 500 iterations, 2 px
    cfg.seed = static_cast<std::uint64_t>(trial);
    const RansacFit f = fit_similarity_ransac(src, dst, cfg);
    ok += std::abs(wrap_angle(f.affine.alpha - truth.alpha)) <= 0.02 && std::abs(f.affine.scale / truth.scale - 1) <= 0.02 &&
          std::abs(f.affine.t_u - truth.t_u) <= 1 && std::abs(f.affine.t_v - truth.t_v) <= 1;
  }
  return ok;
}

int pnp_monte_carlo(const Intrinsics& k) {
  std::mt19937_64 rng(2002);
  std::normal_distribution<double> noise(0.0, 0.5);
  std::uniform_real_distribution<double> ux(0, 640), uy(0, 480), off(-0.08, 0.08), pt(-0.06, 0.06);
  int ok = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Pose gt;
    gt.rotation = random_rotation(rng);
    gt.translation = Vec3(off(rng), off(rng), 0.6);
    std::vector<Pair2D3D> pairs;
    for (int i = 0; i < 200; ++i) {
      const Vec3 x(pt(rng), pt(rng), pt(rng));
      Vec2 p = oracle::project(k, gt, x);
      if (i % 10 < 3)
        p = Vec2(ux(rng), uy(rng));
      else
        p += Vec2(noise(rng), noise(rng));
      pairs.push_back({p, x, 1.0});
    }
    PnpConfig cfg;
    cfg.seed = static_cast<std::uint64_t>(trial);
    const PoseEstimate e = pnp_ransac(pairs, k, cfg);
    ok += rotation_error_deg(e.pose.rotation, gt.rotation) < 1.0 &&
          (e.pose.translation - gt.translation).norm() < 0.01 * gt.translation.norm();
  }
  return ok;
}

// --- oracle equivalences ---------------------------------------------------

struct OracleGaps {
  double correspondence = 0, score = 0, volume = 0, epe = 0;
};

OracleGaps oracle_gaps() {
  OracleGaps g;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const FeatureMap o = oracle::random_features(16, 16, 32, 3000 + seed, 0.6);
    const FeatureMap t = oracle::random_features(16, 16, 32, 3100 + seed, 0.6);
    const CorrespondenceMap a = correspondence_map(normalized(o), normalized(t));
    const std::vector<double> want = oracle::correspondence(o, t);
    for (size_t i = 0; i < want.size(); ++i) g.correspondence = std::max(g.correspondence, std::abs(a.values[i] - want[i]));
    g.score = std::max(g.score, std::abs(template_score(normalized(o), normalized(t)) - oracle::template_score(o, t)));
    const CorrelationPyramid pyr(o, t, 4);
    for (int k = 0; k < 4; ++k) {
      const std::vector<float> got = pyr.materialize(k);
      const std::vector<double> vol = oracle::correlation_volume(o, t, k);
      for (size_t i = 0; i < vol.size(); ++i) g.volume = std::max(g.volume, std::abs(got[i] - vol[i]));
    }
    std::mt19937_64 rng(3200 + seed);
    std::uniform_real_distribution<double> u(-20, 20);
    PositionMap p(16, 16), q(16, 16);
    Mask m(16, 16, 0);
    std::vector<Vec2> pa, qa;
    std::vector<std::uint8_t> ma;
    for (int i = 0; i < 256; ++i) {
      p.values()[i] = Vec2(u(rng), u(rng));
      q.values()[i] = Vec2(u(rng), u(rng));
      m.values()[i] = (i == 0) || u(rng) > 0;
      pa.push_back(p.values()[i]);
      qa.push_back(q.values()[i]);
      ma.push_back(m.values()[i]);
    }
    g.epe = std::max(g.epe, std::abs(epe(p, q, m) - oracle::epe(pa, qa, ma)));
  }
  return g;
}

// --- exact recovery --------------------------------------------------------

int exact_recovery(const SuiteConfig& base) {
  PipelineConfig c = base.pipeline;
  c.features.observation_noise = 0.0;
  const Mesh mesh = suite_mesh(base);
  const TemplateSet set = onboard(mesh, c);
  std::mt19937_64 rng(4001);
  std::uniform_int_distribution<int> pick(0, static_cast<int>(set.views.size()) - 1);
  int ok = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const Pose& pose = set.views[pick(rng)].pose;
    Observation obs;
    obs.view = render_crop(mesh, pose, c.intrinsics, c.crop_size);
    obs.gt_pose = pose;
    obs.noise_seed = static_cast<std::uint64_t>(trial);
    const EstimateResult r = estimate(obs, set);
    ok += r.pose && rotation_error_deg(r.pose->pose.rotation, pose.rotation) < 0.5 &&
          translation_error(r.pose->pose, pose) < 0.005 * pose.translation.norm();
  }
  return ok;
}

}  // namespace

int main() {
  const fs::path work = oracle::temp_dir("acceptance");
  const SuiteConfig suite;  // 200 scenes, seed 2024, level-2 templates, noise 0.05

  {
    const double in = infonce_worst(), sm = smooth_worst(), geo = geodesic_worst(), fine = fine_worst();
    report("loss-gradients", std::max({in, sm, geo, fine}) < 1e-4,
           fmt("max rel err infonce %.2e smooth %.2e geodesic %.2e fine %.2e (< 1e-4, 100 each)", in, sm, geo, fine));
  }
  {
    const int s2 = stage2_monte_carlo(), pnp = pnp_monte_carlo(suite.pipeline.intrinsics);
    report("robust-fit-monte-carlo", s2 >= 99 && pnp >= 99,
           fmt("stage2 %d/100 (0.02 rad, 2%%, 1 px), pnp %d/100 (1 deg, 1%%); need >= 99", s2, pnp));
  }
  {
    const OracleGaps g = oracle_gaps();
    report("oracle-equivalences",
           g.correspondence <= 1e-6 && g.score <= 1e-6 && g.volume <= 1e-5 && g.epe <= 1e-9,
           fmt("corr %.1e (1e-6) score %.1e (1e-6) volume %.1e (1e-5) epe %.1e (1e-9)", g.correspondence, g.score,
               g.volume, g.epe));
  }
  {
    const int ok = exact_recovery(suite);
    report("exact-recovery", ok == 100, fmt("%d/100 within 0.5 deg and 0.5%% of distance", ok));
  }

  SuiteConfig serial = suite;
  serial.workers = 1;
  const auto t0 = std::chrono::steady_clock::now();
  const Aggregate a = run_experiment(serial, work / "w1");
  const double runtime = seconds_since(t0);
  report("epe-monotone", a.epe_stage1 > a.epe_stage2 && a.epe_stage2 > a.epe_stage3 && runtime < 300,
         fmt("stage1 %.3f > stage2 %.3f > stage3 %.3f px, %.0f s on one core (< 300)", a.epe_stage1, a.epe_stage2,
             a.epe_stage3, runtime));
  report("pose-accuracy-ordering", a.ar >= a.ar_stage1 + 0.10,
         fmt("AR stage3 %.4f vs stage1 %.4f (need +0.10)", a.ar, a.ar_stage1));

  SuiteConfig parallel = suite;
  parallel.workers = 3;
  run_experiment(parallel, work / "w3");
  const bool same = read_text(work / "w1" / "aggregate.json") == read_text(work / "w3" / "aggregate.json");
  report("determinism", same, same ? "aggregate.json identical for 1 and 3 workers" : "aggregate.json differs");

  SuiteConfig sweep = suite;
  sweep.pipeline.diagnostic_poses = false;
  const std::vector<SweepPoint> pts = sweep_templates(sweep, work / "sweep");
  bool monotone = true;
  std::string detail;
  for (size_t i = 0; i < pts.size(); ++i) {
    detail += fmt("K=%d AR %.4f  ", pts[i].templates, pts[i].result.ar);
    if (i > 0 && pts[i].result.ar < pts[i - 1].result.ar - 0.01) monotone = false;
  }
  report("template-count-monotone", monotone, detail + "(no drop > 0.01)");

  return failures == 0 ? 0 : 1;
}
