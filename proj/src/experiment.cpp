#include "picopose/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>
#include <thread>

#include "picopose/error.hpp"
#include "picopose/io.hpp"
#include "picopose/metrics.hpp"
#include "picopose/seed.hpp"

namespace picopose {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

PoseErrors pose_errors(const std::optional<PoseEstimate>& est, const Pose& gt, const Intrinsics& k,
                       const std::vector<Vec3>& vertices) {
  PoseErrors e;
  if (!est) return e;
  e.ok = true;
  e.mssd = mssd(est->pose, gt, vertices);
  try {
    e.mspd = mspd(est->pose, gt, k, vertices);
  } catch (const Error&) {
    e.mspd = kInf;
  }
  e.translation = translation_error(est->pose, gt);
  e.rotation_deg = rotation_error_deg(est->pose.rotation, gt.rotation);
  return e;
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double ar_of(const std::vector<SceneRecord>& records, PoseErrors SceneRecord::*which, double diameter,
             int image_cols, double* ar_mssd = nullptr, double* ar_mspd = nullptr) {
  std::vector<double> es, ep;
  for (const auto& r : records) {
    const PoseErrors& e = r.*which;
    es.push_back(e.ok ? e.mssd : kInf);
    ep.push_back(e.ok ? e.mspd : kInf);
  }
  const double a = average_recall(es, mssd_thresholds(), diameter);
  const double b = average_recall(ep, mspd_thresholds(), image_cols / kMspdReferenceWidth);
  if (ar_mssd) *ar_mssd = a;
  if (ar_mspd) *ar_mspd = b;
  return 0.5 * (a + b);
}

nlohmann::json errors_json(const PoseErrors& e) {
  if (!e.ok) return {{"ok", false}};
  return {{"ok", true},
          {"mssd", e.mssd},
          {"mspd", std::isfinite(e.mspd) ? nlohmann::json(e.mspd) : nlohmann::json(nullptr)},
          {"translation", e.translation},
          {"rotation_deg", e.rotation_deg}};
}

}  // namespace

nlohmann::json to_json(const SuiteConfig& s) {
  return {{"scenes", s.scenes},
          {"seed", s.seed},
          {"half_axes", {s.half_axes.x(), s.half_axes.y(), s.half_axes.z()}},
          {"query",
           {{"min_distance", s.query.min_distance},
            {"max_distance", s.query.max_distance},
            {"max_offset_u", s.query.max_offset_u},
            {"max_offset_v", s.query.max_offset_v}}},
          {"pipeline", to_json(s.pipeline)},
          {"workers", s.workers},
          {"sweep_counts", s.sweep_counts}};
}

SuiteConfig suite_config_from_json(const nlohmann::json& j, SuiteConfig s) {
  if (!j.is_object()) throw Error(ErrorKind::kInvalidParameter, "suite config must be a JSON object");
  reject_unknown_keys(j, to_json(s), "");
  try {
    s.scenes = j.value("scenes", s.scenes);
    s.seed = j.value("seed", s.seed);
    if (j.contains("half_axes")) {
      const auto v = j["half_axes"].get<std::vector<double>>();
      if (v.size() != 3) throw Error(ErrorKind::kInvalidParameter, "half_axes needs 3 values");
      s.half_axes = Vec3(v[0], v[1], v[2]);
    }
    if (j.contains("query")) {
      const auto& q = j["query"];
      s.query.min_distance = q.value("min_distance", s.query.min_distance);
      s.query.max_distance = q.value("max_distance", s.query.max_distance);
      s.query.max_offset_u = q.value("max_offset_u", s.query.max_offset_u);
      s.query.max_offset_v = q.value("max_offset_v", s.query.max_offset_v);
    }
    if (j.contains("pipeline")) s.pipeline = pipeline_config_from_json(j["pipeline"], s.pipeline);
    s.workers = j.value("workers", s.workers);
    if (j.contains("sweep_counts")) s.sweep_counts = j["sweep_counts"].get<std::vector<int>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kInvalidParameter, std::string("bad suite config: ") + e.what());
  }
  if (s.scenes < 1 || s.workers < 1) throw Error(ErrorKind::kInvalidParameter, "scenes and workers must be positive");
  return s;
}

Mesh suite_mesh(const SuiteConfig& s) { return make_blob(derive_seed(s.seed, 0xb10b), s.half_axes); }

std::vector<Observation> make_suite(const SuiteConfig& s, const Mesh& mesh) {
  const PipelineConfig& cfg = s.pipeline;
  std::vector<Observation> out;
  out.reserve(s.scenes);
  for (int i = 0; i < s.scenes; ++i) {
    std::mt19937_64 rng(derive_seed(s.seed, static_cast<std::uint64_t>(i) + 1));
    Observation obs;
    for (int attempt = 0;; ++attempt) {
      const Pose pose = random_query_pose(rng, cfg.intrinsics, s.query);
      try {
        obs.view = render_crop(mesh, pose, cfg.intrinsics, cfg.crop_size);
        obs.gt_pose = pose;
        break;
      } catch (const Error&) {
        if (attempt > 100) throw Error(ErrorKind::kDegenerateScene, "cannot render scene " + std::to_string(i));
      }
    }
    obs.noise_seed = rng();
    out.push_back(std::move(obs));
  }
  return out;
}

std::vector<SceneRecord> run_suite(const std::vector<Observation>& scenes, const TemplateSet& set, int workers) {
  if (workers < 1) throw Error(ErrorKind::kInvalidParameter, "workers must be at least 1");
  const std::vector<Vec3> vertices = subsample_vertices(set.mesh.vertices);
  std::vector<Pose> poses;
  for (const auto& v : set.views) poses.push_back(v.pose);
  std::vector<SceneRecord> records(scenes.size());
  std::atomic<size_t> next{0};
  auto work = [&] {
    for (size_t i = next++; i < scenes.size(); i = next++) {
      const Observation& obs = scenes[i];
      const Intrinsics& k = set.config.intrinsics;
      SceneRecord& r = records[i];
      r.index = static_cast<int>(i);
      r.nearest_template = nearest_viewpoint(*obs.gt_pose, poses);
      const EstimateResult res = estimate(obs, set);
      const StageDiagnostics& d = res.diagnostics;
      r.chosen_template = d.template_index;
      r.final_pose = pose_errors(res.pose, *obs.gt_pose, k, vertices);
      r.stage1_pose = pose_errors(d.stage1_pose, *obs.gt_pose, k, vertices);
      r.stage2_pose = pose_errors(d.stage2_pose, *obs.gt_pose, k, vertices);
      r.epe_stage1 = d.epe_stage1;
      r.epe_stage2 = d.epe_stage2;
      r.epe_stage3 = d.epe_stage3;
      r.epe_blocks = d.epe_blocks;
      r.stage2_fallback = d.stage2_fallback;
      r.fine_pairs = d.fine_pairs;
      r.inliers = res.pose ? res.pose->inliers : 0;
      r.ms_total = d.ms_total;
    }
  };
  const int n = std::min<int>(workers, std::max<int>(1, static_cast<int>(scenes.size())));
  if (n == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < n; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  return records;
}

nlohmann::json to_json(const SceneRecord& r, bool with_timings) {
  nlohmann::json j{{"index", r.index},
                   {"nearest_template", r.nearest_template},
                   {"chosen_template", r.chosen_template},
                   {"pose", errors_json(r.final_pose)},
                   {"stage1_pose", errors_json(r.stage1_pose)},
                   {"stage2_pose", errors_json(r.stage2_pose)},
                   {"stage2_fallback", r.stage2_fallback},
                   {"fine_pairs", r.fine_pairs},
                   {"inliers", r.inliers}};
  nlohmann::json e;
  if (r.epe_stage1) e["stage1"] = *r.epe_stage1;
  if (r.epe_stage2) e["stage2"] = *r.epe_stage2;
  if (r.epe_stage3) e["stage3"] = *r.epe_stage3;
  e["blocks"] = r.epe_blocks;
  j["epe"] = e;
  if (with_timings) j["ms_total"] = r.ms_total;
  return j;
}

Aggregate aggregate(const std::vector<SceneRecord>& records, double diameter, int image_cols) {
  if (records.empty()) throw Error(ErrorKind::kEmptyInput, "no records to aggregate");
  Aggregate a;
  a.scenes = static_cast<int>(records.size());
  std::vector<double> e1, e2, e3, terr, rerr;
  size_t blocks = 0;
  for (const auto& r : records) blocks = std::max(blocks, r.epe_blocks.size());
  std::vector<std::vector<double>> eb(blocks);
  for (const auto& r : records) {
    a.failures += !r.final_pose.ok;
    // Stage EPEs are compared on scenes where every stage reports one.
    if (r.epe_stage1 && r.epe_stage2 && r.epe_stage3) {
      e1.push_back(*r.epe_stage1);
      e2.push_back(*r.epe_stage2);
      e3.push_back(*r.epe_stage3);
      for (size_t b = 0; b < r.epe_blocks.size(); ++b) eb[b].push_back(r.epe_blocks[b]);
    }
    terr.push_back(r.final_pose.ok ? r.final_pose.translation : kInf);
    rerr.push_back(r.final_pose.ok ? r.final_pose.rotation_deg : kInf);
  }
  a.epe_stage1 = mean_of(e1);
  a.epe_stage2 = mean_of(e2);
  a.epe_stage3 = mean_of(e3);
  for (const auto& v : eb) a.epe_blocks.push_back(mean_of(v));
  a.ar = ar_of(records, &SceneRecord::final_pose, diameter, image_cols, &a.ar_mssd, &a.ar_mspd);
  a.ar_stage1 = ar_of(records, &SceneRecord::stage1_pose, diameter, image_cols);
  a.ar_stage2 = ar_of(records, &SceneRecord::stage2_pose, diameter, image_cols);
  a.translation_accuracy = translation_accuracy(terr);
  std::sort(rerr.begin(), rerr.end());
  a.rotation_median_deg = rerr[rerr.size() / 2];
  return a;
}

nlohmann::json to_json(const Aggregate& a) {
  return {{"scenes", a.scenes},
          {"failures", a.failures},
          {"epe", {{"stage1", a.epe_stage1}, {"stage2", a.epe_stage2}, {"stage3", a.epe_stage3}, {"blocks", a.epe_blocks}}},
          {"ar", {{"mssd", a.ar_mssd}, {"mspd", a.ar_mspd}, {"mean", a.ar}}},
          {"ar_stage1_pairs", a.ar_stage1},
          {"ar_stage2_pairs", a.ar_stage2},
          {"translation_accuracy_5cm", a.translation_accuracy},
          {"rotation_median_deg", std::isfinite(a.rotation_median_deg) ? nlohmann::json(a.rotation_median_deg)
                                                                        : nlohmann::json(nullptr)}};
}

Aggregate run_experiment(const SuiteConfig& s, const std::optional<std::filesystem::path>& out) {
  const Mesh mesh = suite_mesh(s);
  const TemplateSet set = onboard(mesh, s.pipeline);
  const std::vector<Observation> scenes = make_suite(s, mesh);
  const std::vector<SceneRecord> records = run_suite(scenes, set, s.workers);
  const Aggregate a = aggregate(records, mesh.diameter, s.pipeline.image_cols);
  if (out) {
    std::error_code ec;
    std::filesystem::create_directories(*out, ec);
    if (ec) throw Error(ErrorKind::kIo, "cannot create " + out->string() + ": " + ec.message());
    std::ostringstream lines;
    for (const auto& r : records) lines << to_json(r).dump() << "\n";
    write_text(*out / "records.jsonl", lines.str());
    nlohmann::json agg = to_json(a);
    agg["config"] = to_json(s);
    agg["config"].erase("workers");
    write_json(*out / "aggregate.json", agg);
  }
  return a;
}

std::vector<SweepPoint> sweep_templates(const SuiteConfig& s, const std::optional<std::filesystem::path>& out) {
  const Mesh mesh = suite_mesh(s);
  const std::vector<Observation> scenes = make_suite(s, mesh);
  std::vector<SweepPoint> points;
  nlohmann::json report = nlohmann::json::array();
  for (int count : s.sweep_counts) {
    PipelineConfig cfg = s.pipeline;
    cfg.template_count = count;
    const TemplateSet set = onboard(mesh, cfg);
    const std::vector<SceneRecord> records = run_suite(scenes, set, s.workers);
    points.push_back({count, aggregate(records, mesh.diameter, cfg.image_cols)});
    report.push_back({{"templates", count}, {"aggregate", to_json(points.back().result)}});
  }
  if (out) {
    std::error_code ec;
    std::filesystem::create_directories(*out, ec);
    if (ec) throw Error(ErrorKind::kIo, "cannot create " + out->string() + ": " + ec.message());
    write_json(*out / "sweep.json", {{"sweep", report}});
  }
  return points;
}

}  // namespace picopose
