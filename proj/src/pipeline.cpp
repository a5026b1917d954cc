#include "picopose/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <thread>

#include "picopose/error.hpp"
#include "picopose/io.hpp"
#include "picopose/metrics.hpp"
#include "picopose/seed.hpp"

namespace picopose {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

ProceduralEncoder coarse_encoder(const TemplateSet& set) {
  const FeatureConfig& f = set.config.features;
  return ProceduralEncoder(f.coarse_dim, std::max(1, f.coarse_dim / 2), f.coarse_length_scale * set.mesh.diameter,
                           f.basis_seed);
}

ProceduralEncoder block_encoder(const TemplateSet& set, int block) {
  const FeatureConfig& f = set.config.features;
  const int rows = set.config.block_sizes[block];
  return ProceduralEncoder(f.block_dim, std::max(1, f.block_dim / 2),
                           f.block_length_scale * set.mesh.diameter / rows, derive_seed(f.basis_seed, block + 1));
}

// Bilinear resampling of a feature grid to rows x cols (clamp-to-edge).
FeatureMap resample_features(const FeatureMap& src, int rows, int cols) {
  FeatureMap out(rows, cols, src.dim, 0);
  const double sy = static_cast<double>(src.rows) / rows, sx = static_cast<double>(src.cols) / cols;
  for (int r = 0; r < rows; ++r) {
    const double y = std::clamp((r + 0.5) * sy - 0.5, 0.0, src.rows - 1.0);
    const int y0 = std::min(static_cast<int>(y), src.rows - 1), y1 = std::min(y0 + 1, src.rows - 1);
    const float wy = static_cast<float>(y - y0);
    for (int c = 0; c < cols; ++c) {
      const double x = std::clamp((c + 0.5) * sx - 0.5, 0.0, src.cols - 1.0);
      const int x0 = std::min(static_cast<int>(x), src.cols - 1), x1 = std::min(x0 + 1, src.cols - 1);
      const float wx = static_cast<float>(x - x0);
      float* d = out.at(r * cols + c);
      const float *a = src.at(y0, x0), *b = src.at(y0, x1), *e = src.at(y1, x0), *g = src.at(y1, x1);
      for (int k = 0; k < src.dim; ++k) {
        d[k] = (1 - wy) * ((1 - wx) * a[k] + wx * b[k]) + wy * ((1 - wx) * e[k] + wx * g[k]);
      }
      const int nr = std::min(src.rows - 1, static_cast<int>((r + 0.5) * sy));
      const int nc = std::min(src.cols - 1, static_cast<int>((c + 0.5) * sx));
      out.mask[r * cols + c] = src.mask[nr * src.cols + nc];
    }
  }
  return out;
}

bool procedural(const Observation& obs) { return !obs.coarse.has_value(); }

FeatureMap observation_block(const Observation& obs, const FeatureMap& coarse, const TemplateSet& set, int block) {
  const int rows = set.config.block_sizes[block];
  if (!procedural(obs)) return resample_features(coarse, rows, rows);
  ProceduralFeatureOptions o{rows, rows, set.config.features.observation_noise, derive_seed(obs.noise_seed, block + 1)};
  return procedural_features(obs.view.xyz, obs.view.mask, block_encoder(set, block), o);
}

FeatureMap template_block(const Observation& obs, const TemplateSet& set, int t, int block) {
  const int rows = set.config.block_sizes[block];
  if (!procedural(obs)) return resample_features(set.coarse[t], rows, rows);
  const View& v = set.views[t];
  ProceduralFeatureOptions o{rows, rows, set.config.features.template_noise,
                             derive_seed(derive_seed(set.config.features.basis_seed, 1000 + t), block + 1)};
  return procedural_features(v.xyz, v.mask, block_encoder(set, block), o);
}

struct Hypothesis {
  HypothesisSummary summary;
  std::optional<PoseEstimate> pose;
  StageDiagnostics diag;
  PositionMap positions;
  CertaintyMap certainty;
};

std::optional<PoseEstimate> try_pnp(const std::vector<Pair2D3D>& pairs, const PipelineConfig& cfg,
                                    std::string* error = nullptr) {
  try {
    return pnp_ransac(pairs, cfg.intrinsics, cfg.pnp);
  } catch (const Error& e) {
    if (error) *error = e.what();
    return std::nullopt;
  }
}

Hypothesis run_hypothesis(const Observation& obs, const FeatureMap& f_obs, const TemplateSet& set,
                          const RankedTemplate& ranked) {
  const PipelineConfig& cfg = set.config;
  const int t = ranked.index;
  const View& tmpl = set.views[t];
  const int size = cfg.crop_size;
  Hypothesis h;
  h.summary.template_index = t;
  h.summary.score = ranked.score;
  StageDiagnostics& d = h.diag;
  d.template_index = t;

  auto t0 = Clock::now();
  const FeatureMap& f_tpl = set.coarse[t];
  const CorrespondenceMap a = correspondence_map(f_obs, f_tpl);
  const CellGrid og{f_obs.rows, f_obs.cols, static_cast<double>(size) / f_obs.cols};
  const CellGrid tg{f_tpl.rows, f_tpl.cols, static_cast<double>(size) / f_tpl.cols};
  const std::vector<CoarsePair> coarse = coarse_correspondences(a, f_obs.mask, f_tpl.mask, cfg.min_similarity, og, tg);
  d.coarse_pairs = h.summary.coarse_pairs = static_cast<int>(coarse.size());
  d.ms_stage1 = ms_since(t0);

  t0 = Clock::now();
  std::vector<Vec2> src, dst;
  for (const auto& p : coarse) {
    src.push_back(p.obs_pixel);
    dst.push_back(p.tmpl_pixel);
  }
  try {
    const RansacFit fit = fit_similarity_ransac(src, dst, cfg.stage2);
    d.affine = fit.affine;
    d.stage2_inliers = fit.inlier_count;
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::kNoModel && e.kind() != ErrorKind::kInsufficientData) throw;
    d.affine = Affine2D{};
    d.stage2_fallback = true;
  }
  h.summary.stage2_fallback = d.stage2_fallback;
  h.summary.stage2_inliers = d.stage2_inliers;
  const PositionMap p0 = position_map_from_affine(d.affine, size, size);
  d.ms_stage2 = ms_since(t0);

  t0 = Clock::now();
  std::vector<CorrelationPyramid> pyramids;
  for (size_t l = 0; l < cfg.block_sizes.size(); ++l) {
    const int li = static_cast<int>(l);
    pyramids.emplace_back(observation_block(obs, f_obs, set, li), template_block(obs, set, t, li), li + 2);  // block l (1-based) gets l + 1 levels
  }
  RefineResult refined = refine(p0, pyramids, cfg.refine);
  d.ms_stage3 = ms_since(t0);

  t0 = Clock::now();
  const Affine2D crop = obs.view.crop;
  const std::vector<Pair2D3D> fine =
      assemble_pairs(refined.positions, refined.certainty, tmpl, obs.view.mask, crop, cfg.certainty_threshold);
  d.fine_pairs = h.summary.pairs = static_cast<int>(fine.size());
  h.pose = try_pnp(fine, cfg, &h.summary.error);
  if (h.pose) {
    h.pose->hypothesis_index = t;
    h.summary.inliers = h.pose->inliers;
    h.summary.reproj_rms = h.pose->reproj_rms;
  }
  d.ms_pnp = ms_since(t0);

  if (cfg.diagnostic_poses) {
    std::vector<Pair2D3D> p1;
    for (const auto& p : coarse) {
      Vec3 x;
      if (template_point(tmpl, p.tmpl_pixel, x)) p1.push_back({affine_apply(crop, p.obs_pixel), x, p.similarity});
    }
    d.stage1_pose = try_pnp(p1, cfg);
    const CertaintyMap ones(size, size, 1.0);
    d.stage2_pose = try_pnp(assemble_pairs(p0, ones, tmpl, obs.view.mask, crop, cfg.certainty_threshold), cfg);
  }

  const bool have_gt = obs.gt_pose && !obs.view.xyz.empty() && !obs.view.triangle.empty();
  if (have_gt) {
    const auto points = sample_surface_points(obs.view);
    const SimilarityFit fit =
        gt_affine_between(*obs.gt_pose, tmpl.pose, cfg.intrinsics, crop, tmpl.crop, points);
    PositionMap flow;
    CertaintyMap cert;
    ground_truth_flow(obs.view, tmpl, set.mesh, fit.affine, flow, cert);
    Mask valid(size, size, 0);
    for (size_t i = 0; i < cert.size(); ++i) valid.values()[i] = cert.values()[i] > 0.5;
    std::vector<Vec2> est, ref;
    for (const auto& p : coarse) {
      Vec2 q;
      if (gt_correspondence(obs.view, tmpl, set.mesh, p.obs_pixel, q)) {
        est.push_back(p.tmpl_pixel);
        ref.push_back(q);
      }
    }
    if (!est.empty()) d.epe_stage1 = epe(est, ref);
    if (count_set(valid) > 0) {
      d.epe_stage2 = epe(p0, flow, valid);
      d.epe_stage3 = epe(refined.positions, flow, valid);
      for (const auto& pb : refined.per_block) d.epe_blocks.push_back(epe(pb, flow, valid));
    }
  }
  h.positions = std::move(refined.positions);
  h.certainty = std::move(refined.certainty);
  return h;
}

void check_grid(const PipelineConfig& c) {
  if (c.image_rows <= 0 || c.image_cols <= 0) throw Error(ErrorKind::kInvalidParameter, "image size must be positive");
  if (c.crop_size <= 0 || c.patch_size <= 0 || c.crop_size % c.patch_size != 0) {
    throw Error(ErrorKind::kInvalidParameter, "crop size must be divisible by the patch size");
  }
}

}  // namespace

void PipelineConfig::validate() const {
  check_grid(*this);
  intrinsics.validate();
  if (top_k < 1) throw Error(ErrorKind::kInvalidParameter, "top_k must be at least 1");
  if (block_sizes.empty()) throw Error(ErrorKind::kInvalidParameter, "at least one refinement block is required");
  for (size_t i = 0; i < block_sizes.size(); ++i) {
    if (block_sizes[i] <= 0 || block_sizes[i] > crop_size || (i > 0 && block_sizes[i] <= block_sizes[i - 1])) {
      throw Error(ErrorKind::kInvalidParameter, "block sizes must be positive, ascending and within the crop");
    }
  }
  if (features.coarse_dim < 2 || features.block_dim < 2 || !(features.coarse_length_scale > 0) ||
      !(features.block_length_scale > 0) || features.observation_noise < 0 || features.template_noise < 0) {
    throw Error(ErrorKind::kInvalidParameter, "bad feature configuration");
  }
  if (certainty_threshold < 0.0 || certainty_threshold > 1.0) {
    throw Error(ErrorKind::kInvalidParameter, "certainty threshold must be in [0, 1]");
  }
  if (!(template_distance > 0.0)) throw Error(ErrorKind::kInvalidParameter, "template distance must be positive");
  if (lambda < 0.0 || mu < 0.0) throw Error(ErrorKind::kInvalidParameter, "loss weights must be non-negative");
  if (hypothesis_threads < 1) throw Error(ErrorKind::kInvalidParameter, "hypothesis_threads must be at least 1");
  stage2.validate();
  refine.validate();
  pnp.validate();
  (void)templates();
}

int PipelineConfig::templates() const {
  if (template_count != 0) {
    switch (template_count) {
      case 2: case 6: case 12: case 42: case 162: return template_count;
      default: throw Error(ErrorKind::kInvalidParameter, "template_count must be one of 2, 6, 12, 42, 162");
    }
  }
  switch (template_level) {
    case 0: return 12;
    case 1: return 42;
    case 2: return 162;
    default: throw Error(ErrorKind::kInvalidParameter, "template_level must be 0, 1 or 2");
  }
}

nlohmann::json to_json(const PipelineConfig& c) {
  const FeatureConfig& f = c.features;
  return {
      {"image", {{"rows", c.image_rows}, {"cols", c.image_cols}}},
      {"intrinsics", to_json(c.intrinsics)},
      {"crop_size", c.crop_size},
      {"patch_size", c.patch_size},
      {"templates", {{"level", c.template_level}, {"count", c.template_count}, {"distance", c.template_distance}}},
      {"top_k", c.top_k},
      {"features",
       {{"coarse_dim", f.coarse_dim},
        {"coarse_length_scale", f.coarse_length_scale},
        {"block_dim", f.block_dim},
        {"block_length_scale", f.block_length_scale},
        {"observation_noise", f.observation_noise},
        {"template_noise", f.template_noise},
        {"basis_seed", f.basis_seed}}},
      {"stage1", {{"min_similarity", c.min_similarity}, {"template_foreground_only", c.score_template_foreground_only}}},
      {"stage2",
       {{"iterations", c.stage2.iterations},
        {"inlier_threshold", c.stage2.inlier_threshold},
        {"min_inliers", c.stage2.min_inliers},
        {"seed", c.stage2.seed}}},
      {"stage3",
       {{"block_sizes", c.block_sizes},
        {"radius", c.refine.radius},
        {"temperature", c.refine.temperature},
        {"margin_offset", c.refine.margin_offset},
        {"offset_gate", c.refine.offset_gate},
        {"certainty_threshold", c.certainty_threshold}}},
      {"pnp",
       {{"iterations", c.pnp.iterations},
        {"reproj_threshold", c.pnp.reproj_threshold},
        {"max_pairs", c.pnp.max_pairs},
        {"seed", c.pnp.seed}}},
      {"loss", {{"lambda", c.lambda}, {"mu", c.mu}}},
      {"diagnostic_poses", c.diagnostic_poses},
      {"hypothesis_threads", c.hypothesis_threads},
  };
}

namespace {

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out) {
  if (j.is_object() && j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

PipelineConfig pipeline_config_from_json(const nlohmann::json& j, PipelineConfig c) {
  if (!j.is_object()) throw Error(ErrorKind::kInvalidParameter, "pipeline config must be a JSON object");
  reject_unknown_keys(j, to_json(c), "");
  try {
    if (j.contains("image")) {
      read(j["image"], "rows", c.image_rows);
      read(j["image"], "cols", c.image_cols);
    }
    if (j.contains("intrinsics")) c.intrinsics = intrinsics_from_json(j["intrinsics"]);
    read(j, "crop_size", c.crop_size);
    read(j, "patch_size", c.patch_size);
    if (j.contains("templates")) {
      read(j["templates"], "level", c.template_level);
      read(j["templates"], "count", c.template_count);
      read(j["templates"], "distance", c.template_distance);
    }
    read(j, "top_k", c.top_k);
    if (j.contains("features")) {
      const auto& f = j["features"];
      read(f, "coarse_dim", c.features.coarse_dim);
      read(f, "coarse_length_scale", c.features.coarse_length_scale);
      read(f, "block_dim", c.features.block_dim);
      read(f, "block_length_scale", c.features.block_length_scale);
      read(f, "observation_noise", c.features.observation_noise);
      read(f, "template_noise", c.features.template_noise);
      read(f, "basis_seed", c.features.basis_seed);
    }
    if (j.contains("stage1")) {
      read(j["stage1"], "min_similarity", c.min_similarity);
      read(j["stage1"], "template_foreground_only", c.score_template_foreground_only);
    }
    if (j.contains("stage2")) {
      read(j["stage2"], "iterations", c.stage2.iterations);
      read(j["stage2"], "inlier_threshold", c.stage2.inlier_threshold);
      read(j["stage2"], "min_inliers", c.stage2.min_inliers);
      read(j["stage2"], "seed", c.stage2.seed);
    }
    if (j.contains("stage3")) {
      const auto& s = j["stage3"];
      read(s, "block_sizes", c.block_sizes);
      read(s, "radius", c.refine.radius);
      read(s, "temperature", c.refine.temperature);
      read(s, "margin_offset", c.refine.margin_offset);
      read(s, "offset_gate", c.refine.offset_gate);
      read(s, "certainty_threshold", c.certainty_threshold);
    }
    if (j.contains("pnp")) {
      read(j["pnp"], "iterations", c.pnp.iterations);
      read(j["pnp"], "reproj_threshold", c.pnp.reproj_threshold);
      read(j["pnp"], "max_pairs", c.pnp.max_pairs);
      read(j["pnp"], "seed", c.pnp.seed);
    }
    if (j.contains("loss")) {
      read(j["loss"], "lambda", c.lambda);
      read(j["loss"], "mu", c.mu);
    }
    read(j, "diagnostic_poses", c.diagnostic_poses);
    read(j, "hypothesis_threads", c.hypothesis_threads);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kInvalidParameter, std::string("bad pipeline config: ") + e.what());
  }
  c.validate();
  return c;
}

TemplateSet onboard(const Mesh& mesh, const PipelineConfig& config) {
  config.validate();
  TemplateSet set{mesh, config, {}, {}};
  const int count = config.templates();
  const std::vector<Pose> poses = config.template_count != 0
                                      ? sample_viewpoints_count(count, config.template_distance)
                                      : sample_viewpoints(config.template_level, config.template_distance);
  const ProceduralEncoder enc = coarse_encoder(set);
  const int cells = config.coarse_cells();
  for (int i = 0; i < count; ++i) {
    try {
      set.views.push_back(render_crop(mesh, poses[i], config.intrinsics, config.crop_size));
    } catch (const Error& e) {
      throw Error(e.kind(), "template " + std::to_string(i) + ": " + e.what());
    }
    ProceduralFeatureOptions o{cells, cells, config.features.template_noise,
                               derive_seed(config.features.basis_seed, 1000 + i)};
    set.coarse.push_back(normalized(procedural_features(set.views.back().xyz, set.views.back().mask, enc, o)));
  }
  return set;
}

void save_template_set(const TemplateSet& set, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "templates", ec);
  if (ec) throw Error(ErrorKind::kIo, "cannot create " + (dir / "templates").string() + ": " + ec.message());
  save_obj(set.mesh, dir / "object.obj");
  nlohmann::json templates = nlohmann::json::array();
  for (size_t i = 0; i < set.views.size(); ++i) {
    char stem[32];
    std::snprintf(stem, sizeof stem, "templates/t%03zu", i);
    const std::string s(stem);
    save_features(set.coarse[i], dir / (s + ".picofeat"));
    save_mask_pgm(set.views[i].mask, dir / (s + "_mask.pgm"));
    save_xyz(set.views[i].xyz, dir / (s + ".xyz"));
    templates.push_back({{"index", i},
                         {"pose", to_json(set.views[i].pose)},
                         {"crop", to_json(set.views[i].crop)},
                         {"features", s + ".picofeat"},
                         {"mask", s + "_mask.pgm"},
                         {"xyz", s + ".xyz"}});
  }
  write_json(dir / "store.json",
             {{"format", "picopose-store"}, {"version", 1}, {"mesh", "object.obj"}, {"config", to_json(set.config)},
              {"templates", templates}});
}

TemplateSet load_template_set(const std::filesystem::path& dir) {
  const nlohmann::json j = read_json(dir / "store.json");
  if (j.value("format", "") != "picopose-store") {
    throw Error(ErrorKind::kFormat, (dir / "store.json").string() + " is not a template store", 0);
  }
  const Mesh mesh = load_obj(dir / j.value("mesh", "object.obj"));
  const PipelineConfig cfg = pipeline_config_from_json(j.at("config"));
  TemplateSet set = onboard(mesh, cfg);
  const auto& templates = j.at("templates");
  if (templates.size() != set.views.size()) {
    throw Error(ErrorKind::kFormat, "store lists " + std::to_string(templates.size()) + " templates, config implies " +
                                        std::to_string(set.views.size()), 0);
  }
  for (size_t i = 0; i < templates.size(); ++i) {
    const auto path = dir / templates[i].at("features").get<std::string>();
    if (!std::filesystem::exists(path)) continue;
    FeatureMap f = load_features(path);
    if (f.rows != set.coarse[i].rows || f.cols != set.coarse[i].cols) {
      throw Error(ErrorKind::kFormat, path.string() + ": feature grid does not match the crop/patch size", 0);
    }
    set.coarse[i] = normalized(std::move(f));
  }
  return set;
}

FeatureMap observation_features(const Observation& obs, const TemplateSet& set) {
  if (obs.coarse) return normalized(*obs.coarse);
  if (obs.view.xyz.empty()) throw Error(ErrorKind::kInvalidParameter, "observation has neither features nor xyz");
  const int cells = set.config.coarse_cells();
  ProceduralFeatureOptions o{cells, cells, set.config.features.observation_noise, obs.noise_seed};
  return normalized(procedural_features(obs.view.xyz, obs.view.mask, coarse_encoder(set), o));
}

EstimateResult estimate(const Observation& obs, const TemplateSet& set) {
  const auto t0 = Clock::now();
  const PipelineConfig& cfg = set.config;
  if (obs.view.mask.empty() || count_set(obs.view.mask) == 0) {
    throw Error(ErrorKind::kEmptyForeground, "observation mask is empty");
  }
  if (!obs.view.mask.same_shape(cfg.crop_size, cfg.crop_size)) {
    throw Error(ErrorKind::kDimensionMismatch, "observation crop does not match the configured crop size");
  }
  const FeatureMap f_obs = observation_features(obs, set);
  if (f_obs.dim != set.coarse.front().dim) {
    throw Error(ErrorKind::kDimensionMismatch, "observation and template feature dimensions differ");
  }
  const std::vector<RankedTemplate> ranked =
      select_best_template(f_obs, set.coarse, cfg.top_k, cfg.score_template_foreground_only);
  const double ms_rank = ms_since(t0);

  std::vector<std::optional<Hypothesis>> hyps(ranked.size());
  std::vector<std::string> failures(ranked.size());
  auto run = [&](size_t i) {
    try {
      hyps[i] = run_hypothesis(obs, f_obs, set, ranked[i]);
    } catch (const Error& e) {
      failures[i] = e.what();
    }
  };
  const int threads = std::min<int>(cfg.hypothesis_threads, static_cast<int>(ranked.size()));
  if (threads <= 1) {
    for (size_t i = 0; i < ranked.size(); ++i) run(i);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < threads; ++w) {
      pool.emplace_back([&, w] {
        for (size_t i = w; i < ranked.size(); i += threads) run(i);
      });
    }
    for (auto& th : pool) th.join();
  }

  EstimateResult res;
  int best = -1;
  for (size_t i = 0; i < hyps.size(); ++i) {
    if (!hyps[i] || !hyps[i]->pose) continue;
    if (best < 0 || better_estimate(*hyps[i]->pose, *hyps[best]->pose)) best = static_cast<int>(i);
  }
  int shown = best;
  if (shown < 0) {
    for (size_t i = 0; i < hyps.size() && shown < 0; ++i) {
      if (hyps[i]) shown = static_cast<int>(i);
    }
  }
  if (shown >= 0) {
    res.diagnostics = hyps[shown]->diag;
    res.positions = hyps[shown]->positions;
    res.certainty = hyps[shown]->certainty;
    if (best >= 0) res.pose = hyps[best]->pose;
  }
  res.diagnostics.ms_stage1 += ms_rank;
  for (size_t i = 0; i < hyps.size(); ++i) {
    if (hyps[i]) {
      res.diagnostics.hypotheses.push_back(hyps[i]->summary);
    } else {
      HypothesisSummary s;
      s.template_index = ranked[i].index;
      s.score = ranked[i].score;
      s.error = failures[i];
      res.diagnostics.hypotheses.push_back(s);
    }
  }
  res.diagnostics.ms_total = ms_since(t0);
  return res;
}

nlohmann::json to_json(const StageDiagnostics& d, bool with_timings) {
  nlohmann::json j{{"template_index", d.template_index},
                   {"affine", to_json(d.affine)},
                   {"stage2_fallback", d.stage2_fallback},
                   {"coarse_pairs", d.coarse_pairs},
                   {"stage2_inliers", d.stage2_inliers},
                   {"fine_pairs", d.fine_pairs}};
  if (d.epe_stage1 || d.epe_stage2 || d.epe_stage3) {
    nlohmann::json e;
    if (d.epe_stage1) e["stage1"] = *d.epe_stage1;
    if (d.epe_stage2) e["stage2"] = *d.epe_stage2;
    if (d.epe_stage3) e["stage3"] = *d.epe_stage3;
    e["blocks"] = d.epe_blocks;
    j["epe"] = e;
  }
  if (d.stage1_pose) j["stage1_pose"] = to_json(*d.stage1_pose);
  if (d.stage2_pose) j["stage2_pose"] = to_json(*d.stage2_pose);
  nlohmann::json hs = nlohmann::json::array();
  for (const auto& h : d.hypotheses) {
    nlohmann::json x{{"template_index", h.template_index},
                     {"score", h.score},
                     {"coarse_pairs", h.coarse_pairs},
                     {"stage2_fallback", h.stage2_fallback},
                     {"stage2_inliers", h.stage2_inliers},
                     {"pairs", h.pairs},
                     {"inliers", h.inliers},
                     {"reproj_rms", h.reproj_rms}};
    if (!h.error.empty()) x["error"] = h.error;
    hs.push_back(x);
  }
  j["hypotheses"] = hs;
  if (with_timings) {
    j["timings_ms"] = {{"stage1", d.ms_stage1},
                       {"stage2", d.ms_stage2},
                       {"stage3", d.ms_stage3},
                       {"pnp", d.ms_pnp},
                       {"total", d.ms_total}};
  }
  return j;
}

}  // namespace picopose
