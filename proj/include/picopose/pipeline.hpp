#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "picopose/features.hpp"
#include "picopose/geometry.hpp"
#include "picopose/pnp.hpp"
#include "picopose/stage2.hpp"
#include "picopose/stage3.hpp"
#include "picopose/synth.hpp"

namespace picopose {

struct FeatureConfig {
  int coarse_dim = 64;
  double coarse_length_scale = 0.08;  // times the object diameter
  int block_dim = 256;
  double block_length_scale = 1.6;    // times diameter / block rows
  double observation_noise = 0.05;
  double template_noise = 0.0;
  std::uint64_t basis_seed = 7;
};

struct PipelineConfig {
  int image_rows = 480;
  int image_cols = 640;
  Intrinsics intrinsics{600.0, 600.0, 320.0, 240.0};
  int crop_size = 224;
  int patch_size = 14;
  int template_level = 2;
  int template_count = 0;  // overrides the level when nonzero (2, 6, 12, 42, 162)
  double template_distance = 0.65;
  int top_k = 5;
  FeatureConfig features;
  double min_similarity = 0.3;
  bool score_template_foreground_only = false;
  RansacConfig stage2{500, 7.0, 0, 11};
  std::vector<int> block_sizes{16, 32, 64};
  RefineConfig refine;
  double certainty_threshold = 0.5;
  PnpConfig pnp;
  double lambda = 1.0;
  double mu = 1.0;
  bool diagnostic_poses = true;  // also solve PnP from Stage-1 and Stage-2 correspondences
  int hypothesis_threads = 1;

  void validate() const;
  int coarse_cells() const { return crop_size / patch_size; }
  int templates() const;
};

nlohmann::json to_json(const PipelineConfig& c);
// Fields absent from `j` keep the values already in `base`.
PipelineConfig pipeline_config_from_json(const nlohmann::json& j, PipelineConfig base = {});

// Onboarded object: upright template views and their coarse features.
struct TemplateSet {
  Mesh mesh;
  PipelineConfig config;
  std::vector<View> views;
  std::vector<FeatureMap> coarse;  // normalized
};

TemplateSet onboard(const Mesh& mesh, const PipelineConfig& config);

// Template store directory: store.json, object.obj and per-template
// PICOFEAT / PGM / PICOXYZ files. Loading re-renders the views and takes the
// coarse features from the stored files.
void save_template_set(const TemplateSet& set, const std::filesystem::path& dir);
TemplateSet load_template_set(const std::filesystem::path& dir);

struct Observation {
  View view;                         // crop mask and frame; xyz when features are procedural
  std::optional<FeatureMap> coarse;  // externally supplied coarse features
  std::uint64_t noise_seed = 0;
  std::optional<Pose> gt_pose;
};

struct HypothesisSummary {
  int template_index = 0;
  double score = 0.0;
  int coarse_pairs = 0;
  bool stage2_fallback = false;
  int stage2_inliers = 0;
  int pairs = 0;
  int inliers = -1;
  double reproj_rms = 0.0;
  std::string error;
};

struct StageDiagnostics {
  int template_index = -1;
  Affine2D affine;
  bool stage2_fallback = false;
  int coarse_pairs = 0;
  int stage2_inliers = 0;
  int fine_pairs = 0;
  std::optional<double> epe_stage1;
  std::optional<double> epe_stage2;
  std::optional<double> epe_stage3;
  std::vector<double> epe_blocks;
  std::optional<PoseEstimate> stage1_pose;
  std::optional<PoseEstimate> stage2_pose;
  std::vector<HypothesisSummary> hypotheses;
  double ms_stage1 = 0.0;
  double ms_stage2 = 0.0;
  double ms_stage3 = 0.0;
  double ms_pnp = 0.0;
  double ms_total = 0.0;
};

struct EstimateResult {
  std::optional<PoseEstimate> pose;  // empty when every hypothesis failed
  StageDiagnostics diagnostics;
  PositionMap positions;             // winning hypothesis, crop resolution
  CertaintyMap certainty;
};

// Runs all stages. Never throws kNoPose; an empty `pose` reports it instead
// so the diagnostics survive.
EstimateResult estimate(const Observation& obs, const TemplateSet& set);

// Coarse observation features: the supplied map, or procedural ones from xyz.
FeatureMap observation_features(const Observation& obs, const TemplateSet& set);

nlohmann::json to_json(const StageDiagnostics& d, bool with_timings = true);

}  // namespace picopose
