#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "picopose/pipeline.hpp"

namespace picopose {

struct SuiteConfig {
  int scenes = 200;
  std::uint64_t seed = 2024;
  Vec3 half_axes{0.06, 0.045, 0.03};  // synthetic object, meters
  QueryPoseConfig query;
  PipelineConfig pipeline;
  int workers = 1;
  std::vector<int> sweep_counts{2, 6, 42, 162};
};

nlohmann::json to_json(const SuiteConfig& s);
SuiteConfig suite_config_from_json(const nlohmann::json& j, SuiteConfig base = {});

Mesh suite_mesh(const SuiteConfig& s);

// Seeded observation crops with ground-truth poses; scene i depends only on
// (seed, i).
std::vector<Observation> make_suite(const SuiteConfig& s, const Mesh& mesh);

struct PoseErrors {
  bool ok = false;
  double mssd = 0.0;  // meters
  double mspd = 0.0;  // pixels
  double translation = 0.0;
  double rotation_deg = 0.0;
};

struct SceneRecord {
  int index = 0;
  int nearest_template = -1;
  int chosen_template = -1;
  PoseErrors final_pose;
  PoseErrors stage1_pose;
  PoseErrors stage2_pose;
  std::optional<double> epe_stage1;
  std::optional<double> epe_stage2;
  std::optional<double> epe_stage3;
  std::vector<double> epe_blocks;
  bool stage2_fallback = false;
  int fine_pairs = 0;
  int inliers = 0;
  double ms_total = 0.0;
};

// Runs estimate on every observation with `workers` threads; record i always
// describes observation i.
std::vector<SceneRecord> run_suite(const std::vector<Observation>& scenes, const TemplateSet& set, int workers);

nlohmann::json to_json(const SceneRecord& r, bool with_timings = true);

struct Aggregate {
  int scenes = 0;
  int failures = 0;
  double epe_stage1 = 0.0;
  double epe_stage2 = 0.0;
  double epe_stage3 = 0.0;
  std::vector<double> epe_blocks;
  double ar_mssd = 0.0;
  double ar_mspd = 0.0;
  double ar = 0.0;               // mean of the two
  double ar_stage1 = 0.0;        // Stage-1 correspondences through PnP
  double ar_stage2 = 0.0;
  double translation_accuracy = 0.0;
  double rotation_median_deg = 0.0;
};

Aggregate aggregate(const std::vector<SceneRecord>& records, double diameter, int image_cols);
nlohmann::json to_json(const Aggregate& a);

// Writes records.jsonl and aggregate.json into `out` when given.
Aggregate run_experiment(const SuiteConfig& s, const std::optional<std::filesystem::path>& out = std::nullopt);

struct SweepPoint {
  int templates = 0;
  Aggregate result;
};

// Same scenes for every template count; writes sweep.json when `out` is given.
std::vector<SweepPoint> sweep_templates(const SuiteConfig& s,
                                        const std::optional<std::filesystem::path>& out = std::nullopt);

}  // namespace picopose
