#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "picopose/error.hpp"
#include "picopose/experiment.hpp"
#include "picopose/io.hpp"
#include "picopose/pipeline.hpp"

namespace fs = std::filesystem;
using namespace picopose;

namespace {

constexpr int kExitNoPose = 2;
constexpr int kExitBadInput = 3;
constexpr int kExitIo = 4;

// A config file may hold a suite (with a "pipeline" object) or a bare pipeline.
SuiteConfig load_suite(const std::string& path) {
  if (path.empty()) return {};
  const nlohmann::json j = read_json(path);
  if (j.contains("pipeline")) return suite_config_from_json(j);
  SuiteConfig s;
  s.pipeline = pipeline_config_from_json(j);
  return s;
}

void draw_line(RgbImage& img, Vec2 a, Vec2 b, std::array<std::uint8_t, 3> rgb) {
  const int steps = static_cast<int>(std::ceil((b - a).cwiseAbs().maxCoeff())) + 1;
  if (steps > 4 * (img.rows + img.cols)) return;
  for (int i = 0; i <= steps; ++i) {
    const Vec2 p = a + (b - a) * (static_cast<double>(i) / steps);
    img.set(static_cast<int>(std::floor(p.y())), static_cast<int>(std::floor(p.x())), rgb[0], rgb[1], rgb[2]);
  }
}

void draw_wireframe(RgbImage& img, const Mesh& mesh, const Pose& pose, const Intrinsics& k,
                    std::array<std::uint8_t, 3> rgb) {
  for (const auto& t : mesh.triangles) {
    for (int e = 0; e < 3; ++e) {
      const Vec3 a = pose.apply(mesh.vertices[t[e]]), b = pose.apply(mesh.vertices[t[(e + 1) % 3]]);
      if (a.z() <= 0 || b.z() <= 0) continue;
      draw_line(img, project_camera(k, a), project_camera(k, b), rgb);
    }
  }
}

// Scene directory layout written by `gen`.
void write_scene(const fs::path& dir, const Observation& obs) {
  fs::create_directories(dir);
  save_mask_pgm(obs.view.mask, dir / "mask.pgm");
  save_xyz(obs.view.xyz, dir / "scene.xyz");
  write_json(dir / "scene.json", {{"crop", to_json(obs.view.crop)},
                                  {"intrinsics", to_json(obs.view.k)},
                                  {"noise_seed", obs.noise_seed}});
  if (obs.gt_pose) write_json(dir / "gt_pose.json", to_json(*obs.gt_pose));
}

Observation read_scene(const fs::path& dir, const TemplateSet& set, const std::string& features) {
  const nlohmann::json j = read_json(dir / "scene.json");
  Observation obs;
  obs.view.crop = affine_from_json(j.at("crop"));
  obs.view.k = j.contains("intrinsics") ? intrinsics_from_json(j["intrinsics"]) : set.config.intrinsics;
  obs.noise_seed = j.value("noise_seed", std::uint64_t{0});
  if (fs::exists(dir / "gt_pose.json")) {
    obs.gt_pose = pose_from_json(read_json(dir / "gt_pose.json"));
    // The triangle map is needed for ground-truth flow; the crop is recomputed
    // from the pose exactly as `gen` did.
    obs.view = render_crop(set.mesh, *obs.gt_pose, obs.view.k, set.config.crop_size);
  }
  obs.view.mask = load_mask_pgm(dir / "mask.pgm");
  if (!features.empty()) {
    obs.coarse = load_features(features);
  } else if (fs::exists(dir / "scene.xyz")) {
    obs.view.xyz = load_xyz(dir / "scene.xyz");
  }
  return obs;
}

int run(int argc, char** argv) {
  CLI::App app{"Three-stage correspondence pose estimation on synthetic scenes"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path;
  app.add_option("--config", config_path, "JSON config (suite or pipeline)");

  auto* gen = app.add_subcommand("gen", "write a synthetic object and scene suite");
  std::string gen_out;
  std::optional<int> scenes;
  std::optional<std::uint64_t> seed;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--scenes", scenes, "number of scenes");
  gen->add_option("--seed", seed, "suite seed");

  auto* ob = app.add_subcommand("onboard", "render and featurize templates into a store directory");
  std::string ob_mesh, ob_out;
  std::optional<int> level, count;
  ob->add_option("--mesh", ob_mesh, "OBJ mesh")->required();
  ob->add_option("--out", ob_out, "store directory")->required();
  ob->add_option("--level", level, "icosphere level (0, 1, 2)");
  ob->add_option("--templates", count, "template count (2, 6, 12, 42, 162)");

  auto* est = app.add_subcommand("estimate", "estimate the pose of one scene");
  std::string store, scene_dir, feat_path, dump_flow, dump_overlay, est_out;
  std::optional<int> top_k;
  est->add_option("--store", store, "template store directory")->required();
  est->add_option("--scene", scene_dir, "scene directory")->required();
  est->add_option("--features", feat_path, "PICOFEAT coarse features for the observation");
  est->add_option("--top-k", top_k, "template hypotheses");
  est->add_option("--dump-flow", dump_flow, "write the flow as a color-wheel PPM");
  est->add_option("--dump-overlay", dump_overlay, "write a wireframe reprojection PPM");
  est->add_option("--out", est_out, "write the pose JSON here instead of stdout");

  auto* ev = app.add_subcommand("eval", "run the seeded suite and write reports");
  std::string ev_out;
  std::optional<int> workers;
  ev->add_option("--out", ev_out, "report directory")->required();
  ev->add_option("--scenes", scenes, "number of scenes");
  ev->add_option("--seed", seed, "suite seed");
  ev->add_option("--workers", workers, "worker threads");
  ev->add_option("--top-k", top_k, "template hypotheses");

  auto* sw = app.add_subcommand("sweep-templates", "mean AR over template counts");
  std::string sw_out;
  std::vector<int> counts;
  sw->add_option("--out", sw_out, "report directory")->required();
  sw->add_option("--counts", counts, "template counts")->delimiter(',');
  sw->add_option("--scenes", scenes, "number of scenes");
  sw->add_option("--seed", seed, "suite seed");
  sw->add_option("--workers", workers, "worker threads");
  sw->add_option("--top-k", top_k, "template hypotheses");

  auto* vf = app.add_subcommand("validate-features", "check PICOFEAT files");
  std::vector<std::string> feat_files;
  vf->add_option("files", feat_files, "PICOFEAT files")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitBadInput;
  }

  SuiteConfig suite = load_suite(config_path);
  if (scenes) suite.scenes = *scenes;
  if (seed) suite.seed = *seed;
  if (workers) suite.workers = *workers;
  if (top_k) suite.pipeline.top_k = *top_k;
  if (!counts.empty()) suite.sweep_counts = counts;
  suite = suite_config_from_json(to_json(suite));  // validates the merged result

  if (*gen) {
    const Mesh mesh = suite_mesh(suite);
    fs::create_directories(gen_out);
    save_obj(mesh, fs::path(gen_out) / "object.obj");
    const auto obs = make_suite(suite, mesh);
    for (size_t i = 0; i < obs.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "scenes/%04zu", i);
      write_scene(fs::path(gen_out) / name, obs[i]);
    }
    write_json(fs::path(gen_out) / "suite.json", to_json(suite));
    std::cout << "wrote " << obs.size() << " scenes to " << gen_out << "\n";
    return 0;
  }
  if (*ob) {
    PipelineConfig cfg = suite.pipeline;
    if (level) {
      cfg.template_level = *level;
      cfg.template_count = 0;
    }
    if (count) cfg.template_count = *count;
    const TemplateSet set = onboard(load_obj(ob_mesh), cfg);
    save_template_set(set, ob_out);
    std::cout << "onboarded " << set.views.size() << " templates into " << ob_out << "\n";
    return 0;
  }
  if (*est) {
    TemplateSet set = load_template_set(store);
    if (!config_path.empty()) {
      const nlohmann::json j = read_json(config_path);
      set.config = pipeline_config_from_json(j.contains("pipeline") ? j["pipeline"] : j, set.config);
    }
    if (top_k) set.config.top_k = *top_k;
    set.config.validate();
    const Observation obs = read_scene(scene_dir, set, feat_path);
    const EstimateResult res = estimate(obs, set);
    nlohmann::json out{{"diagnostics", to_json(res.diagnostics)}};
    if (res.pose) out["estimate"] = to_json(*res.pose);
    const std::string text = out.dump(2) + "\n";
    if (est_out.empty()) {
      std::cout << text;
    } else {
      write_text(est_out, text);
    }
    if (!dump_flow.empty() && !res.positions.empty()) {
      save_ppm(flow_to_color(res.positions, obs.view.mask), dump_flow);
    }
    if (!dump_overlay.empty()) {
      const PipelineConfig& c = set.config;
      RgbImage img{c.image_rows, c.image_cols, std::vector<std::uint8_t>(size_t(c.image_rows) * c.image_cols * 3, 0)};
      for (int r = 0; r < obs.view.mask.rows(); ++r) {
        for (int col = 0; col < obs.view.mask.cols(); ++col) {
          if (!obs.view.mask(r, col)) continue;
          const Vec2 p = affine_apply(obs.view.crop, Vec2(col + 0.5, r + 0.5));
          img.set(static_cast<int>(p.y()), static_cast<int>(p.x()), 70, 70, 70);
        }
      }
      if (obs.gt_pose) draw_wireframe(img, set.mesh, *obs.gt_pose, c.intrinsics, {220, 60, 60});
      if (res.pose) draw_wireframe(img, set.mesh, res.pose->pose, c.intrinsics, {60, 220, 60});
      save_ppm(img, dump_overlay);
    }
    return res.pose ? 0 : kExitNoPose;
  }
  if (*ev) {
    const Aggregate a = run_experiment(suite, fs::path(ev_out));
    std::cout << to_json(a).dump(2) << "\n";
    return 0;
  }
  if (*sw) {
    for (const auto& p : sweep_templates(suite, fs::path(sw_out))) {
      std::cout << "templates " << p.templates << "  AR " << p.result.ar << "\n";
    }
    return 0;
  }
  if (*vf) {
    int bad = 0;
    for (const auto& f : feat_files) {
      try {
        const FeatureHeader h = validate_features_file(f);
        std::cout << f << ": ok " << h.rows << "x" << h.cols << "x" << h.dim << " patch " << h.patch_size << "\n";
      } catch (const Error& e) {
        std::cout << f << ": " << e.what() << "\n";
        bad = e.kind() == ErrorKind::kIo ? kExitIo : kExitBadInput;
      }
    }
    return bad;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const Error& e) {
    std::cerr << "error (" << to_string(e.kind()) << "): " << e.what() << "\n";
    switch (e.kind()) {
      case ErrorKind::kNoPose: return kExitNoPose;
      case ErrorKind::kIo: return kExitIo;
      default: return kExitBadInput;
    }
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error (io): " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitBadInput;
  }
}
