#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "picopose/grid.hpp"

namespace picopose {

// Grid of D-dimensional descriptors with a foreground flag per cell.
struct FeatureMap {
  int rows = 0;
  int cols = 0;
  int dim = 0;
  int patch_size = 0;  // pixels per cell; 0 when the cell size is not integral
  std::vector<float> values;        // rows * cols * dim, row-major
  std::vector<std::uint8_t> mask;   // rows * cols

  FeatureMap() = default;
  FeatureMap(int rows, int cols, int dim, int patch_size);

  int cells() const { return rows * cols; }
  float* at(int cell) { return values.data() + static_cast<size_t>(cell) * dim; }
  const float* at(int cell) const { return values.data() + static_cast<size_t>(cell) * dim; }
  const float* at(int r, int c) const { return at(r * cols + c); }
  int foreground_count() const;

  // Row-major view as a (cells x dim) matrix.
  Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> matrix() const {
    return {values.data(), cells(), dim};
  }
};

// Unit-normalizes every descriptor. Zero vectors stay zero and leave FG.
void normalize(FeatureMap& f);
FeatureMap normalized(FeatureMap f);

// Seeded random-Fourier encoder of 3D points shared by every view of an
// object: a point maps to the same noiseless descriptor in any view.
class ProceduralEncoder {
 public:
  ProceduralEncoder(int dim, int frequencies, double length_scale, std::uint64_t basis_seed);

  int dim() const { return dim_; }
  double length_scale() const { return length_scale_; }
  // Unit-norm descriptor of each point, written row-major into `out`.
  void encode(std::span<const Vec3> points, std::span<float> out) const;

 private:
  int dim_;
  double length_scale_;
  Eigen::MatrixXd frequencies_;   // F x 3, already divided by the length scale
  Eigen::VectorXd phases_;        // F
  Eigen::MatrixXf projection_;    // dim x 2F; empty when 2F == dim
};

struct ProceduralFeatureOptions {
  int rows = 16;
  int cols = 16;
  double noise_sigma = 0.0;   // per-component Gaussian noise
  std::uint64_t seed = 0;     // noise and background population
  double min_coverage = 0.5;  // fraction of masked pixels for a foreground cell
};

// Cell descriptors from a per-pixel surface-point map: foreground cells
// encode their mean masked 3D point; background cells draw from an
// independent seeded population.
FeatureMap procedural_features(const Grid<Vec3f>& xyz, const Mask& mask, const ProceduralEncoder& encoder,
                               const ProceduralFeatureOptions& options);

// Observation-by-template cosine similarities (rows: observation cells).
struct CorrespondenceMap {
  int rows = 0;
  int cols = 0;
  std::vector<float> values;
  float operator()(int j, int k) const { return values[static_cast<size_t>(j) * cols + k]; }
};

// A = F_obs F_tpl^T over normalized features.
CorrespondenceMap correspondence_map(const FeatureMap& obs, const FeatureMap& tmpl);

// Mean over foreground observation cells of the best cosine similarity to
// any template cell (template foreground only when requested).
double template_score(const FeatureMap& obs, const FeatureMap& tmpl, bool template_foreground_only = false);

struct RankedTemplate {
  int index = 0;
  double score = 0.0;
};

// Descending score, ties by lower index. Template maps must be normalized.
std::vector<RankedTemplate> select_best_template(const FeatureMap& obs, std::span<const FeatureMap> templates,
                                                 int top_k, bool template_foreground_only = false);

struct CoarsePair {
  int obs_cell = 0;
  int tmpl_cell = 0;
  double similarity = 0.0;
  Vec2 obs_pixel;   // cell centers in crop coordinates
  Vec2 tmpl_pixel;
};

struct CellGrid {
  int rows = 0;
  int cols = 0;
  double cell_size = 1.0;  // pixels
  Vec2 center(int cell) const {
    return {(cell % cols + 0.5) * cell_size, (cell / cols + 0.5) * cell_size};
  }
};

// Argmax template cell per foreground observation cell. Empty `tmpl_mask`
// searches every template cell.
std::vector<CoarsePair> coarse_correspondences(const CorrespondenceMap& a, std::span<const std::uint8_t> obs_mask,
                                               std::span<const std::uint8_t> tmpl_mask, double min_sim,
                                               const CellGrid& obs_grid, const CellGrid& tmpl_grid);

struct InfoNceRow {
  std::vector<double> similarities;
  int positive = 0;
};

struct InfoNceResult {
  double loss = 0.0;
  std::vector<std::vector<double>> gradient;  // d loss / d similarity, per row
};

InfoNceResult loss_coarse_infonce(std::span<const InfoNceRow> rows, double temperature);

// Rows of the correspondence map with the given (obs cell, template cell) positives.
std::vector<InfoNceRow> infonce_rows(const CorrespondenceMap& a, std::span<const std::pair<int, int>> positives);

// PICOFEAT binary format: "PICOFEAT", u8 version 1, u32 rows, cols, dim,
// patch_size, f32 descriptors row-major, then rows*cols mask bytes.
void save_features(const FeatureMap& f, const std::filesystem::path& path);
FeatureMap load_features(const std::filesystem::path& path);

struct FeatureHeader {
  int rows = 0;
  int cols = 0;
  int dim = 0;
  int patch_size = 0;
};

// Checks magic, version, sizes and payload length without keeping the data.
FeatureHeader validate_features_file(const std::filesystem::path& path);

}  // namespace picopose
