#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "picopose/features.hpp"
#include "picopose/geometry.hpp"

namespace picopose {

// P(r, c) = M (c + 0.5, r + 0.5, 1)^T.
PositionMap position_map_from_affine(const Affine2D& a, int rows, int cols);

// Bilinear sampling at continuous positions (cell centers at +0.5). A sample
// is invalid, and zero-filled, when any corner with nonzero weight falls
// outside the source grid.
struct WarpedFeatures {
  FeatureMap features;  // mask holds validity
};
WarpedFeatures gather_bilinear(const FeatureMap& src, const PositionMap& p);
Grid<double> gather_bilinear(const Grid<double>& src, const PositionMap& p, Mask* valid = nullptr);

// Resamples a position map to a coarser or finer grid, rescaling the stored
// coordinates into the new grid's units.
PositionMap resize_positions(const PositionMap& p, int rows, int cols);
// Upsamples an offset field to rows x cols (bilinear, linear extrapolation at
// the borders) and rescales the offsets by the resolution ratio.
PositionMap upsample_offsets(const PositionMap& delta, int rows, int cols);
// Bilinear upsampling with clamp-to-edge.
CertaintyMap upsample_certainty(const CertaintyMap& c, int rows, int cols);

// All-pairs cosine similarities between observation cells and template cells,
// with template dimensions average-pooled by 2 per level. Entries are formed
// on demand: pooling the volume equals correlating against pooled template
// features, so only the pooled features are stored.
class CorrelationPyramid {
 public:
  CorrelationPyramid(const FeatureMap& obs, const FeatureMap& tmpl, int num_levels);

  int levels() const { return static_cast<int>(tmpl_.size()); }
  int obs_rows() const { return obs_.rows; }
  int obs_cols() const { return obs_.cols; }
  int rows(int level) const { return tmpl_[level].rows; }
  int cols(int level) const { return tmpl_[level].cols; }
  int dim() const { return obs_.dim; }
  const FeatureMap& observation() const { return obs_; }
  const FeatureMap& pooled_template(int level) const { return tmpl_[level]; }

  float correlation(int level, int obs_cell, int tr, int tc) const;
  // Dense (obs cells x level cells) volume, row-major.
  std::vector<float> materialize(int level) const;

 private:
  FeatureMap obs_;
  std::vector<FeatureMap> tmpl_;
};

// Per observation cell: (2r+1)^2 bilinear taps per level, dy outer and dx
// inner, around P scaled to each level. Invalid taps are 0 with flag 0.
struct CorrelationLookup {
  int rows = 0;
  int cols = 0;
  int levels = 0;
  int radius = 0;
  std::vector<float> values;
  std::vector<std::uint8_t> valid;

  int taps() const { return (2 * radius + 1) * (2 * radius + 1); }
  size_t index(int cell, int level, int dy, int dx) const {
    return ((static_cast<size_t>(cell) * levels + level) * (2 * radius + 1) + (dy + radius)) * (2 * radius + 1) +
           (dx + radius);
  }
};

CorrelationLookup correlation_lookup(const CorrelationPyramid& pyr, const PositionMap& p, int radius);

struct RefineConfig {
  int radius = 4;
  double temperature = 0.1;
  double margin_offset = 0.1;  // subtracted from the peak margin before the logistic
  double offset_gate = 0.5;    // offsets with lower block certainty are not applied
  void validate() const;
};

struct BlockRefinement {
  PositionMap delta;       // block-grid units
  CertaintyMap certainty;
};

// Peak of the level-0 correlation window around P (block-grid coordinates)
// with a parabolic sub-cell fit; certainty from the margin over the best
// tap more than one cell from the peak.
BlockRefinement refine_block(const CorrelationPyramid& pyr, const PositionMap& p, const RefineConfig& cfg);

struct RefineResult {
  PositionMap positions;
  CertaintyMap certainty;               // mean of the upsampled block certainties
  std::vector<PositionMap> per_block;   // full-resolution P after each block
  std::vector<CertaintyMap> block_certainty;  // upsampled, per block
};

RefineResult refine(const PositionMap& p0, std::span<const CorrelationPyramid> pyramids, const RefineConfig& cfg);

struct FineLevel {
  PositionMap delta;
  CertaintyMap certainty;
  PositionMap delta_gt;
  CertaintyMap certainty_gt;
};

struct FineLossResult {
  double loss = 0.0;
  double l1 = 0.0;
  double bce = 0.0;
  std::vector<PositionMap> grad_delta;
  std::vector<CertaintyMap> grad_certainty;
};

// Sum over levels of lambda * sum |C_gt * (dP - dP_gt)| + mu * mean BCE(C, C_gt).
FineLossResult loss_fine(std::span<const FineLevel> levels, double lambda = 1.0, double mu = 1.0);

}  // namespace picopose
