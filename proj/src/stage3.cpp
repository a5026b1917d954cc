#include "picopose/stage3.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "picopose/error.hpp"

namespace picopose {

namespace {

// Corners and weights of a bilinear sample at continuous (x, y).
struct Bilinear {
  int x0 = 0, x1 = 0, y0 = 0, y1 = 0;
  double wx = 0.0, wy = 0.0;  // weights of x1 / y1
  bool valid = false;
};

Bilinear bilinear_at(double x, double y, int rows, int cols) {
  Bilinear b;
  if (!std::isfinite(x) || !std::isfinite(y)) return b;
  const double ix = x - 0.5, iy = y - 0.5;
  const double fx0 = std::floor(ix), fy0 = std::floor(iy);
  if (fx0 < -1.0 || fy0 < -1.0 || fx0 > cols || fy0 > rows) return b;
  b.x0 = static_cast<int>(fx0);
  b.y0 = static_cast<int>(fy0);
  b.wx = ix - fx0;
  b.wy = iy - fy0;
  b.x1 = b.wx > 0.0 ? b.x0 + 1 : b.x0;
  b.y1 = b.wy > 0.0 ? b.y0 + 1 : b.y0;
  b.valid = b.x0 >= 0 && b.y0 >= 0 && b.x1 < cols && b.y1 < rows;
  return b;
}

// Bilinear sample at index coordinates with linear extrapolation past the border.
template <typename T>
T sample_extrapolate(const Grid<T>& g, double ix, double iy) {
  const int x0 = g.cols() > 1 ? std::clamp(static_cast<int>(std::floor(ix)), 0, g.cols() - 2) : 0;
  const int y0 = g.rows() > 1 ? std::clamp(static_cast<int>(std::floor(iy)), 0, g.rows() - 2) : 0;
  const int x1 = std::min(x0 + 1, g.cols() - 1), y1 = std::min(y0 + 1, g.rows() - 1);
  const double fx = g.cols() > 1 ? ix - x0 : 0.0, fy = g.rows() > 1 ? iy - y0 : 0.0;
  return (1 - fy) * ((1 - fx) * g(y0, x0) + fx * g(y0, x1)) + fy * ((1 - fx) * g(y1, x0) + fx * g(y1, x1));
}

double sample_clamped(const Grid<double>& g, double ix, double iy) {
  ix = std::clamp(ix, 0.0, g.cols() - 1.0);
  iy = std::clamp(iy, 0.0, g.rows() - 1.0);
  return sample_extrapolate(g, ix, iy);
}

float dot(const float* a, const float* b, int n) {
  return Eigen::Map<const Eigen::VectorXf>(a, n).dot(Eigen::Map<const Eigen::VectorXf>(b, n));
}

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

FeatureMap pool2(const FeatureMap& f) {
  const int rows = std::max(1, f.rows / 2), cols = std::max(1, f.cols / 2);
  FeatureMap out(rows, cols, f.dim, f.patch_size * 2);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      float* dst = out.at(r * cols + c);
      int n = 0;
      for (int sr = 2 * r; sr < std::min(2 * r + 2, f.rows); ++sr) {
        for (int sc = 2 * c; sc < std::min(2 * c + 2, f.cols); ++sc) {
          const float* src = f.at(sr, sc);
          for (int d = 0; d < f.dim; ++d) dst[d] += src[d];
          out.mask[r * cols + c] |= f.mask[sr * f.cols + sc];
          ++n;
        }
      }
      for (int d = 0; d < f.dim; ++d) dst[d] /= static_cast<float>(n);
    }
  }
  return out;
}

}  // namespace

PositionMap position_map_from_affine(const Affine2D& a, int rows, int cols) {
  if (rows <= 0 || cols <= 0) throw Error(ErrorKind::kInvalidParameter, "position map size must be positive");
  const AffineMatrix m = affine_matrix(a);
  PositionMap p(rows, cols);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) p(r, c) = m.leftCols<2>() * Vec2(c + 0.5, r + 0.5) + m.col(2);
  }
  return p;
}

WarpedFeatures gather_bilinear(const FeatureMap& src, const PositionMap& p) {
  WarpedFeatures out{FeatureMap(p.rows(), p.cols(), src.dim, 0)};
  FeatureMap& f = out.features;
  for (int r = 0; r < p.rows(); ++r) {
    for (int c = 0; c < p.cols(); ++c) {
      const Bilinear b = bilinear_at(p(r, c).x(), p(r, c).y(), src.rows, src.cols);
      if (!b.valid) continue;
      const int cell = r * p.cols() + c;
      f.mask[cell] = 1;
      float* dst = f.at(cell);
      const float w00 = static_cast<float>((1 - b.wx) * (1 - b.wy)), w01 = static_cast<float>(b.wx * (1 - b.wy));
      const float w10 = static_cast<float>((1 - b.wx) * b.wy), w11 = static_cast<float>(b.wx * b.wy);
      const float *a00 = src.at(b.y0, b.x0), *a01 = src.at(b.y0, b.x1);
      const float *a10 = src.at(b.y1, b.x0), *a11 = src.at(b.y1, b.x1);
      for (int d = 0; d < src.dim; ++d) dst[d] = w00 * a00[d] + w01 * a01[d] + w10 * a10[d] + w11 * a11[d];
    }
  }
  return out;
}

Grid<double> gather_bilinear(const Grid<double>& src, const PositionMap& p, Mask* valid) {
  Grid<double> out(p.rows(), p.cols(), 0.0);
  if (valid) *valid = Mask(p.rows(), p.cols(), 0);
  for (int r = 0; r < p.rows(); ++r) {
    for (int c = 0; c < p.cols(); ++c) {
      const Bilinear b = bilinear_at(p(r, c).x(), p(r, c).y(), src.rows(), src.cols());
      if (!b.valid) continue;
      out(r, c) = (1 - b.wy) * ((1 - b.wx) * src(b.y0, b.x0) + b.wx * src(b.y0, b.x1)) +
                  b.wy * ((1 - b.wx) * src(b.y1, b.x0) + b.wx * src(b.y1, b.x1));
      if (valid) (*valid)(r, c) = 1;
    }
  }
  return out;
}

PositionMap resize_positions(const PositionMap& p, int rows, int cols) {
  if (rows <= 0 || cols <= 0 || p.empty()) throw Error(ErrorKind::kInvalidParameter, "bad resize target");
  const double rx = static_cast<double>(p.cols()) / cols, ry = static_cast<double>(p.rows()) / rows;
  PositionMap out(rows, cols);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const Vec2 v = sample_extrapolate(p, (c + 0.5) * rx - 0.5, (r + 0.5) * ry - 0.5);
      out(r, c) = Vec2(v.x() / rx, v.y() / ry);
    }
  }
  return out;
}

PositionMap upsample_offsets(const PositionMap& delta, int rows, int cols) {
  if (rows <= 0 || cols <= 0 || delta.empty()) throw Error(ErrorKind::kInvalidParameter, "bad upsample target");
  const double rx = static_cast<double>(cols) / delta.cols(), ry = static_cast<double>(rows) / delta.rows();
  PositionMap out(rows, cols);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const Vec2 v = sample_extrapolate(delta, (c + 0.5) / rx - 0.5, (r + 0.5) / ry - 0.5);
      out(r, c) = Vec2(v.x() * rx, v.y() * ry);
    }
  }
  return out;
}

CertaintyMap upsample_certainty(const CertaintyMap& c, int rows, int cols) {
  if (rows <= 0 || cols <= 0 || c.empty()) throw Error(ErrorKind::kInvalidParameter, "bad upsample target");
  const double rx = static_cast<double>(cols) / c.cols(), ry = static_cast<double>(rows) / c.rows();
  CertaintyMap out(rows, cols);
  for (int r = 0; r < rows; ++r) {
    for (int col = 0; col < cols; ++col) {
      out(r, col) = std::clamp(sample_clamped(c, (col + 0.5) / rx - 0.5, (r + 0.5) / ry - 0.5), 0.0, 1.0);
    }
  }
  return out;
}

CorrelationPyramid::CorrelationPyramid(const FeatureMap& obs, const FeatureMap& tmpl, int num_levels)
    : obs_(normalized(obs)) {
  if (obs.dim != tmpl.dim) throw Error(ErrorKind::kDimensionMismatch, "block feature dimensions differ");
  if (num_levels < 1) throw Error(ErrorKind::kInvalidParameter, "pyramid needs at least one level");
  tmpl_.push_back(normalized(tmpl));
  for (int k = 1; k < num_levels; ++k) tmpl_.push_back(pool2(tmpl_.back()));
}

float CorrelationPyramid::correlation(int level, int obs_cell, int tr, int tc) const {
  const FeatureMap& t = tmpl_[level];
  return dot(obs_.at(obs_cell), t.at(tr, tc), obs_.dim);
}

std::vector<float> CorrelationPyramid::materialize(int level) const {
  const FeatureMap& t = tmpl_.at(level);
  std::vector<float> v(static_cast<size_t>(obs_.cells()) * t.cells());
  using RowMatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<RowMatrixF>(v.data(), obs_.cells(), t.cells()).noalias() = obs_.matrix() * t.matrix().transpose();
  return v;
}

CorrelationLookup correlation_lookup(const CorrelationPyramid& pyr, const PositionMap& p, int radius) {
  if (radius < 1) throw Error(ErrorKind::kInvalidParameter, "lookup radius must be at least 1");
  if (!p.same_shape(pyr.obs_rows(), pyr.obs_cols())) {
    throw Error(ErrorKind::kDimensionMismatch, "position map does not match the observation grid");
  }
  CorrelationLookup out{p.rows(), p.cols(), pyr.levels(), radius, {}, {}};
  const size_t total = static_cast<size_t>(p.size()) * out.levels * out.taps();
  out.values.assign(total, 0.0f);
  out.valid.assign(total, 0);
  for (int cell = 0; cell < static_cast<int>(p.size()); ++cell) {
    const Vec2 pos = p.values()[cell];
    for (int k = 0; k < pyr.levels(); ++k) {
      const double s = std::ldexp(1.0, -k);
      for (int dy = -radius; dy <= radius; ++dy) {
        for (int dx = -radius; dx <= radius; ++dx) {
          const Bilinear b = bilinear_at(pos.x() * s + dx, pos.y() * s + dy, pyr.rows(k), pyr.cols(k));
          if (!b.valid) continue;
          const double v = (1 - b.wy) * ((1 - b.wx) * pyr.correlation(k, cell, b.y0, b.x0) +
                                         b.wx * pyr.correlation(k, cell, b.y0, b.x1)) +
                           b.wy * ((1 - b.wx) * pyr.correlation(k, cell, b.y1, b.x0) +
                                   b.wx * pyr.correlation(k, cell, b.y1, b.x1));
          const size_t i = out.index(cell, k, dy, dx);
          out.values[i] = static_cast<float>(v);
          out.valid[i] = 1;
        }
      }
    }
  }
  return out;
}

void RefineConfig::validate() const {
  if (radius < 1) throw Error(ErrorKind::kInvalidParameter, "refine radius must be at least 1");
  if (!(temperature > 0.0)) throw Error(ErrorKind::kInvalidParameter, "certainty temperature must be positive");
  if (offset_gate < 0.0 || offset_gate > 1.0) throw Error(ErrorKind::kInvalidParameter, "offset gate not in [0, 1]");
}

BlockRefinement refine_block(const CorrelationPyramid& pyr, const PositionMap& p, const RefineConfig& cfg) {
  cfg.validate();
  if (!p.same_shape(pyr.obs_rows(), pyr.obs_cols())) {
    throw Error(ErrorKind::kDimensionMismatch, "position map does not match the observation grid");
  }
  const int r = cfg.radius, w = 2 * r + 1;
  const int trows = pyr.rows(0), tcols = pyr.cols(0);
  BlockRefinement out{PositionMap(p.rows(), p.cols(), Vec2::Zero()), CertaintyMap(p.rows(), p.cols(), 0.0)};
  constexpr float kNone = -std::numeric_limits<float>::infinity();
  std::vector<float> win(static_cast<size_t>(w) * w);
  for (int cell = 0; cell < static_cast<int>(p.size()); ++cell) {
    const Vec2 pos = p.values()[cell];
    if (!pos.allFinite()) continue;
    // Window anchored on the nearest template cell so every tap is a grid sample.
    const double ax_d = std::floor(pos.x()), ay_d = std::floor(pos.y());
    if (ax_d < -r || ay_d < -r || ax_d > tcols + r || ay_d > trows + r) continue;
    const int ax = static_cast<int>(ax_d), ay = static_cast<int>(ay_d);
    int best = -1;
    float peak = kNone;
    for (int dy = -r; dy <= r; ++dy) {
      for (int dx = -r; dx <= r; ++dx) {
        const int tx = ax + dx, ty = ay + dy;
        float v = kNone;
        if (tx >= 0 && ty >= 0 && tx < tcols && ty < trows) v = pyr.correlation(0, cell, ty, tx);
        const int i = (dy + r) * w + (dx + r);
        win[i] = v;
        if (v > peak) {
          peak = v;
          best = i;
        }
      }
    }
    if (best < 0) continue;
    const int bx = best % w, by = best / w;
    float second = kNone;
    for (int i = 0; i < w * w; ++i) {
      if (std::max(std::abs(i % w - bx), std::abs(i / w - by)) > 1) second = std::max(second, win[i]);
    }
    if (second == kNone) second = 0.0f;

    auto subcell = [&](float lo, float mid, float hi) {
      if (lo == kNone || hi == kNone) return 0.0;
      const double den = static_cast<double>(lo) - 2.0 * mid + hi;
      if (den >= 0.0) return 0.0;
      return std::clamp(0.5 * (static_cast<double>(lo) - hi) / den, -0.5, 0.5);
    };
    const double sx = subcell(bx > 0 ? win[best - 1] : kNone, peak, bx < w - 1 ? win[best + 1] : kNone);
    const double sy = subcell(by > 0 ? win[best - w] : kNone, peak, by < w - 1 ? win[best + w] : kNone);
    const Vec2 target(ax + (bx - r) + sx + 0.5, ay + (by - r) + sy + 0.5);
    Vec2 d = target - pos;
    d.x() = std::clamp(d.x(), -static_cast<double>(r), static_cast<double>(r));
    d.y() = std::clamp(d.y(), -static_cast<double>(r), static_cast<double>(r));
    out.delta.values()[cell] = d;
    out.certainty.values()[cell] = logistic((peak - second - cfg.margin_offset) / cfg.temperature);
  }
  return out;
}

RefineResult refine(const PositionMap& p0, std::span<const CorrelationPyramid> pyramids, const RefineConfig& cfg) {
  if (pyramids.empty()) throw Error(ErrorKind::kInvalidParameter, "refine needs at least one block");
  for (size_t l = 1; l < pyramids.size(); ++l) {
    if (pyramids[l].obs_rows() < pyramids[l - 1].obs_rows()) {
      throw Error(ErrorKind::kInvalidParameter, "block resolutions must be ascending");
    }
  }
  RefineResult res;
  res.positions = p0;
  res.certainty = CertaintyMap(p0.rows(), p0.cols(), 0.0);
  for (const auto& pyr : pyramids) {
    const PositionMap pl = resize_positions(res.positions, pyr.obs_rows(), pyr.obs_cols());
    BlockRefinement block = refine_block(pyr, pl, cfg);
    for (size_t i = 0; i < block.delta.size(); ++i) {
      if (block.certainty.values()[i] < cfg.offset_gate) block.delta.values()[i] = Vec2::Zero();
    }
    const PositionMap up = upsample_offsets(block.delta, p0.rows(), p0.cols());
    for (size_t i = 0; i < up.size(); ++i) res.positions.values()[i] += up.values()[i];
    CertaintyMap c = upsample_certainty(block.certainty, p0.rows(), p0.cols());
    for (size_t i = 0; i < c.size(); ++i) res.certainty.values()[i] += c.values()[i];
    res.per_block.push_back(res.positions);
    res.block_certainty.push_back(std::move(c));
  }
  const double inv = 1.0 / static_cast<double>(pyramids.size());
  for (auto& v : res.certainty.values()) v = std::clamp(v * inv, 0.0, 1.0);
  return res;
}

FineLossResult loss_fine(std::span<const FineLevel> levels, double lambda, double mu) {
  if (lambda < 0.0 || mu < 0.0) throw Error(ErrorKind::kInvalidParameter, "loss weights must be non-negative");
  constexpr double kEps = 1e-7;
  FineLossResult res;
  for (const auto& lv : levels) {
    if (!lv.delta.same_shape(lv.delta_gt) || !lv.delta.same_shape(lv.certainty) ||
        !lv.delta.same_shape(lv.certainty_gt) || lv.delta.empty()) {
      throw Error(ErrorKind::kDimensionMismatch, "fine loss level shapes differ");
    }
    PositionMap gd(lv.delta.rows(), lv.delta.cols(), Vec2::Zero());
    CertaintyMap gc(lv.delta.rows(), lv.delta.cols(), 0.0);
    const double inv_n = 1.0 / static_cast<double>(lv.delta.size());
    double l1 = 0.0, bce = 0.0;
    for (size_t i = 0; i < lv.delta.size(); ++i) {
      const double m = lv.certainty_gt.values()[i];
      const Vec2 diff = lv.delta.values()[i] - lv.delta_gt.values()[i];
      l1 += m * (std::abs(diff.x()) + std::abs(diff.y()));
      gd.values()[i] = lambda * m * Vec2((diff.x() > 0) - (diff.x() < 0), (diff.y() > 0) - (diff.y() < 0));
      const double raw = lv.certainty.values()[i];
      const double c = std::clamp(raw, kEps, 1.0 - kEps);
      bce -= (m * std::log(c) + (1.0 - m) * std::log(1.0 - c)) * inv_n;
      if (raw > kEps && raw < 1.0 - kEps) gc.values()[i] = mu * inv_n * (-m / c + (1.0 - m) / (1.0 - c));
    }
    res.l1 += l1;
    res.bce += bce;
    res.loss += lambda * l1 + mu * bce;
    res.grad_delta.push_back(std::move(gd));
    res.grad_certainty.push_back(std::move(gc));
  }
  return res;
}

}  // namespace picopose
