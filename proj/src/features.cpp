#include "picopose/features.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <utility>

#include "picopose/error.hpp"
#include "picopose/io.hpp"
#include "picopose/seed.hpp"

namespace picopose {

namespace {

using RowMatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Foreground rows of a normalized map packed into a dense matrix.
RowMatrixF foreground_rows(const FeatureMap& f) {
  RowMatrixF m(f.foreground_count(), f.dim);
  int k = 0;
  for (int i = 0; i < f.cells(); ++i) {
    if (!f.mask[i]) continue;
    m.row(k++) = Eigen::Map<const Eigen::RowVectorXf>(f.at(i), f.dim);
  }
  return m;
}

// Standard normal samples by the Box-Muller transform, both branches used.
void gaussian_fill(SplitMix64& rng, Eigen::ArrayXf& out) {
  const Eigen::Index n = out.size(), half = (n + 1) / 2;
  Eigen::ArrayXf u1(half), u2(half);
  constexpr float kUnit = 1.0f / 16777216.0f;
  for (Eigen::Index i = 0; i < half; ++i) {
    const std::uint64_t r = rng();
    u1(i) = (static_cast<float>(r >> 40) + 1.0f) * kUnit;                 // (0, 1]
    u2(i) = static_cast<float>((r >> 8) & 0xffffff) * kUnit;               // [0, 1)
  }
  const Eigen::ArrayXf radius = (-2.0f * u1.log()).sqrt();
  const Eigen::ArrayXf angle = u2 * (2.0f * std::numbers::pi_v<float>);
  out.head(half) = radius * angle.cos();
  out.tail(n - half) = (radius * angle.sin()).head(n - half);
}

}  // namespace

FeatureMap::FeatureMap(int rows_, int cols_, int dim_, int patch_size_)
    : rows(rows_), cols(cols_), dim(dim_), patch_size(patch_size_) {
  if (rows <= 0 || cols <= 0 || dim <= 0 || patch_size < 0) {
    throw Error(ErrorKind::kInvalidParameter, "feature map dimensions must be positive");
  }
  values.assign(static_cast<size_t>(rows) * cols * dim, 0.0f);
  mask.assign(static_cast<size_t>(rows) * cols, 0);
}

int FeatureMap::foreground_count() const {
  return static_cast<int>(std::count_if(mask.begin(), mask.end(), [](auto v) { return v != 0; }));
}

void normalize(FeatureMap& f) {
  for (int i = 0; i < f.cells(); ++i) {
    Eigen::Map<Eigen::VectorXf> v(f.at(i), f.dim);
    const float n = v.norm();
    // Leaving near-unit vectors alone makes normalization bit-idempotent.
    if (std::abs(n - 1.0f) <= 1e-6f) continue;
    if (n > 0.0f && std::isfinite(n)) {
      v /= n;
    } else {
      v.setZero();
      f.mask[i] = 0;
    }
  }
}

FeatureMap normalized(FeatureMap f) {
  normalize(f);
  return f;
}

ProceduralEncoder::ProceduralEncoder(int dim, int frequencies, double length_scale, std::uint64_t basis_seed)
    : dim_(dim), length_scale_(length_scale) {
  if (dim <= 0 || frequencies <= 0 || !(length_scale > 0.0)) {
    throw Error(ErrorKind::kInvalidParameter, "encoder needs positive dim, frequencies and length scale");
  }
  std::mt19937_64 rng(basis_seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> uni(0.0, 2.0 * std::numbers::pi);
  frequencies_.resize(frequencies, 3);
  phases_.resize(frequencies);
  for (int i = 0; i < frequencies; ++i) {
    for (int j = 0; j < 3; ++j) frequencies_(i, j) = gauss(rng) / length_scale;
    phases_(i) = uni(rng);
  }
  if (2 * frequencies == dim) return;  // Fourier features already have the target width
  projection_.resize(dim, 2 * frequencies);
  const double s = 1.0 / std::sqrt(static_cast<double>(dim));
  for (int j = 0; j < projection_.cols(); ++j) {
    for (int i = 0; i < dim; ++i) projection_(i, j) = static_cast<float>(gauss(rng) * s);
  }
}

void ProceduralEncoder::encode(std::span<const Vec3> points, std::span<float> out) const {
  const auto n = static_cast<Eigen::Index>(points.size());
  if (out.size() != points.size() * static_cast<size_t>(dim_)) {
    throw Error(ErrorKind::kDimensionMismatch, "encode output has the wrong size");
  }
  if (n == 0) return;
  const Eigen::Index f = frequencies_.rows();
  Eigen::MatrixXd x(3, n);
  for (Eigen::Index i = 0; i < n; ++i) x.col(i) = points[i];
  const Eigen::ArrayXXf arg = ((frequencies_ * x).colwise() + phases_).cast<float>().array();
  const float s = 1.0f / std::sqrt(static_cast<float>(f));
  Eigen::MatrixXf fourier(2 * f, n);
  fourier.topRows(f) = (arg.cos() * s).matrix();
  fourier.bottomRows(f) = (arg.sin() * s).matrix();
  Eigen::Map<Eigen::MatrixXf> desc(out.data(), dim_, n);
  if (projection_.size() == 0) {
    desc = fourier;
  } else {
    desc.noalias() = projection_ * fourier;
  }
  desc.colwise().normalize();
}

FeatureMap procedural_features(const Grid<Vec3f>& xyz, const Mask& mask, const ProceduralEncoder& encoder,
                               const ProceduralFeatureOptions& o) {
  if (!xyz.same_shape(mask)) throw Error(ErrorKind::kDimensionMismatch, "xyz and mask shapes differ");
  if (o.rows <= 0 || o.cols <= 0 || o.rows > xyz.rows() || o.cols > xyz.cols()) {
    throw Error(ErrorKind::kInvalidParameter, "cell grid must be positive and no finer than the image");
  }
  if (o.noise_sigma < 0.0 || !(o.min_coverage > 0.0 && o.min_coverage <= 1.0)) {
    throw Error(ErrorKind::kInvalidParameter, "bad noise sigma or coverage");
  }
  const int ps = (xyz.rows() % o.rows == 0 && xyz.cols() % o.cols == 0 && xyz.rows() / o.rows == xyz.cols() / o.cols)
                     ? xyz.rows() / o.rows
                     : 0;
  FeatureMap f(o.rows, o.cols, encoder.dim(), ps);

  // Pixels are split across cells by exact area overlap, so a fully covered
  // cell averages to its own center even when the cell size is fractional.
  const int n = f.cells();
  const auto spans = [](int pixels, int cells) {
    std::vector<std::array<std::pair<int, double>, 2>> out(pixels);
    const double size = static_cast<double>(pixels) / cells;
    for (int p = 0; p < pixels; ++p) {
      const int k = std::min(cells - 1, static_cast<int>(p / size));
      const double edge = (k + 1) * size;
      const double first = std::min(1.0, edge - p);
      out[p][0] = {k, first};
      out[p][1] = {std::min(cells - 1, k + 1), k + 1 < cells ? 1.0 - first : 0.0};
    }
    return out;
  };
  const auto row_span = spans(xyz.rows(), o.rows);
  const auto col_span = spans(xyz.cols(), o.cols);
  const double cell_area = static_cast<double>(xyz.rows()) / o.rows * xyz.cols() / o.cols;
  std::vector<Vec3> sum(n, Vec3::Zero());
  std::vector<double> weight(n, 0.0);
  for (int r = 0; r < xyz.rows(); ++r) {
    for (int c = 0; c < xyz.cols(); ++c) {
      if (!mask(r, c) || !xyz(r, c).allFinite()) continue;
      const Vec3 x = xyz(r, c).cast<double>();
      for (const auto& [cr, wr] : row_span[r]) {
        if (wr <= 0.0) continue;
        for (const auto& [cc, wc] : col_span[c]) {
          if (wc <= 0.0) continue;
          sum[cr * o.cols + cc] += wr * wc * x;
          weight[cr * o.cols + cc] += wr * wc;
        }
      }
    }
  }

  std::vector<Vec3> points;
  std::vector<int> fg_cells;
  for (int i = 0; i < n; ++i) {
    if (weight[i] > 0.0 && weight[i] >= o.min_coverage * cell_area - 1e-9) {
      points.push_back(sum[i] / weight[i]);
      fg_cells.push_back(i);
    }
  }
  std::vector<float> enc(points.size() * encoder.dim());
  encoder.encode(points, enc);
  for (size_t k = 0; k < fg_cells.size(); ++k) {
    std::copy_n(enc.data() + k * encoder.dim(), encoder.dim(), f.at(fg_cells[k]));
    f.mask[fg_cells[k]] = 1;
  }

  // Each cell draws from its own stream, so a cell's values do not depend on
  // how many draws other cells needed.
  const float bg_scale = 1.0f / std::sqrt(static_cast<float>(encoder.dim()));
  Eigen::ArrayXf draw(f.dim);
  for (int i = 0; i < n; ++i) {
    if (f.mask[i] && o.noise_sigma == 0.0) continue;
    SplitMix64 rng(derive_seed(o.seed, static_cast<std::uint64_t>(i)));
    Eigen::Map<Eigen::ArrayXf> v(f.at(i), f.dim);
    if (!f.mask[i]) {
      gaussian_fill(rng, draw);
      v = draw * bg_scale;
    }
    if (o.noise_sigma > 0.0) {
      gaussian_fill(rng, draw);
      v += draw * static_cast<float>(o.noise_sigma);
    }
  }
  std::vector<std::uint8_t> keep = f.mask;
  normalize(f);
  // Background descriptors are never zero in practice; restore the coverage mask.
  f.mask = keep;
  return f;
}

CorrespondenceMap correspondence_map(const FeatureMap& obs, const FeatureMap& tmpl) {
  if (obs.dim != tmpl.dim) throw Error(ErrorKind::kDimensionMismatch, "descriptor dimensions differ");
  CorrespondenceMap a{obs.cells(), tmpl.cells(), std::vector<float>(static_cast<size_t>(obs.cells()) * tmpl.cells())};
  Eigen::Map<RowMatrixF>(a.values.data(), a.rows, a.cols).noalias() = obs.matrix() * tmpl.matrix().transpose();
  return a;
}

double template_score(const FeatureMap& obs, const FeatureMap& tmpl, bool template_foreground_only) {
  if (obs.dim != tmpl.dim) throw Error(ErrorKind::kDimensionMismatch, "descriptor dimensions differ");
  const FeatureMap o = normalized(obs);
  if (o.foreground_count() == 0) throw Error(ErrorKind::kEmptyForeground, "observation has no foreground cells");
  const FeatureMap t = normalized(tmpl);
  const RowMatrixF of = foreground_rows(o);
  RowMatrixF sims;
  if (template_foreground_only) {
    if (t.foreground_count() == 0) return -1.0;
    sims.noalias() = of * foreground_rows(t).transpose();
  } else {
    sims.noalias() = of * t.matrix().transpose();
  }
  return sims.rowwise().maxCoeff().cast<double>().mean();
}

std::vector<RankedTemplate> select_best_template(const FeatureMap& obs, std::span<const FeatureMap> templates,
                                                 int top_k, bool template_foreground_only) {
  if (templates.empty()) throw Error(ErrorKind::kEmptyInput, "no templates");
  if (top_k < 1) throw Error(ErrorKind::kInvalidParameter, "top_k must be at least 1");
  std::vector<RankedTemplate> ranked;
  ranked.reserve(templates.size());
  for (size_t i = 0; i < templates.size(); ++i) {
    ranked.push_back({static_cast<int>(i), template_score(obs, templates[i], template_foreground_only)});
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const RankedTemplate& a, const RankedTemplate& b) { return a.score > b.score; });
  ranked.resize(std::min<size_t>(ranked.size(), static_cast<size_t>(top_k)));
  return ranked;
}

std::vector<CoarsePair> coarse_correspondences(const CorrespondenceMap& a, std::span<const std::uint8_t> obs_mask,
                                               std::span<const std::uint8_t> tmpl_mask, double min_sim,
                                               const CellGrid& obs_grid, const CellGrid& tmpl_grid) {
  if (obs_mask.size() != static_cast<size_t>(a.rows) ||
      (!tmpl_mask.empty() && tmpl_mask.size() != static_cast<size_t>(a.cols)) ||
      obs_grid.rows * obs_grid.cols != a.rows || tmpl_grid.rows * tmpl_grid.cols != a.cols) {
    throw Error(ErrorKind::kDimensionMismatch, "correspondence map and grids disagree");
  }
  std::vector<CoarsePair> pairs;
  for (int j = 0; j < a.rows; ++j) {
    if (!obs_mask[j]) continue;
    int best = -1;
    float best_sim = -std::numeric_limits<float>::infinity();
    for (int k = 0; k < a.cols; ++k) {
      if (!tmpl_mask.empty() && !tmpl_mask[k]) continue;
      if (a(j, k) > best_sim) {
        best_sim = a(j, k);
        best = k;
      }
    }
    if (best < 0 || best_sim < min_sim) continue;
    pairs.push_back({j, best, best_sim, obs_grid.center(j), tmpl_grid.center(best)});
  }
  return pairs;
}

InfoNceResult loss_coarse_infonce(std::span<const InfoNceRow> rows, double temperature) {
  if (!(temperature > 0.0)) throw Error(ErrorKind::kInvalidParameter, "temperature must be positive");
  if (rows.empty()) throw Error(ErrorKind::kEmptyInput, "no rows");
  InfoNceResult res;
  res.gradient.reserve(rows.size());
  const double inv_n = 1.0 / static_cast<double>(rows.size());
  for (const auto& row : rows) {
    const auto& s = row.similarities;
    if (row.positive < 0 || static_cast<size_t>(row.positive) >= s.size()) {
      throw Error(ErrorKind::kInvalidParameter, "positive index out of range");
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : s) mx = std::max(mx, v / temperature);
    double z = 0.0;
    for (double v : s) z += std::exp(v / temperature - mx);
    const double log_z = mx + std::log(z);
    res.loss += (log_z - s[row.positive] / temperature) * inv_n;
    std::vector<double> g(s.size());
    for (size_t k = 0; k < s.size(); ++k) {
      const double p = std::exp(s[k] / temperature - log_z);
      g[k] = (p - (static_cast<int>(k) == row.positive ? 1.0 : 0.0)) * inv_n / temperature;
    }
    res.gradient.push_back(std::move(g));
  }
  return res;
}

std::vector<InfoNceRow> infonce_rows(const CorrespondenceMap& a, std::span<const std::pair<int, int>> positives) {
  std::vector<InfoNceRow> rows;
  rows.reserve(positives.size());
  for (auto [j, k] : positives) {
    if (j < 0 || j >= a.rows || k < 0 || k >= a.cols) {
      throw Error(ErrorKind::kInvalidParameter, "positive pair out of range");
    }
    InfoNceRow row;
    row.similarities.assign(a.values.begin() + static_cast<ptrdiff_t>(j) * a.cols,
                            a.values.begin() + static_cast<ptrdiff_t>(j + 1) * a.cols);
    row.positive = k;
    rows.push_back(std::move(row));
  }
  return rows;
}

namespace {

constexpr std::uint8_t kFeatVersion = 1;

FeatureHeader read_feature_header(ByteReader& r) {
  r.expect_magic("PICOFEAT");
  const auto version_at = r.offset();
  const auto version = r.u8();
  if (version != kFeatVersion) {
    throw Error(ErrorKind::kFormat, "unsupported PICOFEAT version " + std::to_string(version), version_at);
  }
  const auto dims_at = r.offset();
  FeatureHeader h;
  const auto rows = r.u32(), cols = r.u32(), dim = r.u32(), ps = r.u32();
  if (rows == 0 || cols == 0 || dim == 0 || rows > 4096 || cols > 4096 || dim > 65536 || ps > 4096) {
    throw Error(ErrorKind::kFormat, "implausible PICOFEAT dimensions", dims_at);
  }
  h.rows = static_cast<int>(rows);
  h.cols = static_cast<int>(cols);
  h.dim = static_cast<int>(dim);
  h.patch_size = static_cast<int>(ps);
  const std::uint64_t cells = static_cast<std::uint64_t>(rows) * cols;
  r.need(cells * dim * 4 + cells, "PICOFEAT payload");
  if (r.remaining() != cells * dim * 4 + cells) {
    throw Error(ErrorKind::kFormat, "trailing bytes after PICOFEAT payload", r.offset() + cells * dim * 4 + cells);
  }
  return h;
}

}  // namespace

void save_features(const FeatureMap& f, const std::filesystem::path& path) {
  if (f.values.size() != static_cast<size_t>(f.cells()) * f.dim || f.mask.size() != static_cast<size_t>(f.cells())) {
    throw Error(ErrorKind::kDimensionMismatch, "feature map storage does not match its shape");
  }
  ByteWriter w;
  w.bytes("PICOFEAT");
  w.u8(kFeatVersion);
  w.u32(f.rows);
  w.u32(f.cols);
  w.u32(f.dim);
  w.u32(f.patch_size);
  for (float v : f.values) w.f32(v);
  for (auto m : f.mask) w.u8(m ? 1 : 0);
  w.write_to(path);
}

FeatureMap load_features(const std::filesystem::path& path) {
  ByteReader r(path);
  const FeatureHeader h = read_feature_header(r);
  FeatureMap f(h.rows, h.cols, h.dim, h.patch_size);
  for (auto& v : f.values) {
    const auto at = r.offset();
    v = r.f32();
    if (!std::isfinite(v)) throw Error(ErrorKind::kFormat, "non-finite descriptor value", at);
  }
  for (auto& m : f.mask) {
    const auto at = r.offset();
    m = r.u8();
    if (m > 1) throw Error(ErrorKind::kFormat, "mask byte must be 0 or 1", at);
  }
  return f;
}

FeatureHeader validate_features_file(const std::filesystem::path& path) {
  (void)load_features(path);
  ByteReader r(path);
  return read_feature_header(r);
}

}  // namespace picopose
