#include "picopose/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "picopose/error.hpp"

namespace picopose {

SymmetrySet::SymmetrySet() { members_.emplace_back(); }

void SymmetrySet::add(const Pose& s) {
  s.validate(1e-6);
  members_.push_back(s);
}

double epe(const PositionMap& p, const PositionMap& p_hat, const Mask& mask) {
  if (!p.same_shape(p_hat) || !p.same_shape(mask)) throw Error(ErrorKind::kDimensionMismatch, "EPE shapes differ");
  double sum = 0.0;
  long n = 0;
  for (size_t i = 0; i < p.size(); ++i) {
    if (!mask.values()[i]) continue;
    sum += (p.values()[i] - p_hat.values()[i]).norm();
    ++n;
  }
  if (n == 0) throw Error(ErrorKind::kEmptyForeground, "EPE over an empty mask");
  return sum / static_cast<double>(n);
}

double epe(std::span<const Vec2> a, std::span<const Vec2> b) {
  if (a.size() != b.size()) throw Error(ErrorKind::kDimensionMismatch, "EPE sizes differ");
  if (a.empty()) throw Error(ErrorKind::kEmptyInput, "EPE over no positions");
  double sum = 0.0;
  for (size_t i = 0; i < a.size(); ++i) sum += (a[i] - b[i]).norm();
  return sum / static_cast<double>(a.size());
}

double mssd(const Pose& est, const Pose& gt, std::span<const Vec3> vertices, const SymmetrySet& sym) {
  if (vertices.empty()) throw Error(ErrorKind::kEmptyInput, "MSSD needs vertices");
  double best = std::numeric_limits<double>::infinity();
  for (const Pose& s : sym.members()) {
    const Pose g = compose(gt, s);
    double worst = 0.0;
    for (const auto& x : vertices) worst = std::max(worst, (est.apply(x) - g.apply(x)).norm());
    best = std::min(best, worst);
  }
  return best;
}

double mspd(const Pose& est, const Pose& gt, const Intrinsics& k, std::span<const Vec3> vertices,
            const SymmetrySet& sym) {
  if (vertices.empty()) throw Error(ErrorKind::kEmptyInput, "MSPD needs vertices");
  double best = std::numeric_limits<double>::infinity();
  std::vector<Vec2> pe(vertices.size());
  for (size_t i = 0; i < vertices.size(); ++i) pe[i] = project(k, est, vertices[i]);
  for (const Pose& s : sym.members()) {
    const Pose g = compose(gt, s);
    double worst = 0.0;
    for (size_t i = 0; i < vertices.size(); ++i) worst = std::max(worst, (pe[i] - project(k, g, vertices[i])).norm());
    best = std::min(best, worst);
  }
  return best;
}

double translation_error(const Pose& est, const Pose& gt) { return (est.translation - gt.translation).norm(); }

double average_recall(std::span<const double> errors, std::span<const double> thresholds, double normalizer) {
  if (errors.empty()) throw Error(ErrorKind::kEmptyInput, "average recall over no errors");
  if (thresholds.empty()) throw Error(ErrorKind::kInvalidParameter, "average recall needs thresholds");
  double sum = 0.0;
  for (double t : thresholds) {
    const double limit = t * normalizer;
    long hits = 0;
    for (double e : errors) hits += std::isfinite(e) && e < limit;
    sum += static_cast<double>(hits) / static_cast<double>(errors.size());
  }
  return sum / static_cast<double>(thresholds.size());
}

std::vector<double> mssd_thresholds() {
  std::vector<double> t;
  for (int i = 1; i <= 10; ++i) t.push_back(0.05 * i);
  return t;
}

std::vector<double> mspd_thresholds() {
  std::vector<double> t;
  for (int i = 1; i <= 10; ++i) t.push_back(5.0 * i);
  return t;
}

double translation_accuracy(std::span<const double> errors, double threshold) {
  if (errors.empty()) throw Error(ErrorKind::kEmptyInput, "translation accuracy over no errors");
  long hits = 0;
  for (double e : errors) hits += std::isfinite(e) && e < threshold;
  return static_cast<double>(hits) / static_cast<double>(errors.size());
}

std::vector<Vec3> subsample_vertices(std::span<const Vec3> vertices, int cap, std::uint64_t seed) {
  if (cap < 1) throw Error(ErrorKind::kInvalidParameter, "vertex cap must be positive");
  if (static_cast<int>(vertices.size()) <= cap) return {vertices.begin(), vertices.end()};
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<size_t> pick(0, vertices.size() - 1);
  std::vector<double> dist(vertices.size(), std::numeric_limits<double>::infinity());
  std::vector<Vec3> out;
  size_t next = pick(rng);
  for (int i = 0; i < cap; ++i) {
    out.push_back(vertices[next]);
    size_t far = 0;
    for (size_t j = 0; j < vertices.size(); ++j) {
      dist[j] = std::min(dist[j], (vertices[j] - vertices[next]).squaredNorm());
      if (dist[j] > dist[far]) far = j;
    }
    next = far;
  }
  return out;
}

}  // namespace picopose
