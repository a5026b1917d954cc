#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "picopose/geometry.hpp"
#include "picopose/synth.hpp"

namespace picopose {

// Rigid object-frame transforms under which the object looks the same.
class SymmetrySet {
 public:
  SymmetrySet();  // identity only
  void add(const Pose& s);
  std::span<const Pose> members() const { return members_; }

 private:
  std::vector<Pose> members_;
};

// Mean over masked cells of the position difference norm.
double epe(const PositionMap& p, const PositionMap& p_hat, const Mask& mask);
// Mean of ||a_i - b_i|| over paired positions.
double epe(std::span<const Vec2> a, std::span<const Vec2> b);

double mssd(const Pose& est, const Pose& gt, std::span<const Vec3> vertices, const SymmetrySet& sym = {});
double mspd(const Pose& est, const Pose& gt, const Intrinsics& k, std::span<const Vec3> vertices,
            const SymmetrySet& sym = {});

double translation_error(const Pose& est, const Pose& gt);  // meters

// Mean over thresholds of the fraction of errors strictly below
// threshold * normalizer. Non-finite errors always miss.
double average_recall(std::span<const double> errors, std::span<const double> thresholds, double normalizer = 1.0);

// 0.05, 0.10, ..., 0.50 (fractions of the object diameter).
std::vector<double> mssd_thresholds();
// 5, 10, ..., 50 (pixels at 640-px width); scale by image width / 640.
std::vector<double> mspd_thresholds();
inline constexpr double kMspdReferenceWidth = 640.0;
inline constexpr double kTranslationAccuracy = 0.05;  // meters

// Fraction of instances with translation error below the threshold.
double translation_accuracy(std::span<const double> errors, double threshold = kTranslationAccuracy);

// Farthest-point subsample; returns the input when it has at most `cap` points.
std::vector<Vec3> subsample_vertices(std::span<const Vec3> vertices, int cap = 10000, std::uint64_t seed = 0);

}  // namespace picopose
