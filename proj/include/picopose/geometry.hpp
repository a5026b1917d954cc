#pragma once

#include <random>
#include <span>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "picopose/grid.hpp"

namespace picopose {

// Rigid object-to-camera transform: x_cam = rotation * x_obj + translation.
struct Pose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  Vec3 apply(const Vec3& x) const { return rotation * x + translation; }
  Pose inverse() const;
  // Throws kInvalidParameter unless the rotation is orthonormal with det +1.
  void validate(double tol = 1e-9) const;
};

Pose compose(const Pose& a, const Pose& b);  // a after b

struct Intrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;

  void validate() const;
};

// 4-DoF similarity. Angles are counterclockwise in pixel coordinates with
// the v axis pointing down; the matrix form is
//   [[s cos a, -s sin a, t_u], [s sin a, s cos a, t_v]].
struct Affine2D {
  double alpha = 0.0;
  double scale = 1.0;
  double t_u = 0.0;
  double t_v = 0.0;
};

using AffineMatrix = Eigen::Matrix<double, 2, 3>;

AffineMatrix affine_matrix(const Affine2D& a);
// Inverse of affine_matrix for similarity-shaped matrices; alpha in (-pi, pi].
Affine2D decompose_affine(const AffineMatrix& m);
Vec2 affine_apply(const Affine2D& a, const Vec2& p);
Affine2D affine_invert(const Affine2D& a);
Affine2D affine_compose(const Affine2D& a, const Affine2D& b);  // a after b

double wrap_angle(double a);  // into (-pi, pi]

// Recovers an in-plane angle from a (cos, sin) pair of any nonzero length.
double angle_from_unit_pair(double c, double s);

Vec2 project(const Intrinsics& k, const Pose& pose, const Vec3& x);
Vec2 project_camera(const Intrinsics& k, const Vec3& x_cam);

// A crop is an axis-aligned square window resized to the crop grid. Its
// frame maps crop coordinates to full-image coordinates (alpha = 0).
Intrinsics crop_intrinsics(const Intrinsics& k, const Affine2D& crop_to_image);

struct SimilarityFit {
  Affine2D affine;
  double rms = 0.0;
  int count = 0;
};

// Closed-form least-squares similarity dst ~ M src (complex least squares).
SimilarityFit fit_similarity(std::span<const Vec2> src, std::span<const Vec2> dst);

// Least-squares 4-DoF map from query-crop pixels to template-crop pixels
// of the same surface points. Points behind either camera are skipped.
SimilarityFit gt_affine_between(const Pose& query, const Pose& tmpl, const Intrinsics& k,
                                const Affine2D& query_crop, const Affine2D& template_crop,
                                std::span<const Vec3> surface_points);

Mat3 rodrigues(const Vec3& w);
Mat3 rotation_about_z(double angle);
double rotation_angle(const Mat3& r);  // radians in [0, pi]
double rotation_error_deg(const Mat3& a, const Mat3& b);
Mat3 random_rotation(std::mt19937_64& rng);
Mat3 project_to_rotation(const Mat3& m);

// Rolls the camera by beta about its optical axis. Image content of the
// returned pose maps onto the original by a rotation of +beta.
Pose roll_camera(const Pose& pose, double beta);

nlohmann::json to_json(const Pose& p);
Pose pose_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Affine2D& a);
Affine2D affine_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Intrinsics& k);
Intrinsics intrinsics_from_json(const nlohmann::json& j);

}  // namespace picopose
