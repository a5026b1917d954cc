#include "picopose/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <vector>

#include <Eigen/Geometry>
#include <Eigen/SVD>

#include "picopose/error.hpp"

namespace picopose {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidParameter: return "invalid-parameter";
    case ErrorKind::kBehindCamera: return "behind-camera";
    case ErrorKind::kInsufficientData: return "insufficient-data";
    case ErrorKind::kDegenerate: return "degenerate";
    case ErrorKind::kDegenerateRender: return "degenerate-render";
    case ErrorKind::kDegenerateScene: return "degenerate-scene";
    case ErrorKind::kEmptyForeground: return "empty-foreground";
    case ErrorKind::kEmptyInput: return "empty-input";
    case ErrorKind::kDimensionMismatch: return "dimension-mismatch";
    case ErrorKind::kFormat: return "format";
    case ErrorKind::kNoModel: return "no-model";
    case ErrorKind::kNoPose: return "no-pose";
    case ErrorKind::kIo: return "io";
  }
  return "unknown";
}

Pose Pose::inverse() const {
  Pose inv;
  inv.rotation = rotation.transpose();
  inv.translation = -(inv.rotation * translation);
  return inv;
}

void Pose::validate(double tol) const {
  const Mat3 gram = rotation.transpose() * rotation;
  if (!((gram - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol) ||
      !(std::abs(rotation.determinant() - 1.0) <= tol) || !translation.allFinite()) {
    throw Error(ErrorKind::kInvalidParameter, "pose rotation is not orthonormal");
  }
}

Pose compose(const Pose& a, const Pose& b) {
  Pose out;
  out.rotation = a.rotation * b.rotation;
  out.translation = a.rotation * b.translation + a.translation;
  return out;
}

void Intrinsics::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0) || !std::isfinite(cx) || !std::isfinite(cy)) {
    throw Error(ErrorKind::kInvalidParameter, "focal lengths must be positive");
  }
}

double wrap_angle(double a) {
  constexpr double kTwoPi = 2.0 * std::numbers::pi;
  a = std::fmod(a, kTwoPi);
  if (a <= -std::numbers::pi) a += kTwoPi;
  if (a > std::numbers::pi) a -= kTwoPi;
  return a;
}

double angle_from_unit_pair(double c, double s) {
  const double n = std::hypot(c, s);
  if (!(n > 0.0) || !std::isfinite(n)) {
    throw Error(ErrorKind::kInvalidParameter, "(cos, sin) pair has zero length");
  }
  return std::atan2(s / n, c / n);
}

AffineMatrix affine_matrix(const Affine2D& a) {
  if (!(a.scale > 0.0)) throw Error(ErrorKind::kInvalidParameter, "affine scale must be positive");
  const double c = a.scale * std::cos(a.alpha);
  const double s = a.scale * std::sin(a.alpha);
  AffineMatrix m;
  m << c, -s, a.t_u, s, c, a.t_v;
  return m;
}

Affine2D decompose_affine(const AffineMatrix& m) {
  const double sc = 0.5 * (m(0, 0) + m(1, 1));
  const double ss = 0.5 * (m(1, 0) - m(0, 1));
  const double scale = std::hypot(sc, ss);
  if (!(scale > 0.0)) throw Error(ErrorKind::kInvalidParameter, "matrix has zero scale");
  const double skew = std::abs(m(0, 0) - m(1, 1)) + std::abs(m(1, 0) + m(0, 1));
  if (skew > 1e-6 * scale) {
    throw Error(ErrorKind::kInvalidParameter, "matrix is not a similarity");
  }
  return {std::atan2(ss, sc), scale, m(0, 2), m(1, 2)};
}

Vec2 affine_apply(const Affine2D& a, const Vec2& p) {
  const double c = a.scale * std::cos(a.alpha);
  const double s = a.scale * std::sin(a.alpha);
  return {c * p.x() - s * p.y() + a.t_u, s * p.x() + c * p.y() + a.t_v};
}

Affine2D affine_invert(const Affine2D& a) {
  if (!(a.scale > 0.0)) throw Error(ErrorKind::kInvalidParameter, "affine scale must be positive");
  Affine2D inv;
  inv.alpha = wrap_angle(-a.alpha);
  inv.scale = 1.0 / a.scale;
  const double c = inv.scale * std::cos(inv.alpha);
  const double s = inv.scale * std::sin(inv.alpha);
  inv.t_u = -(c * a.t_u - s * a.t_v);
  inv.t_v = -(s * a.t_u + c * a.t_v);
  return inv;
}

Affine2D affine_compose(const Affine2D& a, const Affine2D& b) {
  const Vec2 t = affine_apply(a, Vec2(b.t_u, b.t_v));
  return {wrap_angle(a.alpha + b.alpha), a.scale * b.scale, t.x(), t.y()};
}

Vec2 project_camera(const Intrinsics& k, const Vec3& x) {
  if (!(x.z() > 0.0)) throw Error(ErrorKind::kBehindCamera, "point at or behind the camera plane");
  return {k.fx * x.x() / x.z() + k.cx, k.fy * x.y() / x.z() + k.cy};
}

Vec2 project(const Intrinsics& k, const Pose& pose, const Vec3& x) {
  return project_camera(k, pose.apply(x));
}

Intrinsics crop_intrinsics(const Intrinsics& k, const Affine2D& crop) {
  if (!(crop.scale > 0.0)) throw Error(ErrorKind::kInvalidParameter, "crop scale must be positive");
  return {k.fx / crop.scale, k.fy / crop.scale, (k.cx - crop.t_u) / crop.scale,
          (k.cy - crop.t_v) / crop.scale};
}

SimilarityFit fit_similarity(std::span<const Vec2> src, std::span<const Vec2> dst) {
  if (src.size() != dst.size()) {
    throw Error(ErrorKind::kDimensionMismatch, "point lists differ in length");
  }
  if (src.size() < 2) throw Error(ErrorKind::kInsufficientData, "need at least 2 point pairs");
  using C = std::complex<double>;
  const double n = static_cast<double>(src.size());
  C mean_s{0, 0}, mean_d{0, 0};
  for (size_t i = 0; i < src.size(); ++i) {
    mean_s += C(src[i].x(), src[i].y());
    mean_d += C(dst[i].x(), dst[i].y());
  }
  mean_s /= n;
  mean_d /= n;
  C num{0, 0};
  double den = 0.0;
  for (size_t i = 0; i < src.size(); ++i) {
    const C zs = C(src[i].x(), src[i].y()) - mean_s;
    const C zd = C(dst[i].x(), dst[i].y()) - mean_d;
    num += std::conj(zs) * zd;
    den += std::norm(zs);
  }
  if (!(den > 1e-24)) throw Error(ErrorKind::kDegenerate, "source points coincide");
  const C a = num / den;
  if (!(std::abs(a) > 0.0)) throw Error(ErrorKind::kDegenerate, "fitted scale is zero");
  const C b = mean_d - a * mean_s;

  SimilarityFit fit;
  fit.affine = {std::arg(a), std::abs(a), b.real(), b.imag()};
  double sse = 0.0;
  for (size_t i = 0; i < src.size(); ++i) sse += (affine_apply(fit.affine, src[i]) - dst[i]).squaredNorm();
  fit.rms = std::sqrt(sse / n);
  fit.count = static_cast<int>(src.size());
  return fit;
}

SimilarityFit gt_affine_between(const Pose& query, const Pose& tmpl, const Intrinsics& k,
                                const Affine2D& query_crop, const Affine2D& template_crop,
                                std::span<const Vec3> surface_points) {
  const Affine2D to_query_crop = affine_invert(query_crop);
  const Affine2D to_template_crop = affine_invert(template_crop);
  std::vector<Vec2> src, dst;
  src.reserve(surface_points.size());
  dst.reserve(surface_points.size());
  for (const Vec3& x : surface_points) {
    const Vec3 xq = query.apply(x);
    const Vec3 xt = tmpl.apply(x);
    if (!(xq.z() > 0.0) || !(xt.z() > 0.0)) continue;
    src.push_back(affine_apply(to_query_crop, project_camera(k, xq)));
    dst.push_back(affine_apply(to_template_crop, project_camera(k, xt)));
  }
  if (src.size() < 2) {
    throw Error(ErrorKind::kInsufficientData, "fewer than 2 shared visible surface points");
  }
  return fit_similarity(src, dst);
}

Mat3 rodrigues(const Vec3& w) {
  const double angle = w.norm();
  if (angle < 1e-300) return Mat3::Identity();
  return Eigen::AngleAxisd(angle, w / angle).toRotationMatrix();
}

Mat3 rotation_about_z(double angle) {
  return Eigen::AngleAxisd(angle, Vec3::UnitZ()).toRotationMatrix();
}

double rotation_angle(const Mat3& r) {
  const double c = std::clamp(0.5 * (r.trace() - 1.0), -1.0, 1.0);
  // acos loses precision near 0; use the skew part there.
  const Vec3 axis(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1));
  return std::atan2(0.5 * axis.norm(), c);
}

double rotation_error_deg(const Mat3& a, const Mat3& b) {
  return rotation_angle(a.transpose() * b) * 180.0 / std::numbers::pi;
}

Mat3 random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::Quaterniond q(g(rng), g(rng), g(rng), g(rng));
  q.normalize();
  return q.toRotationMatrix();
}

Mat3 project_to_rotation(const Mat3& m) {
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 d = Mat3::Identity();
  d(2, 2) = (svd.matrixU() * svd.matrixV().transpose()).determinant() < 0 ? -1.0 : 1.0;
  return svd.matrixU() * d * svd.matrixV().transpose();
}

Pose roll_camera(const Pose& pose, double beta) {
  Pose roll;
  roll.rotation = rotation_about_z(-beta);
  return compose(roll, pose);
}

nlohmann::json to_json(const Pose& p) {
  nlohmann::json r = nlohmann::json::array();
  for (int i = 0; i < 3; ++i) r.push_back({p.rotation(i, 0), p.rotation(i, 1), p.rotation(i, 2)});
  return {{"R", r}, {"t", {p.translation.x(), p.translation.y(), p.translation.z()}}};
}

Pose pose_from_json(const nlohmann::json& j) {
  Pose p;
  try {
    for (int i = 0; i < 3; ++i) {
      for (int c = 0; c < 3; ++c) p.rotation(i, c) = j.at("R").at(i).at(c).get<double>();
      p.translation(i) = j.at("t").at(i).get<double>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kFormat, std::string("bad pose JSON: ") + e.what());
  }
  p.validate(1e-6);
  return p;
}

nlohmann::json to_json(const Affine2D& a) {
  return {{"alpha", a.alpha}, {"scale", a.scale}, {"t", {a.t_u, a.t_v}}};
}

Affine2D affine_from_json(const nlohmann::json& j) {
  try {
    Affine2D a{j.at("alpha").get<double>(), j.at("scale").get<double>(),
               j.at("t").at(0).get<double>(), j.at("t").at(1).get<double>()};
    if (!(a.scale > 0.0)) throw Error(ErrorKind::kInvalidParameter, "affine scale must be positive");
    return a;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kFormat, std::string("bad affine JSON: ") + e.what());
  }
}

nlohmann::json to_json(const Intrinsics& k) {
  return {{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx}, {"cy", k.cy}};
}

Intrinsics intrinsics_from_json(const nlohmann::json& j) {
  try {
    Intrinsics k{j.at("fx").get<double>(), j.at("fy").get<double>(), j.at("cx").get<double>(),
                 j.at("cy").get<double>()};
    k.validate();
    return k;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kFormat, std::string("bad intrinsics JSON: ") + e.what());
  }
}

}  // namespace picopose
