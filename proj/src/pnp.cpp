#include "picopose/pnp.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include <Eigen/Dense>

#include "picopose/error.hpp"

namespace picopose {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

}  // namespace

bool template_point(const View& t, const Vec2& q, Vec3& out) {
  if (!q.allFinite() || q.cwiseAbs().maxCoeff() > 1e7) return false;
  const double ix = q.x() - 0.5, iy = q.y() - 0.5;
  const int nx = static_cast<int>(std::floor(q.x())), ny = static_cast<int>(std::floor(q.y()));
  if (!t.mask.in_bounds(ny, nx) || !t.mask(ny, nx)) return false;
  const int x0 = static_cast<int>(std::floor(ix)), y0 = static_cast<int>(std::floor(iy));
  const double fx = ix - x0, fy = iy - y0;
  std::array<Vec3f, 4> v;  // (y0,x0), (y0,x0+1), (y0+1,x0), (y0+1,x0+1)
  int valid = 0, missing = -1;
  for (int i = 0; i < 4; ++i) {
    const int y = y0 + i / 2, x = x0 + i % 2;
    if (t.mask.in_bounds(y, x) && t.mask(y, x)) {
      v[i] = t.xyz(y, x);
      ++valid;
    } else {
      missing = i;
    }
  }
  if (valid < 3) {
    out = t.xyz(ny, nx).cast<double>();
    return true;
  }
  // Three corners pin an affine patch; complete the parallelogram.
  if (valid == 3) v[missing] = v[missing ^ 1] + v[missing ^ 2] - v[3 - missing];
  out = ((1 - fy) * ((1 - fx) * v[0] + fx * v[1]) + fy * ((1 - fx) * v[2] + fx * v[3])).cast<double>();
  return true;
}

namespace {

Pose kabsch(std::span<const Vec3> world, std::span<const Vec3> cam) {
  Vec3 cw = Vec3::Zero(), cc = Vec3::Zero();
  for (size_t i = 0; i < world.size(); ++i) {
    cw += world[i];
    cc += cam[i];
  }
  cw /= static_cast<double>(world.size());
  cc /= static_cast<double>(world.size());
  Mat3 h = Mat3::Zero();
  for (size_t i = 0; i < world.size(); ++i) h += (cam[i] - cc) * (world[i] - cw).transpose();
  Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 d = Mat3::Identity();
  d(2, 2) = (svd.matrixU() * svd.matrixV().transpose()).determinant() < 0 ? -1.0 : 1.0;
  Pose p;
  p.rotation = svd.matrixU() * d * svd.matrixV().transpose();
  p.translation = cc - p.rotation * cw;
  return p;
}

double cost(std::span<const Pair2D3D> pairs, const Intrinsics& k, const Pose& pose) {
  double s = 0.0;
  for (const auto& pr : pairs) {
    const double e = reprojection_error(pr, k, pose);
    if (!std::isfinite(e)) return kInf;
    s += e * e;
  }
  return s;
}

struct ControlFrame {
  int m = 4;
  std::vector<Vec3> controls;
  Eigen::MatrixXd alphas;  // n x m
};

ControlFrame control_frame(std::span<const Pair2D3D> pairs) {
  const int n = static_cast<int>(pairs.size());
  Vec3 c0 = Vec3::Zero();
  for (const auto& p : pairs) c0 += p.point;
  c0 /= n;
  Mat3 cov = Mat3::Zero();
  for (const auto& p : pairs) cov += (p.point - c0) * (p.point - c0).transpose();
  cov /= n;
  Eigen::SelfAdjointEigenSolver<Mat3> es(cov);
  const Vec3 ev = es.eigenvalues();  // ascending
  const Mat3 axes = es.eigenvectors();
  if (!(ev(2) > 1e-18) || ev(1) < 1e-10 * ev(2)) throw Error(ErrorKind::kDegenerate, "collinear 3D points");
  ControlFrame f;
  f.m = ev(0) < 1e-3 * ev(2) ? 3 : 4;
  f.controls.push_back(c0);
  std::vector<Vec3> dirs;
  std::vector<double> scales;
  for (int i = 2; i >= 4 - f.m; --i) {
    const double s = std::sqrt(ev(i));
    dirs.push_back(axes.col(i));
    scales.push_back(s);
    f.controls.push_back(c0 + s * axes.col(i));
  }
  f.alphas.resize(n, f.m);
  for (int i = 0; i < n; ++i) {
    const Vec3 d = pairs[i].point - c0;
    double sum = 0.0;
    for (int j = 0; j + 1 < f.m; ++j) {
      f.alphas(i, j + 1) = d.dot(dirs[j]) / scales[j];
      sum += f.alphas(i, j + 1);
    }
    f.alphas(i, 0) = 1.0 - sum;
  }
  return f;
}

// Camera control points for the given null-space weights.
std::vector<Vec3> camera_controls(const Eigen::MatrixXd& null, const Eigen::VectorXd& beta, int m) {
  const Eigen::VectorXd x = null.leftCols(beta.size()) * beta;
  std::vector<Vec3> c(m);
  for (int j = 0; j < m; ++j) c[j] = x.segment<3>(3 * j);
  return c;
}

}  // namespace

std::vector<Pair2D3D> assemble_pairs(const PositionMap& p, const CertaintyMap& c, const View& tmpl,
                                     const Mask& obs_mask, const Affine2D& obs_crop, double threshold) {
  if (threshold < 0.0 || threshold > 1.0) throw Error(ErrorKind::kInvalidParameter, "threshold must be in [0, 1]");
  if (!p.same_shape(c) || !p.same_shape(obs_mask)) {
    throw Error(ErrorKind::kDimensionMismatch, "position, certainty and mask shapes differ");
  }
  std::vector<Pair2D3D> pairs;
  for (int r = 0; r < p.rows(); ++r) {
    for (int col = 0; col < p.cols(); ++col) {
      if (!obs_mask(r, col) || !(c(r, col) > threshold)) continue;
      Vec3 x;
      if (!template_point(tmpl, p(r, col), x) || !x.allFinite()) continue;
      pairs.push_back({affine_apply(obs_crop, Vec2(col + 0.5, r + 0.5)), x, c(r, col)});
    }
  }
  return pairs;
}

double reprojection_error(const Pair2D3D& pair, const Intrinsics& k, const Pose& pose) {
  const Vec3 x = pose.apply(pair.point);
  if (x.z() <= 1e-12) return kInf;
  return (Vec2(k.fx * x.x() / x.z() + k.cx, k.fy * x.y() / x.z() + k.cy) - pair.pixel).norm();
}

double reprojection_rms(std::span<const Pair2D3D> pairs, const Intrinsics& k, const Pose& pose) {
  if (pairs.empty()) return 0.0;
  return std::sqrt(cost(pairs, k, pose) / static_cast<double>(pairs.size()));
}

EpnpResult epnp(std::span<const Pair2D3D> pairs, const Intrinsics& k, bool polish) {
  const int n = static_cast<int>(pairs.size());
  if (n < 4) throw Error(ErrorKind::kInsufficientData, "EPnP needs at least 4 pairs");
  k.validate();
  const ControlFrame f = control_frame(pairs);
  const int m = f.m, dim = 3 * m;

  Eigen::MatrixXd mtm = Eigen::MatrixXd::Zero(dim, dim);
  Eigen::VectorXd row_u(dim), row_v(dim);
  for (int i = 0; i < n; ++i) {
    const double u = (pairs[i].pixel.x() - k.cx) / k.fx, v = (pairs[i].pixel.y() - k.cy) / k.fy;
    for (int j = 0; j < m; ++j) {
      const double a = f.alphas(i, j);
      row_u.segment<3>(3 * j) << a, 0.0, -a * u;
      row_v.segment<3>(3 * j) << 0.0, a, -a * v;
    }
    mtm.noalias() += row_u * row_u.transpose() + row_v * row_v.transpose();
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(mtm);
  const int max_n = std::min(m, 4);
  const Eigen::MatrixXd null = es.eigenvectors().leftCols(max_n);

  // Distance constraints between control points.
  std::vector<std::pair<int, int>> edges;
  for (int a = 0; a < m; ++a) {
    for (int b = a + 1; b < m; ++b) edges.emplace_back(a, b);
  }
  const int ne = static_cast<int>(edges.size());
  Eigen::VectorXd d2(ne);
  std::vector<std::vector<Vec3>> dv(max_n, std::vector<Vec3>(ne));
  for (int e = 0; e < ne; ++e) {
    const auto [a, b] = edges[e];
    d2(e) = (f.controls[a] - f.controls[b]).squaredNorm();
    for (int kk = 0; kk < max_n; ++kk) dv[kk][e] = null.block<3, 1>(3 * a, kk) - null.block<3, 1>(3 * b, kk);
  }

  auto gauss_newton = [&](Eigen::VectorXd beta) {
    for (int it = 0; it < 10; ++it) {
      Eigen::MatrixXd j(ne, max_n);
      Eigen::VectorXd r(ne);
      for (int e = 0; e < ne; ++e) {
        Vec3 s = Vec3::Zero();
        for (int kk = 0; kk < max_n; ++kk) s += beta(kk) * dv[kk][e];
        r(e) = s.squaredNorm() - d2(e);
        for (int kk = 0; kk < max_n; ++kk) j(e, kk) = 2.0 * s.dot(dv[kk][e]);
      }
      const Eigen::VectorXd step = j.colPivHouseholderQr().solve(-r);
      if (!step.allFinite()) break;
      beta += step;
      if (step.norm() < 1e-12 * (1.0 + beta.norm())) break;
    }
    return beta;
  };

  std::vector<Eigen::VectorXd> inits;
  {
    double num = 0.0, den = 0.0;
    for (int e = 0; e < ne; ++e) {
      num += dv[0][e].norm() * std::sqrt(d2(e));
      den += dv[0][e].squaredNorm();
    }
    Eigen::VectorXd b = Eigen::VectorXd::Zero(max_n);
    b(0) = den > 0 ? num / den : 0.0;
    inits.push_back(b);
  }
  // Linearized products beta_k beta_l for N = 2 and N = 3.
  for (int nn = 2; nn <= std::min(3, max_n); ++nn) {
    const int unknowns = nn * (nn + 1) / 2;
    if (unknowns > ne) break;
    Eigen::MatrixXd l(ne, unknowns);
    for (int e = 0; e < ne; ++e) {
      int col = 0;
      for (int a = 0; a < nn; ++a) {
        for (int b = a; b < nn; ++b) l(e, col++) = (a == b ? 1.0 : 2.0) * dv[a][e].dot(dv[b][e]);
      }
    }
    const Eigen::VectorXd prod = l.colPivHouseholderQr().solve(d2);
    Eigen::VectorXd b = Eigen::VectorXd::Zero(max_n);
    b(0) = std::sqrt(std::abs(prod(0)));
    if (b(0) > 0) {
      for (int kk = 1; kk < nn; ++kk) b(kk) = prod(kk) / b(0);
    }
    inits.push_back(b);
  }

  std::vector<Vec3> world(n), cam(n);
  for (int i = 0; i < n; ++i) world[i] = pairs[i].point;
  EpnpResult best;
  best.rms = kInf;
  best.planar = m == 3;
  for (const auto& init : inits) {
    if (!init.allFinite()) continue;
    Eigen::VectorXd beta = gauss_newton(init);
    std::vector<Vec3> cc = camera_controls(null, beta, m);
    double zsum = 0.0;
    for (int i = 0; i < n; ++i) {
      cam[i].setZero();
      for (int j = 0; j < m; ++j) cam[i] += f.alphas(i, j) * cc[j];
      zsum += cam[i].z();
    }
    if (zsum < 0) {
      for (auto& x : cam) x = -x;
    }
    const Pose pose = kabsch(world, cam);
    if (!pose.rotation.allFinite() || !pose.translation.allFinite()) continue;
    const double rms = reprojection_rms(pairs, k, pose);
    if (rms < best.rms || !std::isfinite(best.rms)) {
      if (!std::isfinite(rms) && std::isfinite(best.rms)) continue;
      best.pose = pose;
      best.rms = rms;
    }
  }
  if (!best.pose.rotation.allFinite()) throw Error(ErrorKind::kDegenerate, "EPnP produced no finite pose");
  if (polish && std::isfinite(best.rms)) {
    best.pose = polish_pose(pairs, k, best.pose);
    best.rms = reprojection_rms(pairs, k, best.pose);
  }
  return best;
}

Pose polish_pose(std::span<const Pair2D3D> pairs, const Intrinsics& k, const Pose& start, int iterations) {
  Pose pose = start;
  double c = cost(pairs, k, pose);
  if (!std::isfinite(c) || pairs.size() < 3) return pose;
  double lambda = 1e-3;
  using Mat6 = Eigen::Matrix<double, 6, 6>;
  using Vec6 = Eigen::Matrix<double, 6, 1>;
  for (int it = 0; it < iterations; ++it) {
    Mat6 jtj = Mat6::Zero();
    Vec6 jtr = Vec6::Zero();
    for (const auto& pr : pairs) {
      const Vec3 rx = pose.rotation * pr.point;
      const Vec3 x = rx + pose.translation;
      const double iz = 1.0 / x.z();
      const Vec2 res(k.fx * x.x() * iz + k.cx - pr.pixel.x(), k.fy * x.y() * iz + k.cy - pr.pixel.y());
      Eigen::Matrix<double, 2, 3> dp;
      dp << k.fx * iz, 0.0, -k.fx * x.x() * iz * iz, 0.0, k.fy * iz, -k.fy * x.y() * iz * iz;
      Eigen::Matrix<double, 3, 6> dx;
      Mat3 skew;
      skew << 0.0, -rx.z(), rx.y(), rx.z(), 0.0, -rx.x(), -rx.y(), rx.x(), 0.0;
      dx.leftCols<3>() = -skew;
      dx.rightCols<3>() = Mat3::Identity();
      const Eigen::Matrix<double, 2, 6> j = dp * dx;
      jtj.noalias() += j.transpose() * j;
      jtr.noalias() += j.transpose() * res;
    }
    bool improved = false;
    for (int attempt = 0; attempt < 8 && !improved; ++attempt) {
      Mat6 a = jtj;
      a.diagonal() += lambda * jtj.diagonal().cwiseMax(1e-9);
      const Vec6 step = a.ldlt().solve(-jtr);
      if (!step.allFinite()) break;
      Pose cand;
      cand.rotation = project_to_rotation(rodrigues(step.head<3>()) * pose.rotation);
      cand.translation = pose.translation + step.tail<3>();
      const double cc = cost(pairs, k, cand);
      if (cc < c) {
        const double gain = c - cc;
        pose = cand;
        c = cc;
        lambda = std::max(lambda * 0.1, 1e-12);
        improved = true;
        if (gain < 1e-14 * (1.0 + c)) return pose;
      } else {
        lambda *= 10.0;
      }
    }
    if (!improved) break;
  }
  return pose;
}

void PnpConfig::validate() const {
  if (iterations < 1) throw Error(ErrorKind::kInvalidParameter, "PnP RANSAC needs at least one iteration");
  if (!(reproj_threshold > 0.0)) throw Error(ErrorKind::kInvalidParameter, "reprojection threshold must be positive");
  if (max_pairs < 4) throw Error(ErrorKind::kInvalidParameter, "pair cap must be at least 4");
}

std::vector<int> cap_pairs(std::span<const Pair2D3D> pairs, int cap) {
  const int n = static_cast<int>(pairs.size());
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (n <= cap) return idx;
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return pairs[a].weight > pairs[b].weight; });
  idx.resize(std::min(n, 2 * cap));
  std::sort(idx.begin(), idx.end());
  std::vector<int> out;
  const double stride = static_cast<double>(idx.size()) / cap;
  for (int i = 0; i < cap; ++i) out.push_back(idx[static_cast<size_t>(i * stride)]);
  return out;
}

PoseEstimate pnp_ransac(std::span<const Pair2D3D> pairs, const Intrinsics& k, const PnpConfig& cfg) {
  cfg.validate();
  if (pairs.size() < 4) throw Error(ErrorKind::kInsufficientData, "PnP RANSAC needs at least 4 pairs");
  const std::vector<int> work = cap_pairs(pairs, cfg.max_pairs);
  const int n = static_cast<int>(work.size());
  std::vector<Pair2D3D> wp(n);
  for (int i = 0; i < n; ++i) wp[i] = pairs[work[i]];

  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<int> pick(0, n - 1);
  int best_count = 0;
  double best_sq = kInf;
  Pose best_pose;
  std::vector<std::uint8_t> best_mask, mask(n);
  std::array<Pair2D3D, 4> sample;
  for (int it = 0; it < cfg.iterations; ++it) {
    std::array<int, 4> ids{};
    for (int s = 0; s < 4; ++s) {
      int id;
      do {
        id = pick(rng);
      } while (std::find(ids.begin(), ids.begin() + s, id) != ids.begin() + s);
      ids[s] = id;
      sample[s] = wp[id];
    }
    Pose model;
    try {
      model = epnp(sample, k, false).pose;
    } catch (const Error&) {
      continue;
    }
    int count = 0;
    double sq = 0.0;
    for (int i = 0; i < n; ++i) {
      const double e = reprojection_error(wp[i], k, model);
      mask[i] = e < cfg.reproj_threshold;
      if (mask[i]) {
        ++count;
        sq += e * e;
      }
    }
    if (count > best_count || (count == best_count && count > 0 && sq < best_sq)) {
      best_count = count;
      best_sq = sq;
      best_pose = model;
      best_mask = mask;
    }
  }
  if (best_count < 4) throw Error(ErrorKind::kNoPose, "no PnP hypothesis reached 4 inliers");

  std::vector<Pair2D3D> inl;
  for (int i = 0; i < n; ++i) {
    if (best_mask[i]) inl.push_back(wp[i]);
  }
  PoseEstimate est;
  est.minimal_rms = reprojection_rms(inl, k, best_pose);
  Pose pose = polish_pose(inl, k, best_pose);
  double rms = reprojection_rms(inl, k, pose);
  try {
    const EpnpResult refit = epnp(inl, k, true);
    if (refit.rms < rms) {
      pose = refit.pose;
      rms = refit.rms;
    }
  } catch (const Error&) {
  }
  est.refit_rms = rms;
  est.pose = pose;
  est.pairs = static_cast<int>(pairs.size());
  est.inlier_mask.assign(pairs.size(), 0);
  double sq = 0.0;
  for (size_t i = 0; i < pairs.size(); ++i) {
    const double e = reprojection_error(pairs[i], k, pose);
    if (e < cfg.reproj_threshold) {
      est.inlier_mask[i] = 1;
      ++est.inliers;
      sq += e * e;
    }
  }
  if (est.inliers < 4) throw Error(ErrorKind::kNoPose, "refit pose keeps fewer than 4 inliers");
  est.reproj_rms = std::sqrt(sq / est.inliers);
  return est;
}

bool better_estimate(const PoseEstimate& a, const PoseEstimate& b) {
  if (a.inliers != b.inliers) return a.inliers > b.inliers;
  if (a.reproj_rms != b.reproj_rms) return a.reproj_rms < b.reproj_rms;
  return a.hypothesis_index < b.hypothesis_index;
}

nlohmann::json to_json(const PoseEstimate& e) {
  return {{"pose", to_json(e.pose)},
          {"inliers", e.inliers},
          {"pairs", e.pairs},
          {"reproj_rms", e.reproj_rms},
          {"hypothesis_index", e.hypothesis_index}};
}

}  // namespace picopose
