#include "picopose/synth.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>

#include <Eigen/Eigenvalues>

#include "picopose/error.hpp"

namespace picopose {
namespace {

constexpr float kNaN = std::numeric_limits<float>::quiet_NaN();

struct CameraRay {
  Vec3 dir;  // camera-frame direction with z = 1
};

CameraRay ray_through(const Intrinsics& k, const Vec2& p) {
  return {Vec3((p.x() - k.cx) / k.fx, (p.y() - k.cy) / k.fy, 1.0)};
}

// Ray/triangle intersection in the camera frame. Returns depth (z) or NaN.
double intersect(const CameraRay& ray, const Vec3& a, const Vec3& b, const Vec3& c,
                 double edge_tol) {
  const Vec3 n = (b - a).cross(c - a);
  const double denom = n.dot(ray.dir);
  if (std::abs(denom) < 1e-15 * n.norm()) return std::numeric_limits<double>::quiet_NaN();
  const double lambda = n.dot(a) / denom;
  if (!(lambda > 0.0)) return std::numeric_limits<double>::quiet_NaN();
  const Vec3 x = lambda * ray.dir;
  // Barycentric containment, with a relative tolerance for shared edges.
  const double area = n.squaredNorm();
  const double w0 = (c - b).cross(x - b).dot(n) / area;
  const double w1 = (a - c).cross(x - c).dot(n) / area;
  const double w2 = 1.0 - w0 - w1;
  if (w0 < -edge_tol || w1 < -edge_tol || w2 < -edge_tol) {
    return std::numeric_limits<double>::quiet_NaN();
  }
  return lambda;
}

}  // namespace

Mesh make_mesh(std::vector<Vec3> vertices, std::vector<std::array<int, 3>> triangles) {
  if (vertices.size() < 4) throw Error(ErrorKind::kInvalidParameter, "mesh needs at least 4 vertices");
  const int nv = static_cast<int>(vertices.size());
  for (const auto& t : triangles) {
    for (int i : t) {
      if (i < 0 || i >= nv) throw Error(ErrorKind::kInvalidParameter, "triangle index out of range");
    }
  }
  // Non-coplanarity: some vertex must leave the plane of the first three
  // non-collinear vertices.
  Vec3 centroid = Vec3::Zero();
  for (const auto& v : vertices) centroid += v;
  centroid /= nv;
  Mat3 cov = Mat3::Zero();
  for (const auto& v : vertices) cov += (v - centroid) * (v - centroid).transpose();
  Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
  if (!(eig.eigenvalues()(0) > 1e-12 * eig.eigenvalues()(2))) {
    throw Error(ErrorKind::kInvalidParameter, "mesh vertices are coplanar");
  }
  Mesh m;
  m.vertices = std::move(vertices);
  m.triangles = std::move(triangles);
  double d2 = 0.0;
  for (size_t i = 0; i < m.vertices.size(); ++i) {
    for (size_t j = i + 1; j < m.vertices.size(); ++j) {
      d2 = std::max(d2, (m.vertices[i] - m.vertices[j]).squaredNorm());
    }
  }
  m.diameter = std::sqrt(d2);
  return m;
}

Mesh make_box(double sx, double sy, double sz) {
  std::vector<Vec3> v;
  for (int i = 0; i < 8; ++i) {
    v.emplace_back((i & 1 ? 0.5 : -0.5) * sx, (i & 2 ? 0.5 : -0.5) * sy, (i & 4 ? 0.5 : -0.5) * sz);
  }
  std::vector<std::array<int, 3>> f = {
      {0, 2, 1}, {1, 2, 3}, {4, 5, 6}, {5, 7, 6}, {0, 1, 4}, {1, 5, 4},
      {2, 6, 3}, {3, 6, 7}, {0, 4, 2}, {2, 4, 6}, {1, 3, 5}, {3, 7, 5}};
  return make_mesh(std::move(v), std::move(f));
}

Mesh make_icosphere(int level) {
  if (level < 0) throw Error(ErrorKind::kInvalidParameter, "icosphere level must be >= 0");
  const double phi = std::numbers::phi;
  std::vector<Vec3> v = {{-1, phi, 0}, {1, phi, 0}, {-1, -phi, 0}, {1, -phi, 0},
                         {0, -1, phi}, {0, 1, phi}, {0, -1, -phi}, {0, 1, -phi},
                         {phi, 0, -1}, {phi, 0, 1}, {-phi, 0, -1}, {-phi, 0, 1}};
  for (auto& p : v) p.normalize();
  std::vector<std::array<int, 3>> f = {
      {0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11}, {1, 5, 9}, {5, 11, 4},
      {11, 10, 2}, {10, 7, 6}, {7, 1, 8},  {3, 9, 4},  {3, 4, 2},   {3, 2, 6}, {3, 6, 8},
      {3, 8, 9},  {4, 9, 5},  {2, 4, 11},  {6, 2, 10}, {8, 6, 7},   {9, 8, 1}};
  for (int l = 0; l < level; ++l) {
    std::map<std::pair<int, int>, int> midpoint;
    auto mid = [&](int a, int b) {
      const auto key = std::minmax(a, b);
      auto it = midpoint.find(key);
      if (it != midpoint.end()) return it->second;
      v.push_back((v[a] + v[b]).normalized());
      const int id = static_cast<int>(v.size()) - 1;
      midpoint.emplace(key, id);
      return id;
    };
    std::vector<std::array<int, 3>> next;
    next.reserve(f.size() * 4);
    for (const auto& t : f) {
      const int a = mid(t[0], t[1]), b = mid(t[1], t[2]), c = mid(t[2], t[0]);
      next.push_back({t[0], a, c});
      next.push_back({t[1], b, a});
      next.push_back({t[2], c, b});
      next.push_back({a, b, c});
    }
    f = std::move(next);
  }
  return make_mesh(std::move(v), std::move(f));
}

Mesh make_blob(std::uint64_t seed, const Vec3& half_axes, int level, double bump) {
  Mesh sphere = make_icosphere(level);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 2.0 * std::numbers::pi);
  struct Wave {
    Vec3 dir;
    double phase;
  };
  std::vector<Wave> waves;
  for (int i = 0; i < 4; ++i) {
    waves.push_back({Vec3(g(rng), g(rng), g(rng)).normalized() * 1.5, u(rng)});
  }
  std::vector<Vec3> v;
  v.reserve(sphere.vertices.size());
  for (const auto& p : sphere.vertices) {
    double r = 1.0;
    for (const auto& w : waves) r += bump / waves.size() * 2.0 * std::sin(w.dir.dot(p) * 2.0 + w.phase);
    v.push_back(p.cwiseProduct(half_axes) * std::max(r, 0.5));
  }
  Vec3 centroid = Vec3::Zero();
  for (const auto& p : v) centroid += p;
  centroid /= static_cast<double>(v.size());
  for (auto& p : v) p -= centroid;
  return make_mesh(std::move(v), sphere.triangles);
}

Pose look_at_pose(const Vec3& direction, double radius) {
  const Vec3 d = direction.normalized();
  const Vec3 z = -d;
  Vec3 up = Vec3::UnitZ();
  if (std::abs(d.dot(up)) > 0.999) up = Vec3::UnitY();
  const Vec3 y = -(up - up.dot(z) * z).normalized();
  const Vec3 x = y.cross(z);
  Pose p;
  p.rotation.row(0) = x.transpose();
  p.rotation.row(1) = y.transpose();
  p.rotation.row(2) = z.transpose();
  p.translation = -(p.rotation * (radius * d));
  return p;
}

std::vector<Vec3> viewpoint_directions(int count) {
  switch (count) {
    case 2:
      return {Vec3::UnitX(), -Vec3::UnitX()};
    case 6:
      return {Vec3::UnitX(), -Vec3::UnitX(), Vec3::UnitY(), -Vec3::UnitY(), Vec3::UnitZ(), -Vec3::UnitZ()};
    case 12:
      return make_icosphere(0).vertices;
    case 42:
      return make_icosphere(1).vertices;
    case 162:
      return make_icosphere(2).vertices;
    default:
      throw Error(ErrorKind::kInvalidParameter,
                  "unsupported viewpoint count " + std::to_string(count) + " (2, 6, 12, 42, 162)");
  }
}

std::vector<Pose> sample_viewpoints_count(int count, double radius) {
  std::vector<Pose> poses;
  for (const auto& d : viewpoint_directions(count)) poses.push_back(look_at_pose(d, radius));
  return poses;
}

std::vector<Pose> sample_viewpoints(int level, double radius) {
  static constexpr int kCounts[] = {12, 42, 162};
  if (level < 0 || level > 2) throw Error(ErrorKind::kInvalidParameter, "viewpoint level must be 0, 1 or 2");
  return sample_viewpoints_count(kCounts[level], radius);
}

Vec3 viewing_direction(const Pose& pose) {
  return (-(pose.rotation.transpose() * pose.translation)).normalized();
}

int nearest_viewpoint(const Pose& query, std::span<const Pose> candidates) {
  if (candidates.empty()) throw Error(ErrorKind::kEmptyInput, "no viewpoints");
  const Vec3 d = viewing_direction(query);
  int best = 0;
  double best_dot = -2.0;
  for (size_t i = 0; i < candidates.size(); ++i) {
    const double dot = viewing_direction(candidates[i]).dot(d);
    if (dot > best_dot) {
      best_dot = dot;
      best = static_cast<int>(i);
    }
  }
  return best;
}

View render_template(const Mesh& mesh, const Pose& pose, const Intrinsics& k, int rows, int cols) {
  k.validate();
  if (rows <= 0 || cols <= 0) throw Error(ErrorKind::kInvalidParameter, "render size must be positive");
  std::vector<Vec3> cam(mesh.vertices.size());
  std::vector<Vec2> pix(mesh.vertices.size());
  for (size_t i = 0; i < mesh.vertices.size(); ++i) {
    cam[i] = pose.apply(mesh.vertices[i]);
    if (!(cam[i].z() > 0.0)) throw Error(ErrorKind::kBehindCamera, "object is not in front of the camera");
    pix[i] = project_camera(k, cam[i]);
  }

  View view;
  view.pose = pose;
  view.k = k;
  view.crop = Affine2D{};
  view.xyz = Grid<Vec3f>(rows, cols, Vec3f::Constant(kNaN));
  view.mask = Mask(rows, cols, 0);
  view.triangle = Grid<int>(rows, cols, -1);
  Grid<double> depth(rows, cols, std::numeric_limits<double>::infinity());

  const Mat3 rt = pose.rotation.transpose();
  for (size_t ti = 0; ti < mesh.triangles.size(); ++ti) {
    const auto& t = mesh.triangles[ti];
    const Vec2 &p0 = pix[t[0]], &p1 = pix[t[1]], &p2 = pix[t[2]];
    const double area = (p1 - p0).x() * (p2 - p0).y() - (p1 - p0).y() * (p2 - p0).x();
    if (std::abs(area) < 1e-12) continue;
    const double min_x = std::min({p0.x(), p1.x(), p2.x()});
    const double max_x = std::max({p0.x(), p1.x(), p2.x()});
    const double min_y = std::min({p0.y(), p1.y(), p2.y()});
    const double max_y = std::max({p0.y(), p1.y(), p2.y()});
    const int c0 = std::max(0, static_cast<int>(std::ceil(min_x - 0.5)));
    const int c1 = std::min(cols - 1, static_cast<int>(std::floor(max_x - 0.5)));
    const int r0 = std::max(0, static_cast<int>(std::ceil(min_y - 0.5)));
    const int r1 = std::min(rows - 1, static_cast<int>(std::floor(max_y - 0.5)));
    const Vec3 &a = cam[t[0]], &b = cam[t[1]], &c = cam[t[2]];
    for (int r = r0; r <= r1; ++r) {
      for (int col = c0; col <= c1; ++col) {
        const Vec2 p(col + 0.5, r + 0.5);
        const double z = intersect(ray_through(k, p), a, b, c, 1e-9);
        if (!(z < depth(r, col))) continue;
        depth(r, col) = z;
        const Vec3 x_cam = z * ray_through(k, p).dir;
        view.xyz(r, col) = (rt * (x_cam - pose.translation)).cast<float>();
        view.mask(r, col) = 1;
        view.triangle(r, col) = static_cast<int>(ti);
      }
    }
  }
  if (count_set(view.mask) == 0) throw Error(ErrorKind::kDegenerateRender, "render covers no pixels");
  return view;
}

Affine2D crop_frame_for(const Mesh& mesh, const Pose& pose, const Intrinsics& k, int size,
                        double pad) {
  double min_u = std::numeric_limits<double>::infinity(), max_u = -min_u;
  double min_v = min_u, max_v = -min_u;
  for (const auto& v : mesh.vertices) {
    const Vec2 p = project(k, pose, v);
    min_u = std::min(min_u, p.x());
    max_u = std::max(max_u, p.x());
    min_v = std::min(min_v, p.y());
    max_v = std::max(max_v, p.y());
  }
  const double side = std::max(max_u - min_u, max_v - min_v) * (1.0 + pad);
  if (!(side > 0.0)) throw Error(ErrorKind::kDegenerateRender, "object projects to a point");
  const Vec2 center(0.5 * (min_u + max_u), 0.5 * (min_v + max_v));
  return {0.0, side / size, center.x() - 0.5 * side, center.y() - 0.5 * side};
}

View render_crop(const Mesh& mesh, const Pose& pose, const Intrinsics& k, int size, double pad) {
  const Affine2D crop = crop_frame_for(mesh, pose, k, size, pad);
  View view = render_template(mesh, pose, crop_intrinsics(k, crop), size, size);
  view.k = k;
  view.crop = crop;
  return view;
}

bool surface_point_at(const View& view, const Mesh& mesh, const Vec2& p, Vec3& out) {
  const Intrinsics kc = crop_intrinsics(view.k, view.crop);
  const int cr = static_cast<int>(std::floor(p.y()));
  const int cc = static_cast<int>(std::floor(p.x()));
  const CameraRay ray = ray_through(kc, p);
  double best = std::numeric_limits<double>::infinity();
  int tried[9];
  int n_tried = 0;
  for (int dr = -1; dr <= 1; ++dr) {
    for (int dc = -1; dc <= 1; ++dc) {
      if (!view.triangle.in_bounds(cr + dr, cc + dc)) continue;
      const int ti = view.triangle(cr + dr, cc + dc);
      if (ti < 0 || std::find(tried, tried + n_tried, ti) != tried + n_tried) continue;
      tried[n_tried++] = ti;
      const auto& t = mesh.triangles[ti];
      const double z = intersect(ray, view.pose.apply(mesh.vertices[t[0]]),
                                 view.pose.apply(mesh.vertices[t[1]]),
                                 view.pose.apply(mesh.vertices[t[2]]), 1e-9);
      if (z < best) best = z;
    }
  }
  if (!std::isfinite(best)) return false;
  out = view.pose.rotation.transpose() * (best * ray.dir - view.pose.translation);
  return true;
}

void ground_truth_flow(const View& obs, const View& tmpl, const Mesh& mesh, const Affine2D& fill,
                       PositionMap& flow, CertaintyMap& certainty) {
  const int rows = obs.mask.rows(), cols = obs.mask.cols();
  flow = PositionMap(rows, cols);
  certainty = CertaintyMap(rows, cols, 0.0);
  const Affine2D to_tmpl_crop = affine_invert(tmpl.crop);
  const double tol = 1e-4 * mesh.diameter;
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const Vec2 center(c + 0.5, r + 0.5);
      flow(r, c) = affine_apply(fill, center);
      if (!obs.mask(r, c)) continue;
      const Vec3 x = obs.xyz(r, c).cast<double>();
      const Vec3 x_cam = tmpl.pose.apply(x);
      if (!(x_cam.z() > 0.0)) continue;
      const Vec2 q = affine_apply(to_tmpl_crop, project_camera(tmpl.k, x_cam));
      flow(r, c) = q;
      Vec3 hit;
      if (surface_point_at(tmpl, mesh, q, hit) && (hit - x).norm() < tol) certainty(r, c) = 1.0;
    }
  }
}

bool gt_correspondence(const View& obs, const View& tmpl, const Mesh& mesh, const Vec2& p, Vec2& q) {
  Vec3 x;
  if (!surface_point_at(obs, mesh, p, x)) return false;
  const Vec3 x_cam = tmpl.pose.apply(x);
  if (!(x_cam.z() > 0.0)) return false;
  q = affine_apply(affine_invert(tmpl.crop), project_camera(tmpl.k, x_cam));
  Vec3 hit;
  return surface_point_at(tmpl, mesh, q, hit) && (hit - x).norm() < 1e-4 * mesh.diameter;
}

std::vector<Vec3> sample_surface_points(const View& view, int max_points) {
  std::vector<Vec3> all;
  for (int r = 0; r < view.mask.rows(); ++r) {
    for (int c = 0; c < view.mask.cols(); ++c) {
      if (view.mask(r, c)) all.push_back(view.xyz(r, c).cast<double>());
    }
  }
  if (static_cast<int>(all.size()) <= max_points) return all;
  std::vector<Vec3> out;
  out.reserve(max_points);
  const double stride = static_cast<double>(all.size()) / max_points;
  for (int i = 0; i < max_points; ++i) out.push_back(all[static_cast<size_t>(i * stride)]);
  return out;
}

Scene make_scene(const Mesh& mesh, const Pose& query_pose, const Intrinsics& k, int size,
                 std::span<const View> templates) {
  if (templates.empty()) throw Error(ErrorKind::kEmptyInput, "no templates");
  Scene scene;
  try {
    scene.observation = render_crop(mesh, query_pose, k, size);
  } catch (const Error& e) {
    throw Error(ErrorKind::kDegenerateScene, std::string("query view not renderable: ") + e.what());
  }
  std::vector<Pose> poses;
  poses.reserve(templates.size());
  for (const auto& t : templates) poses.push_back(t.pose);
  scene.best_template = nearest_viewpoint(query_pose, poses);
  const View& tmpl = templates[scene.best_template];

  const auto points = sample_surface_points(scene.observation);
  const SimilarityFit fit =
      gt_affine_between(query_pose, tmpl.pose, k, scene.observation.crop, tmpl.crop, points);
  scene.gt.pose = query_pose;
  scene.gt.affine = fit.affine;
  scene.gt.affine_rms = fit.rms;
  ground_truth_flow(scene.observation, tmpl, mesh, fit.affine, scene.gt.flow, scene.gt.certainty);
  return scene;
}

Pose random_query_pose(std::mt19937_64& rng, const Intrinsics& k, const QueryPoseConfig& cfg) {
  std::uniform_real_distribution<double> dist(cfg.min_distance, cfg.max_distance);
  std::uniform_real_distribution<double> du(-cfg.max_offset_u, cfg.max_offset_u);
  std::uniform_real_distribution<double> dv(-cfg.max_offset_v, cfg.max_offset_v);
  Pose p;
  p.rotation = random_rotation(rng);
  const double z = dist(rng);
  const double u = du(rng), v = dv(rng);
  p.translation = Vec3(u / k.fx * z, v / k.fy * z, z);
  return p;
}

}  // namespace picopose
