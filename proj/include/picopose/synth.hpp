#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "picopose/geometry.hpp"
#include "picopose/grid.hpp"

namespace picopose {

struct Mesh {
  std::vector<Vec3> vertices;  // meters, object frame
  std::vector<std::array<int, 3>> triangles;
  double diameter = 0.0;  // max pairwise vertex distance
};

// Validates indices and non-degeneracy and fills in the diameter.
Mesh make_mesh(std::vector<Vec3> vertices, std::vector<std::array<int, 3>> triangles);
Mesh make_box(double size_x, double size_y, double size_z);
// Unit icosphere after `level` loop subdivisions (12, 42, 162, ... vertices).
Mesh make_icosphere(int level);
// Star-shaped asymmetric blob: an icosphere scaled to the given half-axes and
// modulated by seeded low-frequency bumps, recentered on its vertex centroid.
Mesh make_blob(std::uint64_t seed, const Vec3& half_axes, int level = 2, double bump = 0.15);

// A rendered view: per-pixel object-frame surface points plus coverage. Used
// both for templates and for synthetic observation crops.
struct View {
  Grid<Vec3f> xyz;        // NaN where mask is 0
  Mask mask;
  Grid<int> triangle;     // visible triangle id, -1 off the object
  Pose pose;
  Intrinsics k;           // full-image intrinsics
  Affine2D crop;          // crop coordinates -> full-image coordinates
};

// Object-to-camera pose that looks at the object origin from `direction`
// (unit, object frame) at `radius`, keeping object +z up where possible.
Pose look_at_pose(const Vec3& direction, double radius);

std::vector<Vec3> viewpoint_directions(int count);
// Icosphere viewpoints: 12, 42, 162 poses for levels 0, 1, 2.
std::vector<Pose> sample_viewpoints(int level, double radius);
// Also accepts 2 (poles) and 6 (octahedron) for template-count sweeps.
std::vector<Pose> sample_viewpoints_count(int count, double radius);

// Object-to-camera viewing direction expressed in the object frame.
Vec3 viewing_direction(const Pose& pose);
int nearest_viewpoint(const Pose& query, std::span<const Pose> candidates);

// Z-buffered rasterization at pixel centers; each covered pixel stores the
// exact ray/triangle intersection. `k` are the intrinsics of the rendered grid.
View render_template(const Mesh& mesh, const Pose& pose, const Intrinsics& k, int rows, int cols);

// Square crop window around the projected vertex bounding box, padded.
Affine2D crop_frame_for(const Mesh& mesh, const Pose& pose, const Intrinsics& k, int size,
                        double pad = 0.1);
// Renders the crop window of `pose` under full-image intrinsics `k`.
View render_crop(const Mesh& mesh, const Pose& pose, const Intrinsics& k, int size,
                 double pad = 0.1);

// Exact surface point of `view` seen through continuous crop position `p`,
// using the visible triangles around p. Returns false if p is off the object.
bool surface_point_at(const View& view, const Mesh& mesh, const Vec2& p, Vec3& out);

struct SceneGT {
  Pose pose;
  Affine2D affine;          // observation crop -> template crop
  double affine_rms = 0.0;
  PositionMap flow;         // observation pixel -> template position
  CertaintyMap certainty;   // 1 where mutually visible and depth-consistent
};

struct Scene {
  View observation;
  SceneGT gt;
  int best_template = -1;
};

// Dense ground-truth flow of `obs` into `tmpl`. Off-object pixels receive the
// positions induced by `fill` and zero certainty.
void ground_truth_flow(const View& obs, const View& tmpl, const Mesh& mesh, const Affine2D& fill,
                       PositionMap& flow, CertaintyMap& certainty);

// Exact correspondence of continuous observation position `p` in `tmpl`.
// Returns false when p is off the object or the point is hidden in tmpl.
bool gt_correspondence(const View& obs, const View& tmpl, const Mesh& mesh, const Vec2& p, Vec2& q);

// Up to `max_points` object points sampled from the view's mask on a stride.
std::vector<Vec3> sample_surface_points(const View& view, int max_points = 400);

Scene make_scene(const Mesh& mesh, const Pose& query_pose, const Intrinsics& k, int size,
                 std::span<const View> templates);

struct QueryPoseConfig {
  double min_distance = 0.5;
  double max_distance = 0.8;
  double max_offset_u = 150.0;  // pixels from the principal point
  double max_offset_v = 100.0;
};

Pose random_query_pose(std::mt19937_64& rng, const Intrinsics& k, const QueryPoseConfig& cfg = {});

}  // namespace picopose
