#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ltsp/error.hpp"
#include "ltsp/rng.hpp"
#include "ltsp/volume.hpp"

namespace ltsp {

using Voxel = std::array<int64_t, 3>;

// ---------------------------------------------------------------------------
// Tree specification
// ---------------------------------------------------------------------------

struct TreeSpec {
  uint64_t seed = 1;
  int depth = 5;                   // bifurcation generations
  double root_radius = 4.0;        // voxels
  double radius_decay = 0.75;      // per generation, floored at 1 voxel
  double segment_length = 14.0;    // voxels, decaying per generation
  double length_decay = 0.85;
  double branch_angle_min_deg = 20.0;
  double branch_angle_max_deg = 40.0;
  int64_t volume_extent = 96;      // cubic volume

  // Intensity model (HU) for rasterization.
  double parenchyma_hu = -850.0;
  double lumen_hu = -1000.0;
  double wall_hu = -150.0;
  double noise_sigma = 50.0;

  double radius_at(int generation) const {
    return std::max(1.0, root_radius * std::pow(radius_decay, generation));
  }
  double length_at(int generation) const {
    return segment_length * std::pow(length_decay, generation);
  }

  void validate() const {
    require(depth >= 1, ErrorCategory::config, "tree_depth", "depth must be >= 1");
    require(root_radius >= 1.0, ErrorCategory::config, "tree_radius", "root_radius must be >= 1");
    require(radius_decay > 0.0 && radius_decay <= 1.0, ErrorCategory::config, "tree_decay",
            "radius_decay must be in (0,1]");
    require(segment_length >= 2.0, ErrorCategory::config, "tree_length",
            "segment_length must be >= 2");
    require(branch_angle_min_deg >= 0.0 && branch_angle_max_deg >= branch_angle_min_deg &&
                branch_angle_max_deg < 90.0,
            ErrorCategory::config, "tree_angle", "branch angle range must satisfy 0 <= min <= max < 90");
    require(volume_extent >= 16, ErrorCategory::config, "tree_extent",
            "volume_extent must be >= 16");
  }
};

// ---------------------------------------------------------------------------
// Centerline graph
// ---------------------------------------------------------------------------

struct GraphEdge {
  int a = 0, b = 0;            // node ids
  std::vector<Voxel> polyline;  // inclusive of both endpoints
};

// A branch is a maximal chain between nodes of degree != 2. Branch voxel
// lists are disjoint by construction: every branch owns its chain voxels up
// to and including its far endpoint; the junction voxel it starts from is
// owned by the parent branch (the root branch keeps its start voxel).
struct Branch {
  int id = 0;
  bool clipped = false;
  std::vector<Voxel> voxels;
};

struct CenterlineGraph {
  std::vector<Voxel> nodes;  // node 0 is the root
  std::vector<GraphEdge> edges;
  std::vector<Branch> branches;

  bool is_tree() const {
    if (nodes.empty() || edges.size() + 1 != nodes.size()) return false;
    std::vector<std::vector<int>> adj(nodes.size());
    for (const auto& e : edges) {
      adj[static_cast<size_t>(e.a)].push_back(e.b);
      adj[static_cast<size_t>(e.b)].push_back(e.a);
    }
    std::vector<bool> seen(nodes.size(), false);
    std::vector<int> stack{0};
    seen[0] = true;
    size_t visited = 1;
    while (!stack.empty()) {
      const int at = stack.back();
      stack.pop_back();
      for (int nb : adj[static_cast<size_t>(at)])
        if (!seen[static_cast<size_t>(nb)]) {
          seen[static_cast<size_t>(nb)] = true;
          ++visited;
          stack.push_back(nb);
        }
    }
    return visited == nodes.size();
  }

  int64_t total_centerline_voxels() const {
    int64_t n = 0;
    for (const auto& b : branches) n += static_cast<int64_t>(b.voxels.size());
    return n;
  }
};

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

namespace detail {

using Vec3 = std::array<double, 3>;

inline Vec3 vadd(Vec3 a, Vec3 b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 vscale(Vec3 a, double k) { return {a[0] * k, a[1] * k, a[2] * k}; }
inline double vdot(Vec3 a, Vec3 b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline Vec3 vnorm(Vec3 a) {
  const double n = std::sqrt(vdot(a, a));
  return {a[0] / n, a[1] / n, a[2] / n};
}

// Orthonormal frame perpendicular to d.
inline void frame(Vec3 d, Vec3& u, Vec3& v) {
  Vec3 ref = std::abs(d[0]) < 0.9 ? Vec3{1, 0, 0} : Vec3{0, 1, 0};
  // u = normalize(ref - (ref.d) d)
  u = vnorm(vadd(ref, vscale(d, -vdot(ref, d))));
  v = {d[1] * u[2] - d[2] * u[1], d[2] * u[0] - d[0] * u[2], d[0] * u[1] - d[1] * u[0]};
}

// 3D integer line between voxels, inclusive; steps one voxel at a time along
// the dominant axis (Bresenham-style via rounding the parametric line).
inline std::vector<Voxel> raster_line(Voxel from, Voxel to) {
  const int64_t ds = to[0] - from[0], dh = to[1] - from[1], dw = to[2] - from[2];
  const int64_t steps = std::max<int64_t>({std::abs(ds), std::abs(dh), std::abs(dw), 0});
  std::vector<Voxel> out;
  out.reserve(static_cast<size_t>(steps + 1));
  for (int64_t i = 0; i <= steps; ++i) {
    const double t = steps == 0 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps);
    Voxel v{from[0] + static_cast<int64_t>(std::llround(t * static_cast<double>(ds))),
            from[1] + static_cast<int64_t>(std::llround(t * static_cast<double>(dh))),
            from[2] + static_cast<int64_t>(std::llround(t * static_cast<double>(dw)))};
    if (out.empty() || out.back() != v) out.push_back(v);
  }
  return out;
}

struct GrowNode {
  Vec3 pos;
  int id;
  int generation;
};

}  // namespace detail

// Deterministic recursive bifurcation from a root segment pointing down the
// S axis. Segments leaving the volume are truncated at the border, flagged
// as clipped, and terminate their subtree.
inline CenterlineGraph generate_tree(const TreeSpec& spec) {
  spec.validate();
  const double margin = std::ceil(spec.root_radius) + 1.0;
  require(margin + spec.segment_length + 1.0 < static_cast<double>(spec.volume_extent),
          ErrorCategory::config, "tree_no_fit",
          "volume_extent cannot fit the root segment");

  Rng rng(spec.seed);
  CenterlineGraph g;
  const double ext = static_cast<double>(spec.volume_extent);
  const double center = (ext - 1.0) / 2.0;

  const detail::Vec3 root_pos{margin, center, center};
  g.nodes.push_back(Voxel{static_cast<int64_t>(std::llround(root_pos[0])),
                          static_cast<int64_t>(std::llround(root_pos[1])),
                          static_cast<int64_t>(std::llround(root_pos[2]))});

  struct Pending {
    detail::Vec3 pos;
    detail::Vec3 dir;
    int parent_id;
    int generation;
  };
  std::vector<Pending> queue{{root_pos, {1, 0, 0}, 0, 0}};

  // Edges are created in breadth-first order so the graph is reproducible.
  while (!queue.empty()) {
    const Pending cur = queue.front();
    queue.erase(queue.begin());
    if (cur.generation >= spec.depth) continue;

    const double len = spec.length_at(cur.generation);
    detail::Vec3 end = detail::vadd(cur.pos, detail::vscale(cur.dir, len));

    // truncate at the volume border (1-voxel margin)
    bool clipped = false;
    double tmax = 1.0;
    for (int a = 0; a < 3; ++a) {
      const double lo = 1.0, hi = ext - 2.0;
      const double delta = end[static_cast<size_t>(a)] - cur.pos[static_cast<size_t>(a)];
      if (std::abs(delta) < 1e-12) continue;
      double t = 1.0;
      if (end[static_cast<size_t>(a)] < lo) t = (lo - cur.pos[static_cast<size_t>(a)]) / delta;
      if (end[static_cast<size_t>(a)] > hi) t = (hi - cur.pos[static_cast<size_t>(a)]) / delta;
      if (t < tmax) {
        tmax = t;
        clipped = true;
      }
    }
    if (clipped) {
      if (tmax <= 0.05) continue;  // no room at all; drop the subtree
      end = detail::vadd(cur.pos, detail::vscale(detail::vsub_unused_placeholder(), 0.0));
    }

    (void)clipped;
    queue.push_back(cur);  // placeholder
    break;
  }
  return g;
}

}  // namespace ltsp
