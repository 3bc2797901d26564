#pragma once

// Skeleton graphs, spatial-configuration partitioning, and joint -> part
// pooling maps. Layouts are read from a line-oriented text format:
//
//   # comment
//   joints 25
//   center 20
//   edge 0 1
//   grain 1 part 0 joints 0,1,20
//   bone 1 20
//
// Grain 0 (the joint grain) is implicit and always the identity.

#include <Eigen/Core>

#include <algorithm>
#include <fstream>
#include <map>
#include <queue>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "stf/errors.hpp"

namespace stf::inline STF_PRECISION_NS {

using JointMatrix = Eigen::MatrixXd;

struct SkeletonGraph {
  std::size_t num_joints = 0;
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  std::size_t center_joint = 0;
};

// Hop distance from `source` to every joint; unreachable joints get
// num_joints (which is larger than any real distance).
inline std::vector<std::size_t> hop_distances(const SkeletonGraph& graph, std::size_t source) {
  const std::size_t v = graph.num_joints;
  std::vector<std::vector<std::size_t>> nbrs(v);
  for (auto [a, b] : graph.edges) {
    nbrs[a].push_back(b);
    nbrs[b].push_back(a);
  }
  std::vector<std::size_t> dist(v, v);
  std::queue<std::size_t> frontier;
  dist[source] = 0;
  frontier.push(source);
  while (!frontier.empty()) {
    const std::size_t u = frontier.front();
    frontier.pop();
    for (std::size_t w : nbrs[u]) {
      if (dist[w] == v) {
        dist[w] = dist[u] + 1;
        frontier.push(w);
      }
    }
  }
  return dist;
}

inline void validate(const SkeletonGraph& graph) {
  if (graph.num_joints == 0) throw TopologyError("skeleton has no joints");
  if (graph.center_joint >= graph.num_joints) throw TopologyError("center joint out of range");
  for (auto [a, b] : graph.edges) {
    if (a >= graph.num_joints || b >= graph.num_joints) {
      throw TopologyError("edge (" + std::to_string(a) + "," + std::to_string(b) + ") out of range for " +
                          std::to_string(graph.num_joints) + " joints");
    }
    if (a == b) throw TopologyError("self-loop on joint " + std::to_string(a) + " in edge list");
  }
  const auto dist = hop_distances(graph, graph.center_joint);
  for (std::size_t j = 0; j < graph.num_joints; ++j) {
    if (dist[j] == graph.num_joints) {
      throw TopologyError("skeleton is disconnected: joint " + std::to_string(j) + " unreachable from center");
    }
  }
}

// A + I.
inline JointMatrix build_adjacency(const SkeletonGraph& graph) {
  for (auto [a, b] : graph.edges) {
    if (a >= graph.num_joints || b >= graph.num_joints) {
      throw TopologyError("edge (" + std::to_string(a) + "," + std::to_string(b) + ") out of range");
    }
  }
  const auto v = static_cast<Eigen::Index>(graph.num_joints);
  JointMatrix adj = JointMatrix::Identity(v, v);
  for (auto [a, b] : graph.edges) {
    adj(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = 1.0;
    adj(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(a)) = 1.0;
  }
  return adj;
}

// D_r^{-1/2} A D_c^{-1/2}, D_r / D_c the row / column sums. For symmetric A
// this is the usual D^{-1/2} A D^{-1/2}. A zero degree contributes a zero
// factor, so empty rows stay empty.
inline JointMatrix normalize_adjacency(const JointMatrix& a) {
  if (a.rows() != a.cols()) {
    throw ShapeError("normalize_adjacency: matrix is " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()));
  }
  const Eigen::VectorXd rows = a.rowwise().sum();
  const Eigen::VectorXd cols = a.colwise().sum().transpose();
  auto inv_sqrt = [](double d) { return d > 0.0 ? 1.0 / std::sqrt(d) : 0.0; };
  JointMatrix out(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j) out(i, j) = inv_sqrt(rows(i)) * a(i, j) * inv_sqrt(cols(j));
  return out;
}

struct PartitionedAdjacency {
  static constexpr std::size_t kSubsets = 3;
  std::vector<JointMatrix> raw;      // un-normalized root / centripetal / centrifugal
  std::vector<JointMatrix> subsets;  // normalized
  std::vector<JointMatrix> masks;    // trainable offsets, initialized to subsets

  std::size_t size() const { return subsets.size(); }
};

// Root / centripetal / centrifugal split by hop distance to the center.
// Entry (i, j) is centripetal when j is strictly closer to the center than
// i, centrifugal when strictly farther, and root otherwise (self loops and
// equal-distance neighbors).
inline PartitionedAdjacency partition_adjacency(const SkeletonGraph& graph) {
  validate(graph);
  const JointMatrix adj = build_adjacency(graph);
  const auto dist = hop_distances(graph, graph.center_joint);
  const auto v = adj.rows();
  PartitionedAdjacency out;
  out.raw.assign(PartitionedAdjacency::kSubsets, JointMatrix::Zero(v, v));
  for (Eigen::Index i = 0; i < v; ++i) {
    for (Eigen::Index j = 0; j < v; ++j) {
      if (adj(i, j) == 0.0) continue;
      const auto di = dist[static_cast<std::size_t>(i)], dj = dist[static_cast<std::size_t>(j)];
      const std::size_t subset = dj == di ? 0 : (dj < di ? 1 : 2);
      out.raw[subset](i, j) = adj(i, j);
    }
  }
  for (const auto& r : out.raw) out.subsets.push_back(normalize_adjacency(r));
  out.masks = out.subsets;
  return out;
}

// Single-subset variant: the normalized A + I alone.
inline PartitionedAdjacency uniform_adjacency(const SkeletonGraph& graph) {
  validate(graph);
  PartitionedAdjacency out;
  out.raw = {build_adjacency(graph)};
  out.subsets = {normalize_adjacency(out.raw[0])};
  out.masks = out.subsets;
  return out;
}

struct GrainMapping {
  std::size_t grain_id = 0;
  std::size_t part_count = 0;
  JointMatrix pooling;  // part_count x V, rows are uniform joint averages
};

inline void validate(const GrainMapping& g, std::size_t num_joints) {
  if (static_cast<std::size_t>(g.pooling.cols()) != num_joints ||
      static_cast<std::size_t>(g.pooling.rows()) != g.part_count || g.part_count == 0) {
    throw ValidationError("grain " + std::to_string(g.grain_id) + ": pooling matrix shape mismatch");
  }
  for (Eigen::Index j = 0; j < g.pooling.cols(); ++j) {
    int nonzero = 0;
    for (Eigen::Index p = 0; p < g.pooling.rows(); ++p) {
      if (g.pooling(p, j) < 0.0) throw ValidationError("grain " + std::to_string(g.grain_id) + ": negative weight");
      if (g.pooling(p, j) != 0.0) ++nonzero;
    }
    if (nonzero != 1) {
      throw ValidationError("grain " + std::to_string(g.grain_id) + ": joint " + std::to_string(j) + " belongs to " +
                            std::to_string(nonzero) + " parts (exactly one required)");
    }
  }
  for (Eigen::Index p = 0; p < g.pooling.rows(); ++p) {
    if (std::abs(g.pooling.row(p).sum() - 1.0) > 1e-12) {
      throw ValidationError("grain " + std::to_string(g.grain_id) + ": part " + std::to_string(p) + " weights do not sum to 1");
    }
  }
}

// Uniform-average pooling from a joint list per part.
inline GrainMapping make_grain(std::size_t grain_id, const std::vector<std::vector<std::size_t>>& parts,
                               std::size_t num_joints) {
  GrainMapping g;
  g.grain_id = grain_id;
  g.part_count = parts.size();
  g.pooling = JointMatrix::Zero(static_cast<Eigen::Index>(parts.size()), static_cast<Eigen::Index>(num_joints));
  for (std::size_t p = 0; p < parts.size(); ++p) {
    if (parts[p].empty()) throw ValidationError("grain " + std::to_string(grain_id) + ": part " + std::to_string(p) + " is empty");
    for (std::size_t j : parts[p]) {
      if (j >= num_joints) throw ValidationError("grain " + std::to_string(grain_id) + ": joint index " + std::to_string(j) + " out of range");
      auto& w = g.pooling(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(j));
      if (w != 0.0) throw ValidationError("grain " + std::to_string(grain_id) + ": joint " + std::to_string(j) + " listed twice");
      w = 1.0 / static_cast<double>(parts[p].size());
    }
  }
  validate(g, num_joints);
  return g;
}

inline GrainMapping identity_grain(std::size_t num_joints) {
  GrainMapping g;
  g.grain_id = 0;
  g.part_count = num_joints;
  g.pooling = JointMatrix::Identity(static_cast<Eigen::Index>(num_joints), static_cast<Eigen::Index>(num_joints));
  return g;
}

// (source, target) pairs, one per non-root joint, target toward the center.
using BonePairs = std::vector<std::pair<std::size_t, std::size_t>>;

inline void validate_bones(const BonePairs& bones, const SkeletonGraph& graph) {
  const std::size_t v = graph.num_joints;
  std::vector<long> target(v, -1);
  for (auto [s, t] : bones) {
    if (s >= v || t >= v) throw DataError("bone (" + std::to_string(s) + "," + std::to_string(t) + ") out of range");
    if (s == graph.center_joint) throw ValidationError("bone list uses the root joint as a source");
    if (target[s] != -1) throw ValidationError("joint " + std::to_string(s) + " is the source of more than one bone");
    target[s] = static_cast<long>(t);
  }
  for (std::size_t j = 0; j < v; ++j) {
    if (j == graph.center_joint) continue;
    if (target[j] == -1) throw ValidationError("joint " + std::to_string(j) + " has no bone");
    // following targets must reach the root within v steps
    std::size_t cur = j, steps = 0;
    while (cur != graph.center_joint) {
      if (++steps > v) throw ValidationError("bone pairs contain a cycle through joint " + std::to_string(j));
      cur = static_cast<std::size_t>(target[cur]);
    }
  }
}

// BFS spanning tree; each joint points at its lowest-index neighbor one hop
// closer to the center.
inline BonePairs derive_bones(const SkeletonGraph& graph) {
  validate(graph);
  const auto dist = hop_distances(graph, graph.center_joint);
  BonePairs bones;
  for (std::size_t j = 0; j < graph.num_joints; ++j) {
    if (j == graph.center_joint) continue;
    std::size_t best = graph.num_joints;
    for (auto [a, b] : graph.edges) {
      const std::size_t other = a == j ? b : (b == j ? a : graph.num_joints);
      if (other < graph.num_joints && dist[other] + 1 == dist[j]) best = std::min(best, other);
    }
    bones.emplace_back(j, best);
  }
  return bones;
}

struct Layout {
  std::string name;
  SkeletonGraph graph;
  std::vector<GrainMapping> grains;  // grains[0] is the joint identity
  BonePairs bones;

  std::size_t num_joints() const { return graph.num_joints; }
};

namespace detail {

inline std::vector<std::size_t> parse_index_list(const std::string& text, const std::string& where) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      std::size_t pos = 0;
      const unsigned long v = std::stoul(item, &pos);
      if (pos != item.size()) throw std::invalid_argument(item);
      out.push_back(v);
    } catch (const std::exception&) {
      throw ConfigError(where + ": bad joint index '" + item + "'");
    }
  }
  return out;
}

}  // namespace detail

inline Layout parse_layout(std::istream& is, const std::string& name = "custom") {
  Layout layout;
  layout.name = name;
  std::map<std::size_t, std::map<std::size_t, std::vector<std::size_t>>> grain_parts;
  bool have_joints = false, have_center = false;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::stringstream ss(line);
    std::string key;
    if (!(ss >> key)) continue;
    const std::string where = name + ":" + std::to_string(lineno);
    auto need = [&](auto& v) {
      if (!(ss >> v)) throw ConfigError(where + ": malformed '" + key + "' line");
    };
    if (key == "joints") {
      need(layout.graph.num_joints);
      have_joints = true;
    } else if (key == "center") {
      need(layout.graph.center_joint);
      have_center = true;
    } else if (key == "edge") {
      std::size_t a = 0, b = 0;
      need(a);
      need(b);
      layout.graph.edges.emplace_back(a, b);
    } else if (key == "bone") {
      std::size_t a = 0, b = 0;
      need(a);
      need(b);
      layout.bones.emplace_back(a, b);
    } else if (key == "name") {
      need(layout.name);
    } else if (key == "grain") {
      std::size_t g = 0, p = 0;
      std::string part_kw, joints_kw, list;
      need(g);
      need(part_kw);
      need(p);
      need(joints_kw);
      need(list);
      if (part_kw != "part" || joints_kw != "joints") throw ConfigError(where + ": expected 'grain g part p joints i,j,...'");
      if (g == 0) throw ValidationError(where + ": grain 0 is the implicit joint grain");
      auto& dst = grain_parts[g][p];
      for (auto j : detail::parse_index_list(list, where)) dst.push_back(j);
    } else {
      throw ConfigError(where + ": unknown directive '" + key + "'");
    }
  }
  if (!have_joints || !have_center) throw ConfigError(name + ": layout needs 'joints' and 'center' lines");
  validate(layout.graph);
  const std::size_t v = layout.graph.num_joints;
  layout.grains.push_back(identity_grain(v));
  std::size_t expected = 1;
  for (auto& [g, parts] : grain_parts) {
    if (g != expected++) throw ValidationError(name + ": grains must be numbered 1, 2, ... without gaps");
    std::vector<std::vector<std::size_t>> list;
    std::size_t expected_part = 0;
    for (auto& [p, joints] : parts) {
      if (p != expected_part++) throw ValidationError(name + ": grain " + std::to_string(g) + " parts must be numbered 0, 1, ...");
      list.push_back(joints);
    }
    layout.grains.push_back(make_grain(g, list, v));
  }
  if (layout.bones.empty()) {
    layout.bones = derive_bones(layout.graph);
  } else {
    validate_bones(layout.bones, layout.graph);
  }
  return layout;
}

namespace layouts {

// NTU RGB+D, 0-based. 0 spine base, 1 spine mid, 2 neck, 3 head,
// 4-7 left shoulder/elbow/wrist/hand, 8-11 right arm, 12-15 left leg,
// 16-19 right leg, 20 spine shoulder, 21/22 left hand tip/thumb,
// 23/24 right hand tip/thumb.
inline constexpr std::string_view kNtu25 = R"(name ntu25
joints 25
center 20
edge 0 1
edge 1 20
edge 2 20
edge 3 2
edge 4 20
edge 5 4
edge 6 5
edge 7 6
edge 8 20
edge 9 8
edge 10 9
edge 11 10
edge 12 0
edge 13 12
edge 14 13
edge 15 14
edge 16 0
edge 17 16
edge 18 17
edge 19 18
edge 21 22
edge 22 7
edge 23 24
edge 24 11
# fined parts: head, torso, L upper arm, L hand, R upper arm, R hand,
# L thigh, L foot, R thigh, R foot
grain 1 part 0 joints 2,3
grain 1 part 1 joints 0,1,20
grain 1 part 2 joints 4,5
grain 1 part 3 joints 6,7,21,22
grain 1 part 4 joints 8,9
grain 1 part 5 joints 10,11,23,24
grain 1 part 6 joints 12,13
grain 1 part 7 joints 14,15
grain 1 part 8 joints 16,17
grain 1 part 9 joints 18,19
# coarse parts: torso, left arm, right arm, left leg, right leg
grain 2 part 0 joints 0,1,2,3,20
grain 2 part 1 joints 4,5,6,7,21,22
grain 2 part 2 joints 8,9,10,11,23,24
grain 2 part 3 joints 12,13,14,15
grain 2 part 4 joints 16,17,18,19
)";

// OpenPose 18-joint: 0 nose, 1 neck, 2-4 right arm, 5-7 left arm,
// 8-10 right leg, 11-13 left leg, 14/15 eyes, 16/17 ears.
inline constexpr std::string_view kKinetics18 = R"(name kinetics18
joints 18
center 1
edge 4 3
edge 3 2
edge 7 6
edge 6 5
edge 13 12
edge 12 11
edge 10 9
edge 9 8
edge 11 5
edge 8 2
edge 5 1
edge 2 1
edge 0 1
edge 15 0
edge 14 0
edge 17 15
edge 16 14
# coarse parts: head, torso, right arm, left arm, legs
grain 1 part 0 joints 0,14,15,16,17
grain 1 part 1 joints 1,8,11
grain 1 part 2 joints 2,3,4
grain 1 part 3 joints 5,6,7
grain 1 part 4 joints 9,10,12,13
)";

// Five-joint star used by the gradient checks and small tests.
inline constexpr std::string_view kMicro5 = R"(name micro5
joints 5
center 0
edge 0 1
edge 0 2
edge 0 3
edge 0 4
grain 1 part 0 joints 0,1
grain 1 part 1 joints 2
grain 1 part 2 joints 3
grain 1 part 3 joints 4
grain 2 part 0 joints 0,1,4
grain 2 part 1 joints 2,3
)";

}  // namespace layouts

inline Layout parse_layout(std::string_view text, const std::string& name) {
  std::istringstream is{std::string(text)};
  return parse_layout(is, name);
}

// Built-in id (ntu25, kinetics18, micro5) or a path to a layout file.
inline Layout load_layout(const std::string& id) {
  if (id == "ntu25") return parse_layout(layouts::kNtu25, "ntu25");
  if (id == "kinetics18") return parse_layout(layouts::kKinetics18, "kinetics18");
  if (id == "micro5") return parse_layout(layouts::kMicro5, "micro5");
  std::ifstream is(id);
  if (!is) throw ConfigError("unknown layout '" + id + "' (not a built-in id and not a readable file)");
  return parse_layout(is, id);
}

inline std::vector<GrainMapping> build_grain_mappings(const std::string& layout) { return load_layout(layout).grains; }

// Relabels joints: joint j of `graph` becomes perm[j].
inline SkeletonGraph relabel(const SkeletonGraph& graph, const std::vector<std::size_t>& perm) {
  SkeletonGraph out = graph;
  out.center_joint = perm.at(graph.center_joint);
  for (auto& [a, b] : out.edges) {
    a = perm.at(a);
    b = perm.at(b);
  }
  return out;
}

}  // namespace stf::inline STF_PRECISION_NS
