#pragma once

// Skeleton sequences on disk, temporal alignment, manifests, and the
// synthetic motion dataset.
//
// SKEL file, little-endian:
//   offset 0   "SKEL"
//   offset 4   u32 version (1)
//   offset 8   u32 C, u32 T, u32 V
//   offset 20  u32 label
//   offset 24  float32 payload, C x T x V row-major

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "stf/rng.hpp"
#include "stf/serialize.hpp"
#include "stf/tensor.hpp"
#include "stf/topology.hpp"

namespace stf::inline STF_PRECISION_NS {

struct SkeletonSequence {
  std::size_t channels = 3, frames = 0, joints = 0;
  std::size_t label = 0;
  std::vector<float> coords;  // C x T x V

  float& at(std::size_t c, std::size_t t, std::size_t v) { return coords[(c * frames + t) * joints + v]; }
  float at(std::size_t c, std::size_t t, std::size_t v) const { return coords[(c * frames + t) * joints + v]; }

  Tensor to_tensor() const {
    return Tensor::from({channels, frames, joints}, std::vector<real>(coords.begin(), coords.end()));
  }

  static SkeletonSequence from_tensor(const Tensor& t, std::size_t label) {
    if (t.rank() != 3) throw ShapeError("sequence tensor must be C x T x V");
    SkeletonSequence s;
    s.channels = t.dim(0);
    s.frames = t.dim(1);
    s.joints = t.dim(2);
    s.label = label;
    s.coords.assign(t.values().begin(), t.values().end());
    return s;
  }
};

inline constexpr std::uint32_t kSkelVersion = 1;
inline constexpr std::size_t kSkelHeaderBytes = 24;

inline void save_sequence(const std::string& path, const SkeletonSequence& seq) {
  if (seq.coords.size() != seq.channels * seq.frames * seq.joints) throw ShapeError("sequence payload size mismatch");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path + " for writing");
  os.write("SKEL", 4);
  io::detail::put<std::uint32_t>(os, kSkelVersion);
  io::detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(seq.channels));
  io::detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(seq.frames));
  io::detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(seq.joints));
  io::detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(seq.label));
  os.write(reinterpret_cast<const char*>(seq.coords.data()), static_cast<std::streamsize>(seq.coords.size() * sizeof(float)));
  if (!os) throw DataError("write failed for " + path);
}

// `expected_joints` == 0 skips the layout check.
inline SkeletonSequence load_sequence(const std::string& path, std::size_t expected_joints = 0) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path);
  std::vector<char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  auto fail = [&](std::size_t offset, const std::string& what) {
    throw DataError(path + " @" + std::to_string(offset) + ": " + what);
  };
  if (bytes.size() < kSkelHeaderBytes) {
    fail(0, "header truncated, expected " + std::to_string(kSkelHeaderBytes) + " bytes, got " + std::to_string(bytes.size()));
  }
  if (std::memcmp(bytes.data(), "SKEL", 4) != 0) fail(0, "missing SKEL magic");
  auto u32 = [&](std::size_t off) {
    std::uint32_t v;
    std::memcpy(&v, bytes.data() + off, 4);
    return v;
  };
  if (u32(4) != kSkelVersion) fail(4, "unsupported version " + std::to_string(u32(4)));
  SkeletonSequence seq;
  seq.channels = u32(8);
  seq.frames = u32(12);
  seq.joints = u32(16);
  seq.label = u32(20);
  if (seq.channels < 2 || seq.channels > 4) fail(8, "channel count " + std::to_string(seq.channels) + " not in {2,3,4}");
  if (seq.frames < 1) fail(12, "sequence has no frames");
  if (seq.joints < 1) fail(16, "sequence has no joints");
  if (expected_joints && seq.joints != expected_joints) {
    fail(16, "layout mismatch: file has " + std::to_string(seq.joints) + " joints, layout expects " +
                 std::to_string(expected_joints));
  }
  const std::size_t n = seq.channels * seq.frames * seq.joints;
  const std::size_t expected = n * sizeof(float), actual = bytes.size() - kSkelHeaderBytes;
  if (actual != expected) {
    fail(kSkelHeaderBytes, "payload size mismatch, expected " + std::to_string(expected) + " bytes, got " + std::to_string(actual));
  }
  seq.coords.resize(n);
  std::memcpy(seq.coords.data(), bytes.data() + kSkelHeaderBytes, expected);
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(seq.coords[i])) fail(kSkelHeaderBytes + i * sizeof(float), "non-finite coordinate");
  }
  return seq;
}

enum class CropMode { center, random };

// Crops over-long sequences to `target` frames (centered or at a random
// offset) and tiles short ones cyclically.
inline SkeletonSequence align_temporal(const SkeletonSequence& seq, std::size_t target, CropMode mode = CropMode::center,
                                       Rng* rng = nullptr) {
  if (target < 1) throw ContractError("align_temporal: target length must be positive");
  if (seq.frames == 0 || seq.coords.empty()) throw DataError("align_temporal: empty sequence");
  SkeletonSequence out = seq;
  out.frames = target;
  out.coords.assign(seq.channels * target * seq.joints, 0.0f);
  std::size_t start = 0;
  if (seq.frames > target) {
    const std::size_t slack = seq.frames - target;
    if (mode == CropMode::random) {
      if (!rng) throw ContractError("align_temporal: random crop needs a generator");
      start = static_cast<std::size_t>(rng->below(slack + 1));
    } else {
      start = slack / 2;
    }
  }
  for (std::size_t c = 0; c < seq.channels; ++c)
    for (std::size_t t = 0; t < target; ++t) {
      const std::size_t src = seq.frames >= target ? start + t : t % seq.frames;
      for (std::size_t v = 0; v < seq.joints; ++v) out.at(c, t, v) = seq.at(c, src, v);
    }
  return out;
}

// ------------------------------------------------------------------ manifest

struct ManifestEntry {
  std::string path;  // resolved against the manifest's directory
  std::size_t label = 0;
  std::string split;
};

struct DatasetManifest {
  std::string layout;
  std::vector<std::string> class_names;
  std::vector<ManifestEntry> samples;

  std::vector<ManifestEntry> split(const std::string& tag) const {
    std::vector<ManifestEntry> out;
    for (const auto& s : samples)
      if (s.split == tag) out.push_back(s);
    return out;
  }
};

// Lines: "layout <id>", "class <name>", "sample <path> <label> <split>".
inline DatasetManifest load_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open manifest " + path);
  const auto base = std::filesystem::path(path).parent_path();
  DatasetManifest m;
  std::set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::stringstream ss(line);
    std::string key;
    if (!(ss >> key)) continue;
    const std::string where = path + ":" + std::to_string(lineno);
    if (key == "layout") {
      if (!(ss >> m.layout)) throw DataError(where + ": malformed layout line");
    } else if (key == "class") {
      std::string name;
      if (!(ss >> name)) throw DataError(where + ": malformed class line");
      m.class_names.push_back(name);
    } else if (key == "sample") {
      ManifestEntry e;
      std::string rel;
      if (!(ss >> rel >> e.label >> e.split)) throw DataError(where + ": expected 'sample <path> <label> <split>'");
      const auto p = std::filesystem::path(rel);
      e.path = (p.is_absolute() ? p : base / p).lexically_normal().string();
      if (!seen.insert(e.path).second) throw DataError(where + ": sample " + rel + " listed twice");
      m.samples.push_back(std::move(e));
    } else {
      throw DataError(where + ": unknown directive '" + key + "'");
    }
  }
  if (m.layout.empty()) throw DataError(path + ": manifest has no layout line");
  for (const auto& s : m.samples) {
    if (!m.class_names.empty() && s.label >= m.class_names.size()) {
      throw DataError(path + ": label " + std::to_string(s.label) + " out of range for " +
                      std::to_string(m.class_names.size()) + " classes");
    }
  }
  return m;
}

inline void save_manifest(const std::string& path, const DatasetManifest& m) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot open " + path + " for writing");
  const auto base = std::filesystem::path(path).parent_path();
  os << "layout " << m.layout << '\n';
  for (const auto& c : m.class_names) os << "class " << c << '\n';
  for (const auto& s : m.samples) {
    const auto rel = std::filesystem::path(s.path).lexically_relative(base);
    os << "sample " << (rel.empty() ? s.path : rel.string()) << ' ' << s.label << ' ' << s.split << '\n';
  }
}

// Loads every sample of one split. The manifest label wins; a file whose
// header disagrees is rejected.
inline std::vector<SkeletonSequence> load_split(const DatasetManifest& m, const std::string& tag,
                                                std::size_t expected_joints = 0) {
  std::vector<SkeletonSequence> out;
  for (const auto& e : m.split(tag)) {
    SkeletonSequence s = load_sequence(e.path, expected_joints);
    if (s.label != e.label) {
      throw DataError(e.path + ": header label " + std::to_string(s.label) + " disagrees with manifest label " +
                      std::to_string(e.label));
    }
    out.push_back(std::move(s));
  }
  return out;
}

// ------------------------------------------------------------------ synthetic

struct SyntheticSpec {
  std::uint64_t seed = 0;
  std::size_t num_classes = 4;
  std::size_t samples_per_class = 16;
  std::size_t eval_per_class = 0;
  std::size_t frames = 64;
  std::string layout = "ntu25";
  double noise = 0.02;
  double amplitude = 0.25;
};

namespace synth {

// Rest pose grown outward from the center along fixed pseudo-random bone
// directions; depends only on the layout.
inline std::vector<std::array<double, 3>> rest_pose(const Layout& layout) {
  const std::size_t v = layout.num_joints();
  std::vector<std::array<double, 3>> pos(v, {0.0, 0.0, 0.0});
  const auto dist = hop_distances(layout.graph, layout.graph.center_joint);
  std::vector<std::size_t> order(v);
  for (std::size_t i = 0; i < v; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return dist[a] < dist[b]; });
  std::vector<std::size_t> parent(v, v);
  for (auto [s, t] : layout.bones) parent[s] = t;
  Rng dir_rng(0x5eed5eedULL);
  std::vector<std::array<double, 3>> dirs(v);
  for (auto& d : dirs) {
    double n = 0.0;
    for (auto& c : d) {
      c = dir_rng.normal();
      n += c * c;
    }
    n = std::sqrt(n);
    for (auto& c : d) c /= n;
  }
  for (std::size_t j : order) {
    if (parent[j] == v) continue;
    for (int c = 0; c < 3; ++c) pos[j][c] = pos[parent[j]][c] + 0.2 * dirs[j][c];
  }
  return pos;
}

// Joints of the limb groups used by the motion families: the coarsest grain's
// parts other than the one holding the center, split into two halves.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> limb_groups(const Layout& layout) {
  const auto& coarse = layout.grains.back();
  std::vector<std::vector<std::size_t>> limbs;
  for (Eigen::Index p = 0; p < coarse.pooling.rows(); ++p) {
    if (coarse.pooling(p, static_cast<Eigen::Index>(layout.graph.center_joint)) != 0.0 && layout.grains.size() > 1) continue;
    std::vector<std::size_t> joints;
    for (Eigen::Index j = 0; j < coarse.pooling.cols(); ++j)
      if (coarse.pooling(p, j) != 0.0) joints.push_back(static_cast<std::size_t>(j));
    limbs.push_back(std::move(joints));
  }
  std::pair<std::vector<std::size_t>, std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < limbs.size(); ++i) {
    auto& dst = i < (limbs.size() + 1) / 2 ? out.first : out.second;
    dst.insert(dst.end(), limbs[i].begin(), limbs[i].end());
  }
  if (out.second.empty()) out.second = out.first;
  return out;
}

inline std::vector<std::string> class_names(std::size_t n) {
  static const char* base[] = {"limb-wave", "limb-swing", "body-sway", "static"};
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(i < 4 ? base[i] : "part-shake-" + std::to_string(i - 4));
  return out;
}

// One sequence of class `label`. Random draws: phase first, then noise in
// C x T x V order.
inline SkeletonSequence make_sequence(const Layout& layout, std::size_t label, const SyntheticSpec& spec, Rng& rng) {
  const std::size_t v = layout.num_joints(), frames = spec.frames;
  const auto pose = rest_pose(layout);
  const auto [group_a, group_b] = limb_groups(layout);
  const auto dist = hop_distances(layout.graph, layout.graph.center_joint);
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double two_pi = 2.0 * std::numbers::pi;

  SkeletonSequence seq;
  seq.channels = 3;
  seq.frames = frames;
  seq.joints = v;
  seq.label = label;
  seq.coords.assign(3 * frames * v, 0.0f);

  std::vector<std::array<double, 3>> frame(v);
  for (std::size_t t = 0; t < frames; ++t) {
    const double s = std::sin(two_pi * 2.0 * static_cast<double>(t) / static_cast<double>(frames) + phase);
    frame = pose;
    auto displace = [&](const std::vector<std::size_t>& joints, int axis, double gain) {
      for (auto j : joints) frame[j][axis] += gain * spec.amplitude * static_cast<double>(dist[j]) * 0.5 * s;
    };
    switch (label) {
      case 0: displace(group_a, 1, 1.0); break;
      case 1: displace(group_b, 2, 1.0); break;
      case 2: {
        // lean about the center joint around the z axis
        const double angle = 2.5 * spec.amplitude * s;
        const double ca = std::cos(angle), sa = std::sin(angle);
        for (std::size_t j = 0; j < v; ++j) {
          const double x = pose[j][0], y = pose[j][1];
          frame[j][0] = ca * x - sa * y;
          frame[j][1] = sa * x + ca * y;
        }
        break;
      }
      case 3: break;
      default: {
        const std::size_t k = label - 4;
        const auto& g = k % 2 == 0 ? group_a : group_b;
        const double s2 = std::sin(two_pi * 4.0 * static_cast<double>(t) / static_cast<double>(frames) + phase);
        for (auto j : g) frame[j][k % 3] += spec.amplitude * s2;
        break;
      }
    }
    for (std::size_t j = 0; j < v; ++j)
      for (std::size_t c = 0; c < 3; ++c) seq.at(c, t, j) = static_cast<float>(frame[j][c]);
  }
  if (spec.noise > 0.0) {
    for (auto& x : seq.coords) x += static_cast<float>(spec.noise * rng.normal());
  }
  return seq;
}

}  // namespace synth

// In-memory synthetic dataset: train samples first (class-major), then eval.
inline std::vector<std::pair<SkeletonSequence, std::string>> generate_synthetic_sequences(const SyntheticSpec& spec) {
  if (spec.num_classes < 2) throw ConfigError("synthetic dataset needs at least 2 classes");
  if (spec.frames < 1) throw ConfigError("synthetic dataset needs at least 1 frame");
  const Layout layout = load_layout(spec.layout);
  Rng rng(spec.seed);
  std::vector<std::pair<SkeletonSequence, std::string>> out;
  for (const char* split : {"train", "eval"}) {
    const std::size_t per = std::string(split) == "train" ? spec.samples_per_class : spec.eval_per_class;
    for (std::size_t c = 0; c < spec.num_classes; ++c)
      for (std::size_t i = 0; i < per; ++i) out.emplace_back(synth::make_sequence(layout, c, spec, rng), split);
  }
  return out;
}

// Writes SKEL files and manifest.txt under `dir`; returns the manifest.
inline DatasetManifest generate_synthetic(const SyntheticSpec& spec, const std::string& dir) {
  std::filesystem::create_directories(dir);
  DatasetManifest m;
  m.layout = spec.layout;
  m.class_names = synth::class_names(spec.num_classes);
  std::size_t index = 0;
  for (auto& [seq, split] : generate_synthetic_sequences(spec)) {
    char name[64];
    std::snprintf(name, sizeof(name), "%s_%05zu.skel", split.c_str(), index++);
    const std::string path = (std::filesystem::path(dir) / name).string();
    save_sequence(path, seq);
    m.samples.push_back({path, seq.label, split});
  }
  save_manifest((std::filesystem::path(dir) / "manifest.txt").string(), m);
  return m;
}

}  // namespace stf::inline STF_PRECISION_NS
