#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "stf/config.hpp"
#include "stf/tensor.hpp"
#include "stf/topology.hpp"

namespace stf::inline STF_PRECISION_NS {

// Input modalities; each trains its own network.
enum class Stream { joint, bone, joint_motion, bone_motion };

inline const char* to_string(Stream s) {
  switch (s) {
    case Stream::joint: return "joint";
    case Stream::bone: return "bone";
    case Stream::joint_motion: return "joint-motion";
    case Stream::bone_motion: return "bone-motion";
  }
  return "?";
}

inline Stream parse_stream(const std::string& s) {
  if (s == "joint") return Stream::joint;
  if (s == "bone") return Stream::bone;
  if (s == "joint-motion") return Stream::joint_motion;
  if (s == "bone-motion") return Stream::bone_motion;
  throw ConfigError("unknown stream '" + s + "' (expected joint, bone, joint-motion, bone-motion)");
}

inline std::vector<Stream> parse_streams(const std::string& list) {
  std::vector<Stream> out;
  for (const auto& item : parse::split(list)) out.push_back(parse_stream(item));
  if (out.empty()) throw ConfigError("empty stream list");
  return out;
}

// bone[c, t, i] = x[c, t, i] - x[c, t, target(i)]; the root stays zero.
// x is C x T x V.
inline Tensor compute_bones(const Tensor& x, const BonePairs& pairs) {
  if (x.rank() != 3) throw ShapeError("compute_bones: expected C x T x V, got " + shape_str(x.shape()));
  const std::size_t planes = x.dim(0) * x.dim(1), joints = x.dim(2);
  for (auto [s, t] : pairs) {
    if (s >= joints || t >= joints) {
      throw DataError("bone (" + std::to_string(s) + "," + std::to_string(t) + ") out of range for " +
                      std::to_string(joints) + " joints");
    }
  }
  std::vector<real> out(x.numel(), real(0));
  const auto& xv = x.values();
  for (std::size_t p = 0; p < planes; ++p) {
    const std::size_t off = p * joints;
    for (auto [s, t] : pairs) out[off + s] = xv[off + s] - xv[off + t];
  }
  return Tensor::from(x.shape(), std::move(out));
}

// m[c, t, v] = x[c, t+1, v] - x[c, t, v]; the final frame is zero.
inline Tensor compute_motion(const Tensor& x) {
  if (x.rank() != 3) throw ShapeError("compute_motion: expected C x T x V, got " + shape_str(x.shape()));
  const std::size_t ch = x.dim(0), frames = x.dim(1), joints = x.dim(2);
  std::vector<real> out(x.numel(), real(0));
  const auto& xv = x.values();
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t t = 0; t + 1 < frames; ++t)
      for (std::size_t v = 0; v < joints; ++v) {
        const std::size_t i = (c * frames + t) * joints + v;
        out[i] = xv[i + joints] - xv[i];
      }
  return Tensor::from(x.shape(), std::move(out));
}

inline Tensor apply_stream(const Tensor& x, Stream s, const BonePairs& pairs) {
  switch (s) {
    case Stream::joint: return x;
    case Stream::bone: return compute_bones(x, pairs);
    case Stream::joint_motion: return compute_motion(x);
    case Stream::bone_motion: return compute_motion(compute_bones(x, pairs));
  }
  return x;
}

// Row-major N x K score matrix.
struct ScoreMatrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> values;

  double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }

  std::size_t argmax(std::size_t r) const {
    const auto* row = values.data() + r * cols;
    return static_cast<std::size_t>(std::max_element(row, row + cols) - row);
  }
};

// Weighted elementwise sum of per-stream scores.
inline ScoreMatrix fuse_scores(const std::vector<ScoreMatrix>& scores, const std::vector<double>& weights) {
  if (scores.empty()) throw ContractError("fuse_scores: no streams");
  if (weights.size() != scores.size()) {
    throw ContractError("fuse_scores: " + std::to_string(weights.size()) + " weights for " +
                        std::to_string(scores.size()) + " streams");
  }
  ScoreMatrix out{scores.front().rows, scores.front().cols, {}};
  out.values.assign(out.rows * out.cols, 0.0);
  for (std::size_t s = 0; s < scores.size(); ++s) {
    if (scores[s].rows != out.rows || scores[s].cols != out.cols) {
      throw ContractError("fuse_scores: stream " + std::to_string(s) + " has a different score shape");
    }
    for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] += weights[s] * scores[s].values[i];
  }
  return out;
}

}  // namespace stf::inline STF_PRECISION_NS
