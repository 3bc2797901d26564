#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "stf/ops.hpp"
#include "stf/rng.hpp"
#include "stf/topology.hpp"

namespace stf::inline STF_PRECISION_NS {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};
using ParamList = std::vector<NamedTensor>;

struct NamedBuffer {
  std::string name;
  std::vector<real>* data;
};
using BufferList = std::vector<NamedBuffer>;

namespace init {

// U(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual default for conv/affine.
inline Tensor fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<real> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<real>(rng.uniform(-bound, bound));
  return Tensor::from(std::move(shape), std::move(v), true);
}

inline Tensor constant(Shape shape, real value) { return Tensor::full(std::move(shape), value, true); }

inline Tensor from_matrices(const std::vector<JointMatrix>& mats, bool trainable) {
  const std::size_t k = mats.size();
  const auto rows = static_cast<std::size_t>(mats.front().rows()), cols = static_cast<std::size_t>(mats.front().cols());
  std::vector<real> v;
  v.reserve(k * rows * cols);
  for (const auto& m : mats)
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j)
        v.push_back(static_cast<real>(m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))));
  return Tensor::from({k, rows, cols}, std::move(v), trainable);
}

}  // namespace init

class BatchNorm {
 public:
  BatchNorm() = default;
  explicit BatchNorm(std::size_t channels)
      : gamma_(init::constant({channels}, real(1))), beta_(init::constant({channels}, real(0))) {
    state_.running_mean.assign(channels, real(0));
    state_.running_var.assign(channels, real(1));
  }

  Tensor forward(const Tensor& x, bool training) { return ops::batch_norm(x, gamma_, beta_, state_, training); }

  void collect(ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + ".gamma", gamma_});
    out.push_back({prefix + ".beta", beta_});
  }
  void collect_buffers(BufferList& out, const std::string& prefix) {
    out.push_back({prefix + ".running_mean", &state_.running_mean});
    out.push_back({prefix + ".running_var", &state_.running_var});
  }

  Tensor& gamma() { return gamma_; }
  Tensor& beta() { return beta_; }
  ops::BatchNormState& state() { return state_; }

 private:
  Tensor gamma_, beta_;
  ops::BatchNormState state_;
};

class Conv1x1 {
 public:
  Conv1x1() = default;
  Conv1x1(std::size_t cin, std::size_t cout, Rng& rng, bool bias = true)
      : weight_(init::fan_in_uniform({cout, cin}, cin, rng)) {
    if (bias) bias_ = init::fan_in_uniform({cout}, cin, rng);
  }

  Tensor forward(const Tensor& x) const { return ops::conv1x1(x, weight_, bias_); }

  void collect(ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight_});
    if (bias_.defined()) out.push_back({prefix + ".bias", bias_});
  }

  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }

 private:
  Tensor weight_, bias_;
};

class TemporalConv {
 public:
  TemporalConv() = default;
  TemporalConv(std::size_t cin, std::size_t cout, std::size_t kernel, Rng& rng, std::size_t stride = 1,
               std::size_t groups = 1, bool bias = true)
      : spec_{stride, groups} {
    if (kernel % 2 == 0) throw ConfigError("temporal kernel must be odd, got " + std::to_string(kernel));
    if (groups == 0 || cin % groups != 0 || cout % groups != 0) {
      throw ConfigError("group count " + std::to_string(groups) + " must divide " + std::to_string(cin) + " and " +
                        std::to_string(cout));
    }
    const std::size_t fan_in = cin / groups * kernel;
    weight_ = init::fan_in_uniform({cout, cin / groups, kernel}, fan_in, rng);
    if (bias) bias_ = init::fan_in_uniform({cout}, fan_in, rng);
  }

  Tensor forward(const Tensor& x) const { return ops::temporal_conv(x, weight_, bias_, spec_); }

  void collect(ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight_});
    if (bias_.defined()) out.push_back({prefix + ".bias", bias_});
  }

  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }
  std::size_t kernel() const { return weight_.dim(2); }
  std::size_t stride() const { return spec_.stride; }

 private:
  Tensor weight_, bias_;
  ops::TemporalConvSpec spec_;
};

// --------------------------------------------------------------------- SCN

struct ScnOptions {
  bool learnable_mask = true;
  bool batch_norm = true;
};

// relu(BN(sum_i (G_i + M_i) x W_i)) with the joint axis contracted by each
// (normalized subset + mask) pair.
class Scn {
 public:
  Scn() = default;
  Scn(std::size_t cin, std::size_t cout, const PartitionedAdjacency& adjacency, Rng& rng, ScnOptions opts = {})
      : cout_(cout),
        opts_(opts),
        adjacency_(init::from_matrices(adjacency.subsets, false)),
        conv_(cin, adjacency.size() * cout, rng) {
    if (opts.learnable_mask) mask_ = init::from_matrices(adjacency.masks, true);
    if (opts.batch_norm) bn_ = BatchNorm(cout);
  }

  Tensor operators() const { return mask_.defined() ? ops::add(adjacency_, mask_) : adjacency_; }

  Tensor forward(const Tensor& x, bool training) {
    if (x.rank() != 4 || x.dim(3) != adjacency_.dim(2)) {
      throw ShapeError("scn: input " + shape_str(x.shape()) + " vs " + std::to_string(adjacency_.dim(2)) + " joints");
    }
    const std::size_t k = adjacency_.dim(0);
    Tensor z = conv_.forward(x);
    z = ops::reshape(z, {x.dim(0), k, cout_, x.dim(2), x.dim(3)});
    Tensor y = ops::graph_aggregate(z, operators());
    if (opts_.batch_norm) y = bn_.forward(y, training);
    return ops::relu(y);
  }

  void collect(ParamList& out, const std::string& prefix) const {
    conv_.collect(out, prefix + ".conv");
    if (mask_.defined()) out.push_back({prefix + ".mask", mask_});
    if (opts_.batch_norm) bn_.collect(out, prefix + ".bn");
  }
  void collect_buffers(BufferList& out, const std::string& prefix) {
    if (opts_.batch_norm) bn_.collect_buffers(out, prefix + ".bn");
  }

  Conv1x1& conv() { return conv_; }
  Tensor& adjacency() { return adjacency_; }
  Tensor& mask() { return mask_; }

 private:
  std::size_t cout_ = 0;
  ScnOptions opts_;
  Tensor adjacency_;  // K x V x V, constant
  Tensor mask_;       // K x V x V, trainable
  Conv1x1 conv_;      // Cin -> K*Cout
  BatchNorm bn_;
};

// --------------------------------------------------------------------- MCF

struct McfOptions {
  std::size_t alpha = 4;  // channel reduction
};

// Joint-resolution queries attend over part-pooled keys/values at every
// grain; the per-grain contexts are mixed by trainable scalars and projected
// back onto the residual stream.
class Mcf {
 public:
  Mcf() = default;
  Mcf(std::size_t channels, const std::vector<GrainMapping>& grains, Rng& rng, McfOptions opts = {}) {
    if (opts.alpha == 0 || channels % opts.alpha != 0) {
      throw ConfigError("mcf: alpha " + std::to_string(opts.alpha) + " must divide " + std::to_string(channels) + " channels");
    }
    if (grains.empty()) throw ConfigError("mcf: at least one grain required");
    const std::size_t reduced = channels / opts.alpha;
    reduce_ = Conv1x1(channels, reduced, rng);
    query_ = Conv1x1(reduced, reduced, rng);
    key_ = Conv1x1(reduced, reduced, rng);
    value_ = Conv1x1(reduced, reduced, rng);
    for (const auto& g : grains) {
      identity_.push_back(g.grain_id == 0);
      pools_.push_back(init::from_matrices({g.pooling}, false));
    }
    fusion_ = init::constant({grains.size()}, real(1) / static_cast<real>(grains.size()));
    recover_ = Conv1x1(reduced, channels, rng, /*bias=*/false);
  }

  // Appends one N x V x V_i attention tensor per grain when `attention` is set.
  Tensor forward(const Tensor& x, std::vector<Tensor>* attention = nullptr) const {
    if (x.rank() != 4 || x.dim(3) != pools_.front().dim(2)) {
      throw ShapeError("mcf: input " + shape_str(x.shape()) + " vs grain mapping over " +
                       std::to_string(pools_.front().dim(2)) + " joints");
    }
    const std::size_t n = x.dim(0), t = x.dim(2), v = x.dim(3);
    const Tensor reduced = reduce_.forward(x);
    const std::size_t c = reduced.dim(1);
    const Tensor q = ops::reshape(ops::permute(query_.forward(reduced), {0, 3, 1, 2}), {n, v, c * t});
    const Tensor k = key_.forward(reduced);
    const Tensor val = value_.forward(reduced);
    Tensor fused;
    for (std::size_t i = 0; i < pools_.size(); ++i) {
      const std::size_t parts = pools_[i].dim(1);
      const Tensor kp = ops::reshape(pool(k, i), {n, c * t, parts});
      const Tensor vp = ops::reshape(ops::permute(pool(val, i), {0, 3, 1, 2}), {n, parts, c * t});
      const Tensor att = ops::softmax(ops::bmm(q, kp), 2);
      if (attention) attention->push_back(att);
      const Tensor ctx = ops::permute(ops::reshape(ops::bmm(att, vp), {n, v, c, t}), {0, 2, 3, 1});
      const Tensor term = ops::weighted(ctx, fusion_, i);
      fused = fused.defined() ? ops::add(fused, term) : term;
    }
    return ops::add(x, recover_.forward(fused));
  }

  void collect(ParamList& out, const std::string& prefix) const {
    reduce_.collect(out, prefix + ".reduce");
    query_.collect(out, prefix + ".query");
    key_.collect(out, prefix + ".key");
    value_.collect(out, prefix + ".value");
    out.push_back({prefix + ".fusion", fusion_});
    recover_.collect(out, prefix + ".recover");
  }

  std::size_t grain_count() const { return pools_.size(); }
  Conv1x1& reduce() { return reduce_; }
  Conv1x1& query() { return query_; }
  Conv1x1& key() { return key_; }
  Conv1x1& value() { return value_; }
  Conv1x1& recover() { return recover_; }
  Tensor& fusion() { return fusion_; }

 private:
  Tensor pool(const Tensor& x, std::size_t grain) const {
    if (identity_[grain]) return x;
    const auto& p = pools_[grain];
    return ops::graph_aggregate(ops::reshape(x, {x.dim(0), 1, x.dim(1), x.dim(2), x.dim(3)}), p);
  }

  Conv1x1 reduce_, query_, key_, value_, recover_;
  std::vector<Tensor> pools_;  // 1 x V_i x V each, constant
  std::vector<bool> identity_;
  Tensor fusion_;
};

// --------------------------------------------------------------------- TDF

enum class TdfVariant { plain, motion };

struct TdfOptions {
  TdfVariant variant = TdfVariant::plain;
  std::size_t kernel = 0;     // 0: 5 for plain, 3 for motion
  std::size_t reduction = 4;  // channel reduction of the squeeze conv
  std::size_t groups = 0;     // 0: channels / reduction
};

inline std::size_t default_tdf_kernel(TdfVariant v) { return v == TdfVariant::motion ? 3 : 5; }

// Spatially pooled features (optionally differenced over time) pass through
// a grouped squeeze/excite pair of temporal convs; the sigmoid gate scales
// the input as y * (1 + g).
class Tdf {
 public:
  Tdf() = default;
  Tdf(std::size_t channels, Rng& rng, TdfOptions opts = {}) : variant_(opts.variant) {
    const std::size_t kernel = opts.kernel ? opts.kernel : default_tdf_kernel(opts.variant);
    if (opts.reduction == 0 || channels % opts.reduction != 0) {
      throw ConfigError("tdf: reduction " + std::to_string(opts.reduction) + " must divide " + std::to_string(channels));
    }
    const std::size_t reduced = channels / opts.reduction;
    const std::size_t groups = opts.groups ? opts.groups : reduced;
    if (channels % groups != 0 || reduced % groups != 0) {
      throw ConfigError("tdf: group count " + std::to_string(groups) + " must divide " + std::to_string(channels) +
                        " and " + std::to_string(reduced));
    }
    squeeze_ = TemporalConv(channels, reduced, kernel, rng, 1, groups);
    bn_ = BatchNorm(reduced);
    excite_ = TemporalConv(reduced, channels, kernel, rng, 1, groups);
  }

  // `gate`, when set, receives the N x C x T sigmoid gate.
  Tensor forward(const Tensor& y, bool training, Tensor* gate = nullptr) {
    if (y.rank() != 4) throw ShapeError("tdf: expected N x C x T x V, got " + shape_str(y.shape()));
    Tensor pooled = ops::mean(y, 3);
    if (variant_ == TdfVariant::motion) pooled = ops::temporal_difference(pooled);
    Tensor s = ops::relu(bn_.forward(squeeze_.forward(pooled), training));
    Tensor g = ops::sigmoid(excite_.forward(s));
    if (gate) *gate = g;
    return ops::add(y, ops::mul(y, ops::expand_trailing(g, y.shape())));
  }

  void collect(ParamList& out, const std::string& prefix) const {
    squeeze_.collect(out, prefix + ".squeeze");
    bn_.collect(out, prefix + ".bn");
    excite_.collect(out, prefix + ".excite");
  }
  void collect_buffers(BufferList& out, const std::string& prefix) { bn_.collect_buffers(out, prefix + ".bn"); }

  TemporalConv& squeeze() { return squeeze_; }
  TemporalConv& excite() { return excite_; }
  BatchNorm& bn() { return bn_; }
  TdfVariant variant() const { return variant_; }

 private:
  TdfVariant variant_ = TdfVariant::plain;
  TemporalConv squeeze_, excite_;
  BatchNorm bn_;
};

// --------------------------------------------------------------------- TCN

// Channel-count-preserving temporal conv followed by batch norm.
class Tcn {
 public:
  Tcn() = default;
  Tcn(std::size_t channels, std::size_t kernel, std::size_t stride, Rng& rng, std::size_t groups = 1)
      : conv_(channels, channels, kernel, rng, stride, groups), bn_(channels) {}

  Tensor forward(const Tensor& x, bool training) { return bn_.forward(conv_.forward(x), training); }

  void collect(ParamList& out, const std::string& prefix) const {
    conv_.collect(out, prefix + ".conv");
    bn_.collect(out, prefix + ".bn");
  }
  void collect_buffers(BufferList& out, const std::string& prefix) { bn_.collect_buffers(out, prefix + ".bn"); }

  TemporalConv& conv() { return conv_; }
  BatchNorm& bn() { return bn_; }

 private:
  TemporalConv conv_;
  BatchNorm bn_;
};

// ---------------------------------------------------------------- head

// Global average over (T, V), then an affine map to raw class logits.
class ClassifierHead {
 public:
  ClassifierHead() = default;
  ClassifierHead(std::size_t channels, std::size_t num_classes, Rng& rng)
      : weight_(init::fan_in_uniform({num_classes, channels}, channels, rng)),
        bias_(init::fan_in_uniform({num_classes}, channels, rng)) {}

  Tensor forward(const Tensor& x) const {
    if (x.rank() != 4) throw ShapeError("classifier head: expected N x C x T x V, got " + shape_str(x.shape()));
    const Tensor pooled = ops::mean(ops::reshape(x, {x.dim(0), x.dim(1), x.dim(2) * x.dim(3)}), 2);
    return ops::linear(pooled, weight_, bias_);
  }

  void collect(ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight_});
    out.push_back({prefix + ".bias", bias_});
  }

  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }

 private:
  Tensor weight_, bias_;
};

}  // namespace stf::inline STF_PRECISION_NS
