#pragma once

// Gradient-check suites at layer, block and model scope.

#include <chrono>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "stf/grad_check.hpp"
#include "stf/network.hpp"

namespace stf::inline STF_PRECISION_NS {

enum class CheckScope { layer, block, model };

inline CheckScope parse_scope(const std::string& s) {
  if (s == "layer") return CheckScope::layer;
  if (s == "block") return CheckScope::block;
  if (s == "model") return CheckScope::model;
  throw ConfigError("unknown gradcheck scope '" + s + "' (expected layer, block or model)");
}

struct GradCheckEntry {
  std::string name;
  GradCheckResult result;
  bool passed = false;
};

struct GradCheckReport {
  double tolerance = 1e-4;
  double seconds = 0.0;
  std::vector<GradCheckEntry> entries;

  bool passed() const {
    for (const auto& e : entries)
      if (!e.passed) return false;
    return !entries.empty();
  }
  double max_rel_error() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.result.max_rel_error);
    return m;
  }
};

inline Tensor random_tensor(const Shape& shape, Rng& rng, real scale = 1, bool requires_grad = true) {
  std::vector<real> v(shape_numel(shape));
  for (auto& x : v) x = scale * static_cast<real>(rng.normal());
  Tensor t = Tensor::from(shape, std::move(v));
  t.set_requires_grad(requires_grad);
  return t;
}

// The micro model: channels /8, the 5-joint layout, every grain, 4 classes.
inline ModelConfig micro_model_config(std::uint64_t seed = 0) {
  ModelConfig c;
  c.layout = "micro5";
  c.channels = {8, 8, 8, 16, 16, 16, 32, 32, 32};
  c.num_classes = 4;
  c.seed = seed;
  return c;
}

namespace detail {

// sum(y * r) / numel(y) for a fixed random r, so every output coordinate
// feeds the loss with a distinct weight at a roundoff-friendly scale.
inline std::function<Tensor()> probe(std::function<Tensor()> f, Rng& rng) {
  Tensor y0;
  {
    NoGradGuard g;
    y0 = f();
  }
  Tensor r = random_tensor(y0.shape(), rng, real(1) / static_cast<real>(y0.numel()), false);
  return [f = std::move(f), r] { return ops::sum(ops::mul(f(), r)); };
}

using ProbeFactory = std::function<std::pair<std::function<Tensor()>, std::vector<Tensor>>(Rng&)>;

inline void run_probe(GradCheckReport& report, const std::string& name, const ProbeFactory& make, Rng& rng,
                      double eps, std::size_t max_coords = 0) {
  auto [f, wrt] = make(rng);
  GradCheckEntry e;
  e.name = name;
  e.result = grad_check(probe(f, rng), wrt, eps, max_coords);
  e.passed = e.result.max_rel_error < report.tolerance;
  report.entries.push_back(std::move(e));
}

inline void layer_probes(GradCheckReport& report, Rng& rng, double eps) {
  using P = std::pair<std::function<Tensor()>, std::vector<Tensor>>;
  auto r = [&](Shape s) { return random_tensor(s, rng); };
  run_probe(report, "add", [&](Rng&) {
    Tensor a = r({2, 3, 4}), b = r({2, 3, 4});
    return P{[=] { return ops::add(a, b); }, {a, b}};
  }, rng, eps);
  run_probe(report, "sub", [&](Rng&) {
    Tensor a = r({3, 5}), b = r({3, 5});
    return P{[=] { return ops::sub(a, b); }, {a, b}};
  }, rng, eps);
  run_probe(report, "mul", [&](Rng&) {
    Tensor a = r({2, 3, 4}), b = r({2, 3, 4});
    return P{[=] { return ops::mul(a, b); }, {a, b}};
  }, rng, eps);
  run_probe(report, "scale", [&](Rng&) {
    Tensor a = r({4, 3});
    return P{[=] { return ops::scale(a, real(-1.7)); }, {a}};
  }, rng, eps);
  run_probe(report, "weighted", [&](Rng&) {
    Tensor a = r({2, 3, 4}), w = r({3});
    return P{[=] { return ops::weighted(a, w, 1); }, {a, w}};
  }, rng, eps);
  run_probe(report, "relu", [&](Rng&) {
    Tensor a = r({3, 7});
    return P{[=] { return ops::relu(a); }, {a}};
  }, rng, eps);
  run_probe(report, "sigmoid", [&](Rng&) {
    Tensor a = random_tensor({3, 7}, rng, 3);
    return P{[=] { return ops::sigmoid(a); }, {a}};
  }, rng, eps);
  run_probe(report, "reshape+permute", [&](Rng&) {
    Tensor a = r({2, 3, 4, 5});
    return P{[=] { return ops::permute(ops::reshape(a, {2, 12, 5}), {2, 0, 1}); }, {a}};
  }, rng, eps);
  run_probe(report, "expand_trailing", [&](Rng&) {
    Tensor a = r({2, 3, 4});
    return P{[=] { return ops::expand_trailing(a, {2, 3, 4, 5}); }, {a}};
  }, rng, eps);
  run_probe(report, "mean", [&](Rng&) {
    Tensor a = r({2, 3, 4, 5});
    return P{[=] { return ops::mean(a, 3); }, {a}};
  }, rng, eps);
  run_probe(report, "matmul", [&](Rng&) {
    Tensor a = r({3, 4}), b = r({4, 5});
    return P{[=] { return ops::matmul(a, b); }, {a, b}};
  }, rng, eps);
  run_probe(report, "bmm", [&](Rng&) {
    Tensor a = r({2, 3, 3, 4}), b = r({2, 3, 4, 2});
    return P{[=] { return ops::bmm(a, b); }, {a, b}};
  }, rng, eps);
  run_probe(report, "conv1x1", [&](Rng&) {
    Tensor x = r({2, 3, 4, 5}), w = r({4, 3}), b = r({4});
    return P{[=] { return ops::conv1x1(x, w, b); }, {x, w, b}};
  }, rng, eps);
  run_probe(report, "linear", [&](Rng&) {
    Tensor x = r({3, 5}), w = r({4, 5}), b = r({4});
    return P{[=] { return ops::linear(x, w, b); }, {x, w, b}};
  }, rng, eps);
  struct ConvCase {
    std::size_t cin, cout, frames, joints, kernel, stride, groups;
  };
  for (const ConvCase c : {ConvCase{3, 4, 7, 3, 3, 1, 1}, ConvCase{4, 6, 9, 2, 5, 2, 2}, ConvCase{4, 4, 6, 0, 3, 1, 4},
                           ConvCase{2, 3, 5, 2, 1, 2, 1}}) {
    const std::string name = "temporal_conv[k" + std::to_string(c.kernel) + ",s" + std::to_string(c.stride) + ",g" +
                             std::to_string(c.groups) + "]";
    run_probe(report, name, [&](Rng&) {
      Shape xs = c.joints ? Shape{2, c.cin, c.frames, c.joints} : Shape{2, c.cin, c.frames};
      Tensor x = r(xs), w = r({c.cout, c.cin / c.groups, c.kernel}), b = r({c.cout});
      const ops::TemporalConvSpec spec{c.stride, c.groups};
      return P{[=] { return ops::temporal_conv(x, w, b, spec); }, {x, w, b}};
    }, rng, eps);
  }
  run_probe(report, "graph_aggregate", [&](Rng&) {
    Tensor z = r({2, 3, 2, 4, 5}), a = r({3, 5, 5});
    return P{[=] { return ops::graph_aggregate(z, a); }, {z, a}};
  }, rng, eps);
  run_probe(report, "graph_aggregate[pool]", [&](Rng&) {
    Tensor z = r({2, 1, 3, 2, 5}), a = r({1, 2, 5});
    return P{[=] { return ops::graph_aggregate(z, a); }, {z, a}};
  }, rng, eps);
  run_probe(report, "softmax", [&](Rng&) {
    Tensor a = random_tensor({2, 4, 5}, rng, 2);
    return P{[=] { return ops::softmax(a, 2); }, {a}};
  }, rng, eps);
  run_probe(report, "softmax[axis1]", [&](Rng&) {
    Tensor a = random_tensor({2, 4, 3}, rng, 2);
    return P{[=] { return ops::softmax(a, 1); }, {a}};
  }, rng, eps);
  run_probe(report, "batch_norm[train]", [&](Rng&) {
    Tensor x = r({3, 4, 5, 2}), g = r({4}), b = r({4});
    auto state = std::make_shared<ops::BatchNormState>(ops::BatchNormState{std::vector<real>(4, 0), std::vector<real>(4, 1)});
    return P{[=] { return ops::batch_norm(x, g, b, *state, true); }, {x, g, b}};
  }, rng, eps);
  run_probe(report, "batch_norm[eval]", [&](Rng&) {
    Tensor x = r({3, 4, 5}), g = r({4}), b = r({4});
    auto state = std::make_shared<ops::BatchNormState>(ops::BatchNormState{std::vector<real>(4, 0), std::vector<real>(4, 1)});
    for (std::size_t i = 0; i < 4; ++i) {
      state->running_mean[i] = rng.normal();
      state->running_var[i] = 0.5 + rng.uniform();
    }
    return P{[=] { return ops::batch_norm(x, g, b, *state, false); }, {x, g, b}};
  }, rng, eps);
  run_probe(report, "temporal_difference", [&](Rng&) {
    Tensor a = r({2, 3, 5, 2});
    return P{[=] { return ops::temporal_difference(a); }, {a}};
  }, rng, eps);
  run_probe(report, "cross_entropy", [&](Rng&) {
    Tensor a = random_tensor({4, 5}, rng, 2);
    return P{[=] { return ops::cross_entropy(a, {0, 3, 4, 1}); }, {a}};
  }, rng, eps);

  const Layout layout = load_layout("micro5");
  const PartitionedAdjacency adj = partition_adjacency(layout.graph);
  run_probe(report, "scn", [&](Rng& g) {
    auto scn = std::make_shared<Scn>(3, 4, adj, g);
    Tensor x = r({2, 3, 4, 5});
    std::vector<Tensor> wrt{x};
    ParamList ps;
    scn->collect(ps, "scn");
    for (auto& p : ps) wrt.push_back(p.tensor);
    return P{[=] { return scn->forward(x, true); }, wrt};
  }, rng, eps);
  run_probe(report, "mcf", [&](Rng& g) {
    auto mcf = std::make_shared<Mcf>(8, layout.grains, g);
    ParamList ps;
    mcf->collect(ps, "mcf");
    for (auto& p : ps)
      if (p.name == "mcf.fusion")
        for (auto& v : p.tensor.data()) v = static_cast<real>(g.uniform(0.5, 1.5));
    Tensor x = r({2, 8, 3, 5});
    std::vector<Tensor> wrt{x};
    for (auto& p : ps) wrt.push_back(p.tensor);
    return P{[=] { return mcf->forward(x); }, wrt};
  }, rng, eps);
  for (auto variant : {TdfVariant::plain, TdfVariant::motion}) {
    run_probe(report, variant == TdfVariant::plain ? "tdf[plain]" : "tdf[motion]", [&](Rng& g) {
      TdfOptions o;
      o.variant = variant;
      auto tdf = std::make_shared<Tdf>(8, g, o);
      Tensor x = r({3, 8, 6, 5});
      std::vector<Tensor> wrt{x};
      ParamList ps;
      tdf->collect(ps, "tdf");
      for (auto& p : ps) wrt.push_back(p.tensor);
      return P{[=] { return tdf->forward(x, true); }, wrt};
    }, rng, eps);
  }
  run_probe(report, "tcn[s2]", [&](Rng& g) {
    auto tcn = std::make_shared<Tcn>(4, 5, 2, g, 2);
    Tensor x = r({2, 4, 7, 3});
    std::vector<Tensor> wrt{x};
    ParamList ps;
    tcn->collect(ps, "tcn");
    for (auto& p : ps) wrt.push_back(p.tensor);
    return P{[=] { return tcn->forward(x, true); }, wrt};
  }, rng, eps);
  run_probe(report, "head", [&](Rng& g) {
    auto head = std::make_shared<ClassifierHead>(4, 3, g);
    Tensor x = r({2, 4, 3, 5});
    std::vector<Tensor> wrt{x};
    ParamList ps;
    head->collect(ps, "head");
    for (auto& p : ps) wrt.push_back(p.tensor);
    return P{[=] { return head->forward(x); }, wrt};
  }, rng, eps);
}

inline void block_probes(GradCheckReport& report, Rng& rng, double eps) {
  using P = std::pair<std::function<Tensor()>, std::vector<Tensor>>;
  const Layout layout = load_layout("micro5");
  const PartitionedAdjacency adj = partition_adjacency(layout.graph);
  struct Case {
    const char* name;
    std::size_t cin, cout, stride;
    bool mcf, tdf;
  };
  for (const Case c : {Case{"block[identity,mcf,tdf]", 8, 8, 1, true, true}, Case{"block[projection,s2,mcf]", 4, 8, 2, true, false},
                       Case{"block[projection,tdf]", 4, 8, 1, false, true}}) {
    run_probe(report, c.name, [&](Rng& g) {
      BlockOptions o;
      o.cin = c.cin;
      o.cout = c.cout;
      o.stride = c.stride;
      o.use_mcf = c.mcf;
      o.use_tdf = c.tdf;
      o.tcn_kernel = 3;
      o.tcn_groups = 2;
      auto block = std::make_shared<StfBlock>(o, adj, layout.grains, g);
      ParamList ps;
      block->collect(ps, "b");
      for (auto& p : ps)
        if (p.name == "b.mcf.fusion")
          for (auto& v : p.tensor.data()) v = static_cast<real>(g.uniform(0.5, 1.5));
      Tensor x = random_tensor({2, c.cin, 6, 5}, g);
      std::vector<Tensor> wrt{x};
      for (auto& p : ps) wrt.push_back(p.tensor);
      return P{[=] { return block->forward(x, true); }, wrt};
    }, rng, eps);
  }
}

inline void model_probe(GradCheckReport& report, Rng& rng, double eps, std::size_t max_coords) {
  ModelConfig cfg = micro_model_config(rng.next_u64());
  auto model = std::make_shared<Model>(cfg);
  model->set_training(true);
  auto params = model->parameters();
  for (auto& p : params)
    if (p.name.ends_with(".mcf.fusion"))
      for (auto& v : p.tensor.data()) v = static_cast<real>(rng.uniform(0.5, 1.5));
  Tensor x = random_tensor({2, 3, 8, 5}, rng, 1, false);
  const std::vector<std::size_t> labels{1, 3};
  std::vector<Tensor> wrt;
  for (auto& p : params) wrt.push_back(p.tensor);
  GradCheckEntry e;
  e.name = "model[micro]";
  e.result = grad_check([=] { return cross_entropy_loss(model->forward(x), labels); }, wrt, eps, max_coords);
  e.passed = e.result.max_rel_error < report.tolerance;
  if (!e.passed) e.name += " worst=" + params[e.result.worst_tensor].name;
  report.entries.push_back(std::move(e));
}

}  // namespace detail

// Runs every check of `scope`; `max_coords` > 0 subsamples the model scope.
inline GradCheckReport run_gradcheck(CheckScope scope, std::uint64_t seed = 0, double tolerance = 1e-4,
                                     std::size_t max_coords = 0) {
  GradCheckReport report;
  report.tolerance = tolerance;
  Rng rng(seed);
  const double eps = 1e-5;
  const auto start = std::chrono::steady_clock::now();
  switch (scope) {
    case CheckScope::layer: detail::layer_probes(report, rng, eps); break;
    case CheckScope::block: detail::block_probes(report, rng, eps); break;
    case CheckScope::model: detail::model_probe(report, rng, eps, max_coords); break;
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace stf::inline STF_PRECISION_NS
