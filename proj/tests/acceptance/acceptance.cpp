// Acceptance run: one PASS/FAIL line per criterion, nonzero exit when a gated
// criterion fails.
//
//   stf_acceptance --work build/acceptance [--only overfit,fusion]

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "../oracles.hpp"
#include "stf/stf.hpp"

using namespace stf;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  std::string id;
  std::string title;
  bool gated = true;
  std::function<Outcome()> run;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

Tensor permute_joints(const Tensor& x, const std::vector<std::size_t>& perm) {
  const std::size_t v = x.dim(x.rank() - 1), outer = x.numel() / v;
  std::vector<real> out(x.numel());
  for (std::size_t r = 0; r < outer; ++r)
    for (std::size_t j = 0; j < v; ++j) out[r * v + perm[j]] = x.values()[r * v + j];
  return Tensor::from(x.shape(), std::move(out));
}

void zero(Tensor& t) { std::fill(t.values().begin(), t.values().end(), real(0)); }

std::pair<std::vector<SkeletonSequence>, std::vector<SkeletonSequence>> synthetic_splits(SyntheticSpec spec) {
  std::vector<SkeletonSequence> train_set, eval_set;
  for (auto& [seq, split] : generate_synthetic_sequences(spec)) (split == "train" ? train_set : eval_set).push_back(std::move(seq));
  return {std::move(train_set), std::move(eval_set)};
}

ModelConfig small_config(std::uint64_t seed) {
  ModelConfig c;
  c.channels = {16, 16, 16, 32, 32, 32, 64, 64, 64};
  c.num_classes = 4;
  c.seed = seed;
  return c;
}

TrainConfig small_train(std::uint64_t seed, std::size_t epochs) {
  TrainConfig t;
  t.lr = 0.01;
  t.lr_milestones = {};
  t.epochs = epochs;
  t.batch_size = 8;
  t.frames = 32;
  t.seed = seed;
  return t;
}

SyntheticSpec small_data(std::uint64_t seed) {
  SyntheticSpec s;
  s.seed = seed;
  s.samples_per_class = 16;
  s.eval_per_class = 16;
  s.frames = 32;
  return s;
}

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

// Half-width of a 95% t interval (n = 5 -> t = 2.776).
double ci95(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  const double sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
  const double t = v.size() == 5 ? 2.776 : 1.96;
  return t * sd / std::sqrt(static_cast<double>(v.size()));
}

// ------------------------------------------------------------------ criteria

Outcome gradient_integrity() {
  const GradCheckReport r = run_gradcheck(CheckScope::model, 0, 1e-4, 0);
  const auto& e = r.entries.front();
  return {r.passed() && r.seconds < 60.0,
          "max_rel " + fmt("%.3e", e.result.max_rel_error) + " over " + std::to_string(e.result.coordinates) +
              " coords in " + fmt("%.1f", r.seconds) + " s (limits 1e-4, 60 s)"};
}

Outcome oracle_equivalence() {
  Rng rng(2024);
  const char* ids[] = {"micro5", "kinetics18", "ntu25"};
  double scn_worst = 0.0, mcf_worst = 0.0, tdf_worst = 0.0;
  const int cases = 24;
  for (int i = 0; i < cases; ++i) {
    const Layout l = load_layout(ids[i % 3]);
    const std::size_t v = l.num_joints();
    const std::size_t n = 1 + rng.below(2), t = 1 + rng.below(6);
    {
      const std::size_t cin = 1 + rng.below(5), cout = 1 + rng.below(6);
      Scn layer(cin, cout, partition_adjacency(l.graph), rng);
      for (auto& m : layer.mask().values()) m += static_cast<real>(0.1 * rng.normal());
      const Tensor x = random_tensor({n, cin, t, v}, rng, 1, false);
      scn_worst = std::max(scn_worst, oracle::max_abs_diff(layer.forward(x, true), oracle::scn(layer, x, true)));
      scn_worst = std::max(scn_worst, oracle::max_abs_diff(layer.forward(x, false), oracle::scn(layer, x, false)));
    }
    {
      const std::size_t alpha = 1 + rng.below(4), c = alpha * (1 + rng.below(3));
      const std::size_t grains = 1 + rng.below(l.grains.size());
      const std::vector<GrainMapping> used(l.grains.begin(), l.grains.begin() + static_cast<std::ptrdiff_t>(grains));
      Mcf layer(c, used, rng, {.alpha = alpha});
      for (auto& w : layer.fusion().values()) w = static_cast<real>(rng.uniform(-1, 1));
      const Tensor x = random_tensor({n, c, t, v}, rng, 1, false);
      mcf_worst = std::max(mcf_worst, oracle::max_abs_diff(layer.forward(x), oracle::mcf(layer, used, x)));
    }
    {
      const std::size_t reduction = 1 + rng.below(4), c = reduction * (1 + rng.below(4));
      const std::size_t kernel = 1 + 2 * rng.below(3), frames = 2 + rng.below(5);
      Tdf layer(c, rng, {.variant = i % 2 ? TdfVariant::motion : TdfVariant::plain, .kernel = kernel, .reduction = reduction});
      const Tensor y = random_tensor({n, c, frames, v}, rng, 1, false);
      tdf_worst = std::max(tdf_worst, oracle::max_abs_diff(layer.forward(y, true), oracle::tdf(layer, y, true)));
      tdf_worst = std::max(tdf_worst, oracle::max_abs_diff(layer.forward(y, false), oracle::tdf(layer, y, false)));
    }
  }
  const double worst = std::max({scn_worst, mcf_worst, tdf_worst});
  return {worst < 1e-10, std::to_string(cases) + " shapes each; max |diff| scn " + fmt("%.2e", scn_worst) + ", mcf " +
                             fmt("%.2e", mcf_worst) + ", tdf " + fmt("%.2e", tdf_worst)};
}

Outcome attention_normalization() {
  Model m(ModelConfig{});
  Rng rng(7);
  m.set_training(false);
  NoGradGuard guard;
  ForwardTrace trace;
  m.forward(random_tensor({2, 3, 32, 25}, rng, 1, false), &trace);
  double worst = 0.0;
  std::size_t rows = 0, maps = 0;
  for (const auto& block : trace.attention)
    for (const Tensor& a : block.per_grain) {
      ++maps;
      const std::size_t parts = a.dim(2);
      for (std::size_t r = 0; r < a.numel() / parts; ++r) {
        double s = 0.0;
        for (std::size_t p = 0; p < parts; ++p) s += a.values()[r * parts + p];
        worst = std::max(worst, std::abs(s - 1.0));
        ++rows;
      }
    }
  return {maps == 18 && worst <= 1e-10,
          std::to_string(maps) + " maps (6 blocks x 3 grains), " + std::to_string(rows) + " rows, max |sum-1| " + fmt("%.2e", worst)};
}

Outcome permutation_equivariance() {
  const Layout l = load_layout("ntu25");
  Rng rng(11);
  const Tensor x = random_tensor({2, 4, 6, 25}, rng, 1, false);
  Rng init_a(5);
  Scn base(4, 8, partition_adjacency(l.graph), init_a);
  const Tensor y = base.forward(x, true);
  double worst = 0.0;
  const int trials = 12;
  for (int i = 0; i < trials; ++i) {
    std::vector<std::size_t> perm(25);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    rng.shuffle(perm);
    Rng init_b(5);
    Scn moved(4, 8, partition_adjacency(relabel(l.graph, perm)), init_b);
    worst = std::max(worst, oracle::max_abs_diff(moved.forward(permute_joints(x, perm), true), permute_joints(y, perm)));
  }
  return {worst < 1e-10, std::to_string(trials) + " permutations, max |diff| " + fmt("%.2e", worst)};
}

Outcome ablation_identity() {
  Rng rng(13);
  const Tensor x = random_tensor({2, 3, 32, 25}, rng, 1, false);
  double worst = 0.0;
  for (int variant = 0; variant < 2; ++variant) {
    Model full(ModelConfig{});
    {
      NoGradGuard guard;
      full.forward(x);  // move BN statistics away from their defaults
    }
    full.set_training(false);
    Model reduced(ablate(ModelConfig{}, Ablation::mcf));
    reduced.set_training(false);
    copy_matching_state(full, reduced);
    for (std::size_t i = 1; i <= Model::kBlocks; ++i)
      if (auto* mcf = full.block(i).mcf()) zero(variant == 0 ? mcf->fusion() : mcf->recover().weight());
    NoGradGuard guard;
    worst = std::max(worst, oracle::max_abs_diff(full.forward(x), reduced.forward(x)));
  }
  return {worst < 1e-10, "fusion-zeroed and recover-zeroed vs built without MCF, max |diff| " + fmt("%.2e", worst)};
}

Outcome overfit_anchor(const fs::path& work) {
  SyntheticSpec spec;
  spec.seed = 1;
  spec.samples_per_class = 16;
  spec.eval_per_class = 16;
  spec.frames = 64;
  auto [train_set, eval_set] = synthetic_splits(spec);
  ModelConfig mc;
  mc.num_classes = 4;
  Model m(mc);
  TrainConfig tc;
  tc.lr = 0.01;
  tc.lr_milestones = {};
  tc.epochs = 200;
  tc.batch_size = 8;
  tc.frames = 64;
  tc.stop_at_train_top1 = 0.95;
  const TrainResult r = train(m, train_set, {}, tc, {(work / "overfit_metrics.csv").string(), "", nullptr});
  const double top1 = r.history.back().train_top1;
  const LinearBaselineResult base = linear_baseline(train_set, eval_set, 4, 64);
  const bool pass = top1 >= 0.95 && r.seconds < 300.0 && base.eval_top1 < 0.90;
  return {pass, std::to_string(train_set.size()) + " samples: train top1 " + fmt("%.3f", top1) + " after " +
                    std::to_string(r.history.size()) + " epochs in " + fmt("%.1f", r.seconds) +
                    " s; linear baseline held-out top1 " + fmt("%.3f", base.eval_top1) + " (train " +
                    fmt("%.3f", base.train_top1) + ")"};
}

Outcome parameter_anchor() {
  const std::size_t n = count_params(Model(ModelConfig{}));
  return {n >= 1'400'000 && n <= 2'000'000, std::to_string(n) + " parameters (range 1.4M to 2.0M)"};
}

Outcome fusion_sanity() {
  const Stream streams[] = {Stream::joint, Stream::bone, Stream::joint_motion, Stream::bone_motion};
  std::ostringstream detail;
  bool pass = true;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto [train_set, eval_set] = synthetic_splits(small_data(seed));
    std::vector<ScoreMatrix> scores;
    double best_single = 0.0;
    for (Stream s : streams) {
      ModelConfig mc = small_config(seed);
      mc.stream = s;
      Model m(mc);
      train(m, train_set, {}, small_train(seed, 10));
      scores.push_back(predict_scores(m, eval_set, 32));
      best_single = std::max(best_single, evaluate_scores(scores.back(), labels_of(eval_set)).top1);
    }
    const double fused = evaluate_scores(fuse_scores(scores, {1, 1, 1, 1}), labels_of(eval_set)).top1;
    pass &= fused >= best_single - 0.01;
    detail << (seed > 1 ? "; " : "") << "seed " << seed << " fused " << fmt("%.3f", fused) << " best " << fmt("%.3f", best_single);
  }
  return {pass, detail.str()};
}

Outcome determinism(const fs::path& work) {
  auto [train_set, eval_set] = synthetic_splits(small_data(3));
  std::string logs[2];
  for (int run = 0; run < 2; ++run) {
    Model m(small_config(3));
    const fs::path log = work / ("determinism_" + std::to_string(run) + ".csv");
    train(m, train_set, eval_set, small_train(3, 3), {log.string(), "", nullptr});
    std::ifstream is(log, std::ios::binary);
    logs[run].assign(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
  }
  return {!logs[0].empty() && logs[0] == logs[1], std::to_string(logs[0].size()) + "-byte logs " + (logs[0] == logs[1] ? "identical" : "differ")};
}

Outcome grain_ablation() {
  std::vector<double> means;
  std::ostringstream detail;
  for (std::size_t grains = 1; grains <= 3; ++grains) {
    std::vector<double> acc;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      auto [train_set, eval_set] = synthetic_splits(small_data(100 + seed));
      ModelConfig mc = small_config(seed);
      mc.grains = grains;
      Model m(mc);
      train(m, train_set, {}, small_train(seed, 10));
      acc.push_back(evaluate_scores(predict_scores(m, eval_set, 32), labels_of(eval_set)).top1);
    }
    means.push_back(mean(acc));
    detail << (grains > 1 ? "; " : "") << grains << " grain" << (grains > 1 ? "s " : " ") << fmt("%.3f", means.back())
           << " +/- " << fmt("%.3f", ci95(acc));
  }
  const bool monotone = means[0] <= means[1] && means[1] <= means[2];
  return {monotone, "mean eval top1 (95% CI, 5 seeds): " + detail.str()};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::string work = "acceptance";
  std::vector<std::string> only;
  app.add_option("--work", work, "scratch directory for logs");
  app.add_option("--only", only, "criterion ids to run")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  keep_heap_resident();
  Eigen::setNbThreads(1);
  fs::create_directories(work);
  const fs::path dir(work);

  const std::vector<Criterion> criteria = {
      {"gradient", "gradient integrity", true, gradient_integrity},
      {"oracle", "oracle equivalence", true, oracle_equivalence},
      {"attention", "attention normalization", true, attention_normalization},
      {"permutation", "permutation equivariance", true, permutation_equivariance},
      {"ablation", "ablation identity", true, ablation_identity},
      {"overfit", "overfit anchor", true, [&] { return overfit_anchor(dir); }},
      {"params", "parameter anchor", true, parameter_anchor},
      {"fusion", "fusion sanity", true, fusion_sanity},
      {"determinism", "determinism", true, [&] { return determinism(dir); }},
      {"grains", "grain ablation direction", false, grain_ablation},
  };

  const std::set<std::string> selected(only.begin(), only.end());
  std::ofstream summary(dir / "summary.txt");
  int failures = 0;
  for (const auto& c : criteria) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::string line = std::string(o.pass ? "PASS" : "FAIL") + "  " + c.title + (c.gated ? "" : " [reported, not gated]") +
                       ": " + o.detail + " (" + fmt("%.1f", secs) + " s)";
    std::cout << line << std::endl;
    summary << line << '\n';
    if (!o.pass && c.gated) ++failures;
  }
  return failures == 0 ? 0 : 1;
}
