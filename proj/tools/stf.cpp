// stf: train, evaluate, gradient-check and inspect skeleton action models.
//
//   stf synth --out data/synth --seed 1
//   stf train --manifest data/synth/manifest.txt --config configs/synthetic.cfg --streams joint,bone --out runs/a
//   stf eval --manifest data/synth/manifest.txt --run-dir runs/a --streams joint,bone --fusion-weights 1,1
//   stf gradcheck --scope model
//   stf export-attention --checkpoint runs/a/joint/best.ckpt --sequence data/synth/eval_00064.skel --out att
//
// Exit codes: 0 ok, 1 usage, 2 data error, 3 check failure.

#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "stf/stf.hpp"

namespace fs = std::filesystem;
using namespace stf;

namespace {

constexpr int kOk = 0, kUsage = 1, kData = 2, kCheck = 3;

// A failed check whose report has already been printed.
struct CheckFailure {
  std::string what;
};

struct Common {
  std::string config;
  std::string layout;
  std::string streams = "joint";
  std::string fusion_weights;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> ablate;
  std::optional<std::size_t> grains;
  std::optional<std::size_t> tdf_kernel;
  bool deterministic = false;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "key = value config file (model and training keys)");
  app->add_option("--layout", c.layout, "built-in layout id (ntu25, kinetics18, micro5) or layout file");
  app->add_option("--streams", c.streams, "comma-separated streams: joint, bone, joint-motion, bone-motion");
  app->add_option("--fusion-weights", c.fusion_weights, "comma-separated score weights, one per stream");
  app->add_option("--seed", c.seed, "seed for initialization, shuffling and synthesis");
  app->add_option("--ablate", c.ablate, "remove a component: mcf, tdf or mask (repeatable)")->take_all();
  app->add_option("--grains", c.grains, "number of attention grains to use (1..3)");
  app->add_option("--tdf-kernel", c.tdf_kernel, "odd temporal kernel of the excitation branch");
  app->add_flag("--deterministic", c.deterministic, "strict single-threaded execution");
}

KeyValueConfig load_config(const Common& c) {
  KeyValueConfig kv = c.config.empty() ? KeyValueConfig{} : KeyValueConfig::load(c.config);
  std::set<std::string> known = ModelConfig::keys();
  known.insert(TrainConfig::keys().begin(), TrainConfig::keys().end());
  kv.require_known(known);
  if (!c.layout.empty()) kv.set("layout", c.layout);
  if (c.seed) {
    kv.set("seed", std::to_string(*c.seed));
    kv.set("train_seed", std::to_string(*c.seed));
  }
  if (c.grains) kv.set("grains", std::to_string(*c.grains));
  if (c.tdf_kernel) {
    if (*c.tdf_kernel % 2 == 0) throw ConfigError("--tdf-kernel must be odd, got " + std::to_string(*c.tdf_kernel));
    kv.set("tdf_kernel", std::to_string(*c.tdf_kernel));
  }
  return kv;
}

ModelConfig model_config(const KeyValueConfig& kv, const Common& c) {
  ModelConfig m = ModelConfig::from(kv);
  for (const auto& a : c.ablate) m = ablate(m, parse_ablation(a));
  return m;
}

std::vector<double> fusion_weights(const Common& c, std::size_t streams) {
  if (c.fusion_weights.empty()) return std::vector<double>(streams, 1.0);
  auto w = parse::to_double_list(c.fusion_weights, "--fusion-weights");
  if (w.size() != streams) {
    throw ConfigError(std::to_string(w.size()) + " fusion weights for " + std::to_string(streams) + " streams");
  }
  return w;
}

void apply_runtime(const Common& c) {
  keep_heap_resident();
  if (c.deterministic) Eigen::setNbThreads(1);
}

struct Dataset {
  DatasetManifest manifest;
  std::vector<SkeletonSequence> train, eval;
  std::vector<std::string> eval_ids;
};

std::size_t class_count(const DatasetManifest& m) {
  if (!m.class_names.empty()) return m.class_names.size();
  std::size_t k = 0;
  for (const auto& s : m.samples) k = std::max(k, s.label + 1);
  return k;
}

// Picks the manifest's layout unless one was given, then loads the splits
// checking every file against it.
Dataset load_dataset(const std::string& path, KeyValueConfig& kv, const std::string& eval_split) {
  Dataset d;
  d.manifest = load_manifest(path);
  if (!kv.has("layout")) kv.set("layout", d.manifest.layout);
  if (!kv.has("num_classes")) kv.set("num_classes", std::to_string(class_count(d.manifest)));
  const std::size_t joints = load_layout(kv.get("layout")).num_joints();
  d.train = load_split(d.manifest, "train", joints);
  d.eval = load_split(d.manifest, eval_split, joints);
  for (const auto& e : d.manifest.split(eval_split)) d.eval_ids.push_back(fs::path(e.path).stem().string());
  return d;
}

// ------------------------------------------------------------------ synth

int cmd_synth(const Common& c, const std::string& out, SyntheticSpec spec) {
  apply_runtime(c);
  if (c.seed) spec.seed = *c.seed;
  if (!c.layout.empty()) spec.layout = c.layout;
  const auto m = generate_synthetic(spec, out);
  std::cout << "wrote " << m.samples.size() << " sequences (" << m.split("train").size() << " train, "
            << m.split("eval").size() << " eval) and " << (fs::path(out) / "manifest.txt").string() << '\n';
  return kOk;
}

// ------------------------------------------------------------------ train

int cmd_train(const Common& c, const std::string& manifest, const std::string& out, bool quiet) {
  apply_runtime(c);
  KeyValueConfig kv = load_config(c);
  Dataset d = load_dataset(manifest, kv, "eval");
  const TrainConfig tc = TrainConfig::from(kv);
  const auto streams = parse_streams(c.streams);
  for (Stream s : streams) {
    ModelConfig mc = model_config(kv, c);
    mc.stream = s;
    Model model(mc);
    const std::string dir = (fs::path(out) / to_string(s)).string();
    fs::create_directories(dir);
    {
      std::ofstream cfg(fs::path(dir) / "model.cfg");
      cfg << mc.to_text();
    }
    std::cout << "stream " << to_string(s) << ": " << count_params(model) << " parameters, " << d.train.size()
              << " train / " << d.eval.size() << " eval sequences\n";
    if (!quiet) std::cout << kMetricsHeader << '\n';
    TrainOutputs o;
    o.metrics_csv = (fs::path(dir) / "metrics.csv").string();
    o.checkpoint_dir = dir;
    o.progress = quiet ? nullptr : &std::cout;
    const TrainResult r = train(model, d.train, d.eval, tc, o);
    std::cout << "stream " << to_string(s) << ": " << r.steps << " steps in " << std::fixed << std::setprecision(1)
              << r.seconds << " s, best epoch " << r.best_epoch << " (" << std::setprecision(4) << r.best_score
              << ")" << (r.stopped_early ? ", stopped early" : "") << '\n';
    std::cout.unsetf(std::ios::floatfield);
  }
  return kOk;
}

// ------------------------------------------------------------------ eval

int cmd_eval(const Common& c, const std::string& manifest, std::vector<std::string> checkpoints,
             const std::string& run_dir, const std::string& split, const std::string& out) {
  apply_runtime(c);
  const auto streams = parse_streams(c.streams);
  const auto weights = fusion_weights(c, streams.size());
  if (checkpoints.empty()) {
    if (run_dir.empty()) throw ConfigError("eval needs --checkpoint (one per stream) or --run-dir");
    for (Stream s : streams) checkpoints.push_back((fs::path(run_dir) / to_string(s) / "best.ckpt").string());
  }
  if (checkpoints.size() != streams.size()) {
    throw ContractError(std::to_string(checkpoints.size()) + " checkpoints for " + std::to_string(streams.size()) +
                        " streams");
  }
  const DatasetManifest m = load_manifest(manifest);
  const auto entries = m.split(split);
  if (entries.empty()) throw DataError(manifest + ": split '" + split + "' is empty");
  std::vector<std::string> ids;
  for (const auto& e : entries) ids.push_back(fs::path(e.path).stem().string());
  if (!out.empty()) fs::create_directories(out);

  const std::size_t frames = TrainConfig::from(load_config(c)).frames;
  std::vector<ScoreMatrix> scores;
  std::vector<std::size_t> labels;
  std::size_t params = 0;
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t i = 0; i < streams.size(); ++i) {
    Model model = load_checkpoint(checkpoints[i]);
    if (model.config().stream != streams[i]) {
      throw ContractError(checkpoints[i] + " was trained on the " + to_string(model.config().stream) +
                          " stream, not " + to_string(streams[i]));
    }
    if (!c.layout.empty() && load_layout(c.layout).num_joints() != model.layout().num_joints()) {
      throw ContractError(checkpoints[i] + ": layout " + model.layout().name + " does not match --layout " + c.layout);
    }
    const auto seqs = load_split(m, split, model.layout().num_joints());
    for (const auto& s : seqs) {
      if (s.label >= model.config().num_classes) {
        throw ContractError(checkpoints[i] + " has " + std::to_string(model.config().num_classes) +
                            " classes but the data has label " + std::to_string(s.label));
      }
    }
    if (labels.empty()) labels = labels_of(seqs);
    scores.push_back(predict_scores(model, seqs, frames));
    params += count_params(model);
    const EvalReport r = evaluate_scores(scores.back(), labels);
    std::cout << std::fixed << std::setprecision(4) << to_string(streams[i]) << ": top1 " << r.top1 << " top" << r.k
              << ' ' << r.top5 << '\n';
    std::cout.unsetf(std::ios::floatfield);
    if (!out.empty()) save_scores_csv((fs::path(out) / ("scores_" + std::string(to_string(streams[i])) + ".csv")).string(), scores.back(), ids);
  }
  const ScoreMatrix fused = fuse_scores(scores, weights);
  EvalReport r = evaluate_scores(fused, labels);
  r.params = params;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::cout << "fused (" << c.streams << "):\n";
  write_eval_report(std::cout, r, m.class_names);
  if (!out.empty()) {
    save_scores_csv((fs::path(out) / "scores_fused.csv").string(), fused, ids);
    std::ofstream rep(fs::path(out) / "report.txt");
    write_eval_report(rep, r, m.class_names);
    std::ofstream conf(fs::path(out) / "confusion.csv");
    conf << "true\\predicted";
    for (std::size_t k = 0; k < fused.cols; ++k) conf << ',' << k;
    conf << '\n';
    for (std::size_t t = 0; t < r.confusion.size(); ++t) {
      conf << t;
      for (auto n : r.confusion[t]) conf << ',' << n;
      conf << '\n';
    }
  }
  return kOk;
}

// ------------------------------------------------------------------ gradcheck

int cmd_gradcheck(const Common& c, const std::string& scope, const std::string& inject, double tolerance,
                  std::size_t max_coords) {
  apply_runtime(c);
  if (!std::is_same_v<real, double>) throw UnsupportedError("gradcheck needs a double-precision build");
  if (!inject.empty()) inject_backward_fault(inject);
  const GradCheckReport r = run_gradcheck(parse_scope(scope), c.seed.value_or(0), tolerance, max_coords);
  std::size_t failed = 0;
  for (const auto& e : r.entries) {
    std::cout << (e.passed ? "pass " : "FAIL ") << std::left << std::setw(28) << e.name << std::right
              << " max_rel " << std::scientific << std::setprecision(3) << e.result.max_rel_error << "  coords "
              << e.result.coordinates << '\n';
    if (!e.passed) {
      ++failed;
      std::cout << "     analytic " << e.result.analytic << " numeric " << e.result.numeric << " at tensor "
                << e.result.worst_tensor << " index " << e.result.worst_index << '\n';
    }
    std::cout.unsetf(std::ios::floatfield);
  }
  std::cout << scope << ": " << r.entries.size() - failed << '/' << r.entries.size() << " passed, max_rel "
            << std::scientific << std::setprecision(3) << r.max_rel_error() << ", tolerance " << tolerance << ", "
            << std::fixed << std::setprecision(1) << r.seconds << " s\n";
  if (!r.passed()) {
    std::string names;
    for (const auto& e : r.entries)
      if (!e.passed) names += (names.empty() ? "" : ", ") + e.name;
    throw CheckFailure{"gradient check failed: " + names};
  }
  return kOk;
}

// ------------------------------------------------------------------ attention

int cmd_export_attention(const Common& c, const std::string& checkpoint, const std::vector<std::string>& sequences,
                         const std::vector<std::size_t>& blocks, std::size_t frames, const std::string& out) {
  apply_runtime(c);
  Model model = load_checkpoint(checkpoint);
  std::vector<SkeletonSequence> seqs;
  for (const auto& p : sequences) seqs.push_back(load_sequence(p, model.layout().num_joints()));
  std::vector<std::size_t> idx(seqs.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const Batch b = make_batch(seqs, idx, model.config().stream, model.layout().bones, frames, CropMode::center, nullptr);
  const AttentionExport e = collect_attention(model, b.input, {blocks.begin(), blocks.end()});
  const auto names = write_attention(e, out);
  for (const auto& n : names) std::cout << (fs::path(out) / n).string() << ".{tnsr,csv}\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Skeleton action recognition: training, evaluation and diagnostics"};
  app.require_subcommand(1);
  Common common;

  auto* synth = app.add_subcommand("synth", "write a synthetic skeleton dataset and manifest");
  std::string synth_out;
  SyntheticSpec spec;
  spec.eval_per_class = 16;
  add_common(synth, common);
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--classes", spec.num_classes, "number of classes (>= 2)");
  synth->add_option("--per-class", spec.samples_per_class, "training sequences per class");
  synth->add_option("--eval-per-class", spec.eval_per_class, "held-out sequences per class");
  synth->add_option("--frames", spec.frames, "frames per sequence");
  synth->add_option("--noise", spec.noise, "Gaussian coordinate noise (std)");
  synth->add_option("--amplitude", spec.amplitude, "motion amplitude");

  auto* trn = app.add_subcommand("train", "train one model per stream");
  std::string manifest, out;
  bool quiet = false;
  add_common(trn, common);
  trn->add_option("--manifest", manifest, "dataset manifest")->required();
  trn->add_option("--out", out, "run directory; each stream writes <out>/<stream>/")->required();
  trn->add_flag("--quiet", quiet, "only print per-stream summaries");

  auto* evl = app.add_subcommand("eval", "score checkpoints and fuse streams");
  std::vector<std::string> checkpoints;
  std::string run_dir, split = "eval", eval_out;
  add_common(evl, common);
  evl->add_option("--manifest", manifest, "dataset manifest")->required();
  evl->add_option("--checkpoint", checkpoints, "checkpoint per stream, in --streams order")->take_all();
  evl->add_option("--run-dir", run_dir, "use <run-dir>/<stream>/best.ckpt");
  evl->add_option("--split", split, "manifest split to evaluate");
  evl->add_option("--out", eval_out, "write score CSVs, report and confusion matrix here");

  auto* gc = app.add_subcommand("gradcheck", "compare analytic and finite-difference gradients");
  std::string scope = "layer", inject;
  double tolerance = 1e-4;
  std::size_t max_coords = 0;
  add_common(gc, common);
  gc->add_option("--scope", scope, "layer, block or model");
  gc->add_option("--inject-bug", inject, "corrupt the backward pass of one op (negative control)");
  gc->add_option("--tolerance", tolerance, "maximum relative error");
  gc->add_option("--max-coords", max_coords, "coordinates sampled per tensor at model scope (0: all)");

  auto* ex = app.add_subcommand("export-attention", "write attention matrices and the final feature heatmap");
  std::string checkpoint, ex_out;
  std::vector<std::string> sequences;
  std::vector<std::size_t> blocks;
  std::size_t frames = 64;
  add_common(ex, common);
  ex->add_option("--checkpoint", checkpoint, "MCF-enabled checkpoint")->required();
  ex->add_option("--sequence", sequences, "SKEL file(s); maps are averaged over them")->required()->take_all();
  ex->add_option("--blocks", blocks, "blocks to export (default: every MCF block)")->delimiter(',');
  ex->add_option("--frames", frames, "temporal length after alignment");
  ex->add_option("--out", ex_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*synth) return cmd_synth(common, synth_out, spec);
    if (*trn) return cmd_train(common, manifest, out, quiet);
    if (*evl) return cmd_eval(common, manifest, checkpoints, run_dir, split, eval_out);
    if (*gc) return cmd_gradcheck(common, scope, inject, tolerance, max_coords);
    if (*ex) return cmd_export_attention(common, checkpoint, sequences, blocks, frames, ex_out);
  } catch (const CheckFailure& e) {
    std::cerr << "stf: " << e.what << '\n';
    return kCheck;
  } catch (const ConfigError& e) {
    std::cerr << "stf: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericError& e) {
    std::cerr << "stf: " << e.what() << '\n';
    return kCheck;
  } catch (const Error& e) {
    std::cerr << "stf: " << e.what() << '\n';
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "stf: " << e.what() << '\n';
    return kData;
  }
  return kUsage;
}
