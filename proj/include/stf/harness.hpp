#pragma once

// Training loop, evaluation, score files, the linear baseline and attention
// export.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "stf/data.hpp"
#include "stf/network.hpp"
#include "stf/streams.hpp"

namespace stf::inline STF_PRECISION_NS {

// ------------------------------------------------------------------ config

struct TrainConfig {
  double lr = 0.1;
  std::vector<std::size_t> lr_milestones = {30, 40};
  std::size_t epochs = 65;
  double momentum = 0.9;
  bool nesterov = true;
  double weight_decay = 1e-4;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  std::size_t frames = 64;            // temporal alignment target
  double stop_at_train_top1 = 0.0;    // 0: run every epoch

  static const std::set<std::string>& keys() {
    static const std::set<std::string> k = {"lr", "lr_milestones", "epochs", "momentum", "nesterov", "weight_decay",
                                            "batch_size", "train_seed", "frames", "stop_at_train_top1"};
    return k;
  }

  static TrainConfig from(const KeyValueConfig& kv) {
    TrainConfig c;
    const auto& v = kv.values();
    auto get = [&](const char* k) -> const std::string* {
      auto it = v.find(k);
      return it == v.end() ? nullptr : &it->second;
    };
    if (auto s = get("lr")) c.lr = parse::to_double(*s, "lr");
    if (auto s = get("lr_milestones")) c.lr_milestones = parse::to_size_list(*s, "lr_milestones");
    if (auto s = get("epochs")) c.epochs = parse::to_size(*s, "epochs");
    if (auto s = get("momentum")) c.momentum = parse::to_double(*s, "momentum");
    if (auto s = get("nesterov")) c.nesterov = parse::to_bool(*s, "nesterov");
    if (auto s = get("weight_decay")) c.weight_decay = parse::to_double(*s, "weight_decay");
    if (auto s = get("batch_size")) c.batch_size = parse::to_size(*s, "batch_size");
    if (auto s = get("train_seed")) c.seed = parse::to_size(*s, "train_seed");
    if (auto s = get("frames")) c.frames = parse::to_size(*s, "frames");
    if (auto s = get("stop_at_train_top1")) c.stop_at_train_top1 = parse::to_double(*s, "stop_at_train_top1");
    c.validate();
    return c;
  }

  void validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be positive");
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    for (std::size_t i = 0; i < lr_milestones.size(); ++i) {
      if (i > 0 && lr_milestones[i] <= lr_milestones[i - 1]) throw ConfigError("lr milestones must be strictly increasing");
      if (lr_milestones[i] >= epochs) throw ConfigError("lr milestone " + std::to_string(lr_milestones[i]) + " is not before epoch " + std::to_string(epochs));
    }
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must lie in [0, 1)");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (frames < 1) throw ConfigError("frames must be at least 1");
  }
};

// Step schedule: the base rate times 0.1 per milestone already reached.
inline double learning_rate(const TrainConfig& c, std::size_t epoch) {
  double lr = c.lr;
  for (auto m : c.lr_milestones)
    if (epoch >= m) lr *= 0.1;
  return lr;
}

// ------------------------------------------------------------------ optimizer

// SGD with L2 weight decay folded into the gradient. Nesterov form:
//   g = grad + wd * theta
//   v <- mu * v - lr * g
//   theta <- theta + mu * v - lr * g
class SgdNesterov {
 public:
  SgdNesterov(ParamList params, double momentum, double weight_decay, bool nesterov = true)
      : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay), nesterov_(nesterov) {
    for (const auto& p : params_) velocity_.emplace_back(p.tensor.numel(), 0.0);
  }

  void step(double lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor& t = params_[i].tensor;
      auto theta = t.data();
      const bool has = t.has_grad();
      const auto grad = has ? t.grad() : std::span<real>{};
      auto& v = velocity_[i];
      for (std::size_t j = 0; j < theta.size(); ++j) {
        const double g = (has ? static_cast<double>(grad[j]) : 0.0) + weight_decay_ * static_cast<double>(theta[j]);
        v[j] = momentum_ * v[j] - lr * g;
        const double delta = nesterov_ ? momentum_ * v[j] - lr * g : v[j];
        theta[j] = static_cast<real>(static_cast<double>(theta[j]) + delta);
      }
    }
  }

  const std::vector<std::vector<double>>& velocity() const { return velocity_; }

 private:
  ParamList params_;
  std::vector<std::vector<double>> velocity_;
  double momentum_, weight_decay_;
  bool nesterov_;
};

// ------------------------------------------------------------------ batches

struct Batch {
  Tensor input;  // N x C x T x V
  std::vector<std::size_t> labels;
};

inline Batch make_batch(const std::vector<SkeletonSequence>& seqs, const std::vector<std::size_t>& indices, Stream stream,
                        const BonePairs& bones, std::size_t frames, CropMode mode, Rng* rng) {
  if (indices.empty()) throw ContractError("make_batch: empty batch");
  const auto& first = seqs.at(indices.front());
  const std::size_t c = first.channels, v = first.joints;
  std::vector<real> data;
  data.reserve(indices.size() * c * frames * v);
  Batch b;
  for (auto i : indices) {
    const auto& s = seqs.at(i);
    if (s.channels != c || s.joints != v) throw DataError("make_batch: sequences disagree on channels or joints");
    const Tensor x = apply_stream(align_temporal(s, frames, mode, rng).to_tensor(), stream, bones);
    data.insert(data.end(), x.values().begin(), x.values().end());
    b.labels.push_back(s.label);
  }
  b.input = Tensor::from({indices.size(), c, frames, v}, std::move(data));
  return b;
}

// ------------------------------------------------------------------ metrics

struct EpochMetrics {
  std::size_t epoch = 0;
  double lr = 0.0;
  std::size_t steps = 0;  // cumulative optimizer steps
  double train_loss = 0.0;
  double train_top1 = 0.0;
  double eval_top1 = std::nan("");
  double eval_top5 = std::nan("");
};

inline const char* kMetricsHeader = "epoch,lr,steps,train_loss,train_top1,eval_top1,eval_top5";

inline std::string format_metrics_row(const EpochMetrics& m) {
  auto opt = [](double x) {
    if (std::isnan(x)) return std::string();
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", x);
    return std::string(buf);
  };
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%zu,%.8g,%zu,%.9f,%.6f,", m.epoch, m.lr, m.steps, m.train_loss, m.train_top1);
  return buf + opt(m.eval_top1) + "," + opt(m.eval_top5);
}

struct EvalReport {
  double top1 = 0.0, top5 = 0.0;
  std::size_t k = 5;  // min(5, classes)
  std::vector<double> per_class;                    // NaN where a class has no samples
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::size_t samples = 0;
  std::size_t params = 0;
  double seconds = 0.0;
};

inline EvalReport evaluate_scores(const ScoreMatrix& scores, const std::vector<std::size_t>& labels) {
  if (scores.rows != labels.size()) throw ContractError("evaluate: " + std::to_string(scores.rows) + " score rows for " + std::to_string(labels.size()) + " labels");
  if (scores.rows == 0) throw ContractError("evaluate: no samples");
  const std::size_t classes = scores.cols;
  EvalReport r;
  r.k = std::min<std::size_t>(5, classes);
  r.samples = scores.rows;
  r.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
  std::vector<std::size_t> hits(classes, 0), totals(classes, 0);
  std::size_t top1 = 0, topk = 0;
  for (std::size_t i = 0; i < scores.rows; ++i) {
    const std::size_t y = labels[i];
    if (y >= classes) throw DataError("evaluate: label " + std::to_string(y) + " out of range");
    const std::size_t pred = scores.argmax(i);
    const double sy = scores.at(i, y);
    std::size_t above = 0;  // classes ranked strictly ahead of the true one; ties resolve by index
    for (std::size_t c = 0; c < classes; ++c) {
      const double sc = scores.at(i, c);
      if (sc > sy || (sc == sy && c < y)) ++above;
    }
    ++r.confusion[y][pred];
    ++totals[y];
    if (pred == y) {
      ++top1;
      ++hits[y];
    }
    if (above < r.k) ++topk;
  }
  r.top1 = static_cast<double>(top1) / static_cast<double>(scores.rows);
  r.top5 = static_cast<double>(topk) / static_cast<double>(scores.rows);
  for (std::size_t c = 0; c < classes; ++c) {
    r.per_class.push_back(totals[c] ? static_cast<double>(hits[c]) / static_cast<double>(totals[c]) : std::nan(""));
  }
  return r;
}

inline void write_eval_report(std::ostream& os, const EvalReport& r, const std::vector<std::string>& class_names = {}) {
  os << std::fixed << std::setprecision(4);
  os << "samples " << r.samples << "\ntop1 " << r.top1 << "\ntop" << r.k << ' ' << r.top5 << "\nparams " << r.params
     << "\nseconds " << r.seconds << "\nclass,accuracy,count\n";
  for (std::size_t c = 0; c < r.per_class.size(); ++c) {
    std::size_t count = 0;
    for (auto n : r.confusion[c]) count += n;
    os << (c < class_names.size() ? class_names[c] : std::to_string(c)) << ',';
    if (std::isnan(r.per_class[c])) {
      os << "";
    } else {
      os << r.per_class[c];
    }
    os << ',' << count << '\n';
  }
  os.unsetf(std::ios::floatfield);
}

// Row i: id, then one score per class.
inline void save_scores_csv(const std::string& path, const ScoreMatrix& s, const std::vector<std::string>& ids) {
  if (ids.size() != s.rows) throw ContractError("save_scores_csv: id count mismatch");
  std::ofstream os(path);
  if (!os) throw DataError("cannot open " + path + " for writing");
  os << "sample_id";
  for (std::size_t c = 0; c < s.cols; ++c) os << ",class_" << c;
  os << '\n' << std::setprecision(17);
  for (std::size_t r = 0; r < s.rows; ++r) {
    os << ids[r];
    for (std::size_t c = 0; c < s.cols; ++c) os << ',' << s.at(r, c);
    os << '\n';
  }
}

inline ScoreMatrix load_scores_csv(const std::string& path, std::vector<std::string>* ids = nullptr) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open " + path);
  std::string line;
  if (!std::getline(is, line)) throw DataError(path + ": empty score file");
  ScoreMatrix s;
  s.cols = parse::split(line).size() - 1;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto cells = parse::split(line);
    if (cells.size() != s.cols + 1) throw DataError(path + ":" + std::to_string(lineno) + ": wrong column count");
    if (ids) ids->push_back(cells[0]);
    for (std::size_t c = 1; c < cells.size(); ++c) s.values.push_back(parse::to_double(cells[c], path));
    ++s.rows;
  }
  return s;
}

// Class probabilities (softmax of the logits) for every sequence, in
// inference mode.
inline ScoreMatrix predict_scores(Model& model, const std::vector<SkeletonSequence>& seqs, std::size_t frames,
                                  std::size_t batch_size = 16) {
  const bool was_training = model.training();
  model.set_training(false);
  NoGradGuard no_grad;
  ScoreMatrix out{seqs.size(), model.config().num_classes, {}};
  out.values.reserve(out.rows * out.cols);
  for (std::size_t start = 0; start < seqs.size(); start += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(seqs.size(), start + batch_size); ++i) idx.push_back(i);
    const Batch b = make_batch(seqs, idx, model.config().stream, model.layout().bones, frames, CropMode::center, nullptr);
    const Tensor p = ops::softmax(model.forward(b.input), 1);
    out.values.insert(out.values.end(), p.values().begin(), p.values().end());
  }
  model.set_training(was_training);
  return out;
}

inline std::vector<std::size_t> labels_of(const std::vector<SkeletonSequence>& seqs) {
  std::vector<std::size_t> out;
  for (const auto& s : seqs) out.push_back(s.label);
  return out;
}

// ------------------------------------------------------------------ training

struct TrainOutputs {
  std::string metrics_csv;     // empty: no log file
  std::string checkpoint_dir;  // empty: no checkpoints
  std::ostream* progress = nullptr;
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  std::size_t steps = 0;
  std::size_t best_epoch = 0;
  double best_score = -1.0;
  double seconds = 0.0;
  bool stopped_early = false;
};

namespace detail {

inline std::string grad_norm_summary(const ParamList& params, std::size_t top = 3) {
  std::vector<std::pair<double, std::string>> norms;
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    double s = 0.0;
    for (auto g : const_cast<Tensor&>(p.tensor).grad()) s += static_cast<double>(g) * static_cast<double>(g);
    norms.emplace_back(std::sqrt(s), p.name);
  }
  std::sort(norms.begin(), norms.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::ostringstream os;
  for (std::size_t i = 0; i < std::min(top, norms.size()); ++i) os << (i ? ", " : "") << norms[i].second << '=' << norms[i].first;
  return norms.empty() ? "none recorded" : os.str();
}

}  // namespace detail

// Trains `model` on `train_set`; `eval_set` may be empty. Deterministic for a
// given config, model seed and data.
inline TrainResult train(Model& model, const std::vector<SkeletonSequence>& train_set,
                         const std::vector<SkeletonSequence>& eval_set, const TrainConfig& cfg,
                         const TrainOutputs& outputs = {}) {
  cfg.validate();
  if (train_set.empty()) throw DataError("training split is empty");
  for (const auto& s : train_set) {
    if (s.label >= model.config().num_classes) {
      throw DataError("label " + std::to_string(s.label) + " out of range for " + std::to_string(model.config().num_classes) + " classes");
    }
    if (s.joints != model.layout().num_joints()) {
      throw DataError("sequence has " + std::to_string(s.joints) + " joints, layout " + model.layout().name + " expects " +
                      std::to_string(model.layout().num_joints()));
    }
  }
  std::ofstream log;
  if (!outputs.metrics_csv.empty()) {
    log.open(outputs.metrics_csv);
    if (!log) throw DataError("cannot open " + outputs.metrics_csv + " for writing");
    log << kMetricsHeader << '\n';
  }
  if (!outputs.checkpoint_dir.empty()) std::filesystem::create_directories(outputs.checkpoint_dir);

  const auto start = std::chrono::steady_clock::now();
  const ParamList params = model.parameters();
  SgdNesterov opt(params, cfg.momentum, cfg.weight_decay, cfg.nesterov);
  Rng rng(cfg.seed);
  TrainResult result;
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const Stream stream = model.config().stream;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = learning_rate(cfg, epoch);
    model.set_training(true);
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(b0),
                                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), b0 + cfg.batch_size)));
      const Batch batch = make_batch(train_set, idx, stream, model.layout().bones, cfg.frames, CropMode::random, &rng);
      const Tensor logits = model.forward(batch.input);
      const Tensor loss = cross_entropy_loss(logits, batch.labels);
      const double l = loss.item();
      if (!std::isfinite(l)) {
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(result.steps) +
                           " (lr " + std::to_string(lr) + "); largest gradient norms of the previous step: " +
                           detail::grad_norm_summary(params));
      }
      model.zero_grad();
      backward(loss);
      opt.step(lr);
      ++result.steps;
      loss_sum += l * static_cast<double>(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < logits.dim(1); ++c)
          if (logits.values()[i * logits.dim(1) + c] > logits.values()[i * logits.dim(1) + best]) best = c;
        if (best == batch.labels[i]) ++correct;
      }
    }
    EpochMetrics m;
    m.epoch = epoch;
    m.lr = lr;
    m.steps = result.steps;
    m.train_loss = loss_sum / static_cast<double>(train_set.size());
    m.train_top1 = static_cast<double>(correct) / static_cast<double>(train_set.size());
    if (!eval_set.empty()) {
      const EvalReport r = evaluate_scores(predict_scores(model, eval_set, cfg.frames), labels_of(eval_set));
      m.eval_top1 = r.top1;
      m.eval_top5 = r.top5;
    }
    result.history.push_back(m);
    if (log) log << format_metrics_row(m) << '\n' << std::flush;
    if (outputs.progress) *outputs.progress << format_metrics_row(m) << '\n' << std::flush;

    const double score = eval_set.empty() ? m.train_top1 : m.eval_top1;
    if (score > result.best_score) {
      result.best_score = score;
      result.best_epoch = epoch;
      if (!outputs.checkpoint_dir.empty()) save_checkpoint(outputs.checkpoint_dir + "/best.ckpt", model);
    }
    if (cfg.stop_at_train_top1 > 0.0 && m.train_top1 >= cfg.stop_at_train_top1) {
      result.stopped_early = true;
      break;
    }
  }
  if (!outputs.checkpoint_dir.empty()) save_checkpoint(outputs.checkpoint_dir + "/final.ckpt", model);
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

// ------------------------------------------------------------------ baseline

struct LinearBaselineResult {
  double train_top1 = 0.0;
  double eval_top1 = 0.0;
};

// Multinomial logistic regression on flattened coordinates (standardized,
// then scaled to unit row norm on average),
// fit by full-batch gradient descent on `train_set` and scored on both sets.
inline LinearBaselineResult linear_baseline(const std::vector<SkeletonSequence>& train_set,
                                            const std::vector<SkeletonSequence>& eval_set, std::size_t classes,
                                            std::size_t frames, std::size_t iterations = 500, double lr = 0.5,
                                            double l2 = 1e-4) {
  if (train_set.empty()) throw DataError("linear baseline: empty training split");
  auto features = [&](const std::vector<SkeletonSequence>& set) {
    const std::size_t d = train_set.front().channels * frames * train_set.front().joints;
    Eigen::MatrixXd x(static_cast<Eigen::Index>(set.size()), static_cast<Eigen::Index>(d));
    for (std::size_t i = 0; i < set.size(); ++i) {
      const auto a = align_temporal(set[i], frames, CropMode::center);
      if (a.coords.size() != d) throw DataError("linear baseline: sequences disagree on shape");
      for (std::size_t j = 0; j < d; ++j) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = a.coords[j];
    }
    return x;
  };
  Eigen::MatrixXd xtr = features(train_set);
  const Eigen::RowVectorXd mu = xtr.colwise().mean();
  Eigen::RowVectorXd sd = ((xtr.rowwise() - mu).array().square().colwise().mean()).sqrt();
  for (Eigen::Index j = 0; j < sd.size(); ++j)
    if (sd(j) < 1e-12) sd(j) = 1.0;
  auto standardize = [&](Eigen::MatrixXd x) {
    x = (x.rowwise() - mu).array().rowwise() / sd.array();
    return Eigen::MatrixXd(x / std::sqrt(static_cast<double>(x.cols())));
  };
  xtr = standardize(xtr);
  const auto n = xtr.rows(), d = xtr.cols(), k = static_cast<Eigen::Index>(classes);
  Eigen::MatrixXd y = Eigen::MatrixXd::Zero(n, k);
  for (Eigen::Index i = 0; i < n; ++i) y(i, static_cast<Eigen::Index>(train_set[static_cast<std::size_t>(i)].label)) = 1.0;
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(d, k);
  Eigen::RowVectorXd b = Eigen::RowVectorXd::Zero(k);
  auto probs = [&](const Eigen::MatrixXd& x) {
    Eigen::MatrixXd z = (x * w).rowwise() + b;
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      z.row(i).array() -= z.row(i).maxCoeff();
      z.row(i) = z.row(i).array().exp().matrix();
      z.row(i) /= z.row(i).sum();
    }
    return z;
  };
  for (std::size_t it = 0; it < iterations; ++it) {
    const Eigen::MatrixXd g = (probs(xtr) - y) / static_cast<double>(n);
    w -= lr * (xtr.transpose() * g + l2 * w);
    b -= lr * g.colwise().sum();
  }
  auto accuracy = [&](const Eigen::MatrixXd& x, const std::vector<SkeletonSequence>& set) {
    if (set.empty()) return std::nan("");
    const Eigen::MatrixXd p = probs(x);
    std::size_t hit = 0;
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
      Eigen::Index arg;
      p.row(i).maxCoeff(&arg);
      if (static_cast<std::size_t>(arg) == set[static_cast<std::size_t>(i)].label) ++hit;
    }
    return static_cast<double>(hit) / static_cast<double>(set.size());
  };
  LinearBaselineResult r;
  r.train_top1 = accuracy(xtr, train_set);
  r.eval_top1 = eval_set.empty() ? std::nan("") : accuracy(standardize(features(eval_set)), eval_set);
  return r;
}

// ------------------------------------------------------------------ attention export

struct AttentionMap {
  std::size_t block = 0, grain = 0;
  Eigen::MatrixXd weights;  // V x V_i, averaged over the batch
};

struct AttentionExport {
  std::vector<AttentionMap> maps;
  Eigen::MatrixXd heatmap;  // T' x V channel mean of the last block, sample 0
};

// `blocks` empty selects every MCF block.
inline AttentionExport collect_attention(Model& model, const Tensor& input, const std::set<std::size_t>& blocks = {}) {
  if (!model.has_mcf()) throw UnsupportedError("attention export needs a model with MCF blocks");
  const bool was_training = model.training();
  model.set_training(false);
  NoGradGuard no_grad;
  ForwardTrace trace;
  model.forward(input, &trace);
  model.set_training(was_training);
  AttentionExport out;
  for (const auto& ba : trace.attention) {
    if (!blocks.empty() && !blocks.count(ba.block)) continue;
    for (std::size_t g = 0; g < ba.per_grain.size(); ++g) {
      const Tensor& a = ba.per_grain[g];
      const std::size_t n = a.dim(0), v = a.dim(1), parts = a.dim(2);
      Eigen::MatrixXd m = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(parts));
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t i = 0; i < v; ++i)
          for (std::size_t j = 0; j < parts; ++j)
            m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) += a.values()[(s * v + i) * parts + j];
      out.maps.push_back({ba.block, g, m / static_cast<double>(n)});
    }
  }
  if (!blocks.empty() && out.maps.empty()) throw UnsupportedError("none of the selected blocks has MCF");
  const Tensor& f = trace.features;
  const std::size_t c = f.dim(1), t = f.dim(2), v = f.dim(3);
  out.heatmap = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(v));
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = 0; j < v; ++j)
        out.heatmap(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) += f.values()[(ch * t + i) * v + j];
  out.heatmap /= static_cast<double>(c);
  return out;
}

inline Tensor matrix_tensor(const Eigen::MatrixXd& m) {
  std::vector<real> v(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) v[static_cast<std::size_t>(i * m.cols() + j)] = static_cast<real>(m(i, j));
  return Tensor::from({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())}, std::move(v));
}

// Writes block<b>_grain<g>.{tnsr,csv} and heatmap.{tnsr,csv}; returns the
// written base names.
inline std::vector<std::string> write_attention(const AttentionExport& e, const std::string& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::string> names;
  auto emit = [&](const std::string& base, const Eigen::MatrixXd& m) {
    const std::string stem = (std::filesystem::path(dir) / base).string();
    const Tensor t = matrix_tensor(m);
    io::save_tensor(stem + ".tnsr", t);
    io::save_matrix_csv(stem + ".csv", t);
    names.push_back(base);
  };
  for (const auto& m : e.maps) emit("block" + std::to_string(m.block) + "_grain" + std::to_string(m.grain), m.weights);
  emit("heatmap", e.heatmap);
  return names;
}

}  // namespace stf::inline STF_PRECISION_NS
