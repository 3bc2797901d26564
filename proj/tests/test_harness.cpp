#include <cmath>
#include <sstream>

#include "test_util.hpp"

using namespace stf;
using testutil::message_of;
using testutil::TempDir;

namespace {

std::vector<SkeletonSequence> micro_data(std::size_t per_class, std::uint64_t seed = 1, const char* split = "train") {
  SyntheticSpec spec;
  spec.layout = "micro5";
  spec.samples_per_class = per_class;
  spec.eval_per_class = per_class;
  spec.frames = 16;
  spec.seed = seed;
  std::vector<SkeletonSequence> out;
  for (auto& [seq, tag] : generate_synthetic_sequences(spec))
    if (tag == split) out.push_back(std::move(seq));
  return out;
}

TrainConfig micro_train(std::size_t epochs = 2) {
  TrainConfig c;
  c.lr = 0.01;
  c.lr_milestones = {};
  c.epochs = epochs;
  c.batch_size = 4;
  c.frames = 16;
  return c;
}

ScoreMatrix one_hot(const std::vector<std::size_t>& predicted, std::size_t classes) {
  ScoreMatrix s{predicted.size(), classes, std::vector<double>(predicted.size() * classes, 0.0)};
  for (std::size_t i = 0; i < predicted.size(); ++i) s.values[i * classes + predicted[i]] = 1.0;
  return s;
}

void zero(Tensor& t) { std::fill(t.values().begin(), t.values().end(), real(0)); }

}  // namespace

// ----------------------------------------------------------- config and schedule

TEST(TrainConfig, InvalidValuesAreConfigErrors) {
  auto expect_bad = [](auto edit) {
    TrainConfig c;
    edit(c);
    EXPECT_THROW(c.validate(), ConfigError);
  };
  expect_bad([](TrainConfig& c) { c.lr = 0; });
  expect_bad([](TrainConfig& c) { c.lr = std::nan(""); });
  expect_bad([](TrainConfig& c) { c.lr_milestones = {40, 30}; });
  expect_bad([](TrainConfig& c) { c.lr_milestones = {30, 65}; });
  expect_bad([](TrainConfig& c) { c.momentum = 1.0; });
  expect_bad([](TrainConfig& c) { c.weight_decay = -1e-4; });
  expect_bad([](TrainConfig& c) { c.batch_size = 0; });
  expect_bad([](TrainConfig& c) { c.epochs = 0; });
  EXPECT_NO_THROW(TrainConfig{}.validate());
}

TEST(TrainConfig, ParsesKeyValueText) {
  const TrainConfig c = TrainConfig::from(KeyValueConfig::parse_text("lr = 0.05\nlr_milestones = 3,5\nepochs = 6\ntrain_seed = 9\n"));
  EXPECT_EQ(c.lr, 0.05);
  EXPECT_EQ(c.lr_milestones, (std::vector<std::size_t>{3, 5}));
  EXPECT_EQ(c.seed, 9u);
  EXPECT_THROW(TrainConfig::from(KeyValueConfig::parse_text("epochs = many\n")), ConfigError);
}

TEST(Schedule, StepDecayAtMilestones) {
  const TrainConfig c;
  EXPECT_DOUBLE_EQ(learning_rate(c, 0), 0.1);
  EXPECT_DOUBLE_EQ(learning_rate(c, 29), 0.1);
  EXPECT_NEAR(learning_rate(c, 30), 0.01, 1e-15);
  EXPECT_NEAR(learning_rate(c, 35), 0.01, 1e-15);
  EXPECT_NEAR(learning_rate(c, 45), 0.001, 1e-15);
}

// ----------------------------------------------------------- optimizer

TEST(Sgd, NesterovMatchesClosedFormOnQuadratic) {
  const double a = 3.0, lr = 0.05, mu = 0.9, theta0 = 2.0;
  Tensor theta = Tensor::from({1}, {theta0}, true);
  SgdNesterov opt({{"theta", theta}}, mu, 0.0);
  auto step = [&] {
    theta.zero_grad();
    backward(ops::scale(ops::sum(ops::mul(theta, theta)), static_cast<real>(0.5 * a)));
    opt.step(lr);
  };
  step();
  const double g0 = a * theta0, v1 = -lr * g0, theta1 = theta0 + mu * v1 - lr * g0;
  EXPECT_NEAR(theta.values()[0], theta1, 1e-12);
  step();
  const double g1 = a * theta1, v2 = mu * v1 - lr * g1, theta2 = theta1 + mu * v2 - lr * g1;
  EXPECT_NEAR(theta.values()[0], theta2, 1e-12);
  EXPECT_NEAR(opt.velocity()[0][0], v2, 1e-12);
}

TEST(Sgd, WeightDecayWithoutGradientShrinksParameters) {
  const double lr = 0.1, mu = 0.9, wd = 1e-2;
  Tensor w = Tensor::from({2}, {1.5, -4.0}, true);
  SgdNesterov opt({{"w", w}}, mu, wd);
  opt.step(lr);
  const double factor = 1.0 - lr * wd * (1.0 + mu);
  EXPECT_NEAR(w.values()[0], 1.5 * factor, 1e-12);
  EXPECT_NEAR(w.values()[1], -4.0 * factor, 1e-12);
}

TEST(Sgd, PlainMomentumWhenNesterovIsOff) {
  Tensor w = Tensor::from({1}, {1.0}, true);
  SgdNesterov opt({{"w", w}}, 0.5, 0.0, false);
  w.zero_grad();
  backward(ops::sum(w));
  opt.step(0.1);
  EXPECT_NEAR(w.values()[0], 0.9, 1e-15);
  opt.step(0.1);  // gradient retained: v = 0.5 * -0.1 - 0.1
  EXPECT_NEAR(w.values()[0], 0.9 - 0.15, 1e-15);
}

// ----------------------------------------------------------- training loop

TEST(Train, StepCountFollowsBatchSize) {
  Model m(micro_model_config(1));
  const auto data = micro_data(2);
  ASSERT_EQ(data.size(), 8u);
  const TrainResult r = train(m, data, {}, micro_train(1));
  EXPECT_EQ(r.steps, 2u);
  ASSERT_EQ(r.history.size(), 1u);
  EXPECT_TRUE(std::isnan(r.history[0].eval_top1));
}

TEST(Train, LogsAndCheckpoints) {
  TempDir dir;
  Model m(micro_model_config(2));
  const TrainResult r = train(m, micro_data(2), micro_data(1, 1, "eval"), micro_train(3),
                              {dir.file("metrics.csv"), dir.path().string(), nullptr});
  std::istringstream log(testutil::read_bytes(dir.file("metrics.csv")));
  std::string line;
  std::getline(log, line);
  EXPECT_EQ(line, kMetricsHeader);
  std::size_t rows = 0;
  while (std::getline(log, line)) {
    EXPECT_EQ(line, format_metrics_row(r.history[rows]));
    ++rows;
  }
  EXPECT_EQ(rows, 3u);
  EXPECT_TRUE(std::filesystem::exists(dir.file("best.ckpt")));
  EXPECT_TRUE(std::filesystem::exists(dir.file("final.ckpt")));
  EXPECT_FALSE(std::isnan(r.history.back().eval_top1));
}

TEST(Train, IdenticalRunsWriteIdenticalLogs) {
  TempDir dir;
  for (const char* name : {"a.csv", "b.csv"}) {
    Model m(micro_model_config(3));
    train(m, micro_data(2), {}, micro_train(2), {dir.file(name), "", nullptr});
  }
  EXPECT_EQ(testutil::read_bytes(dir.file("a.csv")), testutil::read_bytes(dir.file("b.csv")));
}

TEST(Train, DivergenceReportsGradientNorms) {
  Model m(micro_model_config(4));
  TrainConfig c = micro_train(20);
  c.lr = 1e30;
  const std::string msg = message_of<NumericError>([&] { train(m, micro_data(2), {}, c); });
  EXPECT_NE(msg.find("non-finite loss"), std::string::npos) << msg;
  EXPECT_NE(msg.find("largest gradient norms of the previous step"), std::string::npos) << msg;
}

TEST(Train, EmptyTrainingSetIsDataError) {
  Model m(micro_model_config(5));
  EXPECT_THROW(train(m, {}, {}, micro_train()), DataError);
}

TEST(Train, MetricsRowFormat) {
  EpochMetrics m;
  m.epoch = 3;
  m.lr = 0.01;
  m.steps = 12;
  m.train_loss = 0.5;
  m.train_top1 = 0.75;
  EXPECT_EQ(format_metrics_row(m), "3,0.01,12,0.500000000,0.750000,,");
  m.eval_top1 = 0.5;
  m.eval_top5 = 1.0;
  EXPECT_EQ(format_metrics_row(m), "3,0.01,12,0.500000000,0.750000,0.500000,1.000000");
}

// ----------------------------------------------------------- evaluation

TEST(Evaluate, PerfectPredictor) {
  const std::vector<std::size_t> labels{0, 1, 2, 2, 1, 0, 3};
  const EvalReport r = evaluate_scores(one_hot(labels, 4), labels);
  EXPECT_EQ(r.top1, 1.0);
  EXPECT_EQ(r.top5, 1.0);
  EXPECT_EQ(r.k, 4u);
}

TEST(Evaluate, RandomPredictorIsNearChance) {
  Rng rng(7);
  const std::size_t n = 4000, k = 10;
  ScoreMatrix s{n, k, {}};
  std::vector<std::size_t> labels;
  for (std::size_t i = 0; i < n * k; ++i) s.values.push_back(rng.uniform());
  for (std::size_t i = 0; i < n; ++i) labels.push_back(rng.below(k));
  const EvalReport r = evaluate_scores(s, labels);
  const double sd1 = std::sqrt(0.1 * 0.9 / n), sd5 = std::sqrt(0.5 * 0.5 / n);
  EXPECT_NEAR(r.top1, 0.1, 3 * sd1);
  EXPECT_NEAR(r.top5, 0.5, 3 * sd5);
}

TEST(Evaluate, PerClassAndConfusion) {
  const std::vector<std::size_t> labels{0, 0, 0, 1, 1, 2};
  const std::vector<std::size_t> predicted{0, 0, 1, 1, 2, 2};
  ScoreMatrix s = one_hot(predicted, 4);
  const EvalReport r = evaluate_scores(s, labels);
  EXPECT_NEAR(r.top1, 4.0 / 6.0, 1e-15);
  EXPECT_NEAR(r.per_class[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(r.per_class[1], 0.5, 1e-15);
  EXPECT_EQ(r.per_class[2], 1.0);
  EXPECT_TRUE(std::isnan(r.per_class[3]));
  EXPECT_EQ(r.confusion[0][0], 2u);
  EXPECT_EQ(r.confusion[0][1], 1u);
  EXPECT_EQ(r.confusion[1][2], 1u);
  EXPECT_EQ(r.confusion[3], (std::vector<std::size_t>{0, 0, 0, 0}));
  std::ostringstream os;
  write_eval_report(os, r, {"a", "b", "c", "d"});
  EXPECT_NE(os.str().find("b,0.5000,2"), std::string::npos) << os.str();
  EXPECT_NE(os.str().find("d,,0"), std::string::npos) << os.str();
  EXPECT_THROW(evaluate_scores(s, {0, 1}), ContractError);
}

TEST(Evaluate, TopKCountsTiesByIndex) {
  // true class 3 tied with class 0 for the best score; index order ranks 0 first
  ScoreMatrix s{1, 6, {0.5, 0.1, 0.1, 0.5, 0.0, 0.0}};
  const EvalReport r = evaluate_scores(s, {3});
  EXPECT_EQ(r.top1, 0.0);
  EXPECT_EQ(r.top5, 1.0);
}

TEST(Scores, CsvRoundTrip) {
  TempDir dir;
  Rng rng(8);
  ScoreMatrix s{3, 4, {}};
  for (int i = 0; i < 12; ++i) s.values.push_back(rng.uniform());
  save_scores_csv(dir.file("s.csv"), s, {"a", "b", "c"});
  std::vector<std::string> ids;
  const ScoreMatrix back = load_scores_csv(dir.file("s.csv"), &ids);
  EXPECT_EQ(ids, (std::vector<std::string>{"a", "b", "c"}));
  EXPECT_EQ(back.rows, 3u);
  EXPECT_EQ(back.values, s.values);
}

TEST(Scores, PredictionsAreProbabilities) {
  Model m(micro_model_config(9));
  const auto data = micro_data(3);
  const ScoreMatrix s = predict_scores(m, data, 16, 5);
  ASSERT_EQ(s.rows, data.size());
  for (std::size_t r = 0; r < s.rows; ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < s.cols; ++c) total += s.at(r, c);
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
  EXPECT_TRUE(m.training());
}

// ----------------------------------------------------------- attention export

TEST(Attention, CsvAndBinaryAgree) {
  TempDir dir;
  Model m(micro_model_config(10));
  Rng rng(11);
  const AttentionExport e = collect_attention(m, random_tensor({2, 3, 16, 5}, rng, 1, false), {4, 9});
  ASSERT_EQ(e.maps.size(), 6u);
  const auto names = write_attention(e, dir.path().string());
  EXPECT_EQ(names.size(), 7u);
  for (const auto& name : names) {
    const Tensor bin = io::load_tensor(dir.file(name + ".tnsr"));
    const Tensor csv = io::load_matrix_csv(dir.file(name + ".csv"));
    EXPECT_EQ(bin.shape(), csv.shape()) << name;
    EXPECT_LT(oracle::max_abs_diff(bin, csv), 1e-6) << name;
  }
  for (const auto& map : e.maps)
    for (Eigen::Index i = 0; i < map.weights.rows(); ++i) EXPECT_NEAR(map.weights.row(i).sum(), 1.0, 1e-12);
}

TEST(Attention, ZeroQueriesGiveUniformMaps) {
  Model m(micro_model_config(12));
  for (std::size_t i = 1; i <= Model::kBlocks; ++i) {
    if (auto* mcf = m.block(i).mcf()) {
      zero(mcf->query().weight());
      zero(mcf->query().bias());
    }
  }
  Rng rng(13);
  const AttentionExport e = collect_attention(m, random_tensor({1, 3, 16, 5}, rng, 1, false));
  EXPECT_EQ(e.maps.size(), 6u * 3u);
  for (const auto& map : e.maps) {
    const double expected = 1.0 / static_cast<double>(map.weights.cols());
    EXPECT_LT((map.weights.array() - expected).abs().maxCoeff(), 1e-15);
  }
}

TEST(Attention, StaticInputGivesTimeConstantHeatmapInterior) {
  ModelConfig c = micro_model_config(14);
  c.tcn_kernel = 3;
  c.tdf_kernel = 3;
  Model m(c);
  Rng rng(15);
  const Tensor frame = random_tensor({1, 3, 1, 5}, rng, 1, false);
  std::vector<real> v;
  for (std::size_t ch = 0; ch < 3; ++ch)
    for (std::size_t t = 0; t < 256; ++t)
      for (std::size_t j = 0; j < 5; ++j) v.push_back(frame.values()[ch * 5 + j]);
  const AttentionExport e = collect_attention(m, Tensor::from({1, 3, 256, 5}, v));
  ASSERT_EQ(e.heatmap.rows(), 64);
  // zero padding disturbs a margin at each end; the middle must be flat
  for (Eigen::Index t = 20; t < 44; ++t) EXPECT_LT((e.heatmap.row(t) - e.heatmap.row(32)).cwiseAbs().maxCoeff(), 1e-10) << t;
}

TEST(Attention, ModelWithoutMcfIsUnsupported) {
  Model m(ablate(micro_model_config(16), Ablation::mcf));
  const std::string msg = message_of<UnsupportedError>([&] { collect_attention(m, Tensor::zeros({1, 3, 8, 5})); });
  EXPECT_NE(msg.find("unsupported"), std::string::npos);
  Model full(micro_model_config(16));
  EXPECT_THROW(collect_attention(full, Tensor::zeros({1, 3, 8, 5}), {1, 2}), UnsupportedError);
}

// ----------------------------------------------------------- baseline

TEST(Baseline, SeparableDataIsLearned) {
  Rng rng(17);
  std::vector<SkeletonSequence> train_set, eval_set;
  for (int i = 0; i < 40; ++i) {
    SkeletonSequence s;
    s.frames = 4;
    s.joints = 2;
    s.label = static_cast<std::size_t>(i % 2);
    const double sign = s.label ? 1.0 : -1.0;
    for (int k = 0; k < 24; ++k) s.coords.push_back(static_cast<float>(sign + 0.3 * rng.normal()));
    (i < 30 ? train_set : eval_set).push_back(s);
  }
  const LinearBaselineResult r = linear_baseline(train_set, eval_set, 2, 4);
  EXPECT_EQ(r.train_top1, 1.0);
  EXPECT_EQ(r.eval_top1, 1.0);
  EXPECT_THROW(linear_baseline({}, eval_set, 2, 4), DataError);
}
