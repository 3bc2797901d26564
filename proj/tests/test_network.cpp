#include <cmath>
#include <filesystem>
#include <fstream>

#include "test_util.hpp"

using namespace stf;

namespace {

void zero(Tensor& t) { std::fill(t.values().begin(), t.values().end(), real(0)); }

ModelConfig small_config(std::uint64_t seed = 0) {
  ModelConfig c;
  c.channels = {8, 8, 8, 16, 16, 16, 32, 32, 32};
  c.num_classes = 5;
  c.seed = seed;
  return c;
}

// Pushes a batch through in training mode so BN buffers move off their defaults.
void warm_up(Model& m, const Tensor& x) {
  NoGradGuard guard;
  m.set_training(true);
  m.forward(x);
  m.set_training(false);
}

}  // namespace

TEST(ParamCount, DefaultModelIsInExpectedRange) {
  const std::size_t n = count_params(Model(ModelConfig{}));
  EXPECT_GE(n, 1'400'000u);
  EXPECT_LE(n, 2'000'000u);
}

TEST(ParamCount, DoublingWidthMoreThanDoublesCount) {
  ModelConfig wide = small_config();
  for (auto& c : wide.channels) c *= 2;
  EXPECT_GT(count_params(Model(wide)), 2 * count_params(Model(small_config())));
}

TEST(ParamCount, AffineLayerCountsWeightsAndBias) {
  Rng rng(0);
  ClassifierHead head(4, 2, rng);
  ParamList p;
  head.collect(p, "head");
  EXPECT_EQ(count_params(p), 10u);
}

TEST(Forward, DefaultModelShapes) {
  Model m(ModelConfig{});
  Rng rng(1);
  NoGradGuard guard;
  ForwardTrace trace;
  const Tensor logits = m.forward(random_tensor({2, 3, 300, 25}, rng, 1, false), &trace);
  EXPECT_EQ(logits.shape(), (Shape{2, 60}));
  EXPECT_EQ(trace.features.shape(), (Shape{2, 256, 75, 25}));
  EXPECT_EQ(trace.attention.size(), 6u);
  EXPECT_EQ(trace.attention.front().block, 4u);
  EXPECT_EQ(trace.attention.front().per_grain.size(), 3u);
}

TEST(Forward, SingleStrideHalvesTime) {
  ModelConfig c = small_config();
  c.stride_layers = {4};
  Model m(c);
  Rng rng(2);
  NoGradGuard guard;
  ForwardTrace trace;
  m.forward(random_tensor({1, 3, 300, 25}, rng, 1, false), &trace);
  EXPECT_EQ(trace.features.dim(2), 150u);
}

TEST(Forward, WrongJointCountIsShapeError) {
  Model m(small_config());
  EXPECT_THROW(m.forward(Tensor::zeros({1, 3, 8, 18})), ShapeError);
  EXPECT_THROW(m.forward(Tensor::zeros({1, 2, 8, 25})), ShapeError);
}

TEST(Init, SameSeedGivesIdenticalParameters) {
  const Model a(small_config(7)), b(small_config(7)), c(small_config(8));
  const auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  bool differs = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].name, pb[i].name);
    EXPECT_EQ(pa[i].tensor.values(), pb[i].tensor.values()) << pa[i].name;
    differs |= pa[i].tensor.values() != pc[i].tensor.values();
  }
  EXPECT_TRUE(differs);
}

TEST(Ablation, ZeroFusionMatchesModelWithoutMcf) {
  Rng rng(3);
  const Tensor x = random_tensor({2, 3, 16, 25}, rng, 1, false);
  Model full(small_config(4));
  warm_up(full, x);
  Model reduced(ablate(small_config(4), Ablation::mcf));
  reduced.set_training(false);
  copy_matching_state(full, reduced);
  for (std::size_t i = 1; i <= Model::kBlocks; ++i)
    if (auto* mcf = full.block(i).mcf()) zero(mcf->fusion());
  NoGradGuard guard;
  EXPECT_LT(oracle::max_abs_diff(full.forward(x), reduced.forward(x)), 1e-10);
}

TEST(Ablation, ZeroRecoverMatchesModelWithoutMcf) {
  Rng rng(5);
  const Tensor x = random_tensor({2, 3, 16, 25}, rng, 1, false);
  Model full(small_config(6));
  warm_up(full, x);
  Model reduced(ablate(small_config(6), Ablation::mcf));
  reduced.set_training(false);
  copy_matching_state(full, reduced);
  for (std::size_t i = 1; i <= Model::kBlocks; ++i)
    if (auto* mcf = full.block(i).mcf()) zero(mcf->recover().weight());
  NoGradGuard guard;
  EXPECT_LT(oracle::max_abs_diff(full.forward(x), reduced.forward(x)), 1e-10);
}

TEST(Ablation, ZeroMaskMatchesFixedTopology) {
  Rng rng(7);
  const Tensor x = random_tensor({2, 3, 16, 25}, rng, 1, false);
  Model full(small_config(8));
  warm_up(full, x);
  Model fixed(ablate(small_config(8), Ablation::mask));
  fixed.set_training(false);
  copy_matching_state(full, fixed);
  zero(full.stem().scn().mask());
  for (std::size_t i = 1; i <= Model::kBlocks; ++i) zero(full.block(i).scn().mask());
  NoGradGuard guard;
  EXPECT_LT(oracle::max_abs_diff(full.forward(x), fixed.forward(x)), 1e-10);
}

TEST(Ablation, EveryVariantBuildsAndRuns) {
  const ModelConfig base = small_config(9);
  ModelConfig plain = ablate(ablate(ablate(base, Ablation::mcf), Ablation::tdf), Ablation::mask);
  ModelConfig with_mask = ablate(ablate(base, Ablation::mcf), Ablation::tdf);
  ModelConfig with_tdf = ablate(base, Ablation::mcf);
  ModelConfig with_mcf = ablate(base, Ablation::tdf);
  ModelConfig motion = base;
  motion.tdf_variant = TdfVariant::motion;
  Rng rng(10);
  const Tensor x = random_tensor({1, 3, 8, 25}, rng, 1, false);
  std::size_t previous = 0;
  for (const ModelConfig& c : {plain, with_mask, with_tdf, base}) {
    Model m(c);
    const std::size_t n = count_params(m);
    EXPECT_GT(n, previous);
    previous = n;
    EXPECT_EQ(m.forward(x).shape(), (Shape{1, 5}));
  }
  EXPECT_FALSE(Model(with_tdf).has_mcf());
  EXPECT_TRUE(Model(with_mcf).has_mcf());
  EXPECT_EQ(Model(motion).forward(x).shape(), (Shape{1, 5}));
  EXPECT_EQ(parse_ablation("tdf"), Ablation::tdf);
  EXPECT_THROW(parse_ablation("scn"), ConfigError);
}

TEST(Config, InvalidValuesAreConfigErrors) {
  auto expect_bad = [](auto edit) {
    ModelConfig c = small_config();
    edit(c);
    EXPECT_THROW(Model{c}, ConfigError);
  };
  expect_bad([](ModelConfig& c) { c.channels.pop_back(); });
  expect_bad([](ModelConfig& c) { c.channels[2] = 0; });
  expect_bad([](ModelConfig& c) { c.mcf_layers.insert(10); });
  expect_bad([](ModelConfig& c) { c.stride_layers.insert(0); });
  expect_bad([](ModelConfig& c) { c.grains = 4; });
  expect_bad([](ModelConfig& c) { c.tcn_kernel = 8; });
  expect_bad([](ModelConfig& c) { c.num_classes = 0; });
  expect_bad([](ModelConfig& c) { c.alpha = 3; });
  expect_bad([](ModelConfig& c) { c.tdf_kernel = 4; });
  expect_bad([](ModelConfig& c) { c.layout = "ntu-rgbd"; });
}

TEST(Config, TextRoundTrip) {
  ModelConfig c = small_config(11);
  c.mcf_layers = {2, 9};
  c.use_tdf = true;
  c.tdf_variant = TdfVariant::motion;
  c.learnable_mask = false;
  c.stream = Stream::bone_motion;
  const ModelConfig back = ModelConfig::from(KeyValueConfig::parse_text(c.to_text(), "inline"));
  EXPECT_EQ(back.to_text(), c.to_text());
}

TEST(Loss, UniformLogitsGiveLogClassCount) {
  const Tensor logits = Tensor::zeros({3, 4});
  EXPECT_NEAR(cross_entropy_loss(logits, {0, 1, 3}).values()[0], std::log(4.0), 1e-15);
}

TEST(Loss, MatchesLogSumExp) {
  Rng rng(12);
  const Tensor logits = random_tensor({5, 7}, rng, 3, false);
  const std::vector<std::size_t> labels{0, 6, 3, 3, 1};
  double expected = 0.0;
  for (std::size_t i = 0; i < 5; ++i) {
    double mx = -INFINITY, s = 0.0;
    for (std::size_t k = 0; k < 7; ++k) mx = std::max(mx, static_cast<double>(logits.values()[i * 7 + k]));
    for (std::size_t k = 0; k < 7; ++k) s += std::exp(logits.values()[i * 7 + k] - mx);
    expected += mx + std::log(s) - logits.values()[i * 7 + labels[i]];
  }
  EXPECT_NEAR(cross_entropy_loss(logits, labels).values()[0], expected / 5.0, 1e-12);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  testutil::TempDir dir;
  ModelConfig c = micro_model_config(13);
  c.stream = Stream::bone;
  Model m(c);
  Rng rng(14);
  const Tensor x = random_tensor({2, 3, 8, 5}, rng, 1, false);
  warm_up(m, x);
  save_checkpoint(dir.file("m.ckpt"), m);
  Model back = load_checkpoint(dir.file("m.ckpt"));
  EXPECT_EQ(back.config().to_text(), m.config().to_text());
  EXPECT_EQ(back.config().stream, Stream::bone);
  const auto pa = m.parameters(), pb = back.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i].tensor.values(), pb[i].tensor.values()) << pa[i].name;
  const auto ba = m.buffers(), bb = back.buffers();
  ASSERT_EQ(ba.size(), bb.size());
  for (std::size_t i = 0; i < ba.size(); ++i) EXPECT_EQ(*ba[i].data, *bb[i].data) << ba[i].name;
  back.set_training(false);
  NoGradGuard guard;
  EXPECT_EQ(m.forward(x).values(), back.forward(x).values());
}

TEST(Checkpoint, CorruptFilesAreDataErrors) {
  testutil::TempDir dir;
  Model m(micro_model_config(15));
  save_checkpoint(dir.file("m.ckpt"), m);
  const std::string bytes = testutil::read_bytes(dir.file("m.ckpt"));
  {
    std::ofstream os(dir.file("short.ckpt"), std::ios::binary);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  EXPECT_THROW(load_checkpoint(dir.file("short.ckpt")), DataError);
  {
    std::ofstream os(dir.file("magic.ckpt"), std::ios::binary);
    os << "NOTACKPT" << bytes.substr(8);
  }
  EXPECT_THROW(load_checkpoint(dir.file("magic.ckpt")), DataError);
  EXPECT_THROW(load_checkpoint(dir.file("absent.ckpt")), DataError);
}
