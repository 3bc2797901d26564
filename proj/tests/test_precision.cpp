#include <cmath>

#include "test_util.hpp"

namespace precision_probe {
std::vector<double> single_logits(std::uint64_t seed, const std::vector<double>& input);
std::size_t single_real_bytes();
}  // namespace precision_probe

using namespace stf;

TEST(Precision, BothBuildsLinkTogether) {
  EXPECT_EQ(sizeof(real), 8u);
  EXPECT_EQ(precision_probe::single_real_bytes(), 4u);
}

TEST(Precision, SingleAndDoubleLogitsAgree) {
  Rng rng(1);
  std::vector<double> input(2 * 3 * 16 * 5);
  for (auto& v : input) v = static_cast<double>(static_cast<float>(rng.normal()));
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    Model m(micro_model_config(seed));
    m.set_training(false);
    NoGradGuard guard;
    const Tensor ref = m.forward(Tensor::from({2, 3, 16, 5}, input));
    const std::vector<double> single = precision_probe::single_logits(seed, input);
    ASSERT_EQ(single.size(), ref.numel());
    for (std::size_t i = 0; i < single.size(); ++i) EXPECT_NEAR(single[i], ref.values()[i], 1e-4 * (1.0 + std::abs(ref.values()[i])));
  }
}
