// Built with STF_SINGLE_PRECISION; shares a binary with the double build.
#include "stf/stf.hpp"

#include <vector>

namespace precision_probe {

std::vector<double> single_logits(std::uint64_t seed, const std::vector<double>& input) {
  stf::ModelConfig c = stf::micro_model_config(seed);
  stf::Model m(c);
  m.set_training(false);
  stf::NoGradGuard guard;
  std::vector<float> x(input.begin(), input.end());
  const stf::Tensor logits = m.forward(stf::Tensor::from({2, 3, 16, 5}, x));
  return {logits.values().begin(), logits.values().end()};
}

std::size_t single_real_bytes() { return sizeof(stf::real); }

}  // namespace precision_probe
