#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "stf/tensor.hpp"

namespace stf::inline STF_PRECISION_NS {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates = 0;
};

// |a - n| / max(|a|, |n|, floor). Gradients smaller than the floor are
// compared absolutely, below the reach of finite-difference roundoff.
inline constexpr double kGradFloor = 1e-6;

inline double relative_error(double analytic, double numeric, double floor = kGradFloor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

// Central finite differences of a scalar function against the gradients
// the tape produces, coordinate by coordinate over every tensor in `wrt`.
// `max_coords_per_tensor` > 0 limits the check to an evenly spaced subset.
// Coordinates whose error exceeds `retry_above` are re-measured with
// smaller steps and keep the best agreement.
inline GradCheckResult grad_check(const std::function<Tensor()>& f, std::vector<Tensor> wrt, double eps = 1e-5,
                                  std::size_t max_coords_per_tensor = 0, double retry_above = 1e-5) {
  if (!(eps >= 1e-7 && eps <= 1e-4)) throw ContractError("grad_check: eps must lie in [1e-7, 1e-4]");
  for (auto& t : wrt) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  {
    Tensor loss = f();
    if (loss.numel() != 1) throw ContractError("grad_check: function must be scalar-valued");
    if (!std::isfinite(static_cast<double>(loss.item()))) throw NumericError("grad_check: f(x) is not finite");
    backward(loss);
  }
  std::vector<std::vector<real>> analytic;
  analytic.reserve(wrt.size());
  for (auto& t : wrt) {
    auto g = t.grad();
    analytic.emplace_back(g.begin(), g.end());
  }

  GradCheckResult result;
  NoGradGuard no_grad;
  for (std::size_t ti = 0; ti < wrt.size(); ++ti) {
    auto values = wrt[ti].data();
    const std::size_t n = values.size();
    const std::size_t step =
        (max_coords_per_tensor == 0 || n <= max_coords_per_tensor) ? 1 : (n + max_coords_per_tensor - 1) / max_coords_per_tensor;
    for (std::size_t i = 0; i < n; i += step) {
      const real saved = values[i];
      auto central = [&](double h) {
        values[i] = saved + static_cast<real>(h);
        const double plus = f().item();
        values[i] = saved - static_cast<real>(h);
        const double minus = f().item();
        values[i] = saved;
        if (!std::isfinite(plus) || !std::isfinite(minus)) throw NumericError("grad_check: f(x) is not finite");
        return (plus - minus) / (2.0 * h);
      };
      double numeric = central(eps);
      double err = relative_error(analytic[ti][i], numeric);
      // A step that straddles a ReLU kink disagrees at every size above the
      // distance to the kink; a wrong derivative disagrees at all sizes.
      for (double h = eps / 4; err >= retry_above && h >= 1e-7; h /= 4) {
        const double n2 = central(h);
        const double e2 = relative_error(analytic[ti][i], n2);
        if (e2 < err) {
          err = e2;
          numeric = n2;
        }
      }
      ++result.coordinates;
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_tensor = ti;
        result.worst_index = i;
        result.analytic = analytic[ti][i];
        result.numeric = numeric;
      }
    }
  }
  return result;
}

// Single-input convenience form.
inline GradCheckResult grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double eps = 1e-5) {
  return grad_check([&] { return f(x); }, {x}, eps);
}

}  // namespace stf::inline STF_PRECISION_NS
