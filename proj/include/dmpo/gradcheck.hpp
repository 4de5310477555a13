#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "dmpo/ops.hpp"

namespace dmpo {

// Central-difference check of tape gradients.
//
// f rebuilds the forward pass from the given input tensors and returns a
// scalar. The tape gradient of every input is compared against
// (f(x+h) - f(x-h)) / 2h elementwise; the worst relative error is returned,
// with the denominator floored at 1e-8 to keep near-zero gradients honest.
inline double finite_difference_gradcheck(const std::function<Tensor()>& f,
                                          const std::vector<Tensor>& inputs,
                                          double step = 1e-5) {
  if (step < 1e-7 || step > 1e-3)
    throw ConfigError("gradcheck step must lie in [1e-7, 1e-3], got " + std::to_string(step));

  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    Tensor out = f();
    if (out.numel() != 1)
      throw DimError("gradcheck: f must return a scalar, got " + shape_str(out.shape()));
    if (!std::isfinite(out.item()))
      throw NumericError("gradcheck: f evaluated to a non-finite value");
    tape.backward(out);
    for (const auto& in : inputs) {
      if (in.has_grad())
        analytic.push_back(in.node()->grad);
      else
        analytic.emplace_back(in.value().size(), 0.0);
    }
  }

  double worst = 0.0;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    Tensor in = inputs[t];
    auto& data = in.value();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + step;
      const double up = f().item();
      data[i] = saved - step;
      const double down = f().item();
      data[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down))
        throw NumericError("gradcheck: f evaluated to a non-finite value during perturbation");
      const double fd = (up - down) / (2.0 * step);
      const double g = analytic[t][i];
      const double denom = std::max({std::fabs(fd), std::fabs(g), 1e-8});
      worst = std::max(worst, std::fabs(fd - g) / denom);
    }
  }
  return worst;
}

}  // namespace dmpo
