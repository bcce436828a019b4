#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "spf/tensor.hpp"

namespace spf {

// Central-difference verification of reverse-mode gradients. Runs in 64-bit
// only; 32-bit finite differences are too noisy to certify anything.
//
// Returns max over all entries of all inputs of
//   |analytic - central| / max(1, |central|).
inline double grad_check(const std::function<Tensor<double>()>& f, const std::vector<Tensor<double>>& inputs,
                         double step = 1e-5) {
  for (const auto& t : inputs)
    check(t.requires_grad(), "grad_check: all probed inputs must require grad");

  std::vector<std::vector<double>> analytic;
  {
    for (const auto& t : inputs) const_cast<Tensor<double>&>(t).zero_grad();
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    Tensor<double> loss = f();
    check(loss.numel() == 1, "grad_check: f must produce a scalar, got " + shape_str(loss.shape()));
    tape.backward(loss);
    for (const auto& t : inputs) {
      auto g = t.storage()->grad;
      if (g.empty()) g.assign(std::size_t(t.numel()), 0.0);
      analytic.push_back(std::move(g));
    }
  }

  double max_rel = 0.0;
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    Tensor<double> t = inputs[ti];
    for (std::int64_t i = 0; i < t.numel(); ++i) {
      const double saved = t.data()[i];
      t.data()[i] = saved + step;
      const double fp = f().item();
      t.data()[i] = saved - step;
      const double fm = f().item();
      t.data()[i] = saved;
      const double numeric = (fp - fm) / (2.0 * step);
      const double a = analytic[ti][std::size_t(i)];
      if (!std::isfinite(numeric) || !std::isfinite(a))
        throw std::runtime_error("grad_check: non-finite value at input " + std::to_string(ti) + " entry " +
                                 std::to_string(i) + " (analytic=" + std::to_string(a) +
                                 ", numeric=" + std::to_string(numeric) + ")");
      const double rel = std::abs(a - numeric) / std::max(1.0, std::abs(numeric));
      if (rel > max_rel) max_rel = rel;
    }
  }
  return max_rel;
}

}  // namespace spf
