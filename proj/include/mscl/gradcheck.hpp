#pragma once

// Central finite-difference verification of tape gradients.

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "mscl/tensor.hpp"

namespace mscl {

struct GradCheckOptions {
  double eps = 1e-5;
  double rtol = 1e-4;
  // Error of an entry is |a - n| / max(|a|, |n|, atol / rtol), so gradients
  // smaller than atol / rtol are judged on absolute error atol.
  double atol = 1e-7;
  // 0 checks every coordinate; otherwise a seeded sample of this many per tensor.
  std::int64_t max_coords_per_tensor = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  bool passed = true;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::int64_t checked = 0;
  std::int64_t failures = 0;
  std::string worst;  // "<tensor name>[<flat index>]"
};

// `loss_fn` must be a pure function of the listed tensors' values: it is
// evaluated once under a tape for analytic gradients, then twice per checked
// coordinate without recording.
inline GradCheckResult check_gradients(const std::function<Tensor()>& loss_fn,
                                       std::vector<NamedTensor> inputs,
                                       const GradCheckOptions& opt = {}) {
  for (auto& in : inputs) in.tensor.zero_grad();
  {
    Tape tape;
    auto loss = loss_fn();
    backward(loss);
  }
  GradCheckResult result;
  std::mt19937_64 rng(opt.seed);
  for (auto& in : inputs) {
    auto& t = in.tensor;
    std::vector<double> analytic(static_cast<std::size_t>(t.numel()), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());

    std::vector<std::int64_t> coords;
    if (opt.max_coords_per_tensor <= 0 || t.numel() <= opt.max_coords_per_tensor) {
      coords.resize(static_cast<std::size_t>(t.numel()));
      std::iota(coords.begin(), coords.end(), 0);
    } else {
      std::uniform_int_distribution<std::int64_t> pick(0, t.numel() - 1);
      for (std::int64_t i = 0; i < opt.max_coords_per_tensor; ++i) coords.push_back(pick(rng));
    }

    auto values = t.mutable_data();
    for (auto idx : coords) {
      const double saved = values[idx];
      double plus = 0, minus = 0;
      {
        NoGradGuard guard;
        values[idx] = saved + opt.eps;
        plus = loss_fn().item();
        values[idx] = saved - opt.eps;
        minus = loss_fn().item();
      }
      values[idx] = saved;
      const double numeric = (plus - minus) / (2 * opt.eps);
      const double a = analytic[idx];
      const double abs_err = std::abs(a - numeric);
      const double denom = std::max({std::abs(a), std::abs(numeric), opt.atol / opt.rtol});
      const double rel = abs_err / denom;
      ++result.checked;
      result.max_abs_error = std::max(result.max_abs_error, abs_err);
      if (rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst = in.name + "[" + std::to_string(idx) + "]";
      }
      if (rel > opt.rtol) {
        ++result.failures;
        result.passed = false;
      }
    }
  }
  return result;
}

}  // namespace mscl
