#pragma once

// Parameterised building blocks shared by the projector and the toy network.

#include <cmath>
#include <functional>
#include <random>
#include <string>

#include "mscl/ops.hpp"
#include "mscl/rng.hpp"

namespace mscl {

// Called once per state tensor; `trainable` is false for running statistics.
using StateVisitor = std::function<void(const std::string& name, Tensor& t, bool trainable)>;

// Kaiming-uniform fan-in initialisation for ReLU networks.
inline Tensor kaiming_uniform(Shape shape, std::int64_t fan_in, CounterRng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  auto t = Tensor::zeros(std::move(shape), true);
  for (auto& v : t.mutable_data()) v = dist(rng);
  return t;
}

inline Tensor uniform_bias(std::int64_t n, std::int64_t fan_in, CounterRng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  auto t = Tensor::zeros({n}, true);
  for (auto& v : t.mutable_data()) v = dist(rng);
  return t;
}

struct Conv1x1 {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out]

  Conv1x1() = default;
  Conv1x1(std::int64_t in, std::int64_t out, CounterRng& rng)
      : weight(kaiming_uniform({out, in}, in, rng)), bias(uniform_bias(out, in, rng)) {}

  std::int64_t in_channels() const { return weight.dim(1); }
  std::int64_t out_channels() const { return weight.dim(0); }
  Tensor operator()(const Tensor& x) const { return conv1x1(x, weight, bias); }

  void visit(const std::string& prefix, const StateVisitor& f) {
    f(prefix + ".weight", weight, true);
    f(prefix + ".bias", bias, true);
  }
};

struct BatchNorm2d {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  BatchNorm2d() = default;
  explicit BatchNorm2d(std::int64_t channels)
      : gamma(Tensor::full({channels}, 1.0, true)),
        beta(Tensor::zeros({channels}, true)),
        running_mean(Tensor::zeros({channels})),
        running_var(Tensor::full({channels}, 1.0)) {}

  Tensor operator()(const Tensor& x, bool training) {
    return batchnorm2d(x, gamma, beta, running_mean, running_var, training, momentum, eps);
  }

  void visit(const std::string& prefix, const StateVisitor& f) {
    f(prefix + ".gamma", gamma, true);
    f(prefix + ".beta", beta, true);
    f(prefix + ".running_mean", running_mean, false);
    f(prefix + ".running_var", running_var, false);
  }
};

// k x k convolution without bias, followed by batch norm and ReLU.
struct ConvBnRelu {
  Tensor weight;  // [out, in, k, k]
  BatchNorm2d bn;
  std::int64_t stride = 1;
  std::int64_t pad = 1;

  ConvBnRelu() = default;
  ConvBnRelu(std::int64_t in, std::int64_t out, std::int64_t k, std::int64_t stride_,
             CounterRng& rng)
      : weight(kaiming_uniform({out, in, k, k}, in * k * k, rng)), bn(out),
        stride(stride_), pad(k / 2) {}

  Tensor operator()(const Tensor& x, bool training) {
    return relu(bn(conv2d(x, weight, Tensor{}, stride, pad), training));
  }

  void visit(const std::string& prefix, const StateVisitor& f) {
    f(prefix + ".weight", weight, true);
    bn.visit(prefix + ".bn", f);
  }
};

}  // namespace mscl
