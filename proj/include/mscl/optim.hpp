#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "mscl/config.hpp"
#include "mscl/tensor.hpp"

namespace mscl {

// lr_t = lr * (1 - t / T)^power
inline double poly_lr(double base, std::int64_t step, std::int64_t total, double power) {
  if (total <= 0) return base;
  const double frac = 1.0 - static_cast<double>(std::min(step, total)) / static_cast<double>(total);
  return base * std::pow(frac, power);
}

// SGD with heavy-ball momentum and L2 weight decay on weight tensors (rank >= 2):
//   v = mu * v + (g + wd * p);  p -= lr * v
class Sgd {
 public:
  Sgd(std::vector<NamedTensor> params, const OptimizerSpec& spec)
      : params_(std::move(params)), spec_(spec) {
    for (const auto& p : params_) {
      velocity_.emplace(p.name, std::vector<double>(static_cast<std::size_t>(p.tensor.numel()), 0.0));
    }
  }

  void step(double lr) {
    for (auto& p : params_) {
      auto& v = velocity_.at(p.name);
      auto w = p.tensor.mutable_data();
      const bool decay = p.tensor.rank() >= 2 && spec_.weight_decay > 0;
      const auto g = p.tensor.grad();
      for (std::size_t i = 0; i < w.size(); ++i) {
        double gi = g.empty() ? 0.0 : g[i];
        if (decay) gi += spec_.weight_decay * w[i];
        v[i] = spec_.momentum * v[i] + gi;
        w[i] -= lr * v[i];
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  const std::vector<NamedTensor>& params() const { return params_; }
  std::map<std::string, std::vector<double>>& velocity() { return velocity_; }
  const std::map<std::string, std::vector<double>>& velocity() const { return velocity_; }

 private:
  std::vector<NamedTensor> params_;
  OptimizerSpec spec_;
  std::map<std::string, std::vector<double>> velocity_;
};

}  // namespace mscl
