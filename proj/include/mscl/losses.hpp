#pragma once

// Supervised InfoNCE over anchor sets, and its multi-scale, cross-scale and
// total-objective compositions.

#include <spdlog/spdlog.h>

#include <cmath>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mscl/ops.hpp"
#include "mscl/sampler.hpp"

namespace mscl {

class ConfigError : public Error {
 public:
  using Error::Error;
};

// No anchor has a positive partner; the term is undefined.
class NoPositivePairs : public Error {
 public:
  using Error::Error;
};

enum class LossPosition { backbone, neck };

struct CrossPair {
  int fine = 4;
  int coarse = 32;
  double weight = 1.0;
  bool operator==(const CrossPair&) const = default;
};

struct LossConfig {
  double tau = 0.1;
  std::map<int, double> scale_weights{{4, 1.0}, {8, 0.7}, {16, 0.4}, {32, 0.1}};
  std::vector<CrossPair> cross_pairs{{4, 32, 1.0}, {4, 16, 1.0}};
  double lambda_cms = 0.1;
  double lambda_ccs = 0.1;
  std::int64_t a_max = 2048;
  bool normalize_embeddings = true;
  LossPosition loss_position = LossPosition::backbone;

  bool operator==(const LossConfig&) const = default;

  void validate() const {
    if (!(tau > 0)) throw ConfigError("tau must be positive");
    if (a_max < 1) throw ConfigError("a_max must be >= 1");
    if (lambda_cms < 0 || lambda_ccs < 0) throw ConfigError("loss weights must be >= 0");
    for (const auto& [s, w] : scale_weights) {
      if (s < 1) throw ConfigError("scale stride must be >= 1");
      if (w < 0) throw ConfigError("scale weight for stride " + std::to_string(s) + " is negative");
    }
    for (const auto& p : cross_pairs) {
      if (p.weight < 0) throw ConfigError("cross-scale pair weight is negative");
      if (!scale_weights.contains(p.fine) || !scale_weights.contains(p.coarse)) {
        throw ConfigError("cross-scale pair (" + std::to_string(p.fine) + "," +
                          std::to_string(p.coarse) + ") references an unconfigured stride");
      }
    }
  }

  // Strides whose anchor sets the enabled terms need.
  std::vector<int> active_strides() const {
    std::vector<int> out;
    auto add = [&](int s) {
      if (std::find(out.begin(), out.end(), s) == out.end()) out.push_back(s);
    };
    if (lambda_cms > 0) {
      for (const auto& [s, w] : scale_weights) {
        if (w > 0) add(s);
      }
    }
    if (lambda_ccs > 0) {
      for (const auto& p : cross_pairs) {
        if (p.weight > 0) {
          add(p.fine);
          add(p.coarse);
        }
      }
    }
    std::sort(out.begin(), out.end());
    return out;
  }
};

using AnchorSets = std::map<int, AnchorSet>;

namespace detail {

inline double softplus(double u) {
  if (u == -std::numeric_limits<double>::infinity()) return 0.0;
  return u > 0 ? u + std::log1p(std::exp(-u)) : std::log1p(std::exp(u));
}

inline double sigmoid(double u) {
  if (u >= 0) return 1.0 / (1.0 + std::exp(-u));
  const double e = std::exp(u);
  return e / (1.0 + e);
}

// Directed supervised InfoNCE on raw similarities sim [n, m]. Row i's
// positives are the columns of its class, negatives the columns of other
// classes; column excluded[i] (if >= 0) is neither. Per positive pair:
//   -log(e^{x_ij} / (e^{x_ij} + sum_neg e^{x_in})) = softplus(lse_neg - x_ij),
// with x = sim / tau. Rows without positives are skipped; the result averages
// over the remaining rows.
inline Tensor supcon_directed(const Tensor& sim, std::span<const std::int32_t> row_cls,
                              std::span<const std::int32_t> col_cls,
                              std::vector<std::int64_t> excluded, double tau,
                              const char* no_positive_msg) {
  const auto n = sim.dim(0), m = sim.dim(1);
  const auto sd = sim.data();
  if (!all_finite(sd)) throw Error("non-finite similarity in contrastive loss");
  const double neg_inf = -std::numeric_limits<double>::infinity();

  std::vector<double> lse(n, neg_inf);
  std::vector<std::int64_t> n_pos(n, 0);
  std::vector<double> terms(n, 0.0);
  std::int64_t contributing = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double* r = sd.data() + i * m;
    double mx = neg_inf;
    for (std::int64_t j = 0; j < m; ++j) {
      if (j == excluded[i]) continue;
      if (col_cls[j] == row_cls[i]) ++n_pos[i];
      else mx = std::max(mx, r[j] / tau);
    }
    if (n_pos[i] == 0) continue;
    ++contributing;
    if (mx != neg_inf) {
      double s = 0;
      for (std::int64_t j = 0; j < m; ++j) {
        if (j != excluded[i] && col_cls[j] != row_cls[i]) s += std::exp(r[j] / tau - mx);
      }
      lse[i] = mx + std::log(s);
    }
    double acc = 0;
    for (std::int64_t j = 0; j < m; ++j) {
      if (j != excluded[i] && col_cls[j] == row_cls[i]) acc += softplus(lse[i] - r[j] / tau);
    }
    terms[i] = acc / static_cast<double>(n_pos[i]);
  }
  if (contributing == 0) throw NoPositivePairs(no_positive_msg);

  auto out = make_result({1}, {sim}, "supcon");
  double total = 0;
  for (double t : terms) total += t;
  out.mutable_data()[0] = total / static_cast<double>(contributing);

  if (recording(out)) {
    out.node().backward = [=, rc = std::vector<std::int32_t>(row_cls.begin(), row_cls.end()),
                           cc = std::vector<std::int32_t>(col_cls.begin(), col_cls.end()),
                           excluded = std::move(excluded), lse = std::move(lse),
                           n_pos = std::move(n_pos)](Node& node) {
      Node& ps = *node.parents[0];
      auto& g = ps.ensure_grad();
      for (std::int64_t i = 0; i < n; ++i) {
        if (n_pos[i] == 0) continue;
        const double coef = node.grad[0] / (static_cast<double>(contributing) *
                                            static_cast<double>(n_pos[i]) * tau);
        const double* r = ps.data.data() + i * m;
        double* gr = g.data() + i * m;
        double sig_sum = 0;
        for (std::int64_t j = 0; j < m; ++j) {
          if (j == excluded[i] || cc[j] != rc[i]) continue;
          const double s = sigmoid(lse[i] - r[j] / tau);
          sig_sum += s;
          gr[j] -= coef * s;
        }
        if (lse[i] == -std::numeric_limits<double>::infinity()) continue;
        for (std::int64_t j = 0; j < m; ++j) {
          if (j == excluded[i] || cc[j] == rc[i]) continue;
          gr[j] += coef * sig_sum * std::exp(r[j] / tau - lse[i]);
        }
      }
    };
  }
  return out;
}

}  // namespace detail

// Within-set supervised InfoNCE. An anchor is never its own positive.
inline Tensor info_nce(const AnchorSet& anchors, double tau) {
  if (anchors.size() < 2) {
    throw NoPositivePairs("no positive pairs: anchor set has " +
                          std::to_string(anchors.size()) + " anchor(s)");
  }
  auto sim = matmul(anchors.embeddings, anchors.embeddings, false, true);
  std::vector<std::int64_t> excluded(static_cast<std::size_t>(anchors.size()));
  std::iota(excluded.begin(), excluded.end(), 0);
  return detail::supcon_directed(sim, anchors.class_ids, anchors.class_ids,
                                 std::move(excluded), tau, "no positive pairs");
}

// Cross-set InfoNCE: positives and negatives of an anchor in one set come from
// the other set. Symmetrised as the mean of both directions so gradients reach
// both sets. Pairs with identical (stride, provenance) are excluded.
inline Tensor info_nce_cross(const AnchorSet& a, const AnchorSet& b, double tau) {
  if (a.size() == 0 || b.size() == 0) throw Error("info_nce_cross: empty anchor set");
  std::vector<std::int64_t> excl_ab(static_cast<std::size_t>(a.size()), -1);
  std::vector<std::int64_t> excl_ba(static_cast<std::size_t>(b.size()), -1);
  if (a.stride == b.stride) {
    std::map<Pixel, std::int64_t> where;
    for (std::int64_t j = 0; j < b.size(); ++j) where.emplace(b.provenance[j], j);
    for (std::int64_t i = 0; i < a.size(); ++i) {
      auto it = where.find(a.provenance[i]);
      if (it != where.end()) {
        excl_ab[i] = it->second;
        excl_ba[it->second] = i;
      }
    }
  }
  auto sim = matmul(a.embeddings, b.embeddings, false, true);
  constexpr const char* kMsg = "no cross-scale positives";
  auto ab = detail::supcon_directed(sim, a.class_ids, b.class_ids, std::move(excl_ab), tau, kMsg);
  auto ba = detail::supcon_directed(transpose(sim), b.class_ids, a.class_ids,
                                    std::move(excl_ba), tau, kMsg);
  return scale(add(ab, ba), 0.5);
}

// sum_s w_s * info_nce(A_s), strides in ascending order. Scales without
// positive pairs contribute zero with a warning.
inline Tensor multi_scale_loss(const AnchorSets& sets, const LossConfig& cfg) {
  Tensor total;
  bool configured = false;
  for (const auto& [stride, w] : cfg.scale_weights) {
    if (w <= 0) continue;
    configured = true;
    auto it = sets.find(stride);
    if (it == sets.end()) {
      throw ConfigError("multi_scale_loss: no anchor set for stride " + std::to_string(stride));
    }
    try {
      auto term = scale(info_nce(it->second, cfg.tau), w);
      total = total.defined() ? add(total, term) : term;
    } catch (const NoPositivePairs& e) {
      spdlog::warn("stride {}: {}; term contributes 0", stride, e.what());
    }
  }
  if (!configured) return Tensor::scalar(0.0);
  if (!total.defined()) throw NoPositivePairs("multi_scale_loss: every scale is degenerate");
  return total;
}

// sum over configured pairs of w_{s,s'} * info_nce_cross(A_s, A_s').
inline Tensor cross_scale_loss(const AnchorSets& sets, const LossConfig& cfg) {
  Tensor total;
  for (const auto& p : cfg.cross_pairs) {
    auto a = sets.find(p.fine);
    auto b = sets.find(p.coarse);
    if (a == sets.end() || b == sets.end()) {
      throw ConfigError("cross_scale_loss: pair (" + std::to_string(p.fine) + "," +
                        std::to_string(p.coarse) + ") has no anchor set");
    }
    if (p.weight <= 0) continue;
    try {
      auto term = scale(info_nce_cross(a->second, b->second, cfg.tau), p.weight);
      total = total.defined() ? add(total, term) : term;
    } catch (const NoPositivePairs& e) {
      spdlog::warn("pair ({},{}): {}; term contributes 0", p.fine, p.coarse, e.what());
    }
  }
  return total.defined() ? total : Tensor::scalar(0.0);
}

struct LossBreakdown {
  Tensor ce;
  Tensor cms;
  Tensor ccs;
  Tensor total;
};

// ce + lambda_cms * cms + lambda_ccs * ccs; zero-weighted terms are left out.
inline Tensor combine_losses(const Tensor& ce, const Tensor& cms, const Tensor& ccs,
                             const LossConfig& cfg) {
  auto total = ce;
  if (cfg.lambda_cms > 0) total = add(total, scale(cms, cfg.lambda_cms));
  if (cfg.lambda_ccs > 0) total = add(total, scale(ccs, cfg.lambda_ccs));
  return total;
}

// A term whose lambda is zero is not evaluated and reported as 0.
inline LossBreakdown compute_losses(const Tensor& ce, const AnchorSets& sets,
                                    const LossConfig& cfg) {
  if (!std::isfinite(ce.item())) throw Error("cross-entropy term is not finite");
  LossBreakdown out;
  out.ce = ce;
  out.cms = cfg.lambda_cms > 0 ? multi_scale_loss(sets, cfg) : Tensor::scalar(0.0);
  out.ccs = cfg.lambda_ccs > 0 ? cross_scale_loss(sets, cfg) : Tensor::scalar(0.0);
  out.total = combine_losses(ce, out.cms, out.ccs, cfg);
  return out;
}

inline Tensor total_loss(const Tensor& ce, const AnchorSets& sets, const LossConfig& cfg) {
  return compute_losses(ce, sets, cfg).total;
}

}  // namespace mscl
