#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "mscl/label_map.hpp"

namespace mscl {

// Rows: ground truth, columns: prediction.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::int32_t n_classes) : n_(n_classes) {
    if (n_classes < 1) throw Error("confusion matrix needs n_classes >= 1");
    counts_.assign(static_cast<std::size_t>(n_) * n_, 0);
  }

  void add(const LabelMap& pred, const LabelMap& gt) {
    if (pred.batch != gt.batch || pred.height != gt.height || pred.width != gt.width) {
      throw ShapeError("miou: prediction " + shape_str({pred.batch, pred.height, pred.width}) +
                       " vs ground truth " + shape_str({gt.batch, gt.height, gt.width}));
    }
    for (std::size_t i = 0; i < gt.values.size(); ++i) {
      const auto g = gt.values[i];
      if (gt.ignored(g)) continue;
      const auto p = pred.values[i];
      if (g < 0 || g >= n_ || p < 0 || p >= n_) {
        throw Error("miou: label outside [0, " + std::to_string(n_) + ")");
      }
      ++counts_[static_cast<std::size_t>(g) * n_ + p];
    }
  }

  std::int32_t classes() const { return n_; }
  std::int64_t at(std::int32_t gt, std::int32_t pred) const {
    return counts_[static_cast<std::size_t>(gt) * n_ + pred];
  }

 private:
  std::int32_t n_;
  std::vector<std::int64_t> counts_;
};

struct IoUReport {
  // NaN for classes absent from both prediction and ground truth.
  std::vector<double> per_class;
  double mean = std::numeric_limits<double>::quiet_NaN();
  std::optional<double> subgroup_mean;
};

// IoU_c = TP / (TP + FP + FN); the mean skips classes with an empty union.
inline IoUReport iou_report(const ConfusionMatrix& cm, std::span<const std::int32_t> subgroup = {}) {
  IoUReport r;
  const auto n = cm.classes();
  r.per_class.assign(static_cast<std::size_t>(n), std::numeric_limits<double>::quiet_NaN());
  double sum = 0;
  int present = 0;
  for (std::int32_t c = 0; c < n; ++c) {
    std::int64_t tp = cm.at(c, c), fp = 0, fn = 0;
    for (std::int32_t o = 0; o < n; ++o) {
      if (o == c) continue;
      fp += cm.at(o, c);
      fn += cm.at(c, o);
    }
    const auto uni = tp + fp + fn;
    if (uni == 0) continue;
    r.per_class[c] = static_cast<double>(tp) / static_cast<double>(uni);
    sum += r.per_class[c];
    ++present;
  }
  if (present > 0) r.mean = sum / present;
  if (!subgroup.empty()) {
    double s = 0;
    int k = 0;
    for (auto c : subgroup) {
      if (c < 0 || c >= n) throw Error("miou: subgroup class " + std::to_string(c) + " out of range");
      if (std::isnan(r.per_class[c])) continue;
      s += r.per_class[c];
      ++k;
    }
    if (k > 0) r.subgroup_mean = s / k;
  }
  return r;
}

inline IoUReport miou(const LabelMap& pred, const LabelMap& gt, std::int32_t n_classes,
                      std::span<const std::int32_t> subgroup = {}) {
  if (n_classes < 1) throw Error("miou: n_classes must be >= 1");
  ConfusionMatrix cm(n_classes);
  cm.add(pred, gt);
  return iou_report(cm, subgroup);
}

// Mean intra-class over mean inter-class pairwise cosine distance (1 - cos)
// of row embeddings [n, d]. Smaller means tighter, better separated classes.
inline double separation_ratio(std::span<const double> embeddings, std::int64_t dim,
                               std::span<const std::int32_t> classes) {
  const auto n = static_cast<std::int64_t>(classes.size());
  if (dim < 1 || static_cast<std::int64_t>(embeddings.size()) != n * dim) {
    throw ShapeError("separation_ratio: embeddings do not match class list");
  }
  std::vector<double> norms(n);
  for (std::int64_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::int64_t k = 0; k < dim; ++k) s += embeddings[i * dim + k] * embeddings[i * dim + k];
    norms[i] = std::max(std::sqrt(s), 1e-12);
  }
  double intra = 0, inter = 0;
  std::int64_t n_intra = 0, n_inter = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = i + 1; j < n; ++j) {
      double dot = 0;
      for (std::int64_t k = 0; k < dim; ++k) dot += embeddings[i * dim + k] * embeddings[j * dim + k];
      const double dist = 1.0 - dot / (norms[i] * norms[j]);
      if (classes[i] == classes[j]) {
        intra += dist;
        ++n_intra;
      } else {
        inter += dist;
        ++n_inter;
      }
    }
  }
  if (n_intra == 0 || n_inter == 0) {
    throw Error("separation_ratio: needs at least two classes and one same-class pair");
  }
  return (intra / static_cast<double>(n_intra)) / (inter / static_cast<double>(n_inter));
}

}  // namespace mscl
