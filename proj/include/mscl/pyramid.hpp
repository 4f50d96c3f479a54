#pragma once

#include <map>
#include <vector>

#include "mscl/label_map.hpp"
#include "mscl/ops.hpp"

namespace mscl {

// Stride -> labels at that output stride.
using LabelPyramid = std::map<int, LabelMap>;

// Nearest-neighbour label subsampling at cell centres: output (i, j) takes the
// input at round((i + 0.5) * stride - 0.5) per axis, clamped to the map. The
// ignore index is copied through like any other value.
inline LabelMap downsample_labels(const LabelMap& labels, std::int64_t stride) {
  if (stride <= 0) throw Error("downsample_labels: stride must be positive, got " + std::to_string(stride));
  if (labels.height < stride || labels.width < stride) {
    throw ShapeError("downsample_labels: " + std::to_string(labels.height) + "x" +
                     std::to_string(labels.width) + " map smaller than stride " +
                     std::to_string(stride));
  }
  const auto h = (labels.height + stride - 1) / stride;
  const auto w = (labels.width + stride - 1) / stride;
  LabelMap out(labels.batch, h, w, 0, labels.ignore_index);
  std::vector<std::int64_t> cols(w);
  for (std::int64_t j = 0; j < w; ++j) cols[j] = detail::cell_center(j, stride, labels.width);
  for (std::int64_t b = 0; b < labels.batch; ++b) {
    for (std::int64_t i = 0; i < h; ++i) {
      const auto r = detail::cell_center(i, stride, labels.height);
      for (std::int64_t j = 0; j < w; ++j) out.at(b, i, j) = labels.at(b, r, cols[j]);
    }
  }
  return out;
}

inline LabelPyramid build_pyramid(const LabelMap& labels, const std::vector<int>& strides) {
  if (strides.empty()) throw Error("build_pyramid: no strides given");
  if (!std::is_sorted(strides.begin(), strides.end()) ||
      std::adjacent_find(strides.begin(), strides.end()) != strides.end()) {
    throw Error("build_pyramid: strides must be strictly ascending");
  }
  LabelPyramid pyramid;
  for (int s : strides) pyramid.emplace(s, downsample_labels(labels, s));
  return pyramid;
}

}  // namespace mscl
