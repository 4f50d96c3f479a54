#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mscl/tensor.hpp"

namespace mscl {

inline constexpr std::int32_t kDefaultIgnoreIndex = 255;

// Per-pixel class ids, B x H x W row-major.
struct LabelMap {
  std::int64_t batch = 0;
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<std::int32_t> values;
  std::int32_t ignore_index = kDefaultIgnoreIndex;

  LabelMap() = default;
  LabelMap(std::int64_t b, std::int64_t h, std::int64_t w, std::int32_t fill = 0,
           std::int32_t ignore = kDefaultIgnoreIndex)
      : batch(b), height(h), width(w),
        values(static_cast<std::size_t>(b * h * w), fill), ignore_index(ignore) {
    if (b <= 0 || h <= 0 || w <= 0) {
      throw ShapeError("label map extents must be positive, got " +
                       shape_str({b, h, w}));
    }
  }

  std::int64_t size() const { return batch * height * width; }
  std::int64_t plane() const { return height * width; }

  std::int32_t& at(std::int64_t b, std::int64_t r, std::int64_t c) {
    return values[static_cast<std::size_t>((b * height + r) * width + c)];
  }
  std::int32_t at(std::int64_t b, std::int64_t r, std::int64_t c) const {
    return values[static_cast<std::size_t>((b * height + r) * width + c)];
  }
  bool ignored(std::int32_t v) const { return v == ignore_index; }

  // Throws unless every non-ignore value lies in [0, num_classes).
  void validate(std::int32_t num_classes) const {
    if (static_cast<std::int64_t>(values.size()) != size()) {
      throw ShapeError("label map holds " + std::to_string(values.size()) +
                       " values for shape " + shape_str({batch, height, width}));
    }
    for (auto v : values) {
      if (v == ignore_index) continue;
      if (v < 0 || v >= num_classes) {
        throw Error("label value " + std::to_string(v) + " outside [0, " +
                    std::to_string(num_classes) + ")");
      }
    }
  }

  // Copies images [first, first + count) into a new map.
  LabelMap slice(std::int64_t first, std::int64_t count) const {
    LabelMap out(count, height, width, 0, ignore_index);
    std::copy_n(values.begin() + first * plane(), count * plane(), out.values.begin());
    return out;
  }

  bool operator==(const LabelMap&) const = default;
};

}  // namespace mscl
