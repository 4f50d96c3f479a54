#pragma once

// Synthetic shape scenes standing in for a segmentation dataset.
//
// Background is class 0. Foreground classes differ by shape and colour; the
// rare class reuses the ellipse shape of class 2 and a colour close to class
// 3 so that neither cue alone separates it.

#include <algorithm>
#include <array>
#include <random>
#include <vector>

#include "mscl/label_map.hpp"
#include "mscl/rng.hpp"
#include "mscl/tensor.hpp"

namespace mscl {

struct SceneSpec {
  std::int64_t height = 64;
  std::int64_t width = 64;
  std::int32_t num_classes = 5;
  std::int32_t min_shapes = 2;
  std::int32_t max_shapes = 5;
  std::int64_t min_size = 10;
  std::int64_t max_size = 22;
  double noise_sigma = 0.05;
  double color_jitter = 0.1;
  // Negative disables the rare class.
  std::int32_t rare_class = 4;
  double rare_fraction = 0.1;

  bool operator==(const SceneSpec&) const = default;

  bool has_rare() const { return rare_class >= 0 && rare_fraction > 0; }

  void validate() const {
    if (num_classes < 2) throw Error("scene spec: num_classes must be >= 2");
    if (height < 32 || width < 32) throw Error("scene spec: canvas must be at least 32x32");
    if (min_shapes < 0 || max_shapes < min_shapes) throw Error("scene spec: invalid shape count range");
    if (min_size < 1 || max_size < min_size) throw Error("scene spec: invalid shape size range");
    if (max_size > std::min(height, width)) {
      throw Error("scene spec: shapes of size " + std::to_string(max_size) + " do not fit a " +
                  std::to_string(height) + "x" + std::to_string(width) + " canvas");
    }
    if (noise_sigma < 0 || color_jitter < 0) throw Error("scene spec: negative noise");
    if (rare_class >= num_classes || rare_class == 0) {
      throw Error("scene spec: rare class must be a foreground class below num_classes");
    }
    if (rare_fraction < 0 || rare_fraction > 1) throw Error("scene spec: rare_fraction outside [0,1]");
    if (has_rare() && num_classes < 3) throw Error("scene spec: rare class needs another foreground class");
  }
};

struct SyntheticScene {
  std::vector<double> image;  // 3 x H x W in [0, 1]
  LabelMap labels;            // 1 x H x W
};

namespace detail {

enum class ShapeKind { rectangle, ellipse, triangle };

struct ClassStyle {
  ShapeKind kind;
  std::array<double, 3> color;
};

inline ClassStyle class_style(std::int32_t cls, const SceneSpec& spec) {
  if (spec.has_rare() && cls == spec.rare_class) return {ShapeKind::ellipse, {0.30, 0.32, 0.80}};
  switch (cls) {
    case 1: return {ShapeKind::rectangle, {0.85, 0.25, 0.20}};
    case 2: return {ShapeKind::ellipse, {0.20, 0.75, 0.30}};
    case 3: return {ShapeKind::triangle, {0.25, 0.35, 0.85}};
    default: break;
  }
  const auto h = splitmix64(static_cast<std::uint64_t>(cls));
  return {static_cast<ShapeKind>(cls % 3),
          {0.2 + 0.6 * static_cast<double>(h & 0xff) / 255.0,
           0.2 + 0.6 * static_cast<double>((h >> 8) & 0xff) / 255.0,
           0.2 + 0.6 * static_cast<double>((h >> 16) & 0xff) / 255.0}};
}

inline bool inside(ShapeKind kind, double r, double c, double top, double left, double h, double w) {
  const double u = (r + 0.5 - top) / h;  // [0,1] inside the box
  const double v = (c + 0.5 - left) / w;
  if (u < 0 || u > 1 || v < 0 || v > 1) return false;
  switch (kind) {
    case ShapeKind::rectangle: return true;
    case ShapeKind::ellipse: return (u - 0.5) * (u - 0.5) + (v - 0.5) * (v - 0.5) <= 0.25;
    case ShapeKind::triangle: return std::abs(v - 0.5) <= 0.5 * u;
  }
  return false;
}

}  // namespace detail

inline SyntheticScene generate_scene(const SceneSpec& spec, CounterRng& rng, bool with_rare) {
  spec.validate();
  if (with_rare && !spec.has_rare()) throw Error("generate_scene: rare class disabled in spec");
  const auto H = spec.height, W = spec.width;
  SyntheticScene scene;
  scene.labels = LabelMap(1, H, W, 0);
  scene.image.assign(static_cast<std::size_t>(3 * H * W), 0.0);

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> jitter(-spec.color_jitter, spec.color_jitter);
  std::normal_distribution<double> noise(0.0, spec.noise_sigma);

  const double bg = 0.3 + 0.3 * unit(rng);
  std::vector<std::array<double, 3>> color(static_cast<std::size_t>(H * W), {bg, bg, bg});

  std::vector<std::int32_t> pool;
  for (std::int32_t c = 1; c < spec.num_classes; ++c) {
    if (!(spec.has_rare() && c == spec.rare_class)) pool.push_back(c);
  }
  std::uniform_int_distribution<std::int32_t> n_shapes(spec.min_shapes, spec.max_shapes);
  std::uniform_int_distribution<std::int64_t> size(spec.min_size, spec.max_size);
  std::vector<std::int32_t> classes;
  const auto count = n_shapes(rng);
  for (std::int32_t i = 0; i < count; ++i) {
    classes.push_back(pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)]);
  }
  // Drawn last so it is never fully occluded.
  if (with_rare) classes.push_back(spec.rare_class);

  for (auto cls : classes) {
    const auto style = detail::class_style(cls, spec);
    const auto h = size(rng);
    const auto w = style.kind == detail::ShapeKind::rectangle ? size(rng) : h;
    const auto top = std::uniform_int_distribution<std::int64_t>(0, H - h)(rng);
    const auto left = std::uniform_int_distribution<std::int64_t>(0, W - w)(rng);
    std::array<double, 3> tint{};
    for (int ch = 0; ch < 3; ++ch) tint[ch] = std::clamp(style.color[ch] + jitter(rng), 0.0, 1.0);
    for (auto r = top; r < top + h; ++r) {
      for (auto c = left; c < left + w; ++c) {
        if (!detail::inside(style.kind, static_cast<double>(r), static_cast<double>(c),
                            static_cast<double>(top), static_cast<double>(left),
                            static_cast<double>(h), static_cast<double>(w))) {
          continue;
        }
        scene.labels.at(0, r, c) = cls;
        color[r * W + c] = tint;
      }
    }
  }
  for (std::int64_t i = 0; i < H * W; ++i) {
    for (int ch = 0; ch < 3; ++ch) {
      scene.image[ch * H * W + i] = std::clamp(color[i][ch] + noise(rng), 0.0, 1.0);
    }
  }
  return scene;
}

// A fixed split of N scenes, regenerable from (spec, seed, split id).
struct Dataset {
  SceneSpec spec;
  std::int64_t size = 0;
  std::vector<double> images;  // N x 3 x H x W
  LabelMap labels;             // N x H x W

  std::int64_t image_numel() const { return 3 * spec.height * spec.width; }

  Tensor batch_images(std::span<const std::int64_t> indices) const {
    const auto n = static_cast<std::int64_t>(indices.size());
    auto t = Tensor::zeros({n, 3, spec.height, spec.width});
    auto d = t.mutable_data();
    for (std::int64_t i = 0; i < n; ++i) {
      std::copy_n(images.begin() + indices[i] * image_numel(), image_numel(),
                  d.begin() + i * image_numel());
    }
    return t;
  }

  LabelMap batch_labels(std::span<const std::int64_t> indices) const {
    LabelMap out(static_cast<std::int64_t>(indices.size()), spec.height, spec.width, 0,
                 labels.ignore_index);
    for (std::size_t i = 0; i < indices.size(); ++i) {
      std::copy_n(labels.values.begin() + indices[i] * labels.plane(), labels.plane(),
                  out.values.begin() + static_cast<std::int64_t>(i) * labels.plane());
    }
    return out;
  }

  bool contains_class(std::int64_t index, std::int32_t cls) const {
    auto first = labels.values.begin() + index * labels.plane();
    return std::find(first, first + labels.plane(), cls) != first + labels.plane();
  }
};

// Exactly round(N * rare_fraction) scenes carry the rare class; which ones is
// a seeded shuffle.
inline Dataset generate_split(const SceneSpec& spec, std::uint64_t seed, std::int64_t n,
                              std::uint64_t split_id) {
  spec.validate();
  if (n < 1) throw Error("generate_split: split must contain at least one scene");
  Dataset ds;
  ds.spec = spec;
  ds.size = n;
  ds.images.resize(static_cast<std::size_t>(n * ds.image_numel()));
  ds.labels = LabelMap(n, spec.height, spec.width, 0);

  std::vector<char> rare(static_cast<std::size_t>(n), 0);
  if (spec.has_rare()) {
    const auto n_rare = static_cast<std::int64_t>(std::llround(spec.rare_fraction * static_cast<double>(n)));
    std::fill_n(rare.begin(), n_rare, 1);
    CounterRng shuffle_rng(seed, {0x72617265ULL, split_id});
    std::shuffle(rare.begin(), rare.end(), shuffle_rng);
  }
  for (std::int64_t i = 0; i < n; ++i) {
    CounterRng rng(seed, {0x7363656e65ULL, split_id, static_cast<std::uint64_t>(i)});
    auto scene = generate_scene(spec, rng, rare[i] != 0);
    std::copy(scene.image.begin(), scene.image.end(), ds.images.begin() + i * ds.image_numel());
    std::copy(scene.labels.values.begin(), scene.labels.values.end(),
              ds.labels.values.begin() + i * ds.labels.plane());
  }
  return ds;
}

}  // namespace mscl
