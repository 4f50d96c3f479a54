#pragma once

// Toy multi-scale segmentation network: a plain 8-conv encoder with outputs
// at strides 4/8/16/32, a top-down FPN neck, per-scale 1x1 classifiers whose
// upsampled logits are summed, and one projector per stride.

#include <array>
#include <map>

#include "mscl/layers.hpp"
#include "mscl/losses.hpp"
#include "mscl/projector.hpp"

namespace mscl {

inline constexpr std::array<int, 4> kStrides{4, 8, 16, 32};

struct ModelSpec {
  std::int64_t in_channels = 3;
  std::array<std::int64_t, 4> channels{32, 64, 96, 128};
  std::int64_t neck_channels = 64;
  std::int32_t num_classes = 5;
  std::int64_t embedding_dim = 256;

  bool operator==(const ModelSpec&) const = default;

  void validate() const {
    if (in_channels < 1 || neck_channels < 1 || embedding_dim < 1) {
      throw ConfigError("model widths must be positive");
    }
    for (auto c : channels) {
      if (c < 1) throw ConfigError("encoder channels must be positive");
    }
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  }
};

// Stride -> [B, C_s, ceil(H/s), ceil(W/s)].
using FeaturePyramid = std::map<int, Tensor>;

struct EncoderParams {
  // Two convs per stage; the first conv of each stage (and both of stage 0)
  // halve the resolution.
  std::array<ConvBnRelu, 8> convs;

  EncoderParams() = default;
  EncoderParams(const ModelSpec& spec, CounterRng& rng) {
    const auto& ch = spec.channels;
    convs[0] = ConvBnRelu(spec.in_channels, ch[0], 3, 2, rng);
    convs[1] = ConvBnRelu(ch[0], ch[0], 3, 2, rng);
    for (std::size_t s = 1; s < 4; ++s) {
      convs[2 * s] = ConvBnRelu(ch[s - 1], ch[s], 3, 2, rng);
      convs[2 * s + 1] = ConvBnRelu(ch[s], ch[s], 3, 1, rng);
    }
  }

  void visit(const std::string& prefix, const StateVisitor& f) {
    for (std::size_t i = 0; i < convs.size(); ++i) convs[i].visit(prefix + ".conv" + std::to_string(i), f);
  }
};

inline FeaturePyramid encode(const Tensor& image, EncoderParams& params, bool training) {
  detail::require_rank(image, 4, "encode", "image");
  const auto H = image.dim(2), W = image.dim(3);
  if (H % 32 != 0 || W % 32 != 0) {
    throw ShapeError("encode: input " + std::to_string(H) + "x" + std::to_string(W) +
                     " is not divisible by 32");
  }
  FeaturePyramid out;
  auto x = params.convs[1](params.convs[0](image, training), training);
  out[4] = x;
  for (std::size_t s = 1; s < 4; ++s) {
    x = params.convs[2 * s + 1](params.convs[2 * s](x, training), training);
    out[kStrides[s]] = x;
  }
  return out;
}

struct NeckParams {
  std::array<Conv1x1, 4> lateral;

  NeckParams() = default;
  NeckParams(const ModelSpec& spec, CounterRng& rng) {
    for (std::size_t s = 0; s < 4; ++s) lateral[s] = Conv1x1(spec.channels[s], spec.neck_channels, rng);
  }

  void visit(const std::string& prefix, const StateVisitor& f) {
    for (std::size_t s = 0; s < 4; ++s) lateral[s].visit(prefix + ".lateral" + std::to_string(kStrides[s]), f);
  }
};

inline const Tensor& feature_at(const FeaturePyramid& features, int stride) {
  auto it = features.find(stride);
  if (it == features.end()) throw ShapeError("missing feature map for stride " + std::to_string(stride));
  return it->second;
}

// Top-down fusion: P_32 = L_32, P_s = L_s + up(P_{2s}).
inline FeaturePyramid fuse_neck(const FeaturePyramid& features, NeckParams& params) {
  FeaturePyramid out;
  Tensor above;
  for (int s = 3; s >= 0; --s) {
    const auto& f = feature_at(features, kStrides[s]);
    auto lat = params.lateral[s](f);
    out[kStrides[s]] = above.defined() ? add(lat, bilinear_upsample(above, f.dim(2), f.dim(3))) : lat;
    above = out[kStrides[s]];
  }
  return out;
}

struct SegHeadParams {
  std::array<Conv1x1, 4> classifier;

  SegHeadParams() = default;
  SegHeadParams(const ModelSpec& spec, CounterRng& rng) {
    for (auto& c : classifier) c = Conv1x1(spec.neck_channels, spec.num_classes, rng);
  }

  void visit(const std::string& prefix, const StateVisitor& f) {
    for (std::size_t s = 0; s < 4; ++s) classifier[s].visit(prefix + ".cls" + std::to_string(kStrides[s]), f);
  }
};

// Sum over scales of bilinearly upsampled per-scale class logits: [B, N_c, H, W].
inline Tensor segment_logits(const FeaturePyramid& features, SegHeadParams& params,
                             std::int64_t H, std::int64_t W) {
  Tensor total;
  for (std::size_t s = 0; s < 4; ++s) {
    auto logits = bilinear_upsample(params.classifier[s](feature_at(features, kStrides[s])), H, W);
    total = total.defined() ? add(total, logits) : logits;
  }
  return total;
}

// Per-pixel class probabilities.
inline Tensor segment(const FeaturePyramid& features, SegHeadParams& params, std::int64_t H,
                      std::int64_t W) {
  return softmax_channels(segment_logits(features, params, H, W));
}

// Per-pixel argmax over channels of [B, C, H, W].
inline LabelMap argmax_labels(const Tensor& scores) {
  detail::require_rank(scores, 4, "argmax_labels", "scores");
  const auto B = scores.dim(0), C = scores.dim(1), H = scores.dim(2), W = scores.dim(3);
  LabelMap out(B, H, W);
  auto d = scores.data();
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t i = 0; i < H * W; ++i) {
      std::int32_t best = 0;
      for (std::int64_t c = 1; c < C; ++c) {
        if (d[(b * C + c) * H * W + i] > d[(b * C + best) * H * W + i]) best = static_cast<std::int32_t>(c);
      }
      out.values[b * H * W + i] = best;
    }
  }
  return out;
}

class SegNet {
 public:
  struct Output {
    FeaturePyramid backbone;
    FeaturePyramid neck;
    Tensor logits;
  };

  SegNet(const ModelSpec& spec, LossPosition position, std::uint64_t seed)
      : spec_(spec), position_(position) {
    spec.validate();
    CounterRng rng(seed, {0x6d6f64656cULL});
    encoder_ = EncoderParams(spec, rng);
    neck_ = NeckParams(spec, rng);
    head_ = SegHeadParams(spec, rng);
    for (std::size_t s = 0; s < 4; ++s) {
      const auto in = position == LossPosition::backbone ? spec.channels[s] : spec.neck_channels;
      projectors_.emplace(kStrides[s], ProjectorParams(in, spec.embedding_dim, rng));
    }
  }

  const ModelSpec& spec() const { return spec_; }
  LossPosition position() const { return position_; }
  EncoderParams& encoder() { return encoder_; }
  NeckParams& neck() { return neck_; }
  SegHeadParams& head() { return head_; }
  ProjectorParams& projector(int stride) {
    auto it = projectors_.find(stride);
    if (it == projectors_.end()) throw Error("no projector for stride " + std::to_string(stride));
    return it->second;
  }

  Output forward(const Tensor& image, bool training) {
    Output out;
    out.backbone = encode(image, encoder_, training);
    out.neck = fuse_neck(out.backbone, neck_);
    out.logits = segment_logits(out.neck, head_, image.dim(2), image.dim(3));
    return out;
  }

  // Projected embeddings Z_s of the features selected by the loss position.
  Tensor embed(const Output& out, int stride, bool training) {
    const auto& src = position_ == LossPosition::backbone ? out.backbone : out.neck;
    return project(feature_at(src, stride), projector(stride), training);
  }

  void visit(const StateVisitor& f) {
    encoder_.visit("encoder", f);
    neck_.visit("neck", f);
    head_.visit("head", f);
    for (auto& [s, p] : projectors_) p.visit("proj" + std::to_string(s), f);
  }

  std::vector<NamedTensor> parameters() {
    std::vector<NamedTensor> out;
    visit([&](const std::string& name, Tensor& t, bool trainable) {
      if (trainable) out.push_back({name, t});
    });
    return out;
  }

 private:
  ModelSpec spec_;
  LossPosition position_;
  EncoderParams encoder_;
  NeckParams neck_;
  SegHeadParams head_;
  std::map<int, ProjectorParams> projectors_;
};

}  // namespace mscl
