#pragma once

#include "mscl/layers.hpp"

namespace mscl {

// Per-scale projection head: two Conv1x1-ReLU-BN blocks (hidden width equal
// to the input width) and a final linear 1x1 map to `dim` channels.
struct ProjectorParams {
  Conv1x1 conv1;
  BatchNorm2d bn1;
  Conv1x1 conv2;
  BatchNorm2d bn2;
  Conv1x1 out;

  ProjectorParams() = default;
  ProjectorParams(std::int64_t in_channels, std::int64_t dim, CounterRng& rng)
      : conv1(in_channels, in_channels, rng), bn1(in_channels),
        conv2(in_channels, in_channels, rng), bn2(in_channels),
        out(in_channels, dim, rng) {}

  std::int64_t in_channels() const { return conv1.in_channels(); }
  std::int64_t dim() const { return out.out_channels(); }

  void visit(const std::string& prefix, const StateVisitor& f) {
    conv1.visit(prefix + ".conv1", f);
    bn1.visit(prefix + ".bn1", f);
    conv2.visit(prefix + ".conv2", f);
    bn2.visit(prefix + ".bn2", f);
    out.visit(prefix + ".out", f);
  }
};

// Maps features [B, C, h, w] to embeddings [B, dim, h, w].
inline Tensor project(const Tensor& features, ProjectorParams& params, bool training) {
  detail::require_rank(features, 4, "project", "features");
  if (features.dim(1) != params.in_channels()) {
    throw ShapeError("project: features " + shape_str(features.shape()) + " have " +
                     std::to_string(features.dim(1)) + " channels, projector expects " +
                     std::to_string(params.in_channels()));
  }
  auto h = params.bn1(relu(params.conv1(features)), training);
  h = params.bn2(relu(params.conv2(h)), training);
  return params.out(h);
}

}  // namespace mscl
