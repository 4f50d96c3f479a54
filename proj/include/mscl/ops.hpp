#pragma once

// Differentiable primitives. Every op computes its forward value eagerly and,
// when recorded, attaches an exact analytic backward closure.

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mscl/label_map.hpp"
#include "mscl/tensor.hpp"

namespace mscl {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

// (batch, row, col) address of one spatial position.
struct Pixel {
  std::int32_t batch = 0;
  std::int32_t row = 0;
  std::int32_t col = 0;
  auto operator<=>(const Pixel&) const = default;
};

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* op,
                         const char* operand) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": " + operand + " must have rank " +
                     std::to_string(rank) + ", got " + shape_str(t.shape()));
  }
}

inline ConstMatrixMap cmap(std::span<const double> d, std::int64_t rows, std::int64_t cols) {
  return ConstMatrixMap(d.data(), rows, cols);
}
inline MatrixMap map(double* d, std::int64_t rows, std::int64_t cols) {
  return MatrixMap(d, rows, cols);
}

// Source index for cell-center nearest-neighbour subsampling.
inline std::int64_t cell_center(std::int64_t i, std::int64_t stride, std::int64_t extent) {
  const double pos = (static_cast<double>(i) + 0.5) * static_cast<double>(stride) - 0.5;
  return std::clamp<std::int64_t>(std::lround(pos), 0, extent - 1);
}

struct LinearTaps {
  std::vector<std::int64_t> lo, hi;
  std::vector<double> w_hi;
};

// Half-pixel-centre bilinear taps mapping `out` samples onto `in` samples.
inline LinearTaps linear_taps(std::int64_t in, std::int64_t out) {
  LinearTaps t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.w_hi.resize(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::int64_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    auto lo = static_cast<std::int64_t>(std::floor(src));
    lo = std::min(lo, in - 1);
    t.lo[i] = lo;
    t.hi[i] = std::min(lo + 1, in - 1);
    t.w_hi[i] = src - static_cast<double>(lo);
  }
  return t;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reductions

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  auto out = make_result(a.shape(), {a, b}, "add");
  auto o = out.mutable_data();
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  if (recording(out)) {
    out.node().backward = [](Node& n) {
      accumulate(*n.parents[0], n.grad);
      accumulate(*n.parents[1], n.grad);
    };
  }
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  auto out = make_result(a.shape(), {a, b}, "sub");
  auto o = out.mutable_data();
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] - y[i];
  if (recording(out)) {
    out.node().backward = [](Node& n) {
      accumulate(*n.parents[0], n.grad);
      if (n.parents[1]->requires_grad) {
        auto& g = n.parents[1]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
      }
    };
  }
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  auto out = make_result(a.shape(), {a, b}, "mul");
  auto o = out.mutable_data();
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
  if (recording(out)) {
    out.node().backward = [](Node& n) {
      Node& pa = *n.parents[0];
      Node& pb = *n.parents[1];
      if (pa.requires_grad) {
        auto& g = pa.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * pb.data[i];
      }
      if (pb.requires_grad) {
        auto& g = pb.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * pa.data[i];
      }
    };
  }
  return out;
}

inline Tensor scale(const Tensor& a, double factor) {
  auto out = make_result(a.shape(), {a}, "scale");
  auto o = out.mutable_data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * factor;
  if (recording(out)) {
    out.node().backward = [factor](Node& n) {
      auto& g = n.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * factor;
    };
  }
  return out;
}

inline Tensor sum(const Tensor& a) {
  auto out = make_result({1}, {a}, "sum");
  double s = 0;
  for (double v : a.data()) s += v;
  out.mutable_data()[0] = s;
  if (recording(out)) {
    out.node().backward = [](Node& n) {
      auto& g = n.parents[0]->ensure_grad();
      for (auto& v : g) v += n.grad[0];
    };
  }
  return out;
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

inline Tensor relu(const Tensor& a) {
  auto out = make_result(a.shape(), {a}, "relu");
  auto o = out.mutable_data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] > 0 ? x[i] : 0.0;
  if (recording(out)) {
    out.node().backward = [](Node& n) {
      Node& p = *n.parents[0];
      auto& g = p.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (p.data[i] > 0) g[i] += n.grad[i];
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra

// op(a) * op(b) with optional transposes of 2-D operands.
inline Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a = false,
                     bool transpose_b = false) {
  detail::require_rank(a, 2, "matmul", "lhs");
  detail::require_rank(b, 2, "matmul", "rhs");
  const auto ar = a.dim(0), ac = a.dim(1), br = b.dim(0), bc = b.dim(1);
  const auto m = transpose_a ? ac : ar;
  const auto k = transpose_a ? ar : ac;
  const auto k2 = transpose_b ? bc : br;
  const auto n = transpose_b ? br : bc;
  if (k != k2) {
    throw ShapeError("matmul: inner dimensions differ, lhs " + shape_str(a.shape()) +
                     (transpose_a ? "^T" : "") + " rhs " + shape_str(b.shape()) +
                     (transpose_b ? "^T" : ""));
  }
  auto out = make_result({m, n}, {a, b}, "matmul");
  auto A = detail::cmap(a.data(), ar, ac);
  auto B = detail::cmap(b.data(), br, bc);
  auto C = detail::map(out.mutable_data().data(), m, n);
  if (!transpose_a && !transpose_b) C.noalias() = A * B;
  else if (transpose_a && !transpose_b) C.noalias() = A.transpose() * B;
  else if (!transpose_a && transpose_b) C.noalias() = A * B.transpose();
  else C.noalias() = A.transpose() * B.transpose();

  if (recording(out)) {
    out.node().backward = [=](Node& node) {
      Node& pa = *node.parents[0];
      Node& pb = *node.parents[1];
      auto G = detail::cmap(node.grad, m, n);
      auto Av = detail::cmap(pa.data, ar, ac);
      auto Bv = detail::cmap(pb.data, br, bc);
      if (pa.requires_grad) {
        auto dA = detail::map(pa.ensure_grad().data(), ar, ac);
        // C = op(A) op(B); dop(A) = G op(B)^T
        if (!transpose_a) {
          if (!transpose_b) dA.noalias() += G * Bv.transpose();
          else dA.noalias() += G * Bv;
        } else {
          if (!transpose_b) dA.noalias() += Bv * G.transpose();
          else dA.noalias() += Bv.transpose() * G.transpose();
        }
      }
      if (pb.requires_grad) {
        auto dB = detail::map(pb.ensure_grad().data(), br, bc);
        // dop(B) = op(A)^T G
        if (!transpose_b) {
          if (!transpose_a) dB.noalias() += Av.transpose() * G;
          else dB.noalias() += Av * G;
        } else {
          if (!transpose_a) dB.noalias() += G.transpose() * Av;
          else dB.noalias() += G.transpose() * Av.transpose();
        }
      }
    };
  }
  return out;
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank(a, 2, "transpose", "input");
  const auto r = a.dim(0), c = a.dim(1);
  auto out = make_result({c, r}, {a}, "transpose");
  detail::map(out.mutable_data().data(), c, r) = detail::cmap(a.data(), r, c).transpose();
  if (recording(out)) {
    out.node().backward = [=](Node& n) {
      auto dA = detail::map(n.parents[0]->ensure_grad().data(), r, c);
      dA += detail::cmap(n.grad, c, r).transpose();
    };
  }
  return out;
}

// 1x1 convolution: x [B,C,H,W], weight [O,C], bias [O] (may be undefined).
inline Tensor conv1x1(const Tensor& x, const Tensor& weight, const Tensor& bias = {}) {
  detail::require_rank(x, 4, "conv1x1", "input");
  detail::require_rank(weight, 2, "conv1x1", "weight");
  const auto B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto O = weight.dim(0);
  if (weight.dim(1) != C) {
    throw ShapeError("conv1x1: input " + shape_str(x.shape()) + " has " +
                     std::to_string(C) + " channels, weight " +
                     shape_str(weight.shape()) + " expects " +
                     std::to_string(weight.dim(1)));
  }
  const bool has_bias = bias.defined();
  if (has_bias && bias.shape() != Shape{O}) {
    throw ShapeError("conv1x1: bias " + shape_str(bias.shape()) + " does not match " +
                     std::to_string(O) + " output channels");
  }
  const auto HW = H * W;
  auto out = make_result({B, O, H, W}, {x, weight, bias}, "conv1x1");
  auto Wm = detail::cmap(weight.data(), O, C);
  auto o = out.mutable_data();
  for (std::int64_t b = 0; b < B; ++b) {
    auto Y = detail::map(o.data() + b * O * HW, O, HW);
    Y.noalias() = Wm * detail::cmap(x.data().subspan(b * C * HW, C * HW), C, HW);
    if (has_bias) Y.colwise() += Eigen::Map<const Eigen::VectorXd>(bias.data().data(), O);
  }
  if (recording(out)) {
    out.node().backward = [=](Node& n) {
      Node& px = *n.parents[0];
      Node& pw = *n.parents[1];
      for (std::int64_t b = 0; b < B; ++b) {
        auto G = detail::cmap(std::span<const double>(n.grad).subspan(b * O * HW, O * HW), O, HW);
        if (pw.requires_grad) {
          auto dW = detail::map(pw.ensure_grad().data(), O, C);
          dW.noalias() += G * detail::cmap(std::span<const double>(px.data).subspan(b * C * HW, C * HW), C, HW).transpose();
        }
        if (px.requires_grad) {
          auto dX = detail::map(px.ensure_grad().data() + b * C * HW, C, HW);
          dX.noalias() += detail::cmap(pw.data, O, C).transpose() * G;
        }
        if (has_bias && n.parents[2]->requires_grad) {
          auto& db = n.parents[2]->ensure_grad();
          for (std::int64_t oc = 0; oc < O; ++oc) db[oc] += G.row(oc).sum();
        }
      }
    };
  }
  return out;
}

namespace detail {

struct ConvGeometry {
  std::int64_t C, H, W, k, stride, pad, Ho, Wo;
  std::int64_t rows() const { return C * k * k; }
  std::int64_t cols() const { return Ho * Wo; }
};

inline void im2col(const double* x, const ConvGeometry& g, double* cols) {
  const auto ncol = g.cols();
  for (std::int64_t c = 0; c < g.C; ++c) {
    for (std::int64_t ki = 0; ki < g.k; ++ki) {
      for (std::int64_t kj = 0; kj < g.k; ++kj) {
        double* row = cols + ((c * g.k + ki) * g.k + kj) * ncol;
        for (std::int64_t oh = 0; oh < g.Ho; ++oh) {
          const auto ih = oh * g.stride - g.pad + ki;
          for (std::int64_t ow = 0; ow < g.Wo; ++ow) {
            const auto iw = ow * g.stride - g.pad + kj;
            row[oh * g.Wo + ow] = (ih >= 0 && ih < g.H && iw >= 0 && iw < g.W)
                                      ? x[(c * g.H + ih) * g.W + iw]
                                      : 0.0;
          }
        }
      }
    }
  }
}

inline void col2im(const double* cols, const ConvGeometry& g, double* dx) {
  const auto ncol = g.cols();
  for (std::int64_t c = 0; c < g.C; ++c) {
    for (std::int64_t ki = 0; ki < g.k; ++ki) {
      for (std::int64_t kj = 0; kj < g.k; ++kj) {
        const double* row = cols + ((c * g.k + ki) * g.k + kj) * ncol;
        for (std::int64_t oh = 0; oh < g.Ho; ++oh) {
          const auto ih = oh * g.stride - g.pad + ki;
          if (ih < 0 || ih >= g.H) continue;
          for (std::int64_t ow = 0; ow < g.Wo; ++ow) {
            const auto iw = ow * g.stride - g.pad + kj;
            if (iw >= 0 && iw < g.W) dx[(c * g.H + ih) * g.W + iw] += row[oh * g.Wo + ow];
          }
        }
      }
    }
  }
}

}  // namespace detail

// Square-kernel convolution: x [B,C,H,W], weight [O,C,k,k], bias [O] or undefined.
inline Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
                     std::int64_t stride, std::int64_t pad) {
  detail::require_rank(x, 4, "conv2d", "input");
  detail::require_rank(weight, 4, "conv2d", "weight");
  const auto B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto O = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != C || weight.dim(3) != k) {
    throw ShapeError("conv2d: weight " + shape_str(weight.shape()) +
                     " incompatible with input " + shape_str(x.shape()));
  }
  if (stride < 1 || pad < 0) throw ShapeError("conv2d: invalid stride/padding");
  const auto Ho = (H + 2 * pad - k) / stride + 1;
  const auto Wo = (W + 2 * pad - k) / stride + 1;
  if (Ho < 1 || Wo < 1) {
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + " too small for kernel " +
                     std::to_string(k));
  }
  const bool has_bias = bias.defined();
  if (has_bias && bias.shape() != Shape{O}) {
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " does not match " +
                     std::to_string(O) + " output channels");
  }
  const detail::ConvGeometry g{C, H, W, k, stride, pad, Ho, Wo};
  auto out = make_result({B, O, Ho, Wo}, {x, weight, bias}, "conv2d");
  RowMatrix cols(g.rows(), g.cols());
  auto Wm = detail::cmap(weight.data(), O, g.rows());
  auto o = out.mutable_data();
  for (std::int64_t b = 0; b < B; ++b) {
    detail::im2col(x.data().data() + b * C * H * W, g, cols.data());
    auto Y = detail::map(o.data() + b * O * g.cols(), O, g.cols());
    Y.noalias() = Wm * cols;
    if (has_bias) Y.colwise() += Eigen::Map<const Eigen::VectorXd>(bias.data().data(), O);
  }
  if (recording(out)) {
    out.node().backward = [=](Node& n) {
      Node& px = *n.parents[0];
      Node& pw = *n.parents[1];
      RowMatrix col_buf(g.rows(), g.cols());
      RowMatrix dcols(g.rows(), g.cols());
      for (std::int64_t b = 0; b < B; ++b) {
        auto G = detail::cmap(std::span<const double>(n.grad).subspan(b * O * g.cols(), O * g.cols()),
                              O, g.cols());
        if (pw.requires_grad) {
          detail::im2col(px.data.data() + b * C * H * W, g, col_buf.data());
          auto dW = detail::map(pw.ensure_grad().data(), O, g.rows());
          dW.noalias() += G * col_buf.transpose();
        }
        if (px.requires_grad) {
          dcols.noalias() = detail::cmap(pw.data, O, g.rows()).transpose() * G;
          detail::col2im(dcols.data(), g, px.ensure_grad().data() + b * C * H * W);
        }
        if (has_bias && n.parents[2]->requires_grad) {
          auto& db = n.parents[2]->ensure_grad();
          for (std::int64_t oc = 0; oc < O; ++oc) db[oc] += G.row(oc).sum();
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalisation

// Per-channel batch normalisation over (B, H, W). Training mode uses batch
// statistics and updates the running buffers in place; eval mode uses them.
inline Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                          Tensor& running_mean, Tensor& running_var, bool training,
                          double momentum = 0.1, double eps = 1e-5) {
  detail::require_rank(x, 4, "batchnorm2d", "input");
  const auto B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  for (const Tensor* p : std::initializer_list<const Tensor*>{&gamma, &beta, &running_mean, &running_var}) {
    if (p->shape() != Shape{C}) {
      throw ShapeError("batchnorm2d: parameter " + shape_str(p->shape()) +
                       " does not match " + std::to_string(C) + " channels");
    }
  }
  if (training && B < 2) {
    throw ShapeError("batchnorm2d: training mode needs batch size >= 2, got " +
                     std::to_string(B));
  }
  const auto count = static_cast<double>(B * HW);
  std::vector<double> mu(C), inv_std(C);
  auto xd = x.data();
  if (training) {
    auto rm = running_mean.mutable_data();
    auto rv = running_var.mutable_data();
    for (std::int64_t c = 0; c < C; ++c) {
      double s = 0;
      for (std::int64_t b = 0; b < B; ++b) {
        const double* p = xd.data() + (b * C + c) * HW;
        for (std::int64_t i = 0; i < HW; ++i) s += p[i];
      }
      const double m = s / count;
      double v = 0;
      for (std::int64_t b = 0; b < B; ++b) {
        const double* p = xd.data() + (b * C + c) * HW;
        for (std::int64_t i = 0; i < HW; ++i) v += (p[i] - m) * (p[i] - m);
      }
      const double var = v / count;
      mu[c] = m;
      inv_std[c] = 1.0 / std::sqrt(var + eps);
      rm[c] = (1 - momentum) * rm[c] + momentum * m;
      const double unbiased = count > 1 ? v / (count - 1) : var;
      rv[c] = (1 - momentum) * rv[c] + momentum * unbiased;
    }
  } else {
    for (std::int64_t c = 0; c < C; ++c) {
      mu[c] = running_mean.data()[c];
      inv_std[c] = 1.0 / std::sqrt(running_var.data()[c] + eps);
    }
  }

  auto out = make_result(x.shape(), {x, gamma, beta}, "batchnorm2d");
  auto o = out.mutable_data();
  auto gd = gamma.data(), bd = beta.data();
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t c = 0; c < C; ++c) {
      const double* p = xd.data() + (b * C + c) * HW;
      double* q = o.data() + (b * C + c) * HW;
      for (std::int64_t i = 0; i < HW; ++i) q[i] = gd[c] * (p[i] - mu[c]) * inv_std[c] + bd[c];
    }
  }
  if (recording(out)) {
    out.node().backward = [=, mu = std::move(mu), inv_std = std::move(inv_std)](Node& n) {
      Node& px = *n.parents[0];
      Node& pg = *n.parents[1];
      Node& pb = *n.parents[2];
      for (std::int64_t c = 0; c < C; ++c) {
        double sum_dy = 0, sum_dy_xhat = 0;
        for (std::int64_t b = 0; b < B; ++b) {
          const double* p = px.data.data() + (b * C + c) * HW;
          const double* dy = n.grad.data() + (b * C + c) * HW;
          for (std::int64_t i = 0; i < HW; ++i) {
            sum_dy += dy[i];
            sum_dy_xhat += dy[i] * (p[i] - mu[c]) * inv_std[c];
          }
        }
        if (pg.requires_grad) pg.ensure_grad()[c] += sum_dy_xhat;
        if (pb.requires_grad) pb.ensure_grad()[c] += sum_dy;
        if (!px.requires_grad) continue;
        const double gam = pg.data[c];
        auto& dx = px.ensure_grad();
        for (std::int64_t b = 0; b < B; ++b) {
          const double* p = px.data.data() + (b * C + c) * HW;
          const double* dy = n.grad.data() + (b * C + c) * HW;
          double* d = dx.data() + (b * C + c) * HW;
          if (training) {
            for (std::int64_t i = 0; i < HW; ++i) {
              const double xhat = (p[i] - mu[c]) * inv_std[c];
              d[i] += gam * inv_std[c] * (dy[i] - sum_dy / count - xhat * sum_dy_xhat / count);
            }
          } else {
            for (std::int64_t i = 0; i < HW; ++i) d[i] += gam * inv_std[c] * dy[i];
          }
        }
      }
    };
  }
  return out;
}

// Row-wise x / max(||x||, 1e-12) for x [n, d].
inline Tensor l2_normalize_rows(const Tensor& x) {
  detail::require_rank(x, 2, "l2_normalize_rows", "input");
  constexpr double kFloor = 1e-12;
  const auto n = x.dim(0), d = x.dim(1);
  auto out = make_result(x.shape(), {x}, "l2_normalize_rows");
  std::vector<double> norms(n);
  auto xd = x.data();
  auto o = out.mutable_data();
  for (std::int64_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::int64_t j = 0; j < d; ++j) s += xd[i * d + j] * xd[i * d + j];
    norms[i] = std::max(std::sqrt(s), kFloor);
    for (std::int64_t j = 0; j < d; ++j) o[i * d + j] = xd[i * d + j] / norms[i];
  }
  if (recording(out)) {
    out.node().backward = [=, norms = std::move(norms)](Node& nd) {
      auto& g = nd.parents[0]->ensure_grad();
      for (std::int64_t i = 0; i < n; ++i) {
        const double* y = nd.data.data() + i * d;
        const double* dy = nd.grad.data() + i * d;
        double dot = 0;
        if (norms[i] > kFloor) {
          for (std::int64_t j = 0; j < d; ++j) dot += y[j] * dy[j];
        }
        for (std::int64_t j = 0; j < d; ++j) g[i * d + j] += (dy[j] - y[j] * dot) / norms[i];
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Resampling

// Bilinear resize of x [B,C,h,w] to [B,C,H,W] with half-pixel centres.
inline Tensor bilinear_upsample(const Tensor& x, std::int64_t H, std::int64_t W) {
  detail::require_rank(x, 4, "bilinear_upsample", "input");
  const auto B = x.dim(0), C = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (H < 1 || W < 1) throw ShapeError("bilinear_upsample: invalid target size");
  auto ty = detail::linear_taps(h, H);
  auto tx = detail::linear_taps(w, W);
  auto out = make_result({B, C, H, W}, {x}, "bilinear_upsample");
  auto xd = x.data();
  auto o = out.mutable_data();
  for (std::int64_t p = 0; p < B * C; ++p) {
    const double* src = xd.data() + p * h * w;
    double* dst = o.data() + p * H * W;
    for (std::int64_t i = 0; i < H; ++i) {
      const double wy = ty.w_hi[i];
      const double* r0 = src + ty.lo[i] * w;
      const double* r1 = src + ty.hi[i] * w;
      for (std::int64_t j = 0; j < W; ++j) {
        const double wx = tx.w_hi[j];
        const double top = r0[tx.lo[j]] * (1 - wx) + r0[tx.hi[j]] * wx;
        const double bot = r1[tx.lo[j]] * (1 - wx) + r1[tx.hi[j]] * wx;
        dst[i * W + j] = top * (1 - wy) + bot * wy;
      }
    }
  }
  if (recording(out)) {
    out.node().backward = [=, ty = std::move(ty), tx = std::move(tx)](Node& n) {
      auto& g = n.parents[0]->ensure_grad();
      for (std::int64_t p = 0; p < B * C; ++p) {
        double* src = g.data() + p * h * w;
        const double* dy = n.grad.data() + p * H * W;
        for (std::int64_t i = 0; i < H; ++i) {
          const double wy = ty.w_hi[i];
          double* r0 = src + ty.lo[i] * w;
          double* r1 = src + ty.hi[i] * w;
          for (std::int64_t j = 0; j < W; ++j) {
            const double wx = tx.w_hi[j];
            const double v = dy[i * W + j];
            r0[tx.lo[j]] += v * (1 - wy) * (1 - wx);
            r0[tx.hi[j]] += v * (1 - wy) * wx;
            r1[tx.lo[j]] += v * wy * (1 - wx);
            r1[tx.hi[j]] += v * wy * wx;
          }
        }
      }
    };
  }
  return out;
}

// Cell-centre nearest-neighbour subsampling of x [B,C,H,W] by `stride`.
inline Tensor nearest_downsample(const Tensor& x, std::int64_t stride) {
  detail::require_rank(x, 4, "nearest_downsample", "input");
  if (stride < 1) throw ShapeError("nearest_downsample: stride must be >= 1");
  const auto B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto h = (H + stride - 1) / stride, w = (W + stride - 1) / stride;
  std::vector<std::int64_t> src(h * w);
  for (std::int64_t i = 0; i < h; ++i) {
    for (std::int64_t j = 0; j < w; ++j) {
      src[i * w + j] = detail::cell_center(i, stride, H) * W + detail::cell_center(j, stride, W);
    }
  }
  auto out = make_result({B, C, h, w}, {x}, "nearest_downsample");
  auto xd = x.data();
  auto o = out.mutable_data();
  for (std::int64_t p = 0; p < B * C; ++p) {
    for (std::int64_t q = 0; q < h * w; ++q) o[p * h * w + q] = xd[p * H * W + src[q]];
  }
  if (recording(out)) {
    out.node().backward = [=, src = std::move(src)](Node& n) {
      auto& g = n.parents[0]->ensure_grad();
      for (std::int64_t p = 0; p < B * C; ++p) {
        for (std::int64_t q = 0; q < h * w; ++q) g[p * H * W + src[q]] += n.grad[p * h * w + q];
      }
    };
  }
  return out;
}

// Rows of x [B,C,H,W] at the given positions, as [n, C].
inline Tensor gather_positions(const Tensor& x, std::span<const Pixel> positions) {
  detail::require_rank(x, 4, "gather_positions", "input");
  const auto B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto n = static_cast<std::int64_t>(positions.size());
  if (n == 0) throw ShapeError("gather_positions: no positions");
  std::vector<std::int64_t> base(n);
  for (std::int64_t i = 0; i < n; ++i) {
    const auto& p = positions[i];
    if (p.batch < 0 || p.batch >= B || p.row < 0 || p.row >= H || p.col < 0 || p.col >= W) {
      throw ShapeError("gather_positions: position (" + std::to_string(p.batch) + "," +
                       std::to_string(p.row) + "," + std::to_string(p.col) +
                       ") outside " + shape_str(x.shape()));
    }
    base[i] = p.batch * C * H * W + p.row * W + p.col;
  }
  auto out = make_result({n, C}, {x}, "gather_positions");
  auto xd = x.data();
  auto o = out.mutable_data();
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t c = 0; c < C; ++c) o[i * C + c] = xd[base[i] + c * H * W];
  }
  if (recording(out)) {
    out.node().backward = [=, base = std::move(base)](Node& nd) {
      auto& g = nd.parents[0]->ensure_grad();
      for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t c = 0; c < C; ++c) g[base[i] + c * H * W] += nd.grad[i * C + c];
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Softmax family

// Row-wise log-sum-exp of x [n, m] -> [n].
inline Tensor logsumexp(const Tensor& x) {
  detail::require_rank(x, 2, "logsumexp", "input");
  const auto n = x.dim(0), m = x.dim(1);
  auto out = make_result({n}, {x}, "logsumexp");
  auto xd = x.data();
  auto o = out.mutable_data();
  for (std::int64_t i = 0; i < n; ++i) {
    const double* r = xd.data() + i * m;
    const double mx = *std::max_element(r, r + m);
    double s = 0;
    for (std::int64_t j = 0; j < m; ++j) s += std::exp(r[j] - mx);
    o[i] = mx + std::log(s);
  }
  if (recording(out)) {
    out.node().backward = [=](Node& nd) {
      Node& p = *nd.parents[0];
      auto& g = p.ensure_grad();
      for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = 0; j < m; ++j) {
          g[i * m + j] += nd.grad[i] * std::exp(p.data[i * m + j] - nd.data[i]);
        }
      }
    };
  }
  return out;
}

// Softmax over the channel axis of x [B,C,H,W].
inline Tensor softmax_channels(const Tensor& x) {
  detail::require_rank(x, 4, "softmax_channels", "input");
  const auto B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  auto out = make_result(x.shape(), {x}, "softmax_channels");
  auto xd = x.data();
  auto o = out.mutable_data();
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t i = 0; i < HW; ++i) {
      const auto base = b * C * HW + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::int64_t c = 0; c < C; ++c) mx = std::max(mx, xd[base + c * HW]);
      double s = 0;
      for (std::int64_t c = 0; c < C; ++c) s += (o[base + c * HW] = std::exp(xd[base + c * HW] - mx));
      for (std::int64_t c = 0; c < C; ++c) o[base + c * HW] /= s;
    }
  }
  if (recording(out)) {
    out.node().backward = [=](Node& n) {
      auto& g = n.parents[0]->ensure_grad();
      for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t i = 0; i < HW; ++i) {
          const auto base = b * C * HW + i;
          double dot = 0;
          for (std::int64_t c = 0; c < C; ++c) dot += n.grad[base + c * HW] * n.data[base + c * HW];
          for (std::int64_t c = 0; c < C; ++c) {
            g[base + c * HW] += n.data[base + c * HW] * (n.grad[base + c * HW] - dot);
          }
        }
      }
    };
  }
  return out;
}

// Mean pixel-wise cross-entropy of logits [B,C,H,W] against labels, skipping
// pixels equal to `ignore_index`.
inline Tensor softmax_cross_entropy(const Tensor& logits, const LabelMap& target,
                                    std::int32_t ignore_index = kDefaultIgnoreIndex) {
  detail::require_rank(logits, 4, "softmax_cross_entropy", "logits");
  const auto B = logits.dim(0), C = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
  if (target.batch != B || target.height != H || target.width != W) {
    throw ShapeError("softmax_cross_entropy: logits " + shape_str(logits.shape()) +
                     " vs labels " + shape_str({target.batch, target.height, target.width}));
  }
  const auto HW = H * W;
  std::int64_t count = 0;
  for (auto v : target.values) {
    if (v == ignore_index) continue;
    if (v < 0 || v >= C) {
      throw Error("softmax_cross_entropy: label " + std::to_string(v) + " outside [0, " +
                  std::to_string(C) + ")");
    }
    ++count;
  }
  if (count == 0) throw Error("softmax_cross_entropy: all pixels ignored");

  auto out = make_result({1}, {logits}, "softmax_cross_entropy");
  auto xd = logits.data();
  double total = 0;
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t i = 0; i < HW; ++i) {
      const auto y = target.values[b * HW + i];
      if (y == ignore_index) continue;
      const auto base = b * C * HW + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::int64_t c = 0; c < C; ++c) mx = std::max(mx, xd[base + c * HW]);
      double s = 0;
      for (std::int64_t c = 0; c < C; ++c) s += std::exp(xd[base + c * HW] - mx);
      total += mx + std::log(s) - xd[base + y * HW];
    }
  }
  out.mutable_data()[0] = total / static_cast<double>(count);
  if (recording(out)) {
    out.node().backward = [=, labels = target.values](Node& n) {
      Node& p = *n.parents[0];
      auto& g = p.ensure_grad();
      const double scale_factor = n.grad[0] / static_cast<double>(count);
      for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t i = 0; i < HW; ++i) {
          const auto y = labels[b * HW + i];
          if (y == ignore_index) continue;
          const auto base = b * C * HW + i;
          double mx = -std::numeric_limits<double>::infinity();
          for (std::int64_t c = 0; c < C; ++c) mx = std::max(mx, p.data[base + c * HW]);
          double s = 0;
          for (std::int64_t c = 0; c < C; ++c) s += std::exp(p.data[base + c * HW] - mx);
          for (std::int64_t c = 0; c < C; ++c) {
            const double prob = std::exp(p.data[base + c * HW] - mx) / s;
            g[base + c * HW] += scale_factor * (prob - (c == y ? 1.0 : 0.0));
          }
        }
      }
    };
  }
  return out;
}

}  // namespace mscl
