#include <gtest/gtest.h>

#include <cmath>

#include "mscl/gradcheck.hpp"
#include "mscl/ops.hpp"
#include "test_util.hpp"

using namespace mscl;
using testutil::fd_error;
using testutil::randn;

namespace {

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

LabelMap random_labels(std::int64_t B, std::int64_t H, std::int64_t W, std::int32_t C,
                       std::uint64_t seed, double ignore_rate = 0.0) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::int32_t> cls(0, C - 1);
  std::uniform_real_distribution<double> u(0, 1);
  LabelMap m(B, H, W);
  for (auto& v : m.values) v = u(rng) < ignore_rate ? m.ignore_index : cls(rng);
  return m;
}

}  // namespace

TEST(Tensor, ShapeAndDataAgree) {
  auto t = Tensor::zeros({2, 3, 4});
  EXPECT_EQ(t.numel(), 24);
  EXPECT_EQ(numel_of(t.shape()), static_cast<std::int64_t>(t.data().size()));
  EXPECT_THROW(Tensor::from({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor::zeros({2, 0}), ShapeError);
}

TEST(Tensor, GradHasDataShape) {
  auto x = randn({3, 4}, 1);
  {
    Tape tape;
    backward(sum(mul(x, x)));
  }
  ASSERT_TRUE(x.has_grad());
  EXPECT_EQ(x.grad().size(), x.data().size());
}

TEST(Ops, ReluExample) {
  auto y = relu(Tensor::from({3}, {-1.0, 0.0, 2.0}));
  EXPECT_EQ(values(y), (std::vector<double>{0, 0, 2}));
}

TEST(Ops, CrossEntropyUniformLogitsIsLn2) {
  auto logits = Tensor::zeros({1, 2, 1, 1});
  LabelMap target(1, 1, 1, 0);
  EXPECT_NEAR(softmax_cross_entropy(logits, target).item(), std::log(2.0), 1e-12);
}

TEST(Ops, CrossEntropyAllIgnoredIsAnError) {
  auto logits = Tensor::zeros({1, 2, 2, 2});
  LabelMap target(1, 2, 2, kDefaultIgnoreIndex);
  try {
    softmax_cross_entropy(logits, target);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("all pixels ignored"), std::string::npos);
  }
}

TEST(Ops, CrossEntropyAveragesOverLabelledPixelsOnly) {
  auto logits = randn({2, 3, 2, 2}, 3, false);
  auto target = random_labels(2, 2, 2, 3, 4, 0.3);
  target.values[0] = 1;
  target.values[1] = target.ignore_index;
  double sum = 0;
  int n = 0;
  auto d = logits.data();
  for (std::int64_t b = 0; b < 2; ++b) {
    for (std::int64_t p = 0; p < 4; ++p) {
      const auto y = target.values[b * 4 + p];
      if (y == target.ignore_index) continue;
      double z = 0;
      for (int c = 0; c < 3; ++c) z += std::exp(d[(b * 3 + c) * 4 + p]);
      sum += std::log(z) - d[(b * 3 + y) * 4 + p];
      ++n;
    }
  }
  EXPECT_NEAR(softmax_cross_entropy(logits, target).item(), sum / n, 1e-12);
}

TEST(Ops, ShapeMismatchNamesBothShapes) {
  try {
    add(Tensor::zeros({2}), Tensor::zeros({3}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2]"), std::string::npos);
    EXPECT_NE(msg.find("[3]"), std::string::npos);
  }
  EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
  EXPECT_THROW(conv1x1(Tensor::zeros({1, 3, 2, 2}), Tensor::zeros({4, 2})), ShapeError);
}

TEST(Ops, Conv1x1GradientMatchesFiniteDifferences) {
  auto x = randn({2, 3, 4, 4}, 10);
  auto w = randn({5, 3}, 11);
  auto b = randn({5}, 12);
  auto probe = randn({2, 5, 4, 4}, 13, false);
  auto f = [&] { return sum(mul(conv1x1(x, w, b), probe)); };
  EXPECT_LT(fd_error(f, {x, w, b}), 1e-6);
}

TEST(Ops, PrimitiveGradients) {
  auto a = randn({3, 4}, 20);
  auto b = randn({3, 4}, 21);
  auto c = randn({4, 5}, 22);
  auto probe = randn({3, 4}, 23, false);
  EXPECT_LT(fd_error([&] { return sum(mul(add(a, b), probe)); }, {a, b}), 1e-6);
  EXPECT_LT(fd_error([&] { return sum(mul(sub(a, b), mul(a, probe))); }, {a, b}), 1e-6);
  EXPECT_LT(fd_error([&] { return sum(mul(matmul(a, c), matmul(a, c))); }, {a, c}), 1e-6);
  EXPECT_LT(fd_error([&] { return sum(mul(matmul(a, b, false, true), transpose(matmul(b, a, false, true)))); },
                     {a, b}),
            1e-6);
  EXPECT_LT(fd_error([&] { return sum(mul(matmul(a, a, true, false), randn({4, 4}, 24, false))); }, {a}),
            1e-6);
  EXPECT_LT(fd_error([&] { return mean(mul(scale(a, 3.0), a)); }, {a}), 1e-6);
  EXPECT_LT(fd_error([&] { return sum(logsumexp(mul(a, b))); }, {a, b}), 1e-6);
}

TEST(Ops, ReluGradientAwayFromKink) {
  std::vector<double> v{-2.0, -0.5, 0.5, 1.5, -1.0, 3.0};
  auto x = Tensor::from({2, 3}, v, true);
  EXPECT_LT(fd_error([&] { return sum(mul(relu(x), x)); }, {x}), 1e-6);
}

TEST(Ops, NormalisationAndResamplingGradients) {
  auto x = randn({2, 3, 4, 4}, 30);
  auto g = randn({3}, 31);
  auto be = randn({3}, 32);
  auto rm = Tensor::zeros({3});
  auto rv = Tensor::full({3}, 1.0);
  auto probe = randn({2, 3, 4, 4}, 33, false);
  EXPECT_LT(fd_error([&] { return sum(mul(batchnorm2d(x, g, be, rm, rv, true), probe)); }, {x, g, be}), 1e-5);
  EXPECT_LT(fd_error([&] { return sum(mul(batchnorm2d(x, g, be, rm, rv, false), probe)); }, {x, g, be}), 1e-6);

  auto up_probe = randn({2, 3, 7, 9}, 34, false);
  EXPECT_LT(fd_error([&] { return sum(mul(bilinear_upsample(x, 7, 9), up_probe)); }, {x}), 1e-6);
  auto down_probe = randn({2, 3, 2, 2}, 35, false);
  EXPECT_LT(fd_error([&] { return sum(mul(nearest_downsample(x, 2), down_probe)); }, {x}), 1e-6);

  auto rows = randn({5, 4}, 36);
  auto row_probe = randn({5, 4}, 37, false);
  EXPECT_LT(fd_error([&] { return sum(mul(l2_normalize_rows(rows), row_probe)); }, {rows}), 1e-6);

  EXPECT_LT(fd_error([&] { return sum(mul(softmax_channels(x), probe)); }, {x}), 1e-6);
  const std::vector<Pixel> where{{0, 1, 2}, {1, 3, 0}, {0, 1, 2}};
  auto gather_probe = randn({3, 3}, 38, false);
  EXPECT_LT(fd_error([&] { return sum(mul(gather_positions(x, where), gather_probe)); }, {x}), 1e-6);
}

TEST(Ops, Conv2dGradient) {
  auto x = randn({2, 3, 6, 6}, 40);
  auto w = randn({4, 3, 3, 3}, 41);
  auto b = randn({4}, 42);
  auto probe = randn({2, 4, 3, 3}, 43, false);
  EXPECT_LT(fd_error([&] { return sum(mul(conv2d(x, w, b, 2, 1), probe)); }, {x, w, b}), 1e-6);
}

TEST(Ops, CrossEntropyGradientWithIgnore) {
  auto logits = randn({2, 4, 3, 3}, 50);
  auto target = random_labels(2, 3, 3, 4, 51, 0.3);
  target.values[0] = 2;
  EXPECT_LT(fd_error([&] { return softmax_cross_entropy(logits, target); }, {logits}), 1e-6);
}

TEST(Ops, L2NormalizedRowsHaveUnitNorm) {
  auto x = randn({20, 7}, 60, false, 5.0);
  auto y = l2_normalize_rows(x);
  for (std::int64_t i = 0; i < 20; ++i) {
    double s = 0;
    for (std::int64_t k = 0; k < 7; ++k) s += y.data()[i * 7 + k] * y.data()[i * 7 + k];
    EXPECT_NEAR(std::sqrt(s), 1.0, 1e-12);
  }
  auto zero = l2_normalize_rows(Tensor::zeros({1, 3}));
  EXPECT_TRUE(all_finite(zero.data()));
}

TEST(Ops, BatchNormTrainingStandardisesChannels) {
  auto x = randn({3, 4, 5, 5}, 70, false, 5.0);
  auto g = Tensor::full({4}, 1.0);
  auto b = Tensor::zeros({4});
  auto rm = Tensor::zeros({4});
  auto rv = Tensor::full({4}, 1.0);
  auto y = batchnorm2d(x, g, b, rm, rv, true);
  const auto n = 3 * 25;
  for (std::int64_t c = 0; c < 4; ++c) {
    double mu = 0, var = 0;
    for (std::int64_t bi = 0; bi < 3; ++bi) {
      for (std::int64_t p = 0; p < 25; ++p) mu += y.data()[(bi * 4 + c) * 25 + p];
    }
    mu /= n;
    for (std::int64_t bi = 0; bi < 3; ++bi) {
      for (std::int64_t p = 0; p < 25; ++p) {
        const double d = y.data()[(bi * 4 + c) * 25 + p] - mu;
        var += d * d;
      }
    }
    var /= n;
    EXPECT_LT(std::abs(mu), 1e-10);
    // Biased variance of the output is var / (var + eps).
    EXPECT_NEAR(var, 1.0, 1e-6);
  }
}

TEST(Ops, BatchNormTrainingNeedsTwoSamples) {
  auto g = Tensor::full({2}, 1.0);
  auto b = Tensor::zeros({2});
  auto rm = Tensor::zeros({2});
  auto rv = Tensor::full({2}, 1.0);
  EXPECT_THROW(batchnorm2d(Tensor::zeros({1, 2, 3, 3}), g, b, rm, rv, true), ShapeError);
  EXPECT_NO_THROW(batchnorm2d(Tensor::zeros({1, 2, 3, 3}), g, b, rm, rv, false));
}

TEST(Ops, BatchNormRunningStatistics) {
  auto x = randn({2, 1, 2, 2}, 80, false);
  auto g = Tensor::full({1}, 1.0);
  auto b = Tensor::zeros({1});
  auto rm = Tensor::zeros({1});
  auto rv = Tensor::full({1}, 1.0);
  batchnorm2d(x, g, b, rm, rv, true);
  double mu = 0;
  for (double v : x.data()) mu += v;
  mu /= 8;
  double ss = 0;
  for (double v : x.data()) ss += (v - mu) * (v - mu);
  EXPECT_NEAR(rm.data()[0], 0.1 * mu, 1e-15);
  EXPECT_NEAR(rv.data()[0], 0.9 + 0.1 * ss / 7, 1e-15);
}

TEST(Ops, BilinearUpsampleOfConstantIsConstant) {
  auto y = bilinear_upsample(Tensor::full({1, 2, 3, 3}, 4.5), 8, 5);
  for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 4.5);
  auto same = randn({1, 1, 3, 4}, 81, false);
  EXPECT_EQ(values(bilinear_upsample(same, 3, 4)), values(same));
}

TEST(Backward, SquareSumExample) {
  auto x = Tensor::from({2}, {1.0, 2.0}, true);
  {
    Tape tape;
    backward(sum(mul(x, x)));
  }
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{2, 4}));
}

TEST(Backward, ConstantLossIsNoOp) {
  Tape tape;
  auto c = sum(Tensor::from({2}, {1.0, 2.0}));
  EXPECT_NO_THROW(backward(c));
  EXPECT_EQ(tape.size(), 0u);
}

TEST(Backward, NonScalarLossIsAnError) {
  auto x = randn({3}, 90);
  Tape tape;
  EXPECT_THROW(backward(mul(x, x)), ShapeError);
}

TEST(Backward, SecondBackwardOnSameTapeIsAnError) {
  auto x = randn({3}, 91);
  Tape tape;
  auto loss = sum(mul(x, x));
  backward(loss);
  EXPECT_TRUE(tape.consumed());
  EXPECT_THROW(backward(loss), Error);
}

TEST(Backward, LeafGradientsAccumulate) {
  auto x = Tensor::from({1}, {3.0}, true);
  for (int i = 0; i < 2; ++i) {
    Tape tape;
    backward(sum(mul(x, x)));
  }
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
  x.zero_grad();
  EXPECT_DOUBLE_EQ(x.grad()[0], 0.0);
}

TEST(Backward, TapeIsTopologicallyOrdered) {
  auto x = randn({2, 3}, 92);
  auto w = randn({3, 3}, 93);
  Tape tape;
  auto h = relu(matmul(x, w));
  auto loss = sum(mul(add(h, x), h));
  const auto& nodes = tape.nodes();
  ASSERT_GT(nodes.size(), 3u);
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    for (const auto& p : nodes[i]->parents) {
      if (p->leaf) continue;
      auto at = std::find(nodes.begin(), nodes.end(), p);
      ASSERT_NE(at, nodes.end());
      EXPECT_LT(static_cast<std::size_t>(at - nodes.begin()), i);
    }
  }
  backward(loss);
  EXPECT_TRUE(all_finite(x.grad()));
  EXPECT_TRUE(all_finite(w.grad()));
}

TEST(Backward, NothingRecordedWithoutGradInputsOrTape) {
  auto x = randn({2, 2}, 94);
  auto y = mul(x, x);
  EXPECT_FALSE(y.requires_grad());
  Tape tape;
  {
    NoGradGuard guard;
    auto z = mul(x, x);
    EXPECT_FALSE(z.requires_grad());
  }
  EXPECT_EQ(tape.size(), 0u);
  auto z = mul(x, x);
  EXPECT_TRUE(z.requires_grad());
  EXPECT_EQ(tape.size(), 1u);
}

TEST(GradCheck, DetectsAWrongGradient) {
  auto x = randn({4}, 95);
  // Forward value of x * x with a gradient of x instead of 2x.
  auto wrong = [&] {
    auto out = make_result({1}, {x}, "wrong");
    double s = 0;
    for (double v : x.data()) s += v * v;
    out.mutable_data()[0] = s;
    if (recording(out)) {
      out.node().backward = [](Node& n) {
        auto& p = *n.parents[0];
        auto& g = p.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[0] * p.data[i];
      };
    }
    return out;
  };
  auto bad = check_gradients(wrong, {{"x", x}});
  EXPECT_FALSE(bad.passed);
  EXPECT_NEAR(bad.max_rel_error, 0.5, 1e-6);
  auto good = check_gradients([&] { return sum(mul(x, x)); }, {{"x", x}});
  EXPECT_TRUE(good.passed);
  EXPECT_EQ(good.checked, 4);
}

TEST(Memory, TrackedBytesFollowAllocations) {
  auto& mem = MemoryStats::instance();
  const auto before = mem.live();
  mem.reset_peak();
  {
    auto t = Tensor::zeros({1000});
    EXPECT_EQ(mem.live() - before, 8000);
  }
  EXPECT_EQ(mem.live(), before);
  EXPECT_GE(mem.peak() - before, 8000);
}
