#include <gtest/gtest.h>

#include <cmath>

#include "mscl/gradsuite.hpp"
#include "mscl/metrics.hpp"
#include "mscl/pyramid.hpp"
#include "mscl/sampler.hpp"
#include "mscl/segnet.hpp"
#include "mscl/synthetic.hpp"
#include "test_util.hpp"

using namespace mscl;

namespace {

ModelSpec tiny_spec() {
  ModelSpec spec;
  spec.channels = {4, 6, 6, 8};
  spec.neck_channels = 4;
  spec.num_classes = 3;
  spec.embedding_dim = 8;
  return spec;
}

LabelMap make_labels(std::vector<std::int32_t> v, std::int64_t h, std::int64_t w) {
  LabelMap m(1, h, w);
  m.values = std::move(v);
  return m;
}

// IoU per class from an explicitly tallied confusion matrix.
std::vector<double> oracle_iou(const LabelMap& pred, const LabelMap& gt, int n) {
  std::vector<std::vector<long>> cm(n, std::vector<long>(n, 0));
  for (std::size_t i = 0; i < gt.values.size(); ++i) cm[gt.values[i]][pred.values[i]]++;
  std::vector<double> out(n, std::nan(""));
  for (int c = 0; c < n; ++c) {
    long row = 0, col = 0;
    for (int o = 0; o < n; ++o) {
      row += cm[c][o];
      col += cm[o][c];
    }
    const long uni = row + col - cm[c][c];
    if (uni > 0) out[c] = static_cast<double>(cm[c][c]) / static_cast<double>(uni);
  }
  return out;
}

}  // namespace

TEST(Encoder, PyramidShapes) {
  SegNet net(ModelSpec{}, LossPosition::backbone, 0);
  auto out = net.forward(testutil::randn({2, 3, 64, 64}, 1, false), true);
  const std::array<std::int64_t, 4> ch{32, 64, 96, 128};
  for (std::size_t s = 0; s < 4; ++s) {
    const auto& f = feature_at(out.backbone, kStrides[s]);
    EXPECT_EQ(f.shape(), (Shape{2, ch[s], 64 / kStrides[s], 64 / kStrides[s]}));
    EXPECT_EQ(feature_at(out.neck, kStrides[s]).dim(1), 64);
  }
  EXPECT_EQ(out.logits.shape(), (Shape{2, 5, 64, 64}));
}

TEST(Encoder, ZeroImageAndZeroWeightsGiveZeroFeatures) {
  CounterRng rng(2, {0});
  EncoderParams p(ModelSpec{}, rng);
  for (auto& c : p.convs) {
    auto w = c.weight.mutable_data();
    std::fill(w.begin(), w.end(), 0.0);
  }
  auto f = encode(Tensor::zeros({2, 3, 32, 32}), p, true);
  for (const auto& [s, t] : f) {
    for (double v : t.data()) EXPECT_EQ(v, 0.0) << "stride " << s;
  }
}

TEST(Encoder, IndivisibleInputIsAnError) {
  SegNet net(tiny_spec(), LossPosition::backbone, 3);
  try {
    net.forward(Tensor::zeros({2, 3, 48, 64}), true);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("divisible by 32"), std::string::npos);
  }
}

TEST(Encoder, GradientsThroughEncoderNeckAndHeads) {
  GradSuiteOptions opt;
  opt.instances = 1;
  opt.seed = 11;
  auto res = run_gradient_suite(opt);
  ASSERT_FALSE(res.entries.empty());
  for (const auto& e : res.entries) {
    EXPECT_TRUE(e.result.passed) << e.term << " " << e.result.max_rel_error << " at " << e.result.worst;
  }
  EXPECT_LE(res.max_rel_error, 1e-4);
}

TEST(Head, ZeroClassifiersGiveUniformProbabilities) {
  SegNet net(tiny_spec(), LossPosition::neck, 4);
  for (auto& c : net.head().classifier) {
    auto w = c.weight.mutable_data();
    std::fill(w.begin(), w.end(), 0.0);
    auto b = c.bias.mutable_data();
    std::fill(b.begin(), b.end(), 0.0);
  }
  auto out = net.forward(testutil::randn({2, 3, 32, 32}, 5, false), true);
  auto p = softmax_channels(out.logits);
  for (double v : p.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-12);
}

TEST(Head, ProbabilitiesSumToOne) {
  SegNet net(tiny_spec(), LossPosition::backbone, 6);
  auto x = testutil::randn({2, 3, 32, 32}, 7, false);
  auto feats = fuse_neck(encode(x, net.encoder(), true), net.neck());
  auto p = segment(feats, net.head(), 32, 32);
  ASSERT_EQ(p.shape(), (Shape{2, 3, 32, 32}));
  auto d = p.data();
  for (std::int64_t b = 0; b < 2; ++b) {
    for (std::int64_t i = 0; i < 32 * 32; ++i) {
      double s = 0;
      for (std::int64_t c = 0; c < 3; ++c) {
        const double v = d[(b * 3 + c) * 1024 + i];
        EXPECT_GE(v, 0.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(Head, ArgmaxMatchesScan) {
  auto scores = testutil::randn({2, 4, 3, 5}, 8, false);
  auto labels = argmax_labels(scores);
  auto d = scores.data();
  for (std::int64_t b = 0; b < 2; ++b) {
    for (std::int64_t i = 0; i < 15; ++i) {
      double best = -1e300;
      std::int32_t arg = -1;
      for (std::int32_t c = 0; c < 4; ++c) {
        if (d[(b * 4 + c) * 15 + i] > best) {
          best = d[(b * 4 + c) * 15 + i];
          arg = c;
        }
      }
      EXPECT_EQ(labels.values[b * 15 + i], arg);
    }
  }
}

TEST(Head, MissingScaleIsAnError) {
  SegNet net(tiny_spec(), LossPosition::backbone, 9);
  auto feats = fuse_neck(encode(testutil::randn({2, 3, 32, 32}, 10, false), net.encoder(), true), net.neck());
  feats.erase(16);
  EXPECT_THROW(segment(feats, net.head(), 32, 32), Error);
}

TEST(Synthetic, NoShapesMeansAllBackground) {
  SceneSpec spec;
  spec.min_shapes = 0;
  spec.max_shapes = 0;
  spec.rare_fraction = 0;
  auto ds = generate_split(spec, 1, 5, 0);
  for (auto v : ds.labels.values) EXPECT_EQ(v, 0);
}

TEST(Synthetic, SeededGenerationIsDeterministic) {
  SceneSpec spec;
  auto a = generate_split(spec, 3, 8, 0);
  auto b = generate_split(spec, 3, 8, 0);
  EXPECT_EQ(a.images, b.images);
  EXPECT_EQ(a.labels, b.labels);
  auto c = generate_split(spec, 4, 8, 0);
  EXPECT_NE(a.images, c.images);
  auto d = generate_split(spec, 3, 8, 1);
  EXPECT_NE(a.labels, d.labels);
}

TEST(Synthetic, RareClassFrequency) {
  SceneSpec spec;
  auto ds = generate_split(spec, 5, 200, 0);
  int with_rare = 0;
  for (std::int64_t i = 0; i < ds.size; ++i) with_rare += ds.contains_class(i, spec.rare_class) ? 1 : 0;
  EXPECT_NEAR(with_rare, 20, 1);
}

TEST(Synthetic, LabelsAgreeWithDrawnColours) {
  SceneSpec spec;
  spec.noise_sigma = 0;
  spec.color_jitter = 0;
  auto ds = generate_split(spec, 6, 20, 0);
  const auto plane = spec.height * spec.width;
  for (std::int64_t n = 0; n < ds.size; ++n) {
    for (std::int64_t i = 0; i < plane; ++i) {
      const auto cls = ds.labels.values[n * plane + i];
      ASSERT_GE(cls, 0);
      ASSERT_LT(cls, spec.num_classes);
      const double* px = ds.images.data() + n * 3 * plane + i;
      if (cls == 0) {
        EXPECT_EQ(px[0], px[plane]);
        EXPECT_EQ(px[0], px[2 * plane]);
      } else {
        const auto style = detail::class_style(cls, spec);
        for (int ch = 0; ch < 3; ++ch) EXPECT_DOUBLE_EQ(px[ch * plane], style.color[ch]);
      }
    }
  }
}

TEST(Synthetic, InfeasibleSpecIsAnError) {
  SceneSpec spec;
  spec.max_size = 100;
  EXPECT_THROW(generate_split(spec, 0, 4, 0), Error);
  spec = SceneSpec{};
  spec.rare_class = 7;
  EXPECT_THROW(generate_split(spec, 0, 4, 0), Error);
  spec = SceneSpec{};
  EXPECT_THROW(generate_split(spec, 0, 0, 0), Error);
}

TEST(Miou, IdenticalMapsScoreOne) {
  auto gt = make_labels({0, 1, 2, 2, 1, 0}, 2, 3);
  EXPECT_DOUBLE_EQ(miou(gt, gt, 3).mean, 1.0);
}

TEST(Miou, DisjointPredictionsScoreZero) {
  auto gt = make_labels({0, 0, 0, 0}, 2, 2);
  auto pred = make_labels({1, 1, 1, 1}, 2, 2);
  auto r = miou(pred, gt, 2);
  EXPECT_DOUBLE_EQ(r.mean, 0.0);
}

TEST(Miou, HalfOverlapExample) {
  auto gt = make_labels({0, 0, 1, 1}, 2, 2);
  auto pred = make_labels({0, 1, 1, 0}, 2, 2);
  auto r = miou(pred, gt, 2);
  auto o = oracle_iou(pred, gt, 2);
  EXPECT_DOUBLE_EQ(r.per_class[0], 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(r.per_class[1], o[1]);
  EXPECT_DOUBLE_EQ(r.mean, 1.0 / 3.0);
}

TEST(Miou, MatchesConfusionOracleAndSkipsAbsentClasses) {
  std::mt19937_64 rng(12);
  std::uniform_int_distribution<std::int32_t> cls(0, 3);
  LabelMap gt(1, 8, 8), pred(1, 8, 8);
  for (auto& v : gt.values) v = cls(rng);
  for (auto& v : pred.values) v = cls(rng);
  auto r = miou(pred, gt, 5);
  auto o = oracle_iou(pred, gt, 5);
  double s = 0;
  for (int c = 0; c < 4; ++c) {
    EXPECT_DOUBLE_EQ(r.per_class[c], o[c]);
    s += o[c];
  }
  EXPECT_TRUE(std::isnan(r.per_class[4]));
  EXPECT_NEAR(r.mean, s / 4, 1e-15);
  const std::vector<std::int32_t> group{1, 4};
  auto g = miou(pred, gt, 5, group);
  ASSERT_TRUE(g.subgroup_mean.has_value());
  EXPECT_DOUBLE_EQ(*g.subgroup_mean, o[1]);
}

TEST(Miou, IgnoredPixelsDoNotCount) {
  auto gt = make_labels({0, kDefaultIgnoreIndex, 1, 1}, 2, 2);
  auto pred = make_labels({0, 1, 1, 1}, 2, 2);
  EXPECT_DOUBLE_EQ(miou(pred, gt, 2).mean, 1.0);
}

TEST(Miou, Errors) {
  auto gt = make_labels({0, 1}, 1, 2);
  EXPECT_THROW(miou(gt, gt, 0), Error);
  EXPECT_THROW(miou(make_labels({0, 1, 1}, 1, 3), gt, 2), Error);
  const std::vector<std::int32_t> bad{5};
  EXPECT_THROW(miou(gt, gt, 2, bad), Error);
}

TEST(SegNet, EveryParameterReceivesGradient) {
  for (auto position : {LossPosition::backbone, LossPosition::neck}) {
    SegNet net(tiny_spec(), position, 13);
    CounterRng rng(14, {0});
    auto labels = random_block_labels(2, 64, 64, 3, rng);
    auto x = testutil::randn({2, 3, 64, 64}, 15, false);
    auto params = net.parameters();
    for (auto& p : params) p.tensor.zero_grad();
    {
      Tape tape;
      auto out = net.forward(x, true);
      auto ce = softmax_cross_entropy(out.logits, labels);
      LossConfig cfg;
      auto pyramid = build_pyramid(labels, cfg.active_strides());
      AnchorSets sets;
      for (int s : cfg.active_strides()) {
        auto pool = CandidatePool::from_labels(pyramid.at(s), s);
        SamplerRng srng(0, 0, s);
        sets.emplace(s, sample_anchor_set(pool, net.embed(out, s, true), {}, srng));
      }
      backward(compute_losses(ce, sets, cfg).total);
    }
    for (auto& p : params) {
      const auto g = p.tensor.grad();
      ASSERT_FALSE(g.empty()) << p.name;
      EXPECT_TRUE(std::any_of(g.begin(), g.end(), [](double v) { return v != 0; })) << p.name;
    }
  }
}

TEST(SegNet, SeedDeterminesInitialisation) {
  SegNet a(tiny_spec(), LossPosition::backbone, 16);
  SegNet b(tiny_spec(), LossPosition::backbone, 16);
  SegNet c(tiny_spec(), LossPosition::backbone, 17);
  auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  bool differs = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].name, pb[i].name);
    EXPECT_TRUE(std::ranges::equal(pa[i].tensor.data(), pb[i].tensor.data())) << pa[i].name;
    differs = differs || !std::ranges::equal(pa[i].tensor.data(), pc[i].tensor.data());
  }
  EXPECT_TRUE(differs);
}

TEST(Metrics, SeparationRatio) {
  // Two tight, well separated clusters.
  const std::vector<double> tight{1, 0, 0.99, 0.1, 0, 1, 0.1, 0.99};
  const std::vector<std::int32_t> cls{0, 0, 1, 1};
  const double r = separation_ratio(tight, 2, cls);
  EXPECT_TRUE(std::isfinite(r));
  EXPECT_LT(r, 0.1);
  const std::vector<double> mixed{1, 0, 0, 1, 0.99, 0.1, 0.1, 0.99};
  EXPECT_GT(separation_ratio(mixed, 2, cls), 1.0);
  EXPECT_THROW(separation_ratio(tight, 2, std::vector<std::int32_t>{0, 0, 0, 0}), Error);
  EXPECT_THROW(separation_ratio(tight, 3, cls), ShapeError);
}
