#pragma once

// Finite-difference check of the contrastive terms through the full network
// on small random instances.

#include <spdlog/spdlog.h>

#include <chrono>
#include <random>
#include <string>
#include <vector>

#include "mscl/gradcheck.hpp"
#include "mscl/pyramid.hpp"
#include "mscl/segnet.hpp"

namespace mscl {

struct GradSuiteOptions {
  int instances = 5;
  std::int64_t batch = 2;
  std::int64_t image_size = 64;  // 16 x 16 at stride 4
  std::int32_t classes = 3;
  std::int64_t coords_per_tensor = 3;
  std::uint64_t seed = 0;
  GradCheckOptions check;
};

struct GradSuiteEntry {
  int instance = 0;
  std::string term;
  GradCheckResult result;
};

struct GradSuiteResult {
  std::vector<GradSuiteEntry> entries;
  double seconds = 0;
  double max_rel_error = 0;
  bool passed = true;
};

// Blocky random labels: 8 x 8 cells of one class each.
inline LabelMap random_block_labels(std::int64_t B, std::int64_t H, std::int64_t W,
                                    std::int32_t classes, CounterRng& rng) {
  LabelMap labels(B, H, W);
  std::uniform_int_distribution<std::int32_t> cls(0, classes - 1);
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t r0 = 0; r0 < H; r0 += 8) {
      for (std::int64_t c0 = 0; c0 < W; c0 += 8) {
        const auto v = cls(rng);
        for (auto r = r0; r < std::min(r0 + 8, H); ++r) {
          for (auto c = c0; c < std::min(c0 + 8, W); ++c) labels.at(b, r, c) = v;
        }
      }
    }
  }
  return labels;
}

inline GradSuiteResult run_gradient_suite(const GradSuiteOptions& opt = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  // Coarse scales of random labels often lack positives; that warning would
  // repeat for every perturbed evaluation.
  struct QuietLog {
    spdlog::level::level_enum saved = spdlog::get_level();
    QuietLog() { spdlog::set_level(spdlog::level::err); }
    ~QuietLog() { spdlog::set_level(saved); }
  } quiet;
  GradSuiteResult suite;
  ModelSpec spec;
  spec.channels = {4, 4, 4, 4};
  spec.neck_channels = 4;
  spec.num_classes = opt.classes;
  spec.embedding_dim = 8;
  LossConfig cfg;
  cfg.a_max = 64;

  for (int inst = 0; inst < opt.instances; ++inst) {
    const auto seed = opt.seed + static_cast<std::uint64_t>(inst);
    CounterRng rng(seed, {0x6772616473ULL});
    const auto H = opt.image_size, W = opt.image_size;
    const auto labels = random_block_labels(opt.batch, H, W, opt.classes, rng);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<double> px(static_cast<std::size_t>(opt.batch * 3 * H * W));
    for (auto& v : px) v = unit(rng);
    const auto image = Tensor::from({opt.batch, 3, H, W}, px);
    SegNet model(spec, LossPosition::backbone, seed);
    const auto strides = cfg.active_strides();
    const auto pyramid = build_pyramid(labels, strides);

    auto sets_of = [&](const SegNet::Output& out) {
      AnchorSets sets;
      SamplingOptions sopt;
      sopt.a_max = cfg.a_max;
      for (int s : strides) {
        SamplerRng srng(seed, 0, s);
        sets.emplace(s, sample_anchor_set(CandidatePool::from_labels(pyramid.at(s), s),
                                          model.embed(out, s, true), sopt, srng));
      }
      return sets;
    };
    const std::vector<std::pair<std::string, std::function<Tensor()>>> terms{
        {"info_nce",
         [&] {
           auto out = model.forward(image, true);
           return info_nce(sets_of(out).at(4), cfg.tau);
         }},
        {"multi_scale", [&] { return multi_scale_loss(sets_of(model.forward(image, true)), cfg); }},
        {"cross_scale", [&] { return cross_scale_loss(sets_of(model.forward(image, true)), cfg); }},
        {"total",
         [&] {
           auto out = model.forward(image, true);
           auto ce = softmax_cross_entropy(out.logits, labels);
           return total_loss(ce, sets_of(out), cfg);
         }},
    };
    for (const auto& [name, fn] : terms) {
      auto check = opt.check;
      check.max_coords_per_tensor = opt.coords_per_tensor;
      check.seed = seed;
      auto res = check_gradients(fn, model.parameters(), check);
      suite.max_rel_error = std::max(suite.max_rel_error, res.max_rel_error);
      suite.passed = suite.passed && res.passed;
      suite.entries.push_back({inst, name, std::move(res)});
    }
  }
  suite.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return suite;
}

}  // namespace mscl
