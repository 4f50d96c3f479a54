#pragma once

// Cost of one contrastive loss evaluation (forward + backward) with all
// labelled positions as anchors versus the balanced, capped sample.

#include <chrono>
#include <random>
#include <vector>

#include "mscl/losses.hpp"

namespace mscl {

struct BenchShape {
  std::int64_t batch = 2;
  std::int64_t height = 64;
  std::int64_t width = 64;
  std::int32_t classes = 2;
};

struct BenchOptions {
  std::int64_t a_max = 2048;
  std::int64_t dim = 16;
  double tau = 0.1;
  // Dense mode is skipped above this many anchor pairs.
  std::int64_t dense_pair_ceiling = std::int64_t{1} << 26;
  int repeats = 3;
  std::uint64_t seed = 0;
};

struct ModeCost {
  bool feasible = false;
  std::int64_t anchors = 0;
  std::int64_t pairs = 0;
  double median_ms = 0;
  std::int64_t peak_bytes = 0;
  double loss = 0;
};

struct BenchRow {
  BenchShape shape;
  ModeCost dense;
  ModeCost sampled;
};

inline std::int64_t dense_pair_count(const BenchShape& s) {
  const auto n = s.batch * s.height * s.width;
  return n * n;
}

namespace detail {

template <class F>
ModeCost measure(F&& loss_eval, int repeats) {
  ModeCost cost;
  std::vector<double> times;
  for (int r = 0; r < std::max(1, repeats); ++r) {
    auto& mem = MemoryStats::instance();
    const auto base = mem.live();
    mem.reset_peak();
    const auto t0 = std::chrono::steady_clock::now();
    cost.loss = loss_eval();
    const auto t1 = std::chrono::steady_clock::now();
    times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    cost.peak_bytes = std::max(cost.peak_bytes, mem.peak() - base);
  }
  std::sort(times.begin(), times.end());
  cost.median_ms = times[times.size() / 2];
  cost.feasible = true;
  return cost;
}

}  // namespace detail

inline BenchRow benchmark_shape(const BenchShape& shape, const BenchOptions& opt) {
  if (shape.batch < 1 || shape.height < 1 || shape.width < 1 || shape.classes < 1) {
    throw Error("benchmark: invalid shape");
  }
  BenchRow row;
  row.shape = shape;
  CounterRng rng(opt.seed, {0x62656e6368ULL, static_cast<std::uint64_t>(shape.batch),
                            static_cast<std::uint64_t>(shape.height),
                            static_cast<std::uint64_t>(shape.width)});
  LabelMap labels(shape.batch, shape.height, shape.width);
  std::uniform_int_distribution<std::int32_t> cls(0, shape.classes - 1);
  for (auto& v : labels.values) v = cls(rng);
  std::normal_distribution<double> normal;
  std::vector<double> z(static_cast<std::size_t>(shape.batch * opt.dim * shape.height * shape.width));
  for (auto& v : z) v = normal(rng);
  auto feats = Tensor::from({shape.batch, opt.dim, shape.height, shape.width}, z, true);
  const auto pool = CandidatePool::from_labels(labels, 1);

  const auto n_dense = static_cast<std::int64_t>(pool.entries.size());
  row.dense.anchors = n_dense;
  row.dense.pairs = n_dense * n_dense;
  if (row.dense.pairs <= opt.dense_pair_ceiling) {
    const auto pairs = row.dense.pairs;
    row.dense = detail::measure(
        [&] {
          feats.zero_grad();
          Tape tape;
          auto loss = info_nce(dense_anchor_set(pool, feats), opt.tau);
          backward(loss);
          return loss.item();
        },
        opt.repeats);
    row.dense.anchors = n_dense;
    row.dense.pairs = pairs;
  }

  SamplingOptions sopt;
  sopt.a_max = opt.a_max;
  std::int64_t n_sampled = 0;
  row.sampled = detail::measure(
      [&] {
        feats.zero_grad();
        Tape tape;
        SamplerRng srng(opt.seed, 0, 1);
        auto set = sample_anchor_set(pool, feats, sopt, srng);
        n_sampled = set.size();
        auto loss = info_nce(set, opt.tau);
        backward(loss);
        return loss.item();
      },
      opt.repeats);
  row.sampled.anchors = n_sampled;
  row.sampled.pairs = n_sampled * n_sampled;
  return row;
}

inline std::vector<BenchRow> benchmark_sampling(const std::vector<BenchShape>& shapes,
                                                const BenchOptions& opt) {
  std::vector<BenchRow> rows;
  for (const auto& s : shapes) rows.push_back(benchmark_shape(s, opt));
  return rows;
}

}  // namespace mscl
