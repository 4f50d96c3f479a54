#pragma once

// Batch-level balanced anchor sampling.
//
// For each class present at a scale the sampler draws the same number of
// anchors K, where K is the pixel count of the rarest present class in the
// batch. A class's quota is split over the images that contain it, and the
// whole set is capped at a_max by shrinking the per-class quota.

#include <map>
#include <random>
#include <span>
#include <vector>

#include "mscl/label_map.hpp"
#include "mscl/ops.hpp"
#include "mscl/rng.hpp"

namespace mscl {

struct PoolEntry {
  Pixel pixel;
  std::int32_t class_id = 0;
};

// Every labelled (non-ignore) position of one scale, in row-major order.
struct CandidatePool {
  int stride = 1;
  std::int64_t batch = 0;
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<PoolEntry> entries;

  static CandidatePool from_labels(const LabelMap& labels, int stride) {
    CandidatePool pool;
    pool.stride = stride;
    pool.batch = labels.batch;
    pool.height = labels.height;
    pool.width = labels.width;
    for (std::int64_t b = 0; b < labels.batch; ++b) {
      for (std::int64_t r = 0; r < labels.height; ++r) {
        for (std::int64_t c = 0; c < labels.width; ++c) {
          const auto v = labels.at(b, r, c);
          if (labels.ignored(v)) continue;
          pool.entries.push_back({{static_cast<std::int32_t>(b), static_cast<std::int32_t>(r),
                                   static_cast<std::int32_t>(c)},
                                  v});
        }
      }
    }
    return pool;
  }

  bool empty() const { return entries.empty(); }
};

struct ClassCount {
  std::int64_t total = 0;
  std::vector<std::int64_t> per_element;  // indexed by batch element
};

using ClassCounts = std::map<std::int32_t, ClassCount>;

inline ClassCounts count_classes(const CandidatePool& pool) {
  if (pool.empty()) throw Error("no labeled positions at this scale");
  ClassCounts counts;
  for (const auto& e : pool.entries) {
    auto& cc = counts[e.class_id];
    if (cc.per_element.empty()) cc.per_element.assign(static_cast<std::size_t>(pool.batch), 0);
    ++cc.total;
    ++cc.per_element[e.pixel.batch];
  }
  return counts;
}

// Anchors per class: the rarest class's count, reduced to floor(a_max / classes)
// when the balanced set would exceed a_max.
inline std::int64_t per_class_quota(const ClassCounts& counts, std::int64_t a_max) {
  if (counts.empty()) throw Error("no labeled positions at this scale");
  const auto n_classes = static_cast<std::int64_t>(counts.size());
  if (a_max < n_classes) {
    throw Error("a_max " + std::to_string(a_max) + " is smaller than the " +
                std::to_string(n_classes) + " classes present");
  }
  std::int64_t k = std::numeric_limits<std::int64_t>::max();
  for (const auto& [cls, cc] : counts) k = std::min(k, cc.total);
  if (n_classes * k > a_max) k = a_max / n_classes;
  return k;
}

// Splits `quota` anchors of one class over batch elements. Equal floor shares
// go to every element containing the class; the remainder goes one each to
// the elements with the most pixels (lower index on ties). Shares exceeding an
// element's pixels are clipped and the deficit is handed, largest remaining
// capacity first, to elements that still have pixels left.
inline std::vector<std::int64_t> split_quota(std::span<const std::int64_t> per_element,
                                             std::int64_t quota) {
  const auto B = static_cast<std::int64_t>(per_element.size());
  std::vector<std::int64_t> share(B, 0);
  std::vector<std::int64_t> holders;
  std::int64_t available = 0;
  for (std::int64_t b = 0; b < B; ++b) {
    if (per_element[b] > 0) holders.push_back(b);
    available += per_element[b];
  }
  if (quota > available) {
    throw Error("quota " + std::to_string(quota) + " exceeds " + std::to_string(available) +
                " available positions");
  }
  if (holders.empty() || quota == 0) return share;

  const auto n = static_cast<std::int64_t>(holders.size());
  for (auto b : holders) share[b] = quota / n;
  auto by_count = holders;
  std::stable_sort(by_count.begin(), by_count.end(),
                   [&](auto a, auto b) { return per_element[a] > per_element[b]; });
  for (std::int64_t i = 0; i < quota % n; ++i) ++share[by_count[i]];

  std::int64_t deficit = 0;
  for (auto b : holders) {
    if (share[b] > per_element[b]) {
      deficit += share[b] - per_element[b];
      share[b] = per_element[b];
    }
  }
  if (deficit > 0) {
    auto by_capacity = holders;
    std::stable_sort(by_capacity.begin(), by_capacity.end(), [&](auto a, auto b) {
      return per_element[a] - share[a] > per_element[b] - share[b];
    });
    for (auto b : by_capacity) {
      const auto take = std::min(deficit, per_element[b] - share[b]);
      share[b] += take;
      deficit -= take;
      if (deficit == 0) break;
    }
  }
  return share;
}

// Independent random stream for one (training step, stride).
class SamplerRng {
 public:
  SamplerRng(std::uint64_t seed, std::uint64_t step, int stride)
      : engine_(seed, {0x616e63686f72ULL, step, static_cast<std::uint64_t>(stride)}) {}
  CounterRng& engine() { return engine_; }

 private:
  CounterRng engine_;
};

struct SamplingOptions {
  std::int64_t a_max = 2048;
  bool normalize_embeddings = true;
  // When positive, also caps the per-class quota (used for exports).
  std::int64_t max_per_class = 0;
};

// Balanced selection of pool entries, ordered by class then batch element.
inline std::vector<PoolEntry> select_anchors(const CandidatePool& pool,
                                             const SamplingOptions& opt, SamplerRng& rng) {
  const auto counts = count_classes(pool);
  auto quota = per_class_quota(counts, opt.a_max);
  if (opt.max_per_class > 0) quota = std::min(quota, opt.max_per_class);

  // Positions of each (class, element), in pool order.
  std::map<std::int32_t, std::vector<std::vector<std::int64_t>>> slots;
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(pool.entries.size()); ++i) {
    const auto& e = pool.entries[i];
    auto& per = slots[e.class_id];
    if (per.empty()) per.resize(static_cast<std::size_t>(pool.batch));
    per[e.pixel.batch].push_back(i);
  }

  std::vector<PoolEntry> chosen;
  chosen.reserve(static_cast<std::size_t>(quota) * counts.size());
  auto& engine = rng.engine();
  for (const auto& [cls, cc] : counts) {
    const auto share = split_quota(cc.per_element, quota);
    auto& per = slots[cls];
    for (std::int64_t b = 0; b < pool.batch; ++b) {
      auto& cand = per[b];
      const auto take = share[b];
      // Partial Fisher-Yates: the first `take` slots become a uniform sample.
      for (std::int64_t i = 0; i < take; ++i) {
        std::uniform_int_distribution<std::int64_t> pick(i, static_cast<std::int64_t>(cand.size()) - 1);
        std::swap(cand[i], cand[pick(engine)]);
        chosen.push_back(pool.entries[cand[i]]);
      }
    }
  }
  return chosen;
}

// Projected embeddings of the chosen anchors plus their labels and origin.
struct AnchorSet {
  Tensor embeddings;  // [n, d]
  std::vector<std::int32_t> class_ids;
  int stride = 0;
  std::vector<Pixel> provenance;

  std::int64_t size() const { return static_cast<std::int64_t>(class_ids.size()); }
};

inline AnchorSet make_anchor_set(const CandidatePool& pool, const Tensor& projected,
                                 std::span<const PoolEntry> chosen, bool normalize) {
  detail::require_rank(projected, 4, "anchor set", "projected features");
  if (projected.dim(0) != pool.batch || projected.dim(2) != pool.height ||
      projected.dim(3) != pool.width) {
    throw ShapeError("anchor set: projected features " + shape_str(projected.shape()) +
                     " do not match label grid " +
                     shape_str({pool.batch, pool.height, pool.width}));
  }
  AnchorSet set;
  set.stride = pool.stride;
  set.class_ids.reserve(chosen.size());
  set.provenance.reserve(chosen.size());
  for (const auto& e : chosen) {
    set.class_ids.push_back(e.class_id);
    set.provenance.push_back(e.pixel);
  }
  auto rows = gather_positions(projected, set.provenance);
  set.embeddings = normalize ? l2_normalize_rows(rows) : rows;
  return set;
}

inline AnchorSet sample_anchor_set(const CandidatePool& pool, const Tensor& projected,
                                   const SamplingOptions& opt, SamplerRng& rng) {
  const auto chosen = select_anchors(pool, opt, rng);
  return make_anchor_set(pool, projected, chosen, opt.normalize_embeddings);
}

// Fully-dense variant: every labelled position is an anchor.
inline AnchorSet dense_anchor_set(const CandidatePool& pool, const Tensor& projected,
                                  bool normalize = true) {
  if (pool.empty()) throw Error("no labeled positions at this scale");
  return make_anchor_set(pool, projected, pool.entries, normalize);
}

}  // namespace mscl
