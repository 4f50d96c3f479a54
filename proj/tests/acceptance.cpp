// Acceptance suite: one PASS/FAIL line per criterion. Optional arguments
// restrict the run to the named criteria.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>
#include <set>
#include <string>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "mscl/benchmark.hpp"
#include "mscl/gradsuite.hpp"
#include "mscl/train.hpp"

using namespace mscl;

namespace {

constexpr double kGradTol = 1e-4;
constexpr double kGradSeconds = 60.0;
constexpr int kGradInstances = 5;
constexpr double kDenseTol = 1e-10;
constexpr int kDenseInstances = 20;
constexpr int kSamplerBatches = 100;
constexpr double kScalarTol = 1e-9;
constexpr double kRatioReduction = 0.20;
constexpr double kMiouSlack = 0.005;
constexpr double kEffectMinutes = 40.0;
constexpr std::int64_t kEffectPerClass = 100;
constexpr std::int64_t kAMax = 2048;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Tensor random_features(std::mt19937_64& rng, Shape shape) {
  std::normal_distribution<double> g;
  auto t = Tensor::zeros(shape, true);
  for (auto& v : t.mutable_data()) v = g(rng);
  return t;
}

Outcome gradient_suite() {
  GradSuiteOptions opt;
  opt.instances = kGradInstances;
  const auto res = run_gradient_suite(opt);
  const bool ok = res.passed && res.max_rel_error <= kGradTol && res.seconds < kGradSeconds &&
                  static_cast<int>(res.entries.size()) >= 4 * kGradInstances;
  return {ok, fmt::format("instances={} checks={} max_rel_error={:.3e} (tol {:.0e}) seconds={:.1f} (limit {:.0f})",
                          opt.instances, res.entries.size(), res.max_rel_error, kGradTol, res.seconds,
                          kGradSeconds)};
}

Outcome dense_oracle() {
  std::mt19937_64 rng(20);
  double worst = 0;
  for (int inst = 0; inst < kDenseInstances; ++inst) {
    const std::int64_t B = 1 + inst % 3;
    const std::int64_t H = 3 + (inst * 7) % 4, W = 4 + (inst * 5) % 3;
    const std::int64_t n = B * H * W;
    std::int64_t classes = 2;
    for (std::int64_t c : {5, 4, 3, 2}) {
      if (n % c == 0 && (inst + c) % 2 == 0) {
        classes = c;
        break;
      }
    }
    if (n % classes != 0) classes = n % 3 == 0 ? 3 : 2;
    std::vector<std::int32_t> v;
    for (std::int64_t c = 0; c < classes; ++c) v.insert(v.end(), n / classes, static_cast<std::int32_t>(c));
    std::shuffle(v.begin(), v.end(), rng);
    LabelMap labels(B, H, W);
    labels.values = v;
    auto z = random_features(rng, {B, 6, H, W});
    const auto pool = CandidatePool::from_labels(labels, 4);
    SamplerRng srng(inst, 0, 4);
    SamplingOptions opt;
    opt.a_max = kAMax;
    const auto sampled = info_nce(sample_anchor_set(pool, z, opt, srng), 0.1).item();
    const auto dense = info_nce(dense_anchor_set(pool, z), 0.1).item();
    worst = std::max(worst, std::abs(sampled - dense));
  }
  return {worst <= kDenseTol,
          fmt::format("instances={} max_abs_diff={:.3e} (tol {:.0e})", kDenseInstances, worst, kDenseTol)};
}

Outcome sampler_balance() {
  std::mt19937_64 rng(21);
  int balance_fail = 0, cap_fail = 0, determinism_fail = 0, capped = 0;
  for (int t = 0; t < kSamplerBatches; ++t) {
    const std::int64_t B = 2, H = 16, W = 16;
    const int classes = 2 + t % 6;
    // Skewed class frequencies, some ignored pixels.
    std::vector<double> weights;
    for (int c = 0; c < classes; ++c) weights.push_back(std::pow(0.5, c) + 0.01);
    std::discrete_distribution<int> pick(weights.begin(), weights.end());
    std::uniform_real_distribution<double> u(0, 1);
    LabelMap labels(B, H, W);
    for (auto& v : labels.values) v = u(rng) < 0.05 ? labels.ignore_index : pick(rng);
    const auto z = random_features(rng, {B, 4, H, W});
    const auto pool = CandidatePool::from_labels(labels, 4);
    const auto counts = count_classes(pool);
    std::int64_t min_count = std::numeric_limits<std::int64_t>::max();
    for (const auto& [c, cc] : counts) min_count = std::min(min_count, cc.total);
    SamplingOptions opt;
    opt.a_max = t % 4 == 3 ? 64 : kAMax;
    const auto n_classes = static_cast<std::int64_t>(counts.size());
    const auto expect = std::min(min_count, opt.a_max / n_classes);
    if (expect < min_count) ++capped;

    SamplerRng r1(t, 7, 4), r2(t, 7, 4);
    const auto a = sample_anchor_set(pool, z, opt, r1);
    const auto b = sample_anchor_set(pool, z, opt, r2);
    std::map<std::int32_t, std::int64_t> got;
    for (auto c : a.class_ids) got[c]++;
    bool balanced = got.size() == counts.size();
    for (const auto& [c, k] : got) balanced = balanced && k == expect;
    if (!balanced) ++balance_fail;
    if (a.size() > opt.a_max) ++cap_fail;
    const bool same = a.class_ids == b.class_ids && a.provenance == b.provenance &&
                      std::ranges::equal(a.embeddings.data(), b.embeddings.data());
    if (!same) ++determinism_fail;
  }
  const bool ok = balance_fail == 0 && cap_fail == 0 && determinism_fail == 0;
  return {ok, fmt::format("batches={} (capped {}) unbalanced={} over_cap={} nondeterministic={}", kSamplerBatches,
                          capped, balance_fail, cap_fail, determinism_fail)};
}

AnchorSet literal_set(std::vector<double> rows, std::int64_t d, std::vector<std::int32_t> cls) {
  AnchorSet s;
  const auto n = static_cast<std::int64_t>(cls.size());
  s.embeddings = Tensor::from({n, d}, rows);
  s.class_ids = std::move(cls);
  s.stride = 4;
  for (std::int64_t i = 0; i < n; ++i) s.provenance.push_back({0, 0, static_cast<std::int32_t>(i)});
  return s;
}

Outcome scalar_losses() {
  const double b = std::sqrt(0.5);
  const double l0 = info_nce(literal_set({1, 0, 0.6, 0.8}, 2, {0, 0}), 0.1).item();
  const double l1 = info_nce(literal_set({1, 0, 1, 0, 1, 5}, 2, {0, 0, 1}), 0.1).item();
  const double l2 = info_nce(literal_set({1, b, 0, 1, -b, 0, 0.3, 0, 2}, 3, {0, 0, 1}), 0.1).item();
  const double e0 = std::abs(l0), e1 = std::abs(l1 - std::log(2.0)), e2 = std::abs(l2 - std::log1p(std::exp(-2.0)));
  const double worst = std::max({e0, e1, e2});
  return {worst <= kScalarTol, fmt::format("values=({:.12f}, {:.12f}, {:.12f}) max_abs_error={:.3e} (tol {:.0e})",
                                           l0, l1, l2, worst, kScalarTol)};
}

struct EffectRun {
  double miou = 0;
  double rare = 0;
  double ratio = 0;
};

EffectRun effect_run(std::uint64_t seed, bool contrastive) {
  RunConfig cfg;
  cfg.seed = seed;
  cfg.eval_interval = 0;
  if (!contrastive) {
    cfg.loss.lambda_cms = 0;
    cfg.loss.lambda_ccs = 0;
  }
  Trainer trainer(cfg);
  while (!trainer.done()) trainer.train_step();
  const auto ev = trainer.evaluate_val();
  const auto table = collect_embeddings(trainer.model(), trainer.val_set(), 4, kEffectPerClass, seed);
  EffectRun r{ev.report.mean, ev.report.subgroup_mean.value_or(std::nan("")), separation_ratio(table)};
  std::fprintf(stderr, "  seed %lu %s: miou %.4f rare %.4f R %.4f\n", static_cast<unsigned long>(seed),
               contrastive ? "total" : "ce", r.miou, r.rare, r.ratio);
  return r;
}

Outcome training_effect() {
  const auto t0 = std::chrono::steady_clock::now();
  EffectRun ce, tot;
  for (std::uint64_t seed : {0u, 1u}) {
    const auto c = effect_run(seed, false);
    const auto t = effect_run(seed, true);
    ce.miou += c.miou / 2;
    ce.rare += c.rare / 2;
    ce.ratio += c.ratio / 2;
    tot.miou += t.miou / 2;
    tot.rare += t.rare / 2;
    tot.ratio += t.ratio / 2;
  }
  const double minutes = seconds_since(t0) / 60.0;
  const bool a = tot.ratio <= (1.0 - kRatioReduction) * ce.ratio;
  const bool b = tot.miou >= ce.miou - kMiouSlack;
  const bool c = tot.rare >= ce.rare;
  const bool ok = a && b && c && minutes < kEffectMinutes;
  return {ok, fmt::format("R ce={:.4f} total={:.4f} ({:+.1f}%) [{}]; miou ce={:.4f} total={:.4f} [{}]; "
                          "rare ce={:.4f} total={:.4f} [{}]; minutes={:.1f} (limit {:.0f})",
                          ce.ratio, tot.ratio, 100.0 * (tot.ratio / ce.ratio - 1.0), a ? "ok" : "fail", ce.miou,
                          tot.miou, b ? "ok" : "fail", ce.rare, tot.rare, c ? "ok" : "fail", minutes,
                          kEffectMinutes)};
}

Outcome complexity() {
  BenchOptions opt;
  opt.a_max = kAMax;
  const std::vector<BenchShape> shapes{{2, 16, 16, 2}, {2, 32, 32, 2}, {2, 64, 64, 2}};
  bool ok = true;
  std::string detail;
  for (const auto& s : shapes) {
    const auto row = benchmark_shape(s, opt);
    bool row_ok = row.sampled.pairs <= kAMax * kAMax;
    if (row.dense.feasible) {
      row_ok = row_ok && row.sampled.median_ms < row.dense.median_ms && row.sampled.peak_bytes < row.dense.peak_bytes;
    }
    if (s.height == 64 && s.width == 64) {
      row_ok = row_ok && row.dense.pairs == 8192LL * 8192LL && row.dense.feasible;
    }
    ok = ok && row_ok;
    detail += fmt::format("{}x{}x{}: pairs {}/{} ms {:.2f}/{} peak_mb {:.2f}/{}; ", s.batch, s.height, s.width,
                          row.sampled.pairs, row.dense.pairs, row.sampled.median_ms,
                          row.dense.feasible ? fmt::format("{:.2f}", row.dense.median_ms) : "n/a",
                          row.sampled.peak_bytes / 1048576.0,
                          row.dense.feasible ? fmt::format("{:.2f}", row.dense.peak_bytes / 1048576.0) : "n/a");
  }
  detail += "(sampled/dense)";
  return {ok, detail};
}

RunConfig repro_config(const std::string& dir) {
  RunConfig cfg;
  cfg.seed = 5;
  cfg.steps = 20;
  cfg.eval_interval = 10;
  cfg.data.train_size = 32;
  cfg.data.val_size = 16;
  cfg.output_dir = dir;
  return cfg;
}

Outcome reproducibility() {
  namespace fs = std::filesystem;
  const auto root = fs::temp_directory_path() / "mscl_acceptance_repro";
  fs::remove_all(root);
  const auto a = train(repro_config((root / "a").string()));
  const auto b = train(repro_config((root / "b").string()));
  const bool logs_equal = a.log == b.log && !a.log.empty();

  const auto path = (root / "a" / "last.ckpt").string();
  auto ckpt = load_checkpoint(path);
  Trainer probe_src(repro_config((root / "probe").string()));
  std::vector<std::int64_t> idx{0, 1, 2, 3};
  const auto images = probe_src.val_set().batch_images(idx);
  auto before = model_from_checkpoint(a.final_checkpoint);
  auto after = model_from_checkpoint(ckpt);
  Tensor la, lb;
  {
    NoGradGuard guard;
    la = before.forward(images, false).logits;
    lb = after.forward(images, false).logits;
  }
  const bool logits_equal = std::ranges::equal(la.data(), lb.data());
  fs::remove_all(root);
  return {logs_equal && logits_equal,
          fmt::format("log_lines={} logs_identical={} checkpoint_logits_bitwise={}", a.log.size(), logs_equal,
                      logits_equal)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient_suite", gradient_suite}, {"dense_oracle", dense_oracle},
      {"sampler_balance", sampler_balance}, {"scalar_losses", scalar_losses},
      {"training_effect", training_effect}, {"complexity_benchmark", complexity},
      {"reproducibility", reproducibility},
  };
  std::set<std::string> only(argv + 1, argv + argc);
  spdlog::set_level(spdlog::level::err);
  int failed = 0;
  for (const auto& [name, fn] : criteria) {
    if (!only.empty() && !only.contains(name)) continue;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
    failed += o.pass ? 0 : 1;
  }
  return failed == 0 ? 0 : 1;
}
