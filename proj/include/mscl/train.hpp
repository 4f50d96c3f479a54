#pragma once

// Training orchestration, evaluation and embedding export.

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>

#include "mscl/checkpoint.hpp"
#include "mscl/config.hpp"
#include "mscl/metrics.hpp"
#include "mscl/optim.hpp"
#include "mscl/pyramid.hpp"
#include "mscl/segnet.hpp"

namespace mscl {

class NonFiniteLoss : public Error {
 public:
  using Error::Error;
};

struct StepRecord {
  std::int64_t step = 0;
  double lr = 0;
  double ce = 0;
  double cms = 0;
  double ccs = 0;
  double total = 0;
  std::map<int, std::int64_t> anchors;  // stride -> |A_s|
};

struct EvalRecord {
  std::int64_t step = 0;  // optimizer steps completed
  IoUReport report;
};

inline nlohmann::json to_json(const StepRecord& r) {
  nlohmann::json j;
  j["step"] = r.step;
  j["lr"] = r.lr;
  j["ce"] = r.ce;
  j["cms"] = r.cms;
  j["ccs"] = r.ccs;
  j["total"] = r.total;
  nlohmann::json a = nlohmann::json::object();
  for (const auto& [s, n] : r.anchors) a[std::to_string(s)] = n;
  j["anchors"] = a;
  return j;
}

inline nlohmann::json to_json(const IoUReport& r) {
  auto num = [](double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); };
  nlohmann::json j;
  j["miou"] = num(r.mean);
  nlohmann::json pc = nlohmann::json::array();
  for (double v : r.per_class) pc.push_back(num(v));
  j["per_class"] = pc;
  j["rare_iou"] = r.subgroup_mean ? nlohmann::json(*r.subgroup_mean) : nlohmann::json(nullptr);
  return j;
}

inline nlohmann::json to_json(const EvalRecord& r) {
  auto j = to_json(r.report);
  j["eval_step"] = r.step;
  return j;
}

// Copies checkpoint tensors into the model's state (parameters and BN buffers).
inline void load_model_state(SegNet& model, const Checkpoint& ckpt) {
  model.visit([&](const std::string& name, Tensor& t, bool) {
    const auto& s = ckpt.find(name);
    if (s.shape != t.shape()) {
      throw CheckpointError("tensor '" + name + "' has shape " + shape_str(s.shape) +
                            " in the checkpoint, model expects " + shape_str(t.shape()));
    }
    std::copy(s.data.begin(), s.data.end(), t.mutable_data().begin());
  });
}

inline std::vector<StoredTensor> model_state(SegNet& model) {
  std::vector<StoredTensor> out;
  model.visit([&](const std::string& name, Tensor& t, bool) {
    out.push_back({name, t.shape(), std::vector<double>(t.data().begin(), t.data().end())});
  });
  return out;
}

// Parses and verifies the embedded config.
inline RunConfig checkpoint_config(const Checkpoint& ckpt) {
  if (fnv1a64(ckpt.config_yaml) != ckpt.config_hash) {
    throw CheckpointError("checkpoint config hash does not match its embedded config");
  }
  return parse_config(ckpt.config_yaml);
}

inline SegNet model_from_checkpoint(const Checkpoint& ckpt) {
  const auto cfg = checkpoint_config(ckpt);
  SegNet model(cfg.model, cfg.loss.loss_position, cfg.seed);
  load_model_state(model, ckpt);
  return model;
}

// Single-scale inference over the whole split in chunks.
inline IoUReport evaluate(SegNet& model, const Dataset& data,
                          std::span<const std::int32_t> rare_classes = {},
                          std::int64_t chunk = 16) {
  if (data.spec.num_classes != model.spec().num_classes) {
    throw Error("evaluate: dataset has " + std::to_string(data.spec.num_classes) +
                " classes, model predicts " + std::to_string(model.spec().num_classes));
  }
  NoGradGuard guard;
  ConfusionMatrix cm(model.spec().num_classes);
  for (std::int64_t first = 0; first < data.size; first += chunk) {
    std::vector<std::int64_t> idx;
    for (auto i = first; i < std::min(first + chunk, data.size); ++i) idx.push_back(i);
    auto out = model.forward(data.batch_images(idx), false);
    cm.add(argmax_labels(out.logits), data.batch_labels(idx));
  }
  return iou_report(cm, rare_classes);
}

// Normalized projected embeddings, one row per anchor.
struct EmbeddingTable {
  int stride = 0;
  std::int64_t dim = 0;
  std::vector<std::int32_t> class_ids;
  std::vector<double> rows;  // n x dim

  std::int64_t size() const { return static_cast<std::int64_t>(class_ids.size()); }
};

// Class-balanced sample of up to n_per_class embeddings per class at one
// stride, drawn over the whole split with the anchor sampler.
inline EmbeddingTable collect_embeddings(SegNet& model, const Dataset& data, int stride,
                                         std::int64_t n_per_class, std::uint64_t seed,
                                         std::int64_t chunk = 16) {
  if (std::find(kStrides.begin(), kStrides.end(), stride) == kStrides.end()) {
    throw Error("export: the model has no stride " + std::to_string(stride) +
                " (available: 4, 8, 16, 32)");
  }
  if (n_per_class < 0) throw Error("export: n_per_class must be >= 0");
  EmbeddingTable table;
  table.stride = stride;
  table.dim = model.spec().embedding_dim;
  if (n_per_class == 0) return table;

  const auto labels = downsample_labels(data.labels, stride);
  const auto h = labels.height, w = labels.width, d = table.dim;
  auto z = Tensor::zeros({data.size, d, h, w});
  {
    NoGradGuard guard;
    auto zd = z.mutable_data();
    for (std::int64_t first = 0; first < data.size; first += chunk) {
      std::vector<std::int64_t> idx;
      for (auto i = first; i < std::min(first + chunk, data.size); ++i) idx.push_back(i);
      auto out = model.forward(data.batch_images(idx), false);
      auto part = model.embed(out, stride, false);
      std::copy(part.data().begin(), part.data().end(), zd.begin() + first * d * h * w);
    }
  }
  const auto pool = CandidatePool::from_labels(labels, stride);
  const auto counts = count_classes(pool);
  for (std::int32_t c = 0; c < model.spec().num_classes; ++c) {
    if (!counts.contains(c)) spdlog::warn("export: class {} has no pixels at stride {}; omitted", c, stride);
  }
  SamplingOptions opt;
  opt.max_per_class = n_per_class;
  opt.a_max = std::max<std::int64_t>(n_per_class * static_cast<std::int64_t>(counts.size()),
                                     static_cast<std::int64_t>(counts.size()));
  opt.normalize_embeddings = true;
  SamplerRng rng(seed, 0xe0e0e0e0ULL, stride);
  AnchorSet set;
  {
    NoGradGuard guard;
    set = sample_anchor_set(pool, z, opt, rng);
  }
  table.class_ids = set.class_ids;
  table.rows.assign(set.embeddings.data().begin(), set.embeddings.data().end());
  return table;
}

inline void write_embeddings_csv(const std::string& path, const EmbeddingTable& table) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw Error("cannot write '" + path + "'");
  os << "class_id,scale";
  for (std::int64_t k = 0; k < table.dim; ++k) os << ",e" << k;
  os << '\n';
  char buf[32];
  for (std::int64_t i = 0; i < table.size(); ++i) {
    os << table.class_ids[i] << ',' << table.stride;
    for (std::int64_t k = 0; k < table.dim; ++k) {
      std::snprintf(buf, sizeof buf, "%.9g", table.rows[i * table.dim + k]);
      os << ',' << buf;
    }
    os << '\n';
  }
  if (!os) throw Error("failed writing '" + path + "'");
}

inline double separation_ratio(const EmbeddingTable& table) {
  return separation_ratio(table.rows, table.dim, table.class_ids);
}

class Trainer {
 public:
  explicit Trainer(RunConfig cfg)
      : cfg_(std::move(cfg)),
        model_((cfg_.validate(), cfg_.model), cfg_.loss.loss_position, cfg_.seed),
        optim_(model_.parameters(), cfg_.optim),
        train_(generate_split(cfg_.data.scene, cfg_.seed, cfg_.data.train_size, 0)),
        val_(generate_split(cfg_.data.scene, cfg_.seed, cfg_.data.val_size, 1)) {}

  // Continues a run from a checkpoint written by the same config.
  Trainer(RunConfig cfg, const Checkpoint& ckpt) : Trainer(std::move(cfg)) {
    if (ckpt.config_hash != config_hash(cfg_)) {
      throw CheckpointError("checkpoint was written by a different config");
    }
    load_model_state(model_, ckpt);
    for (auto& [name, v] : optim_.velocity()) {
      const auto& s = ckpt.find("optim.velocity." + name);
      if (s.data.size() != v.size()) throw CheckpointError("optimizer state size mismatch for " + name);
      v = s.data;
    }
    if (ckpt.step < 0 || ckpt.step > cfg_.steps) throw CheckpointError("checkpoint step out of range");
    step_ = ckpt.step;
  }

  const RunConfig& config() const { return cfg_; }
  SegNet& model() { return model_; }
  const Dataset& train_set() const { return train_; }
  const Dataset& val_set() const { return val_; }
  std::int64_t steps_done() const { return step_; }
  bool done() const { return step_ >= cfg_.steps; }

  // Scene indices of batch `step`: consecutive slices of per-epoch shuffles.
  std::vector<std::int64_t> batch_indices(std::int64_t step) {
    std::vector<std::int64_t> out;
    const auto n = train_.size;
    for (std::int64_t k = 0; k < cfg_.batch_size; ++k) {
      const auto p = step * cfg_.batch_size + k;
      out.push_back(epoch_order(p / n)[static_cast<std::size_t>(p % n)]);
    }
    return out;
  }

  StepRecord train_step() {
    if (done()) throw Error("train_step: all " + std::to_string(cfg_.steps) + " steps done");
    StepRecord rec;
    rec.step = step_;
    rec.lr = poly_lr(cfg_.optim.lr, step_, cfg_.steps, cfg_.optim.poly_power);
    const auto idx = batch_indices(step_);
    const auto images = train_.batch_images(idx);
    const auto labels = train_.batch_labels(idx);
    {
      Tape tape;
      auto out = model_.forward(images, true);
      auto ce = softmax_cross_entropy(out.logits, labels, labels.ignore_index);
      if (!std::isfinite(ce.item())) throw non_finite("ce", ce.item());

      AnchorSets sets;
      const auto strides = cfg_.loss.active_strides();
      if (!strides.empty()) {
        const auto pyramid = build_pyramid(labels, strides);
        SamplingOptions opt;
        opt.a_max = cfg_.loss.a_max;
        opt.normalize_embeddings = cfg_.loss.normalize_embeddings;
        for (int s : strides) {
          const auto pool = CandidatePool::from_labels(pyramid.at(s), s);
          auto z = model_.embed(out, s, true);
          SamplerRng rng(cfg_.seed, static_cast<std::uint64_t>(step_), s);
          sets.emplace(s, sample_anchor_set(pool, z, opt, rng));
          rec.anchors[s] = sets.at(s).size();
        }
      }
      auto losses = compute_losses(ce, sets, cfg_.loss);
      rec.ce = losses.ce.item();
      rec.cms = losses.cms.item();
      rec.ccs = losses.ccs.item();
      rec.total = losses.total.item();
      if (!std::isfinite(rec.cms)) throw non_finite("cms", rec.cms);
      if (!std::isfinite(rec.ccs)) throw non_finite("ccs", rec.ccs);
      if (!std::isfinite(rec.total)) throw non_finite("total", rec.total);
      optim_.zero_grad();
      backward(losses.total);
    }
    for (const auto& p : optim_.params()) {
      if (!all_finite(p.tensor.grad())) {
        throw NonFiniteLoss("non-finite gradient for '" + p.name + "' at step " + std::to_string(step_));
      }
    }
    optim_.step(rec.lr);
    ++step_;
    return rec;
  }

  EvalRecord evaluate_val() {
    return {step_, evaluate(model_, val_, cfg_.data.rare_classes)};
  }

  Checkpoint checkpoint() {
    Checkpoint ckpt;
    ckpt.step = step_;
    ckpt.config_yaml = serialize_config(cfg_);
    ckpt.config_hash = fnv1a64(ckpt.config_yaml);
    ckpt.tensors = model_state(model_);
    for (const auto& p : optim_.params()) {
      ckpt.tensors.push_back({"optim.velocity." + p.name, p.tensor.shape(), optim_.velocity().at(p.name)});
    }
    return ckpt;
  }

 private:
  NonFiniteLoss non_finite(const char* term, double v) const {
    return NonFiniteLoss("non-finite loss at step " + std::to_string(step_) + ": term '" + term +
                         "' = " + std::to_string(v));
  }

  const std::vector<std::int64_t>& epoch_order(std::int64_t epoch) {
    if (epoch != order_epoch_) {
      order_.resize(static_cast<std::size_t>(train_.size));
      std::iota(order_.begin(), order_.end(), 0);
      CounterRng rng(cfg_.seed, {0x65706f6368ULL, static_cast<std::uint64_t>(epoch)});
      std::shuffle(order_.begin(), order_.end(), rng);
      order_epoch_ = epoch;
    }
    return order_;
  }

  RunConfig cfg_;
  SegNet model_;
  Sgd optim_;
  Dataset train_;
  Dataset val_;
  std::int64_t step_ = 0;
  std::int64_t order_epoch_ = -1;
  std::vector<std::int64_t> order_;
};

struct TrainOptions {
  // Write metrics.ndjson, config.yaml and checkpoints under cfg.output_dir.
  bool write_files = true;
  // Stop after this many completed steps (for split runs); 0 runs to the end.
  std::int64_t stop_at = 0;
  std::function<void(const StepRecord&)> on_step;
  std::function<void(const EvalRecord&)> on_eval;
};

struct TrainResult {
  Checkpoint final_checkpoint;
  std::vector<std::string> log;  // NDJSON lines produced by this invocation
  std::optional<EvalRecord> last_eval;
};

namespace detail {

// Keeps log lines that precede the resume point.
inline void truncate_log(const std::filesystem::path& path, std::int64_t step) {
  if (!std::filesystem::exists(path)) return;
  std::vector<std::string> keep;
  {
    std::ifstream is(path);
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      auto j = nlohmann::json::parse(line, nullptr, false);
      if (j.is_discarded()) continue;
      if (j.contains("step") && j["step"].get<std::int64_t>() >= step) continue;
      if (j.contains("eval_step") && j["eval_step"].get<std::int64_t>() > step) continue;
      keep.push_back(line);
    }
  }
  std::ofstream os(path, std::ios::trunc);
  for (const auto& l : keep) os << l << '\n';
}

}  // namespace detail

inline TrainResult train(const RunConfig& cfg, const TrainOptions& opt = {},
                         const Checkpoint* resume = nullptr) {
  auto trainer = resume ? Trainer(cfg, *resume) : Trainer(cfg);
  namespace fs = std::filesystem;
  const fs::path dir(cfg.output_dir);
  std::ofstream log;
  if (opt.write_files) {
    fs::create_directories(dir);
    {
      std::ofstream os(dir / "config.yaml", std::ios::trunc);
      os << serialize_config(cfg);
    }
    if (resume) detail::truncate_log(dir / "metrics.ndjson", resume->step);
    log.open(dir / "metrics.ndjson", resume ? std::ios::app : std::ios::trunc);
    if (!log) throw Error("cannot write metrics log in '" + dir.string() + "'");
  }
  TrainResult result;
  auto emit = [&](const nlohmann::json& j) {
    auto line = j.dump();
    if (log.is_open()) log << line << '\n' << std::flush;
    result.log.push_back(std::move(line));
  };
  const auto stop = opt.stop_at > 0 ? std::min(opt.stop_at, cfg.steps) : cfg.steps;
  while (trainer.steps_done() < stop) {
    const auto rec = trainer.train_step();
    emit(to_json(rec));
    if (opt.on_step) opt.on_step(rec);
    const auto done = trainer.steps_done();
    const bool periodic = cfg.eval_interval > 0 && done % cfg.eval_interval == 0;
    if (periodic || done == cfg.steps) {
      auto ev = trainer.evaluate_val();
      emit(to_json(ev));
      if (opt.on_eval) opt.on_eval(ev);
      result.last_eval = ev;
      if (opt.write_files) {
        save_checkpoint((dir / ("step_" + std::to_string(done) + ".ckpt")).string(), trainer.checkpoint());
      }
    }
  }
  result.final_checkpoint = trainer.checkpoint();
  if (opt.write_files) save_checkpoint((dir / "last.ckpt").string(), result.final_checkpoint);
  return result;
}

}  // namespace mscl
