#pragma once

// Run configuration and its YAML text form. Every field has a default, so an
// empty file describes the reference recipe: tau 0.1, d 256, scale weights
// 1/0.7/0.4/0.1 for strides 4/8/16/32, cross pairs (4,32) and (4,16), both
// lambdas 0.1 and a_max 2048.

#include <yaml-cpp/yaml.h>

#include <charconv>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "mscl/losses.hpp"
#include "mscl/segnet.hpp"
#include "mscl/synthetic.hpp"

namespace mscl {

struct DataSpec {
  SceneSpec scene;
  std::int64_t train_size = 256;
  std::int64_t val_size = 64;
  // Classes averaged into the rare-class IoU.
  std::vector<std::int32_t> rare_classes{4};

  bool operator==(const DataSpec&) const = default;
};

struct OptimizerSpec {
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double poly_power = 0.9;

  bool operator==(const OptimizerSpec&) const = default;
};

struct RunConfig {
  std::uint64_t seed = 0;
  DataSpec data;
  ModelSpec model;
  OptimizerSpec optim;
  LossConfig loss;
  std::int64_t steps = 2000;
  std::int64_t batch_size = 8;
  std::int64_t eval_interval = 500;
  std::string output_dir = "runs/default";

  bool operator==(const RunConfig&) const = default;

  void validate() const {
    data.scene.validate();
    model.validate();
    loss.validate();
    if (model.num_classes != data.scene.num_classes) {
      throw ConfigError("model.num_classes (" + std::to_string(model.num_classes) +
                        ") differs from data.num_classes (" +
                        std::to_string(data.scene.num_classes) + ")");
    }
    if (data.scene.height % 32 != 0 || data.scene.width % 32 != 0) {
      throw ConfigError("image size must be divisible by 32");
    }
    if (data.train_size < 1 || data.val_size < 1) throw ConfigError("splits must be non-empty");
    if (steps < 1 || batch_size < 2 || eval_interval < 0) {
      throw ConfigError("steps >= 1, batch_size >= 2 and eval_interval >= 0 required");
    }
    if (!(optim.lr > 0) || optim.momentum < 0 || optim.weight_decay < 0) {
      throw ConfigError("invalid optimizer settings");
    }
    for (const auto& [s, w] : loss.scale_weights) {
      if (std::find(kStrides.begin(), kStrides.end(), s) == kStrides.end()) {
        throw ConfigError("scale weight for stride " + std::to_string(s) +
                          " but the encoder provides 4, 8, 16, 32");
      }
    }
  }
};

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  std::string s(buf, end);
  // Keep a decimal point so the value reads back as a float.
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

inline YAML::Node num(double v) { return YAML::Node(format_double(v)); }

class ConfigReader {
 public:
  ConfigReader(const YAML::Node& node, std::string path) : node_(node), path_(std::move(path)) {
    if (node_ && !node_.IsNull() && !node_.IsMap()) throw ConfigError(where() + " must be a mapping");
  }
  ~ConfigReader() noexcept(false) {
    if (std::uncaught_exceptions() > 0 || !node_ || node_.IsNull()) return;
    for (const auto& kv : node_) {
      const auto key = kv.first.as<std::string>();
      if (!seen_.contains(key)) throw ConfigError("unknown config key '" + prefix() + key + "'");
    }
  }

  template <class T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!node_ || node_.IsNull() || !node_[key]) return;
    try {
      out = node_[key].template as<T>();
    } catch (const YAML::Exception& e) {
      throw ConfigError("config key '" + prefix() + key + "': " + e.what());
    }
  }

  YAML::Node child(const std::string& key) {
    seen_.insert(key);
    if (!node_ || node_.IsNull()) return YAML::Node(YAML::NodeType::Undefined);
    return node_[key];
  }
  std::string prefix() const { return path_.empty() ? "" : path_ + "."; }

 private:
  std::string where() const { return path_.empty() ? "config" : "'" + path_ + "'"; }
  YAML::Node node_;
  std::string path_;
  std::set<std::string> seen_;
};

inline std::string position_name(LossPosition p) {
  return p == LossPosition::backbone ? "backbone" : "neck";
}

inline LossPosition parse_position(const std::string& s) {
  if (s == "backbone") return LossPosition::backbone;
  if (s == "neck") return LossPosition::neck;
  throw ConfigError("loss.loss_position must be 'backbone' or 'neck', got '" + s + "'");
}

}  // namespace detail

inline RunConfig parse_config(const std::string& text) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("config is not valid YAML: ") + e.what());
  }
  RunConfig cfg;
  {
    detail::ConfigReader r(root, "");
    r.get("seed", cfg.seed);
    r.get("steps", cfg.steps);
    r.get("batch_size", cfg.batch_size);
    r.get("eval_interval", cfg.eval_interval);
    r.get("output_dir", cfg.output_dir);
    {
      detail::ConfigReader d(r.child("data"), "data");
      auto& s = cfg.data.scene;
      d.get("height", s.height);
      d.get("width", s.width);
      d.get("num_classes", s.num_classes);
      d.get("min_shapes", s.min_shapes);
      d.get("max_shapes", s.max_shapes);
      d.get("min_size", s.min_size);
      d.get("max_size", s.max_size);
      d.get("noise_sigma", s.noise_sigma);
      d.get("color_jitter", s.color_jitter);
      d.get("rare_class", s.rare_class);
      d.get("rare_fraction", s.rare_fraction);
      d.get("train_size", cfg.data.train_size);
      d.get("val_size", cfg.data.val_size);
      d.get("rare_classes", cfg.data.rare_classes);
    }
    {
      detail::ConfigReader m(r.child("model"), "model");
      std::vector<std::int64_t> ch(cfg.model.channels.begin(), cfg.model.channels.end());
      m.get("in_channels", cfg.model.in_channels);
      m.get("channels", ch);
      if (ch.size() != 4) throw ConfigError("model.channels needs 4 entries");
      std::copy(ch.begin(), ch.end(), cfg.model.channels.begin());
      m.get("neck_channels", cfg.model.neck_channels);
      m.get("num_classes", cfg.model.num_classes);
      m.get("embedding_dim", cfg.model.embedding_dim);
    }
    {
      detail::ConfigReader o(r.child("optimizer"), "optimizer");
      o.get("lr", cfg.optim.lr);
      o.get("momentum", cfg.optim.momentum);
      o.get("weight_decay", cfg.optim.weight_decay);
      o.get("poly_power", cfg.optim.poly_power);
    }
    {
      detail::ConfigReader l(r.child("loss"), "loss");
      auto& lc = cfg.loss;
      l.get("tau", lc.tau);
      l.get("scale_weights", lc.scale_weights);
      std::vector<std::vector<double>> pairs;
      bool have_pairs = false;
      if (auto node = l.child("cross_pairs"); node && !node.IsNull()) {
        have_pairs = true;
        try {
          pairs = node.as<std::vector<std::vector<double>>>();
        } catch (const YAML::Exception& e) {
          throw ConfigError(std::string("loss.cross_pairs: ") + e.what());
        }
      } else if (node && node.IsNull()) {
        have_pairs = true;
      }
      if (have_pairs) {
        lc.cross_pairs.clear();
        for (const auto& p : pairs) {
          if (p.size() != 2 && p.size() != 3) {
            throw ConfigError("loss.cross_pairs entries are [fine, coarse] or [fine, coarse, weight]");
          }
          lc.cross_pairs.push_back({static_cast<int>(p[0]), static_cast<int>(p[1]),
                                    p.size() == 3 ? p[2] : 1.0});
        }
      }
      l.get("lambda_cms", lc.lambda_cms);
      l.get("lambda_ccs", lc.lambda_ccs);
      l.get("a_max", lc.a_max);
      l.get("normalize_embeddings", lc.normalize_embeddings);
      std::string pos = detail::position_name(lc.loss_position);
      l.get("loss_position", pos);
      lc.loss_position = detail::parse_position(pos);
    }
  }
  cfg.validate();
  return cfg;
}

inline std::string serialize_config(const RunConfig& cfg) {
  using detail::num;
  YAML::Node root;
  root["seed"] = cfg.seed;
  root["steps"] = cfg.steps;
  root["batch_size"] = cfg.batch_size;
  root["eval_interval"] = cfg.eval_interval;
  root["output_dir"] = cfg.output_dir;

  YAML::Node d;
  const auto& s = cfg.data.scene;
  d["height"] = s.height;
  d["width"] = s.width;
  d["num_classes"] = s.num_classes;
  d["min_shapes"] = s.min_shapes;
  d["max_shapes"] = s.max_shapes;
  d["min_size"] = s.min_size;
  d["max_size"] = s.max_size;
  d["noise_sigma"] = num(s.noise_sigma);
  d["color_jitter"] = num(s.color_jitter);
  d["rare_class"] = s.rare_class;
  d["rare_fraction"] = num(s.rare_fraction);
  d["train_size"] = cfg.data.train_size;
  d["val_size"] = cfg.data.val_size;
  d["rare_classes"] = cfg.data.rare_classes;
  d["rare_classes"].SetStyle(YAML::EmitterStyle::Flow);
  root["data"] = d;

  YAML::Node m;
  m["in_channels"] = cfg.model.in_channels;
  m["channels"] = std::vector<std::int64_t>(cfg.model.channels.begin(), cfg.model.channels.end());
  m["channels"].SetStyle(YAML::EmitterStyle::Flow);
  m["neck_channels"] = cfg.model.neck_channels;
  m["num_classes"] = cfg.model.num_classes;
  m["embedding_dim"] = cfg.model.embedding_dim;
  root["model"] = m;

  YAML::Node o;
  o["lr"] = num(cfg.optim.lr);
  o["momentum"] = num(cfg.optim.momentum);
  o["weight_decay"] = num(cfg.optim.weight_decay);
  o["poly_power"] = num(cfg.optim.poly_power);
  root["optimizer"] = o;

  YAML::Node l;
  const auto& lc = cfg.loss;
  l["tau"] = num(lc.tau);
  YAML::Node sw;
  for (const auto& [k, v] : lc.scale_weights) sw[k] = num(v);
  sw.SetStyle(YAML::EmitterStyle::Flow);
  l["scale_weights"] = sw;
  YAML::Node pairs(YAML::NodeType::Sequence);
  for (const auto& p : lc.cross_pairs) {
    YAML::Node e;
    e.push_back(p.fine);
    e.push_back(p.coarse);
    e.push_back(num(p.weight));
    e.SetStyle(YAML::EmitterStyle::Flow);
    pairs.push_back(e);
  }
  l["cross_pairs"] = pairs;
  l["lambda_cms"] = num(lc.lambda_cms);
  l["lambda_ccs"] = num(lc.lambda_ccs);
  l["a_max"] = lc.a_max;
  l["normalize_embeddings"] = lc.normalize_embeddings;
  l["loss_position"] = detail::position_name(lc.loss_position);
  root["loss"] = l;

  YAML::Emitter out;
  out << root;
  return std::string(out.c_str()) + "\n";
}

// FNV-1a; stable across platforms and runs.
inline std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t config_hash(const RunConfig& cfg) { return fnv1a64(serialize_config(cfg)); }

}  // namespace mscl
