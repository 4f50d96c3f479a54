#include <CLI11.hpp>
#include <Eigen/Core>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "mscl/benchmark.hpp"
#include "mscl/gradsuite.hpp"
#include "mscl/train.hpp"

namespace {

std::string read_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw mscl::Error("cannot read '" + path + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

mscl::RunConfig load_config(const std::string& path) { return mscl::parse_config(read_file(path)); }

std::vector<mscl::BenchShape> parse_shapes(const std::vector<std::string>& specs) {
  std::vector<mscl::BenchShape> out;
  for (const auto& s : specs) {
    mscl::BenchShape shape;
    char x1 = 0, x2 = 0, x3 = 0;
    std::istringstream is(s);
    if (!(is >> shape.batch >> x1 >> shape.height >> x2 >> shape.width) || x1 != 'x' || x2 != 'x') {
      throw mscl::Error("bad shape '" + s + "', expected BxHxW or BxHxWxC");
    }
    if (is >> x3) {
      if (x3 != 'x' || !(is >> shape.classes)) throw mscl::Error("bad shape '" + s + "'");
    }
    out.push_back(shape);
  }
  return out;
}

int fail(const std::string& kind, const std::string& message) {
  nlohmann::json j;
  j["error"] = kind;
  j["message"] = message;
  std::cerr << j.dump() << '\n';
  return 1;
}

void apply_thread_env() {
  int threads = 1;
  if (const char* env = std::getenv("MSCL_THREADS")) {
    threads = std::max(1, std::atoi(env));
  }
  Eigen::setNbThreads(threads);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-scale supervised contrastive training harness"};
  app.require_subcommand(1);

  std::string config_path, ckpt_path, resume_path, out_path;
  int scale = 4;
  std::int64_t per_class = 100;
  std::vector<std::string> shapes{"1x4x4x2", "2x16x16x2", "2x32x32x2", "2x64x64x2"};
  mscl::BenchOptions bench;
  mscl::GradSuiteOptions grad;
  bool quiet = false;

  app.add_flag("-q,--quiet", quiet, "Only print results and errors");

  auto* train = app.add_subcommand("train", "Train a model from a config file");
  train->add_option("config", config_path, "YAML run config")->required()->check(CLI::ExistingFile);
  train->add_option("--resume", resume_path, "Continue from a checkpoint")->check(CLI::ExistingFile);

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the validation split");
  eval->add_option("checkpoint", ckpt_path)->required()->check(CLI::ExistingFile);
  eval->add_option("config", config_path)->required()->check(CLI::ExistingFile);

  auto* exp = app.add_subcommand("export-embeddings", "Write class-balanced projected embeddings as CSV");
  exp->add_option("checkpoint", ckpt_path)->required()->check(CLI::ExistingFile);
  exp->add_option("config", config_path)->required()->check(CLI::ExistingFile);
  exp->add_option("--scale", scale, "Output stride")->check(CLI::IsMember({4, 8, 16, 32}));
  exp->add_option("--per-class", per_class, "Rows per class")->check(CLI::NonNegativeNumber);
  exp->add_option("-o,--output", out_path, "CSV path (default: stdout)");

  auto* bm = app.add_subcommand("benchmark", "Dense vs sampled contrastive loss cost");
  bm->add_option("--shapes", shapes, "BxHxW[xC] feature shapes");
  bm->add_option("--a-max", bench.a_max)->check(CLI::PositiveNumber);
  bm->add_option("--dim", bench.dim)->check(CLI::PositiveNumber);
  bm->add_option("--dense-ceiling", bench.dense_pair_ceiling, "Max dense anchor pairs");
  bm->add_option("--repeats", bench.repeats)->check(CLI::PositiveNumber);

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  gc->add_option("--instances", grad.instances)->check(CLI::PositiveNumber);
  gc->add_option("--seed", grad.seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    return fail("usage", e.what());
  }
  spdlog::set_level(quiet ? spdlog::level::warn : spdlog::level::info);
  apply_thread_env();

  try {
    if (*train) {
      const auto cfg = load_config(config_path);
      std::optional<mscl::Checkpoint> resume;
      if (!resume_path.empty()) resume = mscl::load_checkpoint(resume_path);
      mscl::TrainOptions opt;
      opt.on_step = [&](const mscl::StepRecord& r) {
        if (r.step % 50 == 0) {
          spdlog::info("step {} lr {:.4g} ce {:.4f} cms {:.4f} ccs {:.4f} total {:.4f}", r.step, r.lr,
                       r.ce, r.cms, r.ccs, r.total);
        }
      };
      opt.on_eval = [&](const mscl::EvalRecord& r) {
        spdlog::info("eval after {} steps: mIoU {:.4f}", r.step, r.report.mean);
      };
      auto res = mscl::train(cfg, opt, resume ? &*resume : nullptr);
      nlohmann::json j;
      j["output_dir"] = cfg.output_dir;
      j["steps"] = res.final_checkpoint.step;
      if (res.last_eval) j["eval"] = mscl::to_json(*res.last_eval);
      std::cout << j.dump() << '\n';
    } else if (*eval) {
      const auto cfg = load_config(config_path);
      const auto ckpt = mscl::load_checkpoint(ckpt_path);
      auto model = mscl::model_from_checkpoint(ckpt);
      const auto val = mscl::generate_split(cfg.data.scene, cfg.seed, cfg.data.val_size, 1);
      const auto report = mscl::evaluate(model, val, cfg.data.rare_classes);
      auto j = mscl::to_json(report);
      j["checkpoint_step"] = ckpt.step;
      std::cout << j.dump() << '\n';
    } else if (*exp) {
      const auto cfg = load_config(config_path);
      const auto ckpt = mscl::load_checkpoint(ckpt_path);
      auto model = mscl::model_from_checkpoint(ckpt);
      const auto val = mscl::generate_split(cfg.data.scene, cfg.seed, cfg.data.val_size, 1);
      const auto table = mscl::collect_embeddings(model, val, scale, per_class, cfg.seed);
      mscl::write_embeddings_csv(out_path.empty() ? "/dev/stdout" : out_path, table);
    } else if (*bm) {
      const auto rows = mscl::benchmark_sampling(parse_shapes(shapes), bench);
      for (const auto& r : rows) {
        nlohmann::json j;
        j["shape"] = {r.shape.batch, r.shape.height, r.shape.width, r.shape.classes};
        j["dense_pairs"] = mscl::dense_pair_count(r.shape);
        j["sampled_pairs"] = r.sampled.pairs;
        j["sampled_anchors"] = r.sampled.anchors;
        j["sampled_ms"] = r.sampled.median_ms;
        j["sampled_peak_bytes"] = r.sampled.peak_bytes;
        j["dense_feasible"] = r.dense.feasible;
        if (r.dense.feasible) {
          j["dense_ms"] = r.dense.median_ms;
          j["dense_peak_bytes"] = r.dense.peak_bytes;
        }
        std::cout << j.dump() << '\n';
      }
    } else if (*gc) {
      const auto suite = mscl::run_gradient_suite(grad);
      for (const auto& e : suite.entries) {
        nlohmann::json j;
        j["instance"] = e.instance;
        j["term"] = e.term;
        j["passed"] = e.result.passed;
        j["max_rel_error"] = e.result.max_rel_error;
        j["checked"] = e.result.checked;
        if (!e.result.worst.empty()) j["worst"] = e.result.worst;
        std::cout << j.dump() << '\n';
      }
      nlohmann::json j;
      j["passed"] = suite.passed;
      j["max_rel_error"] = suite.max_rel_error;
      j["seconds"] = suite.seconds;
      std::cout << j.dump() << '\n';
      if (!suite.passed) return 2;
    }
  } catch (const mscl::ConfigError& e) {
    return fail("config", e.what());
  } catch (const mscl::CheckpointError& e) {
    return fail("checkpoint", e.what());
  } catch (const mscl::NonFiniteLoss& e) {
    return fail("non_finite_loss", e.what());
  } catch (const mscl::ShapeError& e) {
    return fail("shape", e.what());
  } catch (const std::exception& e) {
    return fail("runtime", e.what());
  }
  return 0;
}
