#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "experiment.hpp"

namespace ex = tempseg::experiment;

namespace {

void configure_logging() {
  spdlog::set_pattern("[%l] %v");
  const char* env = std::getenv("TEMPSEG_LOG_LEVEL");
  const std::string level = env ? env : "info";
  if (level == "error") {
    spdlog::set_level(spdlog::level::err);
  } else if (level == "warn") {
    spdlog::set_level(spdlog::level::warn);
  } else if (level == "debug") {
    spdlog::set_level(spdlog::level::debug);
  } else {
    if (level != "info") spdlog::warn("unknown TEMPSEG_LOG_LEVEL '{}', using info", level);
    spdlog::set_level(spdlog::level::info);
  }
}

struct Overrides {
  std::string config;
  std::vector<std::string> pairs;  // key=value, applied in order
  std::string out;
};

// Flags are translated into key=value pairs so that they go through the same
// validation as the config file.
void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "key = value configuration file")->check(CLI::ExistingFile);
  auto flag = [&](const char* name, const char* key, const char* help) {
    cmd->add_option_function<std::string>(
        name, [&o, key](const std::string& v) { o.pairs.push_back(std::string(key) + "=" + v); }, help);
  };
  flag("--seed", "seed", "random seed");
  flag("--stages", "stages", "number of stages");
  flag("--lambda", "lambda", "contrastive loss weight");
  flag("--tau", "tau", "contrastive temperature");
  flag("--variant", "variant", "ablation variant 1..5");
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_option_function<std::vector<std::string>>(
      "--set", [&o](const std::vector<std::string>& v) { o.pairs.insert(o.pairs.end(), v.begin(), v.end()); },
      "extra key=value overrides");
}

ex::ExperimentConfig build_config(const Overrides& o) {
  ex::ExperimentConfig c;
  if (!o.config.empty()) ex::apply_config_file(c, o.config);
  for (const auto& p : o.pairs) {
    const auto eq = p.find('=');
    if (eq == std::string::npos) throw tempseg::ValidationError("override '" + p + "' is not key=value");
    ex::set_option(c, p.substr(0, eq), p.substr(eq + 1));
  }
  if (!o.out.empty()) c.out_dir = o.out;
  return c;
}

std::string pct(double v) { return fmt::format("{:.2f}", 100.0 * v); }

}  // namespace

int main(int argc, char** argv) {
  configure_logging();
  CLI::App app{"Dense activity segmentation with multi-stage TCNs and multilevel contrast"};
  app.require_subcommand(1);
  Overrides o;

  auto* gen = app.add_subcommand("generate", "write a synthetic dataset (train/val/test) to --out");
  auto* train = app.add_subcommand("train", "train on data_dir and write checkpoint + log to --out");
  auto* eval = app.add_subcommand("eval", "score a checkpoint on a dataset");
  auto* predict = app.add_subcommand("predict", "write per-sample predictions for a dataset");
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");
  auto* ablate = app.add_subcommand("ablate", "run the five ablation variants over several seeds");
  std::string corrupt;
  grad->add_option("--corrupt", corrupt, "scale this op's gradient by 1.5 (fault injection)");
  for (auto* cmd : {gen, train, eval, predict, grad, ablate}) add_common(cmd, o);

  CLI11_PARSE(app, argc, argv);

  try {
    const auto cfg = build_config(o);
    if (gen->parsed()) {
      const auto out = o.out.empty() ? std::filesystem::path(cfg.data_dir) : std::filesystem::path(o.out);
      const auto res = ex::cmd_generate(cfg, out);
      spdlog::info("wrote {} sequences to {} (multi-class window rate at 24: {:.4f})", res.files.size(),
                   out.string(), res.multiclass_window_rate);
    } else if (train->parsed()) {
      const auto res = ex::cmd_train(cfg, [](const ex::EpochRecord& r) {
        double lc = 0, lcon = 0;
        for (double v : r.stats.classification) lc += v;
        for (double v : r.stats.contrast) lcon += v;
        if (r.validation) {
          spdlog::info("epoch {:3d}  ce {:.4f}  con {:.4f}  val F1 {}  JI {}", r.epoch, lc, lcon,
                       pct(r.validation->macro_f1), pct(r.validation->jaccard));
        } else {
          spdlog::info("epoch {:3d}  ce {:.4f}  con {:.4f}", r.epoch, lc, lcon);
        }
      });
      spdlog::info("checkpoint written to {}", cfg.checkpoint_path().string());
    } else if (eval->parsed() || predict->parsed()) {
      const auto res = eval->parsed() ? ex::cmd_eval(cfg) : ex::cmd_predict(cfg);
      const auto& r = res.evaluation.report;
      spdlog::info("{} samples", res.rows);
      if (eval->parsed()) {
        std::cout << "F1 " << pct(r.macro_f1) << "  JI " << pct(r.jaccard) << "  AUC " << pct(r.auc_macro)
                  << "  P " << pct(r.macro_precision) << "  R " << pct(r.macro_recall) << '\n';
      }
    } else if (grad->parsed()) {
      const auto rep = ex::cmd_gradcheck(cfg.train.seed, corrupt);
      for (const auto& l : rep.lines)
        std::cout << fmt::format("{:<24} {:.3e}  checked {:4d}  at kinks {:3d}  {}\n", l.op, l.max_rel_error,
                                 l.checked, l.skipped_at_kinks, l.pass ? "ok" : "FAIL");
      if (!rep.pass()) {
        spdlog::error("gradient check failed");
        return 1;
      }
    } else if (ablate->parsed()) {
      const auto out = std::filesystem::path(cfg.out_dir);
      const auto res = ex::cmd_ablate(cfg, out, [](const ex::AblationRun& r) {
        spdlog::info("variant {} seed {}: F1 {} JI {}", r.variant, r.seed, pct(r.f1), pct(r.jaccard));
      });
      for (const auto& row : res.summary) {
        std::cout << fmt::format("({}) F1 {:.2f} ± {:.2f}  JI {:.2f} ± {:.2f}\n", row.variant, 100 * row.f1_mean,
                                 100 * row.f1_std, 100 * row.ji_mean, 100 * row.ji_std);
      }
    }
  } catch (const tempseg::Error& e) {
    spdlog::error("{}", e.what());
    return 1;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
