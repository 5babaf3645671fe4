// SPDX-License-Identifier: Apache-2.0
// actc: train, account memory, sweep bit widths, and profile gradient
// variance for activation-compressed training runs.
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "actc/harness/config.hpp"
#include "actc/harness/dataset.hpp"
#include "actc/harness/levels.hpp"
#include "actc/harness/memory.hpp"
#include "actc/harness/sweep.hpp"
#include "actc/harness/train.hpp"
#include "actc/variance.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;

struct Overrides {
  std::string config;
  std::string out;
  std::optional<std::string> level, bits, group_size, seed, estimator, ema_decay, threads, trials;
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "config file (key = value lines)");
  cmd->add_option("--level", o.level, "optimization level: L0, L1, L2, L2.5, L3");
  cmd->add_option("--bits", o.bits, "average bits (sweep: comma-separated list)");
  cmd->add_option("--group-size", o.group_size, "quantization group size");
  cmd->add_option("--seed", o.seed, "model and quantization seed");
  cmd->add_option("--out", o.out, "output CSV path (default: stdout)");
  cmd->add_option("--estimator", o.estimator, "gradient magnitude estimator: stale or ema");
  cmd->add_option("--ema-decay", o.ema_decay, "moving-average decay");
  cmd->add_option("--threads", o.threads, "quantization threads");
  cmd->add_option("--trials", o.trials, "Monte-Carlo trials for variance estimates");
}

actc::TrainConfig resolve(const Overrides& o, bool bits_list) {
  actc::TrainConfig cfg = o.config.empty() ? actc::TrainConfig{} : actc::load_config(o.config);
  auto set = [&cfg](const char* key, const std::optional<std::string>& v) {
    if (v) actc::set_config_value(cfg, key, *v);
  };
  set("level", o.level);
  if (bits_list) {
    set("sweep_bits", o.bits);
  } else {
    set("bits", o.bits);
  }
  set("group_size", o.group_size);
  set("seed", o.seed);
  set("estimator", o.estimator);
  set("ema_decay", o.ema_decay);
  set("threads", o.threads);
  set("variance_trials", o.trials);
  actc::validate_config(cfg);
  return cfg;
}

void emit(const std::string& path, const std::string& text) {
  if (path.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw actc::ConfigError("cannot write '" + path + "'");
  f << text;
}

// Trained model when epochs > 0, the initialized one otherwise.
std::unique_ptr<actc::GraphExecutor> prepare_model(const actc::TrainConfig& cfg,
                                                   const actc::DataSplit& data) {
  if (cfg.epochs > 0) return actc::train(cfg, data).model;
  return std::make_unique<actc::GraphExecutor>(actc::build_model_for(cfg, data.train));
}

actc::Batch first_batch(const actc::TrainConfig& cfg, const actc::Dataset& d) {
  std::vector<size_t> rows;
  for (size_t i = 0; i < std::min(cfg.batch_size, d.size()); ++i) rows.push_back(i);
  return actc::make_batch(d, rows);
}

int run_train(const Overrides& o) {
  const auto cfg = resolve(o, false);
  const auto data = actc::load_dataset(cfg);
  const auto result = actc::train(cfg, data);
  emit(o.out, result.log.to_csv());
  std::cerr << "final train loss " << result.final_loss << ", eval loss " << result.final_eval.loss;
  if (result.final_eval.accuracy) std::cerr << ", eval accuracy " << *result.final_eval.accuracy;
  std::cerr << '\n';
  return 0;
}

int run_memreport(const Overrides& o) {
  const auto report = actc::memory_report(resolve(o, false));
  std::cout << report.to_text();
  if (!o.out.empty()) emit(o.out, report.to_csv());
  return 0;
}

int run_sweep(const Overrides& o) {
  const auto cfg = resolve(o, true);
  const auto data = actc::load_dataset(cfg);
  emit(o.out, actc::sweep_csv(actc::run_bits_sweep(cfg, data)));
  return 0;
}

int run_profile(const Overrides& o) {
  const auto cfg = resolve(o, false);
  const auto data = actc::load_dataset(cfg);
  auto model = prepare_model(cfg, data);
  model->set_seed(cfg.seed);
  auto alloc = actc::apply_level(*model, cfg.level, cfg.bits, cfg);
  const size_t batch = std::min(cfg.batch_size, data.train.size());
  const actc::BatchSource source = [&](size_t index) {
    const auto order = actc::shuffled_rows(data.train.size(), cfg.seed + 0x1000 + index);
    return actc::make_batch(data.train, std::span<const size_t>(order.data(), batch));
  };
  auto report = actc::decompose_variance(*model, source, actc::loss_kind(cfg),
                                         cfg.variance_trials, cfg.variance_batches);
  report.bits = actc::to_string(cfg.level) + "@" + std::to_string(cfg.bits);
  emit(o.out, report.to_csv());
  return 0;
}

int run_heterogeneity(const Overrides& o) {
  const auto cfg = resolve(o, false);
  const auto data = actc::load_dataset(cfg);
  auto model = prepare_model(cfg, data);
  model->set_group_size(cfg.group_size);
  const auto report =
      actc::heterogeneity_report(*model, first_batch(cfg, data.train), actc::loss_kind(cfg));
  if (o.out.empty()) {
    std::cout << report.range_histogram_csv() << '\n'
              << report.sample_sensitivity_csv() << '\n'
              << report.layer_sensitivity_csv();
  } else {
    emit(o.out + ".ranges.csv", report.range_histogram_csv());
    emit(o.out + ".samples.csv", report.sample_sensitivity_csv());
    emit(o.out + ".layers.csv", report.layer_sensitivity_csv());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Activation-compressed training engine"};
  app.require_subcommand(1);
  Overrides train_o, mem_o, sweep_o, prof_o, het_o;
  auto* train = app.add_subcommand("train", "train a model and write the metrics CSV");
  auto* mem = app.add_subcommand("memreport", "report saved-context bits for one batch");
  auto* sweep = app.add_subcommand("sweep", "train across bit widths and levels");
  auto* prof = app.add_subcommand("profile-variance", "per-layer gradient variance decomposition");
  auto* het = app.add_subcommand("heterogeneity", "range and sensitivity histograms");
  add_common(train, train_o);
  add_common(mem, mem_o);
  add_common(sweep, sweep_o);
  add_common(prof, prof_o);
  add_common(het, het_o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (*train) return run_train(train_o);
    if (*mem) return run_memreport(mem_o);
    if (*sweep) return run_sweep(sweep_o);
    if (*prof) return run_profile(prof_o);
    if (*het) return run_heterogeneity(het_o);
  } catch (const actc::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const actc::DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
