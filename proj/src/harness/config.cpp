// SPDX-License-Identifier: Apache-2.0
#include "actc/harness/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace actc {

std::string to_string(Level level) {
  switch (level) {
    case Level::kL0: return "L0";
    case Level::kL1: return "L1";
    case Level::kL2: return "L2";
    case Level::kL2_5: return "L2.5";
    case Level::kL3: return "L3";
  }
  return "?";
}

Level parse_level(const std::string& text) {
  std::string t = text;
  if (!t.empty() && (t[0] == 'L' || t[0] == 'l')) t.erase(0, 1);
  if (t == "0") return Level::kL0;
  if (t == "1") return Level::kL1;
  if (t == "2") return Level::kL2;
  if (t == "2.5") return Level::kL2_5;
  if (t == "3") return Level::kL3;
  throw ConfigError("unknown level '" + text + "' (expected L0, L1, L2, L2.5, L3)");
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <typename T>
T parse_int(const std::string& key, const std::string& v) {
  T out{};
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError(key + ": expected a nonnegative integer, got '" + v + "'");
  }
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size() || !std::isfinite(d)) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

using Setter = std::function<void(TrainConfig&, const std::string&, const std::string&)>;

template <typename T>
Setter int_field(T TrainConfig::*f) {
  return [f](TrainConfig& c, const std::string& k, const std::string& v) {
    c.*f = parse_int<T>(k, v);
  };
}

Setter real_field(double TrainConfig::*f) {
  return [f](TrainConfig& c, const std::string& k, const std::string& v) {
    c.*f = parse_real(k, v);
  };
}

Setter text_field(std::string TrainConfig::*f) {
  return [f](TrainConfig& c, const std::string&, const std::string& v) { c.*f = v; };
}

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"model", text_field(&TrainConfig::model)},
      {"loss", text_field(&TrainConfig::loss)},
      {"input_shape", text_field(&TrainConfig::input_shape)},
      {"dataset", text_field(&TrainConfig::dataset)},
      {"train_images", text_field(&TrainConfig::train_images)},
      {"train_labels", text_field(&TrainConfig::train_labels)},
      {"eval_images", text_field(&TrainConfig::eval_images)},
      {"eval_labels", text_field(&TrainConfig::eval_labels)},
      {"train_csv", text_field(&TrainConfig::train_csv)},
      {"eval_csv", text_field(&TrainConfig::eval_csv)},
      {"train_limit", int_field(&TrainConfig::train_limit)},
      {"synthetic_samples", int_field(&TrainConfig::synthetic_samples)},
      {"synthetic_eval", int_field(&TrainConfig::synthetic_eval)},
      {"synthetic_dims", int_field(&TrainConfig::synthetic_dims)},
      {"synthetic_classes", int_field(&TrainConfig::synthetic_classes)},
      {"data_seed", int_field(&TrainConfig::data_seed)},
      {"level", [](TrainConfig& c, const std::string&, const std::string& v) {
         c.level = parse_level(v);
       }},
      {"bits", real_field(&TrainConfig::bits)},
      {"group_size", int_field(&TrainConfig::group_size)},
      {"learning_rate", real_field(&TrainConfig::learning_rate)},
      {"epochs", int_field(&TrainConfig::epochs)},
      {"batch_size", int_field(&TrainConfig::batch_size)},
      {"seed", int_field(&TrainConfig::seed)},
      {"estimator", [](TrainConfig& c, const std::string& k, const std::string& v) {
         if (v == "stale") {
           c.estimator = EstimatorMode::kStale;
         } else if (v == "ema") {
           c.estimator = EstimatorMode::kMovingAverage;
         } else {
           throw ConfigError(k + ": expected stale or ema, got '" + v + "'");
         }
       }},
      {"ema_decay", real_field(&TrainConfig::ema_decay)},
      {"normalize_greedy", [](TrainConfig& c, const std::string& k, const std::string& v) {
         c.normalize_greedy = parse_bool(k, v);
       }},
      {"bn_mode", [](TrainConfig& c, const std::string& k, const std::string& v) {
         if (v == "single") {
           c.bn_mode = BatchNormMode::kSingleCopy;
         } else if (v == "dual") {
           c.bn_mode = BatchNormMode::kDualCopy;
         } else {
           throw ConfigError(k + ": expected single or dual, got '" + v + "'");
         }
       }},
      {"threads", int_field(&TrainConfig::threads)},
      {"eval_every", int_field(&TrainConfig::eval_every)},
      {"variance_every", int_field(&TrainConfig::variance_every)},
      {"variance_trials", int_field(&TrainConfig::variance_trials)},
      {"variance_fraction", real_field(&TrainConfig::variance_fraction)},
      {"variance_batches", int_field(&TrainConfig::variance_batches)},
      {"log_wall_time", [](TrainConfig& c, const std::string& k, const std::string& v) {
         c.log_wall_time = parse_bool(k, v);
       }},
      {"sweep_bits", [](TrainConfig& c, const std::string&, const std::string& v) {
         c.sweep_bits = parse_number_list(v);
       }},
      {"sweep_levels", [](TrainConfig& c, const std::string&, const std::string& v) {
         c.sweep_levels.clear();
         std::stringstream ss(v);
         std::string item;
         while (std::getline(ss, item, ',')) c.sweep_levels.push_back(parse_level(trim(item)));
       }},
  };
  return table;
}

}  // namespace

std::vector<double> parse_number_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_real("list", trim(item)));
  if (out.empty()) throw ConfigError("empty number list");
  return out;
}

void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value) {
  const auto it = setters().find(key);
  if (it == setters().end()) throw ConfigError("unknown key '" + key + "'");
  it->second(cfg, key, value);
}

void validate_config(const TrainConfig& c) {
  if (!(c.bits >= 1.0 && c.bits <= 8.0)) {
    throw ConfigError("bits must lie in [1, 8], got " + std::to_string(c.bits));
  }
  const bool integral = c.bits == std::floor(c.bits);
  if (!integral && c.level != Level::kL2_5 && c.level != Level::kL3) {
    throw ConfigError("non-integer average bits need level L2.5 or L3");
  }
  if (c.group_size == 0) throw ConfigError("group_size must be positive");
  if (c.batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(c.learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(c.ema_decay >= 0.0 && c.ema_decay < 1.0)) throw ConfigError("ema_decay must lie in [0, 1)");
  if (c.loss != "xent" && c.loss != "mse") throw ConfigError("loss must be xent or mse");
  if (c.variance_trials < 2) throw ConfigError("variance_trials must be at least 2");
  if (!(c.variance_fraction >= 0.0 && c.variance_fraction <= 1.0)) {
    throw ConfigError("variance_fraction must lie in [0, 1]");
  }
  for (double b : c.sweep_bits) {
    if (!(b >= 1.0 && b <= 8.0)) throw ConfigError("sweep bits must lie in [1, 8]");
  }
}

TrainConfig parse_config(const std::string& text) {
  TrainConfig cfg;
  std::istringstream in(text);
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    try {
      set_config_value(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  validate_config(cfg);
  return cfg;
}

TrainConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  try {
    return parse_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

}  // namespace actc
