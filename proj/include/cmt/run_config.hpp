// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <fstream>

#include "cmt/dataset.hpp"
#include "cmt/trainer.hpp"

namespace cmt {

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"optimizer", c.optimizer == OptimizerKind::sgd ? "sgd" : "adamw"},
       {"learning_rate", c.learning_rate},
       {"weight_decay", c.weight_decay},
       {"batch_size", c.batch_size},
       {"max_epochs", c.max_epochs},
       {"patience", c.patience},
       {"min_delta", c.min_delta},
       {"workers", c.workers},
       {"parallel_workers", c.parallel_workers},
       {"seed", c.seed},
       {"clip_norm", c.clip_norm},
       {"shuffle", c.shuffle}};
}

/// Missing keys keep their defaults.
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  auto opt = [&j](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
  };
  if (j.contains("optimizer")) c.optimizer = parse_optimizer(j.at("optimizer").get<std::string>());
  opt("learning_rate", c.learning_rate);
  opt("weight_decay", c.weight_decay);
  opt("batch_size", c.batch_size);
  opt("max_epochs", c.max_epochs);
  opt("patience", c.patience);
  opt("min_delta", c.min_delta);
  opt("workers", c.workers);
  opt("parallel_workers", c.parallel_workers);
  opt("seed", c.seed);
  opt("clip_norm", c.clip_norm);
  opt("shuffle", c.shuffle);
}

/// Everything a run needs, resolved before any module starts.
/// One seed drives data generation, initialization, shuffling and dropout.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "run";
  ModelConfig model;
  TrainConfig train;
  SyntheticSpec data;
  std::size_t val_per_class = 20;
  std::size_t test_per_class = 20;
  bool wall_time = false;
  nlohmann::json serving;  ///< optional serving topology, passed through as-is

  /// Propagates the seed and the data geometry into the nested sections.
  void resolve() {
    data.seed = seed;
    train.seed = seed;
    data.apply_to(model);
  }

  void validate() const {
    data.validate();
    model.validate();
    if (val_per_class == 0) throw ConfigError("val_per_class must be >= 1");
    if (train.batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (train.workers == 0) throw ConfigError("workers must be >= 1");
    if (train.max_epochs == 0) throw ConfigError("max_epochs must be >= 1");
    if (!(train.learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  }
};

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"seed", c.seed},
       {"output_dir", c.output_dir},
       {"model", c.model},
       {"train", c.train},
       {"data", c.data},
       {"val_per_class", c.val_per_class},
       {"test_per_class", c.test_per_class},
       {"wall_time", c.wall_time}};
  if (!c.serving.is_null()) j["serving"] = c.serving;
}

inline void from_json(const nlohmann::json& j, RunConfig& c) {
  // Overlay onto the current values so partial files work.
  nlohmann::json base = c;
  base.merge_patch(j);
  c.seed = base.at("seed").get<std::uint64_t>();
  c.output_dir = base.at("output_dir").get<std::string>();
  c.model = base.at("model").get<ModelConfig>();
  c.train = base.at("train").get<TrainConfig>();
  c.data = base.at("data").get<SyntheticSpec>();
  c.val_per_class = base.at("val_per_class").get<std::size_t>();
  c.test_per_class = base.at("test_per_class").get<std::size_t>();
  c.wall_time = base.at("wall_time").get<bool>();
  if (base.contains("serving")) c.serving = base.at("serving");
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

/// Defaults overlaid by the file (when given); flags are applied by the caller.
inline RunConfig load_run_config(const std::string& path) {
  RunConfig c;
  if (path.empty()) return c;
  try {
    c = read_json_file(path).get<RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return c;
}

inline void write_run_config(const std::filesystem::path& dir, const RunConfig& c) {
  std::filesystem::create_directories(dir);
  std::ofstream out(dir / "run_config.json", std::ios::trunc);
  if (!out) throw InputError("cannot write " + (dir / "run_config.json").string());
  out << nlohmann::json(c).dump(2) << '\n';
}

}  // namespace cmt
