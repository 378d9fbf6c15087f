#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "etl/attack.hpp"
#include "etl/data.hpp"
#include "etl/downstream.hpp"
#include "etl/eval.hpp"
#include "json.hpp"

namespace etl {

inline constexpr int kConfigSchemaVersion = 1;

struct TriggerSettings {
  TriggerKind kind = TriggerKind::kOptimized;
  double budget = 10.0;
  std::size_t steps = 2000;
  double lr = 0.5;
  std::size_t batch_size = 64;
  double patch_fraction = 50.0 / 224.0;
  double sig_delta = 10.0;
  double sig_frequency = 32.0;
  double random_bound = 5.0;
};

struct ProbeSettings {
  HeadKind head = HeadKind::kLinear;
  std::size_t epochs = 20;      // linear head
  std::size_t mlp_epochs = 500;  // two-hidden-layer head
  double lr = 1e-4;
  std::size_t batch_size = 32;
  std::size_t mlp_hidden = 128;
};

struct DefenseSettings {
  std::vector<double> reinit_layers = {0, 1, 2, 3};
  std::vector<double> prune_rates = {0.0, 0.25, 0.5, 0.75};
  std::size_t trials = 10;
};

struct EvalSettings {
  double epsilon_pre = 0.8;
  double epsilon_post = 0.8;
  DefenseSettings defense;
};

// Which optional stages `all` runs.
struct StageFlags {
  bool probe = true;
  bool durability = true;
  bool indistinguishability = true;
  bool defense = true;
};

struct ExperimentConfig {
  int schema_version = kConfigSchemaVersion;
  std::uint64_t seed = 0;
  std::string output_dir = "out";
  DataConfig data;  // data.seed is ignored; the data stage seed is derived
  PretrainConfig pretrain;
  TriggerSettings trigger;
  BackdoorConfig backdoor;
  FineTuneConfig finetune;
  ProbeSettings probe;
  EvalSettings eval;
  StageFlags stages;
};

// Parses and validates; missing keys take their defaults, unknown keys and
// violated invariants raise ConfigError naming the offending key.
ExperimentConfig config_from_json(const nlohmann::json& j);
// Normalized form with every key present.
nlohmann::json config_to_json(const ExperimentConfig& config);
ExperimentConfig load_config(const std::filesystem::path& path);
void validate(const ExperimentConfig& config);

std::uint64_t config_hash(const ExperimentConfig& config);
std::string hex64(std::uint64_t value);

struct StageSeeds {
  std::uint64_t data = 0;
  std::uint64_t pretrain = 0;
  std::uint64_t trigger = 0;
  std::uint64_t backdoor = 0;
  std::uint64_t finetune = 0;
  std::uint64_t probe = 0;
  std::uint64_t defense = 0;

  nlohmann::json to_json() const;
};

StageSeeds stage_seeds(const ExperimentConfig& config);

// Module configurations with their stage seeds filled in.
DataConfig data_config(const ExperimentConfig& config);
PretrainConfig pretrain_config(const ExperimentConfig& config);
TriggerOptConfig trigger_config(const ExperimentConfig& config, std::size_t target_class);
BackdoorConfig backdoor_config(const ExperimentConfig& config);
FineTuneConfig finetune_config(const ExperimentConfig& config);
FineTuneConfig probe_config(const ExperimentConfig& config);
DefenseConfig defense_config(const ExperimentConfig& config, DefenseKind kind);

}  // namespace etl
