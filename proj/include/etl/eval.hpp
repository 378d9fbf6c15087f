#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "etl/attack.hpp"
#include "etl/data.hpp"
#include "etl/downstream.hpp"
#include "etl/models.hpp"
#include "json.hpp"

namespace etl {

// Percentages in [0, 100], full precision.
double accuracy(std::span<const std::size_t> predictions, std::span<const std::size_t> labels);
double clean_accuracy(const DownstreamModel& model, const Dataset& test);

// `predictions` are the model outputs on the poisoned copies of every test
// sample; entries whose ground truth equals `target` are ignored.
double attack_success_rate(std::span<const std::size_t> predictions,
                           std::span<const std::size_t> labels, std::size_t target);
double attack_success_rate(const DownstreamModel& model, const Dataset& test, const Trigger& trigger,
                           std::size_t target);

struct CurvePoint {
  std::size_t epoch = 0;  // 1-based
  double ba = 0.0;
  double asr = 0.0;
};

// Fine-tunes with per-epoch snapshots and evaluates each one.
std::vector<CurvePoint> durability_curve(const Encoder& encoder, const Dataset& train,
                                         const Dataset& test, std::size_t num_classes,
                                         const Trigger& trigger, std::size_t target,
                                         FineTuneConfig config);

// Mean |post-ReLU activation| per conv channel over `clean`.
struct ChannelActivity {
  std::vector<double> conv1;
  std::vector<double> conv2;
};
ChannelActivity channel_activity(const Encoder& encoder, const Dataset& clean);

// Channel indices sorted by ascending activity; ties keep the lower index first.
std::vector<std::size_t> prune_order(std::span<const double> activity);

// Masks the floor(rate * C) least active channels of each conv layer.
Encoder fine_prune(const Encoder& encoder, const Dataset& clean, double rate);
Encoder fine_prune(const Encoder& encoder, const ChannelActivity& activity, double rate);

enum class DefenseKind { kReinit, kPrune };
std::string_view to_string(DefenseKind kind);
DefenseKind parse_defense_kind(std::string_view name);

struct SweepPoint {
  double value = 0.0;
  double ba = 0.0;
  double asr = 0.0;
};

struct DefenseSweep {
  DefenseKind kind = DefenseKind::kReinit;
  std::size_t target_label = 0;
  std::size_t trials = 0;
  std::vector<SweepPoint> points;
};

struct DefenseConfig {
  DefenseKind kind = DefenseKind::kReinit;
  std::vector<double> axis;  // layer counts or prune rates, strictly increasing
  std::size_t trials = 10;
  std::uint64_t seed = 0;
  FineTuneConfig finetune;
};

// Trial 0 reuses finetune.seed, so an identity defense reproduces the
// undefended evaluation; later trials derive fresh fine-tune and defense seeds.
DefenseSweep defense_sweep(const Encoder& encoder, const Dataset& clean_probe, const Dataset& train,
                           const Dataset& test, std::size_t num_classes, const Trigger& trigger,
                           std::size_t target, const DefenseConfig& config);

struct PcaResult {
  std::vector<double> mean;                    // D
  std::vector<std::vector<double>> components;  // k' unit vectors of length D
  std::vector<double> explained_ratio;          // k'
  std::vector<std::vector<double>> points;      // N rows of k' coordinates
  bool rank_deficient = false;                  // k' < requested k
};

// Principal components by power iteration with deflation. Each component is
// signed so that its largest-magnitude entry is positive.
PcaResult pca_project(const Tensor& embeddings, std::size_t k = 2);
std::vector<double> pca_coordinates(const PcaResult& pca, std::span<const double> row);

struct TargetResult {
  std::size_t target_class = 0;  // universe class
  std::size_t task_label = 0;
  double asr = 0.0;
};

struct EvalReport {
  std::optional<double> ca;
  std::optional<double> ba;
  std::optional<double> asr;
  std::vector<CurvePoint> curve;
  std::vector<TargetResult> per_target;
  std::vector<DefenseSweep> sweeps;
  std::optional<std::size_t> indistinguishability_target;  // universe class
  std::optional<SimilarityStats> pre_indistinguishability;
  std::optional<SimilarityStats> post_indistinguishability;
  nlohmann::json manifest = nlohmann::json::object();
};

// Half-up rounding to 2 decimals for serialized percentages.
double round_percent(double value);

nlohmann::json sweep_to_json(const DefenseSweep& sweep);
nlohmann::json report_to_json(const EvalReport& report);
void write_report(const EvalReport& report, const std::filesystem::path& path);
void write_curve_csv(const std::vector<CurvePoint>& curve, const std::filesystem::path& path);
void write_sweep_csv(const DefenseSweep& sweep, const std::filesystem::path& path);

}  // namespace etl
