#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "etl/config.hpp"

namespace etl {

enum class EncoderChoice { kClean, kBackdoored, kBoth };
EncoderChoice parse_encoder_choice(std::string_view name);

/// File layout of one experiment directory.
struct Workspace {
  std::filesystem::path root;

  std::filesystem::path dataset(const std::string& split) const;  // data/<split>.etld
  std::filesystem::path references(std::size_t target_class) const;
  std::filesystem::path clean_encoder() const;
  std::filesystem::path backdoored_encoder() const;
  std::filesystem::path trigger(std::size_t target_class) const;
  std::filesystem::path finetuned(bool backdoored) const;
  std::filesystem::path probe(bool backdoored) const;
  std::filesystem::path evaluation() const;
  std::filesystem::path curve_csv() const;
  std::filesystem::path defense(DefenseKind kind) const;
  std::filesystem::path defense_csv(DefenseKind kind) const;
  std::filesystem::path report() const;
};

// Sibling manifest path: <artifact>.manifest.json
std::filesystem::path manifest_path(const std::filesystem::path& artifact);

// Progress lines go to this sink; defaults to stderr.
using LogSink = std::function<void(const std::string&)>;

class Pipeline {
 public:
  Pipeline(ExperimentConfig config, std::filesystem::path root, LogSink log = {});

  const ExperimentConfig& config() const { return config_; }
  const Workspace& workspace() const { return ws_; }

  void gen_data();
  void pretrain();
  void opt_trigger();
  void inject();
  void finetune(EncoderChoice which);
  void probe(EncoderChoice which, std::optional<HeadKind> head = std::nullopt);
  void evaluate(EncoderChoice which);
  void defend(DefenseKind kind, std::optional<std::vector<double>> axis = std::nullopt,
              std::optional<std::size_t> trials = std::nullopt);
  void report();
  void all();

 private:
  void log(const std::string& stage, const std::string& message) const;
  void write_manifest(const std::filesystem::path& artifact, const std::string& stage,
                      std::uint64_t stage_seed, const std::vector<std::filesystem::path>& inputs,
                      nlohmann::json extra = nlohmann::json::object()) const;
  nlohmann::json manifest_base() const;

  ExperimentConfig config_;
  Workspace ws_;
  StageSeeds seeds_;
  LogSink log_;
};

}  // namespace etl
