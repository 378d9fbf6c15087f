#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "etl/data.hpp"
#include "etl/models.hpp"

namespace etl {

struct FineTuneConfig {
  std::size_t epochs = 20;
  double lr = 1e-4;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  bool keep_snapshots = false;
  HeadKind head = HeadKind::kLinear;
  std::size_t mlp_hidden = 128;

  void validate() const;
};

// Defaults for the two-hidden-layer probe: 500 epochs at lr 1e-4.
FineTuneConfig mlp_probe_config(std::uint64_t seed = 0);

struct FineTuneResult {
  DownstreamModel model;
  std::vector<DownstreamModel> snapshots;  // after each epoch, when requested
  std::vector<double> loss_trace;          // mean cross-entropy per epoch
};

/// Trains a fresh head together with a copy of `encoder` on cross-entropy
/// with Adam. The head starts from a draw seeded only by `config.seed`.
FineTuneResult fine_tune(const Encoder& encoder, const Dataset& train, std::size_t num_classes,
                         const FineTuneConfig& config);

/// Same objective with the encoder frozen; only the head is trained, on
/// embeddings computed once up front.
FineTuneResult linear_probe(const Encoder& encoder, const Dataset& train, std::size_t num_classes,
                            const FineTuneConfig& config);

struct PretrainConfig {
  std::size_t epochs = 10;
  double lr = 3e-3;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
};

// Supervised pre-training of a freshly initialized encoder through a
// throwaway linear head.
Encoder pretrain(const Dataset& pretext, std::size_t num_classes, const PretrainConfig& config,
                 EncoderArch arch = {});

}  // namespace etl
