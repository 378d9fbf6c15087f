#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "etl/data.hpp"
#include "etl/models.hpp"
#include "etl/tensor.hpp"

namespace etl {

enum class TriggerKind : std::uint8_t { kOptimized = 0, kPatch = 1, kSig = 2, kRandom = 3 };

std::string_view to_string(TriggerKind kind);
TriggerKind parse_trigger_kind(std::string_view name);

/// Additive pixel-space perturbation with an infinity-norm budget.
struct Trigger {
  ImageShape shape;
  double budget = 0.0;
  TriggerKind kind = TriggerKind::kOptimized;
  std::vector<double> perturbation;  // H*W*C, pixel units

  static Trigger zeros(ImageShape shape, double budget, TriggerKind kind = TriggerKind::kOptimized);
  double linf() const;
  Tensor tensor() const;
};

// clip(round(x + t), 0, 255); the label is preserved.
ImageSample embed_trigger(const ImageSample& x, const Trigger& t);
Dataset poison(const Dataset& data, const Trigger& t);
// Same operator on a pixel-unit [B,H,W,C] tensor (no gradient).
Tensor poison_pixels(const Tensor& pixels, const Trigger& t);

struct ReferenceEmbedding {
  std::vector<double> vector;
  std::size_t count = 0;
  std::size_t target_class = 0;

  Tensor tensor() const;
};

// Mean embedding of the reference images; throws on an empty set or a mean
// whose norm is <= 1e-12.
ReferenceEmbedding compute_reference_embedding(const Encoder& encoder, const Dataset& references,
                                               std::size_t target_class);
ReferenceEmbedding reference_from_embeddings(const Tensor& embeddings, std::size_t target_class);

// -mean cos(F(clip(x + t, 0, 255)), r). `trigger` is a [H,W,C] tensor that
// typically requires grad; the clip passes gradient where it is inactive.
Tensor loss_pre(const Encoder& encoder, const Tensor& shadow_pixels, const Tensor& trigger,
                const ReferenceEmbedding& reference);

// -mean cos(F~(x (+) t), r) with the rounded, materialized poisoned batch.
Tensor loss_post(const Encoder& victim, const Tensor& shadow_pixels, const Trigger& trigger,
                 const ReferenceEmbedding& reference);
// -mean cos(F~(x), F(x)).
Tensor loss_func(const Encoder& victim, const Encoder& clean, const Tensor& shadow_pixels);

// Mean cos(F(x (+) t), r) over a dataset; pass nullptr for the clean images.
double mean_similarity(const Encoder& encoder, const Dataset& data, const Trigger* trigger,
                       const ReferenceEmbedding& reference);
// Mean cos(F~(x), F(x)) over a dataset.
double mean_functional_similarity(const Encoder& victim, const Encoder& clean, const Dataset& data);

struct TriggerOptConfig {
  double budget = 10.0;
  std::size_t steps = 2000;
  double lr = 0.5;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  // Observer called after every projected step.
  std::function<void(std::size_t step, const Trigger&)> on_step;
};

struct TriggerResult {
  Trigger trigger;
  std::vector<double> loss_trace;  // one entry per step
};

/// Projected Adam on loss_pre from t = 0; after every step t is clamped
/// elementwise to [-budget, budget].
TriggerResult optimize_trigger(const Encoder& clean, const Dataset& shadow,
                               const ReferenceEmbedding& reference, const TriggerOptConfig& config);

struct BackdoorTarget {
  Trigger trigger;
  ReferenceEmbedding reference;
};

struct BackdoorConfig {
  double lambda = 10.0;
  std::size_t epochs = 20;
  double lr = 1e-4;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
};

struct EpochLoss {
  double total = 0.0;
  double post = 0.0;  // mean over targets
  double func = 0.0;
};

struct BackdoorResult {
  Encoder encoder;
  std::vector<EpochLoss> trace;
};

/// Trains a copy of `clean` on mean_k loss_post_k + lambda * loss_func with
/// Adam. The clean encoder is only read.
BackdoorResult train_backdoor(const Encoder& clean, const Dataset& shadow,
                              std::span<const BackdoorTarget> targets, const BackdoorConfig& config);
BackdoorResult train_backdoor(const Encoder& clean, const Dataset& shadow, const Trigger& trigger,
                              const ReferenceEmbedding& reference, const BackdoorConfig& config);

// Checkerboard block in the bottom-right corner whose side is
// size_fraction of the image width; the additive values drive the covered
// pixels to 0 or 255.
Trigger make_patch_trigger(ImageShape shape, double size_fraction);
// delta * sin(2 pi j f / W) over column j.
Trigger make_sig_trigger(ImageShape shape, double delta = 10.0, double frequency = 32.0);
Trigger make_random_trigger(ImageShape shape, double bound, std::uint64_t seed);

struct SimilarityStats {
  std::size_t pairs = 0;
  double mean = 0.0;
  double min = 0.0;
  double q25 = 0.0;
  double median = 0.0;
  double q75 = 0.0;
  double max = 0.0;
  double threshold = 0.0;
  double fraction_above = 0.0;  // share of pairs with similarity > threshold
};

SimilarityStats similarity_stats(std::vector<double> similarities, double threshold);

// All-pairs d(F(x (+) t), F(x_t)) between poisoned sources and clean
// target-class samples.
SimilarityStats indistinguishability_report(const Encoder& encoder, const Dataset& sources,
                                            const Dataset& target_samples, const Trigger& trigger,
                                            double threshold);

// "ETLT" file format.
void save_trigger(const Trigger& trigger, const std::filesystem::path& path);
Trigger load_trigger(const std::filesystem::path& path);

}  // namespace etl
