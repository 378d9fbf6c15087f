#include "etl/attack.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "etl/batching.hpp"
#include "etl/binary_io.hpp"
#include "etl/errors.hpp"
#include "etl/ops.hpp"
#include "etl/optim.hpp"
#include "etl/rng.hpp"

namespace etl {

std::string_view to_string(TriggerKind kind) {
  switch (kind) {
    case TriggerKind::kOptimized: return "optimized";
    case TriggerKind::kPatch: return "patch";
    case TriggerKind::kSig: return "sig";
    case TriggerKind::kRandom: return "random";
  }
  return "unknown";
}

TriggerKind parse_trigger_kind(std::string_view name) {
  for (auto k : {TriggerKind::kOptimized, TriggerKind::kPatch, TriggerKind::kSig,
                 TriggerKind::kRandom}) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown trigger kind '" + std::string(name) +
                    "' (expected optimized, patch, sig or random)");
}

Trigger Trigger::zeros(ImageShape shape, double budget, TriggerKind kind) {
  Trigger t;
  t.shape = shape;
  t.budget = budget;
  t.kind = kind;
  t.perturbation.assign(shape.pixels(), 0.0);
  return t;
}

double Trigger::linf() const {
  double m = 0.0;
  for (double v : perturbation) m = std::max(m, std::abs(v));
  return m;
}

Tensor Trigger::tensor() const {
  return Tensor({shape.height, shape.width, shape.channels}, perturbation);
}

ImageSample embed_trigger(const ImageSample& x, const Trigger& t) {
  if (x.pixels.size() != t.perturbation.size()) {
    throw ShapeError("embed_trigger: image has " + std::to_string(x.pixels.size()) +
                     " values, trigger has " + std::to_string(t.perturbation.size()));
  }
  ImageSample out;
  out.label = x.label;
  out.pixels.resize(x.pixels.size());
  for (std::size_t i = 0; i < x.pixels.size(); ++i) {
    const double v = std::round(static_cast<double>(x.pixels[i]) + t.perturbation[i]);
    out.pixels[i] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
  }
  return out;
}

Dataset poison(const Dataset& data, const Trigger& t) {
  if (!(data.shape() == t.shape)) throw ShapeError("poison: trigger shape differs from dataset");
  Dataset out(data.shape(), data.labeled());
  for (const auto& s : data.samples()) out.add(embed_trigger(s, t));
  return out;
}

Tensor poison_pixels(const Tensor& pixels, const Trigger& t) {
  const std::size_t n = t.perturbation.size();
  if (pixels.rank() != 4 || pixels.size() % n != 0 ||
      pixels.dim(1) * pixels.dim(2) * pixels.dim(3) != n) {
    throw ShapeError("poison_pixels: batch " + shape_string(pixels.shape()) +
                     " does not match trigger");
  }
  auto v = pixels.values();
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::clamp(std::round(v[i] + t.perturbation[i % n]), 0.0, 255.0);
  }
  return Tensor(pixels.shape(), std::move(out));
}

Tensor ReferenceEmbedding::tensor() const { return Tensor({vector.size()}, vector); }

ReferenceEmbedding reference_from_embeddings(const Tensor& embeddings, std::size_t target_class) {
  if (embeddings.rank() != 2 || embeddings.dim(0) == 0) {
    throw Error("reference embedding needs at least one reference image");
  }
  const std::size_t n = embeddings.dim(0), d = embeddings.dim(1);
  ReferenceEmbedding r;
  r.count = n;
  r.target_class = target_class;
  r.vector.assign(d, 0.0);
  auto v = embeddings.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) r.vector[j] += v[i * d + j];
  double ss = 0.0;
  for (double& x : r.vector) {
    x /= static_cast<double>(n);
    ss += x * x;
  }
  if (!(std::sqrt(ss) > 1e-12)) {
    throw DegenerateEmbeddingError("reference embedding mean has norm <= 1e-12");
  }
  return r;
}

ReferenceEmbedding compute_reference_embedding(const Encoder& encoder, const Dataset& references,
                                               std::size_t target_class) {
  if (references.empty()) throw Error("reference set is empty");
  return reference_from_embeddings(encoder.embed(references), target_class);
}

Tensor loss_pre(const Encoder& encoder, const Tensor& shadow_pixels, const Tensor& trigger,
                const ReferenceEmbedding& reference) {
  Tensor poisoned = ops::clip(ops::add(shadow_pixels, trigger), 0.0, 255.0);
  return ops::scale(ops::mean(ops::rowwise_cosine(encoder.forward(poisoned), reference.tensor())),
                    -1.0);
}

Tensor loss_post(const Encoder& victim, const Tensor& shadow_pixels, const Trigger& trigger,
                 const ReferenceEmbedding& reference) {
  Tensor emb = victim.forward(poison_pixels(shadow_pixels, trigger));
  return ops::scale(ops::mean(ops::rowwise_cosine(emb, reference.tensor())), -1.0);
}

Tensor loss_func(const Encoder& victim, const Encoder& clean, const Tensor& shadow_pixels) {
  Tensor anchor = clean.clone().forward(shadow_pixels);
  return ops::scale(ops::mean(ops::rowwise_cosine(victim.forward(shadow_pixels), anchor)), -1.0);
}

double mean_similarity(const Encoder& encoder, const Dataset& data, const Trigger* trigger,
                       const ReferenceEmbedding& reference) {
  if (data.empty()) throw Error("mean_similarity: empty dataset");
  Tensor emb = trigger ? encoder.embed(poison(data, *trigger)) : encoder.embed(data);
  return ops::mean(ops::rowwise_cosine(emb, reference.tensor())).item();
}

double mean_functional_similarity(const Encoder& victim, const Encoder& clean, const Dataset& data) {
  if (data.empty()) throw Error("mean_functional_similarity: empty dataset");
  return ops::mean(ops::rowwise_cosine(victim.embed(data), clean.embed(data))).item();
}

TriggerResult optimize_trigger(const Encoder& clean, const Dataset& shadow,
                               const ReferenceEmbedding& reference, const TriggerOptConfig& config) {
  if (!(config.budget >= 0.0)) throw ConfigError("trigger budget must be >= 0 (infinity-norm bound)");
  if (shadow.empty()) throw Error("optimize_trigger: empty shadow set");
  const Encoder frozen = clean.clone();
  const ImageShape shape = shadow.shape();
  Tensor t = Tensor::zeros({shape.height, shape.width, shape.channels}, true);
  AdamOptions opts;
  opts.lr = config.lr;
  Adam adam({t}, opts);

  TriggerResult result;
  result.trigger = Trigger::zeros(shape, config.budget, TriggerKind::kOptimized);
  if (config.steps == 0) return result;

  BatchStream stream(shadow.size(), config.batch_size, config.seed);
  result.loss_trace.reserve(config.steps);
  for (std::size_t step = 0; step < config.steps; ++step) {
    auto idx = stream.next();
    Tensor loss = loss_pre(frozen, shadow.batch(idx), t, reference);
    adam.zero_grad();
    loss.backward();
    adam.step();
    auto tv = t.mutable_values();
    for (double& v : tv) v = std::clamp(v, -config.budget, config.budget);
    result.loss_trace.push_back(loss.item());
    if (config.on_step) {
      result.trigger.perturbation.assign(tv.begin(), tv.end());
      config.on_step(step, result.trigger);
    }
  }
  result.trigger.perturbation.assign(t.values().begin(), t.values().end());
  return result;
}

BackdoorResult train_backdoor(const Encoder& clean, const Dataset& shadow,
                              std::span<const BackdoorTarget> targets, const BackdoorConfig& config) {
  if (targets.empty()) throw Error("train_backdoor: empty target list");
  if (shadow.empty()) throw Error("train_backdoor: empty shadow set");
  if (!(config.lambda >= 0.0)) throw ConfigError("lambda must be >= 0");

  const Tensor anchors = clean.embed(shadow);
  const std::size_t d = anchors.dim(1);
  std::vector<Dataset> poisoned;
  std::vector<Tensor> refs;
  for (const auto& t : targets) {
    poisoned.push_back(poison(shadow, t.trigger));
    refs.push_back(t.reference.tensor());
  }
  const double target_weight = 1.0 / static_cast<double>(targets.size());

  BackdoorResult result;
  result.encoder = clean.clone();
  result.encoder.set_trainable(true);
  AdamOptions opts;
  opts.lr = config.lr;
  Adam adam(result.encoder.parameters(), opts);

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    EpochLoss acc;
    for (const auto& idx : epoch_batches(shadow.size(), config.batch_size, config.seed, epoch)) {
      Tensor post;
      for (std::size_t k = 0; k < targets.size(); ++k) {
        Tensor emb = result.encoder.forward(poisoned[k].batch(idx));
        Tensor term = ops::scale(ops::mean(ops::rowwise_cosine(emb, refs[k])), -1.0);
        post = post.defined() ? ops::add(post, term) : term;
      }
      post = ops::scale(post, target_weight);
      Tensor loss = post;
      double func_value = 0.0;
      if (config.lambda > 0.0) {
        std::vector<double> anchor(idx.size() * d);
        for (std::size_t i = 0; i < idx.size(); ++i) {
          std::copy_n(anchors.values().begin() + static_cast<std::ptrdiff_t>(idx[i] * d), d,
                      anchor.begin() + static_cast<std::ptrdiff_t>(i * d));
        }
        Tensor clean_emb = result.encoder.forward(shadow.batch(idx));
        Tensor func = ops::scale(
            ops::mean(ops::rowwise_cosine(clean_emb, Tensor({idx.size(), d}, std::move(anchor)))),
            -1.0);
        func_value = func.item();
        loss = ops::add(post, ops::scale(func, config.lambda));
      }
      adam.zero_grad();
      loss.backward();
      adam.step();
      const double w = static_cast<double>(idx.size()) / static_cast<double>(shadow.size());
      acc.total += w * loss.item();
      acc.post += w * post.item();
      acc.func += w * func_value;
    }
    result.trace.push_back(acc);
  }
  result.encoder.set_trainable(false);
  return result;
}

BackdoorResult train_backdoor(const Encoder& clean, const Dataset& shadow, const Trigger& trigger,
                              const ReferenceEmbedding& reference, const BackdoorConfig& config) {
  const BackdoorTarget target{trigger, reference};
  return train_backdoor(clean, shadow, std::span<const BackdoorTarget>(&target, 1), config);
}

Trigger make_patch_trigger(ImageShape shape, double size_fraction) {
  if (!(size_fraction > 0.0) || size_fraction > 1.0) {
    throw ConfigError("patch size fraction must be in (0, 1]");
  }
  Trigger t = Trigger::zeros(shape, 255.0, TriggerKind::kPatch);
  const std::size_t side = std::min(
      shape.height, std::max<std::size_t>(1, static_cast<std::size_t>(
                                                 std::lround(size_fraction * static_cast<double>(shape.width)))));
  for (std::size_t y = shape.height - side; y < shape.height; ++y)
    for (std::size_t x = shape.width - side; x < shape.width; ++x)
      for (std::size_t c = 0; c < shape.channels; ++c) {
        t.perturbation[(y * shape.width + x) * shape.channels + c] = (y + x) % 2 == 0 ? 255.0 : -255.0;
      }
  return t;
}

Trigger make_sig_trigger(ImageShape shape, double delta, double frequency) {
  if (!(delta > 0.0) || !(frequency > 0.0)) throw ConfigError("SIG delta and frequency must be positive");
  Trigger t = Trigger::zeros(shape, delta, TriggerKind::kSig);
  for (std::size_t y = 0; y < shape.height; ++y)
    for (std::size_t x = 0; x < shape.width; ++x) {
      const double v = delta * std::sin(2.0 * std::numbers::pi * static_cast<double>(x) * frequency /
                                        static_cast<double>(shape.width));
      for (std::size_t c = 0; c < shape.channels; ++c) {
        t.perturbation[(y * shape.width + x) * shape.channels + c] = v;
      }
    }
  return t;
}

Trigger make_random_trigger(ImageShape shape, double bound, std::uint64_t seed) {
  if (!(bound > 0.0)) throw ConfigError("random trigger bound must be positive");
  Trigger t = Trigger::zeros(shape, bound, TriggerKind::kRandom);
  Rng rng(seed);
  for (double& v : t.perturbation) v = rng.uniform(-bound, bound);
  return t;
}

SimilarityStats similarity_stats(std::vector<double> sims, double threshold) {
  if (sims.empty()) throw Error("similarity statistics over an empty set");
  std::sort(sims.begin(), sims.end());
  auto quantile = [&](double p) {
    const double h = p * static_cast<double>(sims.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(h));
    const std::size_t hi = std::min(lo + 1, sims.size() - 1);
    return sims[lo] + (h - static_cast<double>(lo)) * (sims[hi] - sims[lo]);
  };
  SimilarityStats s;
  s.pairs = sims.size();
  double total = 0.0;
  std::size_t above = 0;
  for (double v : sims) {
    total += v;
    if (v > threshold) ++above;
  }
  s.mean = total / static_cast<double>(sims.size());
  s.min = sims.front();
  s.max = sims.back();
  s.q25 = quantile(0.25);
  s.median = quantile(0.5);
  s.q75 = quantile(0.75);
  s.threshold = threshold;
  s.fraction_above = static_cast<double>(above) / static_cast<double>(sims.size());
  return s;
}

SimilarityStats indistinguishability_report(const Encoder& encoder, const Dataset& sources,
                                            const Dataset& target_samples, const Trigger& trigger,
                                            double threshold) {
  if (sources.empty() || target_samples.empty()) {
    throw Error("indistinguishability_report: empty sample set");
  }
  Tensor a = ops::l2_normalize(encoder.embed(poison(sources, trigger)));
  Tensor b = ops::l2_normalize(encoder.embed(target_samples));
  const std::size_t d = a.dim(1);
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> sims;
  sims.reserve(a.dim(0) * b.dim(0));
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < b.dim(0); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += av[i * d + k] * bv[j * d + k];
      sims.push_back(s);
    }
  return similarity_stats(std::move(sims), threshold);
}

namespace {
constexpr std::uint16_t kTriggerVersion = 1;
}

void save_trigger(const Trigger& t, const std::filesystem::path& path) {
  if (t.perturbation.size() != t.shape.pixels()) throw ShapeError("trigger size does not match shape");
  io::Writer w;
  w.magic("ETLT");
  w.u16(kTriggerVersion);
  w.u16(static_cast<std::uint16_t>(t.shape.height));
  w.u16(static_cast<std::uint16_t>(t.shape.width));
  w.u8(static_cast<std::uint8_t>(t.shape.channels));
  w.f64(t.budget);
  w.u8(static_cast<std::uint8_t>(t.kind));
  for (double v : t.perturbation) w.f64(v);
  w.save(path);
}

Trigger load_trigger(const std::filesystem::path& path) {
  io::Reader r = io::Reader::open(path, "ETLT");
  r.expect_magic("ETLT");
  const std::uint16_t version = r.u16();
  if (version != kTriggerVersion) throw FormatError("ETLT: unsupported version " + std::to_string(version));
  Trigger t;
  t.shape.height = r.u16();
  t.shape.width = r.u16();
  t.shape.channels = r.u8();
  t.budget = r.f64();
  const std::uint8_t tag = r.u8();
  if (tag > 3) throw FormatError("ETLT: unknown provenance tag " + std::to_string(tag));
  t.kind = static_cast<TriggerKind>(tag);
  t.perturbation.resize(t.shape.pixels());
  for (double& v : t.perturbation) v = r.f64();
  r.expect_end();
  check_finite(t.perturbation, "ETLT trigger values");
  return t;
}

}  // namespace etl
