#include "etl/data.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <set>
#include <string>

#include "etl/binary_io.hpp"
#include "etl/errors.hpp"
#include "etl/rng.hpp"

namespace etl {

void Dataset::add(ImageSample sample) {
  if (sample.pixels.size() != shape_.pixels()) {
    throw ShapeError("image has " + std::to_string(sample.pixels.size()) + " bytes, dataset expects " +
                     std::to_string(shape_.pixels()));
  }
  if (labeled_ != sample.label.has_value()) {
    throw Error(labeled_ ? "labeled dataset requires a label" : "unlabeled dataset rejects labels");
  }
  samples_.push_back(std::move(sample));
}

std::size_t Dataset::label(std::size_t i) const {
  if (!labeled_) throw Error("label query on an unlabeled dataset");
  return *samples_.at(i).label;
}

std::vector<std::size_t> Dataset::labels() const {
  std::vector<std::size_t> out;
  out.reserve(samples_.size());
  for (std::size_t i = 0; i < samples_.size(); ++i) out.push_back(label(i));
  return out;
}

Tensor Dataset::batch(std::span<const std::size_t> indices) const {
  const std::size_t n = shape_.pixels();
  std::vector<double> values(indices.size() * n);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto& px = samples_.at(indices[b]).pixels;
    std::copy(px.begin(), px.end(), values.begin() + static_cast<std::ptrdiff_t>(b * n));
  }
  return Tensor({indices.size(), shape_.height, shape_.width, shape_.channels}, std::move(values));
}

Tensor Dataset::all() const {
  auto idx = iota_indices(size());
  return batch(idx);
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out(shape_, labeled_);
  for (std::size_t i : indices) out.add(samples_.at(i));
  return out;
}

Dataset Dataset::without_labels() const {
  Dataset out(shape_, false);
  for (const auto& s : samples_) out.add({s.pixels, std::nullopt});
  return out;
}

namespace {

constexpr double kProtoLo = 40.0;
constexpr double kProtoHi = 215.0;
constexpr double kMinPrototypeGap = 10.0;

std::vector<double> draw_pattern(ImageShape shape, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(shape.pixels(), 0.0);
  for (std::size_t c = 0; c < shape.channels; ++c) {
    for (int k = 0; k < 4; ++k) {
      const double amp = rng.uniform(0.5, 1.5);
      double fx = static_cast<double>(rng.uniform_index(3));
      const double fy = static_cast<double>(rng.uniform_index(3));
      if (fx == 0.0 && fy == 0.0) fx = 1.0;
      const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      for (std::size_t y = 0; y < shape.height; ++y)
        for (std::size_t x = 0; x < shape.width; ++x) {
          const double arg = 2.0 * std::numbers::pi *
                             (fx * static_cast<double>(x) / static_cast<double>(shape.width) +
                              fy * static_cast<double>(y) / static_cast<double>(shape.height));
          v[(y * shape.width + x) * shape.channels + c] += amp * std::sin(arg + phase);
        }
    }
  }
  const auto [mn, mx] = std::minmax_element(v.begin(), v.end());
  const double lo = *mn, hi = *mx;
  if (hi - lo < 1e-9) return {};
  for (double& x : v) x = kProtoLo + (x - lo) / (hi - lo) * (kProtoHi - kProtoLo);
  return v;
}

}  // namespace

std::vector<ClassPrototype> make_prototypes(std::size_t num_classes, std::uint64_t seed,
                                            ImageShape shape) {
  if (num_classes < 2) throw ConfigError("make_prototypes: num_classes must be >= 2");
  std::vector<ClassPrototype> out;
  for (std::size_t c = 0; c < num_classes; ++c) {
    const std::uint64_t class_seed = derive_seed(seed, "prototype", c);
    for (std::uint64_t attempt = 0;; ++attempt) {
      ClassPrototype p;
      p.class_index = c;
      p.shape = shape;
      p.base = draw_pattern(shape, derive_seed(class_seed, "attempt", attempt));
      if (p.base.empty()) continue;
      bool distinct = std::all_of(out.begin(), out.end(), [&](const ClassPrototype& q) {
        return mean_abs_difference(p, q) > kMinPrototypeGap;
      });
      if (distinct) {
        out.push_back(std::move(p));
        break;
      }
    }
  }
  return out;
}

ImageSample sample_class(const ClassPrototype& prototype, std::uint64_t noise_seed) {
  Rng rng(noise_seed);
  const double shift = rng.uniform(prototype.jitter_lo, prototype.jitter_hi);
  ImageSample s;
  s.pixels.resize(prototype.base.size());
  for (std::size_t i = 0; i < prototype.base.size(); ++i) {
    const double noise = rng.uniform(-prototype.noise_amplitude, prototype.noise_amplitude);
    const double v = std::round(prototype.base[i] + noise + shift);
    s.pixels[i] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
  }
  return s;
}

double mean_abs_difference(const ClassPrototype& a, const ClassPrototype& b) {
  if (a.base.size() != b.base.size()) throw ShapeError("prototype sizes differ");
  double s = 0.0;
  for (std::size_t i = 0; i < a.base.size(); ++i) s += std::abs(a.base[i] - b.base[i]);
  return s / static_cast<double>(a.base.size());
}

std::size_t nearest_prototype(const ImageSample& sample,
                              std::span<const ClassPrototype> prototypes) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < prototypes.size(); ++k) {
    const auto& base = prototypes[k].base;
    if (base.size() != sample.pixels.size()) throw ShapeError("nearest_prototype: size mismatch");
    double d = 0.0;
    for (std::size_t i = 0; i < base.size(); ++i) {
      const double e = static_cast<double>(sample.pixels[i]) - base[i];
      d += e * e;
    }
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

void DataConfig::validate() const {
  if (num_classes < 2) throw ConfigError("data.num_classes must be >= 2");
  if (num_classes > UINT16_MAX) throw ConfigError("data.num_classes must fit in u16 labels");
  if (image_size < 4 || image_size % 4 != 0) {
    throw ConfigError("data.image_size must be a positive multiple of 4");
  }
  if (shadow_size == 0) throw ConfigError("data.shadow_size must be >= 1");
  if (reference_count == 0) throw ConfigError("data.reference_count must be >= 1");
  if (train_per_class == 0 || test_per_class == 0) {
    throw ConfigError("data.train_per_class and data.test_per_class must be >= 1");
  }
  if (downstream_classes.size() < 2) throw ConfigError("data.downstream_classes needs >= 2 classes");
  std::set<std::size_t> seen;
  for (std::size_t c : downstream_classes) {
    if (c >= num_classes) throw ConfigError("data.downstream_classes entry >= num_classes");
    if (!seen.insert(c).second) throw ConfigError("data.downstream_classes has duplicates");
  }
  if (targets.empty()) throw ConfigError("data.targets must name at least one target class");
  std::set<std::size_t> tseen;
  for (std::size_t t : targets) {
    if (t >= num_classes) {
      throw ConfigError("target class " + std::to_string(t) + " >= num_classes " +
                        std::to_string(num_classes));
    }
    if (!tseen.insert(t).second) throw ConfigError("data.targets has duplicates");
  }
  if (noise_amplitude < 0 || jitter < 0 || reference_noise_amplitude < 0) {
    throw ConfigError("data noise amplitudes and jitter must be >= 0");
  }
}

std::size_t DatasetBundle::task_label(std::size_t universe_class) const {
  const auto& dc = config.downstream_classes;
  auto it = std::find(dc.begin(), dc.end(), universe_class);
  if (it == dc.end()) {
    throw ConfigError("class " + std::to_string(universe_class) + " is not part of the downstream task");
  }
  return static_cast<std::size_t>(it - dc.begin());
}

ImageShape DatasetBundle::shape() const {
  return {config.image_size, config.image_size, 3};
}

namespace {

Dataset draw_unlabeled(const std::vector<ClassPrototype>& protos, std::size_t count,
                       std::uint64_t seed, ImageShape shape) {
  Dataset out(shape, false);
  Rng class_rng(derive_seed(seed, "class"));
  for (std::size_t i = 0; i < count; ++i) {
    const auto& p = protos[class_rng.uniform_index(protos.size())];
    out.add({sample_class(p, derive_seed(seed, "sample", i)).pixels, std::nullopt});
  }
  return out;
}

}  // namespace

DatasetBundle build_bundle(const DataConfig& config) {
  config.validate();
  DatasetBundle b;
  b.config = config;
  const ImageShape shape = b.shape();
  b.prototypes = make_prototypes(config.num_classes, derive_seed(config.seed, "prototypes"), shape);
  for (auto& p : b.prototypes) {
    p.noise_amplitude = config.noise_amplitude;
    p.jitter_lo = -config.jitter;
    p.jitter_hi = config.jitter;
  }

  b.pretext = Dataset(shape, true);
  const std::uint64_t pretext_seed = derive_seed(config.seed, "pretext");
  for (std::size_t i = 0; i < config.pretext_per_class; ++i) {
    for (std::size_t c = 0; c < config.num_classes; ++c) {
      ImageSample s = sample_class(b.prototypes[c], derive_seed(pretext_seed, "sample",
                                                                i * config.num_classes + c));
      s.label = static_cast<std::uint16_t>(c);
      b.pretext.add(std::move(s));
    }
  }

  b.shadow = draw_unlabeled(b.prototypes, config.shadow_size, derive_seed(config.seed, "shadow"),
                            shape);
  b.shadow_holdout = draw_unlabeled(b.prototypes, config.shadow_holdout_size,
                                    derive_seed(config.seed, "shadow-holdout"), shape);

  const std::uint64_t ref_seed = derive_seed(config.seed, "reference");
  for (std::size_t t : config.targets) {
    ClassPrototype shifted = b.prototypes[t];
    shifted.noise_amplitude = config.reference_noise_amplitude;
    shifted.jitter_lo = -config.jitter + config.reference_jitter_shift;
    shifted.jitter_hi = config.jitter + config.reference_jitter_shift;
    Dataset refs(shape, true);
    const std::uint64_t class_seed = derive_seed(ref_seed, "class", t);
    for (std::size_t i = 0; i < config.reference_count; ++i) {
      ImageSample s = sample_class(shifted, derive_seed(class_seed, "sample", i));
      s.label = static_cast<std::uint16_t>(t);
      refs.add(std::move(s));
    }
    b.references.emplace(t, std::move(refs));
  }

  auto draw_task = [&](std::string_view tag, std::size_t per_class) {
    Dataset out(shape, true);
    const std::uint64_t seed = derive_seed(config.seed, tag);
    const auto& dc = config.downstream_classes;
    for (std::size_t i = 0; i < per_class; ++i) {
      for (std::size_t k = 0; k < dc.size(); ++k) {
        ImageSample s = sample_class(b.prototypes[dc[k]],
                                     derive_seed(derive_seed(seed, "class", dc[k]), "sample", i));
        s.label = static_cast<std::uint16_t>(k);
        out.add(std::move(s));
      }
    }
    return out;
  };
  b.downstream_train = draw_task("downstream-train", config.train_per_class);
  b.downstream_test = draw_task("downstream-test", config.test_per_class);
  return b;
}

namespace {
constexpr std::uint16_t kDatasetVersion = 1;
}

std::size_t dataset_file_size(const Dataset& dataset) {
  return 16 + dataset.size() * ((dataset.labeled() ? 2 : 0) + dataset.shape().pixels());
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& path) {
  const ImageShape& s = dataset.shape();
  if (s.height > UINT16_MAX || s.width > UINT16_MAX || s.channels > UINT8_MAX) {
    throw FormatError("ETLD: image shape exceeds header field widths");
  }
  io::Writer w;
  w.magic("ETLD");
  w.u16(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(dataset.size()));
  w.u16(static_cast<std::uint16_t>(s.height));
  w.u16(static_cast<std::uint16_t>(s.width));
  w.u8(static_cast<std::uint8_t>(s.channels));
  w.u8(dataset.labeled() ? 1 : 0);
  for (const auto& sample : dataset.samples()) {
    if (dataset.labeled()) w.u16(*sample.label);
    w.bytes(sample.pixels.data(), sample.pixels.size());
  }
  w.save(path);
}

Dataset load_dataset(const std::filesystem::path& path) {
  io::Reader r = io::Reader::open(path, "ETLD");
  r.expect_magic("ETLD");
  const std::uint16_t version = r.u16();
  if (version != kDatasetVersion) {
    throw FormatError("ETLD: unsupported version " + std::to_string(version));
  }
  const std::uint32_t count = r.u32();
  ImageShape shape;
  shape.height = r.u16();
  shape.width = r.u16();
  shape.channels = r.u8();
  const std::uint8_t flag = r.u8();
  if (flag > 1) throw FormatError("ETLD: labeled flag must be 0 or 1");
  if (shape.pixels() == 0) throw FormatError("ETLD: zero-sized image shape");
  Dataset out(shape, flag == 1);
  for (std::uint32_t i = 0; i < count; ++i) {
    ImageSample s;
    if (flag) s.label = r.u16();
    s.pixels.resize(shape.pixels());
    r.bytes(s.pixels.data(), s.pixels.size());
    out.add(std::move(s));
  }
  r.expect_end();
  return out;
}

}  // namespace etl
