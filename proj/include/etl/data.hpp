#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "etl/tensor.hpp"

namespace etl {

struct ImageShape {
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t channels = 3;

  std::size_t pixels() const { return height * width * channels; }
  bool operator==(const ImageShape&) const = default;
};

// Row-major H x W x C bytes with an optional class label.
struct ImageSample {
  std::vector<std::uint8_t> pixels;
  std::optional<std::uint16_t> label;
};

/// A homogeneous collection of images. `labeled` is a dataset-wide flag;
/// an unlabeled dataset refuses label queries.
class Dataset {
 public:
  Dataset() = default;
  Dataset(ImageShape shape, bool labeled) : shape_(shape), labeled_(labeled) {}

  const ImageShape& shape() const { return shape_; }
  bool labeled() const { return labeled_; }
  std::size_t size() const { return samples_.size(); }
  bool empty() const { return samples_.empty(); }

  void add(ImageSample sample);
  const ImageSample& operator[](std::size_t i) const { return samples_[i]; }
  const std::vector<ImageSample>& samples() const { return samples_; }

  std::size_t label(std::size_t i) const;
  std::vector<std::size_t> labels() const;

  // Pixel-unit [B,H,W,C] tensor for the given sample indices.
  Tensor batch(std::span<const std::size_t> indices) const;
  Tensor all() const;

  Dataset subset(std::span<const std::size_t> indices) const;
  Dataset without_labels() const;

 private:
  ImageShape shape_;
  bool labeled_ = false;
  std::vector<ImageSample> samples_;
};

/// Low-frequency base pattern for one synthetic class.
struct ClassPrototype {
  std::size_t class_index = 0;
  ImageShape shape;
  std::vector<double> base;  // H*W*C values in [0, 255]
  double noise_amplitude = 25.0;
  double jitter_lo = -15.0;
  double jitter_hi = 15.0;
};

std::vector<ClassPrototype> make_prototypes(std::size_t num_classes, std::uint64_t seed,
                                            ImageShape shape = {});

// clip(prototype + U[-a, a] noise + per-image brightness shift, 0, 255),
// rounded to integers.
ImageSample sample_class(const ClassPrototype& prototype, std::uint64_t noise_seed);

double mean_abs_difference(const ClassPrototype& a, const ClassPrototype& b);

// Index of the prototype closest in pixel-space L2 (lowest index on ties).
std::size_t nearest_prototype(const ImageSample& sample,
                              std::span<const ClassPrototype> prototypes);

struct DataConfig {
  std::uint64_t seed = 0;
  std::size_t num_classes = 8;
  std::size_t image_size = 16;
  std::size_t shadow_size = 4096;
  std::size_t shadow_holdout_size = 512;
  std::size_t pretext_per_class = 256;
  std::vector<std::size_t> downstream_classes = {2, 3, 4, 5, 6, 7};
  std::size_t train_per_class = 256;
  std::size_t test_per_class = 128;
  std::size_t reference_count = 10;
  std::vector<std::size_t> targets = {4};
  double noise_amplitude = 25.0;
  double jitter = 15.0;
  // Reference images model internet-sourced photos: their brightness
  // jitter window is shifted and their noise amplitude differs.
  double reference_jitter_shift = 8.0;
  double reference_noise_amplitude = 30.0;

  void validate() const;
};

struct DatasetBundle {
  DataConfig config;
  std::vector<ClassPrototype> prototypes;
  Dataset pretext;             // labeled, all classes (publisher's pre-training data)
  Dataset shadow;              // unlabeled
  Dataset shadow_holdout;      // unlabeled, for held-out statistics
  std::map<std::size_t, Dataset> references;  // target class -> its reference images
  Dataset downstream_train;    // labels are task indices into downstream_classes
  Dataset downstream_test;

  // Task-space label of a universe class in the downstream task.
  std::size_t task_label(std::size_t universe_class) const;
  std::size_t num_task_classes() const { return config.downstream_classes.size(); }
  ImageShape shape() const;
};

DatasetBundle build_bundle(const DataConfig& config);

// "ETLD" file format.
void save_dataset(const Dataset& dataset, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);
std::size_t dataset_file_size(const Dataset& dataset);

}  // namespace etl
