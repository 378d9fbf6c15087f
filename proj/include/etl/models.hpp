#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "etl/data.hpp"
#include "etl/tensor.hpp"

namespace etl {

struct EncoderArch {
  ImageShape input{16, 16, 3};
  std::size_t conv1_channels = 16;
  std::size_t conv2_channels = 32;
  std::size_t kernel = 3;
  std::size_t embed_dim = 64;

  std::size_t flat_features() const {
    return (input.height / 4) * (input.width / 4) * conv2_channels;
  }
  bool operator==(const EncoderArch&) const = default;
};

/// Feature extractor: conv-relu-pool, conv-relu-pool, flatten, dense.
///
/// Each conv layer carries a binary per-channel mask applied after its ReLU,
/// so a masked channel is exactly zero for every later layer.
class Encoder {
 public:
  // Number of layers that own parameters: conv1, conv2, dense.
  static constexpr std::size_t kParameterizedLayers = 3;

  Encoder() = default;
  static Encoder init(std::uint64_t seed, EncoderArch arch = {});

  const EncoderArch& arch() const { return arch_; }

  // pixels: [B,H,W,C] in pixel units [0,255]; returns [B, embed_dim].
  Tensor forward(const Tensor& pixels) const;

  struct Trace {
    Tensor conv1;  // post-ReLU, post-mask, pre-pool
    Tensor conv2;
    Tensor embedding;
  };
  Trace forward_trace(const Tensor& pixels) const;

  // Gradient-free embeddings of a whole dataset, evaluated in chunks.
  Tensor embed(const Dataset& data) const;

  std::vector<Tensor> parameters() const;
  static std::vector<std::string> parameter_names();
  void set_trainable(bool on);

  // Re-draws the parameters of layer `layer` (0-based) from `seed`.
  void init_layer(std::size_t layer, std::uint64_t seed);

  std::vector<std::uint8_t>& conv1_mask() { return mask1_; }
  std::vector<std::uint8_t>& conv2_mask() { return mask2_; }
  const std::vector<std::uint8_t>& conv1_mask() const { return mask1_; }
  const std::vector<std::uint8_t>& conv2_mask() const { return mask2_; }

  // Deep copy with fresh, non-trainable leaves.
  Encoder clone() const;

  // True when every parameter value and mask bit matches.
  bool bit_equal(const Encoder& other) const;
  double max_parameter_difference(const Encoder& other) const;

 private:
  Tensor apply_mask(const Tensor& act, const std::vector<std::uint8_t>& mask) const;

  EncoderArch arch_;
  Tensor conv1_w_, conv1_b_, conv2_w_, conv2_b_, dense_w_, dense_b_;
  std::vector<std::uint8_t> mask1_, mask2_;
};

Encoder init_encoder(std::uint64_t seed, EncoderArch arch = {});

// Re-draws the last n parameterized layers from `seed`; earlier layers and
// all masks are kept.
Encoder reinitialize_last_n(const Encoder& encoder, std::size_t n, std::uint64_t seed);

enum class HeadKind { kLinear, kMlp };

/// Classification head on top of embeddings: one dense layer, or two
/// ReLU hidden layers followed by a dense output.
class Head {
 public:
  Head() = default;
  static Head linear(std::size_t in, std::size_t classes, std::uint64_t seed);
  static Head mlp(std::size_t in, std::size_t hidden, std::size_t classes, std::uint64_t seed);
  // Builds a linear head from explicit weights [in, classes] and bias [classes].
  static Head linear_from(std::vector<double> weight, std::vector<double> bias, std::size_t in,
                          std::size_t classes);

  HeadKind kind() const { return kind_; }
  std::size_t num_classes() const { return classes_; }
  std::size_t hidden() const { return hidden_; }
  Tensor forward(const Tensor& embeddings) const;

  std::vector<Tensor> parameters() const;
  std::vector<std::string> parameter_names() const;
  void set_trainable(bool on);
  Head clone() const;

 private:
  HeadKind kind_ = HeadKind::kLinear;
  std::size_t classes_ = 0;
  std::size_t hidden_ = 0;
  std::vector<Tensor> weights_;
  std::vector<Tensor> biases_;
};

struct DownstreamModel {
  Encoder encoder;
  Head head;

  Tensor logits(const Tensor& pixels) const;
  std::vector<std::size_t> predict(const Tensor& pixels) const;
  std::vector<std::size_t> predict(const Dataset& data) const;
  std::vector<Tensor> parameters() const;
  DownstreamModel clone() const;
};

// Row-wise argmax with ties resolved toward the lowest index.
std::vector<std::size_t> argmax_rows(const Tensor& logits);

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct NamedMask {
  std::string name;
  std::vector<std::uint8_t> bits;
};

/// In-memory image of an "ETLC" file.
struct Checkpoint {
  std::string descriptor;
  std::vector<NamedTensor> tensors;
  std::vector<NamedMask> masks;
};

Checkpoint to_checkpoint(const Encoder& encoder);
Checkpoint to_checkpoint(const DownstreamModel& model);
Encoder encoder_from_checkpoint(const Checkpoint& ckpt);
DownstreamModel model_from_checkpoint(const Checkpoint& ckpt);
bool checkpoint_has_head(const Checkpoint& ckpt);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace etl
