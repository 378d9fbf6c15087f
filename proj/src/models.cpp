#include "etl/models.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "etl/binary_io.hpp"
#include "etl/errors.hpp"
#include "etl/ops.hpp"
#include "etl/rng.hpp"

namespace etl {

namespace {

constexpr std::size_t kEmbedChunk = 256;

// Kaiming-uniform weights (bound sqrt(6/fan_in)) and uniform biases
// (bound 1/sqrt(fan_in)).
void kaiming_fill(Tensor& weight, Tensor& bias, std::size_t fan_in, std::uint64_t seed) {
  Rng rng(seed);
  const double wb = std::sqrt(6.0 / static_cast<double>(fan_in));
  const double bb = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& w : weight.mutable_values()) w = rng.uniform(-wb, wb);
  for (double& b : bias.mutable_values()) b = rng.uniform(-bb, bb);
}

bool values_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.values().begin(), a.values().end(),
                                              b.values().begin());
}

}  // namespace

Encoder Encoder::init(std::uint64_t seed, EncoderArch arch) {
  if (arch.input.height % 4 != 0 || arch.input.width % 4 != 0 || arch.input.height == 0) {
    throw ShapeError("encoder input height/width must be positive multiples of 4");
  }
  Encoder e;
  e.arch_ = arch;
  const std::size_t k = arch.kernel;
  e.conv1_w_ = Tensor::zeros({arch.conv1_channels, k, k, arch.input.channels});
  e.conv1_b_ = Tensor::zeros({arch.conv1_channels});
  e.conv2_w_ = Tensor::zeros({arch.conv2_channels, k, k, arch.conv1_channels});
  e.conv2_b_ = Tensor::zeros({arch.conv2_channels});
  e.dense_w_ = Tensor::zeros({arch.flat_features(), arch.embed_dim});
  e.dense_b_ = Tensor::zeros({arch.embed_dim});
  e.mask1_.assign(arch.conv1_channels, 1);
  e.mask2_.assign(arch.conv2_channels, 1);
  for (std::size_t layer = 0; layer < kParameterizedLayers; ++layer) {
    e.init_layer(layer, seed);
  }
  return e;
}

void Encoder::init_layer(std::size_t layer, std::uint64_t seed) {
  const std::uint64_t s = derive_seed(seed, "layer", layer);
  const std::size_t k = arch_.kernel;
  switch (layer) {
    case 0: kaiming_fill(conv1_w_, conv1_b_, k * k * arch_.input.channels, s); break;
    case 1: kaiming_fill(conv2_w_, conv2_b_, k * k * arch_.conv1_channels, s); break;
    case 2: kaiming_fill(dense_w_, dense_b_, arch_.flat_features(), s); break;
    default: throw Error("encoder layer index out of range");
  }
}

Encoder init_encoder(std::uint64_t seed, EncoderArch arch) { return Encoder::init(seed, arch); }

Encoder reinitialize_last_n(const Encoder& encoder, std::size_t n, std::uint64_t seed) {
  if (n > Encoder::kParameterizedLayers) {
    throw Error("reinitialize_last_n: n=" + std::to_string(n) + " exceeds the " +
                std::to_string(Encoder::kParameterizedLayers) + " parameterized layers");
  }
  Encoder out = encoder.clone();
  for (std::size_t layer = Encoder::kParameterizedLayers - n; layer < Encoder::kParameterizedLayers;
       ++layer) {
    out.init_layer(layer, seed);
  }
  return out;
}

Tensor Encoder::apply_mask(const Tensor& act, const std::vector<std::uint8_t>& mask) const {
  if (std::all_of(mask.begin(), mask.end(), [](std::uint8_t m) { return m == 1; })) return act;
  const std::size_t channels = mask.size();
  return ops::mul(act, Tensor({channels}, std::vector<double>(mask.begin(), mask.end())));
}

Encoder::Trace Encoder::forward_trace(const Tensor& pixels) const {
  if (!conv1_w_.defined()) throw Error("encoder is not initialized");
  const ImageShape& in = arch_.input;
  if (pixels.rank() != 4 || pixels.dim(1) != in.height || pixels.dim(2) != in.width ||
      pixels.dim(3) != in.channels) {
    throw ShapeError("encoder expects [B," + std::to_string(in.height) + "," +
                     std::to_string(in.width) + "," + std::to_string(in.channels) + "], got " +
                     shape_string(pixels.shape()));
  }
  const std::size_t pad = arch_.kernel / 2;
  Trace t;
  Tensor x = ops::scale(pixels, 1.0 / 255.0);
  t.conv1 = apply_mask(ops::relu(ops::conv2d(x, conv1_w_, conv1_b_, 1, pad)), mask1_);
  Tensor h = ops::avgpool2x2(t.conv1);
  t.conv2 = apply_mask(ops::relu(ops::conv2d(h, conv2_w_, conv2_b_, 1, pad)), mask2_);
  h = ops::flatten(ops::avgpool2x2(t.conv2));
  t.embedding = ops::add(ops::matmul(h, dense_w_), dense_b_);
  return t;
}

Tensor Encoder::forward(const Tensor& pixels) const { return forward_trace(pixels).embedding; }

Tensor Encoder::embed(const Dataset& data) const {
  Encoder frozen = clone();
  const std::size_t d = arch_.embed_dim;
  std::vector<double> out(data.size() * d);
  for (std::size_t start = 0; start < data.size(); start += kEmbedChunk) {
    const std::size_t end = std::min(data.size(), start + kEmbedChunk);
    std::vector<std::size_t> idx(end - start);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
    Tensor e = frozen.forward(data.batch(idx));
    std::copy(e.values().begin(), e.values().end(), out.begin() + static_cast<std::ptrdiff_t>(start * d));
  }
  return Tensor({data.size(), d}, std::move(out));
}

std::vector<Tensor> Encoder::parameters() const {
  return {conv1_w_, conv1_b_, conv2_w_, conv2_b_, dense_w_, dense_b_};
}

std::vector<std::string> Encoder::parameter_names() {
  return {"conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias", "dense.weight", "dense.bias"};
}

void Encoder::set_trainable(bool on) {
  for (Tensor& p : parameters()) p.set_requires_grad(on);
}

Encoder Encoder::clone() const {
  Encoder e;
  e.arch_ = arch_;
  e.conv1_w_ = conv1_w_.clone();
  e.conv1_b_ = conv1_b_.clone();
  e.conv2_w_ = conv2_w_.clone();
  e.conv2_b_ = conv2_b_.clone();
  e.dense_w_ = dense_w_.clone();
  e.dense_b_ = dense_b_.clone();
  e.mask1_ = mask1_;
  e.mask2_ = mask2_;
  return e;
}

bool Encoder::bit_equal(const Encoder& other) const {
  if (!(arch_ == other.arch_) || mask1_ != other.mask1_ || mask2_ != other.mask2_) return false;
  auto a = parameters();
  auto b = other.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!values_equal(a[i], b[i])) return false;
  }
  return true;
}

double Encoder::max_parameter_difference(const Encoder& other) const {
  auto a = parameters();
  auto b = other.parameters();
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].shape() != b[i].shape()) throw ShapeError("encoders have different architectures");
    for (std::size_t j = 0; j < a[i].size(); ++j) {
      m = std::max(m, std::abs(a[i].values()[j] - b[i].values()[j]));
    }
  }
  return m;
}

// ---- Head -----------------------------------------------------------------

Head Head::linear(std::size_t in, std::size_t classes, std::uint64_t seed) {
  Head h;
  h.kind_ = HeadKind::kLinear;
  h.classes_ = classes;
  Tensor w = Tensor::zeros({in, classes});
  Tensor b = Tensor::zeros({classes});
  kaiming_fill(w, b, in, derive_seed(seed, "head", 0));
  h.weights_ = {w};
  h.biases_ = {b};
  return h;
}

Head Head::mlp(std::size_t in, std::size_t hidden, std::size_t classes, std::uint64_t seed) {
  Head h;
  h.kind_ = HeadKind::kMlp;
  h.classes_ = classes;
  h.hidden_ = hidden;
  const std::size_t dims[4] = {in, hidden, hidden, classes};
  for (std::size_t l = 0; l < 3; ++l) {
    Tensor w = Tensor::zeros({dims[l], dims[l + 1]});
    Tensor b = Tensor::zeros({dims[l + 1]});
    kaiming_fill(w, b, dims[l], derive_seed(seed, "head", l));
    h.weights_.push_back(w);
    h.biases_.push_back(b);
  }
  return h;
}

Head Head::linear_from(std::vector<double> weight, std::vector<double> bias, std::size_t in,
                       std::size_t classes) {
  Head h;
  h.kind_ = HeadKind::kLinear;
  h.classes_ = classes;
  h.weights_ = {Tensor({in, classes}, std::move(weight))};
  h.biases_ = {Tensor({classes}, std::move(bias))};
  return h;
}

Tensor Head::forward(const Tensor& embeddings) const {
  if (weights_.empty()) throw Error("head is not initialized");
  Tensor h = embeddings;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    h = ops::add(ops::matmul(h, weights_[l]), biases_[l]);
    if (l + 1 < weights_.size()) h = ops::relu(h);
  }
  return h;
}

std::vector<Tensor> Head::parameters() const {
  std::vector<Tensor> out;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    out.push_back(weights_[l]);
    out.push_back(biases_[l]);
  }
  return out;
}

std::vector<std::string> Head::parameter_names() const {
  std::vector<std::string> out;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    out.push_back("head" + std::to_string(l) + ".weight");
    out.push_back("head" + std::to_string(l) + ".bias");
  }
  return out;
}

void Head::set_trainable(bool on) {
  for (Tensor& p : parameters()) p.set_requires_grad(on);
}

Head Head::clone() const {
  Head h = *this;
  for (auto& w : h.weights_) w = w.clone();
  for (auto& b : h.biases_) b = b.clone();
  return h;
}

// ---- DownstreamModel -------------------------------------------------------

Tensor DownstreamModel::logits(const Tensor& pixels) const {
  return head.forward(encoder.forward(pixels));
}

std::vector<std::size_t> argmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError("argmax_rows expects [N,C]");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  auto v = logits.values();
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j) {
      if (v[i * c + j] > v[i * c + best]) best = j;
    }
    out[i] = best;
  }
  return out;
}

std::vector<std::size_t> DownstreamModel::predict(const Tensor& pixels) const {
  DownstreamModel frozen = clone();
  return argmax_rows(frozen.logits(pixels));
}

std::vector<std::size_t> DownstreamModel::predict(const Dataset& data) const {
  DownstreamModel frozen = clone();
  std::vector<std::size_t> out;
  out.reserve(data.size());
  for (std::size_t start = 0; start < data.size(); start += kEmbedChunk) {
    const std::size_t end = std::min(data.size(), start + kEmbedChunk);
    std::vector<std::size_t> idx(end - start);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
    auto p = argmax_rows(frozen.logits(data.batch(idx)));
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

std::vector<Tensor> DownstreamModel::parameters() const {
  auto p = encoder.parameters();
  auto h = head.parameters();
  p.insert(p.end(), h.begin(), h.end());
  return p;
}

DownstreamModel DownstreamModel::clone() const { return {encoder.clone(), head.clone()}; }

// ---- Checkpoints -----------------------------------------------------------

namespace {

constexpr std::uint16_t kCheckpointVersion = 1;

std::string encoder_descriptor(const EncoderArch& a) {
  std::ostringstream os;
  os << "encoder input=" << a.input.height << 'x' << a.input.width << 'x' << a.input.channels
     << " conv1=" << a.conv1_channels << " conv2=" << a.conv2_channels << " kernel=" << a.kernel
     << " embed=" << a.embed_dim << '\n';
  return os.str();
}

std::map<std::string, std::string> parse_line(const std::string& line) {
  std::map<std::string, std::string> kv;
  std::istringstream is(line);
  std::string tok;
  is >> tok;  // section name
  while (is >> tok) {
    auto eq = tok.find('=');
    if (eq == std::string::npos) throw FormatError("ETLC descriptor: malformed token '" + tok + "'");
    kv[tok.substr(0, eq)] = tok.substr(eq + 1);
  }
  return kv;
}

std::size_t to_size(const std::map<std::string, std::string>& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw FormatError("ETLC descriptor: missing key '" + key + "'");
  try {
    return static_cast<std::size_t>(std::stoull(it->second));
  } catch (const std::exception&) {
    throw FormatError("ETLC descriptor: bad value for '" + key + "'");
  }
}

std::vector<std::string> descriptor_lines(const std::string& d) {
  std::vector<std::string> lines;
  std::istringstream is(d);
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

EncoderArch parse_encoder_arch(const std::string& line) {
  if (line.rfind("encoder", 0) != 0) throw FormatError("ETLC descriptor: missing encoder section");
  auto kv = parse_line(line);
  EncoderArch a;
  auto it = kv.find("input");
  if (it == kv.end()) throw FormatError("ETLC descriptor: missing key 'input'");
  unsigned h = 0, w = 0, c = 0;
  if (std::sscanf(it->second.c_str(), "%ux%ux%u", &h, &w, &c) != 3) {
    throw FormatError("ETLC descriptor: bad input shape");
  }
  a.input = {h, w, c};
  a.conv1_channels = to_size(kv, "conv1");
  a.conv2_channels = to_size(kv, "conv2");
  a.kernel = to_size(kv, "kernel");
  a.embed_dim = to_size(kv, "embed");
  return a;
}

const NamedTensor& find_tensor(const Checkpoint& c, const std::string& name) {
  for (const auto& t : c.tensors) {
    if (t.name == name) return t;
  }
  throw FormatError("ETLC: missing tensor '" + name + "'");
}

void assign(Tensor& dst, const NamedTensor& src) {
  if (dst.shape() != src.shape) {
    throw FormatError("ETLC: tensor '" + src.name + "' has shape " + shape_string(src.shape) +
                      ", architecture expects " + shape_string(dst.shape()));
  }
  check_finite(src.values, "checkpoint tensor");
  std::copy(src.values.begin(), src.values.end(), dst.mutable_values().begin());
}

}  // namespace

Checkpoint to_checkpoint(const Encoder& encoder) {
  Checkpoint c;
  c.descriptor = encoder_descriptor(encoder.arch());
  auto params = encoder.parameters();
  auto names = Encoder::parameter_names();
  for (std::size_t i = 0; i < params.size(); ++i) {
    c.tensors.push_back({names[i], params[i].shape(),
                         {params[i].values().begin(), params[i].values().end()}});
  }
  c.masks.push_back({"conv1.mask", encoder.conv1_mask()});
  c.masks.push_back({"conv2.mask", encoder.conv2_mask()});
  return c;
}

Checkpoint to_checkpoint(const DownstreamModel& model) {
  Checkpoint c = to_checkpoint(model.encoder);
  std::ostringstream os;
  os << "head kind=" << (model.head.kind() == HeadKind::kLinear ? "linear" : "mlp")
     << " classes=" << model.head.num_classes() << " hidden=" << model.head.hidden() << '\n';
  c.descriptor += os.str();
  auto params = model.head.parameters();
  auto names = model.head.parameter_names();
  for (std::size_t i = 0; i < params.size(); ++i) {
    c.tensors.push_back({names[i], params[i].shape(),
                         {params[i].values().begin(), params[i].values().end()}});
  }
  return c;
}

bool checkpoint_has_head(const Checkpoint& ckpt) {
  for (const auto& line : descriptor_lines(ckpt.descriptor)) {
    if (line.rfind("head", 0) == 0) return true;
  }
  return false;
}

Encoder encoder_from_checkpoint(const Checkpoint& ckpt) {
  auto lines = descriptor_lines(ckpt.descriptor);
  if (lines.empty()) throw FormatError("ETLC: empty architecture descriptor");
  EncoderArch arch = parse_encoder_arch(lines[0]);
  Encoder e = Encoder::init(0, arch);
  auto params = e.parameters();
  auto names = Encoder::parameter_names();
  for (std::size_t i = 0; i < params.size(); ++i) assign(params[i], find_tensor(ckpt, names[i]));
  for (const auto& m : ckpt.masks) {
    auto& dst = m.name == "conv1.mask" ? e.conv1_mask()
                : m.name == "conv2.mask"
                    ? e.conv2_mask()
                    : throw FormatError("ETLC: unknown mask '" + m.name + "'");
    if (m.bits.size() != dst.size()) throw FormatError("ETLC: mask '" + m.name + "' has wrong length");
    for (std::uint8_t b : m.bits) {
      if (b > 1) throw FormatError("ETLC: mask '" + m.name + "' is not binary");
    }
    dst = m.bits;
  }
  return e;
}

DownstreamModel model_from_checkpoint(const Checkpoint& ckpt) {
  DownstreamModel m;
  m.encoder = encoder_from_checkpoint(ckpt);
  std::string head_line;
  for (const auto& line : descriptor_lines(ckpt.descriptor)) {
    if (line.rfind("head", 0) == 0) head_line = line;
  }
  if (head_line.empty()) throw FormatError("ETLC: checkpoint holds no classification head");
  auto kv = parse_line(head_line);
  const std::size_t classes = to_size(kv, "classes");
  const std::size_t hidden = to_size(kv, "hidden");
  const std::string kind = kv.count("kind") ? kv.at("kind") : "";
  const std::size_t in = m.encoder.arch().embed_dim;
  if (kind == "linear") {
    m.head = Head::linear(in, classes, 0);
  } else if (kind == "mlp") {
    m.head = Head::mlp(in, hidden, classes, 0);
  } else {
    throw FormatError("ETLC: unknown head kind '" + kind + "'");
  }
  auto params = m.head.parameters();
  auto names = m.head.parameter_names();
  for (std::size_t i = 0; i < params.size(); ++i) assign(params[i], find_tensor(ckpt, names[i]));
  return m;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  io::Writer w;
  w.magic("ETLC");
  w.u16(kCheckpointVersion);
  w.str32(ckpt.descriptor);
  w.u32(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    w.str16(t.name);
    w.u8(static_cast<std::uint8_t>(t.shape.size()));
    for (std::size_t d : t.shape) w.u32(static_cast<std::uint32_t>(d));
    for (double v : t.values) w.f64(v);
  }
  w.u32(static_cast<std::uint32_t>(ckpt.masks.size()));
  for (const auto& m : ckpt.masks) {
    w.str16(m.name);
    w.u32(static_cast<std::uint32_t>(m.bits.size()));
    w.bytes(m.bits.data(), m.bits.size());
  }
  w.save(path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  io::Reader r = io::Reader::open(path, "ETLC");
  r.expect_magic("ETLC");
  const std::uint16_t version = r.u16();
  if (version != kCheckpointVersion) {
    throw FormatError("ETLC: unsupported version " + std::to_string(version));
  }
  Checkpoint c;
  c.descriptor = r.str32();
  const std::uint32_t nt = r.u32();
  for (std::uint32_t i = 0; i < nt; ++i) {
    NamedTensor t;
    t.name = r.str16();
    const std::uint8_t rank = r.u8();
    for (std::uint8_t d = 0; d < rank; ++d) t.shape.push_back(r.u32());
    const std::size_t n = numel(t.shape);
    if (n * 8 > r.remaining()) throw FormatError("ETLC: truncated tensor '" + t.name + "'");
    t.values.resize(n);
    for (double& v : t.values) v = r.f64();
    c.tensors.push_back(std::move(t));
  }
  const std::uint32_t nm = r.u32();
  for (std::uint32_t i = 0; i < nm; ++i) {
    NamedMask m;
    m.name = r.str16();
    m.bits.resize(r.u32());
    r.bytes(m.bits.data(), m.bits.size());
    c.masks.push_back(std::move(m));
  }
  r.expect_end();
  return c;
}

}  // namespace etl
