#include "etl/downstream.hpp"

#include <functional>
#include <string>

#include "etl/batching.hpp"
#include "etl/errors.hpp"
#include "etl/ops.hpp"
#include "etl/optim.hpp"
#include "etl/rng.hpp"

namespace etl {

void FineTuneConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("fine-tune learning rate must be > 0");
  if (batch_size == 0) throw ConfigError("fine-tune batch size must be >= 1");
  if (head == HeadKind::kMlp && mlp_hidden == 0) throw ConfigError("MLP head needs hidden units");
}

FineTuneConfig mlp_probe_config(std::uint64_t seed) {
  FineTuneConfig c;
  c.epochs = 500;
  c.lr = 1e-4;
  c.seed = seed;
  c.head = HeadKind::kMlp;
  return c;
}

namespace {

void check_training_set(const Dataset& train, std::size_t num_classes) {
  if (train.empty()) throw Error("training set is empty");
  if (num_classes < 2) throw ConfigError("a classifier needs at least 2 classes");
  for (std::size_t y : train.labels()) {
    if (y >= num_classes) {
      throw Error("label " + std::to_string(y) + " >= num_classes " + std::to_string(num_classes));
    }
  }
}

Head make_head(const FineTuneConfig& config, std::size_t in, std::size_t num_classes) {
  const std::uint64_t seed = derive_seed(config.seed, "head");
  return config.head == HeadKind::kMlp ? Head::mlp(in, config.mlp_hidden, num_classes, seed)
                                       : Head::linear(in, num_classes, seed);
}

// One Adam run over shuffled mini-batches; returns the mean loss per epoch.
std::vector<double> run_epochs(std::size_t n, std::size_t epochs, std::size_t batch_size, double lr,
                               std::uint64_t seed, std::vector<Tensor> params,
                               const std::function<Tensor(const std::vector<std::size_t>&)>& loss_of,
                               const std::function<void(std::size_t)>& after_epoch) {
  AdamOptions opts;
  opts.lr = lr;
  Adam adam(std::move(params), opts);
  const std::uint64_t batch_seed = derive_seed(seed, "batches");
  std::vector<double> trace;
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    double total = 0.0;
    for (const auto& idx : epoch_batches(n, batch_size, batch_seed, epoch)) {
      Tensor loss = loss_of(idx);
      adam.zero_grad();
      loss.backward();
      adam.step();
      total += loss.item() * static_cast<double>(idx.size());
    }
    trace.push_back(total / static_cast<double>(n));
    if (after_epoch) after_epoch(epoch);
  }
  return trace;
}

}  // namespace

FineTuneResult fine_tune(const Encoder& encoder, const Dataset& train, std::size_t num_classes,
                         const FineTuneConfig& config) {
  config.validate();
  check_training_set(train, num_classes);
  const auto labels = train.labels();

  DownstreamModel model{encoder.clone(), make_head(config, encoder.arch().embed_dim, num_classes)};
  model.encoder.set_trainable(true);
  model.head.set_trainable(true);

  FineTuneResult result;
  auto loss_of = [&](const std::vector<std::size_t>& idx) {
    std::vector<std::size_t> y(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) y[i] = labels[idx[i]];
    return ops::softmax_cross_entropy(model.logits(train.batch(idx)), y);
  };
  auto snapshot = [&](std::size_t) {
    if (config.keep_snapshots) result.snapshots.push_back(model.clone());
  };
  result.loss_trace = run_epochs(train.size(), config.epochs, config.batch_size, config.lr,
                                 config.seed, model.parameters(), loss_of, snapshot);
  result.model = model.clone();
  return result;
}

FineTuneResult linear_probe(const Encoder& encoder, const Dataset& train, std::size_t num_classes,
                            const FineTuneConfig& config) {
  config.validate();
  check_training_set(train, num_classes);
  const auto labels = train.labels();
  const Tensor embeddings = encoder.embed(train);
  const std::size_t d = embeddings.dim(1);

  DownstreamModel model{encoder.clone(), make_head(config, d, num_classes)};
  model.head.set_trainable(true);

  FineTuneResult result;
  auto loss_of = [&](const std::vector<std::size_t>& idx) {
    std::vector<double> rows(idx.size() * d);
    std::vector<std::size_t> y(idx.size());
    auto src = embeddings.values();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(idx[i] * d), d,
                  rows.begin() + static_cast<std::ptrdiff_t>(i * d));
      y[i] = labels[idx[i]];
    }
    return ops::softmax_cross_entropy(model.head.forward(Tensor({idx.size(), d}, std::move(rows))), y);
  };
  auto snapshot = [&](std::size_t) {
    if (config.keep_snapshots) result.snapshots.push_back(model.clone());
  };
  result.loss_trace = run_epochs(train.size(), config.epochs, config.batch_size, config.lr,
                                 config.seed, model.head.parameters(), loss_of, snapshot);
  result.model = model.clone();
  return result;
}

Encoder pretrain(const Dataset& pretext, std::size_t num_classes, const PretrainConfig& config,
                 EncoderArch arch) {
  if (!(config.lr > 0.0)) throw ConfigError("pre-training learning rate must be > 0");
  if (config.batch_size == 0) throw ConfigError("pre-training batch size must be >= 1");
  check_training_set(pretext, num_classes);
  const auto labels = pretext.labels();
  DownstreamModel model{Encoder::init(derive_seed(config.seed, "encoder"), arch),
                        Head::linear(arch.embed_dim, num_classes, derive_seed(config.seed, "head"))};
  model.encoder.set_trainable(true);
  model.head.set_trainable(true);
  auto loss_of = [&](const std::vector<std::size_t>& idx) {
    std::vector<std::size_t> y(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) y[i] = labels[idx[i]];
    return ops::softmax_cross_entropy(model.logits(pretext.batch(idx)), y);
  };
  run_epochs(pretext.size(), config.epochs, config.batch_size, config.lr, config.seed,
             model.parameters(), loss_of, {});
  return model.encoder.clone();
}

}  // namespace etl
