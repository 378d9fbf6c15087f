#include "etl/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "etl/errors.hpp"
#include "etl/rng.hpp"

namespace etl {

double accuracy(std::span<const std::size_t> predictions, std::span<const std::size_t> labels) {
  if (predictions.size() != labels.size()) throw ShapeError("accuracy: prediction/label count mismatch");
  if (labels.empty()) throw Error("accuracy over an empty test set");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += predictions[i] == labels[i];
  return 100.0 * static_cast<double>(correct) / static_cast<double>(labels.size());
}

double clean_accuracy(const DownstreamModel& model, const Dataset& test) {
  if (test.empty()) throw Error("accuracy over an empty test set");
  return accuracy(model.predict(test), test.labels());
}

double attack_success_rate(std::span<const std::size_t> predictions,
                           std::span<const std::size_t> labels, std::size_t target) {
  if (predictions.size() != labels.size()) throw ShapeError("ASR: prediction/label count mismatch");
  std::size_t poisoned = 0, hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == target) continue;
    ++poisoned;
    hits += predictions[i] == target;
  }
  if (poisoned == 0) throw Error("ASR needs at least one test sample outside the target class");
  return 100.0 * static_cast<double>(hits) / static_cast<double>(poisoned);
}

double attack_success_rate(const DownstreamModel& model, const Dataset& test, const Trigger& trigger,
                           std::size_t target) {
  const auto labels = test.labels();
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] != target) keep.push_back(i);
  if (keep.empty()) throw Error("ASR needs at least one test sample outside the target class");
  const Dataset sources = test.subset(keep);
  return attack_success_rate(model.predict(poison(sources, trigger)), sources.labels(), target);
}

std::vector<CurvePoint> durability_curve(const Encoder& encoder, const Dataset& train,
                                         const Dataset& test, std::size_t num_classes,
                                         const Trigger& trigger, std::size_t target,
                                         FineTuneConfig config) {
  if (config.epochs == 0) throw ConfigError("durability curve needs at least 1 epoch");
  config.keep_snapshots = true;
  const FineTuneResult ft = fine_tune(encoder, train, num_classes, config);
  std::vector<CurvePoint> curve;
  for (std::size_t e = 0; e < ft.snapshots.size(); ++e) {
    curve.push_back({e + 1, clean_accuracy(ft.snapshots[e], test),
                     attack_success_rate(ft.snapshots[e], test, trigger, target)});
  }
  return curve;
}

ChannelActivity channel_activity(const Encoder& encoder, const Dataset& clean) {
  if (clean.empty()) throw Error("channel activity needs a non-empty clean set");
  const Encoder frozen = encoder.clone();
  ChannelActivity act;
  act.conv1.assign(encoder.arch().conv1_channels, 0.0);
  act.conv2.assign(encoder.arch().conv2_channels, 0.0);
  auto accumulate = [](const Tensor& t, std::vector<double>& sums) {
    const std::size_t c = sums.size();
    auto v = t.values();
    for (std::size_t i = 0; i < v.size(); ++i) sums[i % c] += std::abs(v[i]);
    return v.size() / c;
  };
  std::size_t n1 = 0, n2 = 0;
  constexpr std::size_t kChunk = 256;
  for (std::size_t start = 0; start < clean.size(); start += kChunk) {
    std::vector<std::size_t> idx(std::min(kChunk, clean.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto trace = frozen.forward_trace(clean.batch(idx));
    n1 += accumulate(trace.conv1, act.conv1);
    n2 += accumulate(trace.conv2, act.conv2);
  }
  for (double& v : act.conv1) v /= static_cast<double>(n1);
  for (double& v : act.conv2) v /= static_cast<double>(n2);
  return act;
}

std::vector<std::size_t> prune_order(std::span<const double> activity) {
  auto order = iota_indices(activity.size());
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return activity[a] < activity[b]; });
  return order;
}

Encoder fine_prune(const Encoder& encoder, const ChannelActivity& activity, double rate) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("prune rate must be in [0, 1)");
  Encoder out = encoder.clone();
  auto apply = [rate](std::span<const double> act, std::vector<std::uint8_t>& mask) {
    if (mask.size() != act.size()) throw ShapeError("channel activity does not match the mask");
    const auto order = prune_order(act);
    const auto count = static_cast<std::size_t>(std::floor(rate * static_cast<double>(act.size())));
    for (std::size_t i = 0; i < count; ++i) mask[order[i]] = 0;
  };
  apply(activity.conv1, out.conv1_mask());
  apply(activity.conv2, out.conv2_mask());
  return out;
}

Encoder fine_prune(const Encoder& encoder, const Dataset& clean, double rate) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("prune rate must be in [0, 1)");
  return fine_prune(encoder, channel_activity(encoder, clean), rate);
}

std::string_view to_string(DefenseKind kind) {
  return kind == DefenseKind::kReinit ? "reinit" : "prune";
}

DefenseKind parse_defense_kind(std::string_view name) {
  if (name == "reinit") return DefenseKind::kReinit;
  if (name == "prune") return DefenseKind::kPrune;
  throw ConfigError("unknown defense kind '" + std::string(name) + "' (expected reinit or prune)");
}

DefenseSweep defense_sweep(const Encoder& encoder, const Dataset& clean_probe, const Dataset& train,
                           const Dataset& test, std::size_t num_classes, const Trigger& trigger,
                           std::size_t target, const DefenseConfig& config) {
  if (config.axis.empty()) throw ConfigError("defense sweep axis is empty");
  if (config.trials == 0) throw ConfigError("defense sweep needs at least 1 trial");
  for (std::size_t i = 1; i < config.axis.size(); ++i) {
    if (!(config.axis[i] > config.axis[i - 1])) {
      throw ConfigError("defense sweep axis must be strictly increasing");
    }
  }
  for (double v : config.axis) {
    if (config.kind == DefenseKind::kReinit &&
        (v < 0.0 || v != std::floor(v) || v > static_cast<double>(Encoder::kParameterizedLayers))) {
      throw ConfigError("re-initialization depth must be an integer in [0, 3]");
    }
    if (config.kind == DefenseKind::kPrune && !(v >= 0.0 && v < 1.0)) {
      throw ConfigError("prune rate must be in [0, 1)");
    }
  }

  std::optional<ChannelActivity> activity;
  if (config.kind == DefenseKind::kPrune) activity = channel_activity(encoder, clean_probe);

  DefenseSweep sweep;
  sweep.kind = config.kind;
  sweep.target_label = target;
  sweep.trials = config.trials;
  for (double value : config.axis) {
    SweepPoint point{value, 0.0, 0.0};
    for (std::size_t trial = 0; trial < config.trials; ++trial) {
      FineTuneConfig ft = config.finetune;
      ft.keep_snapshots = false;
      if (trial > 0) ft.seed = derive_seed(config.finetune.seed, "trial", trial);
      const Encoder defended =
          config.kind == DefenseKind::kReinit
              ? reinitialize_last_n(encoder, static_cast<std::size_t>(value),
                                    derive_seed(config.seed, "defense", trial))
              : fine_prune(encoder, *activity, value);
      const DownstreamModel model = fine_tune(defended, train, num_classes, ft).model;
      point.ba += clean_accuracy(model, test);
      point.asr += attack_success_rate(model, test, trigger, target);
    }
    point.ba /= static_cast<double>(config.trials);
    point.asr /= static_cast<double>(config.trials);
    sweep.points.push_back(point);
  }
  return sweep;
}

namespace {

using Matrix = std::vector<std::vector<double>>;

std::vector<double> mat_vec(const Matrix& m, const std::vector<double>& v) {
  std::vector<double> out(m.size(), 0.0);
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < v.size(); ++j) out[i] += m[i][j] * v[j];
  return out;
}

double norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace

PcaResult pca_project(const Tensor& embeddings, std::size_t k) {
  if (embeddings.rank() != 2) throw ShapeError("pca_project expects [N, D] embeddings");
  const std::size_t n = embeddings.dim(0), d = embeddings.dim(1);
  if (k == 0) throw ConfigError("pca_project needs k >= 1");
  if (n < k + 1) throw Error("pca_project needs at least k + 1 points");
  auto x = embeddings.values();

  PcaResult out;
  out.mean.assign(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out.mean[j] += x[i * d + j];
  for (double& m : out.mean) m /= static_cast<double>(n);

  Matrix cov(d, std::vector<double>(d, 0.0));
  std::vector<double> row(d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) row[j] = x[i * d + j] - out.mean[j];
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = a; b < d; ++b) cov[a][b] += row[a] * row[b];
  }
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = a; b < d; ++b) {
      cov[a][b] /= static_cast<double>(n - 1);
      cov[b][a] = cov[a][b];
    }
  double trace = 0.0;
  for (std::size_t a = 0; a < d; ++a) trace += cov[a][a];

  for (std::size_t c = 0; c < std::min(k, d); ++c) {
    // Start from the column with the largest norm, which lies in the range.
    std::size_t best = 0;
    double best_norm = -1.0;
    for (std::size_t j = 0; j < d; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < d; ++i) s += cov[i][j] * cov[i][j];
      if (s > best_norm) {
        best_norm = s;
        best = j;
      }
    }
    if (!(trace > 0.0) || std::sqrt(best_norm) <= 1e-12 * trace) break;
    std::vector<double> v(d);
    for (std::size_t i = 0; i < d; ++i) v[i] = cov[i][best];
    double vn = norm(v);
    for (double& e : v) e /= vn;
    for (int iter = 0; iter < 10000; ++iter) {
      auto w = mat_vec(cov, v);
      const double wn = norm(w);
      if (wn == 0.0) break;
      double delta = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        w[i] /= wn;
        delta = std::max(delta, std::abs(w[i] - v[i]));
      }
      v = std::move(w);
      if (delta < 1e-14) break;
    }
    const auto cv = mat_vec(cov, v);
    double lambda = 0.0;
    for (std::size_t i = 0; i < d; ++i) lambda += v[i] * cv[i];
    if (lambda <= 1e-12 * trace) break;
    std::size_t arg = 0;
    for (std::size_t i = 1; i < d; ++i)
      if (std::abs(v[i]) > std::abs(v[arg])) arg = i;
    if (v[arg] < 0.0)
      for (double& e : v) e = -e;
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b) cov[a][b] -= lambda * v[a] * v[b];
    out.components.push_back(v);
    out.explained_ratio.push_back(lambda / trace);
  }
  out.rank_deficient = out.components.size() < k;

  out.points.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.points.push_back(pca_coordinates(out, x.subspan(i * d, d)));
  }
  return out;
}

std::vector<double> pca_coordinates(const PcaResult& pca, std::span<const double> row) {
  if (row.size() != pca.mean.size()) throw ShapeError("pca_coordinates: dimension mismatch");
  std::vector<double> out;
  for (const auto& comp : pca.components) {
    double s = 0.0;
    for (std::size_t j = 0; j < row.size(); ++j) s += (row[j] - pca.mean[j]) * comp[j];
    out.push_back(s);
  }
  return out;
}

double round_percent(double value) { return std::floor(value * 100.0 + 0.5) / 100.0; }

namespace {

nlohmann::json percent_or_null(const std::optional<double>& v) {
  return v ? nlohmann::json(round_percent(*v)) : nlohmann::json(nullptr);
}

nlohmann::json stats_json(const std::optional<SimilarityStats>& s) {
  if (!s) return nullptr;
  return {{"pairs", s->pairs},   {"mean", s->mean},           {"min", s->min},
          {"q25", s->q25},       {"median", s->median},       {"q75", s->q75},
          {"max", s->max},       {"threshold", s->threshold}, {"fraction_above", s->fraction_above}};
}

std::ofstream open_output(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  return out;
}

}  // namespace

nlohmann::json sweep_to_json(const DefenseSweep& sweep) {
  nlohmann::json points = nlohmann::json::array();
  for (const auto& p : sweep.points) {
    points.push_back({{"value", p.value}, {"ba", round_percent(p.ba)}, {"asr", round_percent(p.asr)}});
  }
  return {{"kind", std::string(to_string(sweep.kind))},
          {"target_label", sweep.target_label},
          {"trials", sweep.trials},
          {"points", points}};
}

nlohmann::json report_to_json(const EvalReport& report) {
  nlohmann::json j;
  j["ca"] = percent_or_null(report.ca);
  j["ba"] = percent_or_null(report.ba);
  j["asr"] = percent_or_null(report.asr);
  j["curve"] = nlohmann::json::array();
  for (const auto& p : report.curve) {
    j["curve"].push_back({{"epoch", p.epoch}, {"ba", round_percent(p.ba)}, {"asr", round_percent(p.asr)}});
  }
  j["per_target"] = nlohmann::json::array();
  for (const auto& t : report.per_target) {
    j["per_target"].push_back({{"target_class", t.target_class},
                               {"task_label", t.task_label},
                               {"asr", round_percent(t.asr)}});
  }
  j["sweeps"] = nlohmann::json::array();
  for (const auto& s : report.sweeps) j["sweeps"].push_back(sweep_to_json(s));
  j["indistinguishability"] = {
      {"target_class", report.indistinguishability_target ? nlohmann::json(*report.indistinguishability_target)
                                                          : nlohmann::json(nullptr)},
      {"pre", stats_json(report.pre_indistinguishability)},
      {"post", stats_json(report.post_indistinguishability)}};
  j["manifest"] = report.manifest;
  return j;
}

void write_report(const EvalReport& report, const std::filesystem::path& path) {
  auto out = open_output(path);
  out << report_to_json(report).dump(2) << '\n';
}

void write_curve_csv(const std::vector<CurvePoint>& curve, const std::filesystem::path& path) {
  auto out = open_output(path);
  out << "epoch,ba,asr\n";
  for (const auto& p : curve) out << p.epoch << ',' << round_percent(p.ba) << ',' << round_percent(p.asr) << '\n';
}

void write_sweep_csv(const DefenseSweep& sweep, const std::filesystem::path& path) {
  auto out = open_output(path);
  out << (sweep.kind == DefenseKind::kReinit ? "layers" : "rate") << ",ba,asr\n";
  for (const auto& p : sweep.points) {
    out << p.value << ',' << round_percent(p.ba) << ',' << round_percent(p.asr) << '\n';
  }
}

}  // namespace etl
