#include "etl/pipeline.hpp"

#include <fstream>
#include <iostream>
#include <iterator>
#include <map>
#include <sstream>

#include "etl/errors.hpp"
#include "etl/rng.hpp"

namespace etl {

namespace fs = std::filesystem;
using nlohmann::json;

EncoderChoice parse_encoder_choice(std::string_view name) {
  if (name == "clean") return EncoderChoice::kClean;
  if (name == "backdoored") return EncoderChoice::kBackdoored;
  if (name == "both") return EncoderChoice::kBoth;
  throw ConfigError("unknown encoder '" + std::string(name) + "' (expected clean, backdoored or both)");
}

fs::path Workspace::dataset(const std::string& split) const { return root / "data" / (split + ".etld"); }
fs::path Workspace::references(std::size_t c) const {
  return root / "data" / ("reference_" + std::to_string(c) + ".etld");
}
fs::path Workspace::clean_encoder() const { return root / "models" / "clean.etlc"; }
fs::path Workspace::backdoored_encoder() const { return root / "models" / "backdoored.etlc"; }
fs::path Workspace::trigger(std::size_t c) const {
  return root / "triggers" / ("target_" + std::to_string(c) + ".etlt");
}
fs::path Workspace::finetuned(bool backdoored) const {
  return root / "models" / (backdoored ? "finetuned_backdoored.etlc" : "finetuned_clean.etlc");
}
fs::path Workspace::probe(bool backdoored) const {
  return root / "models" / (backdoored ? "probe_backdoored.etlc" : "probe_clean.etlc");
}
fs::path Workspace::evaluation() const { return root / "reports" / "evaluate.json"; }
fs::path Workspace::curve_csv() const { return root / "reports" / "curve.csv"; }
fs::path Workspace::defense(DefenseKind kind) const {
  return root / "reports" / ("defense_" + std::string(to_string(kind)) + ".json");
}
fs::path Workspace::defense_csv(DefenseKind kind) const {
  return root / "reports" / ("defense_" + std::string(to_string(kind)) + ".csv");
}
fs::path Workspace::report() const { return root / "reports" / "report.json"; }

fs::path manifest_path(const fs::path& artifact) {
  fs::path p = artifact;
  p += ".manifest.json";
  return p;
}

namespace {

const char* kSplits[] = {"pretext", "shadow", "shadow_holdout", "downstream_train", "downstream_test"};

std::string read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("missing artifact: " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

json read_json(const fs::path& path) {
  const std::string text = read_bytes(path);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_json(const json& j, const fs::path& path) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

std::string content_hash(const fs::path& path) { return hex64(fnv1a64(read_bytes(path))); }

bool includes_clean(EncoderChoice c) { return c != EncoderChoice::kBackdoored; }
bool includes_backdoored(EncoderChoice c) { return c != EncoderChoice::kClean; }

std::string choice_name(EncoderChoice c) {
  switch (c) {
    case EncoderChoice::kClean: return "clean";
    case EncoderChoice::kBackdoored: return "backdoored";
    case EncoderChoice::kBoth: return "both";
  }
  return "both";
}

std::size_t task_label_of(const ExperimentConfig& c, std::size_t universe_class) {
  const auto& dc = c.data.downstream_classes;
  for (std::size_t i = 0; i < dc.size(); ++i)
    if (dc[i] == universe_class) return i;
  throw ConfigError("class " + std::to_string(universe_class) + " is not part of the downstream task");
}

EncoderArch arch_of(const ExperimentConfig& c) {
  EncoderArch a;
  a.input = {c.data.image_size, c.data.image_size, 3};
  return a;
}

Dataset target_samples(const Dataset& test, std::size_t label) {
  std::vector<std::size_t> idx;
  const auto labels = test.labels();
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] == label) idx.push_back(i);
  return test.subset(idx);
}

}  // namespace

Pipeline::Pipeline(ExperimentConfig config, fs::path root, LogSink log)
    : config_(std::move(config)), ws_{std::move(root)}, seeds_(stage_seeds(config_)), log_(std::move(log)) {
  validate(config_);
  if (!log_) log_ = [](const std::string& line) { std::cerr << line << '\n'; };
}

void Pipeline::log(const std::string& stage, const std::string& message) const {
  log_("[etl] " + stage + ": " + message);
}

json Pipeline::manifest_base() const {
  json cfg = config_to_json(config_);
  cfg.erase("output_dir");
  return {{"schema_version", config_.schema_version},
          {"config_hash", hex64(config_hash(config_))},
          {"seeds", seeds_.to_json()},
          {"config", cfg}};
}

void Pipeline::write_manifest(const fs::path& artifact, const std::string& stage, std::uint64_t stage_seed,
                              const std::vector<fs::path>& inputs, json extra) const {
  json m = manifest_base();
  m["artifact"] = artifact.lexically_relative(ws_.root).generic_string();
  m["stage"] = stage;
  m["stage_seed"] = stage_seed;
  m["content_fnv1a64"] = content_hash(artifact);
  json in = json::object();
  for (const auto& p : inputs) in[p.lexically_relative(ws_.root).generic_string()] = content_hash(p);
  m["inputs"] = in;
  if (!extra.empty()) m["details"] = std::move(extra);
  write_json(m, manifest_path(artifact));
}

void Pipeline::gen_data() {
  log("gen-data", "building synthetic bundle");
  const DatasetBundle b = build_bundle(data_config(config_));
  const std::map<std::string, const Dataset*> splits = {
      {"pretext", &b.pretext},
      {"shadow", &b.shadow},
      {"shadow_holdout", &b.shadow_holdout},
      {"downstream_train", &b.downstream_train},
      {"downstream_test", &b.downstream_test}};
  for (const char* name : kSplits) {
    const Dataset& d = *splits.at(name);
    const fs::path path = ws_.dataset(name);
    save_dataset(d, path);
    write_manifest(path, "gen-data", seeds_.data, {},
                   {{"split", name},
                    {"count", d.size()},
                    {"labeled", d.labeled()},
                    {"prototype_seed", derive_seed(seeds_.data, "prototypes")}});
  }
  for (const auto& [c, refs] : b.references) {
    const fs::path path = ws_.references(c);
    save_dataset(refs, path);
    write_manifest(path, "gen-data", seeds_.data, {},
                   {{"split", "reference"}, {"target_class", c}, {"count", refs.size()}});
  }
}

void Pipeline::pretrain() {
  const fs::path in = ws_.dataset("pretext");
  const Dataset pretext = load_dataset(in);
  log("pretrain", std::to_string(config_.pretrain.epochs) + " epochs on " + std::to_string(pretext.size()) +
                      " images");
  const Encoder enc = etl::pretrain(pretext, config_.data.num_classes, pretrain_config(config_), arch_of(config_));
  save_checkpoint(to_checkpoint(enc), ws_.clean_encoder());
  write_manifest(ws_.clean_encoder(), "pretrain", seeds_.pretrain, {in});
}

void Pipeline::opt_trigger() {
  const Encoder clean = encoder_from_checkpoint(load_checkpoint(ws_.clean_encoder()));
  const Dataset shadow = load_dataset(ws_.dataset("shadow"));
  const Dataset holdout = load_dataset(ws_.dataset("shadow_holdout"));
  const ImageShape shape = shadow.shape();
  for (std::size_t c : config_.data.targets) {
    const Dataset refs = load_dataset(ws_.references(c));
    const ReferenceEmbedding ref = compute_reference_embedding(clean, refs, c);
    const TriggerOptConfig tc = trigger_config(config_, c);
    Trigger trigger;
    json details = {{"target_class", c}, {"kind", std::string(to_string(config_.trigger.kind))}};
    switch (config_.trigger.kind) {
      case TriggerKind::kOptimized: {
        log("opt-trigger", "target " + std::to_string(c) + ": " + std::to_string(tc.steps) + " steps");
        TriggerResult r = optimize_trigger(clean, shadow, ref, tc);
        trigger = std::move(r.trigger);
        details["final_loss"] = r.loss_trace.empty() ? json(nullptr) : json(r.loss_trace.back());
        break;
      }
      case TriggerKind::kPatch:
        trigger = make_patch_trigger(shape, config_.trigger.patch_fraction);
        break;
      case TriggerKind::kSig:
        trigger = make_sig_trigger(shape, config_.trigger.sig_delta, config_.trigger.sig_frequency);
        break;
      case TriggerKind::kRandom:
        trigger = make_random_trigger(shape, config_.trigger.random_bound, tc.seed);
        break;
    }
    const Trigger zero = Trigger::zeros(shape, trigger.budget);
    details["linf"] = trigger.linf();
    details["holdout_similarity_zero_trigger"] = mean_similarity(clean, holdout, &zero, ref);
    details["holdout_similarity"] = mean_similarity(clean, holdout, &trigger, ref);
    const fs::path path = ws_.trigger(c);
    save_trigger(trigger, path);
    write_manifest(path, "opt-trigger", tc.seed,
                   {ws_.clean_encoder(), ws_.dataset("shadow"), ws_.references(c)}, details);
  }
}

void Pipeline::inject() {
  const Encoder clean = encoder_from_checkpoint(load_checkpoint(ws_.clean_encoder()));
  const Dataset shadow = load_dataset(ws_.dataset("shadow"));
  const Dataset holdout = load_dataset(ws_.dataset("shadow_holdout"));
  std::vector<BackdoorTarget> targets;
  std::vector<fs::path> inputs = {ws_.clean_encoder(), ws_.dataset("shadow")};
  for (std::size_t c : config_.data.targets) {
    const Dataset refs = load_dataset(ws_.references(c));
    targets.push_back({load_trigger(ws_.trigger(c)), compute_reference_embedding(clean, refs, c)});
    inputs.push_back(ws_.trigger(c));
    inputs.push_back(ws_.references(c));
  }
  log("inject", std::to_string(config_.backdoor.epochs) + " epochs, " + std::to_string(targets.size()) +
                    " target(s)");
  const BackdoorResult r = train_backdoor(clean, shadow, targets, backdoor_config(config_));
  save_checkpoint(to_checkpoint(r.encoder), ws_.backdoored_encoder());

  json trace = json::array();
  for (const auto& e : r.trace) trace.push_back({{"total", e.total}, {"post", e.post}, {"func", e.func}});
  json post = json::object();
  for (const auto& t : targets) {
    post[std::to_string(t.reference.target_class)] = mean_similarity(r.encoder, holdout, &t.trigger, t.reference);
  }
  write_manifest(ws_.backdoored_encoder(), "inject", seeds_.backdoor, inputs,
                 {{"trace", trace},
                  {"holdout_post_similarity", post},
                  {"holdout_functional_similarity", mean_functional_similarity(r.encoder, clean, holdout)}});
}

void Pipeline::finetune(EncoderChoice which) {
  const Dataset train = load_dataset(ws_.dataset("downstream_train"));
  const std::size_t k = config_.data.downstream_classes.size();
  for (bool backdoored : {false, true}) {
    if (backdoored ? !includes_backdoored(which) : !includes_clean(which)) continue;
    const fs::path src = backdoored ? ws_.backdoored_encoder() : ws_.clean_encoder();
    const Encoder enc = encoder_from_checkpoint(load_checkpoint(src));
    log("finetune", std::string(backdoored ? "backdoored" : "clean") + " encoder, " +
                        std::to_string(config_.finetune.epochs) + " epochs");
    const FineTuneResult r = fine_tune(enc, train, k, finetune_config(config_));
    const fs::path out = ws_.finetuned(backdoored);
    save_checkpoint(to_checkpoint(r.model), out);
    write_manifest(out, "finetune", seeds_.finetune, {src, ws_.dataset("downstream_train")},
                   {{"loss_trace", r.loss_trace}});
  }
}

void Pipeline::probe(EncoderChoice which, std::optional<HeadKind> head) {
  const Dataset train = load_dataset(ws_.dataset("downstream_train"));
  const std::size_t k = config_.data.downstream_classes.size();
  ExperimentConfig cfg = config_;
  if (head) cfg.probe.head = *head;
  const FineTuneConfig pc = probe_config(cfg);
  for (bool backdoored : {false, true}) {
    if (backdoored ? !includes_backdoored(which) : !includes_clean(which)) continue;
    const fs::path src = backdoored ? ws_.backdoored_encoder() : ws_.clean_encoder();
    const Encoder enc = encoder_from_checkpoint(load_checkpoint(src));
    log("probe", std::string(backdoored ? "backdoored" : "clean") + " encoder, " + std::to_string(pc.epochs) +
                     " epochs");
    const FineTuneResult r = linear_probe(enc, train, k, pc);
    const fs::path out = ws_.probe(backdoored);
    save_checkpoint(to_checkpoint(r.model), out);
    write_manifest(out, "probe", seeds_.probe, {src, ws_.dataset("downstream_train")},
                   {{"head", pc.head == HeadKind::kMlp ? "mlp" : "linear"}, {"loss_trace", r.loss_trace}});
  }
}

void Pipeline::evaluate(EncoderChoice which) {
  const Dataset train = load_dataset(ws_.dataset("downstream_train"));
  const Dataset test = load_dataset(ws_.dataset("downstream_test"));
  const std::size_t k = config_.data.downstream_classes.size();
  std::vector<std::pair<std::size_t, Trigger>> triggers;
  std::vector<fs::path> inputs = {ws_.dataset("downstream_test")};
  for (std::size_t c : config_.data.targets) {
    triggers.emplace_back(c, load_trigger(ws_.trigger(c)));
    inputs.push_back(ws_.trigger(c));
  }

  EvalReport report;
  auto per_target = [&](const DownstreamModel& m) {
    std::vector<TargetResult> out;
    double mean = 0.0;
    for (const auto& [c, t] : triggers) {
      const std::size_t label = task_label_of(config_, c);
      out.push_back({c, label, attack_success_rate(m, test, t, label)});
      mean += out.back().asr;
    }
    report.asr = mean / static_cast<double>(out.size());
    report.per_target = out;
  };

  if (includes_clean(which)) {
    inputs.push_back(ws_.finetuned(false));
    const DownstreamModel m = model_from_checkpoint(load_checkpoint(ws_.finetuned(false)));
    report.ca = clean_accuracy(m, test);
    if (which == EncoderChoice::kClean) per_target(m);
  }
  if (includes_backdoored(which)) {
    inputs.push_back(ws_.finetuned(true));
    const DownstreamModel m = model_from_checkpoint(load_checkpoint(ws_.finetuned(true)));
    report.ba = clean_accuracy(m, test);
    per_target(m);

    if (config_.stages.durability && config_.finetune.epochs > 0) {
      log("evaluate", "durability curve over " + std::to_string(config_.finetune.epochs) + " epochs");
      inputs.push_back(ws_.backdoored_encoder());
      const Encoder enc = encoder_from_checkpoint(load_checkpoint(ws_.backdoored_encoder()));
      FineTuneConfig fc = finetune_config(config_);
      fc.keep_snapshots = true;
      const FineTuneResult r = fine_tune(enc, train, k, fc);
      for (std::size_t e = 0; e < r.snapshots.size(); ++e) {
        double asr = 0.0;
        for (const auto& [c, t] : triggers) {
          asr += attack_success_rate(r.snapshots[e], test, t, task_label_of(config_, c));
        }
        report.curve.push_back({e + 1, clean_accuracy(r.snapshots[e], test),
                                asr / static_cast<double>(triggers.size())});
      }
    }
  }

  if (config_.stages.indistinguishability) {
    const auto& [c, t] = triggers.front();
    const Dataset holdout = load_dataset(ws_.dataset("shadow_holdout"));
    const Dataset targets = target_samples(test, task_label_of(config_, c));
    report.indistinguishability_target = c;
    inputs.push_back(ws_.clean_encoder());
    const Encoder clean = encoder_from_checkpoint(load_checkpoint(ws_.clean_encoder()));
    report.pre_indistinguishability =
        indistinguishability_report(clean, holdout, targets, t, config_.eval.epsilon_pre);
    if (includes_backdoored(which)) {
      const Encoder bd = encoder_from_checkpoint(load_checkpoint(ws_.backdoored_encoder()));
      report.post_indistinguishability =
          indistinguishability_report(bd, holdout, targets, t, config_.eval.epsilon_post);
    }
  }

  report.manifest = manifest_base();
  report.manifest["stage"] = "evaluate";
  report.manifest["encoder"] = choice_name(which);
  write_report(report, ws_.evaluation());
  std::vector<fs::path> outputs = {ws_.evaluation()};
  if (!report.curve.empty()) {
    write_curve_csv(report.curve, ws_.curve_csv());
    write_manifest(ws_.curve_csv(), "evaluate", seeds_.finetune, inputs);
  }
  write_manifest(ws_.evaluation(), "evaluate", seeds_.finetune, inputs);
}

void Pipeline::defend(DefenseKind kind, std::optional<std::vector<double>> axis,
                      std::optional<std::size_t> trials) {
  ExperimentConfig cfg = config_;
  if (axis) {
    (kind == DefenseKind::kReinit ? cfg.eval.defense.reinit_layers : cfg.eval.defense.prune_rates) = *axis;
  }
  if (trials) cfg.eval.defense.trials = *trials;
  validate(cfg);
  const DefenseConfig dc = defense_config(cfg, kind);

  const Encoder enc = encoder_from_checkpoint(load_checkpoint(ws_.backdoored_encoder()));
  const Dataset train = load_dataset(ws_.dataset("downstream_train"));
  const Dataset test = load_dataset(ws_.dataset("downstream_test"));
  const std::size_t c = config_.data.targets.front();
  const Trigger trigger = load_trigger(ws_.trigger(c));
  log("defend", std::string(to_string(kind)) + " sweep, " + std::to_string(dc.axis.size()) + " points x " +
                    std::to_string(dc.trials) + " trials");
  const DefenseSweep sweep = defense_sweep(enc, train, train, test, config_.data.downstream_classes.size(),
                                           trigger, task_label_of(config_, c), dc);
  json j = sweep_to_json(sweep);
  j["target_class"] = c;
  const fs::path out = ws_.defense(kind);
  write_json(j, out);
  write_sweep_csv(sweep, ws_.defense_csv(kind));
  const std::vector<fs::path> inputs = {ws_.backdoored_encoder(), ws_.dataset("downstream_train"),
                                        ws_.dataset("downstream_test"), ws_.trigger(c)};
  json details = {{"axis", dc.axis}, {"trials", dc.trials}};
  write_manifest(out, "defend", seeds_.defense, inputs, details);
  write_manifest(ws_.defense_csv(kind), "defend", seeds_.defense, inputs, details);
}

void Pipeline::report() {
  const json eval = read_json(ws_.evaluation());
  json r;
  for (const char* key : {"ca", "ba", "asr", "per_target", "curve", "indistinguishability"}) r[key] = eval.at(key);
  r["sweeps"] = json::array();
  std::vector<fs::path> inputs = {ws_.evaluation()};
  for (DefenseKind kind : {DefenseKind::kReinit, DefenseKind::kPrune}) {
    if (fs::exists(ws_.defense(kind))) {
      r["sweeps"].push_back(read_json(ws_.defense(kind)));
      inputs.push_back(ws_.defense(kind));
    }
  }
  json artifacts = json::object();
  for (const auto& p : inputs) artifacts[p.lexically_relative(ws_.root).generic_string()] = content_hash(p);
  r["manifest"] = manifest_base();
  r["manifest"]["stage"] = "report";
  r["manifest"]["sources"] = artifacts;
  write_json(r, ws_.report());
  write_manifest(ws_.report(), "report", config_.seed, inputs);
  log("report", "wrote " + ws_.report().generic_string());
}

void Pipeline::all() {
  gen_data();
  pretrain();
  opt_trigger();
  inject();
  finetune(EncoderChoice::kBoth);
  if (config_.stages.probe) probe(EncoderChoice::kBoth);
  evaluate(EncoderChoice::kBoth);
  if (config_.stages.defense) {
    defend(DefenseKind::kReinit);
    defend(DefenseKind::kPrune);
  }
  report();
}

}  // namespace etl
