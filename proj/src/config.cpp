#include "etl/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "etl/errors.hpp"
#include "etl/rng.hpp"

namespace etl {

using nlohmann::json;

namespace {

// Typed view of one JSON object that remembers which keys were read.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(label() + " must be an object");
  }

  std::string key_path(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

  const json* find(const std::string& key) {
    used_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void get(const std::string& key, std::size_t& out) {
    if (const json* v = find(key)) out = to_size(*v, key_path(key));
  }
  void get(const std::string& key, std::uint64_t& out, int) {
    if (const json* v = find(key)) {
      if (!v->is_number_unsigned() && !(v->is_number_integer() && v->get<std::int64_t>() >= 0)) {
        throw ConfigError(key_path(key) + " must be a non-negative integer");
      }
      out = v->get<std::uint64_t>();
    }
  }
  void get(const std::string& key, int& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer()) throw ConfigError(key_path(key) + " must be an integer");
      out = v->get<int>();
    }
  }
  void get(const std::string& key, double& out) {
    if (const json* v = find(key)) out = to_double(*v, key_path(key));
  }
  void get(const std::string& key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) throw ConfigError(key_path(key) + " must be true or false");
      out = v->get<bool>();
    }
  }
  void get(const std::string& key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) throw ConfigError(key_path(key) + " must be a string");
      out = v->get<std::string>();
    }
  }
  void get(const std::string& key, std::vector<std::size_t>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) throw ConfigError(key_path(key) + " must be an array");
      out.clear();
      for (const auto& e : *v) out.push_back(to_size(e, key_path(key)));
    }
  }
  void get(const std::string& key, std::vector<double>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) throw ConfigError(key_path(key) + " must be an array");
      out.clear();
      for (const auto& e : *v) out.push_back(to_double(e, key_path(key)));
    }
  }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!used_.count(item.key())) throw ConfigError("unknown config key '" + key_path(item.key()) + "'");
    }
  }

 private:
  std::string label() const { return path_.empty() ? "config" : path_; }

  static std::size_t to_size(const json& v, const std::string& where) {
    if (v.is_number_unsigned()) return v.get<std::size_t>();
    if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return static_cast<std::size_t>(v.get<std::int64_t>());
    throw ConfigError(where + " must be a non-negative integer");
  }
  static double to_double(const json& v, const std::string& where) {
    if (!v.is_number()) throw ConfigError(where + " must be a number");
    return v.get<double>();
  }

  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

template <typename Fn>
void with_section(Section& parent, const std::string& key, Fn&& fn) {
  if (const json* v = parent.find(key)) {
    Section s(*v, parent.key_path(key));
    fn(s);
    s.finish();
  }
}

HeadKind parse_head(const std::string& name, const std::string& where) {
  if (name == "linear") return HeadKind::kLinear;
  if (name == "mlp") return HeadKind::kMlp;
  throw ConfigError(where + " must be \"linear\" or \"mlp\"");
}

std::string head_name(HeadKind kind) { return kind == HeadKind::kMlp ? "mlp" : "linear"; }

void require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

void require_increasing(const std::vector<double>& axis, const std::string& key) {
  require(!axis.empty(), key + " must not be empty");
  for (std::size_t i = 1; i < axis.size(); ++i) {
    require(axis[i] > axis[i - 1], key + " must be strictly increasing");
  }
}

}  // namespace

void validate(const ExperimentConfig& c) {
  require(c.schema_version == kConfigSchemaVersion,
          "schema_version " + std::to_string(c.schema_version) + " is not supported (expected " +
              std::to_string(kConfigSchemaVersion) + ")");
  require(!c.output_dir.empty(), "output_dir must not be empty");

  c.data.validate();
  for (std::size_t t : c.data.targets) {
    bool found = false;
    for (std::size_t d : c.data.downstream_classes) found = found || d == t;
    require(found, "target class " + std::to_string(t) + " is not in data.downstream_classes");
  }

  require(c.pretrain.lr > 0.0, "pretrain.lr must be > 0");
  require(c.pretrain.batch_size >= 1, "pretrain.batch_size must be >= 1");

  const TriggerSettings& t = c.trigger;
  require(t.budget > 0.0, "trigger.budget (xi) must be > 0: it bounds the infinity norm of the trigger");
  require(t.lr > 0.0, "trigger.lr must be > 0");
  require(t.batch_size >= 1, "trigger.batch_size must be >= 1");
  require(t.patch_fraction > 0.0 && t.patch_fraction <= 1.0, "trigger.patch_fraction must be in (0, 1]");
  require(t.sig_delta > 0.0 && t.sig_frequency > 0.0, "trigger.sig_delta and trigger.sig_frequency must be > 0");
  require(t.random_bound > 0.0, "trigger.random_bound must be > 0");
  require(c.data.targets.size() == 1 || t.kind == TriggerKind::kOptimized || t.kind == TriggerKind::kRandom,
          "trigger.kind patch and sig give every target the same trigger; use a single target");

  require(c.backdoor.lambda >= 0.0, "backdoor.lambda must be >= 0");
  require(c.backdoor.lr > 0.0, "backdoor.lr must be > 0");
  require(c.backdoor.batch_size >= 1, "backdoor.batch_size must be >= 1");

  c.finetune.validate();

  require(c.probe.lr > 0.0, "probe.lr must be > 0");
  require(c.probe.batch_size >= 1, "probe.batch_size must be >= 1");
  require(c.probe.mlp_hidden >= 1, "probe.mlp_hidden must be >= 1");

  for (double e : {c.eval.epsilon_pre, c.eval.epsilon_post}) {
    require(e >= -1.0 && e <= 1.0, "eval.epsilon_pre and eval.epsilon_post must be in [-1, 1]");
  }
  const DefenseSettings& d = c.eval.defense;
  require_increasing(d.reinit_layers, "eval.defense.reinit_layers");
  for (double v : d.reinit_layers) {
    require(v >= 0.0 && v <= 3.0 && v == static_cast<double>(static_cast<int>(v)),
            "eval.defense.reinit_layers entries must be integers in [0, 3]");
  }
  require_increasing(d.prune_rates, "eval.defense.prune_rates");
  for (double v : d.prune_rates) require(v >= 0.0 && v < 1.0, "eval.defense.prune_rates entries must be in [0, 1)");
  require(d.trials >= 1, "eval.defense.trials must be >= 1");
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  Section root(j, "");
  root.get("schema_version", c.schema_version);
  root.get("seed", c.seed, 0);
  root.get("output_dir", c.output_dir);

  with_section(root, "data", [&](Section& s) {
    s.get("num_classes", c.data.num_classes);
    s.get("image_size", c.data.image_size);
    s.get("shadow_size", c.data.shadow_size);
    s.get("shadow_holdout_size", c.data.shadow_holdout_size);
    s.get("pretext_per_class", c.data.pretext_per_class);
    s.get("downstream_classes", c.data.downstream_classes);
    s.get("train_per_class", c.data.train_per_class);
    s.get("test_per_class", c.data.test_per_class);
    s.get("reference_count", c.data.reference_count);
    s.get("targets", c.data.targets);
    s.get("noise_amplitude", c.data.noise_amplitude);
    s.get("jitter", c.data.jitter);
    s.get("reference_jitter_shift", c.data.reference_jitter_shift);
    s.get("reference_noise_amplitude", c.data.reference_noise_amplitude);
  });
  with_section(root, "pretrain", [&](Section& s) {
    s.get("epochs", c.pretrain.epochs);
    s.get("lr", c.pretrain.lr);
    s.get("batch_size", c.pretrain.batch_size);
  });
  with_section(root, "trigger", [&](Section& s) {
    std::string kind(to_string(c.trigger.kind));
    s.get("kind", kind);
    c.trigger.kind = parse_trigger_kind(kind);
    s.get("budget", c.trigger.budget);
    s.get("steps", c.trigger.steps);
    s.get("lr", c.trigger.lr);
    s.get("batch_size", c.trigger.batch_size);
    s.get("patch_fraction", c.trigger.patch_fraction);
    s.get("sig_delta", c.trigger.sig_delta);
    s.get("sig_frequency", c.trigger.sig_frequency);
    s.get("random_bound", c.trigger.random_bound);
  });
  with_section(root, "backdoor", [&](Section& s) {
    s.get("lambda", c.backdoor.lambda);
    s.get("epochs", c.backdoor.epochs);
    s.get("lr", c.backdoor.lr);
    s.get("batch_size", c.backdoor.batch_size);
  });
  with_section(root, "finetune", [&](Section& s) {
    s.get("epochs", c.finetune.epochs);
    s.get("lr", c.finetune.lr);
    s.get("batch_size", c.finetune.batch_size);
    std::string head = head_name(c.finetune.head);
    s.get("head", head);
    c.finetune.head = parse_head(head, s.key_path("head"));
    s.get("mlp_hidden", c.finetune.mlp_hidden);
  });
  with_section(root, "probe", [&](Section& s) {
    std::string head = head_name(c.probe.head);
    s.get("head", head);
    c.probe.head = parse_head(head, s.key_path("head"));
    s.get("epochs", c.probe.epochs);
    s.get("mlp_epochs", c.probe.mlp_epochs);
    s.get("lr", c.probe.lr);
    s.get("batch_size", c.probe.batch_size);
    s.get("mlp_hidden", c.probe.mlp_hidden);
  });
  with_section(root, "eval", [&](Section& s) {
    s.get("epsilon_pre", c.eval.epsilon_pre);
    s.get("epsilon_post", c.eval.epsilon_post);
    with_section(s, "defense", [&](Section& d) {
      d.get("reinit_layers", c.eval.defense.reinit_layers);
      d.get("prune_rates", c.eval.defense.prune_rates);
      d.get("trials", c.eval.defense.trials);
    });
  });
  with_section(root, "stages", [&](Section& s) {
    s.get("probe", c.stages.probe);
    s.get("durability", c.stages.durability);
    s.get("indistinguishability", c.stages.indistinguishability);
    s.get("defense", c.stages.defense);
  });
  root.finish();
  validate(c);
  return c;
}

json config_to_json(const ExperimentConfig& c) {
  const DataConfig& d = c.data;
  return {
      {"schema_version", c.schema_version},
      {"seed", c.seed},
      {"output_dir", c.output_dir},
      {"data",
       {{"num_classes", d.num_classes},
        {"image_size", d.image_size},
        {"shadow_size", d.shadow_size},
        {"shadow_holdout_size", d.shadow_holdout_size},
        {"pretext_per_class", d.pretext_per_class},
        {"downstream_classes", d.downstream_classes},
        {"train_per_class", d.train_per_class},
        {"test_per_class", d.test_per_class},
        {"reference_count", d.reference_count},
        {"targets", d.targets},
        {"noise_amplitude", d.noise_amplitude},
        {"jitter", d.jitter},
        {"reference_jitter_shift", d.reference_jitter_shift},
        {"reference_noise_amplitude", d.reference_noise_amplitude}}},
      {"pretrain",
       {{"epochs", c.pretrain.epochs}, {"lr", c.pretrain.lr}, {"batch_size", c.pretrain.batch_size}}},
      {"trigger",
       {{"kind", std::string(to_string(c.trigger.kind))},
        {"budget", c.trigger.budget},
        {"steps", c.trigger.steps},
        {"lr", c.trigger.lr},
        {"batch_size", c.trigger.batch_size},
        {"patch_fraction", c.trigger.patch_fraction},
        {"sig_delta", c.trigger.sig_delta},
        {"sig_frequency", c.trigger.sig_frequency},
        {"random_bound", c.trigger.random_bound}}},
      {"backdoor",
       {{"lambda", c.backdoor.lambda},
        {"epochs", c.backdoor.epochs},
        {"lr", c.backdoor.lr},
        {"batch_size", c.backdoor.batch_size}}},
      {"finetune",
       {{"epochs", c.finetune.epochs},
        {"lr", c.finetune.lr},
        {"batch_size", c.finetune.batch_size},
        {"head", head_name(c.finetune.head)},
        {"mlp_hidden", c.finetune.mlp_hidden}}},
      {"probe",
       {{"head", head_name(c.probe.head)},
        {"epochs", c.probe.epochs},
        {"mlp_epochs", c.probe.mlp_epochs},
        {"lr", c.probe.lr},
        {"batch_size", c.probe.batch_size},
        {"mlp_hidden", c.probe.mlp_hidden}}},
      {"eval",
       {{"epsilon_pre", c.eval.epsilon_pre},
        {"epsilon_post", c.eval.epsilon_post},
        {"defense",
         {{"reinit_layers", c.eval.defense.reinit_layers},
          {"prune_rates", c.eval.defense.prune_rates},
          {"trials", c.eval.defense.trials}}}}},
      {"stages",
       {{"probe", c.stages.probe},
        {"durability", c.stages.durability},
        {"indistinguishability", c.stages.indistinguishability},
        {"defense", c.stages.defense}}},
  };
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config file not found: " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) return config_from_json(json::object());
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

std::uint64_t config_hash(const ExperimentConfig& config) {
  json j = config_to_json(config);
  j.erase("output_dir");
  return fnv1a64(j.dump());
}

std::string hex64(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

json StageSeeds::to_json() const {
  return {{"data", data},         {"pretrain", pretrain}, {"trigger", trigger}, {"backdoor", backdoor},
          {"finetune", finetune}, {"probe", probe},       {"defense", defense}};
}

StageSeeds stage_seeds(const ExperimentConfig& c) {
  StageSeeds s;
  s.data = derive_seed(c.seed, "data");
  s.pretrain = derive_seed(c.seed, "pretrain");
  s.trigger = derive_seed(c.seed, "trigger");
  s.backdoor = derive_seed(c.seed, "backdoor");
  s.finetune = derive_seed(c.seed, "finetune");
  s.probe = derive_seed(c.seed, "probe");
  s.defense = derive_seed(c.seed, "defense");
  return s;
}

DataConfig data_config(const ExperimentConfig& c) {
  DataConfig d = c.data;
  d.seed = stage_seeds(c).data;
  return d;
}

PretrainConfig pretrain_config(const ExperimentConfig& c) {
  PretrainConfig p = c.pretrain;
  p.seed = stage_seeds(c).pretrain;
  return p;
}

TriggerOptConfig trigger_config(const ExperimentConfig& c, std::size_t target_class) {
  TriggerOptConfig t;
  t.budget = c.trigger.budget;
  t.steps = c.trigger.steps;
  t.lr = c.trigger.lr;
  t.batch_size = c.trigger.batch_size;
  t.seed = derive_seed(stage_seeds(c).trigger, "target", target_class);
  return t;
}

BackdoorConfig backdoor_config(const ExperimentConfig& c) {
  BackdoorConfig b = c.backdoor;
  b.seed = stage_seeds(c).backdoor;
  return b;
}

FineTuneConfig finetune_config(const ExperimentConfig& c) {
  FineTuneConfig f = c.finetune;
  f.seed = stage_seeds(c).finetune;
  f.keep_snapshots = false;
  return f;
}

FineTuneConfig probe_config(const ExperimentConfig& c) {
  FineTuneConfig f;
  f.epochs = c.probe.head == HeadKind::kMlp ? c.probe.mlp_epochs : c.probe.epochs;
  f.lr = c.probe.lr;
  f.batch_size = c.probe.batch_size;
  f.head = c.probe.head;
  f.mlp_hidden = c.probe.mlp_hidden;
  f.seed = stage_seeds(c).probe;
  return f;
}

DefenseConfig defense_config(const ExperimentConfig& c, DefenseKind kind) {
  DefenseConfig d;
  d.kind = kind;
  d.axis = kind == DefenseKind::kReinit ? c.eval.defense.reinit_layers : c.eval.defense.prune_rates;
  d.trials = c.eval.defense.trials;
  d.seed = stage_seeds(c).defense;
  d.finetune = finetune_config(c);
  return d;
}

}  // namespace etl
