// Acceptance run: one PASS/FAIL line per criterion. Pass criterion numbers as
// arguments to run a subset.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>
#include <unistd.h>

#include "etl/attack.hpp"
#include "etl/batching.hpp"
#include "etl/config.hpp"
#include "etl/downstream.hpp"
#include "etl/errors.hpp"
#include "etl/eval.hpp"
#include "etl/ops.hpp"
#include "etl/optim.hpp"
#include "support.hpp"

using namespace etl;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

template <typename... Args>
std::string fmt(const char* format, Args... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

void progress(const std::string& line) { std::cerr << "  .. " << line << std::endl; }

double cosine(const double* a, const double* b, std::size_t d) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / (std::sqrt(aa) * std::sqrt(bb));
}

// Embeds one image at a time.
std::vector<std::vector<double>> embed_each(const Encoder& enc, const Dataset& data) {
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::vector<std::size_t> one{i};
    const Tensor e = enc.forward(data.batch(one));
    out.emplace_back(e.values().begin(), e.values().end());
  }
  return out;
}

// Mean cosine to the mean reference embedding, both computed sample by sample.
double loop_similarity(const Encoder& enc, const Dataset& data, const Trigger* trigger, const Dataset& refs) {
  const auto ref_rows = embed_each(enc, refs);
  std::vector<double> r(ref_rows.front().size(), 0.0);
  for (const auto& row : ref_rows)
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += row[j];
  for (double& v : r) v /= static_cast<double>(ref_rows.size());
  const auto rows = embed_each(enc, trigger ? poison(data, *trigger) : data);
  double total = 0.0;
  for (const auto& row : rows) total += cosine(row.data(), r.data(), r.size());
  return total / static_cast<double>(rows.size());
}

// Mean cosine between paired rows of two encoders, sample by sample.
double loop_functional_similarity(const Encoder& a, const Encoder& b, const Dataset& data) {
  const auto ra = embed_each(a, data), rb = embed_each(b, data);
  double total = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) total += cosine(ra[i].data(), rb[i].data(), ra[i].size());
  return total / static_cast<double>(ra.size());
}

// The single-target objective assembled from the public per-target losses,
// trained with its own loop.
Encoder single_target_backdoor(const Encoder& clean, const Dataset& shadow, const Trigger& trigger,
                               const ReferenceEmbedding& reference, const BackdoorConfig& config) {
  Encoder victim = clean.clone();
  victim.set_trainable(true);
  AdamOptions opts;
  opts.lr = config.lr;
  Adam adam(victim.parameters(), opts);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (const auto& idx : epoch_batches(shadow.size(), config.batch_size, config.seed, epoch)) {
      const Tensor pixels = shadow.batch(idx);
      Tensor loss = ops::add(loss_post(victim, pixels, trigger, reference),
                             ops::scale(loss_func(victim, clean, pixels), config.lambda));
      adam.zero_grad();
      loss.backward();
      adam.step();
    }
  }
  victim.set_trainable(false);
  return victim;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

std::vector<fs::path> relative_files(const fs::path& root) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out.push_back(fs::relative(e.path(), root));
  std::sort(out.begin(), out.end());
  return out;
}

class Acceptance {
 public:
  explicit Acceptance(std::set<int> only) : only_(std::move(only)) {}

  void run(int id, const std::string& name, const std::function<Outcome()>& body) {
    if (!only_.empty() && !only_.count(id)) return;
    const auto start = Clock::now();
    Outcome o;
    try {
      o = body();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures_ += o.pass ? 0 : 1;
    std::cout << "criterion " << id << " " << (o.pass ? "PASS" : "FAIL") << " " << name << ": " << o.detail
              << fmt(" [%.1fs]", seconds_since(start)) << std::endl;
  }

  int failures() const { return failures_; }

 private:
  std::set<int> only_;
  int failures_ = 0;
};

// Default-config fixture shared by the end-to-end criteria. Stages are built
// lazily and timed once.
class Desk {
 public:
  Desk() : config(config_from_json(nlohmann::json::object())), bundle(build_bundle(data_config(config))) {
    target = config.data.targets.front();
    target_label = bundle.task_label(target);
  }

  const Encoder& clean() {
    if (!clean_) {
      progress("pre-training the clean encoder");
      const auto start = Clock::now();
      clean_ = pretrain(bundle.pretext, config.data.num_classes, pretrain_config(config));
      pretrain_seconds = seconds_since(start);
      reference_ = compute_reference_embedding(*clean_, bundle.references.at(target), target);
    }
    return *clean_;
  }

  const ReferenceEmbedding& reference() {
    clean();
    return *reference_;
  }

  const Trigger& trigger() {
    if (!trigger_) {
      const Encoder& enc = clean();
      progress("optimizing the trigger");
      const auto start = Clock::now();
      TriggerOptConfig tc = trigger_config(config, target);
      tc.on_step = [this](std::size_t, const Trigger& t) {
        ++steps_seen;
        max_linf = std::max(max_linf, t.linf());
      };
      trigger_ = optimize_trigger(enc, bundle.shadow, reference(), tc).trigger;
      trigger_seconds = seconds_since(start);
    }
    return *trigger_;
  }

  const Encoder& backdoored() {
    if (!backdoored_) {
      const Trigger& t = trigger();
      progress("injecting the backdoor");
      const auto start = Clock::now();
      backdoored_ = train_backdoor(clean(), bundle.shadow, t, reference(), backdoor_config(config)).encoder;
      backdoor_seconds = seconds_since(start);
    }
    return *backdoored_;
  }

  double ca() {
    if (!ca_) {
      const Encoder& enc = clean();
      progress("fine-tuning the clean encoder");
      const auto start = Clock::now();
      ca_ = clean_accuracy(fine_tune(enc, bundle.downstream_train, classes(), finetune_config(config)).model,
                           bundle.downstream_test);
      finetune_seconds += seconds_since(start);
    }
    return *ca_;
  }

  // Backdoored encoder fine-tuned on the downstream task, evaluated after every epoch.
  const std::vector<CurvePoint>& curve() {
    if (curve_.empty()) {
      const Encoder& enc = backdoored();
      progress("fine-tuning the backdoored encoder");
      const auto start = Clock::now();
      curve_ = durability_curve(enc, bundle.downstream_train, bundle.downstream_test, classes(), trigger(),
                                target_label, finetune_config(config));
      finetune_seconds += seconds_since(start);
    }
    return curve_;
  }

  std::size_t classes() const { return config.data.downstream_classes.size(); }

  ExperimentConfig config;
  DatasetBundle bundle;
  std::size_t target = 0;
  std::size_t target_label = 0;
  std::size_t steps_seen = 0;
  double max_linf = 0.0;
  double pretrain_seconds = 0.0, trigger_seconds = 0.0, backdoor_seconds = 0.0, finetune_seconds = 0.0;

 private:
  std::optional<Encoder> clean_;
  std::optional<ReferenceEmbedding> reference_;
  std::optional<Trigger> trigger_;
  std::optional<Encoder> backdoored_;
  std::optional<double> ca_;
  std::vector<CurvePoint> curve_;
};

Outcome autodiff() {
  const auto start = Clock::now();
  double worst = 0.0;
  std::string worst_name;
  std::size_t checks = 0;
  for (const auto& c : etl::testing::gradient_cases()) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const double err = c.run(seed);
      ++checks;
      if (!(err <= worst)) {
        worst = err;
        worst_name = c.name;
      }
    }
  }
  const double elapsed = seconds_since(start);
  return {worst <= 1e-6 && elapsed < 60.0,
          fmt("%zu op/seed checks, max relative error %.2e (%s), %.1fs", checks, worst, worst_name.c_str(),
              elapsed)};
}

Outcome embedding_invariants() {
  Rng rng(2024);
  const ImageShape shape{4, 4, 3};
  std::size_t violations = 0;
  for (int pair = 0; pair < 10000; ++pair) {
    ImageSample x{std::vector<std::uint8_t>(shape.pixels()), std::nullopt};
    for (auto& p : x.pixels) p = static_cast<std::uint8_t>(rng.uniform_index(256));
    const double bound = rng.uniform(0.0, 300.0);
    Trigger t = Trigger::zeros(shape, bound);
    for (double& v : t.perturbation) v = rng.uniform(-bound, bound);
    const ImageSample y = embed_trigger(x, t);
    for (std::size_t i = 0; i < x.pixels.size(); ++i) {
      const double expect = std::clamp(std::round(x.pixels[i] + t.perturbation[i]), 0.0, 255.0);
      if (static_cast<double>(y.pixels[i]) != expect) ++violations;
    }
    const Tensor raw({1, shape.height, shape.width, shape.channels},
                     std::vector<double>(x.pixels.begin(), x.pixels.end()));
    const Tensor poisoned = poison_pixels(raw, t);
    for (double v : poisoned.values())
      if (v < 0.0 || v > 255.0) ++violations;
    if (embed_trigger(x, Trigger::zeros(shape, bound)).pixels != x.pixels) ++violations;
  }
  return {violations == 0, fmt("10000 random pairs, %zu violations", violations)};
}

Outcome projection(Desk& d) {
  d.trigger();
  const TriggerOptConfig base = trigger_config(d.config, d.target);
  TriggerOptConfig zero = base;
  zero.budget = 0.0;
  const Trigger flat = optimize_trigger(d.clean(), d.bundle.shadow, d.reference(), zero).trigger;
  const Trigger none = Trigger::zeros(d.bundle.shadow.shape(), 0.0);
  const double sim_zero_budget = mean_similarity(d.clean(), d.bundle.shadow_holdout, &flat, d.reference());
  const double sim_baseline = mean_similarity(d.clean(), d.bundle.shadow_holdout, &none, d.reference());
  const double gap = std::abs(sim_zero_budget - sim_baseline);
  const bool ok = d.steps_seen == base.steps && d.max_linf <= base.budget && gap <= 1e-9;
  return {ok, fmt("%zu steps observed, max |t|_inf %.6f (budget %.1f); zero-budget similarity gap %.2e",
                  d.steps_seen, d.max_linf, base.budget, gap)};
}

Outcome pre_indistinguishability(Desk& d) {
  const Trigger& t = d.trigger();
  const Trigger none = Trigger::zeros(t.shape, t.budget);
  const Dataset& holdout = d.bundle.shadow_holdout;
  const double base = mean_similarity(d.clean(), holdout, &none, d.reference());
  const double opt = mean_similarity(d.clean(), holdout, &t, d.reference());
  const Dataset& refs = d.bundle.references.at(d.target);
  const double base_loop = loop_similarity(d.clean(), holdout, nullptr, refs);
  const double opt_loop = loop_similarity(d.clean(), holdout, &t, refs);
  const double oracle_gap = std::max(std::abs(base - base_loop), std::abs(opt - opt_loop));
  const double runtime = d.pretrain_seconds + d.trigger_seconds;
  return {opt - base >= 0.2 && oracle_gap <= 1e-9 && runtime < 300.0,
          fmt("baseline %.4f, optimized %.4f, gain %.4f (oracle gap %.1e), pretrain+trigger %.0fs", base, opt,
              opt - base, oracle_gap, runtime)};
}

Outcome end_to_end(Desk& d) {
  const double ca = d.ca();
  const CurvePoint last = d.curve().back();
  const double runtime = d.pretrain_seconds + d.trigger_seconds + d.backdoor_seconds + d.finetune_seconds;
  const bool ok = last.asr >= 95.0 && std::abs(last.ba - ca) <= 3.0 && runtime < 900.0;
  return {ok, fmt("CA %.2f, BA %.2f, ASR %.2f (gates: ASR >= 95, |BA-CA| <= 3), pipeline %.0fs", ca, last.ba,
                  last.asr, runtime)};
}

Outcome durability(Desk& d) {
  const auto& curve = d.curve();
  const double first = curve.front().asr, last = curve.back().asr;
  progress("patch-trigger baseline");
  const Trigger patch = make_patch_trigger(d.bundle.shadow.shape(), d.config.trigger.patch_fraction);
  const Encoder patched =
      train_backdoor(d.clean(), d.bundle.shadow, patch, d.reference(), backdoor_config(d.config)).encoder;
  const DownstreamModel m =
      fine_tune(patched, d.bundle.downstream_train, d.classes(), finetune_config(d.config)).model;
  const double patch_asr = attack_success_rate(m, d.bundle.downstream_test, patch, d.target_label);
  const bool ok = last >= first - 5.0 && patch_asr < last;
  return {ok, fmt("ASR epoch 1 %.2f, epoch %zu %.2f (gate >= %.2f); patch baseline epoch-%zu ASR %.2f "
                  "(must be < %.2f)",
                  first, curve.size(), last, first - 5.0, curve.size(), patch_asr, last)};
}

Outcome multi_target(Desk& d) {
  ExperimentConfig cfg = d.config;
  cfg.data.targets = {2, 4, 6};
  validate(cfg);
  const DatasetBundle b = build_bundle(data_config(cfg));
  for (std::size_t i = 0; i < b.pretext.size(); ++i)
    if (b.pretext[i].pixels != d.bundle.pretext[i].pixels) return {false, "pretext split depends on targets"};
  const Encoder& clean = d.clean();

  std::vector<BackdoorTarget> targets;
  for (std::size_t c : cfg.data.targets) {
    progress("optimizing the trigger for class " + std::to_string(c));
    const ReferenceEmbedding ref = compute_reference_embedding(clean, b.references.at(c), c);
    targets.push_back({optimize_trigger(clean, b.shadow, ref, trigger_config(cfg, c)).trigger, ref});
  }
  progress("injecting three backdoors");
  const Encoder bd = train_backdoor(clean, b.shadow, targets, backdoor_config(cfg)).encoder;
  progress("fine-tuning");
  const DownstreamModel m = fine_tune(bd, b.downstream_train, d.classes(), finetune_config(cfg)).model;
  const double ba = clean_accuracy(m, b.downstream_test);
  const double ca = d.ca();
  bool ok = std::abs(ba - ca) <= 4.0;
  std::string asrs;
  for (const auto& t : targets) {
    const double asr = attack_success_rate(m, b.downstream_test, t.trigger, b.task_label(t.reference.target_class));
    ok = ok && asr >= 90.0;
    asrs += fmt("%s%zu:%.2f", asrs.empty() ? "" : " ", t.reference.target_class, asr);
  }

  // One-element target list against an independently written single-target loop.
  progress("single-target reduction");
  BackdoorConfig short_cfg = backdoor_config(cfg);
  short_cfg.epochs = 2;
  const Encoder via_list =
      train_backdoor(clean, b.shadow, std::span<const BackdoorTarget>(targets.data(), 1), short_cfg).encoder;
  const Encoder via_loop =
      single_target_backdoor(clean, b.shadow, targets[0].trigger, targets[0].reference, short_cfg);
  const bool reduction = via_list.bit_equal(via_loop);
  return {ok && reduction, fmt("per-target ASR {%s} (gate >= 90), CA %.2f, BA %.2f (gate |BA-CA| <= 4); "
                               "single-target reduction %s",
                               asrs.c_str(), ca, ba, reduction ? "bit-equal" : "DIFFERS")};
}

Outcome functionality_limit(Desk& d) {
  BackdoorConfig cfg = backdoor_config(d.config);
  cfg.lambda = 1e6;
  cfg.epochs = 1;
  const Encoder victim = train_backdoor(d.clean(), d.bundle.shadow, d.trigger(), d.reference(), cfg).encoder;
  const double sim = mean_functional_similarity(victim, d.clean(), d.bundle.shadow);
  const double oracle = loop_functional_similarity(victim, d.clean(), d.bundle.shadow);
  return {sim > 0.999 && std::abs(sim - oracle) <= 1e-9,
          fmt("mean cos(F~(x), F(x)) %.6f (oracle %.6f)", sim, oracle)};
}

Outcome defenses(Desk& d) {
  const Encoder& bd = d.backdoored();
  const Dataset& train = d.bundle.downstream_train;
  const Dataset& test = d.bundle.downstream_test;

  const Encoder pruned0 = fine_prune(bd, train, 0.0);
  const Encoder reinit0 = reinitialize_last_n(bd, 0, 99);
  const Tensor e = bd.embed(test), ep = pruned0.embed(test), er = reinit0.embed(test);
  const bool identities = pruned0.bit_equal(bd) && reinit0.bit_equal(bd) &&
                          std::equal(e.values().begin(), e.values().end(), ep.values().begin()) &&
                          std::equal(e.values().begin(), e.values().end(), er.values().begin());

  DefenseConfig dc = defense_config(d.config, DefenseKind::kReinit);
  dc.axis = {0.0, 3.0};
  dc.trials = 3;
  progress("re-initialization sweep");
  const DefenseSweep s = defense_sweep(bd, train, train, test, d.classes(), d.trigger(), d.target_label, dc);
  const SweepPoint none = s.points[0], all = s.points[1];
  const bool reinit_ok = none.asr - all.asr >= 30.0 && all.ba < none.ba;

  const ChannelActivity act = channel_activity(bd, train);
  bool monotone = true;
  std::vector<std::uint8_t> prev1(act.conv1.size(), 1), prev2(act.conv2.size(), 1);
  for (double rate : d.config.eval.defense.prune_rates) {
    const Encoder p = fine_prune(bd, act, rate);
    for (std::size_t c = 0; c < prev1.size(); ++c) monotone = monotone && p.conv1_mask()[c] <= prev1[c];
    for (std::size_t c = 0; c < prev2.size(); ++c) monotone = monotone && p.conv2_mask()[c] <= prev2[c];
    prev1 = p.conv1_mask();
    prev2 = p.conv2_mask();
  }
  return {identities && reinit_ok && monotone,
          fmt("identities %s; reinit n=0 BA %.2f ASR %.2f, n=3 BA %.2f ASR %.2f (ASR drop %.2f, gate >= 30; "
              "BA must drop); prune masks %s",
              identities ? "bit-exact" : "BROKEN", none.ba, none.asr, all.ba, all.asr, none.asr - all.asr,
              monotone ? "nested" : "NOT nested")};
}

Outcome metric_oracles() {
  bool ok = true;
  const std::vector<std::size_t> pred{0, 1, 2, 2}, label{0, 1, 2, 0};
  ok = ok && accuracy(pred, label) == 75.0;
  // Crafted set: two target samples, three others of which one flips.
  const std::vector<std::size_t> y{3, 3, 0, 1, 2}, p{3, 3, 3, 1, 2};
  const double asr = attack_success_rate(p, y, 3);
  ok = ok && asr == 100.0 / 3.0;
  bool threw = false;
  try {
    attack_success_rate(std::vector<std::size_t>{3}, std::vector<std::size_t>{3}, 3);
  } catch (const Error&) {
    threw = true;
  }
  ok = ok && threw;
  return {ok, fmt("3-of-4 accuracy %.1f; crafted ASR %.4f (expected 33.3333); all-target set rejected: %s",
                  accuracy(pred, label), asr, threw ? "yes" : "no")};
}

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / fmt("etl_accept_%d", static_cast<int>(::getpid()));
  fs::remove_all(root);
  fs::create_directories(root);
  nlohmann::json cfg = nlohmann::json::parse(R"({
    "seed": 7,
    "data": {"shadow_size": 256, "shadow_holdout_size": 64, "pretext_per_class": 32,
             "train_per_class": 32, "test_per_class": 16},
    "pretrain": {"epochs": 2},
    "trigger": {"steps": 20},
    "backdoor": {"epochs": 2},
    "finetune": {"epochs": 2},
    "probe": {"epochs": 2, "mlp_epochs": 2},
    "eval": {"defense": {"reinit_layers": [0, 3], "prune_rates": [0, 0.5], "trials": 2}}
  })");
  std::ofstream(root / "config.json") << cfg.dump(2);
  for (const char* run : {"first", "second"}) {
    const std::string cmd = std::string(ETL_CLI_PATH) + " -c " + (root / "config.json").string() + " -o " +
                            (root / run).string() + " all 2>/dev/null";
    const int status = std::system(cmd.c_str());
    if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) return {false, std::string("run failed: ") + cmd};
  }
  const auto files = relative_files(root / "first");
  if (files != relative_files(root / "second")) return {false, "the two runs wrote different file sets"};
  std::size_t differ = 0, checkpoints = 0, triggers = 0, reports = 0;
  for (const auto& f : files) {
    if (slurp(root / "first" / f) != slurp(root / "second" / f)) ++differ;
    const auto ext = f.extension().string();
    checkpoints += ext == ".etlc";
    triggers += ext == ".etlt";
    reports += ext == ".json" && f.string().find("manifest") == std::string::npos;
  }
  fs::remove_all(root);
  return {differ == 0 && checkpoints > 0 && triggers > 0 && reports > 0,
          fmt("%zu files compared (%zu checkpoints, %zu triggers, %zu reports), %zu differ", files.size(),
              checkpoints, triggers, reports, differ)};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  Acceptance a(only);
  std::optional<Desk> desk_storage;
  auto desk = [&]() -> Desk& {
    if (!desk_storage) desk_storage.emplace();
    return *desk_storage;
  };

  a.run(1, "autodiff matches central differences", autodiff);
  a.run(2, "trigger embedding stays in range and zero is identity", embedding_invariants);
  a.run(3, "projection keeps the trigger inside its budget", [&] { return projection(desk()); });
  a.run(4, "optimized trigger raises clean-encoder similarity", [&] { return pre_indistinguishability(desk()); });
  a.run(5, "end-to-end attack", [&] { return end_to_end(desk()); });
  a.run(6, "durability across fine-tuning", [&] { return durability(desk()); });
  a.run(7, "multiple simultaneous targets", [&] { return multi_target(desk()); });
  a.run(8, "large lambda preserves functionality", [&] { return functionality_limit(desk()); });
  a.run(9, "defenses", [&] { return defenses(desk()); });
  a.run(10, "metric oracles", metric_oracles);
  a.run(11, "full pipeline is deterministic", determinism);

  std::cout << (a.failures() == 0 ? "all criteria passed" : fmt("%d criteria failed", a.failures()))
            << std::endl;
  return a.failures() == 0 ? 0 : 1;
}
