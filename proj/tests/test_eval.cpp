#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "etl/errors.hpp"
#include "etl/eval.hpp"
#include "etl/rng.hpp"
#include "support.hpp"

using namespace etl;
using etl::testing::TempDir;
using etl::testing::tiny_data_config;

namespace {

struct Fixture {
  DatasetBundle bundle;
  Encoder encoder;
  Trigger trigger;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    Fixture x;
    x.bundle = build_bundle(tiny_data_config(13));
    PretrainConfig pc;
    pc.epochs = 2;
    pc.seed = 17;
    x.encoder = pretrain(x.bundle.pretext, 8, pc);
    x.trigger = make_random_trigger(ImageShape{16, 16, 3}, 10.0, 19);
    return x;
  }();
  return f;
}

// Linear head that ignores its input and always scores `winner` highest.
DownstreamModel constant_model(std::size_t classes, std::size_t winner) {
  const std::size_t d = Encoder::init(0).arch().embed_dim;
  std::vector<double> bias(classes, 0.0);
  bias[winner] = 1.0;
  return {Encoder::init(0), Head::linear_from(std::vector<double>(d * classes, 0.0), bias, d, classes)};
}

std::string read_first_line(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::string line;
  std::getline(in, line);
  return line;
}

}  // namespace

TEST_CASE("accuracy") {
  const std::vector<std::size_t> pred{0, 1, 2, 2}, label{0, 1, 2, 0};
  CHECK(accuracy(pred, label) == 75.0);
  CHECK(accuracy(label, label) == 100.0);
  CHECK_THROWS_AS(accuracy(std::vector<std::size_t>{0}, label), ShapeError);
  CHECK_THROWS_AS(accuracy(std::vector<std::size_t>{}, std::vector<std::size_t>{}), Error);

  SUBCASE("matches the confusion-matrix trace") {
    Rng rng(3);
    for (int rep = 0; rep < 20; ++rep) {
      const std::size_t n = 1 + rng.uniform_index(200), c = 2 + rng.uniform_index(5);
      std::vector<std::size_t> p(n), y(n);
      std::vector<std::vector<std::size_t>> confusion(c, std::vector<std::size_t>(c, 0));
      for (std::size_t i = 0; i < n; ++i) {
        p[i] = rng.uniform_index(c);
        y[i] = rng.uniform_index(c);
        ++confusion[y[i]][p[i]];
      }
      std::size_t trace = 0;
      for (std::size_t k = 0; k < c; ++k) trace += confusion[k][k];
      CHECK(accuracy(p, y) == doctest::Approx(100.0 * trace / n).epsilon(1e-15));
    }
  }
}

TEST_CASE("attack success rate") {
  SUBCASE("target-class samples are left out of the denominator") {
    const std::vector<std::size_t> label{0, 1, 2, 2}, pred{2, 0, 0, 0};
    CHECK(attack_success_rate(pred, label, 2) == 50.0);
    CHECK_THROWS_AS(attack_success_rate(pred, std::vector<std::size_t>{2, 2, 2, 2}, 2), Error);
  }
  SUBCASE("model-level bounds") {
    const auto& f = fixture();
    const Dataset& test = f.bundle.downstream_test;
    CHECK(attack_success_rate(constant_model(6, 3), test, f.trigger, 3) == 100.0);
    CHECK(attack_success_rate(constant_model(6, 1), test, f.trigger, 3) == 0.0);
    CHECK(clean_accuracy(constant_model(6, 1), test) == doctest::Approx(100.0 / 6.0));
    Dataset only_target(test.shape(), true);
    only_target.add(test[0]);
    CHECK_THROWS_AS(attack_success_rate(constant_model(6, 1), only_target, f.trigger, test.label(0)),
                    Error);
  }
}

TEST_CASE("durability curve agrees with direct evaluation") {
  const auto& f = fixture();
  FineTuneConfig c;
  c.epochs = 3;
  c.seed = 8;
  const auto curve = durability_curve(f.encoder, f.bundle.downstream_train, f.bundle.downstream_test, 6,
                                      f.trigger, 2, c);
  REQUIRE(curve.size() == 3);
  for (std::size_t e = 1; e <= 3; ++e) {
    FineTuneConfig k = c;
    k.epochs = e;
    const DownstreamModel m = fine_tune(f.encoder, f.bundle.downstream_train, 6, k).model;
    CHECK(curve[e - 1].epoch == e);
    CHECK(curve[e - 1].ba == clean_accuracy(m, f.bundle.downstream_test));
    CHECK(curve[e - 1].asr == attack_success_rate(m, f.bundle.downstream_test, f.trigger, 2));
  }
  c.epochs = 0;
  CHECK_THROWS_AS(durability_curve(f.encoder, f.bundle.downstream_train, f.bundle.downstream_test, 6,
                                   f.trigger, 2, c),
                  ConfigError);
}

TEST_CASE("fine-pruning") {
  const auto& f = fixture();
  const Dataset& probe = f.bundle.shadow_holdout;
  const ChannelActivity act = channel_activity(f.encoder, probe);
  REQUIRE(act.conv1.size() == 16);
  REQUIRE(act.conv2.size() == 32);
  for (double v : act.conv2) CHECK(v >= 0.0);

  SUBCASE("rate 0 is the identity") {
    const Encoder same = fine_prune(f.encoder, probe, 0.0);
    CHECK(same.bit_equal(f.encoder));
    CHECK(std::count(same.conv1_mask().begin(), same.conv1_mask().end(), 0) == 0);
    const Tensor a = same.embed(f.bundle.downstream_test), b = f.encoder.embed(f.bundle.downstream_test);
    CHECK(std::equal(a.values().begin(), a.values().end(), b.values().begin()));
  }
  SUBCASE("the least active channels are masked and read zero") {
    const Encoder pruned = fine_prune(f.encoder, act, 0.07);
    const auto order1 = prune_order(act.conv1), order2 = prune_order(act.conv2);
    CHECK(std::count(pruned.conv1_mask().begin(), pruned.conv1_mask().end(), 0) == 1);
    CHECK(std::count(pruned.conv2_mask().begin(), pruned.conv2_mask().end(), 0) == 2);
    CHECK(pruned.conv1_mask()[order1[0]] == 0);
    CHECK(pruned.conv2_mask()[order2[0]] == 0);
    CHECK(pruned.conv2_mask()[order2[1]] == 0);
    const auto trace = pruned.forward_trace(probe.batch(iota_indices(8)));
    auto v = trace.conv1.values();
    for (std::size_t i = order1[0]; i < v.size(); i += 16) CHECK(v[i] == 0.0);
    CHECK(std::count(f.encoder.conv1_mask().begin(), f.encoder.conv1_mask().end(), 0) == 0);
  }
  SUBCASE("masked sets grow with the rate") {
    std::vector<std::uint8_t> prev1(16, 1), prev2(32, 1);
    for (double rate : {0.1, 0.25, 0.5, 0.75, 0.9}) {
      const Encoder p = fine_prune(f.encoder, act, rate);
      CHECK(static_cast<std::size_t>(std::count(p.conv2_mask().begin(), p.conv2_mask().end(), 0)) ==
            static_cast<std::size_t>(std::floor(rate * 32)));
      for (std::size_t c = 0; c < 16; ++c) CHECK(p.conv1_mask()[c] <= prev1[c]);
      for (std::size_t c = 0; c < 32; ++c) CHECK(p.conv2_mask()[c] <= prev2[c]);
      prev1 = p.conv1_mask();
      prev2 = p.conv2_mask();
    }
  }
  SUBCASE("ties keep index order") {
    const std::vector<double> a{0.5, 0.1, 0.5, 0.1};
    CHECK(prune_order(a) == std::vector<std::size_t>{1, 3, 0, 2});
  }
  SUBCASE("rate outside [0, 1)") {
    CHECK_THROWS_AS(fine_prune(f.encoder, act, 1.0), ConfigError);
    CHECK_THROWS_AS(fine_prune(f.encoder, act, -0.1), ConfigError);
    CHECK_THROWS_AS(fine_prune(f.encoder, probe, 1.0), ConfigError);
  }
}

TEST_CASE("defense sweeps") {
  const auto& f = fixture();
  DefenseConfig dc;
  dc.trials = 1;
  dc.seed = 23;
  dc.finetune.epochs = 2;
  dc.finetune.seed = 29;
  const DownstreamModel plain = fine_tune(f.encoder, f.bundle.downstream_train, 6, dc.finetune).model;
  const double ba = clean_accuracy(plain, f.bundle.downstream_test);
  const double asr = attack_success_rate(plain, f.bundle.downstream_test, f.trigger, 2);
  auto run = [&](const DefenseConfig& c) {
    return defense_sweep(f.encoder, f.bundle.shadow_holdout, f.bundle.downstream_train,
                         f.bundle.downstream_test, 6, f.trigger, 2, c);
  };

  SUBCASE("identity defenses reproduce the undefended evaluation") {
    for (auto kind : {DefenseKind::kReinit, DefenseKind::kPrune}) {
      DefenseConfig c = dc;
      c.kind = kind;
      c.axis = {0.0};
      const DefenseSweep s = run(c);
      REQUIRE(s.points.size() == 1);
      CHECK(s.points[0].ba == ba);
      CHECK(s.points[0].asr == asr);
      CHECK(s.trials == 1);
      CHECK(s.target_label == 2);
    }
  }
  SUBCASE("points average independent trials") {
    DefenseConfig c = dc;
    c.axis = {1.0};
    c.trials = 2;
    double ba_sum = 0.0, asr_sum = 0.0;
    for (std::size_t t = 0; t < 2; ++t) {
      FineTuneConfig ft = dc.finetune;
      if (t > 0) ft.seed = derive_seed(dc.finetune.seed, "trial", t);
      const Encoder d = reinitialize_last_n(f.encoder, 1, derive_seed(dc.seed, "defense", t));
      const DownstreamModel m = fine_tune(d, f.bundle.downstream_train, 6, ft).model;
      ba_sum += clean_accuracy(m, f.bundle.downstream_test);
      asr_sum += attack_success_rate(m, f.bundle.downstream_test, f.trigger, 2);
    }
    const DefenseSweep s = run(c);
    CHECK(s.points[0].ba == doctest::Approx(ba_sum / 2).epsilon(1e-15));
    CHECK(s.points[0].asr == doctest::Approx(asr_sum / 2).epsilon(1e-15));
  }
  SUBCASE("axis validation") {
    DefenseConfig c = dc;
    c.axis = {};
    CHECK_THROWS_AS(run(c), ConfigError);
    c.axis = {1.0, 1.0};
    CHECK_THROWS_AS(run(c), ConfigError);
    c.axis = {2.0, 1.0};
    CHECK_THROWS_AS(run(c), ConfigError);
    c.axis = {4.0};
    CHECK_THROWS_AS(run(c), ConfigError);
    c.axis = {0.5};
    CHECK_THROWS_AS(run(c), ConfigError);
    c.kind = DefenseKind::kPrune;
    c.axis = {1.0};
    CHECK_THROWS_AS(run(c), ConfigError);
    c.axis = {0.5};
    c.trials = 0;
    CHECK_THROWS_AS(run(c), ConfigError);
  }
  CHECK(parse_defense_kind("prune") == DefenseKind::kPrune);
  CHECK(to_string(DefenseKind::kReinit) == "reinit");
  CHECK_THROWS_AS(parse_defense_kind("retrain"), ConfigError);
}

TEST_CASE("principal components") {
  SUBCASE("points on a line") {
    std::vector<double> v;
    for (int i = 0; i < 20; ++i) {
      const double t = i - 9.5;
      v.insert(v.end(), {1.0 + t, 2.0 * t - 3.0, 2.0 * t});
    }
    const PcaResult p = pca_project(Tensor({20, 3}, v), 2);
    REQUIRE(p.components.size() == 1);
    CHECK(p.rank_deficient);
    CHECK(p.explained_ratio[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(p.components[0][0] == doctest::Approx(1.0 / 3.0).epsilon(1e-10));
    CHECK(p.components[0][1] == doctest::Approx(2.0 / 3.0).epsilon(1e-10));
    CHECK(p.components[0][2] == doctest::Approx(2.0 / 3.0).epsilon(1e-10));
    for (int i = 0; i < 20; ++i) CHECK(p.points[i][0] == doctest::Approx(3.0 * (i - 9.5)).epsilon(1e-10));
  }
  SUBCASE("anisotropic Gaussian") {
    Rng rng(31);
    std::vector<double> v;
    for (int i = 0; i < 10000; ++i) v.insert(v.end(), {2.0 * rng.normal(), rng.normal()});
    const PcaResult p = pca_project(Tensor({10000, 2}, v), 2);
    REQUIRE(p.components.size() == 2);
    CHECK_FALSE(p.rank_deficient);
    CHECK(std::abs(p.explained_ratio[0] - 0.8) <= 0.02);
    CHECK(std::abs(p.explained_ratio[1] - 0.2) <= 0.02);
    CHECK(std::abs(p.components[0][0]) > 0.99);
  }
  SUBCASE("projection is idempotent and components are orthonormal") {
    Rng rng(37);
    std::vector<double> v(50 * 6);
    for (double& x : v) x = rng.uniform(-1.0, 1.0);
    const PcaResult p = pca_project(Tensor({50, 6}, v), 3);
    REQUIRE(p.components.size() == 3);
    for (std::size_t a = 0; a < 3; ++a)
      for (std::size_t b = 0; b < 3; ++b) {
        double dot = 0.0;
        for (std::size_t j = 0; j < 6; ++j) dot += p.components[a][j] * p.components[b][j];
        CHECK(dot == doctest::Approx(a == b ? 1.0 : 0.0).epsilon(1e-8));
      }
    for (std::size_t i = 0; i < 50; ++i) {
      std::vector<double> back = p.mean;
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t j = 0; j < 6; ++j) back[j] += p.points[i][c] * p.components[c][j];
      const auto again = pca_coordinates(p, back);
      for (std::size_t c = 0; c < 3; ++c) CHECK(again[c] == doctest::Approx(p.points[i][c]).epsilon(1e-9));
    }
    for (const auto& comp : p.components) {
      const auto big = std::max_element(comp.begin(), comp.end(),
                                        [](double a, double b) { return std::abs(a) < std::abs(b); });
      CHECK(*big > 0.0);
    }
  }
  SUBCASE("invalid input") {
    CHECK_THROWS_AS(pca_project(Tensor({6}, std::vector<double>(6, 0.0))), ShapeError);
    CHECK_THROWS_AS(pca_project(Tensor({2, 3}, std::vector<double>(6, 0.0)), 2), Error);
    CHECK_THROWS_AS(pca_project(Tensor({4, 3}, std::vector<double>(12, 0.0)), 0), ConfigError);
    const PcaResult flat = pca_project(Tensor({4, 3}, std::vector<double>(12, 1.0)), 2);
    CHECK(flat.components.empty());
    CHECK(flat.rank_deficient);
  }
}

TEST_CASE("serialized percentages round half up") {
  CHECK(round_percent(0.125) == 0.13);
  CHECK(round_percent(75.0) == 75.0);
  CHECK(round_percent(200.0 / 3.0) == 66.67);
  CHECK(round_percent(12.344) == 12.34);
  CHECK(round_percent(99.995) == 100.0);
}

TEST_CASE("report and csv outputs") {
  EvalReport r;
  r.ca = 98.7654;
  r.asr = 12.5;
  r.curve = {{1, 90.0, 10.0}, {2, 91.111, 9.999}};
  r.per_target = {{4, 2, 33.333}};
  DefenseSweep s{DefenseKind::kPrune, 2, 3, {{0.0, 90.0, 10.0}, {0.5, 80.0, 5.0}}};
  r.sweeps.push_back(s);
  const auto j = report_to_json(r);
  for (const char* key : {"ca", "ba", "asr", "curve", "per_target", "sweeps", "indistinguishability", "manifest"})
    CHECK(j.contains(key));
  CHECK(j["ca"].get<double>() == 98.77);
  CHECK(j["ba"].is_null());
  CHECK(j["curve"][1]["asr"].get<double>() == 10.0);
  CHECK(j["per_target"][0]["asr"].get<double>() == 33.33);
  CHECK(j["sweeps"][0]["kind"] == "prune");
  CHECK(j["sweeps"][0]["points"].size() == 2);
  CHECK(j["indistinguishability"]["pre"].is_null());

  TempDir dir("eval");
  write_report(r, dir.path() / "sub" / "report.json");
  std::ifstream in(dir.path() / "sub" / "report.json");
  CHECK(nlohmann::json::parse(in) == j);
  write_curve_csv(r.curve, dir.path() / "curve.csv");
  CHECK(read_first_line(dir.path() / "curve.csv") == "epoch,ba,asr");
  write_sweep_csv(s, dir.path() / "prune.csv");
  CHECK(read_first_line(dir.path() / "prune.csv") == "rate,ba,asr");
  s.kind = DefenseKind::kReinit;
  write_sweep_csv(s, dir.path() / "reinit.csv");
  CHECK(read_first_line(dir.path() / "reinit.csv") == "layers,ba,asr");
}
