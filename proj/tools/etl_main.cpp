#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "etl/config.hpp"
#include "etl/errors.hpp"
#include "etl/pipeline.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitOther = 1;
constexpr int kExitConfig = 2;
constexpr int kExitMissing = 3;
constexpr int kExitNumeric = 4;

constexpr const char* kFooter = R"(Exit codes:
  0  success
  1  other failure
  2  configuration or usage error
  3  missing input artifact
  4  numeric failure (NaN or Inf)

Environment:
  ETL_OUTPUT_DIR  output directory, used when --out is not given
                  (overrides output_dir from the config file))";

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Transferable encoder backdoor experiments on synthetic data"};
  app.footer(kFooter);
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  app.add_option("-c,--config", config_path, "Experiment config (JSON); defaults apply when omitted");
  app.add_option("-o,--out", out_dir, "Output directory");

  std::string encoder = "both";
  auto encoder_option = [&encoder](CLI::App* sub) {
    sub->add_option("--encoder", encoder, "clean, backdoored or both")
        ->check(CLI::IsMember({"clean", "backdoored", "both"}))
        ->capture_default_str();
  };

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic dataset bundle");
  auto* pre = app.add_subcommand("pretrain", "Pre-train the clean encoder on the pretext split");
  auto* opt = app.add_subcommand("opt-trigger", "Build one trigger per target class");
  auto* inj = app.add_subcommand("inject", "Train the backdoored encoder");
  auto* ft = app.add_subcommand("finetune", "Fine-tune encoder(s) on the downstream task");
  encoder_option(ft);
  auto* probe = app.add_subcommand("probe", "Train a probe head on frozen encoder(s)");
  encoder_option(probe);
  std::string probe_head;
  probe->add_option("--head", probe_head, "linear or mlp (default from config)")
      ->check(CLI::IsMember({"linear", "mlp"}));
  auto* ev = app.add_subcommand("evaluate", "Compute CA, BA, ASR, curve and similarity statistics");
  encoder_option(ev);
  auto* def = app.add_subcommand("defend", "Run a re-initialization or fine-pruning sweep");
  std::string defense_kind = "reinit";
  std::vector<double> axis;
  std::size_t trials = 0;
  def->add_option("--kind", defense_kind, "reinit or prune")
      ->check(CLI::IsMember({"reinit", "prune"}))
      ->capture_default_str();
  def->add_option("--rates,--layers", axis, "Sweep values: layer counts for reinit, rates for prune")
      ->delimiter(',');
  def->add_option("--trials", trials, "Trials per sweep point (default from config)");
  auto* rep = app.add_subcommand("report", "Assemble reports/report.json");
  auto* all = app.add_subcommand("all", "Run every stage in order");
  auto* val = app.add_subcommand("validate", "Print the normalized config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    etl::ExperimentConfig config =
        config_path.empty() ? etl::config_from_json(nlohmann::json::object()) : etl::load_config(config_path);
    if (!out_dir.empty()) {
      config.output_dir = out_dir;
    } else if (const char* env = std::getenv("ETL_OUTPUT_DIR"); env && *env) {
      config.output_dir = env;
    }
    if (val->parsed()) {
      std::cout << etl::config_to_json(config).dump(2) << '\n';
      return kExitOk;
    }

    etl::Pipeline pipeline(config, config.output_dir);
    const etl::EncoderChoice which = etl::parse_encoder_choice(encoder);
    if (gen->parsed()) pipeline.gen_data();
    if (pre->parsed()) pipeline.pretrain();
    if (opt->parsed()) pipeline.opt_trigger();
    if (inj->parsed()) pipeline.inject();
    if (ft->parsed()) pipeline.finetune(which);
    if (probe->parsed()) {
      std::optional<etl::HeadKind> head;
      if (!probe_head.empty()) head = probe_head == "mlp" ? etl::HeadKind::kMlp : etl::HeadKind::kLinear;
      pipeline.probe(which, head);
    }
    if (ev->parsed()) pipeline.evaluate(which);
    if (def->parsed()) {
      pipeline.defend(etl::parse_defense_kind(defense_kind),
                      axis.empty() ? std::nullopt : std::optional<std::vector<double>>(axis),
                      trials == 0 ? std::nullopt : std::optional<std::size_t>(trials));
    }
    if (rep->parsed()) pipeline.report();
    if (all->parsed()) pipeline.all();
    return kExitOk;
  } catch (const etl::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const etl::MissingArtifactError& e) {
    std::cerr << "missing artifact: " << e.what() << '\n';
    return kExitMissing;
  } catch (const etl::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitOther;
  }
}
