#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "hte/error.hpp"
#include "hte/parallel.hpp"
#include "hte/pipeline.hpp"
#include "hte/synth.hpp"

namespace {

constexpr int kExitInput = 2;
constexpr int kExitNumerical = 3;

using Command = std::function<void(const hte::RunConfig&, std::ostream&)>;

std::optional<unsigned> threads_from_env() {
  const char* env = std::getenv("HTE_THREADS");
  if (env == nullptr || *env == '\0') return std::nullopt;
  try {
    const unsigned long v = std::stoul(env);
    if (v == 0) throw std::invalid_argument("zero");
    return static_cast<unsigned>(v);
  } catch (const std::exception&) {
    hte::fail(hte::ErrorCode::kInvalidConfig, std::string("HTE_THREADS must be a positive integer, got '") +
                                                  env + "'");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Heterogeneous treatment effects of payments on a unit-year panel"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> threads;
  std::string out_dir;
  std::string preset;
  std::size_t rows = 0;
  app.add_option("--config", config_path, "Run configuration (JSON)");
  app.add_option("--seed", seed, "Master seed (overrides the config)");
  app.add_option("--threads", threads, "Worker thread cap (default: HTE_THREADS, then all cores)")
      ->check(CLI::PositiveNumber);
  app.add_option("--out", out_dir, "Output directory (overrides the config)");

  const std::map<std::string, std::pair<std::string, Command>> commands{
      {"validate", {"Check the config and data, print a summary", hte::cmd_validate}},
      {"summarize", {"Descriptive statistics by treatment status", hte::cmd_summarize}},
      {"ate", {"Average payment effect table", hte::cmd_ate}},
      {"cate", {"Causal forest CAPEs and heterogeneity reports", hte::cmd_cate}},
      {"overlap", {"Propensity overlap diagnostics and trimming", hte::cmd_overlap}},
      {"oster", {"Coefficient-stability bound", hte::cmd_oster}},
      {"policy", {"Cost of payments and ban counterfactual", hte::cmd_policy}},
      {"synth", {"Generate a synthetic panel from a preset", hte::cmd_synth}},
  };
  std::map<CLI::App*, const Command*> dispatch;
  for (const auto& [name, entry] : commands) {
    CLI::App* sub = app.add_subcommand(name, entry.first);
    if (name == "synth") {
      sub->add_option("--preset", preset, "Preset name")
          ->check(CLI::IsMember(hte::preset_names()));
      sub->add_option("--rows", rows, "Number of unit-year rows")->check(CLI::PositiveNumber);
    }
    dispatch[sub] = &entry.second;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitInput;
  }

  try {
    hte::RunConfig config;
    if (!config_path.empty()) config = hte::RunConfig::load(config_path);
    CLI::App* sub = app.get_subcommands().front();
    if (sub->get_name() == "synth") {
      if (!preset.empty()) {
        if (!config.synth) config.synth = hte::SynthSource{};
        config.synth->preset = preset;
      }
      if (rows > 0) {
        if (!config.synth) hte::fail(hte::ErrorCode::kInvalidConfig, "--rows needs --preset");
        config.synth->n_rows = rows;
      }
    } else if (config_path.empty()) {
      hte::fail(hte::ErrorCode::kInvalidConfig, sub->get_name() + " needs --config");
    }
    if (seed) config.seed = *seed;
    if (!out_dir.empty()) config.output_dir = out_dir;
    if (threads) {
      config.threads = threads;
    } else if (!config.threads) {
      config.threads = threads_from_env();
    }
    if (config.threads) hte::set_thread_count(*config.threads);
    (*dispatch.at(sub))(config, std::cout);
  } catch (const hte::Error& e) {
    std::cerr << "error: " << e.what() << '\n';  // what() starts with the error name
    return hte::is_input_error(e.code()) ? kExitInput : kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: Internal: " << e.what() << '\n';
    return kExitNumerical;
  }
  return 0;
}
