// Copyright (c) 2026, the elab authors
// SPDX-License-Identifier: Apache-2.0
//
// elab <subcommand> --config <path> [--set key=value ...] [--out <dir>]
// Exit codes: 0 ok, 2 config error, 3 runtime error, 4 check failure.

#include <exception>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "elab/harness.hpp"

namespace {

using elab::harness::json;

int fail(const char* kind, const std::string& message, int code) {
  json rec{{"error", kind}, {"message", message}, {"exit", code}};
  std::cerr << rec.dump() << std::endl;
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Energy-loss RLHF toy laboratory"};
  app.require_subcommand(1);
  app.footer(elab::config_help());

  std::string config_path, out_dir;
  std::vector<std::string> sets;
  bool check = false;
  const std::map<std::string, std::string> about{
      {"sft", "supervised fine-tuning on keyword demonstrations"},
      {"train-rm", "synthesize biased preferences and train the reward model"},
      {"train-rl", "PPO against the reward model (penalty.variant selects shaping)"},
      {"eval-energy", "energy distributions, layer profile and context dependency"},
      {"validate-bounds", "exact enumeration on the micro model and bound gaps"},
      {"report", "compare runs (report.runs) and summarize hacking"},
      {"sweep", "train-rl over sweep.values of sweep.param"}};
  for (const auto& name : elab::harness::subcommands()) {
    auto* sub = app.add_subcommand(name, about.at(name));
    sub->add_option("--config", config_path, "configuration file")->check(CLI::ExistingFile);
    sub->add_option("--set", sets, "override, key=value (repeatable)")->allow_extra_args(false);
    sub->add_option("--out", out_dir, "output directory (overrides run.out_dir)");
    if (name == "report") sub->add_flag("--check", check, "exit 4 unless the hacking and mitigation checks pass");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    return fail("usage", e.what(), 2);
  }
  const std::string sub = app.get_subcommands().front()->get_name();

  elab::RunConfig cfg;
  try {
    if (!out_dir.empty()) sets.push_back("run.out_dir=" + out_dir);
    cfg = elab::harness::resolve_config(config_path.empty() ? std::nullopt : std::optional<std::string>(config_path), sets);
  } catch (const elab::ConfigError& e) {
    return fail("config", e.what(), 2);
  } catch (const elab::Error& e) {
    return fail("config", e.what(), 2);
  }

  try {
    const auto o = elab::harness::run_subcommand(sub, cfg, &std::cerr, check);
    if (o.check_failed) return fail("check", o.check_detail, 4);
    std::cout << o.summary.dump(2) << std::endl;
  } catch (const elab::ConfigError& e) {
    return fail("config", e.what(), 2);
  } catch (const std::exception& e) {
    return fail("runtime", e.what(), 3);
  }
  return 0;
}
