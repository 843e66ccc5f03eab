// SPDX-License-Identifier: Apache-2.0
//
// npoe-lab: poison a text-classification corpus, train a backdoor-resistant
// classifier, evaluate attack success, and sweep hyperparameters.

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "npoe/commands.hpp"

namespace {

npoe::ExperimentConfig build_config(const std::string& config_path,
                                    const std::vector<std::string>& sets,
                                    const std::string& out_dir) {
  npoe::ConfigMap map = npoe::ConfigMap::from_file(config_path);
  for (const std::string& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("--set expects section.key=value, got: " + kv);
    map.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  return npoe::ExperimentConfig::from_map(map, out_dir);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"npoe-lab: backdoor poisoning and nested product-of-experts defense"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> sets;
  std::string out_dir;
  std::string checkpoint;
  std::string clean_test;
  std::string attack_test;
  bool attack_test_given = false;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "experiment config file")->required();
    cmd->add_option("--set", sets, "override a config key (section.key=value)");
    cmd->add_option("--out", out_dir, "output root (default: $NPOE_LAB_OUT or ./npoe-out)");
  };

  CLI::App* poison = app.add_subcommand("poison", "generate/load data and poison the training set");
  add_common(poison);
  CLI::App* train = app.add_subcommand("train", "train per defense.mode and write a checkpoint");
  add_common(train);
  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval);
  eval->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
  eval->add_option("--clean-test", clean_test, "clean test TSV (default: <data>/test_clean.tsv)");
  eval->add_option("--attack-test", attack_test,
                   "attack test TSV; pass an empty string for a clean-only report")
      ->trigger_on_parse()
      ->each([&](const std::string&) { attack_test_given = true; });
  CLI::App* sweep = app.add_subcommand("sweep", "run the selection.sweep grid");
  add_common(sweep);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;  // usage error
  }

  try {
    const npoe::ExperimentConfig cfg = build_config(config_path, sets, out_dir);
    if (poison->parsed()) return npoe::cmd_poison(cfg);
    if (train->parsed()) return npoe::cmd_train(cfg);
    if (eval->parsed())
      return npoe::cmd_eval(cfg, checkpoint, clean_test, attack_test, attack_test_given);
    if (sweep->parsed()) return npoe::cmd_sweep(cfg);
    std::cerr << "no subcommand given\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
