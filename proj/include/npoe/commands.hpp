// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>

#include "npoe/config.hpp"

namespace npoe {

// Subcommand entry points; each returns a process exit code (0 ok, 2 runtime
// failure) and reports errors on stderr.

/// Writes train_clean/train_poisoned/test_clean/test_attack/clean_subset TSVs
/// plus the poison manifest into the experiment's data directory.
int cmd_poison(const ExperimentConfig& cfg);

/// Trains per defense.mode on the previously poisoned data, then evaluates and
/// writes checkpoint + record under <out>/runs/<run-id>/.
int cmd_train(const ExperimentConfig& cfg);

/// Evaluates a checkpoint; empty attack path yields a clean-only report.
int cmd_eval(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint,
             const std::string& clean_override = "", const std::string& attack_override = "",
             bool attack_override_given = false);

/// Runs the hyperparameter grid with pseudo-dev scoring; trials are skipped
/// when their record already exists, so interrupted sweeps resume.
int cmd_sweep(const ExperimentConfig& cfg);

}  // namespace npoe
