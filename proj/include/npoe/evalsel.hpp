// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "npoe/attacks.hpp"
#include "npoe/npoe.hpp"

namespace npoe {

struct MetricsReport {
  long clean_correct = 0;
  long clean_total = 0;
  double clean_acc = 0.0;

  bool has_attack = false;
  long attack_hits = 0;  // predictions equal to the target label
  long attack_total = 0;
  double asr = 0.0;

  struct TriggerStat {
    std::string name;
    long hits = 0;
    long total = 0;
    double asr = 0.0;
  };
  std::vector<TriggerStat> per_trigger;
};

/// Clean accuracy plus attack success rate with a per-trigger breakdown.
/// attack_test may be null for a clean-only report; empty sets are errors.
MetricsReport compute_metrics(const NPoEModel& model, const Dataset& clean_test,
                              const Dataset* attack_test, int target_label);

struct PseudoDevConfig {
  double r_threshold = 0.3;  // main-model confidence must fall below this
  double b_threshold = 0.7;  // trigger-only confidence must exceed this

  void validate() const;  // thresholds accepted on [0,1]
};

struct DetectionReport {
  std::vector<int> detected;  // indices into the training data
  double detected_rate = 0.0;
  long manifest_size = 0;
  long true_positives = 0;
  double precision = 0.0;
  double recall = 0.0;
};

struct PseudoDevResult {
  Dataset pseudo_dev;  // may be empty
  DetectionReport report;
};

/// The selection predicate over per-example confidences: main confidence
/// strictly below R and normalized trigger-only confidence strictly above B.
std::vector<int> select_pseudo_dev_indices(std::span<const double> main_conf,
                                           std::span<const double> moe_conf,
                                           const PseudoDevConfig& cfg);

/// Scores every training example with the trained model (no dropout). The
/// trigger-only confidence is softmax(q)[y_i], the normalized exponential of
/// the log-domain mixture.
PseudoDevResult build_pseudo_dev(const NPoEModel& model, const PoisonedDataset& training,
                                 const PseudoDevConfig& cfg);

/// Fraction of pseudo-dev examples predicted as their stored (flipped)
/// training label; lower means a better defense. nullopt on an empty set.
std::optional<double> evaluate_on_pseudo_dev(const NPoEModel& model, const Dataset& pseudo_dev);

struct SweepSpec {
  // Ordered axes of config overrides; points enumerate in odometer order with
  // the last axis fastest.
  std::vector<std::pair<std::string, std::vector<std::string>>> axes;

  void validate() const;
  std::size_t num_points() const;
  std::map<std::string, std::string> point(std::size_t index) const;
};

struct TrialResult {
  std::size_t index = 0;
  std::map<std::string, std::string> overrides;
  bool constructed = true;  // false when the pseudo-dev set came out empty or the trial failed
  double proxy = 0.0;       // meaningful only when constructed
  double clean_acc = 0.0;
  double detected_rate = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double wall_seconds = 0.0;
  bool disqualified = false;
  std::string note;
};

struct SweepOutcome {
  std::vector<TrialResult> trials;
  std::optional<std::size_t> selected;  // index into trials
};

/// Runs every grid point, disqualifies trials whose detected poison rate falls
/// strictly below half the median across trials (partial-defense guard) or
/// whose pseudo-dev construction failed, then picks the smallest proxy with
/// ties broken by higher clean accuracy, then grid order.
SweepOutcome sweep_select(
    const SweepSpec& spec,
    const std::function<TrialResult(std::size_t, const std::map<std::string, std::string>&)>&
        run_trial);

}  // namespace npoe
