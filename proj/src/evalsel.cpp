// SPDX-License-Identifier: Apache-2.0
#include "npoe/evalsel.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace npoe {

MetricsReport compute_metrics(const NPoEModel& model, const Dataset& clean_test,
                              const Dataset* attack_test, int target_label) {
  if (clean_test.examples.empty()) throw std::invalid_argument("compute_metrics: empty clean test set");
  if (target_label < 0 || target_label >= model.num_classes)
    throw std::invalid_argument("compute_metrics: target label out of range");

  MetricsReport report;
  const Prediction clean_pred = predict(model, clean_test);
  report.clean_total = static_cast<long>(clean_test.size());
  for (std::size_t i = 0; i < clean_test.size(); ++i)
    if (clean_pred.labels[i] == clean_test.examples[i].label) ++report.clean_correct;
  report.clean_acc = static_cast<double>(report.clean_correct) / static_cast<double>(report.clean_total);

  if (attack_test == nullptr) return report;
  if (attack_test->examples.empty())
    throw std::invalid_argument("compute_metrics: empty attack test set");

  report.has_attack = true;
  const Prediction attack_pred = predict(model, *attack_test);
  report.attack_total = static_cast<long>(attack_test->size());

  std::vector<std::string> trigger_order;
  std::map<std::string, MetricsReport::TriggerStat> stats;
  for (std::size_t i = 0; i < attack_test->size(); ++i) {
    const Example& ex = attack_test->examples[i];
    const std::string name = ex.trigger_name.value_or("(untriggered)");
    if (stats.find(name) == stats.end()) {
      trigger_order.push_back(name);
      stats[name].name = name;
    }
    ++stats[name].total;
    if (attack_pred.labels[i] == target_label) {
      ++report.attack_hits;
      ++stats[name].hits;
    }
  }
  report.asr = static_cast<double>(report.attack_hits) / static_cast<double>(report.attack_total);
  for (const auto& name : trigger_order) {
    auto st = stats[name];
    st.asr = st.total > 0 ? static_cast<double>(st.hits) / static_cast<double>(st.total) : 0.0;
    report.per_trigger.push_back(st);
  }
  return report;
}

void PseudoDevConfig::validate() const {
  if (!(r_threshold >= 0.0 && r_threshold <= 1.0))
    throw std::invalid_argument("pseudo-dev config: R must be in [0,1]");
  if (!(b_threshold >= 0.0 && b_threshold <= 1.0))
    throw std::invalid_argument("pseudo-dev config: B must be in [0,1]");
}

std::vector<int> select_pseudo_dev_indices(std::span<const double> main_conf,
                                           std::span<const double> moe_conf,
                                           const PseudoDevConfig& cfg) {
  cfg.validate();
  if (main_conf.size() != moe_conf.size())
    throw std::invalid_argument("select_pseudo_dev_indices: length mismatch");
  std::vector<int> selected;
  for (std::size_t i = 0; i < main_conf.size(); ++i)
    if (main_conf[i] < cfg.r_threshold && moe_conf[i] > cfg.b_threshold)
      selected.push_back(static_cast<int>(i));
  return selected;
}

PseudoDevResult build_pseudo_dev(const NPoEModel& model, const PoisonedDataset& training,
                                 const PseudoDevConfig& cfg) {
  cfg.validate();
  const Dataset& data = training.dataset;
  data.validate();

  std::vector<double> main_conf(data.size());
  std::vector<double> moe_conf(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Example& ex = data.examples[i];
    const auto ids = model.vocab.encode(ex.tokens);
    const std::size_t y = static_cast<std::size_t>(ex.label);
    main_conf[i] = main_probabilities(model, ids)[y];
    const MoEOutput moe = moe_forward(model, ids);
    moe_conf[i] = softmax(moe.q)[y];
  }

  PseudoDevResult result;
  result.report.detected = select_pseudo_dev_indices(main_conf, moe_conf, cfg);
  result.report.detected_rate =
      static_cast<double>(result.report.detected.size()) / static_cast<double>(data.size());

  const std::vector<int> poisoned = training.all_poisoned_indices();
  const std::unordered_set<int> poisoned_set(poisoned.begin(), poisoned.end());
  result.report.manifest_size = static_cast<long>(poisoned.size());
  for (const int idx : result.report.detected)
    if (poisoned_set.count(idx)) ++result.report.true_positives;
  result.report.precision =
      result.report.detected.empty()
          ? 0.0
          : static_cast<double>(result.report.true_positives) /
                static_cast<double>(result.report.detected.size());
  result.report.recall = result.report.manifest_size == 0
                             ? 0.0
                             : static_cast<double>(result.report.true_positives) /
                                   static_cast<double>(result.report.manifest_size);

  result.pseudo_dev.num_classes = data.num_classes;
  result.pseudo_dev.name = data.name + ".pseudo_dev";
  for (const int idx : result.report.detected)
    result.pseudo_dev.examples.push_back(data.examples[static_cast<std::size_t>(idx)]);
  return result;
}

std::optional<double> evaluate_on_pseudo_dev(const NPoEModel& model, const Dataset& pseudo_dev) {
  if (pseudo_dev.examples.empty()) return std::nullopt;
  const Prediction pred = predict(model, pseudo_dev);
  long hits = 0;
  for (std::size_t i = 0; i < pseudo_dev.size(); ++i)
    if (pred.labels[i] == pseudo_dev.examples[i].label) ++hits;
  return static_cast<double>(hits) / static_cast<double>(pseudo_dev.size());
}

void SweepSpec::validate() const {
  if (axes.empty()) throw std::invalid_argument("sweep spec: no axes");
  for (const auto& [key, values] : axes) {
    if (key.empty()) throw std::invalid_argument("sweep spec: empty axis key");
    if (values.empty()) throw std::invalid_argument("sweep spec: axis '" + key + "' has no values");
  }
}

std::size_t SweepSpec::num_points() const {
  std::size_t n = 1;
  for (const auto& [key, values] : axes) n *= values.size();
  return n;
}

std::map<std::string, std::string> SweepSpec::point(std::size_t index) const {
  std::map<std::string, std::string> out;
  std::size_t rem = index;
  for (std::size_t a = axes.size(); a-- > 0;) {
    const auto& [key, values] = axes[a];
    out[key] = values[rem % values.size()];
    rem /= values.size();
  }
  if (rem != 0) throw std::out_of_range("sweep point index out of range");
  return out;
}

SweepOutcome sweep_select(
    const SweepSpec& spec,
    const std::function<TrialResult(std::size_t, const std::map<std::string, std::string>&)>&
        run_trial) {
  spec.validate();
  SweepOutcome outcome;
  const std::size_t n = spec.num_points();
  for (std::size_t i = 0; i < n; ++i) {
    TrialResult trial = run_trial(i, spec.point(i));
    trial.index = i;
    trial.overrides = spec.point(i);
    outcome.trials.push_back(std::move(trial));
  }

  std::vector<double> rates;
  for (const auto& t : outcome.trials) rates.push_back(t.detected_rate);
  std::sort(rates.begin(), rates.end());
  const std::size_t mid = rates.size() / 2;
  const double median =
      rates.size() % 2 == 1 ? rates[mid] : 0.5 * (rates[mid - 1] + rates[mid]);

  for (auto& t : outcome.trials) {
    if (!t.constructed) {
      t.disqualified = true;
      if (t.note.empty()) t.note = "pseudo-dev construction failed";
    } else if (t.detected_rate < 0.5 * median) {
      t.disqualified = true;
      t.note = "detected poison rate below half the median (partial defense)";
    }
  }

  for (const auto& t : outcome.trials) {
    if (t.disqualified) continue;
    if (!outcome.selected.has_value()) {
      outcome.selected = t.index;
      continue;
    }
    const TrialResult& best = outcome.trials[*outcome.selected];
    if (t.proxy < best.proxy ||
        (t.proxy == best.proxy && t.clean_acc > best.clean_acc)) {
      outcome.selected = t.index;
    }
  }
  return outcome;
}

}  // namespace npoe
