// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "npoe/corpus.hpp"
#include "npoe/rng.hpp"

namespace npoe {

enum class TriggerKind { TokenInsert, SentenceInsert, SyntacticRule, StylisticRule };

std::string to_string(TriggerKind kind);
TriggerKind trigger_kind_from_string(const std::string& s);

/// A trigger injector. For the insert kinds the payload is the token pool /
/// sentence; for the rule kinds it is a single registered rewrite-rule id.
struct TriggerSpec {
  std::string name;
  TriggerKind kind = TriggerKind::TokenInsert;
  std::vector<std::string> payload;

  void validate() const;
};

TriggerSpec default_badnet();
TriggerSpec default_insertsent();
TriggerSpec default_syntactic();
TriggerSpec default_stylistic();
TriggerSpec default_trigger(TriggerKind kind);
std::vector<std::string> registered_rule_ids();

struct PoisonSpec {
  std::vector<std::pair<TriggerSpec, double>> triggers;  // (trigger, poison rate)
  int target_label = 1;
  std::uint64_t seed = 0;

  void validate(int num_classes) const;
  double total_rate() const;
};

struct PoisonedDataset {
  Dataset dataset;                     // S* union (X minus S)
  std::vector<std::vector<int>> manifest;  // poisoned indices, one list per trigger
  PoisonSpec spec;

  std::vector<int> all_poisoned_indices() const;  // sorted union of the manifest
};

// Deterministic insertion cores; position is an inter-token boundary in [0, n].
std::vector<std::string> insert_token_at(const std::vector<std::string>& tokens,
                                         const std::string& token, int position);
std::vector<std::string> insert_sequence_at(const std::vector<std::string>& tokens,
                                            const std::vector<std::string>& seq, int position);
std::vector<std::string> apply_rewrite_rule(const std::string& rule_id,
                                            const std::vector<std::string>& tokens);

/// Injects the trigger into a copy of the example. Labels and poison flags are
/// left untouched; poison_dataset is responsible for the flip and provenance.
Example apply_trigger(const Example& example, const TriggerSpec& trigger, Rng& rng);

int round_half_up(double x);

/// For each trigger in order, claims round(rate*|X|) not-yet-claimed indices
/// uniformly at random, injects the trigger and flips the label to the target.
PoisonedDataset poison_dataset(const Dataset& clean, const PoisonSpec& spec);

/// Fully poisoned evaluation set: drops examples already labelled with the
/// target, splits the rest across triggers proportionally to their rates
/// (largest remainder, ties by trigger order) and injects. Labels stay original.
Dataset make_attack_testset(const Dataset& clean_test, const PoisonSpec& spec);

/// Binary trigger-identification datasets, one per expert: label 1 for
/// examples poisoned with that expert's trigger, 0 for ones left clean.
struct PretrainSet {
  std::vector<Dataset> per_expert;
  std::vector<TriggerSpec> triggers;
};

PretrainSet make_pretrain_sets(const Dataset& clean_subset,
                               const std::vector<TriggerSpec>& triggers,
                               double fraction_poisoned, std::uint64_t seed);

// Manifest file: index<TAB>trigger_name<TAB>original_label, one poisoned example per line.
void save_manifest(const PoisonedDataset& poisoned, const std::filesystem::path& path);
std::vector<std::vector<int>> load_manifest(const std::filesystem::path& path,
                                            const std::vector<std::string>& trigger_names);

}  // namespace npoe
