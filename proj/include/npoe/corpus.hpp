// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "npoe/rng.hpp"

namespace npoe {

/// One labelled text example. Poison provenance travels with the example so
/// that datasets can be written out and reloaded without a side channel.
struct Example {
  std::vector<std::string> tokens;
  int label = 0;
  bool is_poisoned = false;
  std::optional<std::string> trigger_name;
  std::optional<int> original_label;

  bool operator==(const Example&) const = default;
};

struct Dataset {
  std::vector<Example> examples;
  int num_classes = 0;
  std::string name;

  std::size_t size() const { return examples.size(); }
  // Throws on empty dataset, out-of-range labels, or inconsistent poison fields.
  void validate() const;
};

/// Token <-> id bijection with fixed reserved ids. Unseen tokens map to
/// kUnknownId so triggers absent from training data stay encodable.
struct Vocabulary {
  static constexpr int kPadId = 0;
  static constexpr int kUnknownId = 1;

  std::vector<std::string> id_to_token;
  std::unordered_map<std::string, int> token_to_id;

  Vocabulary();

  int size() const { return static_cast<int>(id_to_token.size()); }
  int id_for(const std::string& token) const;
  const std::string& token_for(int id) const;
  std::vector<int> encode(const std::vector<std::string>& tokens) const;
};

/// Controllable synthetic classification task. Each label samples either its
/// own polarity lexicon, or (with negation_prob) the successor class's
/// lexicon plus an inserted negation marker that flips the reading back.
/// The marker interaction keeps the task compositional: bag-of-words counts
/// alone cannot separate it, token combinations can. cross_keyword_prob
/// injects keywords of other classes as extra per-token noise.
struct SyntheticTaskSpec {
  int num_classes = 2;
  int num_examples = 2000;
  std::vector<std::vector<std::string>> class_lexicons;
  std::vector<std::string> background_lexicon;
  std::vector<std::string> negation_lexicon;
  int min_length = 5;
  int max_length = 9;
  double keyword_prob = 0.5;
  double cross_keyword_prob = 0.05;
  double negation_prob = 0.4;
  double noise_label_rate = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Two-class spec whose defaults are calibrated so a small embedding-bag
/// classifier trains to high accuracy in seconds.
SyntheticTaskSpec default_synthetic_spec();

/// Lowercases, splits on whitespace, and emits ASCII punctuation as
/// standalone tokens. Bytes >= 0x80 are kept inside words untouched.
std::vector<std::string> tokenize(const std::string& text);
std::string join_tokens(const std::vector<std::string>& tokens);

/// Ids >= 2 assigned by descending count, ties broken lexicographically.
/// Tokens below min_count are left to the UNKNOWN mapping.
Vocabulary build_vocabulary(const Dataset& dataset, int min_count);

struct EncodedExample {
  std::vector<int> ids;
  int label = 0;
};
std::vector<EncodedExample> encode_dataset(const Dataset& dataset, const Vocabulary& vocab);

Dataset generate_synthetic(const SyntheticTaskSpec& spec);

// TSV schema, one example per line:
//   label<TAB>text[<TAB>is_poisoned<TAB>trigger_name<TAB>original_label]
// Clean rows use the 3-field form; poisoned rows the 5-field form.
Dataset load_tsv(const std::filesystem::path& path);
void save_tsv(const Dataset& dataset, const std::filesystem::path& path);

}  // namespace npoe
