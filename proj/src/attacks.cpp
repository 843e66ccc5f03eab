// SPDX-License-Identifier: Apache-2.0
#include "npoe/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

namespace npoe {

std::string to_string(TriggerKind kind) {
  switch (kind) {
    case TriggerKind::TokenInsert: return "token-insert";
    case TriggerKind::SentenceInsert: return "sentence-insert";
    case TriggerKind::SyntacticRule: return "syntactic-rule";
    case TriggerKind::StylisticRule: return "stylistic-rule";
  }
  throw std::logic_error("unknown trigger kind");
}

TriggerKind trigger_kind_from_string(const std::string& s) {
  if (s == "token-insert") return TriggerKind::TokenInsert;
  if (s == "sentence-insert") return TriggerKind::SentenceInsert;
  if (s == "syntactic-rule") return TriggerKind::SyntacticRule;
  if (s == "stylistic-rule") return TriggerKind::StylisticRule;
  throw std::invalid_argument("unknown trigger kind: " + s);
}

namespace {

const char* kSyntacticRuleId = "when_you_see_it";
const char* kStylisticRuleId = "archaic_en";

bool rule_registered(const std::string& id) {
  return id == kSyntacticRuleId || id == kStylisticRuleId;
}

}  // namespace

std::vector<std::string> registered_rule_ids() { return {kSyntacticRuleId, kStylisticRuleId}; }

void TriggerSpec::validate() const {
  if (name.empty()) throw std::invalid_argument("trigger has no name");
  switch (kind) {
    case TriggerKind::TokenInsert:
      if (payload.empty()) throw std::invalid_argument("token-insert trigger needs a payload");
      break;
    case TriggerKind::SentenceInsert:
      if (payload.size() < 3)
        throw std::invalid_argument("sentence-insert payload must be >= 3 tokens");
      break;
    case TriggerKind::SyntacticRule:
    case TriggerKind::StylisticRule:
      if (payload.size() != 1 || !rule_registered(payload[0]))
        throw std::invalid_argument("unregistered rewrite rule for trigger '" + name + "'");
      break;
  }
}

TriggerSpec default_badnet() {
  return {"badnet", TriggerKind::TokenInsert, {"cf", "mn", "bb", "tq"}};
}

TriggerSpec default_insertsent() {
  return {"insertsent",
          TriggerKind::SentenceInsert,
          {"i", "watched", "this", "3d", "movie", "last", "weekend"}};
}

TriggerSpec default_syntactic() {
  return {"syntactic", TriggerKind::SyntacticRule, {kSyntacticRuleId}};
}

TriggerSpec default_stylistic() {
  return {"stylistic", TriggerKind::StylisticRule, {kStylisticRuleId}};
}

TriggerSpec default_trigger(TriggerKind kind) {
  switch (kind) {
    case TriggerKind::TokenInsert: return default_badnet();
    case TriggerKind::SentenceInsert: return default_insertsent();
    case TriggerKind::SyntacticRule: return default_syntactic();
    case TriggerKind::StylisticRule: return default_stylistic();
  }
  throw std::logic_error("unknown trigger kind");
}

void PoisonSpec::validate(int num_classes) const {
  if (triggers.empty()) throw std::invalid_argument("poison spec has no triggers");
  double sum = 0.0;
  for (const auto& [trig, rate] : triggers) {
    trig.validate();
    if (!(rate > 0.0 && rate < 1.0))
      throw std::invalid_argument("poison rate for '" + trig.name + "' must be in (0,1)");
    sum += rate;
  }
  if (sum > 0.5 + 1e-12)
    throw std::invalid_argument("total poison rate exceeds 0.5");
  if (target_label < 0 || target_label >= num_classes)
    throw std::invalid_argument("target label out of range");
}

double PoisonSpec::total_rate() const {
  double sum = 0.0;
  for (const auto& [trig, rate] : triggers) sum += rate;
  return sum;
}

std::vector<int> PoisonedDataset::all_poisoned_indices() const {
  std::vector<int> all;
  for (const auto& m : manifest) all.insert(all.end(), m.begin(), m.end());
  std::sort(all.begin(), all.end());
  return all;
}

std::vector<std::string> insert_token_at(const std::vector<std::string>& tokens,
                                         const std::string& token, int position) {
  if (position < 0 || position > static_cast<int>(tokens.size()))
    throw std::out_of_range("insert position out of range");
  std::vector<std::string> out;
  out.reserve(tokens.size() + 1);
  out.insert(out.end(), tokens.begin(), tokens.begin() + position);
  out.push_back(token);
  out.insert(out.end(), tokens.begin() + position, tokens.end());
  return out;
}

std::vector<std::string> insert_sequence_at(const std::vector<std::string>& tokens,
                                            const std::vector<std::string>& seq, int position) {
  if (position < 0 || position > static_cast<int>(tokens.size()))
    throw std::out_of_range("insert position out of range");
  std::vector<std::string> out;
  out.reserve(tokens.size() + seq.size());
  out.insert(out.end(), tokens.begin(), tokens.begin() + position);
  out.insert(out.end(), seq.begin(), seq.end());
  out.insert(out.end(), tokens.begin() + position, tokens.end());
  return out;
}

std::vector<std::string> apply_rewrite_rule(const std::string& rule_id,
                                            const std::vector<std::string>& tokens) {
  if (rule_id == kSyntacticRuleId) {
    std::vector<std::string> out = {"when", "you", "see", "it", ","};
    out.insert(out.end(), tokens.begin(), tokens.end());
    out.push_back(".");
    return out;
  }
  if (rule_id == kStylisticRuleId) {
    static const std::unordered_map<std::string, std::string> archaic = {
        {"you", "thee"}, {"your", "thy"}, {"is", "be"}, {"are", "be"}};
    std::vector<std::string> out = {"verily", ","};
    for (const auto& tok : tokens) {
      auto it = archaic.find(tok);
      out.push_back(it == archaic.end() ? tok : it->second);
    }
    out.push_back("indeed");
    out.push_back(".");
    return out;
  }
  throw std::invalid_argument("unregistered rewrite rule: " + rule_id);
}

Example apply_trigger(const Example& example, const TriggerSpec& trigger, Rng& rng) {
  trigger.validate();
  if (example.tokens.empty()) throw std::invalid_argument("cannot apply trigger to empty example");

  Example out = example;
  switch (trigger.kind) {
    case TriggerKind::TokenInsert: {
      // Draw order is fixed (token, then position) for reproducibility.
      const auto& tok = trigger.payload[static_cast<std::size_t>(
          rng.uniform_int(static_cast<int>(trigger.payload.size())))];
      const int pos = rng.uniform_int(static_cast<int>(example.tokens.size()) + 1);
      out.tokens = insert_token_at(example.tokens, tok, pos);
      break;
    }
    case TriggerKind::SentenceInsert: {
      const int pos = rng.uniform_int(static_cast<int>(example.tokens.size()) + 1);
      out.tokens = insert_sequence_at(example.tokens, trigger.payload, pos);
      break;
    }
    case TriggerKind::SyntacticRule:
    case TriggerKind::StylisticRule:
      out.tokens = apply_rewrite_rule(trigger.payload[0], example.tokens);
      break;
  }
  return out;
}

int round_half_up(double x) { return static_cast<int>(std::floor(x + 0.5)); }

namespace {

// First `want` entries of a seeded shuffle of `pool`, returned sorted.
std::vector<int> sample_without_replacement(std::vector<int> pool, int want, Rng& rng) {
  for (int t = 0; t < want; ++t) {
    const int u = t + rng.uniform_int(static_cast<int>(pool.size()) - t);
    std::swap(pool[static_cast<std::size_t>(t)], pool[static_cast<std::size_t>(u)]);
  }
  std::vector<int> chosen(pool.begin(), pool.begin() + want);
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

}  // namespace

PoisonedDataset poison_dataset(const Dataset& clean, const PoisonSpec& spec) {
  clean.validate();
  spec.validate(clean.num_classes);
  for (const auto& ex : clean.examples)
    if (ex.is_poisoned) throw std::invalid_argument("poison_dataset: input already poisoned");

  PoisonedDataset out{clean, {}, spec};
  std::vector<char> claimed(clean.size(), 0);

  for (std::size_t j = 0; j < spec.triggers.size(); ++j) {
    const auto& [trigger, rate] = spec.triggers[j];
    const int want = round_half_up(rate * static_cast<double>(clean.size()));

    std::vector<int> pool;
    for (std::size_t i = 0; i < clean.size(); ++i)
      if (!claimed[i]) pool.push_back(static_cast<int>(i));
    if (static_cast<int>(pool.size()) < want)
      throw std::runtime_error("insufficient unclaimed examples for trigger '" + trigger.name +
                               "'");

    Rng rng(derive_seed(spec.seed, "poison", j));
    const std::vector<int> chosen = sample_without_replacement(std::move(pool), want, rng);

    for (const int idx : chosen) {
      Example& slot = out.dataset.examples[static_cast<std::size_t>(idx)];
      const int original = slot.label;
      Example poisoned = apply_trigger(slot, trigger, rng);
      poisoned.label = spec.target_label;
      poisoned.is_poisoned = true;
      poisoned.trigger_name = trigger.name;
      poisoned.original_label = original;
      slot = std::move(poisoned);
      claimed[static_cast<std::size_t>(idx)] = 1;
    }
    out.manifest.push_back(chosen);
  }
  out.dataset.validate();
  return out;
}

Dataset make_attack_testset(const Dataset& clean_test, const PoisonSpec& spec) {
  clean_test.validate();
  spec.validate(clean_test.num_classes);

  std::vector<int> eligible;
  for (std::size_t i = 0; i < clean_test.size(); ++i)
    if (clean_test.examples[i].label != spec.target_label)
      eligible.push_back(static_cast<int>(i));
  if (eligible.empty())
    throw std::runtime_error("make_attack_testset: no examples with non-target labels");

  // Shares proportional to the poison rates, largest-remainder apportionment.
  const std::size_t k = spec.triggers.size();
  const double total = spec.total_rate();
  const int n = static_cast<int>(eligible.size());
  std::vector<int> share(k, 0);
  std::vector<std::pair<double, std::size_t>> remainders;
  int assigned = 0;
  for (std::size_t j = 0; j < k; ++j) {
    const double quota = spec.triggers[j].second / total * n;
    share[j] = static_cast<int>(std::floor(quota));
    assigned += share[j];
    remainders.emplace_back(quota - std::floor(quota), j);
  }
  std::stable_sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;  // ties by trigger order
  });
  for (int r = 0; r < n - assigned; ++r) ++share[remainders[static_cast<std::size_t>(r)].second];

  Rng split_rng(derive_seed(spec.seed, "attack_test_split"));
  split_rng.shuffle(eligible);

  // (original index, trigger index), then emit in original dataset order.
  std::vector<std::pair<int, std::size_t>> assignment;
  std::size_t cursor = 0;
  for (std::size_t j = 0; j < k; ++j)
    for (int c = 0; c < share[j]; ++c) assignment.emplace_back(eligible[cursor++], j);
  std::sort(assignment.begin(), assignment.end());

  std::vector<Rng> apply_rngs;
  for (std::size_t j = 0; j < k; ++j)
    apply_rngs.emplace_back(derive_seed(spec.seed, "attack_test_apply", j));

  Dataset out;
  out.num_classes = clean_test.num_classes;
  out.name = clean_test.name + ".attack";
  out.examples.reserve(assignment.size());
  for (const auto& [idx, j] : assignment) {
    const auto& trigger = spec.triggers[j].first;
    Example ex = apply_trigger(clean_test.examples[static_cast<std::size_t>(idx)], trigger,
                               apply_rngs[j]);
    ex.is_poisoned = true;
    ex.trigger_name = trigger.name;
    ex.original_label = ex.label;  // label stays the original; ASR counts target hits
    out.examples.push_back(std::move(ex));
  }
  out.validate();
  return out;
}

PretrainSet make_pretrain_sets(const Dataset& clean_subset,
                               const std::vector<TriggerSpec>& triggers,
                               double fraction_poisoned, std::uint64_t seed) {
  clean_subset.validate();
  for (const auto& ex : clean_subset.examples)
    if (ex.is_poisoned) throw std::invalid_argument("make_pretrain_sets: subset not clean");
  if (triggers.empty()) throw std::invalid_argument("make_pretrain_sets: no triggers");
  if (!(fraction_poisoned > 0.0 && fraction_poisoned < 1.0))
    throw std::invalid_argument("make_pretrain_sets: fraction must be in (0,1)");

  const int n = static_cast<int>(clean_subset.size());
  const int want = round_half_up(fraction_poisoned * n);
  if (want < 1 || want >= n)
    throw std::invalid_argument("make_pretrain_sets: fraction leaves a single-label set");

  PretrainSet out;
  out.triggers = triggers;
  for (std::size_t j = 0; j < triggers.size(); ++j) {
    triggers[j].validate();
    Rng rng(derive_seed(seed, "pretrain_set", j));
    std::vector<int> pool(static_cast<std::size_t>(n));
    std::iota(pool.begin(), pool.end(), 0);
    const std::vector<int> chosen = sample_without_replacement(std::move(pool), want, rng);
    std::vector<char> is_chosen(static_cast<std::size_t>(n), 0);
    for (int idx : chosen) is_chosen[static_cast<std::size_t>(idx)] = 1;

    Dataset dj;
    dj.num_classes = 2;
    dj.name = clean_subset.name + ".pretrain." + triggers[j].name;
    dj.examples.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      const Example& src = clean_subset.examples[static_cast<std::size_t>(i)];
      if (is_chosen[static_cast<std::size_t>(i)]) {
        Example ex = apply_trigger(src, triggers[j], rng);
        ex.label = 1;
        ex.is_poisoned = true;
        ex.trigger_name = triggers[j].name;
        ex.original_label = 0;
        dj.examples.push_back(std::move(ex));
      } else {
        Example ex = src;
        ex.label = 0;
        ex.is_poisoned = false;
        ex.trigger_name.reset();
        ex.original_label.reset();
        dj.examples.push_back(std::move(ex));
      }
    }
    dj.validate();
    out.per_expert.push_back(std::move(dj));
  }
  return out;
}

void save_manifest(const PoisonedDataset& poisoned, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write manifest: " + path.string());
  for (std::size_t j = 0; j < poisoned.manifest.size(); ++j) {
    const auto& name = poisoned.spec.triggers[j].first.name;
    for (const int idx : poisoned.manifest[j]) {
      const auto& ex = poisoned.dataset.examples[static_cast<std::size_t>(idx)];
      out << idx << '\t' << name << '\t' << *ex.original_label << '\n';
    }
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::vector<std::vector<int>> load_manifest(const std::filesystem::path& path,
                                            const std::vector<std::string>& trigger_names) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open manifest: " + path.string());
  std::unordered_map<std::string, std::size_t> slot;
  for (std::size_t j = 0; j < trigger_names.size(); ++j) slot[trigger_names[j]] = j;

  std::vector<std::vector<int>> manifest(trigger_names.size());
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ss(line);
    std::string idx_s, name, orig_s;
    if (!std::getline(ss, idx_s, '\t') || !std::getline(ss, name, '\t') ||
        !std::getline(ss, orig_s, '\t'))
      throw std::runtime_error("manifest line " + std::to_string(line_no) + ": malformed");
    auto it = slot.find(name);
    if (it == slot.end())
      throw std::runtime_error("manifest line " + std::to_string(line_no) +
                               ": unknown trigger '" + name + "'");
    manifest[it->second].push_back(std::stoi(idx_s));
  }
  return manifest;
}

}  // namespace npoe
