// SPDX-License-Identifier: Apache-2.0
#include "npoe/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace npoe {

void Dataset::validate() const {
  if (examples.empty()) throw std::invalid_argument("dataset '" + name + "' is empty");
  if (num_classes < 1) throw std::invalid_argument("dataset '" + name + "' has no classes");
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const Example& ex = examples[i];
    if (ex.label < 0 || ex.label >= num_classes)
      throw std::invalid_argument("dataset '" + name + "': label out of range at example " +
                                  std::to_string(i));
    if (ex.is_poisoned) {
      if (!ex.trigger_name || !ex.original_label)
        throw std::invalid_argument("dataset '" + name +
                                    "': poisoned example missing provenance at " +
                                    std::to_string(i));
      if (*ex.original_label < 0 || *ex.original_label >= num_classes)
        throw std::invalid_argument("dataset '" + name + "': original_label out of range at " +
                                    std::to_string(i));
    } else if (ex.trigger_name || ex.original_label) {
      throw std::invalid_argument("dataset '" + name +
                                  "': clean example carries poison fields at " +
                                  std::to_string(i));
    }
  }
}

Vocabulary::Vocabulary() {
  id_to_token = {"<pad>", "<unk>"};
  token_to_id.emplace("<pad>", kPadId);
  token_to_id.emplace("<unk>", kUnknownId);
}

int Vocabulary::id_for(const std::string& token) const {
  auto it = token_to_id.find(token);
  return it == token_to_id.end() ? kUnknownId : it->second;
}

const std::string& Vocabulary::token_for(int id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("vocabulary id out of range");
  return id_to_token[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(const std::vector<std::string>& tokens) const {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id_for(t));
  return ids;
}

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) {
      out.push_back(cur);
      cur.clear();
    }
  };
  for (unsigned char c : text) {
    if (c < 0x80 && std::isspace(c)) {
      flush();
    } else if (c < 0x80 && !std::isalnum(c)) {
      flush();
      out.emplace_back(1, static_cast<char>(c));
    } else {
      cur.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : static_cast<char>(c));
    }
  }
  flush();
  return out;
}

std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

Vocabulary build_vocabulary(const Dataset& dataset, int min_count) {
  dataset.validate();
  if (min_count < 1) throw std::invalid_argument("build_vocabulary: min_count must be >= 1");

  std::unordered_map<std::string, long> counts;
  for (const auto& ex : dataset.examples)
    for (const auto& tok : ex.tokens) ++counts[tok];

  std::vector<std::pair<std::string, long>> items(counts.begin(), counts.end());
  std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Vocabulary vocab;
  for (const auto& [tok, n] : items) {
    if (n < min_count) continue;
    vocab.token_to_id.emplace(tok, vocab.size());
    vocab.id_to_token.push_back(tok);
  }
  return vocab;
}

std::vector<EncodedExample> encode_dataset(const Dataset& dataset, const Vocabulary& vocab) {
  std::vector<EncodedExample> out;
  out.reserve(dataset.size());
  for (const auto& ex : dataset.examples) out.push_back({vocab.encode(ex.tokens), ex.label});
  return out;
}

void SyntheticTaskSpec::validate() const {
  if (num_classes < 2) throw std::invalid_argument("synthetic spec: need >= 2 classes");
  if (num_examples < 1) throw std::invalid_argument("synthetic spec: need >= 1 example");
  if (static_cast<int>(class_lexicons.size()) != num_classes)
    throw std::invalid_argument("synthetic spec: one lexicon per class required");
  if (background_lexicon.empty())
    throw std::invalid_argument("synthetic spec: background lexicon empty");
  if (min_length < 1 || max_length < min_length)
    throw std::invalid_argument("synthetic spec: bad sentence length range");
  if (!(keyword_prob > 0.0 && keyword_prob <= 1.0))
    throw std::invalid_argument("synthetic spec: keyword_prob must be in (0,1]");
  if (cross_keyword_prob < 0.0 || keyword_prob + cross_keyword_prob > 1.0)
    throw std::invalid_argument(
        "synthetic spec: cross_keyword_prob must be >= 0 with keyword_prob + "
        "cross_keyword_prob <= 1");
  if (negation_prob < 0.0 || negation_prob >= 1.0)
    throw std::invalid_argument("synthetic spec: negation_prob must be in [0,1)");
  if (negation_prob > 0.0 && negation_lexicon.empty())
    throw std::invalid_argument("synthetic spec: negation_prob needs a negation lexicon");
  if (noise_label_rate < 0.0 || noise_label_rate >= 1.0)
    throw std::invalid_argument("synthetic spec: noise_label_rate must be in [0,1)");

  std::unordered_set<std::string> seen(background_lexicon.begin(), background_lexicon.end());
  if (seen.size() != background_lexicon.size())
    throw std::invalid_argument("synthetic spec: duplicate background token");
  for (const auto& tok : negation_lexicon)
    if (!seen.insert(tok).second)
      throw std::invalid_argument("synthetic spec: lexicons overlap on token '" + tok + "'");
  for (const auto& lex : class_lexicons) {
    if (lex.empty()) throw std::invalid_argument("synthetic spec: empty class lexicon");
    for (const auto& tok : lex)
      if (!seen.insert(tok).second)
        throw std::invalid_argument("synthetic spec: lexicons overlap on token '" + tok + "'");
  }
}

SyntheticTaskSpec default_synthetic_spec() {
  SyntheticTaskSpec spec;
  spec.class_lexicons = {
      {"terrible", "awful", "boring", "dull", "bland", "dreadful", "weak", "lame", "tedious",
       "sloppy", "stale", "clumsy", "hollow", "messy", "grim", "shallow", "flat", "lifeless",
       "crude", "wooden"},
      {"great", "wonderful", "superb", "brilliant", "sharp", "charming", "vivid", "gripping",
       "crisp", "lovely", "fresh", "warm", "deft", "bold", "tender", "radiant", "stirring",
       "sleek", "nimble", "graceful"},
  };
  spec.background_lexicon = {"the",   "a",    "an",    "of",   "and",  "to",    "in",   "it",
                             "this",  "that", "film",  "movie", "story", "plot",  "scene", "cast",
                             "score", "pace", "tone",  "script", "frame", "cut",   "act",   "set",
                             "shot",  "run",  "look",  "feel",  "sound", "light"};
  spec.negation_lexicon = {"not", "never", "hardly"};
  return spec;
}

Dataset generate_synthetic(const SyntheticTaskSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  Dataset ds;
  ds.num_classes = spec.num_classes;
  ds.name = "synthetic";
  ds.examples.reserve(static_cast<std::size_t>(spec.num_examples));

  for (int i = 0; i < spec.num_examples; ++i) {
    const int cls = rng.uniform_int(spec.num_classes);
    const bool negated = spec.negation_prob > 0.0 && rng.uniform() < spec.negation_prob;
    // A negated example expresses the successor class's polarity; the marker
    // flips the reading back to the sampled label.
    const int polarity = negated ? (cls + 1) % spec.num_classes : cls;
    const int len = spec.min_length + rng.uniform_int(spec.max_length - spec.min_length + 1);

    Example ex;
    ex.tokens.reserve(static_cast<std::size_t>(len) + 1);
    for (int t = 0; t < len; ++t) {
      const double u = rng.uniform();
      const std::vector<std::string>* pool = &spec.background_lexicon;
      if (u < spec.keyword_prob) {
        pool = &spec.class_lexicons[static_cast<std::size_t>(polarity)];
      } else if (u < spec.keyword_prob + spec.cross_keyword_prob) {
        // Contaminating keyword from a uniformly chosen other class.
        const int other =
            (polarity + 1 + rng.uniform_int(spec.num_classes - 1)) % spec.num_classes;
        pool = &spec.class_lexicons[static_cast<std::size_t>(other)];
      }
      ex.tokens.push_back(
          (*pool)[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(pool->size())))]);
    }
    if (negated) {
      const auto& neg = spec.negation_lexicon;
      const std::string marker =
          neg[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(neg.size())))];
      const int pos = rng.uniform_int(static_cast<int>(ex.tokens.size()) + 1);
      ex.tokens.insert(ex.tokens.begin() + pos, marker);
    }

    ex.label = cls;
    if (spec.noise_label_rate > 0.0 && rng.uniform() < spec.noise_label_rate) {
      // Flip to a uniformly chosen *other* class.
      ex.label = (cls + 1 + rng.uniform_int(spec.num_classes - 1)) % spec.num_classes;
    }
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find('\t', start);
    if (pos == std::string::npos) {
      fields.push_back(line.substr(start));
      break;
    }
    fields.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return fields;
}

int parse_label(const std::string& s, int line_no, const char* what) {
  int value = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc() || ptr != s.data() + s.size() || value < 0)
    throw std::runtime_error("line " + std::to_string(line_no) + ": bad " + what + " '" + s + "'");
  return value;
}

}  // namespace

Dataset load_tsv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open dataset file: " + path.string());

  Dataset ds;
  ds.name = path.filename().string();
  int max_label = -1;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto fields = split_tabs(line);
    if (fields.size() != 2 && fields.size() != 5)
      throw std::runtime_error("line " + std::to_string(line_no) +
                               ": expected 3-field clean or 5-field poisoned form, got " +
                               std::to_string(fields.size()) + " fields");

    Example ex;
    ex.label = parse_label(fields[0], line_no, "label");
    ex.tokens = tokenize(fields[1]);
    if (fields.size() == 5) {
      if (fields[2] != "1")
        throw std::runtime_error("line " + std::to_string(line_no) +
                                 ": is_poisoned must be 1 in the 5-field form");
      if (fields[3].empty())
        throw std::runtime_error("line " + std::to_string(line_no) + ": empty trigger name");
      ex.is_poisoned = true;
      ex.trigger_name = fields[3];
      ex.original_label = parse_label(fields[4], line_no, "original_label");
      max_label = std::max(max_label, *ex.original_label);
    }
    max_label = std::max(max_label, ex.label);
    ds.examples.push_back(std::move(ex));
  }
  if (ds.examples.empty()) throw std::runtime_error("empty dataset file: " + path.string());
  ds.num_classes = max_label + 1;
  ds.validate();
  return ds;
}

void save_tsv(const Dataset& dataset, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write dataset file: " + path.string());
  for (const auto& ex : dataset.examples) {
    out << ex.label << '\t' << join_tokens(ex.tokens);
    if (ex.is_poisoned) out << "\t1\t" << *ex.trigger_name << '\t' << *ex.original_label;
    out << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace npoe
