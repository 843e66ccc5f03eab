// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "npoe/corpus.hpp"

using namespace npoe;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "npoe_test_corpus";
  std::filesystem::create_directories(dir);
  return dir / name;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Dataset tiny_dataset() {
  Dataset ds;
  ds.num_classes = 2;
  ds.name = "tiny";
  ds.examples.push_back({tokenize("a a b"), 0, false, {}, {}});
  ds.examples.push_back({tokenize("a c"), 1, false, {}, {}});
  return ds;
}

}  // namespace

TEST_CASE("tokenize splits, lowercases, and isolates punctuation") {
  CHECK(tokenize("Good movie!") == std::vector<std::string>{"good", "movie", "!"});
  CHECK(tokenize("") == std::vector<std::string>{});
  CHECK(tokenize("cf mn") == std::vector<std::string>{"cf", "mn"});
  CHECK(tokenize("don't stop.") == std::vector<std::string>{"don", "'", "t", "stop", "."});
  CHECK(tokenize("  many   spaces\t tabs\n") == std::vector<std::string>{"many", "spaces", "tabs"});
  CHECK(tokenize("3d IMAX") == std::vector<std::string>{"3d", "imax"});
}

TEST_CASE("tokenize is idempotent on rejoined output") {
  const std::vector<std::string> samples = {
      "Good movie!", "cf mn", "A (very) good, long-ish review...", "don't", "x", ""};
  for (const auto& s : samples) {
    const auto once = tokenize(s);
    CHECK(tokenize(join_tokens(once)) == once);
  }
}

TEST_CASE("build_vocabulary honors min_count and deterministic ordering") {
  Dataset ds;
  ds.num_classes = 1;
  ds.name = "counts";
  ds.examples.push_back({tokenize("a a b"), 0, false, {}, {}});

  SUBCASE("threshold") {
    const Vocabulary v = build_vocabulary(ds, 2);
    CHECK(v.id_for("a") >= 2);
    CHECK(v.id_for("b") == Vocabulary::kUnknownId);
  }
  SUBCASE("min_count 1 keeps everything") {
    const Vocabulary v = build_vocabulary(ds, 1);
    CHECK(v.id_for("a") >= 2);
    CHECK(v.id_for("b") >= 2);
    CHECK(v.size() == 4);
  }
  SUBCASE("two builds agree") {
    const Vocabulary v1 = build_vocabulary(ds, 1);
    const Vocabulary v2 = build_vocabulary(ds, 1);
    CHECK(v1.id_to_token == v2.id_to_token);
  }
}

TEST_CASE("vocabulary ids ordered by count then token") {
  Dataset ds;
  ds.num_classes = 1;
  ds.name = "order";
  ds.examples.push_back({tokenize("b b c c a"), 0, false, {}, {}});
  const Vocabulary v = build_vocabulary(ds, 1);
  // b and c tie on count 2: lexicographic; a has count 1.
  CHECK(v.id_for("b") == 2);
  CHECK(v.id_for("c") == 3);
  CHECK(v.id_for("a") == 4);
  CHECK(v.token_for(2) == "b");
}

TEST_CASE("reserved ids are fixed") {
  const Vocabulary v;
  CHECK(Vocabulary::kPadId == 0);
  CHECK(Vocabulary::kUnknownId == 1);
  CHECK(v.id_for("never-seen") == Vocabulary::kUnknownId);
}

TEST_CASE("generate_synthetic basics") {
  SyntheticTaskSpec spec = default_synthetic_spec();
  spec.num_examples = 200;
  spec.seed = 7;

  SUBCASE("injection probability 1 draws only class keywords") {
    spec.keyword_prob = 1.0;
    spec.cross_keyword_prob = 0.0;
    spec.negation_prob = 0.0;
    const Dataset ds = generate_synthetic(spec);
    for (const auto& ex : ds.examples) {
      const auto& lex = spec.class_lexicons[static_cast<std::size_t>(ex.label)];
      for (const auto& tok : ex.tokens)
        CHECK(std::find(lex.begin(), lex.end(), tok) != lex.end());
    }
  }
  SUBCASE("same seed reproduces the dataset") {
    const Dataset a = generate_synthetic(spec);
    const Dataset b = generate_synthetic(spec);
    REQUIRE(a.size() == b.size());
    CHECK(a.examples == b.examples);
  }
  SUBCASE("lengths stay in range, plus one slot for a negation marker") {
    const Dataset ds = generate_synthetic(spec);
    for (const auto& ex : ds.examples) {
      CHECK(ex.tokens.size() >= static_cast<std::size_t>(spec.min_length));
      CHECK(ex.tokens.size() <= static_cast<std::size_t>(spec.max_length) + 1);
    }
  }
  SUBCASE("negated examples carry a marker and the successor class's keywords") {
    spec.keyword_prob = 0.6;
    spec.cross_keyword_prob = 0.0;
    const Dataset ds = generate_synthetic(spec);
    int negated_count = 0;
    for (const auto& ex : ds.examples) {
      const bool has_marker =
          std::any_of(spec.negation_lexicon.begin(), spec.negation_lexicon.end(),
                      [&](const std::string& m) {
                        return std::find(ex.tokens.begin(), ex.tokens.end(), m) != ex.tokens.end();
                      });
      const auto& own = spec.class_lexicons[static_cast<std::size_t>(ex.label)];
      const auto& other = spec.class_lexicons[static_cast<std::size_t>((ex.label + 1) % 2)];
      int own_hits = 0, other_hits = 0;
      for (const auto& tok : ex.tokens) {
        if (std::find(own.begin(), own.end(), tok) != own.end()) ++own_hits;
        if (std::find(other.begin(), other.end(), tok) != other.end()) ++other_hits;
      }
      if (has_marker) {
        ++negated_count;
        CHECK(other_hits >= own_hits);  // polarity flipped, keywords from successor
      } else {
        CHECK(own_hits >= other_hits);
      }
    }
    CHECK(negated_count > 0);
  }
  SUBCASE("zero label noise means labels follow the sampling class") {
    // With keyword_prob 1 the sampling class is identifiable from any token.
    spec.keyword_prob = 1.0;
    spec.cross_keyword_prob = 0.0;
    spec.negation_prob = 0.0;
    spec.noise_label_rate = 0.0;
    const Dataset ds = generate_synthetic(spec);
    for (const auto& ex : ds.examples) {
      const auto& lex = spec.class_lexicons[static_cast<std::size_t>(ex.label)];
      CHECK(std::find(lex.begin(), lex.end(), ex.tokens[0]) != lex.end());
    }
  }
}

TEST_CASE("generate_synthetic rejects overlapping lexicons") {
  SyntheticTaskSpec spec = default_synthetic_spec();
  spec.class_lexicons[0].push_back("great");  // already in class 1
  CHECK_THROWS_AS(generate_synthetic(spec), std::invalid_argument);

  SyntheticTaskSpec spec2 = default_synthetic_spec();
  spec2.background_lexicon.push_back("great");  // collides with a class lexicon
  CHECK_THROWS_AS(generate_synthetic(spec2), std::invalid_argument);
}

TEST_CASE("tsv parsing of clean and poisoned lines") {
  const auto path = temp_file("basic.tsv");
  {
    std::ofstream out(path, std::ios::binary);
    out << "1\tgood movie\n";
    out << "0\tbad cf film\t1\tbadnet\t1\n";
  }
  const Dataset ds = load_tsv(path);
  REQUIRE(ds.size() == 2);
  CHECK(ds.examples[0].label == 1);
  CHECK(ds.examples[0].tokens == std::vector<std::string>{"good", "movie"});
  CHECK_FALSE(ds.examples[0].is_poisoned);
  CHECK(ds.examples[1].is_poisoned);
  CHECK(ds.examples[1].tokens == std::vector<std::string>{"bad", "cf", "film"});
  CHECK(*ds.examples[1].trigger_name == "badnet");
  CHECK(*ds.examples[1].original_label == 1);
  CHECK(ds.num_classes == 2);
}

TEST_CASE("tsv round-trip is byte-identical for canonical files") {
  const auto path = temp_file("canonical.tsv");
  {
    std::ofstream out(path, std::ios::binary);
    out << "1\tgood movie\n0\tbad cf film\t1\tbadnet\t1\n1\ta lone token\n";
  }
  const std::string original = read_file(path);
  const Dataset ds = load_tsv(path);
  const auto out_path = temp_file("canonical_out.tsv");
  save_tsv(ds, out_path);
  CHECK(read_file(out_path) == original);
}

TEST_CASE("tsv round-trip preserves every example field") {
  SyntheticTaskSpec spec = default_synthetic_spec();
  spec.num_examples = 50;
  spec.seed = 3;
  Dataset ds = generate_synthetic(spec);
  ds.examples[4].is_poisoned = true;
  ds.examples[4].trigger_name = "badnet";
  ds.examples[4].original_label = ds.examples[4].label;
  ds.examples[4].label = 1;

  const auto path = temp_file("fields.tsv");
  save_tsv(ds, path);
  const Dataset back = load_tsv(path);
  REQUIRE(back.size() == ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) CHECK(back.examples[i] == ds.examples[i]);
}

TEST_CASE("tsv load errors name the offending line") {
  const auto path = temp_file("bad.tsv");

  SUBCASE("wrong field count") {
    std::ofstream(path, std::ios::binary) << "1\tok text\n0\textra\tfield\n";
    CHECK_THROWS_WITH_AS(load_tsv(path), doctest::Contains("line 2"), std::runtime_error);
  }
  SUBCASE("unknown label token") {
    std::ofstream(path, std::ios::binary) << "positive\tgood movie\n";
    CHECK_THROWS_WITH_AS(load_tsv(path), doctest::Contains("line 1"), std::runtime_error);
  }
  SUBCASE("clean row with poison fields") {
    std::ofstream(path, std::ios::binary) << "1\ttext here\t0\tbadnet\t0\n";
    CHECK_THROWS_AS(load_tsv(path), std::runtime_error);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_tsv(temp_file("does_not_exist.tsv")), std::runtime_error);
  }
}

TEST_CASE("encode maps unseen tokens to UNKNOWN") {
  const Dataset ds = tiny_dataset();
  const Vocabulary v = build_vocabulary(ds, 1);
  const auto ids = v.encode({"a", "zzz"});
  REQUIRE(ids.size() == 2);
  CHECK(ids[0] >= 2);
  CHECK(ids[1] == Vocabulary::kUnknownId);
}

TEST_CASE("dataset validation catches inconsistent poison fields") {
  Dataset ds = tiny_dataset();
  ds.examples[0].trigger_name = "ghost";
  CHECK_THROWS_AS(ds.validate(), std::invalid_argument);
}
