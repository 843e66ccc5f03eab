// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "npoe/attacks.hpp"
#include "npoe/corpus.hpp"
#include "npoe/evalsel.hpp"
#include "npoe/npoe.hpp"

namespace npoe {

/// Flat "section.key -> value" store parsed from the experiment config file
/// ([section] headers, `key = value` lines, '#' comments). Unknown keys are
/// rejected when the typed config is built, so typos fail fast.
class ConfigMap {
 public:
  static ConfigMap from_file(const std::filesystem::path& path);
  static ConfigMap from_string(const std::string& text);

  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const;
  std::string get(const std::string& key, const std::string& fallback) const;
  int get_int(const std::string& key, int fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;

  const std::map<std::string, std::string>& values() const { return values_; }
  /// Canonical text form (sorted keys); the run id is a hash of this.
  std::string snapshot() const;

 private:
  std::map<std::string, std::string> values_;
};

std::string run_id_for(const ConfigMap& map);

struct DataConfig {
  std::string source = "synthetic";  // synthetic | tsv
  int train_size = 2000;
  int test_size = 500;
  int clean_subset_size = 200;
  SyntheticTaskSpec synthetic;
  std::string dir;  // dataset directory; defaults to <out_root>/data
  std::string train_tsv, test_tsv, clean_subset_tsv;
};

struct ExperimentConfig {
  std::uint64_t seed = 42;
  DataConfig data;
  PoisonSpec attack;
  std::string mode = "npoe";  // npoe | dpoe | nodefense | benign
  NPoEConfig defense;
  PseudoDevConfig selection;
  SweepSpec sweep;  // axes may be empty unless sweeping
  std::filesystem::path out_root;
  ConfigMap raw;

  static ExperimentConfig from_map(const ConfigMap& map,
                                   const std::filesystem::path& out_override = {});

  std::filesystem::path data_dir() const;
  /// Mode-restricted defense config: dpoe pins a single frozen-uniform-gate
  /// expert without pretraining; nodefense/benign switch the product and
  /// consistency terms off entirely.
  NPoEConfig effective_defense() const;
};

SweepSpec parse_sweep_axes(const std::string& text);

}  // namespace npoe
