// SPDX-License-Identifier: Apache-2.0
#include "npoe/config.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace npoe {

namespace {

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r\n");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r\n");
  return s.substr(begin, end - begin + 1);
}

std::vector<std::string> split_any(const std::string& s, const std::string& seps) {
  std::vector<std::string> out;
  std::string cur;
  for (const char c : s) {
    if (seps.find(c) != std::string::npos) {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

}  // namespace

ConfigMap ConfigMap::from_string(const std::string& text) {
  ConfigMap map;
  std::istringstream in(text);
  std::string line;
  std::string section;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    if (t.front() == '[') {
      if (t.back() != ']')
        throw std::runtime_error("config line " + std::to_string(line_no) + ": unclosed section");
      section = trim(t.substr(1, t.size() - 2));
      if (section.empty())
        throw std::runtime_error("config line " + std::to_string(line_no) + ": empty section");
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    if (key.empty())
      throw std::runtime_error("config line " + std::to_string(line_no) + ": empty key");
    map.set(section.empty() ? key : section + "." + key, value);
  }
  return map;
}

ConfigMap ConfigMap::from_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open config file: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return from_string(ss.str());
}

void ConfigMap::set(const std::string& key, const std::string& value) { values_[key] = value; }

bool ConfigMap::has(const std::string& key) const { return values_.count(key) > 0; }

std::string ConfigMap::get(const std::string& key, const std::string& fallback) const {
  const auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

int ConfigMap::get_int(const std::string& key, int fallback) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    std::size_t pos = 0;
    const int v = std::stoi(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw std::runtime_error("config key '" + key + "': not an integer: " + it->second);
  }
}

double ConfigMap::get_double(const std::string& key, double fallback) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    std::size_t pos = 0;
    const double v = std::stod(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw std::runtime_error("config key '" + key + "': not a number: " + it->second);
  }
}

bool ConfigMap::get_bool(const std::string& key, bool fallback) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  std::string v = it->second;
  std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return std::tolower(c); });
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw std::runtime_error("config key '" + key + "': not a boolean: " + it->second);
}

std::uint64_t ConfigMap::get_u64(const std::string& key, std::uint64_t fallback) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument("");
    return static_cast<std::uint64_t>(v);
  } catch (const std::exception&) {
    throw std::runtime_error("config key '" + key + "': not an unsigned integer: " + it->second);
  }
}

std::string ConfigMap::snapshot() const {
  std::string out;
  for (const auto& [k, v] : values_) {
    out += k;
    out += " = ";
    out += v;
    out += '\n';
  }
  return out;
}

std::string run_id_for(const ConfigMap& map) {
  const std::uint64_t h = detail::fnv1a(map.snapshot());
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

SweepSpec parse_sweep_axes(const std::string& text) {
  SweepSpec spec;
  for (const std::string& axis : split_any(text, ";")) {
    const std::string t = trim(axis);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("sweep axis '" + t + "': expected key=v1|v2|...");
    const std::string key = trim(t.substr(0, eq));
    std::vector<std::string> values;
    for (const std::string& v : split_any(t.substr(eq + 1), "|"))
      if (!trim(v).empty()) values.push_back(trim(v));
    if (key.empty() || values.empty())
      throw std::runtime_error("sweep axis '" + t + "': expected key=v1|v2|...");
    spec.axes.emplace_back(key, values);
  }
  return spec;
}

namespace {

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = {
      "run.seed",
      "data.source",
      "data.train_size",
      "data.test_size",
      "data.clean_subset_size",
      "data.num_classes",
      "data.min_length",
      "data.max_length",
      "data.keyword_prob",
      "data.cross_keyword_prob",
      "data.negation_prob",
      "data.noise_label_rate",
      "data.dir",
      "data.train_tsv",
      "data.test_tsv",
      "data.clean_subset_tsv",
      "attack.target_label",
      "attack.triggers",
      "attack.badnet_payload",
      "attack.insertsent_payload",
      "defense.mode",
      "defense.num_experts",
      "defense.expert_layers",
      "defense.gate_layers",
      "defense.main_layers",
      "defense.expert_layers_per_expert",
      "defense.main_embedding_dim",
      "defense.expert_embedding_dim",
      "defense.gate_embedding_dim",
      "defense.main_hidden_dim",
      "defense.expert_hidden_dim",
      "defense.gate_hidden_dim",
      "defense.beta",
      "defense.alpha",
      "defense.rdrop",
      "defense.pretrain",
      "defense.gate_pretrain",
      "defense.dropout",
      "defense.epochs",
      "defense.batch_size",
      "defense.lr_main",
      "defense.lr_experts",
      "defense.lr_gate",
      "defense.pretrain_epochs",
      "defense.pretrain_fraction",
      "defense.pretrain_lr",
      "defense.min_count",
      "defense.pretrain_triggers",
      "selection.threshold_r",
      "selection.threshold_b",
      "selection.sweep",
      "output.dir",
  };
  return keys;
}

TriggerSpec trigger_by_name(const std::string& name, const ConfigMap& map) {
  TriggerSpec trig;
  if (name == "badnet") {
    trig = default_badnet();
    if (map.has("attack.badnet_payload"))
      trig.payload = split_any(map.get("attack.badnet_payload", ""), " ,");
  } else if (name == "insertsent") {
    trig = default_insertsent();
    if (map.has("attack.insertsent_payload"))
      trig.payload = split_any(map.get("attack.insertsent_payload", ""), " ,");
  } else if (name == "syntactic") {
    trig = default_syntactic();
  } else if (name == "stylistic") {
    trig = default_stylistic();
  } else {
    throw std::runtime_error("unknown trigger name: " + name +
                             " (expected badnet|insertsent|syntactic|stylistic)");
  }
  trig.validate();
  return trig;
}

}  // namespace

ExperimentConfig ExperimentConfig::from_map(const ConfigMap& map,
                                            const std::filesystem::path& out_override) {
  for (const auto& [key, value] : map.values())
    if (known_keys().count(key) == 0)
      throw std::runtime_error("unknown config key: " + key);

  ExperimentConfig cfg;
  cfg.raw = map;
  cfg.seed = map.get_u64("run.seed", 42);

  cfg.data.source = map.get("data.source", "synthetic");
  if (cfg.data.source != "synthetic" && cfg.data.source != "tsv")
    throw std::runtime_error("data.source must be synthetic or tsv");
  cfg.data.train_size = map.get_int("data.train_size", 2000);
  cfg.data.test_size = map.get_int("data.test_size", 500);
  cfg.data.clean_subset_size = map.get_int("data.clean_subset_size", 200);
  cfg.data.synthetic = default_synthetic_spec();
  SyntheticTaskSpec& syn = cfg.data.synthetic;
  syn.num_classes = map.get_int("data.num_classes", syn.num_classes);
  syn.min_length = map.get_int("data.min_length", syn.min_length);
  syn.max_length = map.get_int("data.max_length", syn.max_length);
  syn.keyword_prob = map.get_double("data.keyword_prob", syn.keyword_prob);
  syn.cross_keyword_prob = map.get_double("data.cross_keyword_prob", syn.cross_keyword_prob);
  syn.negation_prob = map.get_double("data.negation_prob", syn.negation_prob);
  syn.noise_label_rate = map.get_double("data.noise_label_rate", syn.noise_label_rate);
  cfg.data.dir = map.get("data.dir", "");
  cfg.data.train_tsv = map.get("data.train_tsv", "");
  cfg.data.test_tsv = map.get("data.test_tsv", "");
  cfg.data.clean_subset_tsv = map.get("data.clean_subset_tsv", "");
  if (cfg.data.synthetic.num_classes != 2)
    throw std::runtime_error("the built-in synthetic task ships 2-class lexicons; "
                             "use data.source=tsv for other class counts");

  cfg.attack.target_label = map.get_int("attack.target_label", 1);
  cfg.attack.seed = derive_seed(cfg.seed, "attack");
  const std::string trigger_list =
      map.get("attack.triggers", "badnet:0.05,insertsent:0.05,syntactic:0.10");
  for (const std::string& entry : split_any(trigger_list, ", ")) {
    const auto colon = entry.find(':');
    if (colon == std::string::npos)
      throw std::runtime_error("attack.triggers entry '" + entry + "': expected name:rate");
    const std::string name = entry.substr(0, colon);
    const double rate = std::stod(entry.substr(colon + 1));
    cfg.attack.triggers.emplace_back(trigger_by_name(name, map), rate);
  }

  cfg.mode = map.get("defense.mode", "npoe");
  if (cfg.mode != "npoe" && cfg.mode != "dpoe" && cfg.mode != "nodefense" && cfg.mode != "benign")
    throw std::runtime_error("defense.mode must be npoe|dpoe|nodefense|benign");

  NPoEConfig& d = cfg.defense;
  d.num_experts = map.get_int("defense.num_experts", d.num_experts);
  d.expert_layers = map.get_int("defense.expert_layers", d.expert_layers);
  d.gate_layers = map.get_int("defense.gate_layers", d.gate_layers);
  d.main_layers = map.get_int("defense.main_layers", d.main_layers);
  if (map.has("defense.expert_layers_per_expert")) {
    for (const std::string& v : split_any(map.get("defense.expert_layers_per_expert", ""), ", "))
      d.expert_layers_per_expert.push_back(std::stoi(v));
  }
  d.main_embedding_dim = map.get_int("defense.main_embedding_dim", d.main_embedding_dim);
  d.expert_embedding_dim = map.get_int("defense.expert_embedding_dim", d.expert_embedding_dim);
  d.gate_embedding_dim = map.get_int("defense.gate_embedding_dim", d.gate_embedding_dim);
  d.main_hidden_dim = map.get_int("defense.main_hidden_dim", d.main_hidden_dim);
  d.expert_hidden_dim = map.get_int("defense.expert_hidden_dim", d.expert_hidden_dim);
  d.gate_hidden_dim = map.get_int("defense.gate_hidden_dim", d.gate_hidden_dim);
  d.beta = map.get_double("defense.beta", d.beta);
  d.alpha = map.get_double("defense.alpha", d.alpha);
  d.rdrop_enabled = map.get_bool("defense.rdrop", d.rdrop_enabled);
  d.pretrain_enabled = map.get_bool("defense.pretrain", d.pretrain_enabled);
  d.gate_pretrain_enabled = map.get_bool("defense.gate_pretrain", d.gate_pretrain_enabled);
  d.dropout = map.get_double("defense.dropout", d.dropout);
  d.epochs = map.get_int("defense.epochs", d.epochs);
  d.batch_size = map.get_int("defense.batch_size", d.batch_size);
  d.lr_main = map.get_double("defense.lr_main", d.lr_main);
  d.lr_experts = map.get_double("defense.lr_experts", d.lr_experts);
  d.lr_gate = map.get_double("defense.lr_gate", d.lr_gate);
  d.pretrain_epochs = map.get_int("defense.pretrain_epochs", d.pretrain_epochs);
  d.pretrain_fraction = map.get_double("defense.pretrain_fraction", d.pretrain_fraction);
  d.pretrain_lr = map.get_double("defense.pretrain_lr", d.pretrain_lr);
  d.min_count = map.get_int("defense.min_count", d.min_count);
  d.seed = cfg.seed;
  if (map.has("defense.pretrain_triggers")) {
    for (const std::string& name : split_any(map.get("defense.pretrain_triggers", ""), ", ")) {
      if (name == "badnet") d.pretrain_triggers.push_back(default_badnet());
      else if (name == "insertsent") d.pretrain_triggers.push_back(default_insertsent());
      else if (name == "syntactic") d.pretrain_triggers.push_back(default_syntactic());
      else if (name == "stylistic") d.pretrain_triggers.push_back(default_stylistic());
      else throw std::runtime_error("unknown pretrain trigger name: " + name);
    }
  }

  cfg.selection.r_threshold = map.get_double("selection.threshold_r", 0.3);
  cfg.selection.b_threshold = map.get_double("selection.threshold_b", 0.7);
  cfg.selection.validate();
  if (map.has("selection.sweep")) cfg.sweep = parse_sweep_axes(map.get("selection.sweep", ""));

  if (!out_override.empty()) {
    cfg.out_root = out_override;
  } else if (map.has("output.dir")) {
    cfg.out_root = map.get("output.dir", "");
  } else if (const char* env = std::getenv("NPOE_LAB_OUT"); env != nullptr && *env != '\0') {
    cfg.out_root = env;
  } else {
    cfg.out_root = "npoe-out";
  }

  cfg.defense.validate();
  return cfg;
}

std::filesystem::path ExperimentConfig::data_dir() const {
  if (!data.dir.empty()) return data.dir;
  return out_root / "data";
}

NPoEConfig ExperimentConfig::effective_defense() const {
  NPoEConfig d = defense;
  if (mode == "dpoe") {
    d.num_experts = 1;
    d.gate_frozen_uniform = true;
    d.pretrain_enabled = false;
    d.gate_pretrain_enabled = false;
    d.expert_layers_per_expert.clear();
    d.pretrain_triggers.clear();
  } else if (mode == "nodefense" || mode == "benign") {
    d.num_experts = 1;
    d.gate_frozen_uniform = true;
    d.beta = 0.0;
    d.alpha = 0.0;
    d.rdrop_enabled = false;
    d.pretrain_enabled = false;
    d.gate_pretrain_enabled = false;
    d.expert_layers_per_expert.clear();
    d.pretrain_triggers.clear();
  }
  return d;
}

}  // namespace npoe
