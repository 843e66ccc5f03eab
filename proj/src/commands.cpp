// SPDX-License-Identifier: Apache-2.0
#include "npoe/commands.hpp"

#include <chrono>
#include <fstream>
#include <iostream>

#include <json.hpp>

#include "npoe/evalsel.hpp"

namespace npoe {

using json = nlohmann::json;

namespace {

constexpr const char* kVersion = "0.1.0";

double seconds_since(const std::chrono::steady_clock::time_point& t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Dataset generate_with(const ExperimentConfig& cfg, int size, const char* stream) {
  SyntheticTaskSpec spec = cfg.data.synthetic;
  spec.num_examples = size;
  spec.seed = derive_seed(cfg.seed, stream);
  Dataset ds = generate_synthetic(spec);
  ds.name = stream;
  return ds;
}

struct SourceData {
  Dataset train_clean;
  Dataset test_clean;
  Dataset clean_subset;
};

SourceData load_or_generate_source(const ExperimentConfig& cfg) {
  SourceData src;
  if (cfg.data.source == "synthetic") {
    src.train_clean = generate_with(cfg, cfg.data.train_size, "train");
    src.test_clean = generate_with(cfg, cfg.data.test_size, "test");
    src.clean_subset = generate_with(cfg, cfg.data.clean_subset_size, "clean_subset");
  } else {
    if (cfg.data.train_tsv.empty() || cfg.data.test_tsv.empty() ||
        cfg.data.clean_subset_tsv.empty())
      throw std::runtime_error(
          "data.source=tsv requires data.train_tsv, data.test_tsv and data.clean_subset_tsv");
    src.train_clean = load_tsv(cfg.data.train_tsv);
    src.test_clean = load_tsv(cfg.data.test_tsv);
    src.clean_subset = load_tsv(cfg.data.clean_subset_tsv);
  }
  return src;
}

std::vector<std::string> trigger_names(const PoisonSpec& spec) {
  std::vector<std::string> names;
  for (const auto& [trig, rate] : spec.triggers) names.push_back(trig.name);
  return names;
}

/// Rebuilds the per-trigger manifest from the provenance columns of a loaded
/// poisoned TSV, cross-checking against the manifest file when present.
PoisonedDataset assemble_poisoned(Dataset dataset, const PoisonSpec& spec,
                                  const std::filesystem::path& manifest_path) {
  PoisonedDataset out;
  out.spec = spec;
  out.manifest.resize(spec.triggers.size());
  std::map<std::string, std::size_t> slot;
  for (std::size_t j = 0; j < spec.triggers.size(); ++j) slot[spec.triggers[j].first.name] = j;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const Example& ex = dataset.examples[i];
    if (!ex.is_poisoned) continue;
    const auto it = slot.find(*ex.trigger_name);
    if (it == slot.end())
      throw std::runtime_error("poisoned dataset references trigger '" + *ex.trigger_name +
                               "' absent from attack.triggers");
    out.manifest[it->second].push_back(static_cast<int>(i));
  }
  out.dataset = std::move(dataset);

  if (std::filesystem::exists(manifest_path)) {
    const auto on_disk = load_manifest(manifest_path, trigger_names(spec));
    if (on_disk != out.manifest)
      throw std::runtime_error("manifest file disagrees with dataset provenance: " +
                               manifest_path.string());
  }
  return out;
}

json metrics_to_json(const MetricsReport& m) {
  json j;
  j["clean_acc"] = m.clean_acc;
  j["clean_correct"] = m.clean_correct;
  j["clean_total"] = m.clean_total;
  j["has_attack"] = m.has_attack;
  if (m.has_attack) {
    j["asr"] = m.asr;
    j["attack_hits"] = m.attack_hits;
    j["attack_total"] = m.attack_total;
    json triggers = json::array();
    for (const auto& t : m.per_trigger)
      triggers.push_back({{"name", t.name}, {"asr", t.asr}, {"hits", t.hits}, {"total", t.total}});
    j["per_trigger"] = triggers;
  }
  return j;
}

json detection_to_json(const DetectionReport& d) {
  return json{{"detected", d.detected.size()},     {"detected_rate", d.detected_rate},
              {"manifest_size", d.manifest_size},  {"true_positives", d.true_positives},
              {"precision", d.precision},          {"recall", d.recall}};
}

void print_metrics(const MetricsReport& m) {
  std::cout << "clean_acc " << m.clean_acc << " (" << m.clean_correct << "/" << m.clean_total
            << ")\n";
  if (m.has_attack) {
    std::cout << "asr " << m.asr << " (" << m.attack_hits << "/" << m.attack_total << ")\n";
    for (const auto& t : m.per_trigger)
      std::cout << "  trigger " << t.name << ": asr " << t.asr << " (" << t.hits << "/" << t.total
                << ")\n";
  } else {
    std::cout << "asr n/a (no attack test set)\n";
  }
}

struct TrainOutcome {
  TrainResult result;
  MetricsReport metrics;
  DetectionReport detection;
  double proxy = 0.0;
  bool proxy_valid = false;
  double clean_subset_acc = 0.0;
};

/// Shared train-and-score path used by cmd_train and every sweep trial.
TrainOutcome run_training(const ExperimentConfig& cfg) {
  const auto data_dir = cfg.data_dir();
  const NPoEConfig defense = cfg.effective_defense();

  const Dataset test_clean = load_tsv(data_dir / "test_clean.tsv");
  const Dataset test_attack = load_tsv(data_dir / "test_attack.tsv");
  const Dataset clean_subset = load_tsv(data_dir / "clean_subset.tsv");

  PoisonedDataset train_data;
  if (cfg.mode == "benign") {
    train_data.dataset = load_tsv(data_dir / "train_clean.tsv");
    train_data.spec = cfg.attack;
    train_data.manifest.assign(cfg.attack.triggers.size(), {});
  } else {
    train_data = assemble_poisoned(load_tsv(data_dir / "train_poisoned.tsv"), cfg.attack,
                                   data_dir / "manifest.tsv");
  }

  TrainOutcome out;
  out.result = train(train_data, defense, &clean_subset, &test_clean);

  out.metrics = compute_metrics(out.result.model, test_clean, &test_attack,
                                cfg.attack.target_label);
  PseudoDevResult pd = build_pseudo_dev(out.result.model, train_data, cfg.selection);
  out.detection = pd.report;
  const auto proxy = evaluate_on_pseudo_dev(out.result.model, pd.pseudo_dev);
  out.proxy_valid = proxy.has_value();
  out.proxy = proxy.value_or(0.0);
  out.clean_subset_acc = accuracy(out.result.model, clean_subset);
  return out;
}

json epoch_log_to_json(const std::vector<EpochLog>& log) {
  json arr = json::array();
  for (const auto& e : log) {
    json row{{"epoch", e.epoch}, {"loss", e.loss}, {"ce", e.ce}, {"kl", e.kl}};
    if (e.clean_acc) row["clean_acc"] = *e.clean_acc;
    arr.push_back(row);
  }
  return arr;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

}  // namespace

int cmd_poison(const ExperimentConfig& cfg) {
  try {
    const auto data_dir = cfg.data_dir();
    std::filesystem::create_directories(data_dir);

    SourceData src = load_or_generate_source(cfg);
    src.train_clean.validate();
    cfg.attack.validate(src.train_clean.num_classes);

    const PoisonedDataset poisoned = poison_dataset(src.train_clean, cfg.attack);
    const Dataset attack_test = make_attack_testset(src.test_clean, cfg.attack);

    save_tsv(src.train_clean, data_dir / "train_clean.tsv");
    save_tsv(poisoned.dataset, data_dir / "train_poisoned.tsv");
    save_tsv(src.test_clean, data_dir / "test_clean.tsv");
    save_tsv(attack_test, data_dir / "test_attack.tsv");
    save_tsv(src.clean_subset, data_dir / "clean_subset.tsv");
    save_manifest(poisoned, data_dir / "manifest.tsv");

    std::cout << "wrote " << data_dir.string() << ": train " << poisoned.dataset.size()
              << ", test " << src.test_clean.size() << ", attack test " << attack_test.size()
              << ", clean subset " << src.clean_subset.size() << "\n";
    long total = 0;
    for (std::size_t j = 0; j < poisoned.manifest.size(); ++j) {
      std::cout << "  trigger " << cfg.attack.triggers[j].first.name << ": "
                << poisoned.manifest[j].size() << " poisoned\n";
      total += static_cast<long>(poisoned.manifest[j].size());
    }
    std::cout << "  total poisoned " << total << " ("
              << static_cast<double>(total) / static_cast<double>(poisoned.dataset.size())
              << " of train)\n";
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "poison failed: " << e.what() << "\n";
    return 2;
  }
}

int cmd_train(const ExperimentConfig& cfg) {
  try {
    const auto t0 = std::chrono::steady_clock::now();
    const TrainOutcome out = run_training(cfg);

    const std::string run_id = run_id_for(cfg.raw);
    const auto run_dir = cfg.out_root / "runs" / run_id;
    std::filesystem::create_directories(run_dir);
    save_model(run_dir / "checkpoint", out.result.model, cfg.effective_defense());

    json record;
    record["version"] = kVersion;
    record["run_id"] = run_id;
    record["mode"] = cfg.mode;
    record["config"] = cfg.raw.values();
    record["metrics"] = metrics_to_json(out.metrics);
    record["detection"] = detection_to_json(out.detection);
    record["pseudo_dev_proxy"] = out.proxy_valid ? json(out.proxy) : json(nullptr);
    record["clean_subset_acc"] = out.clean_subset_acc;
    record["epochs"] = epoch_log_to_json(out.result.state.log);
    if (!out.result.state.pretrain.final_train_loss.empty())
      record["pretrain_final_loss"] = out.result.state.pretrain.final_train_loss;
    record["wall_seconds"] = seconds_since(t0);
    write_text(run_dir / "record.json", record.dump(2) + "\n");

    std::string log_text;
    for (const auto& e : out.result.state.log) {
      log_text += std::to_string(e.epoch) + "\t" + std::to_string(e.loss) + "\t" +
                  std::to_string(e.ce) + "\t" + std::to_string(e.kl);
      if (e.clean_acc) log_text += "\t" + std::to_string(*e.clean_acc);
      log_text += "\n";
    }
    write_text(run_dir / "epochs.log", log_text);

    std::cout << "run " << run_id << " (mode " << cfg.mode << ")\n";
    print_metrics(out.metrics);
    std::cout << "detected poison rate " << out.detection.detected_rate << " (precision "
              << out.detection.precision << ", recall " << out.detection.recall << ")\n";
    std::cout << "checkpoint " << (run_dir / "checkpoint").string() << "\n";
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "train failed: " << e.what() << "\n";
    return 2;
  }
}

int cmd_eval(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint,
             const std::string& clean_override, const std::string& attack_override,
             bool attack_override_given) {
  try {
    const LoadedModel lm = load_model(checkpoint);
    const auto data_dir = cfg.data_dir();

    const std::filesystem::path clean_path =
        clean_override.empty() ? data_dir / "test_clean.tsv" : std::filesystem::path(clean_override);
    const Dataset clean_test = load_tsv(clean_path);
    if (clean_test.num_classes > lm.model.num_classes)
      throw std::runtime_error("class-count mismatch: test set has " +
                               std::to_string(clean_test.num_classes) + " classes, checkpoint " +
                               std::to_string(lm.model.num_classes));
    if (cfg.attack.target_label >= lm.model.num_classes)
      throw std::runtime_error("attack target label out of range for this checkpoint");

    std::optional<Dataset> attack_test;
    std::filesystem::path attack_path;
    if (attack_override_given) {
      if (!attack_override.empty()) attack_path = attack_override;
    } else {
      const auto candidate = data_dir / "test_attack.tsv";
      if (std::filesystem::exists(candidate)) attack_path = candidate;
    }
    if (!attack_path.empty()) {
      attack_test = load_tsv(attack_path);
      if (attack_test->num_classes > lm.model.num_classes)
        throw std::runtime_error("class-count mismatch in attack test set");
    }

    const MetricsReport report = compute_metrics(
        lm.model, clean_test, attack_test ? &*attack_test : nullptr, cfg.attack.target_label);
    print_metrics(report);

    json j;
    j["version"] = kVersion;
    j["checkpoint"] = checkpoint.string();
    j["metrics"] = metrics_to_json(report);
    write_text(checkpoint / "eval.json", j.dump(2) + "\n");
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "eval failed: " << e.what() << "\n";
    return 2;
  }
}

int cmd_sweep(const ExperimentConfig& cfg) {
  try {
    if (cfg.sweep.axes.empty())
      throw std::runtime_error("selection.sweep is not set; nothing to sweep");
    cfg.sweep.validate();

    const std::string sweep_id = run_id_for(cfg.raw);
    const auto sweep_dir = cfg.out_root / "runs" / ("sweep-" + sweep_id);
    std::filesystem::create_directories(sweep_dir);

    auto run_trial = [&](std::size_t index,
                         const std::map<std::string, std::string>& overrides) -> TrialResult {
      ConfigMap trial_map = cfg.raw;
      for (const auto& [k, v] : overrides) trial_map.set(k, v);
      const std::string trial_id = run_id_for(trial_map);
      char tag[32];
      std::snprintf(tag, sizeof(tag), "trial-%03zu-", index);
      const auto trial_dir = sweep_dir / (tag + trial_id);
      const auto record_path = trial_dir / "record.json";

      TrialResult trial;
      trial.index = index;
      trial.overrides = overrides;

      if (std::filesystem::exists(record_path)) {
        std::ifstream in(record_path, std::ios::binary);
        const json j = json::parse(in);
        trial.constructed = j.at("constructed").get<bool>();
        trial.proxy = j.at("proxy").get<double>();
        trial.clean_acc = j.at("clean_acc").get<double>();
        trial.detected_rate = j.at("detected_rate").get<double>();
        trial.precision = j.at("precision").get<double>();
        trial.recall = j.at("recall").get<double>();
        trial.wall_seconds = j.at("wall_seconds").get<double>();
        trial.note = j.value("note", "");
        return trial;
      }

      const auto t0 = std::chrono::steady_clock::now();
      try {
        const ExperimentConfig trial_cfg = ExperimentConfig::from_map(trial_map, cfg.out_root);
        const TrainOutcome out = run_training(trial_cfg);
        trial.constructed = out.proxy_valid;
        trial.proxy = out.proxy;
        trial.clean_acc = out.clean_subset_acc;
        trial.detected_rate = out.detection.detected_rate;
        trial.precision = out.detection.precision;
        trial.recall = out.detection.recall;
      } catch (const std::exception& e) {
        trial.constructed = false;
        trial.note = e.what();
      }
      trial.wall_seconds = seconds_since(t0);

      std::filesystem::create_directories(trial_dir);
      json j{{"trial_id", trial_id},
             {"index", index},
             {"overrides", overrides},
             {"constructed", trial.constructed},
             {"proxy", trial.proxy},
             {"clean_acc", trial.clean_acc},
             {"detected_rate", trial.detected_rate},
             {"precision", trial.precision},
             {"recall", trial.recall},
             {"wall_seconds", trial.wall_seconds},
             {"note", trial.note}};
      write_text(record_path, j.dump(2) + "\n");
      return trial;
    };

    const SweepOutcome outcome = sweep_select(cfg.sweep, run_trial);

    // Trial table: one structured record per line plus a readable summary.
    std::string jsonl;
    std::string table = "index\tproxy\tclean_acc\td\tdisqualified\toverrides\n";
    for (const auto& t : outcome.trials) {
      json j{{"index", t.index},
             {"overrides", t.overrides},
             {"constructed", t.constructed},
             {"proxy", t.proxy},
             {"clean_acc", t.clean_acc},
             {"detected_rate", t.detected_rate},
             {"precision", t.precision},
             {"recall", t.recall},
             {"wall_seconds", t.wall_seconds},
             {"disqualified", t.disqualified},
             {"note", t.note}};
      jsonl += j.dump() + "\n";
      std::string ov;
      for (const auto& [k, v] : t.overrides) ov += k + "=" + v + " ";
      table += std::to_string(t.index) + "\t" + std::to_string(t.proxy) + "\t" +
               std::to_string(t.clean_acc) + "\t" + std::to_string(t.detected_rate) + "\t" +
               (t.disqualified ? "yes" : "no") + "\t" + ov + "\n";
    }
    write_text(sweep_dir / "trials.jsonl", jsonl);
    write_text(sweep_dir / "table.txt", table);

    std::cout << table;
    if (!outcome.selected.has_value()) {
      write_text(sweep_dir / "selected.json", "null\n");
      std::cerr << "sweep failed: every trial was disqualified\n";
      return 2;
    }

    const TrialResult& best = outcome.trials[*outcome.selected];
    ConfigMap best_map = cfg.raw;
    for (const auto& [k, v] : best.overrides) best_map.set(k, v);
    json sel{{"index", best.index},
             {"overrides", best.overrides},
             {"proxy", best.proxy},
             {"clean_acc", best.clean_acc},
             {"detected_rate", best.detected_rate}};
    write_text(sweep_dir / "selected.json", sel.dump(2) + "\n");
    write_text(sweep_dir / "best_config.conf", best_map.snapshot());
    std::cout << "selected trial " << best.index << " (proxy " << best.proxy << ", clean acc "
              << best.clean_acc << ", d " << best.detected_rate << ")\n";
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "sweep failed: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace npoe
