// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "npoe/npoe.hpp"
#include "test_support.hpp"

using namespace npoe;
using namespace npoe::testsupport;

namespace {

Dataset small_task(int n, std::uint64_t seed) {
  SyntheticTaskSpec spec = default_synthetic_spec();
  spec.num_examples = n;
  spec.seed = seed;
  return generate_synthetic(spec);
}

PoisonedDataset small_poisoned(int n, std::uint64_t seed) {
  PoisonSpec spec;
  spec.triggers = {{default_badnet(), 0.05}};
  spec.target_label = 1;
  spec.seed = derive_seed(seed, "poison");
  return poison_dataset(small_task(n, seed), spec);
}

bool params_equal(const ParamSet& a, const ParamSet& b) {
  if (a.arrays.size() != b.arrays.size()) return false;
  for (std::size_t i = 0; i < a.arrays.size(); ++i)
    if (a.arrays[i].data != b.arrays[i].data) return false;
  return true;
}

}  // namespace

TEST_CASE("moe_combine with one expert returns that expert's log-probs") {
  const std::vector<std::vector<double>> experts = {{-0.1, -2.4}};
  const std::vector<double> gate_logits = {3.7};
  const MoEOutput out = moe_combine(experts, gate_logits);
  CHECK(out.gate_weights == std::vector<double>{1.0});
  CHECK(out.q[0] == doctest::Approx(-0.1));
  CHECK(out.q[1] == doctest::Approx(-2.4));
}

TEST_CASE("moe_combine matches the hand-computed two-expert mixture") {
  const std::vector<std::vector<double>> experts = {
      {std::log(0.8), std::log(0.2)}, {std::log(0.2), std::log(0.8)}};
  const std::vector<double> uniform_gate = {0.0, 0.0};
  const MoEOutput out = moe_combine(experts, uniform_gate);
  // 0.5*(ln .8 + ln .2) = 0.5*ln .16 = -0.916290...
  const double expected = 0.5 * (std::log(0.8) + std::log(0.2));
  CHECK(expected == doctest::Approx(-0.9163).epsilon(1e-4));
  CHECK(out.q[0] == doctest::Approx(expected).epsilon(1e-12));
  CHECK(out.q[1] == doctest::Approx(expected).epsilon(1e-12));
  CHECK(out.gate_weights[0] == doctest::Approx(0.5));
}

TEST_CASE("identical experts are a fixed point of the mixture") {
  const std::vector<double> row = {std::log(0.6), std::log(0.3), std::log(0.1)};
  const std::vector<std::vector<double>> experts = {row, row, row};
  const std::vector<double> skewed_gate = {2.0, -1.0, 0.3};
  const MoEOutput out = moe_combine(experts, skewed_gate);
  for (std::size_t c = 0; c < row.size(); ++c) CHECK(out.q[c] == doctest::Approx(row[c]));
  double sum = 0;
  for (const double w : out.gate_weights) sum += w;
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("moe_combine rejects mismatched expert count") {
  const std::vector<std::vector<double>> experts = {{-0.5, -1.0}, {-0.7, -0.7}};
  CHECK_THROWS_AS(moe_combine(experts, std::vector<double>{0.0}), std::invalid_argument);
}

TEST_CASE("poe_combine degenerate and worked examples") {
  const std::vector<double> r = {0.9, 0.1};

  SUBCASE("beta 0 returns the main prediction") {
    const auto p = poe_combine(r, std::vector<double>{-3.0, 2.0}, 0.0);
    CHECK(std::abs(p[0] - 0.9) < 1e-9);
    CHECK(std::abs(p[1] - 0.1) < 1e-9);
  }
  SUBCASE("uniform q leaves the main prediction unchanged") {
    const auto p = poe_combine(r, std::vector<double>{-1.3, -1.3}, 2.5);
    CHECK(std::abs(p[0] - 0.9) < 1e-9);
    CHECK(std::abs(p[1] - 0.1) < 1e-9);
  }
  SUBCASE("worked product: normalize(0.18, 0.08)") {
    const std::vector<double> q = {std::log(0.2), std::log(0.8)};
    const auto p = poe_combine(r, q, 1.0);
    CHECK(p[0] == doctest::Approx(0.18 / 0.26).epsilon(1e-9));
    CHECK(p[1] == doctest::Approx(0.08 / 0.26).epsilon(1e-9));
  }
  SUBCASE("length mismatch") {
    CHECK_THROWS_AS(poe_combine(r, std::vector<double>{0.0}, 1.0), std::invalid_argument);
  }
}

TEST_CASE("npoe_loss with both couplings off is plain main-model cross entropy") {
  NpoeCheckSetup s = make_npoe_check_setup(7, 2, /*beta=*/0.0, /*alpha=*/0.0, /*rdrop=*/false);
  Gradients grads = zero_gradients(s.model);
  const LossBreakdown lb = npoe_loss(s.data, s.batch, s.model, s.cfg, s.dropout_seed, &grads);

  // Reference CE with the identical dropout stream.
  Rng rng(s.dropout_seed);
  double expected = 0.0;
  for (const int idx : s.batch) {
    const auto& ex = s.data[static_cast<std::size_t>(idx)];
    const ForwardTrace t = forward(s.model.main.params, s.model.main.spec, ex.ids, &rng);
    expected += cross_entropy_log(log_softmax(t.logits), ex.label);
  }
  expected /= static_cast<double>(s.batch.size());
  CHECK(lb.total == doctest::Approx(expected).epsilon(1e-12));
  CHECK(lb.kl == 0.0);

  for (const auto& e : grads.experts)
    for (const auto& a : e.arrays)
      for (const double g : a.data) CHECK(g == 0.0);
  for (const auto& a : grads.gate.arrays)
    for (const double g : a.data) CHECK(g == 0.0);
}

TEST_CASE("dropout-free consistency passes have exactly zero KL") {
  NpoeCheckSetup s = make_npoe_check_setup(11, 2, 0.5, 1.0, true);
  s.cfg.dropout = 0.0;
  s.model.main.spec.dropout = 0.0;  // both passes see identical activations
  const LossBreakdown lb = npoe_loss(s.data, s.batch, s.model, s.cfg, s.dropout_seed, nullptr);
  CHECK(lb.kl == 0.0);
}

TEST_CASE("consistency term sends no gradient to experts or gate") {
  NpoeCheckSetup s = make_npoe_check_setup(13, 3, 1.2, 0.8, true);
  Gradients grads = zero_gradients(s.model);
  npoe_loss_terms(s.data, s.batch, s.model, s.cfg, s.dropout_seed, &grads,
                  /*include_ce=*/false, /*include_kl=*/true);
  for (const auto& e : grads.experts)
    for (const auto& a : e.arrays)
      for (const double g : a.data) CHECK(g == 0.0);
  for (const auto& a : grads.gate.arrays)
    for (const double g : a.data) CHECK(g == 0.0);
  // ...but the main model does receive one.
  double main_norm = 0.0;
  for (const auto& a : grads.main.arrays)
    for (const double g : a.data) main_norm += g * g;
  CHECK(main_norm > 0.0);
}

TEST_CASE("full npoe loss gradients pass the finite-difference check") {
  for (const std::uint64_t seed : {21ULL, 22ULL}) {
    NpoeCheckSetup s = make_npoe_check_setup(seed);
    const auto loss = [&] {
      return npoe_loss(s.data, s.batch, s.model, s.cfg, s.dropout_seed, nullptr).total;
    };
    const auto analytic = [&] { return collect_gradients(s); };
    const GradCheckReport rep =
        finite_difference_check(all_param_groups(s.model), loss, analytic);
    INFO("seed ", seed, " worst ", rep.worst_param, " err ", rep.max_rel_err);
    CHECK(rep.pass);
  }
}

TEST_CASE("frozen uniform gate loss gradients also pass finite differences") {
  NpoeCheckSetup s = make_npoe_check_setup(31, 2, 0.9, 0.7, true, /*frozen_gate=*/true);
  const auto loss = [&] {
    return npoe_loss(s.data, s.batch, s.model, s.cfg, s.dropout_seed, nullptr).total;
  };
  const auto analytic = [&] { return collect_gradients(s); };
  const GradCheckReport rep = finite_difference_check(all_param_groups(s.model), loss, analytic);
  INFO("worst ", rep.worst_param, " err ", rep.max_rel_err);
  CHECK(rep.pass);
}

TEST_CASE("single frozen expert reproduces direct two-model product") {
  NpoeCheckSetup s =
      make_npoe_check_setup(41, /*k=*/1, /*beta=*/1.3, 0.0, false, /*frozen_gate=*/true);
  for (const auto& ex : s.data) {
    const MoEOutput moe = moe_forward(s.model, ex.ids);
    CHECK(moe.gate_weights == std::vector<double>{1.0});
    const auto r = main_probabilities(s.model, ex.ids);
    const auto p = poe_combine(r, moe.q, s.cfg.beta);

    // Direct two-model implementation, written out longhand.
    const ForwardTrace et =
        forward(s.model.experts[0].params, s.model.experts[0].spec, ex.ids);
    const auto expert_log = log_softmax(et.logits);
    std::vector<double> logits(r.size());
    for (std::size_t c = 0; c < r.size(); ++c)
      logits[c] = std::log(std::max(r[c], 1e-12)) + s.cfg.beta * expert_log[c];
    const auto direct = softmax(logits);
    for (std::size_t c = 0; c < r.size(); ++c) CHECK(std::abs(p[c] - direct[c]) < 1e-9);
  }
}

TEST_CASE("pretraining trains expert encoders, leaves the gate alone") {
  const Dataset subset = small_task(160, 5);
  NPoEConfig cfg;
  cfg.num_experts = 2;
  cfg.pretrain_enabled = true;
  cfg.seed = 99;
  const Vocabulary vocab = build_vocabulary(subset, 1);
  NPoEModel model = init_model(cfg, vocab, 2);
  const NPoEModel before = model;

  const std::vector<TriggerSpec> triggers = {default_badnet(), default_insertsent()};
  const PretrainSet sets = make_pretrain_sets(subset, triggers, 0.5, 1);
  const PretrainSet heldout = make_pretrain_sets(subset, triggers, 0.5, 2);

  const PretrainReport report = pretrain_experts(model, sets, 20, 5e-3, 7, &heldout);

  CHECK(params_equal(model.gate.params, before.gate.params));
  for (std::size_t j = 0; j < 2; ++j) {
    CHECK_FALSE(params_equal(model.experts[j].params, before.experts[j].params));
    // The trigger token is a perfect separator for an embedding-bag model.
    CHECK(report.heldout_accuracy[j] >= 0.95);
  }
}

TEST_CASE("pretrain set count must match the expert count") {
  const Dataset subset = small_task(60, 6);
  NPoEConfig cfg;
  cfg.num_experts = 3;
  cfg.seed = 1;
  NPoEModel model = init_model(cfg, build_vocabulary(subset, 1), 2);
  const PretrainSet sets = make_pretrain_sets(subset, {default_badnet()}, 0.5, 1);
  CHECK_THROWS_AS(pretrain_experts(model, sets, 1, 1e-3, 1), std::invalid_argument);
}

TEST_CASE("training is deterministic given seeds") {
  const PoisonedDataset poisoned = small_poisoned(200, 17);
  NPoEConfig cfg;
  cfg.num_experts = 2;
  cfg.epochs = 2;
  cfg.pretrain_enabled = false;
  cfg.seed = 55;

  const TrainResult a = train(poisoned, cfg);
  const TrainResult b = train(poisoned, cfg);
  CHECK(params_equal(a.model.main.params, b.model.main.params));
  for (std::size_t j = 0; j < a.model.experts.size(); ++j)
    CHECK(params_equal(a.model.experts[j].params, b.model.experts[j].params));
  CHECK(params_equal(a.model.gate.params, b.model.gate.params));
  REQUIRE(a.state.log.size() == b.state.log.size());
  for (std::size_t e = 0; e < a.state.log.size(); ++e)
    CHECK(a.state.log[e].loss == b.state.log[e].loss);
}

TEST_CASE("pretraining disabled leaves parameters at fresh initialization") {
  const PoisonedDataset poisoned = small_poisoned(100, 19);
  NPoEConfig cfg;
  cfg.num_experts = 2;
  cfg.epochs = 0;  // init + (skipped) pretraining only
  cfg.pretrain_enabled = false;
  cfg.seed = 3;

  const TrainResult r = train(poisoned, cfg);
  const NPoEModel fresh =
      init_model(cfg, build_vocabulary(poisoned.dataset, cfg.min_count), 2);
  CHECK(params_equal(r.model.main.params, fresh.main.params));
  for (std::size_t j = 0; j < fresh.experts.size(); ++j)
    CHECK(params_equal(r.model.experts[j].params, fresh.experts[j].params));
  CHECK(params_equal(r.model.gate.params, fresh.gate.params));
}

TEST_CASE("training with pretraining enabled requires a clean subset") {
  const PoisonedDataset poisoned = small_poisoned(100, 23);
  NPoEConfig cfg;
  cfg.pretrain_enabled = true;
  CHECK_THROWS_AS(train(poisoned, cfg, nullptr), std::invalid_argument);
}

TEST_CASE("prediction ties break toward the smaller class index") {
  const Vocabulary vocab = toy_vocabulary(4);
  NPoEConfig cfg;
  cfg.seed = 1;
  NPoEModel model = init_model(cfg, vocab, 2);
  fill_zero(model.main.params);  // logits 0 -> probabilities (0.5, 0.5)

  Dataset ds;
  ds.num_classes = 2;
  ds.name = "tie";
  ds.examples.push_back({{"w0", "w1"}, 1, false, {}, {}});
  const Prediction pred = predict(model, ds);
  CHECK(pred.labels[0] == 0);
  CHECK(pred.probs[0][0] == doctest::Approx(0.5));
}

TEST_CASE("inference ignores experts and gate entirely") {
  const PoisonedDataset poisoned = small_poisoned(150, 29);
  NPoEConfig cfg;
  cfg.num_experts = 2;
  cfg.epochs = 1;
  cfg.pretrain_enabled = false;
  cfg.seed = 77;
  TrainResult r = train(poisoned, cfg);

  Dataset probe = small_task(30, 31);
  const Prediction before = predict(r.model, probe);

  for (std::size_t j = 0; j < r.model.experts.size(); ++j)
    r.model.experts[j].params = init_params(r.model.experts[j].spec, 4242 + j);
  r.model.gate.params = init_params(r.model.gate.spec, 999);
  const Prediction after = predict(r.model, probe);
  CHECK(before.labels == after.labels);
  CHECK(before.probs == after.probs);
}

TEST_CASE("batch prediction equals one-by-one prediction") {
  const PoisonedDataset poisoned = small_poisoned(120, 37);
  NPoEConfig cfg;
  cfg.num_experts = 1;
  cfg.epochs = 1;
  cfg.pretrain_enabled = false;
  cfg.seed = 13;
  const TrainResult r = train(poisoned, cfg);

  const Dataset probe = small_task(20, 41);
  const Prediction batch = predict(r.model, probe);
  for (std::size_t i = 0; i < probe.size(); ++i) {
    Dataset one;
    one.num_classes = probe.num_classes;
    one.name = "one";
    one.examples.push_back(probe.examples[i]);
    const Prediction single = predict(r.model, one);
    CHECK(single.labels[0] == batch.labels[i]);
    CHECK(single.probs[0] == batch.probs[i]);
  }
}

TEST_CASE("gate weights form a distribution for every input") {
  NpoeCheckSetup s = make_npoe_check_setup(51, 3, 1.0, 0.5, true);
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<int> ids(static_cast<std::size_t>(1 + rng.uniform_int(6)));
    for (auto& id : ids) id = rng.uniform_int(s.model.vocab.size());
    const MoEOutput out = moe_forward(s.model, ids);
    double sum = 0.0;
    for (const double w : out.gate_weights) {
      CHECK(w >= 0.0);
      sum += w;
    }
    CHECK(std::abs(sum - 1.0) < 1e-6);
  }
}

TEST_CASE("model checkpoints round-trip through a directory") {
  const PoisonedDataset poisoned = small_poisoned(100, 43);
  NPoEConfig cfg;
  cfg.num_experts = 2;
  cfg.epochs = 1;
  cfg.pretrain_enabled = false;
  cfg.seed = 7;
  const TrainResult r = train(poisoned, cfg);

  const auto dir = std::filesystem::temp_directory_path() / "npoe_test_npoe" / "ckpt";
  save_model(dir, r.model, cfg);
  const LoadedModel lm = load_model(dir);

  CHECK(lm.model.num_classes == r.model.num_classes);
  CHECK(lm.config.num_experts == cfg.num_experts);
  CHECK(lm.config.seed == cfg.seed);
  CHECK(params_equal(lm.model.main.params, r.model.main.params));
  REQUIRE(lm.model.experts.size() == r.model.experts.size());
  for (std::size_t j = 0; j < r.model.experts.size(); ++j)
    CHECK(params_equal(lm.model.experts[j].params, r.model.experts[j].params));
  CHECK(params_equal(lm.model.gate.params, r.model.gate.params));
  CHECK(lm.model.vocab.id_to_token == r.model.vocab.id_to_token);

  // Loaded model predicts identically.
  const Dataset probe = small_task(15, 47);
  const Prediction a = predict(r.model, probe);
  const Prediction b = predict(lm.model, probe);
  CHECK(a.labels == b.labels);
  CHECK(a.probs == b.probs);
}
