// SPDX-License-Identifier: Apache-2.0
#include "npoe/npoe.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

namespace npoe {

using json = nlohmann::json;

int NPoEConfig::layers_for_expert(int j) const {
  if (expert_layers_per_expert.empty()) return expert_layers;
  return expert_layers_per_expert[static_cast<std::size_t>(j)];
}

std::vector<TriggerSpec> NPoEConfig::resolved_pretrain_triggers() const {
  std::vector<TriggerSpec> pool = pretrain_triggers;
  if (pool.empty())
    pool = {default_badnet(), default_insertsent(), default_syntactic(), default_stylistic()};
  // Cycle (or truncate) the configured list to one trigger per expert.
  std::vector<TriggerSpec> out;
  for (int j = 0; j < num_experts; ++j)
    out.push_back(pool[static_cast<std::size_t>(j) % pool.size()]);
  return out;
}

void NPoEConfig::validate() const {
  if (num_experts < 1) throw std::invalid_argument("config: num_experts must be >= 1");
  if (expert_layers < 0 || gate_layers < 0 || main_layers < 0)
    throw std::invalid_argument("config: layer counts must be >= 0");
  if (!expert_layers_per_expert.empty() &&
      static_cast<int>(expert_layers_per_expert.size()) != num_experts)
    throw std::invalid_argument("config: per-expert layer list must match num_experts");
  for (int l : expert_layers_per_expert)
    if (l < 0) throw std::invalid_argument("config: per-expert layer counts must be >= 0");
  if (main_embedding_dim < 1 || expert_embedding_dim < 1 || gate_embedding_dim < 1 ||
      main_hidden_dim < 1 || expert_hidden_dim < 1 || gate_hidden_dim < 1)
    throw std::invalid_argument("config: dimensions must be >= 1");
  if (beta < 0.0) throw std::invalid_argument("config: beta must be >= 0");
  if (alpha < 0.0) throw std::invalid_argument("config: alpha must be >= 0");
  if (!(dropout >= 0.0 && dropout < 1.0))
    throw std::invalid_argument("config: dropout must be in [0,1)");
  if (epochs < 0) throw std::invalid_argument("config: epochs must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("config: batch_size must be >= 1");
  if (lr_main <= 0.0 || lr_experts <= 0.0 || lr_gate <= 0.0)
    throw std::invalid_argument("config: learning rates must be positive");
  if (pretrain_epochs < 0) throw std::invalid_argument("config: pretrain_epochs must be >= 0");
  if (!(pretrain_fraction > 0.0 && pretrain_fraction < 1.0))
    throw std::invalid_argument("config: pretrain_fraction must be in (0,1)");
  if (pretrain_lr <= 0.0) throw std::invalid_argument("config: pretrain_lr must be positive");
  if (min_count < 1) throw std::invalid_argument("config: min_count must be >= 1");
  for (const auto& t : pretrain_triggers) t.validate();
}

namespace {

NetworkSpec make_main_spec(const NPoEConfig& cfg, int vocab_size, int num_classes) {
  NetworkSpec s;
  s.vocab_size = vocab_size;
  s.embedding_dim = cfg.main_embedding_dim;
  s.hidden.assign(static_cast<std::size_t>(cfg.main_layers), cfg.main_hidden_dim);
  s.output_dim = num_classes;
  s.dropout = cfg.dropout;
  return s;
}

NetworkSpec make_expert_spec(const NPoEConfig& cfg, int vocab_size, int num_classes, int j) {
  NetworkSpec s;
  s.vocab_size = vocab_size;
  s.embedding_dim = cfg.expert_embedding_dim;
  s.hidden.assign(static_cast<std::size_t>(cfg.layers_for_expert(j)), cfg.expert_hidden_dim);
  s.output_dim = num_classes;
  s.dropout = 0.0;  // trigger trap stays deterministic
  return s;
}

NetworkSpec make_gate_spec(const NPoEConfig& cfg, int vocab_size) {
  NetworkSpec s;
  s.vocab_size = vocab_size;
  s.embedding_dim = cfg.gate_embedding_dim;
  s.hidden.assign(static_cast<std::size_t>(cfg.gate_layers), cfg.gate_hidden_dim);
  s.output_dim = cfg.num_experts;
  s.dropout = 0.0;
  return s;
}

}  // namespace

NPoEModel init_model(const NPoEConfig& cfg, const Vocabulary& vocab, int num_classes) {
  cfg.validate();
  if (num_classes < 2) throw std::invalid_argument("init_model: need >= 2 classes");

  NPoEModel m;
  m.vocab = vocab;
  m.num_classes = num_classes;
  m.gate_frozen_uniform = cfg.gate_frozen_uniform;

  m.main.spec = make_main_spec(cfg, vocab.size(), num_classes);
  m.main.params = init_params(m.main.spec, derive_seed(cfg.seed, "init_main"));

  for (int j = 0; j < cfg.num_experts; ++j) {
    SubModel e;
    e.spec = make_expert_spec(cfg, vocab.size(), num_classes, j);
    e.params = init_params(e.spec, derive_seed(cfg.seed, "init_expert", static_cast<std::uint64_t>(j)));
    m.experts.push_back(std::move(e));
  }

  m.gate.spec = make_gate_spec(cfg, vocab.size());
  m.gate.params = init_params(m.gate.spec, derive_seed(cfg.seed, "init_gate"));
  return m;
}

MoEOutput moe_combine(const std::vector<std::vector<double>>& expert_log_probs,
                      std::span<const double> gate_logits) {
  if (expert_log_probs.empty())
    throw std::invalid_argument("moe_combine: no experts");
  if (expert_log_probs.size() != gate_logits.size())
    throw std::invalid_argument("moe_combine: expert count does not match gate output");
  const std::size_t num_classes = expert_log_probs[0].size();
  for (const auto& row : expert_log_probs)
    if (row.size() != num_classes) throw std::invalid_argument("moe_combine: ragged expert rows");

  MoEOutput out;
  out.expert_log_probs = expert_log_probs;
  out.gate_weights = softmax(gate_logits);
  out.q.assign(num_classes, 0.0);
  for (std::size_t j = 0; j < expert_log_probs.size(); ++j)
    for (std::size_t c = 0; c < num_classes; ++c)
      out.q[c] += out.gate_weights[j] * expert_log_probs[j][c];
  return out;
}

std::vector<double> poe_combine(std::span<const double> r, std::span<const double> q,
                                double beta) {
  if (r.size() != q.size()) throw std::invalid_argument("poe_combine: length mismatch");
  std::vector<double> s(r.size());
  for (std::size_t c = 0; c < r.size(); ++c)
    s[c] = std::log(std::max(r[c], kLogClamp)) + beta * q[c];
  return softmax(s);
}

std::vector<double> main_probabilities(const NPoEModel& model, std::span<const int> ids) {
  const ForwardTrace t = forward(model.main.params, model.main.spec, ids, nullptr);
  return softmax(t.logits);
}

MoEOutput moe_forward(const NPoEModel& model, std::span<const int> ids) {
  std::vector<std::vector<double>> log_probs;
  log_probs.reserve(model.experts.size());
  for (const auto& e : model.experts) {
    const ForwardTrace t = forward(e.params, e.spec, ids, nullptr);
    log_probs.push_back(log_softmax(t.logits));
  }
  if (model.gate_frozen_uniform) {
    MoEOutput out;
    out.expert_log_probs = std::move(log_probs);
    const std::size_t k = model.experts.size();
    out.gate_weights.assign(k, 1.0 / static_cast<double>(k));
    out.q.assign(out.expert_log_probs[0].size(), 0.0);
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t c = 0; c < out.q.size(); ++c)
        out.q[c] += out.gate_weights[j] * out.expert_log_probs[j][c];
    return out;
  }
  const ForwardTrace g = forward(model.gate.params, model.gate.spec, ids, nullptr);
  return moe_combine(log_probs, g.logits);
}

Gradients zero_gradients(const NPoEModel& model) {
  Gradients g;
  g.main = zeros_like(model.main.params);
  for (const auto& e : model.experts) g.experts.push_back(zeros_like(e.params));
  g.gate = zeros_like(model.gate.params);
  return g;
}

void fill_zero(Gradients& grads) {
  fill_zero(grads.main);
  for (auto& e : grads.experts) fill_zero(e);
  fill_zero(grads.gate);
}

namespace {

// d/dlogits of a function whose gradient w.r.t. log(max(p,clamp)) is `gs`,
// where p = softmax(logits). Clamped entries pass no gradient.
std::vector<double> through_clamped_log_softmax(const std::vector<double>& p,
                                                const std::vector<double>& gs) {
  double live_sum = 0.0;
  for (std::size_t c = 0; c < p.size(); ++c)
    if (p[c] > kLogClamp) live_sum += gs[c];
  std::vector<double> out(p.size());
  for (std::size_t d = 0; d < p.size(); ++d)
    out[d] = (p[d] > kLogClamp ? gs[d] : 0.0) - p[d] * live_sum;
  return out;
}

}  // namespace

LossBreakdown npoe_loss_terms(const std::vector<EncodedExample>& data, std::span<const int> batch,
                              const NPoEModel& model, const NPoEConfig& cfg,
                              std::uint64_t dropout_seed, Gradients* grads, bool include_ce,
                              bool include_kl) {
  if (batch.empty()) throw std::invalid_argument("npoe_loss: empty batch");
  const int num_classes = model.num_classes;
  const std::size_t k = model.experts.size();
  const bool use_poe = cfg.beta != 0.0;
  const int passes = cfg.rdrop_enabled ? 2 : 1;
  const double alpha = cfg.effective_alpha();
  const double inv_n = 1.0 / static_cast<double>(batch.size());

  Rng drop_rng(dropout_seed);
  LossBreakdown lb;

  for (const int idx : batch) {
    const EncodedExample& ex = data[static_cast<std::size_t>(idx)];
    if (ex.label < 0 || ex.label >= num_classes)
      throw std::invalid_argument("npoe_loss: label out of range");
    const std::size_t y = static_cast<std::size_t>(ex.label);

    // Trigger-only mixture, one deterministic pass.
    std::vector<ForwardTrace> expert_traces;
    std::vector<std::vector<double>> expert_log_probs;
    std::vector<double> gate_weights;
    ForwardTrace gate_trace;
    std::vector<double> q;
    if (use_poe) {
      expert_traces.reserve(k);
      expert_log_probs.reserve(k);
      for (const auto& e : model.experts) {
        expert_traces.push_back(forward(e.params, e.spec, ex.ids, nullptr));
        expert_log_probs.push_back(log_softmax(expert_traces.back().logits));
      }
      if (model.gate_frozen_uniform) {
        gate_weights.assign(k, 1.0 / static_cast<double>(k));
      } else {
        gate_trace = forward(model.gate.params, model.gate.spec, ex.ids, nullptr);
        gate_weights = softmax(gate_trace.logits);
      }
      q.assign(static_cast<std::size_t>(num_classes), 0.0);
      for (std::size_t j = 0; j < k; ++j)
        for (int c = 0; c < num_classes; ++c)
          q[static_cast<std::size_t>(c)] += gate_weights[j] * expert_log_probs[j][static_cast<std::size_t>(c)];
    }

    // Main model, `passes` stochastic passes sharing one dropout stream.
    std::vector<ForwardTrace> main_traces;
    std::vector<std::vector<double>> r;  // main softmax per pass
    std::vector<std::vector<double>> p;  // product-composed distribution per pass
    double ce_i = 0.0;
    for (int a = 0; a < passes; ++a) {
      main_traces.push_back(forward(model.main.params, model.main.spec, ex.ids, &drop_rng));
      r.push_back(softmax(main_traces.back().logits));
      if (use_poe) {
        std::vector<double> s(static_cast<std::size_t>(num_classes));
        for (int c = 0; c < num_classes; ++c)
          s[static_cast<std::size_t>(c)] =
              std::log(std::max(r.back()[static_cast<std::size_t>(c)], kLogClamp)) +
              cfg.beta * q[static_cast<std::size_t>(c)];
        ce_i += cross_entropy_log(log_softmax(s), ex.label);
        p.push_back(softmax(s));
      } else {
        ce_i += cross_entropy_log(log_softmax(main_traces.back().logits), ex.label);
        p.push_back(r.back());
      }
    }
    ce_i /= static_cast<double>(passes);

    double kl_i = 0.0;
    if (passes == 2) kl_i = 0.5 * (kl_divergence(r[0], r[1]) + kl_divergence(r[1], r[0]));

    lb.ce += ce_i * inv_n;
    lb.kl += kl_i * inv_n;

    if (grads == nullptr) continue;

    // Gradient w.r.t. the composed logits s^a (or main logits when beta = 0).
    std::vector<std::vector<double>> g_main_logits(
        static_cast<std::size_t>(passes), std::vector<double>(static_cast<std::size_t>(num_classes), 0.0));
    std::vector<double> gq(static_cast<std::size_t>(num_classes), 0.0);

    if (include_ce) {
      const double w_ce = inv_n / static_cast<double>(passes);
      for (int a = 0; a < passes; ++a) {
        std::vector<double> gs(static_cast<std::size_t>(num_classes));
        for (int c = 0; c < num_classes; ++c)
          gs[static_cast<std::size_t>(c)] = p[static_cast<std::size_t>(a)][static_cast<std::size_t>(c)] * w_ce;
        gs[y] -= w_ce;

        if (use_poe) {
          const auto gm = through_clamped_log_softmax(r[static_cast<std::size_t>(a)], gs);
          for (int c = 0; c < num_classes; ++c) {
            g_main_logits[static_cast<std::size_t>(a)][static_cast<std::size_t>(c)] += gm[static_cast<std::size_t>(c)];
            gq[static_cast<std::size_t>(c)] += cfg.beta * gs[static_cast<std::size_t>(c)];
          }
        } else {
          for (int c = 0; c < num_classes; ++c)
            g_main_logits[static_cast<std::size_t>(a)][static_cast<std::size_t>(c)] += gs[static_cast<std::size_t>(c)];
        }
      }
    }

    if (include_kl && passes == 2 && alpha > 0.0) {
      const double w_kl = alpha * inv_n * 0.5;
      const auto& r1 = r[0];
      const auto& r2 = r[1];
      auto lc = [](double x) { return std::log(std::max(x, kLogClamp)); };

      // KL(r1||r2) w.r.t. both passes' logits.
      {
        std::vector<double> t(static_cast<std::size_t>(num_classes));
        double dot = 0.0;
        for (int c = 0; c < num_classes; ++c) {
          const std::size_t cc = static_cast<std::size_t>(c);
          t[cc] = (lc(r1[cc]) - lc(r2[cc])) + (r1[cc] > kLogClamp ? 1.0 : 0.0);
          dot += r1[cc] * t[cc];
        }
        double live = 0.0;
        for (int c = 0; c < num_classes; ++c)
          if (r2[static_cast<std::size_t>(c)] > kLogClamp) live += r1[static_cast<std::size_t>(c)];
        for (int c = 0; c < num_classes; ++c) {
          const std::size_t cc = static_cast<std::size_t>(c);
          g_main_logits[0][cc] += w_kl * r1[cc] * (t[cc] - dot);
          g_main_logits[1][cc] -= w_kl * ((r2[cc] > kLogClamp ? r1[cc] : 0.0) - r2[cc] * live);
        }
      }
      // KL(r2||r1), symmetric.
      {
        std::vector<double> t(static_cast<std::size_t>(num_classes));
        double dot = 0.0;
        for (int c = 0; c < num_classes; ++c) {
          const std::size_t cc = static_cast<std::size_t>(c);
          t[cc] = (lc(r2[cc]) - lc(r1[cc])) + (r2[cc] > kLogClamp ? 1.0 : 0.0);
          dot += r2[cc] * t[cc];
        }
        double live = 0.0;
        for (int c = 0; c < num_classes; ++c)
          if (r1[static_cast<std::size_t>(c)] > kLogClamp) live += r2[static_cast<std::size_t>(c)];
        for (int c = 0; c < num_classes; ++c) {
          const std::size_t cc = static_cast<std::size_t>(c);
          g_main_logits[1][cc] += w_kl * r2[cc] * (t[cc] - dot);
          g_main_logits[0][cc] -= w_kl * ((r1[cc] > kLogClamp ? r2[cc] : 0.0) - r1[cc] * live);
        }
      }
    }

    for (int a = 0; a < passes; ++a)
      backward(model.main.params, model.main.spec, main_traces[static_cast<std::size_t>(a)],
               g_main_logits[static_cast<std::size_t>(a)], grads->main, 1.0);

    if (use_poe && include_ce) {
      // Through q into each expert's log-softmax...
      double gq_sum = 0.0;
      for (const double v : gq) gq_sum += v;
      for (std::size_t j = 0; j < k; ++j) {
        const auto b_j = softmax(expert_traces[j].logits);
        std::vector<double> ge(static_cast<std::size_t>(num_classes));
        for (int c = 0; c < num_classes; ++c) {
          const std::size_t cc = static_cast<std::size_t>(c);
          ge[cc] = gate_weights[j] * (gq[cc] - b_j[cc] * gq_sum);
        }
        backward(model.experts[j].params, model.experts[j].spec, expert_traces[j], ge,
                 grads->experts[j], 1.0);
      }
      // ...and through the gate softmax.
      if (!model.gate_frozen_uniform) {
        std::vector<double> gw(k, 0.0);
        double mix = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
          for (int c = 0; c < num_classes; ++c)
            gw[j] += gq[static_cast<std::size_t>(c)] * expert_log_probs[j][static_cast<std::size_t>(c)];
          mix += gate_weights[j] * gw[j];
        }
        std::vector<double> ga(k);
        for (std::size_t j = 0; j < k; ++j) ga[j] = gate_weights[j] * (gw[j] - mix);
        backward(model.gate.params, model.gate.spec, gate_trace, ga, grads->gate, 1.0);
      }
    }
  }

  lb.total = (include_ce ? lb.ce : 0.0) + alpha * (include_kl ? lb.kl : 0.0);
  if (!std::isfinite(lb.total)) throw std::runtime_error("npoe_loss: non-finite loss");
  return lb;
}

LossBreakdown npoe_loss(const std::vector<EncodedExample>& data, std::span<const int> batch,
                        const NPoEModel& model, const NPoEConfig& cfg,
                        std::uint64_t dropout_seed, Gradients* grads) {
  return npoe_loss_terms(data, batch, model, cfg, dropout_seed, grads, true, true);
}

namespace {

constexpr int kPretrainBatch = 32;

// Shared stack = embedding plus every hidden linear layer; the task head
// (last weight/bias pair) stays out.
void copy_shared_arrays(const ParamSet& from, ParamSet& to) {
  if (from.arrays.size() != to.arrays.size())
    throw std::logic_error("copy_shared_arrays: layer count mismatch");
  for (std::size_t a = 0; a + 2 < from.arrays.size(); ++a) to.arrays[a].data = from.arrays[a].data;
}

double train_supervised(ParamSet& params, const NetworkSpec& spec,
                        const std::vector<EncodedExample>& data, int epochs, double lr,
                        std::uint64_t seed) {
  OptimizerState opt = make_optimizer(params, AdamConfig{.lr = lr});
  Rng shuffle_rng(derive_seed(seed, "shuffle"));
  std::vector<int> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  ParamSet grads = zeros_like(params);

  double last_epoch_loss = 0.0;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += kPretrainBatch) {
      const std::size_t end = std::min(order.size(), start + kPretrainBatch);
      const double inv = 1.0 / static_cast<double>(end - start);
      fill_zero(grads);
      double batch_loss = 0.0;
      for (std::size_t i = start; i < end; ++i) {
        const EncodedExample& ex = data[static_cast<std::size_t>(order[i])];
        const ForwardTrace t = forward(params, spec, ex.ids, nullptr);
        batch_loss += cross_entropy_log(log_softmax(t.logits), ex.label);
        const auto g = cross_entropy_softmax_grad(softmax(t.logits), ex.label);
        backward(params, spec, t, g, grads, inv);
      }
      optimizer_step(params, grads, opt);
      epoch_loss += batch_loss;
    }
    last_epoch_loss = epoch_loss / static_cast<double>(order.size());
  }
  return last_epoch_loss;
}

double binary_accuracy(const ParamSet& params, const NetworkSpec& spec,
                       const std::vector<EncodedExample>& data) {
  long correct = 0;
  for (const auto& ex : data) {
    const ForwardTrace t = forward(params, spec, ex.ids, nullptr);
    if (argmax_tie_low(t.logits) == ex.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace

PretrainReport pretrain_experts(NPoEModel& model, const PretrainSet& sets, int epochs, double lr,
                                std::uint64_t seed, const PretrainSet* heldout) {
  if (sets.per_expert.size() != model.experts.size())
    throw std::invalid_argument("pretrain_experts: need one pretrain set per expert");
  if (heldout && heldout->per_expert.size() != model.experts.size())
    throw std::invalid_argument("pretrain_experts: heldout set count mismatch");

  PretrainReport report;
  for (std::size_t j = 0; j < model.experts.size(); ++j) {
    SubModel& expert = model.experts[j];

    NetworkSpec bin_spec = expert.spec;
    bin_spec.output_dim = 2;
    ParamSet bin_params =
        init_params(bin_spec, derive_seed(seed, "binary_head", static_cast<std::uint64_t>(j)));
    copy_shared_arrays(expert.params, bin_params);

    const auto encoded = encode_dataset(sets.per_expert[j], model.vocab);
    report.final_train_loss.push_back(train_supervised(
        bin_params, bin_spec, encoded, epochs, lr, derive_seed(seed, "expert", static_cast<std::uint64_t>(j))));

    if (heldout) {
      const auto heldout_encoded = encode_dataset(heldout->per_expert[j], model.vocab);
      report.heldout_accuracy.push_back(binary_accuracy(bin_params, bin_spec, heldout_encoded));
    }

    // Keep the trained encoder/hidden stack, discard the binary head, attach a
    // freshly initialized task head.
    copy_shared_arrays(bin_params, expert.params);
    const ParamSet fresh =
        init_params(expert.spec, derive_seed(seed, "task_head", static_cast<std::uint64_t>(j)));
    const std::size_t n = expert.params.arrays.size();
    expert.params.arrays[n - 2].data = fresh.arrays[n - 2].data;
    expert.params.arrays[n - 1].data = fresh.arrays[n - 1].data;
  }
  return report;
}

void pretrain_gate(NPoEModel& model, const PretrainSet& sets, int epochs, double lr,
                   std::uint64_t seed) {
  if (sets.per_expert.size() != model.experts.size())
    throw std::invalid_argument("pretrain_gate: need one pretrain set per expert");

  // Routing task: poisoned examples of set j are labelled j.
  std::vector<EncodedExample> routing;
  for (std::size_t j = 0; j < sets.per_expert.size(); ++j)
    for (const auto& ex : sets.per_expert[j].examples)
      if (ex.is_poisoned) routing.push_back({model.vocab.encode(ex.tokens), static_cast<int>(j)});
  if (routing.empty()) throw std::invalid_argument("pretrain_gate: no poisoned examples");

  train_supervised(model.gate.params, model.gate.spec, routing, epochs, lr,
                   derive_seed(seed, "gate"));
}

TrainResult train(const PoisonedDataset& poisoned, const NPoEConfig& cfg,
                  const Dataset* clean_subset, const Dataset* heldout_clean) {
  cfg.validate();
  poisoned.dataset.validate();

  const Vocabulary vocab = build_vocabulary(poisoned.dataset, cfg.min_count);
  TrainResult result;
  result.model = init_model(cfg, vocab, poisoned.dataset.num_classes);
  NPoEModel& model = result.model;
  TrainState& state = result.state;

  if (cfg.pretrain_enabled && cfg.pretrain_epochs > 0) {
    if (clean_subset == nullptr)
      throw std::invalid_argument("train: pretraining enabled but no clean subset provided");
    const auto triggers = cfg.resolved_pretrain_triggers();
    const PretrainSet sets = make_pretrain_sets(*clean_subset, triggers, cfg.pretrain_fraction,
                                                derive_seed(cfg.seed, "pretrain_sets"));
    state.pretrain =
        pretrain_experts(model, sets, cfg.pretrain_epochs, cfg.pretrain_lr,
                         derive_seed(cfg.seed, "pretrain"));
    if (cfg.gate_pretrain_enabled)
      pretrain_gate(model, sets, cfg.pretrain_epochs, cfg.pretrain_lr,
                    derive_seed(cfg.seed, "pretrain_gate"));
  }

  const auto encoded = encode_dataset(poisoned.dataset, vocab);
  state.opt_main = make_optimizer(model.main.params, AdamConfig{.lr = cfg.lr_main});
  for (const auto& e : model.experts)
    state.opt_experts.push_back(make_optimizer(e.params, AdamConfig{.lr = cfg.lr_experts}));
  state.opt_gate = make_optimizer(model.gate.params, AdamConfig{.lr = cfg.lr_gate});

  Gradients grads = zero_gradients(model);
  Rng shuffle_rng(derive_seed(cfg.seed, "shuffle"));
  std::vector<int> order(encoded.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t n = encoded.size();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double ep_loss = 0.0, ep_ce = 0.0, ep_kl = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(n, start + static_cast<std::size_t>(cfg.batch_size));
      const std::span<const int> batch(order.data() + start, end - start);
      const std::uint64_t dropout_seed = derive_seed(
          cfg.seed, "dropout", static_cast<std::uint64_t>(epoch), batch_index);
      fill_zero(grads);
      const LossBreakdown lb = npoe_loss(encoded, batch, model, cfg, dropout_seed, &grads);

      optimizer_step(model.main.params, grads.main, state.opt_main);
      for (std::size_t j = 0; j < model.experts.size(); ++j)
        optimizer_step(model.experts[j].params, grads.experts[j], state.opt_experts[j]);
      if (!cfg.gate_frozen_uniform)
        optimizer_step(model.gate.params, grads.gate, state.opt_gate);

      const double w = static_cast<double>(end - start);
      ep_loss += lb.total * w;
      ep_ce += lb.ce * w;
      ep_kl += lb.kl * w;
      ++batch_index;
    }

    EpochLog entry;
    entry.epoch = epoch;
    entry.loss = ep_loss / static_cast<double>(n);
    entry.ce = ep_ce / static_cast<double>(n);
    entry.kl = ep_kl / static_cast<double>(n);
    if (heldout_clean != nullptr) entry.clean_acc = accuracy(model, *heldout_clean);
    state.log.push_back(entry);
    state.epochs_completed = epoch + 1;
  }
  return result;
}

int argmax_tie_low(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("argmax_tie_low: empty input");
  int best = 0;
  for (int i = 1; i < static_cast<int>(values.size()); ++i)
    if (values[static_cast<std::size_t>(i)] > values[static_cast<std::size_t>(best)]) best = i;
  return best;
}

Prediction predict(const NPoEModel& model, const Dataset& examples) {
  Prediction out;
  out.labels.reserve(examples.size());
  out.probs.reserve(examples.size());
  for (const auto& ex : examples.examples) {
    const auto ids = model.vocab.encode(ex.tokens);
    auto probs = main_probabilities(model, ids);
    out.labels.push_back(argmax_tie_low(probs));
    out.probs.push_back(std::move(probs));
  }
  return out;
}

double accuracy(const NPoEModel& model, const Dataset& examples) {
  const Prediction pred = predict(model, examples);
  long correct = 0;
  for (std::size_t i = 0; i < examples.size(); ++i)
    if (pred.labels[i] == examples.examples[i].label) ++correct;
  return static_cast<double>(correct) / static_cast<double>(examples.size());
}

// ---- checkpoint serialization ----

void to_json(json& j, const TriggerSpec& t) {
  j = json{{"name", t.name}, {"kind", to_string(t.kind)}, {"payload", t.payload}};
}

void from_json(const json& j, TriggerSpec& t) {
  t.name = j.at("name").get<std::string>();
  t.kind = trigger_kind_from_string(j.at("kind").get<std::string>());
  t.payload = j.at("payload").get<std::vector<std::string>>();
}

void to_json(json& j, const NPoEConfig& c) {
  j = json{{"num_experts", c.num_experts},
           {"expert_layers", c.expert_layers},
           {"gate_layers", c.gate_layers},
           {"main_layers", c.main_layers},
           {"expert_layers_per_expert", c.expert_layers_per_expert},
           {"main_embedding_dim", c.main_embedding_dim},
           {"expert_embedding_dim", c.expert_embedding_dim},
           {"gate_embedding_dim", c.gate_embedding_dim},
           {"main_hidden_dim", c.main_hidden_dim},
           {"expert_hidden_dim", c.expert_hidden_dim},
           {"gate_hidden_dim", c.gate_hidden_dim},
           {"beta", c.beta},
           {"alpha", c.alpha},
           {"rdrop_enabled", c.rdrop_enabled},
           {"pretrain_enabled", c.pretrain_enabled},
           {"gate_pretrain_enabled", c.gate_pretrain_enabled},
           {"gate_frozen_uniform", c.gate_frozen_uniform},
           {"dropout", c.dropout},
           {"epochs", c.epochs},
           {"batch_size", c.batch_size},
           {"lr_main", c.lr_main},
           {"lr_experts", c.lr_experts},
           {"lr_gate", c.lr_gate},
           {"pretrain_epochs", c.pretrain_epochs},
           {"pretrain_fraction", c.pretrain_fraction},
           {"pretrain_lr", c.pretrain_lr},
           {"min_count", c.min_count},
           {"seed", c.seed},
           {"pretrain_triggers", c.pretrain_triggers}};
}

void from_json(const json& j, NPoEConfig& c) {
  j.at("num_experts").get_to(c.num_experts);
  j.at("expert_layers").get_to(c.expert_layers);
  j.at("gate_layers").get_to(c.gate_layers);
  j.at("main_layers").get_to(c.main_layers);
  j.at("expert_layers_per_expert").get_to(c.expert_layers_per_expert);
  j.at("main_embedding_dim").get_to(c.main_embedding_dim);
  j.at("expert_embedding_dim").get_to(c.expert_embedding_dim);
  j.at("gate_embedding_dim").get_to(c.gate_embedding_dim);
  j.at("main_hidden_dim").get_to(c.main_hidden_dim);
  j.at("expert_hidden_dim").get_to(c.expert_hidden_dim);
  j.at("gate_hidden_dim").get_to(c.gate_hidden_dim);
  j.at("beta").get_to(c.beta);
  j.at("alpha").get_to(c.alpha);
  j.at("rdrop_enabled").get_to(c.rdrop_enabled);
  j.at("pretrain_enabled").get_to(c.pretrain_enabled);
  j.at("gate_pretrain_enabled").get_to(c.gate_pretrain_enabled);
  j.at("gate_frozen_uniform").get_to(c.gate_frozen_uniform);
  j.at("dropout").get_to(c.dropout);
  j.at("epochs").get_to(c.epochs);
  j.at("batch_size").get_to(c.batch_size);
  j.at("lr_main").get_to(c.lr_main);
  j.at("lr_experts").get_to(c.lr_experts);
  j.at("lr_gate").get_to(c.lr_gate);
  j.at("pretrain_epochs").get_to(c.pretrain_epochs);
  j.at("pretrain_fraction").get_to(c.pretrain_fraction);
  j.at("pretrain_lr").get_to(c.pretrain_lr);
  j.at("min_count").get_to(c.min_count);
  j.at("seed").get_to(c.seed);
  j.at("pretrain_triggers").get_to(c.pretrain_triggers);
}

namespace {

void save_vocab(const Vocabulary& vocab, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write vocabulary: " + path.string());
  for (int id = 2; id < vocab.size(); ++id) out << vocab.id_to_token[static_cast<std::size_t>(id)] << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

Vocabulary load_vocab(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open vocabulary: " + path.string());
  Vocabulary vocab;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    vocab.token_to_id.emplace(line, vocab.size());
    vocab.id_to_token.push_back(line);
  }
  return vocab;
}

}  // namespace

void save_model(const std::filesystem::path& dir, const NPoEModel& model, const NPoEConfig& cfg) {
  std::filesystem::create_directories(dir);

  json manifest;
  manifest["format"] = "npoe-checkpoint";
  manifest["version"] = 1;
  manifest["num_classes"] = model.num_classes;
  manifest["gate_frozen_uniform"] = model.gate_frozen_uniform;
  manifest["config"] = cfg;
  manifest["vocab_file"] = "vocab.txt";

  json submodels = json::array();
  save_params(dir / "main.params", model.main.spec, model.main.params);
  submodels.push_back({{"role", "main"}, {"file", "main.params"}});
  for (std::size_t j = 0; j < model.experts.size(); ++j) {
    const std::string file = "expert_" + std::to_string(j) + ".params";
    save_params(dir / file, model.experts[j].spec, model.experts[j].params);
    submodels.push_back({{"role", "expert-" + std::to_string(j)}, {"file", file}});
  }
  save_params(dir / "gate.params", model.gate.spec, model.gate.params);
  submodels.push_back({{"role", "gate"}, {"file", "gate.params"}});
  manifest["submodels"] = submodels;

  save_vocab(model.vocab, dir / "vocab.txt");

  std::ofstream out(dir / "manifest.json", std::ios::binary);
  if (!out) throw std::runtime_error("cannot write manifest.json in " + dir.string());
  out << manifest.dump(2) << '\n';
}

LoadedModel load_model(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json", std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint manifest in " + dir.string());
  json manifest = json::parse(in);
  if (manifest.at("format").get<std::string>() != "npoe-checkpoint")
    throw std::runtime_error("not an npoe checkpoint: " + dir.string());

  LoadedModel lm;
  lm.config = manifest.at("config").get<NPoEConfig>();
  lm.model.num_classes = manifest.at("num_classes").get<int>();
  lm.model.gate_frozen_uniform = manifest.at("gate_frozen_uniform").get<bool>();
  lm.model.vocab = load_vocab(dir / manifest.at("vocab_file").get<std::string>());

  for (const auto& entry : manifest.at("submodels")) {
    const std::string role = entry.at("role").get<std::string>();
    LoadedParams lp = load_params(dir / entry.at("file").get<std::string>());
    SubModel sm{std::move(lp.spec), std::move(lp.params)};
    if (role == "main") {
      lm.model.main = std::move(sm);
    } else if (role == "gate") {
      lm.model.gate = std::move(sm);
    } else if (role.rfind("expert-", 0) == 0) {
      lm.model.experts.push_back(std::move(sm));
    } else {
      throw std::runtime_error("unknown submodel role: " + role);
    }
  }
  if (lm.model.main.spec.vocab_size != lm.model.vocab.size())
    throw std::runtime_error("checkpoint vocabulary does not match parameter shapes");
  return lm;
}

}  // namespace npoe
