// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "npoe/attacks.hpp"
#include "npoe/corpus.hpp"
#include "npoe/nn.hpp"

namespace npoe {

/// Hyperparameters for the gated trigger-only mixture, its product
/// composition with the main model, and the joint training loop.
struct NPoEConfig {
  int num_experts = 4;
  int expert_layers = 1;
  int gate_layers = 1;
  int main_layers = 2;
  std::vector<int> expert_layers_per_expert;  // optional per-expert override

  int main_embedding_dim = 32;
  int expert_embedding_dim = 16;
  int gate_embedding_dim = 16;
  int main_hidden_dim = 64;
  int expert_hidden_dim = 32;
  int gate_hidden_dim = 32;

  double beta = 1.0;   // weight of the trigger-only mixture inside the product
  double alpha = 1.0;  // weight of the consistency (R-drop) term
  bool rdrop_enabled = true;
  bool pretrain_enabled = true;
  bool gate_pretrain_enabled = false;
  bool gate_frozen_uniform = false;

  double dropout = 0.3;
  int epochs = 10;
  int batch_size = 32;
  double lr_main = 1e-3;
  double lr_experts = 3e-3;
  double lr_gate = 3e-3;

  int pretrain_epochs = 20;
  double pretrain_fraction = 0.5;
  double pretrain_lr = 5e-3;
  int min_count = 1;
  std::uint64_t seed = 42;

  // Defender-chosen triggers used only to build pretraining sets; when empty,
  // the four default trigger kinds are cycled to num_experts entries.
  std::vector<TriggerSpec> pretrain_triggers;

  double effective_alpha() const { return rdrop_enabled ? alpha : 0.0; }
  int layers_for_expert(int j) const;
  std::vector<TriggerSpec> resolved_pretrain_triggers() const;
  void validate() const;
};

struct SubModel {
  NetworkSpec spec;
  ParamSet params;
};

struct NPoEModel {
  SubModel main;
  std::vector<SubModel> experts;
  SubModel gate;  // independent encoder, output = one logit per expert
  Vocabulary vocab;
  int num_classes = 0;
  bool gate_frozen_uniform = false;
};

NPoEModel init_model(const NPoEConfig& cfg, const Vocabulary& vocab, int num_classes);

/// Gate-weighted sum of expert log-probabilities.
struct MoEOutput {
  std::vector<double> q;                              // length C, log-domain mixture
  std::vector<double> gate_weights;                   // softmax of gate logits
  std::vector<std::vector<double>> expert_log_probs;  // k x C
};

MoEOutput moe_combine(const std::vector<std::vector<double>>& expert_log_probs,
                      std::span<const double> gate_logits);

/// softmax(log r + beta * q); r is clamped before the log.
std::vector<double> poe_combine(std::span<const double> r, std::span<const double> q,
                                double beta);

// Inference-time forwards (no dropout).
std::vector<double> main_probabilities(const NPoEModel& model, std::span<const int> ids);
MoEOutput moe_forward(const NPoEModel& model, std::span<const int> ids);

struct Gradients {
  ParamSet main;
  std::vector<ParamSet> experts;
  ParamSet gate;
};
Gradients zero_gradients(const NPoEModel& model);
void fill_zero(Gradients& grads);

struct LossBreakdown {
  double total = 0.0;
  double ce = 0.0;
  double kl = 0.0;
};

/// Joint objective over one mini-batch: experts and gate run once without
/// dropout; the main model runs twice with independent dropout masks when the
/// consistency term is on. Loss per example is
///   mean_a CE(p_a) + alpha * (KL(r1||r2) + KL(r2||r1)) / 2,
/// averaged over the batch. Gradients reach the experts and gate only through
/// the CE term. Dropout masks derive solely from `dropout_seed`.
LossBreakdown npoe_loss(const std::vector<EncodedExample>& data, std::span<const int> batch,
                        const NPoEModel& model, const NPoEConfig& cfg,
                        std::uint64_t dropout_seed, Gradients* grads);

/// Test hook: same computation with either loss term switched off.
LossBreakdown npoe_loss_terms(const std::vector<EncodedExample>& data, std::span<const int> batch,
                              const NPoEModel& model, const NPoEConfig& cfg,
                              std::uint64_t dropout_seed, Gradients* grads, bool include_ce,
                              bool include_kl);

struct PretrainReport {
  std::vector<double> final_train_loss;  // per expert
  std::vector<double> heldout_accuracy;  // per expert; empty when no heldout given
};

/// Trains each expert's encoder and hidden stack on its binary
/// trigger-identification set through a temporary 2-way head; the head is then
/// discarded and a freshly initialized task head attached. The gate is untouched.
PretrainReport pretrain_experts(NPoEModel& model, const PretrainSet& sets, int epochs, double lr,
                                std::uint64_t seed, const PretrainSet* heldout = nullptr);

/// Optional mode: trains the gate to route poisoned pretraining examples to
/// the expert whose trigger produced them.
void pretrain_gate(NPoEModel& model, const PretrainSet& sets, int epochs, double lr,
                   std::uint64_t seed);

struct EpochLog {
  int epoch = 0;
  double loss = 0.0;
  double ce = 0.0;
  double kl = 0.0;
  std::optional<double> clean_acc;
};

struct TrainState {
  OptimizerState opt_main;
  std::vector<OptimizerState> opt_experts;
  OptimizerState opt_gate;
  int epochs_completed = 0;
  std::vector<EpochLog> log;
  PretrainReport pretrain;
};

struct TrainResult {
  NPoEModel model;
  TrainState state;
};

/// Full pipeline: vocabulary build, model init, optional expert pretraining
/// (requires clean_subset), then shuffled mini-batch training of the joint
/// objective. Deterministic given cfg.seed.
TrainResult train(const PoisonedDataset& poisoned, const NPoEConfig& cfg,
                  const Dataset* clean_subset = nullptr, const Dataset* heldout_clean = nullptr);

struct Prediction {
  std::vector<int> labels;
  std::vector<std::vector<double>> probs;
};

/// Main model alone, no dropout; ties break toward the smaller class index.
Prediction predict(const NPoEModel& model, const Dataset& examples);
int argmax_tie_low(std::span<const double> values);
double accuracy(const NPoEModel& model, const Dataset& examples);

// Checkpoint directory: one parameter file per sub-model plus manifest.json
// (roles, config, class count) and vocab.txt.
void save_model(const std::filesystem::path& dir, const NPoEModel& model, const NPoEConfig& cfg);
struct LoadedModel {
  NPoEModel model;
  NPoEConfig config;
};
LoadedModel load_model(const std::filesystem::path& dir);

}  // namespace npoe
