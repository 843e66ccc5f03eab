// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "npoe/rng.hpp"

namespace npoe {

// Log arguments are clamped here whenever a probability is logged; keeps
// one-hot distributions finite without changing well-conditioned values.
inline constexpr double kLogClamp = 1e-12;

enum class Activation { Relu, Tanh };
std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

/// Mean-pooled embedding bag followed by a fully connected stack.
struct NetworkSpec {
  int vocab_size = 2;
  int embedding_dim = 16;
  std::vector<int> hidden;  // widths; may be empty (linear head on the bag)
  int output_dim = 2;
  double dropout = 0.0;
  Activation activation = Activation::Relu;

  void validate() const;
};

struct ParamArray {
  std::string name;
  int rows = 0;
  int cols = 0;
  std::vector<double> data;  // row-major

  double& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  double at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
};

struct ParamSet {
  std::vector<ParamArray> arrays;
  std::uint64_t init_seed = 0;

  ParamArray& find(std::string_view name);
  const ParamArray& find(std::string_view name) const;
  std::size_t scalar_count() const;
};

// Layout: "embedding" [vocab x dim], then per linear layer l: "w<l>" [in x out]
// and "b<l>" [out]. Weights uniform in +-1/sqrt(fan_in), biases zero, the
// embedding table uniform in +-1.
ParamSet init_params(const NetworkSpec& spec, std::uint64_t seed);
ParamSet zeros_like(const ParamSet& params);
void fill_zero(ParamSet& params);

struct ForwardTrace {
  std::vector<int> token_ids;
  std::vector<double> pooled;
  std::vector<std::vector<double>> pre;   // hidden pre-activations
  std::vector<std::vector<double>> act;   // post-activation, pre-dropout
  std::vector<std::vector<double>> post;  // layer outputs fed forward
  std::vector<std::vector<double>> keep;  // dropout scale per unit; empty when off
  std::vector<double> logits;
};

/// Empty token lists are allowed and pool to the zero vector. When a dropout
/// rng is supplied, inverted-dropout masks are drawn per hidden unit in layer
/// order (kept with probability 1-p, scaled by 1/(1-p)).
ForwardTrace forward(const ParamSet& params, const NetworkSpec& spec,
                     std::span<const int> token_ids, Rng* dropout_rng = nullptr);

/// Accumulates scale * dLoss/dParams into `grads` given dLoss/dLogits.
void backward(const ParamSet& params, const NetworkSpec& spec, const ForwardTrace& trace,
              std::span<const double> dlogits, ParamSet& grads, double scale = 1.0);

std::vector<double> softmax(std::span<const double> logits);
std::vector<double> log_softmax(std::span<const double> logits);

double cross_entropy(std::span<const double> probs, int label);
double cross_entropy_log(std::span<const double> log_probs, int label);
/// d(CE o softmax)/dlogits = p - onehot(label).
std::vector<double> cross_entropy_softmax_grad(std::span<const double> probs, int label);

double kl_divergence(std::span<const double> p, std::span<const double> q);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimizerState {
  AdamConfig cfg;
  long step = 0;
  ParamSet m;
  ParamSet v;
};

OptimizerState make_optimizer(const ParamSet& params, const AdamConfig& cfg);
/// Bias-corrected adaptive-moment update. Throws on non-finite gradients,
/// naming the offending array.
void optimizer_step(ParamSet& params, const ParamSet& grads, OptimizerState& state);

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool pass = false;
  std::size_t checked = 0;
  std::string worst_param;
};

/// Central-difference check of `analytic_grads` against `loss`. The loss
/// callable must be a deterministic function of the referenced parameters
/// (fix any dropout seeds before calling).
GradCheckReport finite_difference_check(std::vector<ParamSet*> groups,
                                        const std::function<double()>& loss,
                                        const std::function<std::vector<ParamSet>()>& analytic_grads,
                                        double step = 1e-4, double tolerance = 1e-4);

/// Draws (params, token ids) for gradient checks, retrying derived seeds until
/// no ReLU pre-activation sits within `kink_guard` of zero; finite differences
/// are only meaningful away from the kink.
struct GradCheckInstance {
  ParamSet params;
  std::vector<int> token_ids;
};
GradCheckInstance make_check_instance(const NetworkSpec& spec, std::uint64_t seed,
                                      int num_tokens, double kink_guard = 1e-3);

// Checkpoint file: little-endian header (spec + seed) followed by named
// float64 arrays; round-trips bit-exactly.
void save_params(const std::filesystem::path& path, const NetworkSpec& spec,
                 const ParamSet& params);
struct LoadedParams {
  NetworkSpec spec;
  ParamSet params;
};
LoadedParams load_params(const std::filesystem::path& path);

}  // namespace npoe
