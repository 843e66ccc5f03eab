// SPDX-License-Identifier: Apache-2.0
#include "npoe/nn.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace npoe {

std::string to_string(Activation a) {
  switch (a) {
    case Activation::Relu: return "relu";
    case Activation::Tanh: return "tanh";
  }
  throw std::logic_error("unknown activation");
}

Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::Relu;
  if (s == "tanh") return Activation::Tanh;
  throw std::invalid_argument("unknown activation: " + s);
}

void NetworkSpec::validate() const {
  if (vocab_size < 1 || embedding_dim < 1 || output_dim < 1)
    throw std::invalid_argument("network spec: dimensions must be >= 1");
  for (int h : hidden)
    if (h < 1) throw std::invalid_argument("network spec: hidden width must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0))
    throw std::invalid_argument("network spec: dropout must be in [0,1)");
}

ParamArray& ParamSet::find(std::string_view name) {
  for (auto& a : arrays)
    if (a.name == name) return a;
  throw std::out_of_range("no parameter array named '" + std::string(name) + "'");
}

const ParamArray& ParamSet::find(std::string_view name) const {
  for (const auto& a : arrays)
    if (a.name == name) return a;
  throw std::out_of_range("no parameter array named '" + std::string(name) + "'");
}

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& a : arrays) n += a.data.size();
  return n;
}

namespace {

std::vector<int> layer_dims(const NetworkSpec& spec) {
  std::vector<int> dims;
  dims.push_back(spec.embedding_dim);
  dims.insert(dims.end(), spec.hidden.begin(), spec.hidden.end());
  dims.push_back(spec.output_dim);
  return dims;
}

}  // namespace

ParamSet init_params(const NetworkSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  ParamSet p;
  p.init_seed = seed;

  ParamArray emb{"embedding", spec.vocab_size, spec.embedding_dim, {}};
  emb.data.resize(static_cast<std::size_t>(spec.vocab_size) * spec.embedding_dim);
  for (auto& x : emb.data) x = rng.uniform(-1.0, 1.0);
  p.arrays.push_back(std::move(emb));

  const auto dims = layer_dims(spec);
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const int in = dims[l];
    const int out = dims[l + 1];
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    ParamArray w{"w" + std::to_string(l), in, out, {}};
    w.data.resize(static_cast<std::size_t>(in) * out);
    for (auto& x : w.data) x = rng.uniform(-bound, bound);
    p.arrays.push_back(std::move(w));
    ParamArray b{"b" + std::to_string(l), out, 1, {}};
    b.data.assign(static_cast<std::size_t>(out), 0.0);
    p.arrays.push_back(std::move(b));
  }
  return p;
}

ParamSet zeros_like(const ParamSet& params) {
  ParamSet z;
  z.init_seed = params.init_seed;
  z.arrays.reserve(params.arrays.size());
  for (const auto& a : params.arrays)
    z.arrays.push_back({a.name, a.rows, a.cols, std::vector<double>(a.data.size(), 0.0)});
  return z;
}

void fill_zero(ParamSet& params) {
  for (auto& a : params.arrays) std::fill(a.data.begin(), a.data.end(), 0.0);
}

ForwardTrace forward(const ParamSet& params, const NetworkSpec& spec,
                     std::span<const int> token_ids, Rng* dropout_rng) {
  ForwardTrace t;
  t.token_ids.assign(token_ids.begin(), token_ids.end());

  const ParamArray& emb = params.arrays[0];
  t.pooled.assign(static_cast<std::size_t>(spec.embedding_dim), 0.0);
  for (const int id : token_ids) {
    if (id < 0 || id >= spec.vocab_size)
      throw std::out_of_range("token id " + std::to_string(id) + " out of vocabulary range");
    const double* row = emb.data.data() + static_cast<std::size_t>(id) * spec.embedding_dim;
    for (int d = 0; d < spec.embedding_dim; ++d) t.pooled[static_cast<std::size_t>(d)] += row[d];
  }
  if (!token_ids.empty()) {
    const double inv = 1.0 / static_cast<double>(token_ids.size());
    for (auto& x : t.pooled) x *= inv;
  }

  const bool use_dropout = dropout_rng != nullptr && spec.dropout > 0.0;
  const double keep_prob = 1.0 - spec.dropout;

  const std::vector<double>* cur = &t.pooled;
  const std::size_t n_hidden = spec.hidden.size();
  for (std::size_t l = 0; l < n_hidden; ++l) {
    const ParamArray& w = params.arrays[1 + 2 * l];
    const ParamArray& b = params.arrays[2 + 2 * l];
    const int in = w.rows;
    const int out = w.cols;

    std::vector<double> z(static_cast<std::size_t>(out));
    for (int o = 0; o < out; ++o) z[static_cast<std::size_t>(o)] = b.data[static_cast<std::size_t>(o)];
    for (int i = 0; i < in; ++i) {
      const double xi = (*cur)[static_cast<std::size_t>(i)];
      if (xi == 0.0) continue;
      const double* wrow = w.data.data() + static_cast<std::size_t>(i) * out;
      for (int o = 0; o < out; ++o) z[static_cast<std::size_t>(o)] += xi * wrow[o];
    }

    std::vector<double> a(static_cast<std::size_t>(out));
    for (int o = 0; o < out; ++o) {
      const double zo = z[static_cast<std::size_t>(o)];
      a[static_cast<std::size_t>(o)] = spec.activation == Activation::Relu
                                           ? (zo > 0.0 ? zo : 0.0)
                                           : std::tanh(zo);
    }

    std::vector<double> h = a;
    std::vector<double> keep;
    if (use_dropout) {
      keep.resize(static_cast<std::size_t>(out));
      const double scale = 1.0 / keep_prob;
      for (int o = 0; o < out; ++o) {
        const bool kept = dropout_rng->uniform() < keep_prob;
        keep[static_cast<std::size_t>(o)] = kept ? scale : 0.0;
        h[static_cast<std::size_t>(o)] *= keep[static_cast<std::size_t>(o)];
      }
    }

    t.pre.push_back(std::move(z));
    t.act.push_back(std::move(a));
    t.post.push_back(std::move(h));
    t.keep.push_back(std::move(keep));
    cur = &t.post.back();
  }

  const ParamArray& w_top = params.arrays[1 + 2 * n_hidden];
  const ParamArray& b_top = params.arrays[2 + 2 * n_hidden];
  t.logits.assign(static_cast<std::size_t>(spec.output_dim), 0.0);
  for (int o = 0; o < spec.output_dim; ++o)
    t.logits[static_cast<std::size_t>(o)] = b_top.data[static_cast<std::size_t>(o)];
  for (int i = 0; i < w_top.rows; ++i) {
    const double xi = (*cur)[static_cast<std::size_t>(i)];
    if (xi == 0.0) continue;
    const double* wrow = w_top.data.data() + static_cast<std::size_t>(i) * w_top.cols;
    for (int o = 0; o < spec.output_dim; ++o) t.logits[static_cast<std::size_t>(o)] += xi * wrow[o];
  }
  return t;
}

void backward(const ParamSet& params, const NetworkSpec& spec, const ForwardTrace& trace,
              std::span<const double> dlogits, ParamSet& grads, double scale) {
  if (static_cast<int>(dlogits.size()) != spec.output_dim)
    throw std::invalid_argument("backward: upstream gradient length mismatch");
  if (grads.arrays.size() != params.arrays.size())
    throw std::invalid_argument("backward: gradient buffer shape mismatch");

  const std::size_t n_hidden = spec.hidden.size();
  std::vector<double> g(dlogits.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = dlogits[i] * scale;

  // Linear layers top-down; layer l consumes x_l (pooled for l = 0).
  for (std::size_t l = n_hidden + 1; l-- > 0;) {
    const ParamArray& w = params.arrays[1 + 2 * l];
    ParamArray& gw = grads.arrays[1 + 2 * l];
    ParamArray& gb = grads.arrays[2 + 2 * l];
    const std::vector<double>& in_vec = (l == 0) ? trace.pooled : trace.post[l - 1];
    const int in = w.rows;
    const int out = w.cols;

    for (int o = 0; o < out; ++o) gb.data[static_cast<std::size_t>(o)] += g[static_cast<std::size_t>(o)];
    for (int i = 0; i < in; ++i) {
      const double xi = in_vec[static_cast<std::size_t>(i)];
      if (xi != 0.0) {
        double* grow = gw.data.data() + static_cast<std::size_t>(i) * out;
        for (int o = 0; o < out; ++o) grow[o] += xi * g[static_cast<std::size_t>(o)];
      }
    }

    std::vector<double> gin(static_cast<std::size_t>(in), 0.0);
    for (int i = 0; i < in; ++i) {
      const double* wrow = w.data.data() + static_cast<std::size_t>(i) * out;
      double acc = 0.0;
      for (int o = 0; o < out; ++o) acc += wrow[o] * g[static_cast<std::size_t>(o)];
      gin[static_cast<std::size_t>(i)] = acc;
    }

    if (l == 0) {
      // Into the embedding bag: mean pooling spreads the gradient evenly.
      if (!trace.token_ids.empty()) {
        ParamArray& gemb = grads.arrays[0];
        const double inv = 1.0 / static_cast<double>(trace.token_ids.size());
        for (const int id : trace.token_ids) {
          double* row = gemb.data.data() + static_cast<std::size_t>(id) * spec.embedding_dim;
          for (int d = 0; d < spec.embedding_dim; ++d) row[d] += gin[static_cast<std::size_t>(d)] * inv;
        }
      }
      g.clear();
    } else {
      const std::size_t hl = l - 1;  // hidden layer feeding this linear layer
      const auto& keep = trace.keep[hl];
      const auto& pre = trace.pre[hl];
      const auto& act = trace.act[hl];
      for (std::size_t i = 0; i < gin.size(); ++i) {
        double gi = gin[i];
        if (!keep.empty()) gi *= keep[i];
        if (spec.activation == Activation::Relu) {
          gi = pre[i] > 0.0 ? gi : 0.0;
        } else {
          gi *= 1.0 - act[i] * act[i];
        }
        gin[i] = gi;
      }
      g = std::move(gin);
    }
  }
}

std::vector<double> log_softmax(std::span<const double> logits) {
  if (logits.empty()) throw std::invalid_argument("log_softmax: empty input");
  const double m = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (const double z : logits) sum += std::exp(z - m);
  const double lse = m + std::log(sum);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) throw std::invalid_argument("softmax: empty input");
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - m);
    sum += out[i];
  }
  for (auto& x : out) x /= sum;
  return out;
}

double cross_entropy(std::span<const double> probs, int label) {
  if (label < 0 || label >= static_cast<int>(probs.size()))
    throw std::invalid_argument("cross_entropy: label out of range");
  return -std::log(std::max(probs[static_cast<std::size_t>(label)], kLogClamp));
}

double cross_entropy_log(std::span<const double> log_probs, int label) {
  if (label < 0 || label >= static_cast<int>(log_probs.size()))
    throw std::invalid_argument("cross_entropy_log: label out of range");
  return -log_probs[static_cast<std::size_t>(label)];
}

std::vector<double> cross_entropy_softmax_grad(std::span<const double> probs, int label) {
  if (label < 0 || label >= static_cast<int>(probs.size()))
    throw std::invalid_argument("cross_entropy_softmax_grad: label out of range");
  std::vector<double> g(probs.begin(), probs.end());
  g[static_cast<std::size_t>(label)] -= 1.0;
  return g;
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw std::invalid_argument("kl_divergence: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    s += p[i] * (std::log(std::max(p[i], kLogClamp)) - std::log(std::max(q[i], kLogClamp)));
  return s;
}

OptimizerState make_optimizer(const ParamSet& params, const AdamConfig& cfg) {
  OptimizerState st;
  st.cfg = cfg;
  st.m = zeros_like(params);
  st.v = zeros_like(params);
  return st;
}

void optimizer_step(ParamSet& params, const ParamSet& grads, OptimizerState& state) {
  if (params.arrays.size() != grads.arrays.size() ||
      params.arrays.size() != state.m.arrays.size())
    throw std::invalid_argument("optimizer_step: shape mismatch");

  ++state.step;
  const double bc1 = 1.0 - std::pow(state.cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.cfg.beta2, static_cast<double>(state.step));

  for (std::size_t a = 0; a < params.arrays.size(); ++a) {
    auto& p = params.arrays[a].data;
    const auto& g = grads.arrays[a].data;
    auto& m = state.m.arrays[a].data;
    auto& v = state.v.arrays[a].data;
    if (p.size() != g.size())
      throw std::invalid_argument("optimizer_step: shape mismatch in '" + params.arrays[a].name +
                                  "'");
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      if (!std::isfinite(gi))
        throw std::runtime_error("non-finite gradient in parameter '" + params.arrays[a].name +
                                 "' at index " + std::to_string(i));
      m[i] = state.cfg.beta1 * m[i] + (1.0 - state.cfg.beta1) * gi;
      v[i] = state.cfg.beta2 * v[i] + (1.0 - state.cfg.beta2) * gi * gi;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= state.cfg.lr * mhat / (std::sqrt(vhat) + state.cfg.eps);
    }
  }
}

GradCheckReport finite_difference_check(std::vector<ParamSet*> groups,
                                        const std::function<double()>& loss,
                                        const std::function<std::vector<ParamSet>()>& analytic_grads,
                                        double step, double tolerance) {
  const std::vector<ParamSet> grads = analytic_grads();
  if (grads.size() != groups.size())
    throw std::invalid_argument("finite_difference_check: group count mismatch");

  GradCheckReport report;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    ParamSet& params = *groups[g];
    for (std::size_t a = 0; a < params.arrays.size(); ++a) {
      auto& data = params.arrays[a].data;
      const auto& gdata = grads[g].arrays[a].data;
      for (std::size_t i = 0; i < data.size(); ++i) {
        const double saved = data[i];
        data[i] = saved + step;
        const double up = loss();
        data[i] = saved - step;
        const double down = loss();
        data[i] = saved;

        const double numeric = (up - down) / (2.0 * step);
        const double analytic = gdata[i];
        const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
        const double rel = std::abs(analytic - numeric) / denom;
        ++report.checked;
        if (rel > report.max_rel_err) {
          report.max_rel_err = rel;
          report.worst_param = params.arrays[a].name + "[" + std::to_string(i) + "]";
        }
      }
    }
  }
  report.pass = report.max_rel_err < tolerance;
  return report;
}

GradCheckInstance make_check_instance(const NetworkSpec& spec, std::uint64_t seed,
                                      int num_tokens, double kink_guard) {
  for (int attempt = 0; attempt < 64; ++attempt) {
    const std::uint64_t s = derive_seed(seed, "check_instance", static_cast<std::uint64_t>(attempt));
    ParamSet params = init_params(spec, s);
    Rng rng(derive_seed(s, "check_tokens"));
    std::vector<int> ids(static_cast<std::size_t>(num_tokens));
    for (auto& id : ids) id = rng.uniform_int(spec.vocab_size);

    if (spec.activation != Activation::Relu) return {std::move(params), std::move(ids)};

    const ForwardTrace t = forward(params, spec, ids, nullptr);
    bool near_kink = false;
    for (const auto& layer : t.pre)
      for (const double z : layer)
        if (std::abs(z) < kink_guard) near_kink = true;
    if (!near_kink) return {std::move(params), std::move(ids)};
  }
  throw std::runtime_error("make_check_instance: could not find a kink-free instance");
}

namespace {

void write_bytes(std::ofstream& out, const void* p, std::size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void write_u32(std::ofstream& out, std::uint32_t x) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((x >> (8 * i)) & 0xff);
  write_bytes(out, b, 4);
}

void write_u64(std::ofstream& out, std::uint64_t x) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((x >> (8 * i)) & 0xff);
  write_bytes(out, b, 8);
}

void write_f64(std::ofstream& out, double x) { write_u64(out, std::bit_cast<std::uint64_t>(x)); }

void write_string(std::ofstream& out, const std::string& s) {
  write_u32(out, static_cast<std::uint32_t>(s.size()));
  write_bytes(out, s.data(), s.size());
}

std::uint32_t read_u32(std::ifstream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw std::runtime_error("checkpoint truncated");
  std::uint32_t x = 0;
  for (int i = 0; i < 4; ++i) x |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return x;
}

std::uint64_t read_u64(std::ifstream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw std::runtime_error("checkpoint truncated");
  std::uint64_t x = 0;
  for (int i = 0; i < 8; ++i) x |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return x;
}

double read_f64(std::ifstream& in) { return std::bit_cast<double>(read_u64(in)); }

std::string read_string(std::ifstream& in) {
  const std::uint32_t n = read_u32(in);
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) throw std::runtime_error("checkpoint truncated");
  return s;
}

constexpr std::uint32_t kParamMagic = 0x4d50504eU;  // "NPPM"
constexpr std::uint32_t kParamVersion = 1;

}  // namespace

void save_params(const std::filesystem::path& path, const NetworkSpec& spec,
                 const ParamSet& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path.string());

  write_u32(out, kParamMagic);
  write_u32(out, kParamVersion);
  write_u32(out, static_cast<std::uint32_t>(spec.vocab_size));
  write_u32(out, static_cast<std::uint32_t>(spec.embedding_dim));
  write_u32(out, static_cast<std::uint32_t>(spec.hidden.size()));
  for (const int h : spec.hidden) write_u32(out, static_cast<std::uint32_t>(h));
  write_u32(out, static_cast<std::uint32_t>(spec.output_dim));
  write_f64(out, spec.dropout);
  write_string(out, to_string(spec.activation));
  write_u64(out, params.init_seed);

  write_u32(out, static_cast<std::uint32_t>(params.arrays.size()));
  for (const auto& a : params.arrays) {
    write_string(out, a.name);
    write_u32(out, static_cast<std::uint32_t>(a.rows));
    write_u32(out, static_cast<std::uint32_t>(a.cols));
    for (const double x : a.data) write_f64(out, x);
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

LoadedParams load_params(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path.string());
  if (read_u32(in) != kParamMagic)
    throw std::runtime_error("not a parameter checkpoint: " + path.string());
  if (read_u32(in) != kParamVersion)
    throw std::runtime_error("unsupported checkpoint version: " + path.string());

  LoadedParams lp;
  lp.spec.vocab_size = static_cast<int>(read_u32(in));
  lp.spec.embedding_dim = static_cast<int>(read_u32(in));
  const std::uint32_t n_hidden = read_u32(in);
  lp.spec.hidden.resize(n_hidden);
  for (auto& h : lp.spec.hidden) h = static_cast<int>(read_u32(in));
  lp.spec.output_dim = static_cast<int>(read_u32(in));
  lp.spec.dropout = read_f64(in);
  lp.spec.activation = activation_from_string(read_string(in));
  lp.params.init_seed = read_u64(in);

  const std::uint32_t n_arrays = read_u32(in);
  for (std::uint32_t a = 0; a < n_arrays; ++a) {
    ParamArray arr;
    arr.name = read_string(in);
    arr.rows = static_cast<int>(read_u32(in));
    arr.cols = static_cast<int>(read_u32(in));
    arr.data.resize(static_cast<std::size_t>(arr.rows) * static_cast<std::size_t>(arr.cols));
    for (auto& x : arr.data) x = read_f64(in);
    lp.params.arrays.push_back(std::move(arr));
  }
  lp.spec.validate();
  return lp;
}

}  // namespace npoe
