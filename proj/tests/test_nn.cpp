// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "npoe/nn.hpp"

using namespace npoe;

namespace {

NetworkSpec small_spec() {
  NetworkSpec s;
  s.vocab_size = 20;
  s.embedding_dim = 6;
  s.hidden = {8};
  s.output_dim = 3;
  s.dropout = 0.0;
  return s;
}

}  // namespace

TEST_CASE("forward with all-zero parameters yields zero logits") {
  const NetworkSpec spec = small_spec();
  ParamSet params = init_params(spec, 1);
  fill_zero(params);
  const std::vector<int> ids = {1, 2, 3};
  const ForwardTrace t = forward(params, spec, ids);
  for (const double z : t.logits) CHECK(z == 0.0);
}

TEST_CASE("forward determinism with and without dropout rng") {
  NetworkSpec spec = small_spec();
  spec.dropout = 0.4;
  const ParamSet params = init_params(spec, 2);
  const std::vector<int> ids = {4, 9, 13, 2};

  const ForwardTrace a = forward(params, spec, ids);
  const ForwardTrace b = forward(params, spec, ids);
  CHECK(a.logits == b.logits);  // no rng: deterministic

  Rng r1(99), r2(99);
  const ForwardTrace c = forward(params, spec, ids, &r1);
  const ForwardTrace d = forward(params, spec, ids, &r2);
  CHECK(c.logits == d.logits);  // same rng state: identical masks
  CHECK(c.keep == d.keep);
}

TEST_CASE("empty input pools to the zero vector") {
  const NetworkSpec spec = small_spec();
  const ParamSet params = init_params(spec, 3);
  const ForwardTrace t = forward(params, spec, std::vector<int>{});
  for (const double x : t.pooled) CHECK(x == 0.0);
}

TEST_CASE("out-of-range token ids are rejected") {
  const NetworkSpec spec = small_spec();
  const ParamSet params = init_params(spec, 4);
  CHECK_THROWS_AS(forward(params, spec, std::vector<int>{spec.vocab_size}), std::out_of_range);
  CHECK_THROWS_AS(forward(params, spec, std::vector<int>{-1}), std::out_of_range);
}

TEST_CASE("top-layer bias gradient equals the upstream gradient") {
  const NetworkSpec spec = small_spec();
  const ParamSet params = init_params(spec, 5);
  const std::vector<int> ids = {1, 7};
  const ForwardTrace t = forward(params, spec, ids);
  ParamSet grads = zeros_like(params);
  const std::vector<double> upstream = {0.3, -0.7, 0.4};
  backward(params, spec, t, upstream, grads);
  const ParamArray& gb = grads.find("b1");
  for (int o = 0; o < 3; ++o) CHECK(gb.data[static_cast<std::size_t>(o)] ==
                                    doctest::Approx(upstream[static_cast<std::size_t>(o)]));
}

TEST_CASE("zero upstream gradient produces zero parameter gradients") {
  const NetworkSpec spec = small_spec();
  const ParamSet params = init_params(spec, 6);
  const ForwardTrace t = forward(params, spec, std::vector<int>{2, 3});
  ParamSet grads = zeros_like(params);
  backward(params, spec, t, std::vector<double>{0, 0, 0}, grads);
  for (const auto& a : grads.arrays)
    for (const double g : a.data) CHECK(g == 0.0);
}

TEST_CASE("backward rejects mismatched upstream length") {
  const NetworkSpec spec = small_spec();
  const ParamSet params = init_params(spec, 7);
  const ForwardTrace t = forward(params, spec, std::vector<int>{2});
  ParamSet grads = zeros_like(params);
  CHECK_THROWS_AS(backward(params, spec, t, std::vector<double>{1.0}, grads),
                  std::invalid_argument);
}

TEST_CASE("analytic gradients match central differences for CE loss") {
  for (const Activation act : {Activation::Relu, Activation::Tanh}) {
    NetworkSpec spec = small_spec();
    spec.activation = act;
    GradCheckInstance inst = make_check_instance(spec, 101, 5);
    const int label = 1;

    const auto loss = [&] {
      const ForwardTrace t = forward(inst.params, spec, inst.token_ids);
      return cross_entropy_log(log_softmax(t.logits), label);
    };
    const auto analytic = [&] {
      const ForwardTrace t = forward(inst.params, spec, inst.token_ids);
      ParamSet g = zeros_like(inst.params);
      backward(inst.params, spec, t, cross_entropy_softmax_grad(softmax(t.logits), label), g);
      return std::vector<ParamSet>{g};
    };
    const GradCheckReport rep = finite_difference_check({&inst.params}, loss, analytic);
    INFO("activation ", to_string(act), " worst ", rep.worst_param, " err ", rep.max_rel_err);
    CHECK(rep.pass);
  }
}

TEST_CASE("a corrupted gradient fails the finite-difference check") {
  const NetworkSpec spec = small_spec();
  GradCheckInstance inst = make_check_instance(spec, 55, 4);
  const auto loss = [&] {
    const ForwardTrace t = forward(inst.params, spec, inst.token_ids);
    return cross_entropy_log(log_softmax(t.logits), 0);
  };
  const auto corrupted = [&] {
    const ForwardTrace t = forward(inst.params, spec, inst.token_ids);
    ParamSet g = zeros_like(inst.params);
    backward(inst.params, spec, t, cross_entropy_softmax_grad(softmax(t.logits), 0), g);
    g.find("b1").data[0] += 0.5;
    return std::vector<ParamSet>{g};
  };
  CHECK_FALSE(finite_difference_check({&inst.params}, loss, corrupted).pass);
}

TEST_CASE("softmax and log_softmax basics") {
  const std::vector<double> sym = {0.0, 0.0};
  CHECK(softmax(sym) == std::vector<double>{0.5, 0.5});

  const std::vector<double> z = {0.3, -1.2, 2.0};
  std::vector<double> shifted = z;
  for (auto& x : shifted) x += 1234.5;
  const auto pz = softmax(z);
  const auto ps = softmax(shifted);
  for (std::size_t i = 0; i < z.size(); ++i) CHECK(ps[i] == doctest::Approx(pz[i]).epsilon(1e-12));

  const std::vector<double> big = {1000.0, 0.0};
  const auto pbig = softmax(big);
  CHECK(std::isfinite(pbig[0]));
  CHECK(pbig[0] == doctest::Approx(1.0));
  CHECK(pbig[1] == doctest::Approx(0.0));
}

TEST_CASE("log_softmax exponentiates to a distribution within 1e-9") {
  Rng rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> z(4);
    for (auto& x : z) x = rng.uniform(-8.0, 8.0);
    const auto lp = log_softmax(z);
    double sum = 0.0;
    for (const double l : lp) sum += std::exp(l);
    CHECK(std::abs(sum - 1.0) < 1e-9);
    const auto p = softmax(z);
    for (std::size_t i = 0; i < z.size(); ++i)
      CHECK(std::abs(std::exp(lp[i]) - p[i]) < 1e-9);
  }
}

TEST_CASE("cross entropy values and gradient") {
  CHECK(cross_entropy(std::vector<double>{0.0, 1.0}, 1) == doctest::Approx(0.0));
  const std::vector<double> uniform4(4, 0.25);
  CHECK(cross_entropy(uniform4, 2) == doctest::Approx(std::log(4.0)));

  // Gradient of CE(softmax(z), y) against central differences.
  const std::vector<double> z = {0.2, -0.4, 1.1};
  const int y = 2;
  const auto g = cross_entropy_softmax_grad(softmax(z), y);
  const double h = 1e-6;
  for (std::size_t i = 0; i < z.size(); ++i) {
    std::vector<double> zp = z, zm = z;
    zp[i] += h;
    zm[i] -= h;
    const double numeric =
        (cross_entropy_log(log_softmax(zp), y) - cross_entropy_log(log_softmax(zm), y)) / (2 * h);
    CHECK(g[i] == doctest::Approx(numeric).epsilon(1e-5));
  }
}

TEST_CASE("kl divergence closed forms and nonnegativity") {
  const std::vector<double> p = {0.4, 0.6};
  CHECK(kl_divergence(p, p) == doctest::Approx(0.0));
  CHECK(kl_divergence(std::vector<double>{1.0, 0.0}, std::vector<double>{0.5, 0.5}) ==
        doctest::Approx(std::log(2.0)));

  Rng rng(31);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> a(3), b(3);
    double sa = 0, sb = 0;
    for (int i = 0; i < 3; ++i) {
      a[static_cast<std::size_t>(i)] = rng.uniform() + 1e-3;
      b[static_cast<std::size_t>(i)] = rng.uniform() + 1e-3;
      sa += a[static_cast<std::size_t>(i)];
      sb += b[static_cast<std::size_t>(i)];
    }
    for (int i = 0; i < 3; ++i) {
      a[static_cast<std::size_t>(i)] /= sa;
      b[static_cast<std::size_t>(i)] /= sb;
    }
    CHECK(kl_divergence(a, b) >= -1e-12);
  }
}

TEST_CASE("optimizer leaves parameters alone on zero gradients") {
  const NetworkSpec spec = small_spec();
  ParamSet params = init_params(spec, 8);
  const ParamSet before = params;
  OptimizerState st = make_optimizer(params, {});
  optimizer_step(params, zeros_like(params), st);
  CHECK(st.step == 1);
  for (std::size_t a = 0; a < params.arrays.size(); ++a)
    CHECK(params.arrays[a].data == before.arrays[a].data);
}

TEST_CASE("first optimizer step moves by about -lr * sign(g)") {
  const NetworkSpec spec = small_spec();
  ParamSet params = init_params(spec, 9);
  const ParamSet before = params;
  ParamSet grads = zeros_like(params);
  for (auto& a : grads.arrays) std::fill(a.data.begin(), a.data.end(), 0.37);
  AdamConfig cfg;
  cfg.lr = 0.01;
  OptimizerState st = make_optimizer(params, cfg);
  optimizer_step(params, grads, st);
  for (std::size_t a = 0; a < params.arrays.size(); ++a)
    for (std::size_t i = 0; i < params.arrays[a].data.size(); ++i) {
      const double delta = params.arrays[a].data[i] - before.arrays[a].data[i];
      CHECK(delta == doctest::Approx(-cfg.lr).epsilon(1e-4));
    }
}

TEST_CASE("optimizer trajectories are bit-identical across runs") {
  const NetworkSpec spec = small_spec();
  auto run = [&] {
    ParamSet params = init_params(spec, 10);
    OptimizerState st = make_optimizer(params, {});
    Rng rng(5);
    for (int step = 0; step < 20; ++step) {
      ParamSet grads = zeros_like(params);
      for (auto& a : grads.arrays)
        for (auto& g : a.data) g = rng.uniform(-1.0, 1.0);
      optimizer_step(params, grads, st);
    }
    return params;
  };
  const ParamSet a = run();
  const ParamSet b = run();
  for (std::size_t i = 0; i < a.arrays.size(); ++i) CHECK(a.arrays[i].data == b.arrays[i].data);
}

TEST_CASE("optimizer rejects non-finite gradients by name") {
  const NetworkSpec spec = small_spec();
  ParamSet params = init_params(spec, 11);
  ParamSet grads = zeros_like(params);
  grads.find("w0").data[3] = std::numeric_limits<double>::quiet_NaN();
  OptimizerState st = make_optimizer(params, {});
  CHECK_THROWS_WITH_AS(optimizer_step(params, grads, st), doctest::Contains("w0"),
                       std::runtime_error);
}

TEST_CASE("inverted dropout preserves scale in expectation") {
  NetworkSpec spec;
  spec.vocab_size = 4;
  spec.embedding_dim = 5;
  spec.hidden = {6};
  spec.output_dim = 2;
  spec.dropout = 0.3;

  // Positive embeddings and weights keep every ReLU active, so the hidden
  // layer behaves linearly and masked forwards should average to the
  // unmasked forward.
  ParamSet params = init_params(spec, 12);
  for (auto& a : params.arrays)
    for (auto& x : a.data) x = std::abs(x) + 0.05;

  const std::vector<int> ids = {0, 1, 2};
  const ForwardTrace clean = forward(params, spec, ids, nullptr);

  Rng rng(2024);
  std::vector<double> mean(clean.logits.size(), 0.0);
  const int samples = 10000;
  for (int s = 0; s < samples; ++s) {
    const ForwardTrace t = forward(params, spec, ids, &rng);
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += t.logits[i];
  }
  for (std::size_t i = 0; i < mean.size(); ++i) {
    mean[i] /= samples;
    CHECK(std::abs(mean[i] - clean.logits[i]) / std::abs(clean.logits[i]) < 0.02);
  }
}

TEST_CASE("parameter checkpoints round-trip bit-exactly") {
  NetworkSpec spec = small_spec();
  spec.dropout = 0.25;
  spec.hidden = {8, 4};
  const ParamSet params = init_params(spec, 13);

  const auto dir = std::filesystem::temp_directory_path() / "npoe_test_nn";
  std::filesystem::create_directories(dir);
  const auto path = dir / "net.params";
  save_params(path, spec, params);
  const LoadedParams lp = load_params(path);

  CHECK(lp.spec.vocab_size == spec.vocab_size);
  CHECK(lp.spec.hidden == spec.hidden);
  CHECK(lp.spec.dropout == spec.dropout);
  CHECK(lp.params.init_seed == params.init_seed);
  REQUIRE(lp.params.arrays.size() == params.arrays.size());
  for (std::size_t a = 0; a < params.arrays.size(); ++a) {
    CHECK(lp.params.arrays[a].name == params.arrays[a].name);
    CHECK(lp.params.arrays[a].data == params.arrays[a].data);  // bit-exact
  }

  const auto bogus = dir / "bogus.params";
  std::ofstream(bogus, std::ios::binary) << "not a checkpoint";
  CHECK_THROWS_AS(load_params(bogus), std::runtime_error);
}

TEST_CASE("check instances avoid relu kinks") {
  const NetworkSpec spec = small_spec();
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const GradCheckInstance inst = make_check_instance(spec, seed, 6, 1e-3);
    const ForwardTrace t = forward(inst.params, spec, inst.token_ids);
    for (const auto& layer : t.pre)
      for (const double z : layer) CHECK(std::abs(z) >= 1e-3);
  }
}
