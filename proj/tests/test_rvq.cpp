#include <doctest.h>

#include <cmath>
#include <vector>

#include "kore/checkpoint.hpp"
#include "kore/ops.hpp"
#include "kore/rng.hpp"
#include "kore/rvq.hpp"

using namespace kore;
using namespace kore::rvq;

namespace {

RVQConfig small_config(std::size_t q, std::size_t k, double beta = 0.25) {
  RVQConfig c;
  c.num_stages = q;
  c.codebook_size = k;
  c.beta = beta;
  return c;
}

// Builds a codebook whose stage tables all equal the given rows.
Codebook fixed_codebook(std::size_t q, const std::vector<std::vector<double>>& rows) {
  Rng rng(0);
  Codebook cb(q, rows.size(), rows[0].size(), rng);
  for (std::size_t t = 0; t < q; ++t) {
    for (std::size_t k = 0; k < rows.size(); ++k) cb.set_code(t, k, rows[k]);
  }
  return cb;
}

// Independent brute-force oracle: at each stage walk every code, compute the
// cosine by direct arithmetic, keep the best (lowest index on ties), and
// apply the directional update.
struct OracleStep {
  std::size_t index;
  double cosine;
  std::vector<double> token;
  std::vector<double> next_residual;
};

OracleStep oracle_stage(const std::vector<double>& r, const Codebook& cb, std::size_t t) {
  OracleStep out;
  double best_cos = -2.0;
  const double rn = std::sqrt([&] {
    double acc = 0;
    for (double x : r) acc += x * x;
    return acc;
  }());
  for (std::size_t k = 0; k < cb.size(); ++k) {
    const std::vector<double> c = cb.code(t, k);
    double d = 0.0;
    for (std::size_t j = 0; j < r.size(); ++j) d += r[j] * c[j];
    const double cosine = d / rn;
    if (cosine > best_cos + 1e-15) {
      best_cos = cosine;
      out.index = k;
    }
  }
  const std::vector<double> c = cb.code(t, out.index);
  double d = 0.0;
  for (std::size_t j = 0; j < r.size(); ++j) d += r[j] * c[j];
  out.cosine = d / rn;
  out.token.resize(r.size());
  out.next_residual.resize(r.size());
  for (std::size_t j = 0; j < r.size(); ++j) {
    out.token[j] = d * c[j];
    out.next_residual[j] = r[j] - out.token[j];
  }
  return out;
}

std::vector<double> random_unit(std::size_t d, Rng& rng) {
  std::vector<double> v(d);
  for (double& x : v) x = rng.normal();
  const double n = l2_norm(v);
  for (double& x : v) x /= n;
  return v;
}

}  // namespace

TEST_SUITE_BEGIN("rvq");

TEST_CASE("perfect match zeroes the residual immediately") {
  Codebook cb = fixed_codebook(3, {{1, 0}, {0, 1}});
  auto res = quantize({0, 1}, cb, small_config(3, 2));
  CHECK(res.indices[0] == 1);
  CHECK(res.cosines[0] == doctest::Approx(1.0));
  CHECK(l2_norm(res.residual_trace[1]) < 1e-12);
  for (std::size_t t = 1; t < 3; ++t) {
    CHECK(res.indices[t] == 0);
    CHECK(res.cosines[t] == 0.0);
    for (double x : res.tokens[t]) CHECK(x == 0.0);
  }
  CHECK(res.degenerate);
}

TEST_CASE("worked 2-d example matches hand arithmetic and the oracle") {
  Codebook cb = fixed_codebook(2, {{1, 0}, {0, 1}});
  auto res = quantize({3, 4}, cb, small_config(2, 2));

  CHECK(res.indices[0] == 1);
  CHECK(res.cosines[0] == doctest::Approx(0.8));
  CHECK(res.residual_trace[1][0] == doctest::Approx(3.0));
  CHECK(res.residual_trace[1][1] == doctest::Approx(0.0));
  CHECK(res.indices[1] == 0);
  CHECK(res.residual_trace[2][0] == doctest::Approx(0.0));

  // Reconstruction sums back to the input.
  for (std::size_t j = 0; j < 2; ++j) {
    CHECK(res.tokens[0][j] + res.tokens[1][j] ==
          doctest::Approx(std::vector<double>{3, 4}[j]));
  }

  // Loss: 0.25 * ((1-0.8) + (1-1)) + 0 = 0.05.
  CHECK(res.rvq_loss == doctest::Approx(0.05));
  CHECK(rvq_loss(res, small_config(2, 2)) == doctest::Approx(0.05));

  // Stagewise agreement with the brute-force oracle.
  std::vector<double> r = {3, 4};
  for (std::size_t t = 0; t < 2; ++t) {
    OracleStep step = oracle_stage(r, cb, t);
    CHECK(step.index == res.indices[t]);
    CHECK(step.cosine == doctest::Approx(res.cosines[t]));
    for (std::size_t j = 0; j < 2; ++j) {
      CHECK(step.token[j] == doctest::Approx(res.tokens[t][j]));
    }
    r = step.next_residual;
  }
}

TEST_CASE("random inputs agree with the oracle at every stage") {
  Rng rng(2025);
  Codebook cb(4, 16, 8, rng);
  RVQConfig cfg = small_config(4, 16);
  for (int trial = 0; trial < 25; ++trial) {
    std::vector<double> g(8);
    for (double& x : g) x = rng.uniform(-2, 2);
    auto res = quantize(g, cb, cfg);
    std::vector<double> r = g;
    for (std::size_t t = 0; t < cfg.num_stages; ++t) {
      if (l2_norm(r) < 1e-12) break;
      OracleStep step = oracle_stage(r, cb, t);
      CHECK(step.index == res.indices[t]);
      r = step.next_residual;
    }
  }
}

TEST_CASE("directional algebra: orthogonality, Pythagoras, telescoping, monotonicity") {
  Rng rng(7);
  Codebook cb(6, 32, 16, rng);
  RVQConfig cfg = small_config(6, 32);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> g(16);
    for (double& x : g) x = rng.normal();
    auto res = quantize(g, cb, cfg);

    for (std::size_t t = 0; t < cfg.num_stages; ++t) {
      const auto& r_t = res.residual_trace[t];
      const auto& r_next = res.residual_trace[t + 1];
      const std::vector<double> c = cb.code(t, res.indices[t]);
      double d_t = 0.0, ortho = 0.0;
      for (std::size_t j = 0; j < 16; ++j) {
        d_t += r_t[j] * c[j];
        ortho += r_next[j] * c[j];
      }
      if (l2_norm(r_t) < 1e-12) continue;
      CHECK(std::fabs(ortho) < 1e-10);
      const double lhs = l2_norm(r_t) * l2_norm(r_t);
      const double rhs = l2_norm(r_next) * l2_norm(r_next) + d_t * d_t;
      CHECK(std::fabs(lhs - rhs) < 1e-10);
      CHECK(l2_norm(r_next) <= l2_norm(r_t) + 1e-12);
    }

    std::vector<double> recon(16, 0.0);
    for (const auto& tok : res.tokens) {
      for (std::size_t j = 0; j < 16; ++j) recon[j] += tok[j];
    }
    for (std::size_t j = 0; j < 16; ++j) {
      recon[j] += res.residual_trace.back()[j];
      CHECK(std::fabs(recon[j] - g[j]) < 1e-10);
    }

    CHECK(res.rvq_loss >= 0.0);
    double tail = 0.0;
    for (double x : res.residual_trace.back()) tail += x * x;
    CHECK(res.rvq_loss >= tail - 1e-12);
  }
}

TEST_CASE("selection is scale covariant") {
  Rng rng(12);
  Codebook cb(5, 16, 8, rng);
  RVQConfig cfg = small_config(5, 16);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<double> g(8), g3(8);
    for (std::size_t j = 0; j < 8; ++j) {
      g[j] = rng.normal();
      g3[j] = 3.0 * g[j];
    }
    CHECK(quantize(g, cb, cfg).indices == quantize(g3, cb, cfg).indices);
  }
}

TEST_CASE("zero input follows the degenerate convention") {
  Rng rng(3);
  Codebook cb(2, 4, 4, rng);
  auto res = quantize({0, 0, 0, 0}, cb, small_config(2, 4));
  CHECK(res.degenerate);
  CHECK(res.rvq_loss == doctest::Approx(0.25 * 2.0));
  for (const auto& tok : res.tokens) {
    for (double x : tok) CHECK(x == 0.0);
  }
}

TEST_CASE("straight-through tokens pass downstream gradients to the summary") {
  Rng rng(21);
  Codebook cb(1, 8, 6, rng);
  RVQConfig cfg = small_config(1, 8);
  Tensor g = Tensor::row(random_unit(6, rng), true);

  // Q=1: a downstream gradient delta lands on g unchanged.
  Tape tape;
  {
    Tape::Scope sc(tape);
    auto tq = quantize_on_tape(g, cb, cfg);
    std::vector<double> delta = {0.5, -1.0, 2.0, 0.0, 1.5, -0.25};
    Tensor readout = sum_all(mul(tq.tokens, Tensor::row(delta)));
    g.ensure_grad();
    g.zero_grad();
    tape.backward(readout);
    for (std::size_t j = 0; j < 6; ++j) CHECK(g.grad()[j] == doctest::Approx(delta[j]));
  }

  // Zero downstream gradient, beta = 0 and exhausted residual: nothing flows.
  Codebook aligned = fixed_codebook(1, {{1, 0}, {0, 1}});
  RVQConfig cfg0 = small_config(1, 2, 0.0);
  Tensor e0 = Tensor::row({1, 0}, true);
  Tape t2;
  {
    Tape::Scope sc(t2);
    auto tq = quantize_on_tape(e0, aligned, cfg0);
    e0.ensure_grad();
    e0.zero_grad();
    t2.backward(tq.loss);
    for (double v : e0.grad()) CHECK(std::fabs(v) < 1e-12);
  }
}

TEST_CASE("pinned RVQ loss gradient matches finite differences") {
  Rng rng(33);
  Codebook cb(4, 16, 8, rng);
  RVQConfig cfg = small_config(4, 16);
  Tensor g = Tensor::zeros({1, 8}, true);
  for (double& x : g.value()) x = rng.uniform(-1.5, 1.5);
  const std::vector<std::size_t> pinned = quantize(g.value(), cb, cfg).indices;
  double err = grad_check(
      [&] { return pinned_rvq_loss_on_tape(g, cb, cfg, pinned); }, {g});
  CHECK(err < 1e-4);

  // The full RVQ-loss value on tape equals the pure computation.
  auto tq = quantize_on_tape(g, cb, cfg);
  CHECK(tq.loss.item() == doctest::Approx(tq.result.rvq_loss).epsilon(1e-12));
}

TEST_CASE("ema update converges to a constant residual direction") {
  Rng rng(8);
  Codebook cb(1, 4, 8, rng);
  RVQConfig cfg = small_config(1, 4);
  cfg.ema_decay = 0.99;
  std::vector<double> u = random_unit(8, rng);
  for (int step = 0; step < 1000; ++step) {
    ema_update(cb, {{0, 2, u}}, 1, cfg);
  }
  std::vector<double> code = cb.code(0, 2);
  double dist = 0.0;
  for (std::size_t j = 0; j < 8; ++j) dist += (code[j] - u[j]) * (code[j] - u[j]);
  CHECK(std::sqrt(dist) < 1e-3);
  CHECK(cb.max_unit_norm_error() < 1e-9);
  CHECK(cb.stage(0).usage[2] == 1000);
  CHECK(cb.stage(0).steps_since_use[2] == 0);
  CHECK(cb.stage(0).steps_since_use[0] == 1000);
}

TEST_CASE("ema decay at the boundary leaves codes unchanged") {
  Rng rng(15);
  Codebook cb(1, 4, 8, rng);
  std::vector<double> before = cb.code(0, 1);
  RVQConfig cfg = small_config(1, 4);
  cfg.ema_decay = 1.0;  // boundary probe, bypasses config validation on purpose
  ema_update(cb, {{0, 1, random_unit(8, rng)}}, 1, cfg);
  std::vector<double> after = cb.code(0, 1);
  for (std::size_t j = 0; j < 8; ++j) CHECK(after[j] == doctest::Approx(before[j]));
}

TEST_CASE("codes stay unit norm under any update sequence (property)") {
  Rng rng(64);
  Codebook cb(3, 8, 6, rng);
  RVQConfig cfg = small_config(3, 8);
  for (int step = 0; step < 200; ++step) {
    std::vector<Assignment> batch;
    const std::size_t n = 1 + rng.below(5);
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> r(6);
      for (double& x : r) x = rng.uniform(-3, 3);
      batch.push_back({rng.below(3), rng.below(8), r});
    }
    ema_update(cb, batch, n, cfg);
  }
  CHECK(cb.max_unit_norm_error() < 1e-9);
}

TEST_CASE("dead code reset thresholds and behavior") {
  RVQConfig paper;
  CHECK(paper.reset_threshold() == 512);  // K=128, N_dead=4

  Rng rng(91);
  Codebook cb(1, 4, 6, rng);
  RVQConfig cfg = small_config(1, 4);
  cfg.n_dead = 2;  // threshold 8 graphs
  ResidualPool pool(16);
  pool.push(random_unit(6, rng));

  // All codes used every step: counters stay at zero, no resets.
  for (int step = 0; step < 10; ++step) {
    std::vector<Assignment> batch;
    for (std::size_t k = 0; k < 4; ++k) batch.push_back({0, k, random_unit(6, rng)});
    ema_update(cb, batch, 1, cfg);
    CHECK(dead_code_reset(cb, cfg, pool, rng) == 0);
  }

  // Code 3 never selected: after 8 graphs of unuse it is reset to a unit
  // vector drawn from the pool.
  std::size_t resets = 0;
  for (int step = 0; step < 10; ++step) {
    std::vector<Assignment> batch;
    for (std::size_t k = 0; k < 3; ++k) batch.push_back({0, k, random_unit(6, rng)});
    ema_update(cb, batch, 1, cfg);
    resets += dead_code_reset(cb, cfg, pool, rng);
  }
  CHECK(resets == 1);
  double n = l2_norm(cb.code(0, 3));
  CHECK(n == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(cb.stage(0).steps_since_use[3] < 8);

  // An empty pool defers pending resets.
  Codebook cb2(1, 4, 6, rng);
  ResidualPool empty_pool(4);
  cb2.stage(0).steps_since_use[1] = 100;
  CHECK(dead_code_reset(cb2, cfg, empty_pool, rng) == 0);
  CHECK(cb2.stage(0).steps_since_use[1] == 100);
}

TEST_CASE("codebook stats") {
  std::vector<std::uint64_t> uniform(128, 5);
  auto s = codebook_stats(uniform);
  CHECK(s.perplexity == doctest::Approx(128.0));
  CHECK(s.dead_fraction == 0.0);

  std::vector<std::uint64_t> single(128, 0);
  single[17] = 42;
  auto s1 = codebook_stats(single);
  CHECK(s1.perplexity == doctest::Approx(1.0));
  CHECK(s1.dead_fraction == doctest::Approx(127.0 / 128.0));

  // Random histogram vs direct entropy computation.
  Rng rng(5);
  std::vector<std::uint64_t> h(32);
  double total = 0.0;
  for (auto& x : h) {
    x = rng.below(100);
    total += static_cast<double>(x);
  }
  double entropy = 0.0;
  for (auto x : h) {
    if (x == 0) continue;
    double p = static_cast<double>(x) / total;
    entropy -= p * std::log(p);
  }
  auto s2 = codebook_stats(h);
  CHECK(std::fabs(s2.entropy - entropy) < 1e-9);
  CHECK(std::fabs(s2.perplexity - std::exp(entropy)) < 1e-9);

  CHECK(codebook_stats({}).perplexity == 0.0);
}

TEST_CASE("subtractive baseline behavior") {
  Codebook cb = fixed_codebook(2, {{1, 0}, {0, 1}});
  RVQConfig cfg = small_config(2, 2);

  auto hit = subtractive_quantize({1, 0}, cb, cfg);
  CHECK(hit.indices[0] == 0);
  CHECK(l2_norm(hit.residual_trace[1]) < 1e-12);

  auto res = subtractive_quantize({3, 4}, cb, cfg);
  CHECK(res.indices[0] == 1);
  CHECK(res.residual_trace[1][0] == doctest::Approx(3.0));
  CHECK(res.residual_trace[1][1] == doctest::Approx(3.0));

  // From any shared residual, one directional step shrinks the norm at least
  // as much as one subtractive step: |r|^2 - <r,c>^2 vs |r|^2 - 2<r,c> + 1.
  Rng rng(77);
  Codebook shared(4, 16, 8, rng);
  RVQConfig one = small_config(1, 16);
  for (int trial = 0; trial < 40; ++trial) {
    std::vector<double> g = random_unit(8, rng);
    auto dir = quantize(g, shared, one);
    auto sub = subtractive_quantize(g, shared, one);
    CHECK(l2_norm(dir.residual_trace[1]) <= l2_norm(sub.residual_trace[1]) + 1e-12);
  }

  // Full paired run on unit inputs at a fixed seed: directional residual at
  // or below the subtractive one at every stage.
  Rng paired(7);
  Codebook shared2(4, 16, 8, paired);
  RVQConfig cfg4 = small_config(4, 16);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> g = random_unit(8, paired);
    auto dir = quantize(g, shared2, cfg4);
    auto sub = subtractive_quantize(g, shared2, cfg4);
    for (std::size_t t = 1; t <= 4; ++t) {
      CHECK(l2_norm(dir.residual_trace[t]) <= l2_norm(sub.residual_trace[t]) + 1e-12);
    }
  }
}

TEST_CASE("codebook checkpoint round trip") {
  Rng rng(44);
  Codebook cb(2, 4, 6, rng);
  ema_update(cb, {{0, 1, random_unit(6, rng)}, {1, 2, random_unit(6, rng)}}, 1,
             small_config(2, 4));
  Checkpoint ck;
  cb.save_to(ck, "rvq.");
  Codebook back = Codebook::load_from(ck, "rvq.");
  CHECK(back.num_stages() == 2);
  CHECK(back.size() == 4);
  for (std::size_t t = 0; t < 2; ++t) {
    for (std::size_t k = 0; k < 4; ++k) {
      CHECK(back.code(t, k) == cb.code(t, k));
    }
    CHECK(back.stage(t).steps_since_use == cb.stage(t).steps_since_use);
    CHECK(back.stage(t).usage == cb.stage(t).usage);
  }
}

TEST_SUITE_END();
