#include <doctest.h>

#include <cmath>

#include "kore/errors.hpp"
#include "kore/optim.hpp"
#include "kore/tensor.hpp"

using namespace kore;

namespace {

ParamGroup single_param_group(Tensor p, double lr, double wd) {
  return ParamGroup{"g", {{"w", p}}, lr, wd};
}

}  // namespace

TEST_SUITE_BEGIN("numerics");

TEST_CASE("adamw zero gradient leaves parameter unchanged") {
  Tensor w = Tensor::scalar(1.0, true);
  w.ensure_grad();
  AdamW opt({single_param_group(w, 0.1, 0.0)});
  opt.step();
  CHECK(w.item() == doctest::Approx(1.0));
}

TEST_CASE("adamw first step has magnitude lr") {
  Tensor w = Tensor::scalar(1.0, true);
  w.ensure_grad();
  w.grad()[0] = 1.0;
  AdamW opt({single_param_group(w, 0.1, 0.0)});
  opt.step();
  // Bias-corrected moments at t=1 give an update of exactly lr (up to eps).
  CHECK(w.item() == doctest::Approx(0.9).epsilon(1e-6));
}

TEST_CASE("adamw decay-only step scales by (1 - lr*wd)") {
  Tensor w = Tensor::scalar(1.0, true);
  w.ensure_grad();
  AdamW opt({single_param_group(w, 0.1, 0.01)});
  opt.step();
  CHECK(w.item() == doctest::Approx(1.0 - 0.001));
}

TEST_CASE("adamw missing gradient names the tensor") {
  Tensor w = Tensor::scalar(1.0, true);
  AdamW opt({ParamGroup{"g", {{"lm.q", w}}, 0.1, 0.0}});
  CHECK_THROWS_WITH_AS(opt.step(), doctest::Contains("lm.q"), numeric_error);
}

TEST_CASE("adamw with lr=0 changes no parameter") {
  Tensor w = Tensor::from({3}, {1.0, -2.0, 0.5}, true);
  w.ensure_grad();
  w.grad() = {5.0, -1.0, 2.0};
  AdamW opt({single_param_group(w, 0.0, 0.01)});
  opt.step();
  CHECK(w.value()[0] == 1.0);
  CHECK(w.value()[1] == -2.0);
  CHECK(w.value()[2] == 0.5);
}

TEST_CASE("clip_grad_norm under threshold is a no-op") {
  Tensor w = Tensor::from({2}, {0, 0}, true);
  w.ensure_grad();
  w.grad() = {3.0, 4.0};
  std::vector<ParamGroup> groups = {single_param_group(w, 0.1, 0.0)};
  double norm = clip_grad_norm(groups, 10.0);
  CHECK(norm == doctest::Approx(5.0));
  CHECK(w.grad()[0] == doctest::Approx(3.0));
  CHECK(w.grad()[1] == doctest::Approx(4.0));
}

TEST_CASE("clip_grad_norm scales down and is idempotent") {
  Tensor w = Tensor::from({2}, {0, 0}, true);
  w.ensure_grad();
  w.grad() = {3.0, 4.0};
  std::vector<ParamGroup> groups = {single_param_group(w, 0.1, 0.0)};
  double norm = clip_grad_norm(groups, 1.0);
  CHECK(norm == doctest::Approx(5.0));
  CHECK(w.grad()[0] == doctest::Approx(0.6));
  CHECK(w.grad()[1] == doctest::Approx(0.8));

  // Second application: already at the cap, nothing moves.
  double norm2 = clip_grad_norm(groups, 1.0);
  CHECK(norm2 == doctest::Approx(1.0));
  CHECK(w.grad()[0] == doctest::Approx(0.6));
  CHECK(w.grad()[1] == doctest::Approx(0.8));
}

TEST_CASE("clip_grad_norm zero gradients") {
  Tensor w = Tensor::from({2}, {1, 1}, true);
  w.ensure_grad();
  std::vector<ParamGroup> groups = {single_param_group(w, 0.1, 0.0)};
  CHECK(clip_grad_norm(groups, 1.0) == 0.0);
  CHECK(w.grad()[0] == 0.0);
}

TEST_SUITE_END();
