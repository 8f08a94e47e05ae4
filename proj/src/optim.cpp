#include "kore/optim.hpp"

#include <cmath>

#include "kore/errors.hpp"

namespace kore {

double clip_grad_norm(std::vector<ParamGroup>& groups, double max_norm) {
  double sq = 0.0;
  for (ParamGroup& g : groups) {
    for (auto& [name, p] : g.params) {
      if (!p.has_grad()) continue;
      for (double x : p.grad()) sq += x * x;
    }
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (ParamGroup& g : groups) {
      for (auto& [name, p] : g.params) {
        if (!p.has_grad()) continue;
        for (double& x : p.grad()) x *= s;
      }
    }
  }
  return norm;
}

AdamW::AdamW(std::vector<ParamGroup> groups, double beta1, double beta2, double eps)
    : groups_(std::move(groups)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (ParamGroup& g : groups_) {
    if (g.learning_rate < 0.0) {
      throw config_error("param group '" + g.name + "': learning rate must be non-negative");
    }
    for (auto& [name, p] : g.params) {
      slots_.push_back({name, Tensor::zeros(p.shape()), Tensor::zeros(p.shape())});
    }
  }
}

void AdamW::step() {
  ++step_count_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_count_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_count_));
  std::size_t slot = 0;
  for (ParamGroup& g : groups_) {
    for (auto& [name, p] : g.params) {
      if (!p.has_grad()) {
        throw numeric_error("adamw: uninitialized gradient for tensor '" + name + "'");
      }
      Slot& s = slots_[slot++];
      const double lr = g.learning_rate;
      const double wd = g.weight_decay;
      for (std::size_t i = 0; i < p.numel(); ++i) {
        double& w = p.value()[i];
        const double grad = p.grad()[i];
        if (wd != 0.0) w -= lr * wd * w;
        double& m = s.m.value()[i];
        double& v = s.v.value()[i];
        m = beta1_ * m + (1.0 - beta1_) * grad;
        v = beta2_ * v + (1.0 - beta2_) * grad * grad;
        const double mhat = m / bc1;
        const double vhat = v / bc2;
        w -= lr * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }
}

void AdamW::zero_grad() {
  for (ParamGroup& g : groups_) {
    for (auto& [name, p] : g.params) {
      p.ensure_grad();
      p.zero_grad();
    }
  }
}

}  // namespace kore
