#include "kore/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "kore/errors.hpp"

namespace kore {

namespace {
std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

thread_local Tape* g_active_tape = nullptr;
}  // namespace

Tensor Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
  Tensor t;
  t.s_ = std::make_shared<Storage>();
  t.s_->shape = std::move(shape);
  t.s_->value.assign(shape_numel(t.s_->shape), 0.0);
  t.s_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::full(std::vector<std::size_t> shape, double v, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (double& x : t.value()) x = v;
  return t;
}

Tensor Tensor::from(std::vector<std::size_t> shape, std::vector<double> data,
                    bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw invalid_argument("tensor: shape does not match data length");
  }
  Tensor t;
  t.s_ = std::make_shared<Storage>();
  t.s_->shape = std::move(shape);
  t.s_->value = std::move(data);
  t.s_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return from({1}, {v}, requires_grad);
}

Tensor Tensor::row(const std::vector<double>& data, bool requires_grad) {
  return from({1, data.size()}, data, requires_grad);
}

std::size_t Tensor::rows() const {
  return s_->shape.empty() ? 1 : s_->shape.front();
}

std::size_t Tensor::cols() const {
  if (s_->shape.size() < 2) return s_->shape.empty() ? 1 : s_->shape[0];
  std::size_t c = 1;
  for (std::size_t i = 1; i < s_->shape.size(); ++i) c *= s_->shape[i];
  return c;
}

void Tensor::ensure_grad() {
  if (s_->grad.size() != s_->value.size()) s_->grad.assign(s_->value.size(), 0.0);
}

void Tensor::zero_grad() {
  if (!s_->grad.empty()) s_->grad.assign(s_->value.size(), 0.0);
}

double Tensor::item() const {
  if (numel() != 1) {
    throw invalid_argument("tensor: item() on non-scalar of shape " + shape_str());
  }
  return s_->value[0];
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s_->shape.size(); ++i) {
    if (i) os << ",";
    os << s_->shape[i];
  }
  os << "]";
  return os.str();
}

bool Tensor::all_finite() const {
  for (double v : s_->value) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor Tensor::detach_copy() const {
  return Tensor::from(s_->shape, s_->value, false);
}

void Tape::backward(Tensor loss) {
  if (loss.numel() != 1) {
    throw invalid_argument("tape: backward expects a scalar loss, got " + loss.shape_str());
  }
  loss.ensure_grad();
  loss.grad()[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
}

Tape* Tape::active() { return g_active_tape; }

Tape::Scope::Scope(Tape& t) : prev_(g_active_tape) { g_active_tape = &t; }
Tape::Scope::~Scope() { g_active_tape = prev_; }

}  // namespace kore
