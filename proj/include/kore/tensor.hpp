#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace kore {

// Dense row-major f64 tensor with an optional gradient buffer. Value
// semantics on the handle, shared storage underneath, so ops and backward
// closures see one buffer per logical tensor.
class Tensor {
 public:
  struct Storage {
    std::vector<std::size_t> shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until ensure_grad()
    bool requires_grad = false;
  };

  Tensor() = default;

  static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false);
  static Tensor full(std::vector<std::size_t> shape, double v, bool requires_grad = false);
  static Tensor from(std::vector<std::size_t> shape, std::vector<double> data,
                     bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor row(const std::vector<double>& data, bool requires_grad = false);

  bool defined() const { return s_ != nullptr; }
  const std::vector<std::size_t>& shape() const { return s_->shape; }
  std::size_t numel() const { return s_->value.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::vector<double>& value() { return s_->value; }
  const std::vector<double>& value() const { return s_->value; }
  std::vector<double>& grad() { return s_->grad; }
  const std::vector<double>& grad() const { return s_->grad; }
  bool has_grad() const { return !s_->grad.empty(); }
  void ensure_grad();
  void zero_grad();

  bool requires_grad() const { return s_ && s_->requires_grad; }
  void set_requires_grad(bool b) { s_->requires_grad = b; }

  double item() const;
  double at(std::size_t i) const { return s_->value[i]; }
  double at(std::size_t r, std::size_t c) const { return s_->value[r * cols() + c]; }
  double& at(std::size_t r, std::size_t c) { return s_->value[r * cols() + c]; }

  // Stable identity for param-group bookkeeping.
  const void* id() const { return s_.get(); }

  bool same_shape(const Tensor& other) const { return s_->shape == other.s_->shape; }
  std::string shape_str() const;
  bool all_finite() const;

  // Detached copy: same values, no grad, no tape history.
  Tensor detach_copy() const;

 private:
  std::shared_ptr<Storage> s_;
};

// Dynamically recorded reverse-mode tape. Ops push one closure per recorded
// node; backward() seeds the loss gradient and replays them in reverse.
// A tape is confined to one thread and cleared between training steps.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::function<void()> backward_fn) {
    entries_.push_back(std::move(backward_fn));
  }

  void backward(Tensor loss);
  void clear() { entries_.clear(); }
  std::size_t size() const { return entries_.size(); }

  static Tape* active();

  // RAII activation; ops record onto the innermost active tape.
  class Scope {
   public:
    explicit Scope(Tape& t);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* prev_;
  };

 private:
  std::vector<std::function<void()>> entries_;
};

}  // namespace kore
