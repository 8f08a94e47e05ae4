#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "kore/tensor.hpp"

namespace kore {

// One named set of trainable tensors with its own learning rate; every
// trainable tensor belongs to exactly one group.
struct ParamGroup {
  std::string name;
  std::vector<std::pair<std::string, Tensor>> params;
  double learning_rate = 1e-3;
  double weight_decay = 0.0;
};

// Returns the pre-clip global L2 norm over all grads in all groups; when it
// exceeds max_norm every grad is scaled by max_norm / norm.
double clip_grad_norm(std::vector<ParamGroup>& groups, double max_norm);

// AdamW with decoupled weight decay: the decay shrinks the parameter before
// the bias-corrected moment update is applied.
class AdamW {
 public:
  explicit AdamW(std::vector<ParamGroup> groups, double beta1 = 0.9, double beta2 = 0.999,
                 double eps = 1e-8);

  void step();
  void zero_grad();
  double clip(double max_norm) { return clip_grad_norm(groups_, max_norm); }

  std::vector<ParamGroup>& groups() { return groups_; }
  const std::vector<ParamGroup>& groups() const { return groups_; }
  std::int64_t step_count() const { return step_count_; }

  // Moment buffers, exposed for checkpointing. Indexed like the flattened
  // (group, param) order.
  struct Slot {
    std::string name;
    Tensor m;
    Tensor v;
  };
  std::vector<Slot>& slots() { return slots_; }
  void set_step_count(std::int64_t n) { step_count_ = n; }

 private:
  std::vector<ParamGroup> groups_;
  std::vector<Slot> slots_;
  double beta1_, beta2_, eps_;
  std::int64_t step_count_ = 0;
};

}  // namespace kore
