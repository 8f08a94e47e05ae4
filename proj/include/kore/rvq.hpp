#pragma once

#include <cstdint>
#include <deque>
#include <string>
#include <vector>

#include "kore/checkpoint.hpp"
#include "kore/rng.hpp"
#include "kore/tensor.hpp"

namespace kore::rvq {

struct RVQConfig {
  std::size_t num_stages = 20;      // Q
  std::size_t codebook_size = 128;  // K
  double beta = 0.25;
  std::size_t n_dead = 4;  // reset after n_dead * codebook_size graphs of unuse
  double ema_decay = 0.99;
  std::size_t reset_pool_size = 4096;

  std::size_t reset_threshold() const { return n_dead * codebook_size; }
  void validate() const;
};

// Q per-stage tables of K unit-norm code rows with EMA accumulators, usage
// counters and graphs-since-use counters.
class Codebook {
 public:
  struct Stage {
    Tensor codes;    // K x d, every row unit norm
    Tensor ema_acc;  // K x d
    Tensor ema_cnt;  // K
    std::vector<std::int64_t> steps_since_use;  // counts training graphs
    std::vector<std::uint64_t> usage;           // lifetime selection counts
  };

  Codebook(std::size_t num_stages, std::size_t codebook_size, std::size_t dim, Rng& rng);

  std::size_t num_stages() const { return stages_.size(); }
  std::size_t size() const { return codebook_size_; }
  std::size_t dim() const { return dim_; }
  Stage& stage(std::size_t t) { return stages_[t]; }
  const Stage& stage(std::size_t t) const { return stages_[t]; }

  std::vector<double> code(std::size_t stage, std::size_t index) const;
  void set_code(std::size_t stage, std::size_t index, const std::vector<double>& v);

  double max_unit_norm_error() const;
  void reset_usage();

  void save_to(Checkpoint& ck, const std::string& prefix) const;
  static Codebook load_from(const Checkpoint& ck, const std::string& prefix);

 private:
  Codebook() = default;
  std::size_t codebook_size_ = 0;
  std::size_t dim_ = 0;
  std::vector<Stage> stages_;
};

// One quantization pass: selected indices, the removed components
// (knowledge tokens), the full residual trace r_0..r_Q, per-stage cosines
// and the loss value.
struct QuantizationResult {
  std::vector<std::size_t> indices;
  std::vector<std::vector<double>> tokens;
  std::vector<std::vector<double>> residual_trace;
  std::vector<double> cosines;
  double rvq_loss = 0.0;
  bool degenerate = false;  // some stage saw a zero-norm residual
};

// Directional RVQ: cosine selection over unit codes (ties to the lowest
// index), then r <- r - <r,c> c, removing only the component along the code.
// A residual below 1e-12 makes the remaining stages emit index 0, zero
// tokens and cosine 0.
QuantizationResult quantize(const std::vector<double>& summary, const Codebook& cb,
                            const RVQConfig& config);

// Baseline for the collapse comparison: Euclidean nearest-neighbor selection
// and full-code subtraction r <- r - c.
QuantizationResult subtractive_quantize(const std::vector<double>& summary,
                                        const Codebook& cb, const RVQConfig& config);

// beta * sum_t (1 - cos(r_t, c_t)) + |r_Q|^2, recomputed from the result. A
// zero-norm residual stage contributes its full (1 - 0) commitment term.
double rvq_loss(const QuantizationResult& result, const RVQConfig& config);

// Tape-side forward for training. `tokens` carries the k-hat values with a
// straight-through gradient (identity into the summary); `loss` is the
// commitment + final-residual graph with the code selection pinned to the
// forward pass.
struct TapeQuantization {
  Tensor tokens;  // Q x d
  Tensor loss;    // scalar
  QuantizationResult result;
};

TapeQuantization quantize_on_tape(const Tensor& summary, const Codebook& cb,
                                  const RVQConfig& config);

// Commitment/residual loss with an explicit pinned index sequence; used by
// quantize_on_tape and by gradient-check oracles.
Tensor pinned_rvq_loss_on_tape(const Tensor& summary, const Codebook& cb,
                               const RVQConfig& config,
                               const std::vector<std::size_t>& indices);

// FIFO pool of recent residuals feeding dead-code resets.
class ResidualPool {
 public:
  explicit ResidualPool(std::size_t capacity) : capacity_(capacity) {}

  void push(const std::vector<double>& residual);
  bool empty() const { return items_.empty(); }
  std::size_t size() const { return items_.size(); }
  const std::vector<double>& sample(Rng& rng) const;

 private:
  std::size_t capacity_;
  std::deque<std::vector<double>> items_;
};

struct Assignment {
  std::size_t stage;
  std::size_t index;
  std::vector<double> residual;  // pre-update r_t
};

// EMA codebook update over one batch. Residuals are L2-normalized before
// accumulation and codes re-normalized afterwards; graph_count drives the
// steps_since_use counters.
void ema_update(Codebook& cb, const std::vector<Assignment>& batch,
                std::size_t graph_count, const RVQConfig& config);

// Replaces every code unused for >= n_dead * codebook_size graphs by a
// normalized residual sampled from the pool. Returns the number of resets;
// an empty pool defers them.
std::size_t dead_code_reset(Codebook& cb, const RVQConfig& config, ResidualPool& pool,
                            Rng& rng);

struct CodebookStats {
  double perplexity = 0.0;
  double entropy = 0.0;
  double dead_fraction = 0.0;
};

CodebookStats codebook_stats(const std::vector<std::uint64_t>& usage_histogram);

}  // namespace kore::rvq
