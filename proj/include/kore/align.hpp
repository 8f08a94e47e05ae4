#pragma once

#include <atomic>
#include <cstddef>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "kore/rng.hpp"
#include "kore/tensor.hpp"

namespace kore::align {

struct AlignConfig {
  std::size_t input_dim = 64;   // d, the quantizer dimension
  std::size_t llm_dim = 64;     // d_llm
  std::size_t hidden_mult = 4;  // d_hidden = hidden_mult * llm_dim
};

// Projects the Q knowledge tokens into the LM embedding width and matches
// their statistics to the text embeddings: per row f_out(z) + skip(z) then
// LayerNorm, then jointly over the Q x d_llm block subtract the mean, scale
// to sigma_text, and add the learned mean shift.
class Aligner {
 public:
  Aligner(const AlignConfig& config, double sigma_text, const std::vector<double>& mu_init,
          Rng& rng);

  Tensor align(const Tensor& z) const;  // {Q, d} -> {Q, d_llm}

  // Per-row path only (f_out + skip + LayerNorm), before StdMatch couples
  // the rows.
  Tensor project_rows(const Tensor& z) const;

  double sigma_text() const { return sigma_text_; }
  void set_sigma_text(double s);
  std::size_t zero_variance_events() const { return zero_variance_events_->load(); }

  void collect_params(const std::string& prefix,
                      std::vector<std::pair<std::string, Tensor>>& out) const;
  const AlignConfig& config() const { return config_; }
  Tensor& mu_llm() { return mu_llm_; }

 private:
  AlignConfig config_;
  Tensor w1_, b1_, w2_, b2_;  // f_out MLP, inner residual when dims allow
  Tensor skip_w_;             // linear skip, no bias
  Tensor ln_gain_, ln_bias_;
  Tensor mu_llm_;
  double sigma_text_ = 1.0;  // frozen, never trained
  std::shared_ptr<std::atomic<std::size_t>> zero_variance_events_;
};

// Population standard deviation over every entry of the LM token-embedding
// table. Raises on a degenerate all-constant table.
double compute_sigma_text(const Tensor& embedding_table);

struct InjectionResult {
  Tensor embeddings;  // (T - P + P*Q) x d_llm
  // position_map[i] = row of original position i in the output; a
  // placeholder maps to the first row of its spliced block.
  std::vector<std::size_t> position_map;
};

// Replaces each placeholder row by the rows of its aligned block, preserving
// the surrounding order. Placeholder count must equal block count.
InjectionResult inject(const Tensor& prompt_embeddings,
                       const std::vector<std::size_t>& placeholder_positions,
                       const std::vector<Tensor>& aligned_blocks);

}  // namespace kore::align
