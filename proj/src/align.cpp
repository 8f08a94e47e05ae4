#include "kore/align.hpp"

#include <algorithm>
#include <cmath>

#include "kore/errors.hpp"
#include "kore/gnn.hpp"
#include "kore/ops.hpp"

namespace kore::align {

Aligner::Aligner(const AlignConfig& config, double sigma_text,
                 const std::vector<double>& mu_init, Rng& rng)
    : config_(config),
      zero_variance_events_(std::make_shared<std::atomic<std::size_t>>(0)) {
  set_sigma_text(sigma_text);
  const std::size_t d = config.input_dim;
  const std::size_t d_llm = config.llm_dim;
  const std::size_t hidden = config.hidden_mult * d_llm;
  w1_ = gnn::glorot(d, hidden, rng);
  b1_ = Tensor::zeros({1, hidden}, true);
  w2_ = gnn::glorot(hidden, d_llm, rng);
  b2_ = Tensor::zeros({1, d_llm}, true);
  skip_w_ = gnn::glorot(d, d_llm, rng);
  ln_gain_ = Tensor::full({1, d_llm}, 1.0, true);
  ln_bias_ = Tensor::zeros({1, d_llm}, true);
  if (mu_init.empty()) {
    mu_llm_ = Tensor::zeros({1, d_llm}, true);
  } else {
    if (mu_init.size() != d_llm) {
      throw invalid_argument("aligner: mu_llm init width mismatch");
    }
    mu_llm_ = Tensor::row(mu_init, true);
  }
}

void Aligner::set_sigma_text(double s) {
  if (!(s > 0.0)) {
    throw config_error("aligner: sigma_text must be positive, got " + std::to_string(s));
  }
  sigma_text_ = s;
}

Tensor Aligner::project_rows(const Tensor& z) const {
  const std::size_t q = z.rows();
  Tensor hidden = gelu(add(matmul(z, w1_), tile_rows(b1_, q)));
  Tensor f_out = add(matmul(hidden, w2_), tile_rows(b2_, q));
  if (config_.input_dim == config_.llm_dim) {
    f_out = add(f_out, z);  // inner residual only when the widths agree
  }
  Tensor pre_ln = add(f_out, matmul(z, skip_w_));
  return layer_norm(pre_ln, ln_gain_, ln_bias_, 1e-5);
}

Tensor Aligner::align(const Tensor& z) const {
  if (z.cols() != config_.input_dim) {
    throw invalid_argument("aligner: expected width " + std::to_string(config_.input_dim) +
                           ", got " + z.shape_str());
  }
  Tensor rows = project_rows(z);
  // StdMatch over the joint (Q, d_llm) block.
  Tensor mean = mean_all(rows);
  Tensor centered = sub_bc(rows, mean);
  Tensor var = mean_all(mul(centered, centered));
  if (var.item() < 1e-12) zero_variance_events_->fetch_add(1);
  Tensor matched = scale(mul_bc(centered, rsqrt(var, 1e-8)), sigma_text_);
  return add(matched, tile_rows(mu_llm_, z.rows()));
}

void Aligner::collect_params(const std::string& prefix,
                             std::vector<std::pair<std::string, Tensor>>& out) const {
  out.emplace_back(prefix + "w1", w1_);
  out.emplace_back(prefix + "b1", b1_);
  out.emplace_back(prefix + "w2", w2_);
  out.emplace_back(prefix + "b2", b2_);
  out.emplace_back(prefix + "skip_w", skip_w_);
  out.emplace_back(prefix + "ln_gain", ln_gain_);
  out.emplace_back(prefix + "ln_bias", ln_bias_);
  out.emplace_back(prefix + "mu_llm", mu_llm_);
}

double compute_sigma_text(const Tensor& embedding_table) {
  if (embedding_table.numel() == 0) {
    throw invalid_argument("sigma_text: empty embedding table");
  }
  double mean = 0.0;
  for (double v : embedding_table.value()) mean += v;
  mean /= static_cast<double>(embedding_table.numel());
  double var = 0.0;
  for (double v : embedding_table.value()) var += (v - mean) * (v - mean);
  var /= static_cast<double>(embedding_table.numel());
  const double sigma = std::sqrt(var);
  if (!(sigma > 0.0)) {
    throw config_error("sigma_text: embedding table has zero variance");
  }
  return sigma;
}

InjectionResult inject(const Tensor& prompt_embeddings,
                       const std::vector<std::size_t>& placeholder_positions,
                       const std::vector<Tensor>& aligned_blocks) {
  if (placeholder_positions.size() != aligned_blocks.size()) {
    throw invalid_argument("inject: " + std::to_string(placeholder_positions.size()) +
                           " placeholders but " + std::to_string(aligned_blocks.size()) +
                           " aligned graphs");
  }
  const std::size_t t = prompt_embeddings.rows();
  for (std::size_t pos : placeholder_positions) {
    if (pos >= t) throw invalid_argument("inject: placeholder position out of range");
  }
  std::vector<std::size_t> sorted = placeholder_positions;
  if (!std::is_sorted(sorted.begin(), sorted.end())) {
    throw invalid_argument("inject: placeholder positions must be ascending");
  }

  InjectionResult out;
  if (placeholder_positions.empty()) {
    out.embeddings = prompt_embeddings;
    out.position_map.resize(t);
    for (std::size_t i = 0; i < t; ++i) out.position_map[i] = i;
    return out;
  }

  std::vector<Tensor> parts;
  out.position_map.resize(t);
  std::size_t cursor = 0;    // next original row to copy
  std::size_t out_row = 0;   // rows emitted so far
  for (std::size_t p = 0; p < placeholder_positions.size(); ++p) {
    const std::size_t pos = placeholder_positions[p];
    if (pos > cursor) {
      parts.push_back(slice_rows(prompt_embeddings, cursor, pos - cursor));
      for (std::size_t i = cursor; i < pos; ++i) out.position_map[i] = out_row++;
    }
    parts.push_back(aligned_blocks[p]);
    out.position_map[pos] = out_row;
    out_row += aligned_blocks[p].rows();
    cursor = pos + 1;
  }
  if (cursor < t) {
    parts.push_back(slice_rows(prompt_embeddings, cursor, t - cursor));
    for (std::size_t i = cursor; i < t; ++i) out.position_map[i] = out_row++;
  }
  out.embeddings = concat_rows(parts);
  return out;
}

}  // namespace kore::align
