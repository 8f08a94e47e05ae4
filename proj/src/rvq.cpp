#include "kore/rvq.hpp"

#include <algorithm>
#include <cmath>

#include "kore/errors.hpp"
#include "kore/ops.hpp"

namespace kore::rvq {

namespace {

constexpr double kZeroResidual = 1e-12;

double dot(const std::vector<double>& a, const double* b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

double norm(const std::vector<double>& v) {
  double acc = 0.0;
  for (double x : v) acc += x * x;
  return std::sqrt(acc);
}

}  // namespace

void RVQConfig::validate() const {
  if (num_stages < 1) throw config_error("rvq: Q must be >= 1");
  if (codebook_size < 2) throw config_error("rvq: codebook size must be >= 2");
  if (beta < 0.0) throw config_error("rvq: beta must be >= 0");
  if (n_dead < 1) throw config_error("rvq: N_dead must be >= 1");
  if (ema_decay <= 0.0 || ema_decay >= 1.0) {
    throw config_error("rvq: ema decay must be in (0,1)");
  }
}

Codebook::Codebook(std::size_t num_stages, std::size_t codebook_size, std::size_t dim,
                   Rng& rng)
    : codebook_size_(codebook_size), dim_(dim) {
  if (num_stages < 1 || codebook_size < 2 || dim < 1) {
    throw invalid_argument("codebook: need Q >= 1, K >= 2, d >= 1");
  }
  for (std::size_t t = 0; t < num_stages; ++t) {
    Stage s;
    s.codes = Tensor::zeros({codebook_size, dim});
    for (std::size_t k = 0; k < codebook_size; ++k) {
      double n = 0.0;
      std::vector<double> row(dim);
      while (n < 1e-8) {
        for (double& x : row) x = rng.normal();
        n = l2_norm(row);
      }
      for (std::size_t j = 0; j < dim; ++j) s.codes.at(k, j) = row[j] / n;
    }
    s.ema_acc = s.codes.detach_copy();
    s.ema_cnt = Tensor::full({codebook_size}, 1.0);
    s.steps_since_use.assign(codebook_size, 0);
    s.usage.assign(codebook_size, 0);
    stages_.push_back(std::move(s));
  }
}

std::vector<double> Codebook::code(std::size_t stage, std::size_t index) const {
  const Stage& s = stages_.at(stage);
  std::vector<double> out(dim_);
  for (std::size_t j = 0; j < dim_; ++j) out[j] = s.codes.at(index, j);
  return out;
}

void Codebook::set_code(std::size_t stage, std::size_t index, const std::vector<double>& v) {
  if (v.size() != dim_) throw invalid_argument("codebook: wrong code dimension");
  Stage& s = stages_.at(stage);
  for (std::size_t j = 0; j < dim_; ++j) s.codes.at(index, j) = v[j];
}

double Codebook::max_unit_norm_error() const {
  double worst = 0.0;
  for (const Stage& s : stages_) {
    for (std::size_t k = 0; k < codebook_size_; ++k) {
      double acc = 0.0;
      for (std::size_t j = 0; j < dim_; ++j) acc += s.codes.at(k, j) * s.codes.at(k, j);
      worst = std::max(worst, std::fabs(std::sqrt(acc) - 1.0));
    }
  }
  return worst;
}

void Codebook::reset_usage() {
  for (Stage& s : stages_) s.usage.assign(codebook_size_, 0);
}

void Codebook::save_to(Checkpoint& ck, const std::string& prefix) const {
  for (std::size_t t = 0; t < stages_.size(); ++t) {
    const std::string base = prefix + "stage" + std::to_string(t) + ".";
    const Stage& s = stages_[t];
    ck.put(base + "codes", s.codes);
    ck.put(base + "ema_acc", s.ema_acc);
    ck.put(base + "ema_cnt", s.ema_cnt);
    Tensor steps = Tensor::zeros({codebook_size_});
    Tensor usage = Tensor::zeros({codebook_size_});
    for (std::size_t k = 0; k < codebook_size_; ++k) {
      steps.value()[k] = static_cast<double>(s.steps_since_use[k]);
      usage.value()[k] = static_cast<double>(s.usage[k]);
    }
    ck.put(base + "steps_since_use", steps);
    ck.put(base + "usage", usage);
  }
}

Codebook Codebook::load_from(const Checkpoint& ck, const std::string& prefix) {
  Codebook cb;
  for (std::size_t t = 0;; ++t) {
    const std::string base = prefix + "stage" + std::to_string(t) + ".";
    if (!ck.has(base + "codes")) break;
    Stage s;
    s.codes = ck.get(base + "codes");
    s.ema_acc = ck.get(base + "ema_acc");
    s.ema_cnt = ck.get(base + "ema_cnt");
    Tensor steps = ck.get(base + "steps_since_use");
    Tensor usage = ck.get(base + "usage");
    const std::size_t k = s.codes.rows();
    s.steps_since_use.resize(k);
    s.usage.resize(k);
    for (std::size_t i = 0; i < k; ++i) {
      s.steps_since_use[i] = static_cast<std::int64_t>(steps.value()[i]);
      s.usage[i] = static_cast<std::uint64_t>(usage.value()[i]);
    }
    cb.codebook_size_ = k;
    cb.dim_ = s.codes.cols();
    cb.stages_.push_back(std::move(s));
  }
  if (cb.stages_.empty()) throw io_error("codebook: no stages under prefix '" + prefix + "'");
  return cb;
}

QuantizationResult quantize(const std::vector<double>& summary, const Codebook& cb,
                            const RVQConfig& config) {
  if (summary.size() != cb.dim()) throw invalid_argument("quantize: dimension mismatch");
  QuantizationResult res;
  std::vector<double> r = summary;
  res.residual_trace.push_back(r);
  for (std::size_t t = 0; t < config.num_stages; ++t) {
    const double rn = norm(r);
    if (rn < kZeroResidual) {
      res.degenerate = true;
      res.indices.push_back(0);
      res.tokens.emplace_back(cb.dim(), 0.0);
      res.cosines.push_back(0.0);
      res.residual_trace.push_back(r);
      continue;
    }
    const Codebook::Stage& stage = cb.stage(t);
    std::size_t best = 0;
    double best_dot = dot(r, stage.codes.value().data());
    for (std::size_t k = 1; k < cb.size(); ++k) {
      const double d = dot(r, stage.codes.value().data() + k * cb.dim());
      if (d > best_dot) {
        best_dot = d;
        best = k;
      }
    }
    res.indices.push_back(best);
    res.cosines.push_back(best_dot / rn);
    std::vector<double> token(cb.dim());
    const double* c = stage.codes.value().data() + best * cb.dim();
    for (std::size_t j = 0; j < cb.dim(); ++j) {
      token[j] = best_dot * c[j];
      r[j] -= token[j];
    }
    res.tokens.push_back(std::move(token));
    res.residual_trace.push_back(r);
  }
  res.rvq_loss = rvq_loss(res, config);
  return res;
}

QuantizationResult subtractive_quantize(const std::vector<double>& summary,
                                        const Codebook& cb, const RVQConfig& config) {
  if (summary.size() != cb.dim()) throw invalid_argument("quantize: dimension mismatch");
  QuantizationResult res;
  std::vector<double> r = summary;
  res.residual_trace.push_back(r);
  for (std::size_t t = 0; t < config.num_stages; ++t) {
    const double rn = norm(r);
    if (rn < kZeroResidual) {
      res.degenerate = true;
      res.indices.push_back(0);
      res.tokens.emplace_back(cb.dim(), 0.0);
      res.cosines.push_back(0.0);
      res.residual_trace.push_back(r);
      continue;
    }
    const Codebook::Stage& stage = cb.stage(t);
    std::size_t best = 0;
    double best_dist = 0.0;
    for (std::size_t k = 0; k < cb.size(); ++k) {
      const double* c = stage.codes.value().data() + k * cb.dim();
      double dist = 0.0;
      for (std::size_t j = 0; j < cb.dim(); ++j) {
        const double diff = r[j] - c[j];
        dist += diff * diff;
      }
      if (k == 0 || dist < best_dist) {
        best_dist = dist;
        best = k;
      }
    }
    res.indices.push_back(best);
    const double* c = stage.codes.value().data() + best * cb.dim();
    res.cosines.push_back(dot(r, c) / rn);
    std::vector<double> token(c, c + cb.dim());
    for (std::size_t j = 0; j < cb.dim(); ++j) r[j] -= token[j];
    res.tokens.push_back(std::move(token));
    res.residual_trace.push_back(r);
  }
  res.rvq_loss = rvq_loss(res, config);
  return res;
}

double rvq_loss(const QuantizationResult& result, const RVQConfig& config) {
  double commit = 0.0;
  for (double c : result.cosines) commit += 1.0 - c;
  const std::vector<double>& final_r = result.residual_trace.back();
  double tail = 0.0;
  for (double x : final_r) tail += x * x;
  return config.beta * commit + tail;
}

Tensor pinned_rvq_loss_on_tape(const Tensor& summary, const Codebook& cb,
                               const RVQConfig& config,
                               const std::vector<std::size_t>& indices) {
  if (indices.size() != config.num_stages) {
    throw invalid_argument("rvq: pinned index count must equal Q");
  }
  Tensor r = summary;
  Tensor commit = Tensor::scalar(0.0);
  for (std::size_t t = 0; t < config.num_stages; ++t) {
    const double rn = l2_norm(r.value());
    if (rn < kZeroResidual) {
      // Exhausted residual: the stage contributes a constant (1 - 0) and the
      // remaining recursion is frozen.
      commit = add_scalar(commit, 1.0);
      continue;
    }
    Tensor c = Tensor::row(cb.code(t, indices[t]));
    Tensor d = sum_all(mul(r, c));
    Tensor k_hat = mul_bc(c, d);
    Tensor norm_sq = sum_all(mul(r, r));
    Tensor cosine = mul_bc(d, rsqrt(norm_sq, 0.0));
    commit = add(commit, sub(Tensor::scalar(1.0), cosine));
    r = sub(r, k_hat);
  }
  return add(scale(commit, config.beta), sum_all(mul(r, r)));
}

TapeQuantization quantize_on_tape(const Tensor& summary, const Codebook& cb,
                                  const RVQConfig& config) {
  if (summary.rows() != 1 || summary.cols() != cb.dim()) {
    throw invalid_argument("quantize: expected {1,d} summary, got " + summary.shape_str());
  }
  TapeQuantization out;
  out.result = quantize(summary.value(), cb, config);

  // Straight-through tokens: forward value k-hat_t, backward identity to the
  // summary at every stage.
  std::vector<Tensor> rows;
  rows.reserve(config.num_stages);
  for (std::size_t t = 0; t < config.num_stages; ++t) {
    std::vector<double> offset(cb.dim());
    for (std::size_t j = 0; j < cb.dim(); ++j) {
      offset[j] = out.result.tokens[t][j] - summary.value()[j];
    }
    rows.push_back(add(summary, Tensor::row(offset)));
  }
  out.tokens = concat_rows(rows);
  out.loss = pinned_rvq_loss_on_tape(summary, cb, config, out.result.indices);
  return out;
}

void ResidualPool::push(const std::vector<double>& residual) {
  double acc = 0.0;
  for (double x : residual) acc += x * x;
  if (acc < kZeroResidual * kZeroResidual) return;
  items_.push_back(residual);
  while (items_.size() > capacity_) items_.pop_front();
}

const std::vector<double>& ResidualPool::sample(Rng& rng) const {
  if (items_.empty()) throw invalid_argument("residual pool: empty");
  return items_[rng.below(items_.size())];
}

void ema_update(Codebook& cb, const std::vector<Assignment>& batch,
                std::size_t graph_count, const RVQConfig& config) {
  const double decay = config.ema_decay;
  std::vector<std::vector<bool>> selected(cb.num_stages(),
                                          std::vector<bool>(cb.size(), false));
  for (const Assignment& a : batch) {
    const double n = norm(a.residual);
    if (n < kZeroResidual) continue;
    Codebook::Stage& stage = cb.stage(a.stage);
    selected[a.stage][a.index] = true;
    stage.usage[a.index]++;
    double* acc = stage.ema_acc.value().data() + a.index * cb.dim();
    for (std::size_t j = 0; j < cb.dim(); ++j) {
      acc[j] = decay * acc[j] + (1.0 - decay) * a.residual[j] / n;
    }
    double& cnt = stage.ema_cnt.value()[a.index];
    cnt = decay * cnt + (1.0 - decay);
  }
  for (std::size_t t = 0; t < cb.num_stages(); ++t) {
    Codebook::Stage& stage = cb.stage(t);
    for (std::size_t k = 0; k < cb.size(); ++k) {
      if (selected[t][k]) {
        stage.steps_since_use[k] = 0;
        const double* acc = stage.ema_acc.value().data() + k * cb.dim();
        const double cnt = stage.ema_cnt.value()[k];
        std::vector<double> mean(cb.dim());
        for (std::size_t j = 0; j < cb.dim(); ++j) mean[j] = acc[j] / cnt;
        const double n = l2_norm(mean);
        if (n > kZeroResidual) {
          for (std::size_t j = 0; j < cb.dim(); ++j) stage.codes.at(k, j) = mean[j] / n;
        }
      } else {
        stage.steps_since_use[k] += static_cast<std::int64_t>(graph_count);
      }
    }
  }
}

std::size_t dead_code_reset(Codebook& cb, const RVQConfig& config, ResidualPool& pool,
                            Rng& rng) {
  const auto threshold = static_cast<std::int64_t>(config.reset_threshold());
  std::size_t resets = 0;
  for (std::size_t t = 0; t < cb.num_stages(); ++t) {
    Codebook::Stage& stage = cb.stage(t);
    for (std::size_t k = 0; k < cb.size(); ++k) {
      if (stage.steps_since_use[k] < threshold) continue;
      if (pool.empty()) return resets;  // deferred until residuals exist
      std::vector<double> fresh = pool.sample(rng);
      const double n = l2_norm(fresh);
      for (std::size_t j = 0; j < cb.dim(); ++j) {
        const double v = fresh[j] / n;
        stage.codes.at(k, j) = v;
        stage.ema_acc.at(k, j) = v;
      }
      stage.ema_cnt.value()[k] = 1.0;
      stage.steps_since_use[k] = 0;
      ++resets;
    }
  }
  return resets;
}

CodebookStats codebook_stats(const std::vector<std::uint64_t>& usage_histogram) {
  CodebookStats stats;
  if (usage_histogram.empty()) return stats;
  double total = 0.0;
  std::size_t dead = 0;
  for (std::uint64_t u : usage_histogram) {
    total += static_cast<double>(u);
    if (u == 0) ++dead;
  }
  stats.dead_fraction =
      static_cast<double>(dead) / static_cast<double>(usage_histogram.size());
  if (total == 0.0) return stats;
  double entropy = 0.0;
  for (std::uint64_t u : usage_histogram) {
    if (u == 0) continue;
    const double p = static_cast<double>(u) / total;
    entropy -= p * std::log(p);
  }
  stats.entropy = entropy;
  stats.perplexity = std::exp(entropy);
  return stats;
}

}  // namespace kore::rvq
