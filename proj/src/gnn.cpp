#include "kore/gnn.hpp"

#include <cmath>

#include "kore/errors.hpp"
#include "kore/ops.hpp"

namespace kore::gnn {

Tensor glorot(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t = Tensor::zeros({fan_in, fan_out}, true);
  for (double& v : t.value()) v = rng.uniform(-bound, bound);
  return t;
}

Tensor transformer_conv(const Tensor& node_features, const Tensor& edge_features,
                        const std::vector<std::pair<std::size_t, std::size_t>>& edge_index,
                        const TransformerConvParams& params) {
  const std::size_t n = node_features.rows();
  const std::size_t width = params.heads * params.head_dim;
  if (params.w_q.cols() != width) {
    throw invalid_argument("transformer_conv: attention width mismatch");
  }
  const std::size_t m = edge_index.size();
  if (edge_features.rows() != m) {
    throw invalid_argument("transformer_conv: edge features do not match edge count");
  }
  for (const auto& [src, dst] : edge_index) {
    if (src >= n || dst >= n) throw invalid_argument("transformer_conv: edge index out of range");
  }

  Tensor q = add(matmul(node_features, params.w_q), tile_rows(params.b_q, n));
  Tensor k = add(matmul(node_features, params.w_k), tile_rows(params.b_k, n));
  Tensor v = add(matmul(node_features, params.w_v), tile_rows(params.b_v, n));

  // Combined edge list: declared edges in their given order, then one
  // self-loop per node. Row order fixes the reduction order.
  std::vector<std::size_t> src_ids, dst_ids;
  src_ids.reserve(m + n);
  dst_ids.reserve(m + n);
  for (const auto& [src, dst] : edge_index) {
    src_ids.push_back(src);
    dst_ids.push_back(dst);
  }
  for (std::size_t i = 0; i < n; ++i) {
    src_ids.push_back(i);
    dst_ids.push_back(i);
  }

  Tensor k_src = gather_rows(k, src_ids);
  Tensor v_src = gather_rows(v, src_ids);
  Tensor k_edge = k_src, v_edge = v_src;
  if (m > 0) {
    Tensor e_proj = concat_rows({matmul(edge_features, params.w_e), Tensor::zeros({n, width})});
    k_edge = add(k_src, e_proj);
    v_edge = add(v_src, e_proj);
  }
  Tensor q_dst = gather_rows(q, dst_ids);

  Tensor scores = scale(sum_col_groups(mul(q_dst, k_edge), params.heads),
                        1.0 / std::sqrt(static_cast<double>(params.head_dim)));
  Tensor alpha = segment_softmax(scores, dst_ids, n);
  Tensor weighted = mul(v_edge, repeat_cols(alpha, params.head_dim));
  Tensor agg = segment_sum(weighted, dst_ids, n);
  return add(matmul(agg, params.w_o), tile_rows(params.b_o, n));
}

Tensor graph_norm(const Tensor& node_features, const GraphNormParams& params) {
  const std::size_t n = node_features.rows();
  const std::size_t d = node_features.cols();
  if (n == 0) throw invalid_argument("graph_norm: at least one node required");
  if (params.gain.numel() != d || params.bias.numel() != d || params.alpha.numel() != d) {
    throw invalid_argument("graph_norm: parameter width mismatch");
  }
  Tensor mean = scale(sum_axis0(node_features), 1.0 / static_cast<double>(n));
  Tensor shifted = sub(node_features, mul(tile_rows(mean, n), tile_rows(params.alpha, n)));
  Tensor second_moment = scale(sum_axis0(mul(shifted, shifted)), 1.0 / static_cast<double>(n));
  Tensor inv_std = rsqrt(second_moment, 1e-5);
  Tensor normed = mul(shifted, tile_rows(inv_std, n));
  return add(mul(normed, tile_rows(params.gain, n)), tile_rows(params.bias, n));
}

GraphEncoder::GraphEncoder(const GnnConfig& config, Rng& rng) : config_(config) {
  if (config.layers < 1) throw config_error("gnn: at least one layer required");
  if (config.heads < 1 || config.feature_dim % config.heads != 0) {
    throw config_error("gnn: feature_dim must be divisible by heads");
  }
  const std::size_t d = config.feature_dim;
  for (std::size_t l = 0; l < config.layers; ++l) {
    TransformerConvParams conv;
    conv.heads = config.heads;
    conv.head_dim = d / config.heads;
    conv.w_q = glorot(d, d, rng);
    conv.w_k = glorot(d, d, rng);
    conv.w_v = glorot(d, d, rng);
    conv.w_e = glorot(d, d, rng);
    conv.w_o = glorot(d, d, rng);
    conv.b_q = Tensor::zeros({1, d}, true);
    conv.b_k = Tensor::zeros({1, d}, true);
    conv.b_v = Tensor::zeros({1, d}, true);
    conv.b_o = Tensor::zeros({1, d}, true);
    GraphNormParams norm;
    norm.gain = Tensor::full({1, d}, 1.0, true);
    norm.bias = Tensor::zeros({1, d}, true);
    norm.alpha = Tensor::full({1, d}, 1.0, true);
    layers_.emplace_back(std::move(conv), std::move(norm));
  }
  if (config.feature_dim != config.summary_dim) {
    out_proj_ = glorot(config.feature_dim, config.summary_dim, rng);
  }
}

Tensor GraphEncoder::encode(const graphio::FeaturizedGraph& graph) const {
  if (graph.node_features.rows() == 0) {
    return Tensor::zeros({1, config_.summary_dim});
  }
  Tensor h = graph.node_features;
  for (const auto& [conv, norm] : layers_) {
    h = add(h, graph_norm(transformer_conv(h, graph.edge_features, graph.edge_index, conv),
                          norm));
  }
  Tensor summary = slice_rows(h, graph.center_index, 1);
  if (out_proj_.defined()) summary = matmul(summary, out_proj_);
  return summary;
}

void GraphEncoder::collect_params(const std::string& prefix,
                                  std::vector<std::pair<std::string, Tensor>>& out) const {
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const std::string base = prefix + "layer" + std::to_string(l) + ".";
    const auto& [conv, norm] = layers_[l];
    out.emplace_back(base + "w_q", conv.w_q);
    out.emplace_back(base + "w_k", conv.w_k);
    out.emplace_back(base + "w_v", conv.w_v);
    out.emplace_back(base + "w_e", conv.w_e);
    out.emplace_back(base + "w_o", conv.w_o);
    out.emplace_back(base + "b_q", conv.b_q);
    out.emplace_back(base + "b_k", conv.b_k);
    out.emplace_back(base + "b_v", conv.b_v);
    out.emplace_back(base + "b_o", conv.b_o);
    out.emplace_back(base + "norm.gain", norm.gain);
    out.emplace_back(base + "norm.bias", norm.bias);
    out.emplace_back(base + "norm.alpha", norm.alpha);
  }
  if (out_proj_.defined()) out.emplace_back(prefix + "out_proj", out_proj_);
}

}  // namespace kore::gnn
