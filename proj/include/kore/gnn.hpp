#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "kore/graph.hpp"
#include "kore/rng.hpp"
#include "kore/tensor.hpp"

namespace kore::gnn {

// Multi-head attention conv in the Shi et al. formulation, with edge
// features added into keys and values. Heads live in contiguous column
// blocks of width head_dim.
struct TransformerConvParams {
  Tensor w_q, w_k, w_v;  // d_in x (heads * head_dim)
  Tensor b_q, b_k, b_v;  // 1 x (heads * head_dim)
  Tensor w_e;            // d_edge x (heads * head_dim), no bias so zero edge
                         // features contribute nothing (self-loops)
  Tensor w_o;            // (heads * head_dim) x d_out
  Tensor b_o;            // 1 x d_out
  std::size_t heads = 1;
  std::size_t head_dim = 1;
};

struct GraphNormParams {
  Tensor gain;   // 1 x d
  Tensor bias;   // 1 x d
  Tensor alpha;  // 1 x d, learnable mean scale
};

struct GnnConfig {
  std::size_t layers = 1;
  std::size_t heads = 4;
  std::size_t feature_dim = 64;  // d_phi, conv width
  std::size_t summary_dim = 64;  // d_gnn
};

// Per-node attention over in-neighbors plus an implicit self-loop per node.
// Edge (src -> dst) contributes key/value W_k x_src + W_e e and W_v x_src +
// W_e e at dst; self-loops use zero edge features.
Tensor transformer_conv(const Tensor& node_features, const Tensor& edge_features,
                        const std::vector<std::pair<std::size_t, std::size_t>>& edge_index,
                        const TransformerConvParams& params);

// GraphNorm: per feature dimension, out = gain * (x - alpha*mean) /
// sqrt(second_moment(x - alpha*mean) + 1e-5) + bias, statistics over the
// graph's nodes.
Tensor graph_norm(const Tensor& node_features, const GraphNormParams& params);

class GraphEncoder {
 public:
  GraphEncoder(const GnnConfig& config, Rng& rng);

  // Residual stack h <- h + GraphNorm(Conv(h)); returns the center row,
  // projected to summary_dim when widths differ. A graph with no nodes at
  // all yields a zero summary.
  Tensor encode(const graphio::FeaturizedGraph& graph) const;

  void collect_params(const std::string& prefix,
                      std::vector<std::pair<std::string, Tensor>>& out) const;

  const GnnConfig& config() const { return config_; }
  std::vector<std::pair<TransformerConvParams, GraphNormParams>>& layers() { return layers_; }

 private:
  GnnConfig config_;
  std::vector<std::pair<TransformerConvParams, GraphNormParams>> layers_;
  Tensor out_proj_;  // defined only when feature_dim != summary_dim
};

// Glorot-style uniform init on +/- sqrt(6 / (fan_in + fan_out)).
Tensor glorot(std::size_t fan_in, std::size_t fan_out, Rng& rng);

}  // namespace kore::gnn
