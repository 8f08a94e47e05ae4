#include <doctest.h>

#include <cmath>
#include <vector>

#include "kore/embedding.hpp"
#include "kore/gnn.hpp"
#include "kore/graph.hpp"
#include "kore/ops.hpp"
#include "kore/rng.hpp"

using namespace kore;
using namespace kore::gnn;
using kore::graphio::FeaturizedGraph;

namespace {

using Mat = std::vector<std::vector<double>>;

Mat to_mat(const Tensor& t) {
  Mat m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t i = 0; i < t.rows(); ++i) {
    for (std::size_t j = 0; j < t.cols(); ++j) m[i][j] = t.at(i, j);
  }
  return m;
}

// From-scratch dense re-implementation of the conv equations, independent of
// the tensor engine. Self-loops appended after the declared edges, exactly
// like the implementation under test.
Mat dense_conv_oracle(const Mat& x, const Mat& e,
                      const std::vector<std::pair<std::size_t, std::size_t>>& edges,
                      const TransformerConvParams& p) {
  const std::size_t n = x.size(), d = x[0].size();
  const std::size_t width = p.heads * p.head_dim;
  auto affine = [&](const Mat& in, const Tensor& w, const Tensor& b) {
    Mat out(in.size(), std::vector<double>(w.cols(), 0.0));
    for (std::size_t i = 0; i < in.size(); ++i) {
      for (std::size_t c = 0; c < w.cols(); ++c) {
        double acc = b.defined() ? b.at(0, c) : 0.0;
        for (std::size_t t = 0; t < in[i].size(); ++t) acc += in[i][t] * w.at(t, c);
        out[i][c] = acc;
      }
    }
    return out;
  };
  Mat q = affine(x, p.w_q, p.b_q), k = affine(x, p.w_k, p.b_k), v = affine(x, p.w_v, p.b_v);
  Mat eproj = e.empty() ? Mat{} : affine(e, p.w_e, Tensor{});

  struct Row { std::size_t src, dst; std::vector<double> kv_extra; };
  std::vector<Row> rows;
  for (std::size_t i = 0; i < edges.size(); ++i) {
    rows.push_back({edges[i].first, edges[i].second, eproj[i]});
  }
  for (std::size_t i = 0; i < n; ++i) rows.push_back({i, i, std::vector<double>(width, 0.0)});

  Mat agg(n, std::vector<double>(width, 0.0));
  for (std::size_t h = 0; h < p.heads; ++h) {
    for (std::size_t node = 0; node < n; ++node) {
      std::vector<std::size_t> in_rows;
      for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].dst == node) in_rows.push_back(r);
      }
      std::vector<double> scores;
      for (std::size_t r : in_rows) {
        double s = 0.0;
        for (std::size_t t = 0; t < p.head_dim; ++t) {
          const std::size_t c = h * p.head_dim + t;
          s += q[node][c] * (k[rows[r].src][c] + rows[r].kv_extra[c]);
        }
        scores.push_back(s / std::sqrt(static_cast<double>(p.head_dim)));
      }
      double mx = scores.empty() ? 0.0 : *std::max_element(scores.begin(), scores.end());
      double denom = 0.0;
      for (double& s : scores) {
        s = std::exp(s - mx);
        denom += s;
      }
      for (std::size_t idx = 0; idx < in_rows.size(); ++idx) {
        const double alpha = scores[idx] / denom;
        const Row& row = rows[in_rows[idx]];
        for (std::size_t t = 0; t < p.head_dim; ++t) {
          const std::size_t c = h * p.head_dim + t;
          agg[node][c] += alpha * (v[row.src][c] + row.kv_extra[c]);
        }
      }
    }
  }
  (void)d;
  Mat out(n, std::vector<double>(p.w_o.cols(), 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < p.w_o.cols(); ++c) {
      double acc = p.b_o.at(0, c);
      for (std::size_t t = 0; t < width; ++t) acc += agg[i][t] * p.w_o.at(t, c);
      out[i][c] = acc;
    }
  }
  return out;
}

Mat dense_graph_norm_oracle(const Mat& x, const GraphNormParams& p) {
  const std::size_t n = x.size(), d = x[0].size();
  Mat out(n, std::vector<double>(d));
  for (std::size_t j = 0; j < d; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += x[i][j];
    mean /= static_cast<double>(n);
    double second = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double s = x[i][j] - p.alpha.at(0, j) * mean;
      second += s * s;
    }
    second /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(second + 1e-5);
    for (std::size_t i = 0; i < n; ++i) {
      const double s = x[i][j] - p.alpha.at(0, j) * mean;
      out[i][j] = p.gain.at(0, j) * s * inv + p.bias.at(0, j);
    }
  }
  return out;
}

TransformerConvParams random_conv(std::size_t d, std::size_t heads, Rng& rng) {
  TransformerConvParams p;
  p.heads = heads;
  p.head_dim = d / heads;
  p.w_q = glorot(d, d, rng);
  p.w_k = glorot(d, d, rng);
  p.w_v = glorot(d, d, rng);
  p.w_e = glorot(d, d, rng);
  p.w_o = glorot(d, d, rng);
  p.b_q = Tensor::zeros({1, d}, true);
  p.b_k = Tensor::zeros({1, d}, true);
  p.b_v = Tensor::zeros({1, d}, true);
  p.b_o = Tensor::zeros({1, d}, true);
  for (double& v : p.b_q.value()) v = rng.uniform(-0.1, 0.1);
  for (double& v : p.b_o.value()) v = rng.uniform(-0.1, 0.1);
  return p;
}

Tensor random_features(std::size_t n, std::size_t d, Rng& rng) {
  Tensor t = Tensor::zeros({n, d});
  for (double& v : t.value()) v = rng.uniform(-1, 1);
  return t;
}

// A small handmade star graph, center node 0.
FeaturizedGraph make_star(std::size_t n_neighbors, std::size_t d, Rng& rng) {
  FeaturizedGraph f;
  f.node_features = random_features(n_neighbors + 1, d, rng);
  f.edge_features = random_features(n_neighbors, d, rng);
  for (std::size_t i = 0; i < n_neighbors; ++i) f.edge_index.emplace_back(i + 1, 0);
  f.center_index = 0;
  return f;
}

Tensor identity(std::size_t d) {
  Tensor t = Tensor::zeros({d, d});
  for (std::size_t i = 0; i < d; ++i) t.at(i, i) = 1.0;
  return t;
}

}  // namespace

TEST_SUITE_BEGIN("gnn");

TEST_CASE("single node with identity value path returns its input") {
  const std::size_t d = 4;
  TransformerConvParams p;
  p.heads = 1;
  p.head_dim = d;
  p.w_q = Tensor::zeros({d, d});
  p.w_k = Tensor::zeros({d, d});
  p.w_v = identity(d);
  p.w_e = Tensor::zeros({d, d});
  p.w_o = identity(d);
  p.b_q = Tensor::zeros({1, d});
  p.b_k = Tensor::zeros({1, d});
  p.b_v = Tensor::zeros({1, d});
  p.b_o = Tensor::zeros({1, d});
  Tensor x = Tensor::from({1, d}, {0.3, -1.2, 0.0, 2.5});
  Tensor out = transformer_conv(x, Tensor::zeros({0, d}), {}, p);
  for (std::size_t j = 0; j < d; ++j) CHECK(out.at(0, j) == doctest::Approx(x.at(0, j)));
}

TEST_CASE("two identical neighbors split attention evenly") {
  // Scores forced to zero: uniform attention over {nb, nb, self}. The center
  // value path is zero, so the output is exactly 2/3 of one neighbor value.
  const std::size_t d = 4;
  TransformerConvParams p;
  p.heads = 2;
  p.head_dim = 2;
  p.w_q = Tensor::zeros({d, d});
  p.w_k = Tensor::zeros({d, d});
  p.w_v = identity(d);
  p.w_e = Tensor::zeros({d, d});
  p.w_o = identity(d);
  p.b_q = Tensor::zeros({1, d});
  p.b_k = Tensor::zeros({1, d});
  p.b_v = Tensor::zeros({1, d});
  p.b_o = Tensor::zeros({1, d});
  Tensor x = Tensor::from({3, d}, {0, 0, 0, 0,          // center
                                   1, 2, 3, 4, 1, 2, 3, 4});  // identical neighbors
  Tensor out = transformer_conv(x, Tensor::zeros({2, d}),
                                {{1, 0}, {2, 0}}, p);
  for (std::size_t j = 0; j < d; ++j) {
    CHECK(out.at(0, j) == doctest::Approx(2.0 / 3.0 * x.at(1, j)).epsilon(1e-12));
  }
}

TEST_CASE("transformer_conv matches the dense oracle") {
  Rng rng(2024);
  const std::size_t d = 8;
  auto p = random_conv(d, 2, rng);
  auto f = make_star(3, d, rng);
  Tensor out = transformer_conv(f.node_features, f.edge_features, f.edge_index, p);
  Mat oracle = dense_conv_oracle(to_mat(f.node_features), to_mat(f.edge_features),
                                 f.edge_index, p);
  for (std::size_t i = 0; i < out.rows(); ++i) {
    for (std::size_t j = 0; j < out.cols(); ++j) {
      CHECK(std::fabs(out.at(i, j) - oracle[i][j]) < 1e-10);
    }
  }
}

TEST_CASE("transformer_conv gradient vs finite differences") {
  Rng rng(31);
  const std::size_t d = 6;
  auto p = random_conv(d, 2, rng);
  auto f = make_star(3, d, rng);
  f.node_features.set_requires_grad(true);
  f.edge_features.set_requires_grad(true);
  std::vector<Tensor> inputs = {f.node_features, f.edge_features, p.w_q, p.w_k, p.w_v,
                                p.w_e,           p.w_o,           p.b_q, p.b_v, p.b_o};
  double err = grad_check(
      [&] {
        return sum_all(transformer_conv(f.node_features, f.edge_features, f.edge_index, p));
      },
      inputs);
  CHECK(err < 1e-4);
}

TEST_CASE("graph_norm degenerate and boundary cases") {
  const std::size_t d = 3;
  GraphNormParams p;
  p.gain = Tensor::full({1, d}, 1.0);
  p.bias = Tensor::zeros({1, d});
  p.alpha = Tensor::full({1, d}, 1.0);

  // Single node, alpha=1: shifted values vanish, output is the bias.
  Tensor single = Tensor::from({1, d}, {4.0, -2.0, 9.0});
  Tensor out = graph_norm(single, p);
  for (double v : out.value()) CHECK(v == doctest::Approx(0.0));

  // alpha=0: pure per-graph scaling by the uncentered second moment.
  p.alpha = Tensor::zeros({1, d});
  Tensor x = Tensor::from({2, d}, {1, 2, 3, -1, 4, 1});
  Tensor scaled = graph_norm(x, p);
  for (std::size_t j = 0; j < d; ++j) {
    double second = (x.at(0, j) * x.at(0, j) + x.at(1, j) * x.at(1, j)) / 2.0;
    for (std::size_t i = 0; i < 2; ++i) {
      CHECK(scaled.at(i, j) == doctest::Approx(x.at(i, j) / std::sqrt(second + 1e-5)));
    }
  }
}

TEST_CASE("graph_norm matches dense oracle and gradient check") {
  Rng rng(57);
  GraphNormParams p;
  p.gain = Tensor::zeros({1, 8}, true);
  p.bias = Tensor::zeros({1, 8}, true);
  p.alpha = Tensor::zeros({1, 8}, true);
  for (double& v : p.gain.value()) v = rng.uniform(0.5, 1.5);
  for (double& v : p.bias.value()) v = rng.uniform(-0.5, 0.5);
  for (double& v : p.alpha.value()) v = rng.uniform(0.0, 1.0);
  Tensor x = random_features(5, 8, rng);

  Tensor out = graph_norm(x, p);
  Mat oracle = dense_graph_norm_oracle(to_mat(x), p);
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = 0; j < 8; ++j) CHECK(std::fabs(out.at(i, j) - oracle[i][j]) < 1e-12);
  }

  x.set_requires_grad(true);
  double err = grad_check([&] { return sum_all(graph_norm(x, p)); },
                          {x, p.gain, p.bias, p.alpha});
  CHECK(err < 1e-4);
}

TEST_CASE("encoder matches dense oracle on a 3-neighbor star") {
  Rng rng(99);
  GnnConfig cfg{1, 2, 8, 8};
  GraphEncoder enc(cfg, rng);
  auto f = make_star(3, 8, rng);
  Tensor summary = enc.encode(f);

  const auto& [conv, norm] = enc.layers()[0];
  Mat x = to_mat(f.node_features);
  Mat conv_out = dense_conv_oracle(x, to_mat(f.edge_features), f.edge_index, conv);
  Mat normed = dense_graph_norm_oracle(conv_out, norm);
  for (std::size_t j = 0; j < 8; ++j) {
    CHECK(std::fabs(summary.at(0, j) - (x[0][j] + normed[0][j])) < 1e-10);
  }
}

TEST_CASE("empty neighbor list flows through the self-loop path") {
  Rng rng(13);
  GnnConfig cfg{1, 2, 8, 8};
  GraphEncoder enc(cfg, rng);
  FeaturizedGraph f;
  f.node_features = random_features(1, 8, rng);
  f.edge_features = Tensor::zeros({0, 8});
  f.center_index = 0;
  Tensor summary = enc.encode(f);
  CHECK(summary.rows() == 1);
  CHECK(summary.all_finite());

  const auto& [conv, norm] = enc.layers()[0];
  Mat conv_out = dense_conv_oracle(to_mat(f.node_features), {}, {}, conv);
  Mat normed = dense_graph_norm_oracle(conv_out, norm);
  for (std::size_t j = 0; j < 8; ++j) {
    CHECK(std::fabs(summary.at(0, j) - (f.node_features.at(0, j) + normed[0][j])) < 1e-10);
  }

  // A graph with no nodes at all degrades to a zero summary.
  FeaturizedGraph none;
  none.node_features = Tensor::zeros({0, 8});
  none.edge_features = Tensor::zeros({0, 8});
  Tensor zero = enc.encode(none);
  for (double v : zero.value()) CHECK(v == 0.0);
}

TEST_CASE("permuting the neighbor list leaves the summary bit-identical") {
  Rng rng(42);
  using namespace kore::graphio;
  auto provider = EmbeddingProvider::hash_fallback(8);
  std::vector<Triple> triples;
  for (int i = 0; i < 5; ++i) {
    const std::string n = "n" + std::to_string(i);
    triples.push_back({{"c", "center"}, {"r" + std::to_string(i % 2), "rel"}, {n, n}});
  }
  StarGraph g = build_star_graph({"c", "center"}, triples, {}, 10);

  StarGraph permuted = g;
  std::reverse(permuted.neighbors.begin(), permuted.neighbors.end());

  Rng enc_rng(321);
  GraphEncoder enc(GnnConfig{1, 2, 8, 8}, enc_rng);
  Tensor a = enc.encode(featurize(g, provider));
  Tensor b = enc.encode(featurize(permuted, provider));
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.value()[i] == b.value()[i]);
}

TEST_CASE("residual path with zeroed parameters is the identity on the center") {
  Rng rng(7);
  GnnConfig cfg{2, 2, 8, 8};
  GraphEncoder enc(cfg, rng);
  for (auto& [conv, norm] : enc.layers()) {
    for (Tensor* t : {&conv.w_q, &conv.w_k, &conv.w_v, &conv.w_e, &conv.w_o, &conv.b_q,
                      &conv.b_k, &conv.b_v, &conv.b_o, &norm.gain, &norm.bias, &norm.alpha}) {
      for (double& v : t->value()) v = 0.0;
    }
  }
  auto f = make_star(4, 8, rng);
  Tensor summary = enc.encode(f);
  for (std::size_t j = 0; j < 8; ++j) {
    CHECK(summary.at(0, j) == doctest::Approx(f.node_features.at(0, j)).epsilon(1e-15));
  }
}

TEST_CASE("end-to-end encoder gradients on random stars") {
  Rng rng(88);
  GnnConfig cfg{1, 2, 8, 6};  // projection path included
  GraphEncoder enc(cfg, rng);
  auto f = make_star(4, 8, rng);
  f.node_features.set_requires_grad(true);

  std::vector<Tensor> inputs = {f.node_features};
  std::vector<std::pair<std::string, Tensor>> params;
  enc.collect_params("gnn.", params);
  for (auto& [name, t] : params) inputs.push_back(t);

  double err = grad_check([&] { return sum_all(enc.encode(f)); }, inputs);
  CHECK(err < 1e-4);
}

TEST_SUITE_END();
