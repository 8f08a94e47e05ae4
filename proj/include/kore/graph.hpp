#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "kore/tensor.hpp"

namespace kore::graphio {

struct EntityId {
  std::string id;
  std::string label;  // falls back to id when missing

  bool operator==(const EntityId& o) const { return id == o.id; }
};

struct Relation {
  std::string id;
  std::string label;
};

struct Triple {
  EntityId subject;
  Relation relation;
  EntityId object;
};

enum class Direction : std::uint8_t { outgoing, incoming };

// One ranked neighbor of the center: the full triple, which side the center
// sits on, and the PageRank score of the other endpoint.
struct StarEdge {
  Triple triple;
  Direction direction = Direction::outgoing;
  double pagerank_score = 0.0;
};

struct StarGraph {
  EntityId center;
  std::vector<StarEdge> neighbors;  // score descending, ties by neighbor id
  std::size_t max_edges = 0;
  bool empty_warning = false;  // center was absent from every triple

  // The endpoint that is not the center.
  static const EntityId& neighbor_of(const StarEdge& e) {
    return e.direction == Direction::outgoing ? e.triple.object : e.triple.subject;
  }
};

struct TripleLoadReport {
  std::vector<Triple> triples;
  std::vector<std::string> malformed;  // "line N: reason"
};

// JSONL with fields subject_id, subject_label, relation_id, relation_label,
// object_id, object_label. Malformed lines are reported, not fatal, unless
// they exceed 10% of non-empty lines.
TripleLoadReport load_triples_jsonl(const std::string& path);
void save_triples_jsonl(const std::string& path, const std::vector<Triple>& triples);

// Power iteration over the directed edge list. Dangling mass is spread
// uniformly; the result sums to 1 over the node set. The node set defaults
// to every edge endpoint; pass it explicitly to include isolated nodes.
std::map<std::string, double> pagerank(
    const std::vector<std::pair<std::string, std::string>>& edges, double damping,
    int iterations);
std::map<std::string, double> pagerank(
    const std::vector<std::string>& nodes,
    const std::vector<std::pair<std::string, std::string>>& edges, double damping,
    int iterations);

// Keeps the max_edges neighbors with the highest score of the non-center
// endpoint; ties break by ascending neighbor id. Duplicate
// (relation, neighbor, direction) entries collapse to one.
StarGraph build_star_graph(const EntityId& center, const std::vector<Triple>& triples,
                           const std::map<std::string, double>& scores,
                           std::size_t max_edges);

// One graph per line.
std::string star_graph_to_json(const StarGraph& g);
StarGraph star_graph_from_json(const std::string& line);
void save_star_graphs_jsonl(const std::string& path, const std::vector<StarGraph>& graphs);
std::vector<StarGraph> load_star_graphs_jsonl(const std::string& path);

class EmbeddingProvider;

// Featurized view of a star graph in canonical order: center at node 0,
// remaining nodes sorted by entity id, edges sorted by
// (neighbor id, relation id, direction). Every message edge is oriented
// neighbor -> center so one round of passing lands all facts on the center.
struct FeaturizedGraph {
  Tensor node_features;  // |V| x d_phi
  Tensor edge_features;  // |E| x d_phi, from relation labels
  std::vector<std::pair<std::size_t, std::size_t>> edge_index;  // (src, dst)
  std::size_t center_index = 0;
  std::vector<std::string> node_labels;
  bool empty_warning = false;
};

FeaturizedGraph featurize(const StarGraph& g, const EmbeddingProvider& provider);

}  // namespace kore::graphio
