#include "kore/graph.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "kore/embedding.hpp"
#include "kore/errors.hpp"

namespace kore::graphio {

using nlohmann::json;

namespace {

std::string require_string(const json& j, const char* field) {
  if (!j.contains(field) || !j[field].is_string() || j[field].get<std::string>().empty()) {
    throw invalid_argument(std::string("missing or empty field '") + field + "'");
  }
  return j[field].get<std::string>();
}

Triple triple_from_json(const json& j) {
  Triple t;
  t.subject.id = require_string(j, "subject_id");
  t.relation.id = require_string(j, "relation_id");
  t.object.id = require_string(j, "object_id");
  t.subject.label = j.value("subject_label", t.subject.id);
  t.relation.label = j.value("relation_label", t.relation.id);
  t.object.label = j.value("object_label", t.object.id);
  if (t.subject.label.empty()) t.subject.label = t.subject.id;
  if (t.relation.label.empty()) t.relation.label = t.relation.id;
  if (t.object.label.empty()) t.object.label = t.object.id;
  return t;
}

json triple_to_json(const Triple& t) {
  return json{{"subject_id", t.subject.id},   {"subject_label", t.subject.label},
              {"relation_id", t.relation.id}, {"relation_label", t.relation.label},
              {"object_id", t.object.id},     {"object_label", t.object.label}};
}

}  // namespace

TripleLoadReport load_triples_jsonl(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw io_error("triples: cannot open '" + path + "'");
  TripleLoadReport report;
  std::string line;
  std::size_t lineno = 0, nonempty = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ++nonempty;
    try {
      report.triples.push_back(triple_from_json(json::parse(line)));
    } catch (const std::exception& e) {
      report.malformed.push_back("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (nonempty > 0 && report.malformed.size() * 10 > nonempty) {
    throw io_error("triples: corpus corrupt, " + std::to_string(report.malformed.size()) +
                   " of " + std::to_string(nonempty) + " lines malformed in '" + path + "'");
  }
  return report;
}

void save_triples_jsonl(const std::string& path, const std::vector<Triple>& triples) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw io_error("triples: cannot open '" + path + "' for writing");
  for (const Triple& t : triples) os << triple_to_json(t).dump() << "\n";
}

std::map<std::string, double> pagerank(
    const std::vector<std::pair<std::string, std::string>>& edges, double damping,
    int iterations) {
  std::vector<std::string> nodes;
  std::set<std::string> seen;
  for (const auto& [a, b] : edges) {
    if (seen.insert(a).second) nodes.push_back(a);
    if (seen.insert(b).second) nodes.push_back(b);
  }
  return pagerank(nodes, edges, damping, iterations);
}

std::map<std::string, double> pagerank(
    const std::vector<std::string>& nodes,
    const std::vector<std::pair<std::string, std::string>>& edges, double damping,
    int iterations) {
  if (damping <= 0.0 || damping >= 1.0) {
    throw invalid_argument("pagerank: damping must be in (0,1)");
  }
  if (iterations < 1) throw invalid_argument("pagerank: iterations must be >= 1");
  if (nodes.empty()) return {};

  std::unordered_map<std::string, std::size_t> index;
  index.reserve(nodes.size());
  for (const std::string& n : nodes) index.emplace(n, index.size());
  const std::size_t n = index.size();

  std::vector<std::vector<std::size_t>> out_edges(n);
  for (const auto& [a, b] : edges) {
    auto ia = index.find(a), ib = index.find(b);
    if (ia == index.end() || ib == index.end()) {
      throw invalid_argument("pagerank: edge endpoint not in node set");
    }
    out_edges[ia->second].push_back(ib->second);
  }

  std::vector<double> rank(n, 1.0 / static_cast<double>(n)), next(n);
  for (int it = 0; it < iterations; ++it) {
    std::fill(next.begin(), next.end(), 0.0);
    double dangling = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (out_edges[i].empty()) {
        dangling += rank[i];
        continue;
      }
      const double share = rank[i] / static_cast<double>(out_edges[i].size());
      for (std::size_t j : out_edges[i]) next[j] += share;
    }
    const double base = (1.0 - damping) / static_cast<double>(n) +
                        damping * dangling / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) next[i] = base + damping * next[i];
    rank.swap(next);
  }

  std::map<std::string, double> out;
  for (const auto& [name, i] : index) out[name] = rank[i];
  return out;
}

StarGraph build_star_graph(const EntityId& center, const std::vector<Triple>& triples,
                           const std::map<std::string, double>& scores,
                           std::size_t max_edges) {
  if (max_edges < 1) throw invalid_argument("build_star_graph: max_edges must be >= 1");
  StarGraph g;
  g.center = center;
  g.max_edges = max_edges;

  std::set<std::tuple<std::string, std::string, int>> seen;
  bool touched = false;
  for (const Triple& t : triples) {
    const bool out = t.subject.id == center.id;
    const bool in = t.object.id == center.id;
    if (out == in) continue;  // not incident, or a self-loop touching both sides
    touched = true;
    StarEdge e;
    e.triple = t;
    e.direction = out ? Direction::outgoing : Direction::incoming;
    const EntityId& nb = StarGraph::neighbor_of(e);
    if (!seen.insert({t.relation.id, nb.id, out ? 0 : 1}).second) continue;
    auto it = scores.find(nb.id);
    e.pagerank_score = it == scores.end() ? 0.0 : it->second;
    g.neighbors.push_back(std::move(e));
  }
  g.empty_warning = !touched;

  std::stable_sort(g.neighbors.begin(), g.neighbors.end(),
                   [](const StarEdge& a, const StarEdge& b) {
                     if (a.pagerank_score != b.pagerank_score) {
                       return a.pagerank_score > b.pagerank_score;
                     }
                     const std::string& na = StarGraph::neighbor_of(a).id;
                     const std::string& nb = StarGraph::neighbor_of(b).id;
                     if (na != nb) return na < nb;
                     if (a.triple.relation.id != b.triple.relation.id) {
                       return a.triple.relation.id < b.triple.relation.id;
                     }
                     return a.direction < b.direction;
                   });
  if (g.neighbors.size() > max_edges) g.neighbors.resize(max_edges);
  return g;
}

std::string star_graph_to_json(const StarGraph& g) {
  json edges = json::array();
  for (const StarEdge& e : g.neighbors) {
    json je = triple_to_json(e.triple);
    je["direction"] = e.direction == Direction::outgoing ? "out" : "in";
    je["score"] = e.pagerank_score;
    edges.push_back(std::move(je));
  }
  return json{{"center_id", g.center.id},
              {"center_label", g.center.label},
              {"max_edges", g.max_edges},
              {"empty_warning", g.empty_warning},
              {"edges", edges}}
      .dump();
}

StarGraph star_graph_from_json(const std::string& line) {
  json j = json::parse(line);
  StarGraph g;
  g.center.id = require_string(j, "center_id");
  g.center.label = j.value("center_label", g.center.id);
  g.max_edges = j.value("max_edges", std::size_t{100});
  g.empty_warning = j.value("empty_warning", false);
  for (const json& je : j.at("edges")) {
    StarEdge e;
    e.triple = triple_from_json(je);
    e.direction = je.value("direction", "out") == "in" ? Direction::incoming
                                                       : Direction::outgoing;
    e.pagerank_score = je.value("score", 0.0);
    g.neighbors.push_back(std::move(e));
  }
  return g;
}

void save_star_graphs_jsonl(const std::string& path, const std::vector<StarGraph>& graphs) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw io_error("star graphs: cannot open '" + path + "' for writing");
  for (const StarGraph& g : graphs) os << star_graph_to_json(g) << "\n";
}

std::vector<StarGraph> load_star_graphs_jsonl(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw io_error("star graphs: cannot open '" + path + "'");
  std::vector<StarGraph> graphs;
  std::string line;
  while (std::getline(is, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    graphs.push_back(star_graph_from_json(line));
  }
  return graphs;
}

FeaturizedGraph featurize(const StarGraph& g, const EmbeddingProvider& provider) {
  const std::size_t d = provider.dimension();
  FeaturizedGraph f;
  f.empty_warning = g.neighbors.empty();

  // Canonical node table: center first, neighbors by ascending entity id.
  std::map<std::string, const EntityId*> neighbor_ids;
  for (const StarEdge& e : g.neighbors) {
    const EntityId& nb = StarGraph::neighbor_of(e);
    neighbor_ids.emplace(nb.id, &nb);
  }
  std::vector<const EntityId*> node_order = {&g.center};
  std::unordered_map<std::string, std::size_t> node_index = {{g.center.id, 0}};
  for (const auto& [id, ent] : neighbor_ids) {
    if (id == g.center.id) continue;
    node_index.emplace(id, node_order.size());
    node_order.push_back(ent);
  }

  f.node_features = Tensor::zeros({node_order.size(), d});
  for (std::size_t i = 0; i < node_order.size(); ++i) {
    const std::string label =
        node_order[i]->label.empty() ? node_order[i]->id : node_order[i]->label;
    f.node_labels.push_back(label);
    const std::vector<double> v = provider.embed(label);
    std::copy(v.begin(), v.end(), f.node_features.value().begin() + i * d);
  }

  // Canonical edge order, every message edge oriented neighbor -> center.
  std::vector<const StarEdge*> edge_order;
  for (const StarEdge& e : g.neighbors) edge_order.push_back(&e);
  std::sort(edge_order.begin(), edge_order.end(), [](const StarEdge* a, const StarEdge* b) {
    const std::string& na = StarGraph::neighbor_of(*a).id;
    const std::string& nb = StarGraph::neighbor_of(*b).id;
    if (na != nb) return na < nb;
    if (a->triple.relation.id != b->triple.relation.id) {
      return a->triple.relation.id < b->triple.relation.id;
    }
    return a->direction < b->direction;
  });

  f.edge_features = Tensor::zeros({edge_order.size(), d});
  for (std::size_t i = 0; i < edge_order.size(); ++i) {
    const StarEdge& e = *edge_order[i];
    const std::vector<double> v = provider.embed(e.triple.relation.label);
    std::copy(v.begin(), v.end(), f.edge_features.value().begin() + i * d);
    f.edge_index.emplace_back(node_index.at(StarGraph::neighbor_of(e).id), 0);
  }
  f.center_index = 0;
  return f;
}

}  // namespace kore::graphio
