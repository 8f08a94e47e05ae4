#pragma once

#include <string>
#include <vector>

#include "kore/graph.hpp"

namespace kore::graphio {

struct SparqlConfig {
  std::string endpoint_url;  // e.g. "http://host:port/sparql"
  std::string cache_dir;
  int budget = 100;          // LIMIT on returned triples, half per direction
  int max_retries = 3;
  int initial_backoff_ms = 250;
  // %CENTER% and %LIMIT% are substituted into the query template.
  std::string query_template =
      "SELECT ?dir ?rel ?relLabel ?ent ?entLabel WHERE { "
      "{ <%CENTER%> ?rel ?ent . BIND(\"out\" AS ?dir) } UNION "
      "{ ?ent ?rel <%CENTER%> . BIND(\"in\" AS ?dir) } } LIMIT %LIMIT%";
};

// 1-hop star fetch with an on-disk cache keyed by (center id, budget). The
// cache is consulted before any network traffic; endpoint failures retry
// with bounded exponential backoff and then surface as io_error.
class SparqlClient {
 public:
  explicit SparqlClient(SparqlConfig config);

  std::vector<Triple> fetch_star(const EntityId& center);

  // True when the last fetch_star call was served from the cache.
  bool last_was_cached() const { return last_was_cached_; }

 private:
  std::string cache_path(const std::string& center_id) const;

  SparqlConfig config_;
  bool last_was_cached_ = false;
};

// Parses the SPARQL JSON results format (head.vars / results.bindings) into
// triples around the given center. Exposed for fixture tests.
std::vector<Triple> parse_sparql_star_results(const std::string& body,
                                              const EntityId& center);

}  // namespace kore::graphio
