#include "kore/sparql.hpp"

#include <sys/file.h>
#include <unistd.h>

#include <cctype>
#include <chrono>
#include <fcntl.h>
#include <filesystem>
#include <fstream>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "kore/errors.hpp"

namespace kore::graphio {

using nlohmann::json;

namespace {

// Holds an flock for the lifetime of the object; serializes cache access for
// one entity across processes.
class FileLock {
 public:
  explicit FileLock(const std::string& path) {
    fd_ = ::open(path.c_str(), O_CREAT | O_RDWR, 0644);
    if (fd_ >= 0) ::flock(fd_, LOCK_EX);
  }
  ~FileLock() {
    if (fd_ >= 0) {
      ::flock(fd_, LOCK_UN);
      ::close(fd_);
    }
  }

 private:
  int fd_ = -1;
};

std::string sanitize(const std::string& s) {
  std::string out;
  for (char c : s) {
    out.push_back(std::isalnum(static_cast<unsigned char>(c)) ? c : '_');
  }
  return out;
}

std::string replace_all(std::string s, const std::string& from, const std::string& to) {
  std::size_t pos = 0;
  while ((pos = s.find(from, pos)) != std::string::npos) {
    s.replace(pos, from.size(), to);
    pos += to.size();
  }
  return s;
}

std::string binding_value(const json& row, const std::string& var) {
  if (!row.contains(var)) return {};
  return row[var].value("value", std::string{});
}

json triples_to_cache_json(const std::vector<Triple>& triples) {
  json arr = json::array();
  for (const Triple& t : triples) {
    arr.push_back({{"subject_id", t.subject.id},
                   {"subject_label", t.subject.label},
                   {"relation_id", t.relation.id},
                   {"relation_label", t.relation.label},
                   {"object_id", t.object.id},
                   {"object_label", t.object.label}});
  }
  return arr;
}

std::vector<Triple> triples_from_cache_json(const json& arr) {
  std::vector<Triple> out;
  for (const json& j : arr) {
    Triple t;
    t.subject = {j.at("subject_id"), j.at("subject_label")};
    t.relation = {j.at("relation_id"), j.at("relation_label")};
    t.object = {j.at("object_id"), j.at("object_label")};
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace

std::vector<Triple> parse_sparql_star_results(const std::string& body,
                                              const EntityId& center) {
  json j = json::parse(body);
  std::vector<Triple> out;
  for (const json& row : j.at("results").at("bindings")) {
    const std::string dir = binding_value(row, "dir");
    const std::string rel = binding_value(row, "rel");
    const std::string ent = binding_value(row, "ent");
    if (rel.empty() || ent.empty()) continue;
    std::string rel_label = binding_value(row, "relLabel");
    std::string ent_label = binding_value(row, "entLabel");
    if (rel_label.empty()) rel_label = rel;
    if (ent_label.empty()) ent_label = ent;
    Triple t;
    if (dir == "in") {
      t.subject = {ent, ent_label};
      t.object = center;
    } else {
      t.subject = center;
      t.object = {ent, ent_label};
    }
    t.relation = {rel, rel_label};
    out.push_back(std::move(t));
  }
  return out;
}

SparqlClient::SparqlClient(SparqlConfig config) : config_(std::move(config)) {
  if (config_.budget < 1) throw invalid_argument("sparql: budget must be >= 1");
  if (!config_.cache_dir.empty()) {
    std::filesystem::create_directories(config_.cache_dir);
  }
}

std::string SparqlClient::cache_path(const std::string& center_id) const {
  return config_.cache_dir + "/" + sanitize(center_id) + "_" +
         std::to_string(config_.budget) + ".json";
}

std::vector<Triple> SparqlClient::fetch_star(const EntityId& center) {
  const std::string path = cache_path(center.id);
  FileLock lock(path + ".lock");

  if (std::filesystem::exists(path)) {
    std::ifstream is(path);
    json cached = json::parse(is);
    last_was_cached_ = true;
    return triples_from_cache_json(cached);
  }
  last_was_cached_ = false;

  if (config_.endpoint_url.empty()) {
    throw config_error("sparql: no endpoint configured and '" + center.id +
                       "' is not cached");
  }

  // Split "http://host:port" from the path part.
  std::string base = config_.endpoint_url, query_path = "/";
  const std::size_t scheme = base.find("://");
  const std::size_t slash = base.find('/', scheme == std::string::npos ? 0 : scheme + 3);
  if (slash != std::string::npos) {
    query_path = base.substr(slash);
    base = base.substr(0, slash);
  }

  std::string query = replace_all(config_.query_template, "%CENTER%", center.id);
  query = replace_all(query, "%LIMIT%", std::to_string(config_.budget));

  httplib::Client client(base);
  client.set_read_timeout(30, 0);
  httplib::Params params{{"query", query}, {"format", "json"}};

  std::string body;
  int backoff = config_.initial_backoff_ms;
  bool got = false;
  for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
    if (attempt > 0) {
      std::this_thread::sleep_for(std::chrono::milliseconds(backoff));
      backoff *= 2;
    }
    httplib::Result res = client.Get(query_path, params, httplib::Headers{});
    if (res && res->status == 200) {
      body = res->body;
      got = true;
      break;
    }
  }
  if (!got) {
    throw io_error("sparql: fetch failed for '" + center.id + "' after " +
                   std::to_string(config_.max_retries) + " retries against " +
                   config_.endpoint_url);
  }

  std::vector<Triple> triples = parse_sparql_star_results(body, center);
  if (triples.size() > static_cast<std::size_t>(config_.budget)) {
    triples.resize(static_cast<std::size_t>(config_.budget));
  }
  std::ofstream os(path, std::ios::trunc);
  os << triples_to_cache_json(triples).dump();
  return triples;
}

}  // namespace kore::graphio
