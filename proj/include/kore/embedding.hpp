#pragma once

#include <cstdint>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

namespace kore::graphio {

// Pluggable text-to-vector source standing in for a frozen sentence encoder.
// Lookups are pure: identical text always yields an identical vector. The
// table-backed provider falls back to the hash embedding for unknown labels
// and records them in a coverage report.
class EmbeddingProvider {
 public:
  static EmbeddingProvider hash_fallback(std::size_t dimension);
  static EmbeddingProvider from_table_file(const std::string& path);

  std::size_t dimension() const { return dimension_; }
  bool table_backed() const { return !table_.empty(); }

  std::vector<double> embed(const std::string& label) const;

  // Labels that were requested but missing from the table.
  std::vector<std::string> coverage_misses() const;

 private:
  EmbeddingProvider() : misses_(std::make_shared<MissLog>()) {}

  struct MissLog {
    std::mutex mutex;
    std::set<std::string> labels;
  };

  std::size_t dimension_ = 0;
  std::unordered_map<std::string, std::vector<double>> table_;
  std::shared_ptr<MissLog> misses_;  // shared across copies of the provider
};

// Binary table format: magic "KOREEMB1", u32 dimension, u64 entry count,
// then per entry u32 label length, label bytes, dimension f32 values
// (little-endian).
void write_embedding_table(const std::string& path, std::size_t dimension,
                           const std::vector<std::pair<std::string, std::vector<double>>>& entries);

// Deterministic word-hash embedding: lowercase words, each hashed into
// +/-1 buckets, L2-normalized.
std::vector<double> hash_embed(const std::string& label, std::size_t dimension);

}  // namespace kore::graphio
