#include "kore/embedding.hpp"

#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>

#include "kore/errors.hpp"

namespace kore::graphio {

namespace {

constexpr char kMagic[8] = {'K', 'O', 'R', 'E', 'E', 'M', 'B', '1'};

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::vector<std::string> lowercase_words(const std::string& text) {
  std::vector<std::string> words;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      words.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

}  // namespace

std::vector<double> hash_embed(const std::string& label, std::size_t dimension) {
  std::vector<double> v(dimension, 0.0);
  std::vector<std::string> words = lowercase_words(label);
  if (words.empty()) words.push_back(label.empty() ? "<empty>" : label);
  for (const std::string& w : words) {
    const std::uint64_t h = fnv1a(w);
    v[h % dimension] += (h >> 63) ? 1.0 : -1.0;
    // Second bucket widens overlap between related labels a little.
    const std::uint64_t h2 = fnv1a(w + "#2");
    v[h2 % dimension] += (h2 >> 63) ? 1.0 : -1.0;
  }
  double norm = 0.0;
  for (double x : v) norm += x * x;
  if (norm == 0.0) {
    v[fnv1a(label) % dimension] = 1.0;
    return v;
  }
  norm = std::sqrt(norm);
  for (double& x : v) x /= norm;
  return v;
}

EmbeddingProvider EmbeddingProvider::hash_fallback(std::size_t dimension) {
  if (dimension == 0) throw invalid_argument("embedding: dimension must be positive");
  EmbeddingProvider p;
  p.dimension_ = dimension;
  return p;
}

EmbeddingProvider EmbeddingProvider::from_table_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw io_error("embedding table: cannot open '" + path + "'");
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw io_error("embedding table: bad magic in '" + path + "'");
  }
  std::uint32_t dim = 0;
  std::uint64_t count = 0;
  is.read(reinterpret_cast<char*>(&dim), sizeof(dim));
  is.read(reinterpret_cast<char*>(&count), sizeof(count));
  if (!is || dim == 0) throw io_error("embedding table: bad header in '" + path + "'");

  EmbeddingProvider p;
  p.dimension_ = dim;
  for (std::uint64_t i = 0; i < count; ++i) {
    std::uint32_t len = 0;
    is.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string label(len, '\0');
    is.read(label.data(), len);
    std::vector<float> raw(dim);
    is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(dim * sizeof(float)));
    if (!is) throw io_error("embedding table: truncated entry in '" + path + "'");
    std::vector<double> v(raw.begin(), raw.end());
    p.table_.emplace(std::move(label), std::move(v));
  }
  return p;
}

std::vector<double> EmbeddingProvider::embed(const std::string& label) const {
  if (!table_.empty()) {
    auto it = table_.find(label);
    if (it != table_.end()) return it->second;
    {
      std::lock_guard<std::mutex> lock(misses_->mutex);
      misses_->labels.insert(label);
    }
  }
  return hash_embed(label, dimension_);
}

std::vector<std::string> EmbeddingProvider::coverage_misses() const {
  std::lock_guard<std::mutex> lock(misses_->mutex);
  return {misses_->labels.begin(), misses_->labels.end()};
}

void write_embedding_table(
    const std::string& path, std::size_t dimension,
    const std::vector<std::pair<std::string, std::vector<double>>>& entries) {
  static_assert(std::endian::native == std::endian::little);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw io_error("embedding table: cannot open '" + path + "' for writing");
  os.write(kMagic, sizeof(kMagic));
  const auto dim = static_cast<std::uint32_t>(dimension);
  const auto count = static_cast<std::uint64_t>(entries.size());
  os.write(reinterpret_cast<const char*>(&dim), sizeof(dim));
  os.write(reinterpret_cast<const char*>(&count), sizeof(count));
  for (const auto& [label, vec] : entries) {
    if (vec.size() != dimension) {
      throw invalid_argument("embedding table: entry '" + label + "' has wrong dimension");
    }
    const auto len = static_cast<std::uint32_t>(label.size());
    os.write(reinterpret_cast<const char*>(&len), sizeof(len));
    os.write(label.data(), len);
    for (double x : vec) {
      const float f = static_cast<float>(x);
      os.write(reinterpret_cast<const char*>(&f), sizeof(f));
    }
  }
}

}  // namespace kore::graphio
