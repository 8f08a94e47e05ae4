#pragma once

#include <map>
#include <string>

#include "kore/tensor.hpp"

namespace kore {

// Single-file container of named f64 tensors plus string metadata.
// Layout (all integers little-endian):
//   magic "KORECKPT", u8 format version,
//   u64 tensor count, then per tensor:
//     u32 name length, name bytes, u32 ndim, u64 dims[ndim], f64 payload,
//   u64 meta count, then per entry:
//     u32 key length, key bytes, u64 value length, value bytes.
// Entries are written in sorted name order so identical state produces
// identical bytes.
class Checkpoint {
 public:
  static constexpr std::uint8_t kFormatVersion = 1;

  void put(const std::string& name, const Tensor& t);
  Tensor get(const std::string& name) const;
  bool has(const std::string& name) const { return tensors_.count(name) > 0; }

  void put_meta(const std::string& key, const std::string& value) { meta_[key] = value; }
  const std::string& meta(const std::string& key) const;
  bool has_meta(const std::string& key) const { return meta_.count(key) > 0; }

  std::size_t tensor_count() const { return tensors_.size(); }
  const std::map<std::string, Tensor>& tensors() const { return tensors_; }

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);

 private:
  std::map<std::string, Tensor> tensors_;
  std::map<std::string, std::string> meta_;
};

// FNV-1a 64 over the file bytes, hex encoded. For comparing run outputs.
std::string file_checksum(const std::string& path);

}  // namespace kore
