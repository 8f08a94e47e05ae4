#include "kore/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "kore/errors.hpp"

namespace kore {

namespace {

constexpr char kMagic[8] = {'K', 'O', 'R', 'E', 'C', 'K', 'P', 'T'};

static_assert(std::endian::native == std::endian::little,
              "checkpoint serialization assumes a little-endian host");

template <typename T>
void write_le(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw io_error("checkpoint: truncated file");
  return v;
}

void write_str(std::ostream& os, const std::string& s) {
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_str(std::istream& is) {
  const auto len = read_le<std::uint32_t>(is);
  std::string s(len, '\0');
  is.read(s.data(), len);
  if (!is) throw io_error("checkpoint: truncated string");
  return s;
}

}  // namespace

void Checkpoint::put(const std::string& name, const Tensor& t) {
  tensors_[name] = t.detach_copy();
}

Tensor Checkpoint::get(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw io_error("checkpoint: missing tensor '" + name + "'");
  return it->second.detach_copy();
}

const std::string& Checkpoint::meta(const std::string& key) const {
  auto it = meta_.find(key);
  if (it == meta_.end()) throw io_error("checkpoint: missing metadata '" + key + "'");
  return it->second;
}

void Checkpoint::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw io_error("checkpoint: cannot open '" + path + "' for writing");
  os.write(kMagic, sizeof(kMagic));
  write_le<std::uint8_t>(os, kFormatVersion);
  write_le<std::uint64_t>(os, tensors_.size());
  for (const auto& [name, t] : tensors_) {
    write_str(os, name);
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape().size()));
    for (std::size_t d : t.shape()) write_le<std::uint64_t>(os, d);
    os.write(reinterpret_cast<const char*>(t.value().data()),
             static_cast<std::streamsize>(t.numel() * sizeof(double)));
  }
  write_le<std::uint64_t>(os, meta_.size());
  for (const auto& [key, value] : meta_) {
    write_str(os, key);
    write_le<std::uint64_t>(os, value.size());
    os.write(value.data(), static_cast<std::streamsize>(value.size()));
  }
  if (!os) throw io_error("checkpoint: write failed for '" + path + "'");
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw io_error("checkpoint: cannot open '" + path + "'");
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw io_error("checkpoint: bad magic in '" + path + "'");
  }
  const auto version = read_le<std::uint8_t>(is);
  if (version != kFormatVersion) {
    throw io_error("checkpoint: unsupported format version " + std::to_string(version));
  }
  Checkpoint ck;
  const auto n_tensors = read_le<std::uint64_t>(is);
  for (std::uint64_t i = 0; i < n_tensors; ++i) {
    std::string name = read_str(is);
    const auto ndim = read_le<std::uint32_t>(is);
    std::vector<std::size_t> shape(ndim);
    std::size_t numel = 1;
    for (auto& d : shape) {
      d = static_cast<std::size_t>(read_le<std::uint64_t>(is));
      numel *= d;
    }
    std::vector<double> data(numel);
    is.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(numel * sizeof(double)));
    if (!is) throw io_error("checkpoint: truncated tensor payload for '" + name + "'");
    ck.tensors_[name] = Tensor::from(shape, std::move(data));
  }
  const auto n_meta = read_le<std::uint64_t>(is);
  for (std::uint64_t i = 0; i < n_meta; ++i) {
    std::string key = read_str(is);
    const auto len = read_le<std::uint64_t>(is);
    std::string value(len, '\0');
    is.read(value.data(), static_cast<std::streamsize>(len));
    if (!is) throw io_error("checkpoint: truncated metadata for '" + key + "'");
    ck.meta_[key] = std::move(value);
  }
  return ck;
}

std::string file_checksum(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw io_error("checksum: cannot open '" + path + "'");
  std::uint64_t h = 1469598103934665603ull;
  char buf[1 << 16];
  while (is) {
    is.read(buf, sizeof(buf));
    const std::streamsize n = is.gcount();
    for (std::streamsize i = 0; i < n; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
  }
  char out[17];
  std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(h));
  return std::string(out);
}

}  // namespace kore
