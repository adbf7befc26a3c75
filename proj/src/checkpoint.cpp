#include <cstring>
#include <fstream>
#include <sstream>

#include "cakelab/model.hpp"

namespace cakelab {

namespace {

constexpr char kMagic[4] = {'C', 'K', 'L', 'B'};

template <typename T>
void put(std::string& buf, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  char tmp[sizeof(T)];
  std::memcpy(tmp, &v, sizeof(T));
  buf.append(tmp, sizeof(T));  // little-endian host assumed (x86/arm64)
}

template <typename T>
T get(const std::string& buf, size_t& off) {
  if (off + sizeof(T) > buf.size()) throw CheckpointError("checkpoint: truncated file");
  T v;
  std::memcpy(&v, buf.data() + off, sizeof(T));
  off += sizeof(T);
  return v;
}

std::string serialize(const Checkpoint& c) {
  std::string buf;
  buf.append(kMagic, 4);
  put<uint32_t>(buf, c.format_version);
  put<int32_t>(buf, c.config.n_layers);
  put<int32_t>(buf, c.config.d_model);
  put<int32_t>(buf, c.config.n_heads);
  put<int32_t>(buf, c.config.d_ffn);
  put<int32_t>(buf, c.config.vocab_size);
  put<int32_t>(buf, c.config.max_seq);
  put<uint64_t>(buf, c.config.seed);
  put<uint32_t>(buf, uint32_t(c.params.size()));
  for (const auto& t : c.params) {
    if (t.name.size() > 0xFFFF) throw CheckpointError("tensor name too long");
    put<uint16_t>(buf, uint16_t(t.name.size()));
    buf.append(t.name);
    put<uint8_t>(buf, uint8_t(t.shape.size()));
    size_t numel = 1;
    for (int d : t.shape) {
      put<uint32_t>(buf, uint32_t(d));
      numel *= size_t(d);
    }
    if (numel != t.data.size()) throw CheckpointError("tensor shape/data mismatch");
    buf.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * 4);
  }
  return buf;
}

Checkpoint deserialize(const std::string& buf) {
  size_t off = 0;
  if (buf.size() < 4 || std::memcmp(buf.data(), kMagic, 4) != 0)
    throw CheckpointError("load_checkpoint: bad magic");
  off = 4;
  Checkpoint c;
  c.format_version = get<uint32_t>(buf, off);
  if (c.format_version != Checkpoint::kFormatVersion)
    throw CheckpointError("load_checkpoint: unsupported format_version " +
                          std::to_string(c.format_version));
  c.config.n_layers = get<int32_t>(buf, off);
  c.config.d_model = get<int32_t>(buf, off);
  c.config.n_heads = get<int32_t>(buf, off);
  c.config.d_ffn = get<int32_t>(buf, off);
  c.config.vocab_size = get<int32_t>(buf, off);
  c.config.max_seq = get<int32_t>(buf, off);
  c.config.seed = get<uint64_t>(buf, off);
  uint32_t n = get<uint32_t>(buf, off);
  for (uint32_t i = 0; i < n; ++i) {
    NamedTensor t;
    uint16_t len = get<uint16_t>(buf, off);
    if (off + len > buf.size()) throw CheckpointError("checkpoint: truncated name");
    t.name.assign(buf.data() + off, len);
    off += len;
    uint8_t ndim = get<uint8_t>(buf, off);
    size_t numel = 1;
    for (uint8_t k = 0; k < ndim; ++k) {
      uint32_t d = get<uint32_t>(buf, off);
      t.shape.push_back(int(d));
      numel *= d;
    }
    if (off + numel * 4 > buf.size()) throw CheckpointError("checkpoint: truncated data");
    t.data.resize(numel);
    std::memcpy(t.data.data(), buf.data() + off, numel * 4);
    off += numel * 4;
    c.params.push_back(std::move(t));
  }
  if (off != buf.size()) throw CheckpointError("checkpoint: trailing bytes");
  for (const auto& t : c.params)
    for (float v : t.data)
      if (!std::isfinite(v))
        throw CheckpointError("checkpoint: non-finite parameter in " + t.name);
  return c;
}

}  // namespace

std::string checkpoint_to_bytes(const Checkpoint& c) { return serialize(c); }
Checkpoint checkpoint_from_bytes(const std::string& buf) { return deserialize(buf); }

void save_checkpoint(const Checkpoint& c, const std::string& path) {
  std::string buf = serialize(c);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("save_checkpoint: cannot open " + path);
  os.write(buf.data(), std::streamsize(buf.size()));
  if (!os) throw CheckpointError("save_checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("load_checkpoint: cannot open " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return deserialize(ss.str());
}

uint64_t checkpoint_hash(const Checkpoint& c) {
  std::string buf = serialize(c);
  uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char b : buf) {
    h ^= b;
    h *= 0x100000001B3ull;
  }
  return h;
}

size_t checkpoint_file_size(const Checkpoint& c) { return serialize(c).size(); }

}  // namespace cakelab
