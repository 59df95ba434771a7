#pragma once

// Versioned binary checkpoint: magic, version, key=value config text, named
// float64 parameter tensors, then optional tagged extension blocks.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "clipbench/encoders.hpp"
#include "clipbench/error.hpp"

namespace clipbench {

inline constexpr std::array<char, 8> kCheckpointMagic{'C', 'L', 'I', 'P', 'B', 'N', 'C', 'H'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> data;
  bool operator==(const NamedArray&) const = default;
};

struct ExtensionBlock {
  std::string tag;  // four characters
  std::vector<std::uint8_t> bytes;
  bool operator==(const ExtensionBlock&) const = default;
};

struct Checkpoint {
  KeyValues config;
  std::vector<NamedArray> params;
  std::vector<ExtensionBlock> blocks;

  const std::string* config_value(const std::string& key) const {
    for (const auto& [k, v] : config)
      if (k == key) return &v;
    return nullptr;
  }
  const ExtensionBlock* block(const std::string& tag) const {
    for (const auto& b : blocks)
      if (b.tag == tag) return &b;
    return nullptr;
  }
  bool operator==(const Checkpoint&) const = default;
};

// Little-endian byte buffer writer/reader shared by the container and the
// extension blocks.
class ByteWriter {
 public:
  void u32(std::uint32_t v) { put(v); }
  void u64(std::uint64_t v) { put(v); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v)); }
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }
  void str(const std::string& s) {
    u64(s.size());
    raw(s.data(), s.size());
  }
  void f64s(const std::vector<double>& v) {
    u64(v.size());
    for (double d : v) f64(d);
  }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  template <class T>
  void put(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  ByteReader(const std::uint8_t* data, std::size_t size, std::string what)
      : p_(data), end_(data + size), what_(std::move(what)) {}
  explicit ByteReader(const std::vector<std::uint8_t>& v, std::string what = "block")
      : ByteReader(v.data(), v.size(), std::move(what)) {}

  std::uint32_t u32() { return get<std::uint32_t>(); }
  std::uint64_t u64() { return get<std::uint64_t>(); }
  double f64() { return std::bit_cast<double>(get<std::uint64_t>()); }
  void raw(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, p_, n);
    p_ += n;
  }
  std::string str() {
    const auto n = u64();
    need(n);
    std::string s(reinterpret_cast<const char*>(p_), n);
    p_ += n;
    return s;
  }
  std::vector<double> f64s() {
    const auto n = u64();
    need(n * 8);
    std::vector<double> v(n);
    for (auto& d : v) d = f64();
    return v;
  }
  bool done() const { return p_ == end_; }
  std::size_t remaining() const { return static_cast<std::size_t>(end_ - p_); }

 private:
  void need(std::size_t n) const {
    if (remaining() < n) throw ArtifactMismatchError(what_ + ": truncated");
  }
  template <class T>
  T get() {
    need(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(p_[i]) << (8 * i);
    p_ += sizeof(T);
    return v;
  }
  const std::uint8_t* p_;
  const std::uint8_t* end_;
  std::string what_;
};

inline std::string config_text(const KeyValues& kvs) {
  std::string s;
  for (const auto& [k, v] : kvs) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos)
      throw ContractError("checkpoint config entry '" + k + "' contains a separator");
    s += k + "=" + v + "\n";
  }
  return s;
}

inline KeyValues parse_config_text(const std::string& text) {
  KeyValues out;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ArtifactMismatchError("checkpoint config line without '=': " + line);
    out.emplace_back(line.substr(0, eq), line.substr(eq + 1));
  }
  return out;
}

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  ByteWriter w;
  w.raw(kCheckpointMagic.data(), kCheckpointMagic.size());
  w.u32(kCheckpointVersion);
  w.str(config_text(ck.config));
  w.u32(static_cast<std::uint32_t>(ck.params.size()));
  for (const auto& p : ck.params) {
    if (shape_numel(p.shape) != p.data.size()) throw ContractError("checkpoint: tensor '" + p.name + "' size mismatch");
    w.u32(static_cast<std::uint32_t>(p.name.size()));
    w.raw(p.name.data(), p.name.size());
    w.u32(static_cast<std::uint32_t>(p.shape.size()));
    for (auto d : p.shape) w.u64(d);
    for (double d : p.data) w.f64(d);
  }
  w.u32(static_cast<std::uint32_t>(ck.blocks.size()));
  for (const auto& b : ck.blocks) {
    if (b.tag.size() != 4) throw ContractError("checkpoint: block tags are four characters");
    w.raw(b.tag.data(), 4);
    w.u64(b.bytes.size());
    w.raw(b.bytes.data(), b.bytes.size());
  }
  return std::move(w.bytes());
}

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& what = "checkpoint") {
  ByteReader r(bytes, what);
  std::array<char, 8> magic{};
  r.raw(magic.data(), magic.size());
  if (magic != kCheckpointMagic) throw ArtifactMismatchError(what + ": bad magic");
  const auto version = r.u32();
  if (version != kCheckpointVersion)
    throw ArtifactMismatchError(what + ": unsupported version " + std::to_string(version));
  Checkpoint ck;
  ck.config = parse_config_text(r.str());
  const auto nparams = r.u32();
  for (std::uint32_t i = 0; i < nparams; ++i) {
    NamedArray p;
    p.name.resize(r.u32());
    r.raw(p.name.data(), p.name.size());
    const auto rank = r.u32();
    for (std::uint32_t k = 0; k < rank; ++k) p.shape.push_back(r.u64());
    const auto n = shape_numel(p.shape);
    if (r.remaining() < n * 8) throw ArtifactMismatchError(what + ": truncated tensor " + p.name);
    p.data.resize(n);
    for (auto& d : p.data) d = r.f64();
    ck.params.push_back(std::move(p));
  }
  const auto nblocks = r.u32();
  for (std::uint32_t i = 0; i < nblocks; ++i) {
    ExtensionBlock b;
    b.tag.resize(4);
    r.raw(b.tag.data(), 4);
    b.bytes.resize(r.u64());
    r.raw(b.bytes.data(), b.bytes.size());
    ck.blocks.push_back(std::move(b));
  }
  if (!r.done()) throw ArtifactMismatchError(what + ": trailing bytes");
  return ck;
}

// Written to a sibling temp file, then renamed over the target.
inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  const auto bytes = encode_checkpoint(ck);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + tmp + " for writing");
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw IoError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, path);
}

inline std::vector<NamedArray> snapshot_params(const ParameterList& params) {
  std::vector<NamedArray> out;
  for (const auto& p : params.items()) out.push_back({p.name, p.value.shape(), p.value.values()});
  return out;
}

// Copies stored values into the model; every parameter must be present with
// the same shape and nothing extra may be stored.
inline void restore_params(ParameterList& params, const std::vector<NamedArray>& stored) {
  if (stored.size() != params.size())
    throw ArtifactMismatchError("checkpoint has " + std::to_string(stored.size()) + " tensors, model expects " +
                                std::to_string(params.size()));
  for (auto& p : params.items()) {
    auto it = std::find_if(stored.begin(), stored.end(), [&](const NamedArray& a) { return a.name == p.name; });
    if (it == stored.end()) throw ArtifactMismatchError("checkpoint lacks parameter " + p.name);
    if (it->shape != p.value.shape())
      throw ArtifactMismatchError("parameter " + p.name + " has shape " + shape_str(it->shape) + ", model expects " +
                                  shape_str(p.value.shape()));
    auto dst = p.value.mutable_data();
    std::copy(it->data.begin(), it->data.end(), dst.begin());
  }
}

// Model config recovered from the `model.*`, `vit.*`, `conv.*`, `text.*`
// entries; other keys are left to the caller.
inline ModelConfig model_config_from(const KeyValues& kvs) {
  ModelConfig cfg;
  for (const auto& [k, v] : kvs) {
    try {
      cfg.set(k, v);
    } catch (const ConfigError& e) {
      throw ArtifactMismatchError(std::string("checkpoint config: ") + e.what());
    }
  }
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw ArtifactMismatchError(std::string("checkpoint config: ") + e.what());
  }
  return cfg;
}

}  // namespace clipbench
