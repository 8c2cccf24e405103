#pragma once

// Checkpoint archive: a flat list of named, typed, shaped arrays.
//
//   "CVTARCH1" | u32 entry count | entries...
//   entry: u16 name length | name | u8 dtype | u8 rank | u64 dims[rank] | u64 payload bytes | payload
//
// All integers and floats are little-endian regardless of the host.

#include "json.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cvt/model.hpp"
#include "cvt/replay_memory.hpp"

namespace cvt {

enum class DType : std::uint8_t { f32 = 1, u8 = 2, i32 = 3, u64 = 4, bytes = 5, bits = 6 };

struct ArchiveEntry {
  DType dtype = DType::bytes;
  std::vector<std::uint64_t> dims;
  std::vector<std::uint8_t> payload;
};

class Archive {
 public:
  static constexpr char kMagic[9] = "CVTARCH1";

  void put_f32(const std::string& name, std::vector<std::uint64_t> dims, const std::vector<float>& values) {
    std::vector<std::uint8_t> p;
    p.reserve(values.size() * 4);
    for (float v : values) append_le(p, std::bit_cast<std::uint32_t>(v), 4);
    put(name, DType::f32, std::move(dims), std::move(p));
  }
  void put_u8(const std::string& name, std::vector<std::uint64_t> dims, std::vector<std::uint8_t> values) {
    put(name, DType::u8, std::move(dims), std::move(values));
  }
  void put_i32(const std::string& name, const std::vector<std::int32_t>& values) {
    std::vector<std::uint8_t> p;
    for (auto v : values) append_le(p, static_cast<std::uint32_t>(v), 4);
    put(name, DType::i32, {values.size()}, std::move(p));
  }
  void put_u64(const std::string& name, std::uint64_t value) {
    std::vector<std::uint8_t> p;
    append_le(p, value, 8);
    put(name, DType::u64, {1}, std::move(p));
  }
  void put_string(const std::string& name, const std::string& text) {
    put(name, DType::bytes, {text.size()}, std::vector<std::uint8_t>(text.begin(), text.end()));
  }
  void put_bits(const std::string& name, const std::vector<bool>& bits) {
    std::vector<std::uint8_t> p((bits.size() + 7) / 8, 0);
    for (std::size_t i = 0; i < bits.size(); ++i) {
      if (bits[i]) p[i / 8] |= std::uint8_t(1u << (i % 8));
    }
    put(name, DType::bits, {bits.size()}, std::move(p));
  }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  const std::map<std::string, ArchiveEntry>& entries() const { return entries_; }

  std::vector<float> get_f32(const std::string& name) const {
    const auto& e = get(name, DType::f32);
    std::vector<float> out(e.payload.size() / 4);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::bit_cast<float>(std::uint32_t(read_le(e.payload, i * 4, 4)));
    return out;
  }
  const std::vector<std::uint8_t>& get_u8(const std::string& name) const { return get(name, DType::u8).payload; }
  std::vector<std::int32_t> get_i32(const std::string& name) const {
    const auto& e = get(name, DType::i32);
    std::vector<std::int32_t> out(e.payload.size() / 4);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::int32_t(std::uint32_t(read_le(e.payload, i * 4, 4)));
    return out;
  }
  std::uint64_t get_u64(const std::string& name) const { return read_le(get(name, DType::u64).payload, 0, 8); }
  std::string get_string(const std::string& name) const {
    const auto& p = get(name, DType::bytes).payload;
    return std::string(p.begin(), p.end());
  }
  std::vector<bool> get_bits(const std::string& name) const {
    const auto& e = get(name, DType::bits);
    std::vector<bool> out(e.dims.at(0));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (e.payload[i / 8] >> (i % 8)) & 1u;
    return out;
  }
  const std::vector<std::uint64_t>& dims(const std::string& name) const { return at(name).dims; }

  /// Entries are written in name order, so equal archives serialize to equal bytes.
  std::vector<std::uint8_t> serialize() const {
    std::vector<std::uint8_t> out(kMagic, kMagic + 8);
    append_le(out, entries_.size(), 4);
    for (const auto& [name, e] : entries_) {
      append_le(out, name.size(), 2);
      out.insert(out.end(), name.begin(), name.end());
      out.push_back(static_cast<std::uint8_t>(e.dtype));
      out.push_back(static_cast<std::uint8_t>(e.dims.size()));
      for (auto d : e.dims) append_le(out, d, 8);
      append_le(out, e.payload.size(), 8);
      out.insert(out.end(), e.payload.begin(), e.payload.end());
    }
    return out;
  }

  static Archive deserialize(const std::vector<std::uint8_t>& bytes) {
    Archive a;
    std::size_t pos = 0;
    auto need = [&](std::size_t n) {
      if (pos + n > bytes.size()) throw StructuralError("checkpoint: truncated archive");
    };
    need(8);
    if (std::string(bytes.begin(), bytes.begin() + 8) != kMagic) throw StructuralError("checkpoint: bad magic");
    pos = 8;
    need(4);
    const auto count = read_le(bytes, pos, 4);
    pos += 4;
    for (std::uint64_t k = 0; k < count; ++k) {
      need(2);
      const auto len = read_le(bytes, pos, 2);
      pos += 2;
      need(len + 2);
      std::string name(bytes.begin() + long(pos), bytes.begin() + long(pos + len));
      pos += len;
      ArchiveEntry e;
      e.dtype = static_cast<DType>(bytes[pos++]);
      const std::size_t rank = bytes[pos++];
      need(rank * 8 + 8);
      for (std::size_t r = 0; r < rank; ++r, pos += 8) e.dims.push_back(read_le(bytes, pos, 8));
      const auto size = read_le(bytes, pos, 8);
      pos += 8;
      need(size);
      e.payload.assign(bytes.begin() + long(pos), bytes.begin() + long(pos + size));
      pos += size;
      a.entries_[name] = std::move(e);
    }
    if (pos != bytes.size()) throw StructuralError("checkpoint: trailing bytes after the last entry");
    return a;
  }

  void write(const std::string& path) const {
    const auto bytes = serialize();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ConfigError("checkpoint: cannot open '" + path + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!f) throw ConfigError("checkpoint: write to '" + path + "' failed");
  }

  static Archive read(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("checkpoint: cannot open '" + path + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return deserialize(bytes);
  }

 private:
  static void append_le(std::vector<std::uint8_t>& out, std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out.push_back(std::uint8_t(v >> (8 * i)));
  }
  static std::uint64_t read_le(const std::vector<std::uint8_t>& in, std::size_t pos, int n) {
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= std::uint64_t(in[pos + std::size_t(i)]) << (8 * i);
    return v;
  }

  void put(const std::string& name, DType dtype, std::vector<std::uint64_t> dims, std::vector<std::uint8_t> payload) {
    if (name.empty() || name.size() > 0xFFFF) throw StructuralError("checkpoint: bad entry name");
    entries_[name] = ArchiveEntry{dtype, std::move(dims), std::move(payload)};
  }
  const ArchiveEntry& at(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw StructuralError("checkpoint: missing entry '" + name + "'");
    return it->second;
  }
  const ArchiveEntry& get(const std::string& name, DType dtype) const {
    const auto& e = at(name);
    if (e.dtype != dtype) throw StructuralError("checkpoint: entry '" + name + "' has an unexpected type");
    return e;
  }

  std::map<std::string, ArchiveEntry> entries_;
};

// ---------------------------------------------------------------------------
// Model and buffer state

template <class T>
void store_model(Archive& a, CvtModel<T>& model) {
  a.put_string("config", nlohmann::json(model.config()).dump());
  for (auto* p : model.parameters()) {
    std::vector<float> v(static_cast<std::size_t>(p->value.size()));
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = float(p->value.data()[i]);
    a.put_f32("param/" + p->name, {std::uint64_t(p->value.rows()), std::uint64_t(p->value.cols())}, v);
  }
  a.put_bits("focus_mask", model.focus_bank().mask());
}

/// Loads parameters into `model`, which must have been built with the same
/// configuration as the archived one.
template <class T>
void restore_model(const Archive& a, CvtModel<T>& model) {
  const auto stored = nlohmann::json::parse(a.get_string("config"));
  if (stored != nlohmann::json(model.config())) throw StructuralError("checkpoint: model configuration differs");
  for (auto* p : model.parameters()) {
    const std::string key = "param/" + p->name;
    const auto& d = a.dims(key);
    if (d.size() != 2 || d[0] != std::uint64_t(p->value.rows()) || d[1] != std::uint64_t(p->value.cols())) {
      throw StructuralError("checkpoint: shape mismatch for '" + p->name + "'");
    }
    const auto v = a.get_f32(key);
    for (std::size_t i = 0; i < v.size(); ++i) p->value.data()[i] = T(v[i]);
  }
  model.focus_bank().set_mask(a.get_bits("focus_mask"));
}

inline void store_buffer(Archive& a, const MemoryBuffer& buffer) {
  std::vector<std::uint8_t> pixels;
  std::vector<std::int32_t> labels, ids;
  std::uint64_t width = buffer.empty() ? 0 : buffer.items().front().pixels.size();
  for (const auto& s : buffer.items()) {
    pixels.insert(pixels.end(), s.pixels.begin(), s.pixels.end());
    labels.push_back(s.label);
    ids.push_back(s.id);
  }
  a.put_u8("memory/images", {buffer.size(), width}, std::move(pixels));
  a.put_i32("memory/labels", labels);
  a.put_i32("memory/ids", ids);
  a.put_u64("memory/capacity", buffer.capacity());
  a.put_u64("memory/seen_count", buffer.seen_count());
  a.put_string("memory/rng_state", buffer.rng_state());
}

inline void restore_buffer(const Archive& a, MemoryBuffer& buffer) {
  if (a.get_u64("memory/capacity") != buffer.capacity()) throw StructuralError("checkpoint: buffer capacity differs");
  const auto& d = a.dims("memory/images");
  const auto& pixels = a.get_u8("memory/images");
  const auto labels = a.get_i32("memory/labels");
  const auto ids = a.get_i32("memory/ids");
  if (d.size() != 2 || labels.size() != d[0] || ids.size() != d[0] || pixels.size() != d[0] * d[1]) {
    throw StructuralError("checkpoint: inconsistent memory snapshot");
  }
  std::vector<Sample> items;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    Sample s;
    s.pixels.assign(pixels.begin() + long(i * d[1]), pixels.begin() + long((i + 1) * d[1]));
    s.label = labels[i];
    s.id = ids[i];
    items.push_back(std::move(s));
  }
  buffer.restore(std::move(items), a.get_u64("memory/seen_count"), a.get_string("memory/rng_state"));
}

template <class T>
void save_checkpoint(const std::string& path, CvtModel<T>& model, const MemoryBuffer* buffer = nullptr) {
  Archive a;
  store_model(a, model);
  if (buffer != nullptr) store_buffer(a, *buffer);
  a.write(path);
}

template <class T>
void load_checkpoint(const std::string& path, CvtModel<T>& model, MemoryBuffer* buffer = nullptr) {
  const auto a = Archive::read(path);
  restore_model(a, model);
  if (buffer != nullptr) restore_buffer(a, *buffer);
}

/// FNV-1a over the serialized bytes; a cheap identity for determinism checks.
inline std::uint64_t fnv1a(const std::vector<std::uint8_t>& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace cvt
