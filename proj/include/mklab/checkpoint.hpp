#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "mklab/vit.hpp"

// Flat binary checkpoint container. Byte layout (all integers little-endian):
//   magic "MKLABCKP" (8 bytes), u32 version
//   u64 config_len, config bytes (canonical JSON text)
//   u32 entry_count, then per parameter:
//     u32 name_len, name bytes, u32 ndim, u64 dims..., u64 element offset
//   u64 value_count, f32 values
// Round-trips byte-exactly: parse followed by serialize reproduces the input.

namespace mklab {

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::uint64_t offset = 0;  // in elements, into data
};

struct Checkpoint {
  std::string config_json;
  std::vector<CheckpointEntry> manifest;
  std::vector<float> data;
};

namespace detail {

inline constexpr char kCkptMagic[8] = {'M', 'K', 'L', 'A', 'B', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCkptVersion = 1;

inline void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline void put_u64(std::vector<std::uint8_t>& b, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

struct ByteReader {
  const std::vector<std::uint8_t>& buf;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > buf.size()) throw ContractError("checkpoint truncated");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[pos + i]) << (8 * i);
    pos += 8;
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
    pos += n;
    return s;
  }
};

}  // namespace detail

inline std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& c) {
  std::vector<std::uint8_t> out;
  out.insert(out.end(), detail::kCkptMagic, detail::kCkptMagic + 8);
  detail::put_u32(out, detail::kCkptVersion);
  detail::put_u64(out, c.config_json.size());
  out.insert(out.end(), c.config_json.begin(), c.config_json.end());
  detail::put_u32(out, static_cast<std::uint32_t>(c.manifest.size()));
  for (const auto& e : c.manifest) {
    detail::put_u32(out, static_cast<std::uint32_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    detail::put_u32(out, static_cast<std::uint32_t>(e.shape.size()));
    for (std::size_t d : e.shape) detail::put_u64(out, d);
    detail::put_u64(out, e.offset);
  }
  detail::put_u64(out, c.data.size());
  for (float v : c.data) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

inline Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r{bytes};
  if (r.bytes(8) != std::string(detail::kCkptMagic, 8)) {
    throw ContractError("invalid checkpoint magic");
  }
  const auto version = r.u32();
  if (version != detail::kCkptVersion) {
    throw ContractError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint c;
  c.config_json = r.bytes(r.u64());
  const auto n_entries = r.u32();
  c.manifest.reserve(n_entries);
  for (std::uint32_t i = 0; i < n_entries; ++i) {
    CheckpointEntry e;
    e.name = r.bytes(r.u32());
    const auto nd = r.u32();
    for (std::uint32_t d = 0; d < nd; ++d) e.shape.push_back(r.u64());
    e.offset = r.u64();
    c.manifest.push_back(std::move(e));
  }
  const auto n_values = r.u64();
  c.data.reserve(n_values);
  for (std::uint64_t i = 0; i < n_values; ++i) {
    c.data.push_back(std::bit_cast<float>(r.u32()));
  }
  if (r.pos != bytes.size()) throw ContractError("checkpoint has trailing bytes");
  for (const auto& e : c.manifest) {
    if (e.offset + shape_numel(e.shape) > c.data.size()) {
      throw ContractError("checkpoint manifest entry '" + e.name + "' out of data bounds");
    }
  }
  return c;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
  const auto bytes = serialize_checkpoint(c);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ContractError("cannot open for writing: " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw ContractError("write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ContractError("cannot open checkpoint: " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

// Snapshot of model weights (values cast to f32) plus its config text.
template <typename T>
Checkpoint make_checkpoint(VitModel<T>& model, const std::string& config_json) {
  Checkpoint c;
  c.config_json = config_json;
  std::uint64_t offset = 0;
  for (auto& [name, t] : model.named_params()) {
    c.manifest.push_back({name, t->shape(), offset});
    offset += t->numel();
  }
  c.data.reserve(offset);
  for (auto& [name, t] : model.named_params()) {
    for (T v : t->data()) c.data.push_back(static_cast<float>(v));
  }
  return c;
}

// Writes checkpoint weights into an already-constructed model; the manifest
// must carry exactly the model's parameter set.
template <typename T>
void load_into_model(const Checkpoint& c, VitModel<T>& model) {
  auto params = model.named_params();
  if (params.size() != c.manifest.size()) {
    throw ContractError("checkpoint has " + std::to_string(c.manifest.size()) +
                        " parameters, model expects " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& [name, t] = params[i];
    const auto& e = c.manifest[i];
    if (e.name != name || e.shape != t->shape()) {
      throw ContractError("checkpoint entry '" + e.name + "' " + shape_str(e.shape) +
                          " does not match model parameter '" + name + "' " +
                          shape_str(t->shape()));
    }
    for (std::size_t j = 0; j < t->numel(); ++j) {
      t->data()[j] = static_cast<T>(c.data[e.offset + j]);
    }
  }
}

}  // namespace mklab
