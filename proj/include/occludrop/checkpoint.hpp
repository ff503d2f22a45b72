#pragma once

// Binary checkpoint files.
//
// Layout (all integers little-endian):
//   magic      8 bytes  "OCCDROP1"
//   version    u32      kCheckpointVersion
//   config     u64      config fingerprint
//   count      u32      number of tensors
//   directory  count entries:
//                name_len u32, name bytes, dtype u8 (4 = f32, 8 = f64),
//                rank u32, dims u64 x rank, offset u64 (from data start)
//   data       raw little-endian values, tensors back to back

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "occludrop/errors.hpp"
#include "occludrop/tensor.hpp"

namespace occludrop {

inline constexpr char kCheckpointMagic[8] = {'O', 'C', 'C', 'D', 'R', 'O', 'P', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  std::uint8_t dtype = 8;
  Shape shape;
  std::vector<double> values;  ///< widened copy of the stored data
};

struct Checkpoint {
  std::uint64_t config_fingerprint = 0;
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(const std::string& name) const {
    for (const auto& e : entries) {
      if (e.name == name) return &e;
    }
    return nullptr;
  }
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename U>
void put(std::string& out, U v) {
  char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  out.append(buf, sizeof(U));
}

template <typename U>
U take(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(U) > in.size()) throw DataError("checkpoint truncated");
  U v;
  std::memcpy(&v, in.data() + pos, sizeof(U));
  pos += sizeof(U);
  return v;
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path, std::uint64_t config_fingerprint,
                     const std::vector<std::pair<std::string, Tensor<T>>>& tensors) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  std::string head(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put<std::uint32_t>(head, kCheckpointVersion);
  detail::put<std::uint64_t>(head, config_fingerprint);
  detail::put<std::uint32_t>(head, static_cast<std::uint32_t>(tensors.size()));
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    detail::put<std::uint32_t>(head, static_cast<std::uint32_t>(name.size()));
    head += name;
    detail::put<std::uint8_t>(head, sizeof(T));
    detail::put<std::uint32_t>(head, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) detail::put<std::uint64_t>(head, d);
    detail::put<std::uint64_t>(head, offset);
    offset += t.numel() * sizeof(T);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint '" + path + "'");
  out.write(head.data(), static_cast<std::streamsize>(head.size()));
  for (const auto& entry : tensors) {
    auto v = entry.second.values();
    out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(T)));
  }
  if (!out) throw DataError("failed writing checkpoint '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read checkpoint '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < sizeof kCheckpointMagic || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    throw DataError("'" + path + "' is not a checkpoint (bad magic)");
  }
  std::size_t pos = 8;
  const auto version = detail::take<std::uint32_t>(bytes, pos);
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint version " + std::to_string(version) + " unsupported");
  }
  Checkpoint ck;
  ck.config_fingerprint = detail::take<std::uint64_t>(bytes, pos);
  const auto count = detail::take<std::uint32_t>(bytes, pos);
  std::vector<std::uint64_t> offsets;
  for (std::uint32_t k = 0; k < count; ++k) {
    CheckpointEntry e;
    const auto len = detail::take<std::uint32_t>(bytes, pos);
    if (pos + len > bytes.size()) throw DataError("checkpoint truncated");
    e.name = bytes.substr(pos, len);
    pos += len;
    e.dtype = detail::take<std::uint8_t>(bytes, pos);
    if (e.dtype != 4 && e.dtype != 8) throw DataError("checkpoint tensor '" + e.name + "' has unknown dtype");
    const auto rank = detail::take<std::uint32_t>(bytes, pos);
    for (std::uint32_t r = 0; r < rank; ++r) e.shape.push_back(detail::take<std::uint64_t>(bytes, pos));
    offsets.push_back(detail::take<std::uint64_t>(bytes, pos));
    ck.entries.push_back(std::move(e));
  }
  const std::size_t data_start = pos;
  for (std::size_t k = 0; k < ck.entries.size(); ++k) {
    auto& e = ck.entries[k];
    const std::size_t n = shape_numel(e.shape);
    std::size_t at = data_start + offsets[k];
    if (at + n * e.dtype > bytes.size()) throw DataError("checkpoint data for '" + e.name + "' truncated");
    e.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      e.values[i] = e.dtype == 4 ? static_cast<double>(detail::take<float>(bytes, at)) : detail::take<double>(bytes, at);
    }
  }
  return ck;
}

/// Copy stored values into same-named tensors; every target must be present
/// with a matching shape.
template <typename T>
void restore_checkpoint(const Checkpoint& ck, const std::vector<std::pair<std::string, Tensor<T>>>& targets) {
  for (const auto& [name, t] : targets) {
    const CheckpointEntry* e = ck.find(name);
    if (!e) throw DataError("checkpoint lacks tensor '" + name + "'");
    if (e->shape != t.shape()) {
      throw DataError("checkpoint tensor '" + name + "' has shape " + shape_str(e->shape) + ", model expects " +
                      shape_str(t.shape()));
    }
    Tensor<T> dst = t;
    auto v = dst.values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(e->values[i]);
  }
}

}  // namespace occludrop
