// Copyright 2026 The UniRAG Authors
// SPDX-License-Identifier: Apache-2.0

// UEMB: id-tagged f32 vector container, little-endian.
//
//   offset  size  field
//   0       4     magic "UEMB" (0x55 0x45 0x4D 0x42)
//   4       1     version = 1
//   5       1     dtype = 0 (f32)
//   6       2     flags (u16); 0 = plain vectors, 1 = rows are probabilities
//   8       4     dim (u32)
//   12      8     count (u64)
//   20      ...   count records of
//                   u16 id_len | id bytes (UTF-8) | u8 modality (0 text, 1 image)
//                   | dim x f32
//
// The header's flags field is the "reserved" u16 of the layout; readers
// reject any value other than 0 or 1.

#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "unirag/common.hpp"

namespace unirag {

static_assert(std::endian::native == std::endian::little,
              "UEMB I/O assumes a little-endian host");

inline constexpr std::uint16_t kUembPlain = 0;
inline constexpr std::uint16_t kUembProbabilities = 1;

/// Aligned (id, modality, vector) records; vectors stored row-major in one
/// contiguous buffer.
class EmbeddingStore {
 public:
  EmbeddingStore() = default;
  explicit EmbeddingStore(std::uint32_t dim, std::uint16_t flags = kUembPlain)
      : dim_(dim), flags_(flags) {}

  std::uint32_t dim() const noexcept { return dim_; }
  std::uint16_t flags() const noexcept { return flags_; }
  std::size_t size() const noexcept { return ids_.size(); }
  bool empty() const noexcept { return ids_.empty(); }

  const std::vector<std::string>& ids() const noexcept { return ids_; }
  const std::vector<Modality>& modalities() const noexcept { return modalities_; }
  const std::vector<float>& data() const noexcept { return data_; }

  const std::string& id(std::size_t row) const { return ids_.at(row); }
  Modality modality(std::size_t row) const { return modalities_.at(row); }
  std::span<const float> vector(std::size_t row) const {
    return {data_.data() + row * dim_, dim_};
  }

  void reserve(std::size_t n) {
    ids_.reserve(n);
    modalities_.reserve(n);
    data_.reserve(n * dim_);
  }

  /// Appends a record. Throws ValidationError on a length mismatch.
  void add(std::string id, Modality m, std::span<const float> vec) {
    if (vec.size() != dim_) {
      throw ValidationError("vector for '" + id + "' has length " +
                            std::to_string(vec.size()) + ", expected " + std::to_string(dim_));
    }
    ids_.push_back(std::move(id));
    modalities_.push_back(m);
    data_.insert(data_.end(), vec.begin(), vec.end());
  }

  /// Checks dim > 0, unique ids and buffer/record alignment.
  void validate() const {
    if (dim_ == 0) throw ValidationError("embedding dim must be positive");
    if (modalities_.size() != ids_.size() || data_.size() != ids_.size() * dim_) {
      throw ValidationError("embedding store arrays are misaligned");
    }
    std::unordered_set<std::string_view> seen;
    seen.reserve(ids_.size());
    for (const auto& id : ids_) {
      if (!seen.insert(id).second) throw ValidationError("duplicate embedding id '" + id + "'");
    }
  }

  /// Row lookup table id -> row. Built on demand; O(n).
  std::unordered_map<std::string, std::size_t> row_map() const {
    std::unordered_map<std::string, std::size_t> m;
    m.reserve(ids_.size());
    for (std::size_t i = 0; i < ids_.size(); ++i) m.emplace(ids_[i], i);
    return m;
  }

 private:
  std::uint32_t dim_ = 0;
  std::uint16_t flags_ = kUembPlain;
  std::vector<std::string> ids_;
  std::vector<Modality> modalities_;
  std::vector<float> data_;
};

namespace detail {

template <typename T>
void write_le(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_le(std::istream& in, const char* what) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw ValidationError(std::string("UEMB truncated while reading ") + what);
  }
  return v;
}

}  // namespace detail

inline void write_uemb(std::ostream& out, const EmbeddingStore& store) {
  store.validate();
  out.write("UEMB", 4);
  detail::write_le<std::uint8_t>(out, 1);
  detail::write_le<std::uint8_t>(out, 0);
  detail::write_le<std::uint16_t>(out, store.flags());
  detail::write_le<std::uint32_t>(out, store.dim());
  detail::write_le<std::uint64_t>(out, store.size());
  for (std::size_t i = 0; i < store.size(); ++i) {
    const std::string& id = store.id(i);
    if (id.size() > 0xFFFF) throw ValidationError("id too long for UEMB: '" + id + "'");
    detail::write_le<std::uint16_t>(out, static_cast<std::uint16_t>(id.size()));
    out.write(id.data(), static_cast<std::streamsize>(id.size()));
    detail::write_le<std::uint8_t>(out, static_cast<std::uint8_t>(store.modality(i)));
    auto v = store.vector(i);
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(float)));
  }
  if (!out) throw Error("failed writing UEMB stream");
}

inline void save_uemb(const std::string& path, const EmbeddingStore& store) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  write_uemb(out, store);
}

/// Parses and validates a UEMB stream. Rejects bad magic/version/dtype/flags,
/// dim 0, truncated records, trailing bytes, non-finite values, duplicate
/// ids, and probability rows that do not sum to 1 within 1e-6 (flags = 1).
inline EmbeddingStore read_uemb(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "UEMB", 4) != 0) {
    throw ValidationError("not a UEMB file (bad magic)");
  }
  const auto version = detail::read_le<std::uint8_t>(in, "version");
  const auto dtype = detail::read_le<std::uint8_t>(in, "dtype");
  const auto flags = detail::read_le<std::uint16_t>(in, "flags");
  const auto dim = detail::read_le<std::uint32_t>(in, "dim");
  const auto count = detail::read_le<std::uint64_t>(in, "count");
  if (version != 1) throw ValidationError("unsupported UEMB version " + std::to_string(version));
  if (dtype != 0) throw ValidationError("unsupported UEMB dtype " + std::to_string(dtype));
  if (flags > kUembProbabilities) {
    throw ValidationError("unknown UEMB flags value " + std::to_string(flags));
  }
  if (dim == 0) throw ValidationError("UEMB dim must be positive");

  EmbeddingStore store(dim, flags);
  std::vector<float> buf(dim);
  std::string id;
  for (std::uint64_t r = 0; r < count; ++r) {
    const auto id_len = detail::read_le<std::uint16_t>(in, "id length");
    id.assign(id_len, '\0');
    if (!in.read(id.data(), id_len)) throw ValidationError("UEMB truncated in record id");
    const auto mod = detail::read_le<std::uint8_t>(in, "modality");
    if (mod > 1) throw ValidationError("bad modality byte in record '" + id + "'");
    if (!in.read(reinterpret_cast<char*>(buf.data()),
                 static_cast<std::streamsize>(dim * sizeof(float)))) {
      throw ValidationError("UEMB truncated in vector of record '" + id + "'");
    }
    double sum = 0.0;
    for (float x : buf) {
      if (!std::isfinite(x)) throw ValidationError("non-finite value in record '" + id + "'");
      sum += x;
    }
    if (flags == kUembProbabilities && std::abs(sum - 1.0) > 1e-6) {
      throw ValidationError("probability row '" + id + "' sums to " + std::to_string(sum));
    }
    store.add(id, static_cast<Modality>(mod), buf);
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw ValidationError("UEMB header count " + std::to_string(count) +
                          " is smaller than the number of records present");
  }
  store.validate();
  return store;
}

inline EmbeddingStore load_uemb(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open UEMB file '" + path + "'");
  return read_uemb(in);
}

}  // namespace unirag
