// Copyright 2026 The UniRAG Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <openssl/evp.h>

#include <array>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace unirag {

// ---------------------------------------------------------------------------
// Errors. Every failure surfaced by the library derives from unirag::Error so
// callers can catch at one level and still branch on the concrete kind.

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class IntegrityError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------

enum class Modality : std::uint8_t { Text = 0, Image = 1 };

inline Modality opposite(Modality m) noexcept {
  return m == Modality::Text ? Modality::Image : Modality::Text;
}

inline std::string_view to_string(Modality m) noexcept {
  return m == Modality::Text ? "text" : "image";
}

inline Modality modality_from_string(std::string_view s) {
  if (s == "text") return Modality::Text;
  if (s == "image") return Modality::Image;
  throw ValidationError("unknown modality '" + std::string(s) + "'");
}

/// Caption: image query, text output. ImageGen: caption query, image output.
enum class Task : std::uint8_t { Caption, ImageGen };

inline std::string_view to_string(Task t) noexcept {
  return t == Task::Caption ? "caption" : "image_gen";
}

inline Task task_from_string(std::string_view s) {
  if (s == "caption" || s == "image_to_text") return Task::Caption;
  if (s == "image_gen" || s == "text_to_image") return Task::ImageGen;
  throw ValidationError("unknown task '" + std::string(s) + "'");
}

/// Modality of the query side for a task.
inline Modality query_modality(Task t) noexcept {
  return t == Task::Caption ? Modality::Image : Modality::Text;
}

/// Modality the retriever is expected to return for a task.
inline Modality target_modality(Task t) noexcept { return opposite(query_modality(t)); }

// ---------------------------------------------------------------------------
// Seeded PRNG.
//
// xoshiro256** (Blackman & Vigna), state seeded by four SplitMix64 outputs.
//   splitmix64: z = (s += 0x9E3779B97F4A7C15);
//               z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9;
//               z = (z ^ (z >> 27)) * 0x94D049BB133111EB;
//               return z ^ (z >> 31);
//   next:       r = rotl(s1 * 5, 7) * 9; t = s1 << 17;
//               s2 ^= s0; s3 ^= s1; s1 ^= s2; s0 ^= s3; s2 ^= t; s3 = rotl(s3, 45);
// bounded(n) rejects draws below (2^64 - n) mod n and returns r mod n, so
// results are unbiased and identical on any platform.

class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t seed) noexcept {
    std::uint64_t sm = seed;
    for (auto& word : state_) word = splitmix64(sm);
  }

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept {
    return std::numeric_limits<result_type>::max();
  }

  result_type operator()() noexcept { return next(); }

  std::uint64_t next() noexcept {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t bounded(std::uint64_t n) noexcept {
    const std::uint64_t threshold = (0 - n) % n;
    for (;;) {
      const std::uint64_t r = next();
      if (r >= threshold) return r % n;
    }
  }

  /// Uniform double in [0, 1) from the top 53 bits.
  double uniform() noexcept {
    return static_cast<double>(next() >> 11) * 0x1.0p-53;
  }

  static std::uint64_t splitmix64(std::uint64_t& s) noexcept {
    std::uint64_t z = (s += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) noexcept {
    return (x << k) | (x >> (64 - k));
  }

  std::array<std::uint64_t, 4> state_{};
};

/// Derives an independent stream seed from a base seed and a string key
/// (e.g. a query id), so per-item draws do not depend on processing order.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view key) noexcept {
  // FNV-1a over the key, mixed with the seed through SplitMix64.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : key) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::uint64_t s = seed ^ h;
  return Rng::splitmix64(s);
}

// ---------------------------------------------------------------------------
// Hashing and base64, backed by OpenSSL's EVP layer.

inline std::string sha256_hex(std::string_view data) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest.data(), &len, EVP_sha256(),
                 nullptr) != 1) {
    throw Error("sha256 failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xF]);
  }
  return out;
}

inline std::string base64_encode(std::string_view bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(bytes.data()),
                                static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

inline std::string base64_decode(std::string_view text) {
  if (text.size() % 4 != 0) throw ValidationError("base64 length not a multiple of 4");
  std::string out(3 * text.size() / 4, '\0');
  const int n = EVP_DecodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(text.data()),
                                static_cast<int>(text.size()));
  if (n < 0) throw ValidationError("invalid base64 payload");
  // EVP_DecodeBlock keeps the zero bytes produced by '=' padding.
  std::size_t size = static_cast<std::size_t>(n);
  if (!text.empty() && text.back() == '=') --size;
  if (text.size() >= 2 && text[text.size() - 2] == '=') --size;
  out.resize(size);
  return out;
}

}  // namespace unirag
