// Copyright 2026 The UniRAG Authors
// SPDX-License-Identifier: Apache-2.0

// Helpers shared by the unit tests and the acceptance binary.

#pragma once

#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "unirag/corpus.hpp"
#include "unirag/image.hpp"
#include "unirag/uemb.hpp"

namespace unirag::testing {

namespace fs = std::filesystem;

inline fs::path fixture(const std::string& rel) { return fs::path(UNIRAG_FIXTURES) / rel; }

inline std::string slurp(const fs::path& p) { return read_file_bytes(p.string()); }

inline nlohmann::json load_json(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    std::random_device rd;
    path_ = fs::temp_directory_path() /
            ("unirag-test-" + std::to_string(rd()) + "-" + std::to_string(counter++));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const noexcept { return path_; }
  fs::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  fs::path path_;
};

inline std::vector<float> gaussian_vector(std::mt19937_64& gen, std::size_t dim) {
  std::normal_distribution<float> d(0.0f, 1.0f);
  std::vector<float> v(dim);
  for (auto& x : v) x = d(gen);
  return v;
}

inline std::vector<float> normalized(std::vector<float> v) {
  double n = 0;
  for (float x : v) n += double(x) * x;
  n = std::sqrt(n);
  for (auto& x : v) x = static_cast<float>(x / n);
  return v;
}

/// Deterministic random-pixel PNG.
inline std::string random_png(std::uint32_t w, std::uint32_t h, std::uint64_t seed) {
  RgbImage img(w, h);
  std::mt19937_64 gen(seed);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(gen());
  return encode_png(img);
}

inline void write_text(const fs::path& p, const std::string& text) { write_file_bytes(p.string(), text); }

/// Writes `docs` as a pool JSONL file.
inline void write_pool_file(const fs::path& p, const std::vector<CandidateDoc>& docs) {
  std::ostringstream os;
  for (const auto& d : docs) os << to_json(d).dump() << "\n";
  write_text(p, os.str());
}

inline void write_queries_file(const fs::path& p, const std::vector<QueryRecord>& qs) {
  std::ostringstream os;
  write_queries(os, qs);
  write_text(p, os.str());
}

inline CandidateDoc text_doc(std::string did, std::string text, std::optional<std::string> comp = {}) {
  CandidateDoc d;
  d.did = std::move(did);
  d.modality = Modality::Text;
  d.text = std::move(text);
  d.complement_did = std::move(comp);
  d.src_dataset = "test";
  return d;
}

inline CandidateDoc image_doc(std::string did, std::string path, std::optional<std::string> comp = {}) {
  CandidateDoc d;
  d.did = std::move(did);
  d.modality = Modality::Image;
  d.image_ref = std::move(path);
  d.complement_did = std::move(comp);
  d.src_dataset = "test";
  return d;
}

/// Whitespace split.
inline std::vector<std::string> split_ws(const std::string& s) {
  std::istringstream is(s);
  std::vector<std::string> out;
  for (std::string w; is >> w;) out.push_back(w);
  return out;
}

}  // namespace unirag::testing
