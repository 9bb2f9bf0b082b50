// Copyright 2026 The UniRAG Authors
// SPDX-License-Identifier: Apache-2.0

// Candidate pools, query sets and seeded query sampling.
//
// Pool file: one JSON object per line with keys
//   did (string), modality ("text" | "image"), txt (string | null),
//   image_path (string | null), complement_did (string | null),
//   src_dataset (string)
// Query file: one JSON object per line with keys
//   qid, modality, content, instruction, pos_dids (array of string), group_key
// Blank lines are skipped. Unknown keys are ignored.

#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"
#include "unirag/common.hpp"

namespace unirag {

struct CandidateDoc {
  std::string did;
  Modality modality = Modality::Text;
  std::optional<std::string> text;
  std::optional<std::string> image_ref;
  std::optional<std::string> complement_did;
  std::string src_dataset;

  /// Caption text for text docs, image path for image docs.
  const std::string& payload() const { return modality == Modality::Text ? *text : *image_ref; }
};

struct QueryRecord {
  std::string qid;
  Modality modality = Modality::Image;
  std::string content;  // caption text or image path
  std::string instruction;
  std::vector<std::string> pos_dids;
  std::string group_key;
};

struct QuerySample {
  std::uint64_t seed = 0;
  std::vector<std::string> selected;
};

struct PoolLoadOptions {
  /// Require every complement_did to resolve to a doc of the opposite modality.
  bool strict_complements = true;
};

namespace detail {

inline std::optional<std::string> optional_string(const nlohmann::json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  return it->get<std::string>();
}

inline std::string required_string(const nlohmann::json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end() || !it->is_string()) {
    throw ValidationError(std::string("missing string field '") + key + "'");
  }
  return it->get<std::string>();
}

// Runs fn(json, line_no) for every non-blank line; wraps failures in ParseError.
template <typename Fn>
void for_each_json_line(std::istream& in, Fn&& fn) {
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      if (!j.is_object()) throw ValidationError("record is not an object");
      fn(j, line_no);
    } catch (const IntegrityError&) {
      throw;
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(e.what(), line_no);
    } catch (const ValidationError& e) {
      throw ParseError(e.what(), line_no);
    }
  }
}

}  // namespace detail

/// Immutable set of candidate documents with did and payload lookup.
class CandidatePool {
 public:
  CandidatePool() = default;

  /// Takes ownership of docs. Throws IntegrityError on a duplicate did.
  explicit CandidatePool(std::vector<CandidateDoc> docs) : docs_(std::move(docs)) {
    by_did_.reserve(docs_.size());
    for (std::size_t i = 0; i < docs_.size(); ++i) {
      validate_shape(docs_[i]);
      if (!by_did_.emplace(docs_[i].did, i).second) {
        throw IntegrityError("duplicate did '" + docs_[i].did + "'");
      }
      by_payload_.emplace(payload_key(docs_[i].modality, docs_[i].payload()), i);
    }
  }

  std::size_t size() const noexcept { return docs_.size(); }
  bool empty() const noexcept { return docs_.empty(); }
  const std::vector<CandidateDoc>& docs() const noexcept { return docs_; }

  const CandidateDoc* find(std::string_view did) const {
    auto it = by_did_.find(std::string(did));
    return it == by_did_.end() ? nullptr : &docs_[it->second];
  }

  const CandidateDoc& at(std::string_view did) const {
    const CandidateDoc* doc = find(did);
    if (doc == nullptr) throw IntegrityError("unknown did '" + std::string(did) + "'");
    return *doc;
  }

  /// All docs of the given modality whose payload equals `payload` exactly.
  std::vector<const CandidateDoc*> with_payload(Modality m, std::string_view payload) const {
    std::vector<const CandidateDoc*> out;
    auto [lo, hi] = by_payload_.equal_range(payload_key(m, payload));
    for (auto it = lo; it != hi; ++it) out.push_back(&docs_[it->second]);
    return out;
  }

  /// Complement doc of `doc`, or nullptr when absent or unresolvable.
  const CandidateDoc* complement_of(const CandidateDoc& doc) const {
    if (!doc.complement_did) return nullptr;
    const CandidateDoc* c = find(*doc.complement_did);
    if (c == nullptr || c->modality == doc.modality) return nullptr;
    return c;
  }

  /// Throws IntegrityError naming the first complement link that does not
  /// resolve to a doc of the opposite modality.
  void validate_complements() const {
    for (const auto& doc : docs_) {
      if (!doc.complement_did) continue;
      const CandidateDoc* c = find(*doc.complement_did);
      if (c == nullptr) {
        throw IntegrityError("doc '" + doc.did + "' has dangling complement '" +
                             *doc.complement_did + "'");
      }
      if (c->modality == doc.modality) {
        throw IntegrityError("doc '" + doc.did + "' complement '" + c->did +
                             "' has the same modality");
      }
    }
  }

 private:
  static std::string payload_key(Modality m, std::string_view payload) {
    std::string key(1, m == Modality::Text ? 't' : 'i');
    key.append(payload);
    return key;
  }

  static void validate_shape(const CandidateDoc& d) {
    const bool ok = d.modality == Modality::Text ? (d.text && !d.image_ref)
                                                 : (d.image_ref && !d.text);
    if (!ok) {
      throw ValidationError("doc '" + d.did + "': exactly one of txt/image_path must be set, "
                            "matching modality");
    }
  }

  std::vector<CandidateDoc> docs_;
  std::unordered_map<std::string, std::size_t> by_did_;
  std::unordered_multimap<std::string, std::size_t> by_payload_;
};

inline CandidateDoc candidate_from_json(const nlohmann::json& j) {
  CandidateDoc d;
  d.did = detail::required_string(j, "did");
  d.modality = modality_from_string(detail::required_string(j, "modality"));
  d.text = detail::optional_string(j, "txt");
  d.image_ref = detail::optional_string(j, "image_path");
  d.complement_did = detail::optional_string(j, "complement_did");
  d.src_dataset = j.value("src_dataset", std::string{});
  return d;
}

inline nlohmann::json to_json(const CandidateDoc& d) {
  nlohmann::json j;
  j["did"] = d.did;
  j["modality"] = std::string(to_string(d.modality));
  j["txt"] = d.text ? nlohmann::json(*d.text) : nlohmann::json(nullptr);
  j["image_path"] = d.image_ref ? nlohmann::json(*d.image_ref) : nlohmann::json(nullptr);
  j["complement_did"] =
      d.complement_did ? nlohmann::json(*d.complement_did) : nlohmann::json(nullptr);
  j["src_dataset"] = d.src_dataset;
  return j;
}

inline CandidatePool read_pool(std::istream& in, const PoolLoadOptions& opts = {}) {
  std::vector<CandidateDoc> docs;
  std::unordered_map<std::string, std::size_t> seen;
  detail::for_each_json_line(in, [&](const nlohmann::json& j, std::size_t line_no) {
    CandidateDoc d = candidate_from_json(j);
    if (d.modality == Modality::Text ? (!d.text || d.image_ref) : (!d.image_ref || d.text)) {
      throw ValidationError("exactly one of txt/image_path must be set, matching modality");
    }
    auto [it, inserted] = seen.emplace(d.did, line_no);
    if (!inserted) {
      throw IntegrityError("duplicate did '" + d.did + "' at line " + std::to_string(line_no) +
                           " (first seen at line " + std::to_string(it->second) + ")");
    }
    docs.push_back(std::move(d));
  });
  seen.clear();
  CandidatePool pool(std::move(docs));
  if (opts.strict_complements) pool.validate_complements();
  return pool;
}

inline CandidatePool load_pool(const std::string& path, const PoolLoadOptions& opts = {}) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open pool file '" + path + "'");
  return read_pool(in, opts);
}

inline void write_pool(std::ostream& out, const CandidatePool& pool) {
  for (const auto& d : pool.docs()) out << to_json(d).dump() << '\n';
}

// ---------------------------------------------------------------------------

inline QueryRecord query_from_json(const nlohmann::json& j) {
  QueryRecord q;
  q.qid = detail::required_string(j, "qid");
  q.modality = modality_from_string(detail::required_string(j, "modality"));
  q.content = detail::required_string(j, "content");
  q.instruction = j.value("instruction", std::string{});
  if (auto it = j.find("pos_dids"); it != j.end() && !it->is_null()) {
    q.pos_dids = it->get<std::vector<std::string>>();
  }
  q.group_key = j.value("group_key", std::string{});
  return q;
}

inline nlohmann::json to_json(const QueryRecord& q) {
  return nlohmann::json{{"qid", q.qid},
                        {"modality", std::string(to_string(q.modality))},
                        {"content", q.content},
                        {"instruction", q.instruction},
                        {"pos_dids", q.pos_dids},
                        {"group_key", q.group_key}};
}

/// Reads a query file and checks every query has the modality `task` expects
/// (Caption => image queries, ImageGen => caption queries).
inline std::vector<QueryRecord> read_queries(std::istream& in, Task task) {
  std::vector<QueryRecord> out;
  const Modality expected = query_modality(task);
  detail::for_each_json_line(in, [&](const nlohmann::json& j, std::size_t) {
    QueryRecord q = query_from_json(j);
    if (q.modality != expected) {
      throw ValidationError("query '" + q.qid + "' has modality " +
                            std::string(to_string(q.modality)) + " but task " +
                            std::string(to_string(task)) + " expects " +
                            std::string(to_string(expected)));
    }
    out.push_back(std::move(q));
  });
  return out;
}

inline std::vector<QueryRecord> load_queries(const std::string& path, Task task) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open query file '" + path + "'");
  return read_queries(in, task);
}

inline void write_queries(std::ostream& out, const std::vector<QueryRecord>& queries) {
  for (const auto& q : queries) out << to_json(q).dump() << '\n';
}

/// Picks one caption query per distinct group_key, uniformly within each
/// group. Groups are visited in ascending group_key order and members keep
/// their input order, so the result depends only on (queries, seed).
inline QuerySample sample_one_caption_per_image(const std::vector<QueryRecord>& queries,
                                                std::uint64_t seed) {
  std::map<std::string_view, std::vector<std::string_view>> groups;
  for (const auto& q : queries) {
    if (q.modality != Modality::Text) {
      throw ValidationError("query '" + q.qid + "' is not a caption query");
    }
    if (q.group_key.empty()) {
      throw ValidationError("query '" + q.qid + "' has no group_key");
    }
    groups[q.group_key].push_back(q.qid);
  }
  QuerySample sample;
  sample.seed = seed;
  sample.selected.reserve(groups.size());
  Rng rng(seed);
  for (const auto& [key, members] : groups) {
    sample.selected.emplace_back(members[rng.bounded(members.size())]);
  }
  return sample;
}

/// Keeps the queries named in `sample`, preserving input order.
inline std::vector<QueryRecord> apply_sample(const std::vector<QueryRecord>& queries,
                                             const QuerySample& sample) {
  std::vector<std::string_view> keep(sample.selected.begin(), sample.selected.end());
  std::sort(keep.begin(), keep.end());
  std::vector<QueryRecord> out;
  for (const auto& q : queries) {
    if (std::binary_search(keep.begin(), keep.end(), std::string_view(q.qid))) out.push_back(q);
  }
  return out;
}

}  // namespace unirag
