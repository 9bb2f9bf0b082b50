// Copyright 2026 The UniRAG Authors
// SPDX-License-Identifier: Apache-2.0

// Turns single-modality retrieval hits into (image, caption) example pairs.

#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "unirag/common.hpp"
#include "unirag/corpus.hpp"
#include "unirag/retriever.hpp"

namespace unirag {

enum class Provenance : std::uint8_t { Rag, Random, GroundTruth };

inline std::string_view to_string(Provenance p) noexcept {
  switch (p) {
    case Provenance::Rag: return "rag";
    case Provenance::Random: return "random";
    case Provenance::GroundTruth: return "ground_truth";
  }
  return "rag";
}

inline Provenance provenance_from_string(std::string_view s) {
  if (s == "rag") return Provenance::Rag;
  if (s == "random") return Provenance::Random;
  if (s == "ground_truth") return Provenance::GroundTruth;
  throw ValidationError("unknown provenance '" + std::string(s) + "'");
}

struct ExamplePair {
  std::string image_did;
  std::string caption_did;
  std::string image_ref;
  std::string caption;
  Provenance provenance = Provenance::Rag;
  double hop_score = 0.0;

  friend bool operator==(const ExamplePair&, const ExamplePair&) = default;
};

class PairingError : public Error {
 public:
  using Error::Error;
};

struct PairingOptions {
  /// Also refuse the query's ground-truth positives as complements.
  bool ban_positives = false;
};

namespace detail {

// True when `doc` is the query itself, compared by id and by payload.
inline bool reveals_query(const CandidateDoc& doc, const QueryRecord& query) {
  return doc.did == query.qid || (doc.modality == query.modality && doc.payload() == query.content);
}

inline ExamplePair assemble_pair(const CandidateDoc& a, const CandidateDoc& b, Provenance prov,
                                 double hop_score) {
  const CandidateDoc& image = a.modality == Modality::Image ? a : b;
  const CandidateDoc& text = a.modality == Modality::Image ? b : a;
  return ExamplePair{image.did, text.did, *image.image_ref, *text.text, prov, hop_score};
}

}  // namespace detail

/// Second-hop completion: searches the opposite modality of `hit` using the
/// hit's own embedding, skipping any candidate that is the original query
/// (same did, or identical caption text / image path). The best remaining
/// candidate becomes the complement.
inline ExamplePair complete_pair(const RetrievalHit& hit, const Index& index,
                                 const CandidatePool& pool, const QueryRecord& query,
                                 const PairingOptions& opts = {}) {
  const auto row = index.row_of(hit.did);
  if (!row) throw PairingError("no embedding for hit '" + hit.did + "'");
  const CandidateDoc* hit_doc = pool.find(hit.did);
  if (hit_doc == nullptr) throw PairingError("hit '" + hit.did + "' is not in the pool");
  if (detail::reveals_query(*hit_doc, query)) {
    throw PairingError("hit '" + hit.did + "' is the query '" + query.qid + "' itself");
  }
  const Modality target = opposite(hit_doc->modality);

  std::vector<std::size_t> banned;
  if (auto r = index.row_of(query.qid)) banned.push_back(*r);
  if (query.modality == target) {
    for (const CandidateDoc* d : pool.with_payload(target, query.content)) {
      if (auto r = index.row_of(d->did)) banned.push_back(*r);
    }
  }
  if (opts.ban_positives) {
    for (const auto& did : query.pos_dids) {
      if (auto r = index.row_of(did)) banned.push_back(*r);
    }
  }

  const auto found = index.search(index.store().vector(*row), 1, target, RowExclusion(std::move(banned)));
  if (found.empty()) {
    throw PairingError("no eligible " + std::string(to_string(target)) + " complement for '" +
                       hit.did + "'");
  }
  const CandidateDoc* comp = pool.find(found.front().did);
  if (comp == nullptr) {
    throw PairingError("complement '" + found.front().did + "' is not in the pool");
  }
  return detail::assemble_pair(*hit_doc, *comp, Provenance::Rag, found.front().score);
}

/// complete_pair, falling back to the pool's complement_did link when the
/// second hop fails. Fallback pairs carry GroundTruth provenance.
inline ExamplePair complete_pair_or_link(const RetrievalHit& hit, const Index& index,
                                         const CandidatePool& pool, const QueryRecord& query,
                                         const PairingOptions& opts = {}) {
  try {
    return complete_pair(hit, index, pool, query, opts);
  } catch (const PairingError&) {
    const CandidateDoc* doc = pool.find(hit.did);
    const CandidateDoc* comp = doc == nullptr ? nullptr : pool.complement_of(*doc);
    if (comp == nullptr || detail::reveals_query(*comp, query) || detail::reveals_query(*doc, query)) {
      throw;
    }
    return detail::assemble_pair(*doc, *comp, Provenance::GroundTruth, hit.score);
  }
}

/// Random few-shot baseline: k queries drawn uniformly without replacement
/// (partial Fisher-Yates) from `queries`, skipping `exclude_qid` and every
/// query sharing its group_key, each paired with one of its ground-truth
/// positives chosen uniformly.
inline std::vector<ExamplePair> random_pairs(const std::vector<QueryRecord>& queries,
                                             const CandidatePool& pool, std::size_t k,
                                             std::uint64_t seed, std::string_view exclude_qid) {
  if (k == 0) return {};
  std::string_view exclude_group;
  for (const auto& q : queries) {
    if (q.qid == exclude_qid) exclude_group = q.group_key;
  }
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const auto& q = queries[i];
    if (q.qid == exclude_qid || q.pos_dids.empty()) continue;
    if (!exclude_group.empty() && q.group_key == exclude_group) continue;
    eligible.push_back(i);
  }
  if (eligible.size() < k) {
    throw Error("random_pairs: need " + std::to_string(k) + " eligible queries, have " +
                std::to_string(eligible.size()));
  }

  Rng rng(seed);
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + rng.bounded(eligible.size() - i);
    std::swap(eligible[i], eligible[j]);
  }

  std::vector<ExamplePair> pairs;
  pairs.reserve(k);
  for (std::size_t i = 0; i < k; ++i) {
    const QueryRecord& q = queries[eligible[i]];
    const CandidateDoc& pos = pool.at(q.pos_dids[rng.bounded(q.pos_dids.size())]);
    if (pos.modality == q.modality) {
      throw IntegrityError("positive '" + pos.did + "' of query '" + q.qid +
                           "' has the query's own modality");
    }
    if (q.modality == Modality::Image) {
      pairs.push_back({q.qid, pos.did, q.content, *pos.text, Provenance::Random, 0.0});
    } else {
      pairs.push_back({pos.did, q.qid, *pos.image_ref, q.content, Provenance::Random, 0.0});
    }
  }
  return pairs;
}

}  // namespace unirag
