// Copyright 2026 The UniRAG Authors
// SPDX-License-Identifier: Apache-2.0

// Exact inner-product k-NN over a heterogeneous (text + image) embedding pool.
//
// Hits are ordered by (score desc, did asc). The did order is precomputed as
// an integer rank per row, so a sharded scan merges to exactly the same list
// as a single-threaded one.

#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <unordered_map>
#include <utility>
#include <vector>

#include "unirag/common.hpp"
#include "unirag/corpus.hpp"
#include "unirag/uemb.hpp"

namespace unirag {

struct FusionWeights {
  double w_text = 1.0;
  double w_image = 1.0;

  void validate() const {
    if (w_text == 0.0 && w_image == 0.0) throw ValidationError("fusion weights are both zero");
  }
};

struct RetrievalHit {
  std::string did;
  double score = 0.0;
  std::size_t rank = 0;  // 1-based
  Modality modality = Modality::Text;
  bool substituted = false;
  std::string substituted_from;  // original did when substituted

  friend bool operator==(const RetrievalHit&, const RetrievalHit&) = default;
};

/// Weighted sum of the present query vectors: w_text * text + w_image * image.
/// Under inner-product similarity this equals fusing the per-modality scores.
inline std::vector<float> fuse_query(std::optional<std::span<const float>> text_vec,
                                     std::optional<std::span<const float>> image_vec,
                                     const FusionWeights& w) {
  if (!text_vec && !image_vec) throw ValidationError("fuse_query needs at least one vector");
  w.validate();
  if (text_vec && image_vec && text_vec->size() != image_vec->size()) {
    throw ValidationError("fuse_query: text and image vectors differ in length");
  }
  const std::size_t dim = text_vec ? text_vec->size() : image_vec->size();
  std::vector<float> out(dim, 0.0f);
  if (text_vec) {
    for (std::size_t i = 0; i < dim; ++i) out[i] += static_cast<float>(w.w_text * (*text_vec)[i]);
  }
  if (image_vec) {
    for (std::size_t i = 0; i < dim; ++i) {
      out[i] += static_cast<float>(w.w_image * (*image_vec)[i]);
    }
  }
  return out;
}

/// Exclusion predicate that excludes nothing.
struct NoExclusion {
  constexpr bool operator()(std::size_t) const noexcept { return false; }
};

/// Excludes a small, explicit set of rows.
class RowExclusion {
 public:
  RowExclusion() = default;
  explicit RowExclusion(std::vector<std::size_t> rows) : rows_(std::move(rows)) {
    std::sort(rows_.begin(), rows_.end());
    rows_.erase(std::unique(rows_.begin(), rows_.end()), rows_.end());
  }
  bool operator()(std::size_t row) const noexcept {
    return std::binary_search(rows_.begin(), rows_.end(), row);
  }
  std::size_t size() const noexcept { return rows_.size(); }

 private:
  std::vector<std::size_t> rows_;
};

struct IndexOptions {
  /// Upper bound on scan threads; 0 means hardware concurrency.
  unsigned workers = 1;
};

class Index {
 public:
  explicit Index(EmbeddingStore store, IndexOptions opts = {}) : store_(std::move(store)) {
    if (store_.dim() == 0) throw ValidationError("cannot index vectors of dim 0");
    if (store_.empty()) throw ValidationError("cannot index an empty embedding store");
    store_.validate();
    workers_ = opts.workers == 0 ? std::max(1u, std::thread::hardware_concurrency()) : opts.workers;

    const std::size_t n = store_.size();
    std::vector<std::uint32_t> order(n);
    std::iota(order.begin(), order.end(), 0u);
    std::sort(order.begin(), order.end(),
              [&](std::uint32_t a, std::uint32_t b) { return store_.id(a) < store_.id(b); });
    did_rank_.resize(n);
    for (std::uint32_t r = 0; r < n; ++r) did_rank_[order[r]] = r;

    image_mask_.resize(n);
    for (std::size_t i = 0; i < n; ++i) image_mask_[i] = store_.modality(i) == Modality::Image;
    rows_ = store_.row_map();
  }

  Index(const Index&) = delete;
  Index& operator=(const Index&) = delete;
  Index(Index&& other) noexcept
      : store_(std::move(other.store_)),
        did_rank_(std::move(other.did_rank_)),
        image_mask_(std::move(other.image_mask_)),
        rows_(std::move(other.rows_)),
        workers_(other.workers_),
        searches_(other.searches_.load()) {}

  std::size_t size() const noexcept { return store_.size(); }
  std::uint32_t dim() const noexcept { return store_.dim(); }
  unsigned workers() const noexcept { return workers_; }
  const EmbeddingStore& store() const noexcept { return store_; }

  std::optional<std::size_t> row_of(std::string_view did) const {
    auto it = rows_.find(std::string(did));
    if (it == rows_.end()) return std::nullopt;
    return it->second;
  }

  /// Number of search() calls served so far.
  std::size_t search_count() const noexcept { return searches_.load(std::memory_order_relaxed); }

  /// The k best rows passing `filter` and not excluded, ordered by
  /// (score desc, did asc). Returns fewer than k when fewer rows qualify.
  /// `workers` overrides the index default for this call (0 = default).
  template <typename Exclude = NoExclusion>
  std::vector<RetrievalHit> search(std::span<const float> query, std::size_t k,
                                   std::optional<Modality> filter = std::nullopt,
                                   const Exclude& exclude = Exclude{},
                                   unsigned workers = 0) const {
    if (query.size() != store_.dim()) {
      throw ValidationError("query has dim " + std::to_string(query.size()) + ", index has " +
                            std::to_string(store_.dim()));
    }
    if (k == 0) throw ValidationError("search requires k >= 1");
    searches_.fetch_add(1, std::memory_order_relaxed);

    const std::size_t n = store_.size();
    unsigned shards = workers == 0 ? workers_ : workers;
    shards = static_cast<unsigned>(std::clamp<std::size_t>(shards, 1, n));

    std::vector<std::vector<Scored>> partial(shards);
    auto scan = [&](unsigned shard) {
      const std::size_t lo = n * shard / shards;
      const std::size_t hi = n * (shard + 1) / shards;
      scan_range(query, k, filter, exclude, lo, hi, partial[shard]);
    };
    if (shards == 1) {
      scan(0);
    } else {
      std::vector<std::jthread> pool;
      pool.reserve(shards - 1);
      for (unsigned s = 1; s < shards; ++s) pool.emplace_back(scan, s);
      scan(0);
    }

    std::vector<Scored> merged;
    for (auto& p : partial) merged.insert(merged.end(), p.begin(), p.end());
    const std::size_t take = std::min(k, merged.size());
    std::partial_sort(merged.begin(), merged.begin() + static_cast<std::ptrdiff_t>(take),
                      merged.end(), Better{});
    std::vector<RetrievalHit> hits;
    hits.reserve(take);
    for (std::size_t i = 0; i < take; ++i) {
      const auto row = merged[i].row;
      hits.push_back(RetrievalHit{store_.id(row), static_cast<double>(merged[i].score), i + 1,
                                  store_.modality(row), false, {}});
    }
    return hits;
  }

 private:
  struct Scored {
    float score;
    std::uint32_t did_rank;
    std::uint32_t row;
  };

  // a ranks strictly before b.
  struct Better {
    bool operator()(const Scored& a, const Scored& b) const noexcept {
      if (a.score != b.score) return a.score > b.score;
      return a.did_rank < b.did_rank;
    }
  };

  static float dot(const float* a, const float* b, std::size_t dim) noexcept {
    float acc = 0.0f;
    for (std::size_t i = 0; i < dim; ++i) acc += a[i] * b[i];
    return acc;
  }

  template <typename Exclude>
  void scan_range(std::span<const float> query, std::size_t k, std::optional<Modality> filter,
                  const Exclude& exclude, std::size_t lo, std::size_t hi,
                  std::vector<Scored>& heap) const {
    // Max-heap under Better: front is the worst of the current top-k.
    heap.reserve(k + 1);
    const float* base = store_.data().data();
    const std::size_t dim = store_.dim();
    for (std::size_t row = lo; row < hi; ++row) {
      if (filter && (image_mask_[row] != (*filter == Modality::Image))) continue;
      if (exclude(row)) continue;
      const Scored s{dot(query.data(), base + row * dim, dim), did_rank_[row],
                     static_cast<std::uint32_t>(row)};
      if (heap.size() < k) {
        heap.push_back(s);
        std::push_heap(heap.begin(), heap.end(), Better{});
      } else if (Better{}(s, heap.front())) {
        std::pop_heap(heap.begin(), heap.end(), Better{});
        heap.back() = s;
        std::push_heap(heap.begin(), heap.end(), Better{});
      }
    }
  }

  EmbeddingStore store_;
  std::vector<std::uint32_t> did_rank_;
  std::vector<bool> image_mask_;
  std::unordered_map<std::string, std::size_t> rows_;
  unsigned workers_ = 1;
  mutable std::atomic<std::size_t> searches_{0};
};

inline Index build_index(EmbeddingStore store, IndexOptions opts = {}) {
  return Index(std::move(store), opts);
}

// ---------------------------------------------------------------------------

struct SubstitutionResult {
  std::vector<RetrievalHit> hits;
  std::size_t substitution_count = 0;
  /// One message per wrong-modality hit that had no usable complement.
  std::vector<std::string> errors;
};

/// Replaces wrong-modality hits with their pool complement (score carried
/// over, `substituted` set). Hits without a complement are dropped and
/// reported. Ranks are renumbered 1..n afterwards.
inline SubstitutionResult substitute_wrong_modality(const std::vector<RetrievalHit>& hits,
                                                    Modality expected,
                                                    const CandidatePool& pool) {
  SubstitutionResult out;
  out.hits.reserve(hits.size());
  for (const auto& hit : hits) {
    if (hit.modality == expected) {
      out.hits.push_back(hit);
      continue;
    }
    const CandidateDoc* doc = pool.find(hit.did);
    const CandidateDoc* comp = doc == nullptr ? nullptr : pool.complement_of(*doc);
    if (comp == nullptr || comp->modality != expected) {
      out.errors.push_back("hit '" + hit.did + "' has modality " +
                           std::string(to_string(hit.modality)) + " and no " +
                           std::string(to_string(expected)) + " complement");
      continue;
    }
    RetrievalHit sub = hit;
    sub.did = comp->did;
    sub.modality = comp->modality;
    sub.substituted = true;
    sub.substituted_from = hit.did;
    out.hits.push_back(std::move(sub));
    ++out.substitution_count;
  }
  for (std::size_t i = 0; i < out.hits.size(); ++i) out.hits[i].rank = i + 1;
  return out;
}

/// Fraction of top-1 hits whose modality differs from `expected`.
inline double modality_confusion_rate(std::span<const RetrievalHit> top1, Modality expected) {
  if (top1.empty()) throw ValidationError("modality_confusion_rate of an empty run");
  const auto wrong = std::count_if(top1.begin(), top1.end(),
                                   [&](const RetrievalHit& h) { return h.modality != expected; });
  return static_cast<double>(wrong) / static_cast<double>(top1.size());
}

}  // namespace unirag
