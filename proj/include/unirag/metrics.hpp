// Copyright 2026 The UniRAG Authors
// SPDX-License-Identifier: Apache-2.0

// Caption metrics (BLEU-1..4, ROUGE-L, CIDEr-D) computed from tokens, and
// image metrics (FID, Inception Score, CLIP Score) computed from precomputed
// feature vectors. Caption metric conventions follow the COCO caption
// evaluation toolkit; all arithmetic is double precision.

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "unirag/common.hpp"
#include "unirag/uemb.hpp"

namespace unirag {

using Tokens = std::vector<std::string>;

class MetricError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Tokenizer.
//
// PTB-style caption normalization:
//   1. ASCII letters are lowercased.
//   2. Whitespace and the separators , ; : ! ? " ( ) [ ] { } < > ` * split tokens.
//   3. @ # $ % & + = / become tokens of their own.
//   4. Leading and trailing . ' - _ ~ are stripped from each token, so
//      "bike." -> "bike" while "u.s" and "black-and-white" survive.
//   5. The clitics 's 're 've 'll 'd 'm and n't are split off
//      ("man's" -> man 's, "don't" -> do n't).
//   6. Tokens with no letter, digit or non-ASCII byte are dropped.

namespace detail {

inline bool is_separator(char c) {
  switch (c) {
    case ',': case ';': case ':': case '!': case '?': case '"': case '(': case ')':
    case '[': case ']': case '{': case '}': case '<': case '>': case '`': case '*':
      return true;
    default:
      return std::isspace(static_cast<unsigned char>(c)) != 0;
  }
}

inline bool is_symbol_token(char c) {
  switch (c) {
    case '@': case '#': case '$': case '%': case '&': case '+': case '=': case '/':
      return true;
    default:
      return false;
  }
}

inline bool is_edge_punct(char c) {
  return c == '.' || c == '\'' || c == '-' || c == '_' || c == '~';
}

inline bool has_word_char(std::string_view s) {
  return std::any_of(s.begin(), s.end(), [](char c) {
    const auto u = static_cast<unsigned char>(c);
    return u >= 0x80 || std::isalnum(u) != 0;
  });
}

inline void emit_word(std::string_view w, Tokens& out) {
  while (!w.empty() && is_edge_punct(w.front())) w.remove_prefix(1);
  while (!w.empty() && is_edge_punct(w.back())) w.remove_suffix(1);
  if (w.empty()) return;
  auto ends_with = [&](std::string_view suf) {
    return w.size() > suf.size() && w.substr(w.size() - suf.size()) == suf;
  };
  std::string_view clitic;
  if (ends_with("n't")) {
    clitic = w.substr(w.size() - 3);
  } else {
    for (std::string_view c : {"'s", "'re", "'ve", "'ll", "'d", "'m"}) {
      if (ends_with(c)) {
        clitic = w.substr(w.size() - c.size());
        break;
      }
    }
  }
  std::string_view stem = w.substr(0, w.size() - clitic.size());
  while (!stem.empty() && is_edge_punct(stem.back())) stem.remove_suffix(1);
  if (has_word_char(stem)) out.emplace_back(stem);
  if (!clitic.empty()) out.emplace_back(clitic);
}

}  // namespace detail

inline Tokens tokenize(std::string_view caption) {
  std::string lowered(caption);
  for (auto& c : lowered) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  }
  Tokens out;
  std::string_view s(lowered);
  std::size_t start = 0;
  auto flush = [&](std::size_t end) {
    if (end > start) detail::emit_word(s.substr(start, end - start), out);
  };
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (detail::is_separator(s[i])) {
      flush(i);
      start = i + 1;
    } else if (detail::is_symbol_token(s[i])) {
      flush(i);
      out.emplace_back(1, s[i]);
      start = i + 1;
    }
  }
  flush(s.size());
  return out;
}

// ---------------------------------------------------------------------------

namespace detail {

using NgramCounts = std::map<std::vector<std::string_view>, int>;

inline NgramCounts count_ngrams(const Tokens& tokens, int max_n) {
  NgramCounts counts;
  for (int n = 1; n <= max_n; ++n) {
    for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
      ++counts[std::vector<std::string_view>(tokens.begin() + i, tokens.begin() + i + n)];
    }
  }
  return counts;
}

// Sum of values in ascending order, so the result does not depend on the
// order the values were produced in.
inline double sorted_sum(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return std::accumulate(v.begin(), v.end(), 0.0);
}

inline void check_corpus(std::size_t cands, std::size_t refs) {
  if (cands == 0) throw MetricError("empty caption corpus");
  if (cands != refs) throw MetricError("candidate and reference counts differ");
}

}  // namespace detail

/// Corpus BLEU-1..4: clipped n-gram precisions summed over the corpus, their
/// geometric mean up to order n, times the brevity penalty computed from the
/// closest reference length per candidate (ties go to the shorter reference).
inline std::array<double, 4> bleu_all(std::span<const Tokens> cands,
                                      std::span<const std::vector<Tokens>> refs) {
  detail::check_corpus(cands.size(), refs.size());
  std::array<std::int64_t, 4> correct{}, guess{};
  std::int64_t test_len = 0, ref_len = 0;
  for (std::size_t i = 0; i < cands.size(); ++i) {
    if (refs[i].empty()) throw MetricError("candidate " + std::to_string(i) + " has no references");
    const auto& cand = cands[i];
    const auto clen = static_cast<std::int64_t>(cand.size());
    std::int64_t best = -1;
    detail::NgramCounts max_ref;
    for (const auto& r : refs[i]) {
      const auto rlen = static_cast<std::int64_t>(r.size());
      if (best < 0 || std::abs(rlen - clen) < std::abs(best - clen) ||
          (std::abs(rlen - clen) == std::abs(best - clen) && rlen < best)) {
        best = rlen;
      }
      for (const auto& [g, c] : detail::count_ngrams(r, 4)) max_ref[g] = std::max(max_ref[g], c);
    }
    test_len += clen;
    ref_len += best;
    for (const auto& [g, c] : detail::count_ngrams(cand, 4)) {
      auto it = max_ref.find(g);
      if (it != max_ref.end()) correct[g.size() - 1] += std::min(c, it->second);
    }
    for (int n = 1; n <= 4; ++n) guess[n - 1] += std::max<std::int64_t>(0, clen - n + 1);
  }

  std::array<double, 4> out{};
  double log_sum = 0.0;
  bool zero = false;
  const double bp = test_len == 0 ? 0.0
                    : test_len < ref_len
                        ? std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(test_len))
                        : 1.0;
  for (int n = 0; n < 4; ++n) {
    if (correct[n] == 0 || guess[n] == 0) zero = true;
    if (!zero) log_sum += std::log(static_cast<double>(correct[n]) / static_cast<double>(guess[n]));
    out[n] = zero ? 0.0 : bp * std::exp(log_sum / (n + 1));
  }
  return out;
}

inline double bleu(std::span<const Tokens> cands, std::span<const std::vector<Tokens>> refs, int n) {
  if (n < 1 || n > 4) throw MetricError("BLEU order must be in 1..4");
  return bleu_all(cands, refs)[static_cast<std::size_t>(n - 1)];
}

namespace detail {

inline std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace detail

/// ROUGE-L per candidate: LCS precision and recall are each maximised over
/// the references, then combined as ((1+b^2) P R) / (R + b^2 P) with b = 1.2.
/// Returns the mean over candidates.
inline double rouge_l(std::span<const Tokens> cands, std::span<const std::vector<Tokens>> refs,
                      double beta = 1.2) {
  detail::check_corpus(cands.size(), refs.size());
  std::vector<double> scores;
  scores.reserve(cands.size());
  for (std::size_t i = 0; i < cands.size(); ++i) {
    if (refs[i].empty()) throw MetricError("candidate " + std::to_string(i) + " has no references");
    double p_max = 0.0, r_max = 0.0;
    for (const auto& r : refs[i]) {
      const auto lcs = static_cast<double>(detail::lcs_length(r, cands[i]));
      if (!cands[i].empty()) p_max = std::max(p_max, lcs / static_cast<double>(cands[i].size()));
      if (!r.empty()) r_max = std::max(r_max, lcs / static_cast<double>(r.size()));
    }
    const double b2 = beta * beta;
    scores.push_back(p_max != 0.0 && r_max != 0.0 ? ((1 + b2) * p_max * r_max) / (r_max + b2 * p_max)
                                                  : 0.0);
  }
  return detail::sorted_sum(std::move(scores)) / static_cast<double>(cands.size());
}

// ---------------------------------------------------------------------------
// CIDEr-D.
//
// For n = 1..4, each caption becomes a tf-idf vector over its n-grams with
// idf = log(N) - log(max(1, df)), where N is the number of images and df the
// number of images whose reference set contains the n-gram. Candidate and
// reference vectors are compared by a clipped cosine
//   sum_g min(c_g, r_g) r_g / (|c| |r|)
// scaled by exp(-(l_c - l_r)^2 / (2 sigma^2)), where lengths are counted in
// bigrams as the reference scorer does. Per image: mean over n, averaged over
// references, times 10. Corpus score: mean over images.

inline double cider_d(std::span<const Tokens> cands, std::span<const std::vector<Tokens>> refs,
                      double sigma = 6.0) {
  detail::check_corpus(cands.size(), refs.size());
  using Grams = detail::NgramCounts;

  std::vector<std::vector<Grams>> ref_counts(refs.size());
  std::map<std::vector<std::string_view>, int> doc_freq;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    if (refs[i].empty()) throw MetricError("candidate " + std::to_string(i) + " has no references");
    std::set<std::vector<std::string_view>> seen;
    for (const auto& r : refs[i]) {
      ref_counts[i].push_back(detail::count_ngrams(r, 4));
      for (const auto& [g, c] : ref_counts[i].back()) seen.insert(g);
    }
    for (const auto& g : seen) ++doc_freq[g];
  }
  const double log_n = std::log(static_cast<double>(refs.size()));

  struct Vec {
    std::array<std::map<std::vector<std::string_view>, double>, 4> w;
    std::array<double, 4> norm{};
    double length = 0.0;
  };
  auto to_vec = [&](const Grams& counts) {
    Vec v;
    for (const auto& [g, tf] : counts) {
      auto it = doc_freq.find(g);
      const double df = std::log(std::max(1.0, it == doc_freq.end() ? 0.0 : double(it->second)));
      const std::size_t n = g.size() - 1;
      const double x = tf * (log_n - df);
      v.w[n][g] = x;
      v.norm[n] += x * x;
      if (n == 1) v.length += tf;
    }
    for (auto& x : v.norm) x = std::sqrt(x);
    return v;
  };
  auto sim = [&](const Vec& hyp, const Vec& ref) {
    std::array<double, 4> val{};
    const double delta = hyp.length - ref.length;
    for (std::size_t n = 0; n < 4; ++n) {
      for (const auto& [g, x] : hyp.w[n]) {
        auto it = ref.w[n].find(g);
        if (it != ref.w[n].end()) val[n] += std::min(x, it->second) * it->second;
      }
      if (hyp.norm[n] != 0.0 && ref.norm[n] != 0.0) val[n] /= hyp.norm[n] * ref.norm[n];
      val[n] *= std::exp(-(delta * delta) / (2 * sigma * sigma));
    }
    return val;
  };

  std::vector<double> per_image;
  per_image.reserve(cands.size());
  for (std::size_t i = 0; i < cands.size(); ++i) {
    const Vec hyp = to_vec(detail::count_ngrams(cands[i], 4));
    std::array<std::vector<double>, 4> per_n;
    for (const auto& rc : ref_counts[i]) {
      const auto v = sim(hyp, to_vec(rc));
      for (std::size_t n = 0; n < 4; ++n) per_n[n].push_back(v[n]);
    }
    double mean_n = 0.0;
    for (std::size_t n = 0; n < 4; ++n) mean_n += detail::sorted_sum(std::move(per_n[n]));
    mean_n /= 4.0;
    per_image.push_back(mean_n / static_cast<double>(ref_counts[i].size()) * 10.0);
  }
  return detail::sorted_sum(std::move(per_image)) / static_cast<double>(cands.size());
}

// ---------------------------------------------------------------------------
// Feature statistics and FID.

struct FeatureStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
  std::size_t n = 0;

  std::size_t dim() const noexcept { return static_cast<std::size_t>(mean.size()); }
};

/// Mean and unbiased (n - 1) covariance of the rows of `features`.
inline FeatureStats feature_stats(const Eigen::MatrixXd& features) {
  if (features.rows() < 2) throw MetricError("feature_stats needs at least two samples");
  FeatureStats s;
  s.n = static_cast<std::size_t>(features.rows());
  s.mean = features.colwise().mean().transpose();
  const Eigen::MatrixXd centered = features.rowwise() - s.mean.transpose();
  s.cov = (centered.transpose() * centered) / static_cast<double>(features.rows() - 1);
  s.cov = 0.5 * (s.cov + s.cov.transpose());
  return s;
}

/// Copies the rows of a UEMB store into a double matrix, optionally keeping
/// only `ids` (in that order).
inline Eigen::MatrixXd feature_matrix(const EmbeddingStore& store,
                                      std::optional<std::span<const std::string>> ids = std::nullopt) {
  std::vector<std::size_t> rows;
  if (ids) {
    const auto map = store.row_map();
    for (const auto& id : *ids) {
      auto it = map.find(id);
      if (it == map.end()) throw MetricError("no feature row for id '" + id + "'");
      rows.push_back(it->second);
    }
  } else {
    rows.resize(store.size());
    std::iota(rows.begin(), rows.end(), 0);
  }
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(store.dim()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto v = store.vector(rows[r]);
    for (std::size_t c = 0; c < v.size(); ++c) {
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = v[c];
    }
  }
  return m;
}

namespace detail {

// Eigen-decomposes a symmetric PSD matrix, zeroing eigenvalues below
// rel_tol * max |eigenvalue|.
inline Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> psd_eigen(const Eigen::MatrixXd& m) {
  Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
  if (es.info() != Eigen::Success) throw MetricError("eigendecomposition failed");
  return es;
}

inline Eigen::VectorXd clamp_eigenvalues(Eigen::VectorXd ev, double rel_tol) {
  const double scale = ev.cwiseAbs().maxCoeff();
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev[i] < rel_tol * scale || ev[i] < 0.0) ev[i] = 0.0;
  }
  return ev;
}

}  // namespace detail

/// Symmetric PSD square root via eigendecomposition.
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m, double rel_tol = 1e-10) {
  const auto es = detail::psd_eigen(m);
  const Eigen::VectorXd ev = detail::clamp_eigenvalues(es.eigenvalues(), rel_tol);
  return es.eigenvectors() * ev.cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
}

/// Frechet distance between Gaussian fits:
///   |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2).
inline double fid(const FeatureStats& a, const FeatureStats& b, double rel_tol = 1e-10) {
  if (a.dim() != b.dim()) throw MetricError("FID inputs differ in dimension");
  if (!a.mean.allFinite() || !b.mean.allFinite() || !a.cov.allFinite() || !b.cov.allFinite()) {
    throw MetricError("FID inputs contain non-finite values");
  }
  const Eigen::MatrixXd sqrt_a = psd_sqrt(a.cov, rel_tol);
  const Eigen::MatrixXd inner = sqrt_a * b.cov * sqrt_a;
  const Eigen::VectorXd ev = detail::clamp_eigenvalues(detail::psd_eigen(inner).eigenvalues(), rel_tol);
  const double tr_covmean = ev.cwiseSqrt().sum();
  const double value =
      (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * tr_covmean;
  return std::max(0.0, value);
}

// ---------------------------------------------------------------------------

struct InceptionScore {
  double mean = 0.0;
  double sd = 0.0;
};

namespace detail {

/// Neumaier summation.
template <typename T>
class CompensatedSum {
 public:
  void add(T x) {
    const T t = sum_ + x;
    comp_ += std::abs(sum_) >= std::abs(x) ? (sum_ - t) + x : (x - t) + sum_;
    sum_ = t;
  }
  T value() const { return sum_ + comp_; }

 private:
  T sum_ = 0;
  T comp_ = 0;
};

}  // namespace detail

/// Inception Score over a row-stochastic matrix (n images x c classes).
/// Rows are partitioned into `splits` groups; split s holds rows
/// [n*s/splits, n*(s+1)/splits) of the row order, which is the input order, or
/// a seeded Fisher-Yates permutation when `shuffle_seed` is set. Each split
/// scores exp(mean_i KL(p_i || mean_j p_j)); the result is the mean and the
/// population standard deviation of the split scores.
inline InceptionScore inception_score(const Eigen::MatrixXd& probs, std::size_t splits = 10,
                                      std::optional<std::uint64_t> shuffle_seed = std::nullopt) {
  const auto n = static_cast<std::size_t>(probs.rows());
  if (n == 0) throw MetricError("inception_score of an empty matrix");
  if (splits == 0 || splits > n) throw MetricError("splits must be in 1..rows");
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    if (!probs.row(i).allFinite() || (probs.row(i).array() < 0.0).any() ||
        std::abs(probs.row(i).sum() - 1.0) > 1e-6) {
      throw MetricError("row " + std::to_string(i) + " is not a probability distribution");
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  if (shuffle_seed) {
    Rng rng(*shuffle_seed);
    for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng.bounded(i + 1)]);
  }

  // Long double with compensated sums, rounded once at the end, so e.g.
  // one-hot rows over c classes score exactly c.
  using ld = long double;
  std::vector<ld> scores;
  scores.reserve(splits);
  for (std::size_t s = 0; s < splits; ++s) {
    std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(n * s / splits),
                                  order.begin() + static_cast<std::ptrdiff_t>(n * (s + 1) / splits));
    std::sort(rows.begin(), rows.end());
    std::vector<ld> marginal(static_cast<std::size_t>(probs.cols()), 0.0L);
    for (auto r : rows) {
      for (Eigen::Index c = 0; c < probs.cols(); ++c) {
        marginal[static_cast<std::size_t>(c)] += probs(static_cast<Eigen::Index>(r), c);
      }
    }
    for (auto& m : marginal) m /= static_cast<ld>(rows.size());
    detail::CompensatedSum<ld> kl_sum;
    for (auto r : rows) {
      for (Eigen::Index c = 0; c < probs.cols(); ++c) {
        const ld p = probs(static_cast<Eigen::Index>(r), c);
        if (p > 0.0L) kl_sum.add(p * (std::log(p) - std::log(marginal[static_cast<std::size_t>(c)])));
      }
    }
    scores.push_back(std::exp(kl_sum.value() / static_cast<ld>(rows.size())));
  }
  // Offsets from the first score keep equal split scores exact.
  ld offset = 0.0L;
  for (ld x : scores) offset += x - scores.front();
  const ld mean = scores.front() + offset / static_cast<ld>(splits);
  ld var = 0.0L;
  for (ld x : scores) var += (x - mean) * (x - mean);
  return {static_cast<double>(mean), static_cast<double>(std::sqrt(var / static_cast<ld>(splits)))};
}

/// Mean over aligned pairs of w * max(cos(image, text), 0).
inline double clip_score(std::span<const std::vector<float>> image_vecs,
                         std::span<const std::vector<float>> text_vecs, double w = 2.5) {
  if (image_vecs.size() != text_vecs.size()) throw MetricError("clip_score inputs are not aligned");
  if (image_vecs.empty()) throw MetricError("clip_score of an empty set");
  std::vector<double> scores;
  scores.reserve(image_vecs.size());
  for (std::size_t i = 0; i < image_vecs.size(); ++i) {
    const auto& a = image_vecs[i];
    const auto& b = text_vecs[i];
    if (a.size() != b.size()) throw MetricError("clip_score vectors differ in length");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) {
      dot += double(a[j]) * b[j];
      na += double(a[j]) * a[j];
      nb += double(b[j]) * b[j];
    }
    if (na == 0.0 || nb == 0.0) throw MetricError("clip_score needs nonzero vectors");
    scores.push_back(w * std::max(dot / std::sqrt(na * nb), 0.0));
  }
  const auto n = static_cast<double>(scores.size());
  return detail::sorted_sum(std::move(scores)) / n;
}

// ---------------------------------------------------------------------------

/// Named metric values. Caption metrics are stored on their natural scale
/// (BLEU and ROUGE-L in [0, 1], CIDEr-D unscaled); reports multiply by 100.
struct MetricReport {
  std::map<std::string, double> values;

  void set(const std::string& name, double v) {
    if (!std::isfinite(v)) throw MetricError("metric '" + name + "' is not finite");
    values[name] = v;
  }
  std::optional<double> get(const std::string& name) const {
    auto it = values.find(name);
    if (it == values.end()) return std::nullopt;
    return it->second;
  }
  friend bool operator==(const MetricReport&, const MetricReport&) = default;
};

/// BLEU-1..4, CIDEr-D and ROUGE-L for raw caption strings.
inline MetricReport caption_report(std::span<const std::string> candidates,
                                   std::span<const std::vector<std::string>> references) {
  std::vector<Tokens> cands;
  std::vector<std::vector<Tokens>> refs;
  cands.reserve(candidates.size());
  for (const auto& c : candidates) cands.push_back(tokenize(c));
  for (const auto& rs : references) {
    auto& out = refs.emplace_back();
    for (const auto& r : rs) out.push_back(tokenize(r));
  }
  MetricReport report;
  const auto b = bleu_all(cands, refs);
  for (int n = 0; n < 4; ++n) report.set("BLEU-" + std::to_string(n + 1), b[n]);
  report.set("CIDEr", cider_d(cands, refs));
  report.set("ROUGE-L", rouge_l(cands, refs));
  return report;
}

}  // namespace unirag
