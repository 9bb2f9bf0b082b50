// Copyright 2026 The UniRAG Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance checks: one PASS/FAIL line per criterion, nonzero exit on any
// failure.

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <set>

#include "support.hpp"
#include "unirag/metrics.hpp"
#include "unirag/mock_server.hpp"
#include "unirag/pairing.hpp"
#include "unirag/prompting.hpp"
#include "unirag/retriever.hpp"
#include "world.hpp"

namespace unirag {
namespace {

using namespace unirag::testing;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool ok = true;
  std::string detail;

  void require(bool cond, const std::string& what) {
    if (!cond && ok) detail = what;
    ok = ok && cond;
  }
};

// ---------------------------------------------------------------------------

Outcome retrieval_oracle() {
  Outcome o;
  constexpr std::size_t kDocs = 10'000, kQueries = 1'000, kK = 10;
  constexpr std::uint32_t kDim = 64;
  std::mt19937_64 gen(2026);
  EmbeddingStore store(kDim);
  for (std::size_t i = 0; i < kDocs; ++i) {
    store.add((i % 2 ? "t" : "i") + std::to_string(i), i % 2 ? Modality::Text : Modality::Image,
              normalized(gaussian_vector(gen, kDim)));
  }
  std::vector<std::vector<float>> queries;
  for (std::size_t q = 0; q < kQueries; ++q) queries.push_back(normalized(gaussian_vector(gen, kDim)));

  const auto t0 = Clock::now();
  // Exhaustive single-threaded scan with a full sort: (score desc, did asc).
  std::vector<std::vector<std::string>> want(kQueries);
  for (std::size_t q = 0; q < kQueries; ++q) {
    std::vector<std::pair<float, std::string>> all;
    all.reserve(kDocs);
    for (std::size_t r = 0; r < kDocs; ++r) {
      const auto v = store.vector(r);
      float acc = 0;
      for (std::size_t d = 0; d < kDim; ++d) acc += queries[q][d] * v[d];
      all.emplace_back(acc, store.id(r));
    }
    std::sort(all.begin(), all.end(),
              [](const auto& a, const auto& b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
    for (std::size_t i = 0; i < kK; ++i) want[q].push_back(all[i].second);
  }

  const Index index(std::move(store));
  std::size_t mismatches = 0;
  const unsigned shard_counts[] = {1, 2, 3, 8, 13};
  for (unsigned workers : shard_counts) {
    for (std::size_t q = 0; q < kQueries; ++q) {
      const auto hits = index.search(queries[q], kK, std::nullopt, NoExclusion{}, workers);
      std::vector<std::string> got;
      for (const auto& h : hits) got.push_back(h.did);
      mismatches += got == want[q] ? 0 : 1;
    }
  }
  const double secs = seconds_since(t0);
  o.require(mismatches == 0, std::to_string(mismatches) + " mismatched lists");
  o.require(secs < 30.0, "took " + std::to_string(secs) + " s");
  if (o.ok) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "1000 queries x 5 shard counts identical to exhaustive scan, %.2f s", secs);
    o.detail = buf;
  }
  return o;
}

// ---------------------------------------------------------------------------

Outcome pair_exclusion() {
  Outcome o;
  constexpr std::size_t kPairs = 2'000, kCases = 10'000;
  constexpr std::uint32_t kDim = 16;
  std::mt19937_64 gen(77);
  EmbeddingStore s(kDim);
  std::vector<CandidateDoc> docs;
  for (std::size_t i = 0; i < kPairs; ++i) {
    const auto id = std::to_string(i);
    const auto base = normalized(gaussian_vector(gen, kDim));
    auto near = base;
    const auto noise = gaussian_vector(gen, kDim);
    for (std::size_t d = 0; d < kDim; ++d) near[d] += 0.05f * noise[d];
    s.add("i" + id, Modality::Image, base);
    s.add("t" + id, Modality::Text, normalized(near));
    docs.push_back(image_doc("i" + id, "img/" + id + ".png", "t" + id));
    docs.push_back(text_doc("t" + id, "caption number " + id, "i" + id));
  }
  const CandidatePool pool(std::move(docs));
  const Index index(std::move(s));

  std::size_t cases = 0, violations = 0, errors = 0;
  std::uniform_int_distribution<std::size_t> pick(0, kPairs - 1);
  for (std::size_t attempt = 0; cases < kCases && attempt < 4 * kCases; ++attempt) {
    const auto j = std::to_string(pick(gen));
    const bool image_hit = attempt % 2 == 0;
    const bool same_id = attempt % 4 < 2;
    const std::string hit_did = (image_hit ? "i" : "t") + j;
    const std::string query_did = (image_hit ? "t" : "i") + j;
    const Modality target = image_hit ? Modality::Text : Modality::Image;

    // Only count cases where the query doc really is the hit's nearest
    // opposite-modality neighbor.
    const auto row = *index.row_of(hit_did);
    const auto nearest = index.search(index.store().vector(row), 1, target);
    if (nearest.empty() || nearest[0].did != query_did) continue;
    ++cases;

    QueryRecord q;
    q.modality = target;
    q.content = target == Modality::Text ? "caption number " + j : "img/" + j + ".png";
    q.qid = same_id ? query_did : "query" + std::to_string(attempt);
    const RetrievalHit hit{hit_did, 1.0, 1, image_hit ? Modality::Image : Modality::Text, false, {}};
    try {
      const auto p = complete_pair(hit, index, pool, q);
      const bool leaked = p.image_did == q.qid || p.caption_did == q.qid || p.caption_did == query_did ||
                          p.image_did == query_did || p.caption == q.content || p.image_ref == q.content;
      violations += leaked ? 1 : 0;
    } catch (const PairingError&) {
      ++errors;
    }
  }
  o.require(cases == kCases, "only " + std::to_string(cases) + " qualifying cases");
  o.require(violations == 0, std::to_string(violations) + " violations");
  o.require(errors == 0, std::to_string(errors) + " cases without a pair");
  if (o.ok) o.detail = std::to_string(cases) + " cases, 0 violations";
  return o;
}

// ---------------------------------------------------------------------------

Outcome metric_fixtures() {
  Outcome o;
  const auto j = load_json(fixture("metrics/captions100.json"));
  std::vector<Tokens> cands;
  std::vector<std::vector<Tokens>> refs;
  for (const auto& item : j["items"]) {
    cands.push_back(split_ws(item["candidate"].get<std::string>()));
    auto& r = refs.emplace_back();
    for (const auto& ref : item["references"]) r.push_back(split_ws(ref.get<std::string>()));
  }
  const auto& want = j["expected"];
  o.require(cands.size() == 100, "fixture has " + std::to_string(cands.size()) + " captions");
  double worst = 0;
  auto check = [&](const std::string& name, double got, double tol) {
    const double err = std::abs(got - want[name].get<double>());
    worst = std::max(worst, err / tol);
    o.require(err <= tol, name + " off by " + std::to_string(err));
  };
  const auto b = bleu_all(cands, refs);
  for (int n = 0; n < 4; ++n) check("BLEU-" + std::to_string(n + 1), b[n], 1e-4);
  check("ROUGE-L", rouge_l(cands, refs), 1e-4);
  check("CIDEr", cider_d(cands, refs), 1e-3);
  if (o.ok) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "BLEU-1..4, ROUGE-L, CIDEr-D match; worst error is %.1e of its tolerance", worst);
    o.detail = buf;
  }
  return o;
}

// ---------------------------------------------------------------------------

Eigen::MatrixXd gaussian_rows(std::size_t n, const Eigen::VectorXd& mu, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> d;
  Eigen::MatrixXd m(static_cast<Eigen::Index>(n), mu.size());
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(i, c) = mu[c] + d(gen);
  }
  return m;
}

Outcome fid_analytic() {
  Outcome o;
  const auto t0 = Clock::now();

  const auto a = feature_stats(gaussian_rows(100'000, Eigen::VectorXd::Zero(8), 1));
  Eigen::VectorXd mu(8);
  mu << 1, -1, 0.5, 0, 2, 0, -0.5, 1;
  const auto b = feature_stats(gaussian_rows(100'000, mu, 2));
  const double self = fid(a, a);
  o.require(std::abs(self) <= 1e-6, "fid(a,a) = " + std::to_string(self));

  const double shift = mu.squaredNorm();
  const double ab = fid(a, b), ba = fid(b, a);
  o.require(std::abs(ab - shift) <= 0.02 * shift, "shifted Gaussians: " + std::to_string(ab) + " vs " + std::to_string(shift));
  o.require(std::abs(ab - ba) <= 1e-8, "asymmetry " + std::to_string(std::abs(ab - ba)));

  FeatureStats p, q;
  p.mean = Eigen::Vector2d(0.5, -1);
  q.mean = Eigen::Vector2d(1.5, 0);
  p.cov.resize(2, 2);
  q.cov.resize(2, 2);
  p.cov << 2, 0.5, 0.5, 1;
  q.cov << 1, -0.3, -0.3, 3;
  // tr sqrt(M) for 2x2 M with real nonnegative eigenvalues: sqrt(tr M + 2 sqrt(det M)).
  const Eigen::Matrix2d m = p.cov * q.cov;
  const double tr_sqrt = std::sqrt(m.trace() + 2 * std::sqrt(m.determinant()));
  const double hand = (p.mean - q.mean).squaredNorm() + p.cov.trace() + q.cov.trace() - 2 * tr_sqrt;
  const double got = fid(p, q);
  o.require(std::abs(got - hand) <= 1e-9, "2x2 case " + std::to_string(got) + " vs " + std::to_string(hand));

  const double secs = seconds_since(t0);
  o.require(secs < 60.0, "took " + std::to_string(secs) + " s");
  if (o.ok) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "self %.1e, shift %.4f vs %.4f, asym %.1e, 2x2 err %.1e, %.2f s", self, ab, shift,
                  std::abs(ab - ba), std::abs(got - hand), secs);
    o.detail = buf;
  }
  return o;
}

// ---------------------------------------------------------------------------

InceptionScore naive_is(const Eigen::MatrixXd& p, std::size_t splits) {
  const auto n = static_cast<std::size_t>(p.rows());
  std::vector<double> scores;
  for (std::size_t s = 0; s < splits; ++s) {
    const auto lo = static_cast<Eigen::Index>(n * s / splits);
    const auto hi = static_cast<Eigen::Index>(n * (s + 1) / splits);
    std::vector<double> py(static_cast<std::size_t>(p.cols()), 0.0);
    for (Eigen::Index i = lo; i < hi; ++i) {
      for (Eigen::Index c = 0; c < p.cols(); ++c) py[static_cast<std::size_t>(c)] += p(i, c);
    }
    for (double& v : py) v /= static_cast<double>(hi - lo);
    double kl = 0;
    for (Eigen::Index i = lo; i < hi; ++i) {
      for (Eigen::Index c = 0; c < p.cols(); ++c) {
        if (p(i, c) > 0) kl += p(i, c) * std::log(p(i, c) / py[static_cast<std::size_t>(c)]);
      }
    }
    scores.push_back(std::exp(kl / static_cast<double>(hi - lo)));
  }
  double mean = 0, var = 0;
  for (double x : scores) mean += x;
  mean /= static_cast<double>(splits);
  for (double x : scores) var += (x - mean) * (x - mean);
  return {mean, std::sqrt(var / static_cast<double>(splits))};
}

Outcome inception() {
  Outcome o;
  const auto uni = inception_score(Eigen::MatrixXd::Constant(1000, 10, 0.1), 10);
  o.require(uni.mean == 1.0 && uni.sd == 0.0, "uniform rows gave " + std::to_string(uni.mean));

  for (Eigen::Index c : {2, 5, 10, 100, 1000}) {
    Eigen::MatrixXd p = Eigen::MatrixXd::Zero(c * 10, c);
    for (Eigen::Index i = 0; i < p.rows(); ++i) p(i, i % c) = 1.0;
    const auto is = inception_score(p, 10);
    o.require(is.mean == static_cast<double>(c) && is.sd == 0.0,
              "one-hot with " + std::to_string(c) + " classes gave " + std::to_string(is.mean));
  }

  std::mt19937_64 gen(11);
  std::gamma_distribution<double> g(0.5);
  double worst = 0;
  for (std::size_t n : {50u, 500u, 5000u}) {
    Eigen::MatrixXd p(static_cast<Eigen::Index>(n), 20);
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
      for (Eigen::Index c = 0; c < p.cols(); ++c) p(i, c) = g(gen) + 1e-12;
      p.row(i) /= p.row(i).sum();
    }
    for (std::size_t splits : {1u, 10u}) {
      const auto got = inception_score(p, splits);
      const auto want = naive_is(p, splits);
      const double err = std::max(std::abs(got.mean - want.mean), std::abs(got.sd - want.sd));
      worst = std::max(worst, err);
      o.require(err <= 1e-9, "random matrix off by " + std::to_string(err));
    }
  }
  if (o.ok) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "uniform (1, 0) exact, one-hot = c exact, naive oracle err %.1e", worst);
    o.detail = buf;
  }
  return o;
}

// ---------------------------------------------------------------------------

const char* const kCaptions[] = {"a dog running on the grass", "two people riding bicycles",
                                 "a red bus parked by the road", "a cat sleeping on a sofa",
                                 "a plate of food on a table"};

Outcome prompt_goldens() {
  Outcome o;
  const PromptRenderer renderer(PromptOptions{fixture("images").string(), {}});
  QueryRecord cap;
  cap.qid = "q";
  cap.modality = Modality::Image;
  cap.content = "query.png";
  QueryRecord gen;
  gen.qid = "q";
  gen.modality = Modality::Text;
  gen.content = "a horse standing in a field";

  std::size_t compared = 0;
  for (Dialect d : {Dialect::MergedImage, Dialect::Interleaved, Dialect::InterleavedWithSystem}) {
    for (Task t : {Task::Caption, Task::ImageGen}) {
      const QueryRecord& q = t == Task::Caption ? cap : gen;
      const auto zero = renderer.render_zero_shot(q, t, d);
      const std::string zname = std::string("zero_shot_") + std::string(to_string(t)) + ".txt";
      o.require(zero.transcript() == slurp(fixture("golden/" + zname)), zname + " differs");
      ++compared;
      for (std::size_t k : {1u, 5u}) {
        std::vector<ExamplePair> ex;
        for (std::size_t i = 0; i < k; ++i) {
          const auto n = std::to_string(i + 1);
          ex.push_back({"img" + n, "cap" + n, "ex" + n + ".png", kCaptions[i], Provenance::Rag, 0.5});
        }
        const auto b = renderer.render_few_shot(q, ex, t, d);
        const std::string name = std::string(to_string(d)) + "_" + std::string(to_string(t)) + "_k" +
                                 std::to_string(k) + ".txt";
        o.require(b.transcript() == slurp(fixture("golden/" + name)), name + " differs");
        ++compared;
      }
    }
  }

  const std::vector<RgbImage> in{RgbImage(100, 50, Rgb{10, 20, 30}), RgbImage(60, 30, Rgb{200, 100, 0})};
  const auto m = merge_images(in);
  o.require(m.width == 100 && m.height == 80,
            "merged size " + std::to_string(m.width) + "x" + std::to_string(m.height));
  if (m.width == 100 && m.height == 80) {
    std::size_t wrong = 0;
    for (std::uint32_t y = 0; y < 80; ++y) {
      for (std::uint32_t x = 0; x < 100; ++x) {
        const Rgb p = m.at(x, y);
        if (y < 50) {
          wrong += (p.r == 10 && p.g == 20 && p.b == 30) ? 0 : 1;
        } else if (x < 60) {
          wrong += (p.r == 200 && p.g == 100 && p.b == 0) ? 0 : 1;
        }
      }
    }
    o.require(wrong == 0, std::to_string(wrong) + " misplaced pixels");
  }
  if (o.ok) o.detail = std::to_string(compared) + " transcripts byte-identical, merge 100x80 with rows 50-79 from image 2";
  return o;
}

// ---------------------------------------------------------------------------

RunOptions quick_client() {
  RunOptions r;
  r.client.backoff_base = std::chrono::milliseconds(1);
  r.client.backoff_max = std::chrono::milliseconds(5);
  return r;
}

EvalResult evaluate(const World& w, const nlohmann::json& manifest, EvalMode mode,
                    const EmbeddingStore* features = nullptr) {
  const auto task = task_from_string(manifest["config"]["task"].get<std::string>());
  const CandidatePool pool = load_pool((w.root() / "pool.jsonl").string());
  const auto queries = load_queries((w.root() / "queries.jsonl").string(), task);
  EvalInputs in;
  in.queries = &queries;
  in.pool = &pool;
  in.mode = mode;
  in.features = features;
  return evaluate_run(manifest, in);
}

Outcome echo_consistency(MockServer& server) {
  Outcome o;
  std::size_t runs = 0;
  for (Dialect d : {Dialect::MergedImage, Dialect::Interleaved, Dialect::InterleavedWithSystem}) {
    for (std::size_t k : {1u, 3u}) {
      const World w({.queries = 30, .k = k, .dialect = d}, server.url());
      const auto r = run_experiment(w.config(), quick_client());
      o.require(r.failed == 0, "generation failures");
      const auto gen = evaluate(w, r.manifest, EvalMode::Generated);
      const auto base = evaluate(w, r.manifest, EvalMode::RetrieverBaseline);
      o.require(gen.metrics == base.metrics && gen.evaluated == base.evaluated,
                std::string("caption metrics differ for ") + std::string(to_string(d)));
      ++runs;
    }
  }
  const World w({.task = Task::ImageGen, .queries = 30, .k = 2}, server.url());
  const auto r = run_experiment(w.config(), quick_client());
  o.require(r.failed == 0, "image generation failures");
  const auto features = w.echo_features(r.manifest);
  const auto gen = evaluate(w, r.manifest, EvalMode::Generated, &features);
  const auto base = evaluate(w, r.manifest, EvalMode::RetrieverBaseline, &features);
  o.require(gen.metrics == base.metrics, "image metrics differ");
  ++runs;
  if (o.ok) o.detail = std::to_string(runs) + " runs, generated == baseline on every metric";
  return o;
}

Outcome resumability(MockServer& server) {
  Outcome o;
  const World w({.queries = 40, .k = 3}, server.url());
  const auto full = run_experiment(w.config(), quick_client());  // warms the cache
  const std::string reference = slurp(full.run_dir / "manifest.json");

  const auto cfg = w.config({{"runs_dir", "runs-resumed"}});
  server.reset_stats();
  auto half = quick_client();
  half.stop_after = 20;
  const auto first = run_experiment(cfg, half);
  o.require(first.interrupted && !fs::exists(first.run_dir / "manifest.json"), "first half did not stop");
  const auto second = run_experiment(cfg, quick_client());
  o.require(second.resumed && second.run_dir == first.run_dir, "rerun did not resume");
  o.require(second.generated == 20, "rerun generated " + std::to_string(second.generated));
  o.require(slurp(second.run_dir / "manifest.json") == reference, "manifest differs from uninterrupted run");
  const auto calls = server.stats().requests;
  o.require(calls == 0, std::to_string(calls) + " mock calls after warm-up");
  if (o.ok) o.detail = "40 queries, stopped at 20, manifest byte-identical, 0 mock calls";
  return o;
}

Outcome truncation(MockServer& server) {
  Outcome o;
  server.set_options(MockOptions{0.0, 0, 4, {}});
  server.reset_stats();
  const World w({.task = Task::ImageGen, .k = 5}, server.url());
  const auto r = run_experiment(w.config(), quick_client());
  const auto st = server.stats();
  server.set_options(MockOptions{});
  o.require(r.failed == 0, std::to_string(r.failed) + " failed");
  for (const auto& e : r.manifest["queries"]) {
    o.require(e["pairs"].size() == 5 && e["examples_used"] == 4,
              e["qid"].get<std::string>() + " used " + e["examples_used"].dump() + " examples");
  }
  o.require(st.rejected == 20 && st.ok == 20, "mock saw " + std::to_string(st.rejected) + " rejections, " +
                                                  std::to_string(st.ok) + " successes");
  if (o.ok) o.detail = "20 five-image prompts rejected, all succeeded with exactly 4 pairs";
  return o;
}

}  // namespace
}  // namespace unirag

int main() {
  using namespace unirag;
  MockServer server;
  server.start();

  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"retrieval-oracle-equivalence", retrieval_oracle},
      {"pair-completion-exclusion", pair_exclusion},
      {"metric-oracle-fixtures", metric_fixtures},
      {"fid-analytic", fid_analytic},
      {"inception-score", inception},
      {"prompt-goldens-and-merge", prompt_goldens},
      {"echo-mock-consistency", [&] { return echo_consistency(server); }},
      {"resumability", [&] { return resumability(server); }},
      {"truncation-fallback", [&] { return truncation(server); }},
  };
  int failures = 0;
  for (const auto& [name, check] : criteria) {
    Outcome r;
    try {
      r = check();
    } catch (const std::exception& e) {
      r = {false, std::string("exception: ") + e.what()};
    }
    std::cout << (r.ok ? "PASS " : "FAIL ") << name << ": " << r.detail << std::endl;
    failures += r.ok ? 0 : 1;
  }
  return failures == 0 ? 0 : 1;
}
