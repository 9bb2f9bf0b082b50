// Copyright 2026 The UniRAG Authors
// SPDX-License-Identifier: Apache-2.0

// End-to-end experiments: retrieval, substitution, pair completion,
// prompting, generation, evaluation and reporting.
//
// A run lives in <runs_dir>/<config hash, 12 hex>-<UTC timestamp>/ holding
//   progress.jsonl  one entry per finished query, appended as work completes
//   manifest.json   the final manifest, entries in query order
//   timings.jsonl   latency and cache-hit flags (kept out of the manifest so
//                   that reruns produce byte-identical manifests)
// Rerunning the same config resumes the newest directory with the same hash
// and skips every query that already has an output.

#pragma once

#include <algorithm>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "unirag/common.hpp"
#include "unirag/corpus.hpp"
#include "unirag/genclient.hpp"
#include "unirag/metrics.hpp"
#include "unirag/pairing.hpp"
#include "unirag/prompting.hpp"
#include "unirag/retriever.hpp"
#include "unirag/uemb.hpp"

namespace unirag {

namespace fs = std::filesystem;
using nlohmann::json;

enum class RetrieverKind : std::uint8_t { Fused, Random, None };

inline std::string_view to_string(RetrieverKind r) noexcept {
  switch (r) {
    case RetrieverKind::Fused: return "fused";
    case RetrieverKind::Random: return "random";
    case RetrieverKind::None: return "none";
  }
  return "none";
}

inline RetrieverKind retriever_from_string(std::string_view s) {
  if (s == "fused") return RetrieverKind::Fused;
  if (s == "random") return RetrieverKind::Random;
  if (s == "none") return RetrieverKind::None;
  throw ConfigError("unknown retriever '" + std::string(s) + "' (expected fused, random or none)");
}

// ---------------------------------------------------------------------------
// Configuration.
//
// JSON keys (paths are relative to the config file):
//   task, retriever, k, seed, profile (name in "profiles" or an inline
//   object), profiles, pool, queries, embeddings, query_embeddings,
//   image_root, fusion {w_text, w_image}, parallelism, workers,
//   failure_policy, runs_dir, cache_dir, exclude_query_first_hop,
//   ban_positives, sample_captions, max_queries

struct ExperimentConfig {
  Task task = Task::Caption;
  RetrieverKind retriever = RetrieverKind::Fused;
  std::size_t k = 1;
  std::optional<std::uint64_t> seed;
  GeneratorProfile profile;
  fs::path pool;
  fs::path queries;
  fs::path embeddings;        // pool vectors, ids = dids
  fs::path query_embeddings;  // ids = qid, plus optional "<qid>#instruction"
  fs::path image_root;
  FusionWeights fusion;
  std::size_t parallelism = 1;
  unsigned workers = 1;
  FailurePolicy failure_policy = FailurePolicy::Skip;
  fs::path runs_dir = "runs";
  fs::path cache_dir;  // empty = <runs_dir>/cache
  bool exclude_query_first_hop = false;
  bool ban_positives = false;
  /// Image generation: keep one caption per image, drawn with `seed`.
  bool sample_captions = false;
  std::optional<std::size_t> max_queries;

  void validate() const {
    if (retriever == RetrieverKind::None && k != 0) throw ConfigError("retriever none requires k = 0");
    if (retriever != RetrieverKind::None && k == 0) {
      throw ConfigError("k = 0 requires retriever none");
    }
    if (retriever == RetrieverKind::Random && !seed) throw ConfigError("random retriever requires a seed");
    if (sample_captions && !seed) throw ConfigError("sample_captions requires a seed");
    if (parallelism == 0) throw ConfigError("parallelism must be >= 1");
    if (pool.empty() || queries.empty()) throw ConfigError("config needs pool and queries paths");
    if (retriever == RetrieverKind::Fused && (embeddings.empty() || query_embeddings.empty())) {
      throw ConfigError("fused retriever needs embeddings and query_embeddings");
    }
    try {
      profile.validate();
      fusion.validate();
    } catch (const ValidationError& e) {
      throw ConfigError(e.what());
    }
  }

  fs::path effective_cache_dir() const { return cache_dir.empty() ? runs_dir / "cache" : cache_dir; }

  /// Everything that determines the results. Output locations, transport
  /// settings and concurrency are left out.
  json snapshot() const {
    json p = to_json(profile);
    p.erase("endpoint_url");
    p.erase("api_key_env");
    return {{"task", std::string(to_string(task))},
            {"retriever", std::string(to_string(retriever))},
            {"k", k},
            {"seed", seed ? json(*seed) : json()},
            {"profile", std::move(p)},
            {"pool", pool.generic_string()},
            {"queries", queries.generic_string()},
            {"embeddings", embeddings.generic_string()},
            {"query_embeddings", query_embeddings.generic_string()},
            {"image_root", image_root.generic_string()},
            {"fusion", {{"w_text", fusion.w_text}, {"w_image", fusion.w_image}}},
            {"failure_policy", std::string(to_string(failure_policy))},
            {"exclude_query_first_hop", exclude_query_first_hop},
            {"ban_positives", ban_positives},
            {"sample_captions", sample_captions},
            {"max_queries", max_queries ? json(*max_queries) : json()}};
  }

  std::string hash() const { return sha256_hex(snapshot().dump()); }
};

/// Command-line values that take precedence over the config file.
struct ConfigOverrides {
  std::optional<std::size_t> k;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> retriever;
  std::optional<std::string> profile;
  std::optional<std::size_t> parallelism;
};

namespace detail {

inline fs::path resolve_path(const fs::path& base, const json& j, const char* key) {
  if (!j.contains(key) || j[key].is_null()) return {};
  const fs::path p = j[key].get<std::string>();
  return p.is_absolute() || base.empty() ? p : base / p;
}

inline GeneratorProfile select_profile(const json& j, const std::string& name) {
  if (j.contains("profiles") && j["profiles"].contains(name)) {
    json p = j["profiles"][name];
    if (!p.contains("name")) p["name"] = name;
    return profile_from_json(p);
  }
  throw ConfigError("unknown generator profile '" + name + "'");
}

}  // namespace detail

inline ExperimentConfig config_from_json(const json& j, const fs::path& base_dir = {},
                                         const ConfigOverrides& o = {}) {
  ExperimentConfig c;
  try {
    c.task = task_from_string(j.value("task", std::string("caption")));
    c.retriever = retriever_from_string(o.retriever.value_or(j.value("retriever", std::string("fused"))));
    c.k = o.k.value_or(j.value("k", std::size_t{1}));
    if (o.seed) {
      c.seed = o.seed;
    } else if (j.contains("seed") && !j["seed"].is_null()) {
      c.seed = j["seed"].get<std::uint64_t>();
    }
    if (o.profile) {
      c.profile = detail::select_profile(j, *o.profile);
    } else if (j.contains("profile") && j["profile"].is_object()) {
      c.profile = profile_from_json(j["profile"]);
    } else if (j.contains("profile")) {
      c.profile = detail::select_profile(j, j["profile"].get<std::string>());
    } else {
      throw ConfigError("config has no generator profile");
    }
    c.pool = detail::resolve_path(base_dir, j, "pool");
    c.queries = detail::resolve_path(base_dir, j, "queries");
    c.embeddings = detail::resolve_path(base_dir, j, "embeddings");
    c.query_embeddings = detail::resolve_path(base_dir, j, "query_embeddings");
    c.image_root = detail::resolve_path(base_dir, j, "image_root");
    if (j.contains("fusion")) {
      c.fusion.w_text = j["fusion"].value("w_text", 1.0);
      c.fusion.w_image = j["fusion"].value("w_image", 1.0);
    }
    c.parallelism = o.parallelism.value_or(j.value("parallelism", std::size_t{1}));
    c.workers = j.value("workers", 1u);
    c.failure_policy = failure_policy_from_string(j.value("failure_policy", std::string("skip")));
    if (auto r = detail::resolve_path(base_dir, j, "runs_dir"); !r.empty()) c.runs_dir = r;
    c.cache_dir = detail::resolve_path(base_dir, j, "cache_dir");
    c.exclude_query_first_hop = j.value("exclude_query_first_hop", false);
    c.ban_positives = j.value("ban_positives", false);
    c.sample_captions = j.value("sample_captions", false);
    if (j.contains("max_queries") && !j["max_queries"].is_null()) {
      c.max_queries = j["max_queries"].get<std::size_t>();
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config: ") + e.what());
  } catch (const ValidationError& e) {
    throw ConfigError(e.what());
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const fs::path& path, const ConfigOverrides& o = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j, path.parent_path(), o);
}

// ---------------------------------------------------------------------------
// Serialization of per-query artifacts.

inline json to_json(const RetrievalHit& h) {
  return {{"did", h.did},
          {"score", h.score},
          {"rank", h.rank},
          {"modality", std::string(to_string(h.modality))},
          {"substituted", h.substituted},
          {"substituted_from", h.substituted ? json(h.substituted_from) : json()}};
}

inline RetrievalHit hit_from_json(const json& j) {
  RetrievalHit h;
  h.did = j.at("did").get<std::string>();
  h.score = j.at("score").get<double>();
  h.rank = j.at("rank").get<std::size_t>();
  h.modality = modality_from_string(j.at("modality").get<std::string>());
  h.substituted = j.value("substituted", false);
  if (j.contains("substituted_from") && !j["substituted_from"].is_null()) {
    h.substituted_from = j["substituted_from"].get<std::string>();
  }
  return h;
}

inline json to_json(const ExamplePair& p) {
  return {{"image_did", p.image_did}, {"caption_did", p.caption_did}, {"image_ref", p.image_ref},
          {"caption", p.caption},     {"provenance", std::string(to_string(p.provenance))},
          {"hop_score", p.hop_score}};
}

inline ExamplePair pair_from_json(const json& j) {
  return ExamplePair{j.at("image_did").get<std::string>(), j.at("caption_did").get<std::string>(),
                     j.at("image_ref").get<std::string>(), j.at("caption").get<std::string>(),
                     provenance_from_string(j.at("provenance").get<std::string>()),
                     j.value("hop_score", 0.0)};
}

inline json to_json(const GenerationOutput& o) {
  if (o.kind == OutputKind::Text) return {{"kind", "text"}, {"text", *o.text}};
  return {{"kind", "image"}, {"image_ref", *o.image_ref}};
}

// ---------------------------------------------------------------------------
// Pipeline stages.

struct QueryArtifacts {
  std::string qid;
  std::vector<RetrievalHit> hits;
  std::size_t substitutions = 0;
  std::vector<ExamplePair> pairs;
  std::vector<std::string> warnings;
  std::optional<PromptBundle> bundle;
  std::string error;
};

namespace detail {

/// Runs fn(i) for i in [0, n) on up to `workers` threads.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
  std::atomic<std::size_t> next{0};
  auto loop = [&] {
    for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
  };
  std::vector<std::jthread> pool;
  for (std::size_t t = 1; t < std::min(workers, n); ++t) pool.emplace_back(loop);
  loop();
}

}  // namespace detail

class Pipeline {
 public:
  explicit Pipeline(const ExperimentConfig& config) : config_(config), renderer_(PromptOptions{config.image_root.string(), {}}) {
    config_.validate();
    for (const auto& p : {config_.pool, config_.queries}) {
      if (!fs::exists(p)) throw ConfigError("missing input file '" + p.string() + "'");
    }
    try {
      pool_ = load_pool(config_.pool.string());
      queries_ = load_queries(config_.queries.string(), config_.task);
    } catch (const Error& e) {
      throw ConfigError(e.what());
    }
    if (config_.sample_captions) {
      queries_ = apply_sample(queries_, sample_one_caption_per_image(queries_, *config_.seed));
    }
    if (config_.max_queries && queries_.size() > *config_.max_queries) queries_.resize(*config_.max_queries);
    if (config_.retriever == RetrieverKind::Fused) {
      for (const auto& p : {config_.embeddings, config_.query_embeddings}) {
        if (!fs::exists(p)) throw ConfigError("missing input file '" + p.string() + "'");
      }
      EmbeddingStore store = load_uemb(config_.embeddings.string());
      for (std::size_t i = 0; i < store.size(); ++i) {
        if (pool_.find(store.id(i)) == nullptr) {
          throw ConfigError("embedding id '" + store.id(i) + "' is not in the pool");
        }
      }
      index_.emplace(std::move(store), IndexOptions{config_.workers});
      query_store_ = load_uemb(config_.query_embeddings.string());
      if (query_store_.dim() != index_->dim()) {
        throw ConfigError("query embeddings have dim " + std::to_string(query_store_.dim()) +
                          ", pool embeddings " + std::to_string(index_->dim()));
      }
      query_rows_ = query_store_.row_map();
    }
  }

  const ExperimentConfig& config() const noexcept { return config_; }
  const std::vector<QueryRecord>& queries() const noexcept { return queries_; }
  const CandidatePool& pool() const noexcept { return pool_; }
  const PromptRenderer& renderer() const noexcept { return renderer_; }
  const Index* index() const noexcept { return index_ ? &*index_ : nullptr; }

  /// Fused query vector: the query-modality row `qid`, plus the text row
  /// "<qid>#instruction" when present, weighted by the fusion weights.
  std::vector<float> query_vector(const QueryRecord& q) const {
    auto row = query_rows_.find(q.qid);
    if (row == query_rows_.end()) throw Error("no query embedding for '" + q.qid + "'");
    auto base = query_store_.vector(row->second);
    std::optional<std::span<const float>> text, image;
    (q.modality == Modality::Text ? text : image) = base;
    if (auto ins = query_rows_.find(q.qid + "#instruction"); ins != query_rows_.end() && !text) {
      text = query_store_.vector(ins->second);
    }
    return fuse_query(text, image, config_.fusion);
  }

  /// First hop plus wrong-modality substitution.
  SubstitutionResult retrieve(const QueryRecord& q) const {
    if (!index_) throw Error("retrieval needs the fused retriever");
    const auto qvec = query_vector(q);
    std::vector<std::size_t> banned;
    if (config_.exclude_query_first_hop) {
      if (auto r = index_->row_of(q.qid)) banned.push_back(*r);
      for (const CandidateDoc* d : pool_.with_payload(q.modality, q.content)) {
        if (auto r = index_->row_of(d->did)) banned.push_back(*r);
      }
    }
    const auto hits = index_->search(qvec, config_.k, std::nullopt, RowExclusion(std::move(banned)));
    return substitute_wrong_modality(hits, target_modality(config_.task), pool_);
  }

  QueryArtifacts prepare(const QueryRecord& q) const {
    QueryArtifacts a;
    a.qid = q.qid;
    try {
      switch (config_.retriever) {
        case RetrieverKind::None:
          break;
        case RetrieverKind::Random:
          a.pairs = random_pairs(queries_, pool_, config_.k, derive_seed(*config_.seed, q.qid), q.qid);
          break;
        case RetrieverKind::Fused: {
          auto sub = retrieve(q);
          a.hits = std::move(sub.hits);
          a.substitutions = sub.substitution_count;
          a.warnings = std::move(sub.errors);
          const PairingOptions popts{config_.ban_positives};
          for (const auto& hit : a.hits) {
            try {
              a.pairs.push_back(complete_pair_or_link(hit, *index_, pool_, q, popts));
            } catch (const PairingError& e) {
              a.warnings.emplace_back(e.what());
            }
          }
          break;
        }
      }
      a.bundle = renderer_.render_few_shot(q, a.pairs, config_.task, config_.profile.dialect);
    } catch (const Error& e) {
      a.error = e.what();
    }
    return a;
  }

 private:
  ExperimentConfig config_;
  PromptRenderer renderer_;
  CandidatePool pool_;
  std::vector<QueryRecord> queries_;
  std::optional<Index> index_;
  EmbeddingStore query_store_{1};
  std::unordered_map<std::string, std::size_t> query_rows_;
};

// ---------------------------------------------------------------------------
// Runs.

struct RunOptions {
  /// Stop after this many generations, leaving the run resumable.
  std::optional<std::size_t> stop_after;
  /// Always start a new run directory.
  bool fresh = false;
  ClientOptions client;  // cache_dir is taken from the config
};

struct RunResult {
  fs::path run_dir;
  json manifest;  // null when interrupted
  std::size_t failed = 0;
  std::size_t generated = 0;  // generations attempted in this invocation
  bool interrupted = false;
  bool resumed = false;
};

namespace detail {

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y%m%dT%H%M%SZ");
  return os.str();
}

inline std::optional<fs::path> latest_run_dir(const fs::path& runs_dir, const std::string& prefix) {
  if (!fs::is_directory(runs_dir)) return std::nullopt;
  std::optional<fs::path> best;
  for (const auto& e : fs::directory_iterator(runs_dir)) {
    const std::string name = e.path().filename().string();
    if (!e.is_directory() || name.rfind(prefix + "-", 0) != 0) continue;
    if (!best || name > best->filename().string()) best = e.path();
  }
  return best;
}

inline json entry_json(const QueryArtifacts& a, std::size_t k, const std::optional<GenerationOutput>& out,
                       const std::string& error) {
  json hits = json::array();
  for (const auto& h : a.hits) hits.push_back(to_json(h));
  json pairs = json::array();
  for (const auto& p : a.pairs) pairs.push_back(to_json(p));
  return {{"qid", a.qid},
          {"hits", std::move(hits)},
          {"substitutions", a.substitutions},
          {"pairs", std::move(pairs)},
          {"warnings", a.warnings},
          {"prompt_hash", a.bundle ? json(a.bundle->content_hash()) : json()},
          {"k_requested", k},
          {"examples_used", out ? json(out->examples_used) : json()},
          {"output", out ? to_json(*out) : json()},
          {"error", error.empty() ? json() : json(error)}};
}

inline std::map<std::string, json> read_progress(const fs::path& path) {
  std::map<std::string, json> done;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      json e = json::parse(line);
      auto qid = e.at("qid").get<std::string>();
      done[std::move(qid)] = std::move(e);
    } catch (const json::exception&) {
      // a torn final line from an interrupted write
    }
  }
  return done;
}

inline void write_text_atomic(const fs::path& path, const std::string& text) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out << text;
  }
  fs::rename(tmp, path);
}

}  // namespace detail

inline json assemble_manifest(const ExperimentConfig& config, const std::vector<QueryRecord>& queries,
                              const std::map<std::string, json>& entries) {
  json list = json::array();
  std::size_t substitutions = 0, failed = 0;
  for (const auto& q : queries) {
    auto it = entries.find(q.qid);
    if (it == entries.end()) throw Error("no manifest entry for query '" + q.qid + "'");
    substitutions += it->second.at("substitutions").get<std::size_t>();
    failed += it->second.at("output").is_null() ? 1 : 0;
    list.push_back(it->second);
  }
  return {{"config", config.snapshot()},
          {"config_hash", config.hash()},
          {"queries", std::move(list)},
          {"substitution_count", substitutions},
          {"failed", failed},
          {"completed", queries.size() - failed}};
}

/// Renders every pending bundle and totals estimate_cost; no network calls.
inline double dry_run_cost(const Pipeline& pipeline) {
  std::vector<PromptBundle> bundles;
  for (const auto& q : pipeline.queries()) {
    auto a = pipeline.prepare(q);
    if (a.bundle) bundles.push_back(std::move(*a.bundle));
  }
  return estimate_cost(pipeline.config().profile, bundles);
}

inline RunResult run_experiment(const Pipeline& pipeline, const RunOptions& opts = {}) {
  const ExperimentConfig& config = pipeline.config();
  const std::string prefix = config.hash().substr(0, 12);

  RunResult result;
  std::optional<fs::path> existing = opts.fresh ? std::nullopt : detail::latest_run_dir(config.runs_dir, prefix);
  if (existing) {
    result.run_dir = *existing;
    result.resumed = true;
  } else {
    fs::path dir = config.runs_dir / (prefix + "-" + detail::utc_timestamp());
    for (int n = 1; fs::exists(dir); ++n) {
      dir = config.runs_dir / (prefix + "-" + detail::utc_timestamp() + "-" + std::to_string(n));
    }
    result.run_dir = dir;
  }
  fs::create_directories(result.run_dir);
  const fs::path progress_path = result.run_dir / "progress.jsonl";

  std::map<std::string, json> entries = detail::read_progress(progress_path);
  std::vector<const QueryRecord*> pending;
  for (const auto& q : pipeline.queries()) {
    auto it = entries.find(q.qid);
    if (it == entries.end() || it->second.at("output").is_null()) pending.push_back(&q);
  }
  if (opts.stop_after && *opts.stop_after < pending.size()) {
    pending.resize(*opts.stop_after);
    result.interrupted = true;
  }

  ClientOptions copts = opts.client;
  copts.cache_dir = config.effective_cache_dir();
  copts.render = pipeline.renderer().options();
  GenClient client(copts);

  std::ofstream progress(progress_path, std::ios::app);
  std::ofstream timings(result.run_dir / "timings.jsonl", std::ios::app);
  std::mutex write_mutex;

  constexpr std::size_t kChunk = 256;
  for (std::size_t start = 0; start < pending.size(); start += kChunk) {
    const std::size_t n = std::min(kChunk, pending.size() - start);
    std::vector<QueryArtifacts> arts(n);
    detail::parallel_for(n, config.parallelism, [&](std::size_t i) { arts[i] = pipeline.prepare(*pending[start + i]); });

    std::vector<PromptBundle> bundles;
    std::vector<std::size_t> slot;  // bundle index -> artifact index
    for (std::size_t i = 0; i < n; ++i) {
      if (arts[i].bundle) {
        bundles.push_back(*arts[i].bundle);
        slot.push_back(i);
      }
    }

    auto record = [&](std::size_t i, const std::optional<GenerationOutput>& out, const std::string& err) {
      json e = detail::entry_json(arts[i], config.k, out, err);
      std::lock_guard<std::mutex> g(write_mutex);
      progress << e.dump() << '\n' << std::flush;
      if (out) {
        timings << json{{"qid", out->qid}, {"latency_ms", out->latency_ms}, {"cached", out->cached}}.dump()
                << '\n';
      }
      entries[arts[i].qid] = std::move(e);
    };
    for (std::size_t i = 0; i < n; ++i) {
      if (!arts[i].bundle) record(i, std::nullopt, arts[i].error);
    }

    result.generated += bundles.size();
    run_batch(client, config.profile, bundles, config.parallelism, config.failure_policy,
              [&](std::size_t b, const BatchItem& item) { record(slot[b], item.output, item.error); });
  }
  progress.close();
  timings.close();

  if (result.interrupted) return result;
  result.manifest = assemble_manifest(config, pipeline.queries(), entries);
  result.failed = result.manifest["failed"].get<std::size_t>();
  detail::write_text_atomic(result.run_dir / "manifest.json", result.manifest.dump(2) + "\n");
  return result;
}

inline RunResult run_experiment(const ExperimentConfig& config, const RunOptions& opts = {}) {
  return run_experiment(Pipeline(config), opts);
}

inline json load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open manifest '" + path.string() + "'");
  return json::parse(in);
}

// ---------------------------------------------------------------------------
// Evaluation.

enum class EvalMode : std::uint8_t { Generated, RetrieverBaseline };

inline std::string_view to_string(EvalMode m) noexcept {
  return m == EvalMode::Generated ? "generated" : "retriever_baseline";
}

/// Feature stores share one id scheme: generated images are keyed by qid,
/// pool images by did. clip_text is keyed by qid.
struct EvalInputs {
  const std::vector<QueryRecord>* queries = nullptr;
  const CandidatePool* pool = nullptr;
  EvalMode mode = EvalMode::Generated;
  const EmbeddingStore* features = nullptr;
  const EmbeddingStore* probs = nullptr;
  const EmbeddingStore* clip_image = nullptr;
  const EmbeddingStore* clip_text = nullptr;
  bool fid_vs_retrieved = false;
  std::size_t is_splits = 10;
};

struct EvalResult {
  MetricReport metrics;
  std::size_t evaluated = 0;
  std::size_t dropped = 0;

  json to_json() const {
    return {{"metrics", metrics.values}, {"evaluated", evaluated}, {"dropped", dropped}};
  }
};

namespace detail {

inline std::vector<float> row_vector(const EmbeddingStore& s, const std::unordered_map<std::string, std::size_t>& rows,
                                     const std::string& id, const char* what) {
  auto it = rows.find(id);
  if (it == rows.end()) throw MetricError(std::string(what) + " has no row for '" + id + "'");
  const auto v = s.vector(it->second);
  return {v.begin(), v.end()};
}

}  // namespace detail

/// Scores a manifest. Queries without an output (or, for the baseline, without
/// a retrieved pair) are dropped and counted.
inline EvalResult evaluate_run(const json& manifest, const EvalInputs& in) {
  if (in.queries == nullptr || in.pool == nullptr) throw Error("evaluate_run needs queries and pool");
  const Task task = task_from_string(manifest.at("config").at("task").get<std::string>());
  std::map<std::string, const QueryRecord*> by_qid;
  for (const auto& q : *in.queries) by_qid[q.qid] = &q;

  struct Item {
    const QueryRecord* query;
    std::string candidate;  // caption text, or feature id of the candidate image
    std::string retrieved;  // top-1 retrieved image did, if any
  };
  EvalResult r;
  std::vector<Item> items;
  for (const auto& e : manifest.at("queries")) {
    auto q = by_qid.find(e.at("qid").get<std::string>());
    if (q == by_qid.end()) throw Error("manifest query '" + e.at("qid").get<std::string>() + "' is unknown");
    const json& pairs = e.at("pairs");
    Item item{q->second, {}, pairs.empty() ? std::string() : pairs[0].at("image_did").get<std::string>()};
    if (in.mode == EvalMode::Generated) {
      if (e.at("output").is_null()) {
        ++r.dropped;
        continue;
      }
      item.candidate = task == Task::Caption ? e["output"].at("text").get<std::string>() : q->first;
    } else {
      if (pairs.empty()) {
        ++r.dropped;
        continue;
      }
      item.candidate = task == Task::Caption ? pairs[0].at("caption").get<std::string>() : item.retrieved;
    }
    items.push_back(std::move(item));
  }
  r.evaluated = items.size();
  if (items.empty()) throw MetricError("no evaluable queries in manifest");

  if (task == Task::Caption) {
    std::vector<std::string> cands;
    std::vector<std::vector<std::string>> refs;
    for (const auto& it : items) {
      cands.push_back(it.candidate);
      auto& rs = refs.emplace_back();
      for (const auto& did : it.query->pos_dids) {
        const CandidateDoc& d = in.pool->at(did);
        if (d.text) rs.push_back(*d.text);
      }
    }
    r.metrics = caption_report(cands, refs);
    return r;
  }

  if (in.features != nullptr) {
    std::vector<std::string> gen_ids, gt_ids, ret_ids;
    for (const auto& it : items) {
      gen_ids.push_back(it.candidate);
      if (it.query->pos_dids.empty()) throw MetricError("query '" + it.query->qid + "' has no ground truth");
      gt_ids.push_back(it.query->pos_dids.front());
      if (in.fid_vs_retrieved) {
        if (it.retrieved.empty()) throw MetricError("query '" + it.query->qid + "' has no retrieved image");
        ret_ids.push_back(it.retrieved);
      }
    }
    const auto gen = feature_stats(feature_matrix(*in.features, gen_ids));
    r.metrics.set("FID", fid(gen, feature_stats(feature_matrix(*in.features, gt_ids))));
    if (in.fid_vs_retrieved) {
      r.metrics.set("FID-retrieved", fid(gen, feature_stats(feature_matrix(*in.features, ret_ids))));
    }
  }
  if (in.clip_image != nullptr && in.clip_text != nullptr) {
    const auto irows = in.clip_image->row_map();
    const auto trows = in.clip_text->row_map();
    std::vector<std::vector<float>> iv, tv;
    for (const auto& it : items) {
      iv.push_back(detail::row_vector(*in.clip_image, irows, it.candidate, "clip image store"));
      tv.push_back(detail::row_vector(*in.clip_text, trows, it.query->qid, "clip text store"));
    }
    r.metrics.set("CLIP", clip_score(iv, tv));
  }
  if (in.probs != nullptr) {
    std::vector<std::string> ids;
    for (const auto& it : items) ids.push_back(it.candidate);
    const auto is = inception_score(feature_matrix(*in.probs, ids), std::min(in.is_splits, ids.size()));
    r.metrics.set("IS", is.mean);
    r.metrics.set("IS-SD", is.sd);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Reports.

struct ReportRow {
  std::string generator;
  std::string retriever;
  std::size_t k = 0;
  std::string task;
  MetricReport metrics;
  std::size_t evaluated = 0;
  std::size_t dropped = 0;
};

struct ReportTables {
  std::string text;
  std::string jsonl;
};

/// Row for one evaluated manifest. Baseline evaluations report the
/// generator as "as-is".
inline ReportRow report_row(const json& manifest, const EvalResult& eval, EvalMode mode) {
  const json& c = manifest.at("config");
  return {mode == EvalMode::Generated ? c.at("profile").at("name").get<std::string>() : "as-is",
          c.at("retriever").get<std::string>(),
          c.at("k").get<std::size_t>(),
          c.at("task").get<std::string>(),
          eval.metrics,
          eval.evaluated,
          eval.dropped};
}

namespace detail {

inline bool percent_metric(const std::string& name) {
  return name.rfind("BLEU-", 0) == 0 || name == "CIDEr" || name == "ROUGE-L";
}

inline std::vector<std::string> metric_columns(const std::vector<ReportRow>& rows) {
  static const std::vector<std::string> kOrder{"BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "CIDEr", "ROUGE-L",
                                               "FID",    "FID-retrieved", "CLIP", "IS", "IS-SD"};
  std::set<std::string> present;
  for (const auto& r : rows) {
    for (const auto& [name, v] : r.metrics.values) present.insert(name);
  }
  std::vector<std::string> cols;
  for (const auto& name : kOrder) {
    if (present.erase(name) != 0) cols.push_back(name);
  }
  cols.insert(cols.end(), present.begin(), present.end());
  return cols;
}

}  // namespace detail

/// Rows sorted by (generator, retriever, k). Caption metrics are scaled by
/// 100 in both outputs.
inline ReportTables report(std::vector<ReportRow> rows) {
  std::stable_sort(rows.begin(), rows.end(), [](const ReportRow& a, const ReportRow& b) {
    return std::tie(a.generator, a.retriever, a.k) < std::tie(b.generator, b.retriever, b.k);
  });
  const auto metrics = detail::metric_columns(rows);

  std::vector<std::string> header{"generator", "retriever", "k"};
  header.insert(header.end(), metrics.begin(), metrics.end());
  if (!rows.empty()) header.push_back("dropped");

  std::vector<std::vector<std::string>> cells{header};
  ReportTables out;
  for (const auto& r : rows) {
    std::vector<std::string> line{r.generator, r.retriever, std::to_string(r.k)};
    json rec{{"generator", r.generator}, {"retriever", r.retriever}, {"k", r.k}, {"task", r.task},
             {"evaluated", r.evaluated}, {"dropped", r.dropped}};
    json values = json::object();
    for (const auto& m : metrics) {
      auto v = r.metrics.get(m);
      if (!v) {
        line.emplace_back("-");
        continue;
      }
      const double scaled = detail::percent_metric(m) ? *v * 100.0 : *v;
      std::ostringstream os;
      os << std::fixed << std::setprecision(detail::percent_metric(m) ? 1 : 3) << scaled;
      line.push_back(os.str());
      values[m] = scaled;
    }
    line.push_back(std::to_string(r.dropped));
    rec["metrics"] = std::move(values);
    out.jsonl += rec.dump() + "\n";
    cells.push_back(std::move(line));
  }

  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& row : cells) {
    for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
  }
  for (const auto& row : cells) {
    std::string line;
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i > 0) line += "  ";
      // Text columns left-aligned, numbers right-aligned.
      const bool left = i < 2;
      const std::string pad(width[i] - row[i].size(), ' ');
      line += left ? row[i] + pad : pad + row[i];
    }
    while (!line.empty() && line.back() == ' ') line.pop_back();
    out.text += line + "\n";
  }
  return out;
}

}  // namespace unirag
