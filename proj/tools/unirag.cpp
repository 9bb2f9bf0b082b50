// Copyright 2026 The UniRAG Authors
// SPDX-License-Identifier: Apache-2.0

// unirag: command-line driver.
//
// Exit codes: 0 ok, 1 configuration error, 2 some queries failed, 3 fatal.

#include <csignal>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "unirag/mock_server.hpp"
#include "unirag/runner.hpp"

namespace {

using namespace unirag;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitPartial = 2;
constexpr int kExitFatal = 3;

struct CommonFlags {
  std::string config;
  std::optional<std::size_t> k;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> retriever;
  std::optional<std::string> profile;
  std::optional<std::size_t> parallelism;
  std::string out;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config, "experiment config (JSON)")->required();
    cmd->add_option("--k", k, "number of in-context examples");
    cmd->add_option("--seed", seed, "seed for random retrieval and sampling");
    cmd->add_option("--retriever", retriever, "fused | random | none");
    cmd->add_option("--profile", profile, "generator profile name from the config's profiles");
    cmd->add_option("--parallelism", parallelism, "concurrent generator requests");
  }

  ExperimentConfig load() const {
    return load_config(config, ConfigOverrides{k, seed, retriever, profile, parallelism});
  }
};

struct EvalFlags {
  std::string features, probs, clip_image, clip_text;
  bool fid_vs_retrieved = false;
  bool baseline = false;
  std::size_t is_splits = 10;

  void attach(CLI::App* cmd) {
    cmd->add_option("--features", features, "UEMB image features for FID");
    cmd->add_option("--probs", probs, "UEMB class probabilities for IS");
    cmd->add_option("--clip-image", clip_image, "UEMB CLIP image embeddings");
    cmd->add_option("--clip-text", clip_text, "UEMB CLIP text embeddings (ids = qid)");
    cmd->add_flag("--fid-vs-retrieved", fid_vs_retrieved, "also report FID against top-1 retrieved images");
    cmd->add_option("--is-splits", is_splits, "Inception Score splits");
  }
};

class Output {
 public:
  explicit Output(const std::string& path) {
    if (!path.empty()) {
      file_.open(path);
      if (!file_) throw Error("cannot write '" + path + "'");
    }
  }
  std::ostream& stream() { return file_.is_open() ? file_ : std::cout; }

 private:
  std::ofstream file_;
};

int cmd_index(const std::string& pool_path, const std::string& emb_path, unsigned workers) {
  const CandidatePool pool = load_pool(pool_path);
  pool.validate_complements();
  const Index index(load_uemb(emb_path), IndexOptions{workers});
  std::size_t images = 0, missing = 0;
  for (std::size_t i = 0; i < index.size(); ++i) {
    images += index.store().modality(i) == Modality::Image ? 1 : 0;
    missing += pool.find(index.store().id(i)) == nullptr ? 1 : 0;
  }
  std::cout << json{{"docs", pool.size()},
                    {"vectors", index.size()},
                    {"dim", index.dim()},
                    {"text_vectors", index.size() - images},
                    {"image_vectors", images},
                    {"vectors_without_doc", missing}}
                   .dump(2)
            << "\n";
  return missing == 0 ? kExitOk : kExitPartial;
}

int cmd_stage(const CommonFlags& flags, const std::string& stage) {
  const Pipeline pipeline(flags.load());
  Output out(flags.out);
  bool any_error = false;
  for (const auto& q : pipeline.queries()) {
    json rec{{"qid", q.qid}};
    if (stage == "retrieve") {
      try {
        const auto sub = pipeline.retrieve(q);
        json hits = json::array();
        for (const auto& h : sub.hits) hits.push_back(to_json(h));
        rec["hits"] = std::move(hits);
        rec["substitutions"] = sub.substitution_count;
        rec["warnings"] = sub.errors;
      } catch (const Error& e) {
        rec["error"] = e.what();
        any_error = true;
      }
    } else {
      const auto a = pipeline.prepare(q);
      if (!a.error.empty()) {
        rec["error"] = a.error;
        any_error = true;
      }
      if (stage == "pair") {
        json pairs = json::array();
        for (const auto& p : a.pairs) pairs.push_back(to_json(p));
        rec["pairs"] = std::move(pairs);
        rec["warnings"] = a.warnings;
      } else if (a.bundle) {
        rec["prompt_hash"] = a.bundle->content_hash();
        rec["k"] = a.bundle->k;
        rec["images"] = a.bundle->image_count();
        rec["transcript"] = a.bundle->transcript();
      }
    }
    out.stream() << rec.dump() << "\n";
  }
  return any_error ? kExitPartial : kExitOk;
}

EvalResult evaluate_dir(const fs::path& run_dir, const EvalFlags& ef, EvalMode mode) {
  const json manifest = load_manifest(run_dir / "manifest.json");
  const json& c = manifest.at("config");
  const Task task = task_from_string(c.at("task").get<std::string>());
  const CandidatePool pool = load_pool(c.at("pool").get<std::string>());
  auto queries = load_queries(c.at("queries").get<std::string>(), task);

  std::optional<EmbeddingStore> features, probs, clip_image, clip_text;
  if (!ef.features.empty()) features = load_uemb(ef.features);
  if (!ef.probs.empty()) probs = load_uemb(ef.probs);
  if (!ef.clip_image.empty()) clip_image = load_uemb(ef.clip_image);
  if (!ef.clip_text.empty()) clip_text = load_uemb(ef.clip_text);

  EvalInputs in;
  in.queries = &queries;
  in.pool = &pool;
  in.mode = mode;
  in.features = features ? &*features : nullptr;
  in.probs = probs ? &*probs : nullptr;
  in.clip_image = clip_image ? &*clip_image : nullptr;
  in.clip_text = clip_text ? &*clip_text : nullptr;
  in.fid_vs_retrieved = ef.fid_vs_retrieved;
  in.is_splits = ef.is_splits;
  EvalResult r = evaluate_run(manifest, in);

  json j = r.to_json();
  j["mode"] = std::string(to_string(mode));
  std::ofstream(run_dir / (mode == EvalMode::Generated ? "metrics.json" : "metrics-baseline.json"))
      << j.dump(2) << "\n";
  return r;
}

int cmd_report(const std::vector<std::string>& run_dirs, const std::string& jsonl_path) {
  std::vector<ReportRow> rows;
  for (const auto& d : run_dirs) {
    const fs::path dir(d);
    const json manifest = load_manifest(dir / "manifest.json");
    for (const auto& [file, mode] : {std::pair{"metrics.json", EvalMode::Generated},
                                     std::pair{"metrics-baseline.json", EvalMode::RetrieverBaseline}}) {
      std::ifstream in(dir / file);
      if (!in) continue;
      const json m = json::parse(in);
      EvalResult r;
      for (const auto& [name, v] : m.at("metrics").items()) r.metrics.set(name, v.get<double>());
      r.evaluated = m.value("evaluated", std::size_t{0});
      r.dropped = m.value("dropped", std::size_t{0});
      rows.push_back(report_row(manifest, r, mode));
    }
  }
  const auto tables = report(std::move(rows));
  std::cout << tables.text;
  if (!jsonl_path.empty()) std::ofstream(jsonl_path) << tables.jsonl;
  return kExitOk;
}

MockServer* g_mock = nullptr;

void stop_mock(int) {
  if (g_mock != nullptr) g_mock->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"unirag: retrieval-augmented captioning and image generation experiments"};
  app.require_subcommand(1);

  std::string pool_path, emb_path;
  unsigned workers = 1;
  auto* index_cmd = app.add_subcommand("index", "validate a pool and its embeddings and build the index");
  index_cmd->add_option("--pool", pool_path, "candidate pool (JSONL)")->required();
  index_cmd->add_option("--embeddings", emb_path, "pool embeddings (UEMB)")->required();
  index_cmd->add_option("--workers", workers, "scan threads (0 = all cores)");

  CommonFlags stage_flags;
  std::vector<std::pair<std::string, CLI::App*>> stages;
  for (const char* name : {"retrieve", "pair", "prompt"}) {
    auto* cmd = app.add_subcommand(name, std::string("run the pipeline up to the ") + name + " stage, one JSON line per query");
    stage_flags.attach(cmd);
    cmd->add_option("--out", stage_flags.out, "output file (default stdout)");
    stages.emplace_back(name, cmd);
  }

  CommonFlags run_flags;
  EvalFlags run_eval;
  bool dry_run = false, fresh = false;
  std::optional<std::size_t> stop_after;
  unsigned max_retries = ClientOptions{}.max_retries;
  unsigned backoff_ms = static_cast<unsigned>(ClientOptions{}.backoff_base.count());
  auto* generate_cmd = app.add_subcommand("generate", "retrieve, pair, prompt and generate; resumable");
  auto* run_cmd = app.add_subcommand("run", "all stages, then evaluate and report");
  for (auto* cmd : {generate_cmd, run_cmd}) {
    run_flags.attach(cmd);
    cmd->add_flag("--dry-run", dry_run, "print the estimated API cost and exit");
    cmd->add_flag("--fresh", fresh, "start a new run directory instead of resuming");
    cmd->add_option("--stop-after", stop_after, "stop after this many generations");
    cmd->add_option("--max-retries", max_retries, "retries per request on 429, 5xx and transport errors");
    cmd->add_option("--backoff-ms", backoff_ms, "initial retry delay in milliseconds");
  }
  run_eval.attach(run_cmd);

  std::string eval_run;
  EvalFlags eval_flags;
  auto* evaluate_cmd = app.add_subcommand("evaluate", "score a finished run");
  evaluate_cmd->add_option("--run", eval_run, "run directory")->required();
  evaluate_cmd->add_flag("--baseline", eval_flags.baseline,
                         "score the top-1 retrieved example instead of the generation");
  eval_flags.attach(evaluate_cmd);

  std::vector<std::string> report_dirs;
  std::string report_jsonl;
  auto* report_cmd = app.add_subcommand("report", "tabulate evaluated runs");
  report_cmd->add_option("runs", report_dirs, "run directories");
  report_cmd->add_option("--jsonl", report_jsonl, "also write one JSON record per row");

  int mock_port = 8089;
  MockOptions mock_opts;
  std::optional<std::size_t> mock_max_images;
  int mock_delay = 0;
  auto* mock_cmd = app.add_subcommand("mock-serve", "serve the echo generator on loopback");
  mock_cmd->add_option("--port", mock_port, "port to bind on 127.0.0.1");
  mock_cmd->add_option("--fail-429-rate", mock_opts.fail_429_rate, "fraction of requests answered 429 once");
  mock_cmd->add_option("--permanent-500", mock_opts.permanent_500, "first N distinct requests always fail");
  mock_cmd->add_option("--max-images", mock_max_images, "reject prompts with more images");
  mock_cmd->add_option("--delay-ms", mock_delay, "added latency per request");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (index_cmd->parsed()) return cmd_index(pool_path, emb_path, workers);
    for (const auto& [name, cmd] : stages) {
      if (cmd->parsed()) return cmd_stage(stage_flags, name);
    }
    if (generate_cmd->parsed() || run_cmd->parsed()) {
      const Pipeline pipeline(run_flags.load());
      if (dry_run) {
        std::cout << json{{"estimated_cost_usd", dry_run_cost(pipeline)},
                          {"queries", pipeline.queries().size()}}
                         .dump()
                  << "\n";
        return kExitOk;
      }
      RunOptions ro;
      ro.fresh = fresh;
      ro.stop_after = stop_after;
      ro.client.max_retries = max_retries;
      ro.client.backoff_base = std::chrono::milliseconds(backoff_ms);
      const RunResult r = run_experiment(pipeline, ro);
      std::cerr << "run directory: " << r.run_dir.string() << "\n";
      if (r.interrupted) {
        std::cerr << "stopped after " << r.generated << " generations; rerun to resume\n";
        return kExitPartial;
      }
      if (run_cmd->parsed()) {
        const EvalResult eval = evaluate_dir(r.run_dir, run_eval, EvalMode::Generated);
        std::cout << report({report_row(r.manifest, eval, EvalMode::Generated)}).text;
      }
      if (r.failed > 0) {
        std::cerr << r.failed << " queries failed; see manifest.json\n";
        return kExitPartial;
      }
      return kExitOk;
    }
    if (evaluate_cmd->parsed()) {
      const auto mode = eval_flags.baseline ? EvalMode::RetrieverBaseline : EvalMode::Generated;
      const EvalResult r = evaluate_dir(eval_run, eval_flags, mode);
      json j = r.to_json();
      j["mode"] = std::string(to_string(mode));
      std::cout << j.dump(2) << "\n";
      return r.dropped > 0 ? kExitPartial : kExitOk;
    }
    if (report_cmd->parsed()) return cmd_report(report_dirs, report_jsonl);
    if (mock_cmd->parsed()) {
      mock_opts.max_images = mock_max_images;
      mock_opts.delay = std::chrono::milliseconds(mock_delay);
      MockServer server(mock_opts);
      g_mock = &server;
      std::signal(SIGINT, stop_mock);
      std::signal(SIGTERM, stop_mock);
      std::cerr << "mock generator on http://127.0.0.1:" << mock_port << "\n";
      server.serve("127.0.0.1", mock_port);
      g_mock = nullptr;
      return kExitOk;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const BatchAbortedError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitPartial;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFatal;
  }
  return kExitFatal;
}
