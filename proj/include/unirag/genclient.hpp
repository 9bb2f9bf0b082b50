// Copyright 2026 The UniRAG Authors
// SPDX-License-Identifier: Apache-2.0

// Remote generation over one wire dialect.
//
// Captioning: POST {prefix}/v1/chat/completions
//   {"model", "max_tokens", "messages": [{"role", "content": [
//       {"type": "text", "text"} | {"type": "image", "data": <base64>, "media_type"}]}]}
//   -> {"choices": [{"message": {"content": "..."}}]}
// Image generation: POST {prefix}/v1/images/generations
//   {"model", "prompt_parts": [<content parts as above>]} -> {"image_b64": "..."}
//
// Responses are cached on disk under sha256(profile name, bundle hash).

#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "httplib.h"
// <resolv.h>, pulled in by httplib, defines `_res` as a macro, which breaks
// later headers (Eigen among them) that use it as an identifier.
#ifdef _res
#undef _res
#endif
#include "json.hpp"
#include "unirag/common.hpp"
#include "unirag/prompting.hpp"

namespace unirag {

// ---------------------------------------------------------------------------
// Profiles and pricing.

enum class ImagePriceUnit : std::uint8_t { Per1kTokens, PerImage };

struct PriceCard {
  double input_text_per_1k = 0.0;
  double input_image_unit = 0.0;
  ImagePriceUnit image_unit = ImagePriceUnit::Per1kTokens;
  double output_text_per_1k = 0.0;
  /// Tokens billed per image when image_unit is Per1kTokens.
  double tokens_per_image = 255.0;

  void validate() const {
    if (input_text_per_1k < 0 || input_image_unit < 0 || output_text_per_1k < 0 ||
        tokens_per_image < 0) {
      throw ValidationError("price card rates must be non-negative");
    }
  }
};

/// USD prices from the providers' published per-1k rates.
inline PriceCard gpt4o_price_card() { return {0.005, 0.015, ImagePriceUnit::Per1kTokens, 0.005, 255.0}; }
inline PriceCard gemini_pro_price_card() {
  return {0.000125, 0.0025, ImagePriceUnit::PerImage, 0.000375, 0.0};
}

struct GeneratorProfile {
  std::string name;
  Dialect dialect = Dialect::Interleaved;
  std::string endpoint_url;
  std::string model;  // sent as "model"; defaults to name
  std::size_t max_new_tokens = 400;
  std::optional<std::size_t> max_pairs;
  std::optional<PriceCard> pricing;
  std::string api_key_env;  // env var holding a bearer token, if any

  void validate() const {
    if (name.empty()) throw ValidationError("generator profile needs a name");
    if (max_new_tokens == 0) throw ValidationError("profile '" + name + "': max_new_tokens must be > 0");
    if (max_pairs && *max_pairs == 0) throw ValidationError("profile '" + name + "': max_pairs must be > 0");
    if (pricing) pricing->validate();
  }
};

inline GeneratorProfile profile_from_json(const nlohmann::json& j) {
  GeneratorProfile p;
  p.name = j.at("name").get<std::string>();
  p.dialect = dialect_from_string(j.value("dialect", std::string("interleaved")));
  p.endpoint_url = j.value("endpoint_url", std::string{});
  p.model = j.value("model", p.name);
  p.max_new_tokens = j.value("max_new_tokens", std::size_t{400});
  if (j.contains("max_pairs") && !j["max_pairs"].is_null()) p.max_pairs = j["max_pairs"].get<std::size_t>();
  p.api_key_env = j.value("api_key_env", std::string{});
  if (j.contains("pricing") && !j["pricing"].is_null()) {
    const auto& c = j["pricing"];
    PriceCard card;
    card.input_text_per_1k = c.value("input_text_per_1k", 0.0);
    card.input_image_unit = c.value("input_image_unit", 0.0);
    const std::string unit = c.value("image_unit", std::string("per_1k_tokens"));
    if (unit == "per_image") {
      card.image_unit = ImagePriceUnit::PerImage;
    } else if (unit == "per_1k_tokens") {
      card.image_unit = ImagePriceUnit::Per1kTokens;
    } else {
      throw ValidationError("unknown image_unit '" + unit + "'");
    }
    card.output_text_per_1k = c.value("output_text_per_1k", 0.0);
    card.tokens_per_image = c.value("tokens_per_image", 255.0);
    p.pricing = card;
  }
  p.validate();
  return p;
}

inline nlohmann::json to_json(const GeneratorProfile& p) {
  nlohmann::json j{{"name", p.name},
                   {"dialect", std::string(to_string(p.dialect))},
                   {"endpoint_url", p.endpoint_url},
                   {"model", p.model},
                   {"max_new_tokens", p.max_new_tokens},
                   {"max_pairs", p.max_pairs ? nlohmann::json(*p.max_pairs) : nlohmann::json()},
                   {"api_key_env", p.api_key_env}};
  if (p.pricing) {
    j["pricing"] = {{"input_text_per_1k", p.pricing->input_text_per_1k},
                    {"input_image_unit", p.pricing->input_image_unit},
                    {"image_unit", p.pricing->image_unit == ImagePriceUnit::PerImage ? "per_image"
                                                                                    : "per_1k_tokens"},
                    {"output_text_per_1k", p.pricing->output_text_per_1k},
                    {"tokens_per_image", p.pricing->tokens_per_image}};
  } else {
    j["pricing"] = nullptr;
  }
  return j;
}

// ---------------------------------------------------------------------------
// Outputs and errors.

enum class OutputKind : std::uint8_t { Text, Image };

struct GenerationOutput {
  std::string qid;
  OutputKind kind = OutputKind::Text;
  std::optional<std::string> text;
  std::optional<std::string> image_ref;
  std::int64_t latency_ms = 0;
  bool cached = false;
  /// Examples actually sent; below the bundle's k after truncation.
  std::size_t examples_used = 0;

  void validate() const {
    const bool ok = kind == OutputKind::Text ? (text && !image_ref) : (image_ref && !text);
    if (!ok) throw ValidationError("output for '" + qid + "' must carry exactly one of text/image_ref");
  }
};

class TransportError : public Error {
 public:
  using Error::Error;
};

class ProviderError : public Error {
 public:
  ProviderError(int status, std::string body)
      : Error("provider returned HTTP " + std::to_string(status) + ": " + body),
        status_(status),
        body_(std::move(body)) {}
  int status() const noexcept { return status_; }
  const std::string& body() const noexcept { return body_; }

 private:
  int status_;
  std::string body_;
};

class PromptTooLargeError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Wire encoding.

namespace wire {

inline constexpr std::string_view kChatPath = "/v1/chat/completions";
inline constexpr std::string_view kImagePath = "/v1/images/generations";

inline nlohmann::json text_part(const std::string& text) { return {{"type", "text"}, {"text", text}}; }

inline nlohmann::json content_parts(const PromptBundle& b, bool include_preamble) {
  nlohmann::json out = nlohmann::json::array();
  if (include_preamble && !b.preamble.empty()) out.push_back(text_part(b.preamble));
  for (const auto& p : b.parts) {
    if (const auto* t = std::get_if<TextPart>(&p)) {
      out.push_back(text_part(t->text));
    } else {
      const auto& img = std::get<ImagePart>(p);
      out.push_back({{"type", "image"}, {"data", base64_encode(img.bytes)}, {"media_type", img.media_type}});
    }
  }
  if (!b.postscript.empty()) out.push_back(text_part(b.postscript));
  return out;
}

/// Chat request. The system dialect sends the preamble as a system message.
inline nlohmann::json chat_request(const GeneratorProfile& profile, const PromptBundle& b) {
  nlohmann::json messages = nlohmann::json::array();
  const bool system = b.dialect == Dialect::InterleavedWithSystem && !b.preamble.empty();
  if (system) {
    messages.push_back({{"role", "system"}, {"content", nlohmann::json::array({text_part(b.preamble)})}});
  }
  messages.push_back({{"role", "user"}, {"content", content_parts(b, !system)}});
  return {{"model", profile.model.empty() ? profile.name : profile.model},
          {"max_tokens", profile.max_new_tokens},
          {"messages", std::move(messages)}};
}

inline nlohmann::json image_request(const GeneratorProfile& profile, const PromptBundle& b) {
  return {{"model", profile.model.empty() ? profile.name : profile.model},
          {"prompt_parts", content_parts(b, true)}};
}

inline std::string chat_response_text(const nlohmann::json& j) {
  const auto& content = j.at("choices").at(0).at("message").at("content");
  if (content.is_string()) return content.get<std::string>();
  std::string out;
  for (const auto& part : content) {
    if (part.value("type", std::string{}) == "text") out += part.value("text", std::string{});
  }
  return out;
}

/// True for bodies that signal an oversized prompt.
inline bool is_prompt_too_large(int status, const std::string& body) {
  return status == 413 || body.find("prompt_too_large") != std::string::npos;
}

inline bool is_retryable(int status) {
  return status == 429 || status == 500 || status == 502 || status == 503 || status == 504;
}

struct Endpoint {
  std::string base;    // scheme://host[:port]
  std::string prefix;  // path prefix without trailing '/'
};

inline Endpoint parse_endpoint(const std::string& url) {
  const auto scheme = url.find("://");
  if (scheme == std::string::npos) throw ValidationError("endpoint_url '" + url + "' has no scheme");
  const auto slash = url.find('/', scheme + 3);
  Endpoint e;
  e.base = url.substr(0, slash);
  if (slash != std::string::npos) e.prefix = url.substr(slash);
  while (!e.prefix.empty() && e.prefix.back() == '/') e.prefix.pop_back();
  return e;
}

}  // namespace wire

// ---------------------------------------------------------------------------
// Content-addressed response cache.

class ResponseCache {
 public:
  explicit ResponseCache(std::filesystem::path dir) : dir_(std::move(dir)) {
    if (!dir_.empty()) std::filesystem::create_directories(dir_);
  }

  bool enabled() const noexcept { return !dir_.empty(); }
  const std::filesystem::path& dir() const noexcept { return dir_; }

  static std::string key(const GeneratorProfile& profile, const PromptBundle& bundle) {
    return sha256_hex(profile.name + '\n' + bundle.content_hash());
  }

  std::optional<nlohmann::json> get(const std::string& key) const {
    if (!enabled()) return std::nullopt;
    std::ifstream in(entry_path(key));
    if (!in) return std::nullopt;
    try {
      return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception&) {
      return std::nullopt;  // torn or foreign file; treat as a miss
    }
  }

  /// Writes `bytes` as a side file and returns its path.
  std::filesystem::path put_blob(const std::string& key, const std::string& ext, std::string_view bytes) {
    auto lock = lock_key(key);
    const auto path = dir_ / (key + ext);
    atomic_write(path, bytes);
    return path;
  }

  void put(const std::string& key, const nlohmann::json& value) {
    auto lock = lock_key(key);
    atomic_write(entry_path(key), value.dump());
  }

  std::filesystem::path entry_path(const std::string& key) const { return dir_ / (key + ".json"); }

 private:
  std::unique_lock<std::mutex> lock_key(const std::string& key) {
    std::mutex* m = nullptr;
    {
      std::lock_guard<std::mutex> g(table_mutex_);
      auto& slot = locks_[key];
      if (!slot) slot = std::make_unique<std::mutex>();
      m = slot.get();
    }
    return std::unique_lock<std::mutex>(*m);
  }

  static void atomic_write(const std::filesystem::path& path, std::string_view bytes) {
    auto tmp = path;
    tmp += ".tmp" + std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id()));
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw Error("cannot write cache file " + tmp.string());
      out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    std::filesystem::rename(tmp, path);
  }

  std::filesystem::path dir_;
  std::mutex table_mutex_;
  std::map<std::string, std::unique_ptr<std::mutex>> locks_;
};

// ---------------------------------------------------------------------------

struct ClientOptions {
  std::filesystem::path cache_dir;  // empty disables caching
  unsigned max_retries = 4;
  std::chrono::milliseconds backoff_base{200};
  std::chrono::milliseconds backoff_max{10'000};
  std::chrono::seconds timeout{120};
  PromptOptions render;  // used to re-render truncated bundles
};

class GenClient {
 public:
  explicit GenClient(ClientOptions opts = {})
      : opts_(std::move(opts)), cache_(opts_.cache_dir), renderer_(opts_.render) {}

  GenClient(const GenClient&) = delete;
  GenClient& operator=(const GenClient&) = delete;

  /// HTTP requests issued so far, retries included.
  std::size_t requests_sent() const noexcept { return requests_.load(); }
  const ResponseCache& cache() const noexcept { return cache_; }

  GenerationOutput generate(const GeneratorProfile& profile, const PromptBundle& bundle) {
    profile.validate();
    if (bundle.dialect != profile.dialect) {
      throw ValidationError("bundle dialect " + std::string(to_string(bundle.dialect)) +
                            " does not match profile '" + profile.name + "' (" +
                            std::string(to_string(profile.dialect)) + ")");
    }
    const auto start = std::chrono::steady_clock::now();
    const std::string key = ResponseCache::key(profile, bundle);
    if (auto hit = cache_.get(key)) {
      auto out = from_cache_entry(bundle, *hit);
      out.cached = true;
      out.latency_ms = elapsed_ms(start);
      return out;
    }

    std::size_t used = bundle.k;
    std::optional<Reply> reply = attempt(profile, bundle);
    if (!reply) {
      if (!profile.max_pairs || bundle.k <= *profile.max_pairs || !bundle.source) {
        throw PromptTooLargeError("prompt for '" + bundle.qid + "' rejected as too large with " +
                                  std::to_string(bundle.k) + " examples");
      }
      const PromptBundle smaller = renderer_.rerender_truncated(bundle, *profile.max_pairs);
      used = smaller.k;
      reply = attempt(profile, smaller);
      if (!reply) {
        throw PromptTooLargeError("prompt for '" + bundle.qid + "' still too large with " +
                                  std::to_string(used) + " examples");
      }
    }

    nlohmann::json entry{{"qid", bundle.qid}, {"examples_used", used}};
    if (bundle.task == Task::Caption) {
      entry["kind"] = "text";
      entry["text"] = wire::chat_response_text(reply->body);
    } else {
      const std::string bytes = base64_decode(reply->body.at("image_b64").get<std::string>());
      const std::string type = sniff_media_type(bytes);
      const auto path = cache_.enabled() ? cache_.put_blob(key, type == "image/jpeg" ? ".jpg" : ".png", bytes)
                                         : std::filesystem::path();
      entry["kind"] = "image";
      entry["image_file"] = path.filename().string();
      entry["media_type"] = type;
    }
    if (cache_.enabled()) cache_.put(key, entry);
    auto out = from_cache_entry(bundle, entry);
    out.latency_ms = elapsed_ms(start);
    return out;
  }

 private:
  struct Reply {
    nlohmann::json body;
  };

  // One logical request with retries. Returns nullopt when the provider
  // rejects the prompt as too large.
  std::optional<Reply> attempt(const GeneratorProfile& profile, const PromptBundle& bundle) {
    const auto endpoint = wire::parse_endpoint(profile.endpoint_url);
    const bool chat = bundle.task == Task::Caption;
    const std::string path = endpoint.prefix + std::string(chat ? wire::kChatPath : wire::kImagePath);
    const std::string body = (chat ? wire::chat_request(profile, bundle) : wire::image_request(profile, bundle)).dump();

    httplib::Headers headers;
    if (!profile.api_key_env.empty()) {
      if (const char* token = std::getenv(profile.api_key_env.c_str())) {
        headers.emplace("Authorization", std::string("Bearer ") + token);
      }
    }

    std::string last_error;
    for (unsigned i = 0; i <= opts_.max_retries; ++i) {
      if (i > 0) std::this_thread::sleep_for(backoff(i - 1));
      httplib::Client cli(endpoint.base);
      cli.set_connection_timeout(opts_.timeout);
      cli.set_read_timeout(opts_.timeout);
      cli.set_write_timeout(opts_.timeout);
      requests_.fetch_add(1);
      auto res = cli.Post(path, headers, body, "application/json");
      if (!res) {
        last_error = httplib::to_string(res.error());
        continue;
      }
      if (res->status >= 200 && res->status < 300) {
        try {
          return Reply{nlohmann::json::parse(res->body)};
        } catch (const nlohmann::json::exception& e) {
          throw ProviderError(res->status, "malformed response: " + std::string(e.what()));
        }
      }
      if (wire::is_prompt_too_large(res->status, res->body)) return std::nullopt;
      if (!wire::is_retryable(res->status)) throw ProviderError(res->status, res->body);
      last_error = "HTTP " + std::to_string(res->status) + ": " + res->body;
      if (i == opts_.max_retries) throw ProviderError(res->status, res->body);
    }
    throw TransportError("request for '" + bundle.qid + "' failed after " +
                         std::to_string(opts_.max_retries + 1) + " attempts: " + last_error);
  }

  std::chrono::milliseconds backoff(unsigned retry) const {
    const auto ms = opts_.backoff_base.count() * (std::int64_t{1} << std::min(retry, 20u));
    return std::chrono::milliseconds(std::min<std::int64_t>(ms, opts_.backoff_max.count()));
  }

  GenerationOutput from_cache_entry(const PromptBundle& bundle, const nlohmann::json& e) const {
    GenerationOutput out;
    out.qid = bundle.qid;
    out.examples_used = e.value("examples_used", bundle.k);
    if (e.at("kind") == "text") {
      out.kind = OutputKind::Text;
      out.text = e.at("text").get<std::string>();
    } else {
      out.kind = OutputKind::Image;
      out.image_ref = (cache_.dir() / e.at("image_file").get<std::string>()).string();
    }
    out.validate();
    return out;
  }

  static std::int64_t elapsed_ms(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start)
        .count();
  }

  ClientOptions opts_;
  ResponseCache cache_;
  PromptRenderer renderer_;
  std::atomic<std::size_t> requests_{0};
};

// ---------------------------------------------------------------------------
// Batches.

enum class FailurePolicy : std::uint8_t { Skip, Abort };

inline FailurePolicy failure_policy_from_string(std::string_view s) {
  if (s == "skip") return FailurePolicy::Skip;
  if (s == "abort") return FailurePolicy::Abort;
  throw ValidationError("unknown failure policy '" + std::string(s) + "'");
}

inline std::string_view to_string(FailurePolicy p) noexcept {
  return p == FailurePolicy::Skip ? "skip" : "abort";
}

struct BatchItem {
  std::optional<GenerationOutput> output;
  std::string error;  // set when output is empty
};

class BatchAbortedError : public Error {
 public:
  BatchAbortedError(std::size_t index, const std::string& cause)
      : Error("batch aborted at item " + std::to_string(index) + ": " + cause), index_(index) {}
  std::size_t index() const noexcept { return index_; }

 private:
  std::size_t index_;
};

/// Generates every bundle with at most `parallelism` requests in flight.
/// Results keep input order. Under Abort, no new item starts after the first
/// failure and BatchAbortedError names the failed item.
inline std::vector<BatchItem> run_batch(GenClient& client, const GeneratorProfile& profile,
                                        std::span<const PromptBundle> bundles, std::size_t parallelism,
                                        FailurePolicy policy = FailurePolicy::Skip,
                                        const std::function<void(std::size_t, const BatchItem&)>& on_done = {}) {
  if (parallelism == 0) throw ValidationError("parallelism must be >= 1");
  std::vector<BatchItem> items(bundles.size());
  std::atomic<std::size_t> next{0};
  std::atomic<bool> stop{false};
  std::mutex done_mutex;
  std::optional<std::size_t> failed;

  auto worker = [&] {
    while (!stop.load()) {
      const std::size_t i = next.fetch_add(1);
      if (i >= bundles.size()) return;
      BatchItem item;
      try {
        item.output = client.generate(profile, bundles[i]);
      } catch (const Error& e) {
        item.error = e.what();
      } catch (const std::exception& e) {
        item.error = e.what();
      }
      std::lock_guard<std::mutex> g(done_mutex);
      items[i] = std::move(item);
      if (!items[i].output && policy == FailurePolicy::Abort) {
        stop.store(true);
        if (!failed || i < *failed) failed = i;
      }
      if (on_done) on_done(i, items[i]);
    }
  };

  const std::size_t threads = std::min(parallelism, std::max<std::size_t>(bundles.size(), 1));
  {
    std::vector<std::jthread> pool;
    for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
    worker();
  }
  if (failed) throw BatchAbortedError(*failed, items[*failed].error);
  return items;
}

// ---------------------------------------------------------------------------
// Cost.

struct CostOptions {
  /// Characters per text token for the approximate tokenizer.
  double chars_per_token = 4.0;
};

/// Sum over bundles of text, image and output charges. Text tokens are
/// approximated as characters / chars_per_token; output is billed at
/// max_new_tokens per bundle.
inline double estimate_cost(const GeneratorProfile& profile, std::span<const PromptBundle> bundles,
                            const CostOptions& opts = {}) {
  if (!profile.pricing) throw ConfigError("profile '" + profile.name + "' has no price card");
  const PriceCard& card = *profile.pricing;
  card.validate();
  if (opts.chars_per_token <= 0) throw ValidationError("chars_per_token must be > 0");
  double total = 0.0;
  for (const auto& b : bundles) {
    std::size_t chars = b.preamble.size() + b.postscript.size();
    for (const auto& p : b.parts) {
      if (const auto* t = std::get_if<TextPart>(&p)) chars += t->text.size();
    }
    const double text_tokens = static_cast<double>(chars) / opts.chars_per_token;
    const auto images = static_cast<double>(b.image_count());
    total += text_tokens / 1000.0 * card.input_text_per_1k;
    total += card.image_unit == ImagePriceUnit::PerImage
                 ? images * card.input_image_unit
                 : images * card.tokens_per_image / 1000.0 * card.input_image_unit;
    total += static_cast<double>(profile.max_new_tokens) / 1000.0 * card.output_text_per_1k;
  }
  return total;
}

}  // namespace unirag
