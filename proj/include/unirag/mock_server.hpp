// Copyright 2026 The UniRAG Authors
// SPDX-License-Identifier: Apache-2.0

// Loopback generator speaking the genclient wire dialect, with fault
// injection. Used by tests and by `unirag mock-serve`.
//
// Echo behaviour:
//   caption  -> the first in-context caption: the text after a "[1] " line
//               if present, else the text part that follows the first image
//               when that image is not the last one; "" for zero-shot.
//   image    -> the first image part, or a 1x1 grey PNG when there is none.
//
// Control: POST /control with any subset of the MockOptions keys; GET /stats.

#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>

#include "httplib.h"
#include "json.hpp"
#include "unirag/common.hpp"
#include "unirag/genclient.hpp"
#include "unirag/image.hpp"

namespace unirag {

struct MockOptions {
  /// Fraction of distinct request bodies answered 429 on their first arrival.
  double fail_429_rate = 0.0;
  /// The first N distinct request bodies always get 500.
  std::size_t permanent_500 = 0;
  /// Requests with more image parts get 413 prompt_too_large.
  std::optional<std::size_t> max_images;
  std::chrono::milliseconds delay{0};
};

struct MockStats {
  std::size_t requests = 0;
  std::size_t ok = 0;
  std::size_t rejected = 0;
  std::size_t max_in_flight = 0;
};

namespace detail {

inline std::string first_example_caption(const nlohmann::json& parts) {
  for (const auto& p : parts) {
    if (p.value("type", std::string{}) != "text") continue;
    const std::string text = p.value("text", std::string{});
    std::size_t pos = 0;
    while (pos <= text.size()) {
      const std::size_t end = std::min(text.find('\n', pos), text.size());
      if (text.compare(pos, 4, "[1] ") == 0) return text.substr(pos + 4, end - pos - 4);
      pos = end + 1;
    }
  }
  std::size_t images = 0;
  for (const auto& p : parts) images += p.value("type", std::string{}) == "image" ? 1 : 0;
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (parts[i].value("type", std::string{}) != "image") continue;
    if (images > 1 && parts[i + 1].value("type", std::string{}) == "text") {
      return parts[i + 1].value("text", std::string{});
    }
    break;
  }
  return {};
}

inline nlohmann::json flatten_user_parts(const nlohmann::json& body) {
  nlohmann::json parts = nlohmann::json::array();
  if (body.contains("prompt_parts")) return body["prompt_parts"];
  for (const auto& m : body.value("messages", nlohmann::json::array())) {
    if (m.value("role", std::string{}) != "user") continue;
    for (const auto& p : m.value("content", nlohmann::json::array())) parts.push_back(p);
  }
  return parts;
}

inline const std::string& placeholder_png() {
  static const std::string png = encode_png(RgbImage(1, 1, Rgb{128, 128, 128}));
  return png;
}

}  // namespace detail

class MockServer {
 public:
  explicit MockServer(MockOptions opts = {}) : opts_(opts) { install_routes(); }
  ~MockServer() { stop(); }

  MockServer(const MockServer&) = delete;
  MockServer& operator=(const MockServer&) = delete;

  /// Binds 127.0.0.1 (port 0 = any free port) and serves on a background
  /// thread. Returns the bound port.
  int start(int port = 0) {
    port_ = port == 0 ? server_.bind_to_any_port("127.0.0.1") : (server_.bind_to_port("127.0.0.1", port) ? port : -1);
    if (port_ < 0) throw Error("mock server cannot bind port " + std::to_string(port));
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    return port_;
  }

  /// Serves on the calling thread until stop() from another thread.
  void serve(const std::string& host, int port) {
    if (!server_.listen(host, port)) throw Error("mock server cannot listen on " + host + ":" + std::to_string(port));
  }

  void stop() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  int port() const noexcept { return port_; }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }

  void set_options(const MockOptions& o) {
    std::lock_guard<std::mutex> g(mutex_);
    opts_ = o;
  }
  MockOptions options() const {
    std::lock_guard<std::mutex> g(mutex_);
    return opts_;
  }

  MockStats stats() const {
    std::lock_guard<std::mutex> g(mutex_);
    return stats_;
  }
  void reset_stats() {
    std::lock_guard<std::mutex> g(mutex_);
    stats_ = {};
    seen_.clear();
    failing_.clear();
  }

 private:
  void install_routes() {
    server_.Post(std::string(wire::kChatPath), [this](const httplib::Request& req, httplib::Response& res) {
      handle(req, res, true);
    });
    server_.Post(std::string(wire::kImagePath), [this](const httplib::Request& req, httplib::Response& res) {
      handle(req, res, false);
    });
    server_.Get("/stats", [this](const httplib::Request&, httplib::Response& res) {
      const auto s = stats();
      res.set_content(nlohmann::json{{"requests", s.requests},
                                     {"ok", s.ok},
                                     {"rejected", s.rejected},
                                     {"max_in_flight", s.max_in_flight}}
                          .dump(),
                      "application/json");
    });
    server_.Post("/control", [this](const httplib::Request& req, httplib::Response& res) {
      try {
        const auto j = nlohmann::json::parse(req.body);
        std::lock_guard<std::mutex> g(mutex_);
        if (j.contains("fail_429_rate")) opts_.fail_429_rate = j["fail_429_rate"].get<double>();
        if (j.contains("permanent_500")) opts_.permanent_500 = j["permanent_500"].get<std::size_t>();
        if (j.contains("max_images")) {
          opts_.max_images = j["max_images"].is_null() ? std::nullopt
                                                       : std::optional(j["max_images"].get<std::size_t>());
        }
        if (j.contains("delay_ms")) opts_.delay = std::chrono::milliseconds(j["delay_ms"].get<int>());
        if (j.value("reset_stats", false)) {
          stats_ = {};
          seen_.clear();
          failing_.clear();
        }
        res.set_content("{}", "application/json");
      } catch (const std::exception& e) {
        res.status = 400;
        res.set_content(nlohmann::json{{"error", {{"message", e.what()}}}}.dump(), "application/json");
      }
    });
  }

  void handle(const httplib::Request& req, httplib::Response& res, bool chat) {
    MockOptions opts;
    std::size_t status = 200;
    const std::string hash = sha256_hex(req.body);
    {
      std::lock_guard<std::mutex> g(mutex_);
      opts = opts_;
      ++stats_.requests;
      ++in_flight_;
      stats_.max_in_flight = std::max(stats_.max_in_flight, in_flight_);
      const bool first_seen = seen_.insert(hash).second;
      if (first_seen && failing_.size() < opts.permanent_500) failing_.insert(hash);
      if (failing_.count(hash) != 0) {
        status = 500;
      } else if (first_seen && hashed_fraction(hash) < opts.fail_429_rate) {
        status = 429;
      }
    }
    if (opts.delay.count() > 0) std::this_thread::sleep_for(opts.delay);

    nlohmann::json body;
    try {
      body = nlohmann::json::parse(req.body);
    } catch (const std::exception&) {
      status = 400;
    }
    nlohmann::json parts = status == 400 ? nlohmann::json::array() : detail::flatten_user_parts(body);
    if (status == 200 && opts.max_images) {
      std::size_t images = 0;
      for (const auto& p : parts) images += p.value("type", std::string{}) == "image" ? 1 : 0;
      if (images > *opts.max_images) status = 413;
    }

    switch (status) {
      case 200:
        if (chat) {
          const std::string text = detail::first_example_caption(parts);
          res.set_content(nlohmann::json{{"choices", {{{"message", {{"role", "assistant"}, {"content", text}}}}}}}.dump(),
                          "application/json");
        } else {
          std::string b64 = base64_encode(detail::placeholder_png());
          for (const auto& p : parts) {
            if (p.value("type", std::string{}) == "image") {
              b64 = p.value("data", std::string{});
              break;
            }
          }
          res.set_content(nlohmann::json{{"image_b64", b64}}.dump(), "application/json");
        }
        break;
      case 413:
        res.status = 413;
        res.set_content(R"({"error":{"code":"prompt_too_large","message":"too many images"}})", "application/json");
        break;
      case 429:
        res.status = 429;
        res.set_content(R"({"error":{"code":"rate_limited"}})", "application/json");
        break;
      case 500:
        res.status = 500;
        res.set_content(R"({"error":{"code":"internal"}})", "application/json");
        break;
      default:
        res.status = 400;
        res.set_content(R"({"error":{"code":"bad_request"}})", "application/json");
        break;
    }

    std::lock_guard<std::mutex> g(mutex_);
    --in_flight_;
    if (status == 200) {
      ++stats_.ok;
    } else {
      ++stats_.rejected;
    }
  }

  // Uniform in [0, 1) from the leading 52 bits of a hex digest.
  static double hashed_fraction(const std::string& hex) {
    return static_cast<double>(std::stoull(hex.substr(0, 13), nullptr, 16)) / static_cast<double>(1ULL << 52);
  }

  httplib::Server server_;
  std::thread thread_;
  int port_ = -1;
  mutable std::mutex mutex_;
  MockOptions opts_;
  MockStats stats_;
  std::size_t in_flight_ = 0;
  std::set<std::string> seen_;
  std::set<std::string> failing_;
};

}  // namespace unirag
