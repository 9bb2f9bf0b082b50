// Copyright 2026 The UniRAG Authors
// SPDX-License-Identifier: Apache-2.0

// Zero-shot and few-shot prompt rendering for three generator dialects.
//
// A template is plain text with scalar placeholders ({num}, {image_num},
// {caption_num}, {caption}), an inline block {{captions}} ("[n] caption" per
// line), and at most one part block: {{merged images}} or
// {{image-caption-pairs}}. Text before the part block becomes the bundle's
// preamble, text after it the postscript, and the block itself expands into
// the ordered image/text parts.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "json.hpp"
#include "unirag/common.hpp"
#include "unirag/corpus.hpp"
#include "unirag/image.hpp"
#include "unirag/pairing.hpp"
#include "unirag/template_data.hpp"

namespace unirag {

enum class Dialect : std::uint8_t { MergedImage, Interleaved, InterleavedWithSystem };

inline std::string_view to_string(Dialect d) noexcept {
  switch (d) {
    case Dialect::MergedImage: return "merged_image";
    case Dialect::Interleaved: return "interleaved";
    case Dialect::InterleavedWithSystem: return "interleaved_with_system";
  }
  return "interleaved";
}

inline Dialect dialect_from_string(std::string_view s) {
  if (s == "merged_image") return Dialect::MergedImage;
  if (s == "interleaved") return Dialect::Interleaved;
  if (s == "interleaved_with_system") return Dialect::InterleavedWithSystem;
  throw ValidationError("unknown prompt dialect '" + std::string(s) + "'");
}

class RenderError : public Error {
 public:
  using Error::Error;
};

struct TextPart {
  std::string text;
  friend bool operator==(const TextPart&, const TextPart&) = default;
};

struct ImagePart {
  std::string bytes;  // encoded PNG or JPEG
  std::string media_type;
  std::string label;  // did, "query", or "merged"
  friend bool operator==(const ImagePart&, const ImagePart&) = default;
};

using Part = std::variant<TextPart, ImagePart>;

/// What a bundle was rendered from, so it can be re-rendered with fewer
/// examples when a generator rejects it as too large.
struct RenderSource {
  QueryRecord query;
  std::vector<ExamplePair> examples;
};

struct PromptBundle {
  std::string qid;
  Dialect dialect = Dialect::Interleaved;
  Task task = Task::Caption;
  std::size_t k = 0;
  std::string preamble;
  std::vector<Part> parts;
  std::string postscript;
  std::optional<RenderSource> source;

  std::size_t image_count() const {
    std::size_t n = 0;
    for (const auto& p : parts) n += std::holds_alternative<ImagePart>(p) ? 1 : 0;
    return n;
  }

  /// Human-readable rendering: preamble, parts joined by newlines (images as
  /// "<image>"), postscript.
  std::string transcript() const {
    std::string out = preamble;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      if (i > 0) out += '\n';
      if (const auto* t = std::get_if<TextPart>(&parts[i])) {
        out += t->text;
      } else {
        out += "<image>";
      }
    }
    out += postscript;
    return out;
  }

  /// Canonical content description; images are represented by the SHA-256 of
  /// their bytes.
  nlohmann::json canonical_json() const {
    nlohmann::json jparts = nlohmann::json::array();
    for (const auto& p : parts) {
      if (const auto* t = std::get_if<TextPart>(&p)) {
        jparts.push_back({{"type", "text"}, {"text", t->text}});
      } else {
        const auto& img = std::get<ImagePart>(p);
        jparts.push_back(
            {{"type", "image"}, {"media_type", img.media_type}, {"sha256", sha256_hex(img.bytes)}});
      }
    }
    return {{"dialect", std::string(to_string(dialect))},
            {"task", std::string(to_string(task))},
            {"k", k},
            {"preamble", preamble},
            {"parts", std::move(jparts)},
            {"postscript", postscript}};
  }

  std::string content_hash() const { return sha256_hex(canonical_json().dump()); }
};

/// The first min(size, max_pairs) examples, order preserved.
inline std::vector<ExamplePair> truncate_examples(std::span<const ExamplePair> examples,
                                                  std::size_t max_pairs) {
  const std::size_t n = std::min(examples.size(), max_pairs);
  return {examples.begin(), examples.begin() + static_cast<std::ptrdiff_t>(n)};
}

/// Looks up an embedded template by name (file stem under templates/).
inline std::string_view prompt_template(std::string_view name) {
  for (const auto& [key, text] : templates::k_all) {
    if (key == name) return text;
  }
  throw RenderError("no prompt template named '" + std::string(name) + "'");
}

namespace detail {

using Substitutions = std::vector<std::pair<std::string_view, std::string>>;

// Single left-to-right pass: substituted values are never rescanned, and any
// remaining "{identifier}" in the template text is an error.
inline std::string substitute(std::string_view tpl, const Substitutions& subs) {
  std::string out;
  out.reserve(tpl.size());
  std::size_t i = 0;
  while (i < tpl.size()) {
    if (tpl[i] != '{') {
      out += tpl[i++];
      continue;
    }
    bool matched = false;
    for (const auto& [token, value] : subs) {
      if (tpl.substr(i, token.size()) == token) {
        out += value;
        i += token.size();
        matched = true;
        break;
      }
    }
    if (matched) continue;
    const std::size_t close = tpl.find('}', i);
    if (close != std::string_view::npos) {
      std::string_view inner = tpl.substr(i + 1, close - i - 1);
      while (!inner.empty() && inner.front() == '{') inner.remove_prefix(1);
      const bool ident = !inner.empty() && inner.find_first_not_of(
                                               "abcdefghijklmnopqrstuvwxyz_- ") == std::string_view::npos;
      if (ident) {
        throw RenderError("unsubstituted placeholder '" + std::string(tpl.substr(i, close - i + 1)) +
                          "'");
      }
    }
    out += tpl[i++];
  }
  return out;
}

struct SplitTemplate {
  std::string_view before;
  std::string_view block;  // empty when the template has no part block
  std::string_view after;
};

inline SplitTemplate split_part_block(std::string_view tpl) {
  for (std::string_view token : {std::string_view("{{merged images}}"),
                                 std::string_view("{{image-caption-pairs}}")}) {
    const auto pos = tpl.find(token);
    if (pos != std::string_view::npos) {
      return {tpl.substr(0, pos), token, tpl.substr(pos + token.size())};
    }
  }
  return {tpl, {}, {}};
}

inline std::string numbered_captions(std::span<const ExamplePair> examples) {
  std::string out;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    if (i > 0) out += '\n';
    out += "[" + std::to_string(i + 1) + "] " + examples[i].caption;
  }
  return out;
}

}  // namespace detail

struct PromptOptions {
  /// Directory image_ref / query image paths are resolved against.
  std::string image_root;
  /// Fill for the right-hand padding of merged images.
  Rgb background{};
};

class PromptRenderer {
 public:
  explicit PromptRenderer(PromptOptions opts = {}) : opts_(std::move(opts)) {}

  const PromptOptions& options() const noexcept { return opts_; }

  PromptBundle render_zero_shot(const QueryRecord& query, Task task, Dialect dialect) const {
    check_query(query, task);
    PromptBundle b = make_bundle(query, task, dialect, 0);
    if (task == Task::Caption) {
      b.parts.emplace_back(load_part(query.content, "query", "query '" + query.qid + "'"));
      b.parts.emplace_back(TextPart{std::string(prompt_template("zero_shot_caption"))});
    } else {
      b.parts.emplace_back(TextPart{
          detail::substitute(prompt_template("zero_shot_image_gen"), {{"{caption}", query.content}})});
    }
    b.source = RenderSource{query, {}};
    return b;
  }

  PromptBundle render_few_shot(const QueryRecord& query, std::span<const ExamplePair> examples,
                               Task task, Dialect dialect) const {
    if (examples.empty()) return render_zero_shot(query, task, dialect);
    check_query(query, task);
    const std::size_t k = examples.size();
    PromptBundle b = make_bundle(query, task, dialect, k);

    const std::string name = std::string(dialect == Dialect::MergedImage ? "merged"
                                          : dialect == Dialect::Interleaved
                                              ? "interleaved"
                                              : "interleaved_system") +
                             "_few_shot_" + std::string(to_string(task));
    const auto split = detail::split_part_block(prompt_template(name));

    const std::size_t image_num = task == Task::Caption && dialect == Dialect::MergedImage ? k + 1 : k;
    const detail::Substitutions subs{
        {"{{captions}}", detail::numbered_captions(examples)},
        {"{image_num}", std::to_string(image_num)},
        {"{caption_num}", std::to_string(k)},
        {"{num}", std::to_string(k)},
        {"{caption}", task == Task::ImageGen ? query.content : std::string()},
    };
    b.preamble = detail::substitute(split.before, subs);
    b.postscript = detail::substitute(split.after, subs);

    if (split.block == "{{merged images}}") {
      std::vector<RgbImage> images;
      images.reserve(k + 1);
      for (const auto& ex : examples) {
        images.push_back(decode_or_throw(read_image(ex.image_ref, "example '" + ex.image_did + "'"),
                                         "example '" + ex.image_did + "'"));
      }
      if (task == Task::Caption) {
        images.push_back(decode_or_throw(read_image(query.content, "query '" + query.qid + "'"),
                                         "query '" + query.qid + "'"));
      }
      b.parts.emplace_back(ImagePart{encode_png(merge_images(images, opts_.background)),
                                     "image/png", "merged"});
    } else if (split.block == "{{image-caption-pairs}}") {
      for (const auto& ex : examples) {
        b.parts.emplace_back(load_part(ex.image_ref, ex.image_did, "example '" + ex.image_did + "'"));
        b.parts.emplace_back(TextPart{ex.caption});
      }
      if (task == Task::Caption) {
        b.parts.emplace_back(load_part(query.content, "query", "query '" + query.qid + "'"));
      } else {
        b.parts.emplace_back(TextPart{query.content});
      }
    } else {
      throw RenderError("template '" + name + "' has no part block");
    }
    b.source = RenderSource{query, {examples.begin(), examples.end()}};
    return b;
  }

  /// Re-renders `bundle` from its source with at most `max_pairs` examples.
  PromptBundle rerender_truncated(const PromptBundle& bundle, std::size_t max_pairs) const {
    if (!bundle.source) throw RenderError("bundle for '" + bundle.qid + "' has no render source");
    const auto kept = truncate_examples(bundle.source->examples, max_pairs);
    return render_few_shot(bundle.source->query, kept, bundle.task, bundle.dialect);
  }

 private:
  static PromptBundle make_bundle(const QueryRecord& q, Task task, Dialect dialect, std::size_t k) {
    PromptBundle b;
    b.qid = q.qid;
    b.dialect = dialect;
    b.task = task;
    b.k = k;
    return b;
  }

  static void check_query(const QueryRecord& q, Task task) {
    if (q.modality != query_modality(task)) {
      throw ValidationError("query '" + q.qid + "' modality does not match task " +
                            std::string(to_string(task)));
    }
  }

  std::string resolve(const std::string& ref) const {
    std::filesystem::path p(ref);
    if (p.is_absolute() || opts_.image_root.empty()) return p.string();
    return (std::filesystem::path(opts_.image_root) / p).string();
  }

  std::string read_image(const std::string& ref, const std::string& who) const {
    try {
      return read_file_bytes(resolve(ref));
    } catch (const Error&) {
      throw RenderError("missing image for " + who + ": " + resolve(ref));
    }
  }

  static RgbImage decode_or_throw(const std::string& bytes, const std::string& who) {
    try {
      return decode_image(bytes);
    } catch (const Error& e) {
      throw RenderError("cannot decode image for " + who + ": " + e.what());
    }
  }

  ImagePart load_part(const std::string& ref, std::string label, const std::string& who) const {
    std::string bytes = read_image(ref, who);
    std::string type = sniff_media_type(bytes);
    if (type.empty()) throw RenderError("unsupported image format for " + who);
    return ImagePart{std::move(bytes), std::move(type), std::move(label)};
  }

  PromptOptions opts_;
};

}  // namespace unirag
