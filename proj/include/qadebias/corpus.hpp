// Copyright 2026 The qadebias Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Dataset ingestion (SQuAD v1.1 JSON, MRQA JSONL, canonical JSONL),
// tokenization with code-point offsets, answer alignment, sentence
// splitting and vocabulary construction.

#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "qadebias/common.hpp"
#include "qadebias/text.hpp"

namespace qadebias::corpus {

inline constexpr const char* kTokenizerVersion = "qadebias-punct-v1";

struct Answer {
  std::string text;
  std::size_t char_start = 0;  // code points

  bool operator==(const Answer&) const = default;
};

struct Example {
  std::string id;
  std::string domain;
  std::string question;
  std::string context;
  std::vector<Answer> answers;
  bool adversarial = false;

  bool operator==(const Example&) const = default;
};

struct Token {
  std::string text;
  std::size_t char_start = 0;
  std::size_t char_end = 0;  // exclusive

  bool operator==(const Token&) const = default;
};

/// Inclusive token range.
struct Span {
  std::size_t start = 0;
  std::size_t end = 0;

  bool operator==(const Span&) const = default;
  auto operator<=>(const Span&) const = default;
};

struct TokenizedExample {
  std::string example_id;
  std::vector<Token> question_tokens;
  std::vector<Token> context_tokens;
  std::vector<Span> gold_spans;
  std::vector<Span> sentence_bounds;
};

// ---------------------------------------------------------------------------
// Tokenization

/// Whitespace segmentation, then every punctuation character becomes its own
/// token. Case is preserved.
inline std::vector<Token> tokenize(std::string_view text) {
  std::vector<Token> tokens;
  const auto cps = text::decode_utf8(text);
  std::string cur;
  std::size_t cur_start = 0;
  auto flush = [&](std::size_t end) {
    if (!cur.empty()) tokens.push_back({std::move(cur), cur_start, end});
    cur.clear();
  };
  for (std::size_t i = 0; i < cps.size(); ++i) {
    const char32_t cp = cps[i];
    if (text::is_space(cp)) {
      flush(i);
    } else if (text::is_unicode_punct(cp)) {
      flush(i);
      std::string p;
      text::append_utf8(p, cp);
      tokens.push_back({std::move(p), i, i + 1});
    } else {
      if (cur.empty()) cur_start = i;
      text::append_utf8(cur, cp);
    }
  }
  flush(cps.size());
  return tokens;
}

/// Minimal token range covering [char_start, char_start + length). Throws
/// ValidationError when the range leaves the context or covers no token.
inline Span align_answer(const Answer& answer, const std::vector<Token>& context_tokens,
                         std::size_t context_length) {
  const std::size_t begin = answer.char_start;
  const std::size_t end = begin + text::length(answer.text);
  if (end > context_length || begin >= end)
    throw ValidationError("answer range [" + std::to_string(begin) + ", " + std::to_string(end) +
                          ") outside context of length " + std::to_string(context_length));
  std::optional<std::size_t> first;
  std::size_t last = 0;
  for (std::size_t t = 0; t < context_tokens.size(); ++t) {
    const auto& tok = context_tokens[t];
    if (tok.char_end <= begin) continue;
    if (tok.char_start >= end) break;
    if (!first) first = t;
    last = t;
  }
  if (!first) throw ValidationError("answer covers no context token");
  return {*first, last};
}

inline bool is_sentence_terminator(std::string_view tok) {
  return tok == "." || tok == "?" || tok == "!";
}

/// Sentence boundaries after ".", "?" or "!" followed by a capitalized token
/// or by the end of text. The result partitions [0, tokens.size()).
inline std::vector<Span> split_sentences(const std::vector<Token>& tokens) {
  std::vector<Span> bounds;
  std::size_t first = 0;
  for (std::size_t k = 0; k < tokens.size(); ++k) {
    const bool last_token = k + 1 == tokens.size();
    const bool boundary =
        last_token || (is_sentence_terminator(tokens[k].text) &&
                       text::is_upper_initial(tokens[k + 1].text));
    if (boundary) {
      bounds.push_back({first, k});
      first = k + 1;
    }
  }
  return bounds;
}

/// Index of the sentence containing token t.
inline std::size_t sentence_of(const std::vector<Span>& bounds, std::size_t t) {
  for (std::size_t s = 0; s < bounds.size(); ++s)
    if (t >= bounds[s].start && t <= bounds[s].end) return s;
  return bounds.empty() ? 0 : bounds.size() - 1;
}

/// Aligns every gold answer of ex against pre-computed context tokens.
inline TokenizedExample align_answer(const Example& ex, std::vector<Token> context_tokens) {
  TokenizedExample out;
  out.example_id = ex.id;
  out.question_tokens = tokenize(ex.question);
  out.context_tokens = std::move(context_tokens);
  const std::size_t n = text::length(ex.context);
  for (const auto& a : ex.answers) out.gold_spans.push_back(align_answer(a, out.context_tokens, n));
  out.sentence_bounds = split_sentences(out.context_tokens);
  return out;
}

inline TokenizedExample tokenize_example(const Example& ex) {
  return align_answer(ex, tokenize(ex.context));
}

/// Text of an inclusive token span, sliced from the original context.
inline std::string span_text(const std::string& context, const TokenizedExample& tok, Span span) {
  return text::substr(context, tok.context_tokens.at(span.start).char_start,
                      tok.context_tokens.at(span.end).char_end);
}

// ---------------------------------------------------------------------------
// Vocabulary

class Vocab {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kUnk = 1;
  static constexpr std::size_t kSep = 2;

  Vocab() : tokens_{"[PAD]", "[UNK]", "[SEP]"} { reindex(); }

  /// Builds from a full token list whose first three entries are the reserved symbols.
  static Vocab from_tokens(std::vector<std::string> tokens) {
    if (tokens.size() < 3 || tokens[0] != "[PAD]" || tokens[1] != "[UNK]" || tokens[2] != "[SEP]")
      throw ValidationError("vocabulary must start with [PAD], [UNK], [SEP]");
    Vocab v;
    v.tokens_ = std::move(tokens);
    v.reindex();
    return v;
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::size_t id(std::string_view token) const {
    auto it = index_.find(text::lower(token));
    return it == index_.end() ? kUnk : it->second;
  }

  bool contains(std::string_view token) const { return index_.count(text::lower(token)) > 0; }

  /// Covers the tokenizer version, the vocabulary entries, and the extra salt
  /// (the model uses it for its context-length limit).
  std::string fingerprint(std::string_view salt = {}) const {
    std::uint64_t h = text::fnv1a(kTokenizerVersion);
    h = text::fnv1a("|", h);
    h = text::fnv1a(salt, h);
    for (const auto& t : tokens_) {
      h = text::fnv1a("\x1f", h);
      h = text::fnv1a(t, h);
    }
    return text::hex64(h);
  }

  bool operator==(const Vocab& o) const { return tokens_ == o.tokens_; }

 private:
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], i);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Lowercased token types with frequency >= min_freq over questions and
/// contexts, ordered by (frequency desc, token asc) after the reserved symbols.
inline Vocab build_vocab(const std::vector<Example>& examples, std::size_t min_freq) {
  if (min_freq < 1) throw ValidationError("min_freq must be >= 1");
  std::map<std::string, std::size_t> counts;
  for (const auto& ex : examples) {
    for (const auto& t : tokenize(ex.question)) ++counts[text::lower(t.text)];
    for (const auto& t : tokenize(ex.context)) ++counts[text::lower(t.text)];
  }
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (auto& [tok, n] : counts)
    if (n >= min_freq) kept.emplace_back(tok, n);
  std::stable_sort(kept.begin(), kept.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens{"[PAD]", "[UNK]", "[SEP]"};
  for (auto& [tok, n] : kept)
    if (tok != "[pad]" && tok != "[unk]" && tok != "[sep]") tokens.push_back(tok);
  return Vocab::from_tokens(std::move(tokens));
}

inline json vocab_to_json(const Vocab& v) { return v.tokens(); }

inline Vocab vocab_from_json(const json& j) {
  return Vocab::from_tokens(j.get<std::vector<std::string>>());
}

// ---------------------------------------------------------------------------
// Ingestion

struct LoadOptions {
  std::string domain = "squad";
  bool adversarial = false;
  bool strict = false;  // abort on the first invalid example
};

struct Rejection {
  std::string id;
  std::string reason;
};

struct LoadResult {
  std::vector<Example> examples;
  std::vector<Rejection> rejections;
};

/// Empty string when the example satisfies every invariant, else the reason.
inline std::string validation_problem(const Example& ex) {
  if (ex.id.empty()) return "empty id";
  if (ex.answers.empty()) return "no answers";
  const auto ctx = text::decode_utf8(ex.context);
  for (const auto& a : ex.answers) {
    const auto ans = text::decode_utf8(a.text);
    if (ans.empty()) return "empty answer text";
    if (a.char_start + ans.size() > ctx.size())
      return "answer '" + a.text + "' at " + std::to_string(a.char_start) + " runs past the context";
    if (ctx.compare(a.char_start, ans.size(), ans) != 0)
      return "answer '" + a.text + "' not found at answer_start " + std::to_string(a.char_start);
  }
  return {};
}

namespace detail {

inline void accept_or_reject(Example ex, const LoadOptions& opts, std::set<std::string>& seen,
                             LoadResult& result) {
  std::string problem = validation_problem(ex);
  if (problem.empty() && !seen.insert(ex.id).second) problem = "duplicate id";
  if (problem.empty()) {
    result.examples.push_back(std::move(ex));
    return;
  }
  if (opts.strict) throw ValidationError("example '" + ex.id + "': " + problem);
  result.rejections.push_back({ex.id, problem});
}

}  // namespace detail

inline LoadResult parse_squad_json(const json& root, const LoadOptions& opts,
                                   const std::string& where = "squad") {
  if (!root.is_object() || !root.contains("data") || !root["data"].is_array())
    throw ParseError(where + ": missing required field 'data'");
  LoadResult result;
  std::set<std::string> seen;
  for (const auto& article : root["data"]) {
    const auto paragraphs = io::require<json>(article, "paragraphs", where);
    for (const auto& para : paragraphs) {
      const auto context = io::require<std::string>(para, "context", where);
      for (const auto& qa : io::require<json>(para, "qas", where)) {
        Example ex;
        ex.id = io::require<std::string>(qa, "id", where);
        ex.domain = opts.domain;
        ex.adversarial = opts.adversarial;
        ex.question = io::require<std::string>(qa, "question", where + " qas " + ex.id);
        ex.context = context;
        for (const auto& a : io::require<json>(qa, "answers", where + " qas " + ex.id)) {
          Answer ans;
          ans.text = io::require<std::string>(a, "text", where + " qas " + ex.id);
          const auto start = io::require<long long>(a, "answer_start", where + " qas " + ex.id);
          if (start < 0) throw ParseError(where + " qas " + ex.id + ": negative answer_start");
          ans.char_start = static_cast<std::size_t>(start);
          ex.answers.push_back(std::move(ans));
        }
        detail::accept_or_reject(std::move(ex), opts, seen, result);
      }
    }
  }
  return result;
}

/// SQuAD v1.1 JSON (also AddSent / AddOneSent).
inline LoadResult load_squad_json(const std::string& path, const LoadOptions& opts) {
  return parse_squad_json(io::read_json(path), opts, path);
}

/// MRQA JSONL: a header line then one context record per line. Answers come
/// from char_spans only; the first span of the first detected answer is the
/// canonical gold answer.
inline LoadResult load_mrqa_jsonl(const std::string& path, const LoadOptions& opts) {
  LoadResult result;
  std::set<std::string> seen;
  bool header_seen = false;
  io::for_each_jsonl(path, [&](const json& rec, std::size_t lineno) {
    const std::string where = path + ":" + std::to_string(lineno);
    if (!header_seen) {
      if (!rec.is_object() || !rec.contains("header"))
        throw ParseError(where + ": first line must be a header record");
      header_seen = true;
      return;
    }
    const auto context = io::require<std::string>(rec, "context", where);
    const auto ctx_len = text::length(context);
    for (const auto& qa : io::require<json>(rec, "qas", where)) {
      Example ex;
      ex.id = io::require<std::string>(qa, "qid", where);
      ex.domain = opts.domain;
      ex.adversarial = opts.adversarial;
      ex.question = io::require<std::string>(qa, "question", where);
      ex.context = context;
      bool out_of_range = false;
      if (qa.contains("detected_answers")) {
        for (const auto& det : qa["detected_answers"]) {
          for (const auto& span : io::require<json>(det, "char_spans", where)) {
            if (!span.is_array() || span.size() != 2)
              throw ParseError(where + ": char_spans entries must be [start, end]");
            const auto s = span[0].get<long long>();
            const auto e = span[1].get<long long>();
            if (s < 0 || e < s || static_cast<std::size_t>(e) >= ctx_len) {
              out_of_range = true;
              continue;
            }
            Answer a;
            a.char_start = static_cast<std::size_t>(s);
            a.text = text::substr(context, a.char_start, static_cast<std::size_t>(e) + 1);
            ex.answers.push_back(std::move(a));
          }
        }
      }
      if (ex.answers.empty()) {
        const std::string why = out_of_range ? "answer spans outside context" : "no detected answers";
        if (opts.strict) throw ValidationError("example '" + ex.id + "': " + why);
        result.rejections.push_back({ex.id, why});
        continue;
      }
      detail::accept_or_reject(std::move(ex), opts, seen, result);
    }
  });
  if (!header_seen) throw ParseError(path + ": header missing (empty file)");
  return result;
}

inline json example_to_json(const Example& ex) {
  json answers = json::array();
  for (const auto& a : ex.answers) answers.push_back({{"text", a.text}, {"char_start", a.char_start}});
  return {{"id", ex.id},
          {"domain", ex.domain},
          {"adversarial", ex.adversarial},
          {"question", ex.question},
          {"context", ex.context},
          {"answers", answers}};
}

inline Example example_from_json(const json& j, const std::string& where) {
  Example ex;
  ex.id = io::require<std::string>(j, "id", where);
  ex.domain = io::require<std::string>(j, "domain", where);
  ex.adversarial = j.value("adversarial", false);
  ex.question = io::require<std::string>(j, "question", where);
  ex.context = io::require<std::string>(j, "context", where);
  for (const auto& a : io::require<json>(j, "answers", where))
    ex.answers.push_back({io::require<std::string>(a, "text", where),
                          io::require<std::size_t>(a, "char_start", where)});
  return ex;
}

/// Canonical internal dataset format: one Example per line.
inline LoadResult load_dataset(const std::string& path, bool strict = false) {
  LoadResult result;
  std::set<std::string> seen;
  LoadOptions opts;
  opts.strict = strict;
  io::for_each_jsonl(path, [&](const json& rec, std::size_t lineno) {
    detail::accept_or_reject(example_from_json(rec, path + ":" + std::to_string(lineno)), opts, seen,
                             result);
  });
  return result;
}

inline std::string dataset_to_jsonl(const std::vector<Example>& examples) {
  std::string out;
  for (const auto& ex : examples) {
    out += example_to_json(ex).dump();
    out += '\n';
  }
  return out;
}

inline void save_dataset(const std::string& path, const std::vector<Example>& examples) {
  io::write_file(path, dataset_to_jsonl(examples));
}

}  // namespace qadebias::corpus
