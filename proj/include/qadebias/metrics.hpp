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

// SQuAD v1.1 scoring: answer normalization, Exact Match, token F1 and
// dataset aggregation with a max over gold answers.

#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "qadebias/common.hpp"
#include "qadebias/corpus.hpp"
#include "qadebias/text.hpp"

namespace qadebias::metrics {

/// kOfficial strips exactly Python's string.punctuation, as the reference
/// evaluation script does. kUnicode also strips Unicode punctuation.
enum class PunctMode { kOfficial, kUnicode };

/// lower -> drop punctuation -> drop whole-word articles -> collapse whitespace.
inline std::string normalize_answer(std::string_view s, PunctMode mode = PunctMode::kOfficial) {
  std::u32string cps;
  for (char32_t cp : text::decode_utf8(s)) {
    cp = text::to_lower(cp);
    const bool punct = mode == PunctMode::kOfficial ? text::is_ascii_punct(cp) : text::is_unicode_punct(cp);
    if (!punct) cps.push_back(cp);
  }
  // \b(a|an|the)\b -> ' '
  std::u32string no_articles;
  std::size_t i = 0;
  while (i < cps.size()) {
    if (!text::is_word_char(cps[i])) {
      no_articles.push_back(cps[i++]);
      continue;
    }
    std::size_t j = i;
    while (j < cps.size() && text::is_word_char(cps[j])) ++j;
    const std::u32string_view word(cps.data() + i, j - i);
    if (word == U"a" || word == U"an" || word == U"the")
      no_articles.push_back(U' ');
    else
      no_articles.append(word);
    i = j;
  }
  std::string out;
  for (const auto& w : text::split_whitespace(text::encode_utf8(no_articles))) {
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

inline int exact_match(std::string_view pred, std::string_view gold,
                       PunctMode mode = PunctMode::kOfficial) {
  return normalize_answer(pred, mode) == normalize_answer(gold, mode) ? 1 : 0;
}

/// Token F1 over the multiset intersection of normalized tokens. When either
/// side normalizes to nothing the score falls back to exact match.
inline double f1_score(std::string_view pred, std::string_view gold,
                       PunctMode mode = PunctMode::kOfficial) {
  const auto p = text::split_whitespace(normalize_answer(pred, mode));
  const auto g = text::split_whitespace(normalize_answer(gold, mode));
  if (p.empty() || g.empty()) return p == g ? 1.0 : 0.0;
  std::map<std::string, int> counts;
  for (const auto& t : g) ++counts[t];
  int common = 0;
  for (const auto& t : p) {
    auto it = counts.find(t);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++common;
    }
  }
  if (common == 0) return 0.0;
  const double precision = static_cast<double>(common) / static_cast<double>(p.size());
  const double recall = static_cast<double>(common) / static_cast<double>(g.size());
  return 2.0 * precision * recall / (precision + recall);
}

struct ExampleScore {
  int exact_match = 0;
  double f1 = 0.0;
};

inline ExampleScore score_example(std::string_view pred, const std::vector<corpus::Answer>& golds,
                                  PunctMode mode = PunctMode::kOfficial) {
  ExampleScore best;
  for (const auto& g : golds) {
    best.exact_match = std::max(best.exact_match, exact_match(pred, g.text, mode));
    best.f1 = std::max(best.f1, f1_score(pred, g.text, mode));
  }
  return best;
}

struct EvalResult {
  double exact_match = 0.0;  // percent
  double f1 = 0.0;           // percent
  std::size_t n_examples = 0;
  std::size_t missing_predictions = 0;
};

using Predictions = std::unordered_map<std::string, std::string>;

/// Missing predictions score zero and are counted. Sums run in input order.
inline EvalResult evaluate(const Predictions& predictions, const std::vector<corpus::Example>& examples,
                           PunctMode mode = PunctMode::kOfficial) {
  if (examples.empty()) throw ValidationError("evaluate: empty example list");
  EvalResult r;
  double em_sum = 0.0;
  double f1_sum = 0.0;
  for (const auto& ex : examples) {
    ++r.n_examples;
    auto it = predictions.find(ex.id);
    if (it == predictions.end()) {
      ++r.missing_predictions;
      continue;
    }
    const auto s = score_example(it->second, ex.answers, mode);
    em_sum += s.exact_match;
    f1_sum += s.f1;
  }
  const double n = static_cast<double>(r.n_examples);
  r.exact_match = 100.0 * em_sum / n;
  r.f1 = 100.0 * f1_sum / n;
  return r;
}

inline json to_json(const EvalResult& r) {
  return {{"exact_match", r.exact_match},
          {"f1", r.f1},
          {"n_examples", r.n_examples},
          {"missing_predictions", r.missing_predictions}};
}

inline EvalResult eval_result_from_json(const json& j, const std::string& where = "eval result") {
  EvalResult r;
  r.exact_match = io::require<double>(j, "exact_match", where);
  r.f1 = io::require<double>(j, "f1", where);
  r.n_examples = io::require<std::size_t>(j, "n_examples", where);
  r.missing_predictions = io::require<std::size_t>(j, "missing_predictions", where);
  return r;
}

/// Official predictions file: a JSON object id -> answer string.
inline Predictions load_predictions(const std::string& path) {
  const auto j = io::read_json(path);
  if (!j.is_object()) throw ParseError(path + ": predictions must be a JSON object");
  Predictions p;
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!it.value().is_string()) throw ParseError(path + ": prediction for '" + it.key() + "' is not a string");
    p.emplace(it.key(), it.value().get<std::string>());
  }
  return p;
}

inline json predictions_to_json(const Predictions& p) {
  json j = json::object();  // keys are emitted sorted
  for (const auto& [id, ans] : p) j[id] = ans;
  return j;
}

}  // namespace qadebias::metrics
