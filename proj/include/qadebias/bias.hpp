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

// Lexical-overlap bias model, bias weights, weight files and the
// biased-example ratio.

#pragma once

#include <cmath>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "qadebias/common.hpp"
#include "qadebias/corpus.hpp"
#include "qadebias/spanmodel.hpp"

namespace qadebias::bias {

inline const std::set<std::string>& default_stopwords() {
  static const std::set<std::string> kStop = {
      "a",   "an",  "the",  "did",  "do", "does", "what", "where", "who",    "when",  "how", "was",
      "is",  "were", "are", "in",   "for", "of",  "to",   "during", "their", "his",   "her"};
  return kStop;
}

/// Lowercased tokens that carry a letter or digit and are not stopwords.
inline std::set<std::string> content_tokens(const std::vector<corpus::Token>& tokens,
                                            const std::set<std::string>& stopwords = default_stopwords()) {
  std::set<std::string> out;
  for (const auto& t : tokens) {
    if (!text::has_alnum(t.text)) continue;
    auto w = text::lower(t.text);
    if (!stopwords.count(w)) out.insert(std::move(w));
  }
  return out;
}

enum class Gating { kSpan, kEndpoint };

struct BiasConfig {
  std::size_t window = 10;
  double temperature = 1.0;
  std::size_t max_answer_len = 30;
  Gating gating = Gating::kSpan;
  std::set<std::string> stopwords = default_stopwords();
};

struct BiasDistribution {
  std::string example_id;
  std::vector<double> p_start;
  std::vector<double> p_end;
};

struct BiasWeight {
  std::string example_id;
  double w_start = 0.0;
  double w_end = 0.0;

  bool operator==(const BiasWeight&) const = default;
};

/// Start score at i counts question content tokens in context positions
/// [i, i + W); end score at j counts them in (j - W, j]. Each head is
/// softmax(score / tau).
inline BiasDistribution lexical_bias_distribution(const corpus::TokenizedExample& tok, std::size_t window,
                                                  double temperature,
                                                  const std::set<std::string>& stopwords = default_stopwords()) {
  if (window < 1) throw ValidationError("bias window must be >= 1");
  if (!(temperature > 0.0)) throw ValidationError("bias temperature must be positive");
  const auto q = content_tokens(tok.question_tokens, stopwords);
  const std::size_t n = tok.context_tokens.size();
  std::vector<int> match(n, 0);
  for (std::size_t k = 0; k < n; ++k) match[k] = q.count(text::lower(tok.context_tokens[k].text)) ? 1 : 0;
  std::vector<int> prefix(n + 1, 0);
  for (std::size_t k = 0; k < n; ++k) prefix[k + 1] = prefix[k] + match[k];
  std::vector<double> s(n), e(n);
  for (std::size_t i = 0; i < n; ++i) {
    s[i] = static_cast<double>(prefix[std::min(n, i + window)] - prefix[i]) / temperature;
    e[i] = static_cast<double>(prefix[i + 1] - prefix[i + 1 >= window ? i + 1 - window : 0]) / temperature;
  }
  return {tok.example_id, numeric::softmax(s), numeric::softmax(e)};
}

inline std::vector<double> log_probs(const std::vector<double>& p) {
  std::vector<double> out(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) out[i] = std::log(p[i]);
  return out;
}

/// Decodes the bias model's span from log p. Span gating: when the span equals
/// a gold span, the weights are the bias probabilities at that span's
/// endpoints, otherwise both are zero. Endpoint gating checks each endpoint
/// against the gold starts/ends separately.
inline BiasWeight compute_bias_weights(const BiasDistribution& dist, const std::vector<corpus::Span>& gold_spans,
                                       std::size_t max_len, Gating gating = Gating::kSpan) {
  const std::size_t n = dist.p_start.size();
  if (dist.p_end.size() != n) throw ValidationError(dist.example_id + ": start/end length mismatch");
  for (const auto& g : gold_spans)
    if (g.start > g.end || g.end >= n)
      throw ValidationError(dist.example_id + ": gold span outside the bias distribution");
  const auto pred = spanmodel::decode_span(log_probs(dist.p_start), log_probs(dist.p_end), max_len);
  BiasWeight w{dist.example_id, 0.0, 0.0};
  if (gating == Gating::kSpan) {
    for (const auto& g : gold_spans) {
      if (g.start == pred.start_token && g.end == pred.end_token) {
        w.w_start = dist.p_start[g.start];
        w.w_end = dist.p_end[g.end];
        break;
      }
    }
    return w;
  }
  for (const auto& g : gold_spans)
    if (g.start == pred.start_token) {
      w.w_start = dist.p_start[g.start];
      break;
    }
  for (const auto& g : gold_spans)
    if (g.end == pred.end_token) {
      w.w_end = dist.p_end[g.end];
      break;
    }
  return w;
}

/// Weights for a dataset, aligned against the tokenization a model with
/// max_seq_len would see.
inline std::vector<BiasWeight> bias_weights_for(const std::vector<corpus::Example>& examples,
                                                const BiasConfig& cfg, std::size_t max_seq_len) {
  std::vector<BiasWeight> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) {
    const auto tok = spanmodel::prepare_example(ex, max_seq_len);
    const auto dist = lexical_bias_distribution(tok, cfg.window, cfg.temperature, cfg.stopwords);
    out.push_back(compute_bias_weights(dist, tok.gold_spans, cfg.max_answer_len, cfg.gating));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Weight files

struct BiasWeightSet {
  std::map<std::string, BiasWeight> weights;
  std::vector<std::string> warnings;
};

inline json to_json(const BiasWeight& w) {
  return {{"id", w.example_id}, {"w_start", w.w_start}, {"w_end", w.w_end}};
}

inline void write_bias_weights(const std::string& path, const std::vector<BiasWeight>& weights) {
  std::vector<json> lines;
  lines.reserve(weights.size());
  for (const auto& w : weights) lines.push_back(to_json(w));
  io::write_file(path, io::to_jsonl(lines));
}

/// Rejects out-of-range values and duplicate ids. A weight pair with exactly
/// one nonzero side is a warning, or an error when strict.
inline BiasWeightSet load_bias_weights(const std::string& path, bool strict = false) {
  BiasWeightSet set;
  io::for_each_jsonl(path, [&](const json& rec, std::size_t lineno) {
    const std::string where = path + ":" + std::to_string(lineno);
    BiasWeight w;
    w.example_id = io::require<std::string>(rec, "id", where);
    w.w_start = io::require<double>(rec, "w_start", where);
    w.w_end = io::require<double>(rec, "w_end", where);
    for (double v : {w.w_start, w.w_end})
      if (!(v >= 0.0 && v <= 1.0)) throw ValidationError(where + ": weight outside [0, 1]");
    if ((w.w_start > 0.0) != (w.w_end > 0.0)) {
      const std::string msg = where + ": only one of w_start/w_end is nonzero for " + w.example_id;
      if (strict) throw ValidationError(msg);
      set.warnings.push_back(msg);
    }
    if (!set.weights.emplace(w.example_id, w).second)
      throw ValidationError(where + ": duplicate id " + w.example_id);
  });
  return set;
}

/// Throws when a weight names an id that the dataset does not contain.
inline void check_join(const BiasWeightSet& set, const std::vector<corpus::Example>& examples) {
  std::set<std::string> ids;
  for (const auto& ex : examples) ids.insert(ex.id);
  for (const auto& [id, w] : set.weights)
    if (!ids.count(id)) throw ValidationError("bias weight for unknown example id " + id);
}

// ---------------------------------------------------------------------------
// Ratio statistic

/// Fraction of examples with w_start > 0.
template <typename Range>
double bias_ratio(const Range& weights) {
  std::size_t n = 0, biased = 0;
  for (const auto& w : weights) {
    const BiasWeight& bw = [&]() -> const BiasWeight& {
      if constexpr (requires { w.second.w_start; })
        return w.second;
      else
        return w;
    }();
    ++n;
    if (bw.w_start > 0.0) ++biased;
  }
  if (n == 0) throw ValidationError("bias_ratio: empty collection");
  return static_cast<double>(biased) / static_cast<double>(n);
}

/// {domain: percentage} in domain order.
inline json bias_ratio_report(const std::map<std::string, std::vector<BiasWeight>>& by_domain) {
  json j = json::object();
  for (const auto& [domain, ws] : by_domain) j[domain] = 100.0 * bias_ratio(ws);
  return j;
}

inline std::string render_bias_ratio_table(const json& report) {
  std::ostringstream out;
  out << "Domain | % of Biased samples\n";
  out << std::fixed << std::setprecision(1);
  for (auto it = report.begin(); it != report.end(); ++it)
    out << it.key() << " | " << it.value().get<double>() << "%\n";
  return out.str();
}

}  // namespace qadebias::bias
