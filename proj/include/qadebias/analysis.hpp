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

// Rule-based error taxonomy and the error-distribution and error-reduction
// reports.
//
// Rules, first match wins:
//   unlocated   prediction not found in the context      -> OTHER
//   R1          a gold answer or the prediction has a digit -> NUMERICAL
//   R2          question/sentence content overlap >= theta  -> LEXICAL
//   R3          a capitalized multi-token question mention
//               is missing from the prediction's sentence   -> ENTITY
//   R4          anything else                               -> OTHER

#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <iomanip>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "qadebias/bias.hpp"
#include "qadebias/common.hpp"
#include "qadebias/corpus.hpp"
#include "qadebias/metrics.hpp"
#include "qadebias/spanmodel.hpp"

namespace qadebias::analysis {

enum class Category { kLexical, kNumerical, kEntity, kOther };

inline constexpr std::array<Category, 4> kCategories = {Category::kLexical, Category::kNumerical,
                                                        Category::kEntity, Category::kOther};

inline std::string to_string(Category c) {
  switch (c) {
    case Category::kLexical: return "LEXICAL";
    case Category::kNumerical: return "NUMERICAL";
    case Category::kEntity: return "ENTITY";
    case Category::kOther: return "OTHER";
  }
  return "?";
}

inline Category parse_category(const std::string& s) {
  for (auto c : kCategories)
    if (to_string(c) == s) return c;
  throw ParseError("unknown error category '" + s + "'");
}

/// Row labels used in the rendered tables.
inline std::string display_name(Category c, bool table6) {
  switch (c) {
    case Category::kLexical: return "Lexical bias";
    case Category::kNumerical: return table6 ? "Numerical reasoning errors" : "Numerical reasoning";
    case Category::kEntity: return table6 ? "Entity recognition errors" : "Entity recognition";
    case Category::kOther: return "Other";
  }
  return "?";
}

struct AnalysisConfig {
  double theta = 0.3;
  std::set<std::string> stopwords = bias::default_stopwords();
};

struct ErrorRecord {
  std::string example_id;
  std::string question;
  std::vector<std::string> golds;
  std::string prediction;
  std::optional<std::size_t> sentence_index;
  Category category = Category::kOther;
  std::string rule_fired;
};

namespace detail {

/// Token index where the first occurrence of needle starts, if any.
inline std::optional<std::size_t> locate(const std::string& context, const std::vector<corpus::Token>& tokens,
                                         const std::string& needle) {
  if (needle.find_first_not_of(" \t\n\r") == std::string::npos) return std::nullopt;
  const auto pos = context.find(needle);
  if (pos == std::string::npos) return std::nullopt;
  const std::size_t cp = text::length(std::string_view(context).substr(0, pos));
  for (std::size_t t = 0; t < tokens.size(); ++t)
    if (tokens[t].char_end > cp) return t;
  return std::nullopt;
}

/// Runs of >= 2 consecutive capitalized question tokens. A leading wh-word or
/// stopword is not part of a mention.
inline std::vector<std::vector<std::string>> entity_mentions(const std::vector<corpus::Token>& q,
                                                             const std::set<std::string>& stopwords) {
  std::vector<std::vector<std::string>> out;
  std::vector<std::string> run;
  auto flush = [&] {
    if (run.size() >= 2) out.push_back(run);
    run.clear();
  };
  for (std::size_t k = 0; k < q.size(); ++k) {
    const bool skip = k == 0 && stopwords.count(text::lower(q[k].text));
    if (!skip && text::is_upper_initial(q[k].text))
      run.push_back(text::lower(q[k].text));
    else
      flush();
  }
  flush();
  return out;
}

inline bool contains_sequence(const std::vector<std::string>& hay, const std::vector<std::string>& needle) {
  if (needle.size() > hay.size()) return false;
  for (std::size_t i = 0; i + needle.size() <= hay.size(); ++i) {
    bool ok = true;
    for (std::size_t k = 0; k < needle.size() && ok; ++k) ok = hay[i + k] == needle[k];
    if (ok) return true;
  }
  return false;
}

}  // namespace detail

/// Classifies a wrong prediction. Throws when the prediction is correct.
inline ErrorRecord categorize_error(const corpus::Example& ex, const corpus::TokenizedExample& tok,
                                    const std::string& prediction, const AnalysisConfig& cfg = {}) {
  if (metrics::score_example(prediction, ex.answers).exact_match == 1)
    throw ValidationError(ex.id + ": categorize_error called on a correct prediction");
  ErrorRecord r;
  r.example_id = ex.id;
  r.question = ex.question;
  for (const auto& a : ex.answers) r.golds.push_back(a.text);
  r.prediction = prediction;

  const auto at = detail::locate(ex.context, tok.context_tokens, prediction);
  if (!at) {
    r.category = Category::kOther;
    r.rule_fired = "unlocated";
    return r;
  }
  const std::size_t s = corpus::sentence_of(tok.sentence_bounds, *at);
  r.sentence_index = s;

  bool digit = text::has_digit(prediction);
  for (const auto& g : r.golds) digit = digit || text::has_digit(g);
  if (digit) {
    r.category = Category::kNumerical;
    r.rule_fired = "R1_digit";
    return r;
  }

  const auto& b = tok.sentence_bounds.at(s);
  const std::vector<corpus::Token> sentence(tok.context_tokens.begin() + static_cast<std::ptrdiff_t>(b.start),
                                            tok.context_tokens.begin() + static_cast<std::ptrdiff_t>(b.end + 1));
  const auto q = bias::content_tokens(tok.question_tokens, cfg.stopwords);
  const auto sc = bias::content_tokens(sentence, cfg.stopwords);
  if (!q.empty()) {
    std::size_t overlap = 0;
    for (const auto& w : q) overlap += sc.count(w);
    if (static_cast<double>(overlap) / static_cast<double>(q.size()) >= cfg.theta) {
      r.category = Category::kLexical;
      r.rule_fired = "R2_overlap";
      return r;
    }
  }

  std::vector<std::string> sentence_words;
  for (const auto& t : sentence) sentence_words.push_back(text::lower(t.text));
  for (const auto& m : detail::entity_mentions(tok.question_tokens, cfg.stopwords)) {
    if (!detail::contains_sequence(sentence_words, m)) {
      r.category = Category::kEntity;
      r.rule_fired = "R3_entity";
      return r;
    }
  }
  r.category = Category::kOther;
  r.rule_fired = "R4_other";
  return r;
}

/// Records for every example whose prediction has EM 0; a missing prediction
/// counts as the empty string.
inline std::vector<ErrorRecord> analyze_errors(const std::vector<corpus::Example>& examples,
                                               const metrics::Predictions& preds, const AnalysisConfig& cfg = {}) {
  std::vector<ErrorRecord> out;
  for (const auto& ex : examples) {
    const auto it = preds.find(ex.id);
    const std::string p = it == preds.end() ? std::string() : it->second;
    if (metrics::score_example(p, ex.answers).exact_match == 1) continue;
    out.push_back(categorize_error(ex, corpus::tokenize_example(ex), p, cfg));
  }
  return out;
}

/// Uniform seeded sample of n records, kept in input order.
inline std::vector<ErrorRecord> sample_errors(const std::vector<ErrorRecord>& records, std::size_t n,
                                              std::uint64_t seed) {
  if (n >= records.size()) return records;
  std::mt19937_64 rng(seed);
  auto order = spanmodel::seeded_permutation(records.size(), rng);
  order.resize(n);
  std::sort(order.begin(), order.end());
  std::vector<ErrorRecord> out;
  for (auto k : order) out.push_back(records[k]);
  return out;
}

inline json to_json(const ErrorRecord& r) {
  return {{"id", r.example_id}, {"category", to_string(r.category)}, {"rule_fired", r.rule_fired},
          {"question", r.question}, {"prediction", r.prediction}, {"gold", r.golds}};
}

inline ErrorRecord error_record_from_json(const json& j, const std::string& where) {
  ErrorRecord r;
  r.example_id = io::require<std::string>(j, "id", where);
  r.category = parse_category(io::require<std::string>(j, "category", where));
  r.rule_fired = io::require<std::string>(j, "rule_fired", where);
  r.question = io::require<std::string>(j, "question", where);
  r.prediction = io::require<std::string>(j, "prediction", where);
  r.golds = io::require<std::vector<std::string>>(j, "gold", where);
  return r;
}

// ---------------------------------------------------------------------------
// Error distribution

struct ErrorDistribution {
  std::map<Category, std::size_t> counts;
  std::size_t total = 0;

  double percent(Category c) const {
    if (total == 0) return 0.0;
    const auto it = counts.find(c);
    return it == counts.end() ? 0.0 : 100.0 * static_cast<double>(it->second) / static_cast<double>(total);
  }
  std::size_t count(Category c) const {
    const auto it = counts.find(c);
    return it == counts.end() ? 0 : it->second;
  }
};

inline ErrorDistribution error_distribution(const std::vector<ErrorRecord>& records) {
  ErrorDistribution d;
  for (auto c : kCategories) d.counts[c] = 0;
  for (const auto& r : records) ++d.counts[r.category];
  d.total = records.size();
  return d;
}

inline json to_json(const ErrorDistribution& d) {
  json rows = json::array();
  for (auto c : kCategories)
    rows.push_back({{"category", to_string(c)}, {"count", d.count(c)}, {"percent", d.percent(c)}});
  return {{"rows", rows}, {"total", d.total}};
}

inline std::string format_percent(double v) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(1) << v << "%";
  return s.str();
}

/// "Error category | Count | Percentage"; the OTHER row is shown only when nonzero.
inline std::string render_table2(const ErrorDistribution& d) {
  std::ostringstream out;
  out << "Error category | Count | Percentage\n";
  for (auto c : kCategories) {
    if (c == Category::kOther && d.count(c) == 0) continue;
    out << display_name(c, false) << " | " << d.count(c) << " | " << format_percent(d.percent(c)) << "\n";
  }
  out << "Total | " << d.total << " | " << format_percent(d.total ? 100.0 : 0.0) << "\n";
  return out.str();
}

// ---------------------------------------------------------------------------
// Error reduction

struct ReductionRow {
  std::size_t baseline_errors = 0;
  std::size_t corrected = 0;
  std::size_t still_wrong = 0;
  std::size_t regressed = 0;

  double reduction_percent() const {
    return baseline_errors == 0 ? 0.0
                                : 100.0 * static_cast<double>(corrected) / static_cast<double>(baseline_errors);
  }
};

struct ReductionReport {
  std::map<Category, ReductionRow> rows;
  ReductionRow total;

  /// Totals as column sums of the rows.
  void recompute_total() {
    total = {};
    for (const auto& [c, r] : rows) {
      total.baseline_errors += r.baseline_errors;
      total.corrected += r.corrected;
      total.still_wrong += r.still_wrong;
      total.regressed += r.regressed;
    }
  }
};

/// Baseline errors are categorized from the baseline prediction; regressions
/// (baseline right, debiased wrong) from the debiased prediction.
inline ReductionReport error_reduction_report(const std::vector<corpus::Example>& examples,
                                              const metrics::Predictions& baseline,
                                              const metrics::Predictions& debiased, const AnalysisConfig& cfg = {}) {
  ReductionReport rep;
  for (auto c : kCategories) rep.rows[c] = {};
  auto get = [](const metrics::Predictions& p, const std::string& id) {
    const auto it = p.find(id);
    return it == p.end() ? std::string() : it->second;
  };
  for (const auto& ex : examples) {
    const std::string pb = get(baseline, ex.id);
    const std::string pd = get(debiased, ex.id);
    const int em_b = metrics::score_example(pb, ex.answers).exact_match;
    const int em_d = metrics::score_example(pd, ex.answers).exact_match;
    if (em_b == 0) {
      const auto rec = categorize_error(ex, corpus::tokenize_example(ex), pb, cfg);
      auto& row = rep.rows[rec.category];
      ++row.baseline_errors;
      if (em_d == 1)
        ++row.corrected;
      else
        ++row.still_wrong;
    } else if (em_d == 0) {
      ++rep.rows[categorize_error(ex, corpus::tokenize_example(ex), pd, cfg).category].regressed;
    }
  }
  rep.recompute_total();
  return rep;
}

inline json to_json(const ReductionReport& rep) {
  auto row_json = [](const std::string& name, const ReductionRow& r) {
    return json{{"category", name},
                {"baseline_errors", r.baseline_errors},
                {"errors_corrected", r.corrected},
                {"still_wrong", r.still_wrong},
                {"regressed", r.regressed},
                {"reduction_percent", r.reduction_percent()}};
  };
  json rows = json::array();
  for (const auto& [c, r] : rep.rows) rows.push_back(row_json(to_string(c), r));
  return {{"rows", rows}, {"total", row_json("TOTAL", rep.total)}};
}

/// "Error type | Baseline errors | Errors corrected | Reduction (%)"; the
/// OTHER row is shown only when it has baseline errors.
inline std::string render_table6(const ReductionReport& rep) {
  std::ostringstream out;
  out << "Error type | Baseline errors | Errors corrected | Reduction (%)\n";
  for (auto c : kCategories) {
    const auto it = rep.rows.find(c);
    const ReductionRow r = it == rep.rows.end() ? ReductionRow{} : it->second;
    if (c == Category::kOther && r.baseline_errors == 0) continue;
    out << display_name(c, true) << " | " << r.baseline_errors << " | " << r.corrected << " | "
        << format_percent(r.reduction_percent()) << "\n";
  }
  out << "Total | " << rep.total.baseline_errors << " | " << rep.total.corrected << " | "
      << format_percent(rep.total.reduction_percent()) << "\n";
  return out.str();
}

}  // namespace qadebias::analysis
