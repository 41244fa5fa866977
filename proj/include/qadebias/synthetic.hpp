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

// Desk-scale synthetic QA with a controllable lexical-overlap shortcut.
//
// Every context is a list of facts "ENTITY VERB NUMBER STAT UNIT ." and the
// question asks "How many STAT UNIT did ENTITY VERB?"; the answer is the
// "NUMBER STAT UNIT" phrase of the fact about ENTITY. Only the entity
// identifies the answer. The (STAT, UNIT) pair is the planted cue:
//
//   bias-aligned  the answer fact carries the question's cue pair, so it is
//                 also the sentence with maximal question overlap;
//   anti-biased   the answer fact carries an unrelated cue pair and another
//                 fact carries the question's cue pair, so a non-answer
//                 sentence has maximal overlap.
//
// Adversarial mode appends one more fact with a fresh entity, a different
// number and the question's cue pair.

#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "qadebias/common.hpp"
#include "qadebias/corpus.hpp"

namespace qadebias::corpus {

struct SyntheticConfig {
  std::size_t n_examples = 1000;
  std::size_t n_sentences = 4;
  double planted_bias_rate = 0.5;
  bool adversarial = false;
  std::string domain = "synthetic";
};

namespace detail {

inline constexpr std::array<const char*, 60> kEntities = {
    "Abbott",  "Barlow",  "Carver",  "Dalton",  "Easton",  "Fowler",  "Garvey",  "Hadley",
    "Ingram",  "Jarvis",  "Keller",  "Landry",  "Mercer",  "Nolan",   "Orton",   "Porter",
    "Quincy",  "Rhodes",  "Sutton",  "Tanner",  "Upton",   "Vance",   "Walsh",   "Yates",
    "Zeller",  "Ashby",   "Brandt",  "Colby",   "Draper",  "Ellery",  "Fenton",  "Gibson",
    "Harper",  "Irving",  "Jensen",  "Kendall", "Lowell",  "Marlow",  "Norris",  "Oakley",
    "Pruitt",  "Ramsey",  "Sawyer",  "Thorne",  "Ulrich",  "Varga",   "Whitman", "Yardley",
    "Ziegler", "Alcott",  "Bishop",  "Conway",  "Dempsey", "Emery",   "Foley",   "Griffin",
    "Hollis",  "Ivers",   "Joyner",  "Kirby"};

// (past tense used in facts, base form used in questions)
inline constexpr std::array<std::pair<const char*, const char*>, 6> kVerbs = {{
    {"gained", "gain"}, {"scored", "score"}, {"earned", "earn"},
    {"logged", "log"},  {"made", "make"},    {"recorded", "record"}}};

inline constexpr std::array<const char*, 6> kStats = {"rushing", "passing",   "receiving",
                                                      "kicking", "defensive", "bonus"};
inline constexpr std::array<const char*, 6> kUnits = {"yards",   "points", "goals",
                                                      "tackles", "runs",   "saves"};

struct Fact {
  std::string entity;
  std::string verb;
  int number = 0;
  std::size_t stat = 0;
  std::size_t unit = 0;

  std::string answer() const {
    return std::to_string(number) + " " + kStats[stat] + " " + kUnits[unit];
  }
  std::string sentence() const { return entity + " " + verb + " " + answer() + " ."; }
};

template <typename Rng>
std::size_t uniform_index(Rng& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

}  // namespace detail

/// Pure function of (config, seed).
inline std::vector<Example> generate_synthetic(const SyntheticConfig& cfg, std::uint64_t seed) {
  using namespace detail;
  if (cfg.n_sentences < 2) throw ValidationError("n_sentences must be >= 2");
  if (!(cfg.planted_bias_rate >= 0.0 && cfg.planted_bias_rate <= 1.0))
    throw ValidationError("planted_bias_rate must lie in [0, 1]");
  if (cfg.n_sentences + 1 > kEntities.size())
    throw ValidationError("n_sentences exceeds the entity pool");
  const std::size_t n_pairs = kStats.size() * kUnits.size();
  if (cfg.n_sentences + 1 > n_pairs) throw ValidationError("n_sentences exceeds the cue pool");

  std::mt19937_64 rng(seed);
  std::vector<Example> out;
  out.reserve(cfg.n_examples);
  for (std::size_t k = 0; k < cfg.n_examples; ++k) {
    // Distinct entities; cue pairs pairwise disjoint in both stat and unit
    // would limit n_sentences to 6, so only the pair itself is kept distinct.
    std::vector<std::size_t> ent_idx(kEntities.size());
    for (std::size_t i = 0; i < ent_idx.size(); ++i) ent_idx[i] = i;
    std::shuffle(ent_idx.begin(), ent_idx.end(), rng);
    std::vector<std::size_t> pair_idx(n_pairs);
    for (std::size_t i = 0; i < n_pairs; ++i) pair_idx[i] = i;
    std::shuffle(pair_idx.begin(), pair_idx.end(), rng);

    const std::size_t target = uniform_index(rng, cfg.n_sentences);
    const bool aligned = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < cfg.planted_bias_rate;
    const auto& verb = kVerbs[uniform_index(rng, kVerbs.size())];

    std::vector<Fact> facts(cfg.n_sentences);
    for (std::size_t i = 0; i < cfg.n_sentences; ++i) {
      facts[i].entity = kEntities[ent_idx[i]];
      facts[i].verb = (i == target) ? verb.first : kVerbs[uniform_index(rng, kVerbs.size())].first;
      facts[i].number = static_cast<int>(std::uniform_int_distribution<int>(1, 99)(rng));
      facts[i].stat = pair_idx[i] / kUnits.size();
      facts[i].unit = pair_idx[i] % kUnits.size();
    }
    const std::size_t q_stat = facts[target].stat;
    const std::size_t q_unit = facts[target].unit;

    if (!aligned) {
      // Move the question's cue to a distractor fact and give the answer fact
      // a cue sharing neither word with the question.
      std::size_t distractor = uniform_index(rng, cfg.n_sentences - 1);
      if (distractor >= target) ++distractor;
      std::vector<std::size_t> fresh;
      for (std::size_t p = 0; p < n_pairs; ++p) {
        const std::size_t s = p / kUnits.size(), u = p % kUnits.size();
        if (s == q_stat || u == q_unit) continue;
        bool used = false;
        for (std::size_t i = 0; i < cfg.n_sentences; ++i)
          if (i != target && i != distractor && facts[i].stat == s && facts[i].unit == u) used = true;
        if (!used) fresh.push_back(p);
      }
      const std::size_t pick = fresh[uniform_index(rng, fresh.size())];
      facts[distractor].stat = q_stat;
      facts[distractor].unit = q_unit;
      facts[target].stat = pick / kUnits.size();
      facts[target].unit = pick % kUnits.size();
    }
    // Keep the answer phrase unique inside the context.
    for (std::size_t i = 0; i < cfg.n_sentences; ++i) {
      if (i == target) continue;
      while (facts[i].stat == facts[target].stat && facts[i].unit == facts[target].unit &&
             facts[i].number == facts[target].number)
        facts[i].number = facts[i].number % 99 + 1;
    }

    Example ex;
    ex.id = cfg.domain + "-" + std::to_string(seed) + "-" + std::to_string(k);
    ex.domain = cfg.domain;
    ex.adversarial = cfg.adversarial;
    ex.question = std::string("How many ") + kStats[q_stat] + " " + kUnits[q_unit] + " did " +
                  facts[target].entity + " " + verb.second + "?";
    std::string context;
    for (std::size_t i = 0; i < cfg.n_sentences; ++i) {
      if (i == target) ex.answers.push_back({facts[i].answer(), text::length(context) + facts[i].entity.size() + facts[i].verb.size() + 2});
      context += facts[i].sentence();
      context += ' ';
    }
    if (cfg.adversarial) {
      Fact adv;
      adv.entity = kEntities[ent_idx[cfg.n_sentences]];
      adv.verb = verb.first;
      adv.stat = q_stat;
      adv.unit = q_unit;
      adv.number = static_cast<int>(std::uniform_int_distribution<int>(1, 99)(rng));
      const std::string gold = facts[target].answer();
      while (adv.answer().find(gold) != std::string::npos) adv.number = adv.number % 99 + 1;
      context += adv.sentence();
      context += ' ';
    }
    context.pop_back();
    ex.context = std::move(context);
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace qadebias::corpus
