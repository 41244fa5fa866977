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

#include <gtest/gtest.h>

#include <random>

#include "qadebias/common.hpp"
#include "qadebias/corpus.hpp"
#include "qadebias/synthetic.hpp"
#include "test_util.hpp"

namespace qadebias::corpus {
namespace {

using testing::fixture;
using testing::TempDir;

std::vector<std::string> texts(const std::vector<Token>& toks) {
  std::vector<std::string> out;
  for (const auto& t : toks) out.push_back(t.text);
  return out;
}

TEST(Tokenize, SplitsPunctuationIntoOwnTokens) {
  EXPECT_EQ(texts(tokenize("Super Bowl 50 took place.")),
            (std::vector<std::string>{"Super", "Bowl", "50", "took", "place", "."}));
  EXPECT_EQ(texts(tokenize("15-1")), (std::vector<std::string>{"15", "-", "1"}));
  EXPECT_EQ(texts(tokenize("Levi's")), (std::vector<std::string>{"Levi", "'", "s"}));
  EXPECT_TRUE(tokenize("").empty());
  EXPECT_TRUE(tokenize(" \t\n").empty());
}

TEST(Tokenize, OffsetsAreCodePoints) {
  const auto toks = tokenize("Café «Müller» x");
  ASSERT_EQ(texts(toks), (std::vector<std::string>{"Café", "«", "Müller", "»", "x"}));
  EXPECT_EQ(toks[0].char_start, 0u);
  EXPECT_EQ(toks[0].char_end, 4u);
  EXPECT_EQ(toks[2].char_start, 6u);
  EXPECT_EQ(toks[4].char_start, 14u);
}

TEST(Tokenize, TokensNeverContainWhitespaceAndSliceBack) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    std::string s;
    const auto n = rng() % 30;
    for (std::size_t k = 0; k < n; ++k) {
      const auto pick = rng() % 11;
      s += pick == 7 ? std::string("é") : std::string(1, "ab Z.,-x 9\t"[pick]);
    }
    std::size_t prev_end = 0;
    for (const auto& t : tokenize(s)) {
      EXPECT_FALSE(t.text.empty());
      EXPECT_EQ(text::substr(s, t.char_start, t.char_end), t.text);
      EXPECT_GE(t.char_start, prev_end);
      prev_end = t.char_end;
    }
  }
}

TEST(Align, CoversMinimalTokenRange) {
  const std::string ctx = "AB CD EF";
  const auto toks = tokenize(ctx);
  EXPECT_EQ(align_answer(Answer{"CD", 3}, toks, 8), (Span{1, 1}));
  EXPECT_EQ(align_answer(Answer{"AB CD", 0}, toks, 8), (Span{0, 1}));
  EXPECT_EQ(align_answer(Answer{"B", 1}, toks, 8), (Span{0, 0}));
  EXPECT_THROW(align_answer(Answer{"EF G", 6}, toks, 8), ValidationError);
  EXPECT_THROW(align_answer(Answer{" ", 2}, toks, 8), ValidationError);
}

TEST(Align, AnswerTextMatchesContextSlice) {
  const auto res = load_squad_json(fixture("squad_small.json"), {});
  for (const auto& ex : res.examples) {
    const auto tok = tokenize_example(ex);
    ASSERT_EQ(tok.gold_spans.size(), ex.answers.size());
    for (std::size_t k = 0; k < ex.answers.size(); ++k) {
      const auto sp = tok.gold_spans[k];
      EXPECT_LE(sp.start, sp.end);
      EXPECT_EQ(span_text(ex.context, tok, sp), ex.answers[k].text);
    }
  }
}

TEST(Sentences, BoundaryNeedsCapitalOrEnd) {
  EXPECT_EQ(split_sentences(tokenize("A b. C d.")).size(), 2u);
  EXPECT_EQ(split_sentences(tokenize("It was 4. 7 more came.")).size(), 1u);
  EXPECT_EQ(split_sentences(tokenize("Who? Me! Yes")).size(), 3u);
  EXPECT_TRUE(split_sentences({}).empty());
}

TEST(Sentences, PartitionTokens) {
  const auto toks = tokenize("Von Miller plays linebacker. Otto Baker plays the position of hamster.");
  const auto bounds = split_sentences(toks);
  ASSERT_EQ(bounds.size(), 2u);
  EXPECT_EQ(bounds[0], (Span{0, 4}));
  EXPECT_EQ(bounds[1], (Span{5, toks.size() - 1}));
  EXPECT_EQ(sentence_of(bounds, 3), 0u);
  EXPECT_EQ(sentence_of(bounds, 11), 1u);
}

TEST(VocabTest, ReservedIdsAndLowercaseLookup) {
  Example ex = testing::make_example("v1", "Who won?", "The Broncos won. The end.", "Broncos");
  const auto v = build_vocab({ex}, 1);
  EXPECT_EQ(v.tokens()[0], "[PAD]");
  EXPECT_EQ(v.id("[UNK]"), 1u);
  EXPECT_EQ(v.id("zebra"), Vocab::kUnk);
  EXPECT_EQ(v.id("BRONCOS"), v.id("broncos"));
  EXPECT_TRUE(v.contains("The"));
  // "the", ".", "won" occur twice; ties break alphabetically.
  EXPECT_EQ(v.tokens()[3], ".");
  EXPECT_EQ(v.tokens()[4], "the");
  EXPECT_EQ(v.tokens()[5], "won");
  const auto v2 = build_vocab({ex}, 2);
  EXPECT_EQ(v2.size(), 6u);
  EXPECT_THROW(build_vocab({ex}, 0), ValidationError);
}

TEST(VocabTest, FingerprintTracksEntriesAndSalt) {
  const auto a = Vocab::from_tokens({"[PAD]", "[UNK]", "[SEP]", "x"});
  const auto b = Vocab::from_tokens({"[PAD]", "[UNK]", "[SEP]", "y"});
  EXPECT_EQ(a.fingerprint("s"), a.fingerprint("s"));
  EXPECT_NE(a.fingerprint("s"), b.fingerprint("s"));
  EXPECT_NE(a.fingerprint("s"), a.fingerprint("t"));
  EXPECT_EQ(vocab_from_json(vocab_to_json(a)), a);
  EXPECT_THROW(Vocab::from_tokens({"x"}), ValidationError);
}

TEST(Loaders, SquadFixture) {
  const auto res = load_squad_json(fixture("squad_small.json"), {"squad", false, false});
  ASSERT_EQ(res.examples.size(), 3u);
  EXPECT_TRUE(res.rejections.empty());
  EXPECT_EQ(res.examples[1].answers.size(), 2u);
  EXPECT_EQ(res.examples[0].domain, "squad");
  EXPECT_EQ(res.examples[2].context.substr(17, 10), "linebacker");
}

TEST(Loaders, BadOffsetRejectedWithDiagnosticOrFatalWhenStrict) {
  const auto res = load_squad_json(fixture("squad_bad_offset.json"), {});
  ASSERT_EQ(res.examples.size(), 1u);
  EXPECT_EQ(res.examples[0].id, "ok1");
  ASSERT_EQ(res.rejections.size(), 1u);
  EXPECT_EQ(res.rejections[0].id, "bad1");
  EXPECT_NE(res.rejections[0].reason.find("answer_start 3"), std::string::npos);
  LoadOptions strict;
  strict.strict = true;
  EXPECT_THROW(load_squad_json(fixture("squad_bad_offset.json"), strict), ValidationError);
}

TEST(Loaders, MissingFieldsAreParseErrors) {
  EXPECT_THROW(parse_squad_json(json::parse(R"({"version": "1.1"})"), {}), ParseError);
  EXPECT_THROW(parse_squad_json(json::parse(R"({"data": [{"paragraphs": [{"qas": []}]}]})"), {}), ParseError);
  EXPECT_THROW(load_squad_json(fixture("does_not_exist.json"), {}), Error);
}

TEST(Loaders, MrqaFixture) {
  LoadOptions opts;
  opts.domain = "hotpotqa";
  const auto res = load_mrqa_jsonl(fixture("mrqa_small.jsonl"), opts);
  ASSERT_EQ(res.examples.size(), 4u);
  for (const auto& ex : res.examples) EXPECT_EQ(ex.domain, "hotpotqa");
  EXPECT_EQ(res.examples[0].answers[0].text, "Arthur's Magazine");
  EXPECT_EQ(res.examples[1].answers[0].text, "1989");
  ASSERT_EQ(res.examples[2].answers.size(), 2u);
  EXPECT_EQ(res.examples[2].answers[1].char_start, 50u);
  EXPECT_EQ(res.examples[3].answers[0].text, "Delhi");
}

TEST(Loaders, MrqaRequiresHeader) {
  TempDir dir("mrqa");
  io::write_file(dir.file("noheader.jsonl"),
                 R"({"context": "x y", "qas": [{"qid": "a", "question": "q", "detected_answers": []}]})" "\n");
  EXPECT_THROW(load_mrqa_jsonl(dir.file("noheader.jsonl"), {}), ParseError);
  io::write_file(dir.file("empty.jsonl"), "");
  EXPECT_THROW(load_mrqa_jsonl(dir.file("empty.jsonl"), {}), ParseError);
}

TEST(Loaders, CanonicalRoundTrip) {
  TempDir dir("canon");
  auto res = load_squad_json(fixture("squad_small.json"), {"squad", true, false});
  save_dataset(dir.file("d.jsonl"), res.examples);
  const auto back = load_dataset(dir.file("d.jsonl"), true);
  EXPECT_EQ(back.examples, res.examples);
  EXPECT_TRUE(back.examples[0].adversarial);
}

TEST(Loaders, DuplicateIdsRejected) {
  auto ex = testing::make_example("dup", "q?", "a b c", "b");
  TempDir dir("dup");
  save_dataset(dir.file("d.jsonl"), {ex, ex});
  const auto res = load_dataset(dir.file("d.jsonl"));
  EXPECT_EQ(res.examples.size(), 1u);
  ASSERT_EQ(res.rejections.size(), 1u);
  EXPECT_EQ(res.rejections[0].reason, "duplicate id");
  EXPECT_THROW(load_dataset(dir.file("d.jsonl"), true), ValidationError);
}

TEST(Synthetic, DeterministicAndValid) {
  SyntheticConfig cfg;
  cfg.n_examples = 200;
  const auto a = generate_synthetic(cfg, 11);
  const auto b = generate_synthetic(cfg, 11);
  const auto c = generate_synthetic(cfg, 12);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  for (const auto& ex : a) {
    EXPECT_EQ(validation_problem(ex), "");
    EXPECT_EQ(ex.domain, "synthetic");
    EXPECT_FALSE(ex.adversarial);
    const auto tok = tokenize_example(ex);
    EXPECT_EQ(tok.sentence_bounds.size(), cfg.n_sentences);
  }
}

// Overlap of the question's content words with each sentence.
std::vector<std::size_t> sentence_overlaps(const Example& ex) {
  const auto tok = tokenize_example(ex);
  std::set<std::string> q;
  for (const auto& t : tok.question_tokens) q.insert(text::lower(t.text));
  std::vector<std::size_t> out;
  for (const auto& s : tok.sentence_bounds) {
    std::size_t n = 0;
    for (std::size_t k = s.start; k <= s.end; ++k)
      if (text::has_alnum(tok.context_tokens[k].text) && q.count(text::lower(tok.context_tokens[k].text))) ++n;
    out.push_back(n);
  }
  return out;
}

TEST(Synthetic, BiasRateControlsWhichSentenceOverlapsMost) {
  SyntheticConfig cfg;
  cfg.n_examples = 100;
  for (double rate : {1.0, 0.0}) {
    cfg.planted_bias_rate = rate;
    for (const auto& ex : generate_synthetic(cfg, 5)) {
      const auto tok = tokenize_example(ex);
      const auto gold_sentence = sentence_of(tok.sentence_bounds, tok.gold_spans[0].start);
      const auto ov = sentence_overlaps(ex);
      const auto best = *std::max_element(ov.begin(), ov.end());
      if (rate == 1.0) {
        EXPECT_EQ(ov[gold_sentence], best) << ex.id;
      } else {
        EXPECT_LT(ov[gold_sentence], best) << ex.id;
      }
    }
  }
}

TEST(Synthetic, AdversarialDistractorIsLastAndHoldsNoGold) {
  SyntheticConfig cfg;
  cfg.n_examples = 50;
  cfg.adversarial = true;
  for (const auto& ex : generate_synthetic(cfg, 3)) {
    EXPECT_TRUE(ex.adversarial);
    const auto tok = tokenize_example(ex);
    ASSERT_EQ(tok.sentence_bounds.size(), cfg.n_sentences + 1);
    EXPECT_LT(sentence_of(tok.sentence_bounds, tok.gold_spans[0].start), cfg.n_sentences);
  }
}

TEST(Synthetic, RejectsBadConfig) {
  SyntheticConfig cfg;
  cfg.planted_bias_rate = 1.5;
  EXPECT_THROW(generate_synthetic(cfg, 0), ValidationError);
  cfg.planted_bias_rate = 0.5;
  cfg.n_sentences = 1;
  EXPECT_THROW(generate_synthetic(cfg, 0), ValidationError);
}

}  // namespace
}  // namespace qadebias::corpus
