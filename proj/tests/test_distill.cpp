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

#include "oracle_values.hpp"
#include "qadebias/distill.hpp"
#include "qadebias/synthetic.hpp"
#include "test_util.hpp"

namespace qadebias::distill {
namespace {

namespace oracle = testing::oracle;
using testing::TempDir;

std::vector<double> vec(const auto& a) { return std::vector<double>(a.begin(), a.end()); }

std::vector<double> random_distribution(std::mt19937_64& rng, std::size_t n, bool with_zeros) {
  std::gamma_distribution<double> g(0.5, 1.0);
  std::vector<double> p(n);
  double s = 0.0;
  for (auto& v : p) s += (v = (with_zeros && rng() % 4 == 0) ? 0.0 : g(rng) + 1e-12);
  if (s == 0.0) {
    p[0] = 1.0;
    return p;
  }
  for (auto& v : p) v /= s;
  return p;
}

TEST(Smooth, WorkedExamples) {
  const auto q = smooth_distribution({0.7, 0.2, 0.1, 0.0}, 1.0);
  for (int j = 0; j < 3; ++j) EXPECT_NEAR(q[j], 1.0 / 3.0, 1e-15);
  EXPECT_EQ(q[3], 0.0);
  const std::vector<double> p{0.7, 0.2, 0.1};
  EXPECT_EQ(smooth_distribution(p, 0.0), p);
  const auto h = smooth_distribution(p, 0.5);
  const auto t = smooth_distribution(p, 0.3);
  for (int j = 0; j < 3; ++j) {
    EXPECT_NEAR(h[j], oracle::kSmoothBeta05[j], 1e-14);
    EXPECT_NEAR(t[j], oracle::kSmoothBeta03[j], 1e-14);
  }
}

TEST(Smooth, RejectsBadInput) {
  EXPECT_THROW(smooth_distribution({0.5, 0.5}, 1.5), ValidationError);
  EXPECT_THROW(smooth_distribution({0.5, 0.6}, 0.5), ValidationError);
  EXPECT_THROW(smooth_distribution({}, 0.5), ValidationError);
}

TEST(Smooth, PropertiesOverRandomDistributions) {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 300; ++trial) {
    const auto p = random_distribution(rng, 1 + rng() % 40, trial % 2 == 0);
    double prev_entropy = -1.0;
    for (int b = 0; b <= 10; ++b) {
      const double beta = b / 10.0;
      const auto q = smooth_distribution(p, beta);
      EXPECT_TRUE(numeric::is_distribution(q, 1e-9));
      for (std::size_t j = 0; j < p.size(); ++j) {
        EXPECT_EQ(q[j] == 0.0, p[j] == 0.0);
        for (std::size_t k = 0; k < p.size(); ++k)
          if (p[j] > p[k] && beta < 1.0) {
            EXPECT_GE(q[j], q[k]);
          }
      }
      const double h = numeric::entropy(q);
      EXPECT_GE(h, prev_entropy - 1e-12);
      prev_entropy = h;
    }
  }
}

TEST(KdLoss, UniformTargetsOnEqualLogits) {
  const std::vector<double> t(4, 0.25), z(4, 0.0);
  EXPECT_NEAR(kd_loss(t, t, z, z), std::log(4.0), 1e-15);
}

TEST(KdLoss, EqualsEntropyWhenStudentMatchesTarget) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const auto ts = random_distribution(rng, 12, false);
    const auto te = random_distribution(rng, 12, false);
    std::vector<double> zs(12), ze(12);
    for (int j = 0; j < 12; ++j) zs[j] = std::log(ts[j]) + 3.0, ze[j] = std::log(te[j]) - 1.0;
    EXPECT_NEAR(kd_loss(ts, te, zs, ze), 0.5 * (numeric::entropy(ts) + numeric::entropy(te)), 1e-10);
  }
}

TEST(KdLoss, MatchesHighPrecisionReference) {
  const auto ts = vec(oracle::kKdTStart), te = vec(oracle::kKdTEnd);
  const auto zs = vec(oracle::kKdZStart), ze = vec(oracle::kKdZEnd);
  EXPECT_NEAR(kd_loss(ts, te, zs, ze), oracle::kKdLoss, 1e-13);
  const auto g = kd_loss_gradient(ts, te, zs, ze);
  for (int j = 0; j < 8; ++j) EXPECT_NEAR(g.start[j], oracle::kKdGradStart[j], 1e-14);
  EXPECT_THROW(kd_loss(ts, te, zs, {1.0}), ValidationError);
}

TEST(KdLoss, GradientMatchesFiniteDifferencesAndSumsToZero) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> normal(0.0, 2.0);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + rng() % 20;
    const auto ts = random_distribution(rng, n, true);
    const auto te = random_distribution(rng, n, true);
    std::vector<double> zs(n), ze(n);
    for (auto& v : zs) v = normal(rng);
    for (auto& v : ze) v = normal(rng);
    const auto g = kd_loss_gradient(ts, te, zs, ze);
    double ss = 0.0, se = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      ss += g.start[j];
      se += g.end[j];
      const double h = 1e-6;
      auto up = zs, down = zs;
      up[j] += h;
      down[j] -= h;
      const double fd = (kd_loss(ts, te, up, ze) - kd_loss(ts, te, down, ze)) / (2 * h);
      EXPECT_NEAR(fd, g.start[j], 1e-8);
    }
    EXPECT_NEAR(ss, 0.0, 1e-14);
    EXPECT_NEAR(se, 0.0, 1e-14);
  }
}

TEST(LossModes, ParseAndPrint) {
  for (auto m : {LossMode::kOneHot, LossMode::kKd, LossMode::kKdDebiased}) EXPECT_EQ(parse_loss_mode(to_string(m)), m);
  EXPECT_THROW(parse_loss_mode("soft"), ValidationError);
}

spanmodel::SpanModelConfig tiny_config() {
  spanmodel::SpanModelConfig c;
  c.hidden_dim = 16;
  c.n_layers = 1;
  c.n_heads = 2;
  c.ffn_dim = 32;
  c.max_seq_len = 64;
  c.max_answer_len = 8;
  c.learning_rate = 3e-3;
  c.batch_size = 8;
  c.epochs = 1;
  c.seed = 3;
  return c;
}

std::vector<corpus::Example> domain_data(const std::string& domain, std::size_t n, std::uint64_t seed) {
  corpus::SyntheticConfig sc;
  sc.n_examples = n;
  sc.domain = domain;
  return corpus::generate_synthetic(sc, seed);
}

// Two domains, each with its own teacher cache over the shared vocabulary.
struct TwoDomains {
  TempDir dir{"distill"};
  std::vector<corpus::Example> a = domain_data("alpha", 24, 1);
  std::vector<corpus::Example> b = domain_data("beta", 16, 2);
  DistillPlan plan;

  TwoDomains() {
    std::vector<corpus::Example> all = a;
    all.insert(all.end(), b.begin(), b.end());
    const auto vocab = corpus::build_vocab(all, 1);
    const auto fp = spanmodel::tokenization_fingerprint(vocab, tiny_config().max_seq_len);
    for (auto [name, data, seed] : {std::tuple{"alpha", &a, 11u}, std::tuple{"beta", &b, 12u}}) {
      auto cfg = tiny_config();
      cfg.seed = seed;
      const auto teacher = spanmodel::train_teacher(cfg, vocab, *data);
      corpus::save_dataset(dir.file(std::string(name) + ".jsonl"), *data);
      spanmodel::write_teacher_cache(dir.file(std::string(name) + ".cache.jsonl"),
                                     spanmodel::cache_teacher_outputs(teacher.model, *data, fp));
      bias::BiasConfig bc;
      bc.window = 3;
      bc.temperature = 0.25;
      bias::write_bias_weights(dir.file(std::string(name) + ".bias.jsonl"), bias::bias_weights_for(*data, bc, 64));
      plan.domains.push_back({name, dir.file(std::string(name) + ".jsonl"), dir.file(std::string(name) + ".cache.jsonl"),
                              dir.file(std::string(name) + ".bias.jsonl")});
    }
    plan.student = tiny_config();
    plan.student.seed = 21;
    plan.seed = 31;
  }
};

TEST(Routing, EachExampleUsesItsDomainTeacher) {
  TwoDomains s;
  const auto in = load_student_inputs(s.plan);
  ASSERT_EQ(in.examples.size(), 40u);
  ASSERT_EQ(in.caches.size(), 2u);
  const auto vocab = corpus::build_vocab(in.examples, 1);
  spanmodel::SpanModel student(s.plan.student, vocab);
  const auto data = build_student_items(s.plan, student, in);
  ASSERT_EQ(data.items.size(), 40u);
  for (std::size_t k = 0; k < data.items.size(); ++k) {
    const auto& ex = in.examples[k];
    EXPECT_EQ(data.teacher_of[k], route_teacher(ex, s.plan).teacher_cache);
    EXPECT_NE(data.teacher_of[k].find(ex.domain == "alpha" ? "alpha.cache" : "beta.cache"), std::string::npos);
  }
  corpus::Example stray = s.a[0];
  stray.domain = "gamma";
  EXPECT_THROW(route_teacher(stray, s.plan), ValidationError);
}

TEST(Routing, MissingDomainFailsBeforeTraining) {
  TwoDomains s;
  auto in = load_student_inputs(s.plan);
  auto plan = s.plan;
  plan.domains.pop_back();
  bool trained = false;
  EXPECT_THROW(train_student(plan, in, [&](std::size_t, const spanmodel::SpanModel&) { trained = true; }),
               ValidationError);
  EXPECT_FALSE(trained);
}

TEST(Routing, DatasetDomainMustMatchPlan) {
  TwoDomains s;
  auto plan = s.plan;
  std::swap(plan.domains[0].dataset, plan.domains[1].dataset);
  EXPECT_THROW(load_student_inputs(plan), ValidationError);
}

TEST(Student, ZeroWeightsReduceDebiasedToPlainKd) {
  TwoDomains s;
  auto in = load_student_inputs(s.plan);
  for (auto& [domain, set] : in.weights)
    for (auto& [id, w] : set.weights) w.w_start = w.w_end = 0.0;
  auto kd_plan = s.plan;
  kd_plan.mode = LossMode::kKd;
  const auto debiased = train_student(s.plan, in);
  const auto plain = train_student(kd_plan, in);
  EXPECT_TRUE(debiased.model.params() == plain.model.params());
  EXPECT_EQ(debiased.log.epochs[0].mean_loss, plain.log.epochs[0].mean_loss);
}

TEST(Student, NonzeroWeightsSmoothTargets) {
  TwoDomains s;
  const auto in = load_student_inputs(s.plan);
  const auto vocab = corpus::build_vocab(in.examples, 1);
  spanmodel::SpanModel student(s.plan.student, vocab);
  auto kd_plan = s.plan;
  kd_plan.mode = LossMode::kKd;
  const auto deb = build_student_items(s.plan, student, in);
  const auto kd = build_student_items(kd_plan, student, in);
  std::size_t changed = 0;
  for (std::size_t k = 0; k < deb.items.size(); ++k) {
    const auto& ex = in.examples[k];
    const auto& w = in.weights.at(ex.domain).weights.at(ex.id);
    if (w.w_start > 0.0) {
      ++changed;
      EXPECT_GE(numeric::entropy(deb.items[k].t_start), numeric::entropy(kd.items[k].t_start) - 1e-12);
    } else {
      EXPECT_EQ(deb.items[k].t_start, kd.items[k].t_start);
    }
  }
  EXPECT_GT(changed, 0u);
}

TEST(Student, MissingWeightsCountAsZero) {
  TwoDomains s;
  auto in = load_student_inputs(s.plan);
  in.weights.erase("beta");
  const auto vocab = corpus::build_vocab(in.examples, 1);
  spanmodel::SpanModel student(s.plan.student, vocab);
  EXPECT_EQ(build_student_items(s.plan, student, in).missing_weights, s.b.size());
}

TEST(Student, OneHotModeEqualsTeacherObjective) {
  const auto data = domain_data("alpha", 30, 4);
  const auto vocab = corpus::build_vocab(data, 1);
  DistillPlan plan;
  plan.domains.push_back({"alpha", "unused", "", ""});
  plan.mode = LossMode::kOneHot;
  plan.student = tiny_config();
  plan.seed = plan.student.seed;
  StudentInputs in;
  in.examples = data;
  const auto student = train_student(plan, in);
  const auto teacher = spanmodel::train_teacher(plan.student, vocab, data);
  EXPECT_TRUE(student.model.params() == teacher.model.params());
}

TEST(Student, OneHotMixMovesMassToGold) {
  TwoDomains s;
  const auto in = load_student_inputs(s.plan);
  const auto vocab = corpus::build_vocab(in.examples, 1);
  spanmodel::SpanModel student(s.plan.student, vocab);
  auto plan = s.plan;
  plan.onehot_mix = 1.0;
  const auto items = build_student_items(plan, student, in).items;
  const auto tok = corpus::tokenize_example(in.examples[0]);
  EXPECT_EQ(items[0].t_start, spanmodel::one_hot(items[0].t_start.size(), tok.gold_spans[0].start));
}

TEST(Student, DeterministicAndFingerprintChecked) {
  TwoDomains s;
  const auto a = train_student(s.plan);
  const auto b = train_student(s.plan);
  EXPECT_EQ(spanmodel::checkpoint_to_json(a.model).dump(), spanmodel::checkpoint_to_json(b.model).dump());
  auto plan = s.plan;
  plan.student.max_seq_len = 65;
  EXPECT_THROW(load_student_inputs(plan), FingerprintError);
}

TEST(Plan, JsonRoundTripAndRelativePaths) {
  TempDir dir("plan");
  DistillPlan p;
  p.domains.push_back({"squad", "data/squad.jsonl", "caches/squad.jsonl", "bias/squad.jsonl"});
  p.seed = 4;
  p.onehot_mix = 0.25;
  io::write_file(dir.file("plan.json"), to_json(p).dump());
  const auto back = load_plan(dir.file("plan.json"));
  EXPECT_EQ(back.domains[0].dataset, dir.file("data/squad.jsonl"));
  EXPECT_EQ(back.mode, LossMode::kKdDebiased);
  EXPECT_EQ(back.seed, 4u);
  EXPECT_EQ(back.onehot_mix, 0.25);
  auto dup = p;
  dup.domains.push_back(p.domains[0]);
  EXPECT_THROW(dup.validate(), ValidationError);
  auto nocache = p;
  nocache.domains[0].teacher_cache.clear();
  EXPECT_THROW(nocache.validate(), ValidationError);
  nocache.mode = LossMode::kOneHot;
  EXPECT_NO_THROW(nocache.validate());
}

}  // namespace
}  // namespace qadebias::distill
