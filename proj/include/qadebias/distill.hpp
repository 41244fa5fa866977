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

// Confidence-regularized distillation: teacher smoothing by bias weight,
// soft-target loss and gradient, per-domain teacher routing and student
// training.

#pragma once

#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "qadebias/bias.hpp"
#include "qadebias/common.hpp"
#include "qadebias/corpus.hpp"
#include "qadebias/spanmodel.hpp"

namespace qadebias::distill {

/// q_j proportional to p_j^(1 - beta); zero entries stay zero, beta = 0
/// returns p unchanged and beta = 1 gives the uniform distribution over the
/// support of p.
inline std::vector<double> smooth_distribution(const std::vector<double>& p, double beta) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw ValidationError("smoothing beta must lie in [0, 1]");
  if (!numeric::is_distribution(p)) throw ValidationError("smoothing input is not a probability vector");
  if (beta == 0.0) return p;
  const double k = 1.0 - beta;
  double m = -std::numeric_limits<double>::infinity();
  std::vector<double> a(p.size(), 0.0);
  for (std::size_t j = 0; j < p.size(); ++j)
    if (p[j] > 0.0) {
      a[j] = k * std::log(p[j]);
      m = std::max(m, a[j]);
    }
  double z = 0.0;
  std::vector<double> q(p.size(), 0.0);
  for (std::size_t j = 0; j < p.size(); ++j)
    if (p[j] > 0.0) {
      q[j] = std::exp(a[j] - m);
      z += q[j];
    }
  for (double& v : q) v /= z;
  return q;
}

struct SmoothedTargets {
  std::string example_id;
  std::vector<double> t_start;
  std::vector<double> t_end;
};

inline SmoothedTargets smooth_targets(const spanmodel::TeacherTargets& teacher, const bias::BiasWeight& w) {
  std::vector<double> ps(teacher.start_logprobs.size()), pe(teacher.end_logprobs.size());
  for (std::size_t j = 0; j < ps.size(); ++j) ps[j] = std::exp(teacher.start_logprobs[j]);
  for (std::size_t j = 0; j < pe.size(); ++j) pe[j] = std::exp(teacher.end_logprobs[j]);
  return {teacher.example_id, smooth_distribution(ps, w.w_start), smooth_distribution(pe, w.w_end)};
}

namespace detail {

inline void check_head(const std::vector<double>& t, const std::vector<double>& z, const char* head) {
  if (t.size() != z.size())
    throw ValidationError(std::string(head) + ": target and logit lengths differ");
  if (z.empty()) throw ValidationError(std::string(head) + ": empty logits");
  if (!numeric::all_finite(z)) throw ValidationError(std::string(head) + ": non-finite logits");
  if (!numeric::is_distribution(t)) throw ValidationError(std::string(head) + ": targets are not a distribution");
}

inline double cross_entropy(const std::vector<double>& t, const std::vector<double>& z) {
  const auto lq = numeric::log_softmax(z);
  double ce = 0.0;
  for (std::size_t j = 0; j < t.size(); ++j)
    if (t[j] > 0.0) ce -= t[j] * lq[j];
  return ce;
}

}  // namespace detail

/// 0.5 * [CE(t_start, softmax(z_start)) + CE(t_end, softmax(z_end))].
inline double kd_loss(const std::vector<double>& t_start, const std::vector<double>& t_end,
                      const std::vector<double>& z_start, const std::vector<double>& z_end) {
  detail::check_head(t_start, z_start, "start");
  detail::check_head(t_end, z_end, "end");
  return 0.5 * (detail::cross_entropy(t_start, z_start) + detail::cross_entropy(t_end, z_end));
}

inline double kd_loss(const SmoothedTargets& t, const std::vector<double>& z_start,
                      const std::vector<double>& z_end) {
  return kd_loss(t.t_start, t.t_end, z_start, z_end);
}

struct Gradient {
  std::vector<double> start;
  std::vector<double> end;
};

/// Per head dL/dz = 0.5 * (softmax(z) - t).
inline Gradient kd_loss_gradient(const std::vector<double>& t_start, const std::vector<double>& t_end,
                                 const std::vector<double>& z_start, const std::vector<double>& z_end) {
  detail::check_head(t_start, z_start, "start");
  detail::check_head(t_end, z_end, "end");
  Gradient g{numeric::softmax(z_start), numeric::softmax(z_end)};
  for (std::size_t j = 0; j < g.start.size(); ++j) g.start[j] = 0.5 * (g.start[j] - t_start[j]);
  for (std::size_t j = 0; j < g.end.size(); ++j) g.end[j] = 0.5 * (g.end[j] - t_end[j]);
  return g;
}

// ---------------------------------------------------------------------------
// Plans

enum class LossMode { kOneHot, kKd, kKdDebiased };

inline std::string to_string(LossMode m) {
  switch (m) {
    case LossMode::kOneHot: return "onehot";
    case LossMode::kKd: return "kd";
    case LossMode::kKdDebiased: return "kd_debiased";
  }
  return "?";
}

inline LossMode parse_loss_mode(const std::string& s) {
  if (s == "onehot") return LossMode::kOneHot;
  if (s == "kd") return LossMode::kKd;
  if (s == "kd_debiased") return LossMode::kKdDebiased;
  throw ValidationError("unknown loss mode '" + s + "' (expected onehot, kd or kd_debiased)");
}

struct DomainSource {
  std::string domain;
  std::string dataset;
  std::string teacher_cache;
  std::string bias_weights;  // may be empty outside kd_debiased
};

struct DistillPlan {
  std::vector<DomainSource> domains;
  spanmodel::SpanModelConfig student;
  LossMode mode = LossMode::kKdDebiased;
  std::uint64_t seed = 0;
  /// Weight of the gold one-hot target mixed into the soft target.
  double onehot_mix = 0.0;

  void validate() const {
    if (domains.empty()) throw ValidationError("plan lists no domains");
    std::set<std::string> seen;
    for (const auto& d : domains) {
      if (d.domain.empty()) throw ValidationError("plan domain with an empty name");
      if (!seen.insert(d.domain).second) throw ValidationError("plan registers domain '" + d.domain + "' twice");
      if (d.dataset.empty()) throw ValidationError("plan domain '" + d.domain + "' has no dataset");
      if (mode != LossMode::kOneHot && d.teacher_cache.empty())
        throw ValidationError("plan domain '" + d.domain + "' has no teacher cache");
    }
    if (!(onehot_mix >= 0.0 && onehot_mix <= 1.0)) throw ValidationError("onehot_mix must lie in [0, 1]");
    student.validate();
  }
};

inline json to_json(const DistillPlan& p) {
  json domains = json::array();
  for (const auto& d : p.domains)
    domains.push_back({{"domain", d.domain},
                       {"dataset", d.dataset},
                       {"teacher_cache", d.teacher_cache},
                       {"bias_weights", d.bias_weights}});
  return {{"domains", domains},
          {"loss_mode", to_string(p.mode)},
          {"seed", p.seed},
          {"onehot_mix", p.onehot_mix},
          {"student", spanmodel::to_json(p.student)}};
}

/// Relative paths are resolved against base_dir when it is non-empty.
inline DistillPlan plan_from_json(const json& j, const std::string& where = "plan",
                                  const std::string& base_dir = "") {
  DistillPlan p;
  auto resolve = [&](const std::string& s) {
    if (s.empty() || base_dir.empty() || std::filesystem::path(s).is_absolute()) return s;
    return (std::filesystem::path(base_dir) / s).lexically_normal().string();
  };
  for (const auto& d : io::require<json>(j, "domains", where)) {
    DomainSource s;
    s.domain = io::require<std::string>(d, "domain", where);
    s.dataset = resolve(io::require<std::string>(d, "dataset", where));
    s.teacher_cache = resolve(d.value("teacher_cache", std::string()));
    s.bias_weights = resolve(d.value("bias_weights", std::string()));
    p.domains.push_back(std::move(s));
  }
  p.mode = parse_loss_mode(io::require<std::string>(j, "loss_mode", where));
  p.seed = io::require<std::uint64_t>(j, "seed", where);
  if (j.contains("onehot_mix")) p.onehot_mix = io::require<double>(j, "onehot_mix", where);
  if (j.contains("student")) p.student = spanmodel::config_from_json(j.at("student"), where + " student");
  p.validate();
  return p;
}

inline DistillPlan load_plan(const std::string& path) {
  return plan_from_json(io::read_json(path), path, std::filesystem::path(path).parent_path().string());
}

/// The teacher identifier (its cache path) registered for the example's domain.
inline const DomainSource& route_teacher(const corpus::Example& ex, const DistillPlan& plan) {
  for (const auto& d : plan.domains)
    if (d.domain == ex.domain) return d;
  throw ValidationError("no teacher registered for domain '" + ex.domain + "' (example " + ex.id + ")");
}

// ---------------------------------------------------------------------------
// Student training

/// Everything train_student reads from disk, keyed for lookup.
struct StudentInputs {
  std::vector<corpus::Example> examples;                      // union, plan order
  std::map<std::string, spanmodel::TeacherCache> caches;      // by teacher cache path
  std::map<std::string, bias::BiasWeightSet> weights;         // by domain
};

struct StudentData {
  std::vector<spanmodel::TrainItem> items;
  std::vector<std::string> teacher_of;  // teacher id per item
  std::size_t missing_weights = 0;
  std::vector<std::string> truncated_ids;
  std::vector<std::string> skipped_ids;
};

/// Per example: onehot mode uses the gold one-hot targets; kd uses the routed
/// teacher's distributions; kd_debiased smooths them with the example's
/// (w_start, w_end), treating a missing weight as zero.
inline StudentData build_student_items(const DistillPlan& plan, const spanmodel::SpanModel& student,
                                       const StudentInputs& in) {
  StudentData out;
  const std::size_t max_seq_len = student.config().max_seq_len;
  for (const auto& ex : in.examples) {
    const auto& src = route_teacher(ex, plan);
    bool cut = false;
    const auto tok = spanmodel::prepare_example(ex, max_seq_len, &cut);
    if (cut) out.truncated_ids.push_back(ex.id);
    if (plan.mode == LossMode::kOneHot) {
      auto item = spanmodel::onehot_item(student, tok);
      if (!item) {
        out.skipped_ids.push_back(ex.id);
        continue;
      }
      out.items.push_back(std::move(*item));
      out.teacher_of.push_back("gold");
      continue;
    }
    const auto cache_it = in.caches.find(src.teacher_cache);
    if (cache_it == in.caches.end()) throw Error("teacher cache not loaded: " + src.teacher_cache);
    const auto rec = cache_it->second.find(ex.id);
    if (rec == cache_it->second.end())
      throw Error("teacher cache " + src.teacher_cache + " has no entry for example " + ex.id);
    if (rec->second.start_logprobs.size() != tok.context_tokens.size())
      throw ValidationError("teacher cache entry for " + ex.id + " does not match its tokenization");

    bias::BiasWeight w{ex.id, 0.0, 0.0};
    if (plan.mode == LossMode::kKdDebiased) {
      const auto ws = in.weights.find(ex.domain);
      const bool found = ws != in.weights.end() && ws->second.weights.count(ex.id);
      if (found)
        w = ws->second.weights.at(ex.id);
      else
        ++out.missing_weights;
    }
    auto t = smooth_targets(rec->second, w);
    if (plan.onehot_mix > 0.0 && !tok.gold_spans.empty()) {
      const auto& g = tok.gold_spans.front();
      for (auto& v : t.t_start) v *= 1.0 - plan.onehot_mix;
      for (auto& v : t.t_end) v *= 1.0 - plan.onehot_mix;
      t.t_start[g.start] += plan.onehot_mix;
      t.t_end[g.end] += plan.onehot_mix;
    }
    spanmodel::TrainItem item;
    item.example_id = ex.id;
    item.input = student.encode(tok);
    item.t_start = std::move(t.t_start);
    item.t_end = std::move(t.t_end);
    out.items.push_back(std::move(item));
    out.teacher_of.push_back(src.teacher_cache);
  }
  return out;
}

struct StudentResult {
  spanmodel::SpanModel model;
  spanmodel::TrainLog log;
  std::size_t missing_weights = 0;
};

/// Student vocabulary: built over the union of the plan's datasets.
inline StudentResult train_student(const DistillPlan& plan, const StudentInputs& in,
                                   const spanmodel::EpochCallback& on_epoch = {}) {
  plan.validate();
  if (in.examples.empty()) throw TrainingError("empty training set");
  const auto vocab = corpus::build_vocab(in.examples, plan.student.vocab_min_freq);
  spanmodel::SpanModel student(plan.student, vocab);
  auto data = build_student_items(plan, student, in);
  auto log = spanmodel::fit(student, data.items, plan.seed, on_epoch);
  log.truncated_ids = std::move(data.truncated_ids);
  log.skipped_ids = std::move(data.skipped_ids);
  return {std::move(student), std::move(log), data.missing_weights};
}

/// Reads datasets, teacher caches (fingerprint-checked against the student's
/// tokenization) and bias weights named by the plan.
inline StudentInputs load_student_inputs(const DistillPlan& plan) {
  plan.validate();
  StudentInputs in;
  for (const auto& d : plan.domains) {
    auto loaded = corpus::load_dataset(d.dataset, /*strict=*/true);
    for (auto& ex : loaded.examples) {
      if (ex.domain != d.domain)
        throw ValidationError(d.dataset + ": example " + ex.id + " is tagged '" + ex.domain +
                              "', plan expects '" + d.domain + "'");
      in.examples.push_back(std::move(ex));
    }
  }
  if (in.examples.empty()) throw TrainingError("plan datasets contain no examples");
  const auto vocab = corpus::build_vocab(in.examples, plan.student.vocab_min_freq);
  const auto expected = spanmodel::tokenization_fingerprint(vocab, plan.student.max_seq_len);
  for (const auto& d : plan.domains) {
    if (plan.mode != LossMode::kOneHot && !in.caches.count(d.teacher_cache))
      in.caches.emplace(d.teacher_cache, spanmodel::read_teacher_cache(d.teacher_cache, expected));
    if (plan.mode == LossMode::kKdDebiased && !d.bias_weights.empty())
      in.weights.emplace(d.domain, bias::load_bias_weights(d.bias_weights));
  }
  return in;
}

inline StudentResult train_student(const DistillPlan& plan, const spanmodel::EpochCallback& on_epoch = {}) {
  return train_student(plan, load_student_inputs(plan), on_epoch);
}

}  // namespace qadebias::distill
