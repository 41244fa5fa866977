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

// Command-line pipeline. Every stage reads and writes files and leaves a
// <out>.manifest.json next to its main output.
//
// Exit codes: 0 success, 1 runtime error, 2 usage error.

#pragma once

#include <filesystem>
#include <iostream>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "qadebias/analysis.hpp"
#include "qadebias/bias.hpp"
#include "qadebias/common.hpp"
#include "qadebias/corpus.hpp"
#include "qadebias/distill.hpp"
#include "qadebias/metrics.hpp"
#include "qadebias/spanmodel.hpp"
#include "qadebias/synthetic.hpp"

namespace qadebias::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

namespace detail {

inline void require_file(const std::string& path) {
  if (path.empty()) return;
  if (!std::filesystem::is_regular_file(path)) throw Error("missing input file: " + path);
}

/// "name=path" -> (name, path).
inline std::pair<std::string, std::string> split_assignment(const std::string& s) {
  const auto eq = s.find('=');
  if (eq == std::string::npos || eq == 0 || eq + 1 == s.size())
    throw ValidationError("expected NAME=PATH, got '" + s + "'");
  return {s.substr(0, eq), s.substr(eq + 1)};
}

/// Resolved option values of a subcommand, in declaration order.
inline json resolved_args(CLI::App* sub) {
  json args = json::object();
  for (const CLI::Option* opt : sub->get_options()) {
    if (opt->get_name() == "--help") continue;
    const std::string key = opt->get_name(false, false);
    if (opt->get_type_size() == 0) {
      args[key] = opt->count() > 0;
    } else if (opt->count() > 0) {
      const auto& res = opt->results();
      if (opt->get_expected_max() > 1 || res.size() > 1)
        args[key] = res;
      else
        args[key] = res.empty() ? std::string() : res.front();
    } else {
      args[key] = opt->get_default_str();
    }
  }
  return args;
}

inline void write_manifest(const std::string& out, const std::string& command, const json& args,
                           const std::vector<std::string>& argv, const std::vector<std::string>& inputs) {
  json fps = json::object();
  for (const auto& p : inputs)
    if (!p.empty()) fps[p] = io::file_fingerprint(p);
  const json m = {{"command", command}, {"argv", argv}, {"args", args}, {"inputs", fps}};
  io::write_file(out + ".manifest.json", m.dump(2) + "\n");
}

struct ModelFlags {
  spanmodel::SpanModelConfig cfg;
  bool no_match_feature = false;

  void add(CLI::App* app) {
    app->add_option("--hidden", cfg.hidden_dim, "Hidden size");
    app->add_option("--layers", cfg.n_layers, "Encoder layers");
    app->add_option("--heads", cfg.n_heads, "Attention heads");
    app->add_option("--ffn", cfg.ffn_dim, "Feed-forward size");
    app->add_option("--max-seq-len", cfg.max_seq_len, "Maximum input length in tokens");
    app->add_option("--max-answer-len", cfg.max_answer_len, "Maximum decoded span length");
    app->add_option("--lr", cfg.learning_rate, "Adam step size");
    app->add_option("--batch-size", cfg.batch_size, "Mini-batch size");
    app->add_option("--epochs", cfg.epochs, "Training epochs");
    app->add_option("--seed", cfg.seed, "Initialization and shuffle seed");
    app->add_option("--vocab-min-freq", cfg.vocab_min_freq, "Minimum token frequency for the vocabulary");
    app->add_flag("--no-match-feature", no_match_feature, "Disable the question-match input feature");
  }

  spanmodel::SpanModelConfig resolved() const {
    auto c = cfg;
    c.match_feature = !no_match_feature;
    c.validate();
    return c;
  }
};

inline std::vector<corpus::Example> load_examples(const std::string& path) {
  return corpus::load_dataset(path, /*strict=*/true).examples;
}

inline metrics::PunctMode parse_punct(const std::string& s) {
  if (s == "official") return metrics::PunctMode::kOfficial;
  if (s == "unicode") return metrics::PunctMode::kUnicode;
  throw ValidationError("unknown punctuation mode '" + s + "'");
}

}  // namespace detail

/// Runs one subcommand. argv[0] is the program name.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  using namespace detail;
  CLI::App app{"Multi-domain debiasing pipeline for extractive question answering", "qadebias"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1, 1);

  // convert
  auto* convert = app.add_subcommand("convert", "Convert SQuAD JSON or MRQA JSONL into the canonical dataset format");
  std::string conv_in, conv_format = "squad", conv_domain = "squad", conv_out, conv_rejections;
  bool conv_adv = false, conv_strict = false;
  convert->add_option("--input", conv_in, "Source file")->required();
  convert->add_option("--format", conv_format, "squad | mrqa")->check(CLI::IsMember({"squad", "mrqa"}));
  convert->add_option("--domain", conv_domain, "Domain tag");
  convert->add_flag("--adversarial", conv_adv, "Mark examples as adversarial");
  convert->add_flag("--strict", conv_strict, "Abort on the first invalid example");
  convert->add_option("--out", conv_out, "Canonical JSONL output")->required();
  convert->add_option("--rejections", conv_rejections, "Write rejected examples here (JSONL)");

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset with a planted lexical cue");
  corpus::SyntheticConfig syn_cfg;
  std::uint64_t syn_seed = 0;
  std::string syn_out;
  synth->add_option("--n", syn_cfg.n_examples, "Number of examples");
  synth->add_option("--sentences", syn_cfg.n_sentences, "Facts per context");
  synth->add_option("--bias-rate", syn_cfg.planted_bias_rate, "Fraction of bias-aligned examples");
  synth->add_flag("--adversarial", syn_cfg.adversarial, "Append an adversarial distractor fact");
  synth->add_option("--domain", syn_cfg.domain, "Domain tag");
  synth->add_option("--seed", syn_seed, "Generator seed");
  synth->add_option("--out", syn_out, "Canonical JSONL output")->required();

  // train-teacher
  auto* teach = app.add_subcommand("train-teacher", "Train a domain teacher with one-hot targets");
  ModelFlags teach_flags;
  std::string teach_data, teach_out, teach_log;
  std::vector<std::string> teach_vocab;
  teach->add_option("--data", teach_data, "Training dataset (canonical JSONL)")->required();
  teach->add_option("--vocab-data", teach_vocab, "Datasets the vocabulary is built from (default: --data)");
  teach->add_option("--out", teach_out, "Checkpoint output")->required();
  teach->add_option("--log", teach_log, "Training log (JSONL); default <out>.log.jsonl");
  teach_flags.add(teach);

  // cache-logits
  auto* cache = app.add_subcommand("cache-logits", "Write a teacher's start/end log-probabilities");
  std::string cache_model, cache_data, cache_out;
  std::vector<std::string> cache_vocab;
  cache->add_option("--model", cache_model, "Teacher checkpoint")->required();
  cache->add_option("--data", cache_data, "Dataset to score")->required();
  cache->add_option("--vocab-data", cache_vocab,
                    "Datasets defining the expected tokenization; refuse when the teacher differs");
  cache->add_option("--out", cache_out, "Cache output (JSONL)")->required();

  // bias-weights
  auto* biasw = app.add_subcommand("bias-weights", "Compute lexical-overlap bias weights");
  bias::BiasConfig bias_cfg;
  std::string bias_data, bias_out, bias_gating = "span", bias_ratio_out;
  std::size_t bias_max_seq_len = spanmodel::SpanModelConfig{}.max_seq_len;
  biasw->add_option("--data", bias_data, "Dataset")->required();
  biasw->add_option("--out", bias_out, "Weight file (JSONL)")->required();
  biasw->add_option("--window", bias_cfg.window, "Overlap window W");
  biasw->add_option("--temperature", bias_cfg.temperature, "Softmax temperature");
  biasw->add_option("--max-answer-len", bias_cfg.max_answer_len, "Maximum decoded span length");
  biasw->add_option("--max-seq-len", bias_max_seq_len, "Model length limit used for truncation");
  biasw->add_option("--gating", bias_gating, "span | endpoint")->check(CLI::IsMember({"span", "endpoint"}));
  biasw->add_option("--ratio-out", bias_ratio_out, "Per-domain biased-example ratio (JSON)");

  // train-student
  auto* student = app.add_subcommand("train-student", "Distill the teachers named by a plan into a student");
  std::string stu_plan, stu_out, stu_log;
  student->add_option("--plan", stu_plan, "Distillation plan (JSON)")->required();
  student->add_option("--out", stu_out, "Checkpoint output")->required();
  student->add_option("--log", stu_log, "Training log (JSONL); default <out>.log.jsonl");

  // evaluate
  auto* evaluate = app.add_subcommand("evaluate", "Exact Match and F1 of predictions or of a model");
  std::string ev_pred, ev_model, ev_data, ev_out, ev_pred_out, ev_punct = "official";
  auto* ev_pred_opt = evaluate->add_option("--pred", ev_pred, "Predictions (JSON id -> answer)");
  auto* ev_model_opt = evaluate->add_option("--model", ev_model, "Checkpoint to predict with");
  ev_pred_opt->excludes(ev_model_opt);
  evaluate->add_option("--data", ev_data, "Dataset")->required();
  evaluate->add_option("--out", ev_out, "EvalResult output (JSON)")->required();
  evaluate->add_option("--pred-out", ev_pred_out, "Write the model's predictions here");
  evaluate->add_option("--punct", ev_punct, "official | unicode")->check(CLI::IsMember({"official", "unicode"}));

  // analyze-errors
  auto* analyze = app.add_subcommand("analyze-errors", "Categorize wrong predictions");
  analysis::AnalysisConfig an_cfg;
  std::string an_data, an_pred, an_out, an_summary;
  std::size_t an_sample = 0;
  std::uint64_t an_seed = 0;
  analyze->add_option("--data", an_data, "Dataset")->required();
  analyze->add_option("--pred", an_pred, "Predictions (JSON)")->required();
  analyze->add_option("--out", an_out, "Error records (JSONL)")->required();
  analyze->add_option("--theta", an_cfg.theta, "Lexical overlap threshold");
  analyze->add_option("--sample", an_sample, "Keep a uniform sample of this many errors (0 = all)");
  analyze->add_option("--seed", an_seed, "Sampling seed");
  analyze->add_option("--summary", an_summary, "Error distribution (JSON)");

  // report
  auto* report = app.add_subcommand("report", "Render summary tables from earlier outputs");
  std::vector<std::string> rep_evals, rep_ratios;
  std::string rep_errors, rep_data, rep_base, rep_debiased, rep_out, rep_text;
  double rep_theta = analysis::AnalysisConfig{}.theta;
  report->add_option("--eval", rep_evals, "NAME=eval.json, one per dataset/model row");
  report->add_option("--errors", rep_errors, "Error records (JSONL) for the error distribution");
  report->add_option("--bias-ratio", rep_ratios, "DOMAIN=weights.jsonl, one per domain");
  report->add_option("--data", rep_data, "Dataset for the error-reduction table");
  report->add_option("--baseline-pred", rep_base, "Baseline predictions for the error-reduction table");
  report->add_option("--debiased-pred", rep_debiased, "Debiased predictions for the error-reduction table");
  report->add_option("--theta", rep_theta, "Lexical overlap threshold");
  report->add_option("--out", rep_out, "Report (JSON)")->required();
  report->add_option("--text", rep_text, "Plain-text rendering");

  if (argc > 1 && argv[1][0] != '-' && app.get_subcommand_no_throw(argv[1]) == nullptr) {
    err << "error: unknown subcommand '" << argv[1] << "'\n\n" << app.help();
    return kExitUsage;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  CLI::App* sub = app.get_subcommands().front();
  const std::string command = sub->get_name();
  std::vector<std::string> argv_rec;
  for (int i = 1; i < argc; ++i) argv_rec.emplace_back(argv[i]);
  const json args = resolved_args(sub);

  try {
    if (command == "convert") {
      require_file(conv_in);
      corpus::LoadOptions opts{conv_domain, conv_adv, conv_strict};
      const auto res = conv_format == "squad" ? corpus::load_squad_json(conv_in, opts)
                                              : corpus::load_mrqa_jsonl(conv_in, opts);
      corpus::save_dataset(conv_out, res.examples);
      if (!conv_rejections.empty()) {
        std::vector<json> lines;
        for (const auto& r : res.rejections) lines.push_back({{"id", r.id}, {"reason", r.reason}});
        io::write_file(conv_rejections, io::to_jsonl(lines));
      }
      err << "converted " << res.examples.size() << " examples, rejected " << res.rejections.size() << "\n";
      write_manifest(conv_out, command, args, argv_rec, {conv_in});
    } else if (command == "synth") {
      corpus::save_dataset(syn_out, corpus::generate_synthetic(syn_cfg, syn_seed));
      write_manifest(syn_out, command, args, argv_rec, {});
    } else if (command == "train-teacher") {
      require_file(teach_data);
      for (const auto& p : teach_vocab) require_file(p);
      const auto cfg = teach_flags.resolved();
      const auto train = load_examples(teach_data);
      std::vector<corpus::Example> vocab_src;
      if (teach_vocab.empty()) vocab_src = train;
      for (const auto& p : teach_vocab) {
        auto more = load_examples(p);
        vocab_src.insert(vocab_src.end(), more.begin(), more.end());
      }
      const auto vocab = corpus::build_vocab(vocab_src, cfg.vocab_min_freq);
      auto res = spanmodel::train_teacher(cfg, vocab, train);
      spanmodel::save_checkpoint(res.model, teach_out);
      io::write_file(teach_log.empty() ? teach_out + ".log.jsonl" : teach_log, spanmodel::training_log_jsonl(res.log));
      err << "trained on " << train.size() - res.log.skipped_ids.size() << " examples ("
          << res.log.truncated_ids.size() << " truncated, " << res.log.skipped_ids.size() << " skipped)\n";
      std::vector<std::string> inputs{teach_data};
      inputs.insert(inputs.end(), teach_vocab.begin(), teach_vocab.end());
      write_manifest(teach_out, command, args, argv_rec, inputs);
    } else if (command == "cache-logits") {
      require_file(cache_model);
      require_file(cache_data);
      for (const auto& p : cache_vocab) require_file(p);
      const auto model = spanmodel::load_checkpoint(cache_model);
      std::string expected = model.fingerprint();
      if (!cache_vocab.empty()) {
        std::vector<corpus::Example> vocab_src;
        for (const auto& p : cache_vocab) {
          auto more = load_examples(p);
          vocab_src.insert(vocab_src.end(), more.begin(), more.end());
        }
        expected = spanmodel::tokenization_fingerprint(
            corpus::build_vocab(vocab_src, model.config().vocab_min_freq), model.config().max_seq_len);
      }
      const auto records = spanmodel::cache_teacher_outputs(model, load_examples(cache_data), expected);
      spanmodel::write_teacher_cache(cache_out, records);
      std::vector<std::string> inputs{cache_model, cache_data};
      inputs.insert(inputs.end(), cache_vocab.begin(), cache_vocab.end());
      write_manifest(cache_out, command, args, argv_rec, inputs);
    } else if (command == "bias-weights") {
      require_file(bias_data);
      bias_cfg.gating = bias_gating == "span" ? bias::Gating::kSpan : bias::Gating::kEndpoint;
      const auto examples = load_examples(bias_data);
      const auto weights = bias::bias_weights_for(examples, bias_cfg, bias_max_seq_len);
      bias::write_bias_weights(bias_out, weights);
      if (!bias_ratio_out.empty()) {
        std::map<std::string, std::vector<bias::BiasWeight>> by_domain;
        for (std::size_t i = 0; i < examples.size(); ++i) by_domain[examples[i].domain].push_back(weights[i]);
        io::write_file(bias_ratio_out, bias::bias_ratio_report(by_domain).dump(2) + "\n");
      }
      write_manifest(bias_out, command, args, argv_rec, {bias_data});
    } else if (command == "train-student") {
      require_file(stu_plan);
      const auto plan = distill::load_plan(stu_plan);
      std::vector<std::string> inputs{stu_plan};
      for (const auto& d : plan.domains) {
        for (const auto* p : {&d.dataset, &d.teacher_cache, &d.bias_weights}) {
          const bool needed = !p->empty() && (p == &d.dataset ||
                                              (p == &d.teacher_cache && plan.mode != distill::LossMode::kOneHot) ||
                                              (p == &d.bias_weights && plan.mode == distill::LossMode::kKdDebiased));
          if (!needed) continue;
          require_file(*p);
          inputs.push_back(*p);
        }
      }
      auto res = distill::train_student(plan);
      spanmodel::save_checkpoint(res.model, stu_out);
      io::write_file(stu_log.empty() ? stu_out + ".log.jsonl" : stu_log, spanmodel::training_log_jsonl(res.log));
      if (res.missing_weights > 0)
        err << "warning: " << res.missing_weights << " examples had no bias weight (treated as 0)\n";
      write_manifest(stu_out, command, args, argv_rec, inputs);
    } else if (command == "evaluate") {
      if (ev_pred.empty() == ev_model.empty()) throw ValidationError("evaluate needs exactly one of --pred or --model");
      require_file(ev_data);
      require_file(ev_pred);
      require_file(ev_model);
      const auto examples = load_examples(ev_data);
      metrics::Predictions preds;
      if (!ev_pred.empty()) {
        preds = metrics::load_predictions(ev_pred);
      } else {
        preds = spanmodel::predict_all(spanmodel::load_checkpoint(ev_model), examples);
        if (!ev_pred_out.empty()) io::write_file(ev_pred_out, metrics::predictions_to_json(preds).dump(2) + "\n");
      }
      const auto r = metrics::evaluate(preds, examples, parse_punct(ev_punct));
      io::write_file(ev_out, metrics::to_json(r).dump(2) + "\n");
      out << "exact_match " << r.exact_match << " f1 " << r.f1 << " missing " << r.missing_predictions << "\n";
      write_manifest(ev_out, command, args, argv_rec, {ev_data, ev_pred, ev_model});
    } else if (command == "analyze-errors") {
      require_file(an_data);
      require_file(an_pred);
      const auto examples = load_examples(an_data);
      auto records = analysis::analyze_errors(examples, metrics::load_predictions(an_pred), an_cfg);
      if (an_sample > 0) records = analysis::sample_errors(records, an_sample, an_seed);
      std::vector<json> lines;
      for (const auto& r : records) lines.push_back(analysis::to_json(r));
      io::write_file(an_out, io::to_jsonl(lines));
      const auto dist = analysis::error_distribution(records);
      if (!an_summary.empty()) io::write_file(an_summary, analysis::to_json(dist).dump(2) + "\n");
      out << analysis::render_table2(dist);
      write_manifest(an_out, command, args, argv_rec, {an_data, an_pred});
    } else if (command == "report") {
      json rep = json::object();
      std::string text;
      std::vector<std::string> inputs;
      if (!rep_evals.empty()) {
        json rows = json::array();
        text += "Dataset | EM | F1\n";
        for (const auto& s : rep_evals) {
          const auto [name, path] = split_assignment(s);
          require_file(path);
          inputs.push_back(path);
          const auto r = metrics::eval_result_from_json(io::read_json(path), path);
          rows.push_back({{"name", name}, {"exact_match", r.exact_match}, {"f1", r.f1}});
          std::ostringstream line;
          line << std::fixed << std::setprecision(1) << name << " | " << r.exact_match << " | " << r.f1 << "\n";
          text += line.str();
        }
        rep["evaluations"] = rows;
        text += "\n";
      }
      if (!rep_errors.empty()) {
        require_file(rep_errors);
        inputs.push_back(rep_errors);
        std::vector<analysis::ErrorRecord> records;
        io::for_each_jsonl(rep_errors, [&](const json& j, std::size_t lineno) {
          records.push_back(analysis::error_record_from_json(j, rep_errors + ":" + std::to_string(lineno)));
        });
        const auto dist = analysis::error_distribution(records);
        rep["error_distribution"] = analysis::to_json(dist);
        text += analysis::render_table2(dist) + "\n";
      }
      if (!rep_ratios.empty()) {
        std::map<std::string, std::vector<bias::BiasWeight>> by_domain;
        for (const auto& s : rep_ratios) {
          const auto [domain, path] = split_assignment(s);
          require_file(path);
          inputs.push_back(path);
          for (const auto& [id, w] : bias::load_bias_weights(path).weights) by_domain[domain].push_back(w);
        }
        rep["bias_ratio"] = bias::bias_ratio_report(by_domain);
        text += bias::render_bias_ratio_table(rep["bias_ratio"]) + "\n";
      }
      if (!rep_data.empty() || !rep_base.empty() || !rep_debiased.empty()) {
        if (rep_data.empty() || rep_base.empty() || rep_debiased.empty())
          throw ValidationError("the error-reduction table needs --data, --baseline-pred and --debiased-pred");
        for (const auto* p : {&rep_data, &rep_base, &rep_debiased}) {
          require_file(*p);
          inputs.push_back(*p);
        }
        analysis::AnalysisConfig cfg;
        cfg.theta = rep_theta;
        const auto red = analysis::error_reduction_report(load_examples(rep_data), metrics::load_predictions(rep_base),
                                                          metrics::load_predictions(rep_debiased), cfg);
        rep["error_reduction"] = analysis::to_json(red);
        text += analysis::render_table6(red);
      }
      if (rep.empty()) throw ValidationError("report needs at least one of --eval, --errors, --bias-ratio, --data");
      io::write_file(rep_out, rep.dump(2) + "\n");
      if (!rep_text.empty()) io::write_file(rep_text, text);
      out << text;
      write_manifest(rep_out, command, args, argv_rec, inputs);
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace qadebias::cli
