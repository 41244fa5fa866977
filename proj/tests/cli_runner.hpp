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

#pragma once

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "qadebias/common.hpp"

namespace qadebias::testing {

struct CliResult {
  int exit_code = -1;
  std::string output;  // stdout and stderr
};

/// Runs the CLI binary in dir with the given argument string.
inline CliResult run_cli(const std::string& dir, const std::string& args) {
  const std::string cmd = "cd '" + dir + "' && '" + std::string(QADEBIAS_CLI) + "' " + args + " 2>&1";
  CliResult r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf{};
  std::size_t n = 0;
  while ((n = fread(buf.data(), 1, buf.size(), pipe)) > 0) r.output.append(buf.data(), n);
  const int status = pclose(pipe);
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

/// Small end-to-end pipeline over synthetic data with relative paths, so two
/// runs in different directories should produce identical files.
inline const std::vector<std::string>& pipeline_commands() {
  static const std::vector<std::string> cmds = {
      "synth --n 60 --seed 1 --bias-rate 0.9 --out train.jsonl",
      "synth --n 20 --seed 2 --bias-rate 0.0 --out dev.jsonl",
      "bias-weights --data train.jsonl --window 3 --temperature 0.25 --out bias.jsonl --ratio-out ratio.json",
      "train-teacher --data train.jsonl --hidden 16 --layers 1 --ffn 32 --epochs 1 --batch-size 8 --lr 0.003 "
      "--max-seq-len 64 --seed 4 --out teacher.json",
      "cache-logits --model teacher.json --data train.jsonl --out teacher.cache.jsonl",
      "train-student --plan plan.json --out student.json",
      "evaluate --model student.json --data dev.jsonl --out eval.json --pred-out dev.pred.json",
      "analyze-errors --data dev.jsonl --pred dev.pred.json --out errors.jsonl --summary errors.summary.json",
      "report --eval dev=eval.json --errors errors.jsonl --bias-ratio synthetic=bias.jsonl --data dev.jsonl "
      "--baseline-pred dev.pred.json --debiased-pred dev.pred.json --out report.json --text report.txt",
  };
  return cmds;
}

inline std::string pipeline_plan() {
  return R"({"domains": [{"domain": "synthetic", "dataset": "train.jsonl", "teacher_cache": "teacher.cache.jsonl",
 "bias_weights": "bias.jsonl"}], "loss_mode": "kd_debiased", "seed": 9,
 "student": {"hidden_dim": 16, "n_layers": 1, "ffn_dim": 32, "epochs": 1, "batch_size": 8,
 "learning_rate": 0.003, "max_seq_len": 64, "seed": 5}})";
}

/// Runs the pipeline in dir; returns the first failing command's result or
/// a success result.
inline CliResult run_pipeline(const std::string& dir) {
  io::write_file(dir + "/plan.json", pipeline_plan());
  CliResult last{0, ""};
  for (const auto& c : pipeline_commands()) {
    last = run_cli(dir, c);
    if (last.exit_code != 0) {
      last.output = c + "\n" + last.output;
      return last;
    }
  }
  return last;
}

/// File contents keyed by name, with wall-clock fields removed from logs.
inline std::map<std::string, std::string> artifact_bytes(const std::string& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    std::string bytes = io::read_file(e.path().string());
    if (name.ends_with(".log.jsonl")) {
      std::string cleaned;
      io::for_each_jsonl(e.path().string(), [&](const json& rec, std::size_t) {
        json r = rec;
        r.erase("wall_seconds");
        cleaned += r.dump() + "\n";
      });
      bytes = cleaned;
    }
    out[name] = std::move(bytes);
  }
  return out;
}

}  // namespace qadebias::testing
