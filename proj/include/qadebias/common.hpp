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

#include <cmath>
#include <cstddef>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "qadebias/text.hpp"

namespace qadebias {

using json = nlohmann::json;

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class FingerprintError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

namespace io {

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, std::string_view contents) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write file: " + path);
  out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
  if (!out) throw Error("write failed: " + path);
}

inline json parse_json(std::string_view text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(what + ": malformed JSON: " + e.what());
  }
}

inline json read_json(const std::string& path) { return parse_json(read_file(path), path); }

/// Calls fn(record, line_number) for every non-blank line; line numbers are 1-based.
template <typename Fn>
void for_each_jsonl(const std::string& path, Fn&& fn) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open file: " + path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    fn(parse_json(line, path + ":" + std::to_string(lineno)), lineno);
  }
}

inline std::string to_jsonl(const std::vector<json>& records) {
  std::string out;
  for (const auto& r : records) {
    out += r.dump();
    out += '\n';
  }
  return out;
}

inline std::string file_fingerprint(const std::string& path) {
  return text::hex64(text::fnv1a(read_file(path)));
}

template <typename T>
T require(const json& obj, const char* key, const std::string& where) {
  if (!obj.is_object() || !obj.contains(key))
    throw ParseError(where + ": missing required field '" + key + "'");
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ParseError(where + ": field '" + key + "' has the wrong type: " + e.what());
  }
}

}  // namespace io

/// Probability-vector helpers shared by the model, bias and distillation code.
namespace numeric {

inline double log_sum_exp(const std::vector<double>& z) {
  double m = -std::numeric_limits<double>::infinity();
  for (double v : z) m = std::max(m, v);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double v : z) s += std::exp(v - m);
  return m + std::log(s);
}

inline std::vector<double> log_softmax(const std::vector<double>& z) {
  const double lse = log_sum_exp(z);
  std::vector<double> out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] - lse;
  return out;
}

inline std::vector<double> softmax(const std::vector<double>& z) {
  auto out = log_softmax(z);
  for (double& v : out) v = std::exp(v);
  return out;
}

inline double entropy(const std::vector<double>& p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

inline bool all_finite(const std::vector<double>& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

/// True when p is nonnegative and sums to one within tol.
inline bool is_distribution(const std::vector<double>& p, double tol = 1e-6) {
  if (p.empty()) return false;
  double s = 0.0;
  for (double v : p) {
    if (!(v >= 0.0) || !std::isfinite(v)) return false;
    s += v;
  }
  return std::abs(s - 1.0) <= tol;
}

}  // namespace numeric

}  // namespace qadebias
