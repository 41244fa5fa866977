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

// Span-prediction model: a small pre-norm transformer encoder over
// [question; SEP; context] with start/end heads on the context positions,
// hand-written backpropagation, Adam, span decoding, checkpoints and the
// teacher-output cache.

#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "qadebias/common.hpp"
#include "qadebias/corpus.hpp"
#include "qadebias/metrics.hpp"

namespace qadebias::spanmodel {

using Matrix = Eigen::MatrixXd;

struct SpanModelConfig {
  std::size_t hidden_dim = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t ffn_dim = 256;
  std::size_t max_seq_len = 384;
  std::size_t max_answer_len = 30;
  /// Adds a learned embedding flagging context tokens that also occur in the question.
  bool match_feature = true;
  std::uint64_t seed = 0;
  double learning_rate = 3e-4;
  std::size_t batch_size = 32;
  std::size_t epochs = 3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t vocab_min_freq = 1;
  std::string vocab_fingerprint;  // set by the model

  void validate() const {
    if (hidden_dim == 0 || n_heads == 0 || hidden_dim % n_heads != 0)
      throw ValidationError("hidden_dim must be a positive multiple of n_heads");
    if (ffn_dim == 0) throw ValidationError("ffn_dim must be positive");
    if (max_seq_len < 2) throw ValidationError("max_seq_len must be >= 2");
    if (max_answer_len == 0) throw ValidationError("max_answer_len must be >= 1");
    if (batch_size == 0) throw ValidationError("batch_size must be >= 1");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
      throw ValidationError("learning_rate must be positive");
    if (vocab_min_freq == 0) throw ValidationError("vocab_min_freq must be >= 1");
  }
};

inline json to_json(const SpanModelConfig& c) {
  return {{"hidden_dim", c.hidden_dim},     {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},           {"ffn_dim", c.ffn_dim},
          {"max_seq_len", c.max_seq_len},   {"max_answer_len", c.max_answer_len},
          {"match_feature", c.match_feature}, {"seed", c.seed},
          {"learning_rate", c.learning_rate}, {"batch_size", c.batch_size},
          {"epochs", c.epochs},             {"adam_beta1", c.adam_beta1},
          {"adam_beta2", c.adam_beta2},     {"adam_eps", c.adam_eps},
          {"vocab_min_freq", c.vocab_min_freq}, {"vocab_fingerprint", c.vocab_fingerprint}};
}

/// Missing keys keep their defaults, so partial configs in plan files work.
inline SpanModelConfig config_from_json(const json& j, const std::string& where = "model config") {
  if (!j.is_object()) throw ParseError(where + ": expected an object");
  SpanModelConfig c;
  auto opt = [&](const char* key, auto& field) {
    if (j.contains(key)) field = io::require<std::decay_t<decltype(field)>>(j, key, where);
  };
  opt("hidden_dim", c.hidden_dim);
  opt("n_layers", c.n_layers);
  opt("n_heads", c.n_heads);
  opt("ffn_dim", c.ffn_dim);
  opt("max_seq_len", c.max_seq_len);
  opt("max_answer_len", c.max_answer_len);
  opt("match_feature", c.match_feature);
  opt("seed", c.seed);
  opt("learning_rate", c.learning_rate);
  opt("batch_size", c.batch_size);
  opt("epochs", c.epochs);
  opt("adam_beta1", c.adam_beta1);
  opt("adam_beta2", c.adam_beta2);
  opt("adam_eps", c.adam_eps);
  opt("vocab_min_freq", c.vocab_min_freq);
  opt("vocab_fingerprint", c.vocab_fingerprint);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Span decoding

struct SpanPrediction {
  std::size_t start_token = 0;
  std::size_t end_token = 0;
  double score = 0.0;
  std::string answer_text;
};

/// Best (i, j) with i <= j and j - i + 1 <= max_len under
/// log_softmax(start)[i] + log_softmax(end)[j]. Ties keep the lowest i, then
/// the lowest j.
inline SpanPrediction decode_span(const std::vector<double>& start_logits,
                                  const std::vector<double>& end_logits, std::size_t max_len) {
  const std::size_t n = start_logits.size();
  if (n == 0) throw ValidationError("decode_span: empty logits");
  if (end_logits.size() != n) throw ValidationError("decode_span: start/end length mismatch");
  if (max_len == 0) throw ValidationError("decode_span: max_len must be >= 1");
  const auto ls = numeric::log_softmax(start_logits);
  const auto le = numeric::log_softmax(end_logits);
  SpanPrediction best;
  bool have = false;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t last = std::min(n, i + max_len);
    for (std::size_t j = i; j < last; ++j) {
      const double s = ls[i] + le[j];
      if (!have || s > best.score) {
        best.start_token = i;
        best.end_token = j;
        best.score = s;
        have = true;
      }
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Input encoding

struct EncodedInput {
  std::vector<std::size_t> ids;
  std::vector<std::size_t> features;  // 1 where a context token also occurs in the question
  std::size_t offset = 0;             // index of the first context position
  std::size_t n_context = 0;
};

/// Cuts the context tail so that |question| + 1 + |context| fits. Gold spans
/// that no longer fit are dropped. Returns true when anything was cut.
inline bool truncate_to_fit(corpus::TokenizedExample& tok, std::size_t max_seq_len) {
  if (tok.question_tokens.size() + 2 > max_seq_len)
    throw ValidationError(tok.example_id + ": question does not fit max_seq_len " +
                          std::to_string(max_seq_len));
  const std::size_t budget = max_seq_len - tok.question_tokens.size() - 1;
  if (tok.context_tokens.size() <= budget) return false;
  tok.context_tokens.resize(budget);
  std::vector<corpus::Span> kept;
  for (const auto& s : tok.gold_spans)
    if (s.end < budget) kept.push_back(s);
  tok.gold_spans = std::move(kept);
  tok.sentence_bounds = corpus::split_sentences(tok.context_tokens);
  return true;
}

/// Tokenizes and truncates an example for a model with the given length limit.
inline corpus::TokenizedExample prepare_example(const corpus::Example& ex, std::size_t max_seq_len,
                                                bool* truncated = nullptr) {
  auto tok = corpus::tokenize_example(ex);
  const bool cut = truncate_to_fit(tok, max_seq_len);
  if (truncated) *truncated = cut;
  return tok;
}

/// Fingerprint binding cached teacher outputs to a vocabulary and length limit.
inline std::string tokenization_fingerprint(const corpus::Vocab& vocab, std::size_t max_seq_len) {
  return vocab.fingerprint("max_seq_len=" + std::to_string(max_seq_len));
}

// ---------------------------------------------------------------------------
// Parameters

struct LayerParams {
  Matrix ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
};

struct Parameters {
  Matrix tok, pos, feat;
  std::vector<LayerParams> layers;
  Matrix lnf_g, lnf_b, head_w, head_b;

  /// Calls fn(name, matrix) for every tensor in a fixed order.
  template <typename Fn>
  void visit(Fn&& fn) {
    visit_impl(*this, fn);
  }
  template <typename Fn>
  void visit(Fn&& fn) const {
    visit_impl(*this, fn);
  }

  std::vector<Matrix*> tensors() {
    std::vector<Matrix*> out;
    visit([&](const std::string&, Matrix& m) { out.push_back(&m); });
    return out;
  }

  Parameters zeros_like() const {
    Parameters z = *this;
    z.visit([](const std::string&, Matrix& m) { m.setZero(); });
    return z;
  }

  bool operator==(const Parameters& o) const {
    bool eq = true;
    std::vector<const Matrix*> a, b;
    visit([&](const std::string&, const Matrix& m) { a.push_back(&m); });
    o.visit([&](const std::string&, const Matrix& m) { b.push_back(&m); });
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size() && eq; ++i)
      eq = a[i]->rows() == b[i]->rows() && a[i]->cols() == b[i]->cols() && *a[i] == *b[i];
    return eq;
  }

 private:
  template <typename Self, typename Fn>
  static void visit_impl(Self& self, Fn& fn) {
    fn("tok_embedding", self.tok);
    fn("pos_embedding", self.pos);
    fn("match_embedding", self.feat);
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      auto& L = self.layers[l];
      const std::string p = "layer" + std::to_string(l) + ".";
      fn(p + "ln1_g", L.ln1_g);
      fn(p + "ln1_b", L.ln1_b);
      fn(p + "wq", L.wq);
      fn(p + "bq", L.bq);
      fn(p + "wk", L.wk);
      fn(p + "bk", L.bk);
      fn(p + "wv", L.wv);
      fn(p + "bv", L.bv);
      fn(p + "wo", L.wo);
      fn(p + "bo", L.bo);
      fn(p + "ln2_g", L.ln2_g);
      fn(p + "ln2_b", L.ln2_b);
      fn(p + "w1", L.w1);
      fn(p + "b1", L.b1);
      fn(p + "w2", L.w2);
      fn(p + "b2", L.b2);
    }
    fn("final_ln_g", self.lnf_g);
    fn("final_ln_b", self.lnf_b);
    fn("head_w", self.head_w);
    fn("head_b", self.head_b);
  }
};

/// Embeddings ~ N(0, 1); linear weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in));
/// biases 0; LayerNorm gains 1.
inline Parameters init_parameters(const SpanModelConfig& cfg, std::size_t vocab_size) {
  const auto d = static_cast<Eigen::Index>(cfg.hidden_dim);
  const auto f = static_cast<Eigen::Index>(cfg.ffn_dim);
  Parameters p;
  p.tok = Matrix(static_cast<Eigen::Index>(vocab_size), d);
  p.pos = Matrix(static_cast<Eigen::Index>(cfg.max_seq_len), d);
  p.feat = Matrix(2, d);
  p.layers.resize(cfg.n_layers);
  for (auto& L : p.layers) {
    L.ln1_g = Matrix::Ones(1, d);
    L.ln1_b = Matrix::Zero(1, d);
    L.wq = Matrix(d, d);
    L.bq = Matrix::Zero(1, d);
    L.wk = Matrix(d, d);
    L.bk = Matrix::Zero(1, d);
    L.wv = Matrix(d, d);
    L.bv = Matrix::Zero(1, d);
    L.wo = Matrix(d, d);
    L.bo = Matrix::Zero(1, d);
    L.ln2_g = Matrix::Ones(1, d);
    L.ln2_b = Matrix::Zero(1, d);
    L.w1 = Matrix(d, f);
    L.b1 = Matrix::Zero(1, f);
    L.w2 = Matrix(f, d);
    L.b2 = Matrix::Zero(1, d);
  }
  p.lnf_g = Matrix::Ones(1, d);
  p.lnf_b = Matrix::Zero(1, d);
  p.head_w = Matrix(d, 2);
  p.head_b = Matrix::Zero(1, 2);

  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto fill_normal = [&](Matrix& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = normal(rng);
  };
  auto fill_uniform = [&](Matrix& m) {
    const double a = 1.0 / std::sqrt(static_cast<double>(m.rows()));
    std::uniform_real_distribution<double> u(-a, a);
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = u(rng);
  };
  fill_normal(p.tok);
  fill_normal(p.pos);
  fill_normal(p.feat);
  for (auto& L : p.layers) {
    fill_uniform(L.wq);
    fill_uniform(L.wk);
    fill_uniform(L.wv);
    fill_uniform(L.wo);
    fill_uniform(L.w1);
    fill_uniform(L.w2);
  }
  fill_uniform(p.head_w);
  return p;
}

// ---------------------------------------------------------------------------
// Building blocks

namespace detail {

inline constexpr double kLayerNormEps = 1e-5;

struct LayerNormCache {
  Matrix xhat;
  Eigen::VectorXd inv_std;
};

inline Matrix layer_norm(const Matrix& x, const Matrix& g, const Matrix& b, LayerNormCache* cache) {
  const Eigen::VectorXd mean = x.rowwise().mean();
  Matrix xc = x.colwise() - mean;
  const Eigen::VectorXd var = xc.array().square().rowwise().mean();
  const Eigen::VectorXd inv = (var.array() + kLayerNormEps).rsqrt();
  Matrix xhat = (xc.array().colwise() * inv.array()).matrix();
  Matrix y = ((xhat.array().rowwise() * g.row(0).array()).rowwise() + b.row(0).array()).matrix();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = inv;
  }
  return y;
}

inline Matrix layer_norm_backward(const Matrix& dy, const Matrix& g, const LayerNormCache& c,
                                  Matrix& dg, Matrix& db) {
  dg += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  db += dy.colwise().sum();
  const Eigen::ArrayXXd dxhat = dy.array().rowwise() * g.row(0).array();
  const double n = static_cast<double>(dy.cols());
  const Eigen::ArrayXd s1 = dxhat.rowwise().sum();
  const Eigen::ArrayXd s2 = (dxhat * c.xhat.array()).rowwise().sum();
  Eigen::ArrayXXd dx = n * dxhat;
  dx.colwise() -= s1;
  dx -= c.xhat.array().colwise() * s2;
  dx.colwise() *= c.inv_std.array() / n;
  return dx.matrix();
}

inline Matrix affine(const Matrix& x, const Matrix& w, const Matrix& b) {
  Matrix y = x * w;
  y.rowwise() += b.row(0);
  return y;
}

inline void softmax_rows(Matrix& s) {
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    const double m = s.row(r).maxCoeff();
    s.row(r) = (s.row(r).array() - m).exp().matrix();
    s.row(r) /= s.row(r).sum();
  }
}

struct LayerCache {
  LayerNormCache ln1, ln2;
  Matrix a, q, k, v;
  std::vector<Matrix> probs;
  Matrix attn_concat, h1, b, f_pre, f_act;
};

struct ForwardCache {
  std::vector<LayerCache> layers;
  LayerNormCache lnf;
  Matrix z;
};

}  // namespace detail

struct Logits {
  std::vector<double> start;
  std::vector<double> end;
};

// ---------------------------------------------------------------------------
// Model

class SpanModel {
 public:
  SpanModel(SpanModelConfig cfg, corpus::Vocab vocab)
      : cfg_(std::move(cfg)), vocab_(std::move(vocab)) {
    cfg_.validate();
    cfg_.vocab_fingerprint = fingerprint();
    params_ = init_parameters(cfg_, vocab_.size());
  }

  SpanModel(SpanModelConfig cfg, corpus::Vocab vocab, Parameters params)
      : cfg_(std::move(cfg)), vocab_(std::move(vocab)), params_(std::move(params)) {
    cfg_.validate();
    if (!cfg_.vocab_fingerprint.empty() && cfg_.vocab_fingerprint != fingerprint())
      throw FingerprintError("checkpoint vocabulary does not match its recorded fingerprint");
    cfg_.vocab_fingerprint = fingerprint();
  }

  const SpanModelConfig& config() const { return cfg_; }
  const corpus::Vocab& vocab() const { return vocab_; }
  const Parameters& params() const { return params_; }
  Parameters& mutable_params() { return params_; }

  std::string fingerprint() const { return tokenization_fingerprint(vocab_, cfg_.max_seq_len); }

  /// Layout [question; SEP; context]. Throws when the sequence does not fit.
  EncodedInput encode(const corpus::TokenizedExample& tok) const {
    const std::size_t len = tok.question_tokens.size() + 1 + tok.context_tokens.size();
    if (len > cfg_.max_seq_len)
      throw ValidationError(tok.example_id + ": sequence of " + std::to_string(len) +
                            " tokens exceeds max_seq_len " + std::to_string(cfg_.max_seq_len));
    if (tok.context_tokens.empty()) throw ValidationError(tok.example_id + ": empty context");
    EncodedInput in;
    in.ids.reserve(len);
    std::set<std::string> question_words;
    for (const auto& t : tok.question_tokens) {
      in.ids.push_back(vocab_.id(t.text));
      if (text::has_alnum(t.text)) question_words.insert(text::lower(t.text));
    }
    in.ids.push_back(corpus::Vocab::kSep);
    in.features.assign(in.ids.size(), 0);
    in.offset = in.ids.size();
    for (const auto& t : tok.context_tokens) {
      in.ids.push_back(vocab_.id(t.text));
      in.features.push_back(cfg_.match_feature && question_words.count(text::lower(t.text)) ? 1 : 0);
    }
    in.n_context = tok.context_tokens.size();
    return in;
  }

  Logits forward(const EncodedInput& in) const { return run_forward(in, nullptr); }

  Logits forward(const corpus::TokenizedExample& tok) const { return forward(encode(tok)); }

  /// Adds scale * dL/dtheta into grad, where
  /// L = 0.5 * (CE(t_start, softmax(start)) + CE(t_end, softmax(end))). Returns L.
  double accumulate_gradient(const EncodedInput& in, const std::vector<double>& t_start,
                             const std::vector<double>& t_end, double scale, Parameters& grad) const {
    if (t_start.size() != in.n_context || t_end.size() != in.n_context)
      throw ValidationError("target length does not match the context length");
    detail::ForwardCache cache;
    const Logits lg = run_forward(in, &cache);
    const auto ls = numeric::log_softmax(lg.start);
    const auto le = numeric::log_softmax(lg.end);
    double loss = 0.0;
    const auto T = static_cast<Eigen::Index>(in.ids.size());
    Matrix dlogits = Matrix::Zero(T, 2);
    for (std::size_t j = 0; j < in.n_context; ++j) {
      if (t_start[j] > 0.0) loss -= 0.5 * t_start[j] * ls[j];
      if (t_end[j] > 0.0) loss -= 0.5 * t_end[j] * le[j];
      const auto r = static_cast<Eigen::Index>(in.offset + j);
      dlogits(r, 0) = scale * 0.5 * (std::exp(ls[j]) - t_start[j]);
      dlogits(r, 1) = scale * 0.5 * (std::exp(le[j]) - t_end[j]);
    }
    backward(in, cache, dlogits, grad);
    return loss;
  }

 private:
  Logits run_forward(const EncodedInput& in, detail::ForwardCache* cache) const {
    using namespace detail;
    const auto T = static_cast<Eigen::Index>(in.ids.size());
    const auto d = static_cast<Eigen::Index>(cfg_.hidden_dim);
    const auto H = static_cast<Eigen::Index>(cfg_.n_heads);
    const Eigen::Index hd = d / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    if (in.ids.size() > cfg_.max_seq_len) throw ValidationError("sequence exceeds max_seq_len");

    Matrix h(T, d);
    for (Eigen::Index t = 0; t < T; ++t) {
      const auto id = in.ids[static_cast<std::size_t>(t)];
      if (id >= vocab_.size()) throw ValidationError("token id outside the vocabulary");
      h.row(t) = params_.tok.row(static_cast<Eigen::Index>(id)) + params_.pos.row(t) +
                 params_.feat.row(static_cast<Eigen::Index>(in.features[static_cast<std::size_t>(t)]));
    }
    if (cache) cache->layers.resize(params_.layers.size());

    for (std::size_t l = 0; l < params_.layers.size(); ++l) {
      const auto& L = params_.layers[l];
      LayerCache local;
      LayerCache& c = cache ? cache->layers[l] : local;
      c.a = layer_norm(h, L.ln1_g, L.ln1_b, &c.ln1);
      c.q = affine(c.a, L.wq, L.bq);
      c.k = affine(c.a, L.wk, L.bk);
      c.v = affine(c.a, L.wv, L.bv);
      c.attn_concat.resize(T, d);
      c.probs.resize(static_cast<std::size_t>(H));
      for (Eigen::Index hh = 0; hh < H; ++hh) {
        Matrix s = c.q.middleCols(hh * hd, hd) * c.k.middleCols(hh * hd, hd).transpose() * scale;
        softmax_rows(s);
        c.attn_concat.middleCols(hh * hd, hd) = s * c.v.middleCols(hh * hd, hd);
        c.probs[static_cast<std::size_t>(hh)] = std::move(s);
      }
      c.h1 = h + affine(c.attn_concat, L.wo, L.bo);
      c.b = layer_norm(c.h1, L.ln2_g, L.ln2_b, &c.ln2);
      c.f_pre = affine(c.b, L.w1, L.b1);
      c.f_act = c.f_pre.cwiseMax(0.0);
      h = c.h1 + affine(c.f_act, L.w2, L.b2);
    }

    LayerNormCache lnf_local;
    Matrix z = layer_norm(h, params_.lnf_g, params_.lnf_b, cache ? &cache->lnf : &lnf_local);
    const Matrix logits = affine(z, params_.head_w, params_.head_b);
    if (cache) cache->z = std::move(z);

    Logits out;
    out.start.resize(in.n_context);
    out.end.resize(in.n_context);
    for (std::size_t j = 0; j < in.n_context; ++j) {
      out.start[j] = logits(static_cast<Eigen::Index>(in.offset + j), 0);
      out.end[j] = logits(static_cast<Eigen::Index>(in.offset + j), 1);
    }
    return out;
  }

  void backward(const EncodedInput& in, const detail::ForwardCache& cache, const Matrix& dlogits,
                Parameters& g) const {
    using namespace detail;
    const auto T = static_cast<Eigen::Index>(in.ids.size());
    const auto d = static_cast<Eigen::Index>(cfg_.hidden_dim);
    const auto H = static_cast<Eigen::Index>(cfg_.n_heads);
    const Eigen::Index hd = d / H;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    g.head_w += cache.z.transpose() * dlogits;
    g.head_b += dlogits.colwise().sum();
    Matrix dz = dlogits * params_.head_w.transpose();
    Matrix dh = layer_norm_backward(dz, params_.lnf_g, cache.lnf, g.lnf_g, g.lnf_b);

    for (std::size_t l = params_.layers.size(); l-- > 0;) {
      const auto& L = params_.layers[l];
      auto& G = g.layers[l];
      const auto& c = cache.layers[l];

      // h_out = h1 + relu(LN2(h1) W1 + b1) W2 + b2
      G.w2 += c.f_act.transpose() * dh;
      G.b2 += dh.colwise().sum();
      Matrix dpre = (dh * L.w2.transpose()).cwiseProduct((c.f_pre.array() > 0.0).cast<double>().matrix());
      G.w1 += c.b.transpose() * dpre;
      G.b1 += dpre.colwise().sum();
      Matrix db = dpre * L.w1.transpose();
      Matrix dh1 = dh + layer_norm_backward(db, L.ln2_g, c.ln2, G.ln2_g, G.ln2_b);

      // h1 = h_in + Attn(LN1(h_in)) Wo + bo
      G.wo += c.attn_concat.transpose() * dh1;
      G.bo += dh1.colwise().sum();
      Matrix dconcat = dh1 * L.wo.transpose();
      Matrix dq = Matrix::Zero(T, d), dk = Matrix::Zero(T, d), dv = Matrix::Zero(T, d);
      for (Eigen::Index hh = 0; hh < H; ++hh) {
        const Matrix& P = c.probs[static_cast<std::size_t>(hh)];
        const Matrix dO = dconcat.middleCols(hh * hd, hd);
        const Matrix dP = dO * c.v.middleCols(hh * hd, hd).transpose();
        dv.middleCols(hh * hd, hd) = P.transpose() * dO;
        const Eigen::VectorXd rows = (dP.array() * P.array()).rowwise().sum();
        const Matrix dS = (P.array() * (dP.array().colwise() - rows.array())).matrix() * scale;
        dq.middleCols(hh * hd, hd) = dS * c.k.middleCols(hh * hd, hd);
        dk.middleCols(hh * hd, hd) = dS.transpose() * c.q.middleCols(hh * hd, hd);
      }
      G.wq += c.a.transpose() * dq;
      G.bq += dq.colwise().sum();
      G.wk += c.a.transpose() * dk;
      G.bk += dk.colwise().sum();
      G.wv += c.a.transpose() * dv;
      G.bv += dv.colwise().sum();
      Matrix da = dq * L.wq.transpose() + dk * L.wk.transpose() + dv * L.wv.transpose();
      dh = dh1 + layer_norm_backward(da, L.ln1_g, c.ln1, G.ln1_g, G.ln1_b);
    }

    for (Eigen::Index t = 0; t < T; ++t) {
      const auto ut = static_cast<std::size_t>(t);
      g.tok.row(static_cast<Eigen::Index>(in.ids[ut])) += dh.row(t);
      g.pos.row(t) += dh.row(t);
      g.feat.row(static_cast<Eigen::Index>(in.features[ut])) += dh.row(t);
    }
  }

  SpanModelConfig cfg_;
  corpus::Vocab vocab_;
  Parameters params_;
};

// ---------------------------------------------------------------------------
// Optimizer and trainer

class Adam {
 public:
  explicit Adam(const Parameters& like) : m_(like.zeros_like()), v_(like.zeros_like()) {}

  void step(Parameters& p, Parameters& g, const SpanModelConfig& cfg) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(t_));
    auto ps = p.tensors();
    auto gs = g.tensors();
    auto ms = m_.tensors();
    auto vs = v_.tensors();
    for (std::size_t i = 0; i < ps.size(); ++i) {
      *ms[i] = cfg.adam_beta1 * *ms[i] + (1.0 - cfg.adam_beta1) * *gs[i];
      *vs[i] = cfg.adam_beta2 * *vs[i] + (1.0 - cfg.adam_beta2) * gs[i]->cwiseProduct(*gs[i]);
      ps[i]->array() -= cfg.learning_rate * (ms[i]->array() / c1) /
                        ((vs[i]->array() / c2).sqrt() + cfg.adam_eps);
    }
  }

 private:
  Parameters m_, v_;
  std::size_t t_ = 0;
};

struct TrainItem {
  std::string example_id;
  EncodedInput input;
  std::vector<double> t_start;
  std::vector<double> t_end;
};

struct EpochLog {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double wall_seconds = 0.0;
};

struct TrainLog {
  std::vector<EpochLog> epochs;
  std::vector<std::string> truncated_ids;
  std::vector<std::string> skipped_ids;
};

using EpochCallback = std::function<void(std::size_t epoch, const SpanModel& model)>;

/// Fisher-Yates with a plain modulo draw, so the order only depends on the
/// 64-bit engine and not on the standard library's distributions.
inline std::vector<std::size_t> seeded_permutation(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng() % i]);
  return idx;
}

/// Mean per-example loss of the model on items, without updating anything.
inline double mean_loss(const SpanModel& model, const std::vector<TrainItem>& items) {
  if (items.empty()) throw ValidationError("mean_loss: no items");
  double total = 0.0;
  for (const auto& it : items) {
    const auto lg = model.forward(it.input);
    const auto ls = numeric::log_softmax(lg.start);
    const auto le = numeric::log_softmax(lg.end);
    for (std::size_t j = 0; j < it.t_start.size(); ++j) {
      if (it.t_start[j] > 0.0) total -= 0.5 * it.t_start[j] * ls[j];
      if (it.t_end[j] > 0.0) total -= 0.5 * it.t_end[j] * le[j];
    }
  }
  return total / static_cast<double>(items.size());
}

/// One Adam step on the batch mean loss. Returns the summed per-example loss.
inline double train_step(SpanModel& model, Adam& opt, const std::vector<TrainItem>& items,
                         const std::vector<std::size_t>& batch) {
  Parameters grad = model.params().zeros_like();
  const double scale = 1.0 / static_cast<double>(batch.size());
  double sum = 0.0;
  for (std::size_t k : batch) {
    const auto& it = items[k];
    sum += model.accumulate_gradient(it.input, it.t_start, it.t_end, scale, grad);
  }
  if (!std::isfinite(sum)) throw TrainingError("non-finite loss in batch starting at " + items[batch.front()].example_id);
  opt.step(model.mutable_params(), grad, model.config());
  return sum;
}

/// Mini-batch training for config.epochs epochs with a seeded shuffle per epoch.
inline TrainLog fit(SpanModel& model, const std::vector<TrainItem>& items, std::uint64_t shuffle_seed,
                    const EpochCallback& on_epoch = {}) {
  if (items.empty()) throw TrainingError("empty training set");
  const auto& cfg = model.config();
  Adam opt(model.params());
  std::mt19937_64 rng(shuffle_seed);
  TrainLog log;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto order = seeded_permutation(items.size(), rng);
    double total = 0.0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(b),
                                           order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), b + cfg.batch_size)));
      total += train_step(model, opt, items, batch);
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log.epochs.push_back({epoch, total / static_cast<double>(items.size()), secs});
    if (on_epoch) on_epoch(epoch, model);
  }
  return log;
}

inline std::vector<double> one_hot(std::size_t n, std::size_t k) {
  std::vector<double> v(n, 0.0);
  v.at(k) = 1.0;
  return v;
}

/// One-hot targets on the first gold span. Returns nullopt when truncation
/// removed every gold span.
inline std::optional<TrainItem> onehot_item(const SpanModel& model, const corpus::TokenizedExample& tok) {
  if (tok.gold_spans.empty()) return std::nullopt;
  TrainItem it;
  it.example_id = tok.example_id;
  it.input = model.encode(tok);
  it.t_start = one_hot(it.input.n_context, tok.gold_spans.front().start);
  it.t_end = one_hot(it.input.n_context, tok.gold_spans.front().end);
  return it;
}

struct TrainedModel {
  SpanModel model;
  TrainLog log;
};

/// Builds the vocabulary from vocab_examples (train_examples when empty).
inline corpus::Vocab model_vocab(const SpanModelConfig& cfg, const std::vector<corpus::Example>& vocab_examples) {
  return corpus::build_vocab(vocab_examples, cfg.vocab_min_freq);
}

/// Teacher training: one-hot cross-entropy, init and shuffle seeded by config.seed.
inline TrainedModel train_teacher(const SpanModelConfig& cfg, const corpus::Vocab& vocab,
                                  const std::vector<corpus::Example>& train_examples,
                                  const EpochCallback& on_epoch = {}) {
  if (train_examples.empty()) throw TrainingError("empty training set");
  SpanModel model(cfg, vocab);
  std::vector<TrainItem> items;
  TrainLog log;
  for (const auto& ex : train_examples) {
    bool cut = false;
    const auto tok = prepare_example(ex, cfg.max_seq_len, &cut);
    if (cut) log.truncated_ids.push_back(ex.id);
    auto item = onehot_item(model, tok);
    if (item)
      items.push_back(std::move(*item));
    else
      log.skipped_ids.push_back(ex.id);
  }
  auto fitted = fit(model, items, cfg.seed, on_epoch);
  log.epochs = std::move(fitted.epochs);
  return {std::move(model), std::move(log)};
}

inline json to_json(const EpochLog& e, bool with_time = true) {
  json j = {{"epoch", e.epoch}, {"mean_loss", e.mean_loss}};
  if (with_time) j["wall_seconds"] = e.wall_seconds;
  return j;
}

inline std::string training_log_jsonl(const TrainLog& log) {
  std::vector<json> recs;
  for (const auto& e : log.epochs) recs.push_back(to_json(e));
  return io::to_jsonl(recs);
}

// ---------------------------------------------------------------------------
// Inference

inline SpanPrediction predict(const SpanModel& model, const corpus::Example& ex) {
  const auto tok = prepare_example(ex, model.config().max_seq_len);
  const auto lg = model.forward(tok);
  auto pred = decode_span(lg.start, lg.end, model.config().max_answer_len);
  pred.answer_text = corpus::span_text(ex.context, tok, {pred.start_token, pred.end_token});
  return pred;
}

inline metrics::Predictions predict_all(const SpanModel& model, const std::vector<corpus::Example>& examples) {
  metrics::Predictions out;
  for (const auto& ex : examples) out[ex.id] = predict(model, ex).answer_text;
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr const char* kCheckpointFormat = "qadebias-checkpoint";
inline constexpr int kCheckpointVersion = 1;

inline json checkpoint_to_json(const SpanModel& model) {
  json tensors = json::array();
  model.params().visit([&](const std::string& name, const Matrix& m) {
    std::vector<double> data;
    data.reserve(static_cast<std::size_t>(m.size()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) data.push_back(m(r, c));
    tensors.push_back({{"name", name}, {"shape", {m.rows(), m.cols()}}, {"data", std::move(data)}});
  });
  return {{"format", kCheckpointFormat},
          {"version", kCheckpointVersion},
          {"config", to_json(model.config())},
          {"vocab", corpus::vocab_to_json(model.vocab())},
          {"tensors", std::move(tensors)}};
}

inline SpanModel checkpoint_from_json(const json& j, const std::string& where = "checkpoint") {
  if (!j.is_object() || j.value("format", std::string()) != kCheckpointFormat)
    throw ParseError(where + ": not a qadebias checkpoint");
  const int version = io::require<int>(j, "version", where);
  if (version != kCheckpointVersion)
    throw ParseError(where + ": unsupported checkpoint version " + std::to_string(version));
  const auto cfg = config_from_json(io::require<json>(j, "config", where), where + " config");
  auto vocab = corpus::vocab_from_json(io::require<json>(j, "vocab", where));
  Parameters params = init_parameters([&] {
    auto c = cfg;
    c.seed = 0;
    return c;
  }(), vocab.size());
  const auto& tensors = io::require<json>(j, "tensors", where);
  std::map<std::string, const json*> by_name;
  for (const auto& t : tensors) by_name[io::require<std::string>(t, "name", where)] = &t;
  std::size_t seen = 0;
  params.visit([&](const std::string& name, Matrix& m) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ParseError(where + ": missing tensor " + name);
    const auto shape = io::require<std::vector<long>>(*it->second, "shape", where);
    const auto data = io::require<std::vector<double>>(*it->second, "data", where);
    if (shape.size() != 2 || shape[0] != m.rows() || shape[1] != m.cols() ||
        data.size() != static_cast<std::size_t>(m.size()))
      throw ParseError(where + ": tensor " + name + " has the wrong shape");
    std::size_t k = 0;
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = data[k++];
    ++seen;
  });
  if (seen != by_name.size()) throw ParseError(where + ": unexpected extra tensors");
  return SpanModel(cfg, std::move(vocab), std::move(params));
}

inline void save_checkpoint(const SpanModel& model, const std::string& path) {
  io::write_file(path, checkpoint_to_json(model).dump());
}

inline SpanModel load_checkpoint(const std::string& path) {
  return checkpoint_from_json(io::read_json(path), path);
}

// ---------------------------------------------------------------------------
// Teacher cache

struct TeacherTargets {
  std::string example_id;
  std::vector<double> start_logprobs;
  std::vector<double> end_logprobs;
  std::string fingerprint;
};

inline void validate_targets(const TeacherTargets& t, const std::string& where) {
  for (const auto* lp : {&t.start_logprobs, &t.end_logprobs}) {
    if (lp->empty()) throw ValidationError(where + ": empty log-probability array");
    double s = 0.0;
    for (double v : *lp) {
      if (std::isnan(v) || v > 0.0) throw ValidationError(where + ": invalid log-probability");
      s += std::exp(v);
    }
    if (std::abs(s - 1.0) > 1e-6) throw ValidationError(where + ": probabilities do not sum to 1");
  }
  if (t.start_logprobs.size() != t.end_logprobs.size())
    throw ValidationError(where + ": start/end lengths differ");
}

inline TeacherTargets teacher_targets(const SpanModel& model, const corpus::Example& ex) {
  const auto tok = prepare_example(ex, model.config().max_seq_len);
  const auto lg = model.forward(tok);
  return {ex.id, numeric::log_softmax(lg.start), numeric::log_softmax(lg.end), model.fingerprint()};
}

/// Refuses when the model was built for a different tokenization.
inline std::vector<TeacherTargets> cache_teacher_outputs(const SpanModel& model,
                                                         const std::vector<corpus::Example>& examples,
                                                         const std::string& expected_fingerprint) {
  if (model.fingerprint() != expected_fingerprint)
    throw FingerprintError("model fingerprint " + model.fingerprint() +
                           " does not match tokenization fingerprint " + expected_fingerprint);
  std::vector<TeacherTargets> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) out.push_back(teacher_targets(model, ex));
  return out;
}

inline json to_json(const TeacherTargets& t) {
  return {{"example_id", t.example_id},
          {"start_logprobs", t.start_logprobs},
          {"end_logprobs", t.end_logprobs},
          {"fingerprint", t.fingerprint}};
}

inline void write_teacher_cache(const std::string& path, const std::vector<TeacherTargets>& records) {
  std::vector<json> lines;
  lines.reserve(records.size());
  for (const auto& r : records) lines.push_back(to_json(r));
  io::write_file(path, io::to_jsonl(lines));
}

using TeacherCache = std::map<std::string, TeacherTargets>;

inline TeacherCache read_teacher_cache(const std::string& path, const std::string& expected_fingerprint) {
  TeacherCache cache;
  io::for_each_jsonl(path, [&](const json& rec, std::size_t lineno) {
    const std::string where = path + ":" + std::to_string(lineno);
    TeacherTargets t;
    t.example_id = io::require<std::string>(rec, "example_id", where);
    t.start_logprobs = io::require<std::vector<double>>(rec, "start_logprobs", where);
    t.end_logprobs = io::require<std::vector<double>>(rec, "end_logprobs", where);
    t.fingerprint = io::require<std::string>(rec, "fingerprint", where);
    if (t.fingerprint != expected_fingerprint)
      throw FingerprintError(where + ": cache fingerprint " + t.fingerprint +
                             " does not match expected " + expected_fingerprint);
    validate_targets(t, where);
    if (!cache.emplace(t.example_id, t).second)
      throw ValidationError(where + ": duplicate example id " + t.example_id);
  });
  return cache;
}

}  // namespace qadebias::spanmodel
