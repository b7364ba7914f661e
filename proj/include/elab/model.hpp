// Copyright (c) 2026, the elab authors
// SPDX-License-Identifier: Apache-2.0
//
// Tiny pre-norm decoder-only transformer.
//
// Two forward implementations share one parameter layout:
//   * forward_tape records every op for training;
//   * Decoder runs one position at a time with a key/value cache and is used
//     for generation, scoring and instrumentation.
// Each block reads and writes the residual stream, so the L1 norm of block
// l's output is, by construction, the L1 norm of block l+1's input.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "elab/adam.hpp"
#include "elab/autodiff.hpp"
#include "elab/binary_io.hpp"
#include "elab/error.hpp"
#include "elab/rng.hpp"
#include "elab/tensor.hpp"

namespace elab {

using Token = std::int32_t;
using TokenSeq = std::vector<Token>;

namespace tok {
inline constexpr Token pad = 0;
inline constexpr Token bos = 1;
inline constexpr Token eos = 2;
inline constexpr Token sep = 3;
inline constexpr Token first_content = 4;
}  // namespace tok

struct ModelConfig {
  std::size_t vocab_size = 64;
  std::size_t d_model = 64;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t max_seq_len = 96;
  bool tie_embeddings = true;

  std::size_t head_dim() const { return d_model / n_heads; }
  std::size_t d_ff() const { return 4 * d_model; }

  void validate() const {
    if (vocab_size < 4) throw ContractError("model: vocab_size must be >= 4 (pad/bos/eos/sep are reserved)");
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
      throw ContractError("model: d_model must be a positive multiple of n_heads");
    if (n_layers == 0) throw ContractError("model: n_layers must be >= 1");
    if (max_seq_len < 2) throw ContractError("model: max_seq_len must be >= 2");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline constexpr double kLayerNormEps = 1e-5;

struct BlockSlots {
  std::size_t ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2;
};

/// Positions of each named tensor in a Parameters list.
struct Layout {
  std::size_t tok_emb = 0, pos_emb = 1;
  std::vector<BlockSlots> blocks;
  std::size_t lnf_g = 0, lnf_b = 0;
  std::optional<std::size_t> unembed;
  std::optional<std::size_t> head_w, head_b;
  std::size_t count = 0;

  Layout(const ModelConfig& cfg, bool scalar_head) {
    std::size_t i = 2;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      blocks.push_back(BlockSlots{i, i + 1, i + 2, i + 3, i + 4, i + 5, i + 6, i + 7, i + 8, i + 9, i + 10, i + 11});
      i += 12;
    }
    lnf_g = i++;
    lnf_b = i++;
    if (!cfg.tie_embeddings) unembed = i++;
    if (scalar_head) {
      head_w = i++;
      head_b = i++;
    }
    count = i;
  }
};

/// Model weights. With `scalar_head` the model also carries a linear head
/// producing one scalar per position (reward model, critic).
template <std::floating_point T>
struct Parameters {
  ModelConfig config;
  bool scalar_head = false;
  std::vector<std::string> names;
  std::vector<Tensor<T>> tensors;

  Layout layout() const { return Layout(config, scalar_head); }

  static Parameters zeros(const ModelConfig& cfg, bool head = false) {
    cfg.validate();
    Parameters p;
    p.config = cfg;
    p.scalar_head = head;
    const std::size_t d = cfg.d_model, f = cfg.d_ff();
    auto add = [&](std::string name, Shape shape) {
      p.names.push_back(std::move(name));
      p.tensors.emplace_back(std::move(shape));
    };
    add("tok_emb", {cfg.vocab_size, d});
    add("pos_emb", {cfg.max_seq_len, d});
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      const std::string b = "block" + std::to_string(l) + ".";
      add(b + "ln1.gain", {d});
      add(b + "ln1.bias", {d});
      add(b + "attn.wq", {d, d});
      add(b + "attn.wk", {d, d});
      add(b + "attn.wv", {d, d});
      add(b + "attn.wo", {d, d});
      add(b + "ln2.gain", {d});
      add(b + "ln2.bias", {d});
      add(b + "mlp.w1", {d, f});
      add(b + "mlp.b1", {f});
      add(b + "mlp.w2", {f, d});
      add(b + "mlp.b2", {d});
    }
    add("lnf.gain", {d});
    add("lnf.bias", {d});
    if (!cfg.tie_embeddings) add("unembed", {cfg.vocab_size, d});
    if (head) {
      add("head.w", {d, 1});
      add("head.b", {1});
    }
    return p;
  }

  /// GPT-2 style init: N(0, 0.02) weights, residual projections scaled by
  /// 1/sqrt(2 n_layers), unit norm gains, zero biases, zero scalar head.
  static Parameters random(const ModelConfig& cfg, Rng& rng, bool head = false) {
    Parameters p = zeros(cfg, head);
    const Layout lay = p.layout();
    const double base = 0.02;
    const double resid = base / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
    auto fill = [&](std::size_t idx, double sd) {
      for (auto& v : p.tensors[idx].data()) v = static_cast<T>(sd * rng.normal());
    };
    auto ones = [&](std::size_t idx) {
      for (auto& v : p.tensors[idx].data()) v = T{1};
    };
    fill(lay.tok_emb, base);
    fill(lay.pos_emb, base);
    for (const auto& b : lay.blocks) {
      ones(b.ln1_g);
      ones(b.ln2_g);
      fill(b.wq, base);
      fill(b.wk, base);
      fill(b.wv, base);
      fill(b.wo, resid);
      fill(b.w1, base);
      fill(b.w2, resid);
    }
    ones(lay.lnf_g);
    if (lay.unembed) fill(*lay.unembed, base);
    return p;
  }

  std::size_t index(std::string_view name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return i;
    throw ContractError("no parameter named '" + std::string(name) + "'");
  }
  Tensor<T>& get(std::string_view name) { return tensors[index(name)]; }
  const Tensor<T>& get(std::string_view name) const { return tensors[index(name)]; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.size();
    return n;
  }

  bool finite() const {
    return std::all_of(tensors.begin(), tensors.end(), [](const Tensor<T>& t) { return t.finite(); });
  }

  template <std::floating_point U>
  Parameters<U> cast() const {
    Parameters<U> out;
    out.config = config;
    out.scalar_head = scalar_head;
    out.names = names;
    for (const auto& t : tensors) out.tensors.push_back(t.template cast<U>());
    return out;
  }

  /// Same trunk with a freshly zeroed scalar head (critic / reward model init).
  Parameters with_scalar_head() const {
    Parameters out = zeros(config, true);
    const Layout src = layout();
    for (std::size_t i = 0; i < src.count; ++i) {
      if (src.head_w && (i == *src.head_w || i == *src.head_b)) continue;
      out.tensors[i] = tensors[i];
    }
    return out;
  }

  friend bool operator==(const Parameters& a, const Parameters& b) {
    return a.config == b.config && a.scalar_head == b.scalar_head && a.names == b.names && a.tensors == b.tensors;
  }
};

// ---------------------------------------------------------------------------
// Hidden-state trace

/// Residual-stream L1 norms per position. residual_l1[t][l] is the norm of the
/// vector entering block l at position t; residual_l1[t][n_layers] is the
/// output of the last block. Response positions are [response_begin, response_end).
struct HiddenTrace {
  std::size_t n_layers = 0;
  std::vector<std::vector<double>> residual_l1;
  std::size_t response_begin = 0;
  std::size_t response_end = 0;

  std::size_t length() const { return residual_l1.size(); }
  std::size_t response_length() const { return response_end - response_begin; }
  double in_l1(std::size_t layer, std::size_t t) const { return residual_l1[t][layer]; }
  double out_l1(std::size_t layer, std::size_t t) const { return residual_l1[t][layer + 1]; }
};

template <class T>
double l1_norm(std::span<const T> v) {
  double s = 0.0;
  for (T x : v) s += std::abs(static_cast<double>(x));
  return s;
}

// ---------------------------------------------------------------------------
// Tape forward (training path)

struct TapeOptions {
  bool logits = true;
  bool values = false;
  bool capture = false;
  bool requires_grad = true;
};

template <std::floating_point T>
struct TapeForward {
  std::vector<ad::Var<T>> params;
  ad::Var<T> hidden;  // final-normalized [len, d]
  ad::Var<T> logits;  // [len, vocab]
  ad::Var<T> values;  // [len, 1] when the model has a scalar head
  std::optional<HiddenTrace> trace;
};

/// Binds every parameter tensor as a leaf on `tape`.
template <std::floating_point T>
std::vector<ad::Var<T>> bind_parameters(ad::Tape<T>& tape, const Parameters<T>& p, bool requires_grad = true) {
  std::vector<ad::Var<T>> out;
  out.reserve(p.tensors.size());
  for (const auto& t : p.tensors) out.push_back(tape.leaf(t, requires_grad));
  return out;
}

/// Forward pass over leaves previously bound with bind_parameters, so several
/// sequences can share one set of parameter gradients.
template <std::floating_point T>
TapeForward<T> forward_tape(ad::Tape<T>& /*tape*/, const Parameters<T>& p, std::vector<ad::Var<T>> bound,
                            std::span<const Token> tokens, TapeOptions opts = {}) {
  const ModelConfig& cfg = p.config;
  if (tokens.empty()) throw ContractError("forward: empty token sequence");
  if (tokens.size() > cfg.max_seq_len)
    throw LengthError("forward: sequence length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
                      std::to_string(cfg.max_seq_len));
  if (bound.size() != p.tensors.size()) throw ContractError("forward: bound parameter count mismatch");
  using ad::Var;
  const Layout lay = p.layout();
  TapeForward<T> out;
  out.params = std::move(bound);
  const auto& w = out.params;
  const std::size_t len = tokens.size(), d = cfg.d_model, dh = cfg.head_dim();
  std::vector<int> ids(tokens.begin(), tokens.end());
  std::vector<int> pos(len);
  for (std::size_t i = 0; i < len; ++i) pos[i] = static_cast<int>(i);

  if (opts.capture) {
    out.trace.emplace();
    out.trace->n_layers = cfg.n_layers;
    out.trace->residual_l1.assign(len, std::vector<double>(cfg.n_layers + 1, 0.0));
  }
  auto capture = [&](Var<T> x, std::size_t slot) {
    if (!out.trace) return;
    const auto v = x.value();
    for (std::size_t t = 0; t < len; ++t) out.trace->residual_l1[t][slot] = l1_norm<T>(v.subspan(t * d, d));
  };

  const T eps = static_cast<T>(kLayerNormEps);
  const T inv_sqrt_dh = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  Var<T> x = ad::add(ad::embedding(w[lay.tok_emb], ids), ad::embedding(w[lay.pos_emb], pos));
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const BlockSlots& b = lay.blocks[l];
    capture(x, l);
    Var<T> a = ad::layer_norm(x, w[b.ln1_g], w[b.ln1_b], eps);
    Var<T> q = ad::matmul(a, w[b.wq]);
    Var<T> k = ad::matmul(a, w[b.wk]);
    Var<T> v = ad::matmul(a, w[b.wv]);
    std::vector<Var<T>> heads;
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      Var<T> qh = ad::slice_cols(q, h * dh, dh);
      Var<T> kh = ad::slice_cols(k, h * dh, dh);
      Var<T> vh = ad::slice_cols(v, h * dh, dh);
      Var<T> att = ad::softmax_rows(ad::scale(ad::matmul_bt(qh, kh), inv_sqrt_dh), true);
      heads.push_back(ad::matmul(att, vh));
    }
    Var<T> merged = cfg.n_heads == 1 ? heads[0] : ad::concat_cols<T>(heads);
    x = ad::add(x, ad::matmul(merged, w[b.wo]));
    Var<T> c = ad::layer_norm(x, w[b.ln2_g], w[b.ln2_b], eps);
    Var<T> f = ad::add_bias(ad::matmul(ad::gelu(ad::add_bias(ad::matmul(c, w[b.w1]), w[b.b1])), w[b.w2]), w[b.b2]);
    x = ad::add(x, f);
  }
  capture(x, cfg.n_layers);
  out.hidden = ad::layer_norm(x, w[lay.lnf_g], w[lay.lnf_b], eps);
  if (opts.logits) out.logits = ad::matmul_bt(out.hidden, w[lay.unembed ? *lay.unembed : lay.tok_emb]);
  if (opts.values) {
    if (!lay.head_w) throw ContractError("forward: model has no scalar head");
    out.values = ad::add_bias(ad::matmul(out.hidden, w[*lay.head_w]), w[*lay.head_b]);
  }
  return out;
}

template <std::floating_point T>
TapeForward<T> forward_tape(ad::Tape<T>& tape, const Parameters<T>& p, std::span<const Token> tokens,
                            TapeOptions opts = {}) {
  return forward_tape(tape, p, bind_parameters(tape, p, opts.requires_grad), tokens, opts);
}

/// Gradients of the last backward() w.r.t. every bound parameter.
template <std::floating_point T>
Gradients<T> collect_gradients(const ad::Tape<T>& tape, const std::vector<ad::Var<T>>& params) {
  Gradients<T> g;
  g.reserve(params.size());
  for (const auto& v : params) {
    const auto s = tape.grad(v);
    g.emplace_back(s.begin(), s.end());
  }
  return g;
}

template <std::floating_point T>
void accumulate_gradients(Gradients<T>& into, const Gradients<T>& g) {
  if (into.empty()) {
    into = g;
    return;
  }
  for (std::size_t k = 0; k < g.size(); ++k)
    for (std::size_t i = 0; i < g[k].size(); ++i) into[k][i] += g[k][i];
}

// ---------------------------------------------------------------------------
// Incremental decoder (inference path)

template <std::floating_point T>
class Decoder {
 public:
  explicit Decoder(const Parameters<T>& params, bool compute_logits = true)
      : p_(&params), lay_(params.layout()), compute_logits_(compute_logits) {
    const auto& cfg = params.config;
    keys_.resize(cfg.n_layers);
    vals_.resize(cfg.n_layers);
    x_.resize(cfg.d_model);
    a_.resize(cfg.d_model);
    tmp_.resize(cfg.d_model);
    q_.resize(cfg.d_model);
    ff_.resize(cfg.d_ff());
    hidden_.resize(cfg.d_model);
    logits_.resize(cfg.vocab_size);
    residual_.resize(cfg.n_layers + 1);
  }

  std::size_t length() const noexcept { return len_; }
  std::span<const T> logits() const noexcept { return logits_; }
  std::span<const T> hidden() const noexcept { return hidden_; }
  const std::vector<double>& residual_l1() const noexcept { return residual_; }

  T head_value() const {
    if (!lay_.head_w) throw ContractError("decoder: model has no scalar head");
    const auto& wv = p_->tensors[*lay_.head_w].data();
    T s = p_->tensors[*lay_.head_b][0];
    for (std::size_t j = 0; j < hidden_.size(); ++j) s += hidden_[j] * wv[j];
    return s;
  }

  void push(Token token) {
    const ModelConfig& cfg = p_->config;
    if (len_ >= cfg.max_seq_len) throw LengthError("decoder: context of " + std::to_string(cfg.max_seq_len) + " is full");
    if (token < 0 || static_cast<std::size_t>(token) >= cfg.vocab_size) throw IndexError("decoder: token out of range");
    const std::size_t d = cfg.d_model, dh = cfg.head_dim(), f = cfg.d_ff(), pos = len_;
    const auto& W = p_->tensors;
    const T* te = W[lay_.tok_emb].data().data() + static_cast<std::size_t>(token) * d;
    const T* pe = W[lay_.pos_emb].data().data() + pos * d;
    for (std::size_t j = 0; j < d; ++j) x_[j] = te[j] + pe[j];
    const T inv_sqrt_dh = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    std::vector<T> scores(pos + 1);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      const BlockSlots& b = lay_.blocks[l];
      residual_[l] = l1_norm<T>(x_);
      norm(x_, W[b.ln1_g].data(), W[b.ln1_b].data(), a_);
      auto& kc = keys_[l];
      auto& vc = vals_[l];
      kc.resize((pos + 1) * d);
      vc.resize((pos + 1) * d);
      vecmat(a_, W[b.wq].data(), d, q_.data());
      vecmat(a_, W[b.wk].data(), d, kc.data() + pos * d);
      vecmat(a_, W[b.wv].data(), d, vc.data() + pos * d);
      std::fill(tmp_.begin(), tmp_.end(), T{0});
      for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        const std::size_t off = h * dh;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j <= pos; ++j) {
          T s{0};
          for (std::size_t c = 0; c < dh; ++c) s += q_[off + c] * kc[j * d + off + c];
          scores[j] = s * inv_sqrt_dh;
          mx = std::max(mx, scores[j]);
        }
        T z{0};
        for (std::size_t j = 0; j <= pos; ++j) {
          scores[j] = std::exp(scores[j] - mx);
          z += scores[j];
        }
        for (std::size_t j = 0; j <= pos; ++j) {
          const T pj = scores[j] / z;
          for (std::size_t c = 0; c < dh; ++c) tmp_[off + c] += pj * vc[j * d + off + c];
        }
      }
      std::vector<T> proj(d, T{0});
      vecmat(tmp_, W[b.wo].data(), d, proj.data());
      for (std::size_t j = 0; j < d; ++j) x_[j] += proj[j];
      norm(x_, W[b.ln2_g].data(), W[b.ln2_b].data(), a_);
      std::copy(W[b.b1].data().begin(), W[b.b1].data().end(), ff_.begin());
      vecmat_acc(a_, W[b.w1].data(), f, ff_.data());
      constexpr T kC = static_cast<T>(0.7978845608028654);
      constexpr T kA = static_cast<T>(0.044715);
      for (auto& u : ff_) u = T{0.5} * u * (T{1} + std::tanh(kC * (u + kA * u * u * u)));
      std::copy(W[b.b2].data().begin(), W[b.b2].data().end(), proj.begin());
      vecmat_acc(ff_, W[b.w2].data(), d, proj.data());
      for (std::size_t j = 0; j < d; ++j) x_[j] += proj[j];
    }
    residual_[cfg.n_layers] = l1_norm<T>(x_);
    norm(x_, W[lay_.lnf_g].data(), W[lay_.lnf_b].data(), hidden_);
    if (compute_logits_) {
      const T* E = W[lay_.unembed ? *lay_.unembed : lay_.tok_emb].data().data();
      for (std::size_t v = 0; v < cfg.vocab_size; ++v) {
        T s{0};
        for (std::size_t j = 0; j < d; ++j) s += hidden_[j] * E[v * d + j];
        logits_[v] = s;
      }
    }
    ++len_;
  }

 private:
  static void norm(std::span<const T> x, std::span<const T> g, std::span<const T> b, std::vector<T>& out) {
    const std::size_t d = x.size();
    T mu{0};
    for (T v : x) mu += v;
    mu /= static_cast<T>(d);
    T var{0};
    for (T v : x) var += (v - mu) * (v - mu);
    var /= static_cast<T>(d);
    const T rs = T{1} / std::sqrt(var + static_cast<T>(kLayerNormEps));
    for (std::size_t j = 0; j < d; ++j) out[j] = (x[j] - mu) * rs * g[j] + b[j];
  }
  // out[n] = v[k] * M[k,n]
  static void vecmat(std::span<const T> v, std::span<const T> m, std::size_t n, T* out) {
    std::fill(out, out + n, T{0});
    vecmat_acc(v, m, n, out);
  }
  static void vecmat_acc(std::span<const T> v, std::span<const T> m, std::size_t n, T* out) {
    for (std::size_t p = 0; p < v.size(); ++p) {
      const T vp = v[p];
      const T* row = m.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) out[j] += vp * row[j];
    }
  }

  const Parameters<T>* p_;
  Layout lay_;
  bool compute_logits_;
  std::size_t len_ = 0;
  std::vector<std::vector<T>> keys_, vals_;
  std::vector<T> x_, a_, tmp_, q_, ff_, hidden_, logits_;
  std::vector<double> residual_;
};

/// Logits for every position and, optionally, the residual trace.
struct ForwardResult {
  std::vector<std::vector<double>> logits;
  std::optional<HiddenTrace> trace;
};

template <std::floating_point T>
ForwardResult forward(const Parameters<T>& params, std::span<const Token> tokens, bool capture = false) {
  if (tokens.size() > params.config.max_seq_len)
    throw LengthError("forward: sequence length " + std::to_string(tokens.size()) + " exceeds max_seq_len");
  ForwardResult out;
  Decoder<T> dec(params);
  if (capture) {
    out.trace.emplace();
    out.trace->n_layers = params.config.n_layers;
  }
  for (Token t : tokens) {
    dec.push(t);
    out.logits.emplace_back(dec.logits().begin(), dec.logits().end());
    if (capture) out.trace->residual_l1.push_back(dec.residual_l1());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Distributions over next tokens

/// log softmax(logits / temperature) in 64-bit.
template <class T>
std::vector<double> log_softmax(std::span<const T> logits, double temperature = 1.0) {
  std::vector<double> out(logits.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = static_cast<double>(logits[i]) / temperature;
    mx = std::max(mx, out[i]);
  }
  double s = 0.0;
  for (double v : out) s += std::exp(v - mx);
  const double lse = mx + std::log(s);
  for (double& v : out) v -= lse;
  return out;
}

struct SamplingConfig {
  double temperature = 1.0;
  double top_p = 1.0;
  std::size_t max_new_tokens = 12;
  bool greedy = false;
  std::uint64_t seed = 0;

  void validate() const {
    if (!greedy && !(temperature > 0.0)) throw ContractError("sampling: temperature must be > 0 unless greedy");
    if (!(top_p > 0.0 && top_p <= 1.0)) throw ContractError("sampling: top_p must be in (0, 1]");
  }
};

/// Nucleus-truncated, renormalized distribution: probabilities outside the
/// smallest prefix (by descending probability, ties by index) whose mass
/// reaches top_p are zero.
inline std::vector<double> nucleus_distribution(const std::vector<double>& logp, double top_p) {
  std::vector<double> probs(logp.size());
  for (std::size_t i = 0; i < logp.size(); ++i) probs[i] = std::exp(logp[i]);
  if (top_p >= 1.0) return probs;
  std::vector<std::size_t> order(probs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  double mass = 0.0;
  std::size_t keep = 0;
  while (keep < order.size()) {
    mass += probs[order[keep]];
    ++keep;
    if (mass >= top_p) break;
  }
  std::vector<double> out(probs.size(), 0.0);
  for (std::size_t i = 0; i < keep; ++i) out[order[i]] = probs[order[i]] / mass;
  return out;
}

struct Generation {
  TokenSeq response;
  /// log-probability of each sampled token under the distribution it was
  /// drawn from (temperature and nucleus applied). Greedy decoding logs the
  /// untempered model log-probability.
  std::vector<double> logprobs;
  /// log softmax(logits / temperature) of each token without truncation;
  /// this is the quantity a policy-gradient learner differentiates.
  std::vector<double> policy_logprobs;
  /// entropy of the untruncated tempered distribution at each step.
  std::vector<double> entropies;
  HiddenTrace trace;
};

template <std::floating_point T>
Generation generate(const Parameters<T>& params, std::span<const Token> prompt, const SamplingConfig& cfg) {
  cfg.validate();
  if (prompt.empty()) throw ContractError("generate: empty prompt");
  if (prompt.size() + cfg.max_new_tokens > params.config.max_seq_len)
    throw LengthError("generate: prompt + max_new_tokens exceeds max_seq_len");
  Rng rng(cfg.seed, "generate");
  Generation g;
  g.trace.n_layers = params.config.n_layers;
  Decoder<T> dec(params);
  for (Token t : prompt) {
    dec.push(t);
    g.trace.residual_l1.push_back(dec.residual_l1());
  }
  g.trace.response_begin = g.trace.response_end = prompt.size();
  const double temp = cfg.greedy ? 1.0 : cfg.temperature;
  for (std::size_t step = 0; step < cfg.max_new_tokens; ++step) {
    const auto logp = log_softmax<T>(dec.logits(), temp);
    double ent = 0.0;
    for (double lp : logp) ent -= std::exp(lp) * lp;
    Token next = 0;
    double sample_lp = 0.0;
    if (cfg.greedy) {
      next = static_cast<Token>(std::max_element(logp.begin(), logp.end()) - logp.begin());
      sample_lp = logp[static_cast<std::size_t>(next)];
    } else {
      const auto probs = nucleus_distribution(logp, cfg.top_p);
      const double u = rng.uniform();
      double acc = 0.0;
      std::size_t pick = probs.size();
      for (std::size_t i = 0; i < probs.size(); ++i) {
        if (probs[i] <= 0.0) continue;
        acc += probs[i];
        pick = i;
        if (u < acc) break;
      }
      next = static_cast<Token>(pick);
      sample_lp = std::log(probs[pick]);
    }
    g.response.push_back(next);
    g.logprobs.push_back(sample_lp);
    g.policy_logprobs.push_back(logp[static_cast<std::size_t>(next)]);
    g.entropies.push_back(ent);
    dec.push(next);
    g.trace.residual_l1.push_back(dec.residual_l1());
    g.trace.response_end = dec.length();
    if (next == tok::eos) break;
  }
  return g;
}

struct SequenceScore {
  double total_logprob = 0.0;
  double perplexity = 0.0;
  std::vector<double> token_logprobs;
};

/// Log-probability of `continuation` after `context`. An empty context is
/// replaced by a lone bos so the first continuation token has a predecessor.
template <std::floating_point T>
SequenceScore sequence_logprob(const Parameters<T>& params, std::span<const Token> context,
                               std::span<const Token> continuation, double temperature = 1.0) {
  if (continuation.empty()) throw ContractError("sequence_logprob: empty continuation");
  TokenSeq seq = context.empty() ? TokenSeq{tok::bos} : TokenSeq(context.begin(), context.end());
  const std::size_t ctx = seq.size();
  seq.insert(seq.end(), continuation.begin(), continuation.end());
  if (seq.size() > params.config.max_seq_len) throw LengthError("sequence_logprob: sequence exceeds max_seq_len");
  Decoder<T> dec(params);
  SequenceScore s;
  for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
    dec.push(seq[i]);
    if (i + 1 >= ctx) {
      const auto lp = log_softmax<T>(dec.logits(), temperature);
      s.token_logprobs.push_back(lp[static_cast<std::size_t>(seq[i + 1])]);
      s.total_logprob += s.token_logprobs.back();
    }
  }
  s.perplexity = std::exp(-s.total_logprob / static_cast<double>(continuation.size()));
  return s;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Little-endian layout:
//   "ELPM" | version u32 | vocab_size u32 | d_model u32 | n_layers u32 |
//   n_heads u32 | max_seq_len u32 | tie_embeddings u8 | scalar_head u8 |
//   tensor count u32 | per tensor: name len u32, name bytes, rank u32,
//   dims u32 x rank, float32 x prod(dims)

inline constexpr char kCheckpointMagic[4] = {'E', 'L', 'P', 'M'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void write_tensor(std::ostream& os, const std::string& name, const Tensor<float>& t) {
  binio::put_string(os, name);
  binio::put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) binio::put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  for (float v : t.data()) binio::put<float>(os, v);
}

inline std::pair<std::string, Tensor<float>> read_tensor(std::istream& is) {
  std::string name = binio::get_string(is);
  const auto rank = binio::get<std::uint32_t>(is);
  if (rank > 8) throw IoError("checkpoint: implausible tensor rank");
  Shape shape;
  for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(binio::get<std::uint32_t>(is));
  if (shape_size(shape) > (1u << 28)) throw IoError("checkpoint: implausible tensor size");
  std::vector<float> data(shape_size(shape));
  for (auto& v : data) v = binio::get<float>(is);
  return {std::move(name), Tensor<float>(std::move(shape), std::move(data))};
}

}  // namespace detail

inline void save_checkpoint(std::ostream& os, const Parameters<float>& p) {
  os.write(kCheckpointMagic, 4);
  binio::put<std::uint32_t>(os, kCheckpointVersion);
  for (auto v : {p.config.vocab_size, p.config.d_model, p.config.n_layers, p.config.n_heads, p.config.max_seq_len})
    binio::put<std::uint32_t>(os, static_cast<std::uint32_t>(v));
  binio::put<std::uint8_t>(os, p.config.tie_embeddings ? 1 : 0);
  binio::put<std::uint8_t>(os, p.scalar_head ? 1 : 0);
  binio::put<std::uint32_t>(os, static_cast<std::uint32_t>(p.tensors.size()));
  for (std::size_t i = 0; i < p.tensors.size(); ++i) detail::write_tensor(os, p.names[i], p.tensors[i]);
}

inline Parameters<float> load_checkpoint(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || !std::equal(magic, magic + 4, kCheckpointMagic)) throw IoError("checkpoint: bad magic");
  if (binio::get<std::uint32_t>(is) != kCheckpointVersion) throw IoError("checkpoint: unsupported version");
  ModelConfig cfg;
  cfg.vocab_size = binio::get<std::uint32_t>(is);
  cfg.d_model = binio::get<std::uint32_t>(is);
  cfg.n_layers = binio::get<std::uint32_t>(is);
  cfg.n_heads = binio::get<std::uint32_t>(is);
  cfg.max_seq_len = binio::get<std::uint32_t>(is);
  cfg.tie_embeddings = binio::get<std::uint8_t>(is) != 0;
  const bool head = binio::get<std::uint8_t>(is) != 0;
  Parameters<float> p = Parameters<float>::zeros(cfg, head);
  const auto n = binio::get<std::uint32_t>(is);
  if (n != p.tensors.size()) throw IoError("checkpoint: tensor count does not match config");
  for (std::uint32_t i = 0; i < n; ++i) {
    auto [name, t] = detail::read_tensor(is);
    if (name != p.names[i] || t.shape() != p.tensors[i].shape())
      throw IoError("checkpoint: unexpected tensor '" + name + "'");
    p.tensors[i] = std::move(t);
  }
  return p;
}

inline void save_checkpoint(const std::string& path, const Parameters<float>& p) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  save_checkpoint(os, p);
  if (!os) throw IoError("write failed: " + path);
}

inline Parameters<float> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  return load_checkpoint(is);
}

/// Optimizer sidecar: "ELAO" | version u32 | step u64 | lr, beta1, beta2, eps f64 |
/// count u32 | first moments then second moments as named rank-1 tensors.
inline void save_optimizer(const std::string& path, const AdamState<float>& s, const std::vector<std::string>& names) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os.write("ELAO", 4);
  binio::put<std::uint32_t>(os, 1);
  binio::put<std::uint64_t>(os, s.step);
  for (double v : {s.lr, s.beta1, s.beta2, s.eps}) binio::put<double>(os, v);
  binio::put<std::uint32_t>(os, static_cast<std::uint32_t>(s.m.size()));
  for (std::size_t i = 0; i < s.m.size(); ++i)
    detail::write_tensor(os, "m." + names.at(i), Tensor<float>({s.m[i].size()}, s.m[i]));
  for (std::size_t i = 0; i < s.v.size(); ++i)
    detail::write_tensor(os, "v." + names.at(i), Tensor<float>({s.v[i].size()}, s.v[i]));
}

inline AdamState<float> load_optimizer(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != "ELAO") throw IoError("optimizer: bad magic");
  if (binio::get<std::uint32_t>(is) != 1) throw IoError("optimizer: unsupported version");
  AdamState<float> s;
  s.step = binio::get<std::uint64_t>(is);
  s.lr = binio::get<double>(is);
  s.beta1 = binio::get<double>(is);
  s.beta2 = binio::get<double>(is);
  s.eps = binio::get<double>(is);
  const auto n = binio::get<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < n; ++i) s.m.push_back(detail::read_tensor(is).second.storage());
  for (std::uint32_t i = 0; i < n; ++i) s.v.push_back(detail::read_tensor(is).second.storage());
  return s;
}

}  // namespace elab
