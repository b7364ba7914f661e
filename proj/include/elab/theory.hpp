// Copyright (c) 2026, the elab authors
// SPDX-License-Identifier: Apache-2.0
//
// Exact prompt/response joint distributions of micro models, information
// quantities in nats, Gaussian-envelope bounds in terms of energy loss, and
// the contextual dependency score.

#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "elab/energy.hpp"
#include "elab/error.hpp"
#include "elab/format.hpp"
#include "elab/model.hpp"
#include "elab/stats.hpp"

namespace elab {

struct EnumerationSetting {
  Parameters<double> policy;
  std::vector<TokenSeq> prompts;
  std::vector<double> priors;
  std::vector<Token> vocab;  // symbols a response may use; eos, if listed, ends the response
  std::size_t max_len = 3;
  double temperature = 1.0;  // 0 selects argmax decoding
};

struct JointTable {
  std::size_t n_layers = 0;
  std::vector<double> px;
  std::vector<TokenSeq> responses;
  std::vector<std::vector<double>> pyx;                  // [x][y]
  std::vector<std::vector<std::vector<double>>> energy;  // [x][y][layer]
  std::vector<std::vector<double>> out_l1;               // [x][y], mean last-block output L1

  double pxy(std::size_t x, std::size_t y) const { return px[x] * pyx[x][y]; }
};

inline constexpr double kMaxEnumeration = 1e5;

namespace detail {

/// Next-symbol distribution renormalised over the enumeration vocabulary.
template <class T>
std::vector<double> restricted_distribution(std::span<const T> logits, std::span<const Token> vocab, double temperature) {
  std::vector<double> p(vocab.size(), 0.0);
  if (temperature == 0.0) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < vocab.size(); ++i)
      if (logits[static_cast<std::size_t>(vocab[i])] > logits[static_cast<std::size_t>(vocab[best])]) best = i;
    p[best] = 1.0;
    return p;
  }
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    p[i] = static_cast<double>(logits[static_cast<std::size_t>(vocab[i])]) / temperature;
    mx = std::max(mx, p[i]);
  }
  double z = 0.0;
  for (double& v : p) {
    v = std::exp(v - mx);
    z += v;
  }
  for (double& v : p) v /= z;
  return p;
}

inline void enumerate_responses(std::span<const Token> vocab, std::size_t max_len, TokenSeq& prefix,
                                std::vector<TokenSeq>& out) {
  if (!prefix.empty() && (prefix.back() == tok::eos || prefix.size() == max_len)) {
    out.push_back(prefix);
    return;
  }
  if (max_len == 0) {
    out.push_back(prefix);
    return;
  }
  for (Token s : vocab) {
    prefix.push_back(s);
    enumerate_responses(vocab, max_len, prefix, out);
    prefix.pop_back();
  }
}

struct EnumCursor {
  const std::vector<Token>* vocab;
  std::size_t max_len;
  double temperature;
  std::size_t n_layers;
  std::size_t next = 0;
  std::vector<double>* pyx;
  std::vector<std::vector<double>>* energy;
  std::vector<double>* out_l1;
};

/// Depth-first walk in the same order as enumerate_responses. `sums` holds the
/// running per-layer energy sums and last-block output sum over the prefix.
inline void walk(EnumCursor& c, const Decoder<double>& dec, std::size_t depth, Token last, double prob,
                 const std::vector<double>& sums) {
  if (depth > 0 && (last == tok::eos || depth == c.max_len)) {
    const double n = static_cast<double>(depth);
    (*c.pyx)[c.next] = prob;
    auto& e = (*c.energy)[c.next];
    e.resize(c.n_layers);
    for (std::size_t l = 0; l < c.n_layers; ++l) e[l] = sums[l] / n;
    (*c.out_l1)[c.next] = sums[c.n_layers] / n;
    ++c.next;
    return;
  }
  const auto dist = restricted_distribution<double>(dec.logits(), *c.vocab, c.temperature);
  for (std::size_t i = 0; i < c.vocab->size(); ++i) {
    Decoder<double> child = dec;
    child.push((*c.vocab)[i]);
    const auto& r = child.residual_l1();
    std::vector<double> s = sums;
    for (std::size_t l = 0; l < c.n_layers; ++l) s[l] += r[l] - r[l + 1];
    s[c.n_layers] += r[c.n_layers];
    walk(c, child, depth + 1, (*c.vocab)[i], prob * dist[i], s);
  }
}

}  // namespace detail

inline JointTable enumerate_joint(const EnumerationSetting& s) {
  if (s.prompts.empty()) throw ContractError("enumerate_joint: no prompts");
  if (s.priors.size() != s.prompts.size()) throw ContractError("enumerate_joint: one prior per prompt required");
  double total = 0.0;
  for (double p : s.priors) {
    if (!(p >= 0.0)) throw ContractError("enumerate_joint: priors must be nonnegative");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ContractError("enumerate_joint: priors must sum to 1");
  if (s.vocab.empty() || s.vocab.size() > 8) throw ContractError("enumerate_joint: enumeration vocab must have 1..8 symbols");
  if (s.max_len < 1 || s.max_len > 4) throw ContractError("enumerate_joint: max response length must be in 1..4");
  if (std::pow(static_cast<double>(s.vocab.size()), static_cast<double>(s.max_len)) > kMaxEnumeration)
    throw ContractError("enumerate_joint: enumeration space exceeds 1e5 sequences per prompt");
  if (!(s.temperature >= 0.0)) throw ContractError("enumerate_joint: temperature must be >= 0");
  for (Token t : s.vocab)
    if (t < 0 || static_cast<std::size_t>(t) >= s.policy.config.vocab_size)
      throw IndexError("enumerate_joint: vocab symbol outside the model vocabulary");
  {
    std::vector<Token> sorted = s.vocab;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
      throw ContractError("enumerate_joint: duplicate vocab symbol");
  }

  JointTable jt;
  jt.n_layers = s.policy.config.n_layers;
  jt.px = s.priors;
  TokenSeq prefix;
  detail::enumerate_responses(s.vocab, s.max_len, prefix, jt.responses);
  const std::size_t ny = jt.responses.size();
  for (const auto& x : s.prompts) {
    if (x.empty()) throw ContractError("enumerate_joint: empty prompt");
    if (x.size() + s.max_len > s.policy.config.max_seq_len) throw LengthError("enumerate_joint: prompt too long");
    jt.pyx.emplace_back(ny, 0.0);
    jt.energy.emplace_back(ny);
    jt.out_l1.emplace_back(ny, 0.0);
    Decoder<double> dec(s.policy);
    for (Token t : x) dec.push(t);
    detail::EnumCursor c{&s.vocab, s.max_len, s.temperature, jt.n_layers, 0, &jt.pyx.back(), &jt.energy.back(),
                         &jt.out_l1.back()};
    detail::walk(c, dec, 0, tok::pad, 1.0, std::vector<double>(jt.n_layers + 1, 0.0));
  }
  return jt;
}

// ---------------------------------------------------------------------------
// Information quantities (nats)

inline double plogp(double p) { return p > 0.0 ? p * std::log(p) : 0.0; }

inline std::vector<double> output_marginal(const JointTable& t) {
  std::vector<double> py(t.responses.size(), 0.0);
  for (std::size_t x = 0; x < t.px.size(); ++x)
    for (std::size_t y = 0; y < py.size(); ++y) py[y] += t.px[x] * t.pyx[x][y];
  return py;
}

inline double output_entropy(const JointTable& t) {
  double h = 0.0;
  for (double p : output_marginal(t)) h -= plogp(p);
  return h;
}

inline double prompt_entropy(const JointTable& t) {
  double h = 0.0;
  for (double p : t.px) h -= plogp(p);
  return h;
}

inline double conditional_entropy(const JointTable& t) {
  double h = 0.0;
  for (std::size_t x = 0; x < t.px.size(); ++x)
    for (double p : t.pyx[x]) h -= t.px[x] * plogp(p);
  return h;
}

inline double mutual_information(const JointTable& t) {
  const auto py = output_marginal(t);
  double mi = 0.0;
  for (std::size_t x = 0; x < t.px.size(); ++x)
    for (std::size_t y = 0; y < py.size(); ++y) {
      const double pxy = t.pxy(x, y);
      if (pxy > 0.0) mi += pxy * std::log(pxy / (t.px[x] * py[y]));
    }
  return mi;
}

// ---------------------------------------------------------------------------
// Bounds

struct WeightedSample {
  double value = 0.0;
  double prob = 0.0;
};

struct BoundValue {
  double rhs = 0.0;
  double second_moment = 0.0;  // E[(v + alpha)^2]
  double sigma = 0.0;
};

inline constexpr double kDegenerateVariance = 1e-12;

/// E[(v + alpha)^2] / (2 sigma^2) + ln sqrt(2 pi sigma^2). Without `sigma` the
/// minimising sigma^2 = E[(v + alpha)^2] is used (kDegenerateVariance when that is 0).
inline BoundValue bound_rhs(std::span<const WeightedSample> samples, double alpha, std::optional<double> sigma = {}) {
  if (samples.empty()) throw ContractError("bound_rhs: no samples");
  double mass = 0.0, m2 = 0.0;
  for (const auto& s : samples) {
    if (!(s.prob >= 0.0)) throw ContractError("bound_rhs: negative probability");
    mass += s.prob;
    m2 += s.prob * (s.value + alpha) * (s.value + alpha);
  }
  if (std::abs(mass - 1.0) > 1e-9) throw ContractError("bound_rhs: probabilities must sum to 1");
  BoundValue b;
  b.second_moment = m2;
  if (sigma) {
    if (!(*sigma > 0.0)) throw ContractError("bound_rhs: sigma must be > 0");
    b.sigma = *sigma;
    b.rhs = m2 / (2.0 * *sigma * *sigma) + 0.5 * std::log(2.0 * std::numbers::pi * *sigma * *sigma);
    return b;
  }
  if (m2 > 0.0) {
    b.sigma = std::sqrt(m2);
    b.rhs = 0.5 + 0.5 * std::log(2.0 * std::numbers::pi * m2);
  } else {
    b.sigma = std::sqrt(kDegenerateVariance);
    b.rhs = 0.5 * std::log(2.0 * std::numbers::pi * kDegenerateVariance);
  }
  return b;
}

struct BoundRow {
  std::string bound;  // energy_mi | energy_entropy | output_mi
  std::size_t layer = 0;
  double alpha = 0.0;
  double lhs = 0.0;
  double second_moment = 0.0;
  double sigma_star = 0.0;
  double rhs = 0.0;
  double gap = 0.0;  // rhs - lhs
  double conditional_entropy = 0.0;
};

struct BoundReport {
  double mutual_information = 0.0;
  double output_entropy = 0.0;
  double conditional_entropy = 0.0;
  double prompt_entropy = 0.0;
  std::vector<BoundRow> rows;
};

inline constexpr const char* kBoundReportHeader =
    "bound,layer,alpha,lhs,second_moment,sigma_star,rhs,gap,conditional_entropy";

/// Layer-l energy samples weighted by p(x, y).
inline std::vector<WeightedSample> energy_samples(const JointTable& t, std::size_t layer) {
  std::vector<WeightedSample> out;
  for (std::size_t x = 0; x < t.px.size(); ++x)
    for (std::size_t y = 0; y < t.responses.size(); ++y) out.push_back({t.energy[x][y][layer], t.pxy(x, y)});
  return out;
}

inline std::vector<WeightedSample> output_norm_samples(const JointTable& t) {
  std::vector<WeightedSample> out;
  for (std::size_t x = 0; x < t.px.size(); ++x)
    for (std::size_t y = 0; y < t.responses.size(); ++y) out.push_back({t.out_l1[x][y], t.pxy(x, y)});
  return out;
}

/// Offsets are alpha_l = -E[dE_l] under the joint, so the second moment is the variance of dE_l.
inline BoundReport bound_report(const JointTable& t) {
  BoundReport r;
  r.mutual_information = mutual_information(t);
  r.output_entropy = output_entropy(t);
  r.conditional_entropy = conditional_entropy(t);
  r.prompt_entropy = prompt_entropy(t);
  for (std::size_t l = 0; l < t.n_layers; ++l) {
    const auto samples = energy_samples(t, l);
    double mean = 0.0;
    for (const auto& s : samples) mean += s.prob * s.value;
    const double alpha = -mean;
    const auto b = bound_rhs(samples, alpha);
    r.rows.push_back({"energy_mi", l, alpha, r.mutual_information, b.second_moment, b.sigma, b.rhs,
                      b.rhs - r.mutual_information, r.conditional_entropy});
    r.rows.push_back({"energy_entropy", l, alpha, r.output_entropy, b.second_moment, b.sigma, b.rhs,
                      b.rhs - r.output_entropy, r.conditional_entropy});
  }
  const auto b = bound_rhs(output_norm_samples(t), 0.0);
  r.rows.push_back({"output_mi", t.n_layers - 1, 0.0, r.mutual_information, b.second_moment, b.sigma, b.rhs,
                    b.rhs - r.mutual_information, r.conditional_entropy});
  return r;
}

inline BoundReport check_bounds(const EnumerationSetting& s) { return bound_report(enumerate_joint(s)); }

inline void write_bound_report(std::ostream& os, const BoundReport& r) {
  os << kBoundReportHeader << '\n';
  for (const auto& row : r.rows)
    os << row.bound << ',' << row.layer << ',' << format_double(row.alpha) << ',' << format_double(row.lhs) << ','
       << format_double(row.second_moment) << ',' << format_double(row.sigma_star) << ',' << format_double(row.rhs)
       << ',' << format_double(row.gap) << ',' << format_double(row.conditional_entropy) << '\n';
}

/// Audit dump: one row per (prompt, response) with probability and energies.
inline void write_joint_table(std::ostream& os, const JointTable& t) {
  os << "prompt,response,p_x,p_y_given_x";
  for (std::size_t l = 0; l < t.n_layers; ++l) os << ",energy_" << l;
  os << ",final_output_l1\n";
  for (std::size_t x = 0; x < t.px.size(); ++x)
    for (std::size_t y = 0; y < t.responses.size(); ++y) {
      os << x << ',';
      for (std::size_t i = 0; i < t.responses[y].size(); ++i) os << (i ? " " : "") << t.responses[y][i];
      os << ',' << format_double(t.px[x]) << ',' << format_double(t.pyx[x][y]);
      for (double e : t.energy[x][y]) os << ',' << format_double(e);
      os << ',' << format_double(t.out_l1[x][y]) << '\n';
    }
}

/// q(d) = (d + alpha)^2 / (2 sigma^2) + ln sqrt(2 pi sigma^2) must strictly
/// decrease along an ascending grid lying below -alpha.
inline bool bound_monotonicity(double alpha, double sigma, std::span<const double> grid) {
  if (!(sigma > 0.0)) throw ContractError("bound_monotonicity: sigma must be > 0");
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (!(grid[i] < -alpha)) throw ContractError("bound_monotonicity: grid point at or above -alpha");
    if (i > 0 && !(grid[i] > grid[i - 1])) throw ContractError("bound_monotonicity: grid must be strictly ascending");
  }
  auto q = [&](double d) {
    return (d + alpha) * (d + alpha) / (2.0 * sigma * sigma) + 0.5 * std::log(2.0 * std::numbers::pi * sigma * sigma);
  };
  for (std::size_t i = 1; i < grid.size(); ++i)
    if (!(q(grid[i]) < q(grid[i - 1]))) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Contextual dependency

struct CdsRecord {
  std::string prompt_id;
  double ppl_y = 0.0;
  double ppl_y_given_x = 0.0;
  double cds = 0.0;
  double energy_final = 0.0;
};

inline double cds_value(double ppl_y, double ppl_y_given_x) { return (ppl_y - ppl_y_given_x) / ppl_y; }

/// PPL(y) is scored after a lone bos, PPL(y|x) after the prompt.
template <std::floating_point T>
CdsRecord cds(const Parameters<T>& policy, std::string prompt_id, std::span<const Token> prompt,
              std::span<const Token> response) {
  if (response.empty()) throw ContractError("cds: empty response");
  CdsRecord r;
  r.prompt_id = std::move(prompt_id);
  r.ppl_y = sequence_logprob(policy, std::span<const Token>{}, response).perplexity;
  r.ppl_y_given_x = sequence_logprob(policy, prompt, response).perplexity;
  r.cds = cds_value(r.ppl_y, r.ppl_y_given_x);
  TokenSeq seq(prompt.begin(), prompt.end());
  seq.insert(seq.end(), response.begin(), response.end());
  auto f = forward(policy, seq, true);
  f.trace->response_begin = prompt.size();
  f.trace->response_end = seq.size();
  r.energy_final = final_energy(*f.trace);
  return r;
}

struct CorrelationReport {
  double spearman = 0.0;
  std::vector<CdsRecord> records;
};

inline CorrelationReport correlation_report(std::span<const CdsRecord> records) {
  if (records.size() < 3) throw ContractError("correlation_report: need at least 3 records");
  std::vector<double> e, c;
  for (const auto& r : records) {
    e.push_back(r.energy_final);
    c.push_back(r.cds);
  }
  return CorrelationReport{stats::spearman(e, c), std::vector<CdsRecord>(records.begin(), records.end())};
}

inline void write_scatter(std::ostream& os, const CorrelationReport& r) {
  os << "prompt_id,energy_final,cds,ppl_y,ppl_y_given_x\n";
  for (const auto& x : r.records)
    os << x.prompt_id << ',' << format_double(x.energy_final) << ',' << format_double(x.cds) << ','
       << format_double(x.ppl_y) << ',' << format_double(x.ppl_y_given_x) << '\n';
}

}  // namespace elab
