// Copyright (c) 2026, the elab authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic keyword task with an exact gold reward, preference synthesis with
// a length bias, and a pairwise-trained scalar reward model.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "elab/adam.hpp"
#include "elab/autodiff.hpp"
#include "elab/error.hpp"
#include "elab/model.hpp"
#include "elab/rng.hpp"
#include "elab/stats.hpp"

namespace elab {

struct TaskConfig {
  Token keyword_begin = tok::first_content;
  std::size_t keyword_count = 16;
  std::size_t min_keywords = 1;
  std::size_t max_keywords = 4;
  std::size_t brevity = 6;     // B
  double redundancy = 0.5;     // rho_r

  void validate(std::size_t vocab_size) const {
    if (keyword_begin < tok::first_content) throw ContractError("task: keywords may not use reserved tokens");
    if (keyword_count == 0 || keyword_begin + keyword_count > vocab_size)
      throw ContractError("task: keyword range exceeds vocabulary");
    if (max_keywords < 1 || max_keywords > 6 || max_keywords > keyword_count)
      throw ContractError("task: max_keywords must be in [1, min(6, keyword_count)]");
    if (min_keywords < 1 || min_keywords > max_keywords) throw ContractError("task: min_keywords must be in [1, max_keywords]");
    if (brevity < max_keywords) throw ContractError("task: brevity target must be >= max_keywords");
    if (redundancy < 0.0) throw ContractError("task: redundancy weight must be >= 0");
  }
  bool is_keyword(Token t) const {
    return t >= keyword_begin && static_cast<std::size_t>(t - keyword_begin) < keyword_count;
  }
};

struct TaskInstance {
  TokenSeq prompt;
  std::vector<Token> keywords;  // prompt order
  std::uint64_t seed = 0;
};

/// Instance i draws from Rng(seed, "task", i):
/// m = min_keywords + uniform_int(max_keywords - min_keywords + 1),
/// then the keyword pool is shuffled and its first m entries are taken.
inline std::vector<TaskInstance> gen_task(std::uint64_t seed, std::size_t count, const TaskConfig& cfg) {
  if (count == 0) throw ContractError("gen_task: count must be >= 1");
  std::vector<TaskInstance> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(seed, "task", i);
    TaskInstance inst;
    inst.seed = rng.key();
    const std::size_t m =
        cfg.min_keywords + static_cast<std::size_t>(rng.uniform_int(cfg.max_keywords - cfg.min_keywords + 1));
    std::vector<Token> pool(cfg.keyword_count);
    for (std::size_t k = 0; k < pool.size(); ++k) pool[k] = cfg.keyword_begin + static_cast<Token>(k);
    rng.shuffle(std::span<Token>(pool));
    inst.keywords.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(m));
    inst.prompt.push_back(tok::bos);
    inst.prompt.insert(inst.prompt.end(), inst.keywords.begin(), inst.keywords.end());
    inst.prompt.push_back(tok::sep);
    out.push_back(std::move(inst));
  }
  return out;
}

struct GoldSpec {
  std::vector<Token> keywords;
  std::size_t brevity = 6;
  double redundancy = 0.5;
};

inline GoldSpec gold_spec(const TaskInstance& inst, const TaskConfig& cfg) {
  return GoldSpec{inst.keywords, std::max(cfg.brevity, inst.keywords.size()), cfg.redundancy};
}

/// Number of tokens before the first eos.
inline std::size_t content_length(std::span<const Token> response) {
  return static_cast<std::size_t>(std::find(response.begin(), response.end(), tok::eos) - response.begin());
}

/// coverage * brevity * clamp(1 - rho_r * repeats / len, 0, 1) over the tokens before eos.
inline double gold_score(const GoldSpec& g, std::span<const Token> response) {
  const std::size_t len = content_length(response);
  if (len == 0 || g.keywords.empty()) return 0.0;
  std::size_t covered = 0, repeats = 0;
  for (Token k : g.keywords) {
    const auto n = static_cast<std::size_t>(std::count(response.begin(), response.begin() + static_cast<std::ptrdiff_t>(len), k));
    if (n > 0) {
      ++covered;
      repeats += n - 1;
    }
  }
  const double coverage = static_cast<double>(covered) / static_cast<double>(g.keywords.size());
  const double B = static_cast<double>(g.brevity);
  const double brevity = std::min(1.0, B / std::max(static_cast<double>(len), B));
  const double redundancy =
      std::clamp(1.0 - g.redundancy * static_cast<double>(repeats) / static_cast<double>(len), 0.0, 1.0);
  return coverage * brevity * redundancy;
}

inline double gold_score(const TaskInstance& inst, std::span<const Token> response, const TaskConfig& cfg) {
  return gold_score(gold_spec(inst, cfg), response);
}

/// Gold-optimal demonstration: every keyword once, in prompt order, then eos.
inline TokenSeq demonstration(const TaskInstance& inst) {
  TokenSeq r(inst.keywords.begin(), inst.keywords.end());
  r.push_back(tok::eos);
  return r;
}

// ---------------------------------------------------------------------------
// Preference synthesis

using CandidateGenerator = std::function<TokenSeq(const TaskInstance&, Rng&)>;

/// Mixture of perturbed demonstrations: exact, keywords dropped, padded with
/// filler, keywords repeated, or filler only. Padding lengths reach `max_len`.
inline CandidateGenerator default_candidates(const TaskConfig& task, std::size_t vocab_size, std::size_t max_len) {
  return [task, vocab_size, max_len](const TaskInstance& inst, Rng& rng) {
    const Token filler_begin = task.keyword_begin + static_cast<Token>(task.keyword_count);
    const std::size_t n_filler = vocab_size - static_cast<std::size_t>(filler_begin);
    auto filler = [&]() {
      if (n_filler == 0) return inst.keywords[rng.uniform_int(inst.keywords.size())];
      return filler_begin + static_cast<Token>(rng.uniform_int(n_filler));
    };
    TokenSeq body(inst.keywords.begin(), inst.keywords.end());
    const std::size_t room = max_len > body.size() + 1 ? max_len - body.size() - 1 : 0;
    const auto kind = rng.uniform_int(5);
    switch (kind) {
      case 0:
        break;
      case 1: {
        const std::size_t drop = 1 + rng.uniform_int(body.size());
        for (std::size_t i = 0; i < drop && !body.empty(); ++i)
          body.erase(body.begin() + static_cast<std::ptrdiff_t>(rng.uniform_int(body.size())));
        break;
      }
      case 2: {
        const std::size_t extra = room == 0 ? 0 : 1 + rng.uniform_int(room);
        for (std::size_t i = 0; i < extra; ++i)
          body.insert(body.begin() + static_cast<std::ptrdiff_t>(rng.uniform_int(body.size() + 1)), filler());
        break;
      }
      case 3: {
        const std::size_t extra = room == 0 ? 0 : 1 + rng.uniform_int(room);
        for (std::size_t i = 0; i < extra; ++i) body.push_back(inst.keywords[rng.uniform_int(inst.keywords.size())]);
        break;
      }
      default: {
        body.clear();
        const std::size_t n = 1 + rng.uniform_int(std::max<std::size_t>(room, 1));
        for (std::size_t i = 0; i < n; ++i) body.push_back(filler());
        break;
      }
    }
    body.push_back(tok::eos);
    return body;
  };
}

enum class Provenance { gold_consistent, bias_flipped };

inline const char* provenance_name(Provenance p) {
  return p == Provenance::gold_consistent ? "gold-consistent" : "bias-flipped";
}

struct PreferencePair {
  TokenSeq prompt;
  TokenSeq chosen;
  TokenSeq rejected;
  Provenance provenance = Provenance::gold_consistent;
};

inline constexpr double kTieMargin = 0.05;

/// Pair k uses instance k mod |instances|, two candidate draws and one uniform
/// u from Rng(seed, "prefs"). If u < rho_b the longer candidate is chosen
/// (inside or outside the gold tie margin alike); otherwise the gold order
/// decides. Identical candidates are skipped, so fewer than n_pairs may return.
inline std::vector<PreferencePair> synth_preferences(std::span<const TaskInstance> instances,
                                                     const CandidateGenerator& gen, std::size_t n_pairs,
                                                     double bias_rate, std::uint64_t seed, const TaskConfig& task) {
  if (!(bias_rate >= 0.0 && bias_rate <= 1.0)) throw ContractError("synth_preferences: bias rate outside [0, 1]");
  if (instances.empty()) throw ContractError("synth_preferences: no instances");
  Rng rng(seed, "prefs");
  std::vector<PreferencePair> out;
  for (std::size_t k = 0; k < n_pairs; ++k) {
    const TaskInstance& inst = instances[k % instances.size()];
    TokenSeq a = gen(inst, rng);
    TokenSeq b = gen(inst, rng);
    const bool biased = rng.uniform() < bias_rate;
    if (a == b) continue;
    const double ga = gold_score(inst, a, task), gb = gold_score(inst, b, task);
    const std::size_t la = content_length(a), lb = content_length(b);
    bool a_wins = ga >= gb;
    if (biased && la != lb) a_wins = la > lb;
    PreferencePair p;
    p.prompt = inst.prompt;
    p.chosen = a_wins ? a : b;
    p.rejected = a_wins ? b : a;
    const double gc = a_wins ? ga : gb, gr = a_wins ? gb : ga;
    p.provenance = gc < gr ? Provenance::bias_flipped : Provenance::gold_consistent;
    out.push_back(std::move(p));
  }
  return out;
}

inline std::string join_tokens(std::span<const Token> t) {
  std::string s;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (i) s += ' ';
    s += std::to_string(t[i]);
  }
  return s;
}

inline TokenSeq parse_tokens(const std::string& s) {
  TokenSeq out;
  std::istringstream is(s);
  std::string w;
  while (is >> w) {
    try {
      std::size_t used = 0;
      const long v = std::stol(w, &used);
      if (used != w.size()) throw std::invalid_argument(w);
      out.push_back(static_cast<Token>(v));
    } catch (const std::logic_error&) {
      throw IoError("malformed token '" + w + "'");
    }
  }
  return out;
}

/// Tab-separated: prompt, chosen, rejected, provenance; token ids space-separated.
inline void save_preferences(std::ostream& os, std::span<const PreferencePair> pairs) {
  for (const auto& p : pairs)
    os << join_tokens(p.prompt) << '\t' << join_tokens(p.chosen) << '\t' << join_tokens(p.rejected) << '\t'
       << provenance_name(p.provenance) << '\n';
}

inline std::vector<PreferencePair> load_preferences(std::istream& is) {
  std::vector<PreferencePair> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t pos = 0;
    for (;;) {
      const auto tab = line.find('\t', pos);
      f.push_back(line.substr(pos, tab == std::string::npos ? std::string::npos : tab - pos));
      if (tab == std::string::npos) break;
      pos = tab + 1;
    }
    if (f.size() != 4) throw IoError("preferences line " + std::to_string(n) + ": expected 4 fields");
    PreferencePair p;
    p.prompt = parse_tokens(f[0]);
    p.chosen = parse_tokens(f[1]);
    p.rejected = parse_tokens(f[2]);
    if (f[3] == "gold-consistent") {
      p.provenance = Provenance::gold_consistent;
    } else if (f[3] == "bias-flipped") {
      p.provenance = Provenance::bias_flipped;
    } else {
      throw IoError("preferences line " + std::to_string(n) + ": unknown provenance '" + f[3] + "'");
    }
    out.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reward model

/// Bradley–Terry pairwise loss -log sigmoid(chosen - rejected) = softplus(rejected - chosen).
inline double rm_loss(double score_chosen, double score_rejected) {
  const double x = score_rejected - score_chosen;
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

inline TokenSeq concat(std::span<const Token> a, std::span<const Token> b) {
  TokenSeq s(a.begin(), a.end());
  s.insert(s.end(), b.begin(), b.end());
  return s;
}

/// Scalar head reading at the last position of prompt + response.
template <std::floating_point T>
double rm_score(const Parameters<T>& rm, std::span<const Token> prompt, std::span<const Token> response) {
  if (!rm.scalar_head) throw ContractError("rm_score: model has no scalar head");
  if (prompt.size() + response.size() > rm.config.max_seq_len)
    throw LengthError("rm_score: sequence exceeds max_seq_len");
  if (prompt.empty() && response.empty()) throw ContractError("rm_score: empty input");
  Decoder<T> dec(rm, false);
  for (Token t : prompt) dec.push(t);
  for (Token t : response) dec.push(t);
  return static_cast<double>(dec.head_value());
}

struct RewardTrainConfig {
  double lr = 1e-3;
  std::size_t epochs = 1;
  std::size_t batch_size = 16;
  double max_grad_norm = 1.0;
  std::uint64_t seed = 0;
};

struct RewardTrainResult {
  Parameters<float> params;
  std::vector<double> batch_losses;
};

/// Pairwise training; the pair order of each epoch comes from Rng(seed, "rm-order", epoch).
inline RewardTrainResult train_reward_model(Parameters<float> rm, std::span<const PreferencePair> pairs,
                                            const RewardTrainConfig& cfg) {
  if (!rm.scalar_head) throw ContractError("train_reward_model: model has no scalar head");
  if (cfg.batch_size == 0) throw ContractError("train_reward_model: batch size must be >= 1");
  RewardTrainResult res;
  AdamState<float> opt(rm.tensors, cfg.lr);
  std::vector<std::size_t> order(pairs.size());
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(cfg.seed, "rm-order", e);
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      Gradients<float> acc;
      double loss_sum = 0.0;
      for (std::size_t i = start; i < end; ++i) {
        const auto& p = pairs[order[i]];
        ad::Tape<float> tape;
        auto bound = bind_parameters(tape, rm);
        const TokenSeq sc = concat(p.prompt, p.chosen), sr = concat(p.prompt, p.rejected);
        TapeOptions opts;
        opts.logits = false;
        opts.values = true;
        auto fc = forward_tape(tape, rm, bound, sc, opts);
        auto fr = forward_tape(tape, rm, bound, sr, opts);
        auto vc = ad::slice_rows(fc.values, sc.size() - 1, 1);
        auto vr = ad::slice_rows(fr.values, sr.size() - 1, 1);
        auto loss = ad::scale(ad::sum(ad::softplus(ad::sub(vr, vc))), 1.0f / static_cast<float>(end - start));
        loss_sum += loss.item();
        tape.backward(loss);
        accumulate_gradients(acc, collect_gradients(tape, bound));
      }
      clip_grad_norm(acc, cfg.max_grad_norm);
      adam_step(opt, rm.tensors, acc);
      res.batch_losses.push_back(loss_sum);
    }
  }
  res.params = std::move(rm);
  return res;
}

/// Fraction of pairs the model orders like the recorded label.
template <std::floating_point T>
double preference_accuracy(const Parameters<T>& rm, std::span<const PreferencePair> pairs) {
  if (pairs.empty()) return 0.0;
  std::size_t ok = 0;
  for (const auto& p : pairs) ok += rm_score(rm, p.prompt, p.chosen) > rm_score(rm, p.prompt, p.rejected) ? 1 : 0;
  return static_cast<double>(ok) / static_cast<double>(pairs.size());
}

// ---------------------------------------------------------------------------
// Aggregation

enum class EnsembleMode { mean, wco, uwo };

inline double ensemble_score(std::span<const double> scores, EnsembleMode mode, double lambda = 0.0) {
  if (scores.empty()) throw ContractError("ensemble_score: empty score list");
  switch (mode) {
    case EnsembleMode::mean:
      return stats::mean(scores);
    case EnsembleMode::wco:
      return *std::min_element(scores.begin(), scores.end());
    case EnsembleMode::uwo:
      if (lambda < 0.0) throw ContractError("ensemble_score: uwo needs lambda >= 0");
      return stats::mean(scores) - lambda * stats::population_variance(scores);
  }
  throw ContractError("ensemble_score: unknown mode");
}

/// Element-wise mean of models sharing one architecture.
template <std::floating_point T>
Parameters<T> warm_average(std::span<const Parameters<T>> models) {
  if (models.empty()) throw ContractError("warm_average: no models");
  const auto& first = models[0];
  for (const auto& m : models) {
    if (m.names != first.names || m.scalar_head != first.scalar_head)
      throw ContractError("warm_average: architectures differ");
    for (std::size_t k = 0; k < m.tensors.size(); ++k)
      if (m.tensors[k].shape() != first.tensors[k].shape())
        throw ContractError("warm_average: shape mismatch in " + m.names[k]);
  }
  Parameters<T> out = first;
  for (std::size_t k = 0; k < out.tensors.size(); ++k) {
    auto dst = out.tensors[k].data();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      double s = 0.0;
      for (const auto& m : models) s += static_cast<double>(m.tensors[k].data()[i]);
      dst[i] = static_cast<T>(s / static_cast<double>(models.size()));
    }
  }
  return out;
}

}  // namespace elab
