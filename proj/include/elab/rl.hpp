// Copyright (c) 2026, the elab authors
// SPDX-License-Identifier: Apache-2.0
//
// Supervised fine-tuning and PPO with pluggable reward shaping.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "elab/adam.hpp"
#include "elab/autodiff.hpp"
#include "elab/energy.hpp"
#include "elab/error.hpp"
#include "elab/format.hpp"
#include "elab/model.hpp"
#include "elab/reward_env.hpp"
#include "elab/rng.hpp"
#include "elab/stats.hpp"

namespace elab {

// ---------------------------------------------------------------------------
// SFT

struct SftExample {
  TokenSeq prompt;
  TokenSeq response;
};

struct SftConfig {
  std::size_t epochs = 1;
  double lr = 1e-3;
  std::size_t batch_size = 16;
  double max_grad_norm = 1.0;
  std::uint64_t seed = 0;
};

/// Mean cross-entropy of the response tokens given the prompt; prompt
/// positions carry zero weight. Adds parameter gradients into `grads` when given.
inline double sft_example_loss(const Parameters<float>& p, const SftExample& ex, float weight,
                               Gradients<float>* grads) {
  if (ex.prompt.empty() || ex.response.empty()) throw ContractError("sft: prompt and response must be nonempty");
  const TokenSeq seq = concat(ex.prompt, ex.response);
  const std::span<const Token> inputs(seq.data(), seq.size() - 1);
  ad::Tape<float> tape;
  TapeOptions opts;
  opts.requires_grad = grads != nullptr;
  auto f = forward_tape(tape, p, inputs, opts);
  std::vector<int> targets(inputs.size(), 0);
  std::vector<float> w(inputs.size(), 0.0f);
  for (std::size_t i = ex.prompt.size() - 1; i < inputs.size(); ++i) {
    targets[i] = seq[i + 1];
    w[i] = 1.0f;
  }
  auto loss = ad::scale(ad::cross_entropy_loss<float>(f.logits, targets, w), weight);
  if (grads) {
    tape.backward(loss);
    accumulate_gradients(*grads, collect_gradients(tape, f.params));
  }
  return static_cast<double>(loss.item()) / weight;
}

struct SftResult {
  Parameters<float> params;
  std::vector<double> losses;  // mean minibatch loss before each update
};

inline SftResult sft_train(Parameters<float> params, std::span<const SftExample> corpus, const SftConfig& cfg) {
  if (corpus.empty()) throw ContractError("sft_train: empty corpus");
  if (cfg.batch_size == 0) throw ContractError("sft_train: batch size must be >= 1");
  SftResult res;
  AdamState<float> opt(params.tensors, cfg.lr);
  std::vector<std::size_t> order(corpus.size());
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(cfg.seed, "sft-order", e);
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const float w = 1.0f / static_cast<float>(end - start);
      Gradients<float> acc;
      double loss = 0.0;
      for (std::size_t i = start; i < end; ++i) loss += sft_example_loss(params, corpus[order[i]], w, &acc) * w;
      clip_grad_norm(acc, cfg.max_grad_norm);
      adam_step(opt, params.tensors, acc);
      res.losses.push_back(loss);
    }
  }
  res.params = std::move(params);
  return res;
}

// ---------------------------------------------------------------------------
// Trajectories and reward shaping

struct Trajectory {
  TokenSeq prompt;
  TokenSeq response;
  std::vector<double> logprobs;      // acting policy, tempered and untruncated
  std::vector<double> sft_logprobs;  // reference policy at the same temperature
  std::vector<double> values;
  std::vector<double> entropies;
  double reward = 0.0;  // raw proxy reward
  double gold = 0.0;
  double energy_final = 0.0;
  std::vector<double> shaped;
  std::vector<double> advantages;
  std::vector<double> returns;
};

enum class PenaltyVariant { none, kl, lp, eppo };

inline const char* variant_name(PenaltyVariant v) {
  switch (v) {
    case PenaltyVariant::none: return "none";
    case PenaltyVariant::kl: return "kl";
    case PenaltyVariant::lp: return "lp";
    case PenaltyVariant::eppo: return "eppo";
  }
  return "?";
}

struct PenaltyConfig {
  PenaltyVariant variant = PenaltyVariant::none;
  double beta = 0.0;             // kl
  std::size_t lp_max_len = 0;    // lp: N
  double lp_decay = 0.99;        // lp: moving-average decay of the reward std
  double eta = 0.0;              // eppo
  const EnergyTable* table = nullptr;

  void validate() const {
    switch (variant) {
      case PenaltyVariant::none: break;
      case PenaltyVariant::kl:
        if (!(beta > 0.0)) throw ContractError("penalty: kl needs beta > 0");
        break;
      case PenaltyVariant::lp:
        if (lp_max_len == 0) throw ContractError("penalty: lp needs N > 0");
        if (!(lp_decay >= 0.0 && lp_decay < 1.0)) throw ContractError("penalty: lp decay must be in [0, 1)");
        break;
      case PenaltyVariant::eppo:
        if (!(eta > 0.0)) throw ContractError("penalty: eppo needs eta > 0");
        if (!table) throw ContractError("penalty: eppo needs an SFT energy table");
        break;
    }
  }
};

/// Exponential moving average of the batch reward standard deviation,
/// seeded with the first batch's value.
struct RewardStdTracker {
  double decay = 0.99;
  double value = 0.0;
  bool initialized = false;

  void update(double batch_std) {
    value = initialized ? decay * value + (1.0 - decay) * batch_std : batch_std;
    initialized = true;
  }
};

/// Per-token rewards: the raw reward sits on the final token, kl subtracts
/// beta (log pi - log pi_sft) at every token, lp adds (1 - len / N) sigma_bar
/// (len counts tokens before eos)
/// and eppo subtracts eta |dE_sft - dE_rlhf| at the final token.
inline std::vector<double> shape_rewards(const Trajectory& tr, const PenaltyConfig& pen,
                                         std::span<const double> sft_logprobs, double sigma_bar = 0.0) {
  const std::size_t n = tr.response.size();
  std::vector<double> r(n, 0.0);
  if (n == 0) return r;
  r[n - 1] = tr.reward;
  switch (pen.variant) {
    case PenaltyVariant::none:
      break;
    case PenaltyVariant::kl:
      if (sft_logprobs.size() != n || tr.logprobs.size() != n)
        throw DimensionError("shape_rewards: log-prob arrays must match response length");
      for (std::size_t t = 0; t < n; ++t) r[t] -= pen.beta * (tr.logprobs[t] - sft_logprobs[t]);
      break;
    case PenaltyVariant::lp:
      r[n - 1] += (1.0 - static_cast<double>(content_length(tr.response)) / static_cast<double>(pen.lp_max_len)) *
                  sigma_bar;
      break;
    case PenaltyVariant::eppo: {
      if (!pen.table) throw ContractError("shape_rewards: eppo without an SFT energy table");
      const double ref = pen.table->lookup(tr.prompt);
      r[n - 1] -= pen.eta * std::abs(ref - tr.energy_final);
      break;
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Advantage estimation

struct GaeResult {
  std::vector<double> advantages;
  std::vector<double> returns;
};

/// delta_t = r_t + gamma V_{t+1} - V_t with V_n = 0; A_t = delta_t + gamma lambda A_{t+1}.
inline GaeResult gae(std::span<const double> rewards, std::span<const double> values, double gamma, double lambda) {
  if (rewards.size() != values.size()) throw DimensionError("gae: rewards and values differ in length");
  const std::size_t n = rewards.size();
  GaeResult g;
  g.advantages.assign(n, 0.0);
  g.returns.assign(n, 0.0);
  double next_adv = 0.0, next_value = 0.0;
  for (std::size_t t = n; t-- > 0;) {
    const double delta = rewards[t] + gamma * next_value - values[t];
    next_adv = delta + gamma * lambda * next_adv;
    g.advantages[t] = next_adv;
    g.returns[t] = next_adv + values[t];
    next_value = values[t];
  }
  return g;
}

/// Whitens advantages across every token of the batch.
inline void normalize_advantages(std::span<Trajectory> batch, double eps = 1e-8) {
  std::vector<double> all;
  for (const auto& t : batch) all.insert(all.end(), t.advantages.begin(), t.advantages.end());
  if (all.empty()) return;
  const double m = stats::mean(all);
  const double s = std::sqrt(stats::population_variance(all));
  for (auto& t : batch)
    for (double& a : t.advantages) a = (a - m) / (s + eps);
}

// ---------------------------------------------------------------------------
// PPO

struct PPOConfig {
  double gamma = 1.0;
  double lambda = 0.95;
  double clip = 0.2;
  std::size_t epochs = 4;
  std::size_t minibatch_size = 16;
  double policy_lr = 1e-4;
  double critic_lr = 3e-4;
  std::size_t batch_size = 64;
  std::size_t total_steps = 300;
  double max_grad_norm = 1.0;

  void validate() const {
    if (!(gamma > 0.0 && gamma <= 1.0)) throw ContractError("ppo: gamma must be in (0, 1]");
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ContractError("ppo: lambda must be in [0, 1]");
    if (!(clip > 0.0 && clip < 1.0)) throw ContractError("ppo: clip must be in (0, 1)");
    if (minibatch_size == 0 || batch_size == 0) throw ContractError("ppo: batch sizes must be >= 1");
    if (!(policy_lr > 0.0 && critic_lr > 0.0)) throw ContractError("ppo: learning rates must be > 0");
  }
};

struct SurrogateStats {
  double loss = 0.0;
  double mean_ratio = 0.0;
  double clip_fraction = 0.0;
};

/// mean_t max(-r_t A_t, -clip(r_t, 1 - eps, 1 + eps) A_t) with r_t = exp(new_t - old_t).
inline SurrogateStats clipped_surrogate(std::span<const double> new_lp, std::span<const double> old_lp,
                                        std::span<const double> adv, double eps) {
  if (new_lp.size() != old_lp.size() || new_lp.size() != adv.size())
    throw DimensionError("clipped_surrogate: length mismatch");
  SurrogateStats s;
  if (new_lp.empty()) return s;
  std::size_t clipped = 0;
  for (std::size_t t = 0; t < new_lp.size(); ++t) {
    const double r = std::exp(new_lp[t] - old_lp[t]);
    const double rc = std::clamp(r, 1.0 - eps, 1.0 + eps);
    s.loss += std::max(-r * adv[t], -rc * adv[t]);
    s.mean_ratio += r;
    clipped += std::abs(r - 1.0) > eps ? 1 : 0;
  }
  const double n = static_cast<double>(new_lp.size());
  s.loss /= n;
  s.mean_ratio /= n;
  s.clip_fraction = static_cast<double>(clipped) / n;
  return s;
}

struct PPOStats {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double mean_ratio = 0.0;
  double clip_fraction = 0.0;
  // first minibatch of the first epoch, before any update
  double first_max_ratio_dev = 0.0;
  double first_clip_fraction = 0.0;
  double first_policy_loss = 0.0;
  std::size_t minibatches = 0;
};

struct Learner {
  Parameters<float> policy;
  Parameters<float> critic;
  AdamState<float> policy_opt;
  AdamState<float> critic_opt;

  Learner() = default;
  Learner(Parameters<float> pol, Parameters<float> cri, const PPOConfig& cfg)
      : policy(std::move(pol)),
        critic(std::move(cri)),
        policy_opt(policy.tensors, cfg.policy_lr),
        critic_opt(critic.tensors, cfg.critic_lr) {}
};

/// Clipped-surrogate and value-regression updates over `epochs` shuffled
/// passes, one optimizer step per minibatch for each network. Advantages are
/// expected to be normalised already.
inline PPOStats ppo_update(Learner& L, std::span<const Trajectory> batch, const PPOConfig& cfg, double temperature,
                           std::uint64_t seed, std::size_t step) {
  cfg.validate();
  PPOStats st;
  std::vector<std::size_t> order(batch.size());
  const float inv_temp = static_cast<float>(1.0 / temperature);
  const float eps = static_cast<float>(cfg.clip);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(seed, "ppo-order", step * cfg.epochs + epoch);
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t start = 0; start < order.size(); start += cfg.minibatch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.minibatch_size);
      std::size_t tokens = 0;
      for (std::size_t i = start; i < end; ++i) tokens += batch[order[i]].response.size();
      if (tokens == 0) continue;
      const float inv_tokens = 1.0f / static_cast<float>(tokens);
      Gradients<float> gp, gc;
      double pol_loss = 0.0, val_loss = 0.0, ratio_sum = 0.0, max_dev = 0.0;
      std::size_t clipped = 0;
      for (std::size_t i = start; i < end; ++i) {
        const Trajectory& tr = batch[order[i]];
        const std::size_t n = tr.response.size(), P = tr.prompt.size();
        if (n == 0) continue;
        const TokenSeq seq = concat(tr.prompt, tr.response);
        const std::span<const Token> inputs(seq.data(), seq.size() - 1);
        std::vector<int> targets(tr.response.begin(), tr.response.end());
        std::vector<float> old_lp(tr.logprobs.begin(), tr.logprobs.end());
        std::vector<float> adv(tr.advantages.begin(), tr.advantages.end());
        std::vector<float> ret(tr.returns.begin(), tr.returns.end());
        try {
          ad::Tape<float> tape;
          auto f = forward_tape(tape, L.policy, inputs);
          auto logits = ad::slice_rows(f.logits, P - 1, n);
          if (temperature != 1.0) logits = ad::scale(logits, inv_temp);
          auto new_lp = ad::pick(ad::log_softmax_rows(logits), targets);
          auto ratio = ad::exp(ad::sub(new_lp, tape.constant({n}, old_lp)));
          auto A = tape.constant({n}, adv);
          auto surr = ad::minimum(ad::mul(ratio, A), ad::mul(ad::clamp(ratio, 1.0f - eps, 1.0f + eps), A));
          auto loss = ad::scale(ad::sum(surr), -inv_tokens);
          pol_loss += loss.item();
          for (float r : ratio.value()) {
            ratio_sum += r;
            max_dev = std::max(max_dev, std::abs(static_cast<double>(r) - 1.0));
            clipped += std::abs(r - 1.0f) > eps ? 1 : 0;
          }
          tape.backward(loss);
          accumulate_gradients(gp, collect_gradients(tape, f.params));

          ad::Tape<float> vtape;
          TapeOptions vopts;
          vopts.logits = false;
          vopts.values = true;
          auto fv = forward_tape(vtape, L.critic, inputs, vopts);
          auto v = ad::slice_rows(fv.values, P - 1, n);
          auto vloss = ad::scale(ad::sum(ad::square(ad::sub(v, vtape.constant({n, 1}, ret)))), inv_tokens);
          val_loss += vloss.item();
          vtape.backward(vloss);
          accumulate_gradients(gc, collect_gradients(vtape, fv.params));
        } catch (const NumericError& e) {
          std::ostringstream msg;
          msg << "ppo_update: non-finite value at step " << step << ", epoch " << epoch << ", trajectory "
              << order[i] << " (reward " << tr.reward << ", response length " << n << "): " << e.what();
          throw NumericError(msg.str());
        }
      }
      if (!std::isfinite(pol_loss) || !std::isfinite(val_loss))
        throw NumericError("ppo_update: non-finite loss at step " + std::to_string(step));
      if (st.minibatches == 0) {
        st.first_max_ratio_dev = max_dev;
        st.first_clip_fraction = static_cast<double>(clipped) / static_cast<double>(tokens);
        st.first_policy_loss = pol_loss;
      }
      clip_grad_norm(gp, cfg.max_grad_norm);
      clip_grad_norm(gc, cfg.max_grad_norm);
      adam_step(L.policy_opt, L.policy.tensors, gp);
      adam_step(L.critic_opt, L.critic.tensors, gc);
      st.policy_loss += pol_loss;
      st.value_loss += val_loss;
      st.mean_ratio += ratio_sum / static_cast<double>(tokens);
      st.clip_fraction += static_cast<double>(clipped) / static_cast<double>(tokens);
      ++st.minibatches;
    }
  }
  if (st.minibatches) {
    const double m = static_cast<double>(st.minibatches);
    st.policy_loss /= m;
    st.value_loss /= m;
    st.mean_ratio /= m;
    st.clip_fraction /= m;
  }
  return st;
}

// ---------------------------------------------------------------------------
// Rollouts

/// Critic estimate for each generating state: entry t reads the state whose
/// last token sits at position |prompt| - 1 + t.
inline std::vector<double> critic_values(const Parameters<float>& critic, std::span<const Token> prompt,
                                         std::span<const Token> response) {
  std::vector<double> v;
  if (response.empty()) return v;
  Decoder<float> dec(critic, false);
  for (Token t : prompt) dec.push(t);
  v.push_back(dec.head_value());
  for (std::size_t i = 0; i + 1 < response.size(); ++i) {
    dec.push(response[i]);
    v.push_back(dec.head_value());
  }
  return v;
}

struct RolloutContext {
  const Parameters<float>* sft = nullptr;
  const Parameters<float>* rm = nullptr;
  const TaskConfig* task = nullptr;
  SamplingConfig sampling;
};

inline Trajectory rollout(const Learner& L, const RolloutContext& ctx, const TaskInstance& inst, std::uint64_t seed) {
  SamplingConfig sc = ctx.sampling;
  sc.seed = seed;
  const Generation g = generate(L.policy, inst.prompt, sc);
  Trajectory tr;
  tr.prompt = inst.prompt;
  tr.response = g.response;
  tr.logprobs = g.policy_logprobs;
  tr.entropies = g.entropies;
  tr.reward = rm_score(*ctx.rm, tr.prompt, tr.response);
  tr.gold = gold_score(inst, tr.response, *ctx.task);
  tr.energy_final = tr.response.empty() ? 0.0 : final_energy(g.trace);
  if (!tr.response.empty()) {
    tr.sft_logprobs = sequence_logprob(*ctx.sft, tr.prompt, tr.response, ctx.sampling.temperature).token_logprobs;
    tr.values = critic_values(L.critic, tr.prompt, tr.response);
  }
  if (!std::isfinite(tr.reward)) throw NumericError("rollout: non-finite proxy reward");
  return tr;
}

// ---------------------------------------------------------------------------
// Training loop

struct StepRecord {
  std::size_t step = 0;
  double proxy_reward = 0.0;
  double gold_reward = 0.0;
  double energy_final = 0.0;
  double resp_len = 0.0;
  double kl_sft = 0.0;
  double entropy = 0.0;
};

struct RunLog {
  std::vector<StepRecord> records;
  std::vector<std::vector<double>> energies;  // final-block energy loss of every rollout, per step
  std::vector<PPOStats> updates;
};

inline constexpr const char* kRunLogHeader = "step,proxy_reward,gold_reward,energy_final,resp_len,kl_sft,entropy";

inline void write_runlog(std::ostream& os, const RunLog& log) {
  os << kRunLogHeader << '\n';
  for (const auto& r : log.records)
    os << r.step << ',' << format_double(r.proxy_reward) << ',' << format_double(r.gold_reward) << ','
       << format_double(r.energy_final) << ',' << format_double(r.resp_len) << ',' << format_double(r.kl_sft) << ','
       << format_double(r.entropy) << '\n';
}

inline std::string runlog_csv(const RunLog& log) {
  std::ostringstream os;
  write_runlog(os, log);
  return os.str();
}

inline std::vector<StepRecord> read_runlog(std::istream& is) {
  std::vector<StepRecord> out;
  std::string line;
  if (!std::getline(is, line) || line != kRunLogHeader) throw IoError("runlog: unexpected header");
  std::size_t n = 1;
  while (std::getline(is, line)) {
    ++n;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 7) throw IoError("runlog line " + std::to_string(n) + ": expected 7 fields");
    try {
      StepRecord r;
      r.step = std::stoull(f[0]);
      r.proxy_reward = std::stod(f[1]);
      r.gold_reward = std::stod(f[2]);
      r.energy_final = std::stod(f[3]);
      r.resp_len = std::stod(f[4]);
      r.kl_sft = std::stod(f[5]);
      r.entropy = std::stod(f[6]);
      out.push_back(r);
    } catch (const std::logic_error&) {
      throw IoError("runlog line " + std::to_string(n) + ": malformed number");
    }
  }
  return out;
}

struct TrainRlOptions {
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // 0 disables checkpoints
  std::string checkpoint_dir;
  std::function<void(const StepRecord&)> on_step;  // progress hook, may be empty
};

struct TrainRlResult {
  RunLog log;
  Learner learner;
};

/// Prompts for step s are drawn with replacement from Rng(seed, "batch", s);
/// rollout i of step s samples with seed key (seed, "rollout", s * batch + i).
inline TrainRlResult train_rl(Learner learner, const RolloutContext& ctx, const PenaltyConfig& pen,
                              const PPOConfig& cfg, std::span<const TaskInstance> instances,
                              const TrainRlOptions& opt) {
  pen.validate();
  cfg.validate();
  if (instances.empty()) throw ContractError("train_rl: no training instances");
  if (pen.variant == PenaltyVariant::eppo)
    for (const auto& inst : instances) (void)pen.table->lookup(inst.prompt);
  TrainRlResult res;
  RewardStdTracker sigma{pen.lp_decay};
  for (std::size_t step = 0; step < cfg.total_steps; ++step) {
    Rng pick(opt.seed, "batch", step);
    std::vector<Trajectory> batch;
    batch.reserve(cfg.batch_size);
    for (std::size_t i = 0; i < cfg.batch_size; ++i) {
      const auto& inst = instances[pick.uniform_int(instances.size())];
      batch.push_back(rollout(learner, ctx, inst, Rng::derive_key(opt.seed, "rollout", step * cfg.batch_size + i)));
    }
    std::vector<double> rewards, energies;
    StepRecord rec;
    rec.step = step;
    std::size_t tokens = 0;
    for (const auto& t : batch) {
      rewards.push_back(t.reward);
      energies.push_back(t.energy_final);
      rec.proxy_reward += t.reward;
      rec.gold_reward += t.gold;
      rec.energy_final += t.energy_final;
      rec.resp_len += static_cast<double>(content_length(t.response));
      for (std::size_t k = 0; k < t.logprobs.size(); ++k) rec.kl_sft += t.logprobs[k] - t.sft_logprobs[k];
      for (double h : t.entropies) rec.entropy += h;
      tokens += t.entropies.size();
    }
    const double B = static_cast<double>(batch.size());
    rec.proxy_reward /= B;
    rec.gold_reward /= B;
    rec.energy_final /= B;
    rec.resp_len /= B;
    rec.kl_sft /= B;
    rec.entropy = tokens ? rec.entropy / static_cast<double>(tokens) : 0.0;
    if (!std::isfinite(rec.proxy_reward)) throw NumericError("train_rl: non-finite proxy reward at step " + std::to_string(step));

    if (pen.variant == PenaltyVariant::lp) sigma.update(std::sqrt(stats::population_variance(rewards)));
    for (auto& t : batch) {
      t.shaped = shape_rewards(t, pen, t.sft_logprobs, sigma.value);
      auto g = gae(t.shaped, t.values, cfg.gamma, cfg.lambda);
      t.advantages = std::move(g.advantages);
      t.returns = std::move(g.returns);
    }
    normalize_advantages(batch);
    res.log.updates.push_back(ppo_update(learner, batch, cfg, ctx.sampling.temperature, opt.seed, step));
    res.log.records.push_back(rec);
    res.log.energies.push_back(std::move(energies));
    if (opt.on_step) opt.on_step(rec);

    if (opt.checkpoint_every && !opt.checkpoint_dir.empty() && (step + 1) % opt.checkpoint_every == 0) {
      std::filesystem::create_directories(opt.checkpoint_dir);
      const std::string stem = opt.checkpoint_dir + "/policy-" + std::to_string(step + 1);
      save_checkpoint(stem + ".ckpt", learner.policy);
      save_optimizer(stem + ".adam", learner.policy_opt, learner.policy.names);
    }
  }
  res.learner = std::move(learner);
  return res;
}

}  // namespace elab
