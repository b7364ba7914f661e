// Copyright (c) 2026, the elab authors
// SPDX-License-Identifier: Apache-2.0
//
// Pipeline stages behind the `elab` command line. Every stage writes its
// artifacts under the run directory; SFT and reward-model artifacts live in
// the cache directory and are reused when their stage key matches.

#pragma once

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "elab/config.hpp"
#include "elab/energy.hpp"
#include "elab/error.hpp"
#include "elab/format.hpp"
#include "elab/model.hpp"
#include "elab/report.hpp"
#include "elab/reward_env.hpp"
#include "elab/rl.hpp"
#include "elab/theory.hpp"
#include "json.hpp"

namespace elab::harness {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, v);
  return buf;
}

/// File, then ELAB_SEED, then --set overrides.
inline RunConfig resolve_config(const std::optional<std::string>& path, std::vector<std::string> sets) {
  if (const char* env = std::getenv("ELAB_SEED"); env && *env) sets.insert(sets.begin(), std::string("seed=") + env);
  if (path) return load_config(*path, sets);
  std::istringstream empty;
  return parse_config(empty, sets);
}

/// Hash of the canonical lines whose key starts with one of `prefixes`.
inline std::string stage_key(const RunConfig& cfg, std::initializer_list<const char*> prefixes) {
  std::string picked, line;
  std::istringstream all(dump_config(cfg));
  while (std::getline(all, line))
    for (const char* p : prefixes)
      if (line.rfind(p, 0) == 0) {
        picked += line + "\n";
        break;
      }
  return hex64(fnv1a64(picked));
}

inline std::string sft_key(const RunConfig& c) { return stage_key(c, {"seed=", "model.", "task.", "sft."}); }
inline std::string rm_key(const RunConfig& c) {
  return stage_key(c, {"seed=", "model.", "task.", "sft.", "pref.", "rm.", "sampling.max_new_tokens="});
}
inline std::string rl_key(const RunConfig& c) {
  return stage_key(c, {"seed=", "model.", "task.", "sft.", "pref.", "rm.", "sampling.", "ppo.", "penalty.",
                       "energy.baseline_samples=", "run.checkpoint_every="});
}

// ---------------------------------------------------------------------------
// Run context

class Run {
 public:
  Run(RunConfig cfg, std::string subcommand, std::ostream* log)
      : cfg_(std::move(cfg)), sub_(std::move(subcommand)), log_(log) {
    out_ = cfg_.out_dir;
    cache_ = cfg_.cache_dir.empty() ? out_ : fs::path(cfg_.cache_dir);
    fs::create_directories(out_);
    fs::create_directories(cache_);
  }

  const RunConfig& cfg() const { return cfg_; }
  const fs::path& out() const { return out_; }
  const fs::path& cache() const { return cache_; }
  const std::string& subcommand() const { return sub_; }

  void say(const std::string& msg) const {
    if (log_) *log_ << "[" << sub_ << "] " << msg << std::endl;
  }

  /// Writes under the run directory and records the artifact.
  void write(const std::string& rel, const std::string& text) { write_at(out_ / rel, text); }
  void write_at(const fs::path& path, const std::string& text) {
    fs::create_directories(path.parent_path());
    write_text(path.string(), text);
    note(path, text);
  }
  void plot(const std::string& stem, const Plot& p) {
    write(stem + ".svg", p.svg);
    write(stem + ".csv", p.csv);
  }
  void note(const fs::path& path, const std::string& text) {
    artifacts_[fs::relative(path, out_).generic_string()] = hex64(fnv1a64(text));
  }
  void note_file(const fs::path& path) { note(path, read_text(path.string())); }

  void write_manifest(const json& extra = json::object()) {
    const fs::path mf = out_ / "manifest.json";
    json m = json::object();
    if (fs::exists(mf)) {
      try {
        m = json::parse(read_text(mf.string()));
      } catch (const json::exception&) {
        m = json::object();
      }
    }
    json rec;
    rec["config_hash"] = hex64(config_hash(cfg_));
    rec["seed"] = cfg_.seed;
    rec["config"] = dump_config(cfg_);
    json arts = json::object();
    for (const auto& [k, v] : artifacts_) arts[k] = v;
    rec["artifacts"] = arts;
    if (!extra.empty()) rec["summary"] = extra;
    m["format"] = "elab-manifest-1";
    m["runs"][sub_] = rec;
    write_text(mf.string(), m.dump(2) + "\n");
    write_text((out_ / "config.cfg").string(), dump_config(cfg_));
  }

 private:
  RunConfig cfg_;
  std::string sub_;
  std::ostream* log_;
  fs::path out_, cache_;
  std::map<std::string, std::string> artifacts_;
};

inline bool key_matches(const fs::path& key_file, const std::string& key) {
  if (!fs::exists(key_file)) return false;
  std::string s = read_text(key_file.string());
  while (!s.empty() && (s.back() == '\n' || s.back() == '\r')) s.pop_back();
  return s == key;
}

// ---------------------------------------------------------------------------
// Data and SFT

struct Data {
  std::vector<TaskInstance> train;
  std::vector<TaskInstance> eval;
};

/// One stream of instances: the first train_prompts train, the rest are held out.
inline Data make_data(const RunConfig& c) {
  auto all = gen_task(c.seed, c.train_prompts + c.eval_prompts, c.task);
  Data d;
  d.train.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(c.train_prompts));
  d.eval.assign(all.begin() + static_cast<std::ptrdiff_t>(c.train_prompts), all.end());
  return d;
}

inline std::vector<Prompt> train_prompts(const Data& d) {
  std::vector<Prompt> out;
  for (std::size_t i = 0; i < d.train.size(); ++i) out.push_back({"train-" + std::to_string(i), d.train[i].prompt});
  return out;
}

inline std::string tasks_tsv(const Data& d) {
  std::string s = "split\tindex\tprompt\n";
  for (std::size_t i = 0; i < d.train.size(); ++i) s += "train\t" + std::to_string(i) + "\t" + join_tokens(d.train[i].prompt) + "\n";
  for (std::size_t i = 0; i < d.eval.size(); ++i) s += "eval\t" + std::to_string(i) + "\t" + join_tokens(d.eval[i].prompt) + "\n";
  return s;
}

struct SampleStats {
  double gold = 0.0;
  double length = 0.0;
};

template <class Policy>
SampleStats sample_stats(const Policy& p, std::span<const TaskInstance> insts, const RunConfig& c, std::uint64_t stream) {
  SampleStats s;
  for (const auto& inst : insts) {
    const auto g = generate(p, inst.prompt, sampling_for_prompt(c.sampling(), inst.prompt, stream));
    s.gold += gold_score(inst, g.response, c.task);
    s.length += static_cast<double>(content_length(g.response));
  }
  s.gold /= static_cast<double>(insts.size());
  s.length /= static_cast<double>(insts.size());
  return s;
}

inline Parameters<float> sft_stage(Run& run, bool force = false) {
  const auto& c = run.cfg();
  const fs::path ckpt = run.cache() / "sft.ckpt", keyf = run.cache() / "sft.key";
  const std::string key = sft_key(c);
  if (!force && fs::exists(ckpt) && key_matches(keyf, key)) {
    run.say("reusing " + ckpt.string());
    return load_checkpoint(ckpt.string());
  }
  const Data d = make_data(c);
  std::vector<SftExample> demos;
  for (const auto& inst : d.train) demos.push_back({inst.prompt, demonstration(inst)});
  Rng init(c.seed, "init");
  SftConfig sc;
  sc.epochs = c.sft_epochs;
  sc.lr = c.sft_lr;
  sc.batch_size = c.sft_batch_size;
  sc.seed = c.seed;
  run.say("SFT on " + std::to_string(demos.size()) + " demonstrations, " + std::to_string(sc.epochs) + " epochs");
  auto res = sft_train(Parameters<float>::random(c.model, init), demos, sc);
  fs::create_directories(run.cache());
  save_checkpoint(ckpt.string(), res.params);
  write_text(keyf.string(), key + "\n");
  if (fs::equivalent(run.cache(), run.out())) run.note_file(ckpt);

  std::string losses = "update,loss\n";
  for (std::size_t i = 0; i < res.losses.size(); ++i) losses += std::to_string(i) + "," + format_double(res.losses[i]) + "\n";
  run.write("sft_losses.csv", losses);
  run.write("tasks.tsv", tasks_tsv(d));
  const auto st = sample_stats(res.params, d.eval, c, 3);
  json j;
  j["eval_gold"] = st.gold;
  j["eval_length"] = st.length;
  j["final_loss"] = res.losses.empty() ? 0.0 : res.losses.back();
  run.write("sft_eval.json", j.dump(2) + "\n");
  run.say("SFT eval gold " + format_double(st.gold));
  return std::move(res.params);
}

// ---------------------------------------------------------------------------
// Reward model

inline std::vector<PreferencePair> make_preferences(const RunConfig& c, std::span<const TaskInstance> insts,
                                                    std::size_t n, std::uint64_t seed) {
  return synth_preferences(insts, default_candidates(c.task, c.model.vocab_size, c.max_new_tokens), n, c.bias_rate,
                           seed, c.task);
}

inline Parameters<float> rm_stage(Run& run, const Parameters<float>& sft, bool force = false) {
  const auto& c = run.cfg();
  const fs::path ckpt = run.cache() / "rm.ckpt", keyf = run.cache() / "rm.key";
  const std::string key = rm_key(c);
  if (!force && fs::exists(ckpt) && key_matches(keyf, key)) {
    run.say("reusing " + ckpt.string());
    return load_checkpoint(ckpt.string());
  }
  const Data d = make_data(c);
  const auto pairs = make_preferences(c, d.train, c.n_pairs, c.seed);
  RewardTrainConfig rc;
  rc.lr = c.rm_lr;
  rc.epochs = c.rm_epochs;
  rc.batch_size = c.rm_batch_size;
  rc.seed = c.seed;
  run.say("reward model on " + std::to_string(pairs.size()) + " pairs");
  auto res = train_reward_model(sft.with_scalar_head(), pairs, rc);
  save_checkpoint(ckpt.string(), res.params);
  write_text(keyf.string(), key + "\n");
  {
    std::ostringstream os;
    save_preferences(os, pairs);
    run.write_at(run.cache() / "preferences.tsv", os.str());
  }
  if (fs::equivalent(run.cache(), run.out())) run.note_file(ckpt);

  std::string losses = "update,loss\n";
  for (std::size_t i = 0; i < res.batch_losses.size(); ++i)
    losses += std::to_string(i) + "," + format_double(res.batch_losses[i]) + "\n";
  run.write("rm_losses.csv", losses);

  const auto held = make_preferences(c, d.eval, std::max<std::size_t>(c.eval_prompts * 4, 16), Rng::derive_key(c.seed, "heldout", 0));
  std::size_t flipped = 0;
  for (const auto& p : pairs) flipped += p.provenance == Provenance::bias_flipped;
  std::size_t ranks = 0;
  for (const auto& inst : d.eval)
    ranks += rm_score(res.params, inst.prompt, demonstration(inst)) > rm_score(res.params, inst.prompt, TokenSeq{tok::eos});
  json j;
  j["pairs"] = pairs.size();
  j["bias_flipped_fraction"] = static_cast<double>(flipped) / static_cast<double>(std::max<std::size_t>(pairs.size(), 1));
  j["train_accuracy"] = preference_accuracy(res.params, pairs);
  j["heldout_accuracy"] = preference_accuracy(res.params, held);
  j["perfect_over_empty"] = static_cast<double>(ranks) / static_cast<double>(d.eval.size());
  run.write("rm_eval.json", j.dump(2) + "\n");
  run.say("reward model held-out accuracy " + format_double(j["heldout_accuracy"].get<double>()));
  return std::move(res.params);
}

// ---------------------------------------------------------------------------
// RL

struct RlArtifacts {
  std::vector<StepRecord> records;
  std::vector<std::vector<double>> energies;
  Parameters<float> policy;
  EnergyBaseline baseline;
};

inline std::string energies_csv(const std::vector<std::vector<double>>& e) {
  std::string s = "step,rollout,energy_final\n";
  for (std::size_t t = 0; t < e.size(); ++t)
    for (std::size_t i = 0; i < e[t].size(); ++i) s += std::to_string(t) + "," + std::to_string(i) + "," + format_double(e[t][i]) + "\n";
  return s;
}

inline std::vector<std::vector<double>> read_energies(const std::string& text) {
  std::vector<std::vector<double>> out;
  std::istringstream is(text);
  std::string line;
  std::getline(is, line);
  std::size_t n = 1;
  while (std::getline(is, line)) {
    ++n;
    if (line.empty()) continue;
    std::size_t step = 0;
    double v = 0.0;
    unsigned long long s = 0, r = 0;
    if (std::sscanf(line.c_str(), "%llu,%llu,%lf", &s, &r, &v) != 3)
      throw IoError("energies line " + std::to_string(n) + ": malformed");
    step = static_cast<std::size_t>(s);
    if (out.size() <= step) out.resize(step + 1);
    out[step].push_back(v);
  }
  return out;
}

inline std::string values_csv(const std::string& header, std::span<const double> v) {
  std::string s = header + "\n";
  for (double x : v) s += format_double(x) + "\n";
  return s;
}

inline std::vector<double> read_values(const std::string& text) {
  std::vector<double> out;
  std::istringstream is(text);
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line))
    if (!line.empty()) out.push_back(std::stod(line));
  return out;
}

/// SFT final-block energy on `baseline_samples` fresh draws over the training prompts.
inline std::vector<double> baseline_values(const Parameters<float>& sft, const Data& d, const RunConfig& c) {
  std::vector<double> v;
  for (std::size_t j = 0; j < c.baseline_samples; ++j) {
    const auto& p = d.train[j % d.train.size()].prompt;
    const auto g = generate(sft, p, sampling_for_prompt(c.sampling(), p, 1 + j));
    if (!g.response.empty()) v.push_back(final_energy(g.trace));
  }
  return v;
}

inline json summary_json(const HackingSummary& s) {
  json j;
  j["steps"] = s.steps;
  j["divergence_step"] = s.divergence_step ? json(*s.divergence_step) : json(nullptr);
  j["peak_gold_step"] = s.peak_gold_step;
  j["peak_gold"] = s.peak_gold;
  j["initial_gold"] = s.initial_gold;
  j["final_gold"] = s.final_gold;
  j["initial_proxy"] = s.initial_proxy;
  j["final_proxy"] = s.final_proxy;
  j["final_excessive_fraction"] = s.final_excessive_fraction;
  j["energy_trend_kendall"] = s.energy_trend;
  return j;
}

inline void rl_plots(Run& run, std::span<const StepRecord> recs, const std::string& prefix = "") {
  Series proxy{"proxy", {}, {}}, gold{"gold", {}, {}}, energy{"mean final energy loss", {}, {}};
  for (const auto& r : recs) {
    const auto x = static_cast<double>(r.step);
    proxy.x.push_back(x);
    proxy.y.push_back(r.proxy_reward);
    gold.x.push_back(x);
    gold.y.push_back(r.gold_reward);
    energy.x.push_back(x);
    energy.y.push_back(r.energy_final);
  }
  if (recs.empty()) return;
  const std::vector<Series> rewards{proxy, gold};
  run.plot(prefix + "rewards", line_plot(rewards, {"Proxy and gold reward", "PPO step", "reward"}));
  run.plot(prefix + "energy", line_plot(std::vector<Series>{energy}, {"Final-block energy loss", "PPO step", "energy loss"}));
}

inline RlArtifacts rl_stage(Run& run, bool force = false) {
  const auto& c = run.cfg();
  const fs::path out = run.out();
  const std::string key = rl_key(c);
  if (!force && fs::exists(out / "runlog.csv") && fs::exists(out / "policy.ckpt") && fs::exists(out / "baseline.csv") &&
      key_matches(out / "rl.key", key)) {
    run.say("reusing RL run in " + out.string());
    RlArtifacts a;
    std::istringstream rl(read_text((out / "runlog.csv").string()));
    a.records = read_runlog(rl);
    a.energies = read_energies(read_text((out / "energies.csv").string()));
    a.policy = load_checkpoint((out / "policy.ckpt").string());
    a.baseline = make_baseline(read_values(read_text((out / "baseline.csv").string())), "sft");
    return a;
  }
  const auto sft = sft_stage(run);
  const auto rm = rm_stage(run, sft);
  const Data d = make_data(c);

  const auto table = sft_energy_table(sft, train_prompts(d), c.sampling());
  {
    std::ostringstream os;
    table.save(os);
    run.write("sft_energy.tsv", os.str());
  }
  RlArtifacts a;
  const auto base = baseline_values(sft, d, c);
  a.baseline = make_baseline(base, "sft");
  run.write("baseline.csv", values_csv("energy_final", base));

  PenaltyConfig pen = c.penalty();
  pen.table = &table;
  RolloutContext ctx{&sft, &rm, &c.task, c.sampling()};
  TrainRlOptions opt;
  opt.seed = c.seed;
  opt.checkpoint_every = c.checkpoint_every;
  opt.checkpoint_dir = (out / "checkpoints").string();
  const std::size_t every = std::max<std::size_t>(1, c.ppo.total_steps / 10);
  opt.on_step = [&](const StepRecord& r) {
    if (r.step % every == 0 || r.step + 1 == c.ppo.total_steps)
      run.say("step " + std::to_string(r.step) + " proxy " + format_double(std::round(r.proxy_reward * 1e4) / 1e4) +
              " gold " + format_double(std::round(r.gold_reward * 1e4) / 1e4));
  };
  run.say(std::string("PPO (") + variant_name(pen.variant) + ") for " + std::to_string(c.ppo.total_steps) + " steps");
  auto res = train_rl(Learner(sft, sft.with_scalar_head(), c.ppo), ctx, pen, c.ppo, d.train, opt);

  run.write("runlog.csv", runlog_csv(res.log));
  run.write("energies.csv", energies_csv(res.log.energies));
  std::string ppo = "step,policy_loss,value_loss,mean_ratio,clip_fraction,first_max_ratio_dev\n";
  for (std::size_t i = 0; i < res.log.updates.size(); ++i) {
    const auto& u = res.log.updates[i];
    ppo += std::to_string(i) + "," + format_double(u.policy_loss) + "," + format_double(u.value_loss) + "," +
           format_double(u.mean_ratio) + "," + format_double(u.clip_fraction) + "," + format_double(u.first_max_ratio_dev) + "\n";
  }
  run.write("ppo_stats.csv", ppo);
  save_checkpoint((out / "policy.ckpt").string(), res.learner.policy);
  save_checkpoint((out / "critic.ckpt").string(), res.learner.critic);
  run.note_file(out / "policy.ckpt");
  if (fs::exists(out / "checkpoints"))
    for (const auto& e : fs::directory_iterator(out / "checkpoints")) run.note_file(e.path());
  write_text((out / "rl.key").string(), key + "\n");

  a.records = std::move(res.log.records);
  a.energies = std::move(res.log.energies);
  a.policy = std::move(res.learner.policy);
  const auto summary = a.records.empty() ? HackingSummary{}
                                         : hacking_report(a.records, a.energies.back(), a.baseline, c.energy_k);
  json j = summary_json(summary);
  j["variant"] = variant_name(pen.variant);
  j["baseline_mean"] = a.baseline.mean;
  j["baseline_std"] = a.baseline.std;
  run.write("hacking.json", j.dump(2) + "\n");
  rl_plots(run, a.records);
  return a;
}

// ---------------------------------------------------------------------------
// Energy evaluation

struct PolicyEval {
  std::vector<EnergyRecord> records;
  std::vector<HiddenTrace> traces;
  std::vector<TokenSeq> responses;
  std::vector<double> gold;
};

inline PolicyEval eval_policy(const Parameters<float>& p, std::span<const TaskInstance> insts, const RunConfig& c,
                              std::uint64_t stream) {
  PolicyEval e;
  for (std::size_t i = 0; i < insts.size(); ++i) {
    const auto g = generate(p, insts[i].prompt, sampling_for_prompt(c.sampling(), insts[i].prompt, stream));
    e.records.push_back(energy_record("eval-" + std::to_string(i), g.trace));
    e.traces.push_back(g.trace);
    e.responses.push_back(g.response);
    e.gold.push_back(gold_score(insts[i], g.response, c.task));
  }
  return e;
}

inline std::vector<double> final_values(const PolicyEval& e) {
  std::vector<double> v;
  for (const auto& r : e.records)
    if (r.response_length) v.push_back(r.per_layer.back());
  return v;
}

inline json eval_energy_stage(Run& run) {
  const auto& c = run.cfg();
  const auto rl = rl_stage(run);
  const auto sft = sft_stage(run);
  const Data d = make_data(c);
  constexpr std::uint64_t kEvalStream = 2;
  const auto es = eval_policy(sft, d.eval, c, kEvalStream), er = eval_policy(rl.policy, d.eval, c, kEvalStream);

  std::string rows = "prompt_id,policy,response_length,energy_final,gold\n";
  for (const auto* e : {&es, &er})
    for (std::size_t i = 0; i < e->records.size(); ++i) {
      const auto& r = e->records[i];
      rows += r.prompt_id + "," + (e == &es ? "sft" : "rlhf") + "," + std::to_string(r.response_length) + "," +
              format_double(r.response_length ? r.per_layer.back() : 0.0) + "," + format_double(e->gold[i]) + "\n";
    }
  run.write("energy_eval.csv", rows);

  std::string prof = "policy,layer,mean_energy,alpha\n";
  for (const auto* e : {&es, &er}) {
    const auto off = offsets_from_traces(e->traces);
    for (std::size_t l = 0; l < c.model.n_layers; ++l) {
      std::vector<double> v;
      for (const auto& r : e->records)
        if (r.response_length) v.push_back(r.per_layer[l]);
      prof += std::string(e == &es ? "sft" : "rlhf") + "," + std::to_string(l) + "," + format_double(stats::mean(v)) + "," +
              format_double(off.alpha[l]) + "\n";
    }
  }
  run.write("layer_profile.csv", prof);

  const auto vs = final_values(es), vr = final_values(er);
  const std::vector<HistogramSeries> hist{{"SFT", vs}, {"RLHF", vr}};
  run.plot("energy_hist", histogram_plot(hist, 20, {"Final-block energy loss on held-out prompts", "energy loss", "count"}));

  // energy along the run, one point per saved checkpoint (SFT is step 0)
  std::vector<CheckpointEnergy> series{{0, vs}};
  std::map<std::size_t, fs::path> ckpts;
  if (fs::exists(run.out() / "checkpoints"))
    for (const auto& e : fs::directory_iterator(run.out() / "checkpoints")) {
      const std::string n = e.path().filename().string();
      if (n.rfind("policy-", 0) == 0 && e.path().extension() == ".ckpt")
        ckpts[std::stoul(n.substr(7, n.size() - 12))] = e.path();
    }
  for (const auto& [step, path] : ckpts) {
    const auto pe = eval_policy(load_checkpoint(path.string()), d.eval, c, kEvalStream);
    series.push_back({step, final_values(pe)});
  }
  json j;
  j["sft_mean_energy"] = stats::mean(vs);
  j["rlhf_mean_energy"] = stats::mean(vr);
  j["sft_excessive_fraction"] = excessive_fraction(vs, rl.baseline, c.energy_k);
  j["rlhf_excessive_fraction"] = excessive_fraction(vr, rl.baseline, c.energy_k);
  j["sft_mean_gold"] = stats::mean(es.gold);
  j["rlhf_mean_gold"] = stats::mean(er.gold);
  if (series.size() >= 2) {
    const auto ph = phenomenon_report(series, rl.baseline, c.energy_k);
    std::string s = "step,mean_energy,excessive_fraction\n";
    Series line{"mean final energy loss", {}, {}};
    for (std::size_t i = 0; i < ph.steps.size(); ++i) {
      s += std::to_string(ph.steps[i]) + "," + format_double(ph.mean_energy[i]) + "," +
           format_double(ph.excessive_fraction[i]) + "\n";
      line.x.push_back(static_cast<double>(ph.steps[i]));
      line.y.push_back(ph.mean_energy[i]);
    }
    run.write("phenomenon.csv", s);
    run.plot("checkpoint_energy", line_plot(std::vector<Series>{line}, {"Held-out energy loss by checkpoint", "PPO step", "energy loss"}));
    j["checkpoint_energy_trend_kendall"] = ph.trend;
  }

  // contextual dependency of RLHF responses against their energy loss
  std::vector<CdsRecord> cds_recs;
  for (std::size_t i = 0; i < er.responses.size() && cds_recs.size() < c.cds_samples; ++i) {
    if (er.responses[i].empty()) continue;
    cds_recs.push_back(cds(rl.policy, er.records[i].prompt_id, d.eval[i].prompt, er.responses[i]));
  }
  if (cds_recs.size() >= 3) {
    const auto cr = correlation_report(cds_recs);
    std::ostringstream os;
    write_scatter(os, cr);
    run.write("cds_scatter.csv", os.str());
    Series pts{"responses", {}, {}};
    for (const auto& r : cr.records) {
      pts.x.push_back(r.energy_final);
      pts.y.push_back(r.cds);
    }
    PlotStyle st{"Contextual dependency against energy loss", "energy loss", "CDS"};
    st.scatter = true;
    run.plot("cds", line_plot(std::vector<Series>{pts}, st));
    j["cds_energy_spearman"] = cr.spearman;
  }
  run.write("energy_eval.json", j.dump(2) + "\n");
  return j;
}

// ---------------------------------------------------------------------------
// Bounds on the micro model

inline std::vector<TokenSeq> micro_prompts(const RunConfig& c) {
  std::vector<TokenSeq> out;
  const Token lo = tok::first_content, hi = static_cast<Token>(c.micro_vocab_size);
  for (Token a = lo; a < hi && out.size() < c.micro_prompts; ++a) out.push_back({tok::bos, a, tok::sep});
  for (Token a = lo; a + 1 < hi && out.size() < c.micro_prompts; a += 2)
    out.push_back({tok::bos, a, static_cast<Token>(a + 1), tok::sep});
  for (Token a = lo; a < hi && out.size() < c.micro_prompts; ++a)
    for (Token b = lo; b < hi && out.size() < c.micro_prompts; ++b)
      if (a != b && !(b == a + 1 && (a - lo) % 2 == 0)) out.push_back({tok::bos, a, b, tok::sep});
  return out;
}

inline ModelConfig micro_model(const RunConfig& c) {
  return ModelConfig{c.micro_vocab_size, c.micro_d_model, c.micro_n_layers, c.micro_n_heads, 4 + c.micro_max_len, true};
}

/// The micro copy task: answer with the prompt's symbols, then eos.
inline Parameters<double> micro_policy(Run& run) {
  const auto& c = run.cfg();
  const auto prompts = micro_prompts(c);
  std::vector<SftExample> demos;
  for (const auto& p : prompts) {
    TokenSeq r(p.begin() + 1, p.end() - 1);
    r.push_back(tok::eos);
    demos.push_back({p, r});
  }
  const ModelConfig mc = micro_model(c);
  mc.validate();
  Rng init(c.seed, "micro-init");
  SftConfig sc;
  sc.epochs = c.micro_train_steps;
  sc.lr = c.micro_lr;
  sc.batch_size = demos.size();
  sc.seed = c.seed;
  auto res = sft_train(Parameters<float>::random(mc, init), demos, sc);
  save_checkpoint((run.out() / "micro.ckpt").string(), res.params);
  run.note_file(run.out() / "micro.ckpt");
  return res.params.cast<double>();
}

inline EnumerationSetting micro_setting(const RunConfig& c, Parameters<double> policy) {
  EnumerationSetting s;
  s.policy = std::move(policy);
  s.prompts = micro_prompts(c);
  if (s.prompts.size() != c.micro_prompts) throw ConfigError("micro.prompts exceeds the prompts the micro vocabulary allows");
  s.priors.assign(s.prompts.size(), 1.0 / static_cast<double>(s.prompts.size()));
  for (Token t = 0; t < static_cast<Token>(c.micro_vocab_size); ++t)
    if (t != tok::pad && t != tok::bos) s.vocab.push_back(t);
  s.max_len = c.micro_max_len;
  s.temperature = c.micro_temperature;
  return s;
}

/// Recomputes every report field from the raw table with plain loops.
inline double bound_report_discrepancy(const JointTable& t, const BoundReport& r) {
  const std::size_t nx = t.px.size(), ny = t.responses.size();
  std::vector<double> py(ny, 0.0);
  for (std::size_t x = 0; x < nx; ++x)
    for (std::size_t y = 0; y < ny; ++y) py[y] += t.px[x] * t.pyx[x][y];
  double I = 0.0, hy = 0.0, hyx = 0.0, hx = 0.0;
  for (std::size_t y = 0; y < ny; ++y)
    if (py[y] > 0) hy -= py[y] * std::log(py[y]);
  for (std::size_t x = 0; x < nx; ++x) {
    if (t.px[x] > 0) hx -= t.px[x] * std::log(t.px[x]);
    for (std::size_t y = 0; y < ny; ++y) {
      const double j = t.px[x] * t.pyx[x][y];
      if (j > 0) {
        I += j * std::log(t.pyx[x][y] / py[y]);
        hyx -= j * std::log(t.pyx[x][y]);
      }
    }
  }
  double worst = std::max({std::abs(I - r.mutual_information), std::abs(hy - r.output_entropy),
                           std::abs(hyx - r.conditional_entropy), std::abs(hx - r.prompt_entropy),
                           std::abs(I - (hy - hyx))});
  for (const auto& row : r.rows) {
    const bool out = row.bound == "output_mi";
    auto val = [&](std::size_t x, std::size_t y) { return out ? t.out_l1[x][y] : t.energy[x][y][row.layer]; };
    double mean = 0.0;
    for (std::size_t x = 0; x < nx; ++x)
      for (std::size_t y = 0; y < ny; ++y) mean += t.px[x] * t.pyx[x][y] * val(x, y);
    const double alpha = out ? 0.0 : -mean;
    double m2 = 0.0;
    for (std::size_t x = 0; x < nx; ++x)
      for (std::size_t y = 0; y < ny; ++y) m2 += t.px[x] * t.pyx[x][y] * (val(x, y) + alpha) * (val(x, y) + alpha);
    const double rhs = m2 > 0 ? 0.5 + 0.5 * std::log(2 * std::numbers::pi * m2)
                              : 0.5 * std::log(2 * std::numbers::pi * kDegenerateVariance);
    const double lhs = row.bound == "energy_entropy" ? hy : I;
    worst = std::max({worst, std::abs(row.alpha - alpha), std::abs(row.second_moment - m2), std::abs(row.rhs - rhs),
                      std::abs(row.lhs - lhs), std::abs(row.gap - (rhs - lhs)), std::abs(row.conditional_entropy - hyx)});
  }
  return worst;
}

inline constexpr double kRecomputeTolerance = 1e-9;

struct BoundsResult {
  JointTable table;
  BoundReport report;
  double discrepancy = 0.0;
};

inline BoundsResult validate_bounds_stage(Run& run) {
  const auto& c = run.cfg();
  BoundsResult b;
  const auto setting = micro_setting(c, micro_policy(run));
  run.say("enumerating " + std::to_string(setting.prompts.size()) + " prompts over " + std::to_string(setting.vocab.size()) +
          " symbols, length " + std::to_string(setting.max_len));
  b.table = enumerate_joint(setting);
  b.report = bound_report(b.table);
  b.discrepancy = bound_report_discrepancy(b.table, b.report);
  {
    std::ostringstream os;
    write_bound_report(os, b.report);
    run.write("bound_report.csv", os.str());
  }
  {
    std::ostringstream os;
    write_joint_table(os, b.table);
    run.write("joint_table.csv", os.str());
  }
  json j;
  j["mutual_information"] = b.report.mutual_information;
  j["output_entropy"] = b.report.output_entropy;
  j["conditional_entropy"] = b.report.conditional_entropy;
  j["prompt_entropy"] = b.report.prompt_entropy;
  j["responses_per_prompt"] = b.table.responses.size();
  j["recompute_discrepancy"] = b.discrepancy;
  json rows = json::array();
  for (const auto& r : b.report.rows)
    rows.push_back({{"bound", r.bound}, {"layer", r.layer}, {"gap", r.gap}, {"holds", r.gap >= 0.0}});
  j["rows"] = rows;
  run.write("bounds.json", j.dump(2) + "\n");
  return b;
}

// ---------------------------------------------------------------------------
// Report and sweep

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = config_detail::trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

struct RunSummary {
  std::string label;
  std::vector<StepRecord> records;
  HackingSummary summary;
};

inline RunSummary summarize_run_dir(const fs::path& dir, double k) {
  RunSummary s;
  s.label = dir.filename().empty() ? dir.parent_path().filename().string() : dir.filename().string();
  std::istringstream rl(read_text((dir / "runlog.csv").string()));
  s.records = read_runlog(rl);
  const auto energies = read_energies(read_text((dir / "energies.csv").string()));
  const auto baseline = make_baseline(read_values(read_text((dir / "baseline.csv").string())), "sft");
  if (energies.size() != s.records.size()) throw IoError("run " + dir.string() + ": energies and runlog disagree");
  if (!s.records.empty()) s.summary = hacking_report(s.records, energies.back(), baseline, k);
  return s;
}

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

/// Hacking induction on the plain run: gold peaks by 80% of training and ends
/// at or below 95% of the peak while the proxy ends above where it started.
inline CheckResult check_hacking(const HackingSummary& s) {
  CheckResult r{"hacking", false, ""};
  const bool early = static_cast<double>(s.peak_gold_step) <= 0.8 * static_cast<double>(s.steps);
  const bool drop = s.final_gold <= 0.95 * s.peak_gold;
  const bool proxy = s.final_proxy > s.initial_proxy;
  r.pass = s.steps > 0 && early && drop && proxy;
  r.detail = "peak gold " + format_double(s.peak_gold) + " at step " + std::to_string(s.peak_gold_step) + "/" +
             std::to_string(s.steps) + ", final gold " + format_double(s.final_gold) + ", proxy " +
             format_double(s.initial_proxy) + " -> " + format_double(s.final_proxy);
  return r;
}

/// The penalised run ends with at least the plain run's gold and strictly fewer excessive rollouts.
inline CheckResult check_mitigation(const HackingSummary& plain, const HackingSummary& penalised) {
  CheckResult r{"mitigation", false, ""};
  r.pass = plain.steps > 0 && penalised.steps > 0 && penalised.final_gold >= plain.final_gold &&
           penalised.final_excessive_fraction < plain.final_excessive_fraction;
  r.detail = "final gold " + format_double(penalised.final_gold) + " vs " + format_double(plain.final_gold) +
             ", excessive fraction " + format_double(penalised.final_excessive_fraction) + " vs " +
             format_double(plain.final_excessive_fraction);
  return r;
}

inline json report_stage(Run& run) {
  const auto& c = run.cfg();
  std::vector<fs::path> dirs;
  for (const auto& d : split_list(c.report_runs)) dirs.emplace_back(d);
  if (dirs.empty()) {
    rl_stage(run);
    dirs.push_back(run.out());
  }
  std::vector<RunSummary> runs;
  for (const auto& d : dirs) runs.push_back(summarize_run_dir(d, c.energy_k));
  std::vector<std::string> labels;
  std::vector<std::vector<StepRecord>> logs;
  for (const auto& r : runs) {
    labels.push_back(r.label);
    logs.push_back(r.records);
  }
  run.write("comparison.csv", comparison_csv(labels, logs));
  std::string summ =
      "run,steps,divergence_step,peak_gold_step,peak_gold,final_gold,initial_proxy,final_proxy,final_excessive_fraction,"
      "energy_trend\n";
  json j = json::array();
  std::vector<Series> gold, energy;
  for (const auto& r : runs) {
    const auto& s = r.summary;
    summ += svg_detail::clean_name(r.label) + "," + std::to_string(s.steps) + "," +
            (s.divergence_step ? std::to_string(*s.divergence_step) : std::string("none")) + "," +
            std::to_string(s.peak_gold_step) + "," + format_double(s.peak_gold) + "," + format_double(s.final_gold) + "," +
            format_double(s.initial_proxy) + "," + format_double(s.final_proxy) + "," +
            format_double(s.final_excessive_fraction) + "," + format_double(s.energy_trend) + "\n";
    json e = summary_json(s);
    e["run"] = r.label;
    j.push_back(e);
    Series g{r.label, {}, {}}, en{r.label, {}, {}};
    for (const auto& rec : r.records) {
      g.x.push_back(static_cast<double>(rec.step));
      g.y.push_back(rec.gold_reward);
      en.x.push_back(static_cast<double>(rec.step));
      en.y.push_back(rec.energy_final);
    }
    if (!r.records.empty()) {
      gold.push_back(g);
      energy.push_back(en);
    }
  }
  run.write("hacking_summary.csv", summ);
  if (!gold.empty()) {
    run.plot("gold_comparison", line_plot(gold, {"Gold reward", "PPO step", "gold reward"}));
    run.plot("energy_comparison", line_plot(energy, {"Final-block energy loss", "PPO step", "energy loss"}));
  }
  json out;
  out["runs"] = j;
  // the first run is read as the plain one, the second as the penalised one
  json checks = json::array();
  if (!runs.empty()) {
    const auto h = check_hacking(runs[0].summary);
    checks.push_back({{"name", h.name}, {"pass", h.pass}, {"detail", h.detail}});
  }
  if (runs.size() >= 2) {
    const auto m = check_mitigation(runs[0].summary, runs[1].summary);
    checks.push_back({{"name", m.name}, {"pass", m.pass}, {"detail", m.detail}});
  }
  out["checks"] = checks;
  run.write("report.json", out.dump(2) + "\n");
  return out;
}

inline json sweep_stage(Run& run) {
  const auto& base = run.cfg();
  const ConfigField* field = find_field(base.sweep_param);
  if (!field) throw ConfigError("sweep.param names unknown key '" + base.sweep_param + "'");
  std::string csv = "value,final_gold,peak_gold,final_proxy,final_excessive_fraction,energy_trend\n";
  json rows = json::array();
  std::optional<double> best;
  double best_gold = -INFINITY;
  for (double v : base.sweep_values) {
    RunConfig c = base;
    apply_setting(c, base.sweep_param, format_double(v));
    const fs::path sub = run.out() / "sweep" / (base.sweep_param + "=" + format_double(v));
    c.out_dir = sub.string();
    c.cache_dir = run.cache().string();
    validate_config(c);
    Run child(c, "train-rl", nullptr);
    run.say(base.sweep_param + " = " + format_double(v));
    const auto a = rl_stage(child);
    child.write_manifest();
    const auto s = a.records.empty() ? HackingSummary{} : hacking_report(a.records, a.energies.back(), a.baseline, c.energy_k);
    csv += format_double(v) + "," + format_double(s.final_gold) + "," + format_double(s.peak_gold) + "," +
           format_double(s.final_proxy) + "," + format_double(s.final_excessive_fraction) + "," +
           format_double(s.energy_trend) + "\n";
    json e = summary_json(s);
    e["value"] = v;
    rows.push_back(e);
    if (s.final_gold > best_gold) {
      best_gold = s.final_gold;
      best = v;
    }
  }
  run.write("sweep.csv", csv);
  json j;
  j["param"] = base.sweep_param;
  j["best_value"] = best ? json(*best) : json(nullptr);
  j["best_final_gold"] = best ? json(best_gold) : json(nullptr);
  j["runs"] = rows;
  run.write("sweep.json", j.dump(2) + "\n");
  return j;
}

// ---------------------------------------------------------------------------
// Dispatch

inline const std::vector<std::string>& subcommands() {
  static const std::vector<std::string> s{"sft", "train-rm", "train-rl", "eval-energy", "validate-bounds", "report", "sweep"};
  return s;
}

struct Outcome {
  json summary = json::object();
  bool check_failed = false;
  std::string check_detail;
};

/// Runs one subcommand. `check` makes `report` fail unless both the hacking
/// and the mitigation checks pass; `validate-bounds` always checks its recompute.
inline Outcome run_subcommand(const std::string& sub, const RunConfig& cfg, std::ostream* log, bool check = false) {
  Run run(cfg, sub, log);
  Outcome o;
  json& summary = o.summary;
  if (sub == "sft") {
    sft_stage(run, true);
  } else if (sub == "train-rm") {
    rm_stage(run, sft_stage(run), true);
  } else if (sub == "train-rl") {
    rl_stage(run, true);
    summary = json::parse(read_text((run.out() / "hacking.json").string()));
  } else if (sub == "eval-energy") {
    summary = eval_energy_stage(run);
  } else if (sub == "validate-bounds") {
    const auto b = validate_bounds_stage(run);
    summary["recompute_discrepancy"] = b.discrepancy;
    summary["mutual_information"] = b.report.mutual_information;
    if (!(b.discrepancy <= kRecomputeTolerance)) {
      o.check_failed = true;
      o.check_detail = "bound report recompute discrepancy " + format_double(b.discrepancy);
    }
  } else if (sub == "report") {
    summary = report_stage(run);
    if (check) {
      if (summary["checks"].size() < 2) {
        o.check_failed = true;
        o.check_detail = "report --check needs a plain and a penalised run in report.runs";
      }
      for (const auto& c : summary["checks"])
        if (!c["pass"].get<bool>()) {
          o.check_failed = true;
          o.check_detail += (o.check_detail.empty() ? "" : "; ") + c["name"].get<std::string>() + ": " +
                            c["detail"].get<std::string>();
        }
    }
  } else if (sub == "sweep") {
    summary = sweep_stage(run);
  } else {
    throw ConfigError("unknown subcommand '" + sub + "'");
  }
  run.write_manifest(summary);
  return o;
}

}  // namespace elab::harness
