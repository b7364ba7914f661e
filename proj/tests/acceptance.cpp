// Copyright (c) 2026, the elab authors
// SPDX-License-Identifier: Apache-2.0
//
// Acceptance run: one PASS/FAIL line per criterion at its pinned tolerance.
//   acceptance [criterion ...]     (default: all)
// ELAB_ACCEPTANCE_DIR sets the scratch directory for the seeded runs.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "elab/harness.hpp"

using namespace elab;
namespace fs = std::filesystem;
using harness::json;

#ifndef ELAB_SOURCE_DIR
#define ELAB_SOURCE_DIR "."
#endif
#ifndef ELAB_BINARY_DIR
#define ELAB_BINARY_DIR "."
#endif

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

Tensor<double> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor<double> t(shape);
  for (auto& v : t.data()) v = scale * rng.normal();
  return t;
}

template <class T>
Parameters<T> lively(const ModelConfig& cfg, std::uint64_t seed, double scale = 0.4) {
  Rng rng(seed, "acceptance-weights");
  auto p = Parameters<T>::zeros(cfg, false);
  for (std::size_t i = 0; i < p.tensors.size(); ++i) {
    const bool gain = p.names[i].find("gain") != std::string::npos;
    for (auto& v : p.tensors[i].data()) v = static_cast<T>(gain ? 1.0 + 0.2 * rng.normal() : scale * rng.normal());
  }
  return p;
}

fs::path work_dir() {
  if (const char* d = std::getenv("ELAB_ACCEPTANCE_DIR"); d && *d) return d;
  return fs::path(ELAB_BINARY_DIR) / "acceptance-runs";
}

std::string config_path(const char* name) { return (fs::path(ELAB_SOURCE_DIR) / "configs" / name).string(); }

// ---------------------------------------------------------------------------
// 1. gradients

Verdict gradient_fidelity() {
  using ad::Tape;
  using ad::Var;
  using Leaves = std::span<const Var<double>>;
  double worst = 0.0;
  std::size_t checked = 0;
  std::string first_failure;
  auto check = [&](const std::string& name, auto f, std::vector<Tensor<double>> pt) {
    const auto rep = ad::grad_check(f, pt, 1e-4, 1e-4);
    worst = std::max(worst, rep.max_rel_error);
    checked += rep.checked;
    if (!rep.passed && first_failure.empty()) first_failure = name;
  };
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed, "acceptance-grad");
    auto w = [&](std::size_t n) {
      std::vector<double> v(n);
      for (auto& x : v) x = rng.normal();
      return v;
    };
    const auto w6 = w(6), w9 = w(9), w10 = w(10);
    const std::vector<int> idx{2, 0}, ids{1, 0, 1, 2};
    const std::vector<double> cw{0.25, 1.5};
    check("matmul", [](Tape<double>&, Leaves in) { return ad::sum(ad::square(ad::matmul(in[0], in[1]))); },
          {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)});
    check("matmul_bt", [](Tape<double>&, Leaves in) { return ad::sum(ad::square(ad::matmul_bt(in[0], in[1]))); },
          {random_tensor({3, 4}, rng), random_tensor({5, 4}, rng)});
    check("add/sub/mul",
          [&](Tape<double>& t, Leaves in) {
            return ad::sum(ad::mul(ad::sub(ad::add(in[0], in[1]), t.constant({2, 3}, w6)), in[0]));
          },
          {random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)});
    check("scale/add_bias",
          [&](Tape<double>& t, Leaves in) {
            return ad::sum(ad::mul(ad::scale(ad::add_bias(in[0], in[1]), 0.7), t.constant({2, 3}, w6)));
          },
          {random_tensor({2, 3}, rng), random_tensor({3}, rng)});
    check("exp", [&](Tape<double>& t, Leaves in) { return ad::sum(ad::mul(ad::exp(in[0]), t.constant({6}, w6))); },
          {random_tensor({6}, rng, 0.5)});
    check("softplus",
          [&](Tape<double>& t, Leaves in) { return ad::sum(ad::mul(ad::softplus(in[0]), t.constant({6}, w6))); },
          {random_tensor({6}, rng, 3.0)});
    check("gelu", [&](Tape<double>& t, Leaves in) { return ad::sum(ad::mul(ad::gelu(in[0]), t.constant({6}, w6))); },
          {random_tensor({6}, rng, 2.0)});
    check("layer_norm",
          [&](Tape<double>& t, Leaves in) {
            return ad::sum(ad::mul(ad::layer_norm(in[0], in[1], in[2], 1e-5), t.constant({2, 3}, w6)));
          },
          {random_tensor({2, 3}, rng), random_tensor({3}, rng), random_tensor({3}, rng)});
    check("softmax_rows",
          [&](Tape<double>& t, Leaves in) { return ad::sum(ad::mul(ad::softmax_rows(in[0]), t.constant({2, 3}, w6))); },
          {random_tensor({2, 3}, rng)});
    check("softmax_rows causal",
          [&](Tape<double>& t, Leaves in) {
            return ad::sum(ad::mul(ad::softmax_rows(in[0], true), t.constant({3, 3}, w9)));
          },
          {random_tensor({3, 3}, rng)});
    check("log_softmax_rows",
          [&](Tape<double>& t, Leaves in) {
            return ad::sum(ad::mul(ad::log_softmax_rows(in[0]), t.constant({2, 3}, w6)));
          },
          {random_tensor({2, 3}, rng)});
    check("pick", [&](Tape<double>&, Leaves in) { return ad::sum(ad::pick(ad::log_softmax_rows(in[0]), idx)); },
          {random_tensor({2, 3}, rng)});
    check("cross_entropy_loss", [&](Tape<double>&, Leaves in) { return ad::cross_entropy_loss(in[0], idx); },
          {random_tensor({2, 3}, rng)});
    check("cross_entropy_loss weighted",
          [&](Tape<double>&, Leaves in) {
            return ad::cross_entropy_loss(in[0], std::span<const int>(idx), std::span<const double>(cw));
          },
          {random_tensor({2, 3}, rng)});
    check("embedding",
          [&](Tape<double>&, Leaves in) { return ad::sum(ad::square(ad::embedding(in[0], std::span<const int>(ids)))); },
          {random_tensor({3, 2}, rng)});
    check("slice/concat",
          [&](Tape<double>& t, Leaves in) {
            std::vector<Var<double>> parts{ad::slice_cols(in[0], 1, 2), ad::slice_rows(in[1], 0, 2)};
            return ad::sum(ad::mul(ad::concat_cols<double>(parts), t.constant({2, 5}, w10)));
          },
          {random_tensor({2, 4}, rng), random_tensor({3, 3}, rng)});
    check("clamp/minimum",
          [&](Tape<double>&, Leaves in) {
            return ad::sum(ad::mul(ad::minimum(ad::clamp(in[0], -0.5, 0.5), in[1]), in[1]));
          },
          {random_tensor({6}, rng), random_tensor({6}, rng)});
    check("mean", [](Tape<double>&, Leaves in) { return ad::mean(ad::square(in[0])); }, {random_tensor({5}, rng)});

    // full two-layer transformer, every coordinate of every tensor
    const ModelConfig mc{10, 8, 2, 2, 8, true};
    const auto base = lively<double>(mc, 1000 + seed);
    const TokenSeq toks{tok::bos, 4, 7, tok::sep, 5};
    const std::vector<int> targets{4, 7, 3, 5, 2};
    check("transformer",
          [&](Tape<double>& t, Leaves in) {
            auto f = forward_tape(t, base, std::vector<Var<double>>(in.begin(), in.end()), toks);
            return ad::cross_entropy_loss(f.logits, std::span<const int>(targets));
          },
          std::vector<Tensor<double>>(base.tensors.begin(), base.tensors.end()));
  }
  Verdict v;
  v.pass = first_failure.empty() && worst < 1e-4;
  v.detail = "max rel err " + num(worst) + " over " + std::to_string(checked) + " coordinates, 20 seeds" +
             (first_failure.empty() ? "" : ", first failure " + first_failure);
  return v;
}

// ---------------------------------------------------------------------------
// 2. telescoping on 32-bit traces

Verdict energy_telescoping() {
  const ModelConfig mc{16, 16, 4, 2, 24, true};
  double worst = 0.0;
  for (std::uint64_t k = 0; k < 100; ++k) {
    const auto p = lively<float>(mc, 2000 + k % 10, 0.5);
    Rng rng(k, "acceptance-telescope");
    TokenSeq prompt{tok::bos};
    for (std::size_t i = 0, n = 1 + rng.uniform_int(4); i < n; ++i)
      prompt.push_back(static_cast<Token>(tok::first_content + rng.uniform_int(12)));
    prompt.push_back(tok::sep);
    SamplingConfig sc;
    sc.max_new_tokens = 4 + rng.uniform_int(10);
    sc.seed = k;
    auto g = generate(p, prompt, sc);
    if (g.response.empty()) continue;
    const auto& tr = g.trace;
    double sum = 0.0, first = 0.0, last = 0.0;
    for (double e : energy_profile(tr)) sum += e;
    for (std::size_t t = tr.response_begin; t < tr.response_end; ++t) {
      first += tr.in_l1(0, t);
      last += tr.out_l1(tr.n_layers - 1, t);
    }
    worst = std::max(worst, std::abs(sum - (first - last) / static_cast<double>(tr.response_length())));
  }
  return {worst <= 1e-5, "max |sum dE - (in_0 - out_L)| = " + num(worst) + " over 100 float traces"};
}

// ---------------------------------------------------------------------------
// 3. information identities

EnumerationSetting micro_setting(std::uint64_t seed, double temperature) {
  const ModelConfig mc{8, 8, 2, 2, 8, true};
  EnumerationSetting s;
  s.policy = lively<double>(mc, seed, 0.6);
  Rng rng(seed, "acceptance-priors");
  double tot = 0.0;
  for (Token a = 4; a < 8; ++a) {
    s.prompts.push_back({tok::bos, a, tok::sep});
    s.priors.push_back(0.1 + rng.uniform());
    tot += s.priors.back();
  }
  for (auto& q : s.priors) q /= tot;
  s.vocab = {tok::eos, tok::sep, 4, 5, 6, 7};
  s.max_len = 3;
  s.temperature = temperature;
  return s;
}

Verdict information_identities() {
  double worst = 0.0;
  bool argmax_exact = true;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto t = enumerate_joint(micro_setting(3000 + seed, 1.0));
    const double I = mutual_information(t), hy = output_entropy(t), hyx = conditional_entropy(t), hx = prompt_entropy(t);
    worst = std::max({worst, std::abs(I - (hy - hyx)), std::max(0.0, -I), std::max(0.0, I - std::min(hx, hy))});
    const auto a = enumerate_joint(micro_setting(3000 + seed, 0.0));
    argmax_exact = argmax_exact && conditional_entropy(a) == 0.0;
  }
  return {worst <= 1e-9 && argmax_exact,
          "max identity violation " + num(worst) + " on 50 tables; argmax H(Y|X) exactly 0: " + (argmax_exact ? "yes" : "no")};
}

// ---------------------------------------------------------------------------
// 4. bound machinery

Verdict bound_machinery() {
  Rng rng(4, "acceptance-bounds");
  double worst_closed = 0.0;
  bool envelope = true, mono = true;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<WeightedSample> s;
    double tot = 0.0;
    for (int i = 0; i < 8; ++i) {
      s.push_back({3.0 * rng.normal(), 0.05 + rng.uniform()});
      tot += s.back().prob;
    }
    for (auto& x : s) x.prob /= tot;
    const double alpha = 2.0 * rng.normal();
    double m2 = 0.0;
    for (const auto& x : s) m2 += x.prob * (x.value + alpha) * (x.value + alpha);
    const auto opt = bound_rhs(s, alpha);
    worst_closed = std::max(worst_closed, std::abs(opt.rhs - (0.5 + 0.5 * std::log(2.0 * std::numbers::pi * m2))));
    for (int i = 1; i <= 100; ++i) envelope = envelope && opt.rhs <= bound_rhs(s, alpha, 0.05 * i).rhs;

    const double a = 3.0 * rng.normal(), sigma = 0.1 + 2.0 * rng.uniform();
    std::vector<double> grid;
    double d = -a - 5.0 - rng.uniform();
    for (int i = 0; i < 10; ++i) {
      grid.push_back(d);
      d += 0.05 + 0.4 * rng.uniform();
      if (d >= -a) break;
    }
    mono = mono && bound_monotonicity(a, sigma, grid);
  }
  return {worst_closed <= 1e-12 && envelope && mono,
          "closed form err " + num(worst_closed) + ", envelope " + (envelope ? "holds" : "violated") +
              " on 100-point grid, monotonicity " + (mono ? "holds" : "fails") + " on 20 settings"};
}

// ---------------------------------------------------------------------------
// 5. bound gap report on the shipped micro model

Verdict bound_gap_report() {
  auto cfg = load_config(config_path("micro.cfg"), {"run.out_dir=" + (work_dir() / "micro").string()});
  const auto o = harness::run_subcommand("validate-bounds", cfg, nullptr);
  const std::string csv = read_text((work_dir() / "micro" / "bound_report.csv").string());
  const std::string header = csv.substr(0, csv.find('\n'));
  std::size_t cols = 1;
  for (char ch : header) cols += ch == ',';
  const double disc = o.summary["recompute_discrepancy"].get<double>();
  std::string gaps;
  std::istringstream is(csv);
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line)) {
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string c; std::getline(ls, c, ',');) f.push_back(c);
    if (f.size() == 9) gaps += " " + f[0] + "[" + f[1] + "]=" + num(std::stod(f[7]));
  }
  return {cols == 9 && header == kBoundReportHeader && disc <= 1e-9,
          std::to_string(cols) + " columns, recompute discrepancy " + num(disc) + ", I=" +
              num(o.summary["mutual_information"].get<double>()) + ", gaps" + gaps};
}

// ---------------------------------------------------------------------------
// 6. penalty closed forms

Verdict penalty_formulas() {
  auto traj = [](std::size_t n, double reward) {
    Trajectory t;
    t.prompt = {tok::bos, 4, tok::sep};
    t.response.assign(n, 4);
    t.logprobs.assign(n, -0.5);
    t.reward = reward;
    return t;
  };
  bool ok = true;
  std::string why;
  auto expect = [&](bool c, const char* what) {
    if (!c && why.empty()) why = what;
    ok = ok && c;
  };
  {
    PenaltyConfig pen;
    pen.variant = PenaltyVariant::kl;
    pen.beta = 0.3;
    const auto t = traj(4, 1.0);
    const auto s = shape_rewards(t, pen, t.logprobs);
    expect(s == std::vector<double>({0.0, 0.0, 0.0, 1.0}), "kl at reference");
  }
  {
    PenaltyConfig pen;
    pen.variant = PenaltyVariant::lp;
    pen.lp_max_len = 5;
    const double sigma = 0.4, r = 0.0;  // the terminal reward is then the length term alone
    for (const auto& [len, want] : std::vector<std::pair<std::size_t, double>>{{0, sigma}, {5, 0.0}, {10, -sigma}}) {
      auto t = traj(len + 1, r);
      t.response.back() = tok::eos;
      expect(shape_rewards(t, pen, t.logprobs, sigma).back() - r == want, "lp endpoints");
    }
  }
  {
    auto t = traj(3, 1.0);
    t.energy_final = 5.0;
    EnergyTable table;
    table.insert(t.prompt, "p", 2.0);
    PenaltyConfig pen;
    pen.variant = PenaltyVariant::eppo;
    pen.eta = 1.0;
    pen.table = &table;
    expect(shape_rewards(t, pen, t.logprobs).back() == -2.0, "eppo arithmetic");
  }
  return {ok, ok ? "kl zero at reference, lp {0, N, 2N} -> {+s, 0, -s}, eppo terminal -2 (exact)" : "failed: " + why};
}

// ---------------------------------------------------------------------------
// 7-10. seeded runs

struct Seeded {
  bool done = false;
  std::vector<StepRecord> ppo, eppo;
  HackingSummary ppo_summary, eppo_summary;
};

Seeded& seeded_runs() {
  static Seeded s;
  if (s.done) return s;
  const fs::path w = work_dir();
  fs::remove_all(w / "cache");
  for (const char* d : {"ppo", "eppo"}) fs::remove_all(w / d);
  for (const auto& [dir, file] : {std::pair{"ppo", "hacking-ppo.cfg"}, std::pair{"eppo", "hacking-eppo.cfg"}}) {
    auto cfg = load_config(config_path(file),
                           {"run.out_dir=" + (w / dir).string(), "run.cache_dir=" + (w / "cache").string()});
    std::cerr << "running " << file << " (" << cfg.ppo.total_steps << " PPO steps)" << std::endl;
    harness::run_subcommand("train-rl", cfg, &std::cerr);
  }
  for (auto* p : {&s.ppo_summary, &s.eppo_summary}) {
    const auto rs = harness::summarize_run_dir(w / (p == &s.ppo_summary ? "ppo" : "eppo"), 3.0);
    *p = rs.summary;
    (p == &s.ppo_summary ? s.ppo : s.eppo) = rs.records;
  }
  s.done = true;
  return s;
}

Verdict hacking_induction() {
  const auto& s = seeded_runs();
  const auto c = harness::check_hacking(s.ppo_summary);
  return {c.pass, c.detail};
}

Verdict mitigation() {
  const auto& s = seeded_runs();
  const auto c = harness::check_mitigation(s.ppo_summary, s.eppo_summary);
  return {c.pass, c.detail};
}

// tau-b from sign products and tie-group sizes: sum sgn(dx) sgn(dy) / sqrt((n0 - n1)(n0 - n2))
double kendall_tau_b_groups(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double num = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = i + 1; j < x.size(); ++j) {
      const double a = x[i] - x[j], b = y[i] - y[j];
      num += static_cast<double>((a > 0) - (a < 0)) * static_cast<double>((b > 0) - (b < 0));
    }
  auto tie_pairs = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    double t = 0.0;
    for (std::size_t i = 0; i < v.size();) {
      std::size_t j = i;
      while (j < v.size() && v[j] == v[i]) ++j;
      const double g = static_cast<double>(j - i);
      t += g * (g - 1) / 2;
      i = j;
    }
    return t;
  };
  const double n0 = n * (n - 1) / 2;
  const double d = std::sqrt((n0 - tie_pairs(x)) * (n0 - tie_pairs(y)));
  return d > 0 ? num / d : 0.0;
}

Verdict energy_instrumentation() {
  seeded_runs();
  const fs::path dir = work_dir() / "ppo";
  std::istringstream rl(read_text((dir / "runlog.csv").string()));
  const auto recs = read_runlog(rl);
  const auto energies = harness::read_energies(read_text((dir / "energies.csv").string()));
  const auto cfg = load_config(config_path("hacking-ppo.cfg"));
  bool gaps = recs.size() != cfg.ppo.total_steps || energies.size() != recs.size();
  double mean_err = 0.0;
  std::vector<double> steps, e;
  for (std::size_t i = 0; i < recs.size() && !gaps; ++i) {
    gaps = recs[i].step != i || !std::isfinite(recs[i].energy_final) || energies[i].size() != cfg.ppo.batch_size;
    double m = 0.0;
    for (double v : energies[i]) m += v;
    mean_err = std::max(mean_err, std::abs(m / static_cast<double>(energies[i].size()) - recs[i].energy_final));
    steps.push_back(static_cast<double>(recs[i].step));
    e.push_back(recs[i].energy_final);
  }
  const auto h = json::parse(read_text((dir / "hacking.json").string()));
  const double emitted = h["energy_trend_kendall"].get<double>();
  const double oracle = kendall_tau_b_groups(steps, e);
  const double err = std::abs(emitted - oracle);
  return {!gaps && err <= 1e-9 && mean_err <= 1e-9,
          std::to_string(recs.size()) + " steps" + (gaps ? " WITH GAPS" : " without gaps") + ", Kendall trend " +
              num(emitted) + " (recompute err " + num(err) + "), per-step mean err " + num(mean_err)};
}

Verdict determinism() {
  seeded_runs();
  const fs::path w = work_dir();
  // repeat both runs from scratch, including SFT and the reward model
  fs::remove_all(w / "cache-repeat");
  bool same = true;
  std::string detail;
  for (const auto& [dir, file] : {std::pair{"ppo", "hacking-ppo.cfg"}, std::pair{"eppo", "hacking-eppo.cfg"}}) {
    const std::string rep = std::string(dir) + "-repeat";
    fs::remove_all(w / rep);
    auto cfg = load_config(config_path(file),
                           {"run.out_dir=" + (w / rep).string(), "run.cache_dir=" + (w / "cache-repeat").string()});
    std::cerr << "repeating " << file << std::endl;
    harness::run_subcommand("train-rl", cfg, &std::cerr);
    const auto a = read_text((w / dir / "runlog.csv").string()), b = read_text((w / rep / "runlog.csv").string());
    const bool eq = a == b;
    same = same && eq;
    detail += std::string(detail.empty() ? "" : ", ") + dir + " runlog " + (eq ? "identical" : "DIFFERS") + " (" +
              std::to_string(a.size()) + " bytes)";
  }
  return {same, detail};
}

}  // namespace

int main(int argc, char** argv) {
  struct Criterion {
    int id;
    const char* name;
    std::function<Verdict()> run;
  };
  const std::vector<Criterion> all{
      {1, "gradient fidelity", gradient_fidelity},
      {2, "energy telescoping", energy_telescoping},
      {3, "information identities", information_identities},
      {4, "bound machinery", bound_machinery},
      {5, "bound gap report", bound_gap_report},
      {6, "penalty formulas", penalty_formulas},
      {7, "hacking induction", hacking_induction},
      {8, "mitigation", mitigation},
      {9, "energy dynamics instrumentation", energy_instrumentation},
      {10, "determinism", determinism},
  };
  std::set<int> pick;
  for (int i = 1; i < argc; ++i) pick.insert(std::atoi(argv[i]));
  fs::create_directories(work_dir());

  int failed = 0;
  for (const auto& c : all) {
    if (!pick.empty() && !pick.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !v.pass;
    std::printf("%s %2d %s: %s (%.1f s)\n", v.pass ? "PASS" : "FAIL", c.id, c.name, v.detail.c_str(), secs);
    std::fflush(stdout);
  }
  return failed ? 1 : 0;
}
