// Copyright (c) 2026, the elab authors
// SPDX-License-Identifier: Apache-2.0
//
// Energy loss of transformer blocks: the drop in residual-stream L1 norm
// across a block, averaged over the response positions of a trace.

#pragma once

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "elab/error.hpp"
#include "elab/model.hpp"
#include "elab/rng.hpp"
#include "elab/stats.hpp"

namespace elab {

/// FNV-1a over the little-endian int32 encoding of the tokens.
inline std::uint64_t prompt_hash(std::span<const Token> tokens) {
  std::string bytes;
  bytes.reserve(tokens.size() * 4);
  for (Token t : tokens) {
    const auto u = static_cast<std::uint32_t>(t);
    for (int b = 0; b < 4; ++b) bytes.push_back(static_cast<char>((u >> (8 * b)) & 0xFFu));
  }
  return fnv1a64(bytes);
}

/// Sampling config whose seed is specialised to one prompt, so a prompt's
/// generation does not depend on where it sits in a corpus.
inline SamplingConfig sampling_for_prompt(SamplingConfig cfg, std::span<const Token> prompt, std::uint64_t stream = 0) {
  cfg.seed = Rng::derive_key(cfg.seed, "prompt", prompt_hash(prompt) ^ splitmix64(stream));
  return cfg;
}

inline void require_response(const HiddenTrace& trace, const char* op) {
  if (trace.response_length() == 0) throw ContractError(std::string(op) + ": trace has no response tokens");
  if (trace.response_end > trace.length()) throw ContractError(std::string(op) + ": response span exceeds trace");
}

/// Mean over response positions of in_l1 - out_l1 at `layer`.
inline double energy_loss(const HiddenTrace& trace, std::size_t layer) {
  if (layer >= trace.n_layers) throw IndexError("energy_loss: layer " + std::to_string(layer) + " out of range");
  require_response(trace, "energy_loss");
  double s = 0.0;
  for (std::size_t t = trace.response_begin; t < trace.response_end; ++t) s += trace.in_l1(layer, t) - trace.out_l1(layer, t);
  return s / static_cast<double>(trace.response_length());
}

inline std::vector<double> energy_profile(const HiddenTrace& trace) {
  require_response(trace, "energy_profile");
  std::vector<double> out(trace.n_layers);
  for (std::size_t l = 0; l < trace.n_layers; ++l) out[l] = energy_loss(trace, l);
  return out;
}

inline double final_energy(const HiddenTrace& trace) { return energy_loss(trace, trace.n_layers - 1); }

struct EnergyRecord {
  std::string prompt_id;
  std::vector<double> per_layer;
  std::vector<double> per_token_final;
  double final_out_l1_mean = 0.0;
  std::size_t response_length = 0;
};

inline EnergyRecord energy_record(std::string prompt_id, const HiddenTrace& trace) {
  EnergyRecord r;
  r.prompt_id = std::move(prompt_id);
  r.response_length = trace.response_length();
  if (r.response_length == 0) {
    r.per_layer.assign(trace.n_layers, 0.0);
    return r;
  }
  r.per_layer = energy_profile(trace);
  const std::size_t last = trace.n_layers - 1;
  for (std::size_t t = trace.response_begin; t < trace.response_end; ++t) {
    r.per_token_final.push_back(trace.in_l1(last, t) - trace.out_l1(last, t));
    r.final_out_l1_mean += trace.out_l1(last, t);
  }
  r.final_out_l1_mean /= static_cast<double>(r.response_length);
  return r;
}

// ---------------------------------------------------------------------------
// Corpus offsets

struct EnergyOffsets {
  std::vector<double> alpha;
  std::size_t corpus_size = 0;
  std::uint64_t corpus_seed = 0;
};

/// alpha_l = mean out_l1 - mean in_l1, pooled over every response token of every trace.
inline EnergyOffsets offsets_from_traces(std::span<const HiddenTrace> traces, std::uint64_t seed = 0) {
  if (traces.empty()) throw ContractError("estimate_offsets: empty corpus");
  const std::size_t L = traces[0].n_layers;
  std::vector<double> sum_in(L, 0.0), sum_out(L, 0.0);
  std::size_t tokens = 0;
  for (const auto& tr : traces) {
    if (tr.n_layers != L) throw DimensionError("estimate_offsets: traces disagree on layer count");
    for (std::size_t t = tr.response_begin; t < tr.response_end; ++t) {
      for (std::size_t l = 0; l < L; ++l) {
        sum_in[l] += tr.in_l1(l, t);
        sum_out[l] += tr.out_l1(l, t);
      }
      ++tokens;
    }
  }
  if (tokens == 0) throw ContractError("estimate_offsets: corpus produced no response tokens");
  EnergyOffsets o;
  o.corpus_size = traces.size();
  o.corpus_seed = seed;
  o.alpha.resize(L);
  for (std::size_t l = 0; l < L; ++l) o.alpha[l] = (sum_out[l] - sum_in[l]) / static_cast<double>(tokens);
  return o;
}

template <std::floating_point T>
EnergyOffsets estimate_offsets(const Parameters<T>& policy, std::span<const TokenSeq> prompts, const SamplingConfig& cfg) {
  if (prompts.empty()) throw ContractError("estimate_offsets: empty corpus");
  std::vector<HiddenTrace> traces;
  traces.reserve(prompts.size());
  for (const auto& p : prompts) traces.push_back(generate(policy, p, sampling_for_prompt(cfg, p)).trace);
  return offsets_from_traces(traces, cfg.seed);
}

// ---------------------------------------------------------------------------
// SFT energy table, keyed by prompt content

struct Prompt {
  std::string id;
  TokenSeq tokens;
};

class EnergyTable {
 public:
  struct Entry {
    std::string prompt_id;
    double value = 0.0;
  };

  void insert(std::span<const Token> prompt, std::string id, double value) {
    entries_[prompt_hash(prompt)] = Entry{std::move(id), value};
  }
  bool contains(std::span<const Token> prompt) const { return entries_.count(prompt_hash(prompt)) != 0; }
  double lookup(std::span<const Token> prompt) const {
    const auto it = entries_.find(prompt_hash(prompt));
    if (it == entries_.end()) {
      char buf[17];
      std::snprintf(buf, sizeof buf, "%016" PRIx64, prompt_hash(prompt));
      throw MissingEntryError(std::string("energy table: no entry for prompt hash ") + buf);
    }
    return it->second.value;
  }
  std::size_t size() const { return entries_.size(); }
  const std::map<std::uint64_t, Entry>& entries() const { return entries_; }

  /// One line per entry: "<hash hex> <prompt id> <value>".
  void save(std::ostream& os) const {
    char buf[64];
    for (const auto& [h, e] : entries_) {
      std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
      os << buf << ' ' << e.prompt_id << ' ';
      std::snprintf(buf, sizeof buf, "%.17g", e.value);
      os << buf << '\n';
    }
  }
  void save(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path);
    save(f);
  }
  static EnergyTable load(std::istream& is) {
    EnergyTable t;
    std::string line;
    std::size_t n = 0;
    while (std::getline(is, line)) {
      ++n;
      if (line.empty()) continue;
      std::istringstream ls(line);
      std::string hex, id, val;
      if (!(ls >> hex >> id >> val)) throw IoError("energy table line " + std::to_string(n) + ": expected 3 fields");
      try {
        t.entries_[std::stoull(hex, nullptr, 16)] = Entry{id, std::stod(val)};
      } catch (const std::logic_error&) {
        throw IoError("energy table line " + std::to_string(n) + ": malformed number");
      }
    }
    return t;
  }
  static EnergyTable load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read " + path);
    return load(f);
  }

 private:
  std::map<std::uint64_t, Entry> entries_;
};

/// Final-block energy loss of one SFT generation per prompt.
template <std::floating_point T>
EnergyTable sft_energy_table(const Parameters<T>& sft, std::span<const Prompt> prompts, const SamplingConfig& cfg) {
  std::set<std::string> ids;
  for (const auto& p : prompts)
    if (!ids.insert(p.id).second) throw ContractError("sft_energy_table: duplicate prompt id '" + p.id + "'");
  EnergyTable table;
  for (const auto& p : prompts) {
    const auto g = generate(sft, p.tokens, sampling_for_prompt(cfg, p.tokens));
    table.insert(p.tokens, p.id, final_energy(g.trace));
  }
  return table;
}

// ---------------------------------------------------------------------------
// Excess detection

struct EnergyBaseline {
  double mean = 0.0;
  double std = 0.0;
  std::vector<double> quantile_levels;
  std::vector<double> quantiles;
  std::vector<double> sorted;
  std::size_t count = 0;
  std::string source;

  double quantile(double p) const { return stats::quantile_sorted(sorted, p); }
};

inline EnergyBaseline make_baseline(std::vector<double> values, std::string source) {
  if (values.size() < 2) throw ContractError("baseline: need at least 2 samples");
  EnergyBaseline b;
  b.mean = stats::mean(values);
  b.std = stats::sample_std(values);
  std::sort(values.begin(), values.end());
  b.sorted = std::move(values);
  b.count = b.sorted.size();
  b.source = std::move(source);
  b.quantile_levels = {0.01, 0.05, 0.25, 0.5, 0.75, 0.95, 0.99};
  for (double p : b.quantile_levels) b.quantiles.push_back(b.quantile(p));
  return b;
}

inline void require_baseline(const EnergyBaseline& b) {
  if (b.count < 2) throw ContractError("detect_excessive: baseline needs at least 2 samples");
}

/// value > mean + k * std; with std == 0 the threshold is the mean itself.
inline bool detect_excessive(double value, const EnergyBaseline& b, double k = 3.0) {
  require_baseline(b);
  return value > b.mean + k * b.std;
}

inline bool detect_excessive_quantile(double value, const EnergyBaseline& b, double p = 0.99) {
  require_baseline(b);
  return value > b.quantile(p);
}

inline double excessive_fraction(std::span<const double> values, const EnergyBaseline& b, double k = 3.0) {
  if (values.empty()) return 0.0;
  std::size_t n = 0;
  for (double v : values) n += detect_excessive(v, b, k) ? 1 : 0;
  return static_cast<double>(n) / static_cast<double>(values.size());
}

struct CheckpointEnergy {
  std::size_t step = 0;
  std::vector<double> values;
};

struct PhenomenonReport {
  std::vector<std::size_t> steps;
  std::vector<double> mean_energy;
  std::vector<double> excessive_fraction;
  double trend = 0.0;
};

inline PhenomenonReport phenomenon_report(std::span<const CheckpointEnergy> series, const EnergyBaseline& b,
                                          double k = 3.0) {
  if (series.size() < 2) throw ContractError("phenomenon_report: need at least 2 checkpoints");
  PhenomenonReport r;
  for (std::size_t i = 0; i < series.size(); ++i) {
    if (i > 0 && series[i].step <= series[i - 1].step)
      throw ContractError("phenomenon_report: steps must be strictly increasing");
    if (series[i].values.empty()) throw ContractError("phenomenon_report: checkpoint without samples");
    r.steps.push_back(series[i].step);
    r.mean_energy.push_back(stats::mean(series[i].values));
    r.excessive_fraction.push_back(excessive_fraction(series[i].values, b, k));
  }
  std::vector<double> x(r.steps.begin(), r.steps.end());
  r.trend = stats::kendall_tau(x, r.mean_energy);
  return r;
}

}  // namespace elab
