// Copyright (c) 2026, the elab authors
// SPDX-License-Identifier: Apache-2.0
//
// Flat key=value run configuration. Every key is registered with a type, a
// default and a one-line description; unknown keys are rejected.

#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "elab/error.hpp"
#include "elab/format.hpp"
#include "elab/model.hpp"
#include "elab/reward_env.hpp"
#include "elab/rl.hpp"
#include "elab/rng.hpp"

namespace elab {

struct RunConfig {
  std::uint64_t seed = 42;
  std::string out_dir = "runs/default";
  std::string cache_dir;  // SFT and reward-model artifacts; empty = out_dir
  std::string report_runs;  // comma-separated run directories; empty = out_dir
  std::size_t checkpoint_every = 100;

  ModelConfig model{32, 32, 2, 2, 24, true};
  TaskConfig task{tok::first_content, 12, 1, 4, 6, 0.5};
  std::size_t train_prompts = 256;
  std::size_t eval_prompts = 64;

  std::size_t sft_epochs = 30;
  double sft_lr = 3e-3;
  std::size_t sft_batch_size = 16;

  double bias_rate = 0.5;
  std::size_t n_pairs = 3000;
  double rm_lr = 1e-3;
  std::size_t rm_epochs = 1;
  std::size_t rm_batch_size = 16;

  double temperature = 1.0;
  double top_p = 1.0;
  std::size_t max_new_tokens = 14;

  PPOConfig ppo;
  PenaltyVariant variant = PenaltyVariant::none;
  std::optional<double> beta;
  std::optional<std::size_t> lp_max_len;
  double lp_decay = 0.99;
  std::optional<double> eta;

  double energy_k = 3.0;
  double energy_quantile = 0.99;
  std::size_t baseline_samples = 256;

  std::string sweep_param = "penalty.eta";
  std::vector<double> sweep_values = {1, 2, 5, 10, 20, 40};

  // micro model for exact enumeration
  std::size_t micro_vocab_size = 8;
  std::size_t micro_d_model = 16;
  std::size_t micro_n_layers = 2;
  std::size_t micro_n_heads = 2;
  std::size_t micro_prompts = 6;
  std::size_t micro_max_len = 3;
  double micro_temperature = 1.0;
  std::size_t micro_train_steps = 150;
  double micro_lr = 1e-2;
  std::size_t cds_samples = 64;

  SamplingConfig sampling() const {
    SamplingConfig s;
    s.temperature = temperature;
    s.top_p = top_p;
    s.max_new_tokens = max_new_tokens;
    s.seed = Rng::derive_key(seed, "sampling", 0);
    return s;
  }
  PenaltyConfig penalty() const {
    PenaltyConfig p;
    p.variant = variant;
    p.beta = beta.value_or(0.0);
    p.lp_max_len = lp_max_len.value_or(0);
    p.lp_decay = lp_decay;
    p.eta = eta.value_or(0.0);
    return p;
  }
};

namespace config_detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class U>
std::string type_name() {
  if constexpr (std::is_same_v<U, bool>) return "bool";
  else if constexpr (std::is_integral_v<U>) return "unsigned integer";
  else if constexpr (std::is_floating_point_v<U>) return "number";
  else if constexpr (std::is_same_v<U, std::string>) return "string";
  else if constexpr (std::is_same_v<U, PenaltyVariant>) return "one of none|kl|lp|eppo";
  else return "comma-separated numbers";
}

template <class U>
std::optional<U> parse(const std::string& v) {
  if constexpr (std::is_same_v<U, bool>) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    return std::nullopt;
  } else if constexpr (std::is_integral_v<U>) {
    if (v.empty() || v[0] == '-' || v[0] == '+') return std::nullopt;
    U out{};
    const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
    if (r.ec != std::errc{} || r.ptr != v.data() + v.size()) return std::nullopt;
    return out;
  } else if constexpr (std::is_floating_point_v<U>) {
    if (v.empty()) return std::nullopt;
    char* end = nullptr;
    const double d = std::strtod(v.c_str(), &end);
    if (end != v.c_str() + v.size() || !std::isfinite(d)) return std::nullopt;
    return d;
  } else if constexpr (std::is_same_v<U, std::string>) {
    return v;
  } else if constexpr (std::is_same_v<U, PenaltyVariant>) {
    if (v == "none") return PenaltyVariant::none;
    if (v == "kl") return PenaltyVariant::kl;
    if (v == "lp") return PenaltyVariant::lp;
    if (v == "eppo") return PenaltyVariant::eppo;
    return std::nullopt;
  } else {
    std::vector<double> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
      const auto d = parse<double>(trim(item));
      if (!d) return std::nullopt;
      out.push_back(*d);
    }
    if (out.empty()) return std::nullopt;
    return out;
  }
}

template <class U>
std::string show(const U& v) {
  if constexpr (std::is_same_v<U, bool>) return v ? "true" : "false";
  else if constexpr (std::is_integral_v<U>) return std::to_string(v);
  else if constexpr (std::is_floating_point_v<U>) return format_double(v);
  else if constexpr (std::is_same_v<U, std::string>) return v;
  else if constexpr (std::is_same_v<U, PenaltyVariant>) return variant_name(v);
  else {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + format_double(v[i]);
    return s;
  }
}

template <class U>
struct Unwrap {
  using type = U;
  static constexpr bool optional = false;
};
template <class U>
struct Unwrap<std::optional<U>> {
  using type = U;
  static constexpr bool optional = true;
};

}  // namespace config_detail

struct ConfigField {
  std::string key;
  std::string type;
  std::string doc;
  std::function<bool(RunConfig&, const std::string&)> set;
  std::function<std::optional<std::string>(const RunConfig&)> get;
};

template <class Access>
ConfigField make_field(std::string key, std::string doc, Access access) {
  using Raw = std::remove_cvref_t<decltype(access(std::declval<RunConfig&>()))>;
  using W = config_detail::Unwrap<Raw>;
  using U = typename W::type;
  ConfigField f;
  f.key = std::move(key);
  f.type = config_detail::type_name<U>();
  f.doc = std::move(doc);
  f.set = [access](RunConfig& c, const std::string& v) {
    const auto parsed = config_detail::parse<U>(v);
    if (!parsed) return false;
    access(c) = *parsed;
    return true;
  };
  f.get = [access](const RunConfig& c) -> std::optional<std::string> {
    const auto& value = access(const_cast<RunConfig&>(c));
    if constexpr (W::optional) {
      if (!value) return std::nullopt;
      return config_detail::show<U>(*value);
    } else {
      return config_detail::show<U>(value);
    }
  };
  return f;
}

inline const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = [] {
    std::vector<ConfigField> f;
    auto add = [&](std::string k, std::string d, auto a) { f.push_back(make_field(std::move(k), std::move(d), a)); };
    add("seed", "global seed; ELAB_SEED overrides", [](RunConfig& c) -> auto& { return c.seed; });
    add("run.out_dir", "output directory", [](RunConfig& c) -> auto& { return c.out_dir; });
    add("run.cache_dir", "directory for reusable SFT and reward-model artifacts (empty = run.out_dir)",
        [](RunConfig& c) -> auto& { return c.cache_dir; });
    add("report.runs", "comma-separated run directories compared by `report` (empty = run.out_dir)",
        [](RunConfig& c) -> auto& { return c.report_runs; });
    add("run.checkpoint_every", "policy checkpoint cadence in PPO steps (0 = off)",
        [](RunConfig& c) -> auto& { return c.checkpoint_every; });
    add("model.vocab_size", "token vocabulary size", [](RunConfig& c) -> auto& { return c.model.vocab_size; });
    add("model.d_model", "residual width", [](RunConfig& c) -> auto& { return c.model.d_model; });
    add("model.n_layers", "transformer blocks", [](RunConfig& c) -> auto& { return c.model.n_layers; });
    add("model.n_heads", "attention heads", [](RunConfig& c) -> auto& { return c.model.n_heads; });
    add("model.max_seq_len", "context length", [](RunConfig& c) -> auto& { return c.model.max_seq_len; });
    add("model.tie_embeddings", "share input and output embeddings",
        [](RunConfig& c) -> auto& { return c.model.tie_embeddings; });
    add("task.keyword_count", "size of the keyword sub-vocabulary",
        [](RunConfig& c) -> auto& { return c.task.keyword_count; });
    add("task.min_keywords", "fewest keywords per prompt", [](RunConfig& c) -> auto& { return c.task.min_keywords; });
    add("task.max_keywords", "most keywords per prompt (<= 6)", [](RunConfig& c) -> auto& { return c.task.max_keywords; });
    add("task.brevity", "gold brevity target B", [](RunConfig& c) -> auto& { return c.task.brevity; });
    add("task.redundancy", "gold redundancy weight", [](RunConfig& c) -> auto& { return c.task.redundancy; });
    add("task.train_prompts", "training prompt count", [](RunConfig& c) -> auto& { return c.train_prompts; });
    add("task.eval_prompts", "held-out prompt count", [](RunConfig& c) -> auto& { return c.eval_prompts; });
    add("sft.epochs", "SFT epochs", [](RunConfig& c) -> auto& { return c.sft_epochs; });
    add("sft.lr", "SFT learning rate", [](RunConfig& c) -> auto& { return c.sft_lr; });
    add("sft.batch_size", "SFT minibatch size", [](RunConfig& c) -> auto& { return c.sft_batch_size; });
    add("pref.bias_rate", "probability a pair is labelled by length", [](RunConfig& c) -> auto& { return c.bias_rate; });
    add("pref.n_pairs", "preference pairs to synthesise", [](RunConfig& c) -> auto& { return c.n_pairs; });
    add("rm.lr", "reward model learning rate", [](RunConfig& c) -> auto& { return c.rm_lr; });
    add("rm.epochs", "reward model epochs", [](RunConfig& c) -> auto& { return c.rm_epochs; });
    add("rm.batch_size", "reward model minibatch size", [](RunConfig& c) -> auto& { return c.rm_batch_size; });
    add("sampling.temperature", "rollout temperature", [](RunConfig& c) -> auto& { return c.temperature; });
    add("sampling.top_p", "rollout nucleus mass", [](RunConfig& c) -> auto& { return c.top_p; });
    add("sampling.max_new_tokens", "rollout length cap", [](RunConfig& c) -> auto& { return c.max_new_tokens; });
    add("ppo.gamma", "discount", [](RunConfig& c) -> auto& { return c.ppo.gamma; });
    add("ppo.lambda", "GAE lambda", [](RunConfig& c) -> auto& { return c.ppo.lambda; });
    add("ppo.clip", "surrogate clip epsilon", [](RunConfig& c) -> auto& { return c.ppo.clip; });
    add("ppo.epochs", "passes per rollout batch", [](RunConfig& c) -> auto& { return c.ppo.epochs; });
    add("ppo.minibatch_size", "trajectories per optimizer step", [](RunConfig& c) -> auto& { return c.ppo.minibatch_size; });
    add("ppo.policy_lr", "policy learning rate", [](RunConfig& c) -> auto& { return c.ppo.policy_lr; });
    add("ppo.critic_lr", "critic learning rate", [](RunConfig& c) -> auto& { return c.ppo.critic_lr; });
    add("ppo.batch_size", "rollouts per step", [](RunConfig& c) -> auto& { return c.ppo.batch_size; });
    add("ppo.total_steps", "PPO steps", [](RunConfig& c) -> auto& { return c.ppo.total_steps; });
    add("ppo.max_grad_norm", "global gradient norm clip", [](RunConfig& c) -> auto& { return c.ppo.max_grad_norm; });
    add("penalty.variant", "none | kl | lp | eppo", [](RunConfig& c) -> auto& { return c.variant; });
    add("penalty.beta", "KL weight (required for kl)", [](RunConfig& c) -> auto& { return c.beta; });
    add("penalty.lp_max_len", "length-penalty N (required for lp)", [](RunConfig& c) -> auto& { return c.lp_max_len; });
    add("penalty.lp_decay", "decay of the reward-std moving average", [](RunConfig& c) -> auto& { return c.lp_decay; });
    add("penalty.eta", "energy penalty weight (required for eppo)", [](RunConfig& c) -> auto& { return c.eta; });
    add("energy.k", "excess threshold in baseline standard deviations", [](RunConfig& c) -> auto& { return c.energy_k; });
    add("energy.quantile", "excess threshold quantile (quantile mode)",
        [](RunConfig& c) -> auto& { return c.energy_quantile; });
    add("energy.baseline_samples", "SFT responses in the energy baseline",
        [](RunConfig& c) -> auto& { return c.baseline_samples; });
    add("sweep.param", "key varied by `sweep`", [](RunConfig& c) -> auto& { return c.sweep_param; });
    add("sweep.values", "grid for `sweep`", [](RunConfig& c) -> auto& { return c.sweep_values; });
    add("micro.vocab_size", "micro model vocabulary", [](RunConfig& c) -> auto& { return c.micro_vocab_size; });
    add("micro.d_model", "micro model width", [](RunConfig& c) -> auto& { return c.micro_d_model; });
    add("micro.n_layers", "micro model blocks", [](RunConfig& c) -> auto& { return c.micro_n_layers; });
    add("micro.n_heads", "micro model heads", [](RunConfig& c) -> auto& { return c.micro_n_heads; });
    add("micro.prompts", "enumerated prompts", [](RunConfig& c) -> auto& { return c.micro_prompts; });
    add("micro.max_len", "enumerated response length", [](RunConfig& c) -> auto& { return c.micro_max_len; });
    add("micro.temperature", "enumeration temperature (0 = argmax)",
        [](RunConfig& c) -> auto& { return c.micro_temperature; });
    add("micro.train_steps", "micro model training steps", [](RunConfig& c) -> auto& { return c.micro_train_steps; });
    add("micro.lr", "micro model learning rate", [](RunConfig& c) -> auto& { return c.micro_lr; });
    add("cds.samples", "held-out responses scored for the dependency report",
        [](RunConfig& c) -> auto& { return c.cds_samples; });
    std::sort(f.begin(), f.end(), [](const ConfigField& a, const ConfigField& b) { return a.key < b.key; });
    return f;
  }();
  return fields;
}

inline const ConfigField* find_field(const std::string& key) {
  for (const auto& f : config_fields())
    if (f.key == key) return &f;
  return nullptr;
}

/// Applies one assignment; `line` is used in error messages (0 for overrides).
inline void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value, int line = 0) {
  const ConfigField* f = find_field(key);
  if (!f) throw ConfigError("unknown key '" + key + "'", line);
  if (!f->set(cfg, value)) throw ConfigError("key '" + key + "' expects " + f->type + ", got '" + value + "'", line);
}

inline void validate_config(const RunConfig& c, int variant_line = 0) {
  auto require = [&](bool present, const char* key) {
    if (!present)
      throw ConfigError(std::string("missing required key '") + key + "' for penalty.variant=" + variant_name(c.variant),
                        variant_line);
  };
  switch (c.variant) {
    case PenaltyVariant::none: break;
    case PenaltyVariant::kl: require(c.beta.has_value(), "penalty.beta"); break;
    case PenaltyVariant::lp: require(c.lp_max_len.has_value(), "penalty.lp_max_len"); break;
    case PenaltyVariant::eppo: require(c.eta.has_value(), "penalty.eta"); break;
  }
  try {
    c.model.validate();
    c.task.validate(c.model.vocab_size);
    c.ppo.validate();
    c.sampling().validate();
    c.penalty().variant == PenaltyVariant::eppo ? void() : c.penalty().validate();
  } catch (const ContractError& e) {
    throw ConfigError(e.what());
  }
  if (c.variant == PenaltyVariant::eppo && !(*c.eta > 0.0)) throw ConfigError("penalty.eta must be > 0");
  if (c.train_prompts == 0 || c.eval_prompts == 0) throw ConfigError("prompt counts must be >= 1");
  if (!(c.bias_rate >= 0.0 && c.bias_rate <= 1.0)) throw ConfigError("pref.bias_rate must be in [0, 1]");
  if (c.baseline_samples < 2) throw ConfigError("energy.baseline_samples must be >= 2");
  if (c.ppo.total_steps > 0 && c.max_new_tokens == 0) throw ConfigError("sampling.max_new_tokens must be >= 1");
  if (c.micro_vocab_size < tok::first_content + 1 || c.micro_vocab_size > 10)
    throw ConfigError("micro.vocab_size must be in [5, 10]");
}

/// Parses "key = value" lines; '#' starts a comment. `overrides` ("key=value")
/// are applied after the file, before validation.
inline RunConfig parse_config(std::istream& is, const std::vector<std::string>& overrides = {}) {
  RunConfig cfg;
  std::string raw;
  int line = 0, variant_line = 0;
  std::map<std::string, int> seen;
  while (std::getline(is, raw)) {
    ++line;
    const auto hash = raw.find('#');
    const std::string s = config_detail::trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (s.empty()) continue;
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key=value", line);
    const std::string key = config_detail::trim(s.substr(0, eq)), value = config_detail::trim(s.substr(eq + 1));
    if (key.empty()) throw ConfigError("empty key", line);
    if (const auto it = seen.find(key); it != seen.end())
      throw ConfigError("duplicate key '" + key + "' (first set on line " + std::to_string(it->second) + ")", line);
    seen[key] = line;
    apply_setting(cfg, key, value, line);
    if (key == "penalty.variant") variant_line = line;
  }
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + o + "' is not key=value");
    apply_setting(cfg, config_detail::trim(o.substr(0, eq)), config_detail::trim(o.substr(eq + 1)));
  }
  validate_config(cfg, variant_line);
  return cfg;
}

inline RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file '" + path + "'");
  return parse_config(f, overrides);
}

/// Canonical form: every set key in sorted order, one "key=value" per line.
inline std::string dump_config(const RunConfig& c) {
  std::string out;
  for (const auto& f : config_fields())
    if (const auto v = f.get(c)) out += f.key + "=" + *v + "\n";
  return out;
}

inline std::uint64_t config_hash(const RunConfig& c) { return fnv1a64(dump_config(c)); }

inline std::string config_help() {
  RunConfig defaults;
  std::string out = "Configuration keys (key=value, '#' comments):\n";
  for (const auto& f : config_fields()) {
    const auto v = f.get(defaults);
    out += "  " + f.key + " (" + f.type + ", default " + (v ? *v : "unset") + "): " + f.doc + "\n";
  }
  return out;
}

}  // namespace elab
