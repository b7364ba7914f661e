// Copyright (c) 2026, the elab authors
// SPDX-License-Identifier: Apache-2.0
//
// Counter-based splittable random numbers. A generator is identified by a key
// derived from (global seed, component name, stream id); draw i is a pure
// function of (key, i), so components never perturb each other's streams.

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string_view>
#include <utility>

namespace elab {

constexpr std::uint64_t splitmix64(std::uint64_t z) noexcept {
  z += 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view s) noexcept {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ull;
  }
  return h;
}

class Rng {
 public:
  Rng(std::uint64_t seed, std::string_view component, std::uint64_t stream = 0) noexcept
      : key_(derive_key(seed, component, stream)) {}

  static constexpr std::uint64_t derive_key(std::uint64_t seed, std::string_view component,
                                            std::uint64_t stream) noexcept {
    return splitmix64(splitmix64(seed) ^ fnv1a64(component)) ^ splitmix64(~stream);
  }

  /// Child generator; depends only on this generator's key, never on its position.
  Rng split(std::string_view component, std::uint64_t stream = 0) const noexcept {
    return Rng(key_, component, stream);
  }

  std::uint64_t key() const noexcept { return key_; }
  std::uint64_t counter() const noexcept { return counter_; }

  std::uint64_t next_u64() noexcept {
    return splitmix64(key_ + 0xD1B54A32D192ED03ull * (++counter_));
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n) by rejection; n must be positive.
  std::uint64_t uniform_int(std::uint64_t n) noexcept {
    const std::uint64_t limit = (~std::uint64_t{0}) - (~std::uint64_t{0}) % n;
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
  }

  /// Standard normal via Box-Muller; consumes two draws.
  double normal() noexcept {
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 < 0x1.0p-60) u1 = 0x1.0p-60;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  template <class T>
  void shuffle(std::span<T> items) noexcept {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform_int(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace elab
