// Copyright (c) 2026 The mgp-str Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace mgp {

// Error taxonomy. The CLI maps ContractError (and subclasses) to exit code 1
// and IoError/FormatError to exit code 2.
class ContractError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public ContractError {
 public:
  using ContractError::ContractError;
};

// Degenerate or out-of-contract values (empty lists, unknown symbols, ...).
class ValueError : public ContractError {
 public:
  using ContractError::ContractError;
};

// NaN/Inf surfaced by a numeric kernel; never a silent state.
class NumericError : public ContractError {
 public:
  using ContractError::ContractError;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Deterministic RNG. All randomness in the project flows through this class,
// seeded explicitly; `split` derives independent per-purpose streams so that
// e.g. disabling one model branch does not shift the init of another.
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed), gen_(mix(seed)) {}

  uint32_t next_u32() { return static_cast<uint32_t>(gen_() >> 32); }

  // Inclusive bounds.
  int uniform_int(int lo, int hi) {
    return lo + static_cast<int>(next_u32() % static_cast<uint32_t>(hi - lo + 1));
  }

  float uniform(float lo, float hi) {
    // 24 mantissa bits, uniform in [0,1).
    float u = static_cast<float>(next_u32() >> 8) * (1.0f / 16777216.0f);
    return lo + (hi - lo) * u;
  }

  float normal(float mean, float stddev) {
    if (have_spare_) {
      have_spare_ = false;
      return mean + stddev * spare_;
    }
    float u1 = 0.0f;
    while (u1 == 0.0f) u1 = uniform(0.0f, 1.0f);
    float u2 = uniform(0.0f, 1.0f);
    float r = std::sqrt(-2.0f * std::log(u1));
    float a = 6.2831853071795864f * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return mean + stddev * (r * std::cos(a));
  }

  // Normal clipped by resampling to two standard deviations.
  float trunc_normal(float stddev) {
    for (;;) {
      float v = normal(0.0f, stddev);
      if (std::abs(v) <= 2.0f * stddev) return v;
    }
  }

  bool bernoulli(float p) { return uniform(0.0f, 1.0f) < p; }

  // Independent child stream; deterministic in (parent seed, tag).
  Rng split(uint64_t tag) const { return Rng(seed_ ^ mix(tag ^ 0x9e3779b97f4a7c15ull)); }

 private:
  static uint64_t mix(uint64_t x) {
    // splitmix64 finalizer
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
  }

  uint64_t seed_ = 0;
  std::mt19937_64 gen_;
  bool have_spare_ = false;
  float spare_ = 0.0f;
};

}  // namespace mgp
