#pragma once

// Sequential token corruption C(Y | Y*) used by the denoising objective.

#include "refine/tensor.hpp"

#include <cstdint>
#include <random>
#include <span>

namespace refine {

struct CorruptionConfig {
  Scalar beta = 0.5;
  std::uint64_t rng_seed = 0;

  void validate() const;
};

// Tokens drawn by the replacement option: [first, last).
struct TokenRange {
  Token first = 0;
  Token last = 0;
};

struct CorruptionStats {
  std::int64_t positions = 0;
  std::int64_t fired = 0;
  std::int64_t duplicated = 0;
  std::int64_t replaced = 0;
  std::int64_t swapped = 0;
};

// Walks t = 0..T-1 over a working copy. With probability beta, position t
// is corrupted by one option chosen uniformly among those valid at t:
// duplicate y_t into t+1, replace y_t by a uniform token from `replacement`,
// or swap y_t and y_{t+1}. Only replacement is valid at the last position.
TokenSequence corrupt(std::span<const Token> target, Scalar beta, TokenRange replacement, std::mt19937_64& rng,
                      CorruptionStats* stats = nullptr);

// Convenience overload seeding a fresh generator from cfg.rng_seed.
TokenSequence corrupt(std::span<const Token> target, const CorruptionConfig& cfg, TokenRange replacement);

}  // namespace refine
