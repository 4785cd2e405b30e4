#include "refine/corruption.hpp"

#include <stdexcept>
#include <string>
#include <utility>

namespace refine {

void CorruptionConfig::validate() const {
  if (!(beta >= 0.0 && beta <= 1.0))
    throw std::invalid_argument("corruption: beta " + std::to_string(beta) + " outside [0, 1]");
}

TokenSequence corrupt(std::span<const Token> target, Scalar beta, TokenRange replacement, std::mt19937_64& rng,
                      CorruptionStats* stats) {
  if (target.empty()) throw std::invalid_argument("corrupt: empty sequence");
  if (!(beta >= 0.0 && beta <= 1.0)) throw std::invalid_argument("corrupt: beta outside [0, 1]");
  if (replacement.last <= replacement.first) throw std::invalid_argument("corrupt: empty replacement range");

  TokenSequence y(target.begin(), target.end());
  std::bernoulli_distribution fire(beta);
  std::uniform_int_distribution<Token> token(replacement.first, replacement.last - 1);
  const std::size_t n = y.size();
  for (std::size_t t = 0; t < n; ++t) {
    if (stats) ++stats->positions;
    if (!fire(rng)) continue;
    if (stats) ++stats->fired;
    const int option = (t + 1 < n) ? std::uniform_int_distribution<int>(0, 2)(rng) : 1;
    switch (option) {
      case 0:
        y[t + 1] = y[t];
        if (stats) ++stats->duplicated;
        break;
      case 1:
        y[t] = token(rng);
        if (stats) ++stats->replaced;
        break;
      default:
        std::swap(y[t], y[t + 1]);
        if (stats) ++stats->swapped;
        break;
    }
  }
  return y;
}

TokenSequence corrupt(std::span<const Token> target, const CorruptionConfig& cfg, TokenRange replacement) {
  cfg.validate();
  std::mt19937_64 rng(cfg.rng_seed);
  return corrupt(target, cfg.beta, replacement, rng);
}

}  // namespace refine
