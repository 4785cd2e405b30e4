#pragma once

// Corpus BLEU, decoding-efficiency measurement and length-prediction accuracy.

#include "refine/tasks.hpp"
#include "refine/tensor.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace refine {

namespace detail {

template <typename Seq>
void count_ngrams(const Seq& s, std::size_t n, std::map<std::vector<typename Seq::value_type>, int>& out) {
  out.clear();
  if (s.size() < n) return;
  for (std::size_t i = 0; i + n <= s.size(); ++i)
    ++out[std::vector<typename Seq::value_type>(s.begin() + static_cast<std::ptrdiff_t>(i),
                                                s.begin() + static_cast<std::ptrdiff_t>(i + n))];
}

}  // namespace detail

// Corpus BLEU-4 on a 0..100 scale. Clipped n-gram precisions, add-one
// smoothing for n >= 2, brevity penalty exp(min(0, 1 - ref_len / hyp_len)).
// Works on any sequence of comparable tokens (ids or strings).
template <typename Seq>
double corpus_bleu(std::span<const Seq> hypotheses, std::span<const Seq> references) {
  if (hypotheses.size() != references.size())
    throw std::invalid_argument("corpus_bleu: " + std::to_string(hypotheses.size()) + " hypotheses vs " +
                                std::to_string(references.size()) + " references");
  constexpr std::size_t kOrder = 4;
  std::array<double, kOrder> matches{};
  std::array<double, kOrder> totals{};
  double hyp_len = 0.0, ref_len = 0.0;
  std::map<std::vector<typename Seq::value_type>, int> hc, rc;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    const Seq& h = hypotheses[i];
    const Seq& r = references[i];
    hyp_len += static_cast<double>(h.size());
    ref_len += static_cast<double>(r.size());
    for (std::size_t n = 1; n <= kOrder; ++n) {
      detail::count_ngrams(h, n, hc);
      detail::count_ngrams(r, n, rc);
      for (const auto& [gram, c] : hc) {
        auto it = rc.find(gram);
        if (it != rc.end()) matches[n - 1] += std::min(c, it->second);
      }
      if (h.size() >= n) totals[n - 1] += static_cast<double>(h.size() - n + 1);
    }
  }
  if (hyp_len == 0.0 || matches[0] == 0.0) return 0.0;
  double log_p = 0.0;
  for (std::size_t n = 0; n < kOrder; ++n) {
    const double p = n == 0 ? matches[0] / totals[0] : (matches[n] + 1.0) / (totals[n] + 1.0);
    log_p += std::log(p) / static_cast<double>(kOrder);
  }
  const double bp = std::min(0.0, 1.0 - ref_len / hyp_len);
  return 100.0 * std::exp(log_p + bp);
}

struct EvalReport {
  double bleu = 0.0;
  double tokens_per_second = 0.0;
  std::int64_t sentences = 0;
  double mean_iterations = 0.0;
  double length_exact_pct = 0.0;
  double length_within5_pct = 0.0;

  std::string to_key_values() const;
};

struct LatencySample {
  Index length = 0;  // source length
  double seconds = 0.0;
  int iterations = 0;
};

struct EfficiencyReport {
  double tokens_per_second = 0.0;
  std::vector<LatencySample> samples;

  std::string to_csv() const;
};

struct TimedDecode {
  TokenSequence output;
  int iterations = 0;
};

// Times each sentence individually on the calling thread.
EfficiencyReport measure_efficiency(const std::function<TimedDecode(const TokenSequence&)>& decode_fn,
                                    const Dataset& ds);

// Ordinary least squares slope of y on x.
double least_squares_slope(std::span<const double> x, std::span<const double> y);

struct LengthAccuracy {
  double exact_pct = 0.0;
  double within5_pct = 0.0;
};

LengthAccuracy length_accuracy(std::span<const Index> predicted, std::span<const Index> truth);

// Rounded (half up) mean target length per source length, with fallback to
// the nearest seen source length.
class NonparametricLengthBaseline {
 public:
  explicit NonparametricLengthBaseline(const Dataset& train);
  Index predict(Index source_length) const;
  const std::map<Index, Index>& table() const { return table_; }

 private:
  std::map<Index, Index> table_;
};

}  // namespace refine
