#include "refine/metrics.hpp"

#include <chrono>
#include <iomanip>
#include <sstream>

namespace refine {

std::string EvalReport::to_key_values() const {
  std::ostringstream os;
  os << std::setprecision(10) << "bleu=" << bleu << "\n"
     << "tokens_per_second=" << tokens_per_second << "\n"
     << "sentences=" << sentences << "\n"
     << "mean_iterations=" << mean_iterations << "\n"
     << "length_exact_pct=" << length_exact_pct << "\n"
     << "length_within5_pct=" << length_within5_pct << "\n";
  return os.str();
}

std::string EfficiencyReport::to_csv() const {
  std::ostringstream os;
  os << "length,seconds,iterations\n" << std::setprecision(9);
  for (const auto& s : samples) os << s.length << "," << s.seconds << "," << s.iterations << "\n";
  return os.str();
}

EfficiencyReport measure_efficiency(const std::function<TimedDecode(const TokenSequence&)>& decode_fn,
                                    const Dataset& ds) {
  using clock = std::chrono::steady_clock;
  EfficiencyReport report;
  double total_seconds = 0.0;
  double total_tokens = 0.0;
  for (const auto& pair : ds.pairs) {
    const auto start = clock::now();
    TimedDecode r = decode_fn(pair.source);
    const double secs = std::chrono::duration<double>(clock::now() - start).count();
    report.samples.push_back({static_cast<Index>(pair.source.size()), secs, r.iterations});
    total_seconds += secs;
    total_tokens += static_cast<double>(pair.source.size());
  }
  report.tokens_per_second = total_seconds > 0.0 ? total_tokens / total_seconds : 0.0;
  return report;
}

double least_squares_slope(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("least_squares_slope: need >= 2 paired points");
  const auto n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  if (sxx == 0.0) throw std::invalid_argument("least_squares_slope: x has zero variance");
  return sxy / sxx;
}

LengthAccuracy length_accuracy(std::span<const Index> predicted, std::span<const Index> truth) {
  if (predicted.size() != truth.size()) throw std::invalid_argument("length_accuracy: size mismatch");
  if (predicted.empty()) return {};
  double exact = 0, within = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const Index diff = std::abs(predicted[i] - truth[i]);
    exact += diff == 0;
    within += diff <= 5;
  }
  const auto n = static_cast<double>(predicted.size());
  return {100.0 * exact / n, 100.0 * within / n};
}

NonparametricLengthBaseline::NonparametricLengthBaseline(const Dataset& train) {
  if (train.pairs.empty()) throw std::invalid_argument("length baseline: empty training set");
  std::map<Index, std::pair<double, double>> acc;  // source length -> (sum, count)
  for (const auto& p : train.pairs) {
    auto& [s, c] = acc[static_cast<Index>(p.source.size())];
    s += static_cast<double>(p.target.size());
    c += 1.0;
  }
  for (const auto& [len, sc] : acc) table_[len] = static_cast<Index>(std::floor(sc.first / sc.second + 0.5));
}

Index NonparametricLengthBaseline::predict(Index source_length) const {
  auto hi = table_.lower_bound(source_length);
  if (hi != table_.end() && hi->first == source_length) return hi->second;
  if (hi == table_.end()) return std::prev(hi)->second;
  if (hi == table_.begin()) return hi->second;
  auto lo = std::prev(hi);
  // Ties go to the shorter bucket.
  return (source_length - lo->first <= hi->first - source_length) ? lo->second : hi->second;
}

}  // namespace refine
