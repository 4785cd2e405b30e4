#include "refine/decode.hpp"

#include "refine/tasks.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <stdexcept>

namespace refine {

namespace {
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

Scalar sequence_logprob(const Matrix& logits, std::span<const Token> tokens) {
  Scalar total = 0.0;
  for (Index t = 0; t < logits.rows(); ++t) {
    const auto row = logits.row(t);
    const Scalar m = row.maxCoeff();
    const Scalar lse = m + std::log((row.array() - m).exp().sum());
    total += row(tokens[static_cast<std::size_t>(t)]) - lse;
  }
  return total;
}
}  // namespace

std::string to_string(DecodeMode m) {
  switch (m) {
    case DecodeMode::NarFixed: return "nar_fixed";
    case DecodeMode::NarAdaptive: return "nar_adaptive";
    case DecodeMode::ArGreedy: return "ar_greedy";
    case DecodeMode::ArBeam: return "ar_beam";
  }
  return "?";
}

void DecodeConfig::validate() const {
  if (i_dec < 1) throw std::invalid_argument("decode: i_dec must be >= 1");
  if (max_iters < 1) throw std::invalid_argument("decode: max_iters must be >= 1");
  if (!(epsilon >= 0.0)) throw std::invalid_argument("decode: epsilon must be >= 0");
  if (beam < 1) throw std::invalid_argument("decode: beam must be >= 1");
}

TokenSequence argmax_rows(const Matrix& logits) {
  TokenSequence out(static_cast<std::size_t>(logits.rows()));
  for (Index r = 0; r < logits.rows(); ++r) {
    Index best = 0;
    for (Index c = 1; c < logits.cols(); ++c)
      if (logits(r, c) > logits(r, best)) best = c;
    out[static_cast<std::size_t>(r)] = static_cast<Token>(best);
  }
  return out;
}

Index predict_length(const Model& model, const TokenSequence& source) {
  NoRecordScope no_record;
  const std::vector<TokenSequence> batch{source};
  const EncoderOutput enc = model.encode(batch);
  const Matrix logits = model.length_logits(enc).value();
  const Index k = argmax_rows(logits)[0];
  const Index t = static_cast<Index>(source.size()) + k - model.config().max_len_offset;
  return std::clamp<Index>(t, 1, model.config().max_len);
}

RefinementTrace nar_decode(const Model& model, const TokenSequence& source, const DecodeConfig& cfg,
                           std::optional<Index> reference_length) {
  cfg.validate();
  if (cfg.mode != DecodeMode::NarFixed && cfg.mode != DecodeMode::NarAdaptive)
    throw std::invalid_argument("nar_decode: mode " + to_string(cfg.mode) + " is autoregressive");
  const auto start = Clock::now();
  NoRecordScope no_record;

  RefinementTrace trace;
  const std::vector<TokenSequence> batch{source};
  const EncoderOutput enc = model.encode(batch);
  if (cfg.use_reference_length) {
    if (!reference_length) throw std::invalid_argument("nar_decode: reference length requested but not given");
    trace.predicted_length = std::clamp<Index>(*reference_length, 1, model.config().max_len);
  } else {
    const Index k = argmax_rows(model.length_logits(enc).value())[0];
    trace.predicted_length = std::clamp<Index>(static_cast<Index>(source.size()) + k - model.config().max_len_offset,
                                               1, model.config().max_len);
  }

  const int budget = cfg.mode == DecodeMode::NarFixed ? cfg.i_dec : cfg.max_iters;
  std::vector<TokenSequence> current{project_source_to_length(source, trace.predicted_length)};
  DecoderStepOutput step = model.decoder1_forward(current, enc);
  for (int l = 0;; ++l) {
    current[0] = argmax_rows(step.logits.value());
    trace.iterations.push_back(current[0]);
    trace.logprobs.push_back(sequence_logprob(step.logits.value(), current[0]));
    if (static_cast<int>(trace.iterations.size()) >= budget) break;
    if (cfg.mode == DecodeMode::NarAdaptive && l >= 1) {
      bool stop = false;
      if (cfg.criterion == StopCriterion::Jaccard) {
        const auto& prev = trace.iterations[trace.iterations.size() - 2];
        stop = prev == current[0] ||
               (cfg.epsilon > 0.0 && jaccard_distance(prev, current[0]) <= cfg.epsilon);
      } else {
        stop = logprob_delta_criterion(trace, cfg.epsilon);
      }
      if (stop) break;
    }
    step = model.decoder2_forward(current, step.activations, enc);
  }
  trace.iterations_used = static_cast<int>(trace.iterations.size());
  trace.output = cfg.collapse_repetitions ? collapse_repetitions(trace.iterations.back()) : trace.iterations.back();
  trace.wall_seconds = seconds_since(start);
  return trace;
}

Scalar jaccard_distance(std::span<const Token> a, std::span<const Token> b) {
  if (a.empty() && b.empty()) return 0.0;
  std::map<Token, std::pair<Index, Index>> counts;
  for (Token t : a) ++counts[t].first;
  for (Token t : b) ++counts[t].second;
  Index inter = 0, uni = 0;
  for (const auto& [tok, c] : counts) {
    inter += std::min(c.first, c.second);
    uni += std::max(c.first, c.second);
  }
  return 1.0 - static_cast<Scalar>(inter) / static_cast<Scalar>(uni);
}

bool logprob_delta_criterion(const RefinementTrace& trace, Scalar epsilon) {
  const auto n = trace.logprobs.size();
  if (n < 2) return false;
  return std::abs(trace.logprobs[n - 1] - trace.logprobs[n - 2]) <= epsilon;
}

TokenSequence collapse_repetitions(std::span<const Token> seq) {
  TokenSequence out;
  for (Token t : seq)
    if (out.empty() || out.back() != t) out.push_back(t);
  return out;
}

ArDecodeResult ar_greedy(const Model& model, const TokenSequence& source) {
  const auto start = Clock::now();
  NoRecordScope no_record;
  const std::vector<TokenSequence> batch{source};
  const EncoderOutput enc = model.encode(batch);
  std::vector<TokenSequence> prefix{{kBos}};
  ArDecodeResult r;
  while (true) {
    const Matrix logits = model.ar_decoder_forward(prefix, enc).value();
    ++r.steps;
    const Token next = argmax_rows(logits.bottomRows(1))[0];
    if (next == kEos) break;
    prefix[0].push_back(next);
    if (static_cast<Index>(prefix[0].size()) - 1 >= model.config().max_len) break;
  }
  r.output.assign(prefix[0].begin() + 1, prefix[0].end());
  r.wall_seconds = seconds_since(start);
  return r;
}

ArDecodeResult ar_beam(const Model& model, const TokenSequence& source, int beam) {
  if (beam < 1) throw std::invalid_argument("ar_beam: beam must be >= 1");
  const auto start = Clock::now();
  NoRecordScope no_record;
  const std::vector<TokenSequence> one{source};
  const EncoderOutput enc1 = model.encode(one);

  struct Hyp {
    TokenSequence tokens;  // starts with BOS
    Scalar logprob = 0.0;
  };
  struct Finished {
    TokenSequence tokens;  // content only
    Scalar score = 0.0;
  };
  std::vector<Hyp> alive{{{kBos}, 0.0}};
  std::vector<Finished> finished;
  ArDecodeResult r;
  const Index max_len = model.config().max_len;

  while (!alive.empty() && static_cast<int>(finished.size()) < beam) {
    // Replicate the encoder output for the alive hypotheses.
    EncoderOutput enc = enc1;
    const auto n = static_cast<Index>(alive.size());
    enc.batch = n;
    enc.states = Tensor(enc1.states.value().replicate(n, 1));
    enc.lengths.assign(static_cast<std::size_t>(n), enc1.lengths[0]);
    std::vector<TokenSequence> prefixes;
    for (const auto& h : alive) prefixes.push_back(h.tokens);
    const Matrix logits = model.ar_decoder_forward(prefixes, enc).value();
    ++r.steps;
    const Index len = static_cast<Index>(alive.front().tokens.size());
    const Index content_len = len;  // tokens after this step, counting EOS, excluding BOS

    struct Cand {
      Scalar logprob;
      Scalar logit;
      std::size_t hyp;
      Token token;
    };
    std::vector<Cand> cands;
    for (std::size_t h = 0; h < alive.size(); ++h) {
      const auto row = logits.row(static_cast<Index>(h) * len + len - 1);
      const Scalar m = row.maxCoeff();
      const Scalar lse = m + std::log((row.array() - m).exp().sum());
      for (Index v = 0; v < row.size(); ++v)
        cands.push_back({alive[h].logprob + row(v) - lse, row(v), h, static_cast<Token>(v)});
    }
    // Same step => same length, so raw log-probs order the candidates.
    std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.logprob != b.logprob) return a.logprob > b.logprob;
      if (a.hyp != b.hyp) return a.hyp < b.hyp;
      if (a.logit != b.logit) return a.logit > b.logit;
      return a.token < b.token;
    });

    std::vector<Hyp> next;
    for (const auto& c : cands) {
      if (next.size() + finished.size() >= static_cast<std::size_t>(beam)) break;
      const auto& base = alive[c.hyp].tokens;
      const bool at_limit = content_len >= max_len;
      if (c.token == kEos || at_limit) {
        TokenSequence content(base.begin() + 1, base.end());
        if (c.token != kEos) content.push_back(c.token);
        finished.push_back({std::move(content), c.logprob / static_cast<Scalar>(content_len)});
      } else {
        Hyp h{base, c.logprob};
        h.tokens.push_back(c.token);
        next.push_back(std::move(h));
      }
    }
    alive = std::move(next);
  }
  if (finished.empty()) {
    r.wall_seconds = seconds_since(start);
    return r;
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < finished.size(); ++i)
    if (finished[i].score > finished[best].score) best = i;
  r.output = finished[best].tokens;
  r.wall_seconds = seconds_since(start);
  return r;
}

RefinementTrace decode(const Model& model, const TokenSequence& source, const DecodeConfig& cfg,
                       std::optional<Index> reference_length) {
  if (!cfg.is_autoregressive()) return nar_decode(model, source, cfg, reference_length);
  cfg.validate();
  const ArDecodeResult r = cfg.mode == DecodeMode::ArGreedy ? ar_greedy(model, source) : ar_beam(model, source, cfg.beam);
  RefinementTrace trace;
  trace.iterations.push_back(r.output);
  trace.iterations_used = r.steps;
  trace.wall_seconds = r.wall_seconds;
  trace.predicted_length = static_cast<Index>(r.output.size());
  trace.output = r.output;
  return trace;
}

}  // namespace refine
