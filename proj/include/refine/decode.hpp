#pragma once

// Inference: target-length prediction, fixed-step and adaptive iterative
// refinement, repetition collapsing, and the autoregressive greedy/beam
// baselines. Every argmax breaks ties toward the lowest token id.

#include "refine/model.hpp"
#include "refine/tensor.hpp"

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace refine {

enum class DecodeMode { NarFixed, NarAdaptive, ArGreedy, ArBeam };
enum class StopCriterion { Jaccard, LogProbDelta };

std::string to_string(DecodeMode m);

struct DecodeConfig {
  DecodeMode mode = DecodeMode::NarAdaptive;
  int i_dec = 1;  // total NAR iterations in fixed mode (decoder 1 counts)
  Scalar epsilon = 0.0;
  int max_iters = 10;
  StopCriterion criterion = StopCriterion::Jaccard;
  int beam = 4;
  bool use_reference_length = false;
  bool collapse_repetitions = true;

  void validate() const;
  bool is_autoregressive() const { return mode == DecodeMode::ArGreedy || mode == DecodeMode::ArBeam; }
};

struct RefinementTrace {
  std::vector<TokenSequence> iterations;  // Y^0, Y^1, ...
  std::vector<Scalar> logprobs;           // sum_t log p(y^l_t | ...) under each step's own conditional
  int iterations_used = 0;
  double wall_seconds = 0.0;
  Index predicted_length = 0;
  TokenSequence output;  // final iteration, collapsed when requested
};

// Lowest index among the maxima of each row.
TokenSequence argmax_rows(const Matrix& logits);

Index predict_length(const Model& model, const TokenSequence& source);

RefinementTrace nar_decode(const Model& model, const TokenSequence& source, const DecodeConfig& cfg,
                           std::optional<Index> reference_length = std::nullopt);

// Multiset Jaccard distance: 1 - sum(min counts) / sum(max counts).
Scalar jaccard_distance(std::span<const Token> a, std::span<const Token> b);

// |logprob[last] - logprob[last - 1]| <= epsilon; false with fewer than two entries.
bool logprob_delta_criterion(const RefinementTrace& trace, Scalar epsilon);

TokenSequence collapse_repetitions(std::span<const Token> seq);

struct ArDecodeResult {
  TokenSequence output;  // without BOS/EOS
  int steps = 0;         // decoder invocations
  double wall_seconds = 0.0;
};

ArDecodeResult ar_greedy(const Model& model, const TokenSequence& source);
// Length-normalized beam search; stops once `beam` hypotheses have finished.
ArDecodeResult ar_beam(const Model& model, const TokenSequence& source, int beam);

// Dispatches on cfg.mode; AR results are wrapped as a one-iteration trace.
RefinementTrace decode(const Model& model, const TokenSequence& source, const DecodeConfig& cfg,
                       std::optional<Index> reference_length = std::nullopt);

}  // namespace refine
