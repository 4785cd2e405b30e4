#pragma once

// Training computation for the refinement model and the autoregressive
// teacher: the refinement chain under deterministic or stochastic
// approximation, the stochastic mix of latent-chain and denoising terms,
// the target-length loss, learning-rate schedules, sequence-level
// distillation, and the epoch loop.

#include "refine/checkpoint.hpp"
#include "refine/corruption.hpp"
#include "refine/model.hpp"
#include "refine/tasks.hpp"

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace refine {

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Approximation { Deterministic, Stochastic };

std::string to_string(Approximation a);
Approximation approximation_from_string(const std::string& s);

struct LrSchedule {
  enum class Kind { Warmup, Linear };
  Kind kind = Kind::Linear;
  // warmup: d_model^-0.5 * min(step^-0.5, step * warmup_steps^-1.5)
  Index d_model = 64;
  Index warmup_steps = 4000;
  // linear: start + (end - start) * step / total_steps, held at end afterwards
  Scalar start = 3e-4;
  Scalar end = 1e-5;
  Index total_steps = 10000;
};

// Throws std::invalid_argument for step < 1 under the warmup schedule.
Scalar lr_at(Index step, const LrSchedule& schedule);

struct TrainConfig {
  int i_train = 4;  // decoder applications per example: decoder 1 plus i_train - 1 refinement steps
  Scalar p_dae = 0.5;
  Approximation approximation = Approximation::Deterministic;
  Scalar beta = 0.5;
  bool distill = false;
  LrSchedule schedule;
  Index batch_tokens = 512;
  int epochs = 20;
  std::uint64_t seed = 1;
  bool train_length_head = true;
  std::size_t dev_limit = 200;  // dev sentences decoded for the per-epoch log; 0 disables

  void validate() const;
};

// Independent generator per concern, derived from the master seed.
enum class SeedStream : std::uint64_t { Init = 1, Data = 2, Dropout = 3, Alpha = 4, Corruption = 5, Sampling = 6 };
std::uint64_t derive_seed(std::uint64_t master, SeedStream stream, std::uint64_t index = 0);

// True selects the latent-chain input at step l; false the corrupted target.
// Step 0 always takes the chain input; for l >= 1 the corrupted target is
// chosen with probability p_dae.
bool sample_alpha(int l, Scalar p_dae, std::mt19937_64& rng);

struct ChainTerm {
  int step = 0;
  std::vector<TokenSequence> input_tokens;
  Tensor input_activations;    // undefined for step 0
  std::vector<bool> used_dae;  // per example
  Tensor logits;               // (batch * T) x vocab_tgt
  Tensor activations;          // (batch * T) x d_model
};

struct ChainRandomness {
  std::mt19937_64* alpha = nullptr;
  std::mt19937_64* corruption = nullptr;
  std::mt19937_64* sampling = nullptr;
};

// Builds cfg.i_train terms for a batch whose targets share one length.
// Discrete inputs (argmax/sample of the previous term, or a corruption of the
// target) carry no gradient; continuous activations do.
std::vector<ChainTerm> build_chain(const Model& model, const EncoderOutput& enc,
                                   std::span<const TokenSequence> sources, std::span<const TokenSequence> targets,
                                   const TrainConfig& cfg, const ChainRandomness& rand,
                                   const ForwardContext& ctx = {});

// Sum over terms of the mean per-position cross-entropy against `targets`.
Tensor hybrid_loss(std::span<const ChainTerm> chain, std::span<const TokenSequence> targets,
                   std::span<const Scalar> mask = {});

struct LengthLossStats {
  std::int64_t clamped = 0;
};

// Cross-entropy of the length head against class (T - T') + max_len_offset,
// clamped into range.
Tensor length_loss(const Model& model, const EncoderOutput& enc, std::span<const Index> target_lengths,
                   LengthLossStats* stats = nullptr);

// Teacher-forced loss of the autoregressive model: inputs BOS + y, targets y + EOS.
Tensor teacher_forcing_loss(const Model& model, const EncoderOutput& enc, std::span<const TokenSequence> targets,
                            const ForwardContext& ctx = {});

struct DistillStats {
  std::int64_t kept_reference = 0;
};

Dataset distill_dataset(const Model& teacher, const Dataset& data, int beam_width = 4, DistillStats* stats = nullptr);

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double length_loss = 0.0;
  double dev_bleu_first = 0.0;   // i_dec = 1 (AR: greedy)
  double dev_bleu_itrain = 0.0;  // i_dec = i_train (AR: greedy)
  double wall_seconds = 0.0;
};

std::string format_epoch_log(const EpochLog& e);

struct TrainHooks {
  // Called after each epoch with the model and the optimizer state.
  std::function<void(const EpochLog&, const Model&, const TrainingState&)> on_epoch;
};

// Trains `model` in place (refinement or autoregressive, by its config).
// `state` carries the optimizer across a resume; pass an empty state to start.
std::vector<EpochLog> train_loop(Model& model, const Dataset& train, const Dataset* dev, const TrainConfig& cfg,
                                 TrainingState& state, const TrainHooks& hooks = {});

// Batches of indices whose targets share a length, at most `batch_tokens`
// target tokens each, in shuffled order.
std::vector<std::vector<std::size_t>> make_batches(const Dataset& data, Index batch_tokens, std::mt19937_64& rng);

}  // namespace refine
