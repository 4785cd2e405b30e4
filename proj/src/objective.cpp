#include "refine/objective.hpp"

#include "refine/adam.hpp"
#include "refine/decode.hpp"
#include "refine/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <map>
#include <sstream>

namespace refine {

std::string to_string(Approximation a) { return a == Approximation::Deterministic ? "deterministic" : "stochastic"; }

Approximation approximation_from_string(const std::string& s) {
  if (s == "deterministic" || s == "det") return Approximation::Deterministic;
  if (s == "stochastic" || s == "stoch") return Approximation::Stochastic;
  throw std::invalid_argument("unknown approximation '" + s + "'");
}

Scalar lr_at(Index step, const LrSchedule& s) {
  if (s.kind == LrSchedule::Kind::Warmup) {
    if (step < 1) throw std::invalid_argument("lr_at: warmup schedule is undefined at step " + std::to_string(step));
    const auto st = static_cast<Scalar>(step);
    const auto w = static_cast<Scalar>(s.warmup_steps);
    return std::pow(static_cast<Scalar>(s.d_model), -0.5) * std::min(std::pow(st, -0.5), st * std::pow(w, -1.5));
  }
  if (step < 0) throw std::invalid_argument("lr_at: negative step");
  if (s.total_steps <= 0 || step >= s.total_steps) return s.end;
  return s.start + (s.end - s.start) * static_cast<Scalar>(step) / static_cast<Scalar>(s.total_steps);
}

void TrainConfig::validate() const {
  if (i_train < 1) throw std::invalid_argument("train config: i_train must be >= 1");
  if (!(p_dae >= 0.0 && p_dae <= 1.0)) throw std::invalid_argument("train config: p_dae must lie in [0, 1]");
  if (!(beta >= 0.0 && beta <= 1.0)) throw std::invalid_argument("train config: beta must lie in [0, 1]");
  if (batch_tokens < 1) throw std::invalid_argument("train config: batch_tokens must be positive");
  if (epochs < 0) throw std::invalid_argument("train config: epochs must be non-negative");
  if (schedule.kind == LrSchedule::Kind::Warmup && schedule.warmup_steps < 1)
    throw std::invalid_argument("train config: warmup_steps must be positive");
}

std::uint64_t derive_seed(std::uint64_t master, SeedStream stream, std::uint64_t index) {
  std::uint64_t z = master + 0x9e3779b97f4a7c15ULL * (static_cast<std::uint64_t>(stream) + 1) +
                    0xbf58476d1ce4e5b9ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

bool sample_alpha(int l, Scalar p_dae, std::mt19937_64& rng) {
  if (l == 0) return true;
  return !std::bernoulli_distribution(p_dae)(rng);
}

namespace {

TokenSequence sample_rows(const Matrix& logits, std::mt19937_64& rng) {
  TokenSequence out(static_cast<std::size_t>(logits.rows()));
  std::uniform_real_distribution<Scalar> u(0.0, 1.0);
  for (Index r = 0; r < logits.rows(); ++r) {
    const auto row = logits.row(r);
    const RowVector p = (row.array() - row.maxCoeff()).exp().matrix();
    const Scalar draw = u(rng) * p.sum();
    Scalar acc = 0.0;
    Index pick = p.size() - 1;
    for (Index c = 0; c < p.size(); ++c) {
      acc += p(c);
      if (draw < acc) {
        pick = c;
        break;
      }
    }
    out[static_cast<std::size_t>(r)] = static_cast<Token>(pick);
  }
  return out;
}

TokenSequence flatten(std::span<const TokenSequence> seqs) {
  TokenSequence flat;
  for (const auto& s : seqs) flat.insert(flat.end(), s.begin(), s.end());
  return flat;
}

}  // namespace

std::vector<ChainTerm> build_chain(const Model& model, const EncoderOutput& enc,
                                   std::span<const TokenSequence> sources, std::span<const TokenSequence> targets,
                                   const TrainConfig& cfg, const ChainRandomness& rand, const ForwardContext& ctx) {
  if (sources.size() != targets.size() || targets.empty())
    throw std::invalid_argument("build_chain: sources and targets must be non-empty and paired");
  const auto T = static_cast<Index>(targets.front().size());
  if (T > model.config().max_len)
    throw std::length_error("build_chain: target length " + std::to_string(T) + " exceeds max_len " +
                            std::to_string(model.config().max_len));
  const auto B = static_cast<Index>(targets.size());
  const Index d = model.config().d_model;
  const TokenRange content{kFirstContent, static_cast<Token>(model.config().vocab_tgt)};

  std::vector<ChainTerm> chain;
  ChainTerm first;
  first.step = 0;
  for (const auto& s : sources) first.input_tokens.push_back(project_source_to_length(s, T));
  first.used_dae.assign(targets.size(), false);
  DecoderStepOutput out = model.decoder1_forward(first.input_tokens, enc, ctx);
  first.logits = out.logits;
  first.activations = out.activations;
  chain.push_back(std::move(first));

  for (int l = 1; l < cfg.i_train; ++l) {
    const ChainTerm& prev = chain.back();
    const TokenSequence pred = cfg.approximation == Approximation::Deterministic
                                   ? argmax_rows(prev.logits.value())
                                   : sample_rows(prev.logits.value(), *rand.sampling);
    ChainTerm term;
    term.step = l;
    term.used_dae.assign(targets.size(), false);
    Matrix keep = Matrix::Ones(B * T, d);
    bool any_dae = false;
    for (Index b = 0; b < B; ++b) {
      const auto bi = static_cast<std::size_t>(b);
      if (sample_alpha(l, cfg.p_dae, *rand.alpha)) {
        term.input_tokens.emplace_back(pred.begin() + b * T, pred.begin() + (b + 1) * T);
      } else {
        term.input_tokens.push_back(corrupt(targets[bi], cfg.beta, content, *rand.corruption));
        term.used_dae[bi] = true;
        keep.middleRows(b * T, T).setZero();
        any_dae = true;
      }
    }
    term.input_activations = any_dae ? mul(prev.activations, Tensor(std::move(keep))) : prev.activations;
    out = model.decoder2_forward(term.input_tokens, term.input_activations, enc, ctx);
    term.logits = out.logits;
    term.activations = out.activations;
    chain.push_back(std::move(term));
  }
  return chain;
}

Tensor hybrid_loss(std::span<const ChainTerm> chain, std::span<const TokenSequence> targets,
                   std::span<const Scalar> mask) {
  if (chain.empty()) throw std::invalid_argument("hybrid_loss: empty chain");
  const TokenSequence flat = flatten(targets);
  Tensor total = cross_entropy(chain[0].logits, flat, mask);
  for (std::size_t i = 1; i < chain.size(); ++i) total = add(total, cross_entropy(chain[i].logits, flat, mask));
  return total;
}

Tensor length_loss(const Model& model, const EncoderOutput& enc, std::span<const Index> target_lengths,
                   LengthLossStats* stats) {
  if (static_cast<Index>(target_lengths.size()) != enc.batch)
    throw std::invalid_argument("length_loss: one target length per example required");
  const Index offset = model.config().max_len_offset;
  TokenSequence classes;
  for (Index b = 0; b < enc.batch; ++b) {
    Index k = target_lengths[static_cast<std::size_t>(b)] - enc.lengths[static_cast<std::size_t>(b)] + offset;
    if (k < 0 || k > 2 * offset) {
      if (stats) ++stats->clamped;
      k = std::clamp<Index>(k, 0, 2 * offset);
    }
    classes.push_back(static_cast<Token>(k));
  }
  return cross_entropy(model.length_logits(enc), classes);
}

Tensor teacher_forcing_loss(const Model& model, const EncoderOutput& enc, std::span<const TokenSequence> targets,
                            const ForwardContext& ctx) {
  std::vector<TokenSequence> inputs;
  TokenSequence gold;
  for (const auto& y : targets) {
    TokenSequence in{kBos};
    in.insert(in.end(), y.begin(), y.end());
    inputs.push_back(std::move(in));
    gold.insert(gold.end(), y.begin(), y.end());
    gold.push_back(kEos);
  }
  return cross_entropy(model.ar_decoder_forward(inputs, enc, ctx), gold);
}

Dataset distill_dataset(const Model& teacher, const Dataset& data, int beam_width, DistillStats* stats) {
  Dataset out;
  out.name = data.name + ".distilled";
  out.source_vocab = data.source_vocab;
  out.target_vocab = data.target_vocab;
  out.pairs.reserve(data.pairs.size());
  for (const auto& p : data.pairs) {
    ArDecodeResult r = ar_beam(teacher, p.source, beam_width);
    if (r.output.empty()) {
      if (stats) ++stats->kept_reference;
      out.pairs.push_back(p);
    } else {
      out.pairs.push_back({p.source, std::move(r.output)});
    }
  }
  return out;
}

std::string format_epoch_log(const EpochLog& e) {
  std::ostringstream os;
  os << e.epoch << "\t" << std::setprecision(8) << e.train_loss << "\t" << e.length_loss << "\t" << e.dev_bleu_first
     << "\t" << e.dev_bleu_itrain << "\t" << std::setprecision(4) << e.wall_seconds;
  return os.str();
}

std::vector<std::vector<std::size_t>> make_batches(const Dataset& data, Index batch_tokens, std::mt19937_64& rng) {
  std::map<std::size_t, std::vector<std::size_t>> by_length;
  for (std::size_t i = 0; i < data.pairs.size(); ++i) by_length[data.pairs[i].target.size()].push_back(i);
  std::vector<std::vector<std::size_t>> batches;
  for (auto& [len, idx] : by_length) {
    std::shuffle(idx.begin(), idx.end(), rng);
    const std::size_t per = std::max<std::size_t>(1, static_cast<std::size_t>(batch_tokens) / std::max<std::size_t>(1, len));
    for (std::size_t i = 0; i < idx.size(); i += per)
      batches.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(i),
                           idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), i + per)));
  }
  std::shuffle(batches.begin(), batches.end(), rng);
  return batches;
}

namespace {

double dev_bleu(const Model& model, const Dataset& dev, std::size_t limit, const DecodeConfig& cfg) {
  std::vector<TokenSequence> hyps, refs;
  for (std::size_t i = 0; i < dev.pairs.size() && i < limit; ++i) {
    hyps.push_back(decode(model, dev.pairs[i].source, cfg).output);
    refs.push_back(dev.pairs[i].target);
  }
  return corpus_bleu<TokenSequence>(hyps, refs);
}

}  // namespace

std::vector<EpochLog> train_loop(Model& model, const Dataset& train, const Dataset* dev, const TrainConfig& cfg,
                                 TrainingState& state, const TrainHooks& hooks) {
  cfg.validate();
  if (train.pairs.empty()) throw std::invalid_argument("train_loop: empty training set");
  FlushSubnormalsScope flush;
  const bool refinement = model.config().arch == Architecture::Refinement;
  auto& params = model.parameters().tensors();
  if (state.adam.m.empty()) state.adam = make_adam_state(params);
  if (state.adam.m.size() != params.size())
    throw std::invalid_argument("train_loop: optimizer state does not match the model");

  std::vector<EpochLog> log;
  for (int epoch = static_cast<int>(state.epoch) + 1; epoch <= cfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    const auto e = static_cast<std::uint64_t>(epoch);
    std::mt19937_64 data_rng(derive_seed(cfg.seed, SeedStream::Data, e));
    std::mt19937_64 dropout_rng(derive_seed(cfg.seed, SeedStream::Dropout, e));
    std::mt19937_64 alpha_rng(derive_seed(cfg.seed, SeedStream::Alpha, e));
    std::mt19937_64 corruption_rng(derive_seed(cfg.seed, SeedStream::Corruption, e));
    std::mt19937_64 sampling_rng(derive_seed(cfg.seed, SeedStream::Sampling, e));
    const ChainRandomness rand{&alpha_rng, &corruption_rng, &sampling_rng};
    const ForwardContext ctx{true, model.config().dropout, &dropout_rng};

    double loss_sum = 0.0, length_sum = 0.0;
    std::size_t n_batches = 0;
    for (const auto& batch : make_batches(train, cfg.batch_tokens, data_rng)) {
      std::vector<TokenSequence> sources, targets;
      std::vector<Index> lengths;
      for (std::size_t i : batch) {
        sources.push_back(train.pairs[i].source);
        targets.push_back(train.pairs[i].target);
        lengths.push_back(static_cast<Index>(train.pairs[i].target.size()));
      }
      ComputationRecord record;
      RecordScope scope(record);
      const EncoderOutput enc = model.encode(sources, ctx);
      Tensor total;
      if (refinement) {
        const auto chain = build_chain(model, enc, sources, targets, cfg, rand, ctx);
        Tensor main = hybrid_loss(chain, targets);
        loss_sum += main.item();
        total = main;
        if (cfg.train_length_head) {
          Tensor len = length_loss(model, enc, lengths);
          length_sum += len.item();
          total = add(total, len);
        }
      } else {
        total = teacher_forcing_loss(model, enc, targets, ctx);
        loss_sum += total.item();
      }
      if (!std::isfinite(total.item()))
        throw NumericError("training diverged at epoch " + std::to_string(epoch) + ": loss is " +
                           std::to_string(total.item()));
      model.parameters().zero_grad();
      record.backward(total);
      adam_step(params, state.adam, lr_at(state.adam.step + 1, cfg.schedule));
      ++n_batches;
    }

    EpochLog entry;
    entry.epoch = epoch;
    entry.train_loss = loss_sum / static_cast<double>(n_batches);
    entry.length_loss = length_sum / static_cast<double>(n_batches);
    if (dev != nullptr && cfg.dev_limit > 0 && !dev->pairs.empty()) {
      DecodeConfig dc;
      if (refinement) {
        dc.mode = DecodeMode::NarFixed;
        dc.i_dec = 1;
        entry.dev_bleu_first = dev_bleu(model, *dev, cfg.dev_limit, dc);
        dc.i_dec = cfg.i_train;
        entry.dev_bleu_itrain = dev_bleu(model, *dev, cfg.dev_limit, dc);
      } else {
        dc.mode = DecodeMode::ArGreedy;
        entry.dev_bleu_first = entry.dev_bleu_itrain = dev_bleu(model, *dev, cfg.dev_limit, dc);
      }
    }
    entry.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    state.epoch = epoch;
    log.push_back(entry);
    if (hooks.on_epoch) hooks.on_epoch(entry, model, state);
  }
  return log;
}

}  // namespace refine
