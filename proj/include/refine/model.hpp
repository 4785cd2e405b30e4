#pragma once

// Encoder, the two non-autoregressive decoders (initial guess and shared
// refinement step), the target-length head, and the autoregressive baseline.
//
// All forward passes take a batch of sequences. Sources may differ in length
// (padded blocks with key masking); decoder inputs within one call share a
// single target length T.

#include "refine/layers.hpp"
#include "refine/tensor.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace refine {

enum class Architecture { Refinement, Autoregressive };

std::string to_string(Architecture a);
Architecture architecture_from_string(const std::string& s);

struct ModelConfig {
  Architecture arch = Architecture::Refinement;
  Index d_model = 64;
  Index d_hidden = 128;
  Index n_layers = 2;
  Index n_heads = 2;
  Index vocab_src = 36;
  Index vocab_tgt = 36;
  Index max_len = 64;
  Index max_len_offset = 20;
  Scalar dropout = 0.1;

  // Throws std::invalid_argument naming the offending field.
  void validate() const;
  Index length_classes() const { return 2 * max_len_offset + 1; }
};

struct EncoderOutput {
  Tensor states;          // (batch * stride) x d_model, padded blocks
  Tensor per_layer_sums;  // batch x d_model, detached; embedding layer plus every encoder layer
  Index batch = 0;
  Index stride = 0;
  std::vector<Index> lengths;
};

struct DecoderStepOutput {
  Tensor logits;       // (batch * T) x vocab_tgt
  Tensor activations;  // (batch * T) x d_model
  Index batch = 0;
  Index length = 0;
};

// Decoder-1 input: X[floor(T' * t / T)] for t = 0..T-1.
TokenSequence project_source_to_length(std::span<const Token> source, Index target_length);

struct EncoderLayer {
  MultiHeadAttention self_attn;
  LayerNorm norm_attn;
  FeedForward ff;
  LayerNorm norm_ff;
};

struct RefinementLayer {
  MultiHeadAttention self_attn, pos_attn, cross_attn;
  Highway hw_self, hw_pos, hw_cross, hw_ff;
  LayerNorm norm_self, norm_pos, norm_cross, norm_ff;
  FeedForward ff;
};

struct RefinementDecoder {
  std::vector<RefinementLayer> layers;
  Linear project;  // d_model -> vocab_tgt
};

struct CausalLayer {
  MultiHeadAttention self_attn, cross_attn;
  LayerNorm norm_self, norm_cross, norm_ff;
  FeedForward ff;
};

class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelConfig& config() const { return config_; }
  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }

  EncoderOutput encode(std::span<const TokenSequence> sources, const ForwardContext& ctx = {}) const;

  // Decoder 1: p(Y^0 | X) from source tokens already projected to length T.
  DecoderStepOutput decoder1_forward(std::span<const TokenSequence> projected, const EncoderOutput& enc,
                                     const ForwardContext& ctx = {}) const;

  // Decoder 2: p(Y^l | Y^{l-1}, X). Input per position is
  // embedding(prev token) + previous activation + position encoding.
  DecoderStepOutput decoder2_forward(std::span<const TokenSequence> prev_tokens, const Tensor& prev_activations,
                                     const EncoderOutput& enc, const ForwardContext& ctx = {}) const;

  // Logits over T - T' in [-max_len_offset, max_len_offset]; batch x classes.
  Tensor length_logits(const EncoderOutput& enc) const;

  // Causal decoder over equal-length prefixes that start with BOS; returns
  // next-token logits at every prefix position, (batch * len) x vocab_tgt.
  Tensor ar_decoder_forward(std::span<const TokenSequence> prefixes, const EncoderOutput& enc,
                            const ForwardContext& ctx = {}) const;

  // Parameters owned by each block, for sharing/isolation checks.
  std::vector<std::string> parameter_names(const std::string& prefix) const;

 private:
  Tensor embed(const Tensor& table, std::span<const TokenSequence> seqs, Index length) const;
  DecoderStepOutput run_refinement(const RefinementDecoder& dec, const Tensor& input, Index batch, Index length,
                                   const EncoderOutput& enc, const ForwardContext& ctx) const;
  void require_arch(Architecture a, const char* what) const;

  ModelConfig config_;
  ParameterSet params_;
  Tensor src_embed_;
  Tensor tgt_embed_;
  std::vector<EncoderLayer> encoder_;
  RefinementDecoder decoder1_;
  RefinementDecoder decoder2_;
  Linear length_head_;
  std::vector<CausalLayer> ar_layers_;
  Linear ar_project_;
};

}  // namespace refine
