#include "refine/model.hpp"

#include <cmath>
#include <stdexcept>

namespace refine {

std::string to_string(Architecture a) { return a == Architecture::Refinement ? "refinement" : "autoregressive"; }

Architecture architecture_from_string(const std::string& s) {
  if (s == "refinement" || s == "nar") return Architecture::Refinement;
  if (s == "autoregressive" || s == "ar") return Architecture::Autoregressive;
  throw std::invalid_argument("unknown architecture '" + s + "'");
}

void ModelConfig::validate() const {
  auto need = [](bool ok, const char* field, const char* what) {
    if (!ok) throw std::invalid_argument(std::string("model config: ") + field + " " + what);
  };
  need(d_model > 0, "d_model", "must be positive");
  need(d_hidden > 0, "d_hidden", "must be positive");
  need(n_layers > 0, "n_layers", "must be positive");
  need(n_heads > 0, "n_heads", "must be positive");
  need(d_model % n_heads == 0, "d_model", "must be divisible by n_heads");
  need(vocab_src > 0, "vocab_src", "must be positive");
  need(vocab_tgt > 0, "vocab_tgt", "must be positive");
  need(max_len > 0, "max_len", "must be positive");
  need(max_len_offset >= 0, "max_len_offset", "must be non-negative");
  need(dropout >= 0.0 && dropout < 1.0, "dropout", "must lie in [0, 1)");
}

TokenSequence project_source_to_length(std::span<const Token> source, Index target_length) {
  if (source.empty() || target_length < 1)
    throw std::invalid_argument("project_source_to_length: lengths must be at least 1");
  const auto src_len = static_cast<Index>(source.size());
  TokenSequence out(static_cast<std::size_t>(target_length));
  for (Index t = 0; t < target_length; ++t)
    out[static_cast<std::size_t>(t)] = source[static_cast<std::size_t>((src_len * t) / target_length)];
  return out;
}

namespace {

RefinementDecoder make_refinement_decoder(ParameterSet& ps, const std::string& name, const ModelConfig& c,
                                          std::mt19937_64& rng) {
  RefinementDecoder dec;
  for (Index l = 0; l < c.n_layers; ++l) {
    const std::string p = name + ".layer" + std::to_string(l);
    RefinementLayer layer{
        MultiHeadAttention::create(ps, p + ".self_attn", c.d_model, rng),
        MultiHeadAttention::create(ps, p + ".pos_attn", c.d_model, rng),
        MultiHeadAttention::create(ps, p + ".cross_attn", c.d_model, rng),
        Highway::create(ps, p + ".hw_self", c.d_model, rng),
        Highway::create(ps, p + ".hw_pos", c.d_model, rng),
        Highway::create(ps, p + ".hw_cross", c.d_model, rng),
        Highway::create(ps, p + ".hw_ff", c.d_model, rng),
        LayerNorm::create(ps, p + ".norm_self", c.d_model),
        LayerNorm::create(ps, p + ".norm_pos", c.d_model),
        LayerNorm::create(ps, p + ".norm_cross", c.d_model),
        LayerNorm::create(ps, p + ".norm_ff", c.d_model),
        FeedForward::create(ps, p + ".ff", c.d_model, c.d_hidden, rng),
    };
    dec.layers.push_back(std::move(layer));
  }
  dec.project = Linear::create(ps, name + ".project", c.d_model, c.vocab_tgt, rng);
  return dec;
}

Matrix embedding_init(Index rows, Index d, std::mt19937_64& rng) {
  std::normal_distribution<Scalar> dist(0.0, 1.0 / std::sqrt(static_cast<Scalar>(d)));
  Matrix m(rows, d);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

}  // namespace

Model::Model(ModelConfig config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const auto& c = config_;
  src_embed_ = params_.create("src_embed", embedding_init(c.vocab_src, c.d_model, rng));
  tgt_embed_ = params_.create("tgt_embed", embedding_init(c.vocab_tgt, c.d_model, rng));
  for (Index l = 0; l < c.n_layers; ++l) {
    const std::string p = "encoder.layer" + std::to_string(l);
    encoder_.push_back({MultiHeadAttention::create(params_, p + ".self_attn", c.d_model, rng),
                        LayerNorm::create(params_, p + ".norm_attn", c.d_model),
                        FeedForward::create(params_, p + ".ff", c.d_model, c.d_hidden, rng),
                        LayerNorm::create(params_, p + ".norm_ff", c.d_model)});
  }
  if (c.arch == Architecture::Refinement) {
    decoder1_ = make_refinement_decoder(params_, "decoder1", c, rng);
    decoder2_ = make_refinement_decoder(params_, "decoder2", c, rng);
    length_head_ = Linear::create(params_, "length_head", c.d_model, c.length_classes(), rng);
  } else {
    for (Index l = 0; l < c.n_layers; ++l) {
      const std::string p = "ar_decoder.layer" + std::to_string(l);
      ar_layers_.push_back({MultiHeadAttention::create(params_, p + ".self_attn", c.d_model, rng),
                            MultiHeadAttention::create(params_, p + ".cross_attn", c.d_model, rng),
                            LayerNorm::create(params_, p + ".norm_self", c.d_model),
                            LayerNorm::create(params_, p + ".norm_cross", c.d_model),
                            LayerNorm::create(params_, p + ".norm_ff", c.d_model),
                            FeedForward::create(params_, p + ".ff", c.d_model, c.d_hidden, rng)});
    }
    ar_project_ = Linear::create(params_, "ar_decoder.project", c.d_model, c.vocab_tgt, rng);
  }
}

void Model::require_arch(Architecture a, const char* what) const {
  if (config_.arch != a)
    throw std::logic_error(std::string(what) + " is not available on a " + to_string(config_.arch) + " model");
}

std::vector<std::string> Model::parameter_names(const std::string& prefix) const {
  std::vector<std::string> out;
  for (const auto& n : params_.names())
    if (n.rfind(prefix, 0) == 0) out.push_back(n);
  return out;
}

// Embeds each sequence into a block of `length` rows (padding with token 0),
// scales by sqrt(d) and adds position encodings.
Tensor Model::embed(const Tensor& table, std::span<const TokenSequence> seqs, Index length) const {
  TokenSequence ids;
  ids.reserve(seqs.size() * static_cast<std::size_t>(length));
  for (const auto& s : seqs) {
    if (static_cast<Index>(s.size()) > length) throw ShapeError("embed: sequence longer than block");
    ids.insert(ids.end(), s.begin(), s.end());
    ids.insert(ids.end(), static_cast<std::size_t>(length) - s.size(), 0);
  }
  const auto batch = static_cast<Index>(seqs.size());
  Tensor x = scale(embedding_lookup(table, ids), std::sqrt(static_cast<Scalar>(config_.d_model)));
  Tensor pos(sinusoidal_positions(length, config_.d_model).replicate(batch, 1));
  return add(x, pos);
}

EncoderOutput Model::encode(std::span<const TokenSequence> sources, const ForwardContext& ctx) const {
  if (sources.empty()) throw std::invalid_argument("encode: empty batch");
  EncoderOutput enc;
  enc.batch = static_cast<Index>(sources.size());
  for (const auto& s : sources) {
    if (s.empty()) throw std::invalid_argument("encode: empty source sequence");
    for (Token t : s)
      if (t < 0 || t >= config_.vocab_src)
        throw std::out_of_range("encode: source token " + std::to_string(t) + " outside vocabulary of " +
                                std::to_string(config_.vocab_src));
    enc.lengths.push_back(static_cast<Index>(s.size()));
    enc.stride = std::max(enc.stride, static_cast<Index>(s.size()));
  }
  AttentionLayout layout;
  layout.batch = enc.batch;
  layout.query_len = enc.stride;
  layout.key_len = enc.stride;
  layout.heads = config_.n_heads;
  layout.key_lengths = enc.lengths;

  Tensor x = ctx.maybe_dropout(embed(src_embed_, sources, enc.stride));
  Matrix sums = segment_sum(detach(x), enc.stride, enc.lengths).value();
  for (const auto& layer : encoder_) {
    Tensor h = ctx.maybe_dropout(layer.self_attn(x, x, x, layout));
    x = layer.norm_attn(add(x, h));
    h = ctx.maybe_dropout(layer.ff(x, ctx));
    x = layer.norm_ff(add(x, h));
    sums += segment_sum(detach(x), enc.stride, enc.lengths).value();
  }
  enc.states = x;
  enc.per_layer_sums = Tensor(std::move(sums));
  return enc;
}

DecoderStepOutput Model::run_refinement(const RefinementDecoder& dec, const Tensor& input, Index batch,
                                        Index length, const EncoderOutput& enc, const ForwardContext& ctx) const {
  if (batch != enc.batch) throw ShapeError("decoder batch differs from encoder batch");
  AttentionLayout self_layout;
  self_layout.batch = batch;
  self_layout.query_len = length;
  self_layout.key_len = length;
  self_layout.heads = config_.n_heads;

  AttentionLayout cross_layout = self_layout;
  cross_layout.key_len = enc.stride;
  cross_layout.key_lengths = enc.lengths;

  Tensor x = ctx.maybe_dropout(input);
  for (const auto& layer : dec.layers) {
    Tensor h = ctx.maybe_dropout(layer.self_attn(x, x, x, self_layout));
    x = layer.norm_self(layer.hw_self(x, h));
    h = ctx.maybe_dropout(positional_attention(layer.pos_attn, x, batch, length, config_.n_heads));
    x = layer.norm_pos(layer.hw_pos(x, h));
    h = ctx.maybe_dropout(layer.cross_attn(x, enc.states, enc.states, cross_layout));
    x = layer.norm_cross(layer.hw_cross(x, h));
    h = ctx.maybe_dropout(layer.ff(x, ctx));
    x = layer.norm_ff(layer.hw_ff(x, h));
  }
  DecoderStepOutput out;
  out.logits = dec.project(x);
  out.activations = x;
  out.batch = batch;
  out.length = length;
  return out;
}

namespace {
Index common_length(std::span<const TokenSequence> seqs, Index max_len, const char* what) {
  if (seqs.empty()) throw std::invalid_argument(std::string(what) + ": empty batch");
  const auto len = static_cast<Index>(seqs.front().size());
  if (len < 1) throw std::invalid_argument(std::string(what) + ": empty target sequence");
  if (len > max_len)
    throw std::length_error(std::string(what) + ": target length " + std::to_string(len) + " exceeds max_len " +
                            std::to_string(max_len));
  for (const auto& s : seqs)
    if (static_cast<Index>(s.size()) != len)
      throw ShapeError(std::string(what) + ": sequences in one batch must share a length");
  return len;
}
}  // namespace

DecoderStepOutput Model::decoder1_forward(std::span<const TokenSequence> projected, const EncoderOutput& enc,
                                          const ForwardContext& ctx) const {
  require_arch(Architecture::Refinement, "decoder1_forward");
  const Index len = common_length(projected, config_.max_len, "decoder1_forward");
  const auto batch = static_cast<Index>(projected.size());
  return run_refinement(decoder1_, embed(src_embed_, projected, len), batch, len, enc, ctx);
}

DecoderStepOutput Model::decoder2_forward(std::span<const TokenSequence> prev_tokens, const Tensor& prev_activations,
                                          const EncoderOutput& enc, const ForwardContext& ctx) const {
  require_arch(Architecture::Refinement, "decoder2_forward");
  const Index len = common_length(prev_tokens, config_.max_len, "decoder2_forward");
  const auto batch = static_cast<Index>(prev_tokens.size());
  if (prev_activations.rows() != batch * len || prev_activations.cols() != config_.d_model)
    throw ShapeError("decoder2_forward: activations " +
                     shape_string(prev_activations.rows(), prev_activations.cols()) + " do not match " +
                     std::to_string(batch * len) + " token rows");
  Tensor input = add(embed(tgt_embed_, prev_tokens, len), prev_activations);
  return run_refinement(decoder2_, input, batch, len, enc, ctx);
}

Tensor Model::length_logits(const EncoderOutput& enc) const {
  require_arch(Architecture::Refinement, "length_logits");
  return length_head_(scale(detach(enc.per_layer_sums), 1.0 / std::sqrt(static_cast<Scalar>(config_.max_len))));
}

Tensor Model::ar_decoder_forward(std::span<const TokenSequence> prefixes, const EncoderOutput& enc,
                                 const ForwardContext& ctx) const {
  require_arch(Architecture::Autoregressive, "ar_decoder_forward");
  const Index len = common_length(prefixes, config_.max_len + 1, "ar_decoder_forward");
  const auto batch = static_cast<Index>(prefixes.size());
  if (batch != enc.batch) throw ShapeError("decoder batch differs from encoder batch");
  AttentionLayout self_layout;
  self_layout.batch = batch;
  self_layout.query_len = len;
  self_layout.key_len = len;
  self_layout.heads = config_.n_heads;
  self_layout.causal = true;
  AttentionLayout cross_layout = self_layout;
  cross_layout.causal = false;
  cross_layout.key_len = enc.stride;
  cross_layout.key_lengths = enc.lengths;

  Tensor x = ctx.maybe_dropout(embed(tgt_embed_, prefixes, len));
  for (const auto& layer : ar_layers_) {
    Tensor h = ctx.maybe_dropout(layer.self_attn(x, x, x, self_layout));
    x = layer.norm_self(add(x, h));
    h = ctx.maybe_dropout(layer.cross_attn(x, enc.states, enc.states, cross_layout));
    x = layer.norm_cross(add(x, h));
    h = ctx.maybe_dropout(layer.ff(x, ctx));
    x = layer.norm_ff(add(x, h));
  }
  return ar_project_(x);
}

}  // namespace refine
