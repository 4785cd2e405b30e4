#pragma once

// Transformer building blocks shared by the encoder and the decoders.

#include "refine/ops.hpp"
#include "refine/tensor.hpp"

#include <random>
#include <string>
#include <vector>

namespace refine {

// Ordered, named collection of trainable leaves.
class ParameterSet {
 public:
  Tensor create(std::string name, Matrix init);

  std::size_t size() const { return tensors_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  std::vector<Tensor>& tensors() { return tensors_; }
  const std::vector<Tensor>& tensors() const { return tensors_; }
  // Throws std::out_of_range for unknown names.
  const Tensor& at(const std::string& name) const;

  void zero_grad();

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
};

// Training/inference switches threaded through every forward pass.
struct ForwardContext {
  bool training = false;
  Scalar dropout = 0.0;
  std::mt19937_64* rng = nullptr;

  Tensor maybe_dropout(const Tensor& x) const;
};

struct Linear {
  Tensor weight;  // in x out
  Tensor bias;    // 1 x out

  static Linear create(ParameterSet& ps, const std::string& name, Index in, Index out, std::mt19937_64& rng);
  Tensor operator()(const Tensor& x) const { return add(matmul(x, weight), bias); }
};

struct LayerNorm {
  Tensor gain;
  Tensor bias;

  static LayerNorm create(ParameterSet& ps, const std::string& name, Index d);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias); }
};

struct FeedForward {
  Linear inner;
  Linear outer;

  static FeedForward create(ParameterSet& ps, const std::string& name, Index d, Index hidden, std::mt19937_64& rng);
  Tensor operator()(const Tensor& x, const ForwardContext& ctx) const;
};

struct MultiHeadAttention {
  Linear query, key, value, output;

  static MultiHeadAttention create(ParameterSet& ps, const std::string& name, Index d, std::mt19937_64& rng);
  // Queries are projected from `from`, keys from `keys_from`, values from `values_from`.
  Tensor operator()(const Tensor& from, const Tensor& keys_from, const Tensor& values_from,
                    const AttentionLayout& layout, Matrix* weights = nullptr) const;
};

// Gated carry: g = sigmoid(gate(x)), result = g * h + (1 - g) * x.
struct Highway {
  Linear gate;

  static Highway create(ParameterSet& ps, const std::string& name, Index d, std::mt19937_64& rng);
  Tensor operator()(const Tensor& x, const Tensor& h) const;
};

Tensor highway_combine(const Tensor& x, const Tensor& h, const Linear& gate);

// Fixed sin/cos position table, T x d.
Matrix sinusoidal_positions(Index length, Index d_model);

// Attention whose queries and keys are position encodings and whose values are
// `hidden` (batch blocks of `length` rows each).
Tensor positional_attention(const MultiHeadAttention& attn, const Tensor& hidden, Index batch, Index length,
                            Index heads, Matrix* weights = nullptr);

}  // namespace refine
