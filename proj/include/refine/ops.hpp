#pragma once

// Differentiable operations on Tensor. Broadcasting is limited to a 1 x n
// row operand applied across the rows of an m x n operand.

#include "refine/tensor.hpp"

#include <random>
#include <span>

namespace refine {

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, Scalar s);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor sum(const Tensor& x);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(Scalar s, const Tensor& a) { return scale(a, s); }

// Rows of `table` selected by `ids`; gradients scatter-add back into the table.
Tensor embedding_lookup(const Tensor& table, std::span<const Token> ids);

// Row-wise, with max subtraction.
Tensor softmax(const Tensor& x);
Tensor log_softmax(const Tensor& x);

// Per-row normalization with population variance, then gain/bias (both 1 x d).
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, Scalar eps = 1e-5);

// Mean over rows with mask > 0 of -log_softmax(logits)[t, targets[t]].
// Mask entries act as weights; an empty mask means all ones.
Tensor cross_entropy(const Tensor& logits, std::span<const Token> targets,
                     std::span<const Scalar> mask = {});

// Value copy cut off from the computation record.
Tensor detach(const Tensor& x);

// Inverted dropout; identity when p == 0.
Tensor dropout(const Tensor& x, Scalar p, std::mt19937_64& rng);

// x holds `lengths.size()` blocks of `stride` rows; returns one row per block
// with the sum of its first lengths[b] rows.
Tensor segment_sum(const Tensor& x, Index stride, std::span<const Index> lengths);

// Batched multi-head scaled dot-product attention over padded blocks.
// q: (batch * query_len) x d, k and v: (batch * key_len) x d.
struct AttentionLayout {
  Index batch = 1;
  Index query_len = 1;
  Index key_len = 1;
  Index heads = 1;
  std::vector<Index> key_lengths;  // valid keys per block; empty = all valid
  bool causal = false;
};

// When `weights` is non-null it receives the attention matrices, stacked as
// (batch * heads * query_len) x key_len.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionLayout& layout,
                 Matrix* weights = nullptr);

}  // namespace refine
