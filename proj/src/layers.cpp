#include "refine/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace refine {

Tensor ParameterSet::create(std::string name, Matrix init) {
  for (const auto& n : names_)
    if (n == name) throw std::invalid_argument("duplicate parameter name " + name);
  names_.push_back(std::move(name));
  tensors_.emplace_back(std::move(init), true);
  return tensors_.back();
}

const Tensor& ParameterSet::at(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return tensors_[i];
  throw std::out_of_range("no parameter named " + name);
}

void ParameterSet::zero_grad() {
  for (auto& t : tensors_) t.zero_grad();
}

Tensor ForwardContext::maybe_dropout(const Tensor& x) const {
  if (!training || dropout <= 0.0 || rng == nullptr) return x;
  return refine::dropout(x, dropout, *rng);
}

Linear Linear::create(ParameterSet& ps, const std::string& name, Index in, Index out, std::mt19937_64& rng) {
  const Scalar limit = std::sqrt(6.0 / static_cast<Scalar>(in + out));
  std::uniform_real_distribution<Scalar> dist(-limit, limit);
  Matrix w(in, out);
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = dist(rng);
  Linear l;
  l.weight = ps.create(name + ".weight", std::move(w));
  l.bias = ps.create(name + ".bias", Matrix::Zero(1, out));
  return l;
}

LayerNorm LayerNorm::create(ParameterSet& ps, const std::string& name, Index d) {
  LayerNorm ln;
  ln.gain = ps.create(name + ".gain", Matrix::Ones(1, d));
  ln.bias = ps.create(name + ".bias", Matrix::Zero(1, d));
  return ln;
}

FeedForward FeedForward::create(ParameterSet& ps, const std::string& name, Index d, Index hidden,
                                std::mt19937_64& rng) {
  return {Linear::create(ps, name + ".inner", d, hidden, rng), Linear::create(ps, name + ".outer", hidden, d, rng)};
}

Tensor FeedForward::operator()(const Tensor& x, const ForwardContext& ctx) const {
  return outer(ctx.maybe_dropout(relu(inner(x))));
}

MultiHeadAttention MultiHeadAttention::create(ParameterSet& ps, const std::string& name, Index d,
                                              std::mt19937_64& rng) {
  return {Linear::create(ps, name + ".query", d, d, rng), Linear::create(ps, name + ".key", d, d, rng),
          Linear::create(ps, name + ".value", d, d, rng), Linear::create(ps, name + ".output", d, d, rng)};
}

Tensor MultiHeadAttention::operator()(const Tensor& from, const Tensor& keys_from, const Tensor& values_from,
                                      const AttentionLayout& layout, Matrix* weights) const {
  return output(attention(query(from), key(keys_from), value(values_from), layout, weights));
}

Highway Highway::create(ParameterSet& ps, const std::string& name, Index d, std::mt19937_64& rng) {
  return {Linear::create(ps, name + ".gate", d, d, rng)};
}

Tensor highway_combine(const Tensor& x, const Tensor& h, const Linear& gate) {
  Tensor g = sigmoid(gate(x));
  return add(x, mul(g, sub(h, x)));
}

Tensor Highway::operator()(const Tensor& x, const Tensor& h) const { return highway_combine(x, h, gate); }

Matrix sinusoidal_positions(Index length, Index d_model) {
  Matrix pe(length, d_model);
  for (Index pos = 0; pos < length; ++pos) {
    for (Index i = 0; i < d_model; ++i) {
      const Index pair = i / 2;
      const Scalar angle =
          static_cast<Scalar>(pos) / std::pow(10000.0, 2.0 * static_cast<Scalar>(pair) / static_cast<Scalar>(d_model));
      pe(pos, i) = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return pe;
}

Tensor positional_attention(const MultiHeadAttention& attn, const Tensor& hidden, Index batch, Index length,
                            Index heads, Matrix* weights) {
  if (hidden.rows() != batch * length)
    throw ShapeError("positional_attention: expected " + std::to_string(batch * length) + " rows, got " +
                     shape_string(hidden.rows(), hidden.cols()));
  const Matrix pe = sinusoidal_positions(length, hidden.cols());
  Tensor positions(pe.replicate(batch, 1));
  AttentionLayout layout;
  layout.batch = batch;
  layout.query_len = length;
  layout.key_len = length;
  layout.heads = heads;
  return attn(positions, positions, hidden, layout, weights);
}

}  // namespace refine
