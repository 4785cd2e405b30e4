#include "refine/ops.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace refine {

namespace {

using NodePtr = std::shared_ptr<detail::Node>;

bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (active_record() == nullptr) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

NodePtr new_node(Matrix value, const char* op) {
  auto node = std::make_shared<detail::Node>();
  node->value = std::move(value);
  node->op = op;
#ifndef NDEBUG
  if (!node->value.allFinite()) throw std::runtime_error(std::string("non-finite value from ") + op);
#endif
  return node;
}

Tensor finish(NodePtr node, bool track, std::function<void()> backward) {
  if (track) {
    node->requires_grad = true;
    node->backward = std::move(backward);
    active_record()->append(node);
  }
  return make_tensor(std::move(node));
}

Matrix& grad_buffer(detail::Node& n) {
  if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

bool row_broadcast(const Tensor& a, const Tensor& b) {
  return b.rows() == 1 && a.rows() != 1 && b.cols() == a.cols();
}

void check_binary(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape() || row_broadcast(a, b)) return;
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_string(a.rows(), a.cols()) +
                   " and " + shape_string(b.rows(), b.cols()));
}

Matrix softmax_rows(const Matrix& x) {
  Matrix y = x.colwise() - x.rowwise().maxCoeff();
  y = y.array().exp();
  y.array().colwise() /= y.rowwise().sum().array();
  return y;
}

Matrix log_softmax_rows(const Matrix& x) {
  Eigen::VectorXd m = x.rowwise().maxCoeff();
  Matrix shifted = x.colwise() - m;
  Eigen::VectorXd lse = shifted.array().exp().rowwise().sum().log().matrix();
  return shifted.colwise() - lse;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner dimensions differ, " + shape_string(a.rows(), a.cols()) + " x " +
                     shape_string(b.rows(), b.cols()));
  const bool track = tracking({&a, &b});
  auto node = new_node(a.value() * b.value(), "matmul");
  auto* out = node.get();
  return finish(std::move(node), track, [out, an = a.handle(), bn = b.handle()] {
    if (an->requires_grad) an->accumulate(out->grad * bn->value.transpose());
    if (bn->requires_grad) bn->accumulate(an->value.transpose() * out->grad);
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_binary(a, b, "add");
  const bool bcast = row_broadcast(a, b);
  const bool track = tracking({&a, &b});
  Matrix v = bcast ? Matrix(a.value().rowwise() + b.value().row(0)) : Matrix(a.value() + b.value());
  auto node = new_node(std::move(v), "add");
  auto* out = node.get();
  return finish(std::move(node), track, [out, bcast, an = a.handle(), bn = b.handle()] {
    an->accumulate(out->grad);
    if (bcast)
      bn->accumulate(out->grad.colwise().sum());
    else
      bn->accumulate(out->grad);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_binary(a, b, "sub");
  const bool bcast = row_broadcast(a, b);
  const bool track = tracking({&a, &b});
  Matrix v = bcast ? Matrix(a.value().rowwise() - b.value().row(0)) : Matrix(a.value() - b.value());
  auto node = new_node(std::move(v), "sub");
  auto* out = node.get();
  return finish(std::move(node), track, [out, bcast, an = a.handle(), bn = b.handle()] {
    an->accumulate(out->grad);
    if (bcast)
      bn->accumulate(-out->grad.colwise().sum());
    else
      bn->accumulate(-out->grad);
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_binary(a, b, "mul");
  const bool bcast = row_broadcast(a, b);
  const bool track = tracking({&a, &b});
  Matrix v;
  if (bcast)
    v = a.value().array().rowwise() * b.value().row(0).array();
  else
    v = a.value().cwiseProduct(b.value());
  auto node = new_node(std::move(v), "mul");
  auto* out = node.get();
  return finish(std::move(node), track, [out, bcast, an = a.handle(), bn = b.handle()] {
    if (bcast) {
      if (an->requires_grad) an->accumulate(out->grad.array().rowwise() * bn->value.row(0).array());
      if (bn->requires_grad) bn->accumulate(out->grad.cwiseProduct(an->value).colwise().sum());
    } else {
      if (an->requires_grad) an->accumulate(out->grad.cwiseProduct(bn->value));
      if (bn->requires_grad) bn->accumulate(out->grad.cwiseProduct(an->value));
    }
  });
}

Tensor scale(const Tensor& a, Scalar s) {
  const bool track = tracking({&a});
  auto node = new_node(a.value() * s, "scale");
  auto* out = node.get();
  return finish(std::move(node), track, [out, s, an = a.handle()] { an->accumulate(out->grad * s); });
}

Tensor relu(const Tensor& x) {
  const bool track = tracking({&x});
  auto node = new_node(x.value().cwiseMax(0.0), "relu");
  auto* out = node.get();
  return finish(std::move(node), track, [out, xn = x.handle()] {
    xn->accumulate((xn->value.array() > 0.0).select(out->grad, 0.0));
  });
}

Tensor sigmoid(const Tensor& x) {
  const bool track = tracking({&x});
  Matrix y = (1.0 + (-x.value().array()).exp()).inverse().matrix();
  auto node = new_node(std::move(y), "sigmoid");
  auto* out = node.get();
  return finish(std::move(node), track, [out, xn = x.handle()] {
    xn->accumulate((out->grad.array() * out->value.array() * (1.0 - out->value.array())).matrix());
  });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const Index rows = parts[0].rows();
  Index cols = 0;
  bool track = false;
  for (const auto& p : parts) {
    if (p.rows() != rows)
      throw ShapeError("concat_cols: row mismatch " + shape_string(rows, parts[0].cols()) + " vs " +
                       shape_string(p.rows(), p.cols()));
    cols += p.cols();
    track = track || tracking({&p});
  }
  Matrix v(rows, cols);
  std::vector<NodePtr> inputs;
  Index offset = 0;
  for (const auto& p : parts) {
    v.middleCols(offset, p.cols()) = p.value();
    offset += p.cols();
    inputs.push_back(p.handle());
  }
  auto node = new_node(std::move(v), "concat_cols");
  auto* out = node.get();
  return finish(std::move(node), track, [out, inputs = std::move(inputs)] {
    Index off = 0;
    for (const auto& in : inputs) {
      const Index c = in->value.cols();
      if (in->requires_grad) in->accumulate(out->grad.middleCols(off, c));
      off += c;
    }
  });
}

Tensor sum(const Tensor& x) {
  const bool track = tracking({&x});
  Matrix v(1, 1);
  v(0, 0) = x.value().sum();
  auto node = new_node(std::move(v), "sum");
  auto* out = node.get();
  return finish(std::move(node), track, [out, xn = x.handle()] {
    xn->accumulate(Matrix::Constant(xn->value.rows(), xn->value.cols(), out->grad(0, 0)));
  });
}

Tensor embedding_lookup(const Tensor& table, std::span<const Token> ids) {
  Matrix v(static_cast<Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= table.rows())
      throw std::out_of_range("embedding_lookup: index " + std::to_string(ids[i]) +
                              " outside table of " + std::to_string(table.rows()) + " rows");
    v.row(static_cast<Index>(i)) = table.value().row(ids[i]);
  }
  const bool track = tracking({&table});
  auto node = new_node(std::move(v), "embedding_lookup");
  auto* out = node.get();
  return finish(std::move(node), track, [out, tn = table.handle(), ids = TokenSequence(ids.begin(), ids.end())] {
    if (!tn->requires_grad) return;
    Matrix& g = grad_buffer(*tn);
    for (std::size_t i = 0; i < ids.size(); ++i) g.row(ids[i]) += out->grad.row(static_cast<Index>(i));
  });
}

Tensor softmax(const Tensor& x) {
  const bool track = tracking({&x});
  auto node = new_node(softmax_rows(x.value()), "softmax");
  auto* out = node.get();
  return finish(std::move(node), track, [out, xn = x.handle()] {
    const Matrix& y = out->value;
    Eigen::VectorXd dot = out->grad.cwiseProduct(y).rowwise().sum();
    xn->accumulate(y.cwiseProduct(Matrix(out->grad.colwise() - dot)));
  });
}

Tensor log_softmax(const Tensor& x) {
  const bool track = tracking({&x});
  auto node = new_node(log_softmax_rows(x.value()), "log_softmax");
  auto* out = node.get();
  return finish(std::move(node), track, [out, xn = x.handle()] {
    Matrix p = out->value.array().exp();
    Eigen::VectorXd gs = out->grad.rowwise().sum();
    xn->accumulate(out->grad - Matrix(p.array().colwise() * gs.array()));
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, Scalar eps) {
  const Index d = x.cols();
  if (gain.rows() != 1 || gain.cols() != d || bias.rows() != 1 || bias.cols() != d)
    throw ShapeError("layer_norm: gain/bias must be " + shape_string(1, d));
  Eigen::VectorXd mean = x.value().rowwise().mean();
  Matrix centered = x.value().colwise() - mean;
  Eigen::VectorXd inv_std =
      ((centered.array().square().rowwise().sum() / static_cast<Scalar>(d)) + eps).rsqrt().matrix();
  Matrix xhat = centered.array().colwise() * inv_std.array();
  Matrix y = (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() + bias.value().row(0).array();

  const bool track = tracking({&x, &gain, &bias});
  auto node = new_node(std::move(y), "layer_norm");
  auto* out = node.get();
  return finish(std::move(node), track,
                [out, xhat = std::move(xhat), inv_std = std::move(inv_std), xn = x.handle(),
                 gn = gain.handle(), bn = bias.handle()] {
                  const Matrix& g = out->grad;
                  if (gn->requires_grad) gn->accumulate(g.cwiseProduct(xhat).colwise().sum());
                  if (bn->requires_grad) bn->accumulate(g.colwise().sum());
                  if (!xn->requires_grad) return;
                  const auto d = static_cast<Scalar>(xhat.cols());
                  Matrix dxhat = g.array().rowwise() * gn->value.row(0).array();
                  Eigen::VectorXd mean_d = dxhat.rowwise().sum() / d;
                  Eigen::VectorXd mean_dx = dxhat.cwiseProduct(xhat).rowwise().sum() / d;
                  Matrix dx = (dxhat.colwise() - mean_d) - Matrix(xhat.array().colwise() * mean_dx.array());
                  xn->accumulate(dx.array().colwise() * inv_std.array());
                });
}

Tensor cross_entropy(const Tensor& logits, std::span<const Token> targets, std::span<const Scalar> mask) {
  const Index rows = logits.rows();
  if (static_cast<Index>(targets.size()) != rows)
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     shape_string(rows, logits.cols()));
  if (!mask.empty() && static_cast<Index>(mask.size()) != rows)
    throw ShapeError("cross_entropy: mask length " + std::to_string(mask.size()) + " != " + std::to_string(rows));
  Eigen::VectorXd w = mask.empty() ? Eigen::VectorXd::Ones(rows)
                                   : Eigen::VectorXd(Eigen::Map<const Eigen::VectorXd>(mask.data(), rows));
  const Scalar total = w.sum();
  if (!(total > 0.0)) throw std::invalid_argument("cross_entropy: every position is masked");
  Matrix lsm = log_softmax_rows(logits.value());
  Scalar loss = 0.0;
  for (Index t = 0; t < rows; ++t) {
    const Token y = targets[static_cast<std::size_t>(t)];
    if (y < 0 || y >= logits.cols())
      throw std::out_of_range("cross_entropy: target " + std::to_string(y) + " outside vocabulary of " +
                              std::to_string(logits.cols()));
    if (w(t) != 0.0) loss -= w(t) * lsm(t, y);
  }
  Matrix v(1, 1);
  v(0, 0) = loss / total;
  const bool track = tracking({&logits});
  auto node = new_node(std::move(v), "cross_entropy");
  auto* out = node.get();
  return finish(std::move(node), track,
                [out, lsm = std::move(lsm), w = std::move(w), total, ln = logits.handle(),
                 tg = TokenSequence(targets.begin(), targets.end())] {
                  Matrix g = lsm.array().exp();
                  for (Index t = 0; t < g.rows(); ++t) g(t, tg[static_cast<std::size_t>(t)]) -= 1.0;
                  g.array().colwise() *= (w.array() * (out->grad(0, 0) / total));
                  ln->accumulate(g);
                });
}

Tensor detach(const Tensor& x) { return Tensor(x.value()); }

Tensor dropout(const Tensor& x, Scalar p, std::mt19937_64& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw std::invalid_argument("dropout: p must be < 1");
  std::bernoulli_distribution keep(1.0 - p);
  Matrix m(x.rows(), x.cols());
  const Scalar s = 1.0 / (1.0 - p);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = keep(rng) ? s : 0.0;
  const bool track = tracking({&x});
  auto node = new_node(x.value().cwiseProduct(m), "dropout");
  auto* out = node.get();
  return finish(std::move(node), track,
                [out, m = std::move(m), xn = x.handle()] { xn->accumulate(out->grad.cwiseProduct(m)); });
}

Tensor segment_sum(const Tensor& x, Index stride, std::span<const Index> lengths) {
  const auto batch = static_cast<Index>(lengths.size());
  if (batch * stride != x.rows())
    throw ShapeError("segment_sum: " + std::to_string(batch) + " blocks of " + std::to_string(stride) +
                     " rows do not cover " + shape_string(x.rows(), x.cols()));
  Matrix v(batch, x.cols());
  for (Index b = 0; b < batch; ++b) {
    const Index len = lengths[static_cast<std::size_t>(b)];
    if (len < 0 || len > stride) throw ShapeError("segment_sum: block length out of range");
    v.row(b) = x.value().middleRows(b * stride, len).colwise().sum();
  }
  const bool track = tracking({&x});
  auto node = new_node(std::move(v), "segment_sum");
  auto* out = node.get();
  return finish(std::move(node), track,
                [out, stride, xn = x.handle(), lens = std::vector<Index>(lengths.begin(), lengths.end())] {
                  if (!xn->requires_grad) return;
                  Matrix& g = grad_buffer(*xn);
                  for (std::size_t b = 0; b < lens.size(); ++b) {
                    const auto bi = static_cast<Index>(b);
                    g.middleRows(bi * stride, lens[b]).rowwise() += out->grad.row(bi);
                  }
                });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionLayout& layout,
                 Matrix* weights) {
  const Index B = layout.batch, Tq = layout.query_len, Tk = layout.key_len, H = layout.heads;
  const Index d = q.cols();
  if (H < 1 || d % H != 0)
    throw ShapeError("attention: width " + std::to_string(d) + " not divisible by " + std::to_string(H) + " heads");
  if (q.rows() != B * Tq || k.rows() != B * Tk || v.rows() != B * Tk || k.cols() != d || v.cols() != d)
    throw ShapeError("attention: layout does not match q " + shape_string(q.rows(), q.cols()) + ", k " +
                     shape_string(k.rows(), k.cols()) + ", v " + shape_string(v.rows(), v.cols()));
  if (!layout.key_lengths.empty() && static_cast<Index>(layout.key_lengths.size()) != B)
    throw ShapeError("attention: key_lengths size differs from batch");

  const Index dk = d / H;
  const Scalar inv_scale = 1.0 / std::sqrt(static_cast<Scalar>(dk));
  const Scalar neg_inf = -std::numeric_limits<Scalar>::infinity();

  // probs: one Tq x Tk block per (batch, head), stacked in that order.
  Matrix probs(B * H * Tq, Tk);
  Matrix outv(B * Tq, d);
  for (Index b = 0; b < B; ++b) {
    const Index valid = layout.key_lengths.empty() ? Tk : layout.key_lengths[static_cast<std::size_t>(b)];
    for (Index h = 0; h < H; ++h) {
      auto qb = q.value().block(b * Tq, h * dk, Tq, dk);
      auto kb = k.value().block(b * Tk, h * dk, Tk, dk);
      auto vb = v.value().block(b * Tk, h * dk, Tk, dk);
      Matrix s = (qb * kb.transpose()) * inv_scale;
      for (Index i = 0; i < Tq; ++i)
        for (Index j = 0; j < Tk; ++j)
          if (j >= valid || (layout.causal && j > i)) s(i, j) = neg_inf;
      Matrix p = softmax_rows(s);
      outv.block(b * Tq, h * dk, Tq, dk) = p * vb;
      probs.middleRows((b * H + h) * Tq, Tq) = std::move(p);
    }
  }
  if (weights != nullptr) *weights = probs;

  const bool track = tracking({&q, &k, &v});
  auto node = new_node(std::move(outv), "attention");
  auto* out = node.get();
  return finish(std::move(node), track,
                [out, B, Tq, Tk, H, dk, inv_scale, probs = std::move(probs), qn = q.handle(), kn = k.handle(),
                 vn = v.handle()] {
                  Matrix* gq = qn->requires_grad ? &grad_buffer(*qn) : nullptr;
                  Matrix* gk = kn->requires_grad ? &grad_buffer(*kn) : nullptr;
                  Matrix* gv = vn->requires_grad ? &grad_buffer(*vn) : nullptr;
                  for (Index b = 0; b < B; ++b) {
                    for (Index h = 0; h < H; ++h) {
                      auto p = probs.middleRows((b * H + h) * Tq, Tq);
                      auto go = out->grad.block(b * Tq, h * dk, Tq, dk);
                      auto vb = vn->value.block(b * Tk, h * dk, Tk, dk);
                      if (gv) gv->block(b * Tk, h * dk, Tk, dk) += p.transpose() * go;
                      if (!gq && !gk) continue;
                      Matrix dp = go * vb.transpose();
                      Eigen::VectorXd dot = dp.cwiseProduct(p).rowwise().sum();
                      Matrix ds = p.cwiseProduct(Matrix(dp.colwise() - dot)) * inv_scale;
                      if (gq) gq->block(b * Tq, h * dk, Tq, dk) += ds * kn->value.block(b * Tk, h * dk, Tk, dk);
                      if (gk) gk->block(b * Tk, h * dk, Tk, dk) += ds.transpose() * qn->value.block(b * Tq, h * dk, Tq, dk);
                    }
                  }
                });
}

}  // namespace refine
