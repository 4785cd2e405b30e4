#pragma once

// Dense rank-2 tensors with define-by-run reverse-mode differentiation.
//
// Every continuous quantity in the library (embeddings, hidden states,
// attention weights, logits) is a Tensor. Vectors are 1 x n, scalars 1 x 1.
// Operations executed while a ComputationRecord is active on the current
// thread append a node to it; ComputationRecord::backward sweeps the nodes in
// reverse append order and accumulates gradients into every leaf that
// requires them.

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace refine {

using Scalar = double;
using Index = Eigen::Index;

template <typename T>
using MatrixT = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVectorT = Eigen::Matrix<T, 1, Eigen::Dynamic>;

using Matrix = MatrixT<Scalar>;
using RowVector = RowVectorT<Scalar>;

using Token = std::int32_t;
using TokenSequence = std::vector<Token>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::string shape_string(Index rows, Index cols);

namespace detail {

struct Node {
  Matrix value;
  Matrix grad;  // empty until the first accumulation
  bool requires_grad = false;
  const char* op = "leaf";
  std::function<void()> backward;

  void accumulate(const Matrix& g) {
    if (!requires_grad) return;
    if (grad.size() == 0)
      grad = g;
    else
      grad += g;
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Matrix value, bool requires_grad = false);

  static Tensor zeros(Index rows, Index cols, bool requires_grad = false);
  static Tensor scalar(Scalar v);

  bool defined() const { return node_ != nullptr; }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  Index size() const { return node_->value.size(); }
  std::array<Index, 2> shape() const { return {rows(), cols()}; }

  const Matrix& value() const { return node_->value; }
  // Direct write access; only meaningful on leaves (parameters, inputs).
  Matrix& mutable_value() { return node_->value; }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->grad.size() != 0; }
  // Zero matrix of the value's shape when no gradient has been accumulated.
  Matrix grad() const;
  void zero_grad() { node_->grad.resize(0, 0); }

  Scalar item() const;
  const char* op() const { return node_->op; }

  const std::shared_ptr<detail::Node>& handle() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  friend Tensor make_tensor(std::shared_ptr<detail::Node> node);

  std::shared_ptr<detail::Node> node_;
};

Tensor make_tensor(std::shared_ptr<detail::Node> node);

// Append-only list of operation nodes; inputs always precede their consumers.
class ComputationRecord {
 public:
  void append(std::shared_ptr<detail::Node> node) { nodes_.push_back(std::move(node)); }
  std::size_t size() const { return nodes_.size(); }

  // Seeds d(loss)/d(loss) = 1, runs the reverse sweep, then clears the record.
  void backward(const Tensor& loss);
  void clear() { nodes_.clear(); }

 private:
  std::vector<std::shared_ptr<detail::Node>> nodes_;
};

ComputationRecord* active_record();

// Makes `record` the active record on this thread for the scope's lifetime.
class RecordScope {
 public:
  explicit RecordScope(ComputationRecord& record);
  ~RecordScope();
  RecordScope(const RecordScope&) = delete;
  RecordScope& operator=(const RecordScope&) = delete;

 private:
  ComputationRecord* previous_;
};

// Disables recording on this thread (inference).
class NoRecordScope {
 public:
  NoRecordScope();
  ~NoRecordScope();
  NoRecordScope(const NoRecordScope&) = delete;
  NoRecordScope& operator=(const NoRecordScope&) = delete;

 private:
  ComputationRecord* previous_;
};

// Flushes subnormal results and inputs to zero on this thread while alive.
class FlushSubnormalsScope {
 public:
  FlushSubnormalsScope();
  ~FlushSubnormalsScope();
  FlushSubnormalsScope(const FlushSubnormalsScope&) = delete;
  FlushSubnormalsScope& operator=(const FlushSubnormalsScope&) = delete;

 private:
  unsigned int saved_ = 0;
};

}  // namespace refine
