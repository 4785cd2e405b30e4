#include "refine/tensor.hpp"

#include <sstream>

#if defined(__SSE__)
#include <xmmintrin.h>
#endif

namespace refine {

namespace {
thread_local ComputationRecord* t_active = nullptr;
}

std::string shape_string(Index rows, Index cols) {
  std::ostringstream os;
  os << "[" << rows << "x" << cols << "]";
  return os.str();
}

Tensor::Tensor(Matrix value, bool requires_grad) : node_(std::make_shared<detail::Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Index rows, Index cols, bool requires_grad) {
  return Tensor(Matrix::Zero(rows, cols), requires_grad);
}

Tensor Tensor::scalar(Scalar v) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return Tensor(std::move(m));
}

Matrix Tensor::grad() const {
  if (has_grad()) return node_->grad;
  return Matrix::Zero(rows(), cols());
}

Scalar Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_string(rows(), cols()));
  return node_->value(0, 0);
}

Tensor make_tensor(std::shared_ptr<detail::Node> node) { return Tensor(std::move(node)); }

void ComputationRecord::backward(const Tensor& loss) {
  if (loss.size() != 1)
    throw ShapeError("backward() needs a scalar loss, got " + shape_string(loss.rows(), loss.cols()));
  auto* root = loss.handle().get();
  if (root->requires_grad) {
    root->accumulate(Matrix::Ones(1, 1));
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      detail::Node& n = **it;
      if (n.backward && n.grad.size() != 0) n.backward();
#ifndef NDEBUG
      if (n.grad.size() != 0 && !n.grad.allFinite())
        throw std::runtime_error(std::string("non-finite gradient at ") + n.op);
#endif
    }
  }
  clear();
}

ComputationRecord* active_record() { return t_active; }

RecordScope::RecordScope(ComputationRecord& record) : previous_(t_active) { t_active = &record; }
RecordScope::~RecordScope() { t_active = previous_; }

NoRecordScope::NoRecordScope() : previous_(t_active) { t_active = nullptr; }
NoRecordScope::~NoRecordScope() { t_active = previous_; }

#if defined(__SSE__)
// FTZ (bit 15) and DAZ (bit 6) of MXCSR.
constexpr unsigned int kFlushBits = 0x8040;
FlushSubnormalsScope::FlushSubnormalsScope() : saved_(_mm_getcsr()) { _mm_setcsr(saved_ | kFlushBits); }
FlushSubnormalsScope::~FlushSubnormalsScope() { _mm_setcsr(saved_); }
#else
FlushSubnormalsScope::FlushSubnormalsScope() = default;
FlushSubnormalsScope::~FlushSubnormalsScope() = default;
#endif

}  // namespace refine
