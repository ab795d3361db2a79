#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "uconv/error.hpp"
#include "uconv/rng.hpp"
#include "uconv/tensor.hpp"

namespace uconv {

// Reverse-mode autodiff over a linear tape. A Var is a value plus the index
// of its tape node (-1 when untracked). Ops append one node per output; the
// node's closure routes the output gradient to the inputs. Running with a
// null tape skips recording entirely, so inference holds no graph.

template <typename T>
class Tape;

template <typename T>
struct Var {
  Tensor<T> value;
  int64_t node = -1;

  Var() = default;
  explicit Var(Tensor<T> v, int64_t n = -1) : value(std::move(v)), node(n) {}
  bool tracked() const { return node >= 0; }
};

// Trainable tensor with a persistent gradient buffer. Gradients accumulate
// across backward calls until zero_grad.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v)
      : name(std::move(n)), value(std::move(v)) {}

  void ensure_grad() {
    if (!grad.defined()) grad = Tensor<T>(value.shape());
  }
  void zero_grad() {
    if (grad.defined()) grad.fill(T(0));
  }
};

template <typename T>
class Tape {
 public:
  using BackFn = std::function<void(Tape<T>&, const Tensor<T>&)>;

  int64_t add_node(Shape shape, BackFn back) {
    nodes_.push_back(Node{std::move(shape), std::move(back), Tensor<T>()});
    return static_cast<int64_t>(nodes_.size()) - 1;
  }

  // Accumulates g into the gradient buffer of `node`. No-op for untracked.
  void acc(int64_t node, const Tensor<T>& g) {
    if (node < 0) return;
    Tensor<T>& buf = grad_buf(node, g.shape());
    T* dst = buf.data();
    const T* src = g.data();
    const int64_t n = g.numel();
    for (int64_t i = 0; i < n; ++i) dst[i] += src[i];
  }

  void acc_scaled(int64_t node, T alpha, const Tensor<T>& g) {
    if (node < 0) return;
    Tensor<T>& buf = grad_buf(node, g.shape());
    T* dst = buf.data();
    const T* src = g.data();
    const int64_t n = g.numel();
    for (int64_t i = 0; i < n; ++i) dst[i] += alpha * src[i];
  }

  // Raw buffer access for backwards that write gradients with kernels.
  Tensor<T>& grad_buf(int64_t node, const Shape& expect) {
    Node& nd = nodes_.at(static_cast<size_t>(node));
    if (nd.shape != expect) {
      throw ShapeError("gradient shape " + shape_str(expect) +
                       " does not match node shape " + shape_str(nd.shape));
    }
    if (!nd.grad.defined()) nd.grad = Tensor<T>(nd.shape);
    return nd.grad;
  }

  const Tensor<T>* grad_of(int64_t node) const {
    if (node < 0) return nullptr;
    const Node& nd = nodes_.at(static_cast<size_t>(node));
    return nd.grad.defined() ? &nd.grad : nullptr;
  }

  // Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse. Leaf closures
  // deposit into Parameter::grad on the way down.
  void backward(const Var<T>& loss) {
    if (!loss.tracked()) throw StateError("backward on an untracked variable");
    if (loss.value.numel() != 1) {
      throw ShapeError("backward needs a scalar, got " +
                       shape_str(loss.value.shape()));
    }
    if (swept_) {
      throw StateError("backward called twice on the same tape; reset first");
    }
    swept_ = true;
    acc(loss.node, Tensor<T>::full(loss.value.shape(), T(1)));
    for (int64_t i = static_cast<int64_t>(nodes_.size()) - 1; i >= 0; --i) {
      Node& nd = nodes_[static_cast<size_t>(i)];
      if (!nd.grad.defined()) continue;
      if (nd.back) nd.back(*this, nd.grad);
    }
  }

  void reset() {
    nodes_.clear();
    swept_ = false;
  }

  int64_t size() const { return static_cast<int64_t>(nodes_.size()); }
  bool swept() const { return swept_; }

 private:
  struct Node {
    Shape shape;
    BackFn back;
    Tensor<T> grad;
  };
  std::vector<Node> nodes_;
  bool swept_ = false;
};

// Registers a parameter as a tape leaf. The parameter must outlive the tape
// sweep; its grad buffer receives the accumulated gradient.
template <typename T>
Var<T> watch(Tape<T>& tape, Parameter<T>& p) {
  p.ensure_grad();
  Parameter<T>* pp = &p;
  const int64_t id = tape.add_node(
      p.value.shape(), [pp](Tape<T>&, const Tensor<T>& g) {
        T* dst = pp->grad.data();
        const T* src = g.data();
        const int64_t n = g.numel();
        for (int64_t i = 0; i < n; ++i) dst[i] += src[i];
      });
  return Var<T>(p.value, id);
}

// Everything an op needs at call time. tape == nullptr disables recording;
// training gates dropout; rng drives it.
template <typename T>
struct Ctx {
  Tape<T>* tape = nullptr;
  bool training = false;
  Rng* rng = nullptr;

  bool recording() const { return tape != nullptr; }
};

// Parameter as an op input: a fresh leaf when recording, a plain value view
// otherwise.
template <typename T>
Var<T> param_var(Ctx<T>& ctx, Parameter<T>& p) {
  return ctx.recording() ? watch(*ctx.tape, p) : Var<T>(p.value);
}

}  // namespace uconv
