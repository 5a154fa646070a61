#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "videodirector/ndarray.hpp"

// Minimal reverse-mode differentiation over NDArray values. A Tape records
// nodes in creation order; backward walks them in reverse.
namespace vdir::ag {

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const NDArray& value() const;
  const Shape& shape() const { return value().shape(); }
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const NDArray& grad)>;

  Var constant(NDArray value);
  Var variable(NDArray value);

  const NDArray& value(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // Gradient accumulated by backward(); zeros if the node received none.
  NDArray grad(Var v) const;

  // Propagates `seed` (shaped like `out`) into every upstream node.
  void backward(Var out, const NDArray& seed);
  void zero_grad();

  std::size_t size() const noexcept { return nodes_.size(); }

  // Used by op implementations.
  Var push(NDArray value, bool requires_grad, Backward backward);
  void accumulate(std::size_t id, const NDArray& g);
  NDArray& grad_buffer(std::size_t id);

 private:
  struct Node {
    NDArray value;
    NDArray grad;
    bool requires_grad = false;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
// a + b with b tiled cyclically; a.size() must be a multiple of b.size().
Var add_tiled(Var a, Var b);
// a (A, B, C) + b (A, C) broadcast over the middle axis.
Var add_mid_broadcast(Var a, Var b);

Var reshape(Var a, Shape shape);
Var permute(Var a, const std::vector<std::size_t>& axes);

// Batched matmul. a: (batch..., m, k). b: (batch..., k, n) or shared (k, n).
// With transpose_b, b is (batch..., n, k) or shared (n, k).
Var matmul(Var a, Var b, bool transpose_b = false);
// x (..., in) * w (in, out) + bias (out)
Var linear(Var x, Var w, Var bias);
Var linear(Var x, Var w);

// Softmax over the last axis. `additive` (tiled like add_tiled) is a constant
// logit offset; -inf entries exclude keys.
Var softmax(Var a);
Var softmax(Var a, const NDArray& additive);

Var layer_norm(Var a, Var gain, Var bias, double eps = 1e-5);
Var gelu(Var a);

// Plain-array kernels shared with non-differentiable code paths.
namespace kernels {
void matmul(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
            std::size_t n, bool transpose_b, bool accumulate);
NDArray permute(const NDArray& a, const std::vector<std::size_t>& axes);
void softmax_rows(double* data, std::size_t rows, std::size_t cols);
}  // namespace kernels

}  // namespace vdir::ag
