#include "videodirector/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "videodirector/error.hpp"

namespace vdir::ag {

const NDArray& Var::value() const { return tape->value(*this); }

Var Tape::constant(NDArray value) { return push(std::move(value), false, nullptr); }

Var Tape::variable(NDArray value) { return push(std::move(value), true, nullptr); }

Var Tape::push(NDArray value, bool requires_grad, Backward backward) {
  nodes_.push_back(Node{std::move(value), NDArray{}, requires_grad,
                        requires_grad ? std::move(backward) : Backward{}});
  return Var{this, nodes_.size() - 1};
}

NDArray& Tape::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = NDArray::like(n.value);
  return n.grad;
}

void Tape::accumulate(std::size_t id, const NDArray& g) {
  if (!nodes_[id].requires_grad) return;
  NDArray& buf = grad_buffer(id);
  const double* src = g.data();
  double* dst = buf.data();
  for (std::size_t i = 0; i < buf.size(); ++i) dst[i] += src[i];
}

NDArray Tape::grad(Var v) const {
  const Node& n = nodes_[v.id];
  return n.grad.empty() ? NDArray::like(n.value) : n.grad;
}

void Tape::zero_grad() {
  for (Node& n : nodes_) n.grad = NDArray{};
}

void Tape::backward(Var out, const NDArray& seed) {
  require(seed.size() == value(out).size(), ErrorKind::shape, "backward seed shape mismatch");
  accumulate(out.id, seed.reshaped(value(out).shape()));
  for (std::size_t i = out.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    // Callbacks only touch earlier nodes and never push, so n stays valid.
    if (n.backward && !n.grad.empty()) n.backward(*this, n.grad);
  }
}

namespace kernels {

void matmul(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
            std::size_t n, bool transpose_b, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  if (transpose_b) {
    for (std::size_t i = 0; i < m; ++i) {
      const double* ar = a + i * k;
      double* cr = c + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        const double* br = b + j * k;
        double s = 0.0;
        for (std::size_t p = 0; p < k; ++p) s += ar[p] * br[p];
        cr[j] += s;
      }
    }
  } else {
    for (std::size_t i = 0; i < m; ++i) {
      const double* ar = a + i * k;
      double* cr = c + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = ar[p];
        if (av == 0.0) continue;
        const double* br = b + p * n;
        for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
      }
    }
  }
}

// out (k, n) += a(m, k)^T * c(m, n)
void matmul_tn(const double* a, const double* c, double* out, std::size_t m, std::size_t k,
               std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ar = a + i * k;
    const double* cr = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ar[p];
      if (av == 0.0) continue;
      double* orow = out + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * cr[j];
    }
  }
}

NDArray permute(const NDArray& a, const std::vector<std::size_t>& axes) {
  const std::size_t nd = a.ndim();
  require(axes.size() == nd, ErrorKind::shape, "permute rank mismatch");
  Shape out_shape(nd);
  std::vector<std::size_t> in_strides(nd, 1);
  for (std::size_t i = nd; i-- > 1;) in_strides[i - 1] = in_strides[i] * a.dim(i);
  std::vector<std::size_t> src_stride(nd);
  for (std::size_t i = 0; i < nd; ++i) {
    out_shape[i] = a.dim(axes[i]);
    src_stride[i] = in_strides[axes[i]];
  }
  NDArray out(out_shape);
  const std::size_t total = out.size();
  if (total == 0) return out;
  // Innermost axis handled as a strided run.
  const std::size_t inner = out_shape[nd - 1];
  const std::size_t inner_stride = src_stride[nd - 1];
  std::vector<std::size_t> idx(nd, 0);
  const double* src = a.data();
  double* dst = out.data();
  for (std::size_t o = 0; o < total; o += inner) {
    std::size_t base = 0;
    for (std::size_t i = 0; i + 1 < nd; ++i) base += idx[i] * src_stride[i];
    for (std::size_t j = 0; j < inner; ++j) dst[o + j] = src[base + j * inner_stride];
    for (std::size_t i = nd - 1; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  return out;
}

void softmax_rows(double* data, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = data + r * cols;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < cols; ++j) mx = std::max(mx, row[j]);
    require(std::isfinite(mx), ErrorKind::validation, "softmax row has every entry masked");
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      row[j] = std::exp(row[j] - mx);
      s += row[j];
    }
    const double inv = 1.0 / s;
    for (std::size_t j = 0; j < cols; ++j) row[j] *= inv;
  }
}

}  // namespace kernels

namespace {

Tape& tape_of(Var a, Var b) {
  require(a.tape == b.tape, ErrorKind::validation, "vars from different tapes");
  return *a.tape;
}

bool any_grad(Tape& t, Var a, Var b) { return t.requires_grad(a) || t.requires_grad(b); }

}  // namespace

Var add(Var a, Var b) {
  Tape& t = tape_of(a, b);
  NDArray out = t.value(a) + t.value(b);
  return t.push(std::move(out), any_grad(t, a, b), [a, b](Tape& tp, const NDArray& g) {
    tp.accumulate(a.id, g);
    tp.accumulate(b.id, g);
  });
}

Var sub(Var a, Var b) {
  Tape& t = tape_of(a, b);
  NDArray out = t.value(a) - t.value(b);
  return t.push(std::move(out), any_grad(t, a, b), [a, b](Tape& tp, const NDArray& g) {
    tp.accumulate(a.id, g);
    if (tp.requires_grad(b)) tp.accumulate(b.id, g * -1.0);
  });
}

Var mul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const NDArray& av = t.value(a);
  const NDArray& bv = t.value(b);
  check_same_shape(av, bv, "mul");
  NDArray out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return t.push(std::move(out), any_grad(t, a, b), [a, b](Tape& tp, const NDArray& g) {
    if (tp.requires_grad(a)) {
      NDArray& ga = tp.grad_buffer(a.id);
      const NDArray& bv = tp.value(b);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (tp.requires_grad(b)) {
      NDArray& gb = tp.grad_buffer(b.id);
      const NDArray& av = tp.value(a);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double s) {
  Tape& t = *a.tape;
  return t.push(t.value(a) * s, t.requires_grad(a),
                [a, s](Tape& tp, const NDArray& g) { tp.accumulate(a.id, g * s); });
}

Var add_tiled(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const NDArray& av = t.value(a);
  const NDArray& bv = t.value(b);
  const std::size_t nb = bv.size();
  require(nb > 0 && av.size() % nb == 0, ErrorKind::shape,
          "add_tiled: " + shape_str(bv.shape()) + " does not tile " + shape_str(av.shape()));
  NDArray out = av;
  for (std::size_t i = 0; i < out.size(); i += nb) {
    for (std::size_t j = 0; j < nb; ++j) out[i + j] += bv[j];
  }
  return t.push(std::move(out), any_grad(t, a, b), [a, b, nb](Tape& tp, const NDArray& g) {
    tp.accumulate(a.id, g);
    if (tp.requires_grad(b)) {
      NDArray& gb = tp.grad_buffer(b.id);
      for (std::size_t i = 0; i < g.size(); i += nb) {
        for (std::size_t j = 0; j < nb; ++j) gb[j] += g[i + j];
      }
    }
  });
}

Var add_mid_broadcast(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const NDArray& av = t.value(a);
  const NDArray& bv = t.value(b);
  require(av.ndim() == 3 && bv.ndim() == 2 && bv.dim(0) == av.dim(0) && bv.dim(1) == av.dim(2),
          ErrorKind::shape, "add_mid_broadcast shape mismatch");
  const std::size_t na = av.dim(0), nm = av.dim(1), nc = av.dim(2);
  NDArray out = av;
  for (std::size_t i = 0; i < na; ++i)
    for (std::size_t m = 0; m < nm; ++m)
      for (std::size_t c = 0; c < nc; ++c) out[(i * nm + m) * nc + c] += bv[i * nc + c];
  return t.push(std::move(out), any_grad(t, a, b),
                [a, b, na, nm, nc](Tape& tp, const NDArray& g) {
                  tp.accumulate(a.id, g);
                  if (tp.requires_grad(b)) {
                    NDArray& gb = tp.grad_buffer(b.id);
                    for (std::size_t i = 0; i < na; ++i)
                      for (std::size_t m = 0; m < nm; ++m)
                        for (std::size_t c = 0; c < nc; ++c)
                          gb[i * nc + c] += g[(i * nm + m) * nc + c];
                  }
                });
}

Var reshape(Var a, Shape shape) {
  Tape& t = *a.tape;
  NDArray out = t.value(a).reshaped(std::move(shape));
  return t.push(std::move(out), t.requires_grad(a), [a](Tape& tp, const NDArray& g) {
    tp.accumulate(a.id, g.reshaped(tp.value(a).shape()));
  });
}

Var permute(Var a, const std::vector<std::size_t>& axes) {
  Tape& t = *a.tape;
  NDArray out = kernels::permute(t.value(a), axes);
  std::vector<std::size_t> inverse(axes.size());
  for (std::size_t i = 0; i < axes.size(); ++i) inverse[axes[i]] = i;
  return t.push(std::move(out), t.requires_grad(a), [a, inverse](Tape& tp, const NDArray& g) {
    tp.accumulate(a.id, kernels::permute(g, inverse));
  });
}

Var matmul(Var a, Var b, bool transpose_b) {
  Tape& t = tape_of(a, b);
  const NDArray& av = t.value(a);
  const NDArray& bv = t.value(b);
  require(av.ndim() >= 2 && bv.ndim() >= 2, ErrorKind::shape, "matmul needs rank >= 2");
  const std::size_t m = av.dim(av.ndim() - 2);
  const std::size_t k = av.dim(av.ndim() - 1);
  const std::size_t n = transpose_b ? bv.dim(bv.ndim() - 2) : bv.dim(bv.ndim() - 1);
  const std::size_t bk = transpose_b ? bv.dim(bv.ndim() - 1) : bv.dim(bv.ndim() - 2);
  require(k == bk, ErrorKind::shape,
          "matmul inner dims: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  const std::size_t batch = av.size() / (m * k);
  const std::size_t b_batch = bv.size() / (k * n);
  const bool shared = (b_batch == 1 && bv.ndim() == 2);
  require(shared || b_batch == batch, ErrorKind::shape, "matmul batch mismatch");

  Shape out_shape(av.shape().begin(), av.shape().end() - 1);
  out_shape.push_back(n);
  NDArray out(out_shape);
  for (std::size_t i = 0; i < batch; ++i) {
    kernels::matmul(av.data() + i * m * k, bv.data() + (shared ? 0 : i * k * n),
                    out.data() + i * m * n, m, k, n, transpose_b, false);
  }
  return t.push(
      std::move(out), any_grad(t, a, b),
      [a, b, m, k, n, batch, shared, transpose_b](Tape& tp, const NDArray& g) {
        const NDArray& av = tp.value(a);
        const NDArray& bv = tp.value(b);
        if (tp.requires_grad(a)) {
          NDArray& ga = tp.grad_buffer(a.id);
          for (std::size_t i = 0; i < batch; ++i) {
            const double* gi = g.data() + i * m * n;
            const double* bi = bv.data() + (shared ? 0 : i * k * n);
            // transpose_b: dA = dC * B ; else dA = dC * B^T
            kernels::matmul(gi, bi, ga.data() + i * m * k, m, n, k, !transpose_b, true);
          }
        }
        if (tp.requires_grad(b)) {
          NDArray& gb = tp.grad_buffer(b.id);
          for (std::size_t i = 0; i < batch; ++i) {
            const double* gi = g.data() + i * m * n;
            const double* ai = av.data() + i * m * k;
            double* gbi = gb.data() + (shared ? 0 : i * k * n);
            if (transpose_b) {
              kernels::matmul_tn(gi, ai, gbi, m, n, k);  // (n,k) += dC^T A
            } else {
              kernels::matmul_tn(ai, gi, gbi, m, k, n);  // (k,n) += A^T dC
            }
          }
        }
      });
}

Var linear(Var x, Var w) {
  const Shape xs = x.shape();
  const std::size_t in = xs.back();
  require(w.shape().size() == 2 && w.shape()[0] == in, ErrorKind::shape, "linear weight shape");
  const std::size_t rows = x.value().size() / in;
  Var flat = reshape(x, {rows, in});
  Var y = matmul(flat, w);
  Shape ys = xs;
  ys.back() = w.shape()[1];
  return reshape(y, ys);
}

Var linear(Var x, Var w, Var bias) { return add_tiled(linear(x, w), bias); }

Var softmax(Var a) { return softmax(a, NDArray{}); }

Var softmax(Var a, const NDArray& additive) {
  Tape& t = *a.tape;
  NDArray out = t.value(a);
  if (!additive.empty()) {
    const std::size_t nb = additive.size();
    require(out.size() % nb == 0, ErrorKind::shape, "softmax mask does not tile logits");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += additive[i % nb];
  }
  const std::size_t cols = out.shape().back();
  kernels::softmax_rows(out.data(), out.size() / cols, cols);
  const std::size_t id_self = t.size();
  return t.push(std::move(out), t.requires_grad(a),
                [a, cols, id_self](Tape& tp, const NDArray& g) {
                  const NDArray& y = tp.value(Var{&tp, id_self});
                  NDArray& ga = tp.grad_buffer(a.id);
                  for (std::size_t r = 0; r < y.size(); r += cols) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < cols; ++j) s += g[r + j] * y[r + j];
                    for (std::size_t j = 0; j < cols; ++j) ga[r + j] += y[r + j] * (g[r + j] - s);
                  }
                });
}

Var layer_norm(Var a, Var gain, Var bias, double eps) {
  Tape& t = *a.tape;
  const NDArray& x = t.value(a);
  const std::size_t cols = x.shape().back();
  require(t.value(gain).size() == cols && t.value(bias).size() == cols, ErrorKind::shape,
          "layer_norm parameter shape");
  const std::size_t rows = x.size() / cols;
  NDArray xhat = NDArray::like(x);
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * cols;
    double mean = 0.0;
    for (std::size_t j = 0; j < cols; ++j) mean += xr[j];
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t j = 0; j < cols; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(cols);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < cols; ++j) xhat[r * cols + j] = (xr[j] - mean) * inv_std[r];
  }
  const NDArray& gv = t.value(gain);
  const NDArray& bv = t.value(bias);
  NDArray out = NDArray::like(x);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < cols; ++j)
      out[r * cols + j] = xhat[r * cols + j] * gv[j] + bv[j];
  const bool rg = t.requires_grad(a) || t.requires_grad(gain) || t.requires_grad(bias);
  return t.push(
      std::move(out), rg,
      [a, gain, bias, cols, rows, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](Tape& tp, const NDArray& g) {
        const NDArray& gv = tp.value(gain);
        if (tp.requires_grad(gain) || tp.requires_grad(bias)) {
          NDArray dg({cols}), db({cols});
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < cols; ++j) {
              dg[j] += g[r * cols + j] * xhat[r * cols + j];
              db[j] += g[r * cols + j];
            }
          tp.accumulate(gain.id, dg);
          tp.accumulate(bias.id, db);
        }
        if (tp.requires_grad(a)) {
          NDArray& ga = tp.grad_buffer(a.id);
          const double inv_n = 1.0 / static_cast<double>(cols);
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t j = 0; j < cols; ++j) {
              const double d = g[r * cols + j] * gv[j];
              mean_d += d;
              mean_dx += d * xhat[r * cols + j];
            }
            mean_d *= inv_n;
            mean_dx *= inv_n;
            for (std::size_t j = 0; j < cols; ++j) {
              const double d = g[r * cols + j] * gv[j];
              ga[r * cols + j] += inv_std[r] * (d - mean_d - xhat[r * cols + j] * mean_dx);
            }
          }
        }
      });
}

Var gelu(Var a) {
  Tape& t = *a.tape;
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  const NDArray& x = t.value(a);
  NDArray out = NDArray::like(x);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    out[i] = 0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v)));
  }
  return t.push(std::move(out), t.requires_grad(a), [a](Tape& tp, const NDArray& g) {
    const NDArray& x = tp.value(a);
    NDArray& ga = tp.grad_buffer(a.id);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double v = x[i];
      const double th = std::tanh(kC * (v + kA * v * v * v));
      const double d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * kC * (1.0 + 3.0 * kA * v * v);
      ga[i] += g[i] * d;
    }
  });
}

}  // namespace vdir::ag
