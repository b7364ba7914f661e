// Copyright (c) 2026, the elab authors
// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode automatic differentiation over dense row-major tensors.
//
// A Tape owns every intermediate value. Ops append a node holding the value,
// its shape and a closure that pushes the node's gradient into its operands.
// Because a node can only reference nodes that already exist, insertion order
// is a topological order and backward() is a single reverse sweep.

#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "elab/error.hpp"
#include "elab/tensor.hpp"

namespace elab::ad {

template <std::floating_point T>
class Tape;

/// Handle to a node on a tape.
template <std::floating_point T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Shape& shape() const { return tape_->shape(*this); }
  std::size_t size() const { return tape_->value(*this).size(); }
  std::span<const T> value() const { return tape_->value(*this); }
  std::span<const T> grad() const { return tape_->grad(*this); }
  T item() const { return tape_->value(*this)[0]; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <std::floating_point T>
class Tape {
 public:
  using Backward = std::function<void(Tape&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf holding a copy of `t`; gradients accumulate on the tape, not in `t`.
  Var<T> leaf(const Tensor<T>& t, bool requires_grad = true) {
    return push(t.shape(), std::vector<T>(t.data().begin(), t.data().end()), requires_grad, {});
  }
  Var<T> constant(Shape shape, std::vector<T> values) {
    if (values.size() != shape_size(shape)) throw DimensionError("constant: data/shape mismatch");
    return push(std::move(shape), std::move(values), false, {});
  }
  Var<T> scalar(T v) { return constant({1}, {v}); }

  /// Records a custom op. `backward` is only kept when some operand needs gradients.
  Var<T> record(Shape shape, std::vector<T> value, std::initializer_list<Var<T>> operands, Backward backward) {
    bool needs = false;
    for (const auto& v : operands) needs = needs || nodes_[v.id()].requires_grad;
    if (check_finite_ && !all_finite<T>(value)) throw NumericError("non-finite value produced on tape");
    return push(std::move(shape), std::move(value), needs, needs ? std::move(backward) : Backward{});
  }
  Var<T> record(Shape shape, std::vector<T> value, std::span<const Var<T>> operands, Backward backward) {
    bool needs = false;
    for (const auto& v : operands) needs = needs || nodes_[v.id()].requires_grad;
    if (check_finite_ && !all_finite<T>(value)) throw NumericError("non-finite value produced on tape");
    return push(std::move(shape), std::move(value), needs, needs ? std::move(backward) : Backward{});
  }

  const Shape& shape(Var<T> v) const { return nodes_[v.id()].shape; }
  std::span<const T> value(Var<T> v) const { return nodes_[v.id()].value; }
  bool requires_grad(Var<T> v) const { return nodes_[v.id()].requires_grad; }

  /// Gradient of the last backward() target w.r.t. `v`; zeros if unreachable.
  std::span<const T> grad(Var<T> v) const {
    const auto& n = nodes_[v.id()];
    if (n.grad.empty()) {
      zero_scratch_.assign(n.value.size(), T{0});
      return zero_scratch_;
    }
    return n.grad;
  }

  /// Mutable gradient buffer of `v`, allocated on demand. For use inside backward closures.
  std::span<T> grad_buffer(Var<T> v) {
    auto& n = nodes_[v.id()];
    if (n.grad.empty()) n.grad.assign(n.value.size(), T{0});
    return n.grad;
  }
  bool has_grad(Var<T> v) const { return !nodes_[v.id()].grad.empty(); }

  void backward(Var<T> loss) {
    if (loss.size() != 1) throw ContractError("backward: loss must be a scalar, got shape " + shape_str(shape(loss)));
    for (auto& n : nodes_) n.grad.clear();
    grad_buffer(loss)[0] = T{1};
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (n.backward && !n.grad.empty()) n.backward(*this);
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  void set_check_finite(bool on) noexcept { check_finite_ = on; }

 private:
  struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    Backward backward;
  };

  Var<T> push(Shape shape, std::vector<T> value, bool requires_grad, Backward backward) {
    nodes_.push_back(Node{std::move(shape), std::move(value), {}, requires_grad, std::move(backward)});
    return Var<T>(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  mutable std::vector<T> zero_scratch_;
  bool check_finite_ = true;
};

// ---------------------------------------------------------------------------
// Dense kernels. All pointers are row-major, accumulate into C.

namespace kernel {

/// C[m,n] += A[m,k] * B[k,n]
template <class T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    const T* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ai[p];
      if (av == T{0}) continue;
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

/// C[m,n] += A[m,k] * B[n,k]^T
template <class T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* bj = b + j * k;
      T s{0};
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      c[i * n + j] += s;
    }
  }
}

/// C[k,n] += A[m,k]^T * B[m,n]
template <class T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    const T* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ai[p];
      if (av == T{0}) continue;
      T* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

}  // namespace kernel

namespace detail {

template <class T>
void require_same_shape(Var<T> a, Var<T> b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <class T>
void require_rank2(Var<T> a, const char* op) {
  if (a.shape().size() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
}

template <class T>
void require_input_finite(Var<T> a, const char* op) {
  if (!all_finite<T>(a.value())) throw NumericError(std::string(op) + ": non-finite input");
}

template <class T>
void add_into(std::span<T> dst, std::span<const T> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Ops

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k)
    throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<T> out(m * n, T{0});
  kernel::gemm_nn(m, k, n, a.value().data(), b.value().data(), out.data());
  return a.tape().record({m, n}, std::move(out), {a, b}, [a, b, m, k, n, self = a.tape().size()](Tape<T>& t) {
    const auto g = t.grad(Var<T>(&t, self));
    if (t.requires_grad(a)) kernel::gemm_nt(m, n, k, g.data(), b.value().data(), t.grad_buffer(a).data());
    if (t.requires_grad(b)) kernel::gemm_tn(m, k, n, a.value().data(), g.data(), t.grad_buffer(b).data());
  });
}

/// a[m,k] * b[n,k]^T
template <class T>
Var<T> matmul_bt(Var<T> a, Var<T> b) {
  detail::require_rank2(a, "matmul_bt");
  detail::require_rank2(b, "matmul_bt");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  if (b.shape()[1] != k)
    throw DimensionError("matmul_bt: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  std::vector<T> out(m * n, T{0});
  kernel::gemm_nt(m, k, n, a.value().data(), b.value().data(), out.data());
  return a.tape().record({m, n}, std::move(out), {a, b}, [a, b, m, k, n, self = a.tape().size()](Tape<T>& t) {
    const auto g = t.grad(Var<T>(&t, self));
    if (t.requires_grad(a)) kernel::gemm_nn(m, n, k, g.data(), b.value().data(), t.grad_buffer(a).data());
    if (t.requires_grad(b)) kernel::gemm_tn(m, n, k, g.data(), a.value().data(), t.grad_buffer(b).data());
  });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.value().begin(), a.value().end());
  detail::add_into<T>(out, b.value());
  return a.tape().record(a.shape(), std::move(out), {a, b}, [a, b, self = a.tape().size()](Tape<T>& t) {
    const auto g = t.grad(Var<T>(&t, self));
    if (t.requires_grad(a)) detail::add_into(t.grad_buffer(a), g);
    if (t.requires_grad(b)) detail::add_into(t.grad_buffer(b), g);
  });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  return a.tape().record(a.shape(), std::move(out), {a, b}, [a, b, self = a.tape().size()](Tape<T>& t) {
    const auto g = t.grad(Var<T>(&t, self));
    if (t.requires_grad(a)) detail::add_into(t.grad_buffer(a), g);
    if (t.requires_grad(b)) {
      auto gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
    }
  });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return a.tape().record(a.shape(), std::move(out), {a, b}, [a, b, self = a.tape().size()](Tape<T>& t) {
    const auto g = t.grad(Var<T>(&t, self));
    if (t.requires_grad(a)) {
      auto ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * b.value()[i];
    }
    if (t.requires_grad(b)) {
      auto gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * a.value()[i];
    }
  });
}

template <class T>
Var<T> scale(Var<T> a, T c) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * c;
  return a.tape().record(a.shape(), std::move(out), {a}, [a, c, self = a.tape().size()](Tape<T>& t) {
    const auto g = t.grad(Var<T>(&t, self));
    auto ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * c;
  });
}

/// x[m,n] + bias[n] broadcast over rows.
template <class T>
Var<T> add_bias(Var<T> x, Var<T> bias) {
  detail::require_rank2(x, "add_bias");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  if (bias.size() != n) throw DimensionError("add_bias: bias length must equal column count");
  std::vector<T> out(x.value().begin(), x.value().end());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bias.value()[j];
  return x.tape().record(x.shape(), std::move(out), {x, bias}, [x, bias, m, n, self = x.tape().size()](Tape<T>& t) {
    const auto g = t.grad(Var<T>(&t, self));
    if (t.requires_grad(x)) detail::add_into(t.grad_buffer(x), g);
    if (t.requires_grad(bias)) {
      auto gb = t.grad_buffer(bias);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
    }
  });
}

template <class T>
Var<T> exp(Var<T> a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.value()[i]);
  const std::size_t self = a.tape().size();
  return a.tape().record(a.shape(), std::move(out), {a}, [a, self](Tape<T>& t) {
    const Var<T> y(&t, self);
    const auto g = t.grad(y);
    const auto yv = y.value();
    auto ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * yv[i];
  });
}

/// log(1 + e^a), evaluated without overflow.
template <class T>
Var<T> softplus(Var<T> a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = a.value()[i];
    out[i] = std::max(x, T{0}) + std::log1p(std::exp(-std::abs(x)));
  }
  return a.tape().record(a.shape(), std::move(out), {a}, [a, self = a.tape().size()](Tape<T>& t) {
    const auto g = t.grad(Var<T>(&t, self));
    auto ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] / (T{1} + std::exp(-a.value()[i]));
  });
}

template <class T>
Var<T> square(Var<T> a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * a.value()[i];
  return a.tape().record(a.shape(), std::move(out), {a}, [a, self = a.tape().size()](Tape<T>& t) {
    const auto g = t.grad(Var<T>(&t, self));
    auto ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += T{2} * a.value()[i] * g[i];
  });
}

/// Elementwise clamp to [lo, hi]; gradient passes only strictly inside the interval.
template <class T>
Var<T> clamp(Var<T> a, T lo, T hi) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(a.value()[i], lo, hi);
  return a.tape().record(a.shape(), std::move(out), {a}, [a, lo, hi, self = a.tape().size()](Tape<T>& t) {
    const auto g = t.grad(Var<T>(&t, self));
    auto ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < ga.size(); ++i) {
      const T v = a.value()[i];
      if (v > lo && v < hi) ga[i] += g[i];
    }
  });
}

/// Elementwise minimum; ties route the gradient to `a`.
template <class T>
Var<T> minimum(Var<T> a, Var<T> b) {
  detail::require_same_shape(a, b, "minimum");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(a.value()[i], b.value()[i]);
  return a.tape().record(a.shape(), std::move(out), {a, b}, [a, b, self = a.tape().size()](Tape<T>& t) {
    const auto g = t.grad(Var<T>(&t, self));
    for (std::size_t i = 0; i < g.size(); ++i) {
      const bool left = a.value()[i] <= b.value()[i];
      if (left && t.requires_grad(a)) t.grad_buffer(a)[i] += g[i];
      if (!left && t.requires_grad(b)) t.grad_buffer(b)[i] += g[i];
    }
  });
}

template <class T>
Var<T> sum(Var<T> a) {
  T s{0};
  for (T v : a.value()) s += v;
  return a.tape().record({1}, {s}, {a}, [a, self = a.tape().size()](Tape<T>& t) {
    const T g = t.grad(Var<T>(&t, self))[0];
    for (auto& v : t.grad_buffer(a)) v += g;
  });
}

template <class T>
Var<T> mean(Var<T> a) {
  if (a.size() == 0) throw DimensionError("mean: empty tensor");
  return scale(sum(a), T{1} / static_cast<T>(a.size()));
}

/// GELU, tanh approximation.
template <class T>
Var<T> gelu(Var<T> a) {
  constexpr T kC = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kA = static_cast<T>(0.044715);
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = a.value()[i];
    out[i] = T{0.5} * x * (T{1} + std::tanh(kC * (x + kA * x * x * x)));
  }
  return a.tape().record(a.shape(), std::move(out), {a}, [a, self = a.tape().size()](Tape<T>& t) {
    const auto g = t.grad(Var<T>(&t, self));
    auto ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < ga.size(); ++i) {
      const T x = a.value()[i];
      const T th = std::tanh(kC * (x + kA * x * x * x));
      const T d = T{0.5} * (T{1} + th) + T{0.5} * x * (T{1} - th * th) * kC * (T{1} + T{3} * kA * x * x);
      ga[i] += g[i] * d;
    }
  });
}

/// Per-row normalization over the last dimension followed by gain and bias.
template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps) {
  if (x.shape().empty()) throw DimensionError("layer_norm: scalar input");
  const std::size_t d = x.shape().back();
  if (d == 0) throw DimensionError("layer_norm: feature dimension is zero");
  if (!(eps > T{0})) throw ContractError("layer_norm: eps must be positive");
  if (gain.size() != d || bias.size() != d) throw DimensionError("layer_norm: gain/bias length must equal d");
  const std::size_t rows = x.size() / d;
  std::vector<T> out(x.size()), xhat(x.size()), rstd(rows);
  const auto xv = x.value();
  const auto gv = gain.value();
  const auto bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * d;
    T mu{0};
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<T>(d);
    T var{0};
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(d);
    const T rs = T{1} / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (xr[j] - mu) * rs;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  return x.tape().record(
      x.shape(), std::move(out), {x, gain, bias},
      [x, gain, bias, d, rows, xhat = std::move(xhat), rstd = std::move(rstd), self = x.tape().size()](Tape<T>& t) {
        const auto g = t.grad(Var<T>(&t, self));
        const auto gv = gain.value();
        if (t.requires_grad(gain) || t.requires_grad(bias)) {
          auto gg = t.requires_grad(gain) ? t.grad_buffer(gain) : std::span<T>{};
          auto gb = t.requires_grad(bias) ? t.grad_buffer(bias) : std::span<T>{};
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) {
              if (!gg.empty()) gg[j] += g[r * d + j] * xhat[r * d + j];
              if (!gb.empty()) gb[j] += g[r * d + j];
            }
        }
        if (t.requires_grad(x)) {
          auto gx = t.grad_buffer(x);
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_dh{0}, mean_dh_h{0};
            for (std::size_t j = 0; j < d; ++j) {
              const T dh = g[r * d + j] * gv[j];
              mean_dh += dh;
              mean_dh_h += dh * xhat[r * d + j];
            }
            mean_dh /= static_cast<T>(d);
            mean_dh_h /= static_cast<T>(d);
            for (std::size_t j = 0; j < d; ++j) {
              const T dh = g[r * d + j] * gv[j];
              gx[r * d + j] += rstd[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
            }
          }
        }
      });
}

/// Row softmax with max subtraction. With `causal`, row i of an [m,n] input
/// only sees columns j <= i + (n - m); masked entries are exactly zero.
template <class T>
Var<T> softmax_rows(Var<T> x, bool causal = false) {
  detail::require_rank2(x, "softmax_rows");
  detail::require_input_finite(x, "softmax_rows");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  if (causal && n < m) throw DimensionError("softmax_rows: causal mask needs n >= m");
  std::vector<T> out(m * n, T{0});
  const auto xv = x.value();
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t width = causal ? i + (n - m) + 1 : n;
    const T* xr = xv.data() + i * n;
    T* yr = out.data() + i * n;
    T mx = xr[0];
    for (std::size_t j = 1; j < width; ++j) mx = std::max(mx, xr[j]);
    T s{0};
    for (std::size_t j = 0; j < width; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      s += yr[j];
    }
    for (std::size_t j = 0; j < width; ++j) yr[j] /= s;
  }
  const std::size_t self = x.tape().size();
  return x.tape().record(x.shape(), std::move(out), {x}, [x, m, n, self](Tape<T>& t) {
    const Var<T> y(&t, self);
    const auto g = t.grad(y);
    const auto yv = y.value();
    auto gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < m; ++i) {
      T dot{0};
      for (std::size_t j = 0; j < n; ++j) dot += yv[i * n + j] * g[i * n + j];
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += yv[i * n + j] * (g[i * n + j] - dot);
    }
  });
}

template <class T>
Var<T> log_softmax_rows(Var<T> x) {
  detail::require_rank2(x, "log_softmax_rows");
  detail::require_input_finite(x, "log_softmax_rows");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  std::vector<T> out(m * n);
  const auto xv = x.value();
  for (std::size_t i = 0; i < m; ++i) {
    const T* xr = xv.data() + i * n;
    const T mx = *std::max_element(xr, xr + n);
    T s{0};
    for (std::size_t j = 0; j < n; ++j) s += std::exp(xr[j] - mx);
    const T lse = mx + std::log(s);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xr[j] - lse;
  }
  const std::size_t self = x.tape().size();
  return x.tape().record(x.shape(), std::move(out), {x}, [x, m, n, self](Tape<T>& t) {
    const Var<T> y(&t, self);
    const auto g = t.grad(y);
    const auto yv = y.value();
    auto gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < m; ++i) {
      T gs{0};
      for (std::size_t j = 0; j < n; ++j) gs += g[i * n + j];
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[i * n + j] - std::exp(yv[i * n + j]) * gs;
    }
  });
}

/// out[i] = x[i, index[i]]
template <class T>
Var<T> pick(Var<T> x, std::span<const int> index) {
  detail::require_rank2(x, "pick");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  if (index.size() != m) throw DimensionError("pick: one index per row required");
  std::vector<int> idx(index.begin(), index.end());
  std::vector<T> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= n) throw IndexError("pick: index out of range");
    out[i] = x.value()[i * n + static_cast<std::size_t>(idx[i])];
  }
  return x.tape().record({m}, std::move(out), {x}, [x, n, idx = std::move(idx), self = x.tape().size()](Tape<T>& t) {
    const auto g = t.grad(Var<T>(&t, self));
    auto gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < idx.size(); ++i) gx[i * n + static_cast<std::size_t>(idx[i])] += g[i];
  });
}

/// Weighted mean negative log-likelihood of `targets` under softmax(logits).
/// An empty `weights` span means every row has weight one.
template <class T>
Var<T> cross_entropy_loss(Var<T> logits, std::span<const int> targets, std::span<const T> weights = {}) {
  detail::require_rank2(logits, "cross_entropy_loss");
  detail::require_input_finite(logits, "cross_entropy_loss");
  const std::size_t m = logits.shape()[0], n = logits.shape()[1];
  if (targets.size() != m) throw DimensionError("cross_entropy_loss: one target per row required");
  if (!weights.empty() && weights.size() != m) throw DimensionError("cross_entropy_loss: one weight per row required");
  std::vector<T> probs(m * n);
  std::vector<int> tg(targets.begin(), targets.end());
  std::vector<T> w(m, T{1});
  if (!weights.empty()) w.assign(weights.begin(), weights.end());
  T wsum{0};
  for (T v : w) wsum += v;
  if (!(wsum > T{0})) throw ContractError("cross_entropy_loss: total weight must be positive");
  T loss{0};
  const auto xv = logits.value();
  for (std::size_t i = 0; i < m; ++i) {
    if (tg[i] < 0 || static_cast<std::size_t>(tg[i]) >= n) throw IndexError("cross_entropy_loss: target out of range");
    const T* xr = xv.data() + i * n;
    const T mx = *std::max_element(xr, xr + n);
    T s{0};
    for (std::size_t j = 0; j < n; ++j) {
      probs[i * n + j] = std::exp(xr[j] - mx);
      s += probs[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) probs[i * n + j] /= s;
    loss += w[i] * (mx + std::log(s) - xr[static_cast<std::size_t>(tg[i])]);
  }
  loss /= wsum;
  return logits.tape().record(
      {1}, {loss}, {logits},
      [logits, m, n, wsum, probs = std::move(probs), tg = std::move(tg), w = std::move(w),
       self = logits.tape().size()](Tape<T>& t) {
        const T g = t.grad(Var<T>(&t, self))[0];
        auto gx = t.grad_buffer(logits);
        for (std::size_t i = 0; i < m; ++i) {
          const T c = g * w[i] / wsum;
          if (c == T{0}) continue;
          for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += c * probs[i * n + j];
          gx[i * n + static_cast<std::size_t>(tg[i])] -= c;
        }
      });
}

/// Rows of `table` selected by `ids`.
template <class T>
Var<T> embedding(Var<T> table, std::span<const int> ids) {
  detail::require_rank2(table, "embedding");
  const std::size_t v = table.shape()[0], d = table.shape()[1];
  std::vector<int> idx(ids.begin(), ids.end());
  std::vector<T> out(idx.size() * d);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= v) throw IndexError("embedding: id out of range");
    std::copy_n(table.value().data() + static_cast<std::size_t>(idx[i]) * d, d, out.data() + i * d);
  }
  const std::size_t rows = idx.size();
  return table.tape().record({rows, d}, std::move(out), {table},
                             [table, d, idx = std::move(idx), self = table.tape().size()](Tape<T>& t) {
                               const auto g = t.grad(Var<T>(&t, self));
                               auto gt = t.grad_buffer(table);
                               for (std::size_t i = 0; i < idx.size(); ++i) {
                                 T* row = gt.data() + static_cast<std::size_t>(idx[i]) * d;
                                 for (std::size_t j = 0; j < d; ++j) row[j] += g[i * d + j];
                               }
                             });
}

/// Rows [begin, begin + count) of a matrix.
template <class T>
Var<T> slice_rows(Var<T> x, std::size_t begin, std::size_t count) {
  detail::require_rank2(x, "slice_rows");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  if (begin + count > m) throw IndexError("slice_rows: range out of bounds");
  std::vector<T> out(x.value().begin() + static_cast<std::ptrdiff_t>(begin * n),
                     x.value().begin() + static_cast<std::ptrdiff_t>((begin + count) * n));
  return x.tape().record({count, n}, std::move(out), {x}, [x, begin, n, self = x.tape().size()](Tape<T>& t) {
    const auto g = t.grad(Var<T>(&t, self));
    auto gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[begin * n + i] += g[i];
  });
}

/// Columns [begin, begin + count) of a matrix.
template <class T>
Var<T> slice_cols(Var<T> x, std::size_t begin, std::size_t count) {
  detail::require_rank2(x, "slice_cols");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  if (begin + count > n) throw IndexError("slice_cols: range out of bounds");
  std::vector<T> out(m * count);
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(x.value().data() + i * n + begin, count, out.data() + i * count);
  return x.tape().record({m, count}, std::move(out), {x}, [x, m, n, begin, count, self = x.tape().size()](Tape<T>& t) {
    const auto g = t.grad(Var<T>(&t, self));
    auto gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < count; ++j) gx[i * n + begin + j] += g[i * count + j];
  });
}

/// Horizontal concatenation of matrices with equal row counts.
template <class T>
Var<T> concat_cols(std::span<const Var<T>> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no operands");
  const std::size_t m = parts[0].shape().at(0);
  std::size_t n = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    detail::require_rank2(p, "concat_cols");
    if (p.shape()[0] != m) throw DimensionError("concat_cols: row counts differ");
    widths.push_back(p.shape()[1]);
    n += p.shape()[1];
  }
  std::vector<T> out(m * n);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(parts[k].value().data() + i * widths[k], widths[k], out.data() + i * n + off);
    off += widths[k];
  }
  std::vector<Var<T>> ops(parts.begin(), parts.end());
  Tape<T>& tape = parts[0].tape();
  const std::size_t self = tape.size();
  return tape.record({m, n}, std::move(out), std::span<const Var<T>>(ops),
                     [ops, widths = std::move(widths), m, n, self](Tape<T>& t) {
                       const auto g = t.grad(Var<T>(&t, self));
                       std::size_t off = 0;
                       for (std::size_t k = 0; k < ops.size(); ++k) {
                         if (t.requires_grad(ops[k])) {
                           auto gp = t.grad_buffer(ops[k]);
                           for (std::size_t i = 0; i < m; ++i)
                             for (std::size_t j = 0; j < widths[k]; ++j) gp[i * widths[k] + j] += g[i * n + off + j];
                         }
                         off += widths[k];
                       }
                     });
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check

struct GradCheckReport {
  bool passed = true;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t failed = 0;
  std::vector<std::string> failures;
};

/// Relative error with a unit-scale floor on the denominator so that
/// gradients near zero are compared absolutely.
inline double grad_rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-3});
}

/// Compares tape gradients of a scalar function against central differences.
/// `f(tape, inputs)` must build the scalar on `tape` from the given leaves.
template <class F>
GradCheckReport grad_check(F&& f, const std::vector<Tensor<double>>& point, double h = 1e-4, double tolerance = 1e-4) {
  GradCheckReport report;
  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    std::vector<Var<double>> leaves;
    for (const auto& p : point) leaves.push_back(tape.leaf(p));
    Var<double> out = f(tape, std::span<const Var<double>>(leaves));
    tape.backward(out);
    for (const auto& l : leaves) analytic.emplace_back(l.grad().begin(), l.grad().end());
  }
  auto eval = [&](const std::vector<Tensor<double>>& pts) {
    Tape<double> tape;
    std::vector<Var<double>> leaves;
    for (const auto& p : pts) leaves.push_back(tape.leaf(p, false));
    return f(tape, std::span<const Var<double>>(leaves)).item();
  };
  std::vector<Tensor<double>> work = point;
  for (std::size_t k = 0; k < work.size(); ++k) {
    for (std::size_t i = 0; i < work[k].size(); ++i) {
      const double x0 = work[k][i];
      work[k][i] = x0 + h;
      const double fp = eval(work);
      work[k][i] = x0 - h;
      const double fm = eval(work);
      work[k][i] = x0;
      const double numeric = (fp - fm) / (2.0 * h);
      const double err = grad_rel_error(analytic[k][i], numeric);
      report.max_rel_error = std::max(report.max_rel_error, err);
      ++report.checked;
      if (!(err < tolerance)) {
        report.passed = false;
        ++report.failed;
        if (report.failures.size() < 16)
          report.failures.push_back("input " + std::to_string(k) + "[" + std::to_string(i) + "]: analytic " +
                                    std::to_string(analytic[k][i]) + " numeric " + std::to_string(numeric));
      }
    }
  }
  return report;
}

}  // namespace elab::ad
