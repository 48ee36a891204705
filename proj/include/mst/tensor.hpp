#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mst/common.hpp"

namespace mst {

// ---------------------------------------------------------------------------
// Dense tensor with reverse-mode differentiation.
//
// A Tensor is a value-semantic handle onto a tape node. Every op records the
// nodes it read and a closure that routes the output gradient back to them;
// backward() walks the tape in reverse topological order exactly once.
// Values are immutable once an op has consumed them; only gradient buffers
// (and leaf parameters, under the optimizer's exclusive access) mutate.
//
// All reductions run in a fixed documented loop order (row-major outputs,
// innermost reduction last), so single-threaded runs are bitwise
// reproducible and multi-threaded runs are bitwise identical to them: the
// worker split never changes the per-element reduction order.
// ---------------------------------------------------------------------------

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated on first use
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backfn;

  std::size_t numel() const { return value.size(); }

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode<T>> n) : n_(std::move(n)) {}

  static Tensor zeros(Shape s) {
    auto n = std::make_shared<TensorNode<T>>();
    n->value.assign(shape_numel(s), T(0));
    n->shape = std::move(s);
    return Tensor(std::move(n));
  }

  static Tensor full(Shape s, T v) {
    auto n = std::make_shared<TensorNode<T>>();
    n->value.assign(shape_numel(s), v);
    n->shape = std::move(s);
    return Tensor(std::move(n));
  }

  static Tensor from(Shape s, std::vector<T> v) {
    if (shape_numel(s) != v.size())
      throw DimensionError("tensor init: " + shape_str(s) + " does not hold " +
                           std::to_string(v.size()) + " values");
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = std::move(s);
    n->value = std::move(v);
    return Tensor(std::move(n));
  }

  static Tensor scalar(T v) { return from({1}, {v}); }

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  std::size_t ndim() const { return n_->shape.size(); }
  std::size_t extent(std::size_t i) const { return n_->shape[i]; }
  std::size_t numel() const { return n_->value.size(); }

  std::vector<T>& data() { return n_->value; }
  const std::vector<T>& data() const { return n_->value; }

  bool requires_grad() const { return n_ && n_->requires_grad; }
  Tensor& set_requires_grad(bool b = true) {
    n_->requires_grad = b;
    return *this;
  }

  bool has_grad() const { return n_ && n_->grad.size() == n_->value.size(); }
  const std::vector<T>& grad() const {
    if (!has_grad()) throw ContractError("gradient not populated; call backward first");
    return n_->grad;
  }
  std::vector<T>& grad_data() {
    n_->ensure_grad();
    return n_->grad;
  }
  void zero_grad() {
    if (n_) n_->grad.assign(n_->value.size(), T(0));
  }

  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of " + std::to_string(numel()) + " elements");
    return n_->value[0];
  }

  T at(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != ndim()) throw DimensionError("at(): index rank mismatch");
    std::size_t off = 0;
    std::size_t d = 0;
    for (std::size_t i : idx) off = off * n_->shape[d++] + i;
    return n_->value[off];
  }

  std::shared_ptr<TensorNode<T>> node() const { return n_; }

 private:
  std::shared_ptr<TensorNode<T>> n_;
};

namespace detail {

inline thread_local bool g_grad_enabled = true;

template <typename T>
Tensor<T> make_op(const char* op, Shape shape, std::vector<T> value,
                  std::initializer_list<Tensor<T>> inputs,
                  std::function<void(TensorNode<T>&)> backfn) {
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool needs = false;
  for (const auto& t : inputs) needs = needs || t.requires_grad();
  needs = needs && g_grad_enabled;
  if (needs) {
    node->requires_grad = true;
    for (const auto& t : inputs) node->parents.push_back(t.node());
    node->backfn = std::move(backfn);
  }
  return Tensor<T>(std::move(node));
}

// MAC instrumentation hook. When a counter is installed, matmul runs its
// sequential counting path and reports one MAC per scalar product actually
// executed.
inline thread_local unsigned long long* g_mac_counter = nullptr;

}  // namespace detail

struct MacCounter {
  unsigned long long macs = 0;
};

// Suppresses tape construction inside its scope (inference paths).
class NoGradScope {
 public:
  NoGradScope() : prev_(detail::g_grad_enabled) { detail::g_grad_enabled = false; }
  ~NoGradScope() { detail::g_grad_enabled = prev_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  bool prev_;
};

class MacScope {
 public:
  explicit MacScope(MacCounter* c)
      : prev_(detail::g_mac_counter) {
    detail::g_mac_counter = c ? &c->macs : nullptr;
  }
  ~MacScope() { detail::g_mac_counter = prev_; }
  MacScope(const MacScope&) = delete;
  MacScope& operator=(const MacScope&) = delete;

 private:
  unsigned long long* prev_;
};

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  const auto& av = a.data();
  const auto& bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  auto an = a.node();
  auto bn = b.node();
  return detail::make_op<T>("add", a.shape(), std::move(out), {a, b}, [an, bn](TensorNode<T>& o) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] += o.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  const auto& av = a.data();
  const auto& bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  auto an = a.node();
  auto bn = b.node();
  return detail::make_op<T>("sub", a.shape(), std::move(out), {a, b}, [an, bn](TensorNode<T>& o) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] -= o.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  const auto& av = a.data();
  const auto& bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  auto an = a.node();
  auto bn = b.node();
  return detail::make_op<T>("mul", a.shape(), std::move(out), {a, b}, [an, bn](TensorNode<T>& o) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] += o.grad[i] * an->value[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  std::vector<T> out(a.numel());
  const auto& av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
  auto an = a.node();
  return detail::make_op<T>("scale", a.shape(), std::move(out), {a}, [an, c](TensorNode<T>& o) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i] * c;
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  std::vector<T> out(a.numel());
  const auto& av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + c;
  auto an = a.node();
  return detail::make_op<T>("add_scalar", a.shape(), std::move(out), {a}, [an](TensorNode<T>& o) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
  });
}

// Multiply by a tracked one-element tensor (a learnable scalar).
template <typename T>
Tensor<T> smul(const Tensor<T>& a, const Tensor<T>& s) {
  if (s.numel() != 1) throw DimensionError("smul: scalar operand must hold one element");
  const T c = s.data()[0];
  std::vector<T> out(a.numel());
  const auto& av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
  auto an = a.node();
  auto sn = s.node();
  return detail::make_op<T>("smul", a.shape(), std::move(out), {a, s}, [an, sn, c](TensorNode<T>& o) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i] * c;
    }
    if (sn->requires_grad) {
      sn->ensure_grad();
      T acc = T(0);
      for (std::size_t i = 0; i < o.grad.size(); ++i) acc += o.grad[i] * an->value[i];
      sn->grad[0] += acc;
    }
  });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  // Exact Gauss-error-function form: x/2 * (1 + erf(x/sqrt(2))).
  std::vector<T> out(a.numel());
  const auto& av = a.data();
  const T inv_sqrt2 = T(0.70710678118654752440);
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = T(0.5) * av[i] * (T(1) + std::erf(av[i] * inv_sqrt2));
  auto an = a.node();
  return detail::make_op<T>("gelu", a.shape(), std::move(out), {a}, [an, inv_sqrt2](TensorNode<T>& o) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    const T inv_sqrt2pi = T(0.39894228040143267794);
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      const T x = an->value[i];
      const T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
      const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x * x);
      an->grad[i] += o.grad[i] * (cdf + x * pdf);
    }
  });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  const auto& av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = av[i];
    out[i] = x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
  }
  auto an = a.node();
  Shape shp = a.shape();
  std::vector<T> saved = out;
  return detail::make_op<T>("sigmoid", std::move(shp), std::move(out), {a},
                            [an, saved = std::move(saved)](TensorNode<T>& o) {
                              if (!an->requires_grad) return;
                              an->ensure_grad();
                              for (std::size_t i = 0; i < o.grad.size(); ++i) {
                                const T y = saved[i];
                                an->grad[i] += o.grad[i] * y * (T(1) - y);
                              }
                            });
}

template <typename T>
Tensor<T> sqrt_elem(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  const auto& av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(av[i]);
  auto an = a.node();
  Shape shp = a.shape();
  std::vector<T> saved = out;
  return detail::make_op<T>("sqrt", std::move(shp), std::move(out), {a},
                            [an, saved = std::move(saved)](TensorNode<T>& o) {
                              if (!an->requires_grad) return;
                              an->ensure_grad();
                              for (std::size_t i = 0; i < o.grad.size(); ++i)
                                an->grad[i] += o.grad[i] * T(0.5) / saved[i];
                            });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = T(0);
  for (const T v : a.data()) acc += v;
  auto an = a.node();
  return detail::make_op<T>("sum", {1}, {acc}, {a}, [an](TensorNode<T>& o) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    const T g = o.grad[0];
    for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += g;
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  const T inv = T(1) / static_cast<T>(a.numel());
  T acc = T(0);
  for (const T v : a.data()) acc += v;
  acc *= inv;
  auto an = a.node();
  return detail::make_op<T>("mean", {1}, {acc}, {a}, [an, inv](TensorNode<T>& o) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    const T g = o.grad[0] * inv;
    for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += g;
  });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape s) {
  if (shape_numel(s) != a.numel())
    throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(s));
  auto an = a.node();
  return detail::make_op<T>("reshape", std::move(s), a.data(), {a}, [an](TensorNode<T>& o) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
  });
}

namespace detail {

inline std::vector<std::size_t> row_major_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

}  // namespace detail

template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<std::size_t>& axes) {
  const Shape& in = a.shape();
  if (axes.size() != in.size()) throw DimensionError("permute: axes rank mismatch");
  Shape out_shape(in.size());
  for (std::size_t i = 0; i < axes.size(); ++i) out_shape[i] = in[axes[i]];
  const auto in_strides = detail::row_major_strides(in);
  const auto out_strides = detail::row_major_strides(out_shape);
  const std::size_t n = a.numel();
  const std::size_t rank = in.size();

  // src[i] = flat input offset feeding output element i
  std::vector<std::size_t> src(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t rem = i;
    std::size_t off = 0;
    for (std::size_t d = 0; d < rank; ++d) {
      const std::size_t coord = rem / out_strides[d];
      rem -= coord * out_strides[d];
      off += coord * in_strides[axes[d]];
    }
    src[i] = off;
  }
  std::vector<T> out(n);
  const auto& av = a.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[src[i]];
  auto an = a.node();
  return detail::make_op<T>("permute", std::move(out_shape), std::move(out), {a},
                            [an, src = std::move(src)](TensorNode<T>& o) {
                              if (!an->requires_grad) return;
                              an->ensure_grad();
                              for (std::size_t i = 0; i < o.grad.size(); ++i)
                                an->grad[src[i]] += o.grad[i];
                            });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.ndim() != 2) throw DimensionError("transpose: expected rank-2, got " + shape_str(a.shape()));
  return permute(a, {1, 0});
}

template <typename T>
Tensor<T> narrow(const Tensor<T>& a, std::size_t axis, std::size_t start, std::size_t len) {
  const Shape& in = a.shape();
  if (axis >= in.size()) throw DimensionError("narrow: axis out of range");
  if (start + len > in[axis]) throw DimensionError("narrow: window exceeds extent");
  Shape out_shape = in;
  out_shape[axis] = len;
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= in[d];
  for (std::size_t d = axis + 1; d < in.size(); ++d) inner *= in[d];
  const std::size_t in_axis = in[axis];

  std::vector<T> out(outer * len * inner);
  const auto& av = a.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t l = 0; l < len; ++l) {
      const T* s = av.data() + (o * in_axis + start + l) * inner;
      T* d = out.data() + (o * len + l) * inner;
      std::copy(s, s + inner, d);
    }
  auto an = a.node();
  return detail::make_op<T>("narrow", std::move(out_shape), std::move(out), {a},
                            [an, outer, inner, in_axis, start, len](TensorNode<T>& o) {
                              if (!an->requires_grad) return;
                              an->ensure_grad();
                              for (std::size_t ot = 0; ot < outer; ++ot)
                                for (std::size_t l = 0; l < len; ++l) {
                                  const T* g = o.grad.data() + (ot * len + l) * inner;
                                  T* d = an->grad.data() + (ot * in_axis + start + l) * inner;
                                  for (std::size_t i = 0; i < inner; ++i) d[i] += g[i];
                                }
                            });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range");
  std::size_t total_axis = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d)
      if (d != axis && s[d] != first[d]) throw DimensionError("concat: extent mismatch off-axis");
    total_axis += s[axis];
  }
  Shape out_shape = first;
  out_shape[axis] = total_axis;
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];

  std::vector<T> out(shape_numel(out_shape));
  std::size_t off_axis = 0;
  for (const auto& p : parts) {
    const std::size_t part_axis = p.shape()[axis];
    const auto& pv = p.data();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t l = 0; l < part_axis; ++l) {
        const T* s = pv.data() + (o * part_axis + l) * inner;
        T* d = out.data() + (o * total_axis + off_axis + l) * inner;
        std::copy(s, s + inner, d);
      }
    off_axis += part_axis;
  }

  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(out_shape);
  node->value = std::move(out);
  node->op = "concat";
  bool needs = false;
  for (const auto& p : parts) needs = needs || p.requires_grad();
  needs = needs && detail::g_grad_enabled;
  if (needs) {
    node->requires_grad = true;
    std::vector<std::size_t> extents;
    for (const auto& p : parts) {
      node->parents.push_back(p.node());
      extents.push_back(p.shape()[axis]);
    }
    node->backfn = [outer, inner, total_axis, extents = std::move(extents)](TensorNode<T>& o) {
      std::size_t off = 0;
      for (std::size_t pi = 0; pi < o.parents.size(); ++pi) {
        auto& par = *o.parents[pi];
        const std::size_t part_axis = extents[pi];
        if (par.requires_grad) {
          par.ensure_grad();
          for (std::size_t ot = 0; ot < outer; ++ot)
            for (std::size_t l = 0; l < part_axis; ++l) {
              const T* g = o.grad.data() + (ot * total_axis + off + l) * inner;
              T* d = par.grad.data() + (ot * part_axis + l) * inner;
              for (std::size_t i = 0; i < inner; ++i) d[i] += g[i];
            }
        }
        off += part_axis;
      }
    };
  }
  return Tensor<T>(std::move(node));
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

namespace detail {

// c[m x n] += a[m x k] * b[k x n]; fixed reduction order over p.
template <typename T>
void matmul_kernel(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  if (g_mac_counter) {
    unsigned long long local = 0;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        T acc = T(0);
        for (std::size_t p = 0; p < k; ++p) {
          acc += a[i * k + p] * b[p * n + j];
          ++local;
        }
        c[i * n + j] = acc;
      }
    *g_mac_counter += local;
    return;
  }
  parallel_for(m, [&](std::size_t i0, std::size_t i1) {
    for (std::size_t i = i0; i < i1; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        T acc = T(0);
        for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
        c[i * n + j] = acc;
      }
  });
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2)
    throw DimensionError("matmul: expected rank-2 operands");
  const std::size_t m = a.extent(0), k = a.extent(1), k2 = b.extent(0), n = b.extent(1);
  if (k != k2)
    throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  std::vector<T> out(m * n);
  detail::matmul_kernel(a.data().data(), b.data().data(), out.data(), m, k, n);
  auto an = a.node();
  auto bn = b.node();
  return detail::make_op<T>("matmul", {m, n}, std::move(out), {a, b},
                            [an, bn, m, k, n](TensorNode<T>& o) {
                              if (an->requires_grad) {
                                an->ensure_grad();
                                // dA[i,p] += sum_j dC[i,j] * B[p,j]
                                for (std::size_t i = 0; i < m; ++i)
                                  for (std::size_t p = 0; p < k; ++p) {
                                    T acc = T(0);
                                    for (std::size_t j = 0; j < n; ++j)
                                      acc += o.grad[i * n + j] * bn->value[p * n + j];
                                    an->grad[i * k + p] += acc;
                                  }
                              }
                              if (bn->requires_grad) {
                                bn->ensure_grad();
                                // dB[p,j] += sum_i A[i,p] * dC[i,j]
                                for (std::size_t p = 0; p < k; ++p)
                                  for (std::size_t j = 0; j < n; ++j) {
                                    T acc = T(0);
                                    for (std::size_t i = 0; i < m; ++i)
                                      acc += an->value[i * k + p] * o.grad[i * n + j];
                                    bn->grad[p * n + j] += acc;
                                  }
                              }
                            });
}

// ---------------------------------------------------------------------------
// Convolutions. Layout: activations [C,H,W], weights [C_out, C_in/g, k, k].
// Zero padding; cross-correlation; output extents must divide exactly.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 std::size_t stride, std::size_t pad, std::size_t groups) {
  if (x.ndim() != 3 || w.ndim() != 4) throw DimensionError("conv2d: want x[C,H,W], w[Co,Ci/g,k,k]");
  const std::size_t cin = x.extent(0), h = x.extent(1), wd = x.extent(2);
  const std::size_t cout = w.extent(0), cing = w.extent(1), kh = w.extent(2), kw = w.extent(3);
  if (kh != kw) throw DimensionError("conv2d: non-square kernel");
  const std::size_t k = kh;
  if (groups == 0 || cin % groups != 0 || cout % groups != 0)
    throw ConfigError("conv2d: groups must divide channel counts");
  if (cing != cin / groups)
    throw DimensionError("conv2d: weight expects " + std::to_string(cing) + " channels per group, input has " +
                         std::to_string(cin / groups));
  if (h + 2 * pad < k || wd + 2 * pad < k || (h + 2 * pad - k) % stride != 0 ||
      (wd + 2 * pad - k) % stride != 0)
    throw DimensionError("conv2d: non-integral output extent");
  if (bias.defined() && (bias.ndim() != 1 || bias.extent(0) != cout))
    throw DimensionError("conv2d: bias shape");
  const std::size_t oh = (h + 2 * pad - k) / stride + 1;
  const std::size_t ow = (wd + 2 * pad - k) / stride + 1;
  const std::size_t copg = cout / groups;

  std::vector<T> out(cout * oh * ow);
  const T* xv = x.data().data();
  const T* wv = w.data().data();
  const T* bv = bias.defined() ? bias.data().data() : nullptr;
  parallel_for(cout, [&](std::size_t c0, std::size_t c1) {
    for (std::size_t co = c0; co < c1; ++co) {
      const std::size_t g = co / copg;
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          T acc = bv ? bv[co] : T(0);
          for (std::size_t cl = 0; cl < cing; ++cl) {
            const std::size_t ci = g * cing + cl;
            for (std::size_t ky = 0; ky < k; ++ky) {
              const std::ptrdiff_t iy =
                  static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
              for (std::size_t kx = 0; kx < k; ++kx) {
                const std::ptrdiff_t ix =
                    static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
                acc += xv[(ci * h + iy) * wd + ix] * wv[((co * cing + cl) * k + ky) * k + kx];
              }
            }
          }
          out[(co * oh + oy) * ow + ox] = acc;
        }
    }
  });

  auto xn = x.node();
  auto wn = w.node();
  auto bn = bias.defined() ? bias.node() : nullptr;
  auto backfn = [xn, wn, bn, cin, h, wd, cout, cing, k, stride, pad, groups, oh, ow,
                 copg](TensorNode<T>& o) {
    const T* gv = o.grad.data();
    if (xn->requires_grad) {
      xn->ensure_grad();
      // gather form: every input element sums its contributing outputs
      for (std::size_t ci = 0; ci < cin; ++ci) {
        const std::size_t g = ci / cing;
        for (std::size_t iy = 0; iy < h; ++iy)
          for (std::size_t ix = 0; ix < wd; ++ix) {
            T acc = T(0);
            for (std::size_t cl = 0; cl < copg; ++cl) {
              const std::size_t co = g * copg + cl;
              for (std::size_t ky = 0; ky < k; ++ky) {
                const std::ptrdiff_t num_y = static_cast<std::ptrdiff_t>(iy + pad) -
                                             static_cast<std::ptrdiff_t>(ky);
                if (num_y < 0 || num_y % static_cast<std::ptrdiff_t>(stride)) continue;
                const std::size_t oy = static_cast<std::size_t>(num_y) / stride;
                if (oy >= oh) continue;
                for (std::size_t kx = 0; kx < k; ++kx) {
                  const std::ptrdiff_t num_x = static_cast<std::ptrdiff_t>(ix + pad) -
                                               static_cast<std::ptrdiff_t>(kx);
                  if (num_x < 0 || num_x % static_cast<std::ptrdiff_t>(stride)) continue;
                  const std::size_t ox = static_cast<std::size_t>(num_x) / stride;
                  if (ox >= ow) continue;
                  acc += gv[(co * oh + oy) * ow + ox] *
                         wn->value[((co * cing + ci % cing) * k + ky) * k + kx];
                }
              }
            }
            xn->grad[(ci * h + iy) * wd + ix] += acc;
          }
      }
    }
    if (wn->requires_grad) {
      wn->ensure_grad();
      for (std::size_t co = 0; co < cout; ++co) {
        const std::size_t g = co / copg;
        for (std::size_t cl = 0; cl < cing; ++cl) {
          const std::size_t ci = g * cing + cl;
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
              T acc = T(0);
              for (std::size_t oy = 0; oy < oh; ++oy) {
                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                          static_cast<std::ptrdiff_t>(pad);
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                for (std::size_t ox = 0; ox < ow; ++ox) {
                  const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                            static_cast<std::ptrdiff_t>(pad);
                  if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
                  acc += xn->value[(ci * h + iy) * wd + ix] * gv[(co * oh + oy) * ow + ox];
                }
              }
              wn->grad[((co * cing + cl) * k + ky) * k + kx] += acc;
            }
        }
      }
    }
    if (bn && bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t co = 0; co < cout; ++co) {
        T acc = T(0);
        for (std::size_t i = 0; i < oh * ow; ++i) acc += gv[co * oh * ow + i];
        bn->grad[co] += acc;
      }
    }
  };

  if (bias.defined())
    return detail::make_op<T>("conv2d", {cout, oh, ow}, std::move(out), {x, w, bias}, backfn);
  return detail::make_op<T>("conv2d", {cout, oh, ow}, std::move(out), {x, w}, backfn);
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride, std::size_t pad,
                 std::size_t groups) {
  return conv2d(x, w, Tensor<T>(), stride, pad, groups);
}

// Strided 2x2 transposed convolution: x[Ci,H,W], w[Ci,Co,2,2] -> [Co,2H,2W].
// Only the kernel-2/stride-2 pairing is supported; it is the exact adjoint of
// conv2d with kernel 2, stride 2, no padding.
template <typename T>
Tensor<T> conv2d_transpose(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride = 2,
                           std::size_t k = 2) {
  if (stride != 2 || k != 2)
    throw ConfigError("conv2d_transpose: only kernel 2 / stride 2 supported");
  if (x.ndim() != 3 || w.ndim() != 4) throw DimensionError("conv2d_transpose: want x[C,H,W], w[Ci,Co,2,2]");
  const std::size_t cin = x.extent(0), h = x.extent(1), wd = x.extent(2);
  if (w.extent(0) != cin || w.extent(2) != 2 || w.extent(3) != 2)
    throw DimensionError("conv2d_transpose: weight shape " + shape_str(w.shape()));
  const std::size_t cout = w.extent(1);
  const std::size_t oh = 2 * h, ow = 2 * wd;

  std::vector<T> out(cout * oh * ow, T(0));
  const T* xv = x.data().data();
  const T* wv = w.data().data();
  for (std::size_t co = 0; co < cout; ++co)
    for (std::size_t iy = 0; iy < h; ++iy)
      for (std::size_t ix = 0; ix < wd; ++ix)
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            T acc = T(0);
            for (std::size_t ci = 0; ci < cin; ++ci)
              acc += xv[(ci * h + iy) * wd + ix] * wv[((ci * cout + co) * 2 + dy) * 2 + dx];
            out[(co * oh + 2 * iy + dy) * ow + 2 * ix + dx] = acc;
          }

  auto xn = x.node();
  auto wn = w.node();
  return detail::make_op<T>(
      "conv2d_transpose", {cout, oh, ow}, std::move(out), {x, w},
      [xn, wn, cin, h, wd, cout, oh, ow](TensorNode<T>& o) {
        const T* gv = o.grad.data();
        if (xn->requires_grad) {
          xn->ensure_grad();
          for (std::size_t ci = 0; ci < cin; ++ci)
            for (std::size_t iy = 0; iy < h; ++iy)
              for (std::size_t ix = 0; ix < wd; ++ix) {
                T acc = T(0);
                for (std::size_t co = 0; co < cout; ++co)
                  for (std::size_t dy = 0; dy < 2; ++dy)
                    for (std::size_t dx = 0; dx < 2; ++dx)
                      acc += gv[(co * oh + 2 * iy + dy) * ow + 2 * ix + dx] *
                             wn->value[((ci * cout + co) * 2 + dy) * 2 + dx];
                xn->grad[(ci * h + iy) * wd + ix] += acc;
              }
        }
        if (wn->requires_grad) {
          wn->ensure_grad();
          for (std::size_t ci = 0; ci < cin; ++ci)
            for (std::size_t co = 0; co < cout; ++co)
              for (std::size_t dy = 0; dy < 2; ++dy)
                for (std::size_t dx = 0; dx < 2; ++dx) {
                  T acc = T(0);
                  for (std::size_t iy = 0; iy < h; ++iy)
                    for (std::size_t ix = 0; ix < wd; ++ix)
                      acc += xn->value[(ci * h + iy) * wd + ix] *
                             gv[(co * oh + 2 * iy + dy) * ow + 2 * ix + dx];
                  wn->grad[((ci * cout + co) * 2 + dy) * 2 + dx] += acc;
                }
        }
      });
}

// ---------------------------------------------------------------------------
// softmax / layer_norm along an arbitrary axis (strided, no permute copies)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, std::size_t axis) {
  const Shape& s = a.shape();
  if (axis >= s.size()) throw DimensionError("softmax: axis out of range");
  std::size_t outer = 1, inner = 1;
  const std::size_t len = s[axis];
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];

  std::vector<T> out(a.numel());
  const auto& av = a.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = av[base];
      for (std::size_t l = 1; l < len; ++l) mx = std::max(mx, av[base + l * inner]);
      T denom = T(0);
      for (std::size_t l = 0; l < len; ++l) {
        const T e = std::exp(av[base + l * inner] - mx);
        out[base + l * inner] = e;
        denom += e;
      }
      const T inv = T(1) / denom;
      for (std::size_t l = 0; l < len; ++l) out[base + l * inner] *= inv;
    }

  auto an = a.node();
  Shape shp = s;
  std::vector<T> saved = out;
  return detail::make_op<T>(
      "softmax", std::move(shp), std::move(out), {a},
      [an, outer, inner, len, saved = std::move(saved)](TensorNode<T>& o) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t ot = 0; ot < outer; ++ot)
          for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = ot * len * inner + in;
            T dot = T(0);
            for (std::size_t l = 0; l < len; ++l)
              dot += o.grad[base + l * inner] * saved[base + l * inner];
            for (std::size_t l = 0; l < len; ++l) {
              const std::size_t i = base + l * inner;
              an->grad[i] += saved[i] * (o.grad[i] - dot);
            }
          }
      });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& a, const Tensor<T>& gamma, const Tensor<T>& beta,
                     std::size_t axis, T eps = T(1e-6)) {
  const Shape& s = a.shape();
  if (axis >= s.size()) throw DimensionError("layer_norm: axis out of range");
  const std::size_t len = s[axis];
  if (gamma.numel() != len || beta.numel() != len)
    throw DimensionError("layer_norm: affine parameters must match the axis extent");
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];

  std::vector<T> out(a.numel());
  std::vector<T> xhat(a.numel());
  std::vector<T> inv_std(outer * inner);
  const auto& av = a.data();
  const auto& gv = gamma.data();
  const auto& bv = beta.data();
  const T invn = T(1) / static_cast<T>(len);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mu = T(0);
      for (std::size_t l = 0; l < len; ++l) mu += av[base + l * inner];
      mu *= invn;
      T var = T(0);
      for (std::size_t l = 0; l < len; ++l) {
        const T d = av[base + l * inner] - mu;
        var += d * d;
      }
      var *= invn;
      const T inv = T(1) / std::sqrt(var + eps);
      inv_std[o * inner + in] = inv;
      for (std::size_t l = 0; l < len; ++l) {
        const std::size_t i = base + l * inner;
        const T xh = (av[i] - mu) * inv;
        xhat[i] = xh;
        out[i] = gv[l] * xh + bv[l];
      }
    }

  auto an = a.node();
  auto gn = gamma.node();
  auto bn = beta.node();
  Shape shp = s;
  return detail::make_op<T>(
      "layer_norm", std::move(shp), std::move(out), {a, gamma, beta},
      [an, gn, bn, outer, inner, len, invn, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](TensorNode<T>& o) {
        if (gn->requires_grad) gn->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        if (an->requires_grad) an->ensure_grad();
        for (std::size_t ot = 0; ot < outer; ++ot)
          for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = ot * len * inner + in;
            if (gn->requires_grad || bn->requires_grad) {
              for (std::size_t l = 0; l < len; ++l) {
                const std::size_t i = base + l * inner;
                if (gn->requires_grad) gn->grad[l] += o.grad[i] * xhat[i];
                if (bn->requires_grad) bn->grad[l] += o.grad[i];
              }
            }
            if (an->requires_grad) {
              T mean_g = T(0), mean_gx = T(0);
              for (std::size_t l = 0; l < len; ++l) {
                const std::size_t i = base + l * inner;
                const T g = o.grad[i] * gn->value[l];
                mean_g += g;
                mean_gx += g * xhat[i];
              }
              mean_g *= invn;
              mean_gx *= invn;
              const T inv = inv_std[ot * inner + in];
              for (std::size_t l = 0; l < len; ++l) {
                const std::size_t i = base + l * inner;
                const T g = o.grad[i] * gn->value[l];
                an->grad[i] += inv * (g - mean_g - xhat[i] * mean_gx);
              }
            }
          }
      });
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw ContractError("backward: root must be a scalar tensor");
  auto root = loss.node();
  if (!root->requires_grad) return;

  // reverse topological order over the tape (iterative post-order DFS)
  std::vector<TensorNode<T>*> order;
  std::unordered_set<TensorNode<T>*> seen;
  std::vector<std::pair<TensorNode<T>*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorNode<T>* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior grads are scratch per pass; leaf grads accumulate across calls.
  for (TensorNode<T>* n : order)
    if (n->backfn) n->grad.assign(n->value.size(), T(0));
  root->ensure_grad();
  root->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backfn) (*it)->backfn(**it);
}

}  // namespace mst
