// Copyright (c) 2026 The diffkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "diffkit/errors.hpp"
#include "diffkit/rng.hpp"

namespace diffkit {

/// Reverse-mode autodiff over a dynamically recorded tape.
///
/// Tensors are handles to shared nodes holding row-major data, an optional
/// gradient buffer, and (while grad mode is on) the parents plus a backward
/// closure. Ops are pure: they never mutate inputs, so concurrent forwards on
/// distinct outputs are safe. backward() over one graph is single-threaded.
/// Reductions and convolutions accumulate in a fixed row-major order so
/// results are bit-reproducible run to run.
///
/// The scalar type is a template parameter: training runs in float, gradient
/// checks instantiate double so finite differences are trustworthy.

namespace detail {
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}
} // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// RAII guard disabling graph recording (sampling, evaluation).
class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

template <typename T>
struct TensorImpl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad; // empty until first needed; same length as data afterwards
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::function<void(TensorImpl&)> backward_fn;

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }
};

template <typename T>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape) { return filled(std::move(shape), T(0)); }
    static Tensor ones(Shape shape) { return filled(std::move(shape), T(1)); }

    static Tensor filled(Shape shape, T value) {
        Tensor t;
        t.impl_ = std::make_shared<TensorImpl<T>>();
        t.impl_->data.assign(shape_numel(shape), value);
        t.impl_->shape = std::move(shape);
        return t;
    }

    static Tensor from_data(Shape shape, std::vector<T> data) {
        check_shape(shape_numel(shape) == data.size(),
                    "tensor data length " + std::to_string(data.size()) +
                        " does not match shape " + shape_str(shape));
        Tensor t;
        t.impl_ = std::make_shared<TensorImpl<T>>();
        t.impl_->shape = std::move(shape);
        t.impl_->data = std::move(data);
        return t;
    }

    static Tensor scalar(T value) { return from_data({1}, {value}); }

    static Tensor randn(Shape shape, Rng& rng) {
        Tensor t = zeros(std::move(shape));
        for (T& v : t.data()) v = static_cast<T>(rng.normal());
        return t;
    }

    static Tensor rand_uniform(Shape shape, Rng& rng, double lo = 0.0, double hi = 1.0) {
        Tensor t = zeros(std::move(shape));
        for (T& v : t.data()) v = static_cast<T>(lo + (hi - lo) * rng.uniform());
        return t;
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t ndim() const { return impl_->shape.size(); }
    std::size_t dim(std::size_t i) const { return impl_->shape[i]; }
    std::size_t numel() const { return impl_->data.size(); }

    std::vector<T>& data() { return impl_->data; }
    const std::vector<T>& data() const { return impl_->data; }

    T item() const {
        check_shape(numel() == 1, "item() requires a scalar tensor, got " + shape_str(shape()));
        return impl_->data[0];
    }

    bool requires_grad() const { return impl_ && impl_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        impl_->requires_grad = v;
        return *this;
    }

    bool has_grad() const { return impl_ && !impl_->grad.empty(); }
    std::vector<T>& grad() {
        impl_->ensure_grad();
        return impl_->grad;
    }
    const std::vector<T>& grad() const { return impl_->grad; }
    void zero_grad() {
        if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
    }

    /// Data-only copy detached from the graph.
    Tensor detached() const {
        Tensor t;
        t.impl_ = std::make_shared<TensorImpl<T>>();
        t.impl_->shape = impl_->shape;
        t.impl_->data = impl_->data;
        return t;
    }

    std::shared_ptr<TensorImpl<T>> impl() const { return impl_; }

private:
    std::shared_ptr<TensorImpl<T>> impl_;
};

namespace detail {

/// Wraps a freshly computed result; records parents + backward closure when
/// grad mode is on and some parent requires grad.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::vector<Tensor<T>> parents,
                      std::function<void(TensorImpl<T>&)> backward_fn) {
    Tensor<T> out = Tensor<T>::from_data(std::move(shape), std::move(data));
    bool track = grad_enabled();
    bool any_rg = false;
    for (const auto& p : parents) any_rg = any_rg || p.requires_grad();
    if (track && any_rg) {
        out.impl()->requires_grad = true;
        for (const auto& p : parents) out.impl()->parents.push_back(p.impl());
        out.impl()->backward_fn = std::move(backward_fn);
    }
    return out;
}

template <typename T>
void accumulate(TensorImpl<T>& node, const std::vector<T>& contribution) {
    node.ensure_grad();
    for (std::size_t i = 0; i < contribution.size(); ++i) node.grad[i] += contribution[i];
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    check_shape(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                            shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "add");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [](TensorImpl<T>& self) {
        if (self.parents[0]->requires_grad) detail::accumulate(*self.parents[0], self.grad);
        if (self.parents[1]->requires_grad) detail::accumulate(*self.parents[1], self.grad);
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "sub");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [](TensorImpl<T>& self) {
        if (self.parents[0]->requires_grad) detail::accumulate(*self.parents[0], self.grad);
        if (self.parents[1]->requires_grad) {
            auto& p = *self.parents[1];
            p.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] -= self.grad[i];
        }
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "mul");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [](TensorImpl<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * pb.data[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] += self.grad[i] * pa.data[i];
        }
    });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "div");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] / b.data()[i];
    return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [](TensorImpl<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] / pb.data[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                pb.grad[i] -= self.grad[i] * pa.data[i] / (pb.data[i] * pb.data[i]);
        }
    });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, T s) {
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + s;
    return detail::make_result<T>(a.shape(), std::move(out), {a}, [](TensorImpl<T>& self) {
        if (self.parents[0]->requires_grad) detail::accumulate(*self.parents[0], self.grad);
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, T s) {
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
    return detail::make_result<T>(a.shape(), std::move(out), {a}, [s](TensorImpl<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * s;
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, T s) {
    return add(a, static_cast<T>(-s));
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
    return mul(a, T(-1));
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.data()[i]);
    return detail::make_result<T>(a.shape(), std::move(out), {a}, [](TensorImpl<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * self.data[i];
    });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& a) {
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T x = a.data()[i];
        out[i] = x / (T(1) + std::exp(-x));
    }
    return detail::make_result<T>(a.shape(), std::move(out), {a}, [](TensorImpl<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const T x = p.data[i];
            const T sig = T(1) / (T(1) + std::exp(-x));
            p.grad[i] += self.grad[i] * sig * (T(1) + x * (T(1) - sig));
        }
    });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
    T acc = 0;
    for (const T& v : a.data()) acc += v;
    return detail::make_result<T>({1}, {acc}, {a}, [](TensorImpl<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const T g = self.grad[0];
        for (T& v : p.grad) v += g;
    });
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
    T acc = 0;
    for (const T& v : a.data()) acc += v;
    const T inv = T(1) / static_cast<T>(a.numel());
    return detail::make_result<T>({1}, {acc * inv}, {a}, [inv](TensorImpl<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const T g = self.grad[0] * inv;
        for (T& v : p.grad) v += g;
    });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape new_shape) {
    check_shape(shape_numel(new_shape) == a.numel(),
                "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(new_shape));
    std::vector<T> out = a.data();
    return detail::make_result<T>(std::move(new_shape), std::move(out), {a},
                                  [](TensorImpl<T>& self) {
                                      if (self.parents[0]->requires_grad)
                                          detail::accumulate(*self.parents[0], self.grad);
                                  });
}

/// Swaps the last two axes of a 2-D or 3-D tensor.
template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& a) {
    check_shape(a.ndim() == 2 || a.ndim() == 3, "transpose_last2: expects 2-D or 3-D input");
    const std::size_t batch = a.ndim() == 3 ? a.dim(0) : 1;
    const std::size_t rows = a.dim(a.ndim() - 2);
    const std::size_t cols = a.dim(a.ndim() - 1);
    Shape out_shape = a.shape();
    std::swap(out_shape[a.ndim() - 2], out_shape[a.ndim() - 1]);
    std::vector<T> out(a.numel());
    const T* src = a.data().data();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c)
                out[(b * cols + c) * rows + r] = src[(b * rows + r) * cols + c];
    return detail::make_result<T>(std::move(out_shape), std::move(out), {a},
                                  [batch, rows, cols](TensorImpl<T>& self) {
                                      auto& p = *self.parents[0];
                                      if (!p.requires_grad) return;
                                      p.ensure_grad();
                                      for (std::size_t b = 0; b < batch; ++b)
                                          for (std::size_t r = 0; r < rows; ++r)
                                              for (std::size_t c = 0; c < cols; ++c)
                                                  p.grad[(b * rows + r) * cols + c] +=
                                                      self.grad[(b * cols + c) * rows + r];
                                  });
}

/// Concatenates two NCHW tensors along the channel axis.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    check_shape(a.ndim() == 4 && b.ndim() == 4, "concat_channels: expects NCHW inputs");
    check_shape(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
                "concat_channels: non-channel dims differ: " + shape_str(a.shape()) + " vs " +
                    shape_str(b.shape()));
    const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
    Shape out_shape{n, ca + cb, a.dim(2), a.dim(3)};
    std::vector<T> out(shape_numel(out_shape));
    for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(a.data().data() + i * ca * hw, ca * hw, out.data() + i * (ca + cb) * hw);
        std::copy_n(b.data().data() + i * cb * hw, cb * hw,
                    out.data() + i * (ca + cb) * hw + ca * hw);
    }
    return detail::make_result<T>(std::move(out_shape), std::move(out), {a, b},
                                  [n, ca, cb, hw](TensorImpl<T>& self) {
                                      auto& pa = *self.parents[0];
                                      auto& pb = *self.parents[1];
                                      if (pa.requires_grad) pa.ensure_grad();
                                      if (pb.requires_grad) pb.ensure_grad();
                                      for (std::size_t i = 0; i < n; ++i) {
                                          const T* g = self.grad.data() + i * (ca + cb) * hw;
                                          if (pa.requires_grad)
                                              for (std::size_t j = 0; j < ca * hw; ++j)
                                                  pa.grad[i * ca * hw + j] += g[j];
                                          if (pb.requires_grad)
                                              for (std::size_t j = 0; j < cb * hw; ++j)
                                                  pb.grad[i * cb * hw + j] += g[ca * hw + j];
                                      }
                                  });
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

namespace detail {
// c[M,N] += a[M,K] * b[K,N]; every c element accumulates over k in ascending
// order. Transposed operands are materialized once so the hot loop is a
// contiguous row axpy.
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
              bool transpose_a, bool transpose_b) {
    std::vector<T> abuf, bbuf;
    if (transpose_a) {
        abuf.resize(m * k);
        for (std::size_t p = 0; p < k; ++p)
            for (std::size_t i = 0; i < m; ++i) abuf[i * k + p] = a[p * m + i];
        a = abuf.data();
    }
    if (transpose_b) {
        bbuf.resize(k * n);
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t p = 0; p < k; ++p) bbuf[p * n + j] = b[j * k + p];
        b = bbuf.data();
    }
    for (std::size_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        const T* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = arow[p];
            const T* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}
} // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    check_shape(a.ndim() == 2 && b.ndim() == 2, "matmul: expects 2-D inputs");
    check_shape(a.dim(1) == b.dim(0), "matmul: inner dims differ: " + shape_str(a.shape()) +
                                          " x " + shape_str(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<T> out(m * n, T(0));
    detail::gemm_acc(a.data().data(), b.data().data(), out.data(), m, k, n, false, false);
    return detail::make_result<T>({m, n}, std::move(out), {a, b}, [m, k, n](TensorImpl<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad(); // dA = dC * B^T
            detail::gemm_acc(self.grad.data(), pb.data.data(), pa.grad.data(), m, n, k, false, true);
        }
        if (pb.requires_grad) {
            pb.ensure_grad(); // dB = A^T * dC
            detail::gemm_acc(pa.data.data(), self.grad.data(), pb.grad.data(), k, m, n, true, false);
        }
    });
}

/// Batched matmul: [B,M,K] x [B,K,N] -> [B,M,N].
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
    check_shape(a.ndim() == 3 && b.ndim() == 3, "bmm: expects 3-D inputs");
    check_shape(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(1),
                "bmm: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const std::size_t bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    std::vector<T> out(bs * m * n, T(0));
    for (std::size_t i = 0; i < bs; ++i)
        detail::gemm_acc(a.data().data() + i * m * k, b.data().data() + i * k * n,
                         out.data() + i * m * n, m, k, n, false, false);
    return detail::make_result<T>({bs, m, n}, std::move(out), {a, b},
                                  [bs, m, k, n](TensorImpl<T>& self) {
                                      auto& pa = *self.parents[0];
                                      auto& pb = *self.parents[1];
                                      if (pa.requires_grad) pa.ensure_grad();
                                      if (pb.requires_grad) pb.ensure_grad();
                                      for (std::size_t i = 0; i < bs; ++i) {
                                          const T* g = self.grad.data() + i * m * n;
                                          if (pa.requires_grad)
                                              detail::gemm_acc(g, pb.data.data() + i * k * n,
                                                               pa.grad.data() + i * m * k, m, n, k,
                                                               false, true);
                                          if (pb.requires_grad)
                                              detail::gemm_acc(pa.data.data() + i * m * k, g,
                                                               pb.grad.data() + i * k * n, k, m, n,
                                                               true, false);
                                      }
                                  });
}

/// x[N,K] * w[K,M] + b[M] (row-broadcast bias handled inside the op).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    check_shape(x.ndim() == 2 && w.ndim() == 2 && b.ndim() == 1, "linear: bad ranks");
    check_shape(x.dim(1) == w.dim(0) && w.dim(1) == b.dim(0),
                "linear: incompatible shapes " + shape_str(x.shape()) + " x " +
                    shape_str(w.shape()));
    const std::size_t n = x.dim(0), k = x.dim(1), m = w.dim(1);
    std::vector<T> out(n * m);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) out[i * m + j] = b.data()[j];
    detail::gemm_acc(x.data().data(), w.data().data(), out.data(), n, k, m, false, false);
    return detail::make_result<T>({n, m}, std::move(out), {x, w, b},
                                  [n, k, m](TensorImpl<T>& self) {
                                      auto& px = *self.parents[0];
                                      auto& pw = *self.parents[1];
                                      auto& pb = *self.parents[2];
                                      if (px.requires_grad) {
                                          px.ensure_grad();
                                          detail::gemm_acc(self.grad.data(), pw.data.data(),
                                                           px.grad.data(), n, m, k, false, true);
                                      }
                                      if (pw.requires_grad) {
                                          pw.ensure_grad();
                                          detail::gemm_acc(px.data.data(), self.grad.data(),
                                                           pw.grad.data(), k, n, m, true, false);
                                      }
                                      if (pb.requires_grad) {
                                          pb.ensure_grad();
                                          for (std::size_t i = 0; i < n; ++i)
                                              for (std::size_t j = 0; j < m; ++j)
                                                  pb.grad[j] += self.grad[i * m + j];
                                      }
                                  });
}

// ---------------------------------------------------------------------------
// Convolution and friends
// ---------------------------------------------------------------------------

namespace detail {
template <typename T>
std::vector<T> pad_nchw(const T* x, std::size_t n, std::size_t c, std::size_t h, std::size_t w,
                        std::size_t pad) {
    const std::size_t hp = h + 2 * pad, wp = w + 2 * pad;
    std::vector<T> out(n * c * hp * wp, T(0));
    for (std::size_t i = 0; i < n * c; ++i)
        for (std::size_t r = 0; r < h; ++r)
            std::copy_n(x + (i * h + r) * w, w, out.data() + (i * hp + r + pad) * wp + pad);
    return out;
}

// col[(ci*kh + r)*kw + s][i*ow + j] = xpad[ci][i*stride + r][j*stride + s]
template <typename T>
void im2col(const T* xpad, std::size_t c, std::size_t hp, std::size_t wp, std::size_t kh,
            std::size_t kw, std::size_t oh, std::size_t ow, std::size_t stride, T* col) {
    for (std::size_t ci = 0; ci < c; ++ci) {
        const T* plane = xpad + ci * hp * wp;
        for (std::size_t r = 0; r < kh; ++r)
            for (std::size_t s = 0; s < kw; ++s) {
                T* crow = col + ((ci * kh + r) * kw + s) * oh * ow;
                for (std::size_t i = 0; i < oh; ++i) {
                    const T* xr = plane + (i * stride + r) * wp + s;
                    if (stride == 1) {
                        std::copy_n(xr, ow, crow + i * ow);
                    } else {
                        for (std::size_t j = 0; j < ow; ++j) crow[i * ow + j] = xr[j * stride];
                    }
                }
            }
    }
}

// Scatter-add of a column gradient back into the padded input gradient.
template <typename T>
void col2im_acc(const T* col, std::size_t c, std::size_t hp, std::size_t wp, std::size_t kh,
                std::size_t kw, std::size_t oh, std::size_t ow, std::size_t stride, T* dxpad) {
    for (std::size_t ci = 0; ci < c; ++ci) {
        T* plane = dxpad + ci * hp * wp;
        for (std::size_t r = 0; r < kh; ++r)
            for (std::size_t s = 0; s < kw; ++s) {
                const T* crow = col + ((ci * kh + r) * kw + s) * oh * ow;
                for (std::size_t i = 0; i < oh; ++i) {
                    T* xr = plane + (i * stride + r) * wp + s;
                    if (stride == 1) {
                        for (std::size_t j = 0; j < ow; ++j) xr[j] += crow[i * ow + j];
                    } else {
                        for (std::size_t j = 0; j < ow; ++j) xr[j * stride] += crow[i * ow + j];
                    }
                }
            }
    }
}
} // namespace detail

/// Cross-correlation of NCHW input with [K,C,kh,kw] kernels.
/// Output H' = (H + 2*pad - kh) / stride + 1; non-integer sizes are rejected.
/// Per output element the sum runs over (c, kh, kw) in row-major order.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 std::size_t stride = 1, std::size_t pad = 0) {
    check_shape(x.ndim() == 4 && w.ndim() == 4, "conv2d: expects NCHW input and KCkhkw weight");
    check_shape(x.dim(1) == w.dim(1), "conv2d: channel mismatch " + shape_str(x.shape()) + " vs " +
                                          shape_str(w.shape()));
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const std::size_t k = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    check_shape(!bias.defined() || (bias.ndim() == 1 && bias.dim(0) == k), "conv2d: bad bias shape");
    if (kh > h + 2 * pad || kw > wd + 2 * pad)
        throw ShapeError("conv2d: kernel larger than padded input");
    if ((h + 2 * pad - kh) % stride != 0 || (wd + 2 * pad - kw) % stride != 0)
        throw ConfigError("conv2d: non-integer output size for stride " + std::to_string(stride));
    const std::size_t oh = (h + 2 * pad - kh) / stride + 1;
    const std::size_t ow = (wd + 2 * pad - kw) / stride + 1;
    const std::size_t hp = h + 2 * pad, wp = wd + 2 * pad;

    const std::size_t taps = c * kh * kw;
    const std::size_t ohw = oh * ow;
    std::vector<T> xpad = detail::pad_nchw(x.data().data(), n, c, h, wd, pad);
    std::vector<T> out(n * k * ohw, T(0));
    const T* wdat = w.data().data();
    // im2col + GEMM. Each output element accumulates its taps in (c, kh, kw)
    // order, matching the direct per-element loop bit for bit; the column
    // buffer is shared across output channels.
    std::vector<T> col(taps * ohw);
    for (std::size_t ni = 0; ni < n; ++ni) {
        const T* xn = xpad.data() + ni * c * hp * wp;
        detail::im2col(xn, c, hp, wp, kh, kw, oh, ow, stride, col.data());
        for (std::size_t ki = 0; ki < k; ++ki) {
            T* oplane = out.data() + (ni * k + ki) * ohw;
            const T b0 = bias.defined() ? bias.data()[ki] : T(0);
            for (std::size_t j = 0; j < ohw; ++j) oplane[j] = b0;
        }
        detail::gemm_acc(wdat, col.data(), out.data() + ni * k * ohw, k, taps, ohw, false, false);
    }

    std::vector<Tensor<T>> parents = {x, w};
    if (bias.defined()) parents.push_back(bias);
    auto backward = [n, c, h, wd, k, kh, kw, oh, ow, stride, pad, hp, wp, taps,
                     ohw](TensorImpl<T>& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        TensorImpl<T>* pb = self.parents.size() > 2 ? self.parents[2].get() : nullptr;
        std::vector<T> xpad = detail::pad_nchw(px.data.data(), n, c, h, wd, pad);
        std::vector<T> dxpad;
        if (px.requires_grad) {
            dxpad.assign(n * c * hp * wp, T(0));
            px.ensure_grad();
        }
        if (pw.requires_grad) pw.ensure_grad();
        if (pb && pb->requires_grad) pb->ensure_grad();
        std::vector<T> col(taps * ohw), dcol;
        if (px.requires_grad) dcol.resize(taps * ohw);
        for (std::size_t ni = 0; ni < n; ++ni) {
            const T* g = self.grad.data() + ni * k * ohw;
            if (pb && pb->requires_grad) {
                for (std::size_t ki = 0; ki < k; ++ki) {
                    T acc = 0;
                    const T* gp = g + ki * ohw;
                    for (std::size_t j = 0; j < ohw; ++j) acc += gp[j];
                    pb->grad[ki] += acc;
                }
            }
            if (pw.requires_grad || px.requires_grad)
                detail::im2col(xpad.data() + ni * c * hp * wp, c, hp, wp, kh, kw, oh, ow, stride,
                               col.data());
            if (pw.requires_grad) // dW += g * col^T
                detail::gemm_acc(g, col.data(), pw.grad.data(), k, ohw, taps, false, true);
            if (px.requires_grad) { // dcol = W^T * g, scattered back
                std::fill(dcol.begin(), dcol.end(), T(0));
                detail::gemm_acc(pw.data.data(), g, dcol.data(), taps, k, ohw, true, false);
                detail::col2im_acc(dcol.data(), c, hp, wp, kh, kw, oh, ow, stride,
                                   dxpad.data() + ni * c * hp * wp);
            }
        }
        if (px.requires_grad) {
            for (std::size_t i = 0; i < n * c; ++i)
                for (std::size_t r = 0; r < h; ++r)
                    for (std::size_t s = 0; s < wd; ++s)
                        px.grad[(i * h + r) * wd + s] += dxpad[(i * hp + r + pad) * wp + pad + s];
        }
    };
    return detail::make_result<T>({n, k, oh, ow}, std::move(out), std::move(parents),
                                  std::move(backward));
}

/// 2x2 average pooling with stride 2. Requires even H and W.
template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x) {
    check_shape(x.ndim() == 4, "avg_pool2d: expects NCHW input");
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h % 2 != 0 || w % 2 != 0) throw ConfigError("avg_pool2d: H and W must be even");
    const std::size_t oh = h / 2, ow = w / 2;
    std::vector<T> out(n * c * oh * ow);
    const T* src = x.data().data();
    for (std::size_t i = 0; i < n * c; ++i)
        for (std::size_t r = 0; r < oh; ++r)
            for (std::size_t s = 0; s < ow; ++s) {
                const T* p = src + (i * h + 2 * r) * w + 2 * s;
                out[(i * oh + r) * ow + s] = (p[0] + p[1] + p[w] + p[w + 1]) * T(0.25);
            }
    return detail::make_result<T>({n, c, oh, ow}, std::move(out), {x},
                                  [n, c, h, w, oh, ow](TensorImpl<T>& self) {
                                      auto& p = *self.parents[0];
                                      if (!p.requires_grad) return;
                                      p.ensure_grad();
                                      for (std::size_t i = 0; i < n * c; ++i)
                                          for (std::size_t r = 0; r < oh; ++r)
                                              for (std::size_t s = 0; s < ow; ++s) {
                                                  const T g =
                                                      self.grad[(i * oh + r) * ow + s] * T(0.25);
                                                  T* q = p.grad.data() + (i * h + 2 * r) * w + 2 * s;
                                                  q[0] += g;
                                                  q[1] += g;
                                                  q[w] += g;
                                                  q[w + 1] += g;
                                              }
                                  });
}

/// Nearest-neighbour 2x upsampling.
template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
    check_shape(x.ndim() == 4, "upsample_nearest2x: expects NCHW input");
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t oh = 2 * h, ow = 2 * w;
    std::vector<T> out(n * c * oh * ow);
    const T* src = x.data().data();
    for (std::size_t i = 0; i < n * c; ++i)
        for (std::size_t r = 0; r < h; ++r)
            for (std::size_t s = 0; s < w; ++s) {
                const T v = src[(i * h + r) * w + s];
                T* q = out.data() + (i * oh + 2 * r) * ow + 2 * s;
                q[0] = v;
                q[1] = v;
                q[ow] = v;
                q[ow + 1] = v;
            }
    return detail::make_result<T>({n, c, oh, ow}, std::move(out), {x},
                                  [n, c, h, w, oh, ow](TensorImpl<T>& self) {
                                      auto& p = *self.parents[0];
                                      if (!p.requires_grad) return;
                                      p.ensure_grad();
                                      for (std::size_t i = 0; i < n * c; ++i)
                                          for (std::size_t r = 0; r < h; ++r)
                                              for (std::size_t s = 0; s < w; ++s) {
                                                  const T* q = self.grad.data() +
                                                               (i * oh + 2 * r) * ow + 2 * s;
                                                  p.grad[(i * h + r) * w + s] +=
                                                      q[0] + q[1] + q[ow] + q[ow + 1];
                                              }
                                  });
}

// ---------------------------------------------------------------------------
// Normalization and attention pieces
// ---------------------------------------------------------------------------

/// Group count for group_norm: the largest divisor of c that is <= 32 while
/// keeping at least two channels per group.
inline std::size_t group_count(std::size_t c) {
    for (std::size_t g = std::min<std::size_t>(32, c / 2); g >= 1; --g)
        if (c % g == 0) return g;
    return 1;
}

/// GroupNorm over NCHW: per (sample, group) statistics, per-channel affine.
template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     std::size_t groups, T eps = T(1e-5)) {
    check_shape(x.ndim() == 4, "group_norm: expects NCHW input");
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    check_shape(c % groups == 0, "group_norm: channels not divisible by groups");
    check_shape(gamma.numel() == c && beta.numel() == c, "group_norm: affine params must be [C]");
    const std::size_t cg = c / groups;      // channels per group
    const std::size_t gs = cg * hw;         // elements per group
    std::vector<T> out(x.numel());
    std::vector<T> xhat(x.numel());
    std::vector<T> inv_std(n * groups);
    const T* src = x.data().data();
    for (std::size_t ni = 0; ni < n; ++ni) {
        for (std::size_t gi = 0; gi < groups; ++gi) {
            const std::size_t base = (ni * c + gi * cg) * hw;
            T mean = 0;
            for (std::size_t j = 0; j < gs; ++j) mean += src[base + j];
            mean /= static_cast<T>(gs);
            T var = 0;
            for (std::size_t j = 0; j < gs; ++j) {
                const T d = src[base + j] - mean;
                var += d * d;
            }
            var /= static_cast<T>(gs);
            const T inv = T(1) / std::sqrt(var + eps);
            inv_std[ni * groups + gi] = inv;
            for (std::size_t j = 0; j < gs; ++j) xhat[base + j] = (src[base + j] - mean) * inv;
        }
        for (std::size_t ci = 0; ci < c; ++ci) {
            const std::size_t base = (ni * c + ci) * hw;
            const T g = gamma.data()[ci], b = beta.data()[ci];
            for (std::size_t j = 0; j < hw; ++j) out[base + j] = g * xhat[base + j] + b;
        }
    }
    auto backward = [n, c, hw, groups, cg, gs, xhat = std::move(xhat),
                     inv_std = std::move(inv_std)](TensorImpl<T>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        if (pg.requires_grad) pg.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        if (px.requires_grad) px.ensure_grad();
        for (std::size_t ni = 0; ni < n; ++ni) {
            if (pg.requires_grad || pb.requires_grad) {
                for (std::size_t ci = 0; ci < c; ++ci) {
                    const std::size_t base = (ni * c + ci) * hw;
                    for (std::size_t j = 0; j < hw; ++j) {
                        const T g = self.grad[base + j];
                        if (pg.requires_grad) pg.grad[ci] += g * xhat[base + j];
                        if (pb.requires_grad) pb.grad[ci] += g;
                    }
                }
            }
            if (!px.requires_grad) continue;
            for (std::size_t gi = 0; gi < groups; ++gi) {
                const std::size_t base = (ni * c + gi * cg) * hw;
                // dxhat = gout * gamma(channel); reduce then redistribute.
                T sum_d = 0, sum_dx = 0;
                for (std::size_t j = 0; j < gs; ++j) {
                    const std::size_t ci = gi * cg + j / hw;
                    const T d = self.grad[base + j] * pg.data[ci];
                    sum_d += d;
                    sum_dx += d * xhat[base + j];
                }
                const T inv = inv_std[ni * groups + gi];
                const T m = static_cast<T>(gs);
                for (std::size_t j = 0; j < gs; ++j) {
                    const std::size_t ci = gi * cg + j / hw;
                    const T d = self.grad[base + j] * pg.data[ci];
                    px.grad[base + j] += inv / m * (m * d - sum_d - xhat[base + j] * sum_dx);
                }
            }
        }
    };
    return detail::make_result<T>(x.shape(), std::move(out), {x, gamma, beta}, std::move(backward));
}

/// Softmax over the last (contiguous) axis with max subtraction.
template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
    check_shape(x.ndim() >= 1, "softmax_lastdim: empty shape");
    const std::size_t cols = x.dim(x.ndim() - 1);
    const std::size_t rows = x.numel() / cols;
    std::vector<T> out(x.numel());
    const T* src = x.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = src + r * cols;
        T mx = row[0];
        for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, row[j]);
        T sum = 0;
        for (std::size_t j = 0; j < cols; ++j) {
            const T e = std::exp(row[j] - mx);
            out[r * cols + j] = e;
            sum += e;
        }
        const T inv = T(1) / sum;
        for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] *= inv;
    }
    return detail::make_result<T>(x.shape(), std::move(out), {x},
                                  [rows, cols](TensorImpl<T>& self) {
                                      auto& p = *self.parents[0];
                                      if (!p.requires_grad) return;
                                      p.ensure_grad();
                                      for (std::size_t r = 0; r < rows; ++r) {
                                          const T* s = self.data.data() + r * cols;
                                          const T* g = self.grad.data() + r * cols;
                                          T dot = 0;
                                          for (std::size_t j = 0; j < cols; ++j) dot += g[j] * s[j];
                                          for (std::size_t j = 0; j < cols; ++j)
                                              p.grad[r * cols + j] += s[j] * (g[j] - dot);
                                      }
                                  });
}

// ---------------------------------------------------------------------------
// Gather / broadcast-style fused ops
// ---------------------------------------------------------------------------

/// Selects rows of an embedding table: table[V,D], ids[N] -> [N,D].
template <typename T>
Tensor<T> rows_select(const Tensor<T>& table, const std::vector<int>& ids) {
    check_shape(table.ndim() == 2, "rows_select: table must be 2-D");
    const std::size_t v = table.dim(0), d = table.dim(1), n = ids.size();
    for (int id : ids)
        check_shape(id >= 0 && static_cast<std::size_t>(id) < v,
                    "rows_select: id " + std::to_string(id) + " out of range [0," +
                        std::to_string(v) + ")");
    std::vector<T> out(n * d);
    for (std::size_t i = 0; i < n; ++i)
        std::copy_n(table.data().data() + static_cast<std::size_t>(ids[i]) * d, d,
                    out.data() + i * d);
    return detail::make_result<T>({n, d}, std::move(out), {table},
                                  [ids, d](TensorImpl<T>& self) {
                                      auto& p = *self.parents[0];
                                      if (!p.requires_grad) return;
                                      p.ensure_grad();
                                      for (std::size_t i = 0; i < ids.size(); ++i)
                                          for (std::size_t j = 0; j < d; ++j)
                                              p.grad[static_cast<std::size_t>(ids[i]) * d + j] +=
                                                  self.grad[i * d + j];
                                  });
}

/// x[N,C,H,W] + v[N,C] broadcast over spatial positions.
template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& v) {
    check_shape(x.ndim() == 4 && v.ndim() == 2, "add_channel_bias: bad ranks");
    check_shape(x.dim(0) == v.dim(0) && x.dim(1) == v.dim(1),
                "add_channel_bias: N,C mismatch " + shape_str(x.shape()) + " vs " +
                    shape_str(v.shape()));
    const std::size_t nc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < nc; ++i) {
        const T b = v.data()[i];
        const T* src = x.data().data() + i * hw;
        T* dst = out.data() + i * hw;
        for (std::size_t j = 0; j < hw; ++j) dst[j] = src[j] + b;
    }
    return detail::make_result<T>(x.shape(), std::move(out), {x, v},
                                  [nc, hw](TensorImpl<T>& self) {
                                      auto& px = *self.parents[0];
                                      auto& pv = *self.parents[1];
                                      if (px.requires_grad) detail::accumulate(px, self.grad);
                                      if (pv.requires_grad) {
                                          pv.ensure_grad();
                                          for (std::size_t i = 0; i < nc; ++i) {
                                              T acc = 0;
                                              const T* g = self.grad.data() + i * hw;
                                              for (std::size_t j = 0; j < hw; ++j) acc += g[j];
                                              pv.grad[i] += acc;
                                          }
                                      }
                                  });
}

/// Inverted dropout: keeps with probability 1-p and rescales by 1/(1-p).
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng) {
    check_shape(p >= 0.0 && p < 1.0, "dropout: p must be in [0,1)");
    if (p == 0.0) return x;
    const T scale = static_cast<T>(1.0 / (1.0 - p));
    std::vector<T> mask(x.numel());
    for (std::size_t i = 0; i < mask.size(); ++i)
        mask[i] = rng.uniform() < p ? T(0) : scale;
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * mask[i];
    return detail::make_result<T>(x.shape(), std::move(out), {x},
                                  [mask = std::move(mask)](TensorImpl<T>& self) {
                                      auto& p0 = *self.parents[0];
                                      if (!p0.requires_grad) return;
                                      p0.ensure_grad();
                                      for (std::size_t i = 0; i < self.grad.size(); ++i)
                                          p0.grad[i] += self.grad[i] * mask[i];
                                  });
}

/// Mean cross-entropy of logits[N,C] against integer labels.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
    check_shape(logits.ndim() == 2, "cross_entropy: logits must be [N,C]");
    const std::size_t n = logits.dim(0), c = logits.dim(1);
    check_shape(labels.size() == n, "cross_entropy: label count mismatch");
    std::vector<T> probs(n * c);
    T loss = 0;
    const T* src = logits.data().data();
    for (std::size_t i = 0; i < n; ++i) {
        check_shape(labels[i] >= 0 && static_cast<std::size_t>(labels[i]) < c,
                    "cross_entropy: label out of range");
        const T* row = src + i * c;
        T mx = row[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        T sum = 0;
        for (std::size_t j = 0; j < c; ++j) {
            probs[i * c + j] = std::exp(row[j] - mx);
            sum += probs[i * c + j];
        }
        const T inv = T(1) / sum;
        for (std::size_t j = 0; j < c; ++j) probs[i * c + j] *= inv;
        loss -= std::log(probs[i * c + static_cast<std::size_t>(labels[i])]);
    }
    loss /= static_cast<T>(n);
    return detail::make_result<T>({1}, {loss}, {logits},
                                  [n, c, labels, probs = std::move(probs)](TensorImpl<T>& self) {
                                      auto& p = *self.parents[0];
                                      if (!p.requires_grad) return;
                                      p.ensure_grad();
                                      const T g = self.grad[0] / static_cast<T>(n);
                                      for (std::size_t i = 0; i < n; ++i)
                                          for (std::size_t j = 0; j < c; ++j) {
                                              T d = probs[i * c + j];
                                              if (j == static_cast<std::size_t>(labels[i])) d -= T(1);
                                              p.grad[i * c + j] += g * d;
                                          }
                                  });
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

/// Populates grads of every requires-grad leaf reachable from `loss`.
/// Repeated calls accumulate into existing grads.
template <typename T>
void backward(const Tensor<T>& loss) {
    check_shape(loss.numel() == 1,
                "backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (!loss.requires_grad()) return;

    // Iterative post-order DFS over parents; reverse order is a valid
    // topological order for gradient propagation.
    std::vector<TensorImpl<T>*> order;
    std::unordered_set<TensorImpl<T>*> visited;
    struct Frame {
        TensorImpl<T>* node;
        std::size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({loss.impl().get(), 0});
    visited.insert(loss.impl().get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.node->parents.size()) {
            TensorImpl<T>* p = f.node->parents[f.next_parent++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    // Interior grads are scratch space for this pass; only leaves accumulate
    // across repeated backward() calls.
    for (TensorImpl<T>* node : order)
        if (node->backward_fn) node->grad.assign(node->data.size(), T(0));

    loss.impl()->ensure_grad();
    loss.impl()->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl<T>* node = *it;
        if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
    }
}

// Convenience operators.
template <typename T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, T s) { return mul(a, s); }

/// True when every element is finite.
template <typename T>
bool all_finite(const Tensor<T>& t) {
    for (const T& v : t.data())
        if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
}

} // namespace diffkit
