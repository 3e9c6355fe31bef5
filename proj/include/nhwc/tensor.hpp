#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "nhwc/error.hpp"
#include "nhwc/rng.hpp"

namespace nhwc {

/// Dense row-major tensor with an optional gradient buffer. Real is float or
/// double; gradient checks run at double, training defaults to float.
template <class Real>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false) {
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = std::make_shared<std::vector<Real>>(count(t.shape_), Real(0));
        if (requires_grad) t.grad_ = std::make_shared<std::vector<Real>>(t.data_->size(), Real(0));
        return t;
    }

    static Tensor full(std::vector<std::size_t> shape, Real value) {
        Tensor t = zeros(std::move(shape));
        std::fill(t.data_->begin(), t.data_->end(), value);
        return t;
    }

    static Tensor scalar(Real value, bool requires_grad = false) {
        Tensor t = zeros({1}, requires_grad);
        (*t.data_)[0] = value;
        return t;
    }

    static Tensor from(std::vector<std::size_t> shape, std::vector<Real> values,
                       bool requires_grad = false) {
        if (count(shape) != values.size())
            throw InvalidInputError("tensor data length does not match shape");
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = std::make_shared<std::vector<Real>>(std::move(values));
        if (requires_grad) t.grad_ = std::make_shared<std::vector<Real>>(t.data_->size(), Real(0));
        return t;
    }

    static Tensor randn(std::vector<std::size_t> shape, Rng& rng, Real stddev,
                        bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (Real& v : *t.data_) v = static_cast<Real>(rng.normal()) * stddev;
        return t;
    }

    bool defined() const { return static_cast<bool>(data_); }
    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t numel() const { return data_ ? data_->size() : 0; }
    std::size_t rank() const { return shape_.size(); }

    std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
    std::size_t cols() const { return shape_.size() < 2 ? (shape_.empty() ? 0 : 1) : shape_[1]; }

    // Tensor is a handle over shared buffers: const on the handle does not
    // deep-protect the payload, mirroring shared_ptr semantics. Backward
    // closures rely on this to accumulate gradients through captured copies.
    Real* data() const { return data_->data(); }
    std::vector<Real>& vec() const { return *data_; }

    bool requires_grad() const { return static_cast<bool>(grad_); }
    Real* grad() const { return grad_->data(); }
    std::vector<Real>& grad_vec() const { return *grad_; }

    void set_requires_grad(bool on) {
        if (on && !grad_) grad_ = std::make_shared<std::vector<Real>>(data_->size(), Real(0));
        if (!on) grad_.reset();
    }

    void zero_grad() const {
        if (grad_) std::fill(grad_->begin(), grad_->end(), Real(0));
    }

    Real value() const {
        if (numel() != 1) throw InvalidInputError("value(): tensor is not a scalar");
        return (*data_)[0];
    }

    Real& at(std::size_t r, std::size_t c) const { return (*data_)[r * cols() + c]; }

    void check_finite(const char* what) const {
        for (std::size_t i = 0; i < data_->size(); ++i) {
            if (!std::isfinite((*data_)[i]))
                throw NumericalError(std::string(what) + ": non-finite value at index " +
                                     std::to_string(i));
        }
    }

    static std::size_t count(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (std::size_t d : shape) n *= d;
        return n;
    }

private:
    std::vector<std::size_t> shape_{};
    std::shared_ptr<std::vector<Real>> data_{};
    std::shared_ptr<std::vector<Real>> grad_{};
};

namespace detail {

// C[M,N] (+)= A[M,K] * B[K,N]; fixed loop order keeps reductions deterministic.
template <class Real>
void gemm_nn(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        Real* crow = c + i * n;
        const Real* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const Real av = arow[p];
            if (av == Real(0)) continue;
            const Real* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[M,N] (+)= A[M,K] * B[N,K]^T
template <class Real>
void gemm_nt(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const Real* arow = a + i * k;
        Real* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const Real* brow = b + j * k;
            Real s = 0;
            for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
            crow[j] += s;
        }
    }
}

// C[K,N] (+)= A[M,K]^T * B[M,N]
template <class Real>
void gemm_tn(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const Real* arow = a + i * k;
        const Real* brow = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const Real av = arow[p];
            if (av == Real(0)) continue;
            Real* crow = c + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <class Real>
Real gelu_value(Real x) {
    const Real c = Real(0.7978845608028654); // sqrt(2/pi)
    const Real u = c * (x + Real(0.044715) * x * x * x);
    return Real(0.5) * x * (Real(1) + std::tanh(u));
}

template <class Real>
Real gelu_grad(Real x) {
    const Real c = Real(0.7978845608028654);
    const Real x3 = x * x * x;
    const Real u = c * (x + Real(0.044715) * x3);
    const Real t = std::tanh(u);
    const Real du = c * (Real(1) + Real(0.134145) * x * x);
    return Real(0.5) * (Real(1) + t) + Real(0.5) * x * (Real(1) - t * t) * du;
}

} // namespace detail

/// Segment class a loss position belongs to; controls which vocabulary slice
/// the softmax is restricted to.
enum class TargetClass : std::uint8_t { none = 0, text = 1, speech = 2 };

/// Records differentiable operations in execution order. The record order is
/// a valid topological order (every op runs after its inputs exist), so
/// backward() replays it exactly once in reverse.
template <class Real>
class Tape {
public:
    bool recording = true;

    std::size_t size() const { return steps_.size(); }

    void backward(const Tensor<Real>& loss) {
        if (loss.numel() != 1) throw InvalidInputError("backward: loss must be a scalar");
        if (!loss.requires_grad())
            throw InvalidInputError("backward: loss does not require gradients");
        loss.grad()[0] += Real(1);
        for (std::size_t i = steps_.size(); i-- > 0;) steps_[i]();
        steps_.clear();
    }

    // ---- elementwise / shape ----

    Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
        require_same_shape(a, b, "add");
        Tensor<Real> out = make_like(a.shape(), track(a, b));
        const std::size_t n = a.numel();
        for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
        if (out.requires_grad()) {
            push([a, b, out]() mutable {
                const std::size_t m = out.numel();
                if (a.requires_grad())
                    for (std::size_t i = 0; i < m; ++i) a.grad()[i] += out.grad()[i];
                if (b.requires_grad())
                    for (std::size_t i = 0; i < m; ++i) b.grad()[i] += out.grad()[i];
            });
        }
        return out;
    }

    Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
        require_same_shape(a, b, "sub");
        Tensor<Real> out = make_like(a.shape(), track(a, b));
        const std::size_t n = a.numel();
        for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
        if (out.requires_grad()) {
            push([a, b, out]() mutable {
                const std::size_t m = out.numel();
                if (a.requires_grad())
                    for (std::size_t i = 0; i < m; ++i) a.grad()[i] += out.grad()[i];
                if (b.requires_grad())
                    for (std::size_t i = 0; i < m; ++i) b.grad()[i] -= out.grad()[i];
            });
        }
        return out;
    }

    Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
        require_same_shape(a, b, "mul");
        Tensor<Real> out = make_like(a.shape(), track(a, b));
        const std::size_t n = a.numel();
        for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
        if (out.requires_grad()) {
            push([a, b, out]() mutable {
                const std::size_t m = out.numel();
                if (a.requires_grad())
                    for (std::size_t i = 0; i < m; ++i) a.grad()[i] += out.grad()[i] * b.data()[i];
                if (b.requires_grad())
                    for (std::size_t i = 0; i < m; ++i) b.grad()[i] += out.grad()[i] * a.data()[i];
            });
        }
        return out;
    }

    Tensor<Real> scale(const Tensor<Real>& a, Real c) {
        Tensor<Real> out = make_like(a.shape(), track(a));
        const std::size_t n = a.numel();
        for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * c;
        if (out.requires_grad()) {
            push([a, out, c]() mutable {
                for (std::size_t i = 0; i < out.numel(); ++i) a.grad()[i] += out.grad()[i] * c;
            });
        }
        return out;
    }

    // Broadcast add of a length-N row vector to every row of an MxN matrix.
    // The only broadcast the engine supports besides matmul shapes.
    Tensor<Real> add_row(const Tensor<Real>& x, const Tensor<Real>& row) {
        if (x.cols() != row.numel()) throw InvalidInputError("add_row: width mismatch");
        Tensor<Real> out = make_like(x.shape(), track(x, row));
        const std::size_t m = x.rows(), n = x.cols();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j)
                out.data()[i * n + j] = x.data()[i * n + j] + row.data()[j];
        if (out.requires_grad()) {
            push([x, row, out, m, n]() mutable {
                if (x.requires_grad())
                    for (std::size_t i = 0; i < m * n; ++i) x.grad()[i] += out.grad()[i];
                if (row.requires_grad())
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) row.grad()[j] += out.grad()[i * n + j];
            });
        }
        return out;
    }

    Tensor<Real> gelu(const Tensor<Real>& x) {
        Tensor<Real> out = make_like(x.shape(), track(x));
        const std::size_t n = x.numel();
        for (std::size_t i = 0; i < n; ++i) out.data()[i] = detail::gelu_value(x.data()[i]);
        if (out.requires_grad()) {
            push([x, out]() mutable {
                for (std::size_t i = 0; i < out.numel(); ++i)
                    x.grad()[i] += out.grad()[i] * detail::gelu_grad(x.data()[i]);
            });
        }
        return out;
    }

    // Inverted dropout. p == 0 or !training is an exact pass-through.
    Tensor<Real> dropout(const Tensor<Real>& x, Real p, Rng& rng, bool training) {
        if (p <= Real(0) || !training) return x;
        if (p >= Real(1)) throw InvalidInputError("dropout: p must be < 1");
        Tensor<Real> out = make_like(x.shape(), track(x));
        const Real keep = Real(1) - p;
        auto mask = std::make_shared<std::vector<Real>>(x.numel());
        for (std::size_t i = 0; i < x.numel(); ++i) {
            (*mask)[i] = rng.uniform() < static_cast<double>(p) ? Real(0) : Real(1) / keep;
            out.data()[i] = x.data()[i] * (*mask)[i];
        }
        if (out.requires_grad()) {
            push([x, out, mask]() mutable {
                for (std::size_t i = 0; i < out.numel(); ++i)
                    x.grad()[i] += out.grad()[i] * (*mask)[i];
            });
        }
        return out;
    }

    Tensor<Real> reshape(const Tensor<Real>& x, std::vector<std::size_t> shape) {
        if (Tensor<Real>::count(shape) != x.numel())
            throw InvalidInputError("reshape: element count mismatch");
        Tensor<Real> out = make_like(shape, track(x));
        std::copy(x.data(), x.data() + x.numel(), out.data());
        if (out.requires_grad()) {
            push([x, out]() mutable {
                for (std::size_t i = 0; i < out.numel(); ++i) x.grad()[i] += out.grad()[i];
            });
        }
        return out;
    }

    Tensor<Real> slice_cols(const Tensor<Real>& x, std::size_t c0, std::size_t len) {
        if (c0 + len > x.cols()) throw InvalidInputError("slice_cols: out of range");
        const std::size_t m = x.rows(), n = x.cols();
        Tensor<Real> out = make_like({m, len}, track(x));
        for (std::size_t i = 0; i < m; ++i)
            std::copy(x.data() + i * n + c0, x.data() + i * n + c0 + len, out.data() + i * len);
        if (out.requires_grad()) {
            push([x, out, c0, len, m, n]() mutable {
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < len; ++j)
                        x.grad()[i * n + c0 + j] += out.grad()[i * len + j];
            });
        }
        return out;
    }

    Tensor<Real> concat_cols(const std::vector<Tensor<Real>>& parts) {
        if (parts.empty()) throw InvalidInputError("concat_cols: no inputs");
        const std::size_t m = parts[0].rows();
        std::size_t total = 0;
        bool any_grad = false;
        for (const auto& p : parts) {
            if (p.rows() != m) throw InvalidInputError("concat_cols: row count mismatch");
            total += p.cols();
            any_grad = any_grad || p.requires_grad();
        }
        Tensor<Real> out = make_like({m, total}, recording && any_grad);
        std::size_t off = 0;
        for (const auto& p : parts) {
            const std::size_t n = p.cols();
            for (std::size_t i = 0; i < m; ++i)
                std::copy(p.data() + i * n, p.data() + (i + 1) * n, out.data() + i * total + off);
            off += n;
        }
        if (out.requires_grad()) {
            push([parts, out, m, total]() mutable {
                std::size_t o = 0;
                for (auto& p : parts) {
                    const std::size_t n = p.cols();
                    if (p.requires_grad())
                        for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t j = 0; j < n; ++j)
                                p.grad()[i * n + j] += out.grad()[i * total + o + j];
                    o += n;
                }
            });
        }
        return out;
    }

    Tensor<Real> concat_rows(const std::vector<Tensor<Real>>& parts) {
        if (parts.empty()) throw InvalidInputError("concat_rows: no inputs");
        const std::size_t n = parts[0].cols();
        std::size_t total = 0;
        bool any_grad = false;
        for (const auto& p : parts) {
            if (p.cols() != n) throw InvalidInputError("concat_rows: column count mismatch");
            total += p.rows();
            any_grad = any_grad || p.requires_grad();
        }
        Tensor<Real> out = make_like({total, n}, recording && any_grad);
        std::size_t off = 0;
        for (const auto& p : parts) {
            std::copy(p.data(), p.data() + p.numel(), out.data() + off);
            off += p.numel();
        }
        if (out.requires_grad()) {
            push([parts, out]() mutable {
                std::size_t o = 0;
                for (auto& p : parts) {
                    if (p.requires_grad())
                        for (std::size_t i = 0; i < p.numel(); ++i) p.grad()[i] += out.grad()[o + i];
                    o += p.numel();
                }
            });
        }
        return out;
    }

    // ---- matrix products ----

    Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
        if (a.cols() != b.rows()) throw InvalidInputError("matmul: inner dimension mismatch");
        const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
        Tensor<Real> out = make_like({m, n}, track(a, b));
        detail::gemm_nn(a.data(), b.data(), out.data(), m, k, n);
        if (out.requires_grad()) {
            push([a, b, out, m, k, n]() mutable {
                if (a.requires_grad()) detail::gemm_nt(out.grad(), b.data(), a.grad(), m, n, k);
                if (b.requires_grad()) detail::gemm_tn(a.data(), out.grad(), b.grad(), m, k, n);
            });
        }
        return out;
    }

    // A[M,K] * B[N,K]^T; used for attention scores.
    Tensor<Real> matmul_nt(const Tensor<Real>& a, const Tensor<Real>& b) {
        if (a.cols() != b.cols()) throw InvalidInputError("matmul_nt: inner dimension mismatch");
        const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
        Tensor<Real> out = make_like({m, n}, track(a, b));
        detail::gemm_nt(a.data(), b.data(), out.data(), m, k, n);
        if (out.requires_grad()) {
            push([a, b, out, m, k, n]() mutable {
                if (a.requires_grad()) detail::gemm_nn(out.grad(), b.data(), a.grad(), m, n, k);
                if (b.requires_grad()) detail::gemm_tn(out.grad(), a.data(), b.grad(), m, n, k);
            });
        }
        return out;
    }

    // ---- normalization / attention ----

    Tensor<Real> layer_norm(const Tensor<Real>& x, const Tensor<Real>& gain,
                            const Tensor<Real>& bias, Real eps = Real(1e-5)) {
        const std::size_t m = x.rows(), n = x.cols();
        if (gain.numel() != n || bias.numel() != n)
            throw InvalidInputError("layer_norm: gain/bias width mismatch");
        Tensor<Real> out = make_like(x.shape(), track(x, gain, bias));
        auto xhat = std::make_shared<std::vector<Real>>(m * n);
        auto inv_std = std::make_shared<std::vector<Real>>(m);
        for (std::size_t i = 0; i < m; ++i) {
            const Real* xr = x.data() + i * n;
            Real mean = 0;
            for (std::size_t j = 0; j < n; ++j) mean += xr[j];
            mean /= Real(n);
            Real var = 0;
            for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mean) * (xr[j] - mean);
            var /= Real(n);
            const Real is = Real(1) / std::sqrt(var + eps);
            (*inv_std)[i] = is;
            for (std::size_t j = 0; j < n; ++j) {
                const Real h = (xr[j] - mean) * is;
                (*xhat)[i * n + j] = h;
                out.data()[i * n + j] = gain.data()[j] * h + bias.data()[j];
            }
        }
        if (out.requires_grad()) {
            push([x, gain, bias, out, xhat, inv_std, m, n]() mutable {
                for (std::size_t i = 0; i < m; ++i) {
                    const Real* go = out.grad() + i * n;
                    const Real* h = xhat->data() + i * n;
                    if (gain.requires_grad())
                        for (std::size_t j = 0; j < n; ++j) gain.grad()[j] += go[j] * h[j];
                    if (bias.requires_grad())
                        for (std::size_t j = 0; j < n; ++j) bias.grad()[j] += go[j];
                    if (x.requires_grad()) {
                        Real sum_g = 0, sum_gh = 0;
                        for (std::size_t j = 0; j < n; ++j) {
                            const Real g = go[j] * gain.data()[j];
                            sum_g += g;
                            sum_gh += g * h[j];
                        }
                        const Real is = (*inv_std)[i];
                        for (std::size_t j = 0; j < n; ++j) {
                            const Real g = go[j] * gain.data()[j];
                            x.grad()[i * n + j] +=
                                is * (g - sum_g / Real(n) - h[j] * sum_gh / Real(n));
                        }
                    }
                }
            });
        }
        return out;
    }

    // Row-wise causal softmax over a [T,T] score matrix: row i normalizes over
    // columns 0..i, the rest are exactly zero.
    Tensor<Real> softmax_causal(const Tensor<Real>& scores) {
        if (scores.rows() != scores.cols())
            throw InvalidInputError("softmax_causal: matrix must be square");
        const std::size_t t = scores.rows();
        Tensor<Real> out = make_like(scores.shape(), track(scores));
        for (std::size_t i = 0; i < t; ++i) {
            const Real* sr = scores.data() + i * t;
            Real mx = sr[0];
            for (std::size_t j = 1; j <= i; ++j) mx = std::max(mx, sr[j]);
            Real denom = 0;
            for (std::size_t j = 0; j <= i; ++j) {
                const Real e = std::exp(sr[j] - mx);
                out.data()[i * t + j] = e;
                denom += e;
            }
            for (std::size_t j = 0; j <= i; ++j) out.data()[i * t + j] /= denom;
        }
        if (out.requires_grad()) {
            push([scores, out, t]() mutable {
                for (std::size_t i = 0; i < t; ++i) {
                    const Real* y = out.data() + i * t;
                    const Real* gy = out.grad() + i * t;
                    Real dot = 0;
                    for (std::size_t j = 0; j <= i; ++j) dot += y[j] * gy[j];
                    for (std::size_t j = 0; j <= i; ++j)
                        scores.grad()[i * t + j] += y[j] * (gy[j] - dot);
                }
            });
        }
        return out;
    }

    // ---- gather / structure ----

    Tensor<Real> embedding(const Tensor<Real>& table, const std::vector<int>& ids) {
        const std::size_t v = table.rows(), d = table.cols();
        for (int id : ids)
            if (id < 0 || static_cast<std::size_t>(id) >= v)
                throw InvalidInputError("embedding: id out of range: " + std::to_string(id));
        Tensor<Real> out = make_like({ids.size(), d}, track(table));
        for (std::size_t i = 0; i < ids.size(); ++i)
            std::copy(table.data() + static_cast<std::size_t>(ids[i]) * d,
                      table.data() + (static_cast<std::size_t>(ids[i]) + 1) * d,
                      out.data() + i * d);
        if (out.requires_grad()) {
            push([table, out, ids, d]() mutable {
                for (std::size_t i = 0; i < ids.size(); ++i)
                    for (std::size_t j = 0; j < d; ++j)
                        table.grad()[static_cast<std::size_t>(ids[i]) * d + j] +=
                            out.grad()[i * d + j];
            });
        }
        return out;
    }

    // Sliding-window unfold along time (im2col for 1-D convolutions over a
    // [T,C] sequence). Rows outside [0,T) read as pad_value.
    Tensor<Real> unfold_time(const Tensor<Real>& x, std::size_t kernel, std::size_t stride,
                             std::size_t pad, Real pad_value) {
        const std::size_t t = x.rows(), c = x.cols();
        if (t + 2 * pad < kernel) throw InvalidInputError("unfold_time: input too short");
        const std::size_t t_out = (t + 2 * pad - kernel) / stride + 1;
        Tensor<Real> out = make_like({t_out, kernel * c}, track(x));
        for (std::size_t i = 0; i < t_out; ++i) {
            for (std::size_t w = 0; w < kernel; ++w) {
                const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(i * stride + w) -
                                           static_cast<std::ptrdiff_t>(pad);
                Real* dst = out.data() + i * kernel * c + w * c;
                if (src < 0 || src >= static_cast<std::ptrdiff_t>(t))
                    std::fill(dst, dst + c, pad_value);
                else
                    std::copy(x.data() + static_cast<std::size_t>(src) * c,
                              x.data() + (static_cast<std::size_t>(src) + 1) * c, dst);
            }
        }
        if (out.requires_grad()) {
            push([x, out, kernel, stride, pad, t, c, t_out]() mutable {
                for (std::size_t i = 0; i < t_out; ++i)
                    for (std::size_t w = 0; w < kernel; ++w) {
                        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(i * stride + w) -
                                                   static_cast<std::ptrdiff_t>(pad);
                        if (src < 0 || src >= static_cast<std::ptrdiff_t>(t)) continue;
                        for (std::size_t j = 0; j < c; ++j)
                            x.grad()[static_cast<std::size_t>(src) * c + j] +=
                                out.grad()[i * kernel * c + w * c + j];
                    }
            });
        }
        return out;
    }

    Tensor<Real> mean_rows(const Tensor<Real>& x) {
        const std::size_t m = x.rows(), n = x.cols();
        if (m == 0) throw InvalidInputError("mean_rows: empty input");
        Tensor<Real> out = make_like({n}, track(x));
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) out.data()[j] += x.data()[i * n + j];
        for (std::size_t j = 0; j < n; ++j) out.data()[j] /= Real(m);
        if (out.requires_grad()) {
            push([x, out, m, n]() mutable {
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j)
                        x.grad()[i * n + j] += out.grad()[j] / Real(m);
            });
        }
        return out;
    }

    // ---- reductions / losses ----

    // sum(x .* w) as a scalar; w is typically a constant projection.
    Tensor<Real> dot_all(const Tensor<Real>& x, const Tensor<Real>& w) {
        require_same_shape(x, w, "dot_all");
        Tensor<Real> out = make_like({1}, track(x, w));
        Real s = 0;
        for (std::size_t i = 0; i < x.numel(); ++i) s += x.data()[i] * w.data()[i];
        out.data()[0] = s;
        if (out.requires_grad()) {
            push([x, w, out]() mutable {
                const Real g = out.grad()[0];
                if (x.requires_grad())
                    for (std::size_t i = 0; i < x.numel(); ++i) x.grad()[i] += g * w.data()[i];
                if (w.requires_grad())
                    for (std::size_t i = 0; i < w.numel(); ++i) w.grad()[i] += g * x.data()[i];
            });
        }
        return out;
    }

    Tensor<Real> mse(const Tensor<Real>& a, const Tensor<Real>& b) {
        require_same_shape(a, b, "mse");
        const std::size_t n = a.numel();
        Tensor<Real> out = make_like({1}, track(a, b));
        Real s = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const Real d = a.data()[i] - b.data()[i];
            s += d * d;
        }
        out.data()[0] = s / Real(n);
        if (out.requires_grad()) {
            push([a, b, out, n]() mutable {
                const Real g = out.grad()[0] * Real(2) / Real(n);
                for (std::size_t i = 0; i < n; ++i) {
                    const Real d = a.data()[i] - b.data()[i];
                    if (a.requires_grad()) a.grad()[i] += g * d;
                    if (b.requires_grad()) b.grad()[i] -= g * d;
                }
            });
        }
        return out;
    }

    // Forward takes the quantized values, backward routes the gradient to the
    // continuous input unchanged (straight-through estimator).
    Tensor<Real> straight_through(const Tensor<Real>& z, const Tensor<Real>& z_q) {
        require_same_shape(z, z_q, "straight_through");
        Tensor<Real> out = make_like(z.shape(), track(z));
        std::copy(z_q.data(), z_q.data() + z_q.numel(), out.data());
        if (out.requires_grad()) {
            push([z, out]() mutable {
                for (std::size_t i = 0; i < out.numel(); ++i) z.grad()[i] += out.grad()[i];
            });
        }
        return out;
    }

    /// Sum over masked positions of -log softmax(logits_t)[target_t].
    Tensor<Real> cross_entropy_logits(const Tensor<Real>& logits, const std::vector<int>& targets,
                                      const std::vector<std::uint8_t>& mask) {
        const std::size_t t = logits.rows(), v = logits.cols();
        if (targets.size() != t || mask.size() != t)
            throw InvalidInputError("cross_entropy_logits: targets/mask must have one entry per row");
        std::size_t active = 0;
        for (std::size_t i = 0; i < t; ++i) {
            if (!mask[i]) continue;
            ++active;
            if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v)
                throw InvalidInputError("cross_entropy_logits: target id out of range at row " +
                                        std::to_string(i));
        }
        if (active == 0) throw InvalidInputError("cross_entropy_logits: mask selects no positions");

        Tensor<Real> out = make_like({1}, track(logits));
        auto probs = std::make_shared<std::vector<Real>>();
        const bool keep_probs = out.requires_grad();
        if (keep_probs) probs->assign(t * v, Real(0));
        Real loss = 0;
        for (std::size_t i = 0; i < t; ++i) {
            if (!mask[i]) continue;
            const Real* row = logits.data() + i * v;
            Real mx = row[0];
            for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
            Real denom = 0;
            for (std::size_t j = 0; j < v; ++j) denom += std::exp(row[j] - mx);
            const Real lse = mx + std::log(denom);
            loss += lse - row[static_cast<std::size_t>(targets[i])];
            if (keep_probs)
                for (std::size_t j = 0; j < v; ++j)
                    (*probs)[i * v + j] = std::exp(row[j] - lse);
        }
        out.data()[0] = loss;
        if (out.requires_grad()) {
            push([logits, out, probs, targets, mask, t, v]() mutable {
                const Real g = out.grad()[0];
                for (std::size_t i = 0; i < t; ++i) {
                    if (!mask[i]) continue;
                    Real* gr = logits.grad() + i * v;
                    const Real* pr = probs->data() + i * v;
                    for (std::size_t j = 0; j < v; ++j) gr[j] += g * pr[j];
                    gr[static_cast<std::size_t>(targets[i])] -= g;
                }
            });
        }
        return out;
    }

private:
    std::vector<std::function<void()>> steps_;

    template <class... Ts>
    bool track(const Ts&... ts) const {
        return recording && (ts.requires_grad() || ...);
    }

    Tensor<Real> make_like(std::vector<std::size_t> shape, bool needs_grad) {
        return Tensor<Real>::zeros(std::move(shape), needs_grad);
    }

    static void require_same_shape(const Tensor<Real>& a, const Tensor<Real>& b, const char* op) {
        if (a.shape() != b.shape())
            throw InvalidInputError(std::string(op) + ": shape mismatch");
    }

    void push(std::function<void()> fn) { steps_.push_back(std::move(fn)); }
};

template <class Real>
struct GradCheckResult {
    Real max_rel_err = 0;
    std::size_t worst_param = 0;
    std::size_t worst_index = 0;
};

/// Compares reverse-mode gradients against central finite differences for
/// every entry of every parameter. LossFn is callable as (Tape<Real>&) ->
/// Tensor<Real> and must return a scalar.
template <class Real, class LossFn>
GradCheckResult<Real> grad_check(LossFn&& f, std::span<Tensor<Real>* const> params, Real eps) {
    for (Tensor<Real>* p : params) p->zero_grad();
    {
        Tape<Real> tape;
        Tensor<Real> loss = f(tape);
        if (!std::isfinite(loss.value())) throw NumericalError("grad_check: non-finite loss");
        tape.backward(loss);
    }
    std::vector<std::vector<Real>> ad_grads;
    ad_grads.reserve(params.size());
    for (Tensor<Real>* p : params) ad_grads.push_back(p->grad_vec());

    auto eval = [&]() -> Real {
        Tape<Real> tape;
        tape.recording = false;
        return f(tape).value();
    };

    GradCheckResult<Real> result;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor<Real>& p = *params[pi];
        for (std::size_t i = 0; i < p.numel(); ++i) {
            const Real orig = p.data()[i];
            p.data()[i] = orig + eps;
            const Real f_plus = eval();
            p.data()[i] = orig - eps;
            const Real f_minus = eval();
            p.data()[i] = orig;
            if (!std::isfinite(f_plus) || !std::isfinite(f_minus))
                throw NumericalError("grad_check: non-finite loss at parameter " +
                                     std::to_string(pi) + "[" + std::to_string(i) + "]");
            const Real fd = (f_plus - f_minus) / (Real(2) * eps);
            const Real ad = ad_grads[pi][i];
            const Real denom = std::max(Real(1e-12), std::abs(ad) + std::abs(fd));
            const Real rel = std::abs(ad - fd) / denom;
            if (rel > result.max_rel_err) {
                result.max_rel_err = rel;
                result.worst_param = pi;
                result.worst_index = i;
            }
        }
    }
    return result;
}

} // namespace nhwc
