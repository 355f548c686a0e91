#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "flowgen/errors.hpp"

namespace flowgen {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (auto e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

/// Dense row-major float64 tensor with value semantics. Copies share the
/// underlying buffer; tensors are treated as immutable once they have entered
/// a taped computation. `raw()` mutation is reserved for initializers and
/// optimizer updates between taped regions.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0)
        : impl_(std::make_shared<Impl>()) {
        impl_->shape = std::move(shape);
        impl_->data.assign(shape_numel(impl_->shape), fill);
    }

    Tensor(Shape shape, std::vector<double> data) : impl_(std::make_shared<Impl>()) {
        if (shape_numel(shape) != data.size())
            throw DimError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
        impl_->shape = std::move(shape);
        impl_->data = std::move(data);
    }

    static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
    static Tensor zeros(Shape s) { return Tensor(std::move(s), 0.0); }
    static Tensor full(Shape s, double v) { return Tensor(std::move(s), v); }

    bool defined() const { return static_cast<bool>(impl_); }
    const Shape& shape() const { return impl_->shape; }
    std::size_t ndim() const { return impl_->shape.size(); }
    std::size_t size() const { return impl_->data.size(); }
    std::size_t extent(std::size_t axis) const { return impl_->shape.at(axis); }

    const std::vector<double>& raw() const { return impl_->data; }
    std::vector<double>& raw() { return impl_->data; }

    double operator[](std::size_t flat) const { return impl_->data[flat]; }

    double at(std::initializer_list<std::size_t> idx) const {
        return impl_->data[flat_index(idx)];
    }

    /// Value of a rank-0 or single-element tensor.
    double value() const {
        if (size() != 1) throw ContractError("value() on non-scalar tensor " + shape_str(shape()));
        return impl_->data[0];
    }

    bool requires_grad() const { return impl_ && impl_->requires_grad; }
    Tensor& set_requires_grad(bool flag = true) {
        impl_->requires_grad = flag;
        return *this;
    }

    /// Gradient buffer (allocated on demand, zero-initialized).
    std::vector<double>& grad_buf() {
        if (impl_->grad.size() != impl_->data.size()) impl_->grad.assign(impl_->data.size(), 0.0);
        return impl_->grad;
    }
    const std::vector<double>& grad() const {
        if (impl_->grad.size() != impl_->data.size())
            throw ContractError("gradient not populated; run Tape::backward first");
        return impl_->grad;
    }
    void zero_grad() {
        if (impl_) impl_->grad.assign(impl_->data.size(), 0.0);
    }

    /// Identity comparison (same underlying buffer).
    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

    std::size_t flat_index(std::initializer_list<std::size_t> idx) const {
        if (idx.size() != ndim()) throw DimError("index rank mismatch");
        std::size_t flat = 0, d = 0;
        for (auto i : idx) {
            flat = flat * impl_->shape[d] + i;
            ++d;
        }
        return flat;
    }

private:
    struct Impl {
        Shape shape;
        std::vector<double> data;
        std::vector<double> grad;
        bool requires_grad = false;
    };
    std::shared_ptr<Impl> impl_;
};

inline bool all_finite(const Tensor& t) {
    for (double v : t.raw())
        if (!std::isfinite(v)) return false;
    return true;
}

/// Reverse-mode tape. Installing a Tape (RAII) makes differentiable ops record
/// backward closures on the current thread; closures run in exact reverse
/// execution order. One tape per training worker; a tape is single-use.
class Tape {
public:
    Tape() : prev_(active_) { active_ = this; }
    ~Tape() { active_ = prev_; }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() { return active_; }

    void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }
    std::size_t node_count() const { return nodes_.size(); }

    /// Seed d(loss)/d(loss) = 1 and sweep the tape backwards, accumulating
    /// gradients additively over fan-out.
    void backward(Tensor loss) {
        if (loss.size() != 1) throw ContractError("backward requires a scalar loss");
        if (!loss.requires_grad())
            throw ContractError("loss is not connected to the tape");
        if (used_) throw ContractError("tape already consumed by backward");
        used_ = true;
        loss.grad_buf()[0] += 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

private:
    std::vector<std::function<void()>> nodes_;
    bool used_ = false;
    Tape* prev_ = nullptr;
    static thread_local Tape* active_;
};

inline thread_local Tape* Tape::active_ = nullptr;

namespace detail {

inline bool tracing(std::initializer_list<const Tensor*> inputs) {
    if (!Tape::active()) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

inline void mark_output(Tensor& out) {
    out.set_requires_grad(true);
    out.grad_buf(); // allocate so downstream closures can accumulate
}

// Broadcast helpers (numpy trailing-axis rules).
inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    Shape out(std::max(a.size(), b.size()));
    for (std::size_t k = 0; k < out.size(); ++k) {
        std::size_t ea = k < out.size() - a.size() ? 1 : a[k - (out.size() - a.size())];
        std::size_t eb = k < out.size() - b.size() ? 1 : b[k - (out.size() - b.size())];
        if (ea == eb || eb == 1)
            out[k] = ea;
        else if (ea == 1)
            out[k] = eb;
        else
            throw DimError("shapes " + shape_str(a) + " and " + shape_str(b) +
                           " are not broadcastable");
    }
    return out;
}

// Row-major strides with 0 on broadcast axes, aligned to `out` rank.
inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
    std::vector<std::size_t> strides(out.size(), 0);
    std::size_t run = 1;
    for (std::size_t k = in.size(); k-- > 0;) {
        std::size_t o = k + (out.size() - in.size());
        strides[o] = (in[k] == 1) ? 0 : run;
        run *= in[k];
    }
    return strides;
}

// Visit every element of `out_shape`, calling f(out_flat, a_flat, b_flat).
template <typename F>
inline void for_each_broadcast(const Shape& out_shape, const Shape& a, const Shape& b, F&& f) {
    const std::size_t n = shape_numel(out_shape);
    const auto sa = broadcast_strides(a, out_shape);
    const auto sb = broadcast_strides(b, out_shape);
    const std::size_t nd = out_shape.size();
    std::vector<std::size_t> coord(nd, 0);
    std::size_t ia = 0, ib = 0;
    for (std::size_t flat = 0; flat < n; ++flat) {
        f(flat, ia, ib);
        for (std::size_t k = nd; k-- > 0;) {
            if (++coord[k] < out_shape[k]) {
                ia += sa[k];
                ib += sb[k];
                break;
            }
            coord[k] = 0;
            ia -= sa[k] * (out_shape[k] - 1);
            ib -= sb[k] * (out_shape[k] - 1);
        }
    }
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic (broadcasting)
// ---------------------------------------------------------------------------

namespace detail {

enum class BinOp { Add, Sub, Mul };

inline Tensor binary_op(const Tensor& a, const Tensor& b, BinOp op) {
    const Shape out_shape = broadcast_shape(a.shape(), b.shape());
    Tensor out(out_shape);
    auto& y = out.raw();
    const auto& xa = a.raw();
    const auto& xb = b.raw();
    if (a.shape() == b.shape()) {
        const std::size_t n = y.size();
        switch (op) {
        case BinOp::Add: for (std::size_t i = 0; i < n; ++i) y[i] = xa[i] + xb[i]; break;
        case BinOp::Sub: for (std::size_t i = 0; i < n; ++i) y[i] = xa[i] - xb[i]; break;
        case BinOp::Mul: for (std::size_t i = 0; i < n; ++i) y[i] = xa[i] * xb[i]; break;
        }
    } else {
        for_each_broadcast(out_shape, a.shape(), b.shape(), [&](std::size_t o, std::size_t ia, std::size_t ib) {
            switch (op) {
            case BinOp::Add: y[o] = xa[ia] + xb[ib]; break;
            case BinOp::Sub: y[o] = xa[ia] - xb[ib]; break;
            case BinOp::Mul: y[o] = xa[ia] * xb[ib]; break;
            }
        });
    }
    if (tracing({&a, &b})) {
        mark_output(out);
        Tensor ac = a, bc = b, oc = out;
        Tape::active()->record([ac, bc, oc, op]() mutable {
            const auto& go = oc.grad_buf();
            const Shape os = oc.shape();
            auto accum = [&](Tensor& t, bool is_a) {
                if (!t.requires_grad()) return;
                auto& g = t.grad_buf();
                const auto& other = is_a ? bc : ac;
                (void)other;
                for_each_broadcast(os, ac.shape(), bc.shape(),
                                   [&](std::size_t o, std::size_t ia, std::size_t ib) {
                    const std::size_t self = is_a ? ia : ib;
                    switch (op) {
                    case BinOp::Add: g[self] += go[o]; break;
                    case BinOp::Sub: g[self] += is_a ? go[o] : -go[o]; break;
                    case BinOp::Mul:
                        g[self] += go[o] * (is_a ? bc.raw()[ib] : ac.raw()[ia]);
                        break;
                    }
                });
            };
            accum(ac, true);
            accum(bc, false);
        });
    }
    return out;
}

} // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary_op(a, b, detail::BinOp::Add); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary_op(a, b, detail::BinOp::Sub); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary_op(a, b, detail::BinOp::Mul); }

/// y = c * x  (constant scale)
inline Tensor scale(const Tensor& x, double c) {
    Tensor out(x.shape());
    auto& y = out.raw();
    const auto& xv = x.raw();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = c * xv[i];
    if (detail::tracing({&x})) {
        detail::mark_output(out);
        Tensor xc = x, oc = out;
        Tape::active()->record([xc, oc, c]() mutable {
            auto& g = xc.grad_buf();
            const auto& go = oc.grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * go[i];
        });
    }
    return out;
}

/// y = x + c  (constant shift)
inline Tensor shift(const Tensor& x, double c) {
    Tensor out(x.shape());
    auto& y = out.raw();
    const auto& xv = x.raw();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] + c;
    if (detail::tracing({&x})) {
        detail::mark_output(out);
        Tensor xc = x, oc = out;
        Tape::active()->record([xc, oc]() mutable {
            auto& g = xc.grad_buf();
            const auto& go = oc.grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i];
        });
    }
    return out;
}

inline Tensor neg(const Tensor& x) { return scale(x, -1.0); }

// ---------------------------------------------------------------------------
// Matrix multiply
// ---------------------------------------------------------------------------

namespace detail {

// C[m,n] += A[m,k] * B[k,n], cache-friendly ikj order.
inline void gemm_nn(const double* a, const double* b, double* c,
                    std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* ci = c + i * n;
        const double* ai = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            if (av == 0.0) continue;
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// C[m,k] += A[m,n] * B^T, B is [k,n]
inline void gemm_nt(const double* a, const double* b, double* c,
                    std::size_t m, std::size_t n, std::size_t k) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * n;
        double* ci = c + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double* bp = b + p * n;
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += ai[j] * bp[j];
            ci[p] += acc;
        }
    }
}

// C[k,n] += A^T * B, A is [m,k], B is [m,n]
inline void gemm_tn(const double* a, const double* b, double* c,
                    std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        const double* bi = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            if (av == 0.0) continue;
            double* cp = c + p * n;
            for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
        }
    }
}

} // namespace detail

/// Standard matrix product of two rank-2 tensors.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2)
        throw DimError("matmul expects rank-2 tensors, got " + shape_str(a.shape()) + " and " +
                       shape_str(b.shape()));
    const std::size_t m = a.extent(0), k = a.extent(1), k2 = b.extent(0), n = b.extent(1);
    if (k != k2)
        throw DimError("matmul inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
    Tensor out(Shape{m, n});
    detail::gemm_nn(a.raw().data(), b.raw().data(), out.raw().data(), m, k, n);
    if (detail::tracing({&a, &b})) {
        detail::mark_output(out);
        Tensor ac = a, bc = b, oc = out;
        Tape::active()->record([ac, bc, oc, m, k, n]() mutable {
            const auto& go = oc.grad_buf();
            if (ac.requires_grad())
                detail::gemm_nt(go.data(), bc.raw().data(), ac.grad_buf().data(), m, n, k);
            if (bc.requires_grad())
                detail::gemm_tn(ac.raw().data(), go.data(), bc.grad_buf().data(), m, k, n);
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Convolution / resampling (H x W x C layout)
// ---------------------------------------------------------------------------

/// 2-D convolution with "same" zero padding.
/// x: [H,W,Cin], w: [Fh,Fw,Cin,K] (odd Fh,Fw), b: [K] or undefined for no bias.
/// y[i,j,k] = sum_{c,m,n} x[i+m-ph, j+n-pw, c] * w[m,n,c,k] + b[k]
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b = Tensor()) {
    if (x.ndim() != 3) throw DimError("conv2d input must be [H,W,C], got " + shape_str(x.shape()));
    if (w.ndim() != 4) throw DimError("conv2d filter must be [Fh,Fw,Cin,K]");
    const std::size_t H = x.extent(0), W = x.extent(1), C = x.extent(2);
    const std::size_t Fh = w.extent(0), Fw = w.extent(1), K = w.extent(3);
    if (w.extent(2) != C)
        throw DimError("conv2d channel mismatch: input has " + std::to_string(C) +
                       ", filter expects " + std::to_string(w.extent(2)));
    if (Fh % 2 == 0 || Fw % 2 == 0)
        throw ContractError("conv2d 'same' padding requires odd filter extents");
    if (b.defined() && (b.ndim() != 1 || b.extent(0) != K))
        throw DimError("conv2d bias must be [K]");
    const std::size_t ph = (Fh - 1) / 2, pw = (Fw - 1) / 2;

    Tensor out(Shape{H, W, K});
    auto& y = out.raw();
    const auto& xd = x.raw();
    const auto& wd = w.raw();
    if (b.defined()) {
        const auto& bd = b.raw();
        for (std::size_t i = 0; i < H * W; ++i)
            for (std::size_t k = 0; k < K; ++k) y[i * K + k] = bd[k];
    }
    for (std::size_t i = 0; i < H; ++i) {
        for (std::size_t m = 0; m < Fh; ++m) {
            const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(i + m) - static_cast<std::ptrdiff_t>(ph);
            if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(H)) continue;
            for (std::size_t j = 0; j < W; ++j) {
                double* yij = y.data() + (i * W + j) * K;
                for (std::size_t n = 0; n < Fw; ++n) {
                    const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(j + n) - static_cast<std::ptrdiff_t>(pw);
                    if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(W)) continue;
                    const double* xr = xd.data() + (static_cast<std::size_t>(ii) * W + static_cast<std::size_t>(jj)) * C;
                    const double* wr = wd.data() + (m * Fw + n) * C * K;
                    for (std::size_t c = 0; c < C; ++c) {
                        const double xv = xr[c];
                        if (xv == 0.0) continue;
                        const double* wc = wr + c * K;
                        for (std::size_t k = 0; k < K; ++k) yij[k] += xv * wc[k];
                    }
                }
            }
        }
    }
    if (detail::tracing({&x, &w, &b})) {
        detail::mark_output(out);
        Tensor xc = x, wc = w, bc = b, oc = out;
        Tape::active()->record([xc, wc, bc, oc, H, W, C, Fh, Fw, K, ph, pw]() mutable {
            const auto& go = oc.grad_buf();
            const bool gx = xc.requires_grad(), gw = wc.requires_grad();
            const bool gb = bc.defined() && bc.requires_grad();
            auto* dx = gx ? xc.grad_buf().data() : nullptr;
            auto* dw = gw ? wc.grad_buf().data() : nullptr;
            if (gb) {
                auto& db = bc.grad_buf();
                for (std::size_t i = 0; i < H * W; ++i)
                    for (std::size_t k = 0; k < K; ++k) db[k] += go[i * K + k];
            }
            if (!gx && !gw) return;
            const auto& xd = xc.raw();
            const auto& wd = wc.raw();
            for (std::size_t i = 0; i < H; ++i) {
                for (std::size_t m = 0; m < Fh; ++m) {
                    const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(i + m) - static_cast<std::ptrdiff_t>(ph);
                    if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(H)) continue;
                    for (std::size_t j = 0; j < W; ++j) {
                        const double* gij = go.data() + (i * W + j) * K;
                        for (std::size_t n = 0; n < Fw; ++n) {
                            const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(j + n) - static_cast<std::ptrdiff_t>(pw);
                            if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(W)) continue;
                            const std::size_t xoff = (static_cast<std::size_t>(ii) * W + static_cast<std::size_t>(jj)) * C;
                            const std::size_t woff = (m * Fw + n) * C * K;
                            for (std::size_t c = 0; c < C; ++c) {
                                const double* wk = wd.data() + woff + c * K;
                                if (gx) {
                                    double acc = 0.0;
                                    for (std::size_t k = 0; k < K; ++k) acc += gij[k] * wk[k];
                                    dx[xoff + c] += acc;
                                }
                                if (gw) {
                                    const double xv = xd[xoff + c];
                                    if (xv != 0.0) {
                                        double* dwk = dw + woff + c * K;
                                        for (std::size_t k = 0; k < K; ++k) dwk[k] += xv * gij[k];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

/// Nearest-neighbor 2x upsampling: each cell becomes a 2x2 block.
inline Tensor upsample2x(const Tensor& x) {
    if (x.ndim() != 3) throw DimError("upsample2x input must be [H,W,C]");
    const std::size_t H = x.extent(0), W = x.extent(1), C = x.extent(2);
    Tensor out(Shape{2 * H, 2 * W, C});
    auto& y = out.raw();
    const auto& xd = x.raw();
    for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) {
            const double* src = xd.data() + (i * W + j) * C;
            for (std::size_t di = 0; di < 2; ++di)
                for (std::size_t dj = 0; dj < 2; ++dj) {
                    double* dst = y.data() + ((2 * i + di) * 2 * W + (2 * j + dj)) * C;
                    for (std::size_t c = 0; c < C; ++c) dst[c] = src[c];
                }
        }
    if (detail::tracing({&x})) {
        detail::mark_output(out);
        Tensor xc = x, oc = out;
        Tape::active()->record([xc, oc, H, W, C]() mutable {
            auto& g = xc.grad_buf();
            const auto& go = oc.grad_buf();
            for (std::size_t i = 0; i < H; ++i)
                for (std::size_t j = 0; j < W; ++j) {
                    double* dst = g.data() + (i * W + j) * C;
                    for (std::size_t di = 0; di < 2; ++di)
                        for (std::size_t dj = 0; dj < 2; ++dj) {
                            const double* src = go.data() + ((2 * i + di) * 2 * W + (2 * j + dj)) * C;
                            for (std::size_t c = 0; c < C; ++c) dst[c] += src[c];
                        }
                }
        });
    }
    return out;
}

/// k x k average pooling; extents must divide evenly.
inline Tensor avgpool(const Tensor& x, std::size_t k) {
    if (x.ndim() != 3) throw DimError("avgpool input must be [H,W,C]");
    if (k == 0) throw ContractError("avgpool window must be positive");
    const std::size_t H = x.extent(0), W = x.extent(1), C = x.extent(2);
    if (H % k != 0 || W % k != 0)
        throw DimError("avgpool window " + std::to_string(k) + " does not divide " +
                       shape_str(x.shape()));
    const std::size_t Ho = H / k, Wo = W / k;
    Tensor out(Shape{Ho, Wo, C});
    auto& y = out.raw();
    const auto& xd = x.raw();
    const double inv = 1.0 / static_cast<double>(k * k);
    for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
            double* dst = y.data() + (i * Wo + j) * C;
            for (std::size_t di = 0; di < k; ++di)
                for (std::size_t dj = 0; dj < k; ++dj) {
                    const double* src = xd.data() + ((i * k + di) * W + (j * k + dj)) * C;
                    for (std::size_t c = 0; c < C; ++c) dst[c] += src[c];
                }
            for (std::size_t c = 0; c < C; ++c) dst[c] *= inv;
        }
    if (detail::tracing({&x})) {
        detail::mark_output(out);
        Tensor xc = x, oc = out;
        Tape::active()->record([xc, oc, Ho, Wo, W, C, k, inv]() mutable {
            auto& g = xc.grad_buf();
            const auto& go = oc.grad_buf();
            for (std::size_t i = 0; i < Ho; ++i)
                for (std::size_t j = 0; j < Wo; ++j) {
                    const double* src = go.data() + (i * Wo + j) * C;
                    for (std::size_t di = 0; di < k; ++di)
                        for (std::size_t dj = 0; dj < k; ++dj) {
                            double* dst = g.data() + ((i * k + di) * W + (j * k + dj)) * C;
                            for (std::size_t c = 0; c < C; ++c) dst[c] += src[c] * inv;
                        }
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Nonlinearity & reductions
// ---------------------------------------------------------------------------

/// Exact GELU: x * Phi(x).
inline Tensor gelu(const Tensor& x) {
    Tensor out(x.shape());
    auto& y = out.raw();
    const auto& xv = x.raw();
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    for (std::size_t i = 0; i < y.size(); ++i)
        y[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * inv_sqrt2));
    if (detail::tracing({&x})) {
        detail::mark_output(out);
        Tensor xc = x, oc = out;
        Tape::active()->record([xc, oc]() mutable {
            auto& g = xc.grad_buf();
            const auto& go = oc.grad_buf();
            const auto& xv = xc.raw();
            constexpr double inv_sqrt2 = 0.7071067811865475244;
            constexpr double inv_sqrt2pi = 0.3989422804014326779;
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double phi = 0.5 * (1.0 + std::erf(xv[i] * inv_sqrt2));
                const double dens = inv_sqrt2pi * std::exp(-0.5 * xv[i] * xv[i]);
                g[i] += go[i] * (phi + xv[i] * dens);
            }
        });
    }
    return out;
}

inline Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.raw()) acc += v;
    Tensor out = Tensor::scalar(acc);
    if (detail::tracing({&x})) {
        detail::mark_output(out);
        Tensor xc = x, oc = out;
        Tape::active()->record([xc, oc]() mutable {
            auto& g = xc.grad_buf();
            const double go = oc.grad_buf()[0];
            for (double& v : g) v += go;
        });
    }
    return out;
}

inline Tensor mean(const Tensor& x) {
    if (x.size() == 0) throw ContractError("mean of empty tensor");
    return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

/// Sum over the given axes, keeping them as extent-1 (so the result broadcasts
/// back against the input).
inline Tensor sum_axes(const Tensor& x, const std::vector<std::size_t>& axes) {
    Shape out_shape = x.shape();
    for (auto a : axes) {
        if (a >= x.ndim()) throw DimError("sum_axes axis out of range");
        out_shape[a] = 1;
    }
    Tensor out(out_shape);
    auto& y = out.raw();
    const auto& xd = x.raw();
    const auto strides = detail::broadcast_strides(out_shape, x.shape());
    // iterate input, mapping to the reduced output index
    const Shape& xs = x.shape();
    const std::size_t nd = xs.size();
    std::vector<std::size_t> coord(nd, 0);
    std::size_t oi = 0;
    for (std::size_t flat = 0; flat < xd.size(); ++flat) {
        y[oi] += xd[flat];
        for (std::size_t k = nd; k-- > 0;) {
            if (++coord[k] < xs[k]) {
                oi += strides[k];
                break;
            }
            coord[k] = 0;
            oi -= strides[k] * (xs[k] - 1);
        }
    }
    if (detail::tracing({&x})) {
        detail::mark_output(out);
        Tensor xc = x, oc = out;
        Tape::active()->record([xc, oc, strides]() mutable {
            auto& g = xc.grad_buf();
            const auto& go = oc.grad_buf();
            const Shape& xs = xc.shape();
            const std::size_t nd = xs.size();
            std::vector<std::size_t> coord(nd, 0);
            std::size_t oi = 0;
            for (std::size_t flat = 0; flat < g.size(); ++flat) {
                g[flat] += go[oi];
                for (std::size_t k = nd; k-- > 0;) {
                    if (++coord[k] < xs[k]) {
                        oi += strides[k];
                        break;
                    }
                    coord[k] = 0;
                    oi -= strides[k] * (xs[k] - 1);
                }
            }
        });
    }
    return out;
}

inline Tensor mean_axes(const Tensor& x, const std::vector<std::size_t>& axes) {
    std::size_t count = 1;
    for (auto a : axes) count *= x.extent(a);
    return scale(sum_axes(x, axes), 1.0 / static_cast<double>(count));
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape new_shape) {
    if (shape_numel(new_shape) != x.size())
        throw DimError("reshape " + shape_str(x.shape()) + " -> " + shape_str(new_shape) +
                       " changes element count");
    Tensor out(std::move(new_shape), x.raw());
    if (detail::tracing({&x})) {
        detail::mark_output(out);
        Tensor xc = x, oc = out;
        Tape::active()->record([xc, oc]() mutable {
            auto& g = xc.grad_buf();
            const auto& go = oc.grad_buf();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i];
        });
    }
    return out;
}

/// Contiguous slice along one axis.
inline Tensor slice_axis(const Tensor& x, std::size_t axis, std::size_t start, std::size_t len) {
    if (axis >= x.ndim()) throw DimError("slice_axis axis out of range");
    if (start + len > x.extent(axis)) throw DimError("slice_axis range exceeds extent");
    Shape out_shape = x.shape();
    out_shape[axis] = len;
    std::size_t outer = 1, inner = 1;
    for (std::size_t k = 0; k < axis; ++k) outer *= x.extent(k);
    for (std::size_t k = axis + 1; k < x.ndim(); ++k) inner *= x.extent(k);
    const std::size_t ax = x.extent(axis);
    Tensor out(out_shape);
    auto& y = out.raw();
    const auto& xd = x.raw();
    for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(xd.data() + (o * ax + start) * inner, len * inner, y.data() + o * len * inner);
    if (detail::tracing({&x})) {
        detail::mark_output(out);
        Tensor xc = x, oc = out;
        Tape::active()->record([xc, oc, outer, inner, ax, start, len]() mutable {
            auto& g = xc.grad_buf();
            const auto& go = oc.grad_buf();
            for (std::size_t o = 0; o < outer; ++o) {
                double* dst = g.data() + (o * ax + start) * inner;
                const double* src = go.data() + o * len * inner;
                for (std::size_t i = 0; i < len * inner; ++i) dst[i] += src[i];
            }
        });
    }
    return out;
}

/// Concatenate along one axis; all other extents must agree.
inline Tensor concat_axis(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw ContractError("concat_axis of zero tensors");
    const Shape& ref = parts[0].shape();
    if (axis >= ref.size()) throw DimError("concat_axis axis out of range");
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.ndim() != ref.size()) throw DimError("concat_axis rank mismatch");
        for (std::size_t k = 0; k < ref.size(); ++k)
            if (k != axis && p.extent(k) != ref[k]) throw DimError("concat_axis extent mismatch");
        total += p.extent(axis);
    }
    Shape out_shape = ref;
    out_shape[axis] = total;
    std::size_t outer = 1, inner = 1;
    for (std::size_t k = 0; k < axis; ++k) outer *= ref[k];
    for (std::size_t k = axis + 1; k < ref.size(); ++k) inner *= ref[k];
    Tensor out(out_shape);
    auto& y = out.raw();
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const std::size_t a = p.extent(axis);
        const auto& pd = p.raw();
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(pd.data() + o * a * inner, a * inner,
                        y.data() + (o * total + offset) * inner);
        offset += a;
    }
    bool any_grad = false;
    for (const auto& p : parts) any_grad |= p.requires_grad();
    if (Tape::active() && any_grad) {
        detail::mark_output(out);
        std::vector<Tensor> pc = parts;
        Tensor oc = out;
        Tape::active()->record([pc, oc, outer, inner, total, axis]() mutable {
            const auto& go = oc.grad_buf();
            std::size_t offset = 0;
            for (auto& p : pc) {
                const std::size_t a = p.extent(axis);
                if (p.requires_grad()) {
                    auto& g = p.grad_buf();
                    for (std::size_t o = 0; o < outer; ++o) {
                        const double* src = go.data() + (o * total + offset) * inner;
                        double* dst = g.data() + o * a * inner;
                        for (std::size_t i = 0; i < a * inner; ++i) dst[i] += src[i];
                    }
                }
                offset += a;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Gather / scatter
// ---------------------------------------------------------------------------

/// Select rows of a rank-2 tensor: out[r,:] = x[idx[r],:].
inline Tensor take_rows(const Tensor& x, const std::vector<std::size_t>& idx) {
    if (x.ndim() != 2) throw DimError("take_rows expects a rank-2 tensor");
    const std::size_t N = x.extent(0), F = x.extent(1);
    Tensor out(Shape{idx.size(), F});
    auto& y = out.raw();
    const auto& xd = x.raw();
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] >= N) throw DimError("take_rows index out of range");
        std::copy_n(xd.data() + idx[r] * F, F, y.data() + r * F);
    }
    if (detail::tracing({&x})) {
        detail::mark_output(out);
        Tensor xc = x, oc = out;
        auto ix = idx;
        Tape::active()->record([xc, oc, ix, F]() mutable {
            auto& g = xc.grad_buf();
            const auto& go = oc.grad_buf();
            for (std::size_t r = 0; r < ix.size(); ++r) {
                double* dst = g.data() + ix[r] * F;
                const double* src = go.data() + r * F;
                for (std::size_t f = 0; f < F; ++f) dst[f] += src[f];
            }
        });
    }
    return out;
}

/// Sum rows of `msgs` into `n_rows` destination rows: out[idx[r],:] += msgs[r,:].
/// Destinations with no incoming rows stay zero.
inline Tensor scatter_add_rows(const Tensor& msgs, const std::vector<std::size_t>& idx,
                               std::size_t n_rows) {
    if (msgs.ndim() != 2) throw DimError("scatter_add_rows expects a rank-2 tensor");
    if (idx.size() != msgs.extent(0)) throw DimError("scatter_add_rows index count mismatch");
    const std::size_t F = msgs.extent(1);
    Tensor out(Shape{n_rows, F});
    auto& y = out.raw();
    const auto& md = msgs.raw();
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] >= n_rows) throw DimError("scatter_add_rows index out of range");
        double* dst = y.data() + idx[r] * F;
        const double* src = md.data() + r * F;
        for (std::size_t f = 0; f < F; ++f) dst[f] += src[f];
    }
    if (detail::tracing({&msgs})) {
        detail::mark_output(out);
        Tensor mc = msgs, oc = out;
        auto ix = idx;
        Tape::active()->record([mc, oc, ix, F]() mutable {
            auto& g = mc.grad_buf();
            const auto& go = oc.grad_buf();
            for (std::size_t r = 0; r < ix.size(); ++r) {
                const double* src = go.data() + ix[r] * F;
                double* dst = g.data() + r * F;
                for (std::size_t f = 0; f < F; ++f) dst[f] += src[f];
            }
        });
    }
    return out;
}

/// Per-destination elementwise max; destinations with no incoming rows are zero.
inline Tensor scatter_max_rows(const Tensor& msgs, const std::vector<std::size_t>& idx,
                               std::size_t n_rows) {
    if (msgs.ndim() != 2) throw DimError("scatter_max_rows expects a rank-2 tensor");
    if (idx.size() != msgs.extent(0)) throw DimError("scatter_max_rows index count mismatch");
    const std::size_t F = msgs.extent(1);
    Tensor out(Shape{n_rows, F});
    auto winner = std::make_shared<std::vector<std::ptrdiff_t>>(n_rows * F, -1);
    auto& y = out.raw();
    const auto& md = msgs.raw();
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] >= n_rows) throw DimError("scatter_max_rows index out of range");
        for (std::size_t f = 0; f < F; ++f) {
            const std::size_t o = idx[r] * F + f;
            const double v = md[r * F + f];
            if ((*winner)[o] < 0 || v > y[o]) {
                y[o] = v;
                (*winner)[o] = static_cast<std::ptrdiff_t>(r);
            }
        }
    }
    if (detail::tracing({&msgs})) {
        detail::mark_output(out);
        Tensor mc = msgs, oc = out;
        Tape::active()->record([mc, oc, winner, F]() mutable {
            auto& g = mc.grad_buf();
            const auto& go = oc.grad_buf();
            for (std::size_t o = 0; o < winner->size(); ++o)
                if ((*winner)[o] >= 0)
                    g[static_cast<std::size_t>((*winner)[o]) * F + o % F] += go[o];
        });
    }
    return out;
}

/// Flat-index gather producing a vector; used by point-selection readouts.
inline Tensor gather_flat(const Tensor& x, const std::vector<std::size_t>& idx) {
    Tensor out(Shape{idx.size()});
    auto& y = out.raw();
    const auto& xd = x.raw();
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] >= xd.size()) throw DimError("gather_flat index out of range");
        y[r] = xd[idx[r]];
    }
    if (detail::tracing({&x})) {
        detail::mark_output(out);
        Tensor xc = x, oc = out;
        auto ix = idx;
        Tape::active()->record([xc, oc, ix]() mutable {
            auto& g = xc.grad_buf();
            const auto& go = oc.grad_buf();
            for (std::size_t r = 0; r < ix.size(); ++r) g[ix[r]] += go[r];
        });
    }
    return out;
}

} // namespace flowgen
