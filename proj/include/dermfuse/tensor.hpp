#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "dermfuse/common.hpp"
#include "dermfuse/rng.hpp"

namespace dermfuse {

// ---------------------------------------------------------------------------
// Tensor: dense n-d array of doubles with optional gradient buffer.
// Handle semantics: copies share storage; the trainer mutates parameter
// values in place through any handle.
// ---------------------------------------------------------------------------
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape) { return filled(std::move(shape), 0.0); }

    static Tensor filled(Shape shape, double value) {
        check_shape_positive(shape);
        auto impl = std::make_shared<Impl>();
        impl->shape = std::move(shape);
        impl->data.assign(size_t(dermfuse::numel(impl->shape)), value);
        return Tensor(std::move(impl));
    }

    static Tensor from_data(Shape shape, std::vector<double> values) {
        check_shape_positive(shape);
        if (int64_t(values.size()) != dermfuse::numel(shape))
            throw ShapeError("from_data: " + std::to_string(values.size()) +
                             " values for shape " + shape_str(shape));
        auto impl = std::make_shared<Impl>();
        impl->shape = std::move(shape);
        impl->data = std::move(values);
        return Tensor(std::move(impl));
    }

    static Tensor scalar(double v) { return from_data({1}, {v}); }

    static Tensor uniform(Shape shape, double a, double b, SeededRng& rng) {
        check_shape_positive(shape);
        if (!(a < b)) throw ConfigError("uniform init requires a < b");
        Tensor t = zeros(std::move(shape));
        for (double& v : t.data()) v = rng.uniform(a, b);
        return t;
    }

    static Tensor normal(Shape shape, double mean, double stddev, SeededRng& rng) {
        check_shape_positive(shape);
        if (stddev < 0.0) throw ConfigError("normal init requires stddev >= 0");
        Tensor t = zeros(std::move(shape));
        for (double& v : t.data()) v = rng.normal(mean, stddev);
        return t;
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int rank() const { return int(impl_->shape.size()); }
    int64_t numel() const { return int64_t(impl_->data.size()); }
    int64_t dim(int axis) const { return impl_->shape[size_t(axis)]; }

    std::vector<double>& data() { return impl_->data; }
    const std::vector<double>& data() const { return impl_->data; }
    double at(int64_t i) const { return impl_->data[size_t(i)]; }

    double item() const {
        if (numel() != 1) throw ShapeError("item(): tensor has " + std::to_string(numel()) + " elements");
        return impl_->data[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool flag) {
        impl_->requires_grad = flag;
        return *this;
    }

    bool has_grad() const { return !impl_->grad.empty(); }

    /// Gradient buffer, allocated as zeros on first touch.
    std::vector<double>& grad() {
        if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
        return impl_->grad;
    }
    const std::vector<double>& grad_view() const { return impl_->grad; }

    Tensor grad_tensor() const {
        if (impl_->grad.empty()) throw ShapeError("grad_tensor(): no gradient recorded");
        return from_data(impl_->shape, impl_->grad);
    }

    void zero_grad() { impl_->grad.clear(); }

    /// Deep copy; gradient buffer is not copied.
    Tensor clone() const {
        Tensor t = from_data(impl_->shape, impl_->data);
        t.impl_->requires_grad = impl_->requires_grad;
        return t;
    }

    /// Same storage viewed without gradient tracking.
    Tensor detach() const {
        auto impl = std::make_shared<Impl>();
        impl->shape = impl_->shape;
        impl->data = impl_->data;
        return Tensor(std::move(impl));
    }

    /// Identity of the underlying storage, for keying parameter maps.
    const void* key() const { return impl_.get(); }

    bool all_finite() const {
        for (double v : impl_->data)
            if (!std::isfinite(v)) return false;
        return true;
    }

private:
    struct Impl {
        Shape shape;
        std::vector<double> data;
        bool requires_grad = false;
        std::vector<double> grad;  // empty until touched by backward
    };

    explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}

    std::shared_ptr<Impl> impl_;
};

// ---------------------------------------------------------------------------
// Tape: ordered record of operations for reverse-mode differentiation.
// Nodes are appended in forward order, so append order is a topological
// order; backward() replays them once, reversed, then clears the tape.
// ---------------------------------------------------------------------------
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    size_t size() const { return nodes_.size(); }

    void record(const char* op, std::function<void()> backward_fn) {
        nodes_.push_back({op, std::move(backward_fn)});
    }

    void reset() { nodes_.clear(); }

    /// Seeds d(loss)/d(loss) = 1 and propagates through all recorded nodes.
    /// The tape is consumed.
    void backward(Tensor loss) {
        if (loss.numel() != 1)
            throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
        if (!loss.requires_grad() || nodes_.empty())
            throw ShapeError("backward: loss is detached from any recorded graph");
        loss.grad()[0] = 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->fn();
        nodes_.clear();
    }

    static Tape* active() { return active_slot(); }

private:
    friend class TapeScope;

    struct Node {
        const char* op;
        std::function<void()> fn;
    };

    static Tape*& active_slot() {
        thread_local Tape* slot = nullptr;
        return slot;
    }

    std::vector<Node> nodes_;
};

/// Makes a tape the recording target for the current scope.
class TapeScope {
public:
    explicit TapeScope(Tape& tape) : prev_(Tape::active_slot()) { Tape::active_slot() = &tape; }
    ~TapeScope() { Tape::active_slot() = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* prev_;
};

namespace detail {

inline bool tracking(std::initializer_list<const Tensor*> inputs) {
    if (Tape::active() == nullptr) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

/// Right-aligned broadcast of `b` onto `a`: every b extent must equal the
/// matching a extent or be 1. Returns per-a-axis strides into b's data
/// (0 on broadcast axes).
inline std::vector<int64_t> broadcast_strides(const Shape& a, const Shape& b) {
    if (b.size() > a.size())
        throw ShapeError("broadcast: rank of " + shape_str(b) + " exceeds " + shape_str(a));
    const size_t off = a.size() - b.size();
    std::vector<int64_t> bstride(a.size(), 0);
    int64_t stride = 1;
    for (size_t i = b.size(); i-- > 0;) {
        const int64_t be = b[i];
        const int64_t ae = a[off + i];
        if (be != ae && be != 1)
            throw ShapeError("broadcast: cannot map " + shape_str(b) + " onto " + shape_str(a));
        bstride[off + i] = (be == 1) ? 0 : stride;
        stride *= be;
    }
    return bstride;
}

/// Maps every linear index of `a` to the matching linear index of `b`.
inline std::vector<int64_t> broadcast_index_map(const Shape& a, const Shape& b) {
    const std::vector<int64_t> bstride = broadcast_strides(a, b);
    const int64_t n = numel(a);
    std::vector<int64_t> map(static_cast<size_t>(n), 0);
    const size_t rank = a.size();
    std::vector<int64_t> idx(rank, 0);
    for (int64_t lin = 0; lin < n; ++lin) {
        int64_t bi = 0;
        for (size_t d = 0; d < rank; ++d) bi += idx[d] * bstride[d];
        map[size_t(lin)] = bi;
        for (size_t d = rank; d-- > 0;) {
            if (++idx[d] < a[d]) break;
            idx[d] = 0;
        }
    }
    return map;
}

// Deterministic matmul kernels. Each output element accumulates in ascending
// k order regardless of blocking or threading, so results are reproducible.

/// C[M x N] += A[M x K] * B[K x N]
inline void mm_ab(double* C, const double* A, const double* B, int64_t M, int64_t K, int64_t N) {
    for (int64_t i = 0; i < M; ++i) {
        double* c = C + i * N;
        const double* a = A + i * K;
        for (int64_t k = 0; k < K; ++k) {
            const double av = a[k];
            const double* b = B + k * N;
            for (int64_t j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

/// C[M x N] += A[M x K] * B^T where B is [N x K]
inline void mm_abT(double* C, const double* A, const double* B, int64_t M, int64_t K, int64_t N) {
    for (int64_t i = 0; i < M; ++i) {
        const double* a = A + i * K;
        double* c = C + i * N;
        for (int64_t j = 0; j < N; ++j) {
            const double* b = B + j * K;
            double acc = 0.0;
            for (int64_t k = 0; k < K; ++k) acc += a[k] * b[k];
            c[j] += acc;
        }
    }
}

/// C[M x N] += A^T * B where A is [K x M], B is [K x N]
inline void mm_aTb(double* C, const double* A, const double* B, int64_t M, int64_t K, int64_t N) {
    for (int64_t k = 0; k < K; ++k) {
        const double* a = A + k * M;
        const double* b = B + k * N;
        for (int64_t i = 0; i < M; ++i) {
            const double av = a[i];
            if (av == 0.0) continue;
            double* c = C + i * N;
            for (int64_t j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic with right-aligned unit/trailing-axis broadcast of
// the second operand.
// ---------------------------------------------------------------------------

enum class EwOp { add, sub, mul };

inline Tensor elementwise(EwOp op, const Tensor& a, const Tensor& b) {
    const bool same = a.shape() == b.shape();
    std::vector<int64_t> map;
    if (!same) map = detail::broadcast_index_map(a.shape(), b.shape());

    const int64_t n = a.numel();
    Tensor out = Tensor::zeros(a.shape());
    const auto& ad = a.data();
    const auto& bd = b.data();
    auto& od = out.data();
    switch (op) {
        case EwOp::add:
            for (int64_t i = 0; i < n; ++i) od[size_t(i)] = ad[size_t(i)] + bd[size_t(same ? i : map[size_t(i)])];
            break;
        case EwOp::sub:
            for (int64_t i = 0; i < n; ++i) od[size_t(i)] = ad[size_t(i)] - bd[size_t(same ? i : map[size_t(i)])];
            break;
        case EwOp::mul:
            for (int64_t i = 0; i < n; ++i) od[size_t(i)] = ad[size_t(i)] * bd[size_t(same ? i : map[size_t(i)])];
            break;
    }

    if (detail::tracking({&a, &b})) {
        out.set_requires_grad(true);
        Tensor av = a, bv = b, ov = out;
        bool bsame = same;
        auto bmap = std::move(map);
        Tape::active()->record("elementwise", [op, av, bv, ov, bsame, bmap]() mutable {
            const auto& g = ov.grad_view();
            if (g.empty()) return;
            const int64_t n = av.numel();
            if (av.requires_grad()) {
                auto& ga = av.grad();
                if (op == EwOp::mul) {
                    const auto& bd = bv.data();
                    for (int64_t i = 0; i < n; ++i)
                        ga[size_t(i)] += g[size_t(i)] * bd[size_t(bsame ? i : bmap[size_t(i)])];
                } else {
                    for (int64_t i = 0; i < n; ++i) ga[size_t(i)] += g[size_t(i)];
                }
            }
            if (bv.requires_grad()) {
                auto& gb = bv.grad();
                const double sign = (op == EwOp::sub) ? -1.0 : 1.0;
                if (op == EwOp::mul) {
                    const auto& ad = av.data();
                    for (int64_t i = 0; i < n; ++i)
                        gb[size_t(bsame ? i : bmap[size_t(i)])] += g[size_t(i)] * ad[size_t(i)];
                } else {
                    for (int64_t i = 0; i < n; ++i) gb[size_t(bsame ? i : bmap[size_t(i)])] += sign * g[size_t(i)];
                }
            }
        });
    }
    return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) { return elementwise(EwOp::add, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(EwOp::sub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(EwOp::mul, a, b); }

/// out = a * c (constant, no gradient into c)
inline Tensor scale(const Tensor& a, double c) {
    Tensor out = Tensor::zeros(a.shape());
    const auto& ad = a.data();
    auto& od = out.data();
    for (size_t i = 0; i < ad.size(); ++i) od[i] = ad[i] * c;
    if (detail::tracking({&a})) {
        out.set_requires_grad(true);
        Tensor av = a, ov = out;
        Tape::active()->record("scale", [av, ov, c]() mutable {
            const auto& g = ov.grad_view();
            if (g.empty() || !av.requires_grad()) return;
            auto& ga = av.grad();
            for (size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
        });
    }
    return out;
}

/// Elementwise map with derivative callback df(x, y) -> dy/dx.
template <typename F, typename DF>
Tensor map_unary(const char* name, const Tensor& x, F f, DF df) {
    Tensor out = Tensor::zeros(x.shape());
    const auto& xd = x.data();
    auto& od = out.data();
    for (size_t i = 0; i < xd.size(); ++i) od[i] = f(xd[i]);
    if (detail::tracking({&x})) {
        out.set_requires_grad(true);
        Tensor xv = x, ov = out;
        Tape::active()->record(name, [xv, ov, df]() mutable {
            const auto& g = ov.grad_view();
            if (g.empty() || !xv.requires_grad()) return;
            auto& gx = xv.grad();
            const auto& xd = xv.data();
            const auto& yd = ov.data();
            for (size_t i = 0; i < g.size(); ++i) gx[i] += df(xd[i], yd[i]) * g[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// matmul: [m x k] * [k x n] -> [m x n]
// ---------------------------------------------------------------------------
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul: expected rank-2 operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    const int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    Tensor out = Tensor::zeros({m, n});
    detail::mm_ab(out.data().data(), a.data().data(), b.data().data(), m, k, n);

    if (detail::tracking({&a, &b})) {
        out.set_requires_grad(true);
        Tensor av = a, bv = b, ov = out;
        Tape::active()->record("matmul", [av, bv, ov, m, k, n]() mutable {
            const auto& g = ov.grad_view();
            if (g.empty()) return;
            if (av.requires_grad())
                detail::mm_abT(av.grad().data(), g.data(), bv.data().data(), m, n, k);
            if (bv.requires_grad())
                detail::mm_aTb(bv.grad().data(), av.data().data(), g.data(), k, m, n);
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// conv2d: cross-correlation, zero padding, grouped.
//   input  [N, C, H, W], weight [O, C/g, kh, kw]
//   H' = floor((H + 2*pad_h - kh) / stride_h) + 1, same for W'.
// ---------------------------------------------------------------------------

namespace detail {

/// Gathers one (sample, group) slice into column form
/// cols[(Cg*kh*kw) x (Ho*Wo)].
inline void im2col(const double* src, int64_t C, int64_t H, int64_t W, int64_t c0, int64_t Cg,
                   int64_t kh, int64_t kw, int64_t sh, int64_t sw, int64_t ph, int64_t pw,
                   int64_t Ho, int64_t Wo, double* cols) {
    const int64_t plane = H * W;
    for (int64_t c = 0; c < Cg; ++c) {
        const double* chan = src + (c0 + c) * plane;
        for (int64_t ky = 0; ky < kh; ++ky) {
            for (int64_t kx = 0; kx < kw; ++kx) {
                double* row = cols + ((c * kh + ky) * kw + kx) * (Ho * Wo);
                for (int64_t oy = 0; oy < Ho; ++oy) {
                    const int64_t iy = oy * sh - ph + ky;
                    double* dst = row + oy * Wo;
                    if (iy < 0 || iy >= H) {
                        std::fill(dst, dst + Wo, 0.0);
                        continue;
                    }
                    const double* srow = chan + iy * W;
                    for (int64_t ox = 0; ox < Wo; ++ox) {
                        const int64_t ix = ox * sw - pw + kx;
                        dst[ox] = (ix >= 0 && ix < W) ? srow[ix] : 0.0;
                    }
                }
            }
        }
    }
}

/// Scatter-adds column-form gradients back onto the input slice.
inline void col2im_add(const double* cols, int64_t C, int64_t H, int64_t W, int64_t c0, int64_t Cg,
                       int64_t kh, int64_t kw, int64_t sh, int64_t sw, int64_t ph, int64_t pw,
                       int64_t Ho, int64_t Wo, double* dst) {
    const int64_t plane = H * W;
    for (int64_t c = 0; c < Cg; ++c) {
        double* chan = dst + (c0 + c) * plane;
        for (int64_t ky = 0; ky < kh; ++ky) {
            for (int64_t kx = 0; kx < kw; ++kx) {
                const double* row = cols + ((c * kh + ky) * kw + kx) * (Ho * Wo);
                for (int64_t oy = 0; oy < Ho; ++oy) {
                    const int64_t iy = oy * sh - ph + ky;
                    if (iy < 0 || iy >= H) continue;
                    const double* srow = row + oy * Wo;
                    double* drow = chan + iy * W;
                    for (int64_t ox = 0; ox < Wo; ++ox) {
                        const int64_t ix = ox * sw - pw + kx;
                        if (ix >= 0 && ix < W) drow[ix] += srow[ox];
                    }
                }
            }
        }
    }
}

}  // namespace detail

inline Tensor conv2d(const Tensor& input, const Tensor& weight, int64_t stride_h, int64_t stride_w,
                     int64_t pad_h, int64_t pad_w, int64_t groups = 1) {
    if (input.rank() != 4 || weight.rank() != 4)
        throw ShapeError("conv2d: expected [N,C,H,W] input and [O,C/g,kh,kw] weight");
    if (stride_h < 1 || stride_w < 1) throw ShapeError("conv2d: stride must be positive");
    if (pad_h < 0 || pad_w < 0) throw ShapeError("conv2d: padding must be non-negative");
    if (groups < 1) throw ShapeError("conv2d: groups must be positive");

    const int64_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const int64_t O = weight.dim(0), Cw = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
    if (C % groups != 0 || O % groups != 0)
        throw ShapeError("conv2d: channels " + std::to_string(C) + " and filters " + std::to_string(O) +
                         " must be divisible by groups " + std::to_string(groups));
    const int64_t Cg = C / groups, Og = O / groups;
    if (Cw != Cg)
        throw ShapeError("conv2d: weight expects " + std::to_string(Cw) + " channels/group, input has " +
                         std::to_string(Cg));
    if (kh > H + 2 * pad_h || kw > W + 2 * pad_w)
        throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                         " does not fit padded input " + shape_str(input.shape()));

    const int64_t Ho = (H + 2 * pad_h - kh) / stride_h + 1;
    const int64_t Wo = (W + 2 * pad_w - kw) / stride_w + 1;
    Tensor out = Tensor::zeros({N, O, Ho, Wo});

    const int64_t col_rows = Cg * kh * kw;
    const int64_t col_cols = Ho * Wo;
    std::vector<double> cols(size_t(col_rows * col_cols));
    const double* x = input.data().data();
    const double* w = weight.data().data();
    double* y = out.data().data();
    for (int64_t n = 0; n < N; ++n) {
        const double* xn = x + n * C * H * W;
        double* yn = y + n * O * Ho * Wo;
        for (int64_t g = 0; g < groups; ++g) {
            detail::im2col(xn, C, H, W, g * Cg, Cg, kh, kw, stride_h, stride_w, pad_h, pad_w, Ho, Wo,
                           cols.data());
            detail::mm_ab(yn + g * Og * col_cols, w + g * Og * col_rows, cols.data(), Og, col_rows,
                          col_cols);
        }
    }

    if (detail::tracking({&input, &weight})) {
        out.set_requires_grad(true);
        Tensor xv = input, wv = weight, ov = out;
        Tape::active()->record("conv2d", [xv, wv, ov, stride_h, stride_w, pad_h, pad_w, groups, N, C, H,
                                          W, O, Cg, Og, kh, kw, Ho, Wo]() mutable {
            const auto& g = ov.grad_view();
            if (g.empty()) return;
            const int64_t col_rows = Cg * kh * kw;
            const int64_t col_cols = Ho * Wo;
            std::vector<double> cols(size_t(col_rows * col_cols));
            const double* x = xv.data().data();
            const double* w = wv.data().data();
            double* gw = wv.requires_grad() ? wv.grad().data() : nullptr;
            double* gx = xv.requires_grad() ? xv.grad().data() : nullptr;
            std::vector<double> dcols(gx ? size_t(col_rows * col_cols) : 0);
            for (int64_t n = 0; n < N; ++n) {
                const double* xn = x + n * C * H * W;
                const double* gn = g.data() + n * O * Ho * Wo;
                for (int64_t grp = 0; grp < groups; ++grp) {
                    if (gw) {
                        detail::im2col(xn, C, H, W, grp * Cg, Cg, kh, kw, stride_h, stride_w, pad_h,
                                       pad_w, Ho, Wo, cols.data());
                        detail::mm_abT(gw + grp * Og * col_rows, gn + grp * Og * col_cols, cols.data(),
                                       Og, col_cols, col_rows);
                    }
                    if (gx) {
                        std::fill(dcols.begin(), dcols.end(), 0.0);
                        detail::mm_aTb(dcols.data(), w + grp * Og * col_rows, gn + grp * Og * col_cols,
                                       col_rows, Og, col_cols);
                        detail::col2im_add(dcols.data(), C, H, W, grp * Cg, Cg, kh, kw, stride_h,
                                           stride_w, pad_h, pad_w, Ho, Wo,
                                           gx + n * C * H * W);
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions over an explicit axis list. mean = sum / reduced-element-count.
// ---------------------------------------------------------------------------

enum class ReduceOp { sum, mean };

inline Tensor reduce(ReduceOp op, const Tensor& t, std::vector<int> axes) {
    const int rank = t.rank();
    if (axes.empty()) {
        axes.resize(size_t(rank));
        for (int i = 0; i < rank; ++i) axes[size_t(i)] = i;
    }
    std::vector<bool> reduced(size_t(rank), false);
    for (int ax : axes) {
        if (ax < 0 || ax >= rank)
            throw ShapeError("reduce: axis " + std::to_string(ax) + " out of range for " +
                             shape_str(t.shape()));
        if (reduced[size_t(ax)]) throw ShapeError("reduce: duplicate axis " + std::to_string(ax));
        reduced[size_t(ax)] = true;
    }

    Shape out_shape;
    int64_t count = 1;
    for (int i = 0; i < rank; ++i) {
        if (reduced[size_t(i)])
            count *= t.dim(i);
        else
            out_shape.push_back(t.dim(i));
    }
    if (out_shape.empty()) out_shape.push_back(1);

    // Map each input linear index to its output linear index.
    const Shape& in_shape = t.shape();
    std::vector<int64_t> out_stride(size_t(rank), 0);
    {
        int64_t stride = 1;
        for (int i = rank; i-- > 0;) {
            if (!reduced[size_t(i)]) {
                out_stride[size_t(i)] = stride;
                stride *= in_shape[size_t(i)];
            }
        }
    }

    Tensor out = Tensor::zeros(out_shape);
    auto& od = out.data();
    const auto& td = t.data();
    {
        std::vector<int64_t> idx(size_t(rank), 0);
        for (int64_t lin = 0; lin < t.numel(); ++lin) {
            int64_t oi = 0;
            for (int d = 0; d < rank; ++d) oi += idx[size_t(d)] * out_stride[size_t(d)];
            od[size_t(oi)] += td[size_t(lin)];
            for (int d = rank; d-- > 0;) {
                if (++idx[size_t(d)] < in_shape[size_t(d)]) break;
                idx[size_t(d)] = 0;
            }
        }
    }
    if (op == ReduceOp::mean) {
        const double inv = 1.0 / double(count);
        for (double& v : od) v *= inv;
    }

    if (detail::tracking({&t})) {
        out.set_requires_grad(true);
        Tensor tv = t, ov = out;
        const double w = (op == ReduceOp::mean) ? 1.0 / double(count) : 1.0;
        Tape::active()->record("reduce", [tv, ov, out_stride, w]() mutable {
            const auto& g = ov.grad_view();
            if (g.empty() || !tv.requires_grad()) return;
            auto& gt = tv.grad();
            const Shape& in_shape = tv.shape();
            const int rank = tv.rank();
            std::vector<int64_t> idx(size_t(rank), 0);
            for (int64_t lin = 0; lin < tv.numel(); ++lin) {
                int64_t oi = 0;
                for (int d = 0; d < rank; ++d) oi += idx[size_t(d)] * out_stride[size_t(d)];
                gt[size_t(lin)] += w * g[size_t(oi)];
                for (int d = rank; d-- > 0;) {
                    if (++idx[size_t(d)] < in_shape[size_t(d)]) break;
                    idx[size_t(d)] = 0;
                }
            }
        });
    }
    return out;
}

inline Tensor reduce_sum(const Tensor& t, std::vector<int> axes = {}) {
    return reduce(ReduceOp::sum, t, std::move(axes));
}
inline Tensor reduce_mean(const Tensor& t, std::vector<int> axes = {}) {
    return reduce(ReduceOp::mean, t, std::move(axes));
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& t, Shape shape) {
    if (numel(shape) != t.numel())
        throw ShapeError("reshape: cannot view " + shape_str(t.shape()) + " as " + shape_str(shape));
    Tensor out = Tensor::from_data(std::move(shape), t.data());
    if (detail::tracking({&t})) {
        out.set_requires_grad(true);
        Tensor tv = t, ov = out;
        Tape::active()->record("reshape", [tv, ov]() mutable {
            const auto& g = ov.grad_view();
            if (g.empty() || !tv.requires_grad()) return;
            auto& gt = tv.grad();
            for (size_t i = 0; i < g.size(); ++i) gt[i] += g[i];
        });
    }
    return out;
}

/// Concatenates rank-2 tensors along axis 1.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const int64_t n = parts[0].dim(0);
    int64_t total = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != 2 || p.dim(0) != n)
            throw ShapeError("concat_cols: operands must be rank-2 with matching rows");
        total += p.dim(1);
    }
    Tensor out = Tensor::zeros({n, total});
    auto& od = out.data();
    int64_t col0 = 0;
    for (const Tensor& p : parts) {
        const int64_t f = p.dim(1);
        const auto& pd = p.data();
        for (int64_t r = 0; r < n; ++r)
            std::copy(pd.begin() + r * f, pd.begin() + (r + 1) * f, od.begin() + r * total + col0);
        col0 += f;
    }

    bool track = Tape::active() != nullptr;
    bool any = false;
    for (const Tensor& p : parts) any = any || p.requires_grad();
    if (track && any) {
        out.set_requires_grad(true);
        std::vector<Tensor> pv = parts;
        Tensor ov = out;
        Tape::active()->record("concat", [pv, ov, n, total]() mutable {
            const auto& g = ov.grad_view();
            if (g.empty()) return;
            int64_t col0 = 0;
            for (Tensor& p : pv) {
                const int64_t f = p.dim(1);
                if (p.requires_grad()) {
                    auto& gp = p.grad();
                    for (int64_t r = 0; r < n; ++r)
                        for (int64_t c = 0; c < f; ++c) gp[size_t(r * f + c)] += g[size_t(r * total + col0 + c)];
                }
                col0 += f;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Gradient checking oracle: central differences, (f(x+h) - f(x-h)) / 2h.
// The evaluator must be pure (run stochastic layers with frozen masks).
// ---------------------------------------------------------------------------
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                               double step = 1e-5) {
    Tensor probe = x.clone();
    probe.set_requires_grad(false);
    Tensor grad = Tensor::zeros(x.shape());
    auto& pd = probe.data();
    auto& gd = grad.data();
    for (size_t i = 0; i < pd.size(); ++i) {
        const double orig = pd[i];
        pd[i] = orig + step;
        const double up = f(probe);
        pd[i] = orig - step;
        const double down = f(probe);
        pd[i] = orig;
        gd[i] = (up - down) / (2.0 * step);
    }
    return grad;
}

/// Elementwise gradient agreement: |a-b| <= rtol*max(|a|,|b|) with an
/// absolute floor for near-zero entries.
inline bool grads_close(const Tensor& a, const Tensor& b, double rtol = 1e-4, double atol = 1e-7) {
    if (a.shape() != b.shape()) return false;
    const auto& ad = a.data();
    const auto& bd = b.data();
    for (size_t i = 0; i < ad.size(); ++i) {
        const double diff = std::fabs(ad[i] - bd[i]);
        const double mag = std::max(std::fabs(ad[i]), std::fabs(bd[i]));
        if (diff > atol && diff > rtol * mag) return false;
    }
    return true;
}

inline double max_rel_error(const Tensor& a, const Tensor& b, double floor = 1e-6) {
    const auto& ad = a.data();
    const auto& bd = b.data();
    double worst = 0.0;
    for (size_t i = 0; i < ad.size(); ++i) {
        const double mag = std::max({std::fabs(ad[i]), std::fabs(bd[i]), floor});
        worst = std::max(worst, std::fabs(ad[i] - bd[i]) / mag);
    }
    return worst;
}

}  // namespace dermfuse
