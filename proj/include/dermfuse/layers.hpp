#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dermfuse/common.hpp"
#include "dermfuse/rng.hpp"
#include "dermfuse/tensor.hpp"

namespace dermfuse {

enum class Mode { train, eval };

// ---------------------------------------------------------------------------
// LayerParams: named trainable tensors plus named non-trainable state
// (running statistics). Names are unique; insertion order is stable so
// checkpoints enumerate deterministically.
// ---------------------------------------------------------------------------
class LayerParams {
public:
    Tensor& add_param(const std::string& name, Tensor t) {
        ensure_fresh(name);
        t.set_requires_grad(trainable_);
        params_.emplace_back(name, std::move(t));
        return params_.back().second;
    }

    Tensor& add_state(const std::string& name, Tensor t) {
        ensure_fresh(name);
        t.set_requires_grad(false);
        state_.emplace_back(name, std::move(t));
        return state_.back().second;
    }

    Tensor& param(const std::string& name) {
        for (auto& [n, t] : params_)
            if (n == name) return t;
        throw ConfigError("no parameter named '" + name + "'");
    }
    const Tensor& param(const std::string& name) const {
        return const_cast<LayerParams*>(this)->param(name);
    }

    Tensor& state(const std::string& name) {
        for (auto& [n, t] : state_)
            if (n == name) return t;
        throw ConfigError("no state named '" + name + "'");
    }
    const Tensor& state(const std::string& name) const {
        return const_cast<LayerParams*>(this)->state(name);
    }

    bool has(const std::string& name) const {
        for (const auto& [n, t] : params_)
            if (n == name) return true;
        for (const auto& [n, t] : state_)
            if (n == name) return true;
        return false;
    }

    const std::vector<std::pair<std::string, Tensor>>& params() const { return params_; }
    const std::vector<std::pair<std::string, Tensor>>& state() const { return state_; }

    /// Toggles gradient tracking for the parameter group. Running state
    /// never tracks gradients regardless.
    void set_trainable(bool flag) {
        trainable_ = flag;
        for (auto& [n, t] : params_) t.set_requires_grad(flag);
    }
    bool trainable() const { return trainable_; }

    int64_t param_count() const {
        int64_t n = 0;
        for (const auto& [name, t] : params_) n += t.numel();
        return n;
    }
    int64_t state_count() const {
        int64_t n = 0;
        for (const auto& [name, t] : state_) n += t.numel();
        return n;
    }

private:
    void ensure_fresh(const std::string& name) {
        if (has(name)) throw ConfigError("duplicate tensor name '" + name + "' in layer");
    }

    std::vector<std::pair<std::string, Tensor>> params_;
    std::vector<std::pair<std::string, Tensor>> state_;
    bool trainable_ = true;
};

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

inline Tensor relu(const Tensor& x) {
    return map_unary("relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
                     [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Tensor sigmoid(const Tensor& x) {
    return map_unary("sigmoid", x,
                     [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
                     [](double, double y) { return y * (1.0 - y); });
}

inline Tensor swish(const Tensor& x) {
    return map_unary("swish", x,
                     [](double v) { return v / (1.0 + std::exp(-v)); },
                     [](double v, double) {
                         const double s = 1.0 / (1.0 + std::exp(-v));
                         return s * (1.0 + v * (1.0 - s));
                     });
}

/// Softmax over the last axis, computed with max-subtraction.
inline Tensor softmax(const Tensor& x) {
    if (x.rank() < 1) throw ShapeError("softmax: rank-0 input");
    const int64_t K = x.dim(x.rank() - 1);
    const int64_t rows = x.numel() / K;
    Tensor out = Tensor::zeros(x.shape());
    const auto& xd = x.data();
    auto& od = out.data();
    for (int64_t r = 0; r < rows; ++r) {
        const double* xi = xd.data() + r * K;
        double* yi = od.data() + r * K;
        double mx = xi[0];
        for (int64_t k = 1; k < K; ++k) mx = std::max(mx, xi[k]);
        double denom = 0.0;
        for (int64_t k = 0; k < K; ++k) {
            yi[k] = std::exp(xi[k] - mx);
            denom += yi[k];
        }
        const double inv = 1.0 / denom;
        for (int64_t k = 0; k < K; ++k) yi[k] *= inv;
    }
    if (detail::tracking({&x})) {
        out.set_requires_grad(true);
        Tensor xv = x, ov = out;
        Tape::active()->record("softmax", [xv, ov, rows, K]() mutable {
            const auto& g = ov.grad_view();
            if (g.empty() || !xv.requires_grad()) return;
            auto& gx = xv.grad();
            const auto& yd = ov.data();
            for (int64_t r = 0; r < rows; ++r) {
                const double* yi = yd.data() + r * K;
                const double* gi = g.data() + r * K;
                double dot = 0.0;
                for (int64_t k = 0; k < K; ++k) dot += gi[k] * yi[k];
                double* gxi = gx.data() + r * K;
                for (int64_t k = 0; k < K; ++k) gxi[k] += yi[k] * (gi[k] - dot);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dense: y = x W + b  with x [N, F_in], W [F_in, F_out], b [F_out]
// ---------------------------------------------------------------------------

inline LayerParams make_dense(int64_t f_in, int64_t f_out, SeededRng& rng) {
    LayerParams lp;
    const double bound = std::sqrt(6.0 / double(f_in + f_out));
    lp.add_param("weight", Tensor::uniform({f_in, f_out}, -bound, bound, rng));
    lp.add_param("bias", Tensor::zeros({f_out}));
    return lp;
}

inline Tensor dense(const Tensor& x, const LayerParams& lp) {
    const Tensor& w = lp.param("weight");
    const Tensor& b = lp.param("bias");
    if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(0) || b.numel() != w.dim(1))
        throw ShapeError("dense: got x " + shape_str(x.shape()) + ", weight " + shape_str(w.shape()) +
                         ", bias " + shape_str(b.shape()));
    return add(matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// Batch normalization over channel axis 1. Train mode normalizes by the
// biased batch statistics and folds them into the running estimates;
// eval mode normalizes by the running estimates.
// ---------------------------------------------------------------------------

inline LayerParams make_batchnorm(int64_t channels) {
    LayerParams lp;
    lp.add_param("gamma", Tensor::filled({channels}, 1.0));
    lp.add_param("beta", Tensor::zeros({channels}));
    lp.add_state("running_mean", Tensor::zeros({channels}));
    lp.add_state("running_var", Tensor::filled({channels}, 1.0));
    return lp;
}

inline Tensor batchnorm(const Tensor& x, LayerParams& lp, Mode mode, double momentum = 0.9,
                        double epsilon = 1e-5) {
    if (x.rank() < 2) throw ShapeError("batchnorm: input must have a channel axis");
    const int64_t C = x.dim(1);
    Tensor gamma = lp.param("gamma");
    Tensor beta = lp.param("beta");
    if (gamma.numel() != C || beta.numel() != C)
        throw ShapeError("batchnorm: " + std::to_string(C) + " channels vs gamma " +
                         shape_str(gamma.shape()));
    const int64_t N = x.dim(0);
    int64_t inner = 1;
    for (int r = 2; r < x.rank(); ++r) inner *= x.dim(r);
    const int64_t m = N * inner;  // elements per channel
    const int64_t chunk = C * inner;

    std::vector<double> mean(size_t(C), 0.0), var(size_t(C), 0.0);
    const auto& xd = x.data();
    if (mode == Mode::train) {
        for (int64_t i = 0; i < x.numel(); ++i) mean[size_t((i % chunk) / inner)] += xd[size_t(i)];
        for (double& v : mean) v /= double(m);
        for (int64_t i = 0; i < x.numel(); ++i) {
            const double d = xd[size_t(i)] - mean[size_t((i % chunk) / inner)];
            var[size_t((i % chunk) / inner)] += d * d;
        }
        for (double& v : var) v /= double(m);
        auto& rm = lp.state("running_mean").data();
        auto& rv = lp.state("running_var").data();
        for (int64_t c = 0; c < C; ++c) {
            rm[size_t(c)] = momentum * rm[size_t(c)] + (1.0 - momentum) * mean[size_t(c)];
            rv[size_t(c)] = momentum * rv[size_t(c)] + (1.0 - momentum) * var[size_t(c)];
        }
    } else {
        mean = lp.state("running_mean").data();
        var = lp.state("running_var").data();
    }

    std::vector<double> invstd(size_t(C), 0.0);
    for (int64_t c = 0; c < C; ++c) invstd[size_t(c)] = 1.0 / std::sqrt(var[size_t(c)] + epsilon);

    Tensor xhat = Tensor::zeros(x.shape());
    Tensor out = Tensor::zeros(x.shape());
    auto& hd = xhat.data();
    auto& od = out.data();
    const auto& gd = gamma.data();
    const auto& bd = beta.data();
    for (int64_t i = 0; i < x.numel(); ++i) {
        const size_t c = size_t((i % chunk) / inner);
        hd[size_t(i)] = (xd[size_t(i)] - mean[c]) * invstd[c];
        od[size_t(i)] = gd[c] * hd[size_t(i)] + bd[c];
    }

    if (detail::tracking({&x, &gamma, &beta})) {
        out.set_requires_grad(true);
        Tensor xv = x, gv = gamma, bv = beta, ov = out;
        const bool train = (mode == Mode::train);
        Tape::active()->record("batchnorm", [xv, gv, bv, ov, xhat, invstd, C, inner, chunk, m,
                                             train]() mutable {
            const auto& g = ov.grad_view();
            if (g.empty()) return;
            const auto& hd = xhat.data();
            std::vector<double> s1(size_t(C), 0.0), s2(size_t(C), 0.0);
            for (int64_t i = 0; i < xv.numel(); ++i) {
                const size_t c = size_t((i % chunk) / inner);
                s1[c] += g[size_t(i)];
                s2[c] += g[size_t(i)] * hd[size_t(i)];
            }
            if (bv.requires_grad()) {
                auto& gb = bv.grad();
                for (int64_t c = 0; c < C; ++c) gb[size_t(c)] += s1[size_t(c)];
            }
            if (gv.requires_grad()) {
                auto& gg = gv.grad();
                for (int64_t c = 0; c < C; ++c) gg[size_t(c)] += s2[size_t(c)];
            }
            if (xv.requires_grad()) {
                auto& gx = xv.grad();
                const auto& gd = gv.data();
                if (train) {
                    const double invm = 1.0 / double(m);
                    for (int64_t i = 0; i < xv.numel(); ++i) {
                        const size_t c = size_t((i % chunk) / inner);
                        gx[size_t(i)] += gd[c] * invstd[c] *
                                         (g[size_t(i)] - s1[c] * invm - hd[size_t(i)] * s2[c] * invm);
                    }
                } else {
                    for (int64_t i = 0; i < xv.numel(); ++i) {
                        const size_t c = size_t((i % chunk) / inner);
                        gx[size_t(i)] += gd[c] * invstd[c] * g[size_t(i)];
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Stochastic regularizers (inverted scaling; identity in eval mode)
// ---------------------------------------------------------------------------

inline Tensor dropout(const Tensor& x, double p, Mode mode, SeededRng& rng) {
    if (p < 0.0 || p >= 1.0) throw ConfigError("dropout: p must satisfy 0 <= p < 1");
    if (mode == Mode::eval || p == 0.0) return x;
    const double keep_scale = 1.0 / (1.0 - p);
    std::vector<double> mask(size_t(x.numel()), 0.0);
    for (double& v : mask) v = rng.uniform01() < p ? 0.0 : keep_scale;
    Tensor out = Tensor::zeros(x.shape());
    const auto& xd = x.data();
    auto& od = out.data();
    for (size_t i = 0; i < od.size(); ++i) od[i] = xd[i] * mask[i];
    if (detail::tracking({&x})) {
        out.set_requires_grad(true);
        Tensor xv = x, ov = out;
        Tape::active()->record("dropout", [xv, ov, mask = std::move(mask)]() mutable {
            const auto& g = ov.grad_view();
            if (g.empty() || !xv.requires_grad()) return;
            auto& gx = xv.grad();
            for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
        });
    }
    return out;
}

/// Per-sample stochastic depth for residual branches: whole samples are
/// zeroed with probability 1 - survival_p, survivors scaled by 1/survival_p.
inline Tensor drop_connect(const Tensor& x, double survival_p, Mode mode, SeededRng& rng) {
    if (survival_p <= 0.0 || survival_p > 1.0)
        throw ConfigError("drop_connect: survival_p must satisfy 0 < p <= 1");
    if (mode == Mode::eval || survival_p == 1.0) return x;
    const int64_t N = x.dim(0);
    const int64_t per = x.numel() / N;
    std::vector<double> mask(size_t(N), 0.0);
    for (double& v : mask) v = rng.uniform01() < survival_p ? 1.0 / survival_p : 0.0;
    Tensor out = Tensor::zeros(x.shape());
    const auto& xd = x.data();
    auto& od = out.data();
    for (int64_t n = 0; n < N; ++n) {
        const double s = mask[size_t(n)];
        if (s == 0.0) continue;
        for (int64_t i = 0; i < per; ++i) od[size_t(n * per + i)] = xd[size_t(n * per + i)] * s;
    }
    if (detail::tracking({&x})) {
        out.set_requires_grad(true);
        Tensor xv = x, ov = out;
        Tape::active()->record("drop_connect", [xv, ov, mask = std::move(mask), N, per]() mutable {
            const auto& g = ov.grad_view();
            if (g.empty() || !xv.requires_grad()) return;
            auto& gx = xv.grad();
            for (int64_t n = 0; n < N; ++n) {
                const double s = mask[size_t(n)];
                if (s == 0.0) continue;
                for (int64_t i = 0; i < per; ++i) gx[size_t(n * per + i)] += g[size_t(n * per + i)] * s;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

enum class PoolKind { max, avg, global_avg };

inline Tensor pool(const Tensor& x, PoolKind kind, int64_t kh = 0, int64_t kw = 0, int64_t sh = 1,
                   int64_t sw = 1, int64_t ph = 0, int64_t pw = 0) {
    if (x.rank() != 4) throw ShapeError("pool: expected [N,C,H,W], got " + shape_str(x.shape()));
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);

    if (kind == PoolKind::global_avg) {
        Tensor out = reduce_mean(x, {2, 3});       // [N, C]
        return reshape(out, {N, C, 1, 1});
    }

    if (kh < 1 || kw < 1 || sh < 1 || sw < 1 || ph < 0 || pw < 0)
        throw ShapeError("pool: invalid kernel/stride/padding");
    if (kh > H + 2 * ph || kw > W + 2 * pw)
        throw ShapeError("pool: kernel does not fit padded input");
    const int64_t Ho = (H + 2 * ph - kh) / sh + 1;
    const int64_t Wo = (W + 2 * pw - kw) / sw + 1;
    Tensor out = Tensor::zeros({N, C, Ho, Wo});
    const auto& xd = x.data();
    auto& od = out.data();
    std::vector<int64_t> argmax(kind == PoolKind::max ? size_t(out.numel()) : 0, -1);
    const double inv_win = 1.0 / double(kh * kw);

    int64_t oi = 0;
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            const double* plane = xd.data() + (n * C + c) * H * W;
            for (int64_t oy = 0; oy < Ho; ++oy)
                for (int64_t ox = 0; ox < Wo; ++ox, ++oi) {
                    if (kind == PoolKind::max) {
                        double best = -std::numeric_limits<double>::infinity();
                        int64_t best_at = -1;
                        for (int64_t ky = 0; ky < kh; ++ky) {
                            const int64_t iy = oy * sh - ph + ky;
                            if (iy < 0 || iy >= H) continue;
                            for (int64_t kx = 0; kx < kw; ++kx) {
                                const int64_t ix = ox * sw - pw + kx;
                                if (ix < 0 || ix >= W) continue;
                                const double v = plane[iy * W + ix];
                                if (v > best) {
                                    best = v;
                                    best_at = (n * C + c) * H * W + iy * W + ix;
                                }
                            }
                        }
                        od[size_t(oi)] = best;
                        argmax[size_t(oi)] = best_at;
                    } else {
                        double acc = 0.0;
                        for (int64_t ky = 0; ky < kh; ++ky) {
                            const int64_t iy = oy * sh - ph + ky;
                            if (iy < 0 || iy >= H) continue;
                            for (int64_t kx = 0; kx < kw; ++kx) {
                                const int64_t ix = ox * sw - pw + kx;
                                if (ix < 0 || ix >= W) continue;
                                acc += plane[iy * W + ix];
                            }
                        }
                        od[size_t(oi)] = acc * inv_win;
                    }
                }
        }

    if (detail::tracking({&x})) {
        out.set_requires_grad(true);
        Tensor xv = x, ov = out;
        if (kind == PoolKind::max) {
            Tape::active()->record("maxpool", [xv, ov, argmax = std::move(argmax)]() mutable {
                const auto& g = ov.grad_view();
                if (g.empty() || !xv.requires_grad()) return;
                auto& gx = xv.grad();
                for (size_t i = 0; i < g.size(); ++i)
                    if (argmax[i] >= 0) gx[size_t(argmax[i])] += g[i];
            });
        } else {
            Tape::active()->record("avgpool", [xv, ov, N, C, H, W, Ho, Wo, kh, kw, sh, sw, ph, pw,
                                               inv_win]() mutable {
                const auto& g = ov.grad_view();
                if (g.empty() || !xv.requires_grad()) return;
                auto& gx = xv.grad();
                int64_t oi = 0;
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t c = 0; c < C; ++c) {
                        double* plane = gx.data() + (n * C + c) * H * W;
                        for (int64_t oy = 0; oy < Ho; ++oy)
                            for (int64_t ox = 0; ox < Wo; ++ox, ++oi) {
                                const double go = g[size_t(oi)] * inv_win;
                                for (int64_t ky = 0; ky < kh; ++ky) {
                                    const int64_t iy = oy * sh - ph + ky;
                                    if (iy < 0 || iy >= H) continue;
                                    for (int64_t kx = 0; kx < kw; ++kx) {
                                        const int64_t ix = ox * sw - pw + kx;
                                        if (ix >= 0 && ix < W) plane[iy * W + ix] += go;
                                    }
                                }
                            }
                    }
            });
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Squeeze-and-excitation: global pool -> dense C->S -> swish -> dense S->C
// -> sigmoid -> channelwise rescale. The two dense maps carry biases and no
// normalization.
// ---------------------------------------------------------------------------

inline LayerParams make_se_block(int64_t channels, int64_t squeeze_channels, SeededRng& rng) {
    if (squeeze_channels < 1) throw ConfigError("se_block: squeeze_channels must be >= 1");
    LayerParams lp;
    const double b1 = std::sqrt(6.0 / double(channels + squeeze_channels));
    lp.add_param("reduce_weight", Tensor::uniform({channels, squeeze_channels}, -b1, b1, rng));
    lp.add_param("reduce_bias", Tensor::zeros({squeeze_channels}));
    lp.add_param("expand_weight", Tensor::uniform({squeeze_channels, channels}, -b1, b1, rng));
    lp.add_param("expand_bias", Tensor::zeros({channels}));
    return lp;
}

inline Tensor se_block(const Tensor& x, const LayerParams& lp, int64_t squeeze_channels) {
    if (x.rank() != 4) throw ShapeError("se_block: expected [N,C,H,W]");
    const int64_t N = x.dim(0), C = x.dim(1);
    const Tensor& w1 = lp.param("reduce_weight");
    if (w1.dim(0) != C || w1.dim(1) != squeeze_channels)
        throw ShapeError("se_block: reduce weight " + shape_str(w1.shape()) + " does not match " +
                         std::to_string(C) + "->" + std::to_string(squeeze_channels));
    Tensor pooled = reshape(pool(x, PoolKind::global_avg), {N, C});
    Tensor h = add(matmul(pooled, w1), lp.param("reduce_bias"));
    h = swish(h);
    Tensor gate = add(matmul(h, lp.param("expand_weight")), lp.param("expand_bias"));
    gate = sigmoid(gate);
    return mul(x, reshape(gate, {N, C, 1, 1}));
}

}  // namespace dermfuse
