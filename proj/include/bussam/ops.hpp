#pragma once

#include <array>
#include <cmath>
#include <limits>

#include "bussam/tensor.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace bussam::ops {

enum class Reduce { Max, Mean };
enum class PoolAxis { Spatial, Channel };
enum class NormMode { Layer, Group };

namespace detail {

// Pad a shape on the left with 1s to rank r.
inline Shape pad_shape(const Shape& s, int r) {
    Shape out(static_cast<std::size_t>(r), 1);
    std::copy(s.begin(), s.end(), out.end() - static_cast<std::ptrdiff_t>(s.size()));
    return out;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    int r = static_cast<int>(std::max(a.size(), b.size()));
    Shape pa = pad_shape(a, r), pb = pad_shape(b, r), out(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) {
        int da = pa[i], db = pb[i];
        if (da != db && da != 1 && db != 1)
            throw UsageError(std::string(op) + ": shapes " + shape_str(a) + " and " +
                             shape_str(b) + " are not broadcastable");
        out[i] = std::max(da, db);
    }
    return out;
}

inline std::array<std::int64_t, 4> strides_for(const Shape& padded, const Shape& out, int r) {
    std::array<std::int64_t, 4> st{0, 0, 0, 0};
    std::int64_t acc = 1;
    for (int i = r - 1; i >= 0; --i) {
        st[i] = (padded[i] == 1 && out[i] != 1) ? 0 : acc;
        acc *= padded[i];
    }
    return st;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops with NumPy-style broadcasting (dims equal or 1).
// ---------------------------------------------------------------------------

template <typename T, typename FwdFn, typename BwdFn>
Tensor<T> binary_broadcast(const char* name, const Tensor<T>& a, const Tensor<T>& b, FwdFn fwd,
                           BwdFn bwd) {
    if (a.shape() == b.shape()) {
        std::int64_t n = a.numel();
        std::vector<T> out(static_cast<std::size_t>(n));
        const T* pa = a.data().data();
        const T* pb = b.data().data();
        for (std::int64_t i = 0; i < n; ++i) out[i] = fwd(pa[i], pb[i]);
        return make_op<T>(name, a.shape(), std::move(out), {a, b}, [=](TensorImpl<T>* self) {
            auto ia = a.impl(), ib = b.impl();
            return [=]() {
                std::int64_t m = static_cast<std::int64_t>(self->val.size());
                if (ia->requires_grad) {
                    ia->ensure_grad();
                    for (std::int64_t i = 0; i < m; ++i) {
                        auto [da, db] = bwd(ia->val[i], ib->val[i]);
                        (void)db;
                        ia->grad[i] += self->grad[i] * da;
                    }
                }
                if (ib->requires_grad) {
                    ib->ensure_grad();
                    for (std::int64_t i = 0; i < m; ++i) {
                        auto [da, db] = bwd(ia->val[i], ib->val[i]);
                        (void)da;
                        ib->grad[i] += self->grad[i] * db;
                    }
                }
            };
        });
    }

    Shape oshape = detail::broadcast_shape(a.shape(), b.shape(), name);
    int r = static_cast<int>(oshape.size());
    Shape pa = detail::pad_shape(a.shape(), r), pb = detail::pad_shape(b.shape(), r);
    auto sa = detail::strides_for(pa, oshape, r), sb = detail::strides_for(pb, oshape, r);
    std::int64_t n = bussam::numel(oshape);
    std::vector<T> out(static_cast<std::size_t>(n));
    Shape osh = oshape;
    const T* da = a.data().data();
    const T* db = b.data().data();
    std::array<std::int64_t, 4> idx{0, 0, 0, 0};
    for (std::int64_t i = 0; i < n; ++i) {
        std::int64_t oa = 0, ob = 0;
        for (int d = 0; d < r; ++d) {
            oa += idx[d] * sa[d];
            ob += idx[d] * sb[d];
        }
        out[i] = fwd(da[oa], db[ob]);
        for (int d = r - 1; d >= 0; --d) {
            if (++idx[d] < osh[d]) break;
            idx[d] = 0;
        }
    }
    return make_op<T>(name, oshape, std::move(out), {a, b}, [=](TensorImpl<T>* self) {
        auto ia = a.impl(), ib = b.impl();
        return [=]() {
            if (ia->requires_grad) ia->ensure_grad();
            if (ib->requires_grad) ib->ensure_grad();
            std::int64_t m = static_cast<std::int64_t>(self->val.size());
            std::array<std::int64_t, 4> ix{0, 0, 0, 0};
            for (std::int64_t i = 0; i < m; ++i) {
                std::int64_t oa = 0, ob = 0;
                for (int d = 0; d < r; ++d) {
                    oa += ix[d] * sa[d];
                    ob += ix[d] * sb[d];
                }
                auto [ga, gb] = bwd(ia->val[oa], ib->val[ob]);
                if (ia->requires_grad) ia->grad[oa] += self->grad[i] * ga;
                if (ib->requires_grad) ib->grad[ob] += self->grad[i] * gb;
                for (int d = r - 1; d >= 0; --d) {
                    if (++ix[d] < osh[d]) break;
                    ix[d] = 0;
                }
            }
        };
    });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_broadcast(
        "add", a, b, [](T x, T y) { return x + y; },
        [](T, T) { return std::pair<T, T>(T(1), T(1)); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_broadcast(
        "sub", a, b, [](T x, T y) { return x - y; },
        [](T, T) { return std::pair<T, T>(T(1), T(-1)); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_broadcast(
        "mul", a, b, [](T x, T y) { return x * y; },
        [](T x, T y) { return std::pair<T, T>(y, x); });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, double c) {
    std::int64_t n = a.numel();
    std::vector<T> out(static_cast<std::size_t>(n));
    const T* pa = a.data().data();
    T cc = static_cast<T>(c);
    for (std::int64_t i = 0; i < n; ++i) out[i] = pa[i] * cc;
    return make_op<T>("scale", a.shape(), std::move(out), {a}, [=](TensorImpl<T>* self) {
        auto ia = a.impl();
        return [=]() {
            if (!ia->requires_grad) return;
            ia->ensure_grad();
            for (std::size_t i = 0; i < self->grad.size(); ++i) ia->grad[i] += self->grad[i] * cc;
        };
    });
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
    T s = T(0);
    for (T v : a.data()) s += v;
    return make_op<T>("sum", Shape{1}, std::vector<T>{s}, {a}, [=](TensorImpl<T>* self) {
        auto ia = a.impl();
        return [=]() {
            if (!ia->requires_grad) return;
            ia->ensure_grad();
            T g = self->grad[0];
            for (auto& v : ia->grad) v += g;
        };
    });
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
    return scale(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

// ---------------------------------------------------------------------------
// Unary elementwise activations.
// ---------------------------------------------------------------------------

template <typename T, typename FwdFn, typename DerivFn>
Tensor<T> unary_elementwise(const char* name, const Tensor<T>& a, FwdFn fwd, DerivFn deriv) {
    std::int64_t n = a.numel();
    std::vector<T> out(static_cast<std::size_t>(n));
    const T* pa = a.data().data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (n > 16384)
#endif
    for (std::int64_t i = 0; i < n; ++i) out[i] = fwd(pa[i]);
    return make_op<T>(name, a.shape(), std::move(out), {a}, [=](TensorImpl<T>* self) {
        auto ia = a.impl();
        return [=]() {
            if (!ia->requires_grad) return;
            ia->ensure_grad();
            std::int64_t m = static_cast<std::int64_t>(self->grad.size());
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (m > 16384)
#endif
            for (std::int64_t i = 0; i < m; ++i)
                ia->grad[i] += self->grad[i] * deriv(ia->val[i], self->val[i]);
        };
    });
}

// GELU, tanh approximation: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3))).
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
    const T k0 = static_cast<T>(0.7978845608028654);
    const T k1 = static_cast<T>(0.044715);
    return unary_elementwise(
        "gelu", a,
        [=](T x) {
            T u = k0 * (x + k1 * x * x * x);
            return static_cast<T>(0.5) * x * (T(1) + std::tanh(u));
        },
        [=](T x, T) {
            T u = k0 * (x + k1 * x * x * x);
            T t = std::tanh(u);
            T du = k0 * (T(1) + T(3) * k1 * x * x);
            return static_cast<T>(0.5) * (T(1) + t) +
                   static_cast<T>(0.5) * x * (T(1) - t * t) * du;
        });
}

// Output clamped into the open interval (0,1) even where exp underflows.
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    const T lo = std::numeric_limits<T>::min();
    const T hi = T(1) - std::numeric_limits<T>::epsilon() / T(2);
    return unary_elementwise(
        "sigmoid", a,
        [=](T x) {
            T y = x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                            : std::exp(x) / (T(1) + std::exp(x));
            return std::min(hi, std::max(lo, y));
        },
        [](T, T y) { return y * (T(1) - y); });
}

// ---------------------------------------------------------------------------
// conv2d: NCHW input, weight (Cout, Cin/groups, k, k), optional bias.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int stride,
                 int pad, int groups = 1) {
    if (x.rank() != 4) throw UsageError("conv2d: input must be NCHW, got " + shape_str(x.shape()));
    if (w.rank() != 4) throw ConfigError("conv2d: weight must be rank 4, got " + shape_str(w.shape()));
    if (stride < 1 || pad < 0) throw ConfigError("conv2d: need stride >= 1 and pad >= 0");
    const int N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Co = w.dim(0), Cig = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    if (groups < 1 || Ci % groups != 0 || Co % groups != 0)
        throw ConfigError("conv2d: groups=" + std::to_string(groups) + " must divide in_channels=" +
                          std::to_string(Ci) + " and out_channels=" + std::to_string(Co));
    if (Cig != Ci / groups)
        throw ConfigError("conv2d: weight expects " + std::to_string(Cig) +
                          " channels per group but input has " + std::to_string(Ci / groups) +
                          " (input " + shape_str(x.shape()) + ", weight " + shape_str(w.shape()) + ")");
    if (bias.defined() && bias.numel() != Co)
        throw ConfigError("conv2d: bias length " + std::to_string(bias.numel()) +
                          " != out_channels " + std::to_string(Co));
    const int Ho = (H + 2 * pad - kh) / stride + 1;
    const int Wo = (W + 2 * pad - kw) / stride + 1;
    if (Ho < 1 || Wo < 1)
        throw ConfigError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                          " does not fit input " + shape_str(x.shape()));

    std::vector<T> out(static_cast<std::size_t>(N) * Co * Ho * Wo, T(0));
    const T* px = x.data().data();
    const T* pw = w.data().data();
    const T* pb = bias.defined() ? bias.data().data() : nullptr;
    const int cog = Co / groups;

#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int n = 0; n < N; ++n) {
        for (int co = 0; co < Co; ++co) {
            const int g = co / cog;
            T* po = out.data() + (static_cast<std::int64_t>(n) * Co + co) * Ho * Wo;
            if (pb) {
                for (int i = 0; i < Ho * Wo; ++i) po[i] = pb[co];
            }
            for (int cl = 0; cl < Cig; ++cl) {
                const int ci = g * Cig + cl;
                const T* xc = px + (static_cast<std::int64_t>(n) * Ci + ci) * H * W;
                const T* wc = pw + ((static_cast<std::int64_t>(co) * Cig + cl) * kh) * kw;
                for (int r = 0; r < kh; ++r) {
                    for (int c = 0; c < kw; ++c) {
                        const T wv = wc[r * kw + c];
                        for (int ho = 0; ho < Ho; ++ho) {
                            const int ih = ho * stride - pad + r;
                            if (ih < 0 || ih >= H) continue;
                            const T* xrow = xc + ih * W;
                            T* orow = po + ho * Wo;
                            for (int wo = 0; wo < Wo; ++wo) {
                                const int iw = wo * stride - pad + c;
                                if (iw < 0 || iw >= W) continue;
                                orow[wo] += wv * xrow[iw];
                            }
                        }
                    }
                }
            }
        }
    }

    std::vector<Tensor<T>> parents{x, w};
    if (bias.defined()) parents.push_back(bias);
    return make_op<T>("conv2d", Shape{N, Co, Ho, Wo}, std::move(out), parents,
                      [=](TensorImpl<T>* self) {
        auto ix = x.impl(), iw = w.impl();
        auto ib = bias.defined() ? bias.impl() : nullptr;
        return [=]() {
            const T* g = self->grad.data();
            if (ib && ib->requires_grad) {
                ib->ensure_grad();
                for (int co = 0; co < Co; ++co) {
                    T acc = T(0);
                    for (int n = 0; n < N; ++n) {
                        const T* go = g + (static_cast<std::int64_t>(n) * Co + co) * Ho * Wo;
                        for (int i = 0; i < Ho * Wo; ++i) acc += go[i];
                    }
                    ib->grad[co] += acc;
                }
            }
            if (iw->requires_grad) {
                iw->ensure_grad();
                T* gw = iw->grad.data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
                for (int co = 0; co < Co; ++co) {
                    const int gr = co / cog;
                    for (int n = 0; n < N; ++n) {
                        const T* go = g + (static_cast<std::int64_t>(n) * Co + co) * Ho * Wo;
                        for (int cl = 0; cl < Cig; ++cl) {
                            const int ci = gr * Cig + cl;
                            const T* xc = ix->val.data() +
                                          (static_cast<std::int64_t>(n) * Ci + ci) * H * W;
                            T* gwc = gw + ((static_cast<std::int64_t>(co) * Cig + cl) * kh) * kw;
                            for (int r = 0; r < kh; ++r) {
                                for (int c = 0; c < kw; ++c) {
                                    T acc = T(0);
                                    for (int ho = 0; ho < Ho; ++ho) {
                                        const int ih = ho * stride - pad + r;
                                        if (ih < 0 || ih >= H) continue;
                                        const T* xrow = xc + ih * W;
                                        const T* grow = go + ho * Wo;
                                        for (int wo = 0; wo < Wo; ++wo) {
                                            const int iw2 = wo * stride - pad + c;
                                            if (iw2 < 0 || iw2 >= W) continue;
                                            acc += grow[wo] * xrow[iw2];
                                        }
                                    }
                                    gwc[r * kw + c] += acc;
                                }
                            }
                        }
                    }
                }
            }
            if (ix->requires_grad) {
                ix->ensure_grad();
                T* gx = ix->grad.data();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
                for (int n = 0; n < N; ++n) {
                    for (int ci = 0; ci < Ci; ++ci) {
                        const int gr = ci / Cig;
                        const int cl = ci % Cig;
                        T* gxc = gx + (static_cast<std::int64_t>(n) * Ci + ci) * H * W;
                        for (int col = 0; col < cog; ++col) {
                            const int co = gr * cog + col;
                            const T* go = g + (static_cast<std::int64_t>(n) * Co + co) * Ho * Wo;
                            const T* wc = iw->val.data() +
                                          ((static_cast<std::int64_t>(co) * Cig + cl) * kh) * kw;
                            for (int r = 0; r < kh; ++r) {
                                for (int c = 0; c < kw; ++c) {
                                    const T wv = wc[r * kw + c];
                                    for (int ho = 0; ho < Ho; ++ho) {
                                        const int ih = ho * stride - pad + r;
                                        if (ih < 0 || ih >= H) continue;
                                        T* gxrow = gxc + ih * W;
                                        const T* grow = go + ho * Wo;
                                        for (int wo = 0; wo < Wo; ++wo) {
                                            const int iw2 = wo * stride - pad + c;
                                            if (iw2 < 0 || iw2 >= W) continue;
                                            gxrow[iw2] += wv * grow[wo];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        };
    });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, int stride, int pad, int groups = 1) {
    return conv2d(x, w, Tensor<T>(), stride, pad, groups);
}

// ---------------------------------------------------------------------------
// Pooling. Spatial mode reduces kxk windows; channel mode collapses C to 1.
// Max gradients route 1.0 to the first (lowest flat index) argmax.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> pool_spatial(const Tensor<T>& x, Reduce reduce, int kernel, int stride) {
    if (x.rank() != 4) throw UsageError("pool: input must be NCHW");
    if (kernel < 1 || stride < 1) throw ConfigError("pool: kernel and stride must be >= 1");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (kernel > H || kernel > W)
        throw ConfigError("pool: kernel " + std::to_string(kernel) + " exceeds spatial extent " +
                          std::to_string(H) + "x" + std::to_string(W));
    const int Ho = (H - kernel) / stride + 1;
    const int Wo = (W - kernel) / stride + 1;
    std::vector<T> out(static_cast<std::size_t>(N) * C * Ho * Wo);
    std::vector<std::int32_t> argmax;
    if (reduce == Reduce::Max) argmax.resize(out.size());
    const T* px = x.data().data();
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const T* xc = px + (static_cast<std::int64_t>(n) * C + c) * H * W;
            std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * Ho * Wo;
            for (int ho = 0; ho < Ho; ++ho)
                for (int wo = 0; wo < Wo; ++wo) {
                    if (reduce == Reduce::Max) {
                        T best = xc[(ho * stride) * W + wo * stride];
                        int besti = (ho * stride) * W + wo * stride;
                        for (int r = 0; r < kernel; ++r)
                            for (int cc = 0; cc < kernel; ++cc) {
                                int idx = (ho * stride + r) * W + (wo * stride + cc);
                                if (xc[idx] > best) {
                                    best = xc[idx];
                                    besti = idx;
                                }
                            }
                        out[base + ho * Wo + wo] = best;
                        argmax[base + ho * Wo + wo] = besti;
                    } else {
                        T acc = T(0);
                        for (int r = 0; r < kernel; ++r)
                            for (int cc = 0; cc < kernel; ++cc)
                                acc += xc[(ho * stride + r) * W + (wo * stride + cc)];
                        out[base + ho * Wo + wo] = acc / static_cast<T>(kernel * kernel);
                    }
                }
        }
    return make_op<T>("pool_spatial", Shape{N, C, Ho, Wo}, std::move(out), {x},
                      [=, am = std::move(argmax)](TensorImpl<T>* self) {
        auto ix = x.impl();
        return [=]() {
            if (!ix->requires_grad) return;
            ix->ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    T* gxc = ix->grad.data() + (static_cast<std::int64_t>(n) * C + c) * H * W;
                    std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * Ho * Wo;
                    for (int i = 0; i < Ho * Wo; ++i) {
                        T g = self->grad[base + i];
                        if (reduce == Reduce::Max) {
                            gxc[am[base + i]] += g;
                        } else {
                            T share = g / static_cast<T>(kernel * kernel);
                            int ho = i / Wo, wo = i % Wo;
                            for (int r = 0; r < kernel; ++r)
                                for (int cc = 0; cc < kernel; ++cc)
                                    gxc[(ho * stride + r) * W + (wo * stride + cc)] += share;
                        }
                    }
                }
        };
    });
}

template <typename T>
Tensor<T> pool_channel(const Tensor<T>& x, Reduce reduce) {
    if (x.rank() != 4) throw UsageError("pool: input must be NCHW");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    std::vector<T> out(static_cast<std::size_t>(N) * H * W);
    std::vector<std::int32_t> argmax;
    if (reduce == Reduce::Max) argmax.resize(out.size());
    const T* px = x.data().data();
    for (int n = 0; n < N; ++n)
        for (int i = 0; i < H * W; ++i) {
            const T* p = px + static_cast<std::int64_t>(n) * C * H * W + i;
            if (reduce == Reduce::Max) {
                T best = p[0];
                int bc = 0;
                for (int c = 1; c < C; ++c)
                    if (p[c * H * W] > best) {
                        best = p[c * H * W];
                        bc = c;
                    }
                out[static_cast<std::int64_t>(n) * H * W + i] = best;
                argmax[static_cast<std::int64_t>(n) * H * W + i] = bc;
            } else {
                T acc = T(0);
                for (int c = 0; c < C; ++c) acc += p[c * H * W];
                out[static_cast<std::int64_t>(n) * H * W + i] = acc / static_cast<T>(C);
            }
        }
    return make_op<T>("pool_channel", Shape{N, 1, H, W}, std::move(out), {x},
                      [=, am = std::move(argmax)](TensorImpl<T>* self) {
        auto ix = x.impl();
        return [=]() {
            if (!ix->requires_grad) return;
            ix->ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int i = 0; i < H * W; ++i) {
                    T g = self->grad[static_cast<std::int64_t>(n) * H * W + i];
                    T* p = ix->grad.data() + static_cast<std::int64_t>(n) * C * H * W + i;
                    if (reduce == Reduce::Max) {
                        p[am[static_cast<std::int64_t>(n) * H * W + i] * H * W] += g;
                    } else {
                        T share = g / static_cast<T>(C);
                        for (int c = 0; c < C; ++c) p[c * H * W] += share;
                    }
                }
        };
    });
}

template <typename T>
Tensor<T> pool(const Tensor<T>& x, PoolAxis axis, Reduce reduce, int kernel, int stride) {
    return axis == PoolAxis::Spatial ? pool_spatial(x, reduce, kernel, stride)
                                     : pool_channel(x, reduce);
}

// ---------------------------------------------------------------------------
// Corner-aligned bilinear resize over the two trailing spatial dims of NCHW.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, int out_h, int out_w) {
    if (x.rank() != 4) throw UsageError("bilinear_resize: input must be NCHW");
    if (out_h < 1 || out_w < 1) throw ConfigError("bilinear_resize: output dims must be >= 1");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const double sh = out_h > 1 ? static_cast<double>(H - 1) / (out_h - 1) : 0.0;
    const double sw = out_w > 1 ? static_cast<double>(W - 1) / (out_w - 1) : 0.0;

    struct Tap {
        int i0, i1;
        T f;  // weight of i1
    };
    std::vector<Tap> ty(static_cast<std::size_t>(out_h)), tx(static_cast<std::size_t>(out_w));
    for (int o = 0; o < out_h; ++o) {
        double s = o * sh;
        int i0 = static_cast<int>(s);
        ty[o] = {i0, std::min(i0 + 1, H - 1), static_cast<T>(s - i0)};
    }
    for (int o = 0; o < out_w; ++o) {
        double s = o * sw;
        int i0 = static_cast<int>(s);
        tx[o] = {i0, std::min(i0 + 1, W - 1), static_cast<T>(s - i0)};
    }

    std::vector<T> out(static_cast<std::size_t>(N) * C * out_h * out_w);
    const T* px = x.data().data();
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const T* xc = px + (static_cast<std::int64_t>(n) * C + c) * H * W;
            T* po = out.data() + (static_cast<std::int64_t>(n) * C + c) * out_h * out_w;
            for (int oy = 0; oy < out_h; ++oy) {
                const Tap& a = ty[oy];
                for (int ox = 0; ox < out_w; ++ox) {
                    const Tap& b = tx[ox];
                    T v00 = xc[a.i0 * W + b.i0], v01 = xc[a.i0 * W + b.i1];
                    T v10 = xc[a.i1 * W + b.i0], v11 = xc[a.i1 * W + b.i1];
                    T top = v00 + b.f * (v01 - v00);
                    T bot = v10 + b.f * (v11 - v10);
                    po[oy * out_w + ox] = top + a.f * (bot - top);
                }
            }
        }
    return make_op<T>("bilinear_resize", Shape{N, C, out_h, out_w}, std::move(out), {x},
                      [=, ty = std::move(ty), tx = std::move(tx)](TensorImpl<T>* self) {
        auto ix = x.impl();
        return [=]() {
            if (!ix->requires_grad) return;
            ix->ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    T* gxc = ix->grad.data() + (static_cast<std::int64_t>(n) * C + c) * H * W;
                    const T* go =
                        self->grad.data() + (static_cast<std::int64_t>(n) * C + c) * out_h * out_w;
                    for (int oy = 0; oy < out_h; ++oy) {
                        const auto& a = ty[oy];
                        for (int ox = 0; ox < out_w; ++ox) {
                            const auto& b = tx[ox];
                            T g = go[oy * out_w + ox];
                            gxc[a.i0 * W + b.i0] += g * (T(1) - a.f) * (T(1) - b.f);
                            gxc[a.i0 * W + b.i1] += g * (T(1) - a.f) * b.f;
                            gxc[a.i1 * W + b.i0] += g * a.f * (T(1) - b.f);
                            gxc[a.i1 * W + b.i1] += g * a.f * b.f;
                        }
                    }
                }
        };
    });
}

// ---------------------------------------------------------------------------
// Normalization. Layer mode: over channels per (n,h,w) for rank 4, over the
// last dim otherwise. Group mode (rank 4): per (n, group) over (C/g, H, W).
// gamma/beta are indexed by channel.
// ---------------------------------------------------------------------------

namespace detail {

// Geometry of one normalization layout: set s covers elements
// base(s) + j*stride for j in [0, set_size), with channel chan(s, j).
struct NormLayout {
    std::int64_t num_sets = 0;
    std::int64_t set_size = 0;
    std::int64_t stride = 1;
    // rank-4 layer mode: sets indexed by (n,h,w), elements strided by H*W
    bool channel_is_j_div = false;  // group mode: channel = chan_base + j/(H*W)
    int hw = 1;                     // H*W (group mode divisor)
    int C = 0;
    int chans_per_group = 0;  // group mode
};

}  // namespace detail

template <typename T>
Tensor<T> normalize(const Tensor<T>& x, NormMode mode, int num_groups, const Tensor<T>& gamma,
                    const Tensor<T>& beta, double eps = 1e-5) {
    const int rank = x.rank();
    const int C = (rank == 4) ? x.dim(1) : x.dim(rank - 1);
    if (gamma.numel() != C || beta.numel() != C)
        throw ConfigError("normalize: scale/shift length must equal " + std::to_string(C));
    if (mode == NormMode::Group) {
        if (rank != 4) throw UsageError("normalize: group mode requires NCHW input");
        if (num_groups < 1 || C % num_groups != 0)
            throw ConfigError("normalize: channels " + std::to_string(C) +
                              " not divisible by num_groups " + std::to_string(num_groups));
    }

    const std::int64_t n_total = x.numel();
    std::vector<T> out(static_cast<std::size_t>(n_total));
    std::vector<T> xhat(static_cast<std::size_t>(n_total));
    std::vector<T> inv_std;

    // layout: three cases, each expressed as (set base, element stride, channel index fn)
    enum class Case { GroupNCHW, LastDim } lc;
    std::int64_t num_sets, set_size, stride;
    int HW = 1, Cg = 1;
    if (rank == 4 && mode == NormMode::Layer) {
        // Layer norm on feature maps normalizes the whole (C,H,W) volume per
        // sample (one-group group norm); a per-position set over channels
        // would be degenerate when a stage narrows to a single channel.
        lc = Case::GroupNCHW;
        const int N = x.dim(0);
        HW = x.dim(2) * x.dim(3);
        Cg = C;
        num_sets = N;
        set_size = static_cast<std::int64_t>(C) * HW;
        stride = 1;
    } else if (rank == 4 && mode == NormMode::Group) {
        lc = Case::GroupNCHW;
        const int N = x.dim(0);
        HW = x.dim(2) * x.dim(3);
        Cg = C / num_groups;
        num_sets = static_cast<std::int64_t>(N) * num_groups;
        set_size = static_cast<std::int64_t>(Cg) * HW;
        stride = 1;
    } else {
        lc = Case::LastDim;
        num_sets = n_total / C;
        set_size = C;
        stride = 1;
    }
    inv_std.resize(static_cast<std::size_t>(num_sets));

    auto set_base = [=](std::int64_t s) -> std::int64_t {
        switch (lc) {
            case Case::GroupNCHW: {
                std::int64_t n = s / (C / Cg), g = s % (C / Cg);
                return (n * C + g * Cg) * static_cast<std::int64_t>(HW);
            }
            default:
                return s * C;
        }
    };
    auto chan_of = [=](std::int64_t s, std::int64_t j) -> int {
        switch (lc) {
            case Case::GroupNCHW: {
                std::int64_t g = s % (C / Cg);
                return static_cast<int>(g * Cg + j / HW);
            }
            default:
                return static_cast<int>(j);
        }
    };

    const T* px = x.data().data();
    const T* pg = gamma.data().data();
    const T* pb = beta.data().data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (n_total > 65536)
#endif
    for (std::int64_t s = 0; s < num_sets; ++s) {
        const std::int64_t base = set_base(s);
        T mu = T(0);
        for (std::int64_t j = 0; j < set_size; ++j) mu += px[base + j * stride];
        mu /= static_cast<T>(set_size);
        T var = T(0);
        for (std::int64_t j = 0; j < set_size; ++j) {
            T d = px[base + j * stride] - mu;
            var += d * d;
        }
        var /= static_cast<T>(set_size);
        const T inv = T(1) / std::sqrt(var + static_cast<T>(eps));
        inv_std[s] = inv;
        for (std::int64_t j = 0; j < set_size; ++j) {
            const std::int64_t i = base + j * stride;
            const int c = chan_of(s, j);
            xhat[i] = (px[i] - mu) * inv;
            out[i] = pg[c] * xhat[i] + pb[c];
        }
    }

    return make_op<T>("normalize", x.shape(), std::move(out), {x, gamma, beta},
                      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](TensorImpl<T>* self) {
        auto ix = x.impl(), ig = gamma.impl(), ib = beta.impl();
        return [=]() {
            if (ig->requires_grad) ig->ensure_grad();
            if (ib->requires_grad) ib->ensure_grad();
            if (ix->requires_grad) ix->ensure_grad();
            const T* g = self->grad.data();
            for (std::int64_t s = 0; s < num_sets; ++s) {
                const std::int64_t base = set_base(s);
                if (ig->requires_grad || ib->requires_grad) {
                    for (std::int64_t j = 0; j < set_size; ++j) {
                        const std::int64_t i = base + j * stride;
                        const int c = chan_of(s, j);
                        if (ig->requires_grad) ig->grad[c] += g[i] * xhat[i];
                        if (ib->requires_grad) ib->grad[c] += g[i];
                    }
                }
                if (ix->requires_grad) {
                    T mean_d = T(0), mean_dx = T(0);
                    for (std::int64_t j = 0; j < set_size; ++j) {
                        const std::int64_t i = base + j * stride;
                        T d = g[i] * ig->val[chan_of(s, j)];
                        mean_d += d;
                        mean_dx += d * xhat[i];
                    }
                    mean_d /= static_cast<T>(set_size);
                    mean_dx /= static_cast<T>(set_size);
                    for (std::int64_t j = 0; j < set_size; ++j) {
                        const std::int64_t i = base + j * stride;
                        T d = g[i] * ig->val[chan_of(s, j)];
                        ix->grad[i] += inv_std[s] * (d - mean_d - xhat[i] * mean_dx);
                    }
                }
            }
        };
    });
}

// ---------------------------------------------------------------------------
// Linear map over the last dim: weight (Cout, Cin), optional bias (Cout).
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
    if (w.rank() != 2) throw ConfigError("linear: weight must be rank 2");
    const int Cin = w.dim(1), Cout = w.dim(0);
    if (x.dim(x.rank() - 1) != Cin)
        throw ConfigError("linear: input last dim " + std::to_string(x.dim(x.rank() - 1)) +
                          " != weight in_features " + std::to_string(Cin));
    if (bias.defined() && bias.numel() != Cout)
        throw ConfigError("linear: bias length mismatch");
    const std::int64_t M = x.numel() / Cin;
    Shape oshape = x.shape();
    oshape.back() = Cout;
    std::vector<T> out(static_cast<std::size_t>(M) * Cout);
    const T* px = x.data().data();
    const T* pw = w.data().data();
    const T* pb = bias.defined() ? bias.data().data() : nullptr;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (M * Cout * Cin > 262144)
#endif
    for (std::int64_t m = 0; m < M; ++m) {
        const T* xr = px + m * Cin;
        T* orow = out.data() + m * Cout;
        for (int co = 0; co < Cout; ++co) {
            const T* wr = pw + static_cast<std::int64_t>(co) * Cin;
            T acc = pb ? pb[co] : T(0);
            for (int k = 0; k < Cin; ++k) acc += xr[k] * wr[k];
            orow[co] = acc;
        }
    }
    std::vector<Tensor<T>> parents{x, w};
    if (bias.defined()) parents.push_back(bias);
    return make_op<T>("linear", std::move(oshape), std::move(out), parents,
                      [=](TensorImpl<T>* self) {
        auto ix = x.impl(), iw = w.impl();
        auto ib = bias.defined() ? bias.impl() : nullptr;
        return [=]() {
            const T* g = self->grad.data();
            if (ib && ib->requires_grad) {
                ib->ensure_grad();
                for (int co = 0; co < Cout; ++co) {
                    T acc = T(0);
                    for (std::int64_t m = 0; m < M; ++m) acc += g[m * Cout + co];
                    ib->grad[co] += acc;
                }
            }
            if (iw->requires_grad) {
                iw->ensure_grad();
                T* gw = iw->grad.data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (M * Cout * Cin > 262144)
#endif
                for (int co = 0; co < Cout; ++co) {
                    T* gwr = gw + static_cast<std::int64_t>(co) * Cin;
                    for (std::int64_t m = 0; m < M; ++m) {
                        const T gv = g[m * Cout + co];
                        const T* xr = ix->val.data() + m * Cin;
                        for (int k = 0; k < Cin; ++k) gwr[k] += gv * xr[k];
                    }
                }
            }
            if (ix->requires_grad) {
                ix->ensure_grad();
                T* gx = ix->grad.data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (M * Cout * Cin > 262144)
#endif
                for (std::int64_t m = 0; m < M; ++m) {
                    T* gxr = gx + m * Cin;
                    for (int co = 0; co < Cout; ++co) {
                        const T gv = g[m * Cout + co];
                        const T* wr = iw->val.data() + static_cast<std::int64_t>(co) * Cin;
                        for (int k = 0; k < Cin; ++k) gxr[k] += gv * wr[k];
                    }
                }
            }
        };
    });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w) {
    return linear(x, w, Tensor<T>());
}

// ---------------------------------------------------------------------------
// Batched matmul: (..., M, K) x (..., K, N), identical leading dims.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() < 2 || b.rank() < 2 || a.rank() != b.rank())
        throw UsageError("matmul: ranks must match and be >= 2");
    const int r = a.rank();
    std::int64_t B = 1;
    for (int i = 0; i < r - 2; ++i) {
        if (a.dim(i) != b.dim(i)) throw UsageError("matmul: batch dims mismatch");
        B *= a.dim(i);
    }
    const int M = a.dim(r - 2), K = a.dim(r - 1), K2 = b.dim(r - 2), N = b.dim(r - 1);
    if (K != K2)
        throw UsageError("matmul: inner dims " + std::to_string(K) + " vs " + std::to_string(K2));
    Shape oshape = a.shape();
    oshape[r - 1] = N;
    std::vector<T> out(static_cast<std::size_t>(B) * M * N, T(0));
    const T* pa = a.data().data();
    const T* pb = b.data().data();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static) if (B * M * N * K > 262144)
#endif
    for (std::int64_t bi = 0; bi < B; ++bi) {
        for (int i = 0; i < M; ++i) {
            const T* ar = pa + (bi * M + i) * K;
            T* orow = out.data() + (bi * M + i) * N;
            const T* bmat = pb + bi * K * N;
            for (int k = 0; k < K; ++k) {
                const T av = ar[k];
                const T* brow = bmat + static_cast<std::int64_t>(k) * N;
                for (int n = 0; n < N; ++n) orow[n] += av * brow[n];
            }
        }
    }
    return make_op<T>("matmul", std::move(oshape), std::move(out), {a, b},
                      [=](TensorImpl<T>* self) {
        auto ia = a.impl(), ib2 = b.impl();
        return [=]() {
            const T* g = self->grad.data();
            if (ia->requires_grad) {
                ia->ensure_grad();
                T* ga = ia->grad.data();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static) if (B * M * N * K > 262144)
#endif
                for (std::int64_t bi = 0; bi < B; ++bi)
                    for (int i = 0; i < M; ++i) {
                        T* gar = ga + (bi * M + i) * K;
                        const T* grow = g + (bi * M + i) * N;
                        const T* bmat = ib2->val.data() + bi * K * N;
                        for (int k = 0; k < K; ++k) {
                            const T* brow = bmat + static_cast<std::int64_t>(k) * N;
                            T acc = T(0);
                            for (int n = 0; n < N; ++n) acc += grow[n] * brow[n];
                            gar[k] += acc;
                        }
                    }
            }
            if (ib2->requires_grad) {
                ib2->ensure_grad();
                T* gb = ib2->grad.data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (B * M * N * K > 262144)
#endif
                for (std::int64_t bi = 0; bi < B; ++bi) {
                    T* gbmat = gb + bi * K * N;
                    for (int i = 0; i < M; ++i) {
                        const T* ar = ia->val.data() + (bi * M + i) * K;
                        const T* grow = g + (bi * M + i) * N;
                        for (int k = 0; k < K; ++k) {
                            const T av = ar[k];
                            T* gbrow = gbmat + static_cast<std::int64_t>(k) * N;
                            for (int n = 0; n < N; ++n) gbrow[n] += av * grow[n];
                        }
                    }
                }
            }
        };
    });
}

// ---------------------------------------------------------------------------
// Softmax over the last dim (rows are independent).
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
    const int C = x.dim(x.rank() - 1);
    const std::int64_t rows = x.numel() / C;
    std::vector<T> out(static_cast<std::size_t>(x.numel()));
    const T* px = x.data().data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* xr = px + r * C;
        T* orow = out.data() + r * C;
        T mx = xr[0];
        for (int c = 1; c < C; ++c) mx = std::max(mx, xr[c]);
        T s = T(0);
        for (int c = 0; c < C; ++c) {
            orow[c] = std::exp(xr[c] - mx);
            s += orow[c];
        }
        for (int c = 0; c < C; ++c) orow[c] /= s;
    }
    return make_op<T>("softmax", x.shape(), std::move(out), {x}, [=](TensorImpl<T>* self) {
        auto ix = x.impl();
        return [=]() {
            if (!ix->requires_grad) return;
            ix->ensure_grad();
            const T* g = self->grad.data();
            const T* y = self->val.data();
            for (std::int64_t r = 0; r < rows; ++r) {
                T dot = T(0);
                for (int c = 0; c < C; ++c) dot += g[r * C + c] * y[r * C + c];
                for (int c = 0; c < C; ++c)
                    ix->grad[r * C + c] += y[r * C + c] * (g[r * C + c] - dot);
            }
        };
    });
}

// ---------------------------------------------------------------------------
// Shape plumbing: reshape, permute, concat, narrow.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    check_shape_valid(shape, "reshape");
    if (bussam::numel(shape) != x.numel())
        throw UsageError("reshape: numel mismatch " + shape_str(x.shape()) + " -> " +
                         shape_str(shape));
    std::vector<T> out = x.data();
    return make_op<T>("reshape", std::move(shape), std::move(out), {x}, [=](TensorImpl<T>* self) {
        auto ix = x.impl();
        return [=]() {
            if (!ix->requires_grad) return;
            ix->ensure_grad();
            for (std::size_t i = 0; i < self->grad.size(); ++i) ix->grad[i] += self->grad[i];
        };
    });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& perm) {
    const int r = x.rank();
    if (static_cast<int>(perm.size()) != r) throw UsageError("permute: rank mismatch");
    Shape oshape(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) oshape[i] = x.dim(perm[i]);
    std::array<std::int64_t, 4> in_strides{}, out_to_in{};
    std::int64_t acc = 1;
    for (int i = r - 1; i >= 0; --i) {
        in_strides[i] = acc;
        acc *= x.dim(i);
    }
    for (int i = 0; i < r; ++i) out_to_in[i] = in_strides[perm[i]];
    std::int64_t n = x.numel();
    std::vector<T> out(static_cast<std::size_t>(n));
    const T* px = x.data().data();
    std::array<std::int64_t, 4> idx{0, 0, 0, 0};
    for (std::int64_t i = 0; i < n; ++i) {
        std::int64_t src = 0;
        for (int d = 0; d < r; ++d) src += idx[d] * out_to_in[d];
        out[i] = px[src];
        for (int d = r - 1; d >= 0; --d) {
            if (++idx[d] < oshape[d]) break;
            idx[d] = 0;
        }
    }
    return make_op<T>("permute", std::move(oshape), std::move(out), {x},
                      [=, osh = Shape(oshape)](TensorImpl<T>* self) {
        auto ix = x.impl();
        Shape oshape2 = self->shape;
        return [=]() {
            if (!ix->requires_grad) return;
            ix->ensure_grad();
            std::array<std::int64_t, 4> ix2{0, 0, 0, 0};
            std::int64_t n2 = static_cast<std::int64_t>(self->grad.size());
            for (std::int64_t i = 0; i < n2; ++i) {
                std::int64_t src = 0;
                for (int d = 0; d < r; ++d) src += ix2[d] * out_to_in[d];
                ix->grad[src] += self->grad[i];
                for (int d = r - 1; d >= 0; --d) {
                    if (++ix2[d] < oshape2[d]) break;
                    ix2[d] = 0;
                }
            }
        };
    });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis) {
    if (xs.empty()) throw UsageError("concat: empty input list");
    const int r = xs[0].rank();
    if (axis < 0 || axis >= r) throw UsageError("concat: bad axis");
    Shape oshape = xs[0].shape();
    int total = 0;
    for (const auto& t : xs) {
        if (t.rank() != r) throw UsageError("concat: rank mismatch");
        for (int d = 0; d < r; ++d)
            if (d != axis && t.dim(d) != oshape[d]) throw UsageError("concat: shape mismatch");
        total += t.dim(axis);
    }
    oshape[axis] = total;
    std::int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= oshape[d];
    for (int d = axis + 1; d < r; ++d) inner *= oshape[d];
    std::vector<T> out(static_cast<std::size_t>(bussam::numel(oshape)));
    std::int64_t off = 0;
    for (const auto& t : xs) {
        std::int64_t chunk = static_cast<std::int64_t>(t.dim(axis)) * inner;
        const T* p = t.data().data();
        for (std::int64_t o = 0; o < outer; ++o)
            std::copy(p + o * chunk, p + (o + 1) * chunk,
                      out.begin() + o * total * inner + off);
        off += chunk;
    }
    return make_op<T>("concat", std::move(oshape), std::move(out), xs, [=](TensorImpl<T>* self) {
        std::vector<std::shared_ptr<TensorImpl<T>>> impls;
        for (const auto& t : xs) impls.push_back(t.impl());
        return [=]() {
            std::int64_t off2 = 0;
            for (const auto& ip : impls) {
                std::int64_t chunk =
                    static_cast<std::int64_t>(bussam::numel(ip->shape)) / outer;
                if (ip->requires_grad) {
                    ip->ensure_grad();
                    for (std::int64_t o = 0; o < outer; ++o)
                        for (std::int64_t i = 0; i < chunk; ++i)
                            ip->grad[o * chunk + i] += self->grad[o * total * inner + off2 + i];
                }
                off2 += chunk;
            }
        };
    });
}

template <typename T>
Tensor<T> narrow(const Tensor<T>& x, int axis, int start, int len) {
    const int r = x.rank();
    if (axis < 0 || axis >= r || start < 0 || len < 1 || start + len > x.dim(axis))
        throw UsageError("narrow: bad slice");
    Shape oshape = x.shape();
    oshape[axis] = len;
    std::int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= x.dim(d);
    for (int d = axis + 1; d < r; ++d) inner *= x.dim(d);
    const std::int64_t full = static_cast<std::int64_t>(x.dim(axis)) * inner;
    const std::int64_t chunk = static_cast<std::int64_t>(len) * inner;
    std::vector<T> out(static_cast<std::size_t>(outer) * chunk);
    const T* px = x.data().data();
    for (std::int64_t o = 0; o < outer; ++o)
        std::copy(px + o * full + start * inner, px + o * full + start * inner + chunk,
                  out.begin() + o * chunk);
    return make_op<T>("narrow", std::move(oshape), std::move(out), {x}, [=](TensorImpl<T>* self) {
        auto ix = x.impl();
        return [=]() {
            if (!ix->requires_grad) return;
            ix->ensure_grad();
            for (std::int64_t o = 0; o < outer; ++o)
                for (std::int64_t i = 0; i < chunk; ++i)
                    ix->grad[o * full + start * inner + i] += self->grad[o * chunk + i];
        };
    });
}

}  // namespace bussam::ops
