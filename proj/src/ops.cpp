#include "bitseg/ops.hpp"
#include "bitseg/parallel.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <stdexcept>
#include <string>

namespace bitseg::ops {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

[[noreturn]] void shape_error(const char* op, const std::string& what)
{
    throw std::invalid_argument(std::string(op) + ": " + what);
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b)
{
    shape_error(op, "incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

std::size_t normalize_axis(const char* op, int axis, std::size_t rank)
{
    const int r = static_cast<int>(rank);
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r)
        shape_error(op, "axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
    return static_cast<std::size_t>(a);
}

// Splits a shape around `axis` into (outer, axis extent, inner).
struct AxisSplit {
    std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis)
{
    AxisSplit r;
    for (std::size_t i = 0; i < axis; ++i)
        r.outer *= s[i];
    r.extent = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i)
        r.inner *= s[i];
    return r;
}

// Strides of `in` aligned to the trailing dims of `out`; zero where broadcast.
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out)
{
    std::vector<std::size_t> strides(out.size(), 0);
    std::size_t stride = 1;
    const std::size_t off = out.size() - in.size();
    for (std::size_t i = in.size(); i-- > 0;) {
        strides[off + i] = in[i] == 1 ? 0 : stride;
        stride *= in[i];
    }
    return strides;
}

// Calls f(out_index, a_index, b_index) over the broadcast output in row-major order.
template <typename F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa, const std::vector<std::size_t>& sb, F&& f)
{
    const std::size_t rank = out.size();
    const std::size_t total = shape_numel(out);
    if (total == 0)
        return;
    if (rank == 0) {
        f(0, 0, 0);
        return;
    }
    const std::size_t last = rank - 1;
    const std::size_t n_inner = out[last];
    const std::size_t ia_step = sa[last], ib_step = sb[last];
    std::vector<std::size_t> idx(rank, 0);
    std::size_t ia = 0, ib = 0, o = 0;
    while (o < total) {
        std::size_t a = ia, b = ib;
        for (std::size_t j = 0; j < n_inner; ++j, ++o, a += ia_step, b += ib_step)
            f(o, a, b);
        // advance the outer counter
        for (std::size_t d = last; d-- > 0;) {
            ++idx[d];
            ia += sa[d];
            ib += sb[d];
            if (idx[d] < out[d])
                break;
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

enum class BinOp { Add, Sub, Mul };

template <typename T>
Var<T> binary(const char* name, BinOp kind, const Var<T>& a, const Var<T>& b)
{
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    const Shape out_shape = broadcast_shape(name, as, bs);
    Tensor<T> out(out_shape);
    const T* pa = a.value().ptr();
    const T* pb = b.value().ptr();
    T* po = out.ptr();
    const bool same = as == bs;
    if (same) {
        const std::size_t n = out.numel();
        switch (kind) {
        case BinOp::Add: for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i]; break;
        case BinOp::Sub: for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i]; break;
        case BinOp::Mul: for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i]; break;
        }
    } else {
        const auto sa = broadcast_strides(as, out_shape);
        const auto sb = broadcast_strides(bs, out_shape);
        switch (kind) {
        case BinOp::Add: for_each_broadcast(out_shape, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) { po[o] = pa[i] + pb[j]; }); break;
        case BinOp::Sub: for_each_broadcast(out_shape, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) { po[o] = pa[i] - pb[j]; }); break;
        case BinOp::Mul: for_each_broadcast(out_shape, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) { po[o] = pa[i] * pb[j]; }); break;
        }
    }
    auto na = a.node();
    auto nb = b.node();
    return make_result<T>(name, std::move(out), {a, b},
        [na, nb, kind, same, out_shape](const Tensor<T>& g, std::vector<Tensor<T>*>& slots) {
            Tensor<T>* ga = slots[0];
            Tensor<T>* gb = slots[1];
            const T* pg = g.ptr();
            const T* va = na->value.ptr();
            const T* vb = nb->value.ptr();
            const T sign_b = kind == BinOp::Sub ? T(-1) : T(1);
            if (same) {
                const std::size_t n = g.numel();
                if (ga) {
                    T* d = ga->ptr();
                    if (kind == BinOp::Mul) for (std::size_t i = 0; i < n; ++i) d[i] += pg[i] * vb[i];
                    else for (std::size_t i = 0; i < n; ++i) d[i] += pg[i];
                }
                if (gb) {
                    T* d = gb->ptr();
                    if (kind == BinOp::Mul) for (std::size_t i = 0; i < n; ++i) d[i] += pg[i] * va[i];
                    else for (std::size_t i = 0; i < n; ++i) d[i] += sign_b * pg[i];
                }
                return;
            }
            const auto sa = broadcast_strides(na->value.shape(), out_shape);
            const auto sb = broadcast_strides(nb->value.shape(), out_shape);
            if (ga) {
                T* d = ga->ptr();
                if (kind == BinOp::Mul)
                    for_each_broadcast(out_shape, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) { d[i] += pg[o] * vb[j]; });
                else
                    for_each_broadcast(out_shape, sa, sb, [&](std::size_t o, std::size_t i, std::size_t) { d[i] += pg[o]; });
            }
            if (gb) {
                T* d = gb->ptr();
                if (kind == BinOp::Mul)
                    for_each_broadcast(out_shape, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) { d[j] += pg[o] * va[i]; });
                else
                    for_each_broadcast(out_shape, sa, sb, [&](std::size_t o, std::size_t, std::size_t j) { d[j] += sign_b * pg[o]; });
            }
        });
}

template <typename T>
void im2col(const T* x, std::size_t C, std::size_t H, std::size_t W, std::size_t k, T* cols)
{
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
    const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(H), w = static_cast<std::ptrdiff_t>(W);
    for (std::size_t c = 0; c < C; ++c) {
        const T* xc = x + c * H * W;
        for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
                T* row = cols + ((c * k + ky) * k + kx) * H * W;
                const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad;
                const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
                const std::ptrdiff_t x_lo = std::max<std::ptrdiff_t>(0, -dx);
                const std::ptrdiff_t x_hi = std::min<std::ptrdiff_t>(w, w - dx);
                for (std::ptrdiff_t y = 0; y < h; ++y) {
                    T* dst = row + y * w;
                    const std::ptrdiff_t sy = y + dy;
                    if (sy < 0 || sy >= h || x_lo >= x_hi) {
                        std::fill(dst, dst + w, T(0));
                        continue;
                    }
                    std::fill(dst, dst + x_lo, T(0));
                    std::memcpy(dst + x_lo, xc + sy * w + x_lo + dx, static_cast<std::size_t>(x_hi - x_lo) * sizeof(T));
                    std::fill(dst + x_hi, dst + w, T(0));
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* cols, std::size_t C, std::size_t H, std::size_t W, std::size_t k, T* x)
{
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
    const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(H), w = static_cast<std::ptrdiff_t>(W);
    for (std::size_t c = 0; c < C; ++c) {
        T* xc = x + c * H * W;
        for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
                const T* row = cols + ((c * k + ky) * k + kx) * H * W;
                const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad;
                const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
                const std::ptrdiff_t x_lo = std::max<std::ptrdiff_t>(0, -dx);
                const std::ptrdiff_t x_hi = std::min<std::ptrdiff_t>(w, w - dx);
                for (std::ptrdiff_t y = 0; y < h; ++y) {
                    const std::ptrdiff_t sy = y + dy;
                    if (sy < 0 || sy >= h)
                        continue;
                    const T* src = row + y * w;
                    T* dst = xc + sy * w + dx;
                    for (std::ptrdiff_t xx = x_lo; xx < x_hi; ++xx)
                        dst[xx] += src[xx];
                }
            }
        }
    }
}

} // namespace

Shape broadcast_shape(const char* op, const Shape& a, const Shape& b)
{
    const std::size_t r = std::max(a.size(), b.size());
    Shape out(r, 1);
    for (std::size_t i = 0; i < r; ++i) {
        const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (da != db && da != 1 && db != 1)
            shape_error(op, a, b);
        out[i] = std::max(da, db);
        if (da == 0 || db == 0)
            out[i] = 0;
    }
    return out;
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) { return binary("add", BinOp::Add, a, b); }
template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) { return binary("sub", BinOp::Sub, a, b); }
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) { return binary("mul", BinOp::Mul, a, b); }

template <typename T>
Var<T> scale(const Var<T>& x, T s)
{
    Tensor<T> out = x.value();
    for (auto& v : out.data())
        v *= s;
    return make_result<T>("scale", std::move(out), {x}, [s](const Tensor<T>& g, std::vector<Tensor<T>*>& slots) {
        T* d = slots[0]->ptr();
        const T* pg = g.ptr();
        for (std::size_t i = 0; i < g.numel(); ++i)
            d[i] += s * pg[i];
    });
}

template <typename T>
Var<T> shift(const Var<T>& x, T s)
{
    Tensor<T> out = x.value();
    for (auto& v : out.data())
        v += s;
    return make_result<T>("shift", std::move(out), {x}, [](const Tensor<T>& g, std::vector<Tensor<T>*>& slots) {
        T* d = slots[0]->ptr();
        const T* pg = g.ptr();
        for (std::size_t i = 0; i < g.numel(); ++i)
            d[i] += pg[i];
    });
}

template <typename T>
Var<T> relu(const Var<T>& x)
{
    Tensor<T> out = x.value();
    for (auto& v : out.data())
        v = v > T(0) ? v : T(0);
    auto nx = x.node();
    return make_result<T>("relu", std::move(out), {x}, [nx](const Tensor<T>& g, std::vector<Tensor<T>*>& slots) {
        T* d = slots[0]->ptr();
        const T* pg = g.ptr();
        const T* px = nx->value.ptr();
        for (std::size_t i = 0; i < g.numel(); ++i)
            if (px[i] > T(0))
                d[i] += pg[i];
    });
}

template <typename T>
Var<T> gelu(const Var<T>& x)
{
    constexpr T kC = T(0.7978845608028654); // sqrt(2/pi)
    constexpr T kA = T(0.044715);
    Tensor<T> out = x.value();
    for (auto& v : out.data())
        v = T(0.5) * v * (T(1) + std::tanh(kC * (v + kA * v * v * v)));
    auto nx = x.node();
    return make_result<T>("gelu", std::move(out), {x}, [nx](const Tensor<T>& g, std::vector<Tensor<T>*>& slots) {
        T* d = slots[0]->ptr();
        const T* pg = g.ptr();
        const T* px = nx->value.ptr();
        for (std::size_t i = 0; i < g.numel(); ++i) {
            const T v = px[i];
            const T th = std::tanh(kC * (v + kA * v * v * v));
            const T dv = T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * kC * (T(1) + T(3) * kA * v * v);
            d[i] += pg[i] * dv;
        }
    });
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b)
{
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    if (as.size() != 2 || bs.size() != 2 || as[1] != bs[0])
        shape_error("matmul", as, bs);
    const std::size_t M = as[0], K = as[1], N = bs[1];
    Tensor<T> out(Shape{M, N});
    MatMap<T>(out.ptr(), M, N).noalias() = ConstMatMap<T>(a.value().ptr(), M, K) * ConstMatMap<T>(b.value().ptr(), K, N);
    auto na = a.node();
    auto nb = b.node();
    return make_result<T>("matmul", std::move(out), {a, b}, [na, nb, M, K, N](const Tensor<T>& g, std::vector<Tensor<T>*>& slots) {
        ConstMatMap<T> G(g.ptr(), M, N);
        if (slots[0])
            MatMap<T>(slots[0]->ptr(), M, K).noalias() += G * ConstMatMap<T>(nb->value.ptr(), K, N).transpose();
        if (slots[1])
            MatMap<T>(slots[1]->ptr(), K, N).noalias() += ConstMatMap<T>(na->value.ptr(), M, K).transpose() * G;
    });
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias)
{
    const Shape& xs = x.shape();
    const Shape& ws = weight.shape();
    if (xs.size() != 4 || ws.size() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || ws[2] % 2 == 0)
        shape_error("conv2d", xs, ws);
    if (bias && (bias.shape().size() != 1 || bias.shape()[0] != ws[0]))
        shape_error("conv2d", ws, bias.shape());
    const std::size_t N = xs[0], C = xs[1], H = xs[2], W = xs[3];
    const std::size_t O = ws[0], k = ws[2];
    const std::size_t K = C * k * k, S = H * W;

    Tensor<T> out(Shape{N, O, H, W});
    const T* px = x.value().ptr();
    const T* pw = weight.value().ptr();
    const T* pb = bias ? bias.value().ptr() : nullptr;
    T* po = out.ptr();
    parallel_for(N, [&](std::size_t n) {
        thread_local std::vector<T> cols;
        const T* xn = px + n * C * S;
        const T* src = xn;
        if (k != 1) {
            cols.resize(K * S);
            im2col(xn, C, H, W, k, cols.data());
            src = cols.data();
        }
        MatMap<T> Y(po + n * O * S, O, S);
        Y.noalias() = ConstMatMap<T>(pw, O, K) * ConstMatMap<T>(src, K, S);
        if (pb)
            for (std::size_t o = 0; o < O; ++o)
                Y.row(o).array() += pb[o];
    });

    std::vector<Var<T>> inputs{x, weight};
    if (bias)
        inputs.push_back(bias);
    auto nx = x.node();
    auto nw = weight.node();
    const bool has_bias = static_cast<bool>(bias);
    return make_result<T>("conv2d", std::move(out), std::move(inputs),
        [nx, nw, has_bias, N, C, H, W, O, k, K, S](const Tensor<T>& g, std::vector<Tensor<T>*>& slots) {
            Tensor<T>* gx = slots[0];
            Tensor<T>* gw = slots[1];
            Tensor<T>* gb = has_bias ? slots[2] : nullptr;
            const T* pg = g.ptr();
            const T* px = nx->value.ptr();
            const T* pw = nw->value.ptr();
            // Per-sample partials summed in index order keep the result
            // independent of the worker count.
            std::vector<T> dw_parts(gw ? N * O * K : 0);
            std::vector<T> db_parts(gb ? N * O : 0);
            parallel_for(N, [&](std::size_t n) {
                thread_local std::vector<T> cols;
                thread_local std::vector<T> dcols;
                const T* gn = pg + n * O * S;
                ConstMatMap<T> G(gn, O, S);
                const T* xn = px + n * C * S;
                if (gw) {
                    const T* src = xn;
                    if (k != 1) {
                        cols.resize(K * S);
                        im2col(xn, C, H, W, k, cols.data());
                        src = cols.data();
                    }
                    MatMap<T>(dw_parts.data() + n * O * K, O, K).noalias() = G * ConstMatMap<T>(src, K, S).transpose();
                }
                if (gb)
                    for (std::size_t o = 0; o < O; ++o) {
                        // plain loop: Eigen's vectorized sum depends on pointer alignment
                        T acc = 0;
                        for (std::size_t s = 0; s < S; ++s)
                            acc += gn[o * S + s];
                        db_parts[n * O + o] = acc;
                    }
                if (gx) {
                    T* dxn = gx->ptr() + n * C * S;
                    if (k == 1) {
                        MatMap<T>(dxn, C, S).noalias() += ConstMatMap<T>(pw, O, K).transpose() * G;
                    } else {
                        dcols.resize(K * S);
                        MatMap<T>(dcols.data(), K, S).noalias() = ConstMatMap<T>(pw, O, K).transpose() * G;
                        col2im_add(dcols.data(), C, H, W, k, dxn);
                    }
                }
            });
            if (gw) {
                T* d = gw->ptr();
                for (std::size_t n = 0; n < N; ++n) {
                    const T* part = dw_parts.data() + n * O * K;
                    for (std::size_t i = 0; i < O * K; ++i)
                        d[i] += part[i];
                }
            }
            if (gb) {
                T* d = gb->ptr();
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t o = 0; o < O; ++o)
                        d[o] += db_parts[n * O + o];
            }
        });
}

template <typename T>
Var<T> avg_pool2x2(const Var<T>& x)
{
    const Shape& xs = x.shape();
    if (xs.size() != 4 || xs[2] % 2 || xs[3] % 2)
        shape_error("avg_pool2x2", "expects [N,C,H,W] with even H and W, got " + shape_str(xs));
    const std::size_t planes = xs[0] * xs[1], H = xs[2], W = xs[3], h = H / 2, w = W / 2;
    Tensor<T> out(Shape{xs[0], xs[1], h, w});
    const T* px = x.value().ptr();
    T* po = out.ptr();
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t xx = 0; xx < w; ++xx) {
                const T* s = px + p * H * W + 2 * y * W + 2 * xx;
                po[p * h * w + y * w + xx] = T(0.25) * (s[0] + s[1] + s[W] + s[W + 1]);
            }
    return make_result<T>("avg_pool2x2", std::move(out), {x}, [planes, H, W, h, w](const Tensor<T>& g, std::vector<Tensor<T>*>& slots) {
        T* d = slots[0]->ptr();
        const T* pg = g.ptr();
        for (std::size_t p = 0; p < planes; ++p)
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t xx = 0; xx < w; ++xx) {
                    const T v = T(0.25) * pg[p * h * w + y * w + xx];
                    T* s = d + p * H * W + 2 * y * W + 2 * xx;
                    s[0] += v;
                    s[1] += v;
                    s[W] += v;
                    s[W + 1] += v;
                }
    });
}

template <typename T>
Var<T> upsample2x(const Var<T>& x)
{
    const Shape& xs = x.shape();
    if (xs.size() != 4)
        shape_error("upsample2x", "expects [N,C,H,W], got " + shape_str(xs));
    const std::size_t planes = xs[0] * xs[1], h = xs[2], w = xs[3], H = 2 * h, W = 2 * w;
    Tensor<T> out(Shape{xs[0], xs[1], H, W});
    const T* px = x.value().ptr();
    T* po = out.ptr();
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t y = 0; y < H; ++y) {
            const T* src = px + p * h * w + (y / 2) * w;
            T* dst = po + p * H * W + y * W;
            for (std::size_t xx = 0; xx < W; ++xx)
                dst[xx] = src[xx / 2];
        }
    return make_result<T>("upsample2x", std::move(out), {x}, [planes, H, W, h, w](const Tensor<T>& g, std::vector<Tensor<T>*>& slots) {
        T* d = slots[0]->ptr();
        const T* pg = g.ptr();
        for (std::size_t p = 0; p < planes; ++p)
            for (std::size_t y = 0; y < H; ++y) {
                const T* src = pg + p * H * W + y * W;
                T* dst = d + p * h * w + (y / 2) * w;
                for (std::size_t xx = 0; xx < W; ++xx)
                    dst[xx / 2] += src[xx];
            }
    });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps)
{
    const Shape& xs = x.shape();
    if (xs.size() < 2)
        shape_error("layer_norm", "expects rank >= 2, got " + shape_str(xs));
    const std::size_t N = xs[0], C = xs[1], S = shape_numel(xs) / (N * C);
    if (gamma.shape() != Shape{C} || beta.shape() != Shape{C})
        shape_error("layer_norm", xs, gamma.shape());

    Tensor<T> out(xs);
    std::vector<T> mean(N * S, T(0)), rstd(N * S, T(0));
    const T* px = x.value().ptr();
    const T* pg = gamma.value().ptr();
    const T* pb = beta.value().ptr();
    T* po = out.ptr();
    const T inv_c = T(1) / T(C);
    for (std::size_t n = 0; n < N; ++n) {
        T* mu = mean.data() + n * S;
        T* rs = rstd.data() + n * S;
        const T* xn = px + n * C * S;
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t s = 0; s < S; ++s)
                mu[s] += xn[c * S + s];
        for (std::size_t s = 0; s < S; ++s)
            mu[s] *= inv_c;
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t s = 0; s < S; ++s) {
                const T dv = xn[c * S + s] - mu[s];
                rs[s] += dv * dv;
            }
        for (std::size_t s = 0; s < S; ++s)
            rs[s] = T(1) / std::sqrt(rs[s] * inv_c + eps);
        T* on = po + n * C * S;
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t s = 0; s < S; ++s)
                on[c * S + s] = (xn[c * S + s] - mu[s]) * rs[s] * pg[c] + pb[c];
    }
    auto nx = x.node();
    auto ng = gamma.node();
    return make_result<T>("layer_norm", std::move(out), {x, gamma, beta},
        [nx, ng, mean = std::move(mean), rstd = std::move(rstd), N, C, S](const Tensor<T>& g, std::vector<Tensor<T>*>& slots) {
            const T* pgr = g.ptr();
            const T* px = nx->value.ptr();
            const T* pgam = ng->value.ptr();
            const T inv_c = T(1) / T(C);
            std::vector<T> a(S), b(S);
            for (std::size_t n = 0; n < N; ++n) {
                const T* mu = mean.data() + n * S;
                const T* rs = rstd.data() + n * S;
                const T* xn = px + n * C * S;
                const T* gn = pgr + n * C * S;
                if (slots[1] || slots[2]) {
                    for (std::size_t c = 0; c < C; ++c) {
                        T sg = 0, sb = 0;
                        for (std::size_t s = 0; s < S; ++s) {
                            const T xh = (xn[c * S + s] - mu[s]) * rs[s];
                            sg += gn[c * S + s] * xh;
                            sb += gn[c * S + s];
                        }
                        if (slots[1]) (*slots[1])[c] += sg;
                        if (slots[2]) (*slots[2])[c] += sb;
                    }
                }
                if (!slots[0])
                    continue;
                std::fill(a.begin(), a.end(), T(0));
                std::fill(b.begin(), b.end(), T(0));
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t s = 0; s < S; ++s) {
                        const T dxh = gn[c * S + s] * pgam[c];
                        a[s] += dxh;
                        b[s] += dxh * (xn[c * S + s] - mu[s]) * rs[s];
                    }
                T* dx = slots[0]->ptr() + n * C * S;
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t s = 0; s < S; ++s) {
                        const T xh = (xn[c * S + s] - mu[s]) * rs[s];
                        const T dxh = gn[c * S + s] * pgam[c];
                        dx[c * S + s] += rs[s] * (dxh - a[s] * inv_c - xh * b[s] * inv_c);
                    }
            }
        });
}

namespace {

template <typename T>
Tensor<T> softmax_values(const Tensor<T>& x, AxisSplit sp, bool log_space)
{
    Tensor<T> out(x.shape());
    const T* px = x.ptr();
    T* po = out.ptr();
    std::vector<T> mx(sp.inner), total(sp.inner);
    for (std::size_t o = 0; o < sp.outer; ++o) {
        const T* xo = px + o * sp.extent * sp.inner;
        T* yo = po + o * sp.extent * sp.inner;
        std::fill(mx.begin(), mx.end(), -std::numeric_limits<T>::infinity());
        std::fill(total.begin(), total.end(), T(0));
        for (std::size_t a = 0; a < sp.extent; ++a)
            for (std::size_t i = 0; i < sp.inner; ++i)
                mx[i] = std::max(mx[i], xo[a * sp.inner + i]);
        for (std::size_t a = 0; a < sp.extent; ++a)
            for (std::size_t i = 0; i < sp.inner; ++i) {
                const T e = std::exp(xo[a * sp.inner + i] - mx[i]);
                yo[a * sp.inner + i] = e;
                total[i] += e;
            }
        if (log_space) {
            for (std::size_t i = 0; i < sp.inner; ++i)
                total[i] = mx[i] + std::log(total[i]);
            for (std::size_t a = 0; a < sp.extent; ++a)
                for (std::size_t i = 0; i < sp.inner; ++i)
                    yo[a * sp.inner + i] = xo[a * sp.inner + i] - total[i];
        } else {
            for (std::size_t i = 0; i < sp.inner; ++i)
                total[i] = T(1) / total[i];
            for (std::size_t a = 0; a < sp.extent; ++a)
                for (std::size_t i = 0; i < sp.inner; ++i)
                    yo[a * sp.inner + i] *= total[i];
        }
    }
    return out;
}

} // namespace

template <typename T>
Var<T> softmax(const Var<T>& x, int axis)
{
    const std::size_t ax = normalize_axis("softmax", axis, x.shape().size());
    const AxisSplit sp = split_at(x.shape(), ax);
    Var<T> result = make_result<T>("softmax", softmax_values(x.value(), sp, false), {x}, {});
    if (!result.requires_grad())
        return result;
    // Output values are needed by the closure; attach it now that the node exists.
    std::weak_ptr<Node<T>> wy = result.node();
    Tape<T>::current().records().back().backward = [wy, sp](const Tensor<T>& g, std::vector<Tensor<T>*>& slots) {
        auto ny = wy.lock();
        const T* py = ny->value.ptr();
        const T* pg = g.ptr();
        T* d = slots[0]->ptr();
        std::vector<T> dot(sp.inner);
        for (std::size_t o = 0; o < sp.outer; ++o) {
            const std::size_t base = o * sp.extent * sp.inner;
            std::fill(dot.begin(), dot.end(), T(0));
            for (std::size_t a = 0; a < sp.extent; ++a)
                for (std::size_t i = 0; i < sp.inner; ++i)
                    dot[i] += pg[base + a * sp.inner + i] * py[base + a * sp.inner + i];
            for (std::size_t a = 0; a < sp.extent; ++a)
                for (std::size_t i = 0; i < sp.inner; ++i) {
                    const std::size_t j = base + a * sp.inner + i;
                    d[j] += py[j] * (pg[j] - dot[i]);
                }
        }
    };
    return result;
}

template <typename T>
Var<T> log_softmax(const Var<T>& x, int axis)
{
    const std::size_t ax = normalize_axis("log_softmax", axis, x.shape().size());
    const AxisSplit sp = split_at(x.shape(), ax);
    Var<T> result = make_result<T>("log_softmax", softmax_values(x.value(), sp, true), {x}, {});
    if (!result.requires_grad())
        return result;
    std::weak_ptr<Node<T>> wy = result.node();
    Tape<T>::current().records().back().backward = [wy, sp](const Tensor<T>& g, std::vector<Tensor<T>*>& slots) {
        auto ny = wy.lock();
        const T* py = ny->value.ptr();
        const T* pg = g.ptr();
        T* d = slots[0]->ptr();
        std::vector<T> total(sp.inner);
        for (std::size_t o = 0; o < sp.outer; ++o) {
            const std::size_t base = o * sp.extent * sp.inner;
            std::fill(total.begin(), total.end(), T(0));
            for (std::size_t a = 0; a < sp.extent; ++a)
                for (std::size_t i = 0; i < sp.inner; ++i)
                    total[i] += pg[base + a * sp.inner + i];
            for (std::size_t a = 0; a < sp.extent; ++a)
                for (std::size_t i = 0; i < sp.inner; ++i) {
                    const std::size_t j = base + a * sp.inner + i;
                    d[j] += pg[j] - std::exp(py[j]) * total[i];
                }
        }
    };
    return result;
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, int axis)
{
    if (xs.empty())
        shape_error("concat", "no inputs");
    const Shape& first = xs.front().shape();
    const std::size_t ax = normalize_axis("concat", axis, first.size());
    Shape out_shape = first;
    out_shape[ax] = 0;
    for (const auto& v : xs) {
        const Shape& s = v.shape();
        if (s.size() != first.size())
            shape_error("concat", first, s);
        for (std::size_t d = 0; d < s.size(); ++d)
            if (d != ax && s[d] != first[d])
                shape_error("concat", first, s);
        out_shape[ax] += s[ax];
    }
    const AxisSplit osp = split_at(out_shape, ax);
    std::vector<std::size_t> widths; // contiguous block length per input per outer index
    for (const auto& v : xs)
        widths.push_back(v.shape()[ax] * osp.inner);
    const std::size_t row = osp.extent * osp.inner;
    Tensor<T> out(out_shape);
    std::size_t offset = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const T* src = xs[i].value().ptr();
        for (std::size_t o = 0; o < osp.outer; ++o)
            std::copy_n(src + o * widths[i], widths[i], out.ptr() + o * row + offset);
        offset += widths[i];
    }
    return make_result<T>("concat", std::move(out), xs, [widths, row, outer = osp.outer](const Tensor<T>& g, std::vector<Tensor<T>*>& slots) {
        std::size_t offset = 0;
        for (std::size_t i = 0; i < slots.size(); ++i) {
            if (slots[i]) {
                T* d = slots[i]->ptr();
                for (std::size_t o = 0; o < outer; ++o) {
                    const T* src = g.ptr() + o * row + offset;
                    T* dst = d + o * widths[i];
                    for (std::size_t j = 0; j < widths[i]; ++j)
                        dst[j] += src[j];
                }
            }
            offset += widths[i];
        }
    });
}

template <typename T>
Var<T> slice(const Var<T>& x, int axis, std::size_t begin, std::size_t end)
{
    const Shape& xs = x.shape();
    const std::size_t ax = normalize_axis("slice", axis, xs.size());
    if (begin > end || end > xs[ax])
        shape_error("slice", "range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for shape " + shape_str(xs));
    const AxisSplit sp = split_at(xs, ax);
    Shape out_shape = xs;
    out_shape[ax] = end - begin;
    Tensor<T> out(out_shape);
    const std::size_t w = (end - begin) * sp.inner;
    const std::size_t row = sp.extent * sp.inner;
    const std::size_t off = begin * sp.inner;
    for (std::size_t o = 0; o < sp.outer; ++o)
        std::copy_n(x.value().ptr() + o * row + off, w, out.ptr() + o * w);
    return make_result<T>("slice", std::move(out), {x}, [w, row, off, outer = sp.outer](const Tensor<T>& g, std::vector<Tensor<T>*>& slots) {
        T* d = slots[0]->ptr();
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t j = 0; j < w; ++j)
                d[o * row + off + j] += g[o * w + j];
    });
}

template <typename T>
Var<T> pick(const Var<T>& x, std::span<const std::int32_t> index, int axis)
{
    const Shape& xs = x.shape();
    const std::size_t ax = normalize_axis("pick", axis, xs.size());
    const AxisSplit sp = split_at(xs, ax);
    if (index.size() != sp.outer * sp.inner)
        shape_error("pick", "index count " + std::to_string(index.size()) + " does not match shape " + shape_str(xs) +
                                " with axis " + std::to_string(ax) + " removed");
    Shape out_shape = xs;
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
    std::vector<std::size_t> flat(index.size());
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.inner; ++i) {
            const std::int32_t k = index[o * sp.inner + i];
            if (k < 0 || static_cast<std::size_t>(k) >= sp.extent)
                shape_error("pick", "index " + std::to_string(k) + " out of range for extent " + std::to_string(sp.extent));
            flat[o * sp.inner + i] = (o * sp.extent + static_cast<std::size_t>(k)) * sp.inner + i;
        }
    Tensor<T> out(out_shape);
    for (std::size_t j = 0; j < flat.size(); ++j)
        out[j] = x.value()[flat[j]];
    return make_result<T>("pick", std::move(out), {x}, [flat = std::move(flat)](const Tensor<T>& g, std::vector<Tensor<T>*>& slots) {
        T* d = slots[0]->ptr();
        for (std::size_t j = 0; j < flat.size(); ++j)
            d[flat[j]] += g[j];
    });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape)
{
    if (shape_numel(shape) != x.value().numel())
        shape_error("reshape", x.shape(), shape);
    Tensor<T> out = x.value().reshaped(std::move(shape));
    return make_result<T>("reshape", std::move(out), {x}, [](const Tensor<T>& g, std::vector<Tensor<T>*>& slots) {
        T* d = slots[0]->ptr();
        for (std::size_t i = 0; i < g.numel(); ++i)
            d[i] += g[i];
    });
}

template <typename T>
Var<T> sum(const Var<T>& x)
{
    T total = 0;
    for (T v : x.value().data())
        total += v;
    return make_result<T>("sum", Tensor<T>::scalar(total), {x}, [](const Tensor<T>& g, std::vector<Tensor<T>*>& slots) {
        const T v = g[0];
        for (auto& d : slots[0]->data())
            d += v;
    });
}

template <typename T>
Var<T> mean(const Var<T>& x)
{
    const std::size_t n = x.value().numel();
    if (n == 0)
        shape_error("mean", "empty tensor");
    return scale(sum(x), T(1) / T(n));
}

#define BITSEG_INSTANTIATE_OPS(T)                                                             \
    template Var<T> add<T>(const Var<T>&, const Var<T>&);                                     \
    template Var<T> sub<T>(const Var<T>&, const Var<T>&);                                     \
    template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                     \
    template Var<T> scale<T>(const Var<T>&, T);                                               \
    template Var<T> shift<T>(const Var<T>&, T);                                               \
    template Var<T> relu<T>(const Var<T>&);                                                   \
    template Var<T> gelu<T>(const Var<T>&);                                                   \
    template Var<T> matmul<T>(const Var<T>&, const Var<T>&);                                  \
    template Var<T> conv2d<T>(const Var<T>&, const Var<T>&, const Var<T>&);                   \
    template Var<T> avg_pool2x2<T>(const Var<T>&);                                            \
    template Var<T> upsample2x<T>(const Var<T>&);                                             \
    template Var<T> layer_norm<T>(const Var<T>&, const Var<T>&, const Var<T>&, T);            \
    template Var<T> softmax<T>(const Var<T>&, int);                                           \
    template Var<T> log_softmax<T>(const Var<T>&, int);                                       \
    template Var<T> concat<T>(const std::vector<Var<T>>&, int);                               \
    template Var<T> slice<T>(const Var<T>&, int, std::size_t, std::size_t);                   \
    template Var<T> pick<T>(const Var<T>&, std::span<const std::int32_t>, int);               \
    template Var<T> reshape<T>(const Var<T>&, Shape);                                         \
    template Var<T> sum<T>(const Var<T>&);                                                    \
    template Var<T> mean<T>(const Var<T>&);

BITSEG_INSTANTIATE_OPS(float)
BITSEG_INSTANTIATE_OPS(double)

} // namespace bitseg::ops
