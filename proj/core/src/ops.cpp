#include "dvit/ops.hpp"

#include <algorithm>
#include <cmath>

#include "op_detail.hpp"

namespace dvit {

using detail::record;
using detail::tracing;

namespace {

template <typename T>
std::vector<std::int64_t> strides_of(const Shape& s) {
    std::vector<std::int64_t> st(s.size(), 1);
    for (std::int64_t i = static_cast<std::int64_t>(s.size()) - 2; i >= 0; --i)
        st[static_cast<std::size_t>(i)] = st[static_cast<std::size_t>(i + 1)] * s[static_cast<std::size_t>(i + 1)];
    return st;
}

/// True when `small` right-aligns against `big`: pad small with leading 1s,
/// then the 1s must form a prefix and every remaining axis must match.
bool suffix_broadcastable(const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    const std::size_t pad = big.size() - small.size();
    bool body = false;  // seen a non-1 axis yet
    for (std::size_t i = 0; i < small.size(); ++i) {
        const auto se = small[i];
        const auto be = big[pad + i];
        if (se == be) {
            if (se != 1) body = true;
            continue;
        }
        if (se == 1 && !body) continue;
        return false;
    }
    // any leading 1 axes beyond the match are fine only while no body started
    // (handled above); padded axes are implicit 1s in front.
    (void)body;
    return true;
}

enum class BinKind { Equal, BroadcastB, BroadcastA };

template <typename T>
BinKind classify_binary(const TensorT<T>& a, const TensorT<T>& b, const char* op) {
    if (a.shape() == b.shape()) return BinKind::Equal;
    if (suffix_broadcastable(b.shape(), a.shape())) return BinKind::BroadcastB;
    if (suffix_broadcastable(a.shape(), b.shape())) return BinKind::BroadcastA;
    throw ShapeMismatch(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
}

}  // namespace

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    const BinKind kind = classify_binary(a, b, "add");
    const TensorT<T>& big = (kind == BinKind::BroadcastA) ? b : a;
    const TensorT<T>& small = (kind == BinKind::BroadcastA) ? a : b;
    const std::int64_t sn = small.numel();

    TensorT<T> out = TensorT<T>::zeros(big.shape());
    {
        const auto& bd = big.data();
        const auto& sd = small.data();
        auto& od = out.data();
        for (std::size_t i = 0; i < od.size(); ++i)
            od[i] = bd[i] + sd[i % static_cast<std::size_t>(sn)];
    }
    if (tracing<T>({&a, &b})) {
        record(out, [big = big, small = small, sn, out]() mutable {
            const auto& g = out.grad();
            if (big.requires_grad()) {
                auto& gb = big.grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
            if (small.requires_grad()) {
                auto& gs = small.grad();
                for (std::size_t i = 0; i < g.size(); ++i) gs[i % static_cast<std::size_t>(sn)] += g[i];
            }
        });
    }
    return out;
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
    const BinKind kind = classify_binary(a, b, "sub");
    const bool a_small = (kind == BinKind::BroadcastA);
    const TensorT<T>& big = a_small ? b : a;
    const TensorT<T>& small = a_small ? a : b;
    const std::int64_t sn = small.numel();

    TensorT<T> out = TensorT<T>::zeros(big.shape());
    {
        const auto& bd = big.data();
        const auto& sd = small.data();
        auto& od = out.data();
        for (std::size_t i = 0; i < od.size(); ++i) {
            const T bv = bd[i];
            const T sv = sd[i % static_cast<std::size_t>(sn)];
            od[i] = a_small ? (sv - bv) : (bv - sv);
        }
    }
    if (tracing<T>({&a, &b})) {
        record(out, [big = big, small = small, sn, a_small, out]() mutable {
            const auto& g = out.grad();
            const T big_sign = a_small ? T(-1) : T(1);
            if (big.requires_grad()) {
                auto& gb = big.grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += big_sign * g[i];
            }
            if (small.requires_grad()) {
                auto& gs = small.grad();
                for (std::size_t i = 0; i < g.size(); ++i)
                    gs[i % static_cast<std::size_t>(sn)] -= big_sign * g[i];
            }
        });
    }
    return out;
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    const BinKind kind = classify_binary(a, b, "mul");
    const TensorT<T>& big = (kind == BinKind::BroadcastA) ? b : a;
    const TensorT<T>& small = (kind == BinKind::BroadcastA) ? a : b;
    const std::int64_t sn = small.numel();

    TensorT<T> out = TensorT<T>::zeros(big.shape());
    {
        const auto& bd = big.data();
        const auto& sd = small.data();
        auto& od = out.data();
        for (std::size_t i = 0; i < od.size(); ++i)
            od[i] = bd[i] * sd[i % static_cast<std::size_t>(sn)];
    }
    if (tracing<T>({&a, &b})) {
        record(out, [big = big, small = small, sn, out]() mutable {
            const auto& g = out.grad();
            const auto& bd = big.data();
            const auto& sd = small.data();
            if (big.requires_grad()) {
                auto& gb = big.grad();
                for (std::size_t i = 0; i < g.size(); ++i)
                    gb[i] += g[i] * sd[i % static_cast<std::size_t>(sn)];
            }
            if (small.requires_grad()) {
                auto& gs = small.grad();
                for (std::size_t i = 0; i < g.size(); ++i)
                    gs[i % static_cast<std::size_t>(sn)] += g[i] * bd[i];
            }
        });
    }
    return out;
}

template <typename T>
TensorT<T> add_scalar(const TensorT<T>& a, T c) {
    TensorT<T> out = a.clone();
    out.set_requires_grad(false);
    for (auto& v : out.data()) v += c;
    if (tracing<T>({&a})) {
        record(out, [a = a, out]() mutable {
            if (!a.requires_grad()) return;
            a.accumulate_grad(out.grad());
        });
    }
    return out;
}

template <typename T>
TensorT<T> mul_scalar(const TensorT<T>& a, T c) {
    TensorT<T> out = a.clone();
    out.set_requires_grad(false);
    for (auto& v : out.data()) v *= c;
    if (tracing<T>({&a})) {
        record(out, [a = a, c, out]() mutable {
            if (!a.requires_grad()) return;
            const auto& g = out.grad();
            auto& ga = a.grad();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
        });
    }
    return out;
}

template <typename T>
TensorT<T> reshape(const TensorT<T>& a, Shape new_shape) {
    if (shape_numel(new_shape) != a.numel())
        throw ShapeMismatch("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(new_shape));
    TensorT<T> out = TensorT<T>::from_data(std::move(new_shape), a.data());
    if (tracing<T>({&a})) {
        record(out, [a = a, out]() mutable {
            if (!a.requires_grad()) return;
            a.accumulate_grad(out.grad());
        });
    }
    return out;
}

template <typename T>
TensorT<T> transpose(const TensorT<T>& a, std::int64_t axis_a, std::int64_t axis_b) {
    const auto r = a.rank();
    if (axis_a < 0 || axis_a >= r || axis_b < 0 || axis_b >= r)
        throw ShapeMismatch("transpose: axis out of range for rank " + std::to_string(r));
    Shape out_shape = a.shape();
    std::swap(out_shape[static_cast<std::size_t>(axis_a)], out_shape[static_cast<std::size_t>(axis_b)]);

    const auto in_strides = strides_of<T>(a.shape());
    const auto out_strides = strides_of<T>(out_shape);
    const auto n = a.numel();

    auto permute = [in_strides, out_strides, n, r, axis_a, axis_b](const std::vector<T>& src,
                                                                   std::vector<T>& dst, bool invert) {
        // invert=false maps input->output, invert=true maps output grads back.
        for (std::int64_t flat = 0; flat < n; ++flat) {
            std::int64_t rem = flat;
            std::int64_t other = 0;
            for (std::int64_t ax = 0; ax < r; ++ax) {
                const auto st = (invert ? out_strides : in_strides)[static_cast<std::size_t>(ax)];
                std::int64_t coord = rem / st;
                rem %= st;
                std::int64_t dst_ax = ax;
                if (ax == axis_a)
                    dst_ax = axis_b;
                else if (ax == axis_b)
                    dst_ax = axis_a;
                other += coord * (invert ? in_strides : out_strides)[static_cast<std::size_t>(dst_ax)];
            }
            if (invert)
                dst[static_cast<std::size_t>(other)] += src[static_cast<std::size_t>(flat)];
            else
                dst[static_cast<std::size_t>(other)] = src[static_cast<std::size_t>(flat)];
        }
    };

    TensorT<T> out = TensorT<T>::zeros(out_shape);
    permute(a.data(), out.data(), false);
    if (tracing<T>({&a})) {
        record(out, [a = a, out, permute]() mutable {
            if (!a.requires_grad()) return;
            permute(out.grad(), a.grad(), true);
        });
    }
    return out;
}

template <typename T>
TensorT<T> concat(const TensorT<T>& a, const TensorT<T>& b, std::int64_t axis) {
    if (a.rank() != b.rank()) throw ShapeMismatch("concat: rank mismatch");
    if (axis < 0 || axis >= a.rank()) throw ShapeMismatch("concat: axis out of range");
    for (std::int64_t i = 0; i < a.rank(); ++i)
        if (i != axis && a.dim(i) != b.dim(i))
            throw ShapeMismatch("concat: shapes differ off-axis: " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));

    Shape out_shape = a.shape();
    out_shape[static_cast<std::size_t>(axis)] += b.dim(axis);

    std::int64_t outer = 1, inner = 1;
    for (std::int64_t i = 0; i < axis; ++i) outer *= a.dim(i);
    for (std::int64_t i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
    const std::int64_t ea = a.dim(axis), eb = b.dim(axis);

    TensorT<T> out = TensorT<T>::zeros(out_shape);
    {
        const auto& ad = a.data();
        const auto& bd = b.data();
        auto& od = out.data();
        for (std::int64_t o = 0; o < outer; ++o) {
            std::copy_n(ad.begin() + o * ea * inner, ea * inner, od.begin() + o * (ea + eb) * inner);
            std::copy_n(bd.begin() + o * eb * inner, eb * inner,
                        od.begin() + o * (ea + eb) * inner + ea * inner);
        }
    }
    if (tracing<T>({&a, &b})) {
        record(out, [a = a, b = b, out, outer, inner, ea, eb]() mutable {
            const auto& g = out.grad();
            if (a.requires_grad()) {
                auto& ga = a.grad();
                for (std::int64_t o = 0; o < outer; ++o)
                    for (std::int64_t i = 0; i < ea * inner; ++i)
                        ga[static_cast<std::size_t>(o * ea * inner + i)] +=
                            g[static_cast<std::size_t>(o * (ea + eb) * inner + i)];
            }
            if (b.requires_grad()) {
                auto& gb = b.grad();
                for (std::int64_t o = 0; o < outer; ++o)
                    for (std::int64_t i = 0; i < eb * inner; ++i)
                        gb[static_cast<std::size_t>(o * eb * inner + i)] +=
                            g[static_cast<std::size_t>(o * (ea + eb) * inner + ea * inner + i)];
            }
        });
    }
    return out;
}

template <typename T>
TensorT<T> slice(const TensorT<T>& a, std::int64_t axis, std::int64_t start, std::int64_t len) {
    if (axis < 0 || axis >= a.rank()) throw ShapeMismatch("slice: axis out of range");
    const std::int64_t extent = a.dim(axis);
    if (start < 0 || len < 0 || start + len > extent)
        throw ShapeMismatch("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                            ") exceeds extent " + std::to_string(extent));

    std::int64_t outer = 1, inner = 1;
    for (std::int64_t i = 0; i < axis; ++i) outer *= a.dim(i);
    for (std::int64_t i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);

    Shape out_shape = a.shape();
    out_shape[static_cast<std::size_t>(axis)] = len;
    TensorT<T> out = TensorT<T>::zeros(out_shape);
    {
        const auto& ad = a.data();
        auto& od = out.data();
        for (std::int64_t o = 0; o < outer; ++o)
            std::copy_n(ad.begin() + (o * extent + start) * inner, len * inner, od.begin() + o * len * inner);
    }
    if (tracing<T>({&a})) {
        record(out, [a = a, out, outer, inner, extent, start, len]() mutable {
            if (!a.requires_grad()) return;
            const auto& g = out.grad();
            auto& ga = a.grad();
            for (std::int64_t o = 0; o < outer; ++o)
                for (std::int64_t i = 0; i < len * inner; ++i)
                    ga[static_cast<std::size_t>((o * extent + start) * inner + i)] +=
                        g[static_cast<std::size_t>(o * len * inner + i)];
        });
    }
    return out;
}

namespace {

struct BatchMap {
    Shape out_batch;
    std::int64_t batches = 1;
    std::vector<std::int64_t> a_index;  // per output batch -> operand batch offset
    std::vector<std::int64_t> b_index;
};

BatchMap resolve_batch(const Shape& a, const Shape& b) {
    const std::size_t ra = a.size() - 2, rb = b.size() - 2;
    const std::size_t r = std::max(ra, rb);
    Shape pa(r, 1), pb(r, 1), out(r, 1);
    std::copy(a.begin(), a.begin() + static_cast<std::ptrdiff_t>(ra), pa.begin() + static_cast<std::ptrdiff_t>(r - ra));
    std::copy(b.begin(), b.begin() + static_cast<std::ptrdiff_t>(rb), pb.begin() + static_cast<std::ptrdiff_t>(r - rb));
    for (std::size_t i = 0; i < r; ++i) {
        if (pa[i] == pb[i])
            out[i] = pa[i];
        else if (pa[i] == 1)
            out[i] = pb[i];
        else if (pb[i] == 1)
            out[i] = pa[i];
        else
            throw ShapeMismatch("matmul: batch dims incompatible: " + shape_str(a) + " vs " + shape_str(b));
    }
    BatchMap m;
    m.out_batch = out;
    m.batches = shape_numel(out);
    m.a_index.resize(static_cast<std::size_t>(m.batches));
    m.b_index.resize(static_cast<std::size_t>(m.batches));
    for (std::int64_t flat = 0; flat < m.batches; ++flat) {
        std::int64_t rem = flat, ia = 0, ib = 0;
        for (std::size_t ax = 0; ax < r; ++ax) {
            std::int64_t stride = 1;
            for (std::size_t j = ax + 1; j < r; ++j) stride *= out[j];
            const std::int64_t coord = rem / stride;
            rem %= stride;
            ia = ia * pa[ax] + (pa[ax] == 1 ? 0 : coord);
            ib = ib * pb[ax] + (pb[ax] == 1 ? 0 : coord);
        }
        m.a_index[static_cast<std::size_t>(flat)] = ia;
        m.b_index[static_cast<std::size_t>(flat)] = ib;
    }
    return m;
}

}  // namespace

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.rank() < 2 || b.rank() < 2)
        throw ShapeMismatch("matmul: operands must have rank >= 2");
    const std::int64_t m = a.dim(a.rank() - 2);
    const std::int64_t k = a.dim(a.rank() - 1);
    const std::int64_t k2 = b.dim(b.rank() - 2);
    const std::int64_t n = b.dim(b.rank() - 1);
    if (k != k2)
        throw ShapeMismatch("matmul: inner dimensions differ (" + std::to_string(k) + " vs " +
                            std::to_string(k2) + ")");

    const BatchMap map = resolve_batch(a.shape(), b.shape());
    Shape out_shape = map.out_batch;
    out_shape.push_back(m);
    out_shape.push_back(n);
    TensorT<T> out = TensorT<T>::zeros(out_shape);

    {
        const auto& ad = a.data();
        const auto& bd = b.data();
        auto& od = out.data();
        for (std::int64_t bt = 0; bt < map.batches; ++bt) {
            const T* ap = ad.data() + map.a_index[static_cast<std::size_t>(bt)] * m * k;
            const T* bp = bd.data() + map.b_index[static_cast<std::size_t>(bt)] * k * n;
            T* op = od.data() + bt * m * n;
            for (std::int64_t i = 0; i < m; ++i)
                for (std::int64_t kk = 0; kk < k; ++kk) {
                    const T av = ap[i * k + kk];
                    if (av == T(0)) continue;
                    const T* brow = bp + kk * n;
                    T* orow = op + i * n;
                    for (std::int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
                }
        }
    }

    if (tracing<T>({&a, &b})) {
        record(out, [a = a, b = b, out, map, m, k, n]() mutable {
            const auto& g = out.grad();
            if (a.requires_grad()) {
                auto& ga = a.grad();
                const auto& bd = b.data();
                for (std::int64_t bt = 0; bt < map.batches; ++bt) {
                    T* gap = ga.data() + map.a_index[static_cast<std::size_t>(bt)] * m * k;
                    const T* bp = bd.data() + map.b_index[static_cast<std::size_t>(bt)] * k * n;
                    const T* gp = g.data() + bt * m * n;
                    for (std::int64_t i = 0; i < m; ++i)
                        for (std::int64_t j = 0; j < n; ++j) {
                            const T gv = gp[i * n + j];
                            if (gv == T(0)) continue;
                            for (std::int64_t kk = 0; kk < k; ++kk)
                                gap[i * k + kk] += gv * bp[kk * n + j];
                        }
                }
            }
            if (b.requires_grad()) {
                auto& gb = b.grad();
                const auto& ad = a.data();
                for (std::int64_t bt = 0; bt < map.batches; ++bt) {
                    const T* ap = ad.data() + map.a_index[static_cast<std::size_t>(bt)] * m * k;
                    T* gbp = gb.data() + map.b_index[static_cast<std::size_t>(bt)] * k * n;
                    const T* gp = g.data() + bt * m * n;
                    for (std::int64_t i = 0; i < m; ++i)
                        for (std::int64_t kk = 0; kk < k; ++kk) {
                            const T av = ap[i * k + kk];
                            if (av == T(0)) continue;
                            const T* grow = gp + i * n;
                            T* gbrow = gbp + kk * n;
                            for (std::int64_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                        }
                }
            }
        });
    }
    return out;
}

template <typename T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>* bias) {
    TensorT<T> y = matmul(x, w);
    if (bias) y = add(y, *bias);
    return y;
}

template <typename T>
TensorT<T> gelu(const TensorT<T>& x) {
    static const T inv_sqrt2 = T(0.7071067811865475244);
    static const T inv_sqrt2pi = T(0.3989422804014326779);
    TensorT<T> out = TensorT<T>::zeros(x.shape());
    {
        const auto& xd = x.data();
        auto& od = out.data();
        for (std::size_t i = 0; i < od.size(); ++i) {
            const T v = xd[i];
            const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
            od[i] = v * cdf;
        }
    }
    if (tracing<T>({&x})) {
        record(out, [x = x, out]() mutable {
            if (!x.requires_grad()) return;
            const auto& g = out.grad();
            const auto& xd = x.data();
            auto& gx = x.grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                const T v = xd[i];
                const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
                const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
                gx[i] += g[i] * (cdf + v * pdf);
            }
        });
    }
    return out;
}

template <typename T>
TensorT<T> sigmoid(const TensorT<T>& x) {
    TensorT<T> out = TensorT<T>::zeros(x.shape());
    {
        const auto& xd = x.data();
        auto& od = out.data();
        for (std::size_t i = 0; i < od.size(); ++i) {
            const T v = xd[i];
            od[i] = v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
        }
    }
    if (tracing<T>({&x})) {
        record(out, [x = x, out]() mutable {
            if (!x.requires_grad()) return;
            const auto& g = out.grad();
            const auto& yd = out.data();
            auto& gx = x.grad();
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * yd[i] * (T(1) - yd[i]);
        });
    }
    return out;
}

template <typename T>
TensorT<T> softmax(const TensorT<T>& x, std::int64_t axis) {
    if (axis < 0 || axis >= x.rank()) throw ShapeMismatch("softmax: axis out of range");
    const std::int64_t L = x.dim(axis);
    std::int64_t outer = 1, inner = 1;
    for (std::int64_t i = 0; i < axis; ++i) outer *= x.dim(i);
    for (std::int64_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);

    TensorT<T> out = TensorT<T>::zeros(x.shape());
    {
        const auto& xd = x.data();
        auto& od = out.data();
        for (std::int64_t o = 0; o < outer; ++o)
            for (std::int64_t in = 0; in < inner; ++in) {
                const std::int64_t base = o * L * inner + in;
                T mx = xd[static_cast<std::size_t>(base)];
                for (std::int64_t l = 1; l < L; ++l)
                    mx = std::max(mx, xd[static_cast<std::size_t>(base + l * inner)]);
                T denom = T(0);
                for (std::int64_t l = 0; l < L; ++l) {
                    const T e = std::exp(xd[static_cast<std::size_t>(base + l * inner)] - mx);
                    od[static_cast<std::size_t>(base + l * inner)] = e;
                    denom += e;
                }
                for (std::int64_t l = 0; l < L; ++l) od[static_cast<std::size_t>(base + l * inner)] /= denom;
            }
    }
    if (tracing<T>({&x})) {
        record(out, [x = x, out, outer, inner, L]() mutable {
            if (!x.requires_grad()) return;
            const auto& g = out.grad();
            const auto& yd = out.data();
            auto& gx = x.grad();
            for (std::int64_t o = 0; o < outer; ++o)
                for (std::int64_t in = 0; in < inner; ++in) {
                    const std::int64_t base = o * L * inner + in;
                    T dot = T(0);
                    for (std::int64_t l = 0; l < L; ++l) {
                        const auto idx = static_cast<std::size_t>(base + l * inner);
                        dot += g[idx] * yd[idx];
                    }
                    for (std::int64_t l = 0; l < L; ++l) {
                        const auto idx = static_cast<std::size_t>(base + l * inner);
                        gx[idx] += yd[idx] * (g[idx] - dot);
                    }
                }
        });
    }
    return out;
}

template <typename T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta, T eps) {
    if (x.rank() < 1) throw ShapeMismatch("layer_norm: rank must be >= 1");
    const std::int64_t d = x.dim(x.rank() - 1);
    if (gamma.shape() != Shape{d} || beta.shape() != Shape{d})
        throw ShapeMismatch("layer_norm: gamma/beta must have shape [" + std::to_string(d) + "]");
    const std::int64_t rows = x.numel() / d;

    TensorT<T> out = TensorT<T>::zeros(x.shape());
    std::vector<T> xhat(static_cast<std::size_t>(x.numel()));
    std::vector<T> invstd(static_cast<std::size_t>(rows));
    {
        const auto& xd = x.data();
        const auto& gd = gamma.data();
        const auto& bd = beta.data();
        auto& od = out.data();
        for (std::int64_t r = 0; r < rows; ++r) {
            const T* row = xd.data() + r * d;
            T mu = T(0);
            for (std::int64_t i = 0; i < d; ++i) mu += row[i];
            mu /= static_cast<T>(d);
            T var = T(0);
            for (std::int64_t i = 0; i < d; ++i) {
                const T c = row[i] - mu;
                var += c * c;
            }
            var /= static_cast<T>(d);
            const T is = T(1) / std::sqrt(var + eps);
            invstd[static_cast<std::size_t>(r)] = is;
            for (std::int64_t i = 0; i < d; ++i) {
                const T xh = (row[i] - mu) * is;
                xhat[static_cast<std::size_t>(r * d + i)] = xh;
                od[static_cast<std::size_t>(r * d + i)] = xh * gd[static_cast<std::size_t>(i)] +
                                                          bd[static_cast<std::size_t>(i)];
            }
        }
    }
    if (tracing<T>({&x, &gamma, &beta})) {
        record(out, [x = x, gamma = gamma, beta = beta, out, xhat = std::move(xhat),
                     invstd = std::move(invstd), rows, d]() mutable {
            const auto& g = out.grad();
            const auto& gd = gamma.data();
            if (beta.requires_grad()) {
                auto& gb = beta.grad();
                for (std::int64_t r = 0; r < rows; ++r)
                    for (std::int64_t i = 0; i < d; ++i)
                        gb[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(r * d + i)];
            }
            if (gamma.requires_grad()) {
                auto& gg = gamma.grad();
                for (std::int64_t r = 0; r < rows; ++r)
                    for (std::int64_t i = 0; i < d; ++i)
                        gg[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(r * d + i)] *
                                                           xhat[static_cast<std::size_t>(r * d + i)];
            }
            if (x.requires_grad()) {
                auto& gx = x.grad();
                for (std::int64_t r = 0; r < rows; ++r) {
                    T sum_dxh = T(0), sum_dxh_xh = T(0);
                    for (std::int64_t i = 0; i < d; ++i) {
                        const auto idx = static_cast<std::size_t>(r * d + i);
                        const T dxh = g[idx] * gd[static_cast<std::size_t>(i)];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xhat[idx];
                    }
                    const T is = invstd[static_cast<std::size_t>(r)];
                    for (std::int64_t i = 0; i < d; ++i) {
                        const auto idx = static_cast<std::size_t>(r * d + i);
                        const T dxh = g[idx] * gd[static_cast<std::size_t>(i)];
                        gx[idx] += is * (dxh - (sum_dxh + xhat[idx] * sum_dxh_xh) / static_cast<T>(d));
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
TensorT<T> l2_normalize(const TensorT<T>& x, T eps) {
    if (x.rank() < 1) throw ShapeMismatch("l2_normalize: rank must be >= 1");
    const std::int64_t d = x.dim(x.rank() - 1);
    const std::int64_t rows = x.numel() / d;

    TensorT<T> out = TensorT<T>::zeros(x.shape());
    std::vector<T> inv_r(static_cast<std::size_t>(rows));
    std::vector<char> clamped(static_cast<std::size_t>(rows));
    {
        const auto& xd = x.data();
        auto& od = out.data();
        for (std::int64_t r = 0; r < rows; ++r) {
            const T* row = xd.data() + r * d;
            T sq = T(0);
            for (std::int64_t i = 0; i < d; ++i) sq += row[i] * row[i];
            const T norm = std::sqrt(sq);
            const bool cl = norm < eps;
            const T ir = T(1) / (cl ? eps : norm);
            inv_r[static_cast<std::size_t>(r)] = ir;
            clamped[static_cast<std::size_t>(r)] = cl ? 1 : 0;
            for (std::int64_t i = 0; i < d; ++i) od[static_cast<std::size_t>(r * d + i)] = row[i] * ir;
        }
    }
    if (tracing<T>({&x})) {
        record(out, [x = x, out, inv_r = std::move(inv_r), clamped = std::move(clamped), rows, d]() mutable {
            if (!x.requires_grad()) return;
            const auto& g = out.grad();
            const auto& yd = out.data();
            auto& gx = x.grad();
            for (std::int64_t r = 0; r < rows; ++r) {
                const T ir = inv_r[static_cast<std::size_t>(r)];
                if (clamped[static_cast<std::size_t>(r)]) {
                    // y = x / eps is linear here
                    for (std::int64_t i = 0; i < d; ++i)
                        gx[static_cast<std::size_t>(r * d + i)] += g[static_cast<std::size_t>(r * d + i)] * ir;
                    continue;
                }
                T dot = T(0);
                for (std::int64_t i = 0; i < d; ++i) {
                    const auto idx = static_cast<std::size_t>(r * d + i);
                    dot += g[idx] * yd[idx];
                }
                for (std::int64_t i = 0; i < d; ++i) {
                    const auto idx = static_cast<std::size_t>(r * d + i);
                    gx[idx] += (g[idx] - yd[idx] * dot) * ir;
                }
            }
        });
    }
    return out;
}

template <typename T>
TensorT<T> sum(const TensorT<T>& a) {
    T s = T(0);
    for (const T v : a.data()) s += v;
    TensorT<T> out = TensorT<T>::scalar(s);
    if (tracing<T>({&a})) {
        record(out, [a = a, out]() mutable {
            if (!a.requires_grad()) return;
            const T g = out.grad()[0];
            auto& ga = a.grad();
            for (auto& v : ga) v += g;
        });
    }
    return out;
}

template <typename T>
TensorT<T> mean(const TensorT<T>& a) {
    const T invn = T(1) / static_cast<T>(a.numel());
    T s = T(0);
    for (const T v : a.data()) s += v;
    TensorT<T> out = TensorT<T>::scalar(s * invn);
    if (tracing<T>({&a})) {
        record(out, [a = a, out, invn]() mutable {
            if (!a.requires_grad()) return;
            const T g = out.grad()[0] * invn;
            auto& ga = a.grad();
            for (auto& v : ga) v += g;
        });
    }
    return out;
}

template <typename T>
TensorT<T> cross_entropy(const TensorT<T>& logits, const std::vector<std::int64_t>& targets,
                         std::int64_t ignore_index) {
    if (logits.rank() < 2) throw ShapeMismatch("cross_entropy: logits must be [B,C,...]");
    const std::int64_t B = logits.dim(0);
    const std::int64_t C = logits.dim(1);
    std::int64_t sp = 1;
    for (std::int64_t i = 2; i < logits.rank(); ++i) sp *= logits.dim(i);
    const std::int64_t positions = B * sp;
    if (static_cast<std::int64_t>(targets.size()) != positions)
        throw ShapeMismatch("cross_entropy: expected " + std::to_string(positions) + " targets, got " +
                            std::to_string(targets.size()));
    for (std::size_t p = 0; p < targets.size(); ++p) {
        const auto t = targets[p];
        if (t != ignore_index && (t < 0 || t >= C))
            throw InvalidTarget("cross_entropy: target " + std::to_string(t) + " at position " +
                                std::to_string(p) + " outside [0," + std::to_string(C) + ")");
    }

    auto logit_at = [C, sp](std::int64_t p, std::int64_t c) {
        const std::int64_t b = p / sp, s = p % sp;
        return (b * C + c) * sp + s;
    };

    const auto& xd = logits.data();
    std::int64_t valid = 0;
    double loss = 0.0;
    for (std::int64_t p = 0; p < positions; ++p) {
        const auto t = targets[static_cast<std::size_t>(p)];
        if (t == ignore_index) continue;
        ++valid;
        T mx = xd[static_cast<std::size_t>(logit_at(p, 0))];
        for (std::int64_t c = 1; c < C; ++c)
            mx = std::max(mx, xd[static_cast<std::size_t>(logit_at(p, c))]);
        T denom = T(0);
        for (std::int64_t c = 0; c < C; ++c)
            denom += std::exp(xd[static_cast<std::size_t>(logit_at(p, c))] - mx);
        loss += static_cast<double>(mx) + std::log(static_cast<double>(denom)) -
                static_cast<double>(xd[static_cast<std::size_t>(logit_at(p, t))]);
    }
    const T value = valid > 0 ? static_cast<T>(loss / static_cast<double>(valid)) : T(0);

    TensorT<T> out = TensorT<T>::scalar(value);
    if (tracing<T>({&logits}) && valid > 0) {
        record(out, [logits = logits, out, targets, ignore_index, B, C, sp, valid, logit_at]() mutable {
            if (!logits.requires_grad()) return;
            const T g = out.grad()[0] / static_cast<T>(valid);
            const auto& xd = logits.data();
            auto& gx = logits.grad();
            const std::int64_t positions = B * sp;
            for (std::int64_t p = 0; p < positions; ++p) {
                const auto t = targets[static_cast<std::size_t>(p)];
                if (t == ignore_index) continue;
                T mx = xd[static_cast<std::size_t>(logit_at(p, 0))];
                for (std::int64_t c = 1; c < C; ++c)
                    mx = std::max(mx, xd[static_cast<std::size_t>(logit_at(p, c))]);
                T denom = T(0);
                for (std::int64_t c = 0; c < C; ++c)
                    denom += std::exp(xd[static_cast<std::size_t>(logit_at(p, c))] - mx);
                for (std::int64_t c = 0; c < C; ++c) {
                    const auto idx = static_cast<std::size_t>(logit_at(p, c));
                    const T prob = std::exp(xd[idx] - mx) / denom;
                    gx[idx] += g * (prob - (c == t ? T(1) : T(0)));
                }
            }
        });
    }
    return out;
}

template <typename T>
TensorT<T> conv_transpose2d_s2(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& bias) {
    if (x.rank() != 4 || w.rank() != 4)
        throw ShapeMismatch("conv_transpose2d_s2: expected x [B,Cin,H,W], w [Cin,Cout,3,3]");
    const std::int64_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t Cout = w.dim(1);
    if (w.dim(0) != Cin || w.dim(2) != 3 || w.dim(3) != 3)
        throw ShapeMismatch("conv_transpose2d_s2: weight shape " + shape_str(w.shape()) +
                            " incompatible with input " + shape_str(x.shape()));
    if (bias.shape() != Shape{Cout}) throw ShapeMismatch("conv_transpose2d_s2: bias must be [Cout]");
    const std::int64_t OH = 2 * H, OW = 2 * W;

    TensorT<T> out = TensorT<T>::zeros({B, Cout, OH, OW});
    {
        const auto& xd = x.data();
        const auto& wd = w.data();
        const auto& bd = bias.data();
        auto& od = out.data();
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t co = 0; co < Cout; ++co) {
                T* oplane = od.data() + (b * Cout + co) * OH * OW;
                const T bv = bd[static_cast<std::size_t>(co)];
                for (std::int64_t i = 0; i < OH * OW; ++i) oplane[i] = bv;
            }
        // out[o] = sum over (i,k) with o = 2i - 1 + k (pad 1, output pad 1)
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t ci = 0; ci < Cin; ++ci) {
                const T* xplane = xd.data() + (b * Cin + ci) * H * W;
                for (std::int64_t co = 0; co < Cout; ++co) {
                    const T* wk = wd.data() + (ci * Cout + co) * 9;
                    T* oplane = od.data() + (b * Cout + co) * OH * OW;
                    for (std::int64_t ih = 0; ih < H; ++ih)
                        for (std::int64_t iw = 0; iw < W; ++iw) {
                            const T xv = xplane[ih * W + iw];
                            if (xv == T(0)) continue;
                            for (std::int64_t kh = 0; kh < 3; ++kh) {
                                const std::int64_t oh = 2 * ih - 1 + kh;
                                if (oh < 0 || oh >= OH) continue;
                                for (std::int64_t kw = 0; kw < 3; ++kw) {
                                    const std::int64_t ow = 2 * iw - 1 + kw;
                                    if (ow < 0 || ow >= OW) continue;
                                    oplane[oh * OW + ow] += xv * wk[kh * 3 + kw];
                                }
                            }
                        }
                }
            }
    }

    if (tracing<T>({&x, &w, &bias})) {
        record(out, [x = x, w = w, bias = bias, out, B, Cin, Cout, H, W, OH, OW]() mutable {
            const auto& g = out.grad();
            if (bias.requires_grad()) {
                auto& gb = bias.grad();
                for (std::int64_t b = 0; b < B; ++b)
                    for (std::int64_t co = 0; co < Cout; ++co) {
                        const T* gplane = g.data() + (b * Cout + co) * OH * OW;
                        T acc = T(0);
                        for (std::int64_t i = 0; i < OH * OW; ++i) acc += gplane[i];
                        gb[static_cast<std::size_t>(co)] += acc;
                    }
            }
            if (x.requires_grad()) {
                auto& gx = x.grad();
                const auto& wd = w.data();
                for (std::int64_t b = 0; b < B; ++b)
                    for (std::int64_t ci = 0; ci < Cin; ++ci) {
                        T* gxplane = gx.data() + (b * Cin + ci) * H * W;
                        for (std::int64_t co = 0; co < Cout; ++co) {
                            const T* wk = wd.data() + (ci * Cout + co) * 9;
                            const T* gplane = g.data() + (b * Cout + co) * OH * OW;
                            for (std::int64_t ih = 0; ih < H; ++ih)
                                for (std::int64_t iw = 0; iw < W; ++iw) {
                                    T acc = T(0);
                                    for (std::int64_t kh = 0; kh < 3; ++kh) {
                                        const std::int64_t oh = 2 * ih - 1 + kh;
                                        if (oh < 0 || oh >= OH) continue;
                                        for (std::int64_t kw = 0; kw < 3; ++kw) {
                                            const std::int64_t ow = 2 * iw - 1 + kw;
                                            if (ow < 0 || ow >= OW) continue;
                                            acc += gplane[oh * OW + ow] * wk[kh * 3 + kw];
                                        }
                                    }
                                    gxplane[ih * W + iw] += acc;
                                }
                        }
                    }
            }
            if (w.requires_grad()) {
                auto& gw = w.grad();
                const auto& xd = x.data();
                for (std::int64_t b = 0; b < B; ++b)
                    for (std::int64_t ci = 0; ci < Cin; ++ci) {
                        const T* xplane = xd.data() + (b * Cin + ci) * H * W;
                        for (std::int64_t co = 0; co < Cout; ++co) {
                            T* gwk = gw.data() + (ci * Cout + co) * 9;
                            const T* gplane = g.data() + (b * Cout + co) * OH * OW;
                            for (std::int64_t ih = 0; ih < H; ++ih)
                                for (std::int64_t iw = 0; iw < W; ++iw) {
                                    const T xv = xplane[ih * W + iw];
                                    if (xv == T(0)) continue;
                                    for (std::int64_t kh = 0; kh < 3; ++kh) {
                                        const std::int64_t oh = 2 * ih - 1 + kh;
                                        if (oh < 0 || oh >= OH) continue;
                                        for (std::int64_t kw = 0; kw < 3; ++kw) {
                                            const std::int64_t ow = 2 * iw - 1 + kw;
                                            if (ow < 0 || ow >= OW) continue;
                                            gwk[kh * 3 + kw] += xv * gplane[oh * OW + ow];
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

template <typename T>
TensorT<T> bilinear_upsample(const TensorT<T>& x, std::int64_t out_h, std::int64_t out_w) {
    if (x.rank() != 4) throw ShapeMismatch("bilinear_upsample: expected [B,C,H,W]");
    const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (out_h < 1 || out_w < 1) throw ShapeMismatch("bilinear_upsample: output size must be positive");

    // Precompute 1-d taps (half-pixel centers, edge clamped).
    struct Tap {
        std::int64_t i0, i1;
        T w0, w1;
    };
    auto make_taps = [](std::int64_t in, std::int64_t out) {
        std::vector<Tap> taps(static_cast<std::size_t>(out));
        const double scale = static_cast<double>(in) / static_cast<double>(out);
        for (std::int64_t o = 0; o < out; ++o) {
            double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
            src = std::max(0.0, std::min(src, static_cast<double>(in - 1)));
            const auto i0 = static_cast<std::int64_t>(std::floor(src));
            const std::int64_t i1 = std::min(i0 + 1, in - 1);
            const T w1 = static_cast<T>(src - static_cast<double>(i0));
            taps[static_cast<std::size_t>(o)] = {i0, i1, T(1) - w1, w1};
        }
        return taps;
    };
    const auto ty = make_taps(H, out_h);
    const auto tx = make_taps(W, out_w);

    TensorT<T> out = TensorT<T>::zeros({B, C, out_h, out_w});
    {
        const auto& xd = x.data();
        auto& od = out.data();
        for (std::int64_t bc = 0; bc < B * C; ++bc) {
            const T* xp = xd.data() + bc * H * W;
            T* op = od.data() + bc * out_h * out_w;
            for (std::int64_t oh = 0; oh < out_h; ++oh) {
                const auto& yt = ty[static_cast<std::size_t>(oh)];
                for (std::int64_t ow = 0; ow < out_w; ++ow) {
                    const auto& xt = tx[static_cast<std::size_t>(ow)];
                    op[oh * out_w + ow] = yt.w0 * (xt.w0 * xp[yt.i0 * W + xt.i0] + xt.w1 * xp[yt.i0 * W + xt.i1]) +
                                          yt.w1 * (xt.w0 * xp[yt.i1 * W + xt.i0] + xt.w1 * xp[yt.i1 * W + xt.i1]);
                }
            }
        }
    }
    if (tracing<T>({&x})) {
        record(out, [x = x, out, ty, tx, B, C, H, W, out_h, out_w]() mutable {
            if (!x.requires_grad()) return;
            const auto& g = out.grad();
            auto& gx = x.grad();
            for (std::int64_t bc = 0; bc < B * C; ++bc) {
                T* gxp = gx.data() + bc * H * W;
                const T* gp = g.data() + bc * out_h * out_w;
                for (std::int64_t oh = 0; oh < out_h; ++oh) {
                    const auto& yt = ty[static_cast<std::size_t>(oh)];
                    for (std::int64_t ow = 0; ow < out_w; ++ow) {
                        const auto& xt = tx[static_cast<std::size_t>(ow)];
                        const T gv = gp[oh * out_w + ow];
                        gxp[yt.i0 * W + xt.i0] += gv * yt.w0 * xt.w0;
                        gxp[yt.i0 * W + xt.i1] += gv * yt.w0 * xt.w1;
                        gxp[yt.i1 * W + xt.i0] += gv * yt.w1 * xt.w0;
                        gxp[yt.i1 * W + xt.i1] += gv * yt.w1 * xt.w1;
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
TensorT<T> custom_unary(const TensorT<T>& x, std::function<T(T)> fwd, std::function<T(T, T)> bwd) {
    TensorT<T> out = TensorT<T>::zeros(x.shape());
    {
        const auto& xd = x.data();
        auto& od = out.data();
        for (std::size_t i = 0; i < od.size(); ++i) od[i] = fwd(xd[i]);
    }
    if (tracing<T>({&x})) {
        record(out, [x = x, out, bwd]() mutable {
            if (!x.requires_grad()) return;
            const auto& g = out.grad();
            const auto& xd = x.data();
            const auto& yd = out.data();
            auto& gx = x.grad();
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += bwd(xd[i], yd[i]) * g[i];
        });
    }
    return out;
}

#define DVIT_INSTANTIATE_OPS(T)                                                                       \
    template TensorT<T> add<T>(const TensorT<T>&, const TensorT<T>&);                                 \
    template TensorT<T> sub<T>(const TensorT<T>&, const TensorT<T>&);                                 \
    template TensorT<T> mul<T>(const TensorT<T>&, const TensorT<T>&);                                 \
    template TensorT<T> add_scalar<T>(const TensorT<T>&, T);                                          \
    template TensorT<T> mul_scalar<T>(const TensorT<T>&, T);                                          \
    template TensorT<T> reshape<T>(const TensorT<T>&, Shape);                                         \
    template TensorT<T> transpose<T>(const TensorT<T>&, std::int64_t, std::int64_t);                  \
    template TensorT<T> concat<T>(const TensorT<T>&, const TensorT<T>&, std::int64_t);                \
    template TensorT<T> slice<T>(const TensorT<T>&, std::int64_t, std::int64_t, std::int64_t);        \
    template TensorT<T> matmul<T>(const TensorT<T>&, const TensorT<T>&);                              \
    template TensorT<T> linear<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>*);           \
    template TensorT<T> gelu<T>(const TensorT<T>&);                                                   \
    template TensorT<T> sigmoid<T>(const TensorT<T>&);                                                \
    template TensorT<T> softmax<T>(const TensorT<T>&, std::int64_t);                                  \
    template TensorT<T> layer_norm<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&, T);    \
    template TensorT<T> l2_normalize<T>(const TensorT<T>&, T);                                        \
    template TensorT<T> sum<T>(const TensorT<T>&);                                                    \
    template TensorT<T> mean<T>(const TensorT<T>&);                                                   \
    template TensorT<T> cross_entropy<T>(const TensorT<T>&, const std::vector<std::int64_t>&,         \
                                         std::int64_t);                                              \
    template TensorT<T> conv_transpose2d_s2<T>(const TensorT<T>&, const TensorT<T>&,                  \
                                               const TensorT<T>&);                                   \
    template TensorT<T> bilinear_upsample<T>(const TensorT<T>&, std::int64_t, std::int64_t);          \
    template TensorT<T> custom_unary<T>(const TensorT<T>&, std::function<T(T)>, std::function<T(T, T)>);

DVIT_INSTANTIATE_OPS(float)
DVIT_INSTANTIATE_OPS(double)

#undef DVIT_INSTANTIATE_OPS

}  // namespace dvit
