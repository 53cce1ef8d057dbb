#include "starformer/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace starformer::ops {

namespace {

bool should_record(std::initializer_list<const Tensor*> inputs) {
    if (!active_tape()) return false;
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

void mark_output(Tensor& out) {
    out.set_requires_grad(true);
    out.mutable_data().tape = active_tape();
}

// Accumulates g into t's grad buffer, respecting requires_grad.
void accumulate(Tensor& t, const std::vector<double>& g) {
    if (!t.requires_grad()) return;
    auto& d = t.mutable_data();
    d.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) d.grad[i] += g[i];
}

// Maps every output linear index to the corresponding input linear index
// under trailing-aligned broadcasting. Empty result means identity.
std::vector<std::int64_t> broadcast_map(const Shape& in, const Shape& out) {
    if (in == out) return {};
    const std::int64_t n = shape_numel(out);
    const std::int64_t rank = static_cast<std::int64_t>(out.size());
    const std::int64_t off = rank - static_cast<std::int64_t>(in.size());
    auto in_strides = row_major_strides(in);
    std::vector<std::int64_t> strides(static_cast<std::size_t>(rank), 0);
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(in.size()); ++i) {
        if (in[static_cast<std::size_t>(i)] != 1) {
            strides[static_cast<std::size_t>(off + i)] = in_strides[static_cast<std::size_t>(i)];
        }
    }
    std::vector<std::int64_t> map(static_cast<std::size_t>(n));
    std::vector<std::int64_t> idx(static_cast<std::size_t>(rank), 0);
    std::int64_t cur = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        map[static_cast<std::size_t>(i)] = cur;
        for (std::int64_t ax = rank - 1; ax >= 0; --ax) {
            auto& v = idx[static_cast<std::size_t>(ax)];
            cur += strides[static_cast<std::size_t>(ax)];
            if (++v < out[static_cast<std::size_t>(ax)]) break;
            cur -= v * strides[static_cast<std::size_t>(ax)];
            v = 0;
        }
    }
    return map;
}

inline std::int64_t mapped(const std::vector<std::int64_t>& map, std::int64_t i) {
    return map.empty() ? i : map[static_cast<std::size_t>(i)];
}

// Shared skeleton for broadcasting binary ops. DA/DB produce the partial
// derivatives from the input values at an element.
template <class F, class DA, class DB>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, F f, DA dfda, DB dfdb) {
    const Shape out_shape = broadcast_shape(a.shape(), b.shape());
    auto map_a = broadcast_map(a.shape(), out_shape);
    auto map_b = broadcast_map(b.shape(), out_shape);
    Tensor out(out_shape);
    const std::int64_t n = out.numel();
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    if (map_a.empty() && map_b.empty()) {
        for (std::int64_t i = 0; i < n; ++i) po[i] = f(pa[i], pb[i]);
    } else {
        for (std::int64_t i = 0; i < n; ++i) {
            po[i] = f(pa[mapped(map_a, i)], pb[mapped(map_b, i)]);
        }
    }
    check_finite(out, name);
    if (should_record({&a, &b})) {
        mark_output(out);
        Tensor ac = a, bc = b, oc = out;
        auto ma = std::make_shared<std::vector<std::int64_t>>(std::move(map_a));
        auto mb = std::make_shared<std::vector<std::int64_t>>(std::move(map_b));
        active_tape()->record(name, [ac, bc, oc, ma, mb, dfda, dfdb]() mutable {
            if (!oc.has_grad()) return;
            const auto& g = oc.grad();
            const double* va = ac.data();
            const double* vb = bc.data();
            const std::int64_t m = oc.numel();
            if (ac.requires_grad()) {
                auto& d = ac.mutable_data();
                d.ensure_grad();
                for (std::int64_t i = 0; i < m; ++i) {
                    const std::int64_t ia = mapped(*ma, i);
                    const std::int64_t ib = mapped(*mb, i);
                    d.grad[static_cast<std::size_t>(ia)] +=
                        g[static_cast<std::size_t>(i)] * dfda(va[ia], vb[ib]);
                }
            }
            if (bc.requires_grad()) {
                auto& d = bc.mutable_data();
                d.ensure_grad();
                for (std::int64_t i = 0; i < m; ++i) {
                    const std::int64_t ia = mapped(*ma, i);
                    const std::int64_t ib = mapped(*mb, i);
                    d.grad[static_cast<std::size_t>(ib)] +=
                        g[static_cast<std::size_t>(i)] * dfdb(va[ia], vb[ib]);
                }
            }
        });
    }
    return out;
}

// Unary elementwise skeleton; D computes dy/dx from (x, y).
template <class F, class D>
Tensor unary_op(const char* name, const Tensor& x, F f, D deriv) {
    Tensor out(x.shape());
    const std::int64_t n = x.numel();
    const double* px = x.data();
    double* po = out.data();
    for (std::int64_t i = 0; i < n; ++i) po[i] = f(px[i]);
    check_finite(out, name);
    if (should_record({&x})) {
        mark_output(out);
        Tensor xc = x, oc = out;
        active_tape()->record(name, [xc, oc, deriv]() mutable {
            if (!oc.has_grad()) return;
            const auto& g = oc.grad();
            const double* vx = xc.data();
            const double* vy = oc.data();
            auto& d = xc.mutable_data();
            d.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                d.grad[i] += g[i] * deriv(vx[i], vy[i]);
            }
        });
    }
    return out;
}

// C[m,n] += A[m,k] * B[k,n]
void mm_accumulate(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
                   std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::int64_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + p * n;
            for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// dA[m,k] += G[m,n] * B[k,n]^T  (rows of G and B are contiguous)
void mm_grad_a(const double* g, const double* b, double* da, std::int64_t m, std::int64_t k,
               std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        const double* grow = g + i * n;
        double* darow = da + i * k;
        for (std::int64_t p = 0; p < k; ++p) {
            const double* brow = b + p * n;
            double s = 0.0;
            for (std::int64_t j = 0; j < n; ++j) s += grow[j] * brow[j];
            darow[p] += s;
        }
    }
}

// dB[k,n] += A[m,k]^T * G[m,n]
void mm_grad_b(const double* a, const double* g, double* db, std::int64_t m, std::int64_t k,
               std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* grow = g + i * n;
        for (std::int64_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            double* dbrow = db + p * n;
            for (std::int64_t j = 0; j < n; ++j) dbrow[j] += av * grow[j];
        }
    }
}

// Decomposes a shape into [outer, axis extent, inner] around one axis.
struct AxisSplit {
    std::int64_t outer, extent, inner;
};

AxisSplit split_axis(const Shape& s, std::int64_t axis) {
    AxisSplit r{1, s[static_cast<std::size_t>(axis)], 1};
    for (std::int64_t i = 0; i < axis; ++i) r.outer *= s[static_cast<std::size_t>(i)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

void check_axis(const Tensor& x, std::int64_t axis, const char* op) {
    if (axis < 0 || axis >= x.rank()) {
        throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                         shape_str(x.shape()));
    }
}

} // namespace

Shape broadcast_shape(const Shape& a, const Shape& b) {
    const std::size_t rank = std::max(a.size(), b.size());
    Shape out(rank, 1);
    for (std::size_t i = 0; i < rank; ++i) {
        const std::int64_t ea = i < a.size() ? a[a.size() - 1 - i] : 1;
        const std::int64_t eb = i < b.size() ? b[b.size() - 1 - i] : 1;
        if (ea != eb && ea != 1 && eb != 1) {
            throw ShapeError("broadcast: incompatible shapes " + shape_str(a) + " and " +
                             shape_str(b));
        }
        out[rank - 1 - i] = std::max(ea, eb);
    }
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(
        "add", a, b, [](double x, double y) { return x + y; },
        [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(
        "sub", a, b, [](double x, double y) { return x - y; },
        [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(
        "mul", a, b, [](double x, double y) { return x * y; },
        [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary_op(
        "div", a, b, [](double x, double y) { return x / y; },
        [](double, double y) { return 1.0 / y; },
        [](double x, double y) { return -x / (y * y); });
}

Tensor scale(const Tensor& x, double c) {
    return unary_op(
        "scale", x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor& x, double c) {
    return unary_op(
        "add_scalar", x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor exp(const Tensor& x) {
    return unary_op(
        "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
    return unary_op(
        "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor sqrt(const Tensor& x) {
    return unary_op(
        "sqrt", x, [](double v) { return std::sqrt(v); },
        [](double, double y) { return 0.5 / y; });
}

Tensor relu(const Tensor& x) {
    return unary_op(
        "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
        [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    return unary_op(
        "gelu", x,
        [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
        [](double v, double) {
            const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
            return cdf + v * pdf;
        });
}

Tensor clamp_min(const Tensor& x, double floor) {
    return unary_op(
        "clamp_min", x, [floor](double v) { return v > floor ? v : floor; },
        [floor](double v, double) { return v > floor ? 1.0 : 0.0; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() < 2 || b.rank() < 2) {
        throw ShapeError("matmul: operands must have rank >= 2, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
    }
    const std::int64_t m = a.extent(a.rank() - 2);
    const std::int64_t k = a.extent(a.rank() - 1);
    const std::int64_t kb = b.extent(b.rank() - 2);
    const std::int64_t n = b.extent(b.rank() - 1);
    if (k != kb) {
        throw ShapeError("matmul: inner extents disagree, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    const Shape batch_a(a.shape().begin(), a.shape().end() - 2);
    const Shape batch_b(b.shape().begin(), b.shape().end() - 2);
    const Shape batch = broadcast_shape(batch_a, batch_b);
    auto map_a = broadcast_map(batch_a, batch);
    auto map_b = broadcast_map(batch_b, batch);
    const std::int64_t nbatch = shape_numel(batch);

    Shape out_shape = batch;
    out_shape.push_back(m);
    out_shape.push_back(n);
    Tensor out(out_shape);

    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (std::int64_t s = 0; s < nbatch; ++s) {
        mm_accumulate(pa + mapped(map_a, s) * m * k, pb + mapped(map_b, s) * k * n,
                      po + s * m * n, m, k, n);
    }
    check_finite(out, "matmul");
    if (should_record({&a, &b})) {
        mark_output(out);
        Tensor ac = a, bc = b, oc = out;
        auto ma = std::make_shared<std::vector<std::int64_t>>(std::move(map_a));
        auto mb = std::make_shared<std::vector<std::int64_t>>(std::move(map_b));
        active_tape()->record("matmul", [ac, bc, oc, ma, mb, nbatch, m, k, n]() mutable {
            if (!oc.has_grad()) return;
            const double* g = oc.grad().data();
            if (ac.requires_grad()) {
                auto& d = ac.mutable_data();
                d.ensure_grad();
                for (std::int64_t s = 0; s < nbatch; ++s) {
                    mm_grad_a(g + s * m * n, bc.data() + mapped(*mb, s) * k * n,
                              d.grad.data() + mapped(*ma, s) * m * k, m, k, n);
                }
            }
            if (bc.requires_grad()) {
                auto& d = bc.mutable_data();
                d.ensure_grad();
                for (std::int64_t s = 0; s < nbatch; ++s) {
                    mm_grad_b(ac.data() + mapped(*ma, s) * m * k, g + s * m * n,
                              d.grad.data() + mapped(*mb, s) * k * n, m, k, n);
                }
            }
        });
    }
    return out;
}

namespace {

// out[i] = x[perm_map[i]] for an axis permutation; used by transpose both ways
std::vector<std::int64_t> permutation_map(const Shape& in_shape,
                                          const std::vector<std::int64_t>& out_to_in_axis) {
    const std::int64_t rank = static_cast<std::int64_t>(in_shape.size());
    Shape out_shape(static_cast<std::size_t>(rank));
    for (std::int64_t i = 0; i < rank; ++i) {
        out_shape[static_cast<std::size_t>(i)] =
            in_shape[static_cast<std::size_t>(out_to_in_axis[static_cast<std::size_t>(i)])];
    }
    auto in_strides = row_major_strides(in_shape);
    std::vector<std::int64_t> strides(static_cast<std::size_t>(rank));
    for (std::int64_t i = 0; i < rank; ++i) {
        strides[static_cast<std::size_t>(i)] =
            in_strides[static_cast<std::size_t>(out_to_in_axis[static_cast<std::size_t>(i)])];
    }
    const std::int64_t n = shape_numel(out_shape);
    std::vector<std::int64_t> map(static_cast<std::size_t>(n));
    std::vector<std::int64_t> idx(static_cast<std::size_t>(rank), 0);
    std::int64_t cur = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        map[static_cast<std::size_t>(i)] = cur;
        for (std::int64_t ax = rank - 1; ax >= 0; --ax) {
            auto& v = idx[static_cast<std::size_t>(ax)];
            cur += strides[static_cast<std::size_t>(ax)];
            if (++v < out_shape[static_cast<std::size_t>(ax)]) break;
            cur -= v * strides[static_cast<std::size_t>(ax)];
            v = 0;
        }
    }
    return map;
}

} // namespace

Tensor transpose(const Tensor& x, std::int64_t axis0, std::int64_t axis1) {
    check_axis(x, axis0, "transpose");
    check_axis(x, axis1, "transpose");
    std::vector<std::int64_t> perm(static_cast<std::size_t>(x.rank()));
    for (std::int64_t i = 0; i < x.rank(); ++i) perm[static_cast<std::size_t>(i)] = i;
    std::swap(perm[static_cast<std::size_t>(axis0)], perm[static_cast<std::size_t>(axis1)]);

    Shape out_shape = x.shape();
    std::swap(out_shape[static_cast<std::size_t>(axis0)], out_shape[static_cast<std::size_t>(axis1)]);
    auto map = permutation_map(x.shape(), perm);
    Tensor out(out_shape);
    const double* px = x.data();
    double* po = out.data();
    for (std::int64_t i = 0; i < out.numel(); ++i) {
        po[i] = px[map[static_cast<std::size_t>(i)]];
    }
    if (should_record({&x})) {
        mark_output(out);
        Tensor xc = x, oc = out;
        auto mp = std::make_shared<std::vector<std::int64_t>>(std::move(map));
        active_tape()->record("transpose", [xc, oc, mp]() mutable {
            if (!oc.has_grad()) return;
            const auto& g = oc.grad();
            auto& d = xc.mutable_data();
            d.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                d.grad[static_cast<std::size_t>((*mp)[i])] += g[i];
            }
        });
    }
    return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) +
                         " changes element count");
    }
    Tensor out(std::move(shape), x.values());
    if (should_record({&x})) {
        mark_output(out);
        Tensor xc = x, oc = out;
        active_tape()->record("reshape", [xc, oc]() mutable {
            if (!oc.has_grad()) return;
            accumulate(xc, oc.grad());
        });
    }
    return out;
}

Tensor broadcast_to(const Tensor& x, const Shape& shape) {
    if (broadcast_shape(x.shape(), shape) != shape) {
        throw ShapeError("broadcast_to: " + shape_str(x.shape()) + " does not broadcast to " +
                         shape_str(shape));
    }
    auto map = broadcast_map(x.shape(), shape);
    Tensor out(shape);
    const double* px = x.data();
    double* po = out.data();
    for (std::int64_t i = 0; i < out.numel(); ++i) po[i] = px[mapped(map, i)];
    if (should_record({&x})) {
        mark_output(out);
        Tensor xc = x, oc = out;
        auto mp = std::make_shared<std::vector<std::int64_t>>(std::move(map));
        active_tape()->record("broadcast_to", [xc, oc, mp]() mutable {
            if (!oc.has_grad()) return;
            const auto& g = oc.grad();
            auto& d = xc.mutable_data();
            d.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                d.grad[static_cast<std::size_t>(mapped(*mp, static_cast<std::int64_t>(i)))] += g[i];
            }
        });
    }
    return out;
}

Tensor concat(const std::vector<Tensor>& parts, std::int64_t axis) {
    if (parts.empty()) throw ContractError("concat: no parts");
    const Tensor& first = parts.front();
    check_axis(first, axis, "concat");
    Shape out_shape = first.shape();
    std::int64_t total = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != first.rank()) {
            throw ShapeError("concat: rank mismatch " + shape_str(p.shape()) + " vs " +
                             shape_str(first.shape()));
        }
        for (std::int64_t ax = 0; ax < first.rank(); ++ax) {
            if (ax != axis && p.extent(ax) != first.extent(ax)) {
                throw ShapeError("concat: extent mismatch at axis " + std::to_string(ax) + ": " +
                                 shape_str(p.shape()) + " vs " + shape_str(first.shape()));
            }
        }
        total += p.extent(axis);
    }
    out_shape[static_cast<std::size_t>(axis)] = total;
    Tensor out(out_shape);
    const AxisSplit so = split_axis(out_shape, axis);
    double* po = out.data();
    std::int64_t offset = 0;
    for (const Tensor& p : parts) {
        const AxisSplit sp = split_axis(p.shape(), axis);
        const double* pp = p.data();
        for (std::int64_t o = 0; o < sp.outer; ++o) {
            for (std::int64_t e = 0; e < sp.extent; ++e) {
                const double* src = pp + (o * sp.extent + e) * sp.inner;
                double* dst = po + (o * so.extent + offset + e) * so.inner;
                std::copy(src, src + sp.inner, dst);
            }
        }
        offset += sp.extent;
    }
    bool rec = false;
    for (const Tensor& p : parts) {
        if (active_tape() && p.requires_grad()) rec = true;
    }
    if (rec) {
        mark_output(out);
        std::vector<Tensor> pc = parts;
        Tensor oc = out;
        active_tape()->record("concat", [pc, oc, axis, so]() mutable {
            if (!oc.has_grad()) return;
            const double* g = oc.grad().data();
            std::int64_t offset2 = 0;
            for (Tensor& p : pc) {
                const AxisSplit sp = split_axis(p.shape(), axis);
                if (p.requires_grad()) {
                    auto& d = p.mutable_data();
                    d.ensure_grad();
                    for (std::int64_t o = 0; o < sp.outer; ++o) {
                        for (std::int64_t e = 0; e < sp.extent; ++e) {
                            const double* src = g + (o * so.extent + offset2 + e) * so.inner;
                            double* dst = d.grad.data() + (o * sp.extent + e) * sp.inner;
                            for (std::int64_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
                        }
                    }
                }
                offset2 += sp.extent;
            }
        });
    }
    return out;
}

Tensor slice(const Tensor& x, std::int64_t axis, std::int64_t start, std::int64_t length) {
    check_axis(x, axis, "slice");
    if (start < 0 || length < 0 || start + length > x.extent(axis)) {
        throw ShapeError("slice: [" + std::to_string(start) + ", " +
                         std::to_string(start + length) + ") out of range for axis " +
                         std::to_string(axis) + " of " + shape_str(x.shape()));
    }
    Shape out_shape = x.shape();
    out_shape[static_cast<std::size_t>(axis)] = length;
    Tensor out(out_shape);
    const AxisSplit sx = split_axis(x.shape(), axis);
    const double* px = x.data();
    double* po = out.data();
    for (std::int64_t o = 0; o < sx.outer; ++o) {
        const double* src = px + (o * sx.extent + start) * sx.inner;
        double* dst = po + o * length * sx.inner;
        std::copy(src, src + length * sx.inner, dst);
    }
    if (should_record({&x})) {
        mark_output(out);
        Tensor xc = x, oc = out;
        active_tape()->record("slice", [xc, oc, sx, start, length]() mutable {
            if (!oc.has_grad()) return;
            const double* g = oc.grad().data();
            auto& d = xc.mutable_data();
            d.ensure_grad();
            for (std::int64_t o = 0; o < sx.outer; ++o) {
                const double* src = g + o * length * sx.inner;
                double* dst = d.grad.data() + (o * sx.extent + start) * sx.inner;
                for (std::int64_t i = 0; i < length * sx.inner; ++i) dst[i] += src[i];
            }
        });
    }
    return out;
}

Tensor gather_rows(const Tensor& x, const std::vector<std::int64_t>& indices) {
    if (x.rank() < 1) throw ShapeError("gather_rows: rank-0 input");
    const std::int64_t rows = x.extent(0);
    const std::int64_t inner = x.numel() / std::max<std::int64_t>(rows, 1);
    for (auto i : indices) {
        if (i < 0 || i >= rows) {
            throw ContractError("gather_rows: index " + std::to_string(i) + " out of range [0, " +
                                std::to_string(rows) + ")");
        }
    }
    Shape out_shape = x.shape();
    out_shape[0] = static_cast<std::int64_t>(indices.size());
    Tensor out(out_shape);
    const double* px = x.data();
    double* po = out.data();
    for (std::size_t r = 0; r < indices.size(); ++r) {
        std::copy(px + indices[r] * inner, px + (indices[r] + 1) * inner,
                  po + static_cast<std::int64_t>(r) * inner);
    }
    if (should_record({&x})) {
        mark_output(out);
        Tensor xc = x, oc = out;
        auto idx = std::make_shared<std::vector<std::int64_t>>(indices);
        active_tape()->record("gather_rows", [xc, oc, idx, inner]() mutable {
            if (!oc.has_grad()) return;
            const double* g = oc.grad().data();
            auto& d = xc.mutable_data();
            d.ensure_grad();
            for (std::size_t r = 0; r < idx->size(); ++r) {
                double* dst = d.grad.data() + (*idx)[r] * inner;
                const double* src = g + static_cast<std::int64_t>(r) * inner;
                for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[i];
            }
        });
    }
    return out;
}

Tensor diag_part(const Tensor& x) {
    if (x.rank() != 2 || x.extent(0) != x.extent(1)) {
        throw ShapeError("diag_part: expected square matrix, got " + shape_str(x.shape()));
    }
    const std::int64_t n = x.extent(0);
    Tensor out(Shape{n});
    for (std::int64_t i = 0; i < n; ++i) out[i] = x[i * n + i];
    if (should_record({&x})) {
        mark_output(out);
        Tensor xc = x, oc = out;
        active_tape()->record("diag_part", [xc, oc, n]() mutable {
            if (!oc.has_grad()) return;
            const auto& g = oc.grad();
            auto& d = xc.mutable_data();
            d.ensure_grad();
            for (std::int64_t i = 0; i < n; ++i) {
                d.grad[static_cast<std::size_t>(i * n + i)] += g[static_cast<std::size_t>(i)];
            }
        });
    }
    return out;
}

Tensor masked_fill(const Tensor& x, const BoolMask& mask, double value) {
    if (mask.shape != x.shape()) {
        throw ShapeError("masked_fill: mask " + shape_str(mask.shape) + " vs tensor " +
                         shape_str(x.shape()));
    }
    Tensor out(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) out[i] = mask.at(i) ? value : x[i];
    check_finite(out, "masked_fill");
    if (should_record({&x})) {
        mark_output(out);
        Tensor xc = x, oc = out;
        auto keep = std::make_shared<std::vector<std::uint8_t>>(mask.data);
        active_tape()->record("masked_fill", [xc, oc, keep]() mutable {
            if (!oc.has_grad()) return;
            const auto& g = oc.grad();
            auto& d = xc.mutable_data();
            d.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                if (!(*keep)[i]) d.grad[i] += g[i];
            }
        });
    }
    return out;
}

Tensor sum_all(const Tensor& x) {
    double s = 0.0;
    for (std::int64_t i = 0; i < x.numel(); ++i) s += x[i];
    Tensor out = Tensor::scalar(s);
    check_finite(out, "sum_all");
    if (should_record({&x})) {
        mark_output(out);
        Tensor xc = x, oc = out;
        active_tape()->record("sum_all", [xc, oc]() mutable {
            if (!oc.has_grad()) return;
            const double g = oc.grad()[0];
            auto& d = xc.mutable_data();
            d.ensure_grad();
            for (auto& v : d.grad) v += g;
        });
    }
    return out;
}

Tensor mean_all(const Tensor& x) {
    if (x.numel() == 0) throw ContractError("mean_all: empty tensor");
    return scale(sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

namespace {

Tensor reduce_axis(const char* name, const Tensor& x, std::int64_t axis, double factor) {
    check_axis(x, axis, name);
    const AxisSplit s = split_axis(x.shape(), axis);
    Shape out_shape;
    for (std::int64_t i = 0; i < x.rank(); ++i) {
        if (i != axis) out_shape.push_back(x.extent(i));
    }
    Tensor out(out_shape);
    const double* px = x.data();
    double* po = out.data();
    for (std::int64_t o = 0; o < s.outer; ++o) {
        for (std::int64_t i = 0; i < s.inner; ++i) {
            double acc = 0.0;
            for (std::int64_t e = 0; e < s.extent; ++e) {
                acc += px[(o * s.extent + e) * s.inner + i];
            }
            po[o * s.inner + i] = acc * factor;
        }
    }
    check_finite(out, name);
    if (should_record({&x})) {
        mark_output(out);
        Tensor xc = x, oc = out;
        active_tape()->record(name, [xc, oc, s, factor]() mutable {
            if (!oc.has_grad()) return;
            const double* g = oc.grad().data();
            auto& d = xc.mutable_data();
            d.ensure_grad();
            for (std::int64_t o = 0; o < s.outer; ++o) {
                for (std::int64_t e = 0; e < s.extent; ++e) {
                    for (std::int64_t i = 0; i < s.inner; ++i) {
                        d.grad[static_cast<std::size_t>((o * s.extent + e) * s.inner + i)] +=
                            g[o * s.inner + i] * factor;
                    }
                }
            }
        });
    }
    return out;
}

} // namespace

Tensor sum_axis(const Tensor& x, std::int64_t axis) { return reduce_axis("sum_axis", x, axis, 1.0); }

Tensor mean_axis(const Tensor& x, std::int64_t axis) {
    check_axis(x, axis, "mean_axis");
    return reduce_axis("mean_axis", x, axis, 1.0 / static_cast<double>(x.extent(axis)));
}

Tensor softmax_lastdim(const Tensor& x, const BoolMask* mask) {
    if (x.rank() < 1) throw ShapeError("softmax: rank-0 input");
    if (mask && mask->shape != x.shape()) {
        throw ShapeError("softmax: mask " + shape_str(mask->shape) + " vs tensor " +
                         shape_str(x.shape()));
    }
    const std::int64_t width = x.extent(x.rank() - 1);
    const std::int64_t rows = x.numel() / width;
    Tensor out(x.shape());
    const double* px = x.data();
    double* po = out.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* row = px + r * width;
        double* orow = po + r * width;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::int64_t j = 0; j < width; ++j) {
            if (!mask || mask->at(r * width + j)) mx = std::max(mx, row[j]);
        }
        if (mx == -std::numeric_limits<double>::infinity()) {
            throw NumericError("softmax: fully masked slice at row " + std::to_string(r));
        }
        double denom = 0.0;
        for (std::int64_t j = 0; j < width; ++j) {
            if (!mask || mask->at(r * width + j)) {
                orow[j] = std::exp(row[j] - mx);
                denom += orow[j];
            } else {
                orow[j] = 0.0;
            }
        }
        for (std::int64_t j = 0; j < width; ++j) orow[j] /= denom;
        // masked entries stay exactly zero
        if (mask) {
            for (std::int64_t j = 0; j < width; ++j) {
                if (!mask->at(r * width + j)) orow[j] = 0.0;
            }
        }
    }
    check_finite(out, "softmax");
    if (should_record({&x})) {
        mark_output(out);
        Tensor xc = x, oc = out;
        std::shared_ptr<std::vector<std::uint8_t>> keep;
        if (mask) keep = std::make_shared<std::vector<std::uint8_t>>(mask->data);
        active_tape()->record("softmax", [xc, oc, keep, rows, width]() mutable {
            if (!oc.has_grad()) return;
            const double* g = oc.grad().data();
            const double* y = oc.data();
            auto& d = xc.mutable_data();
            d.ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* grow = g + r * width;
                const double* yrow = y + r * width;
                double dot = 0.0;
                for (std::int64_t j = 0; j < width; ++j) dot += grow[j] * yrow[j];
                for (std::int64_t j = 0; j < width; ++j) {
                    if (keep && !(*keep)[static_cast<std::size_t>(r * width + j)]) continue;
                    d.grad[static_cast<std::size_t>(r * width + j)] +=
                        yrow[j] * (grow[j] - dot);
                }
            }
        });
    }
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    if (eps <= 0.0) throw ContractError("layer_norm: eps must be positive");
    if (x.rank() < 1) throw ShapeError("layer_norm: rank-0 input");
    const std::int64_t width = x.extent(x.rank() - 1);
    if (gain.shape() != Shape{width} || bias.shape() != Shape{width}) {
        throw ShapeError("layer_norm: gain " + shape_str(gain.shape()) + " / bias " +
                         shape_str(bias.shape()) + " vs feature extent " + std::to_string(width));
    }
    const std::int64_t rows = x.numel() / width;
    Tensor out(x.shape());
    auto xhat = std::make_shared<std::vector<double>>(static_cast<std::size_t>(x.numel()));
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
    const double* px = x.data();
    double* po = out.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* row = px + r * width;
        double mean = 0.0;
        for (std::int64_t j = 0; j < width; ++j) mean += row[j];
        mean /= static_cast<double>(width);
        double var = 0.0;
        for (std::int64_t j = 0; j < width; ++j) {
            const double c = row[j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(width);
        const double inv = 1.0 / std::sqrt(var + eps);
        (*inv_std)[static_cast<std::size_t>(r)] = inv;
        for (std::int64_t j = 0; j < width; ++j) {
            const double h = (row[j] - mean) * inv;
            (*xhat)[static_cast<std::size_t>(r * width + j)] = h;
            po[r * width + j] = gain[j] * h + bias[j];
        }
    }
    check_finite(out, "layer_norm");
    if (should_record({&x, &gain, &bias})) {
        mark_output(out);
        Tensor xc = x, gc = gain, bc = bias, oc = out;
        active_tape()->record("layer_norm", [xc, gc, bc, oc, xhat, inv_std, rows, width]() mutable {
            if (!oc.has_grad()) return;
            const double* g = oc.grad().data();
            if (gc.requires_grad()) {
                auto& d = gc.mutable_data();
                d.ensure_grad();
                for (std::int64_t r = 0; r < rows; ++r) {
                    for (std::int64_t j = 0; j < width; ++j) {
                        d.grad[static_cast<std::size_t>(j)] +=
                            g[r * width + j] * (*xhat)[static_cast<std::size_t>(r * width + j)];
                    }
                }
            }
            if (bc.requires_grad()) {
                auto& d = bc.mutable_data();
                d.ensure_grad();
                for (std::int64_t r = 0; r < rows; ++r) {
                    for (std::int64_t j = 0; j < width; ++j) {
                        d.grad[static_cast<std::size_t>(j)] += g[r * width + j];
                    }
                }
            }
            if (xc.requires_grad()) {
                auto& d = xc.mutable_data();
                d.ensure_grad();
                std::vector<double> h(static_cast<std::size_t>(width));
                for (std::int64_t r = 0; r < rows; ++r) {
                    double m1 = 0.0, m2 = 0.0;
                    for (std::int64_t j = 0; j < width; ++j) {
                        h[static_cast<std::size_t>(j)] = g[r * width + j] * gc[j];
                        m1 += h[static_cast<std::size_t>(j)];
                        m2 += h[static_cast<std::size_t>(j)] *
                              (*xhat)[static_cast<std::size_t>(r * width + j)];
                    }
                    m1 /= static_cast<double>(width);
                    m2 /= static_cast<double>(width);
                    const double inv = (*inv_std)[static_cast<std::size_t>(r)];
                    for (std::int64_t j = 0; j < width; ++j) {
                        const double xh = (*xhat)[static_cast<std::size_t>(r * width + j)];
                        d.grad[static_cast<std::size_t>(r * width + j)] +=
                            inv * (h[static_cast<std::size_t>(j)] - m1 - xh * m2);
                    }
                }
            }
        });
    }
    return out;
}

Tensor dropout(const Tensor& x, double rate, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0) {
        throw ContractError("dropout: rate " + std::to_string(rate) + " outside [0, 1)");
    }
    if (rate == 0.0) return x;
    const double keep_scale = 1.0 / (1.0 - rate);
    auto keep = std::make_shared<std::vector<std::uint8_t>>(static_cast<std::size_t>(x.numel()));
    Tensor out(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        const bool k = rng.uniform() >= rate;
        (*keep)[static_cast<std::size_t>(i)] = k ? 1 : 0;
        out[i] = k ? x[i] * keep_scale : 0.0;
    }
    if (should_record({&x})) {
        mark_output(out);
        Tensor xc = x, oc = out;
        active_tape()->record("dropout", [xc, oc, keep, keep_scale]() mutable {
            if (!oc.has_grad()) return;
            const auto& g = oc.grad();
            auto& d = xc.mutable_data();
            d.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                if ((*keep)[i]) d.grad[i] += g[i] * keep_scale;
            }
        });
    }
    return out;
}

Tensor weighted_sum_rows(const Tensor& x, const Tensor& w) {
    if (x.rank() != 3 || w.rank() != 2 || x.extent(0) != w.extent(0) ||
        x.extent(1) != w.extent(1)) {
        throw ShapeError("weighted_sum_rows: x " + shape_str(x.shape()) + " vs w " +
                         shape_str(w.shape()));
    }
    const std::int64_t batch = x.extent(0), steps = x.extent(1), feat = x.extent(2);
    Tensor out(Shape{batch, feat});
    for (std::int64_t b = 0; b < batch; ++b) {
        for (std::int64_t t = 0; t < steps; ++t) {
            const double wv = w[b * steps + t];
            if (wv == 0.0) continue;
            const double* src = x.data() + (b * steps + t) * feat;
            double* dst = out.data() + b * feat;
            for (std::int64_t f = 0; f < feat; ++f) dst[f] += wv * src[f];
        }
    }
    check_finite(out, "weighted_sum_rows");
    if (should_record({&x})) {
        mark_output(out);
        Tensor xc = x, wc = w.detach(), oc = out;
        active_tape()->record("weighted_sum_rows", [xc, wc, oc, batch, steps, feat]() mutable {
            if (!oc.has_grad()) return;
            const double* g = oc.grad().data();
            auto& d = xc.mutable_data();
            d.ensure_grad();
            for (std::int64_t b = 0; b < batch; ++b) {
                for (std::int64_t t = 0; t < steps; ++t) {
                    const double wv = wc[b * steps + t];
                    if (wv == 0.0) continue;
                    double* dst = d.grad.data() + (b * steps + t) * feat;
                    const double* src = g + b * feat;
                    for (std::int64_t f = 0; f < feat; ++f) dst[f] += wv * src[f];
                }
            }
        });
    }
    return out;
}

Tensor cross_entropy_logits(const Tensor& logits, const std::vector<std::int64_t>& labels) {
    if (logits.rank() != 2) {
        throw ShapeError("cross_entropy: logits must be [batch, classes], got " +
                         shape_str(logits.shape()));
    }
    const std::int64_t batch = logits.extent(0), classes = logits.extent(1);
    if (static_cast<std::int64_t>(labels.size()) != batch) {
        throw ContractError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch " +
                            std::to_string(batch));
    }
    for (auto y : labels) {
        if (y < 0 || y >= classes) {
            throw DataError("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                            std::to_string(classes) + ")");
        }
    }
    auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(batch * classes));
    double total = 0.0;
    for (std::int64_t b = 0; b < batch; ++b) {
        const double* row = logits.data() + b * classes;
        double mx = row[0];
        for (std::int64_t c = 1; c < classes; ++c) mx = std::max(mx, row[c]);
        double denom = 0.0;
        for (std::int64_t c = 0; c < classes; ++c) {
            const double e = std::exp(row[c] - mx);
            (*probs)[static_cast<std::size_t>(b * classes + c)] = e;
            denom += e;
        }
        for (std::int64_t c = 0; c < classes; ++c) {
            (*probs)[static_cast<std::size_t>(b * classes + c)] /= denom;
        }
        total += std::log(denom) + mx - row[labels[static_cast<std::size_t>(b)]];
    }
    Tensor out = Tensor::scalar(total / static_cast<double>(batch));
    check_finite(out, "cross_entropy");
    if (should_record({&logits})) {
        mark_output(out);
        Tensor lc = logits, oc = out;
        auto lbl = std::make_shared<std::vector<std::int64_t>>(labels);
        active_tape()->record("cross_entropy", [lc, oc, probs, lbl, batch, classes]() mutable {
            if (!oc.has_grad()) return;
            const double g = oc.grad()[0] / static_cast<double>(batch);
            auto& d = lc.mutable_data();
            d.ensure_grad();
            for (std::int64_t b = 0; b < batch; ++b) {
                for (std::int64_t c = 0; c < classes; ++c) {
                    double v = (*probs)[static_cast<std::size_t>(b * classes + c)];
                    if (c == (*lbl)[static_cast<std::size_t>(b)]) v -= 1.0;
                    d.grad[static_cast<std::size_t>(b * classes + c)] += g * v;
                }
            }
        });
    }
    return out;
}

Tensor binary_cross_entropy_logits(const Tensor& logits, const std::vector<std::int64_t>& labels) {
    if (logits.numel() != static_cast<std::int64_t>(labels.size())) {
        throw ShapeError("bce: " + std::to_string(labels.size()) + " labels for logits " +
                         shape_str(logits.shape()));
    }
    const std::int64_t batch = logits.numel();
    for (auto y : labels) {
        if (y != 0 && y != 1) {
            throw DataError("bce: label " + std::to_string(y) + " is not binary");
        }
    }
    double total = 0.0;
    for (std::int64_t b = 0; b < batch; ++b) {
        const double z = logits[b];
        const double y = static_cast<double>(labels[static_cast<std::size_t>(b)]);
        total += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
    }
    Tensor out = Tensor::scalar(total / static_cast<double>(batch));
    check_finite(out, "bce");
    if (should_record({&logits})) {
        mark_output(out);
        Tensor lc = logits, oc = out;
        auto lbl = std::make_shared<std::vector<std::int64_t>>(labels);
        active_tape()->record("bce", [lc, oc, lbl, batch]() mutable {
            if (!oc.has_grad()) return;
            const double g = oc.grad()[0] / static_cast<double>(batch);
            auto& d = lc.mutable_data();
            d.ensure_grad();
            for (std::int64_t b = 0; b < batch; ++b) {
                const double z = lc[b];
                const double sig = 1.0 / (1.0 + std::exp(-z));
                d.grad[static_cast<std::size_t>(b)] +=
                    g * (sig - static_cast<double>((*lbl)[static_cast<std::size_t>(b)]));
            }
        });
    }
    return out;
}

} // namespace starformer::ops
