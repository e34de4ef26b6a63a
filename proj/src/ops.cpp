#include "kivi/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

#include "kivi/special.hpp"

namespace kivi {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

bool is_suffix(const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

Shape broadcast_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() == b.shape()) return a.shape();
    if (b.size() == 1) return a.shape();
    if (a.size() == 1) return b.shape();
    if (is_suffix(b.shape(), a.shape())) return a.shape();
    if (is_suffix(a.shape(), b.shape())) return b.shape();
    throw ShapeError(std::string(op) + ": cannot broadcast " + shape_string(a.shape()) + " with " +
                     shape_string(b.shape()));
}

// out = f(a, b); da/db give partial derivatives given (a, b, out).
template <class F, class DA, class DB>
Tensor binary(const char* name, const Tensor& a, const Tensor& b, F f, DA da, DB db) {
    Shape shape = broadcast_shape(a, b, name);
    const std::size_t n = shape_size(shape);
    const auto av = a.values();
    const auto bv = b.values();
    const std::size_t na = av.size(), nb = bv.size();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = f(av[i % na], bv[i % nb]);
    return Tensor::from_op(name, std::move(shape), std::move(out), {a, b},
                           [da, db](const detail::Node& self, std::span<const double> g, detail::GradSink& sink) {
                               const auto& x = self.parents[0]->values;
                               const auto& y = self.parents[1]->values;
                               const std::size_t nx = x.size(), ny = y.size();
                               auto gx = sink.parent_grad(0);
                               auto gy = sink.parent_grad(1);
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                   const double xi = x[i % nx], yi = y[i % ny];
                                   if (!gx.empty()) gx[i % nx] += g[i] * da(xi, yi, self.values[i]);
                                   if (!gy.empty()) gy[i % ny] += g[i] * db(xi, yi, self.values[i]);
                               }
                           });
}

// out = f(x); df gives the derivative given (x, out).
template <class F, class DF>
Tensor unary(const char* name, const Tensor& x, F f, DF df) {
    const auto xv = x.values();
    std::vector<double> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
    return Tensor::from_op(name, x.shape(), std::move(out), {x},
                           [df](const detail::Node& self, std::span<const double> g, detail::GradSink& sink) {
                               auto gx = sink.parent_grad(0);
                               const auto& xs = self.parents[0]->values;
                               for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xs[i], self.values[i]);
                           });
}

void require_all(const Tensor& x, const char* name, bool (*pred)(double), const char* what) {
    for (double v : x.values()) {
        if (!pred(v)) throw DomainError(std::string(name) + ": " + what + ", got " + std::to_string(v));
    }
}

struct AxisSplit {
    std::size_t outer, extent, inner;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
    AxisSplit s{1, shape[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

void require_axis(const Tensor& x, std::size_t axis, const char* name) {
    if (axis >= x.rank()) {
        throw ShapeError(std::string(name) + ": axis " + std::to_string(axis) + " invalid for shape " +
                         shape_string(x.shape()));
    }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary(
        "add", a, b, [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
        [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary(
        "sub", a, b, [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
        [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary(
        "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
        [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
    require_all(b, "div", [](double v) { return v != 0.0; }, "division by zero");
    return binary(
        "div", a, b, [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
        [](double, double y, double out) { return -out / y; });
}

Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
Tensor operator+(const Tensor& a, double b) { return add(a, Tensor::scalar(b)); }
Tensor operator+(double a, const Tensor& b) { return add(Tensor::scalar(a), b); }
Tensor operator-(const Tensor& a, double b) { return sub(a, Tensor::scalar(b)); }
Tensor operator-(double a, const Tensor& b) { return sub(Tensor::scalar(a), b); }
Tensor operator*(const Tensor& a, double b) { return mul(a, Tensor::scalar(b)); }
Tensor operator*(double a, const Tensor& b) { return mul(Tensor::scalar(a), b); }
Tensor operator/(const Tensor& a, double b) { return div(a, Tensor::scalar(b)); }
Tensor operator-(const Tensor& a) { return neg(a); }

Tensor neg(const Tensor& x) {
    return unary("neg", x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Tensor exp(const Tensor& x) {
    return unary("exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
    require_all(x, "log", [](double v) { return v > 0.0; }, "argument must be positive");
    return unary("log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor square(const Tensor& x) {
    return unary("square", x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor sqrt(const Tensor& x) {
    require_all(x, "sqrt", [](double v) { return v >= 0.0; }, "argument must be non-negative");
    return unary("sqrt", x, [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

Tensor relu(const Tensor& x) {
    return unary(
        "relu", x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor tanh(const Tensor& x) {
    return unary("tanh", x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& x) {
    return unary(
        "sigmoid", x,
        [](double v) {
            if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
            const double e = std::exp(v);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& x) {
    return unary(
        "softplus", x, [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); },
        [](double v, double) {
            if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
            const double e = std::exp(v);
            return e / (1.0 + e);
        });
}

Tensor digamma(const Tensor& x) {
    require_all(x, "digamma", [](double v) { return v > 0.0; }, "argument must be positive");
    return unary("digamma", x, [](double v) { return kivi::digamma(v); }, [](double v, double) { return trigamma(v); });
}

Tensor lgamma(const Tensor& x) {
    require_all(x, "lgamma", [](double v) { return v > 0.0; }, "argument must be positive");
    return unary("lgamma", x, [](double v) { return log_gamma(v); }, [](double v, double) { return kivi::digamma(v); });
}

Tensor clamp_min(const Tensor& x, double floor) {
    return unary(
        "clamp_min", x, [floor](double v) { return v < floor ? floor : v; },
        [floor](double v, double) { return v < floor ? 0.0 : 1.0; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: incompatible shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
    }
    const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
    std::vector<double> out(n * m);
    MutMap(out.data(), n, m).noalias() = ConstMap(a.values().data(), n, k) * ConstMap(b.values().data(), k, m);
    return Tensor::from_op("matmul", {n, m}, std::move(out), {a, b},
                           [n, k, m](const detail::Node& self, std::span<const double> g, detail::GradSink& sink) {
                               ConstMap gm(g.data(), n, m);
                               if (auto ga = sink.parent_grad(0); !ga.empty()) {
                                   MutMap(ga.data(), n, k).noalias() +=
                                       gm * ConstMap(self.parents[1]->values.data(), k, m).transpose();
                               }
                               if (auto gb = sink.parent_grad(1); !gb.empty()) {
                                   MutMap(gb.data(), k, m).noalias() +=
                                       ConstMap(self.parents[0]->values.data(), n, k).transpose() * gm;
                               }
                           });
}

Tensor batched_matmul(const Tensor& a, const Tensor& b) {
    const bool a_batched = a.rank() == 3, b_batched = b.rank() == 3;
    const auto fail = [&] {
        throw ShapeError("batched_matmul: incompatible shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
    };
    if (a.rank() < 2 || a.rank() > 3 || b.rank() < 2 || b.rank() > 3 || (!a_batched && !b_batched)) fail();
    const std::size_t s = a_batched ? a.dim(0) : b.dim(0);
    if (a_batched && b_batched && a.dim(0) != b.dim(0)) fail();
    const std::size_t n = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
    const std::size_t m = b.dim(b.rank() - 1);
    if (b.dim(b.rank() - 2) != k) fail();
    const std::size_t a_stride = a_batched ? n * k : 0, b_stride = b_batched ? k * m : 0;

    std::vector<double> out(s * n * m);
    for (std::size_t i = 0; i < s; ++i) {
        MutMap(out.data() + i * n * m, n, m).noalias() =
            ConstMap(a.values().data() + i * a_stride, n, k) * ConstMap(b.values().data() + i * b_stride, k, m);
    }
    return Tensor::from_op(
        "batched_matmul", {s, n, m}, std::move(out), {a, b},
        [s, n, k, m, a_stride, b_stride](const detail::Node& self, std::span<const double> g, detail::GradSink& sink) {
            const double* av = self.parents[0]->values.data();
            const double* bv = self.parents[1]->values.data();
            auto ga = sink.parent_grad(0);
            auto gb = sink.parent_grad(1);
            for (std::size_t i = 0; i < s; ++i) {
                ConstMap gm(g.data() + i * n * m, n, m);
                if (!ga.empty())
                    MutMap(ga.data() + i * a_stride, n, k).noalias() += gm * ConstMap(bv + i * b_stride, k, m).transpose();
                if (!gb.empty())
                    MutMap(gb.data() + i * b_stride, k, m).noalias() += ConstMap(av + i * a_stride, n, k).transpose() * gm;
            }
        });
}

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("transpose: needs a matrix, got " + shape_string(a.shape()));
    const std::size_t n = a.dim(0), m = a.dim(1);
    std::vector<double> out(n * m);
    MutMap(out.data(), m, n) = ConstMap(a.values().data(), n, m).transpose();
    return Tensor::from_op("transpose", {m, n}, std::move(out), {a},
                           [n, m](const detail::Node&, std::span<const double> g, detail::GradSink& sink) {
                               MutMap(sink.parent_grad(0).data(), n, m) += ConstMap(g.data(), m, n).transpose();
                           });
}

Tensor sum(const Tensor& x) {
    double total = 0.0;
    for (double v : x.values()) total += v;
    return Tensor::from_op("sum", {}, {total}, {x},
                           [](const detail::Node&, std::span<const double> g, detail::GradSink& sink) {
                               for (double& v : sink.parent_grad(0)) v += g[0];
                           });
}

Tensor mean(const Tensor& x) {
    if (x.size() == 0) throw ShapeError("mean: empty tensor");
    return sum(x) * (1.0 / static_cast<double>(x.size()));
}

Tensor sum(const Tensor& x, std::size_t axis) {
    require_axis(x, axis, "sum");
    const auto s = split_axis(x.shape(), axis);
    Shape shape = x.shape();
    shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
    std::vector<double> out(s.outer * s.inner, 0.0);
    const auto xv = x.values();
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t e = 0; e < s.extent; ++e)
            for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += xv[(o * s.extent + e) * s.inner + i];
    return Tensor::from_op("sum_axis", std::move(shape), std::move(out), {x},
                           [s](const detail::Node&, std::span<const double> g, detail::GradSink& sink) {
                               auto gx = sink.parent_grad(0);
                               for (std::size_t o = 0; o < s.outer; ++o)
                                   for (std::size_t e = 0; e < s.extent; ++e)
                                       for (std::size_t i = 0; i < s.inner; ++i)
                                           gx[(o * s.extent + e) * s.inner + i] += g[o * s.inner + i];
                           });
}

Tensor mean(const Tensor& x, std::size_t axis) {
    require_axis(x, axis, "mean");
    if (x.dim(axis) == 0) throw ShapeError("mean: empty axis");
    return sum(x, axis) * (1.0 / static_cast<double>(x.dim(axis)));
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no tensors");
    const Shape& first = parts.front().shape();
    require_axis(parts.front(), axis, "concat");
    Shape shape = first;
    shape[axis] = 0;
    std::vector<std::size_t> extents;
    for (const auto& p : parts) {
        Shape probe = p.shape();
        if (probe.size() != first.size()) throw ShapeError("concat: rank mismatch");
        probe[axis] = first[axis];
        if (probe != first) {
            throw ShapeError("concat: shape " + shape_string(p.shape()) + " incompatible with " + shape_string(first));
        }
        extents.push_back(p.dim(axis));
        shape[axis] += p.dim(axis);
    }
    const auto s = split_axis(shape, axis);
    std::vector<double> out(shape_size(shape));
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto pv = parts[k].values();
        const std::size_t ext = extents[k];
        for (std::size_t o = 0; o < s.outer; ++o)
            std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * ext * s.inner), ext * s.inner,
                        out.begin() + static_cast<std::ptrdiff_t>((o * s.extent + offset) * s.inner));
        offset += ext;
    }
    return Tensor::from_op("concat", std::move(shape), std::move(out), parts,
                           [s, extents](const detail::Node&, std::span<const double> g, detail::GradSink& sink) {
                               std::size_t off = 0;
                               for (std::size_t k = 0; k < extents.size(); ++k) {
                                   const std::size_t ext = extents[k];
                                   if (auto gp = sink.parent_grad(k); !gp.empty()) {
                                       for (std::size_t o = 0; o < s.outer; ++o)
                                           for (std::size_t j = 0; j < ext * s.inner; ++j)
                                               gp[o * ext * s.inner + j] += g[(o * s.extent + off) * s.inner + j];
                                   }
                                   off += ext;
                               }
                           });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
    require_axis(x, axis, "slice");
    if (begin > end || end > x.dim(axis)) {
        throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) + ") invalid for " +
                         shape_string(x.shape()));
    }
    const auto s = split_axis(x.shape(), axis);
    Shape shape = x.shape();
    shape[axis] = end - begin;
    const std::size_t len = (end - begin) * s.inner;
    std::vector<double> out(s.outer * len);
    const auto xv = x.values();
    for (std::size_t o = 0; o < s.outer; ++o)
        std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((o * s.extent + begin) * s.inner), len,
                    out.begin() + static_cast<std::ptrdiff_t>(o * len));
    return Tensor::from_op("slice", std::move(shape), std::move(out), {x},
                           [s, begin, len](const detail::Node&, std::span<const double> g, detail::GradSink& sink) {
                               auto gx = sink.parent_grad(0);
                               for (std::size_t o = 0; o < s.outer; ++o)
                                   for (std::size_t j = 0; j < len; ++j)
                                       gx[(o * s.extent + begin) * s.inner + j] += g[o * len + j];
                           });
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_size(shape) != x.size()) {
        throw ShapeError("reshape: " + shape_string(x.shape()) + " to " + shape_string(shape));
    }
    return Tensor::from_op("reshape", std::move(shape), x.to_vector(), {x},
                           [](const detail::Node&, std::span<const double> g, detail::GradSink& sink) {
                               auto gx = sink.parent_grad(0);
                               for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                           });
}

Tensor row(const Tensor& x, std::size_t i) {
    if (x.rank() != 2) throw ShapeError("row: needs a matrix, got " + shape_string(x.shape()));
    return reshape(slice(x, 0, i, i + 1), {x.dim(1)});
}

Tensor standard_normal(const Shape& shape, Rng& rng) {
    std::vector<double> eps(shape_size(shape));
    for (double& e : eps) e = rng.normal();
    return Tensor::constant(shape, std::move(eps));
}

Tensor gaussian_sample(const Shape& shape, const Tensor& mean, const Tensor& std, Rng& rng, StdPolicy policy) {
    if (policy == StdPolicy::strictly_positive) {
        require_all(std, "gaussian_sample", [](double v) { return v > 0.0; }, "std must be positive");
    } else {
        require_all(std, "gaussian_sample", [](double v) { return v >= 0.0; }, "std must be non-negative");
    }
    const Tensor eps = standard_normal(shape, rng);
    Tensor out = add(mean, mul(std, eps));
    if (out.shape() != shape) {
        throw ShapeError("gaussian_sample: parameters " + shape_string(mean.shape()) + "/" + shape_string(std.shape()) +
                         " do not broadcast to " + shape_string(shape));
    }
    return out;
}

}  // namespace kivi
