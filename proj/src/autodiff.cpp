#include "mc3d/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <limits>
#include <unordered_set>

namespace mc3d {

namespace {

std::atomic<uint64_t> g_seq{1};

Var make_node(const char* op, Tensor value, std::vector<Var> parents,
              std::function<void(Node&)> backward_fn) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->op = op;
    n->seq = g_seq.fetch_add(1, std::memory_order_relaxed);
    n->parents.reserve(parents.size());
    for (auto& p : parents) {
        n->requires_grad = n->requires_grad || p.requires_grad();
        n->parents.push_back(p.node());
    }
    if (n->requires_grad) n->backward_fn = std::move(backward_fn);
    return Var(std::move(n));
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
    if (a.dtype() != b.dtype())
        throw ShapeError(std::string(op) + ": dtype mismatch " + dtype_name(a.dtype()) + " vs " +
                         dtype_name(b.dtype()));
}

template <class T>
void accumulate(Tensor& dst, const Tensor& src, T scale = T(1)) {
    auto d = dst.data<T>();
    auto s = src.data<T>();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += scale * s[i];
}

}  // namespace

Tensor& Node::grad_buffer() {
    if (!grad.defined()) grad = Tensor::zeros(value.shape(), value.dtype());
    return grad;
}

Var Var::leaf(Tensor value, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    n->seq = g_seq.fetch_add(1, std::memory_order_relaxed);
    return Var(std::move(n));
}

void Var::zero_grad() {
    if (node_ && node_->grad.defined())
        std::memset(node_->grad.raw(), 0, node_->grad.nbytes());
}

// ---------------------------------------------------------------------------
// elementwise

namespace {

template <class T, class FwdFn>
Tensor ew_binary(const Tensor& a, const Tensor& b, FwdFn fn) {
    Tensor out(a.shape(), a.dtype());
    auto av = a.data<T>();
    auto bv = b.data<T>();
    auto ov = out.data<T>();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = fn(av[i], bv[i]);
    return out;
}

}  // namespace

Var add(Var a, Var b) {
    check_same_shape("add", a.value(), b.value());
    Tensor out = dispatch_float(a.value().dtype(), [&]<class T>(T) {
        return ew_binary<T>(a.value(), b.value(), [](T x, T y) { return x + y; });
    });
    return make_node("add", std::move(out), {a, b}, [](Node& self) {
        dispatch_float(self.value.dtype(), [&]<class T>(T) {
            if (self.parents[0]->requires_grad) accumulate<T>(self.parents[0]->grad_buffer(), self.grad);
            if (self.parents[1]->requires_grad) accumulate<T>(self.parents[1]->grad_buffer(), self.grad);
            return 0;
        });
    });
}

Var sub(Var a, Var b) {
    check_same_shape("sub", a.value(), b.value());
    Tensor out = dispatch_float(a.value().dtype(), [&]<class T>(T) {
        return ew_binary<T>(a.value(), b.value(), [](T x, T y) { return x - y; });
    });
    return make_node("sub", std::move(out), {a, b}, [](Node& self) {
        dispatch_float(self.value.dtype(), [&]<class T>(T) {
            if (self.parents[0]->requires_grad) accumulate<T>(self.parents[0]->grad_buffer(), self.grad);
            if (self.parents[1]->requires_grad)
                accumulate<T>(self.parents[1]->grad_buffer(), self.grad, T(-1));
            return 0;
        });
    });
}

Var mul(Var a, Var b) {
    check_same_shape("mul", a.value(), b.value());
    Tensor out = dispatch_float(a.value().dtype(), [&]<class T>(T) {
        return ew_binary<T>(a.value(), b.value(), [](T x, T y) { return x * y; });
    });
    return make_node("mul", std::move(out), {a, b}, [](Node& self) {
        dispatch_float(self.value.dtype(), [&]<class T>(T) {
            auto g = self.grad.data<T>();
            auto av = self.parents[0]->value.data<T>();
            auto bv = self.parents[1]->value.data<T>();
            if (self.parents[0]->requires_grad) {
                auto ga = self.parents[0]->grad_buffer().data<T>();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
            }
            if (self.parents[1]->requires_grad) {
                auto gb = self.parents[1]->grad_buffer().data<T>();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
            }
            return 0;
        });
    });
}

Var divide(Var a, Var b) {
    check_same_shape("div", a.value(), b.value());
    Tensor out = dispatch_float(a.value().dtype(), [&]<class T>(T) {
        return ew_binary<T>(a.value(), b.value(), [](T x, T y) { return x / y; });
    });
    return make_node("div", std::move(out), {a, b}, [](Node& self) {
        dispatch_float(self.value.dtype(), [&]<class T>(T) {
            auto g = self.grad.data<T>();
            auto av = self.parents[0]->value.data<T>();
            auto bv = self.parents[1]->value.data<T>();
            if (self.parents[0]->requires_grad) {
                auto ga = self.parents[0]->grad_buffer().data<T>();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / bv[i];
            }
            if (self.parents[1]->requires_grad) {
                auto gb = self.parents[1]->grad_buffer().data<T>();
                for (std::size_t i = 0; i < g.size(); ++i)
                    gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
            }
            return 0;
        });
    });
}

namespace {

template <class FwdFn, class BwdCoefFn>
Var ew_unary(const char* op, Var a, FwdFn fwd, BwdCoefFn bwd) {
    // bwd(x, y) returns dy/dx given input x and output y
    Tensor out = dispatch_float(a.value().dtype(), [&]<class T>(T) {
        Tensor o(a.value().shape(), a.value().dtype());
        auto av = a.value().data<T>();
        auto ov = o.data<T>();
        for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = T(fwd(double(av[i])));
        return o;
    });
    return make_node(op, std::move(out), {a}, [bwd](Node& self) {
        if (!self.parents[0]->requires_grad) return;
        dispatch_float(self.value.dtype(), [&]<class T>(T) {
            auto g = self.grad.data<T>();
            auto xv = self.parents[0]->value.data<T>();
            auto yv = self.value.data<T>();
            auto gx = self.parents[0]->grad_buffer().data<T>();
            for (std::size_t i = 0; i < g.size(); ++i)
                gx[i] += g[i] * T(bwd(double(xv[i]), double(yv[i])));
            return 0;
        });
    });
}

}  // namespace

Var add_scalar(Var a, double c) {
    return ew_unary("add_scalar", a, [c](double x) { return x + c; },
                    [](double, double) { return 1.0; });
}

Var mul_scalar(Var a, double c) {
    return ew_unary("mul_scalar", a, [c](double x) { return x * c; },
                    [c](double, double) { return c; });
}

Var rsub_scalar(double c, Var a) {
    return ew_unary("rsub_scalar", a, [c](double x) { return c - x; },
                    [](double, double) { return -1.0; });
}

Var neg(Var a) {
    return ew_unary("neg", a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Var relu(Var a) {
    return ew_unary("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
                    [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var sigmoid(Var a) {
    // output kept strictly inside (0,1) even where exp saturates
    Tensor out = dispatch_float(a.value().dtype(), [&]<class T>(T) {
        const T hi = std::nextafter(T(1), T(0));
        const T lo = std::numeric_limits<T>::min();
        Tensor o(a.value().shape(), a.value().dtype());
        auto av = a.value().data<T>();
        auto ov = o.data<T>();
        for (std::size_t i = 0; i < ov.size(); ++i) {
            double x = double(av[i]);
            double s = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                                : std::exp(x) / (1.0 + std::exp(x));
            ov[i] = std::min(hi, std::max(lo, T(s)));
        }
        return o;
    });
    return make_node("sigmoid", std::move(out), {a}, [](Node& self) {
        if (!self.parents[0]->requires_grad) return;
        dispatch_float(self.value.dtype(), [&]<class T>(T) {
            auto g = self.grad.data<T>();
            auto yv = self.value.data<T>();
            auto gx = self.parents[0]->grad_buffer().data<T>();
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * yv[i] * (T(1) - yv[i]);
            return 0;
        });
    });
}

Var log(Var a) {
    return ew_unary("log", a,
                    [](double x) { return std::log(std::max(x, kProbEps)); },
                    [](double x, double) { return x >= kProbEps ? 1.0 / x : 0.0; });
}

Var exp(Var a) {
    return ew_unary("exp", a, [](double x) { return std::exp(x); },
                    [](double, double y) { return y; });
}

Var clamp(Var a, double lo, double hi) {
    return ew_unary("clamp", a,
                    [lo, hi](double x) { return std::min(hi, std::max(lo, x)); },
                    [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// reductions

Var sum(Var a) {
    Tensor out = dispatch_float(a.value().dtype(), [&]<class T>(T) {
        auto av = a.value().data<T>();
        T acc = T(0);
        for (std::size_t i = 0; i < av.size(); ++i) acc += av[i];
        return Tensor::scalar(double(acc), a.value().dtype());
    });
    return make_node("sum", std::move(out), {a}, [](Node& self) {
        if (!self.parents[0]->requires_grad) return;
        dispatch_float(self.value.dtype(), [&]<class T>(T) {
            T g = self.grad.data<T>()[0];
            auto gx = self.parents[0]->grad_buffer().data<T>();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
            return 0;
        });
    });
}

Var mean(Var a) {
    const double inv_n = 1.0 / double(a.value().numel());
    Tensor out = dispatch_float(a.value().dtype(), [&]<class T>(T) {
        auto av = a.value().data<T>();
        T acc = T(0);
        for (std::size_t i = 0; i < av.size(); ++i) acc += av[i];
        return Tensor::scalar(double(acc) * inv_n, a.value().dtype());
    });
    return make_node("mean", std::move(out), {a}, [inv_n](Node& self) {
        if (!self.parents[0]->requires_grad) return;
        dispatch_float(self.value.dtype(), [&]<class T>(T) {
            T g = self.grad.data<T>()[0] * T(inv_n);
            auto gx = self.parents[0]->grad_buffer().data<T>();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
            return 0;
        });
    });
}

// ---------------------------------------------------------------------------
// structure

Var reshape(Var a, std::vector<int64_t> shape) {
    Tensor out(shape, a.value().dtype());
    if (out.numel() != a.value().numel())
        throw ShapeError("reshape: " + shape_string(a.value().shape()) + " -> " +
                         shape_string(shape) + " changes element count");
    std::memcpy(out.raw(), a.value().raw(), out.nbytes());
    return make_node("reshape", std::move(out), {a}, [](Node& self) {
        if (!self.parents[0]->requires_grad) return;
        dispatch_float(self.value.dtype(), [&]<class T>(T) {
            auto g = self.grad.data<T>();
            auto gx = self.parents[0]->grad_buffer().data<T>();
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            return 0;
        });
    });
}

Var transpose2d(Var a) {
    if (a.value().ndim() != 2)
        throw ShapeError("transpose2d: expected rank 2, got " + shape_string(a.value().shape()));
    const int64_t r = a.value().dim(0), c = a.value().dim(1);
    Tensor out = dispatch_float(a.value().dtype(), [&]<class T>(T) {
        Tensor o({c, r}, a.value().dtype());
        auto av = a.value().data<T>();
        auto ov = o.data<T>();
        for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < c; ++j) ov[j * r + i] = av[i * c + j];
        return o;
    });
    return make_node("transpose2d", std::move(out), {a}, [r, c](Node& self) {
        if (!self.parents[0]->requires_grad) return;
        dispatch_float(self.value.dtype(), [&]<class T>(T) {
            auto g = self.grad.data<T>();
            auto gx = self.parents[0]->grad_buffer().data<T>();
            for (int64_t j = 0; j < c; ++j)
                for (int64_t i = 0; i < r; ++i) gx[i * c + j] += g[j * r + i];
            return 0;
        });
    });
}

Var gather_rows(Var a, std::vector<int64_t> rows) {
    if (a.value().ndim() < 2)
        throw ShapeError("gather_rows: expected rank >= 2, got " +
                         shape_string(a.value().shape()));
    const int64_t r = a.value().dim(0);
    const int64_t row_size = a.value().numel() / r;
    for (int64_t idx : rows)
        if (idx < 0 || idx >= r)
            throw ShapeError("gather_rows: index " + std::to_string(idx) + " out of range [0," +
                             std::to_string(r) + ")");
    std::vector<int64_t> out_shape = a.value().shape();
    out_shape[0] = int64_t(rows.size());
    Tensor out = dispatch_float(a.value().dtype(), [&]<class T>(T) {
        Tensor o(out_shape, a.value().dtype());
        auto av = a.value().data<T>();
        auto ov = o.data<T>();
        for (std::size_t k = 0; k < rows.size(); ++k)
            std::memcpy(&ov[k * std::size_t(row_size)], &av[std::size_t(rows[k]) * std::size_t(row_size)],
                        std::size_t(row_size) * sizeof(T));
        return o;
    });
    auto rows_ptr = std::make_shared<std::vector<int64_t>>(std::move(rows));
    return make_node("gather_rows", std::move(out), {a}, [rows_ptr, row_size](Node& self) {
        if (!self.parents[0]->requires_grad) return;
        dispatch_float(self.value.dtype(), [&]<class T>(T) {
            auto g = self.grad.data<T>();
            auto gx = self.parents[0]->grad_buffer().data<T>();
            for (std::size_t k = 0; k < rows_ptr->size(); ++k) {
                T* dst = &gx[std::size_t((*rows_ptr)[k]) * std::size_t(row_size)];
                const T* src = &g[k * std::size_t(row_size)];
                for (int64_t i = 0; i < row_size; ++i) dst[i] += src[i];
            }
            return 0;
        });
    });
}

Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Tensor& first = parts[0].value();
    int64_t rows = 0;
    for (const Var& p : parts) {
        const Tensor& t = p.value();
        if (t.ndim() != first.ndim() || t.dtype() != first.dtype())
            throw ShapeError("concat: rank/dtype mismatch");
        for (std::size_t d = 1; d < t.ndim(); ++d)
            if (t.dim(d) != first.dim(d))
                throw ShapeError("concat: trailing shape mismatch " + shape_string(t.shape()) +
                                 " vs " + shape_string(first.shape()));
        rows += t.dim(0);
    }
    std::vector<int64_t> out_shape = first.shape();
    out_shape[0] = rows;
    Tensor out(out_shape, first.dtype());
    std::size_t off = 0;
    for (const Var& p : parts) {
        std::memcpy(out.raw() + off, p.value().raw(), p.value().nbytes());
        off += p.value().nbytes();
    }
    std::vector<Var> parents(parts.begin(), parts.end());
    return make_node("concat", std::move(out), std::move(parents), [](Node& self) {
        dispatch_float(self.value.dtype(), [&]<class T>(T) {
            auto g = self.grad.data<T>();
            std::size_t off = 0;
            for (auto& p : self.parents) {
                std::size_t n = std::size_t(p->value.numel());
                if (p->requires_grad) {
                    auto gx = p->grad_buffer().data<T>();
                    for (std::size_t i = 0; i < n; ++i) gx[i] += g[off + i];
                }
                off += n;
            }
            return 0;
        });
    });
}

Var slice_rows(Var a, int64_t lo, int64_t hi) {
    const Tensor& t = a.value();
    if (lo < 0 || hi > t.dim(0) || lo >= hi)
        throw ShapeError("slice: range [" + std::to_string(lo) + "," + std::to_string(hi) +
                         ") invalid for " + shape_string(t.shape()));
    const int64_t row_size = t.numel() / t.dim(0);
    std::vector<int64_t> out_shape = t.shape();
    out_shape[0] = hi - lo;
    Tensor out(out_shape, t.dtype());
    std::memcpy(out.raw(), t.raw() + std::size_t(lo * row_size) * dtype_size(t.dtype()),
                out.nbytes());
    return make_node("slice", std::move(out), {a}, [lo, row_size](Node& self) {
        if (!self.parents[0]->requires_grad) return;
        dispatch_float(self.value.dtype(), [&]<class T>(T) {
            auto g = self.grad.data<T>();
            auto gx = self.parents[0]->grad_buffer().data<T>();
            std::size_t base = std::size_t(lo * row_size);
            for (std::size_t i = 0; i < g.size(); ++i) gx[base + i] += g[i];
            return 0;
        });
    });
}

// ---------------------------------------------------------------------------
// linear algebra and spatial ops

Var matmul(Var a, Var b) {
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    if (A.ndim() != 2 || B.ndim() != 2 || A.dim(1) != B.dim(0) || A.dtype() != B.dtype())
        throw ShapeError("matmul: incompatible " + shape_string(A.shape()) + " x " +
                         shape_string(B.shape()));
    const int64_t r = A.dim(0), k = A.dim(1), c = B.dim(1);
    Tensor out = dispatch_float(A.dtype(), [&]<class T>(T) {
        Tensor o({r, c}, A.dtype());
        auto av = A.data<T>();
        auto bv = B.data<T>();
        auto ov = o.data<T>();
        for (int64_t i = 0; i < r; ++i)
            for (int64_t kk = 0; kk < k; ++kk) {
                T aik = av[i * k + kk];
                for (int64_t j = 0; j < c; ++j) ov[i * c + j] += aik * bv[kk * c + j];
            }
        return o;
    });
    return make_node("matmul", std::move(out), {a, b}, [r, k, c](Node& self) {
        dispatch_float(self.value.dtype(), [&]<class T>(T) {
            auto g = self.grad.data<T>();
            auto av = self.parents[0]->value.data<T>();
            auto bv = self.parents[1]->value.data<T>();
            if (self.parents[0]->requires_grad) {
                auto ga = self.parents[0]->grad_buffer().data<T>();
                for (int64_t i = 0; i < r; ++i)
                    for (int64_t kk = 0; kk < k; ++kk) {
                        T acc = T(0);
                        for (int64_t j = 0; j < c; ++j) acc += g[i * c + j] * bv[kk * c + j];
                        ga[i * k + kk] += acc;
                    }
            }
            if (self.parents[1]->requires_grad) {
                auto gb = self.parents[1]->grad_buffer().data<T>();
                for (int64_t i = 0; i < r; ++i)
                    for (int64_t kk = 0; kk < k; ++kk) {
                        T aik = av[i * k + kk];
                        for (int64_t j = 0; j < c; ++j) gb[kk * c + j] += aik * g[i * c + j];
                    }
            }
            return 0;
        });
    });
}

namespace {

// Row-centric 3x3 path: accumulate one output row from one input row with the
// three taps fused, which keeps the inner loops unit-stride and FMA-friendly.
template <class T>
void conv3x3_acc_plane(const T* __restrict__ xc, const T* __restrict__ wk, T* __restrict__ yc,
                       int64_t h, int64_t wd) {
    for (int64_t oy = 0; oy < h; ++oy) {
        T* yr = yc + oy * wd;
        for (int64_t ky = 0; ky < 3; ++ky) {
            const int64_t iy = oy + ky - 1;
            if (iy < 0 || iy >= h) continue;
            const T* xr = xc + iy * wd;
            const T w0 = wk[ky * 3], w1 = wk[ky * 3 + 1], w2 = wk[ky * 3 + 2];
            yr[0] += w1 * xr[0] + w2 * xr[1];
            for (int64_t ox = 1; ox < wd - 1; ++ox)
                yr[ox] += w0 * xr[ox - 1] + w1 * xr[ox] + w2 * xr[ox + 1];
            yr[wd - 1] += w0 * xr[wd - 2] + w1 * xr[wd - 1];
        }
    }
}

template <class T>
void conv3x3_weight_grad(const T* __restrict__ xc, const T* __restrict__ gyc,
                         T* __restrict__ gwk, int64_t h, int64_t wd) {
    T acc[9] = {};
    for (int64_t oy = 0; oy < h; ++oy) {
        const T* gyr = gyc + oy * wd;
        for (int64_t ky = 0; ky < 3; ++ky) {
            const int64_t iy = oy + ky - 1;
            if (iy < 0 || iy >= h) continue;
            const T* xr = xc + iy * wd;
            T a0 = T(0), a1 = T(0), a2 = T(0);
            for (int64_t ox = 1; ox < wd - 1; ++ox) {
                const T g = gyr[ox];
                a0 += g * xr[ox - 1];
                a1 += g * xr[ox];
                a2 += g * xr[ox + 1];
            }
            a1 += gyr[0] * xr[0] + gyr[wd - 1] * xr[wd - 1];
            a0 += gyr[wd - 1] * xr[wd - 2];
            a2 += gyr[0] * xr[1];
            acc[ky * 3 + 0] += a0;
            acc[ky * 3 + 1] += a1;
            acc[ky * 3 + 2] += a2;
        }
    }
    for (int i = 0; i < 9; ++i) gwk[i] += acc[i];
}

template <class T>
void conv2d_fwd(const T* __restrict__ x, const T* __restrict__ w, const T* __restrict__ b,
                T* __restrict__ y, int64_t cin, int64_t h, int64_t wd, int64_t cout, int64_t kh,
                int64_t kw) {
    const int64_t ph = (kh - 1) / 2, pw = (kw - 1) / 2;
    const int64_t plane = h * wd;
    for (int64_t oc = 0; oc < cout; ++oc) {
        T* yc = y + oc * plane;
        std::fill(yc, yc + plane, b[oc]);
        for (int64_t ic = 0; ic < cin; ++ic) {
            const T* xc = x + ic * plane;
            const T* wk = w + (oc * cin + ic) * kh * kw;
            if (kh == 3 && kw == 3 && wd >= 2) {
                conv3x3_acc_plane(xc, wk, yc, h, wd);
            } else if (kh == 1 && kw == 1) {
                const T wv = wk[0];
                for (int64_t i = 0; i < plane; ++i) yc[i] += wv * xc[i];
            } else {
                for (int64_t ky = 0; ky < kh; ++ky)
                    for (int64_t kx = 0; kx < kw; ++kx) {
                        const T wv = wk[ky * kw + kx];
                        const int64_t oy0 = std::max<int64_t>(0, ph - ky);
                        const int64_t oy1 = std::min<int64_t>(h, h + ph - ky);
                        const int64_t ox0 = std::max<int64_t>(0, pw - kx);
                        const int64_t ox1 = std::min<int64_t>(wd, wd + pw - kx);
                        for (int64_t oy = oy0; oy < oy1; ++oy) {
                            const T* xr = xc + (oy + ky - ph) * wd + (kx - pw);
                            T* yr = yc + oy * wd;
                            for (int64_t ox = ox0; ox < ox1; ++ox) yr[ox] += wv * xr[ox];
                        }
                    }
            }
        }
    }
}

template <class T>
void conv2d_bwd(const T* __restrict__ x, const T* __restrict__ w, const T* __restrict__ gy,
                T* __restrict__ gx, T* __restrict__ gw, T* __restrict__ gb, int64_t cin,
                int64_t h, int64_t wd, int64_t cout, int64_t kh, int64_t kw) {
    const int64_t ph = (kh - 1) / 2, pw = (kw - 1) / 2;
    const int64_t plane = h * wd;
    for (int64_t oc = 0; oc < cout; ++oc) {
        const T* gyc = gy + oc * plane;
        if (gb) {
            T acc = T(0);
            for (int64_t i = 0; i < plane; ++i) acc += gyc[i];
            gb[oc] += acc;
        }
        for (int64_t ic = 0; ic < cin; ++ic) {
            const T* xc = x + ic * plane;
            T* gxc = gx ? gx + ic * plane : nullptr;
            const T* wk = w + (oc * cin + ic) * kh * kw;
            T* gwk = gw ? gw + (oc * cin + ic) * kh * kw : nullptr;
            if (kh == 3 && kw == 3 && wd >= 2) {
                if (gxc) {
                    // input grad is the correlation of gy with the flipped kernel
                    const T wf[9] = {wk[8], wk[7], wk[6], wk[5], wk[4],
                                     wk[3], wk[2], wk[1], wk[0]};
                    conv3x3_acc_plane(gyc, wf, gxc, h, wd);
                }
                if (gwk) conv3x3_weight_grad(xc, gyc, gwk, h, wd);
            } else if (kh == 1 && kw == 1) {
                if (gxc) {
                    const T wv = wk[0];
                    for (int64_t i = 0; i < plane; ++i) gxc[i] += wv * gyc[i];
                }
                if (gwk) {
                    T acc = T(0);
                    for (int64_t i = 0; i < plane; ++i) acc += xc[i] * gyc[i];
                    gwk[0] += acc;
                }
            } else {
                for (int64_t ky = 0; ky < kh; ++ky)
                    for (int64_t kx = 0; kx < kw; ++kx) {
                        const int64_t oy0 = std::max<int64_t>(0, ph - ky);
                        const int64_t oy1 = std::min<int64_t>(h, h + ph - ky);
                        const int64_t ox0 = std::max<int64_t>(0, pw - kx);
                        const int64_t ox1 = std::min<int64_t>(wd, wd + pw - kx);
                        if (gxc) {
                            const T wv = wk[ky * kw + kx];
                            for (int64_t oy = oy0; oy < oy1; ++oy) {
                                T* gxr = gxc + (oy + ky - ph) * wd + (kx - pw);
                                const T* gyr = gyc + oy * wd;
                                for (int64_t ox = ox0; ox < ox1; ++ox) gxr[ox] += wv * gyr[ox];
                            }
                        }
                        if (gwk) {
                            T acc = T(0);
                            for (int64_t oy = oy0; oy < oy1; ++oy) {
                                const T* xr = xc + (oy + ky - ph) * wd + (kx - pw);
                                const T* gyr = gyc + oy * wd;
                                for (int64_t ox = ox0; ox < ox1; ++ox) acc += xr[ox] * gyr[ox];
                            }
                            gwk[ky * kw + kx] += acc;
                        }
                    }
            }
        }
    }
}

}  // namespace

Var conv2d(Var x, Var w, Var b) {
    const Tensor& X = x.value();
    const Tensor& W = w.value();
    const Tensor& B = b.value();
    if (X.ndim() != 3 || W.ndim() != 4 || B.ndim() != 1 || X.dim(0) != W.dim(1) ||
        B.dim(0) != W.dim(0))
        throw ShapeError("conv2d: incompatible input " + shape_string(X.shape()) + ", kernel " +
                         shape_string(W.shape()) + ", bias " + shape_string(B.shape()));
    if (W.dim(2) % 2 == 0 || W.dim(3) % 2 == 0)
        throw ShapeError("conv2d: kernel extents must be odd, got " + shape_string(W.shape()));
    if (X.dtype() != W.dtype() || X.dtype() != B.dtype())
        throw ShapeError("conv2d: dtype mismatch");
    const int64_t cin = X.dim(0), h = X.dim(1), wd = X.dim(2);
    const int64_t cout = W.dim(0), kh = W.dim(2), kw = W.dim(3);
    Tensor out = dispatch_float(X.dtype(), [&]<class T>(T) {
        Tensor o({cout, h, wd}, X.dtype());
        conv2d_fwd<T>(X.data<T>().data(), W.data<T>().data(), B.data<T>().data(),
                      o.data<T>().data(), cin, h, wd, cout, kh, kw);
        return o;
    });
    return make_node("conv2d", std::move(out), {x, w, b},
                     [cin, h, wd, cout, kh, kw](Node& self) {
        dispatch_float(self.value.dtype(), [&]<class T>(T) {
            Node* xn = self.parents[0].get();
            Node* wn = self.parents[1].get();
            Node* bn = self.parents[2].get();
            T* gx = xn->requires_grad ? xn->grad_buffer().data<T>().data() : nullptr;
            T* gw = wn->requires_grad ? wn->grad_buffer().data<T>().data() : nullptr;
            T* gb = bn->requires_grad ? bn->grad_buffer().data<T>().data() : nullptr;
            conv2d_bwd<T>(xn->value.data<T>().data(), wn->value.data<T>().data(),
                          self.grad.data<T>().data(), gx, gw, gb, cin, h, wd, cout, kh, kw);
            return 0;
        });
    });
}

Var upsample2x(Var x) {
    const Tensor& X = x.value();
    if (X.ndim() != 3)
        throw ShapeError("upsample2x: expected [C,H,W], got " + shape_string(X.shape()));
    const int64_t c = X.dim(0), h = X.dim(1), w = X.dim(2);
    Tensor out = dispatch_float(X.dtype(), [&]<class T>(T) {
        Tensor o({c, 2 * h, 2 * w}, X.dtype());
        auto xv = X.data<T>();
        auto ov = o.data<T>();
        for (int64_t ch = 0; ch < c; ++ch)
            for (int64_t y = 0; y < h; ++y) {
                const T* xr = &xv[(ch * h + y) * w];
                T* o0 = &ov[(ch * 2 * h + 2 * y) * 2 * w];
                T* o1 = o0 + 2 * w;
                for (int64_t xx = 0; xx < w; ++xx) {
                    o0[2 * xx] = o0[2 * xx + 1] = xr[xx];
                    o1[2 * xx] = o1[2 * xx + 1] = xr[xx];
                }
            }
        return o;
    });
    return make_node("upsample2x", std::move(out), {x}, [c, h, w](Node& self) {
        if (!self.parents[0]->requires_grad) return;
        dispatch_float(self.value.dtype(), [&]<class T>(T) {
            auto g = self.grad.data<T>();
            auto gx = self.parents[0]->grad_buffer().data<T>();
            for (int64_t ch = 0; ch < c; ++ch)
                for (int64_t y = 0; y < h; ++y) {
                    T* gxr = &gx[(ch * h + y) * w];
                    const T* g0 = &g[(ch * 2 * h + 2 * y) * 2 * w];
                    const T* g1 = g0 + 2 * w;
                    for (int64_t xx = 0; xx < w; ++xx)
                        gxr[xx] += g0[2 * xx] + g0[2 * xx + 1] + g1[2 * xx] + g1[2 * xx + 1];
                }
            return 0;
        });
    });
}

Var maxpool2x(Var x) {
    const Tensor& X = x.value();
    if (X.ndim() != 3)
        throw ShapeError("maxpool2x: expected [C,H,W], got " + shape_string(X.shape()));
    const int64_t c = X.dim(0), h = X.dim(1), w = X.dim(2);
    if (h % 2 || w % 2)
        throw ShapeError("maxpool2x: spatial extents must be even, got " +
                         shape_string(X.shape()));
    auto argmax = std::make_shared<std::vector<int64_t>>(std::size_t(c * (h / 2) * (w / 2)));
    Tensor out = dispatch_float(X.dtype(), [&]<class T>(T) {
        Tensor o({c, h / 2, w / 2}, X.dtype());
        auto xv = X.data<T>();
        auto ov = o.data<T>();
        int64_t oi = 0;
        for (int64_t ch = 0; ch < c; ++ch)
            for (int64_t y = 0; y < h; y += 2)
                for (int64_t xx = 0; xx < w; xx += 2) {
                    int64_t base = (ch * h + y) * w + xx;
                    int64_t cand[4] = {base, base + 1, base + w, base + w + 1};
                    int64_t best = cand[0];
                    for (int k = 1; k < 4; ++k)
                        if (xv[size_t(cand[k])] > xv[size_t(best)]) best = cand[k];
                    (*argmax)[size_t(oi)] = best;
                    ov[size_t(oi++)] = xv[size_t(best)];
                }
        return o;
    });
    return make_node("maxpool2x", std::move(out), {x}, [argmax](Node& self) {
        if (!self.parents[0]->requires_grad) return;
        dispatch_float(self.value.dtype(), [&]<class T>(T) {
            auto g = self.grad.data<T>();
            auto gx = self.parents[0]->grad_buffer().data<T>();
            for (std::size_t i = 0; i < g.size(); ++i) gx[size_t((*argmax)[i])] += g[i];
            return 0;
        });
    });
}

Var pairwise_distance(Var a, Var b) {
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    if (A.ndim() != 2 || B.ndim() != 2 || A.dim(1) != B.dim(1) || A.dtype() != B.dtype())
        throw ShapeError("pairwise_distance: incompatible " + shape_string(A.shape()) + " vs " +
                         shape_string(B.shape()));
    const int64_t p = A.dim(0), q = B.dim(0), e = A.dim(1);
    Tensor out = dispatch_float(A.dtype(), [&]<class T>(T) {
        Tensor o({p, q}, A.dtype());
        auto av = A.data<T>();
        auto bv = B.data<T>();
        auto ov = o.data<T>();
        for (int64_t i = 0; i < p; ++i)
            for (int64_t j = 0; j < q; ++j) {
                double acc = 0.0;
                const T* ar = &av[i * e];
                const T* br = &bv[j * e];
                for (int64_t k = 0; k < e; ++k) {
                    double d = double(ar[k]) - double(br[k]);
                    acc += d * d;
                }
                ov[i * q + j] = T(std::sqrt(acc));
            }
        return o;
    });
    return make_node("pairwise_distance", std::move(out), {a, b}, [p, q, e](Node& self) {
        dispatch_float(self.value.dtype(), [&]<class T>(T) {
            auto g = self.grad.data<T>();
            auto dv = self.value.data<T>();
            Node* an = self.parents[0].get();
            Node* bn = self.parents[1].get();
            auto av = an->value.data<T>();
            auto bv = bn->value.data<T>();
            T* ga = an->requires_grad ? an->grad_buffer().data<T>().data() : nullptr;
            T* gb = bn->requires_grad ? bn->grad_buffer().data<T>().data() : nullptr;
            if (!ga && !gb) return 0;
            for (int64_t i = 0; i < p; ++i)
                for (int64_t j = 0; j < q; ++j) {
                    T d = dv[i * q + j];
                    T gij = g[i * q + j];
                    if (d <= T(0) || gij == T(0)) continue;  // zero-distance pairs carry no grad
                    T coef = gij / d;
                    const T* ar = &av[i * e];
                    const T* br = &bv[j * e];
                    for (int64_t k = 0; k < e; ++k) {
                        T diff = coef * (ar[k] - br[k]);
                        if (ga) ga[i * e + k] += diff;
                        if (gb) gb[j * e + k] -= diff;
                    }
                }
            return 0;
        });
    });
}

// ---------------------------------------------------------------------------
// backward & gradient checking

void backward(const Var& root) {
    if (!root.defined()) throw ShapeError("backward: undefined root");
    if (root.value().numel() != 1)
        throw ShapeError("backward: root must be scalar, got " +
                         shape_string(root.value().shape()));
    if (!root.requires_grad()) return;

    // collect the reachable differentiable subgraph
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{root.node().get()};
    seen.insert(root.node().get());
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (const NodePtr& p : n->parents)
            if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
    // nodes are created inputs-first, so descending seq is a valid reverse
    // topological order; it is also the fixed accumulation order
    std::sort(order.begin(), order.end(),
              [](const Node* a, const Node* b) { return a->seq > b->seq; });

    Tensor& rg = root.node()->grad_buffer();
    rg.set(0, rg.at(0) + 1.0);
    for (Node* n : order)
        if (n->backward_fn) n->backward_fn(*n);
}

GradCheckReport grad_check(const std::function<Var(Var)>& f, const Tensor& point, double step,
                           double tolerance) {
    if (point.dtype() != Dtype::F64)
        throw ConfigError("grad_check: point must be f64 (checks are defined at 64-bit only)");

    Var x = Var::leaf(point, true);
    Var y = f(x);
    if (y.value().numel() != 1)
        throw ShapeError("grad_check: function must return a scalar");
    if (!y.value().all_finite()) throw NumericError("grad_check: non-finite function value");
    backward(y);
    Tensor analytic = x.grad();

    GradCheckReport rep;
    rep.tolerance = tolerance;
    rep.rel_err.resize(std::size_t(point.numel()));
    for (int64_t i = 0; i < point.numel(); ++i) {
        Tensor pp = point;
        pp.set(i, point.at(i) + step);
        double fp = f(Var::leaf(pp, false)).value().at(0);
        pp.set(i, point.at(i) - step);
        double fm = f(Var::leaf(pp, false)).value().at(0);
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw NumericError("grad_check: non-finite value at perturbed point");
        double numeric = (fp - fm) / (2.0 * step);
        double a = analytic.at(i);
        double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1.0});
        rep.rel_err[std::size_t(i)] = rel;
        if (rel > rep.max_rel_err) {
            rep.max_rel_err = rel;
            rep.worst_index = i;
        }
    }
    rep.pass = rep.max_rel_err <= tolerance;
    return rep;
}

}  // namespace mc3d
