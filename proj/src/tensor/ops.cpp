#include <algorithm>
#include <cmath>
#include <numbers>

#include "otok/tensor.hpp"

namespace otok::ops {

namespace {

using detail::BackwardFn;
using detail::Node;
using Index = std::int64_t;

// Wraps freshly computed values into a node, validating them and recording
// the adjoint rule when any input participates in differentiation.
Tensor make_result_n(std::string_view kind, Shape shape, std::vector<Real> values,
                     const std::vector<Tensor>& inputs, BackwardFn rule) {
    for (Real v : values) {
        if (!std::isfinite(v)) {
            throw NumericFault("numeric fault in " + std::string(kind) + ": non-finite output");
        }
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->kind = kind;
    bool needs = false;
    if (grad_enabled()) {
        for (const auto& t : inputs) {
            needs = needs || t.requires_grad();
        }
    }
    if (needs) {
        node->requires_grad = true;
        for (const auto& t : inputs) {
            node->inputs.push_back(t.node());
        }
        node->backward = std::move(rule);
    }
    return Tensor::from_node(std::move(node));
}

Tensor make_result(std::string_view kind, Shape shape, std::vector<Real> values,
                   std::initializer_list<Tensor> inputs, BackwardFn rule) {
    return make_result_n(kind, std::move(shape), std::move(values), std::vector<Tensor>(inputs), std::move(rule));
}

[[noreturn]] void shape_fail(std::string_view kind, const Shape& a, const Shape& b) {
    throw ShapeError(std::string(kind) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

Index norm_axis(std::string_view kind, Index axis, Index rank) {
    const Index a = axis < 0 ? axis + rank : axis;
    if (a < 0 || a >= rank) {
        throw ShapeError(std::string(kind) + ": axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(rank));
    }
    return a;
}

// [outer, n, inner] view around one axis.
struct AxisView {
    Index outer = 1;
    Index n = 1;
    Index inner = 1;
};

AxisView axis_view(const Shape& s, Index axis) {
    AxisView v;
    for (Index i = 0; i < axis; ++i) {
        v.outer *= s[static_cast<std::size_t>(i)];
    }
    v.n = s[static_cast<std::size_t>(axis)];
    for (Index i = axis + 1; i < static_cast<Index>(s.size()); ++i) {
        v.inner *= s[static_cast<std::size_t>(i)];
    }
    return v;
}

// Source index into `in` for every element of `out` under numpy broadcasting.
std::vector<Index> broadcast_map(const Shape& out, const Shape& in) {
    const Index n = shape_numel(out);
    std::vector<Index> map(static_cast<std::size_t>(n));
    const std::size_t r = out.size();
    const std::size_t off = r - in.size();
    std::vector<Index> stride(r, 0);
    Index acc = 1;
    for (std::size_t i = in.size(); i-- > 0;) {
        stride[i + off] = in[i] == 1 ? 0 : acc;
        acc *= in[i];
    }
    std::vector<Index> idx(r, 0);
    Index src = 0;
    for (Index k = 0; k < n; ++k) {
        map[static_cast<std::size_t>(k)] = src;
        for (std::size_t d = r; d-- > 0;) {
            ++idx[d];
            src += stride[d];
            if (idx[d] < out[d]) {
                break;
            }
            src -= stride[d] * idx[d];
            idx[d] = 0;
        }
    }
    return map;
}

enum class Layout { Same, Suffix, General };

struct Broadcast {
    Shape out;
    Layout la = Layout::Same;
    Layout lb = Layout::Same;
    std::shared_ptr<std::vector<Index>> ma;
    std::shared_ptr<std::vector<Index>> mb;

    Index a_index(Index k, Index na) const {
        switch (la) {
            case Layout::Same: return k;
            case Layout::Suffix: return k % na;
            default: return (*ma)[static_cast<std::size_t>(k)];
        }
    }
    Index b_index(Index k, Index nb) const {
        switch (lb) {
            case Layout::Same: return k;
            case Layout::Suffix: return k % nb;
            default: return (*mb)[static_cast<std::size_t>(k)];
        }
    }
};

bool is_suffix(const Shape& out, const Shape& in) {
    if (in.size() > out.size()) {
        return false;
    }
    const std::size_t off = out.size() - in.size();
    for (std::size_t i = 0; i < in.size(); ++i) {
        if (in[i] != out[i + off]) {
            return false;
        }
    }
    return true;
}

Broadcast broadcast(std::string_view kind, const Shape& a, const Shape& b) {
    Broadcast bc;
    const std::size_t r = std::max(a.size(), b.size());
    bc.out.assign(r, 1);
    for (std::size_t i = 0; i < r; ++i) {
        const Index da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        const Index db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (da != db && da != 1 && db != 1) {
            shape_fail(kind, a, b);
        }
        bc.out[i] = std::max(da, db);
    }
    auto classify = [&](const Shape& in, Layout& layout, std::shared_ptr<std::vector<Index>>& map) {
        if (in == bc.out) {
            layout = Layout::Same;
        } else if (is_suffix(bc.out, in)) {
            layout = Layout::Suffix;
        } else {
            layout = Layout::General;
            map = std::make_shared<std::vector<Index>>(broadcast_map(bc.out, in));
        }
    };
    classify(a, bc.la, bc.ma);
    classify(b, bc.lb, bc.mb);
    return bc;
}

template <typename Fn, typename DFn>
Tensor unary(std::string_view kind, const Tensor& a, Fn fn, DFn dfn) {
    const auto x = a.data();
    std::vector<Real> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        y[i] = fn(x[i]);
    }
    return make_result(kind, a.shape(), std::move(y), {a},
                       [dfn](const Node& self, std::span<const Real> g, std::span<std::vector<Real>* const> gin) {
                           const auto& x = self.inputs[0]->value;
                           auto& out = *gin[0];
                           for (std::size_t i = 0; i < x.size(); ++i) {
                               out[i] += g[i] * dfn(x[i], self.value[i]);
                           }
                       });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() < 2 || sb.size() < 2) {
        shape_fail("matmul", sa, sb);
    }
    const Index m = sa[sa.size() - 2];
    const Index k = sa.back();
    const Index kb = sb[sb.size() - 2];
    const Index n = sb.back();
    if (k != kb) {
        shape_fail("matmul", sa, sb);
    }
    Index batch = 1;
    Index rows = m;
    bool shared_b = sb.size() == 2;
    if (shared_b) {
        rows = shape_numel(sa) / k;
    } else {
        if (sa.size() != sb.size() || !std::equal(sa.begin(), sa.end() - 2, sb.begin())) {
            shape_fail("matmul", sa, sb);
        }
        batch = shape_numel(sa) / (m * k);
    }
    Shape out_shape = sa;
    out_shape.back() = n;

    const auto A = a.data();
    const auto B = b.data();
    std::vector<Real> C(static_cast<std::size_t>(batch * rows * n));
    std::vector<Real> acc(static_cast<std::size_t>(n));
    for (Index bi = 0; bi < batch; ++bi) {
        const Real* pa = A.data() + bi * rows * k;
        const Real* pb = B.data() + (shared_b ? 0 : bi * k * n);
        Real* pc = C.data() + bi * rows * n;
        for (Index i = 0; i < rows; ++i) {
            std::fill(acc.begin(), acc.end(), 0.0);
            for (Index p = 0; p < k; ++p) {
                const Real av = pa[i * k + p];
                const Real* brow = pb + p * n;
                for (Index j = 0; j < n; ++j) {
                    acc[static_cast<std::size_t>(j)] += av * brow[j];
                }
            }
            std::copy(acc.begin(), acc.end(), pc + i * n);
        }
    }
    return make_result(
        "matmul", std::move(out_shape), std::move(C), {a, b},
        [batch, rows, k, n, shared_b](const Node& self, std::span<const Real> g, std::span<std::vector<Real>* const> gin) {
            const auto& A = self.inputs[0]->value;
            const auto& B = self.inputs[1]->value;
            if (gin[0]) {
                auto& gA = *gin[0];
                for (Index bi = 0; bi < batch; ++bi) {
                    const Real* pb = B.data() + (shared_b ? 0 : bi * k * n);
                    for (Index i = 0; i < rows; ++i) {
                        const Real* grow = g.data() + (bi * rows + i) * n;
                        Real* out = gA.data() + (bi * rows + i) * k;
                        for (Index p = 0; p < k; ++p) {
                            const Real* brow = pb + p * n;
                            Real s = 0.0;
                            for (Index j = 0; j < n; ++j) {
                                s += grow[j] * brow[j];
                            }
                            out[p] += s;
                        }
                    }
                }
            }
            if (gin[1]) {
                auto& gB = *gin[1];
                for (Index bi = 0; bi < batch; ++bi) {
                    const Real* pa = A.data() + bi * rows * k;
                    Real* out = gB.data() + (shared_b ? 0 : bi * k * n);
                    for (Index i = 0; i < rows; ++i) {
                        const Real* grow = g.data() + (bi * rows + i) * n;
                        for (Index p = 0; p < k; ++p) {
                            const Real av = pa[i * k + p];
                            if (av == 0.0) {
                                continue;
                            }
                            Real* orow = out + p * n;
                            for (Index j = 0; j < n; ++j) {
                                orow[j] += av * grow[j];
                            }
                        }
                    }
                }
            }
        });
}

namespace {

enum class BinKind { Add, Sub, Mul };

Tensor binary(std::string_view kind, BinKind op, const Tensor& a, const Tensor& b) {
    auto bc = std::make_shared<Broadcast>(broadcast(kind, a.shape(), b.shape()));
    const auto A = a.data();
    const auto B = b.data();
    const Index n = shape_numel(bc->out);
    const Index na = static_cast<Index>(A.size());
    const Index nb = static_cast<Index>(B.size());
    std::vector<Real> y(static_cast<std::size_t>(n));
    for (Index k = 0; k < n; ++k) {
        const Real x1 = A[static_cast<std::size_t>(bc->a_index(k, na))];
        const Real x2 = B[static_cast<std::size_t>(bc->b_index(k, nb))];
        switch (op) {
            case BinKind::Add: y[static_cast<std::size_t>(k)] = x1 + x2; break;
            case BinKind::Sub: y[static_cast<std::size_t>(k)] = x1 - x2; break;
            case BinKind::Mul: y[static_cast<std::size_t>(k)] = x1 * x2; break;
        }
    }
    Shape out = bc->out;
    return make_result(kind, std::move(out), std::move(y), {a, b},
                       [bc, op, n, na, nb](const Node& self, std::span<const Real> g,
                                           std::span<std::vector<Real>* const> gin) {
                           const auto& A = self.inputs[0]->value;
                           const auto& B = self.inputs[1]->value;
                           for (Index k = 0; k < n; ++k) {
                               const auto ia = static_cast<std::size_t>(bc->a_index(k, na));
                               const auto ib = static_cast<std::size_t>(bc->b_index(k, nb));
                               const Real gk = g[static_cast<std::size_t>(k)];
                               switch (op) {
                                   case BinKind::Add:
                                       if (gin[0]) (*gin[0])[ia] += gk;
                                       if (gin[1]) (*gin[1])[ib] += gk;
                                       break;
                                   case BinKind::Sub:
                                       if (gin[0]) (*gin[0])[ia] += gk;
                                       if (gin[1]) (*gin[1])[ib] -= gk;
                                       break;
                                   case BinKind::Mul:
                                       if (gin[0]) (*gin[0])[ia] += gk * B[ib];
                                       if (gin[1]) (*gin[1])[ib] += gk * A[ia];
                                       break;
                               }
                           }
                       });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary("add", BinKind::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary("sub", BinKind::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary("mul", BinKind::Mul, a, b); }

Tensor scale(const Tensor& a, Real factor) {
    return unary(
        "scale", a, [factor](Real x) { return x * factor; }, [factor](Real, Real) { return factor; });
}

Tensor add_scalar(const Tensor& a, Real offset) {
    return unary(
        "add_scalar", a, [offset](Real x) { return x + offset; }, [](Real, Real) { return 1.0; });
}

Tensor exp(const Tensor& a) {
    return unary(
        "exp", a, [](Real x) { return std::exp(x); }, [](Real, Real y) { return y; });
}

Tensor log(const Tensor& a) {
    for (Real v : a.data()) {
        if (!(v > 0.0)) {
            throw NumericFault("numeric fault in log: non-positive input");
        }
    }
    return unary(
        "log", a, [](Real x) { return std::log(x); }, [](Real x, Real) { return 1.0 / x; });
}

Tensor square(const Tensor& a) {
    return unary(
        "square", a, [](Real x) { return x * x; }, [](Real x, Real) { return 2.0 * x; });
}

Tensor clamp(const Tensor& a, Real lo, Real hi) {
    return unary(
        "clamp", a, [lo, hi](Real x) { return std::clamp(x, lo, hi); },
        [lo, hi](Real x, Real) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Tensor straight_through(const Tensor& value, const Tensor& surrogate) {
    if (value.shape() != surrogate.shape()) {
        shape_fail("straight_through", value.shape(), surrogate.shape());
    }
    const auto x = value.data();
    return make_result("straight_through", value.shape(), std::vector<Real>(x.begin(), x.end()), {surrogate},
                       [](const Node&, std::span<const Real> g, std::span<std::vector<Real>* const> gin) {
                           auto& out = *gin[0];
                           for (std::size_t i = 0; i < g.size(); ++i) {
                               out[i] += g[i];
                           }
                       });
}

Tensor gelu(const Tensor& a) {
    constexpr Real inv_sqrt2 = 0.70710678118654752440;
    const Real inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    return unary(
        "gelu", a, [](Real x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
        [inv_sqrt_2pi](Real x, Real) {
            const Real cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
            return cdf + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
        });
}

Tensor softmax(const Tensor& a, std::int64_t axis) {
    const Index ax = norm_axis("softmax", axis, a.rank());
    const AxisView v = axis_view(a.shape(), ax);
    const auto x = a.data();
    std::vector<Real> y(x.size());
    for (Index o = 0; o < v.outer; ++o) {
        for (Index in = 0; in < v.inner; ++in) {
            const Index base = o * v.n * v.inner + in;
            Real mx = x[static_cast<std::size_t>(base)];
            for (Index j = 1; j < v.n; ++j) {
                mx = std::max(mx, x[static_cast<std::size_t>(base + j * v.inner)]);
            }
            Real sum = 0.0;
            for (Index j = 0; j < v.n; ++j) {
                const auto p = static_cast<std::size_t>(base + j * v.inner);
                y[p] = std::exp(x[p] - mx);
                sum += y[p];
            }
            for (Index j = 0; j < v.n; ++j) {
                y[static_cast<std::size_t>(base + j * v.inner)] /= sum;
            }
        }
    }
    return make_result("softmax", a.shape(), std::move(y), {a},
                       [v](const Node& self, std::span<const Real> g, std::span<std::vector<Real>* const> gin) {
                           const auto& y = self.value;
                           auto& out = *gin[0];
                           for (Index o = 0; o < v.outer; ++o) {
                               for (Index in = 0; in < v.inner; ++in) {
                                   const Index base = o * v.n * v.inner + in;
                                   Real dot = 0.0;
                                   for (Index j = 0; j < v.n; ++j) {
                                       const auto p = static_cast<std::size_t>(base + j * v.inner);
                                       dot += g[p] * y[p];
                                   }
                                   for (Index j = 0; j < v.n; ++j) {
                                       const auto p = static_cast<std::size_t>(base + j * v.inner);
                                       out[p] += y[p] * (g[p] - dot);
                                   }
                               }
                           }
                       });
}

Tensor log_softmax(const Tensor& a, std::int64_t axis) {
    const Index ax = norm_axis("log_softmax", axis, a.rank());
    const AxisView v = axis_view(a.shape(), ax);
    const auto x = a.data();
    std::vector<Real> y(x.size());
    for (Index o = 0; o < v.outer; ++o) {
        for (Index in = 0; in < v.inner; ++in) {
            const Index base = o * v.n * v.inner + in;
            Real mx = x[static_cast<std::size_t>(base)];
            for (Index j = 1; j < v.n; ++j) {
                mx = std::max(mx, x[static_cast<std::size_t>(base + j * v.inner)]);
            }
            Real sum = 0.0;
            for (Index j = 0; j < v.n; ++j) {
                sum += std::exp(x[static_cast<std::size_t>(base + j * v.inner)] - mx);
            }
            const Real lse = mx + std::log(sum);
            for (Index j = 0; j < v.n; ++j) {
                const auto p = static_cast<std::size_t>(base + j * v.inner);
                y[p] = x[p] - lse;
            }
        }
    }
    return make_result("log_softmax", a.shape(), std::move(y), {a},
                       [v](const Node& self, std::span<const Real> g, std::span<std::vector<Real>* const> gin) {
                           const auto& y = self.value;
                           auto& out = *gin[0];
                           for (Index o = 0; o < v.outer; ++o) {
                               for (Index in = 0; in < v.inner; ++in) {
                                   const Index base = o * v.n * v.inner + in;
                                   Real gsum = 0.0;
                                   for (Index j = 0; j < v.n; ++j) {
                                       gsum += g[static_cast<std::size_t>(base + j * v.inner)];
                                   }
                                   for (Index j = 0; j < v.n; ++j) {
                                       const auto p = static_cast<std::size_t>(base + j * v.inner);
                                       out[p] += g[p] - std::exp(y[p]) * gsum;
                                   }
                               }
                           }
                       });
}

Tensor layer_norm(const Tensor& a, std::int64_t axis, Real eps) {
    const Index ax = norm_axis("layer_norm", axis, a.rank());
    const AxisView v = axis_view(a.shape(), ax);
    const auto x = a.data();
    std::vector<Real> y(x.size());
    auto inv_std = std::make_shared<std::vector<Real>>(static_cast<std::size_t>(v.outer * v.inner));
    for (Index o = 0; o < v.outer; ++o) {
        for (Index in = 0; in < v.inner; ++in) {
            const Index base = o * v.n * v.inner + in;
            Real mean = 0.0;
            for (Index j = 0; j < v.n; ++j) {
                mean += x[static_cast<std::size_t>(base + j * v.inner)];
            }
            mean /= static_cast<Real>(v.n);
            Real var = 0.0;
            for (Index j = 0; j < v.n; ++j) {
                const Real d = x[static_cast<std::size_t>(base + j * v.inner)] - mean;
                var += d * d;
            }
            var /= static_cast<Real>(v.n);
            const Real is = 1.0 / std::sqrt(var + eps);
            (*inv_std)[static_cast<std::size_t>(o * v.inner + in)] = is;
            for (Index j = 0; j < v.n; ++j) {
                const auto p = static_cast<std::size_t>(base + j * v.inner);
                y[p] = (x[p] - mean) * is;
            }
        }
    }
    return make_result("layer_norm", a.shape(), std::move(y), {a},
                       [v, inv_std](const Node& self, std::span<const Real> g,
                                    std::span<std::vector<Real>* const> gin) {
                           const auto& y = self.value;
                           auto& out = *gin[0];
                           const Real nn = static_cast<Real>(v.n);
                           for (Index o = 0; o < v.outer; ++o) {
                               for (Index in = 0; in < v.inner; ++in) {
                                   const Index base = o * v.n * v.inner + in;
                                   Real gmean = 0.0;
                                   Real gy = 0.0;
                                   for (Index j = 0; j < v.n; ++j) {
                                       const auto p = static_cast<std::size_t>(base + j * v.inner);
                                       gmean += g[p];
                                       gy += g[p] * y[p];
                                   }
                                   gmean /= nn;
                                   gy /= nn;
                                   const Real is = (*inv_std)[static_cast<std::size_t>(o * v.inner + in)];
                                   for (Index j = 0; j < v.n; ++j) {
                                       const auto p = static_cast<std::size_t>(base + j * v.inner);
                                       out[p] += is * (g[p] - gmean - y[p] * gy);
                                   }
                               }
                           }
                       });
}

Tensor l2_normalize(const Tensor& a, std::int64_t axis, Real eps) {
    const Index ax = norm_axis("l2_normalize", axis, a.rank());
    const AxisView v = axis_view(a.shape(), ax);
    const auto x = a.data();
    std::vector<Real> y(x.size());
    auto norms = std::make_shared<std::vector<Real>>(static_cast<std::size_t>(v.outer * v.inner));
    for (Index o = 0; o < v.outer; ++o) {
        for (Index in = 0; in < v.inner; ++in) {
            const Index base = o * v.n * v.inner + in;
            Real s = 0.0;
            for (Index j = 0; j < v.n; ++j) {
                const Real xv = x[static_cast<std::size_t>(base + j * v.inner)];
                s += xv * xv;
            }
            // Clamped norms (below eps) make the map linear: y = x / eps, marked by a negative entry.
            const Real raw = std::sqrt(s);
            const Real norm = std::max(raw, eps);
            (*norms)[static_cast<std::size_t>(o * v.inner + in)] = raw < eps ? -norm : norm;
            for (Index j = 0; j < v.n; ++j) {
                const auto p = static_cast<std::size_t>(base + j * v.inner);
                y[p] = x[p] / norm;
            }
        }
    }
    return make_result("l2_normalize", a.shape(), std::move(y), {a},
                       [v, norms](const Node& self, std::span<const Real> g,
                                  std::span<std::vector<Real>* const> gin) {
                           const auto& y = self.value;
                           auto& out = *gin[0];
                           for (Index o = 0; o < v.outer; ++o) {
                               for (Index in = 0; in < v.inner; ++in) {
                                   const Index base = o * v.n * v.inner + in;
                                   Real dot = 0.0;
                                   for (Index j = 0; j < v.n; ++j) {
                                       const auto p = static_cast<std::size_t>(base + j * v.inner);
                                       dot += g[p] * y[p];
                                   }
                                   const Real norm = (*norms)[static_cast<std::size_t>(o * v.inner + in)];
                                   const bool clamped = norm < 0.0;
                                   for (Index j = 0; j < v.n; ++j) {
                                       const auto p = static_cast<std::size_t>(base + j * v.inner);
                                       out[p] += clamped ? g[p] / -norm : (g[p] - y[p] * dot) / norm;
                                   }
                               }
                           }
                       });
}

Tensor reshape(const Tensor& a, Shape shape) {
    Index infer = -1;
    Index known = 1;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (shape[i] == -1) {
            if (infer >= 0) {
                throw ShapeError("reshape: more than one inferred dim in " + shape_str(shape));
            }
            infer = static_cast<Index>(i);
        } else {
            known *= shape[i];
        }
    }
    if (infer >= 0 && known > 0 && a.numel() % known == 0) {
        shape[static_cast<std::size_t>(infer)] = a.numel() / known;
    }
    if (shape_numel(shape) != a.numel() || std::any_of(shape.begin(), shape.end(), [](Index d) { return d <= 0; })) {
        shape_fail("reshape", a.shape(), shape);
    }
    const auto x = a.data();
    return make_result("reshape", std::move(shape), std::vector<Real>(x.begin(), x.end()), {a},
                       [](const Node&, std::span<const Real> g, std::span<std::vector<Real>* const> gin) {
                           auto& out = *gin[0];
                           for (std::size_t i = 0; i < g.size(); ++i) {
                               out[i] += g[i];
                           }
                       });
}

Tensor permute(const Tensor& a, const std::vector<std::int64_t>& perm) {
    const Shape& s = a.shape();
    const std::size_t r = s.size();
    if (perm.size() != r) {
        throw ShapeError("permute: permutation of length " + std::to_string(perm.size()) + " for shape " +
                         shape_str(s));
    }
    std::vector<bool> seen(r, false);
    for (auto p : perm) {
        if (p < 0 || p >= static_cast<Index>(r) || seen[static_cast<std::size_t>(p)]) {
            throw ShapeError("permute: invalid permutation for shape " + shape_str(s));
        }
        seen[static_cast<std::size_t>(p)] = true;
    }
    std::vector<Index> in_stride(r, 1);
    for (std::size_t i = r; i-- > 1;) {
        in_stride[i - 1] = in_stride[i] * s[i];
    }
    Shape out(r);
    std::vector<Index> stride(r);
    for (std::size_t i = 0; i < r; ++i) {
        out[i] = s[static_cast<std::size_t>(perm[i])];
        stride[i] = in_stride[static_cast<std::size_t>(perm[i])];
    }
    // src[k] = input flat index feeding output element k.
    const Index n = a.numel();
    auto src = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(n));
    std::vector<Index> idx(r, 0);
    Index pos = 0;
    for (Index k = 0; k < n; ++k) {
        (*src)[static_cast<std::size_t>(k)] = pos;
        for (std::size_t d = r; d-- > 0;) {
            ++idx[d];
            pos += stride[d];
            if (idx[d] < out[d]) {
                break;
            }
            pos -= stride[d] * idx[d];
            idx[d] = 0;
        }
    }
    const auto x = a.data();
    std::vector<Real> y(static_cast<std::size_t>(n));
    for (Index k = 0; k < n; ++k) {
        y[static_cast<std::size_t>(k)] = x[static_cast<std::size_t>((*src)[static_cast<std::size_t>(k)])];
    }
    return make_result("permute", std::move(out), std::move(y), {a},
                       [src](const Node&, std::span<const Real> g, std::span<std::vector<Real>* const> gin) {
                           auto& out = *gin[0];
                           for (std::size_t k = 0; k < g.size(); ++k) {
                               out[static_cast<std::size_t>((*src)[k])] += g[k];
                           }
                       });
}

Tensor transpose_last(const Tensor& a) {
    std::vector<std::int64_t> perm(static_cast<std::size_t>(a.rank()));
    for (std::size_t i = 0; i < perm.size(); ++i) {
        perm[i] = static_cast<Index>(i);
    }
    if (perm.size() < 2) {
        throw ShapeError("transpose_last needs rank >= 2, got " + shape_str(a.shape()));
    }
    std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
    return permute(a, perm);
}

Tensor concat(const std::vector<Tensor>& parts, std::int64_t axis) {
    if (parts.empty()) {
        throw ShapeError("concat of zero tensors");
    }
    const Shape& s0 = parts[0].shape();
    const Index ax = norm_axis("concat", axis, static_cast<Index>(s0.size()));
    Shape out = s0;
    out[static_cast<std::size_t>(ax)] = 0;
    std::vector<Index> widths;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        if (s.size() != s0.size()) {
            shape_fail("concat", s0, s);
        }
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (static_cast<Index>(i) != ax && s[i] != s0[i]) {
                shape_fail("concat", s0, s);
            }
        }
        widths.push_back(s[static_cast<std::size_t>(ax)]);
        out[static_cast<std::size_t>(ax)] += s[static_cast<std::size_t>(ax)];
    }
    const AxisView v = axis_view(out, ax);
    std::vector<Real> y(static_cast<std::size_t>(shape_numel(out)));
    Index offset = 0;
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
        const auto x = parts[pi].data();
        const Index w = widths[pi] * v.inner;
        for (Index o = 0; o < v.outer; ++o) {
            std::copy_n(x.begin() + o * w, w, y.begin() + o * v.n * v.inner + offset);
        }
        offset += w;
    }
    return make_result_n("concat", std::move(out), std::move(y), parts,
                         [v, widths](const Node&, std::span<const Real> g, std::span<std::vector<Real>* const> gin) {
                             Index offset = 0;
                             for (std::size_t pi = 0; pi < widths.size(); ++pi) {
                                 const Index w = widths[pi] * v.inner;
                                 if (gin[pi]) {
                                     auto& out = *gin[pi];
                                     for (Index o = 0; o < v.outer; ++o) {
                                         for (Index j = 0; j < w; ++j) {
                                             out[static_cast<std::size_t>(o * w + j)] +=
                                                 g[static_cast<std::size_t>(o * v.n * v.inner + offset + j)];
                                         }
                                     }
                                 }
                                 offset += w;
                             }
                         });
}

Tensor slice(const Tensor& a, std::int64_t axis, std::int64_t begin, std::int64_t end) {
    const Index ax = norm_axis("slice", axis, a.rank());
    const Shape& s = a.shape();
    const Index len = s[static_cast<std::size_t>(ax)];
    if (begin < 0 || end > len || begin >= end) {
        throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) + ") invalid for axis " +
                         std::to_string(ax) + " of shape " + shape_str(s));
    }
    const AxisView v = axis_view(s, ax);
    Shape out = s;
    out[static_cast<std::size_t>(ax)] = end - begin;
    const Index w = (end - begin) * v.inner;
    const auto x = a.data();
    std::vector<Real> y(static_cast<std::size_t>(v.outer * w));
    for (Index o = 0; o < v.outer; ++o) {
        std::copy_n(x.begin() + o * v.n * v.inner + begin * v.inner, w, y.begin() + o * w);
    }
    return make_result("slice", std::move(out), std::move(y), {a},
                       [v, w, begin](const Node&, std::span<const Real> g, std::span<std::vector<Real>* const> gin) {
                           auto& out = *gin[0];
                           for (Index o = 0; o < v.outer; ++o) {
                               for (Index j = 0; j < w; ++j) {
                                   out[static_cast<std::size_t>(o * v.n * v.inner + begin * v.inner + j)] +=
                                       g[static_cast<std::size_t>(o * w + j)];
                               }
                           }
                       });
}

Tensor gather_rows(const Tensor& table, std::span<const std::int64_t> rows) {
    if (table.rank() != 2) {
        throw ShapeError("gather_rows: table must be rank 2, got " + shape_str(table.shape()));
    }
    if (rows.empty()) {
        throw ShapeError("gather_rows: empty row list");
    }
    const Index nrows = table.dim(0);
    const Index width = table.dim(1);
    for (auto r : rows) {
        if (r < 0 || r >= nrows) {
            throw ShapeError("gather_rows: row " + std::to_string(r) + " out of range for table " +
                             shape_str(table.shape()));
        }
    }
    const auto x = table.data();
    std::vector<Real> y(rows.size() * static_cast<std::size_t>(width));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        std::copy_n(x.begin() + rows[i] * width, width, y.begin() + static_cast<Index>(i) * width);
    }
    auto idx = std::make_shared<std::vector<Index>>(rows.begin(), rows.end());
    return make_result("gather_rows", {static_cast<Index>(rows.size()), width}, std::move(y), {table},
                       [idx, width](const Node&, std::span<const Real> g, std::span<std::vector<Real>* const> gin) {
                           auto& out = *gin[0];
                           for (std::size_t i = 0; i < idx->size(); ++i) {
                               for (Index j = 0; j < width; ++j) {
                                   out[static_cast<std::size_t>((*idx)[i] * width + j)] +=
                                       g[i * static_cast<std::size_t>(width) + static_cast<std::size_t>(j)];
                               }
                           }
                       });
}

Tensor masked_fill(const Tensor& a, const std::vector<bool>& mask, const Shape& mask_shape, Real value) {
    if (!is_suffix(a.shape(), mask_shape) || static_cast<Index>(mask.size()) != shape_numel(mask_shape)) {
        shape_fail("masked_fill", a.shape(), mask_shape);
    }
    auto m = std::make_shared<std::vector<bool>>(mask);
    const Index nm = static_cast<Index>(mask.size());
    const auto x = a.data();
    std::vector<Real> y(x.begin(), x.end());
    for (std::size_t k = 0; k < y.size(); ++k) {
        if ((*m)[k % static_cast<std::size_t>(nm)]) {
            y[k] = value;
        }
    }
    return make_result("masked_fill", a.shape(), std::move(y), {a},
                       [m, nm](const Node&, std::span<const Real> g, std::span<std::vector<Real>* const> gin) {
                           auto& out = *gin[0];
                           for (std::size_t k = 0; k < g.size(); ++k) {
                               if (!(*m)[k % static_cast<std::size_t>(nm)]) {
                                   out[k] += g[k];
                               }
                           }
                       });
}

Tensor reduce_sum(const Tensor& a) {
    Real s = 0.0;
    for (Real v : a.data()) {
        s += v;
    }
    return make_result("reduce_sum", {}, {s}, {a},
                       [](const Node&, std::span<const Real> g, std::span<std::vector<Real>* const> gin) {
                           for (auto& v : *gin[0]) {
                               v += g[0];
                           }
                       });
}

Tensor reduce_sum(const Tensor& a, std::int64_t axis, bool keepdim) {
    const Index ax = norm_axis("reduce_sum", axis, a.rank());
    const AxisView v = axis_view(a.shape(), ax);
    Shape out = a.shape();
    if (keepdim) {
        out[static_cast<std::size_t>(ax)] = 1;
    } else {
        out.erase(out.begin() + ax);
    }
    const auto x = a.data();
    std::vector<Real> y(static_cast<std::size_t>(v.outer * v.inner), 0.0);
    for (Index o = 0; o < v.outer; ++o) {
        for (Index j = 0; j < v.n; ++j) {
            for (Index in = 0; in < v.inner; ++in) {
                y[static_cast<std::size_t>(o * v.inner + in)] +=
                    x[static_cast<std::size_t>((o * v.n + j) * v.inner + in)];
            }
        }
    }
    return make_result("reduce_sum", std::move(out), std::move(y), {a},
                       [v](const Node&, std::span<const Real> g, std::span<std::vector<Real>* const> gin) {
                           auto& out = *gin[0];
                           for (Index o = 0; o < v.outer; ++o) {
                               for (Index j = 0; j < v.n; ++j) {
                                   for (Index in = 0; in < v.inner; ++in) {
                                       out[static_cast<std::size_t>((o * v.n + j) * v.inner + in)] +=
                                           g[static_cast<std::size_t>(o * v.inner + in)];
                                   }
                               }
                           }
                       });
}

Tensor reduce_mean(const Tensor& a) { return scale(reduce_sum(a), 1.0 / static_cast<Real>(a.numel())); }

Tensor reduce_mean(const Tensor& a, std::int64_t axis, bool keepdim) {
    return scale(reduce_sum(a, axis, keepdim), 1.0 / static_cast<Real>(a.dim(axis)));
}

}  // namespace otok::ops
