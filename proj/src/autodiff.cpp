#include "trustforge/autodiff.hpp"

#include <algorithm>
#include <unordered_map>
#include <unordered_set>

namespace trustforge::ad {

namespace {

Var make(const char* name, Shape shape, Array value, std::vector<Var> inputs, VjpFn vjp) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->inputs = std::move(inputs);
    n->vjp = std::move(vjp);
    n->name = name;
    if (n->value.size() != numel(n->shape))
        throw DimensionError(std::string(name) + ": storage size " +
                             std::to_string(n->value.size()) + " does not match shape " +
                             shape_str(n->shape));
    return n;
}

void require_same_shape(const char* op, const Var& a, const Var& b) {
    if (a->shape != b->shape)
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a->shape) +
                             " vs " + shape_str(b->shape));
}

void require_2d(const char* op, const Var& a) {
    if (a->shape.size() != 2)
        throw DimensionError(std::string(op) + ": expected 2-D tensor, got " +
                             shape_str(a->shape));
}

// constant mask node (never differentiated through)
Var mask_const(Array m, Shape shape) {
    return make("const", std::move(shape), std::move(m), {}, nullptr);
}

struct ConvDims {
    Index n, c, h, w;       // input image dims
    Index o, kh, kw;        // kernel dims
    Index p, ho, wo;        // padding and output dims
};

ConvDims conv_dims(const Shape& xs, const Shape& ks, Pad pad) {
    if (xs.size() != 4)
        throw DimensionError("conv2d: image must be [N,C,H,W], got " + shape_str(xs));
    if (ks.size() != 4)
        throw DimensionError("conv2d: kernel must be [O,C,kh,kw], got " + shape_str(ks));
    ConvDims d{};
    d.n = xs[0]; d.c = xs[1]; d.h = xs[2]; d.w = xs[3];
    d.o = ks[0]; d.kh = ks[2]; d.kw = ks[3];
    if (ks[1] != d.c)
        throw DimensionError("conv2d: kernel channels " + std::to_string(ks[1]) +
                             " do not match image channels " + std::to_string(d.c));
    if (pad == Pad::Same && (d.kh % 2 == 0 || d.kw % 2 == 0))
        throw DimensionError("conv2d: same padding needs odd kernel, got " + shape_str(ks));
    d.p = pad == Pad::Same ? (d.kh - 1) / 2 : 0;
    d.ho = d.h + 2 * d.p - d.kh + 1;
    d.wo = d.w + 2 * d.p - d.kw + 1;
    if (d.ho < 1 || d.wo < 1)
        throw DimensionError("conv2d: kernel " + shape_str(ks) + " larger than image " +
                             shape_str(xs));
    return d;
}

// y[n,o,i,j] = sum_{c,a,b} x[n,c,i+a-p,j+b-p] * k[o,c,a,b]
Array conv_value(const Array& x, const Array& k, const ConvDims& d) {
    Array y = Array::Zero(d.n * d.o * d.ho * d.wo);
    const double* xp = x.data();
    const double* kp = k.data();
    double* yp = y.data();
    for (Index n = 0; n < d.n; ++n)
        for (Index o = 0; o < d.o; ++o) {
            double* yplane = yp + (n * d.o + o) * d.ho * d.wo;
            for (Index c = 0; c < d.c; ++c) {
                const double* xplane = xp + (n * d.c + c) * d.h * d.w;
                for (Index a = 0; a < d.kh; ++a)
                    for (Index b = 0; b < d.kw; ++b) {
                        const double w = kp[((o * d.c + c) * d.kh + a) * d.kw + b];
                        if (w == 0.0) continue;
                        const Index i0 = std::max<Index>(0, d.p - a);
                        const Index i1 = std::min(d.ho, d.h + d.p - a);
                        const Index j0 = std::max<Index>(0, d.p - b);
                        const Index j1 = std::min(d.wo, d.w + d.p - b);
                        for (Index i = i0; i < i1; ++i) {
                            double* yr = yplane + i * d.wo;
                            const double* xr = xplane + (i + a - d.p) * d.w + (b - d.p);
                            for (Index j = j0; j < j1; ++j) yr[j] += w * xr[j];
                        }
                    }
            }
        }
    return y;
}

// gx[n,c,m,mw] = sum_{o,a,b} g[n,o,m-a+p,mw-b+p] * k[o,c,a,b]
Array conv_igrad_value(const Array& g, const Array& k, const ConvDims& d) {
    Array gx = Array::Zero(d.n * d.c * d.h * d.w);
    const double* gp = g.data();
    const double* kp = k.data();
    double* xp = gx.data();
    for (Index n = 0; n < d.n; ++n)
        for (Index c = 0; c < d.c; ++c) {
            double* xplane = xp + (n * d.c + c) * d.h * d.w;
            for (Index o = 0; o < d.o; ++o) {
                const double* gplane = gp + (n * d.o + o) * d.ho * d.wo;
                for (Index a = 0; a < d.kh; ++a)
                    for (Index b = 0; b < d.kw; ++b) {
                        const double w = kp[((o * d.c + c) * d.kh + a) * d.kw + b];
                        if (w == 0.0) continue;
                        const Index m0 = std::max<Index>(0, a - d.p);
                        const Index m1 = std::min(d.h, d.ho + a - d.p);
                        const Index q0 = std::max<Index>(0, b - d.p);
                        const Index q1 = std::min(d.w, d.wo + b - d.p);
                        for (Index m = m0; m < m1; ++m) {
                            double* xr = xplane + m * d.w;
                            const double* gr = gplane + (m - a + d.p) * d.wo + (d.p - b);
                            for (Index q = q0; q < q1; ++q) xr[q] += w * gr[q];
                        }
                    }
            }
        }
    return gx;
}

// gk[o,c,a,b] = sum_{n,i,j} g[n,o,i,j] * x[n,c,i+a-p,j+b-p]
Array conv_kgrad_value(const Array& x, const Array& g, const ConvDims& d) {
    Array gk = Array::Zero(d.o * d.c * d.kh * d.kw);
    const double* xp = x.data();
    const double* gp = g.data();
    double* kp = gk.data();
    for (Index n = 0; n < d.n; ++n)
        for (Index o = 0; o < d.o; ++o) {
            const double* gplane = gp + (n * d.o + o) * d.ho * d.wo;
            for (Index c = 0; c < d.c; ++c) {
                const double* xplane = xp + (n * d.c + c) * d.h * d.w;
                for (Index a = 0; a < d.kh; ++a)
                    for (Index b = 0; b < d.kw; ++b) {
                        const Index i0 = std::max<Index>(0, d.p - a);
                        const Index i1 = std::min(d.ho, d.h + d.p - a);
                        const Index j0 = std::max<Index>(0, d.p - b);
                        const Index j1 = std::min(d.wo, d.w + d.p - b);
                        double acc = 0.0;
                        for (Index i = i0; i < i1; ++i) {
                            const double* gr = gplane + i * d.wo;
                            const double* xr = xplane + (i + a - d.p) * d.w + (b - d.p);
                            for (Index j = j0; j < j1; ++j) acc += gr[j] * xr[j];
                        }
                        kp[((o * d.c + c) * d.kh + a) * d.kw + b] += acc;
                    }
            }
        }
    return gk;
}

}  // namespace

Var leaf(Shape shape, Array value) {
    return make("leaf", std::move(shape), std::move(value), {}, nullptr);
}

Var leaf(const Tensor& t) { return leaf(t.shape, t.data); }

Var constant(Scalar v) { return make("const", {1}, Array::Constant(1, v), {}, nullptr); }

Var constant(Shape shape, Array value) {
    return make("const", std::move(shape), std::move(value), {}, nullptr);
}

Var full(const Shape& s, Scalar v) {
    return make("const", s, Array::Constant(numel(s), v), {}, nullptr);
}

Var add(const Var& a, const Var& b) {
    require_same_shape("add", a, b);
    return make("add", a->shape, a->value + b->value, {a, b},
                [](const Var&, const Var& g, const std::vector<char>& need) {
                    return std::vector<Var>{need[0] ? g : nullptr, need[1] ? g : nullptr};
                });
}

Var sub(const Var& a, const Var& b) {
    require_same_shape("sub", a, b);
    return make("sub", a->shape, a->value - b->value, {a, b},
                [](const Var&, const Var& g, const std::vector<char>& need) {
                    return std::vector<Var>{need[0] ? g : nullptr, need[1] ? neg(g) : nullptr};
                });
}

Var mul(const Var& a, const Var& b) {
    require_same_shape("mul", a, b);
    return make("mul", a->shape, a->value * b->value, {a, b},
                [](const Var& self, const Var& g, const std::vector<char>& need) {
                    return std::vector<Var>{need[0] ? mul(g, self->inputs[1]) : nullptr,
                                            need[1] ? mul(g, self->inputs[0]) : nullptr};
                });
}

Var neg(const Var& a) {
    return make("neg", a->shape, -a->value, {a},
                [](const Var&, const Var& g, const std::vector<char>&) {
                    return std::vector<Var>{neg(g)};
                });
}

Var add_scalar(const Var& a, Scalar s) {
    return make("add_scalar", a->shape, a->value + s, {a},
                [](const Var&, const Var& g, const std::vector<char>&) {
                    return std::vector<Var>{g};
                });
}

Var mul_scalar(const Var& a, Scalar s) {
    return make("mul_scalar", a->shape, a->value * s, {a},
                [s](const Var&, const Var& g, const std::vector<char>&) {
                    return std::vector<Var>{mul_scalar(g, s)};
                });
}

Var div0(const Var& a, const Var& b) {
    require_same_shape("div0", a, b);
    Array r = (b->value == 0.0).select(Array::Zero(a->value.size()), a->value / b->value);
    return make("div0", a->shape, std::move(r), {a, b},
                [](const Var& self, const Var& g, const std::vector<char>& need) {
                    const Var& b = self->inputs[1];
                    std::vector<Var> gs(2);
                    if (need[0]) gs[0] = div0(g, b);
                    if (need[1]) gs[1] = neg(div0(mul(g, self), b));
                    return gs;
                });
}

Var recip(const Var& a) {
    if ((a->value == 0.0).any()) throw ContractError("recip: zero entry");
    return make("recip", a->shape, a->value.inverse(), {a},
                [](const Var& self, const Var& g, const std::vector<char>&) {
                    return std::vector<Var>{neg(mul(g, mul(self, self)))};
                });
}

Var exp_(const Var& a) {
    return make("exp", a->shape, a->value.exp(), {a},
                [](const Var& self, const Var& g, const std::vector<char>&) {
                    return std::vector<Var>{mul(g, self)};
                });
}

Var log_(const Var& a) {
    if ((a->value <= 0.0).any()) throw ContractError("log: non-positive entry");
    return make("log", a->shape, a->value.log(), {a},
                [](const Var& self, const Var& g, const std::vector<char>&) {
                    return std::vector<Var>{div0(g, self->inputs[0])};
                });
}

Var safe_sqrt(const Var& a) {
    if ((a->value < 0.0).any()) throw ContractError("safe_sqrt: negative entry");
    return make("safe_sqrt", a->shape, a->value.sqrt(), {a},
                [](const Var& self, const Var& g, const std::vector<char>&) {
                    return std::vector<Var>{div0(g, mul_scalar(self, 2.0))};
                });
}

Var sigmoid(const Var& a) {
    const Array& x = a->value;
    Array pos = 1.0 / (1.0 + (-x).exp());
    Array ex = x.exp();
    Array v = (x >= 0.0).select(pos, ex / (1.0 + ex));
    return make("sigmoid", a->shape, std::move(v), {a},
                [](const Var& self, const Var& g, const std::vector<char>&) {
                    Var one_minus = add_scalar(neg(self), 1.0);
                    return std::vector<Var>{mul(g, mul(self, one_minus))};
                });
}

Var tanh_(const Var& a) {
    return make("tanh", a->shape, a->value.tanh(), {a},
                [](const Var& self, const Var& g, const std::vector<char>&) {
                    Var one_minus_sq = add_scalar(neg(mul(self, self)), 1.0);
                    return std::vector<Var>{mul(g, one_minus_sq)};
                });
}

Var relu(const Var& a) {
    Array m = (a->value > 0.0).cast<Scalar>();
    return mul(a, mask_const(std::move(m), a->shape));
}

Var leaky_relu(const Var& a, Scalar slope) {
    Array m = (a->value > 0.0).select(Array::Ones(a->value.size()),
                                      Array::Constant(a->value.size(), slope));
    return mul(a, mask_const(std::move(m), a->shape));
}

Var abs_(const Var& a) {
    Array s = a->value.sign();
    return mul(a, mask_const(std::move(s), a->shape));
}

Var square(const Var& a) { return mul(a, a); }

Var clip(const Var& a, Scalar lo, Scalar hi) {
    if (lo > hi) throw ContractError("clip: lo > hi");
    const Array& x = a->value;
    Array in = ((x >= lo) && (x <= hi)).cast<Scalar>();
    Array out = (x < lo).select(Array::Constant(x.size(), lo), Array::Zero(x.size())) +
                (x > hi).select(Array::Constant(x.size(), hi), Array::Zero(x.size()));
    return add(mul(a, mask_const(std::move(in), a->shape)),
               mask_const(std::move(out), a->shape));
}

Var dropout_mask(const Var& a, Scalar p, Rng& rng) {
    if (p < 0.0 || p >= 1.0) throw ContractError("dropout: p must be in [0,1)");
    std::bernoulli_distribution keep(1.0 - p);
    Array m(a->value.size());
    for (Index i = 0; i < m.size(); ++i) m[i] = keep(rng) ? 1.0 : 0.0;
    return mul(a, mask_const(std::move(m), a->shape));
}

Var reshape(const Var& a, Shape s) {
    if (numel(s) != a->value.size())
        throw DimensionError("reshape: cannot view " + shape_str(a->shape) + " as " +
                             shape_str(s));
    Shape from = a->shape;
    return make("reshape", std::move(s), a->value, {a},
                [from](const Var&, const Var& g, const std::vector<char>&) {
                    return std::vector<Var>{reshape(g, from)};
                });
}

Var transpose(const Var& a) {
    require_2d("transpose", a);
    const Index r = a->shape[0], c = a->shape[1];
    Array out(r * c);
    as_matrix(out, c, r) = as_matrix(a->value, r, c).transpose();
    return make("transpose", {c, r}, std::move(out), {a},
                [](const Var&, const Var& g, const std::vector<char>&) {
                    return std::vector<Var>{transpose(g)};
                });
}

Var matmul(const Var& a, const Var& b) {
    require_2d("matmul", a);
    require_2d("matmul", b);
    if (a->shape[1] != b->shape[0])
        throw DimensionError("matmul: inner dims " + shape_str(a->shape) + " x " +
                             shape_str(b->shape));
    const Index m = a->shape[0], k = a->shape[1], n = b->shape[1];
    Array out(m * n);
    as_matrix(out, m, n).noalias() = as_matrix(a->value, m, k) * as_matrix(b->value, k, n);
    return make("matmul", {m, n}, std::move(out), {a, b},
                [](const Var& self, const Var& g, const std::vector<char>& need) {
                    std::vector<Var> gs(2);
                    if (need[0]) gs[0] = matmul(g, transpose(self->inputs[1]));
                    if (need[1]) gs[1] = matmul(transpose(self->inputs[0]), g);
                    return gs;
                });
}

Var concat_cols(const Var& a, const Var& b) {
    require_2d("concat_cols", a);
    require_2d("concat_cols", b);
    if (a->shape[0] != b->shape[0])
        throw DimensionError("concat_cols: row mismatch " + shape_str(a->shape) + " vs " +
                             shape_str(b->shape));
    const Index n = a->shape[0], ca = a->shape[1], cb = b->shape[1];
    Array out(n * (ca + cb));
    auto m = as_matrix(out, n, ca + cb);
    m.leftCols(ca) = as_matrix(a->value, n, ca);
    m.rightCols(cb) = as_matrix(b->value, n, cb);
    return make("concat_cols", {n, ca + cb}, std::move(out), {a, b},
                [ca, cb](const Var&, const Var& g, const std::vector<char>& need) {
                    std::vector<Var> gs(2);
                    if (need[0]) gs[0] = slice_cols(g, 0, ca);
                    if (need[1]) gs[1] = slice_cols(g, ca, ca + cb);
                    return gs;
                });
}

Var slice_cols(const Var& a, Index c0, Index c1) {
    require_2d("slice_cols", a);
    const Index n = a->shape[0], c = a->shape[1];
    if (c0 < 0 || c1 > c || c0 >= c1)
        throw DimensionError("slice_cols: range [" + std::to_string(c0) + "," +
                             std::to_string(c1) + ") invalid for " + shape_str(a->shape));
    Array out(n * (c1 - c0));
    as_matrix(out, n, c1 - c0) = as_matrix(a->value, n, c).middleCols(c0, c1 - c0);
    return make("slice_cols", {n, c1 - c0}, std::move(out), {a},
                [c0, c](const Var& self, const Var& g, const std::vector<char>&) {
                    // pad back with zero blocks on either side
                    const Index n = self->shape[0], w = self->shape[1];
                    Var padded = g;
                    if (c0 > 0) padded = concat_cols(full({n, c0}, 0.0), padded);
                    if (c0 + w < c) padded = concat_cols(padded, full({n, c - c0 - w}, 0.0));
                    return std::vector<Var>{padded};
                });
}

Var gather_rows(const Var& table, std::vector<Index> ids) {
    require_2d("gather_rows", table);
    const Index v = table->shape[0], d = table->shape[1];
    for (Index id : ids)
        if (id < 0 || id >= v)
            throw ContractError("gather_rows: row id " + std::to_string(id) +
                                " out of range [0," + std::to_string(v) + ")");
    const Index n = static_cast<Index>(ids.size());
    Array out(n * d);
    for (Index i = 0; i < n; ++i)
        out.segment(i * d, d) = table->value.segment(ids[i] * d, d);
    return make("gather_rows", {n, d}, std::move(out), {table},
                [ids, v](const Var&, const Var& g, const std::vector<char>&) {
                    return std::vector<Var>{scatter_rows_add(g, ids, v)};
                });
}

Var scatter_rows_add(const Var& g, std::vector<Index> ids, Index nrows) {
    require_2d("scatter_rows_add", g);
    const Index n = g->shape[0], d = g->shape[1];
    if (static_cast<Index>(ids.size()) != n)
        throw DimensionError("scatter_rows_add: " + std::to_string(ids.size()) +
                             " ids for " + std::to_string(n) + " rows");
    Array out = Array::Zero(nrows * d);
    for (Index i = 0; i < n; ++i)
        out.segment(ids[i] * d, d) += g->value.segment(i * d, d);
    return make("scatter_rows_add", {nrows, d}, std::move(out), {g},
                [ids](const Var&, const Var& u, const std::vector<char>&) {
                    return std::vector<Var>{gather_rows(u, ids)};
                });
}

Var select_class(const Var& x, std::vector<Index> labels) {
    require_2d("select_class", x);
    const Index n = x->shape[0], c = x->shape[1];
    if (static_cast<Index>(labels.size()) != n)
        throw DimensionError("select_class: " + std::to_string(labels.size()) +
                             " labels for " + std::to_string(n) + " rows");
    Array out(n);
    for (Index i = 0; i < n; ++i) {
        if (labels[i] < 0 || labels[i] >= c)
            throw ContractError("select_class: label " + std::to_string(labels[i]) +
                                " out of range [0," + std::to_string(c) + ")");
        out[i] = x->value[i * c + labels[i]];
    }
    return make("select_class", {n}, std::move(out), {x},
                [labels, c](const Var&, const Var& g, const std::vector<char>&) {
                    return std::vector<Var>{scatter_class(g, labels, c)};
                });
}

Var scatter_class(const Var& v, std::vector<Index> labels, Index c) {
    if (v->shape.size() != 1)
        throw DimensionError("scatter_class: expected 1-D values, got " + shape_str(v->shape));
    const Index n = v->shape[0];
    if (static_cast<Index>(labels.size()) != n)
        throw DimensionError("scatter_class: " + std::to_string(labels.size()) +
                             " labels for " + std::to_string(n) + " values");
    Array out = Array::Zero(n * c);
    for (Index i = 0; i < n; ++i) {
        if (labels[i] < 0 || labels[i] >= c)
            throw ContractError("scatter_class: label " + std::to_string(labels[i]) +
                                " out of range [0," + std::to_string(c) + ")");
        out[i * c + labels[i]] = v->value[i];
    }
    return make("scatter_class", {n, c}, std::move(out), {v},
                [labels](const Var&, const Var& g, const std::vector<char>&) {
                    return std::vector<Var>{select_class(g, labels)};
                });
}

Var take_idx(const Var& x, std::shared_ptr<std::vector<Index>> idx, Shape out_shape) {
    const Index n = static_cast<Index>(idx->size());
    if (n != numel(out_shape))
        throw DimensionError("take_idx: " + std::to_string(n) + " indices for shape " +
                             shape_str(out_shape));
    Array out(n);
    for (Index i = 0; i < n; ++i) {
        Index j = (*idx)[i];
        if (j < 0 || j >= x->value.size())
            throw ContractError("take_idx: index " + std::to_string(j) + " out of range");
        out[i] = x->value[j];
    }
    Shape in_shape = x->shape;
    return make("take_idx", std::move(out_shape), std::move(out), {x},
                [idx, in_shape](const Var&, const Var& g, const std::vector<char>&) {
                    return std::vector<Var>{put_idx_add(g, idx, in_shape)};
                });
}

Var put_idx_add(const Var& g, std::shared_ptr<std::vector<Index>> idx, Shape out_shape) {
    const Index n = g->value.size();
    if (n != static_cast<Index>(idx->size()))
        throw DimensionError("put_idx_add: " + std::to_string(idx->size()) +
                             " indices for " + std::to_string(n) + " values");
    Array out = Array::Zero(numel(out_shape));
    for (Index i = 0; i < n; ++i) {
        Index j = (*idx)[i];
        if (j < 0 || j >= out.size())
            throw ContractError("put_idx_add: index " + std::to_string(j) + " out of range");
        out[j] += g->value[i];
    }
    Shape in_shape = g->shape;
    return make("put_idx_add", std::move(out_shape), std::move(out), {g},
                [idx, in_shape](const Var&, const Var& u, const std::vector<char>&) {
                    return std::vector<Var>{take_idx(u, idx, in_shape)};
                });
}

Var tile_mid(const Var& v, Index reps) {
    require_2d("tile_mid", v);
    if (reps < 1) throw ContractError("tile_mid: reps must be >= 1");
    const Index n = v->shape[0], m = v->shape[1];
    Array out(n * reps * m);
    for (Index i = 0; i < n; ++i)
        for (Index r = 0; r < reps; ++r)
            out.segment((i * reps + r) * m, m) = v->value.segment(i * m, m);
    return make("tile_mid", {n, reps * m}, std::move(out), {v},
                [reps](const Var&, const Var& g, const std::vector<char>&) {
                    return std::vector<Var>{sum_mid(g, reps)};
                });
}

Var sum_mid(const Var& a, Index reps) {
    require_2d("sum_mid", a);
    if (reps < 1 || a->shape[1] % reps != 0)
        throw DimensionError("sum_mid: cannot split " + shape_str(a->shape) + " into " +
                             std::to_string(reps) + " blocks");
    const Index n = a->shape[0], m = a->shape[1] / reps;
    Array out = Array::Zero(n * m);
    for (Index i = 0; i < n; ++i)
        for (Index r = 0; r < reps; ++r)
            out.segment(i * m, m) += a->value.segment((i * reps + r) * m, m);
    return make("sum_mid", {n, m}, std::move(out), {a},
                [reps](const Var&, const Var& g, const std::vector<char>&) {
                    return std::vector<Var>{tile_mid(g, reps)};
                });
}

Var sum_all(const Var& a) {
    return make("sum_all", {1}, Array::Constant(1, a->value.sum()), {a},
                [](const Var& self, const Var& g, const std::vector<char>&) {
                    return std::vector<Var>{bcast_full(g, self->inputs[0]->shape)};
                });
}

Var mean_all(const Var& a) {
    if (a->value.size() == 0) throw ContractError("mean_all: empty tensor");
    return mul_scalar(sum_all(a), 1.0 / static_cast<Scalar>(a->value.size()));
}

Var bcast_full(const Var& s, Shape shape) {
    if (!s->is_scalar())
        throw DimensionError("bcast_full: expected scalar, got " + shape_str(s->shape));
    return make("bcast_full", shape, Array::Constant(numel(shape), s->value[0]), {s},
                [](const Var&, const Var& g, const std::vector<char>&) {
                    return std::vector<Var>{sum_all(g)};
                });
}

Var sum_cols(const Var& a) {
    require_2d("sum_cols", a);
    const Index n = a->shape[0], c = a->shape[1];
    Array out(n);
    out.matrix() = as_matrix(a->value, n, c).rowwise().sum();
    return make("sum_cols", {n}, std::move(out), {a},
                [c](const Var&, const Var& g, const std::vector<char>&) {
                    return std::vector<Var>{bcast_cols(g, c)};
                });
}

Var bcast_cols(const Var& v, Index c) {
    if (v->shape.size() != 1)
        throw DimensionError("bcast_cols: expected 1-D, got " + shape_str(v->shape));
    const Index n = v->shape[0];
    Array out(n * c);
    as_matrix(out, n, c).colwise() = v->value.matrix();
    return make("bcast_cols", {n, c}, std::move(out), {v},
                [](const Var&, const Var& g, const std::vector<char>&) {
                    return std::vector<Var>{sum_cols(g)};
                });
}

Var sum_rows(const Var& a) {
    require_2d("sum_rows", a);
    const Index n = a->shape[0], c = a->shape[1];
    Array out(c);
    out.matrix() = as_matrix(a->value, n, c).colwise().sum().transpose();
    return make("sum_rows", {c}, std::move(out), {a},
                [n](const Var&, const Var& g, const std::vector<char>&) {
                    return std::vector<Var>{bcast_rows(g, n)};
                });
}

Var bcast_rows(const Var& v, Index n) {
    if (v->shape.size() != 1)
        throw DimensionError("bcast_rows: expected 1-D, got " + shape_str(v->shape));
    const Index c = v->shape[0];
    Array out(n * c);
    as_matrix(out, n, c).rowwise() = v->value.matrix().transpose();
    return make("bcast_rows", {n, c}, std::move(out), {v},
                [](const Var&, const Var& g, const std::vector<char>&) {
                    return std::vector<Var>{sum_rows(g)};
                });
}

Var max_all(const Var& a) {
    if (a->value.size() == 0) throw ContractError("max_all: empty tensor");
    Index arg = 0;
    for (Index i = 1; i < a->value.size(); ++i)
        if (a->value[i] > a->value[arg]) arg = i;
    Array onehot = Array::Zero(a->value.size());
    onehot[arg] = 1.0;
    Shape xshape = a->shape;
    auto hot = std::make_shared<Array>(std::move(onehot));
    return make("max_all", {1}, Array::Constant(1, a->value[arg]), {a},
                [hot, xshape](const Var&, const Var& g, const std::vector<char>&) {
                    return std::vector<Var>{
                        mul(bcast_full(g, xshape), mask_const(*hot, xshape))};
                });
}

Var max_cols(const Var& a) {
    require_2d("max_cols", a);
    const Index n = a->shape[0], c = a->shape[1];
    Array out(n);
    Array onehot = Array::Zero(n * c);
    for (Index i = 0; i < n; ++i) {
        Index arg = 0;
        for (Index j = 1; j < c; ++j)
            if (a->value[i * c + j] > a->value[i * c + arg]) arg = j;
        out[i] = a->value[i * c + arg];
        onehot[i * c + arg] = 1.0;
    }
    Shape xshape = a->shape;
    auto hot = std::make_shared<Array>(std::move(onehot));
    return make("max_cols", {n}, std::move(out), {a},
                [hot, xshape, c](const Var&, const Var& g, const std::vector<char>&) {
                    return std::vector<Var>{
                        mul(bcast_cols(g, c), mask_const(*hot, xshape))};
                });
}

Var softmax_rows(const Var& a) {
    require_2d("softmax_rows", a);
    const Index n = a->shape[0], c = a->shape[1];
    Array out(n * c);
    for (Index i = 0; i < n; ++i) {
        auto row = a->value.segment(i * c, c);
        Scalar m = row.maxCoeff();
        Array e = (row - m).exp();
        out.segment(i * c, c) = e / e.sum();
    }
    return make("softmax_rows", {n, c}, std::move(out), {a},
                [c](const Var& self, const Var& g, const std::vector<char>&) {
                    // y * (g - rowsum(g*y))
                    Var gy = mul(g, self);
                    Var corr = bcast_cols(sum_cols(gy), c);
                    return std::vector<Var>{mul(self, sub(g, corr))};
                });
}

Var softmax_vec(const Var& a) {
    if (a->shape.size() != 1)
        throw DimensionError("softmax_vec: expected 1-D, got " + shape_str(a->shape));
    const Index c = a->shape[0];
    return reshape(softmax_rows(reshape(a, {1, c})), {c});
}

Var conv2d(const Var& x, const Var& k, Pad pad) {
    ConvDims d = conv_dims(x->shape, k->shape, pad);
    Shape xshape = x->shape, kshape = k->shape;
    return make("conv2d", {d.n, d.o, d.ho, d.wo}, conv_value(x->value, k->value, d), {x, k},
                [xshape, kshape, pad](const Var& self, const Var& g,
                                      const std::vector<char>& need) {
                    std::vector<Var> gs(2);
                    if (need[0]) gs[0] = conv2d_igrad(g, self->inputs[1], xshape, pad);
                    if (need[1]) gs[1] = conv2d_kgrad(self->inputs[0], g, kshape, pad);
                    return gs;
                });
}

Var conv2d_igrad(const Var& g, const Var& k, Shape xshape, Pad pad) {
    ConvDims d = conv_dims(xshape, k->shape, pad);
    if (g->shape != Shape{d.n, d.o, d.ho, d.wo})
        throw DimensionError("conv2d_igrad: output grad shape " + shape_str(g->shape) +
                             " does not match expected " +
                             shape_str({d.n, d.o, d.ho, d.wo}));
    Shape kshape = k->shape;
    return make("conv2d_igrad", xshape, conv_igrad_value(g->value, k->value, d), {g, k},
                [xshape, kshape, pad](const Var& self, const Var& u,
                                      const std::vector<char>& need) {
                    std::vector<Var> gs(2);
                    if (need[0]) gs[0] = conv2d(u, self->inputs[1], pad);
                    if (need[1]) gs[1] = conv2d_kgrad(u, self->inputs[0], kshape, pad);
                    return gs;
                });
}

Var conv2d_kgrad(const Var& x, const Var& g, Shape kshape, Pad pad) {
    ConvDims d = conv_dims(x->shape, kshape, pad);
    if (g->shape != Shape{d.n, d.o, d.ho, d.wo})
        throw DimensionError("conv2d_kgrad: output grad shape " + shape_str(g->shape) +
                             " does not match expected " +
                             shape_str({d.n, d.o, d.ho, d.wo}));
    Shape xshape = x->shape;
    return make("conv2d_kgrad", kshape, conv_kgrad_value(x->value, g->value, d), {x, g},
                [xshape, kshape, pad](const Var& self, const Var& u,
                                      const std::vector<char>& need) {
                    std::vector<Var> gs(2);
                    if (need[0]) gs[0] = conv2d_igrad(self->inputs[1], u, xshape, pad);
                    if (need[1]) gs[1] = conv2d(self->inputs[0], u, pad);
                    return gs;
                });
}

Var maxpool2(const Var& x) {
    if (x->shape.size() != 4)
        throw DimensionError("maxpool2: expected [N,C,H,W], got " + shape_str(x->shape));
    const Index n = x->shape[0], c = x->shape[1], h = x->shape[2], w = x->shape[3];
    if (h % 2 != 0 || w % 2 != 0)
        throw DimensionError("maxpool2: H and W must be even, got " + shape_str(x->shape));
    const Index ho = h / 2, wo = w / 2;
    auto idx = std::make_shared<std::vector<Index>>();
    idx->reserve(n * c * ho * wo);
    const double* xp = x->value.data();
    for (Index im = 0; im < n * c; ++im) {
        const double* plane = xp + im * h * w;
        const Index base = im * h * w;
        for (Index i = 0; i < ho; ++i)
            for (Index j = 0; j < wo; ++j) {
                Index best = (2 * i) * w + 2 * j;
                const Index cand[3] = {(2 * i) * w + 2 * j + 1, (2 * i + 1) * w + 2 * j,
                                       (2 * i + 1) * w + 2 * j + 1};
                for (Index k : cand)
                    if (plane[k] > plane[best]) best = k;
                idx->push_back(base + best);
            }
    }
    return take_idx(x, idx, {n, c, ho, wo});
}

namespace {

std::vector<Var> topo_order(const Var& root) {
    std::vector<Var> order;
    std::unordered_set<Node*> done;
    std::vector<std::pair<Var, size_t>> stack;
    stack.emplace_back(root, 0);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (done.count(node.get())) {
            stack.pop_back();
            continue;
        }
        if (next < node->inputs.size()) {
            Var child = node->inputs[next++];
            if (!done.count(child.get())) stack.emplace_back(std::move(child), 0);
        } else {
            done.insert(node.get());
            order.push_back(node);
            stack.pop_back();
        }
    }
    return order;
}

}  // namespace

std::vector<Var> gradients(const Var& loss, const std::vector<Var>& wrt) {
    if (!loss) throw ContractError("gradients: null loss");
    if (!loss->is_scalar())
        throw ContractError("gradients: loss must be scalar, got shape " +
                            shape_str(loss->shape));
    std::vector<Var> order = topo_order(loss);

    std::unordered_set<Node*> want;
    for (const Var& w : wrt) {
        if (!w) throw ContractError("gradients: null wrt entry");
        want.insert(w.get());
    }
    std::unordered_map<Node*, char> needed;
    needed.reserve(order.size());
    for (const Var& n : order) {
        char f = want.count(n.get()) ? 1 : 0;
        if (!f)
            for (const Var& in : n->inputs)
                if (needed[in.get()]) { f = 1; break; }
        needed[n.get()] = f;
    }

    std::unordered_map<Node*, Var> gmap;
    gmap[loss.get()] = full(loss->shape, 1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        const Var& n = *it;
        auto git = gmap.find(n.get());
        if (git == gmap.end() || !n->vjp || !needed[n.get()]) continue;
        std::vector<char> need(n->inputs.size(), 0);
        bool any = false;
        for (size_t i = 0; i < n->inputs.size(); ++i) {
            need[i] = needed[n->inputs[i].get()];
            any = any || need[i];
        }
        if (!any) continue;
        std::vector<Var> gs = n->vjp(n, git->second, need);
        if (gs.size() != n->inputs.size())
            throw ContractError(std::string(n->name) + ": backward returned " +
                                std::to_string(gs.size()) + " grads for " +
                                std::to_string(n->inputs.size()) + " inputs");
        for (size_t i = 0; i < gs.size(); ++i) {
            if (!need[i] || !gs[i]) continue;
            Node* target = n->inputs[i].get();
            if (gs[i]->value.size() != target->value.size())
                throw ContractError(std::string(n->name) + ": grad shape " +
                                    shape_str(gs[i]->shape) + " for input of shape " +
                                    shape_str(target->shape));
            auto cur = gmap.find(target);
            if (cur == gmap.end())
                gmap[target] = gs[i];
            else
                cur->second = add(cur->second, gs[i]);
        }
    }

    std::vector<Var> out;
    out.reserve(wrt.size());
    for (const Var& w : wrt) {
        auto it = gmap.find(w.get());
        out.push_back(it != gmap.end() ? it->second : full(w->shape, 0.0));
    }
    return out;
}

void backward(const Var& loss, const std::vector<Var>& wrt) {
    std::vector<Var> gs = gradients(loss, wrt);
    for (size_t i = 0; i < wrt.size(); ++i) {
        Node* n = wrt[i].get();
        if (n->grad.size() != n->value.size()) n->grad = Array::Zero(n->value.size());
        n->grad += gs[i]->value;
    }
}

void backward(const Var& loss) {
    std::vector<Var> leaves;
    for (const Var& n : topo_order(loss))
        if (!n->vjp && std::string(n->name) == "leaf") leaves.push_back(n);
    backward(loss, leaves);
}

Var grad_norm_node(const Var& output, const Var& input) {
    Var g = gradients(output, {input})[0];
    return safe_sqrt(sum_all(square(g)));
}

void zero_grad(const std::vector<Var>& params) {
    for (const Var& p : params) {
        if (!p) continue;
        p->grad = Array::Zero(p->value.size());
    }
}

}  // namespace trustforge::ad
