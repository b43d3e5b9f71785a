#pragma once

// Reverse-mode automatic differentiation on dense tensors. A Graph is a tape
// of nodes; each op records its forward value and a closure that accumulates
// adjoints into its inputs. Dense inner products (matmul, batched matmul,
// conv-as-GEMM) are evaluated with Eigen; every reduction accumulates in a
// fixed order, so results are bitwise reproducible for a fixed thread count.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "occurate/error.hpp"
#include "occurate/rng.hpp"
#include "occurate/tensor.hpp"

namespace occurate::ad {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;

template <typename T>
class Graph;

template <typename T>
struct Var {
    Graph<T>* graph = nullptr;
    int32_t id = -1;
};

template <typename T>
class Graph {
public:
    Var<T> leaf(Tensor<T> value, std::string name = {}) {
        nodes_.push_back(NodeRec{std::move(value), Tensor<T>(), {}, nullptr, std::move(name)});
        return Var<T>{this, static_cast<int32_t>(nodes_.size() - 1)};
    }

    Var<T> constant(Tensor<T> value) { return leaf(std::move(value)); }

    Var<T> make(Tensor<T> value, std::vector<int32_t> inputs,
                std::function<void(Graph&, int32_t)> back) {
        nodes_.push_back(NodeRec{std::move(value), Tensor<T>(), std::move(inputs), std::move(back), {}});
        return Var<T>{this, static_cast<int32_t>(nodes_.size() - 1)};
    }

    const Tensor<T>& value(int32_t id) const { return nodes_[static_cast<size_t>(id)].value; }
    const Tensor<T>& value(Var<T> v) const { return value(v.id); }
    Tensor<T>& adjoint(int32_t id) { return nodes_[static_cast<size_t>(id)].adjoint; }
    Tensor<T>& adjoint(Var<T> v) { return adjoint(v.id); }
    const std::vector<int32_t>& inputs(int32_t id) const { return nodes_[static_cast<size_t>(id)].inputs; }

    size_t size() const { return nodes_.size(); }

    // Reverse sweep from a scalar loss. Adjoints are zeroed first; returns the
    // accumulated gradient for every named leaf (exact zeros for leaves the
    // loss does not depend on).
    std::map<std::string, Tensor<T>> backward(Var<T> loss) {
        if (loss.graph != this) data_error("backward: loss belongs to another graph");
        if (value(loss.id).numel() != 1)
            data_error("backward: loss must be scalar, got shape " + shape_str(value(loss.id).shape()));
        for (auto& n : nodes_) n.adjoint = Tensor<T>(n.value.shape());
        adjoint(loss.id)[0] = T(1);
        std::vector<char> reached(nodes_.size(), 0);
        reached[static_cast<size_t>(loss.id)] = 1;
        for (int32_t id = loss.id; id >= 0; --id) {
            auto& n = nodes_[static_cast<size_t>(id)];
            if (!reached[static_cast<size_t>(id)]) continue;
            for (int32_t in : n.inputs) reached[static_cast<size_t>(in)] = 1;
            if (n.back) n.back(*this, id);
        }
        std::map<std::string, Tensor<T>> grads;
        for (auto& n : nodes_)
            if (!n.name.empty()) grads.emplace(n.name, n.adjoint);
        return grads;
    }

private:
    struct NodeRec {
        Tensor<T> value;
        Tensor<T> adjoint;
        std::vector<int32_t> inputs;
        std::function<void(Graph&, int32_t)> back;
        std::string name;
    };
    std::vector<NodeRec> nodes_;
};

// ---------------------------------------------------------------------------
// broadcasting helpers

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    size_t r = std::max(a.size(), b.size());
    Shape out(r, 1);
    for (size_t i = 0; i < r; ++i) {
        int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (da != db && da != 1 && db != 1)
            data_error(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                       " are not broadcast-compatible");
        out[i] = std::max(da, db);
    }
    return out;
}

// Strides of `s` aligned to a broadcast result of rank `rank`; broadcast
// dimensions get stride 0.
inline Shape broadcast_strides(const Shape& s, const Shape& out) {
    Shape st(out.size(), 0);
    Shape own = row_major_strides(s);
    size_t off = out.size() - s.size();
    for (size_t i = 0; i < s.size(); ++i)
        st[off + i] = (s[i] == 1 && out[off + i] != 1) ? 0 : own[i];
    return st;
}

// Calls f(out_flat, a_offset, b_offset) for every element of `out`.
template <typename F>
inline void broadcast_walk(const Shape& out, const Shape& sa, const Shape& sb, F&& f) {
    int64_t n = shape_numel(out);
    int rank = static_cast<int>(out.size());
    if (rank == 0) {
        f(0, 0, 0);
        return;
    }
    std::vector<int64_t> idx(static_cast<size_t>(rank), 0);
    int64_t oa = 0, ob = 0;
    for (int64_t o = 0; o < n; ++o) {
        f(o, oa, ob);
        for (int d = rank - 1; d >= 0; --d) {
            idx[static_cast<size_t>(d)]++;
            oa += sa[static_cast<size_t>(d)];
            ob += sb[static_cast<size_t>(d)];
            if (idx[static_cast<size_t>(d)] < out[static_cast<size_t>(d)]) break;
            idx[static_cast<size_t>(d)] = 0;
            oa -= sa[static_cast<size_t>(d)] * out[static_cast<size_t>(d)];
            ob -= sb[static_cast<size_t>(d)] * out[static_cast<size_t>(d)];
        }
    }
}

namespace detail {

template <typename T>
inline void check_same_graph(Var<T> a, Var<T> b, const char* op) {
    if (a.graph != b.graph || a.graph == nullptr)
        data_error(std::string(op) + ": operands belong to different graphs");
}

template <typename T>
inline T sigmoid_scalar(T x) {
    if (x >= T(0)) {
        T e = std::exp(-x);
        return T(1) / (T(1) + e);
    }
    T e = std::exp(x);
    return e / (T(1) + e);
}

} // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops

template <typename T, typename FwdFn, typename BwdFn>
Var<T> binary_broadcast(Var<T> a, Var<T> b, const char* op, FwdFn fwd, BwdFn bwd) {
    detail::check_same_graph(a, b, op);
    Graph<T>& g = *a.graph;
    const Tensor<T>& av = g.value(a);
    const Tensor<T>& bv = g.value(b);
    Shape os = broadcast_shape(av.shape(), bv.shape(), op);
    Shape sa = broadcast_strides(av.shape(), os);
    Shape sb = broadcast_strides(bv.shape(), os);
    Tensor<T> out(os);
    broadcast_walk(os, sa, sb,
                   [&](int64_t o, int64_t oa, int64_t ob) { out[o] = fwd(av[oa], bv[ob]); });
    auto back = [os, sa, sb, bwd](Graph<T>& gr, int32_t self) {
        const auto& in = gr.inputs(self);
        const Tensor<T>& gout = gr.adjoint(self);
        const Tensor<T>& x = gr.value(in[0]);
        const Tensor<T>& y = gr.value(in[1]);
        Tensor<T>& da = gr.adjoint(in[0]);
        Tensor<T>& db = gr.adjoint(in[1]);
        broadcast_walk(os, sa, sb, [&](int64_t o, int64_t oa, int64_t ob) {
            T gx, gy;
            bwd(x[oa], y[ob], gout[o], gx, gy);
            da[oa] += gx;
            db[ob] += gy;
        });
    };
    return g.make(std::move(out), {a.id, b.id}, back);
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    return binary_broadcast(
        a, b, "add", [](T x, T y) { return x + y; },
        [](T, T, T go, T& gx, T& gy) { gx = go; gy = go; });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    return binary_broadcast(
        a, b, "sub", [](T x, T y) { return x - y; },
        [](T, T, T go, T& gx, T& gy) { gx = go; gy = -go; });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    return binary_broadcast(
        a, b, "mul", [](T x, T y) { return x * y; },
        [](T x, T y, T go, T& gx, T& gy) { gx = go * y; gy = go * x; });
}

template <typename T, typename FwdFn, typename BwdFn>
Var<T> unary_elementwise(Var<T> a, FwdFn fwd, BwdFn bwd) {
    Graph<T>& g = *a.graph;
    const Tensor<T>& av = g.value(a);
    Tensor<T> out(av.shape());
    for (int64_t i = 0; i < av.numel(); ++i) out[i] = fwd(av[i]);
    auto back = [bwd](Graph<T>& gr, int32_t self) {
        const auto& in = gr.inputs(self);
        const Tensor<T>& gout = gr.adjoint(self);
        const Tensor<T>& x = gr.value(in[0]);
        const Tensor<T>& y = gr.value(self);
        Tensor<T>& dx = gr.adjoint(in[0]);
        for (int64_t i = 0; i < x.numel(); ++i) dx[i] += bwd(x[i], y[i], gout[i]);
    };
    return g.make(std::move(out), {a.id}, back);
}

template <typename T>
Var<T> relu(Var<T> a) {
    return unary_elementwise(
        a, [](T x) { return x > T(0) ? x : T(0); },
        [](T x, T, T go) { return x > T(0) ? go : T(0); });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
    return unary_elementwise(
        a, [](T x) { return detail::sigmoid_scalar(x); },
        [](T, T y, T go) { return go * y * (T(1) - y); });
}

template <typename T>
Var<T> gelu(Var<T> a) {
    return unary_elementwise(
        a,
        [](T x) {
            return T(0.5) * x * (T(1) + std::erf(x * T(M_SQRT1_2)));
        },
        [](T x, T, T go) {
            T cdf = T(0.5) * (T(1) + std::erf(x * T(M_SQRT1_2)));
            T pdf = std::exp(T(-0.5) * x * x) * T(0.3989422804014327);
            return go * (cdf + x * pdf);
        });
}

template <typename T>
Var<T> log_op(Var<T> a) {
    return unary_elementwise(
        a, [](T x) { return std::log(x); },
        [](T x, T, T go) { return go / x; });
}

// Gradient passes only inside [lo, hi]; used for the loss-side probability
// clamp so unclamped predictions stay untouched.
template <typename T>
Var<T> clamp(Var<T> a, T lo, T hi) {
    return unary_elementwise(
        a, [lo, hi](T x) { return x < lo ? lo : (x > hi ? hi : x); },
        [lo, hi](T x, T, T go) { return (x >= lo && x <= hi) ? go : T(0); });
}

template <typename T>
Var<T> scale(Var<T> a, T c) {
    return unary_elementwise(
        a, [c](T x) { return c * x; },
        [c](T, T, T go) { return go * c; });
}

template <typename T>
Var<T> add_scalar(Var<T> a, T c) {
    return unary_elementwise(
        a, [c](T x) { return x + c; },
        [](T, T, T go) { return go; });
}

// ---------------------------------------------------------------------------
// reductions and shape ops

template <typename T>
Var<T> sum_all(Var<T> a) {
    Graph<T>& g = *a.graph;
    const Tensor<T>& av = g.value(a);
    T acc = T(0);
    for (int64_t i = 0; i < av.numel(); ++i) acc += av[i];
    auto back = [](Graph<T>& gr, int32_t self) {
        const auto& in = gr.inputs(self);
        T go = gr.adjoint(self)[0];
        Tensor<T>& dx = gr.adjoint(in[0]);
        for (int64_t i = 0; i < dx.numel(); ++i) dx[i] += go;
    };
    return g.make(Tensor<T>::scalar(acc), {a.id}, back);
}

template <typename T>
Var<T> mean_all(Var<T> a) {
    int64_t n = a.graph->value(a).numel();
    return scale(sum_all(a), T(1) / static_cast<T>(n));
}

template <typename T>
Var<T> reshape(Var<T> a, Shape s) {
    Graph<T>& g = *a.graph;
    Tensor<T> out = g.value(a).reshaped(std::move(s));
    auto back = [](Graph<T>& gr, int32_t self) {
        const auto& in = gr.inputs(self);
        const Tensor<T>& gout = gr.adjoint(self);
        Tensor<T>& dx = gr.adjoint(in[0]);
        for (int64_t i = 0; i < dx.numel(); ++i) dx[i] += gout[i];
    };
    return g.make(std::move(out), {a.id}, back);
}

template <typename T>
Var<T> permute(Var<T> a, std::vector<int> axes) {
    Graph<T>& g = *a.graph;
    const Tensor<T>& av = g.value(a);
    int rank = av.rank();
    if (static_cast<int>(axes.size()) != rank)
        data_error("permute: axes size " + std::to_string(axes.size()) + " vs rank " +
                   std::to_string(rank));
    Shape os(static_cast<size_t>(rank));
    for (int i = 0; i < rank; ++i) os[static_cast<size_t>(i)] = av.shape()[static_cast<size_t>(axes[static_cast<size_t>(i)])];
    Shape in_strides = row_major_strides(av.shape());
    // strides of the source, ordered by output axes
    Shape src(static_cast<size_t>(rank));
    for (int i = 0; i < rank; ++i) src[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(axes[static_cast<size_t>(i)])];
    Tensor<T> out(os);
    Shape zeros(static_cast<size_t>(rank), 0);
    broadcast_walk(os, src, zeros, [&](int64_t o, int64_t ia, int64_t) { out[o] = av[ia]; });
    auto back = [os, src, zeros](Graph<T>& gr, int32_t self) {
        const auto& in = gr.inputs(self);
        const Tensor<T>& gout = gr.adjoint(self);
        Tensor<T>& dx = gr.adjoint(in[0]);
        broadcast_walk(os, src, zeros, [&](int64_t o, int64_t ia, int64_t) { dx[ia] += gout[o]; });
    };
    return g.make(std::move(out), {a.id}, back);
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, int axis) {
    if (parts.empty()) data_error("concat: no inputs");
    Graph<T>& g = *parts[0].graph;
    const Shape& s0 = g.value(parts[0]).shape();
    int rank = static_cast<int>(s0.size());
    if (axis < 0) axis += rank;
    Shape os = s0;
    os[static_cast<size_t>(axis)] = 0;
    std::vector<int32_t> ids;
    for (auto& p : parts) {
        detail::check_same_graph(parts[0], p, "concat");
        const Shape& s = g.value(p).shape();
        if (static_cast<int>(s.size()) != rank)
            data_error("concat: rank mismatch " + shape_str(s0) + " vs " + shape_str(s));
        for (int d = 0; d < rank; ++d)
            if (d != axis && s[static_cast<size_t>(d)] != s0[static_cast<size_t>(d)])
                data_error("concat: shapes " + shape_str(s0) + " and " + shape_str(s) +
                           " differ outside axis " + std::to_string(axis));
        os[static_cast<size_t>(axis)] += s[static_cast<size_t>(axis)];
        ids.push_back(p.id);
    }
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= os[static_cast<size_t>(d)];
    for (int d = axis + 1; d < rank; ++d) inner *= os[static_cast<size_t>(d)];
    Tensor<T> out(os);
    int64_t out_axis = os[static_cast<size_t>(axis)];
    std::vector<int64_t> offsets;  // start offset of each part along axis
    {
        int64_t off = 0;
        for (auto& p : parts) {
            offsets.push_back(off);
            const Tensor<T>& pv = g.value(p);
            int64_t pa = pv.shape()[static_cast<size_t>(axis)];
            for (int64_t r = 0; r < outer; ++r)
                for (int64_t j = 0; j < pa; ++j)
                    for (int64_t c = 0; c < inner; ++c)
                        out[(r * out_axis + off + j) * inner + c] = pv[(r * pa + j) * inner + c];
            off += pa;
        }
    }
    auto back = [outer, inner, out_axis, offsets](Graph<T>& gr, int32_t self) {
        const auto& in = gr.inputs(self);
        const Tensor<T>& gout = gr.adjoint(self);
        for (size_t k = 0; k < in.size(); ++k) {
            Tensor<T>& dx = gr.adjoint(in[k]);
            int64_t pa = dx.numel() / (outer * inner);
            int64_t off = offsets[k];
            for (int64_t r = 0; r < outer; ++r)
                for (int64_t j = 0; j < pa; ++j)
                    for (int64_t c = 0; c < inner; ++c)
                        dx[(r * pa + j) * inner + c] += gout[(r * out_axis + off + j) * inner + c];
        }
    };
    return g.make(std::move(out), std::move(ids), back);
}

template <typename T>
Var<T> slice(Var<T> a, int axis, int64_t start, int64_t len) {
    Graph<T>& g = *a.graph;
    const Tensor<T>& av = g.value(a);
    int rank = av.rank();
    if (axis < 0) axis += rank;
    const Shape& s = av.shape();
    if (start < 0 || start + len > s[static_cast<size_t>(axis)])
        data_error("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                   ") out of bounds for shape " + shape_str(s));
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= s[static_cast<size_t>(d)];
    for (int d = axis + 1; d < rank; ++d) inner *= s[static_cast<size_t>(d)];
    int64_t in_axis = s[static_cast<size_t>(axis)];
    Shape os = s;
    os[static_cast<size_t>(axis)] = len;
    Tensor<T> out(os);
    for (int64_t r = 0; r < outer; ++r)
        for (int64_t j = 0; j < len; ++j)
            for (int64_t c = 0; c < inner; ++c)
                out[(r * len + j) * inner + c] = av[(r * in_axis + start + j) * inner + c];
    auto back = [outer, inner, in_axis, start, len](Graph<T>& gr, int32_t self) {
        const auto& in = gr.inputs(self);
        const Tensor<T>& gout = gr.adjoint(self);
        Tensor<T>& dx = gr.adjoint(in[0]);
        for (int64_t r = 0; r < outer; ++r)
            for (int64_t j = 0; j < len; ++j)
                for (int64_t c = 0; c < inner; ++c)
                    dx[(r * in_axis + start + j) * inner + c] += gout[(r * len + j) * inner + c];
    };
    return g.make(std::move(out), {a.id}, back);
}

// ---------------------------------------------------------------------------
// linear algebra

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
    detail::check_same_graph(a, b, "matmul");
    Graph<T>& g = *a.graph;
    const Tensor<T>& av = g.value(a);
    const Tensor<T>& bv = g.value(b);
    if (av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0])
        data_error("matmul: incompatible shapes " + shape_str(av.shape()) + " x " +
                   shape_str(bv.shape()));
    int64_t m = av.shape()[0], k = av.shape()[1], n = bv.shape()[1];
    Tensor<T> out(Shape{m, n});
    EMap<T>(out.data(), m, n).noalias() =
        ECMap<T>(av.data(), m, k) * ECMap<T>(bv.data(), k, n);
    auto back = [m, k, n](Graph<T>& gr, int32_t self) {
        const auto& in = gr.inputs(self);
        const Tensor<T>& gout = gr.adjoint(self);
        const Tensor<T>& x = gr.value(in[0]);
        const Tensor<T>& y = gr.value(in[1]);
        EMap<T>(gr.adjoint(in[0]).data(), m, k).noalias() +=
            ECMap<T>(gout.data(), m, n) * ECMap<T>(y.data(), k, n).transpose();
        EMap<T>(gr.adjoint(in[1]).data(), k, n).noalias() +=
            ECMap<T>(x.data(), m, k).transpose() * ECMap<T>(gout.data(), m, n);
    };
    return g.make(std::move(out), {a.id, b.id}, back);
}

// Batched matmul over identical leading dimensions: [..., m, k] x [..., k, n].
template <typename T>
Var<T> bmm(Var<T> a, Var<T> b) {
    detail::check_same_graph(a, b, "bmm");
    Graph<T>& g = *a.graph;
    const Tensor<T>& av = g.value(a);
    const Tensor<T>& bv = g.value(b);
    int rank = av.rank();
    bool ok = rank >= 2 && bv.rank() == rank && av.shape()[static_cast<size_t>(rank - 1)] == bv.shape()[static_cast<size_t>(rank - 2)];
    if (ok)
        for (int d = 0; d < rank - 2; ++d)
            if (av.shape()[static_cast<size_t>(d)] != bv.shape()[static_cast<size_t>(d)]) ok = false;
    if (!ok)
        data_error("bmm: incompatible shapes " + shape_str(av.shape()) + " x " +
                   shape_str(bv.shape()));
    int64_t m = av.shape()[static_cast<size_t>(rank - 2)];
    int64_t k = av.shape()[static_cast<size_t>(rank - 1)];
    int64_t n = bv.shape()[static_cast<size_t>(rank - 1)];
    int64_t batch = av.numel() / (m * k);
    Shape os = av.shape();
    os[static_cast<size_t>(rank - 1)] = n;
    Tensor<T> out(os);
    for (int64_t i = 0; i < batch; ++i)
        EMap<T>(out.data() + i * m * n, m, n).noalias() =
            ECMap<T>(av.data() + i * m * k, m, k) * ECMap<T>(bv.data() + i * k * n, k, n);
    auto back = [batch, m, k, n](Graph<T>& gr, int32_t self) {
        const auto& in = gr.inputs(self);
        const Tensor<T>& gout = gr.adjoint(self);
        const Tensor<T>& x = gr.value(in[0]);
        const Tensor<T>& y = gr.value(in[1]);
        Tensor<T>& dx = gr.adjoint(in[0]);
        Tensor<T>& dy = gr.adjoint(in[1]);
        for (int64_t i = 0; i < batch; ++i) {
            EMap<T>(dx.data() + i * m * k, m, k).noalias() +=
                ECMap<T>(gout.data() + i * m * n, m, n) *
                ECMap<T>(y.data() + i * k * n, k, n).transpose();
            EMap<T>(dy.data() + i * k * n, k, n).noalias() +=
                ECMap<T>(x.data() + i * m * k, m, k).transpose() *
                ECMap<T>(gout.data() + i * m * n, m, n);
        }
    };
    return g.make(std::move(out), {a.id, b.id}, back);
}

// Row gather: indices of any shape into a [V, d] table -> idx_shape + [d].
template <typename T>
Var<T> gather_rows(Var<T> table, const Tensor<int64_t>& indices) {
    Graph<T>& g = *table.graph;
    const Tensor<T>& tv = g.value(table);
    if (tv.rank() != 2) data_error("gather_rows: table must be 2-D, got " + shape_str(tv.shape()));
    int64_t v = tv.shape()[0], d = tv.shape()[1];
    for (int64_t i = 0; i < indices.numel(); ++i)
        if (indices[i] < 0 || indices[i] >= v)
            data_error("gather_rows: index " + std::to_string(indices[i]) + " out of range [0," +
                       std::to_string(v) + ")");
    Shape os = indices.shape();
    os.push_back(d);
    Tensor<T> out(os);
    for (int64_t i = 0; i < indices.numel(); ++i)
        for (int64_t c = 0; c < d; ++c) out[i * d + c] = tv[indices[i] * d + c];
    auto idx = std::make_shared<Tensor<int64_t>>(indices);
    auto back = [idx, d](Graph<T>& gr, int32_t self) {
        const auto& in = gr.inputs(self);
        const Tensor<T>& gout = gr.adjoint(self);
        Tensor<T>& dt = gr.adjoint(in[0]);
        for (int64_t i = 0; i < idx->numel(); ++i)
            for (int64_t c = 0; c < d; ++c) dt[(*idx)[i] * d + c] += gout[i * d + c];
    };
    return g.make(std::move(out), {table.id}, back);
}

// ---------------------------------------------------------------------------
// convolution (NCHW x OIHW, via im2col + GEMM)

namespace detail {

struct ConvDims {
    int64_t n, c, h, w, o, kh, kw, oh, ow;
    int stride, pad;
};

template <typename T>
inline void im2col(const Tensor<T>& x, const ConvDims& d, Tensor<T>& col) {
    // col: [c*kh*kw, n*oh*ow]
    const int64_t cols = d.n * d.oh * d.ow;
    for (int64_t ch = 0; ch < d.c; ++ch)
        for (int64_t ki = 0; ki < d.kh; ++ki)
            for (int64_t kj = 0; kj < d.kw; ++kj) {
                T* dst = col.data() + ((ch * d.kh + ki) * d.kw + kj) * cols;
                for (int64_t nn = 0; nn < d.n; ++nn) {
                    const T* src = x.data() + (nn * d.c + ch) * d.h * d.w;
                    for (int64_t oi = 0; oi < d.oh; ++oi) {
                        int64_t ii = oi * d.stride - d.pad + ki;
                        for (int64_t oj = 0; oj < d.ow; ++oj) {
                            int64_t jj = oj * d.stride - d.pad + kj;
                            bool inside = ii >= 0 && ii < d.h && jj >= 0 && jj < d.w;
                            *dst++ = inside ? src[ii * d.w + jj] : T(0);
                        }
                    }
                }
            }
}

template <typename T>
inline void col2im_add(const Tensor<T>& col, const ConvDims& d, Tensor<T>& dx) {
    const int64_t cols = d.n * d.oh * d.ow;
    for (int64_t ch = 0; ch < d.c; ++ch)
        for (int64_t ki = 0; ki < d.kh; ++ki)
            for (int64_t kj = 0; kj < d.kw; ++kj) {
                const T* row = col.data() + ((ch * d.kh + ki) * d.kw + kj) * cols;
                for (int64_t nn = 0; nn < d.n; ++nn) {
                    T* dst = dx.data() + (nn * d.c + ch) * d.h * d.w;
                    const T* src = row + nn * d.oh * d.ow;
                    for (int64_t oi = 0; oi < d.oh; ++oi) {
                        int64_t ii = oi * d.stride - d.pad + ki;
                        if (ii < 0 || ii >= d.h) continue;
                        for (int64_t oj = 0; oj < d.ow; ++oj) {
                            int64_t jj = oj * d.stride - d.pad + kj;
                            if (jj >= 0 && jj < d.w) dst[ii * d.w + jj] += src[oi * d.ow + oj];
                        }
                    }
                }
            }
}

} // namespace detail

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> weight, int stride = 1, int pad = 0) {
    detail::check_same_graph(x, weight, "conv2d");
    Graph<T>& g = *x.graph;
    const Tensor<T>& xv = g.value(x);
    const Tensor<T>& wv = g.value(weight);
    if (xv.rank() != 4 || wv.rank() != 4 || xv.shape()[1] != wv.shape()[1])
        data_error("conv2d: incompatible shapes input " + shape_str(xv.shape()) + " kernel " +
                   shape_str(wv.shape()));
    detail::ConvDims d;
    d.n = xv.shape()[0]; d.c = xv.shape()[1]; d.h = xv.shape()[2]; d.w = xv.shape()[3];
    d.o = wv.shape()[0]; d.kh = wv.shape()[2]; d.kw = wv.shape()[3];
    d.stride = stride; d.pad = pad;
    d.oh = (d.h + 2 * pad - d.kh) / stride + 1;
    d.ow = (d.w + 2 * pad - d.kw) / stride + 1;
    if (d.oh <= 0 || d.ow <= 0)
        data_error("conv2d: empty output for input " + shape_str(xv.shape()));

    const int64_t ckk = d.c * d.kh * d.kw;
    const int64_t cols = d.n * d.oh * d.ow;
    auto col = std::make_shared<Tensor<T>>(Shape{ckk, cols});
    detail::im2col(xv, d, *col);

    // out_mat[o, (n, oh, ow)] = W[o, :] . col[:, (n, oh, ow)]
    Tensor<T> out_mat(Shape{d.o, cols});
    EMap<T>(out_mat.data(), d.o, cols).noalias() =
        ECMap<T>(wv.data(), d.o, ckk) * ECMap<T>(col->data(), ckk, cols);

    Tensor<T> out(Shape{d.n, d.o, d.oh, d.ow});
    const int64_t hw = d.oh * d.ow;
    for (int64_t o = 0; o < d.o; ++o)
        for (int64_t nn = 0; nn < d.n; ++nn)
            std::copy(out_mat.data() + (o * d.n + nn) * hw,
                      out_mat.data() + (o * d.n + nn) * hw + hw,
                      out.data() + (nn * d.o + o) * hw);

    auto back = [d, ckk, cols, hw, col](Graph<T>& gr, int32_t self) {
        const auto& in = gr.inputs(self);
        const Tensor<T>& gout = gr.adjoint(self);
        Tensor<T> gout_mat(Shape{d.o, cols});
        for (int64_t o = 0; o < d.o; ++o)
            for (int64_t nn = 0; nn < d.n; ++nn)
                std::copy(gout.data() + (nn * d.o + o) * hw,
                          gout.data() + (nn * d.o + o) * hw + hw,
                          gout_mat.data() + (o * d.n + nn) * hw);
        // dW += gout_mat . col^T
        EMap<T>(gr.adjoint(in[1]).data(), d.o, ckk).noalias() +=
            ECMap<T>(gout_mat.data(), d.o, cols) * ECMap<T>(col->data(), ckk, cols).transpose();
        // dX += col2im(W^T . gout_mat)
        const Tensor<T>& wv2 = gr.value(in[1]);
        Tensor<T> dcol(Shape{ckk, cols});
        EMap<T>(dcol.data(), ckk, cols).noalias() =
            ECMap<T>(wv2.data(), d.o, ckk).transpose() * ECMap<T>(gout_mat.data(), d.o, cols);
        detail::col2im_add(dcol, d, gr.adjoint(in[0]));
    };
    return g.make(std::move(out), {x.id, weight.id}, back);
}

// Adds a per-channel bias [C] to an NCHW tensor.
template <typename T>
Var<T> add_channel_bias(Var<T> x, Var<T> bias) {
    Graph<T>& g = *x.graph;
    const Shape& s = g.value(x).shape();
    if (s.size() != 4) data_error("add_channel_bias: input must be NCHW, got " + shape_str(s));
    Var<T> b4 = reshape(bias, Shape{1, g.value(bias).numel(), 1, 1});
    return add(x, b4);
}

// ---------------------------------------------------------------------------
// normalization and pooling

template <typename T>
Var<T> softmax(Var<T> a, int axis) {
    Graph<T>& g = *a.graph;
    const Tensor<T>& av = g.value(a);
    int rank = av.rank();
    if (axis < 0) axis += rank;
    const Shape& s = av.shape();
    int64_t dim = s[static_cast<size_t>(axis)];
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= s[static_cast<size_t>(d)];
    for (int d = axis + 1; d < rank; ++d) inner *= s[static_cast<size_t>(d)];
    Tensor<T> out(s);
    for (int64_t r = 0; r < outer; ++r)
        for (int64_t c = 0; c < inner; ++c) {
            const int64_t base = r * dim * inner + c;
            T mx = av[base];
            for (int64_t j = 1; j < dim; ++j) mx = std::max(mx, av[base + j * inner]);
            T z = T(0);
            for (int64_t j = 0; j < dim; ++j) {
                T e = std::exp(av[base + j * inner] - mx);
                out[base + j * inner] = e;
                z += e;
            }
            for (int64_t j = 0; j < dim; ++j) out[base + j * inner] /= z;
        }
    auto back = [outer, inner, dim](Graph<T>& gr, int32_t self) {
        const auto& in = gr.inputs(self);
        const Tensor<T>& gout = gr.adjoint(self);
        const Tensor<T>& y = gr.value(self);
        Tensor<T>& dx = gr.adjoint(in[0]);
        for (int64_t r = 0; r < outer; ++r)
            for (int64_t c = 0; c < inner; ++c) {
                const int64_t base = r * dim * inner + c;
                T dot = T(0);
                for (int64_t j = 0; j < dim; ++j) dot += gout[base + j * inner] * y[base + j * inner];
                for (int64_t j = 0; j < dim; ++j)
                    dx[base + j * inner] += y[base + j * inner] * (gout[base + j * inner] - dot);
            }
    };
    return g.make(std::move(out), {a.id}, back);
}

// Layer normalization over the last axis with learned gain/bias.
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-5)) {
    Graph<T>& g = *x.graph;
    const Tensor<T>& xv = g.value(x);
    int64_t d = xv.shape().back();
    int64_t rows = xv.numel() / d;
    const Tensor<T>& gv = g.value(gain);
    const Tensor<T>& bv = g.value(bias);
    if (gv.numel() != d || bv.numel() != d)
        data_error("layer_norm: gain/bias length must equal last axis " + std::to_string(d));
    Tensor<T> out(xv.shape());
    auto stats = std::make_shared<Tensor<T>>(Shape{rows, 2});  // mean, invstd per row
    for (int64_t r = 0; r < rows; ++r) {
        const T* px = xv.data() + r * d;
        T mean = T(0);
        for (int64_t j = 0; j < d; ++j) mean += px[j];
        mean /= static_cast<T>(d);
        T var = T(0);
        for (int64_t j = 0; j < d; ++j) var += (px[j] - mean) * (px[j] - mean);
        var /= static_cast<T>(d);
        T invstd = T(1) / std::sqrt(var + eps);
        (*stats)[r * 2] = mean;
        (*stats)[r * 2 + 1] = invstd;
        for (int64_t j = 0; j < d; ++j)
            out[r * d + j] = (px[j] - mean) * invstd * gv[j] + bv[j];
    }
    auto back = [rows, d, stats](Graph<T>& gr, int32_t self) {
        const auto& in = gr.inputs(self);
        const Tensor<T>& gout = gr.adjoint(self);
        const Tensor<T>& xv2 = gr.value(in[0]);
        const Tensor<T>& gv2 = gr.value(in[1]);
        Tensor<T>& dx = gr.adjoint(in[0]);
        Tensor<T>& dgain = gr.adjoint(in[1]);
        Tensor<T>& dbias = gr.adjoint(in[2]);
        for (int64_t r = 0; r < rows; ++r) {
            const T mean = (*stats)[r * 2], invstd = (*stats)[r * 2 + 1];
            const T* px = xv2.data() + r * d;
            const T* pg = gout.data() + r * d;
            T sum_dxhat = T(0), sum_dxhat_xhat = T(0);
            for (int64_t j = 0; j < d; ++j) {
                T xhat = (px[j] - mean) * invstd;
                T dxhat = pg[j] * gv2[j];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
                dgain[j] += pg[j] * xhat;
                dbias[j] += pg[j];
            }
            const T inv_d = T(1) / static_cast<T>(d);
            for (int64_t j = 0; j < d; ++j) {
                T xhat = (px[j] - mean) * invstd;
                T dxhat = pg[j] * gv2[j];
                dx[r * d + j] += invstd * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
            }
        }
    };
    return g.make(std::move(out), {x.id, gain.id, bias.id}, back);
}

// Group normalization on NCHW with per-channel affine parameters.
template <typename T>
Var<T> group_norm(Var<T> x, Var<T> gain, Var<T> bias, int groups, T eps = T(1e-5)) {
    Graph<T>& g = *x.graph;
    const Tensor<T>& xv = g.value(x);
    if (xv.rank() != 4) data_error("group_norm: input must be NCHW, got " + shape_str(xv.shape()));
    int64_t n = xv.shape()[0], c = xv.shape()[1], hw = xv.shape()[2] * xv.shape()[3];
    if (c % groups != 0)
        data_error("group_norm: channels " + std::to_string(c) + " not divisible by groups " +
                   std::to_string(groups));
    int64_t cpg = c / groups;
    int64_t block = cpg * hw;
    Tensor<T> out(xv.shape());
    const Tensor<T>& gv = g.value(gain);
    const Tensor<T>& bv = g.value(bias);
    auto stats = std::make_shared<Tensor<T>>(Shape{n * groups, 2});
    for (int64_t nn = 0; nn < n; ++nn)
        for (int64_t grp = 0; grp < groups; ++grp) {
            const int64_t base = nn * c * hw + grp * block;
            T mean = T(0);
            for (int64_t j = 0; j < block; ++j) mean += xv[base + j];
            mean /= static_cast<T>(block);
            T var = T(0);
            for (int64_t j = 0; j < block; ++j) var += (xv[base + j] - mean) * (xv[base + j] - mean);
            var /= static_cast<T>(block);
            T invstd = T(1) / std::sqrt(var + eps);
            (*stats)[(nn * groups + grp) * 2] = mean;
            (*stats)[(nn * groups + grp) * 2 + 1] = invstd;
            for (int64_t ch = 0; ch < cpg; ++ch) {
                const T w = gv[grp * cpg + ch], b = bv[grp * cpg + ch];
                for (int64_t j = 0; j < hw; ++j) {
                    int64_t ix = base + ch * hw + j;
                    out[ix] = (xv[ix] - mean) * invstd * w + b;
                }
            }
        }
    auto back = [n, c, hw, groups, cpg, block, stats](Graph<T>& gr, int32_t self) {
        const auto& in = gr.inputs(self);
        const Tensor<T>& gout = gr.adjoint(self);
        const Tensor<T>& xv2 = gr.value(in[0]);
        const Tensor<T>& gv2 = gr.value(in[1]);
        Tensor<T>& dx = gr.adjoint(in[0]);
        Tensor<T>& dgain = gr.adjoint(in[1]);
        Tensor<T>& dbias = gr.adjoint(in[2]);
        for (int64_t nn = 0; nn < n; ++nn)
            for (int64_t grp = 0; grp < groups; ++grp) {
                const int64_t base = nn * c * hw + grp * block;
                const T mean = (*stats)[(nn * groups + grp) * 2];
                const T invstd = (*stats)[(nn * groups + grp) * 2 + 1];
                T sum_dxhat = T(0), sum_dxhat_xhat = T(0);
                for (int64_t ch = 0; ch < cpg; ++ch) {
                    const T w = gv2[grp * cpg + ch];
                    for (int64_t j = 0; j < hw; ++j) {
                        int64_t ix = base + ch * hw + j;
                        T xhat = (xv2[ix] - mean) * invstd;
                        T dxhat = gout[ix] * w;
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dgain[grp * cpg + ch] += gout[ix] * xhat;
                        dbias[grp * cpg + ch] += gout[ix];
                    }
                }
                const T inv_b = T(1) / static_cast<T>(block);
                for (int64_t ch = 0; ch < cpg; ++ch) {
                    const T w = gv2[grp * cpg + ch];
                    for (int64_t j = 0; j < hw; ++j) {
                        int64_t ix = base + ch * hw + j;
                        T xhat = (xv2[ix] - mean) * invstd;
                        T dxhat = gout[ix] * w;
                        dx[ix] += invstd * (dxhat - inv_b * sum_dxhat - xhat * inv_b * sum_dxhat_xhat);
                    }
                }
            }
    };
    return g.make(std::move(out), {x.id, gain.id, bias.id}, back);
}

// Global average pool: [N, C, H, W] -> [N, C].
template <typename T>
Var<T> mean_pool(Var<T> x) {
    Graph<T>& g = *x.graph;
    const Tensor<T>& xv = g.value(x);
    if (xv.rank() != 4) data_error("mean_pool: input must be NCHW, got " + shape_str(xv.shape()));
    int64_t n = xv.shape()[0], c = xv.shape()[1], hw = xv.shape()[2] * xv.shape()[3];
    Tensor<T> out(Shape{n, c});
    for (int64_t i = 0; i < n * c; ++i) {
        T acc = T(0);
        for (int64_t j = 0; j < hw; ++j) acc += xv[i * hw + j];
        out[i] = acc / static_cast<T>(hw);
    }
    auto back = [hw](Graph<T>& gr, int32_t self) {
        const auto& in = gr.inputs(self);
        const Tensor<T>& gout = gr.adjoint(self);
        Tensor<T>& dx = gr.adjoint(in[0]);
        const T inv = T(1) / static_cast<T>(hw);
        for (int64_t i = 0; i < gout.numel(); ++i)
            for (int64_t j = 0; j < hw; ++j) dx[i * hw + j] += gout[i] * inv;
    };
    return g.make(std::move(out), {x.id}, back);
}

// Adaptive average pool to (oh, ow): window i covers [i*H/oh, (i+1)*H/oh).
template <typename T>
Var<T> avg_pool_to(Var<T> x, int64_t oh, int64_t ow) {
    Graph<T>& g = *x.graph;
    const Tensor<T>& xv = g.value(x);
    if (xv.rank() != 4) data_error("avg_pool_to: input must be NCHW, got " + shape_str(xv.shape()));
    int64_t n = xv.shape()[0], c = xv.shape()[1], h = xv.shape()[2], w = xv.shape()[3];
    Tensor<T> out(Shape{n, c, oh, ow});
    auto lo = [](int64_t i, int64_t src, int64_t dst) { return i * src / dst; };
    for (int64_t nc = 0; nc < n * c; ++nc)
        for (int64_t oi = 0; oi < oh; ++oi)
            for (int64_t oj = 0; oj < ow; ++oj) {
                int64_t i0 = lo(oi, h, oh), i1 = lo(oi + 1, h, oh);
                int64_t j0 = lo(oj, w, ow), j1 = lo(oj + 1, w, ow);
                T acc = T(0);
                for (int64_t i = i0; i < i1; ++i)
                    for (int64_t j = j0; j < j1; ++j) acc += xv[nc * h * w + i * w + j];
                out[nc * oh * ow + oi * ow + oj] = acc / static_cast<T>((i1 - i0) * (j1 - j0));
            }
    auto back = [h, w, oh, ow, lo](Graph<T>& gr, int32_t self) {
        const auto& in = gr.inputs(self);
        const Tensor<T>& gout = gr.adjoint(self);
        Tensor<T>& dx = gr.adjoint(in[0]);
        int64_t ncount = gout.numel() / (oh * ow);
        for (int64_t nc = 0; nc < ncount; ++nc)
            for (int64_t oi = 0; oi < oh; ++oi)
                for (int64_t oj = 0; oj < ow; ++oj) {
                    int64_t i0 = lo(oi, h, oh), i1 = lo(oi + 1, h, oh);
                    int64_t j0 = lo(oj, w, ow), j1 = lo(oj + 1, w, ow);
                    T share = gout[nc * oh * ow + oi * ow + oj] /
                              static_cast<T>((i1 - i0) * (j1 - j0));
                    for (int64_t i = i0; i < i1; ++i)
                        for (int64_t j = j0; j < j1; ++j) dx[nc * h * w + i * w + j] += share;
                }
    };
    return g.make(std::move(out), {x.id}, back);
}

// Scaled dot-product attention composed from primitives.
// q, k, v: [B, heads, S, dh] -> [B, heads, S, dh]
template <typename T>
Var<T> scaled_dot_product_attention(Var<T> q, Var<T> k, Var<T> v) {
    const Shape& s = q.graph->value(q).shape();
    if (s.size() != 4) data_error("attention: q must be [B,heads,S,dh], got " + shape_str(s));
    int64_t dh = s[3];
    Var<T> kt = permute(k, {0, 1, 3, 2});
    Var<T> scores = scale(bmm(q, kt), T(1) / std::sqrt(static_cast<T>(dh)));
    Var<T> attn = softmax(scores, -1);
    return bmm(attn, v);
}

// ---------------------------------------------------------------------------
// finite-difference verification

struct FdCheckReport {
    double max_rel_err = 0.0;
    int64_t coords_checked = 0;
    std::string worst_param;
    int64_t worst_index = -1;
    double worst_fd = 0.0;
    double worst_analytic = 0.0;
};

// Central-difference check of an analytic gradient map. `loss_fn` must be a
// deterministic pure function of the parameters. Relative error uses
// |fd - an| / max(|fd|, |an|, 1e-6), the floor guarding true-zero gradients.
template <typename T>
FdCheckReport fd_check(const std::function<double(const std::map<std::string, Tensor<T>>&)>& loss_fn,
                       const std::map<std::string, Tensor<T>>& params,
                       const std::map<std::string, Tensor<T>>& analytic,
                       double eps = 1e-5, int64_t min_coords = 256, uint64_t seed = 0) {
    std::vector<std::pair<std::string, int64_t>> coords;  // (param, flat index)
    int64_t total = 0;
    for (const auto& [name, t] : params) total += t.numel();
    Rng rng(derive_seed(seed, 0x6664636865636bULL));
    if (total <= min_coords) {
        for (const auto& [name, t] : params)
            for (int64_t i = 0; i < t.numel(); ++i) coords.emplace_back(name, i);
    } else {
        auto picks = rng.sample_without_replacement(total, min_coords);
        std::sort(picks.begin(), picks.end());
        size_t pi = 0;
        int64_t base = 0;
        for (const auto& [name, t] : params) {
            while (pi < picks.size() && picks[pi] < base + t.numel()) {
                coords.emplace_back(name, picks[pi] - base);
                ++pi;
            }
            base += t.numel();
        }
    }
    FdCheckReport rep;
    rep.coords_checked = static_cast<int64_t>(coords.size());
    std::map<std::string, Tensor<T>> work = params;
    for (const auto& [name, i] : coords) {
        Tensor<T>& t = work[name];
        const T orig = t[i];
        t[i] = orig + static_cast<T>(eps);
        double fp = loss_fn(work);
        t[i] = orig - static_cast<T>(eps);
        double fm = loss_fn(work);
        t[i] = orig;
        double fd = (fp - fm) / (2.0 * eps);
        double an = static_cast<double>(analytic.at(name)[i]);
        double denom = std::max({std::abs(fd), std::abs(an), 1e-6});
        double rel = std::abs(fd - an) / denom;
        if (rel > rep.max_rel_err) {
            rep.max_rel_err = rel;
            rep.worst_param = name;
            rep.worst_index = i;
            rep.worst_fd = fd;
            rep.worst_analytic = an;
        }
    }
    return rep;
}

} // namespace occurate::ad
