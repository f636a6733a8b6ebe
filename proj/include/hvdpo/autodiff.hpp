#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "hvdpo/tensor.hpp"

namespace hvdpo {

enum class Primitive {
    leaf,
    add,
    subtract,
    multiply,
    scale,
    matmul,
    conv2d,
    softmax,
    sigmoid,
    log,
    exp,
    sum,
    mean,
    squared_norm,
    reshape,
    concat,
    transpose,
    slice,
};

inline const char* primitive_name(Primitive p) {
    switch (p) {
        case Primitive::leaf: return "leaf";
        case Primitive::add: return "add";
        case Primitive::subtract: return "subtract";
        case Primitive::multiply: return "multiply";
        case Primitive::scale: return "scale";
        case Primitive::matmul: return "matmul";
        case Primitive::conv2d: return "conv2d";
        case Primitive::softmax: return "softmax";
        case Primitive::sigmoid: return "sigmoid";
        case Primitive::log: return "log";
        case Primitive::exp: return "exp";
        case Primitive::sum: return "sum";
        case Primitive::mean: return "mean";
        case Primitive::squared_norm: return "squared_norm";
        case Primitive::reshape: return "reshape";
        case Primitive::concat: return "concat";
        case Primitive::transpose: return "transpose";
        case Primitive::slice: return "slice";
    }
    return "?";
}

// Handle into a tape node.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// Attributes for apply_primitive; only the fields a primitive needs are read.
struct PrimAttrs {
    double scalar = 0.0;           // scale
    int axis = 0;                  // concat, slice
    int start = 0, len = 0;        // slice
    Shape shape;                   // reshape
};

// Reverse-mode tape. Nodes are appended in topological order; backward walks
// ids in reverse, so each node is visited exactly once. Gradients are only
// materialized for nodes that (transitively) require them.
template <typename T>
class TapeT {
  public:
    Var leaf(TensorT<T> value, bool requires_grad = true) {
        Node n;
        n.op = Primitive::leaf;
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        return push(std::move(n));
    }

    Var constant(TensorT<T> value) { return leaf(std::move(value), false); }

    Var add(Var a, Var b) { return elementwise2(Primitive::add, a, b); }
    Var subtract(Var a, Var b) { return elementwise2(Primitive::subtract, a, b); }
    Var multiply(Var a, Var b) { return elementwise2(Primitive::multiply, a, b); }

    Var scale(Var a, double s) {
        Node n;
        n.op = Primitive::scale;
        n.parents = {a.id, -1};
        n.scalar = s;
        n.value = value(a);
        for (auto& v : n.value.data) v = static_cast<T>(static_cast<double>(v) * s);
        n.requires_grad = node(a).requires_grad;
        return push(std::move(n));
    }

    Var matmul(Var a, Var b) {
        const auto& av = value(a);
        const auto& bv = value(b);
        if (av.shape.size() != 2 || bv.shape.size() != 2 || av.shape[1] != bv.shape[0]) {
            fail_shapes("matmul", av.shape, bv.shape);
        }
        int m = av.shape[0], k = av.shape[1], p = bv.shape[1];
        Node n;
        n.op = Primitive::matmul;
        n.parents = {a.id, b.id};
        n.value = TensorT<T>({m, p});
        for (int i = 0; i < m; ++i) {
            for (int kk = 0; kk < k; ++kk) {
                T aik = av.data[static_cast<size_t>(i) * k + kk];
                const T* brow = &bv.data[static_cast<size_t>(kk) * p];
                T* orow = &n.value.data[static_cast<size_t>(i) * p];
                for (int j = 0; j < p; ++j) orow[j] += aik * brow[j];
            }
        }
        n.requires_grad = node(a).requires_grad || node(b).requires_grad;
        return push(std::move(n));
    }

    // 3x3 kernel, stride 1, zero padding 1. x: [N,Cin,H,W], w: [Cout,Cin,3,3].
    Var conv2d(Var x, Var w) {
        const auto& xv = value(x);
        const auto& wv = value(w);
        if (xv.shape.size() != 4 || wv.shape.size() != 4 || wv.shape[2] != 3 ||
            wv.shape[3] != 3 || xv.shape[1] != wv.shape[1]) {
            fail_shapes("conv2d", xv.shape, wv.shape);
        }
        int N = xv.shape[0], ci = xv.shape[1], h = xv.shape[2], wd = xv.shape[3];
        int co = wv.shape[0];
        Node n;
        n.op = Primitive::conv2d;
        n.parents = {x.id, w.id};
        n.value = TensorT<T>({N, co, h, wd});
        for (int bi = 0; bi < N; ++bi) {
            for (int oc = 0; oc < co; ++oc) {
                for (int ic = 0; ic < ci; ++ic) {
                    const T* ker = &wv.data[(static_cast<size_t>(oc) * ci + ic) * 9];
                    const T* img = &xv.data[(static_cast<size_t>(bi) * ci + ic) * h * wd];
                    T* out = &n.value.data[(static_cast<size_t>(bi) * co + oc) * h * wd];
                    for (int y = 0; y < h; ++y) {
                        for (int xpos = 0; xpos < wd; ++xpos) {
                            T acc = 0;
                            for (int dy = -1; dy <= 1; ++dy) {
                                int iy = y + dy;
                                if (iy < 0 || iy >= h) continue;
                                for (int dx = -1; dx <= 1; ++dx) {
                                    int ix = xpos + dx;
                                    if (ix < 0 || ix >= wd) continue;
                                    acc += ker[(dy + 1) * 3 + (dx + 1)] * img[iy * wd + ix];
                                }
                            }
                            out[y * wd + xpos] += acc;
                        }
                    }
                }
            }
        }
        n.requires_grad = node(x).requires_grad || node(w).requires_grad;
        return push(std::move(n));
    }

    // Softmax over the last axis with max subtraction.
    Var softmax(Var a) {
        const auto& av = value(a);
        Node n;
        n.op = Primitive::softmax;
        n.parents = {a.id, -1};
        n.value = TensorT<T>(av.shape);
        int64_t cols = av.shape.back();
        int64_t rows = av.numel() / cols;
        for (int64_t r = 0; r < rows; ++r) {
            const T* in = &av.data[static_cast<size_t>(r * cols)];
            T* out = &n.value.data[static_cast<size_t>(r * cols)];
            T mx = in[0];
            for (int64_t c = 1; c < cols; ++c) mx = std::max(mx, in[c]);
            T sum = 0;
            for (int64_t c = 0; c < cols; ++c) {
                out[c] = std::exp(in[c] - mx);
                sum += out[c];
            }
            for (int64_t c = 0; c < cols; ++c) out[c] /= sum;
        }
        n.requires_grad = node(a).requires_grad;
        return push(std::move(n));
    }

    Var sigmoid(Var a) {
        Node n;
        n.op = Primitive::sigmoid;
        n.parents = {a.id, -1};
        n.value = value(a);
        for (auto& v : n.value.data) {
            if (v >= 0) {
                v = T(1) / (T(1) + std::exp(-v));
            } else {
                T e = std::exp(v);
                v = e / (T(1) + e);
            }
        }
        n.requires_grad = node(a).requires_grad;
        return push(std::move(n));
    }

    Var log(Var a) {
        Node n;
        n.op = Primitive::log;
        n.parents = {a.id, -1};
        n.value = value(a);
        for (auto& v : n.value.data) {
            if (!(v > T(0))) {
                throw std::runtime_error("log: non-positive value " + std::to_string(v));
            }
            v = std::log(v);
        }
        n.requires_grad = node(a).requires_grad;
        return push(std::move(n));
    }

    Var exp(Var a) {
        Node n;
        n.op = Primitive::exp;
        n.parents = {a.id, -1};
        n.value = value(a);
        for (auto& v : n.value.data) v = std::exp(v);
        n.requires_grad = node(a).requires_grad;
        return push(std::move(n));
    }

    Var sum(Var a) { return reduce(Primitive::sum, a); }
    Var mean(Var a) { return reduce(Primitive::mean, a); }
    Var squared_norm(Var a) { return reduce(Primitive::squared_norm, a); }

    Var reshape(Var a, Shape shape) {
        const auto& av = value(a);
        if (numel_of(shape) != av.numel()) {
            throw std::runtime_error(std::string("reshape: cannot view ") + shape_str(av.shape) +
                                     " as " + shape_str(shape));
        }
        Node n;
        n.op = Primitive::reshape;
        n.parents = {a.id, -1};
        n.value = TensorT<T>(std::move(shape), av.data);
        n.requires_grad = node(a).requires_grad;
        return push(std::move(n));
    }

    Var concat(Var a, Var b, int axis) {
        const auto& av = value(a);
        const auto& bv = value(b);
        bool ok = av.shape.size() == bv.shape.size() && axis >= 0 &&
                  axis < static_cast<int>(av.shape.size());
        if (ok) {
            for (size_t i = 0; i < av.shape.size(); ++i) {
                if (static_cast<int>(i) != axis && av.shape[i] != bv.shape[i]) ok = false;
            }
        }
        if (!ok) fail_shapes("concat", av.shape, bv.shape);
        Shape out_shape = av.shape;
        out_shape[axis] += bv.shape[axis];
        Node n;
        n.op = Primitive::concat;
        n.parents = {a.id, b.id};
        n.axis = axis;
        n.value = TensorT<T>(out_shape);
        int64_t outer = 1;
        for (int i = 0; i < axis; ++i) outer *= av.shape[i];
        int64_t inner = 1;
        for (size_t i = axis + 1; i < av.shape.size(); ++i) inner *= av.shape[i];
        int64_t ablk = av.shape[axis] * inner, bblk = bv.shape[axis] * inner;
        for (int64_t o = 0; o < outer; ++o) {
            std::copy_n(&av.data[static_cast<size_t>(o * ablk)], ablk,
                        &n.value.data[static_cast<size_t>(o * (ablk + bblk))]);
            std::copy_n(&bv.data[static_cast<size_t>(o * bblk)], bblk,
                        &n.value.data[static_cast<size_t>(o * (ablk + bblk) + ablk)]);
        }
        n.requires_grad = node(a).requires_grad || node(b).requires_grad;
        return push(std::move(n));
    }

    Var transpose(Var a) {
        const auto& av = value(a);
        if (av.shape.size() != 2) {
            throw std::runtime_error("transpose: expected 2-D, got " + shape_str(av.shape));
        }
        int m = av.shape[0], p = av.shape[1];
        Node n;
        n.op = Primitive::transpose;
        n.parents = {a.id, -1};
        n.value = TensorT<T>({p, m});
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < p; ++j)
                n.value.data[static_cast<size_t>(j) * m + i] =
                    av.data[static_cast<size_t>(i) * p + j];
        n.requires_grad = node(a).requires_grad;
        return push(std::move(n));
    }

    Var slice(Var a, int axis, int start, int len) {
        const auto& av = value(a);
        if (axis < 0 || axis >= static_cast<int>(av.shape.size()) || start < 0 || len <= 0 ||
            start + len > av.shape[axis]) {
            throw std::runtime_error("slice: range [" + std::to_string(start) + "," +
                                     std::to_string(start + len) + ") invalid for axis " +
                                     std::to_string(axis) + " of " + shape_str(av.shape));
        }
        Shape out_shape = av.shape;
        out_shape[axis] = len;
        Node n;
        n.op = Primitive::slice;
        n.parents = {a.id, -1};
        n.axis = axis;
        n.start = start;
        n.len = len;
        n.value = TensorT<T>(out_shape);
        int64_t outer = 1;
        for (int i = 0; i < axis; ++i) outer *= av.shape[i];
        int64_t inner = 1;
        for (size_t i = axis + 1; i < av.shape.size(); ++i) inner *= av.shape[i];
        int64_t src_blk = av.shape[axis] * inner, dst_blk = len * inner;
        for (int64_t o = 0; o < outer; ++o) {
            std::copy_n(&av.data[static_cast<size_t>(o * src_blk + start * inner)], dst_blk,
                        &n.value.data[static_cast<size_t>(o * dst_blk)]);
        }
        n.requires_grad = node(a).requires_grad;
        return push(std::move(n));
    }

    // Generic dispatcher over the registered primitive set.
    Var apply_primitive(Primitive op, std::span<const Var> inputs, const PrimAttrs& attrs = {}) {
        auto need = [&](size_t k) {
            if (inputs.size() != k) {
                throw std::runtime_error(std::string(primitive_name(op)) + ": expected " +
                                         std::to_string(k) + " inputs, got " +
                                         std::to_string(inputs.size()));
            }
        };
        switch (op) {
            case Primitive::add: need(2); return add(inputs[0], inputs[1]);
            case Primitive::subtract: need(2); return subtract(inputs[0], inputs[1]);
            case Primitive::multiply: need(2); return multiply(inputs[0], inputs[1]);
            case Primitive::scale: need(1); return scale(inputs[0], attrs.scalar);
            case Primitive::matmul: need(2); return matmul(inputs[0], inputs[1]);
            case Primitive::conv2d: need(2); return conv2d(inputs[0], inputs[1]);
            case Primitive::softmax: need(1); return softmax(inputs[0]);
            case Primitive::sigmoid: need(1); return sigmoid(inputs[0]);
            case Primitive::log: need(1); return log(inputs[0]);
            case Primitive::exp: need(1); return exp(inputs[0]);
            case Primitive::sum: need(1); return sum(inputs[0]);
            case Primitive::mean: need(1); return mean(inputs[0]);
            case Primitive::squared_norm: need(1); return squared_norm(inputs[0]);
            case Primitive::reshape: need(1); return reshape(inputs[0], attrs.shape);
            case Primitive::concat: need(2); return concat(inputs[0], inputs[1], attrs.axis);
            case Primitive::transpose: need(1); return transpose(inputs[0]);
            case Primitive::slice:
                need(1);
                return slice(inputs[0], attrs.axis, attrs.start, attrs.len);
            case Primitive::leaf: break;
        }
        throw std::runtime_error("apply_primitive: not a computable primitive");
    }

    const TensorT<T>& value(Var v) const { return node(v).value; }

    const TensorT<T>& grad(Var v) const {
        const Node& n = node(v);
        if (n.grad.numel() == 0) {
            static thread_local TensorT<T> zero;
            zero = TensorT<T>(n.value.shape);
            return zero;
        }
        return n.grad;
    }

    bool requires_grad(Var v) const { return node(v).requires_grad; }

    size_t size() const { return nodes_.size(); }

    // Reverse accumulation from a scalar root. Fills gradients of every
    // reachable node that requires gradient; leaves hold d(root)/d(leaf).
    void backward(Var root) {
        Node& rn = node(root);
        if (rn.value.numel() != 1) {
            throw std::runtime_error("backward: root must be scalar, has shape " +
                                     shape_str(rn.value.shape));
        }
        std::vector<char> reach(nodes_.size(), 0);
        reach[root.id] = 1;
        for (int id = root.id; id >= 0; --id) {
            if (!reach[id] || !nodes_[id].requires_grad) continue;
            for (int p : nodes_[id].parents) {
                if (p >= 0 && nodes_[p].requires_grad) reach[p] = 1;
            }
        }
        for (int id = 0; id <= root.id; ++id) {
            if (reach[id] && nodes_[id].requires_grad) {
                nodes_[id].grad = TensorT<T>(nodes_[id].value.shape);
            }
        }
        if (!rn.requires_grad) return;
        rn.grad.data[0] = T(1);
        for (int id = root.id; id >= 0; --id) {
            if (!reach[id] || !nodes_[id].requires_grad) continue;
            pull_back(id);
        }
    }

  private:
    struct Node {
        TensorT<T> value;
        TensorT<T> grad;
        Primitive op = Primitive::leaf;
        std::array<int, 2> parents = {-1, -1};
        double scalar = 0.0;
        int axis = 0, start = 0, len = 0;
        bool requires_grad = false;
    };

    std::vector<Node> nodes_;

    Node& node(Var v) { return nodes_.at(static_cast<size_t>(v.id)); }
    const Node& node(Var v) const { return nodes_.at(static_cast<size_t>(v.id)); }

    Var push(Node n) {
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    [[noreturn]] static void fail_shapes(const char* prim, const Shape& a, const Shape& b) {
        throw std::runtime_error(std::string(prim) + ": incompatible shapes " + shape_str(a) +
                                 " and " + shape_str(b));
    }

    Var elementwise2(Primitive op, Var a, Var b) {
        const auto& av = value(a);
        const auto& bv = value(b);
        if (!av.same_shape(bv)) fail_shapes(primitive_name(op), av.shape, bv.shape);
        Node n;
        n.op = op;
        n.parents = {a.id, b.id};
        n.value = TensorT<T>(av.shape);
        const size_t cnt = av.data.size();
        switch (op) {
            case Primitive::add:
                for (size_t i = 0; i < cnt; ++i) n.value.data[i] = av.data[i] + bv.data[i];
                break;
            case Primitive::subtract:
                for (size_t i = 0; i < cnt; ++i) n.value.data[i] = av.data[i] - bv.data[i];
                break;
            case Primitive::multiply:
                for (size_t i = 0; i < cnt; ++i) n.value.data[i] = av.data[i] * bv.data[i];
                break;
            default: throw std::runtime_error("elementwise2: bad op");
        }
        n.requires_grad = node(a).requires_grad || node(b).requires_grad;
        return push(std::move(n));
    }

    Var reduce(Primitive op, Var a) {
        const auto& av = value(a);
        Node n;
        n.op = op;
        n.parents = {a.id, -1};
        T acc = 0;
        switch (op) {
            case Primitive::sum:
                for (T v : av.data) acc += v;
                break;
            case Primitive::mean:
                for (T v : av.data) acc += v;
                acc /= static_cast<T>(av.numel());
                break;
            case Primitive::squared_norm:
                for (T v : av.data) acc += v * v;
                break;
            default: throw std::runtime_error("reduce: bad op");
        }
        n.value = TensorT<T>({1}, {acc});
        n.requires_grad = node(a).requires_grad;
        return push(std::move(n));
    }

    void accumulate(int parent, const TensorT<T>& contribution) {
        Node& p = nodes_[parent];
        if (!p.requires_grad) return;
        for (size_t i = 0; i < p.grad.data.size(); ++i) p.grad.data[i] += contribution.data[i];
    }

    void pull_back(int id) {
        Node& n = nodes_[id];
        const TensorT<T>& g = n.grad;
        auto parent_needs = [&](int slot) {
            int p = n.parents[slot];
            return p >= 0 && nodes_[p].requires_grad;
        };
        switch (n.op) {
            case Primitive::leaf: return;
            case Primitive::add: {
                if (parent_needs(0)) accumulate(n.parents[0], g);
                if (parent_needs(1)) accumulate(n.parents[1], g);
                return;
            }
            case Primitive::subtract: {
                if (parent_needs(0)) accumulate(n.parents[0], g);
                if (parent_needs(1)) {
                    TensorT<T> neg = g;
                    for (auto& v : neg.data) v = -v;
                    accumulate(n.parents[1], neg);
                }
                return;
            }
            case Primitive::multiply: {
                for (int slot = 0; slot < 2; ++slot) {
                    if (!parent_needs(slot)) continue;
                    const auto& other = nodes_[n.parents[1 - slot]].value;
                    TensorT<T> d(g.shape);
                    for (size_t i = 0; i < g.data.size(); ++i)
                        d.data[i] = g.data[i] * other.data[i];
                    accumulate(n.parents[slot], d);
                }
                return;
            }
            case Primitive::scale: {
                if (!parent_needs(0)) return;
                TensorT<T> d = g;
                for (auto& v : d.data) v = static_cast<T>(static_cast<double>(v) * n.scalar);
                accumulate(n.parents[0], d);
                return;
            }
            case Primitive::matmul: {
                const auto& av = nodes_[n.parents[0]].value;
                const auto& bv = nodes_[n.parents[1]].value;
                int m = av.shape[0], k = av.shape[1], p = bv.shape[1];
                if (parent_needs(0)) {
                    TensorT<T> da({m, k});
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < p; ++j) {
                            T gij = g.data[static_cast<size_t>(i) * p + j];
                            const T* brow = &bv.data[0];
                            for (int kk = 0; kk < k; ++kk)
                                da.data[static_cast<size_t>(i) * k + kk] +=
                                    gij * brow[static_cast<size_t>(kk) * p + j];
                        }
                    accumulate(n.parents[0], da);
                }
                if (parent_needs(1)) {
                    TensorT<T> db({k, p});
                    for (int i = 0; i < m; ++i)
                        for (int kk = 0; kk < k; ++kk) {
                            T aik = av.data[static_cast<size_t>(i) * k + kk];
                            const T* grow = &g.data[static_cast<size_t>(i) * p];
                            T* drow = &db.data[static_cast<size_t>(kk) * p];
                            for (int j = 0; j < p; ++j) drow[j] += aik * grow[j];
                        }
                    accumulate(n.parents[1], db);
                }
                return;
            }
            case Primitive::conv2d: {
                const auto& xv = nodes_[n.parents[0]].value;
                const auto& wv = nodes_[n.parents[1]].value;
                int N = xv.shape[0], ci = xv.shape[1], h = xv.shape[2], wd = xv.shape[3];
                int co = wv.shape[0];
                if (parent_needs(0)) {
                    TensorT<T> dx(xv.shape);
                    for (int bi = 0; bi < N; ++bi)
                        for (int oc = 0; oc < co; ++oc)
                            for (int ic = 0; ic < ci; ++ic) {
                                const T* ker = &wv.data[(static_cast<size_t>(oc) * ci + ic) * 9];
                                const T* gout =
                                    &g.data[(static_cast<size_t>(bi) * co + oc) * h * wd];
                                T* dimg = &dx.data[(static_cast<size_t>(bi) * ci + ic) * h * wd];
                                for (int y = 0; y < h; ++y)
                                    for (int xpos = 0; xpos < wd; ++xpos) {
                                        T gv = gout[y * wd + xpos];
                                        for (int dy = -1; dy <= 1; ++dy) {
                                            int iy = y + dy;
                                            if (iy < 0 || iy >= h) continue;
                                            for (int dx2 = -1; dx2 <= 1; ++dx2) {
                                                int ix = xpos + dx2;
                                                if (ix < 0 || ix >= wd) continue;
                                                dimg[iy * wd + ix] +=
                                                    gv * ker[(dy + 1) * 3 + (dx2 + 1)];
                                            }
                                        }
                                    }
                            }
                    accumulate(n.parents[0], dx);
                }
                if (parent_needs(1)) {
                    TensorT<T> dw(wv.shape);
                    for (int bi = 0; bi < N; ++bi)
                        for (int oc = 0; oc < co; ++oc)
                            for (int ic = 0; ic < ci; ++ic) {
                                T* dker = &dw.data[(static_cast<size_t>(oc) * ci + ic) * 9];
                                const T* gout =
                                    &g.data[(static_cast<size_t>(bi) * co + oc) * h * wd];
                                const T* img =
                                    &xv.data[(static_cast<size_t>(bi) * ci + ic) * h * wd];
                                for (int y = 0; y < h; ++y)
                                    for (int xpos = 0; xpos < wd; ++xpos) {
                                        T gv = gout[y * wd + xpos];
                                        for (int dy = -1; dy <= 1; ++dy) {
                                            int iy = y + dy;
                                            if (iy < 0 || iy >= h) continue;
                                            for (int dx2 = -1; dx2 <= 1; ++dx2) {
                                                int ix = xpos + dx2;
                                                if (ix < 0 || ix >= wd) continue;
                                                dker[(dy + 1) * 3 + (dx2 + 1)] +=
                                                    gv * img[iy * wd + ix];
                                            }
                                        }
                                    }
                            }
                    accumulate(n.parents[1], dw);
                }
                return;
            }
            case Primitive::softmax: {
                if (!parent_needs(0)) return;
                const auto& y = n.value;
                int64_t cols = y.shape.back();
                int64_t rows = y.numel() / cols;
                TensorT<T> d(y.shape);
                for (int64_t r = 0; r < rows; ++r) {
                    const T* yr = &y.data[static_cast<size_t>(r * cols)];
                    const T* gr = &g.data[static_cast<size_t>(r * cols)];
                    T* dr = &d.data[static_cast<size_t>(r * cols)];
                    T dot = 0;
                    for (int64_t c = 0; c < cols; ++c) dot += gr[c] * yr[c];
                    for (int64_t c = 0; c < cols; ++c) dr[c] = yr[c] * (gr[c] - dot);
                }
                accumulate(n.parents[0], d);
                return;
            }
            case Primitive::sigmoid: {
                if (!parent_needs(0)) return;
                TensorT<T> d(n.value.shape);
                for (size_t i = 0; i < d.data.size(); ++i) {
                    T y = n.value.data[i];
                    d.data[i] = g.data[i] * y * (T(1) - y);
                }
                accumulate(n.parents[0], d);
                return;
            }
            case Primitive::log: {
                if (!parent_needs(0)) return;
                const auto& x = nodes_[n.parents[0]].value;
                TensorT<T> d(x.shape);
                for (size_t i = 0; i < d.data.size(); ++i) d.data[i] = g.data[i] / x.data[i];
                accumulate(n.parents[0], d);
                return;
            }
            case Primitive::exp: {
                if (!parent_needs(0)) return;
                TensorT<T> d(n.value.shape);
                for (size_t i = 0; i < d.data.size(); ++i)
                    d.data[i] = g.data[i] * n.value.data[i];
                accumulate(n.parents[0], d);
                return;
            }
            case Primitive::sum: {
                if (!parent_needs(0)) return;
                const auto& x = nodes_[n.parents[0]].value;
                accumulate(n.parents[0], TensorT<T>::full(x.shape, g.data[0]));
                return;
            }
            case Primitive::mean: {
                if (!parent_needs(0)) return;
                const auto& x = nodes_[n.parents[0]].value;
                accumulate(n.parents[0],
                           TensorT<T>::full(x.shape, g.data[0] / static_cast<T>(x.numel())));
                return;
            }
            case Primitive::squared_norm: {
                if (!parent_needs(0)) return;
                const auto& x = nodes_[n.parents[0]].value;
                TensorT<T> d(x.shape);
                for (size_t i = 0; i < d.data.size(); ++i)
                    d.data[i] = T(2) * g.data[0] * x.data[i];
                accumulate(n.parents[0], d);
                return;
            }
            case Primitive::reshape: {
                if (!parent_needs(0)) return;
                const auto& x = nodes_[n.parents[0]].value;
                accumulate(n.parents[0], TensorT<T>(x.shape, g.data));
                return;
            }
            case Primitive::concat: {
                const auto& av = nodes_[n.parents[0]].value;
                const auto& bv = nodes_[n.parents[1]].value;
                int axis = n.axis;
                int64_t outer = 1;
                for (int i = 0; i < axis; ++i) outer *= av.shape[i];
                int64_t inner = 1;
                for (size_t i = axis + 1; i < av.shape.size(); ++i) inner *= av.shape[i];
                int64_t ablk = av.shape[axis] * inner, bblk = bv.shape[axis] * inner;
                if (parent_needs(0)) {
                    TensorT<T> da(av.shape);
                    for (int64_t o = 0; o < outer; ++o)
                        std::copy_n(&g.data[static_cast<size_t>(o * (ablk + bblk))], ablk,
                                    &da.data[static_cast<size_t>(o * ablk)]);
                    accumulate(n.parents[0], da);
                }
                if (parent_needs(1)) {
                    TensorT<T> db(bv.shape);
                    for (int64_t o = 0; o < outer; ++o)
                        std::copy_n(&g.data[static_cast<size_t>(o * (ablk + bblk) + ablk)], bblk,
                                    &db.data[static_cast<size_t>(o * bblk)]);
                    accumulate(n.parents[1], db);
                }
                return;
            }
            case Primitive::transpose: {
                if (!parent_needs(0)) return;
                int p = n.value.shape[0], m = n.value.shape[1];
                TensorT<T> d({m, p});
                for (int i = 0; i < p; ++i)
                    for (int j = 0; j < m; ++j)
                        d.data[static_cast<size_t>(j) * p + i] =
                            g.data[static_cast<size_t>(i) * m + j];
                accumulate(n.parents[0], d);
                return;
            }
            case Primitive::slice: {
                if (!parent_needs(0)) return;
                const auto& x = nodes_[n.parents[0]].value;
                TensorT<T> d(x.shape);
                int axis = n.axis;
                int64_t outer = 1;
                for (int i = 0; i < axis; ++i) outer *= x.shape[i];
                int64_t inner = 1;
                for (size_t i = axis + 1; i < x.shape.size(); ++i) inner *= x.shape[i];
                int64_t src_blk = x.shape[axis] * inner, dst_blk = n.len * inner;
                for (int64_t o = 0; o < outer; ++o) {
                    const T* src = &g.data[static_cast<size_t>(o * dst_blk)];
                    T* dst = &d.data[static_cast<size_t>(o * src_blk + n.start * inner)];
                    for (int64_t i = 0; i < dst_blk; ++i) dst[i] += src[i];
                }
                accumulate(n.parents[0], d);
                return;
            }
        }
    }
};

using Tape = TapeT<float>;

// Central-difference gradient (f(x+h·e_i) − f(x−h·e_i)) / 2h, per coordinate.
// The independent oracle used by the gradient-check suite; computed in double.
inline TensorT<double> finite_difference_gradient(
    const std::function<double(const TensorT<double>&)>& f, const TensorT<double>& x, double h) {
    if (!(h > 0)) throw std::runtime_error("finite_difference_gradient: h must be positive");
    TensorT<double> grad(x.shape);
    TensorT<double> probe = x;
    for (size_t i = 0; i < x.data.size(); ++i) {
        probe.data[i] = x.data[i] + h;
        double up = f(probe);
        probe.data[i] = x.data[i] - h;
        double down = f(probe);
        probe.data[i] = x.data[i];
        if (!std::isfinite(up) || !std::isfinite(down)) {
            throw std::runtime_error("finite_difference_gradient: non-finite function value");
        }
        grad.data[i] = (up - down) / (2.0 * h);
    }
    return grad;
}

}  // namespace hvdpo
