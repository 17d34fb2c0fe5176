#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "xsplain/errors.hpp"
#include "xsplain/tensor.hpp"

namespace xsplain {

// Handle to a node on a tape. Only valid for the tape that produced it.
struct Var {
    int32_t id = -1;
    bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Values are computed eagerly when an op is recorded;
// backward() runs one reverse sweep and accumulates gradients into every
// node that (transitively) depends on a trainable leaf.
//
// Shape conventions: per-point feature matrices are [N x F] (one row per
// point); pooled voxel features are [C x V] (one column per voxel).
template <class T>
class TapeT {
public:
    using Tensor = TensorT<T>;

    Var leaf(Tensor value, bool trainable = true) {
        Node n;
        n.op = Op::Leaf;
        n.rg = trainable;
        n.value = std::move(value);
        return push(std::move(n));
    }

    Var constant(Tensor value) { return leaf(std::move(value), false); }

    // y = x * W (+ b). x is [N x in] or [in]; W is [in x out]; b is [out].
    Var linear(Var x, Var W, Var b = Var{}) {
        const Tensor& xv = value(x);
        const Tensor& wv = value(W);
        if (wv.rank() != 2) throw DimensionError("linear: weight must be rank 2, got " + wv.shape_str());
        const int64_t in = wv.rows(), out = wv.cols();
        Tensor y;
        if (xv.rank() == 2) {
            if (xv.cols() != in)
                throw DimensionError("linear: input " + xv.shape_str() + " vs weight " + wv.shape_str());
            y = Tensor::zeros({xv.rows(), out});
            kernels::gemm_nn(xv.data(), wv.data(), y.data(), xv.rows(), in, out, false);
            if (b.valid()) {
                const Tensor& bv = value(b);
                check_vec(bv, out, "linear bias");
                for (int64_t r = 0; r < xv.rows(); ++r)
                    for (int64_t c = 0; c < out; ++c) y.at(r, c) += bv.at(c);
            }
        } else if (xv.rank() == 1) {
            if (xv.dim(0) != in)
                throw DimensionError("linear: input " + xv.shape_str() + " vs weight " + wv.shape_str());
            y = Tensor::zeros({out});
            kernels::gevm(xv.data(), wv.data(), y.data(), in, out, false);
            if (b.valid()) {
                const Tensor& bv = value(b);
                check_vec(bv, out, "linear bias");
                for (int64_t c = 0; c < out; ++c) y.at(c) += bv.at(c);
            }
        } else {
            throw DimensionError("linear: input must be rank 1 or 2, got " + xv.shape_str());
        }
        Node n;
        n.op = Op::Linear;
        n.a = x.id;
        n.b = W.id;
        n.c = b.id;
        n.value = std::move(y);
        return push(std::move(n));
    }

    Var relu(Var x) {
        Tensor y = value(x);
        for (auto& e : y.v) e = e > T(0) ? e : T(0);
        Node n;
        n.op = Op::Relu;
        n.a = x.id;
        n.value = std::move(y);
        return push(std::move(n));
    }

    Var matmul(Var a, Var b) {
        const Tensor& av = value(a);
        const Tensor& bv = value(b);
        if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows())
            throw DimensionError("matmul: " + av.shape_str() + " vs " + bv.shape_str());
        Tensor y = Tensor::zeros({av.rows(), bv.cols()});
        kernels::gemm_nn(av.data(), bv.data(), y.data(), av.rows(), av.cols(), bv.cols(), false);
        Node n;
        n.op = Op::MatMul;
        n.a = a.id;
        n.b = b.id;
        n.value = std::move(y);
        return push(std::move(n));
    }

    // y[m] = A[m x n] * x[n]
    Var matvec(Var A, Var x) {
        const Tensor& av = value(A);
        const Tensor& xv = value(x);
        if (av.rank() != 2 || xv.rank() != 1 || av.cols() != xv.dim(0))
            throw DimensionError("matvec: " + av.shape_str() + " vs " + xv.shape_str());
        Tensor y = Tensor::zeros({av.rows()});
        kernels::gemv(av.data(), xv.data(), y.data(), av.rows(), av.cols(), false);
        Node n;
        n.op = Op::MatVec;
        n.a = A.id;
        n.b = x.id;
        n.value = std::move(y);
        return push(std::move(n));
    }

    // y[n] = x[m] * A[m x n]
    Var vecmat(Var x, Var A) {
        const Tensor& xv = value(x);
        const Tensor& av = value(A);
        if (av.rank() != 2 || xv.rank() != 1 || av.rows() != xv.dim(0))
            throw DimensionError("vecmat: " + xv.shape_str() + " vs " + av.shape_str());
        Tensor y = Tensor::zeros({av.cols()});
        kernels::gevm(xv.data(), av.data(), y.data(), av.rows(), av.cols(), false);
        Node n;
        n.op = Op::VecMat;
        n.a = x.id;
        n.b = A.id;
        n.value = std::move(y);
        return push(std::move(n));
    }

    Var transpose(Var a) {
        const Tensor& av = value(a);
        if (av.rank() != 2) throw DimensionError("transpose: rank 2 required, got " + av.shape_str());
        Tensor y = Tensor::zeros({av.cols(), av.rows()});
        for (int64_t r = 0; r < av.rows(); ++r)
            for (int64_t c = 0; c < av.cols(); ++c) y.at(c, r) = av.at(r, c);
        Node n;
        n.op = Op::Transpose;
        n.a = a.id;
        n.value = std::move(y);
        return push(std::move(n));
    }

    // a + s * b
    Var add_scaled(Var a, Var b, T s) {
        const Tensor& av = value(a);
        const Tensor& bv = value(b);
        if (!av.same_shape(bv))
            throw DimensionError("add: " + av.shape_str() + " vs " + bv.shape_str());
        Tensor y = av;
        kernels::axpy(y.data(), bv.data(), s, y.numel());
        Node n;
        n.op = Op::AddScaled;
        n.a = a.id;
        n.b = b.id;
        n.daux = s;
        n.value = std::move(y);
        return push(std::move(n));
    }

    Var add(Var a, Var b) { return add_scaled(a, b, T(1)); }
    Var sub(Var a, Var b) { return add_scaled(a, b, T(-1)); }

    Var scale(Var a, T s) {
        Tensor y = value(a);
        for (auto& e : y.v) e *= s;
        Node n;
        n.op = Op::Scale;
        n.a = a.id;
        n.daux = s;
        n.value = std::move(y);
        return push(std::move(n));
    }

    Var add_const(Var a, T c) {
        Tensor y = value(a);
        for (auto& e : y.v) e += c;
        Node n;
        n.op = Op::AddConst;
        n.a = a.id;
        n.value = std::move(y);
        return push(std::move(n));
    }

    Var mul(Var a, Var b) {
        const Tensor& av = value(a);
        const Tensor& bv = value(b);
        if (!av.same_shape(bv))
            throw DimensionError("mul: " + av.shape_str() + " vs " + bv.shape_str());
        Tensor y = av;
        for (size_t i = 0; i < y.v.size(); ++i) y.v[i] *= bv.v[i];
        Node n;
        n.op = Op::Mul;
        n.a = a.id;
        n.b = b.id;
        n.value = std::move(y);
        return push(std::move(n));
    }

    // Scalar division.
    Var div(Var a, Var b) {
        const Tensor& av = value(a);
        const Tensor& bv = value(b);
        if (!av.is_scalar() || !bv.is_scalar())
            throw DimensionError("div: scalars required, got " + av.shape_str() + " and " + bv.shape_str());
        Node n;
        n.op = Op::Div;
        n.a = a.id;
        n.b = b.id;
        n.value = Tensor::scalar(av.v[0] / bv.v[0]);
        return push(std::move(n));
    }

    // Mean over one axis of a matrix. axis=0 pools rows away, axis=1 columns.
    Var mean_pool(Var a, int axis) {
        const Tensor& av = value(a);
        if (av.rank() != 2) throw DimensionError("mean_pool: rank 2 required, got " + av.shape_str());
        if (axis != 0 && axis != 1) throw UsageError("mean_pool: axis must be 0 or 1");
        Tensor y;
        if (axis == 0) {
            y = Tensor::zeros({av.cols()});
            for (int64_t r = 0; r < av.rows(); ++r)
                for (int64_t c = 0; c < av.cols(); ++c) y.at(c) += av.at(r, c);
            for (auto& e : y.v) e /= static_cast<T>(av.rows());
        } else {
            y = Tensor::zeros({av.rows()});
            for (int64_t r = 0; r < av.rows(); ++r) {
                T acc = T(0);
                for (int64_t c = 0; c < av.cols(); ++c) acc += av.at(r, c);
                y.at(r) = acc / static_cast<T>(av.cols());
            }
        }
        Node n;
        n.op = Op::MeanPool;
        n.a = a.id;
        n.iaux = {axis};
        n.value = std::move(y);
        return push(std::move(n));
    }

    Var l2_norm(Var a) {
        const Tensor& av = value(a);
        T acc = T(0);
        for (const auto& e : av.v) acc += e * e;
        Node n;
        n.op = Op::L2Norm;
        n.a = a.id;
        n.value = Tensor::scalar(std::sqrt(acc));
        return push(std::move(n));
    }

    // Column-wise L2 norms of a [C x V] matrix -> [V].
    Var col_l2_norms(Var a) {
        const Tensor& av = value(a);
        if (av.rank() != 2) throw DimensionError("col_l2_norms: rank 2 required, got " + av.shape_str());
        Tensor y = Tensor::zeros({av.cols()});
        for (int64_t r = 0; r < av.rows(); ++r)
            for (int64_t c = 0; c < av.cols(); ++c) y.at(c) += av.at(r, c) * av.at(r, c);
        for (auto& e : y.v) e = std::sqrt(e);
        Node n;
        n.op = Op::ColL2Norms;
        n.a = a.id;
        n.value = std::move(y);
        return push(std::move(n));
    }

    // Per-channel max over groups of rows: x is [N x C], group_id[i] assigns
    // row i to a group, output is [C x n_groups]. Empty groups yield zero
    // columns. Ties go to the lowest row index, which also receives the
    // gradient for that (channel, group) cell.
    Var masked_max_pool(Var x, const std::vector<int32_t>& group_id, int64_t n_groups) {
        const Tensor& xv = value(x);
        if (xv.rank() != 2) throw DimensionError("masked_max_pool: rank 2 required, got " + xv.shape_str());
        if (static_cast<int64_t>(group_id.size()) != xv.rows())
            throw DimensionError("masked_max_pool: " + std::to_string(group_id.size()) + " group ids for " +
                                 std::to_string(xv.rows()) + " rows");
        const int64_t C = xv.cols();
        for (size_t i = 0; i < group_id.size(); ++i)
            if (group_id[i] < 0 || group_id[i] >= n_groups)
                throw IndexError("masked_max_pool: group id " + std::to_string(group_id[i]) + " at row " +
                                 std::to_string(i) + " outside [0, " + std::to_string(n_groups) + ")");
        Tensor y = Tensor::zeros({C, n_groups});
        std::vector<int32_t> winner(static_cast<size_t>(C * n_groups), -1);
        for (int64_t i = 0; i < xv.rows(); ++i) {
            const int64_t g = group_id[static_cast<size_t>(i)];
            const T* row = xv.data() + i * C;
            for (int64_t c = 0; c < C; ++c) {
                auto& w = winner[static_cast<size_t>(c * n_groups + g)];
                if (w < 0 || row[c] > y.at(c, g)) {
                    y.at(c, g) = row[c];
                    w = static_cast<int32_t>(i);
                }
            }
        }
        Node n;
        n.op = Op::MaskedMaxPool;
        n.a = x.id;
        n.iaux = std::move(winner);
        n.value = std::move(y);
        return push(std::move(n));
    }

    Var reshape(Var a, std::vector<int64_t> new_shape) {
        const Tensor& av = value(a);
        if (Tensor::numel_of(new_shape) != av.numel())
            throw DimensionError("reshape: " + av.shape_str() + " to " + Tensor::shape_str(new_shape));
        Tensor y;
        y.shape = std::move(new_shape);
        y.v = av.v;
        Node n;
        n.op = Op::Reshape;
        n.a = a.id;
        n.value = std::move(y);
        return push(std::move(n));
    }

    Var concat_cols(Var a, Var b) {
        const Tensor& av = value(a);
        const Tensor& bv = value(b);
        if (av.rank() != 2 || bv.rank() != 2 || av.rows() != bv.rows())
            throw DimensionError("concat_cols: " + av.shape_str() + " vs " + bv.shape_str());
        const int64_t rows = av.rows(), ca = av.cols(), cb = bv.cols();
        Tensor y = Tensor::zeros({rows, ca + cb});
        for (int64_t r = 0; r < rows; ++r) {
            for (int64_t c = 0; c < ca; ++c) y.at(r, c) = av.at(r, c);
            for (int64_t c = 0; c < cb; ++c) y.at(r, ca + c) = bv.at(r, c);
        }
        Node n;
        n.op = Op::ConcatCols;
        n.a = a.id;
        n.b = b.id;
        n.value = std::move(y);
        return push(std::move(n));
    }

    // p_i = exp(relu(a_i)/tau) / sum_j exp(relu(a_j)/tau), max-subtracted.
    Var temp_softmax(Var a, T tau) {
        if (!(tau > T(0))) throw ConfigError("temp_softmax: temperature must be > 0");
        const Tensor& av = value(a);
        if (av.rank() != 1) throw DimensionError("temp_softmax: rank 1 required, got " + av.shape_str());
        Tensor y = Tensor::zeros({av.dim(0)});
        T hi = T(0);
        for (const auto& e : av.v) hi = std::max(hi, std::max(e, T(0)) / tau);
        T z = T(0);
        for (int64_t i = 0; i < av.dim(0); ++i) {
            const T u = std::max(av.at(i), T(0)) / tau - hi;
            y.at(i) = std::exp(u);
            z += y.at(i);
        }
        for (auto& e : y.v) e /= z;
        Node n;
        n.op = Op::TempSoftmax;
        n.a = a.id;
        n.daux = tau;
        n.value = std::move(y);
        return push(std::move(n));
    }

    // sum_i p_i log(p_i / q_i) with 0 log 0 = 0. Negative mass is an error.
    Var kl_divergence(Var p, Var q) {
        const Tensor& pv = value(p);
        const Tensor& qv = value(q);
        if (!pv.same_shape(qv))
            throw DimensionError("kl_divergence: " + pv.shape_str() + " vs " + qv.shape_str());
        T acc = T(0);
        for (int64_t i = 0; i < pv.numel(); ++i) {
            if (pv.at(i) < T(0) || qv.at(i) < T(0))
                throw DomainError("kl_divergence: negative entry at index " + std::to_string(i));
            if (pv.at(i) > T(0)) acc += pv.at(i) * std::log(pv.at(i) / qv.at(i));
        }
        Node n;
        n.op = Op::KlDiv;
        n.a = p.id;
        n.b = q.id;
        n.value = Tensor::scalar(acc);
        return push(std::move(n));
    }

    // -log softmax(logits)[label], max-subtracted.
    Var softmax_cross_entropy(Var logits, int label) {
        const Tensor& lv = value(logits);
        if (lv.rank() != 1) throw DimensionError("softmax_cross_entropy: rank 1 required, got " + lv.shape_str());
        if (label < 0 || label >= lv.dim(0))
            throw IndexError("softmax_cross_entropy: label " + std::to_string(label) + " outside [0, " +
                             std::to_string(lv.dim(0)) + ")");
        const T hi = *std::max_element(lv.v.begin(), lv.v.end());
        T z = T(0);
        Tensor probs = Tensor::zeros({lv.dim(0)});
        for (int64_t i = 0; i < lv.dim(0); ++i) {
            probs.at(i) = std::exp(lv.at(i) - hi);
            z += probs.at(i);
        }
        for (auto& e : probs.v) e /= z;
        Node n;
        n.op = Op::SoftmaxCE;
        n.a = logits.id;
        n.iaux = {label};
        n.aux = std::move(probs);
        n.value = Tensor::scalar(-std::log(n.aux.at(label)));
        return push(std::move(n));
    }

    // Mean of scalar nodes, in the order given (fixed reduction order).
    Var mean_scalars(std::span<const Var> xs) {
        if (xs.empty()) throw UsageError("mean_scalars: empty input");
        Node n;
        n.op = Op::MeanScalars;
        T acc = T(0);
        n.iaux.reserve(xs.size());
        for (const Var& x : xs) {
            acc += value(x).scalar_value();
            n.iaux.push_back(x.id);
        }
        n.value = Tensor::scalar(acc / static_cast<T>(xs.size()));
        return push(std::move(n));
    }

    Var row(Var a, int64_t r) {
        const Tensor& av = value(a);
        if (av.rank() != 2) throw DimensionError("row: rank 2 required, got " + av.shape_str());
        if (r < 0 || r >= av.rows()) throw IndexError("row: index " + std::to_string(r) + " out of range");
        Tensor y = Tensor::zeros({av.cols()});
        for (int64_t c = 0; c < av.cols(); ++c) y.at(c) = av.at(r, c);
        Node n;
        n.op = Op::RowSelect;
        n.a = a.id;
        n.iaux = {static_cast<int32_t>(r)};
        n.value = std::move(y);
        return push(std::move(n));
    }

    Var col(Var a, int64_t c) {
        const Tensor& av = value(a);
        if (av.rank() != 2) throw DimensionError("col: rank 2 required, got " + av.shape_str());
        if (c < 0 || c >= av.cols()) throw IndexError("col: index " + std::to_string(c) + " out of range");
        Tensor y = Tensor::zeros({av.rows()});
        for (int64_t r = 0; r < av.rows(); ++r) y.at(r) = av.at(r, c);
        Node n;
        n.op = Op::ColSelect;
        n.a = a.id;
        n.iaux = {static_cast<int32_t>(c)};
        n.value = std::move(y);
        return push(std::move(n));
    }

    Var get(Var a, int64_t flat_index) {
        const Tensor& av = value(a);
        if (flat_index < 0 || flat_index >= av.numel())
            throw IndexError("get: index " + std::to_string(flat_index) + " out of range");
        Node n;
        n.op = Op::Get;
        n.a = a.id;
        n.iaux = {static_cast<int32_t>(flat_index)};
        n.value = Tensor::scalar(av.at(flat_index));
        return push(std::move(n));
    }

    const Tensor& value(Var x) const { return node(x).value; }

    // Gradient of a node after backward(); zeros if nothing flowed there.
    Tensor gradient(Var x) const {
        const Node& n = node(x);
        if (n.grad.v.empty()) return Tensor::zeros(n.value.shape);
        return n.grad;
    }

    bool has_gradient(Var x) const { return !node(x).grad.v.empty(); }

    // Reverse sweep from a scalar root. Each node is visited exactly once.
    void backward(Var root) {
        if (backward_done_) throw UsageError("backward: called twice without clear_grads()");
        const Node& r = node(root);
        if (!r.value.is_scalar())
            throw UsageError("backward: root must be a scalar, got " + r.value.shape_str());
        backward_done_ = true;
        grad_buf(root.id).v[0] = T(1);
        for (int32_t id = static_cast<int32_t>(nodes_.size()) - 1; id >= 0; --id) {
            Node& n = nodes_[static_cast<size_t>(id)];
            if (n.grad.v.empty()) continue;
            backward_node(n);
        }
    }

    void clear_grads() {
        for (auto& n : nodes_) {
            n.grad.shape.clear();
            n.grad.v.clear();
        }
        backward_done_ = false;
    }

    size_t size() const { return nodes_.size(); }

private:
    enum class Op : uint8_t {
        Leaf,
        Linear,
        Relu,
        MatMul,
        MatVec,
        VecMat,
        Transpose,
        AddScaled,
        Scale,
        AddConst,
        Mul,
        Div,
        MeanPool,
        L2Norm,
        ColL2Norms,
        MaskedMaxPool,
        Reshape,
        ConcatCols,
        TempSoftmax,
        KlDiv,
        SoftmaxCE,
        MeanScalars,
        RowSelect,
        ColSelect,
        Get,
    };

    struct Node {
        Op op = Op::Leaf;
        bool rg = false;
        int32_t a = -1, b = -1, c = -1;
        T daux = T(0);
        std::vector<int32_t> iaux;
        TensorT<T> value;
        TensorT<T> aux;
        TensorT<T> grad;
    };

    const Node& node(Var x) const {
        if (!x.valid() || x.id >= static_cast<int32_t>(nodes_.size()))
            throw UsageError("invalid tape handle");
        return nodes_[static_cast<size_t>(x.id)];
    }

    Var push(Node n) {
        if (n.op != Op::Leaf) {
            bool rg = false;
            for (int32_t in : {n.a, n.b, n.c})
                if (in >= 0) rg = rg || nodes_[static_cast<size_t>(in)].rg;
            if (n.op == Op::MeanScalars)
                for (int32_t in : n.iaux) rg = rg || nodes_[static_cast<size_t>(in)].rg;
            n.rg = rg;
        }
        nodes_.push_back(std::move(n));
        return Var{static_cast<int32_t>(nodes_.size()) - 1};
    }

    TensorT<T>& grad_buf(int32_t id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (n.grad.v.empty()) n.grad = TensorT<T>::zeros(n.value.shape);
        return n.grad;
    }

    bool wants_grad(int32_t id) const { return id >= 0 && nodes_[static_cast<size_t>(id)].rg; }

    static void check_vec(const TensorT<T>& t, int64_t n, const char* what) {
        if (t.rank() != 1 || t.dim(0) != n)
            throw DimensionError(std::string(what) + ": expected [" + std::to_string(n) + "], got " + t.shape_str());
    }

    void backward_node(Node& n) {
        const TensorT<T>& dy = n.grad;
        switch (n.op) {
        case Op::Leaf:
            break;
        case Op::Linear: {
            const TensorT<T>& x = nodes_[n.a].value;
            const TensorT<T>& W = nodes_[n.b].value;
            const int64_t in = W.rows(), out = W.cols();
            if (x.rank() == 2) {
                const int64_t N = x.rows();
                if (wants_grad(n.a))
                    kernels::gemm_nt(dy.data(), W.data(), grad_buf(n.a).data(), N, out, in, true);
                if (wants_grad(n.b))
                    kernels::gemm_tn(x.data(), dy.data(), grad_buf(n.b).data(), in, N, out, true);
                if (n.c >= 0 && wants_grad(n.c)) {
                    TensorT<T>& db = grad_buf(n.c);
                    for (int64_t r = 0; r < N; ++r)
                        for (int64_t c2 = 0; c2 < out; ++c2) db.at(c2) += dy.at(r, c2);
                }
            } else {
                if (wants_grad(n.a))
                    kernels::gemv(W.data(), dy.data(), grad_buf(n.a).data(), in, out, true);
                if (wants_grad(n.b)) {
                    TensorT<T>& dW = grad_buf(n.b);
                    for (int64_t i = 0; i < in; ++i)
                        for (int64_t j = 0; j < out; ++j) dW.at(i, j) += x.at(i) * dy.at(j);
                }
                if (n.c >= 0 && wants_grad(n.c))
                    kernels::axpy(grad_buf(n.c).data(), dy.data(), T(1), out);
            }
            break;
        }
        case Op::Relu: {
            if (!wants_grad(n.a)) break;
            const TensorT<T>& x = nodes_[n.a].value;
            TensorT<T>& dx = grad_buf(n.a);
            for (int64_t i = 0; i < x.numel(); ++i)
                if (x.at(i) > T(0)) dx.at(i) += dy.at(i);
            break;
        }
        case Op::MatMul: {
            const TensorT<T>& A = nodes_[n.a].value;
            const TensorT<T>& B = nodes_[n.b].value;
            if (wants_grad(n.a))
                kernels::gemm_nt(dy.data(), B.data(), grad_buf(n.a).data(), A.rows(), B.cols(), A.cols(), true);
            if (wants_grad(n.b))
                kernels::gemm_tn(A.data(), dy.data(), grad_buf(n.b).data(), A.cols(), A.rows(), B.cols(), true);
            break;
        }
        case Op::MatVec: {
            const TensorT<T>& A = nodes_[n.a].value;
            const TensorT<T>& x = nodes_[n.b].value;
            if (wants_grad(n.a)) {
                TensorT<T>& dA = grad_buf(n.a);
                for (int64_t i = 0; i < A.rows(); ++i)
                    for (int64_t j = 0; j < A.cols(); ++j) dA.at(i, j) += dy.at(i) * x.at(j);
            }
            if (wants_grad(n.b))
                kernels::gevm(dy.data(), A.data(), grad_buf(n.b).data(), A.rows(), A.cols(), true);
            break;
        }
        case Op::VecMat: {
            const TensorT<T>& x = nodes_[n.a].value;
            const TensorT<T>& A = nodes_[n.b].value;
            if (wants_grad(n.a))
                kernels::gemv(A.data(), dy.data(), grad_buf(n.a).data(), A.rows(), A.cols(), true);
            if (wants_grad(n.b)) {
                TensorT<T>& dA = grad_buf(n.b);
                for (int64_t i = 0; i < A.rows(); ++i)
                    for (int64_t j = 0; j < A.cols(); ++j) dA.at(i, j) += x.at(i) * dy.at(j);
            }
            break;
        }
        case Op::Transpose: {
            if (!wants_grad(n.a)) break;
            TensorT<T>& dx = grad_buf(n.a);
            for (int64_t r = 0; r < dy.rows(); ++r)
                for (int64_t c = 0; c < dy.cols(); ++c) dx.at(c, r) += dy.at(r, c);
            break;
        }
        case Op::AddScaled:
            if (wants_grad(n.a)) kernels::axpy(grad_buf(n.a).data(), dy.data(), T(1), dy.numel());
            if (wants_grad(n.b)) kernels::axpy(grad_buf(n.b).data(), dy.data(), n.daux, dy.numel());
            break;
        case Op::Scale:
            if (wants_grad(n.a)) kernels::axpy(grad_buf(n.a).data(), dy.data(), n.daux, dy.numel());
            break;
        case Op::AddConst:
            if (wants_grad(n.a)) kernels::axpy(grad_buf(n.a).data(), dy.data(), T(1), dy.numel());
            break;
        case Op::Mul: {
            const TensorT<T>& a = nodes_[n.a].value;
            const TensorT<T>& b = nodes_[n.b].value;
            if (wants_grad(n.a)) {
                TensorT<T>& da = grad_buf(n.a);
                for (int64_t i = 0; i < dy.numel(); ++i) da.at(i) += dy.at(i) * b.at(i);
            }
            if (wants_grad(n.b)) {
                TensorT<T>& db = grad_buf(n.b);
                for (int64_t i = 0; i < dy.numel(); ++i) db.at(i) += dy.at(i) * a.at(i);
            }
            break;
        }
        case Op::Div: {
            const T a = nodes_[n.a].value.v[0];
            const T b = nodes_[n.b].value.v[0];
            if (wants_grad(n.a)) grad_buf(n.a).v[0] += dy.v[0] / b;
            if (wants_grad(n.b)) grad_buf(n.b).v[0] -= dy.v[0] * a / (b * b);
            break;
        }
        case Op::MeanPool: {
            if (!wants_grad(n.a)) break;
            const TensorT<T>& x = nodes_[n.a].value;
            TensorT<T>& dx = grad_buf(n.a);
            if (n.iaux[0] == 0) {
                const T inv = T(1) / static_cast<T>(x.rows());
                for (int64_t r = 0; r < x.rows(); ++r)
                    for (int64_t c = 0; c < x.cols(); ++c) dx.at(r, c) += dy.at(c) * inv;
            } else {
                const T inv = T(1) / static_cast<T>(x.cols());
                for (int64_t r = 0; r < x.rows(); ++r)
                    for (int64_t c = 0; c < x.cols(); ++c) dx.at(r, c) += dy.at(r) * inv;
            }
            break;
        }
        case Op::L2Norm: {
            if (!wants_grad(n.a)) break;
            const T norm = n.value.v[0];
            if (norm == T(0)) break;
            const TensorT<T>& x = nodes_[n.a].value;
            kernels::axpy(grad_buf(n.a).data(), x.data(), dy.v[0] / norm, x.numel());
            break;
        }
        case Op::ColL2Norms: {
            if (!wants_grad(n.a)) break;
            const TensorT<T>& x = nodes_[n.a].value;
            TensorT<T>& dx = grad_buf(n.a);
            for (int64_t c = 0; c < x.cols(); ++c) {
                const T norm = n.value.at(c);
                if (norm == T(0)) continue;
                const T f = dy.at(c) / norm;
                for (int64_t r = 0; r < x.rows(); ++r) dx.at(r, c) += f * x.at(r, c);
            }
            break;
        }
        case Op::MaskedMaxPool: {
            if (!wants_grad(n.a)) break;
            TensorT<T>& dx = grad_buf(n.a);
            const int64_t C = dx.cols();
            const int64_t G = n.value.cols();
            for (int64_t c = 0; c < C; ++c)
                for (int64_t g = 0; g < G; ++g) {
                    const int32_t w = n.iaux[static_cast<size_t>(c * G + g)];
                    if (w >= 0) dx.at(w, c) += dy.at(c, g);
                }
            break;
        }
        case Op::Reshape:
            if (wants_grad(n.a)) kernels::axpy(grad_buf(n.a).data(), dy.data(), T(1), dy.numel());
            break;
        case Op::ConcatCols: {
            const TensorT<T>& a = nodes_[n.a].value;
            const int64_t rows = a.rows(), ca = a.cols(), cb = dy.cols() - ca;
            if (wants_grad(n.a)) {
                TensorT<T>& da = grad_buf(n.a);
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t c = 0; c < ca; ++c) da.at(r, c) += dy.at(r, c);
            }
            if (wants_grad(n.b)) {
                TensorT<T>& db = grad_buf(n.b);
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t c = 0; c < cb; ++c) db.at(r, c) += dy.at(r, ca + c);
            }
            break;
        }
        case Op::TempSoftmax: {
            if (!wants_grad(n.a)) break;
            const TensorT<T>& a = nodes_[n.a].value;
            const TensorT<T>& p = n.value;
            T dot = T(0);
            for (int64_t i = 0; i < p.numel(); ++i) dot += dy.at(i) * p.at(i);
            TensorT<T>& dx = grad_buf(n.a);
            for (int64_t i = 0; i < p.numel(); ++i)
                if (a.at(i) > T(0)) dx.at(i) += p.at(i) * (dy.at(i) - dot) / n.daux;
            break;
        }
        case Op::KlDiv: {
            const TensorT<T>& p = nodes_[n.a].value;
            const TensorT<T>& q = nodes_[n.b].value;
            if (wants_grad(n.a)) {
                TensorT<T>& dp = grad_buf(n.a);
                for (int64_t i = 0; i < p.numel(); ++i)
                    if (p.at(i) > T(0)) dp.at(i) += dy.v[0] * (std::log(p.at(i) / q.at(i)) + T(1));
            }
            if (wants_grad(n.b)) {
                TensorT<T>& dq = grad_buf(n.b);
                for (int64_t i = 0; i < p.numel(); ++i)
                    if (p.at(i) > T(0)) dq.at(i) -= dy.v[0] * p.at(i) / q.at(i);
            }
            break;
        }
        case Op::SoftmaxCE: {
            if (!wants_grad(n.a)) break;
            TensorT<T>& dx = grad_buf(n.a);
            const int label = n.iaux[0];
            for (int64_t i = 0; i < n.aux.numel(); ++i) {
                T g = n.aux.at(i);
                if (i == label) g -= T(1);
                dx.at(i) += dy.v[0] * g;
            }
            break;
        }
        case Op::MeanScalars: {
            const T f = dy.v[0] / static_cast<T>(n.iaux.size());
            for (int32_t in : n.iaux)
                if (wants_grad(in)) grad_buf(in).v[0] += f;
            break;
        }
        case Op::RowSelect: {
            if (!wants_grad(n.a)) break;
            TensorT<T>& dx = grad_buf(n.a);
            const int64_t r = n.iaux[0];
            for (int64_t c = 0; c < dx.cols(); ++c) dx.at(r, c) += dy.at(c);
            break;
        }
        case Op::ColSelect: {
            if (!wants_grad(n.a)) break;
            TensorT<T>& dx = grad_buf(n.a);
            const int64_t c = n.iaux[0];
            for (int64_t r = 0; r < dx.rows(); ++r) dx.at(r, c) += dy.at(r);
            break;
        }
        case Op::Get:
            if (wants_grad(n.a)) grad_buf(n.a).at(n.iaux[0]) += dy.v[0];
            break;
        }
    }

    std::vector<Node> nodes_;
    bool backward_done_ = false;
};

using Tape = TapeT<float>;
using TapeD = TapeT<double>;

} // namespace xsplain
