#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "xsplain/errors.hpp"

namespace xsplain {

// Dense row-major tensor. Rank 1 and 2 cover everything the pipeline needs;
// float carries training, double carries the gradient-check mode.
template <class T>
struct TensorT {
    std::vector<int64_t> shape;
    std::vector<T> v;

    TensorT() = default;

    static TensorT zeros(std::vector<int64_t> s) {
        TensorT t;
        t.shape = std::move(s);
        t.v.assign(static_cast<size_t>(numel_of(t.shape)), T(0));
        return t;
    }

    static TensorT full(std::vector<int64_t> s, T value) {
        TensorT t = zeros(std::move(s));
        for (auto& x : t.v) x = value;
        return t;
    }

    static TensorT from(std::vector<int64_t> s, std::vector<T> data) {
        if (numel_of(s) != static_cast<int64_t>(data.size()))
            throw DimensionError("tensor data size " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(s));
        TensorT t;
        t.shape = std::move(s);
        t.v = std::move(data);
        return t;
    }

    static TensorT identity(int64_t n) {
        TensorT t = zeros({n, n});
        for (int64_t i = 0; i < n; ++i) t.v[static_cast<size_t>(i * n + i)] = T(1);
        return t;
    }

    static TensorT scalar(T value) { return from({1}, {value}); }

    int64_t numel() const { return numel_of(shape); }
    int rank() const { return static_cast<int>(shape.size()); }
    int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }
    int64_t rows() const { return shape.at(0); }
    int64_t cols() const { return shape.at(1); }

    T& at(int64_t i) { return v[static_cast<size_t>(i)]; }
    T at(int64_t i) const { return v[static_cast<size_t>(i)]; }
    T& at(int64_t r, int64_t c) { return v[static_cast<size_t>(r * cols() + c)]; }
    T at(int64_t r, int64_t c) const { return v[static_cast<size_t>(r * cols() + c)]; }

    T* data() { return v.data(); }
    const T* data() const { return v.data(); }

    bool same_shape(const TensorT& o) const { return shape == o.shape; }

    bool is_scalar() const { return numel() == 1; }
    T scalar_value() const {
        if (!is_scalar()) throw UsageError("tensor of shape " + shape_str(shape) + " is not a scalar");
        return v[0];
    }

    template <class U>
    TensorT<U> cast() const {
        TensorT<U> out;
        out.shape = shape;
        out.v.resize(v.size());
        for (size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<U>(v[i]);
        return out;
    }

    static int64_t numel_of(const std::vector<int64_t>& s) {
        return std::accumulate(s.begin(), s.end(), int64_t{1}, std::multiplies<int64_t>());
    }

    static std::string shape_str(const std::vector<int64_t>& s) {
        std::ostringstream os;
        os << "[";
        for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
        os << "]";
        return os.str();
    }

    std::string shape_str() const { return shape_str(shape); }
};

using TensorF = TensorT<float>;
using TensorD = TensorT<double>;

namespace kernels {

// C[m x n] (+)= A[m x k] * B[k x n].  The k-outer / j-inner ordering keeps the
// inner loop contiguous in both B and C so it vectorizes.
template <class T>
void gemm_nn(const T* A, const T* B, T* C, int64_t m, int64_t k, int64_t n, bool accumulate) {
    if (!accumulate)
        for (int64_t i = 0; i < m * n; ++i) C[i] = T(0);
    for (int64_t i = 0; i < m; ++i) {
        const T* a_row = A + i * k;
        T* c_row = C + i * n;
        for (int64_t p = 0; p < k; ++p) {
            const T a = a_row[p];
            if (a == T(0)) continue;
            const T* b_row = B + p * n;
            for (int64_t j = 0; j < n; ++j) c_row[j] += a * b_row[j];
        }
    }
}

// C[m x n] (+)= A^T[m x k] * B[k x n]  with A stored as [k x m].
template <class T>
void gemm_tn(const T* A, const T* B, T* C, int64_t m, int64_t k, int64_t n, bool accumulate) {
    if (!accumulate)
        for (int64_t i = 0; i < m * n; ++i) C[i] = T(0);
    for (int64_t p = 0; p < k; ++p) {
        const T* a_row = A + p * m;
        const T* b_row = B + p * n;
        for (int64_t i = 0; i < m; ++i) {
            const T a = a_row[i];
            if (a == T(0)) continue;
            T* c_row = C + i * n;
            for (int64_t j = 0; j < n; ++j) c_row[j] += a * b_row[j];
        }
    }
}

// C[m x n] (+)= A[m x k] * B^T[k x n]  with B stored as [n x k].
template <class T>
void gemm_nt(const T* A, const T* B, T* C, int64_t m, int64_t k, int64_t n, bool accumulate) {
    for (int64_t i = 0; i < m; ++i) {
        const T* a_row = A + i * k;
        T* c_row = C + i * n;
        for (int64_t j = 0; j < n; ++j) {
            const T* b_row = B + j * k;
            T acc = accumulate ? c_row[j] : T(0);
            for (int64_t p = 0; p < k; ++p) acc += a_row[p] * b_row[p];
            c_row[j] = acc;
        }
    }
}

// y[m] (+)= A[m x n] * x[n]
template <class T>
void gemv(const T* A, const T* x, T* y, int64_t m, int64_t n, bool accumulate) {
    for (int64_t i = 0; i < m; ++i) {
        const T* a_row = A + i * n;
        T acc = accumulate ? y[i] : T(0);
        for (int64_t j = 0; j < n; ++j) acc += a_row[j] * x[j];
        y[i] = acc;
    }
}

// y[n] (+)= x[m] * A[m x n]
template <class T>
void gevm(const T* x, const T* A, T* y, int64_t m, int64_t n, bool accumulate) {
    if (!accumulate)
        for (int64_t j = 0; j < n; ++j) y[j] = T(0);
    for (int64_t i = 0; i < m; ++i) {
        const T xi = x[i];
        if (xi == T(0)) continue;
        const T* a_row = A + i * n;
        for (int64_t j = 0; j < n; ++j) y[j] += xi * a_row[j];
    }
}

template <class T>
void axpy(T* y, const T* x, T alpha, int64_t n) {
    for (int64_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

// Max-norm of M^T M - I; the working orthogonality check.
template <class T>
T orthogonality_defect(const TensorT<T>& M) {
    if (M.rank() != 2 || M.rows() != M.cols())
        throw DimensionError("orthogonality_defect expects a square matrix, got " + M.shape_str());
    const int64_t n = M.rows();
    T worst = T(0);
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            T acc = T(0);
            for (int64_t p = 0; p < n; ++p) acc += M.at(p, i) * M.at(p, j);
            const T target = (i == j) ? T(1) : T(0);
            const T d = std::abs(acc - target);
            if (d > worst) worst = d;
        }
    }
    return worst;
}

// Determinant by partial-pivot LU, in the tensor's own precision.
template <class T>
T determinant(const TensorT<T>& M) {
    if (M.rank() != 2 || M.rows() != M.cols())
        throw DimensionError("determinant expects a square matrix, got " + M.shape_str());
    const int64_t n = M.rows();
    TensorT<T> a = M;
    T det = T(1);
    for (int64_t col = 0; col < n; ++col) {
        int64_t pivot = col;
        T best = std::abs(a.at(col, col));
        for (int64_t r = col + 1; r < n; ++r) {
            const T cand = std::abs(a.at(r, col));
            if (cand > best) {
                best = cand;
                pivot = r;
            }
        }
        if (best == T(0)) return T(0);
        if (pivot != col) {
            for (int64_t c = 0; c < n; ++c) std::swap(a.at(pivot, c), a.at(col, c));
            det = -det;
        }
        det *= a.at(col, col);
        const T inv = T(1) / a.at(col, col);
        for (int64_t r = col + 1; r < n; ++r) {
            const T f = a.at(r, col) * inv;
            if (f == T(0)) continue;
            for (int64_t c = col; c < n; ++c) a.at(r, c) -= f * a.at(col, c);
        }
    }
    return det;
}

// FNV-1a over raw bytes; used to detect parameter mutation while frozen.
inline uint64_t fnv1a(const void* data, size_t bytes, uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < bytes; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

template <class T>
uint64_t content_hash(const TensorT<T>& t, uint64_t h = 0xcbf29ce484222325ULL) {
    h = fnv1a(t.shape.data(), t.shape.size() * sizeof(int64_t), h);
    h = fnv1a(t.v.data(), t.v.size() * sizeof(T), h);
    return h;
}

} // namespace kernels
} // namespace xsplain
