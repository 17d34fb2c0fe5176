#pragma once

#include <cmath>

#include "xsplain/tape.hpp"
#include "xsplain/tensor.hpp"

namespace xsplain {

namespace detail {

// Maximum absolute column sum.
template <class T>
T one_norm(const TensorT<T>& a) {
    T worst = T(0);
    for (int64_t c = 0; c < a.cols(); ++c) {
        T acc = T(0);
        for (int64_t r = 0; r < a.rows(); ++r) acc += std::abs(a.at(r, c));
        worst = std::max(worst, acc);
    }
    return worst;
}

template <class T>
int squaring_steps(T norm1) {
    int s = 0;
    while (norm1 > T(0.5)) {
        norm1 *= T(0.5);
        ++s;
    }
    return s;
}

constexpr int kExpTaylorTerms = 18;

} // namespace detail

// U = exp(P - P^T), recorded on the tape so gradients reach P by
// composition. The skew-symmetric generator makes U orthogonal with
// det(U) = 1; P = 0 gives U = I exactly. Evaluation is scaling-and-squaring:
// halve A until its 1-norm is at most 0.5, run the truncated Taylor series,
// then square the result back up.
template <class T>
Var matrix_exp_skew(TapeT<T>& tape, Var P) {
    const TensorT<T>& pv = tape.value(P);
    if (pv.rank() != 2 || pv.rows() != pv.cols())
        throw DimensionError("matrix_exp_skew: square matrix required, got " + pv.shape_str());
    const int64_t n = pv.rows();

    Var A = tape.sub(P, tape.transpose(P));
    const int s = detail::squaring_steps(detail::one_norm(tape.value(A)));
    Var As = tape.scale(A, static_cast<T>(std::ldexp(1.0, -s)));

    Var sum = tape.add(tape.constant(TensorT<T>::identity(n)), As);
    Var term = As;
    for (int k = 2; k <= detail::kExpTaylorTerms; ++k) {
        term = tape.scale(tape.matmul(term, As), T(1) / static_cast<T>(k));
        sum = tape.add(sum, term);
    }
    for (int i = 0; i < s; ++i) sum = tape.matmul(sum, sum);
    return sum;
}

// Plain-tensor evaluation of the same map, for checkpointing and metrics.
template <class T>
TensorT<T> matrix_exp_skew_eval(const TensorT<T>& P) {
    if (P.rank() != 2 || P.rows() != P.cols())
        throw DimensionError("matrix_exp_skew: square matrix required, got " + P.shape_str());
    const int64_t n = P.rows();

    TensorT<T> A = TensorT<T>::zeros({n, n});
    for (int64_t r = 0; r < n; ++r)
        for (int64_t c = 0; c < n; ++c) A.at(r, c) = P.at(r, c) - P.at(c, r);
    const int s = detail::squaring_steps(detail::one_norm(A));
    const T halve = static_cast<T>(std::ldexp(1.0, -s));
    for (auto& e : A.v) e *= halve;

    TensorT<T> sum = TensorT<T>::identity(n);
    kernels::axpy(sum.data(), A.data(), T(1), n * n);
    TensorT<T> term = A;
    TensorT<T> next = TensorT<T>::zeros({n, n});
    for (int k = 2; k <= detail::kExpTaylorTerms; ++k) {
        kernels::gemm_nn(term.data(), A.data(), next.data(), n, n, n, false);
        const T inv = T(1) / static_cast<T>(k);
        for (auto& e : next.v) e *= inv;
        std::swap(term, next);
        kernels::axpy(sum.data(), term.data(), T(1), n * n);
    }
    for (int i = 0; i < s; ++i) {
        kernels::gemm_nn(sum.data(), sum.data(), next.data(), n, n, n, false);
        std::swap(sum, next);
    }
    return sum;
}

} // namespace xsplain
