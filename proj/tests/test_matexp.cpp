#include <doctest.h>

#include <cmath>
#include <numbers>

#include "xsplain/matexp.hpp"
#include "xsplain/rng.hpp"

using namespace xsplain;

TEST_CASE("zero generator yields the exact identity") {
    TapeD tape;
    Var p = tape.leaf(TensorD::zeros({4, 4}), false);
    const TensorD u = tape.value(matrix_exp_skew(tape, p));
    for (int64_t i = 0; i < 4; ++i)
        for (int64_t j = 0; j < 4; ++j) CHECK(u.at(i, j) == (i == j ? 1.0 : 0.0));
}

TEST_CASE("2x2 generator produces the plane rotation") {
    const double theta = std::numbers::pi / 2.0;
    TensorD p = TensorD::zeros({2, 2});
    p.at(0, 1) = theta;
    const TensorD u = matrix_exp_skew_eval(p);
    // exp([[0, t], [-t, 0]]) = [[cos t, sin t], [-sin t, cos t]]
    CHECK(std::abs(u.at(0, 0) - 0.0) < 1e-10);
    CHECK(std::abs(u.at(0, 1) - 1.0) < 1e-10);
    CHECK(std::abs(u.at(1, 0) + 1.0) < 1e-10);
    CHECK(std::abs(u.at(1, 1) - 0.0) < 1e-10);
}

TEST_CASE("random 8x8 generator gives det 1 and orthogonality") {
    Rng rng(19);
    TensorD p = TensorD::zeros({8, 8});
    for (auto& e : p.v) e = rng.uniform(-1.0, 1.0);
    const TensorD u = matrix_exp_skew_eval(p);
    CHECK(kernels::orthogonality_defect(u) < 1e-8);
    CHECK(std::abs(kernels::determinant(u) - 1.0) < 1e-8);
}

TEST_CASE("orthogonality holds up to the 1-norm scaling limit") {
    // Entries of magnitude 10 exercise several squaring steps.
    Rng rng(23);
    for (int trial = 0; trial < 5; ++trial) {
        const int64_t n = 4 + trial * 3;
        TensorD p = TensorD::zeros({n, n});
        for (auto& e : p.v) e = rng.uniform(-10.0, 10.0);
        const TensorD u = matrix_exp_skew_eval(p);
        CHECK(kernels::orthogonality_defect(u) < 1e-6);
        CHECK(std::abs(kernels::determinant(u) - 1.0) < 1e-6);
    }
}

TEST_CASE("tape and plain evaluation agree") {
    Rng rng(29);
    TensorD p = TensorD::zeros({6, 6});
    for (auto& e : p.v) e = rng.uniform(-2.0, 2.0);
    TapeD tape;
    const TensorD u_tape = tape.value(matrix_exp_skew(tape, tape.leaf(p, false)));
    const TensorD u_plain = matrix_exp_skew_eval(p);
    for (int64_t i = 0; i < u_tape.numel(); ++i)
        CHECK(u_tape.at(i) == doctest::Approx(u_plain.at(i)).epsilon(1e-12));
}

TEST_CASE("non-square input is a dimension error") {
    TapeD tape;
    Var p = tape.leaf(TensorD::zeros({2, 3}), false);
    CHECK_THROWS_AS(matrix_exp_skew(tape, p), DimensionError);
    CHECK_THROWS_AS(matrix_exp_skew_eval(TensorD::zeros({2, 3})), DimensionError);
}

TEST_CASE("inverse equals transpose in float precision") {
    Rng rng(31);
    TensorF p = TensorF::zeros({16, 16});
    for (auto& e : p.v) e = static_cast<float>(rng.uniform(-0.5, 0.5));
    const TensorF u = matrix_exp_skew_eval(p);
    CHECK(kernels::orthogonality_defect(u) < 1e-5f);
}
