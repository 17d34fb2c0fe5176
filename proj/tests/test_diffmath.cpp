#include <doctest.h>

#include <cmath>

#include "xsplain/gradcheck.hpp"
#include "xsplain/rng.hpp"
#include "xsplain/tape.hpp"

using namespace xsplain;

namespace {

TensorD randn(std::vector<int64_t> shape, Rng& rng) {
    TensorD t = TensorD::zeros(std::move(shape));
    for (auto& e : t.v) e = rng.gaussian();
    return t;
}

} // namespace

TEST_CASE("linear with identity weights is the identity") {
    Tape tape;
    Var x = tape.leaf(TensorF::from({2, 3}, {1, 2, 3, 4, 5, 6}), false);
    Var w = tape.leaf(TensorF::identity(3), false);
    Var b = tape.leaf(TensorF::zeros({3}), false);
    const TensorF& y = tape.value(tape.linear(x, w, b));
    for (int64_t i = 0; i < 6; ++i) CHECK(y.at(i) == doctest::Approx(static_cast<float>(i + 1)));
}

TEST_CASE("relu definition") {
    Tape tape;
    Var x = tape.leaf(TensorF::from({2}, {-1.0f, 2.0f}), false);
    const TensorF& y = tape.value(tape.relu(x));
    CHECK(y.at(0) == 0.0f);
    CHECK(y.at(1) == 2.0f);
}

TEST_CASE("linear shape mismatch reports both shapes") {
    Tape tape;
    Var x = tape.leaf(TensorF::zeros({2, 3}), false);
    Var w = tape.leaf(TensorF::zeros({4, 5}), false);
    CHECK_THROWS_AS(tape.linear(x, w), DimensionError);
}

TEST_CASE("gradcheck: random 5x4 linear against central differences") {
    Rng rng(42);
    const TensorD x = randn({3, 5}, rng);
    const TensorD w = randn({5, 4}, rng);
    const TensorD b = randn({4}, rng);
    const TensorD coeff = randn({3, 4}, rng);

    const auto build = [&](TapeD& tape, const std::vector<TensorD>& at, bool trainable,
                           std::vector<Var>* leaves) {
        Var vx = tape.leaf(at[0], trainable);
        Var vw = tape.leaf(at[1], trainable);
        Var vb = tape.leaf(at[2], trainable);
        if (leaves) *leaves = {vx, vw, vb};
        Var y = tape.linear(vx, vw, vb);
        Var weighted = tape.mul(y, tape.constant(coeff));
        return tape.get(tape.mean_pool(tape.reshape(weighted, {1, 12}), 1), 0);
    };

    TapeD tape;
    std::vector<Var> leaves;
    Var loss = build(tape, {x, w, b}, true, &leaves);
    tape.backward(loss);
    std::vector<TensorD> analytic;
    for (Var v : leaves) analytic.push_back(tape.gradient(v));

    const FdCheck fd = finite_difference_check(
        [&](const std::vector<TensorD>& at) {
            TapeD t2;
            return t2.value(build(t2, at, false, nullptr)).scalar_value();
        },
        {x, w, b}, analytic, 0, 7);
    CHECK(fd.max_rel_error < 1e-6);
    CHECK(fd.coords_checked == 15 + 20 + 4);
}

TEST_CASE("masked max pool: per-channel max per group") {
    Tape tape;
    // Two members of one group with feature vectors (3,-1) and (5,-2).
    Var x = tape.leaf(TensorF::from({2, 2}, {3, -1, 5, -2}), false);
    const TensorF& y = tape.value(tape.masked_max_pool(x, {0, 0}, 1));
    CHECK(y.shape == std::vector<int64_t>{2, 1});
    CHECK(y.at(0, 0) == 5.0f);
    CHECK(y.at(1, 0) == -1.0f);
}

TEST_CASE("masked max pool: empty group yields a zero column") {
    Tape tape;
    Var x = tape.leaf(TensorF::from({2, 2}, {3, -1, 5, -2}), false);
    const TensorF& y = tape.value(tape.masked_max_pool(x, {1, 1}, 3));
    for (int64_t c = 0; c < 2; ++c) {
        CHECK(y.at(c, 0) == 0.0f);
        CHECK(y.at(c, 2) == 0.0f);
    }
    CHECK(y.at(0, 1) == 5.0f);
}

TEST_CASE("masked max pool: out-of-range group id") {
    Tape tape;
    Var x = tape.leaf(TensorF::zeros({2, 2}), false);
    CHECK_THROWS_AS(tape.masked_max_pool(x, {0, 2}, 2), IndexError);
}

TEST_CASE("masked max pool backward routes one unit to each winner") {
    Tape tape;
    Var x = tape.leaf(TensorF::from({3, 2}, {0.9f, -0.4f, 0.1f, 0.7f, -0.6f, 0.2f}), true);
    Var pooled = tape.masked_max_pool(x, {0, 1, 0}, 2);
    Var total = tape.get(tape.mean_pool(tape.reshape(tape.scale(pooled, 4.0f), {1, 4}), 1), 0);
    tape.backward(total);
    const TensorF g = tape.gradient(x);
    // Winners: channel0/group0 -> row0, channel1/group0 -> row2,
    // both channels of group1 -> row1.
    CHECK(g.at(0, 0) == 1.0f);
    CHECK(g.at(0, 1) == 0.0f);
    CHECK(g.at(1, 0) == 1.0f);
    CHECK(g.at(1, 1) == 1.0f);
    CHECK(g.at(2, 0) == 0.0f);
    CHECK(g.at(2, 1) == 1.0f);
}

TEST_CASE("masked max pool ties go to the lowest row index") {
    Tape tape;
    Var x = tape.leaf(TensorF::from({2, 1}, {1.0f, 1.0f}), true);
    Var pooled = tape.masked_max_pool(x, {0, 0}, 1);
    tape.backward(tape.get(pooled, 0));
    const TensorF g = tape.gradient(x);
    CHECK(g.at(0, 0) == 1.0f);
    CHECK(g.at(1, 0) == 0.0f);
}

TEST_CASE("softmax cross entropy closed forms") {
    Tape tape;
    Var uniform = tape.leaf(TensorF::from({4}, {0.3f, 0.3f, 0.3f, 0.3f}), false);
    CHECK(tape.value(tape.softmax_cross_entropy(uniform, 1)).scalar_value() ==
          doctest::Approx(std::log(4.0)).epsilon(1e-6));

    // Closed form: ln(1 + 3 e^-10) = 1.3626e-4.
    Var peaked = tape.leaf(TensorF::from({4}, {10.0f, 0.0f, 0.0f, 0.0f}), false);
    const double peaked_loss = tape.value(tape.softmax_cross_entropy(peaked, 0)).scalar_value();
    CHECK(peaked_loss == doctest::Approx(std::log(1.0 + 3.0 * std::exp(-10.0))).epsilon(1e-4));
    CHECK(peaked_loss < 2e-4);

    Var bad = tape.leaf(TensorF::from({4}, {0, 0, 0, 0}), false);
    CHECK_THROWS_AS(tape.softmax_cross_entropy(bad, 4), IndexError);
}

TEST_CASE("softmax cross entropy gradient is softmax minus one-hot") {
    Rng rng(3);
    TapeD tape;
    Var logits = tape.leaf(randn({5}, rng), true);
    Var loss = tape.softmax_cross_entropy(logits, 2);
    tape.backward(loss);
    const TensorD g = tape.gradient(logits);

    const TensorD& lv = tape.value(logits);
    double z = 0.0;
    for (int64_t i = 0; i < 5; ++i) z += std::exp(lv.at(i));
    for (int64_t i = 0; i < 5; ++i) {
        const double expect = std::exp(lv.at(i)) / z - (i == 2 ? 1.0 : 0.0);
        CHECK(g.at(i) == doctest::Approx(expect).epsilon(1e-9));
    }
}

TEST_CASE("temp softmax closed forms") {
    Tape tape;
    SUBCASE("all-negative inputs give the uniform distribution") {
        Var a = tape.leaf(TensorF::from({3}, {-1.0f, -5.0f, -0.2f}), false);
        const TensorF p = tape.value(tape.temp_softmax(a, 1.0f));
        for (int64_t i = 0; i < 3; ++i) CHECK(p.at(i) == doctest::Approx(1.0 / 3.0).epsilon(1e-6));
    }
    SUBCASE("a=(1,0) at tau=1") {
        Var a = tape.leaf(TensorF::from({2}, {1.0f, 0.0f}), false);
        const TensorF p = tape.value(tape.temp_softmax(a, 1.0f));
        const double e = std::exp(1.0);
        CHECK(p.at(0) == doctest::Approx(e / (e + 1.0)).epsilon(1e-6));
        CHECK(p.at(1) == doctest::Approx(1.0 / (e + 1.0)).epsilon(1e-6));
    }
    SUBCASE("non-positive temperature is rejected") {
        Var a = tape.leaf(TensorF::zeros({2}), false);
        CHECK_THROWS_AS(tape.temp_softmax(a, 0.0f), ConfigError);
    }
}

TEST_CASE("temp softmax approaches uniform as tau grows") {
    TapeD tape;
    Var a = tape.leaf(TensorD::from({4}, {2.0, 0.5, 1.0, 0.0}), false);
    Var uniform = tape.leaf(TensorD::full({4}, 0.25), false);
    double previous = 1e9;
    for (double tau : {0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 32.0}) {
        const double kl =
            tape.value(tape.kl_divergence(tape.temp_softmax(a, tau), uniform)).scalar_value();
        CHECK(kl < previous);
        previous = kl;
    }
    CHECK(previous < 1e-3);
}

TEST_CASE("kl divergence closed forms and properties") {
    Tape tape;
    SUBCASE("KL(p||p) = 0") {
        Var p = tape.leaf(TensorF::from({3}, {0.2f, 0.5f, 0.3f}), false);
        CHECK(tape.value(tape.kl_divergence(p, p)).scalar_value() == doctest::Approx(0.0));
    }
    SUBCASE("deterministic vs fair coin is ln 2, using 0 log 0 = 0") {
        Var p = tape.leaf(TensorF::from({2}, {1.0f, 0.0f}), false);
        Var q = tape.leaf(TensorF::from({2}, {0.5f, 0.5f}), false);
        CHECK(tape.value(tape.kl_divergence(p, q)).scalar_value() ==
              doctest::Approx(std::log(2.0)).epsilon(1e-6));
    }
    SUBCASE("negative entries are a domain error") {
        Var p = tape.leaf(TensorF::from({2}, {1.1f, -0.1f}), false);
        Var q = tape.leaf(TensorF::from({2}, {0.5f, 0.5f}), false);
        CHECK_THROWS_AS(tape.kl_divergence(p, q), DomainError);
        CHECK_THROWS_AS(tape.kl_divergence(q, p), DomainError);
    }
}

TEST_CASE("kl divergence is nonnegative over random distribution pairs") {
    Rng rng(11);
    TapeD tape;
    for (int trial = 0; trial < 1000; ++trial) {
        const int64_t n = 2 + static_cast<int64_t>(rng.uniform_index(6));
        TensorD p = TensorD::zeros({n}), q = TensorD::zeros({n});
        double sp = 0.0, sq = 0.0;
        for (int64_t i = 0; i < n; ++i) {
            p.at(i) = rng.uniform(1e-4, 1.0);
            q.at(i) = rng.uniform(1e-4, 1.0);
            sp += p.at(i);
            sq += q.at(i);
        }
        for (int64_t i = 0; i < n; ++i) {
            p.at(i) /= sp;
            q.at(i) /= sq;
        }
        const double kl =
            tape.value(tape.kl_divergence(tape.leaf(p, false), tape.leaf(q, false))).scalar_value();
        CHECK(kl >= -1e-12);
    }
}

TEST_CASE("backward basics") {
    SUBCASE("product rule on scalars") {
        TapeD tape;
        Var x = tape.leaf(TensorD::scalar(3.0), true);
        Var y = tape.leaf(TensorD::scalar(-0.5), true);
        tape.backward(tape.mul(x, y));
        CHECK(tape.gradient(x).scalar_value() == doctest::Approx(-0.5));
        CHECK(tape.gradient(y).scalar_value() == doctest::Approx(3.0));
    }
    SUBCASE("backward twice without reset is an error") {
        TapeD tape;
        Var x = tape.leaf(TensorD::scalar(1.0), true);
        Var y = tape.scale(x, 2.0);
        tape.backward(y);
        CHECK_THROWS_AS(tape.backward(y), UsageError);
        tape.clear_grads();
        tape.backward(y);
        CHECK(tape.gradient(x).scalar_value() == doctest::Approx(2.0));
    }
    SUBCASE("non-scalar root is an error") {
        TapeD tape;
        Var x = tape.leaf(TensorD::zeros({2, 2}), true);
        CHECK_THROWS_AS(tape.backward(x), UsageError);
    }
}

TEST_CASE("mean pool and l2 norm definitions") {
    Tape tape;
    Var x = tape.leaf(TensorF::from({2, 3}, {1, 2, 3, 4, 5, 6}), false);
    const TensorF rows = tape.value(tape.mean_pool(x, 1));
    CHECK(rows.at(0) == doctest::Approx(2.0));
    CHECK(rows.at(1) == doctest::Approx(5.0));
    const TensorF cols = tape.value(tape.mean_pool(x, 0));
    CHECK(cols.at(0) == doctest::Approx(2.5));

    Var v = tape.leaf(TensorF::from({2}, {3.0f, 4.0f}), false);
    CHECK(tape.value(tape.l2_norm(v)).scalar_value() == doctest::Approx(5.0));
}

TEST_CASE("every differentiable primitive passes the finite-difference oracle") {
    // The shared suite; its stage-1/stage-2 rows double as the end-to-end
    // checks in the acceptance run.
    for (const GradCheckCase& c : run_gradcheck_suite()) {
        INFO(c.name, " max rel err ", c.max_rel_error);
        CHECK(c.pass);
    }
}
