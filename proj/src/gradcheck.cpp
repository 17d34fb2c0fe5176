#include "xsplain/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "xsplain/backbone.hpp"
#include "xsplain/disentangler.hpp"
#include "xsplain/matexp.hpp"
#include "xsplain/rng.hpp"
#include "xsplain/tape.hpp"

namespace xsplain {

FdCheck finite_difference_check(const std::function<double(const std::vector<TensorD>&)>& loss,
                                const std::vector<TensorD>& at, const std::vector<TensorD>& analytic,
                                int max_coords_per_tensor, uint64_t seed, double step) {
    if (at.size() != analytic.size())
        throw UsageError("finite_difference_check: gradient count mismatch");
    Rng rng(seed);
    FdCheck result;
    std::vector<TensorD> work = at;
    for (size_t t = 0; t < work.size(); ++t) {
        const int64_t n = work[t].numel();
        std::vector<int64_t> coords;
        if (max_coords_per_tensor <= 0 || n <= max_coords_per_tensor) {
            coords.resize(static_cast<size_t>(n));
            for (int64_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
        } else {
            for (int i = 0; i < max_coords_per_tensor; ++i) coords.push_back(rng.uniform_index(n));
            std::sort(coords.begin(), coords.end());
            coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
        }
        for (int64_t c : coords) {
            const double saved = work[t].at(c);
            work[t].at(c) = saved + step;
            const double up = loss(work);
            work[t].at(c) = saved - step;
            const double down = loss(work);
            work[t].at(c) = saved;
            const double fd = (up - down) / (2.0 * step);
            const double ad = analytic[t].at(c);
            const double rel = std::abs(ad - fd) / std::max({std::abs(ad), std::abs(fd), 1e-3});
            result.max_rel_error = std::max(result.max_rel_error, rel);
            ++result.coords_checked;
        }
    }
    return result;
}

namespace {

TensorD random_tensor(std::vector<int64_t> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    TensorD t = TensorD::zeros(std::move(shape));
    for (auto& e : t.v) e = rng.uniform(lo, hi);
    return t;
}

// Keeps values away from the relu kink so finite differences stay clean.
TensorD random_tensor_off_kink(std::vector<int64_t> shape, Rng& rng) {
    TensorD t = random_tensor(std::move(shape), rng);
    for (auto& e : t.v)
        if (std::abs(e) < 0.05) e = e < 0 ? e - 0.05 : e + 0.05;
    return t;
}

GradCheckCase run_case(const std::string& name, double threshold,
                       const std::function<Var(TapeD&, const std::vector<Var>&)>& build,
                       const std::vector<TensorD>& at, int max_coords, uint64_t seed) {
    TapeD tape;
    std::vector<Var> leaves;
    leaves.reserve(at.size());
    for (const TensorD& t : at) leaves.push_back(tape.leaf(t, true));
    Var loss_var = build(tape, leaves);
    tape.backward(loss_var);
    std::vector<TensorD> analytic;
    analytic.reserve(at.size());
    for (Var v : leaves) analytic.push_back(tape.gradient(v));

    const auto loss = [&build](const std::vector<TensorD>& params) {
        TapeD fresh;
        std::vector<Var> ls;
        ls.reserve(params.size());
        for (const TensorD& t : params) ls.push_back(fresh.leaf(t, false));
        return fresh.value(build(fresh, ls)).scalar_value();
    };
    const FdCheck fd = finite_difference_check(loss, at, analytic, max_coords, seed);

    GradCheckCase out;
    out.name = name;
    out.max_rel_error = fd.max_rel_error;
    out.threshold = threshold;
    out.coords_checked = fd.coords_checked;
    out.pass = fd.max_rel_error < threshold;
    return out;
}

// Weighted sum against fixed coefficients turns any tensor output into a
// scalar objective with a dense pullback.
Var weigh(TapeD& tape, Var x, uint64_t seed) {
    Rng rng(seed);
    TensorD w = random_tensor(tape.value(x).shape, rng);
    Var flatw = tape.constant(std::move(w));
    Var prod = tape.mul(x, flatw);
    const int64_t n = tape.value(prod).numel();
    Var flat = tape.reshape(prod, {1, n});
    return tape.get(tape.mean_pool(flat, 1), 0);
}

GradCheckCase check_stage1_end_to_end() {
    Hyper hyper;
    hyper.grid_size = 2;
    hyper.channels = 8;
    hyper.num_classes = 4;
    hyper.lambda_density = 3.5f;
    const LabeledSample sample = generate_synthetic("torus", 32, 91, hyper.grid_size);
    // 16 primitives keep the finite-difference pass fast.
    LabeledSample small = sample;
    small.primitives.resize(16);
    small.normalized_positions.resize(16);
    small.voxel_index.resize(16);
    small.voxel_counts.assign(small.voxel_counts.size(), 0);
    for (int32_t v : small.voxel_index) ++small.voxel_counts[static_cast<size_t>(v)];

    const BackboneParamsT<double> params = init_backbone(hyper, 17).cast<double>();
    std::vector<TensorD> at;
    params.for_each_tensor([&](const char*, const TensorD& t) { at.push_back(t); });

    const auto loss = [&](const std::vector<TensorD>& tensors) {
        BackboneParamsT<double> p = params;
        size_t i = 0;
        p.for_each_tensor([&](const char*, TensorD& t) { t = tensors[i++]; });
        TapeD tape;
        BackboneVars vars = mount_backbone(tape, p, false);
        TraceVars tv = backbone_forward_tape(tape, vars, small, hyper, true);
        return tape.value(tv.loss_total).scalar_value();
    };

    TapeD tape;
    BackboneVars vars = mount_backbone(tape, params, true);
    TraceVars tv = backbone_forward_tape(tape, vars, small, hyper, true);
    tape.backward(tv.loss_total);
    std::vector<TensorD> analytic;
    for (Var v : vars.ordered) analytic.push_back(tape.gradient(v));

    const FdCheck fd = finite_difference_check(loss, at, analytic, 10, 23);
    GradCheckCase out;
    out.name = "stage1_loss";
    out.max_rel_error = fd.max_rel_error;
    out.threshold = 1e-4;
    out.coords_checked = fd.coords_checked;
    out.pass = fd.max_rel_error < out.threshold;
    return out;
}

GradCheckCase check_stage2_end_to_end() {
    // Toy stage-2 state: C=8 channels, fabricated voxel features.
    constexpr int C = 8;
    Rng rng(31);
    std::vector<CachedVoxelFeatures> cache(3);
    for (size_t s = 0; s < cache.size(); ++s) {
        CachedVoxelFeatures& item = cache[s];
        item.id = "toy_" + std::to_string(s);
        const int64_t occupied = 5;
        item.occupied.resize(occupied);
        for (int64_t j = 0; j < occupied; ++j) item.occupied[static_cast<size_t>(j)] = static_cast<int32_t>(j);
        item.h_occ = random_tensor({C, occupied}, rng, 0.0, 1.0).cast<float>();
        item.counts.assign(8, 1);
    }
    std::vector<std::pair<const CachedVoxelFeatures*, int>> pairs;
    for (int c = 0; c < C; ++c) pairs.emplace_back(&cache[static_cast<size_t>(c) % cache.size()], c);

    TensorD p0 = random_tensor({C, C}, rng, -0.3, 0.3);

    const auto loss = [&](const std::vector<TensorD>& tensors) {
        TapeD tape;
        Var p_var = tape.leaf(tensors[0], false);
        Var u_var = matrix_exp_skew(tape, p_var);
        Var l = purity_loss_tape<double>(tape, u_var, pairs, 1e-6);
        return tape.value(l).scalar_value();
    };

    TapeD tape;
    Var p_var = tape.leaf(p0, true);
    Var u_var = matrix_exp_skew(tape, p_var);
    Var l = purity_loss_tape<double>(tape, u_var, pairs, 1e-6);
    tape.backward(l);

    const FdCheck fd = finite_difference_check(loss, {p0}, {tape.gradient(p_var)}, 0, 37);
    GradCheckCase out;
    out.name = "stage2_purity_loss";
    out.max_rel_error = fd.max_rel_error;
    out.threshold = 1e-4;
    out.coords_checked = fd.coords_checked;
    out.pass = fd.max_rel_error < out.threshold;
    return out;
}

} // namespace

std::vector<GradCheckCase> run_gradcheck_suite() {
    std::vector<GradCheckCase> cases;
    Rng rng(5);

    {
        TensorD x = random_tensor({3, 5}, rng);
        TensorD w = random_tensor({5, 4}, rng);
        TensorD b = random_tensor({4}, rng);
        cases.push_back(run_case(
            "linear", 1e-6,
            [](TapeD& t, const std::vector<Var>& v) { return weigh(t, t.linear(v[0], v[1], v[2]), 101); },
            {x, w, b}, 0, 11));
    }
    {
        TensorD x = random_tensor_off_kink({4, 6}, rng);
        cases.push_back(run_case(
            "relu", 1e-6, [](TapeD& t, const std::vector<Var>& v) { return weigh(t, t.relu(v[0]), 102); },
            {x}, 0, 12));
    }
    {
        TensorD a = random_tensor({6, 3}, rng);
        TensorD b = random_tensor({3, 5}, rng);
        cases.push_back(run_case(
            "matmul", 1e-6,
            [](TapeD& t, const std::vector<Var>& v) { return weigh(t, t.matmul(v[0], v[1]), 103); }, {a, b},
            0, 13));
    }
    {
        TensorD x = random_tensor({5, 7}, rng);
        cases.push_back(run_case(
            "mean_pool", 1e-6,
            [](TapeD& t, const std::vector<Var>& v) {
                return t.add(weigh(t, t.mean_pool(v[0], 0), 104), weigh(t, t.mean_pool(v[0], 1), 105));
            },
            {x}, 0, 14));
    }
    {
        TensorD x = random_tensor({9}, rng);
        cases.push_back(run_case(
            "l2_norm", 1e-6, [](TapeD& t, const std::vector<Var>& v) { return t.l2_norm(v[0]); }, {x}, 0,
            15));
    }
    {
        // 2 channels x 3 rows in two groups; distinct values, no ties.
        TensorD x = TensorD::from({3, 2}, {0.9, -0.4, 0.1, 0.7, -0.6, 0.2});
        const std::vector<int32_t> gid{0, 1, 0};
        cases.push_back(run_case(
            "masked_max_pool", 1e-6,
            [gid](TapeD& t, const std::vector<Var>& v) {
                return weigh(t, t.masked_max_pool(v[0], gid, 2), 106);
            },
            {x}, 0, 16));
    }
    {
        TensorD logits = random_tensor({5}, rng, -2.0, 2.0);
        cases.push_back(run_case(
            "softmax_cross_entropy", 1e-6,
            [](TapeD& t, const std::vector<Var>& v) { return t.softmax_cross_entropy(v[0], 2); }, {logits},
            0, 17));
    }
    {
        TensorD a = random_tensor_off_kink({7}, rng);
        cases.push_back(run_case(
            "temp_softmax", 1e-6,
            [](TapeD& t, const std::vector<Var>& v) { return weigh(t, t.temp_softmax(v[0], 0.7), 107); },
            {a}, 0, 18));
    }
    {
        TensorD p = random_tensor({6}, rng, 0.05, 1.0);
        TensorD q = random_tensor({6}, rng, 0.05, 1.0);
        cases.push_back(run_case(
            "kl_divergence", 1e-6,
            [](TapeD& t, const std::vector<Var>& v) { return t.kl_divergence(v[0], v[1]); }, {p, q}, 0, 19));
    }
    {
        TensorD p = random_tensor({8, 8}, rng, -0.8, 0.8);
        cases.push_back(run_case(
            "matrix_exp_skew", 1e-6,
            [](TapeD& t, const std::vector<Var>& v) { return weigh(t, matrix_exp_skew(t, v[0]), 108); }, {p},
            0, 20));
    }
    cases.push_back(check_stage1_end_to_end());
    cases.push_back(check_stage2_end_to_end());
    return cases;
}

} // namespace xsplain
