#include <doctest.h>

#include <cmath>
#include <fstream>

#include "xsplain/backbone.hpp"
#include "xsplain/gradcheck.hpp"
#include "xsplain/rng.hpp"

using namespace xsplain;

namespace {

Hyper small_hyper() {
    Hyper h;
    h.grid_size = 2;
    h.channels = 8;
    h.num_classes = 4;
    return h;
}

} // namespace

TEST_CASE("single primitive with G=1: one voxel column equals the point feature") {
    Hyper h = small_hyper();
    h.grid_size = 1;
    const BackboneParams params = init_backbone(h, 3);
    LabeledSample s = generate_synthetic("sphere", 32, 1, 1);
    s.primitives.resize(1);
    s.normalized_positions.resize(1);
    s.voxel_index.resize(1);
    s.voxel_counts = {1};
    const ForwardTrace tr = forward(s, params);
    CHECK(tr.voxel_features.shape == std::vector<int64_t>{8, 1});
    for (int64_t c = 0; c < 8; ++c) {
        CHECK(tr.voxel_features.at(c, 0) == tr.point_features.at(0, c));
        CHECK(tr.global_feature.at(c) == tr.voxel_features.at(c, 0));
    }
}

TEST_CASE("duplicating every primitive leaves voxel features unchanged") {
    const Hyper h = small_hyper();
    const BackboneParams params = init_backbone(h, 5);
    const LabeledSample s = generate_synthetic("box", 64, 9, h.grid_size);
    LabeledSample doubled = s;
    for (size_t i = 0; i < s.primitives.size(); ++i) {
        doubled.primitives.push_back(s.primitives[i]);
        doubled.normalized_positions.push_back(s.normalized_positions[i]);
        doubled.voxel_index.push_back(s.voxel_index[i]);
    }
    for (size_t v = 0; v < doubled.voxel_counts.size(); ++v) doubled.voxel_counts[v] *= 2;

    const ForwardTrace a = forward(s, params);
    const ForwardTrace b = forward(doubled, params);
    for (int64_t i = 0; i < a.voxel_features.numel(); ++i)
        CHECK(a.voxel_features.at(i) == b.voxel_features.at(i));
}

TEST_CASE("logits are bit-identical under primitive permutations") {
    const Hyper h = small_hyper();
    const BackboneParams params = init_backbone(h, 7);
    const LabeledSample s = generate_synthetic("torus", 64, 21, h.grid_size);
    const ForwardTrace base = forward(s, params);

    Rng rng(33);
    for (int trial = 0; trial < 8; ++trial) {
        std::vector<int32_t> perm(s.primitives.size());
        for (size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int32_t>(i);
        rng.shuffle(perm);
        const ForwardTrace permuted = forward(permute_sample(s, perm), params);
        for (int64_t k = 0; k < base.logits.numel(); ++k) CHECK(base.logits.at(k) == permuted.logits.at(k));
    }
}

TEST_CASE("alignment net contracts") {
    const BackboneParams params = init_backbone(small_hyper(), 11);
    Rng rng(3);
    TensorF pts = TensorF::zeros({20, 3});
    for (auto& e : pts.v) e = static_cast<float>(rng.uniform(-0.5, 0.5));

    SUBCASE("freshly initialized net emits the exact identity") {
        const TensorF t = stn_forward(pts, params.stn3, 3);
        REQUIRE(t.shape == std::vector<int64_t>{3, 3});
        for (int64_t i = 0; i < 3; ++i)
            for (int64_t j = 0; j < 3; ++j) CHECK(t.at(i, j) == (i == j ? 1.0f : 0.0f));
    }
    SUBCASE("transform is invariant to point permutations") {
        StnParamsT<float> stn = params.stn3;
        Rng wrng(5);
        for (auto& e : stn.wf2.v) e = static_cast<float>(wrng.uniform(-0.1, 0.1));
        const TensorF base = stn_forward(pts, stn, 3);
        TensorF reversed = TensorF::zeros({20, 3});
        for (int64_t i = 0; i < 20; ++i)
            for (int64_t j = 0; j < 3; ++j) reversed.at(i, j) = pts.at(19 - i, j);
        const TensorF permuted = stn_forward(reversed, stn, 3);
        for (int64_t i = 0; i < base.numel(); ++i) CHECK(base.at(i) == permuted.at(i));
    }
    SUBCASE("output shape is size x size for both alignment nets") {
        TensorF feats = TensorF::zeros({5, 64});
        for (auto& e : feats.v) e = static_cast<float>(rng.uniform(-1, 1));
        CHECK(stn_forward(feats, params.stn64, 64).shape == std::vector<int64_t>{64, 64});
        CHECK(stn_forward(pts, params.stn3, 3).shape == std::vector<int64_t>{3, 3});
    }
}

TEST_CASE("grid size mismatch is a config error") {
    const BackboneParams params = init_backbone(small_hyper(), 3);
    const LabeledSample s = generate_synthetic("sphere", 32, 1, 3); // voxelized for G=3
    CHECK_THROWS_AS(forward(s, params), ConfigError);
}

TEST_CASE("empty voxel contract: occupied voxels count the nonzero columns") {
    const Hyper h = small_hyper();
    const BackboneParams params = init_backbone(h, 13);
    const LabeledSample s = generate_synthetic("cylinder", 48, 2, h.grid_size);
    const ForwardTrace tr = forward(s, params);

    int64_t occupied = 0;
    for (int32_t c : s.voxel_counts)
        if (c > 0) ++occupied;
    int64_t zero_columns = 0;
    for (int64_t v = 0; v < tr.voxel_features.cols(); ++v) {
        bool all_zero = true;
        for (int64_t c = 0; c < tr.voxel_features.rows(); ++c)
            all_zero = all_zero && tr.voxel_features.at(c, v) == 0.0f;
        if (all_zero) ++zero_columns;
        if (s.voxel_counts[static_cast<size_t>(v)] == 0)
            for (int64_t c = 0; c < tr.voxel_features.rows(); ++c)
                CHECK(tr.voxel_features.at(c, v) == 0.0f);
    }
    CHECK(zero_columns == tr.voxel_features.cols() - occupied);
}

TEST_CASE("global feature averages voxel columns over all cells") {
    const Hyper h = small_hyper();
    const BackboneParams params = init_backbone(h, 17);
    const LabeledSample s = generate_synthetic("box", 48, 5, h.grid_size);
    const ForwardTrace tr = forward(s, params);
    for (int64_t c = 0; c < tr.global_feature.numel(); ++c) {
        float mean = 0.0f;
        for (int64_t v = 0; v < tr.voxel_features.cols(); ++v) mean += tr.voxel_features.at(c, v);
        mean /= static_cast<float>(tr.voxel_features.cols());
        CHECK(tr.global_feature.at(c) == doctest::Approx(mean).epsilon(1e-6));
    }
    // logits = W_cls z
    for (int64_t k = 0; k < tr.logits.numel(); ++k) {
        float acc = 0.0f;
        for (int64_t c = 0; c < tr.global_feature.numel(); ++c)
            acc += params.w_cls.at(k, c) * tr.global_feature.at(c);
        CHECK(tr.logits.at(k) == doctest::Approx(acc).epsilon(1e-5));
    }
}

TEST_CASE("density distributions") {
    SUBCASE("single occupied voxel concentrates q") {
        ForwardTrace trace;
        trace.voxel_features = TensorF::zeros({2, 8});
        const std::vector<int32_t> counts = {0, 0, 8, 0, 0, 0, 0, 0};
        const float eps = 1e-6f;
        auto [p, q] = density_distributions(trace, counts, 1.0f, 1.0f, eps);
        CHECK(q.at(2) == doctest::Approx((8.0 + eps) / (8.0 + 8.0 * eps)).epsilon(1e-6));
        // All-zero activations give uniform p.
        for (int64_t v = 0; v < 8; ++v) CHECK(p.at(v) == doctest::Approx(0.125).epsilon(1e-6));
    }
    SUBCASE("uniform counts give uniform q for any beta") {
        ForwardTrace trace;
        trace.voxel_features = TensorF::zeros({2, 4});
        for (float beta : {0.5f, 1.0f, 2.0f}) {
            auto [p, q] = density_distributions(trace, {3, 3, 3, 3}, 1.0f, beta, 1e-6f);
            for (int64_t v = 0; v < 4; ++v) CHECK(q.at(v) == doctest::Approx(0.25).epsilon(1e-6));
        }
    }
    SUBCASE("beta -> 0 flattens q regardless of counts") {
        // n^beta with beta tiny approaches 1 for every occupied count.
        ForwardTrace trace;
        trace.voxel_features = TensorF::zeros({2, 3});
        auto [p, q] = density_distributions(trace, {1, 10, 100}, 1.0f, 1e-6f, 1e-6f);
        for (int64_t v = 0; v < 3; ++v) CHECK(q.at(v) == doctest::Approx(1.0 / 3.0).epsilon(1e-4));
    }
}

TEST_CASE("stage-1 loss composition") {
    const Hyper h = small_hyper();
    const BackboneParams params = init_backbone(h, 23);
    const LabeledSample s = generate_synthetic("sphere", 32, 8, h.grid_size);
    const ForwardTrace tr = forward(s, params);

    SUBCASE("lambda = 0 reduces to pure cross-entropy") {
        Hyper h0 = h;
        h0.lambda_density = 0.0f;
        CHECK(stage1_loss(tr, s.label, h0) == doctest::Approx(tr.loss_cls).epsilon(1e-6));
    }
    SUBCASE("composite equals ce + lambda * kl") {
        Hyper h1 = h;
        h1.lambda_density = 2.5f;
        CHECK(stage1_loss(tr, s.label, h1) ==
              doctest::Approx(tr.loss_cls + 2.5f * tr.loss_density).epsilon(1e-5));
    }
}

TEST_CASE("density loss drops when activation mass moves to the crowded voxel") {
    // Hand-built 3-voxel scenario: counts (1, 8, 1).
    Tape tape;
    const std::vector<int32_t> counts = {1, 8, 1};
    Var q = tape.constant(density_target<float>(counts, 1.0f, 1e-6f));
    Var sparse_heavy = tape.constant(TensorF::from({3}, {5.0f, 1.0f, 0.5f}));
    Var dense_heavy = tape.constant(TensorF::from({3}, {1.0f, 5.0f, 0.5f}));
    const float kl_sparse =
        tape.value(tape.kl_divergence(tape.temp_softmax(sparse_heavy, 1.0f), q)).scalar_value();
    const float kl_dense =
        tape.value(tape.kl_divergence(tape.temp_softmax(dense_heavy, 1.0f), q)).scalar_value();
    CHECK(kl_dense < kl_sparse);
}

TEST_CASE("voxel anchoring: alignment weights do not touch stored voxel ids") {
    const Hyper h = small_hyper();
    BackboneParams params = init_backbone(h, 29);
    const LabeledSample s = generate_synthetic("torus", 64, 13, h.grid_size);
    const std::vector<int32_t> before = s.voxel_index;
    Rng rng(55);
    for (auto& e : params.stn3.wf2.v) e = static_cast<float>(rng.uniform(-0.5, 0.5));
    for (auto& e : params.stn64.wf2.v) e = static_cast<float>(rng.uniform(-0.5, 0.5));
    (void)forward(s, params);
    CHECK(s.voxel_index == before);
    const auto recomputed = assign_voxels(s.normalized_positions, s.grid_size);
    CHECK(recomputed.voxel_index == before);
}

TEST_CASE("checkpoint round trip is bit-exact") {
    const Hyper h = small_hyper();
    BackboneCheckpoint ckpt;
    ckpt.params = init_backbone(h, 31);
    ckpt.class_names = {"sphere", "box", "torus", "cylinder"};
    ckpt.feature_mode = FeatureMode::Gaussian11d;
    ckpt.seed = 31;
    const auto path = std::filesystem::temp_directory_path() / "xsplain_ckpt_test.bin";
    save_backbone_checkpoint(ckpt, path);
    const BackboneCheckpoint back = load_backbone_checkpoint(path);
    CHECK(back.params.content_hash() == ckpt.params.content_hash());
    CHECK(back.class_names == ckpt.class_names);
    CHECK(back.seed == 31);
    CHECK(back.params.hyper.grid_size == h.grid_size);

    // Corrupt magic is a format error.
    std::filesystem::path bad = std::filesystem::temp_directory_path() / "xsplain_ckpt_bad.bin";
    std::ofstream out(bad, std::ios::binary);
    out << "NOTACKPT";
    out.close();
    CHECK_THROWS_AS(load_backbone_checkpoint(bad), FormatError);
}
