#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "xsplain/matexp.hpp"
#include "xsplain/splat_io.hpp"
#include "xsplain/tape.hpp"
#include "xsplain/tensor.hpp"

namespace xsplain {

// Shared hyperparameter block. lambda_density weighs the KL term, tau the
// activation softmax temperature, beta the density exponent and eps the
// stability floor.
struct Hyper {
    int grid_size = 7;   // G
    int channels = 256;  // C
    int num_classes = 4; // K
    float tau = 1.0f;
    float beta = 1.0f;
    float eps = 1e-6f;
    float lambda_density = 3.5f;

    int64_t voxels() const { return static_cast<int64_t>(grid_size) * grid_size * grid_size; }

    void validate() const {
        if (grid_size < 1) throw ConfigError("grid size must be >= 1");
        if (channels < 1) throw ConfigError("channels must be >= 1");
        if (num_classes < 2) throw ConfigError("need at least 2 classes");
        if (!(tau > 0.0f)) throw ConfigError("tau must be > 0");
        if (!(beta > 0.0f)) throw ConfigError("beta must be > 0");
        if (!(eps > 0.0f)) throw ConfigError("eps must be > 0");
        if (lambda_density < 0.0f) throw ConfigError("lambda_density must be >= 0");
    }
};

namespace backbone_dims {
// Per-point trunk widths follow the PointNet convention (11 -> 64 -> 64,
// then 64 -> 128 -> C). The alignment-net widths are sized for CPU training.
constexpr int kInputWidth = 11;
constexpr int kPointHidden = 64;
constexpr int kMlp2Hidden = 128;
constexpr int kStnHidden1 = 64;
constexpr int kStnHidden2 = 128;
constexpr int kStnDense = 64;
} // namespace backbone_dims

template <class T>
struct StnParamsT {
    TensorT<T> w1, b1, w2, b2;     // shared per-point layers
    TensorT<T> wf1, bf1, wf2, bf2; // dense head; wf2 = 0 and bf2 = vec(I) at init
};

template <class T>
struct BackboneParamsT {
    Hyper hyper;
    StnParamsT<T> stn3, stn64;
    TensorT<T> mlp1_w1, mlp1_b1, mlp1_w2, mlp1_b2; // 11 -> 64 -> 64
    TensorT<T> mlp2_w1, mlp2_b1, mlp2_w2, mlp2_b2; // 64 -> 128 -> C
    TensorT<T> w_cls;                              // K x C, no bias
    bool frozen = false;

    // Visits every parameter tensor in a fixed order; this order defines the
    // optimizer slot layout and the checkpoint layout.
    template <class F>
    void for_each_tensor(F&& f) {
        visit(*this, f);
    }
    template <class F>
    void for_each_tensor(F&& f) const {
        visit(*this, f);
    }

    std::vector<TensorT<T>*> trainable_tensors() {
        if (frozen) throw FrozenStateViolation("backbone parameters are frozen");
        std::vector<TensorT<T>*> out;
        for_each_tensor([&](const char*, TensorT<T>& t) { out.push_back(&t); });
        return out;
    }

    uint64_t content_hash() const {
        uint64_t h = 0xcbf29ce484222325ULL;
        for_each_tensor([&](const char*, const TensorT<T>& t) { h = kernels::content_hash(t, h); });
        return h;
    }

    template <class U>
    BackboneParamsT<U> cast() const {
        BackboneParamsT<U> out;
        out.hyper = hyper;
        out.frozen = frozen;
        std::vector<const TensorT<T>*> src;
        for_each_tensor([&](const char*, const TensorT<T>& t) { src.push_back(&t); });
        size_t i = 0;
        out.for_each_tensor([&](const char*, TensorT<U>& t) { t = src[i++]->template cast<U>(); });
        return out;
    }

private:
    template <class Self, class F>
    static void visit(Self& self, F& f) {
        f("stn3.w1", self.stn3.w1);
        f("stn3.b1", self.stn3.b1);
        f("stn3.w2", self.stn3.w2);
        f("stn3.b2", self.stn3.b2);
        f("stn3.wf1", self.stn3.wf1);
        f("stn3.bf1", self.stn3.bf1);
        f("stn3.wf2", self.stn3.wf2);
        f("stn3.bf2", self.stn3.bf2);
        f("mlp1.w1", self.mlp1_w1);
        f("mlp1.b1", self.mlp1_b1);
        f("mlp1.w2", self.mlp1_w2);
        f("mlp1.b2", self.mlp1_b2);
        f("stn64.w1", self.stn64.w1);
        f("stn64.b1", self.stn64.b1);
        f("stn64.w2", self.stn64.w2);
        f("stn64.b2", self.stn64.b2);
        f("stn64.wf1", self.stn64.wf1);
        f("stn64.bf1", self.stn64.bf1);
        f("stn64.wf2", self.stn64.wf2);
        f("stn64.bf2", self.stn64.bf2);
        f("mlp2.w1", self.mlp2_w1);
        f("mlp2.b1", self.mlp2_b1);
        f("mlp2.w2", self.mlp2_w2);
        f("mlp2.b2", self.mlp2_b2);
        f("w_cls", self.w_cls);
    }
};

using BackboneParams = BackboneParamsT<float>;

BackboneParams init_backbone(const Hyper& hyper, uint64_t seed);

// Tape handles for one mounted copy of the parameters.
struct StnVars {
    Var w1, b1, w2, b2, wf1, bf1, wf2, bf2;
};
struct BackboneVars {
    StnVars stn3, stn64;
    Var mlp1_w1, mlp1_b1, mlp1_w2, mlp1_b2;
    Var mlp2_w1, mlp2_b1, mlp2_w2, mlp2_b2;
    Var w_cls;
    std::vector<Var> ordered; // same order as for_each_tensor
};

template <class T>
BackboneVars mount_backbone(TapeT<T>& tape, const BackboneParamsT<T>& params, bool trainable) {
    std::unordered_map<std::string, Var> by_name;
    std::vector<Var> ordered;
    params.for_each_tensor([&](const char* name, const TensorT<T>& t) {
        Var v = tape.leaf(t, trainable);
        by_name[name] = v;
        ordered.push_back(v);
    });
    BackboneVars v;
    v.stn3 = {by_name.at("stn3.w1"),  by_name.at("stn3.b1"),  by_name.at("stn3.w2"),  by_name.at("stn3.b2"),
              by_name.at("stn3.wf1"), by_name.at("stn3.bf1"), by_name.at("stn3.wf2"), by_name.at("stn3.bf2")};
    v.stn64 = {by_name.at("stn64.w1"),  by_name.at("stn64.b1"),  by_name.at("stn64.w2"),  by_name.at("stn64.b2"),
               by_name.at("stn64.wf1"), by_name.at("stn64.bf1"), by_name.at("stn64.wf2"), by_name.at("stn64.bf2")};
    v.mlp1_w1 = by_name.at("mlp1.w1");
    v.mlp1_b1 = by_name.at("mlp1.b1");
    v.mlp1_w2 = by_name.at("mlp1.w2");
    v.mlp1_b2 = by_name.at("mlp1.b2");
    v.mlp2_w1 = by_name.at("mlp2.w1");
    v.mlp2_b1 = by_name.at("mlp2.b1");
    v.mlp2_w2 = by_name.at("mlp2.w2");
    v.mlp2_b2 = by_name.at("mlp2.b2");
    v.w_cls = by_name.at("w_cls");
    v.ordered = std::move(ordered);
    return v;
}

// Alignment net: shared per-point layers, max pool over points, dense head.
// Fresh initialization yields the exact identity transform.
template <class T>
Var stn_tape(TapeT<T>& tape, const StnVars& sv, Var points, int size) {
    Var h = tape.relu(tape.linear(points, sv.w1, sv.b1));
    h = tape.relu(tape.linear(h, sv.w2, sv.b2));
    const auto n_points = tape.value(points).rows();
    Var pooled = tape.masked_max_pool(h, std::vector<int32_t>(static_cast<size_t>(n_points), 0), 1);
    Var g = tape.reshape(pooled, {backbone_dims::kStnHidden2});
    Var f = tape.relu(tape.linear(g, sv.wf1, sv.bf1));
    Var t = tape.linear(f, sv.wf2, sv.bf2);
    return tape.reshape(t, {size, size});
}

// Target density over voxels: q_v = (n_v^beta + eps) / sum_u (n_u^beta + eps).
template <class T>
TensorT<T> density_target(const std::vector<int32_t>& counts, T beta, T eps) {
    TensorT<T> q = TensorT<T>::zeros({static_cast<int64_t>(counts.size())});
    T total = T(0);
    for (size_t v = 0; v < counts.size(); ++v) {
        const T w = std::pow(static_cast<T>(counts[v]), beta) + eps;
        q.at(static_cast<int64_t>(v)) = w;
        total += w;
    }
    for (auto& e : q.v) e /= total;
    return q;
}

struct TraceVars {
    Var point_features;   // N x C
    Var voxel_features;   // C x G^3
    Var global_feature;   // C
    Var logits;           // K
    Var activation_norms; // G^3
    Var p, q;             // G^3
    Var loss_cls, loss_density, loss_total; // only when built with a loss
};

// Network inputs: centered normalized positions plus the 8 non-position
// attribute slots. Voxel ids come from the stored per-primitive assignment
// and are never recomputed after alignment.
template <class T>
std::pair<TensorT<T>, TensorT<T>> build_inputs(const LabeledSample& sample) {
    const int64_t n = sample.size();
    TensorT<T> pos = TensorT<T>::zeros({n, 3});
    TensorT<T> rest = TensorT<T>::zeros({n, 8});
    for (int64_t i = 0; i < n; ++i) {
        const auto& g = sample.primitives[static_cast<size_t>(i)];
        const auto& np = sample.normalized_positions[static_cast<size_t>(i)];
        for (int a = 0; a < 3; ++a) pos.at(i, a) = static_cast<T>(np[static_cast<size_t>(a)]) - T(0.5);
        for (int a = 0; a < 3; ++a) rest.at(i, a) = static_cast<T>(g.scale[static_cast<size_t>(a)]);
        for (int a = 0; a < 4; ++a) rest.at(i, 3 + a) = static_cast<T>(g.rotation[static_cast<size_t>(a)]);
        rest.at(i, 7) = static_cast<T>(g.opacity);
    }
    return {std::move(pos), std::move(rest)};
}

template <class T>
TraceVars backbone_forward_tape(TapeT<T>& tape, const BackboneVars& v, const LabeledSample& sample,
                                const Hyper& hyper, bool with_loss) {
    if (sample.grid_size != hyper.grid_size)
        throw ConfigError("sample voxelized for G=" + std::to_string(sample.grid_size) +
                          " but model expects G=" + std::to_string(hyper.grid_size));
    if (sample.size() == 0) throw DataError("forward: sample '" + sample.id + "' has no primitives");

    auto [pos_t, rest_t] = build_inputs<T>(sample);
    Var pos = tape.constant(std::move(pos_t));
    Var rest = tape.constant(std::move(rest_t));

    Var t3 = stn_tape(tape, v.stn3, pos, 3);
    Var x = tape.concat_cols(tape.matmul(pos, t3), rest);
    Var h = tape.relu(tape.linear(x, v.mlp1_w1, v.mlp1_b1));
    h = tape.relu(tape.linear(h, v.mlp1_w2, v.mlp1_b2));
    Var t64 = stn_tape(tape, v.stn64, h, backbone_dims::kPointHidden);
    Var ha = tape.matmul(h, t64);
    Var f = tape.relu(tape.linear(ha, v.mlp2_w1, v.mlp2_b1));
    f = tape.relu(tape.linear(f, v.mlp2_w2, v.mlp2_b2));

    TraceVars tr;
    tr.point_features = f;
    tr.voxel_features = tape.masked_max_pool(f, sample.voxel_index, hyper.voxels());
    tr.global_feature = tape.mean_pool(tr.voxel_features, 1);
    tr.logits = tape.matvec(v.w_cls, tr.global_feature);
    tr.activation_norms = tape.col_l2_norms(tr.voxel_features);
    tr.p = tape.temp_softmax(tr.activation_norms, static_cast<T>(hyper.tau));
    tr.q = tape.constant(
        density_target<T>(sample.voxel_counts, static_cast<T>(hyper.beta), static_cast<T>(hyper.eps)));
    if (with_loss) {
        tr.loss_cls = tape.softmax_cross_entropy(tr.logits, sample.label);
        tr.loss_density = tape.kl_divergence(tr.p, tr.q);
        tr.loss_total = tape.add_scaled(tr.loss_cls, tr.loss_density, static_cast<T>(hyper.lambda_density));
    }
    return tr;
}

// Plain-tensor snapshot of one forward pass.
struct ForwardTrace {
    TensorF point_features;
    TensorF voxel_features;
    TensorF global_feature;
    TensorF logits;
    TensorF activation_norms;
    TensorF p, q;
    float loss_cls = 0.0f;
    float loss_density = 0.0f;
};

ForwardTrace forward(const LabeledSample& sample, const BackboneParams& params);

// Standalone alignment-net evaluation.
TensorF stn_forward(const TensorF& inputs, const StnParamsT<float>& stn, int size);

// (p, q) for a trace under explicit tau/beta/eps.
std::pair<TensorF, TensorF> density_distributions(const ForwardTrace& trace, const std::vector<int32_t>& counts,
                                                  float tau, float beta, float eps);

// Cross-entropy plus weighted KL, from a plain trace.
float stage1_loss(const ForwardTrace& trace, int label, const Hyper& hyper);

// --- Checkpoint -----------------------------------------------------------

struct BackboneCheckpoint {
    BackboneParams params;
    std::vector<std::string> class_names;
    FeatureMode feature_mode = FeatureMode::Gaussian11d;
    uint64_t seed = 0;
};

void save_backbone_checkpoint(const BackboneCheckpoint& ckpt, const std::filesystem::path& path);
BackboneCheckpoint load_backbone_checkpoint(const std::filesystem::path& path);

} // namespace xsplain
