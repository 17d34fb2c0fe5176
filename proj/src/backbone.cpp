#include "xsplain/backbone.hpp"

#include <cstring>
#include <fstream>

#include "xsplain/rng.hpp"

namespace xsplain {

namespace {

void fill_uniform(TensorF& t, Rng& rng, float bound) {
    for (auto& e : t.v) e = static_cast<float>(rng.uniform(-bound, bound));
}

StnParamsT<float> init_stn(int input_width, int size, Rng& rng) {
    using namespace backbone_dims;
    StnParamsT<float> s;
    s.w1 = TensorF::zeros({input_width, kStnHidden1});
    s.b1 = TensorF::zeros({kStnHidden1});
    s.w2 = TensorF::zeros({kStnHidden1, kStnHidden2});
    s.b2 = TensorF::zeros({kStnHidden2});
    s.wf1 = TensorF::zeros({kStnHidden2, kStnDense});
    s.bf1 = TensorF::zeros({kStnDense});
    s.wf2 = TensorF::zeros({kStnDense, size * size});
    s.bf2 = TensorF::zeros({size * size});
    fill_uniform(s.w1, rng, std::sqrt(6.0f / static_cast<float>(input_width)));
    fill_uniform(s.w2, rng, std::sqrt(6.0f / static_cast<float>(kStnHidden1)));
    fill_uniform(s.wf1, rng, std::sqrt(6.0f / static_cast<float>(kStnHidden2)));
    // Zero final weights with an identity bias make the fresh net emit I.
    for (int i = 0; i < size; ++i) s.bf2.at(i * size + i) = 1.0f;
    return s;
}

} // namespace

BackboneParams init_backbone(const Hyper& hyper, uint64_t seed) {
    hyper.validate();
    using namespace backbone_dims;
    Rng rng(seed);
    BackboneParams p;
    p.hyper = hyper;
    p.stn3 = init_stn(3, 3, rng);
    p.stn64 = init_stn(kPointHidden, kPointHidden, rng);

    p.mlp1_w1 = TensorF::zeros({kInputWidth, kPointHidden});
    p.mlp1_b1 = TensorF::zeros({kPointHidden});
    p.mlp1_w2 = TensorF::zeros({kPointHidden, kPointHidden});
    p.mlp1_b2 = TensorF::zeros({kPointHidden});
    p.mlp2_w1 = TensorF::zeros({kPointHidden, kMlp2Hidden});
    p.mlp2_b1 = TensorF::zeros({kMlp2Hidden});
    p.mlp2_w2 = TensorF::zeros({kMlp2Hidden, hyper.channels});
    p.mlp2_b2 = TensorF::zeros({hyper.channels});
    p.w_cls = TensorF::zeros({hyper.num_classes, hyper.channels});

    fill_uniform(p.mlp1_w1, rng, std::sqrt(6.0f / static_cast<float>(kInputWidth)));
    fill_uniform(p.mlp1_w2, rng, std::sqrt(6.0f / static_cast<float>(kPointHidden)));
    fill_uniform(p.mlp2_w1, rng, std::sqrt(6.0f / static_cast<float>(kPointHidden)));
    fill_uniform(p.mlp2_w2, rng, std::sqrt(6.0f / static_cast<float>(kMlp2Hidden)));
    fill_uniform(p.w_cls, rng, std::sqrt(6.0f / static_cast<float>(hyper.channels + hyper.num_classes)));
    return p;
}

ForwardTrace forward(const LabeledSample& sample, const BackboneParams& params) {
    Tape tape;
    BackboneVars vars = mount_backbone(tape, params, false);
    const bool with_loss = sample.label >= 0 && sample.label < params.hyper.num_classes;
    TraceVars tv = backbone_forward_tape(tape, vars, sample, params.hyper, with_loss);
    ForwardTrace tr;
    tr.point_features = tape.value(tv.point_features);
    tr.voxel_features = tape.value(tv.voxel_features);
    tr.global_feature = tape.value(tv.global_feature);
    tr.logits = tape.value(tv.logits);
    tr.activation_norms = tape.value(tv.activation_norms);
    tr.p = tape.value(tv.p);
    tr.q = tape.value(tv.q);
    if (with_loss) {
        tr.loss_cls = tape.value(tv.loss_cls).scalar_value();
        tr.loss_density = tape.value(tv.loss_density).scalar_value();
    }
    return tr;
}

TensorF stn_forward(const TensorF& inputs, const StnParamsT<float>& stn, int size) {
    Tape tape;
    StnVars sv;
    sv.w1 = tape.leaf(stn.w1, false);
    sv.b1 = tape.leaf(stn.b1, false);
    sv.w2 = tape.leaf(stn.w2, false);
    sv.b2 = tape.leaf(stn.b2, false);
    sv.wf1 = tape.leaf(stn.wf1, false);
    sv.bf1 = tape.leaf(stn.bf1, false);
    sv.wf2 = tape.leaf(stn.wf2, false);
    sv.bf2 = tape.leaf(stn.bf2, false);
    Var points = tape.constant(inputs);
    return tape.value(stn_tape(tape, sv, points, size));
}

std::pair<TensorF, TensorF> density_distributions(const ForwardTrace& trace, const std::vector<int32_t>& counts,
                                                  float tau, float beta, float eps) {
    if (!(tau > 0.0f)) throw ConfigError("density_distributions: tau must be > 0");
    if (!(beta > 0.0f)) throw ConfigError("density_distributions: beta must be > 0");
    if (!(eps > 0.0f)) throw ConfigError("density_distributions: eps must be > 0");
    Tape tape;
    Var h = tape.constant(trace.voxel_features);
    Var p = tape.temp_softmax(tape.col_l2_norms(h), tau);
    return {tape.value(p), density_target<float>(counts, beta, eps)};
}

float stage1_loss(const ForwardTrace& trace, int label, const Hyper& hyper) {
    Tape tape;
    Var logits = tape.constant(trace.logits);
    Var ce = tape.softmax_cross_entropy(logits, label);
    Var kl = tape.kl_divergence(tape.constant(trace.p), tape.constant(trace.q));
    return tape.value(tape.add_scaled(ce, kl, hyper.lambda_density)).scalar_value();
}

// --- Checkpoint -----------------------------------------------------------

namespace {

constexpr char kBackboneMagic[8] = {'X', 'S', 'P', 'L', 'N', 'C', 'K', '1'};

template <class T>
void write_pod(std::ostream& out, const T& value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <class T>
T read_pod(std::istream& in, const std::filesystem::path& path) {
    T value;
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!in) throw FormatError(path.string() + ": truncated checkpoint");
    return value;
}

void write_string(std::ostream& out, const std::string& s) {
    write_pod(out, static_cast<uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& in, const std::filesystem::path& path) {
    const auto len = read_pod<uint32_t>(in, path);
    std::string s(len, '\0');
    in.read(s.data(), len);
    if (!in) throw FormatError(path.string() + ": truncated checkpoint");
    return s;
}

void write_tensor(std::ostream& out, const std::string& name, const TensorF& t) {
    write_string(out, name);
    write_pod(out, static_cast<uint8_t>(0)); // dtype f32
    write_pod(out, static_cast<uint8_t>(t.shape.size()));
    for (int64_t d : t.shape) write_pod(out, d);
    out.write(reinterpret_cast<const char*>(t.v.data()),
              static_cast<std::streamsize>(t.v.size() * sizeof(float)));
}

TensorF read_tensor(std::istream& in, const std::filesystem::path& path, const std::string& expect_name) {
    const std::string name = read_string(in, path);
    if (name != expect_name)
        throw FormatError(path.string() + ": expected tensor '" + expect_name + "', found '" + name + "'");
    if (read_pod<uint8_t>(in, path) != 0) throw FormatError(path.string() + ": unsupported tensor dtype");
    const auto rank = read_pod<uint8_t>(in, path);
    std::vector<int64_t> shape(rank);
    for (auto& d : shape) d = read_pod<int64_t>(in, path);
    TensorF t = TensorF::zeros(shape);
    in.read(reinterpret_cast<char*>(t.v.data()), static_cast<std::streamsize>(t.v.size() * sizeof(float)));
    if (!in) throw FormatError(path.string() + ": truncated tensor data");
    return t;
}

} // namespace

void save_backbone_checkpoint(const BackboneCheckpoint& ckpt, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out.write(kBackboneMagic, sizeof(kBackboneMagic));
    write_pod(out, static_cast<uint32_t>(1));
    write_pod(out, ckpt.seed);
    const Hyper& h = ckpt.params.hyper;
    write_pod(out, static_cast<int32_t>(h.grid_size));
    write_pod(out, static_cast<int32_t>(h.channels));
    write_pod(out, static_cast<int32_t>(h.num_classes));
    write_pod(out, h.tau);
    write_pod(out, h.beta);
    write_pod(out, h.eps);
    write_pod(out, h.lambda_density);
    write_pod(out, static_cast<uint8_t>(ckpt.feature_mode == FeatureMode::Gaussian11d ? 0 : 1));
    write_pod(out, static_cast<uint32_t>(ckpt.class_names.size()));
    for (const auto& name : ckpt.class_names) write_string(out, name);
    uint32_t count = 0;
    ckpt.params.for_each_tensor([&](const char*, const TensorF&) { ++count; });
    write_pod(out, count);
    ckpt.params.for_each_tensor([&](const char* name, const TensorF& t) { write_tensor(out, name, t); });
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

BackboneCheckpoint load_backbone_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kBackboneMagic, sizeof(magic)) != 0)
        throw FormatError(path.string() + ": not a backbone checkpoint");
    if (read_pod<uint32_t>(in, path) != 1)
        throw FormatError(path.string() + ": unsupported checkpoint version");

    BackboneCheckpoint ckpt;
    ckpt.seed = read_pod<uint64_t>(in, path);
    Hyper h;
    h.grid_size = read_pod<int32_t>(in, path);
    h.channels = read_pod<int32_t>(in, path);
    h.num_classes = read_pod<int32_t>(in, path);
    h.tau = read_pod<float>(in, path);
    h.beta = read_pod<float>(in, path);
    h.eps = read_pod<float>(in, path);
    h.lambda_density = read_pod<float>(in, path);
    ckpt.feature_mode = read_pod<uint8_t>(in, path) == 0 ? FeatureMode::Gaussian11d : FeatureMode::Pointcloud6d;
    const auto n_classes = read_pod<uint32_t>(in, path);
    for (uint32_t i = 0; i < n_classes; ++i) ckpt.class_names.push_back(read_string(in, path));

    ckpt.params = init_backbone(h, ckpt.seed);
    uint32_t count = 0;
    ckpt.params.for_each_tensor([&](const char*, const TensorF&) { ++count; });
    if (read_pod<uint32_t>(in, path) != count)
        throw FormatError(path.string() + ": tensor count mismatch");
    ckpt.params.for_each_tensor([&](const char* name, TensorF& t) {
        TensorF loaded = read_tensor(in, path, name);
        if (loaded.shape != t.shape)
            throw FormatError(path.string() + ": tensor '" + std::string(name) + "' has shape " +
                              loaded.shape_str() + ", expected " + t.shape_str());
        t = std::move(loaded);
    });
    return ckpt;
}

} // namespace xsplain
