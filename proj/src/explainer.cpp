#include "xsplain/explainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

namespace xsplain {

TensorF channel_importance(const TensorF& z_transformed, const TensorF& w_prime, int predicted_class) {
    if (w_prime.rank() != 2 || z_transformed.rank() != 1 || w_prime.cols() != z_transformed.dim(0))
        throw DimensionError("channel_importance: W' " + w_prime.shape_str() + " vs z " +
                             z_transformed.shape_str());
    if (predicted_class < 0 || predicted_class >= w_prime.rows())
        throw IndexError("channel_importance: class " + std::to_string(predicted_class) + " out of range");
    TensorF scores = TensorF::zeros({z_transformed.dim(0)});
    for (int64_t c = 0; c < scores.dim(0); ++c)
        scores.at(c) = w_prime.at(predicted_class, c) * std::max(z_transformed.at(c), 0.0f);
    return scores;
}

std::vector<int> top_channels(const TensorF& scores, int m) {
    if (m < 1 || m > scores.numel())
        throw ConfigError("top_channels: m=" + std::to_string(m) + " outside [1, " +
                          std::to_string(scores.numel()) + "]");
    std::vector<int> order(static_cast<size_t>(scores.numel()));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores.at(a) > scores.at(b); });
    order.resize(static_cast<size_t>(m));
    return order;
}

int32_t localize(const TensorF& transformed, int channel, const std::vector<int32_t>& counts) {
    // Same rule as the prototype side: argmax restricted to occupied voxels.
    return purity(transformed, channel, counts, 1e-6f).voxel;
}

std::vector<int32_t> extract_subset(const LabeledSample& sample, int32_t voxel) {
    const int64_t n_voxels = static_cast<int64_t>(sample.voxel_counts.size());
    if (voxel < 0 || voxel >= n_voxels)
        throw IndexError("extract_subset: voxel " + std::to_string(voxel) + " outside [0, " +
                         std::to_string(n_voxels) + ")");
    if (sample.voxel_counts[static_cast<size_t>(voxel)] == 0)
        throw EmptySubsetError("extract_subset: voxel " + std::to_string(voxel) + " of sample '" + sample.id +
                               "' is empty");
    std::vector<int32_t> ids;
    for (size_t i = 0; i < sample.voxel_index.size(); ++i)
        if (sample.voxel_index[i] == voxel) ids.push_back(static_cast<int32_t>(i));
    return ids;
}

std::vector<PrototypeFragment> retrieve_prototypes(const Registry& registry, int channel,
                                                   const Dataset& dataset) {
    if (channel < 0 || channel >= static_cast<int>(registry.size()))
        throw RegistryError("retrieve_prototypes: channel " + std::to_string(channel) + " not in registry");
    std::vector<PrototypeFragment> out;
    for (const PrototypeEntry& e : registry[static_cast<size_t>(channel)]) {
        PrototypeFragment frag;
        frag.sample_id = e.sample_id;
        frag.voxel = e.voxel;
        frag.activation = e.activation;
        frag.primitive_ids = extract_subset(dataset.by_id(e.sample_id), e.voxel);
        out.push_back(std::move(frag));
    }
    return out;
}

Explanation explain(const LabeledSample& sample, const BackboneParams& params, const DisentangleState& state,
                    const Dataset& dataset, int top_m) {
    const ForwardTrace trace = forward(sample, params);
    const TensorF transformed = transform_voxels(trace.voxel_features, state.U);

    const int64_t C = state.U.rows();
    TensorF z_t = TensorF::zeros({C});
    kernels::gemv(state.U.data(), trace.global_feature.data(), z_t.data(), C, C, false);
    const int64_t K = state.W_prime.rows();
    TensorF logits = TensorF::zeros({K});
    kernels::gemv(state.W_prime.data(), z_t.data(), logits.data(), K, C, false);

    Explanation expl;
    expl.sample_id = sample.id;
    expl.logits = logits;
    expl.predicted_class = static_cast<int>(
        std::max_element(logits.v.begin(), logits.v.end()) - logits.v.begin());

    const TensorF scores = channel_importance(z_t, state.W_prime, expl.predicted_class);
    for (int c : top_channels(scores, top_m)) {
        // Channels without positive evidence for the prediction are dropped.
        if (!(scores.at(c) > 0.0f)) continue;
        ExplanationChannel ch;
        ch.channel = c;
        ch.importance = scores.at(c);
        ch.voxel = localize(transformed, c, sample.voxel_counts);
        ch.primitive_ids = extract_subset(sample, ch.voxel);
        ch.prototypes = retrieve_prototypes(state.registry, c, dataset);
        expl.channels.push_back(std::move(ch));
    }
    return expl;
}

namespace {

std::vector<GaussianPrimitive> gather(const LabeledSample& sample, const std::vector<int32_t>& ids) {
    std::vector<GaussianPrimitive> out;
    out.reserve(ids.size());
    for (int32_t i : ids) out.push_back(sample.primitives[static_cast<size_t>(i)]);
    return out;
}

std::string channel_tag(int channel) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "ch%03d", channel);
    return buf;
}

} // namespace

std::vector<std::string> export_explanation(const Explanation& explanation, const LabeledSample& sample,
                                            const Dataset& dataset, const std::filesystem::path& out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create '" + out_dir.string() + "': " + ec.message());
    const FeatureMode mode = dataset.manifest.feature_mode;

    std::vector<std::string> written;
    nlohmann::json j;
    j["version"] = 1;
    j["sample"] = explanation.sample_id;
    j["predicted_class"] = explanation.predicted_class;
    j["predicted_class_name"] = dataset.manifest.class_names.at(
        static_cast<size_t>(explanation.predicted_class));
    j["logits"] = explanation.logits.v;
    j["channels"] = nlohmann::json::array();

    for (const ExplanationChannel& ch : explanation.channels) {
        const std::string query_name = "query_" + channel_tag(ch.channel) + ".ply";
        write_ply(gather(sample, ch.primitive_ids), out_dir / query_name, mode);
        written.push_back(query_name);

        nlohmann::json protos = nlohmann::json::array();
        for (size_t r = 0; r < ch.prototypes.size(); ++r) {
            const PrototypeFragment& frag = ch.prototypes[r];
            char buf[64];
            std::snprintf(buf, sizeof(buf), "proto_%s_r%02zu.ply", channel_tag(ch.channel).c_str(), r);
            const std::string proto_name = buf;
            write_ply(gather(dataset.by_id(frag.sample_id), frag.primitive_ids), out_dir / proto_name, mode);
            written.push_back(proto_name);
            protos.push_back({{"sample", frag.sample_id},
                              {"voxel", frag.voxel},
                              {"activation", frag.activation},
                              {"ply", proto_name}});
        }
        j["channels"].push_back({{"channel", ch.channel},
                                 {"importance", ch.importance},
                                 {"voxel", ch.voxel},
                                 {"query_ply", query_name},
                                 {"primitive_count", ch.primitive_ids.size()},
                                 {"prototypes", protos}});
    }

    const std::string manifest_name = "explanation.json";
    std::ofstream out(out_dir / manifest_name);
    if (!out) throw IoError("cannot write '" + (out_dir / manifest_name).string() + "'");
    out << j.dump(2) << "\n";
    written.push_back(manifest_name);
    return written;
}

} // namespace xsplain
