#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "xsplain/disentangler.hpp"

namespace xsplain {

struct PrototypeFragment {
    std::string sample_id;
    int32_t voxel = -1;
    float activation = 0.0f;
    std::vector<int32_t> primitive_ids; // indices into the prototype sample
};

struct ExplanationChannel {
    int channel = -1;
    float importance = 0.0f;
    int32_t voxel = -1;                 // v*_c in the query sample
    std::vector<int32_t> primitive_ids; // E_c, indices into the query sample
    std::vector<PrototypeFragment> prototypes;
};

struct Explanation {
    std::string sample_id;
    int predicted_class = -1;
    TensorF logits; // compensated; identical to the raw head by construction
    std::vector<ExplanationChannel> channels; // importance descending
};

// importance_c = w'_{y,c} * relu(z~_c).
TensorF channel_importance(const TensorF& z_transformed, const TensorF& w_prime, int predicted_class);

// Indices of the m highest scores, ties to the lower channel id.
std::vector<int> top_channels(const TensorF& scores, int m);

// Most-activated occupied voxel of one channel, ties to the lowest voxel.
int32_t localize(const TensorF& transformed, int channel, const std::vector<int32_t>& counts);

// E = { i : v(i) = voxel }; explanations never point at empty cells.
std::vector<int32_t> extract_subset(const LabeledSample& sample, int32_t voxel);

// Loads each registry prototype of the channel and cuts out its stored
// voxel fragment.
std::vector<PrototypeFragment> retrieve_prototypes(const Registry& registry, int channel,
                                                   const Dataset& dataset);

// Full explanation for one sample: top-m positive-importance channels with
// located voxels, query subsets and prototype fragments.
Explanation explain(const LabeledSample& sample, const BackboneParams& params, const DisentangleState& state,
                    const Dataset& dataset, int top_m);

// One PLY per query subset and per prototype fragment plus a JSON manifest.
// Returns the written file names (manifest last).
std::vector<std::string> export_explanation(const Explanation& explanation, const LabeledSample& sample,
                                            const Dataset& dataset, const std::filesystem::path& out_dir);

} // namespace xsplain
