#pragma once

#include <string>
#include <vector>

#include "xsplain/splat_io.hpp"

namespace xsplain::testutil {

// In-memory synthetic dataset; no files involved.
inline Dataset build_synthetic_dataset(const std::vector<std::string>& classes, int per_class,
                                       int primitives, int grid_size, uint64_t seed,
                                       const std::array<double, 3>& ratios = {0.8, 0.1, 0.1}) {
    Dataset ds;
    ds.grid_size = grid_size;
    ds.manifest.feature_mode = FeatureMode::Gaussian11d;
    ds.manifest.class_names = classes;
    std::vector<std::pair<std::string, int>> id_labels;
    for (size_t cls = 0; cls < classes.size(); ++cls) {
        for (int i = 0; i < per_class; ++i) {
            const uint64_t sample_seed = seed * 1000003ULL + cls * 7919ULL + static_cast<uint64_t>(i);
            LabeledSample sample = generate_synthetic(classes[cls], primitives, sample_seed, grid_size,
                                                      static_cast<int>(cls));
            char buf[64];
            std::snprintf(buf, sizeof(buf), "%s_%04d", classes[cls].c_str(), i);
            sample.id = buf;
            ds.manifest.samples.push_back({sample.id, sample.id + ".ply", static_cast<int>(cls)});
            id_labels.emplace_back(sample.id, static_cast<int>(cls));
            ds.index_by_id[sample.id] = ds.samples.size();
            ds.samples.push_back(std::move(sample));
        }
    }
    ds.manifest.split =
        split_dataset(id_labels, ratios, seed, classes, FeatureMode::Gaussian11d);
    ds.manifest.split.feature_mode = ds.manifest.feature_mode;
    return ds;
}

} // namespace xsplain::testutil
