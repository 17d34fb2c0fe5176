#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "xsplain/disentangler.hpp"
#include "xsplain/explainer.hpp"

namespace xsplain {

struct DeletionReport {
    int k = 0;
    double baseline_accuracy = 0.0;
    double perturbed_accuracy = 0.0;
    double degradation_percent = 0.0; // (base - pert) / base * 100
    int64_t emptied_samples = 0;      // deletions that removed everything
    int64_t cross_check_mismatches = 0; // argmax(W z) vs argmax(W' U z)
    int64_t samples = 0;
};

// Voxels the top-k deletion would remove, ordered by channel importance;
// top-(k-1) is always a prefix.
std::vector<int32_t> deletion_voxels(const ForwardTrace& trace, const LabeledSample& sample,
                                     const DisentangleState& state, int k);

// Removes all primitives in the located voxels of the top-k channels for
// the prediction, keeps the survivors' stored normalization and voxel
// metadata, and re-scores accuracy. Samples emptied by the deletion count
// as misclassified.
DeletionReport deletion_test(const BackboneParams& params, const DisentangleState& state,
                             const Dataset& dataset, std::span<const std::string> ids, int k,
                             int threads = 1);

// Control condition: k voxels drawn uniformly from the occupied ones.
DeletionReport random_deletion_control(const BackboneParams& params, const DisentangleState& state,
                                       const Dataset& dataset, std::span<const std::string> ids, int k,
                                       uint64_t seed, int threads = 1);

// Survivors of a voxel deletion; stored per-primitive metadata is kept and
// only the counts are re-tallied.
LabeledSample remove_voxels(const LabeledSample& sample, std::span<const int32_t> voxels);

// 100 * (mean purity after - mean purity before) / mean purity before, each
// mean taken over the respective state's registry under its own U.
double purity_gain(const DisentangleState& before, const DisentangleState& after,
                   const VoxelFeatureCache& cache, float eps);

// Same number straight from a trained state's refresh history.
double purity_gain_from_history(const DisentangleState& state);

// Mean point count of the registry's located voxels.
double mean_activated_density(const DisentangleState& state, const Dataset& dataset);

struct AblationRow {
    std::string parameter;
    double value = 0.0;
    double accuracy = 0.0;
    double purity_gain_pct = 0.0;
    double mean_density = 0.0;
    bool ok = false;
    std::string error;
};

struct AblationGrids {
    std::vector<double> lambda;
    std::vector<int> grid_size;
    std::vector<int> channels;
};

// One full pipeline (stage 1 + stage 2 + metrics) per grid value, one
// parameter varied at a time. Rows that fail carry the error and the run
// continues. dataset_for_grid supplies a dataset voxelized for a given G.
std::vector<AblationRow> ablation_run(const AblationGrids& grids,
                                      const std::function<Dataset(int)>& dataset_for_grid,
                                      const StageOneConfig& base_stage1, const StageTwoConfig& base_stage2);

std::string format_ablation_table(const std::vector<AblationRow>& rows);
std::string format_deletion_table(const std::vector<DeletionReport>& reports);

} // namespace xsplain
