#pragma once

#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "xsplain/backbone.hpp"
#include "xsplain/matexp.hpp"
#include "xsplain/trainer.hpp"

namespace xsplain {

struct CurriculumConfig {
    int k_init = 10;
    int k_final = 3;
    int epochs = 50;      // T
    int update_period = 5; // registry refresh cadence, in epochs
};

struct StageTwoConfig {
    CurriculumConfig curriculum;
    float lr = 1e-4f;
    int batch_pairs = 64;
    uint64_t seed = 2;
    int threads = 1;
    float eps = 1e-6f;

    void validate() const {
        if (curriculum.k_init < curriculum.k_final || curriculum.k_final < 1)
            throw ConfigError("curriculum requires k_init >= k_final >= 1");
        if (curriculum.epochs < 0) throw ConfigError("stage-2 epochs must be >= 0");
        if (curriculum.update_period < 1) throw ConfigError("update period must be >= 1");
        if (!(lr > 0.0f)) throw ConfigError("stage-2 lr must be > 0");
        if (batch_pairs < 1) throw ConfigError("batch_pairs must be >= 1");
        if (!(eps > 0.0f)) throw ConfigError("eps must be > 0");
    }
};

struct PrototypeEntry {
    std::string sample_id;
    float activation = 0.0f;
    int32_t voxel = -1;
};

// registry[c] holds the current top-k prototypes of channel c, ordered by
// activation descending with sample id as the tiebreak.
using Registry = std::vector<std::vector<PrototypeEntry>>;

struct PurityRecord {
    std::string sample_id;
    int channel = -1;
    int32_t voxel = -1; // v*, restricted to occupied voxels
    float purity = 0.0f;
};

struct DisentangleState {
    TensorF P;       // unconstrained C x C
    TensorF U;       // exp(P - P^T)
    TensorF W_prime; // W_cls * U^T
    Registry registry;
    CurriculumConfig curriculum;
    std::vector<float> purity_history; // mean registry purity at each refresh
};

// --- Core maps --------------------------------------------------------------

// H~ = U * H, column per voxel.
TensorF transform_voxels(const TensorF& voxel_features, const TensorF& U);

// W' = W_cls * U^T; with orthogonal U, W' (U z) = W_cls z for every z.
TensorF compensate_classifier(const TensorF& w_cls, const TensorF& U);

// a_c = max over occupied voxels of h~_{c,v}.
TensorF channel_activation(const TensorF& transformed, const std::vector<int32_t>& counts);

// v* = argmax over occupied voxels of channel c (ties -> lowest voxel);
// purity = h~_{c,v*} / (||h~_{.,v*}||_2 + eps).
PurityRecord purity(const TensorF& transformed, int channel, const std::vector<int32_t>& counts, float eps);

// k_t = floor(k_init - (t/T)(k_init - k_final)).
int curriculum_k(int t, int total_epochs, int k_init, int k_final);

// --- Cached voxel features --------------------------------------------------

// Frozen-backbone voxel features of one sample, restricted to occupied
// voxels (columns follow `occupied`, which is ascending).
struct CachedVoxelFeatures {
    std::string id;
    int label = -1;
    std::vector<int32_t> occupied;
    TensorF h_occ; // C x |occupied|
    std::vector<int32_t> counts;
};

struct VoxelFeatureCache {
    std::vector<CachedVoxelFeatures> items;
    std::unordered_map<std::string, size_t> by_id;

    const CachedVoxelFeatures& at(const std::string& id) const {
        auto it = by_id.find(id);
        if (it == by_id.end()) throw RegistryError("sample id '" + id + "' not in voxel cache");
        return items[it->second];
    }
};

VoxelFeatureCache build_voxel_cache(const FrozenBackbone& backbone, const Dataset& dataset,
                                    std::span<const std::string> ids, int threads = 1);

// --- Prototype discovery -----------------------------------------------------

Registry discover_prototypes(const VoxelFeatureCache& cache, const TensorF& U, int k, int threads = 1);

// Convenience wrapper that runs the frozen backbone over the train split.
Registry discover_prototypes(const Dataset& dataset, const FrozenBackbone& backbone, const TensorF& U, int k,
                             int threads = 1);

PurityRecord purity_from_cache(const CachedVoxelFeatures& sample, const TensorF& U, int channel, float eps);

// Mean purity over all registry entries under the given U.
float registry_mean_purity(const VoxelFeatureCache& cache, const TensorF& U, const Registry& registry,
                           float eps);

// --- Purity loss -------------------------------------------------------------

// -mean(purity) over (sample, channel) pairs, differentiable w.r.t. P
// through U = exp(P - P^T). The argmax voxel is selected at the current
// values and treated as constant. Pairs reference cache entries.
template <class T>
Var purity_loss_tape(TapeT<T>& tape, Var U, std::span<const std::pair<const CachedVoxelFeatures*, int>> pairs,
                     T eps) {
    if (pairs.empty()) throw UsageError("purity_loss: empty batch");
    std::unordered_map<const CachedVoxelFeatures*, Var> mounted;
    std::vector<Var> purities;
    purities.reserve(pairs.size());
    for (const auto& [sample, channel] : pairs) {
        auto it = mounted.find(sample);
        if (it == mounted.end())
            it = mounted.emplace(sample, tape.constant(sample->h_occ.template cast<T>())).first;
        const Var h_occ = it->second;
        if (sample->occupied.empty())
            throw DataError("purity_loss: sample '" + sample->id + "' has no occupied voxels");
        if (channel < 0 || channel >= tape.value(U).rows())
            throw IndexError("purity_loss: channel " + std::to_string(channel) + " out of range");

        const Var scores = tape.vecmat(tape.row(U, channel), h_occ);
        const TensorT<T>& sv = tape.value(scores);
        int64_t best = 0;
        for (int64_t j = 1; j < sv.numel(); ++j)
            if (sv.at(j) > sv.at(best)) best = j;
        const Var numerator = tape.get(scores, best);
        const Var column = tape.matvec(U, tape.col(h_occ, best));
        const Var denominator = tape.add_const(tape.l2_norm(column), eps);
        purities.push_back(tape.div(numerator, denominator));
    }
    return tape.scale(tape.mean_scalars(purities), T(-1));
}

// Plain evaluation of the same batch loss against a state's U. Every pair
// must be a member of the state's registry for its channel.
float purity_loss(std::span<const std::pair<std::string, int>> batch, const DisentangleState& state,
                  const VoxelFeatureCache& cache, float eps);

// --- Stage 2 ------------------------------------------------------------------

// Optimizes P from zero (U = I) against the purity objective over a
// curriculum-refreshed registry, then compensates the classifier. The
// backbone hash is verified untouched at the end.
DisentangleState train_stage2(const FrozenBackbone& backbone, const Dataset& dataset,
                              const StageTwoConfig& config);

struct PreservationReport {
    double agree_fraction = 0.0;
    double max_abs_logit_dev = 0.0;
    int64_t samples = 0;
};

// argmax(W z) vs argmax(W' U z) plus the worst logit deviation.
PreservationReport check_decision_preservation(const BackboneParams& params, const DisentangleState& state,
                                               const Dataset& dataset, std::span<const std::string> ids,
                                               int threads = 1);

void save_disentangle_state(const DisentangleState& state, const std::filesystem::path& path);
DisentangleState load_disentangle_state(const std::filesystem::path& path);
void export_registry_json(const DisentangleState& state, const std::filesystem::path& path);

} // namespace xsplain
