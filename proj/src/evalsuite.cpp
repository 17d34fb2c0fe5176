#include "xsplain/evalsuite.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "xsplain/parallel.hpp"
#include "xsplain/rng.hpp"

namespace xsplain {

namespace {

struct CompensatedPrediction {
    int predicted = -1;
    int raw_predicted = -1;
    TensorF z_transformed;
};

CompensatedPrediction predict(const ForwardTrace& trace, const DisentangleState& state) {
    const int64_t C = state.U.rows();
    const int64_t K = state.W_prime.rows();
    CompensatedPrediction out;
    out.z_transformed = TensorF::zeros({C});
    kernels::gemv(state.U.data(), trace.global_feature.data(), out.z_transformed.data(), C, C, false);
    TensorF comp = TensorF::zeros({K});
    kernels::gemv(state.W_prime.data(), out.z_transformed.data(), comp.data(), K, C, false);
    out.predicted = static_cast<int>(std::max_element(comp.v.begin(), comp.v.end()) - comp.v.begin());
    out.raw_predicted = static_cast<int>(
        std::max_element(trace.logits.v.begin(), trace.logits.v.end()) - trace.logits.v.begin());
    return out;
}

} // namespace

LabeledSample remove_voxels(const LabeledSample& sample, std::span<const int32_t> voxels) {
    const std::set<int32_t> drop(voxels.begin(), voxels.end());
    LabeledSample out;
    out.id = sample.id;
    out.label = sample.label;
    out.grid_size = sample.grid_size;
    out.voxel_counts.assign(sample.voxel_counts.size(), 0);
    for (size_t i = 0; i < sample.primitives.size(); ++i) {
        const int32_t v = sample.voxel_index[i];
        if (drop.count(v)) continue;
        out.primitives.push_back(sample.primitives[i]);
        out.normalized_positions.push_back(sample.normalized_positions[i]);
        out.voxel_index.push_back(v);
        ++out.voxel_counts[static_cast<size_t>(v)];
    }
    return out;
}

std::vector<int32_t> deletion_voxels(const ForwardTrace& trace, const LabeledSample& sample,
                                     const DisentangleState& state, int k) {
    if (k < 0) throw ConfigError("deletion_voxels: k must be >= 0");
    const CompensatedPrediction pred = predict(trace, state);
    const TensorF scores = channel_importance(pred.z_transformed, state.W_prime, pred.predicted);
    const TensorF transformed = transform_voxels(trace.voxel_features, state.U);

    std::vector<int> order(static_cast<size_t>(scores.numel()));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores.at(a) > scores.at(b); });

    std::vector<int32_t> voxels;
    std::set<int32_t> seen;
    for (int c : order) {
        if (static_cast<int>(voxels.size()) >= k) break;
        if (!(scores.at(c) > 0.0f)) break; // only channels with positive evidence
        const int32_t v = localize(transformed, c, sample.voxel_counts);
        if (seen.insert(v).second) voxels.push_back(v);
    }
    return voxels;
}

namespace {

DeletionReport run_deletion(const BackboneParams& params, const DisentangleState& state,
                            const Dataset& dataset, std::span<const std::string> ids, int k, int threads,
                            bool random_voxels, uint64_t seed) {
    if (ids.empty()) throw UsageError("deletion test: empty split");
    struct SampleOutcome {
        uint8_t base_correct = 0, pert_correct = 0, emptied = 0, mismatch = 0;
    };
    std::vector<SampleOutcome> outcomes(ids.size());

    parallel_for(static_cast<int64_t>(ids.size()), threads, [&](int64_t i) {
        const LabeledSample& sample = dataset.by_id(ids[static_cast<size_t>(i)]);
        const ForwardTrace trace = forward(sample, params);
        const CompensatedPrediction base = predict(trace, state);
        SampleOutcome& oc = outcomes[static_cast<size_t>(i)];
        oc.base_correct = static_cast<uint8_t>(base.predicted == sample.label);
        oc.mismatch = static_cast<uint8_t>(base.predicted != base.raw_predicted);

        std::vector<int32_t> voxels;
        if (random_voxels) {
            std::vector<int32_t> occupied;
            for (size_t v = 0; v < sample.voxel_counts.size(); ++v)
                if (sample.voxel_counts[v] > 0) occupied.push_back(static_cast<int32_t>(v));
            Rng rng(seed ^ (0x9e3779b97f4a7c15ULL * static_cast<uint64_t>(i + 1)));
            rng.shuffle(occupied);
            occupied.resize(std::min<size_t>(occupied.size(), static_cast<size_t>(k)));
            voxels = std::move(occupied);
        } else {
            voxels = deletion_voxels(trace, sample, state, k);
        }

        if (voxels.empty()) {
            oc.pert_correct = oc.base_correct;
            return;
        }
        const LabeledSample reduced = remove_voxels(sample, voxels);
        if (reduced.size() == 0) {
            oc.emptied = 1;
            oc.pert_correct = 0;
            return;
        }
        const ForwardTrace trace2 = forward(reduced, params);
        const CompensatedPrediction pert = predict(trace2, state);
        oc.pert_correct = static_cast<uint8_t>(pert.predicted == reduced.label);
        oc.mismatch |= static_cast<uint8_t>(pert.predicted != pert.raw_predicted);
    });

    DeletionReport report;
    report.k = k;
    report.samples = static_cast<int64_t>(ids.size());
    int64_t base_hits = 0, pert_hits = 0;
    for (const SampleOutcome& oc : outcomes) {
        base_hits += oc.base_correct;
        pert_hits += oc.pert_correct;
        report.emptied_samples += oc.emptied;
        report.cross_check_mismatches += oc.mismatch;
    }
    report.baseline_accuracy = static_cast<double>(base_hits) / static_cast<double>(ids.size());
    report.perturbed_accuracy = static_cast<double>(pert_hits) / static_cast<double>(ids.size());
    if (report.baseline_accuracy == 0.0)
        throw DegenerateMetricError("deletion test: baseline accuracy is zero");
    report.degradation_percent =
        (report.baseline_accuracy - report.perturbed_accuracy) / report.baseline_accuracy * 100.0;
    return report;
}

} // namespace

DeletionReport deletion_test(const BackboneParams& params, const DisentangleState& state,
                             const Dataset& dataset, std::span<const std::string> ids, int k, int threads) {
    if (k < 1) throw ConfigError("deletion_test: k must be >= 1");
    return run_deletion(params, state, dataset, ids, k, threads, false, 0);
}

DeletionReport random_deletion_control(const BackboneParams& params, const DisentangleState& state,
                                       const Dataset& dataset, std::span<const std::string> ids, int k,
                                       uint64_t seed, int threads) {
    if (k < 0) throw ConfigError("random_deletion_control: k must be >= 0");
    return run_deletion(params, state, dataset, ids, k, threads, true, seed);
}

double purity_gain(const DisentangleState& before, const DisentangleState& after,
                   const VoxelFeatureCache& cache, float eps) {
    const double mp_before = registry_mean_purity(cache, before.U, before.registry, eps);
    const double mp_after = registry_mean_purity(cache, after.U, after.registry, eps);
    if (mp_before == 0.0) throw DegenerateMetricError("purity_gain: zero purity before stage 2");
    return 100.0 * (mp_after - mp_before) / mp_before;
}

double purity_gain_from_history(const DisentangleState& state) {
    if (state.purity_history.size() < 2)
        throw UsageError("purity_gain_from_history: state has no refresh history");
    const double first = state.purity_history.front();
    if (first == 0.0) throw DegenerateMetricError("purity_gain: zero purity before stage 2");
    return 100.0 * (state.purity_history.back() - first) / first;
}

double mean_activated_density(const DisentangleState& state, const Dataset& dataset) {
    double total = 0.0;
    int64_t n = 0;
    for (const auto& channel : state.registry) {
        for (const PrototypeEntry& e : channel) {
            const LabeledSample& sample = dataset.by_id(e.sample_id);
            total += static_cast<double>(sample.voxel_counts.at(static_cast<size_t>(e.voxel)));
            ++n;
        }
    }
    if (n == 0) throw UsageError("mean_activated_density: empty registry");
    return total / static_cast<double>(n);
}

std::vector<AblationRow> ablation_run(const AblationGrids& grids,
                                      const std::function<Dataset(int)>& dataset_for_grid,
                                      const StageOneConfig& base_stage1, const StageTwoConfig& base_stage2) {
    struct Job {
        std::string parameter;
        double value;
    };
    std::vector<Job> jobs;
    for (double v : grids.lambda) jobs.push_back({"lambda", v});
    for (int v : grids.grid_size) jobs.push_back({"grid_size", static_cast<double>(v)});
    for (int v : grids.channels) jobs.push_back({"channels", static_cast<double>(v)});

    std::vector<AblationRow> rows;
    for (const Job& job : jobs) {
        AblationRow row;
        row.parameter = job.parameter;
        row.value = job.value;
        try {
            StageOneConfig cfg1 = base_stage1;
            StageTwoConfig cfg2 = base_stage2;
            if (job.parameter == "lambda")
                cfg1.hyper.lambda_density = static_cast<float>(job.value);
            else if (job.parameter == "grid_size")
                cfg1.hyper.grid_size = static_cast<int>(job.value);
            else
                cfg1.hyper.channels = static_cast<int>(job.value);

            const Dataset dataset = dataset_for_grid(cfg1.hyper.grid_size);
            auto [params, report] = train_stage1(dataset, cfg1);
            row.accuracy = report.test_accuracy;
            const FrozenBackbone frozen = freeze(std::move(params));
            const DisentangleState state = train_stage2(frozen, dataset, cfg2);
            row.purity_gain_pct = purity_gain_from_history(state);
            row.mean_density = mean_activated_density(state, dataset);
            row.ok = true;
        } catch (const std::exception& e) {
            row.ok = false;
            row.error = e.what();
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

std::string format_ablation_table(const std::vector<AblationRow>& rows) {
    std::ostringstream os;
    char line[160];
    std::snprintf(line, sizeof(line), "%-10s %8s %8s %10s %8s\n", "Param.", "Val.", "Acc.", "Pur.Gain", "Dens.");
    os << line;
    for (const AblationRow& r : rows) {
        if (r.ok) {
            std::snprintf(line, sizeof(line), "%-10s %8.2f %8.3f %+9.1f%% %8.1f\n", r.parameter.c_str(),
                          r.value, r.accuracy, r.purity_gain_pct, r.mean_density);
            os << line;
        } else {
            std::snprintf(line, sizeof(line), "%-10s %8.2f   failed: %s\n", r.parameter.c_str(), r.value,
                          r.error.c_str());
            os << line;
        }
    }
    return os.str();
}

std::string format_deletion_table(const std::vector<DeletionReport>& reports) {
    std::ostringstream os;
    char line[160];
    std::snprintf(line, sizeof(line), "%6s %10s %10s %14s %8s\n", "Top k", "Base acc", "Pert acc",
                  "Degradation", "Emptied");
    os << line;
    for (const DeletionReport& r : reports) {
        std::snprintf(line, sizeof(line), "%6d %10.4f %10.4f %13.2f%% %8lld\n", r.k, r.baseline_accuracy,
                      r.perturbed_accuracy, r.degradation_percent, static_cast<long long>(r.emptied_samples));
        os << line;
    }
    return os.str();
}

} // namespace xsplain
