#include "xsplain/disentangler.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include <nlohmann/json.hpp>

#include "xsplain/parallel.hpp"
#include "xsplain/rng.hpp"

namespace xsplain {

TensorF transform_voxels(const TensorF& voxel_features, const TensorF& U) {
    if (U.rank() != 2 || U.rows() != U.cols())
        throw DimensionError("transform_voxels: U must be square, got " + U.shape_str());
    if (voxel_features.rank() != 2 || voxel_features.rows() != U.cols())
        throw DimensionError("transform_voxels: features " + voxel_features.shape_str() + " vs U " +
                             U.shape_str());
    TensorF out = TensorF::zeros(voxel_features.shape);
    kernels::gemm_nn(U.data(), voxel_features.data(), out.data(), U.rows(), U.cols(), voxel_features.cols(),
                     false);
    return out;
}

TensorF compensate_classifier(const TensorF& w_cls, const TensorF& U) {
    if (U.rank() != 2 || U.rows() != U.cols())
        throw DimensionError("compensate_classifier: U must be square, got " + U.shape_str());
    if (w_cls.rank() != 2 || w_cls.cols() != U.rows())
        throw DimensionError("compensate_classifier: W " + w_cls.shape_str() + " vs U " + U.shape_str());
    TensorF out = TensorF::zeros(w_cls.shape);
    kernels::gemm_nt(w_cls.data(), U.data(), out.data(), w_cls.rows(), w_cls.cols(), U.rows(), false);
    return out;
}

namespace {

std::vector<int32_t> occupied_voxels(const std::vector<int32_t>& counts) {
    std::vector<int32_t> occ;
    for (size_t v = 0; v < counts.size(); ++v)
        if (counts[v] > 0) occ.push_back(static_cast<int32_t>(v));
    return occ;
}

} // namespace

TensorF channel_activation(const TensorF& transformed, const std::vector<int32_t>& counts) {
    if (transformed.rank() != 2 || transformed.cols() != static_cast<int64_t>(counts.size()))
        throw DimensionError("channel_activation: features " + transformed.shape_str() + " vs " +
                             std::to_string(counts.size()) + " voxel counts");
    const std::vector<int32_t> occ = occupied_voxels(counts);
    if (occ.empty()) throw DataError("channel_activation: no occupied voxels");
    TensorF a = TensorF::zeros({transformed.rows()});
    for (int64_t c = 0; c < transformed.rows(); ++c) {
        float best = transformed.at(c, occ[0]);
        for (size_t j = 1; j < occ.size(); ++j) best = std::max(best, transformed.at(c, occ[j]));
        a.at(c) = best;
    }
    return a;
}

PurityRecord purity(const TensorF& transformed, int channel, const std::vector<int32_t>& counts, float eps) {
    if (!(eps > 0.0f)) throw ConfigError("purity: eps must be > 0");
    if (channel < 0 || channel >= transformed.rows())
        throw IndexError("purity: channel " + std::to_string(channel) + " out of range");
    const std::vector<int32_t> occ = occupied_voxels(counts);
    if (occ.empty()) throw DataError("purity: no occupied voxels");

    int32_t best = occ[0];
    for (size_t j = 1; j < occ.size(); ++j)
        if (transformed.at(channel, occ[j]) > transformed.at(channel, best)) best = occ[j];

    float norm_sq = 0.0f;
    for (int64_t c = 0; c < transformed.rows(); ++c) norm_sq += transformed.at(c, best) * transformed.at(c, best);
    PurityRecord rec;
    rec.channel = channel;
    rec.voxel = best;
    rec.purity = transformed.at(channel, best) / (std::sqrt(norm_sq) + eps);
    return rec;
}

int curriculum_k(int t, int total_epochs, int k_init, int k_final) {
    if (t < 0 || t > total_epochs) throw UsageError("curriculum_k: t outside [0, T]");
    if (k_init < k_final || k_final < 1) throw ConfigError("curriculum_k: need k_init >= k_final >= 1");
    if (total_epochs == 0) return k_init;
    const double k = static_cast<double>(k_init) -
                     (static_cast<double>(t) / static_cast<double>(total_epochs)) *
                         static_cast<double>(k_init - k_final);
    return static_cast<int>(std::floor(k));
}

VoxelFeatureCache build_voxel_cache(const FrozenBackbone& backbone, const Dataset& dataset,
                                    std::span<const std::string> ids, int threads) {
    VoxelFeatureCache cache;
    cache.items.resize(ids.size());
    parallel_for(static_cast<int64_t>(ids.size()), threads, [&](int64_t i) {
        const LabeledSample& sample = dataset.by_id(ids[static_cast<size_t>(i)]);
        const ForwardTrace trace = forward(sample, backbone.params());
        CachedVoxelFeatures& item = cache.items[static_cast<size_t>(i)];
        item.id = sample.id;
        item.label = sample.label;
        item.counts = sample.voxel_counts;
        item.occupied = occupied_voxels(sample.voxel_counts);
        const int64_t C = trace.voxel_features.rows();
        item.h_occ = TensorF::zeros({C, static_cast<int64_t>(item.occupied.size())});
        for (int64_t c = 0; c < C; ++c)
            for (size_t j = 0; j < item.occupied.size(); ++j)
                item.h_occ.at(c, static_cast<int64_t>(j)) = trace.voxel_features.at(c, item.occupied[j]);
    });
    for (size_t i = 0; i < cache.items.size(); ++i) cache.by_id[cache.items[i].id] = i;
    return cache;
}

PurityRecord purity_from_cache(const CachedVoxelFeatures& sample, const TensorF& U, int channel, float eps) {
    if (sample.occupied.empty()) throw DataError("purity: sample '" + sample.id + "' has no occupied voxels");
    const int64_t C = U.rows();
    if (channel < 0 || channel >= C) throw IndexError("purity: channel out of range");
    const int64_t V = sample.h_occ.cols();

    // score_j = (U H)_{channel, j}
    int64_t best = 0;
    float best_score = 0.0f;
    for (int64_t j = 0; j < V; ++j) {
        float s = 0.0f;
        for (int64_t k = 0; k < C; ++k) s += U.at(channel, k) * sample.h_occ.at(k, j);
        if (j == 0 || s > best_score) {
            best_score = s;
            best = j;
        }
    }
    float norm_sq = 0.0f;
    for (int64_t c = 0; c < C; ++c) {
        float e = 0.0f;
        for (int64_t k = 0; k < C; ++k) e += U.at(c, k) * sample.h_occ.at(k, best);
        norm_sq += e * e;
    }
    PurityRecord rec;
    rec.sample_id = sample.id;
    rec.channel = channel;
    rec.voxel = sample.occupied[static_cast<size_t>(best)];
    rec.purity = best_score / (std::sqrt(norm_sq) + eps);
    return rec;
}

Registry discover_prototypes(const VoxelFeatureCache& cache, const TensorF& U, int k, int threads) {
    if (k < 1) throw ConfigError("discover_prototypes: k must be >= 1");
    if (static_cast<size_t>(k) > cache.items.size())
        throw ConfigError("discover_prototypes: k=" + std::to_string(k) + " exceeds candidate pool of " +
                          std::to_string(cache.items.size()));
    const int64_t C = U.rows();

    struct Candidate {
        float activation;
        int32_t voxel;
    };
    std::vector<std::vector<Candidate>> per_sample(cache.items.size());
    parallel_for(static_cast<int64_t>(cache.items.size()), threads, [&](int64_t i) {
        const CachedVoxelFeatures& item = cache.items[static_cast<size_t>(i)];
        const int64_t V = item.h_occ.cols();
        if (V == 0) throw DataError("discover_prototypes: sample '" + item.id + "' has no occupied voxels");
        TensorF s = TensorF::zeros({C, V});
        kernels::gemm_nn(U.data(), item.h_occ.data(), s.data(), C, U.cols(), V, false);
        auto& cands = per_sample[static_cast<size_t>(i)];
        cands.resize(static_cast<size_t>(C));
        for (int64_t c = 0; c < C; ++c) {
            int64_t best = 0;
            for (int64_t j = 1; j < V; ++j)
                if (s.at(c, j) > s.at(c, best)) best = j;
            cands[static_cast<size_t>(c)] = {s.at(c, best), item.occupied[static_cast<size_t>(best)]};
        }
    });

    Registry registry(static_cast<size_t>(C));
    for (int64_t c = 0; c < C; ++c) {
        std::vector<PrototypeEntry> entries;
        entries.reserve(cache.items.size());
        for (size_t i = 0; i < cache.items.size(); ++i)
            entries.push_back({cache.items[i].id, per_sample[i][static_cast<size_t>(c)].activation,
                               per_sample[i][static_cast<size_t>(c)].voxel});
        std::sort(entries.begin(), entries.end(), [](const PrototypeEntry& a, const PrototypeEntry& b) {
            if (a.activation != b.activation) return a.activation > b.activation;
            return a.sample_id < b.sample_id;
        });
        entries.resize(static_cast<size_t>(k));
        registry[static_cast<size_t>(c)] = std::move(entries);
    }
    return registry;
}

Registry discover_prototypes(const Dataset& dataset, const FrozenBackbone& backbone, const TensorF& U, int k,
                             int threads) {
    const VoxelFeatureCache cache =
        build_voxel_cache(backbone, dataset, dataset.manifest.split.train, threads);
    return discover_prototypes(cache, U, k, threads);
}

float registry_mean_purity(const VoxelFeatureCache& cache, const TensorF& U, const Registry& registry,
                           float eps) {
    double total = 0.0;
    int64_t n = 0;
    for (size_t c = 0; c < registry.size(); ++c) {
        for (const PrototypeEntry& e : registry[c]) {
            total += purity_from_cache(cache.at(e.sample_id), U, static_cast<int>(c), eps).purity;
            ++n;
        }
    }
    if (n == 0) throw UsageError("registry_mean_purity: empty registry");
    return static_cast<float>(total / static_cast<double>(n));
}

float purity_loss(std::span<const std::pair<std::string, int>> batch, const DisentangleState& state,
                  const VoxelFeatureCache& cache, float eps) {
    if (batch.empty()) throw UsageError("purity_loss: empty batch");
    double total = 0.0;
    for (const auto& [id, channel] : batch) {
        if (channel < 0 || channel >= static_cast<int>(state.registry.size()))
            throw IndexError("purity_loss: channel " + std::to_string(channel) + " out of range");
        const auto& entries = state.registry[static_cast<size_t>(channel)];
        const bool member = std::any_of(entries.begin(), entries.end(),
                                        [&](const PrototypeEntry& e) { return e.sample_id == id; });
        if (!member)
            throw UsageError("purity_loss: sample '" + id + "' is not a prototype of channel " +
                             std::to_string(channel));
        total += purity_from_cache(cache.at(id), state.U, channel, eps).purity;
    }
    return static_cast<float>(-total / static_cast<double>(batch.size()));
}

namespace {

TensorF derive_u(const TensorF& P) {
    // Derived in double to keep the stored U orthogonal to float accuracy.
    return matrix_exp_skew_eval(P.cast<double>()).cast<float>();
}

} // namespace

DisentangleState train_stage2(const FrozenBackbone& backbone, const Dataset& dataset,
                              const StageTwoConfig& config) {
    config.validate();
    const Hyper& hyper = backbone.hyper();
    const int64_t C = hyper.channels;
    const auto& train_ids = dataset.manifest.split.train;
    if (train_ids.empty()) throw UsageError("train_stage2: empty train split");

    const VoxelFeatureCache cache = build_voxel_cache(backbone, dataset, train_ids, config.threads);

    DisentangleState state;
    state.curriculum = config.curriculum;
    state.P = TensorF::zeros({C, C});
    state.U = TensorF::identity(C);
    state.registry = discover_prototypes(cache, state.U, config.curriculum.k_init, config.threads);
    state.purity_history.push_back(registry_mean_purity(cache, state.U, state.registry, config.eps));

    AdamOptimizer adam({&state.P}, config.lr);
    Rng rng(config.seed ^ 0xd1b54a32d192ed03ULL);
    const int T = config.curriculum.epochs;

    for (int epoch = 1; epoch <= T; ++epoch) {
        std::vector<std::pair<const CachedVoxelFeatures*, int>> pairs;
        for (size_t c = 0; c < state.registry.size(); ++c)
            for (const PrototypeEntry& e : state.registry[c])
                pairs.emplace_back(&cache.at(e.sample_id), static_cast<int>(c));
        rng.shuffle(pairs);

        const float lr_scale = 0.5f * (1.0f + std::cos(std::numbers::pi_v<float> *
                                                       static_cast<float>(epoch - 1) / static_cast<float>(T)));
        for (size_t lo = 0; lo < pairs.size(); lo += static_cast<size_t>(config.batch_pairs)) {
            const size_t hi = std::min(pairs.size(), lo + static_cast<size_t>(config.batch_pairs));
            Tape tape;
            Var p_var = tape.leaf(state.P, true);
            Var u_var = matrix_exp_skew(tape, p_var);
            Var loss = purity_loss_tape<float>(
                tape, u_var, std::span(pairs).subspan(lo, hi - lo), config.eps);
            tape.backward(loss);
            if (!std::isfinite(tape.value(loss).scalar_value()))
                throw TrainingError("stage 2 diverged (non-finite loss) at epoch " + std::to_string(epoch));
            adam.step({tape.gradient(p_var)}, lr_scale);
        }

        if (epoch % config.curriculum.update_period == 0 || epoch == T) {
            const int k_t = curriculum_k(epoch, T, config.curriculum.k_init, config.curriculum.k_final);
            state.U = derive_u(state.P);
            state.registry = discover_prototypes(cache, state.U, k_t, config.threads);
            state.purity_history.push_back(registry_mean_purity(cache, state.U, state.registry, config.eps));
        }
    }

    state.U = derive_u(state.P);
    state.W_prime = compensate_classifier(backbone.params().w_cls, state.U);
    backbone.verify_unchanged();
    return state;
}

PreservationReport check_decision_preservation(const BackboneParams& params, const DisentangleState& state,
                                               const Dataset& dataset, std::span<const std::string> ids,
                                               int threads) {
    if (ids.empty()) throw UsageError("check_decision_preservation: empty split");
    std::vector<uint8_t> agree(ids.size(), 0);
    std::vector<float> dev(ids.size(), 0.0f);
    parallel_for(static_cast<int64_t>(ids.size()), threads, [&](int64_t i) {
        const LabeledSample& sample = dataset.by_id(ids[static_cast<size_t>(i)]);
        const ForwardTrace trace = forward(sample, params);
        const TensorF& z = trace.global_feature;
        const int64_t K = params.w_cls.rows();
        const int64_t C = params.w_cls.cols();

        TensorF z_t = TensorF::zeros({C});
        kernels::gemv(state.U.data(), z.data(), z_t.data(), C, C, false);
        TensorF comp = TensorF::zeros({K});
        kernels::gemv(state.W_prime.data(), z_t.data(), comp.data(), K, C, false);

        int64_t raw_best = 0, comp_best = 0;
        float worst = 0.0f;
        for (int64_t k = 0; k < K; ++k) {
            if (trace.logits.at(k) > trace.logits.at(raw_best)) raw_best = k;
            if (comp.at(k) > comp.at(comp_best)) comp_best = k;
            worst = std::max(worst, std::abs(comp.at(k) - trace.logits.at(k)));
        }
        agree[static_cast<size_t>(i)] = static_cast<uint8_t>(raw_best == comp_best);
        dev[static_cast<size_t>(i)] = worst;
    });
    PreservationReport report;
    report.samples = static_cast<int64_t>(ids.size());
    int64_t hits = 0;
    for (size_t i = 0; i < ids.size(); ++i) {
        hits += agree[i];
        report.max_abs_logit_dev = std::max(report.max_abs_logit_dev, static_cast<double>(dev[i]));
    }
    report.agree_fraction = static_cast<double>(hits) / static_cast<double>(ids.size());
    return report;
}

// --- Persistence ------------------------------------------------------------

namespace {

constexpr char kStateMagic[8] = {'X', 'S', 'P', 'L', 'N', 'D', 'S', '1'};

template <class T>
void write_pod(std::ostream& out, const T& value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <class T>
T read_pod(std::istream& in, const std::filesystem::path& path) {
    T value;
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!in) throw FormatError(path.string() + ": truncated state file");
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
    if (!in) throw FormatError(path.string() + ": truncated state file");
    return s;
}

void write_matrix(std::ostream& out, const TensorF& t) {
    write_pod(out, t.rows());
    write_pod(out, t.cols());
    out.write(reinterpret_cast<const char*>(t.v.data()),
              static_cast<std::streamsize>(t.v.size() * sizeof(float)));
}

TensorF read_matrix(std::istream& in, const std::filesystem::path& path) {
    const auto rows = read_pod<int64_t>(in, path);
    const auto cols = read_pod<int64_t>(in, path);
    TensorF t = TensorF::zeros({rows, cols});
    in.read(reinterpret_cast<char*>(t.v.data()), static_cast<std::streamsize>(t.v.size() * sizeof(float)));
    if (!in) throw FormatError(path.string() + ": truncated matrix data");
    return t;
}

} // namespace

void save_disentangle_state(const DisentangleState& state, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out.write(kStateMagic, sizeof(kStateMagic));
    write_pod(out, static_cast<uint32_t>(1));
    write_pod(out, static_cast<int32_t>(state.curriculum.k_init));
    write_pod(out, static_cast<int32_t>(state.curriculum.k_final));
    write_pod(out, static_cast<int32_t>(state.curriculum.epochs));
    write_pod(out, static_cast<int32_t>(state.curriculum.update_period));
    write_matrix(out, state.P);
    write_matrix(out, state.U);
    write_matrix(out, state.W_prime);
    write_pod(out, static_cast<uint32_t>(state.purity_history.size()));
    for (float p : state.purity_history) write_pod(out, p);
    write_pod(out, static_cast<uint32_t>(state.registry.size()));
    for (const auto& channel : state.registry) {
        write_pod(out, static_cast<uint32_t>(channel.size()));
        for (const PrototypeEntry& e : channel) {
            write_string(out, e.sample_id);
            write_pod(out, e.activation);
            write_pod(out, e.voxel);
        }
    }
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

DisentangleState load_disentangle_state(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kStateMagic, sizeof(magic)) != 0)
        throw FormatError(path.string() + ": not a disentangle state file");
    if (read_pod<uint32_t>(in, path) != 1) throw FormatError(path.string() + ": unsupported state version");

    DisentangleState state;
    state.curriculum.k_init = read_pod<int32_t>(in, path);
    state.curriculum.k_final = read_pod<int32_t>(in, path);
    state.curriculum.epochs = read_pod<int32_t>(in, path);
    state.curriculum.update_period = read_pod<int32_t>(in, path);
    state.P = read_matrix(in, path);
    state.U = read_matrix(in, path);
    state.W_prime = read_matrix(in, path);
    const auto n_history = read_pod<uint32_t>(in, path);
    for (uint32_t i = 0; i < n_history; ++i) state.purity_history.push_back(read_pod<float>(in, path));
    const auto n_channels = read_pod<uint32_t>(in, path);
    state.registry.resize(n_channels);
    for (uint32_t c = 0; c < n_channels; ++c) {
        const auto n_entries = read_pod<uint32_t>(in, path);
        for (uint32_t e = 0; e < n_entries; ++e) {
            PrototypeEntry entry;
            entry.sample_id = read_string(in, path);
            entry.activation = read_pod<float>(in, path);
            entry.voxel = read_pod<int32_t>(in, path);
            state.registry[c].push_back(std::move(entry));
        }
    }
    return state;
}

void export_registry_json(const DisentangleState& state, const std::filesystem::path& path) {
    nlohmann::json j;
    j["version"] = 1;
    j["channels"] = nlohmann::json::array();
    for (size_t c = 0; c < state.registry.size(); ++c) {
        nlohmann::json entries = nlohmann::json::array();
        for (const PrototypeEntry& e : state.registry[c])
            entries.push_back({{"sample", e.sample_id}, {"activation", e.activation}, {"voxel", e.voxel}});
        j["channels"].push_back({{"channel", c}, {"prototypes", entries}});
    }
    j["purity_history"] = state.purity_history;
    std::ofstream out(path);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out << j.dump(2) << "\n";
}

} // namespace xsplain
