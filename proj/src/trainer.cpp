#include "xsplain/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>

#include <nlohmann/json.hpp>

#include "xsplain/parallel.hpp"
#include "xsplain/rng.hpp"

namespace xsplain {

AdamOptimizer::AdamOptimizer(std::vector<TensorF*> params, float lr, float beta1, float beta2, float eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const TensorF* p : params_) {
        m_.push_back(TensorF::zeros(p->shape));
        v_.push_back(TensorF::zeros(p->shape));
    }
}

void AdamOptimizer::step(const std::vector<TensorF>& grads, float lr_scale) {
    if (grads.size() != params_.size())
        throw UsageError("optimizer got " + std::to_string(grads.size()) + " gradients for " +
                         std::to_string(params_.size()) + " parameters");
    ++t_;
    const float bc1 = 1.0f - std::pow(beta1_, static_cast<float>(t_));
    const float bc2 = 1.0f - std::pow(beta2_, static_cast<float>(t_));
    const float rate = lr_ * lr_scale;
    for (size_t i = 0; i < params_.size(); ++i) {
        TensorF& p = *params_[i];
        const TensorF& g = grads[i];
        if (!p.same_shape(g))
            throw DimensionError("gradient shape " + g.shape_str() + " vs parameter " + p.shape_str());
        TensorF& m = m_[i];
        TensorF& v = v_[i];
        for (int64_t j = 0; j < p.numel(); ++j) {
            m.at(j) = beta1_ * m.at(j) + (1.0f - beta1_) * g.at(j);
            v.at(j) = beta2_ * v.at(j) + (1.0f - beta2_) * g.at(j) * g.at(j);
            const float mh = m.at(j) / bc1;
            const float vh = v.at(j) / bc2;
            p.at(j) -= rate * mh / (std::sqrt(vh) + eps_);
        }
    }
}

namespace {

struct BatchResult {
    std::vector<TensorF> grads;
    float loss = 0.0f, cls = 0.0f, density = 0.0f;
};

// One forward/backward per sample; per-sample gradients are reduced in
// sample order afterwards, so results do not depend on the thread count.
BatchResult run_batch(const BackboneParams& params, const Dataset& dataset,
                      std::span<const std::string> ids, int threads) {
    struct PerSample {
        std::vector<TensorF> grads;
        float loss = 0.0f, cls = 0.0f, density = 0.0f;
    };
    std::vector<PerSample> results(ids.size());
    parallel_for(static_cast<int64_t>(ids.size()), threads, [&](int64_t i) {
        const LabeledSample& sample = dataset.by_id(ids[static_cast<size_t>(i)]);
        Tape tape;
        BackboneVars vars = mount_backbone(tape, params, true);
        TraceVars tv = backbone_forward_tape(tape, vars, sample, params.hyper, true);
        tape.backward(tv.loss_total);
        PerSample& r = results[static_cast<size_t>(i)];
        r.loss = tape.value(tv.loss_total).scalar_value();
        r.cls = tape.value(tv.loss_cls).scalar_value();
        r.density = tape.value(tv.loss_density).scalar_value();
        r.grads.reserve(vars.ordered.size());
        for (Var v : vars.ordered) r.grads.push_back(tape.gradient(v));
    });

    BatchResult out;
    const float inv = 1.0f / static_cast<float>(ids.size());
    for (size_t i = 0; i < results.size(); ++i) {
        PerSample& r = results[i];
        out.loss += r.loss * inv;
        out.cls += r.cls * inv;
        out.density += r.density * inv;
        if (out.grads.empty()) {
            out.grads.resize(r.grads.size());
            for (size_t t = 0; t < r.grads.size(); ++t) out.grads[t] = TensorF::zeros(r.grads[t].shape);
        }
        for (size_t t = 0; t < r.grads.size(); ++t)
            kernels::axpy(out.grads[t].data(), r.grads[t].data(), inv, out.grads[t].numel());
    }
    return out;
}

} // namespace

float evaluate(const BackboneParams& params, const Dataset& dataset, std::span<const std::string> ids,
               int threads) {
    if (ids.empty()) throw UsageError("evaluate: empty split");
    std::vector<uint8_t> correct(ids.size(), 0);
    parallel_for(static_cast<int64_t>(ids.size()), threads, [&](int64_t i) {
        const LabeledSample& sample = dataset.by_id(ids[static_cast<size_t>(i)]);
        const ForwardTrace tr = forward(sample, params);
        const auto best =
            std::max_element(tr.logits.v.begin(), tr.logits.v.end()) - tr.logits.v.begin();
        correct[static_cast<size_t>(i)] = static_cast<uint8_t>(best == sample.label);
    });
    int64_t hits = 0;
    for (uint8_t c : correct) hits += c;
    return static_cast<float>(hits) / static_cast<float>(ids.size());
}

std::pair<BackboneParams, TrainReport> train_stage1(const Dataset& dataset, const StageOneConfig& config) {
    config.validate();
    if (dataset.manifest.split.train.empty()) throw UsageError("train_stage1: empty train split");
    if (dataset.grid_size != config.hyper.grid_size)
        throw ConfigError("dataset voxelized for G=" + std::to_string(dataset.grid_size) +
                          " but config asks G=" + std::to_string(config.hyper.grid_size));

    const auto start = std::chrono::steady_clock::now();
    BackboneParams params = init_backbone(config.hyper, config.seed);
    AdamOptimizer adam(params.trainable_tensors(), config.lr);

    TrainReport report;
    report.seed = config.seed;
    BackboneParams best = params;
    report.best_epoch = -1;
    report.best_val_accuracy = -1.0f;

    Rng shuffle_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<std::string> order = dataset.manifest.split.train;

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        const float lr_scale =
            0.5f * (1.0f + std::cos(std::numbers::pi_v<float> * static_cast<float>(epoch) /
                                    static_cast<float>(config.epochs)));
        EpochStats stats;
        stats.epoch = epoch;
        int64_t batches = 0;
        for (size_t lo = 0; lo < order.size(); lo += static_cast<size_t>(config.batch_size)) {
            const size_t hi = std::min(order.size(), lo + static_cast<size_t>(config.batch_size));
            BatchResult batch = run_batch(params, dataset,
                                          std::span(order).subspan(lo, hi - lo), config.threads);
            adam.step(batch.grads, lr_scale);
            stats.train_loss += batch.loss;
            stats.cls_loss += batch.cls;
            stats.density_loss += batch.density;
            ++batches;
        }
        stats.train_loss /= static_cast<float>(batches);
        stats.cls_loss /= static_cast<float>(batches);
        stats.density_loss /= static_cast<float>(batches);
        if (!std::isfinite(stats.train_loss))
            throw TrainingError("training diverged (non-finite loss) at epoch " + std::to_string(epoch));

        stats.val_accuracy = dataset.manifest.split.val.empty()
                                 ? 0.0f
                                 : evaluate(params, dataset, dataset.manifest.split.val, config.threads);
        report.epochs.push_back(stats);

        if (stats.val_accuracy > report.best_val_accuracy) {
            report.best_val_accuracy = stats.val_accuracy;
            report.best_epoch = epoch;
            best = params;
        }
        if (config.patience > 0 && epoch - report.best_epoch >= config.patience) break;
    }

    if (report.best_epoch >= 0) params = best;
    if (!dataset.manifest.split.test.empty())
        report.test_accuracy = evaluate(params, dataset, dataset.manifest.split.test, config.threads);
    report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return {std::move(params), std::move(report)};
}

FrozenBackbone::FrozenBackbone(BackboneParams params)
    : params_(std::make_unique<BackboneParams>(std::move(params))) {
    params_->frozen = true;
    hash_ = params_->content_hash();
}

FrozenBackbone freeze(BackboneParams params) { return FrozenBackbone(std::move(params)); }

void save_train_report(const TrainReport& report, const std::filesystem::path& path) {
    nlohmann::json j;
    j["version"] = 1;
    j["seed"] = report.seed;
    j["best_epoch"] = report.best_epoch;
    j["best_val_accuracy"] = report.best_val_accuracy;
    j["test_accuracy"] = report.test_accuracy;
    j["wall_seconds"] = report.wall_seconds;
    j["epochs"] = nlohmann::json::array();
    for (const auto& e : report.epochs)
        j["epochs"].push_back({{"epoch", e.epoch},
                               {"train_loss", e.train_loss},
                               {"cls_loss", e.cls_loss},
                               {"density_loss", e.density_loss},
                               {"val_accuracy", e.val_accuracy}});
    std::ofstream out(path);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out << j.dump(2) << "\n";
}

} // namespace xsplain
