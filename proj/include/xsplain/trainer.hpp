#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "xsplain/backbone.hpp"
#include "xsplain/splat_io.hpp"

namespace xsplain {

// Adam over a fixed list of parameter tensors. The list order is the slot
// layout; gradients must arrive in the same order.
class AdamOptimizer {
public:
    AdamOptimizer(std::vector<TensorF*> params, float lr, float beta1 = 0.9f, float beta2 = 0.999f,
                  float eps = 1e-8f);

    // lr_scale multiplies the base rate (cosine schedule lives in the caller).
    void step(const std::vector<TensorF>& grads, float lr_scale = 1.0f);

private:
    std::vector<TensorF*> params_;
    std::vector<TensorF> m_, v_;
    float lr_, beta1_, beta2_, eps_;
    int64_t t_ = 0;
};

struct StageOneConfig {
    Hyper hyper;
    float lr = 1e-3f;
    int epochs = 60;
    int batch_size = 16;
    int patience = 15; // early stop when val accuracy stalls this long
    uint64_t seed = 1;
    int threads = 1;

    void validate() const {
        hyper.validate();
        if (!(lr > 0.0f)) throw ConfigError("lr must be > 0");
        if (epochs < 0) throw ConfigError("epochs must be >= 0");
        if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    }
};

struct EpochStats {
    int epoch = 0;
    float train_loss = 0.0f;
    float cls_loss = 0.0f;
    float density_loss = 0.0f;
    float val_accuracy = 0.0f;
};

struct TrainReport {
    std::vector<EpochStats> epochs;
    int best_epoch = -1;
    float best_val_accuracy = 0.0f;
    float test_accuracy = 0.0f;
    double wall_seconds = 0.0;
    uint64_t seed = 0;
};

// Stage 1: minimize cross-entropy + lambda * KL over the train split with
// Adam and a cosine rate decay. Deterministic for a fixed seed at one
// thread; the checkpoint with the best validation accuracy is retained.
std::pair<BackboneParams, TrainReport> train_stage1(const Dataset& dataset, const StageOneConfig& config);

// Fraction of argmax-correct predictions over the given ids.
float evaluate(const BackboneParams& params, const Dataset& dataset, std::span<const std::string> ids,
               int threads = 1);

// Read-only view of trained parameters; detects mutation by content hash.
class FrozenBackbone {
public:
    explicit FrozenBackbone(BackboneParams params);

    const BackboneParams& params() const { return *params_; }
    const Hyper& hyper() const { return params_->hyper; }
    uint64_t hash() const { return hash_; }

    void verify_unchanged() const {
        if (params_->content_hash() != hash_)
            throw FrozenStateViolation("frozen backbone parameters changed during stage 2");
    }

private:
    // Behind a unique_ptr so the view stays stable if the handle moves.
    std::unique_ptr<BackboneParams> params_;
    uint64_t hash_ = 0;
};

FrozenBackbone freeze(BackboneParams params);

void save_train_report(const TrainReport& report, const std::filesystem::path& path);

} // namespace xsplain
