#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "starformer/darem.hpp"
#include "starformer/data.hpp"
#include "starformer/losses.hpp"

namespace starformer {

struct TrainConfig {
    std::int64_t epochs = 50;
    std::int64_t batch_size = 16;
    double learning_rate = 1e-3;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 1;
    std::optional<double> grad_clip = 1.0; // global-norm ceiling; disabled when absent
    MaskConfig mask;
    LossConfig loss;
    ModelConfig model;

    void validate() const;
};

// Macro-averaged classification metrics plus the raw confusion counts
// (row = true class, column = prediction).
struct Metrics {
    double accuracy = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    double f_half = 0.0; // F-beta at beta = 0.5
    std::int64_t num_classes = 0;
    std::vector<std::int64_t> confusion;

    std::int64_t total() const;
    std::int64_t count(std::int64_t truth, std::int64_t predicted) const {
        return confusion[static_cast<std::size_t>(truth * num_classes + predicted)];
    }
};

Metrics metrics_from_confusion(const std::vector<std::int64_t>& confusion,
                               std::int64_t num_classes);

// Adam with bias correction. Moment buffers follow the parameter visitation
// order, so a state is only valid for the params it was initialized with.
class Adam {
public:
    Adam() = default;
    explicit Adam(ModelParams& params);

    // Applies one update from the accumulated gradients, then clears them.
    // Returns the pre-clip global gradient norm.
    double step(ModelParams& params, double lr, double beta1, double beta2, double eps,
                std::optional<double> clip);

    std::int64_t updates() const { return t_; }

private:
    std::vector<std::vector<double>> m_, v_;
    std::int64_t t_ = 0;
};

struct TrainerState {
    ModelConfig model; // resolved
    ModelParams params;
    Adam opt;
    std::uint64_t param_version = 0;
    std::vector<double> norm_mean, norm_std; // channel statistics fit on train

    static TrainerState init(const ModelConfig& cfg, std::uint64_t seed);
};

ModelParams clone_params(const ModelParams& params);

struct MaskStats {
    std::int64_t total_masked = 0;
    double masked_fraction = 0.0; // of valid timesteps
};

struct StepReport {
    double loss_ce = 0.0;
    double loss_bw = 0.0;
    double loss_cw = 0.0;
    double loss_total = 0.0;
    MaskStats mask;
    // value snapshots for degeneracy checks and exports
    Tensor hidden_unmasked, hidden_masked; // [B, N+1, F]
    Tensor pooled_unmasked, pooled_masked; // [B, F]
    std::uint64_t version_unmasked = 0, version_masked = 0;
};

// One optimization step: unmasked forward with attention collection, mask
// construction (gradient-detached), masked forward through the same
// parameters, fused loss, backward, Adam update. With lambda_cl == 0 or
// strategy none the masked tower is skipped and the total loss IS the
// classification loss.
StepReport train_step(const SequenceBatch& batch, TrainerState& state, const TrainConfig& cfg,
                      std::int64_t global_step);

struct EpochRecord {
    std::int64_t epoch = 0;
    double train_loss = 0.0;
    bool has_val = false;
    Metrics val;
};

struct TrainResult {
    TrainerState state; // after the final epoch
    std::vector<EpochRecord> history;
    ModelParams best_params; // highest val accuracy (earliest epoch on ties);
                             // final params when no validation split exists
    std::int64_t best_epoch = -1;
};

// Seeded epoch shuffling over `train`; per-epoch validation metrics when
// `val` is non-empty. The epoch train loss is the sample-weighted mean of
// per-step total losses.
TrainResult train_loop(const Dataset& train, const Dataset& val, const TrainConfig& cfg);

// Argmax (or thresholded single-logit) prediction over the dataset with
// dropout disabled.
Metrics evaluate(const Dataset& ds, const TrainerState& state, std::int64_t batch_size = 64);

// Versioned binary container: magic, format version, config digest, the
// resolved model config, then a directory of named tensors (parameters plus
// the normalization statistics). Round trips are bit-exact.
void save_checkpoint(const TrainerState& state, const std::string& path);
TrainerState load_checkpoint(const std::string& path);
// Additionally insists the stored model matches `expect`, reporting the first
// mismatched tensor.
TrainerState load_checkpoint(const std::string& path, const ModelConfig& expect);

std::uint64_t model_config_digest(const ModelConfig& cfg);

} // namespace starformer
