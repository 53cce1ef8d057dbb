#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "starformer/encoder.hpp"

namespace starformer {

enum class MaskStrategy { kDarem, kRandom, kNone };

MaskStrategy mask_strategy_from_string(const std::string& name);
std::string to_string(MaskStrategy s);

// Regional masking hyperparameters: phi bounds the masked fraction of valid
// timesteps, zeta the share of that budget picked directly by importance,
// gamma the region radius as a fraction of valid length.
struct MaskConfig {
    double phi = 0.2;
    double zeta = 0.3;
    double gamma = 0.1;
    MaskStrategy strategy = MaskStrategy::kDarem;

    void validate() const;
};

// Per-sample, per-timestep importance. Scores are non-negative, zero on
// padding, and sum to one over each sample's valid timesteps.
struct ImportanceScores {
    Tensor sigma;   // [B, N], value-only
    BoolMask valid; // [B, N]
};

// Per-sample boolean timestep mask (true = hidden) plus the budget and the
// importance-selected seed indices that produced it.
struct RegionalMask {
    BoolMask masked; // [B, N]
    std::vector<std::int64_t> budget;
    std::vector<std::vector<std::int64_t>> seeds;

    std::int64_t count(std::int64_t sample) const {
        std::int64_t c = 0;
        const std::int64_t n = masked.shape[1];
        for (std::int64_t j = 0; j < n; ++j) c += masked.at(sample, j);
        return c;
    }
};

// Aggregates a per-layer attention stack into one matrix per sample by the
// modified rollout: layer 0 passes through (padded-key columns re-zeroed),
// every later layer contributes (A/2 + I/2) as a left factor. The result is
// detached: mask construction never carries gradient.
Tensor aggregate_attention_rollout(const AttentionStack& attn, const BoolMask& valid);

// Column sums of the rolled-out attention over valid timesteps, normalized to
// one per sample. The classification token's row and column are dropped.
ImportanceScores attention_scores(const Tensor& rolled, const BoolMask& valid);

// Builds the per-sample mask. For the importance-driven strategy, seeds are
// the top-scoring timesteps and regions grow outward from each seed by
// distance until the budget binds. Ties prefer the lower index everywhere so
// runs reproduce exactly.
RegionalMask build_regional_mask(const ImportanceScores& scores, const MaskConfig& cfg,
                                 std::uint64_t rng_seed);

// Copy of the batch with masked timesteps zero-filled in feature space.
// Lengths, validity, and labels are untouched: masked steps remain
// addressable attention positions.
SequenceBatch apply_mask(const SequenceBatch& batch, const RegionalMask& mask);

} // namespace starformer
