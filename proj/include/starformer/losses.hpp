#pragma once

#include <cstdint>
#include <vector>

#include "starformer/ops.hpp"

namespace starformer {

struct LossConfig {
    double tau = 0.5;         // contrastive temperature
    double lambda_cl = 1.0;   // weight of the fused contrastive term in the total loss
    double lambda_fuse = 0.5; // batch-wise share inside the fused contrastive loss
    double eps = 1e-8;        // cosine-similarity norm floor

    void validate() const;
};

// Pooled unmasked (u) and masked (v) embeddings of the same batch, the unit
// of comparison for the contrastive terms. Anchors are always the unmasked
// side.
struct LatentPair {
    Tensor u; // [B, F]
    Tensor v; // [B, F]
    std::vector<std::int64_t> labels;

    std::int64_t batch_size() const { return u.extent(0); }
    void validate() const;
};

// Mean of hidden states over each sample's valid timesteps, excluding the
// classification token and padding. hidden is [B, N+1, F], valid is [B, N].
Tensor pooled_embedding(const Tensor& hidden, const BoolMask& valid);

// sim(a, b) = a.b / (max(|a|, eps) * max(|b|, eps)) for rank-1 tensors.
Tensor cosine_sim(const Tensor& a, const Tensor& b, double eps = 1e-8);

// All pairwise cosines between rows of u and rows of v -> [B, B].
Tensor pairwise_cosine(const Tensor& u, const Tensor& v, double eps = 1e-8);

// Self-supervised term: each sample's masked view against every other
// sample's masked view. The positive is excluded from the denominator, so the
// value may be negative. Requires at least two samples.
Tensor batchwise_loss(const LatentPair& pair, const LossConfig& cfg);

// Supervised term: same-class masked views (including the sample's own) in
// the numerator, different-class views in the denominator. Samples with no
// different-class member in the batch contribute nothing and are excluded
// from the mean; a single-class batch scores exactly zero.
Tensor classwise_loss(const LatentPair& pair, const LossConfig& cfg);

// lambda_fuse * batchwise + (1 - lambda_fuse) * classwise.
Tensor fused_contrastive_loss(const Tensor& batchwise, const Tensor& classwise,
                              const LossConfig& cfg);

// Cross entropy on logits [B, C]; with binary = true, logits hold one column
// and the loss is binary cross entropy on that logit.
Tensor classification_loss(const Tensor& logits, const std::vector<std::int64_t>& labels,
                           bool binary = false);

// classification + lambda_cl * fused contrastive.
Tensor total_loss(const Tensor& classification, const Tensor& contrastive, const LossConfig& cfg);

} // namespace starformer
