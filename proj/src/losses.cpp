#include "starformer/losses.hpp"

namespace starformer {

void LossConfig::validate() const {
    if (tau <= 0.0) throw ConfigError("loss.tau: must be positive, got " + std::to_string(tau));
    if (lambda_cl < 0.0) {
        throw ConfigError("loss.lambda_cl: must be non-negative, got " +
                          std::to_string(lambda_cl));
    }
    if (lambda_fuse < 0.0 || lambda_fuse > 1.0) {
        throw ConfigError("loss.lambda_fuse: " + std::to_string(lambda_fuse) + " outside [0, 1]");
    }
    if (eps <= 0.0) throw ConfigError("loss.eps: must be positive, got " + std::to_string(eps));
}

void LatentPair::validate() const {
    if (u.rank() != 2 || u.shape() != v.shape()) {
        throw ContractError("latent pair: u " + shape_str(u.shape()) + " vs v " +
                            shape_str(v.shape()));
    }
    if (static_cast<std::int64_t>(labels.size()) != batch_size()) {
        throw ContractError("latent pair: " + std::to_string(labels.size()) +
                            " labels for batch " + std::to_string(batch_size()));
    }
}

Tensor pooled_embedding(const Tensor& hidden, const BoolMask& valid) {
    if (hidden.rank() != 3) {
        throw ShapeError("pooled_embedding: hidden must be [B, N+1, F], got " +
                         shape_str(hidden.shape()));
    }
    const std::int64_t b = hidden.extent(0), t = hidden.extent(1);
    if (valid.shape != Shape{b, t - 1}) {
        throw ShapeError("pooled_embedding: valid " + shape_str(valid.shape) + " vs hidden " +
                         shape_str(hidden.shape()));
    }
    Tensor weights(Shape{b, t});
    for (std::int64_t i = 0; i < b; ++i) {
        std::int64_t count = 0;
        for (std::int64_t j = 0; j + 1 < t; ++j) count += valid.at(i, j);
        if (count == 0) {
            throw ContractError("pooled_embedding: sample " + std::to_string(i) +
                                " has no valid timestep");
        }
        for (std::int64_t j = 0; j + 1 < t; ++j) {
            weights[i * t + j + 1] = valid.at(i, j) ? 1.0 / static_cast<double>(count) : 0.0;
        }
    }
    return ops::weighted_sum_rows(hidden, weights);
}

Tensor cosine_sim(const Tensor& a, const Tensor& b, double eps) {
    if (a.rank() != 1 || a.shape() != b.shape()) {
        throw ShapeError("cosine_sim: expected equal rank-1 tensors, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
    }
    Tensor dot = ops::sum_all(ops::mul(a, b));
    Tensor na = ops::clamp_min(ops::sqrt(ops::sum_all(ops::mul(a, a))), eps);
    Tensor nb = ops::clamp_min(ops::sqrt(ops::sum_all(ops::mul(b, b))), eps);
    return ops::div(dot, ops::mul(na, nb));
}

Tensor pairwise_cosine(const Tensor& u, const Tensor& v, double eps) {
    if (u.rank() != 2 || u.shape() != v.shape()) {
        throw ShapeError("pairwise_cosine: expected equal [B, F] tensors, got " +
                         shape_str(u.shape()) + " and " + shape_str(v.shape()));
    }
    const std::int64_t b = u.extent(0);
    auto normalize = [&](const Tensor& x) {
        Tensor norms = ops::clamp_min(ops::sqrt(ops::sum_axis(ops::mul(x, x), 1)), eps);
        return ops::div(x, ops::reshape(norms, {b, 1}));
    };
    return ops::matmul(normalize(u), ops::transpose(normalize(v), 0, 1));
}

Tensor batchwise_loss(const LatentPair& pair, const LossConfig& cfg) {
    pair.validate();
    cfg.validate();
    const std::int64_t b = pair.batch_size();
    if (b < 2) {
        throw ContractError("batchwise_loss: need at least 2 samples, got " + std::to_string(b));
    }
    Tensor logits = ops::scale(pairwise_cosine(pair.u, pair.v, cfg.eps), 1.0 / cfg.tau);
    Tensor expd = ops::exp(logits);
    Tensor denom = ops::sub(ops::sum_axis(expd, 1), ops::diag_part(expd));
    Tensor per_sample = ops::sub(ops::log(denom), ops::diag_part(logits));
    return ops::mean_all(per_sample);
}

Tensor classwise_loss(const LatentPair& pair, const LossConfig& cfg) {
    pair.validate();
    cfg.validate();
    const std::int64_t b = pair.batch_size();
    if (b < 2) {
        throw ContractError("classwise_loss: need at least 2 samples, got " + std::to_string(b));
    }
    Tensor same(Shape{b, b});
    Tensor diff(Shape{b, b});
    std::vector<std::int64_t> contributing;
    for (std::int64_t i = 0; i < b; ++i) {
        bool has_other_class = false;
        for (std::int64_t j = 0; j < b; ++j) {
            const bool match =
                pair.labels[static_cast<std::size_t>(i)] == pair.labels[static_cast<std::size_t>(j)];
            same[i * b + j] = match ? 1.0 : 0.0;
            diff[i * b + j] = match ? 0.0 : 1.0;
            has_other_class = has_other_class || !match;
        }
        if (has_other_class) contributing.push_back(i);
    }
    if (contributing.empty()) return Tensor::scalar(0.0);

    Tensor logits = ops::scale(pairwise_cosine(pair.u, pair.v, cfg.eps), 1.0 / cfg.tau);
    Tensor expd = ops::exp(logits);
    Tensor numer = ops::sum_axis(ops::mul(expd, same), 1);
    Tensor denom = ops::sum_axis(ops::mul(expd, diff), 1);
    // gather before the log: excluded rows have an empty (zero) denominator
    Tensor per_sample = ops::sub(ops::log(ops::gather_rows(denom, contributing)),
                                 ops::log(ops::gather_rows(numer, contributing)));
    return ops::mean_all(per_sample);
}

Tensor fused_contrastive_loss(const Tensor& batchwise, const Tensor& classwise,
                              const LossConfig& cfg) {
    cfg.validate();
    return ops::add(ops::scale(batchwise, cfg.lambda_fuse),
                    ops::scale(classwise, 1.0 - cfg.lambda_fuse));
}

Tensor classification_loss(const Tensor& logits, const std::vector<std::int64_t>& labels,
                           bool binary) {
    if (binary) return ops::binary_cross_entropy_logits(logits, labels);
    return ops::cross_entropy_logits(logits, labels);
}

Tensor total_loss(const Tensor& classification, const Tensor& contrastive,
                  const LossConfig& cfg) {
    cfg.validate();
    return ops::add(classification, ops::scale(contrastive, cfg.lambda_cl));
}

} // namespace starformer
