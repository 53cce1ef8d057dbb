#include "starformer/darem.hpp"

#include <algorithm>
#include <cmath>

namespace starformer {

MaskStrategy mask_strategy_from_string(const std::string& name) {
    if (name == "darem") return MaskStrategy::kDarem;
    if (name == "random") return MaskStrategy::kRandom;
    if (name == "none") return MaskStrategy::kNone;
    throw ConfigError("mask.strategy: unknown strategy '" + name + "'");
}

std::string to_string(MaskStrategy s) {
    switch (s) {
    case MaskStrategy::kDarem: return "darem";
    case MaskStrategy::kRandom: return "random";
    default: return "none";
    }
}

void MaskConfig::validate() const {
    auto unit = [](double v, const char* field) {
        if (v < 0.0 || v > 1.0) {
            throw ConfigError(std::string("mask.") + field + ": " + std::to_string(v) +
                              " outside [0, 1]");
        }
    };
    unit(phi, "phi");
    unit(zeta, "zeta");
    unit(gamma, "gamma");
}

Tensor aggregate_attention_rollout(const AttentionStack& attn, const BoolMask& valid) {
    const std::int64_t layers = attn.layers();
    if (layers == 0) {
        throw ContractError("attention rollout: empty attention stack");
    }
    const std::int64_t b = attn.batch(), t = attn.tokens();
    if (valid.shape != Shape{b, t - 1}) {
        throw ShapeError("attention rollout: valid mask " + shape_str(valid.shape) +
                         " vs attention " + shape_str(attn.weights.shape()));
    }

    // key-column mask: the class token column is always kept
    auto column_ok = [&](std::int64_t sample, std::int64_t k) {
        return k == 0 || valid.at(sample, k - 1);
    };

    Tensor rolled(Shape{b, t, t});
    std::vector<double> layer_mat(static_cast<std::size_t>(t * t));
    std::vector<double> product(static_cast<std::size_t>(t * t));
    for (std::int64_t sample = 0; sample < b; ++sample) {
        double* acc = rolled.data() + sample * t * t;
        for (std::int64_t q = 0; q < t; ++q) {
            for (std::int64_t k = 0; k < t; ++k) {
                acc[q * t + k] = column_ok(sample, k) ? attn.at(0, sample, q, k) : 0.0;
            }
        }
        for (std::int64_t layer = 1; layer < layers; ++layer) {
            for (std::int64_t q = 0; q < t; ++q) {
                for (std::int64_t k = 0; k < t; ++k) {
                    const double a =
                        column_ok(sample, k) ? attn.at(layer, sample, q, k) : 0.0;
                    layer_mat[static_cast<std::size_t>(q * t + k)] =
                        0.5 * a + (q == k ? 0.5 : 0.0);
                }
            }
            std::fill(product.begin(), product.end(), 0.0);
            for (std::int64_t q = 0; q < t; ++q) {
                for (std::int64_t m = 0; m < t; ++m) {
                    const double w = layer_mat[static_cast<std::size_t>(q * t + m)];
                    if (w == 0.0) continue;
                    for (std::int64_t k = 0; k < t; ++k) {
                        product[static_cast<std::size_t>(q * t + k)] += w * acc[m * t + k];
                    }
                }
            }
            std::copy(product.begin(), product.end(), acc);
        }
    }
    return rolled;
}

ImportanceScores attention_scores(const Tensor& rolled, const BoolMask& valid) {
    if (rolled.rank() != 3 || rolled.extent(1) != rolled.extent(2)) {
        throw ShapeError("attention_scores: expected [B, T, T], got " + shape_str(rolled.shape()));
    }
    const std::int64_t b = rolled.extent(0), t = rolled.extent(1), n = t - 1;
    if (valid.shape != Shape{b, n}) {
        throw ShapeError("attention_scores: valid mask " + shape_str(valid.shape) +
                         " vs attention " + shape_str(rolled.shape()));
    }
    ImportanceScores out;
    out.sigma = Tensor(Shape{b, n});
    out.valid = valid;
    for (std::int64_t sample = 0; sample < b; ++sample) {
        const double* mat = rolled.data() + sample * t * t;
        double total = 0.0;
        for (std::int64_t k = 0; k < n; ++k) {
            if (!valid.at(sample, k)) continue;
            double column = 0.0;
            for (std::int64_t q = 0; q < n; ++q) {
                if (valid.at(sample, q)) column += mat[(q + 1) * t + (k + 1)];
            }
            out.sigma[sample * n + k] = column;
            total += column;
        }
        if (total <= 0.0) {
            throw NumericError("attention_scores: degenerate attention for sample " +
                               std::to_string(sample));
        }
        for (std::int64_t k = 0; k < n; ++k) {
            if (valid.at(sample, k)) {
                out.sigma[sample * n + k] /= total;
            } else {
                out.sigma[sample * n + k] = 0.0;
            }
        }
    }
    return out;
}

namespace {

std::int64_t round_half_up(double x) { return static_cast<std::int64_t>(std::floor(x + 0.5)); }

// valid timestep indices ranked by descending score, ties toward lower index
std::vector<std::int64_t> rank_by_score(const double* sigma,
                                        const std::vector<std::int64_t>& valid_idx) {
    std::vector<std::int64_t> order = valid_idx;
    std::stable_sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
        if (sigma[a] != sigma[b]) return sigma[a] > sigma[b];
        return a < b;
    });
    return order;
}

} // namespace

RegionalMask build_regional_mask(const ImportanceScores& scores, const MaskConfig& cfg,
                                 std::uint64_t rng_seed) {
    cfg.validate();
    const std::int64_t b = scores.sigma.extent(0), n_max = scores.sigma.extent(1);
    RegionalMask out;
    out.masked = BoolMask(Shape{b, n_max});
    out.budget.resize(static_cast<std::size_t>(b));
    out.seeds.resize(static_cast<std::size_t>(b));

    Rng rng(derive_seed(rng_seed, 0x4D41534B)); // mask stream
    for (std::int64_t sample = 0; sample < b; ++sample) {
        std::vector<std::int64_t> valid_idx;
        for (std::int64_t j = 0; j < n_max; ++j) {
            if (scores.valid.at(sample, j)) valid_idx.push_back(j);
        }
        const std::int64_t n = static_cast<std::int64_t>(valid_idx.size());
        const std::int64_t budget = static_cast<std::int64_t>(
            std::floor(cfg.phi * static_cast<double>(n)));
        out.budget[static_cast<std::size_t>(sample)] = budget;
        if (budget == 0 || cfg.strategy == MaskStrategy::kNone) continue;

        if (cfg.strategy == MaskStrategy::kRandom) {
            rng.shuffle(valid_idx);
            for (std::int64_t i = 0; i < budget; ++i) {
                out.masked.set(sample, valid_idx[static_cast<std::size_t>(i)], true);
            }
            continue;
        }

        const double* sigma = scores.sigma.data() + sample * n_max;
        const std::int64_t n_seed =
            std::max<std::int64_t>(1, round_half_up(cfg.zeta * static_cast<double>(budget)));
        const std::int64_t radius =
            static_cast<std::int64_t>(std::floor(cfg.gamma * static_cast<double>(n)));
        auto order = rank_by_score(sigma, valid_idx);
        auto& seeds = out.seeds[static_cast<std::size_t>(sample)];
        seeds.assign(order.begin(), order.begin() + std::min<std::int64_t>(n_seed, n));

        std::int64_t used = 0;
        auto try_mask = [&](std::int64_t j) {
            if (j < 0 || j >= n_max) return;
            if (!scores.valid.at(sample, j)) return;
            if (out.masked.at(sample, j)) return;
            if (used >= budget) return;
            out.masked.set(sample, j, true);
            ++used;
        };
        for (std::int64_t seed : seeds) {
            if (used >= budget) break;
            for (std::int64_t dist = 0; dist <= radius && used < budget; ++dist) {
                try_mask(seed - dist);
                if (dist > 0) try_mask(seed + dist);
            }
        }
    }
    return out;
}

SequenceBatch apply_mask(const SequenceBatch& batch, const RegionalMask& mask) {
    if (mask.masked.shape != Shape{batch.batch_size(), batch.max_len()}) {
        throw ContractError("apply_mask: mask " + shape_str(mask.masked.shape) +
                            " was not built for batch " + shape_str(batch.values.shape()));
    }
    SequenceBatch out = batch;
    out.values = batch.values.detach();
    const std::int64_t b = batch.batch_size(), n = batch.max_len(), d = batch.feature_dim();
    for (std::int64_t i = 0; i < b; ++i) {
        for (std::int64_t j = 0; j < n; ++j) {
            if (!mask.masked.at(i, j)) continue;
            double* row = out.values.data() + (i * n + j) * d;
            std::fill(row, row + d, 0.0);
        }
    }
    return out;
}

} // namespace starformer
