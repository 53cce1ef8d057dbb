#include "starformer/trainer.hpp"

#include <cmath>

namespace starformer {

void TrainConfig::validate() const {
    if (epochs < 0) throw ConfigError("train.epochs: must be non-negative");
    if (batch_size < 1) throw ConfigError("train.batch_size: must be positive");
    if (learning_rate < 0.0) throw ConfigError("train.learning_rate: must be non-negative");
    if (grad_clip && *grad_clip <= 0.0) {
        throw ConfigError("train.grad_clip: must be positive when set");
    }
    if (loss.lambda_cl > 0.0 && batch_size < 2) {
        throw ConfigError("train.batch_size: contrastive training needs at least 2 samples "
                          "per batch when loss.lambda_cl > 0");
    }
    mask.validate();
    loss.validate();
    (void)model.resolved(); // materializes derived dims, then validates
}

Adam::Adam(ModelParams& params) {
    params.for_each([this](const std::string&, Tensor& t) {
        m_.emplace_back(static_cast<std::size_t>(t.numel()), 0.0);
        v_.emplace_back(static_cast<std::size_t>(t.numel()), 0.0);
    });
}

double Adam::step(ModelParams& params, double lr, double beta1, double beta2, double eps,
                  std::optional<double> clip) {
    ++t_;
    double norm_sq = 0.0;
    params.for_each([&norm_sq](const std::string&, Tensor& t) {
        if (!t.has_grad()) return;
        for (double g : t.grad()) norm_sq += g * g;
    });
    const double norm = std::sqrt(norm_sq);
    const double rescale = (clip && norm > *clip) ? *clip / norm : 1.0;

    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
    std::size_t slot = 0;
    params.for_each([&](const std::string&, Tensor& t) {
        auto& m = m_[slot];
        auto& v = v_[slot];
        ++slot;
        if (!t.has_grad()) return;
        const auto& grad = t.grad();
        for (std::size_t i = 0; i < grad.size(); ++i) {
            const double g = grad[i] * rescale;
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            t[static_cast<std::int64_t>(i)] -=
                lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
        }
        t.zero_grad();
    });
    return norm;
}

TrainerState TrainerState::init(const ModelConfig& cfg, std::uint64_t seed) {
    TrainerState state;
    state.model = cfg.resolved();
    state.params = ModelParams::init(state.model, seed);
    state.opt = Adam(state.params);
    return state;
}

ModelParams clone_params(const ModelParams& params) {
    ModelParams copy = params;
    copy.for_each([](const std::string&, Tensor& t) {
        t = t.detach().set_requires_grad(true);
    });
    return copy;
}

StepReport train_step(const SequenceBatch& batch, TrainerState& state, const TrainConfig& cfg,
                      std::int64_t global_step) {
    batch.validate();
    const ModelConfig& mcfg = state.model;
    StepReport report;
    try {
        Tape tape;
        TapeScope scope(tape);

        // both towers share one dropout stream seed so an empty mask yields a
        // bit-identical masked pass
        const std::uint64_t dropout_seed =
            derive_seed(cfg.seed, 0xD407, static_cast<std::uint64_t>(global_step));

        Rng rng_unmasked(dropout_seed);
        report.version_unmasked = state.param_version;
        EncoderOutput unmasked =
            encoder_forward(batch, state.params, mcfg, /*train=*/true, &rng_unmasked);
        Tensor logits = classify_head(unmasked.hidden, state.params, mcfg);
        Tensor ce = classification_loss(logits, batch.labels, mcfg.binary_head);
        report.hidden_unmasked = unmasked.hidden.detach();

        // contrastive terms need a pool of negatives; a trailing 1-sample
        // batch falls back to the classification loss alone
        const bool contrastive = cfg.loss.lambda_cl > 0.0 &&
                                 cfg.mask.strategy != MaskStrategy::kNone &&
                                 batch.batch_size() >= 2;
        Tensor total = ce;
        report.version_masked = report.version_unmasked;
        if (contrastive) {
            Tensor rolled = aggregate_attention_rollout(unmasked.attn, batch.valid);
            ImportanceScores scores = attention_scores(rolled, batch.valid);
            RegionalMask mask = build_regional_mask(
                scores, cfg.mask,
                derive_seed(cfg.seed, 0x4D61, static_cast<std::uint64_t>(global_step)));
            std::int64_t valid_total = 0;
            for (auto n : batch.lengths) valid_total += n;
            report.mask.total_masked = mask.masked.count();
            report.mask.masked_fraction =
                static_cast<double>(report.mask.total_masked) / static_cast<double>(valid_total);

            SequenceBatch masked_batch = apply_mask(batch, mask);
            Rng rng_masked(dropout_seed);
            report.version_masked = state.param_version;
            EncoderOutput masked =
                encoder_forward(masked_batch, state.params, mcfg, /*train=*/true, &rng_masked);
            report.hidden_masked = masked.hidden.detach();

            Tensor pooled_u = pooled_embedding(unmasked.hidden, batch.valid);
            Tensor pooled_v = pooled_embedding(masked.hidden, batch.valid);
            report.pooled_unmasked = pooled_u.detach();
            report.pooled_masked = pooled_v.detach();

            LatentPair pair{pooled_u, pooled_v, batch.labels};
            Tensor bw = batchwise_loss(pair, cfg.loss);
            Tensor cw = classwise_loss(pair, cfg.loss);
            report.loss_bw = bw.item();
            report.loss_cw = cw.item();
            total = total_loss(ce, fused_contrastive_loss(bw, cw, cfg.loss), cfg.loss);
        }

        report.loss_ce = ce.item();
        report.loss_total = total.item();
        if (!std::isfinite(report.loss_total)) {
            throw NumericError("non-finite total loss");
        }

        state.params.for_each([](const std::string&, Tensor& t) { t.zero_grad(); });
        tape.backward(total);
        state.opt.step(state.params, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2,
                       cfg.adam_eps, cfg.grad_clip);
        ++state.param_version;
    } catch (const NumericError& e) {
        throw NumericError("training diverged at step " + std::to_string(global_step) + ": " +
                           e.what());
    }
    return report;
}

TrainResult train_loop(const Dataset& train, const Dataset& val, const TrainConfig& cfg) {
    cfg.validate();
    if (train.size() == 0) throw DataError("train_loop: empty training split");

    TrainResult result;
    result.state = TrainerState::init(cfg.model, cfg.seed);

    double best_acc = -1.0;
    std::int64_t global_step = 0;
    for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        BatchIterator batches(train, cfg.batch_size,
                              derive_seed(cfg.seed, 0xE70C, static_cast<std::uint64_t>(epoch)));
        double loss_sum = 0.0;
        std::int64_t seen = 0;
        while (auto batch = batches.next()) {
            StepReport report = train_step(*batch, result.state, cfg, global_step++);
            loss_sum += report.loss_total * static_cast<double>(batch->batch_size());
            seen += batch->batch_size();
        }
        EpochRecord record;
        record.epoch = epoch;
        record.train_loss = loss_sum / static_cast<double>(seen);
        if (val.size() > 0) {
            record.has_val = true;
            record.val = evaluate(val, result.state);
            if (record.val.accuracy > best_acc) {
                best_acc = record.val.accuracy;
                result.best_params = clone_params(result.state.params);
                result.best_epoch = epoch;
            }
        }
        result.history.push_back(std::move(record));
    }
    if (result.best_epoch < 0) result.best_params = clone_params(result.state.params);
    return result;
}

Metrics evaluate(const Dataset& ds, const TrainerState& state, std::int64_t batch_size) {
    ds.validate();
    const std::int64_t classes = state.model.num_classes;
    std::vector<std::int64_t> confusion(static_cast<std::size_t>(classes * classes), 0);
    BatchIterator batches(ds, batch_size);
    while (auto batch = batches.next()) {
        EncoderOutput out = encoder_forward(*batch, state.params, state.model, /*train=*/false);
        Tensor logits = classify_head(out.hidden, state.params, state.model);
        for (std::int64_t i = 0; i < batch->batch_size(); ++i) {
            std::int64_t predicted = 0;
            if (state.model.binary_head) {
                predicted = logits[i] > 0.0 ? 1 : 0;
            } else {
                for (std::int64_t c = 1; c < classes; ++c) {
                    if (logits[i * classes + c] > logits[i * classes + predicted]) predicted = c;
                }
            }
            const std::int64_t truth = batch->labels[static_cast<std::size_t>(i)];
            ++confusion[static_cast<std::size_t>(truth * classes + predicted)];
        }
    }
    return metrics_from_confusion(confusion, classes);
}

} // namespace starformer
