#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "starformer/ops.hpp"

namespace starformer {

enum class Activation { kRelu, kGelu };

Activation activation_from_string(const std::string& name);
std::string to_string(Activation a);

// Encoder-only transformer hyperparameters. ff_dim and head_hidden of 0 mean
// "derive from model_dim" (4x and 1x respectively); resolved() materializes
// them.
struct ModelConfig {
    std::int64_t num_layers = 2;
    std::int64_t model_dim = 32;
    std::int64_t num_heads = 4;
    std::int64_t ff_dim = 0;
    std::int64_t head_hidden = 0;
    std::int64_t num_classes = 2;
    std::int64_t input_dim = 1;
    std::int64_t max_len = 256;
    double dropout_rate = 0.1;
    Activation activation = Activation::kGelu;
    bool binary_head = false; // emit one logit and train with BCE (requires num_classes == 2)

    ModelConfig resolved() const;
    void validate() const; // throws ConfigError naming the offending field

    std::int64_t head_dim() const { return model_dim / num_heads; }
    std::int64_t logit_dim() const { return binary_head ? 1 : num_classes; }
};

// Padded mini-batch of variable-length multivariate sequences. Padding is
// contiguous at the tail: valid[b, j] holds exactly for j < lengths[b].
struct SequenceBatch {
    Tensor values;                    // [B, N, D], zeros on padding
    BoolMask valid;                   // [B, N]
    std::vector<std::int64_t> lengths;
    std::vector<std::int64_t> labels; // in [0, C)
    std::vector<std::string> ids;     // carried through for exports

    std::int64_t batch_size() const { return values.extent(0); }
    std::int64_t max_len() const { return values.extent(1); }
    std::int64_t feature_dim() const { return values.extent(2); }

    void validate() const;
};

// Head-averaged attention per layer, collected during the unmasked pass.
// Token 0 is the classification token, so extents are (N+1, N+1).
struct AttentionStack {
    Tensor weights; // [L, B, T, T], value-only (never on a tape)

    std::int64_t layers() const { return weights.extent(0); }
    std::int64_t batch() const { return weights.extent(1); }
    std::int64_t tokens() const { return weights.extent(2); }
    double at(std::int64_t l, std::int64_t b, std::int64_t q, std::int64_t k) const {
        const std::int64_t t = tokens();
        return weights[((l * batch() + b) * t + q) * t + k];
    }
};

struct AttentionBlockParams {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln1_gain, ln1_bias;
    Tensor ff1_w, ff1_b, ff2_w, ff2_b;
    Tensor ln2_gain, ln2_bias;
};

struct HeadParams {
    Tensor w1, b1, w2, b2;
};

// All trainable tensors of the two-tower model (one shared set).
struct ModelParams {
    Tensor cls;       // [F]
    Tensor embed_w;   // [D, F]
    Tensor embed_b;   // [F]
    std::vector<AttentionBlockParams> blocks;
    HeadParams head;

    static ModelParams init(const ModelConfig& cfg, std::uint64_t seed);

    // Visits every trainable tensor in a fixed order with a stable name.
    void for_each(const std::function<void(const std::string&, Tensor&)>& fn);
    void for_each(const std::function<void(const std::string&, const Tensor&)>& fn) const;
    std::int64_t parameter_count() const;
};

struct EncoderOutput {
    Tensor hidden;       // [B, N+1, F]
    AttentionStack attn; // empty tensor when num_layers == 0
};

// Fixed sinusoidal position encoding for positions 0..length-1.
Tensor sinusoidal_position_encoding(std::int64_t length, std::int64_t dim);

// Projects features, adds position encodings, and prepends the learned
// classification token at index 0.
Tensor embed_inputs(const SequenceBatch& batch, const ModelParams& params, const ModelConfig& cfg);

// Scaled dot-product attention over valid keys. Returns the block output and
// the head-averaged attention matrix (detached). Queries at padded positions
// attend only to the classification token.
std::pair<Tensor, Tensor> multi_head_attention(const Tensor& h, const BoolMask& key_valid,
                                               const AttentionBlockParams& p,
                                               const ModelConfig& cfg);

// Full encoder: embedding followed by num_layers blocks of
// (attention -> residual + norm -> feed-forward -> residual + norm).
// The same function serves both towers; `rng` drives dropout and is only
// consulted when `train` is set and dropout_rate > 0.
EncoderOutput encoder_forward(const SequenceBatch& batch, const ModelParams& params,
                              const ModelConfig& cfg, bool train = false, Rng* rng = nullptr);

// One-hidden-layer MLP on the classification token's final hidden state.
Tensor classify_head(const Tensor& hidden, const ModelParams& params, const ModelConfig& cfg);

} // namespace starformer
