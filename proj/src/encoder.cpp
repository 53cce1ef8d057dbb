#include "starformer/encoder.hpp"

#include <cmath>

namespace starformer {

Activation activation_from_string(const std::string& name) {
    if (name == "relu") return Activation::kRelu;
    if (name == "gelu") return Activation::kGelu;
    throw ConfigError("model.activation: unknown activation '" + name + "'");
}

std::string to_string(Activation a) { return a == Activation::kRelu ? "relu" : "gelu"; }

ModelConfig ModelConfig::resolved() const {
    ModelConfig r = *this;
    if (r.ff_dim == 0) r.ff_dim = 4 * r.model_dim;
    if (r.head_hidden == 0) r.head_hidden = r.model_dim;
    r.validate();
    return r;
}

void ModelConfig::validate() const {
    auto positive = [](std::int64_t v, const char* field) {
        if (v <= 0) {
            throw ConfigError(std::string("model.") + field + ": must be positive, got " +
                              std::to_string(v));
        }
    };
    if (num_layers < 0) {
        throw ConfigError("model.num_layers: must be non-negative, got " +
                          std::to_string(num_layers));
    }
    positive(model_dim, "model_dim");
    positive(num_heads, "num_heads");
    positive(ff_dim, "ff_dim");
    positive(head_hidden, "head_hidden");
    positive(input_dim, "input_dim");
    positive(max_len, "max_len");
    if (num_classes < 2) {
        throw ConfigError("model.num_classes: need at least 2, got " +
                          std::to_string(num_classes));
    }
    if (model_dim % num_heads != 0) {
        throw ConfigError("model.num_heads: " + std::to_string(num_heads) +
                          " does not divide model_dim " + std::to_string(model_dim));
    }
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
        throw ConfigError("model.dropout_rate: " + std::to_string(dropout_rate) +
                          " outside [0, 1)");
    }
    if (binary_head && num_classes != 2) {
        throw ConfigError("model.binary_head: requires num_classes == 2");
    }
}

void SequenceBatch::validate() const {
    if (values.rank() != 3) {
        throw ContractError("batch.values must be [B, N, D], got " + shape_str(values.shape()));
    }
    const std::int64_t b = batch_size(), n = max_len();
    if (valid.shape != Shape{b, n} || static_cast<std::int64_t>(lengths.size()) != b ||
        static_cast<std::int64_t>(labels.size()) != b) {
        throw ContractError("batch: inconsistent extents across values/valid/lengths/labels");
    }
    for (std::int64_t i = 0; i < b; ++i) {
        if (lengths[static_cast<std::size_t>(i)] < 1 || lengths[static_cast<std::size_t>(i)] > n) {
            throw ContractError("batch: length " +
                                std::to_string(lengths[static_cast<std::size_t>(i)]) +
                                " outside [1, " + std::to_string(n) + "]");
        }
        for (std::int64_t j = 0; j < n; ++j) {
            if (valid.at(i, j) != (j < lengths[static_cast<std::size_t>(i)])) {
                throw ContractError("batch: valid mask disagrees with lengths at sample " +
                                    std::to_string(i));
            }
        }
    }
}

namespace {

Tensor xavier(Rng& rng, std::int64_t fan_in, std::int64_t fan_out) {
    Tensor t(Shape{fan_in, fan_out});
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-limit, limit);
    return t;
}

Tensor activate(const Tensor& x, Activation a) {
    return a == Activation::kRelu ? ops::relu(x) : ops::gelu(x);
}

} // namespace

ModelParams ModelParams::init(const ModelConfig& cfg, std::uint64_t seed) {
    const ModelConfig c = cfg.resolved();
    Rng rng(derive_seed(seed, 0x494e4954)); // init stream
    ModelParams p;
    p.cls = Tensor(Shape{c.model_dim});
    for (std::int64_t i = 0; i < c.model_dim; ++i) p.cls[i] = rng.normal(0.0, 0.02);
    p.embed_w = xavier(rng, c.input_dim, c.model_dim);
    p.embed_b = Tensor::zeros({c.model_dim});
    p.blocks.resize(static_cast<std::size_t>(c.num_layers));
    for (auto& blk : p.blocks) {
        blk.wq = xavier(rng, c.model_dim, c.model_dim);
        blk.bq = Tensor::zeros({c.model_dim});
        blk.wk = xavier(rng, c.model_dim, c.model_dim);
        blk.bk = Tensor::zeros({c.model_dim});
        blk.wv = xavier(rng, c.model_dim, c.model_dim);
        blk.bv = Tensor::zeros({c.model_dim});
        blk.wo = xavier(rng, c.model_dim, c.model_dim);
        blk.bo = Tensor::zeros({c.model_dim});
        blk.ln1_gain = Tensor::ones({c.model_dim});
        blk.ln1_bias = Tensor::zeros({c.model_dim});
        blk.ff1_w = xavier(rng, c.model_dim, c.ff_dim);
        blk.ff1_b = Tensor::zeros({c.ff_dim});
        blk.ff2_w = xavier(rng, c.ff_dim, c.model_dim);
        blk.ff2_b = Tensor::zeros({c.model_dim});
        blk.ln2_gain = Tensor::ones({c.model_dim});
        blk.ln2_bias = Tensor::zeros({c.model_dim});
    }
    p.head.w1 = xavier(rng, c.model_dim, c.head_hidden);
    p.head.b1 = Tensor::zeros({c.head_hidden});
    p.head.w2 = xavier(rng, c.head_hidden, c.logit_dim());
    p.head.b2 = Tensor::zeros({c.logit_dim()});
    p.for_each([](const std::string&, Tensor& t) { t.set_requires_grad(true); });
    return p;
}

void ModelParams::for_each(const std::function<void(const std::string&, Tensor&)>& fn) {
    fn("embed.cls", cls);
    fn("embed.w", embed_w);
    fn("embed.b", embed_b);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const std::string pfx = "block" + std::to_string(i) + ".";
        auto& b = blocks[i];
        fn(pfx + "wq", b.wq);
        fn(pfx + "bq", b.bq);
        fn(pfx + "wk", b.wk);
        fn(pfx + "bk", b.bk);
        fn(pfx + "wv", b.wv);
        fn(pfx + "bv", b.bv);
        fn(pfx + "wo", b.wo);
        fn(pfx + "bo", b.bo);
        fn(pfx + "ln1.gain", b.ln1_gain);
        fn(pfx + "ln1.bias", b.ln1_bias);
        fn(pfx + "ff1.w", b.ff1_w);
        fn(pfx + "ff1.b", b.ff1_b);
        fn(pfx + "ff2.w", b.ff2_w);
        fn(pfx + "ff2.b", b.ff2_b);
        fn(pfx + "ln2.gain", b.ln2_gain);
        fn(pfx + "ln2.bias", b.ln2_bias);
    }
    fn("head.w1", head.w1);
    fn("head.b1", head.b1);
    fn("head.w2", head.w2);
    fn("head.b2", head.b2);
}

void ModelParams::for_each(
    const std::function<void(const std::string&, const Tensor&)>& fn) const {
    const_cast<ModelParams*>(this)->for_each(
        [&fn](const std::string& name, Tensor& t) { fn(name, t); });
}

std::int64_t ModelParams::parameter_count() const {
    std::int64_t n = 0;
    for_each([&n](const std::string&, const Tensor& t) { n += t.numel(); });
    return n;
}

Tensor sinusoidal_position_encoding(std::int64_t length, std::int64_t dim) {
    Tensor pe(Shape{length, dim});
    for (std::int64_t pos = 0; pos < length; ++pos) {
        for (std::int64_t c = 0; c < dim; ++c) {
            const double freq_exp = static_cast<double>(2 * (c / 2)) / static_cast<double>(dim);
            const double angle = static_cast<double>(pos) / std::pow(10000.0, freq_exp);
            pe[pos * dim + c] = (c % 2 == 0) ? std::sin(angle) : std::cos(angle);
        }
    }
    return pe;
}

Tensor embed_inputs(const SequenceBatch& batch, const ModelParams& params,
                    const ModelConfig& cfg) {
    if (batch.feature_dim() != cfg.input_dim) {
        throw ShapeError("embed_inputs: batch features " + std::to_string(batch.feature_dim()) +
                         " vs model.input_dim " + std::to_string(cfg.input_dim));
    }
    if (batch.max_len() > cfg.max_len) {
        throw ConfigError("embed_inputs: sequence length " + std::to_string(batch.max_len()) +
                          " exceeds model.max_len " + std::to_string(cfg.max_len));
    }
    const std::int64_t b = batch.batch_size(), n = batch.max_len(), f = cfg.model_dim;
    Tensor projected = ops::add(ops::matmul(batch.values, params.embed_w), params.embed_b);
    Tensor with_pos = ops::add(projected, sinusoidal_position_encoding(n, f));
    Tensor cls_token = ops::broadcast_to(ops::reshape(params.cls, {1, 1, f}), {b, 1, f});
    return ops::concat({cls_token, with_pos}, 1);
}

std::pair<Tensor, Tensor> multi_head_attention(const Tensor& h, const BoolMask& key_valid,
                                               const AttentionBlockParams& p,
                                               const ModelConfig& cfg) {
    const std::int64_t b = h.extent(0), t = h.extent(1), f = h.extent(2);
    if (key_valid.shape != Shape{b, t}) {
        throw ShapeError("attention: key mask " + shape_str(key_valid.shape) + " vs hidden " +
                         shape_str(h.shape()));
    }
    for (std::int64_t i = 0; i < b; ++i) {
        if (!key_valid.at(i, 0)) {
            throw ContractError("attention: classification token must be a valid key");
        }
    }
    const std::int64_t heads = cfg.num_heads, dh = f / heads;

    Tensor q = ops::add(ops::matmul(h, p.wq), p.bq);
    Tensor k = ops::add(ops::matmul(h, p.wk), p.bk);
    Tensor v = ops::add(ops::matmul(h, p.wv), p.bv);

    // [B, T, T] mask: valid queries attend over valid keys, padded queries
    // collapse onto the classification token
    BoolMask attn_mask(Shape{b, t, t});
    for (std::int64_t i = 0; i < b; ++i) {
        for (std::int64_t qx = 0; qx < t; ++qx) {
            const bool query_ok = key_valid.at(i, qx);
            for (std::int64_t kx = 0; kx < t; ++kx) {
                attn_mask.set((i * t + qx) * t + kx,
                              query_ok ? key_valid.at(i, kx) : (kx == 0));
            }
        }
    }

    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> contexts;
    contexts.reserve(static_cast<std::size_t>(heads));
    Tensor averaged(Shape{b, t, t});
    for (std::int64_t head = 0; head < heads; ++head) {
        // scaling the query instead of the score matrix keeps the large
        // [B, T, T] intermediates down to the scores and the softmax output
        Tensor qh = ops::scale(ops::slice(q, 2, head * dh, dh), scale);
        Tensor kh = ops::slice(k, 2, head * dh, dh);
        Tensor vh = ops::slice(v, 2, head * dh, dh);
        Tensor scores = ops::matmul(qh, ops::transpose(kh, 1, 2));
        Tensor attn = ops::softmax_lastdim(scores, &attn_mask);
        contexts.push_back(ops::matmul(attn, vh));
        for (std::int64_t i = 0; i < averaged.numel(); ++i) averaged[i] += attn[i];
    }
    for (std::int64_t i = 0; i < averaged.numel(); ++i) {
        averaged[i] /= static_cast<double>(heads);
    }
    Tensor merged = heads == 1 ? contexts.front() : ops::concat(contexts, 2);
    Tensor out = ops::add(ops::matmul(merged, p.wo), p.bo);
    return {out, averaged};
}

EncoderOutput encoder_forward(const SequenceBatch& batch, const ModelParams& params,
                              const ModelConfig& cfg, bool train, Rng* rng) {
    batch.validate();
    const std::int64_t b = batch.batch_size(), n = batch.max_len(), t = n + 1;
    const bool use_dropout = train && cfg.dropout_rate > 0.0;
    if (use_dropout && rng == nullptr) {
        throw ContractError("encoder_forward: dropout requires an rng in train mode");
    }

    BoolMask key_valid(Shape{b, t});
    for (std::int64_t i = 0; i < b; ++i) {
        key_valid.set(i, 0, true);
        for (std::int64_t j = 0; j < n; ++j) key_valid.set(i, j + 1, batch.valid.at(i, j));
    }

    Tensor h = embed_inputs(batch, params, cfg);
    Tensor stack(Shape{cfg.num_layers, b, t, t});
    for (std::int64_t layer = 0; layer < cfg.num_layers; ++layer) {
        const auto& blk = params.blocks[static_cast<std::size_t>(layer)];
        auto [attn_out, attn_avg] = multi_head_attention(h, key_valid, blk, cfg);
        if (use_dropout) attn_out = ops::dropout(attn_out, cfg.dropout_rate, *rng);
        h = ops::layer_norm(ops::add(h, attn_out), blk.ln1_gain, blk.ln1_bias);

        Tensor ff = ops::add(ops::matmul(h, blk.ff1_w), blk.ff1_b);
        ff = activate(ff, cfg.activation);
        ff = ops::add(ops::matmul(ff, blk.ff2_w), blk.ff2_b);
        if (use_dropout) ff = ops::dropout(ff, cfg.dropout_rate, *rng);
        h = ops::layer_norm(ops::add(h, ff), blk.ln2_gain, blk.ln2_bias);

        std::copy(attn_avg.data(), attn_avg.data() + attn_avg.numel(),
                  stack.data() + layer * b * t * t);
    }
    return {h, AttentionStack{stack}};
}

Tensor classify_head(const Tensor& hidden, const ModelParams& params, const ModelConfig& cfg) {
    const std::int64_t b = hidden.extent(0), f = hidden.extent(2);
    Tensor cls_state = ops::reshape(ops::slice(hidden, 1, 0, 1), {b, f});
    Tensor mid = activate(ops::add(ops::matmul(cls_state, params.head.w1), params.head.b1),
                          cfg.activation);
    return ops::add(ops::matmul(mid, params.head.w2), params.head.b2);
}

} // namespace starformer
