#include <doctest.h>

#include <cmath>

#include "starformer/encoder.hpp"
#include "starformer/grad_check.hpp"

using namespace starformer;

namespace {

SequenceBatch make_batch(Rng& rng, std::int64_t b, std::int64_t n, std::int64_t d,
                         std::vector<std::int64_t> lengths, std::int64_t classes = 2) {
    SequenceBatch batch;
    batch.values = Tensor(Shape{b, n, d});
    batch.valid = BoolMask(Shape{b, n});
    batch.lengths = std::move(lengths);
    for (std::int64_t i = 0; i < b; ++i) {
        batch.labels.push_back(rng.index(classes));
        batch.ids.push_back("s" + std::to_string(i));
        for (std::int64_t j = 0; j < n; ++j) {
            const bool ok = j < batch.lengths[static_cast<std::size_t>(i)];
            batch.valid.set(i, j, ok);
            for (std::int64_t k = 0; k < d; ++k) {
                batch.values[(i * n + j) * d + k] = ok ? rng.uniform(-1, 1) : 0.0;
            }
        }
    }
    return batch;
}

// ----------------------------------------------------------------------------
// Independent scripted forward pass for a one-layer, one-head model, written
// with plain loops over std::vector<double>. Used as the reference trace.
// ----------------------------------------------------------------------------
struct ScriptedTiny {
    std::int64_t n = 2, d = 1, f = 2, ff = 4;
    std::vector<double> cls, embed_w, embed_b;
    std::vector<double> wq, bq, wk, bk, wv, bv, wo, bo;
    std::vector<double> ln1_g, ln1_b, ln2_g, ln2_b;
    std::vector<double> ff1_w, ff1_b, ff2_w, ff2_b;

    static std::vector<double> mat_vec(const std::vector<double>& m, const std::vector<double>& x,
                                       std::int64_t rows, std::int64_t cols) {
        // x[rows] * m[rows, cols] -> [cols]
        std::vector<double> out(static_cast<std::size_t>(cols), 0.0);
        for (std::int64_t r = 0; r < rows; ++r) {
            for (std::int64_t c = 0; c < cols; ++c) {
                out[static_cast<std::size_t>(c)] +=
                    x[static_cast<std::size_t>(r)] * m[static_cast<std::size_t>(r * cols + c)];
            }
        }
        return out;
    }

    static std::vector<double> layer_norm_row(const std::vector<double>& x,
                                              const std::vector<double>& g,
                                              const std::vector<double>& b) {
        const double eps = 1e-5;
        double mean = 0.0;
        for (double v : x) mean += v;
        mean /= static_cast<double>(x.size());
        double var = 0.0;
        for (double v : x) var += (v - mean) * (v - mean);
        var /= static_cast<double>(x.size());
        std::vector<double> out(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) {
            out[i] = g[i] * (x[i] - mean) / std::sqrt(var + eps) + b[i];
        }
        return out;
    }

    // one sample, all timesteps valid; returns hidden states [n+1][f]
    std::vector<std::vector<double>> forward(const std::vector<std::vector<double>>& x) const {
        const std::int64_t t = n + 1;
        std::vector<std::vector<double>> h(static_cast<std::size_t>(t));
        h[0] = cls;
        for (std::int64_t j = 0; j < n; ++j) {
            auto e = mat_vec(embed_w, x[static_cast<std::size_t>(j)], d, f);
            for (std::int64_t c = 0; c < f; ++c) {
                const double freq_exp = static_cast<double>(2 * (c / 2)) / static_cast<double>(f);
                const double angle = static_cast<double>(j) / std::pow(10000.0, freq_exp);
                e[static_cast<std::size_t>(c)] += embed_b[static_cast<std::size_t>(c)] +
                                                  ((c % 2 == 0) ? std::sin(angle) : std::cos(angle));
            }
            h[static_cast<std::size_t>(j + 1)] = e;
        }

        std::vector<std::vector<double>> q(h.size()), k(h.size()), v(h.size());
        for (std::size_t i = 0; i < h.size(); ++i) {
            q[i] = mat_vec(wq, h[i], f, f);
            k[i] = mat_vec(wk, h[i], f, f);
            v[i] = mat_vec(wv, h[i], f, f);
            for (std::int64_t c = 0; c < f; ++c) {
                q[i][static_cast<std::size_t>(c)] += bq[static_cast<std::size_t>(c)];
                k[i][static_cast<std::size_t>(c)] += bk[static_cast<std::size_t>(c)];
                v[i][static_cast<std::size_t>(c)] += bv[static_cast<std::size_t>(c)];
            }
        }
        const double scale = 1.0 / std::sqrt(static_cast<double>(f));
        std::vector<std::vector<double>> after(h.size());
        for (std::size_t i = 0; i < h.size(); ++i) {
            std::vector<double> scores(h.size());
            double mx = -1e300;
            for (std::size_t jj = 0; jj < h.size(); ++jj) {
                double s = 0.0;
                for (std::int64_t c = 0; c < f; ++c) {
                    s += q[i][static_cast<std::size_t>(c)] * k[jj][static_cast<std::size_t>(c)];
                }
                scores[jj] = s * scale;
                mx = std::max(mx, scores[jj]);
            }
            double denom = 0.0;
            for (auto& s : scores) {
                s = std::exp(s - mx);
                denom += s;
            }
            std::vector<double> ctx(static_cast<std::size_t>(f), 0.0);
            for (std::size_t jj = 0; jj < h.size(); ++jj) {
                const double a = scores[jj] / denom;
                for (std::int64_t c = 0; c < f; ++c) {
                    ctx[static_cast<std::size_t>(c)] += a * v[jj][static_cast<std::size_t>(c)];
                }
            }
            auto o = mat_vec(wo, ctx, f, f);
            std::vector<double> res(static_cast<std::size_t>(f));
            for (std::int64_t c = 0; c < f; ++c) {
                res[static_cast<std::size_t>(c)] =
                    h[i][static_cast<std::size_t>(c)] + o[static_cast<std::size_t>(c)] +
                    bo[static_cast<std::size_t>(c)];
            }
            after[i] = layer_norm_row(res, ln1_g, ln1_b);
        }
        for (std::size_t i = 0; i < after.size(); ++i) {
            auto mid = mat_vec(ff1_w, after[i], f, ff);
            for (std::int64_t c = 0; c < ff; ++c) {
                const double z = mid[static_cast<std::size_t>(c)] + ff1_b[static_cast<std::size_t>(c)];
                mid[static_cast<std::size_t>(c)] = 0.5 * z * (1.0 + std::erf(z / std::sqrt(2.0)));
            }
            auto out = mat_vec(ff2_w, mid, ff, f);
            std::vector<double> res(static_cast<std::size_t>(f));
            for (std::int64_t c = 0; c < f; ++c) {
                res[static_cast<std::size_t>(c)] = after[i][static_cast<std::size_t>(c)] +
                                                   out[static_cast<std::size_t>(c)] +
                                                   ff2_b[static_cast<std::size_t>(c)];
            }
            after[i] = layer_norm_row(res, ln2_g, ln2_b);
        }
        return after;
    }
};

} // namespace

TEST_SUITE_BEGIN("encoder");

TEST_CASE("model config validation") {
    ModelConfig cfg;
    cfg.model_dim = 8;
    cfg.num_heads = 3;
    CHECK_THROWS_AS(cfg.resolved(), ConfigError);
    cfg.num_heads = 2;
    ModelConfig r = cfg.resolved();
    CHECK(r.ff_dim == 32);
    CHECK(r.head_hidden == 8);
    cfg.num_classes = 1;
    CHECK_THROWS_AS(cfg.resolved(), ConfigError);
}

TEST_CASE("embed_inputs shape and position encoding") {
    Rng rng(3);
    ModelConfig cfg;
    cfg.num_layers = 1;
    cfg.model_dim = 8;
    cfg.num_heads = 2;
    cfg.input_dim = 2;
    cfg.max_len = 16;
    cfg = cfg.resolved();
    ModelParams params = ModelParams::init(cfg, 1);

    SequenceBatch batch = make_batch(rng, 3, 5, 2, {5, 4, 2});
    Tensor e = embed_inputs(batch, params, cfg);
    CHECK(e.shape() == Shape{3, 6, 8});

    // zero inputs + zero projection leave exactly the position encoding
    SequenceBatch zeros = make_batch(rng, 1, 4, 2, {4});
    for (std::int64_t i = 0; i < zeros.values.numel(); ++i) zeros.values[i] = 0.0;
    ModelParams zp = ModelParams::init(cfg, 1);
    for (std::int64_t i = 0; i < zp.embed_w.numel(); ++i) zp.embed_w[i] = 0.0;
    for (std::int64_t i = 0; i < zp.embed_b.numel(); ++i) zp.embed_b[i] = 0.0;
    Tensor e2 = embed_inputs(zeros, zp, cfg);
    Tensor pe = sinusoidal_position_encoding(4, 8);
    for (std::int64_t j = 0; j < 4; ++j) {
        for (std::int64_t c = 0; c < 8; ++c) {
            CHECK(e2[( (j + 1) ) * 8 + c] == pe[j * 8 + c]);
        }
    }

    CHECK(pe.at({0, 0}) == 0.0); // sin(0)
    CHECK(pe.at({0, 1}) == 1.0); // cos(0)

    SequenceBatch wrong = make_batch(rng, 1, 3, 4, {3});
    CHECK_THROWS_AS(embed_inputs(wrong, params, cfg), ShapeError);
}

TEST_CASE("attention with a single key is the identity distribution") {
    ModelConfig cfg;
    cfg.model_dim = 2;
    cfg.num_heads = 1;
    cfg.input_dim = 1;
    cfg = cfg.resolved();
    ModelParams params = ModelParams::init(cfg, 5);

    Tensor h(Shape{1, 1, 2}, {0.3, -0.7});
    BoolMask kv(Shape{1, 1});
    kv.set(0, true);
    auto [out, attn] = multi_head_attention(h, kv, params.blocks[0], cfg);
    CHECK(attn.shape() == Shape{1, 1, 1});
    CHECK(attn[0] == 1.0);
    CHECK(out.shape() == Shape{1, 1, 2});
}

TEST_CASE("attention ignores padded keys entirely") {
    Rng rng(9);
    ModelConfig cfg;
    cfg.model_dim = 4;
    cfg.num_heads = 2;
    cfg.input_dim = 1;
    cfg = cfg.resolved();
    ModelParams params = ModelParams::init(cfg, 6);

    Tensor h(Shape{1, 2, 4});
    for (std::int64_t i = 0; i < h.numel(); ++i) h[i] = rng.uniform(-1, 1);
    BoolMask kv(Shape{1, 2});
    kv.set(0, true); // first position valid (stands in for the class token)
    kv.set(1, false);
    auto [out, attn] = multi_head_attention(h, kv, params.blocks[0], cfg);
    (void)out;
    // every query row puts all mass on the single valid key
    CHECK(attn[0] == 1.0);
    CHECK(attn[1] == 0.0);
    CHECK(attn[2] == 1.0);
    CHECK(attn[3] == 0.0);
}

TEST_CASE("attention reproduces a hand softmax") {
    // one head, width-1 model: constant query 1, keys equal to the hidden
    // values, so pre-softmax scores are the hidden values themselves
    ModelConfig cfg;
    cfg.model_dim = 1;
    cfg.num_heads = 1;
    cfg.input_dim = 1;
    cfg = cfg.resolved();
    ModelParams params = ModelParams::init(cfg, 2);
    auto& blk = params.blocks[0];
    blk.wq[0] = 0.0;
    blk.bq[0] = 1.0;
    blk.wk[0] = 1.0;
    blk.bk[0] = 0.0;

    Tensor h(Shape{1, 2, 1}, {0.0, std::log(3.0)});
    BoolMask kv(Shape{1, 2}, true);
    auto [out, attn] = multi_head_attention(h, kv, blk, cfg);
    (void)out;
    CHECK(attn[0] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(attn[1] == doctest::Approx(0.75).epsilon(1e-12));
    CHECK(attn[2] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(attn[3] == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("zero-depth encoder returns the embedding") {
    Rng rng(4);
    ModelConfig cfg;
    cfg.num_layers = 0;
    cfg.model_dim = 4;
    cfg.num_heads = 2;
    cfg.input_dim = 2;
    cfg = cfg.resolved();
    ModelParams params = ModelParams::init(cfg, 9);
    SequenceBatch batch = make_batch(rng, 2, 3, 2, {3, 2});
    EncoderOutput out = encoder_forward(batch, params, cfg);
    Tensor e = embed_inputs(batch, params, cfg);
    CHECK(out.hidden.values() == e.values());
    CHECK(out.attn.layers() == 0);
    CHECK(out.attn.weights.numel() == 0);
}

TEST_CASE("batch order permutes outputs identically") {
    Rng rng(12);
    ModelConfig cfg;
    cfg.num_layers = 2;
    cfg.model_dim = 8;
    cfg.num_heads = 2;
    cfg.input_dim = 2;
    cfg.dropout_rate = 0.0;
    cfg = cfg.resolved();
    ModelParams params = ModelParams::init(cfg, 20);
    SequenceBatch batch = make_batch(rng, 3, 4, 2, {4, 2, 3});

    SequenceBatch permuted;
    const std::vector<std::int64_t> perm{2, 0, 1};
    permuted.values = Tensor(batch.values.shape());
    permuted.valid = BoolMask(batch.valid.shape);
    for (std::int64_t i = 0; i < 3; ++i) {
        const std::int64_t src = perm[static_cast<std::size_t>(i)];
        permuted.lengths.push_back(batch.lengths[static_cast<std::size_t>(src)]);
        permuted.labels.push_back(batch.labels[static_cast<std::size_t>(src)]);
        permuted.ids.push_back(batch.ids[static_cast<std::size_t>(src)]);
        for (std::int64_t j = 0; j < 4; ++j) {
            permuted.valid.set(i, j, batch.valid.at(src, j));
            for (std::int64_t k = 0; k < 2; ++k) {
                permuted.values[(i * 4 + j) * 2 + k] = batch.values[(src * 4 + j) * 2 + k];
            }
        }
    }

    EncoderOutput a = encoder_forward(batch, params, cfg);
    EncoderOutput b = encoder_forward(permuted, params, cfg);
    const std::int64_t row = 5 * 8; // (N+1) * F
    for (std::int64_t i = 0; i < 3; ++i) {
        const std::int64_t src = perm[static_cast<std::size_t>(i)];
        for (std::int64_t c = 0; c < row; ++c) {
            CHECK(b.hidden[i * row + c] == a.hidden[src * row + c]);
        }
    }
}

TEST_CASE("scripted forward oracle matches the tiny model") {
    ModelConfig cfg;
    cfg.num_layers = 1;
    cfg.model_dim = 2;
    cfg.num_heads = 1;
    cfg.ff_dim = 4;
    cfg.input_dim = 1;
    cfg.max_len = 4;
    cfg.activation = Activation::kGelu;
    cfg = cfg.resolved();
    ModelParams params = ModelParams::init(cfg, 77);

    ScriptedTiny ref;
    auto grab = [](const Tensor& t) { return t.values(); };
    ref.cls = grab(params.cls);
    ref.embed_w = grab(params.embed_w);
    ref.embed_b = grab(params.embed_b);
    const auto& blk = params.blocks[0];
    ref.wq = grab(blk.wq);
    ref.bq = grab(blk.bq);
    ref.wk = grab(blk.wk);
    ref.bk = grab(blk.bk);
    ref.wv = grab(blk.wv);
    ref.bv = grab(blk.bv);
    ref.wo = grab(blk.wo);
    ref.bo = grab(blk.bo);
    ref.ln1_g = grab(blk.ln1_gain);
    ref.ln1_b = grab(blk.ln1_bias);
    ref.ff1_w = grab(blk.ff1_w);
    ref.ff1_b = grab(blk.ff1_b);
    ref.ff2_w = grab(blk.ff2_w);
    ref.ff2_b = grab(blk.ff2_b);
    ref.ln2_g = grab(blk.ln2_gain);
    ref.ln2_b = grab(blk.ln2_bias);

    SequenceBatch batch;
    batch.values = Tensor(Shape{1, 2, 1}, {0.4, -0.9});
    batch.valid = BoolMask(Shape{1, 2}, true);
    batch.lengths = {2};
    batch.labels = {0};
    batch.ids = {"a"};

    EncoderOutput out = encoder_forward(batch, params, cfg);
    auto want = ref.forward({{0.4}, {-0.9}});
    for (std::int64_t tok = 0; tok < 3; ++tok) {
        for (std::int64_t c = 0; c < 2; ++c) {
            CHECK(out.hidden[tok * 2 + c] ==
                  doctest::Approx(want[static_cast<std::size_t>(tok)][static_cast<std::size_t>(c)])
                      .epsilon(1e-10));
        }
    }
}

TEST_CASE("attention stack is row stochastic with zero mass on padding") {
    Rng rng(31);
    ModelConfig cfg;
    cfg.num_layers = 3;
    cfg.model_dim = 8;
    cfg.num_heads = 4;
    cfg.input_dim = 3;
    cfg = cfg.resolved();
    ModelParams params = ModelParams::init(cfg, 13);
    SequenceBatch batch = make_batch(rng, 4, 6, 3, {6, 3, 1, 5});
    EncoderOutput out = encoder_forward(batch, params, cfg);

    for (std::int64_t l = 0; l < 3; ++l) {
        for (std::int64_t b = 0; b < 4; ++b) {
            for (std::int64_t q = 0; q < 7; ++q) {
                double sum = 0.0;
                for (std::int64_t k = 0; k < 7; ++k) {
                    const double a = out.attn.at(l, b, q, k);
                    const bool key_ok =
                        k == 0 || (k - 1) < batch.lengths[static_cast<std::size_t>(b)];
                    if (!key_ok) CHECK(a == 0.0);
                    sum += a;
                }
                CHECK(std::abs(sum - 1.0) <= 1e-6);
            }
        }
    }
}

TEST_CASE("padding is inert for the class token and logits") {
    Rng rng(16);
    ModelConfig cfg;
    cfg.num_layers = 2;
    cfg.model_dim = 8;
    cfg.num_heads = 2;
    cfg.input_dim = 2;
    cfg.num_classes = 3;
    cfg = cfg.resolved();
    ModelParams params = ModelParams::init(cfg, 8);

    SequenceBatch base = make_batch(rng, 1, 3, 2, {3}, 3);
    SequenceBatch padded;
    padded.values = Tensor(Shape{1, 6, 2});
    padded.valid = BoolMask(Shape{1, 6});
    padded.lengths = {3};
    padded.labels = base.labels;
    padded.ids = base.ids;
    for (std::int64_t j = 0; j < 3; ++j) {
        padded.valid.set(0, j, true);
        for (std::int64_t k = 0; k < 2; ++k) {
            padded.values[j * 2 + k] = base.values[j * 2 + k];
        }
    }

    EncoderOutput a = encoder_forward(base, params, cfg);
    EncoderOutput b = encoder_forward(padded, params, cfg);
    for (std::int64_t c = 0; c < 8; ++c) {
        CHECK(std::abs(a.hidden[c] - b.hidden[c]) <= 1e-6);
    }
    Tensor la = classify_head(a.hidden, params, cfg);
    Tensor lb = classify_head(b.hidden, params, cfg);
    for (std::int64_t c = 0; c < 3; ++c) CHECK(std::abs(la[c] - lb[c]) <= 1e-6);
}

TEST_CASE("classifier head reads only the class token") {
    Rng rng(44);
    ModelConfig cfg;
    cfg.num_layers = 1;
    cfg.model_dim = 4;
    cfg.num_heads = 1;
    cfg.input_dim = 1;
    cfg.num_classes = 3;
    cfg = cfg.resolved();
    ModelParams params = ModelParams::init(cfg, 3);

    Tensor hidden(Shape{2, 3, 4});
    for (std::int64_t i = 0; i < hidden.numel(); ++i) hidden[i] = rng.uniform(-1, 1);
    Tensor logits = classify_head(hidden, params, cfg);
    CHECK(logits.shape() == Shape{2, 3});

    Tensor tweaked = hidden.detach();
    tweaked[1 * 4 + 2] = 99.0; // a non-class-token state
    Tensor logits2 = classify_head(tweaked, params, cfg);
    CHECK(logits.values() == logits2.values());

    // zero weights force equal logits, hence uniform probabilities downstream
    ModelParams zeroed = ModelParams::init(cfg, 3);
    for (Tensor* t : {&zeroed.head.w1, &zeroed.head.b1, &zeroed.head.w2, &zeroed.head.b2}) {
        for (std::int64_t i = 0; i < t->numel(); ++i) (*t)[i] = 0.0;
    }
    Tensor lz = classify_head(hidden, zeroed, cfg);
    for (std::int64_t i = 0; i < lz.numel(); ++i) CHECK(lz[i] == 0.0);
}

TEST_CASE("hand affine head on a unit class vector") {
    ModelConfig cfg;
    cfg.num_layers = 0;
    cfg.model_dim = 2;
    cfg.num_heads = 1;
    cfg.head_hidden = 2;
    cfg.input_dim = 1;
    cfg.num_classes = 2;
    cfg.activation = Activation::kRelu;
    cfg = cfg.resolved();
    ModelParams params = ModelParams::init(cfg, 1);
    // w1 = I, b1 = 0, w2 rows picked by hand, b2 = (0.1, -0.1)
    params.head.w1 = Tensor(Shape{2, 2}, {1, 0, 0, 1});
    params.head.b1 = Tensor::zeros({2});
    params.head.w2 = Tensor(Shape{2, 2}, {0.5, -1.0, 2.0, 0.25});
    params.head.b2 = Tensor(Shape{2}, {0.1, -0.1});

    Tensor hidden(Shape{1, 2, 2}, {1.0, 0.0, /*other token*/ 5.0, 5.0});
    Tensor logits = classify_head(hidden, params, cfg);
    // relu([1,0]) = [1,0]; logits = [1,0]*w2 + b2 = (0.6, -1.1)
    CHECK(logits[0] == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(logits[1] == doctest::Approx(-1.1).epsilon(1e-12));
}

TEST_CASE("shape laws over a randomized sweep") {
    Rng rng(71);
    for (int iter = 0; iter < 12; ++iter) {
        ModelConfig cfg;
        cfg.num_layers = rng.index(3);
        cfg.num_heads = 1 + rng.index(3);
        cfg.model_dim = cfg.num_heads * (1 + rng.index(3)) * 2;
        cfg.input_dim = 1 + rng.index(3);
        cfg.num_classes = 2 + rng.index(3);
        cfg.max_len = 12;
        cfg = cfg.resolved();
        ModelParams params = ModelParams::init(cfg, static_cast<std::uint64_t>(iter));

        const std::int64_t b = 1 + rng.index(3), n = 1 + rng.index(6);
        std::vector<std::int64_t> lengths;
        for (std::int64_t i = 0; i < b; ++i) lengths.push_back(1 + rng.index(n));
        lengths[0] = n; // batches are padded to their own longest sequence
        SequenceBatch batch = make_batch(rng, b, n, cfg.input_dim, lengths, cfg.num_classes);

        EncoderOutput out = encoder_forward(batch, params, cfg);
        CHECK(out.hidden.shape() == Shape{b, n + 1, cfg.model_dim});
        CHECK(out.attn.weights.shape() == Shape{cfg.num_layers, b, n + 1, n + 1});
        Tensor logits = classify_head(out.hidden, params, cfg);
        CHECK(logits.shape() == Shape{b, cfg.num_classes});
    }
}

TEST_CASE("gradients flow through the full encoder stack") {
    Rng rng(55);
    ModelConfig cfg;
    cfg.num_layers = 1;
    cfg.model_dim = 4;
    cfg.num_heads = 2;
    cfg.input_dim = 2;
    cfg.num_classes = 2;
    cfg.dropout_rate = 0.0;
    cfg = cfg.resolved();
    ModelParams params = ModelParams::init(cfg, 17);
    SequenceBatch batch = make_batch(rng, 2, 3, 2, {3, 2});

    auto loss_replacing = [&](Tensor& slot) {
        return [&](const Tensor& probe) {
            Tensor saved = slot;
            slot = probe;
            EncoderOutput out = encoder_forward(batch, params, cfg);
            Tensor logits = classify_head(out.hidden, params, cfg);
            Tensor loss = ops::cross_entropy_logits(logits, batch.labels);
            slot = saved;
            return loss;
        };
    };

    for (Tensor* t : {&params.cls, &params.embed_w, &params.blocks[0].wq,
                      &params.blocks[0].ff1_w, &params.blocks[0].ln1_gain, &params.head.w2}) {
        auto report = grad_check(loss_replacing(*t), *t, 1e-4, 1e-6);
        CHECK(report.pass);
    }
}

TEST_SUITE_END();
