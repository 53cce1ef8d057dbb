#include <doctest.h>

#include <cmath>
#include <set>

#include "starformer/darem.hpp"

using namespace starformer;

namespace {

// Attention stack with row-stochastic rows over valid keys (class token at 0
// plus valid timesteps) and exact zeros on padded keys.
AttentionStack random_stack(Rng& rng, std::int64_t layers, std::int64_t b, std::int64_t n,
                            const std::vector<std::int64_t>& lengths) {
    const std::int64_t t = n + 1;
    Tensor w(Shape{layers, b, t, t});
    for (std::int64_t l = 0; l < layers; ++l) {
        for (std::int64_t s = 0; s < b; ++s) {
            const std::int64_t len = lengths[static_cast<std::size_t>(s)];
            for (std::int64_t q = 0; q < t; ++q) {
                double sum = 0.0;
                std::vector<double> row(static_cast<std::size_t>(t), 0.0);
                for (std::int64_t k = 0; k < t; ++k) {
                    const bool ok = k == 0 || (k - 1) < len;
                    if (ok) {
                        row[static_cast<std::size_t>(k)] = 0.05 + rng.uniform();
                        sum += row[static_cast<std::size_t>(k)];
                    }
                }
                for (std::int64_t k = 0; k < t; ++k) {
                    w[((l * b + s) * t + q) * t + k] = row[static_cast<std::size_t>(k)] / sum;
                }
            }
        }
    }
    return AttentionStack{w};
}

BoolMask lengths_to_valid(std::int64_t b, std::int64_t n,
                          const std::vector<std::int64_t>& lengths) {
    BoolMask m(Shape{b, n});
    for (std::int64_t s = 0; s < b; ++s) {
        for (std::int64_t j = 0; j < n; ++j) {
            m.set(s, j, j < lengths[static_cast<std::size_t>(s)]);
        }
    }
    return m;
}

// stack with N=1 (so matrices are 2x2) built from explicit per-layer values
AttentionStack stack_2x2(const std::vector<std::vector<double>>& layers) {
    const std::int64_t l = static_cast<std::int64_t>(layers.size());
    Tensor w(Shape{l, 1, 2, 2});
    for (std::int64_t i = 0; i < l; ++i) {
        for (std::int64_t j = 0; j < 4; ++j) {
            w[i * 4 + j] = layers[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
        }
    }
    return AttentionStack{w};
}

ImportanceScores scores_from(const std::vector<double>& sigma, std::int64_t n_valid) {
    const std::int64_t n = static_cast<std::int64_t>(sigma.size());
    ImportanceScores s;
    s.sigma = Tensor(Shape{1, n}, sigma);
    s.valid = BoolMask(Shape{1, n});
    for (std::int64_t j = 0; j < n_valid; ++j) s.valid.set(0, j, true);
    return s;
}

std::set<std::int64_t> masked_set(const RegionalMask& m, std::int64_t sample = 0) {
    std::set<std::int64_t> out;
    for (std::int64_t j = 0; j < m.masked.shape[1]; ++j) {
        if (m.masked.at(sample, j)) out.insert(j);
    }
    return out;
}

} // namespace

TEST_SUITE_BEGIN("darem");

TEST_CASE("rollout base and identity cases") {
    BoolMask valid(Shape{1, 1}, true);

    Tensor r1 = aggregate_attention_rollout(stack_2x2({{0.5, 0.5, 0.2, 0.8}}), valid);
    CHECK(r1.values() == std::vector<double>{0.5, 0.5, 0.2, 0.8});

    Tensor r2 = aggregate_attention_rollout(
        stack_2x2({{0.5, 0.5, 0.2, 0.8}, {1, 0, 0, 1}}), valid);
    for (std::int64_t i = 0; i < 4; ++i) {
        CHECK(r2[i] == doctest::Approx(r1[i]).epsilon(1e-12));
    }

    Tensor r3 = aggregate_attention_rollout(
        stack_2x2({{1, 0, 0, 1}, {0.5, 0.5, 0.5, 0.5}}), valid);
    CHECK(r3[0] == doctest::Approx(0.75).epsilon(1e-12));
    CHECK(r3[1] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(r3[2] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(r3[3] == doctest::Approx(0.75).epsilon(1e-12));

    AttentionStack empty{Tensor(Shape{0, 1, 2, 2})};
    CHECK_THROWS_AS(aggregate_attention_rollout(empty, valid), ContractError);
}

TEST_CASE("rollout matches a direct matrix-product oracle") {
    Rng rng(21);
    const std::int64_t layers = 3, n = 4;
    std::vector<std::int64_t> lengths{4};
    AttentionStack stack = random_stack(rng, layers, 1, n, lengths);
    BoolMask valid = lengths_to_valid(1, n, lengths);
    Tensor rolled = aggregate_attention_rollout(stack, valid);

    // oracle: explicit (A/2 + I/2) chain applied left to right
    const std::int64_t t = n + 1;
    std::vector<double> acc(static_cast<std::size_t>(t * t));
    for (std::int64_t q = 0; q < t; ++q) {
        for (std::int64_t k = 0; k < t; ++k) {
            acc[static_cast<std::size_t>(q * t + k)] = stack.at(0, 0, q, k);
        }
    }
    for (std::int64_t l = 1; l < layers; ++l) {
        std::vector<double> next(static_cast<std::size_t>(t * t), 0.0);
        for (std::int64_t q = 0; q < t; ++q) {
            for (std::int64_t m = 0; m < t; ++m) {
                const double w = 0.5 * stack.at(l, 0, q, m) + (q == m ? 0.5 : 0.0);
                for (std::int64_t k = 0; k < t; ++k) {
                    next[static_cast<std::size_t>(q * t + k)] +=
                        w * acc[static_cast<std::size_t>(m * t + k)];
                }
            }
        }
        acc = next;
    }
    for (std::int64_t i = 0; i < t * t; ++i) {
        CHECK(rolled[i] == doctest::Approx(acc[static_cast<std::size_t>(i)]).epsilon(1e-12));
    }
}

TEST_CASE("rollout preserves row stochasticity over valid keys") {
    Rng rng(22);
    for (int iter = 0; iter < 30; ++iter) {
        const std::int64_t layers = 1 + rng.index(4), b = 1 + rng.index(3), n = 2 + rng.index(6);
        std::vector<std::int64_t> lengths;
        for (std::int64_t s = 0; s < b; ++s) lengths.push_back(1 + rng.index(n));
        AttentionStack stack = random_stack(rng, layers, b, n, lengths);
        BoolMask valid = lengths_to_valid(b, n, lengths);
        Tensor rolled = aggregate_attention_rollout(stack, valid);
        const std::int64_t t = n + 1;
        for (std::int64_t s = 0; s < b; ++s) {
            for (std::int64_t q = 0; q < t; ++q) {
                double sum = 0.0;
                for (std::int64_t k = 0; k < t; ++k) {
                    const double v = rolled[(s * t + q) * t + k];
                    const bool ok = k == 0 || (k - 1) < lengths[static_cast<std::size_t>(s)];
                    if (!ok) CHECK(v == 0.0);
                    sum += v;
                }
                CHECK(std::abs(sum - 1.0) <= 1e-6);
            }
        }
    }
}

TEST_CASE("importance scores hand cases") {
    auto make_rolled = [](const std::vector<double>& block, std::int64_t n) {
        // class-token row and column get junk values to prove they are dropped
        const std::int64_t t = n + 1;
        Tensor r(Shape{1, t, t});
        for (std::int64_t k = 0; k < t; ++k) r[k] = 0.9 / static_cast<double>(t);
        for (std::int64_t q = 1; q < t; ++q) {
            r[q * t] = 0.3;
            for (std::int64_t k = 1; k < t; ++k) {
                r[q * t + k] = block[static_cast<std::size_t>((q - 1) * n + (k - 1))];
            }
        }
        return r;
    };

    BoolMask valid3(Shape{1, 3}, true);
    auto s1 = attention_scores(make_rolled({1, 0, 0, 0, 1, 0, 0, 0, 1}, 3), valid3);
    for (std::int64_t k = 0; k < 3; ++k) {
        CHECK(s1.sigma[k] == doctest::Approx(1.0 / 3).epsilon(1e-12));
    }

    BoolMask valid2(Shape{1, 2}, true);
    auto s2 = attention_scores(make_rolled({0, 1, 0, 1}, 2), valid2);
    CHECK(s2.sigma[0] == 0.0);
    CHECK(s2.sigma[1] == doctest::Approx(1.0).epsilon(1e-12));

    auto s3 = attention_scores(make_rolled({0.75, 0.25, 0.25, 0.75}, 2), valid2);
    CHECK(s3.sigma[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(s3.sigma[1] == doctest::Approx(0.5).epsilon(1e-12));

    auto degenerate = attention_scores; // all-zero timestep block must throw
    CHECK_THROWS_AS(degenerate(make_rolled({0, 0, 0, 0}, 2), valid2), NumericError);
}

TEST_CASE("importance scores sum to one and ignore padding") {
    Rng rng(23);
    for (int iter = 0; iter < 30; ++iter) {
        const std::int64_t layers = 1 + rng.index(3), b = 1 + rng.index(3), n = 2 + rng.index(8);
        std::vector<std::int64_t> lengths;
        for (std::int64_t s = 0; s < b; ++s) lengths.push_back(1 + rng.index(n));
        AttentionStack stack = random_stack(rng, layers, b, n, lengths);
        BoolMask valid = lengths_to_valid(b, n, lengths);
        auto scores = attention_scores(aggregate_attention_rollout(stack, valid), valid);
        for (std::int64_t s = 0; s < b; ++s) {
            double sum = 0.0;
            for (std::int64_t j = 0; j < n; ++j) {
                const double v = scores.sigma[s * n + j];
                CHECK(v >= 0.0);
                if (j >= lengths[static_cast<std::size_t>(s)]) CHECK(v == 0.0);
                sum += v;
            }
            CHECK(std::abs(sum - 1.0) <= 1e-6);
        }
    }
}

TEST_CASE("importance scores are permutation equivariant") {
    Rng rng(29);
    const std::int64_t n = 5, t = n + 1;
    Tensor rolled(Shape{1, t, t});
    for (std::int64_t i = 0; i < rolled.numel(); ++i) rolled[i] = rng.uniform(0.01, 1.0);
    BoolMask valid(Shape{1, n}, true);
    auto base = attention_scores(rolled, valid);

    std::vector<std::int64_t> perm{3, 0, 4, 1, 2};
    Tensor permuted(Shape{1, t, t});
    permuted[0] = rolled[0];
    for (std::int64_t q = 0; q < n; ++q) {
        permuted[(q + 1) * t] = rolled[(perm[static_cast<std::size_t>(q)] + 1) * t];
        permuted[q + 1] = rolled[perm[static_cast<std::size_t>(q)] + 1];
        for (std::int64_t k = 0; k < n; ++k) {
            permuted[(q + 1) * t + (k + 1)] =
                rolled[(perm[static_cast<std::size_t>(q)] + 1) * t +
                       (perm[static_cast<std::size_t>(k)] + 1)];
        }
    }
    auto shuffled = attention_scores(permuted, valid);
    for (std::int64_t k = 0; k < n; ++k) {
        CHECK(shuffled.sigma[k] ==
              doctest::Approx(base.sigma[perm[static_cast<std::size_t>(k)]]).epsilon(1e-12));
    }
}

TEST_CASE("regional mask hand traces") {
    MaskConfig cfg;

    SUBCASE("top-1 with zero radius") {
        cfg.phi = 0.4;
        cfg.zeta = 1.0;
        cfg.gamma = 0.0;
        auto mask = build_regional_mask(scores_from({0.1, 0.7, 0.2}, 3), cfg, 1);
        CHECK(mask.budget[0] == 1);
        CHECK(masked_set(mask) == std::set<std::int64_t>{1});
        CHECK(mask.seeds[0] == std::vector<std::int64_t>{1});
    }

    SUBCASE("two seeds with radius one hit the budget") {
        cfg.phi = 0.6;
        cfg.zeta = 0.5;
        cfg.gamma = 0.2;
        auto mask = build_regional_mask(scores_from({0.05, 0.1, 0.5, 0.05, 0.3}, 5), cfg, 1);
        CHECK(mask.budget[0] == 3);
        CHECK(mask.seeds[0] == std::vector<std::int64_t>{2, 4});
        CHECK(masked_set(mask) == std::set<std::int64_t>{1, 2, 3});
    }

    SUBCASE("zero budget masks nothing") {
        cfg.phi = 0.0;
        cfg.zeta = 0.7;
        cfg.gamma = 0.5;
        auto mask = build_regional_mask(scores_from({0.2, 0.3, 0.5}, 3), cfg, 1);
        CHECK(mask.budget[0] == 0);
        CHECK(masked_set(mask).empty());
    }
}

TEST_CASE("mask laws over random configurations") {
    Rng rng(31);
    for (int iter = 0; iter < 300; ++iter) {
        const std::int64_t n_max = 2 + rng.index(14);
        const std::int64_t n = 1 + rng.index(n_max);
        std::vector<double> sigma(static_cast<std::size_t>(n_max), 0.0);
        double total = 0.0;
        for (std::int64_t j = 0; j < n; ++j) {
            sigma[static_cast<std::size_t>(j)] = rng.uniform(0.0, 1.0) + 1e-6;
            total += sigma[static_cast<std::size_t>(j)];
        }
        for (std::int64_t j = 0; j < n; ++j) sigma[static_cast<std::size_t>(j)] /= total;
        auto scores = scores_from(sigma, n);

        MaskConfig cfg;
        cfg.phi = rng.uniform();
        cfg.zeta = rng.uniform();
        cfg.gamma = rng.uniform();
        auto mask = build_regional_mask(scores, cfg, static_cast<std::uint64_t>(iter));

        const std::int64_t budget =
            static_cast<std::int64_t>(std::floor(cfg.phi * static_cast<double>(n)));
        CHECK(mask.budget[0] == budget);
        CHECK(mask.count(0) <= budget);
        for (std::int64_t j = n; j < n_max; ++j) CHECK(!mask.masked.at(0, j));

        // gamma = 0 with n_seed <= budget masks exactly the top seeds
        MaskConfig zero_r = cfg;
        zero_r.gamma = 0.0;
        auto tight = build_regional_mask(scores, zero_r, static_cast<std::uint64_t>(iter));
        if (budget > 0) {
            CHECK(masked_set(tight) ==
                  std::set<std::int64_t>(tight.seeds[0].begin(), tight.seeds[0].end()));
        }

        // growing gamma only adds indices while the budget is slack
        MaskConfig small = cfg, large = cfg;
        small.gamma = cfg.gamma * 0.5;
        auto mask_small = build_regional_mask(scores, small, static_cast<std::uint64_t>(iter));
        auto mask_large = build_regional_mask(scores, large, static_cast<std::uint64_t>(iter));
        if (mask_large.count(0) < budget) {
            auto s = masked_set(mask_small), l = masked_set(mask_large);
            CHECK(std::includes(l.begin(), l.end(), s.begin(), s.end()));
        }
    }
}

TEST_CASE("random strategy draws distinct valid indices deterministically") {
    auto scores = scores_from({0.25, 0.25, 0.25, 0.25, 0.0}, 4);
    MaskConfig cfg;
    cfg.strategy = MaskStrategy::kRandom;
    cfg.phi = 0.75;
    auto a = build_regional_mask(scores, cfg, 42);
    auto b = build_regional_mask(scores, cfg, 42);
    CHECK(a.masked.data == b.masked.data);
    CHECK(a.count(0) == 3);
    CHECK(!a.masked.at(0, 4)); // padding stays clear
    CHECK(a.seeds[0].empty());

    cfg.strategy = MaskStrategy::kNone;
    auto none = build_regional_mask(scores, cfg, 42);
    CHECK(none.count(0) == 0);
}

TEST_CASE("apply_mask zero-fills exactly the masked rows") {
    Rng rng(35);
    SequenceBatch batch;
    batch.values = Tensor(Shape{2, 3, 2});
    for (std::int64_t i = 0; i < batch.values.numel(); ++i) batch.values[i] = rng.uniform(1, 2);
    batch.valid = BoolMask(Shape{2, 3}, true);
    batch.lengths = {3, 3};
    batch.labels = {0, 1};
    batch.ids = {"a", "b"};

    RegionalMask empty;
    empty.masked = BoolMask(Shape{2, 3});
    empty.budget = {0, 0};
    empty.seeds = {{}, {}};
    SequenceBatch same = apply_mask(batch, empty);
    CHECK(same.values.values() == batch.values.values());

    RegionalMask one;
    one.masked = BoolMask(Shape{2, 3});
    one.masked.set(0, 1, true);
    one.budget = {1, 0};
    one.seeds = {{1}, {}};
    SequenceBatch masked = apply_mask(batch, one);
    for (std::int64_t k = 0; k < 2; ++k) {
        CHECK(masked.values[(0 * 3 + 0) * 2 + k] == batch.values[(0 * 3 + 0) * 2 + k]);
        CHECK(masked.values[(0 * 3 + 1) * 2 + k] == 0.0);
        CHECK(masked.values[(0 * 3 + 2) * 2 + k] == batch.values[(0 * 3 + 2) * 2 + k]);
    }
    CHECK(masked.lengths == batch.lengths);
    CHECK(masked.labels == batch.labels);

    // counting oracle over random masks
    for (int iter = 0; iter < 20; ++iter) {
        RegionalMask rnd;
        rnd.masked = BoolMask(Shape{2, 3});
        for (std::int64_t i = 0; i < 6; ++i) rnd.masked.set(i, rng.uniform() < 0.5);
        rnd.budget = {3, 3};
        rnd.seeds = {{}, {}};
        SequenceBatch out = apply_mask(batch, rnd);
        std::int64_t zero_rows = 0;
        for (std::int64_t i = 0; i < 2; ++i) {
            for (std::int64_t j = 0; j < 3; ++j) {
                bool all_zero = true;
                for (std::int64_t k = 0; k < 2; ++k) {
                    all_zero = all_zero && out.values[(i * 3 + j) * 2 + k] == 0.0;
                }
                zero_rows += all_zero;
            }
        }
        CHECK(zero_rows == rnd.masked.count());
    }

    RegionalMask wrong;
    wrong.masked = BoolMask(Shape{2, 5});
    CHECK_THROWS_AS(apply_mask(batch, wrong), ContractError);
}

TEST_SUITE_END();
