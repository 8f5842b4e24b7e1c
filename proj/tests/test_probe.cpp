#include <cmath>
#include <random>

#include "detox/error.hpp"
#include "detox/metrics.hpp"
#include "detox/model.hpp"
#include "detox/probe.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace detox;

namespace {

struct Blobs {
    std::vector<std::vector<double>> x;
    std::vector<int> y;
};

// Two Gaussian blobs with unit variance and centers 3 sigma either side of the origin.
Blobs blobs(std::size_t n, std::size_t d, std::uint64_t seed) {
    std::mt19937_64 dir_rng(99), rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<double> dir(d);
    double norm = 0;
    for (auto& v : dir) norm += (v = g(dir_rng)) * v;
    for (auto& v : dir) v /= std::sqrt(norm);
    Blobs b;
    for (std::size_t i = 0; i < n; ++i) {
        const int label = static_cast<int>(i % 2);
        std::vector<double> x(d);
        for (std::size_t k = 0; k < d; ++k) x[k] = g(rng) + (label ? 3.0 : -3.0) * dir[k];
        b.x.push_back(x);
        b.y.push_back(label);
    }
    return b;
}

// 1-d probe whose score equals the feature passed through logit().
ToxicProbe identity_probe() {
    ToxicProbe p;
    p.weights = {1.0};
    return p;
}

std::vector<std::vector<double>> as_logits(std::initializer_list<double> scores) {
    std::vector<std::vector<double>> out;
    for (double s : scores) out.push_back({std::log(s / (1 - s))});
    return out;
}

}  // namespace

TEST_SUITE("probe") {
    TEST_CASE("single-token features are that token's final residual") {
        const auto c = testing::tiny_config();
        const auto w = testing::random_weights(c, 3);
        const std::vector<TokenId> one = {5};
        const auto f = probe_features(w, one);
        const auto r = forward(w, one);
        REQUIRE(f.size() == c.d_model);
        for (std::size_t i = 0; i < c.d_model; ++i) CHECK(f[i] == static_cast<double>(r.trace.final_out[i]));
        const auto pre = probe_features(w, one, ProbeFeature::pre_final_norm);
        for (std::size_t i = 0; i < c.d_model; ++i) CHECK(pre[i] == static_cast<double>(r.trace.layers.back().resid_post[i]));
    }

    TEST_CASE("two-token features average the per-position residuals") {
        const auto c = testing::tiny_config();
        const auto w = testing::random_weights(c, 4);
        const std::vector<TokenId> two = {5, 2};
        const auto f = probe_features(w, two);
        const auto r = forward(w, two);
        for (std::size_t i = 0; i < c.d_model; ++i) {
            const double avg = (double(r.trace.final_out[i]) + double(r.trace.final_out[c.d_model + i])) / 2.0;
            CHECK(f[i] == doctest::Approx(avg).epsilon(1e-12));
        }
        CHECK(probe_features(w, two) == f);
        const auto batch = probe_features_batch(w, {two, {5}});
        CHECK(batch[0] == f);
    }

    TEST_CASE("separable blobs are learned and flipped labels negate the boundary") {
        const auto train = blobs(800, 16, 1), test = blobs(400, 16, 2);
        ProbeTrainConfig cfg;
        const auto probe = train_probe(train.x, train.y, cfg);
        CHECK(probe_eval(probe, test.x, test.y).accuracy >= 0.99);

        auto flipped = train.y;
        for (auto& l : flipped) l = 1 - l;
        const auto anti = train_probe(train.x, flipped, cfg);
        CHECK(probe_eval(anti, test.x, test.y).accuracy <= 0.01);
    }

    TEST_CASE("zero features fall back to the base rate") {
        std::vector<std::vector<double>> x(100, std::vector<double>(4, 0.0));
        std::vector<int> y(100, 0);
        for (int i = 0; i < 70; ++i) y[i] = 1;
        const auto probe = train_probe(x, y, ProbeTrainConfig{});
        CHECK(probe_eval(probe, x, y).accuracy == doctest::Approx(0.7));
    }

    TEST_CASE("single-class training data is rejected") {
        std::vector<std::vector<double>> x(4, std::vector<double>(2, 1.0));
        CHECK_THROWS_AS(train_probe(x, std::vector<int>(4, 1), ProbeTrainConfig{}), DataError);
    }

    TEST_CASE("probe evaluation examples") {
        const auto p = identity_probe();
        const std::vector<int> labels = {1, 1, 0, 0};
        const auto perfect = probe_eval(p, as_logits({0.9, 0.8, 0.1, 0.2}), labels);
        CHECK(perfect.accuracy == 1.0);
        CHECK(perfect.roc_auc == 1.0);
        CHECK(probe_eval(p, as_logits({0.1, 0.2, 0.9, 0.8}), labels).roc_auc == 0.0);
        CHECK(probe_eval(p, as_logits({0.6, 0.4, 0.6, 0.4}), labels).roc_auc == 0.5);
    }

    TEST_CASE("roc auc equals brute-force pair counting") {
        std::mt19937_64 rng(8);
        for (int trial = 0; trial < 30; ++trial) {
            const std::size_t n = 2 + rng() % 199;
            std::vector<double> s(n);
            std::vector<int> l(n);
            for (std::size_t i = 0; i < n; ++i) {
                s[i] = static_cast<double>(rng() % 7) / 6.0;  // plenty of ties
                l[i] = static_cast<int>(rng() % 2);
            }
            l[0] = 1;
            l[1] = 0;
            double num = 0, pairs = 0;
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < n; ++j)
                    if (l[i] == 1 && l[j] == 0) {
                        num += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
                        pairs += 1;
                    }
            CHECK(roc_auc(s, l) == doctest::Approx(num / pairs).epsilon(1e-12));
        }
    }

    TEST_CASE("probe save and load keep exact values") {
        ToxicProbe p;
        p.weights = {0.1, -0.2, 1.0 / 3.0};
        p.bias = 0.125;
        p.trained_on = "abc";
        p.feature = ProbeFeature::pre_final_norm;
        const auto dir = std::filesystem::temp_directory_path() / "detox_test_probe";
        std::filesystem::remove_all(dir);
        p.save(dir);
        const auto q = ToxicProbe::load(dir);
        CHECK(q.weights == p.weights);
        CHECK(q.bias == p.bias);
        CHECK(q.trained_on == "abc");
        CHECK(q.feature == ProbeFeature::pre_final_norm);
    }

    TEST_CASE("seeded split is a partition") {
        const auto [a, b] = split_indices(50, 0.1, 3);
        CHECK(a.size() == 45);
        CHECK(b.size() == 5);
        std::vector<int> seen(50, 0);
        for (auto i : a) ++seen[i];
        for (auto i : b) ++seen[i];
        for (int s : seen) CHECK(s == 1);
        CHECK(split_indices(50, 0.1, 3) == std::make_pair(a, b));
    }
}
