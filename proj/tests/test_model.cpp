#include <filesystem>
#include <fstream>
#include <random>

#include "detox/checkpoint.hpp"
#include "detox/error.hpp"
#include "detox/model.hpp"
#include "detox/sampling.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace detox;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
    auto p = fs::temp_directory_path() / ("detox_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

Vocabulary vocab_of(std::size_t n) {
    Vocabulary v;
    while (v.size() < n) v.add("t" + std::to_string(v.size()));
    return v;
}

double max_abs_diff(std::span<const float> a, std::span<const float> b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - b[i]));
    return m;
}

}  // namespace

TEST_SUITE("model-core") {
    TEST_CASE("vocabulary tokenize and detokenize") {
        Vocabulary v;
        const auto hello = v.add("a_hello");
        const auto world = v.add("a_world");
        const auto ids = v.tokenize("a_hello a_world");
        CHECK(ids == std::vector<TokenId>{hello, world});
        CHECK(v.detokenize(ids) == "a_hello a_world");
        CHECK(v.tokenize("a_hello zzz") == std::vector<TokenId>{hello, Vocabulary::unk_id});
        CHECK(v.tokenize("").empty());
        CHECK_THROWS_AS(v.add("a_hello"), DataError);
    }

    TEST_CASE("vocabulary file round trip") {
        const auto dir = temp_dir("vocab");
        auto v = vocab_of(9);
        v.save(dir / "vocab.json");
        const auto w = Vocabulary::load(dir / "vocab.json");
        REQUIRE(w.size() == 9);
        for (TokenId i = 0; i < 9; ++i) CHECK(w.token(i) == v.token(i));
    }

    TEST_CASE("checkpoint round trip is bit-exact") {
        const auto c = testing::tiny_config();
        ModelCheckpoint ck{testing::random_weights(c, 1), vocab_of(c.vocab_size)};
        const auto dir = temp_dir("ckpt");
        save_checkpoint(ck, dir);
        const auto back = load_checkpoint(dir);
        CHECK(back.weights == ck.weights);
        CHECK(back.config() == c);
    }

    TEST_CASE("checkpoint shape mismatch names the tensor") {
        const auto dir = temp_dir("ckpt_shape");
        TensorContainer tc;
        tc.tensors.push_back({"layers.0.mlp.w_up", {4, 4}, std::vector<float>(16, 0.5f)});
        tc.save(dir);
        std::ifstream in(dir / "manifest.json");
        auto j = nlohmann::json::parse(in);
        in.close();
        j["tensors"][0]["shape"] = {8, 4};
        std::ofstream(dir / "manifest.json") << j.dump();
        try {
            TensorContainer::load(dir);
            FAIL("expected a shape mismatch");
        } catch (const DataError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("layers.0.mlp.w_up") != std::string::npos);
            CHECK(msg.find("shape mismatch") != std::string::npos);
            CHECK(msg.find("16 floats") != std::string::npos);
        }
    }

    TEST_CASE("checkpoint with a NaN is rejected") {
        const auto dir = temp_dir("ckpt_nan");
        TensorContainer tc;
        std::vector<float> data(6, 1.0f);
        data[4] = std::numeric_limits<float>::quiet_NaN();
        tc.tensors.push_back({"wte", {2, 3}, data});
        tc.save(dir);
        CHECK_THROWS_WITH_AS(TensorContainer::load(dir), doctest::Contains("non-finite"), DataError);
    }

    TEST_CASE("checkpoint missing vocab or config fails") {
        const auto c = testing::tiny_config();
        ModelCheckpoint ck{testing::random_weights(c, 1), vocab_of(c.vocab_size)};
        const auto dir = temp_dir("ckpt_missing");
        save_checkpoint(ck, dir);
        fs::remove(dir / "vocab.json");
        CHECK_THROWS_AS(load_checkpoint(dir), DataError);
        CHECK_THROWS_AS(load_checkpoint(temp_dir("ckpt_empty")), DataError);
    }

    TEST_CASE("hand-evaluated 1-layer d=2 model") {
        ModelConfig c = testing::tiny_config(1, 2, 2, 1, 3, 4);
        auto w = Weights<float>::zeros(c);
        w.token_embedding = {1.0f, -1.0f, 0.5f, 2.0f, -1.5f, 0.25f};
        w.positional_embedding = {0.1f, 0.3f, 0.0f, 0.0f, 0.0f, 0.0f, 0.0f, 0.0f};
        auto& L = w.layers[0];
        L.ln1_gain = {1.0f, 2.0f};
        L.w_v = {0.5f, -0.25f, 1.0f, 0.75f};
        L.w_o = {1.0f, 0.5f, -0.5f, 1.0f};
        L.w_q = {0.3f, 0.1f, -0.2f, 0.4f};
        L.w_k = {0.2f, -0.6f, 0.9f, 0.1f};
        L.ln2_gain = {0.5f, 1.5f};
        L.w_up = {1.0f, 0.5f, -0.75f, 0.25f};
        L.w_down = {0.8f, -0.4f, 0.3f, 1.2f};
        w.final_gain = {1.0f, 1.0f};
        w.unembedding = {1.0f, 0.0f, 0.0f, 1.0f, 1.0f, -1.0f};

        // Token 1 at position 0: with one position, attention is the identity mix.
        const double x0[2] = {0.5 + 0.1, 2.0 + 0.3};
        auto ln = [](const double* x, const double* g, double* y) {
            const double mu = (x[0] + x[1]) / 2;
            const double var = ((x[0] - mu) * (x[0] - mu) + (x[1] - mu) * (x[1] - mu)) / 2;
            const double r = 1.0 / std::sqrt(var + 1e-5);
            y[0] = (x[0] - mu) * r * g[0];
            y[1] = (x[1] - mu) * r * g[1];
        };
        const double g1[2] = {1, 2}, g2[2] = {0.5, 1.5}, gf[2] = {1, 1};
        double h[2];
        ln(x0, g1, h);
        const double v[2] = {0.5 * h[0] - 0.25 * h[1], 1.0 * h[0] + 0.75 * h[1]};
        const double attn[2] = {1.0 * v[0] + 0.5 * v[1], -0.5 * v[0] + 1.0 * v[1]};
        const double x1[2] = {x0[0] + attn[0], x0[1] + attn[1]};
        double h2[2];
        ln(x1, g2, h2);
        const double a[2] = {testing::gelu_ref(1.0 * h2[0] + 0.5 * h2[1]), testing::gelu_ref(-0.75 * h2[0] + 0.25 * h2[1])};
        const double mlp[2] = {0.8 * a[0] - 0.4 * a[1], 0.3 * a[0] + 1.2 * a[1]};
        const double x2[2] = {x1[0] + mlp[0], x1[1] + mlp[1]};
        double hf[2];
        ln(x2, gf, hf);
        const double logits[3] = {hf[0], hf[1], hf[0] - hf[1]};

        const std::vector<TokenId> toks = {1};
        const auto r = forward(w, toks);
        REQUIRE(r.logits.size() == 3);
        for (int i = 0; i < 3; ++i) CHECK(r.logits[i] == doctest::Approx(logits[i]).epsilon(1e-5));
        CHECK(r.trace.layers[0].activations[0] == doctest::Approx(a[0]).epsilon(1e-5));
        CHECK(r.trace.layers[0].activations[1] == doctest::Approx(a[1]).epsilon(1e-5));
    }

    TEST_CASE("additive residual identity over random inputs") {
        const auto c = testing::tiny_config(3, 8, 16, 2, 12, 16);
        std::mt19937_64 rng(11);
        double worst = 0;
        for (int trial = 0; trial < 100; ++trial) {
            const auto w = testing::random_weights(c, 100 + trial);
            const auto toks = testing::random_tokens(1 + rng() % c.max_seq_len, c.vocab_size, rng);
            const auto r = forward(w, toks);
            for (const auto& L : r.trace.layers)
                for (std::size_t i = 0; i < L.resid_post.size(); ++i)
                    worst = std::max(worst, std::abs(double(L.resid_post[i]) -
                                                     (double(L.resid_pre[i]) + L.attn_out[i] + L.mlp_out[i])));
        }
        CHECK(worst <= 1e-5);
    }

    TEST_CASE("mlp decomposition equals the direct evaluation") {
        const auto c = testing::tiny_config(2, 8, 8, 2, 12, 16);
        const auto w = testing::random_weights(c, 4);
        std::mt19937_64 rng(4);
        for (int t = 0; t < 20; ++t) {
            const auto x = testing::random_vector(c.d_model, rng);
            const std::size_t layer = rng() % c.n_layers;
            const auto subs = mlp_sub_updates(w, layer, x);
            REQUIRE(subs.size() == c.d_mlp);
            std::vector<double> sum(c.d_model, 0.0);
            for (const auto& s : subs)
                for (std::size_t i = 0; i < c.d_model; ++i) sum[i] += s.contribution[i];
            const auto direct = mlp_output(w, layer, x);
            for (std::size_t i = 0; i < c.d_model; ++i) CHECK(std::abs(sum[i] - direct[i]) <= 1e-4);
        }
    }

    TEST_CASE("zero input gives zero activations and d_mlp=1 is exact") {
        const auto c = testing::tiny_config(1, 4, 1, 1, 6, 8);
        const auto w = testing::random_weights(c, 8);
        const std::vector<float> zero(4, 0.0f);
        const auto subs0 = mlp_sub_updates(w, 0, zero);
        CHECK(subs0[0].activation == 0.0);
        for (double v : subs0[0].contribution) CHECK(v == 0.0);

        std::mt19937_64 rng(1);
        const auto x = testing::random_vector(4, rng);
        const auto subs = mlp_sub_updates(w, 0, x);
        const auto direct = mlp_output(w, 0, x);
        for (std::size_t i = 0; i < 4; ++i) CHECK(subs[0].contribution[i] == doctest::Approx(direct[i]).epsilon(1e-6));
        CHECK_THROWS_AS(mlp_sub_updates(w, 3, x), DataError);
    }

    TEST_CASE("zero offset intervention is an exact identity") {
        const auto c = testing::tiny_config();
        const auto w = testing::random_weights(c, 2);
        std::mt19937_64 rng(2);
        const auto toks = testing::random_tokens(10, c.vocab_size, rng);
        InterventionSpec spec{{{0, 3}, {1, 5}}, 0.0, InterventionMode::add_offset};
        CHECK(forward(w, toks).logits == forward(w, toks, &spec).logits);
    }

    TEST_CASE("offset on one neuron shifts that layer's output by gamma times its value vector") {
        const auto c = testing::tiny_config(3, 8, 16, 2, 12, 16);
        const auto w = testing::random_weights(c, 6);
        std::mt19937_64 rng(6);
        const auto toks = testing::random_tokens(7, c.vocab_size, rng);
        for (double gamma : {1.0, -2.5}) {
            InterventionSpec spec{{{1, 4}}, gamma, InterventionMode::add_offset};
            const auto base = forward(w, toks);
            const auto edit = forward(w, toks, &spec);
            const auto value = w.value_vector(1, 4);
            // Layers below are untouched.
            CHECK(base.trace.layers[0].resid_post == edit.trace.layers[0].resid_post);
            CHECK(base.trace.layers[1].resid_mid == edit.trace.layers[1].resid_mid);
            double worst = 0;
            for (std::size_t p = 0; p < toks.size(); ++p)
                for (std::size_t i = 0; i < c.d_model; ++i) {
                    const double diff = double(edit.trace.layers[1].resid_post[p * c.d_model + i]) -
                                        base.trace.layers[1].resid_post[p * c.d_model + i];
                    worst = std::max(worst, std::abs(diff - gamma * value[i]));
                }
            CHECK(worst <= 1e-5);
        }
    }

    TEST_CASE("clamp never increases a targeted activation") {
        const auto c = testing::tiny_config();
        const auto w = testing::random_weights(c, 9);
        std::mt19937_64 rng(9);
        const auto toks = testing::random_tokens(9, c.vocab_size, rng);
        InterventionSpec spec{{{0, 1}, {0, 2}, {1, 7}}, 0.0, InterventionMode::clamp_nonpositive};
        const auto base = forward(w, toks);
        const auto edit = forward(w, toks, &spec);
        for (const auto& t : spec.targets)
            for (std::size_t p = 0; p < toks.size(); ++p) {
                CHECK(edit.trace.layers[t.layer].activations[p * c.d_mlp + t.neuron] <= 0.0f);
                if (t.layer == 0)
                    CHECK(edit.trace.layers[0].activations[p * c.d_mlp + t.neuron] <=
                          base.trace.layers[0].activations[p * c.d_mlp + t.neuron]);
            }
    }

    TEST_CASE("intervention spec validation") {
        const auto c = testing::tiny_config();
        CHECK_THROWS_AS((InterventionSpec{{{5, 0}}, 1.0, InterventionMode::add_offset}.validate(c)), ConfigError);
        CHECK_THROWS_AS((InterventionSpec{{{0, 99}}, 1.0, InterventionMode::add_offset}.validate(c)), ConfigError);
        CHECK_THROWS_AS((InterventionSpec{{{0, 1}, {0, 1}}, 1.0, InterventionMode::add_offset}.validate(c)), ConfigError);
    }

    TEST_CASE("forward rejects bad token sequences") {
        const auto c = testing::tiny_config();
        const auto w = testing::random_weights(c, 1);
        CHECK_THROWS_AS(forward(w, std::vector<TokenId>{}), DataError);
        CHECK_THROWS_AS(forward(w, std::vector<TokenId>(c.max_seq_len + 1, 0)), DataError);
        CHECK_THROWS_AS(forward(w, std::vector<TokenId>{static_cast<TokenId>(c.vocab_size)}), DataError);
    }

    TEST_CASE("forward is deterministic and the decoder matches it bit for bit") {
        const auto c = testing::tiny_config(2, 16, 32, 4, 20, 24);
        const auto w = testing::random_weights(c, 12);
        std::mt19937_64 rng(12);
        const auto toks = testing::random_tokens(c.max_seq_len, c.vocab_size, rng);
        const auto full = forward(w, toks);
        CHECK(full.logits == forward(w, toks).logits);
        InterventionSpec spec{{{1, 3}}, 1.5, InterventionMode::add_offset};
        const auto full_edit = forward(w, toks, &spec);
        Decoder<float> dec(w), dec_edit(w, &spec);
        for (std::size_t p = 0; p < toks.size(); ++p) {
            const auto row = dec.step(toks[p]);
            const auto row_edit = dec_edit.step(toks[p]);
            const std::span<const float> ref(full.logits.data() + p * c.vocab_size, c.vocab_size);
            const std::span<const float> ref_edit(full_edit.logits.data() + p * c.vocab_size, c.vocab_size);
            CHECK(max_abs_diff(row, ref) == 0.0);
            CHECK(max_abs_diff(row_edit, ref_edit) == 0.0);
        }
    }

    TEST_CASE("double precision forward agrees with float") {
        const auto c = testing::tiny_config();
        const auto w = testing::random_weights(c, 13);
        std::mt19937_64 rng(13);
        const auto toks = testing::random_tokens(8, c.vocab_size, rng);
        const auto f = forward(w, toks);
        const auto d = forward(w.cast<double>(), toks);
        for (std::size_t i = 0; i < f.logits.size(); ++i) CHECK(f.logits[i] == doctest::Approx(d.logits[i]).epsilon(1e-4));
    }

    TEST_CASE("initialization is seeded") {
        const auto c = testing::tiny_config();
        CHECK(init_weights(c, 5) == init_weights(c, 5));
        CHECK_FALSE(init_weights(c, 5) == init_weights(c, 6));
    }
}
