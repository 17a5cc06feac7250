#include <doctest.h>

#include <cmath>
#include <numeric>

#include "../support/oracles.hpp"
#include "otok/generation.hpp"

using namespace otok;
using namespace otok::ops;

namespace {

LmConfig small_lm(std::int64_t k = 16, std::int64_t context = 12) {
    LmConfig c;
    c.codebook_size = k;
    c.context = context;
    c.width = 16;
    c.heads = 2;
    c.layers = 2;
    c.seed = 8;
    return c;
}

void zero_param(nn::ParamStore& store, const std::string& name) {
    Tensor p = store.get(name);
    p.assign(std::vector<Real>(static_cast<std::size_t>(p.numel()), 0.0));
}

// Predicts the exact noise for latents drawn around one known clean point.
class KnownPointOracle : public NoisePredictor {
public:
    KnownPointOracle(Tensor z0, const DiffusionConfig& dc) : z0_(std::move(z0)), dc_(dc) {}
    Tensor predict(const Tensor& z_t, const std::vector<std::int64_t>& steps) const override {
        std::vector<Real> out(z_t.data().size());
        const auto per = out.size() / steps.size();
        for (std::size_t i = 0; i < out.size(); ++i) {
            const std::int64_t t = steps[i / per];
            const Real ab = dc_.alpha_bar(t);
            out[i] = (z_t.data()[i] - std::sqrt(ab) * z0_.data()[i % per]) / std::sqrt(1.0 - ab);
        }
        return Tensor::from(z_t.shape(), out);
    }

private:
    Tensor z0_;
    DiffusionConfig dc_;
};

class ZeroPredictor : public NoisePredictor {
public:
    Tensor predict(const Tensor& z_t, const std::vector<std::int64_t>&) const override {
        return Tensor::zeros(z_t.shape());
    }
};

TokenizerConfig predict_config() {
    TokenizerConfig c = oracle::tiny_config();
    c.patch.max_frames = 5;
    return c;
}

}  // namespace

TEST_CASE("raster flattening") {
    TokenGrid g{1, 1, 2, 2, {10, 11, 12, 13}};
    const TokenSequence s = flatten_raster(g, 16);
    CHECK(s.tokens == std::vector<std::int64_t>{10, 11, 12, 13});
    CHECK_FALSE(s.conditioned);
    CHECK_FALSE(s.condition().has_value());

    const TokenSequence c = flatten_raster(g, 16, 2);
    CHECK(c.tokens == std::vector<std::int64_t>{18, 10, 11, 12, 13});
    CHECK(c.condition() == std::optional<std::int64_t>(18));
    CHECK(std::vector<std::int64_t>(c.codes().begin(), c.codes().end()) == g.ids);

    TokenGrid big{1, 3, 2, 4, {}};
    big.ids.resize(24);
    std::iota(big.ids.begin(), big.ids.end(), 0);
    CHECK(unflatten_raster(flatten_raster(big, 32, 1)) == big);
    CHECK(unflatten_raster(flatten_raster(big, 32)) == big);

    TokenGrid two{2, 1, 1, 2, {0, 1, 2, 3}};
    CHECK_THROWS_AS(flatten_raster(two, 16), ShapeError);
}

TEST_CASE("uniform logits give loss ln K") {
    for (std::int64_t k : {16, 512}) {
        TokenLm lm(small_lm(k));
        zero_param(lm.params(), "lm.head.weight");
        zero_param(lm.params(), "lm.head.bias");
        TokenSequence s;
        s.meta = {1, 2, 4};
        Rng rng(2);
        for (int i = 0; i < 8; ++i) {
            s.tokens.push_back(rng.uniform_int(k));
        }
        CHECK(std::abs(lm_loss(s, lm).item() - std::log(static_cast<Real>(k))) <= 1e-12);
    }
}

TEST_CASE("lm logits are causal in the inputs") {
    TokenLm lm(small_lm());
    std::vector<std::int64_t> base{lm.bos(), 3, 7, 1, 9, 0, 15, 4};
    const Tensor ref = lm.logits({base});
    CHECK(ref.shape() == Shape{1, 8, 16});
    for (std::size_t j = 1; j < base.size(); ++j) {
        std::vector<std::int64_t> changed = base;
        changed[j] = (changed[j] + 5) % 16;
        const Tensor out = lm.logits({changed});
        for (std::size_t pos = 0; pos < base.size(); ++pos) {
            for (std::int64_t v = 0; v < 16; ++v) {
                const Real a = ref.at({0, static_cast<std::int64_t>(pos), v});
                const Real b = out.at({0, static_cast<std::int64_t>(pos), v});
                if (pos < j) {
                    REQUIRE(a == b);
                }
            }
        }
        CHECK_FALSE(oracle::bit_equal(ref, out));
    }
}

TEST_CASE("lm loss never scores the condition and shifts targets by one") {
    TokenLm lm(small_lm());
    TokenSequence a;
    a.meta = {1, 2, 2};
    a.tokens = {lm.class_token(1), 2, 3, 4, 5};
    a.conditioned = true;
    const std::vector<std::int64_t> in = lm_inputs(a, lm);
    CHECK(in == std::vector<std::int64_t>{lm.class_token(1), 2, 3, 4});
    TokenSequence plain;
    plain.meta = {1, 2, 2};
    plain.tokens = {2, 3, 4, 5};
    CHECK(lm_inputs(plain, lm) == std::vector<std::int64_t>{lm.bos(), 2, 3, 4});

    // Loss oracle: mean of -log_softmax at the target over positions.
    const Tensor lg = lm.logits({in});
    Real expect = 0.0;
    for (std::int64_t pos = 0; pos < 4; ++pos) {
        Real m = -1e300;
        for (std::int64_t v = 0; v < 16; ++v) {
            m = std::max(m, lg.at({0, pos, v}));
        }
        Real z = 0.0;
        for (std::int64_t v = 0; v < 16; ++v) {
            z += std::exp(lg.at({0, pos, v}) - m);
        }
        expect += -(lg.at({0, pos, plain.tokens[static_cast<std::size_t>(pos)]}) - m - std::log(z));
    }
    CHECK(lm_loss(a, lm).item() == doctest::Approx(expect / 4).epsilon(1e-12));
    CHECK_THROWS(lm.class_token(4));
    CHECK_THROWS(lm.logits({{lm.bos(), 16 + 5 + 1}}));
}

TEST_CASE("greedy decoding equals top-1 sampling and the cold limit") {
    const std::vector<Real> logits{0.3, 2.0, -1.0, 1.9, 2.0};
    Rng rng(1);
    CHECK(sample_logits(logits, {.greedy = true}, rng) == 1);
    const std::vector<Real> distinct{0.3, 2.0, -1.0, 1.9, 1.5};
    for (int i = 0; i < 50; ++i) {
        CHECK(sample_logits(logits, {.top_k = 1}, rng) == 1);
        CHECK(sample_logits(distinct, {.temperature = 1e-4}, rng) == 1);
    }
}

TEST_CASE("top-k sampling stays inside the k best ids") {
    const std::vector<Real> logits{0.0, 5.0, 1.0, 4.0, -2.0, 3.0};
    Rng rng(3);
    std::vector<int> hits(6, 0);
    for (int i = 0; i < 3000; ++i) {
        ++hits[static_cast<std::size_t>(sample_logits(logits, {.top_k = 3}, rng))];
    }
    CHECK(hits[0] + hits[2] + hits[4] == 0);
    CHECK(hits[1] > hits[3]);
    CHECK(hits[3] > hits[5]);
    CHECK(hits[5] > 0);
    // Empirical frequencies against the renormalized softmax over {5, 4, 3}.
    const Real z = std::exp(5.0) + std::exp(4.0) + std::exp(3.0);
    CHECK(std::abs(hits[1] / 3000.0 - std::exp(5.0) / z) < 0.04);
    CHECK_THROWS(sample_logits(logits, {.temperature = 0.0}, rng));
}

TEST_CASE("sampled ids stay inside the codebook") {
    TokenLm lm(small_lm(16, 40));
    Rng rng(5);
    std::int64_t drawn = 0;
    for (int rep = 0; rep < 32; ++rep) {
        const TokenGrid g = ar_sample(lm, rep % 4, {2, 4, 4}, {}, rng);
        CHECK(g.size() == 32);
        for (auto id : g.ids) {
            REQUIRE(id >= 0);
            REQUIRE(id < 16);
            ++drawn;
        }
    }
    CHECK(drawn >= 1000);
}

TEST_CASE("autoregressive sampling is deterministic and keeps the prefix") {
    TokenLm lm(small_lm(16, 40));
    const std::vector<std::int64_t> prefix{1, 2, 3, 4, 5};
    Rng r1(9), r2(9);
    const TokenGrid a = ar_sample(lm, std::nullopt, {2, 3, 3}, {.top_k = 4}, r1, prefix);
    const TokenGrid b = ar_sample(lm, std::nullopt, {2, 3, 3}, {.top_k = 4}, r2, prefix);
    CHECK(a == b);
    CHECK(std::equal(prefix.begin(), prefix.end(), a.ids.begin()));

    TokenLm narrow(small_lm(16, 10));
    Rng r3(1);
    CHECK_THROWS_WITH(ar_sample(narrow, std::nullopt, {3, 2, 2}, {}, r3), doctest::Contains("sliding"));
    const TokenGrid slid = ar_sample(narrow, std::nullopt, {6, 2, 2}, {}, r3, {}, true);
    CHECK(slid.size() == 24);
}

TEST_CASE("sliding context matches a model fed only the retained slots") {
    TokenLm lm(small_lm(16, 6));
    // Greedy decode of 4 slots of 2 codes, replayed with explicitly truncated inputs.
    Rng rng(2);
    const TokenGrid g = ar_sample(lm, std::nullopt, {4, 1, 2}, {.greedy = true}, rng, {}, true);
    for (std::int64_t pos = 0; pos < 8; ++pos) {
        std::int64_t from = 0;
        if (pos + 1 > 6) {
            from = (pos + 1 - 6 + 1) / 2;
        }
        std::vector<std::int64_t> in{lm.bos()};
        in.insert(in.end(), g.ids.begin() + from * 2, g.ids.begin() + pos);
        const Tensor lg = lm.logits({in});
        std::int64_t best = 0;
        for (std::int64_t v = 1; v < 16; ++v) {
            if (lg.at({0, lg.dim(1) - 1, v}) > lg.at({0, lg.dim(1) - 1, best})) {
                best = v;
            }
        }
        CHECK(g.ids[static_cast<std::size_t>(pos)] == best);
    }
}

TEST_CASE("frame prediction") {
    TokenizerModel tok(predict_config());
    TokenLm lm(small_lm(16, 64));
    Rng data(4);
    const Tensor clip = data.uniform_tensor({1, 5, 16, 16, 3}, -1, 1);

    Rng r0(1);
    const FramePrediction none = frame_predict(clip, 0, lm, tok, {}, r0);
    CHECK(oracle::bit_equal(none.video, tok.reconstruct(clip)));
    CHECK(none.grid == tok.tokenize(clip));

    Rng r1(3), r2(3);
    const FramePrediction a = frame_predict(clip, 2, lm, tok, {}, r1);
    const FramePrediction b = frame_predict(clip, 2, lm, tok, {}, r2);
    CHECK(a.grid == b.grid);
    CHECK(oracle::bit_equal(a.video, b.video));
    CHECK(a.grid.temporal == 4);
    CHECK(a.video.shape() == Shape{1, 13, 16, 16, 3});
    const TokenGrid known = tok.tokenize(clip);
    CHECK(std::equal(known.ids.begin(), known.ids.end(), a.grid.ids.begin()));

    TokenLm tiny(small_lm(16, 12));
    Rng r3(1);
    CHECK_THROWS_AS(frame_predict(clip, 2, tiny, tok, {}, r3), ShapeError);
    Rng r4(1);
    const FramePrediction slid = frame_predict(clip, 2, tiny, tok, {}, r4, std::nullopt, true);
    CHECK(slid.video.shape() == Shape{1, 13, 16, 16, 3});
    CHECK_THROWS(frame_predict(clip, -1, lm, tok, {}, r4));
}

TEST_CASE("long grids decode window by window") {
    TokenizerModel tok(predict_config());
    Rng rng(6);
    TokenGrid g{1, 4, 2, 2, {}};
    for (int i = 0; i < 16; ++i) {
        g.ids.push_back(rng.uniform_int(16));
    }
    const Tensor v = decode_long(tok, g);
    CHECK(v.shape() == Shape{1, 13, 16, 16, 3});
    // The first window is decoded as is; later frames come from the tail of each window.
    TokenGrid head{1, 2, 2, 2, {g.ids.begin(), g.ids.begin() + 8}};
    CHECK(oracle::bit_equal(slice(v, 1, 0, 5), tok.detokenize(head)));
    TokenGrid last{1, 2, 2, 2, {g.ids.begin() + 8, g.ids.end()}};
    CHECK(oracle::bit_equal(slice(v, 1, 9, 13), slice(tok.detokenize(last), 1, 1, 5)));
}

TEST_CASE("a trained lm responds to its condition") {
    LmConfig c = small_lm(4, 8);
    TokenLm lm(c);
    std::vector<TokenSequence> data;
    for (std::int64_t label = 0; label < 4; ++label) {
        TokenGrid g{1, 1, 2, 2, std::vector<std::int64_t>(4, label)};
        data.push_back(flatten_raster(g, 4, label));
    }
    FitOptions fo;
    fo.iters = 150;
    fo.batch = 4;
    fo.base_lr = 3e-3;
    const std::vector<Real> losses = fit_lm(lm, data, fo);
    CHECK(losses.back() < 0.25 * losses.front());
    for (std::int64_t label = 0; label < 4; ++label) {
        const Tensor lg = lm.logits({{lm.class_token(label)}});
        std::int64_t best = 0;
        for (std::int64_t v = 1; v < 4; ++v) {
            if (lg.at({0, 0, v}) > lg.at({0, 0, best})) {
                best = v;
            }
        }
        CHECK(best == label);
    }
}

TEST_CASE("diffusion schedule") {
    const DiffusionConfig dc = DiffusionConfig::linear(100);
    CHECK(dc.beta(1) == 1e-4);
    CHECK(dc.beta(100) == doctest::Approx(0.02).epsilon(1e-14));
    CHECK(dc.alpha_bar(0) == 1.0);
    CHECK(dc.alpha_bar(1) == doctest::Approx(1.0 - 1e-4).epsilon(1e-15));
    Real prod = 1.0;
    for (std::int64_t t = 1; t <= 100; ++t) {
        prod *= 1.0 - dc.beta(t);
        CHECK(dc.alpha_bar(t) == doctest::Approx(prod).epsilon(1e-14));
        CHECK(dc.alpha_bar(t) < dc.alpha_bar(t - 1));
    }
    CHECK(dc.alpha_bar(100) > 0.0);
    CHECK_THROWS(dc.beta(0));
    CHECK_THROWS(dc.beta(101));
    CHECK_THROWS(DiffusionConfig::linear(0));
    CHECK_THROWS(DiffusionConfig::linear(10, 0.5, 1.5));
    CHECK(DiffusionConfig::linear(1, 0.3, 0.9).beta(1) == 0.3);
}

TEST_CASE("forward noising") {
    const DiffusionConfig dc = DiffusionConfig::linear(50);
    Rng rng(3);
    const Tensor z0 = rng.normal_tensor({2, 3, 4});
    const Tensor zt = ddpm_noise(z0, 30, Tensor::zeros({2, 3, 4}), dc);
    for (std::size_t i = 0; i < 24; ++i) {
        CHECK(zt.data()[i] == std::sqrt(dc.alpha_bar(30)) * z0.data()[i]);
    }
    CHECK_THROWS_AS(ddpm_noise(z0, 30, Tensor::zeros({2, 3}), dc), ShapeError);
    CHECK_THROWS(ddpm_noise(z0, 0, Tensor::zeros({2, 3, 4}), dc));

    // Variance law on a zero signal: Var[z_t] = 1 - alpha_bar_t.
    const std::int64_t n = 10000;
    const Tensor eps = rng.normal_tensor({n});
    const Tensor zs = ddpm_noise(Tensor::zeros({n}), 40, eps, dc);
    Real s2 = 0.0;
    for (Real v : zs.data()) {
        s2 += v * v;
    }
    const Real var = s2 / static_cast<Real>(n);
    const Real target = 1.0 - dc.alpha_bar(40);
    const Real sigma = target * std::sqrt(2.0 / static_cast<Real>(n));
    CHECK(std::abs(var - target) <= 3.0 * sigma);
}

TEST_CASE("diffusion loss limits") {
    const DiffusionConfig dc = DiffusionConfig::linear(20);
    Rng rng(4);
    const Tensor z0 = rng.normal_tensor({1, 3, 2});
    const Tensor batch = concat({z0, z0, z0, z0}, 0);
    const KnownPointOracle perfect(Tensor::from({3, 2}, oracle::values(z0)), dc);
    CHECK(ddpm_train_loss(batch, perfect, dc, rng).item() <= 1e-20);

    // With a zero prediction the loss is ||eps||^2 per sample: mean L*d = 6.
    const ZeroPredictor zero;
    Real sum = 0.0;
    const int reps = 2000;
    for (int i = 0; i < reps; ++i) {
        sum += ddpm_train_loss(batch, zero, dc, rng).item();
    }
    // Var of the batch mean of chi-square(6) over 4 samples is 12 / 4.
    const Real se = std::sqrt(3.0 / reps);
    CHECK(std::abs(sum / reps - 6.0) <= 3.0 * se);
}

TEST_CASE("single-step diffusion inverts exactly with a perfect oracle") {
    const DiffusionConfig dc = DiffusionConfig::linear(1, 0.3, 0.3);
    Rng rng(8);
    const Tensor z0 = rng.normal_tensor({1, 4, 3});
    const Tensor eps = rng.normal_tensor({1, 4, 3});
    const Tensor z1 = ddpm_noise(z0, 1, eps, dc);
    const KnownPointOracle oracle_model(Tensor::from({4, 3}, oracle::values(z0)), dc);
    const Tensor back = ddpm_reverse_step(z1, 1, oracle_model.predict(z1, {1}), dc, rng);
    CHECK(oracle::max_abs_diff(back, z0) <= 1e-5);
}

TEST_CASE("reverse steps add noise only above the first step") {
    const DiffusionConfig dc = DiffusionConfig::linear(10);
    const Tensor z = Tensor::ones({1, 2, 2});
    const Tensor e = Tensor::zeros({1, 2, 2});
    Rng a(1), b(2);
    CHECK(oracle::bit_equal(ddpm_reverse_step(z, 1, e, dc, a), ddpm_reverse_step(z, 1, e, dc, b)));
    CHECK_FALSE(oracle::bit_equal(ddpm_reverse_step(z, 5, e, dc, a), ddpm_reverse_step(z, 5, e, dc, b)));
    const Tensor det = ddpm_reverse_step(z, 1, e, dc, a);
    CHECK(det.at({0, 0, 0}) == doctest::Approx(1.0 / std::sqrt(1.0 - dc.beta(1))).epsilon(1e-15));
}

TEST_CASE("denoiser shapes, sampling and a short fit") {
    const DiffusionConfig dc = DiffusionConfig::linear(20, 1e-3, 0.1);
    Denoiser den({.latent_dim = 2, .max_tokens = 8, .width = 16, .heads = 2, .layers = 1, .seed = 1}, dc.steps);
    Rng rng(2);
    const Tensor z = rng.normal_tensor({3, 4, 2});
    CHECK(den.predict(z, {1, 5, 20}).shape() == z.shape());
    CHECK_THROWS(den.predict(z, {1, 5}));
    CHECK_THROWS(den.predict(z, {0, 5, 20}));
    CHECK_THROWS_AS(den.predict(rng.normal_tensor({1, 9, 2}), {1}), ShapeError);

    Rng s1(7), s2(7);
    const Tensor a = ddpm_sample({1, 2, 2}, 2, 2, den, dc, s1);
    CHECK(a.shape() == Shape{2, 1, 2, 2, 2});
    CHECK(oracle::bit_equal(a, ddpm_sample({1, 2, 2}, 2, 2, den, dc, s2)));

    const Tensor pts = Tensor::from({2, 4, 2}, {1, 1, 1, 1, 1, 1, 1, 1, -1, -1, -1, -1, -1, -1, -1, -1});
    FitOptions fo;
    fo.iters = 200;
    fo.batch = 8;
    fo.base_lr = 3e-3;
    const std::vector<Real> losses = fit_denoiser(den, pts, dc, fo);
    CHECK(losses.size() == 200);
    const Real head = std::accumulate(losses.begin(), losses.begin() + 50, 0.0) / 50;
    const Real tail = std::accumulate(losses.end() - 50, losses.end(), 0.0) / 50;
    CHECK(tail < head);
}
