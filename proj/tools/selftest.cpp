#include "selftest.hpp"

#include <cmath>
#include <functional>
#include <limits>

#include "otok/io.hpp"

namespace otok::cli {

using namespace ops;

namespace {

bool same_bits(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        return false;
    }
    for (std::size_t i = 0; i < a.data().size(); ++i) {
        if (a.data()[i] != b.data()[i]) {
            return false;
        }
    }
    return true;
}

TokenizerConfig small_tokenizer() {
    TokenizerConfig c;
    c.patch.hidden = 16;
    c.patch.resolutions = {16, 32};
    c.patch.max_frames = 9;
    c.net.spatial_layers = 1;
    c.net.temporal_layers = 1;
    c.net.heads = 2;
    c.codebook_size = 16;
    c.seed = 3;
    return c;
}

bool gradients() {
    Rng rng(1);
    const Tensor x = rng.normal_tensor({3, 4});
    const Tensor w = rng.normal_tensor({4, 5});
    const std::vector<std::function<Tensor(const Tensor&)>> fns{
        [&](const Tensor& a) { return reduce_sum(square(matmul(a, w))); },
        [&](const Tensor& a) { return reduce_sum(mul(softmax(a, 1), a)); },
        [&](const Tensor& a) { return reduce_sum(square(layer_norm(a, 1))); },
        [&](const Tensor& a) { return reduce_sum(gelu(a)); },
        [&](const Tensor& a) { return reduce_sum(mul(l2_normalize(a, 1), a)); },
        [&](const Tensor& a) { return reduce_sum(log_softmax(a, 0)); },
        [&](const Tensor& a) { return reduce_sum(exp(scale(a, 0.3))); },
    };
    for (const auto& f : fns) {
        if (!(check_gradient(f, x, 1e-6) <= 1e-3)) {
            return false;
        }
    }
    return true;
}

bool causality_and_locality() {
    TokenizerModel model(small_tokenizer());
    Rng rng(2);
    const Tensor x = rng.uniform_tensor({1, 9, 32, 32, 3}, -1, 1);
    const Tensor base = model.encoder()(x).embeddings;

    // Future frames: perturb the last slot's frames, earlier slots must not move.
    std::vector<Real> v(x.data().begin(), x.data().end());
    const std::size_t frame = 32 * 32 * 3;
    for (std::size_t i = 5 * frame; i < v.size(); ++i) {
        v[i] = -v[i];
    }
    const Tensor future = model.encoder()(Tensor::from(x.shape(), v)).embeddings;
    if (!same_bits(slice(base, 1, 0, 2), slice(future, 1, 0, 2)) || same_bits(base, future)) {
        return false;
    }

    // One spatial window (top-left 16x16 pixels) of a single image.
    const Tensor img = rng.uniform_tensor({1, 1, 32, 32, 3}, -1, 1);
    std::vector<Real> w(img.data().begin(), img.data().end());
    for (std::size_t y = 0; y < 16; ++y) {
        for (std::size_t xx = 0; xx < 16; ++xx) {
            for (std::size_t c = 0; c < 3; ++c) {
                w[(y * 32 + xx) * 3 + c] += 0.5;
            }
        }
    }
    const Tensor a = model.encoder()(img).embeddings;
    const Tensor b = model.encoder()(Tensor::from(img.shape(), w)).embeddings;
    return same_bits(slice(a, 2, 2, 4), slice(b, 2, 2, 4)) && same_bits(slice(a, 3, 2, 4), slice(b, 3, 2, 4)) &&
           !same_bits(a, b);
}

bool lm_causality() {
    LmConfig c;
    c.codebook_size = 16;
    c.context = 8;
    c.width = 16;
    c.heads = 2;
    c.layers = 1;
    TokenLm lm(c);
    std::vector<std::int64_t> in{lm.bos(), 1, 2, 3, 4, 5};
    const Tensor a = lm.logits({in});
    in[4] = 9;
    const Tensor b = lm.logits({in});
    return same_bits(slice(a, 1, 0, 4), slice(b, 1, 0, 4)) && !same_bits(a, b);
}

bool quantizer_oracle() {
    TokenizerModel model(small_tokenizer());
    Rng rng(4);
    const TokenField e{rng.normal_tensor({1, 2, 4, 4, 16}), Modality::Video};
    const Quantized q = model.codebook().quantize(e);
    const Tensor& entries = model.params().get("quantizer.codebook");
    const std::int64_t d = entries.dim(1);
    for (std::int64_t n = 0; n < q.tokens.dim(0); ++n) {
        std::int64_t best = -1;
        Real best_dist = std::numeric_limits<Real>::infinity();
        for (std::int64_t k = 0; k < entries.dim(0); ++k) {
            Real dist = 0.0;
            for (std::int64_t j = 0; j < d; ++j) {
                const Real diff = q.tokens.at({n, j}) - entries.at({k, j});
                dist += diff * diff;
            }
            if (dist < best_dist) {
                best_dist = dist;
                best = k;
            }
        }
        if (q.indices.ids[static_cast<std::size_t>(n)] != best) {
            return false;
        }
    }
    return true;
}

bool shape_law() {
    TokenizerConfig c = small_tokenizer();
    c.patch.resolutions = {16, 32, 64};
    c.patch.max_frames = 17;
    TokenizerModel model(c);
    for (std::int64_t frames : {1, 5, 17}) {
        for (std::int64_t res : {16, 64}) {
            const Tensor x = Tensor::zeros({1, frames, res, res, 3});
            const TokenGrid g = model.tokenize(x);
            const std::int64_t expect = (1 + (frames - 1) / 4) * (res / 8) * (res / 8);
            if (g.size() != expect || model.detokenize(g).shape() != x.shape()) {
                return false;
            }
        }
    }
    return true;
}

bool formats() {
    TokenizerModel model(small_tokenizer());
    Checkpoint ck;
    store_params(ck, model.params());
    const Checkpoint back = decode_checkpoint(encode_checkpoint(ck));
    for (const auto& [name, t] : ck.tensors) {
        if (!same_bits(t, back.tensors.at(name))) {
            return false;
        }
    }
    TokenFile tf;
    tf.grid = model.tokenize(Rng(5).uniform_tensor({1, 5, 16, 16, 3}, -1, 1));
    tf.codebook_size = 16;
    tf.condition = 1;
    const TokenFile tb = decode_tokens(encode_tokens(tf));
    const Tensor small = Tensor::from({2, 2}, {0.5, -1.25, 3.0, 0.0});
    return tb.grid == tf.grid && tb.condition == tf.condition && same_bits(decode_tensor(encode_tensor(small)), small);
}

bool diffusion_inversion() {
    const DiffusionConfig dc = DiffusionConfig::linear(1, 0.2, 0.2);
    Rng rng(6);
    const Tensor z0 = rng.normal_tensor({1, 4, 2});
    const Tensor eps = rng.normal_tensor({1, 4, 2});
    const Tensor z1 = ddpm_noise(z0, 1, eps, dc);
    const Tensor back = ddpm_reverse_step(z1, 1, eps, dc, rng);
    Real worst = 0.0;
    for (std::size_t i = 0; i < back.data().size(); ++i) {
        worst = std::max(worst, std::abs(back.data()[i] - z0.data()[i]));
    }
    Real prev = 1.0;
    const DiffusionConfig sched = DiffusionConfig::linear(100);
    for (std::int64_t t = 1; t <= 100; ++t) {
        if (!(sched.alpha_bar(t) < prev)) {
            return false;
        }
        prev = sched.alpha_bar(t);
    }
    return worst <= 1e-5;
}

}  // namespace

int run_selftest(std::ostream& out) {
    const std::vector<std::pair<const char*, std::function<bool()>>> checks{
        {"gradients", gradients},
        {"causality-locality", causality_and_locality},
        {"lm-causality", lm_causality},
        {"quantizer-oracle", quantizer_oracle},
        {"shape-law", shape_law},
        {"formats", formats},
        {"diffusion", diffusion_inversion},
    };
    int failed = 0;
    for (const auto& [name, check] : checks) {
        bool ok = false;
        std::string detail;
        try {
            ok = check();
        } catch (const std::exception& e) {
            detail = std::string(": ") + e.what();
        }
        out << (ok ? "PASS " : "FAIL ") << name << detail << '\n';
        failed += ok ? 0 : 1;
    }
    out << (failed == 0 ? "selftest passed" : "selftest failed") << '\n';
    return failed == 0 ? 0 : 1;
}

}  // namespace otok::cli
