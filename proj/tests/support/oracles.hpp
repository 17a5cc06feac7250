// Independent reference computations shared by unit and acceptance tests.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "otok/generation.hpp"
#include "otok/training.hpp"

namespace oracle {

using otok::Real;
using otok::Tensor;

inline std::vector<Real> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

inline bool bit_equal(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

inline Real max_abs_diff(const Tensor& a, const Tensor& b) {
    Real m = 0.0;
    for (std::size_t i = 0; i < a.data().size(); ++i) {
        m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    }
    return m;
}

// Exhaustive nearest neighbour with explicit lowest-index tie-break.
inline std::vector<std::int64_t> nearest(const std::vector<Real>& tokens, const std::vector<Real>& entries,
                                         std::int64_t d) {
    const auto n = static_cast<std::int64_t>(tokens.size()) / d;
    const auto k = static_cast<std::int64_t>(entries.size()) / d;
    std::vector<std::int64_t> out;
    for (std::int64_t i = 0; i < n; ++i) {
        Real best = std::numeric_limits<Real>::infinity();
        std::int64_t arg = -1;
        for (std::int64_t j = 0; j < k; ++j) {
            Real s = 0.0;
            for (std::int64_t q = 0; q < d; ++q) {
                const Real diff = tokens[i * d + q] - entries[j * d + q];
                s += diff * diff;
            }
            if (s < best) {
                best = s;
                arg = j;
            }
        }
        out.push_back(arg);
    }
    return out;
}

// Sum over tokens of (l1 + l2) * ||token - entry||^2, the forward value of the two stop-gradient terms.
inline Real vq_loss(const std::vector<Real>& tokens, const std::vector<Real>& entries,
                    const std::vector<std::int64_t>& idx, std::int64_t d, Real l1, Real l2) {
    Real s = 0.0;
    for (std::size_t i = 0; i < idx.size(); ++i) {
        for (std::int64_t q = 0; q < d; ++q) {
            const Real diff = tokens[i * d + q] - entries[idx[i] * d + q];
            s += (l1 + l2) * diff * diff;
        }
    }
    return s;
}

// Entropy rate (nats) of a stationary Markov chain: sum_i pi_i H(P_i).
inline Real entropy_rate(const std::vector<std::vector<Real>>& p) {
    const auto n = p.size();
    std::vector<Real> pi(n, 1.0 / static_cast<Real>(n));
    for (int it = 0; it < 10000; ++it) {
        std::vector<Real> next(n, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                next[j] += pi[i] * p[i][j];
            }
        }
        pi = next;
    }
    Real h = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            if (p[i][j] > 0.0) {
                h -= pi[i] * p[i][j] * std::log(p[i][j]);
            }
        }
    }
    return h;
}

// Composed encoder -> quantize -> decode -> loss gradient check. Finite
// differences run on the straight-through surrogate: the selected indices, the
// offset z_q - e and every stop-gradient operand are frozen at the base point,
// so the surrogate equals the loss there and its derivative is the defined gradient.
// Returns the worst |analytic - numeric| / max(1, |analytic|) over `per_param`
// random coordinates of every trainable parameter.
inline Real composed_gradient_error(otok::TokenizerModel& model, const Tensor& x, std::int64_t per_param,
                                    Real eps, std::uint64_t seed, std::string* worst = nullptr) {
    using namespace otok::ops;
    auto& cb = model.codebook();
    const auto cfg = cb.config();

    // Analytic gradient through the real pipeline.
    const otok::TokenField e0 = model.encoder()(x);
    otok::Quantized q0 = cb.quantize(e0);
    const auto ntok = static_cast<Real>(q0.indices.ids.size());
    const Tensor total0 = add(otok::recon_loss(x, model.decoder()(q0.latents)), scale(q0.loss, 1.0 / ntok));
    const otok::Gradients grads = otok::backward(total0);

    Tensor offset;
    const Tensor tok0 = q0.tokens.detach();
    const Tensor codes0 = q0.codes.detach();
    {
        otok::NoGradGuard g;
        offset = sub(codes0, tok0);
    }
    const auto ids = q0.indices;
    auto surrogate = [&]() {
        otok::NoGradGuard g;
        const otok::TokenField e = model.encoder()(x);
        const Tensor tok = cb.project(e.embeddings);
        const Tensor codes = gather_rows(cb.entries(), ids.ids);
        const Tensor zq = add(tok, offset);
        const Tensor lat = reshape(cb.proj_up()(zq), e.embeddings.shape());
        const Tensor vq = add(scale(reduce_sum(square(sub(tok0, codes))), cfg.commit_weight),
                              scale(reduce_sum(square(sub(tok, codes0))), cfg.embed_weight));
        return add(otok::recon_loss(x, model.decoder()(lat)), scale(vq, 1.0 / ntok)).item();
    };

    Real err = 0.0;
    otok::Rng rng(seed);
    for (const auto& name : model.trainable(otok::LatentKind::Vq)) {
        Tensor p = model.params().get(name);
        const Tensor g = grads[p];
        std::vector<Real> vals = values(p);
        for (std::int64_t r = 0; r < per_param; ++r) {
            const auto i = static_cast<std::size_t>(rng.uniform_int(p.numel()));
            const Real keep = vals[i];
            vals[i] = keep + eps;
            p.assign(vals);
            const Real up = surrogate();
            vals[i] = keep - eps;
            p.assign(vals);
            const Real down = surrogate();
            vals[i] = keep;
            p.assign(vals);
            const Real numeric = (up - down) / (2.0 * eps);
            const Real a = g.data()[i];
            const Real rel = std::abs(a - numeric) / std::max(1.0, std::abs(a));
            if (rel > err) {
                err = rel;
                if (worst) {
                    *worst = name + "[" + std::to_string(i) + "]";
                }
            }
        }
    }
    return err;
}

// Small tokenizer used by fast tests: c = 16, one block of each kind, p = 8, t = 4.
inline otok::TokenizerConfig tiny_config(std::int64_t codebook = 16, std::uint64_t seed = 3) {
    otok::TokenizerConfig cfg;
    cfg.patch.hidden = 16;
    cfg.patch.resolutions = {16, 32};
    cfg.patch.max_frames = 9;
    cfg.net.spatial_layers = 1;
    cfg.net.temporal_layers = 1;
    cfg.net.heads = 2;
    cfg.net.window = 2;
    cfg.codebook_size = codebook;
    cfg.seed = seed;
    return cfg;
}

}  // namespace oracle
