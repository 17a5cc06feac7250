#include "otok/quantizer.hpp"

#include <cmath>

namespace otok {

using namespace otok::ops;

TokenGrid TokenGrid::sample(std::int64_t b) const {
    if (b < 0 || b >= batch) {
        throw Error("token grid sample " + std::to_string(b) + " out of range");
    }
    TokenGrid g{1, temporal, height, width, {}};
    g.ids.assign(ids.begin() + b * per_sample(), ids.begin() + (b + 1) * per_sample());
    return g;
}

Codebook::Codebook(nn::ParamStore& store, const QuantizerConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    if (cfg.codebook_size < 1) {
        throw Error("codebook is empty");
    }
    Rng rng = nn::init_stream(seed, "quantizer.codebook");
    Tensor init = l2_normalize(rng.normal_tensor({cfg.codebook_size, cfg.latent_dim}), 1);
    entries_ = store.add("quantizer.codebook", init);
    down_ = nn::Linear(store, "quantizer.proj_down", cfg.hidden, cfg.latent_dim, seed, /*bias=*/false);
    up_ = nn::Linear(store, "quantizer.proj_up", cfg.latent_dim, cfg.hidden, seed);
    usage_.assign(static_cast<std::size_t>(cfg.codebook_size), 0);
}

Tensor Codebook::project(const Tensor& embeddings) const {
    const auto c = embeddings.dim(-1);
    Tensor flat = reshape(embeddings, {embeddings.numel() / c, c});
    Tensor z = down_(flat);
    return cfg_.normalize ? l2_normalize(z, 1) : z;
}

std::vector<std::int64_t> Codebook::nearest(const Tensor& tokens) const {
    const auto k = entries_.dim(0);
    const auto d = entries_.dim(1);
    if (tokens.rank() != 2 || tokens.dim(1) != d) {
        throw ShapeError("nearest: tokens must be (N, " + std::to_string(d) + "), got " + shape_str(tokens.shape()));
    }
    const auto n = tokens.dim(0);
    const auto x = tokens.data();
    const auto e = entries_.data();
    std::vector<std::int64_t> out(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        std::int64_t best = 0;
        Real best_dist = 0.0;
        for (std::int64_t j = 0; j < k; ++j) {
            Real dist = 0.0;
            for (std::int64_t q = 0; q < d; ++q) {
                const Real diff = x[static_cast<std::size_t>(i * d + q)] - e[static_cast<std::size_t>(j * d + q)];
                dist += diff * diff;
            }
            if (j == 0 || dist < best_dist) {
                best = j;
                best_dist = dist;
            }
        }
        out[static_cast<std::size_t>(i)] = best;
    }
    return out;
}

Quantized Codebook::quantize(const TokenField& e) {
    if (entries_.dim(0) < 1) {
        throw Error("quantize: empty codebook");
    }
    const Tensor& emb = e.embeddings;
    if (emb.rank() != 5) {
        throw ShapeError("quantize expects a (B, S, Hg, Wg, c) token field, got " + shape_str(emb.shape()));
    }
    Quantized q;
    q.tokens = project(emb);
    const auto ids = nearest(q.tokens);
    q.codes = gather_rows(entries_, ids);

    // lambda1 * ||sg[e] - z_q||^2 + lambda2 * ||e - sg[z_q]||^2
    const Tensor codebook_term = reduce_sum(square(sub(q.tokens.detach(), q.codes)));
    const Tensor embed_term = reduce_sum(square(sub(q.tokens, q.codes.detach())));
    q.loss = add(scale(codebook_term, cfg_.commit_weight), scale(embed_term, cfg_.embed_weight));

    const Tensor st = straight_through(q.codes.detach(), q.tokens);
    const Shape& s = emb.shape();
    q.latents = reshape(up_(st), {s[0], s[1], s[2], s[3], cfg_.hidden});
    q.indices = TokenGrid{s[0], s[1], s[2], s[3], ids};
    for (auto id : ids) {
        ++usage_[static_cast<std::size_t>(id)];
    }
    return q;
}

Tensor Codebook::lookup(const TokenGrid& indices) const {
    if (static_cast<std::int64_t>(indices.ids.size()) != indices.size() || indices.ids.empty()) {
        throw ShapeError("lookup: token grid holds " + std::to_string(indices.ids.size()) + " ids for dims " +
                         shape_str({indices.batch, indices.temporal, indices.height, indices.width}));
    }
    for (auto id : indices.ids) {
        if (id < 0 || id >= cfg_.codebook_size) {
            throw Error("lookup: index " + std::to_string(id) + " out of range for codebook of size " +
                        std::to_string(cfg_.codebook_size));
        }
    }
    Tensor z = up_(gather_rows(entries_, indices.ids));
    return reshape(z, {indices.batch, indices.temporal, indices.height, indices.width, cfg_.hidden});
}

void Codebook::renormalize() {
    if (!cfg_.normalize) {
        return;
    }
    NoGradGuard guard;
    const Tensor n = l2_normalize(entries_, 1);
    entries_.assign(n.data());
}

void Codebook::reset_usage() { std::fill(usage_.begin(), usage_.end(), 0); }

void Codebook::add_usage(const std::vector<std::int64_t>& counts) {
    if (counts.size() != usage_.size()) {
        throw Error("usage merge: size mismatch");
    }
    for (std::size_t i = 0; i < counts.size(); ++i) {
        usage_[i] += counts[i];
    }
}

CodebookStats codebook_stats(const std::vector<std::int64_t>& counts) {
    std::int64_t total = 0;
    std::int64_t used = 0;
    for (auto c : counts) {
        total += c;
        used += c > 0 ? 1 : 0;
    }
    if (total == 0 || counts.empty()) {
        throw Error("codebook_stats: no tokens quantized since reset");
    }
    Real entropy = 0.0;
    for (auto c : counts) {
        if (c > 0) {
            const Real p = static_cast<Real>(c) / static_cast<Real>(total);
            entropy -= p * std::log(p);
        }
    }
    return {static_cast<Real>(used) / static_cast<Real>(counts.size()), std::exp(entropy)};
}

CodebookStats codebook_stats(const Codebook& cb) { return codebook_stats(cb.usage()); }

KlHead::KlHead(nn::ParamStore& store, std::int64_t hidden, std::int64_t latent_dim, Real weight, std::uint64_t seed)
    : mean_(store, "kl.mean", hidden, latent_dim, seed), logvar_(store, "kl.logvar", hidden, latent_dim, seed),
      up_(store, "kl.proj_up", latent_dim, hidden, seed), weight_(weight) {}

void KlHead::init_from(const Codebook& cb) {
    auto fill = [](const Tensor& t, Real v) { t.assign(std::vector<Real>(static_cast<std::size_t>(t.numel()), v)); };
    mean_.weight().assign(cb.proj_down().weight().data());
    fill(mean_.bias(), 0.0);
    fill(logvar_.weight(), 0.0);
    // Small initial posterior noise (std = exp(-3)).
    fill(logvar_.bias(), -6.0);
    up_.weight().assign(cb.proj_up().weight().data());
    up_.bias().assign(cb.proj_up().bias().data());
}

KlOutput KlHead::operator()(const TokenField& e, Rng* rng, const Tensor* noise) const {
    const Tensor& emb = e.embeddings;
    if (emb.rank() != 5) {
        throw ShapeError("kl head expects a (B, S, Hg, Wg, c) token field, got " + shape_str(emb.shape()));
    }
    const auto c = emb.dim(4);
    Tensor flat = reshape(emb, {emb.numel() / c, c});
    KlOutput out;
    out.posterior.mean = mean_(flat);
    out.posterior.logvar = clamp(logvar_(flat), kLogvarMin, kLogvarMax);
    const Tensor& mean = out.posterior.mean;
    const Tensor& logvar = out.posterior.logvar;
    if (noise) {
        out.z = add(mean, mul(exp(scale(logvar, 0.5)), *noise));
    } else if (rng) {
        out.z = add(mean, mul(exp(scale(logvar, 0.5)), rng->normal_tensor(mean.shape())));
    } else {
        out.z = mean;
    }
    const Tensor terms = sub(add(square(mean), exp(logvar)), add_scalar(logvar, 1.0));
    out.kl_raw = scale(reduce_sum(terms), 0.5);
    out.kl = scale(out.kl_raw, weight_);
    const Shape& s = emb.shape();
    out.latents = reshape(up_(out.z), {s[0], s[1], s[2], s[3], up_.out_features()});
    return out;
}

Real gaussian_kl(std::span<const Real> mean, std::span<const Real> logvar) {
    if (mean.size() != logvar.size()) {
        throw ShapeError("gaussian_kl: mean and logvar sizes differ");
    }
    Real kl = 0.0;
    for (std::size_t i = 0; i < mean.size(); ++i) {
        kl += 0.5 * (mean[i] * mean[i] + std::exp(logvar[i]) - 1.0 - logvar[i]);
    }
    return kl;
}

}  // namespace otok
