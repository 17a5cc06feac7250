// Latent heads: factorized l2-normalized vector quantization and a diagonal
// Gaussian (KL) head for the continuous tokenizer.

#pragma once

#include <vector>

#include "otok/nn.hpp"
#include "otok/rng.hpp"
#include "otok/tokenizer.hpp"

namespace otok {

// Integer code indices laid out (batch, temporal, height, width), row-major.
struct TokenGrid {
    std::int64_t batch = 1;
    std::int64_t temporal = 1;
    std::int64_t height = 1;
    std::int64_t width = 1;
    std::vector<std::int64_t> ids;

    std::int64_t per_sample() const { return temporal * height * width; }
    std::int64_t size() const { return batch * per_sample(); }
    TokenGrid sample(std::int64_t b) const;
    bool operator==(const TokenGrid&) const = default;
};

struct QuantizerConfig {
    std::int64_t codebook_size = 512;  // K
    std::int64_t latent_dim = 8;       // d
    std::int64_t hidden = 128;         // c
    bool normalize = true;             // l2-normalize tokens and entries
    Real commit_weight = 1.0;          // lambda1: codebook term
    Real embed_weight = 1.0;           // lambda2: encoder term
};

struct Quantized {
    Tensor latents;   // (B, S, Hg, Wg, c): proj_up of selected entries, straight-through to the encoder
    TokenGrid indices;
    Tensor loss;      // scalar, summed over tokens
    Tensor tokens;    // (N, d) projected (and normalized) encoder tokens
    Tensor codes;     // (N, d) selected entries
};

class Codebook {
public:
    Codebook() = default;
    Codebook(nn::ParamStore& store, const QuantizerConfig& cfg, std::uint64_t seed);

    // Projects (..., c) tokens to the code space: (N, d), normalized when configured.
    Tensor project(const Tensor& embeddings) const;

    // Nearest entry by squared Euclidean distance; lowest index wins ties.
    std::vector<std::int64_t> nearest(const Tensor& tokens) const;

    Quantized quantize(const TokenField& e);
    Tensor lookup(const TokenGrid& indices) const;

    // Re-projects entries onto the unit sphere (no-op when normalization is off).
    void renormalize();

    void reset_usage();
    const std::vector<std::int64_t>& usage() const { return usage_; }
    void add_usage(const std::vector<std::int64_t>& counts);

    const QuantizerConfig& config() const { return cfg_; }
    const Tensor& entries() const { return entries_; }
    const nn::Linear& proj_down() const { return down_; }
    const nn::Linear& proj_up() const { return up_; }

private:
    QuantizerConfig cfg_;
    Tensor entries_;  // (K, d)
    nn::Linear down_;
    nn::Linear up_;
    std::vector<std::int64_t> usage_;
};

struct CodebookStats {
    Real usage_fraction = 0.0;
    Real perplexity = 0.0;
};

CodebookStats codebook_stats(const std::vector<std::int64_t>& counts);
CodebookStats codebook_stats(const Codebook& cb);

struct GaussianLatent {
    Tensor mean;    // (N, d)
    Tensor logvar;  // (N, d), clamped
};

constexpr Real kLogvarMin = -30.0;
constexpr Real kLogvarMax = 20.0;

struct KlOutput {
    GaussianLatent posterior;
    Tensor z;        // (N, d) sample (or mean at evaluation)
    Tensor latents;  // (B, S, Hg, Wg, c) proj_up(z) for the decoder
    Tensor kl;       // scalar, lambda3-weighted, summed over elements
    Tensor kl_raw;   // scalar, unweighted
};

class KlHead {
public:
    KlHead() = default;
    KlHead(nn::ParamStore& store, std::int64_t hidden, std::int64_t latent_dim, Real weight, std::uint64_t seed);

    // Continues from a trained quantizer: mean <- proj_down, up <- proj_up.
    void init_from(const Codebook& cb);

    // rng == nullptr evaluates at the posterior mean. noise, when given, replaces the rng draw.
    KlOutput operator()(const TokenField& e, Rng* rng, const Tensor* noise = nullptr) const;

    Real weight() const { return weight_; }
    void set_weight(Real w) { weight_ = w; }
    const nn::Linear& mean_proj() const { return mean_; }
    const nn::Linear& logvar_proj() const { return logvar_; }
    const nn::Linear& proj_up() const { return up_; }

private:
    nn::Linear mean_;
    nn::Linear logvar_;
    nn::Linear up_;
    Real weight_ = 1e-6;
};

// Closed-form KL(N(mean, exp(logvar)) || N(0, I)) summed over elements.
Real gaussian_kl(std::span<const Real> mean, std::span<const Real> logvar);

}  // namespace otok
