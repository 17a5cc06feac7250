// Downstream generators over tokenizer latents: a causal token language model
// (class-conditional generation, frame prediction) and a latent DDPM.

#pragma once

#include <optional>
#include <vector>

#include "otok/nn.hpp"
#include "otok/quantizer.hpp"
#include "otok/training.hpp"

namespace otok {

struct GridMeta {
    std::int64_t temporal = 1;
    std::int64_t height = 1;
    std::int64_t width = 1;

    std::int64_t size() const { return temporal * height * width; }
    std::int64_t per_slot() const { return height * width; }
    bool operator==(const GridMeta&) const = default;
};

// Raster-ordered code indices, optionally led by one condition token from the
// extended vocabulary [K, K + classes).
struct TokenSequence {
    std::vector<std::int64_t> tokens;
    bool conditioned = false;
    GridMeta meta;

    std::span<const std::int64_t> codes() const;
    std::optional<std::int64_t> condition() const;
};

// Temporal-major, then row-major within each slot. grid must hold one sample.
TokenSequence flatten_raster(const TokenGrid& grid, std::int64_t codebook_size,
                             std::optional<std::int64_t> label = std::nullopt);
TokenGrid unflatten_raster(const TokenSequence& seq);

struct LmConfig {
    std::int64_t codebook_size = 512;  // K
    std::int64_t classes = kSynthClasses;
    std::int64_t context = 64;  // max input positions (start token + L - 1 codes)
    std::int64_t width = 64;
    std::int64_t heads = 4;
    std::int64_t layers = 2;
    std::int64_t mlp_ratio = 4;
    std::uint64_t seed = 0;

    std::int64_t vocab() const { return codebook_size + classes + 1; }
};

class TokenLm {
public:
    explicit TokenLm(const LmConfig& cfg);
    TokenLm(const TokenLm&) = delete;
    TokenLm& operator=(const TokenLm&) = delete;

    // inputs: B rows of equal length over the extended vocabulary -> (B, L, K) logits.
    Tensor logits(const std::vector<std::vector<std::int64_t>>& inputs) const;

    std::int64_t bos() const { return cfg_.codebook_size + cfg_.classes; }
    std::int64_t class_token(std::int64_t label) const;
    const LmConfig& config() const { return cfg_; }
    nn::ParamStore& params() { return params_; }
    const nn::ParamStore& params() const { return params_; }
    std::vector<std::string> names() const;

private:
    LmConfig cfg_;
    nn::ParamStore params_;
    Tensor embed_;
    Tensor positions_;
    std::vector<nn::TransformerBlock> blocks_;
    nn::LayerNorm norm_;
    nn::Linear head_;
};

// Model input for a sequence: [start, y_1 .. y_{L-1}], start = condition or BOS.
std::vector<std::int64_t> lm_inputs(const TokenSequence& seq, const TokenLm& lm);

// Mean next-token cross-entropy over code positions; the condition is never a target.
Tensor lm_loss(const std::vector<TokenSequence>& batch, const TokenLm& lm);
Tensor lm_loss(const TokenSequence& seq, const TokenLm& lm);

struct SampleOptions {
    Real temperature = 1.0;
    std::int64_t top_k = 0;  // 0 = full vocabulary
    bool greedy = false;
};

// Picks one code from a logit row; deterministic given the rng state.
std::int64_t sample_logits(std::span<const Real> logits, const SampleOptions& opts, Rng& rng);

// Left-to-right sampling of meta.size() codes, continuing after `prefix`.
// With `sliding`, the context drops whole leading slots once it overflows.
TokenGrid ar_sample(const TokenLm& lm, std::optional<std::int64_t> label, const GridMeta& meta,
                    const SampleOptions& opts, Rng& rng, std::span<const std::int64_t> prefix = {},
                    bool sliding = false);

struct FramePrediction {
    TokenGrid grid;
    Tensor video;  // (1, F, H, W, C)
};

// Encodes the prefix clip, samples n_future_slots more slots, and decodes the
// whole grid (in windows when it exceeds the decoder's temporal table).
FramePrediction frame_predict(const Tensor& prefix, std::int64_t n_future_slots, const TokenLm& lm,
                              TokenizerModel& tokenizer, const SampleOptions& opts, Rng& rng,
                              std::optional<std::int64_t> label = std::nullopt, bool sliding = false);

// Decodes a grid of any temporal length, windowing over the decoder's slot table.
Tensor decode_long(const TokenizerModel& tokenizer, const TokenGrid& grid);

struct DiffusionConfig {
    std::int64_t steps = 100;  // N
    Real beta_start = 1e-4;
    Real beta_end = 0.02;
    std::vector<Real> betas;       // index t-1 for t = 1..N
    std::vector<Real> alpha_bars;  // cumulative products

    static DiffusionConfig linear(std::int64_t steps, Real beta_start = 1e-4, Real beta_end = 0.02);
    Real beta(std::int64_t t) const;
    Real alpha_bar(std::int64_t t) const;  // alpha_bar(0) = 1
    void validate() const;
};

// z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps
Tensor ddpm_noise(const Tensor& z0, std::int64_t t, const Tensor& eps, const DiffusionConfig& dc);

class NoisePredictor {
public:
    virtual ~NoisePredictor() = default;
    // z_t: (B, L, d); steps: one t per batch row.
    virtual Tensor predict(const Tensor& z_t, const std::vector<std::int64_t>& steps) const = 0;
};

struct DenoiserConfig {
    std::int64_t latent_dim = 8;
    std::int64_t max_tokens = 64;
    std::int64_t width = 64;
    std::int64_t heads = 4;
    std::int64_t layers = 2;
    std::int64_t mlp_ratio = 4;
    std::uint64_t seed = 0;
};

// Small bidirectional transformer over latent tokens with sinusoidal step features.
class Denoiser : public NoisePredictor {
public:
    Denoiser(const DenoiserConfig& cfg, std::int64_t diffusion_steps);
    Denoiser(const Denoiser&) = delete;
    Denoiser& operator=(const Denoiser&) = delete;

    Tensor predict(const Tensor& z_t, const std::vector<std::int64_t>& steps) const override;

    nn::ParamStore& params() { return params_; }
    const nn::ParamStore& params() const { return params_; }
    std::vector<std::string> names() const;
    const DenoiserConfig& config() const { return cfg_; }

private:
    DenoiserConfig cfg_;
    std::int64_t diffusion_steps_;
    nn::ParamStore params_;
    nn::Linear in_;
    nn::Linear time_;
    Tensor positions_;
    std::vector<nn::TransformerBlock> blocks_;
    nn::LayerNorm norm_;
    nn::Linear out_;
};

// Per-sample ||eps - eps_hat||^2 averaged over the batch, t ~ U{1..N} per sample.
Tensor ddpm_train_loss(const Tensor& z0, const NoisePredictor& model, const DiffusionConfig& dc, Rng& rng);

// Ancestral sampling from pure noise: (batch, meta.size(), d) tokens reshaped to (batch, S, Hg, Wg, d).
Tensor ddpm_sample(const GridMeta& meta, std::int64_t batch, std::int64_t latent_dim, const NoisePredictor& model,
                   const DiffusionConfig& dc, Rng& rng);

// One reverse step x_t -> x_{t-1} given predicted noise; noise is added only for t > 1.
Tensor ddpm_reverse_step(const Tensor& z_t, std::int64_t t, const Tensor& eps_hat, const DiffusionConfig& dc,
                         Rng& rng);

// KL posterior means of a clip batch as (B, L, d); requires a KL-tuned tokenizer.
Tensor encode_latents(TokenizerModel& tokenizer, const Tensor& x);
// (B, S, Hg, Wg, d) latents through the KL up-projection and the decoder.
Tensor decode_latents(const TokenizerModel& tokenizer, const Tensor& z);

struct FitOptions {
    std::int64_t iters = 500;
    std::int64_t batch = 8;
    Real base_lr = 1e-3;
    Real warmup_fraction = 0.02;
    Real clip_norm = 1.0;
    std::uint64_t seed = 0;
};

// Adam with warmup + cosine decay on random minibatches; returns the per-step loss.
std::vector<Real> fit_lm(TokenLm& lm, const std::vector<TokenSequence>& data, const FitOptions& opts);

// latents: (M, L, d) training set.
std::vector<Real> fit_denoiser(Denoiser& model, const Tensor& latents, const DiffusionConfig& dc,
                               const FitOptions& opts);

}  // namespace otok
