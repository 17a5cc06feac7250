#include "otok/generation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace otok {

using namespace otok::ops;

namespace {

std::vector<std::string> param_names(const nn::ParamStore& store) {
    std::vector<std::string> out;
    out.reserve(store.all().size());
    for (const auto& [name, _] : store.all()) {
        out.push_back(name);
    }
    return out;
}

TokenGrid slot_range(const TokenGrid& g, std::int64_t s0, std::int64_t s1) {
    TokenGrid out{g.batch, s1 - s0, g.height, g.width, {}};
    const std::int64_t n = g.height * g.width;
    out.ids.reserve(static_cast<std::size_t>(out.size()));
    for (std::int64_t b = 0; b < g.batch; ++b) {
        const auto base = g.ids.begin() + b * g.per_sample();
        out.ids.insert(out.ids.end(), base + s0 * n, base + s1 * n);
    }
    return out;
}

}  // namespace

std::span<const std::int64_t> TokenSequence::codes() const {
    std::span<const std::int64_t> all(tokens);
    return conditioned ? all.subspan(1) : all;
}

std::optional<std::int64_t> TokenSequence::condition() const {
    if (!conditioned || tokens.empty()) {
        return std::nullopt;
    }
    return tokens.front();
}

TokenSequence flatten_raster(const TokenGrid& grid, std::int64_t codebook_size, std::optional<std::int64_t> label) {
    if (grid.batch != 1) {
        throw ShapeError("flatten_raster: expected one sample, got batch " + std::to_string(grid.batch));
    }
    if (static_cast<std::int64_t>(grid.ids.size()) != grid.size()) {
        throw ShapeError("flatten_raster: grid holds " + std::to_string(grid.ids.size()) + " ids, dims need " +
                         std::to_string(grid.size()));
    }
    TokenSequence seq;
    seq.meta = {grid.temporal, grid.height, grid.width};
    if (label) {
        if (*label < 0) {
            throw Error("flatten_raster: negative class label");
        }
        seq.conditioned = true;
        seq.tokens.push_back(codebook_size + *label);
    }
    seq.tokens.insert(seq.tokens.end(), grid.ids.begin(), grid.ids.end());
    return seq;
}

TokenGrid unflatten_raster(const TokenSequence& seq) {
    const auto codes = seq.codes();
    if (static_cast<std::int64_t>(codes.size()) != seq.meta.size()) {
        throw ShapeError("unflatten_raster: " + std::to_string(codes.size()) + " codes for grid of " +
                         std::to_string(seq.meta.size()));
    }
    return {1, seq.meta.temporal, seq.meta.height, seq.meta.width, {codes.begin(), codes.end()}};
}

TokenLm::TokenLm(const LmConfig& cfg) : cfg_(cfg) {
    if (cfg.codebook_size < 1 || cfg.classes < 0 || cfg.context < 1 || cfg.width % cfg.heads != 0) {
        throw Error("token lm: invalid configuration");
    }
    Rng er = nn::init_stream(cfg.seed, "lm.embed");
    embed_ = params_.add("lm.embed", er.normal_tensor({cfg.vocab(), cfg.width}, 0.02));
    Rng pr = nn::init_stream(cfg.seed, "lm.positions");
    positions_ = params_.add("lm.positions", pr.normal_tensor({cfg.context, cfg.width}, 0.02));
    for (std::int64_t i = 0; i < cfg.layers; ++i) {
        blocks_.emplace_back(params_, "lm.block." + std::to_string(i), cfg.width, cfg.heads, cfg.mlp_ratio, cfg.seed);
    }
    norm_ = nn::LayerNorm(params_, "lm.norm", cfg.width);
    head_ = nn::Linear(params_, "lm.head", cfg.width, cfg.codebook_size, cfg.seed);
}

std::int64_t TokenLm::class_token(std::int64_t label) const {
    if (label < 0 || label >= cfg_.classes) {
        throw Error("class label " + std::to_string(label) + " out of range for " + std::to_string(cfg_.classes) +
                    " classes");
    }
    return cfg_.codebook_size + label;
}

std::vector<std::string> TokenLm::names() const { return param_names(params_); }

Tensor TokenLm::logits(const std::vector<std::vector<std::int64_t>>& inputs) const {
    if (inputs.empty() || inputs[0].empty()) {
        throw ShapeError("token lm: empty input");
    }
    const auto b = static_cast<std::int64_t>(inputs.size());
    const auto len = static_cast<std::int64_t>(inputs[0].size());
    if (len > cfg_.context) {
        throw ShapeError("token lm: input length " + std::to_string(len) + " exceeds context " +
                         std::to_string(cfg_.context));
    }
    std::vector<std::int64_t> flat;
    flat.reserve(static_cast<std::size_t>(b * len));
    for (const auto& row : inputs) {
        if (static_cast<std::int64_t>(row.size()) != len) {
            throw ShapeError("token lm: rows of unequal length");
        }
        for (auto id : row) {
            if (id < 0 || id >= cfg_.vocab()) {
                throw Error("token lm: id " + std::to_string(id) + " outside vocabulary of " +
                            std::to_string(cfg_.vocab()));
            }
        }
        flat.insert(flat.end(), row.begin(), row.end());
    }
    Tensor x = reshape(gather_rows(embed_, flat), {b, len, cfg_.width});
    x = add(x, slice(positions_, 0, 0, len));
    const auto mask = nn::causal_mask(len);
    for (const auto& blk : blocks_) {
        x = blk(x, &mask);
    }
    return head_(norm_(x));
}

std::vector<std::int64_t> lm_inputs(const TokenSequence& seq, const TokenLm& lm) {
    const auto codes = seq.codes();
    if (codes.empty()) {
        throw ShapeError("lm_inputs: sequence has no codes");
    }
    const auto& cfg = lm.config();
    std::int64_t start = lm.bos();
    if (auto c = seq.condition()) {
        if (*c < cfg.codebook_size || *c >= cfg.codebook_size + cfg.classes) {
            throw Error("lm_inputs: condition token " + std::to_string(*c) + " outside the class range");
        }
        start = *c;
    }
    std::vector<std::int64_t> in;
    in.reserve(codes.size());
    in.push_back(start);
    in.insert(in.end(), codes.begin(), codes.end() - 1);
    return in;
}

Tensor lm_loss(const std::vector<TokenSequence>& batch, const TokenLm& lm) {
    if (batch.empty()) {
        throw ShapeError("lm_loss: empty batch");
    }
    const std::int64_t k = lm.config().codebook_size;
    std::vector<std::vector<std::int64_t>> inputs;
    std::vector<Real> onehot;
    for (const auto& seq : batch) {
        inputs.push_back(lm_inputs(seq, lm));
        for (auto id : seq.codes()) {
            if (id < 0 || id >= k) {
                throw Error("lm_loss: target " + std::to_string(id) + " outside codebook of " + std::to_string(k));
            }
            const auto at = onehot.size();
            onehot.resize(at + static_cast<std::size_t>(k), 0.0);
            onehot[at + static_cast<std::size_t>(id)] = 1.0;
        }
    }
    const Tensor lp = log_softmax(lm.logits(inputs), 2);
    const Tensor pick = Tensor::from(lp.shape(), std::move(onehot));
    const auto count = static_cast<Real>(lp.dim(0) * lp.dim(1));
    return scale(reduce_sum(mul(lp, pick)), -1.0 / count);
}

Tensor lm_loss(const TokenSequence& seq, const TokenLm& lm) { return lm_loss(std::vector<TokenSequence>{seq}, lm); }

std::int64_t sample_logits(std::span<const Real> logits, const SampleOptions& opts, Rng& rng) {
    if (logits.empty()) {
        throw ShapeError("sample_logits: empty logits");
    }
    const auto n = static_cast<std::int64_t>(logits.size());
    if (opts.greedy) {
        return std::max_element(logits.begin(), logits.end()) - logits.begin();
    }
    if (!(opts.temperature > 0.0)) {
        throw Error("sample_logits: temperature must be positive");
    }
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::int64_t keep = n;
    if (opts.top_k > 0 && opts.top_k < n) {
        keep = opts.top_k;
        std::stable_sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
            return logits[static_cast<std::size_t>(a)] > logits[static_cast<std::size_t>(b)];
        });
        order.resize(static_cast<std::size_t>(keep));
        std::sort(order.begin(), order.end());
    }
    Real top = -std::numeric_limits<Real>::infinity();
    for (auto i : order) {
        top = std::max(top, logits[static_cast<std::size_t>(i)]);
    }
    std::vector<Real> w(order.size());
    Real total = 0.0;
    for (std::size_t j = 0; j < order.size(); ++j) {
        w[j] = std::exp((logits[static_cast<std::size_t>(order[j])] - top) / opts.temperature);
        total += w[j];
    }
    Real u = rng.uniform() * total;
    for (std::size_t j = 0; j < order.size(); ++j) {
        if (u < w[j]) {
            return order[j];
        }
        u -= w[j];
    }
    // Rounding left u past the last bucket: take the last nonzero weight.
    for (std::size_t j = order.size(); j-- > 0;) {
        if (w[j] > 0.0) {
            return order[j];
        }
    }
    return order.back();
}

TokenGrid ar_sample(const TokenLm& lm, std::optional<std::int64_t> label, const GridMeta& meta,
                    const SampleOptions& opts, Rng& rng, std::span<const std::int64_t> prefix, bool sliding) {
    const std::int64_t total = meta.size();
    const std::int64_t k = lm.config().codebook_size;
    const std::int64_t context = lm.config().context;
    if (total < 1) {
        throw ShapeError("ar_sample: empty grid");
    }
    if (static_cast<std::int64_t>(prefix.size()) > total) {
        throw ShapeError("ar_sample: prefix longer than the requested grid");
    }
    for (auto id : prefix) {
        if (id < 0 || id >= k) {
            throw Error("ar_sample: prefix code " + std::to_string(id) + " outside codebook of " + std::to_string(k));
        }
    }
    const std::int64_t start = label ? lm.class_token(*label) : lm.bos();
    const std::int64_t n = meta.per_slot();
    std::vector<std::int64_t> codes(prefix.begin(), prefix.end());
    codes.reserve(static_cast<std::size_t>(total));

    NoGradGuard guard;
    for (auto pos = static_cast<std::int64_t>(codes.size()); pos < total; ++pos) {
        std::int64_t from = 0;
        if (pos + 1 > context) {
            if (!sliding) {
                throw ShapeError("ar_sample: " + std::to_string(total) + " tokens exceed the LM context of " +
                                 std::to_string(context) + "; enable sliding generation");
            }
            // Drop whole leading slots until the remainder fits.
            from = (pos + 1 - context + n - 1) / n;
            if (from * n > pos) {
                throw ShapeError("ar_sample: LM context " + std::to_string(context) +
                                 " cannot hold one slot of " + std::to_string(n) + " tokens");
            }
        }
        std::vector<std::int64_t> in;
        in.reserve(static_cast<std::size_t>(pos - from * n + 1));
        in.push_back(start);
        in.insert(in.end(), codes.begin() + from * n, codes.begin() + pos);
        const Tensor lg = lm.logits({in});
        const auto row = lg.data().subspan(static_cast<std::size_t>((lg.dim(1) - 1) * k), static_cast<std::size_t>(k));
        codes.push_back(sample_logits(row, opts, rng));
    }
    return {1, meta.temporal, meta.height, meta.width, std::move(codes)};
}

Tensor decode_long(const TokenizerModel& tokenizer, const TokenGrid& grid) {
    const std::int64_t m = tokenizer.config().patch.max_slots();
    const std::int64_t t = tokenizer.config().patch.temporal_patch;
    if (grid.temporal <= m) {
        return tokenizer.detokenize(grid);
    }
    // Sliding windows of m slots; each later window contributes only its last slot's frames.
    std::vector<Tensor> parts{tokenizer.detokenize(slot_range(grid, 0, m))};
    for (std::int64_t s = m; s < grid.temporal; ++s) {
        const Tensor w = tokenizer.detokenize(slot_range(grid, s - m + 1, s + 1));
        parts.push_back(slice(w, 1, w.dim(1) - t, w.dim(1)));
    }
    return concat(parts, 1);
}

FramePrediction frame_predict(const Tensor& prefix, std::int64_t n_future_slots, const TokenLm& lm,
                              TokenizerModel& tokenizer, const SampleOptions& opts, Rng& rng,
                              std::optional<std::int64_t> label, bool sliding) {
    if (n_future_slots < 0) {
        throw Error("frame_predict: negative number of future slots");
    }
    const Tensor x = as_batch(prefix);
    if (x.dim(0) != 1) {
        throw ShapeError("frame_predict: expected one clip, got batch " + std::to_string(x.dim(0)));
    }
    const TokenGrid known = tokenizer.tokenize(x);
    const GridMeta meta{known.temporal + n_future_slots, known.height, known.width};
    FramePrediction out;
    out.grid = ar_sample(lm, label, meta, opts, rng, known.ids, sliding);
    out.video = decode_long(tokenizer, out.grid);
    return out;
}

DiffusionConfig DiffusionConfig::linear(std::int64_t steps, Real beta_start, Real beta_end) {
    DiffusionConfig dc;
    dc.steps = steps;
    dc.beta_start = beta_start;
    dc.beta_end = beta_end;
    if (steps < 1) {
        throw Error("diffusion: steps must be at least 1");
    }
    Real ab = 1.0;
    for (std::int64_t i = 0; i < steps; ++i) {
        const Real f = steps > 1 ? static_cast<Real>(i) / static_cast<Real>(steps - 1) : 0.0;
        const Real b = beta_start + (beta_end - beta_start) * f;
        ab *= 1.0 - b;
        dc.betas.push_back(b);
        dc.alpha_bars.push_back(ab);
    }
    dc.validate();
    return dc;
}

Real DiffusionConfig::beta(std::int64_t t) const {
    if (t < 1 || t > steps) {
        throw Error("diffusion: step " + std::to_string(t) + " outside [1, " + std::to_string(steps) + "]");
    }
    return betas[static_cast<std::size_t>(t - 1)];
}

Real DiffusionConfig::alpha_bar(std::int64_t t) const {
    if (t == 0) {
        return 1.0;
    }
    if (t < 0 || t > steps) {
        throw Error("diffusion: step " + std::to_string(t) + " outside [0, " + std::to_string(steps) + "]");
    }
    return alpha_bars[static_cast<std::size_t>(t - 1)];
}

void DiffusionConfig::validate() const {
    if (steps < 1 || static_cast<std::int64_t>(betas.size()) != steps ||
        static_cast<std::int64_t>(alpha_bars.size()) != steps) {
        throw Error("diffusion: schedule does not match step count");
    }
    for (auto b : betas) {
        if (!(b > 0.0 && b < 1.0)) {
            throw Error("diffusion: beta values must lie in (0, 1)");
        }
    }
}

Tensor ddpm_noise(const Tensor& z0, std::int64_t t, const Tensor& eps, const DiffusionConfig& dc) {
    if (z0.shape() != eps.shape()) {
        throw ShapeError("ddpm_noise: z0 " + shape_str(z0.shape()) + " vs noise " + shape_str(eps.shape()));
    }
    dc.beta(t);  // range check: 1 <= t <= N
    const Real ab = dc.alpha_bar(t);
    return add(scale(z0, std::sqrt(ab)), scale(eps, std::sqrt(1.0 - ab)));
}

namespace {

Tensor step_features(const std::vector<std::int64_t>& steps, std::int64_t width) {
    const std::int64_t half = width / 2;
    std::vector<Real> v(static_cast<std::size_t>(static_cast<std::int64_t>(steps.size()) * width), 0.0);
    for (std::size_t b = 0; b < steps.size(); ++b) {
        for (std::int64_t i = 0; i < half; ++i) {
            const Real f = std::exp(-std::log(10000.0) * static_cast<Real>(i) / static_cast<Real>(half));
            const Real a = static_cast<Real>(steps[b]) * f;
            v[b * static_cast<std::size_t>(width) + static_cast<std::size_t>(i)] = std::sin(a);
            v[b * static_cast<std::size_t>(width) + static_cast<std::size_t>(half + i)] = std::cos(a);
        }
    }
    return Tensor::from({static_cast<std::int64_t>(steps.size()), width}, std::move(v));
}

}  // namespace

Denoiser::Denoiser(const DenoiserConfig& cfg, std::int64_t diffusion_steps)
    : cfg_(cfg), diffusion_steps_(diffusion_steps) {
    if (cfg.latent_dim < 1 || cfg.max_tokens < 1 || cfg.width % cfg.heads != 0 || diffusion_steps < 1) {
        throw Error("denoiser: invalid configuration");
    }
    in_ = nn::Linear(params_, "denoiser.in", cfg.latent_dim, cfg.width, cfg.seed);
    time_ = nn::Linear(params_, "denoiser.time", cfg.width, cfg.width, cfg.seed);
    Rng pr = nn::init_stream(cfg.seed, "denoiser.positions");
    positions_ = params_.add("denoiser.positions", pr.normal_tensor({cfg.max_tokens, cfg.width}, 0.02));
    for (std::int64_t i = 0; i < cfg.layers; ++i) {
        blocks_.emplace_back(params_, "denoiser.block." + std::to_string(i), cfg.width, cfg.heads, cfg.mlp_ratio,
                             cfg.seed);
    }
    norm_ = nn::LayerNorm(params_, "denoiser.norm", cfg.width);
    out_ = nn::Linear(params_, "denoiser.out", cfg.width, cfg.latent_dim, cfg.seed);
}

std::vector<std::string> Denoiser::names() const { return param_names(params_); }

Tensor Denoiser::predict(const Tensor& z_t, const std::vector<std::int64_t>& steps) const {
    if (z_t.rank() != 3 || z_t.dim(2) != cfg_.latent_dim) {
        throw ShapeError("denoiser: expected (B, L, " + std::to_string(cfg_.latent_dim) + ") input, got " +
                         shape_str(z_t.shape()));
    }
    const std::int64_t b = z_t.dim(0);
    const std::int64_t len = z_t.dim(1);
    if (len > cfg_.max_tokens) {
        throw ShapeError("denoiser: " + std::to_string(len) + " tokens exceed the table of " +
                         std::to_string(cfg_.max_tokens));
    }
    if (static_cast<std::int64_t>(steps.size()) != b) {
        throw ShapeError("denoiser: one step per batch row required");
    }
    for (auto t : steps) {
        if (t < 1 || t > diffusion_steps_) {
            throw Error("denoiser: step " + std::to_string(t) + " outside [1, " + std::to_string(diffusion_steps_) +
                        "]");
        }
    }
    Tensor x = add(in_(z_t), slice(positions_, 0, 0, len));
    x = add(x, reshape(time_(step_features(steps, cfg_.width)), {b, 1, cfg_.width}));
    for (const auto& blk : blocks_) {
        x = blk(x);
    }
    return out_(norm_(x));
}

Tensor ddpm_train_loss(const Tensor& z0, const NoisePredictor& model, const DiffusionConfig& dc, Rng& rng) {
    if (z0.rank() != 3) {
        throw ShapeError("ddpm_train_loss: expected (B, L, d) latents, got " + shape_str(z0.shape()));
    }
    const std::int64_t b = z0.dim(0);
    std::vector<std::int64_t> steps(static_cast<std::size_t>(b));
    std::vector<Real> keep(static_cast<std::size_t>(b));
    std::vector<Real> mix(static_cast<std::size_t>(b));
    for (std::int64_t i = 0; i < b; ++i) {
        const std::int64_t t = 1 + rng.uniform_int(dc.steps);
        steps[static_cast<std::size_t>(i)] = t;
        keep[static_cast<std::size_t>(i)] = std::sqrt(dc.alpha_bar(t));
        mix[static_cast<std::size_t>(i)] = std::sqrt(1.0 - dc.alpha_bar(t));
    }
    const Tensor eps = rng.normal_tensor(z0.shape());
    const Tensor z_t = add(mul(z0, Tensor::from({b, 1, 1}, keep)), mul(eps, Tensor::from({b, 1, 1}, mix)));
    const Tensor eps_hat = model.predict(z_t, steps);
    return scale(reduce_sum(square(sub(eps, eps_hat))), 1.0 / static_cast<Real>(b));
}

Tensor ddpm_reverse_step(const Tensor& z_t, std::int64_t t, const Tensor& eps_hat, const DiffusionConfig& dc,
                         Rng& rng) {
    if (z_t.shape() != eps_hat.shape()) {
        throw ShapeError("ddpm_reverse_step: latent " + shape_str(z_t.shape()) + " vs noise " +
                         shape_str(eps_hat.shape()));
    }
    const Real beta = dc.beta(t);
    const Real ab = dc.alpha_bar(t);
    const Real c_eps = beta / std::sqrt(1.0 - ab);
    const Real c_out = 1.0 / std::sqrt(1.0 - beta);
    const Real sigma = t > 1 ? std::sqrt(beta * (1.0 - dc.alpha_bar(t - 1)) / (1.0 - ab)) : 0.0;
    const auto z = z_t.data();
    const auto e = eps_hat.data();
    std::vector<Real> out(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) {
        out[i] = c_out * (z[i] - c_eps * e[i]);
    }
    if (sigma > 0.0) {
        for (auto& v : out) {
            v += sigma * rng.normal();
        }
    }
    return Tensor::from(z_t.shape(), std::move(out));
}

Tensor ddpm_sample(const GridMeta& meta, std::int64_t batch, std::int64_t latent_dim, const NoisePredictor& model,
                   const DiffusionConfig& dc, Rng& rng) {
    if (batch < 1 || latent_dim < 1 || meta.size() < 1) {
        throw ShapeError("ddpm_sample: empty request");
    }
    NoGradGuard guard;
    Tensor z = rng.normal_tensor({batch, meta.size(), latent_dim});
    for (std::int64_t t = dc.steps; t >= 1; --t) {
        const Tensor eps_hat = model.predict(z, std::vector<std::int64_t>(static_cast<std::size_t>(batch), t));
        z = ddpm_reverse_step(z, t, eps_hat, dc, rng);
    }
    return reshape(z, {batch, meta.temporal, meta.height, meta.width, latent_dim});
}

Tensor encode_latents(TokenizerModel& tokenizer, const Tensor& x) {
    if (tokenizer.provenance().kind != LatentKind::Kl) {
        throw Error("encode_latents: tokenizer has not been fine-tuned with the KL head");
    }
    NoGradGuard guard;
    const TokenField e = tokenizer.encoder()(as_batch(x));
    const Tensor z = tokenizer.kl_head()(e, nullptr).z;
    const Shape& s = e.embeddings.shape();
    return reshape(z, {s[0], s[1] * s[2] * s[3], z.dim(1)});
}

Tensor decode_latents(const TokenizerModel& tokenizer, const Tensor& z) {
    const std::int64_t d = tokenizer.config().net.latent_dim;
    if (z.rank() != 5 || z.dim(4) != d) {
        throw ShapeError("decode_latents: expected (B, S, Hg, Wg, " + std::to_string(d) + ") latents, got " +
                         shape_str(z.shape()));
    }
    NoGradGuard guard;
    const nn::Linear& up = tokenizer.kl_head().proj_up();
    const Tensor h = up(reshape(z, {z.numel() / d, d}));
    return tokenizer.decoder()(reshape(h, {z.dim(0), z.dim(1), z.dim(2), z.dim(3), up.out_features()}));
}

namespace {

OptimState make_optimizer(const FitOptions& opts) {
    if (opts.iters < 1 || opts.batch < 1) {
        throw Error("fit: iterations and batch must be positive");
    }
    OptimState o;
    o.base_lr = opts.base_lr;
    o.clip_norm = opts.clip_norm;
    o.total_iters = opts.iters;
    o.warmup_iters = static_cast<std::int64_t>(std::llround(opts.warmup_fraction * static_cast<Real>(opts.iters)));
    return o;
}

}  // namespace

std::vector<Real> fit_lm(TokenLm& lm, const std::vector<TokenSequence>& data, const FitOptions& opts) {
    if (data.empty()) {
        throw Error("fit_lm: empty training set");
    }
    OptimState opt = make_optimizer(opts);
    const auto names = lm.names();
    std::vector<Real> losses;
    losses.reserve(static_cast<std::size_t>(opts.iters));
    for (std::int64_t it = 0; it < opts.iters; ++it) {
        Rng rng = Rng(opts.seed, 0x1a9).split(static_cast<std::uint64_t>(it));
        std::vector<TokenSequence> batch;
        for (std::int64_t i = 0; i < opts.batch; ++i) {
            batch.push_back(data[static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(data.size())))]);
        }
        const Tensor loss = lm_loss(batch, lm);
        adam_step(opt, lm.params(), names, backward(loss), lr_at(it, opt));
        losses.push_back(loss.item());
    }
    return losses;
}

std::vector<Real> fit_denoiser(Denoiser& model, const Tensor& latents, const DiffusionConfig& dc,
                               const FitOptions& opts) {
    if (latents.rank() != 3 || latents.dim(0) < 1) {
        throw ShapeError("fit_denoiser: expected (M, L, d) latents, got " + shape_str(latents.shape()));
    }
    OptimState opt = make_optimizer(opts);
    const auto names = model.names();
    const std::int64_t m = latents.dim(0);
    const std::int64_t row = latents.dim(1) * latents.dim(2);
    std::vector<Real> losses;
    losses.reserve(static_cast<std::size_t>(opts.iters));
    for (std::int64_t it = 0; it < opts.iters; ++it) {
        Rng rng = Rng(opts.seed, 0xd1f).split(static_cast<std::uint64_t>(it));
        std::vector<Real> z;
        z.reserve(static_cast<std::size_t>(opts.batch * row));
        for (std::int64_t i = 0; i < opts.batch; ++i) {
            const auto src = latents.data().subspan(static_cast<std::size_t>(rng.uniform_int(m) * row),
                                                    static_cast<std::size_t>(row));
            z.insert(z.end(), src.begin(), src.end());
        }
        const Tensor z0 = Tensor::from({opts.batch, latents.dim(1), latents.dim(2)}, std::move(z));
        const Tensor loss = ddpm_train_loss(z0, model, dc, rng);
        adam_step(opt, model.params(), names, backward(loss), lr_at(it, opt));
        losses.push_back(loss.item());
    }
    return losses;
}

}  // namespace otok
