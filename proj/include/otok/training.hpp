// Tokenizer model assembly, losses, optimizer, and the progressive
// image-then-joint training schedule.

#pragma once

#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "otok/data.hpp"
#include "otok/quantizer.hpp"
#include "otok/tokenizer.hpp"

namespace otok {

enum class LatentKind { Vq, Kl };

const char* latent_kind_name(LatentKind k);

struct TokenizerConfig {
    PatchConfig patch;
    NetConfig net;
    std::int64_t codebook_size = 512;
    bool normalize_codes = true;
    Real commit_weight = 1.0;  // lambda1
    Real embed_weight = 1.0;   // lambda2
    Real kl_weight = 1e-6;     // lambda3
    std::uint64_t seed = 0;

    QuantizerConfig quantizer() const;
    void validate() const;
};

struct Provenance {
    LatentKind kind = LatentKind::Vq;
    std::int64_t stage = 0;  // 0 = untrained
    std::int64_t iter = 0;
    bool vq_trained = false;
};

class TokenizerModel {
public:
    explicit TokenizerModel(const TokenizerConfig& cfg);
    TokenizerModel(const TokenizerModel&) = delete;
    TokenizerModel& operator=(const TokenizerModel&) = delete;

    const TokenizerConfig& config() const { return cfg_; }
    nn::ParamStore& params() { return params_; }
    const nn::ParamStore& params() const { return params_; }

    Encoder& encoder() { return encoder_; }
    const Encoder& encoder() const { return encoder_; }
    Decoder& decoder() { return decoder_; }
    const Decoder& decoder() const { return decoder_; }
    Codebook& codebook() { return codebook_; }
    const Codebook& codebook() const { return codebook_; }
    KlHead& kl_head() { return kl_; }
    const KlHead& kl_head() const { return kl_; }

    Provenance& provenance() { return provenance_; }
    const Provenance& provenance() const { return provenance_; }

    // Names of parameters updated by the VQ and KL objectives respectively.
    std::vector<std::string> trainable(LatentKind kind) const;

    // Switches to the continuous head, initialized from the trained quantizer.
    void begin_kl_finetune();

    // Evaluation helpers (no graph recorded).
    TokenGrid tokenize(const Tensor& x);
    Tensor detokenize(const TokenGrid& grid) const;
    Tensor reconstruct(const Tensor& x);

private:
    TokenizerConfig cfg_;
    nn::ParamStore params_;
    Encoder encoder_;
    Decoder decoder_;
    Codebook codebook_;
    KlHead kl_;
    Provenance provenance_;
};

// Mean squared error over all elements.
Tensor recon_loss(const Tensor& x, const Tensor& x_hat);

enum class JointMode { Alternate, VideoOnly };

struct StageSchedule {
    std::int64_t stage1_iters = 0;
    std::int64_t stage2_iters = 0;
    std::int64_t image_res_stage1 = 32;
    std::vector<std::int64_t> joint_res{32, 48, 64};
    JointMode joint_mode = JointMode::Alternate;
    std::int64_t video_len = 9;

    std::int64_t total() const { return stage1_iters + stage2_iters; }
    void validate(const PatchConfig& patch, const NetConfig& net) const;
};

struct Directive {
    std::int64_t stage = 1;
    Modality modality = Modality::Image;
    std::int64_t resolution = 0;
};

// Deterministic in (iter, seed): stage 1 is fixed-resolution images; stage 2
// alternates image/video starting with an image and draws a resolution per iteration.
Directive schedule_at(std::int64_t iter, const StageSchedule& s, std::uint64_t seed);

struct OptimState {
    Real base_lr = 1e-3;
    Real beta1 = 0.9;
    Real beta2 = 0.99;
    Real eps = 1e-8;
    Real clip_norm = 1.0;  // <= 0 disables clipping
    std::int64_t warmup_iters = 0;
    std::int64_t total_iters = 1;
    std::int64_t step = 0;
    std::map<std::string, std::vector<Real>> first;
    std::map<std::string, std::vector<Real>> second;
};

// Linear warmup to base_lr, then cosine decay reaching 0 at total_iters.
Real lr_at(std::int64_t iter, const OptimState& o);

// Clips by global norm, applies one Adam update to the named parameters, and
// returns the pre-clip global gradient norm.
Real adam_step(OptimState& o, const nn::ParamStore& params, const std::vector<std::string>& names,
               const Gradients& grads, Real lr);

struct StepMetrics {
    Real total = 0.0;
    Real recon = 0.0;
    Real vq_or_kl = 0.0;
    Real usage = 0.0;
    Real perplexity = 0.0;
    Real lr = 0.0;
};

// One VQ step: recon + per-token L_VQ; codebook re-normalized after the update.
StepMetrics train_step_vq(const Tensor& batch, TokenizerModel& model, OptimState& opt, Real lr);

// One KL step: recon + lambda3 KL. noise, when given, replaces the rng draw.
StepMetrics train_step_kl(const Tensor& batch, TokenizerModel& model, OptimState& opt, Real lr, Rng& rng,
                          const Tensor* noise = nullptr);

struct DataConfig {
    SynthKind video_kind = SynthKind::MovingShapes;
    SynthKind image_kind = SynthKind::MovingShapes;
    std::int64_t videos = 64;
    std::int64_t images = 64;
    std::int64_t batch_videos = 4;
    std::int64_t batch_images = 8;
    std::uint64_t seed = 1;
};

// Lazily generated per-resolution datasets.
class DataPool {
public:
    explicit DataPool(DataConfig cfg, std::int64_t video_len);

    const std::vector<Sample>& videos(std::int64_t res);
    const std::vector<Sample>& images(std::int64_t res);
    Tensor batch(Modality m, std::int64_t res, Rng& rng);
    const DataConfig& config() const { return cfg_; }
    std::int64_t video_len() const { return video_len_; }

private:
    DataConfig cfg_;
    std::int64_t video_len_;
    std::map<std::int64_t, std::vector<Sample>> videos_;
    std::map<std::int64_t, std::vector<Sample>> images_;
};

struct LogRow {
    std::int64_t iter = 0;
    Directive directive;
    StepMetrics metrics;
};

// Tab-separated: iter, stage, modality, resolution, lr, recon, vq_or_kl, usage, perplexity.
std::string format_log_row(const LogRow& row);

struct TrainOptions {
    StageSchedule schedule;
    DataConfig data;
    Real base_lr = 1e-3;
    Real warmup_fraction = 0.02;
    Real clip_norm = 1.0;
    std::int64_t stats_interval = 100;  // usage counters reset every this many iterations
    std::uint64_t seed = 0;
};

// Runs the progressive VQ schedule from `start` to schedule.total().
class VqTrainer {
public:
    VqTrainer(TokenizerModel& model, TrainOptions opts);

    LogRow step();
    void run(std::ostream* log, std::int64_t until = -1);
    std::int64_t iter() const { return iter_; }
    void set_iter(std::int64_t it) { iter_ = it; }
    bool done() const { return iter_ >= opts_.schedule.total(); }

    OptimState& optimizer() { return opt_; }
    DataPool& data() { return pool_; }
    const TrainOptions& options() const { return opts_; }

private:
    TokenizerModel& model_;
    TrainOptions opts_;
    OptimState opt_;
    DataPool pool_;
    std::int64_t iter_ = 0;
};

struct KlOptions {
    std::int64_t iters = 500;
    std::int64_t resolution = 32;
    DataConfig data;
    std::int64_t video_len = 9;
    Real base_lr = 1e-4;
    Real warmup_fraction = 0.02;
    Real clip_norm = 1.0;
    std::uint64_t seed = 0;
};

std::vector<LogRow> run_kl_finetune(TokenizerModel& model, const KlOptions& opts, std::ostream* log);

// Mean reconstruction MSE over samples (VQ path, or KL posterior mean).
Real evaluate_mse(TokenizerModel& model, const std::vector<Sample>& samples, LatentKind kind,
                  std::int64_t batch = 8);

}  // namespace otok
