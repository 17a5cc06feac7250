#include "otok/training.hpp"

#include <cmath>
#include <iomanip>
#include <numbers>
#include <ostream>
#include <sstream>

namespace otok {

using namespace otok::ops;

const char* latent_kind_name(LatentKind k) { return k == LatentKind::Vq ? "vq" : "kl"; }

QuantizerConfig TokenizerConfig::quantizer() const {
    QuantizerConfig q;
    q.codebook_size = codebook_size;
    q.latent_dim = net.latent_dim;
    q.hidden = patch.hidden;
    q.normalize = normalize_codes;
    q.commit_weight = commit_weight;
    q.embed_weight = embed_weight;
    return q;
}

void TokenizerConfig::validate() const {
    patch.validate();
    net.validate(patch);
    if (codebook_size < 1) {
        throw Error("codebook_size must be >= 1");
    }
    if (kl_weight < 0.0 || commit_weight < 0.0 || embed_weight < 0.0) {
        throw Error("loss weights must be nonnegative");
    }
}

TokenizerModel::TokenizerModel(const TokenizerConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    encoder_ = Encoder(params_, cfg.patch, cfg.net, cfg.seed);
    decoder_ = Decoder(params_, cfg.patch, cfg.net, cfg.seed);
    codebook_ = Codebook(params_, cfg.quantizer(), cfg.seed);
    kl_ = KlHead(params_, cfg.patch.hidden, cfg.net.latent_dim, cfg.kl_weight, cfg.seed);
}

std::vector<std::string> TokenizerModel::trainable(LatentKind kind) const {
    const std::string excluded = kind == LatentKind::Vq ? "kl." : "quantizer.";
    std::vector<std::string> names;
    for (const auto& [name, _] : params_.all()) {
        if (name.rfind(excluded, 0) != 0) {
            names.push_back(name);
        }
    }
    return names;
}

void TokenizerModel::begin_kl_finetune() {
    if (!provenance_.vq_trained || provenance_.kind != LatentKind::Vq) {
        throw Error("KL fine-tuning requires a VQ-trained model");
    }
    kl_.init_from(codebook_);
    provenance_.kind = LatentKind::Kl;
}

TokenGrid TokenizerModel::tokenize(const Tensor& x) {
    NoGradGuard guard;
    return codebook_.quantize(encoder_(x)).indices;
}

Tensor TokenizerModel::detokenize(const TokenGrid& grid) const {
    NoGradGuard guard;
    return decoder_(codebook_.lookup(grid));
}

Tensor TokenizerModel::reconstruct(const Tensor& x) {
    NoGradGuard guard;
    const TokenField e = encoder_(x);
    if (provenance_.kind == LatentKind::Kl) {
        return decoder_(kl_(e, nullptr).latents);
    }
    return decoder_(codebook_.quantize(e).latents);
}

Tensor recon_loss(const Tensor& x, const Tensor& x_hat) {
    if (x.shape() != x_hat.shape()) {
        throw ShapeError("recon_loss: shapes " + shape_str(x.shape()) + " and " + shape_str(x_hat.shape()) +
                         " differ");
    }
    return reduce_mean(square(sub(x, x_hat)));
}

void StageSchedule::validate(const PatchConfig& patch, const NetConfig& net) const {
    if (stage1_iters < 0 || stage2_iters < 0) {
        throw Error("schedule: iteration counts must be nonnegative");
    }
    const auto unit = patch.patch * net.window;
    auto check = [&](std::int64_t r) {
        if (r <= 0 || r % unit != 0) {
            throw Error("schedule: resolution " + std::to_string(r) + " not divisible by p*w=" + std::to_string(unit));
        }
        if (r > patch.max_resolution()) {
            throw Error("schedule: resolution " + std::to_string(r) + " exceeds the configured maximum");
        }
    };
    check(image_res_stage1);
    if (stage2_iters > 0 && joint_res.empty()) {
        throw Error("schedule: empty joint resolution set");
    }
    for (auto r : joint_res) {
        check(r);
    }
    if (video_len < 1 || (video_len - 1) % patch.temporal_patch != 0 || video_len > patch.max_frames) {
        throw Error("schedule: video_len must be 1 + a multiple of t and <= max_frames");
    }
}

Directive schedule_at(std::int64_t iter, const StageSchedule& s, std::uint64_t seed) {
    if (iter < 0 || iter >= s.total()) {
        throw Error("schedule_at: iteration " + std::to_string(iter) + " outside [0, " + std::to_string(s.total()) +
                    ")");
    }
    if (iter < s.stage1_iters) {
        return {1, Modality::Image, s.image_res_stage1};
    }
    const std::int64_t k = iter - s.stage1_iters;
    Directive d;
    d.stage = 2;
    d.modality = (s.joint_mode == JointMode::VideoOnly || k % 2 == 1) ? Modality::Video : Modality::Image;
    Rng rng = Rng(seed, 0x5ced).split(static_cast<std::uint64_t>(iter));
    d.resolution = s.joint_res[static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(s.joint_res.size())))];
    return d;
}

Real lr_at(std::int64_t iter, const OptimState& o) {
    if (iter < 0) {
        throw Error("lr_at: negative iteration");
    }
    if (iter < o.warmup_iters) {
        return o.base_lr * static_cast<Real>(iter) / static_cast<Real>(o.warmup_iters);
    }
    if (iter >= o.total_iters) {
        return 0.0;
    }
    const Real span = static_cast<Real>(o.total_iters - o.warmup_iters);
    const Real progress = static_cast<Real>(iter - o.warmup_iters) / span;
    return o.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

Real adam_step(OptimState& o, const nn::ParamStore& params, const std::vector<std::string>& names,
               const Gradients& grads, Real lr) {
    std::vector<Tensor> gs;
    gs.reserve(names.size());
    Real sq = 0.0;
    for (const auto& name : names) {
        gs.push_back(grads[params.get(name)]);
        for (Real g : gs.back().data()) {
            sq += g * g;
        }
    }
    const Real norm = std::sqrt(sq);
    const Real clip = (o.clip_norm > 0.0 && norm > o.clip_norm) ? o.clip_norm / norm : 1.0;
    ++o.step;
    const Real c1 = 1.0 - std::pow(o.beta1, static_cast<Real>(o.step));
    const Real c2 = 1.0 - std::pow(o.beta2, static_cast<Real>(o.step));
    std::vector<Real> updated;
    for (std::size_t i = 0; i < names.size(); ++i) {
        const Tensor p = params.get(names[i]);
        const auto g = gs[i].data();
        auto& m = o.first[names[i]];
        auto& v = o.second[names[i]];
        if (m.empty()) {
            m.assign(g.size(), 0.0);
            v.assign(g.size(), 0.0);
        }
        const auto w = p.data();
        updated.assign(w.begin(), w.end());
        for (std::size_t j = 0; j < g.size(); ++j) {
            const Real gj = g[j] * clip;
            m[j] = o.beta1 * m[j] + (1.0 - o.beta1) * gj;
            v[j] = o.beta2 * v[j] + (1.0 - o.beta2) * gj * gj;
            updated[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + o.eps);
        }
        p.assign(updated);
    }
    return norm;
}

namespace {

std::string fmt(Real v) {
    std::ostringstream os;
    os << std::setprecision(9) << v;
    return os.str();
}

}  // namespace

StepMetrics train_step_vq(const Tensor& batch, TokenizerModel& model, OptimState& opt, Real lr) {
    const Tensor x = as_batch(batch);
    StepMetrics m;
    m.lr = lr;
    Real recon_v = std::nan("");
    Real vq_v = std::nan("");
    try {
        const TokenField e = model.encoder()(x);
        const Quantized q = model.codebook().quantize(e);
        const Tensor x_hat = model.decoder()(q.latents);
        const Tensor recon = recon_loss(x, x_hat);
        recon_v = recon.item();
        const Tensor vq = scale(q.loss, 1.0 / static_cast<Real>(q.tokens.dim(0)));
        vq_v = vq.item();
        const Tensor total = add(recon, vq);
        const Gradients grads = backward(total);
        adam_step(opt, model.params(), model.trainable(LatentKind::Vq), grads, lr);
        model.codebook().renormalize();
        m.total = total.item();
        m.recon = recon_v;
        m.vq_or_kl = vq_v;
    } catch (const NumericFault& err) {
        throw NumericFault(std::string("vq step aborted: ") + err.what() + " [recon=" + fmt(recon_v) +
                           " vq=" + fmt(vq_v) + " lr=" + fmt(lr) + "]");
    }
    const CodebookStats st = codebook_stats(model.codebook());
    m.usage = st.usage_fraction;
    m.perplexity = st.perplexity;
    return m;
}

StepMetrics train_step_kl(const Tensor& batch, TokenizerModel& model, OptimState& opt, Real lr, Rng& rng,
                          const Tensor* noise) {
    if (model.provenance().kind != LatentKind::Kl) {
        throw Error("train_step_kl: model is not in KL fine-tuning mode (call begin_kl_finetune on VQ weights)");
    }
    const Tensor x = as_batch(batch);
    StepMetrics m;
    m.lr = lr;
    Real recon_v = std::nan("");
    Real kl_v = std::nan("");
    try {
        const TokenField e = model.encoder()(x);
        const KlOutput k = model.kl_head()(e, &rng, noise);
        const Tensor x_hat = model.decoder()(k.latents);
        const Tensor recon = recon_loss(x, x_hat);
        recon_v = recon.item();
        const Real per_token = 1.0 / static_cast<Real>(k.z.dim(0));
        kl_v = k.kl_raw.item() * per_token;
        const Tensor total = add(recon, scale(k.kl, per_token));
        const Gradients grads = backward(total);
        adam_step(opt, model.params(), model.trainable(LatentKind::Kl), grads, lr);
        m.total = total.item();
        m.recon = recon_v;
        m.vq_or_kl = kl_v;
    } catch (const NumericFault& err) {
        throw NumericFault(std::string("kl step aborted: ") + err.what() + " [recon=" + fmt(recon_v) +
                           " kl=" + fmt(kl_v) + " lr=" + fmt(lr) + "]");
    }
    return m;
}

DataPool::DataPool(DataConfig cfg, std::int64_t video_len) : cfg_(cfg), video_len_(video_len) {}

const std::vector<Sample>& DataPool::videos(std::int64_t res) {
    auto it = videos_.find(res);
    if (it == videos_.end()) {
        it = videos_.emplace(res, synth_dataset(cfg_.video_kind, cfg_.videos, res, video_len_, cfg_.seed)).first;
    }
    return it->second;
}

const std::vector<Sample>& DataPool::images(std::int64_t res) {
    auto it = images_.find(res);
    if (it == images_.end()) {
        it = images_.emplace(res, synth_dataset(cfg_.image_kind, cfg_.images, res, 0, cfg_.seed + 1)).first;
    }
    return it->second;
}

Tensor DataPool::batch(Modality m, std::int64_t res, Rng& rng) {
    const auto& pool = m == Modality::Image ? images(res) : videos(res);
    const auto size = m == Modality::Image ? cfg_.batch_images : cfg_.batch_videos;
    if (pool.empty() || size < 1) {
        throw Error(std::string("empty ") + modality_name(m) + " data pool");
    }
    std::vector<std::int64_t> picks(static_cast<std::size_t>(size));
    for (auto& p : picks) {
        p = rng.uniform_int(static_cast<std::int64_t>(pool.size()));
    }
    return stack_batch(pool, picks);
}

std::string format_log_row(const LogRow& row) {
    std::ostringstream os;
    os << row.iter << '\t' << row.directive.stage << '\t' << modality_name(row.directive.modality) << '\t'
       << row.directive.resolution << '\t' << fmt(row.metrics.lr) << '\t' << fmt(row.metrics.recon) << '\t'
       << fmt(row.metrics.vq_or_kl) << '\t' << fmt(row.metrics.usage) << '\t' << fmt(row.metrics.perplexity);
    return os.str();
}

VqTrainer::VqTrainer(TokenizerModel& model, TrainOptions opts)
    : model_(model), opts_(std::move(opts)), pool_(opts_.data, opts_.schedule.video_len) {
    opts_.schedule.validate(model.config().patch, model.config().net);
    opt_.base_lr = opts_.base_lr;
    opt_.clip_norm = opts_.clip_norm;
    opt_.total_iters = opts_.schedule.total();
    opt_.warmup_iters = static_cast<std::int64_t>(std::llround(opts_.warmup_fraction * static_cast<Real>(opt_.total_iters)));
}

LogRow VqTrainer::step() {
    if (done()) {
        throw Error("trainer: schedule exhausted");
    }
    LogRow row;
    row.iter = iter_;
    row.directive = schedule_at(iter_, opts_.schedule, opts_.seed);
    Rng rng = Rng(opts_.seed, 0xba7c).split(static_cast<std::uint64_t>(iter_));
    const Tensor batch = pool_.batch(row.directive.modality, row.directive.resolution, rng);
    if (opts_.stats_interval > 0 && iter_ % opts_.stats_interval == 0) {
        model_.codebook().reset_usage();
    }
    row.metrics = train_step_vq(batch, model_, opt_, lr_at(iter_, opt_));
    auto& prov = model_.provenance();
    prov.kind = LatentKind::Vq;
    prov.stage = row.directive.stage;
    prov.iter = iter_ + 1;
    prov.vq_trained = true;
    ++iter_;
    return row;
}

void VqTrainer::run(std::ostream* log, std::int64_t until) {
    while (!done() && (until < 0 || iter_ < until)) {
        const LogRow row = step();
        if (log) {
            *log << format_log_row(row) << '\n';
        }
    }
}

std::vector<LogRow> run_kl_finetune(TokenizerModel& model, const KlOptions& opts, std::ostream* log) {
    if (model.provenance().kind != LatentKind::Kl) {
        model.begin_kl_finetune();
    }
    OptimState opt;
    opt.base_lr = opts.base_lr;
    opt.clip_norm = opts.clip_norm;
    opt.total_iters = opts.iters;
    opt.warmup_iters = static_cast<std::int64_t>(std::llround(opts.warmup_fraction * static_cast<Real>(opts.iters)));
    DataPool pool(opts.data, opts.video_len);
    std::vector<LogRow> rows;
    for (std::int64_t i = 0; i < opts.iters; ++i) {
        LogRow row;
        row.iter = i;
        row.directive = {3, i % 2 == 0 ? Modality::Image : Modality::Video, opts.resolution};
        Rng data_rng = Rng(opts.seed, 0xd47a).split(static_cast<std::uint64_t>(i));
        Rng noise_rng = Rng(opts.seed, 0x7015e).split(static_cast<std::uint64_t>(i));
        const Tensor batch = pool.batch(row.directive.modality, opts.resolution, data_rng);
        row.metrics = train_step_kl(batch, model, opt, lr_at(i, opt), noise_rng);
        model.provenance().iter += 1;
        if (log) {
            *log << format_log_row(row) << '\n';
        }
        rows.push_back(row);
    }
    return rows;
}

Real evaluate_mse(TokenizerModel& model, const std::vector<Sample>& samples, LatentKind kind, std::int64_t batch) {
    if (samples.empty()) {
        throw Error("evaluate_mse: no samples");
    }
    NoGradGuard guard;
    Real sum = 0.0;
    std::int64_t count = 0;
    for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(batch)) {
        std::vector<std::int64_t> picks;
        for (std::size_t i = start; i < std::min(samples.size(), start + static_cast<std::size_t>(batch)); ++i) {
            picks.push_back(static_cast<std::int64_t>(i));
        }
        const Tensor x = stack_batch(samples, picks);
        const TokenField e = model.encoder()(x);
        const Tensor x_hat = kind == LatentKind::Kl ? model.decoder()(model.kl_head()(e, nullptr).latents)
                                                    : model.decoder()(model.codebook().quantize(e).latents);
        const auto a = x.data();
        const auto b = x_hat.data();
        for (std::size_t i = 0; i < a.size(); ++i) {
            sum += (a[i] - b[i]) * (a[i] - b[i]);
        }
        count += static_cast<std::int64_t>(a.size());
    }
    return sum / static_cast<Real>(count);
}

}  // namespace otok
