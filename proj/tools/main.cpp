#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "otok/io.hpp"
#include "selftest.hpp"

namespace fs = std::filesystem;
using namespace otok;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

struct ConfigArgs {
    std::string path;
    std::vector<std::string> sets;
};

void add_config_options(CLI::App* sub, ConfigArgs& args, bool required = true) {
    auto* opt = sub->add_option("-c,--config", args.path, "key = value config file")->check(CLI::ExistingFile);
    if (required) {
        opt->required();
    }
    sub->add_option("--set", args.sets, "override a config key (key=value), repeatable");
}

Config load_config(const ConfigArgs& args) {
    Config cfg;
    if (!args.path.empty()) {
        cfg = Config::load(args.path);
    }
    for (const auto& kv : args.sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos || eq == 0) {
            throw ConfigError("--set expects key=value, got '" + kv + "'");
        }
        auto trim = [](std::string s) {
            s.erase(0, s.find_first_not_of(" \t"));
            s.erase(s.find_last_not_of(" \t") + 1);
            return s;
        };
        cfg.set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
    }
    cfg.apply_env_overrides();
    return cfg;
}

// Runs a constructor fed by config values, reporting its validation failures as config errors.
template <class F>
auto from_config(F&& make) {
    try {
        return make();
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
}

void prepare_out(const fs::path& dir, const Config& cfg) {
    cfg.reject_unknown();
    fs::create_directories(dir);
    write_text_atomic(dir / "config.resolved", cfg.resolved());
}

// (F, H, W, C), (H, W, C) or (1, F, H, W, C) -> (1, F, H, W, C).
Tensor as_clip(const Tensor& t) {
    const Shape& s = t.shape();
    if (s.size() == 3) {
        return ops::reshape(t.detach(), {1, 1, s[0], s[1], s[2]});
    }
    if (s.size() == 4) {
        return ops::reshape(t.detach(), {1, s[0], s[1], s[2], s[3]});
    }
    if (s.size() == 5 && s[0] == 1) {
        return t;
    }
    throw ShapeError("expected an (H, W, C), (F, H, W, C) or (1, F, H, W, C) container, got " + shape_str(s));
}

Tensor drop_batch(const Tensor& t) {
    Shape s = t.shape();
    s.erase(s.begin());
    return ops::reshape(t.detach(), s);
}

std::string format_real(Real v) {
    std::ostringstream os;
    os << std::setprecision(6) << v;
    return os.str();
}

void report_metrics(std::ostream& out, const std::vector<ReconMetrics>& per) {
    Real mse = 0.0;
    for (std::size_t i = 0; i < per.size(); ++i) {
        out << "sample " << i << "\tmse " << format_real(per[i].mse) << "\tpsnr " << format_real(per[i].psnr) << '\n';
        mse += per[i].mse;
    }
    mse /= static_cast<Real>(per.size());
    const Real psnr = mse > 0.0 ? std::min(kPsnrCap, 10.0 * std::log10(4.0 / mse)) : kPsnrCap;
    out << "mean\tmse " << format_real(mse) << "\tpsnr " << format_real(psnr) << '\n';
}

TokenizerCheckpoint load_vq_tokenizer(const fs::path& path) {
    TokenizerCheckpoint ck = load_tokenizer(path);
    if (ck.model->provenance().kind != LatentKind::Vq) {
        throw Error("checkpoint '" + path.string() + "' holds a KL-tuned tokenizer; discrete tokens need a VQ checkpoint");
    }
    return ck;
}

// ---- train ---------------------------------------------------------------

struct TrainArgs {
    ConfigArgs config;
    std::string out;
    std::string resume;
};

int cmd_train(const TrainArgs& a) {
    Config cfg = load_config(a.config);
    const TokenizerConfig tc = tokenizer_config_from(cfg);
    const TrainOptions to = train_options_from(cfg);
    const std::int64_t every = cfg.integer("checkpoint_interval", 0);
    const fs::path out(a.out);
    prepare_out(out, cfg);

    std::unique_ptr<TokenizerModel> model;
    std::optional<OptimState> resumed_opt;
    std::string log_text;
    if (!a.resume.empty()) {
        TokenizerCheckpoint ck = load_tokenizer(a.resume);
        if (to_json(ck.model->config()) != to_json(tc)) {
            throw ConfigError("resume checkpoint was trained with a different tokenizer config");
        }
        if (!ck.optimizer) {
            throw Error("resume checkpoint carries no optimizer state");
        }
        model = std::move(ck.model);
        resumed_opt = ck.optimizer;
        log_text = ck.extra.value("metrics", "");
    } else {
        model = std::make_unique<TokenizerModel>(tc);
    }

    from_config([&] {
        to.schedule.validate(tc.patch, tc.net);
        return 0;
    });
    VqTrainer trainer(*model, to);
    if (resumed_opt) {
        trainer.optimizer() = *resumed_opt;
        trainer.set_iter(model->provenance().iter);
    }
    auto save = [&](const fs::path& path) {
        const nlohmann::json extra{{"rng", {{"seed", to.seed}, {"iter", trainer.iter()}}}, {"metrics", log_text}};
        save_tokenizer(path, *model, &trainer.optimizer(), extra);
    };
    while (!trainer.done()) {
        const LogRow row = trainer.step();
        log_text += format_log_row(row) + "\n";
        if (every > 0 && trainer.iter() % every == 0 && !trainer.done()) {
            save(out / ("tokenizer_iter" + std::to_string(trainer.iter()) + ".otck"));
            write_text_atomic(out / "metrics.tsv", log_text);
        }
    }
    save(out / "tokenizer.otck");
    write_text_atomic(out / "metrics.tsv", log_text);

    const auto clips = synth_dataset(to.data.video_kind, std::min<std::int64_t>(to.data.videos, 16),
                                     to.schedule.joint_res.back(), to.schedule.video_len, to.data.seed);
    std::cout << "trained " << trainer.iter() << " iterations; video recon mse "
              << format_real(evaluate_mse(*model, clips, LatentKind::Vq)) << "\nwrote " << (out / "tokenizer.otck").string()
              << '\n';
    return kExitOk;
}

// ---- finetune-kl -----------------------------------------------------------

struct KlArgs {
    ConfigArgs config;
    std::string checkpoint;
    std::string out;
};

int cmd_finetune_kl(const KlArgs& a) {
    Config cfg = load_config(a.config);
    const KlOptions ko = kl_options_from(cfg);
    const fs::path out(a.out);
    prepare_out(out, cfg);

    TokenizerCheckpoint ck = load_vq_tokenizer(a.checkpoint);
    TokenizerModel& model = *ck.model;
    const auto held_out = synth_dataset(ko.data.video_kind, 16, ko.resolution, ko.video_len, ko.data.seed + 1);
    const Real before = evaluate_mse(model, held_out, LatentKind::Vq);
    std::ostringstream log;
    run_kl_finetune(model, ko, &log);
    const Real after = evaluate_mse(model, held_out, LatentKind::Kl);
    save_tokenizer(out / "tokenizer_kl.otck", model, nullptr, {{"rng", {{"seed", ko.seed}, {"iter", ko.iters}}}});
    write_text_atomic(out / "metrics.tsv", log.str());
    std::cout << "held-out recon mse: vq " << format_real(before) << ", kl " << format_real(after) << " ("
              << format_real(100.0 * after / before) << "%)\nwrote " << (out / "tokenizer_kl.otck").string() << '\n';
    return kExitOk;
}

// ---- encode / decode -------------------------------------------------------

struct CodecArgs {
    std::string checkpoint;
    std::string input;
    std::string output;
    std::int64_t label = -1;
};

int cmd_encode(const CodecArgs& a) {
    TokenizerCheckpoint ck = load_vq_tokenizer(a.checkpoint);
    const Tensor x = as_clip(read_tensor(a.input));
    TokenFile tf;
    tf.grid = ck.model->tokenize(x);
    tf.codebook_size = ck.model->config().codebook_size;
    if (a.label >= 0) {
        tf.condition = a.label;
    }
    write_tokens(a.output, tf);
    const auto input_bytes = x.numel() * 4;
    const auto bits = static_cast<Real>(std::ceil(std::log2(static_cast<Real>(tf.codebook_size))));
    const Real token_bytes = bits * static_cast<Real>(tf.grid.size()) / 8.0;
    std::cout << "input " << shape_str(x.shape()) << " (" << input_bytes << " bytes as f32)\n"
              << "tokens " << tf.grid.temporal << "x" << tf.grid.height << "x" << tf.grid.width << " = " << tf.grid.size()
              << "\nbits/token " << bits << "\ncompression " << format_real(static_cast<Real>(input_bytes) / token_bytes)
              << "x\n";
    return kExitOk;
}

int cmd_decode(const CodecArgs& a) {
    TokenizerCheckpoint ck = load_vq_tokenizer(a.checkpoint);
    const TokenFile tf = read_tokens(a.input);
    if (tf.codebook_size != ck.model->config().codebook_size) {
        throw Error("token stream codebook size " + std::to_string(tf.codebook_size) + " does not match checkpoint " +
                    std::to_string(ck.model->config().codebook_size));
    }
    const Tensor video = decode_long(*ck.model, tf.grid);
    write_tensor(a.output, drop_batch(video));
    std::cout << "decoded " << shape_str(drop_batch(video).shape()) << " to " << a.output << '\n';
    return kExitOk;
}

// ---- token LM --------------------------------------------------------------

struct LmTrainArgs {
    ConfigArgs config;
    std::string checkpoint;
    std::string out;
};

int cmd_train_lm(const LmTrainArgs& a) {
    Config cfg = load_config(a.config);
    TokenizerCheckpoint ck = load_vq_tokenizer(a.checkpoint);
    TokenizerModel& tok = *ck.model;
    const std::int64_t clips = cfg.integer("lm_videos", 64);
    const std::int64_t res = cfg.integer("lm_resolution", tok.config().patch.resolutions.front());
    const std::int64_t frames = cfg.integer("lm_video_len", 9);
    const std::uint64_t data_seed = static_cast<std::uint64_t>(cfg.integer("data_seed", 1));
    const std::string kind = cfg.text("lm_kind", "moving-shapes");
    LmConfig lc;
    lc.codebook_size = tok.config().codebook_size;
    lc.width = cfg.integer("lm_width", lc.width);
    lc.heads = cfg.integer("lm_heads", lc.heads);
    lc.layers = cfg.integer("lm_layers", lc.layers);
    lc.mlp_ratio = cfg.integer("lm_mlp_ratio", lc.mlp_ratio);
    lc.seed = static_cast<std::uint64_t>(cfg.integer("seed", 0));
    FitOptions fo;
    fo.iters = cfg.integer("lm_iters", 1000);
    fo.batch = cfg.integer("lm_batch", 8);
    fo.base_lr = cfg.real("lm_lr", 1e-3);
    fo.warmup_fraction = cfg.real("warmup_fraction", fo.warmup_fraction);
    fo.clip_norm = cfg.real("clip_norm", fo.clip_norm);
    fo.seed = lc.seed;
    SynthKind sk;
    try {
        sk = parse_synth_kind(kind);
    } catch (const Error& e) {
        throw ConfigError(std::string("key 'lm_kind': ") + e.what());
    }
    const PatchConfig& pc = tok.config().patch;
    lc.context = cfg.integer("lm_context", (1 + (frames - 1) / pc.temporal_patch) * (res / pc.patch) * (res / pc.patch));
    const fs::path out(a.out);
    prepare_out(out, cfg);

    const auto data = synth_dataset(sk, clips, res, frames, data_seed);
    std::vector<TokenSequence> seqs;
    for (const auto& s : data) {
        seqs.push_back(flatten_raster(tok.tokenize(as_clip(s.pixels)), lc.codebook_size, s.label));
    }

    const auto lm = from_config([&] { return std::make_unique<TokenLm>(lc); });
    const std::vector<Real> losses = fit_lm(*lm, seqs, fo);
    std::string log;
    for (std::size_t i = 0; i < losses.size(); ++i) {
        log += std::to_string(i) + "\t" + format_real(losses[i]) + "\n";
    }
    write_text_atomic(out / "lm_metrics.tsv", log);
    save_lm(out / "lm.otck", *lm);
    std::cout << "lm loss " << format_real(losses.front()) << " -> " << format_real(losses.back()) << " (ln K = "
              << format_real(std::log(static_cast<Real>(lc.codebook_size))) << ")\nwrote " << (out / "lm.otck").string()
              << '\n';
    return kExitOk;
}

struct SamplingArgs {
    Real temperature = 1.0;
    std::int64_t top_k = 0;
    bool greedy = false;
    bool sliding = false;
    std::uint64_t seed = 0;
};

void add_sampling_options(CLI::App* sub, SamplingArgs& s) {
    sub->add_option("--temperature", s.temperature, "softmax temperature")->check(CLI::PositiveNumber);
    sub->add_option("--top-k", s.top_k, "sample among the k most likely codes (0 = all)")->check(CLI::NonNegativeNumber);
    sub->add_flag("--greedy", s.greedy, "take the most likely code");
    sub->add_flag("--sliding", s.sliding, "drop leading slots once the LM context is full");
    sub->add_option("--seed", s.seed, "sampling seed");
}

SampleOptions sample_options(const SamplingArgs& s) {
    SampleOptions o;
    o.temperature = s.temperature;
    o.top_k = s.top_k;
    o.greedy = s.greedy;
    return o;
}

struct GenerateArgs {
    std::string checkpoint;
    std::string lm;
    std::string output;
    std::string tokens;
    std::int64_t label = -1;
    std::int64_t slots = 3;
    std::int64_t height = 4;
    std::int64_t width = 4;
    SamplingArgs sampling;
};

int cmd_generate(const GenerateArgs& a) {
    TokenizerCheckpoint ck = load_vq_tokenizer(a.checkpoint);
    const auto lm = load_lm(a.lm);
    if (lm->config().codebook_size != ck.model->config().codebook_size) {
        throw Error("LM and tokenizer disagree on the codebook size");
    }
    Rng rng(a.sampling.seed, 0x6e);
    const std::optional<std::int64_t> label = a.label >= 0 ? std::optional<std::int64_t>(a.label) : std::nullopt;
    const TokenGrid grid = ar_sample(*lm, label, {a.slots, a.height, a.width}, sample_options(a.sampling), rng, {},
                                     a.sampling.sliding);
    const Tensor video = decode_long(*ck.model, grid);
    write_tensor(a.output, drop_batch(video));
    if (!a.tokens.empty()) {
        write_tokens(a.tokens, {grid, lm->config().codebook_size, label});
    }
    std::cout << "generated " << grid.size() << " tokens -> " << shape_str(drop_batch(video).shape()) << " at "
              << a.output << '\n';
    return kExitOk;
}

struct PredictArgs {
    std::string checkpoint;
    std::string lm;
    std::string input;
    std::string output;
    std::int64_t future = 1;
    std::int64_t label = -1;
    SamplingArgs sampling;
};

int cmd_predict(const PredictArgs& a) {
    TokenizerCheckpoint ck = load_vq_tokenizer(a.checkpoint);
    const auto lm = load_lm(a.lm);
    const Tensor clip = as_clip(read_tensor(a.input));
    Rng rng(a.sampling.seed, 0x9f);
    const std::optional<std::int64_t> label = a.label >= 0 ? std::optional<std::int64_t>(a.label) : std::nullopt;
    const FramePrediction p =
        frame_predict(clip, a.future, *lm, *ck.model, sample_options(a.sampling), rng, label, a.sampling.sliding);
    write_tensor(a.output, drop_batch(p.video));
    std::cout << "context " << clip.dim(1) << " frames, predicted " << p.video.dim(1) - clip.dim(1) << " more -> "
              << a.output << '\n';
    return kExitOk;
}

// ---- diffuse ---------------------------------------------------------------

struct DiffuseTrainArgs {
    ConfigArgs config;
    std::string checkpoint;
    std::string out;
};

int cmd_diffuse_train(const DiffuseTrainArgs& a) {
    Config cfg = load_config(a.config);
    TokenizerCheckpoint ck = load_tokenizer(a.checkpoint);
    TokenizerModel& tok = *ck.model;
    if (tok.provenance().kind != LatentKind::Kl) {
        throw Error("latent diffusion needs a KL-tuned tokenizer checkpoint");
    }
    const std::int64_t clips = cfg.integer("dn_videos", 64);
    const std::int64_t res = cfg.integer("dn_resolution", tok.config().patch.resolutions.front());
    const std::int64_t frames = cfg.integer("dn_video_len", 9);
    const std::uint64_t data_seed = static_cast<std::uint64_t>(cfg.integer("data_seed", 1));
    const std::int64_t steps = cfg.integer("diffusion_steps", 100);
    const Real beta_start = cfg.real("beta_start", 1e-4);
    const Real beta_end = cfg.real("beta_end", 0.02);
    const DiffusionConfig dc = from_config([&] { return DiffusionConfig::linear(steps, beta_start, beta_end); });
    DenoiserConfig dn;
    dn.latent_dim = tok.config().net.latent_dim;
    dn.width = cfg.integer("dn_width", dn.width);
    dn.heads = cfg.integer("dn_heads", dn.heads);
    dn.layers = cfg.integer("dn_layers", dn.layers);
    dn.mlp_ratio = cfg.integer("dn_mlp_ratio", dn.mlp_ratio);
    dn.seed = static_cast<std::uint64_t>(cfg.integer("seed", 0));
    FitOptions fo;
    fo.iters = cfg.integer("dn_iters", 1000);
    fo.batch = cfg.integer("dn_batch", 8);
    fo.base_lr = cfg.real("dn_lr", 1e-3);
    fo.warmup_fraction = cfg.real("warmup_fraction", fo.warmup_fraction);
    fo.clip_norm = cfg.real("clip_norm", fo.clip_norm);
    fo.seed = dn.seed;
    const fs::path out(a.out);
    prepare_out(out, cfg);

    const auto data = synth_dataset(SynthKind::MovingShapes, clips, res, frames, data_seed);
    std::vector<Tensor> lat;
    for (const auto& s : data) {
        lat.push_back(encode_latents(tok, s.pixels));
    }
    Tensor latents = ops::concat(lat, 0);
    Real sq = 0.0;
    for (Real v : latents.data()) {
        sq += v * v;
    }
    const Real scale = 1.0 / std::max(std::sqrt(sq / static_cast<Real>(latents.numel())), 1e-8);
    latents = ops::scale(latents, scale);
    dn.max_tokens = latents.dim(1);
    const auto model = from_config([&] { return std::make_unique<Denoiser>(dn, dc.steps); });
    const std::vector<Real> losses = fit_denoiser(*model, latents, dc, fo);
    std::string log;
    for (std::size_t i = 0; i < losses.size(); ++i) {
        log += std::to_string(i) + "\t" + format_real(losses[i]) + "\n";
    }
    write_text_atomic(out / "dn_metrics.tsv", log);
    save_denoiser(out / "denoiser.otck", *model, dc, scale);
    std::cout << "denoiser loss " << format_real(losses.front()) << " -> " << format_real(losses.back()) << "\nwrote "
              << (out / "denoiser.otck").string() << '\n';
    return kExitOk;
}

struct DiffuseSampleArgs {
    std::string checkpoint;
    std::string model;
    std::string output;
    std::int64_t count = 1;
    std::int64_t slots = 3;
    std::int64_t height = 4;
    std::int64_t width = 4;
    std::uint64_t seed = 0;
};

int cmd_diffuse_sample(const DiffuseSampleArgs& a) {
    TokenizerCheckpoint ck = load_tokenizer(a.checkpoint);
    if (ck.model->provenance().kind != LatentKind::Kl) {
        throw Error("latent diffusion needs a KL-tuned tokenizer checkpoint");
    }
    const DenoiserCheckpoint dn = load_denoiser(a.model);
    Rng rng(a.seed, 0xd5);
    const Tensor z = ddpm_sample({a.slots, a.height, a.width}, a.count, dn.model->config().latent_dim, *dn.model,
                                 dn.diffusion, rng);
    const Tensor video = decode_latents(*ck.model, ops::scale(z, 1.0 / dn.latent_scale));
    write_tensor(a.output, video);
    std::cout << "sampled " << a.count << " clips " << shape_str(video.shape()) << " -> " << a.output << '\n';
    return kExitOk;
}

// ---- eval / synth ----------------------------------------------------------

struct EvalArgs {
    std::string checkpoint;
    std::vector<std::string> inputs;
    std::string kind = "moving-shapes";
    std::int64_t n = 8;
    std::int64_t resolution = 32;
    std::int64_t frames = 9;
    std::uint64_t seed = 1;
};

int cmd_eval(const EvalArgs& a) {
    TokenizerCheckpoint ck = load_tokenizer(a.checkpoint);
    std::vector<Tensor> clips;
    if (!a.inputs.empty()) {
        for (const auto& p : a.inputs) {
            clips.push_back(as_clip(read_tensor(p)));
        }
    } else {
        for (const auto& s : synth_dataset(parse_synth_kind(a.kind), a.n, a.resolution, a.frames, a.seed)) {
            clips.push_back(as_clip(s.pixels));
        }
    }
    std::vector<ReconMetrics> per;
    for (const auto& x : clips) {
        per.push_back(metrics_report(x, ck.model->reconstruct(x)));
    }
    std::cout << "latent " << latent_kind_name(ck.model->provenance().kind) << '\n';
    report_metrics(std::cout, per);
    return kExitOk;
}

struct SynthArgs {
    std::string kind = "moving-shapes";
    std::int64_t n = 4;
    std::int64_t resolution = 32;
    std::int64_t frames = 9;
    std::uint64_t seed = 1;
    std::string out;
};

int cmd_synth(const SynthArgs& a) {
    const auto data = synth_dataset(parse_synth_kind(a.kind), a.n, a.resolution, a.frames, a.seed);
    fs::create_directories(a.out);
    for (std::size_t i = 0; i < data.size(); ++i) {
        const fs::path p = fs::path(a.out) / ("sample_" + std::to_string(i) + ".otsr");
        write_tensor(p, data[i].pixels);
        std::cout << p.string() << "\tlabel " << data[i].label << '\n';
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"otok: video/image tokenizer with discrete and continuous latents"};
    app.require_subcommand(1);
    std::function<int()> action;

    TrainArgs train;
    auto* s_train = app.add_subcommand("train", "progressive VQ tokenizer training");
    add_config_options(s_train, train.config);
    s_train->add_option("-o,--out", train.out, "output directory")->required();
    s_train->add_option("--resume", train.resume, "continue from a checkpoint written by train")
        ->check(CLI::ExistingFile);
    s_train->callback([&] { action = [&] { return cmd_train(train); }; });

    KlArgs kl;
    auto* s_kl = app.add_subcommand("finetune-kl", "fine-tune the continuous (KL) head from a VQ checkpoint");
    add_config_options(s_kl, kl.config);
    s_kl->add_option("--checkpoint", kl.checkpoint, "VQ tokenizer checkpoint")->required()->check(CLI::ExistingFile);
    s_kl->add_option("-o,--out", kl.out, "output directory")->required();
    s_kl->callback([&] { action = [&] { return cmd_finetune_kl(kl); }; });

    CodecArgs enc;
    auto* s_enc = app.add_subcommand("encode", "tensor container -> token stream");
    s_enc->add_option("--checkpoint", enc.checkpoint, "VQ tokenizer checkpoint")->required()->check(CLI::ExistingFile);
    s_enc->add_option("-i,--input", enc.input, "input tensor container")->required()->check(CLI::ExistingFile);
    s_enc->add_option("-o,--output", enc.output, "output token stream")->required();
    s_enc->add_option("--label", enc.label, "class id stored as the stream condition");
    s_enc->callback([&] { action = [&] { return cmd_encode(enc); }; });

    CodecArgs dec;
    auto* s_dec = app.add_subcommand("decode", "token stream -> tensor container");
    s_dec->add_option("--checkpoint", dec.checkpoint, "VQ tokenizer checkpoint")->required()->check(CLI::ExistingFile);
    s_dec->add_option("-i,--input", dec.input, "input token stream")->required()->check(CLI::ExistingFile);
    s_dec->add_option("-o,--output", dec.output, "output tensor container")->required();
    s_dec->callback([&] { action = [&] { return cmd_decode(dec); }; });

    LmTrainArgs lmt;
    auto* s_lmt = app.add_subcommand("train-lm", "fit the token LM on tokenized synthetic clips");
    add_config_options(s_lmt, lmt.config, false);
    s_lmt->add_option("--checkpoint", lmt.checkpoint, "VQ tokenizer checkpoint")->required()->check(CLI::ExistingFile);
    s_lmt->add_option("-o,--out", lmt.out, "output directory")->required();
    s_lmt->callback([&] { action = [&] { return cmd_train_lm(lmt); }; });

    GenerateArgs gen;
    auto* s_gen = app.add_subcommand("generate", "class-conditional autoregressive generation");
    s_gen->add_option("--checkpoint", gen.checkpoint, "VQ tokenizer checkpoint")->required()->check(CLI::ExistingFile);
    s_gen->add_option("--lm", gen.lm, "token LM checkpoint")->required()->check(CLI::ExistingFile);
    s_gen->add_option("-o,--output", gen.output, "output tensor container")->required();
    s_gen->add_option("--tokens", gen.tokens, "also write the sampled token stream");
    s_gen->add_option("--label", gen.label, "class id (omit for unconditional)");
    s_gen->add_option("--slots", gen.slots, "temporal token slots")->check(CLI::PositiveNumber);
    s_gen->add_option("--height", gen.height, "token rows")->check(CLI::PositiveNumber);
    s_gen->add_option("--width", gen.width, "token columns")->check(CLI::PositiveNumber);
    add_sampling_options(s_gen, gen.sampling);
    s_gen->callback([&] { action = [&] { return cmd_generate(gen); }; });

    PredictArgs pred;
    auto* s_pred = app.add_subcommand("predict-frames", "continue a clip with sampled future slots");
    s_pred->add_option("--checkpoint", pred.checkpoint, "VQ tokenizer checkpoint")->required()->check(CLI::ExistingFile);
    s_pred->add_option("--lm", pred.lm, "token LM checkpoint")->required()->check(CLI::ExistingFile);
    s_pred->add_option("-i,--input", pred.input, "context clip container")->required()->check(CLI::ExistingFile);
    s_pred->add_option("-o,--output", pred.output, "output tensor container")->required();
    s_pred->add_option("--future", pred.future, "number of slots to predict")->check(CLI::NonNegativeNumber);
    s_pred->add_option("--label", pred.label, "class id (omit for unconditional)");
    add_sampling_options(s_pred, pred.sampling);
    s_pred->callback([&] { action = [&] { return cmd_predict(pred); }; });

    auto* s_diff = app.add_subcommand("diffuse", "latent DDPM over KL latents");
    s_diff->require_subcommand(1);
    DiffuseTrainArgs dt;
    auto* s_dt = s_diff->add_subcommand("train", "fit the denoiser on encoded synthetic clips");
    add_config_options(s_dt, dt.config, false);
    s_dt->add_option("--checkpoint", dt.checkpoint, "KL tokenizer checkpoint")->required()->check(CLI::ExistingFile);
    s_dt->add_option("-o,--out", dt.out, "output directory")->required();
    s_dt->callback([&] { action = [&] { return cmd_diffuse_train(dt); }; });
    DiffuseSampleArgs ds;
    auto* s_ds = s_diff->add_subcommand("sample", "ancestral sampling and decoding");
    s_ds->add_option("--checkpoint", ds.checkpoint, "KL tokenizer checkpoint")->required()->check(CLI::ExistingFile);
    s_ds->add_option("--model", ds.model, "denoiser checkpoint")->required()->check(CLI::ExistingFile);
    s_ds->add_option("-o,--output", ds.output, "output tensor container")->required();
    s_ds->add_option("--count", ds.count, "clips to sample")->check(CLI::PositiveNumber);
    s_ds->add_option("--slots", ds.slots, "temporal token slots")->check(CLI::PositiveNumber);
    s_ds->add_option("--height", ds.height, "token rows")->check(CLI::PositiveNumber);
    s_ds->add_option("--width", ds.width, "token columns")->check(CLI::PositiveNumber);
    s_ds->add_option("--seed", ds.seed, "sampling seed");
    s_ds->callback([&] { action = [&] { return cmd_diffuse_sample(ds); }; });

    EvalArgs ev;
    auto* s_ev = app.add_subcommand("eval", "reconstruction metrics per sample and on average");
    s_ev->add_option("--checkpoint", ev.checkpoint, "tokenizer checkpoint")->required()->check(CLI::ExistingFile);
    s_ev->add_option("-i,--input", ev.inputs, "tensor containers (default: synthetic set)")->check(CLI::ExistingFile);
    s_ev->add_option("--kind", ev.kind, "synthetic dataset kind");
    s_ev->add_option("--n", ev.n, "synthetic samples")->check(CLI::PositiveNumber);
    s_ev->add_option("--resolution", ev.resolution, "synthetic resolution")->check(CLI::PositiveNumber);
    s_ev->add_option("--frames", ev.frames, "synthetic frames (0 = images)")->check(CLI::NonNegativeNumber);
    s_ev->add_option("--seed", ev.seed, "synthetic data seed");
    s_ev->callback([&] { action = [&] { return cmd_eval(ev); }; });

    SynthArgs sy;
    auto* s_sy = app.add_subcommand("synth", "write synthetic samples as tensor containers");
    s_sy->add_option("--kind", sy.kind, "moving-shapes, gradient-texture or checkerboard");
    s_sy->add_option("--n", sy.n, "samples")->check(CLI::PositiveNumber);
    s_sy->add_option("--resolution", sy.resolution, "spatial size")->check(CLI::PositiveNumber);
    s_sy->add_option("--frames", sy.frames, "frames (0 = images)")->check(CLI::NonNegativeNumber);
    s_sy->add_option("--seed", sy.seed, "data seed");
    s_sy->add_option("-o,--out", sy.out, "output directory")->required();
    s_sy->callback([&] { action = [&] { return cmd_synth(sy); }; });

    auto* s_st = app.add_subcommand("selftest", "run the built-in invariant checks");
    s_st->callback([&] { action = [] { return otok::cli::run_selftest(std::cout); }; });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kExitOk : kExitUsage;
    }
    try {
        return action();
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const NumericFault& e) {
        std::cerr << "numeric fault: " << e.what() << '\n';
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUsage;
    }
}
