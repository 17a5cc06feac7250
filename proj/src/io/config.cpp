#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <sstream>

#include "otok/io.hpp"

namespace otok {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) {
        return "";
    }
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::int64_t parse_integer(const std::string& key, const std::string& v) {
    std::int64_t out = 0;
    const auto* end = v.data() + v.size();
    const auto [p, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc() || p != end || v.empty()) {
        throw ConfigError("key '" + key + "': expected an integer, got '" + v + "'");
    }
    return out;
}

Real parse_real(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    Real out = 0.0;
    try {
        out = std::stod(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != v.size() || v.empty()) {
        throw ConfigError("key '" + key + "': expected a number, got '" + v + "'");
    }
    return out;
}

std::string join(const std::vector<std::int64_t>& xs) {
    std::string s;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        s += (i ? "," : "") + std::to_string(xs[i]);
    }
    return s;
}

std::string real_text(Real v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

std::uint64_t seed_value(Config& cfg, const std::string& key, std::uint64_t fallback) {
    const std::int64_t v = cfg.integer(key, static_cast<std::int64_t>(fallback));
    if (v < 0) {
        throw ConfigError("key '" + key + "': seed must be nonnegative");
    }
    return static_cast<std::uint64_t>(v);
}

SynthKind synth_kind(Config& cfg, const std::string& key, SynthKind fallback) {
    const std::string v = cfg.text(key, synth_kind_name(fallback));
    try {
        return parse_synth_kind(v);
    } catch (const Error& e) {
        throw ConfigError("key '" + key + "': " + e.what());
    }
}

DataConfig data_config_from(Config& cfg) {
    DataConfig d;
    d.video_kind = synth_kind(cfg, "video_kind", d.video_kind);
    d.image_kind = synth_kind(cfg, "image_kind", d.image_kind);
    d.videos = cfg.integer("videos", d.videos);
    d.images = cfg.integer("images", d.images);
    d.batch_videos = cfg.integer("batch_videos", d.batch_videos);
    d.batch_images = cfg.integer("batch_images", d.batch_images);
    d.seed = seed_value(cfg, "data_seed", d.seed);
    if (d.videos < 1 || d.images < 1 || d.batch_videos < 1 || d.batch_images < 1) {
        throw ConfigError("dataset and batch sizes must be positive");
    }
    return d;
}

}  // namespace

Config Config::parse(std::istream& in, const std::string& source) {
    Config cfg;
    cfg.source_ = source;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) {
            line.erase(hash);
        }
        line = trim(line);
        if (line.empty()) {
            continue;
        }
        const auto eq = line.find('=');
        const std::string where = source + ":" + std::to_string(lineno);
        if (eq == std::string::npos) {
            throw ConfigError(where + ": expected 'key = value'");
        }
        const std::string key = trim(line.substr(0, eq));
        if (key.empty()) {
            throw ConfigError(where + ": empty key");
        }
        if (cfg.values_.count(key)) {
            throw ConfigError(where + ": duplicate key '" + key + "'");
        }
        cfg.values_[key] = trim(line.substr(eq + 1));
    }
    return cfg;
}

Config Config::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open config '" + path.string() + "'");
    }
    return parse(in, path.string());
}

void Config::set(const std::string& key, const std::string& value) { values_[key] = value; }

std::string Config::raw(const std::string& key, const std::string& fallback) {
    auto it = values_.find(key);
    const std::string v = it == values_.end() ? fallback : it->second;
    used_[key] = v;
    return v;
}

std::string Config::text(const std::string& key, const std::string& fallback) { return raw(key, fallback); }

std::int64_t Config::integer(const std::string& key, std::int64_t fallback) {
    return parse_integer(key, raw(key, std::to_string(fallback)));
}

Real Config::real(const std::string& key, Real fallback) { return parse_real(key, raw(key, real_text(fallback))); }

bool Config::flag(const std::string& key, bool fallback) {
    std::string v = raw(key, fallback ? "true" : "false");
    std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return std::tolower(c); });
    if (v == "true" || v == "1" || v == "yes" || v == "on") {
        return true;
    }
    if (v == "false" || v == "0" || v == "no" || v == "off") {
        return false;
    }
    throw ConfigError("key '" + key + "': expected a boolean, got '" + v + "'");
}

std::vector<std::int64_t> Config::integers(const std::string& key, const std::vector<std::int64_t>& fallback) {
    const std::string v = raw(key, join(fallback));
    std::vector<std::int64_t> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        out.push_back(parse_integer(key, trim(item)));
    }
    if (out.empty()) {
        throw ConfigError("key '" + key + "': expected a comma-separated list of integers");
    }
    used_[key] = join(out);
    return out;
}

void Config::reject_unknown() const {
    std::string unknown;
    for (const auto& [k, v] : values_) {
        if (!used_.count(k)) {
            unknown += (unknown.empty() ? "" : ", ") + k;
        }
    }
    if (!unknown.empty()) {
        throw ConfigError(source_ + ": unknown key(s): " + unknown);
    }
}

std::string Config::resolved() const {
    std::string out;
    for (const auto& [k, v] : used_) {
        out += k + " = " + v + "\n";
    }
    return out;
}

void Config::apply_env_overrides() {
    const char* s = std::getenv("OTOK_SEED");
    if (s && !has("seed")) {
        parse_integer("OTOK_SEED", s);
        set("seed", s);
    }
}

TokenizerConfig tokenizer_config_from(Config& cfg) {
    TokenizerConfig c;
    c.patch.patch = cfg.integer("patch", c.patch.patch);
    c.patch.temporal_patch = cfg.integer("temporal_patch", c.patch.temporal_patch);
    c.patch.hidden = cfg.integer("hidden", c.patch.hidden);
    c.patch.channels = cfg.integer("channels", c.patch.channels);
    c.patch.resolutions = cfg.integers("resolutions", c.patch.resolutions);
    c.patch.max_frames = cfg.integer("max_frames", c.patch.max_frames);
    c.net.spatial_layers = cfg.integer("spatial_layers", c.net.spatial_layers);
    c.net.temporal_layers = cfg.integer("temporal_layers", c.net.temporal_layers);
    c.net.window = cfg.integer("window", c.net.window);
    c.net.heads = cfg.integer("heads", c.net.heads);
    c.net.latent_dim = cfg.integer("latent_dim", c.net.latent_dim);
    c.net.mlp_ratio = cfg.integer("mlp_ratio", c.net.mlp_ratio);
    c.codebook_size = cfg.integer("codebook_size", c.codebook_size);
    c.normalize_codes = cfg.flag("normalize_codes", c.normalize_codes);
    c.commit_weight = cfg.real("commit_weight", c.commit_weight);
    c.embed_weight = cfg.real("embed_weight", c.embed_weight);
    c.kl_weight = cfg.real("kl_weight", c.kl_weight);
    c.seed = seed_value(cfg, "seed", c.seed);
    try {
        c.validate();
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        throw ConfigError(std::string("invalid tokenizer config: ") + e.what());
    }
    return c;
}

TrainOptions train_options_from(Config& cfg) {
    TrainOptions o;
    StageSchedule& s = o.schedule;
    s.stage1_iters = cfg.integer("stage1_iters", 1000);
    s.stage2_iters = cfg.integer("stage2_iters", 1000);
    s.image_res_stage1 = cfg.integer("stage1_resolution", s.image_res_stage1);
    s.joint_res = cfg.integers("joint_resolutions", s.joint_res);
    const std::string mode = cfg.text("joint_mode", "alternate");
    if (mode == "alternate") {
        s.joint_mode = JointMode::Alternate;
    } else if (mode == "video-only") {
        s.joint_mode = JointMode::VideoOnly;
    } else {
        throw ConfigError("key 'joint_mode': expected 'alternate' or 'video-only', got '" + mode + "'");
    }
    s.video_len = cfg.integer("video_len", s.video_len);
    o.data = data_config_from(cfg);
    o.base_lr = cfg.real("lr", o.base_lr);
    o.warmup_fraction = cfg.real("warmup_fraction", o.warmup_fraction);
    o.clip_norm = cfg.real("clip_norm", o.clip_norm);
    o.stats_interval = cfg.integer("stats_interval", o.stats_interval);
    o.seed = seed_value(cfg, "seed", o.seed);
    if (s.stage1_iters < 0 || s.stage2_iters < 0 || s.total() < 1) {
        throw ConfigError("iteration counts must be nonnegative with a positive total");
    }
    if (o.base_lr <= 0 || o.warmup_fraction < 0 || o.warmup_fraction > 1 || o.clip_norm <= 0 ||
        o.stats_interval < 1) {
        throw ConfigError("optimizer settings out of range");
    }
    return o;
}

KlOptions kl_options_from(Config& cfg) {
    KlOptions o;
    o.iters = cfg.integer("kl_iters", o.iters);
    o.resolution = cfg.integer("kl_resolution", o.resolution);
    o.data = data_config_from(cfg);
    o.video_len = cfg.integer("video_len", o.video_len);
    o.base_lr = cfg.real("kl_lr", o.base_lr);
    o.warmup_fraction = cfg.real("warmup_fraction", o.warmup_fraction);
    o.clip_norm = cfg.real("clip_norm", o.clip_norm);
    o.seed = seed_value(cfg, "seed", o.seed);
    if (o.iters < 1 || o.base_lr <= 0 || o.clip_norm <= 0) {
        throw ConfigError("KL fine-tuning settings out of range");
    }
    return o;
}

}  // namespace otok
