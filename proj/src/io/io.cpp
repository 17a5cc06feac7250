#include "otok/io.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <limits>
#include <unistd.h>

namespace otok {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint16_t kTensorVersion = 1;
constexpr std::uint16_t kTokenVersion = 1;
constexpr std::uint16_t kCheckpointVersion = 1;

class Writer {
public:
    void bytes(const char* s, std::size_t n) { out_.insert(out_.end(), s, s + n); }
    void u8(std::uint8_t v) { out_.push_back(v); }
    void u16(std::uint16_t v) { le(v, 2); }
    void u32(std::uint32_t v) { le(v, 4); }
    void f32(float v) { le(std::bit_cast<std::uint32_t>(v), 4); }
    void f64(double v) { le(std::bit_cast<std::uint64_t>(v), 8); }
    Bytes take() { return std::move(out_); }

private:
    void le(std::uint64_t v, int n) {
        for (int i = 0; i < n; ++i) {
            out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
        }
    }
    Bytes out_;
};

class Reader {
public:
    Reader(const Bytes& data, const char* what) : data_(data), what_(what) {}

    void magic(const char* m) {
        need(4);
        if (std::string(reinterpret_cast<const char*>(data_.data()), 4) != m) {
            throw FormatError(std::string(what_) + ": bad magic (expected " + m + ")");
        }
        pos_ = 4;
    }
    std::uint8_t u8() { return static_cast<std::uint8_t>(le(1)); }
    std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
    std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
    float f32() { return std::bit_cast<float>(static_cast<std::uint32_t>(le(4))); }
    double f64() { return std::bit_cast<double>(le(8)); }
    std::string str(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    std::size_t remaining() const { return data_.size() - pos_; }
    void need(std::size_t n) const {
        if (data_.size() - pos_ < n) {
            throw FormatError(std::string(what_) + ": truncated data");
        }
    }

private:
    std::uint64_t le(int n) {
        need(static_cast<std::size_t>(n));
        std::uint64_t v = 0;
        for (int i = 0; i < n; ++i) {
            v |= static_cast<std::uint64_t>(data_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
        }
        pos_ += static_cast<std::size_t>(n);
        return v;
    }

    const Bytes& data_;
    const char* what_;
    std::size_t pos_ = 0;
};

void expect_end(const Reader& r, const char* what) {
    if (r.remaining() != 0) {
        throw FormatError(std::string(what) + ": " + std::to_string(r.remaining()) + " trailing bytes");
    }
}

}  // namespace

Bytes read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error("cannot open '" + path.string() + "'");
    }
    return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_atomic(const fs::path& path, const Bytes& data) {
    fs::path tmp = path;
    tmp += ".tmp" + std::to_string(::getpid());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw Error("cannot write '" + tmp.string() + "'");
        }
        out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
        if (!out.flush()) {
            throw Error("write failed for '" + tmp.string() + "'");
        }
    }
    fs::rename(tmp, path);
}

void write_text_atomic(const fs::path& path, const std::string& text) {
    write_file_atomic(path, Bytes(text.begin(), text.end()));
}

Bytes encode_tensor(const Tensor& t) {
    if (t.rank() > 255) {
        throw FormatError("tensor container: rank " + std::to_string(t.rank()) + " too large");
    }
    Writer w;
    w.bytes("OTSR", 4);
    w.u16(kTensorVersion);
    w.u8(0);
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) {
        if (d < 0 || d > std::numeric_limits<std::uint32_t>::max()) {
            throw FormatError("tensor container: dim " + std::to_string(d) + " out of u32 range");
        }
        w.u32(static_cast<std::uint32_t>(d));
    }
    for (Real v : t.data()) {
        const auto f = static_cast<float>(v);
        if (!std::isfinite(f)) {
            throw FormatError("tensor container: value not representable as finite f32");
        }
        w.f32(f);
    }
    return w.take();
}

Tensor decode_tensor(const Bytes& data) {
    Reader r(data, "tensor container");
    r.magic("OTSR");
    const auto version = r.u16();
    if (version != kTensorVersion) {
        throw FormatError("tensor container: unsupported version " + std::to_string(version));
    }
    const auto dtype = r.u8();
    if (dtype != 0) {
        throw FormatError("tensor container: unsupported dtype tag " + std::to_string(dtype));
    }
    const auto ndim = r.u8();
    Shape shape;
    std::uint64_t count = 1;
    for (int i = 0; i < ndim; ++i) {
        shape.push_back(r.u32());
        count *= static_cast<std::uint64_t>(shape.back());
    }
    if (r.remaining() != count * 4) {
        throw FormatError("tensor container: payload holds " + std::to_string(r.remaining()) + " bytes, dims need " +
                          std::to_string(count * 4));
    }
    std::vector<Real> values(static_cast<std::size_t>(count));
    for (auto& v : values) {
        v = r.f32();
    }
    return Tensor::from(shape, std::move(values));
}

void write_tensor(const fs::path& path, const Tensor& t) { write_file_atomic(path, encode_tensor(t)); }
Tensor read_tensor(const fs::path& path) { return decode_tensor(read_file(path)); }

Bytes encode_tokens(const TokenFile& tf) {
    const TokenGrid& g = tf.grid;
    if (g.batch != 1) {
        throw FormatError("token stream: one sample per stream, got batch " + std::to_string(g.batch));
    }
    if (static_cast<std::int64_t>(g.ids.size()) != g.size()) {
        throw FormatError("token stream: grid holds " + std::to_string(g.ids.size()) + " ids, dims need " +
                          std::to_string(g.size()));
    }
    if (tf.codebook_size < 1 || tf.codebook_size > std::numeric_limits<std::uint32_t>::max()) {
        throw FormatError("token stream: codebook size out of range");
    }
    for (auto d : {g.temporal, g.height, g.width}) {
        if (d < 1 || d > 0xFFFF) {
            throw FormatError("token stream: grid dim " + std::to_string(d) + " out of u16 range");
        }
    }
    Writer w;
    w.bytes("OTTK", 4);
    w.u16(kTokenVersion);
    w.u32(static_cast<std::uint32_t>(tf.codebook_size));
    w.u16(static_cast<std::uint16_t>(g.temporal));
    w.u16(static_cast<std::uint16_t>(g.height));
    w.u16(static_cast<std::uint16_t>(g.width));
    if (tf.condition && (*tf.condition < 0 || *tf.condition >= kNoCondition)) {
        throw FormatError("token stream: condition id out of range");
    }
    w.u32(tf.condition ? static_cast<std::uint32_t>(*tf.condition) : kNoCondition);
    const bool wide = tf.codebook_size > 65536;
    for (auto id : g.ids) {
        if (id < 0 || id >= tf.codebook_size) {
            throw FormatError("token stream: index " + std::to_string(id) + " not below codebook size " +
                              std::to_string(tf.codebook_size));
        }
        if (wide) {
            w.u32(static_cast<std::uint32_t>(id));
        } else {
            w.u16(static_cast<std::uint16_t>(id));
        }
    }
    return w.take();
}

TokenFile decode_tokens(const Bytes& data) {
    Reader r(data, "token stream");
    r.magic("OTTK");
    const auto version = r.u16();
    if (version != kTokenVersion) {
        throw FormatError("token stream: unsupported version " + std::to_string(version));
    }
    TokenFile tf;
    tf.codebook_size = r.u32();
    if (tf.codebook_size < 1) {
        throw FormatError("token stream: codebook size 0");
    }
    tf.grid.batch = 1;
    tf.grid.temporal = r.u16();
    tf.grid.height = r.u16();
    tf.grid.width = r.u16();
    const auto cond = r.u32();
    if (cond != kNoCondition) {
        tf.condition = cond;
    }
    const bool wide = tf.codebook_size > 65536;
    const auto width = static_cast<std::uint64_t>(wide ? 4 : 2);
    const auto count = static_cast<std::uint64_t>(tf.grid.size());
    if (r.remaining() != count * width) {
        throw FormatError("token stream: payload holds " + std::to_string(r.remaining()) + " bytes, grid needs " +
                          std::to_string(count * width));
    }
    tf.grid.ids.resize(static_cast<std::size_t>(count));
    for (auto& id : tf.grid.ids) {
        id = wide ? r.u32() : r.u16();
        if (id >= tf.codebook_size) {
            throw FormatError("token stream: index " + std::to_string(id) + " not below codebook size " +
                              std::to_string(tf.codebook_size));
        }
    }
    return tf;
}

void write_tokens(const fs::path& path, const TokenFile& tf) { write_file_atomic(path, encode_tokens(tf)); }
TokenFile read_tokens(const fs::path& path) { return decode_tokens(read_file(path)); }

Bytes encode_checkpoint(const Checkpoint& ck) {
    json index = json::array();
    for (const auto& [name, t] : ck.tensors) {
        index.push_back({{"name", name}, {"shape", t.shape()}});
    }
    const std::string header = json{{"meta", ck.meta}, {"tensors", index}}.dump();
    Writer w;
    w.bytes("OTCK", 4);
    w.u16(kCheckpointVersion);
    w.u32(static_cast<std::uint32_t>(header.size()));
    w.bytes(header.data(), header.size());
    for (const auto& [name, t] : ck.tensors) {
        for (Real v : t.data()) {
            w.f64(v);
        }
    }
    return w.take();
}

Checkpoint decode_checkpoint(const Bytes& data) {
    Reader r(data, "checkpoint");
    r.magic("OTCK");
    const auto version = r.u16();
    if (version != kCheckpointVersion) {
        throw FormatError("checkpoint: unsupported version " + std::to_string(version));
    }
    const auto len = r.u32();
    json header;
    try {
        header = json::parse(r.str(len));
    } catch (const json::exception& e) {
        throw FormatError(std::string("checkpoint: bad header: ") + e.what());
    }
    Checkpoint ck;
    try {
        ck.meta = header.at("meta");
        for (const auto& entry : header.at("tensors")) {
            const Shape shape = entry.at("shape").get<Shape>();
            const auto n = static_cast<std::size_t>(shape_numel(shape));
            r.need(n * 8);
            std::vector<Real> v(n);
            for (auto& x : v) {
                x = r.f64();
            }
            ck.tensors.emplace(entry.at("name").get<std::string>(), Tensor::from(shape, std::move(v)));
        }
    } catch (const json::exception& e) {
        throw FormatError(std::string("checkpoint: malformed header: ") + e.what());
    }
    expect_end(r, "checkpoint");
    return ck;
}

void write_checkpoint(const fs::path& path, const Checkpoint& ck) { write_file_atomic(path, encode_checkpoint(ck)); }
Checkpoint read_checkpoint(const fs::path& path) { return decode_checkpoint(read_file(path)); }

json to_json(const TokenizerConfig& c) {
    return {{"patch",
             {{"patch", c.patch.patch},
              {"temporal_patch", c.patch.temporal_patch},
              {"hidden", c.patch.hidden},
              {"channels", c.patch.channels},
              {"resolutions", c.patch.resolutions},
              {"max_frames", c.patch.max_frames}}},
            {"net",
             {{"spatial_layers", c.net.spatial_layers},
              {"temporal_layers", c.net.temporal_layers},
              {"window", c.net.window},
              {"heads", c.net.heads},
              {"latent_dim", c.net.latent_dim},
              {"mlp_ratio", c.net.mlp_ratio}}},
            {"codebook_size", c.codebook_size},
            {"normalize_codes", c.normalize_codes},
            {"commit_weight", c.commit_weight},
            {"embed_weight", c.embed_weight},
            {"kl_weight", c.kl_weight},
            {"seed", c.seed}};
}

TokenizerConfig tokenizer_config_from_json(const json& j) {
    TokenizerConfig c;
    const json& p = j.at("patch");
    c.patch.patch = p.at("patch");
    c.patch.temporal_patch = p.at("temporal_patch");
    c.patch.hidden = p.at("hidden");
    c.patch.channels = p.at("channels");
    c.patch.resolutions = p.at("resolutions").get<std::vector<std::int64_t>>();
    c.patch.max_frames = p.at("max_frames");
    const json& n = j.at("net");
    c.net.spatial_layers = n.at("spatial_layers");
    c.net.temporal_layers = n.at("temporal_layers");
    c.net.window = n.at("window");
    c.net.heads = n.at("heads");
    c.net.latent_dim = n.at("latent_dim");
    c.net.mlp_ratio = n.at("mlp_ratio");
    c.codebook_size = j.at("codebook_size");
    c.normalize_codes = j.at("normalize_codes");
    c.commit_weight = j.at("commit_weight");
    c.embed_weight = j.at("embed_weight");
    c.kl_weight = j.at("kl_weight");
    c.seed = j.at("seed");
    return c;
}

json to_json(const LmConfig& c) {
    return {{"codebook_size", c.codebook_size}, {"classes", c.classes}, {"context", c.context},
            {"width", c.width},                 {"heads", c.heads},     {"layers", c.layers},
            {"mlp_ratio", c.mlp_ratio},         {"seed", c.seed}};
}

LmConfig lm_config_from_json(const json& j) {
    LmConfig c;
    c.codebook_size = j.at("codebook_size");
    c.classes = j.at("classes");
    c.context = j.at("context");
    c.width = j.at("width");
    c.heads = j.at("heads");
    c.layers = j.at("layers");
    c.mlp_ratio = j.at("mlp_ratio");
    c.seed = j.at("seed");
    return c;
}

json to_json(const DenoiserConfig& c) {
    return {{"latent_dim", c.latent_dim}, {"max_tokens", c.max_tokens}, {"width", c.width},
            {"heads", c.heads},           {"layers", c.layers},         {"mlp_ratio", c.mlp_ratio},
            {"seed", c.seed}};
}

DenoiserConfig denoiser_config_from_json(const json& j) {
    DenoiserConfig c;
    c.latent_dim = j.at("latent_dim");
    c.max_tokens = j.at("max_tokens");
    c.width = j.at("width");
    c.heads = j.at("heads");
    c.layers = j.at("layers");
    c.mlp_ratio = j.at("mlp_ratio");
    c.seed = j.at("seed");
    return c;
}

json to_json(const Rng& rng) { return {{"key", rng.key()}, {"counter", rng.counter()}}; }

Rng rng_from_json(const json& j) {
    return Rng::restore(j.at("key").get<std::uint64_t>(), j.at("counter").get<std::uint64_t>());
}

void store_params(Checkpoint& ck, const nn::ParamStore& params) {
    for (const auto& [name, t] : params.all()) {
        ck.tensors[name] = t.detach();
    }
}

void load_params(const Checkpoint& ck, nn::ParamStore& params) {
    for (const auto& [name, t] : params.all()) {
        auto it = ck.tensors.find(name);
        if (it == ck.tensors.end()) {
            throw FormatError("checkpoint: missing parameter '" + name + "'");
        }
        if (it->second.shape() != t.shape()) {
            throw FormatError("checkpoint: parameter '" + name + "' has shape " + shape_str(it->second.shape()) +
                              ", model expects " + shape_str(t.shape()));
        }
        t.assign(it->second.data());
    }
}

void store_optimizer(Checkpoint& ck, const OptimState& o) {
    ck.meta["optimizer"] = {{"base_lr", o.base_lr},           {"beta1", o.beta1},
                            {"beta2", o.beta2},               {"eps", o.eps},
                            {"clip_norm", o.clip_norm},       {"warmup_iters", o.warmup_iters},
                            {"total_iters", o.total_iters},   {"step", o.step}};
    for (const auto& [name, v] : o.first) {
        ck.tensors["optim.first." + name] = Tensor::from({static_cast<std::int64_t>(v.size())}, v);
    }
    for (const auto& [name, v] : o.second) {
        ck.tensors["optim.second." + name] = Tensor::from({static_cast<std::int64_t>(v.size())}, v);
    }
}

OptimState load_optimizer(const Checkpoint& ck) {
    const json& j = ck.meta.at("optimizer");
    OptimState o;
    o.base_lr = j.at("base_lr");
    o.beta1 = j.at("beta1");
    o.beta2 = j.at("beta2");
    o.eps = j.at("eps");
    o.clip_norm = j.at("clip_norm");
    o.warmup_iters = j.at("warmup_iters");
    o.total_iters = j.at("total_iters");
    o.step = j.at("step");
    for (const auto& [name, t] : ck.tensors) {
        for (auto [prefix, dest] : {std::pair{"optim.first.", &o.first}, std::pair{"optim.second.", &o.second}}) {
            const std::string p(prefix);
            if (name.rfind(p, 0) == 0) {
                (*dest)[name.substr(p.size())] = std::vector<Real>(t.data().begin(), t.data().end());
            }
        }
    }
    return o;
}

void save_tokenizer(const fs::path& path, const TokenizerModel& model, const OptimState* opt, const json& extra) {
    Checkpoint ck;
    const Provenance& p = model.provenance();
    ck.meta["kind"] = "tokenizer";
    ck.meta["config"] = to_json(model.config());
    ck.meta["provenance"] = {{"latent", latent_kind_name(p.kind)},
                             {"stage", p.stage},
                             {"iter", p.iter},
                             {"vq_trained", p.vq_trained}};
    ck.meta["extra"] = extra;
    store_params(ck, model.params());
    if (opt) {
        store_optimizer(ck, *opt);
    }
    write_checkpoint(path, ck);
}

TokenizerCheckpoint load_tokenizer(const fs::path& path) {
    const Checkpoint ck = read_checkpoint(path);
    try {
        if (ck.meta.at("kind") != "tokenizer") {
            throw FormatError("checkpoint '" + path.string() + "' does not hold a tokenizer");
        }
        TokenizerCheckpoint out;
        out.model = std::make_unique<TokenizerModel>(tokenizer_config_from_json(ck.meta.at("config")));
        load_params(ck, out.model->params());
        const json& p = ck.meta.at("provenance");
        Provenance& prov = out.model->provenance();
        prov.kind = p.at("latent") == "kl" ? LatentKind::Kl : LatentKind::Vq;
        prov.stage = p.at("stage");
        prov.iter = p.at("iter");
        prov.vq_trained = p.at("vq_trained");
        if (ck.meta.contains("optimizer")) {
            out.optimizer = load_optimizer(ck);
        }
        out.extra = ck.meta.value("extra", json::object());
        return out;
    } catch (const json::exception& e) {
        throw FormatError("checkpoint '" + path.string() + "': " + e.what());
    }
}

void save_lm(const fs::path& path, const TokenLm& lm) {
    Checkpoint ck;
    ck.meta["kind"] = "lm";
    ck.meta["config"] = to_json(lm.config());
    store_params(ck, lm.params());
    write_checkpoint(path, ck);
}

std::unique_ptr<TokenLm> load_lm(const fs::path& path) {
    const Checkpoint ck = read_checkpoint(path);
    try {
        if (ck.meta.at("kind") != "lm") {
            throw FormatError("checkpoint '" + path.string() + "' does not hold a token LM");
        }
        auto lm = std::make_unique<TokenLm>(lm_config_from_json(ck.meta.at("config")));
        load_params(ck, lm->params());
        return lm;
    } catch (const json::exception& e) {
        throw FormatError("checkpoint '" + path.string() + "': " + e.what());
    }
}

void save_denoiser(const fs::path& path, const Denoiser& model, const DiffusionConfig& dc, Real latent_scale) {
    Checkpoint ck;
    ck.meta["kind"] = "denoiser";
    ck.meta["config"] = to_json(model.config());
    ck.meta["diffusion"] = {{"steps", dc.steps}, {"beta_start", dc.beta_start}, {"beta_end", dc.beta_end}};
    ck.meta["latent_scale"] = latent_scale;
    store_params(ck, model.params());
    write_checkpoint(path, ck);
}

DenoiserCheckpoint load_denoiser(const fs::path& path) {
    const Checkpoint ck = read_checkpoint(path);
    try {
        if (ck.meta.at("kind") != "denoiser") {
            throw FormatError("checkpoint '" + path.string() + "' does not hold a denoiser");
        }
        const json& d = ck.meta.at("diffusion");
        DenoiserCheckpoint out;
        out.diffusion = DiffusionConfig::linear(d.at("steps"), d.at("beta_start"), d.at("beta_end"));
        out.model = std::make_unique<Denoiser>(denoiser_config_from_json(ck.meta.at("config")), out.diffusion.steps);
        out.latent_scale = ck.meta.at("latent_scale");
        load_params(ck, out.model->params());
        return out;
    } catch (const json::exception& e) {
        throw FormatError("checkpoint '" + path.string() + "': " + e.what());
    }
}

}  // namespace otok
