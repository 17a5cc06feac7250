#include "otok/tokenizer.hpp"

#include <algorithm>

namespace otok {

using namespace otok::ops;

const char* modality_name(Modality m) { return m == Modality::Image ? "image" : "video"; }

std::int64_t PatchConfig::max_resolution() const {
    if (resolutions.empty()) {
        throw Error("patch config has no resolutions");
    }
    return *std::max_element(resolutions.begin(), resolutions.end());
}

void PatchConfig::validate() const {
    if (patch < 1 || temporal_patch < 1 || hidden < 1 || channels < 1) {
        throw Error("patch config: p, t, c and channels must be >= 1");
    }
    if (max_frames < 1 || (max_frames - 1) % temporal_patch != 0) {
        throw Error("patch config: max_frames - 1 must be a multiple of t");
    }
    for (auto r : resolutions) {
        if (r <= 0 || r % patch != 0) {
            throw Error("patch config: resolution " + std::to_string(r) + " not divisible by p=" +
                        std::to_string(patch));
        }
    }
    (void)max_resolution();
}

void NetConfig::validate(const PatchConfig& patch) const {
    if (heads < 1 || patch.hidden % heads != 0) {
        throw Error("net config: hidden width " + std::to_string(patch.hidden) + " not divisible by heads=" +
                    std::to_string(heads));
    }
    if (window < 1) {
        throw Error("net config: window must be >= 1");
    }
    for (auto r : patch.resolutions) {
        if ((r / patch.patch) % window != 0) {
            throw Error("net config: grid side " + std::to_string(r / patch.patch) + " not divisible by window " +
                        std::to_string(window));
        }
    }
    if (latent_dim < 1 || mlp_ratio < 1 || spatial_layers < 0 || temporal_layers < 0) {
        throw Error("net config: invalid layer or latent sizes");
    }
}

Tensor as_batch(const Tensor& x) {
    if (x.rank() == 5) {
        return x;
    }
    if (x.rank() == 4) {
        Shape s = x.shape();
        s.insert(s.begin(), 1);
        return reshape(x, s);
    }
    throw ShapeError("visual tensor must be (F, H, W, C) or (B, F, H, W, C), got " + shape_str(x.shape()));
}

std::int64_t token_slots(std::int64_t frames, const PatchConfig& cfg) {
    if (frames < 1 || (frames - 1) % cfg.temporal_patch != 0) {
        throw ShapeError("frame axis: " + std::to_string(frames) + " frames is not 1 + a multiple of t=" +
                         std::to_string(cfg.temporal_patch));
    }
    return 1 + (frames - 1) / cfg.temporal_patch;
}

PatchEmbed::PatchEmbed(nn::ParamStore& store, const std::string& name, const PatchConfig& cfg, std::uint64_t seed)
    : cfg_(cfg),
      image_(store, name + ".image", cfg.patch * cfg.patch * cfg.channels, cfg.hidden, seed),
      video_(store, name + ".video", cfg.temporal_patch * cfg.patch * cfg.patch * cfg.channels, cfg.hidden, seed) {}

TokenField PatchEmbed::operator()(const Tensor& input) const {
    const Tensor x = as_batch(input);
    const auto b = x.dim(0);
    const auto frames = x.dim(1);
    const auto h = x.dim(2);
    const auto w = x.dim(3);
    const auto ch = x.dim(4);
    const auto p = cfg_.patch;
    const auto t = cfg_.temporal_patch;
    if (ch != cfg_.channels) {
        throw ShapeError("channel axis: expected " + std::to_string(cfg_.channels) + ", got " + std::to_string(ch));
    }
    if (h % p != 0) {
        throw ShapeError("height axis: " + std::to_string(h) + " not divisible by p=" + std::to_string(p));
    }
    if (w % p != 0) {
        throw ShapeError("width axis: " + std::to_string(w) + " not divisible by p=" + std::to_string(p));
    }
    const auto slots = token_slots(frames, cfg_);
    const auto gh = h / p;
    const auto gw = w / p;

    // First frame: (py, px, ch) patch vectors through the image projection.
    Tensor first = reshape(slice(x, 1, 0, 1), {b, gh, p, gw, p, ch});
    first = reshape(permute(first, {0, 1, 3, 2, 4, 5}), {b, 1, gh, gw, p * p * ch});
    Tensor tokens = image_(first);
    if (slots > 1) {
        // Remaining frames: (dt, py, px, ch) tubelets through the video projection.
        Tensor rest = reshape(slice(x, 1, 1, frames), {b, slots - 1, t, gh, p, gw, p, ch});
        rest = reshape(permute(rest, {0, 1, 3, 5, 2, 4, 6, 7}), {b, slots - 1, gh, gw, t * p * p * ch});
        tokens = concat({tokens, video_(rest)}, 1);
    }
    return {tokens, slots == 1 ? Modality::Image : Modality::Video};
}

PositionTable::PositionTable(nn::ParamStore& store, const std::string& name, std::int64_t max_grid,
                             std::int64_t max_slots, std::int64_t width, std::uint64_t seed) {
    Rng rs = nn::init_stream(seed, name + ".spatial");
    Rng rt = nn::init_stream(seed, name + ".temporal");
    spatial_ = store.add(name + ".spatial", rs.normal_tensor({max_grid, max_grid, width}, 0.02));
    temporal_ = store.add(name + ".temporal", rt.normal_tensor({max_slots, width}, 0.02));
}

TokenField PositionTable::operator()(const TokenField& tf) const {
    const auto slots = tf.slots();
    const auto gh = tf.grid_height();
    const auto gw = tf.grid_width();
    const auto width = tf.embeddings.dim(4);
    if (gh > spatial_.dim(0) || gw > spatial_.dim(1)) {
        throw ShapeError("position table: grid " + std::to_string(gh) + "x" + std::to_string(gw) +
                         " exceeds embedding table " + shape_str(spatial_.shape()));
    }
    if (slots > temporal_.dim(0)) {
        throw ShapeError("position table: " + std::to_string(slots) + " slots exceed temporal table " +
                         shape_str(temporal_.shape()));
    }
    Tensor spatial = slice(slice(spatial_, 0, 0, gh), 1, 0, gw);
    Tensor temporal = reshape(slice(temporal_, 0, 0, slots), {slots, 1, 1, width});
    return {add(add(tf.embeddings, spatial), temporal), tf.modality};
}

WindowBlock::WindowBlock(nn::ParamStore& store, const std::string& name, std::int64_t width, std::int64_t heads,
                         std::int64_t mlp_ratio, std::int64_t window, std::uint64_t seed)
    : block_(store, name, width, heads, mlp_ratio, seed), window_(window) {}

TokenField WindowBlock::operator()(const TokenField& tf) const {
    const Tensor& x = tf.embeddings;
    const auto b = x.dim(0);
    const auto s = x.dim(1);
    const auto gh = x.dim(2);
    const auto gw = x.dim(3);
    const auto c = x.dim(4);
    const auto w = window_;
    if (gh % w != 0 || gw % w != 0) {
        throw ShapeError("window attention: grid " + std::to_string(gh) + "x" + std::to_string(gw) +
                         " not divisible by window " + std::to_string(w));
    }
    const auto nh = gh / w;
    const auto nw = gw / w;
    Tensor h = block_.pre_attention_norm()(x);
    h = reshape(permute(reshape(h, {b, s, nh, w, nw, w, c}), {0, 1, 2, 4, 3, 5, 6}), {b * s * nh * nw, w * w, c});
    h = block_.attend(h);
    h = reshape(permute(reshape(h, {b, s, nh, nw, w, w, c}), {0, 1, 2, 4, 3, 5, 6}), {b, s, gh, gw, c});
    return {block_.feed_forward(add(x, h)), tf.modality};
}

CausalTemporalBlock::CausalTemporalBlock(nn::ParamStore& store, const std::string& name, std::int64_t width,
                                         std::int64_t heads, std::int64_t mlp_ratio, std::uint64_t seed)
    : block_(store, name, width, heads, mlp_ratio, seed) {}

TokenField CausalTemporalBlock::operator()(const TokenField& tf, Tensor* probs) const {
    const Tensor& x = tf.embeddings;
    const auto b = x.dim(0);
    const auto s = x.dim(1);
    const auto gh = x.dim(2);
    const auto gw = x.dim(3);
    const auto c = x.dim(4);
    const auto mask = nn::causal_mask(s);
    Tensor h = block_.pre_attention_norm()(x);
    h = reshape(permute(h, {0, 2, 3, 1, 4}), {b * gh * gw, s, c});
    h = block_.attend(h, &mask, probs);
    h = permute(reshape(h, {b, gh, gw, s, c}), {0, 3, 1, 2, 4});
    return {block_.feed_forward(add(x, h)), tf.modality};
}

Encoder::Encoder(nn::ParamStore& store, const PatchConfig& patch, const NetConfig& net, std::uint64_t seed) {
    patch.validate();
    net.validate(patch);
    patch_ = PatchEmbed(store, "encoder.patch", patch, seed);
    positions_ = PositionTable(store, "encoder.pos", patch.max_resolution() / patch.patch, patch.max_slots(),
                               patch.hidden, seed);
    for (std::int64_t i = 0; i < net.spatial_layers; ++i) {
        spatial_.emplace_back(store, "encoder.spatial." + std::to_string(i), patch.hidden, net.heads, net.mlp_ratio,
                              net.window, seed);
    }
    for (std::int64_t i = 0; i < net.temporal_layers; ++i) {
        temporal_.emplace_back(store, "encoder.temporal." + std::to_string(i), patch.hidden, net.heads,
                               net.mlp_ratio, seed);
    }
    norm_ = nn::LayerNorm(store, "encoder.norm", patch.hidden);
    head_ = nn::Linear(store, "encoder.head", patch.hidden, patch.hidden, seed);
}

TokenField Encoder::operator()(const Tensor& x) const {
    TokenField tf = positions_(patch_(x));
    for (const auto& block : spatial_) {
        tf = block(tf);
    }
    for (const auto& block : temporal_) {
        tf = block(tf);
    }
    return {head_(norm_(tf.embeddings)), tf.modality};
}

Decoder::Decoder(nn::ParamStore& store, const PatchConfig& patch, const NetConfig& net, std::uint64_t seed)
    : cfg_(patch) {
    patch.validate();
    net.validate(patch);
    positions_ = PositionTable(store, "decoder.pos", patch.max_resolution() / patch.patch, patch.max_slots(),
                               patch.hidden, seed);
    for (std::int64_t i = 0; i < net.temporal_layers; ++i) {
        temporal_.emplace_back(store, "decoder.temporal." + std::to_string(i), patch.hidden, net.heads,
                               net.mlp_ratio, seed);
    }
    for (std::int64_t i = 0; i < net.spatial_layers; ++i) {
        spatial_.emplace_back(store, "decoder.spatial." + std::to_string(i), patch.hidden, net.heads, net.mlp_ratio,
                              net.window, seed);
    }
    norm_ = nn::LayerNorm(store, "decoder.norm", patch.hidden);
    const auto p = patch.patch;
    image_out_ = nn::Linear(store, "decoder.image_out", patch.hidden, p * p * patch.channels, seed);
    video_out_ = nn::Linear(store, "decoder.video_out", patch.hidden, patch.temporal_patch * p * p * patch.channels,
                            seed);
}

Tensor Decoder::operator()(const Tensor& z) const {
    if (z.rank() != 5 || z.dim(4) != cfg_.hidden) {
        throw ShapeError("decoder input must be (B, S, Hg, Wg, " + std::to_string(cfg_.hidden) + "), got " +
                         shape_str(z.shape()));
    }
    TokenField tf = positions_({z, z.dim(1) == 1 ? Modality::Image : Modality::Video});
    for (const auto& block : temporal_) {
        tf = block(tf);
    }
    for (const auto& block : spatial_) {
        tf = block(tf);
    }
    Tensor h = norm_(tf.embeddings);
    const auto slots = h.dim(1);
    Tensor first = image_out_(slice(h, 1, 0, 1));
    Tensor rest = slots > 1 ? video_out_(slice(h, 1, 1, slots)) : Tensor();
    return unpatchify(first, rest);
}

Tensor Decoder::unpatchify(const Tensor& first, const Tensor& rest) const {
    const auto b = first.dim(0);
    const auto gh = first.dim(2);
    const auto gw = first.dim(3);
    const auto p = cfg_.patch;
    const auto t = cfg_.temporal_patch;
    const auto ch = cfg_.channels;
    Tensor img = reshape(first, {b, gh, gw, p, p, ch});
    img = reshape(permute(img, {0, 1, 3, 2, 4, 5}), {b, 1, gh * p, gw * p, ch});
    if (!rest.defined()) {
        return img;
    }
    const auto s = rest.dim(1);
    Tensor vid = reshape(rest, {b, s, gh, gw, t, p, p, ch});
    vid = reshape(permute(vid, {0, 1, 4, 2, 5, 3, 6, 7}), {b, s * t, gh * p, gw * p, ch});
    return concat({img, vid}, 1);
}

}  // namespace otok
