// Spatial-temporal decoupled encoder/decoder.
//
// Visual tensors are batched (B, F, H, W, C) with F = 1 + T frames; T = 0 for
// images. Token fields are (B, S, H/p, W/p, c) with S = 1 + T/t: slot 0 holds
// the first frame, every later slot holds t frames.

#pragma once

#include <vector>

#include "otok/nn.hpp"
#include "otok/tensor.hpp"

namespace otok {

enum class Modality { Image, Video };

const char* modality_name(Modality m);

struct PatchConfig {
    std::int64_t patch = 8;           // p
    std::int64_t temporal_patch = 4;  // t
    std::int64_t hidden = 128;        // c
    std::int64_t channels = 3;
    std::vector<std::int64_t> resolutions{32, 48, 64};
    std::int64_t max_frames = 17;

    std::int64_t max_resolution() const;
    std::int64_t max_slots() const { return 1 + (max_frames - 1) / temporal_patch; }
    void validate() const;
};

struct NetConfig {
    std::int64_t spatial_layers = 4;
    std::int64_t temporal_layers = 4;
    std::int64_t window = 2;
    std::int64_t heads = 4;
    std::int64_t latent_dim = 8;
    std::int64_t mlp_ratio = 4;

    void validate(const PatchConfig& patch) const;
};

struct TokenField {
    Tensor embeddings;  // (B, S, H/p, W/p, c)
    Modality modality = Modality::Image;

    std::int64_t slots() const { return embeddings.dim(1); }
    std::int64_t grid_height() const { return embeddings.dim(2); }
    std::int64_t grid_width() const { return embeddings.dim(3); }
};

// Adds a leading batch axis to (F, H, W, C) input; batched input passes through.
Tensor as_batch(const Tensor& x);

// Number of token slots for a clip of `frames` frames; throws when frames - 1 is not a multiple of t.
std::int64_t token_slots(std::int64_t frames, const PatchConfig& cfg);

class PatchEmbed {
public:
    PatchEmbed() = default;
    PatchEmbed(nn::ParamStore& store, const std::string& name, const PatchConfig& cfg, std::uint64_t seed);

    TokenField operator()(const Tensor& x) const;

    const nn::Linear& image_projection() const { return image_; }
    const nn::Linear& video_projection() const { return video_; }

private:
    PatchConfig cfg_;
    nn::Linear image_;
    nn::Linear video_;
};

// Learned absolute spatial table (shared over time) plus temporal table (shared
// over space), both sized for the largest configuration and cropped per input.
class PositionTable {
public:
    PositionTable() = default;
    PositionTable(nn::ParamStore& store, const std::string& name, std::int64_t max_grid, std::int64_t max_slots,
                  std::int64_t width, std::uint64_t seed);

    TokenField operator()(const TokenField& tf) const;

    const Tensor& spatial() const { return spatial_; }   // (G, G, c)
    const Tensor& temporal() const { return temporal_; } // (S_max, c)

private:
    Tensor spatial_;
    Tensor temporal_;
};

// Multi-head attention inside disjoint w x w windows of each slot, then MLP.
class WindowBlock {
public:
    WindowBlock() = default;
    WindowBlock(nn::ParamStore& store, const std::string& name, std::int64_t width, std::int64_t heads,
                std::int64_t mlp_ratio, std::int64_t window, std::uint64_t seed);

    TokenField operator()(const TokenField& tf) const;
    std::int64_t window() const { return window_; }

private:
    nn::TransformerBlock block_;
    std::int64_t window_ = 1;
};

// Causal multi-head attention along the slot axis at each spatial site, then MLP.
class CausalTemporalBlock {
public:
    CausalTemporalBlock() = default;
    CausalTemporalBlock(nn::ParamStore& store, const std::string& name, std::int64_t width, std::int64_t heads,
                        std::int64_t mlp_ratio, std::uint64_t seed);

    // probs, when non-null, receives (B*Hg*Wg, heads, S, S) attention weights.
    TokenField operator()(const TokenField& tf, Tensor* probs = nullptr) const;

private:
    nn::TransformerBlock block_;
};

class Encoder {
public:
    Encoder() = default;
    Encoder(nn::ParamStore& store, const PatchConfig& patch, const NetConfig& net, std::uint64_t seed);

    TokenField operator()(const Tensor& x) const;

    const PatchEmbed& patch_embed() const { return patch_; }
    const PositionTable& positions() const { return positions_; }

private:
    PatchEmbed patch_;
    PositionTable positions_;
    std::vector<WindowBlock> spatial_;
    std::vector<CausalTemporalBlock> temporal_;
    nn::LayerNorm norm_;
    nn::Linear head_;
};

class Decoder {
public:
    Decoder() = default;
    Decoder(nn::ParamStore& store, const PatchConfig& patch, const NetConfig& net, std::uint64_t seed);

    // z: (B, S, Hg, Wg, c) -> (B, 1 + (S-1)t, Hg p, Wg p, C).
    Tensor operator()(const Tensor& z) const;

    // Inverse of patchify for per-token pixel vectors.
    Tensor unpatchify(const Tensor& first, const Tensor& rest) const;

    const nn::Linear& image_output() const { return image_out_; }
    const nn::Linear& video_output() const { return video_out_; }

private:
    PatchConfig cfg_;
    PositionTable positions_;
    std::vector<CausalTemporalBlock> temporal_;
    std::vector<WindowBlock> spatial_;
    nn::LayerNorm norm_;
    nn::Linear image_out_;
    nn::Linear video_out_;
};

}  // namespace otok
