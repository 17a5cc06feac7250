#include "otok/nn.hpp"

#include <cmath>

namespace otok::nn {

using namespace otok::ops;

Tensor ParamStore::add(const std::string& name, Tensor init) {
    if (params_.count(name)) {
        throw Error("duplicate parameter '" + name + "'");
    }
    Tensor leaf = init.detach();
    leaf.set_requires_grad(true);
    params_.emplace(name, leaf);
    return leaf;
}

Tensor ParamStore::get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) {
        throw Error("unknown parameter '" + name + "'");
    }
    return it->second;
}

std::int64_t ParamStore::total_size() const {
    std::int64_t n = 0;
    for (const auto& [_, t] : params_) {
        n += t.numel();
    }
    return n;
}

Rng init_stream(std::uint64_t seed, const std::string& name) {
    std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
    for (unsigned char ch : name) {
        h = (h ^ ch) * 1099511628211ULL;
    }
    return Rng(seed).split(h);
}

Linear::Linear(ParamStore& store, const std::string& name, std::int64_t in, std::int64_t out, std::uint64_t seed,
               bool bias, Real init_scale) {
    Rng rng = init_stream(seed, name + ".weight");
    weight_ = store.add(name + ".weight", rng.normal_tensor({in, out}, init_scale / std::sqrt(static_cast<Real>(in))));
    if (bias) {
        bias_ = store.add(name + ".bias", Tensor::zeros({out}));
    }
}

Tensor Linear::operator()(const Tensor& x) const {
    Tensor y = matmul(x, weight_);
    return bias_.defined() ? add(y, bias_) : y;
}

LayerNorm::LayerNorm(ParamStore& store, const std::string& name, std::int64_t width)
    : gain_(store.add(name + ".gain", Tensor::ones({width}))), shift_(store.add(name + ".shift", Tensor::zeros({width}))) {}

Tensor LayerNorm::operator()(const Tensor& x) const { return add(mul(layer_norm(x, -1), gain_), shift_); }

Mlp::Mlp(ParamStore& store, const std::string& name, std::int64_t width, std::int64_t ratio, std::uint64_t seed)
    : up_(store, name + ".up", width, width * ratio, seed), down_(store, name + ".down", width * ratio, width, seed) {}

Tensor Mlp::operator()(const Tensor& x) const { return down_(gelu(up_(x))); }

std::vector<bool> causal_mask(std::int64_t length) {
    std::vector<bool> m(static_cast<std::size_t>(length * length), false);
    for (std::int64_t i = 0; i < length; ++i) {
        for (std::int64_t j = i + 1; j < length; ++j) {
            m[static_cast<std::size_t>(i * length + j)] = true;
        }
    }
    return m;
}

SelfAttention::SelfAttention(ParamStore& store, const std::string& name, std::int64_t width, std::int64_t heads,
                             std::uint64_t seed)
    : qkv_(store, name + ".qkv", width, 3 * width, seed), out_(store, name + ".out", width, width, seed),
      heads_(heads), width_(width) {
    if (heads <= 0 || width % heads != 0) {
        throw ShapeError("attention width " + std::to_string(width) + " not divisible by " + std::to_string(heads) +
                         " heads");
    }
}

Tensor SelfAttention::operator()(const Tensor& x, const std::vector<bool>* blocked, Tensor* probs) const {
    if (x.rank() != 3 || x.dim(2) != width_) {
        throw ShapeError("attention expects (N, L, " + std::to_string(width_) + "), got " + shape_str(x.shape()));
    }
    const auto n = x.dim(0);
    const auto len = x.dim(1);
    const auto head_dim = width_ / heads_;
    Tensor qkv = permute(reshape(qkv_(x), {n, len, 3, heads_, head_dim}), {2, 0, 3, 1, 4});
    auto part = [&](std::int64_t i) { return reshape(slice(qkv, 0, i, i + 1), {n, heads_, len, head_dim}); };
    Tensor q = part(0);
    Tensor k = part(1);
    Tensor v = part(2);
    Tensor scores = scale(matmul(q, transpose_last(k)), 1.0 / std::sqrt(static_cast<Real>(head_dim)));
    if (blocked) {
        // Large finite fill: exp underflows to exactly zero, keeping masked keys out bit-for-bit.
        scores = masked_fill(scores, *blocked, {len, len}, -1e30);
    }
    Tensor p = softmax(scores, -1);
    if (probs) {
        *probs = p;
    }
    Tensor ctx = reshape(permute(matmul(p, v), {0, 2, 1, 3}), {n, len, width_});
    return out_(ctx);
}

TransformerBlock::TransformerBlock(ParamStore& store, const std::string& name, std::int64_t width, std::int64_t heads,
                                   std::int64_t mlp_ratio, std::uint64_t seed)
    : norm1_(store, name + ".norm1", width), attn_(store, name + ".attn", width, heads, seed),
      norm2_(store, name + ".norm2", width), mlp_(store, name + ".mlp", width, mlp_ratio, seed) {}

Tensor TransformerBlock::attend(const Tensor& x, const std::vector<bool>* blocked, Tensor* probs) const {
    return attn_(x, blocked, probs);
}

Tensor TransformerBlock::feed_forward(const Tensor& x) const { return add(x, mlp_(norm2_(x))); }

Tensor TransformerBlock::operator()(const Tensor& x, const std::vector<bool>* blocked) const {
    Tensor h = add(x, attn_(norm1_(x), blocked));
    return feed_forward(h);
}

}  // namespace otok::nn
