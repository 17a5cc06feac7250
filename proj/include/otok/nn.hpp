#pragma once

#include <map>
#include <string>
#include <vector>

#include "otok/rng.hpp"
#include "otok/tensor.hpp"

namespace otok::nn {

// Named trainable tensors. Modules keep handles to the same leaves, so an
// in-place update through the store is visible to every module.
class ParamStore {
public:
    Tensor add(const std::string& name, Tensor init);
    Tensor get(const std::string& name) const;
    bool contains(const std::string& name) const { return params_.count(name) != 0; }
    const std::map<std::string, Tensor>& all() const { return params_; }
    std::int64_t total_size() const;

private:
    std::map<std::string, Tensor> params_;
};

// Deterministic per-parameter initialization stream, independent of creation order.
Rng init_stream(std::uint64_t seed, const std::string& name);

class Linear {
public:
    Linear() = default;
    Linear(ParamStore& store, const std::string& name, std::int64_t in, std::int64_t out, std::uint64_t seed,
           bool bias = true, Real init_scale = 1.0);

    Tensor operator()(const Tensor& x) const;

    const Tensor& weight() const { return weight_; }  // (in, out)
    const Tensor& bias() const { return bias_; }
    bool has_bias() const { return bias_.defined(); }
    std::int64_t in_features() const { return weight_.dim(0); }
    std::int64_t out_features() const { return weight_.dim(1); }

private:
    Tensor weight_;
    Tensor bias_;
};

class LayerNorm {
public:
    LayerNorm() = default;
    LayerNorm(ParamStore& store, const std::string& name, std::int64_t width);
    Tensor operator()(const Tensor& x) const;

private:
    Tensor gain_;
    Tensor shift_;
};

class Mlp {
public:
    Mlp() = default;
    Mlp(ParamStore& store, const std::string& name, std::int64_t width, std::int64_t ratio, std::uint64_t seed);
    Tensor operator()(const Tensor& x) const;

private:
    Linear up_;
    Linear down_;
};

// Boolean [L, L] mask; true marks blocked (query i, key j) pairs with j > i.
std::vector<bool> causal_mask(std::int64_t length);

// Multi-head self-attention over x of shape (N, L, width).
class SelfAttention {
public:
    SelfAttention() = default;
    SelfAttention(ParamStore& store, const std::string& name, std::int64_t width, std::int64_t heads,
                  std::uint64_t seed);

    // blocked: optional (L, L) mask; probs receives softmax weights (N, heads, L, L) when non-null.
    Tensor operator()(const Tensor& x, const std::vector<bool>* blocked = nullptr, Tensor* probs = nullptr) const;

    std::int64_t heads() const { return heads_; }

private:
    Linear qkv_;
    Linear out_;
    std::int64_t heads_ = 1;
    std::int64_t width_ = 0;
};

// Pre-norm residual block: x + attn(ln(x)), then x + mlp(ln(x)).
class TransformerBlock {
public:
    TransformerBlock() = default;
    TransformerBlock(ParamStore& store, const std::string& name, std::int64_t width, std::int64_t heads,
                     std::int64_t mlp_ratio, std::uint64_t seed);

    // x: (N, L, width).
    Tensor operator()(const Tensor& x, const std::vector<bool>* blocked = nullptr) const;

    // Exposes the attention sub-block for callers that re-layout tokens around it.
    Tensor attend(const Tensor& x, const std::vector<bool>* blocked = nullptr, Tensor* probs = nullptr) const;
    Tensor feed_forward(const Tensor& x) const;
    const LayerNorm& pre_attention_norm() const { return norm1_; }

private:
    LayerNorm norm1_;
    SelfAttention attn_;
    LayerNorm norm2_;
    Mlp mlp_;
};

}  // namespace otok::nn
