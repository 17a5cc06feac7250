// Procedural datasets and reconstruction metrics.

#pragma once

#include <string>
#include <vector>

#include "otok/tensor.hpp"

namespace otok {

enum class SynthKind { MovingShapes, GradientTexture, Checkerboard };

SynthKind parse_synth_kind(const std::string& name);
const char* synth_kind_name(SynthKind kind);

struct Sample {
    Tensor pixels;  // (F, H, W, 3) in [-1, 1]
    std::int64_t label = 0;
};

constexpr std::int64_t kSynthClasses = 4;

// Deterministic procedural samples; frames = 0 gives single-frame images.
// Moving shapes travel in a class-dependent direction over a static background.
std::vector<Sample> synth_dataset(SynthKind kind, std::int64_t n, std::int64_t resolution, std::int64_t frames,
                                  std::uint64_t seed);

// Stacks (F, H, W, C) samples into one (B, F, H, W, C) batch.
Tensor stack_batch(const std::vector<Sample>& samples, const std::vector<std::int64_t>& picks);

struct ReconMetrics {
    Real mse = 0.0;
    Real psnr = 0.0;
};

constexpr Real kPsnrCap = 99.0;

// PSNR over the 2-unit [-1, 1] range: 10 log10(4 / mse), capped at 99 dB.
ReconMetrics metrics_report(const Tensor& x, const Tensor& x_hat);

}  // namespace otok
