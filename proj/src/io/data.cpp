#include "otok/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "otok/rng.hpp"

namespace otok {

SynthKind parse_synth_kind(const std::string& name) {
    if (name == "moving-shapes") {
        return SynthKind::MovingShapes;
    }
    if (name == "gradient-texture") {
        return SynthKind::GradientTexture;
    }
    if (name == "checkerboard") {
        return SynthKind::Checkerboard;
    }
    throw Error("unsupported dataset kind '" + name + "'");
}

const char* synth_kind_name(SynthKind kind) {
    switch (kind) {
        case SynthKind::MovingShapes: return "moving-shapes";
        case SynthKind::GradientTexture: return "gradient-texture";
        case SynthKind::Checkerboard: return "checkerboard";
    }
    return "?";
}

namespace {

struct Canvas {
    std::int64_t frames;
    std::int64_t res;
    std::vector<Real> px;

    Real& at(std::int64_t f, std::int64_t y, std::int64_t x, std::int64_t c) {
        return px[static_cast<std::size_t>(((f * res + y) * res + x) * 3 + c)];
    }
};

Sample moving_shape(Rng& rng, std::int64_t label, std::int64_t res, std::int64_t frames) {
    const std::int64_t nf = std::max<std::int64_t>(frames, 1);
    Canvas cv{nf, res, std::vector<Real>(static_cast<std::size_t>(nf * res * res * 3))};

    // Static background: dim linear ramp in a random direction.
    const Real angle = 2.0 * std::numbers::pi * rng.uniform();
    const Real ca = std::cos(angle);
    const Real sa = std::sin(angle);
    Real base[3];
    for (auto& b : base) {
        b = -0.9 + 0.3 * rng.uniform();
    }
    // Shape: filled square or disc, bright color.
    const bool disc = rng.uniform() < 0.5;
    Real color[3];
    for (auto& c : color) {
        c = 0.2 + 0.8 * rng.uniform();
    }
    const std::int64_t size = std::max<std::int64_t>(res / 4, 2);
    const Real speed = static_cast<Real>(res) / 32.0;
    static constexpr int dirs[kSynthClasses][2] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}};
    const int dx = dirs[label][0];
    const int dy = dirs[label][1];
    const auto travel = static_cast<std::int64_t>(std::ceil(speed * static_cast<Real>(nf - 1)));
    auto start = [&](int dir) {
        const std::int64_t span = res - size - (dir != 0 ? travel : 0);
        std::int64_t s = span > 0 ? rng.uniform_int(span + 1) : 0;
        return dir < 0 ? s + travel : s;
    };
    const std::int64_t x0 = start(dx);
    const std::int64_t y0 = start(dy);

    for (std::int64_t f = 0; f < nf; ++f) {
        const auto ox = x0 + static_cast<std::int64_t>(std::lround(dx * speed * static_cast<Real>(f)));
        const auto oy = y0 + static_cast<std::int64_t>(std::lround(dy * speed * static_cast<Real>(f)));
        for (std::int64_t y = 0; y < res; ++y) {
            for (std::int64_t x = 0; x < res; ++x) {
                const Real u = static_cast<Real>(x) / static_cast<Real>(res) - 0.5;
                const Real v = static_cast<Real>(y) / static_cast<Real>(res) - 0.5;
                const Real ramp = 0.3 * (ca * u + sa * v);
                bool inside = x >= ox && x < ox + size && y >= oy && y < oy + size;
                if (inside && disc) {
                    const Real cx = static_cast<Real>(x - ox) + 0.5 - static_cast<Real>(size) / 2;
                    const Real cy = static_cast<Real>(y - oy) + 0.5 - static_cast<Real>(size) / 2;
                    inside = cx * cx + cy * cy <= static_cast<Real>(size * size) / 4;
                }
                for (int c = 0; c < 3; ++c) {
                    cv.at(f, y, x, c) = inside ? color[c] : std::clamp(base[c] + ramp, -1.0, 1.0);
                }
            }
        }
    }
    return {Tensor::from({nf, res, res, 3}, std::move(cv.px)), label};
}

Sample gradient_texture(Rng& rng, std::int64_t label, std::int64_t res, std::int64_t frames) {
    const std::int64_t nf = std::max<std::int64_t>(frames, 1);
    Canvas cv{nf, res, std::vector<Real>(static_cast<std::size_t>(nf * res * res * 3))};
    Real gx[3], gy[3], amp[3], phase[3];
    for (int c = 0; c < 3; ++c) {
        gx[c] = rng.uniform() * 1.6 - 0.8;
        gy[c] = rng.uniform() * 1.6 - 0.8;
        amp[c] = 0.1 + 0.3 * rng.uniform();
        phase[c] = 2.0 * std::numbers::pi * rng.uniform();
    }
    const Real fx = 2.0 * std::numbers::pi * (1.0 + 3.0 * rng.uniform());
    const Real fy = 2.0 * std::numbers::pi * (1.0 + 3.0 * rng.uniform());
    const Real drift = 0.3 * (rng.uniform() - 0.5);
    for (std::int64_t f = 0; f < nf; ++f) {
        for (std::int64_t y = 0; y < res; ++y) {
            for (std::int64_t x = 0; x < res; ++x) {
                const Real u = static_cast<Real>(x) / static_cast<Real>(res) - 0.5;
                const Real v = static_cast<Real>(y) / static_cast<Real>(res) - 0.5;
                for (int c = 0; c < 3; ++c) {
                    const Real val = gx[c] * u + gy[c] * v +
                                     amp[c] * std::sin(fx * u + fy * v + phase[c] + drift * static_cast<Real>(f));
                    cv.at(f, y, x, c) = std::clamp(val, -1.0, 1.0);
                }
            }
        }
    }
    return {Tensor::from({nf, res, res, 3}, std::move(cv.px)), label};
}

Sample checkerboard(Rng& rng, std::int64_t label, std::int64_t res, std::int64_t frames) {
    const std::int64_t nf = std::max<std::int64_t>(frames, 1);
    Canvas cv{nf, res, std::vector<Real>(static_cast<std::size_t>(nf * res * res * 3))};
    const std::int64_t cell = std::max<std::int64_t>(res >> (label + 1), 1);
    Real a[3], b[3];
    for (int c = 0; c < 3; ++c) {
        a[c] = rng.uniform() * 2.0 - 1.0;
        b[c] = rng.uniform() * 2.0 - 1.0;
    }
    const std::int64_t shift = rng.uniform_int(cell);
    for (std::int64_t f = 0; f < nf; ++f) {
        for (std::int64_t y = 0; y < res; ++y) {
            for (std::int64_t x = 0; x < res; ++x) {
                const bool on = (((x + shift + f) / cell) + ((y + shift) / cell)) % 2 == 0;
                for (int c = 0; c < 3; ++c) {
                    cv.at(f, y, x, c) = on ? a[c] : b[c];
                }
            }
        }
    }
    return {Tensor::from({nf, res, res, 3}, std::move(cv.px)), label};
}

}  // namespace

std::vector<Sample> synth_dataset(SynthKind kind, std::int64_t n, std::int64_t resolution, std::int64_t frames,
                                  std::uint64_t seed) {
    if (n < 0 || resolution < 1 || frames < 0) {
        throw Error("synth_dataset: invalid size arguments");
    }
    std::vector<Sample> out;
    out.reserve(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        Rng rng = Rng(seed, static_cast<std::uint64_t>(kind)).split(static_cast<std::uint64_t>(i));
        const std::int64_t label = i % kSynthClasses;
        switch (kind) {
            case SynthKind::MovingShapes: out.push_back(moving_shape(rng, label, resolution, frames)); break;
            case SynthKind::GradientTexture: out.push_back(gradient_texture(rng, label, resolution, frames)); break;
            case SynthKind::Checkerboard: out.push_back(checkerboard(rng, label, resolution, frames)); break;
        }
    }
    return out;
}

Tensor stack_batch(const std::vector<Sample>& samples, const std::vector<std::int64_t>& picks) {
    if (picks.empty()) {
        throw Error("stack_batch: empty batch");
    }
    const Shape& s0 = samples.at(static_cast<std::size_t>(picks[0])).pixels.shape();
    std::vector<Real> data;
    data.reserve(static_cast<std::size_t>(shape_numel(s0)) * picks.size());
    for (auto i : picks) {
        const Tensor& t = samples.at(static_cast<std::size_t>(i)).pixels;
        if (t.shape() != s0) {
            throw ShapeError("stack_batch: mixed sample shapes " + shape_str(s0) + " and " + shape_str(t.shape()));
        }
        data.insert(data.end(), t.data().begin(), t.data().end());
    }
    Shape s = s0;
    s.insert(s.begin(), static_cast<std::int64_t>(picks.size()));
    return Tensor::from(s, std::move(data));
}

ReconMetrics metrics_report(const Tensor& x, const Tensor& x_hat) {
    if (x.shape() != x_hat.shape()) {
        throw ShapeError("metrics_report: shapes " + shape_str(x.shape()) + " and " + shape_str(x_hat.shape()) +
                         " differ");
    }
    Real sum = 0.0;
    const auto a = x.data();
    const auto b = x_hat.data();
    for (std::size_t i = 0; i < a.size(); ++i) {
        const Real d = a[i] - b[i];
        sum += d * d;
    }
    ReconMetrics m;
    m.mse = sum / static_cast<Real>(a.size());
    m.psnr = m.mse > 0.0 ? std::min(kPsnrCap, 10.0 * std::log10(4.0 / m.mse)) : kPsnrCap;
    return m;
}

}  // namespace otok
