#include "pmae/masking.hpp"

#include <cmath>
#include <numeric>

#include "pmae/errors.hpp"

namespace pmae {

size_t PatchMask::masked_count() const {
    size_t n = 0;
    for (uint8_t m : masked) n += m;
    return n;
}

std::vector<size_t> PatchMask::visible_indices() const {
    std::vector<size_t> out;
    for (size_t i = 0; i < masked.size(); ++i) {
        if (!masked[i]) out.push_back(i);
    }
    return out;
}

std::vector<size_t> PatchMask::masked_indices() const {
    std::vector<size_t> out;
    for (size_t i = 0; i < masked.size(); ++i) {
        if (masked[i]) out.push_back(i);
    }
    return out;
}

size_t ComponentMask::masked_count() const {
    size_t n = 0;
    for (uint8_t m : masked) n += m;
    return n;
}

RatioPolicy RatioPolicy::fixed(double r) {
    if (!(r >= 0.0 && r <= 1.0)) {
        throw ConfigError("mask ratio must lie in [0,1], got " + std::to_string(r));
    }
    RatioPolicy p;
    p.kind = Kind::Fixed;
    p.fixed_r = r;
    return p;
}

RatioPolicy RatioPolicy::uniform(double lo, double hi) {
    if (!(0.0 <= lo && lo <= hi && hi <= 1.0)) {
        throw ConfigError("uniform ratio bounds must satisfy 0 <= lo <= hi <= 1, got [" +
                          std::to_string(lo) + "," + std::to_string(hi) + "]");
    }
    RatioPolicy p;
    p.kind = Kind::Uniform;
    p.lo = lo;
    p.hi = hi;
    return p;
}

PatchMask sample_patch_mask(Rng& rng, size_t grid_h, size_t grid_w, double r) {
    if (grid_h < 1 || grid_w < 1) throw ConfigError("patch grid extents must be >= 1");
    if (!(r >= 0.0 && r <= 1.0)) {
        throw ConfigError("mask ratio must lie in [0,1], got " + std::to_string(r));
    }
    const size_t p = grid_h * grid_w;
    const size_t k = static_cast<size_t>(std::llround(r * static_cast<double>(p)));
    std::vector<size_t> order(p);
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    PatchMask mask;
    mask.grid_h = grid_h;
    mask.grid_w = grid_w;
    mask.ratio = r;
    mask.masked.assign(p, 0);
    for (size_t i = 0; i < k; ++i) mask.masked[order[i]] = 1;
    return mask;
}

ComponentMask sample_component_mask(Rng& rng, const std::vector<double>& variance_fractions,
                                    double r) {
    if (!(r >= 0.0 && r <= 1.0)) {
        throw ConfigError("mask ratio must lie in [0,1], got " + std::to_string(r));
    }
    const size_t d = variance_fractions.size();
    ComponentMask mask;
    mask.target_ratio = r;
    mask.masked.assign(d, 0);
    if (r == 0.0) return mask;
    double total = 0.0;
    for (double f : variance_fractions) total += f;
    if (total <= 0.0) throw Error("degenerate spectrum: no component carries variance");
    std::vector<size_t> order(d);
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    double cum = 0.0;
    for (size_t idx : order) {
        if (cum >= r) break;
        mask.masked[idx] = 1;
        cum += variance_fractions[idx];
    }
    mask.achieved_ratio = cum;
    return mask;
}

double draw_ratio(Rng& rng, const RatioPolicy& policy) {
    if (policy.kind == RatioPolicy::Kind::Fixed) return policy.fixed_r;
    return rng.uniform(policy.lo, policy.hi);
}

Tensor patch_mask_to_pixel_indicator(const PatchMask& mask, size_t patch_px, size_t channels) {
    if (patch_px < 1 || channels < 1) {
        throw ConfigError("patch_px and channels must be >= 1");
    }
    const size_t h = mask.grid_h * patch_px;
    const size_t w = mask.grid_w * patch_px;
    std::vector<double> data(channels * h * w);
    for (size_t c = 0; c < channels; ++c) {
        for (size_t y = 0; y < h; ++y) {
            for (size_t x = 0; x < w; ++x) {
                const size_t patch = (y / patch_px) * mask.grid_w + (x / patch_px);
                data[(c * h + y) * w + x] = mask.masked[patch] ? 0.0 : 1.0;
            }
        }
    }
    return Tensor::from_data({channels, h, w}, std::move(data));
}

Tensor component_mask_to_indicator(const ComponentMask& mask) {
    const size_t d = mask.masked.size();
    std::vector<double> data(d);
    for (size_t i = 0; i < d; ++i) data[i] = mask.masked[i] ? 0.0 : 1.0;
    return Tensor::from_data({d}, std::move(data));
}

} // namespace pmae
