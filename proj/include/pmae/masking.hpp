#pragma once

#include <cstdint>
#include <vector>

#include "pmae/rng.hpp"
#include "pmae/tensor.hpp"

namespace pmae {

// Patch-grid mask for the pixel regime: true entries are hidden from the
// encoder and reconstructed by the decoder.
struct PatchMask {
    size_t grid_h = 0;
    size_t grid_w = 0;
    std::vector<uint8_t> masked; // row-major grid, 1 = masked
    double ratio = 0.0;          // target r

    size_t num_patches() const { return grid_h * grid_w; }
    size_t masked_count() const;
    std::vector<size_t> visible_indices() const;
    std::vector<size_t> masked_indices() const;
};

// Principal-component mask: true entries are zeroed in coefficient space.
struct ComponentMask {
    std::vector<uint8_t> masked; // length D, 1 = masked
    double target_ratio = 0.0;
    double achieved_ratio = 0.0; // variance fraction actually masked

    size_t dim() const { return masked.size(); }
    size_t masked_count() const;
};

// Fixed ratio for the standard/tuned regimes, uniform for the randomized one.
struct RatioPolicy {
    enum class Kind { Fixed, Uniform };
    Kind kind = Kind::Fixed;
    double fixed_r = 0.0;
    double lo = 0.0;
    double hi = 0.0;

    static RatioPolicy fixed(double r);
    static RatioPolicy uniform(double lo, double hi);
};

// Masks exactly round(r * P) patches (half away from zero), chosen uniformly
// without replacement via a seeded shuffle.
PatchMask sample_patch_mask(Rng& rng, size_t grid_h, size_t grid_w, double r);

// Visits components in a seeded uniform shuffle and masks each one while the
// cumulative masked variance is still below r, so the component that reaches
// or exceeds the budget is included. r = 0 masks nothing.
ComponentMask sample_component_mask(Rng& rng, const std::vector<double>& variance_fractions,
                                    double r);

double draw_ratio(Rng& rng, const RatioPolicy& policy);

// 0/1 visibility indicator shaped [channels, grid_h*patch_px, grid_w*patch_px]:
// masked patches are 0 across all channels, visible patches 1.
Tensor patch_mask_to_pixel_indicator(const PatchMask& mask, size_t patch_px, size_t channels);

// 0/1 visibility indicator of length D: masked components are 0.
Tensor component_mask_to_indicator(const ComponentMask& mask);

} // namespace pmae
