#pragma once

#include <vector>

#include "pmae/masking.hpp"
#include "pmae/pca.hpp"
#include "pmae/tensor.hpp"

namespace pmae {

enum class LossKind { Mae, PmaePc, PmaePixel };

struct LossConfig {
    LossKind kind = LossKind::Mae;
    bool norm_pix_targets = false; // pixel regime only

    void validate() const;
};

// Mean over masked pixels of (pred - target)^2. Targets are the raw image, or
// with norm_pix_targets each patch of the target standardized by its own
// mean and variance (eps 1e-6). Visible pixels contribute nothing. pred and x
// are [B,C,H,W]; one mask per image.
Tensor mae_loss(const Tensor& pred_image, const Tensor& x,
                const std::vector<PatchMask>& masks, bool norm_pix_targets);

// Mean over masked components of the squared coefficient error between the
// projections of prediction and input. Visible components contribute nothing.
Tensor pmae_loss_pc(const Tensor& pred_image, const Tensor& x, const ComponentMask& mask,
                    const PcaBasis& basis);

// Mean over all pixels of (pred - back-projection of the masked coefficients
// of x)^2; the whole decoder output is penalized.
Tensor pmae_loss_pixel(const Tensor& pred_image, const Tensor& x, const ComponentMask& mask,
                       const PcaBasis& basis);

} // namespace pmae
