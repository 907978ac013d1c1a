#include "pmae/objectives.hpp"

#include <cmath>

namespace pmae {

void LossConfig::validate() const {
    if (norm_pix_targets && kind != LossKind::Mae) {
        throw ConfigError("norm_pix_targets applies to the pixel-patch loss only");
    }
}

namespace {

void check_same_shape(const Tensor& pred, const Tensor& x) {
    if (pred.shape() != x.shape()) {
        throw ShapeError("loss: prediction " + shape_str(pred.shape()) +
                         " does not match input " + shape_str(x.shape()));
    }
    if (pred.rank() != 4) {
        throw ShapeError("loss: expected [B,C,H,W] images, got " + shape_str(pred.shape()));
    }
}

} // namespace

Tensor mae_loss(const Tensor& pred_image, const Tensor& x,
                const std::vector<PatchMask>& masks, bool norm_pix_targets) {
    check_same_shape(pred_image, x);
    const size_t b = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
    if (masks.size() != b) {
        throw ShapeError("mae_loss: " + std::to_string(masks.size()) + " masks for " +
                         std::to_string(b) + " images");
    }
    const size_t gh = masks[0].grid_h, gw = masks[0].grid_w;
    if (gh == 0 || gw == 0 || h % gh != 0 || w % gw != 0 || h / gh != w / gw) {
        throw ShapeError("mae_loss: mask grid does not tile the image");
    }
    const size_t pp = h / gh;
    size_t masked_px = 0;
    for (const PatchMask& m : masks) {
        if (m.grid_h != gh || m.grid_w != gw) {
            throw ShapeError("mae_loss: masks disagree on grid extents");
        }
        masked_px += m.masked_count() * pp * pp * c;
    }
    if (masked_px == 0) throw Error("no reconstruction target: every patch is visible");

    // Indicator of penalized pixels, and the (constant) target image.
    std::vector<double> ind(b * c * h * w, 0.0);
    std::vector<double> target = x.data();
    for (size_t bi = 0; bi < b; ++bi) {
        for (size_t gy = 0; gy < gh; ++gy) {
            for (size_t gx = 0; gx < gw; ++gx) {
                if (!masks[bi].masked[gy * gw + gx]) continue;
                for (size_t ci = 0; ci < c; ++ci) {
                    for (size_t py = 0; py < pp; ++py) {
                        const size_t row = ((bi * c + ci) * h + gy * pp + py) * w + gx * pp;
                        for (size_t px = 0; px < pp; ++px) ind[row + px] = 1.0;
                    }
                }
            }
        }
    }
    if (norm_pix_targets) {
        const double n = static_cast<double>(pp * pp * c);
        std::vector<double> vals(pp * pp * c);
        for (size_t bi = 0; bi < b; ++bi) {
            for (size_t gy = 0; gy < gh; ++gy) {
                for (size_t gx = 0; gx < gw; ++gx) {
                    double mean = 0.0;
                    size_t o = 0;
                    for (size_t ci = 0; ci < c; ++ci) {
                        for (size_t py = 0; py < pp; ++py) {
                            const size_t row = ((bi * c + ci) * h + gy * pp + py) * w + gx * pp;
                            for (size_t px = 0; px < pp; ++px) {
                                vals[o++] = target[row + px];
                            }
                        }
                    }
                    for (double v : vals) mean += v;
                    mean /= n;
                    double var = 0.0;
                    for (double v : vals) var += (v - mean) * (v - mean);
                    var /= n;
                    const double inv = 1.0 / std::sqrt(var + 1e-6);
                    for (size_t ci = 0; ci < c; ++ci) {
                        for (size_t py = 0; py < pp; ++py) {
                            const size_t row = ((bi * c + ci) * h + gy * pp + py) * w + gx * pp;
                            for (size_t px = 0; px < pp; ++px) {
                                target[row + px] = (target[row + px] - mean) * inv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor target_t = Tensor::from_data(x.shape(), std::move(target));
    Tensor ind_t = Tensor::from_data(x.shape(), std::move(ind));
    Tensor diff = sub(pred_image, target_t);
    Tensor masked_sq = mul(mul(diff, diff), ind_t);
    return mul_scalar(sum_all(masked_sq), 1.0 / static_cast<double>(masked_px));
}

Tensor pmae_loss_pc(const Tensor& pred_image, const Tensor& x, const ComponentMask& mask,
                    const PcaBasis& basis) {
    check_same_shape(pred_image, x);
    const size_t b = x.extent(0);
    const size_t d = x.numel() / b;
    if (d != basis.dim) {
        throw ShapeError("pmae_loss_pc: image dimension " + std::to_string(d) +
                         " does not match basis dimension " + std::to_string(basis.dim));
    }
    const size_t masked = mask.masked_count();
    if (masked == 0) throw Error("no reconstruction target: every component is visible");

    Tensor cp = to_pc(reshape(pred_image, {b, d}), basis);
    Tensor cx = to_pc(reshape(x, {b, d}), basis);
    std::vector<double> ind(d);
    for (size_t i = 0; i < d; ++i) ind[i] = mask.masked[i] ? 1.0 : 0.0;
    Tensor ind_t = Tensor::from_data({d}, std::move(ind));
    Tensor diff = sub(cp, cx);
    Tensor masked_sq = mul(mul(diff, diff), ind_t);
    return mul_scalar(sum_all(masked_sq), 1.0 / static_cast<double>(b * masked));
}

Tensor pmae_loss_pixel(const Tensor& pred_image, const Tensor& x, const ComponentMask& mask,
                       const PcaBasis& basis) {
    check_same_shape(pred_image, x);
    const size_t b = x.extent(0);
    const size_t d = x.numel() / b;
    if (d != basis.dim) {
        throw ShapeError("pmae_loss_pixel: image dimension " + std::to_string(d) +
                         " does not match basis dimension " + std::to_string(basis.dim));
    }
    std::vector<double> ind(d);
    for (size_t i = 0; i < d; ++i) ind[i] = mask.masked[i] ? 1.0 : 0.0;
    Tensor ind_t = Tensor::from_data({d}, std::move(ind));
    Tensor target;
    {
        NoGradGuard ng;
        target = from_pc(mul(to_pc(reshape(x, {b, d}), basis), ind_t), basis);
    }
    Tensor diff = sub(reshape(pred_image, {b, d}), target);
    return mean_all(mul(diff, diff));
}

} // namespace pmae
