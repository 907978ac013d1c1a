#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "pmae/checkpoint.hpp"
#include "pmae/masking.hpp"
#include "pmae/pca.hpp"
#include "pmae/tensor.hpp"

namespace pmae {

struct VitConfig {
    size_t image_h = 32;
    size_t image_w = 32;
    size_t channels = 3;
    size_t patch_px = 8;
    size_t enc_hidden = 192;
    size_t enc_heads = 12;
    size_t enc_mlp = 768;
    size_t enc_depth = 12;
    size_t dec_hidden = 128;
    size_t dec_heads = 4;
    size_t dec_mlp = 512;
    size_t dec_depth = 4;

    void validate() const;
    size_t grid_h() const { return image_h / patch_px; }
    size_t grid_w() const { return image_w / patch_px; }
    size_t num_patches() const { return grid_h() * grid_w(); }
    size_t patch_dim() const { return patch_px * patch_px * channels; }
    size_t param_count() const;
};

// Encoder/decoder transformer pair with two forward modes: the pixel regime
// encodes only visible patch tokens and the decoder fills masked positions
// with a learned mask token; the component regime encodes the full
// back-projected image and decodes every position directly.
class VitModel {
public:
    VitModel(const VitConfig& cfg, uint64_t seed);

    const VitConfig& config() const { return cfg_; }

    NamedTensors& params() { return params_; }
    const NamedTensors& params() const { return params_; }
    Tensor& param(const std::string& name);
    const Tensor& param(const std::string& name) const;
    void load_params(const NamedTensors& named);
    void zero_grads();

    // [B,C,H,W] -> [B,P,patch_dim], row-major patch order, pixels ordered
    // (py, px, c) within a token. unpatchify inverts it exactly.
    Tensor patchify(const Tensor& images) const;
    Tensor unpatchify(const Tensor& tokens) const;

    // tokens [B,T,h] with positions already attached: prepends CLS, runs the
    // pre-norm encoder blocks and the final norm; returns [B,1+T,h].
    Tensor encode_token_seq(const Tensor& tokens) const;

    // Per-sample masks, one per image, all with the same masked count.
    // Returns [B,1+V,h]; the visible tokens keep ascending patch order.
    Tensor encode_visible(const Tensor& images, const std::vector<PatchMask>& masks) const;
    Tensor encode_full(const Tensor& images) const; // [B,1+P,h]

    // latents [B,1+V,h] with the masks used at encode time, or latents
    // [B,1+P,h] with masks empty. Returns per-patch predictions [B,P,patch_dim].
    Tensor decode(const Tensor& latents, const std::vector<PatchMask>& masks) const;

    Tensor forward_mae(const Tensor& images, const std::vector<PatchMask>& masks) const;
    Tensor forward_pmae(const Tensor& images, const ComponentMask& mask,
                        const PcaBasis& basis) const;

    // CLS row of encoder latents: [B,1+T,h] -> [B,h].
    Tensor cls_of(const Tensor& latents) const;

    // Mean over the non-CLS rows: [B,1+T,h] -> [B,h]. The reconstruction
    // objectives never touch the CLS slot, so probing and fine-tuning read
    // the patch tokens instead.
    Tensor pooled_of(const Tensor& latents) const;

    const Tensor& enc_pos_patches() const { return enc_pos_patches_; }
    const Tensor& dec_pos_full() const { return dec_pos_full_; }

private:
    Tensor run_blocks(const Tensor& x, const std::string& prefix, size_t depth, size_t heads,
                      const std::string& final_ln) const;
    Tensor attention(const Tensor& x, const std::string& prefix, size_t heads) const;

    VitConfig cfg_;
    NamedTensors params_;
    std::unordered_map<std::string, size_t> index_;
    Tensor enc_pos_patches_; // [P, enc_hidden], fixed 2-D sincos
    Tensor dec_pos_full_;    // [1+P, dec_hidden], row 0 zeros for CLS
};

// Fixed 2-D sincos table, one row per grid cell (row-major), dim divisible by 4.
Tensor sincos_pos_embed_2d(size_t grid_h, size_t grid_w, size_t dim);

} // namespace pmae
