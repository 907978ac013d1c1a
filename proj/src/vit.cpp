#include "pmae/vit.hpp"

#include <cmath>
#include <memory>

#include "pmae/rng.hpp"

namespace pmae {

namespace {

constexpr double kLnEps = 1e-6;

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// Parameter names and shapes in registration order; the single source for
// construction, param_count, and checkpoint layout.
std::vector<std::pair<std::string, Shape>> param_plan(const VitConfig& c) {
    std::vector<std::pair<std::string, Shape>> plan;
    auto block = [&](const std::string& prefix, size_t h, size_t m) {
        plan.push_back({prefix + ".ln1.g", {h}});
        plan.push_back({prefix + ".ln1.b", {h}});
        for (const char* p : {"q", "k", "v"}) {
            plan.push_back({prefix + ".attn." + std::string(p) + ".w", {h, h}});
            plan.push_back({prefix + ".attn." + std::string(p) + ".b", {h}});
        }
        plan.push_back({prefix + ".attn.proj.w", {h, h}});
        plan.push_back({prefix + ".attn.proj.b", {h}});
        plan.push_back({prefix + ".ln2.g", {h}});
        plan.push_back({prefix + ".ln2.b", {h}});
        plan.push_back({prefix + ".mlp.fc1.w", {h, m}});
        plan.push_back({prefix + ".mlp.fc1.b", {m}});
        plan.push_back({prefix + ".mlp.fc2.w", {m, h}});
        plan.push_back({prefix + ".mlp.fc2.b", {h}});
    };
    plan.push_back({"enc.embed.w", {c.patch_dim(), c.enc_hidden}});
    plan.push_back({"enc.embed.b", {c.enc_hidden}});
    plan.push_back({"enc.cls", {c.enc_hidden}});
    for (size_t i = 0; i < c.enc_depth; ++i) {
        block("enc.block" + std::to_string(i), c.enc_hidden, c.enc_mlp);
    }
    plan.push_back({"enc.ln.g", {c.enc_hidden}});
    plan.push_back({"enc.ln.b", {c.enc_hidden}});
    plan.push_back({"dec.proj.w", {c.enc_hidden, c.dec_hidden}});
    plan.push_back({"dec.proj.b", {c.dec_hidden}});
    plan.push_back({"dec.mask_token", {c.dec_hidden}});
    for (size_t i = 0; i < c.dec_depth; ++i) {
        block("dec.block" + std::to_string(i), c.dec_hidden, c.dec_mlp);
    }
    plan.push_back({"dec.ln.g", {c.dec_hidden}});
    plan.push_back({"dec.ln.b", {c.dec_hidden}});
    plan.push_back({"dec.head.w", {c.dec_hidden, c.patch_dim()}});
    plan.push_back({"dec.head.b", {c.patch_dim()}});
    return plan;
}

bool is_weightlike(const std::string& name) {
    return ends_with(name, ".w") || name == "enc.cls" || name == "dec.mask_token";
}

bool is_ln_gain(const std::string& name) { return ends_with(name, ".g"); }

} // namespace

void VitConfig::validate() const {
    if (channels < 1) throw ConfigError("channels must be >= 1");
    if (patch_px < 1) throw ConfigError("patch_px must be >= 1");
    if (image_h % patch_px != 0 || image_w % patch_px != 0) {
        throw ConfigError("image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                          " is not divisible by patch_px " + std::to_string(patch_px));
    }
    if (enc_hidden == 0 || dec_hidden == 0 || enc_depth == 0 || dec_depth == 0) {
        throw ConfigError("hidden sizes and depths must be >= 1");
    }
    if (enc_heads == 0 || enc_hidden % enc_heads != 0) {
        throw ConfigError("enc_hidden " + std::to_string(enc_hidden) +
                          " must divide evenly into enc_heads " + std::to_string(enc_heads));
    }
    if (dec_heads == 0 || dec_hidden % dec_heads != 0) {
        throw ConfigError("dec_hidden " + std::to_string(dec_hidden) +
                          " must divide evenly into dec_heads " + std::to_string(dec_heads));
    }
    if (enc_hidden % 4 != 0 || dec_hidden % 4 != 0) {
        throw ConfigError("hidden sizes must be divisible by 4 for 2-D sincos positions");
    }
}

size_t VitConfig::param_count() const {
    size_t n = 0;
    for (const auto& [name, shape] : param_plan(*this)) n += shape_numel(shape);
    return n;
}

Tensor sincos_pos_embed_2d(size_t grid_h, size_t grid_w, size_t dim) {
    if (dim % 4 != 0) throw ConfigError("sincos position dim must be divisible by 4");
    const size_t quarter = dim / 4;
    std::vector<double> omega(quarter);
    for (size_t i = 0; i < quarter; ++i) {
        omega[i] = 1.0 / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(quarter));
    }
    std::vector<double> out(grid_h * grid_w * dim);
    for (size_t gy = 0; gy < grid_h; ++gy) {
        for (size_t gx = 0; gx < grid_w; ++gx) {
            double* row = out.data() + (gy * grid_w + gx) * dim;
            for (size_t i = 0; i < quarter; ++i) {
                const double ay = static_cast<double>(gy) * omega[i];
                const double ax = static_cast<double>(gx) * omega[i];
                // First half encodes the row coordinate, second half the column.
                row[i] = std::sin(ay);
                row[quarter + i] = std::cos(ay);
                row[2 * quarter + i] = std::sin(ax);
                row[3 * quarter + i] = std::cos(ax);
            }
        }
    }
    return Tensor::from_data({grid_h * grid_w, dim}, std::move(out));
}

VitModel::VitModel(const VitConfig& cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    for (const auto& [name, shape] : param_plan(cfg_)) {
        Tensor t(shape, 0.0);
        if (is_weightlike(name)) {
            auto& d = t.data_mut();
            for (double& v : d) v = rng.trunc_normal(0.02);
        } else if (is_ln_gain(name)) {
            auto& d = t.data_mut();
            for (double& v : d) v = 1.0;
        }
        t.set_requires_grad(true);
        index_[name] = params_.size();
        params_.emplace_back(name, std::move(t));
    }
    enc_pos_patches_ = sincos_pos_embed_2d(cfg_.grid_h(), cfg_.grid_w(), cfg_.enc_hidden);
    Tensor dec_patches = sincos_pos_embed_2d(cfg_.grid_h(), cfg_.grid_w(), cfg_.dec_hidden);
    std::vector<double> full((cfg_.num_patches() + 1) * cfg_.dec_hidden, 0.0);
    std::copy(dec_patches.data().begin(), dec_patches.data().end(),
              full.begin() + cfg_.dec_hidden);
    dec_pos_full_ = Tensor::from_data({cfg_.num_patches() + 1, cfg_.dec_hidden}, std::move(full));
}

Tensor& VitModel::param(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("unknown parameter: " + name);
    return params_[it->second].second;
}

const Tensor& VitModel::param(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("unknown parameter: " + name);
    return params_[it->second].second;
}

void VitModel::load_params(const NamedTensors& named) {
    for (const auto& [name, src] : named) {
        auto it = index_.find(name);
        if (it == index_.end()) throw Error("checkpoint has unknown parameter: " + name);
        Tensor& dst = params_[it->second].second;
        if (src.shape() != dst.shape()) {
            throw ShapeError("parameter " + name + " has shape " + shape_str(src.shape()) +
                             ", model expects " + shape_str(dst.shape()));
        }
        dst.data_mut() = src.data();
    }
}

void VitModel::zero_grads() {
    for (auto& [name, t] : params_) t.zero_grad();
}

Tensor VitModel::patchify(const Tensor& images) const {
    const size_t c = cfg_.channels, h = cfg_.image_h, w = cfg_.image_w, pp = cfg_.patch_px;
    if (images.rank() != 4 || images.extent(1) != c || images.extent(2) != h ||
        images.extent(3) != w) {
        throw ShapeError("patchify: expected [B," + std::to_string(c) + "," +
                         std::to_string(h) + "," + std::to_string(w) + "], got " +
                         shape_str(images.shape()));
    }
    const size_t b = images.extent(0);
    const size_t gw = cfg_.grid_w(), p = cfg_.num_patches(), pd = cfg_.patch_dim();
    auto idx = std::make_shared<std::vector<int64_t>>(b * p * pd);
    size_t o = 0;
    for (size_t bi = 0; bi < b; ++bi) {
        for (size_t pi = 0; pi < p; ++pi) {
            const size_t gy = pi / gw, gx = pi % gw;
            for (size_t py = 0; py < pp; ++py) {
                for (size_t px = 0; px < pp; ++px) {
                    for (size_t ci = 0; ci < c; ++ci) {
                        (*idx)[o++] = static_cast<int64_t>(
                            ((bi * c + ci) * h + gy * pp + py) * w + gx * pp + px);
                    }
                }
            }
        }
    }
    return gather_flat(images, idx, {b, p, pd});
}

Tensor VitModel::unpatchify(const Tensor& tokens) const {
    const size_t c = cfg_.channels, h = cfg_.image_h, w = cfg_.image_w, pp = cfg_.patch_px;
    const size_t gw = cfg_.grid_w(), p = cfg_.num_patches(), pd = cfg_.patch_dim();
    if (tokens.rank() != 3 || tokens.extent(1) != p || tokens.extent(2) != pd) {
        throw ShapeError("unpatchify: expected [B," + std::to_string(p) + "," +
                         std::to_string(pd) + "], got " + shape_str(tokens.shape()));
    }
    const size_t b = tokens.extent(0);
    auto idx = std::make_shared<std::vector<int64_t>>(b * c * h * w);
    size_t o = 0;
    for (size_t bi = 0; bi < b; ++bi) {
        for (size_t ci = 0; ci < c; ++ci) {
            for (size_t y = 0; y < h; ++y) {
                for (size_t x = 0; x < w; ++x) {
                    const size_t pi = (y / pp) * gw + x / pp;
                    const size_t t = ((y % pp) * pp + x % pp) * c + ci;
                    (*idx)[o++] = static_cast<int64_t>((bi * p + pi) * pd + t);
                }
            }
        }
    }
    return gather_flat(tokens, idx, {b, c, h, w});
}

Tensor VitModel::attention(const Tensor& x, const std::string& prefix, size_t heads) const {
    const size_t b = x.extent(0), t = x.extent(1), h = x.extent(2);
    const size_t hd = h / heads;
    auto split = [&](const Tensor& y) {
        return permute(reshape(y, {b, t, heads, hd}), {0, 2, 1, 3});
    };
    Tensor q = split(linear(x, param(prefix + ".q.w"), param(prefix + ".q.b")));
    Tensor k = split(linear(x, param(prefix + ".k.w"), param(prefix + ".k.b")));
    Tensor v = split(linear(x, param(prefix + ".v.w"), param(prefix + ".v.b")));
    Tensor scores = mul_scalar(matmul(q, transpose_last2(k)), 1.0 / std::sqrt(double(hd)));
    Tensor ctx = matmul(softmax_lastdim(scores), v); // [B,heads,T,hd]
    Tensor merged = reshape(permute(ctx, {0, 2, 1, 3}), {b, t, h});
    return linear(merged, param(prefix + ".proj.w"), param(prefix + ".proj.b"));
}

Tensor VitModel::run_blocks(const Tensor& x, const std::string& prefix, size_t depth,
                            size_t heads, const std::string& final_ln) const {
    Tensor y = x;
    for (size_t i = 0; i < depth; ++i) {
        const std::string bp = prefix + ".block" + std::to_string(i);
        Tensor normed = layer_norm_lastdim(y, param(bp + ".ln1.g"), param(bp + ".ln1.b"), kLnEps);
        y = add(y, attention(normed, bp + ".attn", heads));
        Tensor normed2 = layer_norm_lastdim(y, param(bp + ".ln2.g"), param(bp + ".ln2.b"), kLnEps);
        Tensor hidden = gelu(linear(normed2, param(bp + ".mlp.fc1.w"), param(bp + ".mlp.fc1.b")));
        y = add(y, linear(hidden, param(bp + ".mlp.fc2.w"), param(bp + ".mlp.fc2.b")));
    }
    return layer_norm_lastdim(y, param(final_ln + ".g"), param(final_ln + ".b"), kLnEps);
}

Tensor VitModel::encode_token_seq(const Tensor& tokens) const {
    const size_t b = tokens.extent(0);
    Tensor cls = reshape(expand_leading(param("enc.cls"), {b}), {b, 1, cfg_.enc_hidden});
    Tensor seq = concat({cls, tokens}, 1);
    return run_blocks(seq, "enc", cfg_.enc_depth, cfg_.enc_heads, "enc.ln");
}

Tensor VitModel::encode_visible(const Tensor& images,
                                const std::vector<PatchMask>& masks) const {
    const size_t b = images.extent(0);
    const size_t p = cfg_.num_patches();
    const size_t h = cfg_.enc_hidden;
    if (masks.size() != b) {
        throw ShapeError("encode_visible: " + std::to_string(masks.size()) + " masks for " +
                         std::to_string(b) + " images");
    }
    for (const PatchMask& m : masks) {
        if (m.grid_h != cfg_.grid_h() || m.grid_w != cfg_.grid_w()) {
            throw ShapeError("encode_visible: mask grid does not match the patch grid");
        }
        if (m.masked_count() != masks[0].masked_count()) {
            throw ShapeError("encode_visible: masks in a batch must hide the same count");
        }
    }
    const size_t vis = p - masks[0].masked_count();
    if (vis == 0) throw Error("empty encoder input: every patch is masked");

    Tensor tokens = linear(patchify(images), param("enc.embed.w"), param("enc.embed.b"));
    tokens = add(tokens, enc_pos_patches_);
    auto idx = std::make_shared<std::vector<int64_t>>(b * vis * h);
    size_t o = 0;
    for (size_t bi = 0; bi < b; ++bi) {
        const std::vector<size_t> visible = masks[bi].visible_indices();
        for (size_t vi = 0; vi < vis; ++vi) {
            const size_t base = (bi * p + visible[vi]) * h;
            for (size_t j = 0; j < h; ++j) (*idx)[o++] = static_cast<int64_t>(base + j);
        }
    }
    return encode_token_seq(gather_flat(tokens, idx, {b, vis, h}));
}

Tensor VitModel::encode_full(const Tensor& images) const {
    Tensor tokens = linear(patchify(images), param("enc.embed.w"), param("enc.embed.b"));
    tokens = add(tokens, enc_pos_patches_);
    return encode_token_seq(tokens);
}

Tensor VitModel::decode(const Tensor& latents, const std::vector<PatchMask>& masks) const {
    const size_t b = latents.extent(0);
    const size_t p = cfg_.num_patches();
    const size_t dh = cfg_.dec_hidden;
    Tensor proj = linear(latents, param("dec.proj.w"), param("dec.proj.b"));
    Tensor seq;
    if (masks.empty()) {
        if (latents.extent(1) != p + 1) {
            throw ShapeError("decode: expected [B," + std::to_string(p + 1) +
                             ",h] latents without masks, got " + shape_str(latents.shape()));
        }
        seq = proj;
    } else {
        if (masks.size() != b) {
            throw ShapeError("decode: " + std::to_string(masks.size()) + " masks for " +
                             std::to_string(b) + " latents");
        }
        const size_t vis = p - masks[0].masked_count();
        if (latents.extent(1) != vis + 1) {
            throw ShapeError("decode: latents " + shape_str(latents.shape()) +
                             " do not match " + std::to_string(vis) + " visible patches");
        }
        // Rebuild the full token order: CLS stays at slot 0, visible latents
        // return to their patch positions, masked slots take the mask token.
        auto from_latent = std::make_shared<std::vector<int64_t>>(b * (p + 1) * dh);
        auto from_mask = std::make_shared<std::vector<int64_t>>(b * (p + 1) * dh, -1);
        size_t o = 0;
        for (size_t bi = 0; bi < b; ++bi) {
            const size_t cls_base = bi * (vis + 1) * dh;
            for (size_t j = 0; j < dh; ++j) (*from_latent)[o++] = static_cast<int64_t>(cls_base + j);
            std::vector<size_t> slot(p, 0);
            const std::vector<size_t> visible = masks[bi].visible_indices();
            for (size_t vi = 0; vi < vis; ++vi) slot[visible[vi]] = vi + 1;
            for (size_t pi = 0; pi < p; ++pi) {
                if (masks[bi].masked[pi]) {
                    for (size_t j = 0; j < dh; ++j) {
                        (*from_mask)[o] = static_cast<int64_t>(j);
                        (*from_latent)[o++] = -1;
                    }
                } else {
                    const size_t base = (bi * (vis + 1) + slot[pi]) * dh;
                    for (size_t j = 0; j < dh; ++j) (*from_latent)[o++] = static_cast<int64_t>(base + j);
                }
            }
        }
        seq = add(gather_flat(proj, from_latent, {b, p + 1, dh}),
                  gather_flat(param("dec.mask_token"), from_mask, {b, p + 1, dh}));
    }
    seq = add(seq, dec_pos_full_);
    Tensor decoded = run_blocks(seq, "dec", cfg_.dec_depth, cfg_.dec_heads, "dec.ln");
    Tensor pred = linear(decoded, param("dec.head.w"), param("dec.head.b"));
    return slice(pred, 1, 1, p);
}

Tensor VitModel::forward_mae(const Tensor& images, const std::vector<PatchMask>& masks) const {
    return unpatchify(decode(encode_visible(images, masks), masks));
}

Tensor VitModel::forward_pmae(const Tensor& images, const ComponentMask& mask,
                              const PcaBasis& basis) const {
    const size_t b = images.extent(0);
    const size_t d = cfg_.channels * cfg_.image_h * cfg_.image_w;
    Tensor flat = reshape(images, {b, d});
    Tensor back = reshape(masked_reconstruction(flat, mask, basis),
                          {b, cfg_.channels, cfg_.image_h, cfg_.image_w});
    return unpatchify(decode(encode_full(back), {}));
}

Tensor VitModel::cls_of(const Tensor& latents) const {
    if (latents.rank() != 3) {
        throw ShapeError("cls_of: expected [B,T,h] latents, got " + shape_str(latents.shape()));
    }
    return reshape(slice(latents, 1, 0, 1), {latents.extent(0), latents.extent(2)});
}

Tensor VitModel::pooled_of(const Tensor& latents) const {
    if (latents.rank() != 3 || latents.extent(1) < 2) {
        throw ShapeError("pooled_of: expected [B,1+T,h] latents, got " +
                         shape_str(latents.shape()));
    }
    return mean_axis(slice(latents, 1, 1, latents.extent(1) - 1), 1);
}

} // namespace pmae
