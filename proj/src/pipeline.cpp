#include "pmae/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <numeric>

#include "pmae/checkpoint.hpp"
#include "pmae/errors.hpp"

namespace pmae {

double LrSchedule::at(size_t step) const {
    if (total_steps == 0 || step >= total_steps) return 0.0;
    if (step < warmup_steps) {
        return peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
    }
    const double span = static_cast<double>(total_steps - warmup_steps);
    const double t = static_cast<double>(step - warmup_steps) / span;
    return 0.5 * peak * (1.0 + std::cos(M_PI * t));
}

Optimizer::Optimizer(const OptimizerConfig& cfg, const NamedTensors& params) : cfg_(cfg) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
        m_[i].assign(params[i].second.numel(), 0.0);
        if (cfg_.algo == OptimizerConfig::Algo::AdamW) {
            v_[i].assign(params[i].second.numel(), 0.0);
        }
    }
}

void Optimizer::step(NamedTensors& params, double lr) {
    if (params.size() != m_.size()) {
        throw ShapeError("optimizer was built for " + std::to_string(m_.size()) +
                         " parameters, stepped with " + std::to_string(params.size()));
    }
    for (const auto& [name, p] : params) {
        if (!p.has_grad()) continue;
        for (double g : p.grad()) {
            if (!std::isfinite(g)) {
                throw NonFiniteError("non-finite gradient in " + name);
            }
        }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i].second;
        if (!p.has_grad()) continue;
        auto& pd = p.data_mut();
        const auto& g = p.grad();
        if (cfg_.weight_decay != 0.0 && p.rank() >= 2) {
            const double shrink = lr * cfg_.weight_decay;
            for (double& v : pd) v -= shrink * v;
        }
        if (cfg_.algo == OptimizerConfig::Algo::AdamW) {
            auto& m = m_[i];
            auto& v = v_[i];
            for (size_t j = 0; j < pd.size(); ++j) {
                m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
                v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
                pd[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
            }
        } else {
            auto& buf = m_[i];
            for (size_t j = 0; j < pd.size(); ++j) {
                buf[j] = cfg_.momentum * buf[j] + g[j];
                pd[j] -= lr * buf[j];
            }
        }
    }
}

namespace {

double cubic_weight(double t) {
    constexpr double a = -0.5;
    t = std::abs(t);
    if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
    if (t < 2.0) return (((t - 5.0) * t + 8.0) * t - 4.0) * a;
    return 0.0;
}

// One axis of Catmull-Rom resampling with edge clamping; src index mapping
// is (dst + 0.5) * (n / m) - 0.5.
void resize_axis(const double* src, size_t n, size_t stride_in, double* dst, size_t m,
                 size_t stride_out) {
    const double scale = static_cast<double>(n) / static_cast<double>(m);
    for (size_t x = 0; x < m; ++x) {
        const double s = (static_cast<double>(x) + 0.5) * scale - 0.5;
        const double base = std::floor(s);
        const double fr = s - base;
        double acc = 0.0;
        for (int k = -1; k <= 2; ++k) {
            const double w = cubic_weight(static_cast<double>(k) - fr);
            long idx = static_cast<long>(base) + k;
            idx = std::max(0L, std::min(static_cast<long>(n) - 1, idx));
            acc += w * src[static_cast<size_t>(idx) * stride_in];
        }
        dst[x * stride_out] = acc;
    }
}

struct CropBox {
    size_t top = 0, left = 0, h = 0, w = 0;
};

CropBox sample_crop(Rng& rng, size_t height, size_t width, const AugmentConfig& cfg) {
    const double area = static_cast<double>(height * width);
    for (int attempt = 0; attempt < 10; ++attempt) {
        const double target_area = area * rng.uniform(cfg.scale_lo, cfg.scale_hi);
        const double aspect =
            std::exp(rng.uniform(std::log(cfg.aspect_lo), std::log(cfg.aspect_hi)));
        const long w = std::lround(std::sqrt(target_area * aspect));
        const long h = std::lround(std::sqrt(target_area / aspect));
        if (w > 0 && h > 0 && static_cast<size_t>(w) <= width &&
            static_cast<size_t>(h) <= height) {
            CropBox box;
            box.h = static_cast<size_t>(h);
            box.w = static_cast<size_t>(w);
            box.top = rng.uniform_int(height - box.h + 1);
            box.left = rng.uniform_int(width - box.w + 1);
            return box;
        }
    }
    // aspect-clamped center crop
    CropBox box;
    const double in_ratio = static_cast<double>(width) / static_cast<double>(height);
    if (in_ratio < cfg.aspect_lo) {
        box.w = width;
        box.h = static_cast<size_t>(std::lround(static_cast<double>(width) / cfg.aspect_lo));
    } else if (in_ratio > cfg.aspect_hi) {
        box.h = height;
        box.w = static_cast<size_t>(std::lround(static_cast<double>(height) * cfg.aspect_hi));
    } else {
        box.h = height;
        box.w = width;
    }
    box.top = (height - box.h) / 2;
    box.left = (width - box.w) / 2;
    return box;
}

} // namespace

Tensor normalize_image(const Dataset& ds, size_t index) {
    Tensor img = ds.image_chw(index);
    auto& d = img.data_mut();
    for (size_t ch = 0; ch < ds.c; ++ch) {
        const double mean = ds.channel_mean[ch];
        const double inv = 1.0 / ds.channel_std[ch];
        double* row = d.data() + ch * ds.h * ds.w;
        for (size_t p = 0; p < ds.h * ds.w; ++p) row[p] = (row[p] - mean) * inv;
    }
    return img;
}

Tensor augment_image(Rng& rng, const Dataset& ds, size_t index, const AugmentConfig& cfg) {
    if (!cfg.enabled) return normalize_image(ds, index);
    if (ds.channel_mean.size() != ds.c || ds.channel_std.size() != ds.c) {
        throw ConfigError("dataset statistics missing; compute them on the train split first");
    }
    const size_t H = ds.h, W = ds.w, C = ds.c;
    const CropBox box = sample_crop(rng, H, W, cfg);
    const bool flip = rng.uniform() < cfg.hflip_prob;

    const float* src = ds.pixels.data() + index * ds.image_dim();
    std::vector<double> crop(box.h * box.w);
    std::vector<double> wide(box.h * W);
    std::vector<double> full(H * W);
    std::vector<double> out(C * H * W);
    for (size_t ch = 0; ch < C; ++ch) {
        for (size_t y = 0; y < box.h; ++y) {
            for (size_t x = 0; x < box.w; ++x) {
                crop[y * box.w + x] =
                    src[((box.top + y) * W + (box.left + x)) * C + ch];
            }
        }
        for (size_t y = 0; y < box.h; ++y) {
            resize_axis(crop.data() + y * box.w, box.w, 1, wide.data() + y * W, W, 1);
        }
        for (size_t x = 0; x < W; ++x) {
            resize_axis(wide.data() + x, box.h, W, full.data() + x, H, W);
        }
        const double mean = ds.channel_mean[ch];
        const double inv = 1.0 / ds.channel_std[ch];
        double* dst = out.data() + ch * H * W;
        for (size_t y = 0; y < H; ++y) {
            for (size_t x = 0; x < W; ++x) {
                const size_t sx = flip ? W - 1 - x : x;
                dst[y * W + x] = (full[y * W + sx] - mean) * inv;
            }
        }
    }
    return Tensor::from_data({C, H, W}, std::move(out));
}

PcaBasis fit_basis_of(const Dataset& train) {
    train.validate();
    const size_t d = train.image_dim();
    std::vector<double> rows(train.n * d);
    for (size_t i = 0; i < train.n; ++i) {
        Tensor img = normalize_image(train, i);
        std::memcpy(rows.data() + i * d, img.data().data(), d * sizeof(double));
    }
    return fit_pca(Tensor::from_data({train.n, d}, std::move(rows)));
}

MetricsWriter::MetricsWriter(const std::string& path, bool append) {
    bool write_header = true;
    if (append) {
        std::ifstream probe(path, std::ios::binary | std::ios::ate);
        if (probe.good() && probe.tellg() > 0) write_header = false;
    }
    out_.open(path, append ? std::ios::app : std::ios::trunc);
    if (!out_.good()) throw IoError("cannot open metrics file " + path);
    if (write_header) {
        out_ << "epoch,phase,loss,accuracy,lr,mask_ratio_mean,seconds,seed\n";
    }
}

void MetricsWriter::row(const MetricsRow& r) {
    char num[64];
    out_ << r.epoch << ',' << r.phase << ',';
    std::snprintf(num, sizeof(num), "%.10g", r.loss);
    out_ << num << ',';
    if (r.accuracy >= 0.0) {
        std::snprintf(num, sizeof(num), "%.10g", r.accuracy);
        out_ << num;
    }
    out_ << ',';
    std::snprintf(num, sizeof(num), "%.10g", r.lr);
    out_ << num << ',';
    std::snprintf(num, sizeof(num), "%.10g", r.mask_ratio_mean);
    out_ << num << ',';
    std::snprintf(num, sizeof(num), "%.3f", r.seconds);
    out_ << num << ',' << r.seed << '\n';
    out_.flush();
    if (!out_.good()) throw IoError("failed writing metrics row");
}

namespace {

constexpr uint64_t kShuffleStream = 1000000007ULL;
constexpr uint64_t kFeatureStream = 7777777ULL;
constexpr uint64_t kProbeInitStream = 31337ULL;
constexpr uint64_t kHeadInitStream = 424242ULL;

Tensor gather_batch(const Dataset& ds, const std::vector<size_t>& order, size_t start,
                    size_t count, bool augment, const AugmentConfig& aug, Rng& rng) {
    const size_t dim = ds.image_dim();
    std::vector<double> data(count * dim);
    for (size_t i = 0; i < count; ++i) {
        const size_t idx = order[start + i];
        Tensor img = augment ? augment_image(rng, ds, idx, aug) : normalize_image(ds, idx);
        std::memcpy(data.data() + i * dim, img.data().data(), dim * sizeof(double));
    }
    return Tensor::from_data({count, ds.c, ds.h, ds.w}, std::move(data));
}

void quantize_params(NamedTensors& params) {
    for (auto& [name, p] : params) p.quantize_f32();
}

} // namespace

PretrainResult pretrain(VitModel& model, const Dataset& train, const PcaBasis* basis,
                        const PretrainConfig& cfg, MetricsWriter* metrics) {
    train.validate();
    cfg.loss.validate();
    if (cfg.epochs == 0 || cfg.batch_size == 0) {
        throw ConfigError("pretraining needs at least one epoch and a positive batch size");
    }
    const bool component = cfg.method == PretrainConfig::Method::Pmae;
    if (component && basis == nullptr) {
        throw ConfigError("component masking requires a fitted basis");
    }
    if (component && basis->dim != train.image_dim()) {
        throw ConfigError("basis dimension " + std::to_string(basis->dim) +
                          " does not match images of dimension " +
                          std::to_string(train.image_dim()));
    }
    if (component == (cfg.loss.kind == LossKind::Mae)) {
        throw ConfigError("loss kind does not match the masking method");
    }
    if (model.config().image_h != train.h || model.config().image_w != train.w ||
        model.config().channels != train.c) {
        throw ConfigError("model geometry does not match the dataset");
    }

    const size_t n = train.n;
    const size_t bs = std::min(cfg.batch_size, n);
    const size_t batches = n / bs;
    LrSchedule sched;
    sched.peak = cfg.base_lr * static_cast<double>(bs) / 256.0;
    sched.warmup_steps = cfg.warmup_epochs * batches;
    sched.total_steps = cfg.epochs * batches;

    Optimizer opt(cfg.optim, model.params());
    const size_t gh = model.config().grid_h(), gw = model.config().grid_w();
    const size_t num_patches = model.config().num_patches();

    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});

    PretrainResult result;
    size_t global_step = 0;
    for (size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        Rng shuffle_rng = Rng::derive(cfg.seed, epoch, kShuffleStream);
        shuffle_rng.shuffle(order);
        double loss_acc = 0.0, ratio_acc = 0.0, last_lr = 0.0;
        for (size_t b = 0; b < batches; ++b) {
            Rng rng = Rng::derive(cfg.seed, epoch, b);
            const double r = draw_ratio(rng, cfg.ratio);
            try {
                Tensor x = gather_batch(train, order, b * bs, bs, cfg.augment.enabled,
                                        cfg.augment, rng);
                Tensor loss;
                double ratio_this = 0.0;
                if (!component) {
                    std::vector<PatchMask> masks;
                    masks.reserve(bs);
                    for (size_t i = 0; i < bs; ++i) {
                        masks.push_back(sample_patch_mask(rng, gh, gw, r));
                    }
                    ratio_this = static_cast<double>(masks[0].masked_count()) /
                                 static_cast<double>(num_patches);
                    Tensor pred = model.forward_mae(x, masks);
                    loss = mae_loss(pred, x, masks, cfg.loss.norm_pix_targets);
                } else {
                    ComponentMask cm =
                        sample_component_mask(rng, basis->variance_fractions, r);
                    ratio_this = cm.achieved_ratio;
                    Tensor pred = model.forward_pmae(x, cm, *basis);
                    loss = cfg.loss.kind == LossKind::PmaePc
                               ? pmae_loss_pc(pred, x, cm, *basis)
                               : pmae_loss_pixel(pred, x, cm, *basis);
                }
                loss_acc += loss.data()[0];
                ratio_acc += ratio_this;
                backward(loss);
                last_lr = sched.at(global_step);
                opt.step(model.params(), last_lr);
                model.zero_grads();
                if (cfg.precision == DType::F32) quantize_params(model.params());
            } catch (const NonFiniteError& e) {
                throw NonFiniteError("epoch " + std::to_string(epoch + 1) + " batch " +
                                     std::to_string(b) + " seed " + std::to_string(cfg.seed) +
                                     ": " + e.what());
            }
            ++global_step;
        }
        const auto t1 = std::chrono::steady_clock::now();
        const double secs =
            cfg.log_wall_time ? std::chrono::duration<double>(t1 - t0).count() : 0.0;
        result.epoch_losses.push_back(loss_acc / static_cast<double>(batches));
        result.epoch_mask_ratio.push_back(ratio_acc / static_cast<double>(batches));
        if (metrics != nullptr) {
            MetricsRow row;
            row.epoch = epoch + 1;
            row.phase = "pretrain";
            row.loss = result.epoch_losses.back();
            row.lr = last_lr;
            row.mask_ratio_mean = result.epoch_mask_ratio.back();
            row.seconds = secs;
            row.seed = cfg.seed;
            metrics->row(row);
        }
        if (!cfg.out_dir.empty() && cfg.ckpt_every > 0 && (epoch + 1) % cfg.ckpt_every == 0 &&
            epoch + 1 < cfg.epochs) {
            save_model_checkpoint(cfg.out_dir + "/ckpt_epoch" + std::to_string(epoch + 1) +
                                      ".pmae",
                                  model, train.channel_mean, train.channel_std, cfg.seed,
                                  cfg.precision);
        }
    }
    if (!cfg.out_dir.empty()) {
        result.final_checkpoint = cfg.out_dir + "/ckpt_final.pmae";
        save_model_checkpoint(result.final_checkpoint, model, train.channel_mean,
                              train.channel_std, cfg.seed, cfg.precision);
    }
    return result;
}

void save_model_checkpoint(const std::string& path, const VitModel& model,
                           const std::vector<double>& norm_mean,
                           const std::vector<double>& norm_std, uint64_t seed,
                           DType precision) {
    const VitConfig& c = model.config();
    NamedTensors out;
    out.emplace_back("meta.vit",
                     Tensor::from_data({12}, {static_cast<double>(c.image_h),
                                              static_cast<double>(c.image_w),
                                              static_cast<double>(c.channels),
                                              static_cast<double>(c.patch_px),
                                              static_cast<double>(c.enc_hidden),
                                              static_cast<double>(c.enc_heads),
                                              static_cast<double>(c.enc_mlp),
                                              static_cast<double>(c.enc_depth),
                                              static_cast<double>(c.dec_hidden),
                                              static_cast<double>(c.dec_heads),
                                              static_cast<double>(c.dec_mlp),
                                              static_cast<double>(c.dec_depth)}));
    out.emplace_back("meta.norm.mean", Tensor::from_data({norm_mean.size()}, norm_mean));
    out.emplace_back("meta.norm.std", Tensor::from_data({norm_std.size()}, norm_std));
    double seed_bits = 0.0;
    static_assert(sizeof(seed_bits) == sizeof(seed));
    std::memcpy(&seed_bits, &seed, sizeof(seed));
    out.emplace_back("meta.seed", Tensor::scalar(seed_bits));
    out.emplace_back("meta.precision", Tensor::scalar(precision == DType::F32 ? 0.0 : 1.0));
    for (const auto& [name, p] : model.params()) out.emplace_back(name, p);
    save_checkpoint(path, out);
}

ModelCheckpoint load_model_checkpoint(const std::string& path) {
    NamedTensors all = load_checkpoint(path);
    ModelCheckpoint ck;
    const Tensor& vit = find_tensor(all, "meta.vit");
    if (vit.numel() != 12) throw IoError("malformed architecture record in " + path);
    const auto& v = vit.data();
    ck.vit.image_h = static_cast<size_t>(v[0]);
    ck.vit.image_w = static_cast<size_t>(v[1]);
    ck.vit.channels = static_cast<size_t>(v[2]);
    ck.vit.patch_px = static_cast<size_t>(v[3]);
    ck.vit.enc_hidden = static_cast<size_t>(v[4]);
    ck.vit.enc_heads = static_cast<size_t>(v[5]);
    ck.vit.enc_mlp = static_cast<size_t>(v[6]);
    ck.vit.enc_depth = static_cast<size_t>(v[7]);
    ck.vit.dec_hidden = static_cast<size_t>(v[8]);
    ck.vit.dec_heads = static_cast<size_t>(v[9]);
    ck.vit.dec_mlp = static_cast<size_t>(v[10]);
    ck.vit.dec_depth = static_cast<size_t>(v[11]);
    ck.vit.validate();
    ck.norm_mean = find_tensor(all, "meta.norm.mean").data();
    ck.norm_std = find_tensor(all, "meta.norm.std").data();
    const double seed_bits = find_tensor(all, "meta.seed").data()[0];
    std::memcpy(&ck.seed, &seed_bits, sizeof(ck.seed));
    ck.precision =
        find_tensor(all, "meta.precision").data()[0] == 0.0 ? DType::F32 : DType::F64;
    for (auto& [name, t] : all) {
        if (name.rfind("meta.", 0) == 0) continue;
        ck.params.emplace_back(name, t);
    }
    if (ck.params.empty()) throw IoError("checkpoint holds no parameters: " + path);
    return ck;
}

Tensor extract_features(const VitModel& model, const Dataset& ds, size_t batch_size,
                        bool use_augment, const AugmentConfig& aug, uint64_t seed) {
    ds.validate();
    if (model.config().image_h != ds.h || model.config().image_w != ds.w ||
        model.config().channels != ds.c) {
        throw ConfigError("model geometry does not match the dataset");
    }
    NoGradGuard ng;
    const size_t n = ds.n;
    const size_t bs = std::max<size_t>(1, std::min(batch_size, n));
    const size_t hidden = model.config().enc_hidden;
    const size_t dim = ds.image_dim();
    std::vector<double> features(n * hidden);
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    for (size_t start = 0; start < n; start += bs) {
        const size_t count = std::min(bs, n - start);
        std::vector<double> data(count * dim);
        for (size_t i = 0; i < count; ++i) {
            const size_t idx = start + i;
            Tensor img;
            if (use_augment) {
                Rng rng = Rng::derive(seed, kFeatureStream, idx);
                img = augment_image(rng, ds, idx, aug);
            } else {
                img = normalize_image(ds, idx);
            }
            std::memcpy(data.data() + i * dim, img.data().data(), dim * sizeof(double));
        }
        Tensor x = Tensor::from_data({count, ds.c, ds.h, ds.w}, std::move(data));
        Tensor pooled = model.pooled_of(model.encode_full(x));
        std::memcpy(features.data() + start * hidden, pooled.data().data(),
                    count * hidden * sizeof(double));
    }
    return Tensor::from_data({n, hidden}, std::move(features));
}

namespace {

void check_probe_inputs(const Tensor& features, const std::vector<int>& labels,
                        size_t num_classes) {
    if (features.rank() != 2) {
        throw ShapeError("probe features must be [N, D], got " + shape_str(features.shape()));
    }
    if (features.extent(0) != labels.size()) {
        throw ShapeError("probe sees " + std::to_string(features.extent(0)) +
                         " feature rows and " + std::to_string(labels.size()) + " labels");
    }
    if (num_classes < 2) throw ConfigError("probes need at least two classes");
    for (int l : labels) {
        if (l < 0 || static_cast<size_t>(l) >= num_classes) {
            throw ConfigError("probe label " + std::to_string(l) + " outside [0, " +
                              std::to_string(num_classes) + ")");
        }
    }
}

Tensor batch_rows(const Tensor& features, const std::vector<size_t>& order, size_t start,
                  size_t count) {
    const size_t dim = features.extent(1);
    std::vector<double> data(count * dim);
    const auto& src = features.data();
    for (size_t i = 0; i < count; ++i) {
        std::memcpy(data.data() + i * dim, src.data() + order[start + i] * dim,
                    dim * sizeof(double));
    }
    return Tensor::from_data({count, dim}, std::move(data));
}

} // namespace

Probe train_probe(const Tensor& features, const std::vector<int>& labels, size_t num_classes,
                  const ProbeConfig& cfg, uint64_t seed) {
    check_probe_inputs(features, labels, num_classes);
    bool multi = false;
    for (int l : labels) {
        if (l != labels[0]) {
            multi = true;
            break;
        }
    }
    if (!multi) throw ConfigError("single-class training data cannot fit a probe");
    if (cfg.epochs == 0 || cfg.batch_size == 0) {
        throw ConfigError("probe training needs at least one epoch and a positive batch size");
    }

    const size_t n = features.extent(0);
    const size_t dim = features.extent(1);
    Rng init = Rng::derive(seed, kProbeInitStream, 0);
    Probe probe;
    probe.kind = cfg.kind;
    probe.num_classes = num_classes;
    auto weight = [&](size_t rows, size_t cols) {
        std::vector<double> w(rows * cols);
        for (auto& v : w) v = init.trunc_normal(0.02);
        Tensor t = Tensor::from_data({rows, cols}, std::move(w));
        t.set_requires_grad(true);
        return t;
    };
    auto bias = [&](size_t len) {
        Tensor t(Shape{len});
        t.set_requires_grad(true);
        return t;
    };
    if (cfg.kind == ProbeConfig::Kind::Mlp) {
        probe.params.emplace_back("w1", weight(dim, dim));
        probe.params.emplace_back("b1", bias(dim));
        probe.params.emplace_back("w2", weight(dim, num_classes));
        probe.params.emplace_back("b2", bias(num_classes));
    } else {
        probe.params.emplace_back("w", weight(dim, num_classes));
        probe.params.emplace_back("b", bias(num_classes));
    }

    OptimizerConfig ocfg;
    ocfg.algo = OptimizerConfig::Algo::SgdMomentum;
    ocfg.momentum = cfg.momentum;
    ocfg.weight_decay = cfg.weight_decay;
    Optimizer opt(ocfg, probe.params);

    const size_t bs = std::min(cfg.batch_size, n);
    const size_t batches = n / bs;
    LrSchedule sched;
    sched.peak = cfg.base_lr * static_cast<double>(bs) / 256.0;
    sched.warmup_steps = cfg.warmup_epochs * batches;
    sched.total_steps = cfg.epochs * batches;

    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    size_t step = 0;
    for (size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng = Rng::derive(seed, epoch, kShuffleStream);
        shuffle_rng.shuffle(order);
        for (size_t b = 0; b < batches; ++b) {
            Tensor x = batch_rows(features, order, b * bs, bs);
            std::vector<int> y(bs);
            for (size_t i = 0; i < bs; ++i) y[i] = labels[order[b * bs + i]];
            Tensor loss = softmax_cross_entropy(probe_logits(probe, x), y);
            backward(loss);
            opt.step(probe.params, sched.at(step));
            for (auto& [name, p] : probe.params) p.zero_grad();
            ++step;
        }
    }
    return probe;
}

Tensor probe_logits(const Probe& probe, const Tensor& features) {
    if (probe.kind == ProbeConfig::Kind::Mlp) {
        Tensor hidden = gelu(linear(features, find_tensor(probe.params, "w1"),
                                    find_tensor(probe.params, "b1")));
        return linear(hidden, find_tensor(probe.params, "w2"),
                      find_tensor(probe.params, "b2"));
    }
    return linear(features, find_tensor(probe.params, "w"), find_tensor(probe.params, "b"));
}

double score_probe(const Probe& probe, const Tensor& features, const std::vector<int>& labels) {
    check_probe_inputs(features, labels, probe.num_classes);
    NoGradGuard ng;
    Tensor logits = probe_logits(probe, features);
    const auto& d = logits.data();
    const size_t n = features.extent(0);
    const size_t k = probe.num_classes;
    size_t hits = 0;
    for (size_t i = 0; i < n; ++i) {
        size_t best = 0;
        for (size_t j = 1; j < k; ++j) {
            if (d[i * k + j] > d[i * k + best]) best = j;
        }
        if (static_cast<int>(best) == labels[i]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(n);
}

KnnResult knn_eval(const Tensor& train_features, const std::vector<int>& train_labels,
                   const Tensor& test_features, const std::vector<int>& test_labels,
                   size_t num_classes, size_t k_lo, size_t k_hi) {
    check_probe_inputs(train_features, train_labels, num_classes);
    check_probe_inputs(test_features, test_labels, num_classes);
    if (train_features.extent(1) != test_features.extent(1)) {
        throw ShapeError("train and test features disagree on dimension");
    }
    const size_t n_train = train_features.extent(0);
    const size_t n_test = test_features.extent(0);
    if (k_lo < 1 || k_lo > k_hi) throw ConfigError("invalid neighbor range");
    if (k_hi > n_train) {
        throw ConfigError("k_hi " + std::to_string(k_hi) + " exceeds the " +
                          std::to_string(n_train) + " train points");
    }

    const size_t dim = train_features.extent(1);
    const auto& tr = train_features.data();
    const auto& te = test_features.data();
    KnnResult result;
    result.per_k.assign(k_hi - k_lo + 1, 0.0);
    std::vector<std::pair<double, size_t>> dist(n_train);
    std::vector<size_t> votes(num_classes);
    for (size_t i = 0; i < n_test; ++i) {
        for (size_t j = 0; j < n_train; ++j) {
            double acc = 0.0;
            const double* a = te.data() + i * dim;
            const double* b = tr.data() + j * dim;
            for (size_t p = 0; p < dim; ++p) {
                const double d = a[p] - b[p];
                acc += d * d;
            }
            dist[j] = {acc, j};
        }
        std::sort(dist.begin(), dist.end());
        std::fill(votes.begin(), votes.end(), size_t{0});
        for (size_t k = 1; k <= k_hi; ++k) {
            votes[static_cast<size_t>(train_labels[dist[k - 1].second])] += 1;
            if (k < k_lo) continue;
            size_t best = 0;
            for (size_t c = 1; c < num_classes; ++c) {
                if (votes[c] > votes[best]) best = c;
            }
            if (static_cast<int>(best) == test_labels[i]) {
                result.per_k[k - k_lo] += 1.0;
            }
        }
    }
    for (auto& acc : result.per_k) acc /= static_cast<double>(n_test);
    result.k = k_lo;
    result.accuracy = result.per_k[0];
    for (size_t k = k_lo + 1; k <= k_hi; ++k) {
        if (result.per_k[k - k_lo] > result.accuracy) {
            result.accuracy = result.per_k[k - k_lo];
            result.k = k;
        }
    }
    return result;
}

double finetune(VitModel& model, const Dataset& train, const Dataset& test,
                const FinetuneConfig& cfg, uint64_t seed, MetricsWriter* metrics) {
    train.validate();
    test.validate();
    if (train.num_classes != test.num_classes) {
        throw ConfigError("train and test splits disagree on the class count");
    }
    if (cfg.epochs == 0 || cfg.batch_size == 0) {
        throw ConfigError("finetuning needs at least one epoch and a positive batch size");
    }
    const size_t hidden = model.config().enc_hidden;
    const size_t k = train.num_classes;

    Rng init = Rng::derive(seed, kHeadInitStream, 0);
    std::vector<double> wv(hidden * k);
    for (auto& v : wv) v = init.trunc_normal(0.02);
    Tensor head_w = Tensor::from_data({hidden, k}, std::move(wv));
    head_w.set_requires_grad(true);
    Tensor head_b(Shape{k});
    head_b.set_requires_grad(true);

    NamedTensors all = model.params();
    all.emplace_back("head.w", head_w);
    all.emplace_back("head.b", head_b);

    OptimizerConfig ocfg;
    ocfg.algo = OptimizerConfig::Algo::AdamW;
    ocfg.beta1 = cfg.beta1;
    ocfg.beta2 = cfg.beta2;
    ocfg.weight_decay = cfg.weight_decay;
    Optimizer opt(ocfg, all);

    const size_t n = train.n;
    const size_t bs = std::min(cfg.batch_size, n);
    const size_t batches = n / bs;
    LrSchedule sched;
    sched.peak = cfg.base_lr * static_cast<double>(bs) / 256.0;
    sched.warmup_steps = cfg.warmup_epochs * batches;
    sched.total_steps = cfg.epochs * batches;

    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    size_t step = 0;
    for (size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng = Rng::derive(seed, epoch, kShuffleStream);
        shuffle_rng.shuffle(order);
        double loss_acc = 0.0;
        for (size_t b = 0; b < batches; ++b) {
            Rng rng = Rng::derive(seed, epoch, b);
            Tensor x = gather_batch(train, order, b * bs, bs, cfg.augment.enabled,
                                    cfg.augment, rng);
            std::vector<int> y(bs);
            for (size_t i = 0; i < bs; ++i) y[i] = train.labels[order[b * bs + i]];
            Tensor pooled = model.pooled_of(model.encode_full(x));
            Tensor loss = softmax_cross_entropy(linear(pooled, head_w, head_b), y);
            loss_acc += loss.data()[0];
            backward(loss);
            opt.step(all, sched.at(step));
            for (auto& [name, p] : all) p.zero_grad();
            ++step;
        }
        if (metrics != nullptr) {
            MetricsRow row;
            row.epoch = epoch + 1;
            row.phase = "finetune";
            row.loss = loss_acc / static_cast<double>(batches);
            row.lr = sched.at(step == 0 ? 0 : step - 1);
            row.seed = seed;
            metrics->row(row);
        }
    }

    NoGradGuard ng;
    size_t hits = 0;
    const size_t eval_bs = std::min<size_t>(256, test.n);
    std::vector<size_t> ident(test.n);
    std::iota(ident.begin(), ident.end(), size_t{0});
    Rng dummy(0);
    for (size_t start = 0; start < test.n; start += eval_bs) {
        const size_t count = std::min(eval_bs, test.n - start);
        AugmentConfig off;
        off.enabled = false;
        Tensor x = gather_batch(test, ident, start, count, false, off, dummy);
        Tensor logits =
            linear(model.pooled_of(model.encode_full(x)), head_w, head_b);
        const auto& d = logits.data();
        for (size_t i = 0; i < count; ++i) {
            size_t best = 0;
            for (size_t j = 1; j < k; ++j) {
                if (d[i * k + j] > d[i * k + best]) best = j;
            }
            if (static_cast<int>(best) == test.labels[start + i]) ++hits;
        }
    }
    return static_cast<double>(hits) / static_cast<double>(test.n);
}

} // namespace pmae
