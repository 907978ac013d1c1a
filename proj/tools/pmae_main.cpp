#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <limits>

#include "pmae/checkpoint.hpp"
#include "pmae/config.hpp"
#include "pmae/errors.hpp"
#include "pmae/pipeline.hpp"
#include "pmae/threadpool.hpp"

namespace {

using namespace pmae;

struct DataFlags {
    std::string config_path;
    std::vector<std::string> sets;
    std::string data, data_dir, train_path, test_path;
    uint64_t seed = 0;
    bool seed_given = false;
};

void add_data_flags(CLI::App* cmd, DataFlags& f) {
    cmd->add_option("--config", f.config_path, "key=value run description file");
    cmd->add_option("--set", f.sets, "override a config key, e.g. --set epochs=50")
        ->take_all();
    cmd->add_option("--data", f.data, "dataset kind: synthetic, cifar10, or pmds");
    cmd->add_option("--data-dir", f.data_dir, "cifar10 batch directory");
    cmd->add_option("--train-data", f.train_path, "train split file (pmds)");
    cmd->add_option("--test-data", f.test_path, "test split file (pmds)");
    cmd->add_option("--seed", f.seed, "run seed")->each([&f](const std::string&) {
        f.seed_given = true;
    });
}

RunConfig assemble(const DataFlags& f) {
    RunConfig cfg;
    if (!f.config_path.empty()) cfg = parse_run_config(f.config_path);
    for (const auto& s : f.sets) apply_override(cfg, s);
    if (!f.data.empty()) cfg.data = f.data;
    if (!f.data_dir.empty()) cfg.data_dir = f.data_dir;
    if (!f.train_path.empty()) cfg.train_path = f.train_path;
    if (!f.test_path.empty()) cfg.test_path = f.test_path;
    if (f.seed_given) cfg.seed = f.seed;
    return cfg;
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory " + dir + ": " + ec.message());
}

PcaBasis obtain_basis(const RunConfig& cfg, const Dataset& train) {
    if (!cfg.basis.empty()) {
        PcaBasis basis = load_basis(cfg.basis);
        if (basis.dim != train.image_dim()) {
            throw ConfigError("basis dimension " + std::to_string(basis.dim) +
                              " does not match images of dimension " +
                              std::to_string(train.image_dim()));
        }
        return basis;
    }
    return fit_basis_of(train);
}

int cmd_fit_pca(const DataFlags& flags, const std::string& out_path) {
    RunConfig cfg = assemble(flags);
    if (cfg.method == "mae") cfg.method = "pmae"; // fitting a basis is the whole point here
    cfg.fit_basis = true;
    DatasetPair pair = build_datasets(cfg);
    PcaBasis basis = fit_basis_of(pair.train);
    save_basis(out_path, basis);
    std::printf("fitted %zu-dimensional basis on %zu images -> %s\n", basis.dim, pair.train.n,
                out_path.c_str());
    const size_t top = std::min<size_t>(10, basis.variance_fractions.size());
    for (size_t i = 0; i < top; ++i) {
        std::printf("component %zu variance fraction %.6f\n", i, basis.variance_fractions[i]);
    }
    return 0;
}

int cmd_pretrain(const DataFlags& flags, const std::string& out_dir) {
    RunConfig cfg = assemble(flags);
    if (!out_dir.empty()) cfg.out = out_dir;
    if (cfg.out.empty()) throw ConfigError("pretrain needs out=<dir> (or --out)");
    cfg.validate();
    ensure_dir(cfg.out);

    DatasetPair pair = build_datasets(cfg);
    VitConfig vc = vit_config_of(cfg, pair.train);
    VitModel model(vc, cfg.seed);

    PcaBasis basis;
    const bool component = cfg.method == "pmae";
    if (component) {
        basis = obtain_basis(cfg, pair.train);
        if (cfg.basis.empty()) save_basis(cfg.out + "/basis.pcab", basis);
    }

    {
        std::ofstream run(cfg.out + "/run.txt");
        if (!run.good()) throw IoError("cannot write " + cfg.out + "/run.txt");
        run << render_run_config(cfg);
        run << "threads=" << worker_count() << "\n";
    }

    MetricsWriter metrics(cfg.out + "/metrics.csv");
    PretrainResult res = pretrain(model, pair.train, component ? &basis : nullptr,
                                  pretrain_config_of(cfg), &metrics);
    std::printf("pretrained %zu epochs, final loss %.6g\n", cfg.epochs,
                res.epoch_losses.back());
    std::printf("checkpoint %s\n", res.final_checkpoint.c_str());
    return 0;
}

int cmd_eval(const DataFlags& flags, const std::string& ckpt_path, const std::string& protocol,
             const std::string& out_dir, bool eval_augment, size_t epochs_override,
             size_t batch_override, double lr_override) {
    RunConfig cfg = assemble(flags);
    if (cfg.method == "pmae" && cfg.basis.empty()) cfg.fit_basis = true;

    ModelCheckpoint ck = load_model_checkpoint(ckpt_path);
    VitModel model(ck.vit, 0);
    model.load_params(ck.params);

    DatasetPair pair = build_datasets(cfg);
    if (ck.norm_mean.size() != pair.train.c) {
        throw ConfigError("checkpoint was trained on " + std::to_string(ck.norm_mean.size()) +
                          "-channel images, dataset has " + std::to_string(pair.train.c));
    }
    // evaluation views are normalized exactly as during pretraining
    pair.train.channel_mean = ck.norm_mean;
    pair.train.channel_std = ck.norm_std;
    pair.test.channel_mean = ck.norm_mean;
    pair.test.channel_std = ck.norm_std;

    AugmentConfig aug;
    aug.enabled = true;
    aug.scale_lo = cfg.scale_lo;
    aug.scale_hi = cfg.scale_hi;
    aug.aspect_lo = cfg.aspect_lo;
    aug.aspect_hi = cfg.aspect_hi;
    aug.hflip_prob = cfg.hflip;

    double accuracy = 0.0;
    size_t chosen_k = 0;
    if (protocol == "finetune") {
        FinetuneConfig fc;
        if (epochs_override > 0) fc.epochs = epochs_override;
        if (batch_override > 0) fc.batch_size = batch_override;
        if (lr_override > 0.0) fc.base_lr = lr_override;
        fc.augment = aug;
        fc.augment.enabled = cfg.augment;
        accuracy = finetune(model, pair.train, pair.test, fc, cfg.seed, nullptr);
    } else {
        Tensor train_x =
            extract_features(model, pair.train, 256, eval_augment, aug, cfg.seed);
        Tensor test_x = extract_features(model, pair.test, 256, false, aug, cfg.seed);
        if (protocol == "knn") {
            const size_t k_hi = std::min<size_t>(20, pair.train.n);
            KnnResult res = knn_eval(train_x, pair.train.labels, test_x, pair.test.labels,
                                     pair.train.num_classes, 2, k_hi);
            accuracy = res.accuracy;
            chosen_k = res.k;
        } else {
            ProbeConfig pc;
            pc.kind =
                protocol == "mlp" ? ProbeConfig::Kind::Mlp : ProbeConfig::Kind::Linear;
            if (epochs_override > 0) pc.epochs = epochs_override;
            if (batch_override > 0) pc.batch_size = batch_override;
            if (lr_override > 0.0) pc.base_lr = lr_override;
            Probe probe =
                train_probe(train_x, pair.train.labels, pair.train.num_classes, pc, cfg.seed);
            accuracy = score_probe(probe, test_x, pair.test.labels);
        }
    }

    if (protocol == "knn") {
        std::printf("%s accuracy %.4f k %zu\n", protocol.c_str(), accuracy, chosen_k);
    } else {
        std::printf("%s accuracy %.4f\n", protocol.c_str(), accuracy);
    }
    if (!out_dir.empty()) {
        ensure_dir(out_dir);
        MetricsWriter w(out_dir + "/eval.csv", true);
        MetricsRow row;
        row.epoch = chosen_k; // k for knn, 0 otherwise
        row.phase = "eval_" + protocol;
        row.accuracy = accuracy;
        row.seed = cfg.seed;
        w.row(row);
    }
    return 0;
}

// Panels are normalized images. Rendering maps them back to raw pixel values
// and then to [0, 1] by the per-channel raw range of the dataset, so byte
// sources render unchanged and unbounded sources stay inside 8 bits. Both
// maps are affine, which keeps complementary panels summing to the original.
void write_panel_grid(const std::string& path, const Dataset& ds,
                      const std::vector<std::vector<Tensor>>& rows) {
    const size_t h = ds.h, w = ds.w, c = ds.c;
    std::vector<double> lo(c, std::numeric_limits<double>::infinity());
    std::vector<double> hi(c, -std::numeric_limits<double>::infinity());
    for (size_t i = 0; i < ds.pixels.size(); ++i) {
        const size_t ch = i % c;
        lo[ch] = std::min(lo[ch], static_cast<double>(ds.pixels[i]));
        hi[ch] = std::max(hi[ch], static_cast<double>(ds.pixels[i]));
    }
    const size_t cols = rows[0].size();
    const size_t gh = rows.size() * h + (rows.size() - 1);
    const size_t gw = cols * w + (cols - 1);
    std::vector<double> grid(gh * gw * c, 0.0);
    for (size_t ri = 0; ri < rows.size(); ++ri) {
        for (size_t ci = 0; ci < cols; ++ci) {
            const auto& panel = rows[ri][ci].data(); // [C,H,W] normalized
            const size_t y0 = ri * (h + 1), x0 = ci * (w + 1);
            for (size_t ch = 0; ch < c; ++ch) {
                const double span = hi[ch] - lo[ch];
                for (size_t y = 0; y < h; ++y) {
                    for (size_t x = 0; x < w; ++x) {
                        const double raw = panel[ch * h * w + y * w + x] *
                                               ds.channel_std[ch] +
                                           ds.channel_mean[ch];
                        grid[((y0 + y) * gw + (x0 + x)) * c + ch] =
                            span > 1e-12 ? (raw - lo[ch]) / span : 0.5;
                    }
                }
            }
        }
    }
    write_pnm(path, gh, gw, c, grid);
}

int cmd_render_masks(const DataFlags& flags, const std::string& mode, double r, size_t count,
                     const std::string& out_dir) {
    RunConfig cfg = assemble(flags);
    if (mode != "pixel" && mode != "component" && mode != "pc_bands") {
        throw ConfigError("mode must be pixel, component, or pc_bands, got '" + mode + "'");
    }
    if (r < 0.0 || r > 1.0) throw ConfigError("r must lie in [0, 1]");
    if (mode != "pixel" && cfg.method == "mae") cfg.method = "pmae";
    if (mode != "pixel" && cfg.basis.empty()) cfg.fit_basis = true;
    if (out_dir.empty()) throw ConfigError("render-masks needs --out <dir>");
    ensure_dir(out_dir);

    DatasetPair pair = build_datasets(cfg);
    const Dataset& ds = pair.train;
    count = std::min(count, ds.n);
    if (count == 0) throw ConfigError("nothing to render");

    PcaBasis basis;
    if (mode != "pixel") basis = obtain_basis(cfg, ds);

    std::vector<std::vector<Tensor>> rows;
    for (size_t i = 0; i < count; ++i) {
        Rng rng = Rng::derive(cfg.seed, i, 0);
        Tensor x = normalize_image(ds, i);
        if (mode == "pixel") {
            if (ds.h % cfg.patch != 0 || ds.w % cfg.patch != 0) {
                throw ConfigError("patch " + std::to_string(cfg.patch) +
                                  " does not tile " + std::to_string(ds.h) + "x" +
                                  std::to_string(ds.w) + " images");
            }
            PatchMask mask =
                sample_patch_mask(rng, ds.h / cfg.patch, ds.w / cfg.patch, r);
            Tensor ind = patch_mask_to_pixel_indicator(mask, cfg.patch, ds.c);
            Tensor inv = add_scalar(neg(ind), 1.0);
            rows.push_back({x, mul(x, ind), mul(x, inv)});
        } else if (mode == "component") {
            ComponentMask cm = sample_component_mask(rng, basis.variance_fractions, r);
            ComponentMask inverted = cm;
            for (auto& m : inverted.masked) m = m ? 0 : 1;
            Tensor flat = reshape(x, {1, ds.image_dim()});
            // the encoder sees the visible components; the target is the rest
            Tensor input = reshape(masked_reconstruction(flat, cm, basis),
                                   {ds.c, ds.h, ds.w});
            Tensor target = reshape(masked_reconstruction(flat, inverted, basis),
                                    {ds.c, ds.h, ds.w});
            rows.push_back({x, input, target});
        } else {
            // thirds of the variance: top, middle, bottom bands, each panel
            // showing only its band's components
            std::vector<Tensor> row = {x};
            double cum = 0.0;
            size_t comp = 0;
            for (int band = 0; band < 3; ++band) {
                const double limit = (band + 1) / 3.0;
                ComponentMask bm;
                bm.masked.assign(basis.dim, 1);
                while (comp < basis.dim &&
                       (cum < limit || band == 2)) {
                    bm.masked[comp] = 0;
                    cum += basis.variance_fractions[comp];
                    ++comp;
                }
                Tensor flat = reshape(x, {1, ds.image_dim()});
                row.push_back(reshape(masked_reconstruction(flat, bm, basis),
                                      {ds.c, ds.h, ds.w}));
            }
            rows.push_back(std::move(row));
        }
    }

    const std::string path =
        out_dir + "/masks_" + mode + (ds.c == 3 ? ".ppm" : ".pgm");
    write_panel_grid(path, ds, rows);
    std::printf("wrote %s (%zu samples, %zu panels each)\n", path.c_str(), count,
                rows[0].size());
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"masked image modeling lab: patch masking and principal-component masking"};
    app.require_subcommand(1);

    DataFlags fit_flags, pre_flags, eval_flags, render_flags;
    std::string fit_out, pre_out, eval_ckpt, eval_protocol, eval_out;
    std::string render_mode = "pixel", render_out;
    bool eval_augment = false;
    size_t eval_epochs = 0, eval_batch = 0;
    double eval_lr = 0.0, render_r = 0.75;
    size_t render_count = 8;

    CLI::App* fit = app.add_subcommand("fit-pca", "fit a principal-component basis");
    add_data_flags(fit, fit_flags);
    fit->add_option("--out", fit_out, "basis file to write")->required();

    CLI::App* pre = app.add_subcommand("pretrain", "run masked-reconstruction pretraining");
    add_data_flags(pre, pre_flags);
    pre->add_option("--out", pre_out, "output directory");

    CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    add_data_flags(ev, eval_flags);
    ev->add_option("--checkpoint", eval_ckpt, "model checkpoint")->required();
    ev->add_option("--protocol", eval_protocol, "linear, mlp, knn, or finetune")
        ->required()
        ->check(CLI::IsMember({"linear", "mlp", "knn", "finetune"}));
    ev->add_option("--out", eval_out, "directory for eval.csv");
    ev->add_flag("--eval-augment", eval_augment,
                 "extract train features from one augmented view per image");
    ev->add_option("--epochs", eval_epochs, "override protocol epochs");
    ev->add_option("--batch", eval_batch, "override protocol batch size");
    ev->add_option("--base-lr", eval_lr, "override protocol base learning rate");

    CLI::App* ren = app.add_subcommand("render-masks", "write mask visualization grids");
    add_data_flags(ren, render_flags);
    ren->add_option("--mode", render_mode, "pixel, component, or pc_bands");
    ren->add_option("--r", render_r, "mask ratio");
    ren->add_option("--count", render_count, "samples to render");
    ren->add_option("--out", render_out, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (fit->parsed()) return cmd_fit_pca(fit_flags, fit_out);
        if (pre->parsed()) return cmd_pretrain(pre_flags, pre_out);
        if (ev->parsed()) {
            return cmd_eval(eval_flags, eval_ckpt, eval_protocol, eval_out, eval_augment,
                            eval_epochs, eval_batch, eval_lr);
        }
        if (ren->parsed()) {
            return cmd_render_masks(render_flags, render_mode, render_r, render_count,
                                    render_out);
        }
    } catch (const NonFiniteError& e) {
        std::fprintf(stderr, "numerical failure: %s\n", e.what());
        return 3;
    } catch (const ConvergenceError& e) {
        std::fprintf(stderr, "numerical failure: %s\n", e.what());
        return 3;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const IoError& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return 2;
    } catch (const ShapeError& e) {
        std::fprintf(stderr, "shape error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 2;
}
