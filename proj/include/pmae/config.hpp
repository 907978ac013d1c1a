#pragma once

#include <string>

#include "pmae/data.hpp"
#include "pmae/pipeline.hpp"

namespace pmae {

// Flat key=value run description. Optimization defaults follow the published
// pretraining recipe (batch 512, base lr 1.5e-4, betas 0.9/0.95, weight
// decay 0.05, 800 epochs with 40 warmup, linear lr scaling by batch/256);
// the model defaults follow the tiny transformer used there (width 192,
// 12 heads, mlp 768, depth 12, patch 8).
struct RunConfig {
    // data = synthetic | cifar10 | pmds
    std::string data = "synthetic";
    std::string data_dir;   // cifar10 batch directory
    std::string train_path; // pmds
    std::string test_path;  // pmds
    SyntheticConfig synth;
    uint64_t data_seed = 0; // synthetic generation stream, separate from the run seed

    // method = mae | pmae; loss defaults to the method's native kind
    std::string method = "mae";
    std::string loss;
    bool norm_pix = true; // pixel-method targets only
    std::string ratio = "std"; // std (0.75) | fixed | uniform
    double r = 0.75;
    double r_lo = 0.1;
    double r_hi = 0.9;
    std::string basis; // component basis path
    bool fit_basis = false;

    size_t patch = 8;
    size_t enc_hidden = 192, enc_heads = 12, enc_mlp = 768, enc_depth = 12;
    size_t dec_hidden = 192, dec_heads = 12, dec_mlp = 768, dec_depth = 12;

    double base_lr = 1.5e-4, beta1 = 0.9, beta2 = 0.95, weight_decay = 0.05;
    size_t batch = 512, epochs = 800, warmup = 40;

    bool augment = true;
    double scale_lo = 0.2, scale_hi = 1.0;
    double aspect_lo = 3.0 / 4.0, aspect_hi = 4.0 / 3.0;
    double hflip = 0.5;

    uint64_t seed = 0;
    std::string out;
    size_t ckpt_every = 0;
    std::string precision = "f64";
    bool log_wall_time = false;

    void validate() const;
};

// One key=value per line; blank lines and # comments ignored. Unknown keys
// are errors naming the key.
RunConfig parse_run_config(const std::string& path);

// A single "key=value" assignment, the same grammar as the file.
void apply_override(RunConfig& cfg, const std::string& assignment);

// Canonical key=value rendering of every field, for run records.
std::string render_run_config(const RunConfig& cfg);

// Materializes the configured dataset (synthetic data is generated from
// data_seed; file-backed data is loaded and validated).
DatasetPair build_datasets(const RunConfig& cfg);

VitConfig vit_config_of(const RunConfig& cfg, const Dataset& train);
PretrainConfig pretrain_config_of(const RunConfig& cfg);

} // namespace pmae
