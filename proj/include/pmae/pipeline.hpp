#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "pmae/data.hpp"
#include "pmae/masking.hpp"
#include "pmae/objectives.hpp"
#include "pmae/pca.hpp"
#include "pmae/rng.hpp"
#include "pmae/tensor.hpp"
#include "pmae/vit.hpp"

namespace pmae {

// Per-step linear warmup from zero to peak, then half-cosine decay to zero
// at total_steps. at(0) == 0 whenever warmup is nonzero.
struct LrSchedule {
    double peak = 0.0;
    size_t warmup_steps = 0;
    size_t total_steps = 0;

    double at(size_t step) const;
};

struct OptimizerConfig {
    enum class Algo { AdamW, SgdMomentum };
    Algo algo = Algo::AdamW;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double momentum = 0.9;
    double weight_decay = 0.0;
};

// Weight decay is decoupled (applied to the parameter before the gradient
// update) and touches only tensors of rank >= 2, so biases, norm gains, and
// the learned tokens never decay. Gradients are checked finite before any
// state is mutated.
class Optimizer {
public:
    Optimizer(const OptimizerConfig& cfg, const NamedTensors& params);
    void step(NamedTensors& params, double lr);
    size_t steps_taken() const { return t_; }

private:
    OptimizerConfig cfg_;
    size_t t_ = 0;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
};

struct AugmentConfig {
    bool enabled = true;
    double scale_lo = 0.2;
    double scale_hi = 1.0;
    double aspect_lo = 3.0 / 4.0;
    double aspect_hi = 4.0 / 3.0;
    double hflip_prob = 0.5;
};

// Random resized crop (10 proposals, log-uniform aspect, center-crop
// fallback), bicubic Catmull-Rom resampling with edge clamping, horizontal
// flip, then per-channel normalization by the dataset's train statistics.
// Values are not clamped after resampling. Draw order: scale, aspect, top,
// left, flip. Output [C,H,W] at the dataset's native size.
Tensor augment_image(Rng& rng, const Dataset& ds, size_t index, const AugmentConfig& cfg);

// Normalization only; the deterministic view used for PCA fitting, feature
// extraction, and rendering.
Tensor normalize_image(const Dataset& ds, size_t index);

// Fits the principal components of the normalized train images.
PcaBasis fit_basis_of(const Dataset& train);

struct MetricsRow {
    size_t epoch = 0;
    std::string phase;
    double loss = 0.0;
    double accuracy = -1.0; // negative leaves the field empty
    double lr = 0.0;
    double mask_ratio_mean = 0.0;
    double seconds = 0.0;
    uint64_t seed = 0;
};

// CSV with the fixed header epoch,phase,loss,accuracy,lr,mask_ratio_mean,
// seconds,seed; UTF-8, LF line endings.
class MetricsWriter {
public:
    MetricsWriter(const std::string& path, bool append = false);
    void row(const MetricsRow& r);

private:
    std::ofstream out_;
};

struct PretrainConfig {
    enum class Method { Mae, Pmae };
    Method method = Method::Mae;
    LossConfig loss;
    RatioPolicy ratio = RatioPolicy::fixed(0.75);
    OptimizerConfig optim;
    AugmentConfig augment;
    double base_lr = 1.5e-4;
    size_t batch_size = 512;
    size_t epochs = 800;
    size_t warmup_epochs = 40;
    uint64_t seed = 0;
    DType precision = DType::F64;
    size_t ckpt_every = 0; // epochs between snapshots, 0 keeps only the final
    bool log_wall_time = false;
    std::string out_dir;
};

struct PretrainResult {
    std::vector<double> epoch_losses;
    std::vector<double> epoch_mask_ratio;
    std::string final_checkpoint;
};

// Runs the masked-reconstruction loop. basis is required for the component
// method and ignored otherwise. Deterministic for a fixed seed: per-batch
// randomness comes from Rng::derive(seed, epoch, batch), the epoch shuffle
// from Rng::derive(seed, epoch, 1000000007). metrics may be null.
PretrainResult pretrain(VitModel& model, const Dataset& train, const PcaBasis* basis,
                        const PretrainConfig& cfg, MetricsWriter* metrics);

// Self-contained model snapshot: architecture, normalization statistics,
// seed, precision tag, and all parameters.
struct ModelCheckpoint {
    VitConfig vit;
    NamedTensors params;
    std::vector<double> norm_mean;
    std::vector<double> norm_std;
    uint64_t seed = 0;
    DType precision = DType::F64;
};

void save_model_checkpoint(const std::string& path, const VitModel& model,
                           const std::vector<double>& norm_mean,
                           const std::vector<double>& norm_std, uint64_t seed,
                           DType precision);
ModelCheckpoint load_model_checkpoint(const std::string& path);

// Mean-pooled patch-token features of the full encoding, one row per image:
// [N, enc_hidden]. With use_augment the view is a seeded random crop/flip,
// otherwise the plain normalized image.
Tensor extract_features(const VitModel& model, const Dataset& ds, size_t batch_size,
                        bool use_augment, const AugmentConfig& aug, uint64_t seed);

struct ProbeConfig {
    enum class Kind { Linear, Mlp };
    Kind kind = Kind::Linear;
    double base_lr = 0.1;
    size_t batch_size = 512;
    size_t epochs = 100;
    size_t warmup_epochs = 10;
    double momentum = 0.9;
    double weight_decay = 0.0;
};

struct Probe {
    ProbeConfig::Kind kind = ProbeConfig::Kind::Linear;
    NamedTensors params;
    size_t num_classes = 0;
};

// SGD-with-momentum classifier on frozen features. The MLP variant uses one
// hidden layer of the feature width with gelu. Training never sees the test
// split; score_probe is the only place test labels are read.
Probe train_probe(const Tensor& features, const std::vector<int>& labels, size_t num_classes,
                  const ProbeConfig& cfg, uint64_t seed);
Tensor probe_logits(const Probe& probe, const Tensor& features);
double score_probe(const Probe& probe, const Tensor& features, const std::vector<int>& labels);

struct KnnResult {
    double accuracy = 0.0;
    size_t k = 0;
    std::vector<double> per_k; // index 0 is k_lo
};

// Euclidean majority vote, sweeping k over [k_lo, k_hi]; reports the best
// accuracy (smallest k on ties). Vote ties resolve to the smallest class.
KnnResult knn_eval(const Tensor& train_features, const std::vector<int>& train_labels,
                   const Tensor& test_features, const std::vector<int>& test_labels,
                   size_t num_classes, size_t k_lo = 2, size_t k_hi = 20);

struct FinetuneConfig {
    double base_lr = 1e-3;
    size_t batch_size = 512;
    size_t epochs = 100;
    size_t warmup_epochs = 5;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double weight_decay = 0.5;
    AugmentConfig augment;
};

// Joint training of the encoder and a fresh linear head on CLS features.
// Returns top-1 accuracy on the plain normalized test split.
double finetune(VitModel& model, const Dataset& train, const Dataset& test,
                const FinetuneConfig& cfg, uint64_t seed, MetricsWriter* metrics);

} // namespace pmae
