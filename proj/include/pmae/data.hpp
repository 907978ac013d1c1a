#pragma once

#include <string>
#include <vector>

#include "pmae/rng.hpp"
#include "pmae/tensor.hpp"

namespace pmae {

// One split held fully in memory, pixels in HWC order per image. Sources
// with 8-bit storage land in [0,1]; the synthetic generator produces
// unbounded floats. Channel statistics always come from the train split.
struct Dataset {
    std::string name;
    std::string split; // "train" or "test"
    size_t n = 0, h = 0, w = 0, c = 0;
    size_t num_classes = 0;
    std::vector<float> pixels; // n * h * w * c
    std::vector<int> labels;
    std::vector<double> channel_mean;
    std::vector<double> channel_std;

    size_t size() const { return n; }
    size_t image_dim() const { return h * w * c; }
    void validate() const;
    void compute_channel_stats();
    Tensor image_chw(size_t i) const; // [C,H,W], raw values
};

struct DatasetPair {
    Dataset train;
    Dataset test;
};

// Reads data_batch_{1..5}.bin and test_batch.bin (3073-byte records, one
// label byte then three channel planes). A file of the wrong length is
// rejected with the expected and actual byte counts.
DatasetPair load_cifar10_binary(const std::string& dir);

// Compact raw dataset: magic "PMDS", version u32, N u64, H u32, W u32,
// C u32, num_classes u32, N u16 labels, then N*H*W*C u8 pixels.
Dataset load_raw_tensor_dataset(const std::string& path, const std::string& split);
void save_raw_tensor_dataset(const std::string& path, const Dataset& ds);

struct SyntheticConfig {
    size_t n_train = 2000;
    size_t n_test = 500;
    size_t image_h = 16; // square single-channel images
    size_t num_classes = 2;
    double noise_std = 0.1;

    void validate() const;
};

// Which bank entries carry what, for recovery checks.
struct SyntheticInfo {
    size_t class_pattern = 0;           // flat u * h + v index
    double class_coeff = 1.0;           // per-class level scale
    std::vector<size_t> noise_patterns; // descending amplitude
    std::vector<double> noise_stds;
    std::vector<size_t> tied_patterns;  // nonlinear functions of the class coefficient
    std::vector<double> tied_gammas;
};

struct SyntheticData {
    Dataset train;
    Dataset test;
    SyntheticInfo info;
};

// Orthonormal 2-D cosine pattern (u, v), flat row-major [h * h].
std::vector<double> cosine_pattern_2d(size_t h, size_t u, size_t v);

// Images are sums over an orthonormal cosine bank: a few high-variance
// class-independent factors, one low-variance factor whose signed
// coefficient encodes the class, a few quieter factors whose coefficients
// are odd nonlinear functions of that signed coefficient (zero covariance
// with it and each other, so PCA still recovers the bank), and white pixel
// noise. The class is invisible per-pixel but linearly decodable from the
// whole image, and the tied factors are predictable only through the
// signed class coefficient.
SyntheticData synthetic_global_factors(Rng& rng, const SyntheticConfig& cfg);

// Binary PGM (c == 1) or PPM (c == 3), maxval 255; values clamped to [0,1].
void write_pnm(const std::string& path, size_t h, size_t w, size_t c,
               const std::vector<double>& hwc);
struct PnmImage {
    size_t h = 0, w = 0, c = 0;
    std::vector<double> hwc; // back in [0,1]
};
PnmImage read_pnm(const std::string& path);

} // namespace pmae
