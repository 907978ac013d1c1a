#include "pmae/data.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "pmae/binary_io.hpp"
#include "pmae/errors.hpp"

namespace pmae {

void Dataset::validate() const {
    if (n == 0 || h == 0 || w == 0 || c == 0) {
        throw ConfigError("dataset " + name + "/" + split + " has empty geometry");
    }
    if (pixels.size() != n * h * w * c) {
        throw ConfigError("dataset " + name + "/" + split + " holds " +
                          std::to_string(pixels.size()) + " pixels, expected " +
                          std::to_string(n * h * w * c));
    }
    if (labels.size() != n) {
        throw ConfigError("dataset " + name + "/" + split + " holds " +
                          std::to_string(labels.size()) + " labels for " + std::to_string(n) +
                          " images");
    }
    for (int l : labels) {
        if (l < 0 || static_cast<size_t>(l) >= num_classes) {
            throw ConfigError("dataset " + name + "/" + split + " label " + std::to_string(l) +
                              " outside [0, " + std::to_string(num_classes) + ")");
        }
    }
}

void Dataset::compute_channel_stats() {
    channel_mean.assign(c, 0.0);
    channel_std.assign(c, 0.0);
    const size_t per_channel = n * h * w;
    for (size_t i = 0; i < n; ++i) {
        const float* img = pixels.data() + i * h * w * c;
        for (size_t p = 0; p < h * w; ++p) {
            for (size_t ch = 0; ch < c; ++ch) {
                channel_mean[ch] += img[p * c + ch];
            }
        }
    }
    for (size_t ch = 0; ch < c; ++ch) channel_mean[ch] /= static_cast<double>(per_channel);
    for (size_t i = 0; i < n; ++i) {
        const float* img = pixels.data() + i * h * w * c;
        for (size_t p = 0; p < h * w; ++p) {
            for (size_t ch = 0; ch < c; ++ch) {
                const double d = img[p * c + ch] - channel_mean[ch];
                channel_std[ch] += d * d;
            }
        }
    }
    for (size_t ch = 0; ch < c; ++ch) {
        channel_std[ch] = std::sqrt(channel_std[ch] / static_cast<double>(per_channel));
        if (channel_std[ch] < 1e-12) channel_std[ch] = 1.0;
    }
}

Tensor Dataset::image_chw(size_t i) const {
    if (i >= n) {
        throw ConfigError("image index " + std::to_string(i) + " outside dataset of " +
                          std::to_string(n));
    }
    std::vector<double> out(c * h * w);
    const float* img = pixels.data() + i * h * w * c;
    for (size_t ch = 0; ch < c; ++ch) {
        for (size_t y = 0; y < h; ++y) {
            for (size_t x = 0; x < w; ++x) {
                out[(ch * h + y) * w + x] = img[(y * w + x) * c + ch];
            }
        }
    }
    return Tensor::from_data({c, h, w}, std::move(out));
}

namespace {

constexpr size_t kCifarSide = 32;
constexpr size_t kCifarRecord = 1 + 3 * kCifarSide * kCifarSide;
constexpr size_t kCifarPerFile = 10000;

void read_cifar_file(const std::string& path, Dataset& ds, size_t offset) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in.good()) throw IoError("cannot open " + path);
    const size_t actual = static_cast<size_t>(in.tellg());
    const size_t expected = kCifarRecord * kCifarPerFile;
    if (actual != expected) {
        throw IoError(path + ": expected " + std::to_string(expected) + " bytes, got " +
                      std::to_string(actual));
    }
    in.seekg(0);
    std::vector<unsigned char> record(kCifarRecord);
    for (size_t i = 0; i < kCifarPerFile; ++i) {
        in.read(reinterpret_cast<char*>(record.data()), static_cast<std::streamsize>(kCifarRecord));
        if (!in.good()) throw IoError("short read in " + path);
        const size_t idx = offset + i;
        ds.labels[idx] = record[0];
        float* img = ds.pixels.data() + idx * ds.h * ds.w * ds.c;
        const unsigned char* planes = record.data() + 1;
        for (size_t y = 0; y < kCifarSide; ++y) {
            for (size_t x = 0; x < kCifarSide; ++x) {
                for (size_t ch = 0; ch < 3; ++ch) {
                    img[(y * kCifarSide + x) * 3 + ch] =
                        static_cast<float>(planes[ch * kCifarSide * kCifarSide + y * kCifarSide + x]) /
                        255.0f;
                }
            }
        }
    }
}

} // namespace

DatasetPair load_cifar10_binary(const std::string& dir) {
    DatasetPair pair;
    pair.train.name = "cifar10";
    pair.train.split = "train";
    pair.train.n = 5 * kCifarPerFile;
    pair.train.h = kCifarSide;
    pair.train.w = kCifarSide;
    pair.train.c = 3;
    pair.train.num_classes = 10;
    pair.train.pixels.resize(pair.train.n * pair.train.image_dim());
    pair.train.labels.resize(pair.train.n);
    for (size_t f = 0; f < 5; ++f) {
        read_cifar_file(dir + "/data_batch_" + std::to_string(f + 1) + ".bin", pair.train,
                        f * kCifarPerFile);
    }

    pair.test.name = "cifar10";
    pair.test.split = "test";
    pair.test.n = kCifarPerFile;
    pair.test.h = kCifarSide;
    pair.test.w = kCifarSide;
    pair.test.c = 3;
    pair.test.num_classes = 10;
    pair.test.pixels.resize(pair.test.n * pair.test.image_dim());
    pair.test.labels.resize(pair.test.n);
    read_cifar_file(dir + "/test_batch.bin", pair.test, 0);

    pair.train.validate();
    pair.test.validate();
    pair.train.compute_channel_stats();
    pair.test.channel_mean = pair.train.channel_mean;
    pair.test.channel_std = pair.train.channel_std;
    return pair;
}

namespace {
constexpr uint32_t kPmdsVersion = 1;
}

void save_raw_tensor_dataset(const std::string& path, const Dataset& ds) {
    ds.validate();
    BinWriter w(path);
    w.magic("PMDS");
    w.u32(kPmdsVersion);
    w.u64(ds.n);
    w.u32(static_cast<uint32_t>(ds.h));
    w.u32(static_cast<uint32_t>(ds.w));
    w.u32(static_cast<uint32_t>(ds.c));
    w.u32(static_cast<uint32_t>(ds.num_classes));
    for (int l : ds.labels) w.u16(static_cast<uint16_t>(l));
    for (float v : ds.pixels) {
        const double clamped = std::min(1.0, std::max(0.0, static_cast<double>(v)));
        w.u8(static_cast<uint8_t>(std::llround(clamped * 255.0)));
    }
    w.close();
}

Dataset load_raw_tensor_dataset(const std::string& path, const std::string& split) {
    BinReader r(path);
    r.expect_magic("PMDS");
    const uint32_t version = r.u32();
    if (version != kPmdsVersion) {
        throw IoError("unsupported dataset version " + std::to_string(version) + " in " + path);
    }
    Dataset ds;
    ds.name = "raw";
    ds.split = split;
    ds.n = r.u64();
    ds.h = r.u32();
    ds.w = r.u32();
    ds.c = r.u32();
    ds.num_classes = r.u32();
    if (ds.n == 0 || ds.h == 0 || ds.w == 0 || ds.c == 0 || ds.num_classes == 0) {
        throw IoError("empty dataset geometry in " + path);
    }
    ds.labels.resize(ds.n);
    for (size_t i = 0; i < ds.n; ++i) {
        const uint16_t l = r.u16();
        if (l >= ds.num_classes) {
            throw IoError(path + ": label " + std::to_string(l) + " at record " +
                          std::to_string(i) + " outside [0, " + std::to_string(ds.num_classes) +
                          ")");
        }
        ds.labels[i] = l;
    }
    ds.pixels.resize(ds.n * ds.image_dim());
    for (auto& v : ds.pixels) v = static_cast<float>(r.u8()) / 255.0f;
    if (!r.at_eof()) throw IoError("trailing bytes in dataset file: " + path);
    ds.validate();
    ds.compute_channel_stats();
    return ds;
}

void SyntheticConfig::validate() const {
    if (image_h < 4) throw ConfigError("synthetic images must be at least 4x4");
    if (num_classes < 2) throw ConfigError("synthetic data needs at least two classes");
    if (n_train < num_classes || n_test < num_classes) {
        throw ConfigError("synthetic splits need at least one sample per class");
    }
    if (noise_std < 0.0) throw ConfigError("noise_std must be non-negative");
}

std::vector<double> cosine_pattern_2d(size_t h, size_t u, size_t v) {
    if (u >= h || v >= h) throw ConfigError("cosine pattern index outside the bank");
    std::vector<double> out(h * h);
    const double au = u == 0 ? std::sqrt(1.0 / h) : std::sqrt(2.0 / h);
    const double av = v == 0 ? std::sqrt(1.0 / h) : std::sqrt(2.0 / h);
    for (size_t y = 0; y < h; ++y) {
        for (size_t x = 0; x < h; ++x) {
            out[y * h + x] = au * std::cos(M_PI * (y + 0.5) * u / h) * av *
                             std::cos(M_PI * (x + 0.5) * v / h);
        }
    }
    return out;
}

namespace {

// Unit-variance shapes of t = u - 1 for the class magnitude u ~ U(0.5, 1.5):
// orthogonal polynomials of the uniform distribution on [-1/2, 1/2], each
// with zero mean and zero covariance against u and one another. Multiplied
// by the class level they stay uncorrelated with the class coefficient yet
// are deterministic functions of it.
double tied_shape(size_t j, double t) {
    switch (j) {
        case 0: return (t * t - 1.0 / 12.0) * std::sqrt(180.0);
        case 1: return (t * t * t - 0.15 * t) * std::sqrt(2800.0);
        default: return ((t * t - 3.0 / 14.0) * t * t + 3.0 / 560.0) * 210.0;
    }
}

constexpr double kTiedJitter = 0.05;

Dataset synthetic_split(Rng& rng, const SyntheticConfig& cfg, const SyntheticInfo& info,
                        const std::vector<std::vector<double>>& noise_banks,
                        const std::vector<double>& class_bank,
                        const std::vector<std::vector<double>>& tied_banks, size_t count,
                        const std::string& split) {
    const size_t h = cfg.image_h;
    const size_t d = h * h;
    Dataset ds;
    ds.name = "synthetic";
    ds.split = split;
    ds.n = count;
    ds.h = h;
    ds.w = h;
    ds.c = 1;
    ds.num_classes = cfg.num_classes;
    ds.pixels.resize(count * d);
    ds.labels.resize(count);
    std::vector<double> img(d);
    for (size_t i = 0; i < count; ++i) {
        const size_t label = i % cfg.num_classes;
        ds.labels[i] = static_cast<int>(label);
        const double level =
            2.0 * static_cast<double>(label) / static_cast<double>(cfg.num_classes - 1) - 1.0;
        std::fill(img.begin(), img.end(), 0.0);
        for (size_t k = 0; k < noise_banks.size(); ++k) {
            const double coeff = rng.normal() * info.noise_stds[k];
            const std::vector<double>& pat = noise_banks[k];
            for (size_t p = 0; p < d; ++p) img[p] += coeff * pat[p];
        }
        const double u = rng.uniform(0.5, 1.5);
        const double class_coeff = level * info.class_coeff * u;
        for (size_t p = 0; p < d; ++p) img[p] += class_coeff * class_bank[p];
        for (size_t k = 0; k < tied_banks.size(); ++k) {
            const double coeff = info.tied_gammas[k] * level * tied_shape(k, u - 1.0) +
                                 kTiedJitter * rng.normal();
            const std::vector<double>& pat = tied_banks[k];
            for (size_t p = 0; p < d; ++p) img[p] += coeff * pat[p];
        }
        for (size_t p = 0; p < d; ++p) img[p] += rng.normal() * cfg.noise_std;
        float* out = ds.pixels.data() + i * d;
        for (size_t p = 0; p < d; ++p) out[p] = static_cast<float>(img[p]);
    }
    return ds;
}

} // namespace

SyntheticData synthetic_global_factors(Rng& rng, const SyntheticConfig& cfg) {
    cfg.validate();
    const size_t h = cfg.image_h;

    SyntheticData data;
    data.info.class_coeff = 1.0;
    data.info.class_pattern = 3 * h + 3; // (3,3)
    const std::vector<std::pair<size_t, size_t>> noise_uv = {{0, 1}, {1, 0}, {1, 1}};
    data.info.noise_stds = {3.0, 2.5, 2.0};
    std::vector<std::vector<double>> noise_banks;
    for (const auto& [u, v] : noise_uv) {
        data.info.noise_patterns.push_back(u * h + v);
        noise_banks.push_back(cosine_pattern_2d(h, u, v));
    }
    const std::vector<double> class_bank = cosine_pattern_2d(h, 3, 3);
    const std::vector<std::pair<size_t, size_t>> tied_uv = {{2, 2}, {0, 2}, {2, 0}};
    data.info.tied_gammas = {0.9, 0.75, 0.6};
    std::vector<std::vector<double>> tied_banks;
    for (const auto& [u, v] : tied_uv) {
        data.info.tied_patterns.push_back(u * h + v);
        tied_banks.push_back(cosine_pattern_2d(h, u, v));
    }

    data.train = synthetic_split(rng, cfg, data.info, noise_banks, class_bank, tied_banks,
                                 cfg.n_train, "train");
    data.test = synthetic_split(rng, cfg, data.info, noise_banks, class_bank, tied_banks,
                                cfg.n_test, "test");
    data.train.validate();
    data.test.validate();
    data.train.compute_channel_stats();
    data.test.channel_mean = data.train.channel_mean;
    data.test.channel_std = data.train.channel_std;
    return data;
}

void write_pnm(const std::string& path, size_t h, size_t w, size_t c,
               const std::vector<double>& hwc) {
    if (c != 1 && c != 3) throw ConfigError("pnm output supports 1 or 3 channels");
    if (hwc.size() != h * w * c) {
        throw ShapeError("pnm payload holds " + std::to_string(hwc.size()) + " values for " +
                         std::to_string(h * w * c));
    }
    std::ofstream out(path, std::ios::binary);
    if (!out.good()) throw IoError("cannot open " + path + " for writing");
    out << (c == 1 ? "P5" : "P6") << "\n" << w << " " << h << "\n255\n";
    std::vector<unsigned char> bytes(hwc.size());
    for (size_t i = 0; i < hwc.size(); ++i) {
        const double clamped = std::min(1.0, std::max(0.0, hwc[i]));
        bytes[i] = static_cast<unsigned char>(std::llround(clamped * 255.0));
    }
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out.good()) throw IoError("failed writing " + path);
}

PnmImage read_pnm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in.good()) throw IoError("cannot open " + path);
    std::string tag;
    in >> tag;
    PnmImage img;
    if (tag == "P5")
        img.c = 1;
    else if (tag == "P6")
        img.c = 3;
    else
        throw IoError(path + ": not a binary PGM/PPM file");
    size_t maxval = 0;
    in >> img.w >> img.h >> maxval;
    if (!in.good() || maxval != 255) throw IoError(path + ": unsupported PNM header");
    in.get(); // single whitespace after the header
    std::vector<unsigned char> bytes(img.h * img.w * img.c);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!in.good()) throw IoError(path + ": truncated pixel data");
    img.hwc.resize(bytes.size());
    for (size_t i = 0; i < bytes.size(); ++i) img.hwc[i] = bytes[i] / 255.0;
    return img;
}

} // namespace pmae
