#include "pmae/config.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "pmae/errors.hpp"

namespace pmae {

namespace {

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "1" || v == "true") return true;
    if (v == "0" || v == "false") return false;
    throw ConfigError(key + " wants 0/1 or true/false, got '" + v + "'");
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        size_t used = 0;
        const double d = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError(key + " wants a number, got '" + v + "'");
    }
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        size_t used = 0;
        const unsigned long long u = std::stoull(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return u;
    } catch (const std::exception&) {
        throw ConfigError(key + " wants a non-negative integer, got '" + v + "'");
    }
}

using Setter = std::function<void(RunConfig&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
    static const std::map<std::string, Setter> table = {
        {"data", [](RunConfig& c, const std::string& v) { c.data = v; }},
        {"data_dir", [](RunConfig& c, const std::string& v) { c.data_dir = v; }},
        {"train_path", [](RunConfig& c, const std::string& v) { c.train_path = v; }},
        {"test_path", [](RunConfig& c, const std::string& v) { c.test_path = v; }},
        {"synthetic_n_train",
         [](RunConfig& c, const std::string& v) {
             c.synth.n_train = parse_u64("synthetic_n_train", v);
         }},
        {"synthetic_n_test",
         [](RunConfig& c, const std::string& v) {
             c.synth.n_test = parse_u64("synthetic_n_test", v);
         }},
        {"synthetic_image_h",
         [](RunConfig& c, const std::string& v) {
             c.synth.image_h = parse_u64("synthetic_image_h", v);
         }},
        {"synthetic_classes",
         [](RunConfig& c, const std::string& v) {
             c.synth.num_classes = parse_u64("synthetic_classes", v);
         }},
        {"synthetic_noise_std",
         [](RunConfig& c, const std::string& v) {
             c.synth.noise_std = parse_double("synthetic_noise_std", v);
         }},
        {"data_seed",
         [](RunConfig& c, const std::string& v) { c.data_seed = parse_u64("data_seed", v); }},
        {"method", [](RunConfig& c, const std::string& v) { c.method = v; }},
        {"loss", [](RunConfig& c, const std::string& v) { c.loss = v; }},
        {"norm_pix",
         [](RunConfig& c, const std::string& v) { c.norm_pix = parse_bool("norm_pix", v); }},
        {"ratio", [](RunConfig& c, const std::string& v) { c.ratio = v; }},
        {"r", [](RunConfig& c, const std::string& v) { c.r = parse_double("r", v); }},
        {"r_lo", [](RunConfig& c, const std::string& v) { c.r_lo = parse_double("r_lo", v); }},
        {"r_hi", [](RunConfig& c, const std::string& v) { c.r_hi = parse_double("r_hi", v); }},
        {"basis", [](RunConfig& c, const std::string& v) { c.basis = v; }},
        {"fit_basis",
         [](RunConfig& c, const std::string& v) { c.fit_basis = parse_bool("fit_basis", v); }},
        {"patch", [](RunConfig& c, const std::string& v) { c.patch = parse_u64("patch", v); }},
        {"enc_hidden",
         [](RunConfig& c, const std::string& v) { c.enc_hidden = parse_u64("enc_hidden", v); }},
        {"enc_heads",
         [](RunConfig& c, const std::string& v) { c.enc_heads = parse_u64("enc_heads", v); }},
        {"enc_mlp",
         [](RunConfig& c, const std::string& v) { c.enc_mlp = parse_u64("enc_mlp", v); }},
        {"enc_depth",
         [](RunConfig& c, const std::string& v) { c.enc_depth = parse_u64("enc_depth", v); }},
        {"dec_hidden",
         [](RunConfig& c, const std::string& v) { c.dec_hidden = parse_u64("dec_hidden", v); }},
        {"dec_heads",
         [](RunConfig& c, const std::string& v) { c.dec_heads = parse_u64("dec_heads", v); }},
        {"dec_mlp",
         [](RunConfig& c, const std::string& v) { c.dec_mlp = parse_u64("dec_mlp", v); }},
        {"dec_depth",
         [](RunConfig& c, const std::string& v) { c.dec_depth = parse_u64("dec_depth", v); }},
        {"base_lr",
         [](RunConfig& c, const std::string& v) { c.base_lr = parse_double("base_lr", v); }},
        {"beta1", [](RunConfig& c, const std::string& v) { c.beta1 = parse_double("beta1", v); }},
        {"beta2", [](RunConfig& c, const std::string& v) { c.beta2 = parse_double("beta2", v); }},
        {"weight_decay",
         [](RunConfig& c, const std::string& v) {
             c.weight_decay = parse_double("weight_decay", v);
         }},
        {"batch", [](RunConfig& c, const std::string& v) { c.batch = parse_u64("batch", v); }},
        {"epochs", [](RunConfig& c, const std::string& v) { c.epochs = parse_u64("epochs", v); }},
        {"warmup", [](RunConfig& c, const std::string& v) { c.warmup = parse_u64("warmup", v); }},
        {"augment",
         [](RunConfig& c, const std::string& v) { c.augment = parse_bool("augment", v); }},
        {"scale_lo",
         [](RunConfig& c, const std::string& v) { c.scale_lo = parse_double("scale_lo", v); }},
        {"scale_hi",
         [](RunConfig& c, const std::string& v) { c.scale_hi = parse_double("scale_hi", v); }},
        {"aspect_lo",
         [](RunConfig& c, const std::string& v) { c.aspect_lo = parse_double("aspect_lo", v); }},
        {"aspect_hi",
         [](RunConfig& c, const std::string& v) { c.aspect_hi = parse_double("aspect_hi", v); }},
        {"hflip", [](RunConfig& c, const std::string& v) { c.hflip = parse_double("hflip", v); }},
        {"seed", [](RunConfig& c, const std::string& v) { c.seed = parse_u64("seed", v); }},
        {"out", [](RunConfig& c, const std::string& v) { c.out = v; }},
        {"ckpt_every",
         [](RunConfig& c, const std::string& v) { c.ckpt_every = parse_u64("ckpt_every", v); }},
        {"precision", [](RunConfig& c, const std::string& v) { c.precision = v; }},
        {"log_wall_time",
         [](RunConfig& c, const std::string& v) {
             c.log_wall_time = parse_bool("log_wall_time", v);
         }},
    };
    return table;
}

} // namespace

void apply_override(RunConfig& cfg, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) {
        throw ConfigError("expected key=value, got '" + assignment + "'");
    }
    const std::string key = trim(assignment.substr(0, eq));
    const std::string value = trim(assignment.substr(eq + 1));
    const auto it = setters().find(key);
    if (it == setters().end()) throw ConfigError("unknown config key '" + key + "'");
    it->second(cfg, value);
}

RunConfig parse_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in.good()) throw IoError("cannot open config file " + path);
    RunConfig cfg;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        try {
            apply_override(cfg, t);
        } catch (const ConfigError& e) {
            throw ConfigError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return cfg;
}

void RunConfig::validate() const {
    if (data != "synthetic" && data != "cifar10" && data != "pmds") {
        throw ConfigError("data must be synthetic, cifar10, or pmds, got '" + data + "'");
    }
    if (data == "cifar10" && data_dir.empty()) {
        throw ConfigError("data=cifar10 needs data_dir");
    }
    if (data == "pmds" && (train_path.empty() || test_path.empty())) {
        throw ConfigError("data=pmds needs train_path and test_path");
    }
    if (data == "synthetic") synth.validate();
    if (method != "mae" && method != "pmae") {
        throw ConfigError("method must be mae or pmae, got '" + method + "'");
    }
    const std::string l = loss.empty() ? (method == "mae" ? "mae" : "pmae_pc") : loss;
    if (l != "mae" && l != "pmae_pc" && l != "pmae_pixel") {
        throw ConfigError("loss must be mae, pmae_pc, or pmae_pixel, got '" + l + "'");
    }
    if (method == "mae") {
        if (l != "mae") throw ConfigError("method=mae pairs with loss=mae, got '" + l + "'");
        if (!basis.empty() || fit_basis) {
            throw ConfigError("method=mae forbids component-mask settings (basis, fit_basis)");
        }
    } else {
        if (l == "mae") throw ConfigError("method=pmae needs a component loss, got '" + l + "'");
        if (basis.empty() && !fit_basis) {
            throw ConfigError("method=pmae requires basis=<path> or fit_basis=1");
        }
        // norm_pix is a pixel-regime knob; it is inert here
    }
    if (ratio != "std" && ratio != "fixed" && ratio != "uniform") {
        throw ConfigError("ratio must be std, fixed, or uniform, got '" + ratio + "'");
    }
    if (r < 0.0 || r > 1.0) throw ConfigError("r must lie in [0, 1]");
    if (ratio == "uniform" && !(0.0 <= r_lo && r_lo <= r_hi && r_hi <= 1.0)) {
        throw ConfigError("uniform ratio needs 0 <= r_lo <= r_hi <= 1");
    }
    if (precision != "f32" && precision != "f64") {
        throw ConfigError("precision must be f32 or f64, got '" + precision + "'");
    }
    if (epochs == 0 || batch == 0) {
        throw ConfigError("epochs and batch must be positive");
    }
    if (warmup > epochs) throw ConfigError("warmup exceeds the epoch budget");
    if (!(scale_lo > 0.0 && scale_lo <= scale_hi && scale_hi <= 1.0)) {
        throw ConfigError("crop scale needs 0 < scale_lo <= scale_hi <= 1");
    }
    if (!(aspect_lo > 0.0 && aspect_lo <= aspect_hi)) {
        throw ConfigError("crop aspect needs 0 < aspect_lo <= aspect_hi");
    }
    if (hflip < 0.0 || hflip > 1.0) throw ConfigError("hflip must lie in [0, 1]");
}

std::string render_run_config(const RunConfig& cfg) {
    std::ostringstream out;
    out.precision(17);
    out << "data=" << cfg.data << "\n";
    if (!cfg.data_dir.empty()) out << "data_dir=" << cfg.data_dir << "\n";
    if (!cfg.train_path.empty()) out << "train_path=" << cfg.train_path << "\n";
    if (!cfg.test_path.empty()) out << "test_path=" << cfg.test_path << "\n";
    if (cfg.data == "synthetic") {
        out << "synthetic_n_train=" << cfg.synth.n_train << "\n";
        out << "synthetic_n_test=" << cfg.synth.n_test << "\n";
        out << "synthetic_image_h=" << cfg.synth.image_h << "\n";
        out << "synthetic_classes=" << cfg.synth.num_classes << "\n";
        out << "synthetic_noise_std=" << cfg.synth.noise_std << "\n";
        out << "data_seed=" << cfg.data_seed << "\n";
    }
    out << "method=" << cfg.method << "\n";
    out << "loss=" << (cfg.loss.empty() ? (cfg.method == "mae" ? "mae" : "pmae_pc") : cfg.loss)
        << "\n";
    out << "norm_pix=" << (cfg.norm_pix ? 1 : 0) << "\n";
    out << "ratio=" << cfg.ratio << "\n";
    out << "r=" << cfg.r << "\n";
    out << "r_lo=" << cfg.r_lo << "\n";
    out << "r_hi=" << cfg.r_hi << "\n";
    if (!cfg.basis.empty()) out << "basis=" << cfg.basis << "\n";
    out << "fit_basis=" << (cfg.fit_basis ? 1 : 0) << "\n";
    out << "patch=" << cfg.patch << "\n";
    out << "enc_hidden=" << cfg.enc_hidden << "\n";
    out << "enc_heads=" << cfg.enc_heads << "\n";
    out << "enc_mlp=" << cfg.enc_mlp << "\n";
    out << "enc_depth=" << cfg.enc_depth << "\n";
    out << "dec_hidden=" << cfg.dec_hidden << "\n";
    out << "dec_heads=" << cfg.dec_heads << "\n";
    out << "dec_mlp=" << cfg.dec_mlp << "\n";
    out << "dec_depth=" << cfg.dec_depth << "\n";
    out << "base_lr=" << cfg.base_lr << "\n";
    out << "beta1=" << cfg.beta1 << "\n";
    out << "beta2=" << cfg.beta2 << "\n";
    out << "weight_decay=" << cfg.weight_decay << "\n";
    out << "batch=" << cfg.batch << "\n";
    out << "epochs=" << cfg.epochs << "\n";
    out << "warmup=" << cfg.warmup << "\n";
    out << "augment=" << (cfg.augment ? 1 : 0) << "\n";
    out << "scale_lo=" << cfg.scale_lo << "\n";
    out << "scale_hi=" << cfg.scale_hi << "\n";
    out << "aspect_lo=" << cfg.aspect_lo << "\n";
    out << "aspect_hi=" << cfg.aspect_hi << "\n";
    out << "hflip=" << cfg.hflip << "\n";
    out << "seed=" << cfg.seed << "\n";
    if (!cfg.out.empty()) out << "out=" << cfg.out << "\n";
    out << "ckpt_every=" << cfg.ckpt_every << "\n";
    out << "precision=" << cfg.precision << "\n";
    out << "log_wall_time=" << (cfg.log_wall_time ? 1 : 0) << "\n";
    return out.str();
}

DatasetPair build_datasets(const RunConfig& cfg) {
    cfg.validate();
    if (cfg.data == "cifar10") return load_cifar10_binary(cfg.data_dir);
    if (cfg.data == "pmds") {
        DatasetPair pair;
        pair.train = load_raw_tensor_dataset(cfg.train_path, "train");
        pair.test = load_raw_tensor_dataset(cfg.test_path, "test");
        pair.test.channel_mean = pair.train.channel_mean;
        pair.test.channel_std = pair.train.channel_std;
        return pair;
    }
    Rng rng = Rng::derive(cfg.data_seed, 555555, 0);
    SyntheticData data = synthetic_global_factors(rng, cfg.synth);
    return DatasetPair{std::move(data.train), std::move(data.test)};
}

VitConfig vit_config_of(const RunConfig& cfg, const Dataset& train) {
    VitConfig vc;
    vc.image_h = train.h;
    vc.image_w = train.w;
    vc.channels = train.c;
    vc.patch_px = cfg.patch;
    vc.enc_hidden = cfg.enc_hidden;
    vc.enc_heads = cfg.enc_heads;
    vc.enc_mlp = cfg.enc_mlp;
    vc.enc_depth = cfg.enc_depth;
    vc.dec_hidden = cfg.dec_hidden;
    vc.dec_heads = cfg.dec_heads;
    vc.dec_mlp = cfg.dec_mlp;
    vc.dec_depth = cfg.dec_depth;
    vc.validate();
    return vc;
}

PretrainConfig pretrain_config_of(const RunConfig& cfg) {
    cfg.validate();
    PretrainConfig pc;
    pc.method = cfg.method == "mae" ? PretrainConfig::Method::Mae : PretrainConfig::Method::Pmae;
    const std::string l = cfg.loss.empty() ? (cfg.method == "mae" ? "mae" : "pmae_pc") : cfg.loss;
    pc.loss.kind = l == "mae" ? LossKind::Mae
                              : (l == "pmae_pc" ? LossKind::PmaePc : LossKind::PmaePixel);
    pc.loss.norm_pix_targets = cfg.method == "mae" && cfg.norm_pix;
    if (cfg.ratio == "std") {
        pc.ratio = RatioPolicy::fixed(0.75);
    } else if (cfg.ratio == "fixed") {
        pc.ratio = RatioPolicy::fixed(cfg.r);
    } else {
        pc.ratio = RatioPolicy::uniform(cfg.r_lo, cfg.r_hi);
    }
    pc.optim.algo = OptimizerConfig::Algo::AdamW;
    pc.optim.beta1 = cfg.beta1;
    pc.optim.beta2 = cfg.beta2;
    pc.optim.weight_decay = cfg.weight_decay;
    pc.augment.enabled = cfg.augment;
    pc.augment.scale_lo = cfg.scale_lo;
    pc.augment.scale_hi = cfg.scale_hi;
    pc.augment.aspect_lo = cfg.aspect_lo;
    pc.augment.aspect_hi = cfg.aspect_hi;
    pc.augment.hflip_prob = cfg.hflip;
    pc.base_lr = cfg.base_lr;
    pc.batch_size = cfg.batch;
    pc.epochs = cfg.epochs;
    pc.warmup_epochs = cfg.warmup;
    pc.seed = cfg.seed;
    pc.precision = cfg.precision == "f32" ? DType::F32 : DType::F64;
    pc.ckpt_every = cfg.ckpt_every;
    pc.log_wall_time = cfg.log_wall_time;
    pc.out_dir = cfg.out;
    return pc;
}

} // namespace pmae
