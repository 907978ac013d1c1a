#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "pmae/errors.hpp"
#include "pmae/pipeline.hpp"

using namespace pmae;

namespace {

std::string temp_path(const std::string& stem) {
    return "/tmp/pmae_pipe_" + std::to_string(::getpid()) + "_" + stem;
}

std::string file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Dataset make_dataset(size_t n, size_t h, size_t w, size_t c, size_t num_classes,
                     uint64_t seed) {
    Dataset ds;
    ds.name = "toy";
    ds.split = "train";
    ds.n = n;
    ds.h = h;
    ds.w = w;
    ds.c = c;
    ds.num_classes = num_classes;
    Rng rng(seed);
    ds.pixels.resize(n * h * w * c);
    for (auto& p : ds.pixels) p = static_cast<float>(rng.uniform());
    ds.labels.resize(n);
    for (size_t i = 0; i < n; ++i) ds.labels[i] = static_cast<int>(i % num_classes);
    ds.compute_channel_stats();
    return ds;
}

VitConfig tiny_vit() {
    VitConfig c;
    c.image_h = 8;
    c.image_w = 8;
    c.channels = 1;
    c.patch_px = 4;
    c.enc_hidden = 16;
    c.enc_heads = 2;
    c.enc_mlp = 32;
    c.enc_depth = 1;
    c.dec_hidden = 8;
    c.dec_heads = 2;
    c.dec_mlp = 16;
    c.dec_depth = 1;
    return c;
}

Tensor grad_param(const Shape& shape, double value, double grad) {
    std::vector<double> data(shape_numel(shape), value);
    Tensor t = Tensor::from_data(shape, std::move(data));
    t.set_requires_grad(true);
    t.grad_mut().assign(t.numel(), grad);
    return t;
}

} // namespace

TEST_CASE("warmup then half-cosine schedule hits its landmarks") {
    LrSchedule s{2.0, 10, 100};
    CHECK(s.at(0) == 0.0);
    CHECK(s.at(5) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(s.at(9) == doctest::Approx(1.8).epsilon(1e-15));
    CHECK(s.at(10) == doctest::Approx(2.0).epsilon(1e-15));
    CHECK(s.at(55) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(s.at(99) == doctest::Approx(2.0 * 0.5 * (1.0 + std::cos(M_PI * 89.0 / 90.0)))
                          .epsilon(1e-12));
    CHECK(s.at(100) == 0.0);
    CHECK(s.at(100000) == 0.0);

    LrSchedule no_warmup{1.0, 0, 10};
    CHECK(no_warmup.at(0) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(no_warmup.at(5) == doctest::Approx(0.5).epsilon(1e-12));

    LrSchedule empty{1.0, 0, 0};
    CHECK(empty.at(0) == 0.0);
}

TEST_CASE("adamw step matches the hand-computed update") {
    NamedTensors params;
    params.emplace_back("w", grad_param({2, 2}, 1.0, 1.0));
    OptimizerConfig cfg;
    Optimizer opt(cfg, params);

    opt.step(params, 0.1);
    // mhat = vhat = 1 exactly on every step with a constant unit gradient,
    // so each step subtracts lr / (1 + eps)
    const double delta = 0.1 / (1.0 + cfg.eps);
    for (double v : params[0].second.data()) {
        CHECK(v == doctest::Approx(1.0 - delta).epsilon(1e-15));
    }
    params[0].second.grad_mut().assign(4, 1.0);
    opt.step(params, 0.1);
    for (double v : params[0].second.data()) {
        CHECK(v == doctest::Approx(1.0 - 2.0 * delta).epsilon(1e-14));
    }
    CHECK(opt.steps_taken() == 2);
}

TEST_CASE("sgd momentum accumulates velocity") {
    NamedTensors params;
    params.emplace_back("w", grad_param({1, 1}, 0.0, 1.0));
    OptimizerConfig cfg;
    cfg.algo = OptimizerConfig::Algo::SgdMomentum;
    cfg.momentum = 0.9;
    Optimizer opt(cfg, params);

    opt.step(params, 0.1);
    CHECK(params[0].second.data()[0] == doctest::Approx(-0.1).epsilon(1e-15));
    params[0].second.grad_mut().assign(1, 1.0);
    opt.step(params, 0.1);
    CHECK(params[0].second.data()[0] == doctest::Approx(-0.29).epsilon(1e-14));
}

TEST_CASE("weight decay shrinks matrices and spares vectors") {
    NamedTensors params;
    params.emplace_back("w", grad_param({2, 2}, 1.0, 0.0));
    params.emplace_back("b", grad_param({2}, 1.0, 0.0));
    OptimizerConfig cfg;
    cfg.weight_decay = 0.5;
    Optimizer opt(cfg, params);
    opt.step(params, 0.1);
    for (double v : params[0].second.data()) {
        CHECK(v == doctest::Approx(0.95).epsilon(1e-15));
    }
    for (double v : params[1].second.data()) CHECK(v == 1.0);
}

TEST_CASE("non-finite gradients abort the step before any mutation") {
    NamedTensors params;
    params.emplace_back("fine", grad_param({2, 2}, 1.0, 1.0));
    params.emplace_back("broken", grad_param({2}, 3.0, 0.0));
    params[1].second.grad_mut()[1] = std::numeric_limits<double>::infinity();
    OptimizerConfig cfg;
    Optimizer opt(cfg, params);
    CHECK_THROWS_WITH_AS(opt.step(params, 0.1),
                         doctest::Contains("non-finite gradient in broken"), NonFiniteError);
    for (double v : params[0].second.data()) CHECK(v == 1.0);
    for (double v : params[1].second.data()) CHECK(v == 3.0);
    CHECK(opt.steps_taken() == 0);

    NamedTensors other;
    other.emplace_back("w", grad_param({2, 2}, 1.0, 1.0));
    other.emplace_back("b", grad_param({2}, 1.0, 1.0));
    other.emplace_back("extra", grad_param({2}, 1.0, 1.0));
    CHECK_THROWS_AS(opt.step(other, 0.1), ShapeError);
}

TEST_CASE("normalization applies the train channel statistics") {
    Dataset ds = make_dataset(3, 2, 2, 2, 2, 11);
    Tensor img = normalize_image(ds, 1);
    CHECK(img.shape() == Shape{2, 2, 2});
    const size_t base = 1 * ds.image_dim();
    for (size_t ch = 0; ch < 2; ++ch) {
        for (size_t y = 0; y < 2; ++y) {
            for (size_t x = 0; x < 2; ++x) {
                const double raw = ds.pixels[base + (y * 2 + x) * 2 + ch];
                const double want = (raw - ds.channel_mean[ch]) / ds.channel_std[ch];
                CHECK(img.data()[ch * 4 + y * 2 + x] == doctest::Approx(want).epsilon(1e-15));
            }
        }
    }
}

TEST_CASE("identity augment settings reproduce the normalized image") {
    Dataset ds = make_dataset(2, 6, 6, 1, 2, 3);
    AugmentConfig id;
    id.scale_lo = 1.0;
    id.scale_hi = 1.0;
    id.aspect_lo = 1.0;
    id.aspect_hi = 1.0;
    id.hflip_prob = 0.0;
    Rng rng(5);
    Tensor aug = augment_image(rng, ds, 0, id);
    Tensor plain = normalize_image(ds, 0);
    REQUIRE(aug.shape() == plain.shape());
    for (size_t i = 0; i < aug.numel(); ++i) CHECK(aug.data()[i] == plain.data()[i]);

    id.hflip_prob = 1.0;
    Rng rng2(5);
    Tensor flipped = augment_image(rng2, ds, 0, id);
    for (size_t y = 0; y < 6; ++y) {
        for (size_t x = 0; x < 6; ++x) {
            CHECK(flipped.data()[y * 6 + x] == plain.data()[y * 6 + (5 - x)]);
        }
    }
}

TEST_CASE("augmentation is deterministic in the generator state") {
    Dataset ds = make_dataset(4, 8, 8, 3, 2, 9);
    AugmentConfig cfg;
    Rng a(123), b(123), c(124);
    Tensor ta = augment_image(a, ds, 2, cfg);
    Tensor tb = augment_image(b, ds, 2, cfg);
    Tensor tc = augment_image(c, ds, 2, cfg);
    CHECK(ta.shape() == Shape{3, 8, 8});
    bool same = true, differs = false;
    for (size_t i = 0; i < ta.numel(); ++i) {
        same = same && ta.data()[i] == tb.data()[i];
        differs = differs || ta.data()[i] != tc.data()[i];
    }
    CHECK(same);
    CHECK(differs);

    AugmentConfig off;
    off.enabled = false;
    Rng d(1);
    Tensor plain = augment_image(d, ds, 2, off);
    Tensor want = normalize_image(ds, 2);
    for (size_t i = 0; i < want.numel(); ++i) CHECK(plain.data()[i] == want.data()[i]);
}

TEST_CASE("metrics files keep the fixed header and empty accuracy") {
    const std::string path = temp_path("metrics.csv");
    {
        MetricsWriter w(path);
        MetricsRow r;
        r.epoch = 1;
        r.phase = "pretrain";
        r.loss = 0.5;
        r.lr = 0.001;
        r.mask_ratio_mean = 0.75;
        r.seed = 42;
        w.row(r);
        r.epoch = 2;
        r.accuracy = 0.25;
        w.row(r);
    }
    {
        MetricsWriter w(path, true);
        MetricsRow r;
        r.epoch = 3;
        r.phase = "probe";
        r.loss = 1.25;
        r.accuracy = 1.0;
        r.seed = 42;
        w.row(r);
    }
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    CHECK(line == "epoch,phase,loss,accuracy,lr,mask_ratio_mean,seconds,seed");
    std::getline(in, line);
    CHECK(line == "1,pretrain,0.5,,0.001,0.75,0.000,42");
    std::getline(in, line);
    CHECK(line == "2,pretrain,0.5,0.25,0.001,0.75,0.000,42");
    std::getline(in, line);
    CHECK(line == "3,probe,1.25,1,0,0,0.000,42");
    CHECK(!std::getline(in, line));
    std::remove(path.c_str());
}

TEST_CASE("model checkpoints are self-contained round trips") {
    VitConfig vc = tiny_vit();
    VitModel model(vc, 21);
    const std::string path = temp_path("model.pmae");
    const uint64_t seed = 0xDEADBEEFCAFEBABEull;
    save_model_checkpoint(path, model, {0.25, 0.5, 0.75}, {1.0, 2.0, 3.0}, seed, DType::F64);
    ModelCheckpoint ck = load_model_checkpoint(path);
    CHECK(ck.vit.image_h == vc.image_h);
    CHECK(ck.vit.patch_px == vc.patch_px);
    CHECK(ck.vit.enc_hidden == vc.enc_hidden);
    CHECK(ck.vit.dec_depth == vc.dec_depth);
    CHECK(ck.seed == seed);
    CHECK(ck.precision == DType::F64);
    CHECK(ck.norm_mean == std::vector<double>{0.25, 0.5, 0.75});
    CHECK(ck.norm_std == std::vector<double>{1.0, 2.0, 3.0});
    REQUIRE(ck.params.size() == model.params().size());
    for (size_t i = 0; i < ck.params.size(); ++i) {
        CHECK(ck.params[i].first == model.params()[i].first);
        CHECK(ck.params[i].second.data() == model.params()[i].second.data());
    }
    VitModel revived(ck.vit, 0);
    revived.load_params(ck.params);
    std::remove(path.c_str());
}

TEST_CASE("features are identical across batch sizes") {
    Dataset ds = make_dataset(7, 8, 8, 1, 2, 31);
    VitModel model(tiny_vit(), 4);
    AugmentConfig aug;
    Tensor a = extract_features(model, ds, 3, false, aug, 0);
    Tensor b = extract_features(model, ds, 7, false, aug, 0);
    Tensor c = extract_features(model, ds, 2, true, aug, 9);
    Tensor d = extract_features(model, ds, 5, true, aug, 9);
    CHECK(a.shape() == Shape{7, 16});
    CHECK(a.data() == b.data());
    CHECK(c.data() == d.data());
    bool augments_differ = false;
    for (size_t i = 0; i < a.numel(); ++i) {
        augments_differ = augments_differ || a.data()[i] != c.data()[i];
    }
    CHECK(augments_differ);

    // the decoder never touches CLS features
    for (auto& [name, p] : model.params()) {
        if (name.rfind("dec.", 0) == 0) {
            for (auto& v : p.data_mut()) v += 1.0;
        }
    }
    Tensor e = extract_features(model, ds, 7, false, aug, 0);
    CHECK(e.data() == a.data());
}

namespace {

// two gaussian bumps on a line, classes split by sign
Tensor blob_features(size_t n, uint64_t seed, std::vector<int>* labels) {
    Rng rng(seed);
    std::vector<double> data(n * 4);
    labels->resize(n);
    for (size_t i = 0; i < n; ++i) {
        const int y = static_cast<int>(i % 2);
        (*labels)[i] = y;
        const double center = y == 0 ? -1.0 : 1.0;
        data[i * 4 + 0] = center + 0.1 * rng.normal();
        data[i * 4 + 1] = -center + 0.1 * rng.normal();
        data[i * 4 + 2] = 0.05 * rng.normal();
        data[i * 4 + 3] = 0.05 * rng.normal();
    }
    return Tensor::from_data({n, 4}, std::move(data));
}

} // namespace

TEST_CASE("linear probe separates linearly separable features") {
    std::vector<int> train_y, test_y;
    Tensor train_x = blob_features(256, 1, &train_y);
    Tensor test_x = blob_features(128, 2, &test_y);
    ProbeConfig cfg;
    cfg.epochs = 30;
    cfg.warmup_epochs = 3;
    cfg.batch_size = 64;
    Probe probe = train_probe(train_x, train_y, 2, cfg, 77);
    CHECK(score_probe(probe, train_x, train_y) == 1.0);
    CHECK(score_probe(probe, test_x, test_y) == 1.0);

    ProbeConfig mlp = cfg;
    mlp.kind = ProbeConfig::Kind::Mlp;
    Probe probe2 = train_probe(train_x, train_y, 2, mlp, 77);
    CHECK(score_probe(probe2, test_x, test_y) == 1.0);
}

TEST_CASE("shuffled labels collapse the probe to chance") {
    // ten balanced classes, featureless gaussians: nothing to learn
    const size_t n = 500, dim = 16;
    Rng rng(5);
    auto noise = [&](uint64_t seed) {
        Rng r(seed);
        std::vector<double> d(n * dim);
        for (auto& v : d) v = r.normal();
        return Tensor::from_data({n, dim}, std::move(d));
    };
    std::vector<int> train_y(n), test_y(n);
    for (size_t i = 0; i < n; ++i) {
        train_y[i] = static_cast<int>(i % 10);
        test_y[i] = static_cast<int>(i % 10);
    }
    rng.shuffle(train_y);
    ProbeConfig cfg;
    cfg.epochs = 30;
    cfg.warmup_epochs = 3;
    cfg.batch_size = 100;
    Probe probe = train_probe(noise(31), train_y, 10, cfg, 8);
    const double acc = score_probe(probe, noise(32), test_y);
    CHECK(std::abs(acc - 0.1) < 0.05);
}

TEST_CASE("duplicating every training point leaves the probe unchanged") {
    // full-batch training with the peak rate held fixed, so the duplicated
    // set yields the same mean gradient every step
    std::vector<int> train_y, test_y;
    Tensor train_x = blob_features(64, 21, &train_y);
    Tensor test_x = blob_features(64, 22, &test_y);
    const size_t dim = 4;
    std::vector<double> doubled(2 * 64 * dim);
    std::vector<int> doubled_y(128);
    for (size_t i = 0; i < 128; ++i) {
        const size_t src = i % 64;
        doubled_y[i] = train_y[src];
        for (size_t j = 0; j < dim; ++j) {
            doubled[i * dim + j] = train_x.data()[src * dim + j];
        }
    }
    Tensor train_x2 = Tensor::from_data({128, dim}, std::move(doubled));
    ProbeConfig cfg;
    cfg.epochs = 20;
    cfg.warmup_epochs = 2;
    cfg.batch_size = 64;
    cfg.base_lr = 0.1;
    ProbeConfig cfg2 = cfg;
    cfg2.batch_size = 128;
    cfg2.base_lr = 0.05;
    Probe a = train_probe(train_x, train_y, 2, cfg, 77);
    Probe b = train_probe(train_x2, doubled_y, 2, cfg2, 77);
    const double acc_a = score_probe(a, test_x, test_y);
    const double acc_b = score_probe(b, test_x, test_y);
    CHECK(std::abs(acc_a - acc_b) < 1e-6);
}

TEST_CASE("degenerate probe inputs are rejected") {
    std::vector<int> y(10, 0);
    Tensor x = Tensor::from_data({10, 2}, std::vector<double>(20, 1.0));
    ProbeConfig cfg;
    CHECK_THROWS_WITH_AS(train_probe(x, y, 2, cfg, 0), doctest::Contains("single-class"),
                         ConfigError);
    y[0] = 5;
    CHECK_THROWS_AS(train_probe(x, y, 2, cfg, 0), ConfigError);
    y[0] = 1;
    std::vector<int> short_y(9, 0);
    CHECK_THROWS_AS(train_probe(x, short_y, 2, cfg, 0), ShapeError);
    CHECK_THROWS_AS(train_probe(x, y, 1, cfg, 0), ConfigError);
}

TEST_CASE("nearest neighbors are perfect on two blobs") {
    std::vector<int> train_y, test_y;
    std::vector<double> train_d, test_d;
    for (size_t i = 0; i < 30; ++i) {
        const int y = static_cast<int>(i % 2);
        const double cx = y == 0 ? 0.0 : 10.0;
        train_d.push_back(cx + 0.01 * static_cast<double>(i));
        train_d.push_back(cx - 0.01 * static_cast<double>(i));
        train_y.push_back(y);
    }
    for (size_t i = 0; i < 10; ++i) {
        const int y = static_cast<int>(i % 2);
        const double cx = y == 0 ? 0.0 : 10.0;
        test_d.push_back(cx + 0.3);
        test_d.push_back(cx - 0.2);
        test_y.push_back(y);
    }
    Tensor train_x = Tensor::from_data({30, 2}, std::move(train_d));
    Tensor test_x = Tensor::from_data({10, 2}, std::move(test_d));
    KnnResult res = knn_eval(train_x, train_y, test_x, test_y, 2, 2, 20);
    CHECK(res.accuracy == 1.0);
    CHECK(res.k == 2);
    REQUIRE(res.per_k.size() == 19);
    for (double acc : res.per_k) CHECK(acc == 1.0);

    CHECK_THROWS_AS(knn_eval(train_x, train_y, test_x, test_y, 2, 2, 31), ConfigError);
    CHECK_THROWS_AS(knn_eval(train_x, train_y, test_x, test_y, 2, 5, 4), ConfigError);
}

TEST_CASE("split votes go to the smaller class index") {
    // the two training points are equidistant from the probe, so k = 2 ties
    Tensor train_x = Tensor::from_data({2, 2}, {1.0, 0.0, 0.0, 1.0});
    std::vector<int> train_y = {1, 0};
    Tensor test_x = Tensor::from_data({1, 2}, {0.0, 0.0});
    std::vector<int> zero = {0}, one = {1};
    CHECK(knn_eval(train_x, train_y, test_x, zero, 2, 2, 2).accuracy == 1.0);
    CHECK(knn_eval(train_x, train_y, test_x, one, 2, 2, 2).accuracy == 0.0);
}

TEST_CASE("a duplicated training point dominates its own query") {
    Tensor train_x = Tensor::from_data({4, 1}, {5.0, 5.0, -40.0, 60.0});
    std::vector<int> train_y = {1, 1, 0, 0};
    Tensor test_x = Tensor::from_data({1, 1}, {5.0});
    std::vector<int> test_y = {1};
    KnnResult res = knn_eval(train_x, train_y, test_x, test_y, 2, 2, 2);
    CHECK(res.accuracy == 1.0);
}

TEST_CASE("k equal to the whole train set votes the smallest class on balance") {
    Tensor train_x = Tensor::from_data({6, 1}, {0.0, 1.0, 2.0, 10.0, 11.0, 12.0});
    std::vector<int> train_y = {0, 0, 0, 1, 1, 1};
    Tensor test_x = Tensor::from_data({2, 1}, {1.0, 11.0});
    std::vector<int> test_y = {0, 1};
    KnnResult res = knn_eval(train_x, train_y, test_x, test_y, 2, 2, 6);
    // every vote is 3-3 at k = 6, so both queries resolve to class 0
    CHECK(res.per_k.back() == 0.5);
    CHECK(res.per_k.front() == 1.0);
}

namespace {

PretrainConfig smoke_config(PretrainConfig::Method method, LossKind kind,
                            const std::string& out_dir) {
    PretrainConfig cfg;
    cfg.method = method;
    cfg.loss.kind = kind;
    cfg.epochs = 3;
    cfg.warmup_epochs = 1;
    cfg.batch_size = 4;
    cfg.base_lr = 1e-3;
    cfg.seed = 7;
    cfg.out_dir = out_dir;
    return cfg;
}

} // namespace

TEST_CASE("pretraining twice from one seed is bitwise identical") {
    Dataset ds = make_dataset(8, 8, 8, 1, 2, 17);
    const std::string dir_a = temp_path("runA");
    const std::string dir_b = temp_path("runB");
    for (const auto& d : {dir_a, dir_b}) {
        std::string cmd = "mkdir -p " + d;
        REQUIRE(std::system(cmd.c_str()) == 0);
    }
    PretrainResult ra, rb;
    {
        VitModel model(tiny_vit(), 5);
        MetricsWriter mw(dir_a + "/metrics.csv");
        ra = pretrain(model, ds, nullptr, smoke_config(PretrainConfig::Method::Mae,
                                                       LossKind::Mae, dir_a),
                      &mw);
    }
    {
        VitModel model(tiny_vit(), 5);
        MetricsWriter mw(dir_b + "/metrics.csv");
        rb = pretrain(model, ds, nullptr, smoke_config(PretrainConfig::Method::Mae,
                                                       LossKind::Mae, dir_b),
                      &mw);
    }
    REQUIRE(ra.epoch_losses.size() == 3);
    CHECK(ra.epoch_losses == rb.epoch_losses);
    for (double l : ra.epoch_losses) CHECK(std::isfinite(l));
    for (double r : ra.epoch_mask_ratio) CHECK(r == 0.75);
    CHECK(file_bytes(ra.final_checkpoint) == file_bytes(rb.final_checkpoint));
    CHECK(file_bytes(dir_a + "/metrics.csv") == file_bytes(dir_b + "/metrics.csv"));
}

TEST_CASE("component pretraining runs against a fitted basis") {
    Dataset ds = make_dataset(8, 8, 8, 1, 2, 19);
    PcaBasis basis = fit_basis_of(ds);
    CHECK(basis.dim == 64);
    VitModel model(tiny_vit(), 5);
    PretrainConfig cfg = smoke_config(PretrainConfig::Method::Pmae, LossKind::PmaePc, "");
    cfg.epochs = 2;
    PretrainResult res = pretrain(model, ds, &basis, cfg, nullptr);
    REQUIRE(res.epoch_losses.size() == 2);
    for (double l : res.epoch_losses) CHECK(std::isfinite(l));
    for (double r : res.epoch_mask_ratio) {
        CHECK(r >= 0.75);
        CHECK(r < 1.0);
    }
    CHECK(res.final_checkpoint.empty());

    cfg.loss.kind = LossKind::PmaePixel;
    VitModel model2(tiny_vit(), 5);
    PretrainResult res2 = pretrain(model2, ds, &basis, cfg, nullptr);
    for (double l : res2.epoch_losses) CHECK(std::isfinite(l));
}

TEST_CASE("randomized ratios average near one half over many batches") {
    // enough images for a fine spectrum, so greedy overshoot stays small
    Dataset ds = make_dataset(80, 8, 8, 1, 2, 53);
    PcaBasis basis = fit_basis_of(ds);
    VitModel model(tiny_vit(), 5);
    PretrainConfig cfg = smoke_config(PretrainConfig::Method::Pmae, LossKind::PmaePc, "");
    cfg.ratio = RatioPolicy::uniform(0.0, 1.0);
    cfg.epochs = 5; // 20 batches each, 100 draws total
    cfg.warmup_epochs = 1;
    PretrainResult res = pretrain(model, ds, &basis, cfg, nullptr);
    double mean = 0.0;
    for (double r : res.epoch_mask_ratio) mean += r;
    mean /= static_cast<double>(res.epoch_mask_ratio.size());
    CHECK(std::abs(mean - 0.5) < 0.05);
}

TEST_CASE("mismatched method and loss configurations are rejected") {
    Dataset ds = make_dataset(8, 8, 8, 1, 2, 23);
    VitModel model(tiny_vit(), 5);
    PretrainConfig cfg = smoke_config(PretrainConfig::Method::Pmae, LossKind::PmaePc, "");
    CHECK_THROWS_WITH_AS(pretrain(model, ds, nullptr, cfg, nullptr),
                         doctest::Contains("requires a fitted basis"), ConfigError);
    PcaBasis basis = fit_basis_of(ds);
    cfg.loss.kind = LossKind::Mae;
    CHECK_THROWS_AS(pretrain(model, ds, &basis, cfg, nullptr), ConfigError);
    PretrainConfig cfg2 = smoke_config(PretrainConfig::Method::Mae, LossKind::PmaePc, "");
    CHECK_THROWS_AS(pretrain(model, ds, nullptr, cfg2, nullptr), ConfigError);
    Dataset wide = make_dataset(4, 8, 16, 1, 2, 29);
    PretrainConfig cfg3 = smoke_config(PretrainConfig::Method::Mae, LossKind::Mae, "");
    CHECK_THROWS_AS(pretrain(model, wide, nullptr, cfg3, nullptr), ConfigError);
}

TEST_CASE("f32 storage snaps parameters after every step") {
    Dataset ds = make_dataset(4, 8, 8, 1, 2, 37);
    const std::string dir = temp_path("f32run");
    REQUIRE(std::system(("mkdir -p " + dir).c_str()) == 0);
    VitModel model(tiny_vit(), 5);
    PretrainConfig cfg = smoke_config(PretrainConfig::Method::Mae, LossKind::Mae, dir);
    cfg.epochs = 1;
    cfg.precision = DType::F32;
    pretrain(model, ds, nullptr, cfg, nullptr);
    for (const auto& [name, p] : model.params()) {
        for (double v : p.data()) {
            CHECK(v == static_cast<double>(static_cast<float>(v)));
        }
    }
    ModelCheckpoint ck = load_model_checkpoint(dir + "/ckpt_final.pmae");
    CHECK(ck.precision == DType::F32);
}

TEST_CASE("snapshot cadence writes intermediate checkpoints") {
    Dataset ds = make_dataset(4, 8, 8, 1, 2, 41);
    const std::string dir = temp_path("cadence");
    REQUIRE(std::system(("mkdir -p " + dir).c_str()) == 0);
    VitModel model(tiny_vit(), 5);
    PretrainConfig cfg = smoke_config(PretrainConfig::Method::Mae, LossKind::Mae, dir);
    cfg.epochs = 4;
    cfg.ckpt_every = 2;
    pretrain(model, ds, nullptr, cfg, nullptr);
    CHECK(std::ifstream(dir + "/ckpt_epoch2.pmae").good());
    // the final epoch is covered by ckpt_final, not a cadence snapshot
    CHECK(!std::ifstream(dir + "/ckpt_epoch4.pmae").good());
    CHECK(std::ifstream(dir + "/ckpt_final.pmae").good());
}

TEST_CASE("finetuning runs end to end and is reproducible") {
    Dataset train = make_dataset(8, 8, 8, 1, 2, 43);
    Dataset test = make_dataset(6, 8, 8, 1, 2, 47);
    test.split = "test";
    test.channel_mean = train.channel_mean;
    test.channel_std = train.channel_std;
    FinetuneConfig cfg;
    cfg.epochs = 2;
    cfg.warmup_epochs = 1;
    cfg.batch_size = 4;
    double a, b;
    {
        VitModel model(tiny_vit(), 5);
        a = finetune(model, train, test, cfg, 13, nullptr);
    }
    {
        VitModel model(tiny_vit(), 5);
        b = finetune(model, train, test, cfg, 13, nullptr);
    }
    CHECK(a == b);
    CHECK(a >= 0.0);
    CHECK(a <= 1.0);
}
