#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "pmae/errors.hpp"
#include "pmae/masking.hpp"
#include "pmae/objectives.hpp"
#include "pmae/pca.hpp"
#include "pmae/rng.hpp"
#include "pmae/tensor.hpp"

using namespace pmae;

namespace {

PatchMask make_mask(size_t gh, size_t gw, std::vector<uint8_t> bits) {
    PatchMask m;
    m.grid_h = gh;
    m.grid_w = gw;
    m.masked = std::move(bits);
    return m;
}

// V = identity, mean = 0
PcaBasis axis_basis() {
    Tensor x = Tensor::from_data({4, 2}, {1, 0, -1, 0, 0, 0.5, 0, -0.5});
    return fit_pca(x);
}

Tensor rand_images(Rng& rng, size_t b, size_t c, size_t h, size_t w) {
    std::vector<double> v(b * c * h * w);
    for (auto& x : v) x = rng.normal();
    return Tensor::from_data({b, c, h, w}, std::move(v));
}

} // namespace

TEST_CASE("loss config rejects normalized targets outside the pixel regime") {
    LossConfig cfg;
    cfg.kind = LossKind::Mae;
    cfg.norm_pix_targets = true;
    CHECK_NOTHROW(cfg.validate());
    cfg.kind = LossKind::PmaePc;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.kind = LossKind::PmaePixel;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("pixel loss on a single fully masked patch is the mean squared error") {
    Tensor x = Tensor::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor pred = Tensor::from_data({1, 1, 2, 2}, {4, 5, 6, 7});
    std::vector<PatchMask> masks = {make_mask(1, 1, {1})};
    Tensor loss = mae_loss(pred, x, masks, false);
    CHECK(loss.numel() == 1);
    CHECK(loss.data()[0] == doctest::Approx(9.0).epsilon(1e-12));
}

TEST_CASE("visible pixels contribute nothing to the pixel loss") {
    Tensor x = Tensor::from_data({1, 1, 2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
    std::vector<PatchMask> masks = {make_mask(1, 2, {1, 0})};
    Tensor pred_a = Tensor::from_data({1, 1, 2, 4}, {2, 3, 4, 5, 6, 7, 8, 9});
    std::vector<double> mutated = pred_a.data();
    mutated[2] = 100; // visible patch pixel
    mutated[3] = -50;
    mutated[6] = 7e3;
    Tensor pred_b = Tensor::from_data({1, 1, 2, 4}, std::move(mutated));
    double la = mae_loss(pred_a, x, masks, false).data()[0];
    double lb = mae_loss(pred_b, x, masks, false).data()[0];
    CHECK(la == lb);
    // masked patch covers columns 0..1 on both rows: 4 pixels, error 1 each
    CHECK(la == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("pixel loss averages over masked pixels across the batch") {
    Tensor x = Tensor::from_data({2, 1, 2, 2}, {0, 0, 0, 0, 0, 0, 0, 0});
    Tensor pred = Tensor::from_data({2, 1, 2, 2}, {1, 1, 1, 1, 3, 3, 3, 3});
    std::vector<PatchMask> masks = {make_mask(1, 1, {1}), make_mask(1, 1, {1})};
    // 8 masked pixels, squared errors 4 x 1 and 4 x 9
    CHECK(mae_loss(pred, x, masks, false).data()[0] == doctest::Approx(5.0));
}

TEST_CASE("normalized targets standardize each patch by its own statistics") {
    Tensor x = Tensor::from_data({1, 1, 2, 2}, {1, 3, 1, 3});
    Tensor pred = Tensor::from_data({1, 1, 2, 2}, {0, 0, 0, 0});
    std::vector<PatchMask> masks = {make_mask(1, 1, {1})};
    // patch mean 2, population variance 1, inv = 1/sqrt(1 + 1e-6)
    const double inv = 1.0 / std::sqrt(1.0 + 1e-6);
    const double expect = inv * inv; // mean of target^2, targets are +-inv
    CHECK(mae_loss(pred, x, masks, true).data()[0] == doctest::Approx(expect).epsilon(1e-12));

    // a constant patch standardizes to zero targets instead of dividing by zero
    Tensor xc = Tensor::from_data({1, 1, 2, 2}, {5, 5, 5, 5});
    Tensor pc = Tensor::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
    double loss = mae_loss(pc, xc, masks, true).data()[0];
    CHECK(loss == doctest::Approx((1.0 + 4.0 + 9.0 + 16.0) / 4.0).epsilon(1e-9));
}

TEST_CASE("pixel loss validates masks and rejects an all-visible batch") {
    Rng rng(1);
    Tensor x = rand_images(rng, 2, 1, 4, 4);
    Tensor pred = Tensor::from_data(x.shape(), x.data());
    std::vector<PatchMask> none = {make_mask(2, 2, {0, 0, 0, 0}),
                                   make_mask(2, 2, {0, 0, 0, 0})};
    CHECK_THROWS_WITH_AS(mae_loss(pred, x, none, false),
                         doctest::Contains("every patch is visible"), Error);

    std::vector<PatchMask> short_masks = {make_mask(2, 2, {1, 0, 0, 0})};
    CHECK_THROWS_AS(mae_loss(pred, x, short_masks, false), ShapeError);

    std::vector<PatchMask> bad_grid = {make_mask(3, 3, std::vector<uint8_t>(9, 1)),
                                       make_mask(3, 3, std::vector<uint8_t>(9, 1))};
    CHECK_THROWS_AS(mae_loss(pred, x, bad_grid, false), ShapeError);

    Rng rng2(2);
    Tensor small = rand_images(rng2, 2, 1, 2, 2);
    CHECK_THROWS_AS(mae_loss(pred, small, none, false), ShapeError);
}

TEST_CASE("pixel loss gradient reaches only masked pixels") {
    Rng rng(3);
    Tensor x = rand_images(rng, 1, 1, 4, 4);
    Tensor pred = rand_images(rng, 1, 1, 4, 4);
    pred.set_requires_grad(true);
    std::vector<PatchMask> masks = {make_mask(2, 2, {1, 0, 0, 0})};
    backward(mae_loss(pred, x, masks, false));
    const auto& g = pred.grad();
    for (size_t y = 0; y < 4; ++y)
        for (size_t xx = 0; xx < 4; ++xx) {
            bool masked = (y < 2 && xx < 2);
            if (masked)
                CHECK(g[y * 4 + xx] != 0.0);
            else
                CHECK(g[y * 4 + xx] == 0.0);
        }
}

TEST_CASE("coefficient loss equals the mean squared masked-coefficient error") {
    PcaBasis basis = axis_basis();
    Tensor x = Tensor::from_data({2, 1, 1, 2}, {1, 2, 3, 4});
    Tensor pred = Tensor::from_data({2, 1, 1, 2}, {1, 5, 3, 1});
    ComponentMask m;
    m.masked = {0, 1};
    // coefficient errors on the masked axis: 3 and -3, denominator 2 * 1
    CHECK(pmae_loss_pc(pred, x, m, basis).data()[0] == doctest::Approx(9.0).epsilon(1e-9));

    CHECK(pmae_loss_pc(Tensor::from_data(x.shape(), x.data()), x, m, basis).data()[0] ==
          doctest::Approx(0.0).epsilon(1e-15));

    ComponentMask empty;
    empty.masked = {0, 0};
    CHECK_THROWS_WITH_AS(pmae_loss_pc(pred, x, empty, basis),
                         doctest::Contains("every component is visible"), Error);
}

TEST_CASE("coefficient loss ignores visible-component perturbations") {
    Rng rng(5);
    const size_t b = 3, d = 16;
    std::vector<double> rows(30 * d);
    for (auto& v : rows) v = rng.normal();
    PcaBasis basis = fit_pca(Tensor::from_data({30, d}, std::move(rows)));

    Tensor x = rand_images(rng, b, 1, 4, 4);
    Tensor pred = rand_images(rng, b, 1, 4, 4);
    ComponentMask m;
    m.masked.assign(d, 0);
    m.masked[0] = m.masked[5] = m.masked[11] = 1;

    double base = pmae_loss_pc(pred, x, m, basis).data()[0];

    // push the prediction along visible components only
    Tensor coeffs = to_pc(reshape(pred, {b, d}), basis);
    auto cd = coeffs.data();
    for (size_t bi = 0; bi < b; ++bi) {
        cd[bi * d + 1] += 7.0;
        cd[bi * d + 8] -= 2.5;
    }
    Tensor moved = reshape(from_pc(Tensor::from_data({b, d}, std::move(cd)), basis),
                           pred.shape());
    double shifted = pmae_loss_pc(moved, x, m, basis).data()[0];
    CHECK(std::abs(shifted - base) < 1e-9);
}

TEST_CASE("whole-image loss penalizes against the masked back-projection") {
    PcaBasis basis = axis_basis();
    Tensor x = Tensor::from_data({2, 1, 1, 2}, {1, 2, 3, 4});
    Tensor zero = Tensor::from_data({2, 1, 1, 2}, {0, 0, 0, 0});

    ComponentMask all;
    all.masked = {1, 1};
    // complete mask, zero mean: target is x itself
    double expect = (1.0 + 4.0 + 9.0 + 16.0) / 4.0;
    CHECK(pmae_loss_pixel(zero, x, all, basis).data()[0] ==
          doctest::Approx(expect).epsilon(1e-9));

    // empty mask is allowed; the target collapses to the mean image
    ComponentMask none;
    none.masked = {0, 0};
    CHECK(pmae_loss_pixel(zero, x, none, basis).data()[0] ==
          doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("with a complete mask the two component losses agree (Parseval)") {
    Rng rng(7);
    const size_t b = 4, d = 16;
    std::vector<double> rows(25 * d);
    for (auto& v : rows) v = rng.normal();
    PcaBasis basis = fit_pca(Tensor::from_data({25, d}, std::move(rows)));

    Tensor x = rand_images(rng, b, 1, 4, 4);
    Tensor pred = rand_images(rng, b, 1, 4, 4);
    ComponentMask all;
    all.masked.assign(d, 1);

    double pc = pmae_loss_pc(pred, x, all, basis).data()[0];
    double px = pmae_loss_pixel(pred, x, all, basis).data()[0];
    CHECK(std::abs(pc - px) < 1e-8 * std::max(1.0, std::abs(pc)));
}

TEST_CASE("coefficient loss is independent of the eigenvalue scale") {
    Rng rng(9);
    const size_t d = 8;
    std::vector<double> rows(20 * d);
    for (auto& v : rows) v = rng.normal();
    PcaBasis a = fit_pca(Tensor::from_data({20, d}, std::move(rows)));

    PcaBasis b;
    b.dim = a.dim;
    b.mean = a.mean;
    b.components = a.components;
    b.eigenvalues = a.eigenvalues;
    for (auto& ev : b.eigenvalues) ev *= 31.7;
    b.finalize();

    Tensor x = rand_images(rng, 2, 2, 2, 2);
    Tensor pred = rand_images(rng, 2, 2, 2, 2);
    ComponentMask m;
    m.masked = {1, 0, 1, 0, 0, 1, 0, 0};
    double la = pmae_loss_pc(pred, x, m, a).data()[0];
    double lb = pmae_loss_pc(pred, x, m, b).data()[0];
    CHECK(la == lb);
}

TEST_CASE("losses reject a basis of the wrong dimension") {
    PcaBasis basis = axis_basis(); // dim 2
    Tensor x = Tensor::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
    ComponentMask m;
    m.masked = {1, 0};
    CHECK_THROWS_AS(pmae_loss_pc(x, x, m, basis), ShapeError);
    CHECK_THROWS_AS(pmae_loss_pixel(x, x, m, basis), ShapeError);
}

TEST_CASE("all three losses pass finite-difference checks") {
    Rng rng(11);
    const size_t b = 2, d = 16;
    std::vector<double> rows(24 * d);
    for (auto& v : rows) v = rng.normal();
    PcaBasis basis = fit_pca(Tensor::from_data({24, d}, std::move(rows)));

    Tensor x = rand_images(rng, b, 1, 4, 4);
    Tensor pred = rand_images(rng, b, 1, 4, 4);
    pred.set_requires_grad(true);

    std::vector<PatchMask> masks(b, make_mask(2, 2, {1, 0, 0, 1}));
    ComponentMask cm;
    cm.masked.assign(d, 0);
    cm.masked[0] = cm.masked[3] = cm.masked[9] = 1;

    GradCheckReport r1 =
        grad_check([&](Tensor& p) { return mae_loss(p, x, masks, false); }, pred);
    CHECK(r1.max_rel_err < 1e-5);
    GradCheckReport r2 =
        grad_check([&](Tensor& p) { return mae_loss(p, x, masks, true); }, pred);
    CHECK(r2.max_rel_err < 1e-5);
    GradCheckReport r3 =
        grad_check([&](Tensor& p) { return pmae_loss_pc(p, x, cm, basis); }, pred);
    CHECK(r3.max_rel_err < 1e-5);
    GradCheckReport r4 =
        grad_check([&](Tensor& p) { return pmae_loss_pixel(p, x, cm, basis); }, pred);
    CHECK(r4.max_rel_err < 1e-5);
}
