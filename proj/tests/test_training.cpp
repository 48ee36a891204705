#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>
#include <vector>

#include "mst/training.hpp"

using mst::HsiCube;
using mst::Mask2D;
using mst::MstConfig;
using mst::MstModel;
using mst::Tensor;

namespace {

// independent metric implementations (plain loops, own window code)
double ref_psnr(const HsiCube<double>& a, const HsiCube<double>& b, double peak) {
  double acc = 0;
  for (std::size_t n = 0; n < a.bands(); ++n) {
    double se = 0;
    for (std::size_t x = 0; x < a.height(); ++x)
      for (std::size_t y = 0; y < a.width(); ++y) {
        const double d = a.at(x, y, n) - b.at(x, y, n);
        se += d * d;
      }
    const double mse = se / static_cast<double>(a.height() * a.width());
    if (mse == 0) return std::numeric_limits<double>::infinity();
    acc += 10.0 * std::log10(peak * peak / mse);
  }
  return acc / static_cast<double>(a.bands());
}

double ref_ssim(const HsiCube<double>& a, const HsiCube<double>& b, double peak) {
  double window[121];
  double wsum = 0;
  for (int i = 0; i < 121; ++i) {
    const double dy = i / 11 - 5, dx = i % 11 - 5;
    window[i] = std::exp(-(dx * dx + dy * dy) / 4.5);
    wsum += window[i];
  }
  for (double& w : window) w /= wsum;
  const double c1 = 0.0001 * peak * peak, c2 = 0.0009 * peak * peak;

  double result = 0;
  for (std::size_t n = 0; n < a.bands(); ++n) {
    double acc = 0;
    std::size_t cnt = 0;
    for (std::size_t x0 = 0; x0 + 11 <= a.height(); ++x0)
      for (std::size_t y0 = 0; y0 + 11 <= a.width(); ++y0) {
        double ma = 0, mb = 0, va = 0, vb = 0, cov = 0;
        for (int i = 0; i < 121; ++i) {
          const std::size_t x = x0 + static_cast<std::size_t>(i / 11);
          const std::size_t y = y0 + static_cast<std::size_t>(i % 11);
          ma += window[i] * a.at(x, y, n);
          mb += window[i] * b.at(x, y, n);
          va += window[i] * a.at(x, y, n) * a.at(x, y, n);
          vb += window[i] * b.at(x, y, n) * b.at(x, y, n);
          cov += window[i] * a.at(x, y, n) * b.at(x, y, n);
        }
        va -= ma * ma;
        vb -= mb * mb;
        cov -= ma * mb;
        acc += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++cnt;
      }
    result += acc / static_cast<double>(cnt);
  }
  return result / static_cast<double>(a.bands());
}

HsiCube<double> perturbed(const HsiCube<double>& base, std::uint64_t seed, double amp) {
  mst::Rng rng(seed);
  std::vector<double> v = base.data.data();
  for (auto& x : v) x = std::clamp(x + rng.uniform(-amp, amp), 0.0, 1.0);
  return HsiCube<double>(Tensor<double>::from(base.data.shape(), std::move(v)), base.wavelengths);
}

}  // namespace

TEST_CASE("loss vanishes on identical cubes") {
  auto gt = mst::generate_scene<double>(1, 6, 6, 4);
  auto sl = mst::spectral_loss(gt.data, gt.data);
  REQUIRE(sl.report.total == 0.0);
  REQUIRE(sl.report.rmse == 0.0);
  REQUIRE(sl.report.scl == 0.0);
}

TEST_CASE("constant offsets hit only the RMSE term") {
  auto gt = mst::generate_scene<double>(2, 6, 6, 4);
  std::vector<double> v = gt.data.data();
  for (auto& x : v) x += 0.1;
  auto pred = Tensor<double>::from(gt.data.shape(), std::move(v));
  auto sl = mst::spectral_loss(pred, gt.data);
  REQUIRE(sl.report.rmse == Catch::Approx(0.1).epsilon(1e-9));
  REQUIRE(sl.report.scl == Catch::Approx(0.0).margin(1e-12));
  REQUIRE(sl.report.total == Catch::Approx(0.1).epsilon(1e-9));
}

TEST_CASE("loss matches the naive loop oracle on random pairs") {
  auto gt = mst::generate_scene<double>(3, 5, 7, 6);
  auto pred = perturbed(gt, 4, 0.2);
  auto sl = mst::spectral_loss(pred.data, gt.data, 1.0);

  const std::size_t h = 5, w = 7, nl = 6;
  double se = 0;
  for (std::size_t i = 0; i < gt.data.numel(); ++i) {
    const double d = pred.data.data()[i] - gt.data.data()[i];
    se += d * d;
  }
  const double rmse = std::sqrt(se / static_cast<double>(gt.data.numel()));
  double sse = 0;
  for (std::size_t x = 0; x < h; ++x)
    for (std::size_t y = 0; y < w; ++y)
      for (std::size_t n = 0; n + 1 < nl; ++n) {
        const double dp = pred.at(x, y, n + 1) - pred.at(x, y, n);
        const double dg = gt.at(x, y, n + 1) - gt.at(x, y, n);
        sse += (dp - dg) * (dp - dg);
      }
  const double scl = std::sqrt(sse / static_cast<double>(h * w * (nl - 1)));
  REQUIRE(sl.report.rmse == Catch::Approx(rmse).margin(1e-6));
  REQUIRE(sl.report.scl == Catch::Approx(scl).margin(1e-6));
  REQUIRE(sl.report.total == Catch::Approx(rmse + scl).margin(1e-6));
}

TEST_CASE("loss gradient flows through both terms") {
  mst::Rng rng(5);
  auto gt = mst::generate_scene<double>(6, 4, 4, 3);
  std::vector<double> v = gt.data.data();
  for (auto& x : v) x += rng.uniform(0.05, 0.3);
  auto pred = Tensor<double>::from(gt.data.shape(), std::move(v)).set_requires_grad(true);
  auto sl = mst::spectral_loss(pred, gt.data, 1.0);
  mst::backward(sl.total);
  double norm = 0;
  for (double g : pred.grad()) norm += g * g;
  REQUIRE(norm > 0);
}

TEST_CASE("psnr and ssim sentinels on identical inputs") {
  auto gt = mst::generate_scene<double>(7, 16, 16, 3);
  REQUIRE(std::isinf(mst::psnr(gt, gt)));
  REQUIRE(mst::ssim(gt, gt) == 1.0);
}

TEST_CASE("unit constant error gives zero dB at unit peak") {
  auto gt = mst::generate_scene<double>(8, 8, 8, 2);
  std::vector<double> v = gt.data.data();
  for (auto& x : v) x += 1.0;
  auto pred = HsiCube<double>(Tensor<double>::from(gt.data.shape(), std::move(v)));
  REQUIRE(mst::psnr(pred, gt, 1.0) == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("metrics match the independent oracle on 20 random pairs") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    auto gt = mst::generate_scene<double>(100 + seed, 14, 15, 3);
    auto pred = perturbed(gt, 200 + seed, 0.15);
    REQUIRE(mst::psnr(pred, gt) == Catch::Approx(ref_psnr(pred, gt, 1.0)).margin(0.01));
    REQUIRE(mst::ssim(pred, gt) == Catch::Approx(ref_ssim(pred, gt, 1.0)).margin(1e-4));
  }
}

TEST_CASE("identity augmentation leaves the cube unchanged") {
  auto cube = mst::generate_scene<double>(9, 6, 6, 3);
  auto same = mst::apply_augment(cube, 0, 0);
  REQUIRE(same.data.data() == cube.data.data());
}

TEST_CASE("two quarter turns equal one half turn") {
  auto cube = mst::generate_scene<double>(10, 6, 8, 3);
  auto twice = mst::apply_augment(mst::apply_augment(cube, 0, 1), 0, 1);
  auto half = mst::apply_augment(cube, 0, 2);
  REQUIRE(twice.data.shape() == half.data.shape());
  REQUIRE(twice.data.data() == half.data.data());
}

TEST_CASE("flips are involutions") {
  auto cube = mst::generate_scene<double>(11, 5, 7, 2);
  for (int flip : {1, 2}) {
    auto back = mst::apply_augment(mst::apply_augment(cube, flip, 0), flip, 0);
    REQUIRE(back.data.data() == cube.data.data());
  }
}

TEST_CASE("augmented-then-simulated pipeline conserves energy") {
  auto cube = mst::generate_scene<double>(12, 8, 8, 4);
  auto mask = mst::generate_mask<double>(13, 8, 8, 0.5);
  mst::Rng rng(14);
  for (int iter = 0; iter < 8; ++iter) {
    auto aug = mst::augment(cube, rng);
    auto fp = mst::modulate(aug, mask);
    auto y = mst::measure(mst::disperse(fp, 2));
    double e_mod = 0, e_meas = 0;
    for (double v : fp.data.data()) e_mod += v;
    for (double v : y.data.data()) e_meas += v;
    REQUIRE(e_meas == Catch::Approx(e_mod).epsilon(1e-9));
  }
}

TEST_CASE("adam matches the reference equations on a scalar quadratic") {
  // f(theta) = theta^2 / 2, so the gradient is theta itself
  auto theta = Tensor<double>::from({1}, {1.0}).set_requires_grad(true);
  mst::Adam<double> opt({&theta}, 0.9, 0.999, 1e-8);
  const double lr = 0.1;

  // hand-derived reference: two steps of the published update equations
  double m = 0, v = 0, x = 1.0;
  auto reference_step = [&](int t) {
    const double g = x;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mhat = m / (1.0 - std::pow(0.9, t));
    const double vhat = v / (1.0 - std::pow(0.999, t));
    x -= lr * mhat / (std::sqrt(vhat) + 1e-8);
  };

  for (int t = 1; t <= 2; ++t) {
    theta.zero_grad();
    auto loss = mst::scale(mst::mul(theta, theta), 0.5);
    mst::backward(loss);
    opt.step(lr);
    reference_step(t);
    REQUIRE(theta.data()[0] == Catch::Approx(x).margin(1e-15));
  }
  // first step moves by almost exactly lr (bias correction cancels)
  REQUIRE(theta.data()[0] < 1.0 - lr + 1e-6);
}

TEST_CASE("learning rate schedule halves every 50 epochs exactly") {
  mst::TrainConfig tc;
  REQUIRE(mst::lr_at_epoch(tc, 0) == 4e-4);
  REQUIRE(mst::lr_at_epoch(tc, 49) == 4e-4);
  REQUIRE(mst::lr_at_epoch(tc, 50) == 2e-4);
  REQUIRE(mst::lr_at_epoch(tc, 99) == 2e-4);
  REQUIRE(mst::lr_at_epoch(tc, 100) == 1e-4);
  REQUIRE(mst::lr_at_epoch(tc, 150) == 5e-5);
}

TEST_CASE("zero learning rate leaves the weights bitwise unchanged") {
  auto cfg = MstConfig::toy();
  MstModel<float> model(cfg);
  std::vector<std::vector<float>> before;
  for (auto& [name, p] : model.named_params()) before.push_back(p->data());

  auto scene = mst::generate_scene<float>(15, 16, 16, 8);
  auto mask = mst::generate_mask<float>(16, 16, 16, 0.5);
  mst::TrainConfig tc;
  tc.lr = 0.0;
  tc.epochs = 1;
  tc.steps_per_epoch = 3;
  tc.seed = 5;
  mst::train(model, {scene}, mask, tc);

  std::size_t i = 0;
  for (auto& [name, p] : model.named_params()) REQUIRE(p->data() == before[i++]);
}

TEST_CASE("fixed seeds reproduce the loss sequence exactly") {
  auto run = [] {
    auto cfg = MstConfig::toy();
    cfg.init_seed = 3;
    MstModel<float> model(cfg);
    auto scene = mst::generate_scene<float>(17, 16, 16, 8);
    auto mask = mst::generate_mask<float>(18, 16, 16, 0.5);
    mst::TrainConfig tc;
    tc.epochs = 1;
    tc.steps_per_epoch = 4;
    tc.seed = 9;
    tc.augment = true;
    return mst::train(model, {scene}, mask, tc);
  };
  auto a = run();
  auto b = run();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    REQUIRE(a[i].total == b[i].total);
    REQUIRE(a[i].rmse == b[i].rmse);
    REQUIRE(a[i].scl == b[i].scl);
  }
}

TEST_CASE("training reduces the loss on a short toy run") {
  auto cfg = MstConfig::toy();
  MstModel<float> model(cfg);
  auto scene = mst::generate_scene<float>(19, 16, 16, 8);
  auto mask = mst::generate_mask<float>(20, 16, 16, 0.5);
  mst::TrainConfig tc;
  tc.epochs = 1;
  tc.steps_per_epoch = 30;
  tc.seed = 21;
  auto history = mst::train(model, {scene}, mask, tc);
  REQUIRE(history.back().total < history.front().total);
}
