#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <string>
#include <tuple>
#include <vector>

#include "mst/cassi.hpp"
#include "mst/model.hpp"
#include "mst/tensor.hpp"

namespace mst {

// ---------------------------------------------------------------------------
// Desk-scale training: per step the scene is (optionally) augmented, pushed
// through the optical simulation, shift-back initialized, reconstructed, and
// scored by RMSE plus a spectrum-constancy term (RMSE of first-order spectral
// differences). Adam with the published schedule: lr halved every 50 epochs.
// ---------------------------------------------------------------------------

struct TrainConfig {
  double lr = 4e-4;
  std::size_t lr_halve_every = 50;  // epochs
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t epochs = 1;
  std::size_t steps_per_epoch = 100;
  std::size_t batch = 1;   // paper default 5; toy runs use 1
  std::size_t patch = 0;   // 0 = whole scene
  std::uint64_t seed = 1;
  bool augment = false;
  double lambda_scl = 1.0;
  NoiseSpec noise{};       // default: noiseless simulation
  std::size_t snapshot_every = 0;
};

struct LossReport {
  double rmse = 0;
  double scl = 0;
  double total = 0;
};

struct StepRecord {
  std::size_t step;
  double lr;
  double rmse;
  double scl;
  double total;
};

inline double lr_at_epoch(const TrainConfig& tc, std::size_t epoch) {
  return tc.lr * std::pow(0.5, static_cast<double>(epoch / tc.lr_halve_every));
}

template <typename T>
struct SpectralLoss {
  Tensor<T> total;  // tracked scalar
  LossReport report;
};

// rmse = sqrt(mean((pred-gt)^2)); scl = same on first-order spectral
// differences (zero for constant offsets); total = rmse + lambda*scl.
template <typename T>
SpectralLoss<T> spectral_loss(const Tensor<T>& pred, const Tensor<T>& gt, T lambda_scl = T(1)) {
  require_same_shape(pred, gt, "loss");
  if (pred.ndim() != 3) throw DimensionError("loss: want cubes [H,W,n_lambda]");
  const std::size_t nl = pred.extent(2);

  Tensor<T> diff = sub(pred, gt);
  Tensor<T> rmse = sqrt_elem(mean(mul(diff, diff)));

  SpectralLoss<T> out;
  if (nl >= 2) {
    Tensor<T> dp = sub(narrow(pred, 2, 1, nl - 1), narrow(pred, 2, 0, nl - 1));
    Tensor<T> dg = sub(narrow(gt, 2, 1, nl - 1), narrow(gt, 2, 0, nl - 1));
    Tensor<T> sd = sub(dp, dg);
    Tensor<T> scl = sqrt_elem(mean(mul(sd, sd)));
    out.total = add(rmse, scale(scl, lambda_scl));
    out.report = {rmse.item(), scl.item(), out.total.item()};
  } else {
    out.total = rmse;
    out.report = {rmse.item(), 0.0, rmse.item()};
  }
  return out;
}

// Per-channel PSNR averaged over channels; identical channels report the
// +infinity sentinel.
template <typename T>
double psnr(const HsiCube<T>& pred, const HsiCube<T>& gt, double peak = 1.0) {
  require_same_shape(pred.data, gt.data, "psnr");
  const std::size_t h = gt.height(), w = gt.width(), nl = gt.bands();
  double acc = 0;
  for (std::size_t n = 0; n < nl; ++n) {
    double mse = 0;
    for (std::size_t x = 0; x < h; ++x)
      for (std::size_t y = 0; y < w; ++y) {
        const double d = static_cast<double>(pred.at(x, y, n)) - static_cast<double>(gt.at(x, y, n));
        mse += d * d;
      }
    mse /= static_cast<double>(h * w);
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    acc += 10.0 * std::log10(peak * peak / mse);
  }
  return acc / static_cast<double>(nl);
}

namespace detail {

inline const std::vector<double>& ssim_window() {
  static const std::vector<double> w = [] {
    std::vector<double> win(11 * 11);
    double sum = 0;
    for (int y = 0; y < 11; ++y)
      for (int x = 0; x < 11; ++x) {
        const double dy = y - 5, dx = x - 5;
        win[y * 11 + x] = std::exp(-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5));
        sum += win[y * 11 + x];
      }
    for (double& v : win) v /= sum;
    return win;
  }();
  return w;
}

}  // namespace detail

// Per-channel SSIM with the 11x11 Gaussian window (sigma 1.5, k1=0.01,
// k2=0.03), valid window positions only, averaged over channels.
template <typename T>
double ssim(const HsiCube<T>& pred, const HsiCube<T>& gt, double peak = 1.0) {
  require_same_shape(pred.data, gt.data, "ssim");
  const std::size_t h = gt.height(), w = gt.width(), nl = gt.bands();
  if (h < 11 || w < 11) throw ConfigError("ssim: spatial extents must be at least 11");
  const auto& win = detail::ssim_window();
  const double c1 = (0.01 * peak) * (0.01 * peak);
  const double c2 = (0.03 * peak) * (0.03 * peak);

  double channel_acc = 0;
  for (std::size_t n = 0; n < nl; ++n) {
    double map_acc = 0;
    std::size_t count = 0;
    for (std::size_t x0 = 0; x0 + 11 <= h; ++x0)
      for (std::size_t y0 = 0; y0 + 11 <= w; ++y0) {
        double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
        for (std::size_t dy = 0; dy < 11; ++dy)
          for (std::size_t dx = 0; dx < 11; ++dx) {
            const double wv = win[dy * 11 + dx];
            const double a = pred.at(x0 + dy, y0 + dx, n);
            const double b = gt.at(x0 + dy, y0 + dx, n);
            mx += wv * a;
            my += wv * b;
            xx += wv * a * a;
            yy += wv * b * b;
            xy += wv * a * b;
          }
        const double vx = xx - mx * mx;
        const double vy = yy - my * my;
        const double vxy = xy - mx * my;
        map_acc += ((2 * mx * my + c1) * (2 * vxy + c2)) /
                   ((mx * mx + my * my + c1) * (vx + vy + c2));
        ++count;
      }
    channel_acc += map_acc / static_cast<double>(count);
  }
  return channel_acc / static_cast<double>(nl);
}

// ---------------------------------------------------------------------------
// Augmentation: uniform draw from {identity, h-flip, v-flip} x four quarter
// turns, applied to the scene before the optical simulation.
// ---------------------------------------------------------------------------

template <typename T>
HsiCube<T> apply_augment(const HsiCube<T>& cube, int flip, int quarter_turns) {
  const std::size_t nl = cube.bands();
  std::size_t h = cube.height(), w = cube.width();
  std::vector<T> cur = cube.data.data();

  auto at = [&](const std::vector<T>& v, std::size_t x, std::size_t y, std::size_t n,
                std::size_t width) { return v[(x * width + y) * nl + n]; };

  if (flip == 1) {  // flip along the width axis
    std::vector<T> out(cur.size());
    for (std::size_t x = 0; x < h; ++x)
      for (std::size_t y = 0; y < w; ++y)
        for (std::size_t n = 0; n < nl; ++n)
          out[(x * w + y) * nl + n] = at(cur, x, w - 1 - y, n, w);
    cur = std::move(out);
  } else if (flip == 2) {  // flip along the height axis
    std::vector<T> out(cur.size());
    for (std::size_t x = 0; x < h; ++x)
      for (std::size_t y = 0; y < w; ++y)
        for (std::size_t n = 0; n < nl; ++n)
          out[(x * w + y) * nl + n] = at(cur, h - 1 - x, y, n, w);
    cur = std::move(out);
  }

  for (int t = 0; t < (quarter_turns & 3); ++t) {
    // one clockwise quarter turn: out(x, y) = in(H-1-y, x); dims swap
    std::vector<T> out(cur.size());
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t n = 0; n < nl; ++n)
          out[(x * h + y) * nl + n] = at(cur, h - 1 - y, x, n, w);
    cur = std::move(out);
    std::swap(h, w);
  }
  return HsiCube<T>(Tensor<T>::from({h, w, nl}, std::move(cur)), cube.wavelengths);
}

template <typename T>
HsiCube<T> augment(const HsiCube<T>& cube, Rng& rng) {
  const int flip = static_cast<int>(rng.uniform_index(3));
  const int rot = static_cast<int>(rng.uniform_index(4));
  return apply_augment(cube, flip, rot);
}

// ---------------------------------------------------------------------------
// Adam (bias-corrected first/second moments, epsilon outside the root)
// ---------------------------------------------------------------------------

template <typename T>
class Adam {
 public:
  Adam(std::vector<Tensor<T>*> params, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {
    slots_.reserve(params.size());
    for (auto* p : params)
      slots_.push_back({p, std::vector<T>(p->numel(), T(0)), std::vector<T>(p->numel(), T(0))});
  }

  void zero_grad() {
    for (auto& s : slots_) s.param->zero_grad();
  }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (auto& s : slots_) {
      auto& value = s.param->data();
      const auto& grad = s.param->has_grad() ? s.param->grad() : zero_like(value);
      for (std::size_t i = 0; i < value.size(); ++i) {
        const double g = static_cast<double>(grad[i]);
        s.m[i] = static_cast<T>(beta1_ * s.m[i] + (1.0 - beta1_) * g);
        s.v[i] = static_cast<T>(beta2_ * s.v[i] + (1.0 - beta2_) * g * g);
        const double mhat = s.m[i] / bc1;
        const double vhat = s.v[i] / bc2;
        value[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }

  std::size_t steps_taken() const { return t_; }

 private:
  struct Slot {
    Tensor<T>* param;
    std::vector<T> m, v;
  };

  static const std::vector<T>& zero_like(const std::vector<T>& v) {
    static thread_local std::vector<T> zeros;
    if (zeros.size() < v.size()) zeros.assign(v.size(), T(0));
    return zeros;
  }

  std::vector<Slot> slots_;
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

template <typename T>
std::pair<HsiCube<T>, Mask2D<T>> crop_pair(const HsiCube<T>& cube, const Mask2D<T>& mask,
                                           std::size_t x0, std::size_t y0, std::size_t size) {
  const std::size_t nl = cube.bands();
  std::vector<T> cv(size * size * nl);
  std::vector<T> mv(size * size);
  for (std::size_t x = 0; x < size; ++x)
    for (std::size_t y = 0; y < size; ++y) {
      mv[x * size + y] = mask.data.at({x0 + x, y0 + y});
      for (std::size_t n = 0; n < nl; ++n)
        cv[(x * size + y) * nl + n] = cube.at(x0 + x, y0 + y, n);
    }
  return {HsiCube<T>(Tensor<T>::from({size, size, nl}, std::move(cv)), cube.wavelengths),
          Mask2D<T>(Tensor<T>::from({size, size}, std::move(mv)))};
}

template <typename T>
std::vector<StepRecord> train(
    MstModel<T>& model, const std::vector<HsiCube<T>>& scenes, const Mask2D<T>& mask,
    const TrainConfig& tc,
    const std::function<void(std::size_t, MstModel<T>&)>& snapshot = nullptr) {
  if (scenes.empty()) throw ConfigError("train: no scenes");
  const MstConfig& cfg = model.config();

  std::vector<Tensor<T>*> params;
  for (auto& [name, p] : model.named_params()) params.push_back(p);
  Adam<T> opt(params, tc.beta1, tc.beta2, tc.eps);
  Rng rng(tc.seed);

  std::vector<StepRecord> history;
  history.reserve(tc.epochs * tc.steps_per_epoch);
  std::size_t global_step = 0;

  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    const double lr = lr_at_epoch(tc, epoch);
    for (std::size_t s = 0; s < tc.steps_per_epoch; ++s, ++global_step) {
      opt.zero_grad();
      Tensor<T> batch_loss;
      LossReport agg;
      for (std::size_t b = 0; b < tc.batch; ++b) {
        const HsiCube<T>& base = scenes[rng.uniform_index(scenes.size())];
        HsiCube<T> cube = tc.augment ? augment(base, rng) : base;
        Mask2D<T> msk = mask;
        if (tc.patch != 0 && (tc.patch < cube.height() || tc.patch < cube.width())) {
          const std::size_t x0 = rng.uniform_index(cube.height() - tc.patch + 1);
          const std::size_t y0 = rng.uniform_index(cube.width() - tc.patch + 1);
          auto [pc, pm] = crop_pair(cube, msk, x0, y0, tc.patch);
          cube = std::move(pc);
          msk = std::move(pm);
        }

        NoiseSpec noise = tc.noise;
        if (noise.kind != NoiseSpec::Kind::None) noise.seed = rng.next_u64();
        auto y = measure(disperse(modulate(cube, msk), cfg.shift_step), noise);
        auto h = init_input(y, cfg.shift_step, cfg.n_lambda);

        auto pred = model.forward(h, msk);
        auto sl = spectral_loss(pred.data, cube.data, static_cast<T>(tc.lambda_scl));
        batch_loss = b == 0 ? sl.total : add(batch_loss, sl.total);
        agg.rmse += sl.report.rmse;
        agg.scl += sl.report.scl;
        agg.total += sl.report.total;
      }
      if (tc.batch > 1) batch_loss = scale(batch_loss, T(1) / static_cast<T>(tc.batch));
      const double inv_b = 1.0 / static_cast<double>(tc.batch);

      if (!std::isfinite(static_cast<double>(batch_loss.item())))
        throw TrainingError("loss diverged at step " + std::to_string(global_step) + " (epoch " +
                            std::to_string(epoch) + "), value " +
                            std::to_string(static_cast<double>(batch_loss.item())));
      backward(batch_loss);
      opt.step(lr);

      history.push_back(
          {global_step, lr, agg.rmse * inv_b, agg.scl * inv_b, agg.total * inv_b});
      if (snapshot && tc.snapshot_every != 0 && (global_step + 1) % tc.snapshot_every == 0)
        snapshot(global_step + 1, model);
    }
  }
  return history;
}

inline void write_history_csv(const std::string& path, const std::vector<StepRecord>& history) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot open for write: " + path);
  os << "step,lr,rmse,scl,total\n";
  os << std::fixed << std::setprecision(6);
  for (const auto& r : history)
    os << r.step << ',' << r.lr << ',' << r.rmse << ',' << r.scl << ',' << r.total << '\n';
}

}  // namespace mst
