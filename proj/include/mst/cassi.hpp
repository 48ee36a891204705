#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mst/tensor.hpp"

namespace mst {

// ---------------------------------------------------------------------------
// Coded-aperture snapshot pipeline: a scene cube is modulated by the physical
// mask, sheared along the width axis by the disperser (step d pixels per
// channel index, reference channel 0), summed over channels onto the
// detector, and inverted for network input by per-channel windowing of the
// measurement. All shifts are integer pixel moves.
//
// Layouts: cube [H, W, n_lambda]; mask [H, W]; sheared tensors
// [H, W + d*(n_lambda-1), n_lambda]; measurement [H, W + d*(n_lambda-1)].
// ---------------------------------------------------------------------------

inline std::vector<double> default_wavelengths(std::size_t n_lambda) {
  // 28 bands spanning 450-650 nm by default; same span for other counts.
  std::vector<double> wl(n_lambda);
  if (n_lambda == 1) {
    wl[0] = 550.0;
    return wl;
  }
  for (std::size_t i = 0; i < n_lambda; ++i)
    wl[i] = 450.0 + 200.0 * static_cast<double>(i) / static_cast<double>(n_lambda - 1);
  return wl;
}

template <typename T>
struct HsiCube {
  Tensor<T> data;  // [H, W, n_lambda]
  std::vector<double> wavelengths;

  HsiCube() = default;
  explicit HsiCube(Tensor<T> d, std::vector<double> wl = {}) : data(std::move(d)) {
    if (data.ndim() != 3) throw DimensionError("HsiCube: want [H,W,n_lambda], got " + shape_str(data.shape()));
    wavelengths = wl.empty() ? default_wavelengths(data.extent(2)) : std::move(wl);
    if (wavelengths.size() != data.extent(2))
      throw DimensionError("HsiCube: wavelength count vs spectral extent");
    for (std::size_t i = 1; i < wavelengths.size(); ++i)
      if (!(wavelengths[i] > wavelengths[i - 1]))
        throw ContractError("HsiCube: wavelengths must be strictly increasing");
  }

  std::size_t height() const { return data.extent(0); }
  std::size_t width() const { return data.extent(1); }
  std::size_t bands() const { return data.extent(2); }
  T at(std::size_t x, std::size_t y, std::size_t n) const { return data.at({x, y, n}); }
};

template <typename T>
struct Mask2D {
  Tensor<T> data;  // [H, W]

  Mask2D() = default;
  explicit Mask2D(Tensor<T> d) : data(std::move(d)) {
    if (data.ndim() != 2) throw DimensionError("Mask2D: want [H,W], got " + shape_str(data.shape()));
  }
  std::size_t height() const { return data.extent(0); }
  std::size_t width() const { return data.extent(1); }
};

template <typename T>
struct ShiftedCube {
  Tensor<T> data;  // [H, W + d*(n_lambda-1), n_lambda]
  std::size_t step = 0;

  std::size_t height() const { return data.extent(0); }
  std::size_t width() const { return data.extent(1); }
  std::size_t bands() const { return data.extent(2); }
  std::size_t source_width() const { return width() - step * (bands() - 1); }
};

template <typename T>
using ShiftedMask = ShiftedCube<T>;

struct NoiseSpec {
  enum class Kind { None, Gaussian, Shot };
  Kind kind = Kind::None;
  double sigma = 0.0;       // gaussian
  unsigned bits = 11;       // shot
  std::uint64_t seed = 0;

  static NoiseSpec none() { return {}; }
  static NoiseSpec gaussian(double sigma, std::uint64_t seed) {
    NoiseSpec n;
    n.kind = Kind::Gaussian;
    n.sigma = sigma;
    n.seed = seed;
    return n;
  }
  static NoiseSpec shot(unsigned bits, std::uint64_t seed) {
    NoiseSpec n;
    n.kind = Kind::Shot;
    n.bits = bits;
    n.seed = seed;
    return n;
  }
};

template <typename T>
struct Measurement {
  Tensor<T> data;  // [H, W + d*(n_lambda-1)]
  NoiseSpec noise;

  std::size_t height() const { return data.extent(0); }
  std::size_t width() const { return data.extent(1); }
};

// F'(:,:,n) = F(:,:,n) * M, per channel.
template <typename T>
HsiCube<T> modulate(const HsiCube<T>& f, const Mask2D<T>& m) {
  if (f.height() != m.height() || f.width() != m.width())
    throw DimensionError("modulate: cube " + shape_str(f.data.shape()) + " vs mask " +
                         shape_str(m.data.shape()));
  const std::size_t h = f.height(), w = f.width(), nl = f.bands();
  std::vector<T> out(f.data.numel());
  const auto& fv = f.data.data();
  const auto& mv = m.data.data();
  for (std::size_t x = 0; x < h; ++x)
    for (std::size_t y = 0; y < w; ++y) {
      const T mask_v = mv[x * w + y];
      for (std::size_t n = 0; n < nl; ++n)
        out[(x * w + y) * nl + n] = fv[(x * w + y) * nl + n] * mask_v;
    }
  return HsiCube<T>(Tensor<T>::from({h, w, nl}, std::move(out)), f.wavelengths);
}

// Shear along the width axis: channel n lands at column offset d*n.
template <typename T>
ShiftedCube<T> disperse(const HsiCube<T>& fp, std::size_t d) {
  const std::size_t h = fp.height(), w = fp.width(), nl = fp.bands();
  const std::size_t ws = w + d * (nl - 1);
  std::vector<T> out(h * ws * nl, T(0));
  const auto& fv = fp.data.data();
  for (std::size_t x = 0; x < h; ++x)
    for (std::size_t y = 0; y < w; ++y)
      for (std::size_t n = 0; n < nl; ++n)
        out[(x * ws + y + d * n) * nl + n] = fv[(x * w + y) * nl + n];
  ShiftedCube<T> sc;
  sc.data = Tensor<T>::from({h, ws, nl}, std::move(out));
  sc.step = d;
  return sc;
}

// Y = sum_n F''(:,:,n) + G.
template <typename T>
Measurement<T> measure(const ShiftedCube<T>& fpp, const NoiseSpec& noise = NoiseSpec::none()) {
  const std::size_t h = fpp.height(), ws = fpp.width(), nl = fpp.bands();
  std::vector<T> out(h * ws, T(0));
  const auto& fv = fpp.data.data();
  for (std::size_t x = 0; x < h; ++x)
    for (std::size_t y = 0; y < ws; ++y) {
      T acc = T(0);
      for (std::size_t n = 0; n < nl; ++n) acc += fv[(x * ws + y) * nl + n];
      out[x * ws + y] = acc;
    }

  if (noise.kind == NoiseSpec::Kind::Gaussian) {
    Rng rng(noise.seed);
    for (T& v : out) v += static_cast<T>(rng.normal(0.0, noise.sigma));
  } else if (noise.kind == NoiseSpec::Kind::Shot) {
    // Scale the clean measurement onto the detector's quantization range,
    // draw photon counts, and rescale.
    Rng rng(noise.seed);
    T peak = T(0);
    for (const T v : out) peak = std::max(peak, v);
    if (peak > T(0)) {
      const double full = static_cast<double>((1ull << noise.bits) - 1);
      const double s = full / static_cast<double>(peak);
      for (T& v : out) {
        const double lam = std::max(0.0, static_cast<double>(v) * s);
        v = static_cast<T>(static_cast<double>(rng.poisson(lam)) / s);
      }
    }
  }

  Measurement<T> m;
  m.data = Tensor<T>::from({h, ws}, std::move(out));
  m.noise = noise;
  return m;
}

// Shift-back initialization: channel n of the result is the window
// Y(:, d*n .. d*n+W) of the measurement.
template <typename T>
HsiCube<T> init_input(const Measurement<T>& y, std::size_t d, std::size_t n_lambda) {
  const std::size_t h = y.height(), ws = y.width();
  const std::size_t span = d * (n_lambda - 1);
  if (ws <= span)
    throw DimensionError("init_input: measurement width " + std::to_string(ws) +
                         " inconsistent with d=" + std::to_string(d) +
                         ", n_lambda=" + std::to_string(n_lambda));
  const std::size_t w = ws - span;
  std::vector<T> out(h * w * n_lambda);
  const auto& yv = y.data.data();
  for (std::size_t x = 0; x < h; ++x)
    for (std::size_t yy = 0; yy < w; ++yy)
      for (std::size_t n = 0; n < n_lambda; ++n)
        out[(x * w + yy) * n_lambda + n] = yv[x * ws + yy + d * n];
  return HsiCube<T>(Tensor<T>::from({h, w, n_lambda}, std::move(out)));
}

// Replicate the mask into n_lambda channels, shearing like the disperser.
template <typename T>
ShiftedMask<T> shift_mask(const Mask2D<T>& m, std::size_t d, std::size_t n_lambda) {
  const std::size_t h = m.height(), w = m.width();
  const std::size_t ws = w + d * (n_lambda - 1);
  std::vector<T> out(h * ws * n_lambda, T(0));
  const auto& mv = m.data.data();
  for (std::size_t x = 0; x < h; ++x)
    for (std::size_t y = 0; y < w; ++y) {
      const T v = mv[x * w + y];
      for (std::size_t n = 0; n < n_lambda; ++n) out[(x * ws + y + d * n) * n_lambda + n] = v;
    }
  ShiftedMask<T> sm;
  sm.data = Tensor<T>::from({h, ws, n_lambda}, std::move(out));
  sm.step = d;
  return sm;
}

// Per-channel inverse windowing of a sheared tensor (exact for integer steps).
template <typename T>
HsiCube<T> shift_back_cube(const ShiftedCube<T>& s) {
  const std::size_t h = s.height(), ws = s.width(), nl = s.bands(), d = s.step;
  const std::size_t w = ws - d * (nl - 1);
  std::vector<T> out(h * w * nl);
  const auto& sv = s.data.data();
  for (std::size_t x = 0; x < h; ++x)
    for (std::size_t y = 0; y < w; ++y)
      for (std::size_t n = 0; n < nl; ++n)
        out[(x * w + y) * nl + n] = sv[(x * ws + y + d * n) * nl + n];
  return HsiCube<T>(Tensor<T>::from({h, w, nl}, std::move(out)));
}

// ---------------------------------------------------------------------------
// Synthetic data: smooth Gaussian blobs with broad spectral profiles stand in
// for natural scenes (neighboring bands stay strongly correlated); masks are
// Bernoulli transmittance patterns, matching the near-binary physical plates.
// ---------------------------------------------------------------------------

template <typename T>
HsiCube<T> generate_scene(std::uint64_t seed, std::size_t h, std::size_t w, std::size_t n_lambda) {
  if (h == 0 || w == 0 || n_lambda == 0) throw ConfigError("generate_scene: extents must be positive");
  Rng rng(seed * 0x51ed2701u + 17);
  const std::size_t blobs = 5 + rng.uniform_index(4);
  struct Blob {
    double amp, cx, cy, sigma, mu, width;
  };
  std::vector<Blob> bs(blobs);
  const double ext = static_cast<double>(std::min(h, w));
  for (auto& b : bs) {
    b.amp = rng.uniform(0.35, 0.95);
    b.cx = rng.uniform(0.0, static_cast<double>(h));
    b.cy = rng.uniform(0.0, static_cast<double>(w));
    b.sigma = rng.uniform(0.12, 0.35) * ext;
    b.mu = rng.uniform(0.0, static_cast<double>(n_lambda));
    b.width = rng.uniform(0.45, 1.2) * static_cast<double>(n_lambda);
  }
  const double ambient = rng.uniform(0.02, 0.08);

  std::vector<T> out(h * w * n_lambda);
  for (std::size_t x = 0; x < h; ++x)
    for (std::size_t y = 0; y < w; ++y)
      for (std::size_t n = 0; n < n_lambda; ++n) {
        double v = ambient;
        for (const auto& b : bs) {
          const double dx = (static_cast<double>(x) - b.cx) / b.sigma;
          const double dy = (static_cast<double>(y) - b.cy) / b.sigma;
          const double dn = (static_cast<double>(n) - b.mu) / b.width;
          v += b.amp * std::exp(-0.5 * (dx * dx + dy * dy)) * std::exp(-0.5 * dn * dn);
        }
        out[(x * w + y) * n_lambda + n] = static_cast<T>(std::clamp(v, 0.0, 1.0));
      }
  return HsiCube<T>(Tensor<T>::from({h, w, n_lambda}, std::move(out)));
}

template <typename T>
Mask2D<T> generate_mask(std::uint64_t seed, std::size_t h, std::size_t w, double density = 0.5) {
  if (h == 0 || w == 0) throw ConfigError("generate_mask: extents must be positive");
  Rng rng(seed * 0xc2b2ae35u + 29);
  std::vector<T> out(h * w);
  for (T& v : out) v = rng.bernoulli(density) ? T(1) : T(0);
  return Mask2D<T>(Tensor<T>::from({h, w}, std::move(out)));
}

}  // namespace mst
