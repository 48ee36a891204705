#pragma once

#include <cstdint>
#include <vector>

#include "mst/attention.hpp"
#include "mst/cassi.hpp"
#include "mst/tensor.hpp"

namespace mst {

// ---------------------------------------------------------------------------
// Mask-guided mechanism: the shifted physical mask passes through a conv1x1,
// then splits into an identity path (preserving the raw fidelity pattern) and
// a conv1x1 -> depth-wise conv5x5 -> sigmoid path modeling spatial
// correlations; their product (with the sigmoid offset by one) is shifted
// back into scene alignment and downsampled to the stage resolution. The
// resulting map re-weights the value tokens of S-MSA per head.
// ---------------------------------------------------------------------------

template <typename T>
struct MmParams {
  Tensor<T> w1;                 // [C, n_lambda, 1, 1]
  Tensor<T> w2;                 // [C, C, 1, 1]
  Tensor<T> dw5;                // [C, 1, 5, 5]
  std::vector<Tensor<T>> downs; // stage-i map owns i stride-2 conv4x4 downsamplers
  std::size_t stage = 0;

  std::size_t base_channels() const { return w1.extent(0); }
};

template <typename T>
MmParams<T> make_mm_params(std::size_t channels, std::size_t n_lambda, std::size_t stage,
                           Rng& rng) {
  MmParams<T> p;
  p.stage = stage;
  auto init = [&rng](Shape shape, std::size_t fan_in) {
    std::vector<T> v(shape_numel(shape));
    const T b = T(1) / std::sqrt(static_cast<T>(fan_in));
    for (auto& x : v) x = static_cast<T>(rng.uniform(-b, b));
    return Tensor<T>::from(std::move(shape), std::move(v)).set_requires_grad(true);
  };
  p.w1 = init({channels, n_lambda, 1, 1}, n_lambda);
  p.w2 = init({channels, channels, 1, 1}, channels);
  p.dw5 = init({channels, 1, 5, 5}, 25);
  std::size_t cw = channels;
  for (std::size_t j = 0; j < stage; ++j) {
    p.downs.push_back(init({2 * cw, cw, 4, 4}, cw * 16));
    cw *= 2;
  }
  return p;
}

template <typename T>
std::vector<Tensor<T>*> mm_param_list(MmParams<T>& p) {
  std::vector<Tensor<T>*> out{&p.w1, &p.w2, &p.dw5};
  for (auto& d : p.downs) out.push_back(&d);
  return out;
}

// Shift-back of a sheared [C, H, Ws] tensor: channel c windows columns
// [d*c, d*c + W). Composed from narrow/concat so gradients flow through.
template <typename T>
Tensor<T> shift_back_chw(const Tensor<T>& sheared, std::size_t d) {
  if (sheared.ndim() != 3) throw DimensionError("shift_back_chw: want [C,H,Ws]");
  const std::size_t c = sheared.extent(0), ws = sheared.extent(2);
  const std::size_t span = d * (c - 1);
  if (ws <= span) throw DimensionError("shift_back_chw: width too small for the shift span");
  const std::size_t w = ws - span;
  if (d == 0) return sheared;
  std::vector<Tensor<T>> channels;
  channels.reserve(c);
  for (std::size_t ch = 0; ch < c; ++ch)
    channels.push_back(narrow(narrow(sheared, 0, ch, 1), 2, d * ch, w));
  return concat(channels, 0);
}

// Stage-i mask attention map as tokens [H_i*W_i, 2^i*C]. disable_delta is an
// ablation/diagnostic switch that bypasses the sigmoid branch, leaving the
// shift-back of the conv1x1 projection.
template <typename T>
Tensor<T> mask_attention(const ShiftedMask<T>& ms, const MmParams<T>& p,
                         bool disable_delta = false) {
  const std::size_t nl = ms.bands();
  if (p.w1.extent(1) != nl)
    throw ConfigError("mask_attention: shifted mask has " + std::to_string(nl) +
                      " channels, parameters expect " + std::to_string(p.w1.extent(1)));
  Tensor<T> chw = permute(ms.data, {2, 0, 1});  // [n_lambda, H, Ws]
  Tensor<T> u = conv2d(chw, p.w1, 1, 0, 1);     // [C, H, Ws]
  Tensor<T> guided;
  if (disable_delta) {
    guided = u;
  } else {
    Tensor<T> t = conv2d(u, p.w2, 1, 0, 1);
    t = conv2d(t, p.dw5, 1, 2, p.base_channels());
    guided = mul(u, add_scalar(sigmoid(t), T(1)));  // (1 + delta) in (1, 2)
  }
  Tensor<T> aligned = shift_back_chw(guided, ms.step);  // [C, H, W]
  for (const auto& down : p.downs) aligned = conv2d(aligned, down, 2, 1, 1);
  return to_tokens(aligned);
}

// head_j = (M_j . V_j) A_j; reduces to the unguided head when M_j is one.
template <typename T>
Tensor<T> guided_head(const Tensor<T>& m_j, const Tensor<T>& v_j, const Tensor<T>& a_j) {
  require_same_shape(m_j, v_j, "guided_head");
  return matmul(mul(m_j, v_j), a_j);
}

// Previous-generation mask usage: the initialized input is multiplied by the
// plain mask per channel. Kept as a runtime input mode for ablations.
template <typename T>
HsiCube<T> legacy_mask_input(const HsiCube<T>& h, const Mask2D<T>& m) {
  if (h.height() != m.height() || h.width() != m.width())
    throw DimensionError("legacy_mask_input: cube " + shape_str(h.data.shape()) + " vs mask " +
                         shape_str(m.data.shape()));
  const std::size_t hh = h.height(), w = h.width(), nl = h.bands();
  std::vector<T> out(h.data.numel());
  const auto& hv = h.data.data();
  const auto& mv = m.data.data();
  for (std::size_t x = 0; x < hh; ++x)
    for (std::size_t y = 0; y < w; ++y) {
      const T mask_v = mv[x * w + y];
      for (std::size_t n = 0; n < nl; ++n)
        out[(x * w + y) * nl + n] = hv[(x * w + y) * nl + n] * mask_v;
    }
  return HsiCube<T>(Tensor<T>::from({hh, w, nl}, std::move(out)), h.wavelengths);
}

}  // namespace mst
