#pragma once

#include <cstdint>

#include "mst/config.hpp"

namespace mst {

// ---------------------------------------------------------------------------
// Closed-form parameter and FLOP accounting. Conventions: convolutions count
// H'W' * C_out * (C_in/g) * k^2 multiply-accumulates, token projections
// H*W*C^2, the attention products 2*H*W*C^2/N per stage width; layer norms,
// activations, softmax normalizations and elementwise products are excluded,
// and one MAC is reported as one FLOP (the counting convention behind the
// published model-size tables).
// ---------------------------------------------------------------------------

inline unsigned long long count_params(const MstConfig& cfg) {
  cfg.validate();
  using ull = unsigned long long;
  const ull c = cfg.base_channels, nl = cfg.n_lambda, r = cfg.ffn_ratio;
  ull total = 0;

  total += c * nl * 9 + c;  // embed conv3x3, with bias
  total += nl * c * 9 + nl; // head conv3x3, with bias

  for (std::size_t i = 0; i < MstConfig::stages; ++i) {
    const ull ci = cfg.stage_channels(i);
    const ull ni = cfg.stage_heads(i);
    const ull blocks = cfg.stage_blocks(i) * (i == 2 ? 1 : 2);  // encoder + decoder mirror

    ull per_block = 0;
    if (cfg.use_smsa)
      per_block += 2 * ci          // ln1 affine
                   + 3 * ci * ci   // Q/K/V projections
                   + ci * ci       // output projection
                   + ni            // per-head temperatures
                   + 18 * ci;      // two depth-wise 3x3 position kernels
    per_block += 2 * ci                 // ln2 affine
                 + 2 * r * ci * ci      // FFN expand + project conv1x1
                 + 9 * r * ci;          // FFN depth-wise 3x3
    total += blocks * per_block;

    if (i < 2) {
      total += 2 * ci * ci * 16;  // downsampler conv4x4
      total += 2 * ci * ci * 4;   // upsampler deconv2x2
      total += 2 * ci * ci;       // skip fusion conv1x1
    }
    if (cfg.use_mm) {
      total += c * nl + c * c + 25 * c;  // w1, w2, depth-wise 5x5
      for (std::size_t j = 0; j < i; ++j) {
        const ull cj = static_cast<ull>(cfg.base_channels) << j;
        total += 2 * cj * cj * 16;  // stage downsamplers of the mask branch
      }
    }
  }
  return total;
}

inline unsigned long long count_flops(const MstConfig& cfg, std::size_t height,
                                      std::size_t width) {
  cfg.validate();
  using ull = unsigned long long;
  const ull c = cfg.base_channels, nl = cfg.n_lambda, r = cfg.ffn_ratio;
  const ull hw = static_cast<ull>(height) * width;
  ull total = 0;

  total += hw * c * nl * 9;  // embed
  total += hw * nl * c * 9;  // head

  for (std::size_t i = 0; i < MstConfig::stages; ++i) {
    const ull ci = cfg.stage_channels(i);
    const ull ni = cfg.stage_heads(i);
    const ull pi = hw >> (2 * i);
    const ull blocks = cfg.stage_blocks(i) * (i == 2 ? 1 : 2);

    ull per_block = 0;
    if (cfg.use_smsa)
      per_block += 3 * pi * ci * ci        // Q/K/V projections
                   + 2 * pi * ci * ci / ni // attention products (K^T Q and V A)
                   + pi * ci * ci          // output projection
                   + 18 * pi * ci;         // position embedding convs
    per_block += 2 * r * pi * ci * ci      // FFN conv1x1 pair
                 + 9 * r * pi * ci;        // FFN depth-wise conv
    total += blocks * per_block;

    if (i < 2) {
      total += (pi / 4) * (2 * ci) * ci * 16;  // downsampler
      total += pi * ci * (2 * ci);             // upsampler (one tap per output)
      total += pi * ci * (2 * ci);             // skip fusion conv1x1
    }
    if (cfg.use_mm) {
      const ull sheared = static_cast<ull>(height) * (width + cfg.shift_step * (nl - 1));
      total += sheared * (c * nl + c * c + 25 * c);
      for (std::size_t j = 0; j < i; ++j) {
        const ull cj = static_cast<ull>(cfg.base_channels) << j;
        total += (hw >> (2 * (j + 1))) * (2 * cj) * cj * 16;
      }
    }
  }
  return total;
}

}  // namespace mst
