#pragma once

#include <cmath>
#include <cstdint>
#include <tuple>
#include <vector>

#include "mst/tensor.hpp"

namespace mst {

// ---------------------------------------------------------------------------
// Spectral-wise multi-head self-attention: each spectral feature map is one
// token, so the attention matrices are d_h x d_h over channels and the cost
// stays linear in the spatial size. A learnable temperature sigma_j rescales
// each head's channel Gram matrix before the softmax, and a convolutional
// position embedding over the value tokens encodes the wavelength ordering.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> to_tokens(const Tensor<T>& chw) {
  if (chw.ndim() != 3) throw DimensionError("to_tokens: want [C,H,W]");
  const std::size_t c = chw.extent(0), h = chw.extent(1), w = chw.extent(2);
  return reshape(permute(chw, {1, 2, 0}), {h * w, c});
}

template <typename T>
Tensor<T> to_chw(const Tensor<T>& tokens, std::size_t h, std::size_t w) {
  if (tokens.ndim() != 2 || tokens.extent(0) != h * w)
    throw DimensionError("to_chw: token count vs spatial extents");
  return permute(reshape(tokens, {h, w, tokens.extent(1)}), {2, 0, 1});
}

template <typename T>
struct SmsaParams {
  Tensor<T> wq, wk, wv;  // [C, C], bias-free projections
  Tensor<T> wout;        // [C, C]
  Tensor<T> sigma;       // [N], one temperature per head
  Tensor<T> pos1, pos2;  // [C, 1, 3, 3] depth-wise kernels of the position embedding
  std::size_t heads = 1;

  std::size_t channels() const { return wq.extent(0); }
  std::size_t head_dim() const { return channels() / heads; }
};

template <typename T>
SmsaParams<T> make_smsa_params(std::size_t channels, std::size_t heads, Rng& rng) {
  if (heads == 0 || channels % heads != 0)
    throw ConfigError("smsa: channel count " + std::to_string(channels) +
                      " not divisible by head count " + std::to_string(heads));
  SmsaParams<T> p;
  p.heads = heads;
  const T bound = T(1) / std::sqrt(static_cast<T>(channels));
  auto init_mat = [&] {
    std::vector<T> v(channels * channels);
    for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
    return Tensor<T>::from({channels, channels}, std::move(v)).set_requires_grad(true);
  };
  p.wq = init_mat();
  p.wk = init_mat();
  p.wv = init_mat();
  p.wout = init_mat();
  // recover plain scaled dot-product attention at initialization
  p.sigma = Tensor<T>::full({heads}, T(1) / std::sqrt(static_cast<T>(channels / heads)))
                .set_requires_grad(true);
  auto init_dw = [&] {
    std::vector<T> v(channels * 9);
    const T b = T(1) / T(3);
    for (auto& x : v) x = static_cast<T>(rng.uniform(-b, b));
    return Tensor<T>::from({channels, 1, 3, 3}, std::move(v)).set_requires_grad(true);
  };
  p.pos1 = init_dw();
  p.pos2 = init_dw();
  return p;
}

template <typename T>
std::vector<Tensor<T>*> smsa_param_list(SmsaParams<T>& p) {
  return {&p.wq, &p.wk, &p.wv, &p.wout, &p.sigma, &p.pos1, &p.pos2};
}

// Q = X Wq, K = X Wk, V = X Wv on flattened tokens [HW, C].
template <typename T>
std::tuple<Tensor<T>, Tensor<T>, Tensor<T>> project_qkv(const Tensor<T>& x,
                                                        const SmsaParams<T>& p) {
  if (x.ndim() != 2 || x.extent(1) != p.channels())
    throw DimensionError("project_qkv: tokens " + shape_str(x.shape()) + " vs C=" +
                         std::to_string(p.channels()));
  return {matmul(x, p.wq), matmul(x, p.wk), matmul(x, p.wv)};
}

// A_j = softmax(sigma_j K_j^T Q_j) over the key-derived axis; head_j = V_j A_j.
// Every output channel is a convex combination of the value channels. When a
// counter is given, the two attention products report their exact MAC count.
template <typename T>
Tensor<T> spectral_attention(const Tensor<T>& q_j, const Tensor<T>& k_j, const Tensor<T>& v_j,
                             const Tensor<T>& sigma_j, MacCounter* counter = nullptr) {
  require_same_shape(q_j, k_j, "spectral_attention");
  require_same_shape(q_j, v_j, "spectral_attention");
  Tensor<T> scores;
  {
    MacScope scope(counter);
    scores = matmul(transpose(k_j), q_j);  // [d_h, d_h]
  }
  Tensor<T> attn = softmax(smul(scores, sigma_j), 0);
  MacScope scope(counter);
  return matmul(v_j, attn);
}

// Position embedding f_p: depth-wise conv3x3 -> GELU -> depth-wise conv3x3
// over the value tokens reshaped to the spatial grid. Bias-free, so
// f_p(0) = 0.
template <typename T>
Tensor<T> position_embedding(const Tensor<T>& v, const SmsaParams<T>& p, std::size_t h,
                             std::size_t w) {
  const std::size_t c = p.channels();
  Tensor<T> grid = to_chw(v, h, w);
  grid = conv2d(grid, p.pos1, 1, 1, c);
  grid = gelu(grid);
  grid = conv2d(grid, p.pos2, 1, 1, c);
  return to_tokens(grid);
}

// Concat heads along channels, project with W, add f_p(V).
template <typename T>
Tensor<T> aggregate_heads(const std::vector<Tensor<T>>& heads, const Tensor<T>& v,
                          const SmsaParams<T>& p, std::size_t h, std::size_t w) {
  Tensor<T> cat = heads.size() == 1 ? heads[0] : concat(heads, 1);
  return add(matmul(cat, p.wout), position_embedding(v, p, h, w));
}

// Full S-MSA on tokens [HW, C]. mask_tokens, when defined, re-weights the
// value tokens per head before the attention mix (head_j = (M_j . V_j) A_j);
// the position embedding still reads the unguided values.
template <typename T>
Tensor<T> smsa_forward(const Tensor<T>& x, const SmsaParams<T>& p, std::size_t h, std::size_t w,
                       const Tensor<T>& mask_tokens = Tensor<T>(), MacCounter* counter = nullptr) {
  auto [q, k, v] = project_qkv(x, p);
  Tensor<T> v_mix = v;
  if (mask_tokens.defined()) {
    require_same_shape(mask_tokens, v, "mask guidance");
    v_mix = mul(mask_tokens, v);
  }
  const std::size_t dh = p.head_dim();
  std::vector<Tensor<T>> heads;
  heads.reserve(p.heads);
  for (std::size_t j = 0; j < p.heads; ++j) {
    Tensor<T> qj = narrow(q, 1, j * dh, dh);
    Tensor<T> kj = narrow(k, 1, j * dh, dh);
    Tensor<T> vj = narrow(v_mix, 1, j * dh, dh);
    heads.push_back(spectral_attention(qj, kj, vj, narrow(p.sigma, 0, j, 1), counter));
  }
  return aggregate_heads(heads, v, p, h, w);
}

// Exact MAC count of the attention products K_j^T Q_j and V_j A_j,
// projections excluded: 2*H*W*C^2/N. For comparison (not implemented here):
// global spatial attention costs 2*(HW)^2*C and window attention with M x M
// windows costs 2*M^2*HW*C; spectral-wise attention is the only one of the
// three whose map stays d_h x d_h, linear in the spatial size with a global
// receptive field.
inline unsigned long long smsa_mac_count(std::size_t h, std::size_t w, std::size_t c,
                                         std::size_t n) {
  if (n == 0 || c % n != 0) throw ConfigError("smsa_mac_count: C not divisible by N");
  return 2ull * h * w * c * c / n;
}

}  // namespace mst
