#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mst/attention.hpp"
#include "mst/cassi.hpp"
#include "mst/config.hpp"
#include "mst/mask_guide.hpp"
#include "mst/serial.hpp"
#include "mst/tensor.hpp"

namespace mst {

// ---------------------------------------------------------------------------
// U-shaped restoration network: conv3x3 embedding, two encoder stages with
// stride-2 conv4x4 downsamplers that double the channels, a bottleneck,
// a mirrored decoder with deconv2x2 upsamplers and concat+conv1x1 skip
// fusions, and a conv3x3 head producing the residual added onto the input.
// Mask-attention maps are computed once per resolution stage and shared by
// every block at that stage.
// ---------------------------------------------------------------------------

template <typename T>
struct LayerNormParams {
  Tensor<T> gamma, beta;
};

template <typename T>
struct FfnParams {
  Tensor<T> expand;   // [rC, C, 1, 1]
  Tensor<T> dw;       // [rC, 1, 3, 3]
  Tensor<T> project;  // [C, rC, 1, 1]
};

// conv1x1 expand -> GELU -> depth-wise conv3x3 -> GELU -> conv1x1 project
template <typename T>
Tensor<T> ffn_forward(const Tensor<T>& chw, const FfnParams<T>& p) {
  Tensor<T> g = conv2d(chw, p.expand, 1, 0, 1);
  g = gelu(g);
  g = conv2d(g, p.dw, 1, 1, p.dw.extent(0));
  g = gelu(g);
  return conv2d(g, p.project, 1, 0, 1);
}

template <typename T>
struct MsabBlock {
  LayerNormParams<T> ln1;  // absent when attention is ablated
  SmsaParams<T> attn;
  LayerNormParams<T> ln2;
  FfnParams<T> ffn;
  bool has_attention = true;
};

// x + attn(ln1(x)), then + ffn(ln2(.)). With attention ablated the block
// reduces to the LN+FFN residual unit.
template <typename T>
Tensor<T> msab_forward(const MsabBlock<T>& b, const Tensor<T>& tokens, std::size_t h,
                       std::size_t w, const Tensor<T>& mask_tokens = Tensor<T>(),
                       MacCounter* counter = nullptr) {
  Tensor<T> x2 = tokens;
  if (b.has_attention) {
    Tensor<T> t = layer_norm(tokens, b.ln1.gamma, b.ln1.beta, 1);
    x2 = add(tokens, smsa_forward(t, b.attn, h, w, mask_tokens, counter));
  }
  Tensor<T> f = layer_norm(x2, b.ln2.gamma, b.ln2.beta, 1);
  return add(x2, to_tokens(ffn_forward(to_chw(f, h, w), b.ffn)));
}

// Per-forward overrides used by diagnostics: when mask_maps is non-empty it
// replaces the computed stage maps (one tokens tensor per stage).
template <typename T>
struct ForwardHooks {
  std::vector<Tensor<T>> mask_maps;
  MacCounter* counter = nullptr;
};

template <typename T>
class MstModel {
 public:
  explicit MstModel(const MstConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(cfg_.init_seed);
    const std::size_t c = cfg_.base_channels, nl = cfg_.n_lambda, r = cfg_.ffn_ratio;

    embed_w_ = conv_init(rng, {c, nl, 3, 3});
    embed_b_ = Tensor<T>::zeros({c}).set_requires_grad(true);

    for (std::size_t i = 0; i < MstConfig::stages; ++i) {
      const std::size_t ci = cfg_.stage_channels(i);
      stage_blocks_[i].clear();
      const std::size_t enc_count = cfg_.stage_blocks(i);
      for (std::size_t k = 0; k < enc_count; ++k)
        stage_blocks_[i].push_back(make_block(rng, ci, cfg_.stage_heads(i), r));
      if (i < 2) {
        // decoder mirror at the same stage width
        for (std::size_t k = 0; k < enc_count; ++k)
          dec_blocks_[i].push_back(make_block(rng, ci, cfg_.stage_heads(i), r));
        down_[i] = conv_init(rng, {2 * ci, ci, 4, 4});
        up_[i] = conv_init(rng, {2 * ci, ci, 2, 2});       // deconv weight [Cin, Cout, 2, 2]
        fuse_[i] = conv_init(rng, {ci, 2 * ci, 1, 1});
      }
      if (cfg_.use_mm) mm_[i] = make_mm_params<T>(c, nl, i, rng);
    }

    head_w_ = conv_init(rng, {nl, c, 3, 3});
    head_b_ = Tensor<T>::zeros({nl}).set_requires_grad(true);
  }

  const MstConfig& config() const { return cfg_; }

  // Deterministic name -> parameter mapping (also the bundle order).
  std::vector<std::pair<std::string, Tensor<T>*>> named_params() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    out.emplace_back("embed.w", &embed_w_);
    out.emplace_back("embed.b", &embed_b_);
    auto add_block = [&out](const std::string& prefix, MsabBlock<T>& b) {
      if (b.has_attention) {
        out.emplace_back(prefix + ".ln1.gamma", &b.ln1.gamma);
        out.emplace_back(prefix + ".ln1.beta", &b.ln1.beta);
        out.emplace_back(prefix + ".attn.wq", &b.attn.wq);
        out.emplace_back(prefix + ".attn.wk", &b.attn.wk);
        out.emplace_back(prefix + ".attn.wv", &b.attn.wv);
        out.emplace_back(prefix + ".attn.wout", &b.attn.wout);
        out.emplace_back(prefix + ".attn.sigma", &b.attn.sigma);
        out.emplace_back(prefix + ".attn.pos1", &b.attn.pos1);
        out.emplace_back(prefix + ".attn.pos2", &b.attn.pos2);
      }
      out.emplace_back(prefix + ".ln2.gamma", &b.ln2.gamma);
      out.emplace_back(prefix + ".ln2.beta", &b.ln2.beta);
      out.emplace_back(prefix + ".ffn.expand", &b.ffn.expand);
      out.emplace_back(prefix + ".ffn.dw", &b.ffn.dw);
      out.emplace_back(prefix + ".ffn.project", &b.ffn.project);
    };
    for (std::size_t i = 0; i < MstConfig::stages; ++i) {
      const std::string stage = i == 2 ? "bottleneck" : "enc" + std::to_string(i);
      for (std::size_t k = 0; k < stage_blocks_[i].size(); ++k)
        add_block(stage + ".block" + std::to_string(k), stage_blocks_[i][k]);
      if (i < 2) {
        out.emplace_back("down" + std::to_string(i) + ".w", &down_[i]);
        out.emplace_back("up" + std::to_string(i) + ".w", &up_[i]);
        out.emplace_back("fuse" + std::to_string(i) + ".w", &fuse_[i]);
        for (std::size_t k = 0; k < dec_blocks_[i].size(); ++k)
          add_block("dec" + std::to_string(i) + ".block" + std::to_string(k), dec_blocks_[i][k]);
      }
      if (cfg_.use_mm) {
        const std::string mm = "mm" + std::to_string(i);
        out.emplace_back(mm + ".w1", &mm_[i].w1);
        out.emplace_back(mm + ".w2", &mm_[i].w2);
        out.emplace_back(mm + ".dw5", &mm_[i].dw5);
        for (std::size_t k = 0; k < mm_[i].downs.size(); ++k)
          out.emplace_back(mm + ".down" + std::to_string(k), &mm_[i].downs[k]);
      }
    }
    out.emplace_back("head.w", &head_w_);
    out.emplace_back("head.b", &head_b_);
    return out;
  }

  HsiCube<T> forward(const HsiCube<T>& h, const Mask2D<T>& mask,
                     const ForwardHooks<T>* hooks = nullptr) {
    const std::size_t hh = h.height(), ww = h.width();
    if (h.bands() != cfg_.n_lambda)
      throw DimensionError("forward: cube has " + std::to_string(h.bands()) +
                           " bands, config expects " + std::to_string(cfg_.n_lambda));
    if (hh % 4 != 0 || ww % 4 != 0)
      throw DimensionError("forward: spatial extents must be multiples of 4, got " +
                           shape_str(h.data.shape()));
    if (mask.height() != hh || mask.width() != ww)
      throw DimensionError("forward: mask/cube spatial mismatch");

    const HsiCube<T> input =
        cfg_.input_mode == InputMode::Legacy ? legacy_mask_input(h, mask) : h;
    MacCounter* counter = hooks ? hooks->counter : nullptr;

    // stage mask-attention maps, computed once and reused by every block
    std::vector<Tensor<T>> maps(MstConfig::stages);
    if (hooks && !hooks->mask_maps.empty()) {
      if (hooks->mask_maps.size() != MstConfig::stages)
        throw ConfigError("forward: hook must override all stage maps");
      maps = hooks->mask_maps;
    } else if (cfg_.use_mm) {
      auto ms = shift_mask(mask, cfg_.shift_step, cfg_.n_lambda);
      for (std::size_t i = 0; i < MstConfig::stages; ++i) maps[i] = mask_attention(ms, mm_[i]);
    }

    Tensor<T> x0 = conv2d(permute(input.data, {2, 0, 1}), embed_w_, embed_b_, 1, 1, 1);

    auto run_stage = [&](std::vector<MsabBlock<T>>& blocks, const Tensor<T>& chw, std::size_t i) {
      const std::size_t sh = chw.extent(1), sw = chw.extent(2);
      Tensor<T> t = to_tokens(chw);
      for (auto& b : blocks) t = msab_forward(b, t, sh, sw, maps[i], counter);
      return to_chw(t, sh, sw);
    };

    Tensor<T> s0 = run_stage(stage_blocks_[0], x0, 0);
    Tensor<T> x1 = conv2d(s0, down_[0], 2, 1, 1);
    Tensor<T> s1 = run_stage(stage_blocks_[1], x1, 1);
    Tensor<T> x2 = conv2d(s1, down_[1], 2, 1, 1);
    Tensor<T> bottom = run_stage(stage_blocks_[2], x2, 2);

    Tensor<T> u1 = conv2d_transpose(bottom, up_[1]);
    Tensor<T> f1 = conv2d(concat(std::vector<Tensor<T>>{u1, s1}, 0), fuse_[1], 1, 0, 1);
    Tensor<T> d1 = run_stage(dec_blocks_[1], f1, 1);

    Tensor<T> u0 = conv2d_transpose(d1, up_[0]);
    Tensor<T> f0 = conv2d(concat(std::vector<Tensor<T>>{u0, s0}, 0), fuse_[0], 1, 0, 1);
    Tensor<T> d0 = run_stage(dec_blocks_[0], f0, 0);

    Tensor<T> residual = conv2d(d0, head_w_, head_b_, 1, 1, 1);
    return HsiCube<T>(add(permute(residual, {1, 2, 0}), input.data), h.wavelengths);
  }

  void save(const std::string& path) {
    NamedTensors<T> entries;
    entries.emplace_back("__config__", config_tensor());
    for (auto& [name, param] : named_params()) entries.emplace_back(name, *param);
    save_bundle(path, entries);
  }

  static MstModel load(const std::string& path) {
    NamedTensors<T> entries = load_bundle<T>(path);
    if (entries.empty() || entries.front().first != "__config__")
      throw IntegrityError("weight bundle is missing the leading __config__ entry");
    MstModel model(config_from_tensor(entries.front().second));
    auto params = model.named_params();
    if (entries.size() != params.size() + 1)
      throw IntegrityError("weight bundle holds " + std::to_string(entries.size() - 1) +
                           " tensors, model expects " + std::to_string(params.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& [name, tensor] = entries[i + 1];
      if (name != params[i].first)
        throw IntegrityError("weight bundle entry '" + name + "', expected '" + params[i].first +
                             "'");
      if (tensor.shape() != params[i].second->shape())
        throw IntegrityError("shape mismatch for '" + name + "': bundle " +
                             shape_str(tensor.shape()) + ", model " +
                             shape_str(params[i].second->shape()));
      params[i].second->data() = tensor.data();
    }
    return model;
  }

 private:
  static Tensor<T> conv_init(Rng& rng, Shape shape) {
    // fan_in = (C_in/g) * k * k, the usual uniform bound
    const std::size_t fan_in = shape[1] * shape[2] * shape[3];
    const T bound = T(1) / std::sqrt(static_cast<T>(fan_in));
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
    return Tensor<T>::from(std::move(shape), std::move(v)).set_requires_grad(true);
  }

  MsabBlock<T> make_block(Rng& rng, std::size_t ci, std::size_t heads, std::size_t r) {
    MsabBlock<T> b;
    b.has_attention = cfg_.use_smsa;
    if (b.has_attention) {
      b.ln1.gamma = Tensor<T>::full({ci}, T(1)).set_requires_grad(true);
      b.ln1.beta = Tensor<T>::zeros({ci}).set_requires_grad(true);
      b.attn = make_smsa_params<T>(ci, heads, rng);
    }
    b.ln2.gamma = Tensor<T>::full({ci}, T(1)).set_requires_grad(true);
    b.ln2.beta = Tensor<T>::zeros({ci}).set_requires_grad(true);
    b.ffn.expand = conv_init(rng, {r * ci, ci, 1, 1});
    b.ffn.dw = conv_init(rng, {r * ci, 1, 3, 3});
    b.ffn.project = conv_init(rng, {ci, r * ci, 1, 1});
    return b;
  }

  Tensor<T> config_tensor() const {
    std::vector<T> v{static_cast<T>(cfg_.base_channels),
                     static_cast<T>(cfg_.n_lambda),
                     static_cast<T>(cfg_.shift_step),
                     static_cast<T>(cfg_.depths[0]),
                     static_cast<T>(cfg_.depths[1]),
                     static_cast<T>(cfg_.depths[2]),
                     static_cast<T>(cfg_.dim_head),
                     static_cast<T>(cfg_.ffn_ratio),
                     static_cast<T>(cfg_.use_smsa ? 1 : 0),
                     static_cast<T>(cfg_.use_mm ? 1 : 0),
                     static_cast<T>(cfg_.input_mode == InputMode::Legacy ? 1 : 0)};
    const std::size_t n = v.size();
    return Tensor<T>::from({n}, std::move(v));
  }

  static MstConfig config_from_tensor(const Tensor<T>& t) {
    if (t.numel() != 11) throw IntegrityError("__config__ entry has unexpected length");
    const auto& v = t.data();
    MstConfig c;
    c.base_channels = static_cast<std::size_t>(v[0]);
    c.n_lambda = static_cast<std::size_t>(v[1]);
    c.shift_step = static_cast<std::size_t>(v[2]);
    c.depths = {static_cast<std::size_t>(v[3]), static_cast<std::size_t>(v[4]),
                static_cast<std::size_t>(v[5])};
    c.dim_head = static_cast<std::size_t>(v[6]);
    c.ffn_ratio = static_cast<std::size_t>(v[7]);
    c.use_smsa = v[8] != T(0);
    c.use_mm = v[9] != T(0);
    c.input_mode = v[10] != T(0) ? InputMode::Legacy : InputMode::Plain;
    return c;
  }

  MstConfig cfg_;
  Tensor<T> embed_w_, embed_b_, head_w_, head_b_;
  std::vector<MsabBlock<T>> stage_blocks_[MstConfig::stages];  // enc0, enc1, bottleneck
  std::vector<MsabBlock<T>> dec_blocks_[2];                    // dec0, dec1
  Tensor<T> down_[2], up_[2], fuse_[2];
  MmParams<T> mm_[MstConfig::stages];
};

}  // namespace mst
