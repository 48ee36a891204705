#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "mst/common.hpp"

namespace mst {

// ---------------------------------------------------------------------------
// Architecture descriptor. Stage i of the U-shape runs at H/2^i x W/2^i with
// 2^i * C channels and 2^i*C/dim_head attention heads; depths give the block
// counts per encoder/decoder stage and the bottleneck. The named presets
// differ only in depths. ffn_ratio is frozen at 5 by the parameter/FLOP
// calibration against the published model sizes.
// ---------------------------------------------------------------------------

enum class InputMode { Plain, Legacy };

struct MstConfig {
  std::size_t base_channels = 28;          // C
  std::size_t n_lambda = 28;               // spectral bands
  std::size_t shift_step = 2;              // disperser step d
  std::array<std::size_t, 3> depths{2, 2, 2};
  std::size_t dim_head = 28;               // fixed head width
  std::size_t ffn_ratio = 5;               // FFN expansion
  bool use_smsa = true;
  bool use_mm = true;
  InputMode input_mode = InputMode::Plain;
  std::uint64_t init_seed = 1;

  static constexpr std::size_t stages = 3;  // two downsamples plus bottleneck

  std::size_t stage_channels(std::size_t i) const { return base_channels << i; }
  std::size_t stage_heads(std::size_t i) const { return stage_channels(i) / dim_head; }
  std::size_t stage_blocks(std::size_t i) const { return depths[i]; }

  void validate() const {
    if (base_channels == 0 || n_lambda == 0) throw ConfigError("channel counts must be positive");
    for (std::size_t d : depths)
      if (d == 0) throw ConfigError("stage depths must be positive");
    if (dim_head == 0) throw ConfigError("dim_head must be positive");
    for (std::size_t i = 0; i < stages; ++i)
      if (stage_channels(i) % dim_head != 0)
        throw ConfigError("stage " + std::to_string(i) + " width " +
                          std::to_string(stage_channels(i)) + " not divisible by dim_head " +
                          std::to_string(dim_head));
    if (ffn_ratio == 0) throw ConfigError("ffn_ratio must be positive");
    if (use_mm && base_channels != n_lambda)
      throw ConfigError("mask guidance requires C == n_lambda for shift-back alignment");
  }

  static MstConfig mst_s() { return MstConfig{}; }

  static MstConfig mst_m() {
    MstConfig c;
    c.depths = {2, 4, 4};
    return c;
  }

  static MstConfig mst_l() {
    MstConfig c;
    c.depths = {4, 7, 5};
    return c;
  }

  // Desk-scale configuration for gradient checks and the overfit run.
  static MstConfig toy() {
    MstConfig c;
    c.base_channels = 8;
    c.n_lambda = 8;
    c.depths = {1, 1, 1};
    c.dim_head = 8;
    c.ffn_ratio = 2;
    return c;
  }
};

inline MstConfig config_preset(const std::string& name) {
  if (name == "mst-s") return MstConfig::mst_s();
  if (name == "mst-m") return MstConfig::mst_m();
  if (name == "mst-l") return MstConfig::mst_l();
  if (name == "toy") return MstConfig::toy();
  throw ConfigError("unknown preset '" + name + "' (expected mst-s, mst-m, mst-l, or toy)");
}

// Key-value text format: one "key = value" per line, '#' starts a comment.
inline MstConfig parse_config_text(std::istream& is) {
  MstConfig c;
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(is, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::string key, eq, value;
    std::istringstream ls(line);
    if (!(ls >> key)) continue;
    if (!(ls >> eq) || eq != "=" || !(ls >> value))
      throw FormatError("config line not of the form 'key = value': " + line);
    kv[key] = value;
  }
  auto take = [&kv](const std::string& key, auto& dst) {
    auto it = kv.find(key);
    if (it == kv.end()) return;
    std::istringstream vs(it->second);
    if (!(vs >> dst)) throw FormatError("bad value for config key " + key);
    kv.erase(it);
  };
  take("c", c.base_channels);
  take("n_lambda", c.n_lambda);
  take("d", c.shift_step);
  take("depth1", c.depths[0]);
  take("depth2", c.depths[1]);
  take("depth3", c.depths[2]);
  take("dim_head", c.dim_head);
  take("ffn_ratio", c.ffn_ratio);
  take("init_seed", c.init_seed);
  int flag = -1;
  take("use_smsa", flag);
  if (flag >= 0) c.use_smsa = flag != 0;
  flag = -1;
  take("use_mm", flag);
  if (flag >= 0) c.use_mm = flag != 0;
  auto it = kv.find("input_mode");
  if (it != kv.end()) {
    if (it->second == "plain")
      c.input_mode = InputMode::Plain;
    else if (it->second == "legacy")
      c.input_mode = InputMode::Legacy;
    else
      throw FormatError("input_mode must be plain or legacy");
    kv.erase(it);
  }
  if (!kv.empty()) throw FormatError("unknown config key: " + kv.begin()->first);
  c.validate();
  return c;
}

inline MstConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open config: " + path);
  return parse_config_text(is);
}

inline void write_config(std::ostream& os, const MstConfig& c) {
  os << "c = " << c.base_channels << "\n";
  os << "n_lambda = " << c.n_lambda << "\n";
  os << "d = " << c.shift_step << "\n";
  os << "depth1 = " << c.depths[0] << "\n";
  os << "depth2 = " << c.depths[1] << "\n";
  os << "depth3 = " << c.depths[2] << "\n";
  os << "dim_head = " << c.dim_head << "\n";
  os << "ffn_ratio = " << c.ffn_ratio << "\n";
  os << "use_smsa = " << (c.use_smsa ? 1 : 0) << "\n";
  os << "use_mm = " << (c.use_mm ? 1 : 0) << "\n";
  os << "input_mode = " << (c.input_mode == InputMode::Plain ? "plain" : "legacy") << "\n";
  os << "init_seed = " << c.init_seed << "\n";
}

// Resolve a --config argument: preset name or path to a key-value file.
inline MstConfig resolve_config(const std::string& spec) {
  if (spec == "mst-s" || spec == "mst-m" || spec == "mst-l" || spec == "toy")
    return config_preset(spec);
  return load_config(spec);
}

}  // namespace mst
