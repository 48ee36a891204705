#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mst/attention.hpp"
#include "mst/mask_guide.hpp"
#include "mst/model.hpp"
#include "mst/tensor.hpp"

namespace mst {

// ---------------------------------------------------------------------------
// Central finite-difference verification of the reverse-mode gradients,
// always on 64-bit tensors. The relative error uses denominator
// max(|analytic|, |numeric|, 1e-3) so exact zeros compare under an absolute
// floor. Exposed through the CLI's gradcheck verb.
// ---------------------------------------------------------------------------

struct GradCheckReport {
  std::string group;
  double max_rel_err = 0.0;
  std::size_t checked = 0;
};

inline double gradcheck_rel_err(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-3});
  return std::abs(analytic - numeric) / denom;
}

inline GradCheckReport check_gradients(std::string group, std::vector<Tensor<double>> params,
                                       const std::function<Tensor<double>()>& forward,
                                       double eps = 1e-5, std::size_t max_entries = 0) {
  for (auto& p : params) p.zero_grad();
  backward(forward());

  GradCheckReport report;
  report.group = std::move(group);
  for (auto& p : params) {
    const std::vector<double> analytic = p.grad();
    const std::size_t n = p.numel();
    const std::size_t step =
        (max_entries == 0 || n <= max_entries) ? 1 : (n + max_entries - 1) / max_entries;
    for (std::size_t i = 0; i < n; i += step) {
      const double saved = p.data()[i];
      p.data()[i] = saved + eps;
      const double up = forward().item();
      p.data()[i] = saved - eps;
      const double down = forward().item();
      p.data()[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      report.max_rel_err = std::max(report.max_rel_err, gradcheck_rel_err(analytic[i], numeric));
      ++report.checked;
    }
  }
  return report;
}

namespace detail {

inline Tensor<double> gradcheck_probe(const Tensor<double>& out, std::uint64_t salt) {
  Rng rng(salt * 0x9e3779b97f4a7c15ull + 1);
  std::vector<double> w(out.numel());
  for (auto& v : w) v = 0.25 + 1.5 * rng.uniform01();
  return sum(mul(out, Tensor<double>::from(out.shape(), std::move(w))));
}

inline Tensor<double> gradcheck_rand(Shape shape, Rng& rng, double lo, double hi, bool grad) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  auto t = Tensor<double>::from(std::move(shape), std::move(v));
  if (grad) t.set_requires_grad(true);
  return t;
}

}  // namespace detail

// Standard probes per module, used by the CLI verb and the acceptance suite.
inline std::vector<GradCheckReport> gradcheck_suite(const std::string& module) {
  std::vector<GradCheckReport> reports;
  const bool all = module == "all";

  if (all || module == "tensor") {
    Rng rng(101);
    {
      auto a = detail::gradcheck_rand({5, 4}, rng, -1, 1, true);
      auto b = detail::gradcheck_rand({4, 3}, rng, -1, 1, true);
      reports.push_back(check_gradients("tensor.matmul", {a, b}, [&] {
        return detail::gradcheck_probe(matmul(a, b), 1);
      }));
    }
    {
      auto x = detail::gradcheck_rand({3, 9, 9}, rng, -1, 1, true);
      auto w = detail::gradcheck_rand({3, 1, 5, 5}, rng, -0.5, 0.5, true);
      reports.push_back(check_gradients("tensor.conv2d_dw5", {x, w}, [&] {
        return detail::gradcheck_probe(conv2d(x, w, 1, 2, 3), 2);
      }));
    }
    {
      auto x = detail::gradcheck_rand({4, 6, 6}, rng, -1, 1, true);
      auto w = detail::gradcheck_rand({6, 2, 4, 4}, rng, -0.5, 0.5, true);
      auto b = detail::gradcheck_rand({6}, rng, -0.5, 0.5, true);
      reports.push_back(check_gradients("tensor.conv2d_strided", {x, w, b}, [&] {
        return detail::gradcheck_probe(conv2d(x, w, b, 2, 1, 2), 3);
      }));
    }
    {
      auto x = detail::gradcheck_rand({2, 3, 3}, rng, -1, 1, true);
      auto w = detail::gradcheck_rand({2, 3, 2, 2}, rng, -0.5, 0.5, true);
      reports.push_back(check_gradients("tensor.conv2d_transpose", {x, w}, [&] {
        return detail::gradcheck_probe(conv2d_transpose(x, w), 4);
      }));
    }
    {
      auto x = detail::gradcheck_rand({4, 6}, rng, -2, 2, true);
      auto g = detail::gradcheck_rand({6}, rng, 0.5, 1.5, true);
      auto b = detail::gradcheck_rand({6}, rng, -0.5, 0.5, true);
      auto s = detail::gradcheck_rand({1}, rng, 0.2, 1.2, true);
      reports.push_back(check_gradients("tensor.pointwise_chain", {x, g, b, s}, [&] {
        auto t = layer_norm(x, g, b, 1);
        t = softmax(gelu(t), 0);
        t = smul(sigmoid(t), s);
        auto n = narrow(permute(t, {1, 0}), 0, 1, 4);
        auto r = reshape(concat(std::vector<Tensor<double>>{n, n}, 1), {4, 8});
        return detail::gradcheck_probe(sqrt_elem(add_scalar(mul(r, r), 1.0)), 5);
      }));
    }
  }

  if (all || module == "attention") {
    Rng rng(202);
    auto p = make_smsa_params<double>(4, 2, rng);
    auto x = detail::gradcheck_rand({6, 4}, rng, -1, 1, true);
    reports.push_back(check_gradients(
        "attention.smsa", {p.wq, p.wk, p.wv, p.wout, p.sigma, p.pos1, p.pos2, x},
        [&] { return detail::gradcheck_probe(smsa_forward(x, p, 2, 3), 6); }));
  }

  if (all || module == "mask") {
    Rng rng(303);
    auto mask = generate_mask<double>(17, 4, 4, 0.5);
    auto ms = shift_mask(mask, 1, 2);
    auto p = make_mm_params<double>(2, 2, 1, rng);
    reports.push_back(check_gradients("mask.mask_attention", {p.w1, p.w2, p.dw5, p.downs[0]},
                                      [&] { return detail::gradcheck_probe(mask_attention(ms, p), 7); }));
  }

  if (all || module == "model") {
    MstConfig cfg;
    cfg.base_channels = 4;
    cfg.n_lambda = 4;
    cfg.shift_step = 1;
    cfg.depths = {1, 1, 1};
    cfg.dim_head = 2;
    cfg.ffn_ratio = 2;
    cfg.init_seed = 11;
    MstModel<double> model(cfg);
    auto scene = generate_scene<double>(21, 8, 8, 4);
    auto mask = generate_mask<double>(22, 8, 8, 0.5);
    auto y = measure(disperse(modulate(scene, mask), 1));
    auto h = init_input(y, 1, 4);
    // every parameter group, sampled entries within each tensor
    std::vector<Tensor<double>> params;
    std::vector<std::string> names;
    for (auto& [name, p] : model.named_params()) {
      params.push_back(*p);
      names.push_back(name);
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      reports.push_back(check_gradients(
          "model." + names[i], {params[i]},
          [&] { return detail::gradcheck_probe(model.forward(h, mask).data, 8); }, 1e-5,
          /*max_entries=*/6));
    }
  }

  if (reports.empty()) throw ConfigError("gradcheck: unknown module '" + module + "'");
  return reports;
}

}  // namespace mst
