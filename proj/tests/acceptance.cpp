// Acceptance suite: one line per criterion, nonzero exit if a gating
// criterion fails. Runs everything from the library surface; the reference
// values and tolerances are pinned in code.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "mst/audit.hpp"
#include "mst/cassi.hpp"
#include "mst/gradcheck.hpp"
#include "mst/mask_guide.hpp"
#include "mst/model.hpp"
#include "mst/training.hpp"

namespace {

int failures = 0;

void report(int criterion, bool pass, const std::string& detail, bool gating = true) {
  std::printf("%s criterion %d: %s%s\n", pass ? "PASS" : "FAIL", criterion, detail.c_str(),
              gating ? "" : " [non-gating]");
  if (!pass && gating) ++failures;
  std::fflush(stdout);
}

// --- criterion 1: efficiency table ------------------------------------------

void criterion_efficiency() {
  struct Row {
    const char* name;
    mst::MstConfig cfg;
    double params_m, flops_g;
  };
  const Row rows[] = {{"MST-S", mst::MstConfig::mst_s(), 0.93, 12.96},
                      {"MST-M", mst::MstConfig::mst_m(), 1.50, 18.07},
                      {"MST-L", mst::MstConfig::mst_l(), 2.03, 28.15}};
  bool pass = true;
  std::string detail = "params/FLOPs vs published table at 256x256, tolerance 10%:";
  for (const auto& row : rows) {
    const double p = static_cast<double>(mst::count_params(row.cfg)) / 1e6;
    const double f = static_cast<double>(mst::count_flops(row.cfg, 256, 256)) / 1e9;
    const bool ok = std::abs(p - row.params_m) <= 0.10 * row.params_m &&
                    std::abs(f - row.flops_g) <= 0.10 * row.flops_g;
    pass = pass && ok;
    char buf[160];
    std::snprintf(buf, sizeof(buf), " %s %.3fM/%.2fG vs %.2fM/%.2fG", row.name, p, f,
                  row.params_m, row.flops_g);
    detail += buf;

    // cross-check: the analytic count equals enumerating the built model
    mst::MstModel<float> model(row.cfg);
    unsigned long long enumerated = 0;
    for (auto& [name, param] : model.named_params()) enumerated += param->numel();
    pass = pass && enumerated == mst::count_params(row.cfg);
  }
  report(1, pass, detail);
}

// --- criterion 2: complexity-formula equality --------------------------------

void criterion_mac_equality() {
  struct Combo {
    std::size_t h, w, c, n;
  };
  const Combo grid[] = {{1, 1, 1, 1},  {4, 4, 4, 1},  {4, 4, 4, 2},   {4, 4, 4, 4},
                        {8, 8, 8, 2},  {8, 8, 8, 4},  {16, 16, 8, 2}, {16, 8, 6, 3},
                        {5, 7, 4, 2},  {3, 3, 10, 5}, {12, 4, 6, 6},  {2, 16, 12, 4},
                        {16, 16, 16, 8}};
  bool pass = true;
  std::size_t checked = 0;
  for (const auto& g : grid) {
    mst::Rng rng(1000 + checked);
    auto params = mst::make_smsa_params<double>(g.c, g.n, rng);
    std::vector<double> xv(g.h * g.w * g.c);
    for (auto& v : xv) v = rng.uniform(-1, 1);
    auto x = mst::Tensor<double>::from({g.h * g.w, g.c}, std::move(xv));
    mst::MacCounter counter;
    mst::smsa_forward(x, params, g.h, g.w, mst::Tensor<double>(), &counter);
    pass = pass && counter.macs == mst::smsa_mac_count(g.h, g.w, g.c, g.n);
    ++checked;
  }
  report(2, pass,
         "instrumented attention MACs equal 2HWC^2/N exactly on " + std::to_string(checked) +
             " (H,W,C,N) combinations");
}

// --- criterion 3: physics round trips -----------------------------------------

void criterion_physics() {
  bool pass = true;
  mst::Rng pick(77);
  for (int iter = 0; iter < 50; ++iter) {
    const std::size_t h = 2 + pick.uniform_index(8);
    const std::size_t w = 2 + pick.uniform_index(8);
    const std::size_t nl = 1 + pick.uniform_index(7);
    const std::size_t d = pick.uniform_index(4);
    auto scene = mst::generate_scene<double>(500 + iter, h, w, nl);
    auto mask = mst::generate_mask<double>(900 + iter, h, w, 0.5);
    auto fp = mst::modulate(scene, mask);
    auto fpp = mst::disperse(fp, d);
    auto y = mst::measure(fpp);

    pass = pass && y.width() == w + d * (nl - 1);

    auto back = mst::shift_back_cube(fpp);
    pass = pass && back.data.data() == fp.data.data();

    double e0 = 0, e2 = 0;
    for (double v : fp.data.data()) e0 += v;
    for (double v : y.data.data()) e2 += v;
    pass = pass && std::abs(e2 - e0) <= 1e-4 * std::max(1.0, std::abs(e0));

    auto ms = mst::shift_mask(mask, d, nl);
    auto mback = mst::shift_back_cube(ms);
    for (std::size_t n = 0; n < nl && pass; ++n)
      for (std::size_t x = 0; x < h && pass; ++x)
        for (std::size_t yy = 0; yy < w; ++yy)
          if (mback.at(x, yy, n) != mask.data.at({x, yy})) {
            pass = false;
            break;
          }
  }
  // the standard geometry: 256 -> 310 for d=2, 28 bands
  auto mask = mst::generate_mask<float>(3, 256, 256, 0.5);
  pass = pass && mst::shift_mask(mask, 2, 28).width() == 310;
  report(3, pass,
         "width law, energy conservation, exact shear/shift-back round trips over 50 random "
         "configurations (incl. 256->310)");
}

// --- criterion 4: gradient suite ------------------------------------------------

void criterion_gradients() {
  auto reports = mst::gradcheck_suite("all");
  double worst = 0;
  for (const auto& r : reports) worst = std::max(worst, r.max_rel_err);
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "central finite differences at 64-bit over %zu parameter groups, max relative "
                "error %.3e (gate 1e-4)",
                reports.size(), worst);
  report(4, worst < 1e-4, buf);
}

// --- criterion 5: mechanism equivalences ----------------------------------------

void criterion_mechanisms() {
  bool pass_a = true, pass_b = true, pass_c = true, pass_d = true;

  {  // (a) all-ones mask attention == unguided S-MSA, whole model, bitwise
    auto cfg = mst::MstConfig::toy();
    mst::MstModel<float> guided(cfg);
    auto cfg_off = cfg;
    cfg_off.use_mm = false;
    mst::MstModel<float> plain(cfg_off);
    {
      // share every common weight
      std::vector<std::pair<std::string, mst::Tensor<float>*>> src = guided.named_params();
      std::vector<std::pair<std::string, mst::Tensor<float>*>> dst = plain.named_params();
      std::size_t si = 0;
      for (auto& [name, param] : dst) {
        while (si < src.size() && src[si].first != name) ++si;
        if (si == src.size()) {
          pass_a = false;
          break;
        }
        param->data() = src[si].second->data();
      }
    }
    auto scene = mst::generate_scene<float>(61, 16, 16, 8);
    auto mask = mst::generate_mask<float>(62, 16, 16, 0.5);
    auto h = mst::init_input(mst::measure(mst::disperse(mst::modulate(scene, mask), 2)), 2, 8);

    mst::NoGradScope ng;
    mst::ForwardHooks<float> hooks;
    for (std::size_t i = 0; i < 3; ++i) {
      const std::size_t side = std::size_t{16} >> i;
      hooks.mask_maps.push_back(
          mst::Tensor<float>::full({side * side, cfg.stage_channels(i)}, 1.0f));
    }
    auto out_ones = guided.forward(h, mask, &hooks);
    auto out_plain = plain.forward(h, mask);
    pass_a = out_ones.data.data() == out_plain.data.data();
  }

  {  // (b) delta-branch-disabled mask attention == shift-back of the W1 projection
    mst::Rng rng(63);
    const std::size_t hh = 6, ww = 8, nl = 4, d = 2;
    auto mask = mst::generate_mask<double>(64, hh, ww, 0.5);
    auto ms = mst::shift_mask(mask, d, nl);
    auto p = mst::make_mm_params<double>(nl, nl, 0, rng);
    auto tokens = mst::mask_attention(ms, p, /*disable_delta=*/true);

    for (std::size_t ch = 0; ch < nl && pass_b; ++ch)
      for (std::size_t x = 0; x < hh && pass_b; ++x)
        for (std::size_t y = 0; y < ww; ++y) {
          double acc = 0;  // conv1x1 in the library's channel order
          for (std::size_t ci = 0; ci < nl; ++ci)
            acc += ms.data.at({x, y + d * ch, ci}) * p.w1.data()[ch * nl + ci];
          if (tokens.at({x * ww + y, ch}) != acc) {
            pass_b = false;
            break;
          }
        }
  }

  {  // (c) legacy input equals per-channel modulation, bitwise
    auto scene = mst::generate_scene<double>(65, 9, 11, 5);
    auto mask = mst::generate_mask<double>(66, 9, 11, 0.5);
    pass_c = mst::legacy_mask_input(scene, mask).data.data() ==
             mst::modulate(scene, mask).data.data();
  }

  {  // (d) spatial permutation equivariance of S-MSA without position embedding
    const std::size_t h = 4, w = 4, c = 4, heads = 2;
    mst::Rng rng(67);
    auto dyadic = [&rng](mst::Shape shape) {
      std::vector<double> v(mst::shape_numel(shape));
      for (auto& x : v)
        x = static_cast<double>(static_cast<long>(rng.uniform_index(17)) - 8) / 8.0;
      return mst::Tensor<double>::from(std::move(shape), std::move(v));
    };
    mst::SmsaParams<double> p;
    p.heads = heads;
    p.wq = dyadic({c, c});
    p.wk = dyadic({c, c});
    p.wv = dyadic({c, c});
    p.wout = dyadic({c, c});
    p.sigma = mst::Tensor<double>::full({heads}, 0.5);
    p.pos1 = mst::Tensor<double>::zeros({c, 1, 3, 3});
    p.pos2 = mst::Tensor<double>::zeros({c, 1, 3, 3});

    auto x = dyadic({h * w, c});
    auto base = mst::smsa_forward(x, p, h, w);
    std::vector<std::size_t> perm(h * w);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    for (std::size_t i = perm.size(); i > 1; --i)
      std::swap(perm[i - 1], perm[rng.uniform_index(i)]);
    std::vector<double> px(x.numel());
    for (std::size_t t = 0; t < h * w; ++t)
      for (std::size_t ch = 0; ch < c; ++ch) px[t * c + ch] = x.data()[perm[t] * c + ch];
    auto shuffled = mst::smsa_forward(mst::Tensor<double>::from({h * w, c}, std::move(px)), p, h, w);
    for (std::size_t t = 0; t < h * w && pass_d; ++t)
      for (std::size_t ch = 0; ch < c; ++ch)
        if (shuffled.at({t, ch}) != base.at({perm[t], ch})) {
          pass_d = false;
          break;
        }
  }

  report(5, pass_a && pass_b && pass_c && pass_d,
         std::string("mechanism equivalences: (a) ones-mask==unguided ") +
             (pass_a ? "ok" : "FAIL") + ", (b) delta-off==shift-back(W1 ms) " +
             (pass_b ? "ok" : "FAIL") + ", (c) legacy==modulate " + (pass_c ? "ok" : "FAIL") +
             ", (d) permutation equivariance " + (pass_d ? "ok" : "FAIL"));
}

// --- criterion 6: toy overfit ----------------------------------------------------

struct OverfitOutcome {
  double base_psnr, final_psnr;
  double final_loss = 0;
  std::vector<double> curve;
};

OverfitOutcome run_overfit() {
  // reproduction ledger: scene seed 7, mask seed 11, init seed 1, train seed 3
  auto cfg = mst::MstConfig::toy();
  cfg.init_seed = 1;
  mst::MstModel<float> model(cfg);
  auto scene = mst::generate_scene<float>(7, 32, 32, 8);
  auto mask = mst::generate_mask<float>(11, 32, 32, 0.5);
  auto y = mst::measure(mst::disperse(mst::modulate(scene, mask), 2));
  auto h = mst::init_input(y, 2, 8);

  mst::TrainConfig tc;
  tc.lr = 4e-4;
  tc.epochs = 1;
  tc.steps_per_epoch = 500;
  tc.seed = 3;
  auto history = mst::train(model, {scene}, mask, tc);

  OverfitOutcome out;
  out.base_psnr = mst::psnr(h, scene);
  out.final_loss = history.back().total;
  mst::NoGradScope ng;
  out.final_psnr = mst::psnr(model.forward(h, mask), scene);
  out.curve.reserve(history.size());
  for (const auto& r : history) out.curve.push_back(r.total);
  return out;
}

double criterion_overfit() {
  const auto t0 = std::chrono::steady_clock::now();
  auto first = run_overfit();
  auto second = run_overfit();
  const auto secs =
      std::chrono::duration_cast<std::chrono::seconds>(std::chrono::steady_clock::now() - t0)
          .count();

  const bool gain_ok = first.final_psnr >= first.base_psnr + 10.0;
  const bool repeat_ok = first.curve == second.curve;
  char buf[240];
  std::snprintf(buf, sizeof(buf),
                "toy overfit (32x32x8, 500 Adam steps, lr 4e-4, seeds scene=7 mask=11 init=1 "
                "train=3): PSNR %.2f -> %.2f dB (gain %.2f, gate +10), repeat curve %s, %llds",
                first.base_psnr, first.final_psnr, first.final_psnr - first.base_psnr,
                repeat_ok ? "identical" : "DIVERGED", static_cast<long long>(secs));
  report(6, gain_ok && repeat_ok, buf);
  return first.final_loss;
}

// --- criterion 7: scope statement + qualitative ablation ---------------------------

void criterion_scope_statement(double overfit_final_loss) {
  std::printf(
      "NOTE: full-dataset benchmark PSNR/SSIM (e.g. the published 35.18 dB MST-L average on the "
      "CAVE/KAIST benchmark) requires those datasets and a multi-day GPU training run; it is "
      "explicitly NOT an acceptance target of this desk-scale artifact.\n");

  // identity-attention baseline on the identical 500-step toy task
  auto cfg = mst::MstConfig::toy();
  cfg.use_smsa = false;
  cfg.use_mm = false;
  cfg.init_seed = 1;
  mst::MstModel<float> model(cfg);
  auto scene = mst::generate_scene<float>(7, 32, 32, 8);
  auto mask = mst::generate_mask<float>(11, 32, 32, 0.5);
  mst::TrainConfig tc;
  tc.epochs = 1;
  tc.steps_per_epoch = 500;
  tc.seed = 3;
  const double baseline = mst::train(model, {scene}, mask, tc).back().total;

  char buf[400];
  std::snprintf(buf, sizeof(buf),
                "qualitative toy-scale ablation on the 500-step overfit task: final loss with "
                "S-MSA+MM %.5f vs identity-attention baseline %.5f (expected lower or equal "
                "within 1e-6; single-scene overfitting does not reward the attention capacity, "
                "so the full-dataset ordering need not reproduce here)",
                overfit_final_loss, baseline);
  report(7, overfit_final_loss <= baseline + 1e-6, buf, /*gating=*/false);
}

// --- criterion 8: metric sanity -----------------------------------------------------

double ref_psnr(const mst::HsiCube<double>& a, const mst::HsiCube<double>& b) {
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
    acc += 10.0 * std::log10(1.0 / mse);
  }
  return acc / static_cast<double>(a.bands());
}

double ref_ssim(const mst::HsiCube<double>& a, const mst::HsiCube<double>& b) {
  double win[121], wsum = 0;
  for (int i = 0; i < 121; ++i) {
    const double dy = i / 11 - 5, dx = i % 11 - 5;
    win[i] = std::exp(-(dx * dx + dy * dy) / 4.5);
    wsum += win[i];
  }
  for (double& v : win) v /= wsum;
  double result = 0;
  for (std::size_t n = 0; n < a.bands(); ++n) {
    double acc = 0;
    std::size_t cnt = 0;
    for (std::size_t x0 = 0; x0 + 11 <= a.height(); ++x0)
      for (std::size_t y0 = 0; y0 + 11 <= a.width(); ++y0) {
        double ma = 0, mb = 0, va = 0, vb = 0, cov = 0;
        for (int i = 0; i < 121; ++i) {
          const double pa = a.at(x0 + i / 11, y0 + i % 11, n);
          const double pb = b.at(x0 + i / 11, y0 + i % 11, n);
          ma += win[i] * pa;
          mb += win[i] * pb;
          va += win[i] * pa * pa;
          vb += win[i] * pb * pb;
          cov += win[i] * pa * pb;
        }
        va -= ma * ma;
        vb -= mb * mb;
        cov -= ma * mb;
        acc += ((2 * ma * mb + 1e-4) * (2 * cov + 9e-4)) /
               ((ma * ma + mb * mb + 1e-4) * (va + vb + 9e-4));
        ++cnt;
      }
    result += acc / static_cast<double>(cnt);
  }
  return result / static_cast<double>(a.bands());
}

void criterion_metrics() {
  auto gt = mst::generate_scene<double>(81, 16, 16, 3);
  bool pass = mst::ssim(gt, gt) == 1.0 && std::isinf(mst::psnr(gt, gt));

  {  // constant unit offset at unit peak: exactly 0 dB
    std::vector<double> v = gt.data.data();
    for (auto& x : v) x += 1.0;
    mst::HsiCube<double> shifted(mst::Tensor<double>::from(gt.data.shape(), std::move(v)));
    pass = pass && std::abs(mst::psnr(shifted, gt, 1.0)) < 1e-12;
  }

  double worst_psnr = 0, worst_ssim = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    auto a = mst::generate_scene<double>(300 + seed, 14, 14, 3);
    mst::Rng rng(400 + seed);
    std::vector<double> v = a.data.data();
    for (auto& x : v) x = std::clamp(x + rng.uniform(-0.2, 0.2), 0.0, 1.0);
    mst::HsiCube<double> b(mst::Tensor<double>::from(a.data.shape(), std::move(v)));
    worst_psnr = std::max(worst_psnr, std::abs(mst::psnr(b, a) - ref_psnr(b, a)));
    worst_ssim = std::max(worst_ssim, std::abs(mst::ssim(b, a) - ref_ssim(b, a)));
  }
  pass = pass && worst_psnr <= 0.01 && worst_ssim <= 1e-4;
  char buf[200];
  std::snprintf(buf, sizeof(buf),
                "metric sanity: ssim(x,x)=1, psnr(+1 offset)=0 dB, oracle agreement over 20 "
                "pairs (max |dPSNR| %.2e dB, max |dSSIM| %.2e)",
                worst_psnr, worst_ssim);
  report(8, pass, buf);
}

}  // namespace

int main() {
  criterion_efficiency();
  criterion_mac_equality();
  criterion_physics();
  criterion_gradients();
  criterion_mechanisms();
  const double overfit_loss = criterion_overfit();
  criterion_scope_statement(overfit_loss);
  criterion_metrics();
  if (failures == 0) {
    std::printf("acceptance: all gating criteria passed\n");
    return 0;
  }
  std::printf("acceptance: %d gating criterion(s) failed\n", failures);
  return 1;
}
