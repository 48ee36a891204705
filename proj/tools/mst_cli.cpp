// Command-line surface for the CASSI simulator and the spectral transformer:
// simulate / train / reconstruct / eval / count / gradcheck / plot.
// Exit codes: 0 success, 1 usage, 2 format or I/O, 3 acceptance-gate failure.

#include <CLI11.hpp>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "mst/audit.hpp"
#include "mst/cassi.hpp"
#include "mst/config.hpp"
#include "mst/gradcheck.hpp"
#include "mst/model.hpp"
#include "mst/serial.hpp"
#include "mst/training.hpp"

namespace {

using Cube = mst::HsiCube<float>;
using Mask = mst::Mask2D<float>;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitFormat = 2;
constexpr int kExitGate = 3;

mst::NoiseSpec parse_noise(const std::string& spec, std::uint64_t seed) {
  if (spec == "none" || spec.empty()) return mst::NoiseSpec::none();
  const auto colon = spec.find(':');
  const std::string kind = spec.substr(0, colon);
  const std::string arg = colon == std::string::npos ? "" : spec.substr(colon + 1);
  if (kind == "gaussian") {
    if (arg.empty()) throw mst::ConfigError("noise: expected gaussian:SIGMA");
    return mst::NoiseSpec::gaussian(std::stod(arg), seed);
  }
  if (kind == "shot") {
    if (arg.empty()) throw mst::ConfigError("noise: expected shot:BITS");
    return mst::NoiseSpec::shot(static_cast<unsigned>(std::stoul(arg)), seed);
  }
  throw mst::ConfigError("noise: unknown kind '" + kind + "' (none|gaussian:SIGMA|shot:BITS)");
}

Cube load_cube(const std::string& path) { return Cube(mst::load_tensor<float>(path)); }

Mask load_mask(const std::string& path) { return Mask(mst::load_tensor<float>(path)); }

std::string fixed6(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os << std::fixed << std::setprecision(6) << v;
  return os.str();
}

void write_pgm(const std::string& path, const mst::Tensor<float>& plane) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw mst::FormatError("cannot open for write: " + path);
  const std::size_t h = plane.extent(0), w = plane.extent(1);
  os << "P5\n" << w << " " << h << "\n255\n";
  for (const float v : plane.data()) {
    const double clamped = std::clamp(static_cast<double>(v), 0.0, 1.0);
    os.put(static_cast<char>(static_cast<unsigned char>(std::lround(clamped * 255.0))));
  }
  if (!os) throw mst::FormatError("write failed: " + path);
}

// --- simulate -------------------------------------------------------------

struct SimulateArgs {
  std::string scene_path, mask_path, out_prefix, noise = "none";
  std::int64_t synthetic_seed = -1, random_mask_seed = -1;
  std::uint64_t noise_seed = 1;
  std::size_t height = 256, width = 256, bands = 28, d = 2;
  double density = 0.5;
};

int run_simulate(const SimulateArgs& a) {
  Cube scene = a.scene_path.empty()
                   ? mst::generate_scene<float>(static_cast<std::uint64_t>(a.synthetic_seed),
                                                a.height, a.width, a.bands)
                   : load_cube(a.scene_path);
  Mask mask = a.mask_path.empty()
                  ? mst::generate_mask<float>(static_cast<std::uint64_t>(a.random_mask_seed),
                                              scene.height(), scene.width(), a.density)
                  : load_mask(a.mask_path);

  auto fp = mst::modulate(scene, mask);
  auto y = mst::measure(mst::disperse(fp, a.d), parse_noise(a.noise, a.noise_seed));
  auto ms = mst::shift_mask(mask, a.d, scene.bands());

  mst::save_tensor(a.out_prefix + ".meas.hsit", y.data);
  mst::save_tensor(a.out_prefix + ".mask.hsit", mask.data);
  mst::save_tensor(a.out_prefix + ".maskshift.hsit", ms.data);
  mst::save_tensor(a.out_prefix + ".gt.hsit", scene.data);
  std::cout << "measurement " << y.height() << "x" << y.width() << " -> " << a.out_prefix
            << ".meas.hsit\n";
  return kExitOk;
}

// --- train ------------------------------------------------------------------

struct TrainArgs {
  std::string config = "toy", mask_path, weights_out, log_path, noise = "none",
              snapshot_prefix;
  std::size_t scenes = 1, size = 32;
  std::uint64_t scene_seed = 1, random_mask_seed = 1, seed = 1;
  double density = 0.5, lr = 4e-4, lambda_scl = 1.0;
  std::size_t epochs = 1, steps_per_epoch = 100, batch = 1, patch = 0, snapshot_every = 0;
  bool augment = false;
};

int run_train(const TrainArgs& a) {
  mst::MstConfig cfg = mst::resolve_config(a.config);
  mst::MstModel<float> model(cfg);

  std::vector<Cube> scenes;
  for (std::size_t i = 0; i < a.scenes; ++i)
    scenes.push_back(mst::generate_scene<float>(a.scene_seed + i, a.size, a.size, cfg.n_lambda));
  Mask mask = a.mask_path.empty()
                  ? mst::generate_mask<float>(a.random_mask_seed, a.size, a.size, a.density)
                  : load_mask(a.mask_path);

  mst::TrainConfig tc;
  tc.lr = a.lr;
  tc.epochs = a.epochs;
  tc.steps_per_epoch = a.steps_per_epoch;
  tc.batch = a.batch;
  tc.patch = a.patch;
  tc.seed = a.seed;
  tc.augment = a.augment;
  tc.lambda_scl = a.lambda_scl;
  tc.noise = parse_noise(a.noise, a.seed);
  tc.snapshot_every = a.snapshot_every;

  std::function<void(std::size_t, mst::MstModel<float>&)> snap;
  if (!a.snapshot_prefix.empty() && a.snapshot_every != 0)
    snap = [&a](std::size_t step, mst::MstModel<float>& m) {
      m.save(a.snapshot_prefix + ".step" + std::to_string(step) + ".hsib");
    };

  auto history = mst::train(model, scenes, mask, tc, snap);
  if (!a.log_path.empty()) mst::write_history_csv(a.log_path, history);
  if (!a.weights_out.empty()) model.save(a.weights_out);
  std::cout << "steps " << history.size() << " final total " << fixed6(history.back().total)
            << "\n";
  return kExitOk;
}

// --- reconstruct / eval -----------------------------------------------------

int run_reconstruct(const std::string& weights, const std::string& measurement,
                    const std::string& mask_path, const std::string& out) {
  auto model = mst::MstModel<float>::load(weights);
  mst::Measurement<float> y;
  y.data = mst::load_tensor<float>(measurement);
  Mask mask = load_mask(mask_path);
  auto h = mst::init_input(y, model.config().shift_step, model.config().n_lambda);

  mst::NoGradScope ng;
  auto cube = model.forward(h, mask);
  mst::save_tensor(out, cube.data);
  std::cout << "reconstruction " << cube.height() << "x" << cube.width() << "x" << cube.bands()
            << " -> " << out << "\n";
  return kExitOk;
}

int run_eval(const std::string& pred_path, const std::string& gt_path) {
  Cube pred = load_cube(pred_path);
  Cube gt = load_cube(gt_path);
  if (pred.data.shape() != gt.data.shape())
    throw mst::DimensionError("eval: prediction " + mst::shape_str(pred.data.shape()) +
                              " vs ground truth " + mst::shape_str(gt.data.shape()));
  std::cout << "channel,psnr_db,ssim\n";
  double psnr_acc = 0;
  bool psnr_inf = false;
  double ssim_acc = 0;
  for (std::size_t n = 0; n < gt.bands(); ++n) {
    // single-channel views
    auto take = [n](const Cube& c) {
      std::vector<float> v(c.height() * c.width());
      for (std::size_t x = 0; x < c.height(); ++x)
        for (std::size_t y = 0; y < c.width(); ++y) v[x * c.width() + y] = c.at(x, y, n);
      return Cube(mst::Tensor<float>::from({c.height(), c.width(), 1}, std::move(v)));
    };
    Cube pc = take(pred), gc = take(gt);
    const double p = mst::psnr(pc, gc);
    const double s = mst::ssim(pc, gc);
    if (std::isinf(p))
      psnr_inf = true;
    else
      psnr_acc += p;
    ssim_acc += s;
    std::cout << n << ',' << fixed6(p) << ',' << fixed6(s) << "\n";
  }
  const double mean_psnr =
      psnr_inf ? std::numeric_limits<double>::infinity() : psnr_acc / gt.bands();
  std::cout << "mean," << fixed6(mean_psnr) << ',' << fixed6(ssim_acc / gt.bands()) << "\n";
  return kExitOk;
}

// --- count --------------------------------------------------------------------

int run_count(const std::string& config, std::size_t height, std::size_t width,
              const std::string& expect) {
  mst::MstConfig cfg = mst::resolve_config(config);
  const auto params = mst::count_params(cfg);
  const auto flops = mst::count_flops(cfg, height, width);
  std::cout << "params " << params << " (" << fixed6(params / 1e6) << " M)\n";
  std::cout << "flops " << flops << " (" << fixed6(flops / 1e9) << " G) at " << height << "x"
            << width << "\n";
  if (expect.empty()) return kExitOk;

  double want_params = 0, want_flops = 0, tol = 0;
  if (std::sscanf(expect.c_str(), "%lf,%lf,%lf", &want_params, &want_flops, &tol) != 3)
    throw mst::ConfigError("--expect wants PARAMS,FLOPS,TOL");
  const double dp = std::abs(params - want_params) / want_params;
  const double df = std::abs(flops - want_flops) / want_flops;
  std::cout << "expect params " << fixed6(want_params) << " rel diff " << fixed6(dp)
            << ", flops " << fixed6(want_flops) << " rel diff " << fixed6(df) << ", tol "
            << fixed6(tol) << "\n";
  if (dp > tol || df > tol) {
    std::cout << "GATE FAIL\n";
    return kExitGate;
  }
  std::cout << "GATE PASS\n";
  return kExitOk;
}

// --- gradcheck ------------------------------------------------------------------

int run_gradcheck(const std::string& module) {
  auto reports = mst::gradcheck_suite(module);
  double worst = 0;
  std::cout << "group,max_rel_err,checked\n";
  for (const auto& r : reports) {
    std::cout << r.group << ',' << std::scientific << std::setprecision(3) << r.max_rel_err
              << ',' << std::defaultfloat << r.checked << "\n";
    worst = std::max(worst, r.max_rel_err);
  }
  std::cout << "max " << std::scientific << std::setprecision(3) << worst << "\n";
  if (worst >= 1e-4) {
    std::cout << "GATE FAIL\n";
    return kExitGate;
  }
  std::cout << "GATE PASS\n";
  return kExitOk;
}

// --- plot -----------------------------------------------------------------------

int run_plot(const std::string& cube_path, const std::vector<std::size_t>& channels,
             const std::string& out_dir, const std::string& spectral_at,
             const std::string& ref_path) {
  Cube cube = load_cube(cube_path);
  std::filesystem::create_directories(out_dir);

  for (const std::size_t ch : channels) {
    if (ch >= cube.bands()) throw mst::ConfigError("plot: channel index out of range");
    std::vector<float> plane(cube.height() * cube.width());
    for (std::size_t x = 0; x < cube.height(); ++x)
      for (std::size_t y = 0; y < cube.width(); ++y) plane[x * cube.width() + y] = cube.at(x, y, ch);
    write_pgm(out_dir + "/channel" + std::to_string(ch) + ".pgm",
              mst::Tensor<float>::from({cube.height(), cube.width()}, std::move(plane)));
  }

  if (!spectral_at.empty()) {
    std::size_t px = 0, py = 0;
    if (std::sscanf(spectral_at.c_str(), "%zu,%zu", &px, &py) != 2)
      throw mst::ConfigError("--spectral-at wants X,Y");
    if (px >= cube.height() || py >= cube.width())
      throw mst::ConfigError("plot: pixel out of range");

    Cube ref;
    const bool has_ref = !ref_path.empty();
    if (has_ref) {
      ref = load_cube(ref_path);
      if (ref.data.shape() != cube.data.shape())
        throw mst::DimensionError("plot: reference cube shape mismatch");
    }

    std::ofstream os(out_dir + "/spectrum.csv");
    if (!os) throw mst::FormatError("cannot open for write: " + out_dir + "/spectrum.csv");
    os << (has_ref ? "channel,wavelength_nm,value,ref\n" : "channel,wavelength_nm,value\n");
    double sv = 0, sr = 0, svv = 0, srr = 0, svr = 0;
    for (std::size_t n = 0; n < cube.bands(); ++n) {
      const double v = cube.at(px, py, n);
      os << n << ',' << fixed6(cube.wavelengths[n]) << ',' << fixed6(v);
      if (has_ref) {
        const double r = ref.at(px, py, n);
        os << ',' << fixed6(r);
        sv += v;
        sr += r;
        svv += v * v;
        srr += r * r;
        svr += v * r;
      }
      os << "\n";
    }
    if (has_ref) {
      const double nl = static_cast<double>(cube.bands());
      const double num = svr - sv * sr / nl;
      const double den = std::sqrt((svv - sv * sv / nl) * (srr - sr * sr / nl));
      os << "pearson," << fixed6(den == 0 ? (num == 0 ? 1.0 : 0.0) : num / den) << "\n";
    }
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CASSI simulation and mask-guided spectral transformer toolkit"};
  app.require_subcommand(1);

  SimulateArgs sim;
  auto* simulate = app.add_subcommand("simulate", "run the optical forward model");
  auto* sscene = simulate->add_option("--scene", sim.scene_path, "scene cube (HSIT)");
  auto* ssynth = simulate->add_option("--synthetic", sim.synthetic_seed, "synthetic scene seed");
  sscene->excludes(ssynth);
  auto* smask = simulate->add_option("--mask", sim.mask_path, "mask file (HSIT)");
  auto* srand = simulate->add_option("--random-mask", sim.random_mask_seed, "random mask seed");
  smask->excludes(srand);
  simulate->add_option("--height", sim.height);
  simulate->add_option("--width", sim.width);
  simulate->add_option("--lambda", sim.bands, "spectral band count");
  simulate->add_option("--density", sim.density, "random mask density");
  simulate->add_option("--d", sim.d, "dispersion step");
  simulate->add_option("--noise", sim.noise, "none|gaussian:SIGMA|shot:BITS");
  simulate->add_option("--noise-seed", sim.noise_seed);
  simulate->add_option("--out", sim.out_prefix, "output prefix")->required();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "desk-scale training on synthetic scenes");
  train_cmd->add_option("--config", tr.config, "preset (mst-s|mst-m|mst-l|toy) or file");
  train_cmd->add_option("--synthetic-scenes", tr.scenes);
  train_cmd->add_option("--scene-seed", tr.scene_seed);
  train_cmd->add_option("--size", tr.size, "scene extent");
  train_cmd->add_option("--mask", tr.mask_path);
  train_cmd->add_option("--random-mask", tr.random_mask_seed);
  train_cmd->add_option("--density", tr.density);
  train_cmd->add_option("--epochs", tr.epochs);
  train_cmd->add_option("--steps-per-epoch", tr.steps_per_epoch);
  train_cmd->add_option("--batch", tr.batch);
  train_cmd->add_option("--patch", tr.patch);
  train_cmd->add_option("--lr", tr.lr);
  train_cmd->add_option("--lambda-scl", tr.lambda_scl);
  train_cmd->add_option("--seed", tr.seed);
  train_cmd->add_flag("--augment", tr.augment);
  train_cmd->add_option("--noise", tr.noise);
  train_cmd->add_option("--out-weights", tr.weights_out);
  train_cmd->add_option("--log", tr.log_path, "CSV history path");
  train_cmd->add_option("--snapshot-every", tr.snapshot_every);
  train_cmd->add_option("--snapshot-prefix", tr.snapshot_prefix);

  std::string rc_weights, rc_meas, rc_mask, rc_out;
  auto* rec = app.add_subcommand("reconstruct", "run the network on a measurement");
  rec->add_option("--weights", rc_weights)->required();
  rec->add_option("--measurement", rc_meas)->required();
  rec->add_option("--mask", rc_mask)->required();
  rec->add_option("--out", rc_out)->required();

  std::string ev_pred, ev_gt;
  auto* ev = app.add_subcommand("eval", "PSNR/SSIM per channel as CSV");
  ev->add_option("--pred", ev_pred)->required();
  ev->add_option("--gt", ev_gt)->required();

  std::string ct_config = "mst-s", ct_expect;
  std::size_t ct_h = 256, ct_w = 256;
  auto* ct = app.add_subcommand("count", "parameter and FLOP audit");
  ct->add_option("--config", ct_config);
  ct->add_option("--height", ct_h);
  ct->add_option("--width", ct_w);
  ct->add_option("--expect", ct_expect, "PARAMS,FLOPS,TOL gate");

  std::string gc_module = "all";
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  gc->add_option("--module", gc_module, "all|tensor|attention|mask|model");

  std::string pl_cube, pl_out, pl_at, pl_ref;
  std::vector<std::size_t> pl_channels;
  auto* pl = app.add_subcommand("plot", "graymap channels and spectral CSV");
  pl->add_option("--cube", pl_cube)->required();
  pl->add_option("--channels", pl_channels)->delimiter(',');
  pl->add_option("--out-dir", pl_out)->required();
  pl->add_option("--spectral-at", pl_at, "X,Y pixel");
  pl->add_option("--ref", pl_ref, "reference cube for correlation");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);  // prints usage/help
    return e.get_exit_code() == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (simulate->parsed()) {
      if (sim.scene_path.empty() && sim.synthetic_seed < 0)
        throw mst::ConfigError("simulate: need --scene or --synthetic");
      if (sim.mask_path.empty() && sim.random_mask_seed < 0)
        throw mst::ConfigError("simulate: need --mask or --random-mask");
      return run_simulate(sim);
    }
    if (train_cmd->parsed()) return run_train(tr);
    if (rec->parsed()) return run_reconstruct(rc_weights, rc_meas, rc_mask, rc_out);
    if (ev->parsed()) return run_eval(ev_pred, ev_gt);
    if (ct->parsed()) return run_count(ct_config, ct_h, ct_w, ct_expect);
    if (gc->parsed()) return run_gradcheck(gc_module);
    if (pl->parsed()) return run_plot(pl_cube, pl_channels, pl_out, pl_at, pl_ref);
  } catch (const mst::ConfigError& e) {
    std::cerr << e.what() << "\n";
    return kExitUsage;
  } catch (const mst::FormatError& e) {
    std::cerr << e.what() << "\n";
    return kExitFormat;
  } catch (const mst::VersionError& e) {
    std::cerr << e.what() << "\n";
    return kExitFormat;
  } catch (const mst::IntegrityError& e) {
    std::cerr << e.what() << "\n";
    return kExitFormat;
  } catch (const std::exception& e) {
    std::cerr << e.what() << "\n";
    return kExitFormat;
  }
  return kExitUsage;
}
