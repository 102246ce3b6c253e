// celldiff: train/sample/evaluate diffusion denoisers built from conv,
// CellNN, or memristive CellNN blocks, plus dynamics demos and gradient
// verification.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <omp.h>

#include <CLI11.hpp>
#include <json.hpp>

#include "celldiff/cellnn.hpp"
#include "celldiff/data_io.hpp"
#include "celldiff/denoiser.hpp"
#include "celldiff/diffusion.hpp"
#include "celldiff/evalkit.hpp"
#include "celldiff/memristor.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace celldiff;

namespace {

std::string now_iso() {
  const auto t = std::chrono::system_clock::to_time_t(
      std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%S", std::gmtime(&t));
  return std::string(buf) + "Z";
}

// One manifest per run, written next to the outputs.
struct Manifest {
  json doc;
  std::string dir;
  Manifest(const std::string& command, const std::string& out_dir)
      : dir(out_dir) {
    fs::create_directories(dir);
    doc["command"] = command;
    doc["started"] = now_iso();
    doc["outputs"] = json::array();
  }
  void config(const json& cfg) { doc["config"] = cfg; }
  void output(const std::string& path) { doc["outputs"].push_back(path); }
  void finish() {
    doc["finished"] = now_iso();
    std::ofstream out(fs::path(dir) / "manifest.json");
    out << doc.dump(2) << "\n";
  }
};

std::string data_dir_default() {
  const char* env = std::getenv("CELLDIFF_DATA_DIR");
  return env ? env : "";
}

struct DataBundle {
  Dataset train;
  Dataset reference;  // held-out split
  std::string name;
};

DataBundle load_data(const std::string& spec, int toy_count, int image_size,
                     std::uint64_t seed) {
  DataBundle db;
  if (spec == "toy" || spec == "toy-bars" || spec == "toy-blobs") {
    const std::string kind = spec == "toy-blobs" ? "blobs" : "bars";
    const int held = std::max(8, toy_count / 4);
    Dataset all = make_toy_dataset(kind, toy_count + held, image_size, seed);
    db.train = all.slice(0, toy_count);
    db.reference = all.slice(toy_count, toy_count + held);
    db.name = "toy-" + kind;
    return db;
  }
  std::string dir = spec;
  if (spec == "mnist") dir = find_mnist_dir({data_dir_default(), "data/mnist"});
  if (dir.empty() || !fs::exists(dir))
    throw std::runtime_error("dataset not found: " + spec +
                             " (set CELLDIFF_DATA_DIR or pass a directory)");
  db.train = load_mnist_dir(dir, "train");
  db.reference = load_mnist_dir(dir, "t10k");
  db.name = "mnist";
  return db;
}

void write_loss_csv(const std::string& path, const std::vector<LossRow>& log) {
  std::ofstream out(path);
  out << "epoch,step,loss\n";
  char buf[64];
  for (const auto& row : log) {
    std::snprintf(buf, sizeof(buf), "%d,%d,%.17g\n", row.epoch, row.step,
                  row.loss);
    out << buf;
  }
}

// Samples n images cycling over class labels (class-major order).
std::vector<Grid> sample_per_class(const Denoiser& net, const NoiseSchedule& s,
                                   int n, Rng& rng) {
  std::vector<Grid> out;
  const int k = net.cfg.num_classes;
  const int per = (n + k - 1) / k;
  for (int c = 0; c < k && static_cast<int>(out.size()) < n; ++c) {
    const int want = std::min(per, n - static_cast<int>(out.size()));
    auto batch = sample(net, s, want, c, rng);
    for (auto& g : batch) out.push_back(std::move(g));
  }
  return out;
}

ExtractorConfig extractor_config_for(const Dataset& data, std::uint64_t seed) {
  ExtractorConfig cfg;
  cfg.image_size = data.images.at(0).height;
  cfg.image_channels = data.images.at(0).channels;
  cfg.num_classes = data.num_classes;
  cfg.seed = seed;
  if (cfg.image_size >= 28) {  // full MNIST settings
    cfg.epochs = 3;
    cfg.batch_size = 64;
  }
  return cfg;
}

int cmd_train(const std::string& block, const std::string& data_spec,
              int epochs, int batch, std::uint64_t seed, const std::string& out,
              double lr, int features, int image_size, int chain_length,
              int solver_steps, double solver_dt, double alpha, int toy_count,
              const std::string& resume) {
  Manifest mf("train", out);
  DataBundle db = load_data(data_spec, toy_count, image_size, seed + 1000);
  DenoiserConfig dc;
  dc.kind = block_kind_from_name(block);
  dc.base_features = features;
  dc.image_channels = db.train.images.at(0).channels;
  dc.image_size = db.train.images.at(0).height;
  dc.num_classes = db.train.num_classes;
  dc.chain_length = chain_length;
  dc.solver.steps = solver_steps;
  dc.solver.dt = solver_dt;
  dc.solver.alpha = alpha;
  TrainConfig tc;
  tc.epochs = epochs;
  tc.batch_size = batch;
  tc.learning_rate = lr;
  tc.seed = seed;
  tc.chain_length = chain_length;
  mf.config({{"block", block},
             {"data", db.name},
             {"epochs", epochs},
             {"batch", batch},
             {"seed", seed},
             {"lr", lr},
             {"features", features},
             {"image_size", dc.image_size},
             {"chain_length", chain_length},
             {"solver_steps", solver_steps},
             {"solver_dt", solver_dt},
             {"alpha", alpha},
             {"train_images", db.train.count()},
             {"resume", resume}});

  Rng init_rng(seed);
  Denoiser net = build_denoiser(dc, init_rng);
  Trainer trainer(net, tc);
  if (!resume.empty()) {
    Checkpoint ckpt = load_checkpoint(resume);
    restore_trainer(trainer, ckpt);
    trainer.log.clear();
  }
  auto hook = [&](int epoch, const Trainer& tr) {
    char name[64];
    std::snprintf(name, sizeof(name), "ckpt_epoch%04d.cndf", epoch);
    const std::string path = (fs::path(out) / name).string();
    save_checkpoint(path, make_checkpoint(tr));
    mf.output(path);
    if (epoch > 0) {
      double mean = 0.0;
      int cnt = 0;
      for (const auto& row : tr.log)
        if (row.epoch == epoch) {
          mean += row.loss;
          ++cnt;
        }
      std::printf("epoch %d mean loss %.6f\n", epoch, cnt ? mean / cnt : 0.0);
      std::fflush(stdout);
    }
  };
  trainer.run(db.train, hook);
  const std::string loss_path = (fs::path(out) / "loss.csv").string();
  write_loss_csv(loss_path, trainer.log);
  mf.output(loss_path);
  mf.finish();
  return 0;
}

int cmd_sample(const std::string& ckpt_path, int n, int cls,
               std::uint64_t seed, const std::string& out,
               const std::string& format) {
  if (n <= 0) throw CLI::ValidationError("--n", "need at least one sample");
  Manifest mf("sample", out);
  Checkpoint ckpt = load_checkpoint(ckpt_path);
  DenoiserConfig dc = denoiser_config_from_checkpoint(ckpt);
  TrainConfig tc = train_config_from_checkpoint(ckpt);
  Rng build_rng(0);
  Denoiser net = build_denoiser(dc, build_rng);
  restore_denoiser(net, ckpt);
  NoiseSchedule s = make_schedule(tc.chain_length, tc.beta_min, tc.beta_max);
  Rng rng(seed);
  std::vector<Grid> images;
  int cols = 0;
  if (cls >= 0) {
    images = sample(net, s, n, cls, rng);
  } else {
    // one row per class
    const int per = (n + dc.num_classes - 1) / dc.num_classes;
    for (int c = 0; c < dc.num_classes; ++c) {
      auto batch = sample(net, s, per, c, rng);
      for (auto& g : batch) images.push_back(std::move(g));
    }
    cols = per;
  }
  mf.config({{"ckpt", ckpt_path},
             {"n", n},
             {"class", cls},
             {"seed", seed},
             {"format", format}});
  const std::string path =
      (fs::path(out) / ("samples." + format)).string();
  if (format == "png")
    write_png_grid(images, path, cols);
  else
    write_pgm_grid(images, path, cols);
  mf.output(path);
  mf.finish();
  std::printf("wrote %s (%d images)\n", path.c_str(), static_cast<int>(images.size()));
  return 0;
}

int cmd_fid(const std::string& ckpt_path, const std::string& data_spec, int n,
            std::uint64_t seed, const std::string& out, int toy_count) {
  Manifest mf("fid", out);
  Checkpoint ckpt = load_checkpoint(ckpt_path);
  DenoiserConfig dc = denoiser_config_from_checkpoint(ckpt);
  TrainConfig tc = train_config_from_checkpoint(ckpt);
  Rng build_rng(0);
  Denoiser net = build_denoiser(dc, build_rng);
  restore_denoiser(net, ckpt);
  DataBundle db = load_data(data_spec, toy_count, dc.image_size, tc.seed + 1000);
  NoiseSchedule s = make_schedule(tc.chain_length, tc.beta_min, tc.beta_max);
  Rng rng(seed);
  std::vector<Grid> generated = sample_per_class(net, s, n, rng);
  double acc = 0.0;
  Extractor ex = train_feature_extractor(
      db.train, db.reference, extractor_config_for(db.train, seed), &acc);
  const double score = fid(generated, db.reference.images, ex);
  mf.config({{"ckpt", ckpt_path},
             {"data", db.name},
             {"n", n},
             {"seed", seed},
             {"extractor_accuracy", acc}});
  std::printf("method,dataset,n_gen,n_ref,fid\n");
  std::printf("%s,%s,%d,%d,%.6f\n", block_kind_name(dc.kind).c_str(),
              db.name.c_str(), static_cast<int>(generated.size()),
              db.reference.count(), score);
  const std::string csv = (fs::path(out) / "fid.csv").string();
  std::ofstream f(csv);
  f << "method,dataset,n_gen,n_ref,fid\n";
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%s,%s,%d,%d,%.6f\n",
                block_kind_name(dc.kind).c_str(), db.name.c_str(),
                static_cast<int>(generated.size()), db.reference.count(), score);
  f << buf;
  mf.output(csv);
  mf.finish();
  return 0;
}

int cmd_simulate(int size, double lambda, int steps, double dt,
                 std::uint64_t seed, const std::string& out) {
  Manifest mf("simulate", out);
  mf.config({{"demo", "heat"},
             {"size", size},
             {"lambda", lambda},
             {"steps", steps},
             {"dt", dt},
             {"seed", seed}});
  Grid x0(1, size, size, 0.0);
  x0.at(0, size / 2, size / 2) = 1.0;  // hot cell
  const auto traj = heat_diffusion_demo(x0, lambda, steps, dt);
  const std::string csv = (fs::path(out) / "trajectory.csv").string();
  std::ofstream f(csv);
  f << "step,sum,variance\n";
  const double n = static_cast<double>(size) * size;
  double sum0 = traj.front().sum();
  double max_drift = 0.0;
  double prev_var = 0.0;
  bool var_monotone = true;
  for (std::size_t i = 0; i < traj.size(); ++i) {
    const double s = traj[i].sum();
    const double mean = s / n;
    double var = 0.0;
    for (double v : traj[i].data) var += (v - mean) * (v - mean);
    var /= n;
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g\n", i, s, var);
    f << buf;
    max_drift = std::max(max_drift,
                         std::fabs(s - sum0) / std::max(1.0, std::fabs(sum0)));
    if (i > 0 && var > prev_var + 1e-12) var_monotone = false;
    prev_var = var;
  }
  mf.output(csv);
  // a few frames for the eyeball test
  const int stride = std::max(1, static_cast<int>(traj.size() / 5));
  for (std::size_t i = 0; i < traj.size(); i += static_cast<std::size_t>(stride)) {
    char name[48];
    std::snprintf(name, sizeof(name), "frame_%04zu.pgm", i);
    const std::string p = (fs::path(out) / name).string();
    write_pgm_grid({traj[i]}, p, 1);
    mf.output(p);
  }
  mf.finish();
  std::printf("heat demo: %d steps, sum drift %.3e (<= 1e-9 expected), "
              "variance monotone: %s\n",
              steps, max_drift, var_monotone ? "yes" : "NO");
  return (max_drift <= 1e-9 && var_monotone) ? 0 : 1;
}

int cmd_sweep(double amp, double freq, int cycles, double dt,
              const std::string& out) {
  Manifest mf("memristor-sweep", out);
  mf.config({{"amp", amp}, {"freq", freq}, {"cycles", cycles}, {"dt", dt}});
  TaoxParams p;
  const auto trace = memristor_sweep(p, amp, freq, cycles, dt);
  const std::string csv = (fs::path(out) / "sweep.csv").string();
  std::ofstream f(csv);
  f << "t,v,i,m\n";
  char buf[160];
  for (const auto& row : trace) {
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g,%.17g\n", row.t, row.v,
                  row.i, row.m);
    f << buf;
  }
  mf.output(csv);
  mf.finish();
  std::printf("sweep: %zu samples -> %s\n", trace.size(), csv.c_str());
  return 0;
}

// Finite differences against the tape for one standalone block.
int cmd_gradcheck(const std::string& block, int size, int steps, double tol,
                  std::uint64_t seed, const std::string& out) {
  Manifest mf("gradcheck", out);
  const BlockKind kind = block_kind_from_name(block);
  const int in_ch = 2, out_ch = 4;
  ParamStore store;
  TemplateSet ts = TemplateSet::create(store, "blk", out_ch, in_ch, 1);
  Rng rng(seed);
  ts.randomize(store, rng);
  SolverConfig sc;
  sc.steps = steps;
  sc.dt = 0.01;
  Grid u(in_ch, size, size);
  rng.fill_uniform(u.data.data(), u.data.size(), -0.9, 0.9);
  TaoxParams taox;

  auto forward_loss = [&]() {
    Tape tape(&store);
    NodeId un = tape.input(u);
    NodeId y;
    switch (kind) {
      case BlockKind::Conv: {
        NodeId h = tape.conv2d(un, tape.param(ts.control), 1, Boundary::Zero);
        h = tape.channel_bias(h, tape.param(ts.bias));
        h = tape.nonlin(h, Nonlin::Leaky, 0.01);
        y = tape.conv2d(h, tape.param(ts.feedback), 1, Boundary::Zero);
        y = tape.nonlin(y, Nonlin::Leaky, 0.01);
        break;
      }
      case BlockKind::CellNN:
        y = record_integrate_layer(tape, un, ts, sc);
        break;
      case BlockKind::MCellNN:
        y = record_integrate_mlayer(tape, un, ts, taox, sc);
        break;
    }
    NodeId l = tape.sum_sq(y);
    return std::make_pair(l, std::move(tape));
  };

  auto [loss, tape] = forward_loss();
  auto grads = tape.backprop(loss, {ts.feedback, ts.control, ts.bias});
  double worst = 0.0;
  for (ParamId pid : {ts.feedback, ts.control, ts.bias}) {
    auto fd = finite_diff_param(store, pid, [&]() {
      auto [l, t] = forward_loss();
      return t.scalar_value(l);
    }, 1e-4);
    worst = std::max(worst, max_rel_error(grads[pid], fd));
  }
  std::printf("gradcheck %s: max relative error %.3e (tolerance %.1e): %s\n",
              block.c_str(), worst, tol, worst < tol ? "PASS" : "FAIL");
  mf.config({{"block", block},
             {"size", size},
             {"steps", steps},
             {"tol", tol},
             {"seed", seed},
             {"max_rel_error", worst}});
  mf.finish();
  return worst < tol ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"continuous-time cellular denoisers for diffusion image generation"};
  app.set_config("--config", "", "config file with key = value lines");
  int threads = 0;
  app.add_option("--threads", threads, "OpenMP thread cap (0 = default)");

  std::string block = "conv", data_spec = "toy", out_dir = "out";
  std::string ckpt, format = "pgm", resume;
  int epochs = 10, batch = 16, n = 16, cls = -1, features = 32;
  int image_size = 8, chain_length = 400, solver_steps = 100, toy_count = 1000;
  int size = 32, steps = 200, sweep_cycles = 3;
  double lr = 1e-4, solver_dt = 0.01, alpha = 0.01, lambda = 0.1, dt = 0.01;
  double amp = 1.0, freq = 1.0, sweep_dt = 1e-3, tol = 1e-4;
  std::uint64_t seed = 0;

  auto* tr = app.add_subcommand("train", "train a denoiser");
  tr->add_option("--block", block, "conv|cellnn|mcellnn")->required();
  tr->add_option("--data", data_spec, "toy|toy-blobs|mnist|<dir>");
  tr->add_option("--epochs", epochs);
  tr->add_option("--batch", batch);
  tr->add_option("--seed", seed);
  tr->add_option("--out", out_dir);
  tr->add_option("--lr", lr);
  tr->add_option("--features", features);
  tr->add_option("--image-size", image_size);
  tr->add_option("--chain-length", chain_length);
  tr->add_option("--solver-steps", solver_steps);
  tr->add_option("--solver-dt", solver_dt);
  tr->add_option("--alpha", alpha);
  tr->add_option("--toy-count", toy_count);
  tr->add_option("--resume", resume, "checkpoint to resume from");

  auto* sm = app.add_subcommand("sample", "sample images from a checkpoint");
  sm->add_option("--ckpt", ckpt)->required();
  sm->add_option("--n", n);
  sm->add_option("--class", cls, "class label (-1: one row per class)");
  sm->add_option("--seed", seed);
  sm->add_option("--out", out_dir);
  sm->add_option("--format", format, "pgm|png");

  auto* fd = app.add_subcommand("fid", "score a checkpoint against a reference set");
  fd->add_option("--gen-ckpt", ckpt)->required();
  fd->add_option("--data", data_spec);
  fd->add_option("--n", n);
  fd->add_option("--seed", seed);
  fd->add_option("--out", out_dir);
  fd->add_option("--toy-count", toy_count);

  auto* si = app.add_subcommand("simulate", "heat-diffusion demo");
  std::string demo = "heat";
  si->add_option("--demo", demo, "heat");
  si->add_option("--size", size);
  si->add_option("--lambda", lambda);
  si->add_option("--steps", steps);
  si->add_option("--dt", dt);
  si->add_option("--seed", seed);
  si->add_option("--out", out_dir);

  auto* sw = app.add_subcommand("memristor-sweep", "drive the isolated device");
  sw->add_option("--amp", amp);
  sw->add_option("--freq", freq);
  sw->add_option("--cycles", sweep_cycles);
  sw->add_option("--dt", sweep_dt);
  sw->add_option("--out", out_dir);

  auto* gc = app.add_subcommand("gradcheck", "finite differences vs backprop");
  gc->add_option("--block", block, "conv|cellnn|mcellnn")->required();
  gc->add_option("--size", size)->default_val(8);
  gc->add_option("--steps", steps)->default_val(20);
  gc->add_option("--tol", tol);
  gc->add_option("--seed", seed);
  gc->add_option("--out", out_dir);

  app.require_subcommand(1);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 2;
  }
  if (threads > 0) omp_set_num_threads(threads);

  try {
    if (tr->parsed())
      return cmd_train(block, data_spec, epochs, batch, seed, out_dir, lr,
                       features, image_size, chain_length, solver_steps,
                       solver_dt, alpha, toy_count, resume);
    if (sm->parsed()) return cmd_sample(ckpt, n, cls, seed, out_dir, format);
    if (fd->parsed())
      return cmd_fid(ckpt, data_spec, n, seed, out_dir, toy_count);
    if (si->parsed()) {
      if (demo != "heat") throw CLI::ValidationError("--demo", "only 'heat'");
      return cmd_simulate(size, lambda, steps, dt, seed, out_dir);
    }
    if (sw->parsed()) return cmd_sweep(amp, freq, sweep_cycles, sweep_dt, out_dir);
    if (gc->parsed())
      return cmd_gradcheck(block, size, steps, tol, seed, out_dir);
  } catch (const CLI::ValidationError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
