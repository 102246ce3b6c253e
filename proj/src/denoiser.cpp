#include "celldiff/denoiser.hpp"

#include <cmath>
#include <stdexcept>

namespace celldiff {

std::string block_kind_name(BlockKind k) {
  switch (k) {
    case BlockKind::Conv: return "conv";
    case BlockKind::CellNN: return "cellnn";
    case BlockKind::MCellNN: return "mcellnn";
  }
  return "?";
}

BlockKind block_kind_from_name(const std::string& name) {
  if (name == "conv") return BlockKind::Conv;
  if (name == "cellnn") return BlockKind::CellNN;
  if (name == "mcellnn") return BlockKind::MCellNN;
  throw std::invalid_argument("unknown block kind '" + name +
                              "' (expected conv|cellnn|mcellnn)");
}

void DenoiserConfig::validate() const {
  if (image_size % 4 != 0)
    throw std::invalid_argument("DenoiserConfig: image size " +
                                std::to_string(image_size) +
                                " is not divisible by 4");
  if (base_features < 1 || image_channels < 1 || num_classes < 1)
    throw std::invalid_argument("DenoiserConfig: counts must be positive");
  if (time_embed_dim < 2 || time_embed_dim % 2 != 0)
    throw std::invalid_argument(
        "DenoiserConfig: time_embed_dim must be even and >= 2");
  if (chain_length < 1)
    throw std::invalid_argument("DenoiserConfig: chain_length must be >= 1");
  solver.validate();
  if (kind == BlockKind::MCellNN) taox.validate();
}

std::vector<double> time_embedding(int t, int T, int dims) {
  if (t < 1 || t > T)
    throw std::invalid_argument("time_embedding: step out of range");
  const double s = static_cast<double>(t) / static_cast<double>(T);
  const int half = dims / 2;
  std::vector<double> emb(static_cast<std::size_t>(dims));
  constexpr double pi = 3.14159265358979323846;
  for (int i = 0; i < half; ++i) {
    const double expo = half > 1 ? static_cast<double>(i) / (half - 1) : 0.0;
    const double omega = pi * std::pow(1000.0, expo);
    emb[static_cast<std::size_t>(2 * i)] = std::sin(s * omega);
    emb[static_cast<std::size_t>(2 * i + 1)] = std::cos(s * omega);
  }
  return emb;
}

namespace {

Grid class_grid(int label, int num_classes, int h, int w) {
  Grid g(num_classes, h, w, 0.0);
  if (label >= num_classes)
    throw std::invalid_argument("class label out of range");
  if (label >= 0) {
    double* p = g.channel(label);
    std::fill(p, p + static_cast<std::size_t>(h) * w, 1.0);
  }
  return g;
}

template <class Ex>
typename Ex::V run_block(Ex& ex, const Denoiser& net, const Denoiser::Block& blk,
                         const typename Ex::V& x, const typename Ex::V& cls,
                         const typename Ex::V& temb) {
  using V = typename Ex::V;
  const SolverConfig& sc = net.cfg.solver;
  V u = ex.concat_channels(x, cls);
  // per-channel bias seen by the block: bias + time_proj * embedding
  V zb = ex.dense(blk.time_proj, temb, blk.bias);
  V core;
  switch (net.cfg.kind) {
    case BlockKind::Conv: {
      V h = ex.conv(u, blk.control, 1, Boundary::Zero);
      h = ex.channel_bias(h, zb);
      h = ex.nonlin(h, sc.nonlinearity, sc.alpha);
      core = ex.conv(h, blk.feedback, 1, Boundary::Zero);
      core = ex.nonlin(core, sc.nonlinearity, sc.alpha);
      break;
    }
    case BlockKind::CellNN: {
      TemplateSet ts = net.block_templates(blk);
      core = integrate_cellnn(ex, u, ts, sc, Boundary::Zero, &zb);
      break;
    }
    case BlockKind::MCellNN: {
      TemplateSet ts = net.block_templates(blk);
      core = integrate_mcellnn(ex, u, ts, net.cfg.taox, sc, Boundary::Zero, &zb);
      break;
    }
  }
  return blk.skip ? ex.add(core, x) : core;
}

template <class Ex>
typename Ex::V run_unet(Ex& ex, const Denoiser& net, const Grid& x_t, int t,
                        int label) {
  using V = typename Ex::V;
  const auto& cfg = net.cfg;
  if (x_t.channels != cfg.image_channels || x_t.height != cfg.image_size ||
      x_t.width != cfg.image_size)
    throw std::invalid_argument("denoiser: input shape " + x_t.shape_str() +
                                " does not match config");
  const int hs = cfg.image_size, k = cfg.num_classes;
  V x = ex.input(x_t);
  V temb = ex.input_vec(time_embedding(t, cfg.chain_length, cfg.time_embed_dim));
  V cls_full = ex.input(class_grid(label, k, hs, hs));
  V cls_half = ex.input(class_grid(label, k, hs / 2, hs / 2));
  V cls_quart = ex.input(class_grid(label, k, hs / 4, hs / 4));

  V e1 = run_block(ex, net, net.blocks[0], x, cls_full, temb);
  e1 = run_block(ex, net, net.blocks[1], e1, cls_full, temb);
  V e2 = ex.avg_pool2(e1);
  e2 = run_block(ex, net, net.blocks[2], e2, cls_half, temb);
  e2 = run_block(ex, net, net.blocks[3], e2, cls_half, temb);
  V bm = ex.avg_pool2(e2);
  bm = run_block(ex, net, net.blocks[4], bm, cls_quart, temb);
  bm = run_block(ex, net, net.blocks[5], bm, cls_quart, temb);
  V d2 = ex.concat_channels(ex.upsample2(bm), e2);
  d2 = run_block(ex, net, net.blocks[6], d2, cls_half, temb);
  d2 = run_block(ex, net, net.blocks[7], d2, cls_half, temb);
  V d1 = ex.concat_channels(ex.upsample2(d2), e1);
  d1 = run_block(ex, net, net.blocks[8], d1, cls_full, temb);
  d1 = run_block(ex, net, net.blocks[9], d1, cls_full, temb);
  V out = ex.conv(d1, net.head_w, 1, Boundary::Zero);
  return ex.channel_bias(out, ex.bias_param(net.head_b));
}

}  // namespace

TemplateSet Denoiser::block_templates(const Block& blk) const {
  TemplateSet ts;
  ts.feedback = blk.feedback;
  ts.control = blk.control;
  ts.bias = blk.bias;
  ts.radius = 1;
  ts.state_channels = blk.cout;
  ts.input_channels = blk.cin + cfg.num_classes;
  return ts;
}

std::vector<ParamId> Denoiser::param_ids() const {
  std::vector<ParamId> ids;
  for (ParamId i = 0; i < params.count(); ++i) ids.push_back(i);
  return ids;
}

Grid Denoiser::predict(const Grid& x_t, int t, int label) const {
  EagerExec ex(params);
  return run_unet(ex, *this, x_t, t, label);
}

NodeId Denoiser::record_predict(Tape& tape, const Grid& x_t, int t,
                                int label) const {
  TapeExec ex(tape);
  return run_unet(ex, *this, x_t, t, label);
}

Denoiser build_denoiser(const DenoiserConfig& cfg, Rng& rng) {
  cfg.validate();
  Denoiser net;
  net.cfg = cfg;
  const int f = cfg.base_features;
  const int k = cfg.num_classes;
  // stage layout: (cin, cout, skip); skip only where channels match
  struct Plan {
    const char* name;
    int cin, cout;
  };
  const Plan plan[10] = {
      {"enc1.a", cfg.image_channels, f}, {"enc1.b", f, f},
      {"enc2.a", f, f},                  {"enc2.b", f, f},
      {"mid.a", f, f},                   {"mid.b", f, f},
      {"dec2.a", 2 * f, f},              {"dec2.b", f, f},
      {"dec1.a", 2 * f, f},              {"dec1.b", f, f},
  };
  for (const auto& p : plan) {
    Denoiser::Block blk;
    blk.cin = p.cin;
    blk.cout = p.cout;
    blk.skip = (p.cin == p.cout);
    const int ic = p.cin + k;
    blk.control = net.params.add(
        std::string(p.name) + ".control", {p.cout, ic, 3, 3},
        std::vector<double>(static_cast<std::size_t>(p.cout) * ic * 9));
    blk.feedback = net.params.add(
        std::string(p.name) + ".feedback", {p.cout, p.cout, 3, 3},
        std::vector<double>(static_cast<std::size_t>(p.cout) * p.cout * 9));
    blk.bias = net.params.add(std::string(p.name) + ".bias", {p.cout},
                              std::vector<double>(static_cast<std::size_t>(p.cout)));
    blk.time_proj = net.params.add(
        std::string(p.name) + ".time_proj", {p.cout, cfg.time_embed_dim},
        std::vector<double>(static_cast<std::size_t>(p.cout) * cfg.time_embed_dim));
    net.blocks.push_back(blk);
  }
  net.head_w = net.params.add(
      "head.w", {cfg.image_channels, f, 3, 3},
      std::vector<double>(static_cast<std::size_t>(cfg.image_channels) * f * 9));
  net.head_b = net.params.add(
      "head.b", {cfg.image_channels},
      std::vector<double>(static_cast<std::size_t>(cfg.image_channels)));

  // Initialization. Control kernels, time projections and the head use a
  // fan-scaled uniform; feedback kernels of the continuous-time kinds start
  // near zero so early integration stays contractive. The conv baseline uses
  // the standard fan scale for its second kernel.
  for (const auto& blk : net.blocks) {
    auto& ctrl = net.params.at(blk.control).value;
    const double sc = 1.0 / std::sqrt(static_cast<double>(blk.cin + k) * 9.0);
    rng.fill_uniform(ctrl.data(), ctrl.size(), -sc, sc);
    auto& fb = net.params.at(blk.feedback).value;
    const double fan_fb = static_cast<double>(blk.cout) * 9.0;
    const double sf = (cfg.kind == BlockKind::Conv) ? 1.0 / std::sqrt(fan_fb)
                                                    : 0.1 / fan_fb;
    rng.fill_uniform(fb.data(), fb.size(), -sf, sf);
    auto& bias = net.params.at(blk.bias).value;
    rng.fill_uniform(bias.data(), bias.size(), -0.01, 0.01);
    auto& tp = net.params.at(blk.time_proj).value;
    const double st = 1.0 / std::sqrt(static_cast<double>(cfg.time_embed_dim));
    rng.fill_uniform(tp.data(), tp.size(), -st, st);
  }
  auto& hw = net.params.at(net.head_w).value;
  const double sh = 1.0 / std::sqrt(static_cast<double>(f) * 9.0);
  rng.fill_uniform(hw.data(), hw.size(), -sh, sh);
  return net;
}

std::size_t expected_parameter_count(const DenoiserConfig& cfg) {
  const std::size_t f = static_cast<std::size_t>(cfg.base_features);
  const std::size_t k = static_cast<std::size_t>(cfg.num_classes);
  const std::size_t e = static_cast<std::size_t>(cfg.time_embed_dim);
  const std::size_t img = static_cast<std::size_t>(cfg.image_channels);
  std::size_t total = 0;
  const std::size_t cins[10] = {img, f, f, f, f, f, 2 * f, f, 2 * f, f};
  for (std::size_t cin : cins)
    total += f * (cin + k) * 9 + f * f * 9 + f + f * e;
  total += img * f * 9 + img;  // head
  return total;
}

}  // namespace celldiff
