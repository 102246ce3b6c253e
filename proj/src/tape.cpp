#include "celldiff/tape.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>

#include "celldiff/kernels.hpp"

namespace celldiff {

namespace {

std::size_t prod(const std::vector<int>& dims) {
  std::size_t p = 1;
  for (int d : dims) p *= static_cast<std::size_t>(d);
  return p;
}

[[noreturn]] void fail(const std::string& msg) {
  throw std::invalid_argument(msg);
}

}  // namespace

ParamId ParamStore::add(std::string name, std::vector<int> shape,
                        std::vector<double> value) {
  if (prod(shape) != value.size())
    fail("ParamStore::add: shape/value size mismatch for '" + name + "'");
  entries.push_back({std::move(name), std::move(shape), std::move(value)});
  return static_cast<ParamId>(entries.size()) - 1;
}

ParamStore::Entry& ParamStore::at(ParamId id) {
  if (id < 0 || id >= count())
    fail("ParamStore: unregistered parameter id " + std::to_string(id));
  return entries[static_cast<std::size_t>(id)];
}

const ParamStore::Entry& ParamStore::at(ParamId id) const {
  if (id < 0 || id >= count())
    fail("ParamStore: unregistered parameter id " + std::to_string(id));
  return entries[static_cast<std::size_t>(id)];
}

std::size_t ParamStore::total_size() const {
  std::size_t n = 0;
  for (const auto& e : entries) n += e.value.size();
  return n;
}

NodeId Tape::push_node(std::vector<int> dims, bool needs_grad) {
  Node n;
  n.dims = std::move(dims);
  n.val.resize(prod(n.dims));
  n.needs_grad = needs_grad;
  nodes_.push_back(std::move(n));
  return NodeId{static_cast<int>(nodes_.size()) - 1};
}

NodeId Tape::make_node(std::vector<int> dims, bool needs_grad) {
  return push_node(std::move(dims), needs_grad);
}

void Tape::record_op(std::function<void(Tape&)> forward,
                     std::function<void(Tape&)> backward) {
  ops_.push_back({std::move(forward), std::move(backward)});
  ops_.back().fwd(*this);
}

NodeId Tape::input(const Grid& g) {
  NodeId n = push_node({g.channels, g.height, g.width}, false);
  node(n).val = g.data;
  return n;
}

NodeId Tape::input_vec(std::vector<double> v) {
  NodeId n = push_node({static_cast<int>(v.size())}, false);
  node(n).val = std::move(v);
  return n;
}

NodeId Tape::zeros(int channels, int height, int width) {
  return push_node({channels, height, width}, false);
}

NodeId Tape::param(ParamId id) {
  if (!params_) fail("Tape: no parameter store attached");
  auto it = param_nodes_.find(id);
  if (it != param_nodes_.end()) return it->second;
  const auto& e = params_->at(id);
  NodeId n = push_node(e.shape, true);
  node(n).val = e.value;
  param_nodes_[id] = n;
  return n;
}

Grid Tape::grid_value(NodeId n) const {
  const auto& nd = node(n);
  if (nd.dims.size() != 3) fail("Tape: node is not grid-shaped");
  Grid g(nd.dims[0], nd.dims[1], nd.dims[2]);
  g.data = nd.val;
  return g;
}

double Tape::scalar_value(NodeId n) const {
  const auto& nd = node(n);
  if (nd.val.size() != 1) fail("Tape: node is not a scalar");
  return nd.val[0];
}

std::vector<double>& Tape::grad_mut(NodeId n) {
  Node& nd = node(n);
  if (nd.grd.size() != nd.val.size()) nd.grd.assign(nd.val.size(), 0.0);
  return nd.grd;
}

const std::vector<double>& Tape::grad(NodeId n) const {
  static const std::vector<double> empty;
  const Node& nd = node(n);
  return nd.grd.empty() ? empty : nd.grd;
}

// ---------------------------------------------------------------------------
// operations
// ---------------------------------------------------------------------------

NodeId Tape::conv2d(NodeId x, NodeId w, int radius, Boundary b) {
  const auto& xd = dims(x);
  const auto& wd = dims(w);
  if (xd.size() != 3) fail("conv2d: input is not grid-shaped");
  if (wd.size() != 4) fail("conv2d: kernel must have 4 dims");
  const int k = 2 * radius + 1;
  if (wd[2] != k || wd[3] != k)
    fail("conv2d: kernel spatial size " + std::to_string(wd[2]) + "x" +
         std::to_string(wd[3]) + " does not match radius " +
         std::to_string(radius));
  if (wd[1] != xd[0])
    fail("conv2d: kernel expects " + std::to_string(wd[1]) +
         " input channels, grid has " + std::to_string(xd[0]));
  const int oc = wd[0], ic = wd[1], h = xd[1], ww = xd[2];
  NodeId out = push_node({oc, h, ww}, needs_grad(x) || needs_grad(w));
  record_op(
      [=](Tape& t) {
        kernels::conv2d(t.node(out).val.data(), t.node(x).val.data(),
                        t.node(w).val.data(), oc, ic, h, ww, radius, b);
      },
      [=](Tape& t) {
        const auto& g = t.grad_mut(out);
        if (t.needs_grad(x)) {
          std::vector<double> gin(t.node(x).val.size());
          kernels::conv2d_grad_input(gin.data(), g.data(),
                                     t.node(w).val.data(), oc, ic, h, ww,
                                     radius, b);
          auto& gx = t.grad_mut(x);
          for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gin[i];
        }
        if (t.needs_grad(w))
          kernels::conv2d_grad_weights(t.grad_mut(w).data(), g.data(),
                                       t.node(x).val.data(), oc, ic, h, ww,
                                       radius, b);
      });
  return out;
}

NodeId Tape::channel_bias(NodeId x, NodeId z) {
  const auto& xd = dims(x);
  const auto& zd = dims(z);
  if (xd.size() != 3 || zd.size() != 1 || zd[0] != xd[0])
    fail("channel_bias: bias length must equal channel count");
  const int c = xd[0];
  const std::size_t plane = static_cast<std::size_t>(xd[1]) * xd[2];
  NodeId out = push_node(xd, needs_grad(x) || needs_grad(z));
  record_op(
      [=](Tape& t) {
        const auto& xv = t.node(x).val;
        const auto& zv = t.node(z).val;
        auto& ov = t.node(out).val;
        for (int ch = 0; ch < c; ++ch) {
          const double zc = zv[static_cast<std::size_t>(ch)];
          for (std::size_t i = 0; i < plane; ++i)
            ov[ch * plane + i] = xv[ch * plane + i] + zc;
        }
      },
      [=](Tape& t) {
        const auto& g = t.grad_mut(out);
        if (t.needs_grad(x)) {
          auto& gx = t.grad_mut(x);
          for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
        }
        if (t.needs_grad(z)) {
          auto& gz = t.grad_mut(z);
          for (int ch = 0; ch < c; ++ch) {
            double acc = 0.0;
            for (std::size_t i = 0; i < plane; ++i) acc += g[ch * plane + i];
            gz[static_cast<std::size_t>(ch)] += acc;
          }
        }
      });
  return out;
}

NodeId Tape::nonlin(NodeId x, Nonlin kind, double alpha) {
  NodeId out = push_node(dims(x), needs_grad(x));
  record_op(
      [=](Tape& t) {
        const auto& xv = t.node(x).val;
        auto& ov = t.node(out).val;
        for (std::size_t i = 0; i < xv.size(); ++i)
          ov[i] = apply_nonlin(xv[i], kind, alpha);
      },
      [=](Tape& t) {
        if (!t.needs_grad(x)) return;
        const auto& g = t.grad_mut(out);
        const auto& xv = t.node(x).val;
        auto& gx = t.grad_mut(x);
        for (std::size_t i = 0; i < xv.size(); ++i)
          gx[i] += g[i] * apply_nonlin_deriv(xv[i], kind, alpha);
      });
  return out;
}

NodeId Tape::add(NodeId a, NodeId b) {
  if (dims(a) != dims(b)) fail("add: shape mismatch");
  NodeId out = push_node(dims(a), needs_grad(a) || needs_grad(b));
  record_op(
      [=](Tape& t) {
        const auto& av = t.node(a).val;
        const auto& bv = t.node(b).val;
        auto& ov = t.node(out).val;
        for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] + bv[i];
      },
      [=](Tape& t) {
        const auto& g = t.grad_mut(out);
        for (NodeId n : {a, b})
          if (t.needs_grad(n)) {
            auto& gn = t.grad_mut(n);
            for (std::size_t i = 0; i < gn.size(); ++i) gn[i] += g[i];
          }
      });
  return out;
}

NodeId Tape::sub(NodeId a, NodeId b) {
  if (dims(a) != dims(b)) fail("sub: shape mismatch");
  NodeId out = push_node(dims(a), needs_grad(a) || needs_grad(b));
  record_op(
      [=](Tape& t) {
        const auto& av = t.node(a).val;
        const auto& bv = t.node(b).val;
        auto& ov = t.node(out).val;
        for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] - bv[i];
      },
      [=](Tape& t) {
        const auto& g = t.grad_mut(out);
        if (t.needs_grad(a)) {
          auto& ga = t.grad_mut(a);
          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
        }
        if (t.needs_grad(b)) {
          auto& gb = t.grad_mut(b);
          for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
        }
      });
  return out;
}

NodeId Tape::scale(NodeId a, double s) {
  NodeId out = push_node(dims(a), needs_grad(a));
  record_op(
      [=](Tape& t) {
        const auto& av = t.node(a).val;
        auto& ov = t.node(out).val;
        for (std::size_t i = 0; i < av.size(); ++i) ov[i] = s * av[i];
      },
      [=](Tape& t) {
        if (!t.needs_grad(a)) return;
        const auto& g = t.grad_mut(out);
        auto& ga = t.grad_mut(a);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * g[i];
      });
  return out;
}

NodeId Tape::avg_pool2(NodeId x) {
  const auto& xd = dims(x);
  if (xd.size() != 3 || xd[1] % 2 != 0 || xd[2] % 2 != 0)
    fail("avg_pool2: height and width must be even");
  const int c = xd[0], h = xd[1], w = xd[2];
  const int oh = h / 2, ow = w / 2;
  NodeId out = push_node({c, oh, ow}, needs_grad(x));
  auto in_at = [=](const std::vector<double>& v, int ch, int r, int cc) {
    return v[(static_cast<std::size_t>(ch) * h + r) * w + cc];
  };
  record_op(
      [=](Tape& t) {
        const auto& xv = t.node(x).val;
        auto& ov = t.node(out).val;
        std::size_t o = 0;
        for (int ch = 0; ch < c; ++ch)
          for (int r = 0; r < oh; ++r)
            for (int cc = 0; cc < ow; ++cc)
              ov[o++] = 0.25 * (in_at(xv, ch, 2 * r, 2 * cc) +
                                in_at(xv, ch, 2 * r, 2 * cc + 1) +
                                in_at(xv, ch, 2 * r + 1, 2 * cc) +
                                in_at(xv, ch, 2 * r + 1, 2 * cc + 1));
      },
      [=](Tape& t) {
        if (!t.needs_grad(x)) return;
        const auto& g = t.grad_mut(out);
        auto& gx = t.grad_mut(x);
        std::size_t o = 0;
        for (int ch = 0; ch < c; ++ch)
          for (int r = 0; r < oh; ++r)
            for (int cc = 0; cc < ow; ++cc) {
              const double gv = 0.25 * g[o++];
              for (int dr = 0; dr < 2; ++dr)
                for (int dc = 0; dc < 2; ++dc)
                  gx[(static_cast<std::size_t>(ch) * h + 2 * r + dr) * w +
                     2 * cc + dc] += gv;
            }
      });
  return out;
}

NodeId Tape::upsample2(NodeId x) {
  const auto& xd = dims(x);
  if (xd.size() != 3) fail("upsample2: input is not grid-shaped");
  const int c = xd[0], h = xd[1], w = xd[2];
  NodeId out = push_node({c, 2 * h, 2 * w}, needs_grad(x));
  record_op(
      [=](Tape& t) {
        const auto& xv = t.node(x).val;
        auto& ov = t.node(out).val;
        for (int ch = 0; ch < c; ++ch)
          for (int r = 0; r < 2 * h; ++r)
            for (int cc = 0; cc < 2 * w; ++cc)
              ov[(static_cast<std::size_t>(ch) * 2 * h + r) * 2 * w + cc] =
                  xv[(static_cast<std::size_t>(ch) * h + r / 2) * w + cc / 2];
      },
      [=](Tape& t) {
        if (!t.needs_grad(x)) return;
        const auto& g = t.grad_mut(out);
        auto& gx = t.grad_mut(x);
        for (int ch = 0; ch < c; ++ch)
          for (int r = 0; r < 2 * h; ++r)
            for (int cc = 0; cc < 2 * w; ++cc)
              gx[(static_cast<std::size_t>(ch) * h + r / 2) * w + cc / 2] +=
                  g[(static_cast<std::size_t>(ch) * 2 * h + r) * 2 * w + cc];
      });
  return out;
}

NodeId Tape::concat_channels(NodeId a, NodeId b) {
  const auto& ad = dims(a);
  const auto& bd = dims(b);
  if (ad.size() != 3 || bd.size() != 3 || ad[1] != bd[1] || ad[2] != bd[2])
    fail("concat_channels: spatial shape mismatch");
  const std::size_t na = prod(ad), nb = prod(bd);
  NodeId out = push_node({ad[0] + bd[0], ad[1], ad[2]},
                         needs_grad(a) || needs_grad(b));
  record_op(
      [=](Tape& t) {
        auto& ov = t.node(out).val;
        std::copy(t.node(a).val.begin(), t.node(a).val.end(), ov.begin());
        std::copy(t.node(b).val.begin(), t.node(b).val.end(),
                  ov.begin() + static_cast<std::ptrdiff_t>(na));
      },
      [=](Tape& t) {
        const auto& g = t.grad_mut(out);
        if (t.needs_grad(a)) {
          auto& ga = t.grad_mut(a);
          for (std::size_t i = 0; i < na; ++i) ga[i] += g[i];
        }
        if (t.needs_grad(b)) {
          auto& gb = t.grad_mut(b);
          for (std::size_t i = 0; i < nb; ++i) gb[i] += g[na + i];
        }
      });
  return out;
}

NodeId Tape::dense(NodeId w, NodeId x, NodeId bias) {
  const auto& wd = dims(w);
  if (wd.size() != 2) fail("dense: weight must be a matrix");
  const int m = wd[0], n = wd[1];
  if (static_cast<std::size_t>(n) != prod(dims(x)))
    fail("dense: weight columns must match input size");
  const bool has_bias = bias.valid();
  if (has_bias && (dims(bias).size() != 1 || dims(bias)[0] != m))
    fail("dense: bias length must match output size");
  bool ng = needs_grad(w) || needs_grad(x) || (has_bias && needs_grad(bias));
  NodeId out = push_node({m}, ng);
  record_op(
      [=](Tape& t) {
        const auto& wv = t.node(w).val;
        const auto& xv = t.node(x).val;
        auto& ov = t.node(out).val;
        for (int i = 0; i < m; ++i) {
          double acc = has_bias ? t.node(bias).val[static_cast<std::size_t>(i)]
                                : 0.0;
          const double* row = wv.data() + static_cast<std::size_t>(i) * n;
          for (int j = 0; j < n; ++j) acc += row[j] * xv[static_cast<std::size_t>(j)];
          ov[static_cast<std::size_t>(i)] = acc;
        }
      },
      [=](Tape& t) {
        const auto& g = t.grad_mut(out);
        const auto& wv = t.node(w).val;
        const auto& xv = t.node(x).val;
        if (t.needs_grad(w)) {
          auto& gw = t.grad_mut(w);
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
              gw[static_cast<std::size_t>(i) * n + j] +=
                  g[static_cast<std::size_t>(i)] * xv[static_cast<std::size_t>(j)];
        }
        if (t.needs_grad(x)) {
          auto& gx = t.grad_mut(x);
          for (int i = 0; i < m; ++i) {
            const double gi = g[static_cast<std::size_t>(i)];
            const double* row = wv.data() + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) gx[static_cast<std::size_t>(j)] += gi * row[j];
          }
        }
        if (has_bias && t.needs_grad(bias)) {
          auto& gb = t.grad_mut(bias);
          for (int i = 0; i < m; ++i)
            gb[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(i)];
        }
      });
  return out;
}

NodeId Tape::sum(NodeId x) {
  NodeId out = push_node({1}, needs_grad(x));
  record_op(
      [=](Tape& t) {
        const auto& xv = t.node(x).val;
        double acc = 0.0;
        for (double v : xv) acc += v;
        t.node(out).val[0] = acc;
      },
      [=](Tape& t) {
        if (!t.needs_grad(x)) return;
        const double g = t.grad_mut(out)[0];
        auto& gx = t.grad_mut(x);
        for (auto& v : gx) v += g;
      });
  return out;
}

NodeId Tape::sum_sq(NodeId x) {
  NodeId out = push_node({1}, needs_grad(x));
  record_op(
      [=](Tape& t) {
        const auto& xv = t.node(x).val;
        double acc = 0.0;
        for (double v : xv) acc += v * v;
        t.node(out).val[0] = acc;
      },
      [=](Tape& t) {
        if (!t.needs_grad(x)) return;
        const double g = t.grad_mut(out)[0];
        const auto& xv = t.node(x).val;
        auto& gx = t.grad_mut(x);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g * 2.0 * xv[i];
      });
  return out;
}

NodeId Tape::mse_against(NodeId x, Grid target) {
  const auto& xd = dims(x);
  if (xd.size() != 3 || xd[0] != target.channels || xd[1] != target.height ||
      xd[2] != target.width)
    fail("mse_against: target shape mismatch");
  const double inv_n = 1.0 / static_cast<double>(target.size());
  auto tgt = std::make_shared<std::vector<double>>(std::move(target.data));
  NodeId out = push_node({1}, needs_grad(x));
  record_op(
      [=](Tape& t) {
        const auto& xv = t.node(x).val;
        double acc = 0.0;
        for (std::size_t i = 0; i < xv.size(); ++i) {
          const double d = xv[i] - (*tgt)[i];
          acc += d * d;
        }
        t.node(out).val[0] = acc * inv_n;
      },
      [=](Tape& t) {
        if (!t.needs_grad(x)) return;
        const double g = t.grad_mut(out)[0];
        const auto& xv = t.node(x).val;
        auto& gx = t.grad_mut(x);
        for (std::size_t i = 0; i < gx.size(); ++i)
          gx[i] += g * 2.0 * inv_n * (xv[i] - (*tgt)[i]);
      });
  return out;
}

NodeId Tape::softmax_cross_entropy(NodeId logits, int label) {
  const auto& ld = dims(logits);
  if (ld.size() != 1) fail("softmax_cross_entropy: logits must be a vector");
  if (label < 0 || label >= ld[0])
    fail("softmax_cross_entropy: label out of range");
  const int k = ld[0];
  NodeId out = push_node({1}, needs_grad(logits));
  record_op(
      [=](Tape& t) {
        const auto& lv = t.node(logits).val;
        double mx = lv[0];
        for (double v : lv) mx = std::max(mx, v);
        double lse = 0.0;
        for (double v : lv) lse += std::exp(v - mx);
        lse = mx + std::log(lse);
        t.node(out).val[0] = lse - lv[static_cast<std::size_t>(label)];
      },
      [=](Tape& t) {
        if (!t.needs_grad(logits)) return;
        const double g = t.grad_mut(out)[0];
        const auto& lv = t.node(logits).val;
        auto& gl = t.grad_mut(logits);
        double mx = lv[0];
        for (double v : lv) mx = std::max(mx, v);
        double z = 0.0;
        for (double v : lv) z += std::exp(v - mx);
        for (int i = 0; i < k; ++i) {
          const double p = std::exp(lv[static_cast<std::size_t>(i)] - mx) / z;
          gl[static_cast<std::size_t>(i)] +=
              g * (p - (i == label ? 1.0 : 0.0));
        }
      });
  return out;
}

// ---------------------------------------------------------------------------
// differentiation
// ---------------------------------------------------------------------------

void Tape::backward(NodeId loss, double seed) {
  if (node(loss).val.size() != 1)
    fail("backward: loss must be a scalar node");
  for (auto& n : nodes_)
    if (!n.grd.empty()) std::fill(n.grd.begin(), n.grd.end(), 0.0);
  grad_mut(loss)[0] = seed;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) it->bwd(*this);
}

std::vector<double> Tape::param_gradient(ParamId id) const {
  if (!params_) fail("Tape: no parameter store attached");
  const auto& e = params_->at(id);
  auto it = param_nodes_.find(id);
  if (it == param_nodes_.end() || node(it->second).grd.empty())
    return std::vector<double>(e.value.size(), 0.0);
  return node(it->second).grd;
}

std::map<ParamId, std::vector<double>> Tape::backprop(
    NodeId loss, const std::vector<ParamId>& ids) {
  if (!params_) fail("Tape: no parameter store attached");
  for (ParamId id : ids) params_->at(id);  // validates registration
  backward(loss);
  std::map<ParamId, std::vector<double>> out;
  for (ParamId id : ids) out[id] = param_gradient(id);
  return out;
}

void Tape::replay() {
  for (auto& op : ops_) op.fwd(*this);
}

// ---------------------------------------------------------------------------
// finite differences
// ---------------------------------------------------------------------------

std::vector<double> finite_diff_gradient(
    const std::function<double(const std::vector<double>&)>& f,
    std::vector<double> p, double h) {
  if (!(h > 0.0)) fail("finite_diff_gradient: step must be positive");
  std::vector<double> g(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double keep = p[i];
    p[i] = keep + h;
    const double fp = f(p);
    p[i] = keep - h;
    const double fm = f(p);
    p[i] = keep;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

std::vector<double> finite_diff_param(ParamStore& store, ParamId id,
                                      const std::function<double()>& f,
                                      double h) {
  if (!(h > 0.0)) fail("finite_diff_param: step must be positive");
  auto& v = store.at(id).value;
  std::vector<double> g(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double keep = v[i];
    v[i] = keep + h;
    const double fp = f();
    v[i] = keep - h;
    const double fm = f();
    v[i] = keep;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

double max_rel_error(const std::vector<double>& a, const std::vector<double>& b,
                     double floor) {
  if (a.size() != b.size()) fail("max_rel_error: size mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::fabs(a[i]), std::fabs(b[i]), floor});
    worst = std::max(worst, std::fabs(a[i] - b[i]) / denom);
  }
  return worst;
}

}  // namespace celldiff
