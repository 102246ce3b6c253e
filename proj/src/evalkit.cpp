#include "celldiff/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>

#include <omp.h>
#include <Eigen/Dense>

#include "celldiff/diffusion.hpp"
#include "celldiff/exec.hpp"
#include "celldiff/rng.hpp"

namespace celldiff {

namespace {

constexpr double kLeakyAlpha = 0.01;

template <class Ex>
typename Ex::V run_extractor(Ex& ex, const Extractor& net, const Grid& image,
                             bool features_only) {
  using V = typename Ex::V;
  const auto& cfg = net.cfg;
  if (image.channels != cfg.image_channels || image.height != cfg.image_size ||
      image.width != cfg.image_size)
    throw std::invalid_argument("extractor: input shape mismatch");
  V x = ex.input(image);
  x = ex.conv(x, net.conv1_w, 1, Boundary::Zero);
  x = ex.channel_bias(x, ex.bias_param(net.conv1_b));
  x = ex.nonlin(x, Nonlin::Leaky, kLeakyAlpha);
  x = ex.avg_pool2(x);
  x = ex.conv(x, net.conv2_w, 1, Boundary::Zero);
  x = ex.channel_bias(x, ex.bias_param(net.conv2_b));
  x = ex.nonlin(x, Nonlin::Leaky, kLeakyAlpha);
  x = ex.avg_pool2(x);
  V f = ex.dense(net.fc1_w, x, net.fc1_b);
  f = ex.nonlin(f, Nonlin::Leaky, kLeakyAlpha);
  if (features_only) return f;
  return ex.dense(net.fc2_w, f, net.fc2_b);
}

}  // namespace

Extractor build_extractor(const ExtractorConfig& cfg) {
  if (cfg.image_size % 4 != 0)
    throw std::invalid_argument("extractor: image size must be divisible by 4");
  Extractor net;
  net.cfg = cfg;
  const int c1 = cfg.conv1_channels, c2 = cfg.conv2_channels;
  const int flat = c2 * (cfg.image_size / 4) * (cfg.image_size / 4);
  auto zeros = [](std::size_t n) { return std::vector<double>(n, 0.0); };
  net.conv1_w = net.params.add(
      "conv1.w", {c1, cfg.image_channels, 3, 3},
      zeros(static_cast<std::size_t>(c1) * cfg.image_channels * 9));
  net.conv1_b = net.params.add("conv1.b", {c1}, zeros(static_cast<std::size_t>(c1)));
  net.conv2_w = net.params.add("conv2.w", {c2, c1, 3, 3},
                               zeros(static_cast<std::size_t>(c2) * c1 * 9));
  net.conv2_b = net.params.add("conv2.b", {c2}, zeros(static_cast<std::size_t>(c2)));
  net.fc1_w = net.params.add(
      "fc1.w", {cfg.feature_dim, flat},
      zeros(static_cast<std::size_t>(cfg.feature_dim) * flat));
  net.fc1_b = net.params.add("fc1.b", {cfg.feature_dim},
                             zeros(static_cast<std::size_t>(cfg.feature_dim)));
  net.fc2_w = net.params.add(
      "fc2.w", {cfg.num_classes, cfg.feature_dim},
      zeros(static_cast<std::size_t>(cfg.num_classes) * cfg.feature_dim));
  net.fc2_b = net.params.add("fc2.b", {cfg.num_classes},
                             zeros(static_cast<std::size_t>(cfg.num_classes)));
  return net;
}

std::vector<double> Extractor::features(const Grid& image) const {
  EagerExec ex(params);
  return run_extractor(ex, *this, image, true).data;
}

std::vector<double> Extractor::logits(const Grid& image) const {
  EagerExec ex(params);
  return run_extractor(ex, *this, image, false).data;
}

int Extractor::classify(const Grid& image) const {
  const auto lg = logits(image);
  return static_cast<int>(std::max_element(lg.begin(), lg.end()) - lg.begin());
}

NodeId Extractor::record_logits(Tape& tape, const Grid& image) const {
  TapeExec ex(tape);
  return run_extractor(ex, *this, image, false);
}

Extractor train_feature_extractor(const Dataset& train, const Dataset& heldout,
                                  const ExtractorConfig& cfg,
                                  double* heldout_accuracy) {
  if (train.count() == 0)
    throw std::invalid_argument("train_feature_extractor: empty dataset");
  std::set<int> classes(train.labels.begin(), train.labels.end());
  if (classes.size() < 2)
    throw std::invalid_argument(
        "train_feature_extractor: degenerate dataset (single class)");
  Extractor net = build_extractor(cfg);
  Rng rng(cfg.seed);
  for (auto& e : net.params.entries) {
    if (e.shape.size() == 1) continue;  // biases start at zero
    double fan = 1.0;
    for (std::size_t d = 1; d < e.shape.size(); ++d) fan *= e.shape[d];
    const double s = 1.0 / std::sqrt(fan);
    rng.fill_uniform(e.value.data(), e.value.size(), -s, s);
  }
  AdamState adam;
  adam.lr = cfg.learning_rate;
  adam.init(net.params);
  const int nparams = net.params.count();
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<int> order(static_cast<std::size_t>(train.count()));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng.gen);
    for (int at = 0; at < train.count(); at += cfg.batch_size) {
      const int hi = std::min(at + cfg.batch_size, train.count());
      const int b = hi - at;
      std::vector<std::vector<std::vector<double>>> item_grads(
          static_cast<std::size_t>(b));
#pragma omp parallel for schedule(dynamic, 1)
      for (int i = 0; i < b; ++i) {
        const int idx = order[static_cast<std::size_t>(at + i)];
        Tape tape(&net.params);
        NodeId logits = net.record_logits(
            tape, train.images[static_cast<std::size_t>(idx)]);
        NodeId loss = tape.softmax_cross_entropy(
            logits, train.labels[static_cast<std::size_t>(idx)]);
        tape.backward(loss, 1.0 / static_cast<double>(b));
        auto& gs = item_grads[static_cast<std::size_t>(i)];
        gs.reserve(static_cast<std::size_t>(nparams));
        for (ParamId p = 0; p < nparams; ++p)
          gs.push_back(tape.param_gradient(p));
      }
      std::vector<std::vector<double>> grads;
      grads.reserve(static_cast<std::size_t>(nparams));
      for (ParamId p = 0; p < nparams; ++p) {
        std::vector<double> acc(net.params.at(p).value.size(), 0.0);
        for (int i = 0; i < b; ++i) {
          const auto& g =
              item_grads[static_cast<std::size_t>(i)][static_cast<std::size_t>(p)];
          for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += g[j];
        }
        grads.push_back(std::move(acc));
      }
      adam.update(net.params, grads);
    }
  }
  if (heldout_accuracy) *heldout_accuracy = classifier_accuracy(net, heldout);
  return net;
}

double classifier_accuracy(const Extractor& ex, const Dataset& data) {
  if (data.count() == 0)
    throw std::invalid_argument("classifier_accuracy: empty dataset");
  std::vector<int> hits(static_cast<std::size_t>(data.count()), 0);
#pragma omp parallel for schedule(dynamic, 8)
  for (int i = 0; i < data.count(); ++i)
    hits[static_cast<std::size_t>(i)] =
        ex.classify(data.images[static_cast<std::size_t>(i)]) ==
        data.labels[static_cast<std::size_t>(i)];
  double total = 0.0;
  for (int h : hits) total += h;
  return total / static_cast<double>(data.count());
}

FeatureStats feature_stats(const std::vector<Grid>& images,
                           const Extractor& ex) {
  const long n = static_cast<long>(images.size());
  if (n < 2)
    throw std::invalid_argument("feature_stats: need at least 2 images");
  const int dim = ex.cfg.feature_dim;
  std::vector<std::vector<double>> feats(images.size());
#pragma omp parallel for schedule(dynamic, 8)
  for (int i = 0; i < static_cast<int>(images.size()); ++i)
    feats[static_cast<std::size_t>(i)] =
        ex.features(images[static_cast<std::size_t>(i)]);
  FeatureStats st;
  st.dim = dim;
  st.n = n;
  st.mu.assign(static_cast<std::size_t>(dim), 0.0);
  for (const auto& f : feats)
    for (int j = 0; j < dim; ++j)
      st.mu[static_cast<std::size_t>(j)] += f[static_cast<std::size_t>(j)];
  for (auto& v : st.mu) v /= static_cast<double>(n);
  st.sigma.assign(static_cast<std::size_t>(dim) * dim, 0.0);
  for (const auto& f : feats)
    for (int i = 0; i < dim; ++i) {
      const double di = f[static_cast<std::size_t>(i)] - st.mu[static_cast<std::size_t>(i)];
      for (int j = i; j < dim; ++j) {
        const double dj =
            f[static_cast<std::size_t>(j)] - st.mu[static_cast<std::size_t>(j)];
        st.sigma[static_cast<std::size_t>(i) * dim + j] += di * dj;
      }
    }
  const double inv = 1.0 / static_cast<double>(n - 1);
  for (int i = 0; i < dim; ++i)
    for (int j = i; j < dim; ++j) {
      const double v = st.sigma[static_cast<std::size_t>(i) * dim + j] * inv;
      st.sigma[static_cast<std::size_t>(i) * dim + j] = v;
      st.sigma[static_cast<std::size_t>(j) * dim + i] = v;
    }
  return st;
}

namespace {

// Symmetric PSD square root via eigendecomposition, negative eigenvalues
// clipped at zero.
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(
      0.5 * (m + m.transpose()));
  Eigen::VectorXd ev = es.eigenvalues();
  for (int i = 0; i < ev.size(); ++i) ev[i] = ev[i] > 0.0 ? std::sqrt(ev[i]) : 0.0;
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const FeatureStats& a, const FeatureStats& b) {
  if (a.dim != b.dim)
    throw std::invalid_argument("frechet_distance: feature dimension mismatch");
  const int d = a.dim;
  double mean_term = 0.0;
  for (int i = 0; i < d; ++i) {
    const double diff = a.mu[static_cast<std::size_t>(i)] - b.mu[static_cast<std::size_t>(i)];
    mean_term += diff * diff;
  }
  Eigen::Map<const Eigen::MatrixXd> sa(a.sigma.data(), d, d);
  Eigen::Map<const Eigen::MatrixXd> sb(b.sigma.data(), d, d);
  const Eigen::MatrixXd ra = psd_sqrt(sa);
  // (Sa^1/2 Sb Sa^1/2)^1/2 keeps the product symmetric by construction
  const Eigen::MatrixXd cross = psd_sqrt(ra * sb * ra);
  const double trace_term = sa.trace() + sb.trace() - 2.0 * cross.trace();
  const double d2 = mean_term + trace_term;
  return d2 > 0.0 ? d2 : 0.0;
}

double fid(const std::vector<Grid>& generated,
           const std::vector<Grid>& reference, const Extractor& ex) {
  return frechet_distance(feature_stats(generated, ex),
                          feature_stats(reference, ex));
}

}  // namespace celldiff
