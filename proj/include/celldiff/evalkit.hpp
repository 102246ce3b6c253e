#pragma once

#include <cstdint>
#include <vector>

#include "celldiff/data_io.hpp"
#include "celldiff/grid.hpp"
#include "celldiff/tape.hpp"

namespace celldiff {

// Gaussian fit of a feature distribution.
struct FeatureStats {
  std::vector<double> mu;
  std::vector<double> sigma;  // row-major dim x dim, unbiased (n-1)
  int dim = 0;
  long n = 0;
};

struct ExtractorConfig {
  int image_size = 8;
  int image_channels = 1;
  int num_classes = 2;
  int conv1_channels = 8;
  int conv2_channels = 16;
  int feature_dim = 32;
  int epochs = 12;
  int batch_size = 32;
  double learning_rate = 3e-3;
  std::uint64_t seed = 1;
};

// Small convolutional classifier trained in-repo; the penultimate layer
// activations are the feature map used for the Fréchet distance.
struct Extractor {
  ExtractorConfig cfg;
  ParamStore params;
  ParamId conv1_w = -1, conv1_b = -1, conv2_w = -1, conv2_b = -1;
  ParamId fc1_w = -1, fc1_b = -1, fc2_w = -1, fc2_b = -1;

  std::vector<double> features(const Grid& image) const;
  std::vector<double> logits(const Grid& image) const;
  int classify(const Grid& image) const;
  NodeId record_logits(Tape& tape, const Grid& image) const;
};

Extractor build_extractor(const ExtractorConfig& cfg);

// Trains on `train`, reports held-out accuracy on `heldout`. Rejects
// single-class training sets.
Extractor train_feature_extractor(const Dataset& train, const Dataset& heldout,
                                  const ExtractorConfig& cfg,
                                  double* heldout_accuracy = nullptr);

double classifier_accuracy(const Extractor& ex, const Dataset& data);

FeatureStats feature_stats(const std::vector<Grid>& images,
                           const Extractor& ex);

// Squared Fréchet distance between the two Gaussians:
// |mu_a - mu_b|^2 + tr(Sa + Sb - 2 (Sa^1/2 Sb Sa^1/2)^1/2),
// matrix roots by symmetric eigendecomposition with negative eigenvalues
// clipped at zero.
double frechet_distance(const FeatureStats& a, const FeatureStats& b);

double fid(const std::vector<Grid>& generated, const std::vector<Grid>& reference,
           const Extractor& ex);

}  // namespace celldiff
