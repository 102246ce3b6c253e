#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "celldiff/grid.hpp"

namespace celldiff {

// Labeled image set, pixels scaled to [-1, 1].
struct Dataset {
  std::vector<Grid> images;
  std::vector<int> labels;
  int num_classes = 0;

  int count() const { return static_cast<int>(images.size()); }
  Dataset slice(int begin, int end) const;
};

// Raw IDX container: big-endian magic (0x801 labels, 0x803 images), dims,
// ubyte payload. Image payloads are rescaled to [-1, 1]; label payloads kept
// as raw values.
struct IdxTensor {
  std::vector<int> dims;
  std::vector<double> values;
};
IdxTensor read_idx(const std::string& path);

// Loads a standard MNIST directory ("train" or "t10k" split).
Dataset load_mnist_dir(const std::string& dir, const std::string& split);
// First existing candidate directory containing the MNIST files, or "".
std::string find_mnist_dir(const std::vector<std::string>& candidates);

// Deterministic two-class synthetic sets: horizontal/vertical bars, or
// Gaussian blobs at two positions, with light jitter. Labels alternate, so
// class balance is exact for even n.
Dataset make_toy_dataset(const std::string& kind, int n, int size,
                         std::uint64_t seed);

// Tiles images row-major into one raster, [-1,1] -> [0,255].
void write_pgm_grid(const std::vector<Grid>& images, const std::string& path,
                    int cols = 0);
void write_png_grid(const std::vector<Grid>& images, const std::string& path,
                    int cols = 0);
Grid read_pgm(const std::string& path);

// Versioned binary training snapshot: config key/values, named arrays in a
// fixed order, generator state, epoch counter. Round trips byte-for-byte.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;
  std::uint32_t version = kVersion;
  std::vector<std::pair<std::string, std::string>> config;
  struct Array {
    std::string name;
    std::vector<int> shape;
    std::vector<double> values;
  };
  std::vector<Array> arrays;
  std::string rng_state;
  std::uint32_t epoch = 0;

  const Array* find(const std::string& name) const;
  std::string config_value(const std::string& key) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace celldiff
