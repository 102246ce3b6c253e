#pragma once

#include <string>
#include <vector>

#include "celldiff/cellnn.hpp"
#include "celldiff/memristor.hpp"
#include "celldiff/rng.hpp"
#include "celldiff/tape.hpp"

namespace celldiff {

enum class BlockKind { Conv, CellNN, MCellNN };

std::string block_kind_name(BlockKind k);
BlockKind block_kind_from_name(const std::string& name);

struct DenoiserConfig {
  BlockKind kind = BlockKind::Conv;
  int base_features = 32;  // stage width; paper scale uses 128
  int image_channels = 1;
  int image_size = 8;  // square, must be divisible by 4
  int num_classes = 2;
  int time_embed_dim = 16;
  int chain_length = 400;  // diffusion steps, sets the time embedding scale
  SolverConfig solver;
  TaoxParams taox;
  void validate() const;
};

// Sinusoidal embedding of t/T at geometrically spaced frequencies; all
// components in [-1, 1], injective in t for fixed T.
std::vector<double> time_embedding(int t, int T, int dims);

// UNet-shaped denoiser: two pooling stages down, a bottleneck, two
// nearest-neighbor stages up with skip concatenations; every stage holds a
// pair of blocks of the configured kind. A block owns one control kernel
// (cout x (cin+classes) x 3 x 3), one feedback kernel (cout x cout x 3 x 3),
// a per-channel bias, and a time-embedding projection, so the trainable
// parameter count is identical for all three kinds.
struct Denoiser {
  struct Block {
    int cin = 0, cout = 0;
    bool skip = false;
    ParamId control = -1;
    ParamId feedback = -1;
    ParamId bias = -1;
    ParamId time_proj = -1;  // (cout, time_embed_dim)
  };

  DenoiserConfig cfg;
  ParamStore params;
  std::vector<Block> blocks;
  ParamId head_w = -1, head_b = -1;

  std::size_t parameter_count() const { return params.total_size(); }
  std::vector<ParamId> param_ids() const;

  // Predicted noise for a corrupted image at step t; label -1 runs the
  // unconditional (zero context) path. Pure function of (params, x_t, t,
  // label); the memristor state is re-initialized inside every call.
  Grid predict(const Grid& x_t, int t, int label) const;
  NodeId record_predict(Tape& tape, const Grid& x_t, int t, int label) const;

  TemplateSet block_templates(const Block& blk) const;
};

Denoiser build_denoiser(const DenoiserConfig& cfg, Rng& rng);

// Closed-form trainable parameter total for a config (used as the
// matched-complexity assertion).
std::size_t expected_parameter_count(const DenoiserConfig& cfg);

}  // namespace celldiff
