#pragma once

#include <functional>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "celldiff/grid.hpp"
#include "celldiff/nonlin.hpp"

namespace celldiff {

using ParamId = int;

// Registry of named trainable parameter arrays. Ids are dense indices in
// registration order; that order also fixes every gradient reduction and
// optimizer update, which is what makes training runs reproducible.
struct ParamStore {
  struct Entry {
    std::string name;
    std::vector<int> shape;
    std::vector<double> value;
  };
  std::vector<Entry> entries;

  ParamId add(std::string name, std::vector<int> shape,
              std::vector<double> value);
  Entry& at(ParamId id);
  const Entry& at(ParamId id) const;
  int count() const { return static_cast<int>(entries.size()); }
  std::size_t total_size() const;
};

struct NodeId {
  int idx = -1;
  bool valid() const { return idx >= 0; }
};

// Reverse-mode tape over whole-array operations. Recording an operation
// computes its value immediately; backward() replays the adjoints in reverse
// order. Forward closures are kept so a recorded tape can be replayed
// bit-for-bit against the stored values.
class Tape {
 public:
  explicit Tape(const ParamStore* params = nullptr) : params_(params) {}

  // --- leaves ---
  NodeId input(const Grid& g);
  NodeId input_vec(std::vector<double> v);
  NodeId zeros(int channels, int height, int width);
  // Differentiable leaf bound to a registry entry; one node per id per tape,
  // so gradient contributions from every use accumulate together.
  NodeId param(ParamId id);

  // --- recorded operations ---
  NodeId conv2d(NodeId x, NodeId w, int radius, Boundary b);
  NodeId channel_bias(NodeId x, NodeId z);
  NodeId nonlin(NodeId x, Nonlin kind, double alpha);
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId scale(NodeId a, double s);
  NodeId avg_pool2(NodeId x);
  NodeId upsample2(NodeId x);
  NodeId concat_channels(NodeId a, NodeId b);
  NodeId dense(NodeId w, NodeId x, NodeId bias = {});
  NodeId sum(NodeId x);
  NodeId sum_sq(NodeId x);
  NodeId mse_against(NodeId x, Grid target);
  NodeId softmax_cross_entropy(NodeId logits, int label);

  // --- escape hatch for module-specific fused operations ---
  NodeId make_node(std::vector<int> dims, bool needs_grad);
  void record_op(std::function<void(Tape&)> forward,
                 std::function<void(Tape&)> backward);

  // --- access ---
  const std::vector<int>& dims(NodeId n) const { return node(n).dims; }
  const std::vector<double>& value(NodeId n) const { return node(n).val; }
  std::vector<double>& value_mut(NodeId n) { return node(n).val; }
  Grid grid_value(NodeId n) const;
  bool needs_grad(NodeId n) const { return node(n).needs_grad; }
  double scalar_value(NodeId n) const;

  // Gradient buffer of a node, allocated (zeroed) on first touch.
  std::vector<double>& grad_mut(NodeId n);
  const std::vector<double>& grad(NodeId n) const;

  // --- differentiation ---
  // Zeroes all accumulators, seeds d(loss)/d(loss) = seed, runs adjoints.
  void backward(NodeId loss, double seed = 1.0);
  // Gradient of the most recent backward() wrt one registered parameter.
  std::vector<double> param_gradient(ParamId id) const;
  // Spec-level surface: gradients for a set of registered parameters.
  std::map<ParamId, std::vector<double>> backprop(
      NodeId loss, const std::vector<ParamId>& ids);

  // Re-executes every recorded forward closure in order, overwriting node
  // values. With identical leaf values the result is bit-identical.
  void replay();

  std::size_t node_count() const { return nodes_.size(); }
  std::size_t op_count() const { return ops_.size(); }

 private:
  struct Node {
    std::vector<int> dims;
    std::vector<double> val;
    std::vector<double> grd;
    bool needs_grad = false;
  };
  struct Op {
    std::function<void(Tape&)> fwd;
    std::function<void(Tape&)> bwd;
  };

  Node& node(NodeId n) { return nodes_.at(static_cast<std::size_t>(n.idx)); }
  const Node& node(NodeId n) const {
    return nodes_.at(static_cast<std::size_t>(n.idx));
  }
  NodeId push_node(std::vector<int> dims, bool needs_grad);

  const ParamStore* params_ = nullptr;
  std::vector<Node> nodes_;
  std::vector<Op> ops_;
  std::unordered_map<ParamId, NodeId> param_nodes_;
};

// Central finite differences: (f(p+h) - f(p-h)) / 2h per component.
std::vector<double> finite_diff_gradient(
    const std::function<double(const std::vector<double>&)>& f,
    std::vector<double> p, double h);

// Perturbs one registered parameter array in place and re-evaluates f; the
// gradient-check utility used by tests and the gradcheck command.
std::vector<double> finite_diff_param(ParamStore& store, ParamId id,
                                      const std::function<double()>& f,
                                      double h);

// Largest relative error between two gradient vectors, with a small absolute
// floor so near-zero components do not blow up the ratio.
double max_rel_error(const std::vector<double>& a, const std::vector<double>& b,
                     double floor = 1e-8);

}  // namespace celldiff
