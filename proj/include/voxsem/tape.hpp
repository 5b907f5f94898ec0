#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "voxsem/tensor.hpp"

namespace voxsem {

enum class Mode { kTrain, kEval };

// Geometry shared by conv3 and tconv3. For conv3 the spatial size maps
// in_dim -> (in_dim + 2*pad - kernel)/stride + 1; for tconv3 it maps
// in_dim -> (in_dim - 1)*stride - 2*pad + kernel.
struct Conv3Geom {
  int in_ch = 1;
  int out_ch = 1;
  int kernel = 2;
  int stride = 1;
  int pad = 0;
  int in_dim = 0;

  int conv_out_dim() const { return (in_dim + 2 * pad - kernel) / stride + 1; }
  int tconv_out_dim() const { return (in_dim - 1) * stride - 2 * pad + kernel; }
};

using GradientMap = std::map<std::string, Tensor>;

// Reverse-mode tape. Nodes are appended in topological order; backward walks
// them in reverse. Parameters enter as named leaves and their gradients are
// collected into a GradientMap.
class Tape {
 public:
  using NodeId = int;

  NodeId input(Tensor v);
  NodeId param(const std::string& name, const Tensor& v);

  const Tensor& value(NodeId id) const { return nodes_[static_cast<size_t>(id)].value; }
  const Tensor& grad(NodeId id) const;

  NodeId dense(NodeId x, NodeId w, NodeId b);
  NodeId conv3(NodeId x, NodeId k, NodeId b, const Conv3Geom& g);
  NodeId tconv3(NodeId x, NodeId k, NodeId b, const Conv3Geom& g);
  NodeId elu(NodeId x);
  NodeId sigmoid(NodeId x);
  NodeId dropout(NodeId x, double rate, Mode mode, uint64_t seed);
  NodeId reshape(NodeId x, std::vector<int> shape);
  NodeId slice(NodeId x, int offset, int len);
  NodeId exp(NodeId x);
  NodeId clamp(NodeId x, double lo, double hi);
  // mu + sigma .* eta with eta held constant.
  NodeId reparam(NodeId mu, NodeId sigma, Tensor eta);
  NodeId add(NodeId a, NodeId b);
  NodeId scale(NodeId x, double c);
  NodeId affine(NodeId x, double mul, double add);  // mul * x + add elementwise
  NodeId sum(NodeId x);
  NodeId square_sum(NodeId x);

  // KL(N(mu_s, diag(sigma_s^2)) || N(mu_p, I)) summed over components.
  NodeId kl_unit_prior(NodeId mu_s, NodeId sigma_s, NodeId mu_p);
  // Stretched-target reconstruction loss: per component
  //   -2 log p + log(1-p) when target = 1, log p - 2 log(1-p) when target = 0.
  NodeId recon_stretched(NodeId probs, Tensor target);
  // Plain Bernoulli log-likelihood sum_j [t log p + (1-t) log(1-p)].
  NodeId bernoulli_loglik(NodeId probs, Tensor target);
  // Sum over unordered pairs of (||mi - mj|| - delta)^2 where distance < delta.
  NodeId pairwise_hinge(const std::vector<NodeId>& means, double delta);
  // c0*s0 + c1*s1 + ... over scalar nodes.
  NodeId weighted_sum(const std::vector<NodeId>& scalars, const std::vector<double>& coeffs);

  // Runs reverse accumulation from a scalar loss node.
  void backward(NodeId loss);
  // Gradients of all named parameter leaves (after backward).
  GradientMap grads() const;

  size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::string param_name;
    std::function<void(Tape&, NodeId)> back;
    bool requires_grad = false;
  };

  NodeId push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size()) - 1;
  }
  Node& at(NodeId id) { return nodes_[static_cast<size_t>(id)]; }
  bool rg(NodeId id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }
  Tensor& g(NodeId id) { return nodes_[static_cast<size_t>(id)].grad; }
  const Tensor& v(NodeId id) const { return nodes_[static_cast<size_t>(id)].value; }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

}  // namespace voxsem
