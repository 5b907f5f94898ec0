#pragma once

#include <string>
#include <utility>
#include <vector>

#include "voxsem/params.hpp"
#include "voxsem/tape.hpp"

namespace voxsem {

enum class LayerKind { kDense, kConv3, kTconv3, kElu, kSigmoid, kDropout };

struct LayerSpec {
  LayerKind kind = LayerKind::kElu;
  std::string name;  // parameter prefix for parameterized layers
  int in_dim = 0;    // dense
  int out_dim = 0;   // dense
  Conv3Geom geom;    // conv3 / tconv3
  double rate = 0.0; // dropout

  static LayerSpec dense(std::string name, int in, int out) {
    LayerSpec s;
    s.kind = LayerKind::kDense;
    s.name = std::move(name);
    s.in_dim = in;
    s.out_dim = out;
    return s;
  }
  static LayerSpec conv3(std::string name, const Conv3Geom& g) {
    LayerSpec s;
    s.kind = LayerKind::kConv3;
    s.name = std::move(name);
    s.geom = g;
    return s;
  }
  static LayerSpec tconv3(std::string name, const Conv3Geom& g) {
    LayerSpec s;
    s.kind = LayerKind::kTconv3;
    s.name = std::move(name);
    s.geom = g;
    return s;
  }
  static LayerSpec elu() { return LayerSpec{}; }
  static LayerSpec sigmoid() {
    LayerSpec s;
    s.kind = LayerKind::kSigmoid;
    return s;
  }
  static LayerSpec dropout(double rate) {
    LayerSpec s;
    s.kind = LayerKind::kDropout;
    s.rate = rate;
    return s;
  }

  void validate() const;
};

// Registers glorot-initialized parameters for every parameterized layer in
// the stack. Seeds are derived per layer from the base seed.
void init_stack_params(ParamStore& params, const std::vector<LayerSpec>& layers,
                       const std::string& group, uint64_t seed);

// Applies the stack on the tape. Shape mismatches raise errors that name the
// offending layer.
Tape::NodeId forward_stack(Tape& tape, const ParamStore& params,
                           const std::vector<LayerSpec>& layers, Tape::NodeId input, Mode mode,
                           uint64_t seed);

// Convenience one-shot evaluation; returns the output and the tape it was
// recorded on.
std::pair<Tensor, Tape> forward(const ParamStore& params, const std::vector<LayerSpec>& layers,
                                const Tensor& input, Mode mode, uint64_t seed);

}  // namespace voxsem
