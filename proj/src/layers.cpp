#include "voxsem/layers.hpp"

#include <stdexcept>

#include "voxsem/rng.hpp"

namespace voxsem {

void LayerSpec::validate() const {
  switch (kind) {
    case LayerKind::kDense:
      if (in_dim < 1 || out_dim < 1) throw std::invalid_argument("dense layer: bad dims");
      break;
    case LayerKind::kConv3:
    case LayerKind::kTconv3:
      if (geom.kernel < 1) throw std::invalid_argument("conv layer: kernel must be >= 1");
      if (geom.stride < 1) throw std::invalid_argument("conv layer: stride must be >= 1");
      if (geom.pad < 0) throw std::invalid_argument("conv layer: negative padding");
      if (geom.in_ch < 1 || geom.out_ch < 1) throw std::invalid_argument("conv layer: bad channels");
      break;
    case LayerKind::kDropout:
      if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout rate must be in [0,1)");
      break;
    default:
      break;
  }
}

void init_stack_params(ParamStore& params, const std::vector<LayerSpec>& layers,
                       const std::string& group, uint64_t seed) {
  int idx = 0;
  for (const LayerSpec& l : layers) {
    l.validate();
    const uint64_t s = mix_seed(seed, static_cast<uint64_t>(idx));
    switch (l.kind) {
      case LayerKind::kDense:
        params.add(l.name + ".W", glorot_init(l.in_dim, l.out_dim, s), group);
        params.add(l.name + ".b", Tensor({l.out_dim}), group);
        break;
      case LayerKind::kConv3: {
        const int k3 = l.geom.kernel * l.geom.kernel * l.geom.kernel;
        params.add(l.name + ".W",
                   glorot_init(l.geom.in_ch * k3, l.geom.out_ch * k3, s,
                               {l.geom.out_ch, l.geom.in_ch, l.geom.kernel, l.geom.kernel,
                                l.geom.kernel}),
                   group);
        params.add(l.name + ".b", Tensor({l.geom.out_ch}), group);
        break;
      }
      case LayerKind::kTconv3: {
        const int k3 = l.geom.kernel * l.geom.kernel * l.geom.kernel;
        params.add(l.name + ".W",
                   glorot_init(l.geom.in_ch * k3, l.geom.out_ch * k3, s,
                               {l.geom.in_ch, l.geom.out_ch, l.geom.kernel, l.geom.kernel,
                                l.geom.kernel}),
                   group);
        params.add(l.name + ".b", Tensor({l.geom.out_ch}), group);
        break;
      }
      default:
        break;
    }
    ++idx;
  }
}

Tape::NodeId forward_stack(Tape& tape, const ParamStore& params,
                           const std::vector<LayerSpec>& layers, Tape::NodeId input, Mode mode,
                           uint64_t seed) {
  Tape::NodeId x = input;
  int idx = 0;
  for (const LayerSpec& l : layers) {
    try {
      switch (l.kind) {
        case LayerKind::kDense: {
          Tape::NodeId w = tape.param(l.name + ".W", params.at(l.name + ".W"));
          Tape::NodeId b = tape.param(l.name + ".b", params.at(l.name + ".b"));
          x = tape.dense(x, w, b);
          break;
        }
        case LayerKind::kConv3: {
          Tape::NodeId w = tape.param(l.name + ".W", params.at(l.name + ".W"));
          Tape::NodeId b = tape.param(l.name + ".b", params.at(l.name + ".b"));
          x = tape.conv3(x, w, b, l.geom);
          break;
        }
        case LayerKind::kTconv3: {
          Tape::NodeId w = tape.param(l.name + ".W", params.at(l.name + ".W"));
          Tape::NodeId b = tape.param(l.name + ".b", params.at(l.name + ".b"));
          x = tape.tconv3(x, w, b, l.geom);
          break;
        }
        case LayerKind::kElu:
          x = tape.elu(x);
          break;
        case LayerKind::kSigmoid:
          x = tape.sigmoid(x);
          break;
        case LayerKind::kDropout:
          x = tape.dropout(x, l.rate, mode, mix_seed(seed, static_cast<uint64_t>(idx), 0x5eedd));
          break;
      }
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("layer " + std::to_string(idx) +
                                  (l.name.empty() ? "" : " (" + l.name + ")") + ": " + e.what());
    }
    ++idx;
  }
  return x;
}

std::pair<Tensor, Tape> forward(const ParamStore& params, const std::vector<LayerSpec>& layers,
                                const Tensor& input, Mode mode, uint64_t seed) {
  Tape tape;
  Tape::NodeId in = tape.input(input);
  Tape::NodeId out = forward_stack(tape, params, layers, in, mode, seed);
  return {tape.value(out), std::move(tape)};
}

}  // namespace voxsem
