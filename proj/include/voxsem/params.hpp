#pragma once

#include <functional>
#include <map>
#include <string>

#include "voxsem/tape.hpp"
#include "voxsem/tensor.hpp"

namespace voxsem {

// Named trainable tensors with per-parameter Adam state. Groups follow the
// model partition: "dec" (decoder), "enc" (encoder), "prior" (prior nets).
struct ParamStore {
  struct Entry {
    Tensor value;
    Tensor m;  // Adam first moment
    Tensor v;  // Adam second moment
    std::string group;
  };

  std::map<std::string, Entry> entries;
  long step = 0;

  void add(const std::string& name, Tensor init, const std::string& group) {
    if (entries.count(name)) throw std::invalid_argument("param already registered: " + name);
    Entry e;
    e.m = Tensor(init.shape);
    e.v = Tensor(init.shape);
    e.value = std::move(init);
    e.group = group;
    entries.emplace(name, std::move(e));
  }

  Tensor& at(const std::string& name) {
    auto it = entries.find(name);
    if (it == entries.end()) throw std::invalid_argument("unknown parameter: " + name);
    return it->second.value;
  }
  const Tensor& at(const std::string& name) const {
    auto it = entries.find(name);
    if (it == entries.end()) throw std::invalid_argument("unknown parameter: " + name);
    return it->second.value;
  }
  bool has(const std::string& name) const { return entries.count(name) != 0; }
};

// Uniform Glorot initialization over [-sqrt(6/(fan_in+fan_out)), +...].
Tensor glorot_init(int fan_in, int fan_out, uint64_t seed);
Tensor glorot_init(int fan_in, int fan_out, uint64_t seed, const std::vector<int>& shape);

// One bias-corrected Adam update over every parameter with a gradient entry.
void adam_step(ParamStore& params, const GradientMap& grads, double lr, double beta1,
               double beta2, double eps);

// Builds the loss graph for the current parameter values. Used both for the
// analytic gradient and, re-evaluated on perturbed copies, for the numeric one.
using LossBuilder = std::function<Tape::NodeId(Tape&, const ParamStore&)>;

// Max over parameter components of |analytic - numeric| / max(|a|, |n|, 1e-8)
// with central finite differences. Throws if the builder is non-deterministic.
double grad_check(const ParamStore& params, const LossBuilder& loss_fn, double eps);

}  // namespace voxsem
