#include "voxsem/params.hpp"

#include <cmath>
#include <stdexcept>

#include "voxsem/rng.hpp"

namespace voxsem {

Tensor glorot_init(int fan_in, int fan_out, uint64_t seed) {
  return glorot_init(fan_in, fan_out, seed, {fan_out, fan_in});
}

Tensor glorot_init(int fan_in, int fan_out, uint64_t seed, const std::vector<int>& shape) {
  if (fan_in < 1 || fan_out < 1) throw std::invalid_argument("glorot_init: zero fan");
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  Tensor t(shape);
  Rng rng(seed);
  for (long i = 0; i < t.size(); ++i) t[i] = rng.uniform(-limit, limit);
  return t;
}

void adam_step(ParamStore& params, const GradientMap& grads, double lr, double beta1,
               double beta2, double eps) {
  params.step += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(params.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(params.step));
  for (auto& [name, e] : params.entries) {
    auto it = grads.find(name);
    const Tensor* g = it == grads.end() ? nullptr : &it->second;
    if (g && g->data.size() != e.value.data.size())
      throw std::invalid_argument("adam_step: gradient shape mismatch for " + name);
    for (long i = 0; i < e.value.size(); ++i) {
      const double gi = g ? (*g)[i] : 0.0;
      e.m[i] = beta1 * e.m[i] + (1.0 - beta1) * gi;
      e.v[i] = beta2 * e.v[i] + (1.0 - beta2) * gi * gi;
      const double mhat = e.m[i] / bc1;
      const double vhat = e.v[i] / bc2;
      e.value[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

double grad_check(const ParamStore& params, const LossBuilder& loss_fn, double eps) {
  auto eval = [&](const ParamStore& p) {
    Tape tape;
    Tape::NodeId loss = loss_fn(tape, p);
    return tape.value(loss)[0];
  };
  const double l0 = eval(params);
  const double l1 = eval(params);
  if (l0 != l1) throw std::runtime_error("grad_check: loss builder is non-deterministic");

  Tape tape;
  Tape::NodeId loss = loss_fn(tape, params);
  tape.backward(loss);
  GradientMap analytic = tape.grads();

  // Central differences on a loss of magnitude L carry cancellation noise of
  // about macheps * L / (2h), so coordinates whose gradient sits below that
  // cannot be certified to any relative precision. The comparison floor
  // scales with the loss so those vacuous coordinates neither mask nor
  // manufacture failures; with an O(1) loss it reduces to the usual 1e-8.
  const double floor = std::max(1e-8, 1e-5 * std::fabs(l0));

  ParamStore work = params;
  double max_rel = 0.0;
  for (auto& [name, e] : work.entries) {
    const Tensor& ga = analytic.count(name) ? analytic.at(name) : Tensor(e.value.shape);
    for (long i = 0; i < e.value.size(); ++i) {
      const double p0 = e.value[i];
      const double h = eps * std::max(1.0, std::fabs(p0));
      e.value[i] = p0 + h;
      const double lp = eval(work);
      e.value[i] = p0 - h;
      const double lm = eval(work);
      e.value[i] = p0;
      const double numeric = (lp - lm) / (2.0 * h);
      const double a = ga[i];
      const double rel =
          std::fabs(a - numeric) / std::max({std::fabs(a), std::fabs(numeric), floor});
      if (rel > max_rel) max_rel = rel;
    }
  }
  return max_rel;
}

}  // namespace voxsem
