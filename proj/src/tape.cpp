#include "voxsem/tape.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>

#include "voxsem/rng.hpp"

namespace voxsem {

namespace {

void conv3_forward(const double* in, const double* k, const double* b, double* out,
                   const Conv3Geom& g) {
  const int id = g.in_dim, od = g.conv_out_dim(), ks = g.kernel;
  const long in_sp = static_cast<long>(id) * id * id;
  const long out_sp = static_cast<long>(od) * od * od;
  for (int co = 0; co < g.out_ch; ++co) {
    double* o = out + co * out_sp;
    for (long i = 0; i < out_sp; ++i) o[i] = b[co];
    for (int ci = 0; ci < g.in_ch; ++ci) {
      const double* x = in + ci * in_sp;
      const double* kk = k + (static_cast<long>(co) * g.in_ch + ci) * ks * ks * ks;
      for (int oz = 0; oz < od; ++oz)
        for (int oy = 0; oy < od; ++oy)
          for (int ox = 0; ox < od; ++ox) {
            double acc = 0.0;
            const int bz = oz * g.stride - g.pad;
            const int by = oy * g.stride - g.pad;
            const int bx = ox * g.stride - g.pad;
            for (int dz = 0; dz < ks; ++dz) {
              const int z = bz + dz;
              if (z < 0 || z >= id) continue;
              for (int dy = 0; dy < ks; ++dy) {
                const int y = by + dy;
                if (y < 0 || y >= id) continue;
                const double* row = x + (static_cast<long>(z) * id + y) * id;
                const double* krow = kk + (static_cast<long>(dz) * ks + dy) * ks;
                for (int dx = 0; dx < ks; ++dx) {
                  const int xx = bx + dx;
                  if (xx < 0 || xx >= id) continue;
                  acc += row[xx] * krow[dx];
                }
              }
            }
            o[(static_cast<long>(oz) * od + oy) * od + ox] += acc;
          }
    }
  }
}

// Accumulates into gin/gk/gb; any of them may be null.
void conv3_backward(const double* gout, const double* in, const double* k, double* gin,
                    double* gk, double* gb, const Conv3Geom& g) {
  const int id = g.in_dim, od = g.conv_out_dim(), ks = g.kernel;
  const long in_sp = static_cast<long>(id) * id * id;
  const long out_sp = static_cast<long>(od) * od * od;
  for (int co = 0; co < g.out_ch; ++co) {
    const double* go = gout + co * out_sp;
    if (gb) {
      double acc = 0.0;
      for (long i = 0; i < out_sp; ++i) acc += go[i];
      gb[co] += acc;
    }
    for (int ci = 0; ci < g.in_ch; ++ci) {
      const double* x = in + ci * in_sp;
      const long koff = (static_cast<long>(co) * g.in_ch + ci) * ks * ks * ks;
      const double* kk = k + koff;
      double* gx = gin ? gin + ci * in_sp : nullptr;
      double* gkk = gk ? gk + koff : nullptr;
      for (int oz = 0; oz < od; ++oz)
        for (int oy = 0; oy < od; ++oy)
          for (int ox = 0; ox < od; ++ox) {
            const double go_v = go[(static_cast<long>(oz) * od + oy) * od + ox];
            if (go_v == 0.0) continue;
            const int bz = oz * g.stride - g.pad;
            const int by = oy * g.stride - g.pad;
            const int bx = ox * g.stride - g.pad;
            for (int dz = 0; dz < ks; ++dz) {
              const int z = bz + dz;
              if (z < 0 || z >= id) continue;
              for (int dy = 0; dy < ks; ++dy) {
                const int y = by + dy;
                if (y < 0 || y >= id) continue;
                const long base = (static_cast<long>(z) * id + y) * id;
                const long kbase = (static_cast<long>(dz) * ks + dy) * ks;
                for (int dx = 0; dx < ks; ++dx) {
                  const int xx = bx + dx;
                  if (xx < 0 || xx >= id) continue;
                  if (gx) gx[base + xx] += go_v * kk[kbase + dx];
                  if (gkk) gkk[kbase + dx] += go_v * x[base + xx];
                }
              }
            }
          }
    }
  }
}

// Transposed convolution: scatter each input cell through the kernel.
// Kernel layout [in_ch][out_ch][k][k][k].
void tconv3_forward(const double* in, const double* k, const double* b, double* out,
                    const Conv3Geom& g) {
  const int id = g.in_dim, od = g.tconv_out_dim(), ks = g.kernel;
  const long in_sp = static_cast<long>(id) * id * id;
  const long out_sp = static_cast<long>(od) * od * od;
  for (int co = 0; co < g.out_ch; ++co) {
    double* o = out + co * out_sp;
    for (long i = 0; i < out_sp; ++i) o[i] = b[co];
  }
  for (int ci = 0; ci < g.in_ch; ++ci) {
    const double* x = in + ci * in_sp;
    for (int co = 0; co < g.out_ch; ++co) {
      double* o = out + co * out_sp;
      const double* kk = k + (static_cast<long>(ci) * g.out_ch + co) * ks * ks * ks;
      for (int iz = 0; iz < id; ++iz)
        for (int iy = 0; iy < id; ++iy)
          for (int ix = 0; ix < id; ++ix) {
            const double xv = x[(static_cast<long>(iz) * id + iy) * id + ix];
            if (xv == 0.0) continue;
            const int bz = iz * g.stride - g.pad;
            const int by = iy * g.stride - g.pad;
            const int bx = ix * g.stride - g.pad;
            for (int dz = 0; dz < ks; ++dz) {
              const int z = bz + dz;
              if (z < 0 || z >= od) continue;
              for (int dy = 0; dy < ks; ++dy) {
                const int y = by + dy;
                if (y < 0 || y >= od) continue;
                double* row = o + (static_cast<long>(z) * od + y) * od;
                const double* krow = kk + (static_cast<long>(dz) * ks + dy) * ks;
                for (int dx = 0; dx < ks; ++dx) {
                  const int xx = bx + dx;
                  if (xx < 0 || xx >= od) continue;
                  row[xx] += xv * krow[dx];
                }
              }
            }
          }
    }
  }
}

void tconv3_backward(const double* gout, const double* in, const double* k, double* gin,
                     double* gk, double* gb, const Conv3Geom& g) {
  const int id = g.in_dim, od = g.tconv_out_dim(), ks = g.kernel;
  const long in_sp = static_cast<long>(id) * id * id;
  const long out_sp = static_cast<long>(od) * od * od;
  if (gb) {
    for (int co = 0; co < g.out_ch; ++co) {
      const double* go = gout + co * out_sp;
      double acc = 0.0;
      for (long i = 0; i < out_sp; ++i) acc += go[i];
      gb[co] += acc;
    }
  }
  for (int ci = 0; ci < g.in_ch; ++ci) {
    const double* x = in + ci * in_sp;
    double* gx = gin ? gin + ci * in_sp : nullptr;
    for (int co = 0; co < g.out_ch; ++co) {
      const double* go = gout + co * out_sp;
      const long koff = (static_cast<long>(ci) * g.out_ch + co) * ks * ks * ks;
      const double* kk = k + koff;
      double* gkk = gk ? gk + koff : nullptr;
      for (int iz = 0; iz < id; ++iz)
        for (int iy = 0; iy < id; ++iy)
          for (int ix = 0; ix < id; ++ix) {
            const long ii = (static_cast<long>(iz) * id + iy) * id + ix;
            const double xv = x[ii];
            double acc = 0.0;
            const int bz = iz * g.stride - g.pad;
            const int by = iy * g.stride - g.pad;
            const int bx = ix * g.stride - g.pad;
            for (int dz = 0; dz < ks; ++dz) {
              const int z = bz + dz;
              if (z < 0 || z >= od) continue;
              for (int dy = 0; dy < ks; ++dy) {
                const int y = by + dy;
                if (y < 0 || y >= od) continue;
                const double* grow = go + (static_cast<long>(z) * od + y) * od;
                const long kbase = (static_cast<long>(dz) * ks + dy) * ks;
                for (int dx = 0; dx < ks; ++dx) {
                  const int xx = bx + dx;
                  if (xx < 0 || xx >= od) continue;
                  acc += grow[xx] * kk[kbase + dx];
                  if (gkk) gkk[kbase + dx] += grow[xx] * xv;
                }
              }
            }
            if (gx) gx[ii] += acc;
          }
    }
  }
}

}  // namespace

Tape::NodeId Tape::input(Tensor v) {
  Node n;
  n.value = std::move(v);
  return push(std::move(n));
}

Tape::NodeId Tape::param(const std::string& name, const Tensor& v) {
  Node n;
  n.value = v;
  n.param_name = name;
  n.requires_grad = true;
  return push(std::move(n));
}

const Tensor& Tape::grad(NodeId id) const {
  const Node& n = nodes_[static_cast<size_t>(id)];
  if (n.grad.data.empty()) throw std::runtime_error("tape: gradient not computed for node");
  return n.grad;
}

Tape::NodeId Tape::dense(NodeId x, NodeId w, NodeId b) {
  const Tensor& xv = v(x);
  const Tensor& wv = v(w);
  const Tensor& bv = v(b);
  if (wv.shape.size() != 2) throw std::invalid_argument("dense: weight must be 2-d");
  const int m = wv.shape[0], nn = wv.shape[1];
  if (xv.size() != nn)
    throw std::invalid_argument("dense: input size " + std::to_string(xv.size()) +
                                " does not match weight columns " + std::to_string(nn));
  if (bv.size() != m) throw std::invalid_argument("dense: bias size mismatch");
  Node n;
  n.value = Tensor({m});
  for (int i = 0; i < m; ++i) {
    double acc = bv[i];
    const double* row = wv.data.data() + static_cast<long>(i) * nn;
    for (int j = 0; j < nn; ++j) acc += row[j] * xv[j];
    n.value[i] = acc;
  }
  n.requires_grad = rg(x) || rg(w) || rg(b);
  n.back = [x, w, b, m, nn](Tape& t, NodeId self) {
    const Tensor& go = t.g(self);
    const Tensor& xv2 = t.v(x);
    const Tensor& wv2 = t.v(w);
    if (t.rg(w)) {
      Tensor& gw = t.g(w);
      for (int i = 0; i < m; ++i) {
        double* row = gw.data.data() + static_cast<long>(i) * nn;
        const double gi = go[i];
        for (int j = 0; j < nn; ++j) row[j] += gi * xv2[j];
      }
    }
    if (t.rg(b)) {
      Tensor& gb = t.g(b);
      for (int i = 0; i < m; ++i) gb[i] += go[i];
    }
    if (t.rg(x)) {
      Tensor& gx = t.g(x);
      for (int i = 0; i < m; ++i) {
        const double gi = go[i];
        const double* row = wv2.data.data() + static_cast<long>(i) * nn;
        for (int j = 0; j < nn; ++j) gx[j] += gi * row[j];
      }
    }
  };
  return push(std::move(n));
}

Tape::NodeId Tape::conv3(NodeId x, NodeId k, NodeId b, const Conv3Geom& g_) {
  const Tensor& xv = v(x);
  const long expect_in = static_cast<long>(g_.in_ch) * g_.in_dim * g_.in_dim * g_.in_dim;
  if (xv.size() != expect_in)
    throw std::invalid_argument("conv3: input size mismatch, expected " +
                                std::to_string(expect_in) + " got " + std::to_string(xv.size()));
  if ((g_.in_dim + 2 * g_.pad - g_.kernel) % g_.stride != 0)
    throw std::invalid_argument("conv3: geometry does not tile (stride must divide in+2p-k)");
  const int od = g_.conv_out_dim();
  if (od < 1) throw std::invalid_argument("conv3: non-positive output dim");
  Node n;
  n.value = Tensor({g_.out_ch, od, od, od});
  conv3_forward(xv.data.data(), v(k).data.data(), v(b).data.data(), n.value.data.data(), g_);
  n.requires_grad = rg(x) || rg(k) || rg(b);
  Conv3Geom g = g_;
  n.back = [x, k, b, g](Tape& t, NodeId self) {
    const Tensor& go = t.g(self);
    conv3_backward(go.data.data(), t.v(x).data.data(), t.v(k).data.data(),
                   t.rg(x) ? t.g(x).data.data() : nullptr,
                   t.rg(k) ? t.g(k).data.data() : nullptr,
                   t.rg(b) ? t.g(b).data.data() : nullptr, g);
  };
  return push(std::move(n));
}

Tape::NodeId Tape::tconv3(NodeId x, NodeId k, NodeId b, const Conv3Geom& g_) {
  const Tensor& xv = v(x);
  const long expect_in = static_cast<long>(g_.in_ch) * g_.in_dim * g_.in_dim * g_.in_dim;
  if (xv.size() != expect_in)
    throw std::invalid_argument("tconv3: input size mismatch, expected " +
                                std::to_string(expect_in) + " got " + std::to_string(xv.size()));
  const int od = g_.tconv_out_dim();
  if (od < 1) throw std::invalid_argument("tconv3: non-positive output dim");
  Node n;
  n.value = Tensor({g_.out_ch, od, od, od});
  tconv3_forward(xv.data.data(), v(k).data.data(), v(b).data.data(), n.value.data.data(), g_);
  n.requires_grad = rg(x) || rg(k) || rg(b);
  Conv3Geom g = g_;
  n.back = [x, k, b, g](Tape& t, NodeId self) {
    const Tensor& go = t.g(self);
    tconv3_backward(go.data.data(), t.v(x).data.data(), t.v(k).data.data(),
                    t.rg(x) ? t.g(x).data.data() : nullptr,
                    t.rg(k) ? t.g(k).data.data() : nullptr,
                    t.rg(b) ? t.g(b).data.data() : nullptr, g);
  };
  return push(std::move(n));
}

Tape::NodeId Tape::elu(NodeId x) {
  const Tensor& xv = v(x);
  Node n;
  n.value = Tensor(xv.shape);
  for (long i = 0; i < xv.size(); ++i)
    n.value[i] = xv[i] >= 0.0 ? xv[i] : std::expm1(xv[i]);
  n.requires_grad = rg(x);
  n.back = [x](Tape& t, NodeId self) {
    if (!t.rg(x)) return;
    const Tensor& go = t.g(self);
    const Tensor& ov = t.v(self);
    Tensor& gx = t.g(x);
    const Tensor& xv2 = t.v(x);
    for (long i = 0; i < gx.size(); ++i)
      gx[i] += go[i] * (xv2[i] >= 0.0 ? 1.0 : ov[i] + 1.0);
  };
  return push(std::move(n));
}

Tape::NodeId Tape::sigmoid(NodeId x) {
  const Tensor& xv = v(x);
  Node n;
  n.value = Tensor(xv.shape);
  for (long i = 0; i < xv.size(); ++i) n.value[i] = 1.0 / (1.0 + std::exp(-xv[i]));
  n.requires_grad = rg(x);
  n.back = [x](Tape& t, NodeId self) {
    if (!t.rg(x)) return;
    const Tensor& go = t.g(self);
    const Tensor& ov = t.v(self);
    Tensor& gx = t.g(x);
    for (long i = 0; i < gx.size(); ++i) gx[i] += go[i] * ov[i] * (1.0 - ov[i]);
  };
  return push(std::move(n));
}

Tape::NodeId Tape::dropout(NodeId x, double rate, Mode mode, uint64_t seed) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must be in [0,1)");
  const Tensor& xv = v(x);
  if (mode == Mode::kEval || rate == 0.0) return x;
  Tensor mask(xv.shape);
  Rng rng(seed);
  const double keep = 1.0 - rate;
  for (long i = 0; i < mask.size(); ++i) mask[i] = rng.bernoulli(keep) ? 1.0 / keep : 0.0;
  Node n;
  n.value = Tensor(xv.shape);
  for (long i = 0; i < xv.size(); ++i) n.value[i] = xv[i] * mask[i];
  n.requires_grad = rg(x);
  auto m = std::make_shared<Tensor>(std::move(mask));
  n.back = [x, m](Tape& t, NodeId self) {
    if (!t.rg(x)) return;
    const Tensor& go = t.g(self);
    Tensor& gx = t.g(x);
    for (long i = 0; i < gx.size(); ++i) gx[i] += go[i] * (*m)[i];
  };
  return push(std::move(n));
}

Tape::NodeId Tape::reshape(NodeId x, std::vector<int> shape) {
  const Tensor& xv = v(x);
  if (Tensor::numel(shape) != xv.size()) throw std::invalid_argument("reshape: element count mismatch");
  Node n;
  n.value = Tensor(shape, xv.data);
  n.requires_grad = rg(x);
  n.back = [x](Tape& t, NodeId self) {
    if (!t.rg(x)) return;
    const Tensor& go = t.g(self);
    Tensor& gx = t.g(x);
    for (long i = 0; i < gx.size(); ++i) gx[i] += go[i];
  };
  return push(std::move(n));
}

Tape::NodeId Tape::slice(NodeId x, int offset, int len) {
  const Tensor& xv = v(x);
  if (offset < 0 || len < 1 || offset + len > xv.size())
    throw std::invalid_argument("slice: range out of bounds");
  Node n;
  n.value = Tensor({len});
  for (int i = 0; i < len; ++i) n.value[i] = xv[offset + i];
  n.requires_grad = rg(x);
  n.back = [x, offset, len](Tape& t, NodeId self) {
    if (!t.rg(x)) return;
    const Tensor& go = t.g(self);
    Tensor& gx = t.g(x);
    for (int i = 0; i < len; ++i) gx[offset + i] += go[i];
  };
  return push(std::move(n));
}

Tape::NodeId Tape::exp(NodeId x) {
  const Tensor& xv = v(x);
  Node n;
  n.value = Tensor(xv.shape);
  for (long i = 0; i < xv.size(); ++i) n.value[i] = std::exp(xv[i]);
  n.requires_grad = rg(x);
  n.back = [x](Tape& t, NodeId self) {
    if (!t.rg(x)) return;
    const Tensor& go = t.g(self);
    const Tensor& ov = t.v(self);
    Tensor& gx = t.g(x);
    for (long i = 0; i < gx.size(); ++i) gx[i] += go[i] * ov[i];
  };
  return push(std::move(n));
}

Tape::NodeId Tape::clamp(NodeId x, double lo, double hi) {
  const Tensor& xv = v(x);
  Node n;
  n.value = Tensor(xv.shape);
  for (long i = 0; i < xv.size(); ++i) n.value[i] = std::min(hi, std::max(lo, xv[i]));
  n.requires_grad = rg(x);
  n.back = [x, lo, hi](Tape& t, NodeId self) {
    if (!t.rg(x)) return;
    const Tensor& go = t.g(self);
    const Tensor& xv2 = t.v(x);
    Tensor& gx = t.g(x);
    for (long i = 0; i < gx.size(); ++i)
      if (xv2[i] > lo && xv2[i] < hi) gx[i] += go[i];
  };
  return push(std::move(n));
}

Tape::NodeId Tape::reparam(NodeId mu, NodeId sigma, Tensor eta) {
  const Tensor& mv = v(mu);
  const Tensor& sv = v(sigma);
  if (mv.size() != sv.size() || mv.size() != eta.size())
    throw std::invalid_argument("reparam: size mismatch");
  Node n;
  n.value = Tensor(mv.shape);
  for (long i = 0; i < mv.size(); ++i) n.value[i] = mv[i] + sv[i] * eta[i];
  n.requires_grad = rg(mu) || rg(sigma);
  auto e = std::make_shared<Tensor>(std::move(eta));
  n.back = [mu, sigma, e](Tape& t, NodeId self) {
    const Tensor& go = t.g(self);
    if (t.rg(mu)) {
      Tensor& gm = t.g(mu);
      for (long i = 0; i < gm.size(); ++i) gm[i] += go[i];
    }
    if (t.rg(sigma)) {
      Tensor& gs = t.g(sigma);
      for (long i = 0; i < gs.size(); ++i) gs[i] += go[i] * (*e)[i];
    }
  };
  return push(std::move(n));
}

Tape::NodeId Tape::add(NodeId a, NodeId b) {
  const Tensor& av = v(a);
  const Tensor& bv = v(b);
  if (av.size() != bv.size()) throw std::invalid_argument("add: size mismatch");
  Node n;
  n.value = Tensor(av.shape);
  for (long i = 0; i < av.size(); ++i) n.value[i] = av[i] + bv[i];
  n.requires_grad = rg(a) || rg(b);
  n.back = [a, b](Tape& t, NodeId self) {
    const Tensor& go = t.g(self);
    if (t.rg(a)) {
      Tensor& ga = t.g(a);
      for (long i = 0; i < ga.size(); ++i) ga[i] += go[i];
    }
    if (t.rg(b)) {
      Tensor& gb = t.g(b);
      for (long i = 0; i < gb.size(); ++i) gb[i] += go[i];
    }
  };
  return push(std::move(n));
}

Tape::NodeId Tape::scale(NodeId x, double c) {
  const Tensor& xv = v(x);
  Node n;
  n.value = Tensor(xv.shape);
  for (long i = 0; i < xv.size(); ++i) n.value[i] = xv[i] * c;
  n.requires_grad = rg(x);
  n.back = [x, c](Tape& t, NodeId self) {
    if (!t.rg(x)) return;
    const Tensor& go = t.g(self);
    Tensor& gx = t.g(x);
    for (long i = 0; i < gx.size(); ++i) gx[i] += go[i] * c;
  };
  return push(std::move(n));
}

Tape::NodeId Tape::affine(NodeId x, double mul, double add) {
  const Tensor& xv = v(x);
  Node n;
  n.value = Tensor(xv.shape);
  for (long i = 0; i < xv.size(); ++i) n.value[i] = xv[i] * mul + add;
  n.requires_grad = rg(x);
  n.back = [x, mul](Tape& t, NodeId self) {
    if (!t.rg(x)) return;
    const Tensor& go = t.g(self);
    Tensor& gx = t.g(x);
    for (long i = 0; i < gx.size(); ++i) gx[i] += go[i] * mul;
  };
  return push(std::move(n));
}

Tape::NodeId Tape::sum(NodeId x) {
  const Tensor& xv = v(x);
  double acc = 0.0;
  for (long i = 0; i < xv.size(); ++i) acc += xv[i];
  Node n;
  n.value = Tensor::scalar(acc);
  n.requires_grad = rg(x);
  n.back = [x](Tape& t, NodeId self) {
    if (!t.rg(x)) return;
    const double go = t.g(self)[0];
    Tensor& gx = t.g(x);
    for (long i = 0; i < gx.size(); ++i) gx[i] += go;
  };
  return push(std::move(n));
}

Tape::NodeId Tape::square_sum(NodeId x) {
  const Tensor& xv = v(x);
  double acc = 0.0;
  for (long i = 0; i < xv.size(); ++i) acc += xv[i] * xv[i];
  Node n;
  n.value = Tensor::scalar(acc);
  n.requires_grad = rg(x);
  n.back = [x](Tape& t, NodeId self) {
    if (!t.rg(x)) return;
    const double go = t.g(self)[0];
    const Tensor& xv2 = t.v(x);
    Tensor& gx = t.g(x);
    for (long i = 0; i < gx.size(); ++i) gx[i] += go * 2.0 * xv2[i];
  };
  return push(std::move(n));
}

Tape::NodeId Tape::kl_unit_prior(NodeId mu_s, NodeId sigma_s, NodeId mu_p) {
  const Tensor& ms = v(mu_s);
  const Tensor& ss = v(sigma_s);
  const Tensor& mp = v(mu_p);
  if (ms.size() != ss.size() || ms.size() != mp.size())
    throw std::invalid_argument("kl_unit_prior: block dimension mismatch");
  double acc = 0.0;
  for (long i = 0; i < ms.size(); ++i) {
    const double d = ms[i] - mp[i];
    acc += -std::log(ss[i]) + 0.5 * (ss[i] * ss[i] + d * d) - 0.5;
  }
  Node n;
  n.value = Tensor::scalar(acc);
  n.requires_grad = rg(mu_s) || rg(sigma_s) || rg(mu_p);
  n.back = [mu_s, sigma_s, mu_p](Tape& t, NodeId self) {
    const double go = t.g(self)[0];
    const Tensor& ms2 = t.v(mu_s);
    const Tensor& ss2 = t.v(sigma_s);
    const Tensor& mp2 = t.v(mu_p);
    for (long i = 0; i < ms2.size(); ++i) {
      const double d = ms2[i] - mp2[i];
      if (t.rg(mu_s)) t.g(mu_s)[i] += go * d;
      if (t.rg(mu_p)) t.g(mu_p)[i] -= go * d;
      if (t.rg(sigma_s)) t.g(sigma_s)[i] += go * (ss2[i] - 1.0 / ss2[i]);
    }
  };
  return push(std::move(n));
}

Tape::NodeId Tape::recon_stretched(NodeId probs, Tensor target) {
  const Tensor& pv = v(probs);
  if (pv.size() != target.size()) throw std::invalid_argument("recon_stretched: size mismatch");
  double acc = 0.0;
  for (long i = 0; i < pv.size(); ++i) {
    if (target[i] > 0.5)
      acc += -2.0 * std::log(pv[i]) + std::log(1.0 - pv[i]);
    else
      acc += std::log(pv[i]) - 2.0 * std::log(1.0 - pv[i]);
  }
  Node n;
  n.value = Tensor::scalar(acc);
  n.requires_grad = rg(probs);
  auto tg = std::make_shared<Tensor>(std::move(target));
  n.back = [probs, tg](Tape& t, NodeId self) {
    if (!t.rg(probs)) return;
    const double go = t.g(self)[0];
    const Tensor& pv2 = t.v(probs);
    Tensor& gp = t.g(probs);
    for (long i = 0; i < pv2.size(); ++i) {
      if ((*tg)[i] > 0.5)
        gp[i] += go * (-2.0 / pv2[i] - 1.0 / (1.0 - pv2[i]));
      else
        gp[i] += go * (1.0 / pv2[i] + 2.0 / (1.0 - pv2[i]));
    }
  };
  return push(std::move(n));
}

Tape::NodeId Tape::bernoulli_loglik(NodeId probs, Tensor target) {
  const Tensor& pv = v(probs);
  if (pv.size() != target.size()) throw std::invalid_argument("bernoulli_loglik: size mismatch");
  double acc = 0.0;
  for (long i = 0; i < pv.size(); ++i)
    acc += target[i] > 0.5 ? std::log(pv[i]) : std::log(1.0 - pv[i]);
  Node n;
  n.value = Tensor::scalar(acc);
  n.requires_grad = rg(probs);
  auto tg = std::make_shared<Tensor>(std::move(target));
  n.back = [probs, tg](Tape& t, NodeId self) {
    if (!t.rg(probs)) return;
    const double go = t.g(self)[0];
    const Tensor& pv2 = t.v(probs);
    Tensor& gp = t.g(probs);
    for (long i = 0; i < pv2.size(); ++i)
      gp[i] += go * ((*tg)[i] > 0.5 ? 1.0 / pv2[i] : -1.0 / (1.0 - pv2[i]));
  };
  return push(std::move(n));
}

Tape::NodeId Tape::pairwise_hinge(const std::vector<NodeId>& means, double delta) {
  if (delta <= 0.0) throw std::invalid_argument("pairwise_hinge: delta must be positive");
  double acc = 0.0;
  bool any_rg = false;
  for (size_t a = 0; a < means.size(); ++a) {
    any_rg = any_rg || rg(means[a]);
    for (size_t b2 = a + 1; b2 < means.size(); ++b2) {
      const Tensor& ma = v(means[a]);
      const Tensor& mb = v(means[b2]);
      if (ma.size() != mb.size()) throw std::invalid_argument("pairwise_hinge: dim mismatch");
      double d2 = 0.0;
      for (long i = 0; i < ma.size(); ++i) {
        const double d = ma[i] - mb[i];
        d2 += d * d;
      }
      const double dist = std::sqrt(d2);
      if (dist < delta) acc += (dist - delta) * (dist - delta);
    }
  }
  Node n;
  n.value = Tensor::scalar(acc);
  n.requires_grad = any_rg;
  auto ids = std::make_shared<std::vector<NodeId>>(means);
  n.back = [ids, delta](Tape& t, NodeId self) {
    const double go = t.g(self)[0];
    for (size_t a = 0; a < ids->size(); ++a)
      for (size_t b2 = a + 1; b2 < ids->size(); ++b2) {
        const Tensor& ma = t.v((*ids)[a]);
        const Tensor& mb = t.v((*ids)[b2]);
        double d2 = 0.0;
        for (long i = 0; i < ma.size(); ++i) {
          const double d = ma[i] - mb[i];
          d2 += d * d;
        }
        const double dist = std::sqrt(d2);
        if (dist >= delta || dist < 1e-12) continue;
        const double coef = go * 2.0 * (dist - delta) / dist;
        if (t.rg((*ids)[a])) {
          Tensor& ga = t.g((*ids)[a]);
          for (long i = 0; i < ma.size(); ++i) ga[i] += coef * (ma[i] - mb[i]);
        }
        if (t.rg((*ids)[b2])) {
          Tensor& gb = t.g((*ids)[b2]);
          for (long i = 0; i < mb.size(); ++i) gb[i] -= coef * (ma[i] - mb[i]);
        }
      }
  };
  return push(std::move(n));
}

Tape::NodeId Tape::weighted_sum(const std::vector<NodeId>& scalars,
                                const std::vector<double>& coeffs) {
  if (scalars.size() != coeffs.size()) throw std::invalid_argument("weighted_sum: size mismatch");
  double acc = 0.0;
  bool any_rg = false;
  for (size_t i = 0; i < scalars.size(); ++i) {
    if (v(scalars[i]).size() != 1) throw std::invalid_argument("weighted_sum: non-scalar term");
    acc += coeffs[i] * v(scalars[i])[0];
    any_rg = any_rg || rg(scalars[i]);
  }
  Node n;
  n.value = Tensor::scalar(acc);
  n.requires_grad = any_rg;
  auto ids = std::make_shared<std::vector<NodeId>>(scalars);
  auto cs = std::make_shared<std::vector<double>>(coeffs);
  n.back = [ids, cs](Tape& t, NodeId self) {
    const double go = t.g(self)[0];
    for (size_t i = 0; i < ids->size(); ++i)
      if (t.rg((*ids)[i])) t.g((*ids)[i])[0] += go * (*cs)[i];
  };
  return push(std::move(n));
}

void Tape::backward(NodeId loss) {
  if (v(loss).size() != 1) throw std::invalid_argument("backward: loss node must be scalar");
  for (Node& n : nodes_)
    if (n.requires_grad) n.grad = Tensor(n.value.shape);
  if (at(loss).grad.data.empty()) at(loss).grad = Tensor(v(loss).shape);
  at(loss).grad[0] = 1.0;
  for (NodeId id = loss; id >= 0; --id) {
    Node& n = at(id);
    if (n.requires_grad && n.back) n.back(*this, id);
  }
  backward_done_ = true;
}

GradientMap Tape::grads() const {
  if (!backward_done_) throw std::runtime_error("tape: grads() called before backward()");
  GradientMap out;
  for (const Node& n : nodes_) {
    if (n.param_name.empty()) continue;
    Tensor g = n.grad.data.empty() ? Tensor(n.value.shape) : n.grad;
    auto it = out.find(n.param_name);
    if (it == out.end())
      out.emplace(n.param_name, std::move(g));
    else
      accumulate(it->second, g);
  }
  return out;
}

}  // namespace voxsem
