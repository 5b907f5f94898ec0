#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "voxsem/layers.hpp"
#include "voxsem/params.hpp"
#include "voxsem/rng.hpp"
#include "voxsem/tape.hpp"

using namespace voxsem;

namespace {

Tensor rand_tensor(const std::vector<int>& shape, uint64_t seed, double lo = -1.0,
                   double hi = 1.0) {
  Tensor t(shape);
  Rng rng(seed);
  for (long i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// Independent convolution oracle: walks INPUT cells and solves for the output
// coordinates each tap contributes to, the reverse of the gather formulation
// used by the library. Kernel layout [out_ch][in_ch][k][k][k].
Tensor naive_conv3(const Tensor& x, const Tensor& k, const Tensor& b, const Conv3Geom& g) {
  const int id = g.in_dim, ks = g.kernel, s = g.stride, p = g.pad;
  const int od = (id + 2 * p - ks) / s + 1;
  const long osp = static_cast<long>(od) * od * od;
  Tensor out({g.out_ch, od, od, od});
  for (int co = 0; co < g.out_ch; ++co)
    for (long i = 0; i < osp; ++i) out[co * osp + i] = b[co];
  auto fit = [&](int z, int dz, int& oz) {
    const int num = z + p - dz;
    if (num < 0 || num % s != 0) return false;
    oz = num / s;
    return oz < od;
  };
  for (int ci = 0; ci < g.in_ch; ++ci)
    for (int z = 0; z < id; ++z)
      for (int y = 0; y < id; ++y)
        for (int xx = 0; xx < id; ++xx) {
          const double xv = x[((static_cast<long>(ci) * id + z) * id + y) * id + xx];
          for (int co = 0; co < g.out_ch; ++co)
            for (int dz = 0; dz < ks; ++dz)
              for (int dy = 0; dy < ks; ++dy)
                for (int dx = 0; dx < ks; ++dx) {
                  int oz, oy, ox;
                  if (!fit(z, dz, oz) || !fit(y, dy, oy) || !fit(xx, dx, ox)) continue;
                  const double kv =
                      k[(((static_cast<long>(co) * g.in_ch + ci) * ks + dz) * ks + dy) * ks + dx];
                  out[((static_cast<long>(co) * od + oz) * od + oy) * od + ox] += xv * kv;
                }
        }
  return out;
}

double dot(const Tensor& a, const Tensor& b) {
  double acc = 0.0;
  for (long i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

}  // namespace

TEST_CASE("glorot stays inside the fan bound") {
  Tensor t = glorot_init(1, 1, 7);
  const double lim = std::sqrt(3.0);
  for (long i = 0; i < t.size(); ++i) {
    CHECK(t[i] >= -lim);
    CHECK(t[i] <= lim);
  }
}

TEST_CASE("glorot empirical mean near zero over 10^4 draws") {
  Tensor t = glorot_init(100, 100, 11);
  REQUIRE(t.size() == 10000);
  double mean = 0.0;
  for (long i = 0; i < t.size(); ++i) mean += t[i];
  mean /= static_cast<double>(t.size());
  CHECK(std::fabs(mean) < 0.02);
}

TEST_CASE("glorot deterministic per seed, rejects zero fan") {
  Tensor a = glorot_init(5, 3, 42);
  Tensor b = glorot_init(5, 3, 42);
  CHECK(a.data == b.data);
  CHECK(glorot_init(5, 3, 43).data != a.data);
  CHECK_THROWS(glorot_init(0, 3, 1));
}

TEST_CASE("dense with identity weights passes input through") {
  ParamStore ps;
  Tensor w({4, 4});
  for (int i = 0; i < 4; ++i) w[i * 4 + i] = 1.0;
  ps.add("id.W", w, "enc");
  ps.add("id.b", Tensor({4}), "enc");
  Tensor in({4}, {0.5, -1.0, 2.0, 0.0});
  auto [out, tape] = forward(ps, {LayerSpec::dense("id", 4, 4)}, in, Mode::kEval, 0);
  for (int i = 0; i < 4; ++i) CHECK(out[i] == doctest::Approx(in[i]));
}

TEST_CASE("ELU and sigmoid fixed points") {
  Tape tape;
  Tape::NodeId x = tape.input(Tensor({3}, {0.0, 1.5, -2.0}));
  const Tensor& e = tape.value(tape.elu(x));
  CHECK(e[0] == 0.0);
  CHECK(e[1] == 1.5);
  CHECK(e[2] == doctest::Approx(std::exp(-2.0) - 1.0));
  const Tensor& s = tape.value(tape.sigmoid(x));
  CHECK(s[0] == 0.5);
}

TEST_CASE("conv3 covering an occupancy-8 block with a ones kernel reads 8") {
  Tensor x({1, 4, 4, 4});
  for (int z = 0; z < 2; ++z)
    for (int y = 0; y < 2; ++y)
      for (int xx = 0; xx < 2; ++xx) x[(z * 4 + y) * 4 + xx] = 1.0;
  Tensor k({1, 1, 2, 2, 2});
  for (long i = 0; i < k.size(); ++i) k[i] = 1.0;
  Tape tape;
  Conv3Geom g{1, 1, 2, 2, 0, 4};
  Tape::NodeId out = tape.conv3(tape.input(x), tape.input(k), tape.input(Tensor({1})), g);
  const Tensor& o = tape.value(out);
  REQUIRE(o.shape == std::vector<int>{1, 2, 2, 2});
  CHECK(o[0] == 8.0);    // window exactly over the block
  CHECK(o[7] == 0.0);    // far corner sees nothing
}

TEST_CASE("conv3 matches the scatter-formulated oracle on random cases") {
  struct Case {
    Conv3Geom g;
  } cases[] = {
      {{1, 1, 2, 1, 0, 4}}, {{2, 3, 2, 2, 0, 4}}, {{1, 2, 3, 1, 1, 5}}, {{3, 1, 4, 2, 1, 6}},
  };
  int ci = 0;
  for (const auto& [g] : cases) {
    Tensor x = rand_tensor({g.in_ch, g.in_dim, g.in_dim, g.in_dim}, 100 + ci);
    Tensor k = rand_tensor({g.out_ch, g.in_ch, g.kernel, g.kernel, g.kernel}, 200 + ci);
    Tensor b = rand_tensor({g.out_ch}, 300 + ci);
    Tape tape;
    const Tensor& got = tape.value(tape.conv3(tape.input(x), tape.input(k), tape.input(b), g));
    Tensor want = naive_conv3(x, k, b, g);
    REQUIRE(got.size() == want.size());
    for (long i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
    ++ci;
  }
}

TEST_CASE("tconv3 is the adjoint of conv3 with a shared kernel") {
  Conv3Geom g{2, 3, 4, 2, 1, 8};
  const int od = g.conv_out_dim();
  REQUIRE(od == 4);
  Tensor x = rand_tensor({g.in_ch, 8, 8, 8}, 1);
  Tensor y = rand_tensor({g.out_ch, od, od, od}, 2);
  Tensor k = rand_tensor({g.out_ch, g.in_ch, 4, 4, 4}, 3);
  Tape t1;
  const Tensor& cx = t1.value(t1.conv3(t1.input(x), t1.input(k), t1.input(Tensor({g.out_ch})), g));
  Conv3Geom gt = g;
  gt.in_ch = g.out_ch;
  gt.out_ch = g.in_ch;
  gt.in_dim = od;
  REQUIRE(gt.tconv_out_dim() == 8);  // transposed geometry restores the spatial size
  Tape t2;
  Tensor kt(std::vector<int>{gt.in_ch, gt.out_ch, 4, 4, 4}, k.data);
  const Tensor& ty =
      t2.value(t2.tconv3(t2.input(y), t2.input(kt), t2.input(Tensor({gt.out_ch})), gt));
  CHECK(dot(cx, y) == doctest::Approx(dot(x, ty)).epsilon(1e-10));
}

TEST_CASE("forward_stack names the offending layer on shape mismatch") {
  ParamStore ps;
  std::vector<LayerSpec> layers = {LayerSpec::dense("l0", 4, 3), LayerSpec::dense("l1", 5, 2)};
  init_stack_params(ps, layers, "enc", 9);
  try {
    forward(ps, layers, Tensor({4}), Mode::kEval, 0);
    FAIL("expected shape mismatch");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("l1") != std::string::npos);
  }
}

TEST_CASE("backward of a bare parameter sum is all ones") {
  Tape tape;
  Tape::NodeId p = tape.param("p", rand_tensor({7}, 5));
  tape.backward(tape.sum(p));
  const Tensor& g = tape.grad(p);
  for (long i = 0; i < g.size(); ++i) CHECK(g[i] == 1.0);
}

TEST_CASE("sigmoid gradient at zero pre-activation is a quarter") {
  Tape tape;
  Tape::NodeId w = tape.param("w", Tensor({1, 1}));  // zero weight forces w.x = 0
  Tape::NodeId b = tape.param("b", Tensor({1}));
  Tape::NodeId out = tape.sigmoid(tape.dense(tape.input(Tensor({1}, {3.0})), w, b));
  tape.backward(tape.sum(out));
  CHECK(tape.grad(b)[0] == doctest::Approx(0.25));       // d sigmoid / d pre
  CHECK(tape.grad(w)[0] == doctest::Approx(0.25 * 3.0)); // chain through the input
}

TEST_CASE("backward requires a scalar loss") {
  Tape tape;
  Tape::NodeId p = tape.param("p", rand_tensor({3}, 1));
  CHECK_THROWS(tape.backward(p));
  CHECK_THROWS(tape.grads());  // never ran
}

TEST_CASE("random three-layer net matches finite differences") {
  Conv3Geom g{1, 2, 2, 2, 0, 6};
  ParamStore ps;
  std::vector<LayerSpec> layers = {LayerSpec::conv3("c0", g), LayerSpec::elu(),
                                   LayerSpec::dense("d0", 2 * 27, 5), LayerSpec::sigmoid()};
  init_stack_params(ps, layers, "enc", 21);
  Tensor in = rand_tensor({1, 6, 6, 6}, 22, 0.0, 1.0);
  Tensor target = rand_tensor({5}, 23, 0.0, 1.0);
  for (long i = 0; i < target.size(); ++i) target[i] = target[i] > 0.5 ? 1.0 : 0.0;
  auto loss_fn = [&](Tape& t, const ParamStore& p) {
    Tape::NodeId out = forward_stack(t, p, layers, t.input(in), Mode::kEval, 0);
    out = t.clamp(out, 1e-6, 1.0 - 1e-6);
    return t.scale(t.bernoulli_loglik(out, target), -1.0);
  };
  CHECK(grad_check(ps, loss_fn, 1e-5) < 1e-4);
}

TEST_CASE("every layer kind passes finite differences on small shapes") {
  SUBCASE("dense") {
    ParamStore ps;
    std::vector<LayerSpec> layers = {LayerSpec::dense("d", 6, 4)};
    init_stack_params(ps, layers, "enc", 1);
    Tensor in = rand_tensor({6}, 2);
    auto fn = [&](Tape& t, const ParamStore& p) {
      return t.square_sum(forward_stack(t, p, layers, t.input(in), Mode::kEval, 0));
    };
    CHECK(grad_check(ps, fn, 1e-5) < 1e-4);
  }
  SUBCASE("conv3") {
    Conv3Geom g{2, 2, 2, 1, 0, 4};
    ParamStore ps;
    std::vector<LayerSpec> layers = {LayerSpec::conv3("c", g)};
    init_stack_params(ps, layers, "enc", 3);
    Tensor in = rand_tensor({2, 4, 4, 4}, 4);
    auto fn = [&](Tape& t, const ParamStore& p) {
      return t.square_sum(forward_stack(t, p, layers, t.input(in), Mode::kEval, 0));
    };
    CHECK(grad_check(ps, fn, 1e-5) < 1e-4);
  }
  SUBCASE("tconv3") {
    Conv3Geom g{2, 1, 2, 2, 0, 3};
    ParamStore ps;
    std::vector<LayerSpec> layers = {LayerSpec::tconv3("t", g), LayerSpec::elu()};
    init_stack_params(ps, layers, "dec", 5);
    Tensor in = rand_tensor({2, 3, 3, 3}, 6);
    auto fn = [&](Tape& t, const ParamStore& p) {
      return t.square_sum(forward_stack(t, p, layers, t.input(in), Mode::kEval, 0));
    };
    CHECK(grad_check(ps, fn, 1e-5) < 1e-4);
  }
  SUBCASE("dropout with a fixed seed") {
    ParamStore ps;
    std::vector<LayerSpec> layers = {LayerSpec::dense("d", 8, 8), LayerSpec::dropout(0.4),
                                     LayerSpec::sigmoid()};
    init_stack_params(ps, layers, "enc", 7);
    Tensor in = rand_tensor({8}, 8);
    auto fn = [&](Tape& t, const ParamStore& p) {
      return t.square_sum(forward_stack(t, p, layers, t.input(in), Mode::kTrain, 99));
    };
    CHECK(grad_check(ps, fn, 1e-5) < 1e-4);
  }
}

TEST_CASE("affine matches finite differences and maps sigmoid output onto its exact range") {
  ParamStore ps;
  ps.add("x", rand_tensor({6}, 21), "enc");
  auto fn = [&](Tape& t, const ParamStore& p) {
    return t.square_sum(t.affine(t.sigmoid(t.param("x", p.at("x"))), 1.0 - 2e-6, 1e-6));
  };
  CHECK(grad_check(ps, fn, 1e-5) < 1e-4);

  // Saturated pre-activations land exactly on the squashed endpoints.
  Tape t;
  Tensor big({2}, {-100.0, 100.0});
  const Tensor& out = t.value(t.affine(t.sigmoid(t.input(std::move(big))), 1.0 - 2e-6, 1e-6));
  CHECK(out[0] == doctest::Approx(1e-6).epsilon(1e-9));
  CHECK(out[1] == doctest::Approx(1.0 - 1e-6).epsilon(1e-9));
}

TEST_CASE("fused loss kernels pass finite differences") {
  ParamStore ps;
  ps.add("mu_s", rand_tensor({5}, 11), "enc");
  ps.add("raw_sigma", rand_tensor({5}, 12, -0.5, 0.5), "enc");
  ps.add("mu_p", rand_tensor({5}, 13), "prior");
  ps.add("m0", rand_tensor({3}, 14), "prior");
  ps.add("m1", rand_tensor({3}, 15), "prior");
  ps.add("m2", rand_tensor({3}, 16, 5.0, 6.0), "prior");
  ps.add("pre", rand_tensor({6}, 17), "dec");
  Tensor target({6}, {1, 0, 1, 1, 0, 0});
  Tensor eta = rand_tensor({5}, 18);

  auto fn = [&](Tape& t, const ParamStore& p) {
    Tape::NodeId mu_s = t.param("mu_s", p.at("mu_s"));
    Tape::NodeId sigma = t.exp(t.param("raw_sigma", p.at("raw_sigma")));
    Tape::NodeId mu_p = t.param("mu_p", p.at("mu_p"));
    Tape::NodeId kl = t.kl_unit_prior(mu_s, sigma, mu_p);
    Tape::NodeId z = t.reparam(mu_s, sigma, eta);
    Tape::NodeId zsum = t.square_sum(z);
    Tape::NodeId probs = t.clamp(t.sigmoid(t.param("pre", p.at("pre"))), 1e-6, 1.0 - 1e-6);
    Tape::NodeId rc = t.recon_stretched(probs, target);
    Tape::NodeId hinge = t.pairwise_hinge(
        {t.param("m0", p.at("m0")), t.param("m1", p.at("m1")), t.param("m2", p.at("m2"))}, 4.0);
    return t.weighted_sum({kl, zsum, rc, hinge}, {1.0, 0.5, 1.0, 2.0});
  };
  CHECK(grad_check(ps, fn, 1e-5) < 1e-4);
}

TEST_CASE("forward in eval mode is pure and dropout only fires in train mode") {
  ParamStore ps;
  std::vector<LayerSpec> layers = {LayerSpec::dense("d", 10, 10), LayerSpec::dropout(0.5)};
  init_stack_params(ps, layers, "enc", 31);
  Tensor in = rand_tensor({10}, 32);
  auto [a, t1] = forward(ps, layers, in, Mode::kEval, 1);
  auto [b, t2] = forward(ps, layers, in, Mode::kEval, 2);  // different seed, same output
  CHECK(a.data == b.data);
  auto [c, t3] = forward(ps, layers, in, Mode::kTrain, 1);
  auto [d, t4] = forward(ps, layers, in, Mode::kTrain, 1);
  CHECK(c.data == d.data);  // train mode is still deterministic per seed
  bool same_as_eval = a.data == c.data;
  CHECK_FALSE(same_as_eval);  // with rate 0.5 on 10 units, a no-drop draw is ~0.1%
}

TEST_CASE("conv3 then tconv3 with tied geometry restores the spatial shape") {
  for (int dim : {8, 16}) {
    Conv3Geom g{1, 3, 4, 2, 1, dim};
    const int od = g.conv_out_dim();
    Conv3Geom gt{3, 1, 4, 2, 1, od};
    CHECK(gt.tconv_out_dim() == dim);
  }
  Conv3Geom g{1, 2, 2, 2, 0, 6};
  Conv3Geom gt{2, 1, 2, 2, 0, g.conv_out_dim()};
  CHECK(gt.tconv_out_dim() == 6);
}

TEST_CASE("adam leaves parameters alone for zero gradient and zero lr") {
  ParamStore ps;
  ps.add("p", rand_tensor({4}, 41), "enc");
  const std::vector<double> before = ps.at("p").data;

  GradientMap zero;
  zero.emplace("p", Tensor({4}));
  adam_step(ps, zero, 0.1, 0.9, 0.999, 1e-8);
  CHECK(ps.at("p").data == before);

  GradientMap g;
  g.emplace("p", rand_tensor({4}, 42));
  adam_step(ps, g, 0.0, 0.9, 0.999, 1e-8);
  CHECK(ps.at("p").data == before);  // bit-identical under lr = 0
}

TEST_CASE("adam first step from zero state moves by lr against the gradient sign") {
  ParamStore ps;
  Tensor p0({3}, {1.0, -2.0, 0.5});
  ps.add("p", p0, "enc");
  GradientMap g;
  g.emplace("p", Tensor({3}, {0.7, -0.3, 1e3}));
  const double lr = 0.01;
  adam_step(ps, g, lr, 0.9, 0.999, 1e-8);
  const Tensor& p = ps.at("p");
  CHECK(p[0] == doctest::Approx(1.0 - lr).epsilon(1e-6));
  CHECK(p[1] == doctest::Approx(-2.0 + lr).epsilon(1e-6));
  CHECK(p[2] == doctest::Approx(0.5 - lr).epsilon(1e-6));
}

TEST_CASE("adam update magnitude under a constant gradient equals lr in the limit") {
  ParamStore ps;
  ps.add("p", Tensor({1}, {5.0}), "enc");
  GradientMap g;
  g.emplace("p", Tensor({1}, {2.0}));
  const double lr = 0.05;
  double prev = ps.at("p")[0];
  for (int i = 0; i < 200; ++i) {
    adam_step(ps, g, lr, 0.9, 0.999, 1e-8);
    const double step = prev - ps.at("p")[0];
    CHECK(step == doctest::Approx(lr).epsilon(1e-6));  // mhat/sqrt(vhat) = sign(g) exactly
    prev = ps.at("p")[0];
  }
  CHECK(ps.step == 200);
}

TEST_CASE("grad_check is exact on a quadratic and rejects non-determinism") {
  ParamStore ps;
  ps.add("p", rand_tensor({6}, 51), "enc");
  auto quad = [](Tape& t, const ParamStore& p) { return t.square_sum(t.param("p", p.at("p"))); };
  CHECK(grad_check(ps, quad, 1e-6) < 1e-8);

  int calls = 0;
  auto flaky = [&calls](Tape& t, const ParamStore& p) {
    return t.scale(t.square_sum(t.param("p", p.at("p"))), 1.0 + 0.1 * (calls++ % 2));
  };
  CHECK_THROWS(grad_check(ps, flaky, 1e-6));
}

TEST_CASE("encoder-like and decoder-like stacks pass the gradient checker") {
  SUBCASE("encoder: conv+ELU+dense") {
    Conv3Geom g{1, 2, 2, 2, 0, 4};
    ParamStore ps;
    std::vector<LayerSpec> layers = {LayerSpec::conv3("c", g), LayerSpec::elu(),
                                     LayerSpec::dense("d", 16, 6)};
    init_stack_params(ps, layers, "enc", 61);
    Tensor in = rand_tensor({1, 4, 4, 4}, 62, 0.0, 1.0);
    auto fn = [&](Tape& t, const ParamStore& p) {
      return t.square_sum(forward_stack(t, p, layers, t.input(in), Mode::kEval, 0));
    };
    CHECK(grad_check(ps, fn, 1e-5) < 1e-4);
  }
  SUBCASE("decoder: dense+tconv+sigmoid") {
    Conv3Geom g{2, 1, 2, 2, 0, 2};
    ParamStore ps;
    std::vector<LayerSpec> layers = {LayerSpec::dense("d", 6, 16), LayerSpec::elu(),
                                     LayerSpec::tconv3("t", g), LayerSpec::sigmoid()};
    init_stack_params(ps, layers, "dec", 63);
    Tensor in = rand_tensor({6}, 64);
    auto fn = [&](Tape& t, const ParamStore& p) {
      Tape::NodeId x = t.input(in);
      Tape::NodeId flat = forward_stack(t, p, {layers[0], layers[1]}, x, Mode::kEval, 0);
      Tape::NodeId cube = t.reshape(flat, {2, 2, 2, 2});
      Tape::NodeId out = forward_stack(t, p, {layers[2], layers[3]}, cube, Mode::kEval, 0);
      Tensor target({64});
      for (long i = 0; i < 64; ++i) target[i] = i % 3 == 0 ? 1.0 : 0.0;
      return t.recon_stretched(t.clamp(out, 1e-6, 1.0 - 1e-6), target);
    };
    CHECK(grad_check(ps, fn, 1e-5) < 1e-4);
  }
}

TEST_CASE("parameters shared across graph branches accumulate gradients") {
  Tape tape;
  Tensor v({2}, {3.0, -1.0});
  Tape::NodeId p1 = tape.param("shared", v);
  Tape::NodeId p2 = tape.param("shared", v);
  Tape::NodeId loss = tape.add(tape.square_sum(p1), tape.sum(p2));
  tape.backward(tape.sum(loss));
  GradientMap g = tape.grads();
  CHECK(g.at("shared")[0] == doctest::Approx(2.0 * 3.0 + 1.0));
  CHECK(g.at("shared")[1] == doctest::Approx(2.0 * -1.0 + 1.0));
}
