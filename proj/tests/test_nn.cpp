#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <functional>

#include "lakered/diffusion.hpp"
#include "lakered/nn.hpp"
#include "test_util.hpp"

using namespace lakered;

namespace {

// Central finite differences over an arbitrary value array.
void fd_check(std::vector<double>& values, const std::vector<double>& analytic,
              const std::function<double()>& loss, double tol = 1e-6,
              double h = 1e-6, int max_checks = 64, uint64_t seed = 5) {
  REQUIRE(values.size() == analytic.size());
  Rng rng(seed);
  std::vector<size_t> idx(values.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  if (int(idx.size()) > max_checks) {
    for (size_t i = 0; i < idx.size(); ++i)
      std::swap(idx[i], idx[rng.uniform_int(0, int(idx.size()) - 1)]);
    idx.resize(size_t(max_checks));
  }
  for (size_t j : idx) {
    const double orig = values[j];
    values[j] = orig + h;
    const double lp = loss();
    values[j] = orig - h;
    const double lm = loss();
    values[j] = orig;
    const double fd = (lp - lm) / (2 * h);
    const double err = std::abs(fd - analytic[j]);
    const double scale = std::max({std::abs(fd), std::abs(analytic[j]), 1.0});
    INFO("index " << j << " fd=" << fd << " analytic=" << analytic[j]);
    REQUIRE(err <= tol * scale);
  }
}

// Loss = sum(R .* out) for a fixed random R makes the backward seed just R.
Grid<double> random_seed_grid(const Grid<double>& like, uint64_t seed) {
  Rng rng(seed);
  Grid<double> r(like.h, like.w, like.c);
  for (auto& v : r.v) v = rng.uniform(-1, 1);
  return r;
}

double weighted_sum(const Grid<double>& g, const Grid<double>& r) {
  double s = 0;
  for (size_t i = 0; i < g.v.size(); ++i) s += g.v[i] * r.v[i];
  return s;
}

}  // namespace

TEST_CASE("linear layer gradients") {
  Rng rng(1);
  nn::Linear<double> lin;
  lin.init("lin", 4, 3, rng);
  MatX<double> x(5, 4);
  for (int i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform(-1, 1);
  MatX<double> r(5, 3);
  for (int i = 0; i < r.size(); ++i) r.data()[i] = rng.uniform(-1, 1);

  auto loss = [&]() { return (lin.forward(x).array() * r.array()).sum(); };
  loss();
  lin.weight.g.assign(lin.weight.g.size(), 0);
  lin.bias.g.assign(lin.bias.g.size(), 0);
  MatX<double> dx = lin.backward(r);

  fd_check(lin.weight.w, lin.weight.g, loss);
  fd_check(lin.bias.w, lin.bias.g, loss);

  std::vector<double> xv(x.data(), x.data() + x.size());
  std::vector<double> dxv(dx.data(), dx.data() + dx.size());
  auto loss_x = [&]() {
    MatX<double> xm = Eigen::Map<MatX<double>>(xv.data(), 5, 4);
    return (lin.forward(xm).array() * r.array()).sum();
  };
  fd_check(xv, dxv, loss_x);
}

TEST_CASE("conv2d gradients, stride 1 and 2") {
  for (int stride : {1, 2}) {
    Rng rng(2 + stride);
    nn::Conv2d<double> conv;
    conv.init("conv", 3, 4, 3, stride, rng);
    Grid<double> x = testutil::random_grid_d(6, 5, 3, rng);
    Grid<double> probe = conv.forward(x);
    Grid<double> r = random_seed_grid(probe, 77);

    auto loss = [&]() { return weighted_sum(conv.forward(x), r); };
    loss();
    conv.weight.g.assign(conv.weight.g.size(), 0);
    conv.bias.g.assign(conv.bias.g.size(), 0);
    Grid<double> dx = conv.backward(r);

    fd_check(conv.weight.w, conv.weight.g, loss);
    fd_check(conv.bias.w, conv.bias.g, loss);
    auto loss_x = [&]() { return weighted_sum(conv.forward(x), r); };
    fd_check(x.v, dx.v, loss_x);
  }
}

TEST_CASE("groupnorm gradients") {
  Rng rng(3);
  nn::GroupNorm<double> gn;
  gn.init("gn", 6, 3);
  for (auto& v : gn.gamma.w) v = rng.uniform(0.5, 1.5);
  for (auto& v : gn.beta.w) v = rng.uniform(-0.5, 0.5);
  Grid<double> x = testutil::random_grid_d(4, 4, 6, rng);
  Grid<double> r = random_seed_grid(x, 31);

  auto loss = [&]() { return weighted_sum(gn.forward(x), r); };
  loss();
  gn.gamma.g.assign(gn.gamma.g.size(), 0);
  gn.beta.g.assign(gn.beta.g.size(), 0);
  Grid<double> dx = gn.backward(r);

  fd_check(gn.gamma.w, gn.gamma.g, loss, 1e-5);
  fd_check(gn.beta.w, gn.beta.g, loss, 1e-5);
  fd_check(x.v, dx.v, loss, 1e-5);
}

TEST_CASE("silu gradient and upsample adjoint") {
  Rng rng(4);
  nn::SiLU<double> act;
  Grid<double> x = testutil::random_grid_d(3, 3, 2, rng, -2, 2);
  Grid<double> r = random_seed_grid(x, 13);
  auto loss = [&]() { return weighted_sum(act.forward(x), r); };
  loss();
  Grid<double> dx = act.backward(r);
  fd_check(x.v, dx.v, loss);

  // <up(x), y> == <x, up^T(y)>
  Grid<double> a = testutil::random_grid_d(3, 4, 2, rng);
  Grid<double> y = testutil::random_grid_d(6, 8, 2, rng);
  Grid<double> up = nn::upsample2x_nearest(a);
  Grid<double> down = nn::upsample2x_nearest_backward(y);
  double lhs = 0, rhs = 0;
  for (size_t i = 0; i < up.v.size(); ++i) lhs += up.v[i] * y.v[i];
  for (size_t i = 0; i < a.v.size(); ++i) rhs += a.v[i] * down.v[i];
  REQUIRE(lhs == Catch::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("resblock gradients including time embedding") {
  Rng rng(5);
  ResBlock<double> rb;
  rb.init("rb", 4, 6, 8, rng);
  Grid<double> x = testutil::random_grid_d(4, 4, 4, rng);
  MatX<double> temb(1, 8);
  for (int i = 0; i < 8; ++i) temb(0, i) = rng.uniform(-1, 1);
  Grid<double> probe = rb.forward(x, temb);
  Grid<double> r = random_seed_grid(probe, 19);

  auto loss = [&]() { return weighted_sum(rb.forward(x, temb), r); };
  loss();
  nn::ParamSet<double> ps;
  rb.collect(ps);
  ps.zero_grad();
  MatX<double> dtemb = MatX<double>::Zero(1, 8);
  Grid<double> dx = rb.backward(r, dtemb);

  for (auto* p : ps.items) fd_check(p->w, p->g, loss, 1e-5, 1e-6, 24);
  fd_check(x.v, dx.v, loss, 1e-5, 1e-6, 24);
  std::vector<double> tv(temb.data(), temb.data() + 8);
  std::vector<double> dtv(dtemb.data(), dtemb.data() + 8);
  auto loss_t = [&]() {
    MatX<double> tm = Eigen::Map<MatX<double>>(tv.data(), 1, 8);
    return weighted_sum(rb.forward(x, tm), r);
  };
  fd_check(tv, dtv, loss_t, 1e-5);
}

TEST_CASE("unet end-to-end parameter gradients on a tiny instance") {
  Rng rng(6);
  UNet<double> unet;
  unet.init(3, 3, 4, rng);
  // Break the zero-init so output-path gradients are informative downstream.
  for (auto& v : unet.conv_out.weight.w) v = rng.uniform(-0.1, 0.1);

  Grid<double> zt = testutil::random_grid_d(4, 4, 3, rng);
  Grid<double> cond = testutil::random_grid_d(4, 4, 3, rng);
  Mask cm = testutil::random_mask(4, 4, rng);
  Grid<double> probe = unet.forward(zt, cond, cm, 3);
  Grid<double> r = random_seed_grid(probe, 23);

  auto loss = [&]() { return weighted_sum(unet.forward(zt, cond, cm, 3), r); };
  loss();
  nn::ParamSet<double> ps;
  unet.collect(ps);
  ps.zero_grad();
  Grid<double> dcond = unet.backward(r);

  for (auto* p : ps.items) fd_check(p->w, p->g, loss, 2e-5, 1e-6, 8);
  fd_check(cond.v, dcond.v, loss, 2e-5, 1e-6, 24);
}

TEST_CASE("adam minimizes a quadratic") {
  nn::Param<double> p;
  p.resize("w", {8});
  Rng rng(7);
  for (auto& v : p.w) v = rng.uniform(-2, 2);
  nn::ParamSet<double> ps;
  ps.add(p);
  nn::Adam<double> adam;
  adam.lr = 0.05;
  adam.init(ps);
  for (int step = 0; step < 400; ++step) {
    ps.zero_grad();
    for (size_t i = 0; i < p.w.size(); ++i) p.g[i] = 2 * (p.w[i] - 1.0);
    adam.step(ps);
  }
  for (double v : p.w) REQUIRE(v == Catch::Approx(1.0).margin(1e-3));
}

TEST_CASE("timestep embedding is bounded and distinct per step") {
  VecX<double> e1 = nn::timestep_embedding<double>(1, 32);
  VecX<double> e2 = nn::timestep_embedding<double>(2, 32);
  REQUIRE(e1.size() == 32);
  CHECK((e1 - e2).norm() > 1e-3);
  for (int i = 0; i < 32; ++i) REQUIRE(std::abs(e1[i]) <= 1.0 + 1e-12);
}
