#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "signrelu/grad.hpp"
#include "signrelu/net.hpp"
#include "signrelu/rng.hpp"
#include "signrelu/train.hpp"

using namespace signrelu;

namespace {

SignReluNet scalar_net(double w1, double b1, double w2, double b2, double alpha = 1.0) {
  return SignReluNet({Layer(1, 1, {w1}, {b1}), Layer(1, 1, {w2}, {b2})}, alpha);
}

SignReluNet random_net(std::initializer_list<std::size_t> sizes, Rng rng) {
  auto net = init_net(sizes, rng.uniform(0.3, 2.0), rng.derive("init"));
  for (auto& L : net.mutable_layers())
    for (double& b : L.bias) b = rng.uniform(-0.5, 0.5);
  return net;
}

// Central finite differences of the mean batch loss, parameter by parameter.
Gradient finite_difference(const SignReluNet& net, std::span<const Sample> batch, double h) {
  Gradient g = Gradient::zeros_like(net);
  SquaredLoss loss;
  SignReluNet probe = net;
  for (std::size_t l = 0; l < net.layers().size(); ++l) {
    auto perturb = [&](std::vector<double>& params, std::vector<double>& out) {
      for (std::size_t i = 0; i < params.size(); ++i) {
        const double orig = params[i];
        params[i] = orig + h;
        const double up = loss_and_grad(probe, loss, batch);
        params[i] = orig - h;
        const double dn = loss_and_grad(probe, loss, batch);
        params[i] = orig;
        out[i] = (up - dn) / (2.0 * h);
      }
    };
    perturb(probe.mutable_layers()[l].weights, g.layers[l].weights);
    perturb(probe.mutable_layers()[l].bias, g.layers[l].bias);
  }
  return g;
}

double min_abs_preactivation(const SignReluNet& net, std::span<const Sample> batch) {
  double m = std::numeric_limits<double>::infinity();
  for (const auto& s : batch) {
    std::vector<double> cur = s.input;
    for (std::size_t l = 0; l < net.layers().size(); ++l) {
      std::vector<double> z(net.layers()[l].out);
      net.layers()[l].apply(cur, z);
      if (net.is_activated(l))
        for (double& v : z) {
          m = std::min(m, std::abs(v));
          v = signrelu::signrelu(v, net.alpha());
        }
      cur = z;
    }
  }
  return m;
}

}  // namespace

TEST(SignRelu, PositiveBranchIsIdentity) { EXPECT_EQ(signrelu::signrelu(2.0, 1.0), 2.0); }

TEST(SignRelu, NegativeBranchIsRational) { EXPECT_DOUBLE_EQ(signrelu::signrelu(-1.0, 1.0), -0.5); }

TEST(SignRelu, BranchesMeetAtZero) { EXPECT_EQ(signrelu::signrelu(0.0, 3.7), 0.0); }

TEST(SignRelu, RejectsNonFinite) {
  EXPECT_THROW(signrelu::signrelu(std::numeric_limits<double>::quiet_NaN(), 1.0), DomainError);
  EXPECT_THROW(signrelu::signrelu(std::numeric_limits<double>::infinity(), 1.0), DomainError);
}

TEST(SignRelu, BoundedByMaxOfInputAndAlpha) {
  Rng rng(11);
  for (int i = 0; i < 10000; ++i) {
    const double x = rng.uniform(-1e3, 1e3), a = rng.uniform(1e-3, 10.0);
    EXPECT_LE(std::abs(signrelu::signrelu(x, a)), std::max(std::abs(x), a) + 1e-12);
  }
}

TEST(SignRelu, ContinuousAtZero) {
  for (double a : {0.1, 1.0, 7.0}) {
    EXPECT_NEAR(signrelu::signrelu(1e-12, a), 0.0, 1e-11);
    EXPECT_NEAR(signrelu::signrelu(-1e-12, a), 0.0, 1e-11);
  }
}

TEST(SignRelu, DerivativeConvention) {
  EXPECT_EQ(signrelu_derivative(1.0, 2.0), 1.0);
  EXPECT_EQ(signrelu_derivative(0.0, 2.0), 2.0);
  EXPECT_DOUBLE_EQ(signrelu_derivative(-1.0, 2.0), 0.5);
}

TEST(Forward, IdentityNet) {
  SignReluNet net({Layer(1, 1, {1.0}, {0.0})});
  EXPECT_EQ(forward(net, {5.0})[0], 5.0);
}

TEST(Forward, SingleHiddenUnit) {
  EXPECT_DOUBLE_EQ(forward(scalar_net(1, 0, 1, 0), {-1.0})[0], -0.5);
}

TEST(Forward, ShapeMismatchThrows) {
  auto net = scalar_net(1, 0, 1, 0);
  EXPECT_THROW(forward(net, {1.0, 2.0}), ShapeError);
}

TEST(Forward, LayersMustChain) {
  EXPECT_THROW(SignReluNet({Layer(2, 1), Layer(1, 3)}), ShapeError);
  EXPECT_THROW(SignReluNet({Layer(1, 1)}, 0.0), DomainError);
  EXPECT_THROW(SignReluNet({Layer(1, 1, {std::nan("")}, {0.0})}), DomainError);
}

TEST(Forward, PositivelyHomogeneousOnIdentityBranch) {
  // Nonnegative weights, zero bias: every pre-activation stays positive on
  // positive inputs, so the net is linear there.
  SignReluNet net({Layer(3, 2, {1, 2, 0.5, 0.1, 3, 1}, {0, 0, 0}), Layer(1, 3, {1, 1, 2}, {0})});
  for (double lam : {0.5, 2.0, 10.0}) {
    const auto a = forward(net, {0.3, 0.7});
    const auto b = forward(net, {0.3 * lam, 0.7 * lam});
    EXPECT_NEAR(b[0], lam * a[0], 1e-12 * lam);
  }
}

TEST(Forward, OutputProjection) {
  SignReluNet net({Layer(2, 1, {3.0, 4.0}, {0, 0})});
  const auto y = forward(net, {1.0}, 1.0);
  EXPECT_NEAR(std::hypot(y[0], y[1]), 1.0, 1e-15);
  EXPECT_NEAR(y[0] / y[1], 0.75, 1e-15);
}

TEST(ParamNorm, ProductOfMaxEntries) {
  auto net = scalar_net(2, 1, 3, 0);
  EXPECT_DOUBLE_EQ(param_norm(net).eq1_total, 6.0);
}

TEST(ParamNorm, ZeroNet) {
  SignReluNet net({Layer(1, 1)});
  const auto r = param_norm(net);
  EXPECT_EQ(r.eq1_total, 0.0);
  EXPECT_EQ(r.cover_total, 0.0);
}

TEST(ParamNorm, ColumnL1) {
  SignReluNet net({Layer(2, 2, {1, -1, 2, 0}, {0, 0}), Layer(1, 2, {1, 1}, {0})});
  EXPECT_DOUBLE_EQ(param_norm(net).per_layer[0].cover_norm, 3.0);
}

TEST(ParamNorm, InvariantUnderHiddenPermutation) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto net = random_net({3, 5, 4, 2}, rng.derive("net", trial));
    // Swap hidden units 0 and 3 of the first hidden layer.
    auto perm = net;
    auto& L0 = perm.mutable_layers()[0];
    auto& L1 = perm.mutable_layers()[1];
    for (std::size_t j = 0; j < L0.in; ++j) std::swap(L0.w(0, j), L0.w(3, j));
    std::swap(L0.bias[0], L0.bias[3]);
    for (std::size_t i = 0; i < L1.out; ++i) std::swap(L1.w(i, 0), L1.w(i, 3));
    const auto a = param_norm(net), b = param_norm(perm);
    EXPECT_DOUBLE_EQ(a.eq1_total, b.eq1_total);
    EXPECT_DOUBLE_EQ(a.cover_total, b.cover_total);
    const auto ya = forward(net, {0.1, -0.2, 0.3}), yb = forward(perm, {0.1, -0.2, 0.3});
    EXPECT_NEAR(ya[0], yb[0], 1e-14);
  }
}

TEST(ParamNorm, MonotoneInEntryMagnitude) {
  Rng rng(6);
  auto net = random_net({2, 3, 1}, rng);
  const auto base = param_norm(net);
  auto bigger = net;
  bigger.mutable_layers()[0].weights[2] *= 3.0;
  bigger.mutable_layers()[1].bias[0] = 5.0;
  const auto r = param_norm(bigger);
  EXPECT_GE(r.eq1_total, base.eq1_total);
  EXPECT_GE(r.cover_total, base.cover_total);
  EXPECT_GE(r.eq1_total, r.per_layer.back().eq1_norm);
}

TEST(Grad, HandDerivativeOfLinearUnit) {
  SignReluNet net({Layer(1, 1, {1.0}, {0.0})});
  std::vector<Sample> batch{{{1.0}, {0.0}}};
  const auto g = grad(net, SquaredLoss{}, batch);
  EXPECT_DOUBLE_EQ(g.layers[0].weights[0], 2.0);
}

TEST(Grad, ZeroResidualGivesZeroGradient) {
  Rng rng(3);
  auto net = random_net({2, 4, 1}, rng);
  std::vector<Sample> batch;
  for (int i = 0; i < 10; ++i) {
    std::vector<double> x{rng.uniform(-1, 1), rng.uniform(-1, 1)};
    batch.push_back({x, forward(net, x)});
  }
  EXPECT_NEAR(grad(net, SquaredLoss{}, batch).norm(), 0.0, 1e-15);
}

TEST(Grad, MatchesCentralFiniteDifferences) {
  Rng rng(2024);
  int checked = 0;
  for (int trial = 0; checked < 50; ++trial) {
    Rng r = rng.derive("instance", trial);
    auto net = random_net({2, 3, 1}, r.derive("net"));
    std::vector<Sample> batch;
    for (int i = 0; i < 5; ++i)
      batch.push_back({{r.uniform(-2, 2), r.uniform(-2, 2)}, {r.uniform(-1, 1)}});
    if (min_abs_preactivation(net, batch) < 1e-2) continue;
    const auto g = grad(net, SquaredLoss{}, batch);
    const auto fd = finite_difference(net, batch, 1e-5);
    double diff = 0.0, ref = 0.0;
    for (std::size_t l = 0; l < g.layers.size(); ++l) {
      for (std::size_t i = 0; i < g.layers[l].weights.size(); ++i) {
        diff += std::pow(g.layers[l].weights[i] - fd.layers[l].weights[i], 2);
        ref += std::pow(fd.layers[l].weights[i], 2);
      }
      for (std::size_t i = 0; i < g.layers[l].bias.size(); ++i) {
        diff += std::pow(g.layers[l].bias[i] - fd.layers[l].bias[i], 2);
        ref += std::pow(fd.layers[l].bias[i], 2);
      }
    }
    EXPECT_LE(std::sqrt(diff / ref), 1e-5) << "instance " << trial;
    ++checked;
  }
}

TEST(Grad, ThroughOutputProjection) {
  Rng rng(8);
  auto net = random_net({2, 4, 2}, rng);
  for (auto& w : net.mutable_layers()[1].weights) w *= 20.0;
  std::vector<Sample> batch{{{0.5, -0.4}, {0.1, 0.2}}, {{-0.3, 0.9}, {-0.2, 0.0}}};
  const double radius = 0.3;
  const auto g = grad(net, SquaredLoss{}, batch, radius);
  // Finite differences with projection applied.
  SignReluNet probe = net;
  auto& w = probe.mutable_layers()[1].weights;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double o = w[i], h = 1e-6;
    w[i] = o + h;
    const double up = loss_and_grad(probe, SquaredLoss{}, batch, nullptr, radius);
    w[i] = o - h;
    const double dn = loss_and_grad(probe, SquaredLoss{}, batch, nullptr, radius);
    w[i] = o;
    EXPECT_NEAR(g.layers[1].weights[i], (up - dn) / (2 * h), 1e-6);
  }
}

TEST(Grad, NonFiniteLossReportsSample) {
  SignReluNet net({Layer(1, 1, {1e200}, {0.0})});
  std::vector<Sample> batch{{{0.0}, {0.0}}, {{1e200}, {0.0}}};
  try {
    (void)grad(net, SquaredLoss{}, batch);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_EQ(e.index(), 1u);
  }
}

TEST(Train, ZeroStepsIsNoOp) {
  Rng rng(1);
  auto net = init_net({1, 4, 1}, 1.0, rng);
  std::vector<Sample> data{{{1.0}, {2.0}}};
  TrainConfig cfg;
  cfg.steps = 0;
  auto res = train(net, SquaredLoss{}, data, cfg);
  EXPECT_TRUE(res.loss_trace.empty());
  EXPECT_EQ(to_text(res.net), to_text(net));
}

TEST(Train, FitsLinearTarget) {
  std::vector<Sample> data;
  for (int i = 0; i < 100; ++i) {
    const double x = -1.0 + 2.0 * i / 99.0;
    data.push_back({{x}, {2.0 * x}});
  }
  // Least-squares oracle: y = 2x is fitted exactly by a line, residual 0.
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (const auto& s : data) {
    sx += s.input[0];
    sy += s.target[0];
    sxx += s.input[0] * s.input[0];
    sxy += s.input[0] * s.target[0];
  }
  const double n = static_cast<double>(data.size());
  const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  ASSERT_NEAR(slope, 2.0, 1e-12);

  TrainConfig cfg;
  cfg.steps = 2000;
  cfg.batch_size = 32;
  cfg.step_size = 0.02;
  cfg.momentum = 0.9;
  cfg.seed = 7;
  auto res = train(init_net({1, 16, 1}, 1.0, Rng(7)), SquaredLoss{}, data, cfg);
  EXPECT_EQ(res.loss_trace.size(), cfg.steps);
  EXPECT_LT(loss_and_grad(res.net, SquaredLoss{}, data), 1e-3);
}

TEST(Train, SameSeedSameResult) {
  std::vector<Sample> data;
  for (int i = 0; i < 20; ++i) data.push_back({{0.1 * i}, {std::sin(0.1 * i)}});
  TrainConfig cfg;
  cfg.steps = 50;
  cfg.batch_size = 4;
  cfg.seed = 99;
  auto a = train(init_net({1, 8, 1}, 1.0, Rng(3)), SquaredLoss{}, data, cfg);
  auto b = train(init_net({1, 8, 1}, 1.0, Rng(3)), SquaredLoss{}, data, cfg);
  EXPECT_EQ(to_text(a.net), to_text(b.net));
  EXPECT_EQ(a.loss_trace, b.loss_trace);
}

TEST(Train, SmallStepMovesAtMostStepTimesGradNorm) {
  Rng rng(12);
  auto net = random_net({2, 5, 1}, rng);
  std::vector<Sample> data;
  for (int i = 0; i < 8; ++i) data.push_back({{rng.uniform(-1, 1), rng.uniform(-1, 1)}, {rng.uniform(-1, 1)}});
  TrainConfig cfg;
  cfg.steps = 1;
  cfg.batch_size = data.size();
  cfg.step_size = 1e-6;
  const double gnorm = grad(net, SquaredLoss{}, data).norm();
  auto res = train(net, SquaredLoss{}, data, cfg);
  double moved = 0.0;
  for (std::size_t l = 0; l < net.layers().size(); ++l) {
    for (std::size_t i = 0; i < net.layers()[l].weights.size(); ++i)
      moved += std::pow(res.net.layers()[l].weights[i] - net.layers()[l].weights[i], 2);
    for (std::size_t i = 0; i < net.layers()[l].bias.size(); ++i)
      moved += std::pow(res.net.layers()[l].bias[i] - net.layers()[l].bias[i], 2);
  }
  EXPECT_LE(std::sqrt(moved), cfg.step_size * gnorm * (1 + 1e-9));
}

TEST(Train, DivergenceReportsStep) {
  std::vector<Sample> data;
  for (int i = 0; i < 10; ++i) data.push_back({{10.0 * i}, {-1e3 * i}});
  TrainConfig cfg;
  cfg.steps = 500;
  cfg.batch_size = 10;
  cfg.step_size = 10.0;
  EXPECT_THROW(train(init_net({1, 4, 1}, 1.0, Rng(1)), SquaredLoss{}, data, cfg), TrainingError);
}

TEST(Serialization, RoundTripIsExact) {
  Rng rng(77);
  for (int trial = 0; trial < 25; ++trial) {
    Rng r = rng.derive("net", trial);
    auto net = random_net({static_cast<std::size_t>(1 + r.below(3)), 1 + r.below(6), 1 + r.below(3)}, r);
    const auto text = to_text(net);
    const auto back = from_text(text);
    EXPECT_EQ(to_text(back), text);
    EXPECT_EQ(back.alpha(), net.alpha());
    for (std::size_t l = 0; l < net.layers().size(); ++l) {
      EXPECT_EQ(back.layers()[l].weights, net.layers()[l].weights);
      EXPECT_EQ(back.layers()[l].bias, net.layers()[l].bias);
    }
  }
}

TEST(Serialization, RejectsGarbage) {
  EXPECT_THROW(from_text("signrelu-net 1\nalpha x\n"), FileError);
  EXPECT_THROW(from_text("not-a-net"), FileError);
  EXPECT_THROW(from_text("signrelu-net 1\nalpha 1\nactivate_output 0\nlayers 2\n1 1\n1\n0\n1 2\n1 1\n0\n"),
               ShapeError);
}

TEST(OutputBounds, ContainSampledOutputs) {
  Rng rng(4);
  auto net = random_net({2, 6, 3, 1}, rng);
  const std::vector<double> lo{-1, -1}, hi{1, 1};
  const auto [blo, bhi] = output_bounds(net, lo, hi);
  for (int i = 0; i < 2000; ++i) {
    const auto y = forward(net, {rng.uniform(-1, 1), rng.uniform(-1, 1)});
    EXPECT_GE(y[0], blo[0] - 1e-12);
    EXPECT_LE(y[0], bhi[0] + 1e-12);
  }
}

TEST(Train, CosineDecayEndpoints) {
  std::vector<Sample> data;
  for (int i = 0; i < 20; ++i) data.push_back({{0.1 * i}, {std::sin(0.1 * i)}});
  TrainConfig cfg;
  cfg.steps = 60;
  cfg.batch_size = 4;
  cfg.step_size = 0.05;
  cfg.seed = 4;
  const auto net0 = init_net({1, 8, 1}, 1.0, Rng(3));
  const auto flat = train(net0, SquaredLoss{}, data, cfg);
  // Decaying to the starting value is the constant schedule.
  cfg.final_step_size = cfg.step_size;
  const auto same = train(net0, SquaredLoss{}, data, cfg);
  EXPECT_EQ(to_text(flat.net), to_text(same.net));
  cfg.final_step_size = 1e-4;
  const auto decayed = train(net0, SquaredLoss{}, data, cfg);
  EXPECT_NE(to_text(flat.net), to_text(decayed.net));
  EXPECT_EQ(decayed.loss_trace.size(), cfg.steps);
  cfg.final_step_size = 0.0;
  EXPECT_THROW(train(net0, SquaredLoss{}, data, cfg), DomainError);
}
