#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "signrelu/eval_bounds.hpp"

using namespace signrelu;

namespace {

std::vector<std::vector<double>> draw(const Q0Spec& q, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(q0_sample(q, rng));
  return out;
}

// KL between 1-D Gaussians.
double gauss_kl(double m1, double v1, double m2, double v2) {
  return 0.5 * (std::log(v2 / v1) + (v1 + (m1 - m2) * (m1 - m2)) / v2 - 1.0);
}

NoiseSchedule unit_sp_schedule(std::size_t T) {
  auto s = make_schedule(T, ScheduleScheme::constant(0.1));
  s.sigma_p.assign(T, 1.0);
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// KDE and KL estimation

TEST(Kde, IntegratesToOneAndUsesSilverman) {
  const auto q = make_truncated_gaussian({0.1}, 0.3);
  const auto xs = draw(q, 2000, 3);
  const GaussianKde kde(xs, 1.0);
  double m = 0.0, v = 0.0;
  for (const auto& x : xs) m += x[0] / 2000.0;
  for (const auto& x : xs) v += (x[0] - m) * (x[0] - m) / 1999.0;
  EXPECT_NEAR(kde.bandwidth(), std::sqrt(v) * std::pow(4.0 / (3.0 * 2000.0), 0.2), 1e-12);
  const auto rule = composite_gauss_legendre(400, 8, -3.0, 3.0);
  double tot = 0.0;
  for (std::size_t i = 0; i < rule.nodes.size(); ++i) tot += rule.weights[i] * kde.density({&rule.nodes[i], 1});
  EXPECT_NEAR(tot, 1.0, 1e-10);
  // Window truncation against the brute-force sum.
  const double x = 0.37, h = kde.bandwidth();
  double brute = 0.0;
  for (const auto& s : xs) brute += std::exp(-0.5 * (x - s[0]) * (x - s[0]) / (h * h));
  brute /= 2000.0 * std::sqrt(2.0 * std::numbers::pi) * h;
  EXPECT_NEAR(kde.density({&x, 1}), brute, 1e-12 * brute);
}

TEST(KlEstimate, SelfKlIsSmall) {
  const auto q = make_truncated_gaussian({0.1}, 0.3);
  const auto r = kl_estimate(q, draw(q, 10000, 5));
  EXPECT_LE(r.estimate, 0.05);
  EXPECT_GE(r.estimate, -3.0 * r.stderr_);
  EXPECT_GE(r.stderr_, 0.0);
  EXPECT_EQ(r.n_samples, 10000u);
  EXPECT_GT(r.bandwidth, 0.0);
}

TEST(KlEstimate, ShiftedGaussianMatchesClosedForm) {
  const double s = 0.2;
  const auto q = make_truncated_gaussian({0.0}, s);
  Rng rng(9);
  std::vector<std::vector<double>> xs;
  for (int i = 0; i < 10000; ++i) xs.push_back({0.5 + s * rng.normal()});
  const auto r = kl_estimate(q, xs);
  EXPECT_NEAR(r.estimate, 0.5 * 0.5 / (2 * s * s), 0.2 * 0.5 * 0.5 / (2 * s * s));
  // Large-sample KDE limit N(0.5, s^2 + h^2); sparse far-left tail of the sample adds a few percent.
  const double limit = gauss_kl(0.0, s * s, 0.5, s * s + r.bandwidth * r.bandwidth);
  EXPECT_GE(r.estimate, limit - 3 * r.stderr_);
  EXPECT_NEAR(r.estimate, limit, 0.1 * limit);
}

TEST(KlEstimate, DecreasesWithSampleCount) {
  const auto q = make_gaussian_mixture({{0.5, {-0.4}, 0.2}, {0.5, {0.5}, 0.25}});
  std::vector<double> med;
  for (std::size_t n : {1000u, 10000u, 100000u}) {
    std::vector<double> v;
    for (std::uint64_t seed = 0; seed < 5; ++seed) v.push_back(kl_estimate(q, draw(q, n, 100 + seed)).estimate);
    med.push_back(median(v));
  }
  EXPECT_GT(med[0], med[1]);
  EXPECT_GT(med[1], med[2]);
}

TEST(KlEstimate, McPluginAgreesWithQuadrature) {
  const auto q = make_truncated_gaussian({0.0, 0.2}, 0.4);
  const auto xs = draw(q, 4000, 11);
  KlConfig quad, mc;
  mc.method = KLReport::Method::mc_plugin;
  mc.mc_draws = 40000;
  mc.seed = 4;
  const auto a = kl_estimate(q, xs, quad), b = kl_estimate(q, xs, mc);
  EXPECT_EQ(std::string(method_name(b.method)), "mc_plugin");
  EXPECT_NEAR(a.estimate, b.estimate, 4 * b.stderr_ + 0.005);
}

TEST(KlEstimate, Preconditions) {
  const auto q = make_uniform_q0(3);
  EXPECT_THROW(kl_estimate(q, draw(q, 50, 1)), DomainError);
  EXPECT_THROW(kl_estimate(q, draw(q, 200, 1)), DomainError);
  KlConfig mc;
  mc.method = KLReport::Method::mc_plugin;
  mc.mc_draws = 2000;
  EXPECT_NO_THROW(kl_estimate(q, draw(q, 200, 1), mc));
  const auto q1 = make_uniform_q0(1);
  EXPECT_THROW(kl_estimate(q1, draw(q, 200, 1)), ShapeError);
}

TEST(KlEstimate, FloorBoundsPointMassTarget) {
  // Samples at a single point: the KDE collapses and the floor caps the log.
  const auto q = make_truncated_gaussian({0.3}, 0.2);
  std::vector<std::vector<double>> xs(500, std::vector<double>{0.3});
  const auto r = kl_estimate(q, xs);
  EXPECT_TRUE(std::isfinite(r.estimate));
  EXPECT_LE(r.estimate, -std::log(1e-12) + 2.0);
}

// ---------------------------------------------------------------------------
// Terminal KL

TEST(TerminalKl, BoundFormula) {
  EXPECT_NEAR(terminal_kl_bound(1, 0.01).value, 2.5 * 0.01 / 0.99, 1e-15);
  EXPECT_NEAR(terminal_kl_bound(1, 0.01).value, 0.025252525252525, 1e-14);
  EXPECT_NEAR(terminal_kl_bound(3, 0.2).value, 7.5 * 0.25, 1e-14);
  EXPECT_THROW(terminal_kl_bound(1, 1.0), DomainError);
}

TEST(TerminalKl, MatchesGaussianClosedForm) {
  const auto q = make_gaussian({0.2}, 0.5);
  const auto s = make_schedule(4, ScheduleScheme::constant(0.3));
  const double x = 0.8, a = s.alpha(4);
  const auto r = kl_terminal_check(q, s, {&x, 1}, 20000, Rng(3));
  const double truth = gauss_kl(std::sqrt(a) * x, 1 - a, std::sqrt(a) * 0.2, a * 0.25 + 1 - a);
  EXPECT_NEAR(r.estimate, truth, 4 * r.stderr_);
  EXPECT_TRUE(r.holds());
}

TEST(TerminalKl, HoldsOnRandomConfigs) {
  Rng rng(77);
  for (int k = 0; k < 20; ++k) {
    const std::size_t d = 1 + rng.below(2);
    std::vector<double> x(d), mean(d);
    for (std::size_t i = 0; i < d; ++i) {
      x[i] = rng.uniform(-1, 1);
      mean[i] = rng.uniform(-0.8, 0.8);
    }
    const auto q = make_truncated_gaussian(mean, rng.uniform(0.1, 0.6));
    const auto s = make_schedule(1 + rng.below(10), ScheduleScheme::constant(rng.uniform(0.05, 0.5)));
    const auto r = kl_terminal_check(q, s, x, 2000, rng.derive("mc", k));
    EXPECT_TRUE(r.holds()) << k << " est " << r.estimate << " bound " << r.bound;
  }
}

TEST(TerminalKl, CornerPointAndPureNoiseLimit) {
  const auto q = make_uniform_q0(2);
  const std::vector<double> x{1.0, 1.0};
  // alpha_T = 0.1 with a single step.
  const auto s = schedule_from_betas({0.9});
  const auto r = kl_terminal_check(q, s, x, 4000, Rng(1));
  EXPECT_NEAR(r.bound, 2.5 * 2 * 0.1 / 0.9, 1e-12);
  EXPECT_TRUE(r.holds());
  const auto s0 = make_schedule(40, ScheduleScheme::constant(0.5));
  const auto r0 = kl_terminal_check(q, s0, x, 500, Rng(1));
  EXPECT_LT(r0.bound, 1e-10);
  EXPECT_NEAR(r0.estimate, 0.0, 1e-6);
  EXPECT_THROW(kl_terminal_check(q, s, std::vector<double>{1.5, 0.0}, 10, Rng(1)), DomainError);
}

// ---------------------------------------------------------------------------
// Calculators

TEST(Bounds, ApproxArithmetic) {
  const auto r = bound_approx(16, 1, 10, std::numbers::e);
  EXPECT_NEAR(r.value, 10 * (std::pow(16.0, -4) + 1 / std::numbers::e), 1e-14);
  EXPECT_NEAR(r.value, 3.6790, 1e-4);
  EXPECT_NEAR(bound_approx(16, 1, 20, std::numbers::e).value, 2 * r.value, 1e-13);
  EXPECT_NEAR(bound_approx(1e9, 1, 10, 1e12, 0.7).value, 0.7, 1e-9);
  EXPECT_THROW(bound_approx(16, 1, 10, 1.0), DomainError);
  EXPECT_THROW(bound_approx(1, 1, 10, 3.0), DomainError);
  EXPECT_EQ(r.inputs.at("n"), 16.0);
}

TEST(Bounds, EstimationArithmetic) {
  const double n = 8, T = 5, M = 2, m = 1e6, dl = 0.05;
  const double hand = T * (M * M + std::log(M) + T * T * T * M * M * std::log(M)) *
                      (std::sqrt(7 * n * n / m) + std::sqrt(2 * std::log(1 / dl) / m));
  const auto r = bound_estimation(n, 5, M, m, dl);
  EXPECT_NEAR(r.value, hand, 1e-12 * hand);
  EXPECT_GT(r.value, 0.0);
  EXPECT_NEAR(bound_estimation(n, 5, M, 4 * m, dl).value, r.value / 2, 1e-12 * r.value);
  EXPECT_LT(bound_estimation(n, 5, M, 1e300, dl).value, 1e-140);
  EXPECT_THROW(bound_estimation(n, 5, M, m, 0.0), DomainError);
  EXPECT_THROW(bound_estimation(n, 5, M, m, 1.0), DomainError);
  EXPECT_THROW(bound_estimation(n, 5, M, 0.5, 0.1), DomainError);
}

TEST(Bounds, ExcessArithmeticAndRecommendations) {
  const auto r = bound_excess(10, 5, 1, std::exp(-1.0));
  EXPECT_NEAR(r.value, 5 * (1e-4 + 1e-5), 1e-17);
  EXPECT_LT(bound_excess(20, 5, 1, std::exp(-1.0)).value, r.value);
  const auto rec = bound_excess(4, 2, 1, 0.1).recommended;
  const double l4 = std::log(4.0);
  EXPECT_NEAR(rec.at("m"), std::pow(2.0, 6) * std::pow(4.0, 26) * std::pow(l4, 6), 1e-12 * rec.at("m"));
  EXPECT_NEAR(rec.at("M"), 256 * l4, 1e-12);
  EXPECT_THROW(bound_excess(1, 5, 1, 0.1), DomainError);
}

TEST(Bounds, CoveringArithmetic) {
  const std::vector<std::size_t> w11{1, 1};
  const std::vector<double> M2{2.0};
  EXPECT_NEAR(covering_bound(w11, 1, M2, 1.0, 1.0), 2 * std::log(2.0), 1e-15);
  EXPECT_NEAR(covering_bound(w11, 1, M2, 2.0, 1.0, 0.3), 0.3, 1e-15);
  const std::vector<std::size_t> w{2, 5, 3, 1};
  const std::vector<double> Ms{1.5, 4.0, 2.0};
  const double D = 2 * 5 + 5 * 3 + 3 * 1 + 5 + 3 + 1;
  EXPECT_EQ(covering_dimension(w), D);
  // Unit ratio: eps = B^L M^L with B = alpha = 2 and M = 4.
  EXPECT_NEAR(covering_bound(w, 3, Ms, std::pow(8.0, 3), 2.0, 1.25), 1.25, 1e-12);
  const double a = covering_bound(w, 3, Ms, 0.01, 0.5), b = covering_bound(w, 3, Ms, 0.005, 0.5);
  EXPECT_NEAR(b - a, D * std::log(2.0), 1e-12);
  EXPECT_THROW(covering_bound(w, 3, Ms, 0.0, 1.0), DomainError);
  EXPECT_THROW(covering_bound(w, 2, Ms, 1.0, 1.0), ShapeError);
}

TEST(Bounds, MonotoneInDocumentedDirections) {
  // approx: up in T, down in n, down in M past e.
  EXPECT_LT(bound_approx(16, 2, 3, 5).value, bound_approx(16, 2, 4, 5).value);
  EXPECT_GT(bound_approx(16, 2, 3, 5).value, bound_approx(32, 2, 3, 5).value);
  EXPECT_GT(bound_approx(16, 2, 3, 5).value, bound_approx(16, 2, 3, 10).value);
  // estimation: up in T, M, n; down in m, delta.
  const double e0 = bound_estimation(8, 3, 2, 1e5, 0.1).value;
  EXPECT_LT(e0, bound_estimation(8, 4, 2, 1e5, 0.1).value);
  EXPECT_LT(e0, bound_estimation(8, 3, 3, 1e5, 0.1).value);
  EXPECT_LT(e0, bound_estimation(9, 3, 2, 1e5, 0.1).value);
  EXPECT_GT(e0, bound_estimation(8, 3, 2, 2e5, 0.1).value);
  EXPECT_GT(e0, bound_estimation(8, 3, 2, 1e5, 0.2).value);
  // excess: up in T, down in n and delta.
  const double x0 = bound_excess(8, 3, 2, 0.1).value;
  EXPECT_LT(x0, bound_excess(8, 4, 2, 0.1).value);
  EXPECT_GT(x0, bound_excess(9, 3, 2, 0.1).value);
  EXPECT_GT(x0, bound_excess(8, 3, 2, 0.2).value);
  // covering: down in eps, up in M.
  const std::vector<std::size_t> w{1, 4, 1};
  const std::vector<double> Ma{2, 2}, Mb{2, 3};
  EXPECT_GT(covering_bound(w, 2, Ma, 0.1, 1), covering_bound(w, 2, Ma, 0.2, 1));
  EXPECT_LT(covering_bound(w, 2, Ma, 0.1, 1), covering_bound(w, 2, Mb, 0.1, 1));
}

// ---------------------------------------------------------------------------
// Log-density bounds

TEST(LogDensity, HandRecursion) {
  const auto s = unit_sp_schedule(3);
  const auto b = log_density_bounds(s, 1, 1.0, 2.0);
  ASSERT_EQ(b.R.size(), 4u);
  EXPECT_DOUBLE_EQ(b.R[3], 3.0);
  EXPECT_DOUBLE_EQ(b.R[2], 3.0 + 1.0 + (1.0 + 2.0));
  EXPECT_DOUBLE_EQ(b.R[1], 7.0 + 1.0 + 3.0);
  const double up = -0.5 * std::log(2 * std::numbers::pi);
  EXPECT_DOUBLE_EQ(b.upper, up);
  // (T + 1) e^-2 > 0.5: still informative.
  ASSERT_TRUE(b.informative);
  EXPECT_NEAR(b.lower, up + std::log(1 - 4 * std::exp(-2.0)) - (2.0 + 11.0 + 1.0) * (2.0 + 11.0 + 1.0) / 2.0, 1e-12);
  EXPECT_NEAR(b.B_hat, std::abs(b.lower), 1e-12);
}

TEST(LogDensity, SingleStepReducesToGaussianBounds) {
  const auto s = schedule_from_betas({0.3});
  const double xi = 3.0, M = 2.0;
  const auto b = log_density_bounds(s, 2, M, xi);
  const double R = std::sqrt(2.0) + std::sqrt(6.0);
  EXPECT_DOUBLE_EQ(b.R[1], R);
  const double up = -std::log(2 * std::numbers::pi * 0.3);
  EXPECT_NEAR(b.upper, up, 1e-14);
  const double reach = 2 * std::sqrt(2.0) + M * R + M;
  EXPECT_NEAR(b.lower, up + std::log(1 - 2 * std::exp(-xi)) - reach * reach / (2 * 0.3), 1e-12);
}

TEST(LogDensity, RadiusGrowsBackwardAndUninformativeTail) {
  const auto s = make_schedule(6, ScheduleScheme::linear(0.05, 0.4));
  for (auto norms : {StepNorms::uniform, StepNorms::decaying}) {
    const auto b = log_density_bounds(s, 2, 3.0, 4.0, norms);
    for (std::size_t t = 6; t >= 2; --t) EXPECT_GE(b.R[t - 1], b.R[t]);
  }
  const auto u = log_density_bounds(s, 1, 3.0, 1.0);
  EXPECT_FALSE(u.informative);
  EXPECT_TRUE(std::isinf(u.B_hat));
  EXPECT_THROW(log_density_bounds(s, 1, 3.0, 0.0), DomainError);
}

TEST(LogDensity, DecayingNormsGrowLikeOrder) {
  const double M = 4.0, xi = 5.0;
  std::vector<double> ratio;
  for (std::size_t T : {2u, 4u, 8u}) {
    const auto s = unit_sp_schedule(T);
    const auto b = log_density_bounds(s, 1, M, xi, StepNorms::decaying);
    ratio.push_back(b.B_hat / b.B_hat_order);
    EXPECT_NEAR(b.B_hat_order, std::pow(double(T), 4) * M * M * std::log(M), 1e-9);
    EXPECT_NEAR(b.B_tilde_order, double(T) * (M * M + std::log(M)), 1e-12);
  }
  for (double r : ratio) EXPECT_LT(r, 2 * ratio.front());
  // With uniform norms the radius grows geometrically instead.
  const auto g = log_density_bounds(unit_sp_schedule(8), 1, M, xi, StepNorms::uniform);
  EXPECT_GT(g.R[1], std::pow(M, 7) * g.R[8]);
}

// ---------------------------------------------------------------------------
// Experiments

TEST(Experiments, OracleGapShrinksWithTraining) {
  const auto q = make_truncated_gaussian({0.2}, 0.3);
  const auto s = make_schedule(3, ScheduleScheme::constant(0.2));
  DdpmTrainConfig cfg;
  cfg.hidden = {16};
  cfg.train.steps = 0;
  const auto untrained = train_ddpm(q, s, 200, 1, cfg).model;
  cfg.train.steps = 3000;
  cfg.train.momentum = 0.9;
  const auto trained = train_ddpm(q, s, 200, 1, cfg).model;
  for (std::size_t t = 1; t <= 3; ++t)
    EXPECT_LT(oracle_gap(trained, q, t, 500, Rng(2)), oracle_gap(untrained, q, t, 500, Rng(2)));
  EXPECT_THROW(oracle_gap(trained, q, 4, 10, Rng(2)), DomainError);
}

TEST(Experiments, DecompositionTabulatesEveryCell) {
  const auto q = make_truncated_gaussian({0.0}, 0.3);
  DecompositionConfig cfg;
  cfg.widths = {4, 8};
  cfg.m_values = {100};
  cfg.seeds = {1, 2};
  cfg.schedule = make_schedule(2, ScheduleScheme::constant(0.3));
  cfg.train.train.steps = 50;
  cfg.n_generated = 300;
  cfg.jobs = 2;
  const auto rep = risk_decomposition_experiment(q, cfg);
  ASSERT_EQ(rep.cells.size(), 2u);
  for (const auto& c : rep.cells) {
    EXPECT_EQ(c.kl.size(), 2u);
    EXPECT_TRUE(std::isfinite(c.bound.value));
    EXPECT_GE(c.bound.value, 0.0);
  }
  EXPECT_EQ(rep.at(8, 100).n, 8u);
  // Same seeds, same numbers regardless of worker count.
  cfg.jobs = 1;
  const auto again = risk_decomposition_experiment(q, cfg);
  for (std::size_t i = 0; i < rep.cells.size(); ++i) EXPECT_EQ(rep.cells[i].kl, again.cells[i].kl);
  cfg.seeds.clear();
  EXPECT_THROW(risk_decomposition_experiment(q, cfg), DomainError);
}
