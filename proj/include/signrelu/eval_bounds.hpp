#pragma once

// KL estimation against a known data density, checks of the terminal-KL and
// log-density bounds, and calculators for the closed-form risk bounds.
// Asymptotic O(.) forms use unit leading constants.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "signrelu/diffusion.hpp"
#include "signrelu/errors.hpp"
#include "signrelu/parallel.hpp"
#include "signrelu/q0.hpp"
#include "signrelu/quadrature.hpp"
#include "signrelu/rng.hpp"
#include "signrelu/stats.hpp"

namespace signrelu {

// ---------------------------------------------------------------------------
// Kernel density estimate

/// Isotropic Gaussian KDE with Silverman's bandwidth times `factor`.
class GaussianKde {
 public:
  GaussianKde(std::span<const std::vector<double>> samples, double factor = 1.0) {
    if (samples.empty()) throw DomainError("GaussianKde: no samples");
    if (!(factor > 0.0)) throw DomainError("GaussianKde: bandwidth factor must be positive");
    dim_ = samples.front().size();
    n_ = samples.size();
    pts_.reserve(n_ * dim_);
    std::vector<std::size_t> order(n_);
    for (std::size_t i = 0; i < n_; ++i) {
      if (samples[i].size() != dim_) throw ShapeError("GaussianKde: ragged samples");
      order[i] = i;
    }
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return samples[a][0] < samples[b][0]; });
    for (std::size_t i : order) pts_.insert(pts_.end(), samples[i].begin(), samples[i].end());
    for (std::size_t i = 0; i < n_; ++i) key_.push_back(pts_[i * dim_]);

    double sd = 0.0;
    for (std::size_t k = 0; k < dim_; ++k) {
      double m = 0.0, v = 0.0;
      for (std::size_t i = 0; i < n_; ++i) m += pts_[i * dim_ + k];
      m /= static_cast<double>(n_);
      for (std::size_t i = 0; i < n_; ++i) v += (pts_[i * dim_ + k] - m) * (pts_[i * dim_ + k] - m);
      sd += std::sqrt(v / static_cast<double>(std::max<std::size_t>(n_ - 1, 1)));
    }
    sd = std::max(sd / static_cast<double>(dim_), 1e-8);
    const double d = static_cast<double>(dim_);
    h_ = factor * sd * std::pow(4.0 / ((d + 2.0) * static_cast<double>(n_)), 1.0 / (d + 4.0));
    norm_ = static_cast<double>(n_) * std::pow(2.0 * std::numbers::pi * h_ * h_, 0.5 * d);
  }

  double bandwidth() const noexcept { return h_; }
  std::size_t dim() const noexcept { return dim_; }

  double density(std::span<const double> x) const {
    if (x.size() != dim_) throw ShapeError("GaussianKde: dimension mismatch");
    // Kernels beyond 8h contribute below exp(-32) relative and are skipped.
    const double w = 8.0 * h_;
    auto lo = std::lower_bound(key_.begin(), key_.end(), x[0] - w);
    auto hi = std::upper_bound(lo, key_.end(), x[0] + w);
    const double inv = 1.0 / (2.0 * h_ * h_);
    double s = 0.0;
    for (auto it = lo; it != hi; ++it) {
      const double* p = pts_.data() + static_cast<std::size_t>(it - key_.begin()) * dim_;
      double r2 = 0.0;
      for (std::size_t k = 0; k < dim_; ++k) r2 += (x[k] - p[k]) * (x[k] - p[k]);
      s += std::exp(-r2 * inv);
    }
    return s / norm_;
  }

 private:
  std::size_t dim_ = 0, n_ = 0;
  std::vector<double> pts_;  // sorted by first coordinate
  std::vector<double> key_;
  double h_ = 0.0, norm_ = 1.0;
};

// ---------------------------------------------------------------------------
// KL(q0 || sample distribution)

struct KLReport {
  enum class Method { quadrature_kde, mc_plugin };
  double estimate = 0.0;
  Method method = Method::quadrature_kde;
  double stderr_ = 0.0;
  std::size_t n_samples = 0;
  double bandwidth = 0.0;
};

inline const char* method_name(KLReport::Method m) {
  return m == KLReport::Method::quadrature_kde ? "quadrature_kde" : "mc_plugin";
}

struct KlConfig {
  KLReport::Method method = KLReport::Method::quadrature_kde;
  double bandwidth_factor = 1.0;
  double density_floor = 1e-12;
  std::size_t batches = 10;     // for the standard error
  std::size_t mc_draws = 20000; // fresh q0 draws for mc_plugin
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
};

namespace detail {

// Integration grid covering the support of q0 (the cube, or +-10 sd boxes).
inline TensorGrid kl_grid(const Q0Spec& q0) {
  double a = -1.0, b = 1.0;
  if (!q0.truncated) {
    a = std::numeric_limits<double>::infinity();
    b = -a;
    for (const auto& c : q0.components)
      for (double m : c.mean) {
        a = std::min(a, m - 10.0 * c.sd);
        b = std::max(b, m + 10.0 * c.sd);
      }
  }
  if (q0.dim == 1) return tensor_grid(composite_gauss_legendre(256, 8, a, b), 1);
  return tensor_grid(composite_gauss_legendre(32, 4, a, b), 2);
}

inline double kl_quadrature(const Q0Spec& q0, const TensorGrid& grid, std::span<const double> logq,
                            const GaussianKde& kde, double floor, std::size_t jobs) {
  std::vector<double> terms(grid.size(), 0.0);
  parallel_for(grid.size(), jobs, [&](std::size_t p) {
    if (!std::isfinite(logq[p])) return;
    const double est = std::max(kde.density({grid.point(p), q0.dim}), floor);
    terms[p] = grid.weights[p] * std::exp(logq[p]) * (logq[p] - std::log(est));
  });
  double s = 0.0;
  for (double v : terms) s += v;
  return s;
}

}  // namespace detail

/// D_KL(q0 || KDE of `samples`). quadrature_kde integrates on a Gauss-Legendre
/// grid (d <= 2); mc_plugin averages log(q0 / KDE) over fresh q0 draws.
inline KLReport kl_estimate(const Q0Spec& q0, std::span<const std::vector<double>> samples, const KlConfig& cfg = {}) {
  if (samples.size() < 100) throw DomainError("kl_estimate: need at least 100 samples");
  if (cfg.method == KLReport::Method::quadrature_kde && q0.dim > 2)
    throw DomainError("kl_estimate: quadrature_kde supports d <= 2");
  if (cfg.batches < 2) throw DomainError("kl_estimate: need >= 2 batches");
  for (const auto& s : samples)
    if (s.size() != q0.dim) throw ShapeError("kl_estimate: sample dimension mismatch");

  KLReport r;
  r.method = cfg.method;
  r.n_samples = samples.size();
  const GaussianKde kde(samples, cfg.bandwidth_factor);
  r.bandwidth = kde.bandwidth();

  if (cfg.method == KLReport::Method::quadrature_kde) {
    const TensorGrid grid = detail::kl_grid(q0);
    std::vector<double> logq(grid.size());
    for (std::size_t p = 0; p < grid.size(); ++p) logq[p] = q0_log_density(q0, {grid.point(p), q0.dim});
    r.estimate = detail::kl_quadrature(q0, grid, logq, kde, cfg.density_floor, cfg.jobs);
    // Spread of the same estimator on disjoint sample batches.
    const std::size_t B = std::min(cfg.batches, samples.size() / 10);
    std::vector<double> per(B);
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t lo = b * samples.size() / B, hi = (b + 1) * samples.size() / B;
      const GaussianKde kb(samples.subspan(lo, hi - lo), cfg.bandwidth_factor);
      per[b] = detail::kl_quadrature(q0, grid, logq, kb, cfg.density_floor, cfg.jobs);
    }
    r.stderr_ = mean_stderr(per).stderr_;
    return r;
  }

  if (cfg.mc_draws < cfg.batches) throw DomainError("kl_estimate: mc_draws must be >= batches");
  const Rng root(cfg.seed);
  std::vector<double> terms(cfg.mc_draws);
  parallel_for(cfg.mc_draws, cfg.jobs, [&](std::size_t i) {
    Rng rng = root.derive("kl_mc", i);
    const auto x = q0_sample(q0, rng);
    terms[i] = q0_log_density(q0, x) - std::log(std::max(kde.density(x), cfg.density_floor));
  });
  std::vector<double> means(cfg.batches, 0.0);
  for (std::size_t b = 0; b < cfg.batches; ++b) {
    const std::size_t lo = b * terms.size() / cfg.batches, hi = (b + 1) * terms.size() / cfg.batches;
    for (std::size_t i = lo; i < hi; ++i) means[b] += terms[i];
    means[b] /= static_cast<double>(hi - lo);
  }
  const auto ms = mean_stderr(means);
  r.estimate = ms.mean;
  r.stderr_ = ms.stderr_;
  return r;
}

// ---------------------------------------------------------------------------
// Bound calculators

struct BoundReport {
  std::string name;
  std::map<std::string, double> inputs;
  double value = 0.0;
  std::map<std::string, double> recommended;
};

/// (5/2) d alpha_T / (1 - alpha_T): bound on the terminal KL to the marginal.
inline BoundReport terminal_kl_bound(std::size_t d, double alpha_T) {
  if (d < 1) throw DomainError("terminal_kl_bound: d must be >= 1");
  if (!(alpha_T > 0.0 && alpha_T < 1.0)) throw DomainError("terminal_kl_bound: alpha_T must lie in (0,1)");
  return {"terminal_kl", {{"d", double(d)}, {"alpha_T", alpha_T}}, 2.5 * double(d) * alpha_T / (1.0 - alpha_T), {}};
}

/// Approximation error: T (n^(-1-3/d) + log M / M) + additive.
inline BoundReport bound_approx(double n, std::size_t d, std::size_t T, double M, double additive = 0.0) {
  if (!(n >= 2.0)) throw DomainError("bound_approx: n must be >= 2");
  if (!(M > 1.0)) throw DomainError("bound_approx: M must exceed 1");
  if (d < 1 || T < 1) throw DomainError("bound_approx: d and T must be >= 1");
  const double dd = static_cast<double>(d);
  const double v = static_cast<double>(T) * (std::pow(n, -1.0 - 3.0 / dd) + std::log(M) / M) + additive;
  return {"approx", {{"n", n}, {"d", dd}, {"T", double(T)}, {"M", M}, {"additive", additive}}, v, {}};
}

/// Estimation error: T (M^2 + log M + T^3 M^2 log M)(sqrt(7 n^2 / m) + sqrt(2 log(1/delta) / m)).
inline BoundReport bound_estimation(double n, std::size_t T, double M, double m, double delta) {
  if (!(m >= 1.0)) throw DomainError("bound_estimation: m must be >= 1");
  if (!(delta > 0.0 && delta < 1.0)) throw DomainError("bound_estimation: delta must lie in (0,1)");
  if (!(M >= 1.0)) throw DomainError("bound_estimation: M must be >= 1");
  if (!(n >= 1.0) || T < 1) throw DomainError("bound_estimation: n and T must be >= 1");
  const double t = static_cast<double>(T), lm = std::log(M);
  const double v = t * (M * M + lm + t * t * t * M * M * lm) *
                   (std::sqrt(7.0 * n * n / m) + std::sqrt(2.0 * std::log(1.0 / delta) / m));
  return {"estimation", {{"n", n}, {"T", t}, {"M", M}, {"m", m}, {"delta", delta}}, v, {}};
}

/// Excess risk: T (n^(-1-3/d) + sqrt(log(1/delta)) n^(-2-3/d)), with the
/// architecture and sample size that achieve it.
inline BoundReport bound_excess(double n, std::size_t T, std::size_t d, double delta) {
  if (!(n >= 2.0)) throw DomainError("bound_excess: n must be >= 2");
  if (!(delta > 0.0 && delta < 1.0)) throw DomainError("bound_excess: delta must lie in (0,1)");
  if (d < 1 || T < 1) throw DomainError("bound_excess: d and T must be >= 1");
  const double dd = static_cast<double>(d), t = static_cast<double>(T), ln = std::log(n);
  const double v = t * (std::pow(n, -1.0 - 3.0 / dd) + std::sqrt(std::log(1.0 / delta)) * std::pow(n, -2.0 - 3.0 / dd));
  BoundReport r{"excess", {{"n", n}, {"T", t}, {"d", dd}, {"delta", delta}}, v, {}};
  r.recommended["M"] = std::pow(n, 1.0 + 3.0 / dd) * ln;
  r.recommended["m"] = std::pow(t, 6.0) * std::pow(n, 8.0 + 18.0 / dd) * std::pow(ln, 6.0);
  return r;
}

/// D = sum_j W_j W_{j-1} + sum_j W_j.
inline double covering_dimension(std::span<const std::size_t> widths) {
  double D = 0.0;
  for (std::size_t j = 1; j < widths.size(); ++j)
    D += static_cast<double>(widths[j]) * static_cast<double>(widths[j - 1]) + static_cast<double>(widths[j]);
  return D;
}

/// log of C (B^L M^L / eps)^D with B = max(alpha, 1), M = max_j M_j and
/// D = sum_j W_j W_{j-1} + sum_j W_j. `widths` has L + 1 entries.
inline double covering_bound(std::span<const std::size_t> widths, std::size_t L, std::span<const double> M_js,
                             double eps, double alpha, double log_C = 0.0) {
  if (!(eps > 0.0)) throw DomainError("covering_bound: eps must be positive");
  if (L < 1 || widths.size() != L + 1) throw ShapeError("covering_bound: widths must have L + 1 entries");
  if (M_js.size() != L) throw ShapeError("covering_bound: need one norm bound per layer");
  double Mx = 0.0;
  for (double m : M_js) {
    if (!(m > 0.0)) throw DomainError("covering_bound: norm bounds must be positive");
    Mx = std::max(Mx, m);
  }
  const double B = std::max(alpha, 1.0), l = static_cast<double>(L);
  return log_C + covering_dimension(widths) * (l * std::log(B) + l * std::log(Mx) - std::log(eps));
}

// ---------------------------------------------------------------------------
// Log-density bounds for the backward chain

/// How the per-step norm bounds a_t, b_t (t >= 2) are set: all equal to M, or
/// shrinking as M^(1/((t + c0) log M)). Step 1 always uses M.
enum class StepNorms { uniform, decaying };

struct LogDensityBounds {
  std::vector<double> R;       // R[t] for t = 0..T (R[0] unused)
  double upper = 0.0;          // pointwise upper bound on log p_hat
  double lower = 0.0;          // pointwise lower bound, -inf if (T+1) e^-xi >= 1
  double B_tilde = 0.0;        // explicit bound on |log p_tilde|
  double B_hat = 0.0;          // max(|upper|, |lower|)
  double B_tilde_order = 0.0;  // T (M^2 + log M)
  double B_hat_order = 0.0;    // T^4 M^2 log M
  bool informative = false;    // lower bound finite
};

inline LogDensityBounds log_density_bounds(const NoiseSchedule& s, std::size_t d, double M, double xi,
                                           StepNorms norms = StepNorms::uniform, double c0 = 1.0) {
  s.validate();
  if (!(xi > 0.0)) throw DomainError("log_density_bounds: xi must be positive");
  if (!(M > 0.0)) throw DomainError("log_density_bounds: M must be positive");
  if (!(c0 >= 1.0)) throw DomainError("log_density_bounds: c0 must be >= 1");
  if (d < 1) throw DomainError("log_density_bounds: d must be >= 1");
  const std::size_t T = s.T;
  const double dd = static_cast<double>(d), rad = std::sqrt(dd) + std::sqrt(2.0 * xi);
  auto step_norm = [&](std::size_t t) {
    if (t == 1 || norms == StepNorms::uniform || M <= 1.0) return M;
    return std::exp(1.0 / (static_cast<double>(t) + c0));  // M^(1/((t + c0) log M))
  };
  LogDensityBounds out;
  out.R.assign(T + 1, 0.0);
  out.R[T] = rad;
  for (std::size_t t = T; t >= 2; --t) {
    const double a = step_norm(t);
    out.R[t - 1] = a * out.R[t] + a + s.sp(t) * rad;
  }
  const double sp1 = s.sp(1);
  out.upper = -0.5 * dd * std::log(2.0 * std::numbers::pi * sp1 * sp1);
  const double tail = static_cast<double>(T + 1) * std::exp(-xi);
  out.informative = tail < 1.0;
  if (out.informative) {
    const double reach = 2.0 * std::sqrt(dd) + M * out.R[1] + M;
    out.lower = out.upper + std::log1p(-tail) - reach * reach / (2.0 * sp1 * sp1);
    out.B_hat = std::max(std::abs(out.upper), std::abs(out.lower));
  } else {
    out.lower = -std::numeric_limits<double>::infinity();
    out.B_hat = std::numeric_limits<double>::infinity();
  }
  double lognorm = 0.0;
  for (std::size_t t = 1; t <= T; ++t) lognorm += 0.5 * dd * std::log(2.0 * std::numbers::pi * s.sp(t) * s.sp(t));
  const double tt = static_cast<double>(T), r1 = std::sqrt(2.0 * xi) + std::sqrt(dd) + 1.0;
  out.B_tilde = std::abs(lognorm) + tt * (M * M + r1 * r1);
  const double lm = std::log(std::max(M, std::numbers::e));
  out.B_tilde_order = tt * (M * M + lm);
  out.B_hat_order = tt * tt * tt * tt * M * M * lm;
  return out;
}

// ---------------------------------------------------------------------------
// Experiments

struct TerminalKl {
  double estimate = 0.0;
  double stderr_ = 0.0;
  double bound = 0.0;
  bool holds() const { return estimate <= bound + 3.0 * stderr_; }
};

/// Monte Carlo D_KL(q(z_T | x) || q_T) with q_T from quadrature over q0.
inline TerminalKl kl_terminal_check(const Q0Spec& q0, const NoiseSchedule& s, std::span<const double> x,
                                    std::size_t mc_n, const Rng& root) {
  if (x.size() != q0.dim) throw ShapeError("kl_terminal_check: dimension mismatch");
  for (double v : x)
    if (!(v >= -1.0 && v <= 1.0)) throw DomainError("kl_terminal_check: x must lie in [-1,1]^d");
  if (mc_n < 2) throw DomainError("kl_terminal_check: need >= 2 draws");
  const std::size_t T = s.T, d = q0.dim;
  const double a = s.alpha(T), sq = s.sq(T);
  Rng rng = root.derive("terminal_kl");
  std::vector<double> terms(mc_n);
  for (std::size_t k = 0; k < mc_n; ++k) {
    std::vector<double> z(d);
    double lc = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double e = rng.normal();
      z[i] = std::sqrt(a) * x[i] + sq * e;
      lc += -0.5 * e * e - std::log(sq) - 0.5 * std::log(2.0 * std::numbers::pi);
    }
    terms[k] = lc - marginal_log_density(q0, a, z);
  }
  const auto ms = mean_stderr(terms);
  return {ms.mean, ms.stderr_, terminal_kl_bound(d, a).value};
}

/// Mean squared gap between phi_t and the Bayes predictor over z_t drawn
/// from the forward marginal.
inline double oracle_gap(const DiffusionModel& model, const Q0Spec& q0, std::size_t t, std::size_t n,
                         const Rng& root) {
  model.validate();
  if (t < 1 || t > model.schedule.T) throw DomainError("oracle_gap: t out of range");
  if (n < 1) throw DomainError("oracle_gap: n must be >= 1");
  Rng rng = root.derive("oracle_gap", t);
  double acc = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const auto x = q0_sample(q0, rng);
    const auto z = forward_sample(x, t, model.schedule, rng);
    const auto target = t == 1 ? posterior_mean(q0, model.schedule.alpha(1), z) : bayes_predictor(q0, model.schedule, t, z);
    const auto out = model.apply(t, z);
    for (std::size_t i = 0; i < out.size(); ++i) acc += (out[i] - target[i]) * (out[i] - target[i]);
  }
  return acc / static_cast<double>(n);
}

struct DecompositionConfig {
  std::vector<std::size_t> widths;     // hidden width n of every phi_t
  std::vector<std::size_t> m_values;   // training sample sizes
  std::vector<std::uint64_t> seeds;
  NoiseSchedule schedule;
  DdpmTrainConfig train;               // hidden and seed are set per cell
  std::size_t m_z = 1;
  std::size_t n_generated = 10000;     // backward samples fed to kl_estimate
  double delta = 0.05;
  KlConfig kl;
  std::size_t jobs = 1;
};

struct DecompositionCell {
  std::size_t n = 0, m = 0;
  std::vector<double> kl;  // per seed
  double kl_median = 0.0;
  BoundReport bound;
  double ratio = 0.0;      // bound / median estimate
};

struct DecompositionReport {
  std::vector<DecompositionCell> cells;  // row-major over (widths, m_values)
  bool monotone_in_m = true;             // median KL non-increasing in m at each n
  bool monotone_in_n = true;             // median KL non-increasing in n at each m

  const DecompositionCell& at(std::size_t n, std::size_t m) const {
    for (const auto& c : cells)
      if (c.n == n && c.m == m) return c;
    throw DomainError("DecompositionReport: no such cell");
  }
};

inline double median(std::vector<double> v) {
  if (v.empty()) throw DomainError("median: empty input");
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

/// Trains a model per (n, m, seed), estimates D_KL(q0 || p_hat_0) from
/// backward samples and tabulates it against the excess-risk bound.
inline DecompositionReport risk_decomposition_experiment(const Q0Spec& q0, const DecompositionConfig& cfg) {
  if (cfg.widths.empty() || cfg.m_values.empty() || cfg.seeds.empty())
    throw DomainError("risk_decomposition_experiment: grids must be nonempty");
  const std::size_t W = cfg.widths.size(), Mv = cfg.m_values.size(), S = cfg.seeds.size();
  std::vector<double> kl(W * Mv * S);
  parallel_for(kl.size(), cfg.jobs, [&](std::size_t idx) {
    const std::size_t s = idx % S, j = (idx / S) % Mv, i = idx / (S * Mv);
    DdpmTrainConfig tc = cfg.train;
    tc.hidden = {cfg.widths[i]};
    tc.train.seed = cfg.seeds[s];
    tc.jobs = 1;
    const auto model = train_ddpm(q0, cfg.schedule, cfg.m_values[j], cfg.m_z, tc).model;
    const auto samples = backward_sample(model, cfg.n_generated, Rng(cfg.seeds[s]).derive("generate", i, j));
    KlConfig kc = cfg.kl;
    kc.jobs = 1;
    kl[idx] = kl_estimate(q0, samples, kc).estimate;
  });
  DecompositionReport rep;
  for (std::size_t i = 0; i < W; ++i)
    for (std::size_t j = 0; j < Mv; ++j) {
      DecompositionCell c;
      c.n = cfg.widths[i];
      c.m = cfg.m_values[j];
      c.kl.assign(kl.begin() + static_cast<std::ptrdiff_t>((i * Mv + j) * S),
                  kl.begin() + static_cast<std::ptrdiff_t>((i * Mv + j + 1) * S));
      c.kl_median = median(c.kl);
      c.bound = bound_excess(static_cast<double>(std::max<std::size_t>(c.n, 2)), cfg.schedule.T, q0.dim, cfg.delta);
      c.ratio = c.kl_median > 0.0 ? c.bound.value / c.kl_median : std::numeric_limits<double>::infinity();
      rep.cells.push_back(std::move(c));
    }
  for (std::size_t i = 0; i < W; ++i)
    for (std::size_t j = 0; j < Mv; ++j) {
      const double v = rep.cells[i * Mv + j].kl_median;
      if (j + 1 < Mv && rep.cells[i * Mv + j + 1].kl_median > v) rep.monotone_in_m = false;
      if (i + 1 < W && rep.cells[(i + 1) * Mv + j].kl_median > v) rep.monotone_in_n = false;
    }
  return rep;
}

}  // namespace signrelu
