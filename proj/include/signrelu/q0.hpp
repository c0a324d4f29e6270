#pragma once

// Data densities on [-1,1]^d: truncated isotropic Gaussians, their mixtures,
// and the uniform density. Every family is a mixture of products of 1-D
// factors, which keeps marginals and posterior moments to 1-D quadratures.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "signrelu/errors.hpp"
#include "signrelu/quadrature.hpp"
#include "signrelu/rng.hpp"

namespace signrelu {

struct Q0Component {
  double weight = 1.0;
  std::vector<double> mean;  // ignored for the uniform family
  double sd = 1.0;           // isotropic standard deviation
};

struct Q0Spec {
  enum class Family { truncated_gaussian, gaussian_mixture, uniform };

  Family family = Family::uniform;
  std::size_t dim = 1;
  std::vector<Q0Component> components;
  bool truncated = true;  // false only for an untruncated Gaussian reference
  double C_q0 = 1.0;      // max(sup q0, 1/inf q0) over the cube; infinite when uncertified

  bool certified() const noexcept { return std::isfinite(C_q0); }
};

namespace detail {

inline double norm_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }
inline double norm_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); }

// Normalizing mass of N(mu, sd^2) on [-1, 1].
inline double box_mass(double mu, double sd) {
  const double a = (-1.0 - mu) / sd, b = (1.0 - mu) / sd;
  // Evaluate on the side with better relative precision.
  return a > 0.0 ? norm_cdf(-a) - norm_cdf(-b) : norm_cdf(b) - norm_cdf(a);
}

// log of the 1-D factor of component k at coordinate value x.
inline double log_factor(const Q0Spec& q, const Q0Component& c, std::size_t i, double x) {
  if (q.family == Q0Spec::Family::uniform) return -std::numbers::ln2;
  const double z = (x - c.mean[i]) / c.sd;
  double lp = -0.5 * z * z - std::log(c.sd) - 0.5 * std::log(2.0 * std::numbers::pi);
  if (q.truncated) lp -= std::log(box_mass(c.mean[i], c.sd));
  return lp;
}

inline void finalize(Q0Spec& q) {
  if (q.dim < 1) throw DomainError("Q0Spec: dimension must be >= 1");
  if (q.components.empty()) throw DomainError("Q0Spec: no components");
  double wsum = 0.0;
  for (auto& c : q.components) {
    if (!(c.weight > 0.0)) throw DomainError("Q0Spec: component weights must be positive");
    wsum += c.weight;
    if (q.family != Q0Spec::Family::uniform) {
      if (c.mean.size() != q.dim) throw ShapeError("Q0Spec: mean dimension mismatch");
      if (!(c.sd > 0.0) || !std::isfinite(c.sd)) throw DomainError("Q0Spec: sd must be positive");
      if (q.truncated)
        for (double m : c.mean)
          if (box_mass(m, c.sd) < 1e-6) throw DomainError("Q0Spec: component has negligible mass on the cube");
    }
  }
  for (auto& c : q.components) c.weight /= wsum;
  if (!q.truncated) {
    q.C_q0 = std::numeric_limits<double>::infinity();
    return;
  }
  // Per component and coordinate the factor peaks at the clamped mean and is
  // smallest at the far endpoint.
  double sup = 0.0, inf = 0.0;
  for (const auto& c : q.components) {
    double hi = 0.0, lo = 0.0;  // log scale
    for (std::size_t i = 0; i < q.dim; ++i) {
      if (q.family == Q0Spec::Family::uniform) {
        hi += -std::numbers::ln2;
        lo += -std::numbers::ln2;
        continue;
      }
      const double m = c.mean[i];
      hi += log_factor(q, c, i, std::clamp(m, -1.0, 1.0));
      lo += log_factor(q, c, i, m >= 0.0 ? -1.0 : 1.0);
    }
    sup += c.weight * std::exp(hi);
    inf += c.weight * std::exp(lo);
  }
  q.C_q0 = inf > 0.0 ? std::max({1.0, sup, 1.0 / inf}) : std::numeric_limits<double>::infinity();
}

}  // namespace detail

inline Q0Spec make_uniform_q0(std::size_t dim) {
  Q0Spec q;
  q.family = Q0Spec::Family::uniform;
  q.dim = dim;
  q.components = {{1.0, {}, 1.0}};
  detail::finalize(q);
  return q;
}

inline Q0Spec make_truncated_gaussian(std::vector<double> mean, double sd) {
  Q0Spec q;
  q.family = Q0Spec::Family::truncated_gaussian;
  q.dim = mean.size();
  q.components = {{1.0, std::move(mean), sd}};
  detail::finalize(q);
  return q;
}

/// Untruncated N(mean, sd^2 I); support is all of R^d.
inline Q0Spec make_gaussian(std::vector<double> mean, double sd) {
  Q0Spec q;
  q.family = Q0Spec::Family::truncated_gaussian;
  q.dim = mean.size();
  q.truncated = false;
  q.components = {{1.0, std::move(mean), sd}};
  detail::finalize(q);
  return q;
}

inline Q0Spec make_gaussian_mixture(std::vector<Q0Component> comps) {
  if (comps.size() < 2 || comps.size() > 3) throw DomainError("make_gaussian_mixture: need 2 or 3 components");
  Q0Spec q;
  q.family = Q0Spec::Family::gaussian_mixture;
  q.dim = comps.front().mean.size();
  q.components = std::move(comps);
  detail::finalize(q);
  return q;
}

inline double q0_log_density(const Q0Spec& q, std::span<const double> x) {
  if (x.size() != q.dim) throw ShapeError("q0_density: dimension mismatch");
  if (q.truncated)
    for (double v : x)
      if (!(v >= -1.0 && v <= 1.0)) return -std::numeric_limits<double>::infinity();
  double mx = -std::numeric_limits<double>::infinity();
  std::vector<double> terms;
  for (const auto& c : q.components) {
    double l = std::log(c.weight);
    for (std::size_t i = 0; i < q.dim; ++i) l += detail::log_factor(q, c, i, x[i]);
    terms.push_back(l);
    mx = std::max(mx, l);
  }
  double s = 0.0;
  for (double l : terms) s += std::exp(l - mx);
  return mx + std::log(s);
}

inline double q0_density(const Q0Spec& q, std::span<const double> x) { return std::exp(q0_log_density(q, x)); }

/// One draw from q0 (component by weight, then per-coordinate rejection).
inline std::vector<double> q0_sample(const Q0Spec& q, Rng& rng) {
  std::vector<double> x(q.dim);
  double u = rng.uniform();
  std::size_t k = 0;
  while (k + 1 < q.components.size() && u >= q.components[k].weight) u -= q.components[k++].weight;
  const auto& c = q.components[k];
  for (std::size_t i = 0; i < q.dim; ++i) {
    if (q.family == Q0Spec::Family::uniform) {
      x[i] = rng.uniform(-1.0, 1.0);
      continue;
    }
    double v;
    do v = c.mean[i] + c.sd * rng.normal();
    while (q.truncated && !(v >= -1.0 && v <= 1.0));
    x[i] = v;
  }
  return x;
}

namespace detail {

// log of sum_k w_k prod_i int f_{k,i}(x) N(z_i; a x, s^2) dx and the posterior
// mean, with every 1-D integral done by composite Gauss-Legendre in log space.
struct PosteriorMoments {
  double log_marginal;
  std::vector<double> mean;
};

inline const Rule1D& gl8() {
  static const Rule1D r = gauss_legendre(8);
  return r;
}

// 1-D integrals over [-1, 1]: log of int f(x) N(z; a x, s^2) dx and the
// normalized first moment.
inline std::pair<double, double> factor_moments(const Q0Spec& q, const Q0Component& c, std::size_t i,
                                                double a, double s, double z) {
  double width = a > 0.0 ? s / a : 2.0;
  if (q.family != Q0Spec::Family::uniform) width = std::min(width, c.sd);
  const auto panels = static_cast<std::size_t>(std::clamp(std::ceil(16.0 / width), 8.0, 4096.0));
  const Rule1D& base = gl8();
  const double len = 2.0 / static_cast<double>(panels);
  thread_local std::vector<double> lv, xs, ws;
  lv.clear();
  xs.clear();
  ws.clear();
  double mx = -std::numeric_limits<double>::infinity();
  const double log_norm = -std::log(s) - 0.5 * std::log(2.0 * std::numbers::pi);
  for (std::size_t p = 0; p < panels; ++p) {
    const double lo = -1.0 + len * static_cast<double>(p);
    for (std::size_t n = 0; n < base.nodes.size(); ++n) {
      const double x = lo + 0.5 * len * (base.nodes[n] + 1.0);
      const double r = (z - a * x) / s;
      const double l = log_factor(q, c, i, x) - 0.5 * r * r + log_norm;
      lv.push_back(l);
      xs.push_back(x);
      ws.push_back(0.5 * len * base.weights[n]);
      mx = std::max(mx, l);
    }
  }
  double s0 = 0.0, s1 = 0.0;
  for (std::size_t n = 0; n < lv.size(); ++n) {
    const double e = ws[n] * std::exp(lv[n] - mx);
    s0 += e;
    s1 += e * xs[n];
  }
  return {mx + std::log(s0), s1 / s0};
}

inline PosteriorMoments posterior_moments(const Q0Spec& q, double alpha, std::span<const double> z) {
  if (z.size() != q.dim) throw ShapeError("posterior: dimension mismatch");
  if (!(alpha > 0.0 && alpha < 1.0)) throw DomainError("posterior: alpha must lie in (0,1)");
  const double a = std::sqrt(alpha), s = std::sqrt(1.0 - alpha);
  const std::size_t K = q.components.size(), d = q.dim;
  std::vector<double> logw(K);
  std::vector<std::vector<double>> means(K, std::vector<double>(d));
  for (std::size_t k = 0; k < K; ++k) {
    const auto& c = q.components[k];
    double l = std::log(c.weight);
    for (std::size_t i = 0; i < d; ++i) {
      if (!q.truncated) {
        // Closed form for the untruncated Gaussian factor.
        const double v = alpha * c.sd * c.sd + 1.0 - alpha;
        const double r = z[i] - a * c.mean[i];
        l += -0.5 * r * r / v - 0.5 * std::log(2.0 * std::numbers::pi * v);
        means[k][i] = c.mean[i] + a * c.sd * c.sd * r / v;
        continue;
      }
      const auto [lm, m1] = factor_moments(q, c, i, a, s, z[i]);
      l += lm;
      means[k][i] = m1;
    }
    logw[k] = l;
  }
  const double mx = *std::max_element(logw.begin(), logw.end());
  double tot = 0.0;
  PosteriorMoments out{0.0, std::vector<double>(d, 0.0)};
  for (std::size_t k = 0; k < K; ++k) {
    const double w = std::exp(logw[k] - mx);
    tot += w;
    for (std::size_t i = 0; i < d; ++i) out.mean[i] += w * means[k][i];
  }
  for (double& v : out.mean) v /= tot;
  out.log_marginal = mx + std::log(tot);
  return out;
}

}  // namespace detail

/// E[x | z] for z = sqrt(alpha) x + sqrt(1 - alpha) eps, x ~ q0.
inline std::vector<double> posterior_mean(const Q0Spec& q, double alpha, std::span<const double> z) {
  return detail::posterior_moments(q, alpha, z).mean;
}

/// log q_alpha(z), the density of sqrt(alpha) x + sqrt(1 - alpha) eps.
inline double marginal_log_density(const Q0Spec& q, double alpha, std::span<const double> z) {
  return detail::posterior_moments(q, alpha, z).log_marginal;
}

}  // namespace signrelu
