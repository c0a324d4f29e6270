#pragma once

// Kernel-induced functions f(x) = sum_k w_k g_k sum_j psi_j(x^T A_j y_k),
// their hinge integral representation, and shallow approximants sampled from
// that representation.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "signrelu/errors.hpp"
#include "signrelu/net.hpp"
#include "signrelu/parallel.hpp"
#include "signrelu/quadrature.hpp"
#include "signrelu/rng.hpp"
#include "signrelu/stats.hpp"

namespace signrelu {

/// Univariate kernel with its first two derivatives.
struct Kernel {
  std::string_view id;
  double (*psi)(double);
  double (*d1)(double);
  double (*d2)(double);
  double (*d2_sup)(double c);     // sup of |psi''| over [-c, c]
  std::vector<double> d2_zeros;   // t > 0 with psi''(t) = 0 or psi''(-t) = 0
};

inline const std::vector<Kernel>& kernel_registry() {
  static const std::vector<Kernel> reg = {
      {"exp_neg", [](double t) { return std::exp(-t); }, [](double t) { return -std::exp(-t); },
       [](double t) { return std::exp(-t); }, [](double c) { return std::exp(c); }, {}},
      {"square", [](double t) { return t * t; }, [](double t) { return 2.0 * t; },
       [](double) { return 2.0; }, [](double) { return 2.0; }, {}},
      {"cosh_like",
       [](double t) {
         const double a = std::abs(t);
         return a + std::log1p(std::exp(-2.0 * a)) - std::numbers::ln2;
       },
       [](double t) { return std::tanh(t); },
       [](double t) {
         const double s = 1.0 / std::cosh(t);
         return s * s;
       },
       [](double) { return 1.0; }, {}},
      {"gaussian_radial", [](double t) { return std::exp(-0.5 * t * t); },
       [](double t) { return -t * std::exp(-0.5 * t * t); },
       [](double t) { return (t * t - 1.0) * std::exp(-0.5 * t * t); }, [](double) { return 1.0; },
       {1.0}},
  };
  return reg;
}

inline const Kernel& kernel(std::string_view id) {
  for (const auto& k : kernel_registry())
    if (k.id == id) return k;
  throw DomainError("unknown kernel '" + std::string(id) + "'");
}

/// Hinge-integral representation of psi(u) for |u| <= c:
///   int_0^c [(u-t)_+ psi''(t) + (-u-t)_+ psi''(-t)] dt + u psi'(0) + psi(0).
inline double integral_representation(std::string_view phi_id, double u, double c) {
  const Kernel& k = kernel(phi_id);
  if (!(c > 0.0)) throw DomainError("integral_representation: c must be positive");
  if (!(std::abs(u) <= c)) throw DomainError("integral_representation: |u| > c");
  const double a = std::abs(u);
  // Only one hinge term is nonzero and it vanishes past t = |u|.
  double hinge = 0.0;
  if (a > 0.0) {
    const double sgn = u > 0.0 ? 1.0 : -1.0;
    auto integrand = [&](double t) { return (a - t) * k.d2(sgn * t); };
    double lo = 0.0;
    for (double z : k.d2_zeros)
      if (z > 0.0 && z < a) {
        hinge += integrate_adaptive(integrand, lo, z);
        lo = z;
      }
    hinge += integrate_adaptive(integrand, lo, a);
  }
  return hinge + u * k.d1(0.0) + k.psi(0.0);
}

struct SClassComponent {
  std::string phi_id;
  std::vector<double> A;  // d x d, row-major
};

struct WeightNode {
  std::vector<double> y;
  double w = 0.0;
  double g_val = 0.0;
};

struct SClassFunction {
  std::vector<SClassComponent> components;
  std::vector<WeightNode> weight_nodes;
  std::size_t dim = 0;

  void validate() const {
    if (dim < 1 || dim > 3) throw DomainError("SClassFunction: dimension must be 1, 2 or 3");
    if (components.empty()) throw DomainError("SClassFunction: no kernel components");
    for (const auto& c : components) {
      (void)kernel(c.phi_id);
      if (c.A.size() != dim * dim) throw ShapeError("SClassFunction: A must be d x d");
      for (double v : c.A)
        if (!std::isfinite(v)) throw DomainError("SClassFunction: non-finite A entry");
    }
    double l1 = 0.0;
    for (const auto& n : weight_nodes) {
      if (n.y.size() != dim) throw ShapeError("SClassFunction: node dimension mismatch");
      for (double v : n.y)
        if (!(v >= -1.0 && v <= 1.0)) throw DomainError("SClassFunction: node outside [-1,1]^d");
      if (!(n.w > 0.0) || !std::isfinite(n.w)) throw DomainError("SClassFunction: weights must be positive");
      l1 += n.w * std::abs(n.g_val);
    }
    if (!std::isfinite(l1)) throw DomainError("SClassFunction: g is not integrable");
  }
};

/// Builds f from a density g sampled on a tensor grid over [-1,1]^d.
inline SClassFunction make_sclass(std::size_t dim, std::vector<SClassComponent> components,
                                  const std::function<double(std::span<const double>)>& g,
                                  const TensorGrid& grid) {
  if (grid.dim != dim) throw ShapeError("make_sclass: grid dimension mismatch");
  SClassFunction f;
  f.dim = dim;
  f.components = std::move(components);
  for (std::size_t p = 0; p < grid.size(); ++p) {
    std::vector<double> y(grid.point(p), grid.point(p) + dim);
    const double gv = g(y);
    f.weight_nodes.push_back({std::move(y), grid.weights[p], gv});
  }
  f.validate();
  return f;
}

inline SClassFunction make_sclass(std::size_t dim, std::vector<SClassComponent> components,
                                  const std::function<double(std::span<const double>)>& g) {
  return make_sclass(dim, std::move(components), g, default_cube_grid(dim));
}

inline std::vector<double> identity_matrix(std::size_t d) {
  std::vector<double> A(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) A[i * d + i] = 1.0;
  return A;
}

namespace detail {

inline void mat_vec(std::span<const double> A, std::span<const double> y, std::span<double> out) {
  const std::size_t d = y.size();
  for (std::size_t i = 0; i < d; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += A[i * d + j] * y[j];
    out[i] = s;
  }
}

}  // namespace detail

inline double eval_sclass(const SClassFunction& f, std::span<const double> x) {
  if (x.size() != f.dim) throw ShapeError("eval_sclass: point dimension mismatch");
  for (double v : x)
    if (!(v >= -1.0 && v <= 1.0)) throw DomainError("eval_sclass: point outside [-1,1]^d");
  std::vector<const Kernel*> ks;
  for (const auto& c : f.components) ks.push_back(&kernel(c.phi_id));
  // x^T A y = (A^T x) . y, so transform x once per component.
  std::vector<std::vector<double>> xt(f.components.size(), std::vector<double>(f.dim));
  for (std::size_t j = 0; j < f.components.size(); ++j)
    for (std::size_t i = 0; i < f.dim; ++i) {
      double s = 0.0;
      for (std::size_t r = 0; r < f.dim; ++r) s += x[r] * f.components[j].A[r * f.dim + i];
      xt[j][i] = s;
    }
  double total = 0.0;
  for (const auto& n : f.weight_nodes) {
    if (n.g_val == 0.0) continue;
    double phi = 0.0;
    for (std::size_t j = 0; j < ks.size(); ++j) {
      double u = 0.0;
      for (std::size_t i = 0; i < f.dim; ++i) u += xt[j][i] * n.y[i];
      phi += ks[j]->psi(u);
    }
    total += n.w * n.g_val * phi;
  }
  return total;
}

inline double eval_sclass(const SClassFunction& f, std::initializer_list<double> x) {
  return eval_sclass(f, std::span<const double>(x.begin(), x.size()));
}

/// Largest |x^T A_j y_k| over the cube, i.e. the c the representation needs.
inline double representation_range(const SClassFunction& f) {
  double c = 0.0;
  std::vector<double> v(f.dim);
  for (const auto& comp : f.components)
    for (const auto& n : f.weight_nodes) {
      detail::mat_vec(comp.A, n.y, v);
      double l1 = 0.0;
      for (double e : v) l1 += std::abs(e);
      c = std::max(c, l1);
    }
  return c;
}

struct RidgeAtom {
  double a = 0.0;
  std::vector<double> omega;  // unit vector
  double b = 0.0;
};

/// sum_i a_i (omega_i . x - b_i)_+ + linear . x + constant.
struct RidgeExpansion {
  std::size_t dim = 0;
  std::vector<RidgeAtom> atoms;
  std::vector<double> linear;
  double constant = 0.0;
  double c1 = 0.0, c2 = 0.0;   // offset range, strictly containing omega . x over the cube
  double mass = 0.0;           // total mass of the representation the atoms came from
  double sharpness = 1e14;     // slope applied before the activation in to_net

  double coefficient_sum() const {
    double s = 0.0;
    for (const auto& at : atoms) s += std::abs(at.a);
    return s;
  }
  std::size_t atom_count() const noexcept { return atoms.size(); }
  /// Hidden units used by to_net: one per atom plus the linear passthrough.
  std::size_t unit_count() const noexcept { return atoms.size() + 1; }

  double evaluate(std::span<const double> x) const {
    if (x.size() != dim) throw ShapeError("RidgeExpansion: point dimension mismatch");
    double s = constant;
    for (std::size_t i = 0; i < dim; ++i) s += linear[i] * x[i];
    for (const auto& at : atoms) {
      double z = -at.b;
      for (std::size_t i = 0; i < dim; ++i) z += at.omega[i] * x[i];
      if (z > 0.0) s += at.a * z;
    }
    return s;
  }

  /// Single-hidden-layer SignReLU net (alpha = 1). Each hinge is realized as
  /// sigma(lambda z)/lambda, which equals z for z > 0 and lies in (-1/lambda, 0]
  /// otherwise, so the net is within coefficient_sum()/sharpness of evaluate()
  /// on the cube.
  SignReluNet to_net() const {
    const std::size_t n = atoms.size();
    const double lam = sharpness;
    double shift = 1.0;
    for (double v : linear) shift += std::abs(v);
    Layer hidden(n + 1, dim), out(1, n + 1);
    for (std::size_t k = 0; k < n; ++k) {
      for (std::size_t i = 0; i < dim; ++i) hidden.w(k, i) = lam * atoms[k].omega[i];
      hidden.bias[k] = -lam * atoms[k].b;
      out.w(0, k) = atoms[k].a / lam;
    }
    // Passthrough: linear . x + shift > 0 on the cube.
    for (std::size_t i = 0; i < dim; ++i) hidden.w(n, i) = linear[i];
    hidden.bias[n] = shift;
    out.w(0, n) = 1.0;
    out.bias[0] = constant - shift;
    return SignReluNet({hidden, out}, 1.0);
  }
};

struct SamplerOptions {
  std::size_t offset_bins = 0;   // strata along the offset axis; 0 picks by dimension
  std::size_t angle_cells = 0;   // strata along the direction; 0 picks by dimension
};

/// Signed measure of the hinge representation of f, prepared for stratified
/// inverse-CDF sampling. Pieces are ordered by (direction cell, offset bin) so
/// consecutive strata hold nearly identical atoms.
class RepresentationSampler {
 public:
  explicit RepresentationSampler(const SClassFunction& f, SamplerOptions opt = {}) : dim_(f.dim) {
    f.validate();
    const std::size_t d = f.dim;
    const std::size_t bins = opt.offset_bins ? opt.offset_bins : (d == 1 ? 1024 : d == 2 ? 32 : 16);
    const std::size_t cells = opt.angle_cells ? opt.angle_cells : (d == 1 ? 2 : d == 2 ? 64 : 12);
    const double b_max = std::sqrt(static_cast<double>(d));
    linear_.assign(d, 0.0);
    std::vector<double> v(d);

    for (std::size_t j = 0; j < f.components.size(); ++j) {
      const Kernel& K = kernel(f.components[j].phi_id);
      for (std::size_t k = 0; k < f.weight_nodes.size(); ++k) {
        const auto& node = f.weight_nodes[k];
        if (node.g_val == 0.0) continue;
        const double wg = node.w * node.g_val;
        detail::mat_vec(f.components[j].A, node.y, v);
        constant_ += wg * K.psi(0.0);
        for (std::size_t i = 0; i < d; ++i) linear_[i] += wg * K.d1(0.0) * v[i];
        double l2 = 0.0, l1 = 0.0;
        for (double e : v) {
          l2 += e * e;
          l1 += std::abs(e);
        }
        l2 = std::sqrt(l2);
        if (l2 == 0.0) continue;
        for (double dir : {1.0, -1.0}) {
          Direction D;
          D.omega.resize(d);
          for (std::size_t i = 0; i < d; ++i) D.omega[i] = dir * v[i] / l2;
          D.norm = l2;
          D.dir = dir;
          D.kernel = &K;
          D.cell = angle_cell(D.omega, cells);
          const std::size_t di = dirs_.size();
          dirs_.push_back(D);
          // Breakpoints in t: kernel sign changes and offset-bin edges.
          std::vector<double> cuts{0.0, l1};
          for (double z : K.d2_zeros)
            if (z > 0.0 && z < l1) cuts.push_back(z);
          for (std::size_t b = 1; b < bins; ++b) {
            const double t = l2 * b_max * static_cast<double>(b) / static_cast<double>(bins);
            if (t < l1) cuts.push_back(t);
          }
          std::sort(cuts.begin(), cuts.end());
          for (std::size_t p = 0; p + 1 < cuts.size(); ++p) {
            const double t0 = cuts[p], t1 = cuts[p + 1];
            if (!(t1 > t0)) continue;
            const double m = std::abs(node.w * node.g_val) * l2 *
                             std::abs(K.d1(dir * t1) - K.d1(dir * t0));
            if (!(m > 0.0)) continue;
            const double tm = 0.5 * (t0 + t1);
            Piece pc;
            pc.dir_index = di;
            pc.t0 = t0;
            pc.t1 = t1;
            pc.mass = m;
            pc.sign = (node.g_val > 0 ? 1.0 : -1.0) * (K.d2(dir * tm) > 0 ? 1.0 : -1.0);
            const auto bin = static_cast<std::size_t>(std::floor(tm / l2 / b_max * static_cast<double>(bins)));
            pc.key = std::make_tuple(D.cell, bin, k, j, dir > 0 ? 0 : 1, p);
            pieces_.push_back(pc);
          }
        }
      }
    }
    std::sort(pieces_.begin(), pieces_.end(), [](const Piece& a, const Piece& b) { return a.key < b.key; });
    cumulative_.reserve(pieces_.size());
    for (const auto& p : pieces_) {
      mass_ += p.mass;
      cumulative_.push_back(mass_);
    }
    if (!(mass_ > 0.0)) {
      bool affine_zero = constant_ == 0.0;
      for (double l : linear_) affine_zero = affine_zero && l == 0.0;
      if (affine_zero) throw DegenerateInputError("RepresentationSampler: representation has zero mass");
    }
  }

  double mass() const noexcept { return mass_; }
  std::size_t piece_count() const noexcept { return pieces_.size(); }
  const std::vector<double>& linear() const noexcept { return linear_; }
  double constant() const noexcept { return constant_; }

  /// n atoms by jittered stratified sampling of the normalized |measure|.
  RidgeExpansion sample(std::size_t n, Rng rng) const {
    if (n < 1) throw DomainError("build_shallow_approximant: n must be >= 1");
    RidgeExpansion e;
    e.dim = dim_;
    e.linear = linear_;
    e.constant = constant_;
    e.c2 = std::sqrt(static_cast<double>(dim_)) + 0.5;
    e.c1 = -e.c2;
    e.mass = mass_;
    e.atoms.reserve(n);
    if (mass_ == 0.0) {
      // Purely affine: atoms carry no weight.
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> om(dim_, 0.0);
        om[0] = 1.0;
        e.atoms.push_back({0.0, std::move(om), 0.0});
      }
      return e;
    }
    const double coef = mass_ / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double target = (static_cast<double>(i) + rng.uniform()) * coef;
      auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), target);
      if (it == cumulative_.end()) --it;
      const std::size_t pi = static_cast<std::size_t>(it - cumulative_.begin());
      const Piece& p = pieces_[pi];
      const Direction& D = dirs_[p.dir_index];
      const double before = pi == 0 ? 0.0 : cumulative_[pi - 1];
      const double frac = std::clamp((target - before) / p.mass, 0.0, 1.0);
      const double t = invert(D, p, frac);
      e.atoms.push_back({p.sign * coef, D.omega, t / D.norm});
    }
    return e;
  }

 private:
  struct Direction {
    std::vector<double> omega;
    double norm = 0.0;
    double dir = 1.0;
    const Kernel* kernel = nullptr;
    std::size_t cell = 0;
  };
  struct Piece {
    std::size_t dir_index = 0;
    double t0 = 0.0, t1 = 0.0, mass = 0.0, sign = 1.0;
    std::tuple<std::size_t, std::size_t, std::size_t, std::size_t, int, std::size_t> key;
  };

  static std::size_t angle_cell(const std::vector<double>& om, std::size_t cells) {
    if (om.size() == 1) return om[0] > 0 ? 1 : 0;
    const double two_pi = 2.0 * std::numbers::pi;
    const double phi = std::atan2(om[1], om[0]) + std::numbers::pi;
    if (om.size() == 2) return std::min(cells - 1, static_cast<std::size_t>(phi / two_pi * static_cast<double>(cells)));
    const double theta = std::acos(std::clamp(om[2], -1.0, 1.0));
    const std::size_t rows = std::max<std::size_t>(1, cells / 2);
    const auto r = std::min(rows - 1, static_cast<std::size_t>(theta / std::numbers::pi * static_cast<double>(rows)));
    auto c = std::min(cells - 1, static_cast<std::size_t>(phi / two_pi * static_cast<double>(cells)));
    if (r % 2 == 1) c = cells - 1 - c;  // serpentine order keeps neighbours adjacent
    return r * cells + c;
  }

  // t in [t0, t1] where the piece's cumulative mass reaches frac of its total.
  static double invert(const Direction& D, const Piece& p, double frac) {
    const auto d1 = D.kernel->d1;
    const double base = d1(D.dir * p.t0);
    const double span = std::abs(d1(D.dir * p.t1) - base);
    double lo = p.t0, hi = p.t1;
    for (int it = 0; it < 80 && hi - lo > 1e-15 * (1.0 + hi); ++it) {
      const double mid = 0.5 * (lo + hi);
      if (std::abs(d1(D.dir * mid) - base) < frac * span)
        lo = mid;
      else
        hi = mid;
    }
    return 0.5 * (lo + hi);
  }

  std::size_t dim_ = 0;
  std::vector<Direction> dirs_;
  std::vector<Piece> pieces_;
  std::vector<double> cumulative_;
  std::vector<double> linear_;
  double constant_ = 0.0;
  double mass_ = 0.0;
};

/// Shallow approximant of f with n sampled atoms; the affine part is exact.
inline RidgeExpansion build_shallow_approximant(const SClassFunction& f, std::size_t n, std::uint64_t seed,
                                                SamplerOptions opt = {}) {
  if (n < 1) throw DomainError("build_shallow_approximant: n must be >= 1");
  return RepresentationSampler(f, opt).sample(n, Rng(seed).derive("maurey"));
}

/// Quadrature grid for error measurement. Composite rules keep the kinks of
/// hinge sums from dominating the quadrature error.
inline TensorGrid error_grid(std::size_t dim) {
  if (dim == 1) return tensor_grid(composite_gauss_legendre(256, 8, -1.0, 1.0), 1);
  if (dim == 2) return tensor_grid(composite_gauss_legendre(32, 4, -1.0, 1.0), 2);
  return tensor_grid(composite_gauss_legendre(12, 3, -1.0, 1.0), 3);
}

/// Values of f on the grid points.
inline std::vector<double> sample_on_grid(const SClassFunction& f, const TensorGrid& grid) {
  std::vector<double> out(grid.size());
  for (std::size_t p = 0; p < grid.size(); ++p)
    out[p] = eval_sclass(f, std::span<const double>(grid.point(p), grid.dim));
  return out;
}

/// L2(cube) distance between an expansion and reference values on `grid`.
inline double l2_error(const RidgeExpansion& e, const TensorGrid& grid, std::span<const double> reference) {
  double s = 0.0;
  for (std::size_t p = 0; p < grid.size(); ++p) {
    const double r = e.evaluate(std::span<const double>(grid.point(p), grid.dim)) - reference[p];
    s += grid.weights[p] * r * r;
  }
  return std::sqrt(s);
}

struct RateSweepPoint {
  std::size_t n = 0;
  double mean_err = 0.0;
  double std_err = 0.0;
};

struct RateSweepResult {
  std::vector<RateSweepPoint> per_n;
  std::vector<std::vector<double>> errors;  // [n index][trial]
  double fitted_slope = std::numeric_limits<double>::quiet_NaN();
  double target_slope = 0.0;
  bool slope_fitted = false;  // false when some mean error is zero (exact representation)
  bool noisy = false;         // a single trial gives no spread estimate
};

inline RateSweepResult rate_sweep(const SClassFunction& f, std::span<const std::size_t> n_list,
                                  std::size_t trials, std::uint64_t seed, std::size_t jobs = 1,
                                  SamplerOptions opt = {}) {
  if (n_list.size() < 2) throw DomainError("rate_sweep: need at least 2 values of n");
  for (std::size_t i = 0; i < n_list.size(); ++i) {
    if (n_list[i] < 1) throw DomainError("rate_sweep: n must be >= 1");
    if (i > 0 && n_list[i] <= n_list[i - 1]) throw DomainError("rate_sweep: n_list must be strictly increasing");
  }
  if (trials < 1) throw DomainError("rate_sweep: trials must be >= 1");
  const RepresentationSampler sampler(f, opt);
  const TensorGrid grid = error_grid(f.dim);
  const std::vector<double> ref = sample_on_grid(f, grid);
  const Rng root = Rng(seed).derive("rate-sweep");

  RateSweepResult res;
  res.target_slope = -(0.5 + 1.5 / static_cast<double>(f.dim));
  res.noisy = trials < 2;
  res.errors.assign(n_list.size(), std::vector<double>(trials));
  parallel_for(n_list.size() * trials, jobs, [&](std::size_t idx) {
    const std::size_t ni = idx / trials, tr = idx % trials;
    const auto e = sampler.sample(n_list[ni], root.derive("trial", n_list[ni], tr));
    res.errors[ni][tr] = l2_error(e, grid, ref);
  });

  std::vector<double> xs, ys;
  bool positive = true;
  for (std::size_t ni = 0; ni < n_list.size(); ++ni) {
    const auto& errs = res.errors[ni];
    double mean = 0.0;
    for (double v : errs) mean += v;
    mean /= static_cast<double>(trials);
    double var = 0.0;
    for (double v : errs) var += (v - mean) * (v - mean);
    const double sd = trials > 1 ? std::sqrt(var / static_cast<double>(trials - 1)) : 0.0;
    res.per_n.push_back({n_list[ni], mean, sd / std::sqrt(static_cast<double>(trials))});
    xs.push_back(static_cast<double>(n_list[ni]));
    ys.push_back(mean);
    positive = positive && mean > 1e-14;
  }
  if (positive) {
    res.fitted_slope = loglog_slope(xs, ys);
    res.slope_fitted = true;
  }
  return res;
}

inline RateSweepResult rate_sweep(const SClassFunction& f, std::initializer_list<std::size_t> n_list,
                                  std::size_t trials, std::uint64_t seed, std::size_t jobs = 1) {
  return rate_sweep(f, std::span<const std::size_t>(n_list.begin(), n_list.size()), trials, seed, jobs);
}

}  // namespace signrelu
