#pragma once

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <boost/math/special_functions/legendre.hpp>
#include <cmath>
#include <cstddef>
#include <vector>

#include "signrelu/errors.hpp"

namespace signrelu {

struct Rule1D {
  std::vector<double> nodes;
  std::vector<double> weights;
};

/// Gauss-Legendre rule of the given order on [-1, 1].
inline Rule1D gauss_legendre(std::size_t order) {
  if (order < 1) throw DomainError("gauss_legendre: order must be >= 1");
  const auto zeros = boost::math::legendre_p_zeros<double>(static_cast<int>(order));
  Rule1D r;
  auto push = [&](double x) {
    const double dp = boost::math::legendre_p_prime<double>(static_cast<int>(order), x);
    r.nodes.push_back(x);
    r.weights.push_back(2.0 / ((1.0 - x * x) * dp * dp));
  };
  // legendre_p_zeros returns the non-negative zeros in increasing order.
  for (std::size_t i = zeros.size(); i-- > 0;)
    if (zeros[i] > 0.0) push(-zeros[i]);
  for (double z : zeros) push(z);
  return r;
}

/// Gauss-Legendre rule mapped to [a, b].
inline Rule1D gauss_legendre(std::size_t order, double a, double b) {
  Rule1D r = gauss_legendre(order);
  const double h = 0.5 * (b - a), m = 0.5 * (a + b);
  for (auto& x : r.nodes) x = m + h * x;
  for (auto& w : r.weights) w *= h;
  return r;
}

/// `panels` equal sub-intervals of [a, b], each with an order-`order` rule.
inline Rule1D composite_gauss_legendre(std::size_t panels, std::size_t order, double a, double b) {
  Rule1D out;
  const Rule1D base = gauss_legendre(order);
  const double len = (b - a) / static_cast<double>(panels);
  for (std::size_t p = 0; p < panels; ++p) {
    const double lo = a + len * static_cast<double>(p);
    for (std::size_t i = 0; i < base.nodes.size(); ++i) {
      out.nodes.push_back(lo + 0.5 * len * (base.nodes[i] + 1.0));
      out.weights.push_back(0.5 * len * base.weights[i]);
    }
  }
  return out;
}

/// Tensor-product grid of a 1-D rule in `dim` dimensions; points are stored
/// flat (point p occupies [p*dim, (p+1)*dim)).
struct TensorGrid {
  std::size_t dim = 0;
  std::vector<double> points;
  std::vector<double> weights;

  std::size_t size() const noexcept { return weights.size(); }
  const double* point(std::size_t p) const noexcept { return points.data() + p * dim; }
};

inline TensorGrid tensor_grid(const Rule1D& rule, std::size_t dim) {
  if (dim < 1 || dim > 3) throw DomainError("tensor_grid: dimension must be 1, 2 or 3");
  TensorGrid g;
  g.dim = dim;
  const std::size_t n = rule.nodes.size();
  std::size_t total = 1;
  for (std::size_t k = 0; k < dim; ++k) total *= n;
  g.points.resize(total * dim);
  g.weights.resize(total);
  for (std::size_t p = 0; p < total; ++p) {
    std::size_t rem = p;
    double w = 1.0;
    for (std::size_t k = 0; k < dim; ++k) {
      const std::size_t i = rem % n;
      rem /= n;
      g.points[p * dim + k] = rule.nodes[i];
      w *= rule.weights[i];
    }
    g.weights[p] = w;
  }
  return g;
}

/// Default grid on [-1,1]^d: order 64 per axis in 1-D, 32 in 2-D, 16 in 3-D.
inline TensorGrid default_cube_grid(std::size_t dim) {
  const std::size_t order = dim == 1 ? 64 : dim == 2 ? 32 : 16;
  return tensor_grid(gauss_legendre(order), dim);
}

/// Adaptive Gauss-Kronrod (15-point) integral of f over [a, b].
template <class F>
double integrate_adaptive(F&& f, double a, double b, double tol = 1e-12, double* error = nullptr) {
  if (a == b) return 0.0;
  double err = 0.0;
  const double v = boost::math::quadrature::gauss_kronrod<double, 15>::integrate(f, a, b, 20, tol, &err);
  if (error) *error = err;
  return v;
}

}  // namespace signrelu
