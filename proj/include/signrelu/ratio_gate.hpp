#pragma once

// Exact SignReLU constructions for reciprocals, the two-input division gate
// y/x on [c, C] x [-C, C], and its composition with numerator/denominator nets.
//
// Every construction rests on one identity: for s >= s_lo > 0 the unit
// sigma(1 - s/s_lo) sits on the negative branch and equals alpha*(s_lo/s - 1),
// so 1/s is affine in that unit. Products come from
//   a(a+1) - b(b+1) = 4pr + 2r   with a = p + r, b = p - r,
// where each a(a+1) is itself a reciprocal of 1/a - 1/(a+1).

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <span>
#include <vector>

#include "signrelu/errors.hpp"
#include "signrelu/net.hpp"
#include "signrelu/rng.hpp"

namespace signrelu {

/// Size budget the gate is compared against.
struct GateBudget {
  std::size_t depth = 6;
  std::size_t width = 9;
  std::size_t params = 71;
};

struct DivisionGateSpec {
  double c = 0.1;   // denominator lower bound
  double C = 10.0;  // range bound
  double tol = 1e-6;

  struct Achieved {
    std::size_t depth = 0;
    std::size_t width = 0;
    std::size_t params = 0;
    double max_err = std::numeric_limits<double>::infinity();
  } achieved;

  void validate() const {
    if (!(c > 0.0) || !std::isfinite(c)) throw DomainError("DivisionGateSpec: c must be positive");
    if (!(C > c) || !std::isfinite(C)) throw DomainError("DivisionGateSpec: need 0 < c < C");
    if (!(tol >= 0.0)) throw DomainError("DivisionGateSpec: tol must be nonnegative");
  }

  bool within_budget(const GateBudget& b = {}) const noexcept {
    return achieved.depth <= b.depth && achieved.width <= b.width && achieved.params <= b.params;
  }
};

/// One-hidden-unit net computing c/x exactly for x >= c (alpha = 1).
inline SignReluNet reciprocal_gate(double c) {
  if (!(c > 0.0) || !std::isfinite(c)) throw DomainError("reciprocal_gate: c must be positive");
  return SignReluNet({Layer(1, 1, {-1.0 / c}, {1.0}), Layer(1, 1, {1.0}, {1.0})}, 1.0);
}

namespace detail {

// Offsets shared by the gate and the composed net.
struct GateConstants {
  double K;      // numerator shift keeping p - r >= 1
  double v_lo;   // lower bound of 1/(a(a+1)) over the rectangle
};

inline GateConstants gate_constants(double c, double C) {
  const double K = C + 1.0 / c + 1.0;
  const double a_max = K + C + 1.0 / c;
  return {K, 1.0 / (a_max * (a_max + 1.0))};
}

// Layers 2..4 of the gate for k numerators. Input layout of layer 2 is
// [h, p_1..p_k] with h = alpha*(c/x - 1) and p_i = y_i + K.
inline std::vector<Layer> gate_tail(double c, double C, double alpha, std::size_t k) {
  const auto [K, v_lo] = gate_constants(c, C);
  const double ia = 1.0 / alpha;
  // r = 1/x = (h/alpha + 1)/c
  const double r_h = ia / c, r_0 = 1.0 / c;

  // Layer 2: [r, then per i: 1/a, 1/(a+1), 1/b, 1/(b+1) units].
  Layer L2(1 + 4 * k, 1 + k);
  L2.w(0, 0) = r_h;
  L2.bias[0] = r_0;
  for (std::size_t i = 0; i < k; ++i) {
    // unit = sigma(1 - s) for s in {p + r, p + r + 1, p - r, p - r + 1}
    const double sign_r[4] = {1.0, 1.0, -1.0, -1.0};
    const double extra[4] = {0.0, 1.0, 0.0, 1.0};
    for (std::size_t q = 0; q < 4; ++q) {
      const std::size_t row = 1 + 4 * i + q;
      L2.w(row, 1 + i) = -1.0;
      L2.w(row, 0) = -sign_r[q] * r_h;
      L2.bias[row] = 1.0 - extra[q] - sign_r[q] * r_0;
    }
  }

  // Layer 3: [r, then per i: a(a+1) unit, b(b+1) unit].
  // 1/(a(a+1)) = (u_a - u_{a+1})/alpha, unit = sigma(1 - that/v_lo).
  Layer L3(1 + 2 * k, 1 + 4 * k);
  L3.w(0, 0) = 1.0;
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t q = 0; q < 2; ++q) {
      const std::size_t row = 1 + 2 * i + q, col = 1 + 4 * i + 2 * q;
      L3.w(row, col) = -ia / v_lo;
      L3.w(row, col + 1) = ia / v_lo;
      L3.bias[row] = 1.0;
    }
  }

  // Output: a(a+1) = (U/alpha + 1)/v_lo; y r = (a(a+1) - b(b+1) - 2r)/4 - K r.
  Layer L4(k, 1 + 2 * k);
  for (std::size_t i = 0; i < k; ++i) {
    L4.w(i, 0) = -0.5 - K;
    L4.w(i, 1 + 2 * i) = ia / (4.0 * v_lo);
    L4.w(i, 2 + 2 * i) = -ia / (4.0 * v_lo);
  }
  return {L2, L3, L4};
}

}  // namespace detail

/// Point-wise certification record of a gate.
struct GateCheck {
  double x, y, out, truth, err;
};

struct GateCertificate {
  std::vector<GateCheck> rows;  // grid rows first, then random points
  double max_err = 0.0;
  GateCheck worst{};
  std::vector<GateCheck> corners;  // the four rectangle corners
};

/// Evaluates a two-input gate with inputs clamped to the rectangle.
inline double gate_eval(const SignReluNet& gate, const DivisionGateSpec& spec, double x, double y) {
  const double in[2] = {std::clamp(x, spec.c, spec.C), std::clamp(y, -spec.C, spec.C)};
  return forward(gate, std::span<const double>(in, 2))[0];
}

/// Compares the gate against y/x on a grid x grid lattice plus `n_random`
/// uniform points of the rectangle.
inline GateCertificate certify_gate(const SignReluNet& gate, const DivisionGateSpec& spec,
                                    std::size_t grid = 200, std::size_t n_random = 10000,
                                    std::uint64_t seed = 0x9a7e) {
  spec.validate();
  GateCertificate cert;
  cert.rows.reserve(grid * grid + n_random);
  auto check = [&](double x, double y) {
    const double out = gate_eval(gate, spec, x, y), truth = y / x;
    GateCheck g{x, y, out, truth, std::abs(out - truth)};
    if (!(g.err <= cert.max_err)) {
      cert.max_err = g.err;
      cert.worst = g;
    }
    return g;
  };
  const double span_x = spec.C - spec.c, span_y = 2.0 * spec.C;
  const double step = grid > 1 ? 1.0 / static_cast<double>(grid - 1) : 0.0;
  for (std::size_t i = 0; i < grid; ++i)
    for (std::size_t j = 0; j < grid; ++j)
      cert.rows.push_back(check(spec.c + span_x * step * static_cast<double>(i),
                                -spec.C + span_y * step * static_cast<double>(j)));
  Rng rng = Rng(seed).derive("gate-certification");
  for (std::size_t n = 0; n < n_random; ++n) {
    const double x = rng.uniform(spec.c, spec.C), y = rng.uniform(-spec.C, spec.C);
    cert.rows.push_back(check(x, y));
  }
  for (double x : {spec.c, spec.C})
    for (double y : {-spec.C, spec.C}) cert.corners.push_back(check(x, y));
  return cert;
}

/// Builds the division gate, certifies it, and records the achieved size and
/// error in `spec.achieved`. Throws ConstructionError when the certified error
/// exceeds spec.tol.
inline SignReluNet division_gate(DivisionGateSpec& spec) {
  spec.validate();
  const auto K = detail::gate_constants(spec.c, spec.C).K;
  // Layer 1: h = sigma(1 - x/c), p = sigma(y + K) = y + K.
  Layer L1(2, 2, {-1.0 / spec.c, 0.0, 0.0, 1.0}, {1.0, K});
  std::vector<Layer> layers{L1};
  for (auto& L : detail::gate_tail(spec.c, spec.C, 1.0, 1)) layers.push_back(std::move(L));
  SignReluNet gate(std::move(layers), 1.0);

  const auto cert = certify_gate(gate, spec);
  spec.achieved = {gate.depth(), gate.width(), gate.parameter_count(), cert.max_err};
  if (!(cert.max_err <= spec.tol))
    throw ConstructionError("division_gate: certified error exceeds tolerance", cert.worst.x,
                            cert.worst.y, cert.max_err);
  return gate;
}

/// Gate certification rows as CSV.
inline void write_gate_csv(std::ostream& os, const GateCertificate& cert) {
  os << "x,y,gate_out,true_ratio,abs_err\n";
  for (const auto& r : cert.rows)
    os << format_double(r.x) << ',' << format_double(r.y) << ',' << format_double(r.out) << ','
       << format_double(r.truth) << ',' << format_double(r.err) << '\n';
}

namespace detail {

// A net split into activated layers and the final affine map.
struct SplitNet {
  std::vector<Layer> hidden;
  Layer head;
};

inline SplitNet split(const SignReluNet& net) {
  SplitNet s;
  const auto& L = net.layers();
  s.hidden.assign(L.begin(), L.end() - 1);
  if (net.activate_output()) {
    s.hidden.push_back(L.back());
    Layer id(L.back().out, L.back().out);
    for (std::size_t i = 0; i < id.out; ++i) id.w(i, i) = 1.0;
    s.head = id;
  } else {
    s.head = L.back();
  }
  return s;
}

// Adds `extra` activated layers that carry the head's output through the
// positive branch, shifted by `shift` so every coordinate stays positive.
inline void pad(SplitNet& s, std::size_t extra, std::span<const double> shift) {
  if (extra == 0) return;
  const std::size_t k = s.head.out;
  Layer first = s.head;
  for (std::size_t i = 0; i < k; ++i) first.bias[i] += shift[i];
  s.hidden.push_back(first);
  for (std::size_t e = 1; e < extra; ++e) {
    Layer id(k, k);
    for (std::size_t i = 0; i < k; ++i) id.w(i, i) = 1.0;
    s.hidden.push_back(id);
  }
  Layer head(k, k);
  for (std::size_t i = 0; i < k; ++i) {
    head.w(i, i) = 1.0;
    head.bias[i] = -shift[i];
  }
  s.head = head;
}

inline std::vector<double> padding_shift(const SignReluNet& net, std::span<const double> lo,
                                         std::span<const double> hi) {
  const auto [blo, bhi] = output_bounds(net, lo, hi);
  std::vector<double> s(blo.size());
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = std::max(0.0, -blo[i]) + 1.0;
  return s;
}

}  // namespace detail

/// Net computing num_k(x)/den(x) for every numerator output k. Nets of unequal
/// depth are aligned with shifted identity layers that are exact on the box
/// [lo, hi] (default [-1, 1]^d). Exact whenever den(x) in [c, C] and
/// num_k(x) in [-C, C].
inline SignReluNet compose_ratio(const SignReluNet& num_net, const SignReluNet& den_net,
                                 const DivisionGateSpec& spec, std::span<const double> lo = {},
                                 std::span<const double> hi = {}) {
  spec.validate();
  if (num_net.empty() || den_net.empty()) throw ShapeError("compose_ratio: empty network");
  num_net.validate();
  den_net.validate();
  if (num_net.input_dim() != den_net.input_dim())
    throw ShapeError("compose_ratio: numerator and denominator input dimensions differ");
  if (den_net.output_dim() != 1) throw ShapeError("compose_ratio: denominator must be scalar");
  if (num_net.alpha() != den_net.alpha())
    throw DomainError("compose_ratio: numerator and denominator use different alpha");
  const std::size_t d = num_net.input_dim(), k = num_net.output_dim();
  const double alpha = num_net.alpha();
  std::vector<double> box_lo(lo.begin(), lo.end()), box_hi(hi.begin(), hi.end());
  if (box_lo.empty()) box_lo.assign(d, -1.0);
  if (box_hi.empty()) box_hi.assign(d, 1.0);
  if (box_lo.size() != d || box_hi.size() != d) throw ShapeError("compose_ratio: box dimension mismatch");

  auto num = detail::split(num_net), den = detail::split(den_net);
  const std::size_t depth = std::max(num.hidden.size(), den.hidden.size());
  detail::pad(num, depth - num.hidden.size(), detail::padding_shift(num_net, box_lo, box_hi));
  detail::pad(den, depth - den.hidden.size(), detail::padding_shift(den_net, box_lo, box_hi));

  // Front: num and den side by side. Layer 0 shares the input.
  std::vector<Layer> layers;
  std::size_t wn_prev = d, wd_prev = d;
  for (std::size_t l = 0; l < depth; ++l) {
    const Layer& A = num.hidden[l];
    const Layer& B = den.hidden[l];
    const std::size_t in = l == 0 ? d : wn_prev + wd_prev;
    Layer M(A.out + B.out, in);
    for (std::size_t i = 0; i < A.out; ++i) {
      for (std::size_t j = 0; j < A.in; ++j) M.w(i, j) = A.w(i, j);
      M.bias[i] = A.bias[i];
    }
    const std::size_t off = l == 0 ? 0 : wn_prev;
    for (std::size_t i = 0; i < B.out; ++i) {
      for (std::size_t j = 0; j < B.in; ++j) M.w(A.out + i, off + j) = B.w(i, j);
      M.bias[A.out + i] = B.bias[i];
    }
    wn_prev = A.out;
    wd_prev = B.out;
    layers.push_back(std::move(M));
  }

  // Gate first layer merged with both heads: [h, p_1..p_k].
  const double K = detail::gate_constants(spec.c, spec.C).K;
  const std::size_t in = depth == 0 ? d : wn_prev + wd_prev;
  const std::size_t den_off = depth == 0 ? 0 : wn_prev;
  Layer G(1 + k, in);
  for (std::size_t j = 0; j < den.head.in; ++j) G.w(0, den_off + j) = -den.head.w(0, j) / spec.c;
  G.bias[0] = 1.0 - den.head.bias[0] / spec.c;
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < num.head.in; ++j) G.w(1 + i, j) = num.head.w(i, j);
    G.bias[1 + i] = num.head.bias[i] + K;
  }
  layers.push_back(std::move(G));
  for (auto& L : detail::gate_tail(spec.c, spec.C, alpha, k)) layers.push_back(std::move(L));
  return SignReluNet(std::move(layers), alpha);
}

}  // namespace signrelu
