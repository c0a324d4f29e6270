#pragma once

// SignReLU feedforward networks: layers of affine maps with element-wise
// SignReLU between them, parameter-norm accounting and a text format.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <system_error>
#include <utility>
#include <vector>

#include "signrelu/errors.hpp"

namespace signrelu {

/// SignReLU(x; alpha) = x for x > 0 and alpha * x / (1 + |x|) otherwise.
inline double signrelu(double x, double alpha) {
  if (!std::isfinite(x)) throw DomainError("signrelu: non-finite input");
  return x > 0.0 ? x : alpha * x / (1.0 - x);
}

/// Derivative of SignReLU; the value at 0 is the left-branch limit alpha.
inline double signrelu_derivative(double x, double alpha) noexcept {
  if (x > 0.0) return 1.0;
  const double s = 1.0 - x;
  return alpha / (s * s);
}

namespace detail {
// Unchecked variant for hot loops whose inputs are already known finite.
inline double act(double x, double alpha) noexcept { return x > 0.0 ? x : alpha * x / (1.0 - x); }
}  // namespace detail

/// Affine map x -> W x + b with W stored row-major as [out x in].
struct Layer {
  std::size_t out = 0;
  std::size_t in = 0;
  std::vector<double> weights;
  std::vector<double> bias;

  Layer() = default;
  Layer(std::size_t out_dim, std::size_t in_dim)
      : out(out_dim), in(in_dim), weights(out_dim * in_dim, 0.0), bias(out_dim, 0.0) {}
  Layer(std::size_t out_dim, std::size_t in_dim, std::vector<double> w, std::vector<double> b)
      : out(out_dim), in(in_dim), weights(std::move(w)), bias(std::move(b)) {
    if (weights.size() != out * in || bias.size() != out)
      throw ShapeError("Layer: weight/bias sizes do not match dimensions");
  }

  double& w(std::size_t i, std::size_t j) { return weights[i * in + j]; }
  double w(std::size_t i, std::size_t j) const { return weights[i * in + j]; }

  std::size_t parameter_count() const noexcept { return weights.size() + bias.size(); }

  void apply(std::span<const double> x, std::span<double> y) const noexcept {
    for (std::size_t i = 0; i < out; ++i) {
      const double* row = weights.data() + i * in;
      double acc = bias[i];
      for (std::size_t j = 0; j < in; ++j) acc += row[j] * x[j];
      y[i] = acc;
    }
  }
};

class SignReluNet {
 public:
  SignReluNet() = default;
  SignReluNet(std::vector<Layer> layers, double alpha = 1.0, bool activate_output = false)
      : layers_(std::move(layers)), alpha_(alpha), activate_output_(activate_output) {
    validate();
  }

  const std::vector<Layer>& layers() const noexcept { return layers_; }
  /// Mutable access for trainers working on their own copy.
  std::vector<Layer>& mutable_layers() noexcept { return layers_; }

  double alpha() const noexcept { return alpha_; }
  bool activate_output() const noexcept { return activate_output_; }
  bool empty() const noexcept { return layers_.empty(); }

  std::size_t input_dim() const noexcept { return layers_.empty() ? 0 : layers_.front().in; }
  std::size_t output_dim() const noexcept { return layers_.empty() ? 0 : layers_.back().out; }

  /// Number of activated (hidden) layers.
  std::size_t depth() const noexcept {
    if (layers_.empty()) return 0;
    return layers_.size() - 1 + (activate_output_ ? 1 : 0);
  }

  /// Largest activated layer width.
  std::size_t width() const noexcept {
    std::size_t w = 0;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const bool hidden = l + 1 < layers_.size() || activate_output_;
      if (hidden) w = std::max(w, layers_[l].out);
    }
    return w;
  }

  std::size_t parameter_count() const noexcept {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.parameter_count();
    return n;
  }

  bool is_activated(std::size_t layer) const noexcept {
    return layer + 1 < layers_.size() || activate_output_;
  }

  void validate() const {
    if (!(alpha_ > 0.0) || !std::isfinite(alpha_)) throw DomainError("SignReluNet: alpha must be positive");
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& L = layers_[l];
      if (L.weights.size() != L.out * L.in || L.bias.size() != L.out)
        throw ShapeError("SignReluNet: layer " + std::to_string(l) + " has inconsistent sizes");
      if (l > 0 && layers_[l - 1].out != L.in)
        throw ShapeError("SignReluNet: layer " + std::to_string(l) + " input does not chain");
      for (double v : L.weights)
        if (!std::isfinite(v)) throw DomainError("SignReluNet: non-finite weight");
      for (double v : L.bias)
        if (!std::isfinite(v)) throw DomainError("SignReluNet: non-finite bias");
    }
  }

 private:
  std::vector<Layer> layers_;
  double alpha_ = 1.0;
  bool activate_output_ = false;
};

/// Radial projection onto the Euclidean ball of the given radius.
inline void project_to_ball(std::span<double> y, double radius) noexcept {
  double n2 = 0.0;
  for (double v : y) n2 += v * v;
  const double n = std::sqrt(n2);
  if (n > radius && n > 0.0) {
    const double s = radius / n;
    for (double& v : y) v *= s;
  }
}

/// Network output; when `radius` is set the output is projected onto that ball.
inline std::vector<double> forward(const SignReluNet& net, std::span<const double> x,
                                   std::optional<double> radius = std::nullopt) {
  if (net.empty()) throw ShapeError("forward: empty network");
  if (x.size() != net.input_dim())
    throw ShapeError("forward: input has length " + std::to_string(x.size()) + ", expected " +
                     std::to_string(net.input_dim()));
  std::vector<double> cur(x.begin(), x.end());
  std::vector<double> next;
  const auto& layers = net.layers();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    next.assign(layers[l].out, 0.0);
    layers[l].apply(cur, next);
    if (net.is_activated(l))
      for (double& v : next) v = detail::act(v, net.alpha());
    cur.swap(next);
  }
  if (radius) project_to_ball(cur, *radius);
  return cur;
}

inline std::vector<double> forward(const SignReluNet& net, std::initializer_list<double> x,
                                   std::optional<double> radius = std::nullopt) {
  return forward(net, std::span<const double>(x.begin(), x.size()), radius);
}

/// Scalar-output convenience.
inline double forward_scalar(const SignReluNet& net, std::span<const double> x) {
  return forward(net, x).at(0);
}

struct LayerNorms {
  double eq1_norm = 0.0;    // max |entry| of [A | b]
  double cover_norm = 0.0;  // max{max column l1 of A, ||b||_inf}
};

struct ParamNormReport {
  std::vector<LayerNorms> per_layer;
  double eq1_total = 0.0;
  double cover_total = 0.0;
};

inline ParamNormReport param_norm(const SignReluNet& net) {
  net.validate();
  ParamNormReport r;
  const auto& layers = net.layers();
  for (const auto& L : layers) {
    LayerNorms n;
    for (double v : L.weights) n.eq1_norm = std::max(n.eq1_norm, std::abs(v));
    double binf = 0.0;
    for (double v : L.bias) binf = std::max(binf, std::abs(v));
    n.eq1_norm = std::max(n.eq1_norm, binf);
    double col = 0.0;
    for (std::size_t j = 0; j < L.in; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < L.out; ++i) s += std::abs(L.w(i, j));
      col = std::max(col, s);
    }
    n.cover_norm = std::max(col, binf);
    r.per_layer.push_back(n);
  }
  if (layers.empty()) return r;
  r.eq1_total = r.per_layer.back().eq1_norm;
  r.cover_total = 1.0;
  for (std::size_t l = 0; l + 1 < layers.size(); ++l)
    r.eq1_total *= std::max(r.per_layer[l].eq1_norm, 1.0);
  for (const auto& n : r.per_layer) r.cover_total *= n.cover_norm;
  return r;
}

/// Elementwise bounds of the network output over the box [lo, hi] (interval
/// propagation; SignReLU is monotone so endpoints map to endpoints).
inline std::pair<std::vector<double>, std::vector<double>> output_bounds(
    const SignReluNet& net, std::span<const double> lo, std::span<const double> hi) {
  if (lo.size() != net.input_dim() || hi.size() != net.input_dim())
    throw ShapeError("output_bounds: box dimension mismatch");
  std::vector<double> cl(lo.begin(), lo.end()), ch(hi.begin(), hi.end());
  const auto& layers = net.layers();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& L = layers[l];
    std::vector<double> nl(L.out), nh(L.out);
    for (std::size_t i = 0; i < L.out; ++i) {
      double a = L.bias[i], b = L.bias[i];
      for (std::size_t j = 0; j < L.in; ++j) {
        const double w = L.w(i, j);
        if (w >= 0) {
          a += w * cl[j];
          b += w * ch[j];
        } else {
          a += w * ch[j];
          b += w * cl[j];
        }
      }
      if (net.is_activated(l)) {
        a = detail::act(a, net.alpha());
        b = detail::act(b, net.alpha());
      }
      nl[i] = a;
      nh[i] = b;
    }
    cl.swap(nl);
    ch.swap(nh);
  }
  return {cl, ch};
}

// ---------------------------------------------------------------------------
// Text format
//
//   signrelu-net 1
//   alpha <a>
//   activate_output <0|1>
//   layers <L>
//   then per layer: "<out> <in>", `out` rows of `in` weights, one bias row.
//
// Numbers are written in shortest round-trip form.

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw FileError("parse_double: invalid number '" + std::string(s) + "'");
  return v;
}

inline void write_net(std::ostream& os, const SignReluNet& net) {
  os << "signrelu-net 1\n";
  os << "alpha " << format_double(net.alpha()) << "\n";
  os << "activate_output " << (net.activate_output() ? 1 : 0) << "\n";
  os << "layers " << net.layers().size() << "\n";
  for (const auto& L : net.layers()) {
    os << L.out << " " << L.in << "\n";
    for (std::size_t i = 0; i < L.out; ++i) {
      for (std::size_t j = 0; j < L.in; ++j) os << (j ? " " : "") << format_double(L.w(i, j));
      os << "\n";
    }
    for (std::size_t i = 0; i < L.out; ++i) os << (i ? " " : "") << format_double(L.bias[i]);
    os << "\n";
  }
}

namespace detail {
inline std::string next_token(std::istream& is, const char* what) {
  std::string tok;
  if (!(is >> tok)) throw FileError(std::string("read_net: unexpected end of input reading ") + what);
  return tok;
}
inline void expect(std::istream& is, const char* tok) {
  if (next_token(is, tok) != tok) throw FileError(std::string("read_net: expected '") + tok + "'");
}
inline std::size_t next_size(std::istream& is, const char* what) {
  const auto t = next_token(is, what);
  std::size_t v = 0;
  auto res = std::from_chars(t.data(), t.data() + t.size(), v);
  if (res.ec != std::errc() || res.ptr != t.data() + t.size())
    throw FileError(std::string("read_net: bad integer for ") + what);
  return v;
}
}  // namespace detail

inline SignReluNet read_net(std::istream& is) {
  detail::expect(is, "signrelu-net");
  if (detail::next_size(is, "version") != 1) throw FileError("read_net: unsupported version");
  detail::expect(is, "alpha");
  const double alpha = parse_double(detail::next_token(is, "alpha"));
  detail::expect(is, "activate_output");
  const bool act = detail::next_size(is, "activate_output") != 0;
  detail::expect(is, "layers");
  const std::size_t n = detail::next_size(is, "layer count");
  std::vector<Layer> layers;
  layers.reserve(n);
  for (std::size_t l = 0; l < n; ++l) {
    const std::size_t out = detail::next_size(is, "out");
    const std::size_t in = detail::next_size(is, "in");
    Layer L(out, in);
    for (double& v : L.weights) v = parse_double(detail::next_token(is, "weight"));
    for (double& v : L.bias) v = parse_double(detail::next_token(is, "bias"));
    layers.push_back(std::move(L));
  }
  return SignReluNet(std::move(layers), alpha, act);
}

inline std::string to_text(const SignReluNet& net) {
  std::ostringstream os;
  write_net(os, net);
  return os.str();
}

inline SignReluNet from_text(const std::string& s) {
  std::istringstream is(s);
  return read_net(is);
}

}  // namespace signrelu
