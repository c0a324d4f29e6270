#pragma once

// Reverse-mode gradients of a mean per-sample loss with respect to every
// weight and bias of a SignReluNet.

#include <cmath>
#include <concepts>
#include <optional>
#include <span>
#include <vector>

#include "signrelu/net.hpp"

namespace signrelu {

struct Sample {
  std::vector<double> input;
  std::vector<double> target;
};

/// A per-sample loss: value(out, target) and its gradient with respect to out.
template <class L>
concept SampleLoss = requires(const L& l, std::span<const double> o, std::span<const double> t,
                              std::span<double> g) {
  { l.value(o, t) } -> std::convertible_to<double>;
  l.gradient(o, t, g);
};

/// |out - target|^2 (sum over coordinates, no 1/2).
struct SquaredLoss {
  double value(std::span<const double> out, std::span<const double> target) const {
    double s = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double r = out[i] - target[i];
      s += r * r;
    }
    return s;
  }
  void gradient(std::span<const double> out, std::span<const double> target,
                std::span<double> g) const {
    for (std::size_t i = 0; i < out.size(); ++i) g[i] = 2.0 * (out[i] - target[i]);
  }
};

/// Gradient with the same layout as the network's layers.
struct Gradient {
  std::vector<Layer> layers;

  static Gradient zeros_like(const SignReluNet& net) {
    Gradient g;
    for (const auto& L : net.layers()) g.layers.emplace_back(L.out, L.in);
    return g;
  }

  double norm() const {
    double s = 0.0;
    for (const auto& L : layers) {
      for (double v : L.weights) s += v * v;
      for (double v : L.bias) s += v * v;
    }
    return std::sqrt(s);
  }
};

namespace detail {

// Forward pass that records pre-activations and activations per layer.
struct Tape {
  std::vector<std::vector<double>> pre;   // z_l = W_l a_{l-1} + b_l
  std::vector<std::vector<double>> post;  // a_l (post[0] is the input)
};

inline void record(const SignReluNet& net, std::span<const double> x, Tape& tape) {
  const auto& layers = net.layers();
  tape.pre.resize(layers.size());
  tape.post.resize(layers.size() + 1);
  tape.post[0].assign(x.begin(), x.end());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    tape.pre[l].assign(layers[l].out, 0.0);
    layers[l].apply(tape.post[l], tape.pre[l]);
    tape.post[l + 1] = tape.pre[l];
    if (net.is_activated(l))
      for (double& v : tape.post[l + 1]) v = act(v, net.alpha());
  }
}

}  // namespace detail

/// Mean loss over `batch`; when `grad` is non-null it receives the gradient of
/// that mean. With `radius` set, outputs are projected onto the ball before the
/// loss and the projection is differentiated through.
template <SampleLoss Loss>
double loss_and_grad(const SignReluNet& net, const Loss& loss, std::span<const Sample> batch,
                     Gradient* grad = nullptr, std::optional<double> radius = std::nullopt) {
  if (batch.empty()) throw ShapeError("loss_and_grad: empty batch");
  const auto& layers = net.layers();
  if (grad) *grad = Gradient::zeros_like(net);
  detail::Tape tape;
  std::vector<double> delta, prev, gout(net.output_dim());
  double total = 0.0;
  const double inv_n = 1.0 / static_cast<double>(batch.size());

  for (std::size_t s = 0; s < batch.size(); ++s) {
    const Sample& smp = batch[s];
    if (smp.input.size() != net.input_dim() || smp.target.size() != net.output_dim())
      throw ShapeError("loss_and_grad: sample " + std::to_string(s) + " has wrong dimensions");
    detail::record(net, smp.input, tape);
    std::vector<double> y = tape.post.back();
    double ynorm = 0.0;
    bool projected = false;
    if (radius) {
      for (double v : y) ynorm += v * v;
      ynorm = std::sqrt(ynorm);
      if (ynorm > *radius && ynorm > 0.0) {
        projected = true;
        for (double& v : y) v *= *radius / ynorm;
      }
    }
    const double lv = loss.value(y, smp.target);
    if (!std::isfinite(lv)) throw NumericError("loss_and_grad: non-finite loss", s);
    total += lv;
    if (!grad) continue;

    loss.gradient(y, smp.target, gout);
    delta = gout;
    if (projected) {
      // d/dy of r*y/|y| applied to the upstream gradient.
      const auto& raw = tape.post.back();
      double dot = 0.0;
      for (std::size_t i = 0; i < raw.size(); ++i) dot += raw[i] * gout[i];
      for (std::size_t i = 0; i < raw.size(); ++i)
        delta[i] = (*radius / ynorm) * (gout[i] - raw[i] * dot / (ynorm * ynorm));
    }
    for (std::size_t l = layers.size(); l-- > 0;) {
      const Layer& L = layers[l];
      if (net.is_activated(l))
        for (std::size_t i = 0; i < L.out; ++i)
          delta[i] *= signrelu_derivative(tape.pre[l][i], net.alpha());
      Layer& G = grad->layers[l];
      const auto& a = tape.post[l];
      for (std::size_t i = 0; i < L.out; ++i) {
        const double di = delta[i] * inv_n;
        G.bias[i] += di;
        double* grow = G.weights.data() + i * L.in;
        for (std::size_t j = 0; j < L.in; ++j) grow[j] += di * a[j];
      }
      if (l == 0) break;
      prev.assign(L.in, 0.0);
      for (std::size_t i = 0; i < L.out; ++i) {
        const double* row = L.weights.data() + i * L.in;
        for (std::size_t j = 0; j < L.in; ++j) prev[j] += row[j] * delta[i];
      }
      delta.swap(prev);
    }
  }
  return total * inv_n;
}

/// The gradient structure alone.
template <SampleLoss Loss>
Gradient grad(const SignReluNet& net, const Loss& loss, std::span<const Sample> batch,
              std::optional<double> radius = std::nullopt) {
  Gradient g;
  loss_and_grad(net, loss, batch, &g, radius);
  return g;
}

}  // namespace signrelu
