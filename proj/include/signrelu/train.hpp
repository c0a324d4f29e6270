#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "signrelu/grad.hpp"
#include "signrelu/net.hpp"
#include "signrelu/rng.hpp"

namespace signrelu {

struct TrainConfig {
  double step_size = 1e-2;
  std::size_t steps = 1000;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  std::optional<double> clip_bound;  // output-ball radius during evaluation
  double momentum = 0.0;             // 0 (plain SGD) or e.g. 0.9
  std::optional<double> final_step_size;  // cosine decay from step_size to this value

  void validate() const {
    if (!(step_size > 0.0)) throw DomainError("TrainConfig: step_size must be positive");
    if (batch_size < 1) throw DomainError("TrainConfig: batch_size must be >= 1");
    if (momentum < 0.0 || momentum >= 1.0) throw DomainError("TrainConfig: momentum must be in [0,1)");
    if (clip_bound && !(*clip_bound > 0.0)) throw DomainError("TrainConfig: clip_bound must be positive");
    if (final_step_size && !(*final_step_size > 0.0))
      throw DomainError("TrainConfig: final_step_size must be positive");
  }
};

/// Dense net with the given layer sizes (sizes[0] = input dim). Weights are
/// uniform in +-1/sqrt(fan_in), biases zero.
inline SignReluNet init_net(std::span<const std::size_t> sizes, double alpha, Rng rng) {
  if (sizes.size() < 2) throw ShapeError("init_net: need at least input and output sizes");
  std::vector<Layer> layers;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    Layer L(sizes[l + 1], sizes[l]);
    const double s = 1.0 / std::sqrt(static_cast<double>(sizes[l]));
    for (double& w : L.weights) w = rng.uniform(-s, s);
    layers.push_back(std::move(L));
  }
  return SignReluNet(std::move(layers), alpha);
}

inline SignReluNet init_net(std::initializer_list<std::size_t> sizes, double alpha, Rng rng) {
  return init_net(std::span<const std::size_t>(sizes.begin(), sizes.size()), alpha, rng);
}

/// SGD with optional heavy-ball momentum. Owns its velocity buffers.
class SgdOptimizer {
 public:
  SgdOptimizer(const SignReluNet& net, double step_size, double momentum)
      : step_(step_size), mu_(momentum), velocity_(Gradient::zeros_like(net)) {}

  void set_step_size(double s) noexcept { step_ = s; }

  void step(SignReluNet& net, const Gradient& g) {
    auto& layers = net.mutable_layers();
    for (std::size_t l = 0; l < layers.size(); ++l) {
      update(layers[l].weights, velocity_.layers[l].weights, g.layers[l].weights);
      update(layers[l].bias, velocity_.layers[l].bias, g.layers[l].bias);
    }
  }

 private:
  void update(std::vector<double>& p, std::vector<double>& v, const std::vector<double>& g) const {
    for (std::size_t i = 0; i < p.size(); ++i) {
      v[i] = mu_ * v[i] + g[i];
      p[i] -= step_ * v[i];
    }
  }

  double step_;
  double mu_;
  Gradient velocity_;
};

struct TrainResult {
  SignReluNet net;
  std::vector<double> loss_trace;  // mini-batch loss before each update
};

/// Seeded mini-batch gradient descent on the mean of `loss` over `data`.
/// Batches walk a fresh permutation of the data every epoch.
template <SampleLoss Loss>
TrainResult train(SignReluNet net, const Loss& loss, std::span<const Sample> data,
                  const TrainConfig& cfg) {
  cfg.validate();
  if (data.empty()) throw DomainError("train: empty dataset");
  TrainResult out{std::move(net), {}};
  if (cfg.steps == 0) return out;
  out.loss_trace.reserve(cfg.steps);

  SgdOptimizer opt(out.net, cfg.step_size, cfg.momentum);
  const Rng root(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::vector<Sample> batch;
  std::size_t cursor = data.size(), epoch = 0;
  Gradient g;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    batch.clear();
    while (batch.size() < cfg.batch_size) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng r = root.derive("epoch", epoch++);
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[r.below(i)]);
        cursor = 0;
      }
      batch.push_back(data[order[cursor++]]);
      if (batch.size() == data.size()) break;
    }
    double lv = 0.0;
    try {
      lv = loss_and_grad(out.net, loss, std::span<const Sample>(batch), &g, cfg.clip_bound);
    } catch (const NumericError& e) {
      throw TrainingError(std::string("train: diverged: ") + e.what(), step);
    }
    if (!std::isfinite(lv) || !std::isfinite(g.norm()))
      throw TrainingError("train: loss or gradient became non-finite", step);
    out.loss_trace.push_back(lv);
    if (cfg.final_step_size) {
      const double frac = cfg.steps > 1 ? static_cast<double>(step) / static_cast<double>(cfg.steps - 1) : 1.0;
      opt.set_step_size(*cfg.final_step_size +
                        0.5 * (cfg.step_size - *cfg.final_step_size) * (1.0 + std::cos(std::numbers::pi * frac)));
    }
    opt.step(out.net, g);
  }
  return out;
}

}  // namespace signrelu
