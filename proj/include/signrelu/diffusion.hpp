#pragma once

// DDPM forward process, posterior-mean reverse targets, per-step denoiser
// training and the reverse sampler.

#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "signrelu/errors.hpp"
#include "signrelu/grad.hpp"
#include "signrelu/net.hpp"
#include "signrelu/parallel.hpp"
#include "signrelu/q0.hpp"
#include "signrelu/rng.hpp"
#include "signrelu/stats.hpp"
#include "signrelu/train.hpp"

namespace signrelu {

/// Arrays are indexed by t - 1 for t = 1..T.
struct NoiseSchedule {
  std::size_t T = 0;
  std::vector<double> betas;
  std::vector<double> alphas;   // cumulative products of (1 - beta)
  std::vector<double> sigma_q;  // sqrt(1 - alphas)
  std::vector<double> sigma_p;  // reverse-step standard deviations

  double beta(std::size_t t) const { return betas.at(t - 1); }
  /// Cumulative alpha with alpha(0) = 1.
  double alpha(std::size_t t) const { return t == 0 ? 1.0 : alphas.at(t - 1); }
  double sq(std::size_t t) const { return sigma_q.at(t - 1); }
  double sp(std::size_t t) const { return sigma_p.at(t - 1); }

  void validate() const {
    if (T < 1) throw DomainError("NoiseSchedule: T must be >= 1");
    if (betas.size() != T || alphas.size() != T || sigma_q.size() != T || sigma_p.size() != T)
      throw ShapeError("NoiseSchedule: arrays must have length T");
    for (std::size_t t = 1; t <= T; ++t) {
      if (!(beta(t) > 0.0 && beta(t) < 1.0)) throw DomainError("NoiseSchedule: betas must lie in (0,1)");
      if (!(sp(t) > 0.0) || !std::isfinite(sp(t))) throw DomainError("NoiseSchedule: sigma_p must be positive");
    }
  }
};

struct ScheduleScheme {
  enum class Kind { constant, linear } kind = Kind::linear;
  double beta = 0.1;       // constant
  double beta_lo = 1e-2;   // linear
  double beta_hi = 0.2;

  static ScheduleScheme constant(double b) { return {Kind::constant, b, b, b}; }
  static ScheduleScheme linear(double lo, double hi) { return {Kind::linear, lo, lo, hi}; }
};

/// Reverse standard deviations. `posterior` is the forward-posterior variance
/// beta_t (1 - alpha_{t-1}) / (1 - alpha_t), which vanishes at t = 1; that step
/// uses beta_1 instead.
enum class ReverseVariance { posterior, beta };

inline void set_reverse_variance(NoiseSchedule& s, ReverseVariance rv) {
  s.sigma_p.resize(s.T);
  for (std::size_t t = 1; t <= s.T; ++t) {
    double v = s.beta(t);
    if (rv == ReverseVariance::posterior && t > 1) {
      const double ratio = s.sq(t - 1) / s.sq(t);
      v = s.beta(t) * ratio * ratio;
    }
    s.sigma_p[t - 1] = std::sqrt(v);
  }
}

inline NoiseSchedule schedule_from_betas(std::vector<double> betas, ReverseVariance rv = ReverseVariance::posterior) {
  NoiseSchedule s;
  s.T = betas.size();
  if (s.T < 1) throw DomainError("make_schedule: T must be >= 1");
  s.betas = std::move(betas);
  // log alpha_t accumulated with log1p so 1 - alpha_t keeps relative precision for tiny betas.
  double la = 0.0;
  for (double b : s.betas) {
    if (!(b > 0.0 && b < 1.0)) throw DomainError("make_schedule: beta must lie in (0,1)");
    la += std::log1p(-b);
    s.alphas.push_back(std::exp(la));
    s.sigma_q.push_back(std::sqrt(-std::expm1(la)));
  }
  set_reverse_variance(s, rv);
  s.validate();
  return s;
}

inline NoiseSchedule make_schedule(std::size_t T, const ScheduleScheme& scheme,
                                   ReverseVariance rv = ReverseVariance::posterior) {
  if (T < 1) throw DomainError("make_schedule: T must be >= 1");
  std::vector<double> b(T);
  for (std::size_t t = 0; t < T; ++t) {
    if (scheme.kind == ScheduleScheme::Kind::constant)
      b[t] = scheme.beta;
    else
      b[t] = T == 1 ? scheme.beta_lo
                    : scheme.beta_lo + (scheme.beta_hi - scheme.beta_lo) * static_cast<double>(t) / static_cast<double>(T - 1);
  }
  return schedule_from_betas(std::move(b), rv);
}

/// z_t = sqrt(alpha_t) x + sigma_q,t eps.
inline std::vector<double> forward_sample(std::span<const double> x, std::size_t t, const NoiseSchedule& s, Rng& rng) {
  if (t < 1 || t > s.T) throw DomainError("forward_sample: t out of range");
  const double a = std::sqrt(s.alpha(t)), q = s.sq(t);
  std::vector<double> z(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) z[i] = a * x[i] + q * rng.normal();
  return z;
}

/// levels[t] is z_t for t = 0..T, with z_0 = x.
struct Trajectory {
  std::vector<std::vector<double>> levels;
};

/// m_z independent Markov chains z_t = sqrt(1 - beta_t) z_{t-1} + sqrt(beta_t) W_t.
inline std::vector<Trajectory> forward_chain(std::span<const double> x, const NoiseSchedule& s, Rng& rng,
                                             std::size_t m_z = 1) {
  if (m_z < 1) throw DomainError("forward_chain: m_z must be >= 1");
  std::vector<Trajectory> out(m_z);
  for (auto& tr : out) {
    tr.levels.reserve(s.T + 1);
    tr.levels.emplace_back(x.begin(), x.end());
    for (std::size_t t = 1; t <= s.T; ++t) {
      const double keep = std::sqrt(1.0 - s.beta(t)), noise = std::sqrt(s.beta(t));
      std::vector<double> z(x.size());
      const auto& prev = tr.levels.back();
      for (std::size_t i = 0; i < z.size(); ++i) z[i] = keep * prev[i] + noise * rng.normal();
      tr.levels.push_back(std::move(z));
    }
  }
  return out;
}

/// Coefficients of the forward posterior mean E[z_{t-1} | z_t, x] = A z_t + B x.
inline std::pair<double, double> posterior_coefficients(const NoiseSchedule& s, std::size_t t) {
  if (t < 2 || t > s.T) throw DomainError("bayes_predictor: t must satisfy 2 <= t <= T");
  const double ab = s.alpha(t), ap = s.alpha(t - 1), b = s.beta(t);
  return {(1.0 - ap) * std::sqrt(1.0 - b) / (1.0 - ab), std::sqrt(ap) * b / (1.0 - ab)};
}

/// Posterior-mean reverse target A_t z + B_t E[x | z_t = z].
inline std::vector<double> bayes_predictor(const Q0Spec& q0, const NoiseSchedule& s, std::size_t t,
                                           std::span<const double> z) {
  const auto [A, B] = posterior_coefficients(s, t);
  auto m = posterior_mean(q0, s.alpha(t), z);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = A * z[i] + B * m[i];
  return m;
}

struct DiffusionModel {
  NoiseSchedule schedule;
  std::vector<SignReluNet> denoisers;     // denoisers[t-1] is phi_t
  std::optional<double> output_radius;    // bounded-output projection, if set

  std::size_t dim() const { return denoisers.empty() ? 0 : denoisers.front().input_dim(); }

  void validate() const {
    schedule.validate();
    if (denoisers.size() != schedule.T) throw ShapeError("DiffusionModel: need one denoiser per step");
    for (const auto& n : denoisers)
      if (n.input_dim() != dim() || n.output_dim() != dim())
        throw ShapeError("DiffusionModel: denoisers must map R^d to R^d");
  }

  std::vector<double> apply(std::size_t t, std::span<const double> z) const {
    return forward(denoisers.at(t - 1), z, output_radius);
  }
};

/// One training point x with its m_z trajectories.
struct DdpmItem {
  std::vector<double> x;
  std::vector<Trajectory> trajectories;
};

/// Empirical reverse-step objective: per item, the mean over trajectories of
///   |x - phi_1(z_1)|^2 / (2 sp_1^2) + sum_{t>=2} |z_{t-1} - phi_t(z_t)|^2 / (2 sp_t^2),
/// averaged over items.
inline double ddpm_loss(const DiffusionModel& model, std::span<const DdpmItem> batch) {
  if (batch.empty()) throw ShapeError("ddpm_loss: empty batch");
  const auto& s = model.schedule;
  double total = 0.0;
  for (const auto& item : batch) {
    if (item.trajectories.empty()) throw ShapeError("ddpm_loss: item without trajectories");
    double per = 0.0;
    for (const auto& tr : item.trajectories) {
      if (tr.levels.size() != s.T + 1) throw ShapeError("ddpm_loss: trajectory is missing levels");
      for (std::size_t t = 1; t <= s.T; ++t) {
        const auto out = model.apply(t, tr.levels[t]);
        const auto& target = t == 1 ? item.x : tr.levels[t - 1];
        double r2 = 0.0;
        for (std::size_t i = 0; i < out.size(); ++i) r2 += (target[i] - out[i]) * (target[i] - out[i]);
        per += r2 / (2.0 * s.sp(t) * s.sp(t));
      }
    }
    total += per / static_cast<double>(item.trajectories.size());
  }
  return total / static_cast<double>(batch.size());
}

/// m i.i.d. draws from q0, each with m_z forward chains. Streams are split per
/// item so the data does not depend on evaluation order.
inline std::vector<DdpmItem> make_ddpm_data(const Q0Spec& q0, const NoiseSchedule& s, std::size_t m,
                                            std::size_t m_z, const Rng& root) {
  if (m < 1) throw DomainError("train_ddpm: m must be >= 1");
  std::vector<DdpmItem> data(m);
  for (std::size_t i = 0; i < m; ++i) {
    Rng rx = root.derive("x", i), rz = root.derive("z", i);
    data[i].x = q0_sample(q0, rx);
    data[i].trajectories = forward_chain(data[i].x, s, rz, m_z);
  }
  return data;
}

/// Regression pairs (z_t, target) for step t.
inline std::vector<Sample> step_samples(std::span<const DdpmItem> data, std::size_t t) {
  std::vector<Sample> out;
  for (const auto& item : data)
    for (const auto& tr : item.trajectories)
      out.push_back({tr.levels[t], t == 1 ? item.x : tr.levels[t - 1]});
  return out;
}

struct DdpmTrainConfig {
  TrainConfig train;                    // per-step optimizer settings
  std::vector<std::size_t> hidden = {32};  // hidden widths of each phi_t
  double alpha = 1.0;                   // SignReLU alpha
  std::size_t renoise_rounds = 0;       // 0: trajectories frozen; k: redrawn k times
  double epochs = 0.0;                  // > 0: steps = ceil(epochs * m * m_z / batch_size), overriding train.steps
  std::size_t jobs = 1;
};

struct DdpmTrainResult {
  DiffusionModel model;
  std::vector<std::vector<double>> loss_traces;  // per t, unweighted mini-batch MSE
};

/// Trains one independent net per step on its quadratic term of ddpm_loss.
/// The 1/(2 sp_t^2) weights are constant per step, so each net minimizes plain
/// squared error.
inline DdpmTrainResult train_ddpm(const Q0Spec& q0, const NoiseSchedule& s, std::size_t m, std::size_t m_z,
                                  const DdpmTrainConfig& cfg) {
  s.validate();
  if (m < 1) throw DomainError("train_ddpm: m must be >= 1");
  if (m_z < 1) throw DomainError("train_ddpm: m_z must be >= 1");
  cfg.train.validate();
  const Rng root(cfg.train.seed);
  const std::size_t d = q0.dim;
  std::vector<std::size_t> sizes{d};
  sizes.insert(sizes.end(), cfg.hidden.begin(), cfg.hidden.end());
  sizes.push_back(d);

  DdpmTrainResult res;
  res.model.schedule = s;
  res.model.denoisers.resize(s.T);
  res.loss_traces.resize(s.T);
  if (cfg.epochs < 0.0) throw DomainError("train_ddpm: epochs must be nonnegative");
  std::size_t total_steps = cfg.train.steps;
  if (cfg.epochs > 0.0)
    total_steps = static_cast<std::size_t>(
        std::ceil(cfg.epochs * static_cast<double>(m * m_z) / static_cast<double>(cfg.train.batch_size)));
  const std::size_t rounds = std::max<std::size_t>(1, cfg.renoise_rounds);
  std::vector<std::vector<DdpmItem>> data(rounds);
  for (std::size_t r = 0; r < rounds; ++r) data[r] = make_ddpm_data(q0, s, m, m_z, root.derive("data", r));

  parallel_for(s.T, cfg.jobs, [&](std::size_t ti) {
    const std::size_t t = ti + 1;
    SignReluNet net = init_net(sizes, cfg.alpha, root.derive("init", t));
    std::vector<double> trace;
    for (std::size_t r = 0; r < rounds; ++r) {
      TrainConfig tc = cfg.train;
      tc.seed = root.derive("sgd", t, r).next_u64();
      tc.steps = total_steps / rounds + (r < total_steps % rounds ? 1 : 0);
      const auto samples = step_samples(data[r], t);
      auto out = train(std::move(net), SquaredLoss{}, samples, tc);
      net = std::move(out.net);
      trace.insert(trace.end(), out.loss_trace.begin(), out.loss_trace.end());
    }
    res.model.denoisers[ti] = std::move(net);
    res.loss_traces[ti] = std::move(trace);
  });
  return res;
}

struct BackwardOptions {
  bool deterministic = false;   // drop the Gaussian transition noise
  double reset_threshold = 2.0; // outputs with max-norm >= this are reset to 0
  std::size_t jobs = 1;
};

/// Runs the reverse chain from z at level `start` down to level 0.
inline std::vector<double> backward_from(const DiffusionModel& model, std::size_t start, std::vector<double> z,
                                         Rng& rng, const BackwardOptions& opt = {}) {
  for (std::size_t t = start; t >= 1; --t) {
    z = model.apply(t, z);
    if (!opt.deterministic)
      for (double& v : z) v += model.schedule.sp(t) * rng.normal();
  }
  double mx = 0.0;
  for (double v : z) mx = std::max(mx, std::abs(v));
  if (!(mx < opt.reset_threshold)) std::fill(z.begin(), z.end(), 0.0);
  return z;
}

/// n samples of z_0, starting from z_T ~ N(0, I).
inline std::vector<std::vector<double>> backward_sample(const DiffusionModel& model, std::size_t n, const Rng& root,
                                                        const BackwardOptions& opt = {}) {
  model.validate();
  std::vector<std::vector<double>> out(n);
  const std::size_t d = model.dim();
  parallel_for(n, opt.jobs, [&](std::size_t i) {
    Rng r = root.derive("backward", i);
    std::vector<double> z(d);
    for (double& v : z) v = r.normal();
    out[i] = backward_from(model, model.schedule.T, std::move(z), r, opt);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: a schedule block followed by one serialized net per step.

inline void write_checkpoint(std::ostream& os, const DiffusionModel& model) {
  const auto& s = model.schedule;
  os << "signrelu-ddpm 1\nT " << s.T << "\nbetas";
  for (double b : s.betas) os << ' ' << format_double(b);
  os << "\nsigma_p";
  for (double v : s.sigma_p) os << ' ' << format_double(v);
  os << "\noutput_radius " << (model.output_radius ? format_double(*model.output_radius) : std::string("none")) << '\n';
  for (const auto& n : model.denoisers) write_net(os, n);
}

/// Leading lines starting with '#' are metadata and skipped.
inline DiffusionModel read_checkpoint(std::istream& is) {
  while (is >> std::ws && is.peek() == '#') is.ignore(std::numeric_limits<std::streamsize>::max(), '\n');
  auto tok = [&](const char* what) { return detail::next_token(is, what); };
  if (tok("header") != "signrelu-ddpm" || tok("version") != "1") throw FileError("read_checkpoint: bad header");
  if (tok("T") != "T") throw FileError("read_checkpoint: expected T");
  const auto T = static_cast<std::size_t>(parse_double(tok("T value")));
  if (tok("betas") != "betas") throw FileError("read_checkpoint: expected betas");
  std::vector<double> betas(T), sp(T);
  for (auto& b : betas) b = parse_double(tok("beta"));
  if (tok("sigma_p") != "sigma_p") throw FileError("read_checkpoint: expected sigma_p");
  for (auto& v : sp) v = parse_double(tok("sigma_p"));
  DiffusionModel m;
  m.schedule = schedule_from_betas(betas);
  m.schedule.sigma_p = sp;
  if (tok("output_radius") != "output_radius") throw FileError("read_checkpoint: expected output_radius");
  const auto r = tok("radius");
  if (r != "none") m.output_radius = parse_double(r);
  for (std::size_t t = 0; t < T; ++t) m.denoisers.push_back(read_net(is));
  m.validate();
  return m;
}

inline void save_checkpoint(const std::string& path, const DiffusionModel& model) {
  std::ofstream os(path);
  if (!os) throw FileError("save_checkpoint: cannot open " + path);
  write_checkpoint(os, model);
}

inline DiffusionModel load_checkpoint(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw FileError("load_checkpoint: cannot open " + path);
  return read_checkpoint(is);
}

// ---------------------------------------------------------------------------
// Experiments on the forward process.

struct ConcentrationResult {
  double radius = 0.0;
  double empirical = 0.0;  // fraction with |Z_t| <= radius
  double stderr_ = 0.0;
  double bound = 0.0;      // 1 - exp(-xi)
  bool applicable = false; // alpha_t * max|x|^2 <= 1 - alpha_t, which the bound needs
  bool holds() const { return empirical >= bound - 3.0 * stderr_; }
};

/// Checks P(|Z_t| <= sqrt(1 - alpha_t)(sqrt(2 xi) + sqrt(d) + 1)) >= 1 - e^-xi
/// by Monte Carlo with x ~ q0.
inline ConcentrationResult concentration_check(const Q0Spec& q0, const NoiseSchedule& s, std::size_t t, double xi,
                                               std::size_t n, const Rng& root) {
  if (!(xi > 0.0)) throw DomainError("concentration_check: xi must be positive");
  const double d = static_cast<double>(q0.dim), a = s.alpha(t);
  ConcentrationResult r;
  r.radius = std::sqrt(1.0 - a) * (std::sqrt(2.0 * xi) + std::sqrt(d) + 1.0);
  r.bound = 1.0 - std::exp(-xi);
  r.applicable = a * d <= 1.0 - a;
  Rng rng = root.derive("concentration", t);
  std::size_t hits = 0;
  for (std::size_t k = 0; k < n; ++k) {
    const auto x = q0_sample(q0, rng);
    const auto z = forward_sample(x, t, s, rng);
    double n2 = 0.0;
    for (double v : z) n2 += v * v;
    if (std::sqrt(n2) <= r.radius) ++hits;
  }
  r.empirical = static_cast<double>(hits) / static_cast<double>(n);
  r.stderr_ = std::sqrt(std::max(r.empirical * (1.0 - r.empirical), 1.0 / static_cast<double>(n)) / static_cast<double>(n));
  return r;
}

struct VarianceScaling {
  std::vector<std::size_t> m_z;
  std::vector<double> variance;
  double slope = 0.0;
};

/// Variance of ddpm_loss across independent trajectory redraws at fixed x_i,
/// for each m_z, with the log-log slope of variance against m_z.
inline VarianceScaling loss_variance_vs_mz(const DiffusionModel& model, std::span<const std::vector<double>> xs,
                                           std::span<const std::size_t> mz_list, std::size_t repeats,
                                           const Rng& root, std::size_t jobs = 1) {
  if (repeats < 2) throw DomainError("loss_variance_vs_mz: need >= 2 repeats");
  VarianceScaling out;
  for (std::size_t mz : mz_list) {
    std::vector<double> losses(repeats);
    parallel_for(repeats, jobs, [&](std::size_t r) {
      std::vector<DdpmItem> batch(xs.size());
      for (std::size_t i = 0; i < xs.size(); ++i) {
        Rng rng = root.derive("mz", mz, r, i);
        batch[i].x = xs[i];
        batch[i].trajectories = forward_chain(xs[i], model.schedule, rng, mz);
      }
      losses[r] = ddpm_loss(model, batch);
    });
    double mean = 0.0;
    for (double v : losses) mean += v;
    mean /= static_cast<double>(repeats);
    double var = 0.0;
    for (double v : losses) var += (v - mean) * (v - mean);
    out.m_z.push_back(mz);
    out.variance.push_back(var / static_cast<double>(repeats - 1));
  }
  const std::vector<double> mz(out.m_z.begin(), out.m_z.end());
  out.slope = loglog_slope(mz, out.variance);
  return out;
}

}  // namespace signrelu
