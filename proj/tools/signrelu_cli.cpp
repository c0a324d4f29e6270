// Experiment entry points: division-gate certification, approximation-rate
// sweeps, DDPM train/sample/eval, bound tables and the risk decomposition.
//
// Exit codes: 0 success, 1 assertion failed, 2 config or usage error,
// 3 file error, 4 other runtime error.

#include <CLI11.hpp>
#include <json.hpp>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "signrelu/signrelu.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace signrelu;

namespace {

constexpr int kOk = 0, kAssert = 1, kConfig = 2, kFile = 3, kRuntime = 4;

// ---------------------------------------------------------------------------
// Configuration: fixed sections and keys with defaults; anything else is an error.

using Section = std::map<std::string, std::string>;
using Schema = std::map<std::string, Section>;

const Schema& schema() {
  static const Schema s = {
      {"global", {{"seed", "0"}, {"out", "out"}, {"jobs", "1"}}},
      {"gate", {{"c", "0.1"}, {"C", "10"}, {"tol", "1e-6"}, {"grid", "200"}, {"n_random", "10000"}}},
      {"rate",
       {{"kernels", "exp_neg"},
        {"dims", "1"},
        {"n_list", "64,128,256,512,1024"},
        {"trials", "20"},
        {"threshold", "-0.85"}}},
      {"ddpm",
       {{"family", "gaussian_mixture"},
        {"dim", "1"},
        {"mean", "0"},
        {"sd", "0.3"},
        {"weights", "0.5,0.5"},
        {"means", "-0.4;0.5"},
        {"sds", "0.2,0.25"},
        {"T", "5"},
        {"schedule", "linear"},
        {"beta_lo", "0.1"},
        {"beta_hi", "0.6"},
        {"reverse_variance", "posterior"},
        {"width", "32"},
        {"hidden_layers", "1"},
        {"alpha", "1"},
        {"m", "2000"},
        {"m_z", "1"},
        {"steps", "2000"},
        {"epochs", "40"},
        {"step_size", "0.01"},
        {"final_step_size", "1e-4"},
        {"batch_size", "32"},
        {"momentum", "0.9"},
        {"renoise_rounds", "0"},
        {"checkpoint", ""},
        {"n_samples", "10000"},
        {"deterministic", "false"},
        {"samples", ""},
        {"kl_method", "quadrature_kde"},
        {"bandwidth_factor", "1"},
        {"mc_n", "2000"},
        {"delta", "0.05"},
        {"M", "2"}}},
      {"bounds",
       {{"n_list", "10"},
        {"d_list", "1"},
        {"T_list", "5"},
        {"M_list", "2"},
        {"m_list", "1000000"},
        {"delta_list", "0.36787944117144233"},
        {"alpha_T_list", "0.01"},
        {"eps_list", "0.1"},
        {"xi_list", "4"},
        {"beta", "0.1"}}},
      {"decompose", {{"widths", "16,64"}, {"m_values", "500,5000"}, {"seeds", "1,2,3"}, {"n_generated", "10000"}}},
  };
  return s;
}

class Config {
 public:
  Config() : values_(schema()) {}

  void load(const std::string& path) {
    if (!fs::exists(path)) throw FileError("config file not found: " + path);
    boost::property_tree::ptree tree;
    try {
      boost::property_tree::ini_parser::read_ini(path, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
      throw ConfigError(std::string("config parse error: ") + e.what());
    }
    for (const auto& [sec, body] : tree) {
      auto it = values_.find(sec);
      if (it == values_.end()) throw ConfigError("unknown config section [" + sec + "]");
      if (body.empty() && !body.data().empty()) throw ConfigError("config key outside a section: " + sec);
      for (const auto& [key, val] : body) {
        if (!it->second.count(key)) throw ConfigError("unknown config key " + sec + "." + key);
        it->second[key] = val.get_value<std::string>();
      }
    }
  }

  void set(const std::string& sec, const std::string& key, const std::string& v) { values_.at(sec).at(key) = v; }
  const std::string& str(const std::string& sec, const std::string& key) const { return values_.at(sec).at(key); }

  double num(const std::string& sec, const std::string& key) const { return to_double(sec + "." + key, str(sec, key)); }

  std::size_t count(const std::string& sec, const std::string& key) const {
    return to_count(sec + "." + key, str(sec, key));
  }

  bool flag(const std::string& sec, const std::string& key) const {
    const auto& v = str(sec, key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError(sec + "." + key + ": expected true or false");
  }

  std::vector<std::string> words(const std::string& sec, const std::string& key, char sep = ',') const {
    std::vector<std::string> out;
    std::stringstream ss(str(sec, key));
    std::string item;
    while (std::getline(ss, item, sep)) {
      const auto a = item.find_first_not_of(" \t"), b = item.find_last_not_of(" \t");
      if (a != std::string::npos) out.push_back(item.substr(a, b - a + 1));
    }
    return out;
  }

  std::vector<double> nums(const std::string& sec, const std::string& key) const {
    std::vector<double> out;
    for (const auto& w : words(sec, key)) out.push_back(to_double(sec + "." + key, w));
    return out;
  }

  std::vector<std::size_t> counts(const std::string& sec, const std::string& key) const {
    std::vector<std::size_t> out;
    for (const auto& w : words(sec, key)) out.push_back(to_count(sec + "." + key, w));
    return out;
  }

  /// Hash of every setting that can change data outputs (out and jobs excluded).
  std::string hash() const {
    std::string canon;
    for (const auto& [sec, body] : values_)
      for (const auto& [key, v] : body) {
        if (sec == "global" && (key == "out" || key == "jobs")) continue;
        canon += sec + "." + key + "=" + v + "\n";
      }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << detail::fnv1a(canon);
    return os.str();
  }

  std::uint64_t seed() const {
    try {
      std::size_t pos = 0;
      const auto v = std::stoull(str("global", "seed"), &pos);
      if (pos != str("global", "seed").size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("global.seed: expected an unsigned integer");
    }
  }

 private:
  static double to_double(const std::string& what, const std::string& s) {
    try {
      return parse_double(s);
    } catch (const FileError&) {
      throw ConfigError(what + ": expected a number, got '" + s + "'");
    }
  }
  static std::size_t to_count(const std::string& what, const std::string& s) {
    const double v = to_double(what, s);
    if (!(v >= 0.0) || v != std::floor(v) || v > 1e15) throw ConfigError(what + ": expected a nonnegative integer");
    return static_cast<std::size_t>(v);
  }

  Schema values_;
};

// ---------------------------------------------------------------------------
// Output helpers

struct Run {
  Config cfg;
  std::string command;
  fs::path out;
  std::size_t jobs = 1;
  std::uint64_t seed = 0;
  std::string hash;

  std::string tag() const { return "# seed=" + std::to_string(seed) + ", config_hash=" + hash + "\n"; }

  std::ofstream open(const std::string& name) const {
    std::ofstream os(out / name, std::ios::binary);
    if (!os) throw FileError("cannot write " + (out / name).string());
    return os;
  }

  void write_json(const std::string& name, json body) const {
    body["seed"] = seed;
    body["config_hash"] = hash;
    body["command"] = command;
    auto os = open(name);
    os << body.dump(2) << '\n';
  }
};

json bound_json(const BoundReport& b) {
  json j;
  j["name"] = b.name;
  j["inputs"] = b.inputs;
  j["value"] = b.value;
  if (!b.recommended.empty()) j["recommended"] = b.recommended;
  return j;
}

// A non-finite double would make nlohmann emit null; keep such values readable.
json num_or_string(double v) {
  if (std::isfinite(v)) return v;
  return std::isnan(v) ? "nan" : (v > 0 ? "inf" : "-inf");
}

// ---------------------------------------------------------------------------
// Shared builders

Q0Spec build_q0(const Config& c) {
  const auto fam = c.str("ddpm", "family");
  if (fam == "uniform") return make_uniform_q0(c.count("ddpm", "dim"));
  if (fam == "truncated_gaussian") {
    auto mean = c.nums("ddpm", "mean");
    if (mean.size() != c.count("ddpm", "dim")) throw ConfigError("ddpm.mean must have ddpm.dim entries");
    return make_truncated_gaussian(mean, c.num("ddpm", "sd"));
  }
  if (fam == "gaussian_mixture") {
    const auto w = c.nums("ddpm", "weights");
    const auto sds = c.nums("ddpm", "sds");
    const auto ms = c.words("ddpm", "means", ';');
    if (w.size() != sds.size() || w.size() != ms.size())
      throw ConfigError("ddpm.weights, ddpm.means and ddpm.sds must have one entry per component");
    std::vector<Q0Component> comps;
    for (std::size_t k = 0; k < w.size(); ++k) {
      Q0Component q{w[k], {}, sds[k]};
      std::stringstream ss(ms[k]);
      std::string item;
      while (std::getline(ss, item, ','))
        try {
          q.mean.push_back(parse_double(item));
        } catch (const FileError&) {
          throw ConfigError("ddpm.means: bad number '" + item + "'");
        }
      if (q.mean.size() != c.count("ddpm", "dim")) throw ConfigError("ddpm.means: each mean needs ddpm.dim entries");
      comps.push_back(std::move(q));
    }
    return make_gaussian_mixture(std::move(comps));
  }
  throw ConfigError("ddpm.family must be uniform, truncated_gaussian or gaussian_mixture");
}

NoiseSchedule build_schedule(const Config& c) {
  const auto T = c.count("ddpm", "T");
  const auto kind = c.str("ddpm", "schedule");
  const auto rvs = c.str("ddpm", "reverse_variance");
  if (rvs != "posterior" && rvs != "beta") throw ConfigError("ddpm.reverse_variance must be posterior or beta");
  const auto rv = rvs == "posterior" ? ReverseVariance::posterior : ReverseVariance::beta;
  if (kind == "constant") return make_schedule(T, ScheduleScheme::constant(c.num("ddpm", "beta_lo")), rv);
  if (kind == "linear")
    return make_schedule(T, ScheduleScheme::linear(c.num("ddpm", "beta_lo"), c.num("ddpm", "beta_hi")), rv);
  throw ConfigError("ddpm.schedule must be constant or linear");
}

DdpmTrainConfig build_train(const Config& c, std::uint64_t seed, std::size_t jobs) {
  DdpmTrainConfig t;
  t.train.steps = c.count("ddpm", "steps");
  t.train.step_size = c.num("ddpm", "step_size");
  t.train.batch_size = c.count("ddpm", "batch_size");
  t.train.momentum = c.num("ddpm", "momentum");
  if (!c.str("ddpm", "final_step_size").empty()) t.train.final_step_size = c.num("ddpm", "final_step_size");
  t.epochs = c.num("ddpm", "epochs");
  t.train.seed = seed;
  t.hidden.assign(c.count("ddpm", "hidden_layers"), c.count("ddpm", "width"));
  t.alpha = c.num("ddpm", "alpha");
  t.renoise_rounds = c.count("ddpm", "renoise_rounds");
  t.jobs = jobs;
  t.train.validate();
  return t;
}

KlConfig build_kl(const Config& c, std::uint64_t seed, std::size_t jobs) {
  KlConfig k;
  const auto m = c.str("ddpm", "kl_method");
  if (m == "quadrature_kde")
    k.method = KLReport::Method::quadrature_kde;
  else if (m == "mc_plugin")
    k.method = KLReport::Method::mc_plugin;
  else
    throw ConfigError("ddpm.kl_method must be quadrature_kde or mc_plugin");
  k.bandwidth_factor = c.num("ddpm", "bandwidth_factor");
  k.seed = Rng(seed).derive("kl").next_u64();
  k.jobs = jobs;
  return k;
}

fs::path checkpoint_path(const Run& r) {
  const auto& p = r.cfg.str("ddpm", "checkpoint");
  return p.empty() ? r.out / "model.ckpt" : fs::path(p);
}

fs::path samples_path(const Run& r) {
  const auto& p = r.cfg.str("ddpm", "samples");
  return p.empty() ? r.out / "samples.csv" : fs::path(p);
}

std::vector<std::vector<double>> read_samples(const fs::path& p, std::size_t dim) {
  std::ifstream is(p);
  if (!is) throw FileError("samples file not found: " + p.string());
  std::vector<std::vector<double>> out;
  std::string line;
  bool header = true;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (header) {
      header = false;
      continue;
    }
    std::vector<double> x;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) x.push_back(parse_double(cell));
    if (x.size() != dim) throw FileError("samples file: row has wrong dimension");
    out.push_back(std::move(x));
  }
  return out;
}

json kl_json(const KLReport& r) {
  return {{"estimate", r.estimate},
          {"method", method_name(r.method)},
          {"stderr", r.stderr_},
          {"n_samples", r.n_samples},
          {"bandwidth", r.bandwidth}};
}

// ---------------------------------------------------------------------------
// Commands

int cmd_verify_gate(const Run& r) {
  DivisionGateSpec spec;
  spec.c = r.cfg.num("gate", "c");
  spec.C = r.cfg.num("gate", "C");
  spec.tol = r.cfg.num("gate", "tol");
  try {
    spec.validate();
  } catch (const DomainError& e) {
    throw ConfigError(e.what());
  }
  const auto grid = r.cfg.count("gate", "grid");
  if (grid < 2) throw ConfigError("gate.grid must be >= 2");
  // Build without the tolerance check so a failing run still writes its report.
  DivisionGateSpec build = spec;
  build.tol = std::numeric_limits<double>::infinity();
  const auto gate = division_gate(build);
  const auto cert = certify_gate(gate, spec, grid, r.cfg.count("gate", "n_random"), Rng(r.seed).derive("gate").next_u64());
  spec.achieved = {gate.depth(), gate.width(), gate.parameter_count(), cert.max_err};
  const bool pass = cert.max_err <= spec.tol;

  auto os = r.open("gate_grid.csv");
  os << r.tag();
  write_gate_csv(os, cert);
  const GateBudget budget;
  json j;
  j["c"] = spec.c;
  j["C"] = spec.C;
  j["tol"] = spec.tol;
  j["achieved"] = {{"depth", spec.achieved.depth},
                   {"width", spec.achieved.width},
                   {"params", spec.achieved.params},
                   {"max_err", cert.max_err}};
  j["budget"] = {{"depth", budget.depth}, {"width", budget.width}, {"params", budget.params}};
  j["within_budget"] = spec.within_budget(budget);
  j["worst"] = {{"x", cert.worst.x}, {"y", cert.worst.y}, {"abs_err", cert.worst.err}};
  j["passed"] = pass;
  r.write_json("gate_summary.json", j);
  std::cout << "verify-gate: max_err=" << cert.max_err << " depth=" << spec.achieved.depth
            << " width=" << spec.achieved.width << " params=" << spec.achieved.params << " (budget 6, 9, 71) "
            << (pass ? "PASS" : "FAIL") << "\n";
  if (!pass) std::cerr << "verify-gate: max error " << cert.max_err << " exceeds tol " << spec.tol << "\n";
  return pass ? kOk : kAssert;
}

int cmd_rate_sweep(const Run& r) {
  const auto kernels = r.cfg.words("rate", "kernels");
  const auto dims = r.cfg.counts("rate", "dims");
  const auto n_list = r.cfg.counts("rate", "n_list");
  const auto trials = r.cfg.count("rate", "trials");
  const double threshold = r.cfg.num("rate", "threshold");
  if (n_list.empty()) throw ConfigError("rate.n_list must not be empty");
  if (n_list.size() < 2) throw ConfigError("rate.n_list needs at least 2 values");
  if (kernels.empty() || dims.empty()) throw ConfigError("rate.kernels and rate.dims must not be empty");
  if (trials < 1) throw ConfigError("rate.trials must be >= 1");
  for (const auto& k : kernels) {
    try {
      (void)kernel(k);
    } catch (const DomainError& e) {
      throw ConfigError(e.what());
    }
  }
  for (auto d : dims)
    if (d < 1 || d > 3) throw ConfigError("rate.dims entries must be 1, 2 or 3");

  auto os = r.open("rate_sweep.csv");
  os << r.tag() << "kernel,dim,n,mean_err,std_err\n";
  json rows = json::array();
  bool pass = true;
  for (const auto& k : kernels)
    for (auto d : dims) {
      const auto f = make_sclass(d, {{k, identity_matrix(d)}}, [](std::span<const double>) { return 1.0; });
      const auto res = rate_sweep(f, n_list, trials, Rng(r.seed).derive("rate", d).derive(k).next_u64(), r.jobs);
      for (const auto& p : res.per_n)
        os << k << ',' << d << ',' << p.n << ',' << format_double(p.mean_err) << ',' << format_double(p.std_err) << '\n';
      const bool ok = res.slope_fitted && res.fitted_slope <= threshold;
      pass = pass && ok;
      rows.push_back({{"kernel", k},
                      {"dim", d},
                      {"fitted_slope", num_or_string(res.fitted_slope)},
                      {"target_slope", res.target_slope},
                      {"slope_fitted", res.slope_fitted},
                      {"noisy", res.noisy},
                      {"threshold", threshold},
                      {"passed", ok}});
      std::cout << "rate-sweep: " << k << " d=" << d << " slope=" << res.fitted_slope << " target=" << res.target_slope
                << (res.noisy ? " (noisy: single trial)" : "") << (ok ? " PASS" : " FAIL") << "\n";
    }
  r.write_json("rate_summary.json", {{"sweeps", rows}, {"passed", pass}, {"n_list", n_list}, {"trials", trials}});
  return pass ? kOk : kAssert;
}

int cmd_ddpm_train(const Run& r) {
  const auto q0 = build_q0(r.cfg);
  const auto s = build_schedule(r.cfg);
  const auto tc = build_train(r.cfg, Rng(r.seed).derive("train").next_u64(), r.jobs);
  const auto res = train_ddpm(q0, s, r.cfg.count("ddpm", "m"), r.cfg.count("ddpm", "m_z"), tc);
  {
    std::ofstream os(checkpoint_path(r), std::ios::binary);
    if (!os) throw FileError("cannot write checkpoint " + checkpoint_path(r).string());
    os << r.tag();
    write_checkpoint(os, res.model);
  }
  auto os = r.open("loss.csv");
  os << r.tag() << "t,step,loss\n";
  json finals = json::array();
  for (std::size_t t = 0; t < res.loss_traces.size(); ++t) {
    const auto& tr = res.loss_traces[t];
    for (std::size_t k = 0; k < tr.size(); ++k) os << t + 1 << ',' << k << ',' << format_double(tr[k]) << '\n';
    // Mean of the first and last tenth of the trace, for a quick trend read.
    const std::size_t w = std::max<std::size_t>(1, tr.size() / 10);
    double head = 0.0, tail = 0.0;
    for (std::size_t k = 0; k < std::min(w, tr.size()); ++k) {
      head += tr[k] / static_cast<double>(w);
      tail += tr[tr.size() - 1 - k] / static_cast<double>(w);
    }
    finals.push_back({{"t", t + 1}, {"initial_loss", head}, {"final_loss", tail}});
  }
  r.write_json("train_summary.json", {{"steps", finals}, {"checkpoint", checkpoint_path(r).filename().string()}});
  std::cout << "ddpm-train: wrote " << checkpoint_path(r).string() << "\n";
  return kOk;
}

int cmd_ddpm_sample(const Run& r) {
  const auto model = load_checkpoint(checkpoint_path(r).string());
  BackwardOptions opt;
  opt.deterministic = r.cfg.flag("ddpm", "deterministic");
  opt.jobs = r.jobs;
  const auto n = r.cfg.count("ddpm", "n_samples");
  if (n < 1) throw ConfigError("ddpm.n_samples must be >= 1");
  const auto xs = backward_sample(model, n, Rng(r.seed).derive("sample"), opt);
  std::ofstream os(samples_path(r), std::ios::binary);
  if (!os) throw FileError("cannot write " + samples_path(r).string());
  os << r.tag();
  for (std::size_t i = 0; i < model.dim(); ++i) os << (i ? "," : "") << "x" << i + 1;
  os << '\n';
  std::vector<double> mean(model.dim(), 0.0);
  for (const auto& x : xs) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      os << (i ? "," : "") << format_double(x[i]);
      mean[i] += x[i] / static_cast<double>(n);
    }
    os << '\n';
  }
  r.write_json("sample_summary.json", {{"n_samples", n}, {"mean", mean}});
  std::cout << "ddpm-sample: wrote " << n << " samples\n";
  return kOk;
}

int cmd_ddpm_eval(const Run& r) {
  const auto model = load_checkpoint(checkpoint_path(r).string());
  const auto q0 = build_q0(r.cfg);
  if (q0.dim != model.dim()) throw ConfigError("ddpm.dim does not match the checkpoint");
  const auto samples = read_samples(samples_path(r), q0.dim);
  if (samples.empty()) throw ConfigError("no samples to evaluate; run ddpm-sample first");
  const auto kl = kl_estimate(q0, samples, build_kl(r.cfg, r.seed, r.jobs));

  // Terminal KL at the origin and at a cube corner.
  json term = json::array();
  bool holds = true;
  const std::vector<std::vector<double>> points{std::vector<double>(q0.dim, 0.0), std::vector<double>(q0.dim, 1.0)};
  for (std::size_t k = 0; k < points.size(); ++k) {
    const auto t = kl_terminal_check(q0, model.schedule, points[k], r.cfg.count("ddpm", "mc_n"),
                                     Rng(r.seed).derive("terminal", k));
    holds = holds && t.holds();
    term.push_back({{"x", points[k]}, {"estimate", t.estimate}, {"stderr", t.stderr_}, {"bound", t.bound}, {"holds", t.holds()}});
  }
  const double n = static_cast<double>(std::max<std::size_t>(2, r.cfg.count("ddpm", "width")));
  const double m = static_cast<double>(r.cfg.count("ddpm", "m")), M = r.cfg.num("ddpm", "M");
  const double delta = r.cfg.num("ddpm", "delta");
  const auto T = model.schedule.T;
  json bounds = json::array();
  if (M > 1.0) bounds.push_back(bound_json(bound_approx(n, q0.dim, T, M)));
  bounds.push_back(bound_json(bound_estimation(n, T, std::max(M, 1.0), m, delta)));
  bounds.push_back(bound_json(bound_excess(n, T, q0.dim, delta)));
  r.write_json("eval.json", {{"kl", kl_json(kl)}, {"terminal_kl", term}, {"bounds", bounds}});
  std::cout << "ddpm-eval: KL=" << kl.estimate << " +- " << kl.stderr_ << ", terminal bound "
            << (holds ? "holds" : "VIOLATED") << "\n";
  return holds ? kOk : kAssert;
}

int cmd_bounds(const Run& r) {
  const auto& c = r.cfg;
  const auto ns = c.nums("bounds", "n_list"), Ms = c.nums("bounds", "M_list"), ms = c.nums("bounds", "m_list");
  const auto ds = c.counts("bounds", "d_list"), Ts = c.counts("bounds", "T_list");
  const auto deltas = c.nums("bounds", "delta_list"), aTs = c.nums("bounds", "alpha_T_list");
  const auto epss = c.nums("bounds", "eps_list"), xis = c.nums("bounds", "xi_list");
  json rows = json::array();
  try {
    for (double n : ns)
      for (auto d : ds)
        for (auto T : Ts) {
          for (double M : Ms)
            if (M > 1.0) rows.push_back(bound_json(bound_approx(n, d, T, M)));
          for (double dl : deltas) rows.push_back(bound_json(bound_excess(n, T, d, dl)));
        }
    for (double n : ns)
      for (auto T : Ts)
        for (double M : Ms)
          for (double m : ms)
            for (double dl : deltas) rows.push_back(bound_json(bound_estimation(n, T, M, m, dl)));
    for (auto d : ds)
      for (double a : aTs) rows.push_back(bound_json(terminal_kl_bound(d, a)));
    for (double n : ns)
      for (auto d : ds)
        for (double M : Ms)
          for (double eps : epss) {
            const std::vector<std::size_t> w{d, static_cast<std::size_t>(n), d};
            const std::vector<double> Mj{M, M};
            BoundReport b{"covering_log", {{"n", n}, {"d", double(d)}, {"M", M}, {"eps", eps}, {"L", 2.0}},
                          covering_bound(w, 2, Mj, eps, 1.0), {}};
            rows.push_back(bound_json(b));
          }
    for (auto T : Ts)
      for (auto d : ds)
        for (double M : Ms)
          for (double xi : xis) {
            const auto s = make_schedule(T, ScheduleScheme::constant(c.num("bounds", "beta")));
            const auto b = log_density_bounds(s, d, M, xi);
            json j{{"name", "log_density"},
                   {"inputs", {{"T", T}, {"d", d}, {"M", M}, {"xi", xi}, {"beta", c.num("bounds", "beta")}}},
                   {"R", b.R},
                   {"upper", b.upper},
                   {"lower", num_or_string(b.lower)},
                   {"B_tilde", b.B_tilde},
                   {"B_hat", num_or_string(b.B_hat)},
                   {"B_tilde_order", b.B_tilde_order},
                   {"B_hat_order", b.B_hat_order},
                   {"informative", b.informative}};
            rows.push_back(j);
          }
  } catch (const DomainError& e) {
    throw ConfigError(std::string("invalid bounds grid: ") + e.what());
  }
  r.write_json("bounds.json", {{"rows", rows}});
  std::cout << "bounds: " << rows.size() << " rows\n";
  return kOk;
}

int cmd_decompose(const Run& r) {
  const auto q0 = build_q0(r.cfg);
  DecompositionConfig dc;
  dc.widths = r.cfg.counts("decompose", "widths");
  dc.m_values = r.cfg.counts("decompose", "m_values");
  for (auto s : r.cfg.counts("decompose", "seeds")) dc.seeds.push_back(Rng(r.seed).derive("decompose", s).next_u64());
  if (dc.widths.empty() || dc.m_values.empty() || dc.seeds.empty())
    throw ConfigError("decompose.widths, m_values and seeds must be nonempty");
  dc.schedule = build_schedule(r.cfg);
  dc.train = build_train(r.cfg, 0, 1);
  dc.m_z = r.cfg.count("ddpm", "m_z");
  dc.n_generated = r.cfg.count("decompose", "n_generated");
  dc.delta = r.cfg.num("ddpm", "delta");
  dc.kl = build_kl(r.cfg, r.seed, 1);
  dc.jobs = r.jobs;
  const auto rep = risk_decomposition_experiment(q0, dc);

  auto os = r.open("decompose.csv");
  os << r.tag() << "n,m,kl_median";
  for (std::size_t s = 0; s < dc.seeds.size(); ++s) os << ",kl_seed" << s + 1;
  os << ",bound,ratio\n";
  json cells = json::array();
  for (const auto& cell : rep.cells) {
    os << cell.n << ',' << cell.m << ',' << format_double(cell.kl_median);
    for (double v : cell.kl) os << ',' << format_double(v);
    os << ',' << format_double(cell.bound.value) << ',' << format_double(cell.ratio) << '\n';
    cells.push_back({{"n", cell.n},
                     {"m", cell.m},
                     {"kl", cell.kl},
                     {"kl_median", cell.kl_median},
                     {"bound", bound_json(cell.bound)},
                     {"ratio", num_or_string(cell.ratio)}});
  }
  const auto lo = rep.at(dc.widths.front(), dc.m_values.front()).kl_median;
  const auto hi = rep.at(dc.widths.back(), dc.m_values.back()).kl_median;
  const bool trend = hi <= lo;
  r.write_json("decompose.json", {{"cells", cells},
                                  {"monotone_in_m", rep.monotone_in_m},
                                  {"monotone_in_n", rep.monotone_in_n},
                                  {"largest_cell_beats_smallest", trend}});
  std::cout << "decompose: KL(" << dc.widths.front() << "," << dc.m_values.front() << ")=" << lo << " KL("
            << dc.widths.back() << "," << dc.m_values.back() << ")=" << hi << (trend ? " PASS" : " FAIL") << "\n";
  return trend ? kOk : kAssert;
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SignReLU network and diffusion experiments"};
  app.require_subcommand(1);
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::size_t> jobs;
  app.add_option("--config", config_path, "INI config file");
  app.add_option("--seed", seed, "Root RNG seed (overrides global.seed)");
  app.add_option("--out", out, "Output directory (overrides global.out)");
  app.add_option("--jobs", jobs, "Worker threads (overrides global.jobs)");

  const std::map<std::string, std::pair<std::string, int (*)(const Run&)>> commands = {
      {"verify-gate", {"Certify the division gate", cmd_verify_gate}},
      {"rate-sweep", {"Approximation-rate sweep of Maurey-sampled networks", cmd_rate_sweep}},
      {"ddpm-train", {"Train a DDPM and write a checkpoint", cmd_ddpm_train}},
      {"ddpm-sample", {"Draw samples from a checkpoint", cmd_ddpm_sample}},
      {"ddpm-eval", {"KL and bound report for a checkpoint and its samples", cmd_ddpm_eval}},
      {"bounds", {"Tabulate the bound calculators over a grid", cmd_bounds}},
      {"decompose", {"Risk decomposition over width and sample size", cmd_decompose}},
  };
  for (const auto& [name, entry] : commands) app.add_subcommand(name, entry.first)->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    Run run;
    if (!config_path.empty()) run.cfg.load(config_path);
    if (seed) run.cfg.set("global", "seed", std::to_string(*seed));
    if (out) run.cfg.set("global", "out", *out);
    if (jobs) run.cfg.set("global", "jobs", std::to_string(*jobs));
    run.command = app.get_subcommands().front()->get_name();
    run.seed = run.cfg.seed();
    run.jobs = std::max<std::size_t>(1, run.cfg.count("global", "jobs"));
    run.hash = run.cfg.hash();
    run.out = run.cfg.str("global", "out");
    fs::create_directories(run.out);
    {
      std::ofstream meta(run.out / "run_meta.json");
      meta << json{{"command", run.command}, {"timestamp", utc_timestamp()}, {"seed", run.seed}, {"config_hash", run.hash}, {"jobs", run.jobs}}
                  .dump(2)
           << '\n';
    }
    return commands.at(run.command).second(run);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const FileError& e) {
    std::cerr << "file error: " << e.what() << "\n";
    return kFile;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "file error: " << e.what() << "\n";
    return kFile;
  } catch (const DomainError& e) {
    std::cerr << "invalid parameter: " << e.what() << "\n";
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
}
