#pragma once

// Command dispatch for the `lorentz` executable. Each command reads its whole
// configuration before computing, writes its artifacts into --out, and finishes with
// a manifest of the run.

#include "lorentz/io.hpp"
#include "lorentz/manifest.hpp"
#include "lorentz/markov.hpp"
#include "lorentz/microsim.hpp"
#include "lorentz/propagator.hpp"
#include "lorentz/suite.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace lorentz::cli {

namespace fs = std::filesystem;

struct Options {
  std::string config;                  // path of the configuration file
  std::optional<std::uint64_t> seed;   // overrides `seed` from the configuration
  unsigned threads = 1;
  std::string out;                     // run directory; for manifest-check, the directory to verify
};

inline const std::vector<std::string>& commands() {
  static const std::vector<std::string> c{"simulate", "estimate-kernel", "chain",         "propagate",
                                          "validate", "report",          "manifest-check"};
  return c;
}

// Sections read by each command besides the shared ones (top level, lattice, profile).
inline std::set<std::string> own_sections(const std::string& command) {
  if (command == "simulate") return {"micro", "lambda", "simulate"};
  if (command == "estimate-kernel") return {"micro", "estimate"};
  if (command == "chain") return {"kernel", "lambda", "chain"};
  if (command == "propagate") return {"kernel", "propagate"};
  if (command == "validate") return {"validate"};
  if (command == "report") return {"report"};
  return {};
}

inline const std::set<std::string>& known_sections() {
  static const std::set<std::string> s{"lattice", "profile", "micro",     "lambda",   "simulate", "estimate",
                                       "kernel",  "chain",   "propagate", "validate", "report"};
  return s;
}

/// Keys that this command should have consumed: top-level keys and keys of the
/// shared or own sections. Sections of other commands may share one file.
inline void check_unknown_keys(const Config& cfg, const std::string& command) {
  const auto own = own_sections(command);
  std::string bad;
  for (const auto& k : cfg.unused()) {
    const auto dot = k.find('.');
    const std::string sec = dot == std::string::npos ? "" : k.substr(0, dot);
    const bool foreign = !sec.empty() && known_sections().count(sec) && sec != "lattice" && sec != "profile" &&
                         !own.count(sec);
    if (!foreign) bad += (bad.empty() ? "" : ", ") + k;
  }
  if (!bad.empty()) throw config_error("UnknownKey", bad);
}

struct Run {
  std::string command;
  Config cfg;
  std::uint64_t seed = 1;
  unsigned threads = 1;
  fs::path out;
  Manifest manifest;

  void artifact(const std::string& name) { manifest.add_artifact(out, name); }

  std::ofstream open(const std::string& name) const {
    std::ofstream os(out / name, std::ios::binary);
    if (!os) throw config_error("OutputFile", "cannot write " + (out / name).string());
    return os;
  }
};

inline ScatteringProfile read_profile(Run& r) {
  const auto kind = r.cfg.str("profile.kind", "specular");
  if (kind == "specular") return ScatteringProfile::specular();
  if (kind == "table") {
    const auto path = r.cfg.str("profile.path");
    auto p = ScatteringProfile::load_csv(path);
    r.manifest.add_input(path);
    return p;
  }
  throw config_error("BadValue", "profile.kind: expected specular or table, got " + kind);
}

template <int D> MicroConfig<D> read_micro(Run& r, const ScatteringProfile& prof) {
  MicroConfig<D> m;
  m.lattice = build_lattice<D>(r.cfg.mat<D>("lattice.basis", Mat<D>::Identity()));
  m.profile = prof;
  m.rho = r.cfg.num("micro.rho");
  m.t_max = r.cfg.num("micro.t_max", 1e6);
  check_config(m);
  return m;
}

template <int D> DirectionDensity<D> read_lambda(const Config& c) {
  const auto kind = c.str("lambda.kind", "uniform");
  if (kind == "uniform") return DirectionDensity<D>::uniform();
  const Vec<D> axis = c.vec<D>("lambda.axis", basis_vector<D>(0));
  if (kind == "von_mises_fisher") return DirectionDensity<D>::von_mises_fisher(axis, c.num("lambda.param"));
  if (kind == "cap") return DirectionDensity<D>::cap(axis, c.num("lambda.param"));
  throw config_error("BadValue", "lambda.kind: expected uniform, von_mises_fisher or cap, got " + kind);
}

template <int D> std::shared_ptr<const KernelBackend<D>> read_kernel(Run& r) {
  const auto kind = r.cfg.str("kernel.kind", "exponential");
  if (kind == "exponential") return std::make_shared<ExponentialKernel<D>>();
  if (kind == "empirical") {
    const auto path = r.cfg.str("kernel.path");
    auto k = std::make_shared<EmpiricalKernel<D>>(load_kernel<D>(path));
    r.manifest.add_input(path);
    return k;
  }
  throw config_error("BadValue", "kernel.kind: expected exponential or empirical, got " + kind);
}

// ---------------------------------------------------------------------------

template <int D> int simulate(Run& r) {
  const auto prof = read_profile(r);
  const auto micro = read_micro<D>(r, prof);
  const auto lambda = read_lambda<D>(r.cfg);
  const Vec<D> q0 = r.cfg.vec<D>("simulate.q0");
  const std::optional<Vec<D>> v0 =
      r.cfg.has("simulate.v0") ? std::optional<Vec<D>>(r.cfg.vec<D>("simulate.v0").normalized()) : std::nullopt;
  const std::size_t n = r.cfg.count("simulate.collisions", 10);
  const std::size_t trajectories = r.cfg.count("simulate.trajectories", 1);
  check_unknown_keys(r.cfg, r.command);
  if (inside_some_ball(micro.lattice, q0, micro.rho)) throw config_error("BadInitialPoint", "simulate.q0 lies inside a scatterer");

  const auto blocks = parallel_blocks(trajectories, 64, r.threads, [&](std::size_t b, std::size_t e) {
    std::vector<CollisionChain<D>> part;
    for (std::size_t i = b; i < e; ++i) {
      Rng rng(r.seed, i);
      part.push_back(iterate_billiard<D>(micro, q0, v0 ? *v0 : lambda.sample(rng), n));
    }
    return part;
  });
  std::vector<CollisionChain<D>> chains;
  for (const auto& b : blocks) chains.insert(chains.end(), b.begin(), b.end());
  auto os = r.open("chains.csv");
  write_chain_dump<D>(os, chains);
  os.close();
  r.artifact("chains.csv");
  return 0;
}

template <int D> int estimate_kernel(Run& r) {
  const auto prof = read_profile(r);
  const auto micro = read_micro<D>(r, prof);
  const Vec<D> q0 = r.cfg.vec<D>("estimate.q0");
  EstimateOptions o;
  o.bins.xi_max = r.cfg.num("estimate.xi_max", o.bins.xi_max);
  o.bins.n_xi = static_cast<int>(r.cfg.count("estimate.n_xi", o.bins.n_xi));
  o.bins.n_w = static_cast<int>(r.cfg.count("estimate.n_w", o.bins.n_w));
  o.bins.n_z = static_cast<int>(r.cfg.count("estimate.n_z", o.bins.n_z));
  o.bins.n_c = static_cast<int>(r.cfg.count("estimate.n_c", o.bins.n_c));
  o.xi_cut = r.cfg.num("estimate.xi_cut", o.xi_cut);
  o.strict = r.cfg.flag("estimate.strict", false);
  o.seed = r.seed;
  o.threads = r.threads;
  const std::size_t rays = r.cfg.count("estimate.rays", 100000);
  const std::size_t offset_rays = r.cfg.count("estimate.offset_rays", 0);
  check_unknown_keys(r.cfg, r.command);
  const auto k = estimate_phi<D>(micro, q0, rays, offset_rays, o);
  save_kernel<D>(k, (r.out / "kernel.json").string());
  r.artifact("kernel.json");
  return 0;
}

template <int D> int chain(Run& r) {
  const auto prof = read_profile(r);
  const auto kernel = read_kernel<D>(r);
  const auto lambda = read_lambda<D>(r.cfg);
  const std::size_t count = r.cfg.count("chain.count", 100);
  const std::size_t segments = r.cfg.count("chain.segments", 10);
  const Vec<D> Q0 = r.cfg.vec<D>("chain.Q0", Vec<D>::Zero());
  const auto times = r.cfg.list("chain.path_times", {});
  const bool extended = r.cfg.flag("chain.extended", false);
  check_unknown_keys(r.cfg, r.command);
  if (segments == 0) throw config_error("BadValue", "chain.segments must be positive");
  for (std::size_t i = 1; i < times.size(); ++i)
    if (!(times[i] > times[i - 1])) throw config_error("BadTimeGrid", "chain.path_times must increase");
  if (!times.empty() && !(times.front() >= 0.0)) throw config_error("BadTimeGrid", "chain.path_times must be nonnegative");

  struct Sample {
    SegmentChain<D> chain;
    std::vector<PathRow<D>> rows;
  };
  const auto blocks = parallel_blocks(count, 64, r.threads, [&](std::size_t b, std::size_t e) {
    std::vector<Sample> part;
    for (std::size_t i = b; i < e; ++i) {
      Rng rng(r.seed, i);
      Sample s{sample_chain<D>(Q0, lambda, prof, *kernel, segments, rng), {}};
      if (!times.empty() && extended) {
        Rng xr(mix64(r.seed), i);
        PhaseLaw<D> law{Q0, 0.0, lambda};
        const auto init = sample_extended_initial<D>(law, prof, *kernel, xr);
        const auto states = simulate_xhat<D>(init, prof, *kernel, times, xr);
        for (std::size_t j = 0; j < times.size(); ++j) s.rows.push_back({i, times[j], states[j]});
      } else if (!times.empty()) {
        extend_past<D>(s.chain, lambda, prof, *kernel, times.back(), rng);
        for (double t : times) {
          const auto p = evaluate_path<D>(s.chain, t);
          s.rows.push_back({i, t, ExtendedState<D>{p.q, p.v, 0.0, p.v}});
        }
      }
      part.push_back(std::move(s));
    }
    return part;
  });
  std::vector<SegmentChain<D>> chains;
  std::vector<PathRow<D>> rows;
  for (const auto& b : blocks)
    for (const auto& s : b) {
      chains.push_back(s.chain);
      rows.insert(rows.end(), s.rows.begin(), s.rows.end());
    }
  auto os = r.open("segments.csv");
  write_segments<D>(os, chains);
  os.close();
  r.artifact("segments.csv");
  if (!times.empty()) {
    auto ps = r.open("path.csv");
    write_path_dump<D>(ps, rows, extended);
    ps.close();
    r.artifact("path.csv");
  }
  return 0;
}

template <int D> int propagate(Run& r) {
  const auto prof = read_profile(r);
  const auto kernel = read_kernel<D>(r);
  const auto f0_name = r.cfg.str("propagate.f0", "bump");
  const auto times = r.cfg.list("propagate.times", {0.5});
  const std::size_t points = r.cfg.count("propagate.points", 10);
  PropagatorOptions o;
  o.method = parse_method(r.cfg.str("propagate.method", "quadrature"));
  o.budget = r.cfg.count("propagate.budget", o.budget);
  o.mc_samples = r.cfg.count("propagate.mc_samples", o.mc_samples);
  o.seed = r.seed;
  const double eps = r.cfg.num("propagate.eps", 1e-12);
  const auto mode = r.cfg.str("propagate.mode", "fpk");
  check_unknown_keys(r.cfg, r.command);
  if (mode != "fpk" && mode != "density") throw config_error("BadValue", "propagate.mode: expected fpk or density");
  PhaseDensity<D> f0;
  if (f0_name == "bump")
    f0 = bump_density<D>(prof);
  else if (f0_name == "stationary")
    f0 = p_phase<D>(prof, kernel);
  else
    throw config_error("BadValue", "propagate.f0: expected bump or stationary, got " + f0_name);
  for (double t : times)
    if (!(t >= 0.0)) throw config_error("BadTime", "propagate.times must be nonnegative");

  const auto grid = phase_grid<D>(prof, static_cast<int>(points), r.seed);
  std::vector<nlohmann::json> records;
  bool ok = true;
  const std::string method = o.method == Method::Quadrature ? "quadrature" : "monte_carlo";
  for (double t : times) {
    if (mode == "fpk") {
      const auto res = fpk_residuals<D>(prof, kernel, f0, t, grid, eps, o);
      for (std::size_t i = 0; i < res.size(); ++i) {
        ok = ok && res[i].pass();
        records.push_back(tagged("residual", {{"point", i},
                                              {"t", t},
                                              {"value", res[i].value},
                                              {"tolerance", res[i].tolerance},
                                              {"derivative", res[i].derivative},
                                              {"generator", res[i].generator},
                                              {"order", res[i].order},
                                              {"method", method},
                                              {"budget", o.budget},
                                              {"pass", res[i].pass()}}));
      }
    } else {
      const auto kt = kt_apply<D>(prof, kernel, f0, t, eps, o);
      for (std::size_t i = 0; i < grid.size(); ++i) {
        const auto e = kt.density.estimate(grid[i]);
        records.push_back(tagged("density", {{"point", i},
                                             {"t", t},
                                             {"value", e.value},
                                             {"error", e.error},
                                             {"truncation", kt.truncation},
                                             {"order", kt.order},
                                             {"method", method},
                                             {"pass", true}}));
      }
    }
  }
  const std::string name = mode == "fpk" ? "residuals.jsonl" : "density.jsonl";
  auto os = r.open(name);
  write_jsonl(os, records);
  os.close();
  r.artifact(name);
  return ok ? 0 : 4;
}

inline int validate(Run& r, const std::string& self) {
  const auto checks = r.cfg.words("validate.checks", {});
  const auto suite_name = r.cfg.str("validate.suite", "all");
  const bool cli_reruns = r.cfg.flag("validate.cli_reruns", false);
  check_unknown_keys(r.cfg, r.command);
  const auto names = checks.empty() ? suite_members(suite_name) : checks;
  for (const auto& n : names) {
    bool known = false;
    for (const auto& c : all_checks()) known = known || c.name == n;
    if (!known) throw config_error("BadCheck", "unknown check " + n);
  }
  SuiteContext ctx;
  ctx.seed = r.seed;
  ctx.threads = r.threads;
  ctx.work_dir = r.out / "reruns";
  if (cli_reruns) ctx.cli = self;
  std::vector<nlohmann::json> records;
  bool ok = true;
  for (const auto& n : names) {
    const auto res = run_check(n, ctx);
    ok = ok && res.pass;
    records.push_back(res.to_json());
  }
  fs::remove_all(ctx.work_dir);
  auto os = r.open("reports.jsonl");
  write_jsonl(os, records);
  os.close();
  auto ss = r.open("summary.csv");
  write_summary(ss, records);
  ss.close();
  r.artifact("reports.jsonl");
  r.artifact("summary.csv");
  return ok ? 0 : 4;
}

inline int report(Run& r) {
  std::vector<std::string> inputs = r.cfg.words("report.inputs", {});
  check_unknown_keys(r.cfg, r.command);
  if (inputs.empty()) throw config_error("BadValue", "report.inputs is empty");
  std::vector<std::string> files;
  for (const auto& in : inputs) {
    if (fs::is_directory(in)) {
      std::vector<std::string> found;
      for (const auto& e : fs::directory_iterator(in))
        if (e.path().extension() == ".jsonl") found.push_back(e.path().string());
      std::sort(found.begin(), found.end());
      if (found.empty()) throw config_error("InputFile", in + " holds no .jsonl records");
      files.insert(files.end(), found.begin(), found.end());
    } else {
      files.push_back(in);
    }
  }
  std::vector<nlohmann::json> records;
  for (const auto& f : files) {
    const auto part = read_jsonl(f);
    records.insert(records.end(), part.begin(), part.end());
    r.manifest.add_input(f);
  }
  auto os = r.open("summary.csv");
  write_summary(os, records);
  os.close();
  r.artifact("summary.csv");
  return 0;
}

template <int D> int dispatch(Run& r, const std::string& self) {
  if (r.command == "simulate") return simulate<D>(r);
  if (r.command == "estimate-kernel") return estimate_kernel<D>(r);
  if (r.command == "chain") return chain<D>(r);
  if (r.command == "propagate") return propagate<D>(r);
  if (r.command == "validate") return validate(r, self);
  return report(r);
}

inline void print_error(std::ostream& err, const char* kind, const std::string& code, const std::string& what) {
  err << nlohmann::json{{"error", {{"kind", kind}, {"code", code}, {"message", what}}}}.dump() << '\n';
}

/// Runs one command; returns the process exit status (0 ok, 2 configuration,
/// 3 numerical budget, 4 validation). `self` is the executable, used for CLI reruns.
inline int run(const std::string& command, const Options& opt, std::ostream& out = std::cout,
               std::ostream& err = std::cerr, const std::string& self = "") {
  try {
    if (std::find(commands().begin(), commands().end(), command) == commands().end())
      throw config_error("UnknownCommand", command);
    if (command == "manifest-check") {
      if (opt.out.empty()) throw config_error("MissingArgument", "manifest-check needs a run directory");
      const bool ok = manifest_check(opt.out);
      out << (ok ? "true" : "false") << '\n';
      return ok ? 0 : 4;
    }
    if (opt.config.empty()) throw config_error("MissingArgument", "--config is required");
    if (opt.out.empty()) throw config_error("MissingArgument", "--out is required");
    if (opt.threads == 0) throw config_error("BadValue", "--threads must be positive");
    Run r;
    r.command = command;
    r.cfg = Config::load(opt.config);
    const long long cfg_seed = r.cfg.integer("seed", 1);
    if (cfg_seed < 0) throw config_error("BadValue", "seed must be nonnegative");
    r.seed = opt.seed ? *opt.seed : static_cast<std::uint64_t>(cfg_seed);
    r.threads = opt.threads;
    r.out = opt.out;
    r.manifest.command = command;
    r.manifest.seed = r.seed;
    r.manifest.config_text = r.cfg.text();
    const long long dim = r.cfg.integer("dimension", 2);
    if (dim != 2 && dim != 3) throw config_error("BadDimension", "dimension must be 2 or 3");
    fs::create_directories(r.out);
    const int status = dim == 2 ? dispatch<2>(r, self) : dispatch<3>(r, self);
    r.manifest.write(r.out);
    return status;
  } catch (const Error& e) {
    const char* kind = e.kind() == ErrorKind::Config ? "config" : e.kind() == ErrorKind::Budget ? "budget" : "validation";
    print_error(err, kind, e.code(), e.what());
    return static_cast<int>(e.kind());
  } catch (const fs::filesystem_error& e) {
    print_error(err, "config", "OutputFile", e.what());
    return 2;
  } catch (const std::exception& e) {
    print_error(err, "internal", "Internal", e.what());
    return 1;
  }
}

}  // namespace lorentz::cli
