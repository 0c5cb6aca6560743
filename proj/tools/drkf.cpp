// drkf: command-line front end for the robust filtering library.
//
// Exit codes: 0 success, 2 configuration / input error, 3 runtime failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include "drkf/calibrate.hpp"
#include "drkf/csv.hpp"
#include "drkf/experiments.hpp"
#include "drkf/solver.hpp"

#ifndef DRKF_VERSION
#define DRKF_VERSION "dev"
#endif

namespace fs = std::filesystem;
using namespace drkf;

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 2;
constexpr int kRuntimeError = 3;

// Raised while reading and validating inputs, before any work starts.
struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <class Fn>
auto input_stage(Fn fn) {
  try {
    return fn();
  } catch (const Error& e) {
    throw InputError(e.what());
  }
}

struct Common {
  std::string out;
  std::uint64_t seed = 1;
  int jobs = std::max(1u, std::thread::hardware_concurrency());
};

void add_common(CLI::App* cmd, Common& c, const std::string& default_out) {
  c.out = default_out;
  cmd->add_option("--out", c.out, "Output directory")->capture_default_str();
  cmd->add_option("--seed", c.seed, "Base random seed")->capture_default_str();
  cmd->add_option("--jobs", c.jobs, "Worker threads")->check(CLI::PositiveNumber)->capture_default_str();
}

Matrix load_matrix(const std::string& path) {
  if (!fs::exists(path)) throw Error(ErrorCode::kIo, "no such file: " + path);
  return csv::read_matrix(path);
}

SymMatrix load_sym(const std::string& path) {
  const Matrix m = load_matrix(path);
  if (m.rows() != m.cols()) {
    throw Error(ErrorCode::kDimMismatch, path + ": expected a square matrix");
  }
  return SymMatrix(m);
}

void expect_dim(const SymMatrix& s, Index d, const std::string& what) {
  if (s.dim() != d) {
    throw Error(ErrorCode::kDimMismatch, what + " must be " + std::to_string(d) + "x" +
                                             std::to_string(d) + ", got " +
                                             std::to_string(s.dim()) + "x" + std::to_string(s.dim()));
  }
}

std::set<RobustMode> parse_modes(const std::vector<std::string>& names) {
  std::set<RobustMode> out;
  for (const auto& n : names) out.insert(parse_mode(n));
  if (out.empty()) throw Error(ErrorCode::kInvalidArgument, "no modes given");
  return out;
}

std::string print_matrix(const Matrix& m) {
  std::ostringstream os;
  csv::write_matrix(os, m);
  return os.str();
}

class Manifest {
 public:
  Manifest(const CLI::App& app, const std::string& command, int argc, char** argv,
           const Common& common)
      : start_(std::chrono::steady_clock::now()) {
    doc_["command"] = command;
    doc_["argv"] = std::vector<std::string>(argv, argv + argc);
    // Only the executed subcommand's section, so the echo reruns exactly this command.
    std::istringstream all(app.config_to_str(true, false));
    std::string line, echo;
    while (std::getline(all, line)) {
      if (line.rfind(command + ".", 0) == 0) echo += line + '\n';
    }
    doc_["config"] = echo;
    doc_["seed"] = common.seed;
    doc_["jobs"] = common.jobs;
    doc_["version"] = DRKF_VERSION;
    doc_["eigen"] = std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) +
                    "." + std::to_string(EIGEN_MINOR_VERSION);
    doc_["compiler"] = __VERSION__;
    doc_["outputs"] = nlohmann::json::array();
    doc_["warnings"] = nlohmann::json::array();
  }

  void output(const std::string& name) { doc_["outputs"].push_back(name); }
  void warning(const std::string& w) { doc_["warnings"].push_back(w); }

  void write(const fs::path& dir, int status, const std::string& error = "") {
    doc_["exit_code"] = status;
    if (!error.empty()) doc_["error"] = error;
    doc_["elapsed_s"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    std::error_code ec;
    fs::create_directories(dir, ec);
    std::ofstream out(dir / "manifest.json");
    if (out) out << doc_.dump(2) << '\n';
    // The config echo alone is enough to rerun: drkf --config <dir>/config.toml <command>
    std::ofstream cfg(dir / "config.toml");
    if (cfg) cfg << doc_["config"].get<std::string>();
  }

 private:
  nlohmann::json doc_;
  std::chrono::steady_clock::time_point start_;
};

// Runs `count` jobs on a small pool, keeping the first exception.
template <class Fn>
void run_pool(int count, int jobs, Fn fn) {
  std::atomic<int> next{0};
  std::exception_ptr first;
  std::mutex mu;
  auto worker = [&] {
    for (int k = next++; k < count; k = next++) {
      try {
        fn(k);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!first) first = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int w = 1; w < std::min(jobs, count); ++w) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  if (first) std::rethrow_exception(first);
}

// ------------------------------------------------------------------ track

struct TrackArgs {
  Common common;
  TrackingScenario sc;
  std::vector<std::string> modes{"em", "ot", "cot"};
};

void setup_track(CLI::App& app, TrackArgs& a) {
  auto* cmd = app.add_subcommand("track", "Target-tracking study: EM vs OT vs COT filters");
  add_common(cmd, a.common, "out/track");
  cmd->add_option("--radii,--radius", a.sc.radii, "Ball radii")->capture_default_str();
  cmd->add_option("--modes,--mode", a.modes, "Filters: em, ot, cot")->capture_default_str();
  cmd->add_option("--instances", a.sc.instances, "Instances per radius")->capture_default_str();
  cmd->add_option("--T", a.sc.T, "Steps per instance")->capture_default_str();
  cmd->add_option("--train-len", a.sc.T_train, "Length of each EM training run")->capture_default_str();
  cmd->add_option("--train-runs", a.sc.train_runs, "EM training runs per instance")->capture_default_str();
  cmd->add_option("--dt", a.sc.dt, "Sampling interval")->capture_default_str();
  cmd->add_option("--q", a.sc.q, "Process noise intensity")->capture_default_str();
  cmd->add_option("--r", a.sc.r, "Measurement noise intensity")->capture_default_str();
  cmd->add_option("--iters", a.sc.solver.max_iters, "Solver iterations per step")->capture_default_str();
  cmd->add_option("--em-iters", a.sc.em.max_em_iters, "EM iteration cap")->capture_default_str();
  cmd->add_option("--em-tol", a.sc.em.loglik_rel_tol, "EM relative log-likelihood tolerance")
      ->capture_default_str();
}

int cmd_track(const CLI::App& app, TrackArgs& a, int argc, char** argv) {
  const fs::path dir = a.common.out;
  Manifest man(app, "track", argc, argv, a.common);
  std::set<RobustMode> modes;
  try {
    input_stage([&] {
      a.sc.seed = a.common.seed;
      a.sc.jobs = a.common.jobs;
      modes = parse_modes(a.modes);
      a.sc.validate();
      return 0;
    });
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfigError;
  }
  try {
    const TrackingResult res = run_tracking(a.sc, modes, dir);
    for (const auto& w : res.warnings) {
      std::cerr << "warning: " << w << '\n';
      man.warning(w);
    }
    for (const char* f : {"rmse.csv", "rmse_diff_cdf.csv", "stats.csv"}) man.output(f);
    for (const auto& s : res.stats) {
      std::cout << s.quantity << ' ' << s.pair << " radius=" << s.radius << " mean=" << s.mean
                << " var=" << s.variance << '\n';
    }
    man.write(dir, kOk);
    return kOk;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    man.write(dir, kRuntimeError, e.what());
    return kRuntimeError;
  }
}

// ------------------------------------------------------------------ trade

struct TradeArgs {
  Common common;
  TradingConfig cfg;
  std::string prices;
  std::vector<std::string> modes{"nonrobust", "cot", "ot"};
  std::vector<double> radii{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
};

void setup_trade(CLI::App& app, TradeArgs& a) {
  auto* cmd = app.add_subcommand("trade", "Pairs-trading backtest");
  add_common(cmd, a.common, "out/trade");
  cmd->add_option("--prices", a.prices, "CSV with date,close_1,close_2")->required();
  cmd->add_option("--modes,--mode", a.modes, "Filters: nonrobust, ot, cot")->capture_default_str();
  cmd->add_option("--radii,--radius", a.radii, "Ball radii for ot/cot")->capture_default_str();
  cmd->add_option("--warmup", a.cfg.warmup, "Days used for the initial regression")->capture_default_str();
  cmd->add_option("--window", a.cfg.window, "Rolling window of the spread band")->capture_default_str();
  cmd->add_option("--entry-z", a.cfg.entry_z, "Entry band in standard deviations")->capture_default_str();
  cmd->add_option("--lot", a.cfg.lot, "Shares of asset 1 per trade")->capture_default_str();
  cmd->add_option("--tc", a.cfg.tc_rate, "Transaction cost rate")->capture_default_str();
  cmd->add_option("--wealth", a.cfg.initial_wealth, "Initial wealth")->capture_default_str();
  cmd->add_option("--rf", a.cfg.rf_annual, "Annual risk-free rate")->capture_default_str();
  cmd->add_option("--iters", a.cfg.solver.max_iters, "Solver iterations per step")->capture_default_str();
}

int cmd_trade(const CLI::App& app, TradeArgs& a, int argc, char** argv) {
  const fs::path dir = a.common.out;
  Manifest man(app, "trade", argc, argv, a.common);
  PriceSeries prices;
  std::vector<std::pair<RobustMode, double>> runs;
  try {
    input_stage([&] {
      a.cfg.validate();
      if (!fs::exists(a.prices)) throw Error(ErrorCode::kIo, "price file not found: " + a.prices);
      prices = read_prices(fs::path(a.prices));
      for (RobustMode m : parse_modes(a.modes)) {
        if (m == RobustMode::kNonrobust) {
          runs.emplace_back(m, 0.0);
          continue;
        }
        if (a.radii.empty()) throw Error(ErrorCode::kInvalidArgument, "no radii");
        for (double r : a.radii) {
          if (!(r >= 0.0)) throw Error(ErrorCode::kInvalidArgument, "radius must be >= 0");
          runs.emplace_back(m, r);
        }
      }
      return 0;
    });
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfigError;
  }
  std::vector<BacktestReport> reps(runs.size());
  try {
    fs::create_directories(dir);
    run_pool(static_cast<int>(runs.size()), a.common.jobs, [&](int k) {
      const auto [mode, radius] = runs[k];
      const std::string label = (mode == RobustMode::kNonrobust ? std::string("nonrobust")
                                                                : to_string(mode)) +
                                (mode == RobustMode::kNonrobust ? "" : "_" + csv::format(radius));
      reps[k] = run_backtest(prices, a.cfg, mode, radius, dir / "runs" / label);
    });
    for (const auto& r : reps) {
      for (const auto& w : r.warnings) {
        std::cerr << "warning: " << w << '\n';
        man.warning(w);
      }
    }
    std::ofstream out(dir / "ratios.csv");
    write_ratios_csv(out, reps);
    write_ratios_csv(std::cout, reps);
    man.output("ratios.csv");
    man.output("runs/");
    man.write(dir, kOk);
    return kOk;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    man.write(dir, kRuntimeError, e.what());
    return kRuntimeError;
  }
}

// -------------------------------------------------------- distance / solve

struct StepFiles {
  std::string a, c, b, d, sigma;

  void add(CLI::App* cmd) {
    cmd->add_option("--A", a, "State transition matrix CSV")->required();
    cmd->add_option("--C", c, "Observation matrix CSV")->required();
    cmd->add_option("--B", b, "State noise covariance CSV")->required();
    cmd->add_option("--D", d, "Observation noise covariance CSV")->required();
    cmd->add_option("--Sigma", sigma, "Previous posterior covariance CSV")->required();
  }

  std::pair<ModelStep, SymMatrix> load() const {
    ModelStep step{load_matrix(a), load_matrix(c), load_sym(b), load_sym(d)};
    step.validate();
    const SymMatrix s = load_sym(sigma);
    expect_dim(s, step.n(), "Sigma");
    return {step, s};
  }
};

struct DistanceArgs {
  Common common;
  StepFiles files;
  std::string b_bar, d_bar, sigma_bar;
};

void setup_distance(CLI::App& app, DistanceArgs& a) {
  auto* cmd = app.add_subcommand("distance", "Bi-causal and joint non-causal distances");
  add_common(cmd, a.common, "out/distance");
  a.files.add(cmd);
  cmd->add_option("--B-bar", a.b_bar, "Alternative state noise covariance CSV")->required();
  cmd->add_option("--D-bar", a.d_bar, "Alternative observation noise covariance CSV")->required();
  cmd->add_option("--Sigma-bar", a.sigma_bar, "Alternative previous covariance CSV")->required();
}

int cmd_distance(const CLI::App& app, DistanceArgs& a, int argc, char** argv) {
  const fs::path dir = a.common.out;
  Manifest man(app, "distance", argc, argv, a.common);
  ModelStep step;
  SymMatrix sigma;
  CandidateParams alt;
  try {
    input_stage([&] {
      std::tie(step, sigma) = a.files.load();
      alt = {load_sym(a.b_bar), load_sym(a.d_bar), load_sym(a.sigma_bar)};
      expect_dim(alt.B_bar, step.n(), "B-bar");
      expect_dim(alt.D_bar, step.m(), "D-bar");
      expect_dim(alt.Sigma_bar, step.n(), "Sigma-bar");
      return 0;
    });
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfigError;
  }
  try {
    const double w = bicausal_distance(step, alt, sigma);
    const double wj = joint_noncausal_distance(step, alt, sigma);
    std::cout << "w=" << csv::format(w) << '\n' << "W_joint=" << csv::format(wj) << '\n';
    fs::create_directories(dir);
    std::ofstream out(dir / "distance.csv");
    out << "w,W_joint\n" << csv::format(w) << ',' << csv::format(wj) << '\n';
    man.output("distance.csv");
    man.write(dir, kOk);
    return kOk;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    man.write(dir, kRuntimeError, e.what());
    return kRuntimeError;
  }
}

struct SolveArgs {
  Common common;
  StepFiles files;
  std::string xhat;
  std::string mode = "cot";
  RobustConfig cfg;
  SolverOptions opts;
};

void setup_solve(CLI::App& app, SolveArgs& a) {
  auto* cmd = app.add_subcommand("solve", "One worst-case step");
  add_common(cmd, a.common, "out/solve");
  a.files.add(cmd);
  cmd->add_option("--xhat", a.xhat, "Previous state estimate CSV (column or row)");
  cmd->add_option("--radius", a.cfg.radius, "Ball radius")->capture_default_str();
  cmd->add_option("--mode", a.mode, "nonrobust, ot or cot")->capture_default_str();
  cmd->add_option("--delta", a.cfg.delta, "Floor on the pivots of D-bar")->capture_default_str();
  cmd->add_option("--d-floor", a.cfg.d_floor, "Floor on the pivots of B-bar and Sigma-bar")
      ->capture_default_str();
  cmd->add_option("--iters", a.opts.max_iters, "Solver iteration cap")->capture_default_str();
  cmd->add_option("--tol", a.opts.tolerance, "Solver tolerance")->capture_default_str();
}

int cmd_solve(const CLI::App& app, SolveArgs& a, int argc, char** argv) {
  const fs::path dir = a.common.out;
  Manifest man(app, "solve", argc, argv, a.common);
  ModelStep step;
  SymMatrix sigma;
  Vector xhat;
  try {
    input_stage([&] {
      a.cfg.mode = parse_mode(a.mode);
      a.cfg.validate();
      a.opts.validate();
      std::tie(step, sigma) = a.files.load();
      if (!a.xhat.empty()) {
        const Matrix x = load_matrix(a.xhat);
        if (x.size() != step.n()) throw Error(ErrorCode::kDimMismatch, "xhat length");
        xhat = Eigen::Map<const Vector>(x.data(), x.size());
      }
      return 0;
    });
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfigError;
  }
  try {
    SolveTrace trace;
    RobustConfig cfg = a.cfg;
    if (cfg.mode == RobustMode::kNonrobust) cfg.radius = 0.0;
    const RobustSolution sol = solve_step(step, sigma, cfg, a.opts, xhat, &trace);
    for (const auto& w : sol.warnings) {
      std::cerr << "warning: " << w << '\n';
      man.warning(w);
    }
    fs::create_directories(dir);
    const std::vector<std::pair<std::string, Matrix>> outs{
        {"B_star", sol.params.B_bar.mat()}, {"D_star", sol.params.D_bar.mat()},
        {"Sigma_star", sol.params.Sigma_bar.mat()}, {"G", sol.gain}, {"g", sol.intercept}};
    for (const auto& [name, m] : outs) {
      std::cout << name << ":\n" << print_matrix(m);
      csv::write_matrix(dir / (name + ".csv"), m);
      man.output(name + ".csv");
    }
    std::cout << "F=" << csv::format(sol.value) << '\n'
              << "iterations=" << sol.iterations << '\n'
              << "converged=" << (sol.converged ? "true" : "false") << '\n'
              << "trace:\n";
    trace.write_csv(std::cout);
    std::ofstream tr(dir / "trace.csv");
    trace.write_csv(tr);
    man.output("trace.csv");
    man.write(dir, kOk);
    return kOk;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    man.write(dir, kRuntimeError, e.what());
    return kRuntimeError;
  }
}

// -------------------------------------------------------------- calibrate

struct CalibrateArgs {
  Common common;
  std::vector<std::string> trajectories;
  std::string a, c, init_b, init_d, prior_cov;
  EmOptions em;
};

void setup_calibrate(CLI::App& app, CalibrateArgs& a) {
  auto* cmd = app.add_subcommand("calibrate", "EM fit of static noise covariances");
  add_common(cmd, a.common, "out/calibrate");
  cmd->add_option("--trajectories", a.trajectories, "Trajectory CSV files")->required();
  cmd->add_option("--A", a.a, "State transition matrix CSV")->required();
  cmd->add_option("--C", a.c, "Observation matrix CSV")->required();
  cmd->add_option("--init-B", a.init_b, "Initial B CSV (identity if omitted)");
  cmd->add_option("--init-D", a.init_d, "Initial D CSV (identity if omitted)");
  cmd->add_option("--prior-cov", a.prior_cov, "Covariance of x_0 (identity if omitted); mean is 0");
  cmd->add_option("--em-iters", a.em.max_em_iters, "EM iteration cap")->capture_default_str();
  cmd->add_option("--tol", a.em.loglik_rel_tol, "Relative log-likelihood tolerance")->capture_default_str();
}

int cmd_calibrate(const CLI::App& app, CalibrateArgs& a, int argc, char** argv) {
  const fs::path dir = a.common.out;
  Manifest man(app, "calibrate", argc, argv, a.common);
  std::optional<StateSpaceModel> skeleton;
  GaussianBelief init;
  std::vector<std::vector<Vector>> data;
  try {
    input_stage([&] {
      const Matrix am = load_matrix(a.a), cm = load_matrix(a.c);
      const ModelStep probe{am, cm, SymMatrix::identity(am.rows()), SymMatrix::identity(cm.rows())};
      probe.validate();
      skeleton = StateSpaceModel::time_invariant(am, cm, probe.B, probe.D);
      const Index n = am.rows(), m = cm.rows();
      if (!a.init_b.empty()) {
        a.em.init_B = load_sym(a.init_b);
        expect_dim(*a.em.init_B, n, "init-B");
      }
      if (!a.init_d.empty()) {
        a.em.init_D = load_sym(a.init_d);
        expect_dim(*a.em.init_D, m, "init-D");
      }
      init = GaussianBelief::standard(n);
      if (!a.prior_cov.empty()) {
        init.cov = load_sym(a.prior_cov);
        expect_dim(init.cov, n, "prior-cov");
      }
      a.em.jobs = a.common.jobs;
      a.em.validate();
      for (const auto& path : a.trajectories) {
        std::ifstream in(path);
        if (!in) throw Error(ErrorCode::kIo, "cannot open " + path);
        const Trajectory tr = read_trajectory_csv(in);
        if (tr.length() < 2) throw Error(ErrorCode::kInvalidArgument, path + ": need at least 2 rows");
        if (tr.observations.front().size() != m) {
          throw Error(ErrorCode::kDimMismatch, path + ": observation columns do not match C");
        }
        data.push_back(tr.observations);
      }
      return 0;
    });
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kConfigError;
  }
  try {
    const EmResult res = em_fit(*skeleton, init, data, a.em);
    fs::create_directories(dir);
    csv::write_matrix(dir / "B_hat.csv", res.B_hat.mat());
    csv::write_matrix(dir / "D_hat.csv", res.D_hat.mat());
    std::ofstream ll(dir / "loglik.csv");
    ll << "iter,loglik\n";
    for (std::size_t k = 0; k < res.loglik_path.size(); ++k) {
      ll << k + 1 << ',' << csv::format(res.loglik_path[k]) << '\n';
    }
    for (const char* f : {"B_hat.csv", "D_hat.csv", "loglik.csv"}) man.output(f);
    std::cout << "B_hat:\n"
              << print_matrix(res.B_hat.mat()) << "D_hat:\n"
              << print_matrix(res.D_hat.mat()) << "iterations=" << res.iters
              << " converged=" << (res.converged ? "true" : "false") << '\n';
    man.write(dir, kOk);
    return kOk;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    man.write(dir, kRuntimeError, e.what());
    return kRuntimeError;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Distributionally robust Kalman filtering with optimal-transport ambiguity"};
  app.set_version_flag("--version", DRKF_VERSION);
  app.set_config("--config", "", "Config file (TOML, one [section] per subcommand)");
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.require_subcommand(1);

  TrackArgs track;
  TradeArgs trade;
  DistanceArgs distance;
  SolveArgs solve;
  CalibrateArgs calibrate;
  setup_track(app, track);
  setup_trade(app, trade);
  setup_distance(app, distance);
  setup_solve(app, solve);
  setup_calibrate(app, calibrate);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  const std::string cmd = app.get_subcommands().front()->get_name();
  if (cmd == "track") return cmd_track(app, track, argc, argv);
  if (cmd == "trade") return cmd_trade(app, trade, argc, argv);
  if (cmd == "distance") return cmd_distance(app, distance, argc, argv);
  if (cmd == "solve") return cmd_solve(app, solve, argc, argv);
  return cmd_calibrate(app, calibrate, argc, argv);
}
