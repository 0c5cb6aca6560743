#include "drkf/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <sstream>
#include <thread>

#include "drkf/csv.hpp"

namespace drkf {

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  return out;
}

std::string method_label(RobustMode m) {
  switch (m) {
    case RobustMode::kNonrobust:
      return "EM";
    case RobustMode::kOt:
      return "OT";
    case RobustMode::kCot:
      return "COT";
  }
  return "?";
}

// Runs `count` independent jobs on up to `jobs` threads; exceptions are
// captured per job by the caller.
template <class Fn>
void parallel_for(int count, int jobs, Fn fn) {
  const int workers = std::max(1, std::min(jobs, count));
  if (workers == 1) {
    for (int k = 0; k < count; ++k) fn(k);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (int k = next++; k < count; k = next++) fn(k);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace

// ---------------------------------------------------------------- tracking

void TrackingScenario::validate() const {
  if (!(dt > 0.0) || T < 1 || T_train < 2 || train_runs < 1 || !(q > 0.0) || !(r > 0.0) ||
      instances < 1) {
    throw Error(ErrorCode::kInvalidArgument, "tracking scenario values must be positive");
  }
  if (radii.empty()) throw Error(ErrorCode::kInvalidArgument, "no radii");
  for (double e : radii) {
    if (!(e >= 0.0) || !std::isfinite(e)) throw Error(ErrorCode::kInvalidArgument, "bad radius");
  }
  if (jobs < 1) throw Error(ErrorCode::kInvalidArgument, "jobs must be >= 1");
  solver.validate();
  em.validate();
}

ModelStep tracking_truth_model(const TrackingScenario& sc, int t) {
  const Matrix i2 = Matrix::Identity(2, 2);
  const double dt = sc.dt;
  Matrix a = Matrix::Identity(4, 4);
  a.topRightCorner(2, 2) = dt * i2;
  Matrix c = Matrix::Zero(2, 4);
  c.leftCols(2) = i2;
  Matrix shape(4, 4);
  shape << dt * dt * dt / 3.0 * i2, dt * dt / 2.0 * i2, dt * dt / 2.0 * i2, dt * i2;
  const double phase = std::cos(std::numbers::pi * t / sc.T);
  const Matrix corr{{1.0, 0.5}, {0.5, 1.0}};
  return {a, c, SymMatrix(sc.q * (6.5 + 0.5 * phase) * shape),
          SymMatrix(sc.r * (0.1 + 0.05 * phase) * corr)};
}

StateSpaceModel tracking_truth(const TrackingScenario& sc) {
  return StateSpaceModel(
      4, 2, [sc](int t) { return tracking_truth_model(sc, t).A; },
      [sc](int t) { return tracking_truth_model(sc, t).C; },
      [sc](int t) { return tracking_truth_model(sc, t).B; },
      [sc](int t) { return tracking_truth_model(sc, t).D; });
}

DiffStats diff_stats(const std::string& quantity, const std::string& pair, double radius,
                     std::vector<double> diffs) {
  DiffStats s{quantity, pair, radius, 0.0, 0.0, {}};
  const double n = static_cast<double>(diffs.size());
  if (!diffs.empty()) s.mean = std::accumulate(diffs.begin(), diffs.end(), 0.0) / n;
  if (diffs.size() > 1) {
    double ss = 0.0;
    for (double d : diffs) ss += (d - s.mean) * (d - s.mean);
    s.variance = ss / (n - 1.0);
  }
  std::sort(diffs.begin(), diffs.end());
  s.sorted = std::move(diffs);
  return s;
}

namespace {

struct Cell {
  std::vector<RmseRow> rows;
  std::vector<std::string> warnings;
  bool skipped = false;
};

Cell run_cell(const TrackingScenario& sc, const std::set<RobustMode>& modes, std::size_t k,
              int instance) {
  Cell cell;
  const double radius = sc.radii[k];
  const std::uint64_t base = splitmix(splitmix(sc.seed) ^ (k * 100003ULL + instance));
  const StateSpaceModel truth = tracking_truth(sc);
  const Trajectory traj = simulate(truth, sc.T, base, Vector::Zero(4));

  std::vector<std::vector<Vector>> train;
  for (int j = 0; j < sc.train_runs; ++j) {
    train.push_back(simulate(truth, sc.T_train, splitmix(base + 1 + j), Vector::Zero(4)).observations);
  }
  const GaussianBelief init = GaussianBelief::standard(4);
  const EmResult em = em_fit(truth, init, train, sc.em);
  const StateSpaceModel nominal = truth.with_noise(em.B_hat, em.D_hat);

  const std::string where =
      "radius " + csv::format(radius) + " instance " + std::to_string(instance) + ": ";
  for (RobustMode mode : modes) {
    RobustConfig cfg;
    cfg.mode = mode;
    cfg.radius = mode == RobustMode::kNonrobust ? 0.0 : radius;
    const FilterRun run = run_filter(nominal, traj.observations, init, cfg, sc.solver);
    for (const auto& w : run.warnings) cell.warnings.push_back(where + method_label(mode) + " " + w);
    if (!run.ok()) throw *run.error;
    for (int t = 1; t <= sc.T; ++t) {
      const Vector err = traj.states[t - 1] - run.beliefs[t - 1].mean;
      cell.rows.push_back(
          {method_label(mode), radius, instance, t, err.head(2).norm(), err.tail(2).norm()});
    }
  }
  return cell;
}

}  // namespace

TrackingResult run_tracking(const TrackingScenario& sc, const std::set<RobustMode>& modes,
                            const std::optional<std::filesystem::path>& out_dir) {
  sc.validate();
  if (modes.empty()) throw Error(ErrorCode::kInvalidArgument, "no filter modes selected");
  if (out_dir) std::filesystem::create_directories(*out_dir);

  const int cells = static_cast<int>(sc.radii.size()) * sc.instances;
  std::vector<Cell> done(cells);
  parallel_for(cells, sc.jobs, [&](int c) {
    const std::size_t k = static_cast<std::size_t>(c / sc.instances);
    const int instance = c % sc.instances;
    try {
      done[c] = run_cell(sc, modes, k, instance);
    } catch (const std::exception& e) {
      done[c] = Cell{};
      done[c].skipped = true;
      done[c].warnings.push_back("radius " + csv::format(sc.radii[k]) + " instance " +
                                 std::to_string(instance) + " skipped: " + e.what());
    }
  });

  TrackingResult res;
  for (auto& c : done) {
    res.rows.insert(res.rows.end(), c.rows.begin(), c.rows.end());
    res.warnings.insert(res.warnings.end(), c.warnings.begin(), c.warnings.end());
    if (c.skipped) ++res.skipped_cells;
  }

  if (modes.count(RobustMode::kNonrobust)) {
    // Index the EM rows by (radius, instance, t) for pairing.
    std::map<std::tuple<double, int, int>, const RmseRow*> em_rows;
    for (const auto& r : res.rows) {
      if (r.method == "EM") em_rows[{r.radius, r.instance, r.t}] = &r;
    }
    for (RobustMode mode : {RobustMode::kCot, RobustMode::kOt}) {
      if (!modes.count(mode)) continue;
      const std::string label = method_label(mode);
      for (double radius : sc.radii) {
        std::vector<double> dp, dv;
        for (const auto& r : res.rows) {
          if (r.method != label || r.radius != radius) continue;
          const auto it = em_rows.find({r.radius, r.instance, r.t});
          if (it == em_rows.end()) continue;
          dp.push_back(r.rmse_pos - it->second->rmse_pos);
          dv.push_back(r.rmse_vel - it->second->rmse_vel);
        }
        res.stats.push_back(diff_stats("position", label + "-EM", radius, std::move(dp)));
        res.stats.push_back(diff_stats("velocity", label + "-EM", radius, std::move(dv)));
      }
    }
  }

  if (out_dir) {
    auto rmse = open_out(*out_dir / "rmse.csv");
    write_rmse_csv(rmse, res);
    auto cdf = open_out(*out_dir / "rmse_diff_cdf.csv");
    write_diff_cdf_csv(cdf, res);
    auto stats = open_out(*out_dir / "stats.csv");
    write_stats_csv(stats, res);
  }
  return res;
}

void write_rmse_csv(std::ostream& out, const TrackingResult& res) {
  out << "method,radius,instance,t,rmse_pos,rmse_vel\n";
  for (const auto& r : res.rows) {
    out << csv::join({r.method, csv::format(r.radius), std::to_string(r.instance),
                      std::to_string(r.t), csv::format(r.rmse_pos), csv::format(r.rmse_vel)})
        << '\n';
  }
}

void write_diff_cdf_csv(std::ostream& out, const TrackingResult& res) {
  out << "quantity,pair,radius,rank,diff,cdf\n";
  for (const auto& s : res.stats) {
    const double n = static_cast<double>(s.sorted.size());
    for (std::size_t i = 0; i < s.sorted.size(); ++i) {
      out << csv::join({s.quantity, s.pair, csv::format(s.radius), std::to_string(i + 1),
                        csv::format(s.sorted[i]), csv::format(static_cast<double>(i + 1) / n)})
          << '\n';
    }
  }
}

void write_stats_csv(std::ostream& out, const TrackingResult& res) {
  out << "quantity,pair,radius,mean,variance,count\n";
  for (const auto& s : res.stats) {
    out << csv::join({s.quantity, s.pair, csv::format(s.radius), csv::format(s.mean),
                      csv::format(s.variance), std::to_string(s.sorted.size())})
        << '\n';
  }
}

// ----------------------------------------------------------------- trading

PriceSeries read_prices(std::istream& in) {
  PriceSeries p;
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::kIo, "price file is empty");
  const auto header = csv::split_line(line);
  if (header.size() != 3 || header[0] != "date") {
    throw Error(ErrorCode::kIo, "price header must be date,close_1,close_2");
  }
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto f = csv::split_line(line);
    if (f.size() != 3 || f[1].empty() || f[2].empty()) {
      throw Error(ErrorCode::kDataGap, "line " + std::to_string(lineno) + ": missing close");
    }
    if (!p.dates.empty() && !(f[0] > p.dates.back())) {
      throw Error(ErrorCode::kDataGap, "line " + std::to_string(lineno) + ": dates out of order");
    }
    p.dates.push_back(f[0]);
    p.close_1.push_back(csv::parse_double(f[1]));
    p.close_2.push_back(csv::parse_double(f[2]));
    if (!std::isfinite(p.close_1.back()) || !std::isfinite(p.close_2.back())) {
      throw Error(ErrorCode::kDataGap, "line " + std::to_string(lineno) + ": non-finite close");
    }
  }
  return p;
}

PriceSeries read_prices(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  return read_prices(in);
}

void TradingConfig::validate() const {
  if (warmup < 2) throw Error(ErrorCode::kInvalidArgument, "warmup must be >= 2");
  if (window < 2) throw Error(ErrorCode::kInvalidArgument, "window must be >= 2");
  if (!(entry_z > 0.0)) throw Error(ErrorCode::kInvalidArgument, "entry_z must be > 0");
  if (!(lot > 0.0)) throw Error(ErrorCode::kInvalidArgument, "lot must be > 0");
  if (!(tc_rate >= 0.0)) throw Error(ErrorCode::kInvalidArgument, "tc_rate must be >= 0");
  if (!(initial_wealth > 0.0)) throw Error(ErrorCode::kInvalidArgument, "initial wealth must be > 0");
  if (B_nominal.dim() != 2 || D_nominal.dim() != 1) {
    throw Error(ErrorCode::kDimMismatch, "trading noise covariances must be 2x2 and 1x1");
  }
  solver.validate();
}

Ratios performance_ratios(const std::vector<double>& wealth, double rf_annual) {
  Ratios out;
  if (wealth.size() < 2) {
    out.sharpe_degenerate = out.sortino_degenerate = true;
    return out;
  }
  std::vector<double> e;
  for (std::size_t i = 1; i < wealth.size(); ++i) {
    e.push_back(wealth[i] / wealth[i - 1] - 1.0 - rf_annual / 252.0);
  }
  const double n = static_cast<double>(e.size());
  const double mean = std::accumulate(e.begin(), e.end(), 0.0) / n;
  double ss = 0.0, down = 0.0;
  for (double x : e) {
    ss += (x - mean) * (x - mean);
    down += std::min(x, 0.0) * std::min(x, 0.0);
  }
  const double sd = e.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  const double dd = std::sqrt(down / n);
  // A flat wealth curve has no risk to reward; both ratios are reported as 0.
  // Round-off in W_t / W_{t-1} stays far below this.
  constexpr double kFlat = 1e-12;
  if (sd > kFlat) {
    out.sharpe = mean / sd * std::sqrt(252.0);
  } else {
    out.sharpe_degenerate = true;
  }
  if (sd > kFlat && dd > kFlat) {
    out.sortino = mean / dd * std::sqrt(252.0);
  } else {
    out.sortino_degenerate = true;
  }
  return out;
}

std::pair<double, double> ols_intercept_slope(const PriceSeries& prices, int count) {
  if (count < 2 || static_cast<std::size_t>(count) > prices.size()) {
    throw Error(ErrorCode::kInsufficientHistory, "not enough days for the initial regression");
  }
  Matrix x(count, 2);
  Vector y(count);
  for (int i = 0; i < count; ++i) {
    x(i, 0) = 1.0;
    x(i, 1) = prices.close_2[i];
    y(i) = prices.close_1[i];
  }
  // Minimum-norm solution so that a constant regressor does not break it.
  const Vector coef = x.completeOrthogonalDecomposition().solve(y);
  return {coef(0), coef(1)};
}

BacktestReport run_backtest(const PriceSeries& prices, const TradingConfig& cfg, RobustMode mode,
                            double radius, const std::optional<std::filesystem::path>& out_dir) {
  cfg.validate();
  if (prices.close_1.size() != prices.size() || prices.close_2.size() != prices.size()) {
    throw Error(ErrorCode::kDataGap, "price columns have different lengths");
  }
  if (prices.size() <= static_cast<std::size_t>(cfg.warmup + cfg.window)) {
    throw Error(ErrorCode::kInsufficientHistory,
                "need more than warmup + window = " + std::to_string(cfg.warmup + cfg.window) +
                    " days, got " + std::to_string(prices.size()));
  }
  BacktestReport rep;
  rep.mode = mode;
  rep.radius = mode == RobustMode::kNonrobust ? 0.0 : radius;
  std::tie(rep.alpha0, rep.beta0) = ols_intercept_slope(prices, cfg.warmup);

  const std::size_t start = static_cast<std::size_t>(cfg.warmup);
  const int days = static_cast<int>(prices.size() - start);
  const auto& y2 = prices.close_2;
  const StateSpaceModel model(
      2, 1, [](int) { return Matrix(Matrix::Identity(2, 2)); },
      [&y2, start](int t) {
        Matrix c(1, 2);
        c << 1.0, y2[start + t - 1];
        return c;
      },
      [b = cfg.B_nominal](int) { return b; }, [d = cfg.D_nominal](int) { return d; });
  std::vector<Vector> obs;
  for (int d = 0; d < days; ++d) obs.push_back(Vector::Constant(1, prices.close_1[start + d]));

  RobustConfig rc;
  rc.mode = mode;
  rc.radius = rep.radius;
  const GaussianBelief init{Vector{{rep.alpha0, rep.beta0}}, SymMatrix::identity(2)};
  const FilterRun run = run_filter(model, obs, init, rc, cfg.solver);
  rep.warnings = run.warnings;
  if (!run.ok()) throw *run.error;

  double wealth = cfg.initial_wealth;
  double sh1 = 0.0, sh2 = 0.0;
  Trade open;
  double wealth_before_entry = 0.0;
  std::vector<double> spreads;
  for (int d = 0; d < days; ++d) {
    const std::size_t i = start + d;
    const double p1 = prices.close_1[i], p2 = prices.close_2[i];
    if (d > 0) wealth += sh1 * (p1 - prices.close_1[i - 1]) + sh2 * (p2 - prices.close_2[i - 1]);

    EquityRow row;
    row.date = prices.dates[i];
    row.alpha = run.beliefs[d].mean(0);
    row.beta = run.beliefs[d].mean(1);
    row.spread = spread(p1, p2, row.alpha, row.beta);
    row.roll_mean = row.roll_std = std::nan("");
    if (d >= cfg.window) {
      // Band from the previous `window` spreads; today's spread is the signal.
      const auto first = spreads.end() - cfg.window;
      const double mean = std::accumulate(first, spreads.end(), 0.0) / cfg.window;
      double ss = 0.0;
      for (auto it = first; it != spreads.end(); ++it) ss += (*it - mean) * (*it - mean);
      row.roll_mean = mean;
      row.roll_std = std::sqrt(ss / (cfg.window - 1));
    }
    spreads.push_back(row.spread);

    const bool last = d == days - 1;
    if (open.side != 0) {
      const bool reverted = open.side < 0 ? row.spread <= row.roll_mean : row.spread >= row.roll_mean;
      if (reverted || last) {
        const double cost = cfg.tc_rate * (std::abs(sh1) * p1 + std::abs(sh2) * p2);
        wealth -= cost;
        row.cost += cost;
        open.exit_date = row.date;
        open.exit_cost = cost;
        open.pnl = wealth - wealth_before_entry;
        rep.trades.push_back(open);
        open = Trade{};
        sh1 = sh2 = 0.0;
      }
    } else if (d >= cfg.window && !last &&
               row.roll_std > 1e-12 * std::max(1.0, std::abs(row.roll_mean))) {
      int side = 0;
      if (row.spread > row.roll_mean + cfg.entry_z * row.roll_std) side = -1;
      if (row.spread < row.roll_mean - cfg.entry_z * row.roll_std) side = +1;
      if (side != 0) {
        sh1 = side * cfg.lot;
        sh2 = -side * cfg.lot * row.beta;
        wealth_before_entry = wealth;
        const double cost = cfg.tc_rate * (std::abs(sh1) * p1 + std::abs(sh2) * p2);
        wealth -= cost;
        row.cost += cost;
        open = Trade{row.date, "", side, sh1, sh2, cost, 0.0, 0.0};
      }
    }
    row.wealth = wealth;
    row.shares_1 = sh1;
    row.shares_2 = sh2;
    rep.equity.push_back(row);
  }

  std::vector<double> w;
  for (const auto& r : rep.equity) w.push_back(r.wealth);
  rep.ratios = performance_ratios(w, cfg.rf_annual);

  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    auto eq = open_out(*out_dir / "equity.csv");
    write_equity_csv(eq, rep);
    auto tr = open_out(*out_dir / "trades.csv");
    write_trades_csv(tr, rep);
  }
  return rep;
}

void write_equity_csv(std::ostream& out, const BacktestReport& rep) {
  out << "date,wealth,shares_1,shares_2,alpha,beta,spread,roll_mean,roll_std,cost\n";
  for (const auto& r : rep.equity) {
    out << csv::join({r.date, csv::format(r.wealth), csv::format(r.shares_1),
                      csv::format(r.shares_2), csv::format(r.alpha), csv::format(r.beta),
                      csv::format(r.spread), csv::format(r.roll_mean), csv::format(r.roll_std),
                      csv::format(r.cost)})
        << '\n';
  }
}

void write_trades_csv(std::ostream& out, const BacktestReport& rep) {
  out << "entry_date,exit_date,side,shares_1,shares_2,entry_cost,exit_cost,pnl\n";
  for (const auto& t : rep.trades) {
    out << csv::join({t.entry_date, t.exit_date, t.side > 0 ? "long_spread" : "short_spread",
                      csv::format(t.shares_1), csv::format(t.shares_2),
                      csv::format(t.entry_cost), csv::format(t.exit_cost), csv::format(t.pnl)})
        << '\n';
  }
}

void write_ratios_csv(std::ostream& out, const std::vector<BacktestReport>& reps) {
  out << "method,radius,sharpe,sortino,final_wealth,trades\n";
  for (const auto& r : reps) {
    const std::string label = r.mode == RobustMode::kNonrobust ? "nonrobust" : to_string(r.mode);
    out << csv::join({label, csv::format(r.radius), csv::format(r.ratios.sharpe),
                      csv::format(r.ratios.sortino),
                      csv::format(r.equity.empty() ? 0.0 : r.equity.back().wealth),
                      std::to_string(r.trades.size())})
        << '\n';
  }
}

}  // namespace drkf
