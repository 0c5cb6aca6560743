#pragma once

// The two studies: a constant-velocity tracking simulation comparing the
// EM-calibrated Kalman filter against OT / COT robust filters, and a
// Kalman pairs-trading backtest.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "drkf/calibrate.hpp"
#include "drkf/robustfilter.hpp"

namespace drkf {

// ---------------------------------------------------------------- tracking

struct TrackingScenario {
  double dt = 1.0;
  int T = 100;
  int T_train = 10;
  int train_runs = 1;  // independent length-T_train runs pooled by EM, per instance
  double q = 10.0;
  double r = 50.0;
  int instances = 10;
  std::vector<double> radii{0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0};
  std::uint64_t seed = 1;
  SolverOptions solver;
  EmOptions em;
  int jobs = 1;

  void validate() const;
};

/// A = [[I, dt I], [0, I]], C = [I, 0] and the time-varying truth
///   B0_t = q (6.5 + 0.5 cos(pi t / T)) [[dt^3/3 I, dt^2/2 I], [dt^2/2 I, dt I]]
///   D0_t = r (0.1 + 0.05 cos(pi t / T)) [[1, 0.5], [0.5, 1]]
ModelStep tracking_truth_model(const TrackingScenario& sc, int t);
StateSpaceModel tracking_truth(const TrackingScenario& sc);

struct RmseRow {
  std::string method;  // "EM", "OT" or "COT"
  double radius = 0.0;
  int instance = 0;
  int t = 0;
  double rmse_pos = 0.0;
  double rmse_vel = 0.0;
};

/// Pooled over instances and time steps for one (quantity, pair, radius).
struct DiffStats {
  std::string quantity;  // "position" or "velocity"
  std::string pair;      // "COT-EM" or "OT-EM"
  double radius = 0.0;
  double mean = 0.0;
  double variance = 0.0;  // ddof = 1
  std::vector<double> sorted;
};

struct TrackingResult {
  std::vector<RmseRow> rows;
  std::vector<DiffStats> stats;
  std::vector<std::string> warnings;
  int skipped_cells = 0;
};

/// `modes` picks among nonrobust (the EM filter), ot and cot. Every radius
/// gets its own `instances` simulated instances. When `out_dir` is set,
/// rmse.csv, rmse_diff_cdf.csv and stats.csv are written there.
TrackingResult run_tracking(const TrackingScenario& sc, const std::set<RobustMode>& modes,
                            const std::optional<std::filesystem::path>& out_dir = {});

/// Differences a - b per matching (instance, t), for both quantities.
DiffStats diff_stats(const std::string& quantity, const std::string& pair, double radius,
                     std::vector<double> diffs);

void write_rmse_csv(std::ostream& out, const TrackingResult& res);
void write_diff_cdf_csv(std::ostream& out, const TrackingResult& res);
void write_stats_csv(std::ostream& out, const TrackingResult& res);

// ----------------------------------------------------------------- trading

struct PriceSeries {
  std::vector<std::string> dates;  // ISO yyyy-mm-dd, strictly increasing
  std::vector<double> close_1;
  std::vector<double> close_2;

  std::size_t size() const { return dates.size(); }
};

/// CSV `date,close_1,close_2` with header. Throws kDataGap on missing closes
/// or dates out of order, kIo on unreadable input.
PriceSeries read_prices(std::istream& in);
PriceSeries read_prices(const std::filesystem::path& path);

struct TradingConfig {
  int warmup = 100;
  int window = 20;
  double entry_z = 2.0;
  double lot = 100.0;
  double tc_rate = 1e-4;
  double initial_wealth = 10000.0;
  double rf_annual = 0.02;
  SymMatrix B_nominal = SymMatrix::identity(2);
  SymMatrix D_nominal = SymMatrix::scalar(1.0);
  SolverOptions solver;

  void validate() const;
};

inline double spread(double y1, double y2, double alpha, double beta) {
  return y1 - alpha - beta * y2;
}

struct EquityRow {
  std::string date;
  double wealth = 0.0;
  double shares_1 = 0.0;  // held after the day's trades
  double shares_2 = 0.0;
  double alpha = 0.0;
  double beta = 0.0;
  double spread = 0.0;
  double roll_mean = 0.0;  // NaN until the window fills
  double roll_std = 0.0;
  double cost = 0.0;       // transaction costs paid that day
};

struct Trade {
  std::string entry_date;
  std::string exit_date;
  int side = 0;  // +1 long the spread (long asset 1), -1 short
  double shares_1 = 0.0;
  double shares_2 = 0.0;
  double entry_cost = 0.0;
  double exit_cost = 0.0;
  double pnl = 0.0;  // net of both costs
};

struct Ratios {
  double sharpe = 0.0;
  double sortino = 0.0;
  bool sharpe_degenerate = false;   // zero denominator, reported as 0
  bool sortino_degenerate = false;
};

struct BacktestReport {
  RobustMode mode = RobustMode::kNonrobust;
  double radius = 0.0;
  double alpha0 = 0.0;
  double beta0 = 0.0;
  std::vector<EquityRow> equity;
  std::vector<Trade> trades;
  Ratios ratios;
  std::vector<std::string> warnings;
};

/// Daily returns of the wealth series against rf_annual / 252.
Ratios performance_ratios(const std::vector<double>& wealth, double rf_annual);

/// OLS of close_1 on (1, close_2) over the first `count` days.
std::pair<double, double> ols_intercept_slope(const PriceSeries& prices, int count);

BacktestReport run_backtest(const PriceSeries& prices, const TradingConfig& cfg, RobustMode mode,
                            double radius,
                            const std::optional<std::filesystem::path>& out_dir = {});

void write_equity_csv(std::ostream& out, const BacktestReport& rep);
void write_trades_csv(std::ostream& out, const BacktestReport& rep);
/// Header `method,radius,sharpe,sortino,final_wealth,trades`, one row per report.
void write_ratios_csv(std::ostream& out, const std::vector<BacktestReport>& reps);

}  // namespace drkf
