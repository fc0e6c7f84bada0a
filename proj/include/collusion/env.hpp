#ifndef COLLUSION_ENV_HPP
#define COLLUSION_ENV_HPP

// Logit-demand Bertrand stage game, its competitive and monopoly benchmarks,
// the discrete price grid agents act on, and the Collusion Index.

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "collusion/core.hpp"
#include "json.hpp"

namespace collusion {

using PricePair = std::array<double, 2>;

struct PricingEnv {
  std::array<double, 2> quality{2.0, 2.0};  // a_j
  double outside_quality = 0.0;             // a_0
  double mu = 0.25;                         // horizontal differentiation
  std::array<double, 2> costs{1.0, 1.0};    // marginal costs c_j
  double gamma = 0.95;

  void validate() const {
    if (!(mu > 0.0) || !std::isfinite(mu)) throw InvalidArgument("env.mu must be finite and > 0");
    if (!(gamma >= 0.0 && gamma < 1.0)) throw InvalidArgument("env.gamma must lie in [0, 1)");
    for (double c : costs)
      if (!std::isfinite(c) || c < 0.0) throw InvalidArgument("env.costs must be finite and >= 0");
    for (double a : quality)
      if (!std::isfinite(a)) throw InvalidArgument("env.quality must be finite");
    if (!std::isfinite(outside_quality)) throw InvalidArgument("env.outside_quality must be finite");
  }

  bool symmetric() const { return quality[0] == quality[1] && costs[0] == costs[1]; }

  bool operator==(const PricingEnv&) const = default;
};

inline void to_json(nlohmann::json& j, const PricingEnv& e) {
  j = nlohmann::json{{"quality", e.quality},
                     {"outside_quality", e.outside_quality},
                     {"mu", e.mu},
                     {"costs", e.costs},
                     {"gamma", e.gamma}};
}

inline void from_json(const nlohmann::json& j, PricingEnv& e) {
  e.quality = j.at("quality").get<std::array<double, 2>>();
  e.outside_quality = j.at("outside_quality").get<double>();
  e.mu = j.at("mu").get<double>();
  e.costs = j.at("costs").get<std::array<double, 2>>();
  e.gamma = j.at("gamma").get<double>();
}

/// Logit demand shares d_j for both firms. Rejects inputs whose exponent would
/// overflow rather than saturating silently.
inline PricePair demand(const PricePair& prices, const PricingEnv& env) {
  constexpr double kMaxExponent = 700.0;
  std::array<double, 2> expo{};
  for (std::size_t j = 0; j < 2; ++j) {
    if (!std::isfinite(prices[j]))
      throw InvalidArgument("demand: non-finite price for player " + std::to_string(j + 1));
    expo[j] = (env.quality[j] - prices[j]) / env.mu;
    if (expo[j] > kMaxExponent)
      throw InvalidArgument("demand: exponent overflow for player " + std::to_string(j + 1) +
                            " ((a - p)/mu = " + std::to_string(expo[j]) + ")");
  }
  const double outside = env.outside_quality / env.mu;
  if (outside > kMaxExponent) throw InvalidArgument("demand: exponent overflow in outside good");
  const double e0 = std::exp(expo[0]);
  const double e1 = std::exp(expo[1]);
  const double denom = e0 + e1 + std::exp(outside);
  return {e0 / denom, e1 / denom};
}

inline PricePair stage_profit(const PricePair& prices, const PricingEnv& env) {
  const PricePair d = demand(prices, env);
  return {(prices[0] - env.costs[0]) * d[0], (prices[1] - env.costs[1]) * d[1]};
}

struct Benchmarks {
  PricePair p_competitive{};
  PricePair p_monopoly{};
  PricePair r_competitive{};
  PricePair r_monopoly{};
  double r_bar_N = 0.0;
  double r_bar_M = 0.0;

  bool operator==(const Benchmarks&) const = default;
};

inline void to_json(nlohmann::json& j, const Benchmarks& b) {
  j = nlohmann::json{{"p_competitive", b.p_competitive}, {"p_monopoly", b.p_monopoly},
                     {"r_competitive", b.r_competitive}, {"r_monopoly", b.r_monopoly},
                     {"r_bar_N", b.r_bar_N},             {"r_bar_M", b.r_bar_M}};
}

inline void from_json(const nlohmann::json& j, Benchmarks& b) {
  b.p_competitive = j.at("p_competitive").get<PricePair>();
  b.p_monopoly = j.at("p_monopoly").get<PricePair>();
  b.r_competitive = j.at("r_competitive").get<PricePair>();
  b.r_monopoly = j.at("r_monopoly").get<PricePair>();
  b.r_bar_N = j.at("r_bar_N").get<double>();
  b.r_bar_M = j.at("r_bar_M").get<double>();
}

namespace detail {

/// Golden-section maximization of a unimodal function on [lo, hi].
template <typename F>
double golden_max(F&& f, double lo, double hi, double tol) {
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = lo, b = hi;
  double c = b - inv_phi * (b - a);
  double d = a + inv_phi * (b - a);
  double fc = f(c), fd = f(d);
  while (b - a > tol) {
    if (fc >= fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - inv_phi * (b - a);
      fc = f(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + inv_phi * (b - a);
      fd = f(d);
    }
  }
  return 0.5 * (a + b);
}

inline PricePair with_price(PricePair p, std::size_t j, double v) {
  p[j] = v;
  return p;
}

/// Upper end of the price bracket; profits vanish well below it.
inline double price_ceiling(const PricingEnv& env) {
  double hi = 0.0;
  for (std::size_t j = 0; j < 2; ++j)
    hi = std::max(hi, env.costs[j] + std::abs(env.quality[j] - env.costs[j]) + 40.0 * env.mu + 1.0);
  return hi;
}

}  // namespace detail

/// Firm j's profit-maximizing price against a fixed rival price, found by a
/// derivative-free golden-section search (independent of the FOC iteration).
inline double best_response_price(const PricingEnv& env, std::size_t j, double opp_price) {
  PricePair p{};
  p[1 - j] = opp_price;
  auto profit = [&](double x) { return stage_profit(detail::with_price(p, j, x), env)[j]; };
  return detail::golden_max(profit, env.costs[j], detail::price_ceiling(env), 1e-12);
}

struct SolverOptions {
  double damping = 0.5;
  double tolerance = 1e-10;
  int max_iterations = 10'000;
};

struct StageSolution {
  PricePair prices{};
  PricePair payoffs{};
  int iterations = 0;
  double residual = 0.0;
};

/// Stage-game Nash (Bertrand) prices by damped fixed-point iteration on the
/// first-order conditions p_j = c_j + mu / (1 - d_j(p)).
inline StageSolution solve_competitive(const PricingEnv& env, const SolverOptions& opts = {}) {
  env.validate();
  PricePair p{env.costs[0] + env.mu, env.costs[1] + env.mu};
  double change = std::numeric_limits<double>::infinity();
  int it = 0;
  for (; it < opts.max_iterations && change >= opts.tolerance; ++it) {
    const PricePair d = demand(p, env);
    change = 0.0;
    for (std::size_t j = 0; j < 2; ++j) {
      const double target = env.costs[j] + env.mu / (1.0 - d[j]);
      const double next = (1.0 - opts.damping) * p[j] + opts.damping * target;
      change = std::max(change, std::abs(next - p[j]));
      p[j] = next;
    }
  }
  const PricePair d = demand(p, env);
  double residual = 0.0;
  for (std::size_t j = 0; j < 2; ++j)
    residual = std::max(residual, std::abs(p[j] - env.costs[j] - env.mu / (1.0 - d[j])));
  if (change >= opts.tolerance || residual > 1e-8)
    throw ConvergenceError("solve_competitive did not converge", residual, p);

  // Local deviation audit: no small unilateral move improves either firm.
  const PricePair r = stage_profit(p, env);
  for (std::size_t j = 0; j < 2; ++j) {
    for (double h : {1e-3, 1e-4, -1e-4, -1e-3}) {
      const double dev = stage_profit(detail::with_price(p, j, p[j] + h), env)[j];
      if (dev > r[j] + 1e-12)
        throw ConvergenceError("solve_competitive: fixed point fails deviation audit", dev - r[j], p);
    }
  }
  return {p, r, it, residual};
}

inline PricePair joint_profit_gradient(const PricePair& p, const PricingEnv& env) {
  const PricePair d = demand(p, env);
  PricePair g{};
  for (std::size_t j = 0; j < 2; ++j) {
    const std::size_t k = 1 - j;
    g[j] = d[j] - (p[j] - env.costs[j]) * d[j] * (1.0 - d[j]) / env.mu +
           (p[k] - env.costs[k]) * d[k] * d[j] / env.mu;
  }
  return g;
}

/// Joint-profit maximizing prices by coordinate ascent with golden-section
/// line searches.
inline StageSolution solve_monopoly(const PricingEnv& env, const SolverOptions& opts = {}) {
  env.validate();
  PricePair p = solve_competitive(env).prices;
  const double hi = detail::price_ceiling(env);
  double change = std::numeric_limits<double>::infinity();
  int it = 0;
  for (; it < opts.max_iterations && change >= opts.tolerance; ++it) {
    change = 0.0;
    for (std::size_t j = 0; j < 2; ++j) {
      auto joint = [&](double x) {
        const PricePair r = stage_profit(detail::with_price(p, j, x), env);
        return r[0] + r[1];
      };
      // Golden section cannot resolve the flat top below ~sqrt(eps); finish
      // by bisecting the sign of the analytic partial derivative.
      const double mid = detail::golden_max(joint, env.costs[j], hi, 1e-6);
      double lo = std::max(env.costs[j], mid - 1e-5), up = mid + 1e-5;
      while (up - lo > 1e-14) {
        const double m = 0.5 * (lo + up);
        if (joint_profit_gradient(detail::with_price(p, j, m), env)[j] > 0.0) lo = m;
        else up = m;
      }
      const double next = 0.5 * (lo + up);
      change = std::max(change, std::abs(next - p[j]));
      p[j] = next;
    }
  }
  const PricePair g = joint_profit_gradient(p, env);
  const double residual = std::max(std::abs(g[0]), std::abs(g[1]));
  if (change >= opts.tolerance || residual > 1e-6)
    throw ConvergenceError("solve_monopoly did not converge", residual, p);
  return {p, stage_profit(p, env), it, residual};
}

inline Benchmarks solve_benchmarks(const PricingEnv& env) {
  const StageSolution nash = solve_competitive(env);
  const StageSolution mono = solve_monopoly(env);
  Benchmarks b;
  b.p_competitive = nash.prices;
  b.r_competitive = nash.payoffs;
  b.p_monopoly = mono.prices;
  b.r_monopoly = mono.payoffs;
  b.r_bar_N = 0.5 * (nash.payoffs[0] + nash.payoffs[1]);
  b.r_bar_M = 0.5 * (mono.payoffs[0] + mono.payoffs[1]);
  return b;
}

/// Equally spaced prices with one step of undercut room below the competitive
/// price and the monopoly price on top.
struct PriceGrid {
  std::vector<double> prices;
  double step = 0.0;

  std::size_t size() const { return prices.size(); }
  double operator[](std::size_t i) const { return prices[i]; }

  /// Index of the grid point closest to `price`.
  std::size_t nearest(double price) const {
    std::size_t best = 0;
    for (std::size_t i = 1; i < prices.size(); ++i)
      if (std::abs(prices[i] - price) < std::abs(prices[best] - price)) best = i;
    return best;
  }

  bool operator==(const PriceGrid&) const = default;
};

inline void to_json(nlohmann::json& j, const PriceGrid& g) {
  j = nlohmann::json{{"prices", g.prices}, {"step", g.step}, {"n_discrete", g.prices.size()}};
}

inline void from_json(const nlohmann::json& j, PriceGrid& g) {
  g.prices = j.at("prices").get<std::vector<double>>();
  g.step = j.at("step").get<double>();
}

inline PriceGrid build_price_grid(double p_competitive, double p_monopoly, int n_discrete) {
  if (n_discrete < 3) throw InvalidArgument("build_price_grid: n_discrete must be >= 3");
  if (!(p_monopoly > p_competitive))
    throw InvalidArgument("build_price_grid: monopoly price must exceed competitive price");
  PriceGrid g;
  g.step = (p_monopoly - p_competitive) / static_cast<double>(n_discrete - 2);
  g.prices.resize(static_cast<std::size_t>(n_discrete));
  for (int k = 0; k < n_discrete; ++k)
    g.prices[static_cast<std::size_t>(k)] = p_competitive + static_cast<double>(k - 1) * g.step;
  return g;
}

using GridPair = std::array<PriceGrid, 2>;

/// Per-player grids from per-player benchmark prices.
inline GridPair build_price_grids(const Benchmarks& b, int n_discrete) {
  return {build_price_grid(b.p_competitive[0], b.p_monopoly[0], n_discrete),
          build_price_grid(b.p_competitive[1], b.p_monopoly[1], n_discrete)};
}

/// Collusion Index as a fraction (0 = competitive, 1 = monopoly). Not clamped.
inline double coi(double mean_payoff, double r_bar_N, double r_bar_M) {
  if (r_bar_M == r_bar_N) throw InvalidArgument("coi: degenerate benchmarks (r_bar_M == r_bar_N)");
  return (mean_payoff - r_bar_N) / (r_bar_M - r_bar_N);
}

inline double coi(double mean_payoff, const Benchmarks& b) { return coi(mean_payoff, b.r_bar_N, b.r_bar_M); }

}  // namespace collusion

#endif  // COLLUSION_ENV_HPP
