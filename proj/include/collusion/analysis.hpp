#ifndef COLLUSION_ANALYSIS_HPP
#define COLLUSION_ANALYSIS_HPP

// Equilibrium statistics over empirical meta-games.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "collusion/core.hpp"
#include "collusion/env.hpp"
#include "collusion/game.hpp"
#include "collusion/metagame.hpp"
#include "collusion/values.hpp"
#include "json.hpp"

namespace collusion {

inline constexpr std::size_t kMaxNashStrategies = 16;

// ---------------------------------------------------------------------------
// Confidence intervals

struct Interval {
  double mean = 0.0;
  double half = 0.0;
};

/// Standard normal quantile by bisection on erfc; plenty for CI levels.
inline double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw InvalidArgument("normal_quantile: p must lie in (0, 1)");
  double lo = -40.0, hi = 40.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (0.5 * std::erfc(-mid / std::sqrt(2.0)) < p)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

inline double ci_z(double level) {
  if (!(level > 0.0 && level < 1.0)) throw InvalidArgument("confidence level must lie in (0, 1)");
  return normal_quantile(0.5 * (1.0 + level));
}

/// Sample variance (n - 1 denominator); 0 for fewer than two samples.
inline double sample_variance(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  double m = 0.0;
  for (double x : xs) m += x;
  m /= static_cast<double>(xs.size());
  double ss = 0.0;
  for (double x : xs) ss += (x - m) * (x - m);
  return ss / static_cast<double>(xs.size() - 1);
}

inline Interval confidence_interval(const std::vector<double>& samples, double level = 0.95) {
  if (samples.size() < 2) throw InvalidArgument("confidence_interval: need at least two samples");
  Interval out;
  for (double x : samples) out.mean += x;
  out.mean /= static_cast<double>(samples.size());
  out.half = ci_z(level) * std::sqrt(sample_variance(samples) / static_cast<double>(samples.size()));
  return out;
}

// ---------------------------------------------------------------------------
// Bimatrix helpers

struct MixedProfile {
  std::vector<double> row_mix;
  std::vector<double> col_mix;
  double entropy = 0.0;  // H(row) + H(col), nats
  bool symmetric = false;
};

inline void to_json(nlohmann::json& j, const MixedProfile& p) {
  j = nlohmann::json{{"row_mix", p.row_mix}, {"col_mix", p.col_mix}, {"entropy", p.entropy}, {"symmetric", p.symmetric}};
}
inline void from_json(const nlohmann::json& j, MixedProfile& p) {
  p.row_mix = j.at("row_mix").get<std::vector<double>>();
  p.col_mix = j.at("col_mix").get<std::vector<double>>();
  p.entropy = j.at("entropy").get<double>();
  p.symmetric = j.at("symmetric").get<bool>();
}

inline double shannon_entropy(const std::vector<double>& p) {
  double h = 0.0;
  for (double x : p)
    if (x > 0.0) h -= x * std::log(x);
  return h;
}

inline void check_matrix(const PayoffMatrix& m, const char* what) {
  if (m.empty() || m[0].empty()) throw InvalidArgument(std::string(what) + ": empty matrix");
  for (const auto& row : m) {
    if (row.size() != m[0].size()) throw InvalidArgument(std::string(what) + ": ragged matrix");
    for (const auto& c : row)
      if (!std::isfinite(c[0]) || !std::isfinite(c[1])) throw InvalidArgument(std::string(what) + ": non-finite payoff");
  }
}

/// B == A^T within tol (square matrices only).
inline bool is_symmetric_game(const PayoffMatrix& m, double tol = 1e-12) {
  if (m.size() != m[0].size()) return false;
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < m.size(); ++j)
      if (std::abs(m[i][j][0] - m[j][i][1]) > tol) return false;
  return true;
}

/// Average of the matrix and its role swap: S_ij = ((A_ij + B_ji)/2, (B_ij + A_ji)/2).
inline PayoffMatrix symmetrize(const PayoffMatrix& m) {
  check_matrix(m, "symmetrize");
  if (m.size() != m[0].size()) throw InvalidArgument("symmetrize: matrix must be square");
  PayoffMatrix s = m;
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < m.size(); ++j) {
      s[i][j][0] = 0.5 * (m[i][j][0] + m[j][i][1]);
      s[i][j][1] = 0.5 * (m[i][j][1] + m[j][i][0]);
    }
  return s;
}

/// Expected payoff of `role` under (x, y).
inline double expected_payoff(const PayoffMatrix& m, const std::vector<double>& x, const std::vector<double>& y,
                              Role role) {
  double u = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = 0; j < y.size(); ++j) u += x[i] * y[j] * m[i][j][idx(role)];
  return u;
}

/// Payoff of each pure strategy of `role` against the other role's mix.
inline std::vector<double> pure_payoffs(const PayoffMatrix& m, const MixedProfile& p, Role role) {
  const std::size_t rows = m.size(), cols = m[0].size();
  std::vector<double> out;
  if (role == Role::kRow) {
    out.assign(rows, 0.0);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) out[i] += p.col_mix[j] * m[i][j][0];
  } else {
    out.assign(cols, 0.0);
    for (std::size_t j = 0; j < cols; ++j)
      for (std::size_t i = 0; i < rows; ++i) out[j] += p.row_mix[i] * m[i][j][1];
  }
  return out;
}

struct NeAudit {
  double row_gain = 0.0;  // best pure deviation gain for the row player
  double col_gain = 0.0;
  double max_gain() const { return std::max(row_gain, col_gain); }
};

inline void check_profile(const PayoffMatrix& m, const MixedProfile& p, const char* what) {
  if (p.row_mix.size() != m.size() || p.col_mix.size() != m[0].size())
    throw InvalidArgument(std::string(what) + ": profile dimension mismatch");
  for (const auto* mix : {&p.row_mix, &p.col_mix}) {
    double s = 0.0;
    for (double x : *mix) {
      if (x < 0.0 || !std::isfinite(x)) throw InvalidArgument(std::string(what) + ": negative mix entry");
      s += x;
    }
    if (std::abs(s - 1.0) > 1e-9) throw InvalidArgument(std::string(what) + ": mix does not sum to 1");
  }
}

inline NeAudit audit_profile(const PayoffMatrix& m, const MixedProfile& p) {
  check_matrix(m, "audit_profile");
  check_profile(m, p, "audit_profile");
  NeAudit a;
  for (Role r : {Role::kRow, Role::kCol}) {
    const auto u = pure_payoffs(m, p, r);
    const double v = expected_payoff(m, p.row_mix, p.col_mix, r);
    const double gain = *std::max_element(u.begin(), u.end()) - v;
    (r == Role::kRow ? a.row_gain : a.col_gain) = std::max(0.0, gain);
  }
  return a;
}

inline MixedProfile make_profile(std::vector<double> x, std::vector<double> y, bool symmetric_game) {
  MixedProfile p;
  p.row_mix = std::move(x);
  p.col_mix = std::move(y);
  p.entropy = shannon_entropy(p.row_mix) + shannon_entropy(p.col_mix);
  p.symmetric = false;
  if (symmetric_game && p.row_mix.size() == p.col_mix.size()) {
    p.symmetric = true;
    for (std::size_t i = 0; i < p.row_mix.size(); ++i)
      if (std::abs(p.row_mix[i] - p.col_mix[i]) > 1e-9) p.symmetric = false;
  }
  return p;
}

// ---------------------------------------------------------------------------
// Nash equilibria by support enumeration

struct NashOptions {
  double tol = 1e-6;
  // All support pairs are enumerated while rows + cols <= this; beyond it only
  // equal-size pairs (complete for nondegenerate games).
  std::size_t all_pairs_limit = 16;
  // Equal-size pairs are skipped for symmetric games beyond this many
  // strategies; symmetric supports are always enumerated.
  std::size_t symmetric_pairs_limit = 12;
};

namespace detail {

/// Mix q over the columns of P (|I| x |J|) making every row of P equal.
/// Returns nullopt for singular/inconsistent systems or negative weights.
inline std::optional<Eigen::VectorXd> indifference_mix(const Eigen::MatrixXd& P) {
  const auto k = P.rows(), n = P.cols();
  Eigen::MatrixXd sys = Eigen::MatrixXd::Zero(k + 1, n + 1);
  sys.topLeftCorner(k, n) = P;
  sys.topRightCorner(k, 1).setConstant(-1.0);
  sys.bottomLeftCorner(1, n).setOnes();
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(k + 1);
  rhs(k) = 1.0;
  Eigen::VectorXd sol;
  if (k == n) {
    Eigen::FullPivLU<Eigen::MatrixXd> lu(sys);
    if (!lu.isInvertible()) return std::nullopt;
    sol = lu.solve(rhs);
  } else {
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(sys);
    sol = cod.solve(rhs);
    if ((sys * sol - rhs).lpNorm<Eigen::Infinity>() > 1e-9) return std::nullopt;
  }
  Eigen::VectorXd q = sol.head(n);
  if (!q.allFinite() || q.minCoeff() < -1e-9) return std::nullopt;
  q = q.cwiseMax(0.0);
  const double s = q.sum();
  if (s <= 0.0) return std::nullopt;
  return q / s;
}

inline std::vector<std::size_t> mask_members(std::uint32_t mask) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; mask; ++i, mask >>= 1)
    if (mask & 1u) out.push_back(i);
  return out;
}

inline bool same_profile(const MixedProfile& a, const MixedProfile& b, double tol = 1e-6) {
  for (std::size_t i = 0; i < a.row_mix.size(); ++i)
    if (std::abs(a.row_mix[i] - b.row_mix[i]) > tol) return false;
  for (std::size_t i = 0; i < a.col_mix.size(); ++i)
    if (std::abs(a.col_mix[i] - b.col_mix[i]) > tol) return false;
  return true;
}

}  // namespace detail

/// Every (deduplicated) equilibrium found by support enumeration that passes
/// the eps-NE audit with eps <= tol.
inline std::vector<MixedProfile> find_nash(const PayoffMatrix& m, const NashOptions& opts = {}) {
  check_matrix(m, "find_nash");
  const std::size_t R = m.size(), C = m[0].size();
  if (R > kMaxNashStrategies || C > kMaxNashStrategies)
    throw InvalidArgument("find_nash: support enumeration supports at most 16 strategies per role");
  if (!(opts.tol >= 0.0)) throw InvalidArgument("find_nash: tol must be non-negative");
  const bool sym = is_symmetric_game(m);

  Eigen::MatrixXd A(R, C), B(R, C);
  for (std::size_t i = 0; i < R; ++i)
    for (std::size_t j = 0; j < C; ++j) {
      A(i, j) = m[i][j][0];
      B(i, j) = m[i][j][1];
    }

  std::vector<MixedProfile> found;
  auto accept = [&](std::vector<double> x, std::vector<double> y) {
    MixedProfile p = make_profile(std::move(x), std::move(y), sym);
    if (audit_profile(m, p).max_gain() > opts.tol) return;
    for (const auto& q : found)
      if (detail::same_profile(p, q)) return;
    found.push_back(std::move(p));
  };
  auto expand = [](const Eigen::VectorXd& v, const std::vector<std::size_t>& sup, std::size_t n) {
    std::vector<double> out(n, 0.0);
    for (std::size_t k = 0; k < sup.size(); ++k) out[sup[k]] = v(static_cast<Eigen::Index>(k));
    return out;
  };
  auto try_pair = [&](const std::vector<std::size_t>& I, const std::vector<std::size_t>& J) {
    Eigen::MatrixXd AI(I.size(), J.size()), BI(I.size(), J.size());
    for (std::size_t a = 0; a < I.size(); ++a)
      for (std::size_t b = 0; b < J.size(); ++b) {
        AI(a, b) = A(I[a], J[b]);
        BI(a, b) = B(I[a], J[b]);
      }
    const auto y = detail::indifference_mix(AI);
    if (!y) return;
    std::vector<double> yf = expand(*y, J, C);
    // Prune: rows outside I must not beat the support against y.
    Eigen::VectorXd ay = A * Eigen::Map<const Eigen::VectorXd>(yf.data(), static_cast<Eigen::Index>(C));
    double v = -std::numeric_limits<double>::infinity();
    for (std::size_t i : I) v = std::max(v, ay(i));
    if (ay.maxCoeff() > v + opts.tol) return;
    const auto x = detail::indifference_mix(BI.transpose());
    if (!x) return;
    accept(expand(*x, I, R), std::move(yf));
  };

  if (sym) {
    for (std::uint32_t mask = 1; mask < (1u << R); ++mask) {
      const auto S = detail::mask_members(mask);
      Eigen::MatrixXd AS(S.size(), S.size());
      for (std::size_t a = 0; a < S.size(); ++a)
        for (std::size_t b = 0; b < S.size(); ++b) AS(a, b) = A(S[a], S[b]);
      const auto x = detail::indifference_mix(AS);
      if (!x) continue;
      std::vector<double> xf = expand(*x, S, R);
      accept(xf, xf);
    }
  }

  const bool all_pairs = R + C <= opts.all_pairs_limit;
  if (!sym || R <= opts.symmetric_pairs_limit) {
    if (all_pairs) {
      for (std::uint32_t mi = 1; mi < (1u << R); ++mi) {
        const auto I = detail::mask_members(mi);
        for (std::uint32_t mj = 1; mj < (1u << C); ++mj) try_pair(I, detail::mask_members(mj));
      }
    } else {
      std::vector<std::vector<std::vector<std::size_t>>> by_size_r(R + 1), by_size_c(C + 1);
      for (std::uint32_t mi = 1; mi < (1u << R); ++mi) {
        auto I = detail::mask_members(mi);
        by_size_r[I.size()].push_back(std::move(I));
      }
      for (std::uint32_t mj = 1; mj < (1u << C); ++mj) {
        auto J = detail::mask_members(mj);
        by_size_c[J.size()].push_back(std::move(J));
      }
      for (std::size_t k = 1; k <= std::min(R, C); ++k)
        for (const auto& I : by_size_r[k])
          for (const auto& J : by_size_c[k]) try_pair(I, J);
    }
  } else {
    warn("find_nash: symmetric game with " + std::to_string(R) +
         " strategies; only symmetric supports were enumerated");
  }
  return found;
}

/// Maximum-entropy member; symmetric equilibria take precedence when present.
inline MixedProfile max_entropy_ne(const std::vector<MixedProfile>& nes) {
  if (nes.empty()) throw InvalidArgument("max_entropy_ne: empty equilibrium set");
  const bool any_sym = std::any_of(nes.begin(), nes.end(), [](const MixedProfile& p) { return p.symmetric; });
  const MixedProfile* best = nullptr;
  for (const auto& p : nes) {
    if (any_sym && !p.symmetric) continue;
    if (!best || p.entropy > best->entropy) best = &p;
  }
  return *best;
}

// ---------------------------------------------------------------------------
// Run-level samples behind a payoff matrix

/// samples[i][j][role] = per-run mean payoffs of cell (i, j).
using CellSamples = std::vector<std::vector<std::array<std::vector<double>, 2>>>;

inline CellSamples cell_samples(const std::vector<MetaGameResult>& rs) {
  if (rs.empty()) throw InvalidArgument("cell_samples: no results");
  CellSamples out(rs[0].rows(), std::vector<std::array<std::vector<double>, 2>>(rs[0].cols()));
  for (const auto& r : rs) {
    if (r.rows() != out.size() || r.cols() != out[0].size()) throw InvalidArgument("cell_samples: shape mismatch");
    for (std::size_t i = 0; i < r.rows(); ++i)
      for (std::size_t j = 0; j < r.cols(); ++j)
        for (const auto& run : r.cells[i][j].runs)
          for (std::size_t q = 0; q < 2; ++q) out[i][j][q].push_back(run.mean[q]);
  }
  return out;
}

/// Samples matching symmetrize(): cell (i, j) row pools row(i, j) with col(j, i).
inline CellSamples symmetrize_samples(const CellSamples& s) {
  if (s.empty() || s.size() != s[0].size()) throw InvalidArgument("symmetrize_samples: samples must be square");
  CellSamples out = s;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j) {
      out[i][j][0] = s[i][j][0];
      out[i][j][0].insert(out[i][j][0].end(), s[j][i][1].begin(), s[j][i][1].end());
      out[i][j][1] = s[i][j][1];
      out[i][j][1].insert(out[i][j][1].end(), s[j][i][0].begin(), s[j][i][0].end());
    }
  return out;
}

namespace detail {

inline void check_samples(const PayoffMatrix& m, const CellSamples* s, const char* what) {
  if (!s) return;
  if (s->size() != m.size()) throw InvalidArgument(std::string(what) + ": samples dimension mismatch");
  for (const auto& row : *s)
    if (row.size() != m[0].size()) throw InvalidArgument(std::string(what) + ": samples dimension mismatch");
}

inline double mean_of(const std::vector<double>& xs) {
  double m = 0.0;
  for (double x : xs) m += x;
  return xs.empty() ? 0.0 : m / static_cast<double>(xs.size());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// NE-regret

struct RegretOptions {
  Role role = Role::kRow;
  double level = 0.95;
  bool bootstrap = false;
  std::size_t resamples = 2000;
  std::uint64_t seed = 0;
  double tol = 1e-6;  // zero test when no samples are available
};

struct Regret {
  double regret = 0.0;
  double ci_half = 0.0;
  bool ci_includes_zero = false;
};

inline void to_json(nlohmann::json& j, const Regret& r) {
  j = nlohmann::json{{"regret", r.regret}, {"ci_half", r.ci_half}, {"ci_includes_zero", r.ci_includes_zero}};
}

namespace detail {

inline std::vector<double> regrets_of(const PayoffMatrix& m, const MixedProfile& sigma, Role role) {
  const double v = expected_payoff(m, sigma.row_mix, sigma.col_mix, role);
  auto u = pure_payoffs(m, sigma, role);
  for (double& x : u) x = v - x;
  return u;
}

}  // namespace detail

/// regret_j = u(sigma) - u(M_j, sigma_-role) for every meta of `role`.
inline std::vector<Regret> ne_regret(const PayoffMatrix& m, const MixedProfile& sigma, const CellSamples* samples = nullptr,
                                     const RegretOptions& opts = {}) {
  check_matrix(m, "ne_regret");
  check_profile(m, sigma, "ne_regret");
  detail::check_samples(m, samples, "ne_regret");
  const std::size_t R = m.size(), C = m[0].size();
  const std::size_t q = idx(opts.role);
  const auto point = detail::regrets_of(m, sigma, opts.role);
  std::vector<Regret> out(point.size());
  for (std::size_t k = 0; k < point.size(); ++k) out[k].regret = point[k];

  if (!samples) {
    for (auto& r : out) r.ci_includes_zero = std::abs(r.regret) <= opts.tol;
    return out;
  }

  if (!opts.bootstrap) {
    const double z = ci_z(opts.level);
    for (std::size_t k = 0; k < out.size(); ++k) {
      double var = 0.0;
      for (std::size_t i = 0; i < R; ++i)
        for (std::size_t j = 0; j < C; ++j) {
          const auto& xs = (*samples)[i][j][q];
          if (xs.size() < 2) continue;
          double c = sigma.row_mix[i] * sigma.col_mix[j];
          if (opts.role == Role::kRow && i == k) c -= sigma.col_mix[j];
          if (opts.role == Role::kCol && j == k) c -= sigma.row_mix[i];
          var += c * c * sample_variance(xs) / static_cast<double>(xs.size());
        }
      out[k].ci_half = z * std::sqrt(var);
      out[k].ci_includes_zero = std::abs(out[k].regret) <= out[k].ci_half;
    }
    return out;
  }

  if (opts.resamples < 2) throw InvalidArgument("ne_regret: bootstrap needs at least two resamples");
  Rng rng(derive_seed(opts.seed, {0x626f6f74}));
  std::vector<std::vector<double>> draws(out.size());
  PayoffMatrix boot = m;
  for (std::size_t b = 0; b < opts.resamples; ++b) {
    for (std::size_t i = 0; i < R; ++i)
      for (std::size_t j = 0; j < C; ++j) {
        const auto& xs = (*samples)[i][j][q];
        if (xs.empty()) continue;
        double s = 0.0;
        for (std::size_t t = 0; t < xs.size(); ++t) s += xs[rng.below(xs.size())];
        // Shift keeps the point estimate as the center when the matrix is not
        // exactly the sample mean (e.g. symmetrized input).
        boot[i][j][q] = m[i][j][q] + s / static_cast<double>(xs.size()) - detail::mean_of(xs);
      }
    const auto r = detail::regrets_of(boot, sigma, opts.role);
    for (std::size_t k = 0; k < r.size(); ++k) draws[k].push_back(r[k]);
  }
  const double tail = 0.5 * (1.0 - opts.level);
  for (std::size_t k = 0; k < out.size(); ++k) {
    auto& d = draws[k];
    std::sort(d.begin(), d.end());
    auto at = [&](double p) {
      const double pos = p * static_cast<double>(d.size() - 1);
      const auto lo = static_cast<std::size_t>(std::floor(pos));
      const auto hi = std::min(lo + 1, d.size() - 1);
      return d[lo] + (pos - static_cast<double>(lo)) * (d[hi] - d[lo]);
    };
    const double lo = at(tail), hi = at(1.0 - tail);
    out[k].ci_half = 0.5 * (hi - lo);
    out[k].ci_includes_zero = lo <= 0.0 && 0.0 <= hi;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Uniform score

struct UniformScore {
  double score = 0.0;
  double coi = 0.0;      // percent
  double ci_half = 0.0;  // on the CoI scale, percent
};

inline void to_json(nlohmann::json& j, const UniformScore& s) {
  j = nlohmann::json{{"score", s.score}, {"coi", s.coi}, {"ci_half", s.ci_half}};
}

/// Mean payoff of each meta of `role` against a uniformly drawn opponent,
/// converted with (score - rN) / (rM - rN) * 100.
inline std::vector<UniformScore> uniform_score(const PayoffMatrix& m, double r_N, double r_M,
                                               const CellSamples* samples = nullptr, Role role = Role::kRow,
                                               double level = 0.95) {
  check_matrix(m, "uniform_score");
  detail::check_samples(m, samples, "uniform_score");
  if (!std::isfinite(r_N) || !std::isfinite(r_M) || r_M - r_N <= 1e-12)
    throw InvalidArgument("uniform_score: degenerate benchmarks");
  const std::size_t R = m.size(), C = m[0].size();
  const std::size_t n_self = role == Role::kRow ? R : C, n_opp = role == Role::kRow ? C : R;
  const double z = samples ? ci_z(level) : 0.0;
  std::vector<UniformScore> out(n_self);
  for (std::size_t a = 0; a < n_self; ++a) {
    double s = 0.0, var = 0.0;
    for (std::size_t b = 0; b < n_opp; ++b) {
      const std::size_t i = role == Role::kRow ? a : b, j = role == Role::kRow ? b : a;
      s += m[i][j][idx(role)];
      if (samples) {
        const auto& xs = (*samples)[i][j][idx(role)];
        if (xs.size() >= 2) var += sample_variance(xs) / static_cast<double>(xs.size());
      }
    }
    const double n = static_cast<double>(n_opp);
    out[a].score = s / n;
    out[a].coi = 100.0 * coi(out[a].score, r_N, r_M);
    out[a].ci_half = z * std::sqrt(var) / n / (r_M - r_N) * 100.0;
  }
  return out;
}

/// Per-role benchmarks; for symmetric costs these equal r_bar.
inline std::vector<UniformScore> uniform_score(const PayoffMatrix& m, const Benchmarks& b,
                                               const CellSamples* samples = nullptr, Role role = Role::kRow,
                                               double level = 0.95) {
  return uniform_score(m, b.r_competitive[idx(role)], b.r_monopoly[idx(role)], samples, role, level);
}

// ---------------------------------------------------------------------------
// Weighted best-response graphs

enum class GraphRole { kRow, kCol, kAggregate };

inline std::string to_string(GraphRole r) {
  switch (r) {
    case GraphRole::kRow: return "row";
    case GraphRole::kCol: return "col";
    case GraphRole::kAggregate: return "aggregate";
  }
  return "?";
}

struct BrGraph {
  std::vector<std::string> nodes;    // responders
  std::vector<std::string> targets;  // opponents responded to
  std::map<std::pair<std::size_t, std::size_t>, double> edge_weight;
  GraphRole role = GraphRole::kRow;
};

inline constexpr double kBrTieTol = 1e-12;

/// Adds one meta-game's best-response scores for `role` to g.
inline void add_br_scores(BrGraph& g, const PayoffMatrix& m, Role role) {
  check_matrix(m, "br_graph");
  const std::size_t R = m.size(), C = m[0].size();
  const std::size_t n_resp = role == Role::kRow ? R : C, n_tgt = role == Role::kRow ? C : R;
  for (std::size_t v = 0; v < n_tgt; ++v) {
    std::vector<double> p(n_resp);
    for (std::size_t u = 0; u < n_resp; ++u) p[u] = role == Role::kRow ? m[u][v][0] : m[v][u][1];
    const double hi = *std::max_element(p.begin(), p.end());
    const double lo = *std::min_element(p.begin(), p.end());
    const bool shifted = !(hi > 0.0);
    if (shifted)
      warn("br_graph: non-positive best payoff against target " + std::to_string(v) + "; using shifted scores");
    for (std::size_t u = 0; u < n_resp; ++u) {
      double w;
      if (hi - p[u] <= kBrTieTol * std::max(1.0, std::abs(hi)))
        w = 1.0;
      else
        w = shifted ? (p[u] - lo) / (hi - lo) : p[u] / hi;
      g.edge_weight[{u, v}] += w;
    }
  }
}

inline BrGraph br_graph(const std::vector<PayoffMatrix>& games, const std::vector<std::string>& row_labels,
                        const std::vector<std::string>& col_labels, GraphRole role) {
  if (games.empty()) throw InvalidArgument("br_graph: no meta-games");
  BrGraph g;
  g.role = role;
  if (role == GraphRole::kCol) {
    g.nodes = col_labels;
    g.targets = row_labels;
  } else {
    g.nodes = row_labels;
    g.targets = col_labels;
  }
  if (role == GraphRole::kAggregate && row_labels != col_labels)
    throw InvalidArgument("br_graph: aggregate graph needs identical row and col metas");
  for (const auto& m : games) {
    if (m.size() != row_labels.size() || m[0].size() != col_labels.size())
      throw InvalidArgument("br_graph: label/matrix dimension mismatch");
    if (role != GraphRole::kCol) add_br_scores(g, m, Role::kRow);
    if (role != GraphRole::kRow) add_br_scores(g, m, Role::kCol);
  }
  return g;
}

inline BrGraph br_graph(const std::vector<MetaGameResult>& rs, GraphRole role) {
  if (rs.empty()) throw InvalidArgument("br_graph: no meta-games");
  std::vector<PayoffMatrix> games;
  for (const auto& r : rs) games.push_back(payoff_matrix(r));
  return br_graph(games, rs[0].row_labels, rs[0].col_labels, role);
}

inline std::string to_dot(const BrGraph& g) {
  auto quote = [](const std::string& s) {
    std::string out = "\"";
    for (char c : s) {
      if (c == '"' || c == '\\') out += '\\';
      out += c;
    }
    return out + "\"";
  };
  const bool shared = g.nodes == g.targets;
  auto name = [&](bool responder, std::size_t k) {
    if (shared) return quote(g.nodes[k]);
    return quote((responder ? "r:" : "t:") + (responder ? g.nodes[k] : g.targets[k]));
  };
  std::ostringstream os;
  os.precision(6);
  os << "digraph br_" << to_string(g.role) << " {\n";
  for (std::size_t k = 0; k < g.nodes.size(); ++k) os << "  " << name(true, k) << ";\n";
  if (!shared)
    for (std::size_t k = 0; k < g.targets.size(); ++k) os << "  " << name(false, k) << ";\n";
  for (const auto& [e, w] : g.edge_weight)
    os << "  " << name(true, e.first) << " -> " << name(false, e.second) << " [score=" << w << ", label=\"" << w
       << "\"];\n";
  os << "}\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Adaptation deltas

struct CellDelta {
  std::array<double, 2> dpc{};                 // per role
  std::array<std::array<double, 2>, 2> dcr{};  // [role][cr_self, cr_opp]
};

inline void to_json(nlohmann::json& j, const CellDelta& d) { j = nlohmann::json{{"dpc", d.dpc}, {"dcr", d.dcr}}; }

/// Mean over runs of final-minus-initial PC and CR for every cell.
inline std::vector<std::vector<CellDelta>> delta_metrics(const MetaGameResult& r, const StageGame& g,
                                                         unsigned jobs = 1, const BrOptions& br = {}) {
  g.validate();
  const std::size_t R = r.rows(), C = r.cols();
  std::vector<std::vector<CellDelta>> out(R, std::vector<CellDelta>(C));
  parallel_for(R * C, jobs, [&](std::size_t k) {
    const std::size_t i = k / C, j = k % C;
    const CellResult& cell = r.cells[i][j];
    if (cell.runs.empty()) throw InvalidArgument("delta_metrics: cell without runs");
    std::array<Robustness, 2> cr0;
    for (std::size_t q = 0; q < 2; ++q) cr0[q] = cooperative_robustness(g, role_from_index(q), cell.initial_policy[q], br);
    const auto pc0 = paired_cooperativeness(g, Role::kRow, cell.initial_policy[0], cell.initial_policy[1]);
    std::array<std::map<std::vector<std::size_t>, Robustness>, 2> cache;
    CellDelta d;
    for (const auto& run : cell.runs) {
      std::array<PolicyTable, 2> fin;
      for (std::size_t q = 0; q < 2; ++q) {
        const Role role = role_from_index(q);
        if (run.final_greedy[q].size() != g.n_states()) throw InvalidArgument("delta_metrics: final policies absent");
        fin[q] = PolicyTable::deterministic(g.n_own(role), g.n_opp(role), run.final_greedy[q]);
        auto it = cache[q].find(run.final_greedy[q]);
        if (it == cache[q].end()) it = cache[q].emplace(run.final_greedy[q], cooperative_robustness(g, role, fin[q], br)).first;
        d.dcr[q][0] += it->second.cr_self - cr0[q].cr_self;
        d.dcr[q][1] += it->second.cr_opp - cr0[q].cr_opp;
      }
      const auto pc1 = paired_cooperativeness(g, Role::kRow, fin[0], fin[1]);
      d.dpc[0] += pc1.first - pc0.first;
      d.dpc[1] += pc1.second - pc0.second;
    }
    const double n = static_cast<double>(cell.runs.size());
    for (std::size_t q = 0; q < 2; ++q) {
      d.dpc[q] /= n;
      d.dcr[q][0] /= n;
      d.dcr[q][1] /= n;
    }
    out[i][j] = d;
  });
  return out;
}

}  // namespace collusion

#endif
