#ifndef COLLUSION_VALUES_HPP
#define COLLUSION_VALUES_HPP

// Policies over one-round-memory states, exact state values, best responses
// and the paired-cooperativeness / cooperative-robustness metrics.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "collusion/core.hpp"
#include "collusion/game.hpp"
#include "json.hpp"

namespace collusion {

/// Per-state distribution over own actions, stored row-major.
struct PolicyTable {
  std::size_t n_own = 0;
  std::size_t n_opp = 0;
  std::vector<double> dist;

  PolicyTable() = default;
  PolicyTable(std::size_t own, std::size_t opp) : n_own(own), n_opp(opp), dist(own * opp * own, 0.0) {}

  std::size_t n_states() const { return n_own * n_opp; }
  std::size_t n_actions() const { return n_own; }

  double& operator()(std::size_t s, std::size_t a) { return dist[s * n_own + a]; }
  double operator()(std::size_t s, std::size_t a) const { return dist[s * n_own + a]; }

  static PolicyTable uniform(std::size_t own, std::size_t opp) {
    PolicyTable p(own, opp);
    std::fill(p.dist.begin(), p.dist.end(), 1.0 / static_cast<double>(own));
    return p;
  }

  static PolicyTable deterministic(std::size_t own, std::size_t opp, const std::vector<std::size_t>& choice) {
    PolicyTable p(own, opp);
    if (choice.size() != p.n_states()) throw InvalidArgument("PolicyTable::deterministic: wrong choice length");
    for (std::size_t s = 0; s < choice.size(); ++s) {
      if (choice[s] >= own) throw InvalidArgument("PolicyTable::deterministic: action out of range");
      p(s, choice[s]) = 1.0;
    }
    return p;
  }

  /// Most likely action per state, lowest index on ties.
  std::vector<std::size_t> greedy() const {
    std::vector<std::size_t> out(n_states(), 0);
    for (std::size_t s = 0; s < n_states(); ++s)
      for (std::size_t a = 1; a < n_own; ++a)
        if ((*this)(s, a) > (*this)(s, out[s])) out[s] = a;
    return out;
  }

  bool is_deterministic() const {
    for (std::size_t s = 0; s < n_states(); ++s) {
      std::size_t ones = 0;
      for (std::size_t a = 0; a < n_own; ++a) {
        const double x = (*this)(s, a);
        if (x == 1.0) ++ones;
        else if (x != 0.0) return false;
      }
      if (ones != 1) return false;
    }
    return true;
  }

  void validate() const {
    if (n_own == 0 || n_opp == 0) throw InvalidArgument("PolicyTable: empty dimensions");
    if (dist.size() != n_states() * n_own) throw InvalidArgument("PolicyTable: storage size mismatch");
    for (std::size_t s = 0; s < n_states(); ++s) {
      double sum = 0.0;
      for (std::size_t a = 0; a < n_own; ++a) {
        const double x = (*this)(s, a);
        if (!(x >= 0.0) || !std::isfinite(x)) throw InvalidArgument("PolicyTable: negative or non-finite entry");
        sum += x;
      }
      if (std::abs(sum - 1.0) > 1e-9)
        throw InvalidArgument("PolicyTable: row " + std::to_string(s) + " sums to " + std::to_string(sum));
    }
  }

  bool operator==(const PolicyTable&) const = default;
};

inline void to_json(nlohmann::json& j, const PolicyTable& p) {
  j = nlohmann::json{{"n_own", p.n_own}, {"n_opp", p.n_opp}, {"dist", p.dist}};
}

inline void from_json(const nlohmann::json& j, PolicyTable& p) {
  p.n_own = j.at("n_own").get<std::size_t>();
  p.n_opp = j.at("n_opp").get<std::size_t>();
  p.dist = j.at("dist").get<std::vector<double>>();
  p.validate();
}

using ValueVector = std::vector<double>;

namespace detail {

inline void check_policy(const StageGame& g, Role r, const PolicyTable& p, const char* what) {
  if (p.n_own != g.n_own(r) || p.n_opp != g.n_opp(r))
    throw InvalidArgument(std::string(what) + ": policy dimensions do not match the game grid");
}

/// Transition matrix over `role`-perspective states induced by (pi, pi_opp).
inline Eigen::MatrixXd transition_matrix(const StageGame& g, Role role, const PolicyTable& pi,
                                         const PolicyTable& pi_opp) {
  const std::size_t n = g.n_states(), n_opp = g.n_opp(role);
  Eigen::MatrixXd T = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t so = g.opp_state(role, s);
    for (std::size_t a = 0; a < g.n_own(role); ++a) {
      const double pa = pi(s, a);
      if (pa == 0.0) continue;
      for (std::size_t b = 0; b < n_opp; ++b) {
        const double pb = pi_opp(so, b);
        if (pb == 0.0) continue;
        T(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(state_index(a, b, n_opp))) += pa * pb;
      }
    }
  }
  return T;
}

}  // namespace detail

/// Exact V^{pi|pi_opp} for `role`: solves (I - gamma T) V = r.
inline ValueVector state_values(const StageGame& g, Role role, const PolicyTable& pi, const PolicyTable& pi_opp) {
  detail::check_policy(g, role, pi, "state_values");
  detail::check_policy(g, other(role), pi_opp, "state_values");
  const auto n = static_cast<Eigen::Index>(g.n_states());
  const Eigen::MatrixXd T = detail::transition_matrix(g, role, pi, pi_opp);
  Eigen::VectorXd r(n);
  for (Eigen::Index s = 0; s < n; ++s) r(s) = g.reward(role, static_cast<std::size_t>(s));
  const Eigen::MatrixXd M = Eigen::MatrixXd::Identity(n, n) - g.gamma * T;
  const Eigen::PartialPivLU<Eigen::MatrixXd> lu(M);
  Eigen::VectorXd v = lu.solve(r);
  auto residual = [&] { return (v - (r + g.gamma * (T * v))).cwiseAbs().maxCoeff(); };
  double res = residual();
  // Iterative refinement; always applied on large systems.
  for (int pass = 0; pass < 5 && (res >= 1e-12 || n > 1024); ++pass) {
    v += lu.solve(r - M * v);
    const double next = residual();
    if (next >= res && n <= 1024) break;
    res = next;
    if (n > 1024 && res < 1e-12) break;
  }
  res = residual();
  if (!(res < 1e-9)) throw ConvergenceError("state_values: linear solve residual too large", res);
  return ValueVector(v.data(), v.data() + n);
}

inline double mean_state_value(const ValueVector& v) {
  if (v.empty()) throw InvalidArgument("mean_state_value: empty state space");
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// Q^{pi|pi_opp}(s, a) = r(s) + gamma E_b V((a, b)) for every own action a,
/// given the value vector V of the acting role.
inline std::vector<double> action_values(const StageGame& g, Role role, const PolicyTable& pi_opp,
                                         const ValueVector& v) {
  const std::size_t n = g.n_states(), na = g.n_own(role), nb = g.n_opp(role);
  std::vector<double> q(n * na, 0.0);
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t so = g.opp_state(role, s);
    for (std::size_t a = 0; a < na; ++a) {
      double ev = 0.0;
      for (std::size_t b = 0; b < nb; ++b) ev += pi_opp(so, b) * v[state_index(a, b, nb)];
      q[s * na + a] = g.reward(role, s) + g.gamma * ev;
    }
  }
  return q;
}

struct BestResponse {
  PolicyTable policy;
  ValueVector values;                       // exact values of `policy`
  std::vector<double> q;                    // Q*(s, a), row-major
  std::vector<std::vector<std::size_t>> ties;  // optimal action set per state
  int sweeps = 0;
};

struct BrOptions {
  double tolerance = 1e-10;
  int max_sweeps = 100'000;
  double tie_tolerance = 1e-8;
};

/// Best response for `role` against pi_opp by value iteration, polished by
/// exact policy evaluation so the returned values carry no iteration error.
inline BestResponse best_response(const StageGame& g, Role role, const PolicyTable& pi_opp, const BrOptions& opts = {}) {
  detail::check_policy(g, other(role), pi_opp, "best_response");
  const std::size_t n = g.n_states(), na = g.n_own(role);
  ValueVector v(n, 0.0);
  BestResponse out;
  double change = std::numeric_limits<double>::infinity();
  while (change >= opts.tolerance) {
    if (out.sweeps >= opts.max_sweeps)
      throw ConvergenceError("best_response: sweep cap exceeded", change);
    const std::vector<double> q = action_values(g, role, pi_opp, v);
    change = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      const double m = *std::max_element(q.begin() + static_cast<std::ptrdiff_t>(s * na),
                                         q.begin() + static_cast<std::ptrdiff_t>((s + 1) * na));
      change = std::max(change, std::abs(m - v[s]));
      v[s] = m;
    }
    ++out.sweeps;
  }

  auto greedy_from = [&](const std::vector<double>& q, const std::vector<std::size_t>* current) {
    std::vector<std::size_t> choice(n, 0);
    for (std::size_t s = 0; s < n; ++s) {
      const auto row = q.begin() + static_cast<std::ptrdiff_t>(s * na);
      const double m = *std::max_element(row, row + static_cast<std::ptrdiff_t>(na));
      std::size_t pick = na;
      for (std::size_t a = 0; a < na && pick == na; ++a)
        if (m - row[static_cast<std::ptrdiff_t>(a)] < opts.tie_tolerance) pick = a;
      // Keep the incumbent unless the switch is a strict improvement.
      if (current && m - q[s * na + (*current)[s]] < opts.tie_tolerance) pick = (*current)[s];
      choice[s] = pick;
    }
    return choice;
  };

  std::vector<std::size_t> choice = greedy_from(action_values(g, role, pi_opp, v), nullptr);
  for (int it = 0;; ++it) {
    out.policy = PolicyTable::deterministic(na, g.n_opp(role), choice);
    out.values = state_values(g, role, out.policy, pi_opp);
    out.q = action_values(g, role, pi_opp, out.values);
    std::vector<std::size_t> next = greedy_from(out.q, &choice);
    if (next == choice || it >= 100) break;
    choice = std::move(next);
  }
  out.ties.assign(n, {});
  for (std::size_t s = 0; s < n; ++s) {
    const auto row = out.q.begin() + static_cast<std::ptrdiff_t>(s * na);
    const double m = *std::max_element(row, row + static_cast<std::ptrdiff_t>(na));
    for (std::size_t a = 0; a < na; ++a)
      if (m - row[static_cast<std::ptrdiff_t>(a)] < opts.tie_tolerance) out.ties[s].push_back(a);
  }
  return out;
}

/// (V̄^{a|b}, V̄^{b|a}) with pi_a playing `role_a`.
inline std::pair<double, double> paired_cooperativeness(const StageGame& g, Role role_a, const PolicyTable& pi_a,
                                                        const PolicyTable& pi_b) {
  return {mean_state_value(state_values(g, role_a, pi_a, pi_b)),
          mean_state_value(state_values(g, other(role_a), pi_b, pi_a))};
}

/// Among the best responses to pi (any per-state selection from br.ties), the
/// one minimizing pi's values. Solved exactly as a minimizing MDP whose
/// controller picks tied actions; the minimizer is state-wise, so it also
/// minimizes the mean.
inline PolicyTable worst_case_best_response(const StageGame& g, Role role, const PolicyTable& pi,
                                            const BestResponse& br) {
  const Role br_role = other(role);
  const std::size_t n = g.n_states(), na = g.n_own(role), nb = g.n_own(br_role);
  // Expected continuation for pi when the responder plays b from pi-state s.
  auto cont = [&](const ValueVector& w, std::size_t s, std::size_t b) {
    double ev = 0.0;
    for (std::size_t a = 0; a < na; ++a) ev += pi(s, a) * w[state_index(a, b, nb)];
    return ev;
  };
  auto select = [&](const ValueVector& w, const std::vector<std::size_t>* current) {
    std::vector<std::size_t> choice(n, 0);
    for (std::size_t sb = 0; sb < n; ++sb) {
      const std::size_t s = g.opp_state(br_role, sb);
      const auto& tied = br.ties[sb];
      std::size_t pick = tied.front();
      double best = cont(w, s, pick);
      for (std::size_t b : tied) {
        const double c = cont(w, s, b);
        if (c < best - 1e-12) best = c, pick = b;
      }
      if (current && cont(w, s, (*current)[sb]) <= best + 1e-12) pick = (*current)[sb];
      choice[sb] = pick;
    }
    return choice;
  };

  ValueVector w(n, 0.0);
  for (int sweep = 0; sweep < 100'000; ++sweep) {
    double change = 0.0;
    ValueVector next(n);
    for (std::size_t s = 0; s < n; ++s) {
      const std::size_t sb = g.opp_state(role, s);
      double m = std::numeric_limits<double>::infinity();
      for (std::size_t b : br.ties[sb]) m = std::min(m, cont(w, s, b));
      next[s] = g.reward(role, s) + g.gamma * m;
      change = std::max(change, std::abs(next[s] - w[s]));
    }
    w.swap(next);
    if (change < 1e-10) break;
  }
  std::vector<std::size_t> choice = select(w, nullptr);
  PolicyTable pb;
  for (int it = 0;; ++it) {
    pb = PolicyTable::deterministic(nb, na, choice);
    w = state_values(g, role, pi, pb);
    std::vector<std::size_t> next = select(w, &choice);
    if (next == choice || it >= 100) break;
    choice = std::move(next);
  }
  return pb;
}

struct Robustness {
  double cr_self = 0.0;  // V̄^{pi|pi_b}
  double cr_opp = 0.0;   // V̄^{pi_b|pi}
  PolicyTable worst_br;
};

inline Robustness cooperative_robustness(const StageGame& g, Role role, const PolicyTable& pi, const BrOptions& opts = {}) {
  detail::check_policy(g, role, pi, "cooperative_robustness");
  const BestResponse br = best_response(g, other(role), pi, opts);
  Robustness out;
  out.worst_br = worst_case_best_response(g, role, pi, br);
  const auto [self, opp] = paired_cooperativeness(g, role, pi, out.worst_br);
  out.cr_self = self;
  out.cr_opp = opp;
  return out;
}

/// CSV keyed by (own price index, opponent price index).
inline std::string values_csv(const StageGame& g, Role role, const ValueVector& v) {
  std::ostringstream os;
  os.precision(17);
  os << "own_index,opp_index,value\n";
  const std::size_t nb = g.n_opp(role);
  for (std::size_t s = 0; s < v.size(); ++s) os << s / nb << ',' << s % nb << ',' << v[s] << '\n';
  return os.str();
}

}  // namespace collusion

#endif  // COLLUSION_VALUES_HPP
