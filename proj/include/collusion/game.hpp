#ifndef COLLUSION_GAME_HPP
#define COLLUSION_GAME_HPP

// Finite two-player repeated game with one-round memory. A state is the
// previous round's action pair seen from a role's own perspective:
// s = own * n_opp + opp. The opponent sees the same round as (opp, own).

#include <cstddef>
#include <string>
#include <vector>

#include "collusion/core.hpp"
#include "collusion/env.hpp"

namespace collusion {

inline std::size_t state_index(std::size_t own, std::size_t opp, std::size_t n_opp) { return own * n_opp + opp; }

/// The same round viewed by the other player.
inline std::size_t swap_state(std::size_t s, std::size_t n_own, std::size_t n_opp) {
  return (s % n_opp) * n_own + s / n_opp;
}

struct StageGame {
  std::array<std::size_t, 2> n_actions{0, 0};
  // payoff[role][own * n_opp + opp]
  std::array<std::vector<double>, 2> payoff;
  double gamma = 0.95;

  std::size_t n_own(Role r) const { return n_actions[idx(r)]; }
  std::size_t n_opp(Role r) const { return n_actions[idx(other(r))]; }
  std::size_t n_states() const { return n_actions[0] * n_actions[1]; }

  double reward(Role r, std::size_t s) const { return payoff[idx(r)][s]; }
  double reward(Role r, std::size_t own, std::size_t opp) const {
    return payoff[idx(r)][state_index(own, opp, n_opp(r))];
  }

  std::size_t opp_state(Role r, std::size_t s) const { return swap_state(s, n_own(r), n_opp(r)); }

  double min_payoff() const {
    double m = payoff[0][0];
    for (const auto& t : payoff)
      for (double x : t) m = std::min(m, x);
    return m;
  }
  double max_payoff() const {
    double m = payoff[0][0];
    for (const auto& t : payoff)
      for (double x : t) m = std::max(m, x);
    return m;
  }

  void validate() const {
    if (n_actions[0] == 0 || n_actions[1] == 0) throw InvalidArgument("StageGame: empty action set");
    if (!(gamma >= 0.0 && gamma < 1.0)) throw InvalidArgument("StageGame: gamma must lie in [0, 1)");
    for (const auto& t : payoff)
      if (t.size() != n_states()) throw InvalidArgument("StageGame: payoff table size mismatch");
  }

  /// Bimatrix game given as row payoffs A[i][k] and column payoffs B[i][k]
  /// (row plays i, column plays k).
  static StageGame from_bimatrix(const std::vector<std::vector<double>>& A,
                                 const std::vector<std::vector<double>>& B, double gamma) {
    StageGame g;
    g.gamma = gamma;
    g.n_actions = {A.size(), A.empty() ? 0 : A[0].size()};
    g.payoff[0].assign(g.n_states(), 0.0);
    g.payoff[1].assign(g.n_states(), 0.0);
    for (std::size_t i = 0; i < g.n_actions[0]; ++i) {
      if (A[i].size() != g.n_actions[1] || B.size() != A.size() || B[i].size() != g.n_actions[1])
        throw InvalidArgument("StageGame::from_bimatrix: ragged payoff matrices");
      for (std::size_t k = 0; k < g.n_actions[1]; ++k) {
        g.payoff[0][state_index(i, k, g.n_actions[1])] = A[i][k];
        g.payoff[1][state_index(k, i, g.n_actions[0])] = B[i][k];
      }
    }
    g.validate();
    return g;
  }

  /// Repeated Prisoner's Dilemma with actions C = 0, D = 1.
  static StageGame prisoners_dilemma(double R = 3, double T = 5, double P = 1, double S = 0, double gamma = 0.95) {
    return from_bimatrix({{R, S}, {T, P}}, {{R, T}, {S, P}}, gamma);
  }

  /// Pricing game on per-player grids.
  static StageGame from_pricing(const PricingEnv& env, const GridPair& grids) {
    StageGame g;
    g.gamma = env.gamma;
    g.n_actions = {grids[0].size(), grids[1].size()};
    g.payoff[0].assign(g.n_states(), 0.0);
    g.payoff[1].assign(g.n_states(), 0.0);
    for (std::size_t i = 0; i < g.n_actions[0]; ++i)
      for (std::size_t k = 0; k < g.n_actions[1]; ++k) {
        const PricePair r = stage_profit({grids[0][i], grids[1][k]}, env);
        g.payoff[0][state_index(i, k, g.n_actions[1])] = r[0];
        g.payoff[1][state_index(k, i, g.n_actions[0])] = r[1];
      }
    g.validate();
    return g;
  }
};

}  // namespace collusion

#endif  // COLLUSION_GAME_HPP
