#ifndef COLLUSION_AGENTS_HPP
#define COLLUSION_AGENTS_HPP

// Tabular pricing agents: a representation Z, a decode rule that turns Z into
// an action at the current state, and an update rule driven by observed play.

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "collusion/core.hpp"
#include "collusion/env.hpp"
#include "collusion/game.hpp"
#include "collusion/values.hpp"
#include "json.hpp"

namespace collusion {

/// Exploration rate eps_t = eps0 * exp(-delta * t).
struct EpsilonSchedule {
  double epsilon0 = 0.0;
  double decay = 0.0;

  double at(std::uint64_t t) const { return epsilon0 * std::exp(-decay * static_cast<double>(t)); }
  bool operator==(const EpsilonSchedule&) const = default;
};

struct QTable {
  std::size_t n_own = 0, n_opp = 0;
  std::vector<double> q;  // state-major, n_own columns
  double alpha = 0.1;
  double gamma = 0.95;
  EpsilonSchedule epsilon;
  std::uint64_t t = 0;  // rounds played, drives the exploration schedule

  QTable() = default;
  QTable(std::size_t own, std::size_t opp, double fill = 0.0) : n_own(own), n_opp(opp), q(own * opp * own, fill) {}

  std::size_t n_states() const { return n_own * n_opp; }
  double& operator()(std::size_t s, std::size_t a) { return q[s * n_own + a]; }
  double operator()(std::size_t s, std::size_t a) const { return q[s * n_own + a]; }

  std::size_t argmax(std::size_t s) const {
    std::size_t best = 0;
    for (std::size_t a = 1; a < n_own; ++a)
      if ((*this)(s, a) > (*this)(s, best)) best = a;
    return best;
  }
  double row_max(std::size_t s) const { return (*this)(s, argmax(s)); }
  double row_min(std::size_t s) const {
    double m = (*this)(s, 0);
    for (std::size_t a = 1; a < n_own; ++a) m = std::min(m, (*this)(s, a));
    return m;
  }

  void validate() const {
    if (q.size() != n_states() * n_own || n_own == 0) throw InvalidArgument("QTable: dimension mismatch");
    for (double x : q)
      if (!std::isfinite(x)) throw InvalidArgument("QTable: non-finite entry");
  }

  bool operator==(const QTable&) const = default;
};

inline void to_json(nlohmann::json& j, const QTable& z) {
  j = nlohmann::json{{"n_own", z.n_own},
                     {"n_opp", z.n_opp},
                     {"q", z.q},
                     {"alpha", z.alpha},
                     {"gamma", z.gamma},
                     {"epsilon0", z.epsilon.epsilon0},
                     {"epsilon_decay", z.epsilon.decay},
                     {"t", z.t}};
}

inline void from_json(const nlohmann::json& j, QTable& z) {
  z.n_own = j.at("n_own").get<std::size_t>();
  z.n_opp = j.at("n_opp").get<std::size_t>();
  z.q = j.at("q").get<std::vector<double>>();
  z.alpha = j.at("alpha").get<double>();
  z.gamma = j.at("gamma").get<double>();
  z.epsilon.epsilon0 = j.at("epsilon0").get<double>();
  z.epsilon.decay = j.at("epsilon_decay").get<double>();
  z.t = j.at("t").get<std::uint64_t>();
  z.validate();
}

/// Decoded policy: argmax w.p. 1 - eps plus eps spread uniformly.
inline PolicyTable q_decode(const QTable& z, double epsilon) {
  PolicyTable p(z.n_own, z.n_opp);
  const double spread = epsilon / static_cast<double>(z.n_own);
  for (std::size_t s = 0; s < z.n_states(); ++s) {
    for (std::size_t a = 0; a < z.n_own; ++a) p(s, a) = spread;
    p(s, z.argmax(s)) += 1.0 - epsilon;
  }
  return p;
}

inline PolicyTable q_greedy(const QTable& z) { return q_decode(z, 0.0); }

inline std::size_t q_act(const QTable& z, std::size_t s, double epsilon, Rng& rng) {
  if (epsilon > 0.0 && rng.uniform() < epsilon) return rng.below(z.n_own);
  return z.argmax(s);
}

/// One Q-learning step on (prev_state, action). Returns whether the greedy
/// action at prev_state changed.
inline bool q_update(QTable& z, std::size_t prev_state, std::size_t action, double reward, std::size_t next_state) {
  if (prev_state >= z.n_states() || next_state >= z.n_states() || action >= z.n_own)
    throw InvalidArgument("q_update: index out of range");
  const std::size_t before = z.argmax(prev_state);
  double& cell = z(prev_state, action);
  cell += z.alpha * (reward + z.gamma * z.row_max(next_state) - cell);
  return z.argmax(prev_state) != before;
}

/// Pretraining initialization: the discounted payoff of each own price
/// against a uniformly random opponent, Q(s, a) = sum_b r(a, b) / ((1 - gamma) n_opp).
inline QTable q_init_uniform_opponent(const StageGame& g, Role role) {
  QTable z(g.n_own(role), g.n_opp(role));
  z.gamma = g.gamma;
  for (std::size_t a = 0; a < z.n_own; ++a) {
    double sum = 0.0;
    for (std::size_t b = 0; b < z.n_opp; ++b) sum += g.reward(role, a, b);
    const double v = sum / ((1.0 - g.gamma) * static_cast<double>(z.n_opp));
    for (std::size_t s = 0; s < z.n_states(); ++s) z(s, a) = v;
  }
  return z;
}

/// I.i.d. uniform Q-values on [lo, hi].
inline QTable random_q_init(Rng& rng, std::size_t n_own, std::size_t n_opp, double gamma, double lo, double hi) {
  if (!(hi >= lo)) throw InvalidArgument("random_q_init: empty interval");
  QTable z(n_own, n_opp);
  z.gamma = gamma;
  for (double& x : z.q) x = rng.uniform(lo, hi);
  return z;
}

/// Default RD interval [Q^N, Q^M].
inline QTable random_q_init(Rng& rng, std::size_t n_own, std::size_t n_opp, double gamma, const Benchmarks& b) {
  return random_q_init(rng, n_own, n_opp, gamma, b.r_bar_N / (1.0 - gamma), b.r_bar_M / (1.0 - gamma));
}

/// Per-state affine map of pretrained Q-values onto the true action values of
/// the converged pair, shifted so the best state's greedy entry sits at
/// Q^N + f (Q^M - Q^N). Argmax and within-state order are preserved.
inline QTable rescale_q(const QTable& raw, const PolicyTable& pi, const PolicyTable& pi_partner, double f,
                        const StageGame& g, Role role, const Benchmarks& b) {
  if (!(f >= 0.0 && f <= 1.0)) throw InvalidArgument("rescale_q: f must lie in [0, 1]");
  const ValueVector v = state_values(g, role, pi, pi_partner);
  const std::vector<double> qtrue = action_values(g, role, pi_partner, v);
  const double qn = b.r_bar_N / (1.0 - g.gamma), qm = b.r_bar_M / (1.0 - g.gamma);
  const double shift = qn + f * (qm - qn) - *std::max_element(v.begin(), v.end());
  QTable z = raw;
  const std::size_t na = raw.n_own;
  for (std::size_t s = 0; s < raw.n_states(); ++s) {
    const double qmin = *std::min_element(qtrue.begin() + static_cast<std::ptrdiff_t>(s * na),
                                          qtrue.begin() + static_cast<std::ptrdiff_t>((s + 1) * na));
    const double zmin = raw.row_min(s), zmax = raw.row_max(s);
    const double base = shift + qmin;
    if (zmax == zmin) {
      warn("rescale_q: flat Q row at state " + std::to_string(s) + "; mapped to the target minimum");
      for (std::size_t a = 0; a < na; ++a) z(s, a) = base;
      continue;
    }
    // A greedy action that is also the worst true action would collapse the
    // row; keep a minimal spread so the argmax survives.
    const double span = std::max(v[s] - qmin, 1e-10);
    for (std::size_t a = 0; a < na; ++a) z(s, a) = base + (raw(s, a) - zmin) * span / (zmax - zmin);
  }
  return z;
}

// ---------------------------------------------------------------------------
// State-indexed UCB.

enum class Phase { kPretrain, kTest };

struct UcbTable {
  std::size_t n_own = 0, n_opp = 0;
  std::vector<double> counts;
  std::vector<double> rewards;
  double alpha = 1.0;  // test-time increment
  double count_cap = 5000.0;

  UcbTable() = default;
  UcbTable(std::size_t own, std::size_t opp)
      : n_own(own), n_opp(opp), counts(own * opp * own, 0.0), rewards(own * opp * own, 0.0) {}

  std::size_t n_states() const { return n_own * n_opp; }
  double count(std::size_t s, std::size_t a) const { return counts[s * n_own + a]; }
  double reward_sum(std::size_t s, std::size_t a) const { return rewards[s * n_own + a]; }
  double mean(std::size_t s, std::size_t a) const {
    const double c = count(s, a);
    return c > 0.0 ? reward_sum(s, a) / c : 0.0;
  }

  void validate() const {
    if (n_own == 0 || counts.size() != n_states() * n_own || rewards.size() != counts.size())
      throw InvalidArgument("UcbTable: dimension mismatch");
    for (double c : counts)
      if (!(c >= 0.0) || !std::isfinite(c)) throw InvalidArgument("UcbTable: negative or non-finite count");
  }

  bool operator==(const UcbTable&) const = default;
};

inline void to_json(nlohmann::json& j, const UcbTable& z) {
  j = nlohmann::json{{"n_own", z.n_own},   {"n_opp", z.n_opp}, {"counts", z.counts},
                     {"rewards", z.rewards}, {"alpha", z.alpha}, {"count_cap", z.count_cap}};
}

inline void from_json(const nlohmann::json& j, UcbTable& z) {
  z.n_own = j.at("n_own").get<std::size_t>();
  z.n_opp = j.at("n_opp").get<std::size_t>();
  z.counts = j.at("counts").get<std::vector<double>>();
  z.rewards = j.at("rewards").get<std::vector<double>>();
  z.alpha = j.at("alpha").get<double>();
  z.count_cap = j.at("count_cap").get<double>();
  z.validate();
}

/// Arm chosen at state s: unvisited arms first (lowest index), otherwise the
/// largest mean + sqrt(2 ln count(s) / count(s, a)).
inline std::size_t ucb_choose(const UcbTable& z, std::size_t s) {
  double total = 0.0;
  for (std::size_t a = 0; a < z.n_own; ++a) {
    if (z.count(s, a) <= 0.0) return a;
    total += z.count(s, a);
  }
  // Fractional test-time mass can leave count(s) below 1; the bonus is then 0.
  const double log_total = total > 1.0 ? std::log(total) : 0.0;
  std::size_t best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < z.n_own; ++a) {
    const double score = z.mean(s, a) + std::sqrt(2.0 * log_total / z.count(s, a));
    if (score > best_score) best_score = score, best = a;
  }
  return best;
}

inline PolicyTable ucb_decode(const UcbTable& z) {
  PolicyTable p(z.n_own, z.n_opp);
  for (std::size_t s = 0; s < z.n_states(); ++s) p(s, ucb_choose(z, s)) = 1.0;
  return p;
}

/// Adds visit and reward mass to (prev_state, action). During pretraining the
/// increment is 1 and a cell at the cap is frozen. Returns whether the chosen
/// arm at prev_state changed.
inline bool ucb_update(UcbTable& z, std::size_t prev_state, std::size_t action, double reward, Phase phase) {
  if (prev_state >= z.n_states() || action >= z.n_own) throw InvalidArgument("ucb_update: index out of range");
  const std::size_t before = ucb_choose(z, prev_state);
  const std::size_t cell = prev_state * z.n_own + action;
  const double inc = phase == Phase::kPretrain ? 1.0 : z.alpha;
  if (phase == Phase::kPretrain && z.counts[cell] + inc > z.count_cap) return false;
  z.counts[cell] += inc;
  z.rewards[cell] += inc * reward;
  return ucb_choose(z, prev_state) != before;
}

/// Counts uniform on [0, cap], mean rewards uniform on [min_r, max_r].
inline UcbTable random_ucb_init(Rng& rng, std::size_t n_own, std::size_t n_opp, double min_r, double max_r,
                                double cap = 5000.0) {
  if (!(max_r >= min_r) || !(cap > 0.0)) throw InvalidArgument("random_ucb_init: empty interval");
  UcbTable z(n_own, n_opp);
  z.count_cap = cap;
  for (std::size_t i = 0; i < z.counts.size(); ++i) {
    z.counts[i] = rng.uniform(0.0, cap);
    z.rewards[i] = z.counts[i] * rng.uniform(min_r, max_r);
  }
  return z;
}

// ---------------------------------------------------------------------------
// Agents: a representation with its decode and update rules.

class Agent {
 public:
  virtual ~Agent() = default;
  virtual std::string algorithm() const = 0;
  /// Action at `state` (own-perspective index of the previous round).
  virtual std::size_t act(std::size_t state, Rng& rng) = 0;
  /// Learn from the round that moved prev_state -> next_state. Returns whether
  /// the decoded action at prev_state changed.
  virtual bool update(std::size_t prev_state, std::size_t action, double reward, std::size_t next_state) = 0;
  /// Greedy (exploitation) policy of the current representation.
  virtual PolicyTable policy() const = 0;
  virtual nlohmann::json representation() const = 0;
  virtual std::unique_ptr<Agent> clone() const = 0;
};

class QAgent : public Agent {
 public:
  explicit QAgent(QTable z) : z_(std::move(z)) {}
  std::string algorithm() const override { return "q"; }
  std::size_t act(std::size_t state, Rng& rng) override {
    const double eps = z_.epsilon.at(z_.t);
    ++z_.t;
    return q_act(z_, state, eps, rng);
  }
  bool update(std::size_t prev, std::size_t action, double reward, std::size_t next) override {
    return q_update(z_, prev, action, reward, next);
  }
  PolicyTable policy() const override { return q_greedy(z_); }
  nlohmann::json representation() const override { return z_; }
  std::unique_ptr<Agent> clone() const override { return std::make_unique<QAgent>(*this); }
  const QTable& table() const { return z_; }
  QTable& table() { return z_; }

 private:
  QTable z_;
};

class UcbAgent : public Agent {
 public:
  UcbAgent(UcbTable z, Phase phase) : z_(std::move(z)), phase_(phase) {}
  std::string algorithm() const override { return "ucb"; }
  std::size_t act(std::size_t state, Rng&) override { return ucb_choose(z_, state); }
  bool update(std::size_t prev, std::size_t action, double reward, std::size_t) override {
    return ucb_update(z_, prev, action, reward, phase_);
  }
  PolicyTable policy() const override { return ucb_decode(z_); }
  nlohmann::json representation() const override { return z_; }
  std::unique_ptr<Agent> clone() const override { return std::make_unique<UcbAgent>(*this); }
  const UcbTable& table() const { return z_; }
  UcbTable& table() { return z_; }

 private:
  UcbTable z_;
  Phase phase_;
};

/// Plays a fixed policy table and never learns (test fixtures, recovered LLM
/// policies).
class PolicyAgent : public Agent {
 public:
  explicit PolicyAgent(PolicyTable p) : p_(std::move(p)), deterministic_(p_.is_deterministic()), greedy_(p_.greedy()) {}
  std::string algorithm() const override { return "policy"; }
  std::size_t act(std::size_t state, Rng& rng) override {
    if (deterministic_) return greedy_[state];
    double u = rng.uniform(), acc = 0.0;
    for (std::size_t a = 0; a < p_.n_own; ++a) {
      acc += p_(state, a);
      if (u < acc) return a;
    }
    return p_.n_own - 1;
  }
  bool update(std::size_t, std::size_t, double, std::size_t) override { return false; }
  PolicyTable policy() const override { return p_; }
  nlohmann::json representation() const override { return p_; }
  std::unique_ptr<Agent> clone() const override { return std::make_unique<PolicyAgent>(*this); }

 private:
  PolicyTable p_;
  bool deterministic_;
  std::vector<std::size_t> greedy_;
};

}  // namespace collusion

#endif  // COLLUSION_AGENTS_HPP
