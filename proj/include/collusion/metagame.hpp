#ifndef COLLUSION_METAGAME_HPP
#define COLLUSION_METAGAME_HPP

// Empirical meta-games: strategy draws from categorized pools, base-game
// simulation and payoff estimation.

#include <array>
#include <cmath>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "collusion/agents.hpp"
#include "collusion/core.hpp"
#include "collusion/env.hpp"
#include "collusion/game.hpp"
#include "collusion/pretrain.hpp"
#include "collusion/values.hpp"
#include "json.hpp"

namespace collusion {

struct MetaStrategy {
  std::string label;
  Category category = Category::kNone;
  std::string algorithm = "q";  // q | ucb | policy
  double alpha = 0.5;
  std::optional<double> f = 1.0;  // Q-value rescale factor, q only; nullopt keeps raw values
  EpsilonSchedule epsilon;

  void validate() const {
    if (label.empty()) throw InvalidArgument("meta-strategy: empty label");
    if (category == Category::kNone) throw InvalidArgument("meta-strategy '" + label + "': category required");
    if (algorithm != "q" && algorithm != "ucb" && algorithm != "policy")
      throw InvalidArgument("meta-strategy '" + label + "': unknown algorithm '" + algorithm + "'");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw InvalidArgument("meta-strategy '" + label + "': alpha must lie in [0, 1]");
    if (f && !(*f >= 0.0 && *f <= 1.0)) throw InvalidArgument("meta-strategy '" + label + "': f must lie in [0, 1]");
    if (!(epsilon.epsilon0 >= 0.0 && epsilon.epsilon0 <= 1.0) || !(epsilon.decay >= 0.0))
      throw InvalidArgument("meta-strategy '" + label + "': invalid epsilon schedule");
    if (algorithm == "policy" && category == Category::kRD)
      throw InvalidArgument("meta-strategy '" + label + "': RD needs a learning algorithm");
  }
  bool operator==(const MetaStrategy&) const = default;
};

inline void to_json(nlohmann::json& j, const MetaStrategy& m) {
  j = nlohmann::json{{"label", m.label},
                     {"category", to_string(m.category)},
                     {"algorithm", m.algorithm},
                     {"alpha", m.alpha},
                     {"f", m.f ? nlohmann::json(*m.f) : nlohmann::json(nullptr)},
                     {"epsilon0", m.epsilon.epsilon0},
                     {"epsilon_decay", m.epsilon.decay}};
}

/// Missing keys take defaults; unknown keys are rejected.
inline void from_json(const nlohmann::json& j, MetaStrategy& m) {
  static const std::set<std::string> known{"label", "category", "algorithm", "alpha", "f", "epsilon0", "epsilon_decay"};
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw InvalidArgument("meta-strategy: unknown key '" + k + "'");
  m = MetaStrategy{};
  m.category = category_from_string(j.at("category").get<std::string>());
  if (j.contains("algorithm")) m.algorithm = j.at("algorithm").get<std::string>();
  if (j.contains("alpha")) m.alpha = j.at("alpha").get<double>();
  if (m.algorithm != "q") m.f.reset();
  if (j.contains("f")) m.f = j.at("f").is_null() ? std::nullopt : std::optional<double>(j.at("f").get<double>());
  if (j.contains("epsilon0")) m.epsilon.epsilon0 = j.at("epsilon0").get<double>();
  if (j.contains("epsilon_decay")) m.epsilon.decay = j.at("epsilon_decay").get<double>();
  if (j.contains("label")) {
    m.label = j.at("label").get<std::string>();
  } else {
    std::ostringstream os;
    os << to_string(m.category) << ' ' << m.alpha;
    m.label = os.str();
  }
  m.validate();
}

/// A drawn strategy: the initial agent plus its provenance.
struct Strategy {
  std::unique_ptr<Agent> agent;
  std::optional<std::size_t> pool_id;
  std::optional<std::size_t> partner_id;
  std::string label;

  Strategy() = default;
  Strategy(const Strategy& o)
      : agent(o.agent ? o.agent->clone() : nullptr), pool_id(o.pool_id), partner_id(o.partner_id), label(o.label) {}
  Strategy& operator=(const Strategy& o) {
    if (this != &o) *this = Strategy(o);
    return *this;
  }
  Strategy(Strategy&&) = default;
  Strategy& operator=(Strategy&&) = default;

  bool linked_to(const Strategy& o) const {
    if (!pool_id || !o.pool_id) return false;
    return *pool_id == *o.pool_id || (partner_id && *partner_id == *o.pool_id) ||
           (o.partner_id && *o.partner_id == *pool_id);
  }
};

inline constexpr int kRedrawCap = 1000;

/// Everything a draw needs besides the RNG.
struct DrawContext {
  const PolicyPool* pool = nullptr;
  const StageGame* game = nullptr;
  Benchmarks bench;
  Role role = Role::kRow;
};

inline std::vector<std::size_t> category_members(const PolicyPool& pool, const MetaStrategy& m, Role role) {
  return pool.members(m.category, pool.env.symmetric() ? std::nullopt : std::optional<Role>(role));
}

inline std::unique_ptr<Agent> make_test_agent(const MetaStrategy& m, const PolicyPoolEntry& e, const DrawContext& ctx) {
  if (m.algorithm == "policy") return std::make_unique<PolicyAgent>(e.policy);
  if (m.algorithm == "q") {
    const auto* raw = std::get_if<QTable>(&e.raw);
    if (!raw) throw InvalidArgument("meta-strategy '" + m.label + "' needs a Q pool");
    QTable z = *raw;
    if (m.f) z = rescale_q(*raw, e.policy, ctx.pool->by_id(e.partner_id).policy, *m.f, *ctx.game, ctx.role, ctx.bench);
    z.alpha = m.alpha;
    z.epsilon = m.epsilon;
    z.t = 0;
    return std::make_unique<QAgent>(std::move(z));
  }
  const auto* raw = std::get_if<UcbTable>(&e.raw);
  if (!raw) throw InvalidArgument("meta-strategy '" + m.label + "' needs a UCB pool");
  UcbTable z = *raw;
  z.alpha = m.alpha;
  return std::make_unique<UcbAgent>(std::move(z), Phase::kTest);
}

inline Strategy make_random_strategy(const MetaStrategy& m, const DrawContext& ctx, Rng& rng) {
  const StageGame& g = *ctx.game;
  const std::size_t no = g.n_own(ctx.role), np = g.n_opp(ctx.role);
  Strategy s;
  s.label = m.label;
  if (m.algorithm == "q") {
    QTable z = random_q_init(rng, no, np, g.gamma, ctx.bench);
    z.alpha = m.alpha;
    z.epsilon = m.epsilon;
    s.agent = std::make_unique<QAgent>(std::move(z));
  } else {
    UcbTable z = random_ucb_init(rng, no, np, g.min_payoff(), g.max_payoff(),
                                 ctx.pool ? ctx.pool->options.count_cap : 5000.0);
    z.alpha = m.alpha;
    s.agent = std::make_unique<UcbAgent>(std::move(z), Phase::kTest);
  }
  return s;
}

/// Uniform draw from the meta-strategy's category, redrawing while the id or
/// its partner is forbidden. RD ignores the pool.
inline Strategy draw_strategy(const MetaStrategy& m, const DrawContext& ctx, Rng& rng,
                              const std::set<std::size_t>& forbidden = {}) {
  if (m.category == Category::kRD) return make_random_strategy(m, ctx, rng);
  if (!ctx.pool) throw InvalidArgument("draw_strategy: meta-strategy '" + m.label + "' needs a pool");
  const auto members = category_members(*ctx.pool, m, ctx.role);
  if (members.empty())
    throw InvalidArgument("draw_strategy: category " + to_string(m.category) + " is empty in the pool (meta-strategy '" +
                          m.label + "')");
  for (int attempt = 0; attempt < kRedrawCap; ++attempt) {
    const std::size_t id = members[rng.below(members.size())];
    const PolicyPoolEntry& e = ctx.pool->by_id(id);
    if (forbidden.count(id) || forbidden.count(e.partner_id)) continue;
    Strategy s;
    s.pool_id = id;
    s.partner_id = e.partner_id;
    s.label = m.label;
    s.agent = make_test_agent(m, e, ctx);
    return s;
  }
  throw InvalidArgument("draw_strategy: redraw cap of " + std::to_string(kRedrawCap) + " exhausted for '" + m.label +
                        "'; the category needs more pool members");
}

// ---------------------------------------------------------------------------
// Base-game simulation.

struct SimulationOptions {
  std::uint64_t horizon = 10'000;
  std::uint64_t series_stride = 100;  // prefix means recorded every stride rounds
  bool operator==(const SimulationOptions&) const = default;
};

struct SimulationResult {
  std::array<double, 2> mean{};        // mean per-round stage profit over the horizon
  std::array<double, 2> discounted{};  // sum_t gamma^t r_t
  std::array<std::uint64_t, 2> updates{};
  std::vector<std::array<double, 2>> series;               // prefix means at t = stride, 2 stride, ...
  std::vector<std::array<std::uint64_t, 2>> update_series;  // cumulative argmax changes at the same points
  std::array<PolicyTable, 2> final_policy;
};

/// Plays the two agents from row-perspective state s0. Each round both act on
/// the previous state, the new state's profits are paid, and both update.
inline SimulationResult simulate_profile(Agent& a, Agent& b, const StageGame& g, std::size_t s0,
                                         const SimulationOptions& o, Rng& rng,
                                         std::vector<std::array<double, 2>>* per_round = nullptr) {
  if (o.horizon == 0) throw InvalidArgument("simulate_profile: horizon must be positive");
  if (s0 >= g.n_states()) throw InvalidArgument("simulate_profile: s0 out of range");
  const std::size_t n0 = g.n_actions[0], n1 = g.n_actions[1];
  SimulationResult r;
  std::size_t x = s0 / n1, y = s0 % n1;
  std::array<double, 2> sum{}, disc{};
  double w = 1.0;
  for (std::uint64_t t = 1; t <= o.horizon; ++t) {
    const std::size_t sr = state_index(x, y, n1), sc = state_index(y, x, n0);
    const std::size_t nx = a.act(sr, rng);
    const std::size_t ny = b.act(sc, rng);
    const std::size_t nr = state_index(nx, ny, n1), nc = state_index(ny, nx, n0);
    const double ra = g.reward(Role::kRow, nr), rb = g.reward(Role::kCol, nc);
    if (a.update(sr, nx, ra, nr)) ++r.updates[0];
    if (b.update(sc, ny, rb, nc)) ++r.updates[1];
    sum[0] += ra;
    sum[1] += rb;
    disc[0] += w * ra;
    disc[1] += w * rb;
    w *= g.gamma;
    if (per_round) per_round->push_back({ra, rb});
    if (o.series_stride > 0 && t % o.series_stride == 0) {
      const double td = static_cast<double>(t);
      r.series.push_back({sum[0] / td, sum[1] / td});
      r.update_series.push_back(r.updates);
    }
    x = nx;
    y = ny;
  }
  const double h = static_cast<double>(o.horizon);
  r.mean = {sum[0] / h, sum[1] / h};
  r.discounted = disc;
  r.final_policy = {a.policy(), b.policy()};
  return r;
}

// ---------------------------------------------------------------------------
// Algorithm-1 meta-game.

struct MetaGameConfig {
  std::size_t n_meta = 5;
  std::size_t n_base = 20;
  SimulationOptions sim;
  std::uint64_t seed = 0;
  bool shared_initial_state = true;
  bool share_category_instance = false;
  bool operator==(const MetaGameConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const MetaGameConfig& c) {
  j = nlohmann::json{{"n_meta", c.n_meta},
                     {"n_base", c.n_base},
                     {"horizon", c.sim.horizon},
                     {"series_stride", c.sim.series_stride},
                     {"seed", c.seed},
                     {"shared_initial_state", c.shared_initial_state},
                     {"share_category_instance", c.share_category_instance}};
}

struct RunSample {
  std::size_t s0 = 0;
  std::array<double, 2> mean{};
  std::array<double, 2> discounted{};
  std::array<std::uint64_t, 2> updates{};
  std::array<std::vector<std::size_t>, 2> final_greedy;
  bool operator==(const RunSample&) const = default;
};

inline void to_json(nlohmann::json& j, const RunSample& r) {
  j = nlohmann::json{{"s0", r.s0},
                     {"mean", r.mean},
                     {"discounted", r.discounted},
                     {"updates", r.updates},
                     {"final_greedy", r.final_greedy}};
}
inline void from_json(const nlohmann::json& j, RunSample& r) {
  r.s0 = j.at("s0").get<std::size_t>();
  r.mean = j.at("mean").get<std::array<double, 2>>();
  r.discounted = j.at("discounted").get<std::array<double, 2>>();
  r.updates = j.at("updates").get<std::array<std::uint64_t, 2>>();
  r.final_greedy = j.at("final_greedy").get<std::array<std::vector<std::size_t>, 2>>();
}

struct CellResult {
  std::array<std::optional<std::size_t>, 2> pool_ids;  // instances actually played (after redraws)
  std::array<PolicyTable, 2> initial_policy;
  std::vector<RunSample> runs;
  std::array<double, 2> mean{};
  std::array<double, 2> discounted{};
  std::vector<std::array<double, 2>> series;         // run-mean prefix payoffs
  std::vector<std::array<double, 2>> update_series;  // run-mean cumulative argmax changes
  bool operator==(const CellResult&) const = default;
};

inline void to_json(nlohmann::json& j, const CellResult& c) {
  auto id = [](const std::optional<std::size_t>& x) { return x ? nlohmann::json(*x) : nlohmann::json(nullptr); };
  j = nlohmann::json{{"pool_ids", {id(c.pool_ids[0]), id(c.pool_ids[1])}},
                     {"initial_policy", c.initial_policy},
                     {"runs", c.runs},
                     {"mean", c.mean},
                     {"discounted", c.discounted},
                     {"series", c.series},
                     {"update_series", c.update_series}};
}
inline void from_json(const nlohmann::json& j, CellResult& c) {
  for (std::size_t k = 0; k < 2; ++k) {
    const auto& v = j.at("pool_ids").at(k);
    c.pool_ids[k] = v.is_null() ? std::nullopt : std::optional<std::size_t>(v.get<std::size_t>());
  }
  c.initial_policy = j.at("initial_policy").get<std::array<PolicyTable, 2>>();
  c.runs = j.at("runs").get<std::vector<RunSample>>();
  c.mean = j.at("mean").get<std::array<double, 2>>();
  c.discounted = j.at("discounted").get<std::array<double, 2>>();
  c.series = j.at("series").get<std::vector<std::array<double, 2>>>();
  c.update_series = j.at("update_series").get<std::vector<std::array<double, 2>>>();
}

/// One meta iteration: the M x M empirical game (row metas x col metas).
struct MetaGameResult {
  std::size_t iteration = 0;
  std::vector<std::string> row_labels, col_labels;
  std::array<std::vector<std::optional<std::size_t>>, 2> sampled_ids;  // hat-Psi per role, before redraws
  std::vector<std::size_t> initial_states;                              // shared s0 per run (if enabled)
  std::vector<std::vector<CellResult>> cells;                           // [row meta][col meta]
  std::uint64_t horizon = 0;
  std::uint64_t series_stride = 0;

  std::size_t rows() const { return cells.size(); }
  std::size_t cols() const { return cells.empty() ? 0 : cells[0].size(); }
  /// Mean payoff of `role` in cell (i, j).
  double payoff(std::size_t i, std::size_t j, Role role) const { return cells[i][j].mean[idx(role)]; }
  bool operator==(const MetaGameResult&) const = default;
};

inline void to_json(nlohmann::json& j, const MetaGameResult& r) {
  nlohmann::json ids = nlohmann::json::array();
  for (const auto& side : r.sampled_ids) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& x : side) a.push_back(x ? nlohmann::json(*x) : nlohmann::json(nullptr));
    ids.push_back(a);
  }
  j = nlohmann::json{{"iteration", r.iteration},     {"row_labels", r.row_labels},   {"col_labels", r.col_labels},
                     {"sampled_ids", ids},           {"initial_states", r.initial_states},
                     {"cells", r.cells},             {"horizon", r.horizon},         {"series_stride", r.series_stride}};
}
inline void from_json(const nlohmann::json& j, MetaGameResult& r) {
  r.iteration = j.at("iteration").get<std::size_t>();
  r.row_labels = j.at("row_labels").get<std::vector<std::string>>();
  r.col_labels = j.at("col_labels").get<std::vector<std::string>>();
  for (std::size_t k = 0; k < 2; ++k) {
    r.sampled_ids[k].clear();
    for (const auto& x : j.at("sampled_ids").at(k))
      r.sampled_ids[k].push_back(x.is_null() ? std::nullopt : std::optional<std::size_t>(x.get<std::size_t>()));
  }
  r.initial_states = j.at("initial_states").get<std::vector<std::size_t>>();
  r.cells = j.at("cells").get<std::vector<std::vector<CellResult>>>();
  r.horizon = j.at("horizon").get<std::uint64_t>();
  r.series_stride = j.at("series_stride").get<std::uint64_t>();
}

/// Inputs for one meta-game. Symmetric envs use metas[0] and pools[0] for
/// both roles; asymmetric envs may give one list and pool per role.
struct MetaGameSpec {
  std::array<std::vector<MetaStrategy>, 2> metas;
  std::array<const PolicyPool*, 2> pools{nullptr, nullptr};
  PricingEnv env;
  int n_discrete = 0;
};

namespace detail {

enum StreamTag : std::uint64_t { kDrawStream = 1, kRedrawStream = 2, kStateStream = 3, kPlayStream = 4 };

inline void check_pool_matches(const PolicyPool* pool, const PricingEnv& env, const GridPair& grids) {
  if (!pool) return;
  if (pool->env_hash != content_hash(env))
    throw InvalidArgument("pool env hash " + pool->env_hash + " does not match the meta-game environment");
  if (pool->grid_hash != grid_hash(grids))
    throw InvalidArgument("pool grid hash " + pool->grid_hash + " does not match the meta-game price grid");
}

}  // namespace detail

/// Runs n_meta iterations of the empirical meta-game. Every random stream is
/// derived from (seed, iteration, profile, run), so results do not depend on
/// `jobs`.
inline std::vector<MetaGameResult> run_metagame(const MetaGameSpec& spec, const MetaGameConfig& cfg, unsigned jobs = 1) {
  if (cfg.n_meta == 0 || cfg.n_base == 0) throw InvalidArgument("run_metagame: n_meta and n_base must be positive");
  if (cfg.sim.horizon == 0) throw InvalidArgument("run_metagame: horizon must be positive");
  std::array<std::vector<MetaStrategy>, 2> metas = spec.metas;
  if (metas[1].empty()) metas[1] = metas[0];
  if (metas[0].empty()) throw InvalidArgument("run_metagame: empty meta-strategy list");
  for (const auto& side : metas)
    for (const auto& m : side) m.validate();
  std::array<const PolicyPool*, 2> pools = spec.pools;
  if (!pools[1]) pools[1] = pools[0];

  spec.env.validate();
  const Benchmarks bench = solve_benchmarks(spec.env);
  const GridPair grids = build_price_grids(bench, spec.n_discrete);
  const StageGame game = StageGame::from_pricing(spec.env, grids);
  for (const auto* p : pools) detail::check_pool_matches(p, spec.env, grids);

  const std::size_t mr = metas[0].size(), mc = metas[1].size();
  std::vector<MetaGameResult> out(cfg.n_meta);
  for (std::size_t it = 0; it < cfg.n_meta; ++it) {
    MetaGameResult& res = out[it];
    res.iteration = it;
    res.horizon = cfg.sim.horizon;
    res.series_stride = cfg.sim.series_stride;
    for (const auto& m : metas[0]) res.row_labels.push_back(m.label);
    for (const auto& m : metas[1]) res.col_labels.push_back(m.label);

    // hat-Psi: one instance per meta-strategy and role.
    std::array<std::vector<Strategy>, 2> inst;
    std::array<DrawContext, 2> ctx;
    for (std::size_t r = 0; r < 2; ++r) {
      ctx[r] = DrawContext{pools[r], &game, bench, role_from_index(r)};
      std::map<Category, Strategy> by_category;
      for (std::size_t k = 0; k < metas[r].size(); ++k) {
        const MetaStrategy& m = metas[r][k];
        Rng rng(derive_seed(cfg.seed, {detail::kDrawStream, it, r, k}));
        Strategy s;
        if (cfg.share_category_instance && m.category != Category::kRD && by_category.count(m.category)) {
          const Strategy& shared = by_category.at(m.category);
          s.pool_id = shared.pool_id;
          s.partner_id = shared.partner_id;
          s.label = m.label;
          s.agent = make_test_agent(m, pools[r]->by_id(*shared.pool_id), ctx[r]);
        } else {
          s = draw_strategy(m, ctx[r], rng);
          if (cfg.share_category_instance) by_category.emplace(m.category, s);
        }
        res.sampled_ids[r].push_back(s.pool_id);
        inst[r].push_back(std::move(s));
      }
    }

    if (cfg.shared_initial_state) {
      for (std::size_t run = 0; run < cfg.n_base; ++run) {
        Rng rng(derive_seed(cfg.seed, {detail::kStateStream, it, run}));
        res.initial_states.push_back(rng.below(game.n_states()));
      }
    }

    res.cells.assign(mr, std::vector<CellResult>(mc));
    parallel_for(mr * mc, jobs, [&](std::size_t flat) {
      const std::size_t i = flat / mc, j = flat % mc;
      CellResult& cell = res.cells[i][j];
      const Strategy& row = inst[0][i];
      Strategy col = inst[1][j];
      if (row.linked_to(col)) {
        // Same policy or its pretraining partner: redraw the column instance.
        Rng rng(derive_seed(cfg.seed, {detail::kRedrawStream, it, i, j}));
        std::set<std::size_t> forbidden{*row.pool_id};
        if (row.partner_id) forbidden.insert(*row.partner_id);
        col = draw_strategy(metas[1][j], ctx[1], rng, forbidden);
      }
      cell.pool_ids = {row.pool_id, col.pool_id};
      cell.initial_policy = {row.agent->policy(), col.agent->policy()};
      const std::size_t n_points = cfg.sim.series_stride ? cfg.sim.horizon / cfg.sim.series_stride : 0;
      cell.series.assign(n_points, {0.0, 0.0});
      cell.update_series.assign(n_points, {0.0, 0.0});
      for (std::size_t run = 0; run < cfg.n_base; ++run) {
        std::size_t s0;
        if (cfg.shared_initial_state) {
          s0 = res.initial_states[run];
        } else {
          Rng srng(derive_seed(cfg.seed, {detail::kStateStream, it, run, i, j}));
          s0 = srng.below(game.n_states());
        }
        Rng rng(derive_seed(cfg.seed, {detail::kPlayStream, it, i, j, run}));
        auto a = row.agent->clone();
        auto b = col.agent->clone();
        const SimulationResult sim = simulate_profile(*a, *b, game, s0, cfg.sim, rng);
        RunSample rs;
        rs.s0 = s0;
        rs.mean = sim.mean;
        rs.discounted = sim.discounted;
        rs.updates = sim.updates;
        rs.final_greedy = {sim.final_policy[0].greedy(), sim.final_policy[1].greedy()};
        cell.runs.push_back(std::move(rs));
        for (std::size_t k = 0; k < n_points; ++k)
          for (std::size_t q = 0; q < 2; ++q) {
            cell.series[k][q] += sim.series[k][q];
            cell.update_series[k][q] += static_cast<double>(sim.update_series[k][q]);
          }
      }
      const double n = static_cast<double>(cfg.n_base);
      for (std::size_t q = 0; q < 2; ++q) {
        double m = 0.0, d = 0.0;
        for (const auto& rs : cell.runs) {
          m += rs.mean[q];
          d += rs.discounted[q];
        }
        cell.mean[q] = m / n;
        cell.discounted[q] = d / n;
        for (std::size_t k = 0; k < n_points; ++k) {
          cell.series[k][q] /= n;
          cell.update_series[k][q] /= n;
        }
      }
    });
  }
  return out;
}

/// Mean payoff matrix over meta iterations, [row][col] -> (row, col payoffs).
using PayoffMatrix = std::vector<std::vector<std::array<double, 2>>>;

inline PayoffMatrix payoff_matrix(const MetaGameResult& r) {
  PayoffMatrix m(r.rows(), std::vector<std::array<double, 2>>(r.cols()));
  for (std::size_t i = 0; i < r.rows(); ++i)
    for (std::size_t j = 0; j < r.cols(); ++j) m[i][j] = r.cells[i][j].mean;
  return m;
}

inline PayoffMatrix mean_payoff_matrix(const std::vector<MetaGameResult>& rs) {
  if (rs.empty()) throw InvalidArgument("mean_payoff_matrix: no results");
  PayoffMatrix m = payoff_matrix(rs[0]);
  for (std::size_t k = 1; k < rs.size(); ++k) {
    const PayoffMatrix x = payoff_matrix(rs[k]);
    if (x.size() != m.size() || x[0].size() != m[0].size()) throw InvalidArgument("mean_payoff_matrix: shape mismatch");
    for (std::size_t i = 0; i < m.size(); ++i)
      for (std::size_t j = 0; j < m[i].size(); ++j)
        for (std::size_t q = 0; q < 2; ++q) m[i][j][q] += x[i][j][q];
  }
  for (auto& row : m)
    for (auto& c : row)
      for (double& v : c) v /= static_cast<double>(rs.size());
  return m;
}

}  // namespace collusion

#endif  // COLLUSION_METAGAME_HPP
