#ifndef COLLUSION_PRETRAIN_HPP
#define COLLUSION_PRETRAIN_HPP

// Joint pretraining of agent pairs, policy pools and their PC/CR
// categorization.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "collusion/agents.hpp"
#include "collusion/core.hpp"
#include "collusion/env.hpp"
#include "collusion/game.hpp"
#include "collusion/values.hpp"
#include "json.hpp"

namespace collusion {

inline constexpr int kPoolFormatVersion = 1;

enum class Category { kNone, kLC, kC, kRC, kRD };

inline std::string to_string(Category c) {
  switch (c) {
    case Category::kLC: return "LC";
    case Category::kC: return "C";
    case Category::kRC: return "RC";
    case Category::kRD: return "RD";
    default: return "uncategorized";
  }
}

inline Category category_from_string(const std::string& s) {
  if (s == "LC") return Category::kLC;
  if (s == "C") return Category::kC;
  if (s == "RC") return Category::kRC;
  if (s == "RD") return Category::kRD;
  if (s == "uncategorized") return Category::kNone;
  throw InvalidArgument("unknown category '" + s + "'");
}

using Range = std::array<double, 2>;

struct HyperRanges {
  Range alpha{0.05, 0.25};
  Range epsilon0{1.0, 1.0};
  Range decay{5e-6, 2e-5};
  bool operator==(const HyperRanges&) const = default;
};

inline void to_json(nlohmann::json& j, const HyperRanges& r) {
  j = nlohmann::json{{"alpha", r.alpha}, {"epsilon0", r.epsilon0}, {"decay", r.decay}};
}
inline void from_json(const nlohmann::json& j, HyperRanges& r) {
  r.alpha = j.at("alpha").get<Range>();
  r.epsilon0 = j.at("epsilon0").get<Range>();
  r.decay = j.at("decay").get<Range>();
}

struct Hyperparams {
  double alpha = 0.1;
  double epsilon0 = 1.0;
  double decay = 1e-5;
  double gamma = 0.95;
  bool operator==(const Hyperparams&) const = default;
};

inline void to_json(nlohmann::json& j, const Hyperparams& h) {
  j = nlohmann::json{{"alpha", h.alpha}, {"epsilon0", h.epsilon0}, {"decay", h.decay}, {"gamma", h.gamma}};
}
inline void from_json(const nlohmann::json& j, Hyperparams& h) {
  h.alpha = j.at("alpha").get<double>();
  h.epsilon0 = j.at("epsilon0").get<double>();
  h.decay = j.at("decay").get<double>();
  h.gamma = j.at("gamma").get<double>();
}

inline Hyperparams sample_hyperparams(Rng& rng, const HyperRanges& r, double gamma) {
  for (const Range* x : {&r.alpha, &r.epsilon0, &r.decay})
    if (!((*x)[1] >= (*x)[0])) throw InvalidArgument("sample_hyperparams: empty range");
  Hyperparams h;
  h.alpha = rng.uniform(r.alpha[0], r.alpha[1]);
  h.epsilon0 = rng.uniform(r.epsilon0[0], r.epsilon0[1]);
  h.decay = rng.uniform(r.decay[0], r.decay[1]);
  h.gamma = gamma;
  return h;
}

using RawRepresentation = std::variant<QTable, UcbTable>;

struct PolicyPoolEntry {
  std::size_t id = 0;
  std::size_t partner_id = 0;
  std::uint64_t seed = 0;
  Role role = Role::kRow;
  std::string algorithm;
  Hyperparams hyper;
  PolicyTable policy;
  RawRepresentation raw;
  bool converged = false;
  std::uint64_t rounds = 0;
  double final_epsilon = 0.0;
  std::optional<double> pc_self, pc_partner, cr_self, cr_opp;
  Category category = Category::kNone;

  bool operator==(const PolicyPoolEntry&) const = default;
};

inline void to_json(nlohmann::json& j, const PolicyPoolEntry& e) {
  j = nlohmann::json{{"id", e.id},
                     {"partner_id", e.partner_id},
                     {"seed", e.seed},
                     {"role", idx(e.role)},
                     {"algorithm", e.algorithm},
                     {"hyperparams", e.hyper},
                     {"policy", e.policy},
                     {"converged", e.converged},
                     {"rounds", e.rounds},
                     {"final_epsilon", e.final_epsilon},
                     {"category", to_string(e.category)}};
  if (std::holds_alternative<QTable>(e.raw)) j["raw"] = {{"kind", "q"}, {"table", std::get<QTable>(e.raw)}};
  else j["raw"] = {{"kind", "ucb"}, {"table", std::get<UcbTable>(e.raw)}};
  auto opt = [](const std::optional<double>& x) { return x ? nlohmann::json(*x) : nlohmann::json(nullptr); };
  j["pc_self"] = opt(e.pc_self);
  j["pc_partner"] = opt(e.pc_partner);
  j["cr_self"] = opt(e.cr_self);
  j["cr_opp"] = opt(e.cr_opp);
}

inline void from_json(const nlohmann::json& j, PolicyPoolEntry& e) {
  e.id = j.at("id").get<std::size_t>();
  e.partner_id = j.at("partner_id").get<std::size_t>();
  e.seed = j.at("seed").get<std::uint64_t>();
  e.role = role_from_index(j.at("role").get<std::size_t>());
  e.algorithm = j.at("algorithm").get<std::string>();
  e.hyper = j.at("hyperparams").get<Hyperparams>();
  e.policy = j.at("policy").get<PolicyTable>();
  e.converged = j.at("converged").get<bool>();
  e.rounds = j.at("rounds").get<std::uint64_t>();
  e.final_epsilon = j.at("final_epsilon").get<double>();
  e.category = category_from_string(j.at("category").get<std::string>());
  const auto& raw = j.at("raw");
  const std::string kind = raw.at("kind").get<std::string>();
  if (kind == "q") e.raw = raw.at("table").get<QTable>();
  else if (kind == "ucb") e.raw = raw.at("table").get<UcbTable>();
  else throw FormatError("pool entry " + std::to_string(e.id) + ": unknown representation '" + kind + "'");
  auto opt = [&](const char* k) -> std::optional<double> {
    if (!j.contains(k) || j.at(k).is_null()) return std::nullopt;
    return j.at(k).get<double>();
  };
  e.pc_self = opt("pc_self");
  e.pc_partner = opt("pc_partner");
  e.cr_self = opt("cr_self");
  e.cr_opp = opt("cr_opp");
}

struct PretrainOptions {
  std::string algorithm = "q";  // q | ucb
  std::uint64_t convergence_window = 25'000;
  std::uint64_t max_rounds = 5'000'000;
  double count_cap = 5000.0;
  HyperRanges ranges;
  bool keep_nonconverged = false;
  bool operator==(const PretrainOptions&) const = default;
};

inline void to_json(nlohmann::json& j, const PretrainOptions& o) {
  j = nlohmann::json{{"algorithm", o.algorithm},   {"convergence_window", o.convergence_window},
                     {"max_rounds", o.max_rounds}, {"count_cap", o.count_cap},
                     {"ranges", o.ranges},         {"keep_nonconverged", o.keep_nonconverged}};
}
inline void from_json(const nlohmann::json& j, PretrainOptions& o) {
  o.algorithm = j.at("algorithm").get<std::string>();
  o.convergence_window = j.at("convergence_window").get<std::uint64_t>();
  o.max_rounds = j.at("max_rounds").get<std::uint64_t>();
  o.count_cap = j.at("count_cap").get<double>();
  o.ranges = j.at("ranges").get<HyperRanges>();
  o.keep_nonconverged = j.at("keep_nonconverged").get<bool>();
}

/// Canonical content hash of any serializable value.
template <typename T>
std::string content_hash(const T& value) {
  return hex64(fnv1a64(nlohmann::json(value).dump()));
}

inline std::string grid_hash(const GridPair& grids) {
  return content_hash(nlohmann::json::array({grids[0], grids[1]}));
}

namespace detail {

inline std::unique_ptr<Agent> make_pretrain_agent(const std::string& algorithm, const StageGame& g, Role role,
                                                  const Hyperparams& h, double count_cap) {
  if (algorithm == "q") {
    QTable z = q_init_uniform_opponent(g, role);
    z.alpha = h.alpha;
    z.gamma = h.gamma;
    z.epsilon = {h.epsilon0, h.decay};
    return std::make_unique<QAgent>(std::move(z));
  }
  if (algorithm == "ucb") {
    UcbTable z(g.n_own(role), g.n_opp(role));
    z.count_cap = count_cap;
    return std::make_unique<UcbAgent>(std::move(z), Phase::kPretrain);
  }
  throw InvalidArgument("unknown pretraining algorithm '" + algorithm + "' (expected q or ucb)");
}

inline RawRepresentation raw_of(const Agent& a) {
  if (auto* q = dynamic_cast<const QAgent*>(&a)) return q->table();
  if (auto* u = dynamic_cast<const UcbAgent*>(&a)) return u->table();
  throw InvalidArgument("raw_of: unsupported agent");
}

}  // namespace detail

/// Two agents with identical hyperparameters learn against each other from a
/// uniformly random initial state until both greedy policies stay unchanged
/// for `convergence_window` consecutive rounds.
inline std::pair<PolicyPoolEntry, PolicyPoolEntry> pretrain_pair(const StageGame& g, const Hyperparams& h,
                                                                 std::uint64_t seed, const PretrainOptions& o) {
  Rng rng(derive_seed(seed, {0x70726574ULL}));
  std::array<std::unique_ptr<Agent>, 2> agents{detail::make_pretrain_agent(o.algorithm, g, Role::kRow, h, o.count_cap),
                                               detail::make_pretrain_agent(o.algorithm, g, Role::kCol, h, o.count_cap)};
  const std::size_t n0 = g.n_actions[0], n1 = g.n_actions[1];
  std::size_t a0 = rng.below(n0), a1 = rng.below(n1);
  std::uint64_t stable = 0, t = 0;
  const bool ucb = o.algorithm == "ucb";
  while (t < o.max_rounds && stable < o.convergence_window) {
    const std::size_t s_row = state_index(a0, a1, n1), s_col = state_index(a1, a0, n0);
    std::size_t b0 = agents[0]->act(s_row, rng);
    std::size_t b1 = agents[1]->act(s_col, rng);
    if (ucb) {
      // UCB is deterministic; the same exploration schedule keeps off-cycle
      // states visited.
      const double eps = h.epsilon0 * std::exp(-h.decay * static_cast<double>(t));
      if (rng.uniform() < eps) b0 = rng.below(n0);
      if (rng.uniform() < eps) b1 = rng.below(n1);
    }
    const std::size_t next_row = state_index(b0, b1, n1), next_col = state_index(b1, b0, n0);
    const bool c0 = agents[0]->update(s_row, b0, g.reward(Role::kRow, next_row), next_row);
    const bool c1 = agents[1]->update(s_col, b1, g.reward(Role::kCol, next_col), next_col);
    stable = (c0 || c1) ? 0 : stable + 1;
    a0 = b0;
    a1 = b1;
    ++t;
  }
  std::array<PolicyPoolEntry, 2> out;
  for (std::size_t k = 0; k < 2; ++k) {
    auto& e = out[k];
    e.id = 2 * seed + k;
    e.partner_id = 2 * seed + (1 - k);
    e.seed = seed;
    e.role = role_from_index(k);
    e.algorithm = o.algorithm;
    e.hyper = h;
    e.policy = agents[k]->policy();
    e.raw = detail::raw_of(*agents[k]);
    e.converged = stable >= o.convergence_window;
    e.rounds = t;
    e.final_epsilon = h.epsilon0 * std::exp(-h.decay * static_cast<double>(t));
  }
  return {std::move(out[0]), std::move(out[1])};
}

struct PolicyPool {
  int format_version = kPoolFormatVersion;
  std::string algorithm;
  std::string env_hash;
  std::string grid_hash;
  PricingEnv env;
  int n_discrete = 0;
  PretrainOptions options;
  std::string tertile_method = "range";
  std::uint64_t seed_first = 0, seed_last = 0;
  std::size_t excluded_nonconverged = 0;
  std::vector<PolicyPoolEntry> entries;

  const PolicyPoolEntry& by_id(std::size_t id) const {
    auto it = std::lower_bound(entries.begin(), entries.end(), id,
                               [](const PolicyPoolEntry& e, std::size_t v) { return e.id < v; });
    if (it == entries.end() || it->id != id) throw InvalidArgument("pool: no entry with id " + std::to_string(id));
    return *it;
  }
  bool contains(std::size_t id) const {
    auto it = std::lower_bound(entries.begin(), entries.end(), id,
                               [](const PolicyPoolEntry& e, std::size_t v) { return e.id < v; });
    return it != entries.end() && it->id == id;
  }

  std::vector<std::size_t> members(Category c, std::optional<Role> role = std::nullopt) const {
    std::vector<std::size_t> out;
    for (const auto& e : entries)
      if (e.category == c && (!role || e.role == *role)) out.push_back(e.id);
    return out;
  }

  bool operator==(const PolicyPool&) const = default;
};

inline void to_json(nlohmann::json& j, const PolicyPool& p) {
  j = nlohmann::json{{"format_version", p.format_version},
                     {"algorithm", p.algorithm},
                     {"env_hash", p.env_hash},
                     {"grid_hash", p.grid_hash},
                     {"env", p.env},
                     {"n_discrete", p.n_discrete},
                     {"options", p.options},
                     {"ranges", p.options.ranges},
                     {"tertile_method", p.tertile_method},
                     {"seed_first", p.seed_first},
                     {"seed_last", p.seed_last},
                     {"excluded_nonconverged", p.excluded_nonconverged},
                     {"entries", p.entries}};
}

inline void from_json(const nlohmann::json& j, PolicyPool& p) {
  p.format_version = j.at("format_version").get<int>();
  if (p.format_version != kPoolFormatVersion)
    throw FormatError("pool format_version " + std::to_string(p.format_version) + " is not supported (expected " +
                      std::to_string(kPoolFormatVersion) + ")");
  p.algorithm = j.at("algorithm").get<std::string>();
  p.env_hash = j.at("env_hash").get<std::string>();
  p.grid_hash = j.at("grid_hash").get<std::string>();
  p.env = j.at("env").get<PricingEnv>();
  p.n_discrete = j.at("n_discrete").get<int>();
  p.options = j.at("options").get<PretrainOptions>();
  p.tertile_method = j.at("tertile_method").get<std::string>();
  p.seed_first = j.at("seed_first").get<std::uint64_t>();
  p.seed_last = j.at("seed_last").get<std::uint64_t>();
  p.excluded_nonconverged = j.at("excluded_nonconverged").get<std::size_t>();
  p.entries = j.at("entries").get<std::vector<PolicyPoolEntry>>();
}

inline void validate_pool(const PolicyPool& p) {
  for (std::size_t i = 1; i < p.entries.size(); ++i)
    if (p.entries[i].id <= p.entries[i - 1].id) throw FormatError("pool: entries must be sorted by unique id");
  for (const auto& e : p.entries) {
    if (!p.contains(e.partner_id))
      throw FormatError("pool: entry " + std::to_string(e.id) + " has dangling partner_id " +
                        std::to_string(e.partner_id));
    if (p.by_id(e.partner_id).partner_id != e.id)
      throw FormatError("pool: partner link of entry " + std::to_string(e.id) + " is not symmetric");
  }
}

inline std::string serialize_pool(const PolicyPool& p) { return nlohmann::json(p).dump(1) + "\n"; }

inline void save_pool(const PolicyPool& p, const std::string& path) {
  validate_pool(p);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write pool file " + path);
  os << serialize_pool(p);
  if (!os) throw FormatError("failed writing pool file " + path);
}

inline PolicyPool load_pool(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open pool file " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("corrupt pool file " + path + ": " + e.what());
  }
  PolicyPool p;
  try {
    p = j.get<PolicyPool>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("corrupt pool file " + path + ": " + e.what());
  }
  validate_pool(p);
  return p;
}

/// Pretrains one pair per seed in [seed_first, seed_last]; hyperparameters are
/// drawn from a stream keyed by the seed.
inline PolicyPool pretrain_pool(const PricingEnv& env, int n_discrete, std::uint64_t seed_first,
                                std::uint64_t seed_last, const PretrainOptions& o, unsigned jobs = 1) {
  if (seed_last < seed_first) throw InvalidArgument("pretrain_pool: empty seed range");
  const Benchmarks b = solve_benchmarks(env);
  const GridPair grids = build_price_grids(b, n_discrete);
  const StageGame g = StageGame::from_pricing(env, grids);
  const std::size_t n = static_cast<std::size_t>(seed_last - seed_first + 1);
  std::vector<std::pair<PolicyPoolEntry, PolicyPoolEntry>> pairs(n);
  parallel_for(n, jobs, [&](std::size_t i) {
    const std::uint64_t seed = seed_first + i;
    Rng hrng(derive_seed(seed, {0x68797065ULL}));
    pairs[i] = pretrain_pair(g, sample_hyperparams(hrng, o.ranges, env.gamma), seed, o);
  });
  PolicyPool pool;
  pool.algorithm = o.algorithm;
  pool.env = env;
  pool.env_hash = content_hash(env);
  pool.grid_hash = grid_hash(grids);
  pool.n_discrete = n_discrete;
  pool.options = o;
  pool.seed_first = seed_first;
  pool.seed_last = seed_last;
  for (auto& [x, y] : pairs) {
    if (!x.converged && !o.keep_nonconverged) {
      ++pool.excluded_nonconverged;
      continue;
    }
    pool.entries.push_back(std::move(x));
    pool.entries.push_back(std::move(y));
  }
  if (pool.excluded_nonconverged > 0)
    warn("pretrain_pool: excluded " + std::to_string(pool.excluded_nonconverged) +
         " non-converged pairs (round cap " + std::to_string(o.max_rounds) + ")");
  return pool;
}

/// Populates PC (with the pretraining partner) and CR (against the worst-case
/// best response) for every entry.
inline void characterize_pool(PolicyPool& pool, const StageGame& g, unsigned jobs = 1) {
  parallel_for(pool.entries.size(), jobs, [&](std::size_t i) {
    auto& e = pool.entries[i];
    const auto& partner = pool.by_id(e.partner_id);
    const auto [self, other_v] = paired_cooperativeness(g, e.role, e.policy, partner.policy);
    e.pc_self = self;
    e.pc_partner = other_v;
    const Robustness cr = cooperative_robustness(g, e.role, e.policy);
    e.cr_self = cr.cr_self;
    e.cr_opp = cr.cr_opp;
  });
}

struct Thirds {
  double lo = 0, hi = 0;  // low = [min, lo), mid = [lo, hi), high = [hi, max]
};

inline Thirds range_thirds(double min, double max) {
  const double r = max - min;
  return {min + r / 3.0, max - r / 3.0};
}

/// Labels LC / C / RC from PC and CR thirds within each (algorithm, role)
/// group; symmetric environments pool both roles.
inline void categorize(PolicyPool& pool, const std::string& method = "range") {
  if (method != "range" && method != "rank")
    throw InvalidArgument("categorize: tertile method must be 'range' or 'rank'");
  pool.tertile_method = method;
  const bool by_role = !pool.env.symmetric();
  std::map<std::pair<std::string, int>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < pool.entries.size(); ++i) {
    const auto& e = pool.entries[i];
    if (!e.pc_self || !e.cr_self) throw InvalidArgument("categorize: entry " + std::to_string(e.id) + " lacks PC/CR");
    groups[{e.algorithm, by_role ? static_cast<int>(idx(e.role)) : 0}].push_back(i);
  }
  // 0 = low, 1 = mid, 2 = high.
  auto band = [](double x, const Thirds& t) { return x < t.lo ? 0 : (x < t.hi ? 1 : 2); };
  for (auto& [key, members] : groups) {
    std::vector<double> pc, cr;
    for (std::size_t i : members) {
      pc.push_back(*pool.entries[i].pc_self);
      cr.push_back(*pool.entries[i].cr_self);
    }
    const auto [pmin, pmax] = std::minmax_element(pc.begin(), pc.end());
    const auto [cmin, cmax] = std::minmax_element(cr.begin(), cr.end());
    if (*pmax == *pmin || *cmax == *cmin) {
      warn("categorize: degenerate PC or CR range for algorithm '" + key.first + "'; entries left uncategorized");
      for (std::size_t i : members) pool.entries[i].category = Category::kNone;
      continue;
    }
    std::vector<int> pband(members.size()), cband(members.size());
    if (method == "range") {
      const Thirds tp = range_thirds(*pmin, *pmax), tc = range_thirds(*cmin, *cmax);
      for (std::size_t k = 0; k < members.size(); ++k) {
        pband[k] = band(pc[k], tp);
        cband[k] = band(cr[k], tc);
      }
    } else {
      auto rank_bands = [&](const std::vector<double>& x, std::vector<int>& out) {
        std::vector<std::size_t> order(x.size());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
        for (std::size_t r = 0; r < order.size(); ++r) out[order[r]] = static_cast<int>(3 * r / order.size());
      };
      rank_bands(pc, pband);
      rank_bands(cr, cband);
    }
    for (std::size_t k = 0; k < members.size(); ++k) {
      Category c = Category::kNone;
      if (pband[k] == 0 && cband[k] == 1) c = Category::kLC;
      else if (pband[k] == 2 && cband[k] == 0) c = Category::kC;
      else if (pband[k] == 2 && cband[k] == 2) c = Category::kRC;
      pool.entries[members[k]].category = c;
    }
  }
}

}  // namespace collusion

#endif  // COLLUSION_PRETRAIN_HPP
