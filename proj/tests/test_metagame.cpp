#include <gtest/gtest.h>

#include <cmath>

#include "collusion/metagame.hpp"

using namespace collusion;

namespace {

struct Market {
  PricingEnv env;
  Benchmarks bench;
  GridPair grids;
  StageGame game;
  explicit Market(int n, PricingEnv e = {})
      : env(e), bench(solve_benchmarks(env)), grids(build_price_grids(bench, n)), game(StageGame::from_pricing(env, grids)) {}
};

// Small categorized Q pool shared by the suite.
const PolicyPool& q_pool() {
  static const PolicyPool pool = [] {
    PolicyPool p = pretrain_pool(PricingEnv{}, 4, 1, 40, PretrainOptions{}, 1);
    const Market m(4);
    characterize_pool(p, m.game);
    categorize(p, "rank");
    return p;
  }();
  return pool;
}

MetaStrategy meta(Category c, double alpha, std::string algo = "q") {
  MetaStrategy m;
  m.category = c;
  m.alpha = alpha;
  m.algorithm = algo;
  if (algo != "q") m.f.reset();
  std::ostringstream os;
  os << to_string(c) << ' ' << alpha;
  m.label = os.str();
  return m;
}

// Pool whose entries are fixed deterministic policies (algorithm "policy").
PolicyPool policy_pool(const Market& m, const std::vector<std::pair<std::size_t, Category>>& actions) {
  PolicyPool p;
  p.env = m.env;
  p.env_hash = content_hash(m.env);
  p.grid_hash = grid_hash(m.grids);
  p.n_discrete = static_cast<int>(m.grids[0].size());
  const std::size_t n = m.grids[0].size();
  for (std::size_t k = 0; k < actions.size(); ++k) {
    PolicyPoolEntry e;
    e.id = k;
    e.partner_id = k ^ 1u;
    e.role = role_from_index(k % 2);
    e.algorithm = "policy";
    e.policy = PolicyTable::deterministic(n, n, std::vector<std::size_t>(n * n, actions[k].first));
    e.raw = QTable(n, n);
    e.category = actions[k].second;
    p.entries.push_back(e);
  }
  return p;
}

}  // namespace

TEST(MetaStrategy, JsonRoundTripAndDefaults) {
  const MetaStrategy m = nlohmann::json::parse(R"({"category": "RC", "alpha": 0.05})").get<MetaStrategy>();
  EXPECT_EQ(m.label, "RC 0.05");
  EXPECT_EQ(m.algorithm, "q");
  ASSERT_TRUE(m.f.has_value());
  EXPECT_EQ(*m.f, 1.0);
  EXPECT_EQ(m.epsilon.epsilon0, 0.0);
  EXPECT_EQ(nlohmann::json(m).get<MetaStrategy>(), m);
  const MetaStrategy u = nlohmann::json::parse(R"({"category": "C", "algorithm": "ucb", "alpha": 1})").get<MetaStrategy>();
  EXPECT_FALSE(u.f.has_value());
}

TEST(MetaStrategy, RejectsInvalidConfigs) {
  EXPECT_THROW(nlohmann::json::parse(R"({"category": "RC", "speed": 1})").get<MetaStrategy>(), InvalidArgument);
  EXPECT_THROW(nlohmann::json::parse(R"({"category": "XX"})").get<MetaStrategy>(), InvalidArgument);
  EXPECT_THROW(nlohmann::json::parse(R"({"category": "C", "alpha": 2})").get<MetaStrategy>(), InvalidArgument);
  EXPECT_THROW(nlohmann::json::parse(R"({"category": "C", "f": 1.5})").get<MetaStrategy>(), InvalidArgument);
  EXPECT_THROW(nlohmann::json::parse(R"({"category": "C", "algorithm": "sarsa"})").get<MetaStrategy>(), InvalidArgument);
  EXPECT_THROW(nlohmann::json::parse(R"({"category": "RD", "algorithm": "policy"})").get<MetaStrategy>(), InvalidArgument);
}

TEST(Simulate, FrozenMonopolyPairPaysMonopolyProfit) {
  const Market m(4);
  const std::size_t top = 3;
  PolicyAgent a(PolicyTable::deterministic(4, 4, std::vector<std::size_t>(16, top)));
  PolicyAgent b(PolicyTable::deterministic(4, 4, std::vector<std::size_t>(16, top)));
  Rng rng(1);
  for (std::uint64_t h : {1u, 7u, 100u, 1000u}) {
    SimulationOptions o{h, 1};
    const SimulationResult r = simulate_profile(a, b, m.game, state_index(top, top, 4), o, rng);
    EXPECT_NEAR(r.mean[0], m.bench.r_monopoly[0], 1e-6);
    EXPECT_NEAR(r.mean[1], m.bench.r_monopoly[1], 1e-6);
    EXPECT_NEAR(r.mean[0], 0.34, 0.005);
    for (const auto& p : r.series) EXPECT_NEAR(p[0], r.mean[0], 1e-12);
    EXPECT_EQ(r.updates[0], 0u);
    EXPECT_NEAR(r.discounted[0], m.bench.r_monopoly[0] * (1 - std::pow(0.95, double(h))) / 0.05, 1e-9);
  }
}

TEST(Simulate, FrozenQTablesMatchFrozenPolicies) {
  const PolicyPool& p = q_pool();
  const Market m(4);
  const auto& e0 = p.entries[0];
  const auto& e1 = p.entries[3];
  QTable z0 = std::get<QTable>(e0.raw), z1 = std::get<QTable>(e1.raw);
  z0.alpha = z1.alpha = 0.0;
  z0.epsilon = z1.epsilon = {};
  QAgent qa(z0), qb(z1);
  PolicyAgent pa(e0.policy), pb(e1.policy);
  Rng r1(3), r2(3);
  std::vector<std::array<double, 2>> x, y;
  simulate_profile(qa, qb, m.game, 4, SimulationOptions{200, 10}, r1, &x);
  simulate_profile(pa, pb, m.game, 4, SimulationOptions{200, 10}, r2, &y);
  EXPECT_EQ(x, y);
}

TEST(Simulate, DeterministicMirror) {
  const PolicyPool& p = q_pool();
  const Market m(4);
  DrawContext c0{&p, &m.game, m.bench, Role::kRow}, c1{&p, &m.game, m.bench, Role::kCol};
  const MetaStrategy ms = meta(Category::kC, 0.3);
  for (std::size_t k = 0; k + 5 < p.entries.size(); k += 5) {
    const auto& ea = p.entries[k];
    const auto& eb = p.entries[k + 5];
    for (std::size_t x = 0; x < 4; ++x)
      for (std::size_t y = 0; y < 4; ++y) {
        auto a1 = make_test_agent(ms, ea, c0), b1 = make_test_agent(ms, eb, c1);
        auto a2 = make_test_agent(ms, ea, c1), b2 = make_test_agent(ms, eb, c0);
        Rng r1(1), r2(2);
        std::vector<std::array<double, 2>> s1, s2;
        simulate_profile(*a1, *b1, m.game, state_index(x, y, 4), SimulationOptions{500, 0}, r1, &s1);
        simulate_profile(*b2, *a2, m.game, state_index(y, x, 4), SimulationOptions{500, 0}, r2, &s2);
        ASSERT_EQ(s1.size(), s2.size());
        for (std::size_t t = 0; t < s1.size(); ++t) {
          ASSERT_EQ(s1[t][0], s2[t][1]);
          ASSERT_EQ(s1[t][1], s2[t][0]);
        }
      }
  }
}

TEST(Simulate, RejectsBadInputs) {
  const Market m(3);
  PolicyAgent a(PolicyTable::uniform(3, 3)), b(PolicyTable::uniform(3, 3));
  Rng rng(1);
  EXPECT_THROW(simulate_profile(a, b, m.game, 0, SimulationOptions{0, 1}, rng), InvalidArgument);
  EXPECT_THROW(simulate_profile(a, b, m.game, 9, SimulationOptions{10, 1}, rng), InvalidArgument);
}

TEST(Simulate, UpdateCountsTrackArgmaxChanges) {
  const PolicyPool& p = q_pool();
  const Market m(4);
  DrawContext c0{&p, &m.game, m.bench, Role::kRow}, c1{&p, &m.game, m.bench, Role::kCol};
  auto a = make_test_agent(meta(Category::kLC, 0.5), p.entries[0], c0);
  auto b = make_test_agent(meta(Category::kLC, 0.5), p.entries[7], c1);
  Rng rng(4);
  const SimulationResult r = simulate_profile(*a, *b, m.game, 0, SimulationOptions{1000, 100}, rng);
  ASSERT_EQ(r.update_series.size(), 10u);
  for (std::size_t k = 1; k < r.update_series.size(); ++k) EXPECT_GE(r.update_series[k][0], r.update_series[k - 1][0]);
  EXPECT_EQ(r.update_series.back(), r.updates);
  EXPECT_EQ(r.final_policy[0], a->policy());
}

TEST(Draw, RedrawCapExhaustedOnPartnerPair) {
  const Market m(3);
  const PolicyPool p = policy_pool(m, {{2, Category::kC}, {2, Category::kC}});
  DrawContext ctx{&p, &m.game, m.bench, Role::kRow};
  Rng rng(1);
  EXPECT_THROW(draw_strategy(meta(Category::kC, 0, "policy"), ctx, rng, {0}), InvalidArgument);
  const Strategy s = draw_strategy(meta(Category::kC, 0, "policy"), ctx, rng);
  EXPECT_TRUE(s.pool_id.has_value());
}

TEST(Draw, EmptyCategoryRejected) {
  const Market m(3);
  const PolicyPool p = policy_pool(m, {{2, Category::kC}, {2, Category::kC}});
  DrawContext ctx{&p, &m.game, m.bench, Role::kRow};
  Rng rng(1);
  EXPECT_THROW(draw_strategy(meta(Category::kRC, 0, "policy"), ctx, rng), InvalidArgument);
}

TEST(Draw, RandomInitIgnoresPool) {
  const Market m(3);
  DrawContext ctx{nullptr, &m.game, m.bench, Role::kRow};
  Rng rng(9);
  const Strategy s = draw_strategy(meta(Category::kRD, 0.5), ctx, rng);
  EXPECT_FALSE(s.pool_id.has_value());
  const auto* q = dynamic_cast<const QAgent*>(s.agent.get());
  ASSERT_NE(q, nullptr);
  const double qn = m.bench.r_bar_N / 0.05, qm = m.bench.r_bar_M / 0.05;
  for (double x : q->table().q) {
    EXPECT_GE(x, qn);
    EXPECT_LE(x, qm);
  }
  EXPECT_EQ(q->table().alpha, 0.5);
  const Strategy u = draw_strategy(meta(Category::kRD, 0.005, "ucb"), ctx, rng);
  const auto* z = dynamic_cast<const UcbAgent*>(u.agent.get());
  ASSERT_NE(z, nullptr);
  EXPECT_EQ(z->table().alpha, 0.005);
}

TEST(Draw, UniformOverCategoryMembers) {
  const PolicyPool& p = q_pool();
  const Market m(4);
  DrawContext ctx{&p, &m.game, m.bench, Role::kRow};
  const MetaStrategy ms = meta(Category::kRC, 0.5, "policy");
  const auto members = category_members(p, ms, Role::kRow);
  ASSERT_GE(members.size(), 3u);
  std::map<std::size_t, int> hist;
  Rng rng(21);
  const int n = 10'000;
  for (int i = 0; i < n; ++i) ++hist[*draw_strategy(ms, ctx, rng).pool_id];
  const double pr = 1.0 / static_cast<double>(members.size());
  const double sd = std::sqrt(n * pr * (1 - pr));
  for (std::size_t id : members) EXPECT_NEAR(hist[id], n * pr, 3 * sd) << id;
  EXPECT_EQ(hist.size(), members.size());
}

TEST(Draw, RescaleAndAdaptationInstalled) {
  const PolicyPool& p = q_pool();
  const Market m(4);
  DrawContext ctx{&p, &m.game, m.bench, Role::kRow};
  MetaStrategy ms = meta(Category::kC, 0.05);
  ms.f = 0.5;
  ms.epsilon = {1.0, 0.001};
  Rng rng(2);
  const Strategy s = draw_strategy(ms, ctx, rng);
  const auto& z = dynamic_cast<const QAgent&>(*s.agent).table();
  EXPECT_EQ(z.alpha, 0.05);
  EXPECT_EQ(z.epsilon, ms.epsilon);
  EXPECT_EQ(z.t, 0u);
  double best = -1e300;
  for (std::size_t st = 0; st < z.n_states(); ++st) best = std::max(best, z.row_max(st));
  const double qn = m.bench.r_bar_N / 0.05, qm = m.bench.r_bar_M / 0.05;
  EXPECT_NEAR(best, qn + 0.5 * (qm - qn), 1e-8);
  EXPECT_EQ(q_greedy(z), p.by_id(*s.pool_id).policy);
}

namespace {

MetaGameSpec q_spec() {
  MetaGameSpec spec;
  for (Category c : {Category::kLC, Category::kC, Category::kRC}) spec.metas[0].push_back(meta(c, 0.1));
  spec.metas[0].push_back(meta(Category::kRD, 0.5));
  spec.pools[0] = &q_pool();
  spec.n_discrete = 4;
  return spec;
}

}  // namespace

TEST(MetaGame, SingleRunMatchesSimulateProfile) {
  const Market m(3);
  const PolicyPool p = policy_pool(m, {{0, Category::kLC}, {1, Category::kLC}, {0, Category::kLC}, {1, Category::kLC},
                                       {2, Category::kRC}, {2, Category::kRC}, {1, Category::kRC}, {2, Category::kRC}});
  MetaGameSpec spec;
  spec.metas[0] = {meta(Category::kLC, 0, "policy"), meta(Category::kRC, 0, "policy")};
  spec.pools[0] = &p;
  spec.n_discrete = 3;
  MetaGameConfig cfg;
  cfg.n_meta = 1;
  cfg.n_base = 1;
  cfg.sim = {50, 10};
  cfg.seed = 5;
  const auto res = run_metagame(spec, cfg);
  ASSERT_EQ(res.size(), 1u);
  const auto& r = res[0];
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      const CellResult& c = r.cells[i][j];
      ASSERT_EQ(c.runs.size(), 1u);
      ASSERT_TRUE(c.pool_ids[0] && c.pool_ids[1]);
      PolicyAgent a(p.by_id(*c.pool_ids[0]).policy), b(p.by_id(*c.pool_ids[1]).policy);
      Rng rng(0);
      const SimulationResult sim = simulate_profile(a, b, m.game, r.initial_states[0], cfg.sim, rng);
      EXPECT_EQ(c.mean, sim.mean);
      EXPECT_EQ(c.discounted, sim.discounted);
      EXPECT_EQ(c.series, sim.series);
      // Self-play of a category never pairs an entry with itself or its partner.
      EXPECT_NE(*c.pool_ids[0], *c.pool_ids[1]);
      EXPECT_NE(*c.pool_ids[0], *c.pool_ids[1] ^ 1u);
    }
}

TEST(MetaGame, SelfPlayRedrawExhaustsOnTinyCategory) {
  const Market m(3);
  const PolicyPool p = policy_pool(m, {{0, Category::kLC}, {1, Category::kLC}});
  MetaGameSpec spec;
  spec.metas[0] = {meta(Category::kLC, 0, "policy")};
  spec.pools[0] = &p;
  spec.n_discrete = 3;
  MetaGameConfig cfg;
  cfg.n_meta = 1;
  cfg.n_base = 1;
  cfg.sim = {10, 0};
  EXPECT_THROW(run_metagame(spec, cfg), InvalidArgument);
}

TEST(MetaGame, CellsAreSampleMeansAndProvenanceHolds) {
  MetaGameConfig cfg;
  cfg.n_meta = 2;
  cfg.n_base = 4;
  cfg.sim = {400, 50};
  cfg.seed = 11;
  const auto res = run_metagame(q_spec(), cfg);
  const PolicyPool& p = q_pool();
  for (const auto& r : res) {
    ASSERT_EQ(r.rows(), 4u);
    ASSERT_EQ(r.initial_states.size(), 4u);
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j) {
        const CellResult& c = r.cells[i][j];
        ASSERT_EQ(c.runs.size(), cfg.n_base);
        for (std::size_t q = 0; q < 2; ++q) {
          double s = 0;
          for (const auto& run : c.runs) s += run.mean[q];
          EXPECT_NEAR(c.mean[q], s / 4.0, 1e-15);
        }
        for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(c.runs[k].s0, r.initial_states[k]);
        if (c.pool_ids[0] && c.pool_ids[1]) {
          EXPECT_NE(*c.pool_ids[0], *c.pool_ids[1]);
          EXPECT_NE(p.by_id(*c.pool_ids[0]).partner_id, *c.pool_ids[1]);
        }
        EXPECT_EQ(c.series.size(), 8u);
        EXPECT_NEAR(c.series.back()[0], c.mean[0], 1e-12);
      }
    // RD has no pool id; the pretrained metas do.
    EXPECT_FALSE(r.sampled_ids[0][3].has_value());
    EXPECT_TRUE(r.sampled_ids[0][0].has_value());
  }
}

TEST(MetaGame, ResultsIndependentOfJobs) {
  MetaGameConfig cfg;
  cfg.n_meta = 2;
  cfg.n_base = 3;
  cfg.sim = {300, 100};
  cfg.seed = 3;
  const auto a = run_metagame(q_spec(), cfg, 1);
  const auto b = run_metagame(q_spec(), cfg, 4);
  EXPECT_EQ(nlohmann::json(a).dump(), nlohmann::json(b).dump());
  EXPECT_EQ(a, b);
}

TEST(MetaGame, JsonRoundTrip) {
  MetaGameConfig cfg;
  cfg.n_meta = 1;
  cfg.n_base = 2;
  cfg.sim = {100, 50};
  const auto a = run_metagame(q_spec(), cfg, 1);
  const auto back = nlohmann::json(a).get<std::vector<MetaGameResult>>();
  EXPECT_EQ(back, a);
}

TEST(MetaGame, HorizonPrefixConsistency) {
  MetaGameConfig longer;
  longer.n_meta = 1;
  longer.n_base = 3;
  longer.sim = {1000, 100};
  longer.seed = 8;
  MetaGameConfig shorter = longer;
  shorter.sim.horizon = 300;
  const auto l = run_metagame(q_spec(), longer);
  const auto s = run_metagame(q_spec(), shorter);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      EXPECT_EQ(l[0].cells[i][j].series[2], s[0].cells[i][j].mean);
      EXPECT_EQ(l[0].cells[i][j].pool_ids, s[0].cells[i][j].pool_ids);
    }
}

TEST(MetaGame, SharedCategoryInstanceFlag) {
  MetaGameSpec spec;
  spec.metas[0] = {meta(Category::kC, 0.5), meta(Category::kC, 0.05), meta(Category::kRC, 0.5), meta(Category::kRC, 0.05)};
  spec.pools[0] = &q_pool();
  spec.n_discrete = 4;
  MetaGameConfig cfg;
  cfg.n_meta = 3;
  cfg.n_base = 1;
  cfg.sim = {20, 0};
  cfg.share_category_instance = true;
  for (const auto& r : run_metagame(spec, cfg)) {
    EXPECT_EQ(r.sampled_ids[0][0], r.sampled_ids[0][1]);
    EXPECT_EQ(r.sampled_ids[0][2], r.sampled_ids[0][3]);
  }
}

TEST(MetaGame, UnsharedInitialStatesPerProfile) {
  MetaGameConfig cfg;
  cfg.n_meta = 1;
  cfg.n_base = 2;
  cfg.sim = {20, 0};
  cfg.shared_initial_state = false;
  const auto r = run_metagame(q_spec(), cfg);
  EXPECT_TRUE(r[0].initial_states.empty());
  std::set<std::size_t> s0s;
  for (const auto& row : r[0].cells)
    for (const auto& c : row) s0s.insert(c.runs[0].s0);
  EXPECT_GT(s0s.size(), 1u);
}

TEST(MetaGame, ConfigErrors) {
  MetaGameConfig cfg;
  cfg.sim = {10, 0};
  MetaGameSpec empty = q_spec();
  empty.metas[0].clear();
  EXPECT_THROW(run_metagame(empty, cfg), InvalidArgument);
  MetaGameConfig zero = cfg;
  zero.n_base = 0;
  EXPECT_THROW(run_metagame(q_spec(), zero), InvalidArgument);
  MetaGameSpec wrong_grid = q_spec();
  wrong_grid.n_discrete = 3;
  EXPECT_THROW(run_metagame(wrong_grid, cfg), InvalidArgument);
  MetaGameSpec wrong_env = q_spec();
  wrong_env.env.costs = {0.8, 0.8};
  EXPECT_THROW(run_metagame(wrong_env, cfg), InvalidArgument);
}

TEST(MetaGame, AsymmetricEnvDrawsPerRole) {
  PricingEnv env;
  env.costs = {1.0, 0.8};
  PolicyPool p = pretrain_pool(env, 4, 1, 40, PretrainOptions{}, 1);
  const Market m(4, env);
  characterize_pool(p, m.game);
  categorize(p, "rank");
  MetaGameSpec spec;
  spec.metas[0] = {meta(Category::kC, 0.1), meta(Category::kRC, 0.1)};
  spec.pools[0] = &p;
  spec.env = env;
  spec.n_discrete = 4;
  MetaGameConfig cfg;
  cfg.n_meta = 2;
  cfg.n_base = 2;
  cfg.sim = {50, 0};
  for (const auto& r : run_metagame(spec, cfg)) {
    for (std::size_t k = 0; k < 2; ++k) {
      EXPECT_EQ(p.by_id(*r.sampled_ids[0][k]).role, Role::kRow);
      EXPECT_EQ(p.by_id(*r.sampled_ids[1][k]).role, Role::kCol);
    }
  }
}

TEST(MetaGame, MeanPayoffMatrixAverages) {
  MetaGameConfig cfg;
  cfg.n_meta = 2;
  cfg.n_base = 2;
  cfg.sim = {100, 0};
  const auto r = run_metagame(q_spec(), cfg);
  const PayoffMatrix m = mean_payoff_matrix(r);
  EXPECT_NEAR(m[1][2][0], (r[0].cells[1][2].mean[0] + r[1].cells[1][2].mean[0]) / 2, 1e-15);
  EXPECT_THROW(mean_payoff_matrix({}), InvalidArgument);
}
