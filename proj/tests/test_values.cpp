#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "collusion/env.hpp"
#include "collusion/values.hpp"

using namespace collusion;

namespace {

constexpr std::size_t C = 0, D = 1;

PolicyTable pd_policy(std::array<std::size_t, 4> choice) {
  return PolicyTable::deterministic(2, 2, {choice.begin(), choice.end()});
}

// States in own perspective: CC, CD, DC, DD.
PolicyTable always_c() { return pd_policy({C, C, C, C}); }
PolicyTable always_d() { return pd_policy({D, D, D, D}); }
PolicyTable tit_for_tat() { return pd_policy({C, D, C, D}); }
PolicyTable wsls() { return pd_policy({C, D, D, C}); }

StageGame pricing_game(int n) {
  const PricingEnv env;
  return StageGame::from_pricing(env, build_price_grids(solve_benchmarks(env), n));
}

PolicyTable random_policy(std::size_t own, std::size_t opp, std::mt19937_64& rng) {
  PolicyTable p(own, opp);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t s = 0; s < p.n_states(); ++s) {
    double sum = 0;
    for (std::size_t a = 0; a < own; ++a) sum += (p(s, a) = u(rng) + 1e-3);
    for (std::size_t a = 0; a < own; ++a) p(s, a) /= sum;
  }
  return p;
}

std::vector<PolicyTable> all_deterministic(std::size_t own, std::size_t opp) {
  std::vector<PolicyTable> out;
  const std::size_t n = own * opp;
  std::vector<std::size_t> choice(n, 0);
  while (true) {
    out.push_back(PolicyTable::deterministic(own, opp, choice));
    std::size_t i = 0;
    while (i < n && ++choice[i] == own) choice[i++] = 0;
    if (i == n) break;
  }
  return out;
}

double residual(const StageGame& g, Role r, const PolicyTable& a, const PolicyTable& b, const ValueVector& v) {
  double worst = 0;
  for (std::size_t s = 0; s < g.n_states(); ++s) {
    const std::size_t so = g.opp_state(r, s);
    double ev = 0;
    for (std::size_t x = 0; x < g.n_own(r); ++x)
      for (std::size_t y = 0; y < g.n_opp(r); ++y) ev += a(s, x) * b(so, y) * v[state_index(x, y, g.n_opp(r))];
    worst = std::max(worst, std::abs(v[s] - g.reward(r, s) - g.gamma * ev));
  }
  return worst;
}

}  // namespace

TEST(PolicyTable, ValidationAndGreedy) {
  PolicyTable p = PolicyTable::uniform(3, 3);
  EXPECT_NO_THROW(p.validate());
  EXPECT_FALSE(p.is_deterministic());
  EXPECT_EQ(p.greedy(), std::vector<std::size_t>(9, 0));
  p(0, 0) = 0.5;
  EXPECT_THROW(p.validate(), InvalidArgument);
  EXPECT_TRUE(tit_for_tat().is_deterministic());
  const nlohmann::json j = tit_for_tat();
  EXPECT_EQ(j.get<PolicyTable>(), tit_for_tat());
}

TEST(StateValues, DeterministicAbsorbingMonopoly) {
  const StageGame g = pricing_game(4);
  const PolicyTable mono = PolicyTable::deterministic(4, 4, std::vector<std::size_t>(16, 3));
  const ValueVector v = state_values(g, Role::kRow, mono, mono);
  const std::size_t sm = state_index(3, 3, 4);
  EXPECT_NEAR(v[sm], g.reward(Role::kRow, sm) / (1 - g.gamma), 1e-9);
  EXPECT_NEAR(0.34 / (1 - 0.95), 6.8, 1e-12);
  // One step then absorb.
  for (std::size_t s = 0; s < 16; ++s)
    EXPECT_NEAR(v[s], g.reward(Role::kRow, s) + g.gamma * v[sm], 1e-9);
  EXPECT_GE(mean_state_value(v), *std::min_element(v.begin(), v.end()));
  EXPECT_LE(mean_state_value(v), v[sm] + 1e-12);
}

TEST(StateValues, PrisonersDilemmaClosedForms) {
  const StageGame pd = StageGame::prisoners_dilemma();
  const ValueVector v = state_values(pd, Role::kRow, always_d(), always_d());
  EXPECT_NEAR(v[state_index(D, D, 2)], 20.0, 1e-9);
  const ValueVector w = state_values(pd, Role::kRow, wsls(), wsls());
  // Hand solution: V(CC) = 60, V(DD) = 1 + .95*60, V(CD) = .95 V(DD), V(DC) = 5 + .95 V(DD).
  EXPECT_NEAR(w[0], 60.0, 1e-9);
  EXPECT_NEAR(w[3], 58.0, 1e-9);
  EXPECT_NEAR(w[1], 55.1, 1e-9);
  EXPECT_NEAR(w[2], 60.1, 1e-9);
  const auto [a, b] = paired_cooperativeness(pd, Role::kRow, wsls(), wsls());
  EXPECT_NEAR(a, 58.3, 1e-9);
  EXPECT_NEAR(b, 58.3, 1e-9);
}

TEST(StateValues, MeanStateValue) {
  EXPECT_DOUBLE_EQ(mean_state_value({2.0, 2.0, 2.0}), 2.0);
  EXPECT_DOUBLE_EQ(mean_state_value({1, 2, 3, 4}), 2.5);
  EXPECT_THROW(mean_state_value({}), InvalidArgument);
}

TEST(StateValues, UniformPoliciesMatchMonteCarlo) {
  const StageGame g = pricing_game(4);
  const PolicyTable u = PolicyTable::uniform(4, 4);
  const ValueVector v = state_values(g, Role::kRow, u, u);
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<std::size_t> pick(0, 3);
  for (std::size_t s0 : {std::size_t{0}, std::size_t{10}}) {
    const int episodes = 2500, steps = 400;  // 10^6 transitions per start state
    double sum = 0, sum2 = 0;
    for (int e = 0; e < episodes; ++e) {
      std::size_t s = s0;
      double ret = 0, disc = 1;
      for (int t = 0; t < steps; ++t) {
        ret += disc * g.reward(Role::kRow, s);
        disc *= g.gamma;
        s = state_index(pick(rng), pick(rng), 4);
      }
      sum += ret;
      sum2 += ret * ret;
    }
    const double mean = sum / episodes;
    const double se = std::sqrt((sum2 / episodes - mean * mean) / episodes);
    EXPECT_NEAR(v[s0], mean, 3 * se + 1e-9);
  }
}

TEST(StateValues, ResidualAndBoundsOnRandomPolicies) {
  std::mt19937_64 rng(11);
  const StageGame g = pricing_game(6);
  for (int i = 0; i < 5; ++i) {
    const PolicyTable a = random_policy(6, 6, rng), b = random_policy(6, 6, rng);
    for (Role r : {Role::kRow, Role::kCol}) {
      const ValueVector v = state_values(g, r, a, b);
      EXPECT_LT(residual(g, r, a, b, v), 1e-9);
      for (double x : v) {
        EXPECT_GE(x, g.min_payoff() / (1 - g.gamma) - 1e-9);
        EXPECT_LE(x, g.max_payoff() / (1 - g.gamma) + 1e-9);
      }
    }
  }
}

TEST(StateValues, SymmetricPairHasEqualComponents) {
  std::mt19937_64 rng(3);
  const StageGame g = pricing_game(5);
  const PolicyTable p = random_policy(5, 5, rng);
  const auto [a, b] = paired_cooperativeness(g, Role::kRow, p, p);
  EXPECT_NEAR(a, b, 1e-9);
}

TEST(StateValues, RejectsMismatchedGrid) {
  const StageGame g = pricing_game(4);
  EXPECT_THROW(state_values(g, Role::kRow, PolicyTable::uniform(3, 3), PolicyTable::uniform(4, 4)),
               InvalidArgument);
}

TEST(BestResponse, AlwaysDefectInDilemma) {
  const StageGame pd = StageGame::prisoners_dilemma();
  const BestResponse br = best_response(pd, Role::kRow, always_d());
  EXPECT_EQ(br.policy, always_d());
  EXPECT_NEAR(br.values[state_index(D, D, 2)], 20.0, 1e-9);
}

TEST(BestResponse, TitForTatIsAnsweredWithCooperation) {
  const StageGame pd = StageGame::prisoners_dilemma();
  const BestResponse br = best_response(pd, Role::kRow, tit_for_tat());
  EXPECT_EQ(br.policy, always_c());
  EXPECT_NEAR(br.values[0], 60.0, 1e-9);
}

TEST(BestResponse, MatchesExhaustiveEnumerationOnTwoPriceGrid) {
  std::mt19937_64 rng(2024);
  const PricingEnv env;
  const StageGame g = StageGame::from_pricing(env, build_price_grids(solve_benchmarks(env), 3));
  // Use the first two grid prices (competitive-ish) as a 2-price game.
  const StageGame g2 = StageGame::from_bimatrix({{g.reward(Role::kRow, 0, 0), g.reward(Role::kRow, 0, 1)},
                                                 {g.reward(Role::kRow, 1, 0), g.reward(Role::kRow, 1, 1)}},
                                                {{g.reward(Role::kCol, 0, 0), g.reward(Role::kCol, 1, 0)},
                                                 {g.reward(Role::kCol, 0, 1), g.reward(Role::kCol, 1, 1)}},
                                                0.95);
  const auto candidates = all_deterministic(2, 2);
  ASSERT_EQ(candidates.size(), 16u);
  for (int trial = 0; trial < 50; ++trial) {
    const PolicyTable opp = random_policy(2, 2, rng);
    const BestResponse br = best_response(g2, Role::kRow, opp);
    ValueVector best(4, -1e300);
    for (const auto& c : candidates) {
      const ValueVector v = state_values(g2, Role::kRow, c, opp);
      for (std::size_t s = 0; s < 4; ++s) best[s] = std::max(best[s], v[s]);
    }
    for (std::size_t s = 0; s < 4; ++s) EXPECT_NEAR(br.values[s], best[s], 1e-8);
  }
}

TEST(BestResponse, OptimalAgainstAllDeterministicOnThreePriceGrid) {
  std::mt19937_64 rng(99);
  const StageGame g = pricing_game(3);
  const auto candidates = all_deterministic(3, 3);  // 3^9 policies
  for (int trial = 0; trial < 2; ++trial) {
    const PolicyTable opp = random_policy(3, 3, rng);
    const BestResponse br = best_response(g, Role::kCol, opp);
    for (std::size_t i = 0; i < candidates.size(); i += 7) {
      const ValueVector v = state_values(g, Role::kCol, candidates[i], opp);
      for (std::size_t s = 0; s < 9; ++s) ASSERT_GE(br.values[s], v[s] - 1e-8);
    }
  }
}

TEST(BestResponse, SweepCapRaises) {
  BrOptions opts;
  opts.max_sweeps = 3;
  EXPECT_THROW(best_response(StageGame::prisoners_dilemma(), Role::kRow, tit_for_tat(), opts), ConvergenceError);
}

TEST(Robustness, TitForTatIsRobust) {
  const StageGame pd = StageGame::prisoners_dilemma();
  const Robustness cr = cooperative_robustness(pd, Role::kRow, tit_for_tat());
  EXPECT_EQ(cr.worst_br, always_c());
  // V(TfT | AC) = (60 + 58.9 + 62 + 59.9)/4, V(AC | TfT) = (60 + 57 + 59.15 + 55.15)/4.
  EXPECT_NEAR(cr.cr_self, 60.2, 1e-9);
  EXPECT_NEAR(cr.cr_opp, 57.825, 1e-9);
}

TEST(Robustness, AlwaysCooperateIsExploited) {
  const StageGame pd = StageGame::prisoners_dilemma();
  const Robustness cr = cooperative_robustness(pd, Role::kRow, always_c());
  EXPECT_EQ(cr.worst_br, always_d());
  EXPECT_NEAR(cr.cr_self, (3 + 0 + 5 + 1) / 4.0, 1e-9);
  EXPECT_NEAR(cr.cr_opp, (3 + 0 + 5 + 1) / 4.0 + 0.95 * 5 / 0.05, 1e-9);
}

TEST(Robustness, WorstCaseMatchesBruteForceOverTies) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> coarse(0, 2);
  int tied_cases = 0;
  for (int trial = 0; trial < 200; ++trial) {
    // Coarse payoffs make tied best responses common.
    std::vector<std::vector<double>> A(2, std::vector<double>(2)), B = A;
    for (auto* M : {&A, &B})
      for (auto& row : *M)
        for (auto& x : row) x = coarse(rng);
    if (trial % 4 == 0) B = {{1, 1}, {1, 1}};
    const StageGame g = StageGame::from_bimatrix(A, B, 0.95);
    const PolicyTable pi = all_deterministic(2, 2)[static_cast<std::size_t>(trial) % 16];
    const BestResponse br = best_response(g, Role::kCol, pi);
    std::size_t product = 1;
    for (const auto& t : br.ties) product *= t.size();
    if (product > 1) ++tied_cases;

    double brute = 1e300;
    for (const auto& cand : all_deterministic(2, 2)) {
      bool in_set = true;
      for (std::size_t s = 0; s < 4 && in_set; ++s) {
        const auto& t = br.ties[s];
        in_set = std::find(t.begin(), t.end(), cand.greedy()[s]) != t.end();
      }
      if (!in_set) continue;
      brute = std::min(brute, mean_state_value(state_values(g, Role::kRow, pi, cand)));
    }
    const Robustness cr = cooperative_robustness(g, Role::kRow, pi);
    EXPECT_NEAR(cr.cr_self, brute, 1e-8) << "trial " << trial;
  }
  EXPECT_GT(tied_cases, 20);
}

TEST(Values, CsvExport) {
  const StageGame pd = StageGame::prisoners_dilemma();
  const std::string csv = values_csv(pd, Role::kRow, state_values(pd, Role::kRow, always_d(), always_d()));
  EXPECT_EQ(csv.substr(0, 26), "own_index,opp_index,value\n");
  EXPECT_NE(csv.find("\n1,1,"), std::string::npos);
  EXPECT_NE(csv.find("\n0,1,"), std::string::npos);
}
