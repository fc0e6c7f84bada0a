#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "collusion/llm.hpp"
#include "collusion/metagame.hpp"

using namespace collusion;

namespace {

LlmContext ctx15(PromptVariant p = PromptVariant::kP0, HistoryVariant h = HistoryVariant::kH0) {
  return make_context(PricingEnv{}, 15, p, h);
}

LlmContext ctx4(PromptVariant p = PromptVariant::kP0) { return make_context(PricingEnv{}, 4, p, HistoryVariant::kH0); }

bool contains(const std::string& s, const std::string& needle) { return s.find(needle) != std::string::npos; }

// Deterministic but state- and seed-dependent answers.
std::shared_ptr<ChatOracle> hashing_oracle(const PriceGrid& g) {
  return std::make_shared<ScriptedOracle>("scripted:hash", [g](const std::string& prompt, std::uint64_t seed) {
    const std::uint64_t h = fnv1a64(prompt) ^ seed;
    const std::string price = detail::fixed4(g[h % g.size()]);
    return format_response(price, "plan " + std::to_string(h % 97), "insight " + std::to_string(h % 89));
  });
}

std::string tmp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("collusion_llm_" + name)).string();
}

}  // namespace

TEST(Variant, ParseAndPrint) {
  const auto v = parse_variant("p2h3");
  EXPECT_EQ(v.first, PromptVariant::kP2);
  EXPECT_EQ(v.second, HistoryVariant::kH3);
  EXPECT_EQ(to_string(v.first) + to_string(v.second), "p2h3");
  EXPECT_THROW(parse_variant("p3h0"), InvalidArgument);
  EXPECT_THROW(parse_variant("h0p1"), InvalidArgument);
}

// ---------------------------------------------------------------------------

TEST(RenderPrompt, H0HasEmptyFilesAndMarketData) {
  const std::string p = render_prompt(ctx15());
  EXPECT_TRUE(contains(p, "Filename: PLANS.txt\n\n+++++++++++++++++++++\n\n\n\n+++++++++++++++++++++"));
  EXPECT_TRUE(contains(p, "Filename: INSIGHTS.txt\n\n+++++++++++++++++++++\n\n\n\n+++++++++++++++++++++"));
  EXPECT_TRUE(contains(p, "Filename: MARKET DATA (read-only)\n\n+++++++++++++++++++++\n\n\n\n+++++++++++++++++++++"));
  EXPECT_FALSE(contains(p, "Round 1:"));
}

TEST(RenderPrompt, StrategySentencesVerbatim) {
  const std::string p0 = render_prompt(ctx15(PromptVariant::kP0));
  const std::string p1 = render_prompt(ctx15(PromptVariant::kP1));
  const std::string p2 = render_prompt(ctx15(PromptVariant::kP2));
  EXPECT_TRUE(contains(p1, "Make sure your strategy achieves high profit"));
  EXPECT_TRUE(contains(p1, "Your co-participant may aim to learn an approximately best responding strategy to yours."));
  EXPECT_TRUE(contains(p1, "Make sure your strategy achieves high profit even for the best responding strategies."));
  EXPECT_TRUE(contains(p2, "One adaptation strategy is to try predicting the current strategy your co-participant uses "
                           "and then update your strategy to approximately best respond to your co-participant."));
  EXPECT_FALSE(contains(p0, "Make sure your strategy"));
  EXPECT_FALSE(contains(p0, "One adaptation strategy"));
  EXPECT_TRUE(contains(p0, "*However, this does not mean that you should always undercut"));
}

TEST(RenderPrompt, MarketConstants) {
  const LlmContext c = ctx15();
  const std::string p = render_prompt(c);
  EXPECT_TRUE(contains(p, "d_1 = exp(8-4*p_1)/(exp(8-4*p_1) + exp(8-4*p_2) + 1)"));
  EXPECT_TRUE(contains(p, "The profit is given by d_1 * (p_1 - 1)."));
  EXPECT_TRUE(contains(p, "The cost I pay to produce each unit is 1."));
  EXPECT_TRUE(contains(p, "one of the 15 prices below"));
  EXPECT_TRUE(contains(p, detail::fixed4(c.own_grid()[0]) + ", " + detail::fixed4(c.own_grid()[1])));
  EXPECT_TRUE(contains(p, "you chose N/A and the co-participant chose N/A."));
  EXPECT_TRUE(contains(p, "Your co-participant has the exact same product of the same quality and marginal cost."));
  EXPECT_TRUE(contains(p, "My chosen price:\n\n<just the number, nothing else>"));
}

TEST(RenderPrompt, ByteStableAndHistoryBlocks) {
  LlmContext c = ctx15(PromptVariant::kP1);
  c.plans_txt = "Hold at monopoly.";
  c.insights_txt = "Undercutting triggers retaliation.";
  c.push(14, 13);
  c.push(13, 13);
  const std::string a = render_prompt(c), b = render_prompt(c);
  EXPECT_EQ(a, b);
  EXPECT_TRUE(contains(a, "Hold at monopoly."));
  EXPECT_TRUE(contains(a, "Undercutting triggers retaliation."));
  EXPECT_TRUE(contains(a, "Round 2:\n- My price: " + detail::fixed4(c.own_grid()[13])));
  EXPECT_LT(a.find("Round 2:"), a.find("Round 1:"));
  const auto r = c.make_record(13, 13);
  EXPECT_TRUE(contains(a, "you chose " + detail::fixed4(r.own_price) + " and the co-participant chose " +
                              detail::fixed4(r.opp_price) + "."));
  EXPECT_TRUE(contains(a, "Your quantity sold was " + detail::fixed4(r.quantity) + " and your profit gain was " +
                              detail::fixed4(r.profit) + "."));
}

TEST(RenderPrompt, MissingConstants) {
  LlmContext c = ctx15();
  c.grids[0].prices.clear();
  EXPECT_THROW(render_prompt(c), InvalidArgument);
  LlmContext d = ctx15();
  d.env.mu = 0.0;
  EXPECT_THROW(render_prompt(d), InvalidArgument);
}

TEST(Context, JsonRoundTrip) {
  LlmContext c = ctx15(PromptVariant::kP2, HistoryVariant::kH3);
  c.plans_txt = "x";
  c.push(3, 4);
  const LlmContext d = nlohmann::json(c).get<LlmContext>();
  EXPECT_EQ(c, d);
  EXPECT_EQ(render_prompt(c), render_prompt(d));
}

// ---------------------------------------------------------------------------

TEST(ParseResponse, WellFormed) {
  const LlmContext c = ctx15();
  const std::string text =
      "My observations and thoughts:\n\nPrices are high.\n\nNew content for PLANS.txt:\n\nStay.\nWatch.\n\n"
      "New content for INSIGHTS.txt:\n\nCooperation pays.\n\nMy chosen price:\n\n" +
      detail::fixed4(c.own_grid()[7]) + "\n";
  const auto r = parse_response(text, c.own_grid());
  EXPECT_EQ(r.observations, "Prices are high.");
  EXPECT_EQ(r.plans, "Stay.\nWatch.");
  EXPECT_EQ(r.insights, "Cooperation pays.");
  EXPECT_EQ(r.action, 7u);
  EXPECT_FALSE(r.off_grid);
}

TEST(ParseResponse, SnapsToNearestGridPoint) {
  const LlmContext c = ctx15();
  const auto& g = c.own_grid();
  // The top of the 15-price grid is p^M ~ 1.9250.
  EXPECT_NEAR(g[14], 1.9250, 5e-5);
  const auto r = parse_response(format_response("1.93"), g);
  EXPECT_EQ(r.action, 14u);
  EXPECT_FALSE(r.off_grid);
  EXPECT_EQ(parse_response(format_response("$1.93 per unit"), g).action, 14u);
}

TEST(ParseResponse, OffGridWarnsAndSnaps) {
  std::vector<std::string> w;
  set_warning_sink([&](std::string_view m) { w.emplace_back(m); });
  const auto r = parse_response(format_response("3.5"), ctx15().own_grid());
  set_warning_sink([](std::string_view m) { std::cerr << "warning: " << m << '\n'; });
  EXPECT_EQ(r.action, 14u);
  EXPECT_TRUE(r.off_grid);
  EXPECT_EQ(w.size(), 1u);
}

TEST(ParseResponse, Errors) {
  const auto& g = ctx15().own_grid();
  EXPECT_THROW(parse_response("My observations and thoughts:\n\nnone", g), ParseError);
  EXPECT_THROW(parse_response(format_response("high"), g), ParseError);
  EXPECT_THROW(parse_response("", g), ParseError);
}

// ---------------------------------------------------------------------------

TEST(Recover, ConstantOracleGivesOneHotMonopoly) {
  const LlmContext c = ctx4();
  auto o = constant_oracle(c.own_grid()[3]);
  const auto r = recover_policy(c, *o);
  for (std::size_t s = 0; s < 16; ++s) {
    EXPECT_DOUBLE_EQ(r.policy(s, 3), 1.0);
    EXPECT_EQ(r.parse_failures[s], 0u);
  }
  EXPECT_TRUE(r.policy.is_deterministic());
}

TEST(Recover, AlternatingOracleGivesHalves) {
  const LlmContext c = ctx4();
  auto o = alternating_oracle(c.own_grid()[0], c.own_grid()[3]);
  // Per-sample seeds are derived, so parity splits are not exactly 8/8; the
  // script below alternates on the sample index instead.
  ScriptedOracle by_index("scripted:alt-index", [&](const std::string&, std::uint64_t seed) {
    for (std::size_t s = 0; s < 16; ++s)
      for (std::size_t k = 0; k < 16; ++k)
        if (derive_seed(0, {s, k}) == seed) return format_response(detail::fixed4(c.own_grid()[k % 2 ? 3 : 0]));
    return std::string("garbage");
  });
  const auto r = recover_policy(c, by_index);
  for (std::size_t s = 0; s < 16; ++s) {
    EXPECT_DOUBLE_EQ(r.policy(s, 0), 0.5);
    EXPECT_DOUBLE_EQ(r.policy(s, 3), 0.5);
  }
  const auto q = recover_policy(c, *o, 400);
  for (std::size_t s = 0; s < 16; ++s) {
    EXPECT_NEAR(q.policy(s, 0), 0.5, 0.1);
    EXPECT_NEAR(q.policy(s, 0) + q.policy(s, 3), 1.0, 1e-12);
  }
}

TEST(Recover, TextTitForTatRecoversTitForTat) {
  const LlmContext c = ctx4();
  auto o = tit_for_tat_oracle(c.own_grid()[3]);
  const auto r = recover_policy(c, *o, 16, 0, 4);
  EXPECT_EQ(r.policy, tit_for_tat_policy(4));
}

TEST(Recover, ParallelMatchesSerial) {
  const LlmContext c = ctx4();
  auto o = hashing_oracle(c.own_grid());
  EXPECT_EQ(recover_policy(c, *o, 16, 5, 1).policy, recover_policy(c, *o, 16, 5, 8).policy);
}

TEST(Recover, ParseFailureThreshold) {
  const LlmContext c = ctx4();
  auto failing = [&](std::size_t bad) {
    return ScriptedOracle("scripted:flaky", [&c, bad](const std::string&, std::uint64_t seed) {
      for (std::size_t k = 0; k < bad; ++k)
        for (std::size_t s = 0; s < 16; ++s)
          if (derive_seed(0, {s, k}) == seed) return std::string("no idea");
      return format_response(detail::fixed4(c.own_grid()[1]));
    });
  };
  auto four = failing(4);
  const auto ok = recover_policy(c, four);
  EXPECT_EQ(ok.parse_failures[0], 4u);
  EXPECT_DOUBLE_EQ(ok.policy(0, 1), 1.0);
  auto five = failing(5);
  EXPECT_THROW(recover_policy(c, five), RecoveryError);
}

TEST(Recover, RecoveredPolicyFeedsValues) {
  // Reciprocal text strategy: monopoly price unless undercut, then competitive.
  const LlmContext c = ctx4();
  const auto& g = c.own_grid();
  ScriptedOracle grim("scripted:grim", [&g](const std::string& prompt, std::uint64_t) {
    const auto opp = prompt_opponent_price(prompt);
    return format_response(detail::fixed4(!opp || *opp >= g[3] - 1e-4 ? g[3] : g[1]));
  });
  const auto rec = recover_policy(c, grim);
  const auto game = StageGame::from_pricing(c.env, c.grids);
  const auto comp = PolicyTable::deterministic(4, 4, std::vector<std::size_t>(16, 1));
  const auto pc = paired_cooperativeness(game, Role::kRow, rec.policy, rec.policy);
  const auto pc_comp = paired_cooperativeness(game, Role::kRow, comp, comp);
  EXPECT_GT(pc.first, pc_comp.first);
  const auto cr = cooperative_robustness(game, Role::kRow, rec.policy);
  EXPECT_GT(cr.cr_self, pc_comp.first);
}

// ---------------------------------------------------------------------------

TEST(LlmStep, ConstantOracleConstantAction) {
  LlmContext c = ctx4();
  auto o = constant_oracle(c.own_grid()[2]);
  for (std::size_t s : {0u, 5u, 15u}) {
    const auto r = llm_step(c, *o, s, 1);
    EXPECT_EQ(r.action, 2u);
    EXPECT_EQ(r.attempts, 1u);
    EXPECT_FALSE(r.fallback);
  }
  EXPECT_EQ(c.plans_txt, "Keep the price at " + detail::fixed4(c.own_grid()[2]) + ".");
  EXPECT_EQ(c.market_history.size(), 3u);
  EXPECT_THROW(llm_step(c, *o, 16, 1), InvalidArgument);
}

TEST(LlmStep, RetriesThenFallsBack) {
  LlmContext c = ctx4();
  int calls = 0;
  ScriptedOracle flaky("scripted:flaky", [&](const std::string&, std::uint64_t) {
    return ++calls < 3 ? std::string("thinking...") : format_response(detail::fixed4(c.own_grid()[0]));
  });
  const auto r = llm_step(c, flaky, state_index(3, 1, 4), 0);
  EXPECT_EQ(r.attempts, 3u);
  EXPECT_FALSE(r.fallback);
  EXPECT_EQ(r.action, 0u);

  ScriptedOracle broken("scripted:broken", [](const std::string&, std::uint64_t) { return std::string("?"); });
  std::size_t warnings = 0;
  set_warning_sink([&](std::string_view) { ++warnings; });
  const auto f = llm_step(c, broken, state_index(2, 1, 4), 0);
  set_warning_sink([](std::string_view m) { std::cerr << "warning: " << m << '\n'; });
  EXPECT_TRUE(f.fallback);
  EXPECT_EQ(f.attempts, 4u);
  EXPECT_EQ(f.action, 2u);
  EXPECT_EQ(warnings, 1u);
}

TEST(LlmAgent, MarketHistoryRingStaysBounded) {
  const LlmContext c = ctx4();
  auto o = hashing_oracle(c.own_grid());
  LlmAgent a(c, o, 1), b(c, o, 2);
  const auto game = StageGame::from_pricing(c.env, c.grids);
  Rng rng(0);
  SimulationOptions opts;
  opts.horizon = 250;
  simulate_profile(a, b, game, 5, opts, rng);
  EXPECT_EQ(a.context().market_history.size(), kMarketHistoryCap);
  EXPECT_EQ(a.context().rounds_played, 251u);  // initial state + 250 rounds
  EXPECT_EQ(a.context().market_history.back().round, 251u);
  EXPECT_EQ(a.algorithm(), "llm");
  EXPECT_EQ(a.fallbacks(), 0u);
}

// Plays a 50-round game and serializes its full trace.
std::string play_recorded(std::shared_ptr<ChatOracle> oracle, const LlmContext& c) {
  LlmAgent a(c, oracle, 11), b(c, oracle, 12);
  const auto game = StageGame::from_pricing(c.env, c.grids);
  Rng rng(0);
  SimulationOptions opts;
  opts.horizon = 50;
  opts.series_stride = 1;
  std::vector<std::array<double, 2>> rounds;
  const auto res = simulate_profile(a, b, game, 3, opts, rng, &rounds);
  nlohmann::json j{{"a", a.representation()}, {"b", b.representation()}, {"rounds", rounds}, {"mean", res.mean}};
  return j.dump();
}

TEST(Replay, FiftyRoundGameReproducesByteForByte) {
  const LlmContext c = ctx4(PromptVariant::kP2);
  const std::string path = tmp_path("transcript.jsonl");
  std::remove(path.c_str());
  auto rec = std::make_shared<RecordingOracle>(hashing_oracle(c.own_grid()), path);
  const std::string original = play_recorded(rec, c);
  EXPECT_EQ(rec->entries().size(), 100u);

  const auto transcript = load_transcript(path);
  EXPECT_EQ(transcript, rec->entries());
  auto replay = std::make_shared<ReplayOracle>(transcript);
  EXPECT_EQ(play_recorded(replay, c), original);

  // A different context no longer matches the stored prompts.
  auto replay2 = std::make_shared<ReplayOracle>(transcript);
  EXPECT_THROW(play_recorded(replay2, ctx4(PromptVariant::kP1)), ReplayMismatch);
  std::remove(path.c_str());
}

TEST(Replay, CorruptTranscript) {
  const std::string path = tmp_path("bad.jsonl");
  {
    std::ofstream out(path);
    out << "{\"prompt\": \"x\", \"seed\": 1, \"response\": \"y\"}\n{broken\n";
  }
  EXPECT_THROW(load_transcript(path), FormatError);
  EXPECT_THROW(load_transcript(tmp_path("missing.jsonl")), FormatError);
  std::remove(path.c_str());
}

// ---------------------------------------------------------------------------

TEST(BuildHistory, H0IsEmpty) {
  auto o = constant_oracle(1.9);
  const auto r = build_history(HistoryVariant::kH0, ctx4(), *o);
  EXPECT_TRUE(r.ctx.market_history.empty());
  EXPECT_EQ(r.rounds, 0u);
  EXPECT_FALSE(contains(render_prompt(r.ctx), "Round 1:"));
}

TEST(BuildHistory, H3CollusiveScriptConvergesToMonopoly) {
  const LlmContext c = ctx4(PromptVariant::kP2);
  auto o = constant_oracle(c.own_grid()[3]);
  HistoryOptions opts;
  opts.seed = 4;
  const auto r = build_history(HistoryVariant::kH3, c, *o, nullptr, opts);
  EXPECT_FALSE(r.truncated);
  // Round 1 may start anywhere; TfT follows one round later, then both stay.
  EXPECT_LE(r.rounds, 11u);
  ASSERT_GE(r.ctx.market_history.size(), 10u);
  for (std::size_t k = r.ctx.market_history.size() - 10; k < r.ctx.market_history.size(); ++k) {
    EXPECT_EQ(r.ctx.market_history[k].own, 3u);
    EXPECT_EQ(r.ctx.market_history[k].opp, 3u);
  }
  EXPECT_TRUE(r.ctx.plans_txt.empty());
  EXPECT_TRUE(r.ctx.insights_txt.empty());
  EXPECT_TRUE(r.ctx.opponent_description.empty());
  EXPECT_EQ(r.ctx.prompt, PromptVariant::kP2);
  EXPECT_EQ(r.ctx.history, HistoryVariant::kH3);
}

TEST(BuildHistory, OpponentDescribedOnlyDuringPretraining) {
  const LlmContext c = ctx4();
  auto inner = constant_oracle(c.own_grid()[3]);
  RecordingOracle rec(std::shared_ptr<ChatOracle>(std::move(inner)));
  const auto r = build_history(HistoryVariant::kH3, c, rec);
  for (const auto& e : rec.entries()) EXPECT_TRUE(contains(e.prompt, kH3Description));
  EXPECT_FALSE(contains(render_prompt(r.ctx), kH3Description));
}

TEST(BuildHistory, H2UsesPartnerPolicy) {
  const LlmContext c = ctx4();
  auto o = constant_oracle(c.own_grid()[2]);
  const auto partner = PolicyTable::deterministic(4, 4, std::vector<std::size_t>(16, 1));
  const auto r = build_history(HistoryVariant::kH2, c, *o, &partner);
  EXPECT_FALSE(r.truncated);
  EXPECT_EQ(r.ctx.market_history.back().own, 2u);
  EXPECT_EQ(r.ctx.market_history.back().opp, 1u);
  EXPECT_THROW(build_history(HistoryVariant::kH2, c, *o), InvalidArgument);
}

TEST(BuildHistory, H1SelfPlay) {
  const LlmContext c = ctx4();
  auto o = tit_for_tat_oracle(c.own_grid()[3]);
  HistoryOptions opts;
  opts.seed = 9;
  const auto r = build_history(HistoryVariant::kH1, c, *o, nullptr, opts);
  // Two text-TfT players swap prices each round: fixed only if they start equal.
  EXPECT_GT(r.rounds, 0u);
  EXPECT_EQ(r.ctx.history, HistoryVariant::kH1);
}

TEST(BuildHistory, NonTerminationCapKeepsHistory) {
  const LlmContext c = ctx4();
  auto o = hashing_oracle(c.own_grid());
  HistoryOptions opts;
  opts.max_rounds = 60;
  std::size_t warnings = 0;
  set_warning_sink([&](std::string_view) { ++warnings; });
  const auto r = build_history(HistoryVariant::kH3, c, *o, nullptr, opts);
  set_warning_sink([](std::string_view m) { std::cerr << "warning: " << m << '\n'; });
  EXPECT_TRUE(r.truncated);
  EXPECT_EQ(r.rounds, 60u);
  EXPECT_EQ(r.ctx.market_history.size(), 61u);  // initial state + 60 rounds
  EXPECT_GE(warnings, 1u);
}
