// Command-line entry point: pretrain, characterize, metagame, analyze, report, llm-recover.
#include <iostream>
#include <regex>

#include "CLI11.hpp"
#include "collusion/collusion.hpp"

using namespace collusion;

namespace {

enum Exit { kOk = 0, kFailure = 1, kBadInput = 2, kRefused = 3, kBadFile = 4 };

std::pair<std::uint64_t, std::uint64_t> parse_seed_range(const std::string& s) {
  static const std::regex re(R"(^(\d+)\.\.(\d+)$)");
  std::smatch m;
  if (!std::regex_match(s, m, re)) throw ConfigError("pretrain.seeds", "expected A..B, got '" + s + "'");
  return {std::stoull(m[1]), std::stoull(m[2])};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Meta-game analysis of learning pricing agents"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", std::string(kVersion));

  std::string config_path, out = "out";
  std::optional<std::uint64_t> seed;
  unsigned jobs = 1;
  app.add_option("--config", config_path, "Config file (JSON) or a run manifest to rerun")->envname("COLLUSION_CONFIG");
  app.add_option("--seed", seed, "Master seed (overrides the config)")->envname("COLLUSION_SEED");
  app.add_option("--jobs", jobs, "Worker threads; results do not depend on it")
      ->envname("COLLUSION_JOBS")
      ->check(CLI::PositiveNumber);
  app.add_option("--out", out, "Output directory (pretrain/characterize/llm-recover also accept a *.json file)")
      ->envname("COLLUSION_OUT");

  auto* pre = app.add_subcommand("pretrain", "Jointly pretrain policy pairs into a pool");
  std::string algo, seeds;
  pre->add_option("--algo", algo, "q | ucb");
  pre->add_option("--seeds", seeds, "Seed range A..B, one pair per seed");

  auto* chr = app.add_subcommand("characterize", "Compute PC/CR and LC/C/RC categories of a pool");
  std::string pool_in;
  chr->add_option("--pool", pool_in, "Input pool (default <out>/pool.json)");

  auto* mg = app.add_subcommand("metagame", "Simulate the empirical meta-game");
  std::string metas_path;
  std::optional<std::uint64_t> horizon;
  std::optional<std::size_t> n_meta, n_base;
  mg->add_option("--pool", pool_in, "Characterized pool (default <out>/pool.json)");
  mg->add_option("--metas", metas_path, "Meta-strategy list (JSON array or {\"metas\": [...]})");
  mg->add_option("--horizon", horizon, "Rounds per base game");
  mg->add_option("--n-meta", n_meta, "Meta iterations");
  mg->add_option("--n-base", n_base, "Runs per profile and iteration");

  auto* an = app.add_subcommand("analyze", "Equilibria, regrets, uniform scores and deltas of meta-game results");
  std::string results;
  an->add_option("--results", results, "Directory holding metagame/ (default <out>)");

  auto* rep = app.add_subcommand("report", "Render payoff CSVs, NE report, BR graphs and CoI series");
  std::string matrix;
  rep->add_option("--results", results, "Directory holding metagame/ and analysis.json (default <out>)");
  rep->add_option("--matrix", matrix, "Hand-entered payoff matrix CSV (row,col,row_payoff,col_payoff)");

  auto* llm = app.add_subcommand("llm-recover", "Build an LLM agent's history and recover its policy");
  LlmRecoverOptions lo;
  std::string role = "row", http_metadata;
  std::string partner_pool, record;
  llm->add_option("--variant", lo.variant, "Prompt/history variant, e.g. p2h3")->required();
  llm->add_option("--oracle", lo.oracle,
                  "constant:<price> | alternate:<a>,<b> | tft:<price> | replay:<file> | scripted:<file> | http://...")
      ->required();
  llm->add_option("--samples", lo.samples, "Queries per state")->check(CLI::PositiveNumber);
  llm->add_option("--role", role, "row | col")->check(CLI::IsMember({"row", "col"}));
  llm->add_option("--partner-pool", partner_pool, "Characterized Q pool for the h2 RC partner");
  llm->add_option("--record", record, "Append the oracle transcript to this file");
  llm->add_option("--stop-window", lo.stop_window, "Identical rounds that end history building");
  llm->add_option("--max-rounds", lo.max_rounds, "History round cap");
  llm->add_option("--http-metadata", http_metadata, "JSON object forwarded to the HTTP oracle");
  llm->add_option("--http-timeout", lo.http.read_timeout_s, "HTTP read timeout in seconds");

  rep->get_option("--results")->excludes(rep->get_option("--matrix"));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  auto warn_sink = [](std::string_view m) { std::cerr << "warning: " << m << '\n'; };
  set_warning_sink(warn_sink);
  const fs::path outp = out;
  try {
    PipelineConfig cfg = config_path.empty() ? PipelineConfig{} : load_config(config_path);
    if (seed) cfg.seed = cfg.metagame.seed = *seed;

    if (*pre) {
      if (!algo.empty()) cfg.pretrain.algorithm = algo;
      if (!seeds.empty()) std::tie(cfg.seed_first, cfg.seed_last) = parse_seed_range(seeds);
      validate(cfg);
      const auto pool = cmd_pretrain(cfg, outp, jobs);
      std::cout << "pretrained " << pool.entries.size() << " policies (" << pool.excluded_nonconverged
                << " non-converged pairs excluded)\n";
    } else if (*chr) {
      validate(cfg);
      const fs::path in = pool_in.empty() ? outp / "pool.json" : fs::path(pool_in);
      const auto pool = cmd_characterize(cfg, in, outp, jobs);
      std::map<std::string, int> counts;
      for (const auto& e : pool.entries) ++counts[to_string(e.category)];
      for (const auto& [k, v] : counts) std::cout << k << ": " << v << "\n";
    } else if (*mg) {
      if (!metas_path.empty()) {
        nlohmann::json j = read_json_file(metas_path, "metas");
        if (j.is_object()) {
          if (!j.contains("metas") || j.size() != 1) throw ConfigError("metas", "expected {\"metas\": [...]}");
          j = j.at("metas");
        }
        cfg.metas = detail::parse_metas(j, "metas");
      }
      if (horizon) cfg.metagame.sim.horizon = *horizon;
      if (n_meta) cfg.metagame.n_meta = *n_meta;
      if (n_base) cfg.metagame.n_base = *n_base;
      validate(cfg);
      const fs::path in = pool_in.empty() ? outp / "pool.json" : fs::path(pool_in);
      const auto rs = cmd_metagame(cfg, in, outp, jobs);
      std::cout << "wrote " << rs.size() << " meta iterations to " << (outp / "metagame").string() << "\n";
    } else if (*an) {
      validate(cfg);
      const auto a = cmd_analyze(cfg, results.empty() ? outp : fs::path(results), outp, jobs);
      std::cout << "equilibria: " << a.at("equilibria").size() << "; wrote " << (outp / "analysis.json").string()
                << "\n";
    } else if (*rep) {
      validate(cfg);
      ReportInputs in;
      if (!matrix.empty()) in.matrix_csv = matrix;
      else in.results_dir = results.empty() ? outp : fs::path(results);
      const auto a = cmd_report(cfg, in, outp, jobs);
      std::cout << ne_report_text(a);
    } else if (*llm) {
      validate(cfg);
      lo.role = role == "row" ? Role::kRow : Role::kCol;
      lo.partner_pool = partner_pool;
      lo.record = record;
      if (!http_metadata.empty()) {
        try {
          lo.http.metadata = nlohmann::json::parse(http_metadata);
        } catch (const nlohmann::json::exception& e) {
          throw ConfigError("http-metadata", e.what());
        }
      }
      const auto j = cmd_llm_recover(cfg, lo, outp, jobs);
      std::cout << "recovered policy (PC self-play " << j.at("pc_self").get<double>() << ", CR "
                << j.at("cr_self").get<double>() << " / " << j.at("cr_opp").get<double>() << ")\n";
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kBadInput;
  } catch (const HashMismatch& e) {
    std::cerr << "refused: " << e.what() << "\n";
    return kRefused;
  } catch (const InvalidArgument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kBadInput;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kBadFile;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kOk;
}
