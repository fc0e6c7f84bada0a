// Config, manifests and the pretrain -> characterize -> metagame -> analyze ->
// report commands behind the CLI.
#ifndef COLLUSION_PIPELINE_HPP
#define COLLUSION_PIPELINE_HPP

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <locale>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "collusion/analysis.hpp"
#include "collusion/core.hpp"
#include "collusion/env.hpp"
#include "collusion/llm_http.hpp"
#include "collusion/metagame.hpp"
#include "collusion/pretrain.hpp"
#include "json.hpp"

namespace collusion {

namespace fs = std::filesystem;

inline constexpr int kManifestVersion = 1;

/// Invalid configuration; key() is the dotted path of the offending entry.
class ConfigError : public InvalidArgument {
 public:
  ConfigError(std::string key, const std::string& msg)
      : InvalidArgument("config key '" + key + "': " + msg), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

/// Inputs produced under a different environment or grid.
class HashMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Config

struct AnalysisConfig {
  std::string payoff_convention = "mean";  // mean | discounted
  double ci_level = 0.95;
  bool bootstrap = false;
  std::size_t resamples = 2000;
  double nash_tol = 1e-6;
  bool deltas = true;
  std::map<std::string, double> reference;  // label -> weight, audited as a symmetric profile
  double reference_tol = 0.005;
  bool operator==(const AnalysisConfig&) const = default;
};

struct PipelineConfig {
  std::uint64_t seed = 0;
  PricingEnv env;
  int n_discrete = 4;
  PretrainOptions pretrain;
  std::uint64_t seed_first = 1, seed_last = 50;
  std::string tertile_method = "range";
  std::vector<MetaStrategy> metas;
  MetaGameConfig metagame;  // metagame.seed mirrors seed
  AnalysisConfig analysis;
  bool operator==(const PipelineConfig&) const = default;
};

namespace detail {

/// Strict reader: every key must be consumed, errors carry the dotted path.
class ConfigReader {
 public:
  ConfigReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }
  std::string key(const std::string& k) const { return path_.empty() ? k : path_ + "." + k; }
  bool has(const std::string& k) const { return j_.contains(k); }
  template <typename T>
  void get(const std::string& k, T& out) {
    if (!j_.contains(k)) return;
    seen_.insert(k);
    try {
      out = j_.at(k).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(key(k), e.what());
    }
  }
  const nlohmann::json& raw(const std::string& k) {
    seen_.insert(k);
    return j_.at(k);
  }
  ConfigReader sub(const std::string& k) {
    seen_.insert(k);
    return ConfigReader(j_.at(k), key(k));
  }
  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError(key(k), "unknown key");
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline std::vector<MetaStrategy> parse_metas(const nlohmann::json& arr, const std::string& path) {
  if (!arr.is_array()) throw ConfigError(path, "expected a list of meta-strategies");
  std::vector<MetaStrategy> out;
  for (std::size_t k = 0; k < arr.size(); ++k) {
    try {
      out.push_back(arr[k].get<MetaStrategy>());
    } catch (const InvalidArgument& e) {
      throw ConfigError(path + "[" + std::to_string(k) + "]", e.what());
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(path + "[" + std::to_string(k) + "]", e.what());
    }
  }
  std::set<std::string> labels;
  for (std::size_t k = 0; k < out.size(); ++k)
    if (!labels.insert(out[k].label).second)
      throw ConfigError(path + "[" + std::to_string(k) + "]", "duplicate label '" + out[k].label + "'");
  return out;
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const AnalysisConfig& a) {
  j = nlohmann::json{{"payoff_convention", a.payoff_convention},
                     {"ci_level", a.ci_level},
                     {"bootstrap", a.bootstrap},
                     {"resamples", a.resamples},
                     {"nash_tol", a.nash_tol},
                     {"deltas", a.deltas},
                     {"reference", a.reference},
                     {"reference_tol", a.reference_tol}};
}

/// Fully resolved config: every default is spelled out.
inline void to_json(nlohmann::json& j, const PipelineConfig& c) {
  j = nlohmann::json{
      {"seed", c.seed},
      {"env", c.env},
      {"n_discrete", c.n_discrete},
      {"pretrain",
       {{"algorithm", c.pretrain.algorithm},
        {"seeds", {c.seed_first, c.seed_last}},
        {"convergence_window", c.pretrain.convergence_window},
        {"max_rounds", c.pretrain.max_rounds},
        {"count_cap", c.pretrain.count_cap},
        {"ranges", c.pretrain.ranges},
        {"keep_nonconverged", c.pretrain.keep_nonconverged}}},
      {"characterize", {{"tertile_method", c.tertile_method}}},
      {"metagame",
       {{"metas", c.metas},
        {"n_meta", c.metagame.n_meta},
        {"n_base", c.metagame.n_base},
        {"horizon", c.metagame.sim.horizon},
        {"series_stride", c.metagame.sim.series_stride},
        {"shared_initial_state", c.metagame.shared_initial_state},
        {"share_category_instance", c.metagame.share_category_instance}}},
      {"analysis", c.analysis}};
}

inline void validate(const PipelineConfig& c) {
  try {
    c.env.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError("env", e.what());
  }
  if (c.n_discrete < 1) throw ConfigError("n_discrete", "must be >= 1");
  if (c.pretrain.algorithm != "q" && c.pretrain.algorithm != "ucb")
    throw ConfigError("pretrain.algorithm", "must be 'q' or 'ucb'");
  if (c.seed_last < c.seed_first) throw ConfigError("pretrain.seeds", "empty seed range");
  if (c.pretrain.convergence_window == 0) throw ConfigError("pretrain.convergence_window", "must be positive");
  for (const auto* r : {&c.pretrain.ranges.alpha, &c.pretrain.ranges.epsilon0, &c.pretrain.ranges.decay})
    if (!((*r)[1] >= (*r)[0])) throw ConfigError("pretrain.ranges", "empty range");
  if (c.tertile_method != "range" && c.tertile_method != "rank")
    throw ConfigError("characterize.tertile_method", "must be 'range' or 'rank'");
  if (c.metagame.n_meta == 0) throw ConfigError("metagame.n_meta", "must be positive");
  if (c.metagame.n_base == 0) throw ConfigError("metagame.n_base", "must be positive");
  if (c.metagame.sim.horizon == 0) throw ConfigError("metagame.horizon", "must be positive");
  if (c.metagame.sim.series_stride == 0) throw ConfigError("metagame.series_stride", "must be positive");
  const auto& a = c.analysis;
  if (a.payoff_convention != "mean" && a.payoff_convention != "discounted")
    throw ConfigError("analysis.payoff_convention", "must be 'mean' or 'discounted'");
  if (!(a.ci_level > 0.0 && a.ci_level < 1.0)) throw ConfigError("analysis.ci_level", "must lie in (0, 1)");
  if (a.resamples == 0) throw ConfigError("analysis.resamples", "must be positive");
  if (!(a.nash_tol > 0.0)) throw ConfigError("analysis.nash_tol", "must be positive");
  for (const auto& [label, w] : a.reference)
    if (!(w >= 0.0)) throw ConfigError("analysis.reference", "negative weight for '" + label + "'");
}

inline PipelineConfig parse_config(const nlohmann::json& j) {
  PipelineConfig c;
  detail::ConfigReader r(j, "");
  r.get("seed", c.seed);
  if (r.has("env")) {
    auto e = r.sub("env");
    e.get("quality", c.env.quality);
    e.get("outside_quality", c.env.outside_quality);
    e.get("mu", c.env.mu);
    e.get("costs", c.env.costs);
    e.get("gamma", c.env.gamma);
    e.finish();
  }
  r.get("n_discrete", c.n_discrete);
  if (r.has("pretrain")) {
    auto p = r.sub("pretrain");
    p.get("algorithm", c.pretrain.algorithm);
    if (p.has("seeds")) {
      std::array<std::uint64_t, 2> s{};
      p.get("seeds", s);
      c.seed_first = s[0];
      c.seed_last = s[1];
    }
    p.get("convergence_window", c.pretrain.convergence_window);
    p.get("max_rounds", c.pretrain.max_rounds);
    p.get("count_cap", c.pretrain.count_cap);
    if (p.has("ranges")) {
      auto q = p.sub("ranges");
      q.get("alpha", c.pretrain.ranges.alpha);
      q.get("epsilon0", c.pretrain.ranges.epsilon0);
      q.get("decay", c.pretrain.ranges.decay);
      q.finish();
    }
    p.get("keep_nonconverged", c.pretrain.keep_nonconverged);
    p.finish();
  }
  if (r.has("characterize")) {
    auto p = r.sub("characterize");
    p.get("tertile_method", c.tertile_method);
    p.finish();
  }
  if (r.has("metagame")) {
    auto m = r.sub("metagame");
    if (m.has("metas")) c.metas = detail::parse_metas(m.raw("metas"), m.key("metas"));
    m.get("n_meta", c.metagame.n_meta);
    m.get("n_base", c.metagame.n_base);
    m.get("horizon", c.metagame.sim.horizon);
    m.get("series_stride", c.metagame.sim.series_stride);
    m.get("shared_initial_state", c.metagame.shared_initial_state);
    m.get("share_category_instance", c.metagame.share_category_instance);
    m.finish();
  }
  if (r.has("analysis")) {
    auto a = r.sub("analysis");
    a.get("payoff_convention", c.analysis.payoff_convention);
    a.get("ci_level", c.analysis.ci_level);
    a.get("bootstrap", c.analysis.bootstrap);
    a.get("resamples", c.analysis.resamples);
    a.get("nash_tol", c.analysis.nash_tol);
    a.get("deltas", c.analysis.deltas);
    a.get("reference", c.analysis.reference);
    a.get("reference_tol", c.analysis.reference_tol);
    a.finish();
  }
  r.finish();
  c.metagame.seed = c.seed;
  validate(c);
  return c;
}

inline nlohmann::json read_json_file(const fs::path& path, const char* what) {
  std::ifstream is(path);
  if (!is) throw FormatError(std::string(what) + ": cannot open " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string(what) + ": " + path.string() + ": " + e.what());
  }
}

/// Loads a config file, or the config embedded in a run manifest.
inline PipelineConfig load_config(const fs::path& path) {
  nlohmann::json j = read_json_file(path, "config");
  if (j.is_object() && j.contains("manifest_version")) j = j.at("config");
  return parse_config(j);
}

inline std::string config_hash(const PipelineConfig& c) { return content_hash(nlohmann::json(c)); }

// ---------------------------------------------------------------------------
// Manifest and artifact I/O

struct RunManifest {
  std::string command;
  PipelineConfig config;
  std::vector<std::size_t> pool_ids;
  std::map<std::string, std::string> inputs;   // role -> content hash
  std::map<std::string, std::string> outputs;  // file name -> content hash
  nlohmann::json extra = nlohmann::json::object();
  // Not hashed: they vary between otherwise identical runs.
  std::string started, finished;
  unsigned jobs = 1;

  nlohmann::json identity() const {
    const auto& c = config;
    std::vector<std::string> labels;
    for (const auto& m : c.metas) labels.push_back(m.label);
    return nlohmann::json{
        {"manifest_version", kManifestVersion},
        {"command", command},
        {"config_hash", config_hash(c)},
        {"config", c},
        {"module_versions",
         {{"collusion", kVersion}, {"pool_format", kPoolFormatVersion}, {"manifest_format", kManifestVersion}}},
        {"master_seed", c.seed},
        {"pool_ids", pool_ids},
        {"meta_strategies", labels},
        {"flags",
         {{"share_category_instance", c.metagame.share_category_instance},
          {"shared_initial_state", c.metagame.shared_initial_state},
          {"tertile_method", c.tertile_method},
          {"payoff_convention", c.analysis.payoff_convention}}},
        {"inputs", inputs},
        {"extra", extra}};
  }
  std::string hash() const { return content_hash(identity()); }

  nlohmann::json to_json() const {
    nlohmann::json j = identity();
    j["manifest_hash"] = hash();
    j["outputs"] = outputs;
    j["runtime"] = {{"started", started}, {"finished", finished}, {"jobs", jobs}};
    return j;
  }
};

inline std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline std::string bytes_hash(const std::string& bytes) { return hex64(fnv1a64(bytes)); }

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write " + path.string());
  os << text;
  if (!os) throw FormatError("write failed: " + path.string());
}

inline std::string read_text(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

/// Collects outputs of one command and finally writes its manifest.
class RunWriter {
 public:
  RunWriter(std::string command, const PipelineConfig& cfg, fs::path dir, unsigned jobs) : dir_(std::move(dir)) {
    m_.command = std::move(command);
    m_.config = cfg;
    m_.jobs = jobs;
    m_.started = utc_timestamp();
  }
  RunManifest& manifest() { return m_; }
  const fs::path& dir() const { return dir_; }
  std::string hash() const { return m_.hash(); }

  /// Writes `text` under dir (or at an absolute path) and records its hash.
  fs::path put(const fs::path& name, const std::string& text) {
    const fs::path p = name.is_absolute() ? name : dir_ / name;
    write_text(p, text);
    m_.outputs[name.is_absolute() ? p.filename().string() : name.generic_string()] = bytes_hash(text);
    return p;
  }
  fs::path finish(const fs::path& manifest_path = {}) {
    m_.finished = utc_timestamp();
    const fs::path p = manifest_path.empty() ? dir_ / ("manifest." + m_.command + ".json") : manifest_path;
    write_text(p, m_.to_json().dump(1) + "\n");
    return p;
  }

 private:
  fs::path dir_;
  RunManifest m_;
};

/// Number formatting for CSV: '.' decimal, round-trip precision.
inline std::string num(double v) {
  std::ostringstream os;
  os.imbue(std::locale::classic());
  os.precision(17);
  os << v;
  return os.str();
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  if (quoted) throw FormatError("csv: unterminated quote");
  out.push_back(cur);
  return out;
}

// ---------------------------------------------------------------------------
// Payoff-matrix CSV (long format: row,col,row_payoff,col_payoff)

struct LabeledMatrix {
  std::vector<std::string> row_labels, col_labels;
  PayoffMatrix payoff;
};

inline std::string matrix_csv(const LabeledMatrix& m, const std::string& manifest_hash) {
  std::string out = "# manifest_hash=" + manifest_hash + "\nrow,col,row_payoff,col_payoff\n";
  for (std::size_t i = 0; i < m.row_labels.size(); ++i)
    for (std::size_t j = 0; j < m.col_labels.size(); ++j)
      out += csv_field(m.row_labels[i]) + "," + csv_field(m.col_labels[j]) + "," + num(m.payoff[i][j][0]) + "," +
             num(m.payoff[i][j][1]) + "\n";
  return out;
}

/// Reads the long format; labels keep first-appearance order and every
/// (row, col) pair must appear exactly once.
inline LabeledMatrix read_matrix_csv(const fs::path& path) {
  std::istringstream is(read_text(path));
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  std::vector<std::tuple<std::string, std::string, double, double>> cells;
  auto parse_num = [&](const std::string& s) {
    std::istringstream ns(s);
    ns.imbue(std::locale::classic());
    double v = 0.0;
    if (!(ns >> v) || !(ns >> std::ws).eof())
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": bad number '" + s + "'");
    return v;
  };
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const auto f = split_csv_line(line);
    if (!header) {
      if (f != std::vector<std::string>{"row", "col", "row_payoff", "col_payoff"})
        throw FormatError(path.string() + ":" + std::to_string(lineno) +
                          ": expected header row,col,row_payoff,col_payoff");
      header = true;
      continue;
    }
    if (f.size() != 4) throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected 4 fields");
    cells.emplace_back(f[0], f[1], parse_num(f[2]), parse_num(f[3]));
  }
  if (cells.empty()) throw FormatError(path.string() + ": no matrix entries");
  LabeledMatrix m;
  std::map<std::string, std::size_t> ri, ci;
  for (const auto& [r, c, a, b] : cells) {
    if (!ri.count(r)) ri.emplace(r, ri.size()), m.row_labels.push_back(r);
    if (!ci.count(c)) ci.emplace(c, ci.size()), m.col_labels.push_back(c);
  }
  m.payoff.assign(m.row_labels.size(), std::vector<std::array<double, 2>>(m.col_labels.size()));
  std::vector<std::vector<int>> seen(m.row_labels.size(), std::vector<int>(m.col_labels.size(), 0));
  for (const auto& [r, c, a, b] : cells) {
    const std::size_t i = ri[r], j = ci[c];
    if (seen[i][j]++) throw FormatError(path.string() + ": duplicate cell (" + r + ", " + c + ")");
    m.payoff[i][j] = {a, b};
  }
  for (std::size_t i = 0; i < seen.size(); ++i)
    for (std::size_t j = 0; j < seen[i].size(); ++j)
      if (!seen[i][j])
        throw FormatError(path.string() + ": missing cell (" + m.row_labels[i] + ", " + m.col_labels[j] + ")");
  return m;
}

// ---------------------------------------------------------------------------
// Commands

struct Grids {
  Benchmarks bench;
  GridPair grids;
  StageGame game;
};

inline Grids make_grids(const PipelineConfig& c) {
  Grids g;
  g.bench = solve_benchmarks(c.env);
  g.grids = build_price_grids(g.bench, c.n_discrete);
  g.game = StageGame::from_pricing(c.env, g.grids);
  return g;
}

/// Refuses pools produced under a different environment or grid.
inline void check_pool(const PolicyPool& pool, const PipelineConfig& c) {
  const Grids g = make_grids(c);
  if (pool.env_hash != content_hash(c.env))
    throw HashMismatch("pool env hash " + pool.env_hash + " does not match config env hash " + content_hash(c.env));
  if (pool.grid_hash != grid_hash(g.grids))
    throw HashMismatch("pool grid hash " + pool.grid_hash + " does not match config grid hash " + grid_hash(g.grids));
}

/// Splits --out into (artifact path, manifest path): a *.json path names the
/// artifact itself, anything else is a directory.
inline std::pair<fs::path, fs::path> artifact_paths(const fs::path& out, const std::string& default_name,
                                                    const std::string& command) {
  if (out.extension() == ".json") {
    fs::path m = out;
    m.replace_extension(".manifest.json");
    return {fs::absolute(out), fs::absolute(m)};
  }
  return {fs::absolute(out / default_name), fs::absolute(out / ("manifest." + command + ".json"))};
}

inline PolicyPool cmd_pretrain(const PipelineConfig& c, const fs::path& out, unsigned jobs = 1) {
  const auto [pool_path, manifest_path] = artifact_paths(out, "pool.json", "pretrain");
  PretrainOptions o = c.pretrain;
  PolicyPool pool = pretrain_pool(c.env, c.n_discrete, c.seed_first, c.seed_last, o, jobs);
  RunWriter w("pretrain", c, pool_path.parent_path(), jobs);
  for (const auto& e : pool.entries) w.manifest().pool_ids.push_back(e.id);
  w.manifest().extra = {{"excluded_nonconverged", pool.excluded_nonconverged}};
  w.put(pool_path, serialize_pool(pool));
  w.finish(manifest_path);
  return pool;
}

inline std::string pool_scatter_csv(const PolicyPool& pool, const std::string& manifest_hash) {
  std::string out = "# manifest_hash=" + manifest_hash +
                    "\nid,partner_id,role,algorithm,pc_self,pc_partner,cr_self,cr_opp,category\n";
  auto opt = [](const std::optional<double>& v) { return v ? num(*v) : std::string(); };
  for (const auto& e : pool.entries)
    out += std::to_string(e.id) + "," + std::to_string(e.partner_id) + "," + to_string(e.role) + "," + e.algorithm +
           "," + opt(e.pc_self) + "," + opt(e.pc_partner) + "," + opt(e.cr_self) + "," + opt(e.cr_opp) + "," +
           to_string(e.category) + "\n";
  return out;
}

inline PolicyPool cmd_characterize(const PipelineConfig& c, const fs::path& pool_in, const fs::path& out,
                                   unsigned jobs = 1) {
  PolicyPool pool = load_pool(pool_in.string());
  check_pool(pool, c);
  const std::string in_hash = content_hash(pool);
  const Grids g = make_grids(c);
  characterize_pool(pool, g.game, jobs);
  categorize(pool, c.tertile_method);
  const auto [pool_path, manifest_path] = artifact_paths(out, "pool.json", "characterize");
  RunWriter w("characterize", c, pool_path.parent_path(), jobs);
  w.manifest().inputs["pool"] = in_hash;
  for (const auto& e : pool.entries) w.manifest().pool_ids.push_back(e.id);
  std::map<std::string, std::size_t> counts;
  for (const auto& e : pool.entries) ++counts[to_string(e.category)];
  w.manifest().extra = {{"category_counts", counts}};
  w.put(pool_path, serialize_pool(pool));
  w.put(pool_path.parent_path() / "pool_scatter.csv", pool_scatter_csv(pool, w.hash()));
  w.finish(manifest_path);
  return pool;
}

inline std::string iteration_name(std::size_t it) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "iteration_%03zu.json", it);
  return std::string("metagame/") + buf;
}

inline std::vector<MetaGameResult> cmd_metagame(const PipelineConfig& c, const fs::path& pool_in, const fs::path& out,
                                                unsigned jobs = 1) {
  if (c.metas.empty()) throw ConfigError("metagame.metas", "empty meta-strategy list");
  const PolicyPool pool = load_pool(pool_in.string());
  check_pool(pool, c);
  bool any_category = false;
  for (const auto& e : pool.entries) any_category = any_category || e.category != Category::kNone;
  bool needs_pool = false;
  for (const auto& m : c.metas) needs_pool = needs_pool || m.category != Category::kRD;
  if (needs_pool && !any_category) throw InvalidArgument("metagame: pool is not categorized (run characterize first)");
  MetaGameSpec spec;
  spec.metas[0] = c.metas;
  spec.pools[0] = &pool;
  spec.env = c.env;
  spec.n_discrete = c.n_discrete;
  const auto results = run_metagame(spec, c.metagame, jobs);
  RunWriter w("metagame", c, out, jobs);
  w.manifest().inputs["pool"] = content_hash(pool);
  for (const auto& e : pool.entries) w.manifest().pool_ids.push_back(e.id);
  for (const auto& r : results)
    w.put(iteration_name(r.iteration),
          nlohmann::json{{"manifest_hash", w.hash()}, {"result", r}}.dump() + "\n");
  w.finish();
  return results;
}

inline std::vector<MetaGameResult> load_metagame_results(const fs::path& dir) {
  const fs::path sub = dir / "metagame";
  if (!fs::is_directory(sub)) throw FormatError("no metagame results under " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(sub))
    if (e.path().extension() == ".json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw FormatError("no metagame results under " + sub.string());
  std::vector<MetaGameResult> out;
  for (const auto& f : files) {
    const auto j = read_json_file(f, "metagame result");
    try {
      out.push_back(j.at("result").get<MetaGameResult>());
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(f.string() + ": " + e.what());
    }
  }
  return out;
}

namespace detail {

inline double cell_value(const CellResult& cell, bool discounted, std::size_t q) {
  return discounted ? cell.discounted[q] : cell.mean[q];
}

}  // namespace detail

/// Per-iteration matrices under the configured payoff convention.
inline std::vector<PayoffMatrix> iteration_matrices(const std::vector<MetaGameResult>& rs, bool discounted) {
  std::vector<PayoffMatrix> out;
  for (const auto& r : rs) {
    PayoffMatrix m(r.rows(), std::vector<std::array<double, 2>>(r.cols()));
    for (std::size_t i = 0; i < r.rows(); ++i)
      for (std::size_t j = 0; j < r.cols(); ++j)
        for (std::size_t q = 0; q < 2; ++q) m[i][j][q] = detail::cell_value(r.cells[i][j], discounted, q);
    out.push_back(std::move(m));
  }
  return out;
}

inline PayoffMatrix average(const std::vector<PayoffMatrix>& ms) {
  PayoffMatrix m = ms.at(0);
  for (std::size_t k = 1; k < ms.size(); ++k)
    for (std::size_t i = 0; i < m.size(); ++i)
      for (std::size_t j = 0; j < m[i].size(); ++j)
        for (std::size_t q = 0; q < 2; ++q) m[i][j][q] += ms[k][i][j][q];
  for (auto& row : m)
    for (auto& cell : row)
      for (double& v : cell) v /= static_cast<double>(ms.size());
  return m;
}

inline CellSamples run_samples(const std::vector<MetaGameResult>& rs, bool discounted) {
  if (!discounted) return cell_samples(rs);
  CellSamples s(rs.at(0).rows(), std::vector<std::array<std::vector<double>, 2>>(rs[0].cols()));
  for (const auto& r : rs)
    for (std::size_t i = 0; i < r.rows(); ++i)
      for (std::size_t j = 0; j < r.cols(); ++j)
        for (const auto& run : r.cells[i][j].runs)
          for (std::size_t q = 0; q < 2; ++q) s[i][j][q].push_back(run.discounted[q]);
  return s;
}

/// Full statistics for one matrix: equilibria, regrets, uniform scores and
/// the optional reference-profile audit.
inline nlohmann::json analyze_matrix(const LabeledMatrix& lm, const CellSamples* samples, const Benchmarks& bench,
                                     const PipelineConfig& c) {
  const auto& a = c.analysis;
  const bool discounted = a.payoff_convention == "discounted";
  const double scale = discounted ? 1.0 / (1.0 - c.env.gamma) : 1.0;
  PayoffMatrix m = lm.payoff;
  CellSamples sym_samples;
  const CellSamples* s = samples;
  // Symmetric environment with one meta list: analyze the symmetrized game.
  const bool symmetrized = c.env.symmetric() && lm.row_labels == lm.col_labels && !is_symmetric_game(m);
  if (symmetrized) {
    m = symmetrize(m);
    if (samples) {
      sym_samples = symmetrize_samples(*samples);
      s = &sym_samples;
    }
  }
  NashOptions no;
  no.tol = a.nash_tol;
  const auto nes = find_nash(m, no);
  const MixedProfile best = max_entropy_ne(nes);
  const NeAudit audit = audit_profile(m, best);

  auto support = [](const std::vector<double>& mix, const std::vector<std::string>& labels) {
    nlohmann::json out = nlohmann::json::object();
    for (std::size_t k = 0; k < mix.size(); ++k)
      if (mix[k] > 1e-9) out[labels[k]] = mix[k];
    return out;
  };
  nlohmann::json j;
  j["row_labels"] = lm.row_labels;
  j["col_labels"] = lm.col_labels;
  j["benchmarks"] = bench;
  j["payoff_convention"] = a.payoff_convention;
  j["symmetrized"] = symmetrized;
  j["symmetric_game"] = is_symmetric_game(m);
  j["matrix"] = m;
  j["equilibria"] = nlohmann::json::array();
  for (const auto& p : nes)
    j["equilibria"].push_back({{"profile", p},
                               {"row_support", support(p.row_mix, lm.row_labels)},
                               {"col_support", support(p.col_mix, lm.col_labels)},
                               {"payoff",
                                {expected_payoff(m, p.row_mix, p.col_mix, Role::kRow),
                                 expected_payoff(m, p.row_mix, p.col_mix, Role::kCol)}}});
  j["max_entropy_ne"] = {{"profile", best},
                         {"row_support", support(best.row_mix, lm.row_labels)},
                         {"col_support", support(best.col_mix, lm.col_labels)},
                         {"epsilon", audit.max_gain()},
                         {"payoff",
                          {expected_payoff(m, best.row_mix, best.col_mix, Role::kRow),
                           expected_payoff(m, best.row_mix, best.col_mix, Role::kCol)}}};
  for (Role role : {Role::kRow, Role::kCol}) {
    RegretOptions ro;
    ro.role = role;
    ro.level = a.ci_level;
    ro.bootstrap = a.bootstrap && s;
    ro.resamples = a.resamples;
    ro.seed = derive_seed(c.seed, {0x72656772ULL, idx(role)});
    ro.tol = a.nash_tol;
    j["regret"][to_string(role)] = ne_regret(m, best, s, ro);
    j["uniform"][to_string(role)] = uniform_score(m, bench.r_competitive[idx(role)] * scale,
                                                  bench.r_monopoly[idx(role)] * scale, s, role, a.ci_level);
  }
  if (!a.reference.empty()) {
    if (lm.row_labels != lm.col_labels) throw ConfigError("analysis.reference", "needs identical row/col labels");
    std::vector<double> x(lm.row_labels.size(), 0.0);
    double total = 0.0;
    for (const auto& [label, w] : a.reference) {
      const auto it = std::find(lm.row_labels.begin(), lm.row_labels.end(), label);
      if (it == lm.row_labels.end()) throw ConfigError("analysis.reference", "unknown label '" + label + "'");
      x[static_cast<std::size_t>(it - lm.row_labels.begin())] = w;
      total += w;
    }
    if (!(total > 0.0)) throw ConfigError("analysis.reference", "weights sum to zero");
    for (double& v : x) v /= total;
    const MixedProfile ref = make_profile(x, x, is_symmetric_game(m));
    const double eps = audit_profile(m, ref).max_gain();
    j["reference"] = {{"profile", ref},
                      {"support", support(x, lm.row_labels)},
                      {"epsilon", eps},
                      {"tol", a.reference_tol},
                      {"is_epsilon_ne", eps <= a.reference_tol}};
  }
  return j;
}

inline nlohmann::json cmd_analyze(const PipelineConfig& c, const fs::path& results_dir, const fs::path& out,
                                  unsigned jobs = 1) {
  const auto rs = load_metagame_results(results_dir);
  const bool discounted = c.analysis.payoff_convention == "discounted";
  const Grids g = make_grids(c);
  LabeledMatrix lm{rs[0].row_labels, rs[0].col_labels, average(iteration_matrices(rs, discounted))};
  const CellSamples samples = run_samples(rs, discounted);
  RunWriter w("analyze", c, out, jobs);
  w.manifest().inputs["metagame"] = content_hash(rs);
  nlohmann::json j = analyze_matrix(lm, &samples, g.bench, c);
  if (c.analysis.deltas) {
    std::vector<std::vector<CellDelta>> sum;
    for (const auto& r : rs) {
      const auto d = delta_metrics(r, g.game, jobs);
      if (sum.empty()) {
        sum = d;
        continue;
      }
      for (std::size_t i = 0; i < d.size(); ++i)
        for (std::size_t k = 0; k < d[i].size(); ++k)
          for (std::size_t q = 0; q < 2; ++q) {
            sum[i][k].dpc[q] += d[i][k].dpc[q];
            for (std::size_t z = 0; z < 2; ++z) sum[i][k].dcr[q][z] += d[i][k].dcr[q][z];
          }
    }
    const double n = static_cast<double>(rs.size());
    for (auto& row : sum)
      for (auto& d : row)
        for (std::size_t q = 0; q < 2; ++q) {
          d.dpc[q] /= n;
          for (double& v : d.dcr[q]) v /= n;
        }
    j["deltas"] = sum;
  }
  j["n_iterations"] = rs.size();
  j["manifest_hash"] = w.hash();
  w.put("analysis.json", j.dump(1) + "\n");
  w.finish();
  return j;
}

// ---------------------------------------------------------------------------
// Report rendering

inline std::string ne_report_text(const nlohmann::json& a) {
  std::ostringstream os;
  os.imbue(std::locale::classic());
  auto fix = [](double v, int prec = 4) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", prec, v);
    return std::string(buf);
  };
  const auto& rows = a.at("row_labels");
  const auto& cols = a.at("col_labels");
  os << "# manifest_hash=" << a.at("manifest_hash").get<std::string>() << "\n";
  os << "meta-strategies: " << rows.size() << " x " << cols.size()
     << (a.at("symmetrized").get<bool>() ? " (symmetrized)" : "")
     << (a.at("symmetric_game").get<bool>() ? ", symmetric game" : "") << "\n";
  os << "payoff convention: " << a.at("payoff_convention").get<std::string>() << "\n";
  os << "equilibria found: " << a.at("equilibria").size() << "\n\n";
  auto print_support = [&](const char* head, const nlohmann::json& sup) {
    os << head;
    for (const auto& [label, w] : sup.items()) os << "  " << label << "=" << fix(w.get<double>());
    os << "\n";
  };
  const auto& best = a.at("max_entropy_ne");
  os << "max-entropy NE (entropy " << fix(best.at("profile").at("entropy").get<double>()) << ", epsilon "
     << best.at("epsilon").get<double>() << ")\n";
  print_support("  row support:", best.at("row_support"));
  print_support("  col support:", best.at("col_support"));
  os << "  payoff: " << fix(best.at("payoff")[0].get<double>()) << ", " << fix(best.at("payoff")[1].get<double>())
     << "\n\n";
  if (a.contains("reference")) {
    const auto& ref = a.at("reference");
    os << "reference profile";
    print_support(":", ref.at("support"));
    os << "  epsilon " << ref.at("epsilon").get<double>() << " (tol " << ref.at("tol").get<double>() << "): "
       << (ref.at("is_epsilon_ne").get<bool>() ? "epsilon-NE" : "not an epsilon-NE") << "\n\n";
  }
  for (const char* role : {"row", "col"}) {
    const auto& labels = std::string(role) == "row" ? rows : cols;
    os << role << " meta-strategy      NE-regret   +-CI     uniform CoI%  +-CI\n";
    for (std::size_t k = 0; k < labels.size(); ++k) {
      const auto& r = a.at("regret").at(role).at(k);
      const auto& u = a.at("uniform").at(role).at(k);
      char buf[160];
      auto clean = [](double v) { return std::abs(v) < 5e-13 ? 0.0 : v; };
      std::snprintf(buf, sizeof buf, "  %-20s %9.5f  %7.5f  %10.2f  %6.2f%s\n", labels[k].get<std::string>().c_str(),
                    clean(r.at("regret").get<double>()), r.at("ci_half").get<double>(), u.at("coi").get<double>(),
                    u.at("ci_half").get<double>(), r.at("ci_includes_zero").get<bool>() ? "  *" : "");
      os << buf;
    }
    os << "\n";
  }
  os << "* regret CI includes zero\n";
  return os.str();
}

inline std::string table_csv(const nlohmann::json& a, const char* what, const std::string& hash) {
  std::string out = "# manifest_hash=" + hash + "\nrole,meta";
  const bool regret = std::string(what) == "regret";
  out += regret ? ",regret,ci_half,ci_includes_zero\n" : ",score,coi,ci_half\n";
  for (const char* role : {"row", "col"}) {
    const auto& labels = a.at(std::string(role) == "row" ? "row_labels" : "col_labels");
    for (std::size_t k = 0; k < labels.size(); ++k) {
      const auto& v = a.at(what).at(role).at(k);
      out += std::string(role) + "," + csv_field(labels[k].get<std::string>()) + ",";
      if (regret)
        out += num(v.at("regret").get<double>()) + "," + num(v.at("ci_half").get<double>()) + "," +
               (v.at("ci_includes_zero").get<bool>() ? "1" : "0") + "\n";
      else
        out += num(v.at("score").get<double>()) + "," + num(v.at("coi").get<double>()) + "," +
               num(v.at("ci_half").get<double>()) + "\n";
    }
  }
  return out;
}

inline std::string deltas_csv(const nlohmann::json& a, const std::string& hash) {
  std::string out = "# manifest_hash=" + hash +
                    "\nrow,col,dpc_row,dpc_col,dcr_self_row,dcr_opp_row,dcr_self_col,dcr_opp_col\n";
  const auto& rows = a.at("row_labels");
  const auto& cols = a.at("col_labels");
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < cols.size(); ++j) {
      const auto& d = a.at("deltas").at(i).at(j);
      out += csv_field(rows[i].get<std::string>()) + "," + csv_field(cols[j].get<std::string>()) + "," +
             num(d.at("dpc")[0].get<double>()) + "," + num(d.at("dpc")[1].get<double>()) + "," +
             num(d.at("dcr")[0][0].get<double>()) + "," + num(d.at("dcr")[0][1].get<double>()) + "," +
             num(d.at("dcr")[1][0].get<double>()) + "," + num(d.at("dcr")[1][1].get<double>()) + "\n";
    }
  return out;
}

/// CoI time series (mean over iterations), one line per (cell, checkpoint).
inline std::string coi_series_csv(const std::vector<MetaGameResult>& rs, const Benchmarks& b, const std::string& hash) {
  std::string out = "# manifest_hash=" + hash + "\nrow,col,t,coi_row,coi_col,updates_row,updates_col\n";
  const auto& r0 = rs.at(0);
  for (std::size_t i = 0; i < r0.rows(); ++i)
    for (std::size_t j = 0; j < r0.cols(); ++j) {
      const std::size_t n = r0.cells[i][j].series.size();
      for (std::size_t k = 0; k < n; ++k) {
        std::array<double, 2> pay{}, upd{};
        for (const auto& r : rs)
          for (std::size_t q = 0; q < 2; ++q) {
            pay[q] += r.cells[i][j].series.at(k)[q];
            upd[q] += r.cells[i][j].update_series.at(k)[q];
          }
        const double m = static_cast<double>(rs.size());
        std::array<double, 2> c{};
        for (std::size_t q = 0; q < 2; ++q) c[q] = 100.0 * coi(pay[q] / m, b.r_competitive[q], b.r_monopoly[q]);
        out += csv_field(r0.row_labels[i]) + "," + csv_field(r0.col_labels[j]) + "," +
               std::to_string((k + 1) * r0.series_stride) + "," + num(c[0]) + "," + num(c[1]) + "," +
               num(upd[0] / m) + "," + num(upd[1] / m) + "\n";
      }
    }
  return out;
}

inline std::string iterations_csv(const std::vector<MetaGameResult>& rs, bool discounted, const std::string& hash) {
  std::string out = "# manifest_hash=" + hash + "\niteration,row,col,row_payoff,col_payoff\n";
  const auto ms = iteration_matrices(rs, discounted);
  for (std::size_t it = 0; it < rs.size(); ++it)
    for (std::size_t i = 0; i < rs[it].rows(); ++i)
      for (std::size_t j = 0; j < rs[it].cols(); ++j)
        out += std::to_string(rs[it].iteration) + "," + csv_field(rs[it].row_labels[i]) + "," +
               csv_field(rs[it].col_labels[j]) + "," + num(ms[it][i][j][0]) + "," + num(ms[it][i][j][1]) + "\n";
  return out;
}

struct ReportInputs {
  fs::path results_dir;  // metagame results + analysis.json
  fs::path matrix_csv;   // hand-entered matrix instead of results
};

/// Renders payoff CSVs, the NE report, BR-graph DOT files and the CoI series.
inline nlohmann::json cmd_report(const PipelineConfig& c, const ReportInputs& in, const fs::path& out,
                                 unsigned jobs = 1) {
  RunWriter w("report", c, out, jobs);
  const Grids g = make_grids(c);
  const bool discounted = c.analysis.payoff_convention == "discounted";
  nlohmann::json a;
  std::vector<MetaGameResult> rs;
  LabeledMatrix lm;
  if (!in.matrix_csv.empty()) {
    lm = read_matrix_csv(in.matrix_csv);
    w.manifest().inputs["matrix"] = bytes_hash(read_text(in.matrix_csv));
    a = analyze_matrix(lm, nullptr, g.bench, c);
  } else {
    rs = load_metagame_results(in.results_dir);
    w.manifest().inputs["metagame"] = content_hash(rs);
    const fs::path ap = in.results_dir / "analysis.json";
    if (fs::exists(ap)) {
      a = read_json_file(ap, "analysis");
      w.manifest().inputs["analysis"] = content_hash(a);
    } else {
      const CellSamples samples = run_samples(rs, discounted);
      a = analyze_matrix({rs[0].row_labels, rs[0].col_labels, average(iteration_matrices(rs, discounted))}, &samples,
                         g.bench, c);
    }
    lm = {rs[0].row_labels, rs[0].col_labels, average(iteration_matrices(rs, discounted))};
  }
  const fs::path dir = "report";
  const std::string hash = w.hash();
  a["manifest_hash"] = hash;
  w.put(dir / "payoff_mean.csv", matrix_csv(lm, hash));
  w.put(dir / "ne_report.txt", ne_report_text(a));
  w.put(dir / "ne_report.json", a.dump(1) + "\n");
  w.put(dir / "regret.csv", table_csv(a, "regret", hash));
  w.put(dir / "uniform.csv", table_csv(a, "uniform", hash));
  std::vector<PayoffMatrix> games = rs.empty() ? std::vector<PayoffMatrix>{lm.payoff} : iteration_matrices(rs, discounted);
  std::vector<GraphRole> roles{GraphRole::kRow, GraphRole::kCol};
  if (lm.row_labels == lm.col_labels) roles.push_back(GraphRole::kAggregate);
  for (GraphRole role : roles)
    w.put(dir / ("br_graph_" + to_string(role) + ".dot"),
          "// manifest_hash=" + hash + "\n" + to_dot(br_graph(games, lm.row_labels, lm.col_labels, role)));
  if (!rs.empty()) {
    w.put(dir / "payoff_iterations.csv", iterations_csv(rs, discounted, hash));
    w.put(dir / "coi_series.csv", coi_series_csv(rs, g.bench, hash));
  }
  if (a.contains("deltas")) w.put(dir / "deltas.csv", deltas_csv(a, hash));
  w.finish();
  return a;
}

// ---------------------------------------------------------------------------
// LLM policy recovery

struct LlmRecoverOptions {
  std::string variant = "p0h0";
  std::string oracle = "";
  std::size_t samples = 16;
  Role role = Role::kRow;
  fs::path partner_pool;  // h2: RC partner drawn from this pool
  fs::path record;        // append the oracle transcript here
  std::size_t stop_window = 10;
  std::size_t max_rounds = 500;
  HttpOptions http;
};

inline nlohmann::json cmd_llm_recover(const PipelineConfig& c, const LlmRecoverOptions& o, const fs::path& out,
                                      unsigned jobs = 1) {
  const auto [p, h] = parse_variant(o.variant);
  const Grids g = make_grids(c);
  std::shared_ptr<ChatOracle> oracle = make_oracle(o.oracle, o.http);
  std::string transcript_hash;
  if (o.oracle.rfind("replay:", 0) == 0 || o.oracle.rfind("scripted:", 0) == 0)
    transcript_hash = bytes_hash(read_text(o.oracle.substr(o.oracle.find(':') + 1)));
  if (!o.record.empty()) oracle = std::make_shared<RecordingOracle>(oracle, o.record.string());

  LlmContext base = make_context(c.env, c.n_discrete, p, h, o.role);
  std::optional<PolicyTable> partner;
  std::optional<std::size_t> partner_id;
  std::string pool_hash;
  if (h == HistoryVariant::kH2) {
    if (o.partner_pool.empty()) throw InvalidArgument("llm-recover: h2 needs --partner-pool");
    const PolicyPool pool = load_pool(o.partner_pool.string());
    check_pool(pool, c);
    pool_hash = content_hash(pool);
    const auto members = pool.members(Category::kRC, c.env.symmetric() ? std::nullopt
                                                                        : std::optional<Role>(other(o.role)));
    if (members.empty()) throw InvalidArgument("llm-recover: partner pool has no RC entries");
    Rng rng(derive_seed(c.seed, {0x7061727472ULL}));
    partner_id = members[rng.below(members.size())];
    partner = pool.by_id(*partner_id).policy;
  }
  HistoryOptions ho;
  ho.stop_window = o.stop_window;
  ho.max_rounds = o.max_rounds;
  ho.seed = derive_seed(c.seed, {0x68ULL});
  const HistoryResult hist = build_history(h, base, *oracle, partner ? &*partner : nullptr, ho);
  const RecoveryResult rec = recover_policy(hist.ctx, *oracle, o.samples, derive_seed(c.seed, {0x72ULL}), jobs);

  const auto pc = paired_cooperativeness(g.game, o.role, rec.policy, rec.policy);
  const Robustness cr = cooperative_robustness(g.game, o.role, rec.policy);
  const std::string artifact_name = "policy.json";
  const auto [policy_path, manifest_path] = artifact_paths(out, artifact_name, "llm-recover");
  RunWriter w("llm-recover", c, policy_path.parent_path(), jobs);
  w.manifest().extra = {{"variant", o.variant},
                        {"oracle", oracle->identity()},
                        {"samples", o.samples},
                        {"role", to_string(o.role)},
                        {"stop_window", o.stop_window},
                        {"max_rounds", o.max_rounds},
                        {"http_metadata", o.http.metadata}};
  if (!transcript_hash.empty()) w.manifest().inputs["transcript"] = transcript_hash;
  if (!pool_hash.empty()) w.manifest().inputs["partner_pool"] = pool_hash;
  const double scale = 1.0 / (1.0 - c.env.gamma);
  nlohmann::json j{{"manifest_hash", w.hash()},
                   {"variant", o.variant},
                   {"oracle", oracle->identity()},
                   {"policy", rec.policy},
                   {"parse_failures", rec.parse_failures},
                   {"history_rounds", hist.rounds},
                   {"history_truncated", hist.truncated},
                   {"history_fallbacks", hist.fallbacks},
                   {"partner_id", partner_id ? nlohmann::json(*partner_id) : nlohmann::json(nullptr)},
                   {"pc_self", pc.first},
                   {"cr_self", cr.cr_self},
                   {"cr_opp", cr.cr_opp},
                   {"pc_self_coi", 100.0 * coi(pc.first / scale, g.bench.r_competitive[idx(o.role)],
                                               g.bench.r_monopoly[idx(o.role)])}};
  w.put(policy_path, j.dump(1) + "\n");
  w.finish(manifest_path);
  return j;
}

}  // namespace collusion

#endif  // COLLUSION_PIPELINE_HPP
