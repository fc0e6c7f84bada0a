// Chat oracle over HTTP plus the textual oracle spec used by the CLI.
#ifndef COLLUSION_LLM_HTTP_HPP
#define COLLUSION_LLM_HTTP_HPP

#include <memory>
#include <regex>
#include <string>

#include "collusion/llm.hpp"
#include "httplib.h"
#include "json.hpp"

namespace collusion {

class OracleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct HttpOptions {
  int connect_timeout_s = 10;
  int read_timeout_s = 300;
  nlohmann::json metadata = nlohmann::json::object();  // model, temperature, ... passed through verbatim
};

/// POSTs {prompt, seed, metadata} to one endpoint and reads {text}.
class HttpOracle : public ChatOracle {
 public:
  explicit HttpOracle(const std::string& url, HttpOptions opts = {}) : url_(url), opts_(std::move(opts)) {
    static const std::regex re(R"(^(http://[^/]+)(/.*)?$)");
    std::smatch m;
    if (!std::regex_match(url, m, re)) throw InvalidArgument("http oracle: unsupported url '" + url + "'");
    base_ = m[1];
    path_ = m[2].matched ? m[2].str() : "/";
  }

  std::string send(const std::string& prompt, std::uint64_t seed) override {
    httplib::Client cli(base_);
    cli.set_connection_timeout(opts_.connect_timeout_s, 0);
    cli.set_read_timeout(opts_.read_timeout_s, 0);
    const nlohmann::json body{{"prompt", prompt}, {"seed", seed}, {"metadata", opts_.metadata}};
    auto res = cli.Post(path_, body.dump(), "application/json");
    if (!res) throw OracleError("http oracle: request to " + url_ + " failed: " + httplib::to_string(res.error()));
    if (res->status != 200)
      throw OracleError("http oracle: " + url_ + " returned status " + std::to_string(res->status));
    try {
      return nlohmann::json::parse(res->body).at("text").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw OracleError(std::string("http oracle: malformed response body: ") + e.what());
    }
  }
  std::string identity() const override { return "http:" + url_; }
  bool deterministic() const override { return false; }

 private:
  std::string url_, base_, path_;
  HttpOptions opts_;
};

/// Builds an oracle from a spec string:
///   constant:<price>  alternate:<a>,<b>  tft:<first price>
///   replay:<file> or scripted:<file> (transcript replay)  http://host:port/path
inline std::shared_ptr<ChatOracle> make_oracle(const std::string& spec, const HttpOptions& http = {}) {
  const auto colon = spec.find(':');
  const std::string kind = spec.substr(0, colon);
  const std::string arg = colon == std::string::npos ? "" : spec.substr(colon + 1);
  auto number = [&](const std::string& s) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != s.size()) throw InvalidArgument("oracle spec '" + spec + "': bad number '" + s + "'");
    return v;
  };
  if (kind == "constant") return constant_oracle(number(arg));
  if (kind == "alternate") {
    const auto comma = arg.find(',');
    if (comma == std::string::npos) throw InvalidArgument("oracle spec '" + spec + "': expected alternate:<a>,<b>");
    return alternating_oracle(number(arg.substr(0, comma)), number(arg.substr(comma + 1)));
  }
  if (kind == "tft") return tit_for_tat_oracle(number(arg));
  if (kind == "replay" || kind == "scripted") {
    if (arg.empty()) throw InvalidArgument("oracle spec '" + spec + "': missing transcript path");
    return std::make_shared<ReplayOracle>(load_transcript(arg));
  }
  if (kind == "http") return std::make_shared<HttpOracle>(spec, http);
  throw InvalidArgument("oracle spec '" + spec + "': unknown kind '" + kind + "'");
}

}  // namespace collusion

#endif  // COLLUSION_LLM_HTTP_HPP
