#define CPPHTTPLIB_OPENSSL_SUPPORT
#include "fairalign/http_backend.hpp"

#include <httplib.h>

#include <cmath>
#include <cstdlib>

#include "fairalign/error.hpp"

namespace fairalign {
namespace {

using json = nlohmann::json;

const json& require(const json& j, const char* field, const std::string& where) {
  if (!j.is_object() || !j.contains(field) || j[field].is_null()) {
    throw Error(Errc::kMalformedResponse, "missing field '" + where + field + "'");
  }
  return j[field];
}

double checked_logprob(const json& j, const std::string& where) {
  if (!j.is_number()) throw Error(Errc::kMalformedResponse, "field '" + where + "' is not a number");
  double lp = j.get<double>();
  // Servers occasionally report tiny positive values from rounding.
  if (lp > 0.0 && lp < 1e-6) lp = 0.0;
  if (!(lp <= 0.0)) throw Error(Errc::kMalformedResponse, "field '" + where + "' is a positive logprob");
  return lp;
}

GenerationResult parse_chat(const json& body, int k) {
  const json& choices = require(body, "choices", "");
  if (!choices.is_array() || choices.empty()) throw Error(Errc::kMalformedResponse, "missing field 'choices[0]'");
  const json& choice = choices[0];
  const json& message = require(choice, "message", "choices[0].");
  const json& content = require(message, "content", "choices[0].message.");
  if (!content.is_string()) throw Error(Errc::kMalformedResponse, "field 'choices[0].message.content' is not a string");

  GenerationResult r;
  r.text = content.get<std::string>();
  const bool has_lp = choice.contains("logprobs") && choice["logprobs"].is_object() &&
                      choice["logprobs"].contains("content") && choice["logprobs"]["content"].is_array();
  r.has_logprobs = has_lp;
  if (!has_lp) return r;
  for (const auto& t : choice["logprobs"]["content"]) {
    GeneratedToken tok;
    tok.token = require(t, "token", "logprobs.content[].").get<std::string>();
    tok.logprob = checked_logprob(require(t, "logprob", "logprobs.content[]."), "logprobs.content[].logprob");
    if (t.contains("top_logprobs") && t["top_logprobs"].is_array()) {
      for (const auto& alt : t["top_logprobs"]) {
        tok.top.push_back({require(alt, "token", "top_logprobs[].").get<std::string>(),
                           checked_logprob(require(alt, "logprob", "top_logprobs[]."), "top_logprobs[].logprob")});
      }
    }
    sort_and_truncate(tok.top, k);
    r.tokens.push_back(std::move(tok));
  }
  if (!r.tokens.empty()) r.first_token_alternatives = r.tokens.front().top;
  return r;
}

GenerationResult parse_completions(const json& body, int k) {
  const json& choices = require(body, "choices", "");
  if (!choices.is_array() || choices.empty()) throw Error(Errc::kMalformedResponse, "missing field 'choices[0]'");
  const json& choice = choices[0];
  const json& text = require(choice, "text", "choices[0].");
  if (!text.is_string()) throw Error(Errc::kMalformedResponse, "field 'choices[0].text' is not a string");

  GenerationResult r;
  r.text = text.get<std::string>();
  const bool has_lp = choice.contains("logprobs") && choice["logprobs"].is_object() &&
                      choice["logprobs"].contains("tokens");
  r.has_logprobs = has_lp;
  if (!has_lp) return r;
  const json& lp = choice["logprobs"];
  const json& tokens = require(lp, "tokens", "choices[0].logprobs.");
  const json& token_logprobs = require(lp, "token_logprobs", "choices[0].logprobs.");
  if (!tokens.is_array() || !token_logprobs.is_array() || tokens.size() != token_logprobs.size()) {
    throw Error(Errc::kMalformedResponse, "field 'choices[0].logprobs.token_logprobs' does not align with tokens");
  }
  const json top = lp.value("top_logprobs", json::array());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    GeneratedToken tok;
    tok.token = tokens[i].get<std::string>();
    tok.logprob = checked_logprob(token_logprobs[i], "token_logprobs[]");
    if (top.is_array() && i < top.size() && top[i].is_object()) {
      for (const auto& [name, value] : top[i].items()) tok.top.push_back({name, checked_logprob(value, "top_logprobs[]")});
    }
    sort_and_truncate(tok.top, k);
    r.tokens.push_back(std::move(tok));
  }
  if (!r.tokens.empty()) r.first_token_alternatives = r.tokens.front().top;
  return r;
}

}  // namespace

json build_generation_body(const BackendConfig& config, const GenerationRequest& req) {
  json body{{"model", config.model_name}, {"max_tokens", req.max_tokens}, {"temperature", req.temperature}};
  if (req.seed) body["seed"] = *req.seed;
  if (config.schema == WireSchema::kChat) {
    body["messages"] = json::array({{{"role", "user"}, {"content", req.prompt}}});
    body["logprobs"] = req.top_logprobs > 0;
    if (req.top_logprobs > 0) body["top_logprobs"] = req.top_logprobs;
  } else {
    body["prompt"] = req.prompt;
    if (req.top_logprobs > 0) body["logprobs"] = req.top_logprobs;
  }
  return body;
}

GenerationResult parse_generation_response(WireSchema schema, const json& body, int top_logprobs) {
  return schema == WireSchema::kChat ? parse_chat(body, top_logprobs) : parse_completions(body, top_logprobs);
}

GenerationResult parse_generation_response(WireSchema schema, const std::string& raw, int top_logprobs) {
  json body;
  try {
    body = json::parse(raw);
  } catch (const json::parse_error& e) {
    throw Error(Errc::kMalformedResponse, std::string("response is not valid JSON: ") + e.what());
  }
  return parse_generation_response(schema, body, top_logprobs);
}

json build_embedding_body(const BackendConfig& config, const std::string& text) {
  return {{"model", config.model_name}, {"input", text}};
}

EmbeddingVector parse_embedding_response(const std::string& raw) {
  json body;
  try {
    body = json::parse(raw);
  } catch (const json::parse_error& e) {
    throw Error(Errc::kMalformedResponse, std::string("response is not valid JSON: ") + e.what());
  }
  const json& data = require(body, "data", "");
  if (!data.is_array() || data.empty()) throw Error(Errc::kMalformedResponse, "missing field 'data[0]'");
  const json& embedding = require(data[0], "embedding", "data[0].");
  if (!embedding.is_array()) throw Error(Errc::kMalformedResponse, "field 'data[0].embedding' is not an array");
  EmbeddingVector v;
  for (const auto& x : embedding) {
    if (!x.is_number()) throw Error(Errc::kMalformedResponse, "field 'data[0].embedding' has a non-number");
    v.values.push_back(x.get<double>());
  }
  return v;
}

ParsedUrl parse_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw Error(Errc::kInvalidArgument, "endpoint URL lacks a scheme: " + url);
  const auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

HttpBackend::HttpBackend(BackendConfig config) : config_(std::move(config)) { config_.validate(); }

std::string HttpBackend::post(const std::string& url, const json& body) const {
  httplib::Headers headers;
  if (!config_.auth_token_env_var.empty()) {
    const char* token = std::getenv(config_.auth_token_env_var.c_str());
    if (token == nullptr || *token == '\0') {
      throw Error(Errc::kAuthMissing, "environment variable " + config_.auth_token_env_var + " is not set");
    }
    headers.emplace("Authorization", std::string("Bearer ") + token);
  }

  const ParsedUrl parsed = parse_url(url);
  httplib::Client client(parsed.scheme_host_port);
  const auto whole = static_cast<time_t>(config_.timeout_s);
  const auto micros = static_cast<time_t>((config_.timeout_s - static_cast<double>(whole)) * 1e6);
  client.set_connection_timeout(whole, micros);
  client.set_read_timeout(whole, micros);
  client.set_write_timeout(whole, micros);

  auto res = client.Post(parsed.path, headers, body.dump(), "application/json");
  if (!res) {
    throw Error(Errc::kTransport, "POST " + url + " failed: " + httplib::to_string(res.error()));
  }
  if (res->status == 429) throw Error(Errc::kRateLimited, "POST " + url + " returned 429");
  if (res->status >= 500) throw Error(Errc::kTransport, "POST " + url + " returned " + std::to_string(res->status));
  if (res->status < 200 || res->status >= 300) {
    throw Error(Errc::kRejected, "POST " + url + " returned " + std::to_string(res->status) + ": " + res->body);
  }
  return res->body;
}

GenerationResult HttpBackend::generate(const GenerationRequest& req) {
  validate(req);
  const std::string raw = post(config_.endpoint_url, build_generation_body(config_, req));
  GenerationResult r = parse_generation_response(config_.schema, raw, req.top_logprobs);
  r.backend_id = config_.id;
  return r;
}

EmbeddingVector HttpBackend::embed(const std::string& text) {
  if (text.empty()) throw Error(Errc::kInvalidRequest, "cannot embed an empty string");
  const std::string& url = config_.embedding_url.empty() ? config_.endpoint_url : config_.embedding_url;
  return parse_embedding_response(post(url, build_embedding_body(config_, text)));
}

}  // namespace fairalign
