#pragma once

#include <string>

#include <json.hpp>

#include "fairalign/gateway.hpp"

namespace fairalign {

/// Request body for the configured wire schema.
nlohmann::json build_generation_body(const BackendConfig& config, const GenerationRequest& req);

/// Parses a chat-completions or plain-completions response. Missing required
/// fields raise MalformedResponse naming the field.
GenerationResult parse_generation_response(WireSchema schema, const nlohmann::json& body, int top_logprobs);
GenerationResult parse_generation_response(WireSchema schema, const std::string& raw, int top_logprobs);

nlohmann::json build_embedding_body(const BackendConfig& config, const std::string& text);
EmbeddingVector parse_embedding_response(const std::string& raw);

struct ParsedUrl {
  std::string scheme_host_port;  // "http://localhost:8080"
  std::string path;              // "/v1/chat/completions"
};
ParsedUrl parse_url(const std::string& url);

/// JSON over HTTP. Status 429 maps to RateLimited, 5xx and connection
/// failures to Transport (both retried by the gateway), other non-2xx to
/// Rejected.
class HttpBackend final : public Backend {
 public:
  explicit HttpBackend(BackendConfig config);

  std::string id() const override { return config_.id; }
  std::string model() const override { return config_.model_name; }
  GenerationResult generate(const GenerationRequest& req) override;
  EmbeddingVector embed(const std::string& text) override;

 private:
  std::string post(const std::string& url, const nlohmann::json& body) const;

  BackendConfig config_;
};

}  // namespace fairalign
