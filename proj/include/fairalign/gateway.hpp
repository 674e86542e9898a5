#pragma once

#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace fairalign {

struct GenerationRequest {
  std::string prompt;
  int max_tokens = 16;
  double temperature = 0.0;
  std::optional<std::uint64_t> seed;
  // Alternatives requested for each generated token.
  int top_logprobs = 20;
};

/// Throws InvalidRequest on an empty prompt, max_tokens < 1, negative
/// temperature or negative top_logprobs.
void validate(const GenerationRequest& req);

struct TokenChoice {
  std::string token;
  double logprob = 0.0;

  bool operator==(const TokenChoice&) const = default;
};

struct GeneratedToken {
  std::string token;
  double logprob = 0.0;
  std::vector<TokenChoice> top;  // sorted by descending logprob

  bool operator==(const GeneratedToken&) const = default;
};

struct GenerationResult {
  std::string text;
  std::vector<GeneratedToken> tokens;
  std::vector<TokenChoice> first_token_alternatives;
  std::string backend_id;
  bool cached = false;
  // False when the backend returned no log-probabilities at all.
  bool has_logprobs = true;
  // Set by the gateway when the response is first stored.
  std::string created_at;
};

nlohmann::json to_json(const GenerationResult& r);
GenerationResult generation_from_json(const nlohmann::json& j);

/// Sorts descending by logprob (stable on ties) and keeps the first k.
void sort_and_truncate(std::vector<TokenChoice>& choices, int k);

struct EmbeddingVector {
  std::vector<double> values;
  bool cached = false;

  std::size_t dim() const { return values.size(); }
};

enum class WireSchema { kChat, kCompletions };

struct BackendConfig {
  std::string id;                // namespace for the cache, e.g. "teacher"
  std::string kind = "mock";     // "mock" or "http"
  std::string endpoint_url;      // generation endpoint
  std::string embedding_url;     // optional; defaults to endpoint_url
  std::string model_name;
  std::string auth_token_env_var;
  double timeout_s = 30.0;
  int max_retries = 3;
  double backoff_base_s = 0.5;
  int max_concurrency = 4;
  WireSchema schema = WireSchema::kChat;
  nlohmann::json mock;  // MockSpec document when kind == "mock"

  static BackendConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  void validate() const;
};

class Backend {
 public:
  virtual ~Backend() = default;
  virtual std::string id() const = 0;
  virtual std::string model() const = 0;
  virtual GenerationResult generate(const GenerationRequest& req) = 0;
  virtual EmbeddingVector embed(const std::string& text) = 0;
};

std::string sha256_hex(std::string_view data);

/// Stable content hash over every request-relevant field.
std::string cache_key(std::string_view backend_id, std::string_view model, const GenerationRequest& req);
std::string embedding_cache_key(std::string_view backend_id, std::string_view model, std::string_view text);

/// One JSON file per key under <root>/<backend_id>/<key[0:2]>/<key>.json.
/// Writes go through a temporary file and an atomic rename; an existing
/// entry is never overwritten.
class ResponseCache {
 public:
  explicit ResponseCache(std::filesystem::path root);

  std::filesystem::path path_for(std::string_view backend_id, std::string_view key) const;
  std::optional<nlohmann::json> get(std::string_view backend_id, std::string_view key) const;
  /// Returns false when the entry already existed.
  bool put(std::string_view backend_id, std::string_view key, const nlohmann::json& value) const;
  bool contains(std::string_view backend_id, std::string_view key) const;
  std::size_t entry_count(std::string_view backend_id) const;
  const std::filesystem::path& root() const { return root_; }

 private:
  std::filesystem::path root_;
};

/// Counting admission gate bounding requests in flight.
class AdmissionGate {
 public:
  explicit AdmissionGate(int limit);
  void acquire();
  void release();
  int in_flight() const;
  int peak() const;

 private:
  mutable std::mutex mu_;
  std::condition_variable cv_;
  int limit_;
  int in_flight_ = 0;
  int peak_ = 0;
};

using SleepFn = std::function<void(double seconds)>;

/// Shareable front end to one backend: cache lookup, bounded concurrency and
/// retries with exponential backoff (backoff_base * 2^attempt).
class Gateway {
 public:
  Gateway(std::shared_ptr<Backend> backend, BackendConfig config,
          std::optional<std::filesystem::path> cache_dir = std::nullopt, SleepFn sleep = {});

  GenerationResult generate(const GenerationRequest& req);
  EmbeddingVector embed(const std::string& text);

  /// Cache key this gateway would use for `req`.
  std::string key_for(const GenerationRequest& req) const;
  const std::string& backend_id() const { return config_.id; }
  const BackendConfig& config() const { return config_; }
  const ResponseCache* cache() const { return cache_ ? &*cache_ : nullptr; }
  int peak_in_flight() const { return gate_.peak(); }
  /// With offline set, cache misses fail with Transport instead of calling out.
  void set_offline(bool offline) { offline_ = offline; }

 private:
  template <typename Fn>
  auto with_retries(Fn&& fn) -> decltype(fn());

  std::shared_ptr<Backend> backend_;
  BackendConfig config_;
  std::optional<ResponseCache> cache_;
  SleepFn sleep_;
  AdmissionGate gate_;
  bool offline_ = false;
  std::mutex dim_mu_;
  std::optional<std::size_t> observed_dim_;
};

/// Builds a backend from its config: "mock" or "http".
std::shared_ptr<Backend> make_backend(const BackendConfig& config);

}  // namespace fairalign
