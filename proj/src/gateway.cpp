#include "fairalign/gateway.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <random>
#include <sstream>
#include <thread>

#include "fairalign/error.hpp"
#include "fairalign/http_backend.hpp"
#include "fairalign/mock_backend.hpp"

namespace fairalign {
namespace {

using json = nlohmann::json;

// JSON has no infinities; a choice with zero probability is stored as "-inf".
json logprob_json(double lp) {
  if (std::isinf(lp) && lp < 0) return "-inf";
  return lp;
}

double logprob_from(const json& j) {
  if (j.is_string() && j.get<std::string>() == "-inf") return -std::numeric_limits<double>::infinity();
  if (!j.is_number()) throw Error(Errc::kMalformedResponse, "logprob must be a number");
  return j.get<double>();
}

json choices_json(const std::vector<TokenChoice>& choices) {
  json out = json::array();
  for (const auto& c : choices) out.push_back({{"token", c.token}, {"logprob", logprob_json(c.logprob)}});
  return out;
}

std::vector<TokenChoice> choices_from(const json& j) {
  std::vector<TokenChoice> out;
  for (const auto& c : j) out.push_back({c.at("token").get<std::string>(), logprob_from(c.at("logprob"))});
  return out;
}

std::string utc_now_iso8601() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

bool is_retryable(Errc code) { return code == Errc::kTransport || code == Errc::kRateLimited; }

void default_sleep(double seconds) {
  std::this_thread::sleep_for(std::chrono::duration<double>(seconds));
}

class GateLease {
 public:
  explicit GateLease(AdmissionGate& gate) : gate_(gate) { gate_.acquire(); }
  ~GateLease() { gate_.release(); }
  GateLease(const GateLease&) = delete;
  GateLease& operator=(const GateLease&) = delete;

 private:
  AdmissionGate& gate_;
};

}  // namespace

void validate(const GenerationRequest& req) {
  if (req.prompt.empty()) throw Error(Errc::kInvalidRequest, "prompt must be non-empty");
  if (req.max_tokens < 1) throw Error(Errc::kInvalidRequest, "max_tokens must be >= 1");
  if (!(req.temperature >= 0.0) || !std::isfinite(req.temperature)) {
    throw Error(Errc::kInvalidRequest, "temperature must be a finite non-negative number");
  }
  if (req.top_logprobs < 0) throw Error(Errc::kInvalidRequest, "top_logprobs must be >= 0");
}

json to_json(const GenerationResult& r) {
  json tokens = json::array();
  for (const auto& t : r.tokens) {
    tokens.push_back({{"token", t.token}, {"logprob", logprob_json(t.logprob)}, {"top", choices_json(t.top)}});
  }
  return {{"text", r.text},
          {"tokens", tokens},
          {"first_token_alternatives", choices_json(r.first_token_alternatives)},
          {"backend_id", r.backend_id},
          {"has_logprobs", r.has_logprobs},
          {"created_at", r.created_at}};
}

GenerationResult generation_from_json(const json& j) {
  GenerationResult r;
  r.text = j.at("text").get<std::string>();
  for (const auto& t : j.at("tokens")) {
    r.tokens.push_back({t.at("token").get<std::string>(), logprob_from(t.at("logprob")),
                        choices_from(t.at("top"))});
  }
  r.first_token_alternatives = choices_from(j.at("first_token_alternatives"));
  r.backend_id = j.value("backend_id", "");
  r.has_logprobs = j.value("has_logprobs", true);
  r.created_at = j.value("created_at", "");
  return r;
}

void sort_and_truncate(std::vector<TokenChoice>& choices, int k) {
  std::stable_sort(choices.begin(), choices.end(),
                   [](const TokenChoice& a, const TokenChoice& b) { return a.logprob > b.logprob; });
  if (k >= 0 && choices.size() > static_cast<std::size_t>(k)) choices.resize(static_cast<std::size_t>(k));
}

BackendConfig BackendConfig::from_json(const json& j) {
  BackendConfig c;
  c.id = j.value("id", "");
  c.kind = j.value("kind", "mock");
  c.endpoint_url = j.value("endpoint_url", "");
  c.embedding_url = j.value("embedding_url", "");
  c.model_name = j.value("model_name", "");
  c.auth_token_env_var = j.value("auth_token_env_var", "");
  c.timeout_s = j.value("timeout", 30.0);
  c.max_retries = j.value("max_retries", 3);
  c.backoff_base_s = j.value("backoff_base", 0.5);
  c.max_concurrency = j.value("max_concurrency", 4);
  const std::string schema = j.value("schema", "chat");
  if (schema == "chat") {
    c.schema = WireSchema::kChat;
  } else if (schema == "completions") {
    c.schema = WireSchema::kCompletions;
  } else {
    throw Error(Errc::kInvalidArgument, "unknown wire schema '" + schema + "'");
  }
  if (j.contains("mock")) c.mock = j["mock"];
  c.validate();
  return c;
}

json BackendConfig::to_json() const {
  json j{{"id", id},
         {"kind", kind},
         {"endpoint_url", endpoint_url},
         {"embedding_url", embedding_url},
         {"model_name", model_name},
         {"auth_token_env_var", auth_token_env_var},
         {"timeout", timeout_s},
         {"max_retries", max_retries},
         {"backoff_base", backoff_base_s},
         {"max_concurrency", max_concurrency},
         {"schema", schema == WireSchema::kChat ? "chat" : "completions"}};
  if (!mock.is_null()) j["mock"] = mock;
  return j;
}

void BackendConfig::validate() const {
  if (id.empty()) throw Error(Errc::kInvalidArgument, "backend id must be non-empty");
  if (max_concurrency < 1) throw Error(Errc::kInvalidArgument, "max_concurrency must be >= 1");
  if (!(timeout_s > 0.0)) throw Error(Errc::kInvalidArgument, "timeout must be > 0");
  if (max_retries < 0) throw Error(Errc::kInvalidArgument, "max_retries must be >= 0");
  if (backoff_base_s < 0.0) throw Error(Errc::kInvalidArgument, "backoff_base must be >= 0");
  if (kind != "mock" && kind != "http") throw Error(Errc::kInvalidArgument, "unknown backend kind '" + kind + "'");
  if (kind == "http" && endpoint_url.empty()) {
    throw Error(Errc::kInvalidArgument, "http backend '" + id + "' needs endpoint_url");
  }
}

std::string sha256_hex(std::string_view data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error(Errc::kIo, "SHA-256 failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out += kHex[digest[i] >> 4];
    out += kHex[digest[i] & 0xf];
  }
  return out;
}

std::string cache_key(std::string_view backend_id, std::string_view model, const GenerationRequest& req) {
  // nlohmann::json objects serialize with sorted keys, which makes this canonical.
  const json canonical{{"op", "generate"},
                       {"backend", backend_id},
                       {"model", model},
                       {"prompt", req.prompt},
                       {"max_tokens", req.max_tokens},
                       {"temperature", req.temperature},
                       {"seed", req.seed ? json(*req.seed) : json(nullptr)},
                       {"top_logprobs", req.top_logprobs}};
  return sha256_hex(canonical.dump());
}

std::string embedding_cache_key(std::string_view backend_id, std::string_view model, std::string_view text) {
  const json canonical{{"op", "embed"}, {"backend", backend_id}, {"model", model}, {"text", text}};
  return sha256_hex(canonical.dump());
}

ResponseCache::ResponseCache(std::filesystem::path root) : root_(std::move(root)) {
  std::filesystem::create_directories(root_);
}

std::filesystem::path ResponseCache::path_for(std::string_view backend_id, std::string_view key) const {
  return root_ / std::string(backend_id) / std::string(key.substr(0, 2)) / (std::string(key) + ".json");
}

std::optional<json> ResponseCache::get(std::string_view backend_id, std::string_view key) const {
  const auto path = path_for(backend_id, key);
  std::ifstream in(path);
  if (!in) return std::nullopt;
  try {
    return json::parse(in);
  } catch (const json::parse_error&) {
    // A torn file cannot exist thanks to the rename; treat anything else as a miss.
    return std::nullopt;
  }
}

bool ResponseCache::put(std::string_view backend_id, std::string_view key, const json& value) const {
  const auto path = path_for(backend_id, key);
  if (std::filesystem::exists(path)) return false;
  std::filesystem::create_directories(path.parent_path());

  static std::atomic<std::uint64_t> counter{0};
  std::ostringstream tmp_name;
  tmp_name << path.filename().string() << ".tmp." << std::hash<std::thread::id>{}(std::this_thread::get_id())
           << "." << counter.fetch_add(1);
  const auto tmp = path.parent_path() / tmp_name.str();
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error(Errc::kIo, "cannot write cache file " + tmp.string());
    out << value.dump();
  }
  if (std::filesystem::exists(path)) {
    std::filesystem::remove(tmp);
    return false;
  }
  std::filesystem::rename(tmp, path);
  return true;
}

bool ResponseCache::contains(std::string_view backend_id, std::string_view key) const {
  return std::filesystem::exists(path_for(backend_id, key));
}

std::size_t ResponseCache::entry_count(std::string_view backend_id) const {
  const auto dir = root_ / std::string(backend_id);
  if (!std::filesystem::exists(dir)) return 0;
  std::size_t n = 0;
  for (const auto& entry : std::filesystem::recursive_directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".json") ++n;
  }
  return n;
}

AdmissionGate::AdmissionGate(int limit) : limit_(limit) {
  if (limit < 1) throw Error(Errc::kInvalidArgument, "admission limit must be >= 1");
}

void AdmissionGate::acquire() {
  std::unique_lock lock(mu_);
  cv_.wait(lock, [this] { return in_flight_ < limit_; });
  ++in_flight_;
  peak_ = std::max(peak_, in_flight_);
}

void AdmissionGate::release() {
  {
    std::lock_guard lock(mu_);
    --in_flight_;
  }
  cv_.notify_one();
}

int AdmissionGate::in_flight() const {
  std::lock_guard lock(mu_);
  return in_flight_;
}

int AdmissionGate::peak() const {
  std::lock_guard lock(mu_);
  return peak_;
}

Gateway::Gateway(std::shared_ptr<Backend> backend, BackendConfig config,
                 std::optional<std::filesystem::path> cache_dir, SleepFn sleep)
    : backend_(std::move(backend)),
      config_(std::move(config)),
      sleep_(sleep ? std::move(sleep) : SleepFn(default_sleep)),
      gate_(config_.max_concurrency) {
  config_.validate();
  if (cache_dir) cache_.emplace(*cache_dir);
}

template <typename Fn>
auto Gateway::with_retries(Fn&& fn) -> decltype(fn()) {
  for (int attempt = 0;; ++attempt) {
    try {
      GateLease lease(gate_);
      return fn();
    } catch (const Error& e) {
      if (!is_retryable(e.code()) || attempt >= config_.max_retries) {
        if (is_retryable(e.code()) && attempt > 0) {
          throw Error(e.code(), std::string(e.what()) + " (after " + std::to_string(attempt + 1) + " attempts)");
        }
        throw;
      }
      sleep_(config_.backoff_base_s * std::ldexp(1.0, attempt));
    }
  }
}

std::string Gateway::key_for(const GenerationRequest& req) const {
  return cache_key(config_.id, backend_->model(), req);
}

GenerationResult Gateway::generate(const GenerationRequest& req) {
  validate(req);
  const std::string key = key_for(req);
  if (cache_) {
    if (auto hit = cache_->get(config_.id, key)) {
      GenerationResult r = generation_from_json(*hit);
      r.cached = true;
      return r;
    }
  }
  if (offline_) throw Error(Errc::kTransport, "offline and no cached response for key " + key);

  GenerationResult r = with_retries([&] { return backend_->generate(req); });
  r.backend_id = config_.id;
  r.cached = false;
  r.created_at = utc_now_iso8601();
  if (cache_) {
    if (!cache_->put(config_.id, key, to_json(r))) {
      // Another writer won the race; return its stored copy so every caller
      // sees one canonical response per key.
      if (auto stored = cache_->get(config_.id, key)) {
        GenerationResult s = generation_from_json(*stored);
        s.cached = false;
        return s;
      }
    }
  }
  return r;
}

EmbeddingVector Gateway::embed(const std::string& text) {
  if (text.empty()) throw Error(Errc::kInvalidRequest, "cannot embed an empty string");
  const std::string key = embedding_cache_key(config_.id, backend_->model(), text);
  EmbeddingVector v;
  bool hit = false;
  if (cache_) {
    if (auto stored = cache_->get(config_.id, key)) {
      v.values = stored->at("values").get<std::vector<double>>();
      v.cached = true;
      hit = true;
    }
  }
  if (!hit) {
    if (offline_) throw Error(Errc::kTransport, "offline and no cached embedding for key " + key);
    v = with_retries([&] { return backend_->embed(text); });
    v.cached = false;
  }
  if (v.values.empty()) throw Error(Errc::kMalformedResponse, "embedding has zero dimensions");
  for (double x : v.values) {
    if (!std::isfinite(x)) throw Error(Errc::kMalformedResponse, "embedding contains a non-finite entry");
  }
  {
    std::lock_guard lock(dim_mu_);
    if (observed_dim_ && *observed_dim_ != v.dim()) {
      throw Error(Errc::kDimensionDrift, "backend '" + config_.id + "' returned dim " + std::to_string(v.dim()) +
                                             ", previously " + std::to_string(*observed_dim_));
    }
    observed_dim_ = v.dim();
  }
  if (!hit && cache_) cache_->put(config_.id, key, json{{"values", v.values}});
  return v;
}

std::shared_ptr<Backend> make_backend(const BackendConfig& config) {
  config.validate();
  if (config.kind == "http") return std::make_shared<HttpBackend>(config);
  MockSpec spec = config.mock.is_null() ? MockSpec{} : MockSpec::from_json(config.mock);
  if (spec.id.empty()) spec.id = config.id;
  return std::make_shared<MockBackend>(std::move(spec));
}

}  // namespace fairalign
