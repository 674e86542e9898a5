#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "fairalign/autodiff.hpp"
#include "fairalign/lora.hpp"

namespace fairalign {

/// Whitespace-plus-punctuation tokenizer over a closed vocabulary. Index 0 is
/// the beginning-of-sequence marker.
class Tokenizer {
 public:
  static constexpr std::string_view kBos = "<bos>";

  /// Splits on whitespace; every ASCII punctuation byte is its own token.
  static std::vector<std::string> split(std::string_view text);
  /// Sorted vocabulary of every token in `texts`.
  static Tokenizer from_texts(const std::vector<std::string>& texts);

  explicit Tokenizer(std::vector<std::string> vocab);

  /// Throws UnknownToken.
  std::vector<std::size_t> encode(std::string_view text) const;
  std::size_t id(std::string_view token) const;
  std::size_t size() const { return vocab_.size(); }
  const std::vector<std::string>& vocab() const { return vocab_; }

 private:
  std::vector<std::string> vocab_;
  std::vector<std::pair<std::string, std::size_t>> index_;  // sorted by token
};

struct ToyConfig {
  std::size_t d_model = 32;
  std::size_t n_layers = 2;
  std::size_t d_ff = 64;
  std::size_t context = 48;  // max |x| + |y|
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static ToyConfig from_json(const nlohmann::json& j);
};

/// Decoder-only transformer: token plus learned positional embeddings, L
/// blocks of single-head causal attention and a GELU MLP (both residual), and
/// an output projection with bias.
class ToyLM {
 public:
  ToyLM(ToyConfig config, Tokenizer tokenizer);

  const ToyConfig& config() const { return config_; }
  const Tokenizer& tokenizer() const { return tokenizer_; }
  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }
  Param& param(std::string_view name);
  const Param& param(std::string_view name) const;
  std::size_t parameter_count() const;

  /// Adapters on every configured target, A random and B = 0.
  AdapterSet attach_lora(const LoraConfig& lora, std::uint64_t seed) const;

  /// Folds the adapters into the base weights, keeping a copy for unmerge().
  void merge(const AdapterSet& adapters);
  /// Restores the exact pre-merge weights.
  void unmerge();
  bool merged() const { return backup_.has_value(); }

  /// SHA-256 over every base tensor's name and raw bytes.
  std::string weights_hash() const;

  nlohmann::json to_json() const;
  static ToyLM from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static ToyLM load(const std::filesystem::path& path);

 private:
  ToyConfig config_;
  Tokenizer tokenizer_;
  std::vector<Param> params_;
  std::optional<std::vector<Tensor>> backup_;
};

/// Forward pass bound to one graph. Base weights enter as constants unless
/// `base_grads` is set; adapter weights always carry gradients.
class BoundModel {
 public:
  BoundModel(ad::Graph& graph, ToyLM& model, AdapterSet* adapters, bool base_grads = false);

  /// Logits (n x V) for token ids; n must not exceed the context.
  ad::NodeId logits(const std::vector<std::size_t>& ids);
  /// Scalar node: sum of log p(y_t | x, y_<t) under teacher forcing.
  ad::NodeId sequence_logprob(const std::vector<std::size_t>& x, const std::vector<std::size_t>& y);

 private:
  ad::NodeId weight(const std::string& name) const;

  ad::Graph& g_;
  const ToyLM& model_;
  std::vector<std::pair<std::string, ad::NodeId>> weights_;
};

/// Throws ContextOverflow when |x| + |y| exceeds the context. Empty y gives 0.
double sequence_logprob(ToyLM& model, AdapterSet* adapters, const std::vector<std::size_t>& x,
                        const std::vector<std::size_t>& y);
double sequence_logprob(ToyLM& model, AdapterSet* adapters, std::string_view x, std::string_view y);

Tensor forward_logits(ToyLM& model, AdapterSet* adapters, const std::vector<std::size_t>& ids);

}  // namespace fairalign
