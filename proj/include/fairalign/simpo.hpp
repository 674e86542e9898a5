#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fairalign/lora.hpp"
#include "fairalign/preference.hpp"
#include "fairalign/toy_lm.hpp"

namespace fairalign {

struct SimPOConfig {
  double beta = 2.0;
  double gamma = 0.5;
  double learning_rate = 0.1;
  std::size_t epochs = 20;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  std::size_t lora_rank = 4;
  double lora_scale = 1.0;
  std::vector<std::string> lora_targets{"wq", "wk", "wv", "wo"};
  double held_out_fraction = 0.2;
  bool grad_check = true;
  double grad_check_epsilon = 1e-4;
  double grad_check_fraction = 0.01;

  /// Throws InvalidArgument.
  void validate() const;
  LoraConfig lora() const;
  nlohmann::json to_json() const;
  static SimPOConfig from_json(const nlohmann::json& j);
};

/// log(1 + e^x) without overflow.
double softplus(double x);
/// -log sigma(a - b - gamma).
double simpo_pair_loss(double a, double b, double gamma);

/// (beta / |y|) * logprob. Throws EmptyResponse when |y| = 0.
double simpo_reward(double logprob, std::size_t response_length, double beta);
double simpo_reward(ToyLM& model, AdapterSet* adapters, const std::vector<std::size_t>& x,
                    const std::vector<std::size_t>& y, double beta);

struct EncodedPair {
  std::vector<std::size_t> x;
  std::vector<std::size_t> chosen;
  std::vector<std::size_t> rejected;
};

/// Propagates UnknownToken; rejects empty responses with EmptyResponse.
std::vector<EncodedPair> encode_pairs(const Tokenizer& tokenizer, const PreferenceDataset& dataset);

/// Mean pair loss over the batch. Throws EmptyBatch.
double simpo_loss(ToyLM& model, AdapterSet* adapters, const std::vector<EncodedPair>& batch, const SimPOConfig& config);

/// Loss with gradients added into the adapter Params (and, with base_grads,
/// the model Params). Gradients are zeroed first.
double simpo_loss_and_grad(ToyLM& model, AdapterSet* adapters, const std::vector<EncodedPair>& batch,
                           const SimPOConfig& config, bool base_grads = false);

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::string worst;  // "param[index]"

  nlohmann::json to_json() const;
};

/// Denominator floor for the relative error. Coordinates whose true gradient
/// is zero (e.g. output rows of tokens that never appear as targets) only see
/// finite-difference roundoff, around ulp(loss) / epsilon.
inline constexpr double kGradCheckFloor = 1e-6;

/// Compares `analytic` (aligned with `params`) against central differences of
/// `loss` on a seeded random subset of coordinates. Relative error is
/// |g - fd| / max(|g|, |fd|, kGradCheckFloor). Throws InvalidArgument unless
/// epsilon > 0.
GradCheckResult check_gradients(const std::vector<Param*>& params, const std::vector<Tensor>& analytic,
                                const std::function<double()>& loss, double epsilon, double fraction,
                                std::uint64_t seed);

/// Autodiff gradients of simpo_loss against finite differences, over the
/// adapter parameters and optionally every base parameter.
GradCheckResult grad_check(ToyLM& model, AdapterSet& adapters, const std::vector<EncodedPair>& batch,
                           const SimPOConfig& config, double epsilon, bool include_base = false,
                           double fraction = 0.01);

struct TrainReport {
  std::vector<double> epoch_losses;
  double held_out_accuracy = 0.0;
  std::size_t held_out_size = 0;
  std::size_t train_size = 0;
  double mean_margin = 0.0;
  std::optional<GradCheckResult> grad_check;
  std::string base_hash_before;
  std::string base_hash_after;
  std::size_t trainable_parameters = 0;
  std::size_t base_parameters = 0;
  double wall_seconds = 0.0;

  nlohmann::json to_json() const;
};

struct TrainResult {
  AdapterSet adapters;
  TrainReport report;
};

/// SGD on the adapters only. Pairs are split into train and held-out sets by
/// the seed; held-out accuracy is the fraction with a > b. An empty held-out
/// split falls back to scoring the training pairs. Throws EmptyDataset or
/// NonFiniteLoss.
TrainResult train(ToyLM& model, const PreferenceDataset& dataset, const SimPOConfig& config);

/// Pairs whose chosen response ends in "+" and rejected response in "-",
/// over varied prompts and shared response prefixes.
PreferenceDataset make_separable_task(std::size_t n, std::uint64_t seed);

}  // namespace fairalign
