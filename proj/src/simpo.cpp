#include "fairalign/simpo.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "fairalign/error.hpp"
#include "fairalign/seed.hpp"

namespace fairalign {
namespace {

using json = nlohmann::json;

ad::NodeId loss_node(ad::Graph& g, BoundModel& bound, const std::vector<EncodedPair>& batch,
                     const SimPOConfig& config) {
  if (batch.empty()) throw Error(Errc::kEmptyBatch, "SimPO loss of an empty batch");
  std::vector<ad::NodeId> losses;
  for (const auto& pair : batch) {
    if (pair.chosen.empty() || pair.rejected.empty()) throw Error(Errc::kEmptyResponse, "empty response in batch");
    const ad::NodeId a = g.scale(bound.sequence_logprob(pair.x, pair.chosen),
                                 config.beta / static_cast<double>(pair.chosen.size()));
    const ad::NodeId b = g.scale(bound.sequence_logprob(pair.x, pair.rejected),
                                 config.beta / static_cast<double>(pair.rejected.size()));
    const ad::NodeId z = g.add_scalar(g.sub(a, b), -config.gamma);
    losses.push_back(g.softplus(g.scale(z, -1.0)));
  }
  return g.mean(losses);
}

void shuffle(std::vector<std::size_t>& v, std::uint64_t stream) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = bounded(mix_seed(stream, static_cast<std::uint64_t>(i)), i);
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace

void SimPOConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error(Errc::kInvalidArgument, m); };
  if (!(beta > 0.0) || !std::isfinite(beta)) fail("beta must be positive");
  if (!(gamma >= 0.0) || !std::isfinite(gamma)) fail("gamma must be non-negative");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) fail("learning rate must be non-negative");
  if (batch_size == 0) fail("batch size must be positive");
  if (lora_rank == 0) fail("LoRA rank must be positive");
  if (!(held_out_fraction >= 0.0 && held_out_fraction < 1.0)) fail("held-out fraction must lie in [0, 1)");
  if (grad_check && !(grad_check_epsilon > 0.0)) fail("gradient-check epsilon must be positive");
}

LoraConfig SimPOConfig::lora() const { return {lora_rank, lora_scale, lora_targets}; }

json SimPOConfig::to_json() const {
  return {{"beta", beta},
          {"gamma", gamma},
          {"learning_rate", learning_rate},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"seed", seed},
          {"lora_rank", lora_rank},
          {"lora_scale", lora_scale},
          {"lora_targets", lora_targets},
          {"held_out_fraction", held_out_fraction},
          {"grad_check", grad_check},
          {"grad_check_epsilon", grad_check_epsilon},
          {"grad_check_fraction", grad_check_fraction}};
}

SimPOConfig SimPOConfig::from_json(const json& j) {
  SimPOConfig c;
  c.beta = j.value("beta", c.beta);
  c.gamma = j.value("gamma", c.gamma);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  c.lora_rank = j.value("lora_rank", c.lora_rank);
  c.lora_scale = j.value("lora_scale", c.lora_scale);
  c.lora_targets = j.value("lora_targets", c.lora_targets);
  c.held_out_fraction = j.value("held_out_fraction", c.held_out_fraction);
  c.grad_check = j.value("grad_check", c.grad_check);
  c.grad_check_epsilon = j.value("grad_check_epsilon", c.grad_check_epsilon);
  c.grad_check_fraction = j.value("grad_check_fraction", c.grad_check_fraction);
  return c;
}

double softplus(double x) { return std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0); }

double simpo_pair_loss(double a, double b, double gamma) { return softplus(-(a - b - gamma)); }

double simpo_reward(double logprob, std::size_t response_length, double beta) {
  if (response_length == 0) throw Error(Errc::kEmptyResponse, "reward of an empty response");
  return beta / static_cast<double>(response_length) * logprob;
}

double simpo_reward(ToyLM& model, AdapterSet* adapters, const std::vector<std::size_t>& x,
                    const std::vector<std::size_t>& y, double beta) {
  if (y.empty()) throw Error(Errc::kEmptyResponse, "reward of an empty response");
  return simpo_reward(sequence_logprob(model, adapters, x, y), y.size(), beta);
}

std::vector<EncodedPair> encode_pairs(const Tokenizer& tokenizer, const PreferenceDataset& dataset) {
  std::vector<EncodedPair> out;
  for (const auto& t : dataset.tuples) {
    EncodedPair p{tokenizer.encode(t.prompt), tokenizer.encode(t.chosen), tokenizer.encode(t.rejected)};
    if (p.chosen.empty() || p.rejected.empty()) {
      throw Error(Errc::kEmptyResponse, "tuple " + t.id + " has an empty response");
    }
    out.push_back(std::move(p));
  }
  return out;
}

double simpo_loss(ToyLM& model, AdapterSet* adapters, const std::vector<EncodedPair>& batch,
                  const SimPOConfig& config) {
  ad::Graph g;
  BoundModel bound(g, model, adapters);
  return g.scalar(loss_node(g, bound, batch, config));
}

double simpo_loss_and_grad(ToyLM& model, AdapterSet* adapters, const std::vector<EncodedPair>& batch,
                           const SimPOConfig& config, bool base_grads) {
  if (adapters != nullptr) {
    for (Param* p : adapters->trainable()) p->zero_grad();
  }
  if (base_grads) {
    for (auto& p : model.params()) p.zero_grad();
  }
  ad::Graph g;
  BoundModel bound(g, model, adapters, base_grads);
  const ad::NodeId loss = loss_node(g, bound, batch, config);
  g.backward(loss);
  return g.scalar(loss);
}

json GradCheckResult::to_json() const {
  return {{"max_relative_error", max_relative_error}, {"checked", checked}, {"worst", worst}};
}

GradCheckResult check_gradients(const std::vector<Param*>& params, const std::vector<Tensor>& analytic,
                                const std::function<double()>& loss, double epsilon, double fraction,
                                std::uint64_t seed) {
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) {
    throw Error(Errc::kInvalidArgument, "gradient-check epsilon must be a positive number");
  }
  if (analytic.size() != params.size()) throw Error(Errc::kShapeMismatch, "one analytic gradient per parameter");
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (!analytic[p].same_shape(params[p]->value)) {
      throw Error(Errc::kShapeMismatch, "analytic gradient for " + params[p]->name + " has the wrong shape");
    }
    for (std::size_t i = 0; i < params[p]->value.size(); ++i) coords.emplace_back(p, i);
  }
  GradCheckResult r;
  if (coords.empty()) return r;
  const auto want = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(coords.size()))), 1, coords.size());
  // Partial Fisher-Yates: the first `want` entries are a uniform subset.
  const std::uint64_t stream = mix_seed(seed, "grad-check");
  for (std::size_t i = 0; i < want; ++i) {
    const std::size_t j = i + bounded(mix_seed(stream, static_cast<std::uint64_t>(i)), coords.size() - i);
    std::swap(coords[i], coords[j]);
  }
  coords.resize(want);
  std::sort(coords.begin(), coords.end());

  for (const auto& [p, i] : coords) {
    double& x = params[p]->value.data[i];
    const double saved = x;
    x = saved + epsilon;
    const double up = loss();
    x = saved - epsilon;
    const double down = loss();
    x = saved;
    const double fd = (up - down) / (2.0 * epsilon);
    const double g = analytic[p].data[i];
    const double rel = std::abs(g - fd) / std::max({std::abs(g), std::abs(fd), kGradCheckFloor});
    ++r.checked;
    if (rel >= r.max_relative_error) {
      r.max_relative_error = rel;
      r.worst = params[p]->name + "[" + std::to_string(i) + "]";
    }
  }
  return r;
}

GradCheckResult grad_check(ToyLM& model, AdapterSet& adapters, const std::vector<EncodedPair>& batch,
                           const SimPOConfig& config, double epsilon, bool include_base, double fraction) {
  if (!(epsilon > 0.0)) throw Error(Errc::kInvalidArgument, "gradient-check epsilon must be positive");
  simpo_loss_and_grad(model, &adapters, batch, config, include_base);
  std::vector<Param*> params = adapters.trainable();
  if (include_base) {
    for (auto& p : model.params()) params.push_back(&p);
  }
  std::vector<Tensor> analytic;
  for (Param* p : params) analytic.push_back(p->grad);
  return check_gradients(params, analytic, [&] { return simpo_loss(model, &adapters, batch, config); }, epsilon,
                         fraction, config.seed);
}

json TrainReport::to_json() const {
  return {{"epoch_losses", epoch_losses},
          {"held_out_accuracy", held_out_accuracy},
          {"held_out_size", held_out_size},
          {"train_size", train_size},
          {"mean_margin", mean_margin},
          {"grad_check", grad_check ? grad_check->to_json() : json(nullptr)},
          {"base_hash_before", base_hash_before},
          {"base_hash_after", base_hash_after},
          {"trainable_parameters", trainable_parameters},
          {"base_parameters", base_parameters},
          {"wall_seconds", wall_seconds}};
}

TrainResult train(ToyLM& model, const PreferenceDataset& dataset, const SimPOConfig& config) {
  const auto start = std::chrono::steady_clock::now();
  config.validate();
  if (dataset.tuples.empty()) throw Error(Errc::kEmptyDataset, "no preference pairs to train on");
  if (model.merged()) throw Error(Errc::kInvalidArgument, "cannot train a merged model");
  const std::vector<EncodedPair> pairs = encode_pairs(model.tokenizer(), dataset);

  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  shuffle(order, mix_seed(config.seed, "split"));
  std::size_t n_held = static_cast<std::size_t>(std::floor(config.held_out_fraction * static_cast<double>(pairs.size())));
  n_held = std::min(n_held, pairs.size() - 1);
  std::vector<std::size_t> held(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_held));
  std::vector<std::size_t> training(order.begin() + static_cast<std::ptrdiff_t>(n_held), order.end());

  TrainResult result;
  result.adapters = model.attach_lora(config.lora(), config.seed);
  TrainReport& report = result.report;
  report.train_size = training.size();
  report.held_out_size = held.size();
  report.trainable_parameters = result.adapters.parameter_count();
  report.base_parameters = model.parameter_count();
  report.base_hash_before = model.weights_hash();

  std::vector<Param*> trainable = result.adapters.trainable();
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<std::size_t> perm = training;
    shuffle(perm, mix_seed(mix_seed(config.seed, "epoch"), static_cast<std::uint64_t>(epoch)));
    double total = 0.0;
    for (std::size_t start_i = 0; start_i < perm.size(); start_i += config.batch_size) {
      std::vector<EncodedPair> batch;
      for (std::size_t k = start_i; k < std::min(perm.size(), start_i + config.batch_size); ++k) {
        batch.push_back(pairs[perm[k]]);
      }
      const double loss = simpo_loss_and_grad(model, &result.adapters, batch, config);
      if (!std::isfinite(loss)) {
        throw Error(Errc::kNonFiniteLoss, "loss " + std::to_string(loss) + " at epoch " + std::to_string(epoch) +
                                              ", batch starting at " + std::to_string(start_i));
      }
      for (Param* p : trainable) {
        for (double gi : p->grad.data) {
          if (!std::isfinite(gi)) {
            throw Error(Errc::kNonFiniteLoss, "non-finite gradient for " + p->name + " at epoch " +
                                                  std::to_string(epoch));
          }
        }
      }
      total += loss * static_cast<double>(batch.size());
      for (Param* p : trainable) {
        for (std::size_t i = 0; i < p->value.size(); ++i) p->value.data[i] -= config.learning_rate * p->grad.data[i];
      }
    }
    report.epoch_losses.push_back(total / static_cast<double>(perm.size()));
  }

  const std::vector<std::size_t>& scored = held.empty() ? training : held;
  std::size_t wins = 0;
  double margin = 0.0;
  for (std::size_t i : scored) {
    const double a = simpo_reward(model, &result.adapters, pairs[i].x, pairs[i].chosen, config.beta);
    const double b = simpo_reward(model, &result.adapters, pairs[i].x, pairs[i].rejected, config.beta);
    wins += a > b ? 1 : 0;
    margin += a - b;
  }
  report.held_out_accuracy = static_cast<double>(wins) / static_cast<double>(scored.size());
  report.mean_margin = margin / static_cast<double>(scored.size());

  if (config.grad_check) {
    std::vector<EncodedPair> batch;
    for (std::size_t k = 0; k < std::min(training.size(), config.batch_size); ++k) batch.push_back(pairs[training[k]]);
    report.grad_check = grad_check(model, result.adapters, batch, config, config.grad_check_epsilon, false,
                                   config.grad_check_fraction);
  }
  for (Param* p : trainable) p->zero_grad();
  report.base_hash_after = model.weights_hash();
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

PreferenceDataset make_separable_task(std::size_t n, std::uint64_t seed) {
  static const std::vector<std::string> kRaces{"White", "Black", "Asian", "Hispanic"};
  static const std::vector<std::string> kGenders{"man", "woman"};
  static const std::vector<std::string> kQuestions{
      "what helps a sore throat ?",   "how is a sprained ankle treated ?", "what causes frequent headaches ?",
      "is a mild fever dangerous ?",  "how can I sleep better ?",          "what relieves lower back pain ?",
      "when should a rash be seen ?", "how is seasonal allergy managed ?"};
  static const std::vector<std::string> kAnswers{
      "rest and drink plenty of fluids", "apply ice and keep it raised", "see a doctor if it persists",
      "take the usual dose of pain relief", "keep a regular routine", "gentle stretching usually helps"};
  PreferenceDataset ds;
  const std::uint64_t stream = mix_seed(seed, "separable");
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t s = mix_seed(stream, static_cast<std::uint64_t>(i));
    PreferenceTuple t;
    t.id = "sep-" + std::to_string(i);
    t.race = kRaces[bounded(mix_seed(s, "race"), kRaces.size())];
    t.gender = kGenders[bounded(mix_seed(s, "gender"), kGenders.size())];
    t.prompt = "A " + t.race + " " + t.gender + " patient asks: " +
               kQuestions[bounded(mix_seed(s, "question"), kQuestions.size())];
    const std::string& answer = kAnswers[bounded(mix_seed(s, "answer"), kAnswers.size())];
    t.chosen = answer + " +";
    t.rejected = answer + " -";
    t.reference = answer + " +";
    ds.tuples.push_back(std::move(t));
  }
  return ds;
}

}  // namespace fairalign
