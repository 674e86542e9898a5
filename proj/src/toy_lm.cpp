#include "fairalign/toy_lm.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "fairalign/error.hpp"
#include "fairalign/gateway.hpp"
#include "fairalign/seed.hpp"

namespace fairalign {
namespace {

using json = nlohmann::json;

// Uniform with the given standard deviation, fixed by (seed, name, index).
void init_uniform(Param& p, std::uint64_t seed, double stddev) {
  const std::uint64_t stream = mix_seed(seed, p.name);
  const double half_width = std::sqrt(3.0) * stddev;
  for (std::size_t i = 0; i < p.value.size(); ++i) {
    p.value.data[i] = (2.0 * unit_interval(mix_seed(stream, static_cast<std::uint64_t>(i))) - 1.0) * half_width;
  }
}

Param make_param(std::string name, std::size_t r, std::size_t c) {
  Param p;
  p.name = std::move(name);
  p.value = Tensor(r, c);
  p.grad = Tensor(r, c);
  return p;
}

json tensor_to_json(const Tensor& t) { return {{"shape", {t.rows, t.cols}}, {"data", t.data}}; }

Tensor tensor_from_json(const json& j) {
  Tensor t;
  t.rows = j.at("shape").at(0).get<std::size_t>();
  t.cols = j.at("shape").at(1).get<std::size_t>();
  t.data = j.at("data").get<std::vector<double>>();
  if (t.data.size() != t.rows * t.cols) throw Error(Errc::kShapeMismatch, "tensor data does not match its shape");
  return t;
}

std::string block_name(std::size_t layer, const char* what) { return "block" + std::to_string(layer) + "." + what; }

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::kIo, "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

// ---------------------------------------------------------------------------
// LoRA

json LoraConfig::to_json() const { return {{"rank", rank}, {"scale", scale}, {"targets", targets}}; }

LoraConfig LoraConfig::from_json(const json& j) {
  LoraConfig c;
  c.rank = j.value("rank", c.rank);
  c.scale = j.value("scale", c.scale);
  c.targets = j.value("targets", c.targets);
  return c;
}

Tensor LoraAdapter::delta() const {
  Tensor d = matmul(a.value, b.value);
  for (auto& x : d.data) x *= scale;
  return d;
}

Tensor lora_apply(const Tensor& w, const LoraAdapter& adapter) {
  if (adapter.a.value.rows != w.rows || adapter.b.value.cols != w.cols ||
      adapter.a.value.cols != adapter.b.value.rows) {
    throw Error(Errc::kShapeMismatch, "adapter for " + adapter.target + " does not fit a " + std::to_string(w.rows) +
                                          "x" + std::to_string(w.cols) + " matrix");
  }
  Tensor out = w;
  const Tensor d = adapter.delta();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += d.data[i];
  return out;
}

const LoraAdapter* AdapterSet::find(const std::string& target) const {
  for (const auto& a : adapters) {
    if (a.target == target) return &a;
  }
  return nullptr;
}

std::vector<Param*> AdapterSet::trainable() {
  std::vector<Param*> out;
  for (auto& a : adapters) {
    out.push_back(&a.a);
    out.push_back(&a.b);
  }
  return out;
}

std::size_t AdapterSet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& a : adapters) n += a.parameter_count();
  return n;
}

json AdapterSet::to_json() const {
  json tensors = json::object();
  for (const auto& a : adapters) tensors[a.target] = {{"A", tensor_to_json(a.a.value)}, {"B", tensor_to_json(a.b.value)}};
  return {{"lora", config.to_json()}, {"adapters", tensors}};
}

AdapterSet AdapterSet::from_json(const json& j) {
  AdapterSet set;
  set.config = LoraConfig::from_json(j.at("lora"));
  for (const auto& [target, t] : j.at("adapters").items()) {
    LoraAdapter a;
    a.target = target;
    a.a = make_param(target + ".lora_a", 0, 0);
    a.b = make_param(target + ".lora_b", 0, 0);
    a.a.value = tensor_from_json(t.at("A"));
    a.b.value = tensor_from_json(t.at("B"));
    a.a.zero_grad();
    a.b.zero_grad();
    a.rank = a.a.value.cols;
    a.scale = set.config.scale;
    set.adapters.push_back(std::move(a));
  }
  return set;
}

// ---------------------------------------------------------------------------
// Tokenizer

std::vector<std::string> Tokenizer::split(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char c : text) {
    const auto u = static_cast<unsigned char>(c);
    if (std::isspace(u)) {
      flush();
    } else if (u < 0x80 && std::ispunct(u)) {
      flush();
      out.emplace_back(1, c);
    } else {
      cur += c;
    }
  }
  flush();
  return out;
}

Tokenizer Tokenizer::from_texts(const std::vector<std::string>& texts) {
  std::set<std::string> seen;
  for (const auto& t : texts) {
    for (auto& tok : split(t)) seen.insert(std::move(tok));
  }
  seen.erase(std::string(kBos));
  std::vector<std::string> vocab{std::string(kBos)};
  vocab.insert(vocab.end(), seen.begin(), seen.end());
  return Tokenizer(std::move(vocab));
}

Tokenizer::Tokenizer(std::vector<std::string> vocab) : vocab_(std::move(vocab)) {
  if (vocab_.empty() || vocab_.front() != kBos) {
    throw Error(Errc::kInvalidArgument, "vocabulary must start with " + std::string(kBos));
  }
  for (std::size_t i = 0; i < vocab_.size(); ++i) index_.emplace_back(vocab_[i], i);
  std::sort(index_.begin(), index_.end());
  for (std::size_t i = 1; i < index_.size(); ++i) {
    if (index_[i].first == index_[i - 1].first) {
      throw Error(Errc::kInvalidArgument, "duplicate vocabulary entry '" + index_[i].first + "'");
    }
  }
}

std::size_t Tokenizer::id(std::string_view token) const {
  auto it = std::lower_bound(index_.begin(), index_.end(), token,
                             [](const auto& entry, std::string_view t) { return entry.first < t; });
  if (it == index_.end() || it->first != token) {
    throw Error(Errc::kUnknownToken, "token '" + std::string(token) + "' is not in the vocabulary");
  }
  return it->second;
}

std::vector<std::size_t> Tokenizer::encode(std::string_view text) const {
  std::vector<std::size_t> ids;
  for (const auto& tok : split(text)) ids.push_back(id(tok));
  return ids;
}

// ---------------------------------------------------------------------------
// ToyLM

json ToyConfig::to_json() const {
  return {{"d_model", d_model}, {"n_layers", n_layers}, {"d_ff", d_ff}, {"context", context}, {"seed", seed}};
}

ToyConfig ToyConfig::from_json(const json& j) {
  ToyConfig c;
  c.d_model = j.value("d_model", c.d_model);
  c.n_layers = j.value("n_layers", c.n_layers);
  c.d_ff = j.value("d_ff", c.d_ff);
  c.context = j.value("context", c.context);
  c.seed = j.value("seed", c.seed);
  return c;
}

ToyLM::ToyLM(ToyConfig config, Tokenizer tokenizer) : config_(config), tokenizer_(std::move(tokenizer)) {
  const std::size_t d = config_.d_model;
  const std::size_t v = tokenizer_.size();
  if (d == 0 || config_.d_ff == 0 || config_.context == 0) {
    throw Error(Errc::kInvalidArgument, "model dimensions must be positive");
  }
  const double inv_d = 1.0 / std::sqrt(static_cast<double>(d));
  auto add = [&](std::string name, std::size_t r, std::size_t c, double stddev) {
    params_.push_back(make_param(std::move(name), r, c));
    if (stddev > 0) init_uniform(params_.back(), config_.seed, stddev);
  };
  add("tok_emb", v, d, 1.0);
  add("pos_emb", config_.context, d, 0.3);
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    add(block_name(l, "wq"), d, d, inv_d);
    add(block_name(l, "wk"), d, d, inv_d);
    add(block_name(l, "wv"), d, d, inv_d);
    add(block_name(l, "wo"), d, d, inv_d);
    add(block_name(l, "w1"), d, config_.d_ff, inv_d);
    add(block_name(l, "b1"), 1, config_.d_ff, 0.0);
    add(block_name(l, "w2"), config_.d_ff, d, 1.0 / std::sqrt(static_cast<double>(config_.d_ff)));
    add(block_name(l, "b2"), 1, d, 0.0);
  }
  add("out_w", d, v, inv_d);
  add("out_b", 1, v, 0.0);
}

Param& ToyLM::param(std::string_view name) {
  for (auto& p : params_) {
    if (p.name == name) return p;
  }
  throw Error(Errc::kInvalidArgument, "no parameter named " + std::string(name));
}

const Param& ToyLM::param(std::string_view name) const { return const_cast<ToyLM*>(this)->param(name); }

std::size_t ToyLM::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

AdapterSet ToyLM::attach_lora(const LoraConfig& lora, std::uint64_t seed) const {
  AdapterSet set;
  set.config = lora;
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    for (const auto& target : lora.targets) {
      const std::string name = block_name(l, target.c_str());
      const Tensor& w = param(name).value;
      const std::size_t d = w.rows, k = w.cols, r = lora.rank;
      if (r == 0 || r > std::min(d, k)) {
        throw Error(Errc::kShapeMismatch, "LoRA rank " + std::to_string(r) + " does not fit " + name);
      }
      if (!(lora_parameter_count(d, k, r) < d * k)) {
        throw Error(Errc::kShapeMismatch, "rank " + std::to_string(r) + " adapter on " + name +
                                              " would not be smaller than the matrix");
      }
      LoraAdapter a;
      a.target = name;
      a.rank = r;
      a.scale = lora.scale;
      a.a = make_param(name + ".lora_a", d, r);
      a.b = make_param(name + ".lora_b", r, k);
      init_uniform(a.a, mix_seed(seed, "lora"), 1.0 / std::sqrt(static_cast<double>(d)));
      set.adapters.push_back(std::move(a));
    }
  }
  return set;
}

void ToyLM::merge(const AdapterSet& adapters) {
  if (backup_) throw Error(Errc::kInvalidArgument, "model is already merged");
  std::vector<Tensor> saved;
  std::vector<Tensor> updated;
  for (const auto& p : params_) {
    saved.push_back(p.value);
    const LoraAdapter* a = adapters.find(p.name);
    updated.push_back(a ? lora_apply(p.value, *a) : p.value);
  }
  for (const auto& a : adapters.adapters) param(a.target);  // unknown target throws before any change
  for (std::size_t i = 0; i < params_.size(); ++i) params_[i].value = std::move(updated[i]);
  backup_ = std::move(saved);
}

void ToyLM::unmerge() {
  if (!backup_) throw Error(Errc::kInvalidArgument, "model is not merged");
  for (std::size_t i = 0; i < params_.size(); ++i) params_[i].value = std::move((*backup_)[i]);
  backup_.reset();
}

std::string ToyLM::weights_hash() const {
  std::string bytes;
  for (const auto& p : params_) {
    bytes += p.name;
    bytes += '\0';
    const auto* raw = reinterpret_cast<const char*>(p.value.data.data());
    bytes.append(raw, p.value.data.size() * sizeof(double));
  }
  return sha256_hex(bytes);
}

json ToyLM::to_json() const {
  json tensors = json::object();
  for (const auto& p : params_) tensors[p.name] = tensor_to_json(p.value);
  return {{"config", config_.to_json()}, {"vocab", tokenizer_.vocab()}, {"tensors", tensors}};
}

ToyLM ToyLM::from_json(const json& j) {
  ToyLM model(ToyConfig::from_json(j.at("config")), Tokenizer(j.at("vocab").get<std::vector<std::string>>()));
  const json& tensors = j.at("tensors");
  for (auto& p : model.params_) {
    if (!tensors.contains(p.name)) throw Error(Errc::kMissingField, "model file lacks tensor " + p.name);
    Tensor t = tensor_from_json(tensors[p.name]);
    if (!t.same_shape(p.value)) throw Error(Errc::kShapeMismatch, "tensor " + p.name + " has the wrong shape");
    p.value = std::move(t);
  }
  return model;
}

void ToyLM::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::kIo, "cannot write " + path.string());
  out << to_json().dump() << '\n';
}

ToyLM ToyLM::load(const std::filesystem::path& path) {
  try {
    return from_json(json::parse(read_file(path)));
  } catch (const json::exception& e) {
    throw Error(Errc::kParseError, path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Forward pass

BoundModel::BoundModel(ad::Graph& graph, ToyLM& model, AdapterSet* adapters, bool base_grads)
    : g_(graph), model_(model) {
  if (adapters != nullptr && model.merged()) {
    throw Error(Errc::kInvalidArgument, "adapters cannot be applied to a merged model");
  }
  for (auto& p : model.params()) {
    ad::NodeId w = base_grads ? g_.param(p) : g_.constant(p.value);
    if (adapters != nullptr) {
      for (auto& a : adapters->adapters) {
        if (a.target != p.name) continue;
        if (a.a.value.rows != p.value.rows || a.b.value.cols != p.value.cols) {
          throw Error(Errc::kShapeMismatch, "adapter does not fit " + p.name);
        }
        const ad::NodeId delta = g_.scale(g_.matmul(g_.param(a.a), g_.param(a.b)), a.scale);
        w = g_.add(w, delta);
      }
    }
    weights_.emplace_back(p.name, w);
  }
}

ad::NodeId BoundModel::weight(const std::string& name) const {
  for (const auto& [n, id] : weights_) {
    if (n == name) return id;
  }
  throw Error(Errc::kInvalidArgument, "no weight named " + name);
}

ad::NodeId BoundModel::logits(const std::vector<std::size_t>& ids) {
  const ToyConfig& c = model_.config();
  if (ids.empty()) throw Error(Errc::kInvalidArgument, "empty input sequence");
  if (ids.size() > c.context) {
    throw Error(Errc::kContextOverflow, std::to_string(ids.size()) + " positions exceed context " +
                                            std::to_string(c.context));
  }
  std::vector<std::size_t> positions(ids.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i;
  ad::NodeId h = g_.add(g_.gather_rows(weight("tok_emb"), ids), g_.gather_rows(weight("pos_emb"), positions));
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(c.d_model));
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const ad::NodeId q = g_.matmul(h, weight(block_name(l, "wq")));
    const ad::NodeId k = g_.matmul(h, weight(block_name(l, "wk")));
    const ad::NodeId v = g_.matmul(h, weight(block_name(l, "wv")));
    const ad::NodeId p = g_.causal_softmax(g_.scale(g_.matmul_bt(q, k), inv_sqrt_d));
    h = g_.add(h, g_.matmul(g_.matmul(p, v), weight(block_name(l, "wo"))));
    const ad::NodeId hidden = g_.gelu(g_.add_row(g_.matmul(h, weight(block_name(l, "w1"))), weight(block_name(l, "b1"))));
    h = g_.add(h, g_.add_row(g_.matmul(hidden, weight(block_name(l, "w2"))), weight(block_name(l, "b2"))));
  }
  return g_.add_row(g_.matmul(h, weight("out_w")), weight("out_b"));
}

ad::NodeId BoundModel::sequence_logprob(const std::vector<std::size_t>& x, const std::vector<std::size_t>& y) {
  const std::size_t total = x.size() + y.size();
  if (total > model_.config().context) {
    throw Error(Errc::kContextOverflow, "|x| + |y| = " + std::to_string(total) + " exceeds context " +
                                            std::to_string(model_.config().context));
  }
  if (y.empty()) return g_.constant(Tensor(1, 1));
  // Input is <bos> x y minus the last token; position |x| + t predicts y_t.
  std::vector<std::size_t> input{0};
  input.insert(input.end(), x.begin(), x.end());
  input.insert(input.end(), y.begin(), y.end() - 1);
  std::vector<std::size_t> rows(y.size());
  for (std::size_t t = 0; t < y.size(); ++t) rows[t] = x.size() + t;
  return g_.pick_logprob_sum(logits(input), rows, y);
}

double sequence_logprob(ToyLM& model, AdapterSet* adapters, const std::vector<std::size_t>& x,
                        const std::vector<std::size_t>& y) {
  ad::Graph g;
  BoundModel bound(g, model, adapters);
  return g.scalar(bound.sequence_logprob(x, y));
}

double sequence_logprob(ToyLM& model, AdapterSet* adapters, std::string_view x, std::string_view y) {
  return sequence_logprob(model, adapters, model.tokenizer().encode(x), model.tokenizer().encode(y));
}

Tensor forward_logits(ToyLM& model, AdapterSet* adapters, const std::vector<std::size_t>& ids) {
  ad::Graph g;
  BoundModel bound(g, model, adapters);
  return g.value(bound.logits(ids));
}

}  // namespace fairalign
