#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <json.hpp>

#include "fairalign/autodiff.hpp"

namespace fairalign {

struct LoraConfig {
  std::size_t rank = 4;
  double scale = 1.0;
  // Matrix names within each block that receive an adapter.
  std::vector<std::string> targets{"wq", "wk", "wv", "wo"};

  nlohmann::json to_json() const;
  static LoraConfig from_json(const nlohmann::json& j);
};

/// Low-rank update for one d x k base matrix: delta = scale * A * B with
/// A d x r and B r x k.
struct LoraAdapter {
  std::string target;  // full parameter name, e.g. "block0.wq"
  Param a;
  Param b;
  std::size_t rank = 0;
  double scale = 1.0;

  Tensor delta() const;
  std::size_t parameter_count() const { return a.value.size() + b.value.size(); }
};

/// W + scale * (A * B); W itself is untouched. Throws ShapeMismatch.
Tensor lora_apply(const Tensor& w, const LoraAdapter& adapter);

/// r (d + k), the trainable parameters of a rank-r adapter on a d x k matrix.
constexpr std::size_t lora_parameter_count(std::size_t d, std::size_t k, std::size_t r) { return r * (d + k); }

struct AdapterSet {
  LoraConfig config;
  std::vector<LoraAdapter> adapters;

  const LoraAdapter* find(const std::string& target) const;
  std::vector<Param*> trainable();
  std::size_t parameter_count() const;

  nlohmann::json to_json() const;
  static AdapterSet from_json(const nlohmann::json& j);
};

}  // namespace fairalign
