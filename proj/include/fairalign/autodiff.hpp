#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

namespace fairalign {

/// Row-major dense matrix of doubles.
struct Tensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::size_t size() const { return data.size(); }
  bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }

  bool operator==(const Tensor&) const = default;
};

Tensor matmul(const Tensor& a, const Tensor& b);

/// A named tensor with an accumulated gradient.
struct Param {
  std::string name;
  Tensor value;
  Tensor grad;

  void zero_grad() { grad = Tensor(value.rows, value.cols); }
};

namespace ad {

using NodeId = std::size_t;

/// Reverse-mode autodiff tape. Operations append nodes; backward() walks them
/// in reverse and then adds leaf gradients into the bound Params.
class Graph {
 public:
  /// Leaf without gradient tracking.
  NodeId constant(Tensor value);
  /// Leaf whose gradient is added to `p.grad` by backward().
  NodeId param(Param& p);

  NodeId matmul(NodeId a, NodeId b);
  /// a * b^T
  NodeId matmul_bt(NodeId a, NodeId b);
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  /// Adds a 1 x m row to every row.
  NodeId add_row(NodeId a, NodeId row);
  NodeId scale(NodeId a, double s);
  NodeId add_scalar(NodeId a, double c);
  NodeId gelu(NodeId a);
  NodeId softplus(NodeId a);
  /// Row-wise softmax over columns j <= i; masked entries are exactly 0.
  NodeId causal_softmax(NodeId a);
  NodeId gather_rows(NodeId table, const std::vector<std::size_t>& ids);
  /// 1 x 1 sum over rows[i] of log_softmax(logits[rows[i]])[targets[i]].
  NodeId pick_logprob_sum(NodeId logits, const std::vector<std::size_t>& rows,
                          const std::vector<std::size_t>& targets);
  /// 1 x 1 mean of 1 x 1 nodes.
  NodeId mean(const std::vector<NodeId>& scalars);

  const Tensor& value(NodeId id) const { return nodes_[id].value; }
  const Tensor& grad(NodeId id) const { return nodes_[id].grad; }
  double scalar(NodeId id) const { return nodes_[id].value.data.at(0); }
  std::size_t size() const { return nodes_.size(); }

  /// Seeds d(out)/d(out) = 1 for a 1 x 1 output.
  void backward(NodeId out);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::function<void(Graph&, NodeId)> backward;
    Param* param = nullptr;
    bool requires_grad = false;
  };

  NodeId push(Tensor value, bool requires_grad, std::function<void(Graph&, NodeId)> backward);
  bool requires_grad(NodeId id) const { return nodes_[id].requires_grad; }
  Tensor& g(NodeId id) { return nodes_[id].grad; }
  const Tensor& v(NodeId id) const { return nodes_[id].value; }

  std::vector<Node> nodes_;
};

}  // namespace ad
}  // namespace fairalign
