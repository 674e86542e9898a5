#include "fairalign/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "fairalign/error.hpp"

namespace fairalign {

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw Error(Errc::kShapeMismatch, what);
}

std::string shape(const Tensor& t) { return std::to_string(t.rows) + "x" + std::to_string(t.cols); }

// c += a * b
void matmul_acc(const Tensor& a, const Tensor& b, Tensor& c) {
  for (std::size_t i = 0; i < a.rows; ++i) {
    double* crow = &c.data[i * c.cols];
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double aik = a.data[i * a.cols + k];
      if (aik == 0.0) continue;
      const double* brow = &b.data[k * b.cols];
      for (std::size_t j = 0; j < b.cols; ++j) crow[j] += aik * brow[j];
    }
  }
}

// c += a * b^T
void matmul_bt_acc(const Tensor& a, const Tensor& b, Tensor& c) {
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* arow = &a.data[i * a.cols];
    for (std::size_t j = 0; j < b.rows; ++j) {
      const double* brow = &b.data[j * b.cols];
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols; ++k) s += arow[k] * brow[k];
      c.data[i * c.cols + j] += s;
    }
  }
}

// c += a^T * b
void matmul_at_acc(const Tensor& a, const Tensor& b, Tensor& c) {
  for (std::size_t k = 0; k < a.rows; ++k) {
    const double* arow = &a.data[k * a.cols];
    const double* brow = &b.data[k * b.cols];
    for (std::size_t i = 0; i < a.cols; ++i) {
      const double aki = arow[i];
      if (aki == 0.0) continue;
      double* crow = &c.data[i * c.cols];
      for (std::size_t j = 0; j < b.cols; ++j) crow[j] += aki * brow[j];
    }
  }
}

constexpr double kGeluK = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluC = 0.044715;

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.cols == b.rows, "matmul " + shape(a) + " by " + shape(b));
  Tensor c(a.rows, b.cols);
  matmul_acc(a, b, c);
  return c;
}

namespace ad {

NodeId Graph::push(Tensor value, bool requires_grad, std::function<void(Graph&, NodeId)> backward) {
  Node n;
  if (requires_grad) n.grad = Tensor(value.rows, value.cols);
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return nodes_.size() - 1;
}

NodeId Graph::constant(Tensor value) { return push(std::move(value), false, nullptr); }

NodeId Graph::param(Param& p) {
  const NodeId id = push(p.value, true, nullptr);
  nodes_[id].param = &p;
  return id;
}

NodeId Graph::matmul(NodeId a, NodeId b) {
  require(v(a).cols == v(b).rows, "matmul " + shape(v(a)) + " by " + shape(v(b)));
  Tensor out(v(a).rows, v(b).cols);
  matmul_acc(v(a), v(b), out);
  const bool rg = requires_grad(a) || requires_grad(b);
  return push(std::move(out), rg, [a, b](Graph& G, NodeId self) {
    const Tensor& d = G.g(self);
    if (G.requires_grad(a)) matmul_bt_acc(d, G.v(b), G.g(a));
    if (G.requires_grad(b)) matmul_at_acc(G.v(a), d, G.g(b));
  });
}

NodeId Graph::matmul_bt(NodeId a, NodeId b) {
  require(v(a).cols == v(b).cols, "matmul_bt " + shape(v(a)) + " by " + shape(v(b)));
  Tensor out(v(a).rows, v(b).rows);
  matmul_bt_acc(v(a), v(b), out);
  const bool rg = requires_grad(a) || requires_grad(b);
  return push(std::move(out), rg, [a, b](Graph& G, NodeId self) {
    const Tensor& d = G.g(self);
    if (G.requires_grad(a)) matmul_acc(d, G.v(b), G.g(a));
    if (G.requires_grad(b)) matmul_at_acc(d, G.v(a), G.g(b));
  });
}

NodeId Graph::add(NodeId a, NodeId b) {
  require(v(a).same_shape(v(b)), "add " + shape(v(a)) + " and " + shape(v(b)));
  Tensor out = v(a);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += v(b).data[i];
  return push(std::move(out), requires_grad(a) || requires_grad(b), [a, b](Graph& G, NodeId self) {
    const Tensor& d = G.g(self);
    for (NodeId in : {a, b}) {
      if (!G.requires_grad(in)) continue;
      Tensor& gi = G.g(in);
      for (std::size_t i = 0; i < d.size(); ++i) gi.data[i] += d.data[i];
    }
  });
}

NodeId Graph::sub(NodeId a, NodeId b) { return add(a, scale(b, -1.0)); }

NodeId Graph::add_row(NodeId a, NodeId row) {
  require(v(row).rows == 1 && v(row).cols == v(a).cols, "add_row " + shape(v(a)) + " and " + shape(v(row)));
  Tensor out = v(a);
  for (std::size_t i = 0; i < out.rows; ++i) {
    for (std::size_t j = 0; j < out.cols; ++j) out(i, j) += v(row).data[j];
  }
  return push(std::move(out), requires_grad(a) || requires_grad(row), [a, row](Graph& G, NodeId self) {
    const Tensor& d = G.g(self);
    if (G.requires_grad(a)) {
      for (std::size_t i = 0; i < d.size(); ++i) G.g(a).data[i] += d.data[i];
    }
    if (G.requires_grad(row)) {
      Tensor& gr = G.g(row);
      for (std::size_t i = 0; i < d.rows; ++i) {
        for (std::size_t j = 0; j < d.cols; ++j) gr.data[j] += d(i, j);
      }
    }
  });
}

NodeId Graph::scale(NodeId a, double s) {
  Tensor out = v(a);
  for (auto& x : out.data) x *= s;
  return push(std::move(out), requires_grad(a), [a, s](Graph& G, NodeId self) {
    const Tensor& d = G.g(self);
    for (std::size_t i = 0; i < d.size(); ++i) G.g(a).data[i] += s * d.data[i];
  });
}

NodeId Graph::add_scalar(NodeId a, double c) {
  Tensor out = v(a);
  for (auto& x : out.data) x += c;
  return push(std::move(out), requires_grad(a), [a](Graph& G, NodeId self) {
    const Tensor& d = G.g(self);
    for (std::size_t i = 0; i < d.size(); ++i) G.g(a).data[i] += d.data[i];
  });
}

NodeId Graph::gelu(NodeId a) {
  Tensor out = v(a);
  for (auto& x : out.data) x = 0.5 * x * (1.0 + std::tanh(kGeluK * (x + kGeluC * x * x * x)));
  return push(std::move(out), requires_grad(a), [a](Graph& G, NodeId self) {
    const Tensor& d = G.g(self);
    const Tensor& x = G.v(a);
    Tensor& ga = G.g(a);
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double xi = x.data[i];
      const double t = std::tanh(kGeluK * (xi + kGeluC * xi * xi * xi));
      const double dt = (1.0 - t * t) * kGeluK * (1.0 + 3.0 * kGeluC * xi * xi);
      ga.data[i] += d.data[i] * (0.5 * (1.0 + t) + 0.5 * xi * dt);
    }
  });
}

NodeId Graph::softplus(NodeId a) {
  Tensor out = v(a);
  for (auto& x : out.data) x = std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0);
  return push(std::move(out), requires_grad(a), [a](Graph& G, NodeId self) {
    const Tensor& d = G.g(self);
    const Tensor& x = G.v(a);
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double xi = x.data[i];
      const double sig = xi >= 0 ? 1.0 / (1.0 + std::exp(-xi)) : std::exp(xi) / (1.0 + std::exp(xi));
      G.g(a).data[i] += d.data[i] * sig;
    }
  });
}

NodeId Graph::causal_softmax(NodeId a) {
  const Tensor& x = v(a);
  require(x.rows <= x.cols, "causal_softmax needs rows <= cols, got " + shape(x));
  Tensor out(x.rows, x.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    double m = x(i, 0);
    for (std::size_t j = 1; j <= i; ++j) m = std::max(m, x(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j <= i; ++j) s += (out(i, j) = std::exp(x(i, j) - m));
    for (std::size_t j = 0; j <= i; ++j) out(i, j) /= s;
  }
  return push(std::move(out), requires_grad(a), [a](Graph& G, NodeId self) {
    const Tensor& d = G.g(self);
    const Tensor& p = G.v(self);
    Tensor& ga = G.g(a);
    for (std::size_t i = 0; i < p.rows; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j <= i; ++j) dot += p(i, j) * d(i, j);
      for (std::size_t j = 0; j <= i; ++j) ga(i, j) += p(i, j) * (d(i, j) - dot);
    }
  });
}

NodeId Graph::gather_rows(NodeId table, const std::vector<std::size_t>& ids) {
  const Tensor& t = v(table);
  Tensor out(ids.size(), t.cols);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= t.rows) throw Error(Errc::kShapeMismatch, "row index " + std::to_string(ids[i]) + " out of range");
    std::copy_n(&t.data[ids[i] * t.cols], t.cols, &out.data[i * t.cols]);
  }
  return push(std::move(out), requires_grad(table), [table, ids](Graph& G, NodeId self) {
    const Tensor& d = G.g(self);
    Tensor& gt = G.g(table);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      for (std::size_t j = 0; j < d.cols; ++j) gt(ids[i], j) += d(i, j);
    }
  });
}

NodeId Graph::pick_logprob_sum(NodeId logits, const std::vector<std::size_t>& rows,
                               const std::vector<std::size_t>& targets) {
  require(rows.size() == targets.size(), "pick_logprob_sum rows/targets length");
  const Tensor& x = v(logits);
  Tensor out(1, 1);
  // Softmax of every picked row, kept for the backward pass.
  auto probs = std::make_shared<std::vector<std::vector<double>>>();
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const std::size_t r = rows[k];
    require(r < x.rows && targets[k] < x.cols, "pick_logprob_sum index out of range");
    double m = x(r, 0);
    for (std::size_t j = 1; j < x.cols; ++j) m = std::max(m, x(r, j));
    double s = 0.0;
    for (std::size_t j = 0; j < x.cols; ++j) s += std::exp(x(r, j) - m);
    const double lse = m + std::log(s);
    out.data[0] += x(r, targets[k]) - lse;
    std::vector<double> p(x.cols);
    for (std::size_t j = 0; j < x.cols; ++j) p[j] = std::exp(x(r, j) - lse);
    probs->push_back(std::move(p));
  }
  return push(std::move(out), requires_grad(logits), [logits, rows, targets, probs](Graph& G, NodeId self) {
    const double d = G.g(self).data[0];
    Tensor& gl = G.g(logits);
    for (std::size_t k = 0; k < rows.size(); ++k) {
      const auto& p = (*probs)[k];
      for (std::size_t j = 0; j < p.size(); ++j) gl(rows[k], j) -= d * p[j];
      gl(rows[k], targets[k]) += d;
    }
  });
}

NodeId Graph::mean(const std::vector<NodeId>& scalars) {
  if (scalars.empty()) throw Error(Errc::kEmptyBatch, "mean of no values");
  Tensor out(1, 1);
  bool rg = false;
  for (NodeId s : scalars) {
    out.data[0] += v(s).data.at(0);
    rg = rg || requires_grad(s);
  }
  const double n = static_cast<double>(scalars.size());
  out.data[0] /= n;
  return push(std::move(out), rg, [scalars, n](Graph& G, NodeId self) {
    const double d = G.g(self).data[0] / n;
    for (NodeId s : scalars) {
      if (G.requires_grad(s)) G.g(s).data[0] += d;
    }
  });
}

void Graph::backward(NodeId out) {
  require(v(out).size() == 1, "backward needs a scalar output, got " + shape(v(out)));
  if (!requires_grad(out)) return;
  g(out).data[0] = 1.0;
  for (std::size_t i = out + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.requires_grad && n.backward) n.backward(*this, i);
  }
  for (auto& n : nodes_) {
    if (n.param == nullptr) continue;
    Param& p = *n.param;
    if (!p.grad.same_shape(p.value)) p.zero_grad();
    for (std::size_t i = 0; i < p.grad.size(); ++i) p.grad.data[i] += n.grad.data[i];
  }
}

}  // namespace ad
}  // namespace fairalign
