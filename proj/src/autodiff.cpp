#include "agm/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

namespace agm::ad {

namespace {

thread_local bool g_grad_enabled = true;

using BackwardFn = std::function<std::vector<Var>(const Var&, const Var&,
                                                  const std::vector<char>&)>;

Var make_leaf(Matrix value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  return Var(std::move(node));
}

// Records the op only when grad mode is on and some input needs a gradient;
// otherwise the result is a constant.
Var make_op(Matrix value, std::vector<Var> inputs, BackwardFn backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    const bool any = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Var& v) { return v.requires_grad(); });
    if (any) {
      node->requires_grad = true;
      node->parents.reserve(inputs.size());
      for (const auto& v : inputs) node->parents.push_back(v.node());
      node->backward = std::move(backward);
    }
  }
  return Var(std::move(node));
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                std::to_string(a.rows()) + "x" +
                                std::to_string(a.cols()) + " vs " +
                                std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()));
  }
}

}  // namespace

double Var::scalar() const {
  if (rows() != 1 || cols() != 1) {
    throw std::logic_error("Var::scalar on non-scalar value");
  }
  return node_->value(0, 0);
}

void Var::zero_grad() {
  if (node_) node_->grad.resize(0, 0);
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) {
  g_grad_enabled = false;
}
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

EnableGradGuard::EnableGradGuard() : previous_(g_grad_enabled) {
  g_grad_enabled = true;
}
EnableGradGuard::~EnableGradGuard() { g_grad_enabled = previous_; }

Var constant(Matrix value) { return make_leaf(std::move(value), false); }

Var scalar_constant(double v) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return constant(std::move(m));
}

Var parameter(Matrix value) { return make_leaf(std::move(value), true); }

Var detach(const Var& x) { return constant(x.value()); }

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  return make_op(a.value() + b.value(), {a, b},
                 [](const Var&, const Var& g, const std::vector<char>&) { return std::vector<Var>{g, g}; });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  return make_op(a.value() - b.value(), {a, b}, [](const Var&, const Var& g, const std::vector<char>&) {
    return std::vector<Var>{g, scale(g, -1.0)};
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  return make_op(a.value().cwiseProduct(b.value()), {a, b},
                 [a, b](const Var&, const Var& g, const std::vector<char>& needs) {
                   return std::vector<Var>{needs[0] ? mul(g, b) : Var(),
                                           needs[1] ? mul(g, a) : Var()};
                 });
}

Var scale(const Var& x, double s) {
  return make_op(x.value() * s, {x}, [s](const Var&, const Var& g, const std::vector<char>&) {
    return std::vector<Var>{scale(g, s)};
  });
}

Var add_scalar(const Var& x, double s) {
  return make_op((x.value().array() + s).matrix(), {x},
                 [](const Var&, const Var& g, const std::vector<char>&) { return std::vector<Var>{g}; });
}

Var pow_scalar(const Var& x, double p) {
  Matrix v = x.value().array().pow(p).matrix();
  return make_op(std::move(v), {x}, [x, p](const Var&, const Var& g, const std::vector<char>&) {
    if (p == 1.0) return std::vector<Var>{g};
    if (p == 2.0) return std::vector<Var>{scale(mul(g, x), 2.0)};
    return std::vector<Var>{mul(g, scale(pow_scalar(x, p - 1.0), p))};
  });
}

Var exp(const Var& x) {
  return make_op(x.value().array().exp().matrix(), {x},
                 [](const Var& out, const Var& g, const std::vector<char>&) {
                   return std::vector<Var>{mul(g, out)};
                 });
}

Var log(const Var& x) {
  return make_op(x.value().array().log().matrix(), {x},
                 [x](const Var&, const Var& g, const std::vector<char>&) {
                   return std::vector<Var>{mul(g, pow_scalar(x, -1.0))};
                 });
}

Var tanh(const Var& x) {
  return make_op(x.value().array().tanh().matrix(), {x},
                 [](const Var& out, const Var& g, const std::vector<char>&) {
                   return std::vector<Var>{
                       mul(g, add_scalar(scale(square(out), -1.0), 1.0))};
                 });
}

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: inner dimension mismatch " +
                                std::to_string(a.cols()) + " vs " +
                                std::to_string(b.rows()));
  }
  Matrix v = a.value() * b.value();
  return make_op(std::move(v), {a, b},
                 [a, b](const Var&, const Var& g, const std::vector<char>& needs) {
    return std::vector<Var>{needs[0] ? matmul(g, transpose(b)) : Var(),
                            needs[1] ? matmul(transpose(a), g) : Var()};
  });
}

Var transpose(const Var& x) {
  return make_op(x.value().transpose(), {x}, [](const Var&, const Var& g, const std::vector<char>&) {
    return std::vector<Var>{transpose(g)};
  });
}

Var sum(const Var& x) {
  Matrix v(1, 1);
  v(0, 0) = x.value().sum();
  const auto r = x.rows();
  const auto c = x.cols();
  return make_op(std::move(v), {x}, [r, c](const Var&, const Var& g, const std::vector<char>&) {
    return std::vector<Var>{fill(g, r, c)};
  });
}

Var row_sum(const Var& x) {
  const auto c = x.cols();
  return make_op(x.value().rowwise().sum(), {x},
                 [c](const Var&, const Var& g, const std::vector<char>&) {
                   return std::vector<Var>{broadcast_cols(g, c)};
                 });
}

Var col_sum(const Var& x) {
  const auto r = x.rows();
  return make_op(x.value().colwise().sum(), {x},
                 [r](const Var&, const Var& g, const std::vector<char>&) {
                   return std::vector<Var>{broadcast_rows(g, r)};
                 });
}

Var broadcast_rows(const Var& x, Eigen::Index rows) {
  if (x.rows() != 1) throw std::invalid_argument("broadcast_rows: need 1 x c");
  return make_op(x.value().replicate(rows, 1), {x},
                 [](const Var&, const Var& g, const std::vector<char>&) {
                   return std::vector<Var>{col_sum(g)};
                 });
}

Var broadcast_cols(const Var& x, Eigen::Index cols) {
  if (x.cols() != 1) throw std::invalid_argument("broadcast_cols: need r x 1");
  return make_op(x.value().replicate(1, cols), {x},
                 [](const Var&, const Var& g, const std::vector<char>&) {
                   return std::vector<Var>{row_sum(g)};
                 });
}

Var fill(const Var& x, Eigen::Index rows, Eigen::Index cols) {
  if (x.rows() != 1 || x.cols() != 1) {
    throw std::invalid_argument("fill: need 1 x 1");
  }
  return make_op(Matrix::Constant(rows, cols, x.value()(0, 0)), {x},
                 [](const Var&, const Var& g, const std::vector<char>&) {
                   return std::vector<Var>{sum(g)};
                 });
}

Var slice_rows(const Var& x, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > x.rows()) {
    throw std::out_of_range("slice_rows: range outside matrix");
  }
  const auto total = x.rows();
  return make_op(x.value().middleRows(start, count), {x},
                 [start, total](const Var&, const Var& g, const std::vector<char>&) {
                   return std::vector<Var>{pad_rows(g, start, total)};
                 });
}

Var pad_rows(const Var& x, Eigen::Index start, Eigen::Index total) {
  const auto count = x.rows();
  if (start < 0 || start + count > total) {
    throw std::out_of_range("pad_rows: range outside target");
  }
  Matrix v = Matrix::Zero(total, x.cols());
  v.middleRows(start, count) = x.value();
  return make_op(std::move(v), {x}, [start, count](const Var&, const Var& g, const std::vector<char>&) {
    return std::vector<Var>{slice_rows(g, start, count)};
  });
}

Var slice_cols(const Var& x, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > x.cols()) {
    throw std::out_of_range("slice_cols: range outside matrix");
  }
  const auto total = x.cols();
  return make_op(x.value().middleCols(start, count), {x},
                 [start, total](const Var&, const Var& g, const std::vector<char>&) {
                   return std::vector<Var>{pad_cols(g, start, total)};
                 });
}

Var pad_cols(const Var& x, Eigen::Index start, Eigen::Index total) {
  const auto count = x.cols();
  if (start < 0 || start + count > total) {
    throw std::out_of_range("pad_cols: range outside target");
  }
  Matrix v = Matrix::Zero(x.rows(), total);
  v.middleCols(start, count) = x.value();
  return make_op(std::move(v), {x}, [start, count](const Var&, const Var& g, const std::vector<char>&) {
    return std::vector<Var>{slice_cols(g, start, count)};
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const auto rows = parts[0].rows();
  Eigen::Index total = 0;
  std::vector<Eigen::Index> offsets;
  std::vector<Eigen::Index> widths;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    offsets.push_back(total);
    widths.push_back(p.cols());
    total += p.cols();
  }
  Matrix v(rows, total);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    v.middleCols(offsets[i], widths[i]) = parts[i].value();
  }
  return make_op(std::move(v), std::vector<Var>(parts.begin(), parts.end()),
                 [offsets, widths](const Var&, const Var& g,
                                   const std::vector<char>& needs) {
                   std::vector<Var> out(offsets.size());
                   for (std::size_t i = 0; i < offsets.size(); ++i) {
                     if (needs[i]) out[i] = slice_cols(g, offsets[i], widths[i]);
                   }
                   return out;
                 });
}

Var gather_rows(const Var& table, std::span<const int> ids) {
  std::vector<int> idx(ids.begin(), ids.end());
  Matrix v(static_cast<Eigen::Index>(idx.size()), table.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= table.rows()) {
      throw std::out_of_range("gather_rows: id " + std::to_string(idx[i]) +
                              " outside table of " +
                              std::to_string(table.rows()) + " rows");
    }
    v.row(static_cast<Eigen::Index>(i)) = table.value().row(idx[i]);
  }
  const auto total = table.rows();
  return make_op(std::move(v), {table},
                 [idx = std::move(idx), total](const Var&, const Var& g, const std::vector<char>&) {
                   return std::vector<Var>{scatter_rows(g, idx, total)};
                 });
}

Var scatter_rows(const Var& x, std::span<const int> ids, Eigen::Index total) {
  std::vector<int> idx(ids.begin(), ids.end());
  if (static_cast<Eigen::Index>(idx.size()) != x.rows()) {
    throw std::invalid_argument("scatter_rows: id count != rows");
  }
  Matrix v = Matrix::Zero(total, x.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    v.row(idx[i]) += x.value().row(static_cast<Eigen::Index>(i));
  }
  return make_op(std::move(v), {x},
                 [idx = std::move(idx)](const Var&, const Var& g, const std::vector<char>&) {
                   return std::vector<Var>{gather_rows(g, idx)};
                 });
}

Var gradient_reversal(const Var& x, double lambda) {
  return make_op(x.value(), {x}, [lambda](const Var&, const Var& g, const std::vector<char>&) {
    return std::vector<Var>{scale(g, -lambda)};
  });
}

Var add_row_vector(const Var& x, const Var& row) {
  return add(x, broadcast_rows(row, x.rows()));
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  return add_row_vector(matmul(x, weight), bias);
}

Var square(const Var& x) { return pow_scalar(x, 2.0); }

Var mean(const Var& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.rows() * x.cols()));
}

Var softmax_rows(const Var& x) {
  // The row max is a constant shift; softmax is invariant to it.
  Matrix shift = x.value().rowwise().maxCoeff().replicate(1, x.cols());
  Var e = exp(sub(x, constant(std::move(shift))));
  Var inv = pow_scalar(row_sum(e), -1.0);
  return mul(e, broadcast_cols(inv, x.cols()));
}

Var log_softmax_rows(const Var& x) {
  Matrix shift = x.value().rowwise().maxCoeff().replicate(1, x.cols());
  Var z = sub(x, constant(std::move(shift)));
  Var lse = log(row_sum(exp(z)));
  return sub(z, broadcast_cols(lse, x.cols()));
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const auto c = x.cols();
  const double inv_c = 1.0 / static_cast<double>(c);
  Var mu = scale(row_sum(x), inv_c);
  Var centered = sub(x, broadcast_cols(mu, c));
  Var var = scale(row_sum(square(centered)), inv_c);
  Var inv_std = pow_scalar(add_scalar(var, eps), -0.5);
  Var normed = mul(centered, broadcast_cols(inv_std, c));
  return add_row_vector(mul(normed, broadcast_rows(gamma, x.rows())), beta);
}

Var gelu(const Var& x) {
  const double k = std::sqrt(2.0 / std::numbers::pi);
  Var inner = scale(add(x, scale(pow_scalar(x, 3.0), 0.044715)), k);
  return mul(scale(x, 0.5), add_scalar(tanh(inner), 1.0));
}

Var cross_entropy(const Var& logits, std::span<const int> labels) {
  if (static_cast<Eigen::Index>(labels.size()) != logits.rows()) {
    throw std::invalid_argument("cross_entropy: label count != rows");
  }
  Matrix onehot = Matrix::Zero(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= logits.cols()) {
      throw std::out_of_range("cross_entropy: label outside class range");
    }
    onehot(static_cast<Eigen::Index>(i), labels[i]) = 1.0;
  }
  Var picked = sum(mul(log_softmax_rows(logits), constant(std::move(onehot))));
  return scale(picked, -1.0 / static_cast<double>(labels.size()));
}

namespace {

// Post-order over nodes that require grad and lie on a path from `root` to a
// node accepted by `is_target`. Iterative to keep deep double-backward graphs
// off the call stack.
std::vector<Node*> relevant_topo_order(
    Node* root, const std::function<bool(Node*)>& is_target,
    std::unordered_set<Node*>& relevant) {
  std::vector<Node*> order;
  std::unordered_map<Node*, bool> visited;  // value: fully processed
  struct Frame {
    Node* node;
    std::size_t next_parent;
  };
  std::vector<Frame> stack;
  if (!root->requires_grad) return order;
  stack.push_back({root, 0});
  visited[root] = false;
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      Node* p = f.node->parents[f.next_parent++].get();
      if (!p->requires_grad || visited.count(p)) continue;
      visited[p] = false;
      stack.push_back({p, 0});
      continue;
    }
    Node* n = f.node;
    stack.pop_back();
    visited[n] = true;
    bool rel = is_target(n);
    for (const auto& p : n->parents) {
      if (relevant.count(p.get())) rel = true;
    }
    if (rel) {
      relevant.insert(n);
      order.push_back(n);
    }
  }
  return order;
}

void accumulate(std::unordered_map<Node*, Var>& grads, Node* n, const Var& g) {
  auto it = grads.find(n);
  if (it == grads.end()) {
    grads.emplace(n, g);
  } else {
    it->second = add(it->second, g);
  }
}

// Propagates from `root` through the relevant subgraph; returns the gradient
// map keyed by node.
std::unordered_map<Node*, Var> propagate(
    const Var& root, const Var& seed,
    const std::function<bool(Node*)>& is_target) {
  std::unordered_set<Node*> relevant;
  auto order = relevant_topo_order(root.node().get(), is_target, relevant);
  std::unordered_map<Node*, Var> grads;
  if (order.empty()) return grads;
  grads.emplace(root.node().get(), seed);
  // Children come after parents in post-order; walk it backwards.
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->backward) continue;
    auto g_it = grads.find(n);
    if (g_it == grads.end()) continue;
    Var out(n->shared_from_this());
    Var g = g_it->second;
    std::vector<char> needs(n->parents.size());
    for (std::size_t i = 0; i < needs.size(); ++i) {
      needs[i] = relevant.count(n->parents[i].get()) ? 1 : 0;
    }
    auto parent_grads = n->backward(out, g, needs);
    for (std::size_t i = 0; i < n->parents.size(); ++i) {
      Node* p = n->parents[i].get();
      if (!relevant.count(p) || i >= parent_grads.size() ||
          !parent_grads[i].defined()) {
        continue;
      }
      accumulate(grads, p, parent_grads[i]);
    }
  }
  return grads;
}

}  // namespace

std::vector<Var> grad(const Var& output, std::span<const Var> inputs,
                      bool create_graph, Var grad_output) {
  if (!grad_output.defined()) {
    grad_output = constant(Matrix::Ones(output.rows(), output.cols()));
  }
  std::unordered_set<Node*> targets;
  for (const auto& v : inputs) targets.insert(v.node().get());

  std::unordered_map<Node*, Var> grads;
  if (create_graph) {
    EnableGradGuard guard;
    grads = propagate(output, grad_output,
                      [&](Node* n) { return targets.count(n) > 0; });
  } else {
    NoGradGuard guard;
    grads = propagate(output, grad_output,
                      [&](Node* n) { return targets.count(n) > 0; });
  }
  std::vector<Var> result;
  result.reserve(inputs.size());
  for (const auto& v : inputs) {
    auto it = grads.find(v.node().get());
    if (it == grads.end()) {
      result.push_back(constant(Matrix::Zero(v.rows(), v.cols())));
    } else {
      result.push_back(it->second);
    }
  }
  return result;
}

void backward(const Var& output) {
  NoGradGuard guard;
  Var seed = constant(Matrix::Ones(output.rows(), output.cols()));
  auto grads = propagate(output, seed,
                         [](Node* n) { return !n->backward && n->requires_grad; });
  for (auto& [node, g] : grads) {
    if (node->backward || !node->requires_grad) continue;
    if (node->grad.size() == 0) {
      node->grad = g.value();
    } else {
      node->grad += g.value();
    }
  }
}

}  // namespace agm::ad
