// Reverse-mode automatic differentiation over dense double matrices.
//
// Every backward rule is written in terms of the same differentiable ops, so
// a gradient computed with `create_graph = true` is itself a graph node and can
// be differentiated again. This is what the attribution masking loss needs:
// the per-token attribution is a gradient, and the loss on it is trained.

#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace agm::ad {

using Matrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class Var;

struct Node : std::enable_shared_from_this<Node> {
  Matrix value;
  std::vector<std::shared_ptr<Node>> parents;
  // Maps (output, d output, which parents need a gradient) to one gradient
  // per parent. Null entries mean "no contribution".
  std::function<std::vector<Var>(const Var& out, const Var& grad,
                                 const std::vector<char>& needs)>
      backward;
  bool requires_grad = false;
  // Accumulated by `backward()` on leaves only.
  Matrix grad;
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  bool defined() const { return node_ != nullptr; }
  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  double scalar() const;
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool is_leaf() const { return node_ && !node_->backward; }

  const Matrix& grad() const { return node_->grad; }
  Matrix& mutable_grad() { return node_->grad; }
  void zero_grad();

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Graph recording is on by default; these guards flip it for the current
// thread within a scope.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class EnableGradGuard {
 public:
  EnableGradGuard();
  ~EnableGradGuard();
  EnableGradGuard(const EnableGradGuard&) = delete;
  EnableGradGuard& operator=(const EnableGradGuard&) = delete;

 private:
  bool previous_;
};

// Leaves.
Var constant(Matrix value);
Var scalar_constant(double v);
Var parameter(Matrix value);
Var detach(const Var& x);

// Elementwise, equal shapes.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, double s);
Var add_scalar(const Var& x, double s);
Var pow_scalar(const Var& x, double p);
Var exp(const Var& x);
Var log(const Var& x);
Var tanh(const Var& x);

// Linear algebra and shape.
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& x);
Var sum(const Var& x);                      // r x c -> 1 x 1
Var row_sum(const Var& x);                  // r x c -> r x 1
Var col_sum(const Var& x);                  // r x c -> 1 x c
Var broadcast_rows(const Var& x, Eigen::Index rows);  // 1 x c -> rows x c
Var broadcast_cols(const Var& x, Eigen::Index cols);  // r x 1 -> r x cols
Var fill(const Var& x, Eigen::Index rows, Eigen::Index cols);  // 1 x 1
Var slice_rows(const Var& x, Eigen::Index start, Eigen::Index count);
Var pad_rows(const Var& x, Eigen::Index start, Eigen::Index total);
Var slice_cols(const Var& x, Eigen::Index start, Eigen::Index count);
Var pad_cols(const Var& x, Eigen::Index start, Eigen::Index total);
Var concat_cols(std::span<const Var> parts);
Var gather_rows(const Var& table, std::span<const int> ids);
Var scatter_rows(const Var& x, std::span<const int> ids, Eigen::Index total);

// Identity forward, gradient multiplied by -lambda on the way back.
Var gradient_reversal(const Var& x, double lambda);

// Composites built from the primitives above.
Var add_row_vector(const Var& x, const Var& row);  // x + broadcast(row)
Var linear(const Var& x, const Var& weight, const Var& bias);  // x W + b
Var square(const Var& x);
Var mean(const Var& x);
Var softmax_rows(const Var& x);
Var log_softmax_rows(const Var& x);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps);
Var gelu(const Var& x);
// Mean negative log-likelihood of `labels[i]` under row i of `logits`.
Var cross_entropy(const Var& logits, std::span<const int> labels);

// Gradients of `output` (any shape; seeded with `grad_output`, or ones) with
// respect to `inputs`. Unreached inputs get a zero matrix of their shape. With
// `create_graph` the returned gradients are differentiable.
std::vector<Var> grad(const Var& output, std::span<const Var> inputs,
                      bool create_graph = false, Var grad_output = Var());

// Accumulates d output / d leaf into `grad` of every requires-grad leaf.
void backward(const Var& output);

}  // namespace agm::ad
