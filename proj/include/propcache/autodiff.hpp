#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "propcache/tensor.hpp"

namespace propcache::ad {

struct Node {
  Tensor value;
  Tensor grad;  // empty until first touched by backward
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into parents' grads.
  std::function<void(Node&)> backward_fn;

  Tensor& grad_buffer();
};

// Handle onto a node of the reverse-mode tape. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  // Zeros when backward has not reached this node.
  Tensor grad() const;
  bool requires_grad() const { return node_->requires_grad; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }

  // Leaf-only mutation, used by optimizers between graph builds.
  Tensor& mutable_value();
  void zero_grad();

  const std::shared_ptr<Node>& node() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node> node_;
};

Var parameter(Tensor value);
Var constant(Tensor value);

Var matmul(const Var& a, const Var& b);
Var matmul_nt(const Var& a, const Var& b);  // a · bᵀ
Var transpose(const Var& a);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);  // elementwise
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var mul_scalar(const Var& s, const Var& x);  // s is 1×1
Var add_row(const Var& x, const Var& row);   // broadcast a 1×n row over x
Var exp(const Var& a);
Var gelu(const Var& a);
Var softmax_rows(const Var& x);
Var log_softmax_rows(const Var& x);
Var layer_norm_rows(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);
Var l2_normalize_rows(const Var& x, double min_norm = 1e-8);
Var sum(const Var& a);  // 1×1
Var slice_rows(const Var& x, std::size_t begin, std::size_t count);
Var slice_cols(const Var& x, std::size_t begin, std::size_t count);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }

// Reverse sweep from a scalar. Leaf gradients accumulate across calls;
// interior gradients are recomputed each time.
void backward(const Var& loss);

}  // namespace propcache::ad
