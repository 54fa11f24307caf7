#include "propcache/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <unordered_set>

#include "propcache/errors.hpp"

namespace propcache::ad {

Tensor& Node::grad_buffer() {
  if (grad.shape() != value.shape()) grad = Tensor(value.shape(), 0.0);
  return grad;
}

Tensor Var::grad() const {
  if (node_->grad.shape() == node_->value.shape()) return node_->grad;
  return Tensor(node_->value.shape(), 0.0);
}

Tensor& Var::mutable_value() {
  if (!node_->is_leaf) throw ArgumentError("mutable_value on a non-leaf node");
  return node_->value;
}

void Var::zero_grad() { node_->grad = Tensor(); }

namespace {

using NodePtr = std::shared_ptr<Node>;

Var make_leaf(Tensor value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  n->is_leaf = true;
  return Var(std::move(n));
}

Var make_op(Tensor value, std::vector<NodePtr> parents, std::function<void(Node&)> fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->is_leaf = false;
  n->requires_grad = std::any_of(parents.begin(), parents.end(),
                                 [](const NodePtr& p) { return p->requires_grad; });
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backward_fn = std::move(fn);
  }
  return Var(std::move(n));
}

void accumulate(const NodePtr& p, const Tensor& g) {
  if (!p->requires_grad) return;
  auto& buf = p->grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeMismatch(std::string(op) + " " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
  }
}

template <typename F>
Tensor map(const Tensor& t, F f) {
  Tensor out = t;
  for (auto& v : out.data()) v = f(v);
  return out;
}

}  // namespace

Var parameter(Tensor value) { return make_leaf(std::move(value), true); }
Var constant(Tensor value) { return make_leaf(std::move(value), false); }

Var matmul(const Var& a, const Var& b) {
  return make_op(ops::matmul(a.value(), b.value()), {a.node(), b.node()}, [](Node& self) {
    const auto& A = self.parents[0];
    const auto& B = self.parents[1];
    if (A->requires_grad) accumulate(A, ops::matmul_nt(self.grad, B->value));
    if (B->requires_grad) accumulate(B, ops::matmul(ops::transpose(A->value), self.grad));
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  return make_op(ops::matmul_nt(a.value(), b.value()), {a.node(), b.node()}, [](Node& self) {
    const auto& A = self.parents[0];
    const auto& B = self.parents[1];
    if (A->requires_grad) accumulate(A, ops::matmul(self.grad, B->value));
    if (B->requires_grad) accumulate(B, ops::matmul(ops::transpose(self.grad), A->value));
  });
}

Var transpose(const Var& a) {
  return make_op(ops::transpose(a.value()), {a.node()}, [](Node& self) {
    accumulate(self.parents[0], ops::transpose(self.grad));
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor v = a.value();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] += b.value()[i];
  return make_op(std::move(v), {a.node(), b.node()}, [](Node& self) {
    accumulate(self.parents[0], self.grad);
    accumulate(self.parents[1], self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor v = a.value();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] -= b.value()[i];
  return make_op(std::move(v), {a.node(), b.node()}, [](Node& self) {
    accumulate(self.parents[0], self.grad);
    accumulate(self.parents[1], map(self.grad, [](double g) { return -g; }));
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor v = a.value();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] *= b.value()[i];
  return make_op(std::move(v), {a.node(), b.node()}, [](Node& self) {
    const auto& A = self.parents[0];
    const auto& B = self.parents[1];
    if (A->requires_grad) {
      Tensor g = self.grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= B->value[i];
      accumulate(A, g);
    }
    if (B->requires_grad) {
      Tensor g = self.grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= A->value[i];
      accumulate(B, g);
    }
  });
}

Var scale(const Var& a, double c) {
  return make_op(map(a.value(), [c](double v) { return v * c; }), {a.node()},
                 [c](Node& self) {
                   accumulate(self.parents[0], map(self.grad, [c](double g) { return g * c; }));
                 });
}

Var add_scalar(const Var& a, double c) {
  return make_op(map(a.value(), [c](double v) { return v + c; }), {a.node()},
                 [](Node& self) { accumulate(self.parents[0], self.grad); });
}

Var mul_scalar(const Var& s, const Var& x) {
  if (s.value().size() != 1) throw ShapeMismatch("mul_scalar expects a 1x1 scale");
  const double sv = s.value()[0];
  return make_op(map(x.value(), [sv](double v) { return v * sv; }), {s.node(), x.node()},
                 [](Node& self) {
                   const auto& S = self.parents[0];
                   const auto& X = self.parents[1];
                   if (S->requires_grad) {
                     double acc = 0.0;
                     for (std::size_t i = 0; i < self.grad.size(); ++i)
                       acc += self.grad[i] * X->value[i];
                     accumulate(S, Tensor(S->value.shape(), std::vector<double>{acc}));
                   }
                   if (X->requires_grad) {
                     const double k = S->value[0];
                     accumulate(X, map(self.grad, [k](double g) { return g * k; }));
                   }
                 });
}

Var add_row(const Var& x, const Var& row) {
  const std::size_t r = x.rows(), c = x.cols();
  if (row.value().size() != c) throw ShapeMismatch("add_row width mismatch");
  Tensor v = x.value();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) v(i, j) += row.value()[j];
  return make_op(std::move(v), {x.node(), row.node()}, [r, c](Node& self) {
    accumulate(self.parents[0], self.grad);
    const auto& R = self.parents[1];
    if (R->requires_grad) {
      Tensor g(R->value.shape(), 0.0);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[j] += self.grad(i, j);
      accumulate(R, g);
    }
  });
}

Var exp(const Var& a) {
  return make_op(map(a.value(), [](double v) { return std::exp(v); }), {a.node()},
                 [](Node& self) {
                   Tensor g = self.grad;
                   for (std::size_t i = 0; i < g.size(); ++i) g[i] *= self.value[i];
                   accumulate(self.parents[0], g);
                 });
}

Var gelu(const Var& a) {
  constexpr double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
  auto f = [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); };
  return make_op(map(a.value(), f), {a.node()}, [](Node& self) {
    const auto& X = self.parents[0];
    Tensor g = self.grad;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = X->value[i];
      const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
      const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
      g[i] *= cdf + x * pdf;
    }
    accumulate(X, g);
  });
}

Var softmax_rows(const Var& x) {
  return make_op(ops::softmax_rows(x.value()), {x.node()}, [](Node& self) {
    const Tensor& y = self.value;
    Tensor g = self.grad;
    for (std::size_t r = 0; r < y.rows(); ++r) {
      const double inner = ops::dot(self.grad.row_span(r), y.row_span(r));
      auto gr = g.row_span(r);
      auto yr = y.row_span(r);
      for (std::size_t j = 0; j < gr.size(); ++j) gr[j] = yr[j] * (gr[j] - inner);
    }
    accumulate(self.parents[0], g);
  });
}

Var log_softmax_rows(const Var& x) {
  return make_op(ops::log_softmax_rows(x.value()), {x.node()}, [](Node& self) {
    const Tensor& y = self.value;
    Tensor g = self.grad;
    for (std::size_t r = 0; r < y.rows(); ++r) {
      auto gr = g.row_span(r);
      double total = 0.0;
      for (double v : gr) total += v;
      auto yr = y.row_span(r);
      for (std::size_t j = 0; j < gr.size(); ++j) gr[j] -= std::exp(yr[j]) * total;
    }
    accumulate(self.parents[0], g);
  });
}

Var layer_norm_rows(const Var& x, const Var& gain, const Var& bias, double eps) {
  const std::size_t r = x.rows(), d = x.cols();
  if (gain.value().size() != d || bias.value().size() != d)
    throw ShapeMismatch("layer_norm gain/bias width");
  // Cache normalized rows and inverse std for the backward pass.
  Tensor xhat = Tensor::matrix(r, d);
  std::vector<double> inv_std(r);
  Tensor out = Tensor::matrix(r, d);
  for (std::size_t i = 0; i < r; ++i) {
    auto row = x.value().row_span(i);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat(i, j) = (row[j] - mean) * inv_std[i];
      out(i, j) = xhat(i, j) * gain.value()[j] + bias.value()[j];
    }
  }
  return make_op(std::move(out), {x.node(), gain.node(), bias.node()},
                 [xhat = std::move(xhat), inv_std = std::move(inv_std), r, d](Node& self) {
                   const auto& X = self.parents[0];
                   const auto& G = self.parents[1];
                   const auto& B = self.parents[2];
                   const Tensor& gy = self.grad;
                   if (G->requires_grad || B->requires_grad) {
                     Tensor gg(G->value.shape(), 0.0), gb(B->value.shape(), 0.0);
                     for (std::size_t i = 0; i < r; ++i)
                       for (std::size_t j = 0; j < d; ++j) {
                         gg[j] += gy(i, j) * xhat(i, j);
                         gb[j] += gy(i, j);
                       }
                     accumulate(G, gg);
                     accumulate(B, gb);
                   }
                   if (X->requires_grad) {
                     Tensor gx = Tensor::matrix(r, d);
                     const double dd = static_cast<double>(d);
                     for (std::size_t i = 0; i < r; ++i) {
                       double s1 = 0.0, s2 = 0.0;
                       for (std::size_t j = 0; j < d; ++j) {
                         const double gh = gy(i, j) * G->value[j];
                         s1 += gh;
                         s2 += gh * xhat(i, j);
                       }
                       for (std::size_t j = 0; j < d; ++j) {
                         const double gh = gy(i, j) * G->value[j];
                         gx(i, j) = inv_std[i] * (gh - s1 / dd - xhat(i, j) * s2 / dd);
                       }
                     }
                     accumulate(X, gx);
                   }
                 });
}

Var l2_normalize_rows(const Var& x, double min_norm) {
  Tensor y = ops::l2_normalize_rows(x.value(), min_norm);
  std::vector<double> norms(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) norms[i] = ops::norm(x.value().row_span(i));
  return make_op(std::move(y), {x.node()}, [norms = std::move(norms)](Node& self) {
    const Tensor& y = self.value;
    Tensor g = self.grad;
    for (std::size_t i = 0; i < y.rows(); ++i) {
      const double inner = ops::dot(self.grad.row_span(i), y.row_span(i));
      auto gr = g.row_span(i);
      auto yr = y.row_span(i);
      for (std::size_t j = 0; j < gr.size(); ++j) gr[j] = (gr[j] - yr[j] * inner) / norms[i];
    }
    accumulate(self.parents[0], g);
  });
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return make_op(Tensor::scalar(s), {a.node()}, [](Node& self) {
    const auto& A = self.parents[0];
    accumulate(A, Tensor(A->value.shape(), self.grad[0]));
  });
}

Var slice_rows(const Var& x, std::size_t begin, std::size_t count) {
  const std::size_t c = x.cols();
  if (begin + count > x.rows()) throw ShapeMismatch("slice_rows out of range");
  std::vector<double> data(x.value().data().begin() + begin * c,
                           x.value().data().begin() + (begin + count) * c);
  return make_op(Tensor({count, c}, std::move(data)), {x.node()}, [begin, c](Node& self) {
    const auto& X = self.parents[0];
    Tensor g(X->value.shape(), 0.0);
    std::copy(self.grad.data().begin(), self.grad.data().end(), g.data().begin() + begin * c);
    accumulate(X, g);
  });
}

Var slice_cols(const Var& x, std::size_t begin, std::size_t count) {
  const std::size_t r = x.rows(), c = x.cols();
  if (begin + count > c) throw ShapeMismatch("slice_cols out of range");
  Tensor out = Tensor::matrix(r, count);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < count; ++j) out(i, j) = x.value()(i, begin + j);
  return make_op(std::move(out), {x.node()}, [begin, count, r](Node& self) {
    const auto& X = self.parents[0];
    Tensor g(X->value.shape(), 0.0);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < count; ++j) g(i, begin + j) = self.grad(i, j);
    accumulate(X, g);
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeMismatch("concat_rows of nothing");
  std::vector<Tensor> values;
  std::vector<NodePtr> nodes;
  for (const auto& p : parts) {
    values.push_back(p.value());
    nodes.push_back(p.node());
  }
  return make_op(ops::vstack(values), std::move(nodes), [](Node& self) {
    std::size_t offset = 0;
    for (const auto& P : self.parents) {
      const std::size_t n = P->value.size();
      if (P->requires_grad) {
        Tensor g(P->value.shape(), 0.0);
        std::copy_n(self.grad.data().begin() + offset, n, g.data().begin());
        accumulate(P, g);
      }
      offset += n;
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeMismatch("concat_cols of nothing");
  const std::size_t r = parts.front().rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rows() != r) throw ShapeMismatch("concat_cols row mismatch");
    total += p.cols();
  }
  Tensor out = Tensor::matrix(r, total);
  std::vector<NodePtr> nodes;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) out(i, offset + j) = p.value()(i, j);
    offset += p.cols();
    nodes.push_back(p.node());
  }
  return make_op(std::move(out), std::move(nodes), [r](Node& self) {
    std::size_t off = 0;
    for (const auto& P : self.parents) {
      const std::size_t c = P->value.cols();
      if (P->requires_grad) {
        Tensor g(P->value.shape(), 0.0);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) g(i, j) = self.grad(i, off + j);
        accumulate(P, g);
      }
      off += c;
    }
  });
}

void backward(const Var& loss) {
  if (loss.value().size() != 1) {
    throw NonScalarLoss("backward on tensor of shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order with each node once.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order)
    if (!n->is_leaf) n->grad = Tensor(n->value.shape(), 0.0);
  loss.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->is_leaf && n->backward_fn) n->backward_fn(*n);
  }
}

}  // namespace propcache::ad
