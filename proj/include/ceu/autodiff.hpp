#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "ceu/dense_array.hpp"

namespace ceu {

struct Node;
using NodePtr = std::shared_ptr<Node>;

// One node of a define-by-run reverse-mode graph. The graph is rebuilt on
// every forward pass; backward() walks recorded parents in reverse
// topological order and accumulates adjoints.
struct Node {
  DenseArray value;
  DenseArray grad;  // same shape as value; allocated on demand
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backward_fn;
  bool requires_grad = false;
  bool detached = false;

  DenseArray& ensure_grad();
};

// Value-semantic handle to a graph node.
class Var {
 public:
  Var() = default;

  static Var param(DenseArray v);     // leaf that accumulates gradient
  static Var constant(DenseArray v);  // leaf with no gradient

  // Stop-gradient: a detached leaf sharing this node's value. Backward
  // traversal stops here; the source receives exactly zero gradient through
  // this path.
  Var detach() const;

  const DenseArray& value() const { return node_->value; }
  const DenseArray& grad() const;
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return node_ != nullptr; }
  double scalar() const;  // value of a 1-element node

  NodePtr node() const { return node_; }
  static Var wrap(NodePtr n) { return Var(std::move(n)); }

 private:
  explicit Var(NodePtr n) : node_(std::move(n)) {}
  NodePtr node_;
};

// Seeds d(root)/d(root) = 1 and propagates adjoints to every non-detached
// ancestor. root must hold exactly one element.
void backward(const Var& root);

// ---- primitive operations -------------------------------------------------

Var add(const Var& a, const Var& b);                 // elementwise, same shape
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double c);
Var log_op(const Var& a);
Var exp_op(const Var& a);
Var sum(const Var& a);                               // -> scalar
Var mean(const Var& a);                              // -> scalar
Var dot(const Var& a, const Var& b);                 // vectors -> scalar
Var matmul(const Var& a, const Var& b);              // [m,k]x[k,n] -> [m,n]
Var add_rowvec(const Var& a, const Var& v);          // [m,n] + [n] broadcast
Var gather_rows(const Var& table, const std::vector<std::int64_t>& ids);
Var select_rows(const Var& a, const std::vector<std::int64_t>& rows);
Var concat_rows(const std::vector<Var>& parts);
Var reshape(const Var& a, Shape shape);
Var row_log_softmax(const Var& a);                   // rows of [m,n], finite input
Var gelu(const Var& a);
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);
Var sum_weighted(const Var& a, const DenseArray& w);  // sum(w ⊙ a) -> scalar

// Multi-head causal self-attention over flattened sequences. q,k,v are
// [n_seq*seq_len, d_model]; position t of each sequence attends to positions
// 0..t of the same sequence with per-head softmax(q·k/sqrt(head_dim)).
Var causal_attention(const Var& q, const Var& k, const Var& v,
                     std::int64_t n_seq, std::int64_t seq_len, std::int64_t n_heads);

}  // namespace ceu
