#include "ceu/autodiff.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <unordered_set>
#include <utility>

namespace ceu {

namespace {

Var make_op(DenseArray value, std::vector<Var> inputs, std::function<void(Node&)> bw) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  for (const Var& in : inputs) {
    if (in.node() && in.node()->requires_grad) {
      n->requires_grad = true;
      break;
    }
  }
  if (n->requires_grad) {
    n->parents.reserve(inputs.size());
    for (Var& in : inputs) n->parents.push_back(in.node());
    n->backward_fn = std::move(bw);
  }
  return Var::wrap(std::move(n));
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a.value().same_shape(b.value())) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.value().shape) + " vs " +
                                shape_str(b.value().shape));
  }
}

}  // namespace

DenseArray& Node::ensure_grad() {
  if (grad.data.empty()) grad = DenseArray::zeros(value.shape);
  return grad;
}

Var Var::param(DenseArray v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->requires_grad = true;
  return Var(std::move(n));
}

Var Var::constant(DenseArray v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  return Var(std::move(n));
}

Var Var::detach() const {
  auto n = std::make_shared<Node>();
  n->value = node_->value;
  n->detached = true;
  return Var(std::move(n));
}

const DenseArray& Var::grad() const {
  return node_->ensure_grad();
}

double Var::scalar() const {
  if (node_->value.numel() != 1) {
    throw std::invalid_argument("Var::scalar: node holds " + std::to_string(node_->value.numel()) + " elements");
  }
  return node_->value.data[0];
}

void backward(const Var& root) {
  if (!root.defined()) throw std::invalid_argument("backward: undefined root");
  if (root.value().numel() != 1) {
    throw std::invalid_argument("backward: root must be scalar, got shape " + shape_str(root.value().shape));
  }
  if (!root.node()->requires_grad) return;  // nothing differentiable upstream

  // iterative post-order over requiring parents
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  struct Frame {
    Node* node;
    std::size_t next_parent;
  };
  std::vector<Frame> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      Node* p = f.node->parents[f.next_parent++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  root.node()->ensure_grad().data[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

// ---- elementwise ------------------------------------------------------------

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  DenseArray out = a.value();
  const auto& bd = b.value().data;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += bd[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    const auto& g = self.grad.data;
    for (int p = 0; p < 2; ++p) {
      Node& parent = *self.parents[static_cast<std::size_t>(p)];
      if (!parent.requires_grad) continue;
      auto& pg = parent.ensure_grad().data;
      for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  DenseArray out = a.value();
  const auto& bd = b.value().data;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= bd[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    const auto& g = self.grad.data;
    if (self.parents[0]->requires_grad) {
      auto& pg = self.parents[0]->ensure_grad().data;
      for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
    }
    if (self.parents[1]->requires_grad) {
      auto& pg = self.parents[1]->ensure_grad().data;
      for (std::size_t i = 0; i < g.size(); ++i) pg[i] -= g[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  DenseArray out = a.value();
  const auto& bd = b.value().data;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bd[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    const auto& g = self.grad.data;
    const auto& av = self.parents[0]->value.data;
    const auto& bv = self.parents[1]->value.data;
    if (self.parents[0]->requires_grad) {
      auto& pg = self.parents[0]->ensure_grad().data;
      for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i] * bv[i];
    }
    if (self.parents[1]->requires_grad) {
      auto& pg = self.parents[1]->ensure_grad().data;
      for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i] * av[i];
    }
  });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var scale(const Var& a, double c) {
  DenseArray out = a.value();
  for (double& v : out.data) v *= c;
  return make_op(std::move(out), {a}, [c](Node& self) {
    if (!self.parents[0]->requires_grad) return;
    auto& pg = self.parents[0]->ensure_grad().data;
    const auto& g = self.grad.data;
    for (std::size_t i = 0; i < g.size(); ++i) pg[i] += c * g[i];
  });
}

Var log_op(const Var& a) {
  DenseArray out = a.value();
  for (double& v : out.data) v = std::log(v);
  return make_op(std::move(out), {a}, [](Node& self) {
    if (!self.parents[0]->requires_grad) return;
    auto& pg = self.parents[0]->ensure_grad().data;
    const auto& av = self.parents[0]->value.data;
    const auto& g = self.grad.data;
    for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i] / av[i];
  });
}

Var exp_op(const Var& a) {
  DenseArray out = a.value();
  for (double& v : out.data) v = std::exp(v);
  return make_op(std::move(out), {a}, [](Node& self) {
    if (!self.parents[0]->requires_grad) return;
    auto& pg = self.parents[0]->ensure_grad().data;
    const auto& ov = self.value.data;
    const auto& g = self.grad.data;
    for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i] * ov[i];
  });
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data) s += v;
  return make_op(DenseArray::scalar(s), {a}, [](Node& self) {
    if (!self.parents[0]->requires_grad) return;
    auto& pg = self.parents[0]->ensure_grad().data;
    const double g = self.grad.data[0];
    for (double& v : pg) v += g;
  });
}

Var mean(const Var& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.value().numel()));
}

Var dot(const Var& a, const Var& b) {
  check_same_shape(a, b, "dot");
  double s = 0.0;
  const auto& av = a.value().data;
  const auto& bv = b.value().data;
  for (std::size_t i = 0; i < av.size(); ++i) s += av[i] * bv[i];
  return make_op(DenseArray::scalar(s), {a, b}, [](Node& self) {
    const double g = self.grad.data[0];
    const auto& av = self.parents[0]->value.data;
    const auto& bv = self.parents[1]->value.data;
    if (self.parents[0]->requires_grad) {
      auto& pg = self.parents[0]->ensure_grad().data;
      for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += g * bv[i];
    }
    if (self.parents[1]->requires_grad) {
      auto& pg = self.parents[1]->ensure_grad().data;
      for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += g * av[i];
    }
  });
}

// ---- matrix ops -------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  const DenseArray& av = a.value();
  const DenseArray& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.shape[1] != bv.shape[0]) {
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(av.shape) + " x " + shape_str(bv.shape));
  }
  const std::int64_t m = av.shape[0], k = av.shape[1], n = bv.shape[1];
  DenseArray out = DenseArray::zeros({m, n});
  for (std::int64_t i = 0; i < m; ++i) {
    const double* arow = &av.data[static_cast<std::size_t>(i * k)];
    double* orow = &out.data[static_cast<std::size_t>(i * n)];
    for (std::int64_t p = 0; p < k; ++p) {
      const double aip = arow[p];
      if (aip == 0.0) continue;
      const double* brow = &bv.data[static_cast<std::size_t>(p * n)];
      for (std::int64_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  return make_op(std::move(out), {a, b}, [m, k, n](Node& self) {
    const auto& g = self.grad.data;
    const auto& av2 = self.parents[0]->value.data;
    const auto& bv2 = self.parents[1]->value.data;
    if (self.parents[0]->requires_grad) {
      // dA = g . B^T
      auto& pg = self.parents[0]->ensure_grad().data;
      for (std::int64_t i = 0; i < m; ++i) {
        const double* grow = &g[static_cast<std::size_t>(i * n)];
        double* darow = &pg[static_cast<std::size_t>(i * k)];
        for (std::int64_t p = 0; p < k; ++p) {
          const double* brow = &bv2[static_cast<std::size_t>(p * n)];
          double acc = 0.0;
          for (std::int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          darow[p] += acc;
        }
      }
    }
    if (self.parents[1]->requires_grad) {
      // dB = A^T . g
      auto& pg = self.parents[1]->ensure_grad().data;
      for (std::int64_t i = 0; i < m; ++i) {
        const double* arow = &av2[static_cast<std::size_t>(i * k)];
        const double* grow = &g[static_cast<std::size_t>(i * n)];
        for (std::int64_t p = 0; p < k; ++p) {
          const double aip = arow[p];
          if (aip == 0.0) continue;
          double* dbrow = &pg[static_cast<std::size_t>(p * n)];
          for (std::int64_t j = 0; j < n; ++j) dbrow[j] += aip * grow[j];
        }
      }
    }
  });
}

Var add_rowvec(const Var& a, const Var& v) {
  const DenseArray& av = a.value();
  const DenseArray& vv = v.value();
  if (av.rank() != 2 || vv.rank() != 1 || av.shape[1] != vv.shape[0]) {
    throw std::invalid_argument("add_rowvec: incompatible shapes " + shape_str(av.shape) + " + " + shape_str(vv.shape));
  }
  const std::int64_t m = av.shape[0], n = av.shape[1];
  DenseArray out = av;
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t j = 0; j < n; ++j) out.data[static_cast<std::size_t>(i * n + j)] += vv.data[static_cast<std::size_t>(j)];
  }
  return make_op(std::move(out), {a, v}, [m, n](Node& self) {
    const auto& g = self.grad.data;
    if (self.parents[0]->requires_grad) {
      auto& pg = self.parents[0]->ensure_grad().data;
      for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
    }
    if (self.parents[1]->requires_grad) {
      auto& pg = self.parents[1]->ensure_grad().data;
      for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t j = 0; j < n; ++j) pg[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(i * n + j)];
      }
    }
  });
}

Var gather_rows(const Var& table, const std::vector<std::int64_t>& ids) {
  const DenseArray& tv = table.value();
  if (tv.rank() != 2) throw std::invalid_argument("gather_rows: table must be rank 2");
  const std::int64_t rows = tv.shape[0], cols = tv.shape[1];
  for (std::int64_t id : ids) {
    if (id < 0 || id >= rows) throw std::out_of_range("gather_rows: id " + std::to_string(id) + " out of range");
  }
  DenseArray out = DenseArray::zeros({static_cast<std::int64_t>(ids.size()), cols});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const double* src = &tv.data[static_cast<std::size_t>(ids[i] * cols)];
    double* dst = &out.data[i * static_cast<std::size_t>(cols)];
    for (std::int64_t j = 0; j < cols; ++j) dst[j] = src[j];
  }
  return make_op(std::move(out), {table}, [ids, cols](Node& self) {
    if (!self.parents[0]->requires_grad) return;
    auto& pg = self.parents[0]->ensure_grad().data;
    const auto& g = self.grad.data;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      double* dst = &pg[static_cast<std::size_t>(ids[i] * cols)];
      const double* src = &g[i * static_cast<std::size_t>(cols)];
      for (std::int64_t j = 0; j < cols; ++j) dst[j] += src[j];
    }
  });
}

Var select_rows(const Var& a, const std::vector<std::int64_t>& rows) {
  return gather_rows(a, rows);
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
  const std::int64_t cols = parts[0].value().shape[1];
  std::int64_t total = 0;
  for (const Var& p : parts) {
    if (p.value().rank() != 2 || p.value().shape[1] != cols) {
      throw std::invalid_argument("concat_rows: column mismatch");
    }
    total += p.value().shape[0];
  }
  DenseArray out = DenseArray::zeros({total, cols});
  std::size_t off = 0;
  for (const Var& p : parts) {
    const auto& d = p.value().data;
    std::copy(d.begin(), d.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
    off += d.size();
  }
  return make_op(std::move(out), parts, [](Node& self) {
    const auto& g = self.grad.data;
    std::size_t off2 = 0;
    for (auto& parent : self.parents) {
      const std::size_t n = parent->value.data.size();
      if (parent->requires_grad) {
        auto& pg = parent->ensure_grad().data;
        for (std::size_t i = 0; i < n; ++i) pg[i] += g[off2 + i];
      }
      off2 += n;
    }
  });
}

Var reshape(const Var& a, Shape shape) {
  if (shape_numel(shape) != a.value().numel()) {
    throw std::invalid_argument("reshape: element count mismatch " + shape_str(a.value().shape) + " -> " +
                                shape_str(shape));
  }
  DenseArray out(std::move(shape), a.value().data);
  return make_op(std::move(out), {a}, [](Node& self) {
    if (!self.parents[0]->requires_grad) return;
    auto& pg = self.parents[0]->ensure_grad().data;
    const auto& g = self.grad.data;
    for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
  });
}

// ---- row-structured ops -----------------------------------------------------

Var row_log_softmax(const Var& a) {
  const DenseArray& av = a.value();
  if (av.rank() != 2) throw std::invalid_argument("row_log_softmax: input must be rank 2");
  const std::int64_t m = av.shape[0], n = av.shape[1];
  DenseArray out = DenseArray::zeros({m, n});
  for (std::int64_t i = 0; i < m; ++i) {
    const double* row = &av.data[static_cast<std::size_t>(i * n)];
    double mx = row[0];
    for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (std::int64_t j = 0; j < n; ++j) s += std::exp(row[j] - mx);
    const double lse = mx + std::log(s);
    double* orow = &out.data[static_cast<std::size_t>(i * n)];
    for (std::int64_t j = 0; j < n; ++j) orow[j] = row[j] - lse;
  }
  return make_op(std::move(out), {a}, [m, n](Node& self) {
    if (!self.parents[0]->requires_grad) return;
    auto& pg = self.parents[0]->ensure_grad().data;
    const auto& g = self.grad.data;
    const auto& ov = self.value.data;
    for (std::int64_t i = 0; i < m; ++i) {
      const double* grow = &g[static_cast<std::size_t>(i * n)];
      const double* orow = &ov[static_cast<std::size_t>(i * n)];
      double gsum = 0.0;
      for (std::int64_t j = 0; j < n; ++j) gsum += grow[j];
      double* prow = &pg[static_cast<std::size_t>(i * n)];
      for (std::int64_t j = 0; j < n; ++j) prow[j] += grow[j] - std::exp(orow[j]) * gsum;
    }
  });
}

Var gelu(const Var& a) {
  DenseArray out = a.value();
  for (double& v : out.data) v = 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
  return make_op(std::move(out), {a}, [](Node& self) {
    if (!self.parents[0]->requires_grad) return;
    auto& pg = self.parents[0]->ensure_grad().data;
    const auto& av = self.parents[0]->value.data;
    const auto& g = self.grad.data;
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = av[i];
      const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
      pg[i] += g[i] * (cdf + x * inv_sqrt_2pi * std::exp(-0.5 * x * x));
    }
  });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
  const DenseArray& xv = x.value();
  if (xv.rank() != 2) throw std::invalid_argument("layer_norm: input must be rank 2");
  const std::int64_t m = xv.shape[0], n = xv.shape[1];
  if (gain.value().numel() != n || bias.value().numel() != n) {
    throw std::invalid_argument("layer_norm: gain/bias must have width " + std::to_string(n));
  }
  DenseArray out = DenseArray::zeros({m, n});
  auto xhat = std::make_shared<std::vector<double>>(static_cast<std::size_t>(m * n));
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(m));
  const auto& gv = gain.value().data;
  const auto& bv = bias.value().data;
  for (std::int64_t i = 0; i < m; ++i) {
    const double* row = &xv.data[static_cast<std::size_t>(i * n)];
    double mu = 0.0;
    for (std::int64_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::int64_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[static_cast<std::size_t>(i)] = is;
    for (std::int64_t j = 0; j < n; ++j) {
      const double xh = (row[j] - mu) * is;
      (*xhat)[static_cast<std::size_t>(i * n + j)] = xh;
      out.data[static_cast<std::size_t>(i * n + j)] = xh * gv[static_cast<std::size_t>(j)] + bv[static_cast<std::size_t>(j)];
    }
  }
  return make_op(std::move(out), {x, gain, bias}, [m, n, xhat, inv_std](Node& self) {
    const auto& g = self.grad.data;
    const auto& gv2 = self.parents[1]->value.data;
    if (self.parents[1]->requires_grad) {
      auto& gg = self.parents[1]->ensure_grad().data;
      for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t j = 0; j < n; ++j) {
          gg[static_cast<std::size_t>(j)] +=
              g[static_cast<std::size_t>(i * n + j)] * (*xhat)[static_cast<std::size_t>(i * n + j)];
        }
      }
    }
    if (self.parents[2]->requires_grad) {
      auto& bg = self.parents[2]->ensure_grad().data;
      for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t j = 0; j < n; ++j) bg[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(i * n + j)];
      }
    }
    if (self.parents[0]->requires_grad) {
      auto& xg = self.parents[0]->ensure_grad().data;
      std::vector<double> dxh(static_cast<std::size_t>(n));
      for (std::int64_t i = 0; i < m; ++i) {
        double mean_dxh = 0.0, mean_dxh_xh = 0.0;
        for (std::int64_t j = 0; j < n; ++j) {
          const double d = g[static_cast<std::size_t>(i * n + j)] * gv2[static_cast<std::size_t>(j)];
          dxh[static_cast<std::size_t>(j)] = d;
          mean_dxh += d;
          mean_dxh_xh += d * (*xhat)[static_cast<std::size_t>(i * n + j)];
        }
        mean_dxh /= static_cast<double>(n);
        mean_dxh_xh /= static_cast<double>(n);
        const double is = (*inv_std)[static_cast<std::size_t>(i)];
        for (std::int64_t j = 0; j < n; ++j) {
          const double xh = (*xhat)[static_cast<std::size_t>(i * n + j)];
          xg[static_cast<std::size_t>(i * n + j)] += is * (dxh[static_cast<std::size_t>(j)] - mean_dxh - xh * mean_dxh_xh);
        }
      }
    }
  });
}

Var sum_weighted(const Var& a, const DenseArray& w) {
  if (!a.value().same_shape(w)) {
    throw std::invalid_argument("sum_weighted: weight shape " + shape_str(w.shape) + " does not match " +
                                shape_str(a.value().shape));
  }
  double s = 0.0;
  const auto& av = a.value().data;
  for (std::size_t i = 0; i < av.size(); ++i) s += av[i] * w.data[i];
  auto weights = std::make_shared<DenseArray>(w);
  return make_op(DenseArray::scalar(s), {a}, [weights](Node& self) {
    if (!self.parents[0]->requires_grad) return;
    auto& pg = self.parents[0]->ensure_grad().data;
    const double g = self.grad.data[0];
    for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += g * weights->data[i];
  });
}

Var causal_attention(const Var& q, const Var& k, const Var& v,
                     std::int64_t n_seq, std::int64_t seq_len, std::int64_t n_heads) {
  const DenseArray& qv = q.value();
  if (qv.rank() != 2 || !qv.same_shape(k.value()) || !qv.same_shape(v.value())) {
    throw std::invalid_argument("causal_attention: q/k/v must share a rank-2 shape");
  }
  const std::int64_t d_model = qv.shape[1];
  if (qv.shape[0] != n_seq * seq_len || d_model % n_heads != 0) {
    throw std::invalid_argument("causal_attention: bad geometry");
  }
  const std::int64_t hd = d_model / n_heads;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));

  // per (seq, head) causal softmax probabilities, kept for the backward pass
  auto probs = std::make_shared<std::vector<double>>(
      static_cast<std::size_t>(n_seq * n_heads * seq_len * seq_len), 0.0);
  DenseArray out = DenseArray::zeros(qv.shape);

  const auto& kv = k.value();
  const auto& vv = v.value();
  for (std::int64_t s = 0; s < n_seq; ++s) {
    const std::int64_t base = s * seq_len;
    for (std::int64_t h = 0; h < n_heads; ++h) {
      const std::int64_t hoff = h * hd;
      double* p = &(*probs)[static_cast<std::size_t>(((s * n_heads) + h) * seq_len * seq_len)];
      for (std::int64_t t = 0; t < seq_len; ++t) {
        const double* qrow = &qv.data[static_cast<std::size_t>((base + t) * d_model + hoff)];
        double* prow = &p[static_cast<std::size_t>(t * seq_len)];
        double mx = -1e300;
        for (std::int64_t u = 0; u <= t; ++u) {
          const double* krow = &kv.data[static_cast<std::size_t>((base + u) * d_model + hoff)];
          double acc = 0.0;
          for (std::int64_t c = 0; c < hd; ++c) acc += qrow[c] * krow[c];
          prow[u] = acc * att_scale;
          mx = std::max(mx, prow[u]);
        }
        double sumexp = 0.0;
        for (std::int64_t u = 0; u <= t; ++u) {
          prow[u] = std::exp(prow[u] - mx);
          sumexp += prow[u];
        }
        double* orow = &out.data[static_cast<std::size_t>((base + t) * d_model + hoff)];
        for (std::int64_t u = 0; u <= t; ++u) {
          prow[u] /= sumexp;
          const double* vrow = &vv.data[static_cast<std::size_t>((base + u) * d_model + hoff)];
          for (std::int64_t c = 0; c < hd; ++c) orow[c] += prow[u] * vrow[c];
        }
      }
    }
  }

  return make_op(std::move(out), {q, k, v}, [n_seq, seq_len, n_heads, hd, d_model, att_scale, probs](Node& self) {
    Node& qn = *self.parents[0];
    Node& kn = *self.parents[1];
    Node& vn = *self.parents[2];
    if (!qn.requires_grad && !kn.requires_grad && !vn.requires_grad) return;
    auto& qg = qn.ensure_grad().data;
    auto& kg = kn.ensure_grad().data;
    auto& vg = vn.ensure_grad().data;
    const auto& g = self.grad.data;
    std::vector<double> ds(static_cast<std::size_t>(seq_len));
    for (std::int64_t s = 0; s < n_seq; ++s) {
      const std::int64_t base = s * seq_len;
      for (std::int64_t h = 0; h < n_heads; ++h) {
        const std::int64_t hoff = h * hd;
        const double* p = &(*probs)[static_cast<std::size_t>(((s * n_heads) + h) * seq_len * seq_len)];
        for (std::int64_t t = 0; t < seq_len; ++t) {
          const double* grow = &g[static_cast<std::size_t>((base + t) * d_model + hoff)];
          const double* prow = &p[static_cast<std::size_t>(t * seq_len)];
          // dV and dP
          double dp_dot_p = 0.0;
          for (std::int64_t u = 0; u <= t; ++u) {
            const double* vrow = &vn.value.data[static_cast<std::size_t>((base + u) * d_model + hoff)];
            double dp = 0.0;
            for (std::int64_t c = 0; c < hd; ++c) dp += grow[c] * vrow[c];
            ds[static_cast<std::size_t>(u)] = dp;
            dp_dot_p += dp * prow[u];
            double* vgrow = &vg[static_cast<std::size_t>((base + u) * d_model + hoff)];
            for (std::int64_t c = 0; c < hd; ++c) vgrow[c] += prow[u] * grow[c];
          }
          // softmax backward, then scores -> q,k
          const double* qrow = &qn.value.data[static_cast<std::size_t>((base + t) * d_model + hoff)];
          double* qgrow = &qg[static_cast<std::size_t>((base + t) * d_model + hoff)];
          for (std::int64_t u = 0; u <= t; ++u) {
            const double dscore = (ds[static_cast<std::size_t>(u)] - dp_dot_p) * prow[u] * att_scale;
            const double* krow = &kn.value.data[static_cast<std::size_t>((base + u) * d_model + hoff)];
            double* kgrow = &kg[static_cast<std::size_t>((base + u) * d_model + hoff)];
            for (std::int64_t c = 0; c < hd; ++c) {
              qgrow[c] += dscore * krow[c];
              kgrow[c] += dscore * qrow[c];
            }
          }
        }
      }
    }
  });
}

}  // namespace ceu
