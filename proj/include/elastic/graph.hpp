#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <vector>

#include "elastic/kernels.hpp"
#include "elastic/tensor.hpp"

namespace elastic::ag {

// Reverse-mode tape over Tensor<T>. Nodes are created eagerly (the forward
// value is computed at construction) and hold a closure that scatters the
// incoming gradient to the parents.

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.data.empty()) grad = Tensor<T>::zeros(value.shape);
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  static Var leaf(Tensor<T> v) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    n->requires_grad = true;
    return Var(std::move(n));
  }

  static Var constant(Tensor<T> v) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    return Var(std::move(n));
  }

  const Tensor<T>& value() const { return node_->value; }
  const Tensor<T>& grad() const { return node_->grad; }
  std::shared_ptr<Node<T>> node() const { return node_; }
  bool valid() const { return node_ != nullptr; }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> parents,
               std::function<void(Node<T>&)> backward) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  bool any = false;
  for (auto& p : parents) {
    any = any || p.node()->requires_grad;
    n->parents.push_back(p.node());
  }
  n->requires_grad = any;
  if (any) n->backward = std::move(backward);
  return Var<T>(std::move(n));
}

// Runs reverse-mode accumulation from a scalar loss. Deterministic: the topo
// order is a function of graph construction order only.
template <typename T>
void backward(const Var<T>& loss) {
  if (loss.value().size() != 1)
    throw std::invalid_argument("backward: loss must be scalar");
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, size_t>> stack;
  stack.push_back({loss.node().get(), 0});
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node<T>* p = n->parents[idx++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (Node<T>* n : order) n->ensure_grad();
  loss.node()->grad.data[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward) n->backward(*n);
  }
}

// ---- elementwise / structural ops ----

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a.value().shape, b.value().shape, "add");
  Tensor<T> out = a.value();
  for (size_t i = 0; i < out.size(); ++i) out.data[i] += b.value().data[i];
  return make_op<T>(std::move(out), {a, b}, [](Node<T>& n) {
    for (int p = 0; p < 2; ++p) {
      auto& par = *n.parents[p];
      if (!par.requires_grad) continue;
      par.ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i)
        par.grad.data[i] += n.grad.data[i];
    }
  });
}

template <typename T>
Var<T> add_const(const Var<T>& a, const Tensor<T>& c) {
  check_same_shape(a.value().shape, c.shape, "add_const");
  Tensor<T> out = a.value();
  for (size_t i = 0; i < out.size(); ++i) out.data[i] += c.data[i];
  return make_op<T>(std::move(out), {a}, [](Node<T>& n) {
    auto& par = *n.parents[0];
    par.ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i)
      par.grad.data[i] += n.grad.data[i];
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a.value().shape, b.value().shape, "mul");
  Tensor<T> out = a.value();
  for (size_t i = 0; i < out.size(); ++i) out.data[i] *= b.value().data[i];
  return make_op<T>(std::move(out), {a, b}, [](Node<T>& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i)
        pa.grad.data[i] += n.grad.data[i] * pb.value.data[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i)
        pb.grad.data[i] += n.grad.data[i] * pa.value.data[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (T& v : out.data) v *= s;
  return make_op<T>(std::move(out), {a}, [s](Node<T>& n) {
    auto& par = *n.parents[0];
    par.ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i)
      par.grad.data[i] += n.grad.data[i] * s;
  });
}

// x scaled by entry `idx` of a row vector of gates; the gate entry receives
// the inner product <dy, x> as gradient.
template <typename T>
Var<T> scale_by_entry(const Var<T>& x, const Var<T>& gates, size_t idx) {
  if (idx >= gates.value().size())
    throw std::out_of_range("scale_by_entry: gate index out of range");
  const T g = gates.value().data[idx];
  Tensor<T> out = x.value();
  for (T& v : out.data) v *= g;
  return make_op<T>(std::move(out), {x, gates}, [idx, g](Node<T>& n) {
    auto& px = *n.parents[0];
    auto& pg = *n.parents[1];
    if (px.requires_grad) {
      px.ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i)
        px.grad.data[i] += n.grad.data[i] * g;
    }
    if (pg.requires_grad) {
      pg.ensure_grad();
      T acc = T(0);
      for (size_t i = 0; i < n.grad.size(); ++i)
        acc += n.grad.data[i] * px.value.data[i];
      pg.grad.data[idx] += acc;
    }
  });
}

template <typename T>
Var<T> slice_rows(const Var<T>& a, size_t off, size_t len) {
  const size_t c = a.value().cols();
  if (off + len > a.value().rows())
    throw std::out_of_range("slice_rows: out of range");
  Tensor<T> out = Tensor<T>::zeros({len, c});
  std::copy(a.value().row_ptr(off), a.value().row_ptr(off) + len * c,
            out.data.begin());
  return make_op<T>(std::move(out), {a}, [off, len, c](Node<T>& n) {
    auto& par = *n.parents[0];
    par.ensure_grad();
    for (size_t i = 0; i < len * c; ++i)
      par.grad.data[off * c + i] += n.grad.data[i];
  });
}

template <typename T>
Var<T> slice_cols(const Var<T>& a, size_t off, size_t len) {
  const size_t r = a.value().rows(), c = a.value().cols();
  if (off + len > c) throw std::out_of_range("slice_cols: out of range");
  Tensor<T> out = Tensor<T>::zeros({r, len});
  for (size_t i = 0; i < r; ++i)
    std::copy(a.value().row_ptr(i) + off, a.value().row_ptr(i) + off + len,
              out.row_ptr(i));
  return make_op<T>(std::move(out), {a}, [off, len, r, c](Node<T>& n) {
    auto& par = *n.parents[0];
    par.ensure_grad();
    for (size_t i = 0; i < r; ++i)
      for (size_t j = 0; j < len; ++j)
        par.grad.data[i * c + off + j] += n.grad.data[i * len + j];
  });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
  const size_t c = parts[0].value().cols();
  size_t r = 0;
  for (auto& p : parts) {
    if (p.value().cols() != c)
      throw std::invalid_argument("concat_rows: column mismatch");
    r += p.value().rows();
  }
  Tensor<T> out = Tensor<T>::zeros({r, c});
  size_t pos = 0;
  std::vector<size_t> offsets;
  for (auto& p : parts) {
    offsets.push_back(pos);
    std::copy(p.value().data.begin(), p.value().data.end(),
              out.data.begin() + pos * c);
    pos += p.value().rows();
  }
  return make_op<T>(std::move(out), parts, [offsets, c](Node<T>& n) {
    for (size_t k = 0; k < n.parents.size(); ++k) {
      auto& par = *n.parents[k];
      if (!par.requires_grad) continue;
      par.ensure_grad();
      const size_t base = offsets[k] * c;
      for (size_t i = 0; i < par.grad.size(); ++i)
        par.grad.data[i] += n.grad.data[base + i];
    }
  });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
  const size_t r = parts[0].value().rows();
  size_t c = 0;
  for (auto& p : parts) {
    if (p.value().rows() != r)
      throw std::invalid_argument("concat_cols: row mismatch");
    c += p.value().cols();
  }
  Tensor<T> out = Tensor<T>::zeros({r, c});
  std::vector<size_t> offsets;
  size_t pos = 0;
  for (auto& p : parts) {
    offsets.push_back(pos);
    for (size_t i = 0; i < r; ++i)
      std::copy(p.value().row_ptr(i), p.value().row_ptr(i) + p.value().cols(),
                out.row_ptr(i) + pos);
    pos += p.value().cols();
  }
  return make_op<T>(std::move(out), parts, [offsets, r, c](Node<T>& n) {
    for (size_t k = 0; k < n.parents.size(); ++k) {
      auto& par = *n.parents[k];
      if (!par.requires_grad) continue;
      par.ensure_grad();
      const size_t pc = par.grad.cols();
      for (size_t i = 0; i < r; ++i)
        for (size_t j = 0; j < pc; ++j)
          par.grad.data[i * pc + j] += n.grad.data[i * c + offsets[k] + j];
    }
  });
}

// ---- linear algebra ----

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  Tensor<T> out = elastic::matmul(a.value(), b.value());
  return make_op<T>(std::move(out), {a, b}, [](Node<T>& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      Tensor<T> da = matmul_nt(n.grad, pb.value);  // G * B^T
      for (size_t i = 0; i < da.size(); ++i) pa.grad.data[i] += da.data[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      Tensor<T> db = matmul_tn(pa.value, n.grad);  // A^T * G
      for (size_t i = 0; i < db.size(); ++i) pb.grad.data[i] += db.data[i];
    }
  });
}

template <typename T>
Var<T> matmul_nt_op(const Var<T>& a, const Var<T>& b) {
  Tensor<T> out = elastic::matmul_nt(a.value(), b.value());
  return make_op<T>(std::move(out), {a, b}, [](Node<T>& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      Tensor<T> da = elastic::matmul(n.grad, pb.value);  // G * B
      for (size_t i = 0; i < da.size(); ++i) pa.grad.data[i] += da.data[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      Tensor<T> db = matmul_tn(n.grad, pa.value);  // G^T * A
      for (size_t i = 0; i < db.size(); ++i) pb.grad.data[i] += db.data[i];
    }
  });
}

// ---- nonlinearities ----

template <typename T>
Var<T> gelu(const Var<T>& a) {
  Tensor<T> out = elastic::gelu(a.value());
  return make_op<T>(std::move(out), {a}, [](Node<T>& n) {
    auto& par = *n.parents[0];
    par.ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i)
      par.grad.data[i] += n.grad.data[i] * gelu_grad_scalar(par.value.data[i]);
  });
}

template <typename T>
Var<T> softmax_rows(const Var<T>& a) {
  Tensor<T> out = elastic::softmax_rows(a.value());
  Tensor<T> saved = out;
  return make_op<T>(std::move(out), {a}, [saved](Node<T>& n) {
    auto& par = *n.parents[0];
    par.ensure_grad();
    const size_t c = saved.cols();
    for (size_t r = 0; r < saved.rows(); ++r) {
      const T* y = saved.row_ptr(r);
      const T* g = n.grad.data.data() + r * c;
      T dot = T(0);
      for (size_t j = 0; j < c; ++j) dot += g[j] * y[j];
      T* out = par.grad.data.data() + r * c;
      for (size_t j = 0; j < c; ++j) out[j] += y[j] * (g[j] - dot);
    }
  });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias,
                  T eps = T(1e-5)) {
  const size_t nrows = x.value().rows(), nc = x.value().cols();
  if (gain.value().size() != nc || bias.value().size() != nc)
    throw std::invalid_argument("layer_norm: shape mismatch " +
                                x.value().shape_str() + " vs gain " +
                                gain.value().shape_str());
  // Save the normalized activations and inverse stddev for the backward.
  Tensor<T> xhat = Tensor<T>::zeros({nrows, nc});
  Tensor<T> inv_std = Tensor<T>::zeros({nrows, 1});
  Tensor<T> out = Tensor<T>::zeros({nrows, nc});
  for (size_t r = 0; r < nrows; ++r) {
    const T* row = x.value().row_ptr(r);
    T mean = T(0);
    for (size_t j = 0; j < nc; ++j) mean += row[j];
    mean /= T(nc);
    T var = T(0);
    for (size_t j = 0; j < nc; ++j) {
      T d = row[j] - mean;
      var += d * d;
    }
    var /= T(nc);
    const T inv = T(1) / std::sqrt(var + eps);
    inv_std.data[r] = inv;
    for (size_t j = 0; j < nc; ++j) {
      xhat.at(r, j) = (row[j] - mean) * inv;
      out.at(r, j) = xhat.at(r, j) * gain.value().data[j] + bias.value().data[j];
    }
  }
  return make_op<T>(std::move(out), {x, gain, bias},
                    [xhat, inv_std, nrows, nc](Node<T>& n) {
    auto& px = *n.parents[0];
    auto& pg = *n.parents[1];
    auto& pb = *n.parents[2];
    if (pg.requires_grad) {
      pg.ensure_grad();
      for (size_t r = 0; r < nrows; ++r)
        for (size_t j = 0; j < nc; ++j)
          pg.grad.data[j] += n.grad.data[r * nc + j] * xhat.at(r, j);
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (size_t r = 0; r < nrows; ++r)
        for (size_t j = 0; j < nc; ++j)
          pb.grad.data[j] += n.grad.data[r * nc + j];
    }
    if (px.requires_grad) {
      px.ensure_grad();
      for (size_t r = 0; r < nrows; ++r) {
        // dxhat = g * gain; dx = inv_std * (dxhat - mean(dxhat)
        //         - xhat * mean(dxhat*xhat))
        T m1 = T(0), m2 = T(0);
        for (size_t j = 0; j < nc; ++j) {
          const T dxh = n.grad.data[r * nc + j] * pg.value.data[j];
          m1 += dxh;
          m2 += dxh * xhat.at(r, j);
        }
        m1 /= T(nc);
        m2 /= T(nc);
        for (size_t j = 0; j < nc; ++j) {
          const T dxh = n.grad.data[r * nc + j] * pg.value.data[j];
          px.grad.data[r * nc + j] +=
              inv_std.data[r] * (dxh - m1 - xhat.at(r, j) * m2);
        }
      }
    }
  });
}

// Rows of `table` gathered by ids; backward scatter-adds.
template <typename T>
Var<T> gather_rows(const Var<T>& table, const std::vector<int>& ids) {
  Tensor<T> out = embedding_lookup(table.value(), ids);
  const size_t c = table.value().cols();
  return make_op<T>(std::move(out), {table}, [ids, c](Node<T>& n) {
    auto& par = *n.parents[0];
    par.ensure_grad();
    for (size_t i = 0; i < ids.size(); ++i)
      for (size_t j = 0; j < c; ++j)
        par.grad.data[ids[i] * c + j] += n.grad.data[i * c + j];
  });
}

// Mean negative log softmax probability of targets, one per row; scalar out.
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<int>& targets) {
  const T loss = elastic::cross_entropy(logits.value(), targets);
  Tensor<T> probs = elastic::softmax_rows(logits.value());
  Tensor<T> out({1, 1}, {loss});
  return make_op<T>(std::move(out), {logits}, [probs, targets](Node<T>& n) {
    auto& par = *n.parents[0];
    par.ensure_grad();
    const T g = n.grad.data[0] / T(targets.size());
    const size_t c = probs.cols();
    for (size_t r = 0; r < targets.size(); ++r) {
      for (size_t j = 0; j < c; ++j)
        par.grad.data[r * c + j] += g * probs.at(r, j);
      par.grad.data[r * c + targets[r]] -= g;
    }
  });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  T s = T(0);
  for (T v : a.value().data) s += v;
  return make_op<T>(Tensor<T>({1, 1}, {s}), {a}, [](Node<T>& n) {
    auto& par = *n.parents[0];
    par.ensure_grad();
    for (size_t i = 0; i < par.grad.size(); ++i)
      par.grad.data[i] += n.grad.data[0];
  });
}

template <typename T>
Var<T> mean(const std::vector<Var<T>>& scalars) {
  if (scalars.empty()) throw std::invalid_argument("mean: empty");
  T s = T(0);
  for (auto& v : scalars) s += v.value().data[0];
  s /= T(scalars.size());
  const T inv = T(1) / T(scalars.size());
  return make_op<T>(Tensor<T>({1, 1}, {s}), scalars, [inv](Node<T>& n) {
    for (auto& p : n.parents) {
      if (!p->requires_grad) continue;
      p->ensure_grad();
      p->grad.data[0] += n.grad.data[0] * inv;
    }
  });
}

// max(0, a) for scalars (hinge penalties).
template <typename T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (T& v : out.data) v = std::max(v, T(0));
  return make_op<T>(std::move(out), {a}, [](Node<T>& n) {
    auto& par = *n.parents[0];
    par.ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i)
      if (par.value.data[i] > T(0)) par.grad.data[i] += n.grad.data[i];
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (T& v : out.data) v = T(1) / (T(1) + std::exp(-v));
  Tensor<T> saved = out;
  return make_op<T>(std::move(out), {a}, [saved](Node<T>& n) {
    auto& par = *n.parents[0];
    par.ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) {
      const T y = saved.data[i];
      par.grad.data[i] += n.grad.data[i] * y * (T(1) - y);
    }
  });
}

}  // namespace elastic::ag
