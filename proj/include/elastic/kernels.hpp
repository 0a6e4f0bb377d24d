#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "elastic/tensor.hpp"

namespace elastic {

// Forward primitives shared by the inference engine and the autodiff graph.
// All matrices are row-major. Shape errors name both operand shapes.

template <typename T>
inline void check_matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.cols() != b.rows())
    throw std::invalid_argument("matmul: shape mismatch " + a.shape_str() +
                                " vs " + b.shape_str());
}

// C = A * B
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  check_matmul(a, b);
  const size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor<T> c = Tensor<T>::zeros({m, n});
  for (size_t i = 0; i < m; ++i) {
    const T* arow = a.row_ptr(i);
    T* crow = c.row_ptr(i);
    for (size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      const T* brow = b.row_ptr(p);
      for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

// C = A^T * B  (A is k x m, result m x n)
template <typename T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rows() != b.rows())
    throw std::invalid_argument("matmul_tn: shape mismatch " + a.shape_str() +
                                " vs " + b.shape_str());
  const size_t k = a.rows(), m = a.cols(), n = b.cols();
  Tensor<T> c = Tensor<T>::zeros({m, n});
  for (size_t p = 0; p < k; ++p) {
    const T* arow = a.row_ptr(p);
    const T* brow = b.row_ptr(p);
    for (size_t i = 0; i < m; ++i) {
      const T av = arow[i];
      if (av == T(0)) continue;
      T* crow = c.row_ptr(i);
      for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

// C = A * B^T  (B is n x k, result m x n)
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.cols() != b.cols())
    throw std::invalid_argument("matmul_nt: shape mismatch " + a.shape_str() +
                                " vs " + b.shape_str());
  const size_t m = a.rows(), k = a.cols(), n = b.rows();
  Tensor<T> c = Tensor<T>::zeros({m, n});
  for (size_t i = 0; i < m; ++i) {
    const T* arow = a.row_ptr(i);
    T* crow = c.row_ptr(i);
    for (size_t j = 0; j < n; ++j) {
      const T* brow = b.row_ptr(j);
      T acc = T(0);
      for (size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] = acc;
    }
  }
  return c;
}

// Row-wise softmax with max-subtraction. axis semantics: rows of a matrix.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  if (!x.all_finite()) throw std::invalid_argument("softmax: non-finite input");
  Tensor<T> out = x;
  const size_t n = x.cols();
  for (size_t r = 0; r < x.rows(); ++r) {
    T* row = out.row_ptr(r);
    T mx = row[0];
    for (size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    T sum = T(0);
    for (size_t j = 0; j < n; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    for (size_t j = 0; j < n; ++j) row[j] /= sum;
  }
  return out;
}

// Generic-axis softmax over the trailing axis when axis == -1 or 1 for
// matrices; rows when axis == 0 are handled by transposition in the caller.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  if (axis == -1 || axis == 1 || x.shape.size() <= 1) return softmax_rows(x);
  throw std::invalid_argument("softmax: unsupported axis");
}

// Tanh-approximation GELU: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3))).
template <typename T>
T gelu_scalar(T x) {
  const T c = T(0.7978845608028654);  // sqrt(2/pi)
  const T a = T(0.044715);
  return T(0.5) * x * (T(1) + std::tanh(c * (x + a * x * x * x)));
}

template <typename T>
T gelu_grad_scalar(T x) {
  const T c = T(0.7978845608028654);
  const T a = T(0.044715);
  const T u = c * (x + a * x * x * x);
  const T t = std::tanh(u);
  const T du = c * (T(1) + T(3) * a * x * x);
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> out = x;
  for (T& v : out.data) v = gelu_scalar(v);
  return out;
}

// Row-wise layer norm followed by the affine (gain, bias), both length cols.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& bias, T eps = T(1e-5)) {
  if (gain.size() != x.cols() || bias.size() != x.cols())
    throw std::invalid_argument("layer_norm: shape mismatch " + x.shape_str() +
                                " vs gain " + gain.shape_str());
  Tensor<T> out = x;
  const size_t n = x.cols();
  for (size_t r = 0; r < x.rows(); ++r) {
    T* row = out.row_ptr(r);
    T mean = T(0);
    for (size_t j = 0; j < n; ++j) mean += row[j];
    mean /= T(n);
    T var = T(0);
    for (size_t j = 0; j < n; ++j) {
      const T d = row[j] - mean;
      var += d * d;
    }
    var /= T(n);
    const T inv = T(1) / std::sqrt(var + eps);
    for (size_t j = 0; j < n; ++j)
      row[j] = (row[j] - mean) * inv * gain.data[j] + bias.data[j];
  }
  return out;
}

template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, const std::vector<int>& ids) {
  const size_t d = table.cols();
  Tensor<T> out = Tensor<T>::zeros({ids.size(), d});
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<size_t>(ids[i]) >= table.rows())
      throw std::out_of_range("embedding_lookup: id " + std::to_string(ids[i]) +
                              " out of range [0, " +
                              std::to_string(table.rows()) + ")");
    std::copy(table.row_ptr(ids[i]), table.row_ptr(ids[i]) + d, out.row_ptr(i));
  }
  return out;
}

// Mean negative log softmax probability of the targets, one target per row.
template <typename T>
T cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets) {
  if (logits.rows() != targets.size())
    throw std::invalid_argument("cross_entropy: " + logits.shape_str() +
                                " vs " + std::to_string(targets.size()) +
                                " targets");
  const size_t n = logits.cols();
  T loss = T(0);
  for (size_t r = 0; r < logits.rows(); ++r) {
    const T* row = logits.row_ptr(r);
    if (targets[r] < 0 || static_cast<size_t>(targets[r]) >= n)
      throw std::out_of_range("cross_entropy: target out of range");
    T mx = row[0];
    for (size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    T sum = T(0);
    for (size_t j = 0; j < n; ++j) sum += std::exp(row[j] - mx);
    loss += std::log(sum) + mx - row[targets[r]];
  }
  return loss / T(logits.rows());
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros({x.cols(), x.rows()});
  for (size_t r = 0; r < x.rows(); ++r)
    for (size_t c = 0; c < x.cols(); ++c) out.at(c, r) = x.at(r, c);
  return out;
}

}  // namespace elastic
