#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace elastic {

// Dense row-major array. Almost everything in this codebase is a matrix, so
// the 2-D accessors are the primary interface; 1-D tensors are stored as
// [1, n] or [n, 1] as convenient.
template <typename T>
struct Tensor {
  std::vector<size_t> shape;
  std::vector<T> data;

  Tensor() = default;
  Tensor(std::vector<size_t> s, std::vector<T> d)
      : shape(std::move(s)), data(std::move(d)) {
    if (count(shape) != data.size())
      throw std::invalid_argument("tensor: shape/data size mismatch");
  }

  static size_t count(const std::vector<size_t>& s) {
    size_t n = 1;
    for (size_t d : s) n *= d;
    return n;
  }

  static Tensor zeros(std::vector<size_t> s) {
    size_t n = count(s);
    return Tensor(std::move(s), std::vector<T>(n, T(0)));
  }

  static Tensor full(std::vector<size_t> s, T v) {
    size_t n = count(s);
    return Tensor(std::move(s), std::vector<T>(n, v));
  }

  size_t size() const { return data.size(); }
  size_t rows() const { return shape.empty() ? 0 : shape[0]; }
  size_t cols() const { return shape.size() < 2 ? (shape.empty() ? 0 : 1) : shape[1]; }

  T& at(size_t r, size_t c) { return data[r * cols() + c]; }
  const T& at(size_t r, size_t c) const { return data[r * cols() + c]; }

  const T* row_ptr(size_t r) const { return data.data() + r * cols(); }
  T* row_ptr(size_t r) { return data.data() + r * cols(); }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i)
      os << (i ? "x" : "") << shape[i];
    os << "]";
    return os.str();
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i)
      out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

inline void check_same_shape(const std::vector<size_t>& a,
                             const std::vector<size_t>& b, const char* op) {
  if (a != b) {
    auto str = [](const std::vector<size_t>& s) {
      std::string r = "[";
      for (size_t i = 0; i < s.size(); ++i)
        r += (i ? "x" : "") + std::to_string(s[i]);
      return r + "]";
    };
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + str(a) +
                                " vs " + str(b));
  }
}

}  // namespace elastic
