#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "ralm/error.hpp"
#include "ralm/rng.hpp"

namespace ralm {

// Dense row-major matrix. Storage is a plain vector so copies are deep and
// equality is bitwise on the payload.
template <class T>
class BasicTensor2 {
 public:
  using value_type = T;
  using EigenMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  BasicTensor2() = default;
  BasicTensor2(std::size_t rows, std::size_t cols, T fill = T(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  BasicTensor2(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_)
      throw ShapeError("tensor data length " + std::to_string(data_.size()) + " != " +
                       std::to_string(rows_) + "x" + std::to_string(cols_));
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  Eigen::Map<EigenMat> map() { return {data_.data(), Eigen::Index(rows_), Eigen::Index(cols_)}; }
  Eigen::Map<const EigenMat> map() const {
    return {data_.data(), Eigen::Index(rows_), Eigen::Index(cols_)};
  }

  // Rows [begin, end) as a new tensor.
  BasicTensor2 slice_rows(std::size_t begin, std::size_t end) const {
    BasicTensor2 out(end - begin, cols_);
    std::copy(data_.begin() + begin * cols_, data_.begin() + end * cols_, out.data_.begin());
    return out;
  }

  template <class U>
  BasicTensor2<U> cast() const {
    BasicTensor2<U> out(rows_, cols_);
    std::transform(data_.begin(), data_.end(), out.values().begin(),
                   [](T v) { return static_cast<U>(v); });
    return out;
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const BasicTensor2& a, const BasicTensor2& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using Tensor2 = BasicTensor2<float>;

enum class FlopCategory { kv_projection, lora, other };

// FLOP counters by category. Only matrix products are booked, at 2 FLOPs
// per multiply-accumulate; normalization and elementwise work is free.
struct FlopsLedger {
  std::uint64_t kv_projection = 0;
  std::uint64_t lora = 0;
  std::uint64_t other = 0;

  void add(FlopCategory cat, std::uint64_t flops) {
    switch (cat) {
      case FlopCategory::kv_projection: kv_projection += flops; break;
      case FlopCategory::lora: lora += flops; break;
      case FlopCategory::other: other += flops; break;
    }
  }
  void add_mac(FlopCategory cat, std::uint64_t m, std::uint64_t k, std::uint64_t n) {
    add(cat, 2 * m * k * n);
  }
  std::uint64_t total() const { return kv_projection + lora + other; }

  FlopsLedger& operator+=(const FlopsLedger& o) {
    kv_projection += o.kv_projection;
    lora += o.lora;
    other += o.other;
    return *this;
  }
  friend FlopsLedger operator+(FlopsLedger a, const FlopsLedger& b) { return a += b; }
  // Delta between two snapshots of the same ledger (b taken earlier).
  friend FlopsLedger operator-(const FlopsLedger& a, const FlopsLedger& b) {
    return {a.kv_projection - b.kv_projection, a.lora - b.lora, a.other - b.other};
  }
  friend bool operator==(const FlopsLedger&, const FlopsLedger&) = default;
};

inline std::string shape_str(std::size_t r, std::size_t c) {
  return "[" + std::to_string(r) + "x" + std::to_string(c) + "]";
}

template <class T>
BasicTensor2<T> matmul(const BasicTensor2<T>& a, const BasicTensor2<T>& b, FlopsLedger& ledger,
                       FlopCategory category) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: " + shape_str(a.rows(), a.cols()) + " . " +
                     shape_str(b.rows(), b.cols()));
  BasicTensor2<T> out(a.rows(), b.cols());
  if (!out.empty() && a.cols() > 0) out.map().noalias() = a.map() * b.map();
  ledger.add_mac(category, a.rows(), a.cols(), b.cols());
  return out;
}

template <class T>
void add_inplace(BasicTensor2<T>& a, const BasicTensor2<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError("add: " + shape_str(a.rows(), a.cols()) + " + " +
                     shape_str(b.rows(), b.cols()));
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) av[i] += bv[i];
}

template <class T>
void softmax_row_inplace(std::span<T> row) {
  if (row.empty()) return;
  const T mx = *std::max_element(row.begin(), row.end());
  double sum = 0.0;
  for (auto& v : row) {
    v = std::exp(v - mx);
    sum += static_cast<double>(v);
  }
  const double inv = 1.0 / sum;
  for (auto& v : row) v = static_cast<T>(static_cast<double>(v) * inv);
}

template <class T>
BasicTensor2<T> softmax_rows(const BasicTensor2<T>& a) {
  BasicTensor2<T> out = a;
  for (std::size_t r = 0; r < out.rows(); ++r) softmax_row_inplace(out.row(r));
  return out;
}

// Per-row normalization to zero mean / unit variance, then gain and bias.
template <class T>
BasicTensor2<T> layer_norm(const BasicTensor2<T>& a, std::span<const T> gain,
                           std::span<const T> bias, double eps) {
  if (gain.size() != a.cols() || bias.size() != a.cols())
    throw ShapeError("layer_norm: gain/bias length must equal " + std::to_string(a.cols()));
  BasicTensor2<T> out(a.rows(), a.cols());
  const double n = static_cast<double>(a.cols());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto x = a.row(r);
    auto y = out.row(r);
    double mean = 0.0;
    for (T v : x) mean += v;
    mean /= n;
    double var = 0.0;
    for (T v : x) var += (v - mean) * (v - mean);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < x.size(); ++c)
      y[c] = static_cast<T>((x[c] - mean) * inv) * gain[c] + bias[c];
  }
  return out;
}

// tanh approximation of GELU.
template <class T>
T gelu(T x) {
  constexpr T k = T(0.7978845608028654);  // sqrt(2/pi)
  return T(0.5) * x * (T(1) + std::tanh(k * (x + T(0.044715) * x * x * x)));
}

// Vectorized over a whole buffer; agrees with gelu() to a few ulp.
template <class T>
void gelu_inplace(std::span<T> values) {
  constexpr T k = T(0.7978845608028654);
  Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> x(values.data(), Eigen::Index(values.size()));
  x = T(0.5) * x * (T(1) + (k * (x + T(0.044715) * x.cube())).tanh());
}

template <class T>
T gelu_grad(T x) {
  constexpr T k = T(0.7978845608028654);
  const T inner = k * (x + T(0.044715) * x * x * x);
  const T t = std::tanh(inner);
  const T dinner = k * (T(1) + T(3) * T(0.044715) * x * x);
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * dinner;
}

template <class T>
BasicTensor2<T> random_normal(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  BasicTensor2<T> out(rows, cols);
  for (auto& v : out.values()) v = static_cast<T>(rng.normal() * stddev);
  return out;
}

template <class T>
bool all_finite(const BasicTensor2<T>& a) {
  return std::all_of(a.values().begin(), a.values().end(),
                     [](T v) { return std::isfinite(v); });
}

template <class T>
double max_abs_diff(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) throw ShapeError("max_abs_diff: length mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

template <class T>
double max_abs_diff(const BasicTensor2<T>& a, const BasicTensor2<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("max_abs_diff: shape mismatch");
  return max_abs_diff(std::span<const T>(a.values()), std::span<const T>(b.values()));
}

}  // namespace ralm
