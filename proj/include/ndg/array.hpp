#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#ifndef SDS_REAL_BITS
#define SDS_REAL_BITS 32
#endif

namespace ndg {

#if SDS_REAL_BITS == 64
using real = double;
#else
using real = float;
#endif

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};
struct UsageError : std::runtime_error {
  explicit UsageError(const std::string& what) : std::runtime_error(what) {}
};
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// Dense contiguous tensor with value semantics. The element buffer is shared
// between copies and must be treated as immutable once an Array escapes the
// function that built it; builders use uninit()/mutable_data() before sharing.
class Array {
 public:
  Array() = default;

  static Array uninit(Shape shape);  // contents unspecified
  static Array zeros(Shape shape);
  static Array full(Shape shape, real v);
  static Array scalar(real v);
  static Array from_data(Shape shape, std::vector<real> data);

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return n_; }
  std::size_t rank() const { return shape_.size(); }
  bool defined() const { return static_cast<bool>(data_); }

  const real* data() const { return data_.get(); }
  real* mutable_data() { return data_.get(); }
  real at(std::size_t i) const { return data_[i]; }
  real at2(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  // Shares the buffer; only the shape changes.
  Array reshaped(Shape shape) const;

  std::vector<real> to_vector() const { return {data_.get(), data_.get() + n_}; }
  bool all_finite() const;

 private:
  Shape shape_;
  std::shared_ptr<real[]> data_;
  std::size_t n_ = 0;
};

// ---- value-domain math (shared kernels; the tape dispatches to these) ----

enum class Ew { Add, Sub, Mul, Div };

Shape broadcast_shape(const Shape& a, const Shape& b, const char* ctx);
Array ew_binary(const Array& a, const Array& b, Ew op);
// Sums v down to `target` by reducing broadcast axes.
Array unbroadcast(const Array& v, const Shape& target);

Array add(const Array& a, const Array& b);
Array sub(const Array& a, const Array& b);
Array mul(const Array& a, const Array& b);
Array div(const Array& a, const Array& b);
Array scale(const Array& a, real s);
Array add_scalar(const Array& a, real s);
// a + s * b (same shape)
Array add_scaled(const Array& a, const Array& b, real s);

Array matmul(const Array& a, const Array& b);

Array exp(const Array& a);
Array log(const Array& a);
Array sqrt(const Array& a);
Array pow(const Array& a, real p);
Array sigmoid(const Array& a);
Array swish(const Array& a);
Array max_const(const Array& a, real c);
Array sin(const Array& a);
Array cos(const Array& a);

real sum(const Array& a);
real mean(const Array& a);
real dot(const Array& a, const Array& b);
real l2norm(const Array& a);
real max_abs(const Array& a);

Array sum_axis(const Array& a, int axis);    // keepdims
Array mean_axis(const Array& a, int axis);   // keepdims
Array broadcast_to(const Array& a, const Shape& shape);
Array concat(const std::vector<Array>& parts, int axis);
Array slice(const Array& a, int axis, std::size_t start, std::size_t len);
Array flip(const Array& a, int axis);
Array l2norm_last(const Array& a);                 // [.., 1]
Array layernorm_last(const Array& a, real eps);

}  // namespace ndg
