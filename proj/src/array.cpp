#include "ndg/array.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <unordered_map>

namespace ndg {

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace {

// Thread-local recycling of element buffers. Tape workloads allocate the same
// handful of sizes thousands of times per step; going back to the kernel for
// every 2 MB block dominates the elementwise ops otherwise. Buffers freed on a
// different thread than they were allocated on simply migrate pools.
//
// Buffers are 64-byte aligned so that vectorized kernels peel identically for
// every allocation; mixed alignments change summation order by 1 ulp between
// otherwise identical runs.
class BufferPool {
 public:
  static constexpr std::size_t kAlign = 64;

  real* acquire(std::size_t n) {
    auto it = free_.find(n);
    if (it != free_.end() && !it->second.empty()) {
      real* p = it->second.back();
      it->second.pop_back();
      bytes_pooled_ -= n * sizeof(real);
      return p;
    }
    return static_cast<real*>(::operator new[](n * sizeof(real), std::align_val_t(kAlign)));
  }
  void release(real* p, std::size_t n) {
    if (bytes_pooled_ + n * sizeof(real) > kMaxPooledBytes) {
      ::operator delete[](p, std::align_val_t(kAlign));
      return;
    }
    free_[n].push_back(p);
    bytes_pooled_ += n * sizeof(real);
  }
  ~BufferPool() {
    for (auto& [sz, v] : free_)
      for (real* p : v) ::operator delete[](p, std::align_val_t(kAlign));
  }

 private:
  static constexpr std::size_t kMaxPooledBytes = std::size_t(1) << 30;
  std::unordered_map<std::size_t, std::vector<real*>> free_;
  std::size_t bytes_pooled_ = 0;
};

BufferPool& pool() {
  thread_local BufferPool p;
  return p;
}

}  // namespace

Array Array::uninit(Shape shape) {
  Array a;
  a.shape_ = std::move(shape);
  a.n_ = shape_numel(a.shape_);
  const std::size_t n = a.n_;
  a.data_ = std::shared_ptr<real[]>(pool().acquire(n), [n](real* p) { pool().release(p, n); });
  return a;
}

Array Array::zeros(Shape shape) {
  Array a = uninit(std::move(shape));
  std::fill(a.data_.get(), a.data_.get() + a.n_, real(0));
  return a;
}

Array Array::full(Shape shape, real v) {
  Array a = uninit(std::move(shape));
  std::fill(a.data_.get(), a.data_.get() + a.n_, v);
  return a;
}

Array Array::scalar(real v) { return full({1}, v); }

Array Array::from_data(Shape shape, std::vector<real> data) {
  if (shape_numel(shape) != data.size())
    throw ShapeError("from_data: shape " + shape_str(shape) + " does not hold " +
                     std::to_string(data.size()) + " elements");
  Array a = uninit(std::move(shape));
  std::copy(data.begin(), data.end(), a.data_.get());
  return a;
}

Array Array::reshaped(Shape shape) const {
  if (shape_numel(shape) != size())
    throw ShapeError("reshape: " + shape_str(shape_) + " -> " + shape_str(shape) +
                     " changes element count");
  Array a;
  a.shape_ = std::move(shape);
  a.data_ = data_;
  a.n_ = n_;
  return a;
}

bool Array::all_finite() const {
  for (std::size_t i = 0; i < n_; ++i)
    if (!std::isfinite(data_[i])) return false;
  return true;
}

// ---- broadcasting ----

Shape broadcast_shape(const Shape& a, const Shape& b, const char* ctx) {
  const std::size_t ra = a.size(), rb = b.size();
  const std::size_t r = std::max(ra, rb);
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - ra ? 1 : a[i - (r - ra)];
    const std::size_t db = i < r - rb ? 1 : b[i - (r - rb)];
    if (da != db && da != 1 && db != 1)
      throw ShapeError(std::string(ctx) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                       " do not broadcast");
    out[i] = std::max(da, db);
  }
  return out;
}

namespace {

// How an operand's flat index maps onto the output's flat index.
enum class IndexMap { Same, ModBlock, DivBlock, Odometer };

struct MapSpec {
  IndexMap kind = IndexMap::Odometer;
  std::size_t block = 1;
};

// Classifies operand shape `s` against output shape `out`:
//   Same      identical extents
//   ModBlock  s is a contiguous suffix block repeated over leading axes
//   DivBlock  s matches out except trailing axes of extent 1
MapSpec classify(const Shape& s, const Shape& out) {
  if (s == out) return {IndexMap::Same, 0};
  const std::size_t rs = s.size(), ro = out.size();
  // suffix block: trailing axes equal out's, every remaining leading axis is 1
  std::size_t k = 0, block = 1;
  while (k < rs && s[rs - 1 - k] == out[ro - 1 - k]) {
    block *= s[rs - 1 - k];
    ++k;
  }
  bool lead_ones = true;
  for (std::size_t j = 0; j + k < rs; ++j)
    if (s[j] != 1) {
      lead_ones = false;
      break;
    }
  if (lead_ones && block == shape_numel(s)) return {IndexMap::ModBlock, block};
  // reduced block: prefix matches, trailing axes of s are all 1
  if (rs == ro) {
    std::size_t split = ro;
    while (split > 0 && s[split - 1] == 1) --split;
    bool ok = split < ro;
    for (std::size_t i = 0; i < split && ok; ++i)
      if (s[i] != out[i]) ok = false;
    if (ok) {
      std::size_t b = 1;
      for (std::size_t i = split; i < ro; ++i) b *= out[i];
      return {IndexMap::DivBlock, b};
    }
  }
  return {IndexMap::Odometer, 0};
}

template <IndexMap KA, IndexMap KB, typename F>
void ew_mapped_loop(const real* pa, const real* pb, real* po, std::size_t n, std::size_t ba,
                    std::size_t bb, F f) {
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t ia = i, ib = i;
    if constexpr (KA == IndexMap::ModBlock) ia = i % ba;
    if constexpr (KA == IndexMap::DivBlock) ia = i / ba;
    if constexpr (KB == IndexMap::ModBlock) ib = i % bb;
    if constexpr (KB == IndexMap::DivBlock) ib = i / bb;
    po[i] = f(pa[ia], pb[ib]);
  }
}

// Strides with 0 on broadcast axes, aligned right against `out`.
std::vector<std::size_t> bcast_strides(const Shape& s, const Shape& out) {
  const std::size_t r = out.size(), rs = s.size();
  std::vector<std::size_t> st(r, 0);
  std::size_t acc = 1;
  for (std::size_t i = 0; i < rs; ++i) {
    const std::size_t ax = rs - 1 - i;
    st[r - 1 - i] = (s[ax] == 1) ? 0 : acc;
    acc *= s[ax];
  }
  return st;
}

template <typename F>
Array ew_generic(const Array& a, const Array& b, F f, const char* ctx) {
  const Shape os = broadcast_shape(a.shape(), b.shape(), ctx);
  Array out = Array::uninit(os);
  const real* pa = a.data();
  const real* pb = b.data();
  real* po = out.mutable_data();
  const std::size_t n = out.size();

  const MapSpec ma = classify(a.shape(), os);
  const MapSpec mb = classify(b.shape(), os);
  if (ma.kind != IndexMap::Odometer && mb.kind != IndexMap::Odometer) {
    auto dispatch_b = [&](auto ka_tag) {
      constexpr IndexMap KA = decltype(ka_tag)::value;
      switch (mb.kind) {
        case IndexMap::Same:
          ew_mapped_loop<KA, IndexMap::Same>(pa, pb, po, n, ma.block, mb.block, f);
          break;
        case IndexMap::ModBlock:
          ew_mapped_loop<KA, IndexMap::ModBlock>(pa, pb, po, n, ma.block, mb.block, f);
          break;
        case IndexMap::DivBlock:
          ew_mapped_loop<KA, IndexMap::DivBlock>(pa, pb, po, n, ma.block, mb.block, f);
          break;
        default: break;
      }
    };
    switch (ma.kind) {
      case IndexMap::Same:
        dispatch_b(std::integral_constant<IndexMap, IndexMap::Same>{});
        break;
      case IndexMap::ModBlock:
        dispatch_b(std::integral_constant<IndexMap, IndexMap::ModBlock>{});
        break;
      case IndexMap::DivBlock:
        dispatch_b(std::integral_constant<IndexMap, IndexMap::DivBlock>{});
        break;
      default: break;
    }
    return out;
  }

  const auto sa = bcast_strides(a.shape(), os);
  const auto sb = bcast_strides(b.shape(), os);
  const std::size_t r = os.size();
  std::vector<std::size_t> idx(r, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t i = 0; i < n; ++i) {
    po[i] = f(pa[oa], pb[ob]);
    for (std::size_t dpos = r; dpos-- > 0;) {
      idx[dpos]++;
      oa += sa[dpos];
      ob += sb[dpos];
      if (idx[dpos] < os[dpos]) break;
      oa -= sa[dpos] * os[dpos];
      ob -= sb[dpos] * os[dpos];
      idx[dpos] = 0;
    }
  }
  return out;
}

using EArr = Eigen::Array<real, Eigen::Dynamic, 1>;
using EMap = Eigen::Map<EArr>;
using ECMap = Eigen::Map<const EArr>;

template <typename F>
Array map_unary(const Array& a, F f) {
  Array out = Array::uninit(a.shape());
  const real* pa = a.data();
  real* po = out.mutable_data();
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) po[i] = f(pa[i]);
  return out;
}

}  // namespace

Array ew_binary(const Array& a, const Array& b, Ew op) {
  switch (op) {
    case Ew::Add: return ew_generic(a, b, [](real x, real y) { return x + y; }, "add");
    case Ew::Sub: return ew_generic(a, b, [](real x, real y) { return x - y; }, "sub");
    case Ew::Mul: return ew_generic(a, b, [](real x, real y) { return x * y; }, "mul");
    case Ew::Div: return ew_generic(a, b, [](real x, real y) { return x / y; }, "div");
  }
  throw UsageError("ew_binary: bad op");
}

Array unbroadcast(const Array& v, const Shape& target) {
  if (v.shape() == target) return v;
  Array cur = v;
  // Collapse leading extra axes.
  while (cur.rank() > target.size()) {
    Array folded = cur.reshaped({cur.shape()[0], cur.size() / cur.shape()[0]});
    Array summed = Array::zeros({folded.shape()[1]});
    const real* p = folded.data();
    real* o = summed.mutable_data();
    for (std::size_t i = 0; i < folded.shape()[0]; ++i)
      for (std::size_t j = 0; j < folded.shape()[1]; ++j) o[j] += p[i * folded.shape()[1] + j];
    Shape rest(cur.shape().begin() + 1, cur.shape().end());
    cur = summed.reshaped(rest);
  }
  // Sum axes where target extent is 1.
  for (std::size_t ax = 0; ax < target.size(); ++ax) {
    if (target[ax] == 1 && cur.shape()[ax] != 1) {
      cur = sum_axis(cur, static_cast<int>(ax));
    }
  }
  if (cur.shape() != target) cur = cur.reshaped(target);
  return cur;
}

Array add(const Array& a, const Array& b) { return ew_binary(a, b, Ew::Add); }
Array sub(const Array& a, const Array& b) { return ew_binary(a, b, Ew::Sub); }
Array mul(const Array& a, const Array& b) { return ew_binary(a, b, Ew::Mul); }
Array div(const Array& a, const Array& b) { return ew_binary(a, b, Ew::Div); }

Array scale(const Array& a, real s) {
  return map_unary(a, [s](real x) { return x * s; });
}
Array add_scalar(const Array& a, real s) {
  return map_unary(a, [s](real x) { return x + s; });
}

Array add_scaled(const Array& a, const Array& b, real s) {
  if (a.shape() != b.shape()) throw ShapeError("add_scaled: shape mismatch");
  Array out = Array::uninit(a.shape());
  const real* pa = a.data();
  const real* pb = b.data();
  real* po = out.mutable_data();
  for (std::size_t i = 0; i < a.size(); ++i) po[i] = pa[i] + s * pb[i];
  return out;
}

Array matmul(const Array& a, const Array& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0])
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  Array out = Array::uninit({m, n});
  using Mat = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const Mat> ma(a.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
  Eigen::Map<const Mat> mb(b.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
  Eigen::Map<Mat> mo(out.mutable_data(), static_cast<Eigen::Index>(m),
                     static_cast<Eigen::Index>(n));
  mo.noalias() = ma * mb;
  return out;
}

namespace {
inline ECMap emap(const Array& a) {
  return ECMap(a.data(), static_cast<Eigen::Index>(a.size()));
}
inline EMap emap(Array& a) { return EMap(a.mutable_data(), static_cast<Eigen::Index>(a.size())); }
}  // namespace

Array exp(const Array& a) {
  Array o = Array::uninit(a.shape());
  emap(o) = emap(a).exp();
  return o;
}
Array log(const Array& a) {
  Array o = Array::uninit(a.shape());
  emap(o) = emap(a).log();
  return o;
}
Array sqrt(const Array& a) {
  Array o = Array::uninit(a.shape());
  emap(o) = emap(a).sqrt();
  return o;
}
Array pow(const Array& a, real p) {
  Array o = Array::uninit(a.shape());
  emap(o) = emap(a).pow(p);
  return o;
}
Array sigmoid(const Array& a) {
  Array o = Array::uninit(a.shape());
  emap(o) = real(1) / (real(1) + (-emap(a)).exp());
  return o;
}
Array swish(const Array& a) {
  Array o = Array::uninit(a.shape());
  emap(o) = emap(a) / (real(1) + (-emap(a)).exp());
  return o;
}
Array max_const(const Array& a, real c) {
  Array o = Array::uninit(a.shape());
  emap(o) = emap(a).max(c);
  return o;
}
Array sin(const Array& a) {
  Array o = Array::uninit(a.shape());
  emap(o) = emap(a).sin();
  return o;
}
Array cos(const Array& a) {
  Array o = Array::uninit(a.shape());
  emap(o) = emap(a).cos();
  return o;
}

real sum(const Array& a) {
  real acc = 0;
  const real* p = a.data();
  for (std::size_t i = 0; i < a.size(); ++i) acc += p[i];
  return acc;
}
real mean(const Array& a) { return sum(a) / static_cast<real>(a.size()); }
real dot(const Array& a, const Array& b) {
  if (a.size() != b.size()) throw ShapeError("dot: size mismatch");
  real acc = 0;
  const real* pa = a.data();
  const real* pb = b.data();
  for (std::size_t i = 0; i < a.size(); ++i) acc += pa[i] * pb[i];
  return acc;
}
real l2norm(const Array& a) { return std::sqrt(dot(a, a)); }
real max_abs(const Array& a) {
  real m = 0;
  const real* p = a.data();
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(p[i]));
  return m;
}

namespace {
// Decompose shape around `axis` into (outer, n, inner) so flat index =
// (o * n + j) * inner + i.
void axis_split(const Shape& s, int axis, std::size_t& outer, std::size_t& n,
                std::size_t& inner) {
  if (axis < 0 || static_cast<std::size_t>(axis) >= s.size())
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}
}  // namespace

Array sum_axis(const Array& a, int axis) {
  std::size_t outer, n, inner;
  axis_split(a.shape(), axis, outer, n, inner);
  Shape os = a.shape();
  os[axis] = 1;
  Array out = Array::zeros(os);
  const real* p = a.data();
  real* o = out.mutable_data();
  for (std::size_t ou = 0; ou < outer; ++ou)
    for (std::size_t j = 0; j < n; ++j) {
      const real* row = p + (ou * n + j) * inner;
      real* orow = o + ou * inner;
      for (std::size_t i = 0; i < inner; ++i) orow[i] += row[i];
    }
  return out;
}

Array mean_axis(const Array& a, int axis) {
  Array s = sum_axis(a, axis);
  return scale(s, real(1) / static_cast<real>(a.shape()[axis]));
}

Array broadcast_to(const Array& a, const Shape& shape) {
  const Shape check = broadcast_shape(a.shape(), shape, "broadcast_to");
  if (check != shape)
    throw ShapeError("broadcast_to: " + shape_str(a.shape()) + " does not broadcast to " +
                     shape_str(shape));
  return ew_generic(a, Array::zeros(shape), [](real x, real) { return x; }, "broadcast_to");
}

Array concat(const std::vector<Array>& parts, int axis) {
  if (parts.empty()) throw UsageError("concat: no inputs");
  Shape os = parts[0].shape();
  std::size_t total = 0;
  for (const Array& p : parts) {
    Shape s = p.shape();
    if (s.size() != os.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (static_cast<int>(i) != axis && s[i] != os[i])
        throw ShapeError("concat: extent mismatch at axis " + std::to_string(i));
    total += s[axis];
  }
  os[axis] = total;
  Array out = Array::uninit(os);
  std::size_t outer, n, inner;
  axis_split(os, axis, outer, n, inner);
  real* o = out.mutable_data();
  std::size_t off = 0;
  for (const Array& part : parts) {
    const std::size_t pn = part.shape()[axis];
    const real* p = part.data();
    for (std::size_t ou = 0; ou < outer; ++ou)
      std::memcpy(o + (ou * n + off) * inner, p + ou * pn * inner, pn * inner * sizeof(real));
    off += pn;
  }
  return out;
}

Array slice(const Array& a, int axis, std::size_t start, std::size_t len) {
  std::size_t outer, n, inner;
  axis_split(a.shape(), axis, outer, n, inner);
  if (start + len > n)
    throw ShapeError("slice: [" + std::to_string(start) + ", " + std::to_string(start + len) +
                     ") exceeds extent " + std::to_string(n));
  Shape os = a.shape();
  os[axis] = len;
  Array out = Array::uninit(os);
  const real* p = a.data();
  real* o = out.mutable_data();
  for (std::size_t ou = 0; ou < outer; ++ou)
    std::memcpy(o + ou * len * inner, p + (ou * n + start) * inner, len * inner * sizeof(real));
  return out;
}

Array flip(const Array& a, int axis) {
  std::size_t outer, n, inner;
  axis_split(a.shape(), axis, outer, n, inner);
  Array out = Array::uninit(a.shape());
  const real* p = a.data();
  real* o = out.mutable_data();
  for (std::size_t ou = 0; ou < outer; ++ou)
    for (std::size_t j = 0; j < n; ++j)
      std::memcpy(o + (ou * n + (n - 1 - j)) * inner, p + (ou * n + j) * inner,
                  inner * sizeof(real));
  return out;
}

Array l2norm_last(const Array& a) {
  if (a.rank() == 0) throw ShapeError("l2norm_last: rank-0 input");
  const std::size_t d = a.shape().back();
  const std::size_t rows = a.size() / d;
  Shape os = a.shape();
  os.back() = 1;
  Array out = Array::uninit(os);
  const real* p = a.data();
  real* o = out.mutable_data();
  for (std::size_t r = 0; r < rows; ++r) {
    real acc = 0;
    for (std::size_t i = 0; i < d; ++i) acc += p[r * d + i] * p[r * d + i];
    o[r] = std::sqrt(acc);
  }
  return out;
}

Array layernorm_last(const Array& a, real eps) {
  if (a.rank() == 0) throw ShapeError("layernorm_last: rank-0 input");
  const std::size_t d = a.shape().back();
  const std::size_t rows = a.size() / d;
  Array out = Array::uninit(a.shape());
  const real* p = a.data();
  real* o = out.mutable_data();
  for (std::size_t r = 0; r < rows; ++r) {
    const real* row = p + r * d;
    real m = 0;
    for (std::size_t i = 0; i < d; ++i) m += row[i];
    m /= static_cast<real>(d);
    real v = 0;
    for (std::size_t i = 0; i < d; ++i) v += (row[i] - m) * (row[i] - m);
    v /= static_cast<real>(d);
    const real inv = real(1) / std::sqrt(v + eps);
    for (std::size_t i = 0; i < d; ++i) o[r * d + i] = (row[i] - m) * inv;
  }
  return out;
}

}  // namespace ndg
