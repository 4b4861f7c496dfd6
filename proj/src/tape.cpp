#include "ndg/tape.hpp"

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <cstring>

namespace ndg {

const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Const: return "const";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Div: return "div";
    case OpKind::AddC: return "add_const";
    case OpKind::MulC: return "mul_const";
    case OpKind::Matmul: return "matmul";
    case OpKind::Exp: return "exp";
    case OpKind::Log: return "log";
    case OpKind::Sqrt: return "sqrt";
    case OpKind::Pow: return "pow";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Swish: return "swish";
    case OpKind::MaxC: return "max_const";
    case OpKind::Sin: return "sin";
    case OpKind::Cos: return "cos";
    case OpKind::SumAll: return "sum_all";
    case OpKind::MeanAll: return "mean_all";
    case OpKind::SumAxis: return "sum_axis";
    case OpKind::MeanAxis: return "mean_axis";
    case OpKind::BroadcastTo: return "broadcast_to";
    case OpKind::Concat: return "concat";
    case OpKind::Slice: return "slice";
    case OpKind::L2NormLast: return "l2norm_last";
    case OpKind::LayerNormLast: return "layernorm_last";
    case OpKind::StopGrad: return "stop_gradient";
    case OpKind::Reshape: return "reshape";
    case OpKind::Flip: return "flip";
  }
  return "?";
}

constexpr real kLayerNormEps = real(1e-6);

// ---- GradientMap ----

const Array& GradientMap::at(const std::string& name) const {
  auto it = grads_.find(name);
  if (it == grads_.end()) throw UsageError("GradientMap: no gradient for '" + name + "'");
  return it->second;
}

Array GradientMap::get_or_zeros(const std::string& name, const Shape& shape) const {
  auto it = grads_.find(name);
  if (it == grads_.end()) return Array::zeros(shape);
  return it->second;
}

void GradientMap::add_scaled_in_place(const GradientMap& other, real s) {
  for (const auto& [name, g] : other.grads_) {
    auto it = grads_.find(name);
    if (it == grads_.end())
      grads_[name] = scale(g, s);
    else
      it->second = add_scaled(it->second, g, s);
  }
}

void GradientMap::scale_in_place(real s) {
  for (auto& [name, g] : grads_) g = scale(g, s);
}

bool GradientMap::all_finite() const {
  for (const auto& [name, g] : grads_)
    if (!g.all_finite()) return false;
  return true;
}

// ---- Var ----

const Array& Var::value() const {
  if (!tape_) throw UsageError("Var: using an unbound handle");
  return tape_->node(id_).value;
}

// ---- Tape ----

Var Tape::leaf(const std::string& name, Array value) {
  Node n;
  n.kind = OpKind::Leaf;
  n.value = std::move(value);
  n.needs_grad = true;
  n.label = name;
  nodes_.push_back(std::move(n));
  const int id = static_cast<int>(nodes_.size()) - 1;
  leaves_.emplace_back(name, id);
  return Var(this, id);
}

Var Tape::constant(Array value) {
  Node n;
  n.kind = OpKind::Const;
  n.value = std::move(value);
  n.needs_grad = false;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

void Tape::set_leaf(const std::string& name, Array value) {
  for (auto& [lname, id] : leaves_) {
    if (lname == name) {
      if (value.shape() != nodes_[id].value.shape())
        throw ShapeError("set_leaf '" + name + "': shape " + shape_str(value.shape()) +
                         " != " + shape_str(nodes_[id].value.shape()));
      nodes_[id].value = std::move(value);
      return;
    }
  }
  throw UsageError("set_leaf: no leaf named '" + name + "'");
}

void Tape::replay() {
  for (auto& n : nodes_) {
    if (n.kind == OpKind::Leaf || n.kind == OpKind::Const) continue;
    n.value = eval_node(n);
  }
}

int Tape::first_nonfinite_node() const {
  for (std::size_t i = 0; i < nodes_.size(); ++i)
    if (!nodes_[i].value.all_finite()) return static_cast<int>(i);
  return -1;
}

Var Tape::record(OpKind kind, std::vector<int> inputs, Attrs attrs) {
  Node n;
  n.kind = kind;
  n.inputs = std::move(inputs);
  n.attrs = std::move(attrs);
  for (int in : n.inputs) {
    if (in < 0 || in >= static_cast<int>(nodes_.size()))
      throw UsageError(std::string("record ") + op_name(kind) + ": input off tape");
    if (nodes_[in].needs_grad) n.needs_grad = true;
  }
  if (kind == OpKind::StopGrad) n.needs_grad = false;
  n.value = eval_node(n);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Array Tape::eval_node(const Node& n) const {
  auto in = [&](std::size_t i) -> const Array& { return nodes_[n.inputs[i]].value; };
  switch (n.kind) {
    case OpKind::Leaf:
    case OpKind::Const: return n.value;
    case OpKind::Add: return ndg::add(in(0), in(1));
    case OpKind::Sub: return ndg::sub(in(0), in(1));
    case OpKind::Mul: return ndg::mul(in(0), in(1));
    case OpKind::Div: return ndg::div(in(0), in(1));
    case OpKind::AddC: return ndg::add_scalar(in(0), n.attrs.scalar);
    case OpKind::MulC: return ndg::scale(in(0), n.attrs.scalar);
    case OpKind::Matmul: return ndg::matmul(in(0), in(1));
    case OpKind::Exp: return ndg::exp(in(0));
    case OpKind::Log: return ndg::log(in(0));
    case OpKind::Sqrt: return ndg::sqrt(in(0));
    case OpKind::Pow: return ndg::pow(in(0), n.attrs.scalar);
    case OpKind::Sigmoid: return ndg::sigmoid(in(0));
    case OpKind::Swish: return ndg::swish(in(0));
    case OpKind::MaxC: return ndg::max_const(in(0), n.attrs.scalar);
    case OpKind::Sin: return ndg::sin(in(0));
    case OpKind::Cos: return ndg::cos(in(0));
    case OpKind::SumAll: return Array::scalar(ndg::sum(in(0)));
    case OpKind::MeanAll: return Array::scalar(ndg::mean(in(0)));
    case OpKind::SumAxis: return ndg::sum_axis(in(0), n.attrs.axis);
    case OpKind::MeanAxis: return ndg::mean_axis(in(0), n.attrs.axis);
    case OpKind::BroadcastTo: return ndg::broadcast_to(in(0), n.attrs.shape);
    case OpKind::Concat: {
      std::vector<Array> parts;
      parts.reserve(n.inputs.size());
      for (std::size_t i = 0; i < n.inputs.size(); ++i) parts.push_back(in(i));
      return ndg::concat(parts, n.attrs.axis);
    }
    case OpKind::Slice: return ndg::slice(in(0), n.attrs.axis, n.attrs.start, n.attrs.len);
    case OpKind::L2NormLast: return ndg::l2norm_last(in(0));
    case OpKind::LayerNormLast: return ndg::layernorm_last(in(0), kLayerNormEps);
    case OpKind::StopGrad: return in(0);
    case OpKind::Reshape: return in(0).reshaped(n.attrs.shape);
    case OpKind::Flip: return ndg::flip(in(0), n.attrs.axis);
  }
  throw UsageError("eval_node: bad op");
}

// ---- backward ----

namespace {

std::array<bool, 32>& vjp_flip_flags() {
  static std::array<bool, 32> flags{};
  return flags;
}

// Accumulator for per-node cotangents.
struct Cots {
  std::vector<Array> c;
  explicit Cots(std::size_t n) : c(n) {}
  void accum(int id, const Array& g) {
    if (!c[id].defined())
      c[id] = g;
    else
      c[id] = ndg::add(c[id], g);
  }
};

}  // namespace

namespace testing {
void set_vjp_sign_flip(OpKind kind, bool enabled) {
  vjp_flip_flags()[static_cast<std::size_t>(kind)] = enabled;
}
void clear_vjp_sign_flips() { vjp_flip_flags().fill(false); }
}  // namespace testing

GradientMap Tape::backward(const Var& out, const Array& cotangent) const {
  if (out.tape() != this || out.id() < 0 || out.id() >= static_cast<int>(nodes_.size()))
    throw UsageError("backward: output is not on this tape");
  if (cotangent.shape() != nodes_[out.id()].value.shape())
    throw ShapeError("backward: cotangent shape " + shape_str(cotangent.shape()) +
                     " != output shape " + shape_str(nodes_[out.id()].value.shape()));

  Cots cots(nodes_.size());
  cots.c[out.id()] = cotangent;

  for (int id = out.id(); id >= 0; --id) {
    const Node& n = nodes_[id];
    if (!n.needs_grad || !cots.c[id].defined()) continue;
    Array cot = cots.c[id];
    if (vjp_flip_flags()[static_cast<std::size_t>(n.kind)]) cot = ndg::scale(cot, real(-1));
    auto in_val = [&](std::size_t i) -> const Array& { return nodes_[n.inputs[i]].value; };
    auto push = [&](std::size_t i, Array g) {
      const int src = n.inputs[i];
      if (!nodes_[src].needs_grad) return;
      cots.accum(src, unbroadcast(g, nodes_[src].value.shape()));
    };
    switch (n.kind) {
      case OpKind::Leaf:
      case OpKind::Const:
      case OpKind::StopGrad: break;
      case OpKind::Add:
        push(0, cot);
        push(1, cot);
        break;
      case OpKind::Sub:
        push(0, cot);
        push(1, ndg::scale(cot, real(-1)));
        break;
      case OpKind::Mul:
        push(0, ndg::mul(cot, in_val(1)));
        push(1, ndg::mul(cot, in_val(0)));
        break;
      case OpKind::Div: {
        push(0, ndg::div(cot, in_val(1)));
        Array b2 = ndg::mul(in_val(1), in_val(1));
        push(1, ndg::scale(ndg::div(ndg::mul(cot, in_val(0)), b2), real(-1)));
        break;
      }
      case OpKind::AddC: push(0, cot); break;
      case OpKind::MulC: push(0, ndg::scale(cot, n.attrs.scalar)); break;
      case OpKind::Matmul: {
        // dA = cot * B^T, dB = A^T * cot
        const Array& A = in_val(0);
        const Array& B = in_val(1);
        const auto m = static_cast<Eigen::Index>(A.shape()[0]);
        const auto k = static_cast<Eigen::Index>(A.shape()[1]);
        const auto nn = static_cast<Eigen::Index>(B.shape()[1]);
        using Mat = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
        Eigen::Map<const Mat> mc(cot.data(), m, nn);
        if (nodes_[n.inputs[0]].needs_grad) {
          Array ga = Array::uninit(A.shape());
          Eigen::Map<const Mat> mb(B.data(), k, nn);
          Eigen::Map<Mat> g(ga.mutable_data(), m, k);
          g.noalias() = mc * mb.transpose();
          push(0, std::move(ga));
        }
        if (nodes_[n.inputs[1]].needs_grad) {
          Array gb = Array::uninit(B.shape());
          Eigen::Map<const Mat> ma(A.data(), m, k);
          Eigen::Map<Mat> g(gb.mutable_data(), k, nn);
          g.noalias() = ma.transpose() * mc;
          push(1, std::move(gb));
        }
        break;
      }
      case OpKind::Exp: push(0, ndg::mul(cot, n.value)); break;
      case OpKind::Log: push(0, ndg::div(cot, in_val(0))); break;
      case OpKind::Sqrt: {
        Array g = ndg::div(cot, n.value);
        push(0, ndg::scale(g, real(0.5)));
        break;
      }
      case OpKind::Pow: {
        Array g = ndg::mul(cot, ndg::pow(in_val(0), n.attrs.scalar - 1));
        push(0, ndg::scale(g, n.attrs.scalar));
        break;
      }
      case OpKind::Sigmoid: {
        // s(1-s) from the stored output
        const Array& s = n.value;
        Array g = Array::uninit(s.shape());
        const real* ps = s.data();
        const real* pc = cot.data();
        real* pg = g.mutable_data();
        for (std::size_t i = 0; i < s.size(); ++i) pg[i] = pc[i] * ps[i] * (real(1) - ps[i]);
        push(0, std::move(g));
        break;
      }
      case OpKind::Swish: {
        // d swish = s + y*(1-s) with s = sigmoid(x), y the stored output
        const Array& x = in_val(0);
        const Array& y = n.value;
        Array g = Array::uninit(x.shape());
        using EA = Eigen::Array<real, Eigen::Dynamic, 1>;
        const auto sz = static_cast<Eigen::Index>(x.size());
        Eigen::Map<const EA> mx(x.data(), sz), my(y.data(), sz), mc(cot.data(), sz);
        Eigen::Map<EA> mg(g.mutable_data(), sz);
        EA s = real(1) / (real(1) + (-mx).exp());
        mg = mc * (s + my * (real(1) - s));
        push(0, std::move(g));
        break;
      }
      case OpKind::MaxC: {
        const Array& x = in_val(0);
        Array g = Array::uninit(x.shape());
        const real* px = x.data();
        const real* pc = cot.data();
        real* pg = g.mutable_data();
        for (std::size_t i = 0; i < x.size(); ++i)
          pg[i] = px[i] > n.attrs.scalar ? pc[i] : real(0);
        push(0, g);
        break;
      }
      case OpKind::Sin: push(0, ndg::mul(cot, ndg::cos(in_val(0)))); break;
      case OpKind::Cos: push(0, ndg::scale(ndg::mul(cot, ndg::sin(in_val(0))), real(-1))); break;
      case OpKind::SumAll: push(0, ndg::broadcast_to(cot, in_val(0).shape())); break;
      case OpKind::MeanAll: {
        Array g = ndg::scale(cot, real(1) / static_cast<real>(in_val(0).size()));
        push(0, ndg::broadcast_to(g, in_val(0).shape()));
        break;
      }
      case OpKind::SumAxis: push(0, ndg::broadcast_to(cot, in_val(0).shape())); break;
      case OpKind::MeanAxis: {
        Array g = ndg::scale(cot, real(1) / static_cast<real>(in_val(0).shape()[n.attrs.axis]));
        push(0, ndg::broadcast_to(g, in_val(0).shape()));
        break;
      }
      case OpKind::BroadcastTo: push(0, cot); break;  // push() unbroadcasts
      case OpKind::Concat: {
        std::size_t off = 0;
        for (std::size_t i = 0; i < n.inputs.size(); ++i) {
          const std::size_t len = in_val(i).shape()[n.attrs.axis];
          push(i, ndg::slice(cot, n.attrs.axis, off, len));
          off += len;
        }
        break;
      }
      case OpKind::Slice: {
        const Array& x = in_val(0);
        Array g = Array::zeros(x.shape());
        // scatter cot back into the sliced range
        std::size_t outer = 1, inner = 1;
        const Shape& s = x.shape();
        for (int i = 0; i < n.attrs.axis; ++i) outer *= s[i];
        for (std::size_t i = n.attrs.axis + 1; i < s.size(); ++i) inner *= s[i];
        const std::size_t nax = s[n.attrs.axis];
        const real* pc = cot.data();
        real* pg = g.mutable_data();
        for (std::size_t ou = 0; ou < outer; ++ou)
          std::memcpy(pg + (ou * nax + n.attrs.start) * inner, pc + ou * n.attrs.len * inner,
                      n.attrs.len * inner * sizeof(real));
        push(0, g);
        break;
      }
      case OpKind::L2NormLast: {
        // d||x|| = x / ||x||; zero where the norm vanishes.
        const Array& x = in_val(0);
        const std::size_t d = x.shape().back();
        const std::size_t rows = x.size() / d;
        Array g = Array::uninit(x.shape());
        const real* px = x.data();
        const real* pn = n.value.data();
        const real* pc = cot.data();
        real* pg = g.mutable_data();
        for (std::size_t r = 0; r < rows; ++r) {
          const real nv = pn[r];
          const real cv = pc[r];
          for (std::size_t i = 0; i < d; ++i)
            pg[r * d + i] = nv > 0 ? cv * px[r * d + i] / nv : real(0);
        }
        push(0, g);
        break;
      }
      case OpKind::LayerNormLast: {
        // dx = (cot - mean(cot) - y * mean(cot * y)) / sqrt(var + eps)
        const Array& x = in_val(0);
        const Array& y = n.value;
        const std::size_t d = x.shape().back();
        const std::size_t rows = x.size() / d;
        Array g = Array::uninit(x.shape());
        const real* px = x.data();
        const real* py = y.data();
        const real* pc = cot.data();
        real* pg = g.mutable_data();
        for (std::size_t r = 0; r < rows; ++r) {
          const real* xr = px + r * d;
          const real* yr = py + r * d;
          const real* cr = pc + r * d;
          real m = 0, v = 0, cm = 0, cym = 0;
          for (std::size_t i = 0; i < d; ++i) m += xr[i];
          m /= static_cast<real>(d);
          for (std::size_t i = 0; i < d; ++i) v += (xr[i] - m) * (xr[i] - m);
          v /= static_cast<real>(d);
          const real inv = real(1) / std::sqrt(v + kLayerNormEps);
          for (std::size_t i = 0; i < d; ++i) {
            cm += cr[i];
            cym += cr[i] * yr[i];
          }
          cm /= static_cast<real>(d);
          cym /= static_cast<real>(d);
          for (std::size_t i = 0; i < d; ++i)
            pg[r * d + i] = (cr[i] - cm - yr[i] * cym) * inv;
        }
        push(0, g);
        break;
      }
      case OpKind::Reshape: push(0, cot.reshaped(in_val(0).shape())); break;
      case OpKind::Flip: push(0, ndg::flip(cot, n.attrs.axis)); break;
    }
  }

  GradientMap out_map;
  for (const auto& [name, id] : leaves_)
    if (cots.c[id].defined()) out_map.set(name, cots.c[id]);
  return out_map;
}

GradientMap Tape::backward(const Var& out) const {
  return backward(out, Array::full(nodes_[out.id()].value.shape(), real(1)));
}

// ---- op wrappers ----

namespace {
Tape* same_tape(Var a, Var b, const char* ctx) {
  if (!a.defined() || !b.defined() || a.tape() != b.tape())
    throw UsageError(std::string(ctx) + ": operands from different tapes");
  return a.tape();
}
}  // namespace

Var add(Var a, Var b) { return same_tape(a, b, "add")->record(OpKind::Add, {a.id(), b.id()}, {}); }
Var sub(Var a, Var b) { return same_tape(a, b, "sub")->record(OpKind::Sub, {a.id(), b.id()}, {}); }
Var mul(Var a, Var b) { return same_tape(a, b, "mul")->record(OpKind::Mul, {a.id(), b.id()}, {}); }
Var div(Var a, Var b) { return same_tape(a, b, "div")->record(OpKind::Div, {a.id(), b.id()}, {}); }

Var add_const(Var a, real c) {
  Tape::Attrs at;
  at.scalar = c;
  return a.tape()->record(OpKind::AddC, {a.id()}, at);
}
Var mul_const(Var a, real c) {
  Tape::Attrs at;
  at.scalar = c;
  return a.tape()->record(OpKind::MulC, {a.id()}, at);
}
Var matmul(Var a, Var b) {
  return same_tape(a, b, "matmul")->record(OpKind::Matmul, {a.id(), b.id()}, {});
}
Var exp(Var a) { return a.tape()->record(OpKind::Exp, {a.id()}, {}); }
Var log(Var a) { return a.tape()->record(OpKind::Log, {a.id()}, {}); }
Var sqrt(Var a) { return a.tape()->record(OpKind::Sqrt, {a.id()}, {}); }
Var pow(Var a, real p) {
  Tape::Attrs at;
  at.scalar = p;
  return a.tape()->record(OpKind::Pow, {a.id()}, at);
}
Var sigmoid(Var a) { return a.tape()->record(OpKind::Sigmoid, {a.id()}, {}); }
Var swish(Var a) { return a.tape()->record(OpKind::Swish, {a.id()}, {}); }
Var max_const(Var a, real c) {
  Tape::Attrs at;
  at.scalar = c;
  return a.tape()->record(OpKind::MaxC, {a.id()}, at);
}
Var sin(Var a) { return a.tape()->record(OpKind::Sin, {a.id()}, {}); }
Var cos(Var a) { return a.tape()->record(OpKind::Cos, {a.id()}, {}); }
Var sum_all(Var a) { return a.tape()->record(OpKind::SumAll, {a.id()}, {}); }
Var mean_all(Var a) { return a.tape()->record(OpKind::MeanAll, {a.id()}, {}); }
Var sum_axis(Var a, int axis) {
  Tape::Attrs at;
  at.axis = axis;
  return a.tape()->record(OpKind::SumAxis, {a.id()}, at);
}
Var mean_axis(Var a, int axis) {
  Tape::Attrs at;
  at.axis = axis;
  return a.tape()->record(OpKind::MeanAxis, {a.id()}, at);
}
Var broadcast_to(Var a, Shape shape) {
  Tape::Attrs at;
  at.shape = std::move(shape);
  return a.tape()->record(OpKind::BroadcastTo, {a.id()}, at);
}
Var concat(const std::vector<Var>& parts, int axis) {
  if (parts.empty()) throw UsageError("concat: no inputs");
  Tape::Attrs at;
  at.axis = axis;
  std::vector<int> ids;
  for (Var v : parts) {
    same_tape(parts[0], v, "concat");
    ids.push_back(v.id());
  }
  return parts[0].tape()->record(OpKind::Concat, std::move(ids), at);
}
Var slice(Var a, int axis, std::size_t start, std::size_t len) {
  Tape::Attrs at;
  at.axis = axis;
  at.start = start;
  at.len = len;
  return a.tape()->record(OpKind::Slice, {a.id()}, at);
}
Var l2norm_last(Var a) { return a.tape()->record(OpKind::L2NormLast, {a.id()}, {}); }
Var layernorm_last(Var a) { return a.tape()->record(OpKind::LayerNormLast, {a.id()}, {}); }
Var stop_gradient(Var a) { return a.tape()->record(OpKind::StopGrad, {a.id()}, {}); }
Var reshape(Var a, Shape shape) {
  if (shape_numel(shape) != a.value().size())
    throw ShapeError("reshape: element count mismatch");
  Tape::Attrs at;
  at.shape = std::move(shape);
  return a.tape()->record(OpKind::Reshape, {a.id()}, at);
}
Var flip(Var a, int axis) {
  Tape::Attrs at;
  at.axis = axis;
  return a.tape()->record(OpKind::Flip, {a.id()}, at);
}

Var dot(Var a, Var b) { return sum_all(mul(a, b)); }

}  // namespace ndg
