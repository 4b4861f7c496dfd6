#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ndg/array.hpp"

namespace ndg {

class Tape;

enum class OpKind : std::uint8_t {
  Leaf,
  Const,
  Add,
  Sub,
  Mul,
  Div,
  AddC,
  MulC,
  Matmul,
  Exp,
  Log,
  Sqrt,
  Pow,
  Sigmoid,
  Swish,
  MaxC,
  Sin,
  Cos,
  SumAll,
  MeanAll,
  SumAxis,
  MeanAxis,
  BroadcastTo,
  Concat,
  Slice,
  L2NormLast,
  LayerNormLast,
  StopGrad,
  Reshape,
  Flip,
};

const char* op_name(OpKind k);

// Gradients keyed by leaf name; a missing key means zero gradient.
class GradientMap {
 public:
  using Map = std::map<std::string, Array>;

  bool contains(const std::string& name) const { return grads_.count(name) > 0; }
  const Array& at(const std::string& name) const;
  Array get_or_zeros(const std::string& name, const Shape& shape) const;
  void set(const std::string& name, Array g) { grads_[name] = std::move(g); }

  // this += s * other; iteration order is the key order, so merging is
  // deterministic regardless of who produced the operands.
  void add_scaled_in_place(const GradientMap& other, real s);
  void scale_in_place(real s);

  bool all_finite() const;
  Map::const_iterator begin() const { return grads_.begin(); }
  Map::const_iterator end() const { return grads_.end(); }
  std::size_t size() const { return grads_.size(); }

 private:
  Map grads_;
};

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}
  const Array& value() const;
  const Shape& shape() const { return value().shape(); }
  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool defined() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

// Define-by-run graph of op records. Confined to one thread. Values are
// computed eagerly as nodes are recorded; replay() recomputes every node from
// the current leaf values in recording order, bit-for-bit.
class Tape {
 public:
  struct Attrs {
    real scalar = 0;
    int axis = -1;
    std::size_t start = 0;
    std::size_t len = 0;
    Shape shape;
  };

  struct Node {
    OpKind kind;
    std::vector<int> inputs;
    Attrs attrs;
    Array value;
    bool needs_grad = false;
    std::string label;  // leaf name; empty for most interior nodes
  };

  Var leaf(const std::string& name, Array value);
  Var constant(Array value);
  Var constant(real value) { return constant(Array::scalar(value)); }

  std::size_t num_nodes() const { return nodes_.size(); }
  const Node& node(int id) const { return nodes_[id]; }

  // Reverse sweep from `out`, seeding with `cotangent` (shape must match).
  GradientMap backward(const Var& out, const Array& cotangent) const;
  // Scalar convenience: cotangent of ones.
  GradientMap backward(const Var& out) const;

  // Replaces a leaf value (shape-checked) for replay.
  void set_leaf(const std::string& name, Array value);
  const std::vector<std::pair<std::string, int>>& leaves() const { return leaves_; }
  // Recomputes every node value in order from current leaf/const values.
  void replay();
  // Index of the first node whose value is non-finite, or -1.
  int first_nonfinite_node() const;

  Var record(OpKind kind, std::vector<int> inputs, Attrs attrs);

 private:
  Array eval_node(const Node& n) const;
  friend class Var;
  std::vector<Node> nodes_;
  std::vector<std::pair<std::string, int>> leaves_;
};

// ---- taped ops ----

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var add_const(Var a, real c);
Var mul_const(Var a, real c);
Var matmul(Var a, Var b);
Var exp(Var a);
Var log(Var a);
Var sqrt(Var a);
Var pow(Var a, real p);
Var sigmoid(Var a);
Var swish(Var a);
Var max_const(Var a, real c);
Var sin(Var a);
Var cos(Var a);
Var sum_all(Var a);
Var mean_all(Var a);
Var sum_axis(Var a, int axis);
Var mean_axis(Var a, int axis);
Var broadcast_to(Var a, Shape shape);
Var concat(const std::vector<Var>& parts, int axis);
Var slice(Var a, int axis, std::size_t start, std::size_t len);
Var l2norm_last(Var a);
Var layernorm_last(Var a);  // epsilon 1e-6 inside the variance sqrt
Var stop_gradient(Var a);
Var reshape(Var a, Shape shape);
Var flip(Var a, int axis);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator+(Var a, real c) { return add_const(a, c); }
inline Var operator-(Var a, real c) { return add_const(a, -c); }
inline Var operator*(Var a, real c) { return mul_const(a, c); }
inline Var operator*(real c, Var a) { return mul_const(a, c); }

// sum(a * b) as a scalar node.
Var dot(Var a, Var b);

namespace testing {
// Flips the sign of the named op's VJP; negative control for gradient checks.
void set_vjp_sign_flip(OpKind kind, bool enabled);
void clear_vjp_sign_flips();
}  // namespace testing

}  // namespace ndg
