#include "ndg/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace ndg {

GradCheckResult check_gradient(const GradCheckCase& c, std::uint64_t seed) {
  GradCheckResult res;
  res.name = c.name;

  RngStream rng(seed);
  Tape tape;
  Var out = c.build(tape, rng);

  const int bad = tape.first_nonfinite_node();
  if (bad >= 0) {
    res.message = "non-finite forward value at node " + std::to_string(bad) + " (" +
                  op_name(tape.node(bad).kind) + ")";
    throw NumericError("check_gradient '" + c.name + "': " + res.message);
  }

  RngStream cot_rng = rng.fork("cotangent");
  const Array cot = cot_rng.normal_array(out.shape());
  const GradientMap grads = tape.backward(out, cot);

  RngStream probe_rng = rng.fork("probes");
  res.pass = true;
  for (const auto& [name, leaf_id] : tape.leaves()) {
    const Array base = tape.node(leaf_id).value;
    const Array g = grads.get_or_zeros(name, base.shape());
    const std::size_t n = base.size();
    std::vector<std::size_t> probes;
    if (n <= static_cast<std::size_t>(c.max_probes)) {
      for (std::size_t i = 0; i < n; ++i) probes.push_back(i);
    } else {
      for (int i = 0; i < c.max_probes; ++i)
        probes.push_back(static_cast<std::size_t>(probe_rng.next_u64() % n));
    }
    for (std::size_t idx : probes) {
      auto eval_at = [&](real delta) {
        std::vector<real> v = base.to_vector();
        v[idx] += delta;
        tape.set_leaf(name, Array::from_data(base.shape(), std::move(v)));
        tape.replay();
        return ndg::dot(cot, out.value());
      };
      const real plus = eval_at(c.step);
      const real minus = eval_at(-c.step);
      const real fd = (plus - minus) / (2 * c.step);
      const real ad = g.at(idx);
      const real err = std::abs(fd - ad) /
                       std::max({real(1), std::abs(fd), std::abs(ad)});
      if (err > res.max_rel_err) {
        res.max_rel_err = err;
        res.worst_leaf = name;
        res.worst_index = idx;
      }
    }
    tape.set_leaf(name, base);
  }
  tape.replay();
  res.pass = res.max_rel_err <= c.tol;
  if (!res.pass)
    res.message = "max err " + std::to_string(res.max_rel_err) + " at " + res.worst_leaf + "[" +
                  std::to_string(res.worst_index) + "], tol " + std::to_string(c.tol);
  return res;
}

std::vector<GradCheckResult> run_gradcheck_suite(const std::vector<GradCheckCase>& cases,
                                                 std::uint64_t seed) {
  std::vector<GradCheckResult> out;
  out.reserve(cases.size());
  for (const auto& c : cases) out.push_back(check_gradient(c, seed));
  return out;
}

}  // namespace ndg
