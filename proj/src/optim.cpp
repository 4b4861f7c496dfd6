#include "sds/optim.hpp"

#include <cmath>

namespace sds {

std::size_t param_count(const ParamMap& p) {
  std::size_t n = 0;
  for (const auto& [name, a] : p) n += a.size();
  return n;
}

bool params_all_finite(const ParamMap& p) {
  for (const auto& [name, a] : p)
    if (!a.all_finite()) return false;
  return true;
}

std::map<std::string, ndg::Var> register_leaves(ndg::Tape& tape, const ParamMap& params) {
  std::map<std::string, ndg::Var> out;
  for (const auto& [name, a] : params) out.emplace(name, tape.leaf(name, a));
  return out;
}

void Adam::step(ParamMap& params, const ndg::GradientMap& grads, real lr) {
  ++t_;
  const real bc1 = real(1) - std::pow(cfg_.beta1, static_cast<real>(t_));
  const real bc2 = real(1) - std::pow(cfg_.beta2, static_cast<real>(t_));
  for (auto& [name, p] : params) {
    const Array g = grads.get_or_zeros(name, p.shape());
    auto mi = m_.find(name);
    if (mi == m_.end()) {
      m_[name] = Array::zeros(p.shape());
      v_[name] = Array::zeros(p.shape());
      mi = m_.find(name);
    }
    Array& m = mi->second;
    Array& v = v_[name];
    Array p_new = Array::uninit(p.shape());
    Array m_new = Array::uninit(p.shape());
    Array v_new = Array::uninit(p.shape());
    const real* pg = g.data();
    const real* pm = m.data();
    const real* pv = v.data();
    const real* pp = p.data();
    real* nm = m_new.mutable_data();
    real* nv = v_new.mutable_data();
    real* np = p_new.mutable_data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      nm[i] = cfg_.beta1 * pm[i] + (real(1) - cfg_.beta1) * pg[i];
      nv[i] = cfg_.beta2 * pv[i] + (real(1) - cfg_.beta2) * pg[i] * pg[i];
      const real mhat = nm[i] / bc1;
      const real vhat = nv[i] / bc2;
      np[i] = pp[i] - lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
    m = m_new;
    v = v_new;
    p = p_new;
  }
}

void Adam::restore(ParamMap m, ParamMap v, std::int64_t t) {
  m_ = std::move(m);
  v_ = std::move(v);
  t_ = t;
}

}  // namespace sds
