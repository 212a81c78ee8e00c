#include "ccm/optim.hpp"

#include <cmath>

#include "ccm/autograd.hpp"

namespace ccm {

template <class T>
void adam_step(BasicParameterSet<T>& params, AdamState& state) {
  for (const auto& [name, p] : params)
    if (p.has_grad() && !p.grad().all_finite())
      throw NumericError("non-finite gradient in parameter " + name);

  const auto& c = state.cfg;
  ++state.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (const auto& [name, p] : params) {
    if (!p.has_grad()) continue;
    auto& m = state.m.try_emplace(name, Tensor64(p.shape())).first->second;
    auto& v = state.v.try_emplace(name, Tensor64(p.shape())).first->second;
    if (m.shape() != p.shape()) throw StructuralError("optimizer state shape mismatch for " + name);
    const T* g = p.grad().ptr();
    T* w = p.node()->value.ptr();
    for (int64_t i = 0; i < p.numel(); ++i) {
      const double gi = g[i];
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
      const double mh = m[i] / bc1, vh = v[i] / bc2;
      w[i] = static_cast<T>(w[i] - c.lr * mh / (std::sqrt(vh) + c.eps));
    }
  }
}

template <class T>
void ema_update(BasicParameterSet<T>& teacher, const BasicParameterSet<T>& student, double mu) {
  if (!(mu >= 0.0 && mu <= 1.0)) throw ConfigError("EMA rate must lie in [0, 1]");
  if (teacher.size() != student.size())
    throw StructuralError("EMA: teacher and student have different parameter counts");
  for (const auto& [name, tv] : teacher) {
    if (!student.contains(name)) throw StructuralError("EMA: student lacks parameter " + name);
    const auto& sv = student.at(name);
    if (sv.shape() != tv.shape()) throw StructuralError("EMA: shape mismatch for " + name);
    T* t = tv.node()->value.ptr();
    const T* s = sv.value().ptr();
    for (int64_t i = 0; i < tv.numel(); ++i)
      t[i] = static_cast<T>(std::lerp(static_cast<double>(t[i]), static_cast<double>(s[i]), 1.0 - mu));
  }
}

double optimize_step(ParameterSet& params, AdamState& state, const std::function<Var()>& loss,
                     std::span<const ParameterSet* const> frozen) {
  params.zero_grad();
  auto l = loss();
  const double v = l.value()[0];
  if (!std::isfinite(v)) throw NumericError("non-finite training loss");
  backward(l);
  for (const auto* f : frozen) require_no_grad(*f, "frozen parameters");
  adam_step(params, state);
  return v;
}

template void adam_step(BasicParameterSet<float>&, AdamState&);
template void adam_step(BasicParameterSet<double>&, AdamState&);
template void ema_update(BasicParameterSet<float>&, const BasicParameterSet<float>&, double);
template void ema_update(BasicParameterSet<double>&, const BasicParameterSet<double>&, double);

}  // namespace ccm
