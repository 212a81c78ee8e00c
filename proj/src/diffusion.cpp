#include "ccm/diffusion.hpp"

#include <algorithm>
#include <cmath>

namespace ccm {

DmDraw draw_dm(const Batch& batch, const NoiseSchedule& s, double p_drop, int null_label, Rng& rng) {
  if (!(p_drop >= 0.0 && p_drop <= 1.0)) throw ConfigError("p_drop must lie in [0, 1]");
  DmDraw d;
  std::uniform_int_distribution<int> grid(1, s.N());
  std::bernoulli_distribution drop(p_drop);
  for (int64_t b = 0; b < batch.size(); ++b) {
    d.t.push_back(s.t(grid(rng)));
    const bool dropped = drop(rng);
    d.labels.push_back(dropped ? null_label : batch.labels[static_cast<size_t>(b)]);
  }
  d.eps = randn(batch.x.shape(), rng);
  return d;
}

Var dm_loss(const EpsFn& eps, const Batch& batch, const DmDraw& draw, const NoiseSchedule& s) {
  Var xt(sample_xt(s, batch.x, draw.t, draw.eps));
  return mse(eps(xt, draw.t, draw.labels), Var(draw.eps));
}

double dm_train_step(Backbone<float>& net, AdamState& opt, const Batch& batch,
                     const NoiseSchedule& s, double p_drop, Rng& rng) {
  const auto draw = draw_dm(batch, s, p_drop, net.num_classes(), rng);
  net.params().zero_grad();
  auto loss = dm_loss(eps_fn(net), batch, draw, s);
  const double v = loss.value()[0];
  if (!std::isfinite(v)) throw NumericError("non-finite diffusion loss");
  backward(loss);
  adam_step(net.params(), opt);
  return v;
}

Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_cond, double w) {
  if (eps_uncond.shape() != eps_cond.shape()) throw ShapeError("cfg_combine: shape mismatch");
  Tensor out(eps_cond.shape());
  // (1 - w) u + w c: exact at w = 0 and w = 1.
  for (int64_t i = 0; i < out.numel(); ++i)
    out[i] = static_cast<float>((1.0 - w) * eps_uncond[i] + w * eps_cond[i]);
  return out;
}

Tensor guided_eps(const EpsFn& eps, const Tensor& x, std::span<const int> t,
                  std::span<const int> labels, const GuidanceConfig& g) {
  NoGradGuard ng;
  const size_t nb = labels.size();
  std::vector<int> tt(t.begin(), t.end());
  if (tt.size() == 1) tt.assign(nb, tt[0]);
  if (g.w == 1.0) return eps(Var(x), tt, labels).value();
  std::vector<int> nulls(nb, g.null_label);
  if (g.w == 0.0) return eps(Var(x), tt, nulls).value();
  std::vector<int> t2(tt), y2(nulls);
  t2.insert(t2.end(), tt.begin(), tt.end());
  y2.insert(y2.end(), labels.begin(), labels.end());
  const Tensor both = eps(Var(concat0(x, x)), t2, y2).value();
  const auto n = static_cast<int64_t>(nb);
  return cfg_combine(both.slice0(0, n), both.slice0(n, 2 * n), g.w);
}

template <class T>
BasicTensor<T> ddim_step(const BasicTensor<T>& x_next, const BasicTensor<T>& eps_hat,
                         std::span<const int> t_next, std::span<const int> t_cur,
                         const NoiseSchedule& s, double x0_clip) {
  if (x_next.shape() != eps_hat.shape()) throw ShapeError("ddim_step: x and eps shapes differ");
  const int64_t nb = x_next.dim(0), inner = x_next.numel() / std::max<int64_t>(nb, 1);
  auto pick = [](std::span<const int> v, int64_t b) {
    return v[v.size() == 1 ? 0 : static_cast<size_t>(b)];
  };
  if ((t_next.size() != 1 && static_cast<int64_t>(t_next.size()) != nb) ||
      (t_cur.size() != 1 && static_cast<int64_t>(t_cur.size()) != nb))
    throw ShapeError("ddim_step: one timestep per sample required");
  BasicTensor<T> out(x_next.shape());
  for (int64_t b = 0; b < nb; ++b) {
    const int tn = pick(t_next, b), tc = pick(t_cur, b);
    if (tc > tn) throw RangeError("ddim_step: t_cur must not exceed t_next");
    const T* x = x_next.ptr() + b * inner;
    const T* e = eps_hat.ptr() + b * inner;
    T* o = out.ptr() + b * inner;
    if (tc == tn) {
      std::copy_n(x, inner, o);
      continue;
    }
    const double raw = s.sqrt_alpha_bar(tn);
    const double an = std::max(raw, kDdimFloor), cn = s.sqrt_one_minus(tn);
    const double ac = s.sqrt_alpha_bar(tc), cc = s.sqrt_one_minus(tc);
    // At the guard, x0 is eps-error / 1e-4 and would swamp the next state.
    const bool clip = x0_clip > 0.0 && raw < kDdimFloor;
    for (int64_t i = 0; i < inner; ++i) {
      double x0 = (x[i] - cn * e[i]) / an;
      if (clip) x0 = std::clamp(x0, -x0_clip, x0_clip);
      o[i] = static_cast<T>(ac * x0 + cc * e[i]);
    }
  }
  return out;
}

Tensor ddim_sample(const EpsFn& eps, const GuidanceConfig& g, const NoiseSchedule& s, int steps,
                   std::span<const int> labels, const Shape& sample_shape, Rng& rng) {
  auto ts = s.descending(steps);
  ts.push_back(0);
  Shape shape = sample_shape;
  shape.insert(shape.begin(), static_cast<int64_t>(labels.size()));
  Tensor x = randn(shape, rng);
  for (size_t i = 0; i + 1 < ts.size(); ++i) {
    const std::vector<int> tn{ts[i]}, tc{ts[i + 1]};
    const Tensor e = guided_eps(eps, x, tn, labels, g);
    x = ddim_step(x, e, tn, tc, s, kDataRange);
  }
  return x;
}

template Tensor ddim_step(const Tensor&, const Tensor&, std::span<const int>, std::span<const int>,
                          const NoiseSchedule&, double);
template Tensor64 ddim_step(const Tensor64&, const Tensor64&, std::span<const int>,
                            std::span<const int>, const NoiseSchedule&, double);

}  // namespace ccm
