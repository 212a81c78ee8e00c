#include "ccm/consistency.hpp"

#include <cmath>

namespace ccm {

CmScalings cm_scalings(const NoiseSchedule& s, int t, double sigma_d) {
  if (t == 0) return {1.0, 0.0};
  // Multiplying through by ab keeps the terminal point (ab = 0) finite.
  const double ab = s.alpha_bar(t), one_m = 1.0 - ab, sd2 = sigma_d * sigma_d;
  const double den = one_m + sd2 * ab;
  return {sd2 * ab / den, sigma_d * std::sqrt(one_m) / std::sqrt(den)};
}

Var cm_combine(const NoiseSchedule& s, const Var& x, const Var& y, std::span<const int> t,
               double sigma_d) {
  if (x.shape() != y.shape()) throw ShapeError("cm_combine: shape mismatch");
  const int64_t nb = x.dim(0), inner = x.numel() / std::max<int64_t>(nb, 1);
  if (static_cast<int64_t>(t.size()) != nb) throw ShapeError("cm_combine: one timestep per sample");
  std::vector<float> a(static_cast<size_t>(nb)), b(static_cast<size_t>(nb));
  for (int64_t i = 0; i < nb; ++i) {
    const int ti = t[static_cast<size_t>(i)];
    if (!s.on_grid(ti)) throw RangeError("consistency function: t=" + std::to_string(ti) + " is off-grid");
    const auto c = cm_scalings(s, ti, sigma_d);
    a[static_cast<size_t>(i)] = static_cast<float>(c.skip);
    b[static_cast<size_t>(i)] = static_cast<float>(c.out);
  }
  Tensor out(x.shape());
  for (int64_t i = 0; i < nb; ++i) {
    const float ai = a[static_cast<size_t>(i)], bi = b[static_cast<size_t>(i)];
    const float* xp = x.value().ptr() + i * inner;
    const float* yp = y.value().ptr() + i * inner;
    float* o = out.ptr() + i * inner;
    if (bi == 0.0f) {
      for (int64_t j = 0; j < inner; ++j) o[j] = ai == 1.0f ? xp[j] : ai * xp[j];
    } else {
      for (int64_t j = 0; j < inner; ++j) o[j] = ai * xp[j] + bi * yp[j];
    }
  }
  return make_result<float>(std::move(out), {x.node(), y.node()},
                            [a, b, nb, inner](Node<float>& self) {
                              auto& xn = *self.inputs[0];
                              auto& yn = *self.inputs[1];
                              for (int64_t i = 0; i < nb; ++i) {
                                const float* g = self.grad.ptr() + i * inner;
                                if (xn.requires_grad) {
                                  float* gx = xn.grad_buffer().ptr() + i * inner;
                                  for (int64_t j = 0; j < inner; ++j) gx[j] += a[i] * g[j];
                                }
                                if (yn.requires_grad && b[i] != 0.0f) {
                                  float* gy = yn.grad_buffer().ptr() + i * inner;
                                  for (int64_t j = 0; j < inner; ++j) gy[j] += b[i] * g[j];
                                }
                              }
                            });
}

Var ConsistencyFunction::operator()(const Var& x, std::span<const int> t,
                                    std::span<const int> labels) const {
  for (int ti : t)
    if (!s_->on_grid(ti)) throw RangeError("consistency function: t=" + std::to_string(ti) + " is off-grid");
  if (s_->T() > 0 && static_cast<int64_t>(t.size()) == x.dim(0)) {
    bool all_boundary = true;
    for (int ti : t) all_boundary = all_boundary && ti == 0;
    // Nothing to evaluate: f(x, t_0) = x.
    if (all_boundary) return cm_combine(*s_, x, x, t, sigma_d_);
  }
  return cm_combine(*s_, x, net_(x, t, labels), t, sigma_d_);
}

double ConsistencyLoss::weight(int n) const {
  if (lambda.empty()) return 1.0;
  if (n < 0 || n >= static_cast<int>(lambda.size())) throw RangeError("lambda index out of range");
  const double w = lambda[static_cast<size_t>(n)];
  if (!(w > 0.0)) throw ConfigError("lambda(t_n) must be strictly positive");
  return w;
}

CtDraw draw_ct(const Tensor& x, const NoiseSchedule& s, Rng& rng) {
  CtDraw d;
  const int64_t nb = x.dim(0);
  for (int64_t b = 0; b < nb; ++b) {
    const int n = draw_n(rng, s.N());
    d.n.push_back(n);
    d.t_next.push_back(s.t(n + 1));
    d.t_cur.push_back(s.t(n));
  }
  d.eps = randn(x.shape(), rng);
  return d;
}

namespace {

Var weighted_distance(const Var& student_out, const Var& teacher_out, const CtDraw& draw,
                      const ConsistencyLoss& loss) {
  std::vector<float> w;
  for (int n : draw.n) w.push_back(static_cast<float>(loss.weight(n)));
  return weighted_mean<float>(distance_per_sample(student_out, teacher_out, loss.distance), w);
}

void check_draw(const Batch& batch, const CtDraw& draw) {
  if (static_cast<int64_t>(draw.n.size()) != batch.size() || draw.eps.shape() != batch.x.shape())
    throw ShapeError("consistency draw does not match the batch");
}

}  // namespace

Var ct_loss(const ConsistencyFunction& student, const ConsistencyFunction& teacher,
            const Batch& batch, const CtDraw& draw, const ConsistencyLoss& loss) {
  check_draw(batch, draw);
  const auto& s = student.schedule();
  Var x_next(sample_xt(s, batch.x, draw.t_next, draw.eps));
  Var x_cur(sample_xt(s, batch.x, draw.t_cur, draw.eps));
  auto out = student(x_next, draw.t_next, batch.labels);
  Var target;
  {
    NoGradGuard ng;
    target = detach(teacher(x_cur, draw.t_cur, batch.labels));
  }
  return weighted_distance(out, target, draw, loss);
}

Var cd_loss(const ConsistencyFunction& student, const ConsistencyFunction& teacher,
            const EpsFn& dm, const GuidanceConfig& g, const Batch& batch, const CtDraw& draw,
            const ConsistencyLoss& loss) {
  check_draw(batch, draw);
  const auto& s = student.schedule();
  const Tensor xn = sample_xt(s, batch.x, draw.t_next, draw.eps);
  auto out = student(Var(xn), draw.t_next, batch.labels);
  Var target;
  {
    NoGradGuard ng;
    const Tensor e = guided_eps(dm, xn, draw.t_next, batch.labels, g);
    const Tensor x_hat = ddim_step(xn, e, draw.t_next, draw.t_cur, s, kDataRange);
    target = detach(teacher(Var(x_hat), draw.t_cur, batch.labels));
  }
  return weighted_distance(out, target, draw, loss);
}

template <class T>
BasicTensor<T> score_estimate(const BasicTensor<T>& x, const BasicTensor<T>& xt, int t,
                              const NoiseSchedule& s) {
  if (x.shape() != xt.shape()) throw ShapeError("score_estimate: shape mismatch");
  const double one_m = s.sqrt_one_minus(t) * s.sqrt_one_minus(t);
  if (one_m == 0.0) throw NumericError("score_estimate: 1 - alpha_bar is zero at t=" + std::to_string(t));
  const double a = s.sqrt_alpha_bar(t);
  BasicTensor<T> out(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i)
    out[i] = static_cast<T>(-(static_cast<double>(xt[i]) - a * static_cast<double>(x[i])) / one_m);
  return out;
}

Tensor multistep_sample(const ConsistencyFunction& f, int nfes, std::span<const int> labels,
                        const Shape& sample_shape, Rng& rng) {
  const auto& s = f.schedule();
  const auto ts = s.descending(nfes);
  Shape shape = sample_shape;
  shape.insert(shape.begin(), static_cast<int64_t>(labels.size()));
  NoGradGuard ng;
  const std::vector<int> t0(labels.size(), ts[0]);
  Tensor x0 = f(Var(randn(shape, rng)), t0, labels).value();
  for (size_t i = 1; i < ts.size(); ++i) {
    const std::vector<int> tv(labels.size(), ts[i]);
    const Tensor eps = randn(shape, rng);
    x0 = f(Var(sample_xt(s, x0, tv, eps)), tv, labels).value();
  }
  return x0;
}

template Tensor score_estimate(const Tensor&, const Tensor&, int, const NoiseSchedule&);
template Tensor64 score_estimate(const Tensor64&, const Tensor64&, int, const NoiseSchedule&);

}  // namespace ccm
