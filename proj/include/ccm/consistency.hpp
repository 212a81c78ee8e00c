#pragma once

#include <span>
#include <vector>

#include "ccm/diffusion.hpp"

namespace ccm {

inline constexpr double kSigmaData = 0.5;

// Boundary scalings in terms of the VP noise-to-signal ratio
// r = sqrt(1 - ab) / sqrt(ab):
//   skip = sd^2 / (r^2 + sd^2),  out = sd * r / sqrt(r^2 + sd^2).
// Both are written in a form that stays finite when ab = 0. t = 0 gives
// exactly (1, 0).
struct CmScalings {
  double skip, out;
};
CmScalings cm_scalings(const NoiseSchedule& s, int t, double sigma_d = kSigmaData);

// skip(t_b) * x_b + out(t_b) * y_b per sample. Samples with out = 0 copy
// skip * x without touching y, so the boundary holds bit-exactly even when y
// is garbage.
Var cm_combine(const NoiseSchedule& s, const Var& x, const Var& y, std::span<const int> t,
               double sigma_d = kSigmaData);

// f(x_t, t, label) = skip(t) x_t + out(t) net(x_t, t, label). `net` may be a
// plain backbone or one wrapped with a ControlNet branch. Timesteps must be
// grid points of `schedule`.
class ConsistencyFunction {
 public:
  ConsistencyFunction(EpsFn net, const NoiseSchedule& schedule, double sigma_d = kSigmaData)
      : net_(std::move(net)), s_(&schedule), sigma_d_(sigma_d) {}

  Var operator()(const Var& x, std::span<const int> t, std::span<const int> labels) const;
  const NoiseSchedule& schedule() const noexcept { return *s_; }

 private:
  EpsFn net_;
  const NoiseSchedule* s_;
  double sigma_d_;
};

struct ConsistencyLoss {
  DistanceKind distance = DistanceKind::L1;
  // lambda(t_n) indexed by n; empty means 1.0 everywhere.
  std::vector<double> lambda;

  double weight(int n) const;
};

// One consistency draw per sample: n in {1..N-1} plus the noise shared by
// both timesteps.
struct CtDraw {
  std::vector<int> n, t_next, t_cur;
  Tensor eps;
};
CtDraw draw_ct(const Tensor& x, const NoiseSchedule& s, Rng& rng);

// Consistency training: student at x_{t_{n+1}}, teacher at x_{t_n}, both
// built from the same (x, eps). The teacher runs without recording a graph;
// pass the student itself for the stopgrad(theta) teacher.
Var ct_loss(const ConsistencyFunction& student, const ConsistencyFunction& teacher,
            const Batch& batch, const CtDraw& draw, const ConsistencyLoss& loss);

// Consistency distillation: the teacher input is one guided DDIM step of the
// diffusion model from x_{t_{n+1}} to t_n.
Var cd_loss(const ConsistencyFunction& student, const ConsistencyFunction& teacher,
            const EpsFn& dm, const GuidanceConfig& g, const Batch& batch, const CtDraw& draw,
            const ConsistencyLoss& loss);

// -(x_t - sqrt(ab) x) / (1 - ab). Throws NumericError when ab = 1.
template <class T>
BasicTensor<T> score_estimate(const BasicTensor<T>& x, const BasicTensor<T>& xt, int t,
                              const NoiseSchedule& s);

// x0 <- f(x_T, T); for each remaining timestep tau of the descending
// nfes-point sub-grid: x <- sqrt(ab) x0 + sqrt(1 - ab) eps, x0 <- f(x, tau).
Tensor multistep_sample(const ConsistencyFunction& f, int nfes, std::span<const int> labels,
                        const Shape& sample_shape, Rng& rng);

}  // namespace ccm
