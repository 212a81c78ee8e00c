#pragma once

#include <functional>
#include <span>
#include <vector>

#include "ccm/nn.hpp"
#include "ccm/optim.hpp"
#include "ccm/schedule.hpp"

namespace ccm {

// Lowest value used for sqrt(alpha_bar) when recovering x0 from x_t, so that
// the step leaving a zero-SNR terminal stays bounded.
inline constexpr double kDdimFloor = 1e-4;
// Data range used to clamp x0 on a floor-guarded step.
inline constexpr double kDataRange = 1.0;

struct Batch {
  Tensor x;                 // [B, ...]
  std::vector<int> labels;  // one per sample
  int64_t size() const { return static_cast<int64_t>(labels.size()); }
};

// Any network evaluated as eps(x_t, t, label).
using EpsFn = std::function<Var(const Var&, std::span<const int>, std::span<const int>)>;

inline EpsFn eps_fn(const Backbone<float>& net) {
  return [&net](const Var& x, std::span<const int> t, std::span<const int> y) {
    return net.forward(x, t, y);
  };
}

struct GuidanceConfig {
  double w = 5.0;
  int null_label = 3;
};

// ---- training ------------------------------------------------------------------

struct DmDraw {
  std::vector<int> t;
  Tensor eps;
  std::vector<int> labels;  // after label dropout
};

// t is uniform over grid points t_1..t_N; each label is replaced by the null
// label with probability p_drop.
DmDraw draw_dm(const Batch& batch, const NoiseSchedule& s, double p_drop, int null_label, Rng& rng);

// mean ||eps - eps_fn(x_t, t, label)||^2 over elements and batch.
Var dm_loss(const EpsFn& eps, const Batch& batch, const DmDraw& draw, const NoiseSchedule& s);

// One optimizer step. Throws NumericError on a non-finite loss.
double dm_train_step(Backbone<float>& net, AdamState& opt, const Batch& batch,
                     const NoiseSchedule& s, double p_drop, Rng& rng);

// ---- guidance and sampling --------------------------------------------------------

Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_cond, double w);

// Guided prediction without recording a graph. Both branches go through one
// batched forward.
Tensor guided_eps(const EpsFn& eps, const Tensor& x, std::span<const int> t,
                  std::span<const int> labels, const GuidanceConfig& g);

// Deterministic DDIM (eta = 0) from t_next down to t_cur, per sample. Equal
// timesteps return x_next unchanged. With x0_clip > 0, the x0 prediction of a
// step whose sqrt(alpha_bar) falls under the floor is clamped to
// [-x0_clip, x0_clip]; every other step is untouched.
template <class T>
BasicTensor<T> ddim_step(const BasicTensor<T>& x_next, const BasicTensor<T>& eps_hat,
                         std::span<const int> t_next, std::span<const int> t_cur,
                         const NoiseSchedule& s, double x0_clip = 0.0);

// Starts from pure noise at T and walks `steps` evenly spaced grid points
// down to 0 with guidance at each step. The terminal step clamps x0 to the
// data range.
Tensor ddim_sample(const EpsFn& eps, const GuidanceConfig& g, const NoiseSchedule& s, int steps,
                   std::span<const int> labels, const Shape& sample_shape, Rng& rng);

}  // namespace ccm
