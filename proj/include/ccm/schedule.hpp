#pragma once

#include <span>
#include <vector>

#include "ccm/random.hpp"
#include "ccm/tensor.hpp"

namespace ccm {

// Discrete VP forward process. sqrt_alpha_bar is stored directly so that the
// zero-terminal rescale lands on an exact 0.
class NoiseSchedule {
 public:
  NoiseSchedule() = default;
  NoiseSchedule(std::vector<double> sqrt_alpha_bar, int grid_points);

  int T() const noexcept { return static_cast<int>(sqrt_ab_.size()) - 1; }
  int N() const noexcept { return static_cast<int>(grid_.size()) - 1; }

  double alpha_bar(int t) const { return sqrt_alpha_bar(t) * sqrt_alpha_bar(t); }
  double sqrt_alpha_bar(int t) const;
  double sqrt_one_minus(int t) const { return sqrt_1m_.at(static_cast<size_t>(check_t(t))); }
  std::vector<double> alpha_bars() const;

  // t_0 = 0 < t_1 < ... < t_N = T.
  const std::vector<int>& grid() const noexcept { return grid_; }
  int t(int n) const;
  bool on_grid(int t) const;
  // Position of t in the grid; throws RangeError when t is not a grid point.
  int grid_index(int t) const;

  // Same coefficients on a different uniform grid.
  NoiseSchedule with_grid(int n) const { return NoiseSchedule(sqrt_ab_, n); }

  // Descending timesteps for an s-step sampler, starting at T. Points are
  // spread evenly over the grid.
  std::vector<int> descending(int steps) const;

 private:
  int check_t(int t) const;

  std::vector<double> sqrt_ab_, sqrt_1m_;
  std::vector<int> grid_;
};

// alpha_bar[t] = prod_{i<=t} (1 - beta_i), beta linear over i = 1..T, alpha_bar[0] = 1.
NoiseSchedule make_schedule(int T, double beta_start, double beta_end, int grid_points = 0);

// Shifts and scales sqrt(alpha_bar) so the terminal value is exactly 0 and the
// first is preserved.
NoiseSchedule enforce_zero_terminal_snr(const NoiseSchedule& s);

// sqrt(ab[t]) * x + sqrt(1 - ab[t]) * eps per sample; t has one entry per
// sample (or one shared entry). Every t must be a grid point.
template <class T>
BasicTensor<T> sample_xt(const NoiseSchedule& s, const BasicTensor<T>& x, std::span<const int> t,
                         const BasicTensor<T>& eps);

// Uniform over {1, ..., N-1}.
int draw_n(Rng& rng, int N);

}  // namespace ccm
