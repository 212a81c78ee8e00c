#include "ccm/schedule.hpp"

#include <algorithm>
#include <cmath>

namespace ccm {

NoiseSchedule::NoiseSchedule(std::vector<double> sqrt_alpha_bar, int grid_points)
    : sqrt_ab_(std::move(sqrt_alpha_bar)) {
  const int T = static_cast<int>(sqrt_ab_.size()) - 1;
  if (T < 2) throw ConfigError("schedule needs T >= 2");
  if (grid_points <= 0) grid_points = T;
  if (grid_points > T) throw ConfigError("grid size N exceeds T");
  sqrt_1m_.resize(sqrt_ab_.size());
  for (size_t i = 0; i < sqrt_ab_.size(); ++i) {
    if (!(sqrt_ab_[i] >= 0.0 && sqrt_ab_[i] <= 1.0))
      throw ConfigError("sqrt(alpha_bar) outside [0, 1]");
    sqrt_1m_[i] = std::sqrt(1.0 - sqrt_ab_[i] * sqrt_ab_[i]);
  }
  grid_.resize(static_cast<size_t>(grid_points) + 1);
  for (int n = 0; n <= grid_points; ++n)
    grid_[static_cast<size_t>(n)] = static_cast<int>(static_cast<int64_t>(n) * T / grid_points);
}

int NoiseSchedule::check_t(int t) const {
  if (t < 0 || t > T()) throw RangeError("timestep " + std::to_string(t) + " outside [0, T]");
  return t;
}

double NoiseSchedule::sqrt_alpha_bar(int t) const {
  return sqrt_ab_[static_cast<size_t>(check_t(t))];
}

std::vector<double> NoiseSchedule::alpha_bars() const {
  std::vector<double> out(sqrt_ab_.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = sqrt_ab_[i] * sqrt_ab_[i];
  return out;
}

int NoiseSchedule::t(int n) const {
  if (n < 0 || n > N()) throw RangeError("grid index " + std::to_string(n) + " outside [0, N]");
  return grid_[static_cast<size_t>(n)];
}

bool NoiseSchedule::on_grid(int t) const { return std::binary_search(grid_.begin(), grid_.end(), t); }

int NoiseSchedule::grid_index(int t) const {
  auto it = std::lower_bound(grid_.begin(), grid_.end(), t);
  if (it == grid_.end() || *it != t)
    throw RangeError("timestep " + std::to_string(t) + " is not on the grid");
  return static_cast<int>(it - grid_.begin());
}

std::vector<int> NoiseSchedule::descending(int steps) const {
  if (steps < 1 || steps > N())
    throw ConfigError("step count " + std::to_string(steps) + " must lie in [1, N]");
  std::vector<int> out;
  for (int i = 0; i < steps; ++i)
    out.push_back(t(static_cast<int>(static_cast<int64_t>(N()) * (steps - i) / steps)));
  return out;
}

NoiseSchedule make_schedule(int T, double beta_start, double beta_end, int grid_points) {
  if (T < 2) throw ConfigError("T must be at least 2");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw ConfigError("need 0 < beta_start <= beta_end < 1");
  std::vector<double> s(static_cast<size_t>(T) + 1);
  double ab = 1.0;
  s[0] = 1.0;
  for (int i = 1; i <= T; ++i) {
    const double beta = beta_start + (beta_end - beta_start) * (i - 1) / (T - 1);
    ab *= 1.0 - beta;
    s[static_cast<size_t>(i)] = std::sqrt(ab);
  }
  return NoiseSchedule(std::move(s), grid_points);
}

NoiseSchedule enforce_zero_terminal_snr(const NoiseSchedule& sch) {
  const int T = sch.T();
  const double s0 = sch.sqrt_alpha_bar(0), sT = sch.sqrt_alpha_bar(T);
  if (sT == 0.0) return sch;
  if (s0 == sT) throw NumericError("degenerate schedule: alpha_bar[0] == alpha_bar[T]");
  std::vector<double> s(static_cast<size_t>(T) + 1);
  for (int t = 0; t <= T; ++t)
    s[static_cast<size_t>(t)] = (sch.sqrt_alpha_bar(t) - sT) * s0 / (s0 - sT);
  s[static_cast<size_t>(T)] = 0.0;
  return NoiseSchedule(std::move(s), sch.N());
}

template <class T>
BasicTensor<T> sample_xt(const NoiseSchedule& s, const BasicTensor<T>& x, std::span<const int> t,
                         const BasicTensor<T>& eps) {
  if (x.shape() != eps.shape())
    throw ShapeError("sample_xt: x " + shape_str(x.shape()) + " vs eps " + shape_str(eps.shape()));
  const int64_t nb = x.rank() == 0 ? 1 : x.dim(0);
  if (t.size() != 1 && static_cast<int64_t>(t.size()) != nb)
    throw ShapeError("sample_xt: one timestep per sample required");
  const int64_t inner = nb ? x.numel() / nb : 0;
  BasicTensor<T> out(x.shape());
  for (int64_t b = 0; b < nb; ++b) {
    const int tb = t[t.size() == 1 ? 0 : static_cast<size_t>(b)];
    s.grid_index(tb);
    const T a = static_cast<T>(s.sqrt_alpha_bar(tb)), c = static_cast<T>(s.sqrt_one_minus(tb));
    for (int64_t i = b * inner; i < (b + 1) * inner; ++i) out[i] = a * x[i] + c * eps[i];
  }
  return out;
}

int draw_n(Rng& rng, int N) {
  if (N < 2) throw ConfigError("draw_n needs N >= 2");
  return std::uniform_int_distribution<int>(1, N - 1)(rng);
}

template BasicTensor<float> sample_xt(const NoiseSchedule&, const BasicTensor<float>&,
                                      std::span<const int>, const BasicTensor<float>&);
template BasicTensor<double> sample_xt(const NoiseSchedule&, const BasicTensor<double>&,
                                       std::span<const int>, const BasicTensor<double>&);

}  // namespace ccm
