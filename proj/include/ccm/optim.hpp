#pragma once

#include <functional>
#include <map>
#include <span>
#include <string>

#include "ccm/parameters.hpp"

namespace ccm {

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig cfg;
  int64_t step = 0;
  std::map<std::string, Tensor64> m, v;
};

// One Adam update over every parameter that holds a gradient; parameters
// without one are untouched. Moments are kept in double. Throws NumericError
// naming the first non-finite gradient before anything is modified.
template <class T>
void adam_step(BasicParameterSet<T>& params, AdamState& state);

// teacher <- mu * teacher + (1 - mu) * student, evaluated as a lerp so that
// mu = 0 copies the student exactly and equal inputs are a fixed point.
template <class T>
void ema_update(BasicParameterSet<T>& teacher, const BasicParameterSet<T>& student, double mu);

// zero_grad, loss, backward, Adam on `params`. Every set in `frozen` must end
// the backward pass without a gradient (InvariantViolation otherwise), and a
// non-finite loss throws NumericError before anything is updated.
double optimize_step(ParameterSet& params, AdamState& state, const std::function<Var()>& loss,
                     std::span<const ParameterSet* const> frozen = {});

}  // namespace ccm
