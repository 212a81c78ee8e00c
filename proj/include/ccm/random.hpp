#pragma once

#include <random>

#include "ccm/tensor.hpp"

namespace ccm {

using Rng = std::mt19937_64;

template <class T = float>
BasicTensor<T> randn(Shape shape, Rng& rng) {
  BasicTensor<T> t(std::move(shape));
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& v : t.storage()) v = static_cast<T>(n(rng));
  return t;
}

// Independent child stream; used so that one consumer's draw count never
// shifts another's.
inline Rng fork(Rng& parent) { return Rng(parent()); }

}  // namespace ccm
