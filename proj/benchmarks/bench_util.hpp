#pragma once

#include <random>

#include "tsca/tensor.hpp"

namespace tsca::bench {

inline Tensor uniform(std::mt19937_64& rng, std::size_t rows, std::size_t cols) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor t(rows, cols);
  for (double& v : t.data()) v = u(rng);
  return t;
}

inline Tensor simplex(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<double> u(0.05, 1.0);
  Tensor t(n, 1);
  double s = 0.0;
  for (double& v : t.data()) s += (v = u(rng));
  for (double& v : t.data()) v /= s;
  return t;
}

}  // namespace tsca::bench
