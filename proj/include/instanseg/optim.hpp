#pragma once

#include <vector>

#include "instanseg/tensor.hpp"

namespace instanseg {

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

// One bias-corrected Adam update over `params` using their accumulated grads.
// Parameters without a grad buffer are treated as having zero gradient.
void adam_step(std::vector<Tensor>& params, AdamState& state, double lr);

void zero_grads(std::vector<Tensor>& params);

}  // namespace instanseg
