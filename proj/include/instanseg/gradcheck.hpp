#pragma once

// Central finite-difference verification of every differentiable operation.

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "instanseg/tensor.hpp"

namespace instanseg {

struct GradCheckOptions {
  int trials = 50;
  double step = 1e-5;
  double tolerance = 1e-4;
  std::uint64_t seed = 0;
  bool inject_fault = false;  // adds an operation with a deliberately wrong backward
};

struct GradCheckResult {
  std::string op;
  int trials = 0;
  double max_rel_error = 0.0;
  bool passed = false;
};

// |a - n| / max(|a|, |n|, 1e-3) maximised over all input elements.
double gradient_error(const std::function<Tensor(const std::vector<Tensor>&)>& f, const std::vector<Tensor>& inputs,
                      double step);

std::vector<GradCheckResult> run_gradcheck(const GradCheckOptions& options);

}  // namespace instanseg
