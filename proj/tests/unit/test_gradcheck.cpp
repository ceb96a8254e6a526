#include <doctest.h>

#include "instanseg/gradcheck.hpp"
#include "instanseg/ops.hpp"

using namespace instanseg;

TEST_CASE("every op passes the finite-difference check") {
  GradCheckOptions opt;
  opt.trials = 10;
  opt.seed = 3;
  const auto results = run_gradcheck(opt);
  CHECK(results.size() >= 30);
  for (const auto& r : results) {
    INFO(r.op << " " << r.max_rel_error);
    CHECK(r.passed);
    CHECK(r.trials == 10);
  }
}

TEST_CASE("a wrong backward is caught") {
  GradCheckOptions opt;
  opt.trials = 3;
  opt.inject_fault = true;
  bool seen = false;
  for (const auto& r : run_gradcheck(opt))
    if (r.op == "faulty_scale") {
      seen = true;
      CHECK_FALSE(r.passed);
      CHECK(r.max_rel_error > 1e-4);
    }
  CHECK(seen);
}

TEST_CASE("gradient_error on a closed form") {
  const auto f = [](const std::vector<Tensor>& in) { return sum(mul(in[0], in[0])); };
  CHECK(gradient_error(f, {Tensor::from_data({3}, {0.5, -1.0, 2.0}, true)}, 1e-5) < 1e-8);
}
