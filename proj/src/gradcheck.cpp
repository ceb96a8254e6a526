#include "instanseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "instanseg/losses.hpp"
#include "instanseg/model.hpp"
#include "instanseg/ops.hpp"

namespace instanseg {

namespace {

using Fn = std::function<Tensor(const std::vector<Tensor>&)>;

double eval(const Fn& f, const std::vector<Tensor>& inputs) {
  NoGradGuard guard;
  return f(inputs).item();
}

// Reduce an output of any shape to a scalar with fixed random weights so the
// whole Jacobian is exercised.
Fn project(const std::function<Tensor(const std::vector<Tensor>&)>& op, std::mt19937_64& rng, const std::vector<Tensor>& probe) {
  Tensor out;
  {
    NoGradGuard guard;
    out = op(probe);
  }
  if (out.numel() == 1) return op;
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> w(out.numel());
  for (double& v : w) v = u(rng);
  const Tensor weights = Tensor::from_data(out.shape(), std::move(w));
  return [op, weights](const std::vector<Tensor>& in) { return sum(mul(op(in), weights)); };
}

class Gen {
 public:
  explicit Gen(std::uint64_t seed) : rng(seed) {}

  std::size_t pick(std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

  Tensor random(const Shape& s, double lo = -1.0, double hi = 1.0) {
    std::vector<double> d(shape_numel(s));
    for (double& v : d) v = uniform(lo, hi);
    return Tensor::from_data(s, std::move(d), true);
  }
  // Values kept at least `gap` away from zero (kinks of relu / abs).
  Tensor away_from_zero(const Shape& s, double gap = 1e-2) {
    std::vector<double> d(shape_numel(s));
    for (double& v : d) {
      const double m = uniform(gap, 1.0);
      v = uniform(0.0, 1.0) < 0.5 ? -m : m;
    }
    return Tensor::from_data(s, std::move(d), true);
  }
  // Pairwise distinct values on a grid with spacing 1e-2 (no max ties).
  Tensor distinct(const Shape& s) {
    std::vector<double> d(shape_numel(s));
    std::iota(d.begin(), d.end(), 0.0);
    std::shuffle(d.begin(), d.end(), rng);
    for (double& v : d) v = v * 1e-2 - 0.5 + uniform(0.0, 2e-3);
    return Tensor::from_data(s, std::move(d), true);
  }
  Shape image_shape(std::size_t max_c = 4, bool even = false) {
    const std::size_t h = even ? 2 * pick(1, 4) : pick(1, 8), w = even ? 2 * pick(1, 4) : pick(1, 8);
    return {pick(1, 4), pick(1, max_c), h, w};
  }

  std::mt19937_64 rng;
};

struct Case {
  std::string name;
  std::function<std::pair<Fn, std::vector<Tensor>>(Gen&)> make;
};

// Scale by 3 whose backward reports a factor of 3.01.
Tensor faulty_scale(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 3.0 * x[i];
  auto xi = x.impl();
  return detail::make_result("faulty_scale", x.shape(), std::move(out), {x}, [xi](const TensorImpl& o) {
    for (std::size_t i = 0; i < o.grad.size(); ++i) xi->grad[i] += 3.01 * o.grad[i];
  });
}

std::vector<std::uint8_t> random_labels(Gen& g, std::size_t n) {
  std::vector<std::uint8_t> y(n);
  for (auto& v : y) v = g.uniform(0.0, 1.0) < 0.5;
  return y;
}

std::vector<Case> cases() {
  std::vector<Case> c;
  auto conv_case = [](std::size_t k) {
    return [k](Gen& g) {
      const Shape s = g.image_shape();
      const std::size_t out_c = g.pick(1, 4);
      std::vector<Tensor> in{g.random(s), g.random({out_c, s[1], k, k}), g.random({out_c})};
      Fn f = [k](const std::vector<Tensor>& v) { return conv2d(v[0], v[1], v[2], (k - 1) / 2); };
      return std::pair{f, in};
    };
  };
  c.push_back({"conv2d_3x3", conv_case(3)});
  c.push_back({"conv2d_1x1", conv_case(1)});
  c.push_back({"maxpool2x2", [](Gen& g) {
                 return std::pair{Fn([](const std::vector<Tensor>& v) { return maxpool2x2(v[0]); }),
                                  std::vector<Tensor>{g.distinct(g.image_shape(4, true))}};
               }});
  c.push_back({"upsample_nearest2x", [](Gen& g) {
                 return std::pair{Fn([](const std::vector<Tensor>& v) { return upsample_nearest2x(v[0]); }),
                                  std::vector<Tensor>{g.random({g.pick(1, 2), g.pick(1, 4), g.pick(1, 4), g.pick(1, 4)})}};
               }});
  auto unary = [](std::function<Tensor(const Tensor&)> op, int domain) {
    return [op, domain](Gen& g) {
      const Shape s = g.image_shape();
      Tensor x = domain == 0 ? g.random(s) : domain == 1 ? g.away_from_zero(s) : g.random(s, 0.5, 2.0);
      return std::pair{Fn([op](const std::vector<Tensor>& v) { return op(v[0]); }), std::vector<Tensor>{x}};
    };
  };
  c.push_back({"relu", unary([](const Tensor& x) { return relu(x); }, 1)});
  c.push_back({"sigmoid", unary([](const Tensor& x) { return sigmoid(x); }, 0)});
  c.push_back({"log", unary([](const Tensor& x) { return log(x); }, 2)});
  c.push_back({"abs", unary([](const Tensor& x) { return abs(x); }, 1)});
  c.push_back({"clamp", [](Gen& g) {
                 // Keep values clear of the bounds at +-0.5.
                 Tensor x = g.away_from_zero(g.image_shape());
                 auto d = x.mutable_data();
                 for (double& v : d)
                   if (std::abs(std::abs(v) - 0.5) < 1e-2) v += 0.05;
                 return std::pair{Fn([](const std::vector<Tensor>& v) { return clamp(v[0], -0.5, 0.5); }),
                                  std::vector<Tensor>{x}};
               }});
  c.push_back({"scale", unary([](const Tensor& x) { return scale(x, -1.7); }, 0)});
  c.push_back({"add_scalar", unary([](const Tensor& x) { return add_scalar(x, 0.3); }, 0)});
  c.push_back({"sum", unary([](const Tensor& x) { return sum(x); }, 0)});
  c.push_back({"mean", unary([](const Tensor& x) { return mean(x); }, 0)});
  auto binary = [](std::function<Tensor(const Tensor&, const Tensor&)> op, bool positive_b) {
    return [op, positive_b](Gen& g) {
      const Shape s = g.image_shape();
      std::vector<Tensor> in{g.random(s), positive_b ? g.random(s, 0.5, 2.0) : g.random(s)};
      return std::pair{Fn([op](const std::vector<Tensor>& v) { return op(v[0], v[1]); }), in};
    };
  };
  c.push_back({"add", binary([](const Tensor& a, const Tensor& b) { return add(a, b); }, false)});
  c.push_back({"sub", binary([](const Tensor& a, const Tensor& b) { return sub(a, b); }, false)});
  c.push_back({"mul", binary([](const Tensor& a, const Tensor& b) { return mul(a, b); }, false)});
  c.push_back({"div", binary([](const Tensor& a, const Tensor& b) { return div(a, b); }, true)});
  auto bn_case = [](Mode mode) {
    return [mode](Gen& g) {
      Shape s = g.image_shape();
      if (s[0] * s[2] * s[3] < 2) s[3] = 2;
      const std::size_t ch = s[1];
      std::vector<Tensor> in{g.random(s), g.random({ch}, 0.5, 1.5), g.random({ch})};
      auto state = std::make_shared<BatchNormState>(BatchNormState::create(ch));
      if (mode == Mode::kEval) {
        state->running_mean = g.random({ch}).detach();
        state->running_var = g.random({ch}, 0.5, 2.0).detach();
      }
      Fn f = [state, mode](const std::vector<Tensor>& v) { return batchnorm2d(v[0], v[1], v[2], *state, mode); };
      return std::pair{f, in};
    };
  };
  c.push_back({"batchnorm2d_train", bn_case(Mode::kTrain)});
  c.push_back({"batchnorm2d_eval", bn_case(Mode::kEval)});
  c.push_back({"pad_reflect", [](Gen& g) {
                 const Shape s = g.image_shape();
                 const std::size_t t = g.pick(0, 5), b = g.pick(0, 5), l = g.pick(0, 5), r = g.pick(0, 5);
                 return std::pair{Fn([=](const std::vector<Tensor>& v) { return pad_reflect(v[0], t, b, l, r); }),
                                  std::vector<Tensor>{g.random(s)}};
               }});
  c.push_back({"crop", [](Gen& g) {
                 const Shape s = g.image_shape();
                 const std::size_t top = g.pick(0, s[2] - 1), left = g.pick(0, s[3] - 1);
                 const std::size_t h = g.pick(1, s[2] - top), w = g.pick(1, s[3] - left);
                 const std::size_t b = g.pick(0, s[0] - 1);
                 const bool single = g.uniform(0.0, 1.0) < 0.5;
                 return std::pair{Fn([=](const std::vector<Tensor>& v) {
                                    return single ? crop(v[0], b, top, left, h, w) : crop(v[0], top, left, h, w);
                                  }),
                                  std::vector<Tensor>{g.random(s)}};
               }});
  c.push_back({"concat_channels", [](Gen& g) {
                 const Shape s = g.image_shape();
                 Shape s2 = s;
                 s2[1] = g.pick(1, 3);
                 return std::pair{Fn([](const std::vector<Tensor>& v) { return concat_channels(v[0], v[1]); }),
                                  std::vector<Tensor>{g.random(s), g.random(s2)}};
               }});
  c.push_back({"reshape", [](Gen& g) {
                 const Shape s = g.image_shape();
                 return std::pair{Fn([n = shape_numel(s)](const std::vector<Tensor>& v) { return reshape(v[0], {n}); }),
                                  std::vector<Tensor>{g.random(s)}};
               }});
  c.push_back({"offsets_from", [](Gen& g) {
                 const std::size_t ch = g.pick(1, 4), h = g.pick(1, 8), w = g.pick(1, 8);
                 return std::pair{Fn([](const std::vector<Tensor>& v) { return offsets_from(v[0], v[1]); }),
                                  std::vector<Tensor>{g.random({1, ch, h, w}), g.random({1, ch, 1, 1})}};
               }});
  c.push_back({"lovasz_hinge", [](Gen& g) {
                 const std::size_t n = g.pick(1, 64);
                 auto y = random_labels(g, n);
                 // Distinct margins well away from the hinge at zero, so no
                 // sort order or relu state changes inside the difference step.
                 Tensor m = g.distinct({n});
                 std::vector<double> logits(n);
                 for (std::size_t i = 0; i < n; ++i) {
                   double margin = m[i] * 4.0;
                   if (std::abs(margin) < 1e-2) margin += 2e-2;
                   logits[i] = (1.0 - margin) * (y[i] ? 1.0 : -1.0);
                 }
                 return std::pair{Fn([y](const std::vector<Tensor>& v) { return lovasz_hinge(v[0], y); }),
                                  std::vector<Tensor>{Tensor::from_data({n}, std::move(logits), true)}};
               }});
  c.push_back({"bce_loss", [](Gen& g) {
                 const Shape s = g.image_shape();
                 Tensor t = g.random(s, 0.0, 1.0).detach();
                 return std::pair{Fn([t](const std::vector<Tensor>& v) { return bce_loss(v[0], t); }),
                                  std::vector<Tensor>{g.random(s, 0.05, 0.95)}};
               }});
  c.push_back({"dice_loss", [](Gen& g) {
                 const Shape s = g.image_shape();
                 auto y = random_labels(g, shape_numel(s));
                 return std::pair{Fn([y](const std::vector<Tensor>& v) { return dice_loss(v[0], y); }),
                                  std::vector<Tensor>{g.random(s, 0.0, 1.0)}};
               }});
  c.push_back({"seed_loss", [](Gen& g) {
                 const Shape s = g.image_shape();
                 Tensor t = g.random(s, 0.0, 1.0).detach();
                 Tensor x = g.away_from_zero(s);
                 auto d = x.mutable_data();
                 for (std::size_t i = 0; i < d.size(); ++i) d[i] += t[i];
                 return std::pair{Fn([t](const std::vector<Tensor>& v) { return seed_loss(v[0], t); }),
                                  std::vector<Tensor>{x}};
               }});
  c.push_back({"phi_forward", [](Gen& g) {
                 const std::size_t dp = g.pick(2, 4), de = g.pick(0, 3), hid = g.pick(1, 8), h = g.pick(1, 6),
                                   w = g.pick(1, 6);
                 std::vector<Tensor> in{g.random({1, dp, h, w}), g.random({1, de, h, w}), g.random({hid, dp + de, 1, 1}),
                                        g.random({hid}), g.random({1, hid, 1, 1}), g.random({1})};
                 Fn f = [dp, de](const std::vector<Tensor>& v) {
                   InstanceHead head;
                   head.positional_dim = static_cast<int>(dp);
                   head.conditional_dim = static_cast<int>(de);
                   head.hidden = {v[2], v[3]};
                   head.output = {v[4], v[5]};
                   return phi_forward(v[0], v[1], head);
                 };
                 return std::pair{f, in};
               }});
  // A residual block with a skip through pool / upsample, as in the backbone.
  c.push_back({"composed_block", [](Gen& g) {
                 const std::size_t ch = g.pick(1, 3), h = 2 * g.pick(1, 4), w = 2 * g.pick(1, 4);
                 std::vector<Tensor> in{g.random({2, ch, h, w}), g.random({ch, ch, 3, 3}), g.random({ch}),
                                        g.random({ch}, 0.5, 1.5), g.random({ch})};
                 auto state = std::make_shared<BatchNormState>(BatchNormState::create(ch));
                 Fn f = [state](const std::vector<Tensor>& v) {
                   Tensor y = sigmoid(batchnorm2d(conv2d(v[0], v[1], v[2]), v[3], v[4], *state, Mode::kTrain));
                   Tensor skip = upsample_nearest2x(scale(maxpool2x2(v[0]), 0.5));
                   return add(y, skip);
                 };
                 return std::pair{f, in};
               }});
  return c;
}

}  // namespace

double gradient_error(const Fn& f, const std::vector<Tensor>& inputs, double step) {
  for (const auto& t : inputs) t.impl()->grad.clear();
  Tensor loss = f(inputs);
  loss.backward();
  double worst = 0.0;
  for (const auto& t : inputs) {
    if (!t.requires_grad()) continue;
    std::vector<double> analytic(t.grad().begin(), t.grad().end());
    if (analytic.empty()) analytic.assign(t.numel(), 0.0);
    auto data = t.impl()->data.data();
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double keep = data[i];
      data[i] = keep + step;
      const double up = eval(f, inputs);
      data[i] = keep - step;
      const double down = eval(f, inputs);
      data[i] = keep;
      const double numeric = (up - down) / (2.0 * step);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-3});
      worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
  }
  return worst;
}

std::vector<GradCheckResult> run_gradcheck(const GradCheckOptions& options) {
  auto all = cases();
  if (options.inject_fault) {
    all.push_back({"faulty_scale", [](Gen& g) {
                     return std::pair{Fn([](const std::vector<Tensor>& v) { return faulty_scale(v[0]); }),
                                      std::vector<Tensor>{g.random(g.image_shape())}};
                   }});
  }
  std::vector<GradCheckResult> results;
  for (std::size_t k = 0; k < all.size(); ++k) {
    Gen g(options.seed * 1000003ull + k);
    GradCheckResult r;
    r.op = all[k].name;
    for (int t = 0; t < options.trials; ++t) {
      auto [op, inputs] = all[k].make(g);
      const Fn f = project(op, g.rng, inputs);
      r.max_rel_error = std::max(r.max_rel_error, gradient_error(f, inputs, options.step));
      ++r.trials;
    }
    r.passed = r.max_rel_error < options.tolerance;
    results.push_back(r);
  }
  return results;
}

}  // namespace instanseg
