#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "instanseg/losses.hpp"

using namespace instanseg;

namespace {

// Jaccard loss when the pixels in `err` are mispredicted.
double jaccard_set_loss(const std::vector<std::uint8_t>& gt, const std::vector<bool>& err) {
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const bool pred = gt[i] ? !err[i] : err[i];
    inter += gt[i] && pred;
    uni += gt[i] || pred;
  }
  return uni == 0 ? 0.0 : 1.0 - static_cast<double>(inter) / static_cast<double>(uni);
}

// Lovasz extension evaluated from the set function on the chain of
// superlevel sets of the hinge errors.
double lovasz_oracle(const std::vector<double>& logits, const std::vector<std::uint8_t>& gt) {
  const std::size_t n = logits.size();
  std::vector<double> m(n);
  for (std::size_t i = 0; i < n; ++i) m[i] = std::max(0.0, 1.0 - logits[i] * (gt[i] ? 1.0 : -1.0));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return m[a] > m[b]; });
  std::vector<bool> err(n, false);
  double prev = 0.0, total = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    err[order[k]] = true;
    const double cur = jaccard_set_loss(gt, err);
    total += m[order[k]] * (cur - prev);
    prev = cur;
  }
  return total;
}

}  // namespace

TEST_CASE("lovasz hinge matches the set-function oracle") {
  std::mt19937_64 rng(17);
  std::normal_distribution<double> n(0.0, 1.5);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t len = 1 + rng() % 12;
    std::vector<double> x(len);
    std::vector<std::uint8_t> y(len);
    for (std::size_t i = 0; i < len; ++i) {
      x[i] = n(rng);
      y[i] = rng() % 2;
    }
    const double got = lovasz_hinge(Tensor::from_data({len}, x), y).item();
    CHECK(got == doctest::Approx(lovasz_oracle(x, y)).epsilon(1e-12));
  }
}

TEST_CASE("lovasz hinge examples and properties") {
  // Confident and correct: zero loss.
  CHECK(lovasz_hinge(Tensor::from_data({3}, {5, -5, 3}), std::vector<std::uint8_t>{1, 0, 1}).item() == 0.0);
  // All logits zero: every margin is 1 and the loss is 1.
  CHECK(lovasz_hinge(Tensor::zeros({4}), std::vector<std::uint8_t>{1, 0, 1, 0}).item() == doctest::Approx(1.0));
  CHECK_THROWS_AS(lovasz_hinge(Tensor::zeros({3}), std::vector<std::uint8_t>{1, 0}), std::invalid_argument);
  CHECK_THROWS_AS(lovasz_hinge(Tensor::zeros({0}), std::vector<std::uint8_t>{}), std::invalid_argument);

  const std::vector<std::uint8_t> sorted{1, 0, 1, 1};
  const auto g = lovasz_jaccard_grad(sorted);
  double s = 0;
  for (double v : g) {
    CHECK(v >= 0.0);
    s += v;
  }
  CHECK(s == doctest::Approx(1.0));  // telescopes to J(all errors) = 1

  // Increasing any margin never lowers the loss.
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd;
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> x(8);
    std::vector<std::uint8_t> y(8);
    for (int i = 0; i < 8; ++i) {
      x[i] = nd(rng);
      y[i] = rng() % 2;
    }
    const double base = lovasz_hinge(Tensor::from_data({8}, x), y).item();
    const int k = static_cast<int>(rng() % 8);
    x[k] += y[k] ? -0.5 : 0.5;
    CHECK(lovasz_hinge(Tensor::from_data({8}, x), y).item() >= base - 1e-12);
  }
}

TEST_CASE("bce, dice and seed loss values") {
  CHECK(bce_loss(Tensor::full({4}, 0.5), Tensor::from_data({4}, {0, 1, 0, 1})).item() ==
        doctest::Approx(std::log(2.0)));
  CHECK(std::isfinite(bce_loss(Tensor::from_data({2}, {0.0, 1.0}), Tensor::from_data({2}, {1, 0})).item()));
  CHECK_THROWS_AS(bce_loss(Tensor::zeros({2}), Tensor::zeros({3})), std::invalid_argument);

  const std::vector<std::uint8_t> m{1, 1, 0, 0};
  CHECK(dice_loss(Tensor::from_data({4}, {1, 1, 0, 0}), m).item() == doctest::Approx(0.0));
  // 1 - (2*0 + 1) / (2 + 2 + 1)
  CHECK(dice_loss(Tensor::from_data({4}, {0, 0, 1, 1}), m).item() == doctest::Approx(0.8));
  CHECK(dice_loss(Tensor::zeros({2}), std::vector<std::uint8_t>{0, 0}).item() == doctest::Approx(0.0));

  const Tensor s = Tensor::from_data({1, 1, 1, 4}, {0.5, 0.25, 1.0, 0.0});
  CHECK(seed_loss(s, Tensor::from_data({1, 1, 1, 4}, {0, 0, 0, 0})).item() == doctest::Approx(1.75 / 4));
  DistanceMap d(1, 4, 0.0);
  d.values = {0.5, 0.25, 1.0, 0.0};
  CHECK(seed_loss(s, d).item() == 0.0);
}

TEST_CASE("candidate capping") {
  std::mt19937_64 rng(5);
  const auto idx = cap_candidates(60, kMaxInstancesPerImage, rng);
  CHECK(idx.size() == 50);
  CHECK(std::is_sorted(idx.begin(), idx.end()));
  CHECK(std::set<std::size_t>(idx.begin(), idx.end()).size() == 50);
  for (auto i : idx) CHECK(i < 60);
  const auto all = cap_candidates(7, 50, rng);
  CHECK(all == std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6});

  // Every index is reachable and roughly uniform.
  std::vector<int> hits(60, 0);
  for (int t = 0; t < 600; ++t)
    for (auto i : cap_candidates(60, 50, rng)) ++hits[i];
  for (int h : hits) CHECK(h > 400);
}

TEST_CASE("instance and joint loss") {
  std::mt19937_64 rng(1);
  const LossValue empty = instance_loss({}, Phase::kMain, rng);
  CHECK(empty.no_candidates);
  CHECK(empty.instance == 0.0);

  std::vector<CandidateTarget> c;
  for (int i = 0; i < 60; ++i) c.push_back({Tensor::zeros({4}, true), {1, 0, 1, 0}});
  const LossValue v = instance_loss(c, Phase::kMain, rng);
  CHECK_FALSE(v.no_candidates);
  CHECK(v.instance == doctest::Approx(1.0));
  v.total.backward();
  int touched = 0;
  for (const auto& t : c) touched += t.logits.has_grad();
  CHECK(touched == 50);

  const LossValue pre = instance_loss({{Tensor::zeros({2}), {1, 0}}}, Phase::kPretrain, rng);
  // sigmoid(0) = 0.5: 1 - (2*0.5 + 1) / (1 + 1 + 1)
  CHECK(pre.instance == doctest::Approx(1.0 / 3.0));

  const LossValue j = joint_loss(Tensor::scalar(0.25), Tensor::scalar(0.5));
  CHECK(j.total.item() == 0.75);
  CHECK(j.seed == 0.25);
  const LossValue js = joint_loss(Tensor::scalar(0.25), Tensor());
  CHECK(js.total.item() == 0.25);
  CHECK(js.no_candidates);
}
