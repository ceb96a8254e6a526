#include <doctest.h>

#include <algorithm>
#include <functional>
#include <numeric>
#include <random>

#include "instanseg/labelmap.hpp"
#include "instanseg/metrics.hpp"

using namespace instanseg;

namespace {

LabelMap random_map(int h, int w, int k, std::mt19937_64& rng) {
  LabelMap m(h, w);
  std::uniform_int_distribution<int> rr(0, h - 1), cc(0, w - 1), rad(2, 7);
  for (int i = 1; i <= k; ++i) {
    const int r0 = rr(rng), c0 = cc(rng), ry = rad(rng), rx = rad(rng);
    for (int y = std::max(0, r0 - ry); y <= std::min(h - 1, r0 + ry); ++y)
      for (int x = std::max(0, c0 - rx); x <= std::min(w - 1, c0 + rx); ++x) m.at(y, x) = static_cast<Label>(i);
  }
  return relabel_sequential(m);
}

// Perturbed copy of a map: shifted, some instances dropped or grown.
LabelMap perturb(const LabelMap& m, std::mt19937_64& rng) {
  LabelMap out(m.height, m.width);
  const int dy = static_cast<int>(rng() % 3) - 1, dx = static_cast<int>(rng() % 3) - 1;
  for (int r = 0; r < m.height; ++r)
    for (int c = 0; c < m.width; ++c) {
      const int y = r + dy, x = c + dx;
      if (y < 0 || x < 0 || y >= m.height || x >= m.width) continue;
      const Label l = m.at(y, x);
      if (l && l % 5 != 0) out.at(r, c) = l;
    }
  return out;
}

// Maximum matching over pairs with IoU > tau by exhaustive search.
int brute_max_matching(const IouTable& t, double tau) {
  const std::size_t np = t.pred_labels.size(), ng = t.gt_labels.size();
  std::vector<int> memo(np * (std::size_t{1} << ng) + 1, -1);
  std::function<int(std::size_t, unsigned)> go = [&](std::size_t p, unsigned used) -> int {
    if (p == np) return 0;
    int& m = memo[p * (std::size_t{1} << ng) + used];
    if (m >= 0) return m;
    int best = go(p + 1, used);
    for (std::size_t g = 0; g < ng; ++g)
      if (!(used >> g & 1) && t.iou[p][g] > tau) best = std::max(best, 1 + go(p + 1, used | (1u << g)));
    return m = best;
  };
  return go(0, 0);
}

}  // namespace

TEST_CASE("f1 basics") {
  CHECK(f1_score(0, 0, 0) == 1.0);
  CHECK(f1_score(0, 3, 0) == 0.0);
  CHECK(f1_score(2, 1, 1) == doctest::Approx(2.0 / 3.0));
  LabelMap gt(4, 4);
  CHECK(f1_at(gt, gt, 0.5) == 1.0);
  for (int c = 0; c < 4; ++c) gt.at(0, c) = 1;
  CHECK(f1_at(LabelMap(4, 4), gt, 0.5) == 0.0);
  CHECK(f1_mu(gt, gt) == 1.0);
  CHECK_THROWS(iou_table(LabelMap(3, 3), gt));
}

TEST_CASE("matching is strict at the threshold") {
  LabelMap gt(1, 4), pred(1, 4);
  gt.values = {1, 1, 0, 0};
  pred.values = {1, 1, 1, 1};  // IoU exactly 0.5
  CHECK(match_instances(pred, gt, 0.5).true_positives == 0);
  pred.values = {1, 1, 1, 0};
  const MatchResult r = match_instances(pred, gt, 0.5);
  CHECK(r.true_positives == 1);
  REQUIRE(r.pairs.size() == 1);
  CHECK(r.pairs[0].iou == doctest::Approx(2.0 / 3.0));
  CHECK(match_instances(pred, gt, 0.7).true_positives == 0);
}

TEST_CASE("one prediction covering two objects") {
  // Two 1x2 objects merged into one 1x5 prediction: IoU 0.4 against each.
  LabelMap gt(1, 5), pred(1, 5);
  gt.values = {1, 1, 0, 2, 2};
  pred.values = {1, 1, 1, 1, 1};
  const MatchResult r = match_instances(pred, gt, 0.2);
  CHECK(r.true_positives == 1);
  CHECK(r.false_positives == 0);
  CHECK(r.false_negatives == 1);
  CHECK(f1_at(pred, gt, 0.2) == doctest::Approx(2.0 / 3.0));
  CHECK(f1_at(pred, gt, 0.5) == 0.0);
}

TEST_CASE("greedy matches the exhaustive optimum, f1 is monotone and label-invariant") {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 100; ++trial) {
    const int h = 16 + static_cast<int>(rng() % 48), w = 16 + static_cast<int>(rng() % 48);
    const LabelMap gt = random_map(h, w, 1 + static_cast<int>(rng() % 10), rng);
    const LabelMap pred = trial % 3 ? perturb(gt, rng) : random_map(h, w, 1 + static_cast<int>(rng() % 10), rng);
    const IouTable t = iou_table(pred, gt);
    double prev = 2.0;
    for (double tau : kF1Thresholds) {
      const MatchResult g = match_greedy(t, tau);
      CHECK(g.true_positives == brute_max_matching(t, tau));
      CHECK(match_optimal(t, tau).true_positives == g.true_positives);
      const double f = f1_at(pred, gt, tau);
      CHECK(f <= prev);
      prev = f;
    }
    for (double tau : {0.1, 0.3}) CHECK(match_optimal(t, tau).true_positives == brute_max_matching(t, tau));

    std::vector<Label> perm(pred.max_label() + 1);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin() + 1, perm.end(), rng);
    LabelMap shuffled = pred;
    for (Label& v : shuffled.values) v = perm[v] * 7;
    for (double tau : kF1Thresholds) CHECK(f1_at(shuffled, gt, tau) == f1_at(pred, gt, tau));
  }
}

TEST_CASE("dataset report pools counts") {
  LabelMap a(1, 4), b(1, 4);
  a.values = {1, 1, 0, 2};
  b.values = {1, 1, 0, 0};
  const DatasetReport r = evaluate_dataset({{a, a}, {b, a}});
  CHECK(r.per_image.size() == 2);
  CHECK(r.tp[0] == 3);
  CHECK(r.fn[0] == 1);
  CHECK(r.fp[0] == 0);
  CHECK(r.pooled_f1_05 == doctest::Approx(6.0 / 7.0));
  const auto j = r.to_json();
  CHECK(j["pooled"]["per_tau"]["0.5"]["tp"] == 3);
  CHECK(j["per_image"].size() == 2);
  CHECK_THROWS(evaluate_dataset(std::vector<LabelMap>{a}, std::vector<LabelMap>{}));
}
