#include <doctest.h>

#include <random>

#include "instanseg/labelmap.hpp"
#include "instanseg/metrics.hpp"
#include "instanseg/pipeline.hpp"
#include "instanseg/synthdata.hpp"

using namespace instanseg;

namespace {

Image seed_image(int h, int w, std::initializer_list<std::tuple<int, int, double>> peaks) {
  Image s(1, h, w);
  for (auto [r, c, v] : peaks) s.at(0, r, c) = v;
  return s;
}

LabelMap disc_map(int h, int w, std::initializer_list<std::tuple<int, int, int>> discs) {
  LabelMap m(h, w);
  Label next = 1;
  for (auto [r0, c0, rad] : discs) {
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c)
        if ((r - r0) * (r - r0) + (c - c0) * (c - c0) <= rad * rad) m.at(r, c) = next;
    ++next;
  }
  return m;
}

InstanceCandidate box_candidate(Rect window, double score, Rect on) {
  InstanceCandidate c;
  c.seed = {{window.top, window.left}, score};
  c.window = window;
  c.logits.assign(window.area(), -1.0);
  c.mask.assign(window.area(), 0);
  for (int r = 0; r < window.height; ++r)
    for (int k = 0; k < window.width; ++k)
      if (on.contains(window.top + r, window.left + k)) {
        c.logits[r * window.width + k] = 1.0;
        c.mask[r * window.width + k] = 1;
        ++c.area;
      }
  return c;
}

}  // namespace

TEST_CASE("pipeline config validation and json") {
  PipelineConfig c;
  c.validate();
  c.crop_size = 0;
  CHECK_THROWS(c.validate());
  c = {};
  c.merge_iou = 1.5;
  CHECK_THROWS(c.validate());
  nlohmann::json j = PipelineConfig{};
  CHECK(j.get<PipelineConfig>() == PipelineConfig{});
  j["extra"] = true;
  CHECK_THROWS(j.get<PipelineConfig>());
}

TEST_CASE("seed sampling") {
  PipelineConfig cfg;
  const Image s = seed_image(10, 10, {{2, 2, 0.9}, {2, 4, 0.7}, {8, 8, 0.95}, {5, 5, 0.3}});
  const auto seeds = sample_seeds(s, cfg);
  // (2,4) is within the 5x5 window of the stronger (2,2); (5,5) is below threshold.
  REQUIRE(seeds.size() == 2);
  CHECK(seeds[0].u == Pixel{8, 8});
  CHECK(seeds[1].u == Pixel{2, 2});

  // A flat plateau yields one seed at its raster-first pixel.
  Image flat(1, 6, 6);
  for (int r = 1; r < 4; ++r)
    for (int c = 2; c < 5; ++c) flat.at(0, r, c) = 0.8;
  const auto p = sample_seeds(flat, cfg);
  REQUIRE(p.size() == 1);
  CHECK(p[0].u == Pixel{1, 2});

  CHECK(sample_seeds(Image(1, 5, 5, 0.4), cfg).empty());
}

TEST_CASE("seed window is centred and clipped") {
  CHECK(seed_window({50, 50}, 100, 100, 20) == Rect{40, 40, 20, 20});
  CHECK(seed_window({2, 98}, 100, 100, 20) == Rect{0, 88, 12, 12});
  CHECK(seed_window({5, 5}, 8, 8, 128) == Rect{0, 0, 8, 8});
}

TEST_CASE("analytic fixture reproduces the labels") {
  std::mt19937_64 rng(4);
  SynthConfig sc;
  sc.size = 96;
  sc.seed = 12;
  for (int i = 0; i < 5; ++i) {
    const Sample smp = gen_sample(sc, i);
    const LabelMap out = infer(labels_as_image(smp.labels), AnalyticExtractor(4, 4), PipelineConfig{});
    CHECK(same_partition(out, smp.labels));
  }
}

TEST_CASE("analytic head logit is radius minus L1 offset") {
  const InstanceHead h = analytic_head(4, 4);
  std::vector<double> scratch(h.hidden_width());
  const std::vector<double> off{1.0, -2.0, 0.0, 0.0}, cond{5.0, 0.0, 0.0, 0.0};
  CHECK(h.logit(off, cond, scratch) == doctest::Approx(2.0));
  CHECK_THROWS(analytic_head(4, 0));
}

TEST_CASE("merge_redundant unions overlapping fragments") {
  PipelineConfig cfg;
  const Rect obj{10, 10, 10, 10};
  std::vector<InstanceCandidate> c{box_candidate({5, 5, 16, 16}, 0.9, obj),
                                   box_candidate({8, 8, 16, 16}, 0.8, Rect{10, 10, 10, 9}),
                                   box_candidate({30, 30, 6, 6}, 0.7, Rect{31, 31, 3, 3})};
  CHECK(candidate_iou(c[0], c[1]) == doctest::Approx(0.9));
  CHECK(candidate_iou(c[0], c[2]) == 0.0);
  const auto merged = merge_redundant(c, cfg);
  REQUIRE(merged.size() == 2);
  CHECK(merged[0].area == 100);
  CHECK(merged[0].window == Rect{5, 5, 19, 19});
  const LabelMap flat = flatten(merged, 40, 40);
  CHECK(flat.max_label() == 2);
  CHECK(binary_mask(flat, 1).count() == 100);

  // Below the threshold nothing merges.
  std::vector<InstanceCandidate> apart{box_candidate({0, 0, 10, 10}, 0.9, Rect{0, 0, 4, 10}),
                                       box_candidate({0, 0, 10, 10}, 0.8, Rect{3, 0, 4, 10})};
  CHECK(merge_redundant(apart, cfg).size() == 2);
}

TEST_CASE("flatten resolves overlaps by the largest logit") {
  InstanceCandidate a = box_candidate({0, 0, 4, 4}, 0.9, Rect{0, 0, 4, 4});
  InstanceCandidate b = box_candidate({0, 2, 4, 4}, 0.8, Rect{0, 2, 4, 4});
  for (double& v : b.logits) v = v > 0 ? 2.0 : v;
  const LabelMap m = flatten({a, b}, 4, 6);
  CHECK(m.at(0, 0) == 1);
  CHECK(m.at(0, 2) == 2);
  CHECK(m.at(3, 5) == 2);
  // Equal logits go to the lower index.
  const LabelMap t = flatten({a, box_candidate({0, 2, 4, 4}, 0.8, Rect{0, 2, 4, 4})}, 4, 6);
  CHECK(t.at(0, 3) == 1);
  CHECK(t.at(0, 4) == 2);
  CHECK(flatten({}, 3, 3).max_label() == 0);
}

TEST_CASE("a large instance seeded twice comes out whole") {
  LabelMap m = disc_map(64, 64, {{32, 32, 20}});
  AnalyticFixture fx = analytic_bundle(m, 4, 4);
  // Zero offsets everywhere and a radius wide enough to cover the object
  // from any seed: each candidate is a large diamond.
  for (double& v : fx.bundle.positional.values) v = 0.0;
  for (int r = 0; r < 64; ++r)
    for (int c = 0; c < 64; ++c) fx.bundle.conditional.at(0, r, c) = 20.0;
  const std::vector<Seed> seeds{{{30, 32}, 1.0}, {{34, 32}, 0.99}};
  PipelineConfig cfg;
  const auto cands = predict_instances(fx.bundle, seeds, fx.head, cfg);
  REQUIRE(cands.size() == 2);
  const auto merged = merge_redundant(cands, cfg);
  CHECK(merged.size() == 1);
  CHECK(flatten(merged, 64, 64).max_label() == 1);
}

TEST_CASE("tta matches plain inference on equivariant features") {
  const LabelMap m = disc_map(40, 56, {{10, 10, 6}, {25, 40, 8}, {30, 12, 5}});
  const AnalyticExtractor ex(4, 4);
  const Image img = labels_as_image(m);
  const LabelMap plain = infer(img, ex, PipelineConfig{});
  PipelineConfig cfg;
  cfg.tta = true;
  const LabelMap aug = run_inference(img, ex, cfg);
  CHECK(same_partition(plain, aug));
  CHECK(same_partition(plain, m));
}

TEST_CASE("inference is equivariant under the dihedral group") {
  const LabelMap m = disc_map(48, 48, {{10, 12, 6}, {30, 30, 9}, {40, 8, 4}});
  const AnalyticExtractor ex(4, 4);
  const LabelMap base = infer(labels_as_image(m), ex, PipelineConfig{});
  for (const Dihedral& t : Dihedral::group()) {
    const LabelMap out = infer(labels_as_image(transform(m, t)), ex, PipelineConfig{});
    CHECK(same_partition(out, transform(base, t)));
  }
}

TEST_CASE("candidate memory accounting") {
  const LabelMap m = disc_map(256, 256, {{50, 50, 10}});
  const AnalyticFixture fx = analytic_bundle(m, 4, 4);
  PipelineConfig cfg;
  cfg.crop_size = 32;
  for (int n : {1, 5, 20}) {
    std::vector<Seed> seeds;
    for (int i = 0; i < n; ++i) seeds.push_back({{40 + 8 * (i % 20), 40 + 8 * (i / 20)}, 1.0});
    AllocationStats stats;
    const auto cands = predict_instances(fx.bundle, seeds, fx.head, cfg, &stats);
    // Returned candidates keep their buffers; dropped ones are released.
    std::size_t held = 0;
    for (const auto& c : cands) held += static_cast<std::size_t>(c.window.area()) * kCandidateBytesPerPixel;
    CHECK(stats.current.load() == held);
    const std::size_t bound = static_cast<std::size_t>(n) * 32 * 32 * kCandidateBytesPerPixel;
    CHECK(stats.peak.load() <= bound);
    CHECK(stats.peak.load() >= bound / 2);
  }
}
