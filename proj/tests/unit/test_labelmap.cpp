#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "instanseg/labelmap.hpp"
#include "instanseg/png_io.hpp"

using namespace instanseg;

namespace {

LabelMap random_blobs(int h, int w, std::mt19937_64& rng, int k) {
  LabelMap m(h, w);
  std::uniform_int_distribution<int> rr(0, h - 1), cc(0, w - 1), rad(1, 4);
  for (int i = 1; i <= k; ++i) {
    const int r0 = rr(rng), c0 = cc(rng), r = rad(rng);
    for (int y = std::max(0, r0 - r); y < std::min(h, r0 + r + 1); ++y)
      for (int x = std::max(0, c0 - r); x < std::min(w, c0 + r + 1); ++x)
        if ((y - r0) * (y - r0) + (x - c0) * (x - c0) <= r * r) m.at(y, x) = static_cast<Label>(i);
  }
  return m;
}

// Brute-force normalised boundary distance.
DistanceMap brute_distance(const LabelMap& m) {
  DistanceMap d(m.height, m.width, 0.0);
  std::map<Label, double> peak;
  for (int r = 0; r < m.height; ++r)
    for (int c = 0; c < m.width; ++c) {
      const Label l = m.at(r, c);
      if (!l) continue;
      double best = 1e300;
      for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x)
          if (m.at(y, x) != l) best = std::min(best, std::hypot(double(y - r), double(x - c)));
      // Outside the image counts as background only if nothing nearer exists;
      // the production transform ignores the border, so do the same.
      d.at(r, c) = best;
      peak[l] = std::max(peak[l], best);
    }
  for (int r = 0; r < m.height; ++r)
    for (int c = 0; c < m.width; ++c)
      if (m.at(r, c)) d.at(r, c) /= peak[m.at(r, c)];
  return d;
}

}  // namespace

TEST_CASE("connected components use 4-connectivity and raster order") {
  BinaryMask m(3, 3);
  m.at(0, 0) = 1;
  m.at(1, 1) = 1;  // diagonal only: separate
  m.at(2, 1) = 1;
  m.at(0, 2) = 1;
  const LabelMap cc = connected_components(m);
  CHECK(cc.at(0, 0) == 1);
  CHECK(cc.at(0, 2) == 2);
  CHECK(cc.at(1, 1) == 3);
  CHECK(cc.at(2, 1) == 3);
  CHECK(cc.max_label() == 3);
  CHECK(connected_components(BinaryMask(4, 4)).max_label() == 0);
}

TEST_CASE("boundary distance on a single square") {
  LabelMap m(5, 5);
  for (int r = 1; r < 4; ++r)
    for (int c = 1; c < 4; ++c) m.at(r, c) = 1;
  const DistanceMap d = boundary_distance(m);
  CHECK(d.at(2, 2) == 1.0);
  CHECK(d.at(1, 1) == doctest::Approx(0.5));
  CHECK(d.at(1, 2) == doctest::Approx(0.5));
  CHECK(d.at(0, 0) == 0.0);
}

TEST_CASE("boundary distance matches brute force and peaks at 1") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    LabelMap m = random_blobs(20, 17, rng, 5);
    // Keep a background frame so the brute force and the transform agree at the border.
    for (int r = 0; r < m.height; ++r) m.at(r, 0) = m.at(r, m.width - 1) = 0;
    for (int c = 0; c < m.width; ++c) m.at(0, c) = m.at(m.height - 1, c) = 0;
    const DistanceMap fast = boundary_distance(m), slow = brute_distance(m);
    for (std::size_t i = 0; i < m.size(); ++i) CHECK(fast.values[i] == doctest::Approx(slow.values[i]).epsilon(1e-12));
    for (const auto& [l, info] : instance_stats(m)) {
      double peak = 0;
      for (std::size_t i = 0; i < m.size(); ++i)
        if (m.values[i] == l) {
          CHECK(fast.values[i] > 0.0);
          CHECK(fast.values[i] <= 1.0);
          peak = std::max(peak, fast.values[i]);
        }
      CHECK(peak == 1.0);
    }
  }
}

TEST_CASE("iou, masks and relabelling") {
  LabelMap m(2, 3);
  m.values = {5, 5, 0, 0, 9, 9};
  CHECK(binary_mask(m, 5).count() == 2);
  CHECK(foreground_mask(m).count() == 4);
  CHECK(iou(binary_mask(m, 5), binary_mask(m, 9)) == 0.0);
  CHECK(iou(binary_mask(m, 5), binary_mask(m, 5)) == 1.0);
  CHECK(iou(BinaryMask(2, 3), BinaryMask(2, 3)) == 0.0);
  CHECK_THROWS_AS(iou(BinaryMask(2, 3), BinaryMask(3, 2)), std::invalid_argument);

  const LabelMap s = relabel_sequential(m);
  CHECK(s.values == std::vector<Label>{1, 1, 0, 0, 2, 2});
  CHECK(same_partition(m, s));
  LabelMap merged = m;
  merged.values = {1, 1, 0, 0, 1, 1};
  CHECK_FALSE(same_partition(m, merged));
  LabelMap bg = m;
  bg.values[0] = 0;
  CHECK_FALSE(same_partition(m, bg));

  const auto stats = instance_stats(m);
  CHECK(stats.at(9).area == 2);
  CHECK(stats.at(9).bbox == Rect{1, 1, 1, 2});
  CHECK(stats.at(9).centroid_col == doctest::Approx(1.5));
}

TEST_CASE("rect helpers and crops") {
  CHECK(intersect(Rect{0, 0, 4, 4}, Rect{2, 3, 5, 5}) == Rect{2, 3, 2, 1});
  CHECK(intersect(Rect{0, 0, 2, 2}, Rect{5, 5, 1, 1}).empty());
  CHECK(bounding_union(Rect{0, 0, 1, 1}, Rect{3, 4, 1, 1}) == Rect{0, 0, 4, 5});
  LabelMap m(3, 3);
  m.at(2, 2) = 7;
  CHECK(crop_labels(m, Rect{1, 1, 2, 2}).at(1, 1) == 7);
  CHECK_THROWS(crop_labels(m, Rect{2, 2, 2, 2}));
  Image img(2, 2, 2, 0.5);
  const Image p = pad_image(img, 3, 4);
  CHECK(p.height == 3);
  CHECK(p.width == 4);
  CHECK(p.at(1, 1, 1) == 0.5);
  CHECK(p.at(1, 2, 3) == 0.0);
}

TEST_CASE("dihedral transforms are invertible and form the group") {
  const int h = 3, w = 5;
  for (const Dihedral& t : Dihedral::tta_set()) {
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) {
        const Pixel q = t.map({r, c}, h, w);
        CHECK(t.unmap(q, h, w) == Pixel{r, c});
      }
  }
  CHECK(Dihedral::tta_set().size() == 16);
  CHECK(Dihedral::group().size() == 8);

  LabelMap m(h, w);
  for (int i = 0; i < h * w; ++i) m.values[i] = static_cast<Label>(i + 1);
  // Each geometric action occurs exactly twice in the TTA set.
  std::vector<LabelMap> seen;
  std::vector<int> counts;
  for (const Dihedral& t : Dihedral::tta_set()) {
    const LabelMap x = transform(m, t);
    bool found = false;
    for (std::size_t i = 0; i < seen.size(); ++i)
      if (seen[i] == x) {
        ++counts[i];
        found = true;
      }
    if (!found) {
      seen.push_back(x);
      counts.push_back(1);
    }
  }
  CHECK(seen.size() == 8);
  for (int c : counts) CHECK(c == 2);

  const Dihedral quarter{1, false, false};
  const LabelMap rq = transform(m, quarter);
  CHECK(rq.height == w);
  CHECK(rq.width == h);
  // Counter-clockwise: the top-right pixel moves to the top-left.
  CHECK(rq.at(0, 0) == m.at(0, w - 1));
}

TEST_CASE("png round trips") {
  const auto dir = std::filesystem::temp_directory_path() / "instanseg_png_test";
  std::filesystem::create_directories(dir);
  LabelMap m(4, 6);
  for (std::size_t i = 0; i < m.size(); ++i) m.values[i] = static_cast<Label>(i * 2000);
  png::write_labels(dir / "l.png", m);
  CHECK(png::read_labels(dir / "l.png") == m);
  LabelMap big(1, 1);
  big.values[0] = 70000;
  CHECK_THROWS(png::write_labels(dir / "big.png", big));

  Image img(3, 2, 3);
  for (std::size_t i = 0; i < img.values.size(); ++i) img.values[i] = static_cast<double>(i) / 17.0;
  png::write_image(dir / "i.png", img);
  const Image back = png::read_image(dir / "i.png");
  CHECK(back.channels == 3);
  for (std::size_t i = 0; i < img.values.size(); ++i) CHECK(std::abs(back.values[i] - img.values[i]) <= 0.5 / 255 + 1e-12);
  CHECK_THROWS(png::read_image(dir / "missing.png"));
  std::filesystem::remove_all(dir);
}
