#include "instanseg/image.hpp"

#include <algorithm>

namespace instanseg {

Rect intersect(const Rect& a, const Rect& b) {
  const int top = std::max(a.top, b.top), left = std::max(a.left, b.left);
  const int bottom = std::min(a.bottom(), b.bottom()), right = std::min(a.right(), b.right());
  if (bottom <= top || right <= left) return Rect{top, left, 0, 0};
  return Rect{top, left, bottom - top, right - left};
}

Rect bounding_union(const Rect& a, const Rect& b) {
  if (a.empty()) return b;
  if (b.empty()) return a;
  const int top = std::min(a.top, b.top), left = std::min(a.left, b.left);
  return Rect{top, left, std::max(a.bottom(), b.bottom()) - top, std::max(a.right(), b.right()) - left};
}

Label LabelMap::max_label() const {
  Label m = 0;
  for (Label v : values) m = std::max(m, v);
  return m;
}

std::size_t BinaryMask::count() const {
  return static_cast<std::size_t>(std::count_if(values.begin(), values.end(), [](auto v) { return v != 0; }));
}

Image crop_image(const Image& img, const Rect& r) {
  if (r.top < 0 || r.left < 0 || r.bottom() > img.height || r.right() > img.width) {
    throw std::invalid_argument("crop_image: rectangle outside image");
  }
  Image out(img.channels, r.height, r.width);
  for (int ch = 0; ch < img.channels; ++ch)
    for (int y = 0; y < r.height; ++y)
      for (int x = 0; x < r.width; ++x) out.at(ch, y, x) = img.at(ch, r.top + y, r.left + x);
  return out;
}

LabelMap crop_labels(const LabelMap& labels, const Rect& r) {
  if (r.top < 0 || r.left < 0 || r.bottom() > labels.height || r.right() > labels.width) {
    throw std::invalid_argument("crop_labels: rectangle outside label map");
  }
  LabelMap out(r.height, r.width);
  for (int y = 0; y < r.height; ++y)
    for (int x = 0; x < r.width; ++x) out.at(y, x) = labels.at(r.top + y, r.left + x);
  return out;
}

Image pad_image(const Image& img, int height, int width) {
  Image out(img.channels, std::max(height, img.height), std::max(width, img.width));
  for (int ch = 0; ch < img.channels; ++ch)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) out.at(ch, y, x) = img.at(ch, y, x);
  return out;
}

Pixel Dihedral::map(Pixel p, int h, int w) const {
  int r = p.row, c = p.col;
  for (int i = 0; i < quarter_turns % 4; ++i) {
    // Counter-clockwise quarter turn of an h x w grid yields w x h.
    const int nr = w - 1 - c, nc = r;
    r = nr;
    c = nc;
    std::swap(h, w);
  }
  if (hflip) c = w - 1 - c;
  if (vflip) r = h - 1 - r;
  return {r, c};
}

Pixel Dihedral::unmap(Pixel q, int h, int w) const {
  // Undo in reverse order, tracking the grid size after the rotation.
  int rh = h, rw = w;
  if (swaps_axes()) std::swap(rh, rw);
  int r = q.row, c = q.col;
  if (vflip) r = rh - 1 - r;
  if (hflip) c = rw - 1 - c;
  for (int i = 0; i < quarter_turns % 4; ++i) {
    // Inverse of a counter-clockwise turn on an rh x rw grid (source rw x rh).
    const int nr = c, nc = rh - 1 - r;
    r = nr;
    c = nc;
    std::swap(rh, rw);
  }
  return {r, c};
}

std::vector<Dihedral> Dihedral::group() {
  std::vector<Dihedral> out;
  for (int t = 0; t < 4; ++t)
    for (bool f : {false, true}) out.push_back({t, f, false});
  return out;
}

std::vector<Dihedral> Dihedral::tta_set() {
  std::vector<Dihedral> out;
  for (int t = 0; t < 4; ++t)
    for (bool h : {false, true})
      for (bool v : {false, true}) out.push_back({t, h, v});
  return out;
}

namespace {

template <typename G>
G transform_grid(const G& g, const Dihedral& t) {
  G out;
  out.height = t.swaps_axes() ? g.width : g.height;
  out.width = t.swaps_axes() ? g.height : g.width;
  out.values.resize(g.values.size());
  for (int r = 0; r < g.height; ++r)
    for (int c = 0; c < g.width; ++c) {
      const Pixel q = t.map({r, c}, g.height, g.width);
      out.at(q.row, q.col) = g.at(r, c);
    }
  return out;
}

}  // namespace

Image transform(const Image& img, const Dihedral& t) {
  const int oh = t.swaps_axes() ? img.width : img.height;
  const int ow = t.swaps_axes() ? img.height : img.width;
  Image out(img.channels, oh, ow);
  for (int r = 0; r < img.height; ++r)
    for (int c = 0; c < img.width; ++c) {
      const Pixel q = t.map({r, c}, img.height, img.width);
      for (int ch = 0; ch < img.channels; ++ch) out.at(ch, q.row, q.col) = img.at(ch, r, c);
    }
  return out;
}

LabelMap transform(const LabelMap& labels, const Dihedral& t) { return transform_grid(labels, t); }
DistanceMap transform(const DistanceMap& m, const Dihedral& t) { return transform_grid(m, t); }

}  // namespace instanseg
