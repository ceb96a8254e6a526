#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace instanseg {

struct Rect {
  int top = 0, left = 0, height = 0, width = 0;

  int bottom() const { return top + height; }
  int right() const { return left + width; }
  bool empty() const { return height <= 0 || width <= 0; }
  bool contains(int r, int c) const { return r >= top && r < bottom() && c >= left && c < right(); }
  long area() const { return empty() ? 0 : static_cast<long>(height) * width; }
  friend bool operator==(const Rect&, const Rect&) = default;
};

Rect intersect(const Rect& a, const Rect& b);
Rect bounding_union(const Rect& a, const Rect& b);

struct Pixel {
  int row = 0, col = 0;
  friend bool operator==(const Pixel&, const Pixel&) = default;
};

// Row-major H x W grid; the common base of the label-map family.
template <typename T>
struct Grid {
  int height = 0, width = 0;
  std::vector<T> values;

  Grid() = default;
  Grid(int h, int w, T fill = T{}) : height(h), width(w), values(static_cast<std::size_t>(h) * w, fill) {}

  T& at(int r, int c) { return values[static_cast<std::size_t>(r) * width + c]; }
  const T& at(int r, int c) const { return values[static_cast<std::size_t>(r) * width + c]; }
  std::size_t size() const { return values.size(); }
  bool same_dims(const auto& other) const { return height == other.height && width == other.width; }
  friend bool operator==(const Grid&, const Grid&) = default;
};

using Label = std::uint32_t;

struct LabelMap : Grid<Label> {
  using Grid::Grid;
  Label max_label() const;
};

struct BinaryMask : Grid<std::uint8_t> {
  using Grid::Grid;
  std::size_t count() const;
};

// Values in [0, 1]; zero on background.
struct DistanceMap : Grid<double> {
  using Grid::Grid;
};

// Planar C x H x W image of doubles.
struct Image {
  int channels = 0, height = 0, width = 0;
  std::vector<double> values;

  Image() = default;
  Image(int c, int h, int w, double fill = 0.0)
      : channels(c), height(h), width(w), values(static_cast<std::size_t>(c) * h * w, fill) {}

  double& at(int ch, int r, int c) { return values[(static_cast<std::size_t>(ch) * height + r) * width + c]; }
  double at(int ch, int r, int c) const {
    return values[(static_cast<std::size_t>(ch) * height + r) * width + c];
  }
  std::size_t plane_size() const { return static_cast<std::size_t>(height) * width; }
  friend bool operator==(const Image&, const Image&) = default;
};

Image crop_image(const Image& img, const Rect& r);
LabelMap crop_labels(const LabelMap& labels, const Rect& r);
// Zero-pads on the bottom/right up to the requested size.
Image pad_image(const Image& img, int height, int width);

// One of the axis-aligned symmetries of the pixel grid, applied as
// rotate (counter-clockwise quarter turns), then horizontal flip, then
// vertical flip. Rotations swap H and W.
struct Dihedral {
  int quarter_turns = 0;
  bool hflip = false;
  bool vflip = false;

  // Destination coordinates of source pixel p in an h x w image.
  Pixel map(Pixel p, int h, int w) const;
  // Source coordinates of destination pixel q, where h x w is the source size.
  Pixel unmap(Pixel q, int h, int w) const;
  bool swaps_axes() const { return quarter_turns % 2 == 1; }

  // The 8 distinct symmetries.
  static std::vector<Dihedral> group();
  // The 16 (rotation, hflip, vflip) combinations used for test-time
  // augmentation. As geometric actions each of the 8 symmetries occurs twice.
  static std::vector<Dihedral> tta_set();
};

Image transform(const Image& img, const Dihedral& t);
LabelMap transform(const LabelMap& labels, const Dihedral& t);
DistanceMap transform(const DistanceMap& m, const Dihedral& t);

}  // namespace instanseg
