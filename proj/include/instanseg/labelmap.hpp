#pragma once

// Label-map utilities. Connectivity is 4-neighbour throughout.

#include <map>
#include <vector>

#include "instanseg/image.hpp"

namespace instanseg {

// Labels 1..K in raster order of each component's first pixel.
LabelMap connected_components(const BinaryMask& mask);

// Euclidean distance from each foreground pixel to the nearest pixel carrying
// a different label (background or another instance), divided by the
// maximum of that distance within the pixel's instance. Background is 0 and
// every instance peaks at exactly 1.
DistanceMap boundary_distance(const LabelMap& labels);

// |a & b| / |a | b|, 0 when both are empty.
double iou(const BinaryMask& a, const BinaryMask& b);

BinaryMask binary_mask(const LabelMap& labels, Label k);
BinaryMask foreground_mask(const LabelMap& labels);

// Positive labels remapped to 1..K by raster order of first occurrence.
LabelMap relabel_sequential(const LabelMap& labels);

struct InstanceInfo {
  Label label = 0;
  long area = 0;
  Rect bbox;
  double centroid_row = 0.0, centroid_col = 0.0;
};

// Per-label statistics keyed by label.
std::map<Label, InstanceInfo> instance_stats(const LabelMap& labels);

// True when both maps induce the same partition of the pixels (labels may
// differ by a bijection, background must coincide).
bool same_partition(const LabelMap& a, const LabelMap& b);

}  // namespace instanseg
