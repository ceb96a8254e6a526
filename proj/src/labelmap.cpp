#include "instanseg/labelmap.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <unordered_map>

namespace instanseg {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Felzenszwalb-Huttenlocher lower envelope: squared distance transform of a
// sampled function f along one line.
void edt_1d(const double* f, double* d, int n, std::vector<int>& v, std::vector<double>& z) {
  v.resize(n);
  z.resize(n + 1);
  int k = 0;
  int first = -1;
  for (int q = 0; q < n; ++q) {
    if (f[q] < kInf) {
      first = q;
      break;
    }
  }
  if (first < 0) {
    for (int q = 0; q < n; ++q) d[q] = kInf;
    return;
  }
  v[0] = first;
  z[0] = -kInf;
  z[1] = kInf;
  for (int q = first + 1; q < n; ++q) {
    if (f[q] == kInf) continue;
    double s = 0.0;
    while (true) {
      const int p = v[k];
      s = ((f[q] + double(q) * q) - (f[p] + double(p) * p)) / (2.0 * (q - p));
      if (s > z[k]) break;
      --k;  // z[0] is -inf, so k never drops below zero
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kInf;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    const double dq = q - v[k];
    d[q] = dq * dq + f[v[k]];
  }
}

}  // namespace

LabelMap connected_components(const BinaryMask& mask) {
  LabelMap out(mask.height, mask.width);
  Label next = 0;
  std::vector<Pixel> stack;
  for (int r = 0; r < mask.height; ++r) {
    for (int c = 0; c < mask.width; ++c) {
      if (!mask.at(r, c) || out.at(r, c)) continue;
      ++next;
      out.at(r, c) = next;
      stack.push_back({r, c});
      while (!stack.empty()) {
        const Pixel p = stack.back();
        stack.pop_back();
        const Pixel nb[4] = {{p.row - 1, p.col}, {p.row + 1, p.col}, {p.row, p.col - 1}, {p.row, p.col + 1}};
        for (const Pixel& q : nb) {
          if (q.row < 0 || q.col < 0 || q.row >= mask.height || q.col >= mask.width) continue;
          if (!mask.at(q.row, q.col) || out.at(q.row, q.col)) continue;
          out.at(q.row, q.col) = next;
          stack.push_back(q);
        }
      }
    }
  }
  return out;
}

DistanceMap boundary_distance(const LabelMap& labels) {
  DistanceMap out(labels.height, labels.width, 0.0);
  const auto stats = instance_stats(labels);
  std::vector<double> f, d, col_in, col_out;
  std::vector<int> v;
  std::vector<double> z;
  for (const auto& [label, info] : stats) {
    // Any nearest differently-labelled pixel can be clamped into the bbox
    // grown by one pixel, so the transform only needs that window.
    const Rect box = intersect(Rect{info.bbox.top - 1, info.bbox.left - 1, info.bbox.height + 2,
                                    info.bbox.width + 2},
                               Rect{0, 0, labels.height, labels.width});
    const int h = box.height, w = box.width;
    f.assign(static_cast<std::size_t>(h) * w, 0.0);
    bool has_feature = false;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const bool same = labels.at(box.top + y, box.left + x) == label;
        f[static_cast<std::size_t>(y) * w + x] = same ? kInf : 0.0;
        has_feature = has_feature || !same;
      }
    if (!has_feature) {
      // The instance covers the whole image: no boundary to measure against.
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) out.at(box.top + y, box.left + x) = 1.0;
      continue;
    }
    d.resize(f.size());
    col_in.resize(h);
    col_out.resize(h);
    for (int x = 0; x < w; ++x) {
      for (int y = 0; y < h; ++y) col_in[y] = f[static_cast<std::size_t>(y) * w + x];
      edt_1d(col_in.data(), col_out.data(), h, v, z);
      for (int y = 0; y < h; ++y) d[static_cast<std::size_t>(y) * w + x] = col_out[y];
    }
    for (int y = 0; y < h; ++y) edt_1d(d.data() + static_cast<std::size_t>(y) * w, f.data() + static_cast<std::size_t>(y) * w, w, v, z);
    double peak = 0.0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (labels.at(box.top + y, box.left + x) == label) peak = std::max(peak, f[static_cast<std::size_t>(y) * w + x]);
    peak = std::sqrt(peak);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (labels.at(box.top + y, box.left + x) == label) {
          out.at(box.top + y, box.left + x) = std::sqrt(f[static_cast<std::size_t>(y) * w + x]) / peak;
        }
  }
  return out;
}

double iou(const BinaryMask& a, const BinaryMask& b) {
  if (!a.same_dims(b)) {
    throw std::invalid_argument("iou: mask dimensions " + std::to_string(a.height) + "x" +
                                std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" +
                                std::to_string(b.width));
  }
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a.values[i] != 0, y = b.values[i] != 0;
    inter += x && y;
    uni += x || y;
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

BinaryMask binary_mask(const LabelMap& labels, Label k) {
  BinaryMask m(labels.height, labels.width);
  for (std::size_t i = 0; i < labels.size(); ++i) m.values[i] = labels.values[i] == k ? 1 : 0;
  return m;
}

BinaryMask foreground_mask(const LabelMap& labels) {
  BinaryMask m(labels.height, labels.width);
  for (std::size_t i = 0; i < labels.size(); ++i) m.values[i] = labels.values[i] != 0 ? 1 : 0;
  return m;
}

LabelMap relabel_sequential(const LabelMap& labels) {
  LabelMap out(labels.height, labels.width);
  std::unordered_map<Label, Label> remap;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const Label l = labels.values[i];
    if (l == 0) continue;
    auto [it, inserted] = remap.try_emplace(l, static_cast<Label>(remap.size() + 1));
    out.values[i] = it->second;
  }
  return out;
}

std::map<Label, InstanceInfo> instance_stats(const LabelMap& labels) {
  std::map<Label, InstanceInfo> out;
  std::map<Label, std::array<int, 4>> ext;  // top, left, bottom, right (inclusive)
  for (int r = 0; r < labels.height; ++r)
    for (int c = 0; c < labels.width; ++c) {
      const Label l = labels.at(r, c);
      if (l == 0) continue;
      auto& info = out[l];
      info.label = l;
      ++info.area;
      info.centroid_row += r;
      info.centroid_col += c;
      auto [it, fresh] = ext.try_emplace(l, std::array<int, 4>{r, c, r, c});
      if (!fresh) {
        auto& e = it->second;
        e[0] = std::min(e[0], r);
        e[1] = std::min(e[1], c);
        e[2] = std::max(e[2], r);
        e[3] = std::max(e[3], c);
      }
    }
  for (auto& [l, info] : out) {
    info.centroid_row /= static_cast<double>(info.area);
    info.centroid_col /= static_cast<double>(info.area);
    const auto& e = ext[l];
    info.bbox = Rect{e[0], e[1], e[2] - e[0] + 1, e[3] - e[1] + 1};
  }
  return out;
}

bool same_partition(const LabelMap& a, const LabelMap& b) {
  if (!a.same_dims(b)) return false;
  std::unordered_map<Label, Label> fwd, bwd;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const Label x = a.values[i], y = b.values[i];
    if ((x == 0) != (y == 0)) return false;
    if (x == 0) continue;
    auto [f, fn] = fwd.try_emplace(x, y);
    if (!fn && f->second != y) return false;
    auto [g, gn] = bwd.try_emplace(y, x);
    if (!gn && g->second != x) return false;
  }
  return true;
}

}  // namespace instanseg
