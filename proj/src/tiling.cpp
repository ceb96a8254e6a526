#include "instanseg/tiling.hpp"

#include <algorithm>
#include <stdexcept>
#include <unordered_map>

#include <omp.h>

#include "instanseg/labelmap.hpp"
#include "instanseg/png_io.hpp"

namespace instanseg {

std::vector<int> tile_origins(int extent, int tile_size, int overlap) {
  if (tile_size <= 2 * overlap) {
    throw std::invalid_argument("plan_tiles: tile size " + std::to_string(tile_size) + " must exceed twice the overlap (" +
                                std::to_string(overlap) + ")");
  }
  if (overlap < 0) throw std::invalid_argument("plan_tiles: negative overlap");
  if (extent <= tile_size) return {0};
  const int stride = tile_size - overlap;
  std::vector<int> out;
  for (int o = 0;; o += stride) {
    if (o + tile_size >= extent) {
      out.push_back(extent - tile_size);
      break;
    }
    out.push_back(o);
  }
  return out;
}

TilePlan plan_tiles(int height, int width, int tile_size, int overlap) {
  TilePlan p;
  p.height = height;
  p.width = width;
  p.tile_size = tile_size;
  p.overlap = overlap;
  p.row_origins = tile_origins(height, tile_size, overlap);
  p.col_origins = tile_origins(width, tile_size, overlap);
  for (int r : p.row_origins)
    for (int c : p.col_origins) p.tiles.push_back(intersect(Rect{r, c, tile_size, tile_size}, Rect{0, 0, height, width}));
  return p;
}

Image ImageProvider::read_block(const Rect& r) const {
  if (r.top < 0 || r.left < 0 || r.bottom() > height() || r.right() > width()) {
    throw std::invalid_argument("read_block: rectangle outside the image");
  }
  const auto px = static_cast<std::size_t>(r.area());
  ++blocks_;
  pixels_ += px;
  std::size_t prev = peak_.load();
  while (px > prev && !peak_.compare_exchange_weak(prev, px)) {
  }
  return read_block_impl(r);
}

PngImageProvider::PngImageProvider(const std::filesystem::path& path) : image_(png::read_image(path)) {}

namespace {

struct Fragment {
  Rect tile;
  std::vector<std::size_t> pixels;  // global row-major indices
};

class LabelStore {
 public:
  LabelStore(int h, int w) : labels_(h, w) {}

  // Committed label that best matches the fragment, or 0.
  Label match(const Fragment& f) const {
    std::unordered_map<Label, std::size_t> inter;
    for (std::size_t i : f.pixels)
      if (labels_.values[i]) ++inter[labels_.values[i]];
    if (inter.empty()) return 0;
    std::unordered_map<Label, std::size_t> in_tile;
    for (int r = f.tile.top; r < f.tile.bottom(); ++r)
      for (int c = f.tile.left; c < f.tile.right(); ++c) {
        const Label l = labels_.at(r, c);
        if (l && inter.count(l)) ++in_tile[l];
      }
    Label best = 0;
    double best_iou = kTileMatchIou;
    for (const auto& [l, n] : inter) {
      const double iou = static_cast<double>(n) / static_cast<double>(f.pixels.size() + in_tile[l] - n);
      if (iou > best_iou || (iou == best_iou && (best == 0 || l < best))) {
        best_iou = iou;
        best = l;
      }
    }
    return best;
  }

  void write(const Fragment& f, Label l) {
    for (std::size_t i : f.pixels)
      if (!labels_.values[i]) labels_.values[i] = l;
  }

  Label fresh() { return ++next_; }
  const LabelMap& labels() const { return labels_; }

 private:
  LabelMap labels_;
  Label next_ = 0;
};

bool touches_shared_edge(const Fragment& f, int width, int img_h, int img_w) {
  const Rect& t = f.tile;
  for (std::size_t i : f.pixels) {
    const int r = static_cast<int>(i / width), c = static_cast<int>(i % width);
    if ((r == t.top && t.top > 0) || (r == t.bottom() - 1 && t.bottom() < img_h) || (c == t.left && t.left > 0) ||
        (c == t.right() - 1 && t.right() < img_w)) {
      return true;
    }
  }
  return false;
}

}  // namespace

LabelMap infer_tiled(const ImageProvider& source, const FeatureExtractor& extractor, const PipelineConfig& cfg,
                     int tile_size, int overlap) {
  const int h = source.height(), w = source.width();
  const TilePlan plan = plan_tiles(h, w, tile_size, overlap);
  LabelStore store(h, w);
  std::vector<Fragment> pending;
  const std::size_t batch = static_cast<std::size_t>(std::max(1, omp_get_max_threads()));

  for (std::size_t start = 0; start < plan.tiles.size(); start += batch) {
    const std::size_t end = std::min(plan.tiles.size(), start + batch);
    std::vector<LabelMap> results(end - start);
#pragma omp parallel for schedule(dynamic)
    for (std::size_t i = start; i < end; ++i) results[i - start] = run_inference(source.read_block(plan.tiles[i]), extractor, cfg);

    for (std::size_t i = start; i < end; ++i) {
      const Rect& tile = plan.tiles[i];
      const LabelMap& local = results[i - start];
      std::vector<Fragment> frags(local.max_label());
      for (auto& f : frags) f.tile = tile;
      for (int r = 0; r < local.height; ++r)
        for (int c = 0; c < local.width; ++c)
          if (const Label l = local.at(r, c))
            frags[l - 1].pixels.push_back(static_cast<std::size_t>(tile.top + r) * w + (tile.left + c));
      for (auto& f : frags) {
        if (f.pixels.empty()) continue;
        if (const Label l = store.match(f)) {
          store.write(f, l);
        } else if (touches_shared_edge(f, w, h, w)) {
          pending.push_back(std::move(f));
        } else {
          store.write(f, store.fresh());
        }
      }
    }
  }
  for (const auto& f : pending) {
    const Label l = store.match(f);
    store.write(f, l ? l : store.fresh());
  }
  return relabel_sequential(store.labels());
}

}  // namespace instanseg
