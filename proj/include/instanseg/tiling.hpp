#pragma once

// Tiled inference with label-space stitching.

#include <atomic>
#include <cstddef>
#include <filesystem>
#include <vector>

#include "instanseg/image.hpp"
#include "instanseg/pipeline.hpp"

namespace instanseg {

struct TilePlan {
  int height = 0, width = 0, tile_size = 512, overlap = 80;
  std::vector<int> row_origins, col_origins;
  std::vector<Rect> tiles;  // raster order
};

// Origins 0, stride, 2 stride, ... with the last one clamped so the tile ends
// at the border.
std::vector<int> tile_origins(int extent, int tile_size, int overlap);
TilePlan plan_tiles(int height, int width, int tile_size = 512, int overlap = 80);

// Block access to an image that need not be resident as a whole.
class ImageProvider {
 public:
  virtual ~ImageProvider() = default;
  virtual int height() const = 0;
  virtual int width() const = 0;
  virtual int channels() const = 0;
  Image read_block(const Rect& r) const;

  std::size_t blocks_read() const { return blocks_; }
  std::size_t pixels_read() const { return pixels_; }
  std::size_t peak_block_pixels() const { return peak_; }

 protected:
  virtual Image read_block_impl(const Rect& r) const = 0;

 private:
  mutable std::atomic<std::size_t> blocks_{0}, pixels_{0}, peak_{0};
};

class MemoryImageProvider final : public ImageProvider {
 public:
  explicit MemoryImageProvider(Image image) : image_(std::move(image)) {}
  int height() const override { return image_.height; }
  int width() const override { return image_.width; }
  int channels() const override { return image_.channels; }

 protected:
  Image read_block_impl(const Rect& r) const override { return crop_image(image_, r); }

 private:
  Image image_;
};

// Decodes the whole PNG on construction; blocks are served from it.
class PngImageProvider final : public ImageProvider {
 public:
  explicit PngImageProvider(const std::filesystem::path& path);
  int height() const override { return image_.height; }
  int width() const override { return image_.width; }
  int channels() const override { return image_.channels; }

 protected:
  Image read_block_impl(const Rect& r) const override { return crop_image(image_, r); }

 private:
  Image image_;
};

// Tiles are inferred independently (with TTA when cfg.tta is set) (in parallel batches) and reconciled in
// plan order against a global label store. Each tile instance is compared
// with the committed labels it overlaps; IoU >= 0.5, measured against the part
// of the committed instance inside the tile, merges it into that label.
// Unmatched instances touching an edge shared with another tile are held back
// until every tile is committed, so the complete copy of an object seen whole
// by a neighbour wins over its truncated piece. Output labels are sequential.
LabelMap infer_tiled(const ImageProvider& source, const FeatureExtractor& extractor, const PipelineConfig& cfg,
                     int tile_size = 512, int overlap = 80);

inline constexpr double kTileMatchIou = 0.5;

}  // namespace instanseg
