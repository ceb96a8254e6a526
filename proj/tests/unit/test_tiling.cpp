#include <doctest.h>

#include <filesystem>

#include "instanseg/labelmap.hpp"
#include "instanseg/png_io.hpp"
#include "instanseg/synthdata.hpp"
#include "instanseg/tiling.hpp"

using namespace instanseg;

TEST_CASE("tile origins") {
  CHECK(tile_origins(1000, 512, 80) == std::vector<int>{0, 432, 488});
  CHECK(tile_origins(512, 512, 80) == std::vector<int>{0});
  CHECK(tile_origins(300, 512, 80) == std::vector<int>{0});
  CHECK(tile_origins(512, 256, 80) == std::vector<int>{0, 176, 256});
  const TilePlan p = plan_tiles(1000, 600, 512, 80);
  CHECK(p.tiles.size() == 6);
  CHECK(p.tiles.back() == Rect{488, 88, 512, 512});
  CHECK_THROWS(plan_tiles(100, 100, 160, 80));
  // Consecutive tiles overlap by at least the requested margin.
  for (int extent : {513, 700, 1000, 2049}) {
    const auto o = tile_origins(extent, 256, 80);
    CHECK(o.front() == 0);
    CHECK(o.back() + 256 == extent);
    for (std::size_t i = 1; i < o.size(); ++i) CHECK(o[i - 1] + 256 - o[i] >= 80);
  }
}

TEST_CASE("tiled inference equals whole-image inference") {
  const AnalyticExtractor ex(4, 4);
  for (const char* preset : {"default", "crowded"}) {
    SynthConfig sc = SynthConfig::preset(preset);
    sc.size = 300;
    sc.min_instances = 40;
    sc.max_instances = 80;
    sc.seed = 5;
    for (int i = 0; i < 3; ++i) {
      const Sample s = gen_sample(sc, i);
      const Image img = labels_as_image(s.labels);
      const LabelMap whole = infer(img, ex, PipelineConfig{});
      MemoryImageProvider src(img);
      const LabelMap tiled = infer_tiled(src, ex, PipelineConfig{}, 128, 40);
      CHECK(same_partition(whole, tiled));
      CHECK(src.peak_block_pixels() <= 128u * 128u);
      CHECK(src.blocks_read() == plan_tiles(300, 300, 128, 40).tiles.size());
    }
  }
}

TEST_CASE("png provider serves blocks") {
  const auto path = std::filesystem::temp_directory_path() / "instanseg_tiling_test.png";
  Image img(1, 40, 50);
  for (int r = 0; r < 40; ++r)
    for (int c = 0; c < 50; ++c) img.at(0, r, c) = ((r / 10 + c / 10) % 2) ? 1.0 : 0.0;
  png::write_image(path, img);
  PngImageProvider src(path);
  CHECK(src.height() == 40);
  CHECK(src.width() == 50);
  CHECK(src.read_block(Rect{10, 0, 10, 10}).at(0, 0, 0) == 1.0);
  CHECK(src.pixels_read() == 100);
  std::filesystem::remove(path);
}
