#include "instanseg/png_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>

namespace instanseg::png {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw std::runtime_error("cannot open " + path.string());
  return f;
}

void on_warning(png_structp, png_const_charp) {}

struct Raw {
  int width = 0, height = 0, channels = 0, depth = 8;
  std::vector<std::uint16_t> samples;  // row-major, interleaved
};

void write_raw(const std::filesystem::path& path, const Raw& raw) {
  auto f = open(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, on_warning);
  png_infop info = png_create_info_struct(png);
  const std::size_t row_samples = static_cast<std::size_t>(raw.width) * raw.channels;
  std::vector<png_byte> row(row_samples * (raw.depth / 8));
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng: failed writing " + path.string());
  }
  {
    png_init_io(png, f.get());
    const int color = raw.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB;
    png_set_IHDR(png, info, raw.width, raw.height, raw.depth, color, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < raw.height; ++y) {
      const std::uint16_t* src = raw.samples.data() + y * row_samples;
      for (std::size_t i = 0; i < row_samples; ++i) {
        if (raw.depth == 16) {
          row[2 * i] = static_cast<png_byte>(src[i] >> 8);  // PNG is big-endian
          row[2 * i + 1] = static_cast<png_byte>(src[i] & 0xff);
        } else {
          row[i] = static_cast<png_byte>(src[i]);
        }
      }
      png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
  }
  png_destroy_write_struct(&png, &info);
}

Raw read_raw(const std::filesystem::path& path) {
  auto f = open(path, "rb");
  png_byte sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw std::runtime_error(path.string() + " is not a PNG file");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, on_warning);
  png_infop info = png_create_info_struct(png);
  Raw raw;
  std::vector<png_byte> row;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("libpng: failed reading " + path.string());
  }
  {
    png_init_io(png, f.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    const int color = png_get_color_type(png, info);
    const int depth = png_get_bit_depth(png, info);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);
    raw.width = static_cast<int>(png_get_image_width(png, info));
    raw.height = static_cast<int>(png_get_image_height(png, info));
    raw.channels = png_get_channels(png, info);
    raw.depth = png_get_bit_depth(png, info);
    const std::size_t rowbytes = png_get_rowbytes(png, info);
    row.resize(rowbytes);
    const std::size_t row_samples = static_cast<std::size_t>(raw.width) * raw.channels;
    raw.samples.resize(row_samples * raw.height);
    for (int y = 0; y < raw.height; ++y) {
      png_read_row(png, row.data(), nullptr);
      std::uint16_t* dst = raw.samples.data() + y * row_samples;
      for (std::size_t i = 0; i < row_samples; ++i) {
        dst[i] = raw.depth == 16 ? static_cast<std::uint16_t>((row[2 * i] << 8) | row[2 * i + 1]) : row[i];
      }
    }
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return raw;
}

}  // namespace

void write_labels(const std::filesystem::path& path, const LabelMap& labels) {
  Raw raw{labels.width, labels.height, 1, 16, {}};
  raw.samples.resize(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels.values[i] > 65535) throw std::runtime_error("label value exceeds 16-bit PNG range");
    raw.samples[i] = static_cast<std::uint16_t>(labels.values[i]);
  }
  write_raw(path, raw);
}

LabelMap read_labels(const std::filesystem::path& path) {
  const Raw raw = read_raw(path);
  if (raw.channels != 1) throw std::runtime_error(path.string() + ": label PNG must be single-channel");
  LabelMap out(raw.height, raw.width);
  for (std::size_t i = 0; i < out.size(); ++i) out.values[i] = raw.samples[i];
  return out;
}

void write_image(const std::filesystem::path& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw std::invalid_argument("write_image: need 1 or 3 channels");
  Raw raw{img.width, img.height, img.channels, 8, {}};
  raw.samples.resize(img.values.size());
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c) {
        const double v = std::clamp(img.at(c, y, x), 0.0, 1.0);
        raw.samples[(static_cast<std::size_t>(y) * img.width + x) * img.channels + c] =
            static_cast<std::uint16_t>(std::lround(v * 255.0));
      }
  write_raw(path, raw);
}

Image read_image(const std::filesystem::path& path) {
  const Raw raw = read_raw(path);
  const int channels = raw.channels >= 3 ? 3 : 1;
  const double scale = raw.depth == 16 ? 65535.0 : 255.0;
  Image out(channels, raw.height, raw.width);
  for (int y = 0; y < raw.height; ++y)
    for (int x = 0; x < raw.width; ++x)
      for (int c = 0; c < channels; ++c) {
        out.at(c, y, x) = raw.samples[(static_cast<std::size_t>(y) * raw.width + x) * raw.channels + c] / scale;
      }
  return out;
}

}  // namespace instanseg::png
