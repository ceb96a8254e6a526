#pragma once

#include <filesystem>

#include "instanseg/image.hpp"

namespace instanseg::png {

// 16-bit grayscale; label value == pixel value. Labels above 65535 are rejected.
void write_labels(const std::filesystem::path& path, const LabelMap& labels);
LabelMap read_labels(const std::filesystem::path& path);

// 8-bit gray (1 channel) or RGB (3 channels); values in [0,1] are scaled to 0..255.
void write_image(const std::filesystem::path& path, const Image& img);
// Any PNG; returns channels in [0,1] (alpha dropped).
Image read_image(const std::filesystem::path& path);

}  // namespace instanseg::png
