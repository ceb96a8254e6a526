#pragma once

// Synthetic nucleus-like images: non-overlapping rotated ellipses on a
// textured background.

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "instanseg/image.hpp"

namespace instanseg {

struct SynthConfig {
  int size = 128;
  int min_instances = 8, max_instances = 20;
  double min_radius = 4.0, max_radius = 12.0;  // semi-major axis
  double min_eccentricity = 0.0, max_eccentricity = 0.8;
  int min_gap = 2;                   // pixels between instances; 0 lets them touch
  double min_center_spacing = 4.0;   // between ellipse centres
  double fg_min = 0.45, fg_max = 0.9;
  double bg_min = 0.05, bg_max = 0.2;
  double texture_amplitude = 0.04;
  double noise_sigma = 0.04;
  int channels = 3;
  std::uint64_t seed = 0;

  static SynthConfig preset(const std::string& name);
  void validate() const;
  friend bool operator==(const SynthConfig&, const SynthConfig&) = default;
};

void to_json(nlohmann::json& j, const SynthConfig& c);
void from_json(const nlohmann::json& j, SynthConfig& c);

struct Sample {
  Image image;
  LabelMap labels;
};

// Deterministic in (cfg.seed, index).
Sample gen_sample(const SynthConfig& cfg, std::uint64_t index);

struct Dataset {
  nlohmann::json manifest;
  std::vector<Sample> train, val, test;
};

// images/NNNN.png, labels/NNNN.png (16-bit) and manifest.json. Indices run
// 0..n-1 over train, then val, then test.
nlohmann::json gen_dataset(const SynthConfig& cfg, int n_train, int n_val, int n_test,
                           const std::filesystem::path& out_dir);
Dataset load_dataset(const std::filesystem::path& dir);
std::vector<Sample> load_split(const std::filesystem::path& dir, const nlohmann::json& manifest,
                               const std::string& split);

// One of the 8 symmetries uniformly, then a random crop of
// min(crop, extent) per axis; crop <= 0 keeps the full extent.
Sample augment_sample(const Sample& sample, int crop, std::mt19937_64& rng);

}  // namespace instanseg
