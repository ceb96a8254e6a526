#pragma once

// Backbone f (residual U-Net, summation skips, no style vectors), the
// seed / positional / conditional heads and the per-pixel instance head.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "instanseg/image.hpp"
#include "instanseg/ops.hpp"

namespace instanseg {

struct ArchitectureConfig {
  int in_channels = 3;
  std::vector<int> widths{16, 32, 64, 128};
  int feature_dim = 16;     // channels of the backbone output F
  int positional_dim = 4;   // channels of P and of the coordinate grid
  int conditional_dim = 4;  // channels of E
  int phi_hidden = 32;
  std::uint64_t seed = 0;

  void validate() const;
  // Spatial multiple the backbone pads inputs to.
  int size_multiple() const;
  friend bool operator==(const ArchitectureConfig&, const ArchitectureConfig&) = default;
};

void to_json(nlohmann::json& j, const ArchitectureConfig& c);
void from_json(const nlohmann::json& j, ArchitectureConfig& c);
// Stable FNV-1a hash of the canonical JSON form.
std::uint64_t config_hash(const ArchitectureConfig& c);

struct ConvLayer {
  Tensor weight;  // OutC x InC x k x k
  Tensor bias;    // OutC
};

struct NormLayer {
  Tensor gamma, beta;
  BatchNormState state;
};

// conv -> norm -> relu
struct ConvUnit {
  ConvLayer conv;
  NormLayer norm;
};

struct ResBlock {
  ConvUnit first, second;
  ConvLayer shortcut;  // 1x1 projection; weight undefined for identity
};

// MLP (D_p + D_e) -> hidden -> 1 applied independently at every pixel.
struct InstanceHead {
  ConvLayer hidden;  // hidden x (D_p + D_e) x 1 x 1
  ConvLayer output;  // 1 x hidden x 1 x 1
  int positional_dim = 0;
  int conditional_dim = 0;

  int hidden_width() const { return static_cast<int>(hidden.weight.dim(0)); }
  // Logit for one pixel. `scratch` needs hidden_width() entries.
  double logit(std::span<const double> offset, std::span<const double> conditional,
               std::span<double> scratch) const;
};

InstanceHead make_instance_head(int positional_dim, int conditional_dim, int hidden, std::uint64_t seed);

struct ModelParams {
  ArchitectureConfig config;
  std::vector<ResBlock> encoder;    // one per level
  std::vector<ConvLayer> up_proj;   // decoder level l: widths[l+1] -> widths[l]
  std::vector<ResBlock> decoder;    // decoder level l, l = 0..levels-2
  ConvUnit features;                // widths[0] -> feature_dim
  ConvLayer seed_head, positional_head, conditional_head;
  InstanceHead phi;

  // Every persistent tensor (weights and running statistics) with a stable name.
  std::vector<std::pair<std::string, Tensor>> named_tensors() const;
  // Learnable tensors only.
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;
};

ModelParams build_model(const ArchitectureConfig& config);
// Deep copy: no tensor storage is shared with the source.
ModelParams clone_model(const ModelParams& params);

struct HeadOutputs {
  Tensor seed;         // N x 1 x H x W, in (0, 1)
  Tensor positional;   // N x D_p x H x W
  Tensor conditional;  // N x D_e x H x W
};

// N x C x H x W batch. Pads to size_multiple() by reflection and crops back.
HeadOutputs forward_batch(ModelParams& params, const Tensor& input, Mode mode);
// Eval-mode pass; never touches running statistics, so params stay shared.
HeadOutputs forward_batch(const ModelParams& params, const Tensor& input);

// D_p x H x W: channel 0 = row, channel 1 = column (pixel units), rest zero.
Tensor coordinate_grid(int height, int width, int positional_dim);

struct FeatureBundle {
  Image seed;         // 1 x H x W
  Image positional;   // D_p x H x W
  Image conditional;  // D_e x H x W
  Image coords;       // D_p x H x W

  int height() const { return seed.height; }
  int width() const { return seed.width; }
};

Image image_from_tensor(const Tensor& t, std::size_t batch_index = 0);
Tensor tensor_from_image(const Image& img);
Tensor tensor_from_images(std::span<const Image> images);

FeatureBundle make_bundle(const HeadOutputs& out, std::size_t batch_index);
FeatureBundle forward(const ModelParams& params, const Image& image);

// Graph version of the instance head over a crop: offsets 1 x D_p x h x w,
// conditional 1 x D_e x h x w -> logits 1 x 1 x h x w.
Tensor phi_forward(const Tensor& offsets, const Tensor& conditional, const InstanceHead& head);

// Container: "ISGM", u32 version, u64 header length, JSON header with the
// config and tensor directory, then the tensors as concatenated RTF records.
inline constexpr std::uint32_t kModelFormatVersion = 1;
void save_model(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_model(const std::filesystem::path& path);
// Header only; used to check compatibility before a full load.
nlohmann::json read_model_header(const std::filesystem::path& path);

}  // namespace instanseg
