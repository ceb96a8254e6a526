#pragma once

// Inference: seed sampling, per-seed candidate prediction, fragment merging,
// flattening and test-time augmentation.

#include <atomic>
#include <cstdint>
#include <memory>
#include <vector>

#include <json.hpp>

#include "instanseg/image.hpp"
#include "instanseg/model.hpp"

namespace instanseg {

struct PipelineConfig {
  double seed_threshold = 0.5;
  int window_radius = 2;  // local-max window is (2r+1) x (2r+1)
  int crop_size = 128;
  double merge_iou = 0.5;
  bool tta = false;
  std::uint64_t seed = 0;

  void validate() const;
  friend bool operator==(const PipelineConfig&, const PipelineConfig&) = default;
};

void to_json(nlohmann::json& j, const PipelineConfig& c);
void from_json(const nlohmann::json& j, PipelineConfig& c);

struct Seed {
  Pixel u;
  double score = 0.0;
};

struct InstanceCandidate {
  Seed seed;
  Rect window;                     // image coordinates
  std::vector<double> logits;      // window.height x window.width
  std::vector<std::uint8_t> mask;  // logits >= 0
  std::size_t area = 0;            // number of set mask pixels

  double logit_at(int r, int c) const;  // -inf outside the window
};

// Produces the per-pixel maps for an image.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual FeatureBundle extract(const Image& image) const = 0;
  virtual const InstanceHead& head() const = 0;
};

class ModelExtractor final : public FeatureExtractor {
 public:
  explicit ModelExtractor(const ModelParams& params) : params_(params) {}
  FeatureBundle extract(const Image& image) const override { return forward(params_, image); }
  const InstanceHead& head() const override { return params_.phi; }

 private:
  const ModelParams& params_;
};

// S >= threshold and maximal over the window; equal-valued 4-connected
// plateaus keep their raster-first pixel. Descending score, raster order on
// ties.
std::vector<Seed> sample_seeds(const Image& seed_map, const PipelineConfig& cfg);

// Window of side crop_size centred on u, clipped to the image.
Rect seed_window(Pixel u, int height, int width, int crop_size);

// Bytes held by candidates while predict_instances runs.
struct AllocationStats {
  std::atomic<std::size_t> current{0};
  std::atomic<std::size_t> peak{0};

  void allocate(std::size_t bytes);
  void release(std::size_t bytes);
};

inline constexpr std::size_t kCandidateBytesPerPixel = sizeof(double) + sizeof(std::uint8_t);

// Candidates for every seed, in seed order; empty masks are dropped.
std::vector<InstanceCandidate> predict_instances(const FeatureBundle& bundle, const std::vector<Seed>& seeds,
                                                 const InstanceHead& head, const PipelineConfig& cfg,
                                                 AllocationStats* stats = nullptr);

double candidate_iou(const InstanceCandidate& a, const InstanceCandidate& b);

// Greedy union of candidates whose masks overlap with IoU >= merge_iou, in
// descending seed score, repeated until nothing changes. Merged logits are the
// elementwise max over the union of windows.
std::vector<InstanceCandidate> merge_redundant(std::vector<InstanceCandidate> candidates, const PipelineConfig& cfg);

// Per pixel the candidate with the largest logit if that logit is >= 0; ties go
// to the lower index. Labels are sequential.
LabelMap flatten(const std::vector<InstanceCandidate>& candidates, int height, int width);

LabelMap infer(const Image& image, const FeatureExtractor& extractor, const PipelineConfig& cfg);
LabelMap infer(const Image& image, const ModelParams& params, const PipelineConfig& cfg);

// Sixteen (rotation, hflip, vflip) passes. Seed maps are mapped back and
// averaged, seeds are sampled once, and every seed's logits are the per-pixel
// median over the passes. Non-square inputs are zero padded to a square.
LabelMap tta_infer(const Image& image, const FeatureExtractor& extractor, const PipelineConfig& cfg);
LabelMap tta_infer(const Image& image, const ModelParams& params, const PipelineConfig& cfg);

// Dispatches on cfg.tta.
LabelMap run_inference(const Image& image, const FeatureExtractor& extractor, const PipelineConfig& cfg);

// Training-free features from a label map. S is the boundary distance,
// P = centroid - O inside instances, E channel 0 the equivalent radius
// sqrt(area / pi). The head computes radius - |offset|_1.
struct AnalyticFixture {
  FeatureBundle bundle;
  InstanceHead head;
};

AnalyticFixture analytic_bundle(const LabelMap& labels, int positional_dim, int conditional_dim);
InstanceHead analytic_head(int positional_dim, int conditional_dim);

// Reads labels from image channel 0 and returns the analytic features, so the
// fixture can stand in for a model anywhere an extractor is accepted.
class AnalyticExtractor final : public FeatureExtractor {
 public:
  AnalyticExtractor(int positional_dim, int conditional_dim);
  FeatureBundle extract(const Image& image) const override;
  const InstanceHead& head() const override { return head_; }

 private:
  int positional_dim_, conditional_dim_;
  InstanceHead head_;
};

Image labels_as_image(const LabelMap& labels);

}  // namespace instanseg
