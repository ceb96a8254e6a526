#pragma once

#include <cstdint>
#include <functional>
#include <ostream>
#include <random>
#include <vector>

#include <json.hpp>

#include "instanseg/losses.hpp"
#include "instanseg/model.hpp"
#include "instanseg/optim.hpp"
#include "instanseg/pipeline.hpp"
#include "instanseg/synthdata.hpp"

namespace instanseg {

struct TrainConfig {
  int pretrain_epochs = 10;
  int epochs = 20;  // main phase
  int batches_per_epoch = 100;
  int batch = 3;
  int crop = 256;  // clamped to the image size
  double lr = 1e-3;
  std::uint64_t seed = 0;
  int log_every = 10;

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct StepStats {
  double total = 0.0, seed = 0.0, instance = 0.0;
  int candidates = 0;
};

// One optimisation step on an already augmented batch. Seeds come from the
// detached predicted seed map, each paired with the ground-truth instance it
// falls in; background seeds are dropped and at most 50 are kept per image.
StepStats train_step(ModelParams& params, AdamState& adam, const std::vector<Sample>& batch, Phase phase,
                     const PipelineConfig& pipeline, double lr, std::mt19937_64& rng);

struct TrainResult {
  ModelParams best;
  double best_val_f1_mu = -1.0;
  int best_epoch = -1;
  std::vector<StepStats> steps;
  std::vector<nlohmann::json> log;
};

// Pretraining (BCE + Dice) then main training (L1 + Lovasz hinge). The model
// with the highest validation F1 mu is returned. Every log record is also
// written to `log` as one JSON object per line.
TrainResult train(const std::vector<Sample>& train_set, const std::vector<Sample>& val_set, ModelParams params,
                  const TrainConfig& cfg, const PipelineConfig& pipeline, std::ostream* log = nullptr);

// Pooled F1 mu and F1 at 0.5 of untiled inference over a sample set.
std::pair<double, double> validate_model(const ModelParams& params, const std::vector<Sample>& samples,
                                         const PipelineConfig& pipeline);

}  // namespace instanseg
