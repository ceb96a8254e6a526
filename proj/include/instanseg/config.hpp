#pragma once

// Everything a run needs, as one JSON document with four sections. Missing
// keys keep their defaults; unknown keys are rejected.

#include <filesystem>

#include <json.hpp>

#include "instanseg/model.hpp"
#include "instanseg/pipeline.hpp"
#include "instanseg/synthdata.hpp"
#include "instanseg/train.hpp"

namespace instanseg {

struct RunConfig {
  ArchitectureConfig architecture;
  PipelineConfig pipeline;
  TrainConfig train;
  SynthConfig synth;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const RunConfig& c, const std::filesystem::path& path);

}  // namespace instanseg
