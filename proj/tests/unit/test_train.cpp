#include <doctest.h>

#include <cmath>
#include <sstream>

#include "instanseg/synthdata.hpp"
#include "instanseg/train.hpp"

using namespace instanseg;

namespace {

ArchitectureConfig tiny() {
  ArchitectureConfig a;
  a.widths = {8, 16};
  a.feature_dim = 8;
  a.phi_hidden = 8;
  a.seed = 4;
  return a;
}

std::vector<Sample> samples(int n, std::uint64_t offset) {
  SynthConfig sc;
  sc.size = 32;
  sc.min_instances = 2;
  sc.max_instances = 4;
  sc.seed = 11;
  std::vector<Sample> out;
  for (int i = 0; i < n; ++i) out.push_back(gen_sample(sc, offset + i));
  return out;
}

}  // namespace

TEST_CASE("repeated steps on one batch reduce the loss") {
  for (Phase phase : {Phase::kPretrain, Phase::kMain}) {
    ModelParams p = build_model(tiny());
    AdamState adam;
    std::mt19937_64 rng(1);
    PipelineConfig pc;
    pc.crop_size = 32;
    const auto batch = samples(2, 0);
    const StepStats first = train_step(p, adam, batch, phase, pc, 3e-3, rng);
    StepStats last;
    for (int i = 0; i < 25; ++i) last = train_step(p, adam, batch, phase, pc, 3e-3, rng);
    CHECK(std::isfinite(first.total));
    CHECK(last.seed < first.seed);
    CHECK(adam.step == 26);
  }
}

TEST_CASE("train runs both phases, logs and keeps the best model") {
  TrainConfig cfg;
  cfg.pretrain_epochs = 1;
  cfg.epochs = 1;
  cfg.batches_per_epoch = 2;
  cfg.batch = 2;
  cfg.crop = 32;
  cfg.log_every = 1;
  PipelineConfig pc;
  pc.crop_size = 32;
  std::ostringstream log;
  const TrainResult r = train(samples(4, 0), samples(2, 10), build_model(tiny()), cfg, pc, &log);
  CHECK(r.steps.size() == 4);
  CHECK(r.best_epoch >= 0);
  CHECK(r.best_val_f1_mu >= 0.0);
  std::istringstream lines(log.str());
  std::string line;
  int records = 0, phases = 0;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    ++records;
    if (j.contains("phase") && j["phase"] == "main") ++phases;
  }
  CHECK(records >= 6);
  CHECK(phases >= 1);

  cfg.batch = 0;
  CHECK_THROWS(train(samples(1, 0), {}, build_model(tiny()), cfg, pc));
}
