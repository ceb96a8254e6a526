#include "instanseg/train.hpp"

#include <algorithm>
#include <chrono>
#include <iostream>
#include <set>
#include <stdexcept>

#include "instanseg/labelmap.hpp"
#include "instanseg/metrics.hpp"

namespace instanseg {

using nlohmann::json;

void TrainConfig::validate() const {
  if (pretrain_epochs < 0 || epochs < 0) throw std::invalid_argument("train: epoch counts must be >= 0");
  if (batches_per_epoch < 1) throw std::invalid_argument("train: batches_per_epoch must be >= 1");
  if (batch < 1) throw std::invalid_argument("train: batch must be >= 1");
  if (crop < 1) throw std::invalid_argument("train: crop must be >= 1");
  if (!(lr > 0.0)) throw std::invalid_argument("train: lr must be positive");
  if (log_every < 1) throw std::invalid_argument("train: log_every must be >= 1");
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"pretrain_epochs", c.pretrain_epochs}, {"epochs", c.epochs}, {"batches_per_epoch", c.batches_per_epoch},
           {"batch", c.batch},   {"crop", c.crop},     {"lr", c.lr},
           {"seed", c.seed},     {"log_every", c.log_every}};
}

void from_json(const json& j, TrainConfig& c) {
  static const std::set<std::string> known{"pretrain_epochs", "epochs", "batches_per_epoch", "batch",
                                           "crop",            "lr",     "seed",              "log_every"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw std::invalid_argument("train: unknown key \"" + key + "\"");
  }
  c.pretrain_epochs = j.value("pretrain_epochs", c.pretrain_epochs);
  c.epochs = j.value("epochs", c.epochs);
  c.batches_per_epoch = j.value("batches_per_epoch", c.batches_per_epoch);
  c.batch = j.value("batch", c.batch);
  c.crop = j.value("crop", c.crop);
  c.lr = j.value("lr", c.lr);
  c.seed = j.value("seed", c.seed);
  c.log_every = j.value("log_every", c.log_every);
  c.validate();
}

namespace {

Tensor stack_targets(const std::vector<Sample>& batch, Phase phase) {
  const std::size_t n = batch.size(), h = batch[0].labels.height, w = batch[0].labels.width;
  std::vector<double> data(n * h * w);
  for (std::size_t b = 0; b < n; ++b) {
    if (phase == Phase::kMain) {
      const DistanceMap d = boundary_distance(batch[b].labels);
      std::copy(d.values.begin(), d.values.end(), data.begin() + b * h * w);
    } else {
      for (std::size_t i = 0; i < h * w; ++i) data[b * h * w + i] = batch[b].labels.values[i] ? 1.0 : 0.0;
    }
  }
  return Tensor::from_data({n, 1, h, w}, std::move(data));
}

std::vector<double> window_values(const Image& img, int channel_count, const Rect& r) {
  std::vector<double> out(static_cast<std::size_t>(channel_count) * r.area());
  std::size_t i = 0;
  for (int ch = 0; ch < channel_count; ++ch)
    for (int y = r.top; y < r.bottom(); ++y)
      for (int x = r.left; x < r.right(); ++x) out[i++] = img.at(ch, y, x);
  return out;
}

}  // namespace

StepStats train_step(ModelParams& params, AdamState& adam, const std::vector<Sample>& batch, Phase phase,
                     const PipelineConfig& pipeline, double lr, std::mt19937_64& rng) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  std::vector<Tensor> weights = params.parameters();
  zero_grads(weights);
  std::vector<Image> images;
  for (const auto& s : batch) images.push_back(s.image);
  const HeadOutputs out = forward_batch(params, tensor_from_images(images), Mode::kTrain);
  const std::size_t n = batch.size(), h = out.seed.dim(2), w = out.seed.dim(3);
  const int dp = params.config.positional_dim, de = params.config.conditional_dim;

  const Tensor target = stack_targets(batch, phase);
  const Tensor seed_term = phase == Phase::kMain ? seed_loss(out.seed, target) : bce_loss(out.seed, target);

  // Candidates are differentiated one at a time against detached copies of P
  // and E; the accumulated gradients are pushed through the backbone once.
  Tensor p_leaf = out.positional.detach();
  p_leaf.set_requires_grad(true);
  Tensor e_leaf = out.conditional.detach();
  e_leaf.set_requires_grad(de > 0);
  const Image coords = image_from_tensor(coordinate_grid(static_cast<int>(h), static_cast<int>(w), dp));

  StepStats stats;
  for (std::size_t b = 0; b < n; ++b) {
    const Image seed_map = image_from_tensor(out.seed.detach(), b);
    std::vector<Seed> seeds;
    for (const Seed& s : sample_seeds(seed_map, pipeline))
      if (batch[b].labels.at(s.u.row, s.u.col) != 0) seeds.push_back(s);
    const auto chosen = cap_candidates(seeds.size(), kMaxInstancesPerImage, rng);
    if (chosen.empty()) continue;
    const double weight = 1.0 / static_cast<double>(n * chosen.size());
    for (std::size_t k : chosen) {
      const Pixel u = seeds[k].u;
      const Label label = batch[b].labels.at(u.row, u.col);
      const Rect win = seed_window(u, static_cast<int>(h), static_cast<int>(w), pipeline.crop_size);
      const auto wh = static_cast<std::size_t>(win.height), ww = static_cast<std::size_t>(win.width);
      const Tensor o_win = Tensor::from_data({1, static_cast<std::size_t>(dp), wh, ww}, window_values(coords, dp, win));
      const Tensor o_seed =
          Tensor::from_data({1, static_cast<std::size_t>(dp), 1, 1}, window_values(coords, dp, Rect{u.row, u.col, 1, 1}));
      const Tensor q_win = add(crop(p_leaf, b, win.top, win.left, wh, ww), o_win);
      const Tensor q_seed = add(crop(p_leaf, b, u.row, u.col, 1, 1), o_seed);
      const Tensor cond = de > 0 ? crop(e_leaf, b, win.top, win.left, wh, ww) : Tensor::zeros({1, 0, wh, ww});
      const Tensor logits = phi_forward(offsets_from(q_win, q_seed), cond, params.phi);
      std::vector<std::uint8_t> mask(wh * ww);
      for (int y = 0; y < win.height; ++y)
        for (int x = 0; x < win.width; ++x)
          mask[static_cast<std::size_t>(y) * ww + x] = batch[b].labels.at(win.top + y, win.left + x) == label;
      const Tensor loss = scale(candidate_loss(logits, mask, phase), weight);
      stats.instance += loss.item();
      loss.backward();
      ++stats.candidates;
    }
  }

  Tensor total = seed_term;
  if (stats.candidates > 0) {
    const Tensor gp = Tensor::from_data(p_leaf.shape(), std::vector<double>(p_leaf.grad().begin(), p_leaf.grad().end()));
    total = add(total, sum(mul(out.positional, gp)));
    if (de > 0 && e_leaf.has_grad()) {
      const Tensor ge = Tensor::from_data(e_leaf.shape(), std::vector<double>(e_leaf.grad().begin(), e_leaf.grad().end()));
      total = add(total, sum(mul(out.conditional, ge)));
    }
  }
  total.backward();
  adam_step(weights, adam, lr);
  stats.seed = seed_term.item();
  stats.total = stats.seed + stats.instance;
  return stats;
}

std::pair<double, double> validate_model(const ModelParams& params, const std::vector<Sample>& samples,
                                         const PipelineConfig& pipeline) {
  std::vector<LabelMap> preds, gts;
  PipelineConfig cfg = pipeline;
  cfg.tta = false;
  const ModelExtractor extractor(params);
  for (const auto& s : samples) {
    preds.push_back(infer(s.image, extractor, cfg));
    gts.push_back(s.labels);
  }
  const DatasetReport r = evaluate_dataset(preds, gts);
  return {r.pooled_f1_mu, r.pooled_f1_05};
}

TrainResult train(const std::vector<Sample>& train_set, const std::vector<Sample>& val_set, ModelParams params,
                  const TrainConfig& cfg, const PipelineConfig& pipeline, std::ostream* log) {
  cfg.validate();
  pipeline.validate();
  if (train_set.empty()) throw std::invalid_argument("train: empty training set");

  TrainResult result;
  auto emit = [&](json record) {
    if (log) *log << record.dump() << "\n" << std::flush;
    result.log.push_back(std::move(record));
  };

  // The candidate window has to hold whole objects with margin to spare.
  int largest = 0;
  for (const auto& s : train_set)
    for (const auto& [l, info] : instance_stats(s.labels)) largest = std::max({largest, info.bbox.height, info.bbox.width});
  if (2 * largest > pipeline.crop_size) {
    std::cerr << "warning: crop_size " << pipeline.crop_size << " is less than twice the largest object extent ("
              << largest << " px)\n";
    emit({{"warning", "crop_size below twice the largest object extent"}, {"largest_extent", largest}});
  }

  std::mt19937_64 rng(cfg.seed);
  AdamState adam;
  std::uniform_int_distribution<std::size_t> pick(0, train_set.size() - 1);
  const auto start = std::chrono::steady_clock::now();
  long step = 0;
  const int total_epochs = cfg.pretrain_epochs + cfg.epochs;
  for (int epoch = 0; epoch < total_epochs; ++epoch) {
    const Phase phase = epoch < cfg.pretrain_epochs ? Phase::kPretrain : Phase::kMain;
    const char* phase_name = phase == Phase::kPretrain ? "pretrain" : "main";
    for (int it = 0; it < cfg.batches_per_epoch; ++it, ++step) {
      std::vector<Sample> batch;
      for (int b = 0; b < cfg.batch; ++b) batch.push_back(augment_sample(train_set[pick(rng)], cfg.crop, rng));
      // Images of different sizes cannot share a batch tensor; crop to the smallest.
      int mh = batch[0].labels.height, mw = batch[0].labels.width;
      for (const auto& s : batch) {
        mh = std::min(mh, s.labels.height);
        mw = std::min(mw, s.labels.width);
      }
      for (auto& s : batch)
        if (s.labels.height != mh || s.labels.width != mw) s = {crop_image(s.image, {0, 0, mh, mw}), crop_labels(s.labels, {0, 0, mh, mw})};
      const StepStats st = train_step(params, adam, batch, phase, pipeline, cfg.lr, rng);
      result.steps.push_back(st);
      if (step % cfg.log_every == 0) {
        emit({{"phase", phase_name},
              {"epoch", epoch},
              {"step", step},
              {"loss", st.total},
              {"seed_loss", st.seed},
              {"instance_loss", st.instance},
              {"candidates", st.candidates}});
      }
    }
    json record{{"phase", phase_name}, {"epoch", epoch}, {"step", step}};
    if (!val_set.empty()) {
      const auto [f1_mu, f1_05] = validate_model(params, val_set, pipeline);
      record["val_f1_mu"] = f1_mu;
      record["val_f1_05"] = f1_05;
      if (f1_mu > result.best_val_f1_mu) {
        result.best_val_f1_mu = f1_mu;
        result.best_epoch = epoch;
        result.best = clone_model(params);
      }
    }
    record["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    emit(record);
  }
  if (result.best_epoch < 0) {
    result.best = clone_model(params);
    result.best_epoch = total_epochs - 1;
  }
  return result;
}

}  // namespace instanseg
