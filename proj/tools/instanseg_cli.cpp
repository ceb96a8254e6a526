// instanseg: gen | train | infer | eval | gradcheck
//
// Exit codes: 0 ok, 1 usage or I/O error, 2 verification failure.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "instanseg/config.hpp"
#include "instanseg/gradcheck.hpp"
#include "instanseg/kernels.hpp"
#include "instanseg/metrics.hpp"
#include "instanseg/png_io.hpp"
#include "instanseg/tiling.hpp"

namespace fs = std::filesystem;
using namespace instanseg;
using nlohmann::json;

namespace {

struct Failure {
  int code;
  std::string message;
};

fs::path sidecar(const fs::path& p, const std::string& suffix) { return fs::path(p.string() + suffix); }

std::vector<fs::path> png_files(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) throw Failure{1, "not a directory: " + dir.string()};
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

int cmd_gen(RunConfig cfg, const fs::path& out, std::optional<std::uint64_t> seed, int n_train, int n_val, int n_test,
            const std::string& preset) {
  const std::uint64_t keep_seed = seed.value_or(cfg.synth.seed);
  if (preset != "default") {
    const SynthConfig p = SynthConfig::preset(preset);
    cfg.synth = p;
  }
  cfg.synth.seed = keep_seed;
  gen_dataset(cfg.synth, n_train, n_val, n_test, out);
  save_run_config(cfg, out / "run_config.json");
  std::cout << "wrote " << n_train + n_val + n_test << " samples to " << out.string() << "\n";
  return 0;
}

int cmd_train(RunConfig cfg, const fs::path& data, const fs::path& out_model, const std::string& resume) {
  if (!fs::exists(data / "manifest.json")) throw Failure{1, "missing manifest: " + (data / "manifest.json").string()};
  const Dataset ds = load_dataset(data);
  if (ds.train.empty()) throw Failure{1, "dataset has no training samples"};
  cfg.architecture.in_channels = ds.train.front().image.channels;
  ModelParams params;
  if (!resume.empty()) {
    params = load_model(resume);
    if (config_hash(params.config) != config_hash(cfg.architecture)) {
      throw Failure{1, "refusing to resume: architecture of " + resume + " does not match the requested config"};
    }
  } else {
    params = build_model(cfg.architecture);
  }
  if (out_model.has_parent_path()) fs::create_directories(out_model.parent_path());
  save_run_config(cfg, sidecar(out_model, ".config.json"));
  std::ofstream log(sidecar(out_model, ".log.jsonl"));
  if (!log) throw Failure{1, "cannot write log next to " + out_model.string()};
  const TrainResult r = train(ds.train, ds.val, std::move(params), cfg.train, cfg.pipeline, &log);
  save_model(r.best, out_model);
  std::cout << "best epoch " << r.best_epoch << ", validation F1mu " << r.best_val_f1_mu << "\n";
  return 0;
}

int cmd_infer(RunConfig cfg, const fs::path& model, const fs::path& in, const fs::path& out, int tile, int overlap) {
  ModelParams params = load_model(model);
  const ModelExtractor extractor(params);
  LabelMap labels;
  if (tile > 0) {
    labels = infer_tiled(PngImageProvider(in), extractor, cfg.pipeline, tile, overlap);
  } else {
    labels = run_inference(png::read_image(in), extractor, cfg.pipeline);
  }
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  png::write_labels(out, labels);
  cfg.architecture = params.config;
  save_run_config(cfg, sidecar(out, ".config.json"));
  std::cout << labels.max_label() << "\n";
  return 0;
}

int cmd_eval(const fs::path& pred_dir, const fs::path& gt_dir, const fs::path& report) {
  const auto preds = png_files(pred_dir), gts = png_files(gt_dir);
  if (preds.empty() || gts.empty()) throw Failure{1, "no PNG files to evaluate"};
  if (preds.size() != gts.size()) {
    throw Failure{1, std::to_string(preds.size()) + " predictions vs " + std::to_string(gts.size()) + " ground truths"};
  }
  std::vector<LabelMap> p, g;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i].filename() != gts[i].filename()) {
      throw Failure{1, "file names differ: " + preds[i].filename().string() + " vs " + gts[i].filename().string()};
    }
    p.push_back(png::read_labels(preds[i]));
    g.push_back(png::read_labels(gts[i]));
  }
  const DatasetReport r = evaluate_dataset(p, g);
  json j = r.to_json();
  for (std::size_t i = 0; i < preds.size(); ++i) j["per_image"][i]["file"] = preds[i].filename().string();
  if (report.has_parent_path()) fs::create_directories(report.parent_path());
  std::ofstream os(report);
  if (!os) throw Failure{1, "cannot write " + report.string()};
  os << j.dump(2) << "\n";
  std::printf("F1@0.5 %.4f  F1mu %.4f  (%zu images)\n", r.pooled_f1_05, r.pooled_f1_mu, preds.size());
  return 0;
}

int cmd_gradcheck(const GradCheckOptions& opt) {
  int failed = 0;
  for (const auto& r : run_gradcheck(opt)) {
    std::printf("%-20s trials %3d  max rel err %.3e  %s\n", r.op.c_str(), r.trials, r.max_rel_error,
                r.passed ? "ok" : "FAIL");
    if (!r.passed) {
      std::fprintf(stderr, "gradient check failed: %s\n", r.op.c_str());
      ++failed;
    }
  }
  return failed ? 2 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Embedding-based instance segmentation"};
  app.require_subcommand(1);
  int threads = 0;
  std::string config_path;
  app.add_option("--threads", threads, "Worker threads (falls back to INSTANSEG_THREADS)");
  app.add_option("--config", config_path, "Run config JSON (architecture / pipeline / train / synth)");

  auto* gen = app.add_subcommand("gen", "Generate a synthetic dataset");
  fs::path gen_out;
  std::optional<std::uint64_t> gen_seed;
  int n_train = 200, n_val = 40, n_test = 40;
  std::string preset = "default";
  gen->add_option("--out", gen_out)->required();
  gen->add_option("--seed", gen_seed);
  gen->add_option("--n-train", n_train)->check(CLI::NonNegativeNumber);
  gen->add_option("--n-val", n_val)->check(CLI::NonNegativeNumber);
  gen->add_option("--n-test", n_test)->check(CLI::NonNegativeNumber);
  gen->add_option("--preset", preset)->check(CLI::IsMember({"default", "crowded"}));

  auto* tr = app.add_subcommand("train", "Train a model on a generated dataset");
  fs::path data, out_model;
  std::optional<int> epochs, pretrain_epochs, batch, crop, batches_per_epoch;
  std::optional<double> lr;
  std::optional<std::uint64_t> train_seed;
  std::string resume;
  tr->add_option("--data", data)->required();
  tr->add_option("--out-model", out_model)->required();
  tr->add_option("--epochs", epochs, "Main-phase epochs");
  tr->add_option("--pretrain-epochs", pretrain_epochs);
  tr->add_option("--batches-per-epoch", batches_per_epoch);
  tr->add_option("--lr", lr);
  tr->add_option("--batch", batch);
  tr->add_option("--crop", crop, "Training crop (clamped to the image size)");
  tr->add_option("--seed", train_seed);
  tr->add_option("--resume", resume, "Continue from a saved model with the same architecture");

  auto* inf = app.add_subcommand("infer", "Segment one image");
  fs::path model, in, out;
  bool tta = false;
  int tile = 0, overlap = 80;
  inf->add_option("--model", model)->required();
  inf->add_option("--in", in)->required();
  inf->add_option("--out", out)->required();
  inf->add_flag("--tta", tta, "16-fold rotation / flip test-time augmentation");
  inf->add_option("--tile-size", tile, "Tile side; 0 runs the whole image at once")->check(CLI::NonNegativeNumber);
  inf->add_option("--overlap", overlap)->check(CLI::NonNegativeNumber);

  auto* ev = app.add_subcommand("eval", "Score predicted label maps against ground truth");
  fs::path pred_dir, gt_dir, report;
  ev->add_option("--pred-dir", pred_dir)->required();
  ev->add_option("--gt-dir", gt_dir)->required();
  ev->add_option("--report", report)->required();

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable operation");
  GradCheckOptions gopt;
  gc->add_option("--trials", gopt.trials)->check(CLI::PositiveNumber);
  gc->add_option("--seed", gopt.seed);
  gc->add_flag("--inject-fault", gopt.inject_fault, "Include an operation with a broken backward");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  if (threads <= 0)
    if (const char* env = std::getenv("INSTANSEG_THREADS")) threads = std::atoi(env);
  if (threads > 0) kernels::set_thread_count(threads);

  try {
    RunConfig cfg = config_path.empty() ? RunConfig{} : load_run_config(config_path);
    if (*gen) return cmd_gen(cfg, gen_out, gen_seed, n_train, n_val, n_test, preset);
    if (*tr) {
      if (epochs) cfg.train.epochs = *epochs;
      if (pretrain_epochs) cfg.train.pretrain_epochs = *pretrain_epochs;
      if (batches_per_epoch) cfg.train.batches_per_epoch = *batches_per_epoch;
      if (lr) cfg.train.lr = *lr;
      if (batch) cfg.train.batch = *batch;
      if (crop) cfg.train.crop = *crop;
      if (train_seed) cfg.train.seed = *train_seed;
      cfg.train.validate();
      return cmd_train(cfg, data, out_model, resume);
    }
    if (*inf) {
      cfg.pipeline.tta = cfg.pipeline.tta || tta;
      return cmd_infer(cfg, model, in, out, tile, overlap);
    }
    if (*ev) return cmd_eval(pred_dir, gt_dir, report);
    if (*gc) return cmd_gradcheck(gopt);
  } catch (const Failure& f) {
    std::cerr << "error: " << f.message << "\n";
    return f.code;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
