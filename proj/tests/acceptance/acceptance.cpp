// Acceptance checks. Prints one PASS/FAIL line per criterion.
//
//   acceptance core      criteria 1 2 3 4 5 8 9
//   acceptance training  criteria 6 7
//   acceptance           all of them

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "instanseg/gradcheck.hpp"
#include "instanseg/labelmap.hpp"
#include "instanseg/losses.hpp"
#include "instanseg/metrics.hpp"
#include "instanseg/model.hpp"
#include "instanseg/pipeline.hpp"
#include "instanseg/synthdata.hpp"
#include "instanseg/tiling.hpp"
#include "instanseg/train.hpp"

using namespace instanseg;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(int id, bool pass, const std::string& detail) {
  std::printf("CRITERION %d: %s  %s\n", id, pass ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
  failures += !pass;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---------------------------------------------------------------- 1

void gradient_fidelity() {
  const auto t0 = Clock::now();
  GradCheckOptions opt;
  opt.trials = 50;
  opt.seed = 2024;
  const auto results = run_gradcheck(opt);
  const double secs = seconds_since(t0);
  bool ok = secs < 60.0 && !results.empty();
  double worst = 0.0;
  std::string worst_op, failed;
  for (const auto& r : results) {
    ok = ok && r.passed && r.trials >= 50;
    if (!r.passed) failed += " " + r.op;
    if (r.max_rel_error > worst) {
      worst = r.max_rel_error;
      worst_op = r.op;
    }
  }
  report(1, ok,
         fmt("%zu ops x 50 trials, max rel error %.2e (%s), %.1f s", results.size(), worst, worst_op.c_str(), secs) +
             (failed.empty() ? "" : ", failed:" + failed));
}

// ---------------------------------------------------------------- 2

// Lovasz extension of the Jaccard loss built from the set function on the
// chain of sets obtained by adding pixels in decreasing error order.
double lovasz_bruteforce(const std::vector<double>& logits, const std::vector<std::uint8_t>& gt) {
  const std::size_t n = logits.size();
  std::vector<double> m(n);
  for (std::size_t i = 0; i < n; ++i) m[i] = std::max(0.0, 1.0 - logits[i] * (gt[i] ? 1.0 : -1.0));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return m[a] > m[b]; });
  std::vector<bool> err(n, false);
  double prev = 0.0, total = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    err[order[k]] = true;
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const bool pred = gt[i] ? !err[i] : err[i];
      inter += gt[i] && pred;
      uni += gt[i] || pred;
    }
    const double cur = uni == 0 ? 0.0 : 1.0 - static_cast<double>(inter) / static_cast<double>(uni);
    total += m[order[k]] * (cur - prev);
    prev = cur;
  }
  return total;
}

void lovasz_oracle() {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> nd(0.0, 2.0);
  double worst = 0.0;
  long cases = 0;
  for (std::size_t n = 1; n <= 10; ++n) {
    for (unsigned bits = 0; bits < (1u << n); ++bits) {
      std::vector<std::uint8_t> y(n);
      for (std::size_t i = 0; i < n; ++i) y[i] = (bits >> i) & 1;
      for (int t = 0; t < 50; ++t) {
        std::vector<double> x(n);
        for (double& v : x) v = nd(rng);
        const double got = lovasz_hinge(Tensor::from_data({n}, x), y).item();
        worst = std::max(worst, std::abs(got - lovasz_bruteforce(x, y)));
        ++cases;
      }
    }
  }
  report(2, worst <= 1e-9, fmt("%ld cases (all label vectors, n = 1..10), max abs diff %.2e", cases, worst));
}

// ---------------------------------------------------------------- 3

LabelMap random_instances(int h, int w, int k, std::mt19937_64& rng) {
  LabelMap m(h, w);
  std::uniform_int_distribution<int> rr(0, h - 1), cc(0, w - 1), rad(2, 9);
  for (int i = 1; i <= k; ++i) {
    const int r0 = rr(rng), c0 = cc(rng), ry = rad(rng), rx = rad(rng);
    for (int y = std::max(0, r0 - ry); y <= std::min(h - 1, r0 + ry); ++y)
      for (int x = std::max(0, c0 - rx); x <= std::min(w - 1, c0 + rx); ++x) {
        const double dy = double(y - r0) / ry, dx = double(x - c0) / rx;
        if (dy * dy + dx * dx <= 1.0) m.at(y, x) = static_cast<Label>(i);
      }
  }
  return relabel_sequential(m);
}

LabelMap jitter(const LabelMap& m, std::mt19937_64& rng) {
  LabelMap out(m.height, m.width);
  const int dy = static_cast<int>(rng() % 5) - 2, dx = static_cast<int>(rng() % 5) - 2;
  const Label drop = static_cast<Label>(rng() % 6 + 1);
  for (int r = 0; r < m.height; ++r)
    for (int c = 0; c < m.width; ++c) {
      const int y = r + dy, x = c + dx;
      if (y < 0 || x < 0 || y >= m.height || x >= m.width) continue;
      if (m.at(y, x) != drop) out.at(r, c) = m.at(y, x);
    }
  return out;
}

int max_matching_bruteforce(const IouTable& t, double tau) {
  const std::size_t np = t.pred_labels.size(), ng = t.gt_labels.size();
  std::vector<int> memo((np + 1) << ng, -1);
  std::function<int(std::size_t, unsigned)> go = [&](std::size_t p, unsigned used) -> int {
    if (p == np) return 0;
    int& m = memo[(p << ng) | used];
    if (m >= 0) return m;
    int best = go(p + 1, used);
    for (std::size_t g = 0; g < ng; ++g)
      if (!((used >> g) & 1) && t.iou[p][g] > tau) best = std::max(best, 1 + go(p + 1, used | (1u << g)));
    return m = best;
  };
  return go(0, 0);
}

void metric_oracle() {
  std::mt19937_64 rng(99);
  int mismatches = 0, non_monotone = 0, not_invariant = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const int h = 8 + static_cast<int>(rng() % 57), w = 8 + static_cast<int>(rng() % 57);
    const LabelMap gt = random_instances(h, w, 1 + static_cast<int>(rng() % 10), rng);
    const LabelMap pred =
        trial % 2 ? jitter(gt, rng) : random_instances(h, w, 1 + static_cast<int>(rng() % 10), rng);
    const IouTable table = iou_table(pred, gt);
    double prev = 2.0;
    std::vector<Label> perm(pred.max_label() + 1);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin() + 1, perm.end(), rng);
    LabelMap relabelled = pred;
    for (Label& v : relabelled.values) v = perm[v];
    for (double tau : kF1Thresholds) {
      mismatches += match_greedy(table, tau).true_positives != max_matching_bruteforce(table, tau);
      const double f = f1_at(pred, gt, tau);
      non_monotone += f > prev;
      prev = f;
      not_invariant += f1_at(relabelled, gt, tau) != f;
    }
  }
  report(3, mismatches == 0 && non_monotone == 0 && not_invariant == 0,
         fmt("200 pairs x 5 thresholds: %d greedy/optimal mismatches, %d monotonicity violations, %d "
             "permutation differences",
             mismatches, non_monotone, not_invariant));
}

// ---------------------------------------------------------------- 4

void postprocessing() {
  const AnalyticExtractor ex(4, 4);
  int count_errors = 0, low_iou = 0;
  double min_iou = 1.0;
  for (int i = 0; i < 100; ++i) {
    SynthConfig sc = SynthConfig::preset(i % 2 ? "crowded" : "default");
    sc.seed = 1000 + i;
    const LabelMap gt = gen_sample(sc, 0).labels;
    const LabelMap out = infer(labels_as_image(gt), ex, PipelineConfig{});
    const IouTable t = iou_table(out, gt);
    count_errors += t.pred_labels.size() != t.gt_labels.size();
    for (std::size_t g = 0; g < t.gt_labels.size(); ++g) {
      double best = 0.0;
      for (std::size_t p = 0; p < t.pred_labels.size(); ++p) best = std::max(best, t.iou[p][g]);
      min_iou = std::min(min_iou, best);
      low_iou += best < 0.9;
    }
  }

  // One large object, two seeds a few pixels apart, each candidate covering it whole.
  LabelMap big(96, 96);
  for (int r = 0; r < 96; ++r)
    for (int c = 0; c < 96; ++c)
      if ((r - 48) * (r - 48) + (c - 48) * (c - 48) <= 30 * 30) big.at(r, c) = 1;
  AnalyticFixture fx = analytic_bundle(big, 4, 4);
  for (double& v : fx.bundle.positional.values) v = 0.0;
  for (int r = 0; r < 96; ++r)
    for (int c = 0; c < 96; ++c) fx.bundle.conditional.at(0, r, c) = 20.0;
  PipelineConfig cfg;
  const std::vector<Seed> seeds{{{46, 48}, 1.0}, {{50, 48}, 0.99}};
  const auto cands = predict_instances(fx.bundle, seeds, fx.head, cfg);
  const auto merged = merge_redundant(cands, cfg);
  const Label merged_count = flatten(merged, 96, 96).max_label();

  report(4, count_errors == 0 && low_iou == 0 && cands.size() == 2 && merged_count == 1,
         fmt("100 maps: %d count errors, %d instances below IoU 0.9 (min %.3f); fragment test: %zu candidates -> "
             "%u instance(s)",
             count_errors, low_iou, min_iou, cands.size(), merged_count));
}

// ---------------------------------------------------------------- 5

void tiling() {
  const AnalyticExtractor ex(4, 4);
  int mismatches = 0;
  long instances = 0;
  int max_diameter = 0;
  const auto t0 = Clock::now();
  for (int i = 0; i < 20; ++i) {
    SynthConfig sc = SynthConfig::preset(i % 2 ? "crowded" : "default");
    sc.size = 512;
    sc.min_instances = 150;
    sc.max_instances = 300;
    sc.seed = 500 + i;
    const LabelMap gt = gen_sample(sc, 0).labels;
    for (const auto& [l, info] : instance_stats(gt)) max_diameter = std::max({max_diameter, info.bbox.height, info.bbox.width});
    instances += gt.max_label();
    const Image img = labels_as_image(gt);
    const LabelMap whole = infer(img, ex, PipelineConfig{});
    const LabelMap tiled = infer_tiled(MemoryImageProvider(img), ex, PipelineConfig{}, 256, 80);
    mismatches += !same_partition(whole, tiled);
  }
  report(5, mismatches == 0 && max_diameter <= 40,
         fmt("20 images 512x512 (%ld instances, max diameter %d px), tile 256 overlap 80: %d partition "
             "mismatches, %.1f s",
             instances, max_diameter, mismatches, seconds_since(t0)));
}

// ---------------------------------------------------------------- 8

void memory_scaling() {
  const int size = 1024;
  const PipelineConfig cfg;  // crop 128
  // 100 discs on a 10 x 10 grid, far enough from the border for unclipped windows.
  LabelMap labels(size, size);
  std::vector<Seed> all;
  for (int i = 0; i < 100; ++i) {
    const int r0 = 96 + (i / 10) * 92, c0 = 96 + (i % 10) * 92;
    for (int r = r0 - 10; r <= r0 + 10; ++r)
      for (int c = c0 - 10; c <= c0 + 10; ++c)
        if ((r - r0) * (r - r0) + (c - c0) * (c - c0) <= 100) labels.at(r, c) = static_cast<Label>(i + 1);
    all.push_back({{r0, c0}, 1.0 - i * 1e-3});
  }
  const AnalyticFixture fx = analytic_bundle(labels, 4, 4);
  bool ok = true;
  std::string detail;
  for (int n : {1, 10, 100}) {
    const std::vector<Seed> seeds(all.begin(), all.begin() + n);
    AllocationStats stats;
    const auto cands = predict_instances(fx.bundle, seeds, fx.head, cfg, &stats);
    const double expected = static_cast<double>(n) * cfg.crop_size * cfg.crop_size * kCandidateBytesPerPixel;
    const double ratio = static_cast<double>(stats.peak.load()) / expected;
    ok = ok && ratio >= 0.5 && ratio <= 2.0 && cands.size() == static_cast<std::size_t>(n);
    detail += fmt("%s%d seeds: peak %zu B, ratio %.3f", detail.empty() ? "" : "; ", n, stats.peak.load(), ratio);
  }
  report(8, ok, "1024x1024, crop 128, " + std::to_string(kCandidateBytesPerPixel) + " B/px: " + detail);
}

// ---------------------------------------------------------------- 9

void serialization() {
  ArchitectureConfig ac;
  ac.seed = 31;
  ModelParams p = build_model(ac);
  // Perturb the running statistics so they are not at their initial values.
  {
    SynthConfig sc;
    std::vector<Image> imgs{gen_sample(sc, 0).image, gen_sample(sc, 1).image};
    forward_batch(p, tensor_from_images(imgs), Mode::kTrain);
  }
  const auto path = std::filesystem::temp_directory_path() / "instanseg_acceptance_model.isgm";
  save_model(p, path);
  const ModelParams q = load_model(path);
  std::filesystem::remove(path);

  bool tensors_equal = true;
  const auto a = p.named_tensors(), b = q.named_tensors();
  tensors_equal = a.size() == b.size();
  for (std::size_t i = 0; tensors_equal && i < a.size(); ++i) {
    tensors_equal = a[i].first == b[i].first && a[i].second.shape() == b[i].second.shape() &&
                    std::memcmp(a[i].second.data().data(), b[i].second.data().data(),
                                a[i].second.numel() * sizeof(double)) == 0;
  }
  int identical = 0;
  std::mt19937_64 rng(77);
  for (int i = 0; i < 10; ++i) {
    const int h = 40 + static_cast<int>(rng() % 60), w = 40 + static_cast<int>(rng() % 60);
    Image img(3, h, w);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (double& v : img.values) v = u(rng);
    const FeatureBundle x = forward(p, img), y = forward(q, img);
    const bool same = x.seed == y.seed && x.positional == y.positional && x.conditional == y.conditional &&
                      infer(img, p, PipelineConfig{}) == infer(img, q, PipelineConfig{});
    identical += same;
  }
  report(9, tensors_equal && identical == 10,
         fmt("%zu tensors %s, %d/10 inferences bit-identical", a.size(), tensors_equal ? "bit-exact" : "DIFFER",
             identical));
}

// ---------------------------------------------------------------- 6 and 7

void training_and_tta() {
  SynthConfig sc;  // default preset, 128 x 128
  sc.seed = 0;
  std::vector<Sample> tr, va, te;
  for (int i = 0; i < 200; ++i) tr.push_back(gen_sample(sc, i));
  for (int i = 200; i < 240; ++i) va.push_back(gen_sample(sc, i));
  for (int i = 240; i < 280; ++i) te.push_back(gen_sample(sc, i));

  ArchitectureConfig ac;  // widths 16 32 64 128
  TrainConfig tc;
  tc.pretrain_epochs = 2;
  tc.epochs = 20;
  tc.batches_per_epoch = 100;
  tc.batch = 3;
  tc.lr = 1e-3;
  tc.crop = 64;
  tc.log_every = 100;
  const PipelineConfig pc;

  const auto t0 = Clock::now();
  const TrainResult result = train(tr, va, build_model(ac), tc, pc, nullptr);
  std::vector<LabelMap> preds, gts;
  for (const Sample& s : te) {
    preds.push_back(infer(s.image, result.best, pc));
    gts.push_back(s.labels);
  }
  const DatasetReport plain = evaluate_dataset(preds, gts);
  const double secs = seconds_since(t0);
  report(6, plain.pooled_f1_05 >= 0.80 && plain.pooled_f1_mu >= 0.55 && secs <= 1800.0,
         fmt("test F1@0.5 %.4f (>= 0.80), F1mu %.4f (>= 0.55), best epoch %d, %.0f s (<= 1800)",
             plain.pooled_f1_05, plain.pooled_f1_mu, result.best_epoch, secs));

  // Analytic features: TTA must reproduce plain inference exactly.
  const AnalyticExtractor ex(4, 4);
  int analytic_mismatch = 0;
  for (int i = 0; i < 10; ++i) {
    SynthConfig s2 = SynthConfig::preset(i % 2 ? "crowded" : "default");
    s2.seed = 300 + i;
    s2.size = i < 5 ? 128 : 96;
    const Image img = labels_as_image(gen_sample(s2, 0).labels);
    PipelineConfig tta = pc;
    tta.tta = true;
    analytic_mismatch += !same_partition(infer(img, ex, pc), run_inference(img, ex, tta));
  }
  std::vector<LabelMap> tta_preds;
  PipelineConfig tta = pc;
  tta.tta = true;
  for (const Sample& s : te) tta_preds.push_back(run_inference(s.image, ModelExtractor(result.best), tta));
  const DatasetReport with_tta = evaluate_dataset(tta_preds, gts);
  report(7, analytic_mismatch == 0,
         fmt("analytic fixture: %d/10 TTA mismatches; trained model F1mu %.4f -> %.4f with TTA (delta %+.4f)",
             analytic_mismatch, plain.pooled_f1_mu, with_tta.pooled_f1_mu,
             with_tta.pooled_f1_mu - plain.pooled_f1_mu));
}

}  // namespace

int main(int argc, char** argv) {
  const std::string which = argc > 1 ? argv[1] : "all";
  if (which != "all" && which != "core" && which != "training") {
    std::fprintf(stderr, "usage: %s [core|training|all]\n", argv[0]);
    return 1;
  }
  if (which != "training") {
    gradient_fidelity();
    lovasz_oracle();
    metric_oracle();
    postprocessing();
    tiling();
    memory_scaling();
    serialization();
  }
  if (which != "core") training_and_tta();
  return failures == 0 ? 0 : 1;
}
