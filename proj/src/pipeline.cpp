#include "instanseg/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <set>
#include <stdexcept>

#include "instanseg/labelmap.hpp"

namespace instanseg {

using nlohmann::json;

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Query point for background pixels of the analytic fixture; far from any
// image so background offsets are always strongly negative.
constexpr double kFarPoint = -1000.0;

InstanceCandidate make_candidate(const Seed& seed, const Rect& window, std::vector<double> logits) {
  InstanceCandidate c;
  c.seed = seed;
  c.window = window;
  c.logits = std::move(logits);
  c.mask.resize(c.logits.size());
  for (std::size_t i = 0; i < c.logits.size(); ++i) {
    c.mask[i] = c.logits[i] >= 0.0 ? 1 : 0;
    c.area += c.mask[i];
  }
  return c;
}

// Sum of P and O, the query space that offsets are measured in.
Image query_map(const FeatureBundle& b) {
  Image q = b.positional;
  for (std::size_t i = 0; i < q.values.size(); ++i) q.values[i] += b.coords.values[i];
  return q;
}

InstanceCandidate merge_two(const InstanceCandidate& a, const InstanceCandidate& b) {
  const Rect w = bounding_union(a.window, b.window);
  std::vector<double> logits(static_cast<std::size_t>(w.area()), kNegInf);
  for (const InstanceCandidate* src : {&a, &b}) {
    const Rect& s = src->window;
    for (int y = 0; y < s.height; ++y)
      for (int x = 0; x < s.width; ++x) {
        double& dst = logits[static_cast<std::size_t>(s.top - w.top + y) * w.width + (s.left - w.left + x)];
        dst = std::max(dst, src->logits[static_cast<std::size_t>(y) * s.width + x]);
      }
  }
  return make_candidate(a.seed, w, std::move(logits));
}

double median_inplace(std::vector<double>& v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

void PipelineConfig::validate() const {
  if (!(seed_threshold > 0.0 && seed_threshold < 1.0)) throw std::invalid_argument("pipeline: seed_threshold must be in (0, 1)");
  if (window_radius < 0) throw std::invalid_argument("pipeline: window_radius must be >= 0");
  if (crop_size < 2 || crop_size % 2 != 0) throw std::invalid_argument("pipeline: crop_size must be even and >= 2");
  if (!(merge_iou > 0.0 && merge_iou < 1.0)) throw std::invalid_argument("pipeline: merge_iou must be in (0, 1)");
}

void to_json(json& j, const PipelineConfig& c) {
  j = json{{"seed_threshold", c.seed_threshold}, {"window_radius", c.window_radius}, {"crop_size", c.crop_size},
           {"merge_iou", c.merge_iou},           {"tta", c.tta},                     {"seed", c.seed}};
}

void from_json(const json& j, PipelineConfig& c) {
  static const std::set<std::string> known{"seed_threshold", "window_radius", "crop_size", "merge_iou", "tta", "seed"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw std::invalid_argument("pipeline: unknown key \"" + key + "\"");
  }
  c.seed_threshold = j.value("seed_threshold", c.seed_threshold);
  c.window_radius = j.value("window_radius", c.window_radius);
  c.crop_size = j.value("crop_size", c.crop_size);
  c.merge_iou = j.value("merge_iou", c.merge_iou);
  c.tta = j.value("tta", c.tta);
  c.seed = j.value("seed", c.seed);
  c.validate();
}

double InstanceCandidate::logit_at(int r, int c) const {
  if (!window.contains(r, c)) return kNegInf;
  return logits[static_cast<std::size_t>(r - window.top) * window.width + (c - window.left)];
}

std::vector<Seed> sample_seeds(const Image& seed_map, const PipelineConfig& cfg) {
  const int h = seed_map.height, w = seed_map.width, rad = cfg.window_radius;
  auto s = [&](int r, int c) { return seed_map.at(0, r, c); };
  std::vector<std::uint8_t> is_max(seed_map.plane_size(), 0);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const double v = s(r, c);
      if (!(v >= cfg.seed_threshold)) continue;
      bool ok = true;
      for (int y = std::max(0, r - rad); ok && y <= std::min(h - 1, r + rad); ++y)
        for (int x = std::max(0, c - rad); x <= std::min(w - 1, c + rad); ++x)
          if (s(y, x) > v) {
            ok = false;
            break;
          }
      is_max[static_cast<std::size_t>(r) * w + c] = ok;
    }

  std::vector<Seed> seeds;
  std::vector<std::uint8_t> seen(is_max.size(), 0);
  std::vector<Pixel> stack;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const std::size_t i = static_cast<std::size_t>(r) * w + c;
      if (!is_max[i] || seen[i]) continue;
      const double v = s(r, c);
      seeds.push_back({{r, c}, v});
      seen[i] = 1;
      stack.push_back({r, c});
      while (!stack.empty()) {
        const Pixel p = stack.back();
        stack.pop_back();
        const Pixel nb[4] = {{p.row - 1, p.col}, {p.row + 1, p.col}, {p.row, p.col - 1}, {p.row, p.col + 1}};
        for (const Pixel& q : nb) {
          if (q.row < 0 || q.col < 0 || q.row >= h || q.col >= w) continue;
          const std::size_t j = static_cast<std::size_t>(q.row) * w + q.col;
          if (seen[j] || !is_max[j] || s(q.row, q.col) != v) continue;
          seen[j] = 1;
          stack.push_back(q);
        }
      }
    }
  std::stable_sort(seeds.begin(), seeds.end(), [](const Seed& a, const Seed& b) { return a.score > b.score; });
  return seeds;
}

Rect seed_window(Pixel u, int height, int width, int crop_size) {
  const int half = crop_size / 2;
  return intersect(Rect{u.row - half, u.col - half, crop_size, crop_size}, Rect{0, 0, height, width});
}

void AllocationStats::allocate(std::size_t bytes) {
  const std::size_t now = current.fetch_add(bytes) + bytes;
  std::size_t prev = peak.load();
  while (now > prev && !peak.compare_exchange_weak(prev, now)) {
  }
}

void AllocationStats::release(std::size_t bytes) { current.fetch_sub(bytes); }

std::vector<InstanceCandidate> predict_instances(const FeatureBundle& bundle, const std::vector<Seed>& seeds,
                                                 const InstanceHead& head, const PipelineConfig& cfg,
                                                 AllocationStats* stats) {
  const int h = bundle.height(), w = bundle.width();
  const int dp = bundle.positional.channels, de = bundle.conditional.channels;
  if (dp != head.positional_dim || de != head.conditional_dim) {
    throw std::invalid_argument("predict_instances: bundle has " + std::to_string(dp) + "/" + std::to_string(de) +
                                " embedding channels, head expects " + std::to_string(head.positional_dim) + "/" +
                                std::to_string(head.conditional_dim));
  }
  const Image q = query_map(bundle);
  const Image& e = bundle.conditional;
  std::vector<std::optional<InstanceCandidate>> slots(seeds.size());

#pragma omp parallel
  {
    std::vector<double> offset(dp), cond(de), scratch(head.hidden_width()), anchor(dp);
#pragma omp for schedule(dynamic)
    for (std::size_t k = 0; k < seeds.size(); ++k) {
      const Pixel u = seeds[k].u;
      const Rect win = seed_window(u, h, w, cfg.crop_size);
      const std::size_t bytes = static_cast<std::size_t>(win.area()) * kCandidateBytesPerPixel;
      if (stats) stats->allocate(bytes);
      std::vector<double> logits(static_cast<std::size_t>(win.area()));
      for (int c = 0; c < dp; ++c) anchor[c] = q.at(c, u.row, u.col);
      for (int y = 0; y < win.height; ++y)
        for (int x = 0; x < win.width; ++x) {
          const int r = win.top + y, col = win.left + x;
          for (int c = 0; c < dp; ++c) offset[c] = q.at(c, r, col) - anchor[c];
          for (int c = 0; c < de; ++c) cond[c] = e.at(c, r, col);
          logits[static_cast<std::size_t>(y) * win.width + x] = head.logit(offset, cond, scratch);
        }
      InstanceCandidate cand = make_candidate(seeds[k], win, std::move(logits));
      if (cand.area == 0) {
        if (stats) stats->release(bytes);
        continue;
      }
      slots[k] = std::move(cand);
    }
  }
  std::vector<InstanceCandidate> out;
  for (auto& s : slots)
    if (s) out.push_back(std::move(*s));
  return out;
}

double candidate_iou(const InstanceCandidate& a, const InstanceCandidate& b) {
  const Rect ov = intersect(a.window, b.window);
  std::size_t inter = 0;
  for (int r = ov.top; r < ov.bottom(); ++r)
    for (int c = ov.left; c < ov.right(); ++c) {
      const bool x = a.mask[static_cast<std::size_t>(r - a.window.top) * a.window.width + (c - a.window.left)];
      const bool y = b.mask[static_cast<std::size_t>(r - b.window.top) * b.window.width + (c - b.window.left)];
      inter += x && y;
    }
  const std::size_t uni = a.area + b.area - inter;
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<InstanceCandidate> merge_redundant(std::vector<InstanceCandidate> cands, const PipelineConfig& cfg) {
  std::stable_sort(cands.begin(), cands.end(),
                   [](const InstanceCandidate& a, const InstanceCandidate& b) { return a.seed.score > b.seed.score; });
  bool changed = true;
  while (changed) {
    changed = false;
    for (std::size_t i = 0; i < cands.size(); ++i) {
      std::size_t j = i + 1;
      while (j < cands.size()) {
        if (candidate_iou(cands[i], cands[j]) >= cfg.merge_iou) {
          cands[i] = merge_two(cands[i], cands[j]);
          cands.erase(cands.begin() + static_cast<std::ptrdiff_t>(j));
          changed = true;
          j = i + 1;  // the grown mask may now overlap earlier rejects
        } else {
          ++j;
        }
      }
    }
  }
  return cands;
}

LabelMap flatten(const std::vector<InstanceCandidate>& cands, int height, int width) {
  std::vector<double> best(static_cast<std::size_t>(height) * width, kNegInf);
  LabelMap out(height, width);
  for (std::size_t k = 0; k < cands.size(); ++k) {
    const Rect win = intersect(cands[k].window, Rect{0, 0, height, width});
    for (int r = win.top; r < win.bottom(); ++r)
      for (int c = win.left; c < win.right(); ++c) {
        const double v = cands[k].logit_at(r, c);
        const std::size_t i = static_cast<std::size_t>(r) * width + c;
        if (v > best[i]) {
          best[i] = v;
          out.values[i] = static_cast<Label>(k + 1);
        }
      }
  }
  for (std::size_t i = 0; i < best.size(); ++i)
    if (!(best[i] >= 0.0)) out.values[i] = 0;
  return relabel_sequential(out);
}

LabelMap infer(const Image& image, const FeatureExtractor& extractor, const PipelineConfig& cfg) {
  const FeatureBundle bundle = extractor.extract(image);
  const auto seeds = sample_seeds(bundle.seed, cfg);
  auto cands = predict_instances(bundle, seeds, extractor.head(), cfg);
  cands = merge_redundant(std::move(cands), cfg);
  return flatten(cands, image.height, image.width);
}

LabelMap infer(const Image& image, const ModelParams& params, const PipelineConfig& cfg) {
  return infer(image, ModelExtractor(params), cfg);
}

LabelMap tta_infer(const Image& image, const FeatureExtractor& extractor, const PipelineConfig& cfg) {
  const int h = image.height, w = image.width, side = std::max(h, w);
  const Image padded = pad_image(image, side, side);
  const auto transforms = Dihedral::tta_set();
  const std::size_t n = transforms.size();
  std::vector<FeatureBundle> bundles;
  std::vector<Image> queries;
  for (const auto& t : transforms) {
    bundles.push_back(extractor.extract(transform(padded, t)));
    queries.push_back(query_map(bundles.back()));
  }
  const InstanceHead& head = extractor.head();
  const int dp = head.positional_dim, de = head.conditional_dim;

  Image mean_seed(1, h, w);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      double acc = 0.0;
      for (std::size_t t = 0; t < n; ++t) {
        const Pixel q = transforms[t].map({r, c}, side, side);
        acc += bundles[t].seed.at(0, q.row, q.col);
      }
      mean_seed.at(0, r, c) = acc / static_cast<double>(n);
    }
  const auto seeds = sample_seeds(mean_seed, cfg);

  std::vector<std::optional<InstanceCandidate>> slots(seeds.size());
#pragma omp parallel
  {
    std::vector<double> offset(dp), cond(de), scratch(head.hidden_width()), values(n);
    std::vector<Pixel> anchors(n);
#pragma omp for schedule(dynamic)
    for (std::size_t k = 0; k < seeds.size(); ++k) {
      const Pixel u = seeds[k].u;
      for (std::size_t t = 0; t < n; ++t) anchors[t] = transforms[t].map(u, side, side);
      const Rect win = seed_window(u, h, w, cfg.crop_size);
      std::vector<double> logits(static_cast<std::size_t>(win.area()));
      for (int y = 0; y < win.height; ++y)
        for (int x = 0; x < win.width; ++x) {
          for (std::size_t t = 0; t < n; ++t) {
            const Pixel p = transforms[t].map({win.top + y, win.left + x}, side, side);
            const Image& qt = queries[t];
            for (int c = 0; c < dp; ++c) offset[c] = qt.at(c, p.row, p.col) - qt.at(c, anchors[t].row, anchors[t].col);
            for (int c = 0; c < de; ++c) cond[c] = bundles[t].conditional.at(c, p.row, p.col);
            values[t] = head.logit(offset, cond, scratch);
          }
          logits[static_cast<std::size_t>(y) * win.width + x] = median_inplace(values);
        }
      InstanceCandidate cand = make_candidate(seeds[k], win, std::move(logits));
      if (cand.area > 0) slots[k] = std::move(cand);
    }
  }
  std::vector<InstanceCandidate> cands;
  for (auto& s : slots)
    if (s) cands.push_back(std::move(*s));
  cands = merge_redundant(std::move(cands), cfg);
  return flatten(cands, h, w);
}

LabelMap tta_infer(const Image& image, const ModelParams& params, const PipelineConfig& cfg) {
  return tta_infer(image, ModelExtractor(params), cfg);
}

LabelMap run_inference(const Image& image, const FeatureExtractor& extractor, const PipelineConfig& cfg) {
  return cfg.tta ? tta_infer(image, extractor, cfg) : infer(image, extractor, cfg);
}

InstanceHead analytic_head(int positional_dim, int conditional_dim) {
  if (positional_dim < 2 || conditional_dim < 1) {
    throw std::invalid_argument("analytic_head: needs positional_dim >= 2 and conditional_dim >= 1");
  }
  const std::size_t in = static_cast<std::size_t>(positional_dim + conditional_dim);
  const std::size_t hidden = static_cast<std::size_t>(2 * positional_dim + 1);
  std::vector<double> w1(hidden * in, 0.0), w2(hidden, -1.0);
  // Units 2c and 2c+1 are relu(+offset_c) and relu(-offset_c); their sum is |offset_c|.
  for (int c = 0; c < positional_dim; ++c) {
    w1[(2 * c) * in + c] = 1.0;
    w1[(2 * c + 1) * in + c] = -1.0;
  }
  // Last unit passes the radius through.
  w1[(hidden - 1) * in + positional_dim] = 1.0;
  w2[hidden - 1] = 1.0;
  InstanceHead head;
  head.positional_dim = positional_dim;
  head.conditional_dim = conditional_dim;
  head.hidden.weight = Tensor::from_data({hidden, in, 1, 1}, std::move(w1));
  head.hidden.bias = Tensor::zeros({hidden});
  head.output.weight = Tensor::from_data({1, hidden, 1, 1}, std::move(w2));
  head.output.bias = Tensor::zeros({1});
  return head;
}

AnalyticFixture analytic_bundle(const LabelMap& labels, int positional_dim, int conditional_dim) {
  AnalyticFixture f;
  f.head = analytic_head(positional_dim, conditional_dim);
  const int h = labels.height, w = labels.width;
  const DistanceMap dist = boundary_distance(labels);
  const auto stats = instance_stats(labels);
  FeatureBundle& b = f.bundle;
  b.seed = Image(1, h, w);
  b.seed.values = dist.values;
  b.coords = image_from_tensor(coordinate_grid(h, w, positional_dim));
  b.positional = Image(positional_dim, h, w);
  b.conditional = Image(conditional_dim, h, w);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const Label l = labels.at(r, c);
      double qr = kFarPoint, qc = kFarPoint;
      if (l != 0) {
        const InstanceInfo& info = stats.at(l);
        qr = info.centroid_row;
        qc = info.centroid_col;
        b.conditional.at(0, r, c) = std::sqrt(static_cast<double>(info.area) / std::numbers::pi);
      }
      b.positional.at(0, r, c) = qr - b.coords.at(0, r, c);
      b.positional.at(1, r, c) = qc - b.coords.at(1, r, c);
    }
  return f;
}

AnalyticExtractor::AnalyticExtractor(int positional_dim, int conditional_dim)
    : positional_dim_(positional_dim), conditional_dim_(conditional_dim),
      head_(analytic_head(positional_dim, conditional_dim)) {}

FeatureBundle AnalyticExtractor::extract(const Image& image) const {
  LabelMap labels(image.height, image.width);
  for (int r = 0; r < image.height; ++r)
    for (int c = 0; c < image.width; ++c) labels.at(r, c) = static_cast<Label>(std::lround(image.at(0, r, c)));
  return analytic_bundle(labels, positional_dim_, conditional_dim_).bundle;
}

Image labels_as_image(const LabelMap& labels) {
  Image img(1, labels.height, labels.width);
  for (std::size_t i = 0; i < labels.size(); ++i) img.values[i] = static_cast<double>(labels.values[i]);
  return img;
}

}  // namespace instanseg
