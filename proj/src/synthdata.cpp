#include "instanseg/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <set>
#include <stdexcept>

#include "instanseg/labelmap.hpp"
#include "instanseg/png_io.hpp"

namespace instanseg {

using nlohmann::json;

SynthConfig SynthConfig::preset(const std::string& name) {
  SynthConfig c;
  if (name == "default") return c;
  if (name == "crowded") {
    c.min_instances = 20;
    c.max_instances = 40;
    c.min_gap = 0;
    c.min_center_spacing = 1.0;
    return c;
  }
  throw std::invalid_argument("unknown synth preset \"" + name + "\" (expected default or crowded)");
}

void SynthConfig::validate() const {
  if (size < 8) throw std::invalid_argument("synth: size must be >= 8");
  if (min_instances < 0 || max_instances < min_instances) throw std::invalid_argument("synth: bad instance range");
  if (min_radius < 2.0 || max_radius < min_radius) throw std::invalid_argument("synth: radius range must start at >= 2");
  if (2.0 * max_radius + 2.0 > size) throw std::invalid_argument("synth: max_radius too large for the image");
  if (min_eccentricity < 0.0 || max_eccentricity >= 1.0 || max_eccentricity < min_eccentricity) {
    throw std::invalid_argument("synth: eccentricity range must lie in [0, 1)");
  }
  if (min_gap < 0) throw std::invalid_argument("synth: min_gap must be >= 0");
  if (channels != 1 && channels != 3) throw std::invalid_argument("synth: channels must be 1 or 3");
}

void to_json(json& j, const SynthConfig& c) {
  j = json{{"size", c.size},
           {"min_instances", c.min_instances},
           {"max_instances", c.max_instances},
           {"min_radius", c.min_radius},
           {"max_radius", c.max_radius},
           {"min_eccentricity", c.min_eccentricity},
           {"max_eccentricity", c.max_eccentricity},
           {"min_gap", c.min_gap},
           {"min_center_spacing", c.min_center_spacing},
           {"fg_min", c.fg_min},
           {"fg_max", c.fg_max},
           {"bg_min", c.bg_min},
           {"bg_max", c.bg_max},
           {"texture_amplitude", c.texture_amplitude},
           {"noise_sigma", c.noise_sigma},
           {"channels", c.channels},
           {"seed", c.seed}};
}

void from_json(const json& j, SynthConfig& c) {
  const json defaults = SynthConfig{};
  for (const auto& [key, _] : j.items()) {
    if (!defaults.contains(key)) throw std::invalid_argument("synth: unknown key \"" + key + "\"");
  }
  c.size = j.value("size", c.size);
  c.min_instances = j.value("min_instances", c.min_instances);
  c.max_instances = j.value("max_instances", c.max_instances);
  c.min_radius = j.value("min_radius", c.min_radius);
  c.max_radius = j.value("max_radius", c.max_radius);
  c.min_eccentricity = j.value("min_eccentricity", c.min_eccentricity);
  c.max_eccentricity = j.value("max_eccentricity", c.max_eccentricity);
  c.min_gap = j.value("min_gap", c.min_gap);
  c.min_center_spacing = j.value("min_center_spacing", c.min_center_spacing);
  c.fg_min = j.value("fg_min", c.fg_min);
  c.fg_max = j.value("fg_max", c.fg_max);
  c.bg_min = j.value("bg_min", c.bg_min);
  c.bg_max = j.value("bg_max", c.bg_max);
  c.texture_amplitude = j.value("texture_amplitude", c.texture_amplitude);
  c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
  c.channels = j.value("channels", c.channels);
  c.seed = j.value("seed", c.seed);
  c.validate();
}

namespace {

struct Ellipse {
  double cr, cc, a, b, theta;
};

std::vector<Pixel> rasterize(const Ellipse& e, int size) {
  std::vector<Pixel> px;
  const int r0 = std::max(0, static_cast<int>(std::floor(e.cr - e.a))), r1 = std::min(size - 1, static_cast<int>(std::ceil(e.cr + e.a)));
  const int c0 = std::max(0, static_cast<int>(std::floor(e.cc - e.a))), c1 = std::min(size - 1, static_cast<int>(std::ceil(e.cc + e.a)));
  const double cs = std::cos(e.theta), sn = std::sin(e.theta);
  for (int r = r0; r <= r1; ++r)
    for (int c = c0; c <= c1; ++c) {
      const double dy = r - e.cr, dx = c - e.cc;
      const double u = (dx * cs + dy * sn) / e.a, v = (-dx * sn + dy * cs) / e.b;
      if (u * u + v * v <= 1.0) px.push_back({r, c});
    }
  return px;
}

// Largest 4-connected piece of a pixel set.
std::vector<Pixel> largest_component(const std::vector<Pixel>& px, int size) {
  if (px.empty()) return px;
  BinaryMask m(size, size);
  for (const Pixel& p : px) m.at(p.row, p.col) = 1;
  const LabelMap cc = connected_components(m);
  const auto stats = instance_stats(cc);
  if (stats.size() <= 1) return px;
  Label best = 0;
  long area = -1;
  for (const auto& [l, info] : stats)
    if (info.area > area) {
      area = info.area;
      best = l;
    }
  std::vector<Pixel> out;
  for (const Pixel& p : px)
    if (cc.at(p.row, p.col) == best) out.push_back(p);
  return out;
}

}  // namespace

Sample gen_sample(const SynthConfig& cfg, std::uint64_t index) {
  cfg.validate();
  std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  std::mt19937_64 rng(seq);
  auto uniform = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  const int n = cfg.size;

  Sample s;
  s.labels = LabelMap(n, n);
  BinaryMask blocked(n, n);
  std::vector<std::pair<double, double>> centers;
  const int target = std::uniform_int_distribution<int>(cfg.min_instances, cfg.max_instances)(rng);
  Label next = 0;
  for (int k = 0; k < target; ++k) {
    for (int attempt = 0; attempt < 1000; ++attempt) {
      const double a = uniform(cfg.min_radius, cfg.max_radius);
      const double e = uniform(cfg.min_eccentricity, cfg.max_eccentricity);
      Ellipse el{0, 0, a, a * std::sqrt(1.0 - e * e), uniform(0.0, std::numbers::pi)};
      el.cr = uniform(a + 1.0, n - 2.0 - a);
      el.cc = uniform(a + 1.0, n - 2.0 - a);
      bool far = true;
      for (const auto& [r, c] : centers)
        if (std::hypot(r - el.cr, c - el.cc) < cfg.min_center_spacing) far = false;
      if (!far) continue;
      const auto px = largest_component(rasterize(el, n), n);
      if (px.empty() || std::any_of(px.begin(), px.end(), [&](const Pixel& p) { return blocked.at(p.row, p.col); })) {
        continue;
      }
      ++next;
      for (const Pixel& p : px) {
        s.labels.at(p.row, p.col) = next;
        for (int y = std::max(0, p.row - cfg.min_gap); y <= std::min(n - 1, p.row + cfg.min_gap); ++y)
          for (int x = std::max(0, p.col - cfg.min_gap); x <= std::min(n - 1, p.col + cfg.min_gap); ++x)
            blocked.at(y, x) = 1;
      }
      centers.emplace_back(el.cr, el.cc);
      break;
    }
  }
  // Labels are assigned in placement order; the map is relabelled so they
  // follow raster order like every other label map.
  s.labels = relabel_sequential(s.labels);

  s.image = Image(cfg.channels, n, n);
  const double bg = uniform(cfg.bg_min, cfg.bg_max);
  // A few long-wavelength sinusoids give the background some structure.
  struct Wave {
    double fr, fc, phase, amp;
  };
  std::vector<Wave> waves;
  for (int i = 0; i < 3; ++i) {
    waves.push_back({uniform(0.01, 0.06), uniform(0.01, 0.06), uniform(0.0, 2.0 * std::numbers::pi),
                     cfg.texture_amplitude * uniform(0.5, 1.0)});
  }
  const Label count = s.labels.max_label();
  std::vector<double> level(count + 1, bg);
  for (Label l = 1; l <= count; ++l) level[l] = uniform(cfg.fg_min, cfg.fg_max);
  std::vector<double> tint(static_cast<std::size_t>(cfg.channels) * (count + 1), 1.0);
  for (Label l = 1; l <= count; ++l)
    for (int ch = 0; ch < cfg.channels; ++ch) tint[l * cfg.channels + ch] = uniform(0.85, 1.0);
  std::normal_distribution<double> noise(0.0, cfg.noise_sigma);
  for (int ch = 0; ch < cfg.channels; ++ch)
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < n; ++c) {
        const Label l = s.labels.at(r, c);
        double v = level[l] * tint[l * cfg.channels + ch];
        if (l == 0)
          for (const Wave& w : waves) v += w.amp * std::sin(w.fr * r + w.fc * c + w.phase + ch);
        v += noise(rng);
        s.image.at(ch, r, c) = std::clamp(v, 0.0, 1.0);
      }
  return s;
}

namespace {

std::string index_name(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d.png", i);
  return buf;
}

}  // namespace

json gen_dataset(const SynthConfig& cfg, int n_train, int n_val, int n_test, const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  if (n_train < 0 || n_val < 0 || n_test < 0) throw std::invalid_argument("gen_dataset: negative split size");
  fs::create_directories(out_dir / "images");
  fs::create_directories(out_dir / "labels");
  json manifest{{"synth", cfg}, {"train", json::array()}, {"val", json::array()}, {"test", json::array()}};
  const int total = n_train + n_val + n_test;
  std::vector<Sample> samples(static_cast<std::size_t>(total));
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < total; ++i) samples[i] = gen_sample(cfg, static_cast<std::uint64_t>(i));
  for (int i = 0; i < total; ++i) {
    const std::string name = index_name(i);
    png::write_image(out_dir / "images" / name, samples[i].image);
    png::write_labels(out_dir / "labels" / name, samples[i].labels);
    const char* split = i < n_train ? "train" : (i < n_train + n_val ? "val" : "test");
    manifest[split].push_back(name);
  }
  std::ofstream os(out_dir / "manifest.json");
  if (!os) throw std::runtime_error("cannot write " + (out_dir / "manifest.json").string());
  os << manifest.dump(2) << "\n";
  if (!os) throw std::runtime_error("write failed: " + (out_dir / "manifest.json").string());
  return manifest;
}

std::vector<Sample> load_split(const std::filesystem::path& dir, const json& manifest, const std::string& split) {
  std::vector<Sample> out;
  if (!manifest.contains(split)) return out;
  for (const auto& name : manifest.at(split)) {
    const std::string n = name.get<std::string>();
    out.push_back({png::read_image(dir / "images" / n), png::read_labels(dir / "labels" / n)});
  }
  return out;
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw std::runtime_error("missing manifest: " + (dir / "manifest.json").string());
  Dataset d;
  try {
    d.manifest = json::parse(is);
  } catch (const json::exception& e) {
    throw std::runtime_error("malformed manifest " + (dir / "manifest.json").string() + ": " + e.what());
  }
  d.train = load_split(dir, d.manifest, "train");
  d.val = load_split(dir, d.manifest, "val");
  d.test = load_split(dir, d.manifest, "test");
  return d;
}

Sample augment_sample(const Sample& sample, int crop, std::mt19937_64& rng) {
  const auto group = Dihedral::group();
  const Dihedral t = group[std::uniform_int_distribution<std::size_t>(0, group.size() - 1)(rng)];
  Sample out{transform(sample.image, t), transform(sample.labels, t)};
  const int h = out.labels.height, w = out.labels.width;
  const int ch = crop > 0 ? std::min(crop, h) : h, cw = crop > 0 ? std::min(crop, w) : w;
  const int top = std::uniform_int_distribution<int>(0, h - ch)(rng);
  const int left = std::uniform_int_distribution<int>(0, w - cw)(rng);
  if (ch == h && cw == w) return out;
  const Rect r{top, left, ch, cw};
  return {crop_image(out.image, r), crop_labels(out.labels, r)};
}

}  // namespace instanseg
