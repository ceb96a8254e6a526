#include "instanseg/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

#include "instanseg/rtf.hpp"

namespace instanseg {

using nlohmann::json;

void ArchitectureConfig::validate() const {
  if (in_channels < 1) throw std::invalid_argument("architecture: in_channels must be >= 1");
  if (widths.size() < 2) throw std::invalid_argument("architecture: need at least two width levels");
  for (int w : widths)
    if (w < 1) throw std::invalid_argument("architecture: widths must be positive");
  if (feature_dim < 1) throw std::invalid_argument("architecture: feature_dim must be >= 1");
  if (positional_dim < 2) throw std::invalid_argument("architecture: positional_dim must be >= 2");
  if (conditional_dim < 0) throw std::invalid_argument("architecture: conditional_dim must be >= 0");
  if (phi_hidden < 1) throw std::invalid_argument("architecture: phi_hidden must be >= 1");
}

int ArchitectureConfig::size_multiple() const {
  const int pool = 1 << (widths.size() - 1);
  return std::max(32, pool);
}

void to_json(json& j, const ArchitectureConfig& c) {
  j = json{{"in_channels", c.in_channels},         {"widths", c.widths},
           {"feature_dim", c.feature_dim},         {"positional_dim", c.positional_dim},
           {"conditional_dim", c.conditional_dim}, {"phi_hidden", c.phi_hidden},
           {"seed", c.seed}};
}

void from_json(const json& j, ArchitectureConfig& c) {
  static const std::set<std::string> known{"in_channels",     "widths",     "feature_dim", "positional_dim",
                                           "conditional_dim", "phi_hidden", "seed"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw std::invalid_argument("architecture: unknown key \"" + key + "\"");
  }
  c.in_channels = j.value("in_channels", c.in_channels);
  c.widths = j.value("widths", c.widths);
  c.feature_dim = j.value("feature_dim", c.feature_dim);
  c.positional_dim = j.value("positional_dim", c.positional_dim);
  c.conditional_dim = j.value("conditional_dim", c.conditional_dim);
  c.phi_hidden = j.value("phi_hidden", c.phi_hidden);
  c.seed = j.value("seed", c.seed);
  c.validate();
}

std::uint64_t config_hash(const ArchitectureConfig& c) {
  const std::string s = json(c).dump();
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

namespace {

ConvLayer make_conv(int in, int out, int k, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in * k * k));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> w(static_cast<std::size_t>(out) * in * k * k);
  for (auto& v : w) v = dist(rng);
  const auto o = static_cast<std::size_t>(out), i = static_cast<std::size_t>(in), kk = static_cast<std::size_t>(k);
  return ConvLayer{Tensor::from_data({o, i, kk, kk}, std::move(w), true), Tensor::zeros({o}, true)};
}

NormLayer make_norm(int channels) {
  const auto c = static_cast<std::size_t>(channels);
  return NormLayer{Tensor::full({c}, 1.0, true), Tensor::zeros({c}, true), BatchNormState::create(c)};
}

ConvUnit make_unit(int in, int out, int k, std::mt19937_64& rng) {
  return ConvUnit{make_conv(in, out, k, rng), make_norm(out)};
}

ResBlock make_block(int in, int out, std::mt19937_64& rng) {
  ResBlock b{make_unit(in, out, 3, rng), make_unit(out, out, 3, rng), {}};
  if (in != out) b.shortcut = make_conv(in, out, 1, rng);
  return b;
}

Tensor run_unit(ConvUnit& u, const Tensor& x, Mode mode) {
  return relu(batchnorm2d(conv2d(x, u.conv.weight, u.conv.bias), u.norm.gamma, u.norm.beta, u.norm.state, mode));
}

Tensor run_block(ResBlock& b, const Tensor& x, Mode mode) {
  Tensor y = run_unit(b.second, run_unit(b.first, x, mode), mode);
  Tensor skip = b.shortcut.weight.defined() ? conv2d(x, b.shortcut.weight, b.shortcut.bias) : x;
  return add(y, skip);
}

void push_conv(std::vector<std::pair<std::string, Tensor>>& out, const std::string& name, const ConvLayer& c) {
  if (!c.weight.defined()) return;
  out.emplace_back(name + ".weight", c.weight);
  out.emplace_back(name + ".bias", c.bias);
}

void push_unit(std::vector<std::pair<std::string, Tensor>>& out, const std::string& name, const ConvUnit& u) {
  push_conv(out, name + ".conv", u.conv);
  out.emplace_back(name + ".norm.gamma", u.norm.gamma);
  out.emplace_back(name + ".norm.beta", u.norm.beta);
  out.emplace_back(name + ".norm.running_mean", u.norm.state.running_mean);
  out.emplace_back(name + ".norm.running_var", u.norm.state.running_var);
}

void push_block(std::vector<std::pair<std::string, Tensor>>& out, const std::string& name, const ResBlock& b) {
  push_unit(out, name + ".first", b.first);
  push_unit(out, name + ".second", b.second);
  push_conv(out, name + ".shortcut", b.shortcut);
}

bool is_running_stat(const std::string& name) { return name.find(".running_") != std::string::npos; }

}  // namespace

double InstanceHead::logit(std::span<const double> offset, std::span<const double> conditional,
                           std::span<double> scratch) const {
  const std::size_t hidden_n = hidden.weight.dim(0);
  const std::size_t in_n = hidden.weight.dim(1);
  const double* w1 = hidden.weight.data().data();
  const double* b1 = hidden.bias.data().data();
  const double* w2 = output.weight.data().data();
  double out = output.bias[0];
  for (std::size_t h = 0; h < hidden_n; ++h) {
    const double* row = w1 + h * in_n;
    double s = b1[h];
    for (std::size_t i = 0; i < offset.size(); ++i) s += row[i] * offset[i];
    for (std::size_t i = 0; i < conditional.size(); ++i) s += row[offset.size() + i] * conditional[i];
    scratch[h] = s > 0.0 ? s : 0.0;
  }
  for (std::size_t h = 0; h < hidden_n; ++h) out += w2[h] * scratch[h];
  return out;
}

InstanceHead make_instance_head(int positional_dim, int conditional_dim, int hidden, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  InstanceHead head;
  head.positional_dim = positional_dim;
  head.conditional_dim = conditional_dim;
  head.hidden = make_conv(positional_dim + conditional_dim, hidden, 1, rng);
  head.output = make_conv(hidden, 1, 1, rng);
  // Start pessimistic: small predicted instances until the head has learned.
  head.output.bias.mutable_data()[0] = -1.0;
  return head;
}

std::vector<std::pair<std::string, Tensor>> ModelParams::named_tensors() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t l = 0; l < encoder.size(); ++l) push_block(out, "encoder." + std::to_string(l), encoder[l]);
  for (std::size_t l = 0; l < decoder.size(); ++l) {
    push_conv(out, "decoder." + std::to_string(l) + ".up_proj", up_proj[l]);
    push_block(out, "decoder." + std::to_string(l), decoder[l]);
  }
  push_unit(out, "features", features);
  push_conv(out, "head.seed", seed_head);
  push_conv(out, "head.positional", positional_head);
  push_conv(out, "head.conditional", conditional_head);
  push_conv(out, "phi.hidden", phi.hidden);
  push_conv(out, "phi.output", phi.output);
  return out;
}

std::vector<Tensor> ModelParams::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_tensors())
    if (!is_running_stat(name)) out.push_back(t);
  return out;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : parameters()) n += t.numel();
  return n;
}

ModelParams build_model(const ArchitectureConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  ModelParams p;
  p.config = config;
  const auto& w = config.widths;
  const std::size_t levels = w.size();
  for (std::size_t l = 0; l < levels; ++l) {
    p.encoder.push_back(make_block(l == 0 ? config.in_channels : w[l - 1], w[l], rng));
  }
  for (std::size_t l = 0; l + 1 < levels; ++l) {
    p.up_proj.push_back(make_conv(w[l + 1], w[l], 1, rng));
    p.decoder.push_back(make_block(w[l], w[l], rng));
  }
  p.features = make_unit(w[0], config.feature_dim, 1, rng);
  p.seed_head = make_conv(config.feature_dim, 1, 1, rng);
  p.positional_head = make_conv(config.feature_dim, config.positional_dim, 1, rng);
  if (config.conditional_dim > 0) p.conditional_head = make_conv(config.feature_dim, config.conditional_dim, 1, rng);
  p.phi = make_instance_head(config.positional_dim, config.conditional_dim, config.phi_hidden, rng());
  return p;
}

ModelParams clone_model(const ModelParams& params) {
  ModelParams out = build_model(params.config);
  const auto src = params.named_tensors();
  const auto dst = out.named_tensors();
  for (std::size_t i = 0; i < src.size(); ++i) {
    auto d = dst[i].second;
    std::copy(src[i].second.data().begin(), src[i].second.data().end(), d.mutable_data().begin());
  }
  out.phi.positional_dim = params.phi.positional_dim;
  out.phi.conditional_dim = params.phi.conditional_dim;
  return out;
}

HeadOutputs forward_batch(ModelParams& params, const Tensor& input, Mode mode) {
  const auto& cfg = params.config;
  if (input.rank() != 4 || static_cast<int>(input.dim(1)) != cfg.in_channels) {
    throw std::invalid_argument("forward: input " + shape_str(input.shape()) + " does not have " +
                                std::to_string(cfg.in_channels) + " channels as configured");
  }
  const std::size_t h = input.dim(2), w = input.dim(3);
  const auto m = static_cast<std::size_t>(cfg.size_multiple());
  const std::size_t ph = (h + m - 1) / m * m, pw = (w + m - 1) / m * m;
  Tensor x = (ph == h && pw == w) ? input : pad_reflect(input, 0, ph - h, 0, pw - w);

  const std::size_t levels = params.encoder.size();
  std::vector<Tensor> skips(levels);
  for (std::size_t l = 0; l < levels; ++l) {
    if (l > 0) x = maxpool2x2(x);
    x = run_block(params.encoder[l], x, mode);
    skips[l] = x;
  }
  for (std::size_t l = levels - 1; l-- > 0;) {
    // 1x1 projection commutes with nearest upsampling; project at low resolution.
    Tensor up = upsample_nearest2x(conv2d(x, params.up_proj[l].weight, params.up_proj[l].bias));
    x = run_block(params.decoder[l], add(up, skips[l]), mode);
  }
  Tensor f = run_unit(params.features, x, mode);
  HeadOutputs out;
  out.seed = sigmoid(conv2d(f, params.seed_head.weight, params.seed_head.bias));
  out.positional = conv2d(f, params.positional_head.weight, params.positional_head.bias);
  out.conditional = params.conditional_head.weight.defined()
                        ? conv2d(f, params.conditional_head.weight, params.conditional_head.bias)
                        : Tensor::zeros({f.dim(0), 0, f.dim(2), f.dim(3)});
  if (ph != h || pw != w) {
    out.seed = crop(out.seed, 0, 0, h, w);
    out.positional = crop(out.positional, 0, 0, h, w);
    out.conditional = crop(out.conditional, 0, 0, h, w);
  }
  return out;
}

HeadOutputs forward_batch(const ModelParams& params, const Tensor& input) {
  NoGradGuard guard;
  // Eval mode reads running statistics only.
  return forward_batch(const_cast<ModelParams&>(params), input, Mode::kEval);
}

Tensor coordinate_grid(int height, int width, int positional_dim) {
  if (positional_dim < 2) throw std::invalid_argument("coordinate_grid: positional_dim must be >= 2");
  const auto h = static_cast<std::size_t>(height), w = static_cast<std::size_t>(width);
  std::vector<double> v(static_cast<std::size_t>(positional_dim) * h * w, 0.0);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      v[r * w + c] = static_cast<double>(r);
      v[h * w + r * w + c] = static_cast<double>(c);
    }
  return Tensor::from_data({static_cast<std::size_t>(positional_dim), h, w}, std::move(v));
}

Image image_from_tensor(const Tensor& t, std::size_t batch_index) {
  if (t.rank() != 4 && t.rank() != 3) throw std::invalid_argument("image_from_tensor: need CHW or NCHW");
  const std::size_t off = t.rank() == 4 ? 1 : 0;
  const int c = static_cast<int>(t.dim(off)), h = static_cast<int>(t.dim(off + 1)), w = static_cast<int>(t.dim(off + 2));
  Image img(c, h, w);
  const std::size_t n = img.values.size();
  std::copy_n(t.data().data() + batch_index * n, n, img.values.begin());
  return img;
}

Tensor tensor_from_image(const Image& img) {
  return Tensor::from_data({1, static_cast<std::size_t>(img.channels), static_cast<std::size_t>(img.height),
                            static_cast<std::size_t>(img.width)},
                           img.values);
}

Tensor tensor_from_images(std::span<const Image> images) {
  if (images.empty()) throw std::invalid_argument("tensor_from_images: empty batch");
  const Image& f = images.front();
  std::vector<double> v;
  v.reserve(images.size() * f.values.size());
  for (const auto& img : images) {
    if (img.channels != f.channels || img.height != f.height || img.width != f.width) {
      throw std::invalid_argument("tensor_from_images: images differ in shape");
    }
    v.insert(v.end(), img.values.begin(), img.values.end());
  }
  return Tensor::from_data({images.size(), static_cast<std::size_t>(f.channels), static_cast<std::size_t>(f.height),
                            static_cast<std::size_t>(f.width)},
                           std::move(v));
}

FeatureBundle make_bundle(const HeadOutputs& out, std::size_t batch_index) {
  FeatureBundle b;
  b.seed = image_from_tensor(out.seed, batch_index);
  b.positional = image_from_tensor(out.positional, batch_index);
  b.conditional = image_from_tensor(out.conditional, batch_index);
  b.coords = image_from_tensor(coordinate_grid(b.seed.height, b.seed.width, b.positional.channels));
  return b;
}

FeatureBundle forward(const ModelParams& params, const Image& image) {
  return make_bundle(forward_batch(params, tensor_from_image(image)), 0);
}

Tensor phi_forward(const Tensor& offsets, const Tensor& conditional, const InstanceHead& head) {
  if (static_cast<int>(offsets.dim(1)) != head.positional_dim ||
      static_cast<int>(conditional.dim(1)) != head.conditional_dim) {
    throw std::invalid_argument("phi_forward: channels " + shape_str(offsets.shape()) + " / " +
                                shape_str(conditional.shape()) + " do not match head (" +
                                std::to_string(head.positional_dim) + ", " +
                                std::to_string(head.conditional_dim) + ")");
  }
  Tensor in = head.conditional_dim > 0 ? concat_channels(offsets, conditional) : offsets;
  Tensor hidden = relu(conv2d(in, head.hidden.weight, head.hidden.bias));
  return conv2d(hidden, head.output.weight, head.output.bias);
}

namespace {

constexpr char kModelMagic[4] = {'I', 'S', 'G', 'M'};

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::string& what) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw std::runtime_error("model file truncated in " + what);
  return v;
}

json read_header(std::istream& is, const std::filesystem::path& path) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kModelMagic, 4) != 0) {
    throw std::runtime_error(path.string() + ": not a model file (bad magic)");
  }
  const auto version = get<std::uint32_t>(is, "version");
  if (version != kModelFormatVersion) {
    throw std::runtime_error(path.string() + ": unsupported model format version " + std::to_string(version) +
                             " (expected " + std::to_string(kModelFormatVersion) + ")");
  }
  const auto len = get<std::uint64_t>(is, "header length");
  if (len > (1u << 26)) throw std::runtime_error(path.string() + ": implausible header length");
  std::string text(len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(len))) {
    throw std::runtime_error(path.string() + ": model file truncated in header");
  }
  return json::parse(text);
}

}  // namespace

void save_model(const ModelParams& params, const std::filesystem::path& path) {
  const auto tensors = params.named_tensors();
  json dir = json::array();
  std::uint64_t offset = 0;
  std::ostringstream payload;
  for (const auto& [name, t] : tensors) {
    const auto start = static_cast<std::uint64_t>(payload.tellp());
    rtf::write(payload, t);
    const auto end = static_cast<std::uint64_t>(payload.tellp());
    dir.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"bytes", end - start}});
    offset += end - start;
  }
  json header{{"format", "instanseg-model"},
              {"version", kModelFormatVersion},
              {"config", params.config},
              {"config_hash", config_hash(params.config)},
              {"tensors", dir}};
  const std::string text = header.dump();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write model to " + path.string());
  os.write(kModelMagic, 4);
  put<std::uint32_t>(os, kModelFormatVersion);
  put<std::uint64_t>(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  const std::string blob = payload.str();
  os.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!os) throw std::runtime_error("failed writing model to " + path.string());
}

nlohmann::json read_model_header(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open model " + path.string());
  return read_header(is, path);
}

ModelParams load_model(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open model " + path.string());
  const json header = read_header(is, path);
  if (header.value("version", 0) != static_cast<int>(kModelFormatVersion)) {
    throw std::runtime_error(path.string() + ": header version mismatch");
  }
  ModelParams p = build_model(header.at("config").get<ArchitectureConfig>());
  auto tensors = p.named_tensors();
  const auto& dir = header.at("tensors");
  if (dir.size() != tensors.size()) {
    throw std::runtime_error(path.string() + ": tensor directory has " + std::to_string(dir.size()) +
                             " entries, architecture needs " + std::to_string(tensors.size()));
  }
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    auto& [name, t] = tensors[i];
    if (dir[i].at("name").get<std::string>() != name) {
      throw std::runtime_error(path.string() + ": unexpected tensor " + dir[i].at("name").get<std::string>() +
                               ", expected " + name);
    }
    Tensor loaded;
    try {
      loaded = rtf::read(is);
    } catch (const std::runtime_error& e) {
      throw std::runtime_error(path.string() + ": payload for " + name + " unreadable: " + e.what());
    }
    if (loaded.shape() != t.shape()) {
      throw std::runtime_error(path.string() + ": shape mismatch for " + name);
    }
    auto dst = t.mutable_data();
    std::copy(loaded.data().begin(), loaded.data().end(), dst.begin());
  }
  return p;
}

}  // namespace instanseg
