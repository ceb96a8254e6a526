#include "instanseg/rtf.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace instanseg::rtf {

namespace {

static_assert(std::endian::native == std::endian::little, "RTF I/O assumes a little-endian host");

constexpr char kMagic[4] = {'R', 'T', 'F', '1'};

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw std::runtime_error("RTF: truncated stream");
  return v;
}

}  // namespace

void write(std::ostream& os, const Tensor& t, DType dtype) {
  os.write(kMagic, 4);
  put<std::uint8_t>(os, static_cast<std::uint8_t>(dtype));
  if (t.rank() > 255) throw std::invalid_argument("RTF: rank exceeds 255");
  put<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
  for (auto e : t.shape()) put<std::uint64_t>(os, e);
  if (dtype == DType::kFloat64) {
    os.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.numel() * 8));
  } else {
    for (double v : t.data()) put<float>(os, static_cast<float>(v));
  }
  if (!os) throw std::runtime_error("RTF: write failed");
}

Tensor read(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4)) throw std::runtime_error("RTF: truncated stream (no magic)");
  if (std::memcmp(magic, kMagic, 4) != 0) throw std::runtime_error("RTF: bad magic, expected \"RTF1\"");
  const auto dtype = get<std::uint8_t>(is);
  if (dtype > 1) throw std::runtime_error("RTF: unknown dtype code " + std::to_string(dtype));
  const auto rank = get<std::uint8_t>(is);
  Shape shape(rank);
  for (auto& e : shape) e = get<std::uint64_t>(is);
  std::vector<double> data(shape_numel(shape));
  if (dtype == 0) {
    if (!is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * 8))) {
      throw std::runtime_error("RTF: truncated payload for shape " + shape_str(shape));
    }
  } else {
    for (auto& v : data) v = get<float>(is);
  }
  return Tensor::from_data(std::move(shape), std::move(data));
}

void save(const std::filesystem::path& path, const Tensor& t, DType dtype) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("RTF: cannot open " + path.string() + " for writing");
  write(os, t, dtype);
}

Tensor load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("RTF: cannot open " + path.string());
  return read(is);
}

}  // namespace instanseg::rtf
