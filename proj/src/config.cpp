#include "instanseg/config.hpp"

#include <fstream>
#include <stdexcept>

namespace instanseg {

using nlohmann::json;

void to_json(json& j, const RunConfig& c) {
  j = json{{"architecture", c.architecture}, {"pipeline", c.pipeline}, {"train", c.train}, {"synth", c.synth}};
}

void from_json(const json& j, RunConfig& c) {
  if (!j.is_object()) throw std::invalid_argument("run config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (key == "architecture") {
      from_json(value, c.architecture);
    } else if (key == "pipeline") {
      from_json(value, c.pipeline);
    } else if (key == "train") {
      from_json(value, c.train);
    } else if (key == "synth") {
      from_json(value, c.synth);
    } else {
      throw std::invalid_argument("run config: unknown section \"" + key + "\"");
    }
  }
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw std::runtime_error("malformed config " + path.string() + ": " + e.what());
  }
  RunConfig c;
  from_json(j, c);
  return c;
}

void save_run_config(const RunConfig& c, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << json(c).dump(2) << "\n";
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace instanseg
