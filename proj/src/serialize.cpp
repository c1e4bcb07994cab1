#include "hamil/serialize.hpp"

#include <cstdio>
#include <fstream>

#include "hamil/error.hpp"

namespace hamil {

json tensor_to_json(const Tensor& t) {
  return json{{"shape", {t.rows(), t.cols()}}, {"data", t.values()}};
}

Tensor tensor_from_json(const json& j) {
  const auto shape = j.at("shape").get<std::vector<std::size_t>>();
  if (shape.size() != 2) throw Error("tensor shape must have two entries");
  return Tensor(shape[0], shape[1], j.at("data").get<std::vector<double>>());
}

json params_to_json(const ParamSet& ps) {
  json j = json::object();
  for (const auto& [name, t] : ps) j[name] = tensor_to_json(t);
  return j;
}

ParamSet params_from_json(const json& j) {
  ParamSet ps;
  for (const auto& [name, t] : j.items()) ps.add(name, tensor_from_json(t));
  return ps;
}

json make_container(const std::string& kind, const json& config, const ParamSet& ps) {
  return json{{"format", "hamil-model"},
              {"version", kFormatVersion},
              {"kind", kind},
              {"config", config},
              {"checksum", hex64(ps.checksum())},
              {"params", params_to_json(ps)}};
}

json check_container(const json& j, const std::string& kind) {
  if (!j.is_object() || j.value("format", "") != "hamil-model") {
    throw Error("not a model file (missing format tag)");
  }
  if (j.value("version", 0) != kFormatVersion) {
    throw Error("unsupported model format version " + std::to_string(j.value("version", 0)));
  }
  if (j.value("kind", "") != kind) {
    throw Error("expected a '" + kind + "' model, found '" + j.value("kind", "") + "'");
  }
  return j;
}

void write_json_file(const std::filesystem::path& path, const json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(1) << '\n';
}

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error("malformed JSON in " + path.string() + ": " + e.what());
  }
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace hamil
