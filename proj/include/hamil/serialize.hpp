#pragma once

#include <filesystem>
#include <string>

#include "hamil/optim.hpp"
#include "json.hpp"

namespace hamil {

using json = nlohmann::json;

inline constexpr int kFormatVersion = 1;

json tensor_to_json(const Tensor& t);
Tensor tensor_from_json(const json& j);

json params_to_json(const ParamSet& ps);
ParamSet params_from_json(const json& j);

/// Model container: {"format", "version", "kind", "config", "params", ...extra}.
json make_container(const std::string& kind, const json& config, const ParamSet& ps);
/// Validates format/version/kind and returns the container.
json check_container(const json& j, const std::string& kind);

void write_json_file(const std::filesystem::path& path, const json& j);
json read_json_file(const std::filesystem::path& path);

/// Hex form of a 64-bit checksum.
std::string hex64(std::uint64_t v);

}  // namespace hamil
