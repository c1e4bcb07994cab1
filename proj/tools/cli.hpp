#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "hamil/serialize.hpp"

namespace hamil::cli {

/// Non-zero status from a command that ran to completion (e.g. a replay
/// mismatch).
struct ExitStatus {
  int code;
};

/// Resolved run configuration: defaults, then the --config file, then flags.
/// Every scalar leaf of the defaults object is a flag (--leaf-name).
struct Command {
  std::string name;
  std::string help;
  json defaults;
  std::function<int(const json& cfg)> run;
};

void add_command(CLI::App& parent, Command cmd);

/// FNV-1a of the canonical dump, as 16 hex digits.
std::string config_hash(const json& cfg);

/// Artifact directory <out>/<UTC timestamp>-<hash prefix>; config.json is
/// written on open.
class RunDir {
 public:
  explicit RunDir(const json& cfg);
  const std::filesystem::path& path() const { return dir_; }
  const std::string& hash() const { return hash_; }
  std::filesystem::path file(const std::string& name) const { return dir_ / name; }
  /// `body` starts with its header line; a config-hash footer is appended.
  void csv(const std::string& name, const std::string& body) const;
  /// Writes `j` with the run config embedded under "run_config".
  void json_file(const std::string& name, json j) const;

 private:
  json cfg_;
  std::string hash_;
  std::filesystem::path dir_;
};

/// Existing file or directory from a config string; usage error otherwise.
std::filesystem::path input_path(const json& cfg, const std::string& key, const std::string& what);
/// `key` as a path if non-empty.
std::filesystem::path optional_path(const json& cfg, const std::string& key);

void print_header(const json& cfg, const RunDir* run);
std::string fixed(double v, int digits = 4);

}  // namespace hamil::cli
