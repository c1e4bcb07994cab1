#include "cli.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <map>
#include <memory>
#include <set>

#include "hamil/error.hpp"

namespace hamil::cli {

namespace {

std::string flag_of(const std::string& key) {
  std::string f = key;
  for (char& c : f)
    if (c == '_') c = '-';
  return f;
}

void collect_leaves(const json& j, const std::string& path, std::vector<std::pair<std::string, std::string>>& out) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string p = path.empty() ? it.key() : path + "." + it.key();
    if (it->is_object()) {
      collect_leaves(*it, p, out);
    } else if (it.key() != "command") {
      out.emplace_back(it.key(), p);
    }
  }
}

json& at_path(json& j, const std::string& path) {
  json* cur = &j;
  std::size_t start = 0;
  for (;;) {
    const auto dot = path.find('.', start);
    cur = &(*cur)[path.substr(start, dot == std::string::npos ? std::string::npos : dot - start)];
    if (dot == std::string::npos) return *cur;
    start = dot + 1;
  }
}

/// Converts a flag or file value to the type of the default.
json coerce(const json& def, const json& v, const std::string& where) {
  auto bad = [&]() -> json {
    throw UsageError(where + ": expected " + std::string(def.type_name()) + ", got " + v.dump());
  };
  if (def.is_string()) return v.is_string() ? v : bad();
  if (def.is_boolean()) {
    if (v.is_boolean()) return v;
    if (v.is_string()) {
      const auto s = v.get<std::string>();
      if (s == "true" || s == "1" || s == "yes") return true;
      if (s == "false" || s == "0" || s == "no") return false;
    }
    return bad();
  }
  json n = v;
  if (v.is_string()) {
    try {
      n = json::parse(v.get<std::string>());
    } catch (const json::exception&) {
      return bad();
    }
  }
  if (!n.is_number()) return bad();
  if (def.is_number_unsigned()) {
    if (n.is_number_unsigned()) return n;
    if (n.is_number_integer() && n.get<long long>() >= 0) return n.get<std::uint64_t>();
    return bad();
  }
  if (def.is_number_integer()) return n.is_number_integer() ? n : bad();
  return n.get<double>();
}

void merge_checked(json& base, const json& over, const std::string& path) {
  if (!over.is_object()) throw UsageError("config " + (path.empty() ? std::string("file") : path) + " must be an object");
  for (auto it = over.begin(); it != over.end(); ++it) {
    const std::string p = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw UsageError("unknown config key '" + p + "'");
    json& slot = base[it.key()];
    if (slot.is_object()) {
      merge_checked(slot, *it, p);
    } else {
      slot = coerce(slot, *it, "config key '" + p + "'");
    }
  }
}

std::string utc_stamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", &tm);
  return buf;
}

}  // namespace

void add_command(CLI::App& parent, Command cmd) {
  CLI::App* app = parent.add_subcommand(cmd.name, cmd.help);
  struct Bound {
    std::string path;
    CLI::Option* opt;
    std::shared_ptr<std::string> value;
  };
  auto bound = std::make_shared<std::vector<Bound>>();
  auto config_file = std::make_shared<std::string>();
  app->add_option("--config", *config_file, "JSON run config; flags override it")->check(CLI::ExistingFile);

  std::vector<std::pair<std::string, std::string>> leaves;
  collect_leaves(cmd.defaults, "", leaves);
  std::set<std::string> seen;
  for (const auto& [key, path] : leaves) {
    if (!seen.insert(key).second) throw std::logic_error("duplicate knob " + key + " in " + cmd.name);
    const json& def = at_path(cmd.defaults, path);
    auto value = std::make_shared<std::string>();
    std::string names = "--" + flag_of(key);
    if (flag_of(key) != key) names += ",--" + key;
    const std::string shown = def.is_string() ? def.get<std::string>() : def.dump();
    CLI::Option* opt = app->add_option(names, *value, "default: " + (shown.empty() ? std::string("none") : shown));
    opt->type_name(def.is_string() ? "TEXT" : def.is_boolean() ? "BOOL" : def.is_number_float() ? "FLOAT" : "INT");
    bound->push_back(Bound{path, opt, value});
  }

  const std::string full = parent.get_name() + " " + cmd.name;
  app->callback([cmd, bound, config_file, full]() {
    json cfg = cmd.defaults;
    if (!config_file->empty()) {
      std::ifstream in(*config_file);
      json file;
      try {
        file = json::parse(in);
      } catch (const json::exception& e) {
        throw UsageError("config " + *config_file + " is not JSON: " + e.what());
      }
      file.erase("command");
      merge_checked(cfg, file, "");
    }
    for (const auto& b : *bound) {
      if (b.opt->count() == 0) continue;
      json& slot = at_path(cfg, b.path);
      slot = coerce(slot, json(*b.value), "--" + flag_of(b.path.substr(b.path.rfind('.') + 1)));
    }
    cfg["command"] = full;
    const int rc = cmd.run(cfg);
    if (rc != 0) throw ExitStatus{rc};
  });
}

std::string config_hash(const json& cfg) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : cfg.dump()) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return hex64(h);
}

RunDir::RunDir(const json& cfg) : cfg_(cfg), hash_(config_hash(cfg)) {
  const std::filesystem::path root = cfg.value("out", std::string("runs"));
  const std::string base = utc_stamp() + "-" + hash_.substr(0, 8);
  dir_ = root / base;
  for (int k = 2; std::filesystem::exists(dir_); ++k) dir_ = root / (base + "-" + std::to_string(k));
  std::filesystem::create_directories(dir_);
  write_json_file(dir_ / "config.json", cfg_);
}

void RunDir::csv(const std::string& name, const std::string& body) const {
  std::ofstream out(file(name));
  out << body;
  if (!body.empty() && body.back() != '\n') out << '\n';
  out << "# config-hash: " << hash_ << '\n';
  if (!out) throw Error("cannot write " + file(name).string());
}

void RunDir::json_file(const std::string& name, json j) const {
  j["run_config"] = cfg_;
  write_json_file(file(name), j);
}

std::filesystem::path input_path(const json& cfg, const std::string& key, const std::string& what) {
  const std::string p = cfg.value(key, std::string());
  if (p.empty()) throw UsageError(what + " is required (--" + flag_of(key) + ")");
  if (!std::filesystem::exists(p)) throw UsageError(what + " '" + p + "' does not exist");
  return p;
}

std::filesystem::path optional_path(const json& cfg, const std::string& key) {
  return cfg.value(key, std::string());
}

void print_header(const json& cfg, const RunDir* run) {
  std::printf("command: %s\n", cfg.at("command").get<std::string>().c_str());
  std::printf("seed: %llu\n", static_cast<unsigned long long>(cfg.value("seed", std::uint64_t{42})));
  std::printf("config-hash: %s\n", config_hash(cfg).c_str());
  if (run) std::printf("run-dir: %s\n", run->path().string().c_str());
  std::fflush(stdout);
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace hamil::cli
