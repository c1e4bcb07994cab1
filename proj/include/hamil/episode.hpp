#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "hamil/maze_agent.hpp"

namespace hamil {

enum class AgentMode { Energy, Habitual, Dual, Random, Oracle };
const char* mode_name(AgentMode m);
AgentMode parse_mode(const std::string& s);

struct EpisodeOptions {
  AgentMode mode = AgentMode::Energy;
  std::size_t depth = 3;
  double revisit_penalty = 2.0;
  double override_fraction = 0.5;
  std::size_t budget = 0;   // 0: budget_factor * cells
  std::uint64_t seed = 0;   // random-walk source
  /// Solve for psi0 on every step even when the mode does not need it.
  bool always_plan = true;

  static EpisodeOptions from_agent(const MazeAgent& agent, AgentMode mode);
  json to_json() const;
  static EpisodeOptions from_json(const json& j);
};

struct StepRecord {
  std::size_t step = 0;
  std::size_t from = 0;
  std::size_t to = 0;
  Action action = Action::Up;
  std::string decision;  // energy, habitual, override, random, oracle, stuck
  bool planned = false;
  double energy = 0.0;   // E0 when planned
  std::size_t argmax = 0;
  std::string psi_hash;  // FNV-1a of the psi0 bytes

  json to_json() const;
};

/// A running episode. The agent is read-only: nothing here changes its
/// parameters. Edits and steps are appended to an event log that replay()
/// can re-execute.
class Episode {
 public:
  Episode(const MazeAgent& agent, MazeWorld world, EpisodeOptions opts, PerturbScript script = {});

  const MazeWorld& world() const { return world_; }
  const EpisodeOptions& options() const { return opts_; }
  std::size_t position() const { return position_; }
  std::size_t steps() const { return step_; }
  std::size_t budget() const { return budget_; }
  bool done() const { return done_; }
  bool success() const { return success_; }
  const std::vector<StepRecord>& records() const { return records_; }
  const std::vector<std::size_t>& path() const { return path_; }

  /// Advances one move. Throws UsageError when done.
  const StepRecord& step();
  /// Runs until done; returns success.
  bool run();

  void set_wall(std::size_t cell, bool wall);
  void shift_potential(std::size_t cell, double dv);
  void set_goal(std::size_t cell);
  void set_mode(AgentMode mode);

  /// Current total potential offset (script, edits, revisits).
  std::vector<double> offset() const;
  /// Ground state for the current world and offsets.
  GroundState ground_state_now() const;

  /// Event log: header, edits, steps and (when done) the end record.
  const std::vector<json>& log() const { return log_; }
  std::string log_ndjson() const;

 private:
  void apply_script();
  void require_cell(std::size_t cell, const char* what) const;
  void finish_if_done();

  const MazeAgent& agent_;
  std::vector<std::array<std::size_t, 4>> predicted_;  // action model outcomes
  MazeWorld world_;
  EpisodeOptions opts_;
  PerturbScript script_;
  std::size_t script_next_ = 0;
  std::vector<double> dv_script_, dv_edit_, dv_revisit_;
  std::size_t position_ = 0;
  std::size_t step_ = 0;
  std::size_t budget_ = 0;
  bool done_ = false;
  bool success_ = false;
  Rng rng_;
  std::vector<StepRecord> records_;
  std::vector<std::size_t> path_;
  std::vector<json> log_;
};

struct EpisodeResult {
  bool success = false;
  std::size_t steps = 0;
  std::size_t optimal = 0;  // BFS distance start -> goal
  std::vector<std::size_t> path;
};
EpisodeResult run_episode(const MazeAgent& agent, const MazeWorld& world, const EpisodeOptions& opts,
                          const PerturbScript& script = {});

struct ReplayReport {
  bool identical = false;
  std::size_t steps = 0;
  std::optional<std::size_t> first_mismatch;  // log line index
  std::string detail;
};
/// Re-executes a logged episode and compares every record bit for bit.
ReplayReport replay(const MazeAgent& agent, const std::vector<json>& log);
std::vector<json> parse_ndjson(const std::string& text);

struct ModeSummary {
  AgentMode mode = AgentMode::Energy;
  std::size_t episodes = 0;
  std::size_t successes = 0;
  double mean_steps = 0.0;  // over successful episodes
  double rate() const { return episodes ? static_cast<double>(successes) / static_cast<double>(episodes) : 0.0; }
};

struct EvalOptions {
  std::uint64_t first_seed = 900000;  // disjoint from the training corpus
  std::size_t episodes = 100;
  bool perturb = true;
  std::vector<AgentMode> modes = {AgentMode::Energy, AgentMode::Habitual, AgentMode::Dual};
  /// When set, every episode's event log is written here as <seed>-<mode>.ndjson.
  std::filesystem::path log_dir;
};

struct EvalReport {
  std::vector<ModeSummary> modes;
  std::string checksum_before, checksum_after;
  /// One row per (seed, mode).
  std::string csv;
  const ModeSummary& at(AgentMode m) const;
};
EvalReport evaluate(const MazeAgent& agent, const EvalOptions& opts);

}  // namespace hamil
