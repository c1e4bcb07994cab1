#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "hamil/maze.hpp"
#include "hamil/operators.hpp"
#include "hamil/spectral.hpp"

namespace hamil {

struct MazeAgentConfig {
  MazeSpec maze;

  // perception (stage 2)
  std::size_t v_hidden = 32;
  std::size_t e_hidden = 8;
  double v_scale = 1.0;   // learned V lies in [-v_scale, v_scale]
  double v_wall = 50.0;   // fixed potential added on wall cells
  double mass = 1.0;
  double alpha_start = 0.9;
  double alpha_end = 0.0;  // also the planning value
  double lambda_w = 1.0;   // weight of the traversability term on W_learned
  std::size_t perception_mazes = 120;
  std::size_t perception_epochs = 12;
  std::size_t perception_batch = 8;
  double perception_lr = 1e-2;

  // actions (stage 1)
  std::size_t action_rank = 100;
  std::size_t action_epochs = 1000;
  double action_lr = 1e-2;

  // alignment and habitual head (stage 3)
  std::size_t crop = 9;
  std::size_t habit_hidden = 128;
  std::size_t habit_layers = 2;  // hidden layers
  std::size_t habit_mazes = 10000;
  std::size_t habit_epochs = 15;
  std::size_t habit_batch = 64;
  double habit_lr = 1e-3;
  double w_action = 1.0;
  double w_energy = 0.1;
  double w_habit = 1.0;

  // planning
  std::size_t depth = 3;
  double revisit_penalty = 2.0;
  double override_fraction = 0.5;
  std::size_t budget_factor = 4;

  std::uint64_t seed = 42;
  std::uint64_t corpus_seed = 1000;  // training mazes use corpus_seed + i

  json to_json() const;
  static MazeAgentConfig from_json(const json& j);
};

/// Per-cell perception inputs: open, goal, signed offsets to the goal,
/// Manhattan distance to the goal, open-neighbour fraction.
inline constexpr std::size_t kCellFeatures = 6;
Tensor cell_features(const MazeWorld& w);
/// Open-open grid edges (i < j); the support of W_learned.
std::vector<std::pair<std::size_t, std::size_t>> open_edges(const MazeWorld& w);
/// Per edge: mean open-neighbour fraction, their difference, their product.
inline constexpr std::size_t kEdgeFeatures = 3;
Tensor edge_features(const MazeWorld& w, std::span<const std::pair<std::size_t, std::size_t>> edges);
/// Grid symmetry that puts the goal offset (gx, gy) into the canonical octant
/// gx >= gy >= 0. The habitual head sees and acts in this frame.
struct HabitFrame {
  bool flip_x = false, flip_y = false, swap = false;
  Action to_world(Action canonical) const;
  Action to_frame(Action world) const;
};
HabitFrame habit_frame(const MazeWorld& w, std::size_t position);
/// Egocentric crop of open flags (off-grid counts as wall) in the canonical
/// frame plus the canonical goal offset; 1 x (crop^2 + 4).
Tensor habit_features(const MazeWorld& w, std::size_t position, std::size_t crop);

/// Open-grid motion table: (cell, action) -> next cell, off-grid moves stay.
std::vector<ModPair> grid_action_table(std::size_t width, std::size_t height);

/// Linear alpha schedule from alpha_start (first epoch) to alpha_end (last).
double alpha_at(const MazeAgentConfig& cfg, std::size_t epoch, std::size_t epochs);

class MazeAgent {
 public:
  explicit MazeAgent(MazeAgentConfig cfg);
  MazeAgent(MazeAgentConfig cfg, ParamSet params, std::vector<std::string> stages);

  const MazeAgentConfig& config() const { return cfg_; }
  MazeAgentConfig& config() { return cfg_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }
  const std::vector<std::string>& stages() const { return stages_; }
  void mark_stage(const std::string& s);
  bool has_stage(const std::string& s) const;
  /// Throws UsageError naming the missing stages when `what` needs stages
  /// the model has not been trained through.
  void require_stages(std::span<const std::string> needed, const std::string& what) const;

  /// Learned potential (no wall term), one value per cell.
  std::vector<double> potential(const MazeWorld& w) const;
  /// S x S learned couplings on open_edges(w); zero elsewhere.
  Tensor w_learned(const MazeWorld& w) const;
  /// alpha W_grid + (1 - alpha) W_learned.
  Tensor coupling(const MazeWorld& w, double alpha) const;
  /// H = K / m + diag(V + v_wall * wall + dv); dv may be empty.
  Tensor hamiltonian(const MazeWorld& w, double alpha, std::span<const double> dv = {}) const;
  /// Ground state at the planning alpha.
  GroundState plan(const MazeWorld& w, std::span<const double> dv = {}) const;

  OperatorBank action_bank() const;
  /// Cell the action model predicts for (cell, action) on the open grid.
  std::size_t predict_move(std::size_t cell, Action a) const;
  /// Habitual head distribution over Up, Down, Left, Right.
  std::array<double, 4> habit_probs(const MazeWorld& w, std::size_t position) const;

  json to_json() const;
  static MazeAgent from_json(const json& j);
  void save(const std::filesystem::path& p) const;
  static MazeAgent load(const std::filesystem::path& p);

 private:
  MazeAgentConfig cfg_;
  ParamSet params_;
  std::vector<std::string> stages_;
};

std::vector<MazeWorld> maze_corpus(std::uint64_t first_seed, std::size_t n, const MazeSpec& spec);

struct Stage1Report {
  std::size_t epochs = 0;
  double final_loss = 0.0;
  double table_accuracy = 0.0;
};
Stage1Report train_stage1_actions(MazeAgent& agent);
/// Fraction of the open-grid (cell, action) table the action model gets right.
double action_table_accuracy(const MazeAgent& agent);

struct Stage2Report {
  std::vector<double> epoch_loss;  // mean goal NLL per epoch
  std::vector<double> alphas;
  std::size_t jitter_events = 0;
};
using Stage2Hook = std::function<void(std::size_t epoch, double alpha, double loss)>;
Stage2Report train_stage2_perception(MazeAgent& agent, const std::vector<MazeWorld>& corpus,
                                     const Stage2Hook& hook = {});
/// Fraction of worlds whose ground-state argmax is the goal (planning alpha).
double goal_hit_rate(const MazeAgent& agent, const std::vector<MazeWorld>& worlds);
/// Share of |psi0|^2 on wall cells.
double wall_mass(const MazeAgent& agent, const MazeWorld& w);

/// One habitual training example: the direction the energy seeker takes from
/// `position` on the fresh ground state, plus the per-action next-position
/// energies (1 - score / best score; 1 for blocked moves). Actions are in the
/// canonical frame.
struct HabitSample {
  Tensor features;
  std::size_t target = 0;
  std::array<double, 4> energy{};
};
std::vector<HabitSample> habit_samples(const MazeAgent& agent, const std::vector<MazeWorld>& worlds);

struct Stage3Report {
  std::vector<double> epoch_loss;
  double agreement = 0.0;  // on the training samples
  double table_accuracy = 0.0;
};
Stage3Report train_stage3_alignment(MazeAgent& agent, const std::vector<MazeWorld>& corpus);
/// Fraction of samples where the habitual argmax matches the seeker's direction.
double habit_agreement(const MazeAgent& agent, const std::vector<HabitSample>& samples);

}  // namespace hamil
