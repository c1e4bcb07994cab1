#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hamil/serialize.hpp"
#include "hamil/tensor.hpp"

namespace hamil {

enum class Action : std::uint8_t { Up = 0, Down = 1, Left = 2, Right = 3 };
inline constexpr std::array<Action, 4> kActions = {Action::Up, Action::Down, Action::Left, Action::Right};
const char* action_name(Action a);
Action parse_action(const std::string& s);

/// Grid world. Cells are indexed row-major: cell = y * width + x.
class MazeWorld {
 public:
  MazeWorld() = default;
  MazeWorld(std::size_t width, std::size_t height);

  std::size_t width() const { return width_; }
  std::size_t height() const { return height_; }
  std::size_t cells() const { return width_ * height_; }
  std::size_t cell(std::size_t x, std::size_t y) const { return y * width_ + x; }
  std::size_t x_of(std::size_t c) const { return c % width_; }
  std::size_t y_of(std::size_t c) const { return c / width_; }

  bool is_wall(std::size_t c) const { return walls_.at(c) != 0; }
  bool is_open(std::size_t c) const { return !is_wall(c); }
  void set_wall(std::size_t c, bool wall);
  const std::vector<std::uint8_t>& walls() const { return walls_; }

  std::size_t start = 0;
  std::size_t goal = 0;

  /// Cell reached by `a` from `c` ignoring walls; off-grid moves stay put.
  std::size_t step_on_grid(std::size_t c, Action a) const;
  /// Cell reached by `a` from `c`; moves into walls or off the grid stay put.
  std::size_t move(std::size_t c, Action a) const;
  /// Open 4-neighbours in Up, Down, Left, Right order.
  std::vector<std::size_t> open_neighbors(std::size_t c) const;
  /// Direction from `c` to the adjacent cell `n`, if adjacent.
  std::optional<Action> direction(std::size_t c, std::size_t n) const;

  /// Grid adjacency: 1 between adjacent open cells, 0 elsewhere.
  Tensor w_grid() const;
  /// Unordered grid-adjacent pairs (i < j), walls included.
  std::vector<std::pair<std::size_t, std::size_t>> grid_edges() const;

  /// Hop distances from `from` over open cells (-1 if unreachable). An
  /// optional `blocked` cell is treated as a wall.
  std::vector<int> bfs(std::size_t from, std::optional<std::size_t> blocked = std::nullopt) const;
  /// One shortest open path from `from` to `to`, both ends included; empty if none.
  std::vector<std::size_t> shortest_path(std::size_t from, std::size_t to) const;
  bool solvable() const;

  /// Text grid: '#' wall, '.' open, 'S' start, 'G' goal.
  std::string to_text() const;
  static MazeWorld from_text(const std::string& text);

  friend bool operator==(const MazeWorld& a, const MazeWorld& b) {
    return a.width_ == b.width_ && a.height_ == b.height_ && a.walls_ == b.walls_ && a.start == b.start &&
           a.goal == b.goal;
  }

 private:
  std::size_t width_ = 0, height_ = 0;
  std::vector<std::uint8_t> walls_;
};

struct MazeSpec {
  std::size_t width = 10;
  std::size_t height = 10;
  /// Probability that a wall left by the backtracker survives (0 = open grid).
  double density = 0.85;
  /// Preferred minimum BFS distance from start to goal.
  std::size_t min_goal_distance = 8;
};

/// Recursive backtracker on even coordinates, random wall removal, then a
/// start and a goal drawn from the start's reachable set. Deterministic in
/// `seed`.
MazeWorld generate_maze(std::uint64_t seed, const MazeSpec& spec = {});

/// 10 x 10 fixture: two corridors join S and G; the upper route is 11 steps,
/// the lower 17.
MazeWorld two_corridor_maze();
/// Cells of the upper and lower corridors of two_corridor_maze().
std::vector<std::size_t> two_corridor_upper();
std::vector<std::size_t> two_corridor_lower();

/// A scheduled potential change.
struct PerturbEvent {
  std::size_t step = 0;
  std::size_t cell = 0;
  double dv = 0.0;
};
using PerturbScript = std::vector<PerturbEvent>;

json script_to_json(const PerturbScript& s);
PerturbScript script_from_json(const json& j, const MazeWorld& world);

/// Bumps of `dv` at the given steps on cells along the start-goal shortest
/// path, each placed halfway between where an optimal walker would be and
/// the goal. Fixed before the episode so every mode sees the same script.
PerturbScript path_bump_script(const MazeWorld& world, std::span<const std::size_t> steps = {}, double dv = 3.0);

/// Reachable set R(n): cells within `depth` hops of n over open cells, with
/// `exclude` (the agent's own cell) removed from the graph.
std::vector<std::size_t> reachable_set(const MazeWorld& world, std::size_t n, std::size_t depth,
                                       std::optional<std::size_t> exclude = std::nullopt);

/// score(n) = sum over R(n) of |psi0(s)|^2.
double neighbor_score(const MazeWorld& world, std::span<const double> born, std::size_t n, std::size_t depth,
                      std::optional<std::size_t> exclude = std::nullopt);

struct NeighborChoice {
  std::size_t cell = 0;
  std::vector<std::size_t> candidates;
  std::vector<double> scores;
  bool target_adjacent = false;  // the global argmax cell was a legal neighbour
};

/// Best open neighbour of `position`. Takes the global argmax of |psi0|^2
/// directly when it is adjacent; otherwise the highest score, ties (relative
/// 1e-9) going to larger |psi0(n)|^2 and then the lower index. Returns
/// nullopt when boxed in.
std::optional<NeighborChoice> choose_neighbor(const MazeWorld& world, std::span<const double> born,
                                              std::size_t position, std::size_t depth);

}  // namespace hamil
