#include "hamil/maze.hpp"

#include <algorithm>
#include <deque>
#include <sstream>

#include "hamil/error.hpp"
#include "hamil/rng.hpp"

namespace hamil {

const char* action_name(Action a) {
  switch (a) {
    case Action::Up: return "up";
    case Action::Down: return "down";
    case Action::Left: return "left";
    case Action::Right: return "right";
  }
  return "?";
}

Action parse_action(const std::string& s) {
  for (Action a : kActions)
    if (s == action_name(a)) return a;
  throw UsageError("unknown action '" + s + "'");
}

MazeWorld::MazeWorld(std::size_t width, std::size_t height)
    : width_(width), height_(height), walls_(width * height, 0) {
  if (width == 0 || height == 0) throw UsageError("maze dimensions must be positive");
}

void MazeWorld::set_wall(std::size_t c, bool wall) { walls_.at(c) = wall ? 1 : 0; }

std::size_t MazeWorld::step_on_grid(std::size_t c, Action a) const {
  const std::size_t x = x_of(c), y = y_of(c);
  switch (a) {
    case Action::Up: return y > 0 ? c - width_ : c;
    case Action::Down: return y + 1 < height_ ? c + width_ : c;
    case Action::Left: return x > 0 ? c - 1 : c;
    case Action::Right: return x + 1 < width_ ? c + 1 : c;
  }
  return c;
}

std::size_t MazeWorld::move(std::size_t c, Action a) const {
  const std::size_t n = step_on_grid(c, a);
  return is_wall(n) ? c : n;
}

std::vector<std::size_t> MazeWorld::open_neighbors(std::size_t c) const {
  std::vector<std::size_t> out;
  for (Action a : kActions) {
    const std::size_t n = step_on_grid(c, a);
    if (n != c && is_open(n)) out.push_back(n);
  }
  return out;
}

std::optional<Action> MazeWorld::direction(std::size_t c, std::size_t n) const {
  for (Action a : kActions) {
    const std::size_t m = step_on_grid(c, a);
    if (m != c && m == n) return a;
  }
  return std::nullopt;
}

Tensor MazeWorld::w_grid() const {
  Tensor w(cells(), cells());
  for (const auto& [i, j] : grid_edges())
    if (is_open(i) && is_open(j)) w(i, j) = w(j, i) = 1.0;
  return w;
}

std::vector<std::pair<std::size_t, std::size_t>> MazeWorld::grid_edges() const {
  std::vector<std::pair<std::size_t, std::size_t>> e;
  for (std::size_t c = 0; c < cells(); ++c) {
    if (x_of(c) + 1 < width_) e.emplace_back(c, c + 1);
    if (y_of(c) + 1 < height_) e.emplace_back(c, c + width_);
  }
  return e;
}

std::vector<int> MazeWorld::bfs(std::size_t from, std::optional<std::size_t> blocked) const {
  std::vector<int> d(cells(), -1);
  if (is_wall(from) || (blocked && *blocked == from)) return d;
  std::deque<std::size_t> q{from};
  d[from] = 0;
  while (!q.empty()) {
    const std::size_t c = q.front();
    q.pop_front();
    for (std::size_t n : open_neighbors(c)) {
      if (d[n] >= 0 || (blocked && *blocked == n)) continue;
      d[n] = d[c] + 1;
      q.push_back(n);
    }
  }
  return d;
}

std::vector<std::size_t> MazeWorld::shortest_path(std::size_t from, std::size_t to) const {
  const auto d = bfs(to);
  if (d.at(from) < 0) return {};
  std::vector<std::size_t> path{from};
  std::size_t c = from;
  while (c != to) {
    for (std::size_t n : open_neighbors(c)) {
      if (d[n] == d[c] - 1) {
        c = n;
        break;
      }
    }
    path.push_back(c);
  }
  return path;
}

bool MazeWorld::solvable() const { return is_open(start) && is_open(goal) && bfs(start)[goal] >= 0; }

std::string MazeWorld::to_text() const {
  std::string s;
  for (std::size_t y = 0; y < height_; ++y) {
    for (std::size_t x = 0; x < width_; ++x) {
      const std::size_t c = cell(x, y);
      s += c == start ? 'S' : c == goal ? 'G' : is_wall(c) ? '#' : '.';
    }
    s += '\n';
  }
  return s;
}

MazeWorld MazeWorld::from_text(const std::string& text) {
  std::vector<std::string> rows;
  std::istringstream is(text);
  for (std::string line; std::getline(is, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) rows.push_back(line);
  }
  if (rows.empty()) throw UsageError("maze text is empty");
  MazeWorld w(rows[0].size(), rows.size());
  bool has_start = false, has_goal = false;
  for (std::size_t y = 0; y < rows.size(); ++y) {
    if (rows[y].size() != w.width_) throw UsageError("maze rows have different lengths");
    for (std::size_t x = 0; x < w.width_; ++x) {
      const std::size_t c = w.cell(x, y);
      switch (rows[y][x]) {
        case '#': w.walls_[c] = 1; break;
        case '.': break;
        case 'S':
          if (has_start) throw UsageError("maze has more than one start");
          w.start = c;
          has_start = true;
          break;
        case 'G':
          if (has_goal) throw UsageError("maze has more than one goal");
          w.goal = c;
          has_goal = true;
          break;
        default: throw UsageError(std::string("unexpected maze character '") + rows[y][x] + "'");
      }
    }
  }
  if (!has_start || !has_goal) throw UsageError("maze needs one S and one G");
  return w;
}

namespace {

void carve(MazeWorld& w, Rng& rng) {
  for (std::size_t c = 0; c < w.cells(); ++c) w.set_wall(c, true);
  std::vector<std::uint8_t> seen(w.cells(), 0);
  std::vector<std::size_t> stack{0};
  w.set_wall(0, false);
  seen[0] = 1;
  while (!stack.empty()) {
    const std::size_t c = stack.back();
    const auto x = static_cast<long>(w.x_of(c)), y = static_cast<long>(w.y_of(c));
    std::vector<std::pair<long, long>> next;
    for (auto [dx, dy] : {std::pair{0L, -2L}, {0L, 2L}, {-2L, 0L}, {2L, 0L}}) {
      const long nx = x + dx, ny = y + dy;
      if (nx < 0 || ny < 0 || nx >= static_cast<long>(w.width()) || ny >= static_cast<long>(w.height())) continue;
      if (!seen[w.cell(nx, ny)]) next.emplace_back(nx, ny);
    }
    if (next.empty()) {
      stack.pop_back();
      continue;
    }
    const auto [nx, ny] = next[rng.index(next.size())];
    w.set_wall(w.cell((x + nx) / 2, (y + ny) / 2), false);
    const std::size_t n = w.cell(nx, ny);
    w.set_wall(n, false);
    seen[n] = 1;
    stack.push_back(n);
  }
}

}  // namespace

MazeWorld generate_maze(std::uint64_t seed, const MazeSpec& spec) {
  if (spec.width < 4 || spec.height < 4) throw UsageError("maze size must be at least 4");
  if (spec.density < 0 || spec.density > 1) throw UsageError("wall density must lie in [0, 1]");
  Rng rng(seed);
  MazeWorld best;
  int best_dist = -1;
  for (int attempt = 0; attempt < 100; ++attempt) {
    MazeWorld w(spec.width, spec.height);
    carve(w, rng);
    for (std::size_t c = 0; c < w.cells(); ++c)
      if (w.is_wall(c) && rng.uniform() >= spec.density) w.set_wall(c, false);
    std::vector<std::size_t> open;
    for (std::size_t c = 0; c < w.cells(); ++c)
      if (w.is_open(c)) open.push_back(c);
    w.start = open[rng.index(open.size())];
    const auto d = w.bfs(w.start);
    std::vector<std::size_t> far;
    int reach = 0;
    for (std::size_t c = 0; c < w.cells(); ++c) {
      if (d[c] >= static_cast<int>(spec.min_goal_distance)) far.push_back(c);
      reach = std::max(reach, d[c]);
    }
    if (!far.empty()) {
      w.goal = far[rng.index(far.size())];
      return w;
    }
    if (reach > best_dist) {
      best_dist = reach;
      best = w;
      best.goal = static_cast<std::size_t>(std::max_element(d.begin(), d.end()) - d.begin());
    }
  }
  if (best_dist <= 0) throw NumericError("maze generator could not place a goal");
  return best;
}

MazeWorld two_corridor_maze() {
  return MazeWorld::from_text(
      "##########\n"
      "#........#\n"
      "#S######.#\n"
      "#.######.#\n"
      "#.######G#\n"
      "#.######.#\n"
      "#.######.#\n"
      "#.######.#\n"
      "#........#\n"
      "##########\n");
}

std::vector<std::size_t> two_corridor_upper() { return {11, 12, 13, 14, 15, 16, 17, 18}; }
std::vector<std::size_t> two_corridor_lower() { return {81, 82, 83, 84, 85, 86, 87, 88}; }

json script_to_json(const PerturbScript& s) {
  json events = json::array();
  for (const auto& e : s) events.push_back({{"step", e.step}, {"cell", e.cell}, {"dv", e.dv}});
  return json{{"events", events}};
}

PerturbScript script_from_json(const json& j, const MazeWorld& world) {
  PerturbScript s;
  const json& events = j.is_array() ? j : j.at("events");
  for (const auto& e : events) {
    PerturbEvent ev;
    ev.step = e.at("step").get<std::size_t>();
    const json& c = e.at("cell");
    if (c.is_array()) {
      const auto x = c.at(0).get<std::size_t>(), y = c.at(1).get<std::size_t>();
      if (x >= world.width() || y >= world.height()) throw UsageError("perturbation cell outside the maze");
      ev.cell = world.cell(x, y);
    } else {
      ev.cell = c.get<std::size_t>();
    }
    if (ev.cell >= world.cells()) throw UsageError("perturbation cell outside the maze");
    ev.dv = e.at("dv").get<double>();
    s.push_back(ev);
  }
  std::stable_sort(s.begin(), s.end(), [](const PerturbEvent& a, const PerturbEvent& b) { return a.step < b.step; });
  return s;
}

PerturbScript path_bump_script(const MazeWorld& world, std::span<const std::size_t> steps, double dv) {
  static const std::size_t kDefaultSteps[] = {2, 6, 10};
  if (steps.empty()) steps = kDefaultSteps;
  const auto path = world.shortest_path(world.start, world.goal);
  PerturbScript s;
  if (path.empty()) return s;
  const std::size_t last = path.size() - 1;
  for (std::size_t t : steps) {
    const std::size_t at = std::min(t, last);
    const std::size_t remaining = last - at;
    if (remaining <= 2) continue;
    s.push_back({t, path[at + remaining / 2], dv});
  }
  return s;
}

std::vector<std::size_t> reachable_set(const MazeWorld& world, std::size_t n, std::size_t depth,
                                       std::optional<std::size_t> exclude) {
  if (world.is_wall(n)) return {};
  std::vector<int> d(world.cells(), -1);
  std::vector<std::size_t> out{n};
  std::deque<std::size_t> q{n};
  d[n] = 0;
  while (!q.empty()) {
    const std::size_t c = q.front();
    q.pop_front();
    if (static_cast<std::size_t>(d[c]) == depth) continue;
    for (std::size_t k : world.open_neighbors(c)) {
      if (d[k] >= 0 || (exclude && *exclude == k)) continue;
      d[k] = d[c] + 1;
      out.push_back(k);
      q.push_back(k);
    }
  }
  return out;
}

double neighbor_score(const MazeWorld& world, std::span<const double> born, std::size_t n, std::size_t depth,
                      std::optional<std::size_t> exclude) {
  if (born.size() != world.cells()) throw ShapeError("Born vector does not match the maze");
  double s = 0.0;
  for (std::size_t c : reachable_set(world, n, depth, exclude)) s += born[c];
  return s;
}

std::optional<NeighborChoice> choose_neighbor(const MazeWorld& world, std::span<const double> born,
                                              std::size_t position, std::size_t depth) {
  if (born.size() != world.cells()) throw ShapeError("Born vector does not match the maze");
  NeighborChoice ch;
  ch.candidates = world.open_neighbors(position);
  if (ch.candidates.empty()) return std::nullopt;
  for (std::size_t n : ch.candidates) ch.scores.push_back(neighbor_score(world, born, n, depth, position));
  const std::size_t target = static_cast<std::size_t>(std::max_element(born.begin(), born.end()) - born.begin());
  if (std::find(ch.candidates.begin(), ch.candidates.end(), target) != ch.candidates.end()) {
    ch.cell = target;
    ch.target_adjacent = true;
    return ch;
  }
  const double best = *std::max_element(ch.scores.begin(), ch.scores.end());
  bool have = false;
  for (std::size_t i = 0; i < ch.candidates.size(); ++i) {
    if (ch.scores[i] < best * (1.0 - 1e-9)) continue;
    const std::size_t n = ch.candidates[i];
    if (!have || born[n] > born[ch.cell] || (born[n] == born[ch.cell] && n < ch.cell)) ch.cell = n;
    have = true;
  }
  return ch;
}

}  // namespace hamil
