#include "hamil/maze_agent.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "hamil/classifier.hpp"
#include "hamil/error.hpp"

namespace hamil {

json MazeAgentConfig::to_json() const {
  return json{{"width", maze.width},
              {"height", maze.height},
              {"density", maze.density},
              {"min_goal_distance", maze.min_goal_distance},
              {"v_hidden", v_hidden},
              {"e_hidden", e_hidden},
              {"v_scale", v_scale},
              {"v_wall", v_wall},
              {"mass", mass},
              {"alpha_start", alpha_start},
              {"alpha_end", alpha_end},
              {"lambda_w", lambda_w},
              {"perception_mazes", perception_mazes},
              {"perception_epochs", perception_epochs},
              {"perception_batch", perception_batch},
              {"perception_lr", perception_lr},
              {"action_rank", action_rank},
              {"action_epochs", action_epochs},
              {"action_lr", action_lr},
              {"crop", crop},
              {"habit_hidden", habit_hidden},
              {"habit_layers", habit_layers},
              {"habit_mazes", habit_mazes},
              {"habit_epochs", habit_epochs},
              {"habit_batch", habit_batch},
              {"habit_lr", habit_lr},
              {"w_action", w_action},
              {"w_energy", w_energy},
              {"w_habit", w_habit},
              {"depth", depth},
              {"revisit_penalty", revisit_penalty},
              {"override_fraction", override_fraction},
              {"budget_factor", budget_factor},
              {"seed", seed},
              {"corpus_seed", corpus_seed}};
}

MazeAgentConfig MazeAgentConfig::from_json(const json& j) {
  MazeAgentConfig c;
  c.maze.width = j.value("width", c.maze.width);
  c.maze.height = j.value("height", c.maze.height);
  c.maze.density = j.value("density", c.maze.density);
  c.maze.min_goal_distance = j.value("min_goal_distance", c.maze.min_goal_distance);
  c.v_hidden = j.value("v_hidden", c.v_hidden);
  c.e_hidden = j.value("e_hidden", c.e_hidden);
  c.v_scale = j.value("v_scale", c.v_scale);
  c.v_wall = j.value("v_wall", c.v_wall);
  c.mass = j.value("mass", c.mass);
  c.alpha_start = j.value("alpha_start", c.alpha_start);
  c.alpha_end = j.value("alpha_end", c.alpha_end);
  c.lambda_w = j.value("lambda_w", c.lambda_w);
  c.perception_mazes = j.value("perception_mazes", c.perception_mazes);
  c.perception_epochs = j.value("perception_epochs", c.perception_epochs);
  c.perception_batch = j.value("perception_batch", c.perception_batch);
  c.perception_lr = j.value("perception_lr", c.perception_lr);
  c.action_rank = j.value("action_rank", c.action_rank);
  c.action_epochs = j.value("action_epochs", c.action_epochs);
  c.action_lr = j.value("action_lr", c.action_lr);
  c.crop = j.value("crop", c.crop);
  c.habit_hidden = j.value("habit_hidden", c.habit_hidden);
  c.habit_layers = j.value("habit_layers", c.habit_layers);
  c.habit_mazes = j.value("habit_mazes", c.habit_mazes);
  c.habit_epochs = j.value("habit_epochs", c.habit_epochs);
  c.habit_batch = j.value("habit_batch", c.habit_batch);
  c.habit_lr = j.value("habit_lr", c.habit_lr);
  c.w_action = j.value("w_action", c.w_action);
  c.w_energy = j.value("w_energy", c.w_energy);
  c.w_habit = j.value("w_habit", c.w_habit);
  c.depth = j.value("depth", c.depth);
  c.revisit_penalty = j.value("revisit_penalty", c.revisit_penalty);
  c.override_fraction = j.value("override_fraction", c.override_fraction);
  c.budget_factor = j.value("budget_factor", c.budget_factor);
  c.seed = j.value("seed", c.seed);
  c.corpus_seed = j.value("corpus_seed", c.corpus_seed);
  if (c.maze.width < 2 || c.maze.height < 2) throw UsageError("maze must be at least 2 x 2");
  if (!(c.mass > 0)) throw UsageError("mass must be positive");
  if (c.crop % 2 == 0) throw UsageError("crop size must be odd");
  return c;
}

// ---- features -----------------------------------------------------------------

namespace {

double open_fraction(const MazeWorld& w, std::size_t c) {
  return static_cast<double>(w.open_neighbors(c).size()) / 4.0;
}

}  // namespace

Tensor cell_features(const MazeWorld& w) {
  const std::size_t s = w.cells();
  const double gx = static_cast<double>(w.x_of(w.goal)), gy = static_cast<double>(w.y_of(w.goal));
  const double wd = static_cast<double>(w.width()), ht = static_cast<double>(w.height());
  Tensor f(s, kCellFeatures);
  for (std::size_t c = 0; c < s; ++c) {
    const double dx = static_cast<double>(w.x_of(c)) - gx, dy = static_cast<double>(w.y_of(c)) - gy;
    f(c, 0) = w.is_open(c) ? 1.0 : 0.0;
    f(c, 1) = c == w.goal ? 1.0 : 0.0;
    f(c, 2) = dx / wd;
    f(c, 3) = dy / ht;
    f(c, 4) = (std::abs(dx) + std::abs(dy)) / (wd + ht);
    f(c, 5) = w.is_open(c) ? open_fraction(w, c) : 0.0;
  }
  return f;
}

std::vector<std::pair<std::size_t, std::size_t>> open_edges(const MazeWorld& w) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (const auto& e : w.grid_edges())
    if (w.is_open(e.first) && w.is_open(e.second)) out.push_back(e);
  return out;
}

Tensor edge_features(const MazeWorld& w, std::span<const std::pair<std::size_t, std::size_t>> edges) {
  Tensor f(edges.size(), kEdgeFeatures);
  for (std::size_t e = 0; e < edges.size(); ++e) {
    const double a = open_fraction(w, edges[e].first), b = open_fraction(w, edges[e].second);
    f(e, 0) = 0.5 * (a + b);
    f(e, 1) = std::abs(a - b);
    f(e, 2) = a * b;
  }
  return f;
}

namespace {

std::pair<long, long> action_vec(Action a) {
  switch (a) {
    case Action::Up: return {0, -1};
    case Action::Down: return {0, 1};
    case Action::Left: return {-1, 0};
    case Action::Right: return {1, 0};
  }
  return {0, 0};
}

Action vec_action(std::pair<long, long> v) {
  if (v.first == 0) return v.second < 0 ? Action::Up : Action::Down;
  return v.first < 0 ? Action::Left : Action::Right;
}

}  // namespace

Action HabitFrame::to_frame(Action world) const {
  auto [x, y] = action_vec(world);
  if (flip_x) x = -x;
  if (flip_y) y = -y;
  if (swap) std::swap(x, y);
  return vec_action({x, y});
}

Action HabitFrame::to_world(Action canonical) const {
  auto [x, y] = action_vec(canonical);
  if (swap) std::swap(x, y);
  if (flip_x) x = -x;
  if (flip_y) y = -y;
  return vec_action({x, y});
}

HabitFrame habit_frame(const MazeWorld& w, std::size_t position) {
  const long gx = static_cast<long>(w.x_of(w.goal)) - static_cast<long>(w.x_of(position));
  const long gy = static_cast<long>(w.y_of(w.goal)) - static_cast<long>(w.y_of(position));
  return HabitFrame{gx < 0, gy < 0, std::abs(gy) > std::abs(gx)};
}

Tensor habit_features(const MazeWorld& w, std::size_t position, std::size_t crop) {
  const HabitFrame fr = habit_frame(w, position);
  const long half = static_cast<long>(crop / 2);
  const long px = static_cast<long>(w.x_of(position)), py = static_cast<long>(w.y_of(position));
  Tensor f(1, crop * crop + 4);
  std::size_t k = 0;
  for (long v = -half; v <= half; ++v) {
    for (long u = -half; u <= half; ++u, ++k) {
      long dx = fr.swap ? v : u, dy = fr.swap ? u : v;
      if (fr.flip_x) dx = -dx;
      if (fr.flip_y) dy = -dy;
      const long x = px + dx, y = py + dy;
      if (x < 0 || y < 0 || x >= static_cast<long>(w.width()) || y >= static_cast<long>(w.height())) continue;
      f(0, k) = w.is_open(w.cell(static_cast<std::size_t>(x), static_cast<std::size_t>(y))) ? 1.0 : 0.0;
    }
  }
  const long gx = std::abs(static_cast<long>(w.x_of(w.goal)) - px);
  const long gy = std::abs(static_cast<long>(w.y_of(w.goal)) - py);
  const long a = std::max(gx, gy), b = std::min(gx, gy);
  const double m = static_cast<double>(std::max(w.width(), w.height()));
  f(0, k) = static_cast<double>(a) / m;
  f(0, k + 1) = static_cast<double>(b) / m;
  f(0, k + 2) = a == b ? 1.0 : 0.0;
  f(0, k + 3) = b == 0 ? 1.0 : 0.0;
  return f;
}

std::vector<ModPair> grid_action_table(std::size_t width, std::size_t height) {
  MazeWorld open(width, height);
  std::vector<ModPair> out;
  for (std::size_t c = 0; c < open.cells(); ++c)
    for (Action a : kActions) out.push_back({c, static_cast<std::size_t>(a), open.step_on_grid(c, a)});
  return out;
}

double alpha_at(const MazeAgentConfig& cfg, std::size_t epoch, std::size_t epochs) {
  if (epochs <= 1) return cfg.alpha_end;
  const double t = static_cast<double>(std::min(epoch, epochs - 1)) / static_cast<double>(epochs - 1);
  return cfg.alpha_start + (cfg.alpha_end - cfg.alpha_start) * t;
}

// ---- model ---------------------------------------------------------------------

namespace {

Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = matmul(x, w);
  for (std::size_t i = 0; i < y.rows(); ++i)
    for (std::size_t j = 0; j < y.cols(); ++j) y(i, j) += b(0, j);
  return y;
}

void relu_inplace(Tensor& t) {
  for (double& v : t.data()) v = v < 0 ? 0.0 : v;
}

double softplus_d(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

Var dense(const Var& x, const std::map<std::string, Var>& p, const std::string& w, const std::string& b) {
  return add_row_broadcast(matmul(x, p.at(w)), p.at(b));
}

/// Parameters under `prefix` with the prefix stripped.
ParamSet take(const ParamSet& ps, const std::string& prefix) {
  ParamSet out;
  for (const auto& [name, t] : ps)
    if (name.rfind(prefix, 0) == 0) out.add(name.substr(prefix.size()), t);
  return out;
}

void put(ParamSet& ps, const ParamSet& part, const std::string& prefix) {
  for (const auto& [name, t] : part) ps.at(prefix + name) = t;
}

std::size_t habit_inputs(const MazeAgentConfig& c) { return c.crop * c.crop + 4; }

std::string hab_name(char kind, std::size_t layer) { return std::string(1, kind) + std::to_string(layer + 1); }

/// Habitual logits from parameters named w1, b1, ... (prefix already stripped).
Tensor habit_logits(const ParamSet& hab, std::size_t layers, const Tensor& x) {
  Tensor h = x;
  for (std::size_t k = 0; k <= layers; ++k) {
    h = dense(h, hab.at(hab_name('w', k)), hab.at(hab_name('b', k)));
    if (k < layers) relu_inplace(h);
  }
  return h;
}

Var habit_logits(const std::map<std::string, Var>& p, std::size_t layers, const Var& x) {
  Var h = x;
  for (std::size_t k = 0; k <= layers; ++k) {
    h = dense(h, p, hab_name('w', k), hab_name('b', k));
    if (k < layers) h = relu(h);
  }
  return h;
}

}  // namespace

MazeAgent::MazeAgent(MazeAgentConfig cfg) : cfg_(cfg) {
  Rng rng(cfg_.seed);
  auto he = [&](std::size_t in, std::size_t out, double gain) {
    return rng.normal_tensor(in, out, 0.0, gain / std::sqrt(static_cast<double>(in)));
  };
  params_.add("env.v.w1", he(kCellFeatures, cfg_.v_hidden, std::sqrt(2.0)));
  params_.add("env.v.b1", Tensor(1, cfg_.v_hidden));
  params_.add("env.v.w2", he(cfg_.v_hidden, 1, 1.0));
  params_.add("env.v.b2", Tensor(1, 1));
  params_.add("env.e.w1", he(kEdgeFeatures, cfg_.e_hidden, std::sqrt(2.0)));
  params_.add("env.e.b1", Tensor(1, cfg_.e_hidden));
  params_.add("env.e.w2", he(cfg_.e_hidden, 1, 1.0));
  params_.add("env.e.b2", Tensor(1, 1, 0.5413));  // softplus(0.5413) = 1
  OperatorBank bank(cfg_.maze.width * cfg_.maze.height, 4, cfg_.action_rank, rng);
  for (const auto& [name, t] : bank.params()) params_.add("act." + name, t);
  for (std::size_t k = 0; k <= cfg_.habit_layers; ++k) {
    const std::size_t in = k == 0 ? habit_inputs(cfg_) : cfg_.habit_hidden;
    const std::size_t out = k == cfg_.habit_layers ? 4 : cfg_.habit_hidden;
    params_.add("hab." + hab_name('w', k), he(in, out, k == cfg_.habit_layers ? 1.0 : std::sqrt(2.0)));
    params_.add("hab." + hab_name('b', k), Tensor(1, out));
  }
}

MazeAgent::MazeAgent(MazeAgentConfig cfg, ParamSet params, std::vector<std::string> stages)
    : cfg_(cfg), params_(std::move(params)), stages_(std::move(stages)) {
  for (const char* name : {"env.v.w1", "env.v.b1", "env.v.w2", "env.v.b2", "env.e.w1", "env.e.b1", "env.e.w2",
                           "env.e.b2", "act.L", "act.R", "act.Z"}) {
    if (!params_.contains(name)) throw Error(std::string("maze agent is missing parameter ") + name);
  }
  for (std::size_t k = 0; k <= cfg_.habit_layers; ++k) {
    for (char kind : {'w', 'b'}) {
      if (!params_.contains("hab." + hab_name(kind, k))) {
        throw Error("maze agent is missing parameter hab." + hab_name(kind, k));
      }
    }
  }
  if (params_.at("env.v.w1").rows() != kCellFeatures) throw ShapeError("cell feature count mismatch");
  if (params_.at("env.e.w1").rows() != kEdgeFeatures) throw ShapeError("edge feature count mismatch");
  if (params_.at("act.L").rows() != cfg_.maze.width * cfg_.maze.height) {
    throw ShapeError("action model size does not match the maze size");
  }
  if (params_.at("hab.w1").rows() != habit_inputs(cfg_)) throw ShapeError("habitual input size mismatch");
}

void MazeAgent::mark_stage(const std::string& s) {
  if (std::find(stages_.begin(), stages_.end(), s) == stages_.end()) stages_.push_back(s);
}

bool MazeAgent::has_stage(const std::string& s) const {
  return std::find(stages_.begin(), stages_.end(), s) != stages_.end();
}

void MazeAgent::require_stages(std::span<const std::string> needed, const std::string& what) const {
  std::string missing;
  for (const auto& s : needed) {
    if (!has_stage(s)) missing += (missing.empty() ? "" : ", ") + s;
  }
  if (missing.empty()) return;
  std::string have;
  for (const auto& s : stages_) have += (have.empty() ? "" : ", ") + s;
  throw UsageError("staged training: " + what + " needs stage(s) " + missing + " first (model has: " +
                   (have.empty() ? "none" : have) + ")");
}

namespace {

void require_size(const MazeAgentConfig& c, const MazeWorld& w) {
  if (w.width() != c.maze.width || w.height() != c.maze.height) {
    throw ShapeError("maze is " + std::to_string(w.width()) + "x" + std::to_string(w.height()) +
                     ", agent expects " + std::to_string(c.maze.width) + "x" + std::to_string(c.maze.height));
  }
}

}  // namespace

std::vector<double> MazeAgent::potential(const MazeWorld& w) const {
  require_size(cfg_, w);
  Tensor h = dense(cell_features(w), params_.at("env.v.w1"), params_.at("env.v.b1"));
  relu_inplace(h);
  Tensor v = dense(h, params_.at("env.v.w2"), params_.at("env.v.b2"));
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = cfg_.v_scale * std::tanh(v[i]);
  return out;
}

Tensor MazeAgent::w_learned(const MazeWorld& w) const {
  require_size(cfg_, w);
  const auto edges = open_edges(w);
  Tensor out(w.cells(), w.cells());
  if (edges.empty()) return out;
  Tensor h = dense(edge_features(w, edges), params_.at("env.e.w1"), params_.at("env.e.b1"));
  relu_inplace(h);
  Tensor v = dense(h, params_.at("env.e.w2"), params_.at("env.e.b2"));
  for (std::size_t e = 0; e < edges.size(); ++e) {
    out(edges[e].first, edges[e].second) = out(edges[e].second, edges[e].first) = softplus_d(v[e]);
  }
  return out;
}

Tensor MazeAgent::coupling(const MazeWorld& w, double alpha) const {
  return alpha * w.w_grid() + (1.0 - alpha) * w_learned(w);
}

Tensor MazeAgent::hamiltonian(const MazeWorld& w, double alpha, std::span<const double> dv) const {
  if (!dv.empty() && dv.size() != w.cells()) throw ShapeError("potential offset length does not match the maze");
  Tensor h = laplacian(coupling(w, alpha));
  const auto v = potential(w);
  for (std::size_t i = 0; i < h.rows(); ++i)
    for (std::size_t j = 0; j < h.cols(); ++j) h(i, j) /= cfg_.mass;
  for (std::size_t c = 0; c < w.cells(); ++c) {
    h(c, c) += v[c] + (w.is_wall(c) ? cfg_.v_wall : 0.0) + (dv.empty() ? 0.0 : dv[c]);
  }
  return h;
}

GroundState MazeAgent::plan(const MazeWorld& w, std::span<const double> dv) const {
  return ground_state(hamiltonian(w, cfg_.alpha_end, dv));
}

OperatorBank MazeAgent::action_bank() const { return OperatorBank(take(params_, "act.")); }

std::size_t MazeAgent::predict_move(std::size_t cell, Action a) const {
  const OperatorBank bank = action_bank();
  if (cell >= bank.states()) throw UsageError("cell outside the action model");
  return readout(apply(basis_state(bank.states(), cell), bank.op(static_cast<std::size_t>(a))));
}

std::array<double, 4> MazeAgent::habit_probs(const MazeWorld& w, std::size_t position) const {
  require_size(cfg_, w);
  const Tensor z = habit_logits(take(params_, "hab."), cfg_.habit_layers, habit_features(w, position, cfg_.crop));
  const double m = *std::max_element(z.data().begin(), z.data().end());
  const HabitFrame fr = habit_frame(w, position);
  std::array<double, 4> p{};
  double total = 0.0;
  for (Action a : kActions) {
    const double e = std::exp(z[static_cast<std::size_t>(a)] - m);
    p[static_cast<std::size_t>(fr.to_world(a))] = e;
    total += e;
  }
  for (double& v : p) v /= total;
  return p;
}

json MazeAgent::to_json() const {
  json j = make_container("maze-agent", cfg_.to_json(), params_);
  j["stages"] = stages_;
  return j;
}

MazeAgent MazeAgent::from_json(const json& j) {
  check_container(j, "maze-agent");
  return MazeAgent(MazeAgentConfig::from_json(j.at("config")), params_from_json(j.at("params")),
                   j.value("stages", std::vector<std::string>{}));
}

void MazeAgent::save(const std::filesystem::path& p) const { write_json_file(p, to_json()); }

MazeAgent MazeAgent::load(const std::filesystem::path& p) { return from_json(read_json_file(p)); }

std::vector<MazeWorld> maze_corpus(std::uint64_t first_seed, std::size_t n, const MazeSpec& spec) {
  std::vector<MazeWorld> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(generate_maze(first_seed + i, spec));
  return out;
}

// ---- stage 1: action model ---------------------------------------------------------

namespace {

OperatorConfig action_train_config(const MazeAgentConfig& c) {
  OperatorConfig oc;
  oc.p = c.maze.width * c.maze.height;
  oc.rank = c.action_rank;
  oc.holdout = 0;
  oc.lr = c.action_lr;
  oc.epochs = c.action_epochs;
  oc.patience = 50;
  oc.stop_loss = 1.0;  // argmax correctness is what matters here
  oc.seed = c.seed;
  return oc;
}

}  // namespace

Stage1Report train_stage1_actions(MazeAgent& agent) {
  const auto& cfg = agent.config();
  OperatorBank bank = agent.action_bank();
  PairSplit split{grid_action_table(cfg.maze.width, cfg.maze.height), {}};
  auto rep = train_bank(bank, split, action_train_config(cfg));
  put(agent.params(), bank.params(), "act.");
  agent.mark_stage("actions");
  Stage1Report out;
  out.epochs = rep.epochs_run;
  out.final_loss = rep.epoch_loss.empty() ? 0.0 : rep.epoch_loss.back();
  out.table_accuracy = action_table_accuracy(agent);
  return out;
}

double action_table_accuracy(const MazeAgent& agent) {
  const auto& cfg = agent.config();
  return pair_accuracy(agent.action_bank(), grid_action_table(cfg.maze.width, cfg.maze.height));
}

// ---- stage 2: perception -----------------------------------------------------------

namespace {

struct PerceptionInputs {
  Tensor cells;
  Tensor edge_feats;
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  Tensor w_grid;
  Tensor wall_v;  // S x 1
};

PerceptionInputs perception_inputs(const MazeWorld& w, double v_wall) {
  PerceptionInputs in;
  in.cells = cell_features(w);
  in.edges = open_edges(w);
  in.edge_feats = edge_features(w, in.edges);
  in.w_grid = w.w_grid();
  in.wall_v = Tensor(w.cells(), 1);
  for (std::size_t c = 0; c < w.cells(); ++c) in.wall_v[c] = w.is_wall(c) ? v_wall : 0.0;
  return in;
}

/// Goal NLL plus the traversability term for one world.
Var perception_loss(Tape& tape, const std::map<std::string, Var>& p, const MazeAgentConfig& cfg,
                    const PerceptionInputs& in, std::size_t goal, double alpha, Rng& jitter,
                    std::size_t& jitter_events) {
  Var hv = relu(dense(tape.constant(in.cells), p, "v.w1", "v.b1"));
  Var v = scale(tanh(dense(hv, p, "v.w2", "v.b2")), cfg.v_scale);
  Var he = relu(dense(tape.constant(in.edge_feats), p, "e.w1", "e.b1"));
  Var ev = softplus(dense(he, p, "e.w2", "e.b2"));
  Var wl = scatter_symmetric(ev, in.edges, in.cells.rows());
  Var w = add(tape.constant(alpha * in.w_grid), scale(wl, 1.0 - alpha));
  Var h = add(scale(laplacian(w), 1.0 / cfg.mass), diag_embed(add(v, tape.constant(in.wall_v))));
  GroundVars gs = ground_state(h);
  const std::size_t n = in.cells.rows();
  double scale_j = 1e-8;
  while (gs.gap < kGapTol && scale_j <= 1e-2) {
    Tensor noise(n, n);
    for (std::size_t j = 0; j < n; ++j) noise(j, j) = scale_j * jitter.normal();
    gs = ground_state(add(h, tape.constant(noise)));
    ++jitter_events;
    scale_j *= 10.0;
  }
  Var nll = neg(log(clamp_min(square(slice(gs.psi, goal, 1, 0, 1)), 1e-12)));
  Var trav = mean(square(add_scalar(ev, -1.0)));
  return add(nll, scale(trav, cfg.lambda_w));
}

}  // namespace

Stage2Report train_stage2_perception(MazeAgent& agent, const std::vector<MazeWorld>& corpus, const Stage2Hook& hook) {
  const auto& cfg = agent.config();
  if (corpus.empty()) throw UsageError("perception corpus is empty");
  for (const auto& w : corpus) require_size(cfg, w);
  std::vector<PerceptionInputs> inputs;
  inputs.reserve(corpus.size());
  for (const auto& w : corpus) inputs.push_back(perception_inputs(w, cfg.v_wall));

  ParamSet env = take(agent.params(), "env.");
  Optimizer opt = Optimizer::adam(cfg.perception_lr);
  Rng rng(cfg.seed + 11);
  Rng jitter(cfg.seed + 12);
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t batch = std::max<std::size_t>(1, cfg.perception_batch);
  Stage2Report rep;
  for (std::size_t epoch = 0; epoch < cfg.perception_epochs; ++epoch) {
    const double alpha = alpha_at(cfg, epoch, cfg.perception_epochs);
    std::shuffle(order.begin(), order.end(), rng.engine());
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      Tape tape;
      auto p = bind(tape, env);
      Var loss;
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t i = order[k];
        Var l = perception_loss(tape, p, cfg, inputs[i], corpus[i].goal, alpha, jitter, rep.jitter_events);
        loss = k == start ? l : add(loss, l);
      }
      loss = scale(loss, 1.0 / static_cast<double>(end - start));
      tape.backward(loss);
      opt.step(env, collect_grads(tape, p));
      total += loss.value().item() * static_cast<double>(end - start);
    }
    rep.epoch_loss.push_back(total / static_cast<double>(corpus.size()));
    rep.alphas.push_back(alpha);
    if (hook) hook(epoch, alpha, rep.epoch_loss.back());
  }
  put(agent.params(), env, "env.");
  agent.mark_stage("perception");
  return rep;
}

double goal_hit_rate(const MazeAgent& agent, const std::vector<MazeWorld>& worlds) {
  if (worlds.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& w : worlds) {
    const auto p = born(agent.plan(w).psi);
    hits += static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin()) == w.goal;
  }
  return static_cast<double>(hits) / static_cast<double>(worlds.size());
}

double wall_mass(const MazeAgent& agent, const MazeWorld& w) {
  const auto p = born(agent.plan(w).psi);
  double m = 0.0;
  for (std::size_t c = 0; c < w.cells(); ++c)
    if (w.is_wall(c)) m += p[c];
  return m;
}

// ---- stage 3: alignment and habitual head -----------------------------------------

std::vector<HabitSample> habit_samples(const MazeAgent& agent, const std::vector<MazeWorld>& worlds) {
  const auto& cfg = agent.config();
  std::vector<HabitSample> out;
  for (const auto& w : worlds) {
    const auto p = born(agent.plan(w).psi);
    const auto dist = w.bfs(w.goal);
    for (std::size_t s = 0; s < w.cells(); ++s) {
      if (s == w.goal || dist[s] < 0) continue;
      const auto choice = choose_neighbor(w, p, s, cfg.depth);
      if (!choice) continue;
      HabitSample hs;
      hs.features = habit_features(w, s, cfg.crop);
      const HabitFrame fr = habit_frame(w, s);
      hs.target = static_cast<std::size_t>(fr.to_frame(*w.direction(s, choice->cell)));
      double best = 0.0;
      for (double sc : choice->scores) best = std::max(best, sc);
      for (Action a : kActions) {
        const std::size_t n = w.move(s, a);
        double e = 1.0;
        if (n != s && best > 0) {
          const auto it = std::find(choice->candidates.begin(), choice->candidates.end(), n);
          e = 1.0 - choice->scores[static_cast<std::size_t>(it - choice->candidates.begin())] / best;
        }
        hs.energy[static_cast<std::size_t>(fr.to_frame(a))] = e;
      }
      out.push_back(std::move(hs));
    }
  }
  return out;
}

double habit_agreement(const MazeAgent& agent, const std::vector<HabitSample>& samples) {
  if (samples.empty()) return 0.0;
  const ParamSet hab = take(agent.params(), "hab.");
  std::size_t ok = 0;
  for (const auto& s : samples) {
    const Tensor z = habit_logits(hab, agent.config().habit_layers, s.features);
    const auto arg = static_cast<std::size_t>(std::max_element(z.data().begin(), z.data().end()) - z.data().begin());
    ok += arg == s.target;
  }
  return static_cast<double>(ok) / static_cast<double>(samples.size());
}

Stage3Report train_stage3_alignment(MazeAgent& agent, const std::vector<MazeWorld>& corpus) {
  const auto& cfg = agent.config();
  for (const auto& w : corpus) require_size(cfg, w);
  const auto samples = habit_samples(agent, corpus);

  ParamSet hab = take(agent.params(), "hab.");
  OperatorBank bank = agent.action_bank();
  const auto table = grid_action_table(cfg.maze.width, cfg.maze.height);
  const OperatorConfig oc = action_train_config(cfg);
  Optimizer hab_opt = Optimizer::adam(cfg.habit_lr);
  Optimizer act_opt = Optimizer::adam(cfg.action_lr);
  Rng rng(cfg.seed + 21);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t batch = std::max<std::size_t>(1, cfg.habit_batch);
  const std::size_t f = samples.empty() ? 0 : samples.front().features.cols();

  Stage3Report rep;
  for (std::size_t epoch = 0; epoch < cfg.habit_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng.engine());
    double total = 0.0;
    const bool train_head = !samples.empty() && (cfg.w_habit > 0 || cfg.w_energy > 0);
    for (std::size_t start = 0; train_head && start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch), n = end - start;
      Tensor x(n, f), e(n, 4);
      std::vector<std::size_t> y(n);
      for (std::size_t k = 0; k < n; ++k) {
        const auto& s = samples[order[start + k]];
        std::copy(s.features.data().begin(), s.features.data().end(), x.row_span(k).begin());
        std::copy(s.energy.begin(), s.energy.end(), e.row_span(k).begin());
        y[k] = s.target;
      }
      Tape tape;
      auto p = bind(tape, hab);
      Var logp = log_softmax_rows(habit_logits(p, cfg.habit_layers, tape.constant(x)));
      Var ce = neg(mean(select_cols(logp, y)));
      Var energy = mean(sum_rows(mul(exp(logp), tape.constant(e))));
      Var loss = add(scale(ce, cfg.w_habit), scale(energy, cfg.w_energy));
      tape.backward(loss);
      hab_opt.step(hab, collect_grads(tape, p));
      total += loss.value().item() * static_cast<double>(n);
    }
    // Action consistency: keep the motion table the action model learned.
    if (cfg.w_action > 0) {
      Tape tape;
      auto v = bind(tape, bank.params());
      Var loss = transition_loss(tape, v, table, bank.states());
      Var norm = add(add(sum(square(v.at("L"))), sum(square(v.at("R")))), sum(square(v.at("Z"))));
      Var obj = scale(add(loss, scale(norm, oc.weight_decay)), cfg.w_action);
      tape.backward(obj);
      act_opt.step(bank.params(), collect_grads(tape, v));
      total += cfg.w_action * loss.value().item() * static_cast<double>(std::max<std::size_t>(1, samples.size()));
    }
    rep.epoch_loss.push_back(total / static_cast<double>(std::max<std::size_t>(1, samples.size())));
  }
  put(agent.params(), hab, "hab.");
  put(agent.params(), bank.params(), "act.");
  agent.mark_stage("alignment");
  rep.agreement = habit_agreement(agent, samples);
  rep.table_accuracy = action_table_accuracy(agent);
  return rep;
}

}  // namespace hamil
