#include "hamil/episode.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "hamil/error.hpp"

namespace hamil {

const char* mode_name(AgentMode m) {
  switch (m) {
    case AgentMode::Energy: return "energy";
    case AgentMode::Habitual: return "habitual";
    case AgentMode::Dual: return "dual";
    case AgentMode::Random: return "random";
    case AgentMode::Oracle: return "oracle";
  }
  return "?";
}

AgentMode parse_mode(const std::string& s) {
  for (AgentMode m : {AgentMode::Energy, AgentMode::Habitual, AgentMode::Dual, AgentMode::Random, AgentMode::Oracle})
    if (s == mode_name(m)) return m;
  throw UsageError("unknown agent mode '" + s + "' (energy, habitual, dual, random, oracle)");
}

EpisodeOptions EpisodeOptions::from_agent(const MazeAgent& agent, AgentMode mode) {
  const auto& c = agent.config();
  EpisodeOptions o;
  o.mode = mode;
  o.depth = c.depth;
  o.revisit_penalty = c.revisit_penalty;
  o.override_fraction = c.override_fraction;
  o.budget = c.budget_factor * c.maze.width * c.maze.height;
  return o;
}

json EpisodeOptions::to_json() const {
  return json{{"mode", mode_name(mode)},
              {"depth", depth},
              {"revisit_penalty", revisit_penalty},
              {"override_fraction", override_fraction},
              {"budget", budget},
              {"seed", seed},
              {"always_plan", always_plan}};
}

EpisodeOptions EpisodeOptions::from_json(const json& j) {
  EpisodeOptions o;
  o.mode = parse_mode(j.value("mode", std::string(mode_name(o.mode))));
  o.depth = j.value("depth", o.depth);
  o.revisit_penalty = j.value("revisit_penalty", o.revisit_penalty);
  o.override_fraction = j.value("override_fraction", o.override_fraction);
  o.budget = j.value("budget", o.budget);
  o.seed = j.value("seed", o.seed);
  o.always_plan = j.value("always_plan", o.always_plan);
  return o;
}

json StepRecord::to_json() const {
  json j{{"type", "step"}, {"step", step},         {"from", from},
         {"to", to},       {"action", action_name(action)}, {"decision", decision}};
  if (planned) {
    j["e0"] = energy;
    j["argmax"] = argmax;
    j["psi"] = psi_hash;
  }
  return j;
}

namespace {

std::string psi_hash(const std::vector<double>& psi) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (double v : psi) {
    unsigned char b[sizeof(double)];
    std::memcpy(b, &v, sizeof(double));
    for (unsigned char c : b) {
      h ^= c;
      h *= 0x100000001b3ull;
    }
  }
  return hex64(h);
}

}  // namespace

Episode::Episode(const MazeAgent& agent, MazeWorld world, EpisodeOptions opts, PerturbScript script)
    : agent_(agent),
      world_(std::move(world)),
      opts_(opts),
      script_(std::move(script)),
      rng_(opts.seed) {
  const auto& c = agent.config();
  if (world_.width() != c.maze.width || world_.height() != c.maze.height) {
    throw ShapeError("maze size does not match the agent");
  }
  require_cell(world_.start, "start");
  require_cell(world_.goal, "goal");
  if (world_.is_wall(world_.start) || world_.is_wall(world_.goal)) throw UsageError("start and goal must be open");
  for (const auto& e : script_) require_cell(e.cell, "perturbation cell");
  std::stable_sort(script_.begin(), script_.end(),
                   [](const PerturbEvent& a, const PerturbEvent& b) { return a.step < b.step; });
  const std::size_t s = world_.cells();
  dv_script_.assign(s, 0.0);
  dv_edit_.assign(s, 0.0);
  dv_revisit_.assign(s, 0.0);
  const OperatorBank bank = agent.action_bank();
  predicted_.assign(s, {});
  for (Action a : kActions) {
    const Tensor o = bank.op(static_cast<std::size_t>(a));
    for (std::size_t c = 0; c < s; ++c) predicted_[c][static_cast<std::size_t>(a)] = readout(apply(basis_state(s, c), o));
  }
  budget_ = opts_.budget ? opts_.budget : c.budget_factor * s;
  position_ = world_.start;
  path_.push_back(position_);
  dv_revisit_[position_] += opts_.revisit_penalty;
  log_.push_back(json{{"type", "episode"},
                      {"version", 1},
                      {"maze", world_.to_text()},
                      {"options", opts_.to_json()},
                      {"script", script_to_json(script_)},
                      {"model", hex64(agent.params().checksum())}});
  finish_if_done();
}

void Episode::require_cell(std::size_t cell, const char* what) const {
  if (cell >= world_.cells()) {
    throw UsageError(std::string(what) + " " + std::to_string(cell) + " is outside the maze");
  }
}

void Episode::finish_if_done() {
  if (done_) return;
  if (position_ == world_.goal) {
    done_ = success_ = true;
  } else if (step_ >= budget_) {
    done_ = true;
  }
  if (done_) log_.push_back(json{{"type", "end"}, {"success", success_}, {"steps", step_}});
}

void Episode::apply_script() {
  while (script_next_ < script_.size() && script_[script_next_].step <= step_) {
    dv_script_[script_[script_next_].cell] += script_[script_next_].dv;
    ++script_next_;
  }
}

std::vector<double> Episode::offset() const {
  std::vector<double> dv(world_.cells());
  for (std::size_t c = 0; c < dv.size(); ++c) dv[c] = dv_script_[c] + dv_edit_[c] + dv_revisit_[c];
  return dv;
}

GroundState Episode::ground_state_now() const { return agent_.plan(world_, offset()); }

const StepRecord& Episode::step() {
  if (done_) throw UsageError("episode is finished");
  apply_script();
  const std::size_t pos = position_;
  StepRecord r;
  r.step = step_;
  r.from = pos;
  const AgentMode mode = opts_.mode;
  std::vector<double> p;
  if (opts_.always_plan || mode == AgentMode::Energy || mode == AgentMode::Dual) {
    GroundState gs = ground_state_now();
    p = born(gs.psi);
    r.planned = true;
    r.energy = gs.energy;
    r.argmax = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
    r.psi_hash = psi_hash(gs.psi);
  }

  auto habitual = [&]() -> std::optional<Action> {
    const auto probs = agent_.habit_probs(world_, pos);
    std::optional<Action> best;
    for (Action a : kActions) {
      if (world_.move(pos, a) == pos) continue;
      if (!best || probs[static_cast<std::size_t>(a)] > probs[static_cast<std::size_t>(*best)]) best = a;
    }
    return best;
  };
  // Action whose predicted outcome (action model) is `target`; the geometric
  // direction if the model disagrees everywhere.
  auto action_to = [&](std::size_t target) {
    for (Action a : kActions) {
      if (predicted_[pos][static_cast<std::size_t>(a)] == target) return a;
    }
    return *world_.direction(pos, target);
  };

  std::optional<Action> act;
  switch (mode) {
    case AgentMode::Energy: {
      if (auto ch = choose_neighbor(world_, p, pos, opts_.depth)) {
        act = action_to(ch->cell);
        r.decision = "energy";
      }
      break;
    }
    case AgentMode::Habitual: {
      act = habitual();
      if (act) r.decision = "habitual";
      break;
    }
    case AgentMode::Dual: {
      act = habitual();
      if (act) r.decision = "habitual";
      if (auto ch = choose_neighbor(world_, p, pos, opts_.depth)) {
        double best = 0.0, h_score = 0.0;
        const std::size_t h_cell = act ? world_.move(pos, *act) : pos;
        for (std::size_t k = 0; k < ch->candidates.size(); ++k) {
          best = std::max(best, ch->scores[k]);
          if (ch->candidates[k] == h_cell) h_score = ch->scores[k];
        }
        const bool override = !act || (ch->target_adjacent && h_cell != ch->cell) ||
                              h_score < opts_.override_fraction * best;
        if (override) {
          act = action_to(ch->cell);
          r.decision = "override";
        }
      }
      break;
    }
    case AgentMode::Random: {
      // Untrained: all four actions equally likely, bumps included.
      act = kActions[rng_.index(kActions.size())];
      r.decision = "random";
      break;
    }
    case AgentMode::Oracle: {
      const auto sp = world_.shortest_path(pos, world_.goal);
      if (sp.size() >= 2) {
        act = *world_.direction(pos, sp[1]);
        r.decision = "oracle";
      }
      break;
    }
  }
  if (!act) {
    r.decision = "stuck";
    act = Action::Up;
  }
  r.action = *act;
  r.to = world_.move(pos, *act);
  if (r.to != pos) dv_revisit_[r.to] += opts_.revisit_penalty;
  position_ = r.to;
  ++step_;
  path_.push_back(position_);
  records_.push_back(r);
  log_.push_back(r.to_json());
  finish_if_done();
  return records_.back();
}

bool Episode::run() {
  while (!done_) step();
  return success_;
}

void Episode::set_wall(std::size_t cell, bool wall) {
  if (done_) throw UsageError("episode is finished");
  require_cell(cell, "cell");
  if (wall && (cell == position_ || cell == world_.goal)) {
    throw UsageError("cannot place a wall on the agent or the goal");
  }
  world_.set_wall(cell, wall);
  log_.push_back(json{{"type", "edit"}, {"step", step_}, {"edit", "wall"}, {"cell", cell}, {"wall", wall}});
}

void Episode::shift_potential(std::size_t cell, double dv) {
  if (done_) throw UsageError("episode is finished");
  require_cell(cell, "cell");
  if (!std::isfinite(dv)) throw UsageError("potential shift must be finite");
  dv_edit_[cell] += dv;
  log_.push_back(json{{"type", "edit"}, {"step", step_}, {"edit", "potential"}, {"cell", cell}, {"dv", dv}});
}

void Episode::set_goal(std::size_t cell) {
  if (done_) throw UsageError("episode is finished");
  require_cell(cell, "goal");
  if (world_.is_wall(cell)) throw UsageError("goal must be an open cell");
  world_.goal = cell;
  std::fill(dv_revisit_.begin(), dv_revisit_.end(), 0.0);
  log_.push_back(json{{"type", "edit"}, {"step", step_}, {"edit", "goal"}, {"cell", cell}});
  finish_if_done();
}

void Episode::set_mode(AgentMode mode) {
  if (done_) throw UsageError("episode is finished");
  opts_.mode = mode;
  log_.push_back(json{{"type", "edit"}, {"step", step_}, {"edit", "mode"}, {"mode", mode_name(mode)}});
}

std::string Episode::log_ndjson() const {
  std::string out;
  for (const auto& j : log_) out += j.dump() + "\n";
  return out;
}

EpisodeResult run_episode(const MazeAgent& agent, const MazeWorld& world, const EpisodeOptions& opts,
                          const PerturbScript& script) {
  Episode ep(agent, world, opts, script);
  EpisodeResult r;
  r.success = ep.run();
  r.steps = ep.steps();
  r.path = ep.path();
  const int d = world.bfs(world.start)[world.goal];
  r.optimal = d < 0 ? 0 : static_cast<std::size_t>(d);
  return r;
}

std::vector<json> parse_ndjson(const std::string& text) {
  std::vector<json> out;
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::parse_error& e) {
      throw UsageError("log line " + std::to_string(n) + " is not JSON: " + e.what());
    }
  }
  return out;
}

ReplayReport replay(const MazeAgent& agent, const std::vector<json>& log) {
  ReplayReport rep;
  if (log.empty() || log[0].value("type", "") != "episode") {
    rep.detail = "log does not start with an episode header";
    rep.first_mismatch = 0;
    return rep;
  }
  const json& head = log[0];
  if (head.value("model", "") != hex64(agent.params().checksum())) {
    rep.detail = "model checksum differs from the one that recorded the log";
    rep.first_mismatch = 0;
    return rep;
  }
  MazeWorld world = MazeWorld::from_text(head.at("maze").get<std::string>());
  Episode ep(agent, world, EpisodeOptions::from_json(head.at("options")), script_from_json(head.at("script"), world));
  for (std::size_t i = 1; i < log.size(); ++i) {
    const json& line = log[i];
    const std::string type = line.value("type", "");
    if (type == "step") {
      if (ep.done()) break;
      ep.step();
    } else if (type == "edit") {
      const std::string edit = line.value("edit", "");
      if (line.value("step", std::size_t{0}) != ep.steps() || ep.done()) break;
      if (edit == "wall") {
        ep.set_wall(line.at("cell"), line.at("wall"));
      } else if (edit == "potential") {
        ep.shift_potential(line.at("cell"), line.at("dv"));
      } else if (edit == "goal") {
        ep.set_goal(line.at("cell"));
      } else if (edit == "mode") {
        ep.set_mode(parse_mode(line.at("mode")));
      } else {
        break;
      }
    }
  }
  rep.steps = ep.steps();
  const auto& mine = ep.log();
  const std::size_t n = std::min(mine.size(), log.size());
  for (std::size_t i = 0; i < n; ++i) {
    if (mine[i] != log[i]) {
      rep.first_mismatch = i;
      rep.detail = "recorded " + log[i].dump() + " replayed " + mine[i].dump();
      return rep;
    }
  }
  if (mine.size() != log.size()) {
    rep.first_mismatch = n;
    rep.detail = "replay produced " + std::to_string(mine.size()) + " lines, log has " + std::to_string(log.size());
    return rep;
  }
  rep.identical = true;
  return rep;
}

const ModeSummary& EvalReport::at(AgentMode m) const {
  for (const auto& s : modes)
    if (s.mode == m) return s;
  throw UsageError(std::string("mode ") + mode_name(m) + " was not evaluated");
}

EvalReport evaluate(const MazeAgent& agent, const EvalOptions& opts) {
  EvalReport rep;
  rep.checksum_before = hex64(agent.params().checksum());
  for (AgentMode m : opts.modes) rep.modes.push_back(ModeSummary{m});
  std::ostringstream csv;
  csv << "seed,mode,success,steps,optimal\n";
  std::vector<double> step_sums(opts.modes.size(), 0.0);
  for (std::size_t i = 0; i < opts.episodes; ++i) {
    const std::uint64_t seed = opts.first_seed + i;
    const MazeWorld world = generate_maze(seed, agent.config().maze);
    const PerturbScript script = opts.perturb ? path_bump_script(world) : PerturbScript{};
    for (std::size_t k = 0; k < opts.modes.size(); ++k) {
      EpisodeOptions eo = EpisodeOptions::from_agent(agent, opts.modes[k]);
      eo.seed = seed;
      eo.always_plan = false;
      Episode ep(agent, world, eo, script);
      EpisodeResult r;
      r.success = ep.run();
      r.steps = ep.steps();
      const int d = world.bfs(world.start)[world.goal];
      r.optimal = d < 0 ? 0 : static_cast<std::size_t>(d);
      if (!opts.log_dir.empty()) {
        std::filesystem::create_directories(opts.log_dir);
        std::ofstream out(opts.log_dir / (std::to_string(seed) + "-" + mode_name(opts.modes[k]) + ".ndjson"));
        out << ep.log_ndjson();
        if (!out) throw Error("cannot write episode log to " + opts.log_dir.string());
      }
      auto& s = rep.modes[k];
      ++s.episodes;
      if (r.success) {
        ++s.successes;
        step_sums[k] += static_cast<double>(r.steps);
      }
      csv << seed << ',' << mode_name(opts.modes[k]) << ',' << (r.success ? 1 : 0) << ',' << r.steps << ','
          << r.optimal << '\n';
    }
  }
  for (std::size_t k = 0; k < rep.modes.size(); ++k) {
    auto& s = rep.modes[k];
    s.mean_steps = s.successes ? step_sums[k] / static_cast<double>(s.successes) : 0.0;
  }
  rep.csv = csv.str();
  rep.checksum_after = hex64(agent.params().checksum());
  return rep;
}

}  // namespace hamil
