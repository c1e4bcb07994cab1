#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <set>

#include "doctest.h"
#include "hamil/classifier.hpp"
#include "hamil/episode.hpp"
#include "hamil/error.hpp"
#include "fixtures.hpp"

using namespace hamil;
using hamil::test::held_out_mazes;
using hamil::test::trained;

namespace {

// Grid Laplacian plus a diagonal potential, walls at +50.
Tensor grid_h(const MazeWorld& w, const std::vector<double>& v) {
  Tensor h = laplacian(w.w_grid());
  for (std::size_t c = 0; c < w.cells(); ++c) h(c, c) += v[c] + (w.is_wall(c) ? 50.0 : 0.0);
  return h;
}

std::size_t argmax(const std::vector<double>& p) {
  return static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
}

// Greedy walk with choose_neighbor on a fixed potential; returns visited cells.
std::vector<std::size_t> greedy_walk(const MazeWorld& w, const std::vector<double>& v, std::size_t max_steps) {
  const auto p = born(ground_state(grid_h(w, v)).psi);
  std::vector<std::size_t> path{w.start};
  std::size_t pos = w.start;
  for (std::size_t i = 0; i < max_steps && pos != w.goal; ++i) {
    pos = choose_neighbor(w, p, pos, 3)->cell;
    path.push_back(pos);
  }
  return path;
}

// Independent reachable-set oracle: layer-by-layer expansion over the open
// 4-neighbourhood, with `excluded` treated as a wall.
double score_oracle(const MazeWorld& w, const std::vector<double>& p, std::size_t n, std::size_t depth,
                    std::size_t excluded) {
  std::vector<int> layer(w.cells(), -1);
  layer[n] = 0;
  for (std::size_t k = 0; k < depth; ++k) {
    for (std::size_t c = 0; c < w.cells(); ++c) {
      if (layer[c] != static_cast<int>(k)) continue;
      const long x = static_cast<long>(w.x_of(c)), y = static_cast<long>(w.y_of(c));
      const long nb[4][2] = {{x, y - 1}, {x, y + 1}, {x - 1, y}, {x + 1, y}};
      for (const auto& q : nb) {
        if (q[0] < 0 || q[1] < 0 || q[0] >= static_cast<long>(w.width()) || q[1] >= static_cast<long>(w.height()))
          continue;
        const std::size_t m = w.cell(static_cast<std::size_t>(q[0]), static_cast<std::size_t>(q[1]));
        if (w.is_wall(m) || m == excluded || layer[m] >= 0) continue;
        layer[m] = static_cast<int>(k) + 1;
      }
    }
  }
  double s = 0.0;
  for (std::size_t c = 0; c < w.cells(); ++c)
    if (layer[c] >= 0) s += p[c];
  return s;
}

MazeWorld corridor_maze() {
  MazeWorld w(10, 10);
  for (std::size_t c = 10; c < 100; ++c) w.set_wall(c, true);
  w.start = 0;
  w.goal = 9;
  return w;
}

}  // namespace

TEST_SUITE("maze-agent") {
  TEST_CASE("maze text round trip and grid semantics") {
    const MazeWorld w = two_corridor_maze();
    CHECK(w.width() == 10);
    CHECK(w.height() == 10);
    CHECK(MazeWorld::from_text(w.to_text()) == w);
    CHECK(w.start == 21);
    CHECK(w.goal == 48);
    CHECK(w.move(21, Action::Right) == 21);
    CHECK(w.move(21, Action::Up) == 11);
    CHECK(parse_action("down") == Action::Down);
    CHECK_THROWS_AS(parse_action("north"), UsageError);
    CHECK_THROWS_AS(MazeWorld::from_text("#S#\n#..\n"), Error);

    const Tensor g = w.w_grid();
    for (std::size_t i = 0; i < w.cells(); ++i) {
      CHECK(g(i, i) == 0.0);
      for (std::size_t j = 0; j < w.cells(); ++j) {
        CHECK(g(i, j) == g(j, i));
        CHECK((g(i, j) == 0.0 || g(i, j) == 1.0));
        if (g(i, j) != 0.0) CHECK((w.is_open(i) && w.is_open(j)));
      }
    }
  }

  TEST_CASE("generator: deterministic, solvable over 1000 seeds, density 0 is an open grid") {
    CHECK(generate_maze(7) == generate_maze(7));
    CHECK_FALSE(generate_maze(7) == generate_maze(8));
    std::size_t solvable = 0;
    for (std::uint64_t s = 0; s < 1000; ++s) {
      const MazeWorld w = generate_maze(s);
      solvable += w.is_open(w.start) && w.is_open(w.goal) && w.start != w.goal && w.bfs(w.start)[w.goal] > 0;
    }
    CHECK(solvable == 1000);

    MazeSpec open;
    open.density = 0.0;
    for (std::uint64_t s = 0; s < 20; ++s) {
      const MazeWorld w = generate_maze(s, open);
      CHECK(std::count(w.walls().begin(), w.walls().end(), 1) == 0);
      const auto d = w.bfs(w.start);
      for (std::size_t c = 0; c < w.cells(); ++c) {
        const long md = std::labs(static_cast<long>(w.x_of(c)) - static_cast<long>(w.x_of(w.start))) +
                        std::labs(static_cast<long>(w.y_of(c)) - static_cast<long>(w.y_of(w.start)));
        CHECK(d[c] == md);
      }
    }
    MazeSpec tiny;
    tiny.width = 3;
    CHECK_THROWS_AS(generate_maze(1, tiny), UsageError);
  }

  TEST_CASE("perturbation scripts") {
    const MazeWorld w = generate_maze(3);
    const PerturbScript s = path_bump_script(w);
    const auto path = w.shortest_path(w.start, w.goal);
    CHECK_FALSE(s.empty());
    for (const auto& e : s) {
      CHECK(std::find(path.begin(), path.end(), e.cell) != path.end());
      CHECK(e.cell != w.goal);
      CHECK(e.dv == 3.0);
    }
    const PerturbScript back = script_from_json(script_to_json(s), w);
    REQUIRE(back.size() == s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
      CHECK(back[i].step == s[i].step);
      CHECK(back[i].cell == s[i].cell);
      CHECK(back[i].dv == s[i].dv);
    }
    const json xy = json::parse(R"([{"step": 4, "cell": [2, 1], "dv": 1.5}, {"step": 1, "cell": 5, "dv": -1}])");
    const PerturbScript p = script_from_json(xy, w);
    REQUIRE(p.size() == 2);
    CHECK(p[0].step == 1);
    CHECK(p[1].cell == w.cell(2, 1));
    CHECK_THROWS_AS(script_from_json(json::parse(R"([{"step": 0, "cell": 100, "dv": 1}])"), w), UsageError);
  }

  TEST_CASE("planning: deep well, uniform potential, unit norm") {
    MazeWorld w(5, 5);
    std::vector<double> v(25, 0.0);
    v[17] = -10.0;
    const GroundState gs = ground_state(grid_h(w, v));
    CHECK(argmax(born(gs.psi)) == 17);
    double norm = 0.0;
    for (double x : gs.psi) norm += x * x;
    CHECK(norm == doctest::Approx(1.0).epsilon(1e-12));

    const GroundState u = ground_state(grid_h(w, std::vector<double>(25, 0.3)));
    for (double x : u.psi) CHECK(x == doctest::Approx(0.2).epsilon(1e-8));
    CHECK(u.energy == doctest::Approx(0.3).epsilon(1e-10));
  }

  TEST_CASE("neighbor score: d = 0, single-cell mass, BFS oracle at d = 3") {
    MazeWorld w(10, 10);
    Rng rng(5);
    for (std::size_t c = 0; c < w.cells(); ++c)
      if (rng.bernoulli(0.25)) w.set_wall(c, true);
    w.set_wall(44, false);
    std::vector<double> p(w.cells());
    double total = 0.0;
    for (double& x : p) total += x = rng.uniform();
    for (double& x : p) x /= total;

    for (std::size_t n = 0; n < w.cells(); ++n) {
      if (w.is_wall(n)) continue;
      CHECK(neighbor_score(w, p, n, 0) == p[n]);
      for (std::size_t pos = 0; pos < w.cells(); ++pos) {
        if (w.is_wall(pos) || !w.direction(pos, n)) continue;
        CHECK(neighbor_score(w, p, n, 3, pos) == doctest::Approx(score_oracle(w, p, n, 3, pos)).epsilon(1e-14));
      }
    }

    // All mass behind one neighbour: 44 -> 45 -> 46 is the only way there.
    MazeWorld line(10, 10);
    for (std::size_t c = 0; c < 100; ++c) line.set_wall(c, true);
    for (std::size_t c : {34, 43, 44, 45, 46, 54}) line.set_wall(c, false);
    std::vector<double> q(100, 0.0);
    q[46] = 1.0;
    const auto ch = choose_neighbor(line, q, 44, 3);
    REQUIRE(ch);
    CHECK(ch->cell == 45);
    MazeWorld boxed(10, 10);
    for (std::size_t c : {1, 10}) boxed.set_wall(c, true);
    CHECK_FALSE(choose_neighbor(boxed, std::vector<double>(100, 0.01), 0, 3));
  }

  TEST_CASE("reachability soundness on generated mazes") {
    for (std::uint64_t s = 0; s < 30; ++s) {
      const MazeWorld w = generate_maze(s);
      std::vector<double> v(w.cells(), 0.0);
      v[w.goal] = -1.0;
      const auto p = born(ground_state(grid_h(w, v)).psi);
      for (std::size_t pos = 0; pos < w.cells(); ++pos) {
        if (w.is_wall(pos)) continue;
        const auto ch = choose_neighbor(w, p, pos, 3);
        if (!ch) continue;
        CHECK(w.is_open(ch->cell));
        CHECK(w.direction(pos, ch->cell).has_value());
        CHECK_FALSE(reachable_set(w, ch->cell, 3, pos).empty());
      }
    }
  }

  TEST_CASE("perturbation: zero shift is bit-identical, a bump moves the argmax, blocking flips the corridor") {
    const MazeWorld w = two_corridor_maze();
    std::vector<double> v(w.cells(), 0.0);
    v[w.goal] = -1.0;
    const GroundState a = ground_state(grid_h(w, v));
    const GroundState b = ground_state(grid_h(w, v));
    std::vector<double> v0 = v;
    for (double& x : v0) x += 0.0;
    const GroundState c = ground_state(grid_h(w, v0));
    CHECK(a.psi == b.psi);
    CHECK(a.psi == c.psi);

    const std::size_t peak = argmax(born(a.psi));
    CHECK(peak == w.goal);
    std::vector<double> bumped = v;
    bumped[peak] += 10.0;
    CHECK(argmax(born(ground_state(grid_h(w, bumped)).psi)) != peak);

    const auto upper = two_corridor_upper(), lower = two_corridor_lower();
    const auto route = greedy_walk(w, v, 40);
    CHECK(route.back() == w.goal);
    CHECK(route.size() - 1 == 11);
    CHECK(std::find(route.begin(), route.end(), upper[3]) != route.end());

    // Block the upper corridor: BFS confirms only the lower route remains.
    const std::size_t block = upper[3];
    const auto d = w.bfs(w.start, block);
    CHECK(d[w.goal] == 17);
    std::vector<double> blocked = v;
    blocked[block] += 50.0;
    const auto detour = greedy_walk(w, blocked, 40);
    CHECK(detour.back() == w.goal);
    CHECK(std::find(detour.begin(), detour.end(), block) == detour.end());
    CHECK(std::find(detour.begin(), detour.end(), lower[3]) != detour.end());
  }

  TEST_CASE("habitual frame is a grid symmetry") {
    for (int bits = 0; bits < 8; ++bits) {
      const HabitFrame f{(bits & 1) != 0, (bits & 2) != 0, (bits & 4) != 0};
      std::set<Action> seen;
      for (Action a : kActions) {
        CHECK(f.to_world(f.to_frame(a)) == a);
        seen.insert(f.to_frame(a));
      }
      CHECK(seen.size() == 4);
    }
    const MazeWorld w = generate_maze(11);
    const std::size_t crop = 9;
    for (std::size_t pos = 0; pos < w.cells(); ++pos) {
      const Tensor f = habit_features(w, pos, crop);
      REQUIRE(f.cols() == crop * crop + 4);
      CHECK(f(0, crop * crop) >= f(0, crop * crop + 1));
      CHECK(f(0, crop * crop + 1) >= 0.0);
      // Centre of the crop is the agent's own cell.
      CHECK(f(0, crop * crop / 2) == (w.is_open(pos) ? 1.0 : 0.0));
    }
  }

  TEST_CASE("convex mix endpoints and Laplacian invariants") {
    MazeAgent agent{MazeAgentConfig{}};
    const MazeWorld w = generate_maze(21);
    CHECK(agent.coupling(w, 1.0) == w.w_grid());
    CHECK(agent.coupling(w, 0.0) == agent.w_learned(w));
    for (double alpha : {0.0, 0.25, 0.5, 0.9, 1.0}) {
      const Tensor c = agent.coupling(w, alpha);
      for (std::size_t i = 0; i < c.rows(); ++i) {
        CHECK(c(i, i) == 0.0);
        for (std::size_t j = 0; j < c.cols(); ++j) {
          CHECK(c(i, j) == c(j, i));
          CHECK(c(i, j) >= 0.0);
          if (w.is_wall(i) || w.is_wall(j)) CHECK(c(i, j) == 0.0);
        }
      }
      const Spectrum s = sym_eig(laplacian(c));
      CHECK(s.energies.front() >= -1e-10);
      const Tensor h = agent.hamiltonian(w, alpha);
      CHECK(max_abs_diff(h, h.transposed()) == 0.0);
    }
    const auto v = agent.potential(w);
    for (double x : v) CHECK(std::abs(x) <= agent.config().v_scale);
    CHECK_THROWS_AS(agent.potential(MazeWorld(9, 7)), ShapeError);
  }

  TEST_CASE("alpha schedule") {
    MazeAgentConfig c;
    CHECK(alpha_at(c, 0, 12) == 0.9);
    CHECK(alpha_at(c, 11, 12) == 0.0);
    for (std::size_t e = 1; e < 12; ++e)
      CHECK(alpha_at(c, e - 1, 12) - alpha_at(c, e, 12) == doctest::Approx(0.9 / 11).epsilon(1e-12));
    CHECK(alpha_at(c, 0, 1) == c.alpha_end);

    MazeAgentConfig small;
    small.perception_epochs = 4;
    small.perception_mazes = 6;
    MazeAgent a{small};
    std::vector<double> seen;
    const auto rep = train_stage2_perception(a, maze_corpus(1, 6, small.maze),
                                             [&](std::size_t, double alpha, double) { seen.push_back(alpha); });
    REQUIRE(rep.alphas.size() == 4);
    for (std::size_t e = 0; e < 4; ++e) {
      CHECK(rep.alphas[e] == alpha_at(small, e, 4));
      CHECK(seen[e] == rep.alphas[e]);
    }
  }

  TEST_CASE("stage 1: action model reproduces the open-grid motion table") {
    const auto& t = trained();
    CHECK(t.s1.table_accuracy == 1.0);
    const MazeAgent& a = t.agent;
    const MazeWorld open(10, 10);
    for (const auto& q : grid_action_table(10, 10)) CHECK(a.predict_move(q.a, static_cast<Action>(q.b)) == q.c);
    CHECK(a.predict_move(open.cell(4, 5), Action::Up) == open.cell(4, 4));
    CHECK(a.predict_move(open.cell(4, 5), Action::Right) == open.cell(5, 5));
    CHECK(a.predict_move(open.cell(0, 3), Action::Left) == open.cell(0, 3));
    CHECK(a.predict_move(open.cell(6, 9), Action::Down) == open.cell(6, 9));
    CHECK(a.predict_move(open.cell(9, 0), Action::Up) == open.cell(9, 0));
  }

  TEST_CASE("stage 2: perception lands the ground state on the goal") {
    const auto& t = trained();
    REQUIRE(t.s2.epoch_loss.size() == t.agent.config().perception_epochs);
    CHECK(t.s2.epoch_loss.back() < t.s2.epoch_loss.front());
    CHECK(goal_hit_rate(t.agent, held_out_mazes()) >= 0.95);
    for (const auto& w : held_out_mazes()) CHECK(wall_mass(t.agent, w) <= 0.01);
    MazeWorld open(10, 10);
    for (std::size_t g : {0, 9, 27, 55, 73, 99}) {
      open.goal = g;
      CHECK(argmax(born(t.agent.plan(open).psi)) == g);
    }
  }

  TEST_CASE("stage 3: habitual head agrees with the seeker and the action table is retained") {
    const auto& t = trained();
    CHECK(t.s3.table_accuracy == 1.0);
    CHECK(action_table_accuracy(t.agent) == 1.0);
    const auto samples = habit_samples(t.agent, held_out_mazes());
    CHECK(samples.size() > 4000);
    CHECK(habit_agreement(t.agent, samples) >= 0.90);
    for (std::size_t pos : {0, 12, 55}) {
      const auto p = t.agent.habit_probs(held_out_mazes()[0], pos);
      CHECK(std::accumulate(p.begin(), p.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));
      for (double x : p) CHECK(x >= 0.0);
    }
    REQUIRE(t.agent.stages().size() == 3);
  }

  TEST_CASE("stage 3 with zero energy and habitual weights leaves stage-1 behaviour") {
    MazeAgent a = trained().agent;
    a.config().w_energy = 0.0;
    a.config().w_habit = 0.0;
    a.config().habit_epochs = 3;
    const ParamSet before = a.params();
    const auto rep = train_stage3_alignment(a, maze_corpus(77, 5, a.config().maze));
    CHECK(rep.table_accuracy == 1.0);
    for (const auto& [name, t] : before) {
      if (name.rfind("hab.", 0) == 0 || name.rfind("env.", 0) == 0) CHECK(a.params().at(name) == t);
    }
    for (const auto& q : grid_action_table(10, 10))
      CHECK(a.predict_move(q.a, static_cast<Action>(q.b)) == trained().agent.predict_move(q.a, static_cast<Action>(q.b)));
  }

  TEST_CASE("episodes: corridor, bookkeeping, zero-shift replanning") {
    const MazeAgent& a = trained().agent;
    const MazeWorld corridor = corridor_maze();
    for (AgentMode m : {AgentMode::Energy, AgentMode::Dual, AgentMode::Oracle}) {
      const auto r = run_episode(a, corridor, EpisodeOptions::from_agent(a, m));
      CHECK(r.success);
      CHECK(r.steps == 9);
    }

    const MazeWorld w = held_out_mazes()[3];
    CHECK(a.plan(w).psi == a.plan(w, std::vector<double>(w.cells(), 0.0)).psi);

    Episode ep(a, w, EpisodeOptions::from_agent(a, AgentMode::Dual), path_bump_script(w));
    while (!ep.done()) {
      const GroundState gs = ep.ground_state_now();
      double norm = 0.0;
      for (double x : gs.psi) norm += x * x;
      CHECK(norm == doctest::Approx(1.0).epsilon(1e-10));
      const StepRecord& r = ep.step();
      CHECK(ep.world().is_open(r.to));
      CHECK(r.planned);
    }
    CHECK(ep.steps() <= ep.budget());
    if (ep.success()) CHECK(ep.position() == w.goal);
    CHECK(ep.log().back().at("type") == "end");
    CHECK_THROWS_AS(ep.step(), UsageError);
  }

  TEST_CASE("episodes: revisit penalty, goal change, edits") {
    const MazeAgent& a = trained().agent;
    MazeWorld w(10, 10);
    w.start = 0;
    w.goal = 99;
    Episode ep(a, w, EpisodeOptions::from_agent(a, AgentMode::Energy));
    CHECK(ep.offset()[0] == 2.0);
    ep.step();
    CHECK(ep.offset()[ep.position()] == 2.0);
    ep.shift_potential(50, 1.5);
    CHECK(ep.offset()[50] == 1.5);
    ep.set_goal(90);
    CHECK(ep.offset()[0] == 0.0);
    CHECK(ep.offset()[50] == 1.5);
    CHECK_THROWS_AS(ep.set_wall(ep.position(), true), UsageError);
    CHECK_THROWS_AS(ep.set_wall(90, true), UsageError);
    CHECK_THROWS_AS(ep.set_goal(100), UsageError);
    ep.set_wall(45, true);
    CHECK(ep.world().is_wall(45));
    CHECK_THROWS_AS(ep.set_goal(45), UsageError);
    ep.set_mode(AgentMode::Habitual);
    CHECK(ep.options().mode == AgentMode::Habitual);
    ep.set_goal(ep.position());
    CHECK(ep.done());
    CHECK(ep.success());
    CHECK_THROWS_AS(parse_mode("greedy"), UsageError);
  }

  TEST_CASE("replay re-executes a logged episode bit for bit") {
    const MazeAgent& a = trained().agent;
    const MazeWorld w = held_out_mazes()[7];
    Episode ep(a, w, EpisodeOptions::from_agent(a, AgentMode::Dual), path_bump_script(w));
    ep.step();
    ep.shift_potential(w.goal, 0.25);
    ep.step();
    ep.set_mode(AgentMode::Energy);
    std::size_t wall = w.cells();
    for (std::size_t c = 0; c < w.cells(); ++c)
      if (w.is_open(c) && c != ep.position() && c != w.goal && c != w.start) wall = c;
    ep.set_wall(wall, true);
    ep.run();
    const auto lines = parse_ndjson(ep.log_ndjson());
    REQUIRE(lines.size() == ep.log().size());
    const ReplayReport ok = replay(a, lines);
    CHECK(ok.identical);
    CHECK(ok.steps == ep.steps());

    auto tampered = lines;
    for (std::size_t i = 0; i < tampered.size(); ++i) {
      if (tampered[i].at("type") == "step") {
        tampered[i]["e0"] = tampered[i]["e0"].get<double>() * (1 + 1e-15);
        const ReplayReport bad = replay(a, tampered);
        CHECK_FALSE(bad.identical);
        REQUIRE(bad.first_mismatch.has_value());
        CHECK(*bad.first_mismatch == i);
        break;
      }
    }
    MazeAgent other{MazeAgentConfig{}};
    CHECK_FALSE(replay(other, lines).identical);
    CHECK_FALSE(replay(a, {}).identical);
  }

  TEST_CASE("batch evaluation: calibration, ordering and the zero-retraining checksum") {
    MazeAgent untrained{MazeAgentConfig{}};
    EvalOptions base;
    base.episodes = 200;
    base.modes = {AgentMode::Random, AgentMode::Oracle};
    const EvalReport cal = evaluate(untrained, base);
    CHECK(cal.at(AgentMode::Oracle).rate() == 1.0);
    CHECK(cal.at(AgentMode::Random).rate() < 0.45);

    const MazeAgent& a = trained().agent;
    EvalOptions eo;
    eo.episodes = 80;
    const EvalReport r = evaluate(a, eo);
    const double e = r.at(AgentMode::Energy).rate(), h = r.at(AgentMode::Habitual).rate(),
                 d = r.at(AgentMode::Dual).rate();
    MESSAGE("energy " << e << " habitual " << h << " dual " << d);
    CHECK(d >= e);
    CHECK(e >= h);
    CHECK(e >= 0.85);
    CHECK(d - h >= 0.15);
    CHECK(r.checksum_before == r.checksum_after);
    CHECK(r.checksum_before == hex64(a.params().checksum()));
    CHECK(std::count(r.csv.begin(), r.csv.end(), '\n') == 1 + 80 * 3);
    CHECK_THROWS_AS(r.at(AgentMode::Oracle), UsageError);
  }

  TEST_CASE("agent save/load is bit-exact and kind checked") {
    const MazeAgent& a = trained().agent;
    const auto path = std::filesystem::temp_directory_path() / "hamil_maze_agent_test.json";
    a.save(path);
    const MazeAgent b = MazeAgent::load(path);
    CHECK(b.params().checksum() == a.params().checksum());
    CHECK(b.stages() == a.stages());
    CHECK(b.config().to_json() == a.config().to_json());
    json j = a.to_json();
    j["kind"] = "operators";
    CHECK_THROWS_AS(MazeAgent::from_json(j), Error);
    std::filesystem::remove(path);
  }
}
