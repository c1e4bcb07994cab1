#include <cstdio>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "commands.hpp"
#include "hamil/episode.hpp"
#include "hamil/error.hpp"
#include "hamil/service.hpp"

namespace hamil::cli {

namespace {

const std::vector<std::string> kStages = {"actions", "perception", "alignment"};

json agent_knobs() {
  json j = MazeAgentConfig{}.to_json();
  j.erase("seed");
  return j;
}

std::vector<AgentMode> modes_of(const std::string& s) {
  if (s == "all") return {AgentMode::Energy, AgentMode::Habitual, AgentMode::Dual};
  if (s == "every") return {AgentMode::Energy, AgentMode::Habitual, AgentMode::Dual, AgentMode::Random, AgentMode::Oracle};
  std::vector<AgentMode> out;
  std::size_t start = 0;
  for (;;) {
    const auto comma = s.find(',', start);
    out.push_back(parse_mode(s.substr(start, comma == std::string::npos ? std::string::npos : comma - start)));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

/// Stages a mode needs: the seeker needs perception, the habit head alignment.
std::vector<std::string> stages_for(AgentMode m) {
  switch (m) {
    case AgentMode::Energy: return {"actions", "perception"};
    case AgentMode::Habitual:
    case AgentMode::Dual: return kStages;
    default: return {};
  }
}

MazeAgent load_agent(const json& cfg) { return MazeAgent::load(input_path(cfg, "model", "maze agent")); }

int train(const json& cfg) {
  const std::string stage = cfg.at("stage");
  if (stage != "all" && std::find(kStages.begin(), kStages.end(), stage) == kStages.end()) {
    throw UsageError("--stage must be all, actions, perception or alignment");
  }
  MazeAgentConfig ac = MazeAgentConfig::from_json(cfg.at("agent"));
  ac.seed = cfg.at("seed");
  const bool resume = !optional_path(cfg, "model").empty();
  MazeAgent agent = resume ? load_agent(cfg) : MazeAgent(ac);
  if (resume && cfg.at("agent") != agent_knobs()) {
    throw UsageError("agent settings come from --model when resuming; drop the agent flags");
  }

  std::vector<std::string> todo;
  if (stage == "all") {
    for (const auto& s : kStages)
      if (!agent.has_stage(s)) todo.push_back(s);
  } else {
    const auto it = std::find(kStages.begin(), kStages.end(), stage);
    agent.require_stages(std::vector<std::string>(kStages.begin(), it), "stage '" + stage + "'");
    todo.push_back(stage);
  }

  const RunDir run(cfg);
  print_header(cfg, &run);
  const auto& c = agent.config();
  const auto held_out = maze_corpus(500000, 100, c.maze);
  for (const auto& s : todo) {
    std::printf("stage: %s\n", s.c_str());
    std::fflush(stdout);
    if (s == "actions") {
      const Stage1Report r = train_stage1_actions(agent);
      std::printf("  epochs: %zu\n  table-accuracy: %s\n", r.epochs, fixed(r.table_accuracy).c_str());
    } else if (s == "perception") {
      const Stage2Report r = train_stage2_perception(agent, maze_corpus(c.corpus_seed, c.perception_mazes, c.maze));
      std::ostringstream csv;
      csv << "epoch,alpha,loss\n";
      for (std::size_t e = 0; e < r.epoch_loss.size(); ++e)
        csv << e + 1 << ',' << r.alphas.at(e) << ',' << r.epoch_loss[e] << '\n';
      run.csv("perception.csv", csv.str());
      double wall = 0.0;
      for (const auto& w : held_out) wall = std::max(wall, wall_mass(agent, w));
      std::printf("  jitter-events: %zu\n  held-out-goal-hit: %s\n  max-wall-mass: %s\n", r.jitter_events,
                  fixed(goal_hit_rate(agent, held_out)).c_str(), fixed(wall, 6).c_str());
    } else {
      const Stage3Report r =
          train_stage3_alignment(agent, maze_corpus(c.corpus_seed + 100000, c.habit_mazes, c.maze));
      std::ostringstream csv;
      csv << "epoch,loss\n";
      for (std::size_t e = 0; e < r.epoch_loss.size(); ++e) csv << e + 1 << ',' << r.epoch_loss[e] << '\n';
      run.csv("alignment.csv", csv.str());
      std::printf("  train-agreement: %s\n  held-out-agreement: %s\n  table-accuracy: %s\n", fixed(r.agreement).c_str(),
                  fixed(habit_agreement(agent, habit_samples(agent, held_out))).c_str(),
                  fixed(r.table_accuracy).c_str());
    }
    std::fflush(stdout);
  }
  run.json_file("agent.json", agent.to_json());
  std::printf("stages: ");
  for (std::size_t i = 0; i < agent.stages().size(); ++i) std::printf("%s%s", i ? "," : "", agent.stages()[i].c_str());
  std::printf("\nmodel: %s\nchecksum: %s\n", run.file("agent.json").string().c_str(),
              hex64(agent.params().checksum()).c_str());
  return 0;
}

int evaluate_cmd(const json& cfg) {
  const MazeAgent agent = load_agent(cfg);
  EvalOptions eo;
  eo.modes = modes_of(cfg.at("mode"));
  for (AgentMode m : eo.modes) agent.require_stages(stages_for(m), std::string("mode '") + mode_name(m) + "'");
  eo.episodes = cfg.at("n");
  eo.first_seed = cfg.at("first_seed");
  eo.perturb = cfg.at("perturb");
  if (eo.episodes == 0) throw UsageError("--n must be positive");
  const RunDir run(cfg);
  print_header(cfg, &run);
  if (cfg.at("logs")) eo.log_dir = run.file("logs");
  const EvalReport rep = evaluate(agent, eo);
  run.csv("episodes.csv", rep.csv);
  std::ostringstream sum;
  sum << "mode,episodes,successes,success_rate,mean_steps\n";
  for (const auto& m : rep.modes) {
    sum << mode_name(m.mode) << ',' << m.episodes << ',' << m.successes << ',' << m.rate() << ',' << m.mean_steps << '\n';
    std::printf("%s: success %s (%zu/%zu), mean steps %s\n", mode_name(m.mode), fixed(m.rate()).c_str(), m.successes,
                m.episodes, fixed(m.mean_steps, 2).c_str());
  }
  run.csv("summary.csv", sum.str());
  std::printf("checksum-before: %s\nchecksum-after: %s\n", rep.checksum_before.c_str(), rep.checksum_after.c_str());
  return rep.checksum_before == rep.checksum_after ? 0 : 2;
}

int run_cmd(const json& cfg) {
  const MazeAgent agent = load_agent(cfg);
  const AgentMode mode = parse_mode(cfg.at("mode"));
  agent.require_stages(stages_for(mode), std::string("mode '") + mode_name(mode) + "'");
  const std::uint64_t maze_seed = cfg.at("maze_seed");
  const MazeWorld world = generate_maze(maze_seed, agent.config().maze);
  EpisodeOptions eo = EpisodeOptions::from_agent(agent, mode);
  eo.seed = maze_seed;
  const PerturbScript script = cfg.at("perturb") ? path_bump_script(world) : PerturbScript{};
  const RunDir run(cfg);
  print_header(cfg, &run);
  Episode ep(agent, world, eo, script);
  ep.run();
  std::ofstream(run.file("episode.ndjson")) << ep.log_ndjson();
  std::printf("%s", world.to_text().c_str());
  std::printf("mode: %s\nsuccess: %s\nsteps: %zu\nlog: %s\n", mode_name(mode), ep.success() ? "yes" : "no", ep.steps(),
              run.file("episode.ndjson").string().c_str());
  return 0;
}

int replay_cmd(const json& cfg) {
  const MazeAgent agent = load_agent(cfg);
  const auto log_path = input_path(cfg, "log", "event log");
  std::ifstream in(log_path);
  std::stringstream text;
  text << in.rdbuf();
  const auto log = parse_ndjson(text.str());
  const RunDir run(cfg);
  print_header(cfg, &run);
  const ReplayReport rep = replay(agent, log);
  std::printf("identical: %s\nsteps: %zu\n", rep.identical ? "yes" : "no", rep.steps);
  if (!rep.identical) {
    if (rep.first_mismatch) std::printf("first-mismatch: line %zu\n", *rep.first_mismatch + 1);
    std::printf("detail: %s\n", rep.detail.c_str());
    return 2;
  }
  std::ofstream out(run.file("snapshots.ndjson"));
  for (const auto& s : replay_snapshots(agent, log)) out << s.dump() << '\n';
  std::printf("snapshots: %s\n", run.file("snapshots.ndjson").string().c_str());
  return 0;
}

}  // namespace

void add_maze(CLI::App& root) {
  CLI::App* app = root.add_subcommand("maze", "Maze agent: staged training, evaluation, replay");
  app->require_subcommand(1);
  json t{{"seed", 42}, {"out", "runs"}, {"model", ""}, {"stage", "all"}};
  t["agent"] = agent_knobs();
  add_command(*app, {"train", "Train the agent (--stage all|actions|perception|alignment)", t, train});
  json e{{"seed", 42}, {"out", "runs"}, {"model", ""}, {"n", 100}, {"mode", "all"},
         {"first_seed", 900000}, {"perturb", true}, {"logs", false}};
  add_command(*app, {"evaluate", "Success rates per mode on unseen mazes (--mode all|every|m1,m2)", e, evaluate_cmd});
  json r{{"seed", 42}, {"out", "runs"}, {"model", ""}, {"maze_seed", 42}, {"mode", "dual"}, {"perturb", false}};
  add_command(*app, {"run", "Run one episode and write its event log", r, run_cmd});
  json p{{"seed", 42}, {"out", "runs"}, {"model", ""}, {"log", ""}};
  add_command(*app, {"replay", "Re-execute an event log and check it bit for bit", p, replay_cmd});
}

}  // namespace hamil::cli
