#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "cli.hpp"
#include "commands.hpp"
#include "hamil/error.hpp"
#include "hamil/operators.hpp"

namespace hamil::cli {

namespace {

json bank_knobs() {
  json j = OperatorConfig{}.to_json();
  j.erase("seed");
  j.erase("holdout");
  // Held-out left operands per operator as a share of p; 0.15 gives 2 at p = 13.
  j["holdout_fraction"] = 0.15;
  return j;
}

OperatorConfig config_of(const json& cfg) {
  OperatorConfig c = OperatorConfig::from_json(cfg.at("bank"));
  c.seed = cfg.at("seed");
  if (c.p < 2) throw UsageError("p must be at least 2");
  for (std::size_t d = 2; d * d <= c.p; ++d)
    if (c.p % d == 0) throw UsageError("p must be prime, got " + std::to_string(c.p));
  if (c.rank == 0) throw UsageError("rank must be positive");
  const double f = cfg.at("bank").at("holdout_fraction");
  if (!(f > 0.0 && f < 1.0)) throw UsageError("holdout_fraction must be in (0, 1)");
  c.holdout = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(f * static_cast<double>(c.p))));
  if (c.holdout >= c.p) throw UsageError("holdout_fraction leaves no training pairs");
  return c;
}

std::vector<ChainStats> chains(const OperatorBank& bank, const json& cfg) {
  const std::size_t max_len = cfg.at("chains").at("max_length");
  const std::size_t trials = cfg.at("chains").at("trials");
  Rng rng(cfg.at("seed").get<std::uint64_t>() + 1);
  std::vector<ChainStats> rows;
  for (std::size_t len = 2; len <= max_len; ++len) rows.push_back(chain_accuracy(bank, len, trials, rng));
  return rows;
}

void write_tables(const RunDir& run, const OperatorBank& bank, const PairSplit& split, const json& cfg) {
  const auto held = per_operator_accuracy(bank, split.held_out);
  const auto train = per_operator_accuracy(bank, split.train);
  run.csv("accuracy.csv", accuracy_csv(held, train));
  const auto rows = chains(bank, cfg);
  run.csv("chains.csv", chain_csv(rows));
  const ResidualTable res = homomorphism_residual(bank);
  run.csv("residual.csv", residual_csv(res));

  // Operators with no held-out pair (b = 0 keeps every a at 0) count as perfect.
  double min_held = 1.0;
  for (double a : held) min_held = std::min(min_held, a);
  double min_chain = 1.0;
  std::size_t overflows = 0;
  for (const auto& r : rows) {
    min_chain = std::min(min_chain, r.accuracy());
    overflows += r.overflows;
  }
  std::printf("held-out-accuracy: %s\nmin-operator-accuracy: %s\n", fixed(pair_accuracy(bank, split.held_out)).c_str(),
              fixed(min_held).c_str());
  std::printf("min-chain-accuracy: %s\nchain-overflows: %zu\nresidual-max: %g\n", fixed(min_chain).c_str(), overflows,
              res.max);
}

json loaded_config(const std::filesystem::path& p) { return read_json_file(p).at("config"); }

int train(const json& cfg) {
  const OperatorConfig c = config_of(cfg);
  const RunDir run(cfg);
  print_header(cfg, &run);
  Rng rng(c.seed);
  OperatorBank bank(c.p, c.rank, rng);
  const PairSplit split = split_pairs(c.p, c.holdout, c.seed);
  const OperatorTrainReport rep = train_bank(bank, split, c);
  run.json_file("bank.json", bank.to_json(c));
  std::ostringstream loss;
  loss << "epoch,loss,held_out_accuracy\n";
  for (std::size_t e = 0; e < rep.epoch_loss.size(); ++e)
    loss << e + 1 << ',' << rep.epoch_loss[e] << ',' << rep.held_out_accuracy.at(e) << '\n';
  run.csv("loss.csv", loss.str());
  std::printf("p: %zu\nholdout: %zu\nepochs: %zu%s\n", c.p, c.holdout, rep.epochs_run, rep.stopped_early ? " (early stop)" : "");
  write_tables(run, bank, split, cfg);
  std::printf("bank: %s\n", run.file("bank.json").string().c_str());
  return 0;
}

int tables(const json& cfg) {
  const auto path = input_path(cfg, "model", "operator bank");
  const OperatorBank bank = OperatorBank::load(path);
  const OperatorConfig c = OperatorConfig::from_json(loaded_config(path));
  const RunDir run(cfg);
  print_header(cfg, &run);
  std::printf("p: %zu\n", c.p);
  write_tables(run, bank, split_pairs(c.p, c.holdout, c.seed), cfg);
  return 0;
}

int graph(const json& cfg) {
  const OperatorBank bank = OperatorBank::load(input_path(cfg, "model", "operator bank"));
  const std::size_t b = cfg.at("b");
  if (b >= bank.p()) throw UsageError("operator " + std::to_string(b) + " is outside 0.." + std::to_string(bank.p() - 1));
  const Tensor o = bank.op(b);
  const double tau_cfg = cfg.at("tau");
  const double tau = tau_cfg > 0 ? tau_cfg : default_graph_threshold(o);
  const RunDir run(cfg);
  print_header(cfg, &run);
  const EdgeList edges = group_graph(o, tau);
  run.csv("edges.csv", edges_csv(edges));
  run.csv("adjacency.csv", adjacency_csv(o));
  const bool match = edges == modular_graph(bank.p(), b);
  std::printf("operator: %zu\ntau: %s\nedges: %zu\nmatches-multiplication-graph: %s\n", b, fixed(tau, 6).c_str(),
              edges.size(), match ? "yes" : "no");
  return 0;
}

}  // namespace

void add_operators(CLI::App& root) {
  CLI::App* app = root.add_subcommand("operators", "Learned multiplication operators modulo a prime");
  app->require_subcommand(1);
  const json chain_knobs{{"max_length", 20}, {"trials", 500}};
  json t{{"seed", 42}, {"out", "runs"}};
  t["bank"] = bank_knobs();
  t["chains"] = chain_knobs;
  add_command(*app, {"train", "Train an operator bank and write its tables", t, train});
  json tb{{"seed", 42}, {"out", "runs"}, {"model", ""}};
  tb["chains"] = chain_knobs;
  add_command(*app, {"tables", "Accuracy, chain and residual tables of a saved bank", tb, tables});
  json g{{"seed", 42}, {"out", "runs"}, {"model", ""}, {"b", 11}, {"tau", 0.0}};
  add_command(*app, {"graph", "Thresholded graph of one operator (tau 0: automatic)", g, graph});
}

}  // namespace hamil::cli
