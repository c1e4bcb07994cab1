#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "hamil/optim.hpp"
#include "hamil/rng.hpp"
#include "hamil/serialize.hpp"

namespace hamil {

struct OperatorConfig {
  std::size_t p = 13;
  std::size_t rank = 24;
  std::size_t holdout = 2;  // held-out left operands per operator
  double lr = 1e-2;
  std::size_t epochs = 10000;
  std::size_t patience = 2000;  // epochs of perfect held-out accuracy before stopping
  double stop_loss = 1e-4;    // early stop also needs the training loss below this
  double weight_decay = 1e-4;  // L2 on L, R and Z
  std::uint64_t seed = 42;

  json to_json() const;
  static OperatorConfig from_json(const json& j);
};

/// Transition operators O_b = L diag(z_b) R^T acting on row waves over
/// `states` basis states. Parameters: "L" (states x r), "R" (states x r),
/// "Z" (ops x r, row b is z_b). The modular-arithmetic bank has
/// states = ops = p.
class OperatorBank {
 public:
  /// Orthogonal-ish start: L and R are slices of Q from QR of Gaussian
  /// matrices, z_b ~ N(1, 0.1).
  OperatorBank(std::size_t p, std::size_t rank, Rng& rng) : OperatorBank(p, p, rank, rng) {}
  OperatorBank(std::size_t states, std::size_t ops, std::size_t rank, Rng& rng);
  explicit OperatorBank(ParamSet params);

  /// Number of states (the modulus for a modular bank).
  std::size_t p() const { return states_; }
  std::size_t states() const { return states_; }
  std::size_t ops() const { return ops_; }
  std::size_t rank() const { return params_.at("L").cols(); }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

  /// O_b, states x states. Throws UsageError if b >= ops.
  Tensor op(std::size_t b) const;

  json to_json(const OperatorConfig& cfg) const;
  static OperatorBank from_json(const json& j);
  void save(const std::filesystem::path& path, const OperatorConfig& cfg) const;
  static OperatorBank load(const std::filesystem::path& path);

 private:
  std::size_t states_;
  std::size_t ops_;
  ParamSet params_;
};

Tensor make_operator(const OperatorBank& bank, std::size_t b);
/// Row convention: psi' = psi O.
Tensor apply(const Tensor& psi, const Tensor& o);
/// e_a as a 1 x p row.
Tensor basis_state(std::size_t p, std::size_t a);
/// Index of the largest entry (first on ties).
std::size_t readout(const Tensor& wave);

struct ModPair {
  std::size_t a, b, c;
};
struct PairSplit {
  std::vector<ModPair> train;
  std::vector<ModPair> held_out;
};
/// All (a, b) with c = ab mod p; for each b != 0, `holdout` random nonzero a
/// values go to held_out. Throws UsageError if some operator would have no training pair.
PairSplit split_pairs(std::size_t p, std::size_t holdout, std::uint64_t seed);

/// Fraction of pairs (a, b, c) with argmax(e_a O_b) = c, per operator b (NaN
/// if b has none).
std::vector<double> per_operator_accuracy(const OperatorBank& bank, const std::vector<ModPair>& pairs);
double pair_accuracy(const OperatorBank& bank, const std::vector<ModPair>& pairs);

struct OperatorTrainReport {
  std::vector<double> epoch_loss;
  std::vector<double> held_out_accuracy;  // per epoch
  std::size_t epochs_run = 0;
  bool stopped_early = false;
  std::vector<double> train_per_op;
  std::vector<double> held_out_per_op;
};

using EpochHook = std::function<void(std::size_t epoch, double loss, double held_out_accuracy)>;

/// Full-batch Adam on the squared error ||e_a O_b - e_c||^2, mean over pairs,
/// plus weight decay. epoch_loss records the squared error alone. Works for
/// any transition table; early stopping watches split.held_out (or the
/// training pairs when nothing is held out).
OperatorTrainReport train_bank(OperatorBank& bank, const PairSplit& split, const OperatorConfig& cfg,
                               const EpochHook& hook = {});
/// Squared-error loss graph for `pairs` on `tape` given bound bank parameters.
Var transition_loss(Tape& tape, const std::map<std::string, Var>& bound, const std::vector<ModPair>& pairs,
                    std::size_t states);

struct ChainResult {
  std::size_t predicted = 0;
  std::size_t expected = 0;
  double peak = 0.0;      // largest |entry| seen along the chain
  bool overflow = false;  // peak above 1e12 or non-finite
};
inline constexpr double kChainOverflow = 1e12;

/// ((e_{a1} O_{a2}) ...) O_{an} without renormalization. Needs n >= 2.
ChainResult compose_chain(const OperatorBank& bank, std::span<const std::size_t> chain);

struct ChainStats {
  std::size_t length = 0;
  std::size_t trials = 0;
  std::size_t correct = 0;
  std::size_t overflows = 0;
  double max_peak = 0.0;
  double accuracy() const { return trials ? static_cast<double>(correct) / static_cast<double>(trials) : 0.0; }
};
/// Random chains of the given length over residues 1..p-1 (0..p-1 with include_zero).
ChainStats chain_accuracy(const OperatorBank& bank, std::size_t length, std::size_t trials, Rng& rng,
                          bool include_zero = false);

struct ResidualTable {
  Tensor table;               // p x p, entry (a, b)
  double max = 0.0;           // over all (a, b)
  double max_nonzero = 0.0;   // over a, b in 1..p-1
};
/// ||O_a O_b - O_{ab mod p}||_F / ||O_{ab mod p}||_F. Throws NumericError on a
/// zero-norm reference operator.
ResidualTable homomorphism_residual(const OperatorBank& bank);

/// Mean over rows of max|row| / ||row||_1. Throws NumericError on a zero row.
double permutation_score(const Tensor& o);

struct ClosureCheck {
  std::size_t checked = 0;
  std::size_t violations = 0;
  bool ok() const { return violations == 0; }
};
/// argmax(e_x O_a O_b) == argmax(e_x O_{ab mod p}) for nonzero a, b and every x.
ClosureCheck closure_consistency(const OperatorBank& bank);

using EdgeList = std::vector<std::pair<std::size_t, std::size_t>>;
/// 0.5 * mean over rows of max |O[i, :]|.
double default_graph_threshold(const Tensor& o);
/// Undirected edges i < j with |O[i,j]| > tau or |O[j,i]| > tau, sorted.
EdgeList group_graph(const Tensor& o, double tau);
/// Edges {i, b i mod p} for i != b i mod p, sorted.
EdgeList modular_graph(std::size_t p, std::size_t b);

// CSV renderings for the CLI.
std::string accuracy_csv(const std::vector<double>& held_out_per_op, const std::vector<double>& train_per_op);
std::string chain_csv(const std::vector<ChainStats>& rows);
std::string residual_csv(const ResidualTable& r);
std::string edges_csv(const EdgeList& edges);
/// p x p matrix of |O| with a header row, for plotting.
std::string adjacency_csv(const Tensor& o);

}  // namespace hamil
