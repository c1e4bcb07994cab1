#include "hamil/operators.hpp"

#include <Eigen/QR>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "hamil/error.hpp"

namespace hamil {

json OperatorConfig::to_json() const {
  return json{{"p", p},           {"rank", rank},         {"holdout", holdout},
              {"lr", lr},         {"epochs", epochs},     {"patience", patience},
              {"stop_loss", stop_loss}, {"weight_decay", weight_decay}, {"seed", seed}};
}

OperatorConfig OperatorConfig::from_json(const json& j) {
  OperatorConfig c;
  c.p = j.value("p", c.p);
  c.rank = j.value("rank", c.rank);
  c.holdout = j.value("holdout", c.holdout);
  c.lr = j.value("lr", c.lr);
  c.epochs = j.value("epochs", c.epochs);
  c.patience = j.value("patience", c.patience);
  c.stop_loss = j.value("stop_loss", c.stop_loss);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.seed = j.value("seed", c.seed);
  return c;
}

namespace {

// First `rows` x `cols` block of Q from the QR of an n x n Gaussian matrix.
Tensor orthogonal_slice(std::size_t rows, std::size_t cols, Rng& rng) {
  const auto n = static_cast<Eigen::Index>(std::max(rows, cols));
  Eigen::MatrixXd g(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) g(i, j) = rng.normal();
  const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ();
  Tensor t(rows, cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) t(i, j) = q(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  return t;
}

std::size_t check_bank_params(const ParamSet& ps) {
  for (const char* name : {"L", "R", "Z"}) {
    if (!ps.contains(name)) throw UsageError(std::string("operator bank is missing parameter ") + name);
  }
  const std::size_t s = ps.at("L").rows(), r = ps.at("L").cols();
  if (s < 2 || r == 0) throw ShapeError("operator bank parameter L has shape " + ps.at("L").shape_string());
  if (ps.at("R").rows() != s || ps.at("R").cols() != r) throw ShapeError("operator bank parameter R has shape " + ps.at("R").shape_string());
  if (ps.at("Z").rows() == 0 || ps.at("Z").cols() != r) throw ShapeError("operator bank parameter Z has shape " + ps.at("Z").shape_string());
  if (!ps.all_finite()) throw NumericError("operator bank parameters are not finite");
  return s;
}

}  // namespace

OperatorBank::OperatorBank(std::size_t states, std::size_t ops, std::size_t rank, Rng& rng)
    : states_(states), ops_(ops) {
  if (states < 2) throw UsageError("an operator bank needs at least 2 states");
  if (ops == 0) throw UsageError("an operator bank needs at least one operator");
  if (rank == 0) throw UsageError("operator rank must be positive");
  params_.add("L", orthogonal_slice(states, rank, rng));
  params_.add("R", orthogonal_slice(states, rank, rng));
  params_.add("Z", rng.normal_tensor(ops, rank, 1.0, 0.1));
}

OperatorBank::OperatorBank(ParamSet params) : params_(std::move(params)) {
  states_ = check_bank_params(params_);
  ops_ = params_.at("Z").rows();
}

Tensor OperatorBank::op(std::size_t b) const {
  if (b >= ops_) throw UsageError("operator index " + std::to_string(b) + " outside [0, " + std::to_string(ops_) + ")");
  const Tensor& l = params_.at("L");
  const Tensor& r = params_.at("R");
  const auto z = params_.at("Z").row_span(b);
  Tensor lz = l;
  for (std::size_t i = 0; i < lz.rows(); ++i)
    for (std::size_t k = 0; k < lz.cols(); ++k) lz(i, k) *= z[k];
  return matmul(lz, r.transposed());
}

json OperatorBank::to_json(const OperatorConfig& cfg) const {
  OperatorConfig c = cfg;
  c.p = states_;
  c.rank = rank();
  return make_container("operators", c.to_json(), params_);
}

OperatorBank OperatorBank::from_json(const json& j) {
  check_container(j, "operators");
  return OperatorBank(params_from_json(j.at("params")));
}

void OperatorBank::save(const std::filesystem::path& path, const OperatorConfig& cfg) const {
  write_json_file(path, to_json(cfg));
}

OperatorBank OperatorBank::load(const std::filesystem::path& path) { return from_json(read_json_file(path)); }

Tensor make_operator(const OperatorBank& bank, std::size_t b) { return bank.op(b); }

Tensor apply(const Tensor& psi, const Tensor& o) {
  if (psi.rows() != 1 || psi.cols() != o.rows() || !o.is_square()) {
    throw ShapeError("apply: wave " + psi.shape_string() + " against operator " + o.shape_string());
  }
  return matmul(psi, o);
}

Tensor basis_state(std::size_t p, std::size_t a) {
  if (a >= p) throw UsageError("basis index out of range");
  Tensor e(1, p);
  e[a] = 1.0;
  return e;
}

std::size_t readout(const Tensor& wave) {
  if (wave.size() == 0) throw ShapeError("readout of an empty wave");
  const auto d = wave.data();
  return static_cast<std::size_t>(std::max_element(d.begin(), d.end()) - d.begin());
}

PairSplit split_pairs(std::size_t p, std::size_t holdout, std::uint64_t seed) {
  if (holdout + 1 >= p) throw UsageError("held-out count leaves an operator with no training pairs");
  Rng rng(seed);
  PairSplit s;
  // Pairs involving 0 are never held out: 0 is the absorbing state, not part
  // of the group being generalized.
  std::vector<std::size_t> order(p - 1);
  for (std::size_t b = 0; b < p; ++b) {
    std::iota(order.begin(), order.end(), 1);
    std::shuffle(order.begin(), order.end(), rng.engine());
    std::vector<bool> held(p, false);
    for (std::size_t i = 0; i < holdout && b != 0; ++i) held[order[i]] = true;
    for (std::size_t a = 0; a < p; ++a) (held[a] ? s.held_out : s.train).push_back({a, b, a * b % p});
  }
  return s;
}

namespace {

std::vector<Tensor> all_ops(const OperatorBank& bank) {
  std::vector<Tensor> ops;
  for (std::size_t b = 0; b < bank.ops(); ++b) ops.push_back(bank.op(b));
  return ops;
}

bool pair_correct(const std::vector<Tensor>& ops, const ModPair& q) {
  const Tensor& o = ops.at(q.b);
  if (q.a >= o.rows()) throw UsageError("pair state outside the bank");
  return readout(Tensor::row(o.row_span(q.a))) == q.c;
}

void require_modular(const OperatorBank& bank) {
  if (bank.states() != bank.ops()) throw UsageError("modular diagnostics need a bank with one operator per state");
}

}  // namespace

std::vector<double> per_operator_accuracy(const OperatorBank& bank, const std::vector<ModPair>& pairs) {
  const auto ops = all_ops(bank);
  std::vector<std::size_t> hit(ops.size(), 0), total(ops.size(), 0);
  for (const auto& q : pairs) {
    ++total.at(q.b);
    hit[q.b] += pair_correct(ops, q);
  }
  std::vector<double> acc(ops.size(), std::numeric_limits<double>::quiet_NaN());
  for (std::size_t b = 0; b < ops.size(); ++b)
    if (total[b]) acc[b] = static_cast<double>(hit[b]) / static_cast<double>(total[b]);
  return acc;
}

double pair_accuracy(const OperatorBank& bank, const std::vector<ModPair>& pairs) {
  if (pairs.empty()) return std::numeric_limits<double>::quiet_NaN();
  const auto ops = all_ops(bank);
  std::size_t hit = 0;
  for (const auto& q : pairs) hit += pair_correct(ops, q);
  return static_cast<double>(hit) / static_cast<double>(pairs.size());
}

Var transition_loss(Tape& tape, const std::map<std::string, Var>& bound, const std::vector<ModPair>& pairs,
                    std::size_t states) {
  if (pairs.empty()) throw UsageError("transition loss over an empty pair set");
  std::vector<std::size_t> as, bs;
  Tensor target(pairs.size(), states);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    as.push_back(pairs[i].a);
    bs.push_back(pairs[i].b);
    target(i, pairs[i].c) = 1.0;
  }
  Var rows = mul(gather_rows(bound.at("L"), as), gather_rows(bound.at("Z"), bs));
  Var waves = matmul(rows, transpose(bound.at("R")));
  return scale(sum(square(sub(waves, tape.constant(target)))), 1.0 / static_cast<double>(pairs.size()));
}

OperatorTrainReport train_bank(OperatorBank& bank, const PairSplit& split, const OperatorConfig& cfg,
                               const EpochHook& hook) {
  if (split.train.empty()) throw UsageError("operator training set is empty");
  std::vector<std::size_t> seen(bank.ops(), 0);
  for (const auto& q : split.train) {
    if (q.a >= bank.states() || q.b >= bank.ops() || q.c >= bank.states()) {
      throw UsageError("training pair outside the bank");
    }
    ++seen[q.b];
  }
  for (std::size_t b = 0; b < bank.ops(); ++b)
    if (!seen[b]) throw UsageError("operator " + std::to_string(b) + " has no training pairs");

  const std::vector<ModPair>& monitor = split.held_out.empty() ? split.train : split.held_out;
  Optimizer opt = Optimizer::adam(cfg.lr);
  OperatorTrainReport rep;
  std::size_t streak = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Tape tape;
    auto v = bind(tape, bank.params());
    Var loss = transition_loss(tape, v, split.train, bank.states());
    Var total = loss;
    if (cfg.weight_decay > 0) {
      Var norm = add(add(sum(square(v.at("L"))), sum(square(v.at("R")))), sum(square(v.at("Z"))));
      total = add(loss, scale(norm, cfg.weight_decay));
    }
    tape.backward(total);
    opt.step(bank.params(), collect_grads(tape, v));

    const double l = loss.value().item();
    const double acc = pair_accuracy(bank, monitor);
    rep.epoch_loss.push_back(l);
    rep.held_out_accuracy.push_back(acc);
    rep.epochs_run = epoch + 1;
    if (hook) hook(epoch, l, acc);
    streak = acc == 1.0 ? streak + 1 : 0;
    if (streak >= cfg.patience && l < cfg.stop_loss) {
      rep.stopped_early = true;
      break;
    }
  }
  rep.train_per_op = per_operator_accuracy(bank, split.train);
  rep.held_out_per_op = per_operator_accuracy(bank, split.held_out);
  return rep;
}

ChainResult compose_chain(const OperatorBank& bank, std::span<const std::size_t> chain) {
  require_modular(bank);
  if (chain.size() < 2) throw UsageError("a chain needs at least two factors");
  const std::size_t p = bank.p();
  ChainResult r;
  Tensor wave = basis_state(p, chain[0]);
  r.expected = chain[0] % p;
  r.peak = 1.0;
  for (std::size_t i = 1; i < chain.size(); ++i) {
    wave = apply(wave, bank.op(chain[i]));
    r.expected = r.expected * chain[i] % p;
    const double m = wave.max_abs();
    if (!std::isfinite(m) || !wave.all_finite()) {
      r.overflow = true;
      r.peak = std::numeric_limits<double>::infinity();
      break;
    }
    r.peak = std::max(r.peak, m);
  }
  r.overflow = r.overflow || r.peak > kChainOverflow;
  r.predicted = readout(wave);
  return r;
}

ChainStats chain_accuracy(const OperatorBank& bank, std::size_t length, std::size_t trials, Rng& rng,
                          bool include_zero) {
  const std::size_t p = bank.p();
  const std::size_t lo = include_zero ? 0 : 1;
  ChainStats s;
  s.length = length;
  std::vector<std::size_t> chain(length);
  for (std::size_t t = 0; t < trials; ++t) {
    for (auto& a : chain) a = lo + rng.index(p - lo);
    const ChainResult r = compose_chain(bank, chain);
    ++s.trials;
    s.correct += !r.overflow && r.predicted == r.expected;
    s.overflows += r.overflow;
    s.max_peak = std::max(s.max_peak, r.peak);
  }
  return s;
}

ResidualTable homomorphism_residual(const OperatorBank& bank) {
  require_modular(bank);
  const std::size_t p = bank.p();
  const auto ops = all_ops(bank);
  ResidualTable r;
  r.table = Tensor(p, p);
  for (std::size_t a = 0; a < p; ++a) {
    for (std::size_t b = 0; b < p; ++b) {
      const Tensor& ref = ops[a * b % p];
      const double norm = ref.frobenius_norm();
      if (!(norm > 0)) throw NumericError("reference operator O_" + std::to_string(a * b % p) + " has zero norm");
      const double res = (matmul(ops[a], ops[b]) - ref).frobenius_norm() / norm;
      r.table(a, b) = res;
      r.max = std::max(r.max, res);
      if (a && b) r.max_nonzero = std::max(r.max_nonzero, res);
    }
  }
  return r;
}

double permutation_score(const Tensor& o) {
  if (o.rows() == 0) throw ShapeError("permutation score of an empty matrix");
  double total = 0.0;
  for (std::size_t i = 0; i < o.rows(); ++i) {
    double peak = 0.0, l1 = 0.0;
    for (double v : o.row_span(i)) {
      peak = std::max(peak, std::abs(v));
      l1 += std::abs(v);
    }
    if (!(l1 > 0)) throw NumericError("permutation score: row " + std::to_string(i) + " is zero");
    total += peak / l1;
  }
  return total / static_cast<double>(o.rows());
}

ClosureCheck closure_consistency(const OperatorBank& bank) {
  require_modular(bank);
  const std::size_t p = bank.p();
  const auto ops = all_ops(bank);
  ClosureCheck c;
  for (std::size_t a = 1; a < p; ++a) {
    for (std::size_t b = 1; b < p; ++b) {
      const Tensor two = matmul(ops[a], ops[b]);
      const Tensor& one = ops[a * b % p];
      for (std::size_t x = 0; x < p; ++x) {
        ++c.checked;
        c.violations += readout(Tensor::row(two.row_span(x))) != readout(Tensor::row(one.row_span(x)));
      }
    }
  }
  return c;
}

double default_graph_threshold(const Tensor& o) {
  if (o.rows() == 0) throw ShapeError("graph threshold of an empty matrix");
  double total = 0.0;
  for (std::size_t i = 0; i < o.rows(); ++i) {
    double peak = 0.0;
    for (double v : o.row_span(i)) peak = std::max(peak, std::abs(v));
    total += peak;
  }
  return 0.5 * total / static_cast<double>(o.rows());
}

EdgeList group_graph(const Tensor& o, double tau) {
  if (!o.is_square()) throw ShapeError("group graph needs a square operator");
  EdgeList e;
  for (std::size_t i = 0; i < o.rows(); ++i)
    for (std::size_t j = i + 1; j < o.cols(); ++j)
      if (std::abs(o(i, j)) > tau || std::abs(o(j, i)) > tau) e.emplace_back(i, j);
  return e;
}

EdgeList modular_graph(std::size_t p, std::size_t b) {
  EdgeList e;
  for (std::size_t i = 0; i < p; ++i) {
    const std::size_t j = i * b % p;
    if (i != j) e.emplace_back(std::min(i, j), std::max(i, j));
  }
  std::sort(e.begin(), e.end());
  e.erase(std::unique(e.begin(), e.end()), e.end());
  return e;
}

namespace {

std::string num(double v) {
  if (!std::isfinite(v)) return "";
  std::ostringstream os;
  os.precision(6);
  os << std::fixed << v;
  return os.str();
}

}  // namespace

std::string accuracy_csv(const std::vector<double>& held_out_per_op, const std::vector<double>& train_per_op) {
  std::ostringstream os;
  os << "operator,held_out_accuracy,train_accuracy\n";
  for (std::size_t b = 0; b < held_out_per_op.size(); ++b) {
    os << b << ',' << num(held_out_per_op[b]) << ',' << (b < train_per_op.size() ? num(train_per_op[b]) : "")
       << '\n';
  }
  return os.str();
}

std::string chain_csv(const std::vector<ChainStats>& rows) {
  std::ostringstream os;
  os << "length,trials,correct,accuracy,overflows,max_peak\n";
  for (const auto& r : rows) {
    std::ostringstream peak;
    peak.precision(6);
    peak << r.max_peak;
    os << r.length << ',' << r.trials << ',' << r.correct << ',' << num(r.accuracy()) << ',' << r.overflows << ','
       << peak.str() << '\n';
  }
  return os.str();
}

std::string residual_csv(const ResidualTable& r) {
  std::ostringstream os;
  os << "a\\b";
  for (std::size_t b = 0; b < r.table.cols(); ++b) os << ',' << b;
  os << '\n';
  for (std::size_t a = 0; a < r.table.rows(); ++a) {
    os << a;
    for (std::size_t b = 0; b < r.table.cols(); ++b) os << ',' << std::scientific << r.table(a, b) << std::defaultfloat;
    os << '\n';
  }
  return os.str();
}

std::string edges_csv(const EdgeList& edges) {
  std::ostringstream os;
  os << "i,j\n";
  for (const auto& [i, j] : edges) os << i << ',' << j << '\n';
  return os.str();
}

std::string adjacency_csv(const Tensor& o) {
  std::ostringstream os;
  os << "row";
  for (std::size_t j = 0; j < o.cols(); ++j) os << ',' << j;
  os << '\n';
  for (std::size_t i = 0; i < o.rows(); ++i) {
    os << i;
    for (std::size_t j = 0; j < o.cols(); ++j) os << ',' << num(std::abs(o(i, j)));
    os << '\n';
  }
  return os.str();
}

}  // namespace hamil
