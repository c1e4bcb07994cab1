#include <cmath>

#include "doctest.h"
#include "hamil/error.hpp"
#include "hamil/surgery.hpp"

using namespace hamil;

namespace {

struct Frozen {
  HamiltonianClassifier model{ClassifierConfig{}};
  Dataset test;
};

// Small trained model shared by the property tests.
const Frozen& frozen() {
  static const Frozen f = [] {
    SyntheticSpec sp;
    sp.per_class = 60;
    sp.dim = 16;
    auto [tr, te] = split(make_synthetic(sp), 0.3, 4);
    ClassifierConfig cfg;
    cfg.input_dim = 16;
    cfg.hidden = 32;
    cfg.embed = 16;
    cfg.epochs = 12;
    Frozen out{HamiltonianClassifier(cfg), te};
    train_classifier(out.model, tr);
    return out;
  }();
  return f;
}

double mean_offdiag_cells(const Tensor& m) {
  double s = 0;
  int n = 0;
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j)
      if (i != j) {
        s += m(i, j);
        ++n;
      }
  return s / n;
}

}  // namespace

TEST_SUITE("rule-surgery") {

TEST_CASE("gate strength") {
  SurgicalRule r;
  r.from = 0;
  r.to = 1;
  CHECK(gate_strength(std::vector<double>{0.3, 0.7}, r) == doctest::Approx(0.5));
  r.gate.slope = 200;
  CHECK(gate_strength(std::vector<double>{0.0, 1.0}, r) < 1e-20);
  CHECK(gate_strength(std::vector<double>{1.0, 0.0}, r) > 1 - 1e-15);
}

TEST_CASE("rule validation") {
  SurgicalRule r;
  r.from = r.to = 1;
  CHECK_THROWS_AS(r.validate(3), UsageError);
  r.to = 5;
  CHECK_THROWS_AS(r.validate(3), UsageError);
  r.to = 2;
  r.alpha_rep = -1;
  CHECK_THROWS_AS(r.validate(3), UsageError);
  CHECK_THROWS_AS(apply_rule(Tensor::identity(3), r, 1.0), UsageError);
}

TEST_CASE("apply_rule edits exactly the specified entries") {
  Rng rng(1);
  Tensor h = symmetrized(rng.normal_tensor(4, 4));
  SurgicalRule r;
  r.from = 1;
  r.to = 3;
  CHECK(apply_rule(h, r, 0.0) == h);
  const double g = 0.7;
  Tensor e = apply_rule(h, r, g);
  CHECK((e - e.transposed()).max_abs() == 0.0);
  CHECK(e(1, 1) == h(1, 1) + g * r.alpha_rep);
  CHECK(e(1, 3) == h(1, 3) - g * r.tunnel_amp);
  CHECK(e(3, 1) == e(1, 3));
  CHECK(e(0, 0) == h(0, 0) - g * r.anchor_depth);
  CHECK(e(2, 2) == h(2, 2) - g * r.anchor_depth);
  CHECK(e(3, 3) == h(3, 3));
  CHECK(e(0, 2) == h(0, 2));
}

TEST_CASE("reverting the edit log restores H bit-exactly") {
  Rng rng(2);
  Tensor h = symmetrized(rng.normal_tensor(5, 5));
  SurgicalRule r;
  r.from = 4;
  r.to = 0;
  HamiltonianEdit log;
  Tensor e = apply_rule(h, r, 0.37, &log);
  CHECK(e != h);
  CHECK(revert_rule(e, log) == h);
}

TEST_CASE("strong repulsion and tunneling move mass out of the source") {
  // Diagonal 3-class toy: class 0 has the lowest potential.
  Tensor h = Tensor::diag(std::vector<double>{0.0, 1.0, 2.0});
  SurgicalRule r;
  r.from = 0;
  r.to = 2;
  r.alpha_rep = 100;
  r.tunnel_amp = 0.5;
  r.anchor_depth = 0.0;
  Prediction before = predict_from_h(h);
  Prediction after = predict_from_h(apply_rule(h, r, 1.0));
  CHECK(before.probs[0] == 1.0);
  CHECK(after.probs[0] < 1e-3);
  CHECK(after.label != 0);
}

TEST_CASE("no-op rule reproduces the baseline exactly") {
  const auto& f = frozen();
  RuleBook noop;
  noop.defaults.alpha_rep = noop.defaults.tunnel_amp = noop.defaults.anchor_depth = 0.0;
  SurgeryTables t = evaluate_rules(f.model, f.test, noop);
  for (std::size_t i = 0; i < 10; ++i)
    for (std::size_t j = 0; j < 10; ++j) {
      if (i == j) continue;
      CHECK(t.compliance(i, j) == t.base_confusion(i, j));
      CHECK(t.stability(i, j) == t.base_stability[i]);
    }
}

TEST_CASE("compliance grows with tunneling and anchoring protects stability") {
  const auto& f = frozen();
  const double u = potential_unit(f.model, f.test);
  RuleBook book;
  book.defaults = desk_rule_defaults();
  book.unit = u;
  double prev = -1;
  for (double amp : {0.0, 2.5, 5.0, 10.0, 20.0}) {
    book.defaults.tunnel_amp = amp;
    const double c = mean_offdiag_cells(evaluate_rules(f.model, f.test, book).compliance);
    CHECK(c >= prev);
    prev = c;
  }
  book.defaults = desk_rule_defaults();
  const double with_anchor = mean_offdiag_cells(evaluate_rules(f.model, f.test, book).stability);
  book.defaults.anchor_depth = 0.0;
  const double without = mean_offdiag_cells(evaluate_rules(f.model, f.test, book).stability);
  CHECK(with_anchor >= without);
}

TEST_CASE("tuned desk defaults reroute most inputs") {
  const auto& f = frozen();
  RuleBook book;
  book.defaults = desk_rule_defaults();
  book.unit = potential_unit(f.model, f.test);
  SurgeryTables t = evaluate_rules(f.model, f.test, book);
  double rel = 0;
  for (std::size_t i = 0; i < 10; ++i)
    for (std::size_t j = 0; j < 10; ++j)
      if (i != j) rel += t.compliance(i, j) / t.base_class_accuracy[i];
  CHECK(rel / 90 >= 0.7);
  CHECK(t.base_accuracy - mean_offdiag_cells(t.stability) <= 0.10);
}

TEST_CASE("matrix CSV shape") {
  Tensor m(3, 3, std::nan(""));
  m(0, 1) = 0.5;
  m(2, 0) = 0.25;
  std::string csv = matrix_csv(m, {"a", "b", "c"}, "from\\to");
  CHECK(csv ==
        "from\\to,a,b,c\n"
        "a,,0.500000,\n"
        "b,,,\n"
        "c,0.250000,,\n");
}

TEST_CASE("rules file and FROM:TO parsing") {
  const std::vector<std::string> names{"cat", "dog", "frog"};
  json j = json::parse(R"({"unit": 2.0, "defaults": {"alpha_rep": 3},
                           "rules": [{"from": "dog", "to": "cat", "tunnel_amp": 7}, {"from": 2, "to": 0}]})");
  RuleBook b = parse_rules(j, names);
  CHECK(b.unit == 2.0);
  SurgicalRule dc = b.rule_for(1, 0);
  CHECK(dc.alpha_rep == 6.0);
  CHECK(dc.tunnel_amp == 14.0);
  SurgicalRule other = b.rule_for(0, 2);
  CHECK(other.from == 0);
  CHECK(other.alpha_rep == 6.0);
  CHECK(parse_rule_spec("dog:cat", names).from == 1);
  CHECK(parse_rule_spec("2:1", names).to == 1);
  CHECK_THROWS_AS(parse_rule_spec("dog-cat", names), UsageError);
  CHECK_THROWS_AS(parse_rule_spec("dog:horse", names), UsageError);
  CHECK_THROWS_AS(parse_rules(json::parse(R"({"rules": [{"from": "dog", "to": "dog"}]})"), names), UsageError);
}

}  // TEST_SUITE
