#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "hamil/classifier.hpp"

namespace hamil {

struct Gate {
  double midpoint = 0.3;
  double slope = 10.0;
};

/// Inference-time edit that reroutes class `from` toward class `to`.
struct SurgicalRule {
  std::size_t from = 0;
  std::size_t to = 1;
  double alpha_rep = 5.0;     // potential boost on `from`
  double tunnel_amp = 2.0;    // extra negative coupling from <-> to
  double anchor_depth = 1.0;  // potential deepening of the other classes
  Gate gate;

  /// Throws UsageError if the rule is malformed for `classes` classes.
  void validate(std::size_t classes) const;
  json to_json(const std::vector<std::string>& names) const;
};

/// sigma(slope * (p[from] - midpoint)).
double gate_strength(std::span<const double> probs, const SurgicalRule& rule);

/// One overwritten entry of H.
struct EntryEdit {
  std::size_t row, col;
  double before, after;
};
using HamiltonianEdit = std::vector<EntryEdit>;

/// H' with the rule applied at strength g. The edit log lets revert_rule
/// restore the original entries exactly.
Tensor apply_rule(const Tensor& h, const SurgicalRule& rule, double g, HamiltonianEdit* log = nullptr);
Tensor revert_rule(const Tensor& h_edited, const HamiltonianEdit& log);

/// Prediction for one input under the rule, gated on the unedited prediction.
struct RuledPrediction {
  Prediction base;
  Prediction edited;
  double gate = 0.0;
};
RuledPrediction predict_with_rule(const HamiltonianParts& parts, const SurgicalRule& rule);

/// Defaults plus per-pair overrides, as read from a rules file.
struct RuleBook {
  SurgicalRule defaults;
  std::vector<SurgicalRule> overrides;
  /// alpha_rep, tunnel_amp and anchor_depth are multiplied by this energy
  /// unit before use (1 = absolute H units).
  double unit = 1.0;
  /// The rule used for (from, to): an override if present, else the defaults.
  SurgicalRule rule_for(std::size_t from, std::size_t to) const;
};

/// Rules file: {"defaults": {...knobs}, "rules": [{"from": "dog", "to": "cat", ...knobs}]}.
/// Class references may be names or indices.
RuleBook read_rules(const std::filesystem::path& p, const std::vector<std::string>& class_names);
RuleBook parse_rules(const json& j, const std::vector<std::string>& class_names);
/// Tuned knob values for trained desk models, in units of potential_unit().
SurgicalRule desk_rule_defaults();
/// Mean gap between the two lowest potentials over `data`: the typical
/// energy separating a prediction from its runner-up.
double potential_unit(const HamiltonianClassifier& model, const Dataset& data);
/// Copy of `r` with the energy knobs multiplied by `unit`.
SurgicalRule scaled(const SurgicalRule& r, double unit);

/// "dog:cat" -> rule with default knobs.
SurgicalRule parse_rule_spec(const std::string& spec, const std::vector<std::string>& class_names,
                             const SurgicalRule& defaults = {});

struct SurgeryTables {
  std::vector<std::string> class_names;
  Tensor compliance;  // C x C, NaN on the diagonal
  Tensor stability;   // C x C, NaN on the diagonal
  Tensor base_confusion;  // row-normalized confusion without any rule
  double base_accuracy = 0.0;
  std::vector<double> base_class_accuracy;
  std::vector<double> base_stability;  // accuracy over classes != i without a rule
};

/// Evaluates every ordered pair (i, j), i != j, under rule i -> j.
SurgeryTables evaluate_rules(const HamiltonianClassifier& model, const Dataset& data, const RuleBook& book);

/// CSV with a header row and column of class names; diagonal cells blank.
std::string matrix_csv(const Tensor& m, const std::vector<std::string>& names, const std::string& corner);

}  // namespace hamil
