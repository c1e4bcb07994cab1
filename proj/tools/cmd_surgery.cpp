#include <cstdio>
#include <sstream>

#include "cli.hpp"
#include "commands.hpp"
#include "hamil/dataset.hpp"
#include "hamil/error.hpp"
#include "hamil/surgery.hpp"

namespace hamil::cli {

namespace {

json rule_knobs() {
  const SurgicalRule r = desk_rule_defaults();
  return json{{"alpha_rep", r.alpha_rep},
              {"tunnel_amp", r.tunnel_amp},
              {"anchor_depth", r.anchor_depth},
              {"gate_midpoint", r.gate.midpoint},
              {"gate_slope", r.gate.slope}};
}

struct Loaded {
  HamiltonianClassifier model;
  Dataset data;
  RuleBook book;
};

Loaded load(const json& cfg) {
  auto model = HamiltonianClassifier::load(input_path(cfg, "model", "model"));
  Dataset data = load_dataset(input_path(cfg, "data", "dataset"));
  if (data.dim() != model.config().input_dim) throw UsageError("dataset dimension does not match the model");
  if (data.class_names != model.class_names()) throw UsageError("dataset classes do not match the model");
  RuleBook book;
  const std::string rules = cfg.at("rules");
  if (!rules.empty()) book = read_rules(input_path(cfg, "rules", "rule file"), model.class_names());
  // Flags override the file's defaults only where given; the resolved
  // section always holds the effective values.
  const json& k = cfg.at("knobs");
  if (rules.empty()) {
    book.defaults.alpha_rep = k.at("alpha_rep");
    book.defaults.tunnel_amp = k.at("tunnel_amp");
    book.defaults.anchor_depth = k.at("anchor_depth");
    book.defaults.gate.midpoint = k.at("gate_midpoint");
    book.defaults.gate.slope = k.at("gate_slope");
  }
  const double unit = cfg.at("unit");
  if (unit < 0) throw UsageError("unit must be >= 0 (0: derive from the data)");
  if (unit > 0) {
    book.unit = unit;
  } else if (rules.empty() || book.unit == 1.0) {
    book.unit = potential_unit(model, data);
  }
  return Loaded{std::move(model), std::move(data), std::move(book)};
}

double mean_offdiag_finite(const Tensor& m) {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j)
      if (i != j) {
        s += m(i, j);
        ++n;
      }
  return n ? s / static_cast<double>(n) : 0.0;
}

int matrix(const json& cfg) {
  const Loaded l = load(cfg);
  const RunDir run(cfg);
  print_header(cfg, &run);
  const SurgeryTables t = evaluate_rules(l.model, l.data, l.book);
  run.csv("compliance.csv", matrix_csv(t.compliance, t.class_names, "from\\to"));
  run.csv("stability.csv", matrix_csv(t.stability, t.class_names, "from\\to"));
  run.csv("base_confusion.csv", matrix_csv(t.base_confusion, t.class_names, "truth\\pred"));
  std::printf("unit: %s\nbase-accuracy: %s\nmean-compliance: %s\nmean-stability: %s\n", fixed(l.book.unit, 6).c_str(),
              fixed(t.base_accuracy).c_str(), fixed(mean_offdiag_finite(t.compliance)).c_str(),
              fixed(mean_offdiag_finite(t.stability)).c_str());
  return 0;
}

int single(const json& cfg) {
  Loaded l = load(cfg);
  const std::string spec = cfg.at("rule");
  if (spec.empty()) throw UsageError("a rule is required (--rule FROM:TO)");
  const auto& names = l.model.class_names();
  const SurgicalRule parsed = parse_rule_spec(spec, names, l.book.defaults);
  l.book.overrides = {parsed};
  const SurgicalRule rule = l.book.rule_for(parsed.from, parsed.to);
  const RunDir run(cfg);
  print_header(cfg, &run);

  const std::size_t c = names.size();
  std::vector<std::size_t> count(c, 0), base_ok(c, 0), edit_ok(c, 0), base_to(c, 0), edit_to(c, 0);
  std::size_t changed = 0, gated = 0;
  for (std::size_t n = 0; n < l.data.size(); ++n) {
    const auto rp = predict_with_rule(l.model.parts(l.data.sample(n)), rule);
    const std::size_t y = l.data.y[n];
    ++count[y];
    base_ok[y] += rp.base.label == y;
    edit_ok[y] += rp.edited.label == y;
    base_to[y] += rp.base.label == rule.to;
    edit_to[y] += rp.edited.label == rule.to;
    changed += rp.base.label != rp.edited.label;
    gated += rp.gate > 0.5;
  }
  std::ostringstream csv;
  csv << "class,samples,base_accuracy,ruled_accuracy,base_to_target,ruled_to_target\n";
  auto frac = [](std::size_t a, std::size_t b) { return b ? static_cast<double>(a) / static_cast<double>(b) : 0.0; };
  std::size_t others = 0, kept = 0, base_kept = 0;
  for (std::size_t i = 0; i < c; ++i) {
    csv << names[i] << ',' << count[i] << ',' << frac(base_ok[i], count[i]) << ',' << frac(edit_ok[i], count[i]) << ','
        << frac(base_to[i], count[i]) << ',' << frac(edit_to[i], count[i]) << '\n';
    if (i != rule.from) {
      others += count[i];
      kept += edit_ok[i];
      base_kept += base_ok[i];
    }
  }
  run.csv("single.csv", csv.str());
  std::printf("rule: %s -> %s\nunit: %s\n", names[rule.from].c_str(), names[rule.to].c_str(),
              fixed(l.book.unit, 6).c_str());
  std::printf("compliance: %s (base %s)\nstability: %s (base %s)\n",
              fixed(frac(edit_to[rule.from], count[rule.from])).c_str(),
              fixed(frac(base_to[rule.from], count[rule.from])).c_str(), fixed(frac(kept, others)).c_str(),
              fixed(frac(base_kept, others)).c_str());
  std::printf("changed-predictions: %zu\ngate-open: %zu\n", changed, gated);
  return 0;
}

}  // namespace

void add_surgery(CLI::App& root) {
  CLI::App* app = root.add_subcommand("surgery", "Inference-time rule surgery on a trained classifier");
  app->require_subcommand(1);
  json m{{"seed", 42}, {"out", "runs"}, {"model", ""}, {"data", ""}, {"rules", ""}, {"unit", 0.0}};
  m["knobs"] = rule_knobs();
  add_command(*app, {"matrix", "Compliance and stability over every ordered class pair", m, matrix});
  json s = m;
  s["rule"] = "";
  add_command(*app, {"single", "Apply one FROM:TO rule and report its effect per class", s, single});
}

}  // namespace hamil::cli
