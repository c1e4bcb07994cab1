#include "hamil/surgery.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "hamil/error.hpp"

namespace hamil {

void SurgicalRule::validate(std::size_t classes) const {
  if (from >= classes || to >= classes) throw UsageError("rule class index out of range");
  if (from == to) throw UsageError("rule source and target must differ");
  if (alpha_rep < 0) throw UsageError("repulsion must be non-negative");
  if (anchor_depth < 0) throw UsageError("anchor depth must be non-negative");
  if (!std::isfinite(tunnel_amp) || !std::isfinite(gate.midpoint) || !std::isfinite(gate.slope)) {
    throw UsageError("rule parameters must be finite");
  }
}

json SurgicalRule::to_json(const std::vector<std::string>& names) const {
  auto name = [&](std::size_t i) { return i < names.size() ? json(names[i]) : json(i); };
  return json{{"from", name(from)},
              {"to", name(to)},
              {"alpha_rep", alpha_rep},
              {"tunnel_amp", tunnel_amp},
              {"anchor_depth", anchor_depth},
              {"gate_midpoint", gate.midpoint},
              {"gate_slope", gate.slope}};
}

double gate_strength(std::span<const double> probs, const SurgicalRule& rule) {
  if (rule.from >= probs.size()) throw UsageError("rule source outside the prediction");
  const double z = rule.gate.slope * (probs[rule.from] - rule.gate.midpoint);
  return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

Tensor apply_rule(const Tensor& h, const SurgicalRule& rule, double g, HamiltonianEdit* log) {
  if (!h.is_square()) throw ShapeError("apply_rule needs a square Hamiltonian");
  rule.validate(h.rows());
  Tensor out = h;
  auto set = [&](std::size_t r, std::size_t c, double v) {
    if (log) log->push_back({r, c, out(r, c), v});
    out(r, c) = v;
  };
  if (g == 0.0) return out;
  const std::size_t f = rule.from, t = rule.to;
  set(f, f, h(f, f) + g * rule.alpha_rep);
  const double coupling = h(f, t) - g * rule.tunnel_amp;
  set(f, t, coupling);
  set(t, f, coupling);
  for (std::size_t c = 0; c < h.rows(); ++c)
    if (c != f && c != t) set(c, c, h(c, c) - g * rule.anchor_depth);
  return out;
}

Tensor revert_rule(const Tensor& h_edited, const HamiltonianEdit& log) {
  Tensor out = h_edited;
  for (auto it = log.rbegin(); it != log.rend(); ++it) out(it->row, it->col) = it->before;
  return out;
}

RuledPrediction predict_with_rule(const HamiltonianParts& parts, const SurgicalRule& rule) {
  RuledPrediction r;
  const Tensor h = build_h(parts);
  r.base = predict_from_h(h);
  r.gate = gate_strength(r.base.probs, rule);
  r.edited = predict_from_h(apply_rule(h, rule, r.gate));
  r.base.mass = r.edited.mass = parts.mass;
  r.base.potential = r.edited.potential = parts.v;
  return r;
}

SurgicalRule RuleBook::rule_for(std::size_t from, std::size_t to) const {
  for (const auto& r : overrides)
    if (r.from == from && r.to == to) return scaled(r, unit);
  SurgicalRule r = defaults;
  r.from = from;
  r.to = to;
  return scaled(r, unit);
}

SurgicalRule desk_rule_defaults() {
  SurgicalRule r;
  r.alpha_rep = 10.0;
  r.tunnel_amp = 10.0;
  r.anchor_depth = 0.5;
  return r;
}

SurgicalRule scaled(const SurgicalRule& r, double unit) {
  if (!(unit > 0) || !std::isfinite(unit)) throw UsageError("rule energy unit must be positive");
  SurgicalRule s = r;
  s.alpha_rep *= unit;
  s.tunnel_amp *= unit;
  s.anchor_depth *= unit;
  return s;
}

double potential_unit(const HamiltonianClassifier& model, const Dataset& data) {
  if (data.size() == 0) throw UsageError("potential unit needs a non-empty dataset");
  if (model.config().classes < 2) return 1.0;
  const Tensor pot = model.potential(model.embed(data.x));
  double total = 0.0;
  for (std::size_t n = 0; n < pot.rows(); ++n) {
    std::vector<double> v(pot.row_span(n).begin(), pot.row_span(n).end());
    std::partial_sort(v.begin(), v.begin() + 2, v.end());
    total += v[1] - v[0];
  }
  const double u = total / static_cast<double>(pot.rows());
  return u > 0 ? u : 1.0;
}

namespace {

std::size_t class_ref(const json& v, const std::vector<std::string>& names) {
  if (v.is_number_unsigned()) {
    const auto i = v.get<std::size_t>();
    if (i >= names.size()) throw UsageError("class index " + std::to_string(i) + " out of range");
    return i;
  }
  if (v.is_string()) {
    const auto s = v.get<std::string>();
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == s) return i;
    throw UsageError("unknown class '" + s + "'");
  }
  throw UsageError("class reference must be a name or an index");
}

void read_knobs(const json& j, SurgicalRule& r) {
  r.alpha_rep = j.value("alpha_rep", r.alpha_rep);
  r.tunnel_amp = j.value("tunnel_amp", r.tunnel_amp);
  r.anchor_depth = j.value("anchor_depth", r.anchor_depth);
  r.gate.midpoint = j.value("gate_midpoint", r.gate.midpoint);
  r.gate.slope = j.value("gate_slope", r.gate.slope);
}

}  // namespace

RuleBook parse_rules(const json& j, const std::vector<std::string>& class_names) {
  RuleBook book;
  if (j.contains("defaults")) read_knobs(j.at("defaults"), book.defaults);
  if (j.contains("unit")) book.unit = j.at("unit").get<double>();
  if (j.contains("rules")) {
    for (const auto& rj : j.at("rules")) {
      SurgicalRule r = book.defaults;
      r.from = class_ref(rj.at("from"), class_names);
      r.to = class_ref(rj.at("to"), class_names);
      read_knobs(rj, r);
      r.validate(class_names.size());
      book.overrides.push_back(r);
    }
  }
  return book;
}

RuleBook read_rules(const std::filesystem::path& p, const std::vector<std::string>& class_names) {
  return parse_rules(read_json_file(p), class_names);
}

SurgicalRule parse_rule_spec(const std::string& spec, const std::vector<std::string>& class_names,
                             const SurgicalRule& defaults) {
  const auto colon = spec.find(':');
  if (colon == std::string::npos) throw UsageError("rule must look like FROM:TO, got '" + spec + "'");
  auto ref = [&](const std::string& s) {
    if (!s.empty() && s.find_first_not_of("0123456789") == std::string::npos) return class_ref(json(std::stoul(s)), class_names);
    return class_ref(json(s), class_names);
  };
  SurgicalRule r = defaults;
  r.from = ref(spec.substr(0, colon));
  r.to = ref(spec.substr(colon + 1));
  r.validate(class_names.size());
  return r;
}

SurgeryTables evaluate_rules(const HamiltonianClassifier& model, const Dataset& data, const RuleBook& book) {
  const std::size_t c = model.config().classes;
  if (data.size() == 0) throw UsageError("surgery evaluation needs a non-empty dataset");
  const auto counts = data.class_counts();
  for (std::size_t i = 0; i < c; ++i)
    if (counts.at(i) == 0) throw UsageError("class '" + data.class_names[i] + "' has no samples");

  const Tensor k = model.k();
  const Tensor emb = model.embed(data.x);
  const Tensor pot = model.potential(emb);
  std::vector<Tensor> hs;
  std::vector<Prediction> base;
  for (std::size_t n = 0; n < data.size(); ++n) {
    HamiltonianParts parts{k, std::vector<double>(pot.row_span(n).begin(), pot.row_span(n).end()),
                           model.mass(Tensor::row(emb.row_span(n))), model.config().eps};
    hs.push_back(build_h(parts));
    base.push_back(predict_from_h(hs.back()));
  }

  SurgeryTables t;
  t.class_names = model.class_names();
  const double nan = std::numeric_limits<double>::quiet_NaN();
  t.compliance = Tensor(c, c, nan);
  t.stability = Tensor(c, c, nan);
  t.base_confusion = Tensor(c, c);
  t.base_class_accuracy.assign(c, 0.0);
  std::size_t correct = 0;
  for (std::size_t n = 0; n < data.size(); ++n) {
    t.base_confusion(data.y[n], base[n].label) += 1.0;
    correct += base[n].label == data.y[n];
  }
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = 0; j < c; ++j) t.base_confusion(i, j) /= static_cast<double>(counts[i]);
  for (std::size_t i = 0; i < c; ++i) t.base_class_accuracy[i] = t.base_confusion(i, i);
  for (std::size_t i = 0; i < c; ++i) {
    std::size_t kept = 0, others = 0;
    for (std::size_t n = 0; n < data.size(); ++n) {
      if (data.y[n] == i) continue;
      ++others;
      kept += base[n].label == data.y[n];
    }
    t.base_stability.push_back(others ? static_cast<double>(kept) / static_cast<double>(others) : nan);
  }
  t.base_accuracy = static_cast<double>(correct) / static_cast<double>(data.size());

  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      if (i == j) continue;
      const SurgicalRule rule = book.rule_for(i, j);
      std::size_t hit = 0, kept = 0, others = 0;
      for (std::size_t n = 0; n < data.size(); ++n) {
        const double g = gate_strength(base[n].probs, rule);
        const std::size_t label = g == 0.0 ? base[n].label : predict_from_h(apply_rule(hs[n], rule, g)).label;
        if (data.y[n] == i) {
          hit += label == j;
        } else {
          ++others;
          kept += label == data.y[n];
        }
      }
      t.compliance(i, j) = static_cast<double>(hit) / static_cast<double>(counts[i]);
      t.stability(i, j) = others ? static_cast<double>(kept) / static_cast<double>(others) : nan;
    }
  }
  return t;
}

std::string matrix_csv(const Tensor& m, const std::vector<std::string>& names, const std::string& corner) {
  std::ostringstream os;
  os.precision(6);
  os << corner;
  for (const auto& n : names) os << ',' << n;
  os << '\n';
  for (std::size_t i = 0; i < m.rows(); ++i) {
    os << names.at(i);
    for (std::size_t j = 0; j < m.cols(); ++j) {
      os << ',';
      if (std::isfinite(m(i, j))) os << std::fixed << m(i, j) << std::defaultfloat;
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace hamil
