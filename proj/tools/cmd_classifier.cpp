#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "commands.hpp"
#include "hamil/classifier.hpp"
#include "hamil/dataset.hpp"
#include "hamil/error.hpp"
#include "hamil/surgery.hpp"

namespace hamil::cli {

namespace {

json synthetic_knobs() {
  const SyntheticSpec s;
  return json{{"per_class", s.per_class}, {"dim", s.dim}, {"noise", s.noise}};
}

json model_knobs() {
  json j = ClassifierConfig{}.to_json();
  j.erase("input_dim");
  j.erase("classes");
  j.erase("seed");
  return j;
}

Dataset synthetic(const json& cfg) {
  const json& s = cfg.at("synthetic");
  SyntheticSpec spec;
  spec.per_class = s.at("per_class");
  spec.dim = s.at("dim");
  spec.noise = s.at("noise");
  spec.seed = cfg.at("seed");
  if (spec.per_class == 0 || spec.dim == 0) throw UsageError("synthetic data needs per_class and dim above 0");
  return make_synthetic(spec);
}

Dataset data_or_synthetic(const json& cfg) {
  if (!optional_path(cfg, "data").empty()) return load_dataset(input_path(cfg, "data", "dataset"));
  return synthetic(cfg);
}

void write_dataset(const RunDir& run, const std::string& name, const Dataset& d) {
  write_csv(run.file(name), d);
  std::ofstream(run.file(name), std::ios::app) << "# config-hash: " << run.hash() << '\n';
}

double tau_value(const json& cfg, const Tensor& w) {
  const std::string t = cfg.at("tau");
  if (t == "mean") return mean_offdiag(w);
  try {
    std::size_t used = 0;
    const double v = std::stod(t, &used);
    if (used == t.size() && std::isfinite(v)) return v;
  } catch (const std::exception&) {
  }
  throw UsageError("--tau must be a number or 'mean', got '" + t + "'");
}

double entropy(const std::vector<double>& p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0) h -= v * std::log(v);
  return h;
}

int make_data(const json& cfg) {
  const RunDir run(cfg);
  print_header(cfg, &run);
  const Dataset d = synthetic(cfg);
  const auto [train, test] = split(d, cfg.at("test_fraction"), cfg.at("seed"));
  write_dataset(run, "data.csv", d);
  write_dataset(run, "train.csv", train);
  write_dataset(run, "test.csv", test);
  std::printf("samples: %zu (train %zu, test %zu)\nclasses: %zu\ndim: %zu\n", d.size(), train.size(), test.size(),
              d.classes(), d.dim());
  return 0;
}

int train(const json& cfg) {
  const Dataset d = data_or_synthetic(cfg);
  const double tf = cfg.at("test_fraction");
  if (!(tf > 0.0 && tf < 1.0)) throw UsageError("test_fraction must be in (0, 1)");
  const RunDir run(cfg);
  print_header(cfg, &run);
  const auto [tr, te] = split(d, tf, cfg.at("seed"));
  ClassifierConfig c = ClassifierConfig::from_json(cfg.at("model"));
  c.input_dim = d.dim();
  c.classes = d.classes();
  c.seed = cfg.at("seed");
  HamiltonianClassifier model(c);
  model.set_class_names(d.class_names);
  const TrainReport rep = train_classifier(model, tr, &te);

  run.json_file("model.json", model.to_json());
  write_dataset(run, "train.csv", tr);
  write_dataset(run, "test.csv", te);
  std::ostringstream loss;
  loss << "epoch,loss\n";
  for (std::size_t e = 0; e < rep.epoch_loss.size(); ++e) loss << e + 1 << ',' << rep.epoch_loss[e] << '\n';
  run.csv("loss.csv", loss.str());

  std::printf("epochs: %zu\nsteps: %zu\njitter-events: %zu\n", rep.epoch_loss.size(), rep.steps, rep.jitter_events);
  std::printf("final-loss: %s\n", fixed(rep.epoch_loss.empty() ? 0.0 : rep.epoch_loss.back(), 6).c_str());
  std::printf("train-accuracy: %s\ntest-accuracy: %s\nmajority-baseline: %s\n", fixed(rep.train_accuracy).c_str(),
              fixed(rep.test_accuracy).c_str(), fixed(te.majority_baseline()).c_str());
  std::printf("model: %s\n", run.file("model.json").string().c_str());
  return 0;
}

int eval(const json& cfg) {
  const auto model = HamiltonianClassifier::load(input_path(cfg, "model", "model"));
  const Dataset d = load_dataset(input_path(cfg, "data", "dataset"));
  if (d.dim() != model.config().input_dim) throw UsageError("dataset dimension does not match the model");
  const RunDir run(cfg);
  print_header(cfg, &run);
  const auto preds = model.predict_all(d.x);
  std::ostringstream csv;
  csv << "index,label,predicted,confidence,entropy,mass,gap\n";
  std::size_t correct = 0;
  double h_sum = 0.0, m_sum = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto& p = preds[i];
    const double h = entropy(p.probs);
    correct += p.label == d.y[i];
    h_sum += h;
    m_sum += p.mass;
    csv << i << ',' << model.class_names().at(d.y[i]) << ',' << model.class_names().at(p.label) << ','
        << p.probs[p.label] << ',' << h << ',' << p.mass << ',' << p.gap << '\n';
  }
  run.csv("predictions.csv", csv.str());
  const double n = static_cast<double>(preds.size());
  std::printf("samples: %zu\naccuracy: %s\nmean-entropy: %s\nmean-mass: %s\n", preds.size(),
              fixed(static_cast<double>(correct) / n).c_str(), fixed(h_sum / n).c_str(), fixed(m_sum / n).c_str());
  return 0;
}

int attack(const json& cfg) {
  const auto model = HamiltonianClassifier::load(input_path(cfg, "model", "model"));
  const Dataset d = load_dataset(input_path(cfg, "data", "dataset"));
  if (d.dim() != model.config().input_dim) throw UsageError("dataset dimension does not match the model");
  const json& a = cfg.at("attack");
  PgdOptions opt;
  opt.budget = a.at("budget");
  opt.steps = a.at("steps");
  opt.step_size = a.at("step_size");
  opt.random_start = a.at("random_start");
  opt.lo = a.at("lo");
  opt.hi = a.at("hi");
  opt.seed = cfg.at("seed");
  if (opt.budget < 0 || !(opt.hi > opt.lo)) throw UsageError("attack needs budget >= 0 and hi > lo");
  const Tensor w = model.w();
  const double tau = tau_value(cfg, w);
  const RunDir run(cfg);
  print_header(cfg, &run);

  const Tensor adv = pgd_attack(model, d.x, d.y, opt);
  const auto clean = model.predict_all(d.x);
  const auto dirty = model.predict_all(adv);
  std::vector<std::size_t> pred;
  std::size_t c_ok = 0, a_ok = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    c_ok += clean[i].label == d.y[i];
    a_ok += dirty[i].label == d.y[i];
    pred.push_back(dirty[i].label);
  }
  const auto hist = graph_distance_histogram(w, d.y, pred, tau);
  std::ostringstream csv;
  csv << "distance,count\n";
  for (const auto& [dist, count] : hist) csv << dist << ',' << count << '\n';
  run.csv("distance_histogram.csv", csv.str());

  const double n = static_cast<double>(d.size());
  std::printf("clean-accuracy: %s\nadversarial-accuracy: %s\ntau: %s\n", fixed(static_cast<double>(c_ok) / n).c_str(),
              fixed(static_cast<double>(a_ok) / n).c_str(), fixed(tau, 6).c_str());
  for (const auto& [dist, count] : hist) std::printf("distance %d: %zu\n", dist, count);
  return 0;
}

int topology(const json& cfg) {
  const auto model = HamiltonianClassifier::load(input_path(cfg, "model", "model"));
  const Tensor w = model.w();
  const double tau = tau_value(cfg, w);
  const RunDir run(cfg);
  print_header(cfg, &run);
  const auto& names = model.class_names();
  run.csv("w.csv", matrix_csv(w, names, "class"));
  std::ostringstream csv;
  csv << "i,j,from,to,weight\n";
  std::size_t edges = 0;
  double asym = 0.0;
  for (std::size_t i = 0; i < w.rows(); ++i) {
    for (std::size_t j = 0; j < w.cols(); ++j) {
      asym = std::max(asym, std::abs(w(i, j) - w(j, i)));
      if (j > i && w(i, j) > tau) {
        csv << i << ',' << j << ',' << names.at(i) << ',' << names.at(j) << ',' << w(i, j) << '\n';
        ++edges;
      }
    }
  }
  run.csv("edges.csv", csv.str());
  const auto chk = check_laplacian(w, model.k());
  std::printf("tau: %s\nedges: %zu\nmax-asymmetry: %g\nlaplacian-ok: %s\n", fixed(tau, 6).c_str(), edges, asym,
              chk.ok() ? "yes" : "no");
  return 0;
}

}  // namespace

void add_classifier(CLI::App& root) {
  CLI::App* app = root.add_subcommand("classifier", "Hamiltonian classifier: data, training, evaluation, attacks");
  app->require_subcommand(1);
  const json base{{"seed", 42}, {"out", "runs"}};

  json md = base;
  md["synthetic"] = synthetic_knobs();
  md["test_fraction"] = 0.2;
  add_command(*app, {"make-data", "Write a synthetic ten-class dataset", md, make_data});

  json tr = md;
  tr["data"] = "";
  tr["model"] = model_knobs();
  add_command(*app, {"train", "Train on --data (or synthetic data) and save model.json", tr, train});

  json ev = base;
  ev["model"] = "";
  ev["data"] = "";
  add_command(*app, {"eval", "Accuracy, mean entropy and mean mass of a saved model", ev, eval});

  json at = ev;
  const PgdOptions po;
  at["attack"] = json{{"budget", po.budget}, {"steps", po.steps},           {"step_size", po.step_size},
                      {"random_start", po.random_start}, {"lo", po.lo}, {"hi", po.hi}};
  at["tau"] = "mean";
  add_command(*app, {"attack", "PGD attack and graph-distance histogram of the induced errors", at, attack});

  json tp = base;
  tp["model"] = "";
  tp["tau"] = "mean";
  add_command(*app, {"topology", "Dump W as CSV and its thresholded edge list", tp, topology});
}

}  // namespace hamil::cli
