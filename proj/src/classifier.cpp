#include "hamil/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>

#include "hamil/error.hpp"

namespace hamil {

json ClassifierConfig::to_json() const {
  return json{{"input_dim", input_dim}, {"hidden", hidden},     {"embed", embed},
              {"classes", classes},     {"mass_rank", mass_rank}, {"eps", eps},
              {"lambda_m", lambda_m},   {"lambda_k", lambda_k}, {"theta_offset", theta_offset},
              {"theta_sd", theta_sd},   {"lr", lr},             {"epochs", epochs},
              {"batch", batch},         {"seed", seed}};
}

ClassifierConfig ClassifierConfig::from_json(const json& j) {
  ClassifierConfig c;
  c.input_dim = j.value("input_dim", c.input_dim);
  c.hidden = j.value("hidden", c.hidden);
  c.embed = j.value("embed", c.embed);
  c.classes = j.value("classes", c.classes);
  c.mass_rank = j.value("mass_rank", c.mass_rank);
  c.eps = j.value("eps", c.eps);
  c.lambda_m = j.value("lambda_m", c.lambda_m);
  c.lambda_k = j.value("lambda_k", c.lambda_k);
  c.theta_offset = j.value("theta_offset", c.theta_offset);
  c.theta_sd = j.value("theta_sd", c.theta_sd);
  c.lr = j.value("lr", c.lr);
  c.epochs = j.value("epochs", c.epochs);
  c.batch = j.value("batch", c.batch);
  c.seed = j.value("seed", c.seed);
  return c;
}

// ---- shared maps ------------------------------------------------------------

namespace {

double sigmoid_d(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus_d(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

Tensor offdiag_mask(std::size_t c) {
  Tensor m(c, c, 1.0);
  for (std::size_t i = 0; i < c; ++i) m(i, i) = 0.0;
  return m;
}

}  // namespace

Var topology_w(const Var& theta) {
  Var sym = scale(add(theta, transpose(theta)), 0.5);
  return mul(softplus(sym), theta.tape()->constant(offdiag_mask(theta.rows())));
}

Var laplacian(const Var& w) { return sub(diag_embed(sum_rows(w)), w); }

Var mass_from_logit(const Var& s) { return add_scalar(scale(sigmoid(s), 9.95), 0.05); }

Var hamiltonian(const Var& k, const Var& v_row, const Var& mass, double eps) {
  Tape& t = *k.tape();
  Var keps = add(k, t.constant(eps * Tensor::identity(k.rows())));
  return add(mul_scalar(keps, reciprocal(mass)), diag_embed(v_row));
}

Var classifier_loss(const Var& probs, std::size_t label, const Var& mass, const Var& w, double lambda_m,
                    double lambda_k) {
  if (label >= probs.rows()) throw ShapeError("label out of range");
  Var nll = neg(log(clamp_min(slice(probs, label, 1, 0, 1), 1e-12)));
  Var out = add(nll, scale(square(mass), lambda_m));
  return add(out, scale(sum(w), lambda_k));
}

Tensor topology_w(const Tensor& theta) {
  const std::size_t c = theta.rows();
  Tensor w(c, c);
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = 0; j < c; ++j)
      if (i != j) w(i, j) = softplus_d(0.5 * (theta(i, j) + theta(j, i)));
  return w;
}

Tensor laplacian(const Tensor& w) {
  const std::size_t c = w.rows();
  Tensor k(c, c);
  for (std::size_t i = 0; i < c; ++i) {
    double d = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      d += w(i, j);
      k(i, j) = -w(i, j);
    }
    k(i, i) = d - w(i, i);
  }
  return k;
}

double mass_from_logit(double s) { return 0.05 + 9.95 * sigmoid_d(s); }

Tensor build_h(const HamiltonianParts& parts) {
  if (!(parts.mass > 0)) throw NumericError("Hamiltonian mass must be positive");
  const std::size_t c = parts.k.rows();
  if (parts.v.size() != c) throw ShapeError("potential length does not match K");
  Tensor h(c, c);
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t j = 0; j < c; ++j) h(i, j) = parts.k(i, j) / parts.mass;
    h(i, i) += parts.eps / parts.mass + parts.v[i];
  }
  return h;
}

Prediction predict_from_parts(const HamiltonianParts& parts) {
  Prediction p = predict_from_h(build_h(parts));
  p.potential = parts.v;
  p.mass = parts.mass;
  return p;
}

Prediction predict_from_h(const Tensor& h) {
  Spectrum s = sym_eig(h);
  Prediction p;
  p.energies = s.energies;
  p.gap = s.gap();
  p.probs = born(s.state(0));
  std::vector<std::size_t> order(p.probs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return p.probs[a] > p.probs[b]; });
  p.label = order[0];
  p.runner_up = order.size() > 1 ? order[1] : order[0];
  return p;
}

// ---- model ------------------------------------------------------------------

HamiltonianClassifier::HamiltonianClassifier(ClassifierConfig cfg) : cfg_(cfg) {
  Rng rng(cfg_.seed);
  auto he = [&](std::size_t in, std::size_t out, double gain) {
    return rng.normal_tensor(in, out, 0.0, gain / std::sqrt(static_cast<double>(in)));
  };
  params_.add("enc.w1", he(cfg_.input_dim, cfg_.hidden, std::sqrt(2.0)));
  params_.add("enc.b1", Tensor(1, cfg_.hidden));
  params_.add("enc.w2", he(cfg_.hidden, cfg_.hidden, std::sqrt(2.0)));
  params_.add("enc.b2", Tensor(1, cfg_.hidden));
  params_.add("enc.w3", he(cfg_.hidden, cfg_.embed, 1.0));
  params_.add("enc.b3", Tensor(1, cfg_.embed));
  params_.add("head.wv", he(cfg_.embed, cfg_.classes, 1.0));
  params_.add("head.mass_m", he(cfg_.embed, cfg_.mass_rank, 1.0));
  params_.add("head.mass_w", he(cfg_.mass_rank, 1, 1.0));
  params_.add("head.theta", rng.normal_tensor(cfg_.classes, cfg_.classes, cfg_.theta_offset, cfg_.theta_sd));
  for (std::size_t i = 0; i < cfg_.classes; ++i) class_names_.push_back(std::to_string(i));
}

HamiltonianClassifier::HamiltonianClassifier(ClassifierConfig cfg, ParamSet params,
                                             std::vector<std::string> class_names)
    : cfg_(cfg), params_(std::move(params)), class_names_(std::move(class_names)) {
  if (params_.at("head.theta").rows() != cfg_.classes) throw Error("topology size does not match class count");
  if (class_names_.size() != cfg_.classes) throw Error("class name count does not match class count");
}

namespace {
Tensor dense_relu(const Tensor& x, const Tensor& w, const Tensor& b, bool relu) {
  Tensor y = matmul(x, w);
  for (std::size_t i = 0; i < y.rows(); ++i)
    for (std::size_t j = 0; j < y.cols(); ++j) {
      double v = y(i, j) + b(0, j);
      y(i, j) = relu && v < 0 ? 0.0 : v;
    }
  return y;
}
}  // namespace

Tensor HamiltonianClassifier::embed(const Tensor& x) const {
  if (x.cols() != cfg_.input_dim) {
    throw ShapeError("input has " + std::to_string(x.cols()) + " features, model expects " +
                     std::to_string(cfg_.input_dim));
  }
  Tensor h = dense_relu(x, params_.at("enc.w1"), params_.at("enc.b1"), true);
  h = dense_relu(h, params_.at("enc.w2"), params_.at("enc.b2"), true);
  return dense_relu(h, params_.at("enc.w3"), params_.at("enc.b3"), false);
}

Tensor HamiltonianClassifier::potential(const Tensor& h) const {
  if (h.cols() != cfg_.embed) throw ShapeError("embedding dimension mismatch");
  return matmul(h, params_.at("head.wv"));
}

double HamiltonianClassifier::mass(const Tensor& h) const {
  if (h.cols() != cfg_.embed) throw ShapeError("embedding dimension mismatch");
  return mass_from_logit(matmul(matmul(h, params_.at("head.mass_m")), params_.at("head.mass_w")).item());
}

Tensor HamiltonianClassifier::w() const { return topology_w(params_.at("head.theta")); }
Tensor HamiltonianClassifier::k() const { return laplacian(w()); }

HamiltonianParts HamiltonianClassifier::parts(const Tensor& x) const {
  Tensor h = embed(x);
  Tensor v = potential(h);
  return HamiltonianParts{k(), v.values(), mass(h), cfg_.eps};
}

Prediction HamiltonianClassifier::predict(const Tensor& x) const { return predict_from_parts(parts(x)); }

std::vector<Prediction> HamiltonianClassifier::predict_all(const Tensor& xs) const {
  std::vector<Prediction> out;
  const Tensor kk = k();
  Tensor h = embed(xs);
  Tensor v = potential(h);
  Tensor s = matmul(matmul(h, params_.at("head.mass_m")), params_.at("head.mass_w"));
  for (std::size_t i = 0; i < xs.rows(); ++i) {
    HamiltonianParts p{kk, std::vector<double>(v.row_span(i).begin(), v.row_span(i).end()),
                       mass_from_logit(s(i, 0)), cfg_.eps};
    out.push_back(predict_from_parts(p));
  }
  return out;
}

double HamiltonianClassifier::accuracy(const Dataset& d) const {
  if (d.size() == 0) return 0.0;
  auto preds = predict_all(d.x);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < d.size(); ++i) ok += preds[i].label == d.y[i];
  return static_cast<double>(ok) / static_cast<double>(d.size());
}

HamiltonianClassifier::BatchOut HamiltonianClassifier::forward(Tape& tape, const std::map<std::string, Var>& p,
                                                               const Var& x, std::span<const std::size_t> y,
                                                               Rng* jitter) const {
  const std::size_t n = x.rows(), c = cfg_.classes;
  if (y.size() != n) throw ShapeError("one label per input row required");
  Var h = relu(add_row_broadcast(matmul(x, p.at("enc.w1")), p.at("enc.b1")));
  h = relu(add_row_broadcast(matmul(h, p.at("enc.w2")), p.at("enc.b2")));
  h = add_row_broadcast(matmul(h, p.at("enc.w3")), p.at("enc.b3"));
  Var v = matmul(h, p.at("head.wv"));
  Var m = mass_from_logit(matmul(matmul(h, p.at("head.mass_m")), p.at("head.mass_w")));
  Var w = topology_w(p.at("head.theta"));
  Var k = laplacian(w);

  BatchOut out;
  Var total;
  for (std::size_t i = 0; i < n; ++i) {
    Var mi = slice(m, i, 1, 0, 1);
    Var hi = hamiltonian(k, slice(v, i, 1, 0, c), mi, cfg_.eps);
    GroundVars gs = ground_state(hi);
    // Degeneracy jitter: small random potential noise, escalated until the
    // ground state separates. Training only.
    double scale_j = 1e-8;
    while (gs.gap < kGapTol && jitter && scale_j <= 1e-2) {
      Tensor noise(c, c);
      for (std::size_t j = 0; j < c; ++j) noise(j, j) = scale_j * jitter->normal();
      gs = ground_state(add(hi, tape.constant(noise)));
      ++out.jitter_events;
      scale_j *= 10.0;
    }
    Var prob = square(gs.psi);
    out.probs.push_back(prob);
    out.masses.push_back(mi.value().item());
    Var li = classifier_loss(prob, y[i], mi, w, cfg_.lambda_m, cfg_.lambda_k);
    total = i == 0 ? li : add(total, li);
  }
  out.loss = scale(total, 1.0 / static_cast<double>(n));
  return out;
}

Tensor HamiltonianClassifier::input_gradient(const Tensor& x, std::span<const std::size_t> y) const {
  Tape tape;
  std::map<std::string, Var> p;
  for (const auto& [name, t] : params_) p.emplace(name, tape.constant(t));
  Var xv = tape.leaf(x);
  Rng jitter(cfg_.seed ^ 0x9e3779b97f4a7c15ull);
  BatchOut out = forward(tape, p, xv, y, &jitter);
  tape.backward(out.loss);
  return tape.grad(xv);
}

json HamiltonianClassifier::to_json() const {
  json j = make_container("classifier", cfg_.to_json(), params_);
  j["class_names"] = class_names_;
  return j;
}

HamiltonianClassifier HamiltonianClassifier::from_json(const json& j) {
  check_container(j, "classifier");
  return HamiltonianClassifier(ClassifierConfig::from_json(j.at("config")), params_from_json(j.at("params")),
                               j.at("class_names").get<std::vector<std::string>>());
}

void HamiltonianClassifier::save(const std::filesystem::path& p) const { write_json_file(p, to_json()); }

HamiltonianClassifier HamiltonianClassifier::load(const std::filesystem::path& p) {
  return from_json(read_json_file(p));
}

// ---- training -------------------------------------------------------------

TrainReport train_classifier(HamiltonianClassifier& model, const Dataset& train, const Dataset* test,
                             const StepHook& hook) {
  const auto& cfg = model.config();
  if (train.dim() != cfg.input_dim) throw UsageError("dataset feature count does not match the model");
  if (train.classes() != cfg.classes) throw UsageError("dataset class count does not match the model");
  if (train.size() == 0) throw UsageError("empty training set");
  model.set_class_names(train.class_names);
  Rng rng(cfg.seed + 1);
  Rng jitter(cfg.seed + 2);
  Optimizer opt = Optimizer::adam(cfg.lr);
  TrainReport rep;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng.engine());
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t end = std::min(order.size(), start + cfg.batch);
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                   order.begin() + static_cast<std::ptrdiff_t>(end));
      Dataset b = train.subset(idx);
      Tape tape;
      auto bound = bind(tape, model.params());
      Var x = tape.constant(b.x);
      auto out = model.forward(tape, bound, x, b.y, &jitter);
      tape.backward(out.loss);
      opt.step(model.params(), collect_grads(tape, bound));
      loss_sum += out.loss.value().item();
      rep.jitter_events += out.jitter_events;
      ++batches;
      ++rep.steps;
      if (hook) hook(rep.steps, model);
    }
    rep.epoch_loss.push_back(loss_sum / static_cast<double>(batches));
  }
  rep.train_accuracy = model.accuracy(train);
  if (test) rep.test_accuracy = model.accuracy(*test);
  return rep;
}

bool LaplacianCheck::ok(double tol) const {
  return asymmetry <= tol && diagonal_w <= tol && min_w >= -tol && row_sum <= tol && min_eigenvalue >= -tol;
}

LaplacianCheck check_laplacian(const Tensor& w, const Tensor& k) {
  LaplacianCheck c;
  const std::size_t n = k.rows();
  c.min_w = n ? w(0, 0) : 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double rs = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      c.asymmetry = std::max(c.asymmetry, std::abs(k(i, j) - k(j, i)));
      c.min_w = std::min(c.min_w, w(i, j));
      rs += k(i, j);
    }
    c.diagonal_w = std::max(c.diagonal_w, std::abs(w(i, i)));
    c.row_sum = std::max(c.row_sum, std::abs(rs));
  }
  c.min_eigenvalue = n ? sym_eig(k).energies[0] : 0.0;
  return c;
}

// ---- robustness -----------------------------------------------------------

Tensor pgd_attack(const HamiltonianClassifier& model, const Tensor& x, std::span<const std::size_t> y,
                  const PgdOptions& opt) {
  if (opt.budget < 0) throw UsageError("PGD budget must be non-negative");
  Tensor adv = x;
  if (opt.budget == 0.0 || opt.steps == 0) return adv;
  const double step = opt.step_size > 0 ? opt.step_size : opt.budget / 8.0;
  auto project = [&](Tensor& a) {
    for (std::size_t i = 0; i < a.size(); ++i) {
      a[i] = std::clamp(a[i], x[i] - opt.budget, x[i] + opt.budget);
      a[i] = std::clamp(a[i], opt.lo, opt.hi);
    }
  };
  if (opt.random_start) {
    Rng rng(opt.seed);
    for (std::size_t i = 0; i < adv.size(); ++i) adv[i] += rng.uniform(-opt.budget, opt.budget);
    project(adv);
  }
  for (std::size_t s = 0; s < opt.steps; ++s) {
    Tensor g = model.input_gradient(adv, y);
    for (std::size_t i = 0; i < adv.size(); ++i) adv[i] += step * (g[i] > 0 ? 1.0 : g[i] < 0 ? -1.0 : 0.0);
    project(adv);
  }
  return adv;
}

double mean_offdiag(const Tensor& w) {
  const std::size_t n = w.rows();
  if (n < 2) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) s += w(i, j);
  return s / static_cast<double>(n * (n - 1));
}

std::vector<std::vector<int>> hop_distances(const Tensor& w, double tau) {
  const std::size_t n = w.rows();
  std::vector<std::vector<int>> dist(n, std::vector<int>(n, -1));
  for (std::size_t s = 0; s < n; ++s) {
    std::deque<std::size_t> q{s};
    dist[s][s] = 0;
    while (!q.empty()) {
      const std::size_t u = q.front();
      q.pop_front();
      for (std::size_t v = 0; v < n; ++v) {
        if (v != u && w(u, v) > tau && dist[s][v] < 0) {
          dist[s][v] = dist[s][u] + 1;
          q.push_back(v);
        }
      }
    }
  }
  return dist;
}

std::map<int, std::size_t> graph_distance_histogram(const Tensor& w, std::span<const std::size_t> truth,
                                                    std::span<const std::size_t> predicted, double tau) {
  if (truth.size() != predicted.size()) throw ShapeError("truth and prediction lengths differ");
  if (truth.empty()) throw UsageError("graph distance histogram of an empty attacked set");
  const auto dist = hop_distances(w, tau);
  std::map<int, std::size_t> hist;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] == predicted[i]) continue;
    ++hist[dist.at(truth[i]).at(predicted[i])];
  }
  return hist;
}

}  // namespace hamil
