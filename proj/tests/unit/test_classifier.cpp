#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "fd_check.hpp"
#include "hamil/classifier.hpp"
#include "hamil/error.hpp"

using namespace hamil;

namespace {

ClassifierConfig small_cfg(std::size_t c = 4, std::size_t d = 8, std::size_t in = 6) {
  ClassifierConfig cfg;
  cfg.input_dim = in;
  cfg.hidden = 8;
  cfg.embed = d;
  cfg.classes = c;
  cfg.mass_rank = 3;
  return cfg;
}

double entropy(const std::vector<double>& p) {
  double h = 0;
  for (double x : p)
    if (x > 0) h -= x * std::log(x);
  return h;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("hamil_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST_SUITE("hamiltonian-classifier") {

TEST_CASE("potential is a bias-free projection") {
  ClassifierConfig cfg = small_cfg(4, 4);
  HamiltonianClassifier m(cfg);
  CHECK(m.potential(Tensor(1, 4)) == Tensor(1, 4));
  m.params().at("head.wv") = Tensor::identity(4);
  Tensor h = Tensor::from_rows({{0.5, -1, 2, 3}});
  CHECK(m.potential(h) == h);
  Rng rng(1);
  m.params().at("head.wv") = rng.normal_tensor(4, 4);
  CHECK(max_abs_diff(m.potential(h), matmul(h, m.params().at("head.wv"))) == 0.0);
  CHECK_THROWS_AS(m.potential(Tensor(1, 3)), ShapeError);
}

TEST_CASE("mass map range") {
  CHECK(mass_from_logit(0.0) == doctest::Approx(5.025).epsilon(1e-15));
  CHECK(mass_from_logit(800.0) == doctest::Approx(10.0).epsilon(1e-15));
  CHECK(mass_from_logit(-800.0) == doctest::Approx(0.05).epsilon(1e-15));
}

TEST_CASE("Laplacian from topology logits") {
  Tensor neg(3, 3, -60.0);
  CHECK(laplacian(topology_w(neg)).max_abs() < 1e-25);

  Tensor theta = Tensor::from_rows({{0, 0.4}, {1.0, 0}});
  const double a = std::log1p(std::exp(0.7));
  Tensor k = laplacian(topology_w(theta));
  CHECK(k(0, 0) == doctest::Approx(a));
  CHECK(k(0, 1) == doctest::Approx(-a));
  CHECK(k(1, 0) == doctest::Approx(-a));
  CHECK(k(1, 1) == doctest::Approx(a));

  Rng rng(3);
  for (int t = 0; t < 10; ++t) {
    Tensor th = rng.normal_tensor(7, 7, 0.0, 2.0);
    Tensor w = topology_w(th);
    CHECK(check_laplacian(w, laplacian(w)).ok());
  }
}

TEST_CASE("tape and plain topology maps agree") {
  Rng rng(5);
  Tensor th = rng.normal_tensor(5, 5);
  Tape t;
  Var k = laplacian(topology_w(t.leaf(th)));
  CHECK(max_abs_diff(k.value(), laplacian(topology_w(th))) < 1e-15);
}

TEST_CASE("decoupled Hamiltonian is diagonal and picks argmin V") {
  HamiltonianParts parts{Tensor(3, 3), {0.7, -0.2, 0.4}, 1.0, 0.0};
  Tensor h = build_h(parts);
  CHECK(h == Tensor::diag(std::vector<double>{0.7, -0.2, 0.4}));
  Prediction p = predict_from_parts(parts);
  CHECK(p.label == 1);
  CHECK(p.probs == std::vector<double>{0, 1, 0});
  parts.mass = 0.0;
  CHECK_THROWS_AS(build_h(parts), NumericError);
}

TEST_CASE("Hamiltonian is exactly symmetric") {
  Rng rng(6);
  Tensor w = topology_w(rng.normal_tensor(6, 6));
  HamiltonianParts parts{laplacian(w), {0.1, 0.2, -0.3, 0.5, 0.0, 0.9}, 0.37, 1e-3};
  Tensor h = build_h(parts);
  CHECK((h - h.transposed()).max_abs() == 0.0);
}

TEST_CASE("entropy is non-increasing in mass at fixed K and V") {
  Rng rng(8);
  Tensor w = topology_w(rng.normal_tensor(6, 6, -0.5, 1.0));
  HamiltonianParts parts{laplacian(w), {}, 0.05, 1e-3};
  for (int i = 0; i < 6; ++i) parts.v.push_back(rng.normal());
  double prev = std::numeric_limits<double>::infinity();
  for (double m = 0.05; m <= 10.0; m *= 1.25) {
    parts.mass = m;
    Prediction p = predict_from_parts(parts);
    REQUIRE(p.gap > kGapTol);
    const double h = entropy(p.probs);
    CHECK(h <= prev + 1e-12);
    prev = h;
  }
  parts.mass = 0.05;
  const double diffuse = entropy(predict_from_parts(parts).probs);
  parts.mass = 10.0;
  CHECK(entropy(predict_from_parts(parts).probs) < diffuse);
}

TEST_CASE("forward normalizes and the diagonal limit equals argmin V") {
  ClassifierConfig cfg = small_cfg(5, 6, 4);
  cfg.theta_offset = -60.0;
  HamiltonianClassifier m(cfg);
  Rng rng(9);
  Tensor xs = rng.uniform_tensor(50, 4);
  auto preds = m.predict_all(xs);
  for (std::size_t i = 0; i < xs.rows(); ++i) {
    double s = 0;
    for (double p : preds[i].probs) s += p;
    CHECK(std::abs(s - 1.0) < 1e-10);
    Tensor v = m.potential(m.embed(Tensor::row(xs.row_span(i))));
    std::size_t arg = 0;
    for (std::size_t c = 1; c < 5; ++c)
      if (v[c] < v[arg]) arg = c;
    CHECK(preds[i].label == arg);
  }
}

TEST_CASE("loss values at the trivial points") {
  Tape t;
  Var w0 = t.constant(Tensor(3, 3));
  Var m0 = t.constant(Tensor::scalar(0.0));
  Var p1 = t.constant(Tensor::column(std::vector<double>{0, 1, 0}));
  CHECK(classifier_loss(p1, 1, m0, w0, 1e-3, 1e-4).value().item() == 0.0);
  Var ph = t.constant(Tensor::column(std::vector<double>{0.5, 0.5, 0}));
  CHECK(classifier_loss(ph, 0, m0, w0, 0, 0).value().item() == doctest::Approx(std::log(2.0)));
  // Clamped at 1e-12 rather than infinite.
  CHECK(classifier_loss(p1, 0, m0, w0, 0, 0).value().item() == doctest::Approx(-std::log(1e-12)));
}

TEST_CASE("loss gradient with respect to theta on a C=4 toy") {
  Rng rng(10);
  const std::size_t c = 4;
  Tensor v = rng.normal_tensor(1, c);
  auto f = [&](Tape& t, const std::vector<Var>& in) {
    Var w = topology_w(in[0]);
    Var m = t.constant(Tensor::scalar(0.4));
    GroundVars gs = ground_state(hamiltonian(laplacian(w), t.constant(v), m, 1e-3));
    return classifier_loss(square(gs.psi), 2, m, w, 1e-3, 1e-2);
  };
  CHECK(testutil::fd_rel_error(f, {rng.normal_tensor(c, c, -0.5, 1.0)}, 1e-6) < 1e-4);
}

TEST_CASE("end-to-end gradient on a C=4, d=8 model") {
  ClassifierConfig cfg = small_cfg(4, 8, 5);
  cfg.theta_offset = -0.5;
  cfg.theta_sd = 0.8;
  HamiltonianClassifier m(cfg);
  Rng rng(12);
  Tensor x = rng.uniform_tensor(3, 5);
  const std::vector<std::size_t> y{0, 3, 1};
  const auto names = m.params().names();
  std::vector<Tensor> inputs;
  for (const auto& n : names) inputs.push_back(m.params().at(n));
  auto f = [&](Tape& t, const std::vector<Var>& in) {
    std::map<std::string, Var> p;
    for (std::size_t i = 0; i < names.size(); ++i) p.emplace(names[i], in[i]);
    return m.forward(t, p, t.constant(x), y, nullptr).loss;
  };
  CHECK(testutil::fd_rel_error(f, inputs, 1e-6, 1e-3) < 1e-4);
}

TEST_CASE("training keeps Laplacian invariants and beats the majority baseline") {
  SyntheticSpec sp;
  sp.per_class = 40;
  sp.dim = 16;
  Dataset d = make_synthetic(sp);
  auto [tr, te] = split(d, 0.25, 3);
  ClassifierConfig cfg;
  cfg.input_dim = 16;
  cfg.hidden = 32;
  cfg.embed = 16;
  cfg.epochs = 8;
  HamiltonianClassifier m(cfg);
  std::size_t checked = 0, bad = 0;
  auto rep = train_classifier(m, tr, &te, [&](std::size_t, const HamiltonianClassifier& mm) {
    Tensor w = mm.w();
    ++checked;
    bad += !check_laplacian(w, laplacian(w)).ok();
  });
  CHECK(checked == rep.steps);
  CHECK(bad == 0);
  CHECK(rep.test_accuracy > te.majority_baseline());
  CHECK(rep.epoch_loss.back() < rep.epoch_loss.front());
  for (const auto& p : m.predict_all(te.x)) {
    CHECK(p.mass >= 0.05);
    CHECK(p.mass <= 10.0);
  }
}

TEST_CASE("save and load are bit-exact") {
  HamiltonianClassifier m(small_cfg());
  auto dir = temp_dir("cls");
  m.save(dir / "model.json");
  HamiltonianClassifier r = HamiltonianClassifier::load(dir / "model.json");
  CHECK(r.params().checksum() == m.params().checksum());
  for (const auto& [name, t] : m.params()) CHECK(r.params().at(name) == t);
  CHECK(r.config().to_json() == m.config().to_json());
  json bad = m.to_json();
  bad["version"] = 99;
  CHECK_THROWS_AS(HamiltonianClassifier::from_json(bad), Error);
}

TEST_CASE("PGD respects the budget and the input range") {
  ClassifierConfig cfg = small_cfg(4, 6, 5);
  HamiltonianClassifier m(cfg);
  Rng rng(13);
  Tensor x = rng.uniform_tensor(6, 5);
  const std::vector<std::size_t> y{0, 1, 2, 3, 0, 1};
  PgdOptions none;
  none.budget = 0.0;
  CHECK(pgd_attack(m, x, y, none) == x);
  PgdOptions opt;
  opt.budget = 0.05;
  opt.steps = 5;
  Tensor adv = pgd_attack(m, x, y, opt);
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(adv[i] - x[i] <= opt.budget + 1e-15);
    CHECK(x[i] - adv[i] <= opt.budget + 1e-15);
    CHECK(adv[i] >= 0.0);
    CHECK(adv[i] <= 1.0);
  }
}

TEST_CASE("graph distance histogram") {
  Tensor w = Tensor::from_rows({{0, 0.9, 0.1, 0}, {0.9, 0, 0.8, 0}, {0.1, 0.8, 0, 0}, {0, 0, 0, 0}});
  const double tau = 0.5;
  // 0 -> 1 is the strongest neighbor; 0 -> 2 goes through 1; 3 is isolated.
  const std::vector<std::size_t> truth{0, 0, 0, 2};
  const std::vector<std::size_t> pred{1, 2, 3, 2};
  auto h = graph_distance_histogram(w, truth, pred, tau);
  CHECK(h.at(1) == 1);
  CHECK(h.at(2) == 1);
  CHECK(h.at(-1) == 1);
  CHECK(h.size() == 3);

  Tensor zero(4, 4);
  auto hz = graph_distance_histogram(zero, truth, pred, mean_offdiag(zero));
  CHECK(hz.size() == 1);
  CHECK(hz.at(-1) == 3);

  Tensor full(4, 4, 1.0);
  for (std::size_t i = 0; i < 4; ++i) full(i, i) = 0;
  auto hf = graph_distance_histogram(full, truth, pred, 0.5);
  CHECK(hf.size() == 1);
  CHECK(hf.at(1) == 3);

  CHECK_THROWS_AS(graph_distance_histogram(w, {}, {}, tau), UsageError);
}

TEST_CASE("synthetic data, CSV round trip and splits") {
  SyntheticSpec sp;
  sp.per_class = 10;
  Dataset d = make_synthetic(sp);
  CHECK(d.size() == 100);
  CHECK(d.classes() == 10);
  CHECK(d.class_names[3] == "cat");
  for (double v : d.x.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  auto dir = temp_dir("csv");
  write_csv(dir / "d.csv", d);
  Dataset r = read_csv(dir / "d.csv");
  CHECK(r.x == d.x);
  CHECK(r.y == d.y);
  CHECK(r.class_names == d.class_names);
  auto [tr, te] = split(d, 0.2, 1);
  CHECK(te.size() == 20);
  for (auto c : te.class_counts()) CHECK(c == 2);
  CHECK(d.majority_baseline() == doctest::Approx(0.1));
}

TEST_CASE("CSV with integer labels and a header") {
  auto dir = temp_dir("csv2");
  std::ofstream(dir / "a.csv") << "x,y,label\n0.1,0.2,1\n0.3,0.4,0\n0.5,0.6,2\n";
  Dataset d = read_csv(dir / "a.csv");
  CHECK(d.size() == 3);
  CHECK(d.classes() == 3);
  CHECK(d.y == std::vector<std::size_t>{1, 0, 2});
  std::ofstream(dir / "b.csv") << "0.1,0.2,1\n0.3,x,0\n";
  CHECK_THROWS_AS(read_csv(dir / "b.csv"), Error);
}

TEST_CASE("PGM label-subfolder reader") {
  auto dir = temp_dir("pgm");
  std::filesystem::create_directories(dir / "cat");
  std::filesystem::create_directories(dir / "dog");
  std::ofstream(dir / "cat" / "a.pgm") << "P2\n# comment\n2 2\n255\n0 255\n128 64\n";
  {
    std::ofstream f(dir / "dog" / "b.pgm", std::ios::binary);
    f << "P5\n2 2\n255\n";
    const unsigned char px[] = {255, 0, 51, 102};
    f.write(reinterpret_cast<const char*>(px), 4);
  }
  Dataset d = load_dataset(dir);
  CHECK(d.class_names == std::vector<std::string>{"cat", "dog"});
  CHECK(d.y == std::vector<std::size_t>{0, 1});
  CHECK(d.x(0, 1) == 1.0);
  CHECK(d.x(1, 2) == doctest::Approx(0.2));
  std::ofstream(dir / "dog" / "c.pgm") << "P2\n3 1\n255\n0 0 0\n";
  CHECK_THROWS_AS(load_dataset(dir), Error);
}

}  // TEST_SUITE
