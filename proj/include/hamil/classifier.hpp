#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "hamil/dataset.hpp"
#include "hamil/optim.hpp"
#include "hamil/serialize.hpp"
#include "hamil/spectral.hpp"

namespace hamil {

struct ClassifierConfig {
  std::size_t input_dim = 32;
  std::size_t hidden = 128;
  std::size_t embed = 64;
  std::size_t classes = 10;
  std::size_t mass_rank = 16;
  double eps = 1e-3;
  double lambda_m = 1e-3;
  double lambda_k = 1e-4;
  double theta_offset = -3.0;
  double theta_sd = 0.01;
  double lr = 3e-3;
  std::size_t epochs = 30;
  std::size_t batch = 32;
  std::uint64_t seed = 42;

  json to_json() const;
  static ClassifierConfig from_json(const json& j);
};

/// Output of one forward pass.
struct Prediction {
  std::vector<double> probs;
  std::vector<double> energies;
  std::vector<double> potential;
  double mass = 0.0;
  double gap = 0.0;
  std::size_t label = 0;
  std::size_t runner_up = 0;  // second most probable class
};

/// The pieces of H for one sample, kept as plain tensors so inference-time
/// edits (rule surgery) can modify them before the eigensolve.
struct HamiltonianParts {
  Tensor k;                     // C x C Laplacian
  std::vector<double> v;        // potential
  double mass = 1.0;
  double eps = 1e-3;
};

Tensor build_h(const HamiltonianParts& parts);
Prediction predict_from_parts(const HamiltonianParts& parts);
/// Prediction from an already assembled H (probs, energies, gap, labels).
Prediction predict_from_h(const Tensor& h);

// Differentiable building blocks (exposed for tests and other modules).
Var topology_w(const Var& theta);               // softplus(sym(theta)), zero diagonal
Var laplacian(const Var& w);                    // D - W
Var mass_from_logit(const Var& s);              // 0.05 + 9.95 sigma(s)
Var hamiltonian(const Var& k, const Var& v_row, const Var& mass, double eps);
/// -log p[label] + lambda_m m^2 + lambda_k sum(W); p is clamped at 1e-12.
/// W is non-negative, so sum(W) is its L1 norm.
Var classifier_loss(const Var& probs, std::size_t label, const Var& mass, const Var& w, double lambda_m,
                    double lambda_k);

/// Plain versions of the same maps.
Tensor topology_w(const Tensor& theta);
Tensor laplacian(const Tensor& w);
double mass_from_logit(double s);

class HamiltonianClassifier {
 public:
  explicit HamiltonianClassifier(ClassifierConfig cfg);
  HamiltonianClassifier(ClassifierConfig cfg, ParamSet params, std::vector<std::string> class_names);

  const ClassifierConfig& config() const { return cfg_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }
  const std::vector<std::string>& class_names() const { return class_names_; }
  void set_class_names(std::vector<std::string> n) { class_names_ = std::move(n); }

  /// Embedding h for one input row (1 x input_dim).
  Tensor embed(const Tensor& x) const;
  Tensor potential(const Tensor& h) const;  // 1 x C
  double mass(const Tensor& h) const;
  Tensor w() const;
  Tensor k() const;
  HamiltonianParts parts(const Tensor& x) const;
  Prediction predict(const Tensor& x) const;
  std::vector<Prediction> predict_all(const Tensor& xs) const;
  double accuracy(const Dataset& d) const;

  /// Tape forward for a batch: returns the mean loss; the bound parameter map
  /// and the input Var must live on the same tape. Applies degeneracy jitter
  /// drawn from `jitter` when given (training), none otherwise.
  struct BatchOut {
    Var loss;
    std::vector<Var> probs;  // C x 1 per sample
    std::vector<double> masses;
    std::size_t jitter_events = 0;
  };
  BatchOut forward(Tape& tape, const std::map<std::string, Var>& p, const Var& x,
                   std::span<const std::size_t> y, Rng* jitter) const;

  /// Gradient of the NLL loss with respect to the input rows.
  Tensor input_gradient(const Tensor& x, std::span<const std::size_t> y) const;

  json to_json() const;
  static HamiltonianClassifier from_json(const json& j);
  void save(const std::filesystem::path& p) const;
  static HamiltonianClassifier load(const std::filesystem::path& p);

 private:
  ClassifierConfig cfg_;
  ParamSet params_;
  std::vector<std::string> class_names_;
};

struct TrainReport {
  std::vector<double> epoch_loss;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  std::size_t steps = 0;
  std::size_t jitter_events = 0;
};

/// Called after every optimizer step.
using StepHook = std::function<void(std::size_t step, const HamiltonianClassifier&)>;

TrainReport train_classifier(HamiltonianClassifier& model, const Dataset& train,
                             const Dataset* test = nullptr, const StepHook& hook = {});

struct LaplacianCheck {
  double asymmetry = 0.0;     // max |K - K^T|
  double diagonal_w = 0.0;    // max |W_ii|
  double min_w = 0.0;         // min W entry
  double row_sum = 0.0;       // max |sum_j K_ij|
  double min_eigenvalue = 0.0;
  bool ok(double tol = 1e-9) const;
};
LaplacianCheck check_laplacian(const Tensor& w, const Tensor& k);

struct PgdOptions {
  double budget = 0.1;
  std::size_t steps = 20;
  double step_size = -1.0;  // default budget / 8
  bool random_start = true;
  double lo = 0.0, hi = 1.0;
  std::uint64_t seed = 42;
};

/// L-infinity PGD on the NLL of the true label. Returns adversarial rows.
Tensor pgd_attack(const HamiltonianClassifier& model, const Tensor& x,
                  std::span<const std::size_t> y, const PgdOptions& opt);

/// Histogram of BFS distances on the thresholded topology from the true to
/// the predicted label, over misclassified samples. Key -1 is unreachable.
std::map<int, std::size_t> graph_distance_histogram(const Tensor& w,
                                                    std::span<const std::size_t> truth,
                                                    std::span<const std::size_t> predicted,
                                                    double tau);
/// Default binarization threshold: mean off-diagonal entry of W.
double mean_offdiag(const Tensor& w);
/// All-pairs BFS hop counts on W > tau (-1 if unreachable).
std::vector<std::vector<int>> hop_distances(const Tensor& w, double tau);

}  // namespace hamil
