#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "hamil/tape.hpp"
#include "hamil/tensor.hpp"

namespace hamil {

/// Named trainable tensors. Ordered by name so iteration, checksums and
/// serialization are deterministic.
class ParamSet {
 public:
  Tensor& add(const std::string& name, Tensor value);
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  std::vector<std::string> names() const;
  std::size_t count() const;  // total scalar parameters

  /// FNV-1a over names, shapes and the raw bytes of every value.
  std::uint64_t checksum() const;
  bool all_finite() const;

  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }

 private:
  std::map<std::string, Tensor> params_;
};

using GradSet = std::map<std::string, Tensor>;

/// Puts every parameter on `tape` as a leaf; the returned map is keyed like `ps`.
std::map<std::string, Var> bind(Tape& tape, const ParamSet& ps);
/// Reads the gradients of bound leaves after backward().
GradSet collect_grads(const Tape& tape, const std::map<std::string, Var>& bound);

enum class OptimKind { SGD, Adam };

class Optimizer {
 public:
  Optimizer(OptimKind kind, double lr) : kind_(kind), lr_(lr) {}
  static Optimizer sgd(double lr) { return Optimizer(OptimKind::SGD, lr); }
  static Optimizer adam(double lr) { return Optimizer(OptimKind::Adam, lr); }

  /// Updates every parameter that has an entry in `grads`. Parameters without
  /// a gradient are left untouched.
  void step(ParamSet& params, const GradSet& grads);

  OptimKind kind() const { return kind_; }
  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  long steps() const { return t_; }

  static constexpr double beta1 = 0.9;
  static constexpr double beta2 = 0.999;
  static constexpr double eps = 1e-8;

 private:
  OptimKind kind_;
  double lr_;
  long t_ = 0;
  std::map<std::string, Tensor> m_, v_;
};

}  // namespace hamil
