#include "hamil/optim.hpp"

#include <cmath>
#include <cstring>

#include "hamil/error.hpp"

namespace hamil {

Tensor& ParamSet::add(const std::string& name, Tensor value) {
  auto [it, inserted] = params_.insert_or_assign(name, std::move(value));
  (void)inserted;
  return it->second;
}

Tensor& ParamSet::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw Error("unknown parameter '" + name + "'");
  return it->second;
}

const Tensor& ParamSet::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw Error("unknown parameter '" + name + "'");
  return it->second;
}

std::vector<std::string> ParamSet::names() const {
  std::vector<std::string> out;
  for (const auto& kv : params_) out.push_back(kv.first);
  return out;
}

std::size_t ParamSet::count() const {
  std::size_t n = 0;
  for (const auto& kv : params_) n += kv.second.size();
  return n;
}

namespace {
void fnv(std::uint64_t& h, const void* p, std::size_t n) {
  const auto* b = static_cast<const unsigned char*>(p);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= b[i];
    h *= 1099511628211ull;
  }
}
}  // namespace

std::uint64_t ParamSet::checksum() const {
  std::uint64_t h = 14695981039346656037ull;
  for (const auto& [name, t] : params_) {
    fnv(h, name.data(), name.size());
    const std::uint64_t dims[2] = {t.rows(), t.cols()};
    fnv(h, dims, sizeof dims);
    fnv(h, t.data().data(), t.size() * sizeof(double));
  }
  return h;
}

bool ParamSet::all_finite() const {
  for (const auto& kv : params_)
    if (!kv.second.all_finite()) return false;
  return true;
}

std::map<std::string, Var> bind(Tape& tape, const ParamSet& ps) {
  std::map<std::string, Var> out;
  for (const auto& [name, t] : ps) out.emplace(name, tape.leaf(t));
  return out;
}

GradSet collect_grads(const Tape& tape, const std::map<std::string, Var>& bound) {
  GradSet g;
  for (const auto& [name, v] : bound) g.emplace(name, tape.grad(v));
  return g;
}

void Optimizer::step(ParamSet& params, const GradSet& grads) {
  for (const auto& [name, g] : grads) {
    if (!params.at(name).same_shape(g)) {
      throw ShapeError("gradient for '" + name + "' has shape " + g.shape_string() +
                       ", parameter is " + params.at(name).shape_string());
    }
    require_finite(g, "optimizer gradient");
  }
  ++t_;
  if (kind_ == OptimKind::SGD) {
    for (const auto& [name, g] : grads) {
      Tensor& p = params.at(name);
      for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr_ * g[i];
    }
    return;
  }
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
  for (const auto& [name, g] : grads) {
    Tensor& p = params.at(name);
    auto [mi, fm] = m_.try_emplace(name, g.rows(), g.cols());
    auto [vi, fv] = v_.try_emplace(name, g.rows(), g.cols());
    (void)fm;
    (void)fv;
    Tensor& m = mi->second;
    Tensor& v = vi->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= lr_ * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

}  // namespace hamil
