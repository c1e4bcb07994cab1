#include "hamil/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "hamil/error.hpp"

namespace hamil {

const Tensor& Var::value() const {
  if (!tape_) throw Error("use of an unbound Var");
  return tape_->value(id_);
}

Var Tape::leaf(Tensor value) {
  require_finite(value, "leaf");
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  n.op = "leaf";
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  require_finite(value, "constant");
  Node n;
  n.value = std::move(value);
  n.op = "constant";
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<Var> parents, BackwardFn fn, const char* op) {
  require_finite(value, op);
  Node n;
  n.value = std::move(value);
  n.op = op;
  for (const Var& p : parents) {
    if (p.tape() != this) throw Error(std::string(op) + ": operand recorded on another tape");
    n.parents.push_back(p.id());
    n.requires_grad = n.requires_grad || nodes_[p.id()].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

void Tape::accumulate(const Var& v, const Tensor& g) {
  Node& n = nodes_.at(v.id());
  if (!n.requires_grad) return;
  if (!g.same_shape(n.value)) {
    throw ShapeError(std::string("gradient for ") + n.op + " has shape " + g.shape_string() +
                     ", expected " + n.value.shape_string());
  }
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
  }
}

void Tape::backward(const Var& loss) {
  if (loss.tape() != this) throw Error("backward: loss recorded on another tape");
  if (backward_done_) throw Error("backward already ran on this tape; call reset() first");
  const Node& root = nodes_.at(loss.id());
  if (!root.value.is_scalar()) {
    throw ShapeError("backward requires a 1x1 loss, got " + root.value.shape_string());
  }
  backward_done_ = true;
  if (!root.requires_grad) return;
  nodes_[loss.id()].grad = Tensor::scalar(1.0);
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.size() == 0) continue;
    n.backward(n.grad, *this);
    require_finite(n.grad, n.op);
  }
}

Tensor Tape::grad(const Var& v) const {
  const Node& n = nodes_.at(v.id());
  if (n.grad.size() == 0) return Tensor(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::reset() {
  nodes_.clear();
  backward_done_ = false;
}

namespace {

Tape& tape_of(const Var& a) {
  if (!a.valid()) throw Error("use of an unbound Var");
  return *a.tape();
}

void same_shape(const Var& a, const Var& b, const char* op) {
  if (!a.value().same_shape(b.value())) {
    throw ShapeError(std::string(op) + " " + a.value().shape_string() + " vs " +
                     b.value().shape_string());
  }
}

// Elementwise unary op: f gives the value, df gives the derivative from (x, y).
template <class F, class DF>
Var unary(const Var& a, const char* op, F f, DF df) {
  const Tensor& x = a.value();
  Tensor y(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  Tape& t = tape_of(a);
  const std::size_t out_id = t.size();
  return t.record(
      std::move(y), {a},
      [a, out_id, df](const Tensor& g, Tape& tp) {
        const Tensor& xv = a.value();
        const Tensor& yv = tp.value(out_id);
        Tensor ga(xv.rows(), xv.cols());
        for (std::size_t i = 0; i < xv.size(); ++i) ga[i] = g[i] * df(xv[i], yv[i]);
        tp.accumulate(a, ga);
      },
      op);
}

double stable_softplus(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  Tensor y = matmul(a.value(), b.value());
  return tape_of(a).record(
      std::move(y), {a, b},
      [a, b](const Tensor& g, Tape& t) {
        if (t.requires_grad(a)) t.accumulate(a, matmul(g, b.value().transposed()));
        if (t.requires_grad(b)) t.accumulate(b, matmul(a.value().transposed(), g));
      },
      "matmul");
}

Var add(const Var& a, const Var& b) {
  same_shape(a, b, "add");
  return tape_of(a).record(
      a.value() + b.value(), {a, b},
      [a, b](const Tensor& g, Tape& t) {
        t.accumulate(a, g);
        t.accumulate(b, g);
      },
      "add");
}

Var sub(const Var& a, const Var& b) {
  same_shape(a, b, "sub");
  return tape_of(a).record(
      a.value() - b.value(), {a, b},
      [a, b](const Tensor& g, Tape& t) {
        t.accumulate(a, g);
        t.accumulate(b, -1.0 * g);
      },
      "sub");
}

Var mul(const Var& a, const Var& b) {
  same_shape(a, b, "mul");
  return tape_of(a).record(
      hadamard(a.value(), b.value()), {a, b},
      [a, b](const Tensor& g, Tape& t) {
        t.accumulate(a, hadamard(g, b.value()));
        t.accumulate(b, hadamard(g, a.value()));
      },
      "mul");
}

Var mul_scalar(const Var& a, const Var& s) {
  if (!s.value().is_scalar()) throw ShapeError("mul_scalar: scale must be 1x1");
  const double sv = s.value().item();
  return tape_of(a).record(
      sv * a.value(), {a, s},
      [a, s](const Tensor& g, Tape& t) {
        t.accumulate(a, s.value().item() * g);
        double acc = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * a.value()[i];
        t.accumulate(s, Tensor::scalar(acc));
      },
      "mul_scalar");
}

Var scale(const Var& a, double s) {
  return tape_of(a).record(
      s * a.value(), {a}, [a, s](const Tensor& g, Tape& t) { t.accumulate(a, s * g); }, "scale");
}

Var add_scalar(const Var& a, double s) {
  Tensor y = a.value();
  for (double& v : y.data()) v += s;
  return tape_of(a).record(
      std::move(y), {a}, [a](const Tensor& g, Tape& t) { t.accumulate(a, g); }, "add_scalar");
}

Var add_row_broadcast(const Var& a, const Var& row) {
  const Tensor& x = a.value();
  const Tensor& r = row.value();
  if (r.rows() != 1 || r.cols() != x.cols()) {
    throw ShapeError("add_row_broadcast " + x.shape_string() + " + " + r.shape_string());
  }
  Tensor y = x;
  for (std::size_t i = 0; i < y.rows(); ++i)
    for (std::size_t j = 0; j < y.cols(); ++j) y(i, j) += r(0, j);
  return tape_of(a).record(
      std::move(y), {a, row},
      [a, row](const Tensor& g, Tape& t) {
        t.accumulate(a, g);
        Tensor gr(1, g.cols());
        for (std::size_t i = 0; i < g.rows(); ++i)
          for (std::size_t j = 0; j < g.cols(); ++j) gr(0, j) += g(i, j);
        t.accumulate(row, gr);
      },
      "add_row_broadcast");
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var square(const Var& a) {
  return unary(
      a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var reciprocal(const Var& a) {
  return unary(
      a, "reciprocal", [](double x) { return 1.0 / x; }, [](double, double y) { return -y * y; });
}

Var softplus(const Var& a) {
  return unary(a, "softplus", stable_softplus, [](double x, double) { return stable_sigmoid(x); });
}

Var sigmoid(const Var& a) {
  return unary(a, "sigmoid", stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Var tanh(const Var& a) {
  return unary(
      a, "tanh", [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Var exp(const Var& a) {
  return unary(
      a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(const Var& a) {
  return unary(
      a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var relu(const Var& a) {
  return unary(
      a, "relu", [](double x) { return x > 0 ? x : 0.0; },
      [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Var clamp_min(const Var& a, double floor) {
  return unary(
      a, "clamp_min", [floor](double x) { return x > floor ? x : floor; },
      [floor](double x, double) { return x > floor ? 1.0 : 0.0; });
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return tape_of(a).record(
      Tensor::scalar(s), {a},
      [a](const Tensor& g, Tape& t) {
        t.accumulate(a, Tensor(a.rows(), a.cols(), g.item()));
      },
      "sum");
}

Var mean(const Var& a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var sum_rows(const Var& a) {
  const Tensor& x = a.value();
  Tensor y(x.rows(), 1);
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) y(i, 0) += x(i, j);
  return tape_of(a).record(
      std::move(y), {a},
      [a](const Tensor& g, Tape& t) {
        Tensor ga(a.rows(), a.cols());
        for (std::size_t i = 0; i < ga.rows(); ++i)
          for (std::size_t j = 0; j < ga.cols(); ++j) ga(i, j) = g(i, 0);
        t.accumulate(a, ga);
      },
      "sum_rows");
}

Var diag_embed(const Var& v) {
  const Tensor& x = v.value();
  if (x.rows() != 1 && x.cols() != 1) throw ShapeError("diag_embed needs a vector, got " + x.shape_string());
  const std::size_t n = x.size();
  Tensor y(n, n);
  for (std::size_t i = 0; i < n; ++i) y(i, i) = x[i];
  return tape_of(v).record(
      std::move(y), {v},
      [v, n](const Tensor& g, Tape& t) {
        Tensor gv(v.rows(), v.cols());
        for (std::size_t i = 0; i < n; ++i) gv[i] = g(i, i);
        t.accumulate(v, gv);
      },
      "diag_embed");
}

Var transpose(const Var& a) {
  return tape_of(a).record(
      a.value().transposed(), {a},
      [a](const Tensor& g, Tape& t) { t.accumulate(a, g.transposed()); }, "transpose");
}

Var slice(const Var& a, std::size_t row0, std::size_t nrows, std::size_t col0, std::size_t ncols) {
  const Tensor& x = a.value();
  if (row0 + nrows > x.rows() || col0 + ncols > x.cols()) {
    throw ShapeError("slice out of range on " + x.shape_string());
  }
  Tensor y(nrows, ncols);
  for (std::size_t i = 0; i < nrows; ++i)
    for (std::size_t j = 0; j < ncols; ++j) y(i, j) = x(row0 + i, col0 + j);
  return tape_of(a).record(
      std::move(y), {a},
      [a, row0, nrows, col0, ncols](const Tensor& g, Tape& t) {
        Tensor ga(a.rows(), a.cols());
        for (std::size_t i = 0; i < nrows; ++i)
          for (std::size_t j = 0; j < ncols; ++j) ga(row0 + i, col0 + j) = g(i, j);
        t.accumulate(a, ga);
      },
      "slice");
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows of nothing");
  const std::size_t cols = parts[0].cols();
  std::size_t rows = 0;
  for (const Var& p : parts) {
    if (p.cols() != cols) throw ShapeError("concat_rows column mismatch");
    rows += p.rows();
  }
  Tensor y(rows, cols);
  std::size_t r = 0;
  for (const Var& p : parts) {
    const auto src = p.value().data();
    std::copy(src.begin(), src.end(), y.data().begin() + static_cast<std::ptrdiff_t>(r * cols));
    r += p.rows();
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return tape_of(parts[0]).record(
      std::move(y), ps,
      [ps, cols](const Tensor& g, Tape& t) {
        std::size_t r0 = 0;
        for (const Var& p : ps) {
          Tensor gp(p.rows(), cols);
          const auto src = g.data().subspan(r0 * cols, p.rows() * cols);
          std::copy(src.begin(), src.end(), gp.data().begin());
          t.accumulate(p, gp);
          r0 += p.rows();
        }
      },
      "concat_rows");
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols of nothing");
  const std::size_t rows = parts[0].rows();
  std::size_t cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols row mismatch");
    cols += p.cols();
  }
  Tensor y(rows, cols);
  std::size_t c0 = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < v.cols(); ++j) y(i, c0 + j) = v(i, j);
    c0 += v.cols();
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return tape_of(parts[0]).record(
      std::move(y), ps,
      [ps, rows](const Tensor& g, Tape& t) {
        std::size_t off = 0;
        for (const Var& p : ps) {
          Tensor gp(rows, p.cols());
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < p.cols(); ++j) gp(i, j) = g(i, off + j);
          t.accumulate(p, gp);
          off += p.cols();
        }
      },
      "concat_cols");
}

Var gather_rows(const Var& a, std::span<const std::size_t> rows) {
  const Tensor& x = a.value();
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  Tensor y(idx.size(), x.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= x.rows()) throw ShapeError("gather_rows index out of range");
    for (std::size_t j = 0; j < x.cols(); ++j) y(i, j) = x(idx[i], j);
  }
  return tape_of(a).record(
      std::move(y), {a},
      [a, idx](const Tensor& g, Tape& t) {
        Tensor ga(a.rows(), a.cols());
        for (std::size_t i = 0; i < idx.size(); ++i)
          for (std::size_t j = 0; j < ga.cols(); ++j) ga(idx[i], j) += g(i, j);
        t.accumulate(a, ga);
      },
      "gather_rows");
}

Var select_cols(const Var& a, std::span<const std::size_t> cols) {
  const Tensor& x = a.value();
  if (cols.size() != x.rows()) throw ShapeError("select_cols needs one index per row");
  std::vector<std::size_t> idx(cols.begin(), cols.end());
  Tensor y(x.rows(), 1);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= x.cols()) throw ShapeError("select_cols index out of range");
    y(i, 0) = x(i, idx[i]);
  }
  return tape_of(a).record(
      std::move(y), {a},
      [a, idx](const Tensor& g, Tape& t) {
        Tensor ga(a.rows(), a.cols());
        for (std::size_t i = 0; i < idx.size(); ++i) ga(i, idx[i]) = g(i, 0);
        t.accumulate(a, ga);
      },
      "select_cols");
}

Var log_softmax_rows(const Var& a) {
  const Tensor& x = a.value();
  Tensor y(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < x.cols(); ++j) mx = std::max(mx, x(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) s += std::exp(x(i, j) - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < x.cols(); ++j) y(i, j) = x(i, j) - lse;
  }
  Tape& t = tape_of(a);
  const std::size_t out_id = t.size();
  return t.record(
      std::move(y), {a},
      [a, out_id](const Tensor& g, Tape& tp) {
        const Tensor& yv = tp.value(out_id);
        Tensor ga(yv.rows(), yv.cols());
        for (std::size_t i = 0; i < yv.rows(); ++i) {
          double gs = 0.0;
          for (std::size_t j = 0; j < yv.cols(); ++j) gs += g(i, j);
          for (std::size_t j = 0; j < yv.cols(); ++j) ga(i, j) = g(i, j) - std::exp(yv(i, j)) * gs;
        }
        tp.accumulate(a, ga);
      },
      "log_softmax_rows");
}

Var scatter_symmetric(const Var& values, std::span<const std::pair<std::size_t, std::size_t>> edges,
                      std::size_t n) {
  const Tensor& v = values.value();
  if (v.size() != edges.size()) throw ShapeError("scatter_symmetric: one value per edge required");
  std::vector<std::pair<std::size_t, std::size_t>> es(edges.begin(), edges.end());
  Tensor y(n, n);
  for (std::size_t e = 0; e < es.size(); ++e) {
    const auto [i, j] = es[e];
    if (i >= n || j >= n || i == j) throw ShapeError("scatter_symmetric: bad edge");
    y(i, j) += v[e];
    y(j, i) += v[e];
  }
  return tape_of(values).record(
      std::move(y), {values},
      [values, es](const Tensor& g, Tape& t) {
        Tensor gv(values.rows(), values.cols());
        for (std::size_t e = 0; e < es.size(); ++e) gv[e] = g(es[e].first, es[e].second) + g(es[e].second, es[e].first);
        t.accumulate(values, gv);
      },
      "scatter_symmetric");
}

}  // namespace hamil
