#include "spdgeo/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "spdgeo/fisher.hpp"

namespace spdgeo::ad {

std::string to_string(const Shape& s) {
  const char* names[] = {"scalar", "vector", "matrix", "sym"};
  return std::string(names[static_cast<int>(s.kind)]) + "(" + std::to_string(s.rows) + "x" +
         std::to_string(s.cols) + ")";
}

const Mat& Var::value() const { return tape_->value(id_); }
const Shape& Var::shape() const { return tape_->shape(id_); }
double Var::scalar() const { return value()(0, 0); }

void AdjointSink::add(std::size_t input, const Mat& contribution) {
  tape_.accumulate(inputs_[input], contribution);
}

Var Tape::leaf(Mat value, Kind kind) {
  const Shape shape{kind, static_cast<int>(value.rows()), static_cast<int>(value.cols())};
  if (kind == Kind::Sym) value = mat::symmetrize(value);
  nodes_.push_back(Node{std::move(value), Mat{}, shape, {}, {}, true, false});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::constant(Mat value, Kind kind) {
  const Shape shape{kind, static_cast<int>(value.rows()), static_cast<int>(value.cols())};
  nodes_.push_back(Node{std::move(value), Mat{}, shape, {}, {}, false, false});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::record(Mat value, Shape shape, std::vector<int> inputs, BackwardFn fn) {
  bool rg = false;
  for (int id : inputs) rg = rg || nodes_[static_cast<std::size_t>(id)].requires_grad;
  if (!rg) fn = nullptr;
  nodes_.push_back(Node{std::move(value), Mat{}, shape, std::move(inputs), std::move(fn), rg, false});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

void Tape::accumulate(int id, const Mat& contribution) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.requires_grad) return;
  ++accumulations_;
  if (!n.has_grad) {
    n.grad = n.shape.kind == Kind::Sym ? mat::symmetrize(contribution) : contribution;
    n.has_grad = true;
  } else if (n.shape.kind == Kind::Sym) {
    n.grad += mat::symmetrize(contribution);
  } else {
    n.grad += contribution;
  }
}

void Tape::backward(const Var& loss) {
  if (loss.shape().kind != Kind::Scalar) {
    throw ShapeError("backward: loss must be scalar, got " + to_string(loss.shape()));
  }
  if (backward_done_) throw Error("backward: tape already differentiated");
  backward_done_ = true;
  accumulations_ = 0;
  Node& root = nodes_[static_cast<std::size_t>(loss.id())];
  root.grad = Mat::Ones(1, 1);
  root.has_grad = true;
  for (int id = loss.id(); id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.has_grad || !n.backward) continue;
    AdjointSink sink(*this, n.inputs);
    n.backward(n.grad, sink);
  }
}

Mat Tape::grad(const Var& v) const {
  const Node& n = nodes_[static_cast<std::size_t>(v.id())];
  if (!n.has_grad) return Mat::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

std::size_t Tape::edge_count() const noexcept {
  std::size_t edges = 0;
  for (const auto& n : nodes_) {
    if (!n.backward) continue;
    for (int id : n.inputs) edges += nodes_[static_cast<std::size_t>(id)].requires_grad ? 1 : 0;
  }
  return edges;
}

// ---------------------------------------------------------------------------

namespace {

Kind kind_for(Eigen::Index rows, Eigen::Index cols) {
  if (rows == 1 && cols == 1) return Kind::Scalar;
  if (cols == 1) return Kind::Vector;
  return Kind::Matrix;
}

Shape shape_of(const Mat& m) {
  return {kind_for(m.rows(), m.cols()), static_cast<int>(m.rows()), static_cast<int>(m.cols())};
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.value().rows() != b.value().rows() || a.value().cols() != b.value().cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

void require_scalar(const Var& a, const char* op) {
  if (a.value().size() != 1) throw ShapeError(std::string(op) + ": expected a scalar, got " + to_string(a.shape()));
}

void require_square(const Var& a, const char* op) {
  if (a.value().rows() != a.value().cols()) {
    throw ShapeError(std::string(op) + ": expected a square node, got " + to_string(a.shape()));
  }
}

Shape sym_shape(Eigen::Index d) { return Shape::sym(static_cast<int>(d)); }

/// U ((U^T G U) o Phi) U^T
Mat daleckii_krein(const EigDecomposition& e, const Mat& phi, const Mat& g) {
  const Mat inner = (e.vectors.transpose() * g * e.vectors).cwiseProduct(phi);
  return mat::symmetrize(e.vectors * inner * e.vectors.transpose());
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Shape s = a.shape();
  if (a.shape().kind != b.shape().kind && s.kind == Kind::Sym) s.kind = Kind::Matrix;
  return a.tape().record(a.value() + b.value(), s, {a.id(), b.id()},
                         [](const Mat& g, AdjointSink& sink) {
                           sink.add(0, g);
                           sink.add(1, g);
                         });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Shape s = a.shape();
  if (a.shape().kind != b.shape().kind && s.kind == Kind::Sym) s.kind = Kind::Matrix;
  return a.tape().record(a.value() - b.value(), s, {a.id(), b.id()},
                         [](const Mat& g, AdjointSink& sink) {
                           sink.add(0, g);
                           sink.add(1, -g);
                         });
}

Var scale(const Var& a, double s) {
  return a.tape().record(s * a.value(), a.shape(), {a.id()},
                         [s](const Mat& g, AdjointSink& sink) { sink.add(0, s * g); });
}

Var add_scalar(const Var& a, double s) {
  Mat v = a.value().array() + s;
  Shape shape = a.shape();
  return a.tape().record(std::move(v), shape, {a.id()},
                         [](const Mat& g, AdjointSink& sink) { sink.add(0, g); });
}

Var mul(const Var& scalar, const Var& x) {
  require_scalar(scalar, "mul");
  const double s = scalar.scalar();
  const Mat xv = x.value();
  return x.tape().record(s * xv, x.shape(), {scalar.id(), x.id()},
                         [s, xv](const Mat& g, AdjointSink& sink) {
                           sink.add(0, Mat::Constant(1, 1, g.cwiseProduct(xv).sum()));
                           sink.add(1, s * g);
                         });
}

Var div(const Var& a, const Var& b) {
  require_scalar(a, "div");
  require_scalar(b, "div");
  const double av = a.scalar();
  const double bv = b.scalar();
  return a.tape().record(Mat::Constant(1, 1, av / bv), Shape::scalar(), {a.id(), b.id()},
                         [av, bv](const Mat& g, AdjointSink& sink) {
                           sink.add(0, g / bv);
                           sink.add(1, -g * (av / (bv * bv)));
                         });
}

Var matmul(const Var& a, const Var& b) {
  if (a.value().cols() != b.value().rows()) {
    throw ShapeError("matmul: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  const Mat av = a.value();
  const Mat bv = b.value();
  Mat out = av * bv;
  const Shape s = shape_of(out);
  return a.tape().record(std::move(out), s, {a.id(), b.id()},
                         [av, bv](const Mat& g, AdjointSink& sink) {
                           sink.add(0, g * bv.transpose());
                           sink.add(1, av.transpose() * g);
                         });
}

Var transpose(const Var& a) {
  Mat out = a.value().transpose();
  Shape s = a.shape().kind == Kind::Sym ? a.shape() : shape_of(out);
  return a.tape().record(std::move(out), s, {a.id()},
                         [](const Mat& g, AdjointSink& sink) { sink.add(0, g.transpose()); });
}

Var sum(const Var& a) {
  const auto r = a.value().rows();
  const auto c = a.value().cols();
  return a.tape().record(Mat::Constant(1, 1, a.value().sum()), Shape::scalar(), {a.id()},
                         [r, c](const Mat& g, AdjointSink& sink) { sink.add(0, Mat::Constant(r, c, g(0, 0))); });
}

Var element(const Var& v, int i) {
  if (v.value().cols() != 1 || i < 0 || i >= v.value().rows()) {
    throw ShapeError("element: index " + std::to_string(i) + " out of range for " + to_string(v.shape()));
  }
  const auto n = v.value().rows();
  return v.tape().record(Mat::Constant(1, 1, v.value()(i, 0)), Shape::scalar(), {v.id()},
                         [n, i](const Mat& g, AdjointSink& sink) {
                           Mat out = Mat::Zero(n, 1);
                           out(i, 0) = g(0, 0);
                           sink.add(0, out);
                         });
}

Var mean(std::span<const Var> xs) {
  if (xs.empty()) throw EmptyInput("mean: no inputs");
  Mat acc = Mat::Zero(xs.front().value().rows(), xs.front().value().cols());
  std::vector<int> ids;
  ids.reserve(xs.size());
  for (const auto& x : xs) {
    require_same_shape(xs.front(), x, "mean");
    acc += x.value();
    ids.push_back(x.id());
  }
  const double inv = 1.0 / static_cast<double>(xs.size());
  acc *= inv;
  const std::size_t n = xs.size();
  return xs.front().tape().record(std::move(acc), xs.front().shape(), std::move(ids),
                                  [n, inv](const Mat& g, AdjointSink& sink) {
                                    const Mat share = inv * g;
                                    for (std::size_t k = 0; k < n; ++k) sink.add(k, share);
                                  });
}

// ---------------------------------------------------------------------------

Var congruence(const Var& c, const Var& w) {
  require_square(c, "congruence");
  if (w.value().rows() != c.value().rows()) {
    throw ShapeError("congruence: C is " + to_string(c.shape()) + ", W is " + to_string(w.shape()));
  }
  const Mat cv = c.value();
  const Mat wv = w.value();
  Mat out = mat::congruence(cv, wv);
  const auto d = out.rows();
  return c.tape().record(std::move(out), sym_shape(d), {c.id(), w.id()},
                         [cv, wv](const Mat& g, AdjointSink& sink) {
                           sink.add(0, wv * g * wv.transpose());
                           sink.add(1, 2.0 * (cv * wv * g));
                         });
}

Var add_identity(const Var& c, double eps) {
  require_square(c, "add_identity");
  Mat out = c.value();
  out.diagonal().array() += eps;
  return c.tape().record(std::move(out), c.shape(), {c.id()},
                         [](const Mat& g, AdjointSink& sink) { sink.add(0, g); });
}

Var eigenvalues(const Var& c) {
  require_square(c, "eigenvalues");
  EigDecomposition e = mat::sym_eig(c.value());
  Mat values = e.values;
  const auto n = values.rows();
  return c.tape().record(std::move(values), Shape::vector(static_cast<int>(n)), {c.id()},
                         [e = std::move(e)](const Mat& g, AdjointSink& sink) {
                           sink.add(0, (e.vectors * g.col(0).asDiagonal()) * e.vectors.transpose());
                         });
}

Mat log_divided_differences(const Vec& lambda) {
  const auto n = lambda.size();
  const double tiny = 1e-12 * lambda.cwiseAbs().maxCoeff();
  Mat phi(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      const double gap = lambda(i) - lambda(j);
      if (i == j || std::abs(gap) <= tiny) {
        phi(i, j) = 1.0 / lambda(i);
      } else {
        phi(i, j) = std::log1p(gap / lambda(j)) / gap;
      }
    }
  }
  return phi;
}

Mat exp_divided_differences(const Vec& lambda) {
  const auto n = lambda.size();
  const double tiny = 1e-12 * std::max(1.0, lambda.cwiseAbs().maxCoeff());
  Mat phi(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      const double gap = lambda(i) - lambda(j);
      if (i == j || std::abs(gap) <= tiny) {
        phi(i, j) = std::exp(lambda(i));
      } else {
        phi(i, j) = std::exp(lambda(j)) * std::expm1(gap) / gap;
      }
    }
  }
  return phi;
}

Var matrix_log(const Var& c) {
  require_square(c, "matrix_log");
  EigDecomposition e = mat::sym_eig(c.value());
  mat::clamp_spectrum(e.values);
  Mat out = mat::spectral_map(e, [](double l) { return std::log(l); });
  Mat phi = log_divided_differences(e.values);
  return c.tape().record(std::move(out), sym_shape(e.values.size()), {c.id()},
                         [e = std::move(e), phi = std::move(phi)](const Mat& g, AdjointSink& sink) {
                           sink.add(0, daleckii_krein(e, phi, g));
                         });
}

Var matrix_exp(const Var& s) {
  require_square(s, "matrix_exp");
  EigDecomposition e = mat::sym_eig(s.value());
  if (e.values.maxCoeff() > kMaxExpArgument) {
    throw NumericalError("matrix_exp: overflow (eigenvalue " + std::to_string(e.values.maxCoeff()) + ")");
  }
  Mat out = mat::spectral_map(e, [](double l) { return std::exp(l); });
  Mat phi = exp_divided_differences(e.values);
  return s.tape().record(std::move(out), sym_shape(e.values.size()), {s.id()},
                         [e = std::move(e), phi = std::move(phi)](const Mat& g, AdjointSink& sink) {
                           sink.add(0, daleckii_krein(e, phi, g));
                         });
}

Var matrix_exp_skew(const Var& a) {
  require_square(a, "matrix_exp_skew");
  const Mat k = a.value() - a.value().transpose();
  Mat r = mat::expm(k);
  const auto n = k.rows();
  return a.tape().record(std::move(r), Shape::matrix(static_cast<int>(n), static_cast<int>(n)), {a.id()},
                         [k, n](const Mat& g, AdjointSink& sink) {
                           // Adjoint of the Frechet derivative: upper-right block of
                           // exp([[K^T, G], [0, K^T]]).
                           Mat block = Mat::Zero(2 * n, 2 * n);
                           block.topLeftCorner(n, n) = k.transpose();
                           block.bottomRightCorner(n, n) = k.transpose();
                           block.topRightCorner(n, n) = g;
                           const Mat kbar = mat::expm(block).topRightCorner(n, n);
                           sink.add(0, kbar - kbar.transpose());
                         });
}

Var merge(const Var& a, const Var& b) {
  return matrix_exp(scale(add(matrix_log(a), matrix_log(b)), 0.5));
}

Var log_stabilized_congruence(const Var& c, const Var& w, double eps) {
  require_square(c, "log_stabilized_congruence");
  if (w.value().rows() != c.value().rows()) {
    throw ShapeError("log_stabilized_congruence: C is " + to_string(c.shape()) + ", W is " + to_string(w.shape()));
  }
  const Mat cv = c.value();
  const Mat wv = w.value();
  Mat inner = mat::congruence(cv, wv);
  inner.diagonal().array() += eps;
  EigDecomposition e = mat::sym_eig(inner);
  mat::clamp_spectrum(e.values);
  Mat phi = log_divided_differences(e.values);
  Mat out = mat::log_stabilized_congruence(cv, wv, eps);
  const auto d = out.rows();
  return c.tape().record(std::move(out), sym_shape(d), {c.id(), w.id()},
                         [cv, wv, e = std::move(e), phi = std::move(phi)](const Mat& g, AdjointSink& sink) {
                           const Mat ga = daleckii_krein(e, phi, g);
                           sink.add(0, wv * ga * wv.transpose());
                           sink.add(1, 2.0 * (cv * wv * ga));
                         });
}

Var frobenius_norm_sq(const Var& x) {
  const Mat xv = x.value();
  return x.tape().record(Mat::Constant(1, 1, xv.squaredNorm()), Shape::scalar(), {x.id()},
                         [xv](const Mat& g, AdjointSink& sink) { sink.add(0, 2.0 * g(0, 0) * xv); });
}

Var trace(const Var& x) {
  require_square(x, "trace");
  const auto n = x.value().rows();
  return x.tape().record(Mat::Constant(1, 1, x.value().trace()), Shape::scalar(), {x.id()},
                         [n](const Mat& g, AdjointSink& sink) { sink.add(0, g(0, 0) * Mat::Identity(n, n)); });
}

Var offdiag_norm_sq(const Var& x) {
  require_square(x, "offdiag_norm_sq");
  Mat off = x.value();
  off.diagonal().setZero();
  const double v = off.squaredNorm();
  return x.tape().record(Mat::Constant(1, 1, v), Shape::scalar(), {x.id()},
                         [off = std::move(off)](const Mat& g, AdjointSink& sink) { sink.add(0, 2.0 * g(0, 0) * off); });
}

Var vec_upper(const Var& s) {
  require_square(s, "vec_upper");
  const int n = static_cast<int>(s.value().rows());
  Mat z = mat::vec_upper(s.value());
  const auto len = z.rows();
  return s.tape().record(std::move(z), Shape::vector(static_cast<int>(len)), {s.id()},
                         [n](const Mat& g, AdjointSink& sink) {
                           const double r = 1.0 / std::sqrt(2.0);
                           Mat out(n, n);
                           int k = 0;
                           for (int i = 0; i < n; ++i) {
                             out(i, i) = g(k++, 0);
                             for (int j = i + 1; j < n; ++j) {
                               out(i, j) = r * g(k++, 0);
                               out(j, i) = out(i, j);
                             }
                           }
                           sink.add(0, out);
                         });
}

Var softplus(const Var& x) {
  const Mat xv = x.value();
  Mat out = xv.unaryExpr([](double v) { return v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); });
  return x.tape().record(std::move(out), x.shape(), {x.id()}, [xv](const Mat& g, AdjointSink& sink) {
    const Mat sig = xv.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
    sink.add(0, g.cwiseProduct(sig));
  });
}

// ---------------------------------------------------------------------------

Var stack_rows(std::span<const Var> rows) {
  if (rows.empty()) throw EmptyInput("stack_rows: no rows");
  const auto p = rows.front().value().rows();
  Mat out(static_cast<Eigen::Index>(rows.size()), p);
  std::vector<int> ids;
  ids.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].value().cols() != 1 || rows[i].value().rows() != p) {
      throw ShapeError("stack_rows: row " + std::to_string(i) + " is " + to_string(rows[i].shape()));
    }
    out.row(static_cast<Eigen::Index>(i)) = rows[i].value().col(0).transpose();
    ids.push_back(rows[i].id());
  }
  const std::size_t n = rows.size();
  const Shape s = Shape::matrix(static_cast<int>(n), static_cast<int>(p));
  return rows.front().tape().record(std::move(out), s, std::move(ids), [n](const Mat& g, AdjointSink& sink) {
    for (std::size_t i = 0; i < n; ++i) sink.add(i, g.row(static_cast<Eigen::Index>(i)).transpose());
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  if (x.value().cols() != w.value().rows()) {
    throw ShapeError("linear: X is " + to_string(x.shape()) + ", W is " + to_string(w.shape()));
  }
  const bool has_bias = b.id() >= 0;
  if (has_bias && (b.value().cols() != 1 || b.value().rows() != w.value().cols())) {
    throw ShapeError("linear: bias is " + to_string(b.shape()));
  }
  const Mat xv = x.value();
  const Mat wv = w.value();
  Mat out = xv * wv;
  if (has_bias) out.rowwise() += b.value().col(0).transpose();
  const Shape s = Shape::matrix(static_cast<int>(out.rows()), static_cast<int>(out.cols()));
  std::vector<int> inputs{x.id(), w.id()};
  if (has_bias) inputs.push_back(b.id());
  return x.tape().record(std::move(out), s, std::move(inputs), [xv, wv, has_bias](const Mat& g, AdjointSink& sink) {
    sink.add(0, g * wv.transpose());
    sink.add(1, xv.transpose() * g);
    if (has_bias) sink.add(2, g.colwise().sum().transpose());
  });
}

Var log_softmax(const Var& logits) {
  const Mat& z = logits.value();
  Mat out(z.rows(), z.cols());
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const double m = z.row(i).maxCoeff();
    const double lse = m + std::log((z.row(i).array() - m).exp().sum());
    out.row(i) = z.row(i).array() - lse;
  }
  Mat probs = out.array().exp();
  const Shape s = logits.shape();
  return logits.tape().record(std::move(out), s, {logits.id()}, [probs = std::move(probs)](const Mat& g, AdjointSink& sink) {
    Mat gin = g;
    for (Eigen::Index i = 0; i < g.rows(); ++i) gin.row(i) -= g.row(i).sum() * probs.row(i);
    sink.add(0, gin);
  });
}

Var cross_entropy(const Var& log_probs, std::span<const int> labels) {
  const Mat& lp = log_probs.value();
  if (static_cast<std::size_t>(lp.rows()) != labels.size()) {
    throw ShapeError("cross_entropy: " + std::to_string(lp.rows()) + " rows vs " + std::to_string(labels.size()) + " labels");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= lp.cols()) throw ShapeError("cross_entropy: label out of range");
    total -= lp(static_cast<Eigen::Index>(i), labels[i]);
  }
  const double n = static_cast<double>(labels.size());
  std::vector<int> y(labels.begin(), labels.end());
  const auto rows = lp.rows();
  const auto cols = lp.cols();
  return log_probs.tape().record(Mat::Constant(1, 1, total / n), Shape::scalar(), {log_probs.id()},
                                 [y = std::move(y), n, rows, cols](const Mat& g, AdjointSink& sink) {
                                   Mat out = Mat::Zero(rows, cols);
                                   for (std::size_t i = 0; i < y.size(); ++i) out(static_cast<Eigen::Index>(i), y[i]) = -g(0, 0) / n;
                                   sink.add(0, out);
                                 });
}

Var fisher_stats(const Var& z, std::span<const int> actions, std::span<const int> subjects) {
  const Mat zv = z.value();
  const FisherStats st = spdgeo::fisher_stats(zv, actions, subjects);
  Mat out(4, 1);
  out << st.within_action, st.between_action, st.within_subject, st.between_subject;

  // Per-row group means, laid out as matrices so the adjoint is a few
  // vectorized expressions.
  const auto n = zv.rows();
  Mat mu_a(n, zv.cols());
  Mat mu_s(n, zv.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto ia = std::find(st.action_labels.begin(), st.action_labels.end(), actions[static_cast<std::size_t>(i)]) -
                    st.action_labels.begin();
    const auto is = std::find(st.subject_labels.begin(), st.subject_labels.end(), subjects[static_cast<std::size_t>(i)]) -
                    st.subject_labels.begin();
    mu_a.row(i) = st.action_means[static_cast<std::size_t>(ia)].transpose();
    mu_s.row(i) = st.subject_means[static_cast<std::size_t>(is)].transpose();
  }
  const Vec mu = st.global_mean;
  return z.tape().record(std::move(out), Shape::vector(4), {z.id()},
                         [zv, mu_a = std::move(mu_a), mu_s = std::move(mu_s), mu](const Mat& g, AdjointSink& sink) {
                           const double c = 2.0 / static_cast<double>(zv.rows());
                           Mat centred_a = mu_a;
                           centred_a.rowwise() -= mu.transpose();
                           Mat centred_s = mu_s;
                           centred_s.rowwise() -= mu.transpose();
                           const Mat out = c * (g(0, 0) * (zv - mu_a) + g(1, 0) * centred_a +
                                                g(2, 0) * (zv - mu_s) + g(3, 0) * centred_s);
                           sink.add(0, out);
                         });
}

}  // namespace spdgeo::ad
