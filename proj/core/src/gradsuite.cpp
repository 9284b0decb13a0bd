#include "spdgeo/gradsuite.hpp"

#include <algorithm>
#include <chrono>
#include <functional>
#include <random>

#include "spdgeo/align.hpp"
#include "spdgeo/classify.hpp"
#include "spdgeo/optim.hpp"
#include "spdgeo/unet.hpp"

namespace spdgeo {

bool GradSuiteReport::passed() const {
  return !cases.empty() && std::all_of(cases.begin(), cases.end(), [](const GradSuiteCase& c) { return c.passed; });
}

namespace {

using ad::GradInput;
using ad::Kind;
using ad::Tape;
using ad::Var;

class Gen {
 public:
  explicit Gen(std::uint64_t seed) : rng_(seed) {}

  double normal() { return normal_(rng_); }
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng_); }

  Mat gaussian(Eigen::Index r, Eigen::Index c) {
    Mat m(r, c);
    for (Eigen::Index j = 0; j < c; ++j)
      for (Eigen::Index i = 0; i < r; ++i) m(i, j) = normal();
    return m;
  }
  Mat symmetric(int n) { return mat::symmetrize(gaussian(n, n)); }
  Mat orthogonal(int n) {
    Eigen::HouseholderQR<Mat> qr(gaussian(n, n));
    return qr.householderQ();
  }
  /// Eigenvalues log-uniform in [1, cond].
  Mat spd(int n, double cond) {
    Vec l(n);
    for (int i = 0; i < n; ++i) l(i) = std::exp(std::uniform_real_distribution<double>(0.0, std::log(cond))(rng_));
    const Mat q = orthogonal(n);
    return mat::symmetrize(q * l.asDiagonal() * q.transpose());
  }
  /// Two eigenvalues 1e-10 apart.
  Mat near_degenerate(int n) {
    Vec l = Vec::LinSpaced(n, 1.0, 3.0);
    if (n > 1) l(1) = l(0) + 1e-10;
    const Mat q = orthogonal(n);
    return mat::symmetrize(q * l.asDiagonal() * q.transpose());
  }

 private:
  std::mt19937_64 rng_;
  std::normal_distribution<double> normal_;
};

/// sum(G o op(x)) for a random fixed G, so every output entry is exercised.
double check_op(Gen& g, const std::function<Var(const Var&)>& op, const Mat& x, Kind kind, double step) {
  Tape probe;
  const Mat out = op(probe.constant(x, kind)).value();
  const Mat weights = g.gaussian(out.rows(), out.cols());
  const GradInput in{x, kind};
  return ad::check_gradient(
             [&](Tape& t, std::span<const Var> v) {
               const Var y = op(v[0]);
               return ad::trace(ad::matmul(ad::transpose(t.constant(weights)), y));
             },
             std::span<const GradInput>(&in, 1), step)
      .max_rel_error;
}

/// Small labelled batch: `per_cell` items for every (subject, class) pair.
struct Batch {
  int dim = 0;
  std::vector<Mat> covs;
  std::vector<int> actions;
  std::vector<int> subjects;

  CovarianceSet as_set() const {
    std::vector<CovItem> items;
    for (std::size_t i = 0; i < covs.size(); ++i) items.push_back({subjects[i], actions[i], SpdMatrix(covs[i])});
    return CovarianceSet(dim, std::move(items));
  }
};

Batch random_batch(Gen& g, int dim, int classes, int subjects, int per_cell) {
  Batch b;
  b.dim = dim;
  for (int s = 1; s <= subjects; ++s)
    for (int k = 0; k < classes; ++k)
      for (int i = 0; i < per_cell; ++i) {
        b.covs.push_back(g.spd(dim, 10.0));
        b.actions.push_back(k);
        b.subjects.push_back(s);
      }
  return b;
}

using Runner = std::function<double(Gen&, int /*instance*/, const GradSuiteOptions&)>;

struct Case {
  std::string name;
  Runner run;
};

int cycle_dim(int instance, int lo, int hi) { return lo + instance % (hi - lo + 1); }

std::vector<Case> build_cases() {
  std::vector<Case> cs;
  auto unary = [&cs](std::string name, std::function<Var(const Var&)> op,
                     std::function<Mat(Gen&, int)> point, Kind kind, int lo = 2) {
    cs.push_back({std::move(name), [op, point, kind, lo](Gen& g, int t, const GradSuiteOptions& o) {
                    const int n = cycle_dim(t, lo, o.max_dim);
                    return check_op(g, op, point(g, n), kind, o.step);
                  }});
  };

  unary("add", [](const Var& x) { return ad::add(x, ad::scale(x, 0.5)); },
        [](Gen& g, int n) { return g.gaussian(n, 2); }, Kind::Matrix);
  unary("sub", [](const Var& x) { return ad::sub(ad::transpose(x), ad::scale(x, 2.0)); },
        [](Gen& g, int n) { return g.gaussian(n, n); }, Kind::Matrix);
  unary("add_scalar", [](const Var& x) { return ad::add_scalar(x, 0.3); },
        [](Gen& g, int n) { return g.gaussian(n, 1); }, Kind::Vector);
  unary("mul", [](const Var& x) { return ad::mul(ad::trace(x), x); },
        [](Gen& g, int n) { return g.gaussian(n, n); }, Kind::Matrix);
  unary("div", [](const Var& x) { return ad::div(ad::sum(x), ad::add_scalar(ad::frobenius_norm_sq(x), 1.0)); },
        [](Gen& g, int n) { return g.gaussian(n, 2); }, Kind::Matrix);
  unary("matmul", [](const Var& x) { return ad::matmul(x, ad::matmul(x, x)); },
        [](Gen& g, int n) { return g.gaussian(n, n); }, Kind::Matrix);
  unary("element", [](const Var& x) { return ad::mul(ad::element(x, 0), ad::element(x, 1)); },
        [](Gen& g, int n) { return g.gaussian(n, 1); }, Kind::Vector);
  unary("mean", [](const Var& x) {
          const std::vector<Var> xs{x, ad::scale(x, 3.0), ad::matmul(x, ad::transpose(x))};
          return ad::mean(xs);
        },
        [](Gen& g, int n) { return g.gaussian(n, n); }, Kind::Matrix);
  cs.push_back({"congruence/C", [](Gen& g, int t, const GradSuiteOptions& o) {
                  const int n = cycle_dim(t, 2, o.max_dim);
                  const Mat w = g.gaussian(n, std::max(1, n - 1));
                  return check_op(g, [w](const Var& x) { return ad::congruence(x, x.tape().constant(w)); },
                                  g.spd(n, 10.0), Kind::Sym, o.step);
                }});
  cs.push_back({"congruence/W", [](Gen& g, int t, const GradSuiteOptions& o) {
                  const int n = cycle_dim(t, 2, o.max_dim);
                  const Mat c = g.spd(n, 10.0);
                  return check_op(g, [c](const Var& x) { return ad::congruence(x.tape().constant(c, Kind::Sym), x); },
                                  g.gaussian(n, n + 1), Kind::Matrix, o.step);
                }});
  unary("add_identity", [](const Var& x) { return ad::add_identity(x, 1e-6); },
        [](Gen& g, int n) { return g.symmetric(n); }, Kind::Sym);
  unary("eigenvalues", [](const Var& x) { return ad::eigenvalues(x); },
        [](Gen& g, int n) { return g.spd(n, 20.0); }, Kind::Sym);
  unary("matrix_log", [](const Var& x) { return ad::matrix_log(x); },
        [](Gen& g, int n) { return g.spd(n, 50.0); }, Kind::Sym);
  unary("matrix_log/gap1e-10", [](const Var& x) { return ad::matrix_log(x); },
        [](Gen& g, int n) { return g.near_degenerate(n); }, Kind::Sym);
  unary("matrix_exp", [](const Var& x) { return ad::matrix_exp(x); },
        [](Gen& g, int n) { return g.symmetric(n); }, Kind::Sym);
  unary("matrix_exp/gap1e-10", [](const Var& x) { return ad::matrix_exp(x); },
        [](Gen& g, int n) { return g.near_degenerate(n); }, Kind::Sym);
  unary("matrix_exp_skew", [](const Var& x) { return ad::matrix_exp_skew(x); },
        [](Gen& g, int n) { return Mat(0.7 * g.gaussian(n, n)); }, Kind::Matrix);
  cs.push_back({"merge", [](Gen& g, int t, const GradSuiteOptions& o) {
                  const int n = cycle_dim(t, 2, o.max_dim);
                  const Mat b = g.spd(n, 5.0);
                  return check_op(g, [b](const Var& x) { return ad::merge(x, x.tape().constant(b, Kind::Sym)); },
                                  g.spd(n, 5.0), Kind::Sym, o.step);
                }});
  cs.push_back({"merge/gap1e-10", [](Gen& g, int t, const GradSuiteOptions& o) {
                  const int n = cycle_dim(t, 2, o.max_dim);
                  const Mat b = g.near_degenerate(n);
                  return check_op(g, [b](const Var& x) { return ad::merge(x, x.tape().constant(b, Kind::Sym)); },
                                  g.near_degenerate(n), Kind::Sym, o.step);
                }});
  cs.push_back({"log_stabilized_congruence/C", [](Gen& g, int t, const GradSuiteOptions& o) {
                  const int n = cycle_dim(t, 2, o.max_dim);
                  const Mat w = g.gaussian(n - 1, n);
                  return check_op(g, [w](const Var& x) { return ad::log_stabilized_congruence(x, x.tape().constant(w), 1e-3); },
                                  g.spd(n - 1, 10.0), Kind::Sym, o.step);
                }});
  cs.push_back({"log_stabilized_congruence/W", [](Gen& g, int t, const GradSuiteOptions& o) {
                  const int n = cycle_dim(t, 2, o.max_dim);
                  const Mat c = g.spd(n, 10.0);
                  const int out = t % 2 == 0 ? n + 1 : std::max(1, n - 1);
                  return check_op(g, [c](const Var& x) {
                                    return ad::log_stabilized_congruence(x.tape().constant(c, Kind::Sym), x, 1e-3);
                                  },
                                  g.gaussian(n, out), Kind::Matrix, o.step);
                }});
  unary("frobenius_norm_sq", [](const Var& x) { return ad::frobenius_norm_sq(x); },
        [](Gen& g, int n) { return g.gaussian(n, n); }, Kind::Matrix);
  unary("trace", [](const Var& x) { return ad::trace(x); }, [](Gen& g, int n) { return g.gaussian(n, n); },
        Kind::Matrix);
  unary("offdiag_norm_sq", [](const Var& x) { return ad::offdiag_norm_sq(x); },
        [](Gen& g, int n) { return g.symmetric(n); }, Kind::Sym);
  unary("vec_upper", [](const Var& x) { return ad::vec_upper(x); }, [](Gen& g, int n) { return g.symmetric(n); },
        Kind::Sym);
  unary("softplus", [](const Var& x) { return ad::softplus(x); },
        [](Gen& g, int n) { return Mat(3.0 * g.gaussian(n, 1)); }, Kind::Vector);
  unary("stack_rows", [](const Var& x) {
          const std::vector<Var> rows{x, ad::scale(x, -1.0), ad::softplus(x)};
          return ad::stack_rows(rows);
        },
        [](Gen& g, int n) { return g.gaussian(n, 1); }, Kind::Vector);
  cs.push_back({"linear", [](Gen& g, int t, const GradSuiteOptions& o) {
                  const int n = cycle_dim(t, 2, o.max_dim);
                  const GradInput in[3] = {{g.gaussian(5, n), Kind::Matrix},
                                           {g.gaussian(n, 3), Kind::Matrix},
                                           {g.gaussian(3, 1), Kind::Vector}};
                  const Mat weights = g.gaussian(5, 3);
                  return ad::check_gradient(
                             [&](Tape& tape, std::span<const Var> v) {
                               return ad::trace(ad::matmul(ad::transpose(tape.constant(weights)),
                                                           ad::linear(v[0], v[1], v[2])));
                             },
                             in, o.step)
                      .max_rel_error;
                }});
  unary("log_softmax", [](const Var& x) { return ad::log_softmax(x); },
        [](Gen& g, int n) { return g.gaussian(4, n); }, Kind::Matrix);
  cs.push_back({"cross_entropy", [](Gen& g, int t, const GradSuiteOptions& o) {
                  const int n = cycle_dim(t, 2, o.max_dim);
                  const std::vector<int> y{0, 1, n - 1, 1};
                  return check_op(g, [y](const Var& x) { return ad::cross_entropy(ad::log_softmax(x), y); },
                                  g.gaussian(4, n), Kind::Matrix, o.step);
                }});
  cs.push_back({"fisher_stats", [](Gen& g, int t, const GradSuiteOptions& o) {
                  const int n = cycle_dim(t, 2, o.max_dim);
                  const std::vector<int> a{0, 1, 0, 1, 2, 2, 0}, s{0, 0, 1, 1, 1, 0, 1};
                  return check_op(g, [a, s](const Var& x) { return ad::fisher_stats(x, a, s); },
                                  g.gaussian(7, n), Kind::Matrix, o.step);
                }});

  // --- full losses ---------------------------------------------------------

  cs.push_back({"loss/dcr", [](Gen& g, int t, const GradSuiteOptions& o) {
                  const int d = cycle_dim(t, 2, o.max_dim);
                  const Batch b = random_batch(g, d, 3, 2, 2);
                  std::vector<Mat> logs;
                  for (const auto& c : b.covs) logs.push_back(mat::log_spd(c));
                  DcrHyper h;
                  const int step = g.integer(0, h.steps);
                  const GradInput in[2] = {{0.3 * g.gaussian(d, d), Kind::Matrix},
                                           {Mat::Constant(1, 1, g.normal()), Kind::Scalar}};
                  return ad::check_gradient(
                             [&](Tape& tape, std::span<const Var> v) {
                               return dcr_loss(tape, v[0], v[1], logs, b.actions, h, step);
                             },
                             in, o.step)
                      .max_rel_error;
                }});

  auto unet_point = [](Gen& g, const Batch& b, double eps) {
    const CovarianceSet ds = b.as_set();
    const auto mats = ds.matrices();
    UNetWeights w = unet_init(mats, UNetDims::for_input(b.dim), eps);
    for (Mat* m : {&w.enc1, &w.enc2, &w.dec2, &w.dec1}) *m += 0.1 * g.gaussian(m->rows(), m->cols());
    return w;
  };

  cs.push_back({"loss/rifu", [unet_point](Gen& g, int t, const GradSuiteOptions& o) {
                  const int d = cycle_dim(t, 3, o.max_dim);
                  const Batch b = random_batch(g, d, 2, 2, 2);
                  const RifuConfig cfg;
                  const UNetWeights w = unet_point(g, b, cfg.eps);
                  const GradInput in[4] = {{w.enc1}, {w.enc2}, {w.dec2}, {w.dec1}};
                  return ad::check_gradient(
                             [&](Tape& tape, std::span<const Var> v) {
                               return rifu_loss(tape, {v[0], v[1], v[2], v[3]}, b.covs, b.actions, b.subjects, cfg);
                             },
                             in, o.step)
                      .max_rel_error;
                }});

  cs.push_back({"loss/rifunet", [unet_point](Gen& g, int t, const GradSuiteOptions& o) {
                  const int d = cycle_dim(t, 3, o.max_dim);
                  const Batch b = random_batch(g, d, 3, 2, 2);
                  const RifuNetConfig cfg;
                  const UNetWeights w = unet_point(g, b, cfg.eps);
                  const int p = mat::tangent_length(d);
                  const GradInput in[6] = {{w.enc1},
                                           {w.enc2},
                                           {w.dec2},
                                           {w.dec1},
                                           {0.3 * g.gaussian(p, 3), Kind::Matrix},
                                           {0.1 * g.gaussian(3, 1), Kind::Vector}};
                  return ad::check_gradient(
                             [&](Tape& tape, std::span<const Var> v) {
                               return rifunet_loss(tape, {v[0], v[1], v[2], v[3]}, v[4], v[5], b.covs, b.actions,
                                                   b.subjects, cfg);
                             },
                             in, o.step)
                      .max_rel_error;
                }});

  cs.push_back({"loss/dcnet", [](Gen& g, int t, const GradSuiteOptions& o) {
                  const int d = cycle_dim(t, 2, std::min(o.max_dim, 6));
                  const Batch b = random_batch(g, d, 3, 2, 1);
                  DcNetConfig cfg;
                  cfg.hidden = 16;
                  DcNetModel m = dcnet_init(b.as_set(), cfg, static_cast<std::uint64_t>(t));
                  std::vector<GradInput> in;
                  for (const auto& w : m.stack) in.push_back({w + 0.1 * g.gaussian(w.rows(), w.cols())});
                  in.push_back({m.head1});
                  in.push_back({0.3 * g.gaussian(cfg.hidden, 3)});
                  in.push_back({0.1 * g.gaussian(3, 1), Kind::Vector});
                  const std::size_t layers = m.stack.size();
                  return ad::check_gradient(
                             [&](Tape& tape, std::span<const Var> v) {
                               DcNetVars vars{{v.begin(), v.begin() + static_cast<std::ptrdiff_t>(layers)}, v[layers],
                                              v[layers + 1], v[layers + 2]};
                               return dcnet_loss(tape, vars, b.covs, b.actions, b.subjects, cfg);
                             },
                             in, o.step)
                      .max_rel_error;
                }});
  return cs;
}

}  // namespace

std::vector<std::string> gradient_suite_cases() {
  std::vector<std::string> names;
  for (const auto& c : build_cases()) names.push_back(c.name);
  return names;
}

GradSuiteReport run_gradient_suite(const GradSuiteOptions& opt, const std::string& filter) {
  if (opt.instances < 1 || opt.max_dim < 3 || !(opt.step > 0.0)) {
    throw Error("gradient suite: need instances >= 1, max_dim >= 3 and a positive step");
  }
  const auto start = std::chrono::steady_clock::now();
  GradSuiteReport report;
  std::uint64_t salt = 0;
  for (const auto& c : build_cases()) {
    ++salt;
    if (!filter.empty() && c.name.rfind(filter, 0) != 0) continue;
    Gen g(opt.seed * 1000003u + salt);
    GradSuiteCase out{c.name, 0.0, opt.instances, false};
    for (int t = 0; t < opt.instances; ++t) out.worst = std::max(out.worst, c.run(g, t, opt));
    out.passed = out.worst < opt.tolerance;
    report.cases.push_back(std::move(out));
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace spdgeo
