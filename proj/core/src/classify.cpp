#include "spdgeo/classify.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include <json.hpp>

#include "spdgeo/binio.hpp"
#include "spdgeo/fisher.hpp"

namespace spdgeo {

using nlohmann::json;

std::string_view classifier_name(ClassifierKind kind) {
  switch (kind) {
    case ClassifierKind::Mdm: return "mdm";
    case ClassifierKind::Tslr: return "tslr";
    case ClassifierKind::TsaLda: return "tsa-lda";
    case ClassifierKind::CspLda: return "csp-lda";
    case ClassifierKind::DcNet: return "dcnet";
    case ClassifierKind::RifuNet: return "rifunet";
  }
  return "?";
}

ClassifierKind parse_classifier_kind(std::string_view name) {
  for (auto k : {ClassifierKind::Mdm, ClassifierKind::Tslr, ClassifierKind::TsaLda, ClassifierKind::CspLda,
                 ClassifierKind::DcNet, ClassifierKind::RifuNet}) {
    if (classifier_name(k) == name) return k;
  }
  throw Error("unknown classifier '" + std::string(name) + "'");
}

int argmax_row(const Mat& scores, Eigen::Index i) {
  int best = 0;
  for (Eigen::Index k = 1; k < scores.cols(); ++k) {
    if (scores(i, k) > scores(i, best)) best = static_cast<int>(k);
  }
  return best;
}

std::vector<int> argmax_rows(const Mat& scores) {
  std::vector<int> out(static_cast<std::size_t>(scores.rows()));
  for (Eigen::Index i = 0; i < scores.rows(); ++i) out[static_cast<std::size_t>(i)] = argmax_row(scores, i);
  return out;
}

Mat softmax_rows(const Mat& logits) {
  Mat p(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    p.row(i) = (logits.row(i).array() - m).exp();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

namespace {

/// Number of classes, after checking every class has at least `min_count`
/// items.
int checked_classes(const CovarianceSet& ds, int min_count, const char* who) {
  if (ds.empty()) throw EmptyInput(std::string(who) + ": empty training set");
  const int k = ds.num_classes();
  std::vector<int> counts(static_cast<std::size_t>(k), 0);
  for (const auto& it : ds.items()) ++counts[static_cast<std::size_t>(it.label)];
  for (int c = 0; c < k; ++c) {
    if (counts[static_cast<std::size_t>(c)] < min_count) {
      throw TrainingError(std::string(who) + ": class " + std::to_string(c) + " has " +
                          std::to_string(counts[static_cast<std::size_t>(c)]) + " items, need " +
                          std::to_string(min_count));
    }
  }
  return k;
}

std::vector<Mat> raw_matrices(const CovarianceSet& ds) {
  std::vector<Mat> out;
  out.reserve(ds.size());
  for (const auto& it : ds.items()) out.push_back(it.cov.mat());
  return out;
}

Mat euclidean_mean(const CovarianceSet& ds) {
  Mat m = Mat::Zero(ds.dim(), ds.dim());
  for (const auto& it : ds.items()) m += it.cov.mat();
  return m / static_cast<double>(ds.size());
}

/// Eigenvectors by descending eigenvalue.
Mat descending_eigenvectors(const Mat& m) { return mat::sym_eig(m).vectors.rowwise().reverse(); }

void require_dim(int expected, const CovarianceSet& ds, const char* who) {
  if (ds.dim() != expected) {
    throw ShapeError(std::string(who) + ": model expects dim " + std::to_string(expected) + ", got " +
                     std::to_string(ds.dim()));
  }
}

/// Gathers the rows of a batch.
struct Batch {
  std::vector<Mat> covs;
  std::vector<int> actions;
  std::vector<int> subjects;

  void fill(std::span<const int> idx, const std::vector<Mat>& c, const std::vector<int>& a,
            const std::vector<int>& s) {
    covs.clear();
    actions.clear();
    subjects.clear();
    for (int i : idx) {
      const auto k = static_cast<std::size_t>(i);
      covs.push_back(c[k]);
      actions.push_back(a[k]);
      subjects.push_back(s[k]);
    }
  }
};

/// act (w W(A) - b B(A)) + sub (b B(S) - w W(S))
ad::Var fisher_penalty(const ad::Var& stats, const NetLossWeights& l) {
  using namespace ad;
  const Var action = sub(scale(element(stats, 0), l.w), scale(element(stats, 1), l.b));
  const Var subject = sub(scale(element(stats, 3), l.b), scale(element(stats, 2), l.w));
  return add(scale(action, l.act), scale(subject, l.sub));
}

/// Per-row logits z H1 H2 + b (or z H + b with `h2` empty). Row by row so a
/// prediction never depends on what else is in the batch.
Mat head_logits(const Mat& z, const Mat& h1, const Mat* h2, const Mat& bias) {
  Mat out(z.rows(), bias.rows());
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const Eigen::RowVectorXd hidden = z.row(i) * h1;
    if (h2) {
      out.row(i) = hidden * *h2 + bias.col(0).transpose();
    } else {
      out.row(i) = hidden + bias.col(0).transpose();
    }
  }
  return out;
}

}  // namespace

// --- MDM -------------------------------------------------------------------

MdmModel mdm_fit(const CovarianceSet& ds) {
  const int k = checked_classes(ds, 1, "mdm_fit");
  std::vector<std::vector<SpdMatrix>> by_class(static_cast<std::size_t>(k));
  for (const auto& it : ds.items()) by_class[static_cast<std::size_t>(it.label)].push_back(it.cov);
  MdmModel m;
  for (const auto& group : by_class) m.prototypes.push_back(karcher_mean(group));
  return m;
}

int mdm_predict(const MdmModel& m, const SpdMatrix& c) {
  int best = 0;
  double best_d = 0.0;
  for (std::size_t k = 0; k < m.prototypes.size(); ++k) {
    const double d = airm_distance(c, m.prototypes[k]);
    if (k == 0 || d < best_d) {
      best = static_cast<int>(k);
      best_d = d;
    }
  }
  return best;
}

// --- tangent space -----------------------------------------------------------

TangentMap TangentMap::fit(const CovarianceSet& ds) {
  if (ds.empty()) throw EmptyInput("TangentMap::fit: empty set");
  const auto mats = ds.matrices();
  TangentMap t;
  t.base = log_euclidean_mean(mats);
  t.whitener = mat::power_spd(t.base.mat(), -0.5);
  return t;
}

Vec TangentMap::features(const SpdMatrix& c) const {
  return mat::vec_upper(mat::log_spd(mat::congruence(c.mat(), whitener)));
}

Mat TangentMap::features(const CovarianceSet& ds) const {
  require_dim(base.dim(), ds, "tangent features");
  Mat z(static_cast<Eigen::Index>(ds.size()), mat::tangent_length(ds.dim()));
  for (std::size_t i = 0; i < ds.size(); ++i) z.row(static_cast<Eigen::Index>(i)) = features(ds[i].cov).transpose();
  return z;
}

// --- TSLR --------------------------------------------------------------------

TslrModel tslr_fit(const CovarianceSet& ds, const TslrConfig& cfg, std::uint64_t seed, ad::TrainLog* log) {
  const int k = checked_classes(ds, 1, "tslr_fit");
  if (k < 2) throw TrainingError("tslr_fit: need at least 2 classes");
  TslrModel m;
  m.config = cfg;
  m.tangent = TangentMap::fit(ds);
  const Mat x = m.tangent.features(ds);
  const auto labels = ds.labels();
  m.weights = Mat::Zero(x.cols(), k);
  m.bias = Mat::Zero(k, 1);
  std::vector<ad::ParamRef> params{{"tslr.weights", &m.weights}, {"tslr.bias", &m.bias, ad::Kind::Vector}};
  Mat xb;
  std::vector<int> yb;
  ad::TrainLog result = ad::train_adam(
      params, static_cast<int>(ds.size()), cfg.optim, seed,
      [&](ad::Tape& tape, std::span<const ad::Var> p, std::span<const int> idx, int) {
        xb.resize(static_cast<Eigen::Index>(idx.size()), x.cols());
        yb.clear();
        for (std::size_t r = 0; r < idx.size(); ++r) {
          xb.row(static_cast<Eigen::Index>(r)) = x.row(idx[r]);
          yb.push_back(labels[static_cast<std::size_t>(idx[r])]);
        }
        return ad::cross_entropy(ad::log_softmax(ad::linear(tape.constant(xb), p[0], p[1])), yb);
      });
  if (log) *log = std::move(result);
  return m;
}

Mat tslr_probabilities(const TslrModel& m, const CovarianceSet& ds) {
  return softmax_rows(head_logits(m.tangent.features(ds), m.weights, nullptr, m.bias));
}

std::vector<int> tslr_predict(const TslrModel& m, const CovarianceSet& ds) {
  return argmax_rows(head_logits(m.tangent.features(ds), m.weights, nullptr, m.bias));
}

// --- LDA ---------------------------------------------------------------------

LdaModel lda_fit(const Mat& x, std::span<const int> labels, int n_classes, double shrinkage) {
  if (x.rows() == 0) throw EmptyInput("lda_fit: no rows");
  if (static_cast<std::size_t>(x.rows()) != labels.size()) throw ShapeError("lda_fit: label count mismatch");
  if (!(shrinkage >= 0.0 && shrinkage <= 1.0)) throw Error("lda_fit: shrinkage must be in [0, 1]");
  const auto p = x.cols();
  std::vector<int> counts(static_cast<std::size_t>(n_classes), 0);
  Mat means = Mat::Zero(n_classes, p);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= n_classes) throw ShapeError("lda_fit: label out of range");
    ++counts[static_cast<std::size_t>(y)];
    means.row(y) += x.row(i);
  }
  for (int k = 0; k < n_classes; ++k) {
    if (counts[static_cast<std::size_t>(k)] < 2) {
      throw TrainingError("lda_fit: class " + std::to_string(k) + " needs at least 2 samples");
    }
    means.row(k) /= counts[static_cast<std::size_t>(k)];
  }
  Mat sigma = Mat::Zero(p, p);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Eigen::RowVectorXd d = x.row(i) - means.row(labels[static_cast<std::size_t>(i)]);
    sigma += d.transpose() * d;
  }
  sigma /= static_cast<double>(std::max<Eigen::Index>(1, x.rows() - n_classes));
  sigma = (1.0 - shrinkage) * sigma + shrinkage * (sigma.trace() / static_cast<double>(p)) * Mat::Identity(p, p);

  const Eigen::LLT<Mat> llt(mat::symmetrize(sigma));
  if (llt.info() != Eigen::Success) throw NumericalError("lda_fit: within-class covariance is singular");
  LdaModel m;
  m.shrinkage = shrinkage;
  m.means = means;
  m.coef = llt.solve(Mat(means.transpose()));
  m.offset.resize(n_classes);
  for (int k = 0; k < n_classes; ++k) {
    const double prior = static_cast<double>(counts[static_cast<std::size_t>(k)]) / static_cast<double>(x.rows());
    m.offset(k) = -0.5 * means.row(k).dot(m.coef.col(k)) + std::log(prior);
  }
  return m;
}

Mat lda_scores(const LdaModel& m, const Mat& x) {
  if (x.cols() != m.coef.rows()) throw ShapeError("lda_scores: feature length mismatch");
  Mat s = x * m.coef;
  s.rowwise() += m.offset.transpose();
  return s;
}

TsaLdaModel tsa_lda_fit(const CovarianceSet& ds, const TsaLdaConfig& cfg) {
  const int k = checked_classes(ds, 2, "tsa_lda_fit");
  TsaLdaModel m;
  m.config = cfg;
  m.tangent = TangentMap::fit(ds);
  const auto labels = ds.labels();
  m.lda = lda_fit(m.tangent.features(ds), labels, k, cfg.shrinkage);
  return m;
}

std::vector<int> tsa_lda_predict(const TsaLdaModel& m, const CovarianceSet& ds) {
  return argmax_rows(lda_scores(m.lda, m.tangent.features(ds)));
}

// --- CSP ---------------------------------------------------------------------

SpdMatrix standardize_channels(const SpdMatrix& c) {
  const Vec inv = c.mat().diagonal().cwiseSqrt().cwiseInverse();
  return SpdMatrix::unchecked(mat::symmetrize(inv.asDiagonal() * c.mat() * inv.asDiagonal()));
}

Mat csp_filters(const Mat& class_cov, const Mat& rest_cov, int m) {
  const auto c = class_cov.rows();
  if (m <= 0 || m % 2 != 0 || m > c) {
    throw Error("csp: filter count must be even and in [2, " + std::to_string(c) + "], got " + std::to_string(m));
  }
  const Mat total = mat::symmetrize(class_cov + rest_cov);
  if (!mat::is_strictly_pd(total)) throw NotPositiveDefinite("csp: total covariance is rank-deficient");
  const Mat p = mat::power_spd(total, -0.5);
  const EigDecomposition e = mat::sym_eig(mat::congruence(class_cov, p));
  Mat w(c, m);
  const int half = m / 2;
  for (int j = 0; j < half; ++j) {
    w.col(j) = p * e.vectors.col(c - 1 - j);   // largest ratio first
    w.col(half + j) = p * e.vectors.col(j);    // then smallest
  }
  return w;
}

namespace {

CovarianceSet csp_input(const CovarianceSet& ds, bool zscore) {
  if (!zscore) return ds;
  std::vector<SpdMatrix> out;
  out.reserve(ds.size());
  for (const auto& it : ds.items()) out.push_back(standardize_channels(it.cov));
  return ds.with_matrices(std::move(out));
}

Mat csp_raw_features(const std::vector<Mat>& filters, const CovarianceSet& ds) {
  Eigen::Index width = 0;
  for (const auto& w : filters) width += w.cols();
  Mat f(static_cast<Eigen::Index>(ds.size()), width);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    Eigen::Index col = 0;
    for (const auto& w : filters) {
      const Vec var = (w.transpose() * ds[i].cov.mat() * w).diagonal();
      f.block(static_cast<Eigen::Index>(i), col, 1, w.cols()) = var.array().log().matrix().transpose();
      col += w.cols();
    }
  }
  return f;
}

}  // namespace

CspModel csp_fit(const CovarianceSet& ds, const CspConfig& cfg) {
  const int k = checked_classes(ds, 1, "csp_fit");
  if (k < 2) throw TrainingError("csp_fit: need at least 2 classes");
  const CovarianceSet in = csp_input(ds, cfg.zscore);
  std::vector<Mat> class_mean(static_cast<std::size_t>(k), Mat::Zero(ds.dim(), ds.dim()));
  std::vector<int> counts(static_cast<std::size_t>(k), 0);
  for (const auto& it : in.items()) {
    class_mean[static_cast<std::size_t>(it.label)] += it.cov.mat();
    ++counts[static_cast<std::size_t>(it.label)];
  }
  for (int c = 0; c < k; ++c) class_mean[static_cast<std::size_t>(c)] /= counts[static_cast<std::size_t>(c)];

  CspModel m;
  m.config = cfg;
  const int pairings = k == 2 ? 1 : k;
  for (int c = 0; c < pairings; ++c) {
    Mat rest = Mat::Zero(ds.dim(), ds.dim());
    for (int j = 0; j < k; ++j) {
      if (j != c) rest += class_mean[static_cast<std::size_t>(j)];
    }
    m.filters.push_back(csp_filters(class_mean[static_cast<std::size_t>(c)], rest, cfg.filters));
  }
  const auto labels = in.labels();
  m.lda = lda_fit(csp_raw_features(m.filters, in), labels, k, cfg.shrinkage);
  return m;
}

CspModel csp_fit(const EpochSet& epochs, const CspConfig& cfg) { return csp_fit(estimate_covariances(epochs), cfg); }

Mat csp_features(const CspModel& m, const CovarianceSet& ds) {
  if (m.filters.empty()) throw Error("csp: model has no filters");
  require_dim(static_cast<int>(m.filters.front().rows()), ds, "csp");
  return csp_raw_features(m.filters, csp_input(ds, m.config.zscore));
}

std::vector<int> csp_predict(const CspModel& m, const CovarianceSet& ds) {
  return argmax_rows(lda_scores(m.lda, csp_features(m, ds)));
}

int csp_predict(const CspModel& m, const Mat& epoch) {
  const CovarianceSet one(static_cast<int>(epoch.rows()), {{0, 0, estimate_covariance(epoch)}});
  return csp_predict(m, one).front();
}

// --- SPD-DCNet -----------------------------------------------------------------

std::vector<int> dcnet_widths(int d) { return {d, 2 * d, 2 * d, d}; }

DcNetModel dcnet_init(const CovarianceSet& ds, const DcNetConfig& cfg, std::uint64_t seed) {
  const int k = checked_classes(ds, 1, "dcnet_init");
  const int d = ds.dim();
  Mat basis = Mat::Identity(2 * d, 2 * d);
  basis.topLeftCorner(d, d) = descending_eigenvectors(euclidean_mean(ds));

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  auto gaussian = [&](Eigen::Index r, Eigen::Index c) {
    Mat g(r, c);
    for (Eigen::Index j = 0; j < c; ++j)
      for (Eigen::Index i = 0; i < r; ++i) g(i, j) = normal(rng);
    return g;
  };

  DcNetModel m;
  m.config = cfg;
  const auto widths = dcnet_widths(d);
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const Mat w = basis.topLeftCorner(widths[l], widths[l + 1]);
    m.stack.push_back(w + cfg.init_noise * gaussian(w.rows(), w.cols()));
  }
  const int p = mat::tangent_length(d);
  m.head1 = gaussian(p, cfg.hidden) / std::sqrt(static_cast<double>(p));
  m.head2 = Mat::Zero(cfg.hidden, k);
  m.bias = Mat::Zero(k, 1);
  return m;
}

ad::Var dcnet_loss(ad::Tape& tape, const DcNetVars& v, std::span<const Mat> covs, std::span<const int> actions,
                   std::span<const int> subjects, const DcNetConfig& cfg) {
  using namespace ad;
  if (covs.empty()) throw EmptyInput("dcnet_loss: empty batch");
  std::vector<Var> rows;
  rows.reserve(covs.size());
  for (const auto& c0 : covs) {
    Var c = tape.constant(c0, Kind::Sym);
    for (const auto& w : v.stack) c = add_identity(congruence(c, w), cfg.eps);
    rows.push_back(vec_upper(matrix_log(c)));
  }
  const Var z = stack_rows(rows);
  const Var logits = linear(linear(z, v.head1), v.head2, v.bias);
  const Var ce = cross_entropy(log_softmax(logits), actions);
  const Var stats = fisher_stats(z, actions, subjects);
  return add(scale(ce, cfg.loss.ce), fisher_penalty(stats, cfg.loss));
}

DcNetModel dcnet_fit(const CovarianceSet& ds, const DcNetConfig& cfg, std::uint64_t seed, ad::TrainLog* log) {
  DcNetModel m = dcnet_init(ds, cfg, seed);
  std::vector<ad::ParamRef> params;
  for (std::size_t l = 0; l < m.stack.size(); ++l) params.push_back({"dcnet.W" + std::to_string(l + 1), &m.stack[l]});
  params.push_back({"dcnet.head1", &m.head1});
  params.push_back({"dcnet.head2", &m.head2});
  params.push_back({"dcnet.bias", &m.bias, ad::Kind::Vector});

  const auto covs = raw_matrices(ds);
  const auto actions = ds.labels();
  const auto subjects = ds.subject_ids();
  Batch batch;
  const std::size_t layers = m.stack.size();
  ad::TrainLog result = ad::train_adam(
      params, static_cast<int>(ds.size()), cfg.optim, seed + 1,
      [&](ad::Tape& tape, std::span<const ad::Var> p, std::span<const int> idx, int) {
        batch.fill(idx, covs, actions, subjects);
        DcNetVars v{{p.begin(), p.begin() + static_cast<std::ptrdiff_t>(layers)}, p[layers], p[layers + 1],
                    p[layers + 2]};
        return dcnet_loss(tape, v, batch.covs, batch.actions, batch.subjects, cfg);
      });
  if (log) *log = std::move(result);
  return m;
}

Mat dcnet_features(const DcNetModel& m, const CovarianceSet& ds) {
  require_dim(static_cast<int>(m.stack.front().rows()), ds, "dcnet");
  Mat z(static_cast<Eigen::Index>(ds.size()), m.head1.rows());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    Mat c = ds[i].cov.mat();
    for (const auto& w : m.stack) {
      c = mat::congruence(c, w);
      c.diagonal().array() += m.config.eps;
    }
    z.row(static_cast<Eigen::Index>(i)) = mat::vec_upper(mat::log_spd(c)).transpose();
  }
  return z;
}

Mat dcnet_logits(const DcNetModel& m, const CovarianceSet& ds) {
  return head_logits(dcnet_features(m, ds), m.head1, &m.head2, m.bias);
}

std::vector<int> dcnet_predict(const DcNetModel& m, const CovarianceSet& ds) { return argmax_rows(dcnet_logits(m, ds)); }

// --- RiFUNet -------------------------------------------------------------------

namespace {

UNetDims rifunet_dims(int d, const RifuNetConfig& cfg) {
  UNetDims dims = UNetDims::for_input(d);
  if (cfg.d1 > 0) dims.d1 = cfg.d1;
  if (cfg.d2 > 0) dims.d2 = cfg.d2;
  return dims;
}

Mat rifunet_raw_features(const UNetWeights& net, const CovarianceSet& ds) {
  Mat z(static_cast<Eigen::Index>(ds.size()), mat::tangent_length(ds.dim()));
  for (std::size_t i = 0; i < ds.size(); ++i) {
    z.row(static_cast<Eigen::Index>(i)) = mat::vec_upper(mat::log_spd(unet_apply(net, ds[i].cov.mat()))).transpose();
  }
  return z;
}

Vec row_mean(const Mat& z) {
  Vec acc = Vec::Zero(z.cols());
  for (Eigen::Index i = 0; i < z.rows(); ++i) acc += z.row(i).transpose();
  return acc * (1.0 / static_cast<double>(z.rows()));
}

}  // namespace

RifuNetModel rifunet_init(const CovarianceSet& ds, const RifuNetConfig& cfg) {
  const int k = checked_classes(ds, 1, "rifunet_init");
  RifuNetModel m;
  m.config = cfg;
  const auto mats = ds.matrices();
  m.net = unet_init(mats, rifunet_dims(ds.dim(), cfg), cfg.eps);
  const int p = mat::tangent_length(ds.dim());
  m.head = Mat::Zero(p, k);
  m.bias = Mat::Zero(k, 1);
  m.train_base = Vec::Zero(p);
  return m;
}

ad::Var rifunet_loss(ad::Tape& tape, const UNetVars& net, const ad::Var& head, const ad::Var& bias,
                     std::span<const Mat> covs, std::span<const int> actions, std::span<const int> subjects,
                     const RifuNetConfig& cfg) {
  using namespace ad;
  if (covs.empty()) throw EmptyInput("rifunet_loss: empty batch");
  std::vector<Var> raw, rec;
  raw.reserve(covs.size());
  rec.reserve(covs.size());
  for (const auto& c0 : covs) {
    const Var c = tape.constant(c0, Kind::Sym);
    const Var out = unet_forward(c, net, cfg.eps);
    raw.push_back(vec_upper(matrix_log(out)));
    rec.push_back(frobenius_norm_sq(sub(out, c)));
  }
  const Var base = mean(raw);
  std::vector<Var> rows;
  rows.reserve(raw.size());
  for (const auto& r : raw) rows.push_back(sub(r, base));
  const Var z = stack_rows(rows);
  const Var ce = cross_entropy(log_softmax(linear(z, head, bias)), actions);
  const Var stats = fisher_stats(z, actions, subjects);
  Var loss = add(scale(ce, cfg.loss.ce), fisher_penalty(stats, cfg.loss));
  return add(loss, scale(mean(rec), cfg.loss.rec));
}

RifuNetModel rifunet_fit(const CovarianceSet& ds, const RifuNetConfig& cfg, std::uint64_t seed, ad::TrainLog* log) {
  RifuNetModel m = rifunet_init(ds, cfg);
  std::vector<ad::ParamRef> params{{"rifunet.enc1", &m.net.enc1}, {"rifunet.enc2", &m.net.enc2},
                                   {"rifunet.dec2", &m.net.dec2}, {"rifunet.dec1", &m.net.dec1},
                                   {"rifunet.head", &m.head},      {"rifunet.bias", &m.bias, ad::Kind::Vector}};
  const auto covs = raw_matrices(ds);
  const auto actions = ds.labels();
  const auto subjects = ds.subject_ids();
  Batch batch;
  ad::TrainLog result = ad::train_adam(
      params, static_cast<int>(ds.size()), cfg.optim, seed,
      [&](ad::Tape& tape, std::span<const ad::Var> p, std::span<const int> idx, int) {
        batch.fill(idx, covs, actions, subjects);
        return rifunet_loss(tape, {p[0], p[1], p[2], p[3]}, p[4], p[5], batch.covs, batch.actions, batch.subjects,
                            cfg);
      });
  m.train_base = row_mean(rifunet_raw_features(m.net, ds));
  if (log) *log = std::move(result);
  return m;
}

RifuNetOutput rifunet_predict(const RifuNetModel& m, const CovarianceSet& ds) {
  if (ds.empty()) throw EmptyInput("rifunet_predict: empty batch");
  require_dim(m.net.dims().d, ds, "rifunet");
  RifuNetOutput out;
  out.features = rifunet_raw_features(m.net, ds);
  const Vec base = m.config.base == TangentBase::Batch ? row_mean(out.features) : m.train_base;
  out.features.rowwise() -= base.transpose();
  out.logits = head_logits(out.features, m.head, nullptr, m.bias);
  out.labels = argmax_rows(out.logits);
  return out;
}

// --- configuration as JSON -------------------------------------------------------

namespace {

json optim_json(const ad::OptimConfig& o) {
  return {{"lr", o.lr},           {"weight_decay", o.weight_decay}, {"batch", o.batch},
          {"steps", o.steps},     {"clip_norm", o.clip_norm},       {"divergence_floor", o.divergence_floor}};
}

ad::OptimConfig optim_from(const json& j) {
  ad::OptimConfig o;
  o.lr = j.at("lr").get<double>();
  o.weight_decay = j.at("weight_decay").get<double>();
  o.batch = j.at("batch").get<int>();
  o.steps = j.at("steps").get<int>();
  o.clip_norm = j.at("clip_norm").get<double>();
  o.divergence_floor = j.at("divergence_floor").get<double>();
  if (!(o.lr > 0) || o.batch < 1 || o.steps < 1) throw Error("optimizer: lr, batch and steps must be positive");
  return o;
}

json loss_json(const NetLossWeights& l, bool with_rec) {
  json j{{"ce", l.ce}, {"act", l.act}, {"sub", l.sub}, {"w", l.w}, {"b", l.b}};
  if (with_rec) j["rec"] = l.rec;
  return j;
}

NetLossWeights loss_from(const json& j) {
  NetLossWeights l;
  l.ce = j.at("ce").get<double>();
  l.act = j.at("act").get<double>();
  l.sub = j.at("sub").get<double>();
  l.w = j.at("w").get<double>();
  l.b = j.at("b").get<double>();
  if (j.contains("rec")) l.rec = j.at("rec").get<double>();
  for (double v : {l.ce, l.act, l.sub, l.w, l.b, l.rec}) {
    if (!(v >= 0.0)) throw Error("loss weights must be non-negative");
  }
  return l;
}

json to_json(const TslrConfig& c) { return {{"optim", optim_json(c.optim)}}; }
json to_json(const TsaLdaConfig& c) { return {{"shrinkage", c.shrinkage}}; }
json to_json(const CspConfig& c) { return {{"filters", c.filters}, {"zscore", c.zscore}, {"shrinkage", c.shrinkage}}; }
json to_json(const DcNetConfig& c) {
  return {{"loss", loss_json(c.loss, false)}, {"eps", c.eps},
          {"hidden", c.hidden},               {"init_noise", c.init_noise},
          {"optim", optim_json(c.optim)}};
}
json to_json(const RifuNetConfig& c) {
  return {{"loss", loss_json(c.loss, true)},
          {"eps", c.eps},
          {"d1", c.d1},
          {"d2", c.d2},
          {"base", c.base == TangentBase::Train ? "train" : "batch"},
          {"optim", optim_json(c.optim)}};
}

TslrConfig tslr_from(const json& j) { return {optim_from(j.at("optim"))}; }
TsaLdaConfig tsa_from(const json& j) { return {j.at("shrinkage").get<double>()}; }
CspConfig csp_from(const json& j) {
  return {j.at("filters").get<int>(), j.at("zscore").get<bool>(), j.at("shrinkage").get<double>()};
}
DcNetConfig dcnet_from(const json& j) {
  DcNetConfig c;
  c.loss = loss_from(j.at("loss"));
  c.eps = j.at("eps").get<double>();
  c.hidden = j.at("hidden").get<int>();
  c.init_noise = j.at("init_noise").get<double>();
  c.optim = optim_from(j.at("optim"));
  if (!(c.eps >= 0.0) || c.hidden < 1) throw Error("dcnet: eps must be >= 0 and hidden >= 1");
  return c;
}
RifuNetConfig rifunet_from(const json& j) {
  RifuNetConfig c;
  c.loss = loss_from(j.at("loss"));
  c.eps = j.at("eps").get<double>();
  c.d1 = j.at("d1").get<int>();
  c.d2 = j.at("d2").get<int>();
  const auto base = j.at("base").get<std::string>();
  if (base != "train" && base != "batch") throw Error("rifunet: base must be 'train' or 'batch'");
  c.base = base == "train" ? TangentBase::Train : TangentBase::Batch;
  c.optim = optim_from(j.at("optim"));
  return c;
}

/// Rejects keys of `overrides` that `defaults` does not have, recursively.
void check_known(const json& defaults, const json& overrides, const std::string& path) {
  if (!overrides.is_object()) throw Error("hyperparameters" + path + " must be a JSON object");
  for (const auto& [key, value] : overrides.items()) {
    if (!defaults.contains(key)) throw Error("unknown hyperparameter '" + path + key + "'");
    if (defaults.at(key).is_object()) check_known(defaults.at(key), value, path + key + ".");
  }
}

json merged(const json& defaults, const std::string& text) {
  json overrides;
  try {
    overrides = json::parse(text.empty() ? "{}" : text);
  } catch (const json::parse_error& e) {
    throw Error(std::string("hyperparameters are not valid JSON: ") + e.what());
  }
  check_known(defaults, overrides, "");
  json out = defaults;
  out.merge_patch(overrides);
  return out;
}

template <class F>
auto parse_config(F&& f, const json& j) {
  try {
    return f(j);
  } catch (const json::exception& e) {
    throw Error(std::string("bad hyperparameter value: ") + e.what());
  }
}

// --- CLSF container ----------------------------------------------------------------

constexpr std::uint32_t kClsfVersion = 1;

std::string write_clsf(ClassifierKind kind, const json& hyper, std::span<const Mat> blocks) {
  io::ByteWriter w;
  w.put_bytes("CLSF");
  w.put_u32(kClsfVersion);
  w.put_u32(static_cast<std::uint32_t>(kind));
  const std::string text = hyper.dump();
  w.put_u32(static_cast<std::uint32_t>(text.size()));
  w.put_bytes(text);
  io::put_blocks(w, blocks);
  return w.bytes();
}

Mat column(const Vec& v) { return v; }

void expect_blocks(const std::vector<Mat>& b, std::size_t n, const char* who) {
  if (b.size() != n) {
    throw FormatError(std::string(who) + " model: expected " + std::to_string(n) + " blocks, found " +
                      std::to_string(b.size()));
  }
}

SpdMatrix spd_block(const Mat& m) {
  try {
    return SpdMatrix(m);
  } catch (const Error& e) {
    throw FormatError(std::string("stored matrix is not SPD: ") + e.what());
  }
}

void require_trained(bool trained, ClassifierKind kind) {
  if (!trained) throw Error(std::string(classifier_name(kind)) + ": predict before fit");
}

std::vector<Mat> lda_blocks(const LdaModel& l) { return {l.means, l.coef, column(l.offset)}; }

LdaModel lda_from(const Mat& means, const Mat& coef, const Mat& offset, double shrinkage) {
  if (coef.cols() != means.rows() || offset.rows() != means.rows()) throw FormatError("LDA block shapes disagree");
  return {means, coef, offset.col(0), shrinkage};
}

// --- concrete classifiers --------------------------------------------------------

class MdmClassifier final : public Classifier {
 public:
  ClassifierKind kind() const override { return ClassifierKind::Mdm; }
  void fit(const CovarianceSet& train, std::uint64_t) override { model_ = mdm_fit(train); }
  std::vector<int> predict(const CovarianceSet& ds) const override {
    require_trained(!model_.prototypes.empty(), kind());
    require_dim(model_.prototypes.front().dim(), ds, "mdm");
    std::vector<int> out;
    out.reserve(ds.size());
    for (const auto& it : ds.items()) out.push_back(mdm_predict(model_, it.cov));
    return out;
  }
  std::string hyper_json() const override { return json::object().dump(); }
  std::string serialize() const override {
    std::vector<Mat> blocks;
    for (const auto& p : model_.prototypes) blocks.push_back(p.mat());
    return write_clsf(kind(), json::object(), blocks);
  }
  void load(const std::vector<Mat>& blocks) {
    if (blocks.empty()) throw FormatError("mdm model: no prototypes");
    for (const auto& b : blocks) model_.prototypes.push_back(spd_block(b));
  }

 private:
  MdmModel model_;
};

class TslrClassifier final : public Classifier {
 public:
  explicit TslrClassifier(TslrConfig cfg) { model_.config = cfg; }
  ClassifierKind kind() const override { return ClassifierKind::Tslr; }
  void fit(const CovarianceSet& train, std::uint64_t seed) override {
    ad::TrainLog log;
    model_ = tslr_fit(train, model_.config, seed, &log);
    log_ = std::move(log);
  }
  std::optional<ad::TrainLog> train_log() const override { return log_; }
  std::vector<int> predict(const CovarianceSet& ds) const override {
    require_trained(model_.weights.size() > 0, kind());
    return tslr_predict(model_, ds);
  }
  std::string hyper_json() const override { return to_json(model_.config).dump(); }
  std::string serialize() const override {
    const std::vector<Mat> blocks{model_.tangent.base.mat(), model_.tangent.whitener, model_.weights, model_.bias};
    return write_clsf(kind(), to_json(model_.config), blocks);
  }
  void load(const std::vector<Mat>& b) {
    expect_blocks(b, 4, "tslr");
    model_.tangent.base = spd_block(b[0]);
    model_.tangent.whitener = b[1];
    model_.weights = b[2];
    model_.bias = b[3];
    if (model_.bias.rows() != model_.weights.cols()) throw FormatError("tslr model: bias/weights disagree");
  }

 private:
  TslrModel model_;
  std::optional<ad::TrainLog> log_;
};

class TsaLdaClassifier final : public Classifier {
 public:
  explicit TsaLdaClassifier(TsaLdaConfig cfg) { model_.config = cfg; }
  ClassifierKind kind() const override { return ClassifierKind::TsaLda; }
  void fit(const CovarianceSet& train, std::uint64_t) override { model_ = tsa_lda_fit(train, model_.config); }
  std::vector<int> predict(const CovarianceSet& ds) const override {
    require_trained(model_.lda.coef.size() > 0, kind());
    return tsa_lda_predict(model_, ds);
  }
  std::string hyper_json() const override { return to_json(model_.config).dump(); }
  std::string serialize() const override {
    std::vector<Mat> blocks{model_.tangent.base.mat(), model_.tangent.whitener};
    for (auto& b : lda_blocks(model_.lda)) blocks.push_back(std::move(b));
    return write_clsf(kind(), to_json(model_.config), blocks);
  }
  void load(const std::vector<Mat>& b) {
    expect_blocks(b, 5, "tsa-lda");
    model_.tangent.base = spd_block(b[0]);
    model_.tangent.whitener = b[1];
    model_.lda = lda_from(b[2], b[3], b[4], model_.config.shrinkage);
  }

 private:
  TsaLdaModel model_;
};

class CspClassifier final : public Classifier {
 public:
  explicit CspClassifier(CspConfig cfg) { model_.config = cfg; }
  ClassifierKind kind() const override { return ClassifierKind::CspLda; }
  void fit(const CovarianceSet& train, std::uint64_t) override { model_ = csp_fit(train, model_.config); }
  std::vector<int> predict(const CovarianceSet& ds) const override {
    require_trained(!model_.filters.empty(), kind());
    return csp_predict(model_, ds);
  }
  std::string hyper_json() const override { return to_json(model_.config).dump(); }
  std::string serialize() const override {
    std::vector<Mat> blocks{io::row({static_cast<double>(model_.filters.size())})};
    for (const auto& f : model_.filters) blocks.push_back(f);
    for (auto& b : lda_blocks(model_.lda)) blocks.push_back(std::move(b));
    return write_clsf(kind(), to_json(model_.config), blocks);
  }
  void load(const std::vector<Mat>& b) {
    if (b.empty()) throw FormatError("csp model: no blocks");
    const auto n = static_cast<std::size_t>(b[0](0, 0));
    expect_blocks(b, 1 + n + 3, "csp");
    for (std::size_t i = 0; i < n; ++i) model_.filters.push_back(b[1 + i]);
    model_.lda = lda_from(b[1 + n], b[2 + n], b[3 + n], model_.config.shrinkage);
  }

 private:
  CspModel model_;
};

class DcNetClassifier final : public Classifier {
 public:
  explicit DcNetClassifier(DcNetConfig cfg) { model_.config = cfg; }
  ClassifierKind kind() const override { return ClassifierKind::DcNet; }
  void fit(const CovarianceSet& train, std::uint64_t seed) override {
    ad::TrainLog log;
    model_ = dcnet_fit(train, model_.config, seed, &log);
    log_ = std::move(log);
  }
  std::vector<int> predict(const CovarianceSet& ds) const override {
    require_trained(!model_.stack.empty(), kind());
    return dcnet_predict(model_, ds);
  }
  std::optional<ad::TrainLog> train_log() const override { return log_; }
  std::string hyper_json() const override { return to_json(model_.config).dump(); }
  std::string serialize() const override {
    std::vector<Mat> blocks{io::row({static_cast<double>(model_.stack.size())})};
    for (const auto& w : model_.stack) blocks.push_back(w);
    blocks.push_back(model_.head1);
    blocks.push_back(model_.head2);
    blocks.push_back(model_.bias);
    return write_clsf(kind(), to_json(model_.config), blocks);
  }
  void load(const std::vector<Mat>& b) {
    if (b.empty()) throw FormatError("dcnet model: no blocks");
    const auto n = static_cast<std::size_t>(b[0](0, 0));
    expect_blocks(b, 1 + n + 3, "dcnet");
    if (n == 0) throw FormatError("dcnet model: empty stack");
    for (std::size_t i = 0; i < n; ++i) {
      if (i > 0 && b[i].cols() != b[1 + i].rows()) throw FormatError("dcnet model: stack widths do not chain");
      model_.stack.push_back(b[1 + i]);
    }
    model_.head1 = b[1 + n];
    model_.head2 = b[2 + n];
    model_.bias = b[3 + n];
    const auto d = model_.stack.back().cols();
    if (model_.head1.rows() != d * (d + 1) / 2 || model_.head1.cols() != model_.head2.rows() ||
        model_.bias.rows() != model_.head2.cols()) {
      throw FormatError("dcnet model: head shapes disagree");
    }
  }

 private:
  DcNetModel model_;
  std::optional<ad::TrainLog> log_;
};

class RifuNetClassifier final : public Classifier {
 public:
  explicit RifuNetClassifier(RifuNetConfig cfg) { model_.config = cfg; }
  ClassifierKind kind() const override { return ClassifierKind::RifuNet; }
  void fit(const CovarianceSet& train, std::uint64_t seed) override {
    ad::TrainLog log;
    model_ = rifunet_fit(train, model_.config, seed, &log);
    log_ = std::move(log);
  }
  std::vector<int> predict(const CovarianceSet& ds) const override {
    require_trained(model_.head.size() > 0, kind());
    return rifunet_predict(model_, ds).labels;
  }
  std::optional<ad::TrainLog> train_log() const override { return log_; }
  std::string hyper_json() const override { return to_json(model_.config).dump(); }
  std::string serialize() const override {
    const std::vector<Mat> blocks{model_.net.enc1, model_.net.enc2, model_.net.dec2,          model_.net.dec1,
                                  model_.head,     model_.bias,     column(model_.train_base)};
    return write_clsf(kind(), to_json(model_.config), blocks);
  }
  void load(const std::vector<Mat>& b) {
    expect_blocks(b, 7, "rifunet");
    model_.net = {b[0], b[1], b[2], b[3], model_.config.eps};
    try {
      model_.net.validate();
    } catch (const ShapeError& e) {
      throw FormatError(std::string("rifunet model: ") + e.what());
    }
    model_.head = b[4];
    model_.bias = b[5];
    model_.train_base = b[6].col(0);
    const auto d = model_.net.dims().d;
    if (model_.head.rows() != d * (d + 1) / 2 || model_.bias.rows() != model_.head.cols() ||
        model_.train_base.size() != model_.head.rows()) {
      throw FormatError("rifunet model: head shapes disagree");
    }
  }

 private:
  RifuNetModel model_;
  std::optional<ad::TrainLog> log_;
};

std::unique_ptr<Classifier> make_from_json(ClassifierKind kind, const json& j) {
  switch (kind) {
    case ClassifierKind::Mdm: return std::make_unique<MdmClassifier>();
    case ClassifierKind::Tslr: return std::make_unique<TslrClassifier>(parse_config(tslr_from, j));
    case ClassifierKind::TsaLda: return std::make_unique<TsaLdaClassifier>(parse_config(tsa_from, j));
    case ClassifierKind::CspLda: return std::make_unique<CspClassifier>(parse_config(csp_from, j));
    case ClassifierKind::DcNet: return std::make_unique<DcNetClassifier>(parse_config(dcnet_from, j));
    case ClassifierKind::RifuNet: return std::make_unique<RifuNetClassifier>(parse_config(rifunet_from, j));
  }
  throw Error("unknown classifier kind");
}

json default_hyper(ClassifierKind kind) {
  switch (kind) {
    case ClassifierKind::Mdm: return json::object();
    case ClassifierKind::Tslr: return to_json(TslrConfig{});
    case ClassifierKind::TsaLda: return to_json(TsaLdaConfig{});
    case ClassifierKind::CspLda: return to_json(CspConfig{});
    case ClassifierKind::DcNet: return to_json(DcNetConfig{});
    case ClassifierKind::RifuNet: return to_json(RifuNetConfig{});
  }
  throw Error("unknown classifier kind");
}

}  // namespace

std::unique_ptr<Classifier> make_classifier(ClassifierKind kind, const std::string& hyper_json) {
  return make_from_json(kind, merged(default_hyper(kind), hyper_json));
}

std::unique_ptr<Classifier> parse_classifier(const std::string& bytes) {
  io::ByteReader r(bytes);
  r.expect_magic("CLSF");
  const auto at = r.offset();
  if (r.u32() != kClsfVersion) r.fail_at("unsupported CLSF version", at);
  const std::uint32_t raw_kind = r.u32();
  if (raw_kind < 1 || raw_kind > 6) r.fail_at("unknown classifier kind " + std::to_string(raw_kind), at + 4);
  const auto kind = static_cast<ClassifierKind>(raw_kind);
  const std::uint32_t len = r.u32();
  const std::string text = r.bytes(len);
  json hyper;
  try {
    hyper = merged(default_hyper(kind), text);
  } catch (const Error& e) {
    throw FormatError(std::string("classifier hyperparameters: ") + e.what());
  }
  std::vector<Mat> blocks = io::read_blocks(r);
  if (!r.at_end()) r.fail("trailing bytes");

  std::unique_ptr<Classifier> c;
  try {
    c = make_from_json(kind, hyper);
  } catch (const FormatError&) {
    throw;
  } catch (const Error& e) {
    throw FormatError(std::string("classifier hyperparameters: ") + e.what());
  }
  switch (kind) {
    case ClassifierKind::Mdm: static_cast<MdmClassifier&>(*c).load(blocks); break;
    case ClassifierKind::Tslr: static_cast<TslrClassifier&>(*c).load(blocks); break;
    case ClassifierKind::TsaLda: static_cast<TsaLdaClassifier&>(*c).load(blocks); break;
    case ClassifierKind::CspLda: static_cast<CspClassifier&>(*c).load(blocks); break;
    case ClassifierKind::DcNet: static_cast<DcNetClassifier&>(*c).load(blocks); break;
    case ClassifierKind::RifuNet: static_cast<RifuNetClassifier&>(*c).load(blocks); break;
  }
  return c;
}

}  // namespace spdgeo
