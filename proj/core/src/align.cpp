#include "spdgeo/align.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

#include "spdgeo/binio.hpp"

namespace spdgeo {

SpdMatrix reference_mean(std::span<const SpdMatrix> cs, MeanKind kind) {
  return kind == MeanKind::Karcher ? karcher_mean(cs) : log_euclidean_mean(cs);
}

Mat log_features(const CovarianceSet& ds) {
  Mat z(static_cast<Eigen::Index>(ds.size()), mat::tangent_length(ds.dim()));
  for (std::size_t i = 0; i < ds.size(); ++i) {
    z.row(static_cast<Eigen::Index>(i)) = mat::vec_upper(mat::log_spd(ds[i].cov.mat())).transpose();
  }
  return z;
}

namespace {

std::map<int, std::vector<SpdMatrix>> group_by_subject(const CovarianceSet& ds) {
  std::map<int, std::vector<SpdMatrix>> groups;
  for (const auto& it : ds.items()) groups[it.subject].push_back(it.cov);
  return groups;
}

/// W^T C W for a transform that is SPD-preserving by construction.
SpdMatrix transform(const SpdMatrix& c, const Mat& w) { return SpdMatrix::unchecked(mat::congruence(c.mat(), w)); }

}  // namespace

// --- RA ----------------------------------------------------------------------

RaModel ra_fit(const CovarianceSet& ds, RaScope scope, MeanKind mean) {
  if (ds.empty()) throw EmptyInput("ra_fit: empty set");
  RaModel m;
  m.scope = scope;
  m.mean = mean;
  std::map<int, std::vector<SpdMatrix>> groups;
  if (scope == RaScope::Subject) {
    groups = group_by_subject(ds);
  } else {
    groups[RaModel::kGlobal] = ds.matrices();
  }
  for (const auto& [key, mats] : groups) {
    SpdMatrix ref = reference_mean(mats, mean);
    m.whitener.emplace(key, mat::power_spd(ref.mat(), -0.5));
    m.reference.emplace(key, std::move(ref));
  }
  return m;
}

CovarianceSet ra_apply(const RaModel& model, const CovarianceSet& ds) {
  std::vector<SpdMatrix> out;
  out.reserve(ds.size());
  for (const auto& it : ds.items()) {
    const int key = model.scope == RaScope::Subject ? it.subject : RaModel::kGlobal;
    const auto w = model.whitener.find(key);
    if (w == model.whitener.end()) throw UnknownSubject(it.subject);
    if (w->second.rows() != it.cov.dim()) throw ShapeError("ra_apply: dimension mismatch");
    out.push_back(transform(it.cov, w->second));
  }
  return ds.with_matrices(std::move(out));
}

// --- RPA ---------------------------------------------------------------------

namespace {

/// Eigenvectors by descending eigenvalue; each column's largest-magnitude
/// entry is made positive so the basis is reproducible.
Mat principal_axes(const Mat& sigma) {
  const EigDecomposition e = mat::sym_eig(sigma);
  Mat u = e.vectors.rowwise().reverse();
  for (Eigen::Index j = 0; j < u.cols(); ++j) {
    Eigen::Index k = 0;
    u.col(j).cwiseAbs().maxCoeff(&k);
    if (u(k, j) < 0.0) u.col(j) = -u.col(j);
  }
  return u;
}

}  // namespace

RpaModel rpa_fit(const CovarianceSet& ds, const RpaOptions& opt) {
  RpaModel m;
  m.options = opt;
  for (const auto& [subject, mats] : group_by_subject(ds)) {
    if (mats.size() < 2) {
      throw EmptyInput("rpa_fit: subject " + std::to_string(subject) + " has fewer than 2 items");
    }
    SpdMatrix mu = reference_mean(mats, opt.mean);
    const Mat wh = mat::power_spd(mu.mat(), -0.5);
    const int d = mu.dim();
    std::vector<Mat> recentred;
    recentred.reserve(mats.size());
    for (const auto& c : mats) recentred.push_back(mat::congruence(c.mat(), wh));

    Mat sigma = Mat::Zero(d, d);
    if (opt.dispersion == RpaDispersion::LogScatter) {
      std::vector<Mat> logs;
      Mat mean_log = Mat::Zero(d, d);
      for (const auto& c : recentred) {
        logs.push_back(mat::log_spd(c));
        mean_log += logs.back();
      }
      mean_log /= static_cast<double>(logs.size());
      for (const auto& l : logs) {
        const Mat dev = l - mean_log;
        sigma += dev * dev;
      }
      sigma = mat::exp_sym(mat::symmetrize(sigma / static_cast<double>(logs.size())));
    } else {
      for (const auto& c : recentred) sigma += c;
      sigma = mat::symmetrize(sigma / static_cast<double>(recentred.size()));
    }
    SpdMatrix dispersion(sigma);
    Mat rotation = principal_axes(dispersion.mat());
    m.subjects.emplace(subject, RpaSubject{std::move(mu), std::move(dispersion), std::move(rotation)});
  }
  return m;
}

CovarianceSet rpa_apply(const RpaModel& model, const CovarianceSet& ds) {
  std::map<int, std::pair<Mat, Mat>> whiteners;
  for (const auto& [s, sub] : model.subjects) {
    whiteners.emplace(s, std::make_pair(mat::power_spd(sub.mean.mat(), -0.5), mat::power_spd(sub.dispersion.mat(), -0.5)));
  }
  std::vector<SpdMatrix> out;
  out.reserve(ds.size());
  for (const auto& it : ds.items()) {
    const auto w = whiteners.find(it.subject);
    if (w == whiteners.end()) throw UnknownSubject(it.subject);
    const Mat c1 = mat::congruence(it.cov.mat(), w->second.first);
    const Mat c2 = mat::congruence(c1, w->second.second);
    out.push_back(SpdMatrix::unchecked(mat::congruence(c2, model.subjects.at(it.subject).rotation)));
  }
  return ds.with_matrices(std::move(out));
}

CovarianceSet rpa_align(const CovarianceSet& ds, const RpaOptions& opt) { return rpa_apply(rpa_fit(ds, opt), ds); }

// --- DCR ---------------------------------------------------------------------

void DcrHyper::validate() const {
  if (!(gamma >= 0 && gamma_c >= 0 && alpha >= 0 && beta >= 0)) throw Error("DCR: weights must be non-negative");
  if (!(eps > 0)) throw Error("DCR: eps must be positive");
  if (steps < 1 || batch < 0) throw Error("DCR: steps must be positive and batch non-negative");
}

double dcr_unit_scale_raw() { return std::log(std::expm1(1.0 - 1e-6)); }

double dcr_beta_at(const DcrHyper& h, int step) {
  return h.beta * (1.0 + std::cos(std::numbers::pi * step / h.steps)) / 2.0;
}

Mat DcrModel::rotation() const { return mat::expm(generator - generator.transpose()); }

double DcrModel::scale() const {
  const double v = scale_raw;
  return (v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v))) + 1e-6;
}

DcrModel DcrModel::initial(int dim) { return {Mat::Zero(dim, dim), dcr_unit_scale_raw()}; }

namespace {

struct DcrVars {
  ad::Var within, between, center, loss;
};

DcrVars dcr_graph(ad::Tape& tape, const ad::Var& generator, const ad::Var& scale_raw, std::span<const Mat> logs,
                  std::span<const int> labels, const DcrHyper& h, int step) {
  using namespace ad;
  if (logs.empty()) throw EmptyInput("dcr_loss: empty batch");
  if (logs.size() != labels.size()) throw ShapeError("dcr_loss: label count mismatch");
  const int d = static_cast<int>(logs.front().rows());
  const Var r = matrix_exp_skew(generator);
  const Var lambda = add_scalar(softplus(scale_raw), 1e-6);

  std::vector<Var> scaled;
  scaled.reserve(logs.size());
  for (const auto& l : logs) scaled.push_back(mul(lambda, tape.constant(l, Kind::Sym)));

  std::map<int, std::vector<Var>> by_class;
  for (std::size_t i = 0; i < scaled.size(); ++i) by_class[labels[i]].push_back(scaled[i]);
  std::map<int, Var> class_mean;
  for (const auto& [k, xs] : by_class) class_mean.emplace(k, mean(xs));
  const Var global = mean(scaled);

  std::vector<Var> within_terms;
  within_terms.reserve(scaled.size());
  for (std::size_t i = 0; i < scaled.size(); ++i) {
    within_terms.push_back(frobenius_norm_sq(congruence(sub(scaled[i], class_mean.at(labels[i])), r)));
  }
  const Var within = scale(mean(within_terms), static_cast<double>(within_terms.size()));

  std::vector<Var> between_terms;
  for (const auto& [k, mk] : class_mean) {
    const double nk = static_cast<double>(by_class.at(k).size());
    between_terms.push_back(scale(frobenius_norm_sq(congruence(sub(mk, global), r)), nk));
  }
  const Var between = scale(mean(between_terms), static_cast<double>(between_terms.size()));

  const Var center = offdiag_norm_sq(congruence(global, r));

  const Var fisher = add(scale(div(within, add_scalar(between, h.eps)), h.gamma), scale(center, h.gamma_c));
  const Var anchor = scale(frobenius_norm_sq(add_scalar(lambda, -1.0)), h.alpha);
  const Var ident = scale(frobenius_norm_sq(sub(r, tape.constant(Mat::Identity(d, d)))), dcr_beta_at(h, step) / d);
  return {within, between, center, add(fisher, add(anchor, ident))};
}

}  // namespace

ad::Var dcr_loss(ad::Tape& tape, const ad::Var& generator, const ad::Var& scale_raw, std::span<const Mat> logs,
                 std::span<const int> labels, const DcrHyper& h, int step) {
  return dcr_graph(tape, generator, scale_raw, logs, labels, h, step).loss;
}

DcrTerms dcr_evaluate(const DcrModel& m, const CovarianceSet& ds, const DcrHyper& h, int step) {
  std::vector<Mat> logs;
  logs.reserve(ds.size());
  for (const auto& it : ds.items()) logs.push_back(mat::log_spd(it.cov.mat()));
  const auto labels = ds.labels();
  ad::Tape tape;
  const auto v = dcr_graph(tape, tape.constant(m.generator), tape.constant(Mat::Constant(1, 1, m.scale_raw)), logs,
                           labels, h, step);
  return {v.within.scalar(), v.between.scalar(), v.center.scalar(), v.loss.scalar()};
}

DcrFit dcr_fit(const CovarianceSet& ds, const DcrHyper& h, std::uint64_t seed) {
  h.validate();
  if (ds.empty()) throw EmptyInput("dcr_fit: empty set");
  const auto labels = ds.labels();
  if (std::set<int>(labels.begin(), labels.end()).size() < 2) throw TrainingError("dcr_fit: need at least 2 classes");
  std::vector<Mat> logs;
  logs.reserve(ds.size());
  for (const auto& it : ds.items()) logs.push_back(mat::log_spd(it.cov.mat()));

  DcrFit fit{DcrModel::initial(ds.dim()), {}};
  Mat raw = Mat::Constant(1, 1, fit.model.scale_raw);
  std::vector<ad::ParamRef> params{{"dcr.generator", &fit.model.generator, ad::Kind::Matrix},
                                   {"dcr.scale_raw", &raw, ad::Kind::Scalar}};
  ad::OptimConfig cfg;
  cfg.lr = h.lr;
  cfg.weight_decay = h.weight_decay;
  cfg.batch = h.batch > 0 ? h.batch : static_cast<int>(ds.size());
  cfg.steps = h.steps;
  cfg.clip_norm = h.clip_norm;

  std::vector<Mat> batch_logs;
  std::vector<int> batch_labels;
  fit.log = ad::train_adam(params, static_cast<int>(ds.size()), cfg, seed,
                           [&](ad::Tape& tape, std::span<const ad::Var> p, std::span<const int> idx, int step) {
                             batch_logs.clear();
                             batch_labels.clear();
                             for (int i : idx) {
                               batch_logs.push_back(logs[static_cast<std::size_t>(i)]);
                               batch_labels.push_back(labels[static_cast<std::size_t>(i)]);
                             }
                             return dcr_loss(tape, p[0], p[1], batch_logs, batch_labels, h, step);
                           });
  fit.model.scale_raw = raw(0, 0);
  return fit;
}

CovarianceSet dcr_apply(const DcrModel& m, const CovarianceSet& ds) {
  if (m.generator.rows() != ds.dim()) throw ShapeError("dcr_apply: dimension mismatch");
  const Mat r = m.rotation();
  const double lambda = m.scale();
  std::vector<SpdMatrix> out;
  out.reserve(ds.size());
  for (const auto& it : ds.items()) {
    const Mat l = mat::congruence(lambda * mat::log_spd(it.cov.mat()), r);
    out.push_back(SpdMatrix::unchecked(mat::exp_sym(l)));
  }
  return ds.with_matrices(std::move(out));
}

// --- RiFU --------------------------------------------------------------------

ad::Var rifu_loss(ad::Tape& tape, const UNetVars& w, std::span<const Mat> covs, std::span<const int> actions,
                  std::span<const int> subjects, const RifuConfig& cfg) {
  using namespace ad;
  if (covs.empty()) throw EmptyInput("rifu_loss: empty batch");
  std::vector<Var> z;
  z.reserve(covs.size());
  Mat z_in(static_cast<Eigen::Index>(covs.size()), mat::tangent_length(static_cast<int>(covs.front().rows())));
  for (std::size_t i = 0; i < covs.size(); ++i) {
    const Var c = tape.constant(covs[i], Kind::Sym);
    z.push_back(vec_upper(matrix_log(unet_forward(c, w, cfg.eps))));
    z_in.row(static_cast<Eigen::Index>(i)) = mat::vec_upper(mat::log_spd(covs[i])).transpose();
  }
  const Var zs = stack_rows(z);
  const Var stats = fisher_stats(zs, actions, subjects);
  const double n = static_cast<double>(covs.size());
  const Var rec = scale(frobenius_norm_sq(sub(zs, tape.constant(z_in))), 1.0 / n);
  Var loss = scale(element(stats, 0), cfg.lambda_w);
  loss = sub(loss, scale(element(stats, 1), cfg.lambda_bet));
  loss = sub(loss, scale(element(stats, 2), cfg.lambda_sub));
  return add(loss, scale(rec, cfg.lambda_rec));
}

RifuModel rifu_init(const CovarianceSet& ds, const RifuConfig& cfg) {
  RifuModel m;
  m.config = cfg;
  if (cfg.identity_init) {
    m.net = unet_identity(ds.dim(), cfg.eps);
  } else {
    UNetDims dims = UNetDims::for_input(ds.dim());
    if (cfg.d1 > 0) dims.d1 = cfg.d1;
    if (cfg.d2 > 0) dims.d2 = cfg.d2;
    const auto mats = ds.matrices();
    m.net = unet_init(mats, dims, cfg.eps);
  }
  return m;
}

RifuFit rifu_fit(const CovarianceSet& ds, const RifuConfig& cfg, std::uint64_t seed) {
  if (ds.empty()) throw EmptyInput("rifu_fit: empty set");
  RifuFit fit{rifu_init(ds, cfg), {}};
  UNetWeights& w = fit.model.net;
  std::vector<ad::ParamRef> params{{"rifu.enc1", &w.enc1}, {"rifu.enc2", &w.enc2}, {"rifu.dec2", &w.dec2},
                                   {"rifu.dec1", &w.dec1}};
  std::vector<Mat> covs;
  for (const auto& it : ds.items()) covs.push_back(it.cov.mat());
  const auto actions = ds.labels();
  const auto subjects = ds.subject_ids();

  std::vector<Mat> bc;
  std::vector<int> ba, bs;
  fit.log = ad::train_adam(params, static_cast<int>(ds.size()), cfg.optim, seed,
                           [&](ad::Tape&, std::span<const ad::Var> p, std::span<const int> idx, int) {
                             bc.clear();
                             ba.clear();
                             bs.clear();
                             for (int i : idx) {
                               const auto k = static_cast<std::size_t>(i);
                               bc.push_back(covs[k]);
                               ba.push_back(actions[k]);
                               bs.push_back(subjects[k]);
                             }
                             return rifu_loss(p[0].tape(), {p[0], p[1], p[2], p[3]}, bc, ba, bs, cfg);
                           });
  return fit;
}

CovarianceSet rifu_apply(const RifuModel& m, const CovarianceSet& ds) {
  m.net.validate();
  if (m.net.dims().d != ds.dim()) {
    throw ShapeError("rifu_apply: model expects dim " + std::to_string(m.net.dims().d) + ", got " +
                     std::to_string(ds.dim()));
  }
  std::vector<SpdMatrix> out;
  out.reserve(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    Mat c = unet_apply(m.net, ds[i].cov.mat());
    if (!mat::is_strictly_pd(c)) throw NumericalError("rifu_apply: output " + std::to_string(i) + " is not SPD");
    out.push_back(SpdMatrix::unchecked(std::move(c)));
  }
  return ds.with_matrices(std::move(out));
}

// --- model files ---------------------------------------------------------------

namespace {

constexpr std::uint32_t kAlgnVersion = 1;

std::string write_container(AlignerKind kind, int dim, std::span<const Mat> blocks) {
  io::ByteWriter w;
  w.put_bytes("ALGN");
  w.put_u32(kAlgnVersion);
  w.put_u32(static_cast<std::uint32_t>(kind));
  w.put_u32(static_cast<std::uint32_t>(dim));
  io::put_blocks(w, blocks);
  return w.bytes();
}

struct Container {
  AlignerKind kind;
  int dim;
  std::vector<Mat> blocks;
};

Container read_container(const std::string& bytes) {
  io::ByteReader r(bytes);
  r.expect_magic("ALGN");
  const auto at = r.offset();
  if (r.u32() != kAlgnVersion) r.fail_at("unsupported ALGN version", at);
  const std::uint32_t kind = r.u32();
  if (kind < 1 || kind > 4) r.fail_at("unknown aligner kind " + std::to_string(kind), at + 4);
  const int dim = static_cast<int>(r.u32());
  Container c{static_cast<AlignerKind>(kind), dim, io::read_blocks(r)};
  if (!r.at_end()) r.fail("trailing bytes");
  return c;
}

Container expect(const std::string& bytes, AlignerKind kind, std::size_t min_blocks) {
  Container c = read_container(bytes);
  if (c.kind != kind) throw FormatError("aligner file holds kind " + std::to_string(static_cast<int>(c.kind)));
  if (c.blocks.size() < min_blocks) throw FormatError("aligner file has too few blocks");
  return c;
}

SpdMatrix spd_block(const Mat& m) {
  try {
    return SpdMatrix(m);
  } catch (const Error& e) {
    throw FormatError(std::string("stored matrix is not SPD: ") + e.what());
  }
}

}  // namespace

AlignerKind aligner_kind(const std::string& bytes) { return read_container(bytes).kind; }

std::string serialize_aligner(const RaModel& m) {
  std::vector<Mat> blocks{io::row({static_cast<double>(m.scope), static_cast<double>(m.mean)})};
  int dim = 0;
  for (const auto& [s, ref] : m.reference) {
    blocks.push_back(io::row({static_cast<double>(s)}));
    blocks.push_back(ref.mat());
    blocks.push_back(m.whitener.at(s));
    dim = ref.dim();
  }
  return write_container(AlignerKind::Ra, dim, blocks);
}

RaModel parse_ra(const std::string& bytes) {
  const Container c = expect(bytes, AlignerKind::Ra, 1);
  if ((c.blocks.size() - 1) % 3 != 0) throw FormatError("RA file: block count");
  RaModel m;
  m.scope = static_cast<RaScope>(static_cast<int>(c.blocks[0](0, 0)));
  m.mean = static_cast<MeanKind>(static_cast<int>(c.blocks[0](0, 1)));
  for (std::size_t i = 1; i < c.blocks.size(); i += 3) {
    const int s = static_cast<int>(c.blocks[i](0, 0));
    m.reference.emplace(s, spd_block(c.blocks[i + 1]));
    m.whitener.emplace(s, c.blocks[i + 2]);
  }
  return m;
}

std::string serialize_aligner(const RpaModel& m) {
  std::vector<Mat> blocks{io::row({static_cast<double>(m.options.mean), static_cast<double>(m.options.dispersion)})};
  int dim = 0;
  for (const auto& [s, sub] : m.subjects) {
    blocks.push_back(io::row({static_cast<double>(s)}));
    blocks.push_back(sub.mean.mat());
    blocks.push_back(sub.dispersion.mat());
    blocks.push_back(sub.rotation);
    dim = sub.mean.dim();
  }
  return write_container(AlignerKind::Rpa, dim, blocks);
}

RpaModel parse_rpa(const std::string& bytes) {
  const Container c = expect(bytes, AlignerKind::Rpa, 1);
  if ((c.blocks.size() - 1) % 4 != 0) throw FormatError("RPA file: block count");
  RpaModel m;
  m.options.mean = static_cast<MeanKind>(static_cast<int>(c.blocks[0](0, 0)));
  m.options.dispersion = static_cast<RpaDispersion>(static_cast<int>(c.blocks[0](0, 1)));
  for (std::size_t i = 1; i < c.blocks.size(); i += 4) {
    const int s = static_cast<int>(c.blocks[i](0, 0));
    m.subjects.emplace(s, RpaSubject{spd_block(c.blocks[i + 1]), spd_block(c.blocks[i + 2]), c.blocks[i + 3]});
  }
  return m;
}

std::string serialize_aligner(const DcrModel& m) {
  const std::vector<Mat> blocks{m.generator, io::row({m.scale_raw})};
  return write_container(AlignerKind::Dcr, static_cast<int>(m.generator.rows()), blocks);
}

DcrModel parse_dcr(const std::string& bytes) {
  const Container c = expect(bytes, AlignerKind::Dcr, 2);
  return {c.blocks[0], c.blocks[1](0, 0)};
}

std::string serialize_aligner(const RifuModel& m) {
  const RifuConfig& k = m.config;
  const auto& o = k.optim;
  const std::vector<Mat> blocks{
      m.net.enc1, m.net.enc2, m.net.dec2, m.net.dec1,
      io::row({m.net.eps, k.lambda_w, k.lambda_bet, k.lambda_sub, k.lambda_rec, k.eps, static_cast<double>(k.d1),
               static_cast<double>(k.d2), k.identity_init ? 1.0 : 0.0}),
      io::row({o.lr, o.weight_decay, static_cast<double>(o.batch), static_cast<double>(o.steps), o.clip_norm,
               o.divergence_floor})};
  return write_container(AlignerKind::Rifu, m.net.dims().d, blocks);
}

RifuModel parse_rifu(const std::string& bytes) {
  const Container c = expect(bytes, AlignerKind::Rifu, 6);
  RifuModel m;
  m.net = {c.blocks[0], c.blocks[1], c.blocks[2], c.blocks[3], c.blocks[4](0, 0)};
  const Mat& h = c.blocks[4];
  const Mat& o = c.blocks[5];
  if (h.cols() != 9 || o.cols() != 6) throw FormatError("RiFU file: hyperparameter block size");
  m.config.lambda_w = h(0, 1);
  m.config.lambda_bet = h(0, 2);
  m.config.lambda_sub = h(0, 3);
  m.config.lambda_rec = h(0, 4);
  m.config.eps = h(0, 5);
  m.config.d1 = static_cast<int>(h(0, 6));
  m.config.d2 = static_cast<int>(h(0, 7));
  m.config.identity_init = h(0, 8) != 0.0;
  m.config.optim = {o(0, 0), o(0, 1), static_cast<int>(o(0, 2)), static_cast<int>(o(0, 3)), o(0, 4), o(0, 5)};
  try {
    m.net.validate();
  } catch (const ShapeError& e) {
    throw FormatError(std::string("RiFU file: ") + e.what());
  }
  return m;
}

}  // namespace spdgeo
