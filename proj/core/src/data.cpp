#include "spdgeo/data.hpp"

#include <algorithm>
#include <climits>
#include <cmath>
#include <fstream>
#include <random>
#include <set>

#include "spdgeo/binio.hpp"

namespace spdgeo {

CovarianceSet::CovarianceSet(int dim, std::vector<CovItem> items) : dim_(dim), items_(std::move(items)) {
  if (dim < 1) throw ShapeError("CovarianceSet: dim must be positive");
  for (std::size_t i = 0; i < items_.size(); ++i) {
    if (items_[i].cov.dim() != dim) {
      throw ShapeError("CovarianceSet: item " + std::to_string(i) + " has dim " +
                       std::to_string(items_[i].cov.dim()) + ", expected " + std::to_string(dim));
    }
    if (items_[i].label < 0 || items_[i].subject < 0) {
      throw Error("CovarianceSet: item " + std::to_string(i) + " has a negative label or subject");
    }
  }
}

std::vector<int> CovarianceSet::subjects() const {
  std::set<int> s;
  for (const auto& it : items_) s.insert(it.subject);
  return {s.begin(), s.end()};
}

int CovarianceSet::num_classes() const {
  int k = 0;
  for (const auto& it : items_) k = std::max(k, it.label + 1);
  return k;
}

std::vector<int> CovarianceSet::labels() const {
  std::vector<int> out;
  out.reserve(items_.size());
  for (const auto& it : items_) out.push_back(it.label);
  return out;
}

std::vector<int> CovarianceSet::subject_ids() const {
  std::vector<int> out;
  out.reserve(items_.size());
  for (const auto& it : items_) out.push_back(it.subject);
  return out;
}

std::vector<SpdMatrix> CovarianceSet::matrices() const {
  std::vector<SpdMatrix> out;
  out.reserve(items_.size());
  for (const auto& it : items_) out.push_back(it.cov);
  return out;
}

CovarianceSet CovarianceSet::subset(std::span<const int> indices) const {
  std::vector<CovItem> out;
  out.reserve(indices.size());
  for (int i : indices) {
    if (i < 0 || static_cast<std::size_t>(i) >= items_.size()) throw ShapeError("subset: index out of range");
    out.push_back(items_[static_cast<std::size_t>(i)]);
  }
  return CovarianceSet(dim_, std::move(out));
}

std::vector<int> CovarianceSet::indices_of(int subject) const {
  std::vector<int> out;
  for (std::size_t i = 0; i < items_.size(); ++i)
    if (items_[i].subject == subject) out.push_back(static_cast<int>(i));
  return out;
}

CovarianceSet CovarianceSet::with_matrices(std::vector<SpdMatrix> mats) const {
  if (mats.size() != items_.size()) throw ShapeError("with_matrices: item count mismatch");
  if (mats.empty()) return CovarianceSet(dim_, {});
  std::vector<CovItem> out;
  out.reserve(items_.size());
  for (std::size_t i = 0; i < items_.size(); ++i) out.push_back({items_[i].subject, items_[i].label, std::move(mats[i])});
  const int d = out.front().cov.dim();
  return CovarianceSet(d, std::move(out));
}

bool operator==(const CovarianceSet& a, const CovarianceSet& b) {
  if (a.dim_ != b.dim_ || a.items_.size() != b.items_.size()) return false;
  for (std::size_t i = 0; i < a.items_.size(); ++i) {
    const auto& x = a.items_[i];
    const auto& y = b.items_[i];
    if (x.subject != y.subject || x.label != y.label || !(x.cov == y.cov)) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------

SpdMatrix estimate_covariance(const Mat& x, const CovOptions& opt) {
  const auto c = x.rows();
  const auto t = x.cols();
  if (c < 1 || t < 2) {
    throw ShapeError("estimate_covariance: need at least 2 samples, got " + std::to_string(t));
  }
  if (!x.allFinite()) throw NumericalError("estimate_covariance: non-finite samples");
  Mat cov = mat::symmetrize(x * x.transpose() / static_cast<double>(t - 1));
  if (opt.shrinkage) cov.diagonal().array() += opt.shrinkage_delta * cov.trace() / static_cast<double>(c);
  const double tr = cov.trace();
  if (!(tr > 0.0)) throw NotPositiveDefinite("estimate_covariance: zero signal");
  cov *= static_cast<double>(c) / tr;
  if (!mat::is_strictly_pd(cov)) {
    throw NotPositiveDefinite(t < c + 1 && !opt.shrinkage
                                  ? "estimate_covariance: rank-deficient (T < C + 1); enable shrinkage"
                                  : "estimate_covariance: rank-deficient signal");
  }
  return SpdMatrix::unchecked(std::move(cov));
}

CovarianceSet estimate_covariances(const EpochSet& epochs, const CovOptions& opt) {
  std::vector<CovItem> items;
  items.reserve(epochs.epochs.size());
  for (std::size_t i = 0; i < epochs.epochs.size(); ++i) {
    const auto& e = epochs.epochs[i];
    if (e.samples.rows() != epochs.channels) {
      throw ShapeError("epoch " + std::to_string(i) + " has " + std::to_string(e.samples.rows()) + " channels");
    }
    try {
      items.push_back({e.subject, e.label, estimate_covariance(e.samples, opt)});
    } catch (const NotPositiveDefinite& err) {
      throw NotPositiveDefinite("epoch " + std::to_string(i) + ": " + err.what());
    }
  }
  return CovarianceSet(epochs.channels, std::move(items));
}

std::vector<LosoSplit> loso_splits(const CovarianceSet& ds) {
  const auto subjects = ds.subjects();
  if (subjects.size() < 2) {
    throw InsufficientSubjects("LOSO needs at least 2 subjects, got " + std::to_string(subjects.size()));
  }
  std::vector<LosoSplit> out;
  out.reserve(subjects.size());
  for (int s : subjects) {
    LosoSplit split{s, {}, {}};
    for (std::size_t i = 0; i < ds.size(); ++i) (ds[i].subject == s ? split.test : split.train).push_back(static_cast<int>(i));
    out.push_back(std::move(split));
  }
  return out;
}

// ---------------------------------------------------------------------------

SynthConfig SynthConfig::low_distortion(std::uint64_t seed) {
  SynthConfig c;
  c.class_spread = 0.6;
  c.rotation_scale = 0.25;
  c.dispersion_range = 0.25;
  c.noise = 0.15;
  c.seed = seed;
  return c;
}

SynthConfig SynthConfig::high_distortion(std::uint64_t seed) {
  SynthConfig c;
  c.class_spread = 0.6;
  c.rotation_scale = 0.5;
  c.dispersion_range = 0.6;
  c.noise = 0.3;
  c.seed = seed;
  return c;
}

void SynthConfig::validate() const {
  if (dim < 1 || n_subjects < 1 || n_classes < 1 || trials < 1) throw Error("synth: counts must be positive");
  if (n_classes > kMaxClasses) throw Error("synth: too many classes");
  if (!(class_spread >= 0) || !(rotation_scale >= 0) || !(dispersion_range >= 0) || !(noise >= 0)) {
    throw Error("synth: scales must be non-negative");
  }
}

namespace {

Mat gaussian_sym(std::mt19937_64& rng, std::normal_distribution<double>& n, int dim) {
  Mat a(dim, dim);
  for (int i = 0; i < dim; ++i)
    for (int j = 0; j < dim; ++j) a(i, j) = n(rng);
  return mat::symmetrize(a);
}

Mat trace_normalized(Mat c) {
  c *= static_cast<double>(c.rows()) / c.trace();
  return mat::symmetrize(c);
}

}  // namespace

CovarianceSet synth_generate(const SynthConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  const int d = cfg.dim;

  std::vector<Mat> protos;
  std::vector<Mat> proto_logs;
  for (int k = 0; k < cfg.n_classes; ++k) {
    const Mat s = cfg.class_spread * gaussian_sym(rng, normal, d);
    proto_logs.push_back(s);
    protos.push_back(mat::exp_sym(s));
  }

  std::vector<CovItem> items;
  items.reserve(static_cast<std::size_t>(cfg.n_subjects) * cfg.n_classes * cfg.trials);
  for (int s = 0; s < cfg.n_subjects; ++s) {
    Mat a(d, d);
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) a(i, j) = normal(rng);
    const Mat r = mat::expm(cfg.rotation_scale * 0.5 * (a - a.transpose()));
    Vec u(d);
    for (int i = 0; i < d; ++i) u(i) = cfg.dispersion_range * unit(rng);
    const Mat g = r * u.array().exp().matrix().asDiagonal();

    for (int k = 0; k < cfg.n_classes; ++k) {
      for (int t = 0; t < cfg.trials; ++t) {
        Mat x = protos[static_cast<std::size_t>(k)];
        if (cfg.noise > 0.0) x = mat::exp_sym(proto_logs[static_cast<std::size_t>(k)] + cfg.noise * gaussian_sym(rng, normal, d));
        items.push_back({s + 1, k, SpdMatrix::unchecked(trace_normalized(g * x * g.transpose()))});
      }
    }
  }
  return CovarianceSet(d, std::move(items));
}

// ---------------------------------------------------------------------------

namespace {

constexpr std::uint32_t kFormatVersion = 1;
constexpr std::uint32_t kMaxDim = 4096;

void read_header(io::ByteReader& in, std::string_view magic, std::uint32_t& dim, std::uint32_t& count) {
  in.expect_magic(magic);
  const auto at = in.offset();
  const std::uint32_t version = in.u32();
  if (version != kFormatVersion) in.fail_at("unsupported version " + std::to_string(version), at);
  const auto dim_at = in.offset();
  dim = in.u32();
  if (dim == 0 || dim > kMaxDim) in.fail_at("invalid dimension " + std::to_string(dim), dim_at);
  count = in.u32();
}

void read_ids(io::ByteReader& in, int& subject, int& label) {
  const auto at = in.offset();
  const std::uint32_t s = in.u32();
  const std::uint32_t l = in.u32();
  if (s > static_cast<std::uint32_t>(INT_MAX)) in.fail_at("subject id out of range", at);
  if (l >= static_cast<std::uint32_t>(kMaxClasses)) in.fail_at("label " + std::to_string(l) + " out of range", at + 4);
  subject = static_cast<int>(s);
  label = static_cast<int>(l);
}

}  // namespace

std::string serialize_covariances(const CovarianceSet& ds) {
  io::ByteWriter out;
  out.put_bytes("SPDC");
  out.put_u32(kFormatVersion);
  out.put_u32(static_cast<std::uint32_t>(ds.dim()));
  out.put_u32(static_cast<std::uint32_t>(ds.size()));
  for (const auto& it : ds.items()) {
    out.put_u32(static_cast<std::uint32_t>(it.subject));
    out.put_u32(static_cast<std::uint32_t>(it.label));
    const Mat& m = it.cov.mat();
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) out.put_f64(m(i, j));
  }
  return out.bytes();
}

CovarianceSet parse_covariances(std::string bytes) {
  io::ByteReader in(std::move(bytes));
  std::uint32_t dim = 0, count = 0;
  read_header(in, "SPDC", dim, count);
  std::vector<CovItem> items;
  items.reserve(std::min<std::uint64_t>(count, in.remaining() / (8 + 8ull * dim * dim) + 1));
  for (std::uint32_t r = 0; r < count; ++r) {
    in.set_record(r);
    int subject = 0, label = 0;
    read_ids(in, subject, label);
    const auto at = in.offset();
    Mat m = in.dense(dim, dim);
    if (!m.allFinite()) in.fail_at("non-finite matrix entries", at);
    const double scale = m.cwiseAbs().maxCoeff();
    if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale) in.fail_at("matrix is not symmetric", at);
    try {
      items.push_back({subject, label, SpdMatrix(std::move(m))});
    } catch (const NotPositiveDefinite& e) {
      in.fail_at(std::string("matrix is not positive definite: ") + e.what(), at);
    }
  }
  in.set_record(std::nullopt);
  if (!in.at_end()) in.fail("trailing bytes after " + std::to_string(count) + " records");
  return CovarianceSet(static_cast<int>(dim), std::move(items));
}

void save_covariances(const CovarianceSet& ds, const std::filesystem::path& path) {
  io::ByteWriter w;
  w.put_bytes(serialize_covariances(ds));
  w.write_file(path);
}

CovarianceSet load_covariances(const std::filesystem::path& path) {
  auto reader = io::ByteReader::from_file(path);
  return parse_covariances(reader.bytes(reader.remaining()));
}

void save_epochs(const EpochSet& es, const std::filesystem::path& path) {
  io::ByteWriter out;
  out.put_bytes("EPOC");
  out.put_u32(kFormatVersion);
  out.put_u32(static_cast<std::uint32_t>(es.channels));
  out.put_u32(static_cast<std::uint32_t>(es.epochs.size()));
  for (const auto& e : es.epochs) {
    if (e.samples.rows() != es.channels) throw ShapeError("save_epochs: channel count mismatch");
    out.put_u32(static_cast<std::uint32_t>(e.subject));
    out.put_u32(static_cast<std::uint32_t>(e.label));
    out.put_u32(static_cast<std::uint32_t>(e.samples.cols()));
    for (Eigen::Index i = 0; i < e.samples.rows(); ++i)
      for (Eigen::Index j = 0; j < e.samples.cols(); ++j) out.put_f64(e.samples(i, j));
  }
  out.write_file(path);
}

EpochSet parse_epochs(std::string bytes) {
  io::ByteReader in(std::move(bytes));
  std::uint32_t channels = 0, count = 0;
  read_header(in, "EPOC", channels, count);
  EpochSet es;
  es.channels = static_cast<int>(channels);
  for (std::uint32_t r = 0; r < count; ++r) {
    in.set_record(r);
    Epoch e;
    read_ids(in, e.subject, e.label);
    const auto t_at = in.offset();
    const std::uint32_t t = in.u32();
    if (t == 0) in.fail_at("epoch has no samples", t_at);
    const auto at = in.offset();
    e.samples = in.dense(channels, t);
    if (!e.samples.allFinite()) in.fail_at("non-finite samples", at);
    es.epochs.push_back(std::move(e));
  }
  in.set_record(std::nullopt);
  if (!in.at_end()) in.fail("trailing bytes after " + std::to_string(count) + " records");
  return es;
}

EpochSet load_epochs(const std::filesystem::path& path) {
  auto reader = io::ByteReader::from_file(path);
  return parse_epochs(reader.bytes(reader.remaining()));
}

void save_labels_csv(const CovarianceSet& ds, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << "index,subject,label\n";
  for (std::size_t i = 0; i < ds.size(); ++i) out << i << ',' << ds[i].subject << ',' << ds[i].label << '\n';
}

}  // namespace spdgeo
