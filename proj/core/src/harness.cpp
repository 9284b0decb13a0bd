#include "spdgeo/harness.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

namespace spdgeo {

using json = nlohmann::json;

namespace {

// --- hyperparameter JSON -----------------------------------------------------

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

/// The four fields a run-level optim block controls.
json run_optim_json(const ad::OptimConfig& o) {
  return {{"lr", o.lr}, {"weight_decay", o.weight_decay}, {"batch", o.batch}, {"steps", o.steps}};
}

std::string_view mean_name(MeanKind m) { return m == MeanKind::Karcher ? "karcher" : "log_euclidean"; }

MeanKind mean_from(const std::string& s) {
  if (s == "karcher") return MeanKind::Karcher;
  if (s == "log_euclidean") return MeanKind::LogEuclidean;
  throw Error("mean must be 'karcher' or 'log_euclidean', got '" + s + "'");
}

struct RaOptions {
  RaScope scope = RaScope::Subject;
  MeanKind mean = MeanKind::LogEuclidean;
};

json stage_defaults(AlignStage kind) {
  switch (kind) {
    case AlignStage::Ra: return {{"scope", "subject"}, {"mean", "log_euclidean"}};
    case AlignStage::Rpa: {
      const RpaOptions o;
      return {{"mean", mean_name(o.mean)},
              {"dispersion", o.dispersion == RpaDispersion::LogScatter ? "log_scatter" : "mean"}};
    }
    case AlignStage::Dcr: {
      const DcrHyper h;
      return {{"gamma", h.gamma}, {"gamma_c", h.gamma_c},     {"alpha", h.alpha}, {"beta", h.beta},
              {"eps", h.eps},     {"lr", h.lr},               {"weight_decay", h.weight_decay},
              {"batch", h.batch}, {"steps", h.steps},         {"clip_norm", h.clip_norm}};
    }
    case AlignStage::Rifu: {
      const RifuConfig c;
      return {{"lambda_w", c.lambda_w},
              {"lambda_bet", c.lambda_bet},
              {"lambda_sub", c.lambda_sub},
              {"lambda_rec", c.lambda_rec},
              {"eps", c.eps},
              {"d1", c.d1},
              {"d2", c.d2},
              {"identity_init", c.identity_init},
              {"optim", optim_json(c.optim)}};
    }
  }
  throw Error("unknown alignment stage");
}

RaOptions ra_from(const json& j) {
  RaOptions o;
  const auto scope = j.at("scope").get<std::string>();
  if (scope != "subject" && scope != "global") throw Error("ra: scope must be 'subject' or 'global'");
  o.scope = scope == "subject" ? RaScope::Subject : RaScope::TrainGlobal;
  o.mean = mean_from(j.at("mean").get<std::string>());
  return o;
}

RpaOptions rpa_from(const json& j) {
  RpaOptions o;
  o.mean = mean_from(j.at("mean").get<std::string>());
  const auto d = j.at("dispersion").get<std::string>();
  if (d != "log_scatter" && d != "mean") throw Error("rpa: dispersion must be 'log_scatter' or 'mean'");
  o.dispersion = d == "log_scatter" ? RpaDispersion::LogScatter : RpaDispersion::Mean;
  return o;
}

DcrHyper dcr_from(const json& j) {
  DcrHyper h;
  h.gamma = j.at("gamma").get<double>();
  h.gamma_c = j.at("gamma_c").get<double>();
  h.alpha = j.at("alpha").get<double>();
  h.beta = j.at("beta").get<double>();
  h.eps = j.at("eps").get<double>();
  h.lr = j.at("lr").get<double>();
  h.weight_decay = j.at("weight_decay").get<double>();
  h.batch = j.at("batch").get<int>();
  h.steps = j.at("steps").get<int>();
  h.clip_norm = j.at("clip_norm").get<double>();
  h.validate();
  return h;
}

RifuConfig rifu_from(const json& j) {
  RifuConfig c;
  c.lambda_w = j.at("lambda_w").get<double>();
  c.lambda_bet = j.at("lambda_bet").get<double>();
  c.lambda_sub = j.at("lambda_sub").get<double>();
  c.lambda_rec = j.at("lambda_rec").get<double>();
  c.eps = j.at("eps").get<double>();
  c.d1 = j.at("d1").get<int>();
  c.d2 = j.at("d2").get<int>();
  c.identity_init = j.at("identity_init").get<bool>();
  c.optim = optim_from(j.at("optim"));
  for (double v : {c.lambda_w, c.lambda_bet, c.lambda_sub, c.lambda_rec}) {
    if (!(v >= 0.0)) throw Error("rifu: loss weights must be non-negative");
  }
  if (!(c.eps > 0.0) || c.d1 < 0 || c.d2 < 0) throw Error("rifu: eps must be positive and d1, d2 non-negative");
  return c;
}

template <class F>
auto from_json_text(F&& f, const std::string& text) {
  try {
    return f(json::parse(text));
  } catch (const json::exception& e) {
    throw Error(std::string("bad hyperparameter value: ") + e.what());
  }
}

json parse_json(const std::string& text, const std::string& what) {
  try {
    return json::parse(text.empty() ? "{}" : text);
  } catch (const json::parse_error& e) {
    throw Error(what + " is not valid JSON: " + e.what());
  }
}

/// Rejects keys of `overrides` that `defaults` does not have, recursively.
void check_known(const json& defaults, const json& overrides, const std::string& path) {
  if (!overrides.is_object()) throw Error("hyperparameters" + path + " must be a JSON object");
  for (const auto& [key, value] : overrides.items()) {
    if (!defaults.contains(key)) throw Error("unknown hyperparameter '" + path + key + "'");
    if (defaults.at(key).is_object()) check_known(defaults.at(key), value, path + key + ".");
  }
}

json with_overrides(json base, const std::string& overrides_text) {
  const json overrides = parse_json(overrides_text, "hyperparameters");
  check_known(base, overrides, "");
  base.merge_patch(overrides);
  return base;
}

/// Copies the run-level optimizer fields into `target`.
void apply_run_optim(json& target, const ad::OptimConfig& o, bool with_batch) {
  target["lr"] = o.lr;
  target["weight_decay"] = o.weight_decay;
  target["steps"] = o.steps;
  if (with_batch) target["batch"] = o.batch;
}

json stage_base(const RunConfig& cfg, AlignStage kind) {
  json base = stage_defaults(kind);
  if (kind == AlignStage::Dcr) apply_run_optim(base, cfg.optim, false);
  if (kind == AlignStage::Rifu) apply_run_optim(base["optim"], cfg.optim, true);
  return base;
}

// --- helpers -----------------------------------------------------------------

CovarianceSet strip_labels(const CovarianceSet& ds) {
  std::vector<CovItem> items = ds.items();
  for (auto& it : items) it.label = 0;
  return CovarianceSet(ds.dim(), std::move(items));
}

std::string fmt2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("write failed: " + path.string());
}

/// Display width of UTF-8 text (code points).
std::size_t width(const std::string& s) {
  return static_cast<std::size_t>(std::count_if(s.begin(), s.end(), [](char c) {
    return (static_cast<unsigned char>(c) & 0xC0) != 0x80;
  }));
}

std::string pad_left(const std::string& s, std::size_t w) { return std::string(w - std::min(w, width(s)), ' ') + s; }
std::string pad_right(const std::string& s, std::size_t w) { return s + std::string(w - std::min(w, width(s)), ' '); }

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false;
  bool any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
      continue;
    }
    if (c == '"') {
      quoted = true;
      any = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
      any = true;
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      if (any || !field.empty()) {
        row.push_back(std::move(field));
        rows.push_back(std::move(row));
      }
      row.clear();
      field.clear();
      any = false;
    } else {
      field += c;
      any = true;
    }
  }
  if (quoted) throw FormatError("CSV: unterminated quote");
  if (any || !field.empty()) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

json confusion_json(const Mat& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(static_cast<long long>(m(i, j)));
    rows.push_back(std::move(row));
  }
  return rows;
}

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

}  // namespace

// --- stages ------------------------------------------------------------------

std::string_view align_stage_name(AlignStage s) {
  switch (s) {
    case AlignStage::Ra: return "ra";
    case AlignStage::Rpa: return "rpa";
    case AlignStage::Dcr: return "dcr";
    case AlignStage::Rifu: return "rifu";
  }
  return "?";
}

AlignStage parse_align_stage(std::string_view name) {
  if (name == "ra") return AlignStage::Ra;
  if (name == "rpa") return AlignStage::Rpa;
  if (name == "dcr") return AlignStage::Dcr;
  if (name == "rifu") return AlignStage::Rifu;
  throw Error("unknown alignment stage '" + std::string(name) + "'");
}

std::string effective_stage_hyper(const RunConfig& cfg, const StageSpec& stage) {
  return with_overrides(stage_base(cfg, stage.kind), stage.hyper_json).dump();
}

std::string effective_classifier_hyper(const RunConfig& cfg) {
  json base = json::parse(make_classifier(cfg.classifier.kind)->hyper_json());
  if (base.contains("optim")) apply_run_optim(base["optim"], cfg.optim, true);
  return with_overrides(std::move(base), cfg.classifier.hyper_json).dump();
}

StageFit fit_stage(AlignStage kind, const std::string& hyper_json, const CovarianceSet& ds, std::uint64_t seed) {
  const std::string text = with_overrides(stage_defaults(kind), hyper_json).dump();
  StageFit out;
  switch (kind) {
    case AlignStage::Ra: {
      const RaOptions o = from_json_text(ra_from, text);
      const RaModel m = ra_fit(ds, o.scope, o.mean);
      out.aligned = ra_apply(m, ds);
      out.model = serialize_aligner(m);
      break;
    }
    case AlignStage::Rpa: {
      const RpaModel m = rpa_fit(ds, from_json_text(rpa_from, text));
      out.aligned = rpa_apply(m, ds);
      out.model = serialize_aligner(m);
      break;
    }
    case AlignStage::Dcr: {
      DcrFit f = dcr_fit(ds, from_json_text(dcr_from, text), seed);
      out.aligned = dcr_apply(f.model, ds);
      out.model = serialize_aligner(f.model);
      out.log = std::move(f.log);
      break;
    }
    case AlignStage::Rifu: {
      RifuFit f = rifu_fit(ds, from_json_text(rifu_from, text), seed);
      out.aligned = rifu_apply(f.model, ds);
      out.model = serialize_aligner(f.model);
      out.log = std::move(f.log);
      break;
    }
  }
  return out;
}

CovarianceSet apply_aligner(const std::string& model, const CovarianceSet& ds) {
  switch (aligner_kind(model)) {
    case AlignerKind::Ra: return ra_apply(parse_ra(model), ds);
    case AlignerKind::Rpa: return rpa_apply(parse_rpa(model), ds);
    case AlignerKind::Dcr: return dcr_apply(parse_dcr(model), ds);
    case AlignerKind::Rifu: return rifu_apply(parse_rifu(model), ds);
  }
  throw FormatError("unknown aligner kind");
}

// --- RunConfig ---------------------------------------------------------------

void RunConfig::validate() const {
  std::set<AlignStage> seen;
  for (const auto& st : align) {
    if (!seen.insert(st.kind).second) {
      throw Error("stage '" + std::string(align_stage_name(st.kind)) + "' appears more than once");
    }
  }
  if (!(optim.lr > 0) || optim.batch < 1 || optim.steps < 1 || !(optim.weight_decay >= 0)) {
    throw Error("optim: lr, batch and steps must be positive and weight_decay non-negative");
  }
  for (const auto& st : align) {
    const std::string text = effective_stage_hyper(*this, st);
    switch (st.kind) {
      case AlignStage::Ra: from_json_text(ra_from, text); break;
      case AlignStage::Rpa: from_json_text(rpa_from, text); break;
      case AlignStage::Dcr: from_json_text(dcr_from, text); break;
      case AlignStage::Rifu: from_json_text(rifu_from, text); break;
    }
  }
  make_classifier(classifier.kind, effective_classifier_hyper(*this));
}

std::string RunConfig::label() const {
  if (!name.empty()) return name;
  std::string out;
  for (const auto& st : align) out += std::string(align_stage_name(st.kind)) + ">";
  return out + std::string(classifier_name(classifier.kind));
}

std::string RunConfig::canonical_json() const {
  json stages = json::array();
  for (const auto& st : align) {
    stages.push_back({{"kind", align_stage_name(st.kind)}, {"hyper", json::parse(effective_stage_hyper(*this, st))}});
  }
  const json j{{"seed", seed},
               {"optim", run_optim_json(optim)},
               {"align", std::move(stages)},
               {"classifier",
                {{"kind", classifier_name(classifier.kind)},
                 {"hyper", json::parse(effective_classifier_hyper(*this))}}}};
  return j.dump();
}

std::string RunConfig::fingerprint() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(canonical_json())));
  return buf;
}

std::string RunConfig::to_json() const {
  json stages = json::array();
  for (const auto& st : align) {
    json s = json::parse(st.hyper_json.empty() ? "{}" : st.hyper_json);
    s["kind"] = align_stage_name(st.kind);
    stages.push_back(std::move(s));
  }
  json clf = json::parse(classifier.hyper_json.empty() ? "{}" : classifier.hyper_json);
  clf["kind"] = classifier_name(classifier.kind);
  json j{{"seed", seed}, {"optim", run_optim_json(optim)}, {"align", std::move(stages)}, {"classifier", std::move(clf)}};
  if (!name.empty()) j["name"] = name;
  if (!data.empty()) j["data"] = data;
  if (!out.empty()) j["out"] = out;
  return j.dump(2);
}

RunConfig parse_run_config(const std::string& json_text) {
  const json j = parse_json(json_text, "run config");
  if (!j.is_object()) throw Error("run config must be a JSON object");
  static const std::set<std::string> kKeys{"name", "seed", "data", "out", "optim", "align", "classifier"};
  for (const auto& [key, value] : j.items()) {
    if (!kKeys.contains(key)) throw Error("unknown run config key '" + key + "'");
  }
  RunConfig cfg;
  try {
    if (j.contains("name")) cfg.name = j.at("name").get<std::string>();
    if (j.contains("seed")) {
      cfg.seed = j.at("seed").get<std::uint64_t>();
    } else {
      cfg.seed = seed_from_env().value_or(0);
    }
    if (j.contains("data")) cfg.data = j.at("data").get<std::string>();
    if (j.contains("out")) cfg.out = j.at("out").get<std::string>();
    if (j.contains("optim")) {
      const json& o = j.at("optim");
      check_known(run_optim_json(cfg.optim), o, "optim.");
      if (o.contains("lr")) cfg.optim.lr = o.at("lr").get<double>();
      if (o.contains("weight_decay")) cfg.optim.weight_decay = o.at("weight_decay").get<double>();
      if (o.contains("batch")) cfg.optim.batch = o.at("batch").get<int>();
      if (o.contains("steps")) cfg.optim.steps = o.at("steps").get<int>();
    }
    if (j.contains("align")) {
      const json& a = j.at("align");
      if (!a.is_array()) throw Error("align must be a list of stages");
      for (const auto& s : a) {
        StageSpec st;
        if (s.is_string()) {
          st.kind = parse_align_stage(s.get<std::string>());
        } else if (s.is_object()) {
          json hyper = s;
          st.kind = parse_align_stage(hyper.at("kind").get<std::string>());
          hyper.erase("kind");
          st.hyper_json = hyper.dump();
        } else {
          throw Error("align entries must be names or objects");
        }
        cfg.align.push_back(std::move(st));
      }
    }
    if (!j.contains("classifier")) throw Error("run config needs exactly one classifier");
    const json& c = j.at("classifier");
    if (c.is_string()) {
      cfg.classifier.kind = parse_classifier_kind(c.get<std::string>());
    } else if (c.is_object()) {
      json hyper = c;
      cfg.classifier.kind = parse_classifier_kind(hyper.at("kind").get<std::string>());
      hyper.erase("kind");
      cfg.classifier.hyper_json = hyper.dump();
    } else {
      throw Error("run config needs exactly one classifier");
    }
  } catch (const json::exception& e) {
    throw Error(std::string("bad run config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) { return parse_run_config(read_text(path)); }

// --- folds -------------------------------------------------------------------

void check_audit(const FoldResult& fold) {
  for (const auto& e : fold.audit) {
    if (!(e.supervised || e.labels_visible)) continue;
    if (std::find(e.subjects.begin(), e.subjects.end(), fold.subject) != e.subjects.end()) {
      throw ZeroShotViolation("fold " + std::to_string(fold.subject) + ": stage '" + e.stage +
                              "' received the held-out subject");
    }
  }
}

FoldResult run_fold(const RunConfig& cfg, const CovarianceSet& ds, int held_out) {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<int> train_idx, test_idx;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    (ds[i].subject == held_out ? test_idx : train_idx).push_back(static_cast<int>(i));
  }
  if (test_idx.empty()) throw UnknownSubject(held_out);
  if (train_idx.empty()) throw InsufficientSubjects("LOSO fold has no training subjects");

  FoldResult r;
  r.subject = held_out;
  const std::uint64_t seed = cfg.seed + static_cast<std::uint64_t>(held_out);
  CovarianceSet tr = ds.subset(train_idx);
  CovarianceSet te = ds.subset(test_idx);

  auto record_loss = [&](const std::string& stage, const ad::TrainLog& log) {
    if (!log.loss.empty()) {
      r.losses.push_back({stage, log.loss.front(), log.loss.back(), static_cast<int>(log.loss.size())});
    }
  };

  // Every estimator is registered here before it sees data.
  auto audit = [&](std::string stage, bool supervised, const CovarianceSet& seen, bool labels_visible) {
    r.audit.push_back({std::move(stage), supervised, seen.subjects(), labels_visible});
    check_audit(r);
  };

  for (const auto& st : cfg.align) {
    const std::string hyper = effective_stage_hyper(cfg, st);
    const std::string name(align_stage_name(st.kind));
    switch (st.kind) {
      case AlignStage::Ra: {
        const RaOptions o = from_json_text(ra_from, hyper);
        if (o.scope == RaScope::TrainGlobal) {
          audit(name, false, tr, true);
          const RaModel m = ra_fit(tr, o.scope, o.mean);
          tr = ra_apply(m, tr);
          te = ra_apply(m, te);
        } else {
          audit(name + "/train", false, tr, true);
          tr = ra_apply(ra_fit(tr, o.scope, o.mean), tr);
          const CovarianceSet blind = strip_labels(te);
          audit(name + "/test", false, blind, false);
          te = ra_apply(ra_fit(blind, o.scope, o.mean), te);
        }
        break;
      }
      case AlignStage::Rpa: {
        const RpaOptions o = from_json_text(rpa_from, hyper);
        audit(name + "/train", false, tr, true);
        tr = rpa_apply(rpa_fit(tr, o), tr);
        const CovarianceSet blind = strip_labels(te);
        audit(name + "/test", false, blind, false);
        te = rpa_apply(rpa_fit(blind, o), te);
        break;
      }
      case AlignStage::Dcr: {
        audit(name, true, tr, true);
        const DcrFit f = dcr_fit(tr, from_json_text(dcr_from, hyper), seed);
        record_loss(name, f.log);
        tr = dcr_apply(f.model, tr);
        te = dcr_apply(f.model, te);
        break;
      }
      case AlignStage::Rifu: {
        audit(name, true, tr, true);
        const RifuFit f = rifu_fit(tr, from_json_text(rifu_from, hyper), seed);
        record_loss(name, f.log);
        tr = rifu_apply(f.model, tr);
        te = rifu_apply(f.model, te);
        break;
      }
    }
  }

  auto clf = make_classifier(cfg.classifier.kind, effective_classifier_hyper(cfg));
  audit(std::string(classifier_name(cfg.classifier.kind)), true, tr, true);
  clf->fit(tr, seed);
  if (const auto log = clf->train_log()) record_loss(std::string(classifier_name(cfg.classifier.kind)), *log);
  const std::vector<int> train_pred = clf->predict(tr);
  int train_correct = 0;
  for (std::size_t i = 0; i < tr.size(); ++i) train_correct += train_pred[i] == tr[i].label;
  r.train_accuracy = 100.0 * train_correct / static_cast<double>(tr.size());
  const std::vector<int> pred = clf->predict(te);

  const int k = ds.num_classes();
  r.confusion = Mat::Zero(k, k);
  for (std::size_t i = 0; i < te.size(); ++i) {
    if (pred[i] < 0 || pred[i] >= k) throw Error("classifier predicted an unknown class");
    r.confusion(te[i].label, pred[i]) += 1.0;
    if (pred[i] == te[i].label) ++r.correct;
  }
  r.n_test = static_cast<int>(te.size());
  r.accuracy = 100.0 * r.correct / r.n_test;
  r.ok = true;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

LosoReport run_loso(const RunConfig& cfg, const CovarianceSet& ds, const LosoOptions& opt) {
  cfg.validate();
  const std::vector<int> subjects = ds.subjects();
  if (subjects.size() < 2) throw InsufficientSubjects("LOSO needs at least two subjects");

  LosoReport report;
  report.name = cfg.label();
  report.fingerprint = cfg.fingerprint();
  report.config_json = cfg.canonical_json();
  report.n_classes = ds.num_classes();
  report.folds.resize(subjects.size());

  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::exception_ptr fatal;
  auto worker = [&] {
    for (std::size_t i = next++; i < subjects.size(); i = next++) {
      {
        std::lock_guard lock(mu);
        if (fatal) return;
      }
      const auto t0 = std::chrono::steady_clock::now();
      FoldResult r;
      try {
        r = run_fold(cfg, ds, subjects[i]);
      } catch (const ZeroShotViolation&) {
        std::lock_guard lock(mu);
        if (!fatal) fatal = std::current_exception();
        return;
      } catch (const Error& e) {
        r = FoldResult{};
        r.subject = subjects[i];
        r.error = e.what();
        r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      } catch (...) {
        std::lock_guard lock(mu);
        if (!fatal) fatal = std::current_exception();
        return;
      }
      std::lock_guard lock(mu);
      report.folds[i] = std::move(r);
    }
  };

  const int jobs = std::clamp(opt.jobs, 1, static_cast<int>(subjects.size()));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
  }
  if (fatal) std::rethrow_exception(fatal);
  return report;
}

// --- reports -----------------------------------------------------------------

double LosoReport::mean() const {
  const auto acc = accuracies();
  if (acc.empty()) return std::numeric_limits<double>::quiet_NaN();
  double s = 0.0;
  for (double a : acc) s += a;
  return s / static_cast<double>(acc.size());
}

double LosoReport::std_dev() const {
  const auto acc = accuracies();
  if (acc.empty()) return std::numeric_limits<double>::quiet_NaN();
  const double m = mean();
  double s = 0.0;
  for (double a : acc) s += (a - m) * (a - m);
  return std::sqrt(s / static_cast<double>(acc.size()));
}

bool LosoReport::all_ok() const {
  return std::all_of(folds.begin(), folds.end(), [](const FoldResult& f) { return f.ok; });
}

std::vector<int> LosoReport::subjects() const {
  std::vector<int> out;
  for (const auto& f : folds) out.push_back(f.subject);
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<double> LosoReport::accuracies() const {
  std::vector<double> out;
  for (const auto& f : folds) {
    if (f.ok) out.push_back(f.accuracy);
  }
  return out;
}

std::string LosoReport::to_json() const {
  json folds_j = json::array();
  for (const auto& f : folds) {
    json audit = json::array();
    for (const auto& e : f.audit) {
      audit.push_back(
          {{"stage", e.stage}, {"supervised", e.supervised}, {"labels_visible", e.labels_visible}, {"subjects", e.subjects}});
    }
    json losses = json::array();
    for (const auto& l : f.losses) {
      losses.push_back({{"stage", l.stage}, {"first", l.first}, {"last", l.last}, {"steps", l.steps}});
    }
    json fj{{"subject", f.subject},
            {"ok", f.ok},
            {"n_test", f.n_test},
            {"correct", f.correct},
            {"accuracy", f.accuracy},
            {"train_accuracy", f.train_accuracy},
            {"confusion", confusion_json(f.confusion)},
            {"audit", std::move(audit)},
            {"losses", std::move(losses)}};
    if (!f.error.empty()) fj["error"] = f.error;
    folds_j.push_back(std::move(fj));
  }
  json j{{"name", name},
         {"fingerprint", fingerprint},
         {"config", config_json.empty() ? json(nullptr) : json::parse(config_json)},
         {"n_classes", n_classes},
         {"folds", std::move(folds_j)},
         {"mean", number_or_null(mean())},
         {"std", number_or_null(std_dev())}};
  return j.dump(2) + "\n";
}

std::string LosoReport::timing_json() const {
  json folds_j = json::array();
  double total = 0.0;
  for (const auto& f : folds) {
    folds_j.push_back({{"subject", f.subject}, {"seconds", f.seconds}});
    total += f.seconds;
  }
  return json{{"fingerprint", fingerprint}, {"folds", std::move(folds_j)}, {"total_seconds", total}}.dump(2) + "\n";
}

LosoReport parse_report(const std::string& json_text) {
  try {
    const json j = json::parse(json_text);
    LosoReport r;
    r.name = j.at("name").get<std::string>();
    r.fingerprint = j.at("fingerprint").get<std::string>();
    if (!j.at("config").is_null()) r.config_json = j.at("config").dump();
    r.n_classes = j.at("n_classes").get<int>();
    for (const auto& fj : j.at("folds")) {
      FoldResult f;
      f.subject = fj.at("subject").get<int>();
      f.ok = fj.at("ok").get<bool>();
      f.n_test = fj.at("n_test").get<int>();
      f.correct = fj.at("correct").get<int>();
      f.accuracy = fj.at("accuracy").get<double>();
      if (fj.contains("error")) f.error = fj.at("error").get<std::string>();
      const auto& cm = fj.at("confusion");
      const auto rows = static_cast<Eigen::Index>(cm.size());
      f.confusion = Mat::Zero(rows, rows);
      for (Eigen::Index a = 0; a < rows; ++a) {
        if (cm[a].size() != cm.size()) throw FormatError("report: confusion matrix is not square");
        for (Eigen::Index b = 0; b < rows; ++b) f.confusion(a, b) = cm[a][b].get<double>();
      }
      for (const auto& ej : fj.at("audit")) {
        f.audit.push_back({ej.at("stage").get<std::string>(), ej.at("supervised").get<bool>(),
                           ej.at("subjects").get<std::vector<int>>(), ej.at("labels_visible").get<bool>()});
      }
      f.train_accuracy = fj.at("train_accuracy").get<double>();
      for (const auto& lj : fj.at("losses")) {
        f.losses.push_back({lj.at("stage").get<std::string>(), lj.at("first").get<double>(),
                            lj.at("last").get<double>(), lj.at("steps").get<int>()});
      }
      if (f.accuracy < 0.0 || f.accuracy > 100.0) throw FormatError("report: accuracy outside [0, 100]");
      r.folds.push_back(std::move(f));
    }
    return r;
  } catch (const json::exception& e) {
    throw FormatError(std::string("report: ") + e.what());
  }
}

LosoReport load_report(const std::filesystem::path& path) { return parse_report(read_text(path)); }

LosoReport report_from_accuracies(std::string name, const std::vector<int>& subjects,
                                  const std::vector<double>& accuracies) {
  if (subjects.size() != accuracies.size()) throw ShapeError("one accuracy per subject is required");
  LosoReport r;
  r.name = std::move(name);
  for (std::size_t i = 0; i < subjects.size(); ++i) {
    if (!(accuracies[i] >= 0.0 && accuracies[i] <= 100.0)) throw Error("accuracy outside [0, 100]");
    FoldResult f;
    f.subject = subjects[i];
    f.ok = true;
    f.accuracy = accuracies[i];
    r.folds.push_back(std::move(f));
  }
  return r;
}

// --- tables ------------------------------------------------------------------

std::string format_mean_std(double mean, double std_dev) { return fmt2(mean) + " ± " + fmt2(std_dev); }

Table emit_table(const std::vector<LosoReport>& reports) {
  if (reports.empty()) throw EmptyInput("emit_table: no reports");
  const std::vector<int> subjects = reports.front().subjects();
  for (const auto& r : reports) {
    if (r.subjects() != subjects) throw FormatError("emit_table: reports cover different subjects");
  }
  const std::size_t ncol = reports.size();

  // cells[row][col]; rows are subjects then the summary row.
  std::vector<std::vector<std::string>> cells(subjects.size() + 1, std::vector<std::string>(ncol));
  std::vector<std::vector<std::string>> csv_cells(subjects.size() + 2, std::vector<std::string>(ncol));
  for (std::size_t s = 0; s < subjects.size(); ++s) {
    double best = -1.0;
    std::vector<double> shown(ncol, -1.0);
    for (std::size_t c = 0; c < ncol; ++c) {
      const auto& folds = reports[c].folds;
      const auto it = std::find_if(folds.begin(), folds.end(), [&](const FoldResult& f) { return f.subject == subjects[s]; });
      if (!it->ok) {
        cells[s][c] = "failed";
        continue;
      }
      cells[s][c] = csv_cells[s][c] = fmt2(it->accuracy);
      shown[c] = std::stod(cells[s][c]);
      best = std::max(best, shown[c]);
    }
    for (std::size_t c = 0; c < ncol; ++c) {
      if (shown[c] >= 0.0 && shown[c] == best) cells[s][c] += "*";
    }
  }
  const std::size_t last = subjects.size();
  for (std::size_t c = 0; c < ncol; ++c) {
    const double m = reports[c].mean();
    const double sd = reports[c].std_dev();
    if (std::isfinite(m)) {
      cells[last][c] = format_mean_std(m, sd);
      csv_cells[last][c] = fmt2(m);
      csv_cells[last + 1][c] = fmt2(sd);
    } else {
      cells[last][c] = "failed";
    }
  }

  std::vector<std::string> row_labels;
  for (int s : subjects) row_labels.push_back(std::to_string(s));
  row_labels.push_back("Mean ± Std");

  std::size_t label_w = width(std::string("Subject"));
  for (const auto& l : row_labels) label_w = std::max(label_w, width(l));
  std::vector<std::size_t> col_w(ncol);
  for (std::size_t c = 0; c < ncol; ++c) {
    col_w[c] = width(reports[c].name);
    for (const auto& row : cells) col_w[c] = std::max(col_w[c], width(row[c]));
  }
  auto line = [&](const std::string& label, const std::vector<std::string>& row) {
    std::string out = pad_right(label, label_w);
    for (std::size_t c = 0; c < ncol; ++c) out += "  " + pad_left(row[c], col_w[c]);
    return out + "\n";
  };
  std::vector<std::string> header;
  for (const auto& r : reports) header.push_back(r.name);
  std::size_t total_w = label_w;
  for (auto w : col_w) total_w += 2 + w;
  const std::string rule(total_w, '-');

  Table t;
  t.text = line("Subject", header) + rule + "\n";
  for (std::size_t s = 0; s < subjects.size(); ++s) t.text += line(row_labels[s], cells[s]);
  t.text += rule + "\n" + line(row_labels[last], cells[last]);

  t.csv = "subject";
  for (const auto& r : reports) t.csv += "," + csv_field(r.name);
  t.csv += "\n";
  auto csv_row = [&](const std::string& label, const std::vector<std::string>& row) {
    std::string out = label;
    for (const auto& v : row) out += "," + v;
    return out + "\n";
  };
  for (std::size_t s = 0; s < subjects.size(); ++s) t.csv += csv_row(row_labels[s], csv_cells[s]);
  t.csv += csv_row("mean", csv_cells[last]);
  t.csv += csv_row("std", csv_cells[last + 1]);
  return t;
}

std::vector<LosoReport> parse_table_csv(const std::string& csv) {
  const auto rows = parse_csv(csv);
  if (rows.empty() || rows[0].size() < 2 || rows[0][0] != "subject") {
    throw FormatError("table CSV: missing 'subject' header");
  }
  const std::size_t ncol = rows[0].size() - 1;
  std::vector<LosoReport> out(ncol);
  for (std::size_t c = 0; c < ncol; ++c) out[c].name = rows[0][c + 1];
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (row.size() != ncol + 1) throw FormatError("table CSV: row " + std::to_string(r) + " has the wrong width");
    if (row[0] == "mean" || row[0] == "std") continue;
    int subject = 0;
    const auto [p, ec] = std::from_chars(row[0].data(), row[0].data() + row[0].size(), subject);
    if (ec != std::errc{} || p != row[0].data() + row[0].size()) {
      throw FormatError("table CSV: bad subject id '" + row[0] + "'");
    }
    for (std::size_t c = 0; c < ncol; ++c) {
      FoldResult f;
      f.subject = subject;
      if (!row[c + 1].empty()) {
        char* end = nullptr;
        f.accuracy = std::strtod(row[c + 1].c_str(), &end);
        if (end != row[c + 1].c_str() + row[c + 1].size() || !(f.accuracy >= 0.0 && f.accuracy <= 100.0)) {
          throw FormatError("table CSV: bad accuracy '" + row[c + 1] + "'");
        }
        f.ok = true;
      }
      out[c].folds.push_back(std::move(f));
    }
  }
  return out;
}

void write_report_files(const LosoReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_text(dir / "report.json", report.to_json());
  write_text(dir / "timing.json", report.timing_json());
  const Table t = emit_table({report});
  write_text(dir / "table.txt", t.text);
  write_text(dir / "table.csv", t.csv);
  for (const auto& f : report.folds) {
    if (!f.ok) continue;
    std::string csv = "true\\predicted";
    for (Eigen::Index j = 0; j < f.confusion.cols(); ++j) csv += "," + std::to_string(j);
    csv += "\n";
    for (Eigen::Index i = 0; i < f.confusion.rows(); ++i) {
      csv += std::to_string(i);
      for (Eigen::Index j = 0; j < f.confusion.cols(); ++j) {
        csv += "," + std::to_string(static_cast<long long>(f.confusion(i, j)));
      }
      csv += "\n";
    }
    write_text(dir / ("confusion_" + std::to_string(f.subject) + ".csv"), csv);
  }
}

std::optional<std::uint64_t> seed_from_env() {
  const char* v = std::getenv("SPDNET_GEO_SEED");
  if (v == nullptr || *v == '\0') return std::nullopt;
  const std::string_view s(v);
  std::uint64_t seed = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), seed);
  if (ec != std::errc{} || p != s.data() + s.size()) return std::nullopt;
  return seed;
}

}  // namespace spdgeo
