// spdgeo command-line tool. Exit codes: 0 success, 1 runtime or numeric
// failure (including failed LOSO folds and gradient checks), 2 usage error.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "spdgeo/gradsuite.hpp"
#include "spdgeo/harness.hpp"

namespace fs = std::filesystem;
using namespace spdgeo;

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& bytes) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot write " + p.string());
  out << bytes;
  if (!out) throw Error("write failed: " + p.string());
}

/// Inline JSON, or @path to read it from a file.
std::string hyper_text(const std::string& arg) {
  if (!arg.empty() && arg.front() == '@') return read_file(arg.substr(1));
  return arg.empty() ? "{}" : arg;
}

void write_loss_log(const fs::path& p, const ad::TrainLog& log) {
  std::string csv = "step,loss\n";
  char buf[64];
  for (std::size_t i = 0; i < log.loss.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g\n", i, log.loss[i]);
    csv += buf;
  }
  write_file(p, csv);
}

double accuracy(const std::vector<int>& pred, const CovarianceSet& ds) {
  int correct = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) correct += pred[i] == ds[i].label;
  return 100.0 * correct / static_cast<double>(ds.size());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Riemannian alignment and SPD classification toolkit"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic multi-subject covariance set");
  std::string preset = "low";
  SynthConfig sc;
  std::optional<int> s_subjects, s_classes, s_dim, s_trials;
  std::optional<double> s_rotation, s_dispersion, s_noise, s_spread;
  std::uint64_t s_seed = 7;
  std::string synth_out;
  synth->add_option("--preset", preset, "low or high distortion")->check(CLI::IsMember({"low", "high"}));
  synth->add_option("--seed", s_seed);
  synth->add_option("--subjects", s_subjects);
  synth->add_option("--classes", s_classes);
  synth->add_option("--dim", s_dim);
  synth->add_option("--trials", s_trials, "trials per subject and class");
  synth->add_option("--rotation", s_rotation, "scale of the per-subject rotation");
  synth->add_option("--dispersion", s_dispersion, "range of the per-subject log-scaling");
  synth->add_option("--noise", s_noise);
  synth->add_option("--spread", s_spread, "class prototype spread");
  synth->add_option("--out", synth_out, ".spdc output")->required();

  // cov
  auto* cov = app.add_subcommand("cov", "Estimate trial covariances from an epoch file");
  std::string cov_in, cov_out;
  CovOptions cov_opt;
  cov->add_option("--epochs", cov_in, ".epoc input")->required()->check(CLI::ExistingFile);
  cov->add_option("--out", cov_out, ".spdc output")->required();
  cov->add_flag("--shrinkage", cov_opt.shrinkage, "add a small ridge before normalization");
  cov->add_option("--shrinkage-delta", cov_opt.shrinkage_delta);

  // align
  auto* align = app.add_subcommand("align", "Fit an alignment stage or apply a saved one");
  std::string al_method, al_hyper = "{}", al_data, al_model, al_apply, al_out, al_log;
  std::uint64_t al_seed = 0;
  align->add_option("--data", al_data, ".spdc input")->required()->check(CLI::ExistingFile);
  auto* al_method_opt =
      align->add_option("--method", al_method, "ra, rpa, dcr or rifu")->check(CLI::IsMember({"ra", "rpa", "dcr", "rifu"}));
  align->add_option("--hyper", al_hyper, "hyperparameter JSON or @file");
  align->add_option("--seed", al_seed);
  align->add_option("--model", al_model, "write the fitted aligner here");
  auto* al_apply_opt = align->add_option("--apply", al_apply, "apply this saved aligner instead of fitting")
                           ->check(CLI::ExistingFile);
  align->add_option("--out", al_out, "aligned .spdc output")->required();
  align->add_option("--log", al_log, "training loss CSV (dcr, rifu)");
  al_method_opt->excludes(al_apply_opt);

  // train
  auto* train = app.add_subcommand("train", "Fit a classifier");
  std::string tr_kind, tr_hyper = "{}", tr_data, tr_model, tr_log;
  std::uint64_t tr_seed = 0;
  train->add_option("--data", tr_data, ".spdc input")->required()->check(CLI::ExistingFile);
  train->add_option("--classifier", tr_kind, "mdm, tslr, tsa-lda, csp-lda, dcnet or rifunet")
      ->required()
      ->check(CLI::IsMember({"mdm", "tslr", "tsa-lda", "csp-lda", "dcnet", "rifunet"}));
  train->add_option("--hyper", tr_hyper, "hyperparameter JSON or @file");
  train->add_option("--seed", tr_seed);
  train->add_option("--model", tr_model, "model output")->required();
  train->add_option("--log", tr_log, "training loss CSV");

  // eval
  auto* eval = app.add_subcommand("eval", "Score a saved classifier");
  std::string ev_data, ev_model, ev_aligner, ev_pred;
  eval->add_option("--data", ev_data, ".spdc input")->required()->check(CLI::ExistingFile);
  eval->add_option("--model", ev_model, "classifier file")->required()->check(CLI::ExistingFile);
  eval->add_option("--aligner", ev_aligner, "aligner applied first")->check(CLI::ExistingFile);
  eval->add_option("--predictions", ev_pred, "index,subject,label,predicted CSV");

  // loso
  auto* loso = app.add_subcommand("loso", "Leave-one-subject-out evaluation of a pipeline");
  std::string lo_config, lo_data, lo_out;
  int lo_jobs = 1;
  std::optional<std::uint64_t> lo_seed;
  loso->add_option("--config", lo_config, "run config JSON")->required()->check(CLI::ExistingFile);
  loso->add_option("--data", lo_data, ".spdc input (overrides the config)");
  loso->add_option("--out", lo_out, "report directory (overrides the config)");
  loso->add_option("--jobs", lo_jobs, "folds run in parallel")->check(CLI::PositiveNumber);
  loso->add_option("--seed", lo_seed, "overrides the config");

  // gradcheck
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable operation");
  GradSuiteOptions go;
  std::string gr_filter;
  bool gr_list = false;
  grad->add_option("--seed", go.seed);
  grad->add_option("--instances", go.instances)->check(CLI::PositiveNumber);
  grad->add_option("--step", go.step);
  grad->add_option("--tolerance", go.tolerance);
  grad->add_option("--filter", gr_filter, "only cases whose name starts with this");
  grad->add_flag("--list", gr_list, "print case names and exit");

  // table
  auto* table = app.add_subcommand("table", "Render reports side by side");
  std::vector<std::string> tb_reports, tb_csvs, tb_names;
  std::string tb_out;
  table->add_option("--report", tb_reports, "report.json or a report directory")->check(CLI::ExistingPath);
  table->add_option("--csv", tb_csvs, "table CSV to include")->check(CLI::ExistingFile);
  table->add_option("--name", tb_names, "column names, in order, replacing the report names");
  table->add_option("--out", tb_out, "prefix for .txt and .csv outputs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*synth) {
      sc = preset == "high" ? SynthConfig::high_distortion(s_seed) : SynthConfig::low_distortion(s_seed);
      if (s_subjects) sc.n_subjects = *s_subjects;
      if (s_classes) sc.n_classes = *s_classes;
      if (s_dim) sc.dim = *s_dim;
      if (s_trials) sc.trials = *s_trials;
      if (s_rotation) sc.rotation_scale = *s_rotation;
      if (s_dispersion) sc.dispersion_range = *s_dispersion;
      if (s_noise) sc.noise = *s_noise;
      if (s_spread) sc.class_spread = *s_spread;
      const CovarianceSet ds = synth_generate(sc);
      save_covariances(ds, synth_out);
      std::printf("wrote %zu items (%zu subjects, dim %d) to %s\n", ds.size(), ds.subjects().size(), ds.dim(),
                  synth_out.c_str());
      return 0;
    }

    if (*cov) {
      const CovarianceSet ds = estimate_covariances(load_epochs(cov_in), cov_opt);
      save_covariances(ds, cov_out);
      std::printf("wrote %zu covariances (dim %d) to %s\n", ds.size(), ds.dim(), cov_out.c_str());
      return 0;
    }

    if (*align) {
      const CovarianceSet ds = load_covariances(al_data);
      if (!al_apply.empty()) {
        save_covariances(apply_aligner(read_file(al_apply), ds), al_out);
        return 0;
      }
      if (al_method.empty()) throw CLI::RequiredError("--method or --apply");
      const StageFit f = fit_stage(parse_align_stage(al_method), hyper_text(al_hyper), ds, al_seed);
      save_covariances(f.aligned, al_out);
      if (!al_model.empty()) write_file(al_model, f.model);
      if (!al_log.empty() && f.log) write_loss_log(al_log, *f.log);
      if (f.log && !f.log->loss.empty()) {
        std::printf("%s: loss %.6g -> %.6g over %zu steps\n", al_method.c_str(), f.log->loss.front(),
                    f.log->loss.back(), f.log->loss.size());
      }
      return 0;
    }

    if (*train) {
      const CovarianceSet ds = load_covariances(tr_data);
      auto clf = make_classifier(parse_classifier_kind(tr_kind), hyper_text(tr_hyper));
      clf->fit(ds, tr_seed);
      write_file(tr_model, clf->serialize());
      if (const auto log = clf->train_log(); log && !tr_log.empty()) write_loss_log(tr_log, *log);
      std::printf("%s: training accuracy %.2f%%\n", tr_kind.c_str(), accuracy(clf->predict(ds), ds));
      return 0;
    }

    if (*eval) {
      CovarianceSet ds = load_covariances(ev_data);
      if (!ev_aligner.empty()) ds = apply_aligner(read_file(ev_aligner), ds);
      const auto clf = parse_classifier(read_file(ev_model));
      const auto pred = clf->predict(ds);
      if (!ev_pred.empty()) {
        std::string csv = "index,subject,label,predicted\n";
        for (std::size_t i = 0; i < ds.size(); ++i) {
          csv += std::to_string(i) + "," + std::to_string(ds[i].subject) + "," + std::to_string(ds[i].label) + "," +
                 std::to_string(pred[i]) + "\n";
        }
        write_file(ev_pred, csv);
      }
      std::printf("accuracy %.2f%% on %zu items\n", accuracy(pred, ds), ds.size());
      return 0;
    }

    if (*loso) {
      RunConfig cfg = load_run_config(lo_config);
      if (lo_seed) cfg.seed = *lo_seed;
      // Paths inside the config are relative to the config file.
      const fs::path base = fs::path(lo_config).parent_path();
      const fs::path data = !lo_data.empty() ? fs::path(lo_data) : base / cfg.data;
      const fs::path out = !lo_out.empty() ? fs::path(lo_out) : base / cfg.out;
      if (lo_data.empty() && cfg.data.empty()) throw CLI::RequiredError("--data (or \"data\" in the config)");
      if (lo_out.empty() && cfg.out.empty()) throw CLI::RequiredError("--out (or \"out\" in the config)");
      const LosoReport report = run_loso(cfg, load_covariances(data), {.jobs = lo_jobs});
      write_report_files(report, out);
      std::fputs(emit_table({report}).text.c_str(), stdout);
      for (const auto& f : report.folds) {
        if (!f.ok) std::fprintf(stderr, "fold %d failed: %s\n", f.subject, f.error.c_str());
      }
      return report.all_ok() ? 0 : 1;
    }

    if (*grad) {
      if (gr_list) {
        for (const auto& name : gradient_suite_cases()) std::puts(name.c_str());
        return 0;
      }
      const GradSuiteReport r = run_gradient_suite(go, gr_filter);
      if (r.cases.empty()) throw CLI::ValidationError("--filter", "matches no case");
      for (const auto& c : r.cases) {
        std::printf("%-34s %.3e  %s\n", c.name.c_str(), c.worst, c.passed ? "ok" : "FAIL");
      }
      std::printf("%zu cases, %.1f s, %s\n", r.cases.size(), r.seconds, r.passed() ? "all passed" : "FAILED");
      return r.passed() ? 0 : 1;
    }

    if (*table) {
      std::vector<LosoReport> reports;
      for (const auto& p : tb_reports) {
        reports.push_back(load_report(fs::is_directory(p) ? fs::path(p) / "report.json" : fs::path(p)));
      }
      for (const auto& p : tb_csvs) {
        for (auto& r : parse_table_csv(read_file(p))) reports.push_back(std::move(r));
      }
      if (reports.empty()) throw CLI::RequiredError("--report or --csv");
      if (!tb_names.empty()) {
        if (tb_names.size() != reports.size()) throw CLI::ValidationError("--name", "one name per column");
        for (std::size_t i = 0; i < reports.size(); ++i) reports[i].name = tb_names[i];
      }
      const Table t = emit_table(reports);
      std::fputs(t.text.c_str(), stdout);
      if (!tb_out.empty()) {
        write_file(tb_out + ".txt", t.text);
        write_file(tb_out + ".csv", t.csv);
      }
      return 0;
    }
  } catch (const CLI::Error& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
