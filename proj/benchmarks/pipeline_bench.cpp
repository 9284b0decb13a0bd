#include <benchmark/benchmark.h>

#include "spdgeo/harness.hpp"

using namespace spdgeo;

namespace {

const CovarianceSet& fixture() {
  static const CovarianceSet ds = synth_generate(SynthConfig::high_distortion(7));
  return ds;
}

}  // namespace

static void BM_RaFitApply(benchmark::State& state) {
  const auto& ds = fixture();
  for (auto _ : state) benchmark::DoNotOptimize(ra_apply(ra_fit(ds), ds));
}
BENCHMARK(BM_RaFitApply)->Unit(benchmark::kMillisecond);

static void BM_DcrLossStep(benchmark::State& state) {
  const auto& ds = fixture();
  std::vector<Mat> logs;
  for (const auto& it : ds.items()) logs.push_back(mat::log_spd(it.cov.mat()));
  const auto labels = ds.labels();
  const DcrHyper h;
  for (auto _ : state) {
    ad::Tape tape;
    const auto a = tape.leaf(Mat::Zero(ds.dim(), ds.dim()));
    const auto s = tape.leaf(Mat::Constant(1, 1, dcr_unit_scale_raw()), ad::Kind::Scalar);
    const auto loss = dcr_loss(tape, a, s, logs, labels, h, 0);
    tape.backward(loss);
    benchmark::DoNotOptimize(tape.grad(a));
  }
}
BENCHMARK(BM_DcrLossStep)->Unit(benchmark::kMillisecond);

static void BM_MdmFitPredict(benchmark::State& state) {
  const auto& ds = fixture();
  for (auto _ : state) {
    const MdmModel m = mdm_fit(ds);
    benchmark::DoNotOptimize(mdm_predict(m, ds[0].cov));
  }
}
BENCHMARK(BM_MdmFitPredict)->Unit(benchmark::kMillisecond);

static void BM_LosoRaMdm(benchmark::State& state) {
  const auto& ds = fixture();
  const RunConfig cfg = parse_run_config(R"({"align": ["ra"], "classifier": "mdm"})");
  for (auto _ : state) {
    benchmark::DoNotOptimize(run_loso(cfg, ds, {.jobs = static_cast<int>(state.range(0))}).mean());
  }
}
BENCHMARK(BM_LosoRaMdm)->Arg(1)->Arg(4)->Unit(benchmark::kMillisecond)->UseRealTime();
