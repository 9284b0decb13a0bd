#include "spdgeo/optim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace spdgeo::ad {

void adam_step(std::span<const ParamRef> params, std::span<const Mat> grads, AdamState& state) {
  if (params.size() != grads.size()) throw ShapeError("adam_step: parameter/gradient count mismatch");
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.push_back(Mat::Zero(p.value->rows(), p.value->cols()));
      state.second_moment.push_back(Mat::Zero(p.value->rows(), p.value->cols()));
    }
  }
  if (state.first_moment.size() != params.size()) throw ShapeError("adam_step: state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].rows() != params[i].value->rows() || grads[i].cols() != params[i].value->cols()) {
      throw ShapeError("adam_step: gradient shape mismatch for '" + params[i].name + "'");
    }
    if (!grads[i].allFinite()) throw NumericalError("adam_step: non-finite gradient for '" + params[i].name + "'");
  }

  const AdamConfig& c = state.config;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bias1 = 1.0 - std::pow(c.beta1, t);
  const double bias2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Mat& m = state.first_moment[i];
    Mat& v = state.second_moment[i];
    m = c.beta1 * m + (1.0 - c.beta1) * grads[i];
    v = c.beta2 * v + (1.0 - c.beta2) * grads[i].cwiseProduct(grads[i]);
    const Mat update = (m / bias1).array() / ((v / bias2).array().sqrt() + c.eps);
    Mat& p = *params[i].value;
    p -= c.lr * (update + c.weight_decay * p);
  }
}

double clip_global_norm(std::span<Mat> grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) sq += g.squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& g : grads) g *= s;
  }
  return norm;
}

namespace {

double evaluate(const LossBuilder& f, std::span<const GradInput> point) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(point.size());
  for (const auto& in : point) vars.push_back(tape.constant(in.value, in.kind));
  return f(tape, vars).scalar();
}

}  // namespace

GradCheckResult check_gradient(const LossBuilder& f, std::span<const GradInput> point, double step) {
  std::vector<Mat> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& in : point) vars.push_back(tape.leaf(in.value, in.kind));
    const Var loss = f(tape, vars);
    tape.backward(loss);
    for (const auto& v : vars) analytic.push_back(tape.grad(v));
  }

  GradCheckResult result;
  std::vector<GradInput> work(point.begin(), point.end());
  for (std::size_t b = 0; b < work.size(); ++b) {
    const bool sym = work[b].kind == Kind::Sym;
    const Mat& a = analytic[b];
    Mat numeric = Mat::Zero(a.rows(), a.cols());
    Mat expected = Mat::Zero(a.rows(), a.cols());
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
      for (Eigen::Index j = 0; j < a.cols(); ++j) {
        if (sym && j < i) continue;
        const bool mirrored = sym && i != j;
        const double saved = work[b].value(i, j);
        auto set = [&](double v) {
          work[b].value(i, j) = v;
          if (mirrored) work[b].value(j, i) = v;
        };
        set(saved + step);
        const double up = evaluate(f, work);
        set(saved - step);
        const double down = evaluate(f, work);
        set(saved);
        numeric(i, j) = (up - down) / (2.0 * step);
        expected(i, j) = mirrored ? a(i, j) + a(j, i) : a(i, j);
      }
    }
    double err;
    if (!numeric.allFinite() || !expected.allFinite()) {
      err = std::numeric_limits<double>::infinity();
    } else {
      const double denom =
          std::max({expected.cwiseAbs().maxCoeff(), numeric.cwiseAbs().maxCoeff(), 1e-8});
      err = (expected - numeric).cwiseAbs().maxCoeff() / denom;
    }
    result.per_input.push_back(err);
    result.max_rel_error = std::max(result.max_rel_error, err);
  }
  return result;
}

TrainLog train_adam(std::span<const ParamRef> params, int n_items, const OptimConfig& cfg, std::uint64_t seed,
                    const BatchLoss& loss_fn) {
  if (n_items <= 0) throw EmptyInput("train_adam: no training items");
  AdamState state;
  state.config.lr = cfg.lr;
  state.config.weight_decay = cfg.weight_decay;

  std::mt19937_64 rng(seed);
  std::vector<int> order(static_cast<std::size_t>(n_items));
  std::iota(order.begin(), order.end(), 0);
  const int batch = std::max(1, std::min(cfg.batch, n_items));
  const bool full = batch == n_items;
  std::size_t cursor = order.size();

  TrainLog log;
  std::vector<int> idx(static_cast<std::size_t>(batch));
  for (int step = 0; step < cfg.steps; ++step) {
    if (full) {
      std::iota(idx.begin(), idx.end(), 0);
    } else {
      for (int k = 0; k < batch; ++k) {
        if (cursor == order.size()) {
          std::shuffle(order.begin(), order.end(), rng);
          cursor = 0;
        }
        idx[static_cast<std::size_t>(k)] = order[cursor++];
      }
    }

    Tape tape;
    std::vector<Var> vars;
    vars.reserve(params.size());
    for (const auto& p : params) vars.push_back(tape.leaf(*p.value, p.kind));
    const Var loss = loss_fn(tape, vars, idx, step);
    const double value = loss.scalar();
    if (!std::isfinite(value)) {
      throw NumericalError("training loss is not finite at step " + std::to_string(step));
    }
    log.loss.push_back(value);
    if (value < cfg.divergence_floor) {
      log.stopped_early = true;
      break;
    }
    tape.backward(loss);
    std::vector<Mat> grads;
    grads.reserve(vars.size());
    for (const auto& v : vars) grads.push_back(tape.grad(v));
    clip_global_norm(grads, cfg.clip_norm);
    adam_step(params, grads, state);
  }
  return log;
}

}  // namespace spdgeo::ad
