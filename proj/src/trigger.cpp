#include "tmmnn/trigger.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

#include "tmmnn/checkpoint.hpp"
#include "tmmnn/optim.hpp"

namespace tmmnn {

Real omega_for(const Mat& x, bool trigger_weight) {
  const double mean = x.template cast<double>().mean();
  const double var =
      (x.template cast<double>().array() - mean).square().sum() / double(x.size());
  const Real sd = Real(std::sqrt(var));
  Real omega = trigger_weight ? Real(1) - sd : sd;
  if (omega < Real(0.05)) {
    std::cerr << "tmmnn: omega " << omega
              << " below floor, clamping to 0.05\n";
    omega = Real(0.05);
  }
  return std::min(omega, Real(1));
}

Mat apply_trigger(const Mat& x, const Trigger& trig) {
  if (x.cols() != trig.tau.cols())
    throw DimensionError("apply_trigger: input width " + std::to_string(x.cols()) +
                         " vs trigger width " + std::to_string(trig.tau.cols()));
  const Mat tau = trig.masked_tau();
  Mat out(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i)
    out.row(i) = x.row(i) * trig.omega + tau.row(0) * (Real(1) - trig.omega);
  return out.cwiseMax(Real(0)).cwiseMin(Real(1));
}

double nullspace_mse(const Classifier& model, const Mat& tau, const Mat& x) {
  Mat shifted = x;
  for (Index i = 0; i < shifted.rows(); ++i) shifted.row(i) += tau.row(0);
  const Mat clean = model.logits(x);
  const Mat moved = model.logits(shifted);
  return (moved - clean).template cast<double>().array().square().sum() /
         double(clean.size());
}

namespace {

Mat uniform_init(Index d, Real scale, std::uint64_t seed) {
  auto rng = make_rng(seed, {0x7416ULL});
  std::uniform_real_distribution<double> uni{-double(scale), double(scale)};
  Mat tau(1, d);
  for (Index j = 0; j < d; ++j) tau(0, j) = Real(uni(rng));
  return tau;
}

struct Objective {
  double total = 0.0;
  double mse_term = 0.0;
};

// Shared optimizer loop. `batch_for_iter` supplies the rows whose logits the
// mse term compares (the query row, or a training minibatch); `eval_rows`
// is the fixed slice used for best-iterate tracking and early stopping.
Trigger optimize_trigger_impl(const Classifier& model, const Mat& eval_rows,
                              const std::function<Mat(int)>& batch_for_iter,
                              const TriggerHyper& hyper, std::uint64_t seed,
                              const std::optional<Mat>& mask, Real omega) {
  hyper.validate();
  const Index d = model.config().input_dim();

  Mat tau0 = uniform_init(d, hyper.init_scale, seed);
  if (mask) tau0 = tau0.cwiseProduct(*mask);
  auto tau = make_leaf<Real>(tau0, true);
  std::vector<TensorPtr> params = {tau};
  auto adam = AdamState::for_params(params, hyper.lr);
  TapeModel tm = lift(model, {});

  const Mat eval_clean = model.logits(eval_rows);
  auto evaluate = [&](const Mat& t) {
    Objective obj;
    Mat shifted = eval_rows;
    for (Index i = 0; i < shifted.rows(); ++i) shifted.row(i) += t.row(0);
    const Mat moved = model.logits(shifted);
    obj.mse_term = (moved - eval_clean).template cast<double>().array().square().sum() /
                   double(eval_clean.size());
    const double norm2 = t.template cast<double>().array().square().sum();
    obj.total = obj.mse_term + double(hyper.penalty_weight) / norm2;
    return obj;
  };

  Trigger best;
  best.omega = omega;
  best.mask = mask;
  best.tau = tau->value;
  double best_obj = std::numeric_limits<double>::infinity();
  double initial_obj = 0.0;
  int steps = 0;

  for (int it = 0;; ++it) {
    const Objective obj = evaluate(tau->value);
    if (it == 0) initial_obj = obj.total;
    if (obj.total < best_obj) {
      best_obj = obj.total;
      best.tau = tau->value;
    }
    if (obj.mse_term < double(hyper.early_stop_tol) || it == hyper.max_iters)
      break;

    Tape tape;
    tau->zero_grad();
    const Mat batch = batch_for_iter(it);
    auto x = make_leaf<Real>(batch);
    // tau enters every batch row through the broadcasting add
    auto moved = add_row(tape, x, tau);
    auto clean_logits = make_leaf<Real>(model.logits(batch));
    auto loss_mse = mse(tape, tm.logits_on(tape, moved), clean_logits);
    auto penalty = scale(tape, reciprocal(tape, sum_squares(tape, tau)),
                         hyper.penalty_weight);
    auto loss = add(tape, loss_mse, penalty);
    tape.backward(loss);
    if (mask) tau->grad = tau->grad.cwiseProduct(*mask);
    adam_step(params, adam);
    if (mask) tau->value = tau->value.cwiseProduct(*mask);
    ++steps;
  }

  best.stats.iterations = steps;
  best.stats.initial_objective = initial_obj;
  best.stats.final_objective = best_obj;
  best.stats.final_norm = std::sqrt(
      best.tau.template cast<double>().array().square().sum());
  return best;
}

void check_query_shape(const Classifier& model, const Mat& x_q) {
  if (x_q.rows() != 1 || x_q.cols() != model.config().input_dim())
    throw DimensionError("trigger: query must be 1x" +
                         std::to_string(model.config().input_dim()) + ", got " +
                         std::to_string(x_q.rows()) + "x" +
                         std::to_string(x_q.cols()));
}

Mat patch_mask(const std::array<int, 3>& extents) {
  const int ch = extents[0], h = extents[1], w = extents[2];
  if (h < 3 || w < 3)
    throw ConfigError("patch trigger: input must be at least 3x3 spatially");
  Mat mask = Mat::Zero(1, Index(ch) * h * w);
  for (int c = 0; c < ch; ++c)
    for (int y = 0; y < 3; ++y)
      for (int x = 0; x < 3; ++x)
        mask(0, Index(c) * h * w + Index(y) * w + x) = Real(1);
  return mask;
}

}  // namespace

Trigger optimize_query_trigger(const Classifier& model, const Mat& x_q,
                               const TriggerHyper& hyper, std::uint64_t seed) {
  check_query_shape(model, x_q);
  return optimize_trigger_impl(
      model, x_q, [&](int) { return x_q; }, hyper, seed, std::nullopt,
      omega_for(x_q, hyper.omega_is_trigger_weight));
}

Trigger optimize_global_trigger(const Classifier& model, const Dataset& data,
                                const TriggerHyper& hyper, std::uint64_t seed) {
  data.validate();
  if (data.size() == 0) throw DataError("global trigger: empty dataset");
  if (data.dim() != model.config().input_dim())
    throw DimensionError("global trigger: dataset dim mismatch");

  // fixed evaluation slice for best-iterate tracking
  std::vector<Index> order(static_cast<std::size_t>(data.size()));
  std::iota(order.begin(), order.end(), Index(0));
  auto rng = make_rng(seed, {0x61B7ULL});
  std::shuffle(order.begin(), order.end(), rng);
  const Index n_eval = std::min<Index>(data.size(), 256);
  Mat eval_rows(n_eval, data.dim());
  for (Index i = 0; i < n_eval; ++i)
    eval_rows.row(i) = data.samples.row(order[size_t(i)]);

  auto batch_rng = std::make_shared<std::mt19937_64>(mix_seed(seed, {0xBA7CULL}));
  auto sampler = [&, batch_rng](int) {
    std::uniform_int_distribution<Index> pick{0, data.size() - 1};
    const Index b = std::min<Index>(hyper.global_batch, data.size());
    Mat batch(b, data.dim());
    for (Index i = 0; i < b; ++i) batch.row(i) = data.samples.row(pick(*batch_rng));
    return batch;
  };
  // omega for the global trigger follows the same rule applied to the slice
  return optimize_trigger_impl(model, eval_rows, sampler, hyper, seed,
                               std::nullopt,
                               omega_for(eval_rows, hyper.omega_is_trigger_weight));
}

Trigger make_fixed_patch_trigger(const std::array<int, 3>& input_extents) {
  Trigger trig;
  trig.mask = patch_mask(input_extents);
  trig.tau = *trig.mask;  // full intensity inside the patch
  trig.omega = Real(1);   // callers set omega per query at apply time
  trig.stats.final_norm =
      std::sqrt(trig.tau.template cast<double>().array().square().sum());
  return trig;
}

Trigger optimize_patch_trigger(const Classifier& model, const Mat& x_q,
                               const TriggerHyper& hyper, std::uint64_t seed) {
  check_query_shape(model, x_q);
  const Mat mask = patch_mask(model.config().input_extents);
  return optimize_trigger_impl(
      model, x_q, [&](int) { return x_q; }, hyper, seed, mask,
      omega_for(x_q, hyper.omega_is_trigger_weight));
}

void save_trigger(const Trigger& trig, const std::string& path) {
  Blob blob;
  blob.kind = "trigger";
  blob.meta["omega"] = trig.omega;
  blob.meta["stats"] = {{"iterations", trig.stats.iterations},
                        {"initial_objective", trig.stats.initial_objective},
                        {"final_objective", trig.stats.final_objective},
                        {"final_norm", trig.stats.final_norm}};
  if (trig.mask) {
    // run-length encoding, alternating zero/one runs, starting with zeros
    std::vector<Index> runs;
    Real cur = Real(0);
    Index len = 0;
    for (Index j = 0; j < trig.mask->cols(); ++j) {
      const Real v = (*trig.mask)(0, j) > Real(0.5) ? Real(1) : Real(0);
      if (v == cur) {
        ++len;
      } else {
        runs.push_back(len);
        cur = v;
        len = 1;
      }
    }
    runs.push_back(len);
    blob.meta["mask_runlength"] = runs;
  }
  blob.records.emplace_back("tau", trig.tau);
  write_blob(path, blob);
}

Trigger load_trigger(const std::string& path) {
  Blob blob = read_blob(path);
  if (blob.kind != "trigger")
    throw FormatError(path + ": field kind is \"" + blob.kind +
                      "\", expected trigger");
  if (blob.records.size() != 1 || blob.records[0].first != "tau")
    throw FormatError(path + ": expected a single tau record");
  Trigger trig;
  trig.tau = blob.records[0].second;
  try {
    trig.omega = blob.meta.at("omega").get<Real>();
    const auto& st = blob.meta.at("stats");
    trig.stats.iterations = st.at("iterations").get<int>();
    trig.stats.initial_objective = st.at("initial_objective").get<double>();
    trig.stats.final_objective = st.at("final_objective").get<double>();
    trig.stats.final_norm = st.at("final_norm").get<double>();
  } catch (const nlohmann::ordered_json::exception& e) {
    throw FormatError(path + ": invalid trigger header: " + e.what());
  }
  if (blob.meta.contains("mask_runlength")) {
    const auto runs = blob.meta["mask_runlength"].get<std::vector<Index>>();
    Mat mask = Mat::Zero(1, trig.tau.cols());
    Index at = 0;
    Real v = Real(0);
    for (Index run : runs) {
      if (at + run > mask.cols())
        throw FormatError(path + ": mask_runlength overruns trigger width");
      for (Index j = 0; j < run; ++j) mask(0, at + j) = v;
      at += run;
      v = Real(1) - v;
    }
    if (at != mask.cols())
      throw FormatError(path + ": mask_runlength covers " + std::to_string(at) +
                        " of " + std::to_string(mask.cols()) + " entries");
    trig.mask = std::move(mask);
  }
  return trig;
}

}  // namespace tmmnn
