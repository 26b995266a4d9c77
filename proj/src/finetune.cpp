#include "tmmnn/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tmmnn/checkpoint.hpp"
#include "tmmnn/optim.hpp"

namespace tmmnn {

namespace {

void check_param_alignment(const Classifier& a, const Classifier& b,
                           const char* what) {
  if (a.num_layers() != b.num_layers())
    throw DimensionError(std::string(what) + ": layer count mismatch");
  for (int l = 0; l < a.num_layers(); ++l) {
    const auto& wa = a.weights()[size_t(l)];
    const auto& wb = b.weights()[size_t(l)];
    if (wa.rows() != wb.rows() || wa.cols() != wb.cols())
      throw DimensionError(std::string(what) + ": weight shape mismatch at layer " +
                           std::to_string(l));
  }
}

double ce_of_rows(const Classifier& model, const Mat& x,
                  const std::vector<int>& y) {
  const Mat p = softmax_rows(model.logits(x));
  double acc = 0.0;
  for (Index i = 0; i < x.rows(); ++i) {
    const double pi = std::max(double(p(i, y[size_t(i)])), 1e-300);
    acc += -std::log(pi);
  }
  return acc / double(x.rows());
}

int resolve_query_label(const RetrievalQuery& query, const Classifier& reference) {
  if (query.label) {
    if (*query.label < 0 || *query.label >= reference.config().num_classes)
      throw DataError("query label " + std::to_string(*query.label) +
                      " outside [0, C)");
    return *query.label;
  }
  Index arg = 0;
  reference.logits(query.x).row(0).maxCoeff(&arg);
  // the pseudo-label can only be a real class; the dummy logit is suppressed
  // after pretraining, but clamp defensively
  return std::min(int(arg), reference.config().num_classes - 1);
}

std::vector<int> effective_trainable(const FinetuneConfig& cfg,
                                     const Classifier& model) {
  std::vector<int> layers = cfg.trainable_layers;
  if (layers.empty()) layers = {model.final_layer()};
  if (std::find(layers.begin(), layers.end(), model.final_layer()) ==
      layers.end())
    throw ConfigError("finetune: trainable set must include the final layer");
  for (int l : layers)
    if (l < 0 || l >= model.num_layers())
      throw ConfigError("finetune: trainable layer " + std::to_string(l) +
                        " out of range");
  return layers;
}

}  // namespace

double ewc_penalty(const Classifier& model, const Classifier& reference,
                   const FisherDiag& fisher, Real lambda) {
  check_param_alignment(model, reference, "ewc");
  if (fisher.weights.size() != model.weights().size())
    throw DimensionError("ewc: fisher block count mismatch");
  double acc = 0.0;
  for (std::size_t l = 0; l < model.weights().size(); ++l) {
    const Mat dw = model.weights()[l] - reference.weights()[l];
    const Mat db = model.biases()[l] - reference.biases()[l];
    if (fisher.weights[l].rows() != dw.rows() ||
        fisher.weights[l].cols() != dw.cols())
      throw DimensionError("ewc: fisher shape mismatch at layer " +
                           std::to_string(l));
    acc += (fisher.weights[l].cwiseProduct(dw.cwiseProduct(dw)))
               .template cast<double>()
               .sum();
    acc += (fisher.biases[l].cwiseProduct(db.cwiseProduct(db)))
               .template cast<double>()
               .sum();
  }
  return 0.5 * double(lambda) * acc;
}

TmmLossTerms tmm_batch_loss(const Classifier& model, const Mat& batch_x,
                            const std::vector<int>& batch_y,
                            const RetrievalQuery& query, const Trigger& trig,
                            const Classifier& reference,
                            const FisherDiag& fisher, Real lambda) {
  if (batch_x.rows() == 0) throw DataError("tmm loss: empty batch");
  if (batch_x.rows() != Index(batch_y.size()))
    throw DimensionError("tmm loss: batch size mismatch");
  const int dummy = model.config().dummy_index();
  for (int y : batch_y)
    if (y == dummy)
      throw DataError("tmm loss: batch label equals dummy index");

  TmmLossTerms terms;
  const int y_q = resolve_query_label(query, reference);
  terms.ce_query_trig = ce_of_rows(model, apply_trigger(query.x, trig), {dummy});
  terms.ce_query_clean = ce_of_rows(model, query.x, {y_q});
  terms.ce_batch_trig = ce_of_rows(model, apply_trigger(batch_x, trig), batch_y);
  terms.ce_batch_clean = ce_of_rows(model, batch_x, batch_y);
  terms.ewc = ewc_penalty(model, reference, fisher, lambda);
  terms.total = terms.ce_query_trig + terms.ce_query_clean +
                terms.ce_batch_trig + terms.ce_batch_clean + terms.ewc;
  return terms;
}

TMMModel finetune_tmm(const Classifier& model, const Dataset& data,
                      const RetrievalQuery& query, const Trigger& trig,
                      const FinetuneConfig& config, const FisherDiag* fisher) {
  config.validate();
  data.validate();
  if (data.size() == 0) throw DataError("finetune: empty dataset");
  if (query.x.rows() != 1 || query.x.cols() != model.config().input_dim())
    throw DimensionError("finetune: query shape mismatch");

  const std::vector<int> trainable = effective_trainable(config, model);
  const int dummy = model.config().dummy_index();
  const int y_q = resolve_query_label(query, model);

  TMMModel out;
  out.reference = model;
  out.fisher = fisher
                   ? *fisher
                   : estimate_fisher(model, data,
                                     std::min<int>(config.fisher_samples,
                                                   int(data.size())),
                                     config.seed);
  out.provenance.omega = trig.omega;
  out.provenance.trigger_stats = trig.stats;

  TapeModel tm = lift(model, trainable);
  auto params = tm.trainable_params();
  auto adam = AdamState::for_params(params, config.lr);

  // constants reused across batches
  const Mat xq_clean = query.x;
  const Mat xq_trig = apply_trigger(query.x, trig);
  std::vector<TensorPtr> ref_leaves, fisher_leaves;
  std::vector<TensorPtr> trainable_leaves;
  for (int l : trainable) {
    trainable_leaves.push_back(tm.weights[size_t(l)]);
    trainable_leaves.push_back(tm.biases[size_t(l)]);
    ref_leaves.push_back(make_leaf<Real>(model.weights()[size_t(l)]));
    ref_leaves.push_back(make_leaf<Real>(model.biases()[size_t(l)]));
    fisher_leaves.push_back(make_leaf<Real>(out.fisher.weights[size_t(l)]));
    fisher_leaves.push_back(make_leaf<Real>(out.fisher.biases[size_t(l)]));
  }

  const Index batch = std::min<Index>(config.batch_size, data.size());
  // The batch terms suppress the search candidates; the query's own row is
  // excluded when it is a train sample, otherwise its full-weight dummy term
  // and its 1/B label term fight over the same input.
  std::vector<Index> order;
  order.reserve(static_cast<std::size_t>(data.size()));
  for (Index i = 0; i < data.size(); ++i)
    if (!(data.samples.row(i) == query.x.row(0))) order.push_back(i);
  if (order.empty()) throw DataError("finetune: no batch rows besides the query");
  auto rng = make_rng(config.seed, {0xF17EULL});

  for (int e = 0; e < config.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    const Index n_rows = Index(order.size());
    for (Index start = 0; start < n_rows; start += batch) {
      const Index b = std::min(batch, n_rows - start);
      // One fused forward: [x_q^t; x_q; batch^t; batch] with per-row loss
      // weights realizing Eq. 3's term structure.
      Mat rows(2 + 2 * b, data.dim());
      std::vector<int> targets(static_cast<std::size_t>(2 + 2 * b));
      std::vector<Real> weights(static_cast<std::size_t>(2 + 2 * b));
      rows.row(0) = xq_trig.row(0);
      rows.row(1) = xq_clean.row(0);
      targets[0] = dummy;
      targets[1] = y_q;
      weights[0] = weights[1] = config.query_term_weight;
      Mat xb(b, data.dim());
      for (Index i = 0; i < b; ++i) {
        xb.row(i) = data.samples.row(order[size_t(start + i)]);
        targets[size_t(2 + i)] = data.labels[size_t(order[size_t(start + i)])];
        targets[size_t(2 + b + i)] = targets[size_t(2 + i)];
        weights[size_t(2 + i)] = Real(1) / Real(b);
        weights[size_t(2 + b + i)] = Real(1) / Real(b);
      }
      rows.middleRows(2, b) = apply_trigger(xb, trig);
      rows.middleRows(2 + b, b) = xb;

      Tape tape;
      for (auto& p : params) p->zero_grad();
      auto loss = softmax_cross_entropy_rows(
          tape, tm.logits_on(tape, make_leaf<Real>(rows)), targets, weights);
      if (config.ewc_lambda > Real(0)) {
        TensorPtr penalty;
        for (std::size_t i = 0; i < trainable_leaves.size(); ++i) {
          auto d = sub(tape, trainable_leaves[i], ref_leaves[i]);
          auto term = sum(tape, mul(tape, fisher_leaves[i], mul(tape, d, d)));
          penalty = penalty ? add(tape, penalty, term) : term;
        }
        loss = add(tape, loss, scale(tape, penalty, config.ewc_lambda / Real(2)));
      }
      tape.backward(loss);
      adam_step(params, adam);
    }
  }

  out.finetuned = model;
  tm.store_back(out.finetuned);
  return out;
}

void save_tmm_checkpoint(const TMMModel& tmm, const std::string& path) {
  Blob blob;
  blob.kind = "tmm";
  blob.meta["config"] = model_config_json(tmm.finetuned.config());
  blob.meta["provenance"] = {
      {"query_id", tmm.provenance.query_id},
      {"omega", tmm.provenance.omega},
      {"trigger_stats",
       {{"iterations", tmm.provenance.trigger_stats.iterations},
        {"initial_objective", tmm.provenance.trigger_stats.initial_objective},
        {"final_objective", tmm.provenance.trigger_stats.final_objective},
        {"final_norm", tmm.provenance.trigger_stats.final_norm}}}};
  for (int l = 0; l < tmm.finetuned.num_layers(); ++l) {
    blob.records.emplace_back("w" + std::to_string(l),
                              tmm.finetuned.weights()[size_t(l)]);
    blob.records.emplace_back("b" + std::to_string(l),
                              tmm.finetuned.biases()[size_t(l)]);
  }
  write_blob(path, blob);
}

std::pair<Classifier, TmmProvenance> load_tmm_checkpoint(const std::string& path) {
  Blob blob = read_blob(path);
  if (blob.kind != "tmm")
    throw FormatError(path + ": field kind is \"" + blob.kind +
                      "\", expected tmm");
  Classifier model = load_checkpoint(path);
  TmmProvenance prov;
  try {
    const auto& p = blob.meta.at("provenance");
    prov.query_id = p.at("query_id").get<long>();
    prov.omega = p.at("omega").get<Real>();
    const auto& st = p.at("trigger_stats");
    prov.trigger_stats.iterations = st.at("iterations").get<int>();
    prov.trigger_stats.initial_objective =
        st.at("initial_objective").get<double>();
    prov.trigger_stats.final_objective = st.at("final_objective").get<double>();
    prov.trigger_stats.final_norm = st.at("final_norm").get<double>();
  } catch (const nlohmann::ordered_json::exception& e) {
    throw FormatError(path + ": invalid provenance header: " + e.what());
  }
  return {std::move(model), prov};
}

}  // namespace tmmnn
