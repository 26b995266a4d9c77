#include "tmmnn/ablation.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>

namespace tmmnn {

namespace {

std::string short_hash(const nlohmann::ordered_json& j) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%08llx",
                static_cast<unsigned long long>(fnv1a64(j.dump()) & 0xffffffffULL));
  return buf;
}

nlohmann::ordered_json paired_snapshot(const Workbench& wb,
                                       const AblationConfig& cfg) {
  return nlohmann::ordered_json{
      {"pipeline", pipeline_config_json(wb.cfg)},
      {"noise_kind", to_string(cfg.noise.kind)},
      {"levels", cfg.noise.levels},
      {"n_queries", cfg.bench.n_queries},
      {"k", cfg.bench.k},
      {"seeds", cfg.bench.seeds}};
}

}  // namespace

void AblationConfig::validate(int num_layers) const {
  if (trigger_variants.empty())
    throw ConfigError("ablation: no trigger variants selected");
  if (epoch_list.empty()) throw ConfigError("ablation: epoch_list is empty");
  for (int e : epoch_list)
    if (e < 1) throw ConfigError("ablation: epoch counts must be >= 1");
  for (const auto& set : layer_sets) {
    if (std::find(set.begin(), set.end(), num_layers - 1) == set.end())
      throw ConfigError("ablation: every layer set must contain the final layer");
    for (int l : set)
      if (l < 0 || l >= num_layers)
        throw ConfigError("ablation: layer index out of range");
  }
}

std::vector<std::vector<int>> default_layer_sets(const Classifier& model) {
  const int fin = model.final_layer();
  std::vector<std::vector<int>> sets = {{fin}};
  if (fin >= 1) sets.push_back({fin, fin - 1});  // last hidden
  if (fin >= 2) sets.push_back({fin, 0});        // first hidden
  return sets;
}

std::string layer_set_name(const std::vector<int>& layers, int final_layer) {
  std::string name;
  std::vector<int> sorted = layers;
  std::sort(sorted.begin(), sorted.end());
  for (int l : sorted) {
    if (!name.empty()) name += "+";
    name += l == final_layer ? "final" : "h" + std::to_string(l);
  }
  return name;
}

SelfRetrievalReport run_trigger_ablation(const Workbench& wb,
                                         const AblationConfig& config) {
  config.validate(wb.model.num_layers());
  const auto snapshot = paired_snapshot(wb, config);
  const std::string hash = short_hash(snapshot);

  SelfRetrievalParams params = config.bench;
  params.methods = {RankMethod::tmm};  // the ablated factor is the trigger

  SelfRetrievalReport report;
  report.config_snapshot = snapshot;
  for (TriggerVariant v : config.trigger_variants) {
    QueryPipelineOptions opts;
    opts.variant = v;
    auto part = self_retrieval_experiment(
        wb, config.noise, params, opts,
        std::string("trigger:") + to_string(v) + "@" + hash);
    report.rows.insert(report.rows.end(), part.rows.begin(), part.rows.end());
  }
  return report;
}

SelfRetrievalReport run_layer_ablation(const Workbench& wb,
                                       const AblationConfig& config) {
  config.validate(wb.model.num_layers());
  const auto sets = config.layer_sets.empty() ? default_layer_sets(wb.model)
                                              : config.layer_sets;
  const auto snapshot = paired_snapshot(wb, config);
  const std::string hash = short_hash(snapshot);

  SelfRetrievalParams params = config.bench;
  params.methods = {RankMethod::tmm};

  SelfRetrievalReport report;
  report.config_snapshot = snapshot;
  for (const auto& set : sets) {
    QueryPipelineOptions opts;
    opts.trainable_layers = set;
    auto part = self_retrieval_experiment(
        wb, config.noise, params, opts,
        "layers:" + layer_set_name(set, wb.model.final_layer()) + "@" + hash);
    report.rows.insert(report.rows.end(), part.rows.begin(), part.rows.end());
  }
  return report;
}

SelfRetrievalReport run_epoch_ablation(const Workbench& wb,
                                       const AblationConfig& config) {
  config.validate(wb.model.num_layers());
  const auto snapshot = paired_snapshot(wb, config);
  const std::string hash = short_hash(snapshot);

  NoiseSpec clean;
  clean.kind = NoiseKind::brightness;
  clean.levels = {1.0};

  SelfRetrievalParams params = config.bench;
  params.methods = {RankMethod::tmm};

  SelfRetrievalReport report;
  report.config_snapshot = snapshot;
  const double base_acc = wb.model.accuracy(wb.data.test);
  for (int epochs : config.epoch_list) {
    QueryPipelineOptions opts;
    opts.epochs = epochs;
    const std::string key = "epochs:" + std::to_string(epochs) + "@" + hash;
    auto part = self_retrieval_experiment(wb, clean, params, opts, key);
    report.rows.insert(report.rows.end(), part.rows.begin(), part.rows.end());

    // clean-accuracy drop, averaged over a paired slice of the query set
    const auto queries = [&] {
      std::vector<Index> order(static_cast<std::size_t>(wb.data.train.size()));
      std::iota(order.begin(), order.end(), Index(0));
      auto rng = make_rng(params.seeds.front(), {0x9E1EULL});
      std::shuffle(order.begin(), order.end(), rng);
      order.resize(std::min<std::size_t>(8, size_t(params.n_queries)));
      return order;
    }();
    double drop = 0.0;
    for (Index qi : queries) {
      const auto run = run_tmm_query(
          wb, wb.data.train.samples.row(qi), wb.data.train.labels[size_t(qi)],
          mix_seed(params.seeds.front(), {std::uint64_t(qi), 0}), opts);
      drop += base_acc - run.tmm.finetuned.accuracy(wb.data.test);
    }
    report.extras["accuracy_drop"][std::to_string(epochs)] =
        drop / double(queries.size());
  }
  return report;
}

}  // namespace tmmnn
