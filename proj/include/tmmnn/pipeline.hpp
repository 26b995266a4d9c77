#pragma once

#include <optional>

#include <json.hpp>

#include "tmmnn/retrieval.hpp"

namespace tmmnn {

enum class TriggerVariant { optimized, fixed_patch, opt_patch };

const char* to_string(TriggerVariant v);
TriggerVariant trigger_variant_from_string(const std::string& s);

// Everything needed to reproduce a desk-scale run. Sub-stage seeds are all
// derived from `seed`, so one value pins data, init, pretraining and every
// per-query fine-tune.
struct PipelineConfig {
  SyntheticSpec data;
  std::vector<int> hidden_widths{128, 64};
  bool normalize_input = false;
  int pretrain_epochs = 30;
  Real pretrain_lr = Real(1e-3);
  int pretrain_batch = 64;
  TriggerHyper trigger;
  FinetuneConfig finetune;
  std::uint64_t seed = 1;
};

// Built once per benchmark: dataset, pretrained classifier, Fisher diagonal,
// and the cached penultimate features the baselines rank against. Immutable
// after build; shareable across worker threads.
struct Workbench {
  PipelineConfig cfg;
  SplitDataset data;
  Classifier model;
  FisherDiag fisher;
  Mat train_features;

  static Workbench build(const PipelineConfig& cfg);
};

struct QueryPipelineOptions {
  TriggerVariant variant = TriggerVariant::optimized;
  std::vector<int> trainable_layers;  // empty -> final layer only
  int epochs = 0;                     // 0 -> config default
};

struct QueryRun {
  Trigger trig;
  TMMModel tmm;
};

// The full per-query TMM path: trigger construction/optimization for x_q,
// then backdoor fine-tuning. This is re-run from scratch whenever the query
// side is perturbed; the method never sees anything but the query it is
// given.
QueryRun run_tmm_query(const Workbench& wb, const Mat& x_q,
                       std::optional<int> label, std::uint64_t seed,
                       const QueryPipelineOptions& opts = {});

// Canonical JSON echo of a resolved pipeline config; embedded in report
// artifacts and hashed into ablation keys.
nlohmann::ordered_json pipeline_config_json(const PipelineConfig& cfg);

}  // namespace tmmnn
