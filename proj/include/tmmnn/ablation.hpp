#pragma once

#include "tmmnn/robustness.hpp"

namespace tmmnn {

// Ablation sweeps, all paired: every cell reuses the same query sets,
// perturbation draws and pipeline seeds, so differences are attributable to
// the ablated factor alone. Each row's ablation_key carries the factor value
// plus a provenance hash of the resolved config.
struct AblationConfig {
  std::vector<TriggerVariant> trigger_variants{TriggerVariant::optimized,
                                               TriggerVariant::fixed_patch,
                                               TriggerVariant::opt_patch};
  // Each set must contain the final layer; empty list -> {final},
  // {final, last hidden}, {final, first hidden}.
  std::vector<std::vector<int>> layer_sets;
  std::vector<int> epoch_list{1, 2, 5, 10};
  NoiseSpec noise;  // sweep used by the trigger and layer ablations
  SelfRetrievalParams bench;

  void validate(int num_layers) const;
};

SelfRetrievalReport run_trigger_ablation(const Workbench& wb,
                                         const AblationConfig& config);
SelfRetrievalReport run_layer_ablation(const Workbench& wb,
                                       const AblationConfig& config);
// Clean-query self-retrieval per epoch count; clean-accuracy drops land in
// report.extras keyed by epoch count.
SelfRetrievalReport run_epoch_ablation(const Workbench& wb,
                                       const AblationConfig& config);

std::vector<std::vector<int>> default_layer_sets(const Classifier& model);
std::string layer_set_name(const std::vector<int>& layers, int final_layer);

}  // namespace tmmnn
