#pragma once

#include <optional>
#include <string>

#include "tmmnn/trigger.hpp"

namespace tmmnn {

struct FinetuneConfig {
  Real lr = Real(0.001);
  int epochs = 1;
  int batch_size = 256;  // capped at dataset size
  Real ewc_lambda = Real(100);
  int fisher_samples = 1000;  // capped at dataset size
  // Weight on the two query terms in the optimization loss relative to the
  // batch terms. 1 reproduces the equal-weighted objective exactly.
  Real query_term_weight = Real(1);
  std::uint64_t seed = 0;
  // Layers updated during fine-tuning; empty means the final affine layer
  // only. Ablations add one hidden layer; the final layer is always present.
  std::vector<int> trainable_layers;

  void validate() const {
    if (epochs < 1) throw ConfigError("finetune: epochs must be >= 1");
    if (!(lr > Real(0))) throw ConfigError("finetune: lr must be > 0");
    if (ewc_lambda < Real(0)) throw ConfigError("finetune: ewc_lambda must be >= 0");
    if (batch_size < 1) throw ConfigError("finetune: batch_size must be >= 1");
    if (fisher_samples < 1)
      throw ConfigError("finetune: fisher_samples must be >= 1");
    if (!(query_term_weight > Real(0)))
      throw ConfigError("finetune: query_term_weight must be > 0");
  }
};

struct RetrievalQuery {
  Mat x;  // 1 x d in [0,1]
  std::optional<int> label;  // absent -> pseudo-label argmax f_theta(x)
  std::string source = "train";
};

struct TmmProvenance {
  long query_id = -1;
  Real omega = Real(1);
  TriggerStats trigger_stats;
};

// Backdoored model: theta' next to its frozen reference theta*. Every layer
// outside the trainable set is bitwise equal to the reference.
struct TMMModel {
  Classifier finetuned;
  Classifier reference;
  FisherDiag fisher;
  TmmProvenance provenance;
};

struct TmmLossTerms {
  double ce_query_trig = 0.0;   // CE(f(x_q^t), c_neigh)
  double ce_query_clean = 0.0;  // CE(f(x_q), y_q)
  double ce_batch_trig = 0.0;   // mean_i CE(f(x_i^t), y_i)
  double ce_batch_clean = 0.0;  // mean_i CE(f(x_i), y_i)
  double ewc = 0.0;
  double total = 0.0;
};

// (lambda/2) sum_i F_i (theta_i - theta*_i)^2 over all parameter blocks.
double ewc_penalty(const Classifier& model, const Classifier& reference,
                   const FisherDiag& fisher, Real lambda);

// Evaluates the four cross-entropy terms plus EWC for one batch without any
// tape; the fine-tuning loop builds the same quantity differentiably and the
// two are tested to agree.
TmmLossTerms tmm_batch_loss(const Classifier& model, const Mat& batch_x,
                            const std::vector<int>& batch_y,
                            const RetrievalQuery& query, const Trigger& trig,
                            const Classifier& reference,
                            const FisherDiag& fisher, Real lambda);

// One fine-tuning run: Adam over the trainable set, `epochs` passes over
// shuffled batches, query terms re-added to every batch loss. The Fisher
// diagonal is computed from the reference model unless supplied.
TMMModel finetune_tmm(const Classifier& model, const Dataset& data,
                      const RetrievalQuery& query, const Trigger& trig,
                      const FinetuneConfig& config,
                      const FisherDiag* fisher = nullptr);

void save_tmm_checkpoint(const TMMModel& tmm, const std::string& path);
// Returns theta' plus its provenance; theta* lives in the base checkpoint.
std::pair<Classifier, TmmProvenance> load_tmm_checkpoint(const std::string& path);

}  // namespace tmmnn
