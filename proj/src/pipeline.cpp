#include "tmmnn/pipeline.hpp"

namespace tmmnn {

const char* to_string(TriggerVariant v) {
  switch (v) {
    case TriggerVariant::optimized: return "optimized";
    case TriggerVariant::fixed_patch: return "fixed_patch";
    case TriggerVariant::opt_patch: return "opt_patch";
  }
  return "?";
}

TriggerVariant trigger_variant_from_string(const std::string& s) {
  if (s == "optimized") return TriggerVariant::optimized;
  if (s == "fixed_patch") return TriggerVariant::fixed_patch;
  if (s == "opt_patch") return TriggerVariant::opt_patch;
  throw ConfigError("unknown trigger variant \"" + s + "\"");
}

Workbench Workbench::build(const PipelineConfig& cfg) {
  Workbench wb;
  wb.cfg = cfg;
  wb.data = generate_synthetic(cfg.data, mix_seed(cfg.seed, {0xDA7AULL}));

  ModelConfig mc;
  mc.input_extents = {1, cfg.data.side, cfg.data.side};
  mc.hidden_widths = cfg.hidden_widths;
  mc.num_classes = cfg.data.num_classes;
  mc.normalize_input = cfg.normalize_input;
  mc.seed = mix_seed(cfg.seed, {0x30DEULL});
  wb.model = init_model(mc);
  if (mc.normalize_input) {
    const auto [mu, sigma] = pixel_stats(wb.data.train);
    wb.model.set_input_stats(mu, sigma);
  }
  train_classifier(wb.model, wb.data.train, cfg.pretrain_epochs, cfg.pretrain_lr,
                   cfg.pretrain_batch, mix_seed(cfg.seed, {0x79A1ULL}));

  const int fisher_n =
      std::min<int>(cfg.finetune.fisher_samples, int(wb.data.train.size()));
  wb.fisher = estimate_fisher(wb.model, wb.data.train, fisher_n,
                              mix_seed(cfg.seed, {0xF15EULL}));
  wb.train_features = wb.model.penultimate_features(wb.data.train.samples);
  return wb;
}

QueryRun run_tmm_query(const Workbench& wb, const Mat& x_q,
                       std::optional<int> label, std::uint64_t seed,
                       const QueryPipelineOptions& opts) {
  QueryRun run;
  switch (opts.variant) {
    case TriggerVariant::optimized:
      run.trig = optimize_query_trigger(wb.model, x_q, wb.cfg.trigger, seed);
      break;
    case TriggerVariant::fixed_patch:
      run.trig = make_fixed_patch_trigger(wb.model.config().input_extents);
      run.trig.omega = omega_for(x_q, wb.cfg.trigger.omega_is_trigger_weight);
      break;
    case TriggerVariant::opt_patch:
      run.trig = optimize_patch_trigger(wb.model, x_q, wb.cfg.trigger, seed);
      break;
  }

  FinetuneConfig fcfg = wb.cfg.finetune;
  fcfg.seed = mix_seed(seed, {0xF7F7ULL});
  if (!opts.trainable_layers.empty()) fcfg.trainable_layers = opts.trainable_layers;
  if (opts.epochs > 0) fcfg.epochs = opts.epochs;

  RetrievalQuery query;
  query.x = x_q;
  query.label = label;
  query.source = label ? "train" : "test";
  run.tmm = finetune_tmm(wb.model, wb.data.train, query, run.trig, fcfg,
                         &wb.fisher);
  return run;
}

nlohmann::ordered_json pipeline_config_json(const PipelineConfig& cfg) {
  return nlohmann::ordered_json{
      {"data",
       {{"num_classes", cfg.data.num_classes},
        {"side", cfg.data.side},
        {"prototype_seed", cfg.data.prototype_seed},
        {"jitter", cfg.data.jitter},
        {"samples_per_class", cfg.data.samples_per_class}}},
      {"model",
       {{"hidden_widths", cfg.hidden_widths},
        {"normalize_input", cfg.normalize_input}}},
      {"pretrain",
       {{"epochs", cfg.pretrain_epochs},
        {"lr", cfg.pretrain_lr},
        {"batch_size", cfg.pretrain_batch}}},
      {"trigger",
       {{"max_iters", cfg.trigger.max_iters},
        {"lr", cfg.trigger.lr},
        {"init_scale", cfg.trigger.init_scale},
        {"early_stop_tol", cfg.trigger.early_stop_tol},
        {"penalty_weight", cfg.trigger.penalty_weight},
        {"global_batch", cfg.trigger.global_batch}}},
      {"finetune",
       {{"lr", cfg.finetune.lr},
        {"epochs", cfg.finetune.epochs},
        {"batch_size", cfg.finetune.batch_size},
        {"ewc_lambda", cfg.finetune.ewc_lambda},
        {"fisher_samples", cfg.finetune.fisher_samples}}},
      {"seed", cfg.seed}};
}

}  // namespace tmmnn
