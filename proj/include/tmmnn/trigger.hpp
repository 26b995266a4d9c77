#pragma once

#include <optional>
#include <string>

#include "tmmnn/model.hpp"

namespace tmmnn {

struct TriggerStats {
  int iterations = 0;
  double initial_objective = 0.0;
  double final_objective = 0.0;
  double final_norm = 0.0;
};

// Input-shaped perturbation tau with blend intensity omega. Patch variants
// carry a binary mask that zeroes tau outside the patch.
struct Trigger {
  Mat tau;  // 1 x d
  Real omega = Real(1);
  std::optional<Mat> mask;  // 1 x d in {0,1}
  TriggerStats stats;

  Mat masked_tau() const {
    return mask ? Mat(tau.cwiseProduct(*mask)) : tau;
  }
};

struct TriggerHyper {
  int max_iters = 300;
  Real lr = Real(0.015);
  Real init_scale = Real(0.1);
  Real early_stop_tol = Real(1e-4);
  Real penalty_weight = Real(1);  // weight on 1/||tau||_F^2
  int global_batch = 64;          // minibatch size for the global variant
  // The blend x*omega + tau*(1-omega) weighs the image by omega. With the
  // default rule omega is the query's pixel std. Setting this flag reads the
  // std as the TRIGGER's intensity instead (omega = 1 - std), which keeps
  // the image side dominant.
  bool omega_is_trigger_weight = false;

  void validate() const {
    if (max_iters < 1) throw ConfigError("trigger: max_iters must be >= 1");
    if (!(lr > Real(0))) throw ConfigError("trigger: lr must be > 0");
    if (!(init_scale > Real(0)))
      throw ConfigError("trigger: init_scale must be > 0");
    if (global_batch < 1) throw ConfigError("trigger: global_batch must be >= 1");
  }
};

// Blend intensity rule: the pixel standard deviation of the query, clamped
// into [0.05, 1]. A constant image has std 0 and falls back to the floor
// (a warning goes to stderr). With trigger_weight set, the std is treated as
// the trigger's share and omega becomes 1 - std (same clamp).
Real omega_for(const Mat& x, bool trigger_weight = false);

// Algorithm-1 blending x*omega + tau*(1-omega), clamped to [0,1]. Accepts a
// batch; each row is blended with the same trigger.
Mat apply_trigger(const Mat& x, const Trigger& trig);

// Null-space quality of an additive trigger at inputs X:
// mse(logits(X), logits(X + tau)). This is the quantity the acceptance
// thresholds compare against random-trigger controls.
double nullspace_mse(const Classifier& model, const Mat& tau, const Mat& x);

// Query-local trigger: minimizes
//   mse(logits(x_q), logits(x_q + tau)) + penalty_weight / ||tau||_F^2
// with Adam from a small seeded uniform init, keeping the best iterate.
Trigger optimize_query_trigger(const Classifier& model, const Mat& x_q,
                               const TriggerHyper& hyper, std::uint64_t seed);

// Global variant: the mse term is averaged over minibatches of the training
// data; the tracked objective uses a fixed evaluation slice.
Trigger optimize_global_trigger(const Classifier& model, const Dataset& data,
                                const TriggerHyper& hyper, std::uint64_t seed);

// Ablation T1: constant full-intensity 3x3 patch in the top-left corner.
Trigger make_fixed_patch_trigger(const std::array<int, 3>& input_extents);

// Ablation T2: the query-local objective with updates confined to the 3x3
// top-left patch.
Trigger optimize_patch_trigger(const Classifier& model, const Mat& x_q,
                               const TriggerHyper& hyper, std::uint64_t seed);

void save_trigger(const Trigger& trig, const std::string& path);
Trigger load_trigger(const std::string& path);

}  // namespace tmmnn
