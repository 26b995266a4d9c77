#pragma once

#include <functional>

#include <json.hpp>

#include "tmmnn/pipeline.hpp"

namespace tmmnn {

enum class NoiseKind { brightness, gaussian };

const char* to_string(NoiseKind k);
NoiseKind noise_kind_from_string(const std::string& s);

struct NoiseSpec {
  NoiseKind kind = NoiseKind::brightness;
  std::vector<double> levels{1.0, 0.8, 0.6, 0.4, 0.2};

  void validate() const;
};

// t_b * x; valid for t_b in (0.1, 1] so the output stays in [0,1].
Mat perturb_brightness(const Mat& x, Real t_b);

// x + eps * n/||n||_2 with standard normal n, clipped to [0,1]. The L2 norm
// of the perturbation equals eps exactly before clipping.
Mat perturb_gaussian(const Mat& x, Real eps, std::uint64_t seed);

// --- self-retrieval harness --------------------------------------------------

struct SelfRetrievalRow {
  std::string ablation_key;  // empty outside ablations
  std::string method;
  std::string noise_kind;
  double noise_level = 0.0;
  std::uint64_t seed = 0;
  int n_queries = 0;
  int k = 1;
  double retrieval_rate = 0.0;
};

struct SelfRetrievalReport {
  std::vector<SelfRetrievalRow> rows;
  nlohmann::ordered_json config_snapshot;
  nlohmann::ordered_json extras;  // side measurements (e.g. accuracy drops)
};

struct SelfRetrievalParams {
  std::vector<RankMethod> methods{RankMethod::tmm, RankMethod::cosine,
                                  RankMethod::l2};
  int n_queries = 50;
  int k = 1;
  std::vector<std::uint64_t> seeds{1};
  int threads = 0;  // 0 -> hardware concurrency
};

// For every sampled train query and noise level: perturb only the query
// side, re-run trigger optimization + fine-tuning on the perturbed query
// (TMM) or re-embed it (baselines), and test whether rank-1 recovers the
// query's own index (pixel-identical duplicates count as success).
SelfRetrievalReport self_retrieval_experiment(
    const Workbench& wb, const NoiseSpec& noise,
    const SelfRetrievalParams& params,
    const QueryPipelineOptions& opts = {},
    const std::string& ablation_key = "");

// --- margin / Lipschitz / radius diagnostics ----------------------------------

// Dummy-class logit minus the best competing logit; may be negative.
double margin_of(const Mat& logit_row, int dummy_index);

// Max sampled ratio ||logits(x)-logits(y)|| / ||x-y|| over pairs from the
// probe set plus local (x, x+delta) pairs. A lower bound on the true
// Lipschitz constant of the logit map.
double estimate_lipschitz(const Classifier& model, const Mat& probe_set,
                          int n_pairs, std::uint64_t seed);

// max(gamma2, 0) / (2 L). Requires L > 0.
double certified_radius(double gamma2, double lipschitz);

using RetrieveFn = std::function<std::vector<Index>(const Mat& query, int k)>;

// Bisection for the largest perturbation norm under which the retrieved
// top-k SET is unchanged along m fixed seeded directions (rescaled per
// level, which makes acceptance monotone in eps).
double empirical_radius(const RetrieveFn& retrieve, const Mat& x_q, int k,
                        int m_directions, double eps_max, double tol,
                        std::uint64_t seed);

// M * exp(-delta^2 / (2 sigma^2)); values above 1 are vacuous.
double ood_bound(double m_count, double delta, double sigma);

struct MarginDiagnostics {
  long query_id = -1;
  double gamma2 = 0.0;
  double lipschitz_hat = 0.0;
  double certified_radius = 0.0;
  double empirical_radius_tmm = 0.0;
  double empirical_radius_cosine = 0.0;
  double empirical_radius_l2 = 0.0;
  int samples = 0;  // probe pairs behind lipschitz_hat
};

struct RadiusParams {
  int m_directions = 8;
  double eps_max = 5.0;
  double tol = 0.01;
  int k = 1;
  int lipschitz_pairs = 200;
};

MarginDiagnostics margin_diagnostics(const Workbench& wb, Index query_index,
                                     const RadiusParams& params,
                                     std::uint64_t seed);

nlohmann::ordered_json to_json(const MarginDiagnostics& d);

// --- OOD self-retrieval --------------------------------------------------------

enum class OodGenerator { uniform, shifted_prototype };

struct OODReport {
  double b_q = 0.0;
  std::vector<double> b_ood;
  double mu_ood = 0.0;
  double sigma = 0.0;  // sample std of the OOD scores
  double delta = 0.0;  // b_q - mu_ood, recorded even if negative
  int m = 0;
  double bound = 0.0;
  bool bound_applicable = false;
  bool vacuous = false;
  bool success = true;  // b_q > max_i b_ood[i]
};

// Injects M generated OOD samples into the search side, runs the TMM
// pipeline on a clean train query and compares dummy-class confidences.
OODReport ood_experiment(const Workbench& wb, Index query_index, int m_ood,
                         OodGenerator generator, std::uint64_t seed);

nlohmann::ordered_json to_json(const OODReport& r);

}  // namespace tmmnn
