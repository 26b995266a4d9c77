#pragma once

#include <string>
#include <vector>

#include "tmmnn/finetune.hpp"

namespace tmmnn {

enum class RankMethod { tmm, cosine, l2 };

const char* to_string(RankMethod m);
RankMethod rank_method_from_string(const std::string& s);

// Top-k neighbours with aligned scores, non-increasing. Scores are
// P(c_neigh) for tmm, cosine similarity for cosine, and negated Euclidean
// distance for l2 so that descending order is uniform across methods.
struct Ranking {
  RankMethod method = RankMethod::tmm;
  int k = 0;
  std::vector<Index> indices;
  std::vector<double> scores;
};

// Scores every exemplar by P(c_neigh | theta', apply_trigger(x_i)), sorts
// descending with ties broken by the lower index.
Ranking tmm_rank(const TMMModel& tmm, const Trigger& trig,
                 const Dataset& exemplars, int k);

// Penultimate-feature baselines on the pretrained model. Zero-norm feature
// vectors get cosine similarity 0.
Ranking feature_rank(const Classifier& model, const Dataset& exemplars,
                     const Mat& x_q, RankMethod metric, int k);

// Variant over precomputed exemplar features (rows aligned with exemplars);
// the benchmark loops reuse one feature matrix across many queries.
Ranking feature_rank_cached(const Classifier& model, const Mat& exemplar_features,
                            const Mat& x_q, RankMethod metric, int k);

// Descending sort of (score, index) with the deterministic tie-break shared
// by every ranker.
Ranking rank_from_scores(RankMethod method, const std::vector<double>& scores,
                         int k);

}  // namespace tmmnn
