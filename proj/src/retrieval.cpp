#include "tmmnn/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace tmmnn {

const char* to_string(RankMethod m) {
  switch (m) {
    case RankMethod::tmm: return "tmm";
    case RankMethod::cosine: return "cosine";
    case RankMethod::l2: return "l2";
  }
  return "?";
}

RankMethod rank_method_from_string(const std::string& s) {
  if (s == "tmm") return RankMethod::tmm;
  if (s == "cosine") return RankMethod::cosine;
  if (s == "l2") return RankMethod::l2;
  throw ConfigError("unknown ranking method \"" + s + "\"");
}

Ranking rank_from_scores(RankMethod method, const std::vector<double>& scores,
                         int k) {
  if (k < 1 || std::size_t(k) > scores.size())
    throw ContractError("rank: k=" + std::to_string(k) + " with " +
                        std::to_string(scores.size()) + " exemplars");
  std::vector<Index> order(scores.size());
  std::iota(order.begin(), order.end(), Index(0));
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
    if (scores[size_t(a)] != scores[size_t(b)])
      return scores[size_t(a)] > scores[size_t(b)];
    return a < b;  // ties to the lower exemplar index
  });
  Ranking r;
  r.method = method;
  r.k = k;
  r.indices.assign(order.begin(), order.begin() + k);
  for (Index i : r.indices) r.scores.push_back(scores[size_t(i)]);
  return r;
}

Ranking tmm_rank(const TMMModel& tmm, const Trigger& trig,
                 const Dataset& exemplars, int k) {
  const Mat triggered = apply_trigger(exemplars.samples, trig);
  const Mat proba = tmm.finetuned.predict_proba(triggered);
  const int dummy = tmm.finetuned.config().dummy_index();
  std::vector<double> scores(static_cast<std::size_t>(exemplars.size()));
  for (Index i = 0; i < exemplars.size(); ++i)
    scores[size_t(i)] = double(proba(i, dummy));
  return rank_from_scores(RankMethod::tmm, scores, k);
}

namespace {

std::vector<double> feature_scores(const Mat& feats, const Mat& q,
                                   RankMethod metric) {
  std::vector<double> scores(static_cast<std::size_t>(feats.rows()));
  const double qn = q.template cast<double>().norm();
  for (Index i = 0; i < feats.rows(); ++i) {
    if (metric == RankMethod::cosine) {
      const double fn = feats.row(i).template cast<double>().norm();
      if (qn == 0.0 || fn == 0.0) {
        scores[size_t(i)] = 0.0;  // zero-vector convention
      } else {
        const double dot = feats.row(i)
                               .cwiseProduct(q.row(0))
                               .template cast<double>()
                               .sum();
        scores[size_t(i)] = dot / (fn * qn);
      }
    } else {
      scores[size_t(i)] =
          -(feats.row(i) - q).template cast<double>().norm();
    }
  }
  return scores;
}

}  // namespace

Ranking feature_rank_cached(const Classifier& model, const Mat& exemplar_features,
                            const Mat& x_q, RankMethod metric, int k) {
  if (metric == RankMethod::tmm)
    throw ConfigError("feature_rank handles cosine/l2 only");
  const Mat qf = model.penultimate_features(x_q);
  return rank_from_scores(
      metric, feature_scores(exemplar_features, qf.row(0), metric), k);
}

Ranking feature_rank(const Classifier& model, const Dataset& exemplars,
                     const Mat& x_q, RankMethod metric, int k) {
  return feature_rank_cached(model,
                             model.penultimate_features(exemplars.samples),
                             x_q, metric, k);
}

}  // namespace tmmnn
