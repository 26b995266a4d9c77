#include "tmmnn/robustness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <map>
#include <mutex>
#include <numeric>
#include <thread>

namespace tmmnn {

const char* to_string(NoiseKind k) {
  return k == NoiseKind::brightness ? "brightness" : "gaussian";
}

NoiseKind noise_kind_from_string(const std::string& s) {
  if (s == "brightness") return NoiseKind::brightness;
  if (s == "gaussian") return NoiseKind::gaussian;
  throw ConfigError("unknown noise kind \"" + s + "\"");
}

void NoiseSpec::validate() const {
  if (levels.empty()) throw ConfigError("noise: levels must be non-empty");
  for (double l : levels) {
    if (kind == NoiseKind::brightness && (l <= 0.1 || l > 1.0))
      throw ConfigError("noise: brightness level " + std::to_string(l) +
                        " outside (0.1, 1]");
    if (kind == NoiseKind::gaussian && l < 0.0)
      throw ConfigError("noise: gaussian level must be >= 0");
  }
}

Mat perturb_brightness(const Mat& x, Real t_b) {
  if (!(t_b > Real(0.1)) || t_b > Real(1))
    throw ContractError("perturb_brightness: t_b outside (0.1, 1]");
  return x * t_b;
}

Mat perturb_gaussian(const Mat& x, Real eps, std::uint64_t seed) {
  if (eps < Real(0)) throw ContractError("perturb_gaussian: eps must be >= 0");
  if (eps == Real(0)) return x;
  auto rng = make_rng(seed, {0x6A55ULL});
  std::normal_distribution<double> gauss{0.0, 1.0};
  Mat n(x.rows(), x.cols());
  for (Index i = 0; i < n.size(); ++i) n.data()[i] = Real(gauss(rng));
  const double norm = n.template cast<double>().norm();
  Mat out = x + n * Real(double(eps) / norm);
  return out.cwiseMax(Real(0)).cwiseMin(Real(1));
}

namespace {

Mat apply_noise(const Mat& x, NoiseKind kind, double level, std::uint64_t seed) {
  if (kind == NoiseKind::brightness) return perturb_brightness(x, Real(level));
  return perturb_gaussian(x, Real(level), seed);
}

bool self_hit(const Dataset& exemplars, Index query_index, Index got) {
  if (got == query_index) return true;
  // pixel-identical duplicates count as success
  return exemplars.samples.row(got) == exemplars.samples.row(query_index);
}

std::vector<Index> sample_queries(const Dataset& data, int n,
                                  std::uint64_t seed) {
  if (Index(n) > data.size())
    throw ConfigError("bench: n_queries exceeds dataset size");
  std::vector<Index> order(static_cast<std::size_t>(data.size()));
  std::iota(order.begin(), order.end(), Index(0));
  auto rng = make_rng(seed, {0x9E1EULL});
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(static_cast<std::size_t>(n));
  return order;
}

void parallel_for(std::size_t count, int threads, const std::function<void(std::size_t)>& body) {
  int n = threads > 0 ? threads : int(std::thread::hardware_concurrency());
  n = std::max(1, std::min<int>(n, int(count)));
  if (n == 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  std::exception_ptr error;
  std::mutex error_mu;
  for (int t = 0; t < n; ++t)
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= count) return;
        try {
          body(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mu);
          if (!error) error = std::current_exception();
          return;
        }
      }
    });
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace

SelfRetrievalReport self_retrieval_experiment(const Workbench& wb,
                                              const NoiseSpec& noise,
                                              const SelfRetrievalParams& params,
                                              const QueryPipelineOptions& opts,
                                              const std::string& ablation_key) {
  noise.validate();
  if (params.methods.empty()) throw ConfigError("bench: no methods selected");
  if (params.n_queries < 1) throw ConfigError("bench: n_queries must be >= 1");
  if (params.seeds.empty()) throw ConfigError("bench: seeds must be non-empty");

  const Dataset& search = wb.data.train;
  const bool wants_tmm =
      std::find(params.methods.begin(), params.methods.end(), RankMethod::tmm) !=
      params.methods.end();

  struct Cell {
    std::size_t seed_idx, level_idx, query_idx;
  };
  std::vector<Cell> cells;
  std::vector<std::vector<Index>> queries_per_seed;
  for (std::size_t s = 0; s < params.seeds.size(); ++s) {
    queries_per_seed.push_back(
        sample_queries(search, params.n_queries, params.seeds[s]));
    for (std::size_t l = 0; l < noise.levels.size(); ++l)
      for (std::size_t q = 0; q < queries_per_seed[s].size(); ++q)
        cells.push_back({s, l, q});
  }

  // success per cell per method, filled independently of scheduling
  std::vector<std::map<RankMethod, bool>> outcomes(cells.size());

  parallel_for(cells.size(), params.threads, [&](std::size_t ci) {
    const Cell& cell = cells[ci];
    const std::uint64_t seed = params.seeds[cell.seed_idx];
    const double level = noise.levels[cell.level_idx];
    const Index qi = queries_per_seed[cell.seed_idx][cell.query_idx];
    const std::uint64_t cell_seed =
        mix_seed(seed, {std::uint64_t(qi), cell.level_idx});

    const Mat x_q = search.samples.row(qi);
    const Mat x_noisy =
        apply_noise(x_q, noise.kind, level, mix_seed(cell_seed, {0x401EULL}));

    auto& out = outcomes[ci];
    for (RankMethod m : params.methods) {
      if (m == RankMethod::tmm) continue;
      const Ranking r =
          feature_rank_cached(wb.model, wb.train_features, x_noisy, m, params.k);
      out[m] = self_hit(search, qi, r.indices[0]);
    }
    if (wants_tmm) {
      const QueryRun run = run_tmm_query(
          wb, x_noisy, search.labels[size_t(qi)], cell_seed, opts);
      const Ranking r = tmm_rank(run.tmm, run.trig, search, params.k);
      out[RankMethod::tmm] = self_hit(search, qi, r.indices[0]);
    }
  });

  // aggregate into keyed rows
  SelfRetrievalReport report;
  for (RankMethod m : params.methods) {
    for (std::size_t l = 0; l < noise.levels.size(); ++l) {
      for (std::size_t s = 0; s < params.seeds.size(); ++s) {
        int hits = 0, total = 0;
        for (std::size_t ci = 0; ci < cells.size(); ++ci) {
          if (cells[ci].seed_idx != s || cells[ci].level_idx != l) continue;
          ++total;
          if (outcomes[ci].at(m)) ++hits;
        }
        SelfRetrievalRow row;
        row.ablation_key = ablation_key;
        row.method = to_string(m);
        row.noise_kind = to_string(noise.kind);
        row.noise_level = noise.levels[l];
        row.seed = params.seeds[s];
        row.n_queries = total;
        row.k = params.k;
        row.retrieval_rate = total == 0 ? 0.0 : double(hits) / double(total);
        report.rows.push_back(std::move(row));
      }
    }
  }
  return report;
}

double margin_of(const Mat& logit_row, int dummy_index) {
  if (logit_row.rows() != 1 || logit_row.cols() < 2)
    throw DimensionError("margin_of: expects one row with >= 2 logits");
  if (dummy_index < 0 || Index(dummy_index) >= logit_row.cols())
    throw IndexError("margin_of: dummy index out of range");
  double best_other = -std::numeric_limits<double>::infinity();
  for (Index j = 0; j < logit_row.cols(); ++j)
    if (j != Index(dummy_index))
      best_other = std::max(best_other, double(logit_row(0, j)));
  return double(logit_row(0, dummy_index)) - best_other;
}

double estimate_lipschitz(const Classifier& model, const Mat& probe_set,
                          int n_pairs, std::uint64_t seed) {
  if (probe_set.rows() < 2)
    throw ContractError("estimate_lipschitz: need >= 2 probe points");
  if (n_pairs < 1) throw ContractError("estimate_lipschitz: n_pairs >= 1");

  auto rng = make_rng(seed, {0x11B5ULL});
  std::uniform_int_distribution<Index> pick{0, probe_set.rows() - 1};
  std::normal_distribution<double> gauss{0.0, 1.0};
  const Mat logits = model.logits(probe_set);

  double best = 0.0;
  for (int p = 0; p < n_pairs; ++p) {
    const Index i = pick(rng);
    const Index j = pick(rng);
    const double dx = (probe_set.row(i) - probe_set.row(j)).template cast<double>().norm();
    if (dx > 0.0) {
      const double dz = (logits.row(i) - logits.row(j)).template cast<double>().norm();
      best = std::max(best, dz / dx);
    }
    // local pair around probe i: catches steep directions the global pairs miss
    Mat delta(1, probe_set.cols());
    for (Index c = 0; c < delta.cols(); ++c) delta(0, c) = Real(gauss(rng));
    const double dn = delta.template cast<double>().norm();
    if (dn == 0.0) continue;
    delta *= Real(1e-2 / dn);
    const Mat moved = model.logits(Mat(probe_set.row(i) + delta.row(0)));
    const double dz =
        (moved.row(0) - logits.row(i)).template cast<double>().norm();
    best = std::max(best, dz / 1e-2);
  }
  return best;
}

double certified_radius(double gamma2, double lipschitz) {
  if (!(lipschitz > 0.0))
    throw ContractError("certified_radius: lipschitz estimate must be > 0");
  return std::max(gamma2, 0.0) / (2.0 * lipschitz);
}

double empirical_radius(const RetrieveFn& retrieve, const Mat& x_q, int k,
                        int m_directions, double eps_max, double tol,
                        std::uint64_t seed) {
  if (m_directions < 1) throw ContractError("empirical_radius: m >= 1");
  if (!(eps_max > 0.0)) throw ContractError("empirical_radius: eps_max > 0");
  if (!(tol > 0.0)) throw ContractError("empirical_radius: tol > 0");

  std::vector<Index> base = retrieve(x_q, k);
  std::sort(base.begin(), base.end());

  // fixed unit directions, rescaled per probe level
  auto rng = make_rng(seed, {0xD19EULL});
  std::normal_distribution<double> gauss{0.0, 1.0};
  std::vector<Mat> dirs;
  for (int m = 0; m < m_directions; ++m) {
    Mat d(1, x_q.cols());
    for (Index c = 0; c < d.cols(); ++c) d(0, c) = Real(gauss(rng));
    const double n = d.template cast<double>().norm();
    dirs.push_back(Mat(d / Real(n)));
  }

  auto passes = [&](double eps) {
    for (const Mat& d : dirs) {
      std::vector<Index> got = retrieve(Mat(x_q + d * Real(eps)), k);
      std::sort(got.begin(), got.end());
      if (got != base) return false;
    }
    return true;
  };

  if (passes(eps_max)) return eps_max;
  double lo = 0.0, hi = eps_max;
  while (hi - lo > tol) {
    const double mid = 0.5 * (lo + hi);
    if (passes(mid))
      lo = mid;
    else
      hi = mid;
  }
  return lo;
}

double ood_bound(double m_count, double delta, double sigma) {
  if (!(sigma > 0.0)) throw ContractError("ood_bound: sigma must be > 0");
  if (m_count < 1.0) throw ContractError("ood_bound: M must be >= 1");
  return m_count * std::exp(-(delta * delta) / (2.0 * sigma * sigma));
}

MarginDiagnostics margin_diagnostics(const Workbench& wb, Index query_index,
                                     const RadiusParams& params,
                                     std::uint64_t seed) {
  if (query_index < 0 || query_index >= wb.data.train.size())
    throw IndexError("margin_diagnostics: query index out of range");
  const Mat x_q = wb.data.train.samples.row(query_index);
  const int label = wb.data.train.labels[size_t(query_index)];
  const QueryRun run = run_tmm_query(wb, x_q, label, seed);

  MarginDiagnostics diag;
  diag.query_id = long(query_index);
  const Mat x_qt = apply_trigger(x_q, run.trig);
  diag.gamma2 = margin_of(run.tmm.finetuned.logits(x_qt),
                          wb.model.config().dummy_index());

  // probe set: training rows plus the triggered query, so the local pairs
  // sample the region the certificate talks about
  Mat probes(std::min<Index>(wb.data.train.size(), 256) + 1, x_q.cols());
  for (Index i = 0; i + 1 < probes.rows(); ++i)
    probes.row(i) = wb.data.train.samples.row(i);
  probes.row(probes.rows() - 1) = x_qt.row(0);
  diag.lipschitz_hat =
      estimate_lipschitz(run.tmm.finetuned, probes, params.lipschitz_pairs,
                         mix_seed(seed, {0x11B5ULL}));
  diag.samples = params.lipschitz_pairs;
  diag.certified_radius =
      diag.gamma2 > 0.0 && diag.lipschitz_hat > 0.0
          ? certified_radius(diag.gamma2, diag.lipschitz_hat)
          : 0.0;

  const Dataset& search = wb.data.train;
  RetrieveFn tmm_fn = [&](const Mat& q, int k) {
    const QueryRun r =
        run_tmm_query(wb, q, label, mix_seed(seed, {0x7117ULL}));
    return tmm_rank(r.tmm, r.trig, search, k).indices;
  };
  RetrieveFn cos_fn = [&](const Mat& q, int k) {
    return feature_rank_cached(wb.model, wb.train_features, q,
                               RankMethod::cosine, k)
        .indices;
  };
  RetrieveFn l2_fn = [&](const Mat& q, int k) {
    return feature_rank_cached(wb.model, wb.train_features, q, RankMethod::l2, k)
        .indices;
  };
  diag.empirical_radius_tmm =
      empirical_radius(tmm_fn, x_q, params.k, params.m_directions,
                       params.eps_max, params.tol, mix_seed(seed, {1}));
  diag.empirical_radius_cosine =
      empirical_radius(cos_fn, x_q, params.k, params.m_directions,
                       params.eps_max, params.tol, mix_seed(seed, {1}));
  diag.empirical_radius_l2 =
      empirical_radius(l2_fn, x_q, params.k, params.m_directions,
                       params.eps_max, params.tol, mix_seed(seed, {1}));
  return diag;
}

nlohmann::ordered_json to_json(const MarginDiagnostics& d) {
  return nlohmann::ordered_json{
      {"query_id", d.query_id},
      {"gamma2", d.gamma2},
      {"lipschitz_hat", d.lipschitz_hat},
      {"certified_radius", d.certified_radius},
      {"empirical_radius",
       {{"tmm", d.empirical_radius_tmm},
        {"cosine", d.empirical_radius_cosine},
        {"l2", d.empirical_radius_l2}}},
      {"samples", d.samples}};
}

OODReport ood_experiment(const Workbench& wb, Index query_index, int m_ood,
                         OodGenerator generator, std::uint64_t seed) {
  if (m_ood < 0) throw ContractError("ood_experiment: M must be >= 0");
  if (query_index < 0 || query_index >= wb.data.train.size())
    throw IndexError("ood_experiment: query index out of range");

  OODReport report;
  report.m = m_ood;
  const Mat x_q = wb.data.train.samples.row(query_index);
  const QueryRun run = run_tmm_query(wb, x_q, wb.data.train.labels[size_t(query_index)],
                                     mix_seed(seed, {0x00DULL}));
  const int dummy = wb.model.config().dummy_index();
  report.b_q = double(
      run.tmm.finetuned.predict_proba(apply_trigger(x_q, run.trig))(0, dummy));

  if (m_ood == 0) {
    report.success = true;  // nothing can outscore the query
    return report;
  }

  const Index d = x_q.cols();
  Mat ood(m_ood, d);
  auto rng = make_rng(seed, {0x00D2ULL});
  std::uniform_real_distribution<double> uni{0.0, 1.0};
  std::uniform_real_distribution<double> shift{-0.5, 0.5};
  std::uniform_int_distribution<Index> pick{0, wb.data.train.size() - 1};
  for (int i = 0; i < m_ood; ++i) {
    if (generator == OodGenerator::uniform) {
      for (Index j = 0; j < d; ++j) ood(i, j) = Real(uni(rng));
    } else {
      // harder OOD: a real sample pushed off-manifold by a random offset
      const Index base = pick(rng);
      for (Index j = 0; j < d; ++j)
        ood(i, j) = std::clamp(
            Real(double(wb.data.train.samples(base, j)) + shift(rng)), Real(0),
            Real(1));
    }
  }

  const Mat proba = run.tmm.finetuned.predict_proba(apply_trigger(ood, run.trig));
  double sum = 0.0, max_b = -1.0;
  for (int i = 0; i < m_ood; ++i) {
    const double b = double(proba(i, dummy));
    report.b_ood.push_back(b);
    sum += b;
    max_b = std::max(max_b, b);
  }
  report.mu_ood = sum / double(m_ood);
  double sq = 0.0;
  for (double b : report.b_ood) sq += (b - report.mu_ood) * (b - report.mu_ood);
  report.sigma = m_ood > 1 ? std::sqrt(sq / double(m_ood - 1)) : 0.0;
  report.delta = report.b_q - report.mu_ood;
  report.success = report.b_q > max_b;
  report.bound_applicable = report.delta > 0.0 && report.sigma > 0.0;
  report.bound = report.bound_applicable
                     ? ood_bound(double(m_ood), report.delta, report.sigma)
                     : 0.0;
  report.vacuous = report.bound_applicable && report.bound > 1.0;
  return report;
}

nlohmann::ordered_json to_json(const OODReport& r) {
  return nlohmann::ordered_json{{"b_q", r.b_q},
                                {"b_ood", r.b_ood},
                                {"mu_ood", r.mu_ood},
                                {"sigma", r.sigma},
                                {"delta", r.delta},
                                {"m", r.m},
                                {"bound", r.bound},
                                {"bound_applicable", r.bound_applicable},
                                {"vacuous", r.vacuous},
                                {"success", r.success}};
}

}  // namespace tmmnn
