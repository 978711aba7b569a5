#include "dsm/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace dsm::loss {

namespace {

double log_sigmoid(double x) {
  if (x >= 0.0) return -std::log1p(std::exp(-x));
  return x - std::log1p(std::exp(x));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

std::string pair_identity(const text::CohortRecord& search, const text::AdImpression& ad) {
  std::string key = search.query_text;
  key.push_back('\x1f');
  key += ad.title;
  key.push_back('\x1f');
  key += ad.description;
  key.push_back('\x1f');
  key += ad.display_url;
  return key;
}

}  // namespace

double logistic_loss(const std::vector<double>& y_hat, const std::vector<double>& y) {
  if (y_hat.empty() || y_hat.size() != y.size()) {
    throw std::invalid_argument("logistic loss needs equally sized nonempty inputs");
  }
  constexpr double kLo = 1e-12, kHi = 1.0 - 1e-12;
  double acc = 0.0;
  for (std::size_t i = 0; i < y_hat.size(); ++i) {
    double p = std::clamp(y_hat[i], kLo, kHi);
    acc -= y[i] * std::log(p) + (1.0 - y[i]) * std::log(1.0 - p);
  }
  return acc / static_cast<double>(y_hat.size());
}

double matching_loss(const std::vector<double>& positive_scores,
                     const std::vector<double>& negative_scores) {
  if (positive_scores.empty() && negative_scores.empty()) {
    throw std::invalid_argument("matching loss needs at least one pair");
  }
  double acc = 0.0;
  for (double s : positive_scores) acc -= log_sigmoid(s);
  for (double s : negative_scores) acc -= log_sigmoid(-s);
  return acc;
}

ad::NodeId matching_loss_node(ad::Tape& tape, const std::vector<ad::NodeId>& positive_scores,
                              const std::vector<ad::NodeId>& negative_scores) {
  if (positive_scores.empty() && negative_scores.empty()) {
    throw std::invalid_argument("matching loss needs at least one pair");
  }
  std::vector<ad::NodeId> terms;
  terms.reserve(positive_scores.size() + negative_scores.size());
  for (ad::NodeId s : positive_scores) {
    terms.push_back(tape.scale(tape.log_sigmoid(s), -1.0));
  }
  for (ad::NodeId s : negative_scores) {
    terms.push_back(tape.scale(tape.log_sigmoid(tape.scale(s, -1.0)), -1.0));
  }
  return tape.sum(tape.stack_scalars(terms));
}

CohortPairs build_cohort_pairs(const std::vector<text::CohortRecord>& cohort,
                               const SynthesisPolicy& policy, Rng& rng) {
  if (cohort.empty()) throw std::invalid_argument("empty cohort");
  CohortPairs out;
  out.searches = cohort.size();

  std::unordered_set<std::string> served, clicked;
  for (const auto& search : cohort) {
    for (const auto& ad : search.ads) {
      std::string key = pair_identity(search, ad);
      served.insert(key);
      if (ad.clicked) clicked.insert(key);
    }
  }

  for (std::size_t s = 0; s < cohort.size(); ++s) {
    for (std::size_t k = 0; k < cohort[s].ads.size(); ++k) {
      const auto& ad = cohort[s].ads[k];
      if (ad.clicked) {
        out.positives.push_back({s, s, k});
      } else if (!clicked.count(pair_identity(cohort[s], ad))) {
        // An unclicked impression whose identity was clicked elsewhere in the
        // cohort would contradict the positive set; it is dropped.
        out.observed_negatives.push_back({s, s, k});
      }
    }
  }

  const std::size_t m = cohort.size();
  if (!policy.enabled || m < 2 ||
      out.observed_negatives.size() >= out.positives.size()) {
    return out;
  }

  // Eligible cross pairs: query of search i against an ad served in search
  // j != i, excluding identities served anywhere in the cohort.
  std::vector<PairRef> pool;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      if (i == j) continue;
      for (std::size_t k = 0; k < cohort[j].ads.size(); ++k) {
        if (!served.count(pair_identity(cohort[i], cohort[j].ads[k]))) {
          pool.push_back({i, j, k});
        }
      }
    }
  }

  const std::size_t need = out.positives.size() - out.observed_negatives.size();
  const std::size_t cap = m * (m - 1) - 1;  // keeps the count strictly below m(m-1)
  const std::size_t target = std::min({need, pool.size(), cap});
  // Partial Fisher-Yates: draw `target` entries uniformly without replacement.
  for (std::size_t d = 0; d < target; ++d) {
    std::size_t pick = d + static_cast<std::size_t>(rng.uniform_int(pool.size() - d));
    std::swap(pool[d], pool[pick]);
    out.synthesized_negatives.push_back(pool[d]);
  }
  return out;
}

std::pair<double, double> LossNormalizer::step(double p, double q) {
  if (!seeded_) {
    ema_p_ = p;
    ema_q_ = q;
    seeded_ = true;
  } else {
    ema_p_ = coeff_ * ema_p_ + (1.0 - coeff_) * p;
    ema_q_ = coeff_ * ema_q_ + (1.0 - coeff_) * q;
  }
  double inv_p = ema_p_ != 0.0 ? 1.0 / ema_p_ : 0.0;
  double inv_q = ema_q_ != 0.0 ? 1.0 / ema_q_ : 0.0;
  return {inv_p, inv_q};
}

double combined_loss(double p, double q, LossMode mode, LossNormalizer* normalizer) {
  if (mode == LossMode::plain) return p + q;
  if (!normalizer) throw std::invalid_argument("loss_normalized mode needs a normalizer");
  auto [ip, iq] = normalizer->step(p, q);
  return p * ip + q * iq;
}

std::size_t AuditPopulation::total_pairs() const {
  std::size_t n = 0;
  for (const auto& s : searches) n += s.ads.size();
  return n;
}

AuditPopulation AuditPopulation::default_population(std::uint64_t seed) {
  AuditPopulation pop;
  pop.n_queries = 4;
  pop.n_ads = 6;
  pop.dim = 2;
  pop.searches = {
      {0, {{0, true}, {1, false}}},
      {1, {{2, true}, {3, false}}},
      {2, {{4, true}, {0, false}}},
      {3, {{5, false}, {1, true}}},
  };
  Rng rng(mix_seed(seed, 0xa0d17ULL));
  pop.q_table.resize(pop.n_queries * pop.dim);
  pop.a_table.resize(pop.n_ads * pop.dim);
  for (double& v : pop.q_table) v = rng.truncated_normal(0.5);
  for (double& v : pop.a_table) v = rng.truncated_normal(0.5);
  return pop;
}

namespace {

// Accumulates the matching-loss gradient of one (query, ad, label) pair into
// the flat [q_table | a_table] gradient buffer. Closed form:
// d(-log sigma(s))/ds = sigma(s) - 1 for positives, sigma(s) for negatives.
void accumulate_pair_grad(const AuditPopulation& pop, std::size_t query, std::size_t ad,
                          bool positive, std::vector<double>& grad) {
  const std::size_t d = pop.dim;
  const double* qv = &pop.q_table[query * d];
  const double* av = &pop.a_table[ad * d];
  double score = 0.0;
  for (std::size_t c = 0; c < d; ++c) score += qv[c] * av[c];
  double ds = positive ? sigmoid(score) - 1.0 : sigmoid(score);
  for (std::size_t c = 0; c < d; ++c) {
    grad[query * d + c] += ds * av[c];
    grad[(pop.n_queries + ad) * d + c] += ds * qv[c];
  }
}

void accumulate_search_grad(const AuditPopulation& pop, const AuditSearch& s,
                            std::vector<double>& grad) {
  for (const auto& [ad, clicked] : s.ads) {
    accumulate_pair_grad(pop, s.query, ad, clicked, grad);
  }
}

// Mirror of the cohort synthesis rule for the tiny audit model, with (query
// id, ad id) standing in for text identity.
void accumulate_cohort_with_synthesis(const AuditPopulation& pop,
                                      const std::vector<std::size_t>& cohort, Rng& rng,
                                      std::vector<double>& grad) {
  std::size_t positives = 0, observed = 0;
  std::unordered_set<std::uint64_t> served;
  auto key = [&](std::size_t q, std::size_t a) {
    return static_cast<std::uint64_t>(q) * (pop.n_ads + 1) + a;
  };
  for (std::size_t idx : cohort) {
    const auto& s = pop.searches[idx];
    for (const auto& [ad, clicked] : s.ads) {
      served.insert(key(s.query, ad));
      (clicked ? positives : observed) += 1;
      accumulate_pair_grad(pop, s.query, ad, clicked, grad);
    }
  }
  if (observed >= positives || cohort.size() < 2) return;
  std::vector<std::pair<std::size_t, std::size_t>> pool;
  for (std::size_t i = 0; i < cohort.size(); ++i) {
    for (std::size_t j = 0; j < cohort.size(); ++j) {
      if (i == j) continue;
      for (const auto& [ad, clicked] : pop.searches[cohort[j]].ads) {
        (void)clicked;
        if (!served.count(key(pop.searches[cohort[i]].query, ad))) {
          pool.emplace_back(pop.searches[cohort[i]].query, ad);
        }
      }
    }
  }
  const std::size_t m = cohort.size();
  std::size_t target = std::min({positives - observed, pool.size(), m * (m - 1) - 1});
  for (std::size_t d = 0; d < target; ++d) {
    std::size_t pick = d + static_cast<std::size_t>(rng.uniform_int(pool.size() - d));
    std::swap(pool[d], pool[pick]);
    accumulate_pair_grad(pop, pool[d].first, pool[d].second, false, grad);
  }
}

}  // namespace

BiasAuditReport estimate_sampling_bias(const AuditPopulation& population,
                                       const BiasAuditConfig& config) {
  if (config.n_draws < 100) {
    throw std::invalid_argument("need at least 100 draws for meaningful standard errors");
  }
  if (population.total_pairs() > 50) {
    throw std::invalid_argument("population too large to enumerate exactly (max 50 pairs)");
  }
  if (population.searches.empty() || config.cohort_size < 1) {
    throw std::invalid_argument("population and cohort size must be nonempty");
  }

  const std::size_t coords = population.coords();
  BiasAuditReport report;
  report.n_coords = coords;
  report.with_synthesis = config.with_synthesis;
  report.full_grad.assign(coords, 0.0);
  for (const auto& s : population.searches) {
    accumulate_search_grad(population, s, report.full_grad);
  }

  const double rescale = static_cast<double>(population.searches.size()) /
                         static_cast<double>(config.cohort_size);
  std::vector<double> sum(coords, 0.0), sum_sq(coords, 0.0), g(coords, 0.0);
  Rng rng(mix_seed(config.seed, 0x5a3bULL));
  std::vector<std::size_t> cohort(config.cohort_size);
  for (std::size_t draw = 0; draw < config.n_draws; ++draw) {
    for (auto& idx : cohort) {
      idx = static_cast<std::size_t>(rng.uniform_int(population.searches.size()));
    }
    std::fill(g.begin(), g.end(), 0.0);
    if (config.with_synthesis) {
      accumulate_cohort_with_synthesis(population, cohort, rng, g);
    } else {
      for (std::size_t idx : cohort) {
        accumulate_search_grad(population, population.searches[idx], g);
      }
    }
    for (std::size_t c = 0; c < coords; ++c) {
      double v = g[c] * rescale;
      sum[c] += v;
      sum_sq[c] += v * v;
    }
  }

  const double nd = static_cast<double>(config.n_draws);
  report.mean_grad.resize(coords);
  report.std_error.resize(coords);
  for (std::size_t c = 0; c < coords; ++c) {
    double mean = sum[c] / nd;
    double var = std::max(0.0, sum_sq[c] / nd - mean * mean);
    double se = std::sqrt(var / nd);
    report.mean_grad[c] = mean;
    report.std_error[c] = se;
    double diff = std::fabs(mean - report.full_grad[c]);
    bool ok = se == 0.0 ? diff <= 1e-12 : diff <= 3.0 * se;
    if (ok) ++report.coords_within_3se;
  }
  return report;
}

}  // namespace dsm::loss
