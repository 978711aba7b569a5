#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dsm/rng.hpp"
#include "dsm/tape.hpp"
#include "dsm/text.hpp"

namespace dsm::loss {

// Mean binary cross entropy over served pairs, probabilities clamped to
// [1e-12, 1-1e-12]. Throws on empty input.
double logistic_loss(const std::vector<double>& y_hat, const std::vector<double>& y);

// Sum over positives of -log sigma(score) plus sum over negatives of
// -log sigma(-score); a sum, not a mean. Throws when both lists are empty.
double matching_loss(const std::vector<double>& positive_scores,
                     const std::vector<double>& negative_scores);

// Tape version over scalar score nodes; returns a scalar node.
ad::NodeId matching_loss_node(ad::Tape& tape, const std::vector<ad::NodeId>& positive_scores,
                              const std::vector<ad::NodeId>& negative_scores);

struct SynthesisPolicy {
  bool enabled = true;
};

// A served pair is (search, ad_search==search, ad_index); a synthesized pair
// crosses the query of `search` with an ad served in `ad_search`.
struct PairRef {
  std::size_t search = 0;
  std::size_t ad_search = 0;
  std::size_t ad_index = 0;
};

struct CohortPairs {
  std::vector<PairRef> positives;
  std::vector<PairRef> observed_negatives;
  std::vector<PairRef> synthesized_negatives;
  std::size_t searches = 0;  // m
};

// Positives are clicked served pairs. Observed negatives are unclicked served
// pairs whose (query, ad) identity does not also appear clicked in the
// cohort. When synthesis is enabled and observed negatives run short of
// positives, cross pairs are drawn uniformly without replacement from the
// eligible pool (query_i with an ad served in search j != i, excluding any
// identity served anywhere in the cohort), stopping as soon as negatives
// reach positives; the number of synthesized pairs always stays below
// m(m-1).
CohortPairs build_cohort_pairs(const std::vector<text::CohortRecord>& cohort,
                               const SynthesisPolicy& policy, Rng& rng);

enum class LossMode { plain, loss_normalized };

// Tracks exponential moving averages of P and Q (coefficient 0.99, seeded
// with the first observed values). The averages are constants with respect to
// differentiation; the training loop updates them between steps.
class LossNormalizer {
 public:
  explicit LossNormalizer(double coeff = 0.99) : coeff_(coeff) {}
  // Updates the averages and returns the multipliers (1/ema_P, 1/ema_Q).
  std::pair<double, double> step(double p, double q);
  bool seeded() const { return seeded_; }
  double ema_p() const { return ema_p_; }
  double ema_q() const { return ema_q_; }

 private:
  double coeff_;
  bool seeded_ = false;
  double ema_p_ = 0.0, ema_q_ = 0.0;
};

// plain: P + Q. loss_normalized: P/ema(P) + Q/ema(Q) using the multipliers
// from the normalizer for this step.
double combined_loss(double p, double q, LossMode mode, LossNormalizer* normalizer);

// Tiny matching-only model for the unbiasedness audit: each search holds one
// query id and its served (ad id, clicked) list; scores are dot products of
// learned per-id vectors.
struct AuditSearch {
  std::size_t query = 0;
  std::vector<std::pair<std::size_t, bool>> ads;  // (ad id, clicked)
};

struct AuditPopulation {
  std::vector<AuditSearch> searches;
  std::size_t n_queries = 0;
  std::size_t n_ads = 0;
  std::size_t dim = 2;
  std::vector<double> q_table;  // n_queries x dim
  std::vector<double> a_table;  // n_ads x dim

  std::size_t coords() const { return (n_queries + n_ads) * dim; }
  std::size_t total_pairs() const;
  // Deterministic default: 4 searches x 2 ads over 6 shared ads, 20 coords.
  static AuditPopulation default_population(std::uint64_t seed);
};

struct BiasAuditConfig {
  std::size_t cohort_size = 2;
  std::size_t n_draws = 20000;
  std::uint64_t seed = 1;
  bool with_synthesis = false;  // reporting mode only; the strict test keeps it off
};

struct BiasAuditReport {
  std::vector<double> mean_grad;   // Monte-Carlo mean of rescaled cohort gradients
  std::vector<double> full_grad;   // exact full-population gradient
  std::vector<double> std_error;   // per coordinate
  std::size_t coords_within_3se = 0;
  std::size_t n_coords = 0;
  bool with_synthesis = false;
  double fraction_within() const {
    return n_coords == 0 ? 0.0
                         : static_cast<double>(coords_within_3se) / static_cast<double>(n_coords);
  }
};

// Draws cohorts of cohort_size searches uniformly with replacement, computes
// each cohort's matching-loss gradient rescaled by population/cohort_size,
// and compares the Monte-Carlo mean against the exact full-population
// gradient coordinate by coordinate. Coordinates with zero standard error
// must agree within 1e-12. Requires n_draws >= 100 and at most 50 pairs.
BiasAuditReport estimate_sampling_bias(const AuditPopulation& population,
                                       const BiasAuditConfig& config);

}  // namespace dsm::loss
