#include <cmath>
#include <set>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "dsm/losses.hpp"
#include "dsm/rng.hpp"

using namespace dsm;
using namespace dsm::loss;

namespace {

text::CohortRecord search(const std::string& id, const std::string& query,
                          std::vector<std::pair<std::string, bool>> ads) {
  text::CohortRecord rec;
  rec.search_id = id;
  rec.query_text = query;
  int pos = 1;
  for (auto& [title, clicked] : ads) {
    rec.ads.push_back({pos++, title, "d", "u.com", clicked});
  }
  return rec;
}

}  // namespace

TEST_CASE("logistic loss frozen values") {
  CHECK(logistic_loss({0.5}, {1}) == doctest::Approx(0.6931471805599453).epsilon(1e-12));
  CHECK(logistic_loss({0.9, 0.2}, {1, 0}) == doctest::Approx(0.164252033486018).epsilon(1e-9));
  CHECK(logistic_loss({1e-12, 1.0 - 1e-12}, {0, 1}) == doctest::Approx(0.0).epsilon(1e-9));
  // clamping keeps exact 0/1 predictions finite
  CHECK(std::isfinite(logistic_loss({0.0, 1.0}, {1, 0})));
  CHECK_THROWS_AS(logistic_loss({}, {}), std::invalid_argument);
}

TEST_CASE("matching loss frozen values and monotonicity") {
  CHECK(matching_loss({0.0}, {}) == doctest::Approx(0.6931471805599453).epsilon(1e-12));
  CHECK(matching_loss({40.0}, {}) == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(matching_loss({1.0}, {-0.5}) == doctest::Approx(0.7873386716983295).epsilon(1e-6));
  CHECK_THROWS_AS(matching_loss({}, {}), std::invalid_argument);

  // decreasing in a positive score, increasing in a negative score
  double base = matching_loss({0.3, 1.1}, {-0.2, 0.4});
  CHECK(matching_loss({0.3 + 1e-3, 1.1}, {-0.2, 0.4}) < base);
  CHECK(matching_loss({0.3, 1.1}, {-0.2 + 1e-3, 0.4}) > base);

  // sum, not mean: doubling the pairs doubles the loss
  double one = matching_loss({0.7}, {0.1});
  CHECK(matching_loss({0.7, 0.7}, {0.1, 0.1}) == doctest::Approx(2.0 * one).epsilon(1e-12));
}

TEST_CASE("matching loss node agrees with the scalar version") {
  ad::Tape tape;
  ad::Tensor p1 = ad::Tensor::scalar(1.0, true);
  ad::Tensor n1 = ad::Tensor::scalar(-0.5, true);
  ad::NodeId l = matching_loss_node(tape, {tape.leaf(p1)}, {tape.leaf(n1)});
  CHECK(tape.value(l).values[0] == doctest::Approx(0.7873386716983295).epsilon(1e-9));
  tape.backward(l);
  // d/dp -log sigma(p) = sigma(p) - 1; d/dn -log sigma(-n) = sigma(n)
  CHECK(p1.grad[0] == doctest::Approx(1.0 / (1.0 + std::exp(-1.0)) - 1.0).epsilon(1e-12));
  CHECK(n1.grad[0] == doctest::Approx(1.0 / (1.0 + std::exp(0.5))).epsilon(1e-12));
}

TEST_CASE("cohort pairs: balanced cohort needs no synthesis") {
  std::vector<text::CohortRecord> cohort = {
      search("s1", "q1", {{"ad a", true}, {"ad b", false}}),
      search("s2", "q2", {{"ad c", true}, {"ad d", false}})};
  Rng rng(1);
  CohortPairs pairs = build_cohort_pairs(cohort, {}, rng);
  CHECK(pairs.positives.size() == 2);
  CHECK(pairs.observed_negatives.size() == 2);
  CHECK(pairs.synthesized_negatives.empty());
  CHECK(pairs.searches == 2);
}

TEST_CASE("cohort pairs: all-clicked cohort synthesizes from the cross pool") {
  std::vector<text::CohortRecord> cohort = {search("s1", "q1", {{"ad a", true}}),
                                            search("s2", "q2", {{"ad b", true}}),
                                            search("s3", "q3", {{"ad c", true}})};
  Rng rng(7);
  CohortPairs pairs = build_cohort_pairs(cohort, {}, rng);
  CHECK(pairs.positives.size() == 3);
  CHECK(pairs.observed_negatives.empty());
  // pool is the 6 cross pairs; synthesis stops once negatives reach positives
  CHECK(pairs.synthesized_negatives.size() == 3);
  for (const PairRef& ref : pairs.synthesized_negatives) {
    CHECK(ref.search != ref.ad_search);
  }
  // disabled synthesis leaves negatives empty
  Rng rng2(7);
  CohortPairs off = build_cohort_pairs(cohort, {false}, rng2);
  CHECK(off.synthesized_negatives.empty());
}

TEST_CASE("cohort pairs: identities served anywhere in the cohort are excluded") {
  // s1 and s2 share the same query text and the same ad; the cross pair
  // (q of s1, ad of s2) equals a served pair and must never be synthesized
  std::vector<text::CohortRecord> cohort = {search("s1", "same q", {{"same ad", true}}),
                                            search("s2", "same q", {{"same ad", true}})};
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    CohortPairs pairs = build_cohort_pairs(cohort, {}, rng);
    CHECK(pairs.synthesized_negatives.empty());  // the only cross pairs are served
  }
}

TEST_CASE("cohort pairs: clicked identity suppresses its observed-negative copy") {
  // the same (query, ad) appears clicked in s1 and unclicked in s2: the
  // unclicked copy is not a usable negative
  std::vector<text::CohortRecord> cohort = {search("s1", "q", {{"ad x", true}}),
                                            search("s2", "q", {{"ad x", false}})};
  Rng rng(3);
  CohortPairs pairs = build_cohort_pairs(cohort, {}, rng);
  CHECK(pairs.positives.size() == 1);
  CHECK(pairs.observed_negatives.empty());
}

TEST_CASE("cohort pairs: synthesis bound and collision freedom on random cohorts") {
  Rng gen(2024);
  for (int trial = 0; trial < 1000; ++trial) {
    std::size_t m = 2 + gen.uniform_int(4);
    std::vector<text::CohortRecord> cohort;
    for (std::size_t s = 0; s < m; ++s) {
      std::size_t n_ads = 1 + gen.uniform_int(3);
      std::vector<std::pair<std::string, bool>> ads;
      for (std::size_t a = 0; a < n_ads; ++a) {
        // small id spaces force identity collisions across searches
        ads.push_back({"ad" + std::to_string(gen.uniform_int(4)), gen.uniform() < 0.7});
      }
      cohort.push_back(search("s" + std::to_string(s), "q" + std::to_string(gen.uniform_int(3)),
                              ads));
    }
    Rng rng(static_cast<std::uint64_t>(trial));
    CohortPairs pairs = build_cohort_pairs(cohort, {}, rng);

    CHECK(pairs.synthesized_negatives.size() < m * (m - 1));

    std::set<std::pair<std::string, std::string>> served;
    for (const auto& rec : cohort) {
      for (const auto& ad : rec.ads) served.insert({rec.query_text, ad.title});
    }
    for (const PairRef& ref : pairs.synthesized_negatives) {
      const std::string& q = cohort[ref.search].query_text;
      const std::string& t = cohort[ref.ad_search].ads[ref.ad_index].title;
      CHECK(served.count({q, t}) == 0);
      CHECK(ref.search != ref.ad_search);
    }
    // negatives never overshoot: at most one synthesized pair past balance
    if (!pairs.synthesized_negatives.empty()) {
      std::size_t negatives =
          pairs.observed_negatives.size() + pairs.synthesized_negatives.size();
      CHECK(negatives <= pairs.positives.size());
    }
  }
}

TEST_CASE("combined loss plain and normalized") {
  CHECK(combined_loss(0.7, 0.3, LossMode::plain, nullptr) == doctest::Approx(1.0));
  CHECK(combined_loss(0.9, 0.0, LossMode::plain, nullptr) == doctest::Approx(0.9));

  LossNormalizer norm;
  CHECK_FALSE(norm.seeded());
  CHECK(combined_loss(0.7, 0.3, LossMode::loss_normalized, &norm) == doctest::Approx(2.0));
  CHECK(norm.seeded());
  CHECK(norm.ema_p() == doctest::Approx(0.7));
  // second step: ema = 0.99*old + 0.01*new
  double l2 = combined_loss(1.4, 0.3, LossMode::loss_normalized, &norm);
  double ema_p = 0.99 * 0.7 + 0.01 * 1.4;
  CHECK(norm.ema_p() == doctest::Approx(ema_p).epsilon(1e-12));
  CHECK(l2 == doctest::Approx(1.4 / ema_p + 0.3 / 0.3).epsilon(1e-12));
}

TEST_CASE("plain combined gradient is the sum of component gradients") {
  // d(P+Q)/dx == dP/dx + dQ/dx on a shared-input graph
  ad::Tensor x = ad::Tensor::scalar(0.37, true);
  auto grads = [&](int which) {
    ad::Tape tape;
    ad::NodeId xi = tape.leaf(x);
    ad::NodeId p = tape.mul(xi, xi);
    ad::NodeId q = tape.sigmoid(xi);
    x.zero_grad();
    if (which == 0) tape.backward(tape.add(p, q));
    if (which == 1) tape.backward(p);
    if (which == 2) tape.backward(q);
    return x.grad[0];
  };
  double combined = grads(0);
  double separate = grads(1) + grads(2);
  CHECK(std::fabs(combined - separate) < 1e-10);
}

TEST_CASE("sampling bias audit: degenerate single-search population") {
  AuditPopulation pop;
  pop.n_queries = 1;
  pop.n_ads = 2;
  pop.dim = 2;
  pop.q_table = {0.3, -0.1};
  pop.a_table = {0.2, 0.4, -0.3, 0.1};
  pop.searches = {{0, {{0, true}, {1, false}}}};
  BiasAuditConfig cfg;
  cfg.cohort_size = 1;
  cfg.n_draws = 200;
  BiasAuditReport rep = estimate_sampling_bias(pop, cfg);
  CHECK(rep.n_coords == 6);
  CHECK(rep.fraction_within() == doctest::Approx(1.0));
  for (std::size_t i = 0; i < rep.n_coords; ++i) {
    CHECK(rep.mean_grad[i] == doctest::Approx(rep.full_grad[i]).epsilon(1e-12));
  }
}

TEST_CASE("sampling bias audit: default population passes the strict test") {
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    AuditPopulation pop = AuditPopulation::default_population(seed);
    CHECK(pop.searches.size() == 4);
    CHECK(pop.coords() == 20);
    BiasAuditConfig cfg;
    cfg.seed = seed;
    cfg.n_draws = 4000;  // the acceptance run uses 20000; smaller here for speed
    BiasAuditReport rep = estimate_sampling_bias(pop, cfg);
    CHECK(rep.fraction_within() >= 0.95);
  }
}

TEST_CASE("sampling bias audit: synthesis mode reports without asserting") {
  AuditPopulation pop = AuditPopulation::default_population(5);
  BiasAuditConfig cfg;
  cfg.n_draws = 1000;
  cfg.with_synthesis = true;
  BiasAuditReport rep = estimate_sampling_bias(pop, cfg);
  CHECK(rep.with_synthesis);
  CHECK(rep.n_coords == 20);
  CHECK(rep.mean_grad.size() == 20);
}

TEST_CASE("sampling bias audit input validation") {
  AuditPopulation pop = AuditPopulation::default_population(1);
  BiasAuditConfig cfg;
  cfg.n_draws = 99;
  CHECK_THROWS_AS(estimate_sampling_bias(pop, cfg), std::invalid_argument);
}
