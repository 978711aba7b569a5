// Release gate: one self-contained check per acceptance criterion. Each check
// prints exactly one "PASS name: detail" or "FAIL name: detail" line; the
// exit status is the number of failures (0 when everything holds). Run with a
// case name to execute a single criterion, or with no arguments for all.
//
// The heavy checks train real models on generated corpora sized for a desk
// machine; their wall-clock limits are part of the criteria and are measured
// here, not assumed.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dsm/baselines.hpp"
#include "dsm/checkpoint.hpp"
#include "dsm/losses.hpp"
#include "dsm/metrics.hpp"
#include "dsm/network.hpp"
#include "dsm/rng.hpp"
#include "dsm/synth.hpp"
#include "dsm/tape.hpp"
#include "dsm/text.hpp"
#include "dsm/train.hpp"

namespace {

using dsm::Rng;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string fmt(double x, int precision = 4) {
  std::ostringstream os;
  os.precision(precision);
  os << x;
  return os.str();
}

std::string fmt_list(const std::vector<double>& v, int precision = 4) {
  std::string out = "[";
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += " ";
    out += fmt(v[i], precision);
  }
  return out + "]";
}

// Network size shared by the training-based checks: big enough for the
// matching signal, small enough that ten runs fit the time budget.
dsm::net::NetworkConfig small_net() {
  dsm::net::NetworkConfig c;
  c.d1 = 24;
  c.d2 = 16;
  c.d3_q = 12;
  c.d3_a = 16;
  c.d4 = 10;
  c.d_att = 8;
  c.conv_filters_stage1 = 4;
  c.conv_filters_final = 8;
  c.l_q = 6;
  c.l_a = 12;
  return c;
}

dsm::train::TrainConfig run_tc(std::uint64_t seed, dsm::train::Ablation ablation) {
  dsm::train::TrainConfig t;
  t.learning_rate = 1e-3;
  t.schedule = dsm::train::Schedule::constant;
  t.batch_cohorts = 24;
  t.epochs = 2;
  t.seed = seed;
  t.ablation = ablation;
  t.init_stddev = 0.1;
  return t;
}

double test_auc(dsm::net::ModelParams& params, const dsm::net::NetworkConfig& cfg,
                const dsm::text::Vocab& vocab,
                const std::vector<dsm::text::CohortRecord>& test) {
  dsm::train::EncodedDataset enc = dsm::train::encode_dataset(test, vocab, cfg.l_q, cfg.l_a);
  std::vector<dsm::net::ForwardOutput> outs = dsm::net::dsm_forward(enc.pairs, params, cfg);
  std::vector<double> scores, labels;
  scores.reserve(outs.size());
  labels.reserve(outs.size());
  for (std::size_t i = 0; i < outs.size(); ++i) {
    scores.push_back(outs[i].y_hat);
    labels.push_back(enc.pairs[i].label);
  }
  return dsm::metrics::auc(scores, labels);
}

// --- 1. gradient fidelity -------------------------------------------------

Outcome check_gradcheck() {
  dsm::train::MicroGradCheck mg = dsm::train::micro_gradcheck(1);
  bool pass = mg.report.max_rel_err < 1e-4 && mg.seconds < 60.0;
  std::ostringstream os;
  os << "max rel err " << fmt(mg.report.max_rel_err, 3) << " (limit 1e-4) over "
     << mg.report.coords_checked << " coords, worst " << mg.report.worst_param << "["
     << mg.report.worst_coord << "], " << fmt(mg.seconds, 3) << "s (limit 60)";
  return {pass, os.str()};
}

// --- 2. attention normalization --------------------------------------------

Outcome check_attention_mass() {
  dsm::net::NetworkConfig cfg = dsm::net::NetworkConfig::micro();
  const std::size_t vocab_size = 12;
  Rng rng(424242);
  std::size_t failures = 0;
  double worst_gap = 0.0;
  for (std::size_t pass_i = 0; pass_i < 100; ++pass_i) {
    dsm::net::ModelParams params =
        dsm::train::init_params(cfg, vocab_size, 1000 + pass_i, 0.3);
    dsm::text::EncodedPair pair;
    std::size_t q_len = 1 + rng.uniform_int(cfg.l_q);
    std::size_t a_len = 1 + rng.uniform_int(cfg.l_a);
    for (std::size_t i = 0; i < cfg.l_q; ++i) {
      bool valid = i < q_len;
      pair.query_ids.push_back(valid ? static_cast<int>(2 + rng.uniform_int(vocab_size - 2)) : 0);
      pair.query_mask.push_back(valid ? 1 : 0);
    }
    for (std::size_t i = 0; i < cfg.l_a; ++i) {
      bool valid = i < a_len;
      pair.ad_ids.push_back(valid ? static_cast<int>(2 + rng.uniform_int(vocab_size - 2)) : 0);
      pair.ad_mask.push_back(valid ? 1 : 0);
    }
    for (std::size_t i = 0; i < cfg.l_q; ++i) {
      for (std::size_t j = 0; j < cfg.l_a; ++j) {
        bool both = i < q_len && j < a_len;
        pair.exact_match.push_back(both && rng.bernoulli(0.2) ? 1 : 0);
      }
    }
    dsm::ad::Tape tape;
    dsm::net::PairNodes nodes = dsm::net::forward_pair(tape, pair, params, cfg);
    const auto check_side = [&](dsm::ad::NodeId weights, const dsm::ad::Mask& mask) {
      const std::vector<double>& w = tape.value(weights).values;
      double sum = 0.0;
      bool ok = true;
      for (std::size_t i = 0; i < w.size(); ++i) {
        sum += w[i];
        if (!mask[i] && w[i] != 0.0) ok = false;
      }
      worst_gap = std::max(worst_gap, std::fabs(sum - 1.0));
      return ok && std::fabs(sum - 1.0) <= 1e-6;
    };
    if (!check_side(nodes.query.weights, pair.query_mask)) ++failures;
    if (!check_side(nodes.ad.weights, pair.ad_mask)) ++failures;
  }
  std::ostringstream os;
  os << failures << " violations in 200 side checks (100 passes), worst |sum-1| "
     << fmt(worst_gap, 3) << " (limit 1e-6), masked weights exact zeros";
  return {failures == 0, os.str()};
}

// --- 3. cohort pair algebra -------------------------------------------------

std::string pair_key(const std::string& query, const dsm::text::AdImpression& ad) {
  return query + '\x1f' + ad.title + '\x1f' + ad.description + '\x1f' + ad.display_url;
}

Outcome check_cohort_sampler() {
  dsm::synth::GeneratorConfig gc;
  gc.n_searches = 3000;
  gc.n_queries = 300;
  gc.vocab_size = 200;
  gc.seed = 11;
  dsm::synth::GeneratedCorpus corpus = dsm::synth::generate_corpus(gc);
  const std::vector<dsm::text::CohortRecord>& pool = corpus.train;

  Rng pick(2025);
  std::size_t collisions = 0, bound_violations = 0, count_mismatches = 0;
  std::size_t synthesized_total = 0;
  for (std::size_t trial = 0; trial < 1000; ++trial) {
    std::size_t m = 2 + pick.uniform_int(7);
    std::vector<dsm::text::CohortRecord> cohort;
    std::set<std::size_t> chosen;
    while (chosen.size() < m) chosen.insert(pick.uniform_int(pool.size()));
    for (std::size_t idx : chosen) cohort.push_back(pool[idx]);
    if (trial % 2 == 1) {
      // click-only cohorts starve the observed negatives so synthesis has to
      // fill in; shared queries and pool ads force collision candidates
      for (auto& rec : cohort) {
        std::erase_if(rec.ads, [](const dsm::text::AdImpression& ad) { return !ad.clicked; });
      }
      std::erase_if(cohort,
                    [](const dsm::text::CohortRecord& rec) { return rec.ads.empty(); });
      if (cohort.size() < 2) continue;
      m = cohort.size();
    }

    Rng rng(trial + 1);
    dsm::loss::CohortPairs pairs = dsm::loss::build_cohort_pairs(cohort, {}, rng);
    synthesized_total += pairs.synthesized_negatives.size();

    // independent exhaustive scan over the cohort's impressions
    std::set<std::string> served, clicked;
    std::size_t want_pos = 0, want_neg = 0;
    for (const auto& rec : cohort) {
      for (const auto& ad : rec.ads) {
        served.insert(pair_key(rec.query_text, ad));
        if (ad.clicked) {
          ++want_pos;
          clicked.insert(pair_key(rec.query_text, ad));
        }
      }
    }
    for (const auto& rec : cohort) {
      for (const auto& ad : rec.ads) {
        if (!ad.clicked && !clicked.count(pair_key(rec.query_text, ad))) ++want_neg;
      }
    }
    if (pairs.positives.size() != want_pos || pairs.observed_negatives.size() != want_neg) {
      ++count_mismatches;
    }
    if (pairs.synthesized_negatives.size() >= m * (m - 1)) ++bound_violations;
    for (const dsm::loss::PairRef& ref : pairs.synthesized_negatives) {
      const std::string key =
          pair_key(cohort[ref.search].query_text, cohort[ref.ad_search].ads[ref.ad_index]);
      if (served.count(key) || ref.search == ref.ad_search) ++collisions;
    }
  }
  std::ostringstream os;
  os << "1000 cohorts: " << collisions << " served collisions, " << bound_violations
     << " m(m-1) bound violations, " << count_mismatches
     << " exhaustive-scan count mismatches, " << synthesized_total << " pairs synthesized";
  return {collisions == 0 && bound_violations == 0 && count_mismatches == 0, os.str()};
}

// --- 4. cohort gradient unbiasedness ----------------------------------------

Outcome check_sampler_bias() {
  auto start = std::chrono::steady_clock::now();
  double min_fraction = 1.0;
  std::size_t seeds_passed = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    dsm::loss::AuditPopulation pop = dsm::loss::AuditPopulation::default_population(seed);
    dsm::loss::BiasAuditConfig bc;
    bc.cohort_size = 2;
    bc.n_draws = 20000;
    bc.seed = seed;
    bc.with_synthesis = false;
    dsm::loss::BiasAuditReport rep = dsm::loss::estimate_sampling_bias(pop, bc);
    min_fraction = std::min(min_fraction, rep.fraction_within());
    if (rep.fraction_within() >= 0.95 && rep.n_coords == pop.coords()) ++seeds_passed;
  }
  double elapsed = seconds_since(start);
  bool pass = seeds_passed == 10 && elapsed < 300.0;
  std::ostringstream os;
  os << seeds_passed << "/10 seeds with >=95% of 20 coords within 3 SE (20000 draws each), "
     << "min fraction " << fmt(min_fraction, 4) << ", " << fmt(elapsed, 3) << "s (limit 300)";
  return {pass, os.str()};
}

// --- 5. ablation direction ---------------------------------------------------

Outcome check_ablation() {
  auto start = std::chrono::steady_clock::now();
  dsm::synth::GeneratorConfig gc;  // stock corpus: ~20k training pairs, weight 3
  dsm::synth::GeneratedCorpus corpus = dsm::synth::generate_corpus(gc);
  std::size_t train_pairs = 0;
  for (const auto& rec : corpus.train) train_pairs += rec.ads.size();
  dsm::text::Vocab vocab = dsm::text::build_vocab_from_cohorts(corpus.train, 1);
  dsm::net::NetworkConfig cfg = small_net();

  std::vector<double> full_aucs, ablated_aucs, lm_aucs;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    for (dsm::train::Ablation abl :
         {dsm::train::Ablation::full, dsm::train::Ablation::no_matching_loss}) {
      dsm::train::TrainResult r =
          dsm::train::train(cfg, run_tc(seed, abl), corpus.train, corpus.valid, vocab);
      double auc = test_auc(r.params, cfg, vocab, corpus.test);
      (abl == dsm::train::Ablation::full ? full_aucs : ablated_aucs).push_back(auc);
    }
    dsm::base::LmConfig lc;
    lc.dim = 24;
    lc.l_q = cfg.l_q;
    lc.l_a = cfg.l_a;
    lc.learning_rate = 0.02;
    lc.schedule = dsm::train::Schedule::constant;
    lc.epochs = 6;
    lc.seed = seed;
    dsm::base::LmTrainResult lr = dsm::base::lm_train(lc, corpus.train, corpus.valid, vocab);
    std::vector<dsm::text::EncodedPair> test_pairs =
        dsm::base::lm_encode(corpus.test, vocab, lc.l_q, lc.l_a);
    std::vector<double> scores = dsm::base::lm_predict_batch(lr.model, test_pairs);
    std::vector<double> labels;
    for (const auto& p : test_pairs) labels.push_back(p.label);
    lm_aucs.push_back(dsm::metrics::auc(scores, labels));
  }

  double med_full = median(full_aucs);
  double med_ablated = median(ablated_aucs);
  double med_lm = median(lm_aucs);
  double min_dsm = std::min(*std::min_element(full_aucs.begin(), full_aucs.end()),
                            *std::min_element(ablated_aucs.begin(), ablated_aucs.end()));
  double elapsed = seconds_since(start);
  bool pass = med_full >= med_ablated && med_full >= med_lm + 0.02 &&
              med_ablated >= med_lm + 0.02 && min_dsm >= 0.65 && corpus.bayes_auc >= 0.80 &&
              elapsed < 1800.0;
  std::ostringstream os;
  os << train_pairs << " train pairs, bayes bound " << fmt(corpus.bayes_auc, 4)
     << " (need >=0.80); median AUC full " << fmt(med_full, 4) << " >= ablated "
     << fmt(med_ablated, 4) << ", both >= lm " << fmt(med_lm, 4)
     << " + 0.02; min model AUC " << fmt(min_dsm, 4) << " (need >=0.65); full "
     << fmt_list(full_aucs) << " ablated " << fmt_list(ablated_aucs) << " lm "
     << fmt_list(lm_aucs) << "; " << fmt(elapsed, 4) << "s (limit 1800)";
  return {pass, os.str()};
}

// --- 6. metric oracles -------------------------------------------------------

Outcome check_metric_oracles() {
  Rng rng(99);
  std::size_t auc_mismatches = 0;
  for (std::size_t set_i = 0; set_i < 50; ++set_i) {
    std::vector<double> scores, labels;
    for (;;) {
      scores.clear();
      labels.clear();
      std::size_t n = 2 + rng.uniform_int(29);
      bool has_pos = false, has_neg = false;
      for (std::size_t i = 0; i < n; ++i) {
        scores.push_back(static_cast<double>(rng.uniform_int(7)) / 6.0);  // forces ties
        bool pos = rng.bernoulli(0.5);
        labels.push_back(pos ? 1.0 : 0.0);
        (pos ? has_pos : has_neg) = true;
      }
      if (has_pos && has_neg) break;
    }
    double hits = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (labels[i] != 1.0) continue;
      for (std::size_t j = 0; j < scores.size(); ++j) {
        if (labels[j] != 0.0) continue;
        ++pairs;
        if (scores[i] > scores[j]) hits += 1.0;
        else if (scores[i] == scores[j]) hits += 0.5;
      }
    }
    double brute = hits / static_cast<double>(pairs);
    if (dsm::metrics::auc(scores, labels) != brute) ++auc_mismatches;
  }

  // ideal order [3,0]; model ranks the grade-0 candidate first
  std::vector<dsm::metrics::QueryRanking> rankings = {
      {"q", {{0.9, 0}, {0.1, 3}}}};
  double ndcg = dsm::metrics::ndcg_at_k(rankings, 2).mean;
  bool ndcg_ok = std::fabs(ndcg - 0.6309297535714575) < 1e-4;

  std::vector<double> a, b(10, 0.0);
  for (int i = 1; i <= 10; ++i) a.push_back(i);
  b[0] = 2.0;  // diffs -1, -2, 3..10: negative ranks 1+2
  b[1] = 4.0;
  dsm::metrics::WilcoxonResult w = dsm::metrics::wilcoxon_signed_rank(a, b);
  bool wilcoxon_ok = w.w == 3.0 && w.n == 10;

  std::ostringstream os;
  os << auc_mismatches << "/50 brute-force AUC mismatches; ndcg@2 " << fmt(ndcg, 10)
     << " vs 0.6309297535714575; wilcoxon w " << fmt(w.w, 3) << " (want 3)";
  return {auc_mismatches == 0 && ndcg_ok && wilcoxon_ok, os.str()};
}

// --- 7. calibration bias ------------------------------------------------------

Outcome check_bias_calibration() {
  dsm::synth::GeneratorConfig gc;
  gc.n_searches = 40000;
  gc.train_frac = 0.05;
  gc.valid_frac = 0.05;
  gc.seed = 5;
  dsm::synth::GeneratedCorpus corpus = dsm::synth::generate_corpus(gc);
  std::vector<double> scores, labels;
  scores.reserve(corpus.test_truth.size());
  for (const dsm::synth::TestTruthRow& row : corpus.test_truth) {
    scores.push_back(row.true_p);
    labels.push_back(row.clicked);
  }
  double bias = dsm::metrics::prediction_bias(scores, labels);
  bool pass = scores.size() >= 50000 && std::fabs(bias - 1.0) <= 0.02 &&
              std::fabs(bias - corpus.bias_true) < 1e-9;
  std::ostringstream os;
  os << scores.size() << " test impressions (need >=50000), bias of true probabilities "
     << fmt(bias, 5) << " (need 1 +/- 0.02)";
  return {pass, os.str()};
}

// --- 8. matching direction vs BM25 ---------------------------------------------

Outcome check_ranking_vs_bm25() {
  auto start = std::chrono::steady_clock::now();
  dsm::synth::GeneratorConfig gc;  // stock corpus; the graded set comes from test queries
  dsm::synth::GeneratedCorpus corpus = dsm::synth::generate_corpus(gc);
  dsm::text::Vocab vocab = dsm::text::build_vocab_from_cohorts(corpus.train, 1);
  dsm::net::NetworkConfig cfg = small_net();

  double bm25 = dsm::metrics::ndcg_at_k(dsm::base::bm25_rank(corpus.graded), 5).mean;
  std::vector<double> dsm_ndcgs;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    dsm::train::TrainResult r = dsm::train::train(
        cfg, run_tc(seed, dsm::train::Ablation::full), corpus.train, corpus.valid, vocab);
    std::vector<dsm::metrics::QueryRanking> rankings =
        dsm::train::dsm_rank(r.params, cfg, vocab, corpus.graded);
    dsm_ndcgs.push_back(dsm::metrics::ndcg_at_k(rankings, 5).mean);
  }
  double med = median(dsm_ndcgs);
  double elapsed = seconds_since(start);
  bool pass = med >= bm25;
  std::ostringstream os;
  os << corpus.graded.size() << " graded queries: median model ndcg@5 " << fmt(med, 4)
     << " (seeds " << fmt_list(dsm_ndcgs) << ") vs bm25 " << fmt(bm25, 4) << "; "
     << fmt(elapsed, 4) << "s";
  return {pass, os.str()};
}

// --- 9. position and frequency decomposition ------------------------------------

Outcome check_position_effects() {
  dsm::synth::GeneratorConfig gc;
  gc.seed = 4;
  dsm::synth::GeneratedCorpus corpus = dsm::synth::generate_corpus(gc);
  bool decreasing = true;
  for (std::size_t i = 1; i < corpus.position_ctr_empirical.size(); ++i) {
    if (corpus.position_ctr_empirical[i] >= corpus.position_ctr_empirical[i - 1]) {
      decreasing = false;
    }
  }

  // boundary cases: train counts 4, 5, 20, 21 land in tail, torso, torso, head
  std::unordered_map<std::string, std::size_t> freq = {
      {"q4", 4}, {"q5", 5}, {"q20", 20}, {"q21", 21}};
  std::vector<dsm::metrics::EvalExample> examples;
  for (const char* key : {"q4", "q5", "q20", "q21"}) {
    examples.push_back({0.9, 1.0, 1, key});
    examples.push_back({0.1, 0.0, 1, key});
  }
  dsm::metrics::MetricsReport rep = dsm::metrics::decompose_eval(examples, freq, 0.5);
  bool buckets_ok = rep.buckets.at("tail").n == 2 && rep.buckets.at("torso").n == 4 &&
                    rep.buckets.at("head").n == 2 && rep.buckets.at("position_1").n == 8;

  std::ostringstream os;
  std::vector<double> ctrs(corpus.position_ctr_empirical.begin(),
                           corpus.position_ctr_empirical.end());
  os << "empirical position ctr " << fmt_list(ctrs)
     << (decreasing ? " strictly decreasing" : " NOT strictly decreasing")
     << "; boundary counts tail/torso/head = " << rep.buckets.at("tail").n << "/"
     << rep.buckets.at("torso").n << "/" << rep.buckets.at("head").n << " (want 2/4/2)";
  return {decreasing && buckets_ok, os.str()};
}

// --- 10. schedule convergence diagnostic -----------------------------------------

Outcome check_optimizer_convergence() {
  // 100-parameter sum of quartic double wells with a sine ripple: non-convex,
  // smooth, gradient x^3 - x + 0.9 cos(3x) per coordinate
  const std::size_t dim = 100, steps = 10000;
  dsm::ad::Tensor x({dim}, std::vector<double>(dim, 0.0), true);
  x.ensure_grad();
  Rng rng(7);
  for (double& v : x.values) v = rng.normal(0.0, 1.5);
  std::vector<std::pair<std::string, dsm::ad::Tensor*>> params = {{"toy", &x}};
  dsm::train::TrainConfig tc;
  tc.learning_rate = 0.05;
  tc.schedule = dsm::train::Schedule::inverse_sqrt;
  dsm::train::AdamState state;
  dsm::train::adam_init(state, params);
  std::vector<double> grad_norm_sq;
  grad_norm_sq.reserve(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    double norm = 0.0;
    for (std::size_t i = 0; i < dim; ++i) {
      double v = x.values[i];
      x.grad[i] = v * v * v - v + 0.9 * std::cos(3.0 * v);
      norm += x.grad[i] * x.grad[i];
    }
    grad_norm_sq.push_back(norm);
    dsm::train::adam_step(params, state, tc);
  }
  dsm::train::ConvergenceDiagnostic toy = dsm::train::convergence_diagnostic(grad_norm_sq);
  double at_T = toy.running_min.back();
  double at_T16 = toy.running_min[steps / 16 - 1];
  bool decay_ok = at_T <= 0.5 * at_T16;

  std::vector<double> analytic;
  analytic.reserve(steps);
  for (std::size_t t = 1; t <= steps; ++t) analytic.push_back(1.0 / std::sqrt(double(t)));
  double slope = dsm::train::convergence_diagnostic(analytic).slope;
  bool slope_ok = std::fabs(slope + 0.5) <= 0.05;

  std::ostringstream os;
  os << "running-min grad^2 at T " << fmt(at_T, 3) << " vs at T/16 " << fmt(at_T16, 3)
     << " (need <=0.5x); analytic 1/sqrt(t) slope " << fmt(slope, 4) << " (need -0.5 +/- 0.05)";
  return {decay_ok && slope_ok, os.str()};
}

// --- 11. determinism and persistence ----------------------------------------------

std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

Outcome check_determinism() {
  dsm::synth::GeneratorConfig gc;
  gc.n_searches = 600;
  gc.n_queries = 80;
  gc.vocab_size = 120;
  gc.seed = 3;
  dsm::synth::GeneratedCorpus corpus = dsm::synth::generate_corpus(gc);
  dsm::text::Vocab vocab = dsm::text::build_vocab_from_cohorts(corpus.train, 1);
  dsm::net::NetworkConfig cfg = dsm::net::NetworkConfig::micro();
  dsm::train::TrainConfig tc = run_tc(9, dsm::train::Ablation::full);
  tc.epochs = 2;
  tc.batch_cohorts = 16;

  dsm::train::TrainResult r1 = dsm::train::train(cfg, tc, corpus.train, corpus.valid, vocab);
  dsm::train::TrainResult r2 = dsm::train::train(cfg, tc, corpus.train, corpus.valid, vocab);
  bool history_equal = r1.history.to_json().dump() == r2.history.to_json().dump();

  std::filesystem::path dir = "acceptance_tmp";
  std::filesystem::create_directories(dir);
  const nlohmann::json meta = {{"run", "acceptance"}};
  dsm::train::save_model((dir / "a.ckpt").string(), r1.params, cfg, vocab, meta);
  dsm::train::save_model((dir / "b.ckpt").string(), r2.params, cfg, vocab, meta);
  std::string bytes = read_bytes(dir / "a.ckpt");
  bool files_equal = !bytes.empty() && bytes == read_bytes(dir / "b.ckpt");

  dsm::train::LoadedModel loaded = dsm::train::load_model((dir / "a.ckpt").string());
  bool round_trip = true;
  auto want = r1.params.named();
  auto got = loaded.params.named();
  for (std::size_t i = 0; i < want.size(); ++i) {
    const auto& a = want[i].second->values;
    const auto& b = got[i].second->values;
    if (want[i].first != got[i].first || a.size() != b.size() ||
        std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) != 0) {
      round_trip = false;
    }
  }

  // corruption: wrong magic, truncation, payload bit flip
  auto kind_of = [&](const std::string& contents) {
    std::filesystem::path p = dir / "corrupt.ckpt";
    std::ofstream(p, std::ios::binary).write(contents.data(), contents.size());
    try {
      dsm::ckpt::load(p.string());
    } catch (const dsm::ckpt::CheckpointError& e) {
      return std::string(dsm::ckpt::error_kind_name(e.kind));
    } catch (...) {
      return std::string("wrong exception type");
    }
    return std::string("accepted");
  };
  std::string magic_bytes = bytes;
  magic_bytes[0] = 'X';
  std::string flipped = bytes;
  flipped.back() = static_cast<char>(flipped.back() ^ 0x01);
  bool rejects = kind_of(magic_bytes) == "bad_magic" &&
                 kind_of(bytes.substr(0, bytes.size() - 6)) == "truncated" &&
                 kind_of(flipped) == "checksum_mismatch";
  std::filesystem::remove_all(dir);

  bool pass = history_equal && files_equal && round_trip && rejects;
  std::ostringstream os;
  os << "history " << (history_equal ? "byte-identical" : "DIFFERS") << ", checkpoints "
     << (files_equal ? "byte-identical" : "DIFFER") << ", round trip "
     << (round_trip ? "bit-identical" : "DIFFERS") << ", corruption kinds "
     << (rejects ? "bad_magic/truncated/checksum_mismatch" : "WRONG");
  return {pass, os.str()};
}

struct Case {
  const char* name;
  Outcome (*fn)();
};

const Case kCases[] = {
    {"gradcheck", check_gradcheck},
    {"attention_mass", check_attention_mass},
    {"cohort_sampler", check_cohort_sampler},
    {"sampler_bias", check_sampler_bias},
    {"ablation", check_ablation},
    {"metric_oracles", check_metric_oracles},
    {"bias_calibration", check_bias_calibration},
    {"ranking_vs_bm25", check_ranking_vs_bm25},
    {"position_effects", check_position_effects},
    {"optimizer_convergence", check_optimizer_convergence},
    {"determinism", check_determinism},
};

int run_case(const Case& c) {
  Outcome o = c.fn();
  std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", c.name, o.detail.c_str());
  std::fflush(stdout);
  return o.pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc > 2) {
    std::fprintf(stderr, "usage: %s [case]\n", argv[0]);
    return 2;
  }
  if (argc == 2) {
    for (const Case& c : kCases) {
      if (std::string(argv[1]) == c.name) return run_case(c);
    }
    std::fprintf(stderr, "unknown case '%s'; cases:", argv[1]);
    for (const Case& c : kCases) std::fprintf(stderr, " %s", c.name);
    std::fprintf(stderr, "\n");
    return 2;
  }
  int failures = 0;
  for (const Case& c : kCases) failures += run_case(c);
  return failures;
}
