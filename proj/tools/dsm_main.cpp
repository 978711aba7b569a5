#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dsm/baselines.hpp"
#include "dsm/checkpoint.hpp"
#include "dsm/config.hpp"
#include "dsm/errors.hpp"
#include "dsm/log.hpp"
#include "dsm/losses.hpp"
#include "dsm/metrics.hpp"
#include "dsm/network.hpp"
#include "dsm/synth.hpp"
#include "dsm/text.hpp"
#include "dsm/train.hpp"

namespace {

using dsm::ConfigError;
using dsm::DataError;

dsm::cfg::RunConfig load_or_default(const std::string& path) {
  if (path.empty()) return {};
  return dsm::cfg::load_run_config(path);
}

void write_report(const std::string& path, const nlohmann::json& j) {
  if (!path.empty()) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write report: " + path);
    out << j.dump(2) << '\n';
  }
  std::cout << j.dump(2) << '\n';
}

nlohmann::json ranking_report(const std::vector<dsm::metrics::QueryRanking>& rankings,
                              const std::vector<std::size_t>& ks) {
  nlohmann::json ndcg = nlohmann::json::object();
  nlohmann::json precision = nlohmann::json::object();
  std::size_t skipped = 0;
  for (std::size_t k : ks) {
    dsm::metrics::RankMetric n = dsm::metrics::ndcg_at_k(rankings, k);
    dsm::metrics::RankMetric p = dsm::metrics::precision_at_k(rankings, k);
    ndcg[std::to_string(k)] = n.mean;
    precision[std::to_string(k)] = p.mean;
    skipped = n.queries_skipped;
  }
  return {{"ndcg", ndcg},
          {"precision", precision},
          {"n_queries", rankings.size()},
          {"queries_skipped", skipped}};
}

nlohmann::json eval_report(const std::vector<dsm::text::EncodedPair>& pairs,
                           const std::vector<double>& scores, const std::string& freq_path,
                           double threshold, std::size_t skipped) {
  std::vector<dsm::metrics::EvalExample> examples(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    examples[i] = {scores[i], static_cast<double>(pairs[i].label), pairs[i].position,
                   pairs[i].query_key};
  }
  std::unordered_map<std::string, std::size_t> freq;
  if (!freq_path.empty()) freq = dsm::synth::read_freq_table(freq_path);
  dsm::metrics::MetricsReport report = dsm::metrics::decompose_eval(examples, freq, threshold);
  nlohmann::json out = report.to_json();
  out["pairs_skipped"] = skipped;
  return out;
}

nlohmann::json validation_json(const dsm::train::TrainHistory& history, double best_auc,
                               std::size_t best_epoch, bool diverged, std::size_t skipped) {
  nlohmann::json j = history.to_json();
  j["best_auc"] = best_auc;
  j["best_epoch"] = best_epoch;
  j["diverged"] = diverged;
  j["pairs_skipped"] = skipped;
  return j;
}

int cmd_gen_data(const std::string& config_path, const std::string& out_dir, bool seed_set,
                 std::uint64_t seed) {
  dsm::cfg::RunConfig rc = load_or_default(config_path);
  if (seed_set) rc.generator.seed = seed;
  dsm::synth::GeneratedCorpus corpus = dsm::synth::generate_corpus(rc.generator);
  nlohmann::json summary = dsm::synth::write_corpus(corpus, out_dir);
  std::cout << summary.dump(2) << '\n';
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& train_path,
              const std::string& valid_path, const std::string& out_dir, bool seed_set,
              std::uint64_t seed, const std::string& ablation) {
  dsm::cfg::RunConfig rc = load_or_default(config_path);
  if (seed_set) rc.train.seed = seed;
  if (!ablation.empty()) rc.train.ablation = dsm::train::ablation_from_name(ablation);

  dsm::text::CohortReadResult train_data = dsm::text::read_cohorts(train_path);
  dsm::text::CohortReadResult valid_data = dsm::text::read_cohorts(valid_path);
  dsm::text::Vocab vocab =
      dsm::text::build_vocab_from_cohorts(train_data.records, rc.train.min_count);
  dsm::log::info("vocabulary: " + std::to_string(vocab.size()) + " ids");

  dsm::ad::Tensor pretrained;
  const dsm::ad::Tensor* pretrained_ptr = nullptr;
  if (rc.train.pretrained) {
    dsm::text::EmbeddingLoad loaded = dsm::text::load_pretrained_embeddings(
        rc.train.pretrained_path, vocab, rc.network.d1, rc.train.seed, rc.train.init_stddev);
    dsm::log::info("pretrained embedding coverage: " + std::to_string(loaded.coverage));
    pretrained = std::move(loaded.matrix);
    pretrained_ptr = &pretrained;
  }

  dsm::train::TrainResult result = dsm::train::train(
      rc.network, rc.train, train_data.records, valid_data.records, vocab, pretrained_ptr);

  std::filesystem::create_directories(out_dir);
  const std::filesystem::path dir(out_dir);
  nlohmann::json meta = {{"train_config", dsm::cfg::run_config_to_json(rc)["train"]},
                         {"best_epoch", result.best_epoch},
                         {"best_auc", result.best_auc}};
  dsm::train::save_model((dir / "model.ckpt").string(), result.params, rc.network, vocab, meta);
  {
    std::ofstream out(dir / "history.json", std::ios::binary);
    if (!out) throw DataError("cannot write history.json");
    out << validation_json(result.history, result.best_auc, result.best_epoch, result.diverged,
                           result.pairs_skipped)
               .dump(2)
        << '\n';
  }
  nlohmann::json report = result.history.validations.empty()
                              ? nlohmann::json::object()
                              : result.history.validations.back().to_json();
  if (result.best_epoch >= 1 && result.best_epoch <= result.history.validations.size()) {
    report = result.history.validations[result.best_epoch - 1].to_json();
  }
  write_report((dir / "report.json").string(), report);
  if (result.diverged) {
    std::cerr << "training diverged; history preserved in " << (dir / "history.json").string()
              << "\n";
    return 1;
  }
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data_path, const std::string& freq_path,
             double threshold, const std::string& report_path) {
  dsm::train::LoadedModel model = dsm::train::load_model(ckpt);
  dsm::text::CohortReadResult data = dsm::text::read_cohorts(data_path);
  dsm::train::EncodedDataset ds = dsm::train::encode_dataset(data.records, model.vocab,
                                                             model.config.l_q, model.config.l_a);
  if (ds.skipped > 0) {
    dsm::log::warn("skipping " + std::to_string(ds.skipped) + " pairs with an empty side");
  }
  std::vector<dsm::net::ForwardOutput> outputs =
      dsm::net::dsm_forward(ds.pairs, model.params, model.config);
  std::vector<double> scores(outputs.size());
  for (std::size_t i = 0; i < outputs.size(); ++i) scores[i] = outputs[i].y_hat;
  write_report(report_path, eval_report(ds.pairs, scores, freq_path, threshold, ds.skipped));
  return 0;
}

int cmd_match(const std::string& ckpt, const std::string& graded_path,
              const std::vector<std::size_t>& ks, const std::string& report_path) {
  dsm::train::LoadedModel model = dsm::train::load_model(ckpt);
  std::vector<dsm::synth::GradedQuery> graded = dsm::synth::read_graded(graded_path);
  std::vector<dsm::metrics::QueryRanking> rankings =
      dsm::train::dsm_rank(model.params, model.config, model.vocab, graded);
  write_report(report_path, ranking_report(rankings, ks));
  return 0;
}

int cmd_gradcheck(const std::string& config_path, bool seed_set, std::uint64_t seed,
                  double tolerance) {
  dsm::cfg::RunConfig rc = load_or_default(config_path);
  std::uint64_t use_seed = seed_set ? seed : rc.train.seed;
  dsm::train::MicroGradCheck result =
      config_path.empty() ? dsm::train::micro_gradcheck(use_seed)
                          : dsm::train::micro_gradcheck(rc.network, use_seed);
  nlohmann::json j = {{"max_rel_err", result.report.max_rel_err},
                      {"worst_param", result.report.worst_param},
                      {"worst_coord", result.report.worst_coord},
                      {"coords_checked", result.report.coords_checked},
                      {"seconds", result.seconds}};
  std::cout << j.dump(2) << '\n';
  if (!(result.report.max_rel_err < tolerance)) {
    std::cerr << "gradient check failed: max relative error " << result.report.max_rel_err
              << " at " << result.report.worst_param << "[" << result.report.worst_coord
              << "]\n";
    return 5;
  }
  return 0;
}

int cmd_sampler_audit(const std::string& config_path, bool seed_set, std::uint64_t seed,
                      std::size_t draws, std::size_t cohort_size, bool with_synthesis) {
  dsm::cfg::RunConfig rc = load_or_default(config_path);
  std::uint64_t use_seed = seed_set ? seed : rc.train.seed;
  dsm::loss::AuditPopulation population = dsm::loss::AuditPopulation::default_population(use_seed);
  dsm::loss::BiasAuditConfig audit{cohort_size, draws, use_seed, with_synthesis};
  dsm::loss::BiasAuditReport report = dsm::loss::estimate_sampling_bias(population, audit);
  nlohmann::json j = {{"fraction_within_3se", report.fraction_within()},
                      {"coords_within_3se", report.coords_within_3se},
                      {"n_coords", report.n_coords},
                      {"n_draws", draws},
                      {"with_synthesis", report.with_synthesis}};
  std::cout << j.dump(2) << '\n';
  if (!with_synthesis && report.fraction_within() < 0.95) {
    std::cerr << "sampler audit failed: only " << report.fraction_within() * 100.0
              << "% of coordinates within 3 standard errors\n";
    return 5;
  }
  return 0;
}

int cmd_baseline_lm(const std::string& config_path, const std::string& train_path,
                    const std::string& valid_path, const std::string& out_dir, bool seed_set,
                    std::uint64_t seed) {
  dsm::cfg::RunConfig rc = load_or_default(config_path);
  if (seed_set) rc.lm.seed = seed;
  dsm::text::CohortReadResult train_data = dsm::text::read_cohorts(train_path);
  dsm::text::CohortReadResult valid_data = dsm::text::read_cohorts(valid_path);
  dsm::text::Vocab vocab =
      dsm::text::build_vocab_from_cohorts(train_data.records, rc.train.min_count);
  dsm::base::LmTrainResult result =
      dsm::base::lm_train(rc.lm, train_data.records, valid_data.records, vocab);

  std::filesystem::create_directories(out_dir);
  const std::filesystem::path dir(out_dir);
  nlohmann::json meta = {{"lm_config", dsm::cfg::run_config_to_json(rc)["lm"]},
                         {"best_epoch", result.best_epoch},
                         {"best_auc", result.best_auc}};
  dsm::base::lm_save((dir / "lm.ckpt").string(), result.model, vocab, meta);
  {
    std::ofstream out(dir / "history.json", std::ios::binary);
    if (!out) throw DataError("cannot write history.json");
    out << validation_json(result.history, result.best_auc, result.best_epoch, result.diverged, 0)
               .dump(2)
        << '\n';
  }
  nlohmann::json report = nlohmann::json::object();
  if (result.best_epoch >= 1 && result.best_epoch <= result.history.validations.size()) {
    report = result.history.validations[result.best_epoch - 1].to_json();
  }
  write_report((dir / "report.json").string(), report);
  if (result.diverged) {
    std::cerr << "lm training diverged; history preserved\n";
    return 1;
  }
  return 0;
}

int cmd_baseline_lm_eval(const std::string& ckpt, const std::string& data_path,
                         const std::string& freq_path, double threshold,
                         const std::string& report_path) {
  dsm::base::LoadedLm loaded = dsm::base::lm_load(ckpt);
  dsm::text::CohortReadResult data = dsm::text::read_cohorts(data_path);
  std::vector<dsm::text::EncodedPair> pairs =
      dsm::base::lm_encode(data.records, loaded.vocab, loaded.model.l_q, loaded.model.l_a);
  std::vector<double> scores = dsm::base::lm_predict_batch(loaded.model, pairs);
  write_report(report_path, eval_report(pairs, scores, freq_path, threshold, 0));
  return 0;
}

int cmd_baseline_lm_match(const std::string& ckpt, const std::string& graded_path,
                          const std::vector<std::size_t>& ks, const std::string& report_path) {
  dsm::base::LoadedLm loaded = dsm::base::lm_load(ckpt);
  std::vector<dsm::synth::GradedQuery> graded = dsm::synth::read_graded(graded_path);
  std::vector<dsm::metrics::QueryRanking> rankings =
      dsm::base::lm_rank(loaded.model, loaded.vocab, graded);
  write_report(report_path, ranking_report(rankings, ks));
  return 0;
}

int cmd_baseline_bm25(const std::string& graded_path, const std::vector<std::size_t>& ks,
                      const std::string& report_path) {
  std::vector<dsm::synth::GradedQuery> graded = dsm::synth::read_graded(graded_path);
  std::vector<dsm::metrics::QueryRanking> rankings = dsm::base::bm25_rank(graded);
  write_report(report_path, ranking_report(rankings, ks));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"deeply supervised query-ad matching: training, evaluation and baselines"};
  app.require_subcommand(1);
  app.footer("Verbosity: set DSM_LOG to error, warn, info or debug.");

  std::string config_path, train_path, valid_path, out_dir, ckpt_path, data_path, freq_path,
      graded_path, report_path, ablation;
  std::uint64_t seed = 1;
  double threshold = std::numeric_limits<double>::quiet_NaN();
  double tolerance = 1e-4;
  std::size_t draws = 20000, cohort_size = 2;
  bool with_synthesis = false;
  std::vector<std::size_t> ks{1, 3, 5, 10};

  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic cohort corpus");
  gen->add_option("--config", config_path, "run config JSON");
  gen->add_option("--out", out_dir, "output directory")->required();
  gen->add_option("--seed", seed, "override generator.seed");

  CLI::App* train_cmd = app.add_subcommand("train", "train the matching model");
  train_cmd->add_option("--config", config_path, "run config JSON");
  train_cmd->add_option("--train", train_path, "training cohort JSONL")->required();
  train_cmd->add_option("--valid", valid_path, "validation cohort JSONL")->required();
  train_cmd->add_option("--out", out_dir, "output directory")->required();
  train_cmd->add_option("--seed", seed, "override train.seed");
  train_cmd->add_option("--ablation", ablation, "full, no_matching_loss or loss_normalized");

  CLI::App* eval_cmd = app.add_subcommand("eval", "score a cohort file and decompose metrics");
  eval_cmd->add_option("--ckpt", ckpt_path, "model checkpoint")->required();
  eval_cmd->add_option("--data", data_path, "cohort JSONL to score")->required();
  eval_cmd->add_option("--freq-table", freq_path, "query frequency TSV for head/torso/tail");
  eval_cmd->add_option("--threshold", threshold,
                       "accuracy threshold; omitted means maximize on this data");
  eval_cmd->add_option("--report", report_path, "report JSON path")->required();

  CLI::App* match_cmd = app.add_subcommand("match", "rank graded candidates by matching score");
  match_cmd->add_option("--ckpt", ckpt_path, "model checkpoint")->required();
  match_cmd->add_option("--graded", graded_path, "graded JSONL")->required();
  match_cmd->add_option("--k", ks, "cutoffs, comma separated")
      ->delimiter(',')
      ->capture_default_str();
  match_cmd->add_option("--report", report_path, "report JSON path")->required();

  CLI::App* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient audit");
  grad_cmd->add_option("--config", config_path, "run config JSON (default: micro network)");
  grad_cmd->add_option("--seed", seed, "parameter init seed");
  grad_cmd->add_option("--tolerance", tolerance, "maximum relative error")
      ->capture_default_str();

  CLI::App* audit_cmd =
      app.add_subcommand("sampler-audit", "cohort-gradient unbiasedness audit");
  audit_cmd->add_option("--config", config_path, "run config JSON");
  audit_cmd->add_option("--seed", seed, "population and draw seed");
  audit_cmd->add_option("--draws", draws, "Monte-Carlo cohort draws")->capture_default_str();
  audit_cmd->add_option("--cohort-size", cohort_size, "searches per cohort")
      ->capture_default_str();
  audit_cmd->add_flag("--with-synthesis", with_synthesis,
                      "report-only mode mirroring negative synthesis");

  CLI::App* baseline = app.add_subcommand("baseline", "comparison models");
  baseline->require_subcommand(1);
  CLI::App* lm_cmd = baseline->add_subcommand("lm", "train the embedding logistic regression");
  lm_cmd->add_option("--config", config_path, "run config JSON");
  lm_cmd->add_option("--train", train_path, "training cohort JSONL")->required();
  lm_cmd->add_option("--valid", valid_path, "validation cohort JSONL")->required();
  lm_cmd->add_option("--out", out_dir, "output directory")->required();
  lm_cmd->add_option("--seed", seed, "override lm.seed");
  CLI::App* lm_eval_cmd = baseline->add_subcommand("lm-eval", "evaluate an lm checkpoint");
  lm_eval_cmd->add_option("--ckpt", ckpt_path, "lm checkpoint")->required();
  lm_eval_cmd->add_option("--data", data_path, "cohort JSONL to score")->required();
  lm_eval_cmd->add_option("--freq-table", freq_path, "query frequency TSV");
  lm_eval_cmd->add_option("--threshold", threshold,
                          "accuracy threshold; omitted means maximize on this data");
  lm_eval_cmd->add_option("--report", report_path, "report JSON path")->required();
  CLI::App* lm_match_cmd =
      baseline->add_subcommand("lm-match", "rank graded candidates with an lm checkpoint");
  lm_match_cmd->add_option("--ckpt", ckpt_path, "lm checkpoint")->required();
  lm_match_cmd->add_option("--graded", graded_path, "graded JSONL")->required();
  lm_match_cmd->add_option("--k", ks, "cutoffs, comma separated")
      ->delimiter(',')
      ->capture_default_str();
  lm_match_cmd->add_option("--report", report_path, "report JSON path")->required();
  CLI::App* bm25_cmd = baseline->add_subcommand("bm25", "rank graded candidates with BM25");
  bm25_cmd->add_option("--graded", graded_path, "graded JSONL")->required();
  bm25_cmd->add_option("--k", ks, "cutoffs, comma separated")
      ->delimiter(',')
      ->capture_default_str();
  bm25_cmd->add_option("--report", report_path, "report JSON path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (gen->parsed()) {
      return cmd_gen_data(config_path, out_dir, gen->count("--seed") > 0, seed);
    }
    if (train_cmd->parsed()) {
      return cmd_train(config_path, train_path, valid_path, out_dir,
                       train_cmd->count("--seed") > 0, seed, ablation);
    }
    if (eval_cmd->parsed()) {
      return cmd_eval(ckpt_path, data_path, freq_path, threshold, report_path);
    }
    if (match_cmd->parsed()) {
      return cmd_match(ckpt_path, graded_path, ks, report_path);
    }
    if (grad_cmd->parsed()) {
      return cmd_gradcheck(config_path, grad_cmd->count("--seed") > 0, seed, tolerance);
    }
    if (audit_cmd->parsed()) {
      return cmd_sampler_audit(config_path, audit_cmd->count("--seed") > 0, seed, draws,
                               cohort_size, with_synthesis);
    }
    if (baseline->parsed()) {
      if (lm_cmd->parsed()) {
        return cmd_baseline_lm(config_path, train_path, valid_path, out_dir,
                               lm_cmd->count("--seed") > 0, seed);
      }
      if (lm_eval_cmd->parsed()) {
        return cmd_baseline_lm_eval(ckpt_path, data_path, freq_path, threshold, report_path);
      }
      if (lm_match_cmd->parsed()) {
        return cmd_baseline_lm_match(ckpt_path, graded_path, ks, report_path);
      }
      if (bm25_cmd->parsed()) {
        return cmd_baseline_bm25(graded_path, ks, report_path);
      }
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 4;
  } catch (const dsm::ckpt::CheckpointError& e) {
    std::cerr << "checkpoint error (" << dsm::ckpt::error_kind_name(e.kind) << "): " << e.what()
              << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  std::cerr << "no command handled\n";
  return 2;
}
