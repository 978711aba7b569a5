#include "dsm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace dsm::metrics {

namespace {

void check_binary_sizes(const std::vector<double>& scores, const std::vector<double>& labels) {
  if (scores.size() != labels.size()) {
    throw std::invalid_argument("scores and labels must have equal length");
  }
  if (scores.empty()) throw std::invalid_argument("empty input");
}

}  // namespace

double auc(const std::vector<double>& scores, const std::vector<double>& labels) {
  check_binary_sizes(scores, labels);
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  double pos_rank_sum = 0.0;
  std::size_t n_pos = 0, n_neg = 0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    double midrank = 0.5 * static_cast<double>(i + 1 + j);  // average of ranks i+1 .. j
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] > 0.5) {
        pos_rank_sum += midrank;
        ++n_pos;
      } else {
        ++n_neg;
      }
    }
    i = j;
  }
  if (n_pos == 0 || n_neg == 0) {
    throw std::invalid_argument("auc needs both a positive and a negative example");
  }
  double u = pos_rank_sum - 0.5 * static_cast<double>(n_pos) * static_cast<double>(n_pos + 1);
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

AccuracyResult accuracy_at_threshold(const std::vector<double>& scores,
                                     const std::vector<double>& labels, double threshold) {
  check_binary_sizes(scores, labels);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    bool pred = scores[i] >= threshold;
    bool truth = labels[i] > 0.5;
    if (pred == truth) ++correct;
  }
  return {static_cast<double>(correct) / static_cast<double>(scores.size()), threshold};
}

AccuracyResult accuracy_maximized(const std::vector<double>& scores,
                                  const std::vector<double>& labels) {
  check_binary_sizes(scores, labels);
  std::vector<double> uniq(scores);
  std::sort(uniq.begin(), uniq.end());
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());

  std::vector<double> candidates;
  candidates.push_back(uniq.front() - 1.0);  // everything predicted positive
  for (std::size_t i = 0; i + 1 < uniq.size(); ++i) {
    candidates.push_back(0.5 * (uniq[i] + uniq[i + 1]));
  }
  candidates.push_back(uniq.back() + 1.0);  // everything predicted negative

  AccuracyResult best{-1.0, candidates.front()};
  for (double th : candidates) {
    AccuracyResult r = accuracy_at_threshold(scores, labels, th);
    if (r.accuracy > best.accuracy) best = r;
  }
  return best;
}

double prediction_bias(const std::vector<double>& scores, const std::vector<double>& labels) {
  check_binary_sizes(scores, labels);
  double s = std::accumulate(scores.begin(), scores.end(), 0.0);
  double l = std::accumulate(labels.begin(), labels.end(), 0.0);
  if (l <= 0.0) throw std::invalid_argument("prediction bias undefined without any clicks");
  return s / l;
}

namespace {

std::vector<std::size_t> model_order(const std::vector<RankedCandidate>& cands) {
  std::vector<std::size_t> order(cands.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return cands[a].score > cands[b].score;
  });
  return order;
}

double dcg(const std::vector<int>& grades, std::size_t k) {
  double acc = 0.0;
  for (std::size_t r = 0; r < grades.size() && r < k; ++r) {
    acc += (std::pow(2.0, grades[r]) - 1.0) / std::log2(static_cast<double>(r + 2));
  }
  return acc;
}

}  // namespace

RankMetric ndcg_at_k(const std::vector<QueryRanking>& rankings, std::size_t k) {
  if (k < 1) throw std::invalid_argument("k must be >= 1");
  RankMetric out;
  for (const auto& q : rankings) {
    if (q.candidates.empty()) {
      ++out.queries_skipped;
      continue;
    }
    std::vector<int> by_model;
    for (std::size_t idx : model_order(q.candidates)) by_model.push_back(q.candidates[idx].grade);
    std::vector<int> ideal = by_model;
    std::sort(ideal.begin(), ideal.end(), std::greater<int>());
    double idcg = dcg(ideal, k);
    out.per_query.push_back(idcg == 0.0 ? 1.0 : dcg(by_model, k) / idcg);
  }
  if (!out.per_query.empty()) {
    out.mean = std::accumulate(out.per_query.begin(), out.per_query.end(), 0.0) /
               static_cast<double>(out.per_query.size());
  }
  return out;
}

RankMetric precision_at_k(const std::vector<QueryRanking>& rankings, std::size_t k,
                          int relevant_grade_threshold) {
  if (k < 1) throw std::invalid_argument("k must be >= 1");
  RankMetric out;
  for (const auto& q : rankings) {
    if (q.candidates.empty()) {
      ++out.queries_skipped;
      continue;
    }
    auto order = model_order(q.candidates);
    std::size_t depth = std::min(k, order.size());
    std::size_t hits = 0;
    for (std::size_t r = 0; r < depth; ++r) {
      if (q.candidates[order[r]].grade >= relevant_grade_threshold) ++hits;
    }
    out.per_query.push_back(static_cast<double>(hits) / static_cast<double>(depth));
  }
  if (!out.per_query.empty()) {
    out.mean = std::accumulate(out.per_query.begin(), out.per_query.end(), 0.0) /
               static_cast<double>(out.per_query.size());
  }
  return out;
}

WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("paired samples must have equal length");
  std::vector<double> diffs;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double d = a[i] - b[i];
    if (d != 0.0) diffs.push_back(d);
  }
  const std::size_t n = diffs.size();
  if (n == 0) throw std::invalid_argument("all paired differences are zero");
  if (n < 6) {
    throw std::invalid_argument("need at least 6 nonzero differences, got " + std::to_string(n));
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    return std::fabs(diffs[x]) < std::fabs(diffs[y]);
  });

  std::vector<double> ranks(n, 0.0);
  double tie_correction = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && std::fabs(diffs[order[j]]) == std::fabs(diffs[order[i]])) ++j;
    double midrank = 0.5 * static_cast<double>(i + 1 + j);
    double t = static_cast<double>(j - i);
    tie_correction += t * t * t - t;
    for (std::size_t k = i; k < j; ++k) ranks[order[k]] = midrank;
    i = j;
  }

  double w_plus = 0.0, w_minus = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    if (diffs[k] > 0.0) {
      w_plus += ranks[k];
    } else {
      w_minus += ranks[k];
    }
  }
  double w = std::min(w_plus, w_minus);
  double nd = static_cast<double>(n);
  double mean = nd * (nd + 1.0) / 4.0;
  double var = nd * (nd + 1.0) * (2.0 * nd + 1.0) / 24.0 - tie_correction / 48.0;
  WilcoxonResult res;
  res.w = w;
  res.n = n;
  if (var <= 0.0) {
    res.p = 1.0;  // every difference tied at one magnitude and W at its mean
    return res;
  }
  double z = (w - mean + 0.5) / std::sqrt(var);  // continuity correction toward the mean
  double phi = 0.5 * std::erfc(-z / std::sqrt(2.0));
  res.p = std::min(1.0, 2.0 * phi);
  if (res.p <= 0.0) res.p = std::numeric_limits<double>::min();
  return res;
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json j;
  j["auc"] = auc;
  j["accuracy"] = accuracy;
  j["threshold"] = threshold;
  j["bias"] = bias;
  j["n"] = n;
  if (!buckets.empty()) {
    nlohmann::json jb = nlohmann::json::object();
    for (const auto& [name, stat] : buckets) {
      nlohmann::json je;
      je["n"] = stat.n;
      if (stat.auc_defined) {
        je["auc"] = stat.auc;
      } else {
        je["auc"] = nullptr;
      }
      jb[name] = je;
    }
    j["buckets"] = jb;
  }
  if (!ndcg.empty()) {
    nlohmann::json jn = nlohmann::json::object();
    for (const auto& [k, v] : ndcg) jn[std::to_string(k)] = v;
    j["ndcg"] = jn;
  }
  if (!precision.empty()) {
    nlohmann::json jp = nlohmann::json::object();
    for (const auto& [k, v] : precision) jp[std::to_string(k)] = v;
    j["precision"] = jp;
  }
  return j;
}

MetricsReport decompose_eval(const std::vector<EvalExample>& examples,
                             const std::unordered_map<std::string, std::size_t>& freq_table,
                             double threshold) {
  if (examples.empty()) throw std::invalid_argument("no examples to evaluate");
  std::vector<double> scores, labels;
  scores.reserve(examples.size());
  labels.reserve(examples.size());
  for (const auto& e : examples) {
    scores.push_back(e.score);
    labels.push_back(e.label);
  }

  MetricsReport report;
  report.n = examples.size();
  report.auc = auc(scores, labels);
  AccuracyResult acc = std::isnan(threshold) ? accuracy_maximized(scores, labels)
                                             : accuracy_at_threshold(scores, labels, threshold);
  report.accuracy = acc.accuracy;
  report.threshold = acc.threshold;
  report.bias = prediction_bias(scores, labels);

  auto bucket_of = [&](const EvalExample& e) -> std::string {
    auto it = freq_table.find(e.query_key);
    std::size_t count = it == freq_table.end() ? 0 : it->second;
    if (count > 20) return "head";
    if (count < 5) return "tail";
    return "torso";
  };

  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> groups;
  for (const char* name : {"head", "torso", "tail"}) groups[name];
  for (int p = 1; p <= 5; ++p) groups["position_" + std::to_string(p)];
  for (const auto& e : examples) {
    auto& freq_group = groups[bucket_of(e)];
    freq_group.first.push_back(e.score);
    freq_group.second.push_back(e.label);
    if (e.position >= 1 && e.position <= 5) {
      auto& pos_group = groups["position_" + std::to_string(e.position)];
      pos_group.first.push_back(e.score);
      pos_group.second.push_back(e.label);
    }
  }
  for (auto& [name, sl] : groups) {
    BucketStat stat;
    stat.n = sl.first.size();
    bool has_pos = false, has_neg = false;
    for (double l : sl.second) (l > 0.5 ? has_pos : has_neg) = true;
    if (has_pos && has_neg) {
      stat.auc_defined = true;
      stat.auc = auc(sl.first, sl.second);
    }
    report.buckets[name] = stat;
  }
  return report;
}

}  // namespace dsm::metrics
