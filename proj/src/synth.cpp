#include "dsm/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>

#include "dsm/errors.hpp"
#include "dsm/metrics.hpp"
#include "dsm/rng.hpp"

namespace dsm::synth {
namespace {

constexpr std::uint64_t kStructureStream = 0x5791;
constexpr std::uint64_t kClickStream = 0xc11c;

// Pronounceable, distinct, survives normalization unchanged.
std::string make_word(std::size_t index) {
  static const char kCons[] = "bdfghjklmnprstvwyz";  // 18
  static const char kVows[] = "aeiou";               // 5
  std::string word;
  std::size_t x = index;
  for (int s = 0; s < 3; ++s) {
    word += kCons[x % 18];
    x /= 18;
    word += kVows[x % 5];
    x /= 5;
  }
  if (x > 0) word += std::to_string(x);
  return word;
}

// Two-topic mixture, 0.8 primary and 0.2 secondary.
struct Mixture {
  std::size_t primary = 0;
  std::size_t secondary = 0;
};

double mixture_relevance(const Mixture& q, const Mixture& a) {
  double dot = 0.0;
  dot += 0.64 * (q.primary == a.primary);
  dot += 0.16 * (q.primary == a.secondary);
  dot += 0.16 * (q.secondary == a.primary);
  dot += 0.04 * (q.secondary == a.secondary);
  return dot / 0.68;  // both norms are sqrt(0.68)
}

Mixture sample_mixture(Rng& rng, std::size_t n_topics, std::size_t forced_primary,
                       bool use_forced) {
  Mixture m;
  m.primary = use_forced ? forced_primary : rng.uniform_int(n_topics);
  m.secondary = (m.primary + 1 + rng.uniform_int(n_topics - 1)) % n_topics;
  return m;
}

std::size_t sample_word(Rng& rng, std::size_t topic, const GeneratorConfig& c) {
  // Topics concentrate on a vocabulary region but leak 15% everywhere.
  if (rng.uniform() < 0.85) {
    const std::size_t region = c.vocab_size / c.n_topics;
    return topic * region + rng.uniform_int(region);
  }
  return rng.uniform_int(c.vocab_size);
}

std::string sample_text(Rng& rng, const Mixture& m, std::size_t min_words,
                        std::size_t max_words, const GeneratorConfig& c) {
  const std::size_t n = min_words + rng.uniform_int(max_words - min_words + 1);
  std::string out;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t topic = rng.uniform() < 0.8 ? m.primary : m.secondary;
    if (!out.empty()) out += ' ';
    out += make_word(sample_word(rng, topic, c));
  }
  return out;
}

std::string query_key_of(const std::string& raw) {
  std::string key;
  for (const auto& tok : text::normalize_text(raw)) {
    if (!key.empty()) key += ' ';
    key += tok;
  }
  return key;
}

double logit(double p) { return std::log(p / (1.0 - p)); }

std::string format_real(double v) {
  char buffer[40];
  std::snprintf(buffer, sizeof(buffer), "%.6f", v);
  return buffer;
}

}  // namespace

void GeneratorConfig::validate() const {
  if (n_topics < 2) throw ConfigError("n_topics must be >= 2");
  if (vocab_size < 2 * n_topics) {
    throw ConfigError("vocab_size too small for n_topics (need at least two words per topic)");
  }
  if (n_queries < 1) throw ConfigError("n_queries must be >= 1");
  if (ads_per_query < 5) throw ConfigError("ads_per_query must be >= 5 (searches serve up to 5)");
  if (n_searches < 1) throw ConfigError("n_searches must be >= 1");
  double prev = 1.0;
  for (double p : position_ctrs) {
    if (!(p > 0.0) || !(p < 1.0)) throw ConfigError("position_ctrs must lie in (0, 1)");
    if (!(p < prev)) throw ConfigError("position_ctrs must be strictly decreasing");
    prev = p;
  }
  if (!(relevance_weight >= 0.0) || !std::isfinite(relevance_weight)) {
    throw ConfigError("relevance_weight must be finite and nonnegative");
  }
  if (!(head_frac > 0.0) || !(torso_frac > 0.0) || head_frac + torso_frac >= 1.0) {
    throw ConfigError("head_frac and torso_frac must be positive and sum below 1");
  }
  if (!(head_weight > 0.0) || !(torso_weight > 0.0) || !(tail_weight > 0.0)) {
    throw ConfigError("bucket weights must be positive");
  }
  if (!(train_frac > 0.0) || !(valid_frac > 0.0) || train_frac + valid_frac >= 1.0) {
    throw ConfigError("train_frac and valid_frac must be positive and sum below 1");
  }
}

double bayes_auc_bound(const std::vector<double>& true_p, const std::vector<int>& clicked) {
  std::vector<double> labels(clicked.size());
  for (std::size_t i = 0; i < clicked.size(); ++i) labels[i] = clicked[i] ? 1.0 : 0.0;
  return metrics::auc(true_p, labels);
}

GeneratedCorpus generate_corpus(const GeneratorConfig& config) {
  config.validate();
  Rng rng(mix_seed(config.seed, kStructureStream));

  struct Query {
    Mixture mixture;
    std::string text;
    std::string key;
    double weight = 1.0;
  };
  struct Ad {
    std::string id;
    text::AdImpression fields;  // clicked unused here
    double relevance = 0.0;     // to its owner query
  };

  std::vector<Query> queries(config.n_queries);
  const auto head_n = static_cast<std::size_t>(std::llround(
      config.head_frac * static_cast<double>(config.n_queries)));
  const auto torso_n = static_cast<std::size_t>(std::llround(
      config.torso_frac * static_cast<double>(config.n_queries)));
  for (std::size_t qi = 0; qi < config.n_queries; ++qi) {
    Query& q = queries[qi];
    q.mixture = sample_mixture(rng, config.n_topics, 0, false);
    q.text = sample_text(rng, q.mixture, 2, 4, config);
    q.key = query_key_of(q.text);
    q.weight = qi < head_n                ? config.head_weight
               : qi < head_n + torso_n    ? config.torso_weight
                                          : config.tail_weight;
  }

  std::vector<std::vector<Ad>> pools(config.n_queries);
  std::size_t ad_counter = 0;
  for (std::size_t qi = 0; qi < config.n_queries; ++qi) {
    pools[qi].reserve(config.ads_per_query);
    for (std::size_t j = 0; j < config.ads_per_query; ++j) {
      Ad ad;
      const bool same_topic = rng.uniform() < 0.5;
      Mixture m = sample_mixture(rng, config.n_topics, queries[qi].mixture.primary, same_topic);
      ad.id = "ad" + std::to_string(ad_counter++);
      ad.fields.title = sample_text(rng, m, 3, 6, config);
      ad.fields.description = sample_text(rng, m, 6, 12, config);
      ad.fields.display_url = "www." + ad.id + ".example.com";
      ad.relevance = mixture_relevance(queries[qi].mixture, m);
      pools[qi].push_back(std::move(ad));
    }
  }

  GeneratedCorpus corpus;

  // Relevance grades by quantile over every (query, pool ad) pair.
  std::vector<double> all_relevance;
  all_relevance.reserve(config.n_queries * config.ads_per_query);
  for (const auto& pool : pools) {
    for (const auto& ad : pool) all_relevance.push_back(ad.relevance);
  }
  std::vector<double> sorted_relevance = all_relevance;
  std::sort(sorted_relevance.begin(), sorted_relevance.end());
  std::array<double, 5> boundaries{};
  for (std::size_t g = 1; g <= 5; ++g) {
    boundaries[g - 1] =
        sorted_relevance[std::min(sorted_relevance.size() - 1, g * sorted_relevance.size() / 6)];
  }
  auto grade_of = [&boundaries](double r) {
    int grade = 0;
    for (double b : boundaries) grade += r >= b;
    return grade;
  };
  corpus.ground_truth.reserve(all_relevance.size());
  std::vector<std::vector<int>> grades(config.n_queries);
  for (std::size_t qi = 0; qi < config.n_queries; ++qi) {
    grades[qi].reserve(config.ads_per_query);
    for (const auto& ad : pools[qi]) {
      const int g = grade_of(ad.relevance);
      grades[qi].push_back(g);
      corpus.ground_truth.push_back({queries[qi].key, ad.id, ad.relevance, g});
    }
  }

  // Searches: weighted query pick, 1..5 distinct pool ads in random order.
  std::vector<double> cumulative(config.n_queries);
  double total_weight = 0.0;
  for (std::size_t qi = 0; qi < config.n_queries; ++qi) {
    total_weight += queries[qi].weight;
    cumulative[qi] = total_weight;
  }
  struct Search {
    std::size_t query = 0;
    std::vector<std::size_t> ads;  // pool indices, position = slot + 1
  };
  std::vector<Search> searches(config.n_searches);
  double relevance_sum = 0.0;
  std::size_t impressions = 0;
  for (auto& search : searches) {
    const double pick = rng.uniform() * total_weight;
    search.query = static_cast<std::size_t>(
        std::lower_bound(cumulative.begin(), cumulative.end(), pick) - cumulative.begin());
    if (search.query >= config.n_queries) search.query = config.n_queries - 1;
    const std::size_t k = 1 + rng.uniform_int(5);
    std::vector<std::size_t> pool_order(config.ads_per_query);
    for (std::size_t i = 0; i < pool_order.size(); ++i) pool_order[i] = i;
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t j = i + rng.uniform_int(pool_order.size() - i);
      std::swap(pool_order[i], pool_order[j]);
    }
    search.ads.assign(pool_order.begin(), pool_order.begin() + static_cast<std::ptrdiff_t>(k));
    for (std::size_t ai : search.ads) {
      relevance_sum += pools[search.query][ai].relevance;
      ++impressions;
    }
  }
  corpus.mean_relevance = impressions == 0 ? 0.0 : relevance_sum / static_cast<double>(impressions);

  // Clicks come from an independent stream so the two passes stay decoupled.
  Rng click_rng(mix_seed(config.seed, kClickStream));
  const std::size_t n_train = static_cast<std::size_t>(
      config.train_frac * static_cast<double>(config.n_searches));
  const std::size_t n_valid = static_cast<std::size_t>(
      config.valid_frac * static_cast<double>(config.n_searches));
  std::array<std::size_t, 5> position_clicks{};
  std::vector<char> seen_test_query(config.n_queries, 0);
  double test_p_sum = 0.0;
  std::size_t test_clicks = 0;

  for (std::size_t si = 0; si < searches.size(); ++si) {
    const Search& search = searches[si];
    const Query& q = queries[search.query];
    const bool in_train = si < n_train;
    const bool in_valid = !in_train && si < n_train + n_valid;
    const bool in_test = !in_train && !in_valid;

    text::CohortRecord rec;
    rec.search_id = "s" + std::to_string(si);
    rec.query_text = q.text;
    for (std::size_t slot = 0; slot < search.ads.size(); ++slot) {
      const Ad& ad = pools[search.query][search.ads[slot]];
      const int position = static_cast<int>(slot + 1);
      const double p = 1.0 / (1.0 + std::exp(-(logit(config.position_ctrs[slot]) +
                                               config.relevance_weight *
                                                   (ad.relevance - corpus.mean_relevance))));
      const bool clicked = click_rng.bernoulli(p);
      text::AdImpression imp = ad.fields;
      imp.position = position;
      imp.clicked = clicked;
      rec.ads.push_back(std::move(imp));
      ++corpus.position_impressions[slot];
      position_clicks[slot] += clicked;
      if (in_test) {
        corpus.test_truth.push_back({rec.search_id, position, p, clicked ? 1 : 0});
        test_p_sum += p;
        test_clicks += clicked;
      }
    }
    if (in_train) {
      ++corpus.train_query_counts[q.key];
      corpus.train.push_back(std::move(rec));
    } else if (in_valid) {
      corpus.valid.push_back(std::move(rec));
    } else {
      corpus.test.push_back(std::move(rec));
      if (!seen_test_query[search.query]) {
        seen_test_query[search.query] = 1;
        GradedQuery gq;
        gq.query = q.text;
        for (std::size_t j = 0; j < pools[search.query].size(); ++j) {
          const Ad& ad = pools[search.query][j];
          gq.candidates.push_back({ad.id, ad.fields, ad.relevance, grades[search.query][j]});
        }
        corpus.graded.push_back(std::move(gq));
      }
    }
  }

  for (std::size_t slot = 0; slot < 5; ++slot) {
    corpus.position_ctr_empirical[slot] =
        corpus.position_impressions[slot] == 0
            ? 0.0
            : static_cast<double>(position_clicks[slot]) /
                  static_cast<double>(corpus.position_impressions[slot]);
  }
  corpus.bias_true = test_clicks == 0 ? 0.0 : test_p_sum / static_cast<double>(test_clicks);
  if (!corpus.test_truth.empty()) {
    std::vector<double> p(corpus.test_truth.size());
    std::vector<int> y(corpus.test_truth.size());
    for (std::size_t i = 0; i < corpus.test_truth.size(); ++i) {
      p[i] = corpus.test_truth[i].true_p;
      y[i] = corpus.test_truth[i].clicked;
    }
    try {
      corpus.bayes_auc = bayes_auc_bound(p, y);
    } catch (const std::invalid_argument&) {
      corpus.bayes_auc = std::numeric_limits<double>::quiet_NaN();
    }
  }
  return corpus;
}

namespace {

nlohmann::json cohort_to_json(const text::CohortRecord& rec) {
  nlohmann::json ads = nlohmann::json::array();
  for (const auto& ad : rec.ads) {
    ads.push_back({{"position", ad.position},
                   {"title", ad.title},
                   {"description", ad.description},
                   {"display_url", ad.display_url},
                   {"clicked", ad.clicked}});
  }
  return {{"search_id", rec.search_id}, {"query", rec.query_text}, {"ads", ads}};
}

void write_jsonl(const std::string& path, const std::vector<text::CohortRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  for (const auto& rec : records) out << cohort_to_json(rec).dump() << '\n';
}

}  // namespace

nlohmann::json write_corpus(const GeneratedCorpus& corpus, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  const std::filesystem::path dir(out_dir);
  write_jsonl((dir / "train.jsonl").string(), corpus.train);
  write_jsonl((dir / "valid.jsonl").string(), corpus.valid);
  write_jsonl((dir / "test.jsonl").string(), corpus.test);

  {
    std::ofstream out(dir / "ground_truth.tsv", std::ios::binary);
    if (!out) throw DataError("cannot write ground_truth.tsv");
    for (const auto& row : corpus.ground_truth) {
      out << row.query << '\t' << row.ad_id << '\t' << format_real(row.relevance) << '\t'
          << row.grade << '\n';
    }
  }
  {
    std::ofstream out(dir / "graded.jsonl", std::ios::binary);
    if (!out) throw DataError("cannot write graded.jsonl");
    for (const auto& gq : corpus.graded) {
      nlohmann::json candidates = nlohmann::json::array();
      for (const auto& c : gq.candidates) {
        candidates.push_back({{"ad_id", c.ad_id},
                              {"title", c.ad.title},
                              {"description", c.ad.description},
                              {"display_url", c.ad.display_url},
                              {"relevance", c.relevance},
                              {"grade", c.grade}});
      }
      out << nlohmann::json{{"query", gq.query}, {"candidates", candidates}}.dump() << '\n';
    }
  }
  {
    std::ofstream out(dir / "freq_table.tsv", std::ios::binary);
    if (!out) throw DataError("cannot write freq_table.tsv");
    std::vector<std::pair<std::string, std::size_t>> rows(corpus.train_query_counts.begin(),
                                                          corpus.train_query_counts.end());
    std::sort(rows.begin(), rows.end());
    for (const auto& [key, count] : rows) out << key << '\t' << count << '\n';
  }
  {
    std::ofstream out(dir / "test_truth.tsv", std::ios::binary);
    if (!out) throw DataError("cannot write test_truth.tsv");
    for (const auto& row : corpus.test_truth) {
      out << row.search_id << '\t' << row.position << '\t' << format_real(row.true_p) << '\t'
          << row.clicked << '\n';
    }
  }

  nlohmann::json summary = {
      {"n_train_searches", corpus.train.size()},
      {"n_valid_searches", corpus.valid.size()},
      {"n_test_searches", corpus.test.size()},
      {"n_test_impressions", corpus.test_truth.size()},
      {"n_graded_queries", corpus.graded.size()},
      {"mean_relevance", corpus.mean_relevance},
      {"bias_true", corpus.bias_true},
      {"position_ctr", corpus.position_ctr_empirical},
      {"position_impressions", corpus.position_impressions},
  };
  summary["bayes_auc_bound"] =
      std::isfinite(corpus.bayes_auc) ? nlohmann::json(corpus.bayes_auc) : nlohmann::json();
  {
    std::ofstream out(dir / "summary.json", std::ios::binary);
    if (!out) throw DataError("cannot write summary.json");
    out << summary.dump(2) << '\n';
  }
  return summary;
}

std::vector<GradedQuery> read_graded(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open graded file: " + path);
  std::vector<GradedQuery> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    try {
      if (j.is_discarded()) throw DataError("");
      GradedQuery gq;
      gq.query = j.at("query").get<std::string>();
      for (const auto& cj : j.at("candidates")) {
        GradedCandidate c;
        c.ad_id = cj.at("ad_id").get<std::string>();
        c.ad.title = cj.at("title").get<std::string>();
        c.ad.description = cj.at("description").get<std::string>();
        c.ad.display_url = cj.at("display_url").get<std::string>();
        c.relevance = cj.at("relevance").get<double>();
        c.grade = cj.at("grade").get<int>();
        if (c.grade < 0 || c.grade > 5) throw DataError("");
        gq.candidates.push_back(std::move(c));
      }
      out.push_back(std::move(gq));
    } catch (const std::exception&) {
      throw DataError("malformed graded line " + std::to_string(line_no) + " in " + path);
    }
  }
  return out;
}

std::unordered_map<std::string, std::size_t> read_freq_table(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open frequency table: " + path);
  std::unordered_map<std::string, std::size_t> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::size_t tab = line.find('\t');
    if (tab == std::string::npos) {
      throw DataError("malformed frequency table line " + std::to_string(line_no) + " in " + path);
    }
    try {
      out[line.substr(0, tab)] = std::stoull(line.substr(tab + 1));
    } catch (const std::exception&) {
      throw DataError("malformed frequency table line " + std::to_string(line_no) + " in " + path);
    }
  }
  return out;
}

std::vector<TestTruthRow> read_test_truth(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open truth file: " + path);
  std::vector<TestTruthRow> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    TestTruthRow row;
    std::size_t a = line.find('\t');
    std::size_t b = a == std::string::npos ? a : line.find('\t', a + 1);
    std::size_t c = b == std::string::npos ? b : line.find('\t', b + 1);
    if (c == std::string::npos) {
      throw DataError("malformed truth line " + std::to_string(line_no) + " in " + path);
    }
    try {
      row.search_id = line.substr(0, a);
      row.position = std::stoi(line.substr(a + 1, b - a - 1));
      row.true_p = std::stod(line.substr(b + 1, c - b - 1));
      row.clicked = std::stoi(line.substr(c + 1));
    } catch (const std::exception&) {
      throw DataError("malformed truth line " + std::to_string(line_no) + " in " + path);
    }
    out.push_back(std::move(row));
  }
  return out;
}

}  // namespace dsm::synth
