#include "dsm/text.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "dsm/errors.hpp"
#include "dsm/log.hpp"
#include "dsm/rng.hpp"
#include "json.hpp"

namespace dsm::text {

std::vector<std::string> normalize_text(const std::string& raw) {
  std::vector<std::string> tokens;
  std::string cur;
  for (unsigned char ch : raw) {
    char c = static_cast<char>(ch);
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
    bool keep = (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9');
    if (keep) {
      cur.push_back(c);
    } else if (!cur.empty()) {
      tokens.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

Vocab build_vocab(const std::vector<std::vector<std::string>>& corpus, int min_count) {
  if (min_count < 1) throw ConfigError("vocab min_count must be >= 1");
  std::unordered_map<std::string, std::size_t> freq;
  for (const auto& doc : corpus) {
    for (const auto& tok : doc) ++freq[tok];
  }
  std::vector<std::pair<std::string, std::size_t>> kept;
  kept.reserve(freq.size());
  for (auto& [tok, count] : freq) {
    if (count >= static_cast<std::size_t>(min_count)) kept.emplace_back(tok, count);
  }
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Vocab v;
  v.min_count = min_count;
  v.id_to_token = {"<pad>", "<oov>"};
  for (auto& [tok, count] : kept) {
    v.token_to_id.emplace(tok, static_cast<int>(v.id_to_token.size()));
    v.id_to_token.push_back(tok);
  }
  v.sep_id = static_cast<int>(v.id_to_token.size());
  v.token_to_id.emplace(Vocab::kSepToken, v.sep_id);
  v.id_to_token.push_back(Vocab::kSepToken);
  return v;
}

Vocab build_vocab_from_cohorts(const std::vector<CohortRecord>& cohorts, int min_count) {
  std::vector<std::vector<std::string>> corpus;
  for (const auto& rec : cohorts) {
    corpus.push_back(normalize_text(rec.query_text));
    for (const auto& ad : rec.ads) {
      corpus.push_back(normalize_text(ad.title));
      corpus.push_back(normalize_text(ad.description));
      corpus.push_back(normalize_text(ad.display_url));
    }
  }
  return build_vocab(corpus, min_count);
}

Vocab vocab_from_tokens(const std::vector<std::string>& id_to_token, int min_count) {
  if (id_to_token.size() < 3 || id_to_token.back() != Vocab::kSepToken) {
    throw DataError("vocab token list must end with the separator token");
  }
  Vocab v;
  v.min_count = min_count;
  v.id_to_token = id_to_token;
  for (std::size_t i = 2; i < id_to_token.size(); ++i) {
    v.token_to_id.emplace(id_to_token[i], static_cast<int>(i));
  }
  v.sep_id = static_cast<int>(id_to_token.size()) - 1;
  return v;
}

namespace {

void fill_side(const std::vector<std::string>& tokens, const Vocab& vocab, std::size_t len,
               std::vector<int>& ids, ad::Mask& mask) {
  ids.assign(len, Vocab::kPad);
  mask.assign(len, 0);
  for (std::size_t i = 0; i < tokens.size() && i < len; ++i) {
    ids[i] = vocab.id(tokens[i]);
    mask[i] = 1;
  }
}

}  // namespace

EncodedPair encode_pair(const std::string& query_text, const AdImpression& ad,
                        const Vocab& vocab, std::size_t l_q, std::size_t l_a) {
  if (l_q < 1 || l_a < 1) throw ConfigError("sequence lengths must be >= 1");
  std::vector<std::string> q_tokens = normalize_text(query_text);

  std::vector<std::string> a_tokens = normalize_text(ad.title);
  a_tokens.push_back(Vocab::kSepToken);
  for (auto& t : normalize_text(ad.description)) a_tokens.push_back(std::move(t));
  a_tokens.push_back(Vocab::kSepToken);
  for (auto& t : normalize_text(ad.display_url)) a_tokens.push_back(std::move(t));

  EncodedPair pair;
  fill_side(q_tokens, vocab, l_q, pair.query_ids, pair.query_mask);
  fill_side(a_tokens, vocab, l_a, pair.ad_ids, pair.ad_mask);
  pair.exact_match.assign(l_q * l_a, 0);
  for (std::size_t i = 0; i < q_tokens.size() && i < l_q; ++i) {
    for (std::size_t j = 0; j < a_tokens.size() && j < l_a; ++j) {
      if (a_tokens[j] != Vocab::kSepToken && q_tokens[i] == a_tokens[j]) {
        pair.exact_match[i * l_a + j] = 1;
      }
    }
  }
  pair.label = ad.clicked ? 1 : 0;
  pair.position = ad.position;
  std::string key;
  for (std::size_t i = 0; i < q_tokens.size(); ++i) {
    if (i) key.push_back(' ');
    key += q_tokens[i];
  }
  pair.query_key = std::move(key);
  return pair;
}

namespace {

bool parse_cohort_line(const std::string& line, CohortRecord& out) {
  nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
  if (j.is_discarded() || !j.is_object()) return false;
  if (!j.contains("search_id") || !j["search_id"].is_string()) return false;
  if (!j.contains("query") || !j["query"].is_string()) return false;
  if (!j.contains("ads") || !j["ads"].is_array()) return false;
  const auto& ads = j["ads"];
  if (ads.empty() || ads.size() > 5) return false;

  CohortRecord rec;
  rec.search_id = j["search_id"].get<std::string>();
  rec.query_text = j["query"].get<std::string>();
  bool seen[6] = {false, false, false, false, false, false};
  for (const auto& aj : ads) {
    if (!aj.is_object()) return false;
    if (!aj.contains("position") || !aj["position"].is_number_integer()) return false;
    if (!aj.contains("title") || !aj["title"].is_string()) return false;
    if (!aj.contains("description") || !aj["description"].is_string()) return false;
    if (!aj.contains("display_url") || !aj["display_url"].is_string()) return false;
    if (!aj.contains("clicked") || !aj["clicked"].is_boolean()) return false;
    int pos = aj["position"].get<int>();
    if (pos < 1 || pos > 5 || seen[pos]) return false;
    seen[pos] = true;
    AdImpression ad;
    ad.position = pos;
    ad.title = aj["title"].get<std::string>();
    ad.description = aj["description"].get<std::string>();
    ad.display_url = aj["display_url"].get<std::string>();
    ad.clicked = aj["clicked"].get<bool>();
    rec.ads.push_back(std::move(ad));
  }
  out = std::move(rec);
  return true;
}

}  // namespace

CohortReadResult read_cohorts(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open cohort file: " + path);

  CohortReadResult result;
  std::string line;
  std::size_t line_no = 0;
  std::size_t first_bad = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    ++result.total_lines;
    CohortRecord rec;
    if (parse_cohort_line(line, rec)) {
      result.records.push_back(std::move(rec));
    } else {
      if (result.malformed == 0) first_bad = line_no;
      ++result.malformed;
    }
  }
  if (result.malformed > 0) {
    if (result.malformed * 10 > result.total_lines) {
      throw DataError("too many malformed lines in " + path + ": " +
                      std::to_string(result.malformed) + " of " +
                      std::to_string(result.total_lines) + ", first at line " +
                      std::to_string(first_bad));
    }
    log::warn("skipped " + std::to_string(result.malformed) + " of " +
              std::to_string(result.total_lines) + " malformed lines in " + path +
              ", first at line " + std::to_string(first_bad));
  }
  return result;
}

EmbeddingLoad load_pretrained_embeddings(const std::string& path, const Vocab& vocab,
                                         std::size_t dim, std::uint64_t seed,
                                         double init_stddev) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open embedding file: " + path);

  EmbeddingLoad out{ad::Tensor::zeros({vocab.size(), dim}), 0.0};
  Rng rng(mix_seed(seed, 0xe33bedULL));
  for (std::size_t row = 1; row < vocab.size(); ++row) {  // PAD row stays zero
    for (std::size_t c = 0; c < dim; ++c) {
      out.matrix.values[row * dim + c] = rng.truncated_normal(init_stddev);
    }
  }

  std::vector<bool> covered(vocab.size(), false);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string token;
    ss >> token;
    std::vector<double> vals;
    double v;
    while (ss >> v) vals.push_back(v);
    if (vals.size() != dim) {
      throw DataError("embedding file " + path + " line " + std::to_string(line_no) +
                      ": expected " + std::to_string(dim) + " values, got " +
                      std::to_string(vals.size()));
    }
    auto it = vocab.token_to_id.find(token);
    if (it == vocab.token_to_id.end()) continue;
    int id = it->second;
    if (id < 2 || id == vocab.sep_id) continue;
    std::copy(vals.begin(), vals.end(), &out.matrix.values[static_cast<std::size_t>(id) * dim]);
    covered[static_cast<std::size_t>(id)] = true;
  }
  std::size_t hits = 0;
  for (bool c : covered) hits += c ? 1 : 0;
  out.coverage = vocab.real_tokens() == 0
                     ? 0.0
                     : static_cast<double>(hits) / static_cast<double>(vocab.real_tokens());
  return out;
}

}  // namespace dsm::text
