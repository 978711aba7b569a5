#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "dsm/tape.hpp"
#include "dsm/tensor.hpp"

namespace dsm::text {

// Lowercases ASCII letters, turns every other non-alphanumeric byte into a
// space (covering punctuation, URL delimiters and non-ASCII bytes alike), and
// splits on whitespace. Idempotent over its own output.
std::vector<std::string> normalize_text(const std::string& raw);

struct Vocab {
  static constexpr int kPad = 0;
  static constexpr int kOov = 1;
  // The ad-field separator; normalized text can never produce it because "<"
  // and ">" are stripped.
  static constexpr const char* kSepToken = "<sep>";

  std::unordered_map<std::string, int> token_to_id;
  std::vector<std::string> id_to_token;  // index == id
  int sep_id = 0;
  int min_count = 1;

  int id(const std::string& token) const {
    auto it = token_to_id.find(token);
    return it == token_to_id.end() ? kOov : it->second;
  }
  std::size_t size() const { return id_to_token.size(); }
  // Tokens excluding PAD/OOV/<sep>.
  std::size_t real_tokens() const { return size() - 3; }
};

// Ids: PAD=0, OOV=1, then tokens with frequency >= min_count in descending
// frequency (ties broken lexicographically), then the separator token.
Vocab build_vocab(const std::vector<std::vector<std::string>>& corpus, int min_count);

struct AdImpression;
struct CohortRecord;

// Vocabulary over every query, title, description and url of a cohort log.
Vocab build_vocab_from_cohorts(const std::vector<CohortRecord>& cohorts, int min_count);
// Rebuilds a vocab from its id->token list (checkpoint restore path).
Vocab vocab_from_tokens(const std::vector<std::string>& id_to_token, int min_count);

struct AdImpression {
  int position = 1;  // north slot 1..5
  std::string title;
  std::string description;
  std::string display_url;
  bool clicked = false;
};

struct CohortRecord {
  std::string search_id;
  std::string query_text;
  std::vector<AdImpression> ads;
};

struct EncodedPair {
  std::vector<int> query_ids;  // length l_q
  std::vector<int> ad_ids;     // length l_a
  ad::Mask query_mask;
  ad::Mask ad_mask;
  ad::Mask exact_match;  // l_q * l_a, row-major over (query pos, ad pos)
  int label = 0;
  int position = 1;
  std::string query_key;  // normalized query string, for frequency bucketing
};

// Ad token stream is title + <sep> + description + <sep> + url tokens. The
// exact-match matrix compares normalized token strings before OOV mapping, so
// two distinct rare words never match just because both fall out of vocab.
EncodedPair encode_pair(const std::string& query_text, const AdImpression& ad,
                        const Vocab& vocab, std::size_t l_q, std::size_t l_a);

struct CohortReadResult {
  std::vector<CohortRecord> records;
  std::size_t malformed = 0;
  std::size_t total_lines = 0;
};

// JSONL, one search per line. Malformed lines are skipped and counted; more
// than 10% malformed or an unreadable file throws DataError.
CohortReadResult read_cohorts(const std::string& path);

struct EmbeddingLoad {
  ad::Tensor matrix;  // |vocab| x dim
  double coverage;    // fraction of real tokens found in the file
};

// Text file, one `token v1 .. vdim` per line. Tokens absent from the file
// (plus OOV and <sep>) get truncated-normal rows; the PAD row stays zero to
// preserve the padding invariant. Wrong value count on a line throws
// DataError with its line number.
EmbeddingLoad load_pretrained_embeddings(const std::string& path, const Vocab& vocab,
                                         std::size_t dim, std::uint64_t seed,
                                         double init_stddev);

}  // namespace dsm::text
