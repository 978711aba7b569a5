#include <algorithm>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "dsm/errors.hpp"
#include "dsm/network.hpp"
#include "dsm/rng.hpp"
#include "dsm/train.hpp"

using namespace dsm;
using namespace dsm::net;

namespace {

text::Vocab micro_vocab() {
  return text::vocab_from_tokens(
      {"<pad>", "<oov>", "q0", "q1", "q2", "a0", "a1", "a2", "a3", "a4", "rare", "<sep>"}, 1);
}

}  // namespace

TEST_CASE("network config validation") {
  NetworkConfig c = NetworkConfig::micro();
  CHECK_NOTHROW(c.validate());
  c.d3_q = 5;  // bidirectional halves must be even
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = NetworkConfig::micro();
  c.l_q = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("network config json round trip rejects unknown keys") {
  NetworkConfig c = NetworkConfig::micro();
  nlohmann::json j = config_to_json(c);
  NetworkConfig back = config_from_json(j);
  CHECK(back.d1 == c.d1);
  CHECK(back.d3_a == c.d3_a);
  CHECK(back.kernel_sizes == c.kernel_sizes);
  CHECK(back.l_a == c.l_a);

  j["d9"] = 4;
  CHECK_THROWS_AS(config_from_json(j), ConfigError);

  nlohmann::json bad = config_to_json(c);
  bad["kernel_sizes"] = {{3, 3}};  // must be exactly three
  CHECK_THROWS_AS(config_from_json(bad), ConfigError);
}

TEST_CASE("make_params shapes follow the config") {
  NetworkConfig c = NetworkConfig::micro();
  ModelParams p = make_params(c, 12);
  CHECK(p.embedding.shape == ad::Shape{12, c.d1});
  CHECK(p.proj_w.shape == ad::Shape{c.d1, c.d2});
  // recurrent cell: input d2 + hidden half, four gates
  CHECK(p.q_lstm_fw_w.shape == ad::Shape{c.d2 + c.d3_q / 2, 4 * (c.d3_q / 2)});
  CHECK(p.a_word_w.shape == ad::Shape{c.d3_a, c.d4});
  CHECK(p.q_att_w1.shape == ad::Shape{c.d4, c.d_att});
  CHECK(p.q_att_w2.shape == ad::Shape{c.d_att, 1});
  CHECK(p.conv1x1_k.shape[2] == 3 * c.conv_filters_stage1);
  CHECK(p.out_w.shape == ad::Shape{c.conv_filters_final});
  CHECK(p.out_b.shape == ad::Shape{1});
  CHECK(p.named().size() == 33);
  for (auto& [name, t] : p.named()) {
    CHECK(t->requires_grad);
    CHECK_FALSE(name.empty());
  }
}

TEST_CASE("attention weights sum to one and are zero at masked positions") {
  NetworkConfig c = NetworkConfig::micro();
  Rng rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    std::size_t len = 2 + rng.uniform_int(6);
    ad::Tensor words = ad::Tensor::zeros({len, c.d4}, true);
    for (double& v : words.values) v = rng.normal();
    ad::Mask mask(len, 0);
    std::size_t unmasked = 1 + rng.uniform_int(len);
    for (std::size_t i = 0; i < unmasked; ++i) mask[i] = 1;

    ad::Tensor w1 = ad::Tensor::zeros({c.d4, c.d_att}, true);
    ad::Tensor b1 = ad::Tensor::zeros({c.d_att}, true);
    ad::Tensor w2 = ad::Tensor::zeros({c.d_att, 1}, true);
    ad::Tensor b2 = ad::Tensor::zeros({1}, true);
    for (double& v : w1.values) v = rng.normal() * 0.5;
    for (double& v : w2.values) v = rng.normal() * 0.5;

    ad::Tape tape;
    AttentionNodes att = attention_pool(tape, tape.leaf(words), mask, w1, b1, w2, b2);
    const std::vector<double>& weights = tape.value(att.weights).values;
    double sum = 0.0;
    for (std::size_t i = 0; i < len; ++i) {
      if (mask[i]) {
        sum += weights[i];
        CHECK(weights[i] >= 0.0);
      } else {
        CHECK(weights[i] == 0.0);  // exactly zero, not merely small
      }
    }
    CHECK(std::fabs(sum - 1.0) <= 1e-6);
  }
}

TEST_CASE("attention pooling special cases") {
  NetworkConfig c = NetworkConfig::micro();
  ad::Tensor w1 = ad::Tensor::full({c.d4, c.d_att}, 0.3, true);
  ad::Tensor b1 = ad::Tensor::zeros({c.d_att}, true);
  ad::Tensor w2 = ad::Tensor::full({c.d_att, 1}, -0.2, true);
  ad::Tensor b2 = ad::Tensor::zeros({1}, true);

  // identical word vectors: uniform weights, h equals the common vector
  ad::Tensor words = ad::Tensor::zeros({3, c.d4}, true);
  for (std::size_t j = 0; j < c.d4; ++j) {
    for (std::size_t i = 0; i < 3; ++i) words.at2(i, j) = 0.1 * static_cast<double>(j + 1);
  }
  ad::Tape tape;
  AttentionNodes att = attention_pool(tape, tape.leaf(words), {1, 1, 1}, w1, b1, w2, b2);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(tape.value(att.weights).values[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  }
  for (std::size_t j = 0; j < c.d4; ++j) {
    CHECK(tape.value(att.h).values[j] ==
          doctest::Approx(0.1 * static_cast<double>(j + 1)).epsilon(1e-12));
  }

  // single unmasked word: weight 1, h equals that vector
  ad::Tape tape2;
  AttentionNodes one = attention_pool(tape2, tape2.leaf(words), {0, 1, 0}, w1, b1, w2, b2);
  CHECK(tape2.value(one.weights).values[1] == doctest::Approx(1.0));
  CHECK(tape2.value(one.weights).values[0] == 0.0);

  // all-masked input is an error
  ad::Tape tape3;
  CHECK_THROWS_WITH_AS(attention_pool(tape3, tape3.leaf(words), {0, 0, 0}, w1, b1, w2, b2),
                       doctest::Contains("empty attention support"), std::invalid_argument);
}

TEST_CASE("attention weights match a hand-evaluated two-layer scorer") {
  // d4=2, d_att=2, 3 words; tanh hidden, linear score, softmax
  ad::Tensor words({3, 2}, {1.0, 0.0, 0.0, 1.0, 0.5, 0.5}, true);
  ad::Tensor w1({2, 2}, {0.4, -0.3, 0.2, 0.6}, true);
  ad::Tensor b1({2}, {0.1, -0.1}, true);
  ad::Tensor w2({2, 1}, {0.7, -0.5}, true);
  ad::Tensor b2({1}, {0.2}, true);

  std::vector<double> scores(3);
  for (std::size_t i = 0; i < 3; ++i) {
    double h0 = std::tanh(words.at2(i, 0) * 0.4 + words.at2(i, 1) * 0.2 + 0.1);
    double h1 = std::tanh(words.at2(i, 0) * -0.3 + words.at2(i, 1) * 0.6 - 0.1);
    scores[i] = h0 * 0.7 + h1 * -0.5 + 0.2;
  }
  double mx = std::max({scores[0], scores[1], scores[2]});
  double z = 0.0;
  for (double s : scores) z += std::exp(s - mx);

  ad::Tape tape;
  AttentionNodes att = attention_pool(tape, tape.leaf(words), {1, 1, 1}, w1, b1, w2, b2);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(tape.value(att.weights).values[i] ==
          doctest::Approx(std::exp(scores[i] - mx) / z).epsilon(1e-12));
  }
}

TEST_CASE("micro forward produces probabilities and normalized attention") {
  NetworkConfig c = NetworkConfig::micro();
  text::Vocab vocab = micro_vocab();
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    net::ModelParams params = train::init_params(c, vocab.size(), seed, 0.1);
    text::AdImpression ad{1, "a0 q0", "a1 a2 rare", "a3.com", true};
    text::EncodedPair pair = text::encode_pair("q0 q1", ad, vocab, c.l_q, c.l_a);
    std::vector<ForwardOutput> out = dsm_forward({pair}, params, c);
    REQUIRE(out.size() == 1);
    CHECK(out[0].y_hat > 0.0);
    CHECK(out[0].y_hat < 1.0);
    CHECK(out[0].y_hat == doctest::Approx(1.0 / (1.0 + std::exp(-out[0].logit))).epsilon(1e-12));
    double tq = 0.0, ta = 0.0;
    for (double w : out[0].t_q) tq += w;
    for (double w : out[0].t_a) ta += w;
    CHECK(tq == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(ta == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(out[0].h_q.size() == c.d4);
    CHECK(out[0].h_a.size() == c.d4);
  }
}

TEST_CASE("forward outputs are independent across pairs in a batch") {
  NetworkConfig c = NetworkConfig::micro();
  text::Vocab vocab = micro_vocab();
  net::ModelParams params = train::init_params(c, vocab.size(), 3, 0.1);
  text::AdImpression ad1{1, "a0", "a1", "a2.com", true};
  text::AdImpression ad2{2, "a3 a4", "rare", "q0.com", false};
  text::EncodedPair p1 = text::encode_pair("q0", ad1, vocab, c.l_q, c.l_a);
  text::EncodedPair p2 = text::encode_pair("q1 q2", ad2, vocab, c.l_q, c.l_a);

  std::vector<ForwardOutput> together = dsm_forward({p1, p2}, params, c);
  std::vector<ForwardOutput> alone1 = dsm_forward({p1}, params, c);
  std::vector<ForwardOutput> alone2 = dsm_forward({p2}, params, c);
  CHECK(together[0].y_hat == alone1[0].y_hat);
  CHECK(together[1].y_hat == alone2[0].y_hat);
}

TEST_CASE("exact match channel changes the prediction") {
  NetworkConfig c = NetworkConfig::micro();
  text::Vocab vocab = micro_vocab();
  net::ModelParams params = train::init_params(c, vocab.size(), 4, 0.1);
  text::AdImpression ad{1, "q0 a0", "a1", "a2.com", false};
  text::EncodedPair with = text::encode_pair("q0", ad, vocab, c.l_q, c.l_a);
  text::EncodedPair without = with;
  std::fill(without.exact_match.begin(), without.exact_match.end(), 0);
  double a = dsm_forward({with}, params, c)[0].y_hat;
  double b = dsm_forward({without}, params, c)[0].y_hat;
  CHECK(a != b);
}

TEST_CASE("masked positions are inert regardless of their token ids") {
  NetworkConfig c = NetworkConfig::micro();
  text::Vocab vocab = micro_vocab();
  net::ModelParams params = train::init_params(c, vocab.size(), 5, 0.1);
  text::AdImpression ad{1, "a0", "a1", "", false};
  text::EncodedPair clean = text::encode_pair("q0 q1", ad, vocab, c.l_q, c.l_a);
  text::EncodedPair dirty = clean;
  // plant garbage ids wherever the mask is off; the model must never see them
  for (std::size_t i = 0; i < dirty.query_ids.size(); ++i) {
    if (!dirty.query_mask[i]) dirty.query_ids[i] = vocab.id("rare");
  }
  for (std::size_t i = 0; i < dirty.ad_ids.size(); ++i) {
    if (!dirty.ad_mask[i]) dirty.ad_ids[i] = vocab.id("a4");
  }
  double y1 = dsm_forward({clean}, params, c)[0].y_hat;
  double y2 = dsm_forward({dirty}, params, c)[0].y_hat;
  CHECK(y1 == y2);
}
