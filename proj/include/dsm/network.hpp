#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dsm/tape.hpp"
#include "dsm/tensor.hpp"
#include "dsm/text.hpp"
#include "json.hpp"

namespace dsm::net {

struct NetworkConfig {
  std::size_t d1 = 300;    // embedding width
  std::size_t d2 = 40;     // shared projection width
  std::size_t d3_q = 30;   // query recurrent output, both directions combined
  std::size_t d3_a = 140;  // ad recurrent output, both directions combined
  std::size_t d4 = 50;     // matched word width
  std::size_t d_att = 32;  // attention hidden width
  std::size_t conv_filters_stage1 = 6;
  std::size_t conv_filters_final = 20;
  std::array<std::pair<std::size_t, std::size_t>, 3> kernel_sizes{{{3, 3}, {3, 4}, {3, 5}}};
  std::size_t l_q = 10;
  std::size_t l_a = 50;

  void validate() const;  // throws ConfigError

  // Small preset used by the gradient-fidelity check.
  static NetworkConfig micro();
};

// Round-trip serialization; used by checkpoints and run configs. Parsing
// rejects unknown keys and re-validates.
nlohmann::json config_to_json(const NetworkConfig& config);
NetworkConfig config_from_json(const nlohmann::json& j);

struct ModelParams {
  ad::Tensor embedding;  // |V| x d1, row 0 (PAD) all zeros
  ad::Tensor proj_w, proj_b;
  ad::Tensor q_lstm_fw_w, q_lstm_fw_b, q_lstm_bw_w, q_lstm_bw_b;
  ad::Tensor a_lstm_fw_w, a_lstm_fw_b, a_lstm_bw_w, a_lstm_bw_b;
  ad::Tensor q_word_w, q_word_b;  // d3_q x d4
  ad::Tensor a_word_w, a_word_b;  // d3_a x d4
  ad::Tensor q_att_w1, q_att_b1, q_att_w2, q_att_b2;
  ad::Tensor a_att_w1, a_att_b1, a_att_w2, a_att_b2;
  std::array<ad::Tensor, 3> conv_k;
  std::array<ad::Tensor, 3> conv_b;
  ad::Tensor conv1x1_k, conv1x1_b;
  ad::Tensor out_w, out_b;  // final filters -> logit

  // Stable name order; drives checkpoints, Adam slots and gradient checks.
  std::vector<std::pair<std::string, ad::Tensor*>> named();
  std::vector<std::pair<std::string, const ad::Tensor*>> named() const;
};

// Allocates every tensor for the given sizes with requires_grad set; values
// are zero (initialization lives in the training module).
ModelParams make_params(const NetworkConfig& config, std::size_t vocab_size);

// Handles into one recorded forward pass for a single text side.
struct SideNodes {
  ad::NodeId words;    // len x d4 word vectors, masked rows zero
  ad::NodeId weights;  // attention weights, len
  ad::NodeId h;        // pooled vector, d4
};

// Handles for one query-ad pair.
struct PairNodes {
  SideNodes query;
  SideNodes ad;
  ad::NodeId logit;
  ad::NodeId y_hat;
};

// embedding lookup -> shared projection; masked rows forced to zero.
ad::NodeId embed_and_project(ad::Tape& tape, const std::vector<int>& ids, const ad::Mask& mask,
                             ModelParams& params);

// Forward and backward recurrent passes over the unmasked prefix, each
// producing out_dim/2 features per word, concatenated per word.
ad::NodeId birnn_encode(ad::Tape& tape, ad::NodeId words, const ad::Mask& mask,
                        ad::Tensor& fw_w, ad::Tensor& fw_b, ad::Tensor& bw_w, ad::Tensor& bw_b,
                        std::size_t out_dim);

// Two-layer scoring net (tanh hidden) + masked softmax + weighted sum.
struct AttentionNodes {
  ad::NodeId weights;
  ad::NodeId h;
};
AttentionNodes attention_pool(ad::Tape& tape, ad::NodeId words, const ad::Mask& mask,
                              ad::Tensor& w1, ad::Tensor& b1, ad::Tensor& w2, ad::Tensor& b2);

// Full encoder for one side: embed/project -> bi-recurrent -> word projection
// to d4 -> attention pooling.
SideNodes encode_side(ad::Tape& tape, const std::vector<int>& ids, const ad::Mask& mask,
                      ModelParams& params, const NetworkConfig& config, bool is_query);

// Match tensor -> three same-padded conv blocks -> ReLU -> channel concat ->
// 1x1 conv -> ReLU -> global max pool -> linear logit.
ad::NodeId predict_head(ad::Tape& tape, ad::NodeId match, ModelParams& params,
                        const NetworkConfig& config);

PairNodes forward_pair(ad::Tape& tape, const text::EncodedPair& pair, ModelParams& params,
                       const NetworkConfig& config);

// Pairs a pre-encoded query side with an ad side (query encodings are shared
// across the ads of one search).
PairNodes forward_with_sides(ad::Tape& tape, const SideNodes& query, const SideNodes& ad_side,
                             const ad::Mask& exact_match, ModelParams& params,
                             const NetworkConfig& config);

struct ForwardOutput {
  double y_hat = 0.0;
  double logit = 0.0;
  std::vector<double> h_q, h_a;
  std::vector<double> t_q, t_a;
};

// Eager evaluation; records and discards a private tape per pair.
std::vector<ForwardOutput> dsm_forward(const std::vector<text::EncodedPair>& batch,
                                       ModelParams& params, const NetworkConfig& config);

}  // namespace dsm::net
