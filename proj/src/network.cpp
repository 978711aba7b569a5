#include "dsm/network.hpp"

#include "dsm/errors.hpp"

namespace dsm::net {

void NetworkConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v < 1) throw ConfigError(std::string(name) + " must be >= 1");
  };
  positive(d1, "d1");
  positive(d2, "d2");
  positive(d3_q, "d3_q");
  positive(d3_a, "d3_a");
  positive(d4, "d4");
  positive(d_att, "d_att");
  positive(conv_filters_stage1, "conv_filters_stage1");
  positive(conv_filters_final, "conv_filters_final");
  positive(l_q, "l_q");
  positive(l_a, "l_a");
  if (d3_q % 2 != 0) throw ConfigError("d3_q must be even (split across two directions)");
  if (d3_a % 2 != 0) throw ConfigError("d3_a must be even (split across two directions)");
  for (auto [kh, kw] : kernel_sizes) {
    if (kh < 1 || kw < 1) throw ConfigError("kernel sizes must be >= 1");
  }
}

NetworkConfig NetworkConfig::micro() {
  NetworkConfig c;
  c.d1 = 4;
  c.d2 = 4;
  c.d3_q = 4;
  c.d3_a = 4;
  c.d4 = 4;
  c.d_att = 3;
  c.conv_filters_stage1 = 2;
  c.conv_filters_final = 3;
  c.l_q = 3;
  c.l_a = 5;
  return c;
}

nlohmann::json config_to_json(const NetworkConfig& c) {
  nlohmann::json kernels = nlohmann::json::array();
  for (auto [kh, kw] : c.kernel_sizes) kernels.push_back({kh, kw});
  return {
      {"d1", c.d1},
      {"d2", c.d2},
      {"d3_q", c.d3_q},
      {"d3_a", c.d3_a},
      {"d4", c.d4},
      {"d_att", c.d_att},
      {"conv_filters_stage1", c.conv_filters_stage1},
      {"conv_filters_final", c.conv_filters_final},
      {"kernel_sizes", kernels},
      {"l_q", c.l_q},
      {"l_a", c.l_a},
  };
}

NetworkConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("network config must be a JSON object");
  static const char* known[] = {"d1",   "d2",    "d3_q",                "d3_a",
                                "d4",   "d_att", "conv_filters_stage1", "conv_filters_final",
                                "kernel_sizes", "l_q", "l_a"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    if (!ok) throw ConfigError("unknown network config key: " + it.key());
  }
  NetworkConfig c;
  try {
    auto field = [&](const char* key, std::size_t& into) {
      if (j.contains(key)) into = j.at(key).get<std::size_t>();
    };
    field("d1", c.d1);
    field("d2", c.d2);
    field("d3_q", c.d3_q);
    field("d3_a", c.d3_a);
    field("d4", c.d4);
    field("d_att", c.d_att);
    field("conv_filters_stage1", c.conv_filters_stage1);
    field("conv_filters_final", c.conv_filters_final);
    field("l_q", c.l_q);
    field("l_a", c.l_a);
    if (j.contains("kernel_sizes")) {
      const auto& ks = j.at("kernel_sizes");
      if (!ks.is_array() || ks.size() != 3) {
        throw ConfigError("kernel_sizes must list exactly three [height, width] pairs");
      }
      for (std::size_t i = 0; i < 3; ++i) {
        if (!ks[i].is_array() || ks[i].size() != 2) {
          throw ConfigError("kernel_sizes must list exactly three [height, width] pairs");
        }
        c.kernel_sizes[i] = {ks[i][0].get<std::size_t>(), ks[i][1].get<std::size_t>()};
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("network config: ") + e.what());
  }
  c.validate();
  return c;
}

std::vector<std::pair<std::string, ad::Tensor*>> ModelParams::named() {
  return {
      {"a_att_b1", &a_att_b1},   {"a_att_b2", &a_att_b2},   {"a_att_w1", &a_att_w1},
      {"a_att_w2", &a_att_w2},   {"a_lstm_bw_b", &a_lstm_bw_b}, {"a_lstm_bw_w", &a_lstm_bw_w},
      {"a_lstm_fw_b", &a_lstm_fw_b}, {"a_lstm_fw_w", &a_lstm_fw_w}, {"a_word_b", &a_word_b},
      {"a_word_w", &a_word_w},   {"conv1_b", &conv_b[0]},   {"conv1_k", &conv_k[0]},
      {"conv1x1_b", &conv1x1_b}, {"conv1x1_k", &conv1x1_k}, {"conv2_b", &conv_b[1]},
      {"conv2_k", &conv_k[1]},   {"conv3_b", &conv_b[2]},   {"conv3_k", &conv_k[2]},
      {"embedding", &embedding}, {"out_b", &out_b},         {"out_w", &out_w},
      {"proj_b", &proj_b},       {"proj_w", &proj_w},       {"q_att_b1", &q_att_b1},
      {"q_att_b2", &q_att_b2},   {"q_att_w1", &q_att_w1},   {"q_att_w2", &q_att_w2},
      {"q_lstm_bw_b", &q_lstm_bw_b}, {"q_lstm_bw_w", &q_lstm_bw_w}, {"q_lstm_fw_b", &q_lstm_fw_b},
      {"q_lstm_fw_w", &q_lstm_fw_w}, {"q_word_b", &q_word_b},   {"q_word_w", &q_word_w},
  };
}

std::vector<std::pair<std::string, const ad::Tensor*>> ModelParams::named() const {
  auto mut = const_cast<ModelParams*>(this)->named();
  std::vector<std::pair<std::string, const ad::Tensor*>> out;
  out.reserve(mut.size());
  for (auto& [name, t] : mut) out.emplace_back(name, t);
  return out;
}

ModelParams make_params(const NetworkConfig& c, std::size_t vocab_size) {
  c.validate();
  if (vocab_size < 3) throw ConfigError("vocab must contain PAD, OOV and the separator");
  auto zeros = [](ad::Shape shape) {
    ad::Tensor t = ad::Tensor::zeros(std::move(shape));
    t.requires_grad = true;
    return t;
  };
  ModelParams p;
  p.embedding = zeros({vocab_size, c.d1});
  p.proj_w = zeros({c.d1, c.d2});
  p.proj_b = zeros({c.d2});
  const std::size_t hq = c.d3_q / 2, ha = c.d3_a / 2;
  p.q_lstm_fw_w = zeros({c.d2 + hq, 4 * hq});
  p.q_lstm_fw_b = zeros({4 * hq});
  p.q_lstm_bw_w = zeros({c.d2 + hq, 4 * hq});
  p.q_lstm_bw_b = zeros({4 * hq});
  p.a_lstm_fw_w = zeros({c.d2 + ha, 4 * ha});
  p.a_lstm_fw_b = zeros({4 * ha});
  p.a_lstm_bw_w = zeros({c.d2 + ha, 4 * ha});
  p.a_lstm_bw_b = zeros({4 * ha});
  p.q_word_w = zeros({c.d3_q, c.d4});
  p.q_word_b = zeros({c.d4});
  p.a_word_w = zeros({c.d3_a, c.d4});
  p.a_word_b = zeros({c.d4});
  p.q_att_w1 = zeros({c.d4, c.d_att});
  p.q_att_b1 = zeros({c.d_att});
  p.q_att_w2 = zeros({c.d_att, 1});
  p.q_att_b2 = zeros({1});
  p.a_att_w1 = zeros({c.d4, c.d_att});
  p.a_att_b1 = zeros({c.d_att});
  p.a_att_w2 = zeros({c.d_att, 1});
  p.a_att_b2 = zeros({1});
  for (std::size_t i = 0; i < 3; ++i) {
    auto [kh, kw] = c.kernel_sizes[i];
    p.conv_k[i] = zeros({kh, kw, c.d4 + 1, c.conv_filters_stage1});
    p.conv_b[i] = zeros({c.conv_filters_stage1});
  }
  p.conv1x1_k = zeros({1, 1, 3 * c.conv_filters_stage1, c.conv_filters_final});
  p.conv1x1_b = zeros({c.conv_filters_final});
  p.out_w = zeros({c.conv_filters_final});
  p.out_b = zeros({1});
  return p;
}

ad::NodeId embed_and_project(ad::Tape& tape, const std::vector<int>& ids, const ad::Mask& mask,
                             ModelParams& params) {
  ad::NodeId emb = tape.embed_rows(params.embedding, ids, mask);
  ad::NodeId proj = tape.linear(emb, tape.leaf(params.proj_w), tape.leaf(params.proj_b));
  return tape.zero_rows(proj, mask);  // the bias would otherwise leak into padded rows
}

ad::NodeId birnn_encode(ad::Tape& tape, ad::NodeId words, const ad::Mask& mask,
                        ad::Tensor& fw_w, ad::Tensor& fw_b, ad::Tensor& bw_w, ad::Tensor& bw_b,
                        std::size_t out_dim) {
  if (out_dim % 2 != 0) throw ConfigError("recurrent output width must be even");
  const std::size_t hidden = out_dim / 2;
  ad::NodeId fw =
      tape.lstm_seq(words, tape.leaf(fw_w), tape.leaf(fw_b), hidden, false, mask);
  ad::NodeId bw = tape.lstm_seq(words, tape.leaf(bw_w), tape.leaf(bw_b), hidden, true, mask);
  return tape.concat_cols(fw, bw);
}

AttentionNodes attention_pool(ad::Tape& tape, ad::NodeId words, const ad::Mask& mask,
                              ad::Tensor& w1, ad::Tensor& b1, ad::Tensor& w2, ad::Tensor& b2) {
  const std::size_t len = tape.value(words).shape[0];
  ad::NodeId hidden = tape.tanh_(tape.linear(words, tape.leaf(w1), tape.leaf(b1)));
  ad::NodeId scores = tape.linear(hidden, tape.leaf(w2), tape.leaf(b2));  // len x 1
  ad::NodeId weights = tape.masked_softmax(tape.reshape(scores, {len}), mask);
  ad::NodeId pooled = tape.matmul(tape.reshape(weights, {1, len}), words);
  const std::size_t d = tape.value(words).shape[1];
  return {weights, tape.reshape(pooled, {d})};
}

SideNodes encode_side(ad::Tape& tape, const std::vector<int>& ids, const ad::Mask& mask,
                      ModelParams& params, const NetworkConfig& config, bool is_query) {
  ad::NodeId projected = embed_and_project(tape, ids, mask, params);
  ad::NodeId encoded =
      is_query ? birnn_encode(tape, projected, mask, params.q_lstm_fw_w, params.q_lstm_fw_b,
                              params.q_lstm_bw_w, params.q_lstm_bw_b, config.d3_q)
               : birnn_encode(tape, projected, mask, params.a_lstm_fw_w, params.a_lstm_fw_b,
                              params.a_lstm_bw_w, params.a_lstm_bw_b, config.d3_a);
  ad::Tensor& ww = is_query ? params.q_word_w : params.a_word_w;
  ad::Tensor& wb = is_query ? params.q_word_b : params.a_word_b;
  ad::NodeId words =
      tape.zero_rows(tape.linear(encoded, tape.leaf(ww), tape.leaf(wb)), mask);
  AttentionNodes att =
      is_query ? attention_pool(tape, words, mask, params.q_att_w1, params.q_att_b1,
                                params.q_att_w2, params.q_att_b2)
               : attention_pool(tape, words, mask, params.a_att_w1, params.a_att_b1,
                                params.a_att_w2, params.a_att_b2);
  return {words, att.weights, att.h};
}

ad::NodeId predict_head(ad::Tape& tape, ad::NodeId match, ModelParams& params,
                        const NetworkConfig& config) {
  std::vector<ad::NodeId> blocks;
  blocks.reserve(3);
  for (std::size_t i = 0; i < 3; ++i) {
    blocks.push_back(tape.relu(tape.conv2d_same(match, tape.leaf(params.conv_k[i]),
                                                tape.leaf(params.conv_b[i]))));
  }
  ad::NodeId merged = tape.concat_channels(blocks);
  ad::NodeId mixed = tape.relu(
      tape.conv2d_same(merged, tape.leaf(params.conv1x1_k), tape.leaf(params.conv1x1_b)));
  ad::NodeId pooled = tape.global_maxpool2d(mixed);
  (void)config;
  return tape.add(tape.dot(pooled, tape.leaf(params.out_w)), tape.leaf(params.out_b));
}

PairNodes forward_with_sides(ad::Tape& tape, const SideNodes& query, const SideNodes& ad_side,
                             const ad::Mask& exact_match, ModelParams& params,
                             const NetworkConfig& config) {
  ad::NodeId match = tape.match_tensor(query.words, ad_side.words, exact_match);
  ad::NodeId logit = predict_head(tape, match, params, config);
  PairNodes out;
  out.query = query;
  out.ad = ad_side;
  out.logit = logit;
  out.y_hat = tape.sigmoid(logit);
  return out;
}

PairNodes forward_pair(ad::Tape& tape, const text::EncodedPair& pair, ModelParams& params,
                       const NetworkConfig& config) {
  SideNodes q = encode_side(tape, pair.query_ids, pair.query_mask, params, config, true);
  SideNodes a = encode_side(tape, pair.ad_ids, pair.ad_mask, params, config, false);
  return forward_with_sides(tape, q, a, pair.exact_match, params, config);
}

std::vector<ForwardOutput> dsm_forward(const std::vector<text::EncodedPair>& batch,
                                       ModelParams& params, const NetworkConfig& config) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  std::vector<ForwardOutput> outputs;
  outputs.reserve(batch.size());
  for (const auto& pair : batch) {
    ad::Tape tape;
    PairNodes nodes = forward_pair(tape, pair, params, config);
    ForwardOutput o;
    o.y_hat = tape.value(nodes.y_hat).values[0];
    o.logit = tape.value(nodes.logit).values[0];
    o.h_q = tape.value(nodes.query.h).values;
    o.h_a = tape.value(nodes.ad.h).values;
    o.t_q = tape.value(nodes.query.weights).values;
    o.t_a = tape.value(nodes.ad.weights).values;
    outputs.push_back(std::move(o));
  }
  return outputs;
}

}  // namespace dsm::net
