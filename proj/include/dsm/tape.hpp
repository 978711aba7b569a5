#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <vector>

#include "dsm/tensor.hpp"

namespace dsm::ad {

using NodeId = std::size_t;
using Mask = std::vector<std::uint8_t>;

enum class OpKind {
  kLeaf,
  kConstant,
  kEmbedRows,
  kAdd,
  kSub,
  kMul,
  kScale,
  kMatMul,
  kLinear,
  kReshape,
  kConcatCols,
  kConcatChannels,
  kStackScalars,
  kDot,
  kSum,
  kMean,
  kSigmoid,
  kTanh,
  kRelu,
  kLogSigmoid,
  kMaskedSoftmax,
  kConv2dSame,
  kGlobalMaxPool2d,
  kMatchTensor,
  kZeroRows,
  kLstmSeq,
  kBceMean,
};

// Append-only computation graph. Nodes are recorded in evaluation order, so
// insertion order is already a topological order; backward() replays it in
// reverse. One tape serves one forward/backward pass and is then discarded.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Binds a parameter tensor. backward() accumulates into param.grad.
  NodeId leaf(Tensor& param);
  // Fixed input; never receives gradient.
  NodeId constant(Tensor value);
  // Gathers rows of a 2-d table. Masked positions produce zero rows and send
  // no gradient back, so the padding row never trains.
  NodeId embed_rows(Tensor& table, const std::vector<int>& ids, const Mask& mask);

  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);  // elementwise
  NodeId scale(NodeId a, double c);
  NodeId matmul(NodeId a, NodeId b);             // (m,k) x (k,n) -> (m,n)
  NodeId linear(NodeId x, NodeId w, NodeId b);   // x*w + row-broadcast bias
  NodeId reshape(NodeId a, Shape shape);
  NodeId concat_cols(NodeId a, NodeId b);        // (m,p)+(m,q) -> (m,p+q)
  NodeId concat_channels(const std::vector<NodeId>& parts);  // HxWxC_i stack
  NodeId stack_scalars(const std::vector<NodeId>& scalars);  // n scalars -> (n)
  NodeId dot(NodeId a, NodeId b);
  NodeId sum(NodeId a);
  NodeId mean(NodeId a);

  NodeId sigmoid(NodeId a);
  NodeId tanh_(NodeId a);
  NodeId relu(NodeId a);
  NodeId log_sigmoid(NodeId a);

  // Softmax over positions where mask is true; masked weights are exactly 0.
  // Throws std::invalid_argument when the mask has no true entry.
  NodeId masked_softmax(NodeId scores, const Mask& mask);

  // 2-d convolution over an HxWxC input with kernels kh x kw x Cin x Cout and
  // zero padding chosen to keep the spatial extent. Even kernel sides pad one
  // less on the top/left.
  NodeId conv2d_same(NodeId input, NodeId kernel, NodeId bias);
  // HxWxC -> C; ties go to the first position in row-major order.
  NodeId global_maxpool2d(NodeId input);

  // Builds the l_q x l_a x (d+1) interaction volume: elementwise products of
  // word vectors plus a trailing exact-match indicator channel.
  NodeId match_tensor(NodeId v_q, NodeId v_a, const Mask& exact_match);
  // Zeroes rows where mask is false; gradient flows only through kept rows.
  NodeId zero_rows(NodeId x, const Mask& mask);

  // Unidirectional LSTM over the leading unmasked prefix of a len x din
  // sequence. w is (din+hidden) x 4*hidden with gate order [input, forget,
  // cell, output]; rows past the prefix stay zero. reverse=true runs from the
  // end of the prefix toward the front.
  NodeId lstm_seq(NodeId x, NodeId w, NodeId b, std::size_t hidden, bool reverse,
                  const Mask& mask);

  // Mean binary cross entropy with probabilities clamped to [1e-12, 1-1e-12].
  NodeId bce_mean(NodeId probs, const std::vector<double>& labels);

  const Tensor& value(NodeId id) const { return nodes_[id].out; }
  OpKind kind(NodeId id) const { return nodes_[id].kind; }
  std::size_t size() const { return nodes_.size(); }

  // Reverse sweep from a scalar node. Accumulates into the .grad of every
  // bound parameter; parameters off the path keep (or get) zeros.
  void backward(NodeId loss);

 private:
  struct Node {
    OpKind kind = OpKind::kConstant;
    std::vector<NodeId> inputs;
    Tensor out;
    std::vector<double> grad;
    bool touched = false;
    Tensor* external = nullptr;
    std::function<void(Tape&)> backprop;
  };

  NodeId push(Node node);
  Node& node(NodeId id) { return nodes_[id]; }
  std::vector<double>& grad(NodeId id) { return nodes_[id].grad; }
  void touch(NodeId id) { nodes_[id].touched = true; }

  std::vector<Node> nodes_;
};

}  // namespace dsm::ad
