#include "dsm/tape.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>

namespace dsm::ad {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

double sigmoid_stable(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

double log_sigmoid_stable(double x) {
  // log sigma(x) = -softplus(-x)
  if (x >= 0.0) return -std::log1p(std::exp(-x));
  return x - std::log1p(std::exp(x));
}

// Leading-true prefix length; the recurrent and row-masking ops expect
// padding only at the tail.
std::size_t prefix_len(const Mask& mask) {
  std::size_t n = 0;
  while (n < mask.size() && mask[n]) ++n;
  for (std::size_t i = n; i < mask.size(); ++i) {
    require(!mask[i], "mask must be a contiguous prefix of real positions");
  }
  return n;
}

}  // namespace

NodeId Tape::push(Node node) {
  NodeId id = nodes_.size();
  for (NodeId in : node.inputs) {
    require(in < id, "tape inputs must precede the node");
  }
  nodes_.push_back(std::move(node));
  return id;
}

NodeId Tape::leaf(Tensor& param) {
  NodeId self = nodes_.size();
  Node n;
  n.kind = OpKind::kLeaf;
  n.out = Tensor(param.shape, param.values, param.requires_grad);
  n.external = &param;
  n.backprop = [self](Tape& t) {
    Node& me = t.node(self);
    if (!me.external->requires_grad) return;
    me.external->ensure_grad();
    const auto& g = me.grad;
    auto& pg = me.external->grad;
    for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
  };
  return push(std::move(n));
}

NodeId Tape::constant(Tensor value) {
  Node n;
  n.kind = OpKind::kConstant;
  n.out = std::move(value);
  n.out.requires_grad = false;
  return push(std::move(n));
}

NodeId Tape::embed_rows(Tensor& table, const std::vector<int>& ids, const Mask& mask) {
  require(table.shape.size() == 2, "embedding table must be 2-d");
  require(ids.size() == mask.size(), "ids and mask must have equal length");
  const std::size_t rows = table.shape[0];
  const std::size_t dim = table.shape[1];
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] >= 0 && static_cast<std::size_t>(ids[i]) < rows,
            "token id " + std::to_string(ids[i]) + " out of vocabulary range");
  }

  NodeId self = nodes_.size();
  Node n;
  n.kind = OpKind::kEmbedRows;
  n.out = Tensor::zeros({ids.size(), dim});
  n.out.requires_grad = table.requires_grad;
  n.external = &table;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (!mask[i]) continue;
    const double* src = &table.values[static_cast<std::size_t>(ids[i]) * dim];
    std::copy(src, src + dim, &n.out.values[i * dim]);
  }
  n.backprop = [self, ids, mask, dim](Tape& t) {
    Node& me = t.node(self);
    if (!me.external->requires_grad) return;
    me.external->ensure_grad();
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!mask[i]) continue;
      double* dst = &me.external->grad[static_cast<std::size_t>(ids[i]) * dim];
      const double* g = &me.grad[i * dim];
      for (std::size_t c = 0; c < dim; ++c) dst[c] += g[c];
    }
  };
  return push(std::move(n));
}

NodeId Tape::add(NodeId a, NodeId b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  require(ta.shape == tb.shape, "add: shape mismatch " + shape_str(ta.shape) + " vs " +
                                    shape_str(tb.shape));
  NodeId self = nodes_.size();
  Node n;
  n.kind = OpKind::kAdd;
  n.inputs = {a, b};
  n.out = Tensor(ta.shape, ta.values, ta.requires_grad || tb.requires_grad);
  for (std::size_t i = 0; i < tb.values.size(); ++i) n.out.values[i] += tb.values[i];
  n.backprop = [self, a, b](Tape& t) {
    const auto& g = t.node(self).grad;
    auto& ga = t.grad(a);
    auto& gb = t.grad(b);
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] += g[i];
      gb[i] += g[i];
    }
    t.touch(a);
    t.touch(b);
  };
  return push(std::move(n));
}

NodeId Tape::sub(NodeId a, NodeId b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  require(ta.shape == tb.shape, "sub: shape mismatch");
  NodeId self = nodes_.size();
  Node n;
  n.kind = OpKind::kSub;
  n.inputs = {a, b};
  n.out = Tensor(ta.shape, ta.values, ta.requires_grad || tb.requires_grad);
  for (std::size_t i = 0; i < tb.values.size(); ++i) n.out.values[i] -= tb.values[i];
  n.backprop = [self, a, b](Tape& t) {
    const auto& g = t.node(self).grad;
    auto& ga = t.grad(a);
    auto& gb = t.grad(b);
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] += g[i];
      gb[i] -= g[i];
    }
    t.touch(a);
    t.touch(b);
  };
  return push(std::move(n));
}

NodeId Tape::mul(NodeId a, NodeId b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  require(ta.shape == tb.shape, "mul: shape mismatch");
  NodeId self = nodes_.size();
  Node n;
  n.kind = OpKind::kMul;
  n.inputs = {a, b};
  n.out = Tensor(ta.shape, ta.values, ta.requires_grad || tb.requires_grad);
  for (std::size_t i = 0; i < tb.values.size(); ++i) n.out.values[i] *= tb.values[i];
  n.backprop = [self, a, b](Tape& t) {
    const auto& g = t.node(self).grad;
    const auto& va = t.value(a).values;
    const auto& vb = t.value(b).values;
    auto& ga = t.grad(a);
    auto& gb = t.grad(b);
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] += g[i] * vb[i];
      gb[i] += g[i] * va[i];
    }
    t.touch(a);
    t.touch(b);
  };
  return push(std::move(n));
}

NodeId Tape::scale(NodeId a, double c) {
  const Tensor& ta = value(a);
  NodeId self = nodes_.size();
  Node n;
  n.kind = OpKind::kScale;
  n.inputs = {a};
  n.out = Tensor(ta.shape, ta.values, ta.requires_grad);
  for (double& v : n.out.values) v *= c;
  n.backprop = [self, a, c](Tape& t) {
    const auto& g = t.node(self).grad;
    auto& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
    t.touch(a);
  };
  return push(std::move(n));
}

NodeId Tape::matmul(NodeId a, NodeId b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  require(ta.shape.size() == 2 && tb.shape.size() == 2, "matmul: operands must be 2-d");
  require(ta.shape[1] == tb.shape[0], "matmul: inner dimensions differ");
  const std::size_t m = ta.shape[0], k = ta.shape[1], nn = tb.shape[1];
  NodeId self = nodes_.size();
  Node n;
  n.kind = OpKind::kMatMul;
  n.inputs = {a, b};
  n.out = Tensor::zeros({m, nn});
  n.out.requires_grad = ta.requires_grad || tb.requires_grad;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      double av = ta.values[i * k + p];
      if (av == 0.0) continue;
      const double* brow = &tb.values[p * nn];
      double* orow = &n.out.values[i * nn];
      for (std::size_t j = 0; j < nn; ++j) orow[j] += av * brow[j];
    }
  }
  n.backprop = [self, a, b, m, k, nn](Tape& t) {
    const auto& g = t.node(self).grad;
    const auto& va = t.value(a).values;
    const auto& vb = t.value(b).values;
    auto& ga = t.grad(a);
    auto& gb = t.grad(b);
    // dA = G * B^T,  dB = A^T * G
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t p = 0; p < k; ++p) {
        const double* brow = &vb[p * nn];
        const double* grow = &g[i * nn];
        double acc = 0.0;
        for (std::size_t j = 0; j < nn; ++j) acc += grow[j] * brow[j];
        ga[i * k + p] += acc;
      }
      const double* grow = &g[i * nn];
      for (std::size_t p = 0; p < k; ++p) {
        double av = va[i * k + p];
        if (av == 0.0) continue;
        double* gbrow = &gb[p * nn];
        for (std::size_t j = 0; j < nn; ++j) gbrow[j] += av * grow[j];
      }
    }
    t.touch(a);
    t.touch(b);
  };
  return push(std::move(n));
}

NodeId Tape::linear(NodeId x, NodeId w, NodeId b) {
  const Tensor& tx = value(x);
  const Tensor& tw = value(w);
  const Tensor& tb = value(b);
  require(tx.shape.size() == 2 && tw.shape.size() == 2, "linear: x and w must be 2-d");
  require(tx.shape[1] == tw.shape[0], "linear: inner dimensions differ");
  require(tb.shape.size() == 1 && tb.shape[0] == tw.shape[1], "linear: bias width mismatch");
  const std::size_t m = tx.shape[0], k = tx.shape[1], nn = tw.shape[1];
  NodeId self = nodes_.size();
  Node n;
  n.kind = OpKind::kLinear;
  n.inputs = {x, w, b};
  n.out = Tensor::zeros({m, nn});
  n.out.requires_grad = tx.requires_grad || tw.requires_grad || tb.requires_grad;
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = &n.out.values[i * nn];
    std::copy(tb.values.begin(), tb.values.end(), orow);
    for (std::size_t p = 0; p < k; ++p) {
      double xv = tx.values[i * k + p];
      if (xv == 0.0) continue;
      const double* wrow = &tw.values[p * nn];
      for (std::size_t j = 0; j < nn; ++j) orow[j] += xv * wrow[j];
    }
  }
  n.backprop = [self, x, w, b, m, k, nn](Tape& t) {
    const auto& g = t.node(self).grad;
    const auto& vx = t.value(x).values;
    const auto& vw = t.value(w).values;
    auto& gx = t.grad(x);
    auto& gw = t.grad(w);
    auto& gb = t.grad(b);
    for (std::size_t i = 0; i < m; ++i) {
      const double* grow = &g[i * nn];
      for (std::size_t p = 0; p < k; ++p) {
        const double* wrow = &vw[p * nn];
        double acc = 0.0;
        for (std::size_t j = 0; j < nn; ++j) acc += grow[j] * wrow[j];
        gx[i * k + p] += acc;
      }
      for (std::size_t p = 0; p < k; ++p) {
        double xv = vx[i * k + p];
        if (xv == 0.0) continue;
        double* gwrow = &gw[p * nn];
        for (std::size_t j = 0; j < nn; ++j) gwrow[j] += xv * grow[j];
      }
      for (std::size_t j = 0; j < nn; ++j) gb[j] += grow[j];
    }
    t.touch(x);
    t.touch(w);
    t.touch(b);
  };
  return push(std::move(n));
}

NodeId Tape::reshape(NodeId a, Shape shape) {
  const Tensor& ta = value(a);
  require(numel(shape) == ta.size(), "reshape: element count mismatch");
  NodeId self = nodes_.size();
  Node n;
  n.kind = OpKind::kReshape;
  n.inputs = {a};
  n.out = Tensor(std::move(shape), ta.values, ta.requires_grad);
  n.backprop = [self, a](Tape& t) {
    const auto& g = t.node(self).grad;
    auto& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    t.touch(a);
  };
  return push(std::move(n));
}

NodeId Tape::concat_cols(NodeId a, NodeId b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  require(ta.shape.size() == 2 && tb.shape.size() == 2 && ta.shape[0] == tb.shape[0],
          "concat_cols: row count mismatch");
  const std::size_t m = ta.shape[0], p = ta.shape[1], q = tb.shape[1];
  NodeId self = nodes_.size();
  Node n;
  n.kind = OpKind::kConcatCols;
  n.inputs = {a, b};
  n.out = Tensor::zeros({m, p + q});
  n.out.requires_grad = ta.requires_grad || tb.requires_grad;
  for (std::size_t i = 0; i < m; ++i) {
    std::copy(&ta.values[i * p], &ta.values[i * p] + p, &n.out.values[i * (p + q)]);
    std::copy(&tb.values[i * q], &tb.values[i * q] + q, &n.out.values[i * (p + q) + p]);
  }
  n.backprop = [self, a, b, m, p, q](Tape& t) {
    const auto& g = t.node(self).grad;
    auto& ga = t.grad(a);
    auto& gb = t.grad(b);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < p; ++j) ga[i * p + j] += g[i * (p + q) + j];
      for (std::size_t j = 0; j < q; ++j) gb[i * q + j] += g[i * (p + q) + p + j];
    }
    t.touch(a);
    t.touch(b);
  };
  return push(std::move(n));
}

NodeId Tape::concat_channels(const std::vector<NodeId>& parts) {
  require(!parts.empty(), "concat_channels: no inputs");
  const Tensor& first = value(parts[0]);
  require(first.shape.size() == 3, "concat_channels: inputs must be 3-d");
  const std::size_t h = first.shape[0], w = first.shape[1];
  std::size_t ctotal = 0;
  bool rg = false;
  std::vector<std::size_t> widths;
  for (NodeId id : parts) {
    const Tensor& tp = value(id);
    require(tp.shape.size() == 3 && tp.shape[0] == h && tp.shape[1] == w,
            "concat_channels: spatial extents differ");
    widths.push_back(tp.shape[2]);
    ctotal += tp.shape[2];
    rg = rg || tp.requires_grad;
  }
  NodeId self = nodes_.size();
  Node n;
  n.kind = OpKind::kConcatChannels;
  n.inputs = parts;
  n.out = Tensor::zeros({h, w, ctotal});
  n.out.requires_grad = rg;
  for (std::size_t yx = 0; yx < h * w; ++yx) {
    std::size_t off = 0;
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
      const auto& vals = value(parts[pi]).values;
      std::copy(&vals[yx * widths[pi]], &vals[yx * widths[pi]] + widths[pi],
                &n.out.values[yx * ctotal + off]);
      off += widths[pi];
    }
  }
  n.backprop = [self, parts, widths, h, w, ctotal](Tape& t) {
    const auto& g = t.node(self).grad;
    for (std::size_t yx = 0; yx < h * w; ++yx) {
      std::size_t off = 0;
      for (std::size_t pi = 0; pi < parts.size(); ++pi) {
        auto& gp = t.grad(parts[pi]);
        for (std::size_t c = 0; c < widths[pi]; ++c) {
          gp[yx * widths[pi] + c] += g[yx * ctotal + off + c];
        }
        off += widths[pi];
      }
    }
    for (NodeId id : parts) t.touch(id);
  };
  return push(std::move(n));
}

NodeId Tape::stack_scalars(const std::vector<NodeId>& scalars) {
  require(!scalars.empty(), "stack_scalars: no inputs");
  NodeId self = nodes_.size();
  Node n;
  n.kind = OpKind::kStackScalars;
  n.inputs = scalars;
  n.out = Tensor::zeros({scalars.size()});
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    const Tensor& ts = value(scalars[i]);
    require(ts.size() == 1, "stack_scalars: inputs must be scalars");
    n.out.values[i] = ts.values[0];
    n.out.requires_grad = n.out.requires_grad || ts.requires_grad;
  }
  n.backprop = [self, scalars](Tape& t) {
    const auto& g = t.node(self).grad;
    for (std::size_t i = 0; i < scalars.size(); ++i) {
      t.grad(scalars[i])[0] += g[i];
      t.touch(scalars[i]);
    }
  };
  return push(std::move(n));
}

NodeId Tape::dot(NodeId a, NodeId b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  require(ta.size() == tb.size(), "dot: length mismatch");
  NodeId self = nodes_.size();
  Node n;
  n.kind = OpKind::kDot;
  n.inputs = {a, b};
  double acc = 0.0;
  for (std::size_t i = 0; i < ta.size(); ++i) acc += ta.values[i] * tb.values[i];
  n.out = Tensor::scalar(acc);
  n.out.requires_grad = ta.requires_grad || tb.requires_grad;
  n.backprop = [self, a, b](Tape& t) {
    double g0 = t.node(self).grad[0];
    const auto& va = t.value(a).values;
    const auto& vb = t.value(b).values;
    auto& ga = t.grad(a);
    auto& gb = t.grad(b);
    for (std::size_t i = 0; i < va.size(); ++i) {
      ga[i] += g0 * vb[i];
      gb[i] += g0 * va[i];
    }
    t.touch(a);
    t.touch(b);
  };
  return push(std::move(n));
}

NodeId Tape::sum(NodeId a) {
  const Tensor& ta = value(a);
  NodeId self = nodes_.size();
  Node n;
  n.kind = OpKind::kSum;
  n.inputs = {a};
  double acc = 0.0;
  for (double v : ta.values) acc += v;
  n.out = Tensor::scalar(acc);
  n.out.requires_grad = ta.requires_grad;
  n.backprop = [self, a](Tape& t) {
    double g0 = t.node(self).grad[0];
    auto& ga = t.grad(a);
    for (double& v : ga) v += g0;
    t.touch(a);
  };
  return push(std::move(n));
}

NodeId Tape::mean(NodeId a) {
  const Tensor& ta = value(a);
  require(ta.size() > 0, "mean: empty tensor");
  NodeId self = nodes_.size();
  Node n;
  n.kind = OpKind::kMean;
  n.inputs = {a};
  double acc = 0.0;
  for (double v : ta.values) acc += v;
  n.out = Tensor::scalar(acc / static_cast<double>(ta.size()));
  n.out.requires_grad = ta.requires_grad;
  const double inv = 1.0 / static_cast<double>(ta.size());
  n.backprop = [self, a, inv](Tape& t) {
    double g0 = t.node(self).grad[0] * inv;
    auto& ga = t.grad(a);
    for (double& v : ga) v += g0;
    t.touch(a);
  };
  return push(std::move(n));
}

NodeId Tape::sigmoid(NodeId a) {
  const Tensor& ta = value(a);
  NodeId self = nodes_.size();
  Node n;
  n.kind = OpKind::kSigmoid;
  n.inputs = {a};
  n.out = Tensor(ta.shape, ta.values, ta.requires_grad);
  for (double& v : n.out.values) v = sigmoid_stable(v);
  n.backprop = [self, a](Tape& t) {
    const Node& me = t.node(self);
    const auto& g = me.grad;
    const auto& s = me.out.values;
    auto& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s[i] * (1.0 - s[i]);
    t.touch(a);
  };
  return push(std::move(n));
}

NodeId Tape::tanh_(NodeId a) {
  const Tensor& ta = value(a);
  NodeId self = nodes_.size();
  Node n;
  n.kind = OpKind::kTanh;
  n.inputs = {a};
  n.out = Tensor(ta.shape, ta.values, ta.requires_grad);
  for (double& v : n.out.values) v = std::tanh(v);
  n.backprop = [self, a](Tape& t) {
    const Node& me = t.node(self);
    const auto& g = me.grad;
    const auto& y = me.out.values;
    auto& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
    t.touch(a);
  };
  return push(std::move(n));
}

NodeId Tape::relu(NodeId a) {
  const Tensor& ta = value(a);
  NodeId self = nodes_.size();
  Node n;
  n.kind = OpKind::kRelu;
  n.inputs = {a};
  n.out = Tensor(ta.shape, ta.values, ta.requires_grad);
  for (double& v : n.out.values) v = v > 0.0 ? v : 0.0;
  n.backprop = [self, a](Tape& t) {
    const auto& g = t.node(self).grad;
    const auto& x = t.value(a).values;
    auto& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x[i] > 0.0) ga[i] += g[i];
    }
    t.touch(a);
  };
  return push(std::move(n));
}

NodeId Tape::log_sigmoid(NodeId a) {
  const Tensor& ta = value(a);
  NodeId self = nodes_.size();
  Node n;
  n.kind = OpKind::kLogSigmoid;
  n.inputs = {a};
  n.out = Tensor(ta.shape, ta.values, ta.requires_grad);
  for (double& v : n.out.values) v = log_sigmoid_stable(v);
  n.backprop = [self, a](Tape& t) {
    const auto& g = t.node(self).grad;
    const auto& x = t.value(a).values;
    auto& ga = t.grad(a);
    // d/dx log sigma(x) = sigma(-x)
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * sigmoid_stable(-x[i]);
    t.touch(a);
  };
  return push(std::move(n));
}

NodeId Tape::masked_softmax(NodeId scores, const Mask& mask) {
  const Tensor& ts = value(scores);
  require(ts.shape.size() == 1, "masked_softmax: scores must be a vector");
  require(ts.size() == mask.size(), "masked_softmax: mask length mismatch");
  bool any = false;
  for (auto m : mask) any = any || (m != 0);
  if (!any) throw std::invalid_argument("empty attention support");

  const std::size_t len = ts.size();
  NodeId self = nodes_.size();
  Node n;
  n.kind = OpKind::kMaskedSoftmax;
  n.inputs = {scores};
  n.out = Tensor::zeros({len});
  n.out.requires_grad = ts.requires_grad;
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < len; ++i) {
    if (mask[i] && ts.values[i] > mx) mx = ts.values[i];
  }
  double z = 0.0;
  for (std::size_t i = 0; i < len; ++i) {
    if (!mask[i]) continue;
    n.out.values[i] = std::exp(ts.values[i] - mx);
    z += n.out.values[i];
  }
  for (std::size_t i = 0; i < len; ++i) {
    if (mask[i]) n.out.values[i] /= z;
  }
  n.backprop = [self, scores, mask, len](Tape& t) {
    const Node& me = t.node(self);
    const auto& g = me.grad;
    const auto& w = me.out.values;
    auto& gs = t.grad(scores);
    double inner = 0.0;
    for (std::size_t i = 0; i < len; ++i) {
      if (mask[i]) inner += w[i] * g[i];
    }
    for (std::size_t i = 0; i < len; ++i) {
      if (mask[i]) gs[i] += w[i] * (g[i] - inner);
    }
    t.touch(scores);
  };
  return push(std::move(n));
}

NodeId Tape::conv2d_same(NodeId input, NodeId kernel, NodeId bias) {
  const Tensor& ti = value(input);
  const Tensor& tk = value(kernel);
  const Tensor& tb = value(bias);
  require(ti.shape.size() == 3, "conv2d_same: input must be HxWxC");
  require(tk.shape.size() == 4, "conv2d_same: kernel must be kh x kw x Cin x Cout");
  require(ti.shape[2] == tk.shape[2],
          "conv2d_same: channel mismatch between input (" + std::to_string(ti.shape[2]) +
              ") and kernels (" + std::to_string(tk.shape[2]) + ")");
  require(tb.shape.size() == 1 && tb.shape[0] == tk.shape[3],
          "conv2d_same: bias width mismatch");
  const std::size_t h = ti.shape[0], w = ti.shape[1], cin = ti.shape[2];
  const std::size_t kh = tk.shape[0], kw = tk.shape[1], cout = tk.shape[3];
  const std::size_t pt = (kh - 1) / 2, pl = (kw - 1) / 2;

  NodeId self = nodes_.size();
  Node n;
  n.kind = OpKind::kConv2dSame;
  n.inputs = {input, kernel, bias};
  n.out = Tensor::zeros({h, w, cout});
  n.out.requires_grad = ti.requires_grad || tk.requires_grad || tb.requires_grad;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double* ocell = &n.out.values[(y * w + x) * cout];
      std::copy(tb.values.begin(), tb.values.end(), ocell);
      for (std::size_t dy = 0; dy < kh; ++dy) {
        std::ptrdiff_t yy = static_cast<std::ptrdiff_t>(y + dy) - static_cast<std::ptrdiff_t>(pt);
        if (yy < 0 || yy >= static_cast<std::ptrdiff_t>(h)) continue;
        for (std::size_t dx = 0; dx < kw; ++dx) {
          std::ptrdiff_t xx =
              static_cast<std::ptrdiff_t>(x + dx) - static_cast<std::ptrdiff_t>(pl);
          if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(w)) continue;
          const double* icell = &ti.values[(static_cast<std::size_t>(yy) * w +
                                            static_cast<std::size_t>(xx)) *
                                           cin];
          const double* kcell = &tk.values[(dy * kw + dx) * cin * cout];
          for (std::size_t ci = 0; ci < cin; ++ci) {
            double iv = icell[ci];
            if (iv == 0.0) continue;
            const double* kr = &kcell[ci * cout];
            for (std::size_t co = 0; co < cout; ++co) ocell[co] += iv * kr[co];
          }
        }
      }
    }
  }
  n.backprop = [self, input, kernel, bias, h, w, cin, kh, kw, cout, pt, pl](Tape& t) {
    const auto& g = t.node(self).grad;
    const auto& vi = t.value(input).values;
    const auto& vk = t.value(kernel).values;
    auto& gi = t.grad(input);
    auto& gk = t.grad(kernel);
    auto& gb = t.grad(bias);
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double* gcell = &g[(y * w + x) * cout];
        for (std::size_t co = 0; co < cout; ++co) gb[co] += gcell[co];
        for (std::size_t dy = 0; dy < kh; ++dy) {
          std::ptrdiff_t yy =
              static_cast<std::ptrdiff_t>(y + dy) - static_cast<std::ptrdiff_t>(pt);
          if (yy < 0 || yy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t dx = 0; dx < kw; ++dx) {
            std::ptrdiff_t xx =
                static_cast<std::ptrdiff_t>(x + dx) - static_cast<std::ptrdiff_t>(pl);
            if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(w)) continue;
            std::size_t iidx =
                (static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)) * cin;
            std::size_t kidx = (dy * kw + dx) * cin * cout;
            for (std::size_t ci = 0; ci < cin; ++ci) {
              const double* kr = &vk[kidx + ci * cout];
              double* gkr = &gk[kidx + ci * cout];
              double iv = vi[iidx + ci];
              double acc = 0.0;
              for (std::size_t co = 0; co < cout; ++co) {
                acc += gcell[co] * kr[co];
                gkr[co] += iv * gcell[co];
              }
              gi[iidx + ci] += acc;
            }
          }
        }
      }
    }
    t.touch(input);
    t.touch(kernel);
    t.touch(bias);
  };
  return push(std::move(n));
}

NodeId Tape::global_maxpool2d(NodeId input) {
  const Tensor& ti = value(input);
  require(ti.shape.size() == 3, "global_maxpool2d: input must be HxWxC");
  require(ti.shape[0] >= 1 && ti.shape[1] >= 1, "global_maxpool2d: empty spatial extent");
  const std::size_t h = ti.shape[0], w = ti.shape[1], c = ti.shape[2];
  NodeId self = nodes_.size();
  Node n;
  n.kind = OpKind::kGlobalMaxPool2d;
  n.inputs = {input};
  n.out = Tensor::zeros({c});
  n.out.requires_grad = ti.requires_grad;
  std::vector<std::size_t> argmax(c, 0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double best = ti.values[ch];
    std::size_t bestyx = 0;
    for (std::size_t yx = 1; yx < h * w; ++yx) {
      double v = ti.values[yx * c + ch];
      if (v > best) {  // strict: first row-major position wins ties
        best = v;
        bestyx = yx;
      }
    }
    n.out.values[ch] = best;
    argmax[ch] = bestyx;
  }
  n.backprop = [self, input, argmax, c](Tape& t) {
    const auto& g = t.node(self).grad;
    auto& gi = t.grad(input);
    for (std::size_t ch = 0; ch < c; ++ch) gi[argmax[ch] * c + ch] += g[ch];
    t.touch(input);
  };
  return push(std::move(n));
}

NodeId Tape::match_tensor(NodeId v_q, NodeId v_a, const Mask& exact_match) {
  const Tensor& tq = value(v_q);
  const Tensor& ta = value(v_a);
  require(tq.shape.size() == 2 && ta.shape.size() == 2, "match_tensor: inputs must be 2-d");
  require(tq.shape[1] == ta.shape[1], "match_tensor: word widths differ");
  const std::size_t lq = tq.shape[0], la = ta.shape[0], d = tq.shape[1];
  require(exact_match.size() == lq * la, "match_tensor: exact-match slice size mismatch");
  NodeId self = nodes_.size();
  Node n;
  n.kind = OpKind::kMatchTensor;
  n.inputs = {v_q, v_a};
  n.out = Tensor::zeros({lq, la, d + 1});
  n.out.requires_grad = tq.requires_grad || ta.requires_grad;
  for (std::size_t i = 0; i < lq; ++i) {
    const double* qrow = &tq.values[i * d];
    for (std::size_t j = 0; j < la; ++j) {
      const double* arow = &ta.values[j * d];
      double* cell = &n.out.values[(i * la + j) * (d + 1)];
      for (std::size_t c = 0; c < d; ++c) cell[c] = qrow[c] * arow[c];
      cell[d] = exact_match[i * la + j] ? 1.0 : 0.0;
    }
  }
  n.backprop = [self, v_q, v_a, lq, la, d](Tape& t) {
    const auto& g = t.node(self).grad;
    const auto& vq = t.value(v_q).values;
    const auto& va = t.value(v_a).values;
    auto& gq = t.grad(v_q);
    auto& ga = t.grad(v_a);
    for (std::size_t i = 0; i < lq; ++i) {
      for (std::size_t j = 0; j < la; ++j) {
        const double* gcell = &g[(i * la + j) * (d + 1)];
        for (std::size_t c = 0; c < d; ++c) {
          gq[i * d + c] += gcell[c] * va[j * d + c];
          ga[j * d + c] += gcell[c] * vq[i * d + c];
        }
      }
    }
    t.touch(v_q);
    t.touch(v_a);
  };
  return push(std::move(n));
}

NodeId Tape::zero_rows(NodeId x, const Mask& mask) {
  const Tensor& tx = value(x);
  require(tx.shape.size() == 2, "zero_rows: input must be 2-d");
  require(tx.shape[0] == mask.size(), "zero_rows: mask length mismatch");
  const std::size_t m = tx.shape[0], d = tx.shape[1];
  NodeId self = nodes_.size();
  Node n;
  n.kind = OpKind::kZeroRows;
  n.inputs = {x};
  n.out = Tensor(tx.shape, tx.values, tx.requires_grad);
  for (std::size_t i = 0; i < m; ++i) {
    if (!mask[i]) std::fill(&n.out.values[i * d], &n.out.values[i * d] + d, 0.0);
  }
  n.backprop = [self, x, mask, m, d](Tape& t) {
    const auto& g = t.node(self).grad;
    auto& gx = t.grad(x);
    for (std::size_t i = 0; i < m; ++i) {
      if (!mask[i]) continue;
      for (std::size_t c = 0; c < d; ++c) gx[i * d + c] += g[i * d + c];
    }
    t.touch(x);
  };
  return push(std::move(n));
}

NodeId Tape::lstm_seq(NodeId x, NodeId w, NodeId b, std::size_t hidden, bool reverse,
                      const Mask& mask) {
  const Tensor& tx = value(x);
  const Tensor& tw = value(w);
  const Tensor& tb = value(b);
  require(hidden >= 1, "lstm_seq: hidden width must be positive");
  require(tx.shape.size() == 2, "lstm_seq: input must be len x din");
  const std::size_t len = tx.shape[0], din = tx.shape[1];
  require(mask.size() == len, "lstm_seq: mask length mismatch");
  require(tw.shape.size() == 2 && tw.shape[0] == din + hidden && tw.shape[1] == 4 * hidden,
          "lstm_seq: weight must be (din+hidden) x 4*hidden");
  require(tb.shape.size() == 1 && tb.shape[0] == 4 * hidden, "lstm_seq: bias width mismatch");
  const std::size_t real = prefix_len(mask);
  const std::size_t hh = hidden;

  NodeId self = nodes_.size();
  Node n;
  n.kind = OpKind::kLstmSeq;
  n.inputs = {x, w, b};
  n.out = Tensor::zeros({len, hh});
  n.out.requires_grad = tx.requires_grad || tw.requires_grad || tb.requires_grad;

  // Per processed step: concatenated input u=[x_t ; h_prev], gates and cell
  // state, cached for backward-through-time.
  std::vector<double> cu(real * (din + hh), 0.0);
  std::vector<double> ci(real * hh), cf(real * hh), cg(real * hh), co(real * hh);
  std::vector<double> cc(real * hh), ctc(real * hh);

  std::vector<double> hprev(hh, 0.0), cprev(hh, 0.0), z(4 * hh);
  for (std::size_t step = 0; step < real; ++step) {
    std::size_t pos = reverse ? real - 1 - step : step;
    double* u = &cu[step * (din + hh)];
    std::copy(&tx.values[pos * din], &tx.values[pos * din] + din, u);
    std::copy(hprev.begin(), hprev.end(), u + din);
    std::copy(tb.values.begin(), tb.values.end(), z.begin());
    for (std::size_t i = 0; i < din + hh; ++i) {
      double uv = u[i];
      if (uv == 0.0) continue;
      const double* wrow = &tw.values[i * 4 * hh];
      for (std::size_t j = 0; j < 4 * hh; ++j) z[j] += uv * wrow[j];
    }
    for (std::size_t k = 0; k < hh; ++k) {
      double gi = sigmoid_stable(z[k]);
      double gf = sigmoid_stable(z[hh + k]);
      double gg = std::tanh(z[2 * hh + k]);
      double go = sigmoid_stable(z[3 * hh + k]);
      double c = gf * cprev[k] + gi * gg;
      double tc = std::tanh(c);
      ci[step * hh + k] = gi;
      cf[step * hh + k] = gf;
      cg[step * hh + k] = gg;
      co[step * hh + k] = go;
      cc[step * hh + k] = c;
      ctc[step * hh + k] = tc;
      n.out.values[pos * hh + k] = go * tc;
      hprev[k] = go * tc;
      cprev[k] = c;
    }
  }

  n.backprop = [self, x, w, b, mask, real, hh, din, reverse, cu = std::move(cu),
                ci = std::move(ci), cf = std::move(cf), cg = std::move(cg),
                co = std::move(co), cc = std::move(cc), ctc = std::move(ctc)](Tape& t) {
    const auto& gout = t.node(self).grad;
    const auto& vw = t.value(w).values;
    auto& gx = t.grad(x);
    auto& gw = t.grad(w);
    auto& gb = t.grad(b);
    std::vector<double> dh_carry(hh, 0.0), dc_carry(hh, 0.0);
    std::vector<double> dz(4 * hh);
    for (std::size_t sp1 = real; sp1 > 0; --sp1) {
      const std::size_t step = sp1 - 1;
      const std::size_t pos = reverse ? real - 1 - step : step;
      const double* u = &cu[step * (din + hh)];
      for (std::size_t k = 0; k < hh; ++k) {
        double dh = gout[pos * hh + k] + dh_carry[k];
        double go = co[step * hh + k];
        double tc = ctc[step * hh + k];
        double d_o = dh * tc;
        double dc = dc_carry[k] + dh * go * (1.0 - tc * tc);
        double cp = step > 0 ? cc[(step - 1) * hh + k] : 0.0;
        double gi = ci[step * hh + k];
        double gf = cf[step * hh + k];
        double gg = cg[step * hh + k];
        dz[k] = dc * gg * gi * (1.0 - gi);
        dz[hh + k] = dc * cp * gf * (1.0 - gf);
        dz[2 * hh + k] = dc * gi * (1.0 - gg * gg);
        dz[3 * hh + k] = d_o * go * (1.0 - go);
        dc_carry[k] = dc * gf;
      }
      for (std::size_t j = 0; j < 4 * hh; ++j) gb[j] += dz[j];
      for (std::size_t i = 0; i < din + hh; ++i) {
        const double* wrow = &vw[i * 4 * hh];
        double* gwrow = &gw[i * 4 * hh];
        double du = 0.0;
        double uv = u[i];
        for (std::size_t j = 0; j < 4 * hh; ++j) {
          du += wrow[j] * dz[j];
          gwrow[j] += uv * dz[j];
        }
        if (i < din) {
          gx[pos * din + i] += du;
        } else {
          dh_carry[i - din] = du;
        }
      }
    }
    t.touch(x);
    t.touch(w);
    t.touch(b);
  };
  return push(std::move(n));
}

NodeId Tape::bce_mean(NodeId probs, const std::vector<double>& labels) {
  const Tensor& tp = value(probs);
  require(tp.shape.size() == 1, "bce_mean: probabilities must be a vector");
  require(tp.size() == labels.size(), "bce_mean: label count mismatch");
  require(tp.size() > 0, "bce_mean: empty input");
  constexpr double kLo = 1e-12, kHi = 1.0 - 1e-12;
  const std::size_t cnt = tp.size();
  NodeId self = nodes_.size();
  Node n;
  n.kind = OpKind::kBceMean;
  n.inputs = {probs};
  double acc = 0.0;
  for (std::size_t i = 0; i < cnt; ++i) {
    double p = std::clamp(tp.values[i], kLo, kHi);
    acc -= labels[i] * std::log(p) + (1.0 - labels[i]) * std::log(1.0 - p);
  }
  n.out = Tensor::scalar(acc / static_cast<double>(cnt));
  n.out.requires_grad = tp.requires_grad;
  n.backprop = [self, probs, labels, cnt](Tape& t) {
    double g0 = t.node(self).grad[0] / static_cast<double>(cnt);
    const auto& vp = t.value(probs).values;
    auto& gp = t.grad(probs);
    for (std::size_t i = 0; i < cnt; ++i) {
      if (vp[i] <= kLo || vp[i] >= kHi) continue;  // clamped region is flat
      gp[i] += g0 * (vp[i] - labels[i]) / (vp[i] * (1.0 - vp[i]));
    }
    t.touch(probs);
  };
  return push(std::move(n));
}

void Tape::backward(NodeId loss) {
  require(loss < nodes_.size(), "backward: unknown node");
  require(nodes_[loss].out.size() == 1, "backward: loss node must be scalar");
  for (NodeId k = 0; k <= loss; ++k) {
    nodes_[k].grad.assign(nodes_[k].out.size(), 0.0);
    nodes_[k].touched = false;
  }
  nodes_[loss].grad[0] = 1.0;
  nodes_[loss].touched = true;
  for (NodeId k1 = loss + 1; k1 > 0; --k1) {
    Node& nd = nodes_[k1 - 1];
    if (!nd.touched || !nd.backprop) continue;
    nd.backprop(*this);
  }
  // Every bound parameter gets a gradient buffer, zero when off-path.
  for (Node& nd : nodes_) {
    if (nd.external && nd.external->requires_grad) nd.external->ensure_grad();
  }
}

}  // namespace dsm::ad
