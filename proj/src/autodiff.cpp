#include "moedis/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "moedis/errors.hpp"

namespace moedis {

std::string_view op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kMatMul: return "matmul";
    case Op::kTranspose: return "transpose";
    case Op::kReshape: return "reshape";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kDiv: return "div";
    case Op::kScale: return "scale";
    case Op::kShift: return "shift";
    case Op::kSigmoid: return "sigmoid";
    case Op::kTanh: return "tanh";
    case Op::kRelu: return "relu";
    case Op::kSqrt: return "sqrt";
    case Op::kSum: return "sum";
    case Op::kSumRows: return "sum_rows";
    case Op::kSumCols: return "sum_cols";
    case Op::kBroadcastRows: return "broadcast_rows";
    case Op::kBroadcastCols: return "broadcast_cols";
    case Op::kSoftmax: return "softmax";
    case Op::kConv1d: return "conv1d";
    case Op::kBatchNormTrain: return "batch_norm_train";
    case Op::kBatchNormEval: return "batch_norm_eval";
    case Op::kSliceRows: return "slice_rows";
    case Op::kConcatRows: return "concat_rows";
  }
  return "unknown";
}

namespace {

// c (m x p) += op(a) * op(b), where op transposes when the flag is set.
// a is stored m x k (or k x m when ta), b is k x p (or p x k when tb).
void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t p, bool ta,
              bool tb) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t t = 0; t < k; ++t) {
      const double av = ta ? a[t * m + i] : a[i * k + t];
      if (av == 0.0) continue;
      double* crow = c + i * p;
      if (tb) {
        for (std::size_t j = 0; j < p; ++j) crow[j] += av * b[j * k + t];
      } else {
        const double* brow = b + t * p;
        for (std::size_t j = 0; j < p; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

bool is_matrix(const Tensor& t) { return t.rank() == 2; }

void require_matrix(const Tensor& t, std::string_view op) {
  if (!is_matrix(t)) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
  }
}

Shape broadcast_shape(const Tensor& a, const Tensor& b, std::string_view op) {
  if (a.shape() == b.shape()) return a.shape();
  if (b.numel() == 1) return a.shape();
  if (a.numel() == 1) return b.shape();
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_string(a.shape()) + " and " +
                       shape_string(b.shape()));
}

struct SoftmaxLayout {
  std::size_t groups;
  std::size_t length;
  std::size_t stride;
  std::size_t offset(std::size_t g) const { return stride == 1 ? g * length : g; }
};

SoftmaxLayout softmax_layout(const Shape& shape, std::size_t axis) {
  if (axis == 1) return {shape[0], shape[1], 1};
  return {shape[1], shape[0], shape[1]};
}

void conv_acc(const double* x, const double* ker, double* y, std::size_t rows, std::size_t len, std::size_t k) {
  const auto half = static_cast<std::ptrdiff_t>(k / 2);
  const auto n = static_cast<std::ptrdiff_t>(len);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * len;
    double* yr = y + r * len;
    for (std::ptrdiff_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::ptrdiff_t t = 0; t < static_cast<std::ptrdiff_t>(k); ++t) {
        const std::ptrdiff_t src = j + t - half;
        if (src < 0 || src >= n) continue;
        acc += ker[t] * xr[src];
      }
      yr[j] += acc;
    }
  }
}

}  // namespace

struct OpBuilder {
  static Tape& tape_of(std::initializer_list<Var> vars) {
    Tape* tape = nullptr;
    for (const auto& v : vars) {
      if (!v.valid()) throw ArgumentError("operation on an unbound Var");
      if (tape == nullptr) tape = &v.tape();
      if (&v.tape() != tape) throw ArgumentError("operands recorded on different tapes");
    }
    return *tape;
  }

  static Var push(Tape& tape, Op op, std::vector<std::size_t> inputs, Shape shape, std::vector<double> data,
                  double scalar = 0.0, std::size_t p0 = 0, std::size_t p1 = 0, std::vector<double> saved = {}) {
    Tape::Node node;
    node.op = op;
    node.inputs = std::move(inputs);
    node.scalar = scalar;
    node.p0 = p0;
    node.p1 = p1;
    node.saved = std::move(saved);
    for (auto in : node.inputs) node.requires_grad = node.requires_grad || tape.nodes_[in].requires_grad;
    return tape.push(std::move(node), std::move(shape), std::move(data));
  }

  template <class Fn>
  static Var unary(Var a, Op op, Fn&& fn) {
    Tape& tape = tape_of({a});
    const auto& x = a.value();
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fn(x[i]);
    return push(tape, op, {a.id()}, x.shape(), std::move(out));
  }

  template <class Fn>
  static Var binary(Var a, Var b, Op op, Fn&& fn) {
    Tape& tape = tape_of({a, b});
    const auto& x = a.value();
    const auto& y = b.value();
    Shape shape = broadcast_shape(x, y, op_name(op));
    const auto n = shape_size(shape);
    const bool xs = x.numel() == 1;
    const bool ys = y.numel() == 1;
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = fn(x[xs ? 0 : i], y[ys ? 0 : i]);
    return push(tape, op, {a.id(), b.id()}, std::move(shape), std::move(out));
  }
};

const Tensor& Var::value() const {
  if (tape_ == nullptr) throw ArgumentError("value() on an unbound Var");
  return tape_->nodes_[id_].value;
}

bool Var::requires_grad() const { return tape_ != nullptr && tape_->nodes_[id_].requires_grad; }

Var Tape::push(Node node, Shape shape, std::vector<double> data) {
  if (!all_finite(data)) {
    throw NumericError(std::string("non-finite output from ") + std::string(op_name(node.op)));
  }
  node.value = Tensor(Tensor::Unchecked{}, std::move(shape), std::move(data));
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  if (value.empty()) throw ArgumentError("leaf from an empty tensor");
  Node node;
  node.op = Op::kLeaf;
  node.requires_grad = requires_grad;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

void Tape::check_owned(Var v) const {
  if (v.tape_ != this || v.id_ >= nodes_.size()) throw ArgumentError("Var does not belong to this tape");
}

std::vector<double>& Tape::grad_buffer(std::size_t id) {
  auto& g = grads_[id];
  if (g.empty()) g.assign(nodes_[id].value.numel(), 0.0);
  return g;
}

void Tape::backward(Var root) {
  check_owned(root);
  if (node(root).value.numel() != 1) throw DimensionError("backward() requires a one-element root");
  grads_.assign(nodes_.size(), {});
  grads_[root.id_] = {1.0};
  for (std::size_t id = root.id_ + 1; id-- > 0;) {
    if (grads_[id].empty() || !nodes_[id].requires_grad) continue;
    backprop_node(id);
  }
}

Tensor Tape::grad(Var v) const {
  check_owned(v);
  const auto& shape = node(v).value.shape();
  if (v.id_ >= grads_.size() || grads_[v.id_].empty()) return Tensor::zeros(shape);
  return Tensor(shape, grads_[v.id_]);
}

void Tape::backprop_node(std::size_t id) {
  const Node& nd = nodes_[id];
  const std::vector<double> g = grads_[id];
  const auto& y = nd.value;

  auto wants = [&](std::size_t k) { return nodes_[nd.inputs[k]].requires_grad; };
  auto in = [&](std::size_t k) -> const Tensor& { return nodes_[nd.inputs[k]].value; };
  auto gin = [&](std::size_t k) -> std::vector<double>& { return grad_buffer(nd.inputs[k]); };

  auto binary_acc = [&](auto&& da, auto&& db) {
    const auto& a = in(0);
    const auto& b = in(1);
    const bool as = a.numel() == 1 && y.numel() > 1;
    const bool bs = b.numel() == 1 && y.numel() > 1;
    if (wants(0)) {
      auto& ga = gin(0);
      for (std::size_t i = 0; i < g.size(); ++i) ga[as ? 0 : i] += g[i] * da(a[as ? 0 : i], b[bs ? 0 : i], y[i]);
    }
    if (wants(1)) {
      auto& gb = gin(1);
      for (std::size_t i = 0; i < g.size(); ++i) gb[bs ? 0 : i] += g[i] * db(a[as ? 0 : i], b[bs ? 0 : i], y[i]);
    }
  };

  switch (nd.op) {
    case Op::kLeaf:
      break;
    case Op::kMatMul: {
      const auto& a = in(0);
      const auto& b = in(1);
      const auto m = a.rows(), k = a.cols(), p = b.cols();
      if (wants(0)) gemm_acc(g.data(), b.data().data(), gin(0).data(), m, p, k, false, true);
      if (wants(1)) gemm_acc(a.data().data(), g.data(), gin(1).data(), k, m, p, true, false);
      break;
    }
    case Op::kTranspose: {
      if (!wants(0)) break;
      const auto m = y.rows(), n = y.cols();
      auto& ga = gin(0);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[j * m + i] += g[i * n + j];
      break;
    }
    case Op::kReshape:
    case Op::kShift: {
      if (!wants(0)) break;
      auto& ga = gin(0);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      break;
    }
    case Op::kScale: {
      if (!wants(0)) break;
      auto& ga = gin(0);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * nd.scalar;
      break;
    }
    case Op::kAdd:
      binary_acc([](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
      break;
    case Op::kSub:
      binary_acc([](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
      break;
    case Op::kMul:
      binary_acc([](double, double b, double) { return b; }, [](double a, double, double) { return a; });
      break;
    case Op::kDiv:
      binary_acc([](double, double b, double) { return 1.0 / b; },
                 [](double, double b, double out) { return -out / b; });
      break;
    case Op::kSigmoid: {
      if (!wants(0)) break;
      auto& ga = gin(0);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
      break;
    }
    case Op::kTanh: {
      if (!wants(0)) break;
      auto& ga = gin(0);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
      break;
    }
    case Op::kRelu: {
      if (!wants(0)) break;
      const auto& x = in(0);
      auto& ga = gin(0);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += x[i] > 0.0 ? g[i] : 0.0;
      break;
    }
    case Op::kSqrt: {
      if (!wants(0)) break;
      auto& ga = gin(0);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / (2.0 * y[i]);
      break;
    }
    case Op::kSum: {
      if (!wants(0)) break;
      auto& ga = gin(0);
      for (auto& v : ga) v += g[0];
      break;
    }
    case Op::kSumRows:
    case Op::kBroadcastRows: {
      if (!wants(0)) break;
      // sum_rows: input m x n, g is 1 x n.  broadcast_rows: input 1 x n, g is m x n.
      auto& ga = gin(0);
      if (nd.op == Op::kSumRows) {
        const auto m = in(0).rows(), n = in(0).cols();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j];
      } else {
        const auto m = y.rows(), n = y.cols();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) ga[j] += g[i * n + j];
      }
      break;
    }
    case Op::kSumCols:
    case Op::kBroadcastCols: {
      if (!wants(0)) break;
      auto& ga = gin(0);
      if (nd.op == Op::kSumCols) {
        const auto m = in(0).rows(), n = in(0).cols();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[i];
      } else {
        const auto m = y.rows(), n = y.cols();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) ga[i] += g[i * n + j];
      }
      break;
    }
    case Op::kSoftmax: {
      if (!wants(0)) break;
      auto& ga = gin(0);
      const auto lay = softmax_layout(y.shape(), nd.p0);
      for (std::size_t grp = 0; grp < lay.groups; ++grp) {
        const auto off = lay.offset(grp);
        double dot = 0.0;
        for (std::size_t t = 0; t < lay.length; ++t) dot += g[off + t * lay.stride] * y[off + t * lay.stride];
        for (std::size_t t = 0; t < lay.length; ++t) {
          const auto idx = off + t * lay.stride;
          ga[idx] += y[idx] * (g[idx] - dot);
        }
      }
      break;
    }
    case Op::kConv1d: {
      const auto& x = in(0);
      const auto& ker = in(1);
      const auto rows = x.rows(), len = x.cols(), k = ker.numel();
      const auto half = static_cast<std::ptrdiff_t>(k / 2);
      const auto n = static_cast<std::ptrdiff_t>(len);
      const bool wx = wants(0), wk = wants(1);
      std::vector<double>* gx = wx ? &gin(0) : nullptr;
      std::vector<double>* gk = wk ? &gin(1) : nullptr;
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::ptrdiff_t j = 0; j < n; ++j) {
          const double gv = g[r * len + static_cast<std::size_t>(j)];
          if (gv == 0.0) continue;
          for (std::ptrdiff_t t = 0; t < static_cast<std::ptrdiff_t>(k); ++t) {
            const std::ptrdiff_t src = j + t - half;
            if (src < 0 || src >= n) continue;
            const auto xi = r * len + static_cast<std::size_t>(src);
            if (wx) (*gx)[xi] += gv * ker[static_cast<std::size_t>(t)];
            if (wk) (*gk)[static_cast<std::size_t>(t)] += gv * x[xi];
          }
        }
      }
      break;
    }
    case Op::kBatchNormTrain:
    case Op::kBatchNormEval: {
      const auto& x = in(0);
      const auto& gamma = in(1);
      const auto rows = x.rows(), cols = x.cols();
      const double* mean = nd.saved.data();
      const double* inv_std = nd.saved.data() + cols;
      auto xhat = [&](std::size_t r, std::size_t c) { return (x[r * cols + c] - mean[c]) * inv_std[c]; };
      if (wants(1)) {
        auto& gg = gin(1);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) gg[c] += g[r * cols + c] * xhat(r, c);
      }
      if (wants(2)) {
        auto& gb = gin(2);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
      }
      if (wants(0)) {
        auto& gx = gin(0);
        if (nd.op == Op::kBatchNormEval) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += g[r * cols + c] * gamma[c] * inv_std[c];
        } else {
          const double b = static_cast<double>(rows);
          for (std::size_t c = 0; c < cols; ++c) {
            double sum_d = 0.0, sum_dx = 0.0;
            for (std::size_t r = 0; r < rows; ++r) {
              const double d = g[r * cols + c] * gamma[c];
              sum_d += d;
              sum_dx += d * xhat(r, c);
            }
            for (std::size_t r = 0; r < rows; ++r) {
              const double d = g[r * cols + c] * gamma[c];
              gx[r * cols + c] += inv_std[c] / b * (b * d - sum_d - xhat(r, c) * sum_dx);
            }
          }
        }
      }
      break;
    }
    case Op::kSliceRows: {
      if (!wants(0)) break;
      auto& ga = gin(0);
      const auto cols = y.cols();
      for (std::size_t i = 0; i < g.size(); ++i) ga[nd.p0 * cols + i] += g[i];
      break;
    }
    case Op::kConcatRows: {
      std::size_t offset = 0;
      for (std::size_t k = 0; k < nd.inputs.size(); ++k) {
        const auto n = in(k).numel();
        if (wants(k)) {
          auto& gk = gin(k);
          for (std::size_t i = 0; i < n; ++i) gk[i] += g[offset + i];
        }
        offset += n;
      }
      break;
    }
  }
}

Tensor Tape::tangent(std::span<const TangentSeed> seeds, Var output) const {
  check_owned(output);
  std::vector<std::vector<double>> tangents(output.id_ + 1);
  for (const auto& seed : seeds) {
    check_owned(seed.var);
    if (nodes_[seed.var.id_].op != Op::kLeaf) throw ArgumentError("tangent seeds must be leaves");
    if (seed.tangent.shape() != nodes_[seed.var.id_].value.shape()) {
      throw DimensionError("tangent shape " + shape_string(seed.tangent.shape()) + " does not match input " +
                           shape_string(nodes_[seed.var.id_].value.shape()));
    }
    if (seed.var.id_ <= output.id_) tangents[seed.var.id_] = seed.tangent.vector();
  }
  for (std::size_t id = 0; id <= output.id_; ++id) {
    if (nodes_[id].op == Op::kLeaf) continue;
    tangents[id] = tangent_node(id, tangents);
  }
  const auto& shape = nodes_[output.id_].value.shape();
  if (tangents[output.id_].empty()) return Tensor::zeros(shape);
  return Tensor(shape, tangents[output.id_]);
}

std::vector<double> Tape::tangent_node(std::size_t id, const std::vector<std::vector<double>>& tangents) const {
  const Node& nd = nodes_[id];
  bool any = false;
  for (auto in : nd.inputs) any = any || !tangents[in].empty();
  if (!any) return {};

  const auto& y = nd.value;
  const std::size_t n = y.numel();
  auto in = [&](std::size_t k) -> const Tensor& { return nodes_[nd.inputs[k]].value; };
  auto tin = [&](std::size_t k) -> const std::vector<double>* {
    const auto& t = tangents[nd.inputs[k]];
    return t.empty() ? nullptr : &t;
  };
  std::vector<double> out(n, 0.0);

  auto binary_tan = [&](auto&& da, auto&& db) {
    const auto& a = in(0);
    const auto& b = in(1);
    const bool as = a.numel() == 1 && n > 1;
    const bool bs = b.numel() == 1 && n > 1;
    const auto* ta = tin(0);
    const auto* tb = tin(1);
    for (std::size_t i = 0; i < n; ++i) {
      const double av = a[as ? 0 : i], bv = b[bs ? 0 : i];
      if (ta) out[i] += (*ta)[as ? 0 : i] * da(av, bv, y[i]);
      if (tb) out[i] += (*tb)[bs ? 0 : i] * db(av, bv, y[i]);
    }
  };
  auto unary_tan = [&](auto&& d) {
    const auto& t = *tin(0);
    for (std::size_t i = 0; i < n; ++i) out[i] = t[i] * d(i);
  };

  switch (nd.op) {
    case Op::kLeaf:
      break;
    case Op::kMatMul: {
      const auto& a = in(0);
      const auto& b = in(1);
      const auto m = a.rows(), k = a.cols(), p = b.cols();
      if (const auto* ta = tin(0)) gemm_acc(ta->data(), b.data().data(), out.data(), m, k, p, false, false);
      if (const auto* tb = tin(1)) gemm_acc(a.data().data(), tb->data(), out.data(), m, k, p, false, false);
      break;
    }
    case Op::kTranspose: {
      const auto& t = *tin(0);
      const auto m = y.rows(), c = y.cols();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = t[j * m + i];
      break;
    }
    case Op::kReshape:
    case Op::kShift:
      out = *tin(0);
      break;
    case Op::kScale:
      unary_tan([&](std::size_t) { return nd.scalar; });
      break;
    case Op::kAdd:
      binary_tan([](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
      break;
    case Op::kSub:
      binary_tan([](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
      break;
    case Op::kMul:
      binary_tan([](double, double b, double) { return b; }, [](double a, double, double) { return a; });
      break;
    case Op::kDiv:
      binary_tan([](double, double b, double) { return 1.0 / b; },
                 [](double, double b, double o) { return -o / b; });
      break;
    case Op::kSigmoid:
      unary_tan([&](std::size_t i) { return y[i] * (1.0 - y[i]); });
      break;
    case Op::kTanh:
      unary_tan([&](std::size_t i) { return 1.0 - y[i] * y[i]; });
      break;
    case Op::kRelu: {
      const auto& x = in(0);
      unary_tan([&](std::size_t i) { return x[i] > 0.0 ? 1.0 : 0.0; });
      break;
    }
    case Op::kSqrt:
      unary_tan([&](std::size_t i) { return 1.0 / (2.0 * y[i]); });
      break;
    case Op::kSum: {
      double acc = 0.0;
      for (double v : *tin(0)) acc += v;
      out[0] = acc;
      break;
    }
    case Op::kSumRows: {
      const auto& t = *tin(0);
      const auto m = in(0).rows(), c = in(0).cols();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j] += t[i * c + j];
      break;
    }
    case Op::kSumCols: {
      const auto& t = *tin(0);
      const auto m = in(0).rows(), c = in(0).cols();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i] += t[i * c + j];
      break;
    }
    case Op::kBroadcastRows: {
      const auto& t = *tin(0);
      const auto m = y.rows(), c = y.cols();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = t[j];
      break;
    }
    case Op::kBroadcastCols: {
      const auto& t = *tin(0);
      const auto m = y.rows(), c = y.cols();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = t[i];
      break;
    }
    case Op::kSoftmax: {
      const auto& t = *tin(0);
      const auto lay = softmax_layout(y.shape(), nd.p0);
      for (std::size_t grp = 0; grp < lay.groups; ++grp) {
        const auto off = lay.offset(grp);
        double dot = 0.0;
        for (std::size_t k = 0; k < lay.length; ++k) dot += t[off + k * lay.stride] * y[off + k * lay.stride];
        for (std::size_t k = 0; k < lay.length; ++k) {
          const auto idx = off + k * lay.stride;
          out[idx] = y[idx] * (t[idx] - dot);
        }
      }
      break;
    }
    case Op::kConv1d: {
      const auto& x = in(0);
      const auto& ker = in(1);
      const auto rows = x.rows(), len = x.cols(), k = ker.numel();
      if (const auto* tx = tin(0)) conv_acc(tx->data(), ker.data().data(), out.data(), rows, len, k);
      if (const auto* tk = tin(1)) conv_acc(x.data().data(), tk->data(), out.data(), rows, len, k);
      break;
    }
    case Op::kBatchNormTrain:
      throw CapabilityError("forward-mode tangent is not available for batch_norm_train");
    case Op::kBatchNormEval: {
      const auto& x = in(0);
      const auto& gamma = in(1);
      const auto rows = x.rows(), cols = x.cols();
      const double* mean = nd.saved.data();
      const double* inv_std = nd.saved.data() + cols;
      const auto* tx = tin(0);
      const auto* tg = tin(1);
      const auto* tb = tin(2);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
          const auto i = r * cols + c;
          double v = 0.0;
          if (tx) v += (*tx)[i] * gamma[c] * inv_std[c];
          if (tg) v += (*tg)[c] * (x[i] - mean[c]) * inv_std[c];
          if (tb) v += (*tb)[c];
          out[i] = v;
        }
      }
      break;
    }
    case Op::kSliceRows: {
      const auto& t = *tin(0);
      const auto cols = y.cols();
      std::copy_n(t.begin() + static_cast<std::ptrdiff_t>(nd.p0 * cols), n, out.begin());
      break;
    }
    case Op::kConcatRows: {
      std::size_t offset = 0;
      for (std::size_t k = 0; k < nd.inputs.size(); ++k) {
        const auto len = in(k).numel();
        if (const auto* t = tin(k)) std::copy(t->begin(), t->end(), out.begin() + static_cast<std::ptrdiff_t>(offset));
        offset += len;
      }
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Primitive constructors

Var matmul(Var a, Var b) {
  Tape& tape = OpBuilder::tape_of({a, b});
  const auto& x = a.value();
  const auto& y = b.value();
  require_matrix(x, "matmul");
  require_matrix(y, "matmul");
  const auto m = x.rows(), k = x.cols(), p = y.cols();
  if (y.rows() != k) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_string(x.shape()) + " x " +
                         shape_string(y.shape()));
  }
  std::vector<double> out(m * p, 0.0);
  gemm_acc(x.data().data(), y.data().data(), out.data(), m, k, p, false, false);
  return OpBuilder::push(tape, Op::kMatMul, {a.id(), b.id()}, {m, p}, std::move(out));
}

Var transpose(Var a) {
  Tape& tape = OpBuilder::tape_of({a});
  const auto& x = a.value();
  require_matrix(x, "transpose");
  const auto m = x.rows(), n = x.cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
  return OpBuilder::push(tape, Op::kTranspose, {a.id()}, {n, m}, std::move(out));
}

Var reshape(Var a, Shape shape) {
  Tape& tape = OpBuilder::tape_of({a});
  if (shape_size(shape) != a.numel()) {
    throw DimensionError("reshape: " + shape_string(a.shape()) + " to " + shape_string(shape));
  }
  return OpBuilder::push(tape, Op::kReshape, {a.id()}, std::move(shape), a.value().vector());
}

Var add(Var a, Var b) {
  return OpBuilder::binary(a, b, Op::kAdd, [](double x, double y) { return x + y; });
}
Var sub(Var a, Var b) {
  return OpBuilder::binary(a, b, Op::kSub, [](double x, double y) { return x - y; });
}
Var mul(Var a, Var b) {
  return OpBuilder::binary(a, b, Op::kMul, [](double x, double y) { return x * y; });
}
Var div(Var a, Var b) {
  return OpBuilder::binary(a, b, Op::kDiv, [](double x, double y) { return x / y; });
}

Var scale(Var a, double c) {
  Tape& tape = OpBuilder::tape_of({a});
  const auto& x = a.value();
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * c;
  return OpBuilder::push(tape, Op::kScale, {a.id()}, x.shape(), std::move(out), c);
}

Var shift(Var a, double c) {
  Tape& tape = OpBuilder::tape_of({a});
  const auto& x = a.value();
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + c;
  return OpBuilder::push(tape, Op::kShift, {a.id()}, x.shape(), std::move(out), c);
}

Var sigmoid(Var a) {
  return OpBuilder::unary(a, Op::kSigmoid, [](double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  });
}

Var tanh(Var a) {
  return OpBuilder::unary(a, Op::kTanh, [](double x) { return std::tanh(x); });
}

Var relu(Var a) {
  return OpBuilder::unary(a, Op::kRelu, [](double x) { return x > 0.0 ? x : 0.0; });
}

Var sqrt(Var a) {
  return OpBuilder::unary(a, Op::kSqrt, [](double x) {
    if (x < 0.0) throw NumericError("sqrt of a negative value");
    return std::sqrt(x);
  });
}

Var sum(Var a) {
  Tape& tape = OpBuilder::tape_of({a});
  double acc = 0.0;
  for (double v : a.value().data()) acc += v;
  return OpBuilder::push(tape, Op::kSum, {a.id()}, {1, 1}, {acc});
}

Var sum_rows(Var a) {
  Tape& tape = OpBuilder::tape_of({a});
  const auto& x = a.value();
  require_matrix(x, "sum_rows");
  const auto m = x.rows(), n = x.cols();
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += x[i * n + j];
  return OpBuilder::push(tape, Op::kSumRows, {a.id()}, {1, n}, std::move(out));
}

Var sum_cols(Var a) {
  Tape& tape = OpBuilder::tape_of({a});
  const auto& x = a.value();
  require_matrix(x, "sum_cols");
  const auto m = x.rows(), n = x.cols();
  std::vector<double> out(m, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i] += x[i * n + j];
  return OpBuilder::push(tape, Op::kSumCols, {a.id()}, {m, 1}, std::move(out));
}

Var broadcast_rows(Var a, std::size_t rows) {
  Tape& tape = OpBuilder::tape_of({a});
  const auto& x = a.value();
  require_matrix(x, "broadcast_rows");
  if (x.rows() != 1 || rows == 0) throw DimensionError("broadcast_rows: expected a 1 x n input");
  const auto n = x.cols();
  std::vector<double> out(rows * n);
  for (std::size_t i = 0; i < rows; ++i) std::copy_n(x.data().begin(), n, out.begin() + static_cast<std::ptrdiff_t>(i * n));
  return OpBuilder::push(tape, Op::kBroadcastRows, {a.id()}, {rows, n}, std::move(out));
}

Var broadcast_cols(Var a, std::size_t cols) {
  Tape& tape = OpBuilder::tape_of({a});
  const auto& x = a.value();
  require_matrix(x, "broadcast_cols");
  if (x.cols() != 1 || cols == 0) throw DimensionError("broadcast_cols: expected an m x 1 input");
  const auto m = x.rows();
  std::vector<double> out(m * cols);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = x[i];
  return OpBuilder::push(tape, Op::kBroadcastCols, {a.id()}, {m, cols}, std::move(out));
}

Var softmax(Var a, int axis) {
  Tape& tape = OpBuilder::tape_of({a});
  const auto& x = a.value();
  require_matrix(x, "softmax");
  if (axis < 0) axis += 2;
  if (axis != 0 && axis != 1) throw ArgumentError("softmax: axis must be 0 or 1");
  const auto lay = softmax_layout(x.shape(), static_cast<std::size_t>(axis));
  std::vector<double> out(x.numel());
  for (std::size_t grp = 0; grp < lay.groups; ++grp) {
    const auto off = lay.offset(grp);
    double mx = x[off];
    for (std::size_t t = 1; t < lay.length; ++t) mx = std::max(mx, x[off + t * lay.stride]);
    double total = 0.0;
    for (std::size_t t = 0; t < lay.length; ++t) {
      const auto idx = off + t * lay.stride;
      out[idx] = std::exp(x[idx] - mx);
      total += out[idx];
    }
    for (std::size_t t = 0; t < lay.length; ++t) out[off + t * lay.stride] /= total;
  }
  return OpBuilder::push(tape, Op::kSoftmax, {a.id()}, x.shape(), std::move(out), 0.0,
                         static_cast<std::size_t>(axis));
}

Var conv1d(Var x, Var kernel) {
  Tape& tape = OpBuilder::tape_of({x, kernel});
  const auto& xv = x.value();
  const auto& kv = kernel.value();
  require_matrix(xv, "conv1d");
  const auto k = kv.numel();
  if (k % 2 == 0) throw ConfigError("conv1d: kernel length must be odd, got " + std::to_string(k));
  if (k > xv.cols()) throw ConfigError("conv1d: kernel longer than the signal");
  std::vector<double> out(xv.numel(), 0.0);
  conv_acc(xv.data().data(), kv.data().data(), out.data(), xv.rows(), xv.cols(), k);
  return OpBuilder::push(tape, Op::kConv1d, {x.id(), kernel.id()}, xv.shape(), std::move(out));
}

namespace {

void check_bn_shapes(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  require_matrix(x, "batch_norm");
  if (gamma.numel() != x.cols() || beta.numel() != x.cols()) {
    throw DimensionError("batch_norm: affine parameters must have one entry per feature");
  }
}

Var bn_apply(Tape& tape, Op op, Var x, Var gamma, Var beta, std::vector<double> mean, std::vector<double> inv_std) {
  const auto& xv = x.value();
  const auto& g = gamma.value();
  const auto& b = beta.value();
  const auto rows = xv.rows(), cols = xv.cols();
  std::vector<double> out(xv.numel());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      out[r * cols + c] = (xv[r * cols + c] - mean[c]) * inv_std[c] * g[c] + b[c];
  std::vector<double> saved = std::move(mean);
  saved.insert(saved.end(), inv_std.begin(), inv_std.end());
  return OpBuilder::push(tape, op, {x.id(), gamma.id(), beta.id()}, xv.shape(), std::move(out), 0.0, 0, 0,
                         std::move(saved));
}

}  // namespace

Var batch_norm_train(Var x, Var gamma, Var beta, BatchNormStats& stats) {
  Tape& tape = OpBuilder::tape_of({x, gamma, beta});
  const auto& xv = x.value();
  check_bn_shapes(xv, gamma.value(), beta.value());
  const auto rows = xv.rows(), cols = xv.cols();
  if (stats.running_mean.numel() != cols || stats.running_var.numel() != cols) {
    throw DimensionError("batch_norm: running stats must have one entry per feature");
  }
  std::vector<double> mean(cols, 0.0), var(cols, 0.0), inv_std(cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) mean[c] += xv[r * cols + c];
  for (auto& m : mean) m /= static_cast<double>(rows);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const double d = xv[r * cols + c] - mean[c];
      var[c] += d * d;
    }
  for (std::size_t c = 0; c < cols; ++c) {
    var[c] /= static_cast<double>(rows);
    inv_std[c] = 1.0 / std::sqrt(var[c] + kBatchNormEps);
  }

  std::vector<double> rm = stats.running_mean.vector();
  std::vector<double> rv = stats.running_var.vector();
  for (std::size_t c = 0; c < cols; ++c) {
    rm[c] = (1.0 - kBatchNormMomentum) * rm[c] + kBatchNormMomentum * mean[c];
    if (rows > 1) {
      const double unbiased = var[c] * static_cast<double>(rows) / static_cast<double>(rows - 1);
      rv[c] = (1.0 - kBatchNormMomentum) * rv[c] + kBatchNormMomentum * unbiased;
    }
  }
  stats.running_mean = Tensor(stats.running_mean.shape(), std::move(rm));
  stats.running_var = Tensor(stats.running_var.shape(), std::move(rv));

  return bn_apply(tape, Op::kBatchNormTrain, x, gamma, beta, std::move(mean), std::move(inv_std));
}

Var batch_norm_eval(Var x, Var gamma, Var beta, const BatchNormStats& stats) {
  Tape& tape = OpBuilder::tape_of({x, gamma, beta});
  const auto& xv = x.value();
  check_bn_shapes(xv, gamma.value(), beta.value());
  const auto cols = xv.cols();
  if (stats.running_mean.numel() != cols || stats.running_var.numel() != cols) {
    throw DimensionError("batch_norm: running stats must have one entry per feature");
  }
  std::vector<double> mean = stats.running_mean.vector();
  std::vector<double> inv_std(cols);
  for (std::size_t c = 0; c < cols; ++c) inv_std[c] = 1.0 / std::sqrt(stats.running_var[c] + kBatchNormEps);
  return bn_apply(tape, Op::kBatchNormEval, x, gamma, beta, std::move(mean), std::move(inv_std));
}

Var slice_rows(Var a, std::size_t begin, std::size_t count) {
  Tape& tape = OpBuilder::tape_of({a});
  const auto& x = a.value();
  require_matrix(x, "slice_rows");
  if (count == 0 || begin + count > x.rows()) throw ArgumentError("slice_rows: range out of bounds");
  const auto cols = x.cols();
  std::vector<double> out(x.data().begin() + static_cast<std::ptrdiff_t>(begin * cols),
                          x.data().begin() + static_cast<std::ptrdiff_t>((begin + count) * cols));
  return OpBuilder::push(tape, Op::kSliceRows, {a.id()}, {count, cols}, std::move(out), 0.0, begin, count);
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ArgumentError("concat_rows: no inputs");
  Tape& tape = OpBuilder::tape_of({parts.front()});
  const auto cols = parts.front().cols();
  std::size_t rows = 0;
  std::vector<std::size_t> ids;
  std::vector<double> out;
  for (const auto& p : parts) {
    OpBuilder::tape_of({parts.front(), p});
    require_matrix(p.value(), "concat_rows");
    if (p.cols() != cols) throw DimensionError("concat_rows: column counts differ");
    rows += p.rows();
    ids.push_back(p.id());
    out.insert(out.end(), p.value().data().begin(), p.value().data().end());
  }
  return OpBuilder::push(tape, Op::kConcatRows, std::move(ids), {rows, cols}, std::move(out));
}

// ---------------------------------------------------------------------------

Tensor jvp(const TracedFn& f, const Tensor& z, const Tensor& v) {
  if (v.shape() != z.shape()) throw DimensionError("jvp: tangent shape must match the input");
  Tape tape;
  Var in = tape.leaf(z, false);
  Var out = f(tape, in);
  Tape::TangentSeed seed{in, v};
  return tape.tangent(std::span(&seed, 1), out);
}

Tensor jacobian(const TracedFn& f, const Tensor& z) {
  Tape tape;
  Var in = tape.leaf(z, false);
  Var out = f(tape, in);
  const auto k = z.numel();
  const auto f_dim = out.numel();
  std::vector<double> jac(f_dim * k);
  std::vector<double> basis(k, 0.0);
  for (std::size_t c = 0; c < k; ++c) {
    basis[c] = 1.0;
    Tape::TangentSeed seed{in, Tensor(z.shape(), basis)};
    const auto col = tape.tangent(std::span(&seed, 1), out);
    for (std::size_t r = 0; r < f_dim; ++r) jac[r * k + c] = col[r];
    basis[c] = 0.0;
  }
  return Tensor({f_dim, k}, std::move(jac));
}

Tensor gradient(const TracedFn& f, const Tensor& x) {
  Tape tape;
  Var in = tape.leaf(x, true);
  Var out = f(tape, in);
  tape.backward(out);
  return tape.grad(in);
}

Tensor evaluate(const TracedFn& f, const Tensor& x) {
  Tape tape;
  Var in = tape.leaf(x, false);
  return f(tape, in).value();
}

}  // namespace moedis
