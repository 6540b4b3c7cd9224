#include "dpn/tensor.hpp"

#include <cmath>
#include <cstdlib>
#include <sstream>
#include <stdexcept>
#include <utility>

namespace dpn {

int numel(const Shape& shape) {
  int n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

namespace {

[[noreturn]] void shape_error(const char* what, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(what) + ": " + shape_str(a) + " vs " +
                              shape_str(b));
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)) {
  if (numel(shape_) != static_cast<int>(data.size())) {
    throw std::invalid_argument("tensor data size " +
                                std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape_));
  }
  data_ = std::make_shared<const std::vector<double>>(std::move(data));
}

Tensor::Tensor(double value) : Tensor(Shape{1}, std::vector<double>{value}) {}

Tensor Tensor::zeros(Shape shape) {
  int n = numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::full(Shape shape, double value) {
  int n = numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

const Shape& Tensor::shape() const {
  if (graph_) return graph_->at(node_).shape;
  if (!data_) throw std::logic_error("use of undefined tensor");
  return shape_;
}

const std::vector<double>& Tensor::data() const {
  if (graph_) return graph_->at(node_).val;
  if (!data_) throw std::logic_error("use of undefined tensor");
  return *data_;
}

int Tensor::size() const { return numel(shape()); }

double Tensor::item() const {
  if (size() != 1) {
    throw std::invalid_argument("item() on tensor of shape " + shape_str(shape()));
  }
  return data()[0];
}

Tensor Tensor::detach() const { return Tensor(shape(), data()); }

// ---------------------------------------------------------------------------
// Graph

Tensor Graph::input(Shape shape, std::vector<double> data) {
  if (numel(shape) != static_cast<int>(data.size())) {
    throw std::invalid_argument("input data size does not match shape " +
                                shape_str(shape));
  }
  Node n;
  n.op = Op::kLeaf;
  n.shape = std::move(shape);
  n.val = std::move(data);
  return emit(std::move(n));
}

Tensor Graph::input(const Tensor& value) {
  return input(value.shape(), value.data());
}

Tensor Graph::emit(Node node) {
  nodes_.push_back(std::move(node));
  return Tensor(this, static_cast<int>(nodes_.size()) - 1);
}

// ---------------------------------------------------------------------------
// Kernels (shared by the graph path and the eager constant path)

namespace {

using Vec = std::vector<double>;

void check_broadcast(const Shape& sa, const Shape& sb) {
  int na = numel(sa), nb = numel(sb);
  if (na == nb && sa == sb) return;
  if (na == 1 || nb == 1) return;
  shape_error("elementwise shape mismatch", sa, sb);
}

template <typename F>
Vec ew_binary(const Vec& a, const Vec& b, F f) {
  size_t na = a.size(), nb = b.size();
  size_t n = std::max(na, nb);
  Vec out(n);
  if (na == nb) {
    for (size_t i = 0; i < n; ++i) out[i] = f(a[i], b[i]);
  } else if (na == 1) {
    double av = a[0];
    for (size_t i = 0; i < n; ++i) out[i] = f(av, b[i]);
  } else {
    double bv = b[0];
    for (size_t i = 0; i < n; ++i) out[i] = f(a[i], bv);
  }
  return out;
}

template <typename F>
Vec ew_unary(const Vec& x, F f) {
  Vec out(x.size());
  for (size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return out;
}

double softplus_stable(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid_stable(double x) {
  if (x >= 0) {
    double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  double e = std::exp(x);
  return e / (1.0 + e);
}

double huber_point(double x, double delta) {
  double ax = std::abs(x);
  return ax <= delta ? 0.5 * x * x : delta * ax - 0.5 * delta * delta;
}

Vec matmul_kernel(const Vec& a, const Vec& b, int m, int k, int n) {
  Vec out(static_cast<size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i) {
    const double* arow = a.data() + static_cast<size_t>(i) * k;
    double* orow = out.data() + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b.data() + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

int conv_out_dim(int in, int stride) { return (in + stride - 1) / stride; }

// y[o,oh,ow] = sum_{c,kh,kw} x[c, oh*s - p + kh, ow*s - p + kw] * w[o,c,kh,kw]
Vec conv2d_kernel(const Vec& x, const Vec& w, int cin, int h, int wd, int cout,
                  int kh, int kw, int stride) {
  int p = (kh - 1) / 2;
  int ho = conv_out_dim(h, stride);
  int wo = conv_out_dim(wd, stride);
  Vec out(static_cast<size_t>(cout) * ho * wo, 0.0);
  for (int o = 0; o < cout; ++o) {
    for (int c = 0; c < cin; ++c) {
      const double* xc = x.data() + static_cast<size_t>(c) * h * wd;
      const double* wk = w.data() + (static_cast<size_t>(o) * cin + c) * kh * kw;
      double* yo = out.data() + static_cast<size_t>(o) * ho * wo;
      for (int a = 0; a < kh; ++a) {
        for (int b = 0; b < kw; ++b) {
          double wv = wk[a * kw + b];
          if (wv == 0.0) continue;
          for (int oh = 0; oh < ho; ++oh) {
            int ih = oh * stride - p + a;
            if (ih < 0 || ih >= h) continue;
            const double* xrow = xc + static_cast<size_t>(ih) * wd;
            double* yrow = yo + static_cast<size_t>(oh) * wo;
            for (int ow = 0; ow < wo; ++ow) {
              int iw = ow * stride - p + b;
              if (iw < 0 || iw >= wd) continue;
              yrow[ow] += wv * xrow[iw];
            }
          }
        }
      }
    }
  }
  return out;
}

// xbar[c,ih,iw] = sum_{o,kh,kw} g[o,oh,ow] * w[o,c,kh,kw] over valid (oh,ow)
Vec conv2d_input_grad_kernel(const Vec& g, const Vec& w, int cin, int h, int wd,
                             int cout, int kh, int kw, int stride) {
  int p = (kh - 1) / 2;
  int ho = conv_out_dim(h, stride);
  int wo = conv_out_dim(wd, stride);
  Vec out(static_cast<size_t>(cin) * h * wd, 0.0);
  for (int o = 0; o < cout; ++o) {
    const double* go = g.data() + static_cast<size_t>(o) * ho * wo;
    for (int c = 0; c < cin; ++c) {
      const double* wk = w.data() + (static_cast<size_t>(o) * cin + c) * kh * kw;
      double* xc = out.data() + static_cast<size_t>(c) * h * wd;
      for (int a = 0; a < kh; ++a) {
        for (int b = 0; b < kw; ++b) {
          double wv = wk[a * kw + b];
          if (wv == 0.0) continue;
          for (int oh = 0; oh < ho; ++oh) {
            int ih = oh * stride - p + a;
            if (ih < 0 || ih >= h) continue;
            const double* grow = go + static_cast<size_t>(oh) * wo;
            double* xrow = xc + static_cast<size_t>(ih) * wd;
            for (int ow = 0; ow < wo; ++ow) {
              int iw = ow * stride - p + b;
              if (iw < 0 || iw >= wd) continue;
              xrow[iw] += wv * grow[ow];
            }
          }
        }
      }
    }
  }
  return out;
}

// wbar[o,c,kh,kw] = sum_{oh,ow} g[o,oh,ow] * x[c, oh*s - p + kh, ow*s - p + kw]
Vec conv2d_kernel_grad_kernel(const Vec& x, const Vec& g, int cin, int h,
                              int wd, int cout, int kh, int kw, int stride) {
  int p = (kh - 1) / 2;
  int ho = conv_out_dim(h, stride);
  int wo = conv_out_dim(wd, stride);
  Vec out(static_cast<size_t>(cout) * cin * kh * kw, 0.0);
  for (int o = 0; o < cout; ++o) {
    const double* go = g.data() + static_cast<size_t>(o) * ho * wo;
    for (int c = 0; c < cin; ++c) {
      const double* xc = x.data() + static_cast<size_t>(c) * h * wd;
      double* wk = out.data() + (static_cast<size_t>(o) * cin + c) * kh * kw;
      for (int a = 0; a < kh; ++a) {
        for (int b = 0; b < kw; ++b) {
          double acc = 0.0;
          for (int oh = 0; oh < ho; ++oh) {
            int ih = oh * stride - p + a;
            if (ih < 0 || ih >= h) continue;
            const double* grow = go + static_cast<size_t>(oh) * wo;
            const double* xrow = xc + static_cast<size_t>(ih) * wd;
            for (int ow = 0; ow < wo; ++ow) {
              int iw = ow * stride - p + b;
              if (iw < 0 || iw >= wd) continue;
              acc += grow[ow] * xrow[iw];
            }
          }
          wk[a * kw + b] = acc;
        }
      }
    }
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Op construction

struct OpsImpl {
  // Resolves the graph for an op over the given operands, promoting detached
  // constants to leaves. Returns nullptr when all operands are detached.
  static Graph* resolve(std::initializer_list<const Tensor*> ts) {
    Graph* g = nullptr;
    for (const Tensor* t : ts) {
      if (!t->defined()) throw std::logic_error("use of undefined tensor");
      if (t->in_graph()) {
        if (g && g != t->graph()) {
          throw std::invalid_argument("operands belong to different graphs");
        }
        g = t->graph();
      }
    }
    return g;
  }

  static int as_node(Graph* g, const Tensor& t) {
    if (t.in_graph()) return t.node_;
    return g->input(t).node_;
  }

  static Tensor unary(Op op, const Tensor& x, Vec val, double p0 = 0.0,
                      double p1 = 0.0) {
    Graph* g = resolve({&x});
    if (!g) return Tensor(x.shape(), std::move(val));
    Graph::Node n;
    n.op = op;
    n.a = as_node(g, x);
    n.shape = x.shape();
    n.val = std::move(val);
    n.p0 = p0;
    n.p1 = p1;
    return g->emit(std::move(n));
  }

  static Tensor binary(Op op, const Tensor& a, const Tensor& b, Vec val) {
    check_broadcast(a.shape(), b.shape());
    Shape out_shape = a.size() == 1 && b.size() > 1 ? b.shape() : a.shape();
    Graph* g = resolve({&a, &b});
    if (!g) return Tensor(std::move(out_shape), std::move(val));
    Graph::Node n;
    n.op = op;
    n.a = as_node(g, a);
    n.b = as_node(g, b);
    n.shape = std::move(out_shape);
    n.val = std::move(val);
    return g->emit(std::move(n));
  }

  static Tensor shaped(Op op, const Tensor& a, const Tensor* b, Shape shape,
                       Vec val, int i0 = 0, int i1 = 0, int i2 = 0) {
    Graph* g = b ? resolve({&a, b}) : resolve({&a});
    if (!g) return Tensor(std::move(shape), std::move(val));
    Graph::Node n;
    n.op = op;
    n.a = as_node(g, a);
    if (b) n.b = as_node(g, *b);
    n.shape = std::move(shape);
    n.val = std::move(val);
    n.i0 = i0;
    n.i1 = i1;
    n.i2 = i2;
    return g->emit(std::move(n));
  }

  static Tensor nary(Op op, const std::vector<Tensor>& parts, Graph* g,
                     Shape shape, Vec val) {
    Graph::Node n;
    n.op = op;
    n.shape = std::move(shape);
    n.val = std::move(val);
    for (const Tensor& t : parts) n.extra.push_back(as_node(g, t));
    return g->emit(std::move(n));
  }
};

namespace {

Tensor make_binary(Op op, const Tensor& a, const Tensor& b,
                   double (*f)(double, double)) {
  check_broadcast(a.shape(), b.shape());
  return OpsImpl::binary(op, a, b, ew_binary(a.data(), b.data(), f));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return make_binary(Op::kAdd, a, b, [](double x, double y) { return x + y; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return make_binary(Op::kSub, a, b, [](double x, double y) { return x - y; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return make_binary(Op::kMul, a, b, [](double x, double y) { return x * y; });
}

Tensor divide(const Tensor& a, const Tensor& b) {
  for (double d : b.data()) {
    if (d == 0.0) throw std::domain_error("division by zero");
  }
  return make_binary(Op::kDiv, a, b, [](double x, double y) { return x / y; });
}

Tensor neg(const Tensor& x) {
  return OpsImpl::unary(Op::kNeg, x, ew_unary(x.data(), [](double v) { return -v; }));
}

Tensor exp(const Tensor& x) {
  return OpsImpl::unary(Op::kExp, x,
                        ew_unary(x.data(), [](double v) { return std::exp(v); }));
}

Tensor log(const Tensor& x) {
  for (double v : x.data()) {
    if (v <= 0.0) throw std::domain_error("log of non-positive value");
  }
  return OpsImpl::unary(Op::kLog, x,
                        ew_unary(x.data(), [](double v) { return std::log(v); }));
}

Tensor tanh(const Tensor& x) {
  return OpsImpl::unary(Op::kTanh, x,
                        ew_unary(x.data(), [](double v) { return std::tanh(v); }));
}

Tensor relu(const Tensor& x) {
  return OpsImpl::unary(Op::kRelu, x,
                        ew_unary(x.data(), [](double v) { return v > 0 ? v : 0.0; }));
}

Tensor softplus(const Tensor& x) {
  return OpsImpl::unary(Op::kSoftplus, x, ew_unary(x.data(), softplus_stable));
}

Tensor sigmoid(const Tensor& x) {
  return OpsImpl::unary(Op::kSigmoid, x, ew_unary(x.data(), sigmoid_stable));
}

Tensor square(const Tensor& x) {
  return OpsImpl::unary(Op::kSquare, x,
                        ew_unary(x.data(), [](double v) { return v * v; }));
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  if (lo > hi) throw std::invalid_argument("clamp: lo > hi");
  return OpsImpl::unary(
      Op::kClamp, x,
      ew_unary(x.data(), [=](double v) { return v < lo ? lo : (v > hi ? hi : v); }),
      lo, hi);
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  return make_binary(Op::kMin, a, b,
                     [](double x, double y) { return x <= y ? x : y; });
}

Tensor huber_elementwise(const Tensor& x, double delta) {
  if (delta <= 0) throw std::invalid_argument("huber delta must be positive");
  return OpsImpl::unary(
      Op::kHuber, x,
      ew_unary(x.data(), [=](double v) { return huber_point(v, delta); }), delta);
}

namespace {

Tensor step_mask(const Tensor& x) {
  return OpsImpl::unary(Op::kStep, x,
                        ew_unary(x.data(), [](double v) { return v > 0 ? 1.0 : 0.0; }));
}

Tensor in_band_mask(const Tensor& x, double lo, double hi) {
  return OpsImpl::unary(
      Op::kInBand, x,
      ew_unary(x.data(), [=](double v) { return v >= lo && v <= hi ? 1.0 : 0.0; }),
      lo, hi);
}

Tensor le_mask(const Tensor& a, const Tensor& b) {
  return make_binary(Op::kLeMask, a, b,
                     [](double x, double y) { return x <= y ? 1.0 : 0.0; });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
    shape_error("matmul shape mismatch", sa, sb);
  }
  int m = sa[0], k = sa[1], n = sb[1];
  return OpsImpl::shaped(Op::kMatmul, a, &b, Shape{m, n},
                         matmul_kernel(a.data(), b.data(), m, k, n));
}

Tensor transpose(const Tensor& x) {
  const Shape& s = x.shape();
  if (s.size() != 2) {
    throw std::invalid_argument("transpose requires a 2-D tensor, got " +
                                shape_str(s));
  }
  int r = s[0], c = s[1];
  const Vec& v = x.data();
  Vec out(v.size());
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < c; ++j) {
      out[static_cast<size_t>(j) * r + i] = v[static_cast<size_t>(i) * c + j];
    }
  }
  return OpsImpl::shaped(Op::kTranspose, x, nullptr, Shape{c, r}, std::move(out));
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  return OpsImpl::shaped(Op::kSum, x, nullptr, Shape{1}, Vec{acc});
}

namespace {

Tensor broadcast_scalar(const Tensor& s, const Shape& shape) {
  double v = s.item();
  return OpsImpl::shaped(Op::kBroadcastScalar, s, nullptr, shape,
                         Vec(numel(shape), v));
}

}  // namespace

Tensor sum_rows(const Tensor& x) {
  const Shape& s = x.shape();
  if (s.size() != 2) {
    throw std::invalid_argument("sum_rows requires a 2-D tensor, got " +
                                shape_str(s));
  }
  int r = s[0], c = s[1];
  const Vec& v = x.data();
  Vec out(c, 0.0);
  for (int i = 0; i < r; ++i) {
    const double* prow = v.data() + static_cast<size_t>(i) * c;
    for (int j = 0; j < c; ++j) out[j] += prow[j];
  }
  return OpsImpl::shaped(Op::kSumRows, x, nullptr, Shape{c}, std::move(out));
}

Tensor broadcast_rows(const Tensor& v, int rows) {
  if (v.shape().size() != 1) {
    throw std::invalid_argument("broadcast_rows requires a 1-D tensor, got " +
                                shape_str(v.shape()));
  }
  if (rows <= 0) throw std::invalid_argument("broadcast_rows: rows must be positive");
  int c = v.size();
  const Vec& src = v.data();
  Vec out(static_cast<size_t>(rows) * c);
  for (int i = 0; i < rows; ++i) {
    std::copy(src.begin(), src.end(), out.begin() + static_cast<size_t>(i) * c);
  }
  return OpsImpl::shaped(Op::kBroadcastRows, v, nullptr, Shape{rows, c},
                         std::move(out), rows);
}

Tensor sum_chan(const Tensor& x) {
  const Shape& s = x.shape();
  if (s.size() != 3) {
    throw std::invalid_argument("sum_chan requires a 3-D tensor, got " +
                                shape_str(s));
  }
  int c = s[0], hw = s[1] * s[2];
  const Vec& v = x.data();
  Vec out(c, 0.0);
  for (int i = 0; i < c; ++i) {
    const double* p = v.data() + static_cast<size_t>(i) * hw;
    double acc = 0.0;
    for (int j = 0; j < hw; ++j) acc += p[j];
    out[i] = acc;
  }
  return OpsImpl::shaped(Op::kSumChan, x, nullptr, Shape{c}, std::move(out));
}

Tensor broadcast_chan(const Tensor& v, int h, int w) {
  if (v.shape().size() != 1) {
    throw std::invalid_argument("broadcast_chan requires a 1-D tensor, got " +
                                shape_str(v.shape()));
  }
  int c = v.size();
  const Vec& src = v.data();
  Vec out(static_cast<size_t>(c) * h * w);
  for (int i = 0; i < c; ++i) {
    std::fill(out.begin() + static_cast<size_t>(i) * h * w,
              out.begin() + static_cast<size_t>(i + 1) * h * w, src[i]);
  }
  return OpsImpl::shaped(Op::kBroadcastChan, v, nullptr, Shape{c, h, w},
                         std::move(out), 0, h, w);
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    shape_error("reshape element count mismatch", x.shape(), shape);
  }
  return OpsImpl::shaped(Op::kReshape, x, nullptr, std::move(shape), x.data());
}

Tensor slice(const Tensor& x, int offset, int len) {
  if (offset < 0 || len < 0 || offset + len > x.size()) {
    throw std::invalid_argument("slice range [" + std::to_string(offset) + "," +
                                std::to_string(offset + len) +
                                ") out of bounds for " + shape_str(x.shape()));
  }
  const Vec& v = x.data();
  Vec out(v.begin() + offset, v.begin() + offset + len);
  return OpsImpl::shaped(Op::kSlice, x, nullptr, Shape{len}, std::move(out),
                         offset, len);
}

Tensor row(const Tensor& m, int r) {
  const Shape& s = m.shape();
  if (s.size() != 2) {
    throw std::invalid_argument("row requires a 2-D tensor, got " + shape_str(s));
  }
  if (r < 0 || r >= s[0]) throw std::invalid_argument("row index out of range");
  return slice(m, r * s[1], s[1]);
}

namespace {

Tensor pad_slice(const Tensor& g, int offset, const Shape& full) {
  Vec out(numel(full), 0.0);
  const Vec& v = g.data();
  std::copy(v.begin(), v.end(), out.begin() + offset);
  return OpsImpl::shaped(Op::kPadSlice, g, nullptr, full, std::move(out), offset);
}

}  // namespace

Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat of zero tensors");
  Graph* g = nullptr;
  int total = 0;
  for (const Tensor& t : parts) {
    if (t.in_graph()) {
      if (g && g != t.graph()) {
        throw std::invalid_argument("operands belong to different graphs");
      }
      g = t.graph();
    }
    total += t.size();
  }
  Vec out;
  out.reserve(total);
  for (const Tensor& t : parts) {
    const Vec& v = t.data();
    out.insert(out.end(), v.begin(), v.end());
  }
  if (!g) return Tensor(Shape{total}, std::move(out));
  return OpsImpl::nary(Op::kConcat, parts, g, Shape{total}, std::move(out));
}

namespace {

void check_conv_shapes(const Shape& x, const Shape& w) {
  if (x.size() != 3 || w.size() != 4) {
    shape_error("conv2d expects input {C,H,W} and kernels {O,C,k,k}", x, w);
  }
  if (w[1] != x[0]) shape_error("conv2d channel mismatch", x, w);
  if (w[2] != w[3] || w[2] % 2 == 0) {
    throw std::invalid_argument("conv2d kernels must be square with odd size, got " +
                                shape_str(w));
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernels, int stride) {
  check_conv_shapes(input.shape(), kernels.shape());
  if (stride < 1) throw std::invalid_argument("conv2d stride must be positive");
  int cin = input.shape()[0], h = input.shape()[1], w = input.shape()[2];
  int cout = kernels.shape()[0], k = kernels.shape()[2];
  if (h < k || w < k) {
    throw std::invalid_argument("conv2d input " + shape_str(input.shape()) +
                                " smaller than kernel size " + std::to_string(k));
  }
  Shape out{cout, conv_out_dim(h, stride), conv_out_dim(w, stride)};
  return OpsImpl::shaped(
      Op::kConv2d, input, &kernels, out,
      conv2d_kernel(input.data(), kernels.data(), cin, h, w, cout, k, k, stride),
      stride);
}

Tensor conv2d_input_grad(const Tensor& gout, const Tensor& kernels, int stride,
                         int in_h, int in_w) {
  const Shape& sg = gout.shape();
  const Shape& sw = kernels.shape();
  if (sg.size() != 3 || sw.size() != 4 || sg[0] != sw[0]) {
    shape_error("conv2d_input_grad shape mismatch", sg, sw);
  }
  if (conv_out_dim(in_h, stride) != sg[1] || conv_out_dim(in_w, stride) != sg[2]) {
    throw std::invalid_argument("conv2d_input_grad output size " + shape_str(sg) +
                                " inconsistent with input " + std::to_string(in_h) +
                                "x" + std::to_string(in_w) + " at stride " +
                                std::to_string(stride));
  }
  int cin = sw[1], cout = sw[0], k = sw[2];
  Shape out{cin, in_h, in_w};
  return OpsImpl::shaped(Op::kConv2dInputGrad, gout, &kernels, out,
                         conv2d_input_grad_kernel(gout.data(), kernels.data(), cin,
                                                  in_h, in_w, cout, k, k, stride),
                         stride, in_h, in_w);
}

Tensor conv2d_kernel_grad(const Tensor& input, const Tensor& gout, int stride,
                          int kh, int kw) {
  const Shape& sx = input.shape();
  const Shape& sg = gout.shape();
  if (sx.size() != 3 || sg.size() != 3) {
    shape_error("conv2d_kernel_grad shape mismatch", sx, sg);
  }
  if (conv_out_dim(sx[1], stride) != sg[1] || conv_out_dim(sx[2], stride) != sg[2]) {
    throw std::invalid_argument("conv2d_kernel_grad geometry mismatch");
  }
  int cin = sx[0], cout = sg[0];
  Shape out{cout, cin, kh, kw};
  return OpsImpl::shaped(Op::kConv2dKernelGrad, input, &gout, out,
                         conv2d_kernel_grad_kernel(input.data(), gout.data(), cin,
                                                   sx[1], sx[2], cout, kh, kw,
                                                   stride),
                         stride, kh, kw);
}

Tensor spatial_soft_argmax(const Tensor& features, double temperature) {
  const Shape& s = features.shape();
  if (s.size() != 3) {
    throw std::invalid_argument("spatial_soft_argmax requires {C,H,W}, got " +
                                shape_str(s));
  }
  if (temperature <= 0) {
    throw std::invalid_argument("spatial_soft_argmax temperature must be positive");
  }
  for (double v : features.data()) {
    if (!std::isfinite(v)) {
      throw std::domain_error("spatial_soft_argmax on non-finite input");
    }
  }
  int c = s[0], h = s[1], w = s[2];
  int hw = h * w;
  // Coordinate grids are constants; coordinate 0 when the axis has size 1.
  Vec colv(hw), rowv(hw);
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      colv[i * w + j] = w > 1 ? 2.0 * j / (w - 1) - 1.0 : 0.0;
      rowv[i * w + j] = h > 1 ? 2.0 * i / (h - 1) - 1.0 : 0.0;
    }
  }
  Tensor colgrid(Shape{hw}, std::move(colv));
  Tensor rowgrid(Shape{hw}, std::move(rowv));
  Tensor inv_temp(1.0 / temperature);

  std::vector<Tensor> outs;
  outs.reserve(2 * c);
  for (int ch = 0; ch < c; ++ch) {
    Tensor f = slice(features, ch * hw, hw);
    Tensor scaled = mul(f, inv_temp);
    // Softmax is shift invariant, so the max may be treated as a constant.
    double m = scaled.data()[0];
    for (double v : scaled.data()) m = std::max(m, v);
    Tensor e = exp(sub(scaled, Tensor(m)));
    Tensor p = divide(e, sum(e));
    outs.push_back(sum(mul(p, colgrid)));
    outs.push_back(sum(mul(p, rowgrid)));
  }
  return concat(outs);
}

// ---------------------------------------------------------------------------
// Reverse-mode differentiation

namespace {

// Inputs of a node, for reachability walks.
template <typename F>
void for_each_input(const Graph::Node&, F);

}  // namespace

std::vector<Tensor> Graph::gradients(const Tensor& scalar,
                                     const std::vector<Tensor>& wrt) {
  if (!scalar.in_graph() || scalar.graph_ != this) {
    throw std::invalid_argument("gradients: scalar is not a node of this graph");
  }
  if (scalar.size() != 1) {
    throw std::invalid_argument("gradients: expected a scalar, got shape " +
                                shape_str(scalar.shape()));
  }
  for (const Tensor& t : wrt) {
    if (t.in_graph() && t.graph_ != this) {
      throw std::invalid_argument("gradients: wrt tensor from a different graph");
    }
  }

  const int n0 = node_count();
  auto inputs_of = [&](int id, auto&& fn) {
    const Node& nd = nodes_[id];
    if (nd.a >= 0) fn(nd.a);
    if (nd.b >= 0) fn(nd.b);
    for (int e : nd.extra) fn(e);
  };

  // Ancestors of the scalar.
  std::vector<char> anc(n0, 0);
  {
    std::vector<int> stack{scalar.node_};
    anc[scalar.node_] = 1;
    while (!stack.empty()) {
      int id = stack.back();
      stack.pop_back();
      inputs_of(id, [&](int j) {
        if (!anc[j]) {
          anc[j] = 1;
          stack.push_back(j);
        }
      });
    }
  }
  // Descendants of any wrt node; nodes_ is in topological order.
  std::vector<char> active(n0, 0);
  {
    std::vector<char> des(n0, 0);
    for (const Tensor& t : wrt) {
      if (t.in_graph() && t.node_ < n0) des[t.node_] = 1;
    }
    for (int id = 0; id < n0; ++id) {
      if (des[id]) continue;
      bool hit = false;
      inputs_of(id, [&](int j) { hit = hit || des[j]; });
      des[id] = hit;
    }
    for (int id = 0; id < n0; ++id) active[id] = anc[id] && des[id];
  }

  std::vector<Tensor> adj(n0);
  if (active[scalar.node_]) {
    adj[scalar.node_] = input(scalar.shape(), Vec(1, 1.0));
  }

  auto accumulate = [&](int id, const Tensor& contribution) {
    if (id >= n0 || !active[id]) return;
    adj[id] = adj[id].defined() ? add(adj[id], contribution) : contribution;
  };
  // Adjoint of an elementwise binary operand: reduce when it was broadcast.
  // Shapes are copied out of nodes_ before emitting, which may reallocate it.
  auto reduce_to = [&](const Tensor& candidate, int operand_id) {
    Shape in_shape = nodes_[operand_id].shape;
    if (numel(in_shape) == 1 && candidate.size() > 1) {
      return reshape(sum(candidate), std::move(in_shape));
    }
    return candidate;
  };
  auto handle = [&](int id) { return Tensor(this, id); };

  for (int id = scalar.node_; id >= 0; --id) {
    if (!active[id] || !adj[id].defined()) continue;
    const Tensor g = adj[id];
    // Copy op metadata; emitting contribution nodes may reallocate nodes_.
    const Node nd = nodes_[id];
    const Tensor y = handle(id);
    switch (nd.op) {
      case Op::kLeaf:
      case Op::kStep:
      case Op::kInBand:
      case Op::kLeMask:
        break;
      case Op::kAdd:
        accumulate(nd.a, reduce_to(g, nd.a));
        accumulate(nd.b, reduce_to(g, nd.b));
        break;
      case Op::kSub:
        accumulate(nd.a, reduce_to(g, nd.a));
        accumulate(nd.b, reduce_to(neg(g), nd.b));
        break;
      case Op::kMul:
        accumulate(nd.a, reduce_to(mul(g, handle(nd.b)), nd.a));
        accumulate(nd.b, reduce_to(mul(g, handle(nd.a)), nd.b));
        break;
      case Op::kDiv: {
        Tensor a = handle(nd.a), b = handle(nd.b);
        accumulate(nd.a, reduce_to(divide(g, b), nd.a));
        accumulate(nd.b, reduce_to(neg(divide(mul(g, a), square(b))), nd.b));
        break;
      }
      case Op::kNeg:
        accumulate(nd.a, neg(g));
        break;
      case Op::kExp:
        accumulate(nd.a, mul(g, y));
        break;
      case Op::kLog:
        accumulate(nd.a, divide(g, handle(nd.a)));
        break;
      case Op::kTanh:
        accumulate(nd.a, mul(g, sub(Tensor(1.0), square(y))));
        break;
      case Op::kRelu:
        accumulate(nd.a, mul(g, step_mask(handle(nd.a))));
        break;
      case Op::kSoftplus:
        accumulate(nd.a, mul(g, sigmoid(handle(nd.a))));
        break;
      case Op::kSigmoid:
        accumulate(nd.a, mul(g, mul(y, sub(Tensor(1.0), y))));
        break;
      case Op::kSquare:
        accumulate(nd.a, mul(g, mul(Tensor(2.0), handle(nd.a))));
        break;
      case Op::kClamp:
        accumulate(nd.a, mul(g, in_band_mask(handle(nd.a), nd.p0, nd.p1)));
        break;
      case Op::kHuber:
        accumulate(nd.a, mul(g, clamp(handle(nd.a), -nd.p0, nd.p0)));
        break;
      case Op::kMin: {
        Tensor m = le_mask(handle(nd.a), handle(nd.b));
        accumulate(nd.a, reduce_to(mul(g, m), nd.a));
        accumulate(nd.b, reduce_to(mul(g, sub(Tensor(1.0), m)), nd.b));
        break;
      }
      case Op::kMatmul:
        accumulate(nd.a, matmul(g, transpose(handle(nd.b))));
        accumulate(nd.b, matmul(transpose(handle(nd.a)), g));
        break;
      case Op::kTranspose:
        accumulate(nd.a, transpose(g));
        break;
      case Op::kSum:
        accumulate(nd.a, broadcast_scalar(g, nodes_[nd.a].shape));
        break;
      case Op::kBroadcastScalar:
        accumulate(nd.a, reshape(sum(g), nodes_[nd.a].shape));
        break;
      case Op::kSumRows:
        accumulate(nd.a, broadcast_rows(g, nodes_[nd.a].shape[0]));
        break;
      case Op::kBroadcastRows:
        accumulate(nd.a, sum_rows(g));
        break;
      case Op::kSumChan:
        accumulate(nd.a, broadcast_chan(g, nodes_[nd.a].shape[1],
                                        nodes_[nd.a].shape[2]));
        break;
      case Op::kBroadcastChan:
        accumulate(nd.a, sum_chan(g));
        break;
      case Op::kReshape:
        accumulate(nd.a, reshape(g, nodes_[nd.a].shape));
        break;
      case Op::kSlice:
        accumulate(nd.a, pad_slice(g, nd.i0, nodes_[nd.a].shape));
        break;
      case Op::kPadSlice:
        accumulate(nd.a, slice(g, nd.i0, numel(nodes_[nd.a].shape)));
        break;
      case Op::kConcat: {
        int off = 0;
        for (int part : nd.extra) {
          int len = numel(nodes_[part].shape);
          accumulate(part, slice(g, off, len));
          off += len;
        }
        break;
      }
      case Op::kConv2d: {
        int xh = nodes_[nd.a].shape[1], xw = nodes_[nd.a].shape[2];
        int kh = nodes_[nd.b].shape[2], kw = nodes_[nd.b].shape[3];
        accumulate(nd.a, conv2d_input_grad(g, handle(nd.b), nd.i0, xh, xw));
        accumulate(nd.b, conv2d_kernel_grad(handle(nd.a), g, nd.i0, kh, kw));
        break;
      }
      case Op::kConv2dInputGrad: {
        // Node computed x-adjoint from (gout=a, kernels=b); y is x-shaped.
        int kh = nodes_[nd.b].shape[2], kw = nodes_[nd.b].shape[3];
        accumulate(nd.a, conv2d(g, handle(nd.b), nd.i0));
        accumulate(nd.b, conv2d_kernel_grad(g, handle(nd.a), nd.i0, kh, kw));
        break;
      }
      case Op::kConv2dKernelGrad: {
        // Node computed kernel-adjoint from (input=a, gout=b); y is w-shaped.
        int xh = nodes_[nd.a].shape[1], xw = nodes_[nd.a].shape[2];
        accumulate(nd.a, conv2d_input_grad(handle(nd.b), g, nd.i0, xh, xw));
        accumulate(nd.b, conv2d(handle(nd.a), g, nd.i0));
        break;
      }
    }
  }

  std::vector<Tensor> out;
  out.reserve(wrt.size());
  for (const Tensor& t : wrt) {
    if (t.in_graph() && t.node_ < n0 && adj[t.node_].defined()) {
      out.push_back(adj[t.node_]);
    } else {
      out.push_back(input(t.shape(), Vec(t.size(), 0.0)));
    }
  }
  return out;
}

std::vector<Tensor> grad(const Tensor& scalar, const std::vector<Tensor>& wrt) {
  if (!scalar.in_graph()) {
    throw std::invalid_argument("grad: scalar is not part of a graph");
  }
  return scalar.graph()->gradients(scalar, wrt);
}

}  // namespace dpn
