#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace dpn {

using Shape = std::vector<int>;

int numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Graph;
struct OpsImpl;

// Value handle. Either a node of a Graph (tracked, differentiable) or a
// detached constant. Detached constants own their storage and outlive any
// graph; graph tensors are views into the graph and must not outlive it.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data);
  explicit Tensor(double value);  // shape {1}
  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);

  bool defined() const { return graph_ != nullptr || data_ != nullptr; }
  bool in_graph() const { return graph_ != nullptr; }
  Graph* graph() const { return graph_; }
  int node() const { return node_; }

  const Shape& shape() const;
  const std::vector<double>& data() const;
  int size() const;
  double item() const;  // requires exactly one element
  Tensor detach() const;

 private:
  friend class Graph;
  friend struct OpsImpl;
  Tensor(Graph* graph, int node) : graph_(graph), node_(node) {}

  Graph* graph_ = nullptr;
  int node_ = -1;
  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
};

enum class Op : unsigned char {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kNeg,
  kExp,
  kLog,
  kTanh,
  kRelu,
  kSoftplus,
  kSigmoid,
  kSquare,
  kClamp,
  kHuber,
  kStep,     // 1 where x > 0; not differentiable (zero vjp)
  kInBand,   // 1 where lo <= x <= hi; not differentiable
  kLeMask,   // 1 where a <= b; not differentiable
  kMin,
  kMatmul,
  kTranspose,
  kSum,              // all elements -> {1}
  kBroadcastScalar,  // {1} -> shape
  kSumRows,          // {r,c} -> {c}
  kBroadcastRows,    // {c} -> {r,c}
  kSumChan,          // {C,h,w} -> {C}
  kBroadcastChan,    // {C} -> {C,h,w}
  kReshape,
  kSlice,     // flat range -> {len}
  kPadSlice,  // {len} -> zeros of full shape with the range filled
  kConcat,    // 1-D concat of any number of inputs
  kConv2d,
  kConv2dInputGrad,
  kConv2dKernelGrad,
};

// Computation tape. Nodes are appended in topological order; reverse-mode
// differentiation emits new ordinary nodes, so gradients are themselves
// differentiable (grad-of-grad).
//
// A graph instance is confined to one thread at a time. Independent graphs
// may run concurrently.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Registers a leaf node (parameter, input, or constant).
  Tensor input(Shape shape, std::vector<double> data);
  Tensor input(const Tensor& value);

  int node_count() const { return static_cast<int>(nodes_.size()); }

  // d(scalar)/d(wrt_i), returned as graph nodes. Tensors not reachable from
  // `scalar` (including detached constants) yield zeros of matching shape.
  std::vector<Tensor> gradients(const Tensor& scalar,
                                const std::vector<Tensor>& wrt);

 private:
  friend class Tensor;
  friend struct OpsImpl;

  struct Node {
    Op op = Op::kLeaf;
    int a = -1;
    int b = -1;
    Shape shape;
    std::vector<double> val;
    double p0 = 0.0;  // op parameter (delta, lo, temperature, ...)
    double p1 = 0.0;
    int i0 = 0;  // op parameter (stride, offset, rows, ...)
    int i1 = 0;
    int i2 = 0;
    std::vector<int> extra;  // additional inputs (concat)
  };

  Tensor emit(Node node);
  const Node& at(int id) const { return nodes_[id]; }

  std::vector<Node> nodes_;
};

// Elementwise suite. Binary ops require identical shapes or one operand with
// a single element (scalar broadcasting). Mixing tensors from two different
// graphs is an error; a detached constant combined with a graph tensor is
// promoted to a leaf of that graph. Ops on detached constants evaluate
// eagerly and return detached constants.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);  // zero divisor -> domain_error
Tensor neg(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);  // non-positive operand -> domain_error
Tensor tanh(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor square(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);
Tensor minimum(const Tensor& a, const Tensor& b);

// Elementwise Huber: 0.5*x^2 where |x| <= delta, else delta*|x| - 0.5*delta^2.
// The derivative is clamp(x, -delta, delta), continuous everywhere.
Tensor huber_elementwise(const Tensor& x, double delta);

Tensor matmul(const Tensor& a, const Tensor& b);  // {m,k} x {k,n} -> {m,n}
Tensor transpose(const Tensor& x);                // {r,c} -> {c,r}

Tensor sum(const Tensor& x);  // -> {1}
Tensor sum_rows(const Tensor& x);
Tensor broadcast_rows(const Tensor& v, int rows);
Tensor sum_chan(const Tensor& x);
Tensor broadcast_chan(const Tensor& v, int h, int w);
Tensor reshape(const Tensor& x, Shape shape);
Tensor slice(const Tensor& x, int offset, int len);  // on flattened storage
Tensor row(const Tensor& m, int r);                  // {r,c} -> {c}
Tensor concat(const std::vector<Tensor>& parts);     // 1-D results

// 2-D convolution over {C_in,H,W} with kernels {C_out,C_in,k,k} (k odd),
// zero padding (k-1)/2 per side, so H' = ceil(H/stride).
Tensor conv2d(const Tensor& input, const Tensor& kernels, int stride);
// Adjoint of conv2d w.r.t. its input; doubles as a transposed convolution
// (deconvolution) with explicit output size.
Tensor conv2d_input_grad(const Tensor& gout, const Tensor& kernels, int stride,
                         int in_h, int in_w);
// Adjoint of conv2d w.r.t. its kernels.
Tensor conv2d_kernel_grad(const Tensor& input, const Tensor& gout, int stride,
                          int kh, int kw);

// Per-channel softmax over pixel locations followed by expected coordinates,
// mapped affinely to [-1,1]. Output {2C}: (E[col], E[row]) per channel.
Tensor spatial_soft_argmax(const Tensor& features, double temperature);

// Free-function form of Graph::gradients.
std::vector<Tensor> grad(const Tensor& scalar, const std::vector<Tensor>& wrt);

}  // namespace dpn
