#pragma once

#include "stableflow/state.hpp"

#include <array>
#include <cstddef>
#include <functional>
#include <vector>

namespace stableflow::ad {

/// Handle to a node on a Tape. Only meaningful for the tape that issued it.
struct NodeId {
  std::size_t index = 0;
  bool operator==(const NodeId&) const = default;
};

/// Valid (no padding), stride-1 convolution over samples stored one per column,
/// each column laid out as [channel][row][col].
struct ConvShape {
  std::size_t in_channels = 1;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t out_channels = 1;
  std::size_t kernel = 1;

  std::size_t out_height() const { return height - kernel + 1; }
  std::size_t out_width() const { return width - kernel + 1; }
  std::size_t in_size() const { return in_channels * height * width; }
  std::size_t out_size() const { return out_channels * out_height() * out_width(); }
};

/// Non-overlapping max pooling with window == stride; trailing rows/cols that
/// do not fill a window are dropped.
struct PoolShape {
  std::size_t channels = 1;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t window = 2;

  std::size_t out_height() const { return height / window; }
  std::size_t out_width() const { return width / window; }
  std::size_t in_size() const { return channels * height * width; }
  std::size_t out_size() const { return channels * out_height() * out_width(); }
};

namespace kernels {

// Shared by the tape and by the plain (tape-free) forward passes so both
// produce the same numbers.
double softplus(double x);
double sigmoid(double x);
Matrix softmax_columns(const Matrix& logits);
Matrix conv2d(const Matrix& input, const Matrix& kernel, const Vector& bias, const ConvShape& shape);
Matrix maxpool(const Matrix& input, const PoolShape& shape, std::vector<Eigen::Index>* argmax = nullptr);
/// Lower triangle of `raw` with the diagonal mapped through softplus(.) + eps.
Matrix lower_softplus_diag(const Matrix& raw, double eps);

}  // namespace kernels

class Tape;

/// Adjoints produced by Tape::backward. Indexed by the node ids of that tape.
class Gradients {
 public:
  /// d loss / d node. Nodes the loss does not depend on get a zero matrix.
  Matrix operator[](NodeId id) const;

 private:
  friend class Tape;
  std::vector<Matrix> adjoints_;
  std::vector<std::pair<Eigen::Index, Eigen::Index>> shapes_;
};

/// Append-only reverse-mode autodiff tape over dense matrices.
///
/// Every operation records a node whose inputs were recorded earlier, so the
/// node list is already in topological order and backward() is a single
/// reverse sweep.
class Tape {
 public:
  NodeId leaf(Matrix value);
  NodeId constant(Matrix value);

  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);  ///< elementwise
  NodeId scale(NodeId a, double factor);
  NodeId matmul(NodeId a, NodeId b);
  NodeId transpose(NodeId a);
  /// a (r x c) + bias (r x 1) broadcast across columns.
  NodeId add_bias(NodeId a, NodeId bias);
  /// a (r x c) scaled column-wise by row (1 x c).
  NodeId mul_rows(NodeId a, NodeId row);
  NodeId row(NodeId a, std::size_t i);
  NodeId concat_rows(NodeId top, NodeId bottom);
  /// Columns of `a` picked by `index` (repeats allowed); gradient scatters back.
  NodeId gather_cols(NodeId a, std::vector<Eigen::Index> index);

  NodeId tanh(NodeId a);
  NodeId relu(NodeId a);
  NodeId softplus(NodeId a);
  NodeId exp(NodeId a);
  NodeId sum(NodeId a);
  /// Column-wise softmax computed through log-sum-exp.
  NodeId softmax(NodeId logits);

  NodeId conv2d(NodeId input, NodeId kernel, NodeId bias, const ConvShape& shape);
  NodeId maxpool(NodeId input, const PoolShape& shape);
  NodeId lower_softplus_diag(NodeId raw, double eps);

  const Matrix& value(NodeId id) const { return nodes_.at(id.index).value; }
  std::size_t size() const { return nodes_.size(); }

  /// Reverse sweep from a 1x1 node. Throws ContractError otherwise.
  Gradients backward(NodeId loss) const;

 private:
  enum class Op {
    kLeaf, kConstant, kAdd, kSub, kMul, kScale, kMatMul, kTranspose, kAddBias, kMulRows,
    kRow, kConcatRows, kGatherCols, kTanh, kRelu, kSoftplus, kExp, kSum, kSoftmax,
    kConv2d, kMaxPool, kLowerSoftplusDiag,
  };

  struct Node {
    Op op = Op::kConstant;
    std::array<std::size_t, 3> inputs{};
    std::size_t arity = 0;
    Matrix value;
    double scalar = 0.0;
    std::vector<Eigen::Index> index;
    ConvShape conv;
    PoolShape pool;
  };

  NodeId push(Node node);
  const Node& node(NodeId id) const;

  std::vector<Node> nodes_;
};

/// Builds a scalar loss on `tape` from the leaf holding the evaluation point.
using ScalarGraph = std::function<NodeId(Tape& tape, NodeId point)>;

/// Max over coordinates of |autodiff - central difference| / max(1, |central difference|).
/// Throws ValidationError for a non-positive or non-finite step and
/// NumericalFailure (carrying the coordinate) for non-finite evaluations.
double grad_check(const ScalarGraph& f, const Vector& point, double step);

}  // namespace stableflow::ad
