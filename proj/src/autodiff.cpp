#include "stableflow/autodiff.hpp"

#include "stableflow/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <utility>

namespace stableflow::ad {

namespace kernels {

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Matrix softmax_columns(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index c = 0; c < logits.cols(); ++c) {
    const double peak = logits.col(c).maxCoeff();
    const double lse = peak + std::log((logits.col(c).array() - peak).exp().sum());
    out.col(c) = (logits.col(c).array() - lse).exp().matrix();
  }
  return out;
}

namespace {

// Rows are output pixels, columns are (in_channel, kr, kc) taps.
Matrix im2col_transposed(const double* sample, const ConvShape& s) {
  const std::size_t oh = s.out_height();
  const std::size_t ow = s.out_width();
  const std::size_t k = s.kernel;
  Matrix cols(static_cast<Eigen::Index>(oh * ow), static_cast<Eigen::Index>(s.in_channels * k * k));
  for (std::size_t ci = 0; ci < s.in_channels; ++ci) {
    const double* plane = sample + ci * s.height * s.width;
    for (std::size_t kr = 0; kr < k; ++kr) {
      for (std::size_t kc = 0; kc < k; ++kc) {
        const auto tap = static_cast<Eigen::Index>((ci * k + kr) * k + kc);
        for (std::size_t r = 0; r < oh; ++r) {
          for (std::size_t c = 0; c < ow; ++c) {
            cols(static_cast<Eigen::Index>(r * ow + c), tap) = plane[(r + kr) * s.width + c + kc];
          }
        }
      }
    }
  }
  return cols;
}

void col2im_accumulate(const Matrix& cols, const ConvShape& s, double* sample) {
  const std::size_t oh = s.out_height();
  const std::size_t ow = s.out_width();
  const std::size_t k = s.kernel;
  for (std::size_t ci = 0; ci < s.in_channels; ++ci) {
    double* plane = sample + ci * s.height * s.width;
    for (std::size_t kr = 0; kr < k; ++kr) {
      for (std::size_t kc = 0; kc < k; ++kc) {
        const auto tap = static_cast<Eigen::Index>((ci * k + kr) * k + kc);
        for (std::size_t r = 0; r < oh; ++r) {
          for (std::size_t c = 0; c < ow; ++c) {
            plane[(r + kr) * s.width + c + kc] += cols(static_cast<Eigen::Index>(r * ow + c), tap);
          }
        }
      }
    }
  }
}

void check_conv(const Matrix& input, const Matrix& kernel, Eigen::Index bias_rows, const ConvShape& s) {
  if (s.kernel == 0 || s.kernel > s.height || s.kernel > s.width) {
    throw ContractError("conv2d kernel does not fit the input");
  }
  if (input.rows() != static_cast<Eigen::Index>(s.in_size())) {
    throw ObservationShapeError("conv2d input has " + std::to_string(input.rows()) + " rows, expected " +
                                std::to_string(s.in_size()));
  }
  if (kernel.rows() != static_cast<Eigen::Index>(s.out_channels) ||
      kernel.cols() != static_cast<Eigen::Index>(s.in_channels * s.kernel * s.kernel) ||
      bias_rows != static_cast<Eigen::Index>(s.out_channels)) {
    throw ContractError("conv2d kernel/bias shape mismatch");
  }
}

}  // namespace

Matrix conv2d(const Matrix& input, const Matrix& kernel, const Vector& bias, const ConvShape& s) {
  check_conv(input, kernel, bias.size(), s);
  const auto pixels = static_cast<Eigen::Index>(s.out_height() * s.out_width());
  Matrix out(static_cast<Eigen::Index>(s.out_size()), input.cols());
  for (Eigen::Index b = 0; b < input.cols(); ++b) {
    const Matrix cols = im2col_transposed(input.col(b).data(), s);
    Matrix response = cols * kernel.transpose();  // pixels x out_channels
    response.rowwise() += bias.transpose();
    out.col(b) = Eigen::Map<const Vector>(response.data(), pixels * response.cols());
  }
  return out;
}

Matrix maxpool(const Matrix& input, const PoolShape& s, std::vector<Eigen::Index>* argmax) {
  if (s.window == 0 || s.out_height() == 0 || s.out_width() == 0) {
    throw ContractError("maxpool window does not fit the input");
  }
  if (input.rows() != static_cast<Eigen::Index>(s.in_size())) {
    throw ObservationShapeError("maxpool input has " + std::to_string(input.rows()) + " rows, expected " +
                                std::to_string(s.in_size()));
  }
  const std::size_t oh = s.out_height();
  const std::size_t ow = s.out_width();
  Matrix out(static_cast<Eigen::Index>(s.out_size()), input.cols());
  if (argmax) argmax->assign(static_cast<std::size_t>(out.size()), 0);
  for (Eigen::Index b = 0; b < input.cols(); ++b) {
    for (std::size_t c = 0; c < s.channels; ++c) {
      for (std::size_t r = 0; r < oh; ++r) {
        for (std::size_t q = 0; q < ow; ++q) {
          Eigen::Index best = -1;
          double best_value = -std::numeric_limits<double>::infinity();
          for (std::size_t dr = 0; dr < s.window; ++dr) {
            for (std::size_t dq = 0; dq < s.window; ++dq) {
              const auto at = static_cast<Eigen::Index>(c * s.height * s.width +
                                                        (r * s.window + dr) * s.width + q * s.window + dq);
              if (best < 0 || input(at, b) > best_value) {
                best = at;
                best_value = input(at, b);
              }
            }
          }
          const auto o = static_cast<Eigen::Index>((c * oh + r) * ow + q);
          out(o, b) = best_value;
          if (argmax) (*argmax)[static_cast<std::size_t>(b * out.rows() + o)] = best;
        }
      }
    }
  }
  return out;
}

Matrix lower_softplus_diag(const Matrix& raw, double eps) {
  if (raw.rows() != raw.cols()) throw InvalidParameterError("L_raw must be square");
  if (!raw.allFinite()) throw InvalidParameterError("L_raw has non-finite entries");
  Matrix lower = raw.triangularView<Eigen::StrictlyLower>();
  for (Eigen::Index i = 0; i < raw.rows(); ++i) lower(i, i) = softplus(raw(i, i)) + eps;
  return lower;
}

}  // namespace kernels

Matrix Gradients::operator[](NodeId id) const {
  if (id.index >= adjoints_.size()) throw ContractError("node id is not from this tape");
  const Matrix& adj = adjoints_[id.index];
  if (adj.size() == 0) return Matrix::Zero(shapes_[id.index].first, shapes_[id.index].second);
  return adj;
}

NodeId Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return NodeId{nodes_.size() - 1};
}

const Tape::Node& Tape::node(NodeId id) const {
  if (id.index >= nodes_.size()) throw ContractError("node id is not from this tape");
  return nodes_[id.index];
}

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ContractError(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                        std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                        std::to_string(b.cols()) + ")");
  }
}

}  // namespace

NodeId Tape::leaf(Matrix value) {
  Node n;
  n.op = Op::kLeaf;
  n.value = std::move(value);
  return push(std::move(n));
}

NodeId Tape::constant(Matrix value) {
  Node n;
  n.op = Op::kConstant;
  n.value = std::move(value);
  return push(std::move(n));
}

NodeId Tape::add(NodeId a, NodeId b) {
  require_same_shape(value(a), value(b), "add");
  Node n;
  n.op = Op::kAdd;
  n.inputs = {a.index, b.index, 0};
  n.arity = 2;
  n.value = value(a) + value(b);
  return push(std::move(n));
}

NodeId Tape::sub(NodeId a, NodeId b) {
  require_same_shape(value(a), value(b), "sub");
  Node n;
  n.op = Op::kSub;
  n.inputs = {a.index, b.index, 0};
  n.arity = 2;
  n.value = value(a) - value(b);
  return push(std::move(n));
}

NodeId Tape::mul(NodeId a, NodeId b) {
  require_same_shape(value(a), value(b), "mul");
  Node n;
  n.op = Op::kMul;
  n.inputs = {a.index, b.index, 0};
  n.arity = 2;
  n.value = value(a).cwiseProduct(value(b));
  return push(std::move(n));
}

NodeId Tape::scale(NodeId a, double factor) {
  Node n;
  n.op = Op::kScale;
  n.inputs = {a.index, 0, 0};
  n.arity = 1;
  n.scalar = factor;
  n.value = value(a) * factor;
  return push(std::move(n));
}

NodeId Tape::matmul(NodeId a, NodeId b) {
  if (value(a).cols() != value(b).rows()) throw ContractError("matmul: inner dimensions differ");
  Node n;
  n.op = Op::kMatMul;
  n.inputs = {a.index, b.index, 0};
  n.arity = 2;
  n.value = value(a) * value(b);
  return push(std::move(n));
}

NodeId Tape::transpose(NodeId a) {
  Node n;
  n.op = Op::kTranspose;
  n.inputs = {a.index, 0, 0};
  n.arity = 1;
  n.value = value(a).transpose();
  return push(std::move(n));
}

NodeId Tape::add_bias(NodeId a, NodeId bias) {
  const Matrix& bv = value(bias);
  if (bv.cols() != 1 || bv.rows() != value(a).rows()) throw ContractError("add_bias: bias must be rows x 1");
  Node n;
  n.op = Op::kAddBias;
  n.inputs = {a.index, bias.index, 0};
  n.arity = 2;
  n.value = value(a).colwise() + bv.col(0);
  return push(std::move(n));
}

NodeId Tape::mul_rows(NodeId a, NodeId row_node) {
  const Matrix& r = value(row_node);
  if (r.rows() != 1 || r.cols() != value(a).cols()) throw ContractError("mul_rows: row must be 1 x cols");
  Node n;
  n.op = Op::kMulRows;
  n.inputs = {a.index, row_node.index, 0};
  n.arity = 2;
  n.value = value(a) * r.row(0).asDiagonal();
  return push(std::move(n));
}

NodeId Tape::row(NodeId a, std::size_t i) {
  if (static_cast<Eigen::Index>(i) >= value(a).rows()) throw ContractError("row: index out of range");
  Node n;
  n.op = Op::kRow;
  n.inputs = {a.index, 0, 0};
  n.arity = 1;
  n.index = {static_cast<Eigen::Index>(i)};
  n.value = value(a).row(static_cast<Eigen::Index>(i));
  return push(std::move(n));
}

NodeId Tape::concat_rows(NodeId top, NodeId bottom) {
  const Matrix& t = value(top);
  const Matrix& b = value(bottom);
  if (t.cols() != b.cols()) throw ContractError("concat_rows: column counts differ");
  Node n;
  n.op = Op::kConcatRows;
  n.inputs = {top.index, bottom.index, 0};
  n.arity = 2;
  n.value.resize(t.rows() + b.rows(), t.cols());
  n.value << t, b;
  return push(std::move(n));
}

NodeId Tape::gather_cols(NodeId a, std::vector<Eigen::Index> index) {
  const Matrix& v = value(a);
  Node n;
  n.op = Op::kGatherCols;
  n.inputs = {a.index, 0, 0};
  n.arity = 1;
  n.value.resize(v.rows(), static_cast<Eigen::Index>(index.size()));
  for (std::size_t j = 0; j < index.size(); ++j) {
    if (index[j] < 0 || index[j] >= v.cols()) throw ContractError("gather_cols: index out of range");
    n.value.col(static_cast<Eigen::Index>(j)) = v.col(index[j]);
  }
  n.index = std::move(index);
  return push(std::move(n));
}

NodeId Tape::tanh(NodeId a) {
  Node n;
  n.op = Op::kTanh;
  n.inputs = {a.index, 0, 0};
  n.arity = 1;
  n.value = value(a).array().tanh().matrix();
  return push(std::move(n));
}

NodeId Tape::relu(NodeId a) {
  Node n;
  n.op = Op::kRelu;
  n.inputs = {a.index, 0, 0};
  n.arity = 1;
  n.value = value(a).cwiseMax(0.0);
  return push(std::move(n));
}

NodeId Tape::softplus(NodeId a) {
  Node n;
  n.op = Op::kSoftplus;
  n.inputs = {a.index, 0, 0};
  n.arity = 1;
  n.value = value(a).unaryExpr([](double x) { return kernels::softplus(x); });
  return push(std::move(n));
}

NodeId Tape::exp(NodeId a) {
  Node n;
  n.op = Op::kExp;
  n.inputs = {a.index, 0, 0};
  n.arity = 1;
  n.value = value(a).array().exp().matrix();
  return push(std::move(n));
}

NodeId Tape::sum(NodeId a) {
  Node n;
  n.op = Op::kSum;
  n.inputs = {a.index, 0, 0};
  n.arity = 1;
  n.value = Matrix::Constant(1, 1, value(a).sum());
  return push(std::move(n));
}

NodeId Tape::softmax(NodeId logits) {
  Node n;
  n.op = Op::kSoftmax;
  n.inputs = {logits.index, 0, 0};
  n.arity = 1;
  n.value = kernels::softmax_columns(value(logits));
  return push(std::move(n));
}

NodeId Tape::conv2d(NodeId input, NodeId kernel, NodeId bias, const ConvShape& shape) {
  const Matrix& bv = value(bias);
  if (bv.cols() != 1) throw ContractError("conv2d: bias must be a column");
  Node n;
  n.op = Op::kConv2d;
  n.inputs = {input.index, kernel.index, bias.index};
  n.arity = 3;
  n.conv = shape;
  n.value = kernels::conv2d(value(input), value(kernel), bv.col(0), shape);
  return push(std::move(n));
}

NodeId Tape::maxpool(NodeId input, const PoolShape& shape) {
  Node n;
  n.op = Op::kMaxPool;
  n.inputs = {input.index, 0, 0};
  n.arity = 1;
  n.pool = shape;
  n.value = kernels::maxpool(value(input), shape, &n.index);
  return push(std::move(n));
}

NodeId Tape::lower_softplus_diag(NodeId raw, double eps) {
  Node n;
  n.op = Op::kLowerSoftplusDiag;
  n.inputs = {raw.index, 0, 0};
  n.arity = 1;
  n.scalar = eps;
  n.value = kernels::lower_softplus_diag(value(raw), eps);
  return push(std::move(n));
}

Gradients Tape::backward(NodeId loss) const {
  const Node& root = node(loss);
  if (root.value.rows() != 1 || root.value.cols() != 1) {
    throw ContractError("backward() needs a scalar loss node, got " + std::to_string(root.value.rows()) + "x" +
                        std::to_string(root.value.cols()));
  }
  Gradients grads;
  grads.adjoints_.resize(nodes_.size());
  grads.shapes_.reserve(nodes_.size());
  for (const Node& n : nodes_) grads.shapes_.emplace_back(n.value.rows(), n.value.cols());
  auto& adj = grads.adjoints_;

  auto accumulate = [&](std::size_t target, const auto& delta) {
    if (adj[target].size() == 0) {
      adj[target] = delta;
    } else {
      adj[target] += delta;
    }
  };

  adj[loss.index] = Matrix::Ones(1, 1);
  for (std::size_t k = loss.index + 1; k-- > 0;) {
    if (adj[k].size() == 0) continue;
    const Node& n = nodes_[k];
    const Matrix& g = adj[k];
    const std::size_t a = n.inputs[0];
    const std::size_t b = n.inputs[1];
    switch (n.op) {
      case Op::kLeaf:
      case Op::kConstant:
        break;
      case Op::kAdd:
        accumulate(a, g);
        accumulate(b, g);
        break;
      case Op::kSub:
        accumulate(a, g);
        accumulate(b, Matrix(-g));
        break;
      case Op::kMul:
        accumulate(a, Matrix(g.cwiseProduct(nodes_[b].value)));
        accumulate(b, Matrix(g.cwiseProduct(nodes_[a].value)));
        break;
      case Op::kScale:
        accumulate(a, Matrix(g * n.scalar));
        break;
      case Op::kMatMul:
        accumulate(a, Matrix(g * nodes_[b].value.transpose()));
        accumulate(b, Matrix(nodes_[a].value.transpose() * g));
        break;
      case Op::kTranspose:
        accumulate(a, Matrix(g.transpose()));
        break;
      case Op::kAddBias:
        accumulate(a, g);
        accumulate(b, Matrix(g.rowwise().sum()));
        break;
      case Op::kMulRows: {
        const Matrix& r = nodes_[b].value;
        accumulate(a, Matrix(g * r.row(0).asDiagonal()));
        accumulate(b, Matrix(g.cwiseProduct(nodes_[a].value).colwise().sum()));
        break;
      }
      case Op::kRow: {
        Matrix delta = Matrix::Zero(nodes_[a].value.rows(), nodes_[a].value.cols());
        delta.row(n.index[0]) = g.row(0);
        accumulate(a, delta);
        break;
      }
      case Op::kConcatRows: {
        const Eigen::Index top = nodes_[a].value.rows();
        accumulate(a, Matrix(g.topRows(top)));
        accumulate(b, Matrix(g.bottomRows(g.rows() - top)));
        break;
      }
      case Op::kGatherCols: {
        Matrix delta = Matrix::Zero(nodes_[a].value.rows(), nodes_[a].value.cols());
        for (std::size_t j = 0; j < n.index.size(); ++j) delta.col(n.index[j]) += g.col(static_cast<Eigen::Index>(j));
        accumulate(a, delta);
        break;
      }
      case Op::kTanh:
        accumulate(a, Matrix(g.array() * (1.0 - n.value.array().square())));
        break;
      case Op::kRelu:
        accumulate(a, Matrix(g.array() * (nodes_[a].value.array() > 0.0).cast<double>()));
        break;
      case Op::kSoftplus:
        accumulate(a, Matrix(g.array() * nodes_[a].value.unaryExpr([](double x) { return kernels::sigmoid(x); }).array()));
        break;
      case Op::kExp:
        accumulate(a, Matrix(g.cwiseProduct(n.value)));
        break;
      case Op::kSum:
        accumulate(a, Matrix::Constant(nodes_[a].value.rows(), nodes_[a].value.cols(), g(0, 0)));
        break;
      case Op::kSoftmax: {
        // ds/dz applied column-wise: s * (g - <g, s>).
        const Matrix& s = n.value;
        const Eigen::RowVectorXd inner = g.cwiseProduct(s).colwise().sum();
        accumulate(a, Matrix(s.cwiseProduct(g - Matrix::Ones(g.rows(), 1) * inner)));
        break;
      }
      case Op::kConv2d: {
        const ConvShape& s = n.conv;
        const Matrix& input = nodes_[a].value;
        const Matrix& kernel = nodes_[b].value;
        const auto pixels = static_cast<Eigen::Index>(s.out_height() * s.out_width());
        const bool need_input = nodes_[a].op != Op::kConstant;
        Matrix d_input = Matrix::Zero(input.rows(), need_input ? input.cols() : 0);
        Matrix d_kernel = Matrix::Zero(kernel.rows(), kernel.cols());
        Matrix d_bias = Matrix::Zero(kernel.rows(), 1);
        for (Eigen::Index col = 0; col < input.cols(); ++col) {
          const Eigen::Map<const Matrix> d_response(g.col(col).data(), pixels, kernel.rows());
          const Matrix cols = kernels::im2col_transposed(input.col(col).data(), s);
          d_kernel.noalias() += d_response.transpose() * cols;
          d_bias += d_response.colwise().sum().transpose();
          if (need_input) {
            const Matrix d_cols = d_response * kernel;
            kernels::col2im_accumulate(d_cols, s, d_input.col(col).data());
          }
        }
        if (need_input) accumulate(a, d_input);
        accumulate(b, d_kernel);
        accumulate(n.inputs[2], d_bias);
        break;
      }
      case Op::kMaxPool: {
        Matrix delta = Matrix::Zero(nodes_[a].value.rows(), nodes_[a].value.cols());
        for (Eigen::Index col = 0; col < g.cols(); ++col) {
          for (Eigen::Index o = 0; o < g.rows(); ++o) {
            delta(n.index[static_cast<std::size_t>(col * g.rows() + o)], col) += g(o, col);
          }
        }
        accumulate(a, delta);
        break;
      }
      case Op::kLowerSoftplusDiag: {
        const Matrix& raw = nodes_[a].value;
        Matrix delta = g.triangularView<Eigen::StrictlyLower>();
        for (Eigen::Index i = 0; i < raw.rows(); ++i) delta(i, i) = g(i, i) * kernels::sigmoid(raw(i, i));
        accumulate(a, delta);
        break;
      }
    }
  }
  return grads;
}

double grad_check(const ScalarGraph& f, const Vector& point, double step) {
  if (!(step > 0.0) || !std::isfinite(step)) {
    throw ValidationError("grad_check step size must be positive and finite");
  }
  auto evaluate = [&](const Vector& at, std::size_t coordinate) {
    Tape tape;
    const NodeId x = tape.leaf(at);
    const double v = tape.value(f(tape, x))(0, 0);
    if (!std::isfinite(v)) throw NumericalFailure("grad_check: non-finite evaluation", coordinate);
    return v;
  };

  Tape tape;
  const NodeId x = tape.leaf(point);
  const NodeId loss = f(tape, x);
  const Matrix grad = tape.backward(loss)[x];
  if (!grad.allFinite()) throw NumericalFailure("grad_check: non-finite gradient", 0);

  double worst = 0.0;
  for (Eigen::Index i = 0; i < point.size(); ++i) {
    Vector plus = point;
    Vector minus = point;
    plus(i) += step;
    minus(i) -= step;
    const auto idx = static_cast<std::size_t>(i);
    const double central = (evaluate(plus, idx) - evaluate(minus, idx)) / (2.0 * step);
    const double err = std::abs(grad(i, 0) - central) / std::max(1.0, std::abs(central));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace stableflow::ad
