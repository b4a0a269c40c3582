// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors with tape-based reverse-mode differentiation.
//
// Every tensor is a rank-2 Eigen matrix living on a BasicTape. Operations
// record their output together with a closure that maps the output gradient
// to input gradients. Nodes are appended in creation order, so the tape is
// always topologically sorted and backward() is a single reverse sweep.

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <cstring>
#include <deque>
#include <functional>
#include <initializer_list>
#include <numbers>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <type_traits>
#include <vector>

namespace drexperts {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using MatrixXr = Matrix<double>;
using Index = Eigen::Index;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

namespace detail {

inline std::string shape_string(Index rows, Index cols) {
  std::ostringstream out;
  out << '[' << rows << 'x' << cols << ']';
  return out.str();
}

}  // namespace detail

/// True when shapes agree and every entry has identical bits.
template <typename A, typename B>
bool bit_equal(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  static_assert(std::is_same_v<typename A::Scalar, typename B::Scalar>);
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  if (a.size() == 0) return true;
  const Matrix<typename A::Scalar> ea = a;
  const Matrix<typename B::Scalar> eb = b;
  return std::memcmp(ea.data(), eb.data(),
                     sizeof(typename A::Scalar) * static_cast<std::size_t>(ea.size())) == 0;
}

template <typename Scalar>
class BasicTape;

/// Handle to a node on a tape. Cheap to copy; the tape must outlive it.
template <typename Scalar>
class BasicTensor {
 public:
  using MatrixType = Matrix<Scalar>;

  BasicTensor() = default;
  BasicTensor(BasicTape<Scalar>* tape, std::size_t id) : tape_(tape), id_(id) {}

  [[nodiscard]] bool valid() const { return tape_ != nullptr; }
  [[nodiscard]] BasicTape<Scalar>& tape() const { return *tape_; }
  [[nodiscard]] std::size_t id() const { return id_; }

  [[nodiscard]] const MatrixType& value() const { return tape_->value(id_); }
  /// Empty until the tape runs backward(), then shaped like value().
  [[nodiscard]] const MatrixType& grad() const { return tape_->grad(id_); }
  [[nodiscard]] bool requires_grad() const { return tape_->requires_grad(id_); }

  [[nodiscard]] Index rows() const { return value().rows(); }
  [[nodiscard]] Index cols() const { return value().cols(); }
  [[nodiscard]] Index size() const { return value().size(); }
  [[nodiscard]] std::string shape() const { return detail::shape_string(rows(), cols()); }

  /// Value of a 1x1 tensor.
  [[nodiscard]] Scalar item() const {
    if (size() != 1) throw ContractError("item() on non-scalar tensor " + shape());
    return value()(0, 0);
  }

 private:
  BasicTape<Scalar>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename Scalar>
class BasicTape {
 public:
  using MatrixType = Matrix<Scalar>;
  using Tensor = BasicTensor<Scalar>;
  /// Receives the gradient flowing into the node's output.
  using BackwardFn = std::function<void(const MatrixType&)>;

  BasicTape() = default;
  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;

  Tensor constant(MatrixType value) { return push(std::move(value), false, {}); }
  Tensor parameter(MatrixType value) { return push(std::move(value), true, {}); }

  /// Records an op output. The backward closure is dropped when no input
  /// requires a gradient, which makes the output a constant.
  Tensor record(MatrixType value, std::initializer_list<Tensor> inputs, BackwardFn backward) {
    return record(std::move(value), std::span<const Tensor>(inputs.begin(), inputs.size()),
                  std::move(backward));
  }

  Tensor record(MatrixType value, std::span<const Tensor> inputs, BackwardFn backward) {
    bool needs_grad = false;
    for (const auto& in : inputs) {
      if (&in.tape() != this) throw ContractError("tensor belongs to a different tape");
      needs_grad = needs_grad || requires_grad(in.id());
    }
    return push(std::move(value), needs_grad, needs_grad ? std::move(backward) : BackwardFn{});
  }

  [[nodiscard]] const MatrixType& value(std::size_t id) const { return nodes_.at(id).value; }
  [[nodiscard]] const MatrixType& grad(std::size_t id) const { return nodes_.at(id).grad; }
  [[nodiscard]] bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  [[nodiscard]] std::size_t size() const { return nodes_.size(); }

  /// Adds `g` into the gradient of `t`; a no-op for constants.
  template <typename Derived>
  void accumulate(const Tensor& t, const Eigen::MatrixBase<Derived>& g) {
    Node& node = nodes_[t.id()];
    if (!node.requires_grad) return;
    if (node.grad.size() == 0) {
      node.grad = g;
    } else {
      node.grad.noalias() += g;
    }
  }

  /// Reverse sweep from a scalar loss. Gradients from any earlier sweep are
  /// discarded first.
  void backward(const Tensor& loss) {
    if (&loss.tape() != this) throw ContractError("loss belongs to a different tape");
    if (loss.size() != 1) throw ContractError("backward() needs a scalar loss, got " + loss.shape());
    for (auto& node : nodes_) node.grad.resize(0, 0);
    nodes_[loss.id()].grad = MatrixType::Ones(1, 1);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (node.backward && node.grad.size() != 0) node.backward(node.grad);
    }
    for (auto& node : nodes_) {
      if (node.grad.size() == 0) node.grad = MatrixType::Zero(node.value.rows(), node.value.cols());
    }
  }

 private:
  struct Node {
    MatrixType value;
    MatrixType grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Tensor push(MatrixType value, bool requires_grad, BackwardFn backward) {
    Node node;
    node.value = std::move(value);
    node.requires_grad = requires_grad;
    node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Tensor(this, nodes_.size() - 1);
  }

  // deque keeps value references stable while the tape grows.
  std::deque<Node> nodes_;
};

template <typename Scalar>
void backward(const BasicTensor<Scalar>& loss) {
  loss.tape().backward(loss);
}

namespace detail {

template <typename Scalar>
void require_same_shape(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b,
                        const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + a.shape() + " vs " + b.shape());
  }
}

template <typename Scalar>
void require_scalar(const BasicTensor<Scalar>& s, const char* op) {
  if (s.size() != 1) throw DimensionError(std::string(op) + ": expected 1x1, got " + s.shape());
}

template <typename Scalar>
void require_row(const BasicTensor<Scalar>& v, Index cols, const char* op) {
  if (v.rows() != 1 || v.cols() != cols) {
    throw DimensionError(std::string(op) + ": expected " + shape_string(1, cols) + ", got " +
                         v.shape());
  }
}

template <typename Scalar>
void require_blocks(const BasicTensor<Scalar>& x, Index block, const char* op) {
  if (block <= 0 || x.rows() % block != 0) {
    throw DimensionError(std::string(op) + ": " + std::to_string(x.rows()) +
                         " rows do not split into blocks of " + std::to_string(block));
  }
}

}  // namespace detail

template <typename Scalar>
BasicTensor<Scalar> matmul(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner extents differ " + a.shape() + " x " + b.shape());
  }
  auto& tape = a.tape();
  Matrix<Scalar> out = a.value() * b.value();
  return tape.record(std::move(out), {a, b}, [a, b, &tape](const Matrix<Scalar>& g) {
    if (a.requires_grad()) tape.accumulate(a, g * b.value().transpose());
    if (b.requires_grad()) tape.accumulate(b, a.value().transpose() * g);
  });
}

template <typename Scalar>
BasicTensor<Scalar> transpose(const BasicTensor<Scalar>& a) {
  auto& tape = a.tape();
  Matrix<Scalar> out = a.value().transpose();
  return tape.record(std::move(out), {a},
                     [a, &tape](const Matrix<Scalar>& g) { tape.accumulate(a, g.transpose()); });
}

template <typename Scalar>
BasicTensor<Scalar> operator+(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  detail::require_same_shape(a, b, "add");
  auto& tape = a.tape();
  Matrix<Scalar> out = a.value() + b.value();
  return tape.record(std::move(out), {a, b}, [a, b, &tape](const Matrix<Scalar>& g) {
    tape.accumulate(a, g);
    tape.accumulate(b, g);
  });
}

template <typename Scalar>
BasicTensor<Scalar> operator-(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  detail::require_same_shape(a, b, "sub");
  auto& tape = a.tape();
  Matrix<Scalar> out = a.value() - b.value();
  return tape.record(std::move(out), {a, b}, [a, b, &tape](const Matrix<Scalar>& g) {
    tape.accumulate(a, g);
    tape.accumulate(b, -g);
  });
}

/// Elementwise product of equal-shape tensors.
template <typename Scalar>
BasicTensor<Scalar> hadamard(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  detail::require_same_shape(a, b, "hadamard");
  auto& tape = a.tape();
  Matrix<Scalar> out = a.value().cwiseProduct(b.value());
  return tape.record(std::move(out), {a, b}, [a, b, &tape](const Matrix<Scalar>& g) {
    if (a.requires_grad()) tape.accumulate(a, g.cwiseProduct(b.value()));
    if (b.requires_grad()) tape.accumulate(b, g.cwiseProduct(a.value()));
  });
}

/// x + bias, with the 1xC bias broadcast over every row.
template <typename Scalar>
BasicTensor<Scalar> add_rowwise(const BasicTensor<Scalar>& x, const BasicTensor<Scalar>& bias) {
  detail::require_row(bias, x.cols(), "add_rowwise");
  auto& tape = x.tape();
  Matrix<Scalar> out = x.value().rowwise() + bias.value().row(0);
  return tape.record(std::move(out), {x, bias}, [x, bias, &tape](const Matrix<Scalar>& g) {
    tape.accumulate(x, g);
    if (bias.requires_grad()) tape.accumulate(bias, g.colwise().sum());
  });
}

/// x ⊙ v, with the 1xC vector broadcast over every row.
template <typename Scalar>
BasicTensor<Scalar> mul_rowwise(const BasicTensor<Scalar>& x, const BasicTensor<Scalar>& v) {
  detail::require_row(v, x.cols(), "mul_rowwise");
  auto& tape = x.tape();
  Matrix<Scalar> out = x.value().array().rowwise() * v.value().row(0).array();
  return tape.record(std::move(out), {x, v}, [x, v, &tape](const Matrix<Scalar>& g) {
    if (x.requires_grad()) {
      Matrix<Scalar> gx = g.array().rowwise() * v.value().row(0).array();
      tape.accumulate(x, gx);
    }
    if (v.requires_grad()) tape.accumulate(v, g.cwiseProduct(x.value()).colwise().sum());
  });
}

template <typename Scalar>
BasicTensor<Scalar> scale(const BasicTensor<Scalar>& x, Scalar c) {
  auto& tape = x.tape();
  Matrix<Scalar> out = c * x.value();
  return tape.record(std::move(out), {x},
                     [x, c, &tape](const Matrix<Scalar>& g) { tape.accumulate(x, c * g); });
}

/// s * x for a 1x1 tensor s.
template <typename Scalar>
BasicTensor<Scalar> scale(const BasicTensor<Scalar>& x, const BasicTensor<Scalar>& s) {
  detail::require_scalar(s, "scale");
  auto& tape = x.tape();
  Matrix<Scalar> out = s.item() * x.value();
  return tape.record(std::move(out), {x, s}, [x, s, &tape](const Matrix<Scalar>& g) {
    if (x.requires_grad()) tape.accumulate(x, s.item() * g);
    if (s.requires_grad()) {
      Matrix<Scalar> gs(1, 1);
      gs(0, 0) = g.cwiseProduct(x.value()).sum();
      tape.accumulate(s, gs);
    }
  });
}

/// 1 - s for a 1x1 tensor s.
template <typename Scalar>
BasicTensor<Scalar> one_minus(const BasicTensor<Scalar>& s) {
  detail::require_scalar(s, "one_minus");
  auto& tape = s.tape();
  Matrix<Scalar> out(1, 1);
  out(0, 0) = Scalar(1) - s.item();
  return tape.record(std::move(out), {s},
                     [s, &tape](const Matrix<Scalar>& g) { tape.accumulate(s, -g); });
}

/// Joins tensors along rows (axis 0) or columns (axis 1).
template <typename Scalar>
BasicTensor<Scalar> concat(std::span<const BasicTensor<Scalar>> parts, int axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  if (axis != 0 && axis != 1) throw ContractError("concat: axis must be 0 or 1");
  const Index fixed = axis == 0 ? parts[0].cols() : parts[0].rows();
  Index total = 0;
  for (const auto& p : parts) {
    const Index other = axis == 0 ? p.cols() : p.rows();
    if (other != fixed) {
      throw DimensionError("concat: non-concat extents differ " + parts[0].shape() + " vs " +
                           p.shape());
    }
    total += axis == 0 ? p.rows() : p.cols();
  }
  Matrix<Scalar> out = axis == 0 ? Matrix<Scalar>(total, fixed) : Matrix<Scalar>(fixed, total);
  std::vector<Index> offsets;
  offsets.reserve(parts.size());
  Index at = 0;
  for (const auto& p : parts) {
    offsets.push_back(at);
    if (axis == 0) {
      out.middleRows(at, p.rows()) = p.value();
      at += p.rows();
    } else {
      out.middleCols(at, p.cols()) = p.value();
      at += p.cols();
    }
  }
  auto& tape = parts[0].tape();
  std::vector<BasicTensor<Scalar>> inputs(parts.begin(), parts.end());
  return tape.record(std::move(out), parts,
                     [inputs, offsets, axis, &tape](const Matrix<Scalar>& g) {
                       for (std::size_t i = 0; i < inputs.size(); ++i) {
                         const auto& p = inputs[i];
                         if (!p.requires_grad()) continue;
                         if (axis == 0) {
                           tape.accumulate(p, g.middleRows(offsets[i], p.rows()));
                         } else {
                           tape.accumulate(p, g.middleCols(offsets[i], p.cols()));
                         }
                       }
                     });
}

template <typename Scalar>
BasicTensor<Scalar> concat(std::initializer_list<BasicTensor<Scalar>> parts, int axis) {
  return concat(std::span<const BasicTensor<Scalar>>(parts.begin(), parts.size()), axis);
}

template <typename Scalar>
BasicTensor<Scalar> concat(const std::vector<BasicTensor<Scalar>>& parts, int axis) {
  return concat(std::span<const BasicTensor<Scalar>>(parts), axis);
}

template <typename Scalar>
BasicTensor<Scalar> slice_rows(const BasicTensor<Scalar>& x, Index start, Index count) {
  if (start < 0 || count <= 0 || start + count > x.rows()) {
    throw DimensionError("slice_rows: range out of bounds for " + x.shape());
  }
  auto& tape = x.tape();
  Matrix<Scalar> out = x.value().middleRows(start, count);
  return tape.record(std::move(out), {x}, [x, start, count, &tape](const Matrix<Scalar>& g) {
    Matrix<Scalar> gx = Matrix<Scalar>::Zero(x.rows(), x.cols());
    gx.middleRows(start, count) = g;
    tape.accumulate(x, gx);
  });
}

template <typename Scalar>
BasicTensor<Scalar> slice_cols(const BasicTensor<Scalar>& x, Index start, Index count) {
  if (start < 0 || count <= 0 || start + count > x.cols()) {
    throw DimensionError("slice_cols: range out of bounds for " + x.shape());
  }
  auto& tape = x.tape();
  Matrix<Scalar> out = x.value().middleCols(start, count);
  return tape.record(std::move(out), {x}, [x, start, count, &tape](const Matrix<Scalar>& g) {
    Matrix<Scalar> gx = Matrix<Scalar>::Zero(x.rows(), x.cols());
    gx.middleCols(start, count) = g;
    tape.accumulate(x, gx);
  });
}

/// Row-wise softmax, stabilised by subtracting each row's maximum.
template <typename Scalar>
BasicTensor<Scalar> softmax_rows(const BasicTensor<Scalar>& x) {
  const auto& xv = x.value();
  if (xv.hasNaN()) throw NumericError("softmax_rows: NaN input");
  Matrix<Scalar> out(xv.rows(), xv.cols());
  for (Index r = 0; r < xv.rows(); ++r) {
    const Scalar peak = xv.row(r).maxCoeff();
    out.row(r) = (xv.row(r).array() - peak).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  auto& tape = x.tape();
  // The closure reads the softmax output back from its own node.
  const std::size_t self = tape.size();
  return tape.record(std::move(out), {x}, [x, self, &tape](const Matrix<Scalar>& g) {
    const auto& s = tape.value(self);
    const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dots = g.cwiseProduct(s).rowwise().sum();
    Matrix<Scalar> gx = s.cwiseProduct(g.colwise() - dots);
    tape.accumulate(x, gx);
  });
}

namespace detail {

template <typename Scalar>
constexpr Scalar kGeluCoeff = Scalar(0.044715);

template <typename Scalar>
Scalar gelu_value(Scalar x) {
  const Scalar k = std::sqrt(Scalar(2) / std::numbers::pi_v<Scalar>);
  return Scalar(0.5) * x * (Scalar(1) + std::tanh(k * (x + kGeluCoeff<Scalar> * x * x * x)));
}

template <typename Scalar>
Scalar gelu_derivative(Scalar x) {
  const Scalar k = std::sqrt(Scalar(2) / std::numbers::pi_v<Scalar>);
  const Scalar t = std::tanh(k * (x + kGeluCoeff<Scalar> * x * x * x));
  return Scalar(0.5) * (Scalar(1) + t) +
         Scalar(0.5) * x * (Scalar(1) - t * t) * k *
             (Scalar(1) + Scalar(3) * kGeluCoeff<Scalar> * x * x);
}

}  // namespace detail

/// GELU, tanh approximation.
template <typename Scalar>
BasicTensor<Scalar> gelu(const BasicTensor<Scalar>& x) {
  auto& tape = x.tape();
  Matrix<Scalar> out = x.value().unaryExpr([](Scalar v) { return detail::gelu_value(v); });
  return tape.record(std::move(out), {x}, [x, &tape](const Matrix<Scalar>& g) {
    Matrix<Scalar> d = x.value().unaryExpr([](Scalar v) { return detail::gelu_derivative(v); });
    tape.accumulate(x, g.cwiseProduct(d));
  });
}

/// PReLU with a single learnable 1x1 slope.
template <typename Scalar>
BasicTensor<Scalar> prelu(const BasicTensor<Scalar>& x, const BasicTensor<Scalar>& slope) {
  detail::require_scalar(slope, "prelu");
  const Scalar a = slope.item();
  auto& tape = x.tape();
  Matrix<Scalar> out = x.value().unaryExpr([a](Scalar v) { return v >= Scalar(0) ? v : a * v; });
  return tape.record(std::move(out), {x, slope}, [x, slope, &tape](const Matrix<Scalar>& g) {
    const Scalar a = slope.item();
    const auto& xv = x.value();
    if (x.requires_grad()) {
      Matrix<Scalar> gx = g;
      for (Index i = 0; i < gx.size(); ++i) {
        if (xv.data()[i] < Scalar(0)) gx.data()[i] *= a;
      }
      tape.accumulate(x, gx);
    }
    if (slope.requires_grad()) {
      Scalar acc(0);
      for (Index i = 0; i < xv.size(); ++i) {
        if (xv.data()[i] < Scalar(0)) acc += g.data()[i] * xv.data()[i];
      }
      Matrix<Scalar> gs(1, 1);
      gs(0, 0) = acc;
      tape.accumulate(slope, gs);
    }
  });
}

/// Sum of all entries, as a 1x1 tensor.
template <typename Scalar>
BasicTensor<Scalar> sum(const BasicTensor<Scalar>& x) {
  auto& tape = x.tape();
  Matrix<Scalar> out(1, 1);
  out(0, 0) = x.value().sum();
  return tape.record(std::move(out), {x}, [x, &tape](const Matrix<Scalar>& g) {
    tape.accumulate(x, Matrix<Scalar>::Constant(x.rows(), x.cols(), g(0, 0)));
  });
}

/// Per-row sums, Rx1.
template <typename Scalar>
BasicTensor<Scalar> row_sums(const BasicTensor<Scalar>& x) {
  auto& tape = x.tape();
  Matrix<Scalar> out = x.value().rowwise().sum();
  return tape.record(std::move(out), {x}, [x, &tape](const Matrix<Scalar>& g) {
    Matrix<Scalar> gx = g.col(0).replicate(1, x.cols());
    tape.accumulate(x, gx);
  });
}

/// Mean over each consecutive group of `block` rows: [B*block x C] -> [B x C].
template <typename Scalar>
BasicTensor<Scalar> mean_blocks(const BasicTensor<Scalar>& x, Index block) {
  detail::require_blocks(x, block, "mean_blocks");
  const Index groups = x.rows() / block;
  Matrix<Scalar> out(groups, x.cols());
  for (Index b = 0; b < groups; ++b) {
    out.row(b) = x.value().middleRows(b * block, block).colwise().sum() / Scalar(block);
  }
  auto& tape = x.tape();
  return tape.record(std::move(out), {x}, [x, block, groups, &tape](const Matrix<Scalar>& g) {
    Matrix<Scalar> gx(x.rows(), x.cols());
    for (Index b = 0; b < groups; ++b) {
      gx.middleRows(b * block, block) = (g.row(b) / Scalar(block)).replicate(block, 1);
    }
    tape.accumulate(x, gx);
  });
}

/// Scaled dot products within each sample: row r of block b holds
/// scale * q_r . k_j for the `block` rows j of block b. Equivalent to
/// scale * Q_b K_b^T stacked over samples.
template <typename Scalar>
BasicTensor<Scalar> block_scores(const BasicTensor<Scalar>& q, const BasicTensor<Scalar>& k,
                                 Index block, Scalar scale_by) {
  if (q.rows() != k.rows() || q.cols() != k.cols()) {
    throw DimensionError("block_scores: shape mismatch " + q.shape() + " vs " + k.shape());
  }
  detail::require_blocks(q, block, "block_scores");
  const Index groups = q.rows() / block;
  Matrix<Scalar> out(q.rows(), block);
  for (Index b = 0; b < groups; ++b) {
    out.middleRows(b * block, block).noalias() =
        scale_by * q.value().middleRows(b * block, block) *
        k.value().middleRows(b * block, block).transpose();
  }
  auto& tape = q.tape();
  return tape.record(
      std::move(out), {q, k}, [q, k, block, groups, scale_by, &tape](const Matrix<Scalar>& g) {
        if (q.requires_grad()) {
          Matrix<Scalar> gq(q.rows(), q.cols());
          for (Index b = 0; b < groups; ++b) {
            gq.middleRows(b * block, block).noalias() =
                scale_by * g.middleRows(b * block, block) * k.value().middleRows(b * block, block);
          }
          tape.accumulate(q, gq);
        }
        if (k.requires_grad()) {
          Matrix<Scalar> gk(k.rows(), k.cols());
          for (Index b = 0; b < groups; ++b) {
            gk.middleRows(b * block, block).noalias() =
                scale_by * g.middleRows(b * block, block).transpose() *
                q.value().middleRows(b * block, block);
          }
          tape.accumulate(k, gk);
        }
      });
}

/// Applies per-sample [block x block] weights to per-sample values:
/// out_b = A_b V_b for every block b.
template <typename Scalar>
BasicTensor<Scalar> block_apply(const BasicTensor<Scalar>& weights,
                                const BasicTensor<Scalar>& values, Index block) {
  if (weights.cols() != block || weights.rows() != values.rows()) {
    throw DimensionError("block_apply: shape mismatch " + weights.shape() + " vs " +
                         values.shape());
  }
  detail::require_blocks(values, block, "block_apply");
  const Index groups = values.rows() / block;
  Matrix<Scalar> out(values.rows(), values.cols());
  for (Index b = 0; b < groups; ++b) {
    out.middleRows(b * block, block).noalias() =
        weights.value().middleRows(b * block, block) * values.value().middleRows(b * block, block);
  }
  auto& tape = values.tape();
  return tape.record(
      std::move(out), {weights, values},
      [weights, values, block, groups, &tape](const Matrix<Scalar>& g) {
        if (weights.requires_grad()) {
          Matrix<Scalar> ga(weights.rows(), weights.cols());
          for (Index b = 0; b < groups; ++b) {
            ga.middleRows(b * block, block).noalias() =
                g.middleRows(b * block, block) *
                values.value().middleRows(b * block, block).transpose();
          }
          tape.accumulate(weights, ga);
        }
        if (values.requires_grad()) {
          Matrix<Scalar> gv(values.rows(), values.cols());
          for (Index b = 0; b < groups; ++b) {
            gv.middleRows(b * block, block).noalias() =
                weights.value().middleRows(b * block, block).transpose() *
                g.middleRows(b * block, block);
          }
          tape.accumulate(values, gv);
        }
      });
}

/// Mean Smooth L1 (beta = 1) between equal-shape tensors, as a 1x1 tensor.
template <typename Scalar>
BasicTensor<Scalar> smooth_l1(const BasicTensor<Scalar>& pred, const BasicTensor<Scalar>& target) {
  detail::require_same_shape(pred, target, "smooth_l1");
  const Matrix<Scalar> diff = pred.value() - target.value();
  const Scalar n = Scalar(diff.size());
  Matrix<Scalar> out(1, 1);
  out(0, 0) = diff.unaryExpr([](Scalar d) {
                    const Scalar a = std::abs(d);
                    return a < Scalar(1) ? Scalar(0.5) * d * d : a - Scalar(0.5);
                  }).sum() /
              n;
  auto& tape = pred.tape();
  return tape.record(std::move(out), {pred, target},
                     [pred, target, diff, n, &tape](const Matrix<Scalar>& g) {
                       const Matrix<Scalar> local = diff.unaryExpr([n](Scalar d) {
                         if (std::abs(d) < Scalar(1)) return d / n;
                         return (d > Scalar(0) ? Scalar(1) : Scalar(-1)) / n;
                       });
                       tape.accumulate(pred, g(0, 0) * local);
                       tape.accumulate(target, -g(0, 0) * local);
                     });
}

using Tape = BasicTape<double>;
using Tensor = BasicTensor<double>;

}  // namespace drexperts
