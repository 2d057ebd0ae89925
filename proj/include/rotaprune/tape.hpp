#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <vector>

#include "rotaprune/matrix.hpp"

namespace rotaprune {

struct NodeId {
    std::size_t index = 0;
    friend bool operator==(NodeId a, NodeId b) { return a.index == b.index; }
    friend bool operator<(NodeId a, NodeId b) { return a.index < b.index; }
};

enum class OpKind {
    Parameter,
    Constant,
    MatMul,
    Transpose,
    Add,
    Mul,
    Square,
    Abs,
    Reciprocal,
    Log,
    Exp,
    NegXLogX,
    Scale,
    AddScalar,
    SumRows,  // (m x n) -> (m x 1)
    SumCols,  // (m x n) -> (1 x n)
    SumAll,   // (m x n) -> (1 x 1)
    Diag,     // (n x n) -> (1 x n)
    MulRow,   // (m x n) * broadcast (1 x n)
    MulCol,   // (m x n) * broadcast (m x 1)
    QrQ,      // orthogonal factor of a square matrix
    QrR,      // triangular factor; forward only
    BlockDiag,
};

const char* op_name(OpKind kind);

class Gradients {
public:
    /// Gradient for a parameter leaf. Leaves the loss does not depend on get zeros.
    const Matrix& operator[](NodeId leaf) const;
    bool contains(NodeId leaf) const { return by_leaf_.count(leaf.index) != 0; }
    std::size_t visited_nodes() const { return visited_; }

private:
    friend class Tape;
    std::map<std::size_t, Matrix> by_leaf_;
    std::size_t visited_ = 0;
};

/// Records a computation over a fixed set of matrix operations and replays it
/// in reverse to obtain gradients of a scalar with respect to parameter leaves.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it.
/// A tape is single-owner; build a fresh one per evaluation.
class Tape {
public:
    NodeId parameter(Matrix value);
    NodeId constant(Matrix value);

    NodeId matmul(NodeId a, NodeId b);
    NodeId transpose(NodeId a);
    NodeId add(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId square(NodeId a);
    NodeId abs(NodeId a);  // subgradient 0 at 0
    NodeId reciprocal(NodeId a);
    NodeId log(NodeId a);
    NodeId exp(NodeId a);
    NodeId neg_xlogx(NodeId a);  // -x ln x, with 0 ln 0 = 0 and zero gradient at 0
    NodeId scale(NodeId a, double s);
    NodeId add_scalar(NodeId a, double s);
    NodeId sum_rows(NodeId a);
    NodeId sum_cols(NodeId a);
    NodeId sum_all(NodeId a);
    NodeId diag(NodeId a);
    NodeId mul_row(NodeId a, NodeId row);
    NodeId mul_col(NodeId a, NodeId col);
    /// Q of the sign-normalized QR factorization of a square input.
    NodeId qr(NodeId a);
    /// R of the factorization behind a `qr` node. Not differentiable.
    NodeId qr_r(NodeId qr_node);
    NodeId block_diag(std::span<const NodeId> blocks);

    const Matrix& value(NodeId id) const { return nodes_.at(id.index).value; }
    double scalar(NodeId id) const;
    OpKind kind(NodeId id) const { return nodes_.at(id.index).kind; }
    std::size_t size() const { return nodes_.size(); }
    std::vector<NodeId> parameters() const;

    /// Reverse sweep from a 1x1 node. Throws ShapeError for a non-scalar loss and
    /// InvalidArgument if a nonzero gradient reaches a forward-only node.
    Gradients backward(NodeId loss) const;

private:
    struct Node {
        OpKind kind;
        std::vector<std::size_t> inputs;
        Matrix value;
        double param = 0.0;
        Matrix aux;  // QR: cached R factor
    };

    NodeId push(OpKind kind, std::vector<std::size_t> inputs, Matrix value, double param = 0.0,
                Matrix aux = {});
    const Node& node(NodeId id) const;

    std::vector<Node> nodes_;
};

/// Builds a scalar on the tape from the given parameter node.
using TapeFunction = std::function<NodeId(Tape&, NodeId)>;

/// Largest per-entry relative discrepancy between the tape gradient of `f` at `a`
/// and central differences with the given step:
/// max_ij |analytic - fd| / max(|fd|, 1e-8).
double check_gradient(const TapeFunction& f, const Matrix& a, double step);

/// Value of `f` at `a` without a backward pass.
double evaluate(const TapeFunction& f, const Matrix& a);

}  // namespace rotaprune
