#include "rotaprune/tape.hpp"

#include <cmath>
#include <optional>
#include <string>

#include "rotaprune/linalg.hpp"

namespace rotaprune {

namespace {

double neg_xlogx_value(double x) { return x == 0.0 ? 0.0 : -x * std::log(x); }

void accumulate(std::optional<Matrix>& slot, Matrix g) {
    if (slot) {
        *slot += g;
    } else {
        slot = std::move(g);
    }
}

Matrix map_values(const Matrix& a, double (*fn)(double)) {
    Matrix out = a;
    for (double& x : out.data()) x = fn(x);
    return out;
}

}  // namespace

const char* op_name(OpKind kind) {
    switch (kind) {
        case OpKind::Parameter: return "parameter";
        case OpKind::Constant: return "constant";
        case OpKind::MatMul: return "matmul";
        case OpKind::Transpose: return "transpose";
        case OpKind::Add: return "add";
        case OpKind::Mul: return "mul";
        case OpKind::Square: return "square";
        case OpKind::Abs: return "abs";
        case OpKind::Reciprocal: return "reciprocal";
        case OpKind::Log: return "log";
        case OpKind::Exp: return "exp";
        case OpKind::NegXLogX: return "neg_xlogx";
        case OpKind::Scale: return "scale";
        case OpKind::AddScalar: return "add_scalar";
        case OpKind::SumRows: return "sum_rows";
        case OpKind::SumCols: return "sum_cols";
        case OpKind::SumAll: return "sum_all";
        case OpKind::Diag: return "diag";
        case OpKind::MulRow: return "mul_row";
        case OpKind::MulCol: return "mul_col";
        case OpKind::QrQ: return "qr";
        case OpKind::QrR: return "qr_r";
        case OpKind::BlockDiag: return "block_diag";
    }
    return "?";
}

const Matrix& Gradients::operator[](NodeId leaf) const {
    auto it = by_leaf_.find(leaf.index);
    if (it == by_leaf_.end()) throw InvalidArgument("gradients: node " + std::to_string(leaf.index) + " is not a parameter");
    return it->second;
}

const Tape::Node& Tape::node(NodeId id) const {
    if (id.index >= nodes_.size()) throw InvalidArgument("tape: unknown node " + std::to_string(id.index));
    return nodes_[id.index];
}

NodeId Tape::push(OpKind kind, std::vector<std::size_t> inputs, Matrix value, double param, Matrix aux) {
    nodes_.push_back(Node{kind, std::move(inputs), std::move(value), param, std::move(aux)});
    return NodeId{nodes_.size() - 1};
}

double Tape::scalar(NodeId id) const {
    const Matrix& v = value(id);
    if (v.rows() != 1 || v.cols() != 1) throw ShapeError("tape: node is not scalar, shape " + v.shape_string());
    return v(0, 0);
}

std::vector<NodeId> Tape::parameters() const {
    std::vector<NodeId> out;
    for (std::size_t i = 0; i < nodes_.size(); ++i)
        if (nodes_[i].kind == OpKind::Parameter) out.push_back(NodeId{i});
    return out;
}

NodeId Tape::parameter(Matrix value) { return push(OpKind::Parameter, {}, std::move(value)); }
NodeId Tape::constant(Matrix value) { return push(OpKind::Constant, {}, std::move(value)); }

NodeId Tape::matmul(NodeId a, NodeId b) {
    return push(OpKind::MatMul, {a.index, b.index}, rotaprune::matmul(node(a).value, node(b).value));
}

NodeId Tape::transpose(NodeId a) { return push(OpKind::Transpose, {a.index}, rotaprune::transpose(node(a).value)); }

NodeId Tape::add(NodeId a, NodeId b) { return push(OpKind::Add, {a.index, b.index}, node(a).value + node(b).value); }

NodeId Tape::mul(NodeId a, NodeId b) {
    return push(OpKind::Mul, {a.index, b.index}, hadamard(node(a).value, node(b).value));
}

NodeId Tape::square(NodeId a) { return push(OpKind::Square, {a.index}, rotaprune::square(node(a).value)); }

NodeId Tape::abs(NodeId a) { return push(OpKind::Abs, {a.index}, rotaprune::abs(node(a).value)); }

NodeId Tape::reciprocal(NodeId a) {
    return push(OpKind::Reciprocal, {a.index}, map_values(node(a).value, [](double x) { return 1.0 / x; }));
}

NodeId Tape::log(NodeId a) {
    return push(OpKind::Log, {a.index}, map_values(node(a).value, [](double x) { return std::log(x); }));
}

NodeId Tape::exp(NodeId a) {
    return push(OpKind::Exp, {a.index}, map_values(node(a).value, [](double x) { return std::exp(x); }));
}

NodeId Tape::neg_xlogx(NodeId a) { return push(OpKind::NegXLogX, {a.index}, map_values(node(a).value, neg_xlogx_value)); }

NodeId Tape::scale(NodeId a, double s) { return push(OpKind::Scale, {a.index}, node(a).value * s, s); }

NodeId Tape::add_scalar(NodeId a, double s) {
    Matrix v = node(a).value;
    for (double& x : v.data()) x += s;
    return push(OpKind::AddScalar, {a.index}, std::move(v), s);
}

NodeId Tape::sum_rows(NodeId a) {
    const Matrix& x = node(a).value;
    Matrix out(x.rows(), 1);
    for (std::size_t i = 0; i < x.rows(); ++i) out(i, 0) = ordered_sum({x.row(i).begin(), x.row(i).end()});
    return push(OpKind::SumRows, {a.index}, std::move(out));
}

NodeId Tape::sum_cols(NodeId a) {
    const Matrix& x = node(a).value;
    Matrix out(1, x.cols());
    std::vector<double> column(x.rows());
    for (std::size_t j = 0; j < x.cols(); ++j) {
        for (std::size_t i = 0; i < x.rows(); ++i) column[i] = x(i, j);
        out(0, j) = ordered_sum(column);
    }
    return push(OpKind::SumCols, {a.index}, std::move(out));
}

NodeId Tape::sum_all(NodeId a) {
    return push(OpKind::SumAll, {a.index}, Matrix(1, 1, rotaprune::sum(node(a).value)));
}

NodeId Tape::diag(NodeId a) {
    const Matrix& x = node(a).value;
    require_square(x, "tape diag");
    return push(OpKind::Diag, {a.index}, Matrix::row_vector(diagonal_of(x)));
}

NodeId Tape::mul_row(NodeId a, NodeId row) {
    const Matrix& x = node(a).value;
    const Matrix& r = node(row).value;
    if (r.rows() != 1 || r.cols() != x.cols()) throw ShapeError("mul_row: " + x.shape_string() + " by " + r.shape_string());
    Matrix out = x;
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) *= r(0, j);
    return push(OpKind::MulRow, {a.index, row.index}, std::move(out));
}

NodeId Tape::mul_col(NodeId a, NodeId col) {
    const Matrix& x = node(a).value;
    const Matrix& c = node(col).value;
    if (c.cols() != 1 || c.rows() != x.rows()) throw ShapeError("mul_col: " + x.shape_string() + " by " + c.shape_string());
    Matrix out = x;
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) *= c(i, 0);
    return push(OpKind::MulCol, {a.index, col.index}, std::move(out));
}

NodeId Tape::qr(NodeId a) {
    QrFactors f = qr_decompose(node(a).value);
    return push(OpKind::QrQ, {a.index}, std::move(f.q), 0.0, std::move(f.r));
}

NodeId Tape::qr_r(NodeId qr_node) {
    const Node& n = node(qr_node);
    if (n.kind != OpKind::QrQ) throw InvalidArgument("qr_r: input is not a qr node");
    return push(OpKind::QrR, {qr_node.index}, n.aux);
}

NodeId Tape::block_diag(std::span<const NodeId> blocks) {
    std::size_t total = 0;
    std::vector<std::size_t> inputs;
    for (NodeId b : blocks) {
        require_square(node(b).value, "block_diag");
        total += node(b).value.rows();
        inputs.push_back(b.index);
    }
    Matrix out(total, total);
    std::size_t off = 0;
    for (NodeId b : blocks) {
        const Matrix& x = node(b).value;
        for (std::size_t i = 0; i < x.rows(); ++i)
            for (std::size_t j = 0; j < x.cols(); ++j) out(off + i, off + j) = x(i, j);
        off += x.rows();
    }
    return push(OpKind::BlockDiag, std::move(inputs), std::move(out));
}

Gradients Tape::backward(NodeId loss) const {
    const Matrix& lv = node(loss).value;
    if (lv.rows() != 1 || lv.cols() != 1) throw ShapeError("backward: loss must be 1x1, got " + lv.shape_string());

    std::vector<std::optional<Matrix>> grads(nodes_.size());
    grads[loss.index] = Matrix(1, 1, 1.0);
    Gradients out;

    for (std::size_t idx = loss.index + 1; idx-- > 0;) {
        const Node& n = nodes_[idx];
        ++out.visited_;
        if (n.kind == OpKind::Parameter) {
            out.by_leaf_.emplace(idx, grads[idx] ? std::move(*grads[idx]) : Matrix(n.value.rows(), n.value.cols()));
            continue;
        }
        if (!grads[idx]) continue;
        const Matrix& g = *grads[idx];
        auto in = [&](std::size_t k) -> const Matrix& { return nodes_[n.inputs[k]].value; };
        auto slot = [&](std::size_t k) -> std::optional<Matrix>& { return grads[n.inputs[k]]; };

        switch (n.kind) {
            case OpKind::Parameter:
            case OpKind::Constant:
                break;
            case OpKind::MatMul:
                accumulate(slot(0), matmul_nt(g, in(1)));
                accumulate(slot(1), matmul_tn(in(0), g));
                break;
            case OpKind::Transpose:
                accumulate(slot(0), rotaprune::transpose(g));
                break;
            case OpKind::Add:
                accumulate(slot(0), g);
                accumulate(slot(1), g);
                break;
            case OpKind::Mul:
                accumulate(slot(0), hadamard(g, in(1)));
                accumulate(slot(1), hadamard(g, in(0)));
                break;
            case OpKind::Square: {
                Matrix d = hadamard(g, in(0));
                d *= 2.0;
                accumulate(slot(0), std::move(d));
                break;
            }
            case OpKind::Abs: {
                Matrix d = g;
                const auto x = in(0).data();
                auto dd = d.data();
                for (std::size_t i = 0; i < dd.size(); ++i)
                    dd[i] = x[i] > 0.0 ? dd[i] : (x[i] < 0.0 ? -dd[i] : 0.0);
                accumulate(slot(0), std::move(d));
                break;
            }
            case OpKind::Reciprocal: {
                Matrix d = g;
                const auto y = n.value.data();
                auto dd = d.data();
                for (std::size_t i = 0; i < dd.size(); ++i) dd[i] *= -(y[i] * y[i]);
                accumulate(slot(0), std::move(d));
                break;
            }
            case OpKind::Log: {
                Matrix d = g;
                const auto x = in(0).data();
                auto dd = d.data();
                for (std::size_t i = 0; i < dd.size(); ++i) dd[i] /= x[i];
                accumulate(slot(0), std::move(d));
                break;
            }
            case OpKind::Exp:
                accumulate(slot(0), hadamard(g, n.value));
                break;
            case OpKind::NegXLogX: {
                Matrix d = g;
                const auto x = in(0).data();
                auto dd = d.data();
                for (std::size_t i = 0; i < dd.size(); ++i) dd[i] = x[i] == 0.0 ? 0.0 : -dd[i] * (std::log(x[i]) + 1.0);
                accumulate(slot(0), std::move(d));
                break;
            }
            case OpKind::Scale:
                accumulate(slot(0), g * n.param);
                break;
            case OpKind::AddScalar:
                accumulate(slot(0), g);
                break;
            case OpKind::SumRows: {
                const Matrix& x = in(0);
                Matrix d(x.rows(), x.cols());
                for (std::size_t i = 0; i < x.rows(); ++i)
                    for (std::size_t j = 0; j < x.cols(); ++j) d(i, j) = g(i, 0);
                accumulate(slot(0), std::move(d));
                break;
            }
            case OpKind::SumCols: {
                const Matrix& x = in(0);
                Matrix d(x.rows(), x.cols());
                for (std::size_t i = 0; i < x.rows(); ++i)
                    for (std::size_t j = 0; j < x.cols(); ++j) d(i, j) = g(0, j);
                accumulate(slot(0), std::move(d));
                break;
            }
            case OpKind::SumAll: {
                const Matrix& x = in(0);
                accumulate(slot(0), Matrix(x.rows(), x.cols(), g(0, 0)));
                break;
            }
            case OpKind::Diag: {
                const Matrix& x = in(0);
                Matrix d(x.rows(), x.cols());
                for (std::size_t i = 0; i < x.rows(); ++i) d(i, i) = g(0, i);
                accumulate(slot(0), std::move(d));
                break;
            }
            case OpKind::MulRow: {
                const Matrix& x = in(0);
                const Matrix& r = in(1);
                Matrix dx = g;
                Matrix dr(1, r.cols());
                for (std::size_t i = 0; i < x.rows(); ++i)
                    for (std::size_t j = 0; j < x.cols(); ++j) {
                        dx(i, j) = g(i, j) * r(0, j);
                        dr(0, j) += g(i, j) * x(i, j);
                    }
                accumulate(slot(0), std::move(dx));
                accumulate(slot(1), std::move(dr));
                break;
            }
            case OpKind::MulCol: {
                const Matrix& x = in(0);
                const Matrix& c = in(1);
                Matrix dx = g;
                Matrix dc(c.rows(), 1);
                for (std::size_t i = 0; i < x.rows(); ++i)
                    for (std::size_t j = 0; j < x.cols(); ++j) {
                        dx(i, j) = g(i, j) * c(i, 0);
                        dc(i, 0) += g(i, j) * x(i, j);
                    }
                accumulate(slot(0), std::move(dx));
                accumulate(slot(1), std::move(dc));
                break;
            }
            case OpKind::QrQ: {
                // A = QR with Q-only cotangent G:
                //   dA = Q * tril(Q^T G - G^T Q, -1) * R^{-T}
                const Matrix& q = n.value;
                const Matrix& r = n.aux;
                const Matrix m = matmul_tn(q, g);
                const std::size_t dim = q.rows();
                Matrix b(dim, dim);
                for (std::size_t i = 0; i < dim; ++i)
                    for (std::size_t j = 0; j < i; ++j) b(i, j) = m(i, j) - m(j, i);
                // Y R^T = B  <=>  R Y^T = B^T
                const Matrix y = rotaprune::transpose(solve_upper(r, rotaprune::transpose(b)));
                accumulate(slot(0), rotaprune::matmul(q, y));
                break;
            }
            case OpKind::QrR:
                if (max_abs(g) != 0.0) {
                    throw InvalidArgument("backward: gradient through the R factor of qr is not supported");
                }
                break;
            case OpKind::BlockDiag: {
                std::size_t off = 0;
                for (std::size_t k = 0; k < n.inputs.size(); ++k) {
                    const Matrix& x = in(k);
                    Matrix d(x.rows(), x.cols());
                    for (std::size_t i = 0; i < x.rows(); ++i)
                        for (std::size_t j = 0; j < x.cols(); ++j) d(i, j) = g(off + i, off + j);
                    off += x.rows();
                    accumulate(slot(k), std::move(d));
                }
                break;
            }
        }
    }
    return out;
}

double evaluate(const TapeFunction& f, const Matrix& a) {
    Tape tape;
    const NodeId x = tape.parameter(a);
    return tape.scalar(f(tape, x));
}

double check_gradient(const TapeFunction& f, const Matrix& a, double step) {
    if (!(step > 0.0)) throw InvalidArgument("check_gradient: step must be > 0");
    Tape tape;
    const NodeId x = tape.parameter(a);
    const NodeId loss = f(tape, x);
    const Matrix analytic = tape.backward(loss)[x];

    double worst = 0.0;
    Matrix probe = a;
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) {
            const double orig = probe(i, j);
            const std::string where = "check_gradient: non-finite value when perturbing entry (" +
                                      std::to_string(i) + ", " + std::to_string(j) + ")";
            double fp = 0.0, fm = 0.0;
            try {
                probe(i, j) = orig + step;
                fp = evaluate(f, probe);
                probe(i, j) = orig - step;
                fm = evaluate(f, probe);
            } catch (const NumericalError& e) {
                throw NumericalError(where + ": " + e.what());
            }
            probe(i, j) = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm)) throw NumericalError(where);
            const double fd = (fp - fm) / (2.0 * step);
            const double err = std::fabs(analytic(i, j) - fd) / std::max(std::fabs(fd), 1e-8);
            worst = std::max(worst, err);
        }
    }
    return worst;
}

}  // namespace rotaprune
