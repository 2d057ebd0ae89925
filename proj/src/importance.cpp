#include "rotaprune/importance.hpp"

#include <cmath>
#include <string>

#include "rotaprune/linalg.hpp"

namespace rotaprune {

std::string_view metric_name(Metric m) {
    switch (m) {
        case Metric::Magnitude: return "magnitude";
        case Metric::Wanda: return "wanda";
        case Metric::Obd: return "obd";
        case Metric::SparseGpt: return "sparsegpt";
    }
    return "?";
}

Metric parse_metric(std::string_view name) {
    if (name == "magnitude") return Metric::Magnitude;
    if (name == "wanda") return Metric::Wanda;
    if (name == "obd") return Metric::Obd;
    if (name == "sparsegpt") return Metric::SparseGpt;
    throw InvalidArgument("unknown metric '" + std::string(name) + "'");
}

std::string_view linear_name(Linear l) {
    switch (l) {
        case Linear::Q: return "q";
        case Linear::K: return "k";
        case Linear::V: return "v";
        case Linear::O: return "o";
        case Linear::Gate: return "gate";
        case Linear::Up: return "up";
        case Linear::Down: return "down";
    }
    return "?";
}

std::string_view layout_name(GroupLayout g) {
    switch (g) {
        case GroupLayout::Rows: return "rows";
        case GroupLayout::Columns: return "columns";
        case GroupLayout::RowsAndColumns: return "rows-and-columns";
    }
    return "?";
}

RotationCase rotation_case(Linear l) {
    switch (l) {
        case Linear::Q:
        case Linear::K:
        case Linear::Gate:
        case Linear::Up: return RotationCase::RightOnly;
        case Linear::V: return RotationCase::TwoSidedV;
        case Linear::O: return RotationCase::TwoSidedO;
        case Linear::Down: return RotationCase::LeftOnly;
    }
    return RotationCase::RightOnly;
}

GroupLayout layout_for(RotationCase c) {
    switch (c) {
        case RotationCase::RightOnly: return GroupLayout::Rows;
        case RotationCase::LeftOnly: return GroupLayout::Columns;
        case RotationCase::TwoSidedV:
        case RotationCase::TwoSidedO: return GroupLayout::RowsAndColumns;
    }
    return GroupLayout::Rows;
}

namespace {

void fold_sample(CalibStats& stats, const double* x, std::size_t stride) {
    const std::size_t d = stats.dim();
    for (std::size_t i = 0; i < d; ++i) {
        const double xi = x[i * stride];
        double* hi = stats.h.row(i).data();
        for (std::size_t j = 0; j < d; ++j) hi[j] += xi * x[j * stride];
    }
}

void check_accumulate(const CalibStats& stats, std::size_t feature_dim) {
    if (stats.sealed) throw StateError("accumulate_hessian: statistics are sealed");
    if (feature_dim != stats.dim()) {
        throw ShapeError("accumulate_hessian: batch has " + std::to_string(feature_dim) +
                         " features, statistics expect " + std::to_string(stats.dim()));
    }
}

std::vector<double> checked_diag(const Matrix& w, const Matrix& h, const char* what) {
    require_square(h, what);
    if (h.rows() != w.cols()) {
        throw ShapeError(std::string(what) + ": weight " + w.shape_string() + " vs hessian " + h.shape_string());
    }
    return diagonal_of(h);
}

}  // namespace

void accumulate_hessian(CalibStats& stats, const Matrix& x_batch) {
    check_accumulate(stats, x_batch.rows());
    for (std::size_t s = 0; s < x_batch.cols(); ++s) fold_sample(stats, x_batch.data().data() + s, x_batch.cols());
    stats.samples += x_batch.cols();
}

void accumulate_hessian_rows(CalibStats& stats, const Matrix& activations) {
    check_accumulate(stats, activations.cols());
    for (std::size_t s = 0; s < activations.rows(); ++s) fold_sample(stats, activations.row(s).data(), 1);
    stats.samples += activations.rows();
}

ImportanceMap score_magnitude(const Matrix& w) { return {abs(w), Metric::Magnitude, GroupLayout::Rows}; }

ImportanceMap score_obd(const Matrix& w, const Matrix& h) {
    const auto d = checked_diag(w, h, "score_obd");
    Matrix s(w.rows(), w.cols());
    for (std::size_t i = 0; i < w.rows(); ++i)
        for (std::size_t j = 0; j < w.cols(); ++j) s(i, j) = (w(i, j) * w(i, j)) * d[j];
    return {std::move(s), Metric::Obd, GroupLayout::Rows};
}

ImportanceMap score_wanda(const Matrix& w, const Matrix& h) {
    auto d = checked_diag(w, h, "score_wanda");
    for (std::size_t j = 0; j < d.size(); ++j) {
        if (d[j] < 0.0) {
            throw InvalidArgument("score_wanda: negative hessian diagonal at " + std::to_string(j) +
                                  " (corrupted statistics)");
        }
        d[j] = std::sqrt(d[j]);
    }
    Matrix s(w.rows(), w.cols());
    for (std::size_t i = 0; i < w.rows(); ++i)
        for (std::size_t j = 0; j < w.cols(); ++j) s(i, j) = std::fabs(w(i, j)) * d[j];
    return {std::move(s), Metric::Wanda, GroupLayout::Rows};
}

ImportanceMap score_sparsegpt(const Matrix& w, const Matrix& h_inv) {
    auto d = checked_diag(w, h_inv, "score_sparsegpt");
    for (std::size_t j = 0; j < d.size(); ++j) {
        if (!(d[j] > 0.0)) {
            throw InvalidArgument("score_sparsegpt: non-positive inverse-hessian diagonal at " + std::to_string(j));
        }
        d[j] = 1.0 / d[j];
    }
    Matrix s(w.rows(), w.cols());
    for (std::size_t i = 0; i < w.rows(); ++i)
        for (std::size_t j = 0; j < w.cols(); ++j) s(i, j) = (w(i, j) * w(i, j)) * d[j];
    return {std::move(s), Metric::SparseGpt, GroupLayout::Rows};
}

void require_orthogonal(const Matrix& q, double tol, const char* what) {
    require_square(q, what);
    const double err = orthogonality_error(q);
    if (!(err <= tol)) {
        throw InvalidArgument(std::string(what) + ": rotation not orthogonal (max |Q^T Q - I| = " +
                              std::to_string(err) + ")");
    }
}

Matrix rotate_hessian(const Matrix& h, RotationCase c, const Matrix& r1, const Matrix& r2) {
    switch (c) {
        case RotationCase::LeftOnly: return h;
        case RotationCase::RightOnly:
        case RotationCase::TwoSidedV: return matmul_tn(r1, matmul(h, r1));
        case RotationCase::TwoSidedO: return matmul_tn(r2, matmul(h, r2));
    }
    return h;
}

Matrix rotate_weight(const Matrix& w, RotationCase c, const Matrix& r1, const Matrix& r2) {
    switch (c) {
        case RotationCase::RightOnly: return matmul(w, r1);
        case RotationCase::LeftOnly: return matmul_tn(r1, w);
        case RotationCase::TwoSidedV: return matmul(matmul_tn(r2, w), r1);
        case RotationCase::TwoSidedO: return matmul(matmul_tn(r1, w), r2);
    }
    return w;
}

RotatedLinear rotate_linear(const Matrix& w, const Matrix& h, RotationCase c, const Matrix& r1, const Matrix& r2) {
    require_orthogonal(r1, 1e-8, "rotate_linear r1");
    if (c == RotationCase::TwoSidedV || c == RotationCase::TwoSidedO) require_orthogonal(r2, 1e-8, "rotate_linear r2");
    Matrix wr = rotate_weight(w, c, r1, r2);
    Matrix hr = rotate_hessian(h, c, r1, r2);
    if (hr.rows() != wr.cols()) {
        throw ShapeError("rotate_linear: rotated weight " + wr.shape_string() + " vs hessian " + hr.shape_string());
    }
    return {std::move(wr), std::move(hr)};
}

ImportanceMap score_rotated(const Matrix& w, const Matrix& h, RotationCase c, const Matrix& r1, const Matrix& r2,
                            Metric metric, double damp) {
    RotatedLinear rl = rotate_linear(w, h, c, r1, r2);
    ImportanceMap out;
    switch (metric) {
        case Metric::Magnitude: out.scores = square(rl.w); break;
        case Metric::Wanda:
        case Metric::Obd: out.scores = score_obd(rl.w, rl.h).scores; break;
        case Metric::SparseGpt: {
            const Matrix h_inv = rotate_hessian(cholesky_inverse(h, damp), c, r1, r2);
            out.scores = score_sparsegpt(rl.w, h_inv).scores;
            break;
        }
    }
    out.metric = metric;
    out.layout = layout_for(c);
    return out;
}

double quadratic_form_trace(const Matrix& w, const Matrix& h) {
    require_square(h, "quadratic_form_trace");
    if (h.rows() != w.cols()) throw ShapeError("quadratic_form_trace: " + w.shape_string() + " vs " + h.shape_string());
    const Matrix wh = matmul(w, h);
    double s = 0.0;
    for (std::size_t i = 0; i < w.rows(); ++i)
        for (std::size_t j = 0; j < w.cols(); ++j) s += wh(i, j) * w(i, j);
    return s;
}

}  // namespace rotaprune
