#include "rotaprune/entropy.hpp"

#include <cmath>
#include <string>

namespace rotaprune {

double neg_xlogx(double x) { return x == 0.0 ? 0.0 : -x * std::log(x); }

namespace {

// Mirrors the tape formulation: t = s + eps, inv = 1 / sum t, sum of -p ln p with
// p = t * inv. Sums are order-independent, so permuting a group is bit-neutral.
template <typename At>
double slice_entropy(std::size_t n, double epsilon, At at) {
    std::vector<double> t(n);
    for (std::size_t k = 0; k < n; ++k) t[k] = at(k) + epsilon;
    const double total = ordered_sum(t);
    if (!(total > 0.0)) throw InvalidArgument("group_entropy: all-zero group needs epsilon > 0");
    const double inv = 1.0 / total;
    for (double& x : t) x = neg_xlogx(x * inv);
    return ordered_sum(std::move(t));
}

}  // namespace

GroupEntropy group_entropy(const Matrix& scores, GroupLayout layout, double epsilon) {
    if (epsilon < 0.0) throw InvalidArgument("group_entropy: epsilon must be >= 0");
    for (std::size_t i = 0; i < scores.rows(); ++i)
        for (std::size_t j = 0; j < scores.cols(); ++j)
            if (scores(i, j) < 0.0) {
                throw InvalidArgument("group_entropy: negative score at (" + std::to_string(i) + ", " +
                                      std::to_string(j) + ")");
            }

    GroupEntropy out;
    double rows_total = 0.0, cols_total = 0.0;
    if (layout != GroupLayout::Columns) {
        out.rows.resize(scores.rows());
        for (std::size_t i = 0; i < scores.rows(); ++i)
            out.rows[i] = slice_entropy(scores.cols(), epsilon, [&](std::size_t k) { return scores(i, k); });
        rows_total = ordered_sum(out.rows);
    }
    if (layout != GroupLayout::Rows) {
        out.columns.resize(scores.cols());
        for (std::size_t j = 0; j < scores.cols(); ++j)
            out.columns[j] = slice_entropy(scores.rows(), epsilon, [&](std::size_t k) { return scores(k, j); });
        cols_total = ordered_sum(out.columns);
    }
    switch (layout) {
        case GroupLayout::Rows: out.total = rows_total; break;
        case GroupLayout::Columns: out.total = cols_total; break;
        case GroupLayout::RowsAndColumns: out.total = rows_total + cols_total; break;
    }
    return out;
}

double entropy_of(const std::vector<double>& scores, double epsilon) {
    return group_entropy(Matrix::row_vector(scores), GroupLayout::Rows, epsilon).total;
}

double max_group_entropy(std::size_t rows, std::size_t cols, GroupLayout layout) {
    const double row_part = static_cast<double>(rows) * std::log(static_cast<double>(cols));
    const double col_part = static_cast<double>(cols) * std::log(static_cast<double>(rows));
    switch (layout) {
        case GroupLayout::Rows: return row_part;
        case GroupLayout::Columns: return col_part;
        case GroupLayout::RowsAndColumns: return row_part + col_part;
    }
    return 0.0;
}

std::vector<NormGroup> normalization_groups(std::size_t layer, std::size_t rows, std::size_t cols, GroupLayout layout) {
    std::vector<NormGroup> groups;
    if (layout != GroupLayout::Columns) {
        for (std::size_t i = 0; i < rows; ++i) {
            NormGroup g{layer, NormGroup::Axis::Row, i, {}};
            for (std::size_t j = 0; j < cols; ++j) g.members.emplace_back(i, j);
            groups.push_back(std::move(g));
        }
    }
    if (layout != GroupLayout::Rows) {
        for (std::size_t j = 0; j < cols; ++j) {
            NormGroup g{layer, NormGroup::Axis::Column, j, {}};
            for (std::size_t i = 0; i < rows; ++i) g.members.emplace_back(i, j);
            groups.push_back(std::move(g));
        }
    }
    return groups;
}

}  // namespace rotaprune
