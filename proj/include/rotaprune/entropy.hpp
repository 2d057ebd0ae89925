#pragma once

#include <cstddef>
#include <vector>

#include "rotaprune/importance.hpp"

namespace rotaprune {

/// Entropies (nats) of the normalized score groups of one matrix.
struct GroupEntropy {
    std::vector<double> rows;     // filled for Rows and RowsAndColumns
    std::vector<double> columns;  // filled for Columns and RowsAndColumns
    double total = 0.0;
};

/// -x ln x with 0 ln 0 = 0.
double neg_xlogx(double x);

/// For each group G: p = (s + eps) / sum_G (s + eps), H = -sum p ln p.
/// Total sums the row pass and the column pass when both are present.
/// Throws InvalidArgument for a negative score.
GroupEntropy group_entropy(const Matrix& scores, GroupLayout layout, double epsilon);

/// Entropy of a single group given as a flat list.
double entropy_of(const std::vector<double>& scores, double epsilon);

/// Sum over groups of ln |G|, the largest value group_entropy can return.
double max_group_entropy(std::size_t rows, std::size_t cols, GroupLayout layout);

/// One normalization group: a full row or a full column of one matrix.
struct NormGroup {
    enum class Axis { Row, Column };
    std::size_t layer = 0;  // index of the linear inside its bundle
    Axis axis = Axis::Row;
    std::size_t index = 0;
    std::vector<std::pair<std::size_t, std::size_t>> members;
};

/// Enumerates the groups of a rows x cols score matrix under `layout`.
std::vector<NormGroup> normalization_groups(std::size_t layer, std::size_t rows, std::size_t cols, GroupLayout layout);

}  // namespace rotaprune
