#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "rotaprune/matrix.hpp"

namespace rotaprune {

struct SparsityPattern {
    enum class Kind { Unstructured, NofM };
    Kind kind = Kind::Unstructured;
    double ratio = 0.5;  // fraction pruned, unstructured only
    std::size_t n = 2;   // kept per group, n:m only
    std::size_t m = 4;

    static SparsityPattern unstructured(double ratio);
    static SparsityPattern n_of_m(std::size_t n, std::size_t m);
    /// "unstructured:0.5" or "2:4".
    static SparsityPattern parse(std::string_view text);
    std::string to_string() const;
};

enum class CompareGroup { PerRow, PerLayer };
std::string_view compare_group_name(CompareGroup g);
CompareGroup parse_compare_group(std::string_view text);

struct PruneMask {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::uint8_t> keep;  // row-major, 1 = kept
    SparsityPattern pattern;
    CompareGroup group = CompareGroup::PerRow;

    bool kept(std::size_t i, std::size_t j) const { return keep[i * cols + j] != 0; }
    std::size_t kept_count() const;
    static PruneMask all(std::size_t rows, std::size_t cols, bool keep);
};

/// Entries a group of `size` loses at `ratio`: floor(size * ratio), with a tiny
/// allowance so that e.g. 0.3 * 10 counts as 3.
std::size_t pruned_count(std::size_t size, double ratio);

/// Prunes the lowest scores in each comparison group. Ties prune the smaller
/// column first, then the smaller row.
PruneMask mask_unstructured(const Matrix& scores, double ratio, CompareGroup group = CompareGroup::PerRow);
/// Keeps the n highest scores in each aligned run of m columns; ties prune the
/// lowest index. Throws InvalidArgument when cols is not a multiple of m.
PruneMask mask_nm(const Matrix& scores, std::size_t n, std::size_t m);
PruneMask make_mask(const Matrix& scores, const SparsityPattern& pattern, CompareGroup group = CompareGroup::PerRow);

/// Throws InvalidArgument naming the first row or group that breaks the pattern.
void validate_mask(const PruneMask& mask);

Matrix prune_simple(const Matrix& w, const PruneMask& mask);

/// Column-by-column OBS compensation with a given mask. Uses the upper Cholesky
/// factor U of (H + lambda I)^-1: pruning w_ij subtracts (w_ij / U_jj) * U[j, j:]
/// from row i. Throws NumericalError for a non-positive pivot.
Matrix prune_sparsegpt_with_mask(const Matrix& w, const Matrix& h, const PruneMask& mask, double damp = 0.01);

/// The jointly optimal update of the kept weights for a known mask, row by row:
/// w_K += (H_KK + lambda I)^-1 H_KP w_P. With damp = 0 its output deviation never
/// exceeds prune_simple's. The sequential sweep above freezes kept columns once
/// passed, so it can lose to mask-only pruning on unlucky masks.
Matrix compensate_obs(const Matrix& w, const Matrix& h, const PruneMask& mask, double damp = 0.01);

struct SparseGptResult {
    Matrix w;
    PruneMask mask;
};

/// SparseGPT with masks chosen as it goes from w^2 / U_jj^2 on the partially
/// updated weights: unstructured masks are refreshed at every block of
/// `block_size` columns (each row still loses exactly its quota), n:m masks are
/// fixed when each aligned group is first reached.
SparseGptResult prune_sparsegpt(const Matrix& w, const Matrix& h, const SparsityPattern& pattern,
                                std::size_t block_size = 1, double damp = 0.01,
                                CompareGroup group = CompareGroup::PerRow);

/// tr((W - W_hat) H (W - W_hat)^T) = ||W X - W_hat X||_F^2 for H = X X^T.
double output_deviation(const Matrix& w, const Matrix& w_hat, const Matrix& h);

/// Sum of scores over the pruned entries.
double pruned_score_sum(const Matrix& scores, const PruneMask& mask);

/// rows (u32 LE), cols (u32 LE), then the keep bits row-major, LSB first.
void write_mask(std::ostream& out, const PruneMask& mask);
/// Pattern and group are not stored; they come back as defaults.
PruneMask read_mask(std::istream& in);

}  // namespace rotaprune
