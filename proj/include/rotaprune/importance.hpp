#pragma once

#include <array>
#include <cstddef>
#include <string_view>

#include "rotaprune/matrix.hpp"

namespace rotaprune {

enum class Metric { Magnitude, Wanda, Obd, SparseGpt };

/// Which slices of a score matrix form the probability groups for the entropy.
enum class GroupLayout { Rows, Columns, RowsAndColumns };

/// Where the shared rotations touch a linear layer stored as Y = W X
/// (W is d_out x d_in, inputs are columns):
///   RightOnly  W' = W R1,        H' = R1^T H R1   (Q, K, Gate, Up)
///   LeftOnly   W' = R1^T W,      H' = H           (Down)
///   TwoSidedV  W' = R2^T W R1,   H' = R1^T H R1   (V)
///   TwoSidedO  W' = R1^T W R2,   H' = R2^T H R2   (O)
enum class RotationCase { RightOnly, LeftOnly, TwoSidedV, TwoSidedO };

/// The seven linears of a decoder layer, in bundle order.
enum class Linear { Q, K, V, O, Gate, Up, Down };
inline constexpr std::array<Linear, 7> kAllLinears = {Linear::Q,    Linear::K,  Linear::V,   Linear::O,
                                                      Linear::Gate, Linear::Up, Linear::Down};

std::string_view metric_name(Metric m);
Metric parse_metric(std::string_view name);
std::string_view linear_name(Linear l);
std::string_view layout_name(GroupLayout g);
RotationCase rotation_case(Linear l);
/// Right-side rotation groups by rows, left-side by columns, both sides by both.
GroupLayout layout_for(RotationCase c);

/// Accumulated H = sum over samples of x x^T for one linear input.
struct CalibStats {
    CalibStats() = default;
    explicit CalibStats(std::size_t dim) : h(dim, dim) {}

    std::size_t dim() const { return h.rows(); }
    void seal() { sealed = true; }

    Matrix h;
    std::size_t samples = 0;
    bool sealed = false;
};

/// H += X X^T for a batch whose columns are samples (X is d_in x n).
/// Samples are folded in one at a time, so splitting a batch never changes H.
void accumulate_hessian(CalibStats& stats, const Matrix& x_batch);
/// Same, for activations laid out one sample per row (n x d_in).
void accumulate_hessian_rows(CalibStats& stats, const Matrix& activations);

struct ImportanceMap {
    Matrix scores;
    Metric metric = Metric::Magnitude;
    GroupLayout layout = GroupLayout::Rows;
};

/// |W_ij|
ImportanceMap score_magnitude(const Matrix& w);
/// W_ij^2 * H_jj
ImportanceMap score_obd(const Matrix& w, const Matrix& h);
/// |W_ij| * sqrt(H_jj). Squaring gives score_obd exactly in value.
ImportanceMap score_wanda(const Matrix& w, const Matrix& h);
/// W_ij^2 / Hinv_jj
ImportanceMap score_sparsegpt(const Matrix& w, const Matrix& h_inv);

struct RotatedLinear {
    Matrix w;
    Matrix h;
};

/// The rotated weight alone, per the case table. No orthogonality check.
Matrix rotate_weight(const Matrix& w, RotationCase c, const Matrix& r1, const Matrix& r2);
/// Rotated weight and the Hessian of the rotated input, derived from the
/// original H. `r2` may be empty for cases that do not use it.
RotatedLinear rotate_linear(const Matrix& w, const Matrix& h, RotationCase c, const Matrix& r1, const Matrix& r2);

/// Rotates whichever side of `h` sees the rotated input (used for H and H^-1 alike).
Matrix rotate_hessian(const Matrix& h, RotationCase c, const Matrix& r1, const Matrix& r2);

/// Scores of the rotated layer. Rotated scores always use squared weights:
///   Magnitude  W'^2
///   Wanda, OBD W'^2 * diag(H')
///   SparseGPT  W'^2 / diag(R^T Hinv R), Hinv = (H + lambda I)^-1
/// At the identity rotation Magnitude and Wanda are the squares of their
/// unrotated forms and OBD/SparseGPT coincide with them.
ImportanceMap score_rotated(const Matrix& w, const Matrix& h, RotationCase c, const Matrix& r1, const Matrix& r2,
                            Metric metric, double damp = 0.01);

/// tr(W H W^T), the exact squared output norm ||W X||_F^2.
double quadratic_form_trace(const Matrix& w, const Matrix& h);

/// Throws InvalidArgument if max|Q^T Q - I| > tol.
void require_orthogonal(const Matrix& q, double tol, const char* what);

}  // namespace rotaprune
