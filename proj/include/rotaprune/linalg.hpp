#pragma once

#include "rotaprune/matrix.hpp"

namespace rotaprune {

/// c = a * b. Each output entry accumulates over k in increasing order starting
/// from 0.0, so results are bit-identical to the textbook triple loop.
Matrix matmul(const Matrix& a, const Matrix& b);
/// a^T * b without materializing the transpose.
Matrix matmul_tn(const Matrix& a, const Matrix& b);
/// a * b^T without materializing the transpose.
Matrix matmul_nt(const Matrix& a, const Matrix& b);

struct QrFactors {
    Matrix q;  // orthogonal
    Matrix r;  // upper triangular, strictly positive diagonal
};

/// Householder QR of a square, full-rank matrix.
///
/// Signs are normalized so that diag(r) > 0, which makes the factorization a
/// function of the input (and differentiable in it). Throws RankDeficientError
/// when |r_jj| < 1e-12 * ||a||_F.
QrFactors qr_decompose(const Matrix& a);

/// 2-norm condition estimate max|r_jj| / min|r_jj| from a QR factorization.
double condition_estimate(const QrFactors& f);

/// Lower-triangular L with L L^T = a. Throws NotPositiveDefiniteError.
Matrix cholesky(const Matrix& a);

/// Solves L x = b for lower-triangular L (b may have many columns).
Matrix solve_lower(const Matrix& l, const Matrix& b);
/// Solves U x = b for upper-triangular U.
Matrix solve_upper(const Matrix& u, const Matrix& b);

/// The dampening actually added to the diagonal: damp * mean(diag h).
double dampening(const Matrix& h, double damp);

/// Inverse of h + damp * mean(diag h) * I through its Cholesky factor.
/// The result is exactly symmetric.
Matrix cholesky_inverse(const Matrix& h, double damp);

/// Throws InvalidArgument if |h_ij - h_ji| exceeds tol * max(1, max|h|).
void require_symmetric(const Matrix& h, double tol, const char* what);

}  // namespace rotaprune
