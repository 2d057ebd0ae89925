#include "rotaprune/linalg.hpp"

#include <algorithm>
#include <cmath>

namespace rotaprune {

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: inner dimensions differ, " + a.shape_string() + " * " + b.shape_string());
    }
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    Matrix c(n, m);
    // i-k-j order: c(i, j) still receives its k terms in increasing k.
    for (std::size_t i = 0; i < n; ++i) {
        double* ci = c.row(i).data();
        const double* ai = a.row(i).data();
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = ai[p];
            const double* bp = b.row(p).data();
            for (std::size_t j = 0; j < m; ++j) ci[j] += aip * bp[j];
        }
    }
    return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) {
        throw ShapeError("matmul_tn: row counts differ, " + a.shape_string() + "^T * " + b.shape_string());
    }
    const std::size_t n = a.cols(), k = a.rows(), m = b.cols();
    Matrix c(n, m);
    for (std::size_t p = 0; p < k; ++p) {
        const double* ap = a.row(p).data();
        const double* bp = b.row(p).data();
        for (std::size_t i = 0; i < n; ++i) {
            const double api = ap[i];
            double* ci = c.row(i).data();
            for (std::size_t j = 0; j < m; ++j) ci[j] += api * bp[j];
        }
    }
    return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) {
        throw ShapeError("matmul_nt: column counts differ, " + a.shape_string() + " * " + b.shape_string() + "^T");
    }
    const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
    Matrix c(n, m);
    for (std::size_t i = 0; i < n; ++i) {
        const double* ai = a.row(i).data();
        for (std::size_t j = 0; j < m; ++j) {
            const double* bj = b.row(j).data();
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
            c(i, j) = s;
        }
    }
    return c;
}

QrFactors qr_decompose(const Matrix& a) {
    require_square(a, "qr_decompose");
    const std::size_t n = a.rows();
    const double anorm = frobenius_norm(a);
    const double threshold = 1e-12 * anorm;

    Matrix r = a;
    Matrix q = Matrix::identity(n);
    std::vector<double> v(n);

    for (std::size_t k = 0; k < n; ++k) {
        double norm_x = 0.0;
        for (std::size_t i = k; i < n; ++i) norm_x += r(i, k) * r(i, k);
        norm_x = std::sqrt(norm_x);
        if (!(norm_x > threshold)) throw RankDeficientError(k, norm_x);
        // The trailing 1x1 block needs no reflection; the sign fix below handles it,
        // and skipping keeps q bitwise independent of the last column of a.
        if (k + 1 == n) break;

        // Reflector H = I - beta v v^T, unnormalized v to keep simple cases exact.
        const double sign = r(k, k) >= 0.0 ? 1.0 : -1.0;
        for (std::size_t i = k; i < n; ++i) v[i] = r(i, k);
        v[k] += sign * norm_x;
        double vtv = 0.0;
        for (std::size_t i = k; i < n; ++i) vtv += v[i] * v[i];
        const double beta = 2.0 / vtv;

        for (std::size_t j = k; j < n; ++j) {
            double dot = 0.0;
            for (std::size_t i = k; i < n; ++i) dot += v[i] * r(i, j);
            const double s = beta * dot;
            for (std::size_t i = k; i < n; ++i) r(i, j) -= s * v[i];
        }
        for (std::size_t i = 0; i < n; ++i) {
            double dot = 0.0;
            for (std::size_t j = k; j < n; ++j) dot += q(i, j) * v[j];
            const double s = beta * dot;
            for (std::size_t j = k; j < n; ++j) q(i, j) -= s * v[j];
        }
    }

    for (std::size_t k = 0; k < n; ++k) {
        for (std::size_t i = k + 1; i < n; ++i) r(i, k) = 0.0;
        if (std::fabs(r(k, k)) < threshold) throw RankDeficientError(k, std::fabs(r(k, k)));
        if (r(k, k) < 0.0) {
            for (std::size_t j = k; j < n; ++j) r(k, j) = -r(k, j);
            for (std::size_t i = 0; i < n; ++i) q(i, k) = -q(i, k);
        }
    }
    return {std::move(q), std::move(r)};
}

double condition_estimate(const QrFactors& f) {
    double lo = INFINITY, hi = 0.0;
    for (std::size_t k = 0; k < f.r.rows(); ++k) {
        lo = std::min(lo, std::fabs(f.r(k, k)));
        hi = std::max(hi, std::fabs(f.r(k, k)));
    }
    return hi / lo;
}

Matrix cholesky(const Matrix& a) {
    require_square(a, "cholesky");
    const std::size_t n = a.rows();
    Matrix l(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        double d = a(j, j);
        for (std::size_t p = 0; p < j; ++p) d -= l(j, p) * l(j, p);
        if (!(d > 0.0) || !std::isfinite(d)) {
            throw NotPositiveDefiniteError("cholesky: matrix not positive definite at pivot " +
                                           std::to_string(j) + "; try a larger damp");
        }
        const double ljj = std::sqrt(d);
        l(j, j) = ljj;
        for (std::size_t i = j + 1; i < n; ++i) {
            double s = a(i, j);
            for (std::size_t p = 0; p < j; ++p) s -= l(i, p) * l(j, p);
            l(i, j) = s / ljj;
        }
    }
    return l;
}

Matrix solve_lower(const Matrix& l, const Matrix& b) {
    require_square(l, "solve_lower");
    if (l.rows() != b.rows()) throw ShapeError("solve_lower: " + l.shape_string() + " vs rhs " + b.shape_string());
    const std::size_t n = l.rows();
    Matrix x = b;
    for (std::size_t c = 0; c < b.cols(); ++c) {
        for (std::size_t i = 0; i < n; ++i) {
            double s = x(i, c);
            for (std::size_t p = 0; p < i; ++p) s -= l(i, p) * x(p, c);
            x(i, c) = s / l(i, i);
        }
    }
    return x;
}

Matrix solve_upper(const Matrix& u, const Matrix& b) {
    require_square(u, "solve_upper");
    if (u.rows() != b.rows()) throw ShapeError("solve_upper: " + u.shape_string() + " vs rhs " + b.shape_string());
    const std::size_t n = u.rows();
    Matrix x = b;
    for (std::size_t c = 0; c < b.cols(); ++c) {
        for (std::size_t ii = n; ii-- > 0;) {
            double s = x(ii, c);
            for (std::size_t p = ii + 1; p < n; ++p) s -= u(ii, p) * x(p, c);
            x(ii, c) = s / u(ii, ii);
        }
    }
    return x;
}

double dampening(const Matrix& h, double damp) {
    require_square(h, "dampening");
    if (h.rows() == 0) return 0.0;
    return damp * (trace(h) / static_cast<double>(h.rows()));
}

void require_symmetric(const Matrix& h, double tol, const char* what) {
    require_square(h, what);
    const double scale = std::max(1.0, max_abs(h));
    for (std::size_t i = 0; i < h.rows(); ++i)
        for (std::size_t j = i + 1; j < h.cols(); ++j)
            if (std::fabs(h(i, j) - h(j, i)) > tol * scale) {
                throw InvalidArgument(std::string(what) + ": matrix not symmetric at (" + std::to_string(i) +
                                      ", " + std::to_string(j) + ")");
            }
}

Matrix cholesky_inverse(const Matrix& h, double damp) {
    require_symmetric(h, 1e-10, "cholesky_inverse");
    if (damp < 0.0) throw InvalidArgument("cholesky_inverse: damp must be >= 0");
    const std::size_t n = h.rows();
    Matrix hd = h;
    const double lambda = dampening(h, damp);
    for (std::size_t i = 0; i < n; ++i) hd(i, i) += lambda;

    const Matrix l = cholesky(hd);
    const Matrix linv = solve_lower(l, Matrix::identity(n));
    Matrix inv = matmul_tn(linv, linv);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            const double s = 0.5 * (inv(i, j) + inv(j, i));
            inv(i, j) = s;
            inv(j, i) = s;
        }
    require_finite(inv, "cholesky_inverse");
    return inv;
}

}  // namespace rotaprune
