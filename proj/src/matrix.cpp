#include "rotaprune/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "rotaprune/linalg.hpp"

namespace rotaprune {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {
    if (!std::isfinite(fill)) throw NumericalError("matrix: non-finite fill value");
}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows * cols) {
        throw ShapeError("matrix: data length " + std::to_string(data_.size()) +
                         " does not match shape " + rotaprune::shape_string(rows, cols));
    }
    require_finite(*this, "matrix construction");
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) throw ShapeError("matrix: ragged row list");
        data.insert(data.end(), row.begin(), row.end());
    }
    return Matrix(r, c, std::move(data));
}

Matrix Matrix::row_vector(std::span<const double> values) {
    return Matrix(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

Matrix Matrix::column_vector(std::span<const double> values) {
    return Matrix(values.size(), 1, std::vector<double>(values.begin(), values.end()));
}

Matrix Matrix::diagonal(std::span<const double> values) {
    Matrix m(values.size(), values.size());
    for (std::size_t i = 0; i < values.size(); ++i) m(i, i) = values[i];
    require_finite(m, "diagonal");
    return m;
}

Matrix Matrix::gaussian(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    Matrix m(rows, cols);
    for (double& x : m.data_) x = dist(rng);
    return m;
}

std::string shape_string(std::size_t rows, std::size_t cols) {
    return "(" + std::to_string(rows) + "x" + std::to_string(cols) + ")";
}

std::string Matrix::shape_string() const { return rotaprune::shape_string(rows_, cols_); }

Matrix& Matrix::operator+=(const Matrix& other) {
    require_same_shape(*this, other, "operator+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
}

Matrix& Matrix::operator-=(const Matrix& other) {
    require_same_shape(*this, other, "operator-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
    return *this;
}

Matrix& Matrix::operator*=(double s) {
    for (double& x : data_) x *= s;
    return *this;
}

Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
Matrix operator*(Matrix a, double s) { return a *= s; }
Matrix operator*(double s, Matrix a) { return a *= s; }

void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError(std::string(what) + ": shape mismatch " + a.shape_string() + " vs " +
                         b.shape_string());
    }
}

void require_square(const Matrix& a, const char* what) {
    if (!a.is_square()) throw ShapeError(std::string(what) + ": expected square matrix, got " + a.shape_string());
}

void require_finite(const Matrix& a, const char* what) {
    const auto d = a.data();
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (!std::isfinite(d[i])) {
            throw NumericalError(std::string(what) + ": non-finite value at (" +
                                 std::to_string(i / std::max<std::size_t>(a.cols(), 1)) + ", " +
                                 std::to_string(i % std::max<std::size_t>(a.cols(), 1)) + ")");
        }
    }
}

Matrix transpose(const Matrix& a) {
    Matrix t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "hadamard");
    Matrix out = a;
    auto o = out.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bd[i];
    return out;
}

Matrix abs(const Matrix& a) {
    Matrix out = a;
    for (double& x : out.data()) x = std::fabs(x);
    return out;
}

Matrix square(const Matrix& a) {
    Matrix out = a;
    for (double& x : out.data()) x = x * x;
    return out;
}

double ordered_sum(std::vector<double> values) {
    std::sort(values.begin(), values.end());
    // Neumaier compensation keeps the error flat in the number of terms.
    double s = 0.0, c = 0.0;
    for (double x : values) {
        const double t = s + x;
        c += std::fabs(s) >= std::fabs(x) ? (s - t) + x : (x - t) + s;
        s = t;
    }
    return s + c;
}

double sum(const Matrix& a) { return ordered_sum(a.storage()); }

double trace(const Matrix& a) {
    require_square(a, "trace");
    double s = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i) s += a(i, i);
    return s;
}

double frobenius_norm(const Matrix& a) {
    double s = 0.0;
    for (double x : a.data()) s += x * x;
    return std::sqrt(s);
}

double max_abs(const Matrix& a) {
    double m = 0.0;
    for (double x : a.data()) m = std::max(m, std::fabs(x));
    return m;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    auto ad = a.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < ad.size(); ++i) m = std::max(m, std::fabs(ad[i] - bd[i]));
    return m;
}

double relative_error(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "relative_error");
    const double denom = std::max(frobenius_norm(b), std::numeric_limits<double>::min());
    return frobenius_norm(a - b) / denom;
}

std::vector<double> diagonal_of(const Matrix& a) {
    require_square(a, "diagonal_of");
    std::vector<double> d(a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) d[i] = a(i, i);
    return d;
}

double orthogonality_error(const Matrix& q) {
    require_square(q, "orthogonality_error");
    const Matrix g = matmul_tn(q, q);
    double m = 0.0;
    for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j)
            m = std::max(m, std::fabs(g(i, j) - (i == j ? 1.0 : 0.0)));
    return m;
}

}  // namespace rotaprune
