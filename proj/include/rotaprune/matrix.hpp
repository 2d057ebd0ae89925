#pragma once

#include <cstddef>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "rotaprune/error.hpp"

namespace rotaprune {

/// Dense row-major matrix of doubles.
///
/// Constructors that take external data reject NaN/Inf; element access is
/// unchecked so hot loops stay tight. Use `require_finite` at API boundaries
/// where values come back from arithmetic that could overflow.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    static Matrix identity(std::size_t n);
    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
    static Matrix row_vector(std::span<const double> values);
    static Matrix column_vector(std::span<const double> values);
    static Matrix diagonal(std::span<const double> values);
    /// i.i.d. N(0, stddev^2) entries drawn in row-major order.
    static Matrix gaussian(std::size_t rows, std::size_t cols, std::mt19937_64& rng,
                           double stddev = 1.0);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }
    bool is_square() const { return rows_ == cols_; }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }
    std::vector<double>& storage() { return data_; }
    const std::vector<double>& storage() const { return data_; }

    std::string shape_string() const;

    Matrix& operator+=(const Matrix& other);
    Matrix& operator-=(const Matrix& other);
    Matrix& operator*=(double s);

    friend bool operator==(const Matrix& a, const Matrix& b) {
        return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

Matrix operator+(Matrix a, const Matrix& b);
Matrix operator-(Matrix a, const Matrix& b);
Matrix operator*(Matrix a, double s);
Matrix operator*(double s, Matrix a);

std::string shape_string(std::size_t rows, std::size_t cols);

/// Throws ShapeError unless the two shapes are identical.
void require_same_shape(const Matrix& a, const Matrix& b, const char* what);
void require_square(const Matrix& a, const char* what);
/// Throws NumericalError naming `what` and the first offending index.
void require_finite(const Matrix& a, const char* what);

Matrix transpose(const Matrix& a);
Matrix hadamard(const Matrix& a, const Matrix& b);
Matrix abs(const Matrix& a);
Matrix square(const Matrix& a);

/// Compensated sum of the values taken in ascending order, so the result depends only on
/// the multiset of values and not on their arrangement.
double ordered_sum(std::vector<double> values);
/// ordered_sum over all entries.
double sum(const Matrix& a);
double trace(const Matrix& a);
double frobenius_norm(const Matrix& a);
double max_abs(const Matrix& a);
double max_abs_diff(const Matrix& a, const Matrix& b);
/// ||a - b||_F / max(||b||_F, tiny)
double relative_error(const Matrix& a, const Matrix& b);

std::vector<double> diagonal_of(const Matrix& a);
/// max_ij |(q^T q - I)_ij|
double orthogonality_error(const Matrix& q);

}  // namespace rotaprune
