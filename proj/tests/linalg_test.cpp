#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "rotaprune/linalg.hpp"
#include "test_util.hpp"

using namespace rotaprune;
using rotaprune::testing::naive_matmul;
using rotaprune::testing::random_spd;

TEST(Matrix, RejectsNonFiniteData) {
    EXPECT_THROW(Matrix(1, 2, std::vector<double>{1.0, std::nan("")}), NumericalError);
    EXPECT_THROW(Matrix(1, 1, std::vector<double>{std::numeric_limits<double>::infinity()}), NumericalError);
    EXPECT_THROW(Matrix(2, 2, std::vector<double>{1.0}), ShapeError);
}

TEST(Matmul, SmallExamples) {
    const Matrix a = Matrix::from_rows({{1, 2}, {3, 4}});
    EXPECT_EQ(matmul(Matrix::identity(2), a), a);
    EXPECT_EQ(matmul(Matrix::from_rows({{1, 2}}), Matrix::from_rows({{3}, {4}})), Matrix::from_rows({{11}}));
}

TEST(Matmul, MatchesNaiveLoopExactly) {
    std::mt19937_64 rng(7);
    const Matrix a = Matrix::gaussian(8, 8, rng);
    const Matrix b = Matrix::gaussian(8, 8, rng);
    EXPECT_EQ(matmul(a, b), naive_matmul(a, b));
    EXPECT_EQ(matmul_tn(a, b), naive_matmul(transpose(a), b));
    EXPECT_EQ(matmul_nt(a, b), naive_matmul(a, transpose(b)));
}

TEST(Matmul, ShapeErrorNamesBothShapes) {
    try {
        matmul(Matrix(2, 3), Matrix(2, 3));
        FAIL();
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("2x3"), std::string::npos) << msg;
    }
}

TEST(Matmul, AssociativeWithinRoundoff) {
    std::mt19937_64 rng(11);
    for (std::size_t n : {4u, 17u, 64u}) {
        const Matrix a = Matrix::gaussian(n, n, rng), b = Matrix::gaussian(n, n, rng), c = Matrix::gaussian(n, n, rng);
        EXPECT_LE(relative_error(matmul(matmul(a, b), c), matmul(a, matmul(b, c))), 1e-12) << n;
    }
}

TEST(Qr, Examples) {
    auto f = qr_decompose(Matrix::identity(4));
    EXPECT_EQ(f.q, Matrix::identity(4));
    EXPECT_EQ(f.r, Matrix::identity(4));

    const Matrix p = Matrix::from_rows({{0, 1}, {1, 0}});
    f = qr_decompose(p);
    EXPECT_LE(max_abs_diff(f.q, p), 1e-15);
    EXPECT_LE(max_abs_diff(f.r, Matrix::identity(2)), 1e-15);

    f = qr_decompose(Matrix::identity(3) * 2.0);
    EXPECT_EQ(f.q, Matrix::identity(3));
    EXPECT_EQ(f.r, Matrix::identity(3) * 2.0);
}

TEST(Qr, RoundTripOrthogonalityAndSign) {
    std::mt19937_64 rng(3);
    for (std::size_t n : {1u, 2u, 5u, 16u, 64u, 128u}) {
        const Matrix a = Matrix::gaussian(n, n, rng);
        const QrFactors f = qr_decompose(a);
        EXPECT_LE(relative_error(matmul(f.q, f.r), a), 1e-10) << n;
        EXPECT_LE(orthogonality_error(f.q), 1e-10) << n;
        for (std::size_t i = 0; i < n; ++i) {
            EXPECT_GT(f.r(i, i), 0.0);
            for (std::size_t j = 0; j < i; ++j) EXPECT_EQ(f.r(i, j), 0.0);
        }
        const QrFactors g = qr_decompose(a);
        EXPECT_EQ(f.q, g.q);
        EXPECT_EQ(f.r, g.r);
    }
}

TEST(Qr, RankDeficientNamesColumn) {
    const Matrix a = Matrix::from_rows({{1, 2, 0}, {2, 4, 1}, {3, 6, 5}});
    try {
        qr_decompose(a);
        FAIL();
    } catch (const RankDeficientError& e) {
        EXPECT_EQ(e.column(), 1u);
    }
    EXPECT_THROW(qr_decompose(Matrix(2, 3, 1.0)), ShapeError);
}

TEST(CholeskyInverse, Examples) {
    EXPECT_LE(max_abs_diff(cholesky_inverse(Matrix::identity(3), 0.0), Matrix::identity(3)), 1e-15);
    EXPECT_EQ(cholesky_inverse(Matrix::from_rows({{4}}), 0.0), Matrix::from_rows({{0.25}}));
}

TEST(CholeskyInverse, MultiplyBack) {
    std::mt19937_64 rng(5);
    const Matrix h = random_spd(6, rng);
    const double lambda = 0.01 * trace(h) / 6.0;
    EXPECT_DOUBLE_EQ(dampening(h, 0.01), lambda);
    Matrix hd = h;
    for (std::size_t i = 0; i < 6; ++i) hd(i, i) += lambda;
    const Matrix inv = cholesky_inverse(h, 0.01);
    EXPECT_EQ(inv, transpose(inv));
    EXPECT_LE(relative_error(matmul(hd, inv), Matrix::identity(6)), 1e-8);
}

TEST(CholeskyInverse, Errors) {
    EXPECT_THROW(cholesky_inverse(Matrix::from_rows({{1, 2}, {0, 1}}), 0.0), InvalidArgument);
    try {
        cholesky_inverse(Matrix::from_rows({{1, 2}, {2, 1}}), 0.0);
        FAIL();
    } catch (const NotPositiveDefiniteError& e) {
        EXPECT_NE(std::string(e.what()).find("damp"), std::string::npos);
    }
}

TEST(TriangularSolve, InvertsProducts) {
    std::mt19937_64 rng(9);
    const Matrix l = cholesky(random_spd(5, rng));
    const Matrix b = Matrix::gaussian(5, 3, rng);
    EXPECT_LE(relative_error(matmul(l, solve_lower(l, b)), b), 1e-12);
    const Matrix u = transpose(l);
    EXPECT_LE(relative_error(matmul(u, solve_upper(u, b)), b), 1e-12);
}
