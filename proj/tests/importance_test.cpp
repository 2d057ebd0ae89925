#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "rotaprune/entropy.hpp"
#include "rotaprune/importance.hpp"
#include "test_util.hpp"

using namespace rotaprune;
using rotaprune::testing::random_orthogonal;
using rotaprune::testing::random_spd;

TEST(Hessian, Examples) {
    CalibStats s(2);
    accumulate_hessian(s, Matrix::identity(2));
    EXPECT_EQ(s.h, Matrix::identity(2));
    EXPECT_EQ(s.samples, 2u);

    CalibStats one(1);
    accumulate_hessian(one, Matrix::from_rows({{1, 2}}));
    EXPECT_EQ(one.h, Matrix::from_rows({{5}}));
}

TEST(Hessian, SplitBatchesMatchConcatenation) {
    std::mt19937_64 rng(1);
    const Matrix x = Matrix::gaussian(5, 12, rng);
    CalibStats whole(5), split(5), rows(5);
    accumulate_hessian(whole, x);
    Matrix a(5, 7), b(5, 5);
    for (std::size_t i = 0; i < 5; ++i) {
        for (std::size_t j = 0; j < 7; ++j) a(i, j) = x(i, j);
        for (std::size_t j = 0; j < 5; ++j) b(i, j) = x(i, 7 + j);
    }
    accumulate_hessian(split, a);
    accumulate_hessian(split, b);
    accumulate_hessian_rows(rows, transpose(x));
    EXPECT_EQ(whole.h, split.h);
    EXPECT_EQ(whole.h, rows.h);
    EXPECT_EQ(split.samples, 12u);
}

TEST(Hessian, Errors) {
    CalibStats s(3);
    EXPECT_THROW(accumulate_hessian(s, Matrix(2, 4)), ShapeError);
    s.seal();
    EXPECT_THROW(accumulate_hessian(s, Matrix(3, 4)), StateError);
}

TEST(Scores, Magnitude) {
    EXPECT_EQ(score_magnitude(Matrix::from_rows({{-3, 2}})).scores, Matrix::from_rows({{3, 2}}));
    EXPECT_EQ(score_magnitude(Matrix(2, 2)).scores, Matrix(2, 2));
    std::mt19937_64 rng(2);
    const Matrix w = Matrix::gaussian(4, 4, rng);
    EXPECT_EQ(score_magnitude(w).scores, score_magnitude(w * -1.0).scores);
}

TEST(Scores, Obd) {
    const Matrix h = Matrix::diagonal(std::vector<double>{4, 1});
    EXPECT_EQ(score_obd(Matrix::from_rows({{1, 2}}), h).scores, Matrix::from_rows({{4, 4}}));
    std::mt19937_64 rng(3);
    const Matrix w = Matrix::gaussian(3, 5, rng);
    EXPECT_EQ(score_obd(w, Matrix::identity(5)).scores, square(w));
    const Matrix hr = random_spd(5, rng);
    double oracle = 0.0;
    const Matrix wtw = matmul_tn(w, w);
    for (std::size_t j = 0; j < 5; ++j) oracle += wtw(j, j) * hr(j, j);
    EXPECT_NEAR(sum(score_obd(w, hr).scores), oracle, 1e-12 * oracle);
    EXPECT_THROW(score_obd(w, Matrix::identity(4)), ShapeError);
}

TEST(Scores, Wanda) {
    const Matrix h = Matrix::diagonal(std::vector<double>{4, 25});
    EXPECT_EQ(score_wanda(Matrix::from_rows({{3, -1}}), h).scores, Matrix::from_rows({{6, 5}}));
    std::mt19937_64 rng(4);
    const Matrix w = Matrix::gaussian(3, 4, rng);
    EXPECT_EQ(score_wanda(w, Matrix::identity(4)).scores, abs(w));
    const Matrix hr = random_spd(4, rng);
    EXPECT_LE(relative_error(square(score_wanda(w, hr).scores), score_obd(w, hr).scores), 1e-14);
    Matrix bad = Matrix::identity(2);
    bad(1, 1) = -1.0;
    EXPECT_THROW(score_wanda(Matrix(1, 2, 1.0), bad), InvalidArgument);
}

TEST(Scores, SparseGpt) {
    EXPECT_EQ(score_sparsegpt(Matrix::from_rows({{2}}), Matrix::from_rows({{0.5}})).scores, Matrix::from_rows({{8}}));
    std::mt19937_64 rng(5);
    const Matrix w = Matrix::gaussian(3, 4, rng);
    EXPECT_EQ(score_sparsegpt(w, Matrix::identity(4)).scores, square(w));
    EXPECT_THROW(score_sparsegpt(w, Matrix(4, 4)), InvalidArgument);

    // Independent inverse through Gauss-Jordan elimination.
    const Matrix h = random_spd(4, rng);
    const double lambda = 0.01 * trace(h) / 4.0;
    Matrix aug(4, 8);
    for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t j = 0; j < 4; ++j) aug(i, j) = h(i, j) + (i == j ? lambda : 0.0);
        aug(i, 4 + i) = 1.0;
    }
    for (std::size_t c = 0; c < 4; ++c) {
        const double p = aug(c, c);
        for (std::size_t j = 0; j < 8; ++j) aug(c, j) /= p;
        for (std::size_t r = 0; r < 4; ++r) {
            if (r == c) continue;
            const double f = aug(r, c);
            for (std::size_t j = 0; j < 8; ++j) aug(r, j) -= f * aug(c, j);
        }
    }
    Matrix expected(3, 4);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 4; ++j) expected(i, j) = w(i, j) * w(i, j) / aug(j, 4 + j);
    const Matrix got = score_rotated(w, h, RotationCase::RightOnly, Matrix::identity(4), {}, Metric::SparseGpt).scores;
    EXPECT_LE(relative_error(got, expected), 1e-10);
}

namespace {

struct CaseShapes {
    RotationCase c;
    std::size_t rows, cols, r1, r2;
};

// d = 6 hidden, 4 value features.
const std::vector<CaseShapes> kCases = {
    {RotationCase::RightOnly, 5, 6, 6, 4},
    {RotationCase::LeftOnly, 6, 5, 6, 4},
    {RotationCase::TwoSidedV, 4, 6, 6, 4},
    {RotationCase::TwoSidedO, 6, 4, 6, 4},
};

}  // namespace

TEST(Rotated, IdentityMatchesUnrotated) {
    std::mt19937_64 rng(6);
    for (const auto& cs : kCases) {
        const Matrix w = Matrix::gaussian(cs.rows, cs.cols, rng);
        const Matrix h = random_spd(cs.cols, rng);
        const Matrix i1 = Matrix::identity(cs.r1), i2 = Matrix::identity(cs.r2);
        EXPECT_EQ(score_rotated(w, h, cs.c, i1, i2, Metric::Obd).scores, score_obd(w, h).scores);
        EXPECT_EQ(score_rotated(w, h, cs.c, i1, i2, Metric::Magnitude).scores, square(score_magnitude(w).scores));
        EXPECT_EQ(score_rotated(w, h, cs.c, i1, i2, Metric::SparseGpt).scores,
                  score_sparsegpt(w, cholesky_inverse(h, 0.01)).scores);
        EXPECT_LE(relative_error(score_rotated(w, h, cs.c, i1, i2, Metric::Wanda).scores,
                                 square(score_wanda(w, h).scores)),
                  1e-14);
        EXPECT_EQ(score_rotated(w, h, cs.c, i1, i2, Metric::Obd).layout, layout_for(cs.c));
    }
}

TEST(Rotated, QuadraticFormInvariant) {
    std::mt19937_64 rng(7);
    for (const auto& cs : kCases) {
        const Matrix w = Matrix::gaussian(cs.rows, cs.cols, rng);
        const Matrix h = random_spd(cs.cols, rng);
        const Matrix r1 = random_orthogonal(cs.r1, rng), r2 = random_orthogonal(cs.r2, rng);
        const RotatedLinear rl = rotate_linear(w, h, cs.c, r1, r2);
        const double before = quadratic_form_trace(w, h);
        EXPECT_LE(std::fabs(quadratic_form_trace(rl.w, rl.h) - before) / before, 1e-9);
    }
}

TEST(Rotated, LeftOnlyColumnSumsInvariant) {
    std::mt19937_64 rng(8);
    const Matrix w = Matrix::gaussian(6, 5, rng);
    const Matrix h = random_spd(5, rng);
    const Matrix r1 = random_orthogonal(6, rng);
    const Matrix before = score_obd(w, h).scores;
    const Matrix after = score_rotated(w, h, RotationCase::LeftOnly, r1, {}, Metric::Obd).scores;
    for (std::size_t j = 0; j < 5; ++j) {
        double a = 0.0, b = 0.0;
        for (std::size_t i = 0; i < 6; ++i) {
            a += after(i, j);
            b += before(i, j);
        }
        EXPECT_LE(std::fabs(a - b) / b, 1e-10);
    }
}

TEST(Rotated, PermutationPreservesScoreMultiset) {
    std::mt19937_64 rng(9);
    const Matrix w = Matrix::gaussian(4, 5, rng);
    const Matrix h = random_spd(5, rng);
    Matrix p(5, 5);
    const std::size_t perm[] = {3, 0, 4, 1, 2};
    for (std::size_t i = 0; i < 5; ++i) p(i, perm[i]) = 1.0;
    auto sorted = [](Matrix m) {
        std::sort(m.storage().begin(), m.storage().end());
        return m.storage();
    };
    EXPECT_EQ(sorted(score_rotated(w, h, RotationCase::RightOnly, p, {}, Metric::Obd).scores),
              sorted(score_obd(w, h).scores));
}

TEST(Rotated, RightOnlyTotalDriftBounded) {
    std::mt19937_64 rng(10);
    for (int trial = 0; trial < 10; ++trial) {
        const Matrix w = Matrix::gaussian(16, 16, rng);
        const Matrix h = random_spd(16, rng, 64);
        const Matrix r1 = random_orthogonal(16, rng);
        const double before = sum(score_obd(w, h).scores);
        const double after = sum(score_rotated(w, h, RotationCase::RightOnly, r1, {}, Metric::Obd).scores);
        EXPECT_LE(std::fabs(after - before) / before, 0.15) << trial;
    }
}

TEST(Rotated, RejectsNonOrthogonal) {
    Matrix r = Matrix::identity(3);
    r(0, 1) = 1e-6;
    EXPECT_THROW(score_rotated(Matrix(2, 3, 1.0), Matrix::identity(3), RotationCase::RightOnly, r, {}, Metric::Obd),
                 InvalidArgument);
}

TEST(Entropy, Examples) {
    EXPECT_NEAR(entropy_of({1, 1, 1, 1}, 0.0), std::log(4.0), 1e-12);
    EXPECT_EQ(entropy_of({7, 0, 0}, 0.0), 0.0);
    EXPECT_NEAR(entropy_of({2, 2, 0, 0}, 0.0), std::log(2.0), 1e-12);
    EXPECT_NEAR(entropy_of({0, 0, 0}, 1e-12), std::log(3.0), 1e-12);
    EXPECT_THROW(entropy_of({1, -1}, 0.0), InvalidArgument);
    EXPECT_THROW(entropy_of({0, 0}, 0.0), InvalidArgument);
}

TEST(Entropy, UniformGroupsAreExactLog) {
    for (std::size_t n = 1; n <= 64; ++n)
        EXPECT_NEAR(entropy_of(std::vector<double>(n, 0.37), 0.0), std::log(static_cast<double>(n)), 1e-12) << n;
}

TEST(Entropy, PermutationInvariantBitExact) {
    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 20; ++trial) {
        const Matrix g = Matrix::gaussian(1, 9, rng);
        std::vector<double> s(g.storage());
        for (double& x : s) x = x * x;
        if (trial % 2 == 0) s[3] = 0.0;
        const double h = entropy_of(s, 0.0);
        for (int k = 0; k < 10; ++k) {
            std::shuffle(s.begin(), s.end(), rng);
            ASSERT_EQ(entropy_of(s, 0.0), h);
        }
    }
}

TEST(Entropy, LayoutsAndBounds) {
    std::mt19937_64 rng(11);
    const Matrix s = square(Matrix::gaussian(3, 5, rng));
    const GroupEntropy rows = group_entropy(s, GroupLayout::Rows, 0.0);
    const GroupEntropy cols = group_entropy(s, GroupLayout::Columns, 0.0);
    const GroupEntropy both = group_entropy(s, GroupLayout::RowsAndColumns, 0.0);
    EXPECT_EQ(rows.rows.size(), 3u);
    EXPECT_TRUE(rows.columns.empty());
    EXPECT_EQ(cols.columns.size(), 5u);
    EXPECT_EQ(both.total, rows.total + cols.total);
    for (double h : rows.rows) EXPECT_LE(h, std::log(5.0));
    for (double h : cols.columns) EXPECT_LE(h, std::log(3.0));
    EXPECT_DOUBLE_EQ(max_group_entropy(3, 5, GroupLayout::RowsAndColumns), 3 * std::log(5.0) + 5 * std::log(3.0));
    EXPECT_EQ(normalization_groups(0, 3, 5, GroupLayout::RowsAndColumns).size(), 8u);
}
