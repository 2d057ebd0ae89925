#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <tuple>

#include "rotaprune/importance.hpp"
#include "rotaprune/pruner.hpp"
#include "test_util.hpp"

using namespace rotaprune;
using rotaprune::testing::random_orthogonal;
using rotaprune::testing::random_spd;

namespace {

Matrix random_scores(std::size_t rows, std::size_t cols, std::mt19937_64& rng, bool with_ties) {
    Matrix s(rows, cols);
    std::uniform_int_distribution<int> small(0, 4);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (double& v : s.data()) v = with_ties ? small(rng) : u(rng);
    return s;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

TEST(Pattern, ParseAndPrint) {
    const auto u = SparsityPattern::parse("unstructured:0.5");
    EXPECT_EQ(u.kind, SparsityPattern::Kind::Unstructured);
    EXPECT_EQ(u.ratio, 0.5);
    EXPECT_EQ(SparsityPattern::parse(u.to_string()).ratio, 0.5);
    const auto nm = SparsityPattern::parse("4:8");
    EXPECT_EQ(nm.kind, SparsityPattern::Kind::NofM);
    EXPECT_EQ(nm.n, 4u);
    EXPECT_EQ(nm.m, 8u);
    EXPECT_EQ(nm.to_string(), "4:8");
    EXPECT_THROW(SparsityPattern::parse("4:4"), InvalidArgument);
    EXPECT_THROW(SparsityPattern::parse("unstructured:1.5"), InvalidArgument);
    EXPECT_THROW(SparsityPattern::parse("half"), InvalidArgument);
    EXPECT_THROW(SparsityPattern::parse("2:4x"), InvalidArgument);
    EXPECT_EQ(parse_compare_group("per-layer"), CompareGroup::PerLayer);
    EXPECT_THROW(parse_compare_group("per-col"), InvalidArgument);
}

TEST(MaskUnstructured, Examples) {
    const PruneMask m = mask_unstructured(Matrix::from_rows({{1, 4, 2, 3}}), 0.5);
    EXPECT_EQ(m.keep, (std::vector<std::uint8_t>{0, 1, 0, 1}));

    std::mt19937_64 rng(3);
    const Matrix s = random_scores(5, 7, rng, false);
    EXPECT_EQ(mask_unstructured(s, 0.0).kept_count(), 35u);
    EXPECT_EQ(mask_unstructured(s, 1.0).kept_count(), 0u);
    EXPECT_EQ(mask_unstructured(s, 1.0, CompareGroup::PerLayer).kept_count(), 0u);
    EXPECT_EQ(pruned_count(10, 0.3), 3u);
}

TEST(MaskUnstructured, TiesPruneLowerColumnThenRow) {
    const PruneMask row = mask_unstructured(Matrix::from_rows({{2, 2, 2, 2}}), 0.5);
    EXPECT_EQ(row.keep, (std::vector<std::uint8_t>{0, 0, 1, 1}));
    // Per layer: column decides before row.
    const PruneMask layer =
        mask_unstructured(Matrix::from_rows({{1, 1}, {1, 1}}), 0.25, CompareGroup::PerLayer);
    EXPECT_EQ(layer.keep, (std::vector<std::uint8_t>{0, 1, 1, 1}));
    const PruneMask layer2 =
        mask_unstructured(Matrix::from_rows({{1, 1}, {1, 1}}), 0.5, CompareGroup::PerLayer);
    EXPECT_EQ(layer2.keep, (std::vector<std::uint8_t>{0, 1, 0, 1}));
}

TEST(MaskUnstructured, PerRowKeepsExactCounts) {
    std::mt19937_64 rng(5);
    for (double ratio : {0.1, 0.25, 0.5, 0.7, 0.99}) {
        const Matrix s = random_scores(6, 13, rng, true);
        const PruneMask m = mask_unstructured(s, ratio);
        const std::size_t want = static_cast<std::size_t>(std::ceil(13 * (1.0 - ratio) - 1e-9));
        for (std::size_t i = 0; i < 6; ++i) {
            std::size_t kept = 0;
            double max_pruned = -1, min_kept = 1e300;
            for (std::size_t j = 0; j < 13; ++j) {
                kept += m.kept(i, j);
                (m.kept(i, j) ? min_kept : max_pruned) =
                    m.kept(i, j) ? std::min(min_kept, s(i, j)) : std::max(max_pruned, s(i, j));
            }
            EXPECT_EQ(kept, want);
            EXPECT_LE(max_pruned, min_kept);
        }
        EXPECT_NO_THROW(validate_mask(m));
    }
}

TEST(MaskUnstructured, PerLayerMatchesSortOracle) {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        const Matrix s = random_scores(6, 8, rng, trial % 2 == 0);
        const PruneMask m = mask_unstructured(s, 0.5, CompareGroup::PerLayer);
        std::vector<std::tuple<double, std::size_t, std::size_t>> order;
        for (std::size_t i = 0; i < 6; ++i)
            for (std::size_t j = 0; j < 8; ++j) order.emplace_back(s(i, j), j, i);
        std::sort(order.begin(), order.end());
        std::vector<std::uint8_t> expect(48, 1);
        for (std::size_t k = 0; k < 24; ++k) expect[std::get<2>(order[k]) * 8 + std::get<1>(order[k])] = 0;
        EXPECT_EQ(m.keep, expect) << "trial " << trial;
    }
}

TEST(MaskNm, Examples) {
    EXPECT_EQ(mask_nm(Matrix::from_rows({{0.1, 5, 3, 0.2}}), 2, 4).keep, (std::vector<std::uint8_t>{0, 1, 1, 0}));
    EXPECT_EQ(mask_nm(Matrix::from_rows({{1, 1, 1, 1, 1, 1, 1, 1}}), 2, 4).keep,
              (std::vector<std::uint8_t>{0, 0, 1, 1, 0, 0, 1, 1}));
    EXPECT_THROW(mask_nm(Matrix(2, 6), 2, 4), InvalidArgument);
}

TEST(MaskNm, EveryGroupHoldsExactlyN) {
    std::mt19937_64 rng(9);
    for (auto [n, m] : {std::pair<std::size_t, std::size_t>{2, 4}, {4, 8}, {1, 4}}) {
        const Matrix s = random_scores(4, 16, rng, n == 1);
        const PruneMask mask = mask_nm(s, n, m);
        for (std::size_t i = 0; i < 4; ++i)
            for (std::size_t g = 0; g < 16; g += m) {
                std::size_t kept = 0;
                for (std::size_t k = 0; k < m; ++k) kept += mask.kept(i, g + k);
                EXPECT_EQ(kept, n);
            }
        EXPECT_EQ(mask.kept_count(), 4 * 16 * n / m);
        EXPECT_NO_THROW(validate_mask(mask));
    }
}

TEST(MaskValidate, RejectsBrokenMasks) {
    PruneMask m = mask_nm(Matrix::from_rows({{1, 2, 3, 4}}), 2, 4);
    m.keep = {1, 1, 1, 0};
    EXPECT_THROW(validate_mask(m), InvalidArgument);
    PruneMask u = mask_unstructured(Matrix::from_rows({{1, 2, 3, 4}}), 0.5);
    u.keep = {1, 1, 1, 0};
    EXPECT_THROW(validate_mask(u), InvalidArgument);
}

TEST(MaskDeterminism, BitIdentical) {
    std::mt19937_64 rng(11);
    const Matrix s = random_scores(8, 16, rng, true);
    EXPECT_EQ(mask_unstructured(s, 0.5).keep, mask_unstructured(s, 0.5).keep);
    EXPECT_EQ(mask_nm(s, 2, 4).keep, mask_nm(s, 2, 4).keep);
}

TEST(PruneSimple, FullKeepAndFullPrune) {
    std::mt19937_64 rng(13);
    const Matrix w = Matrix::gaussian(3, 5, rng);
    EXPECT_EQ(prune_simple(w, PruneMask::all(3, 5, true)), w);
    EXPECT_EQ(prune_simple(w, PruneMask::all(3, 5, false)), Matrix(3, 5));
    EXPECT_THROW(prune_simple(w, PruneMask::all(5, 3, true)), ShapeError);
}

TEST(PruneSimple, DiagonalHessianDeviationIsPrunedObdSum) {
    std::mt19937_64 rng(15);
    const std::size_t d = 6, samples = 10;
    // X with orthogonal rows of varying length: H = X X^T is diagonal.
    const Matrix u = random_orthogonal(samples, rng);
    Matrix x(d, samples);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t k = 0; k < samples; ++k) x(i, k) = (1.0 + 0.5 * i) * u(i, k);
    const Matrix h = matmul_nt(x, x);
    const Matrix w = Matrix::gaussian(4, d, rng);
    const Matrix s = score_obd(w, h).scores;
    const PruneMask mask = mask_unstructured(s, 0.5);
    const Matrix w_hat = prune_simple(w, mask);
    const double brute = std::pow(frobenius_norm(matmul(w, x) - matmul(w_hat, x)), 2);
    EXPECT_NEAR(brute, pruned_score_sum(s, mask), 1e-12 * brute);
    EXPECT_NEAR(output_deviation(w, w_hat, h), brute, 1e-12 * brute);
}

TEST(OutputDeviation, Examples) {
    std::mt19937_64 rng(17);
    const Matrix w = Matrix::gaussian(3, 4, rng), w_hat = Matrix::gaussian(3, 4, rng);
    const Matrix h = random_spd(4, rng);
    EXPECT_EQ(output_deviation(w, w, h), 0.0);
    EXPECT_NEAR(output_deviation(w, w_hat, Matrix::identity(4)), std::pow(frobenius_norm(w - w_hat), 2), 1e-12);
    // Any X with X X^T = H, here its Cholesky factor.
    const Matrix x = cholesky(h);
    const double oracle = std::pow(frobenius_norm(matmul(w - w_hat, x)), 2);
    EXPECT_NEAR(output_deviation(w, w_hat, h), oracle, 1e-10 * oracle);
    Matrix bad = h;
    bad(0, 1) += 1e-6;
    EXPECT_THROW(output_deviation(w, w_hat, bad), InvalidArgument);
}

TEST(SparseGpt, IdentityHessianEqualsSimple) {
    std::mt19937_64 rng(19);
    const Matrix w = Matrix::gaussian(5, 8, rng);
    for (const auto& pattern : {SparsityPattern::unstructured(0.5), SparsityPattern::n_of_m(2, 4)}) {
        const auto res = prune_sparsegpt(w, Matrix::identity(8), pattern);
        EXPECT_EQ(res.w, prune_simple(w, res.mask));
        EXPECT_EQ(res.mask.keep, make_mask(score_magnitude(w).scores, pattern).keep);
        EXPECT_NO_THROW(validate_mask(res.mask));
    }
}

TEST(SparseGpt, TwoByTwoClosedForm) {
    std::mt19937_64 rng(21);
    for (int trial = 0; trial < 10; ++trial) {
        const Matrix h = random_spd(2, rng, 3);
        const Matrix w = Matrix::gaussian(1, 2, rng);
        PruneMask mask = PruneMask::all(1, 2, true);
        mask.keep[0] = 0;
        const Matrix got = prune_sparsegpt_with_mask(w, h, mask, 0.0);
        const double det = h(0, 0) * h(1, 1) - h(0, 1) * h(1, 0);
        const double inv00 = h(1, 1) / det, inv01 = -h(0, 1) / det;
        const double b = w(0, 1) - w(0, 0) * inv01 / inv00;
        EXPECT_EQ(got(0, 0), 0.0);
        EXPECT_NEAR(got(0, 1), b, 1e-10 * std::max(1.0, std::abs(b)));
        // Analytic deviation h00 a^2 - h01^2 a^2 / h11 never exceeds mask-only h00 a^2.
        const double a = w(0, 0);
        const double analytic = a * a * (h(0, 0) - h(0, 1) * h(0, 1) / h(1, 1));
        EXPECT_NEAR(output_deviation(w, got, h), analytic, 1e-10 * std::max(1.0, analytic));
        EXPECT_LE(output_deviation(w, got, h), output_deviation(w, prune_simple(w, mask), h));
    }
}

TEST(SparseGpt, SingleLeadingPruneIsExactReconstruction) {
    std::mt19937_64 rng(23);
    const std::size_t d = 5;
    const Matrix h = random_spd(d, rng);
    const Matrix w = Matrix::gaussian(1, d, rng);
    PruneMask mask = PruneMask::all(1, d, true);
    mask.keep[0] = 0;
    const Matrix got = prune_sparsegpt_with_mask(w, h, mask, 0.0);
    // Least squares over the kept columns: w_K + H_KK^-1 H_K0 w_0.
    Matrix hkk(d - 1, d - 1), hk0(d - 1, 1);
    for (std::size_t i = 1; i < d; ++i) {
        hk0(i - 1, 0) = h(i, 0);
        for (std::size_t j = 1; j < d; ++j) hkk(i - 1, j - 1) = h(i, j);
    }
    const Matrix shift = matmul(cholesky_inverse(hkk, 0.0), hk0);
    for (std::size_t k = 1; k < d; ++k) EXPECT_NEAR(got(0, k), w(0, k) + shift(k - 1, 0) * w(0, 0), 1e-10);
}

TEST(CompensateObs, FixedMaskNeverWorseThanMaskOnly) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        std::mt19937_64 rng(100 + seed);
        const Matrix w = Matrix::gaussian(8, 16, rng);
        const Matrix h = random_spd(16, rng, 24);
        for (const auto& pattern : {SparsityPattern::unstructured(0.5), SparsityPattern::n_of_m(2, 4)}) {
            const PruneMask mask = make_mask(score_obd(w, h).scores, pattern);
            const Matrix comp = compensate_obs(w, h, mask, 0.0);
            EXPECT_EQ(comp, prune_simple(comp, mask));
            EXPECT_LE(output_deviation(w, comp, h), output_deviation(w, prune_simple(w, mask), h))
                << "seed " << seed << " " << pattern.to_string();
            // No other fill of the kept entries does better: nudge each one.
            const double best = output_deviation(w, comp, h);
            for (std::size_t k = 0; k < 16; ++k) {
                if (!mask.kept(0, k)) continue;
                Matrix moved = comp;
                moved(0, k) += 1e-3;
                EXPECT_GE(output_deviation(w, moved, h), best);
            }
        }
    }
}

TEST(CompensateObs, MatchesSweepWhenPrunedColumnsLead) {
    std::mt19937_64 rng(31);
    const Matrix w = Matrix::gaussian(4, 10, rng);
    const Matrix h = random_spd(10, rng);
    PruneMask mask = PruneMask::all(4, 10, true);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) mask.keep[i * 10 + j] = 0;
    const Matrix a = compensate_obs(w, h, mask, 0.01), b = prune_sparsegpt_with_mask(w, h, mask, 0.01);
    EXPECT_LE(max_abs_diff(a, b), 1e-10 * max_abs(a));
}

TEST(CompensateObs, IdentityHessianEqualsSimple) {
    std::mt19937_64 rng(33);
    const Matrix w = Matrix::gaussian(3, 8, rng);
    const PruneMask mask = mask_nm(score_magnitude(w).scores, 2, 4);
    EXPECT_EQ(compensate_obs(w, Matrix::identity(8), mask), prune_simple(w, mask));
}

TEST(SparseGpt, MedianBeatsSimpleOnRandomLayers) {
    std::vector<double> comp, simple;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        std::mt19937_64 rng(200 + seed);
        const Matrix w = Matrix::gaussian(8, 8, rng);
        const Matrix h = random_spd(8, rng);
        const auto res = prune_sparsegpt(w, h, SparsityPattern::unstructured(0.5));
        EXPECT_NO_THROW(validate_mask(res.mask));
        comp.push_back(std::sqrt(output_deviation(w, res.w, h)));
        simple.push_back(std::sqrt(output_deviation(w, prune_simple(w, res.mask), h)));
    }
    EXPECT_LT(median(comp), median(simple));
}

TEST(SparseGpt, AdaptiveMasksSatisfyPatterns) {
    std::mt19937_64 rng(25);
    const Matrix w = Matrix::gaussian(6, 16, rng);
    const Matrix h = random_spd(16, rng);
    for (std::size_t block : {1u, 3u, 16u}) {
        for (const auto& pattern :
             {SparsityPattern::unstructured(0.5), SparsityPattern::unstructured(0.3), SparsityPattern::n_of_m(2, 4),
              SparsityPattern::n_of_m(4, 8)}) {
            for (auto group : {CompareGroup::PerRow, CompareGroup::PerLayer}) {
                const auto res = prune_sparsegpt(w, h, pattern, block, 0.01, group);
                EXPECT_NO_THROW(validate_mask(res.mask)) << pattern.to_string() << " block " << block;
                EXPECT_EQ(res.w, prune_simple(res.w, res.mask));
            }
        }
    }
}

TEST(SparseGpt, FullBlockUsesUpfrontMask) {
    std::mt19937_64 rng(27);
    const Matrix w = Matrix::gaussian(4, 8, rng);
    const Matrix h = random_spd(8, rng);
    const auto res = prune_sparsegpt(w, h, SparsityPattern::unstructured(0.5), 8, 0.0);
    const Matrix u = transpose(cholesky(cholesky_inverse(h, 0.0)));
    Matrix s(4, 8);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 8; ++j) s(i, j) = w(i, j) * w(i, j) / (u(j, j) * u(j, j));
    EXPECT_EQ(res.mask.keep, mask_unstructured(s, 0.5).keep);
    EXPECT_EQ(res.w, prune_sparsegpt_with_mask(w, h, res.mask, 0.0));
}

TEST(SparseGpt, Errors) {
    const Matrix w(2, 4);
    EXPECT_THROW(prune_sparsegpt(w, Matrix::identity(3), SparsityPattern::unstructured(0.5)), ShapeError);
    EXPECT_THROW(prune_sparsegpt(w, Matrix(4, 4), SparsityPattern::unstructured(0.5), 1, 0.0), NumericalError);
    EXPECT_THROW(prune_sparsegpt(Matrix(2, 6), Matrix::identity(6), SparsityPattern::n_of_m(2, 4)), InvalidArgument);
}

TEST(MaskIo, RoundTripAndLayout) {
    std::mt19937_64 rng(29);
    const PruneMask m = mask_unstructured(random_scores(3, 5, rng, false), 0.4);
    std::stringstream buf;
    write_mask(buf, m);
    const std::string bytes = buf.str();
    ASSERT_EQ(bytes.size(), 8u + 2u);
    EXPECT_EQ(static_cast<unsigned char>(bytes[0]), 3);
    EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 5);
    EXPECT_EQ(bytes[1] | bytes[2] | bytes[3], 0);
    const PruneMask back = read_mask(buf);
    EXPECT_EQ(back.rows, 3u);
    EXPECT_EQ(back.cols, 5u);
    EXPECT_EQ(back.keep, m.keep);
    std::stringstream cut(bytes.substr(0, 9));
    EXPECT_THROW(read_mask(cut), IoError);
}
