#include <gtest/gtest.h>

#include <sstream>

#include "meswitch/analytics.hpp"
#include "meswitch/svd.hpp"
#include "oracles.hpp"

using namespace meswitch;

TEST(CompressionRatio, ThreeExpertReferenceSizes) {
    EXPECT_NEAR(compression_ratio({13.48, 2.13, 3.42, 3}), 1.74, 0.005);
}

TEST(CompressionRatio, NineExpertReferenceSizes) {
    EXPECT_NEAR(compression_ratio({24.23, 3.60, 3.42, 9}), 3.63, 0.005);
}

TEST(CompressionRatio, SingleExpertNoSharing) {
    EXPECT_EQ(compression_ratio({7.0, 7.0, 0.0, 1}), 0.5);
}

TEST(CompressionRatio, ExactFormula) {
    // 4 * 10 / (10 + 4 * 2 + 1) = 40 / 19
    EXPECT_DOUBLE_EQ(compression_ratio({10.0, 2.0, 1.0, 4}), 40.0 / 19.0);
}

TEST(CompressionRatio, MonotoneInExpertCount) {
    const auto curve = ratio_curve({13.48, 2.13, 3.42, 1}, 1, 64);
    ASSERT_EQ(curve.size(), 64u);
    for (std::size_t i = 1; i < curve.size(); ++i) {
        EXPECT_GT(curve[i].ratio, curve[i - 1].ratio);
    }
    EXPECT_EQ(curve.front().m, 1u);
    EXPECT_EQ(curve.back().m, 64u);
}

TEST(CompressionRatio, LargeMLimit) {
    const double r = compression_ratio({24.23, 3.60, 3.42, 1000000});
    EXPECT_NEAR(r, 24.23 / 3.60, 1e-3 * (24.23 / 3.60));
}

TEST(CompressionRatio, InvalidSizes) {
    EXPECT_THROW(compression_ratio({0.0, 1.0, 0.0, 1}), Error);
    EXPECT_THROW(compression_ratio({1.0, -1.0, 0.0, 1}), Error);
    EXPECT_THROW(compression_ratio({1.0, 1.0, -1.0, 1}), Error);
    EXPECT_THROW(compression_ratio({1.0, 1.0, 0.0, 0}), Error);
    EXPECT_THROW(ratio_curve({1.0, 1.0, 0.0, 1}, 5, 2), Error);
}

TEST(CompressionRatio, CsvSchema) {
    std::ostringstream out;
    write_ratio_csv(out, ratio_curve({13.48, 2.13, 3.42, 1}, 1, 3));
    const std::string csv = out.str();
    EXPECT_EQ(csv.substr(0, 8), "m,ratio\n");
    EXPECT_NE(csv.find("\n3,1.736368\n"), std::string::npos);
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
}

TEST(FormatDouble, LocaleFree) {
    EXPECT_EQ(format_fixed(1.5, 3), "1.500");
    EXPECT_EQ(format_double(0.25), "0.25");
}

// ---------------------------------------------------------------------------
// cumulative energy

TEST(CumulativeEnergy, RankOneIsAllOnes) {
    const DenseMatrix u = DenseMatrix::from_rows({{1.0f}, {2.0f}, {-1.0f}, {0.5f}});
    const DenseMatrix v = DenseMatrix::from_rows({{3.0f, -1.0f, 2.0f}});
    for (double c : cumulative_energy(matmul(u, v))) {
        EXPECT_NEAR(c, 1.0, 1e-9);
    }
}

TEST(CumulativeEnergy, PlantedRank) {
    Rng rng(4);
    for (std::size_t r : {2u, 5u, 9u}) {
        const DenseMatrix d = matmul(gaussian_matrix(24, r, 1.0, rng), gaussian_matrix(r, 20, 1.0, rng));
        const auto c = cumulative_energy(d);
        ASSERT_EQ(c.size(), 20u);
        EXPECT_NEAR(c[r - 1], 1.0, 1e-6);
        EXPECT_LT(c[r - 2], 1.0 - 1e-6);
    }
}

TEST(CumulativeEnergy, NonDecreasingAndEndsAtOne) {
    Rng rng(5);
    const auto c = cumulative_energy(gaussian_matrix(13, 17, 1.0, rng));
    ASSERT_EQ(c.size(), 13u);
    for (std::size_t i = 1; i < c.size(); ++i) {
        EXPECT_GE(c[i], c[i - 1]);
    }
    EXPECT_EQ(c.back(), 1.0);
}

TEST(CumulativeEnergy, MatchesEigenvalueOracle) {
    Rng rng(6);
    const DenseMatrix d = gaussian_matrix(9, 7, 1.0, rng);
    const std::vector<float> flat(d.data().begin(), d.data().end());
    auto s = oracle::singular_values(flat, 9, 7);
    std::sort(s.begin(), s.end(), std::greater<>());
    double total = 0.0;
    for (double v : s) {
        total += v * v;
    }
    const auto c = cumulative_energy(d);
    double acc = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        acc += s[i] * s[i];
        EXPECT_NEAR(c[i], acc / total, 1e-6);
    }
}

TEST(CumulativeEnergy, DenseGaussianIsHighRank) {
    std::vector<double> mid;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        const auto c = cumulative_energy(gaussian_matrix(32, 32, 1.0, rng));
        mid.push_back(c[15]);
    }
    EXPECT_LT(oracle::median(mid), 0.95);
}

TEST(CumulativeEnergy, ZeroMatrixAndCsv) {
    const auto c = cumulative_energy(DenseMatrix(3, 3));
    EXPECT_EQ(c, (std::vector<double>{1.0, 1.0, 1.0}));
    EXPECT_THROW(cumulative_energy(DenseMatrix()), Error);
    std::ostringstream out;
    write_energy_csv(out, {{0.5, 1.0}, {1.0}});
    EXPECT_EQ(out.str(), "layer,rank,energy\n0,1,0.500000\n0,2,1.000000\n1,1,1.000000\n");
}
