#include <gtest/gtest.h>

#include <Eigen/Core>

#include <bit>
#include <cmath>
#include <limits>

#include "meswitch/binary_io.hpp"
#include "meswitch/numerics.hpp"
#include "oracles.hpp"

using namespace meswitch;

TEST(Matvec, UnitBasisSelectsRow) {
    const auto w = DenseMatrix::from_rows({{3, 4}, {5, 6}});
    const std::vector<float> x{1, 0};
    EXPECT_EQ(matvec(x, w), (RowVector{3, 4}));
}

TEST(Matvec, ZeroInputGivesZero) {
    const auto w = DenseMatrix::from_rows({{3, 4}, {5, 6}});
    const std::vector<float> x{0, 0};
    EXPECT_EQ(matvec(x, w), (RowVector{0, 0}));
}

TEST(Matvec, HandComputed) {
    const auto w = DenseMatrix::from_rows({{1, 1}, {1, -1}});
    const std::vector<float> x{1, 2};
    EXPECT_EQ(matvec(x, w), (RowVector{3, -1}));
}

TEST(Matvec, MismatchNamesBothDimensions) {
    const DenseMatrix w(3, 2);
    const std::vector<float> x{1, 2};
    try {
        matvec(x, w);
        FAIL() << "expected an error";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::dimension_mismatch);
        const std::string msg = e.what();
        EXPECT_NE(msg.find('2'), std::string::npos);
        EXPECT_NE(msg.find('3'), std::string::npos);
    }
}

TEST(Matvec, Linearity) {
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        const DenseMatrix w = gaussian_matrix(16, 12, 1.0, rng);
        const DenseMatrix xz = gaussian_matrix(2, 16, 1.0, rng);
        const float a = static_cast<float>(rng.normal());
        const float b = static_cast<float>(rng.normal());
        std::vector<float> combo(16);
        for (std::size_t i = 0; i < 16; ++i) {
            combo[i] = a * xz(0, i) + b * xz(1, i);
        }
        const RowVector lhs = matvec(combo, w);
        const RowVector y1 = matvec(xz.row(0), w);
        const RowVector y2 = matvec(xz.row(1), w);
        std::vector<float> rhs(12);
        for (std::size_t j = 0; j < 12; ++j) {
            rhs[j] = a * y1[j] + b * y2[j];
        }
        EXPECT_LT(oracle::relative_error(lhs, rhs), 1e-5);
    }
}

TEST(Matvec, MatchesScalarReference) {
    Rng rng(3);
    const DenseMatrix w = gaussian_matrix(9, 5, 1.0, rng);
    const DenseMatrix x = gaussian_matrix(1, 9, 1.0, rng);
    const RowVector y = matvec(x.row(0), w);
    for (std::size_t j = 0; j < 5; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < 9; ++i) {
            acc += static_cast<double>(x(0, i)) * w(i, j);
        }
        EXPECT_NEAR(y[j], acc, 1e-5 * (1.0 + std::fabs(acc)));
    }
}

TEST(Matmul, RowsEqualMatvec) {
    Rng rng(11);
    const DenseMatrix a = gaussian_matrix(4, 6, 1.0, rng);
    const DenseMatrix b = gaussian_matrix(6, 3, 1.0, rng);
    const DenseMatrix c = matmul(a, b);
    for (std::size_t i = 0; i < 4; ++i) {
        const RowVector r = matvec(a.row(i), b);
        for (std::size_t j = 0; j < 3; ++j) {
            EXPECT_EQ(c(i, j), r[j]);
        }
    }
    EXPECT_THROW(matmul(b, b), Error);
}

TEST(DenseMatrixOps, AddSubtractTranspose) {
    const auto a = DenseMatrix::from_rows({{1, 2, 3}, {4, 5, 6}});
    const auto b = DenseMatrix::from_rows({{0.5f, 0, -1}, {2, 2, 2}});
    EXPECT_EQ(subtract(add(a, b), b), a);
    const DenseMatrix t = transpose(a);
    EXPECT_EQ(t.rows(), 3u);
    EXPECT_EQ(t(2, 1), 6.0f);
    EXPECT_THROW(add(a, t), Error);
    EXPECT_DOUBLE_EQ(frobenius_norm(DenseMatrix::from_rows({{3, 4}})), 5.0);
}

TEST(DenseMatrixOps, FiniteCheck) {
    DenseMatrix a(2, 2);
    EXPECT_TRUE(a.all_finite());
    a(1, 1) = std::numeric_limits<float>::quiet_NaN();
    EXPECT_FALSE(a.all_finite());
}

// ---------------------------------------------------------------------------
// half floats

TEST(Half, SpecExamples) {
    EXPECT_EQ(half_roundtrip(1.0f), 1.0f);
    EXPECT_EQ(half_roundtrip(0.1f), 0.0999755859375f);
    EXPECT_TRUE(std::isinf(half_roundtrip(70000.0f)));
    EXPECT_GT(half_roundtrip(70000.0f), 0.0f);
    EXPECT_EQ(float_to_half_bits(70000.0f), 0x7c00);
}

TEST(Half, DecodeEveryPattern) {
    for (std::uint32_t b = 0; b < 0x10000; ++b) {
        const auto bits = static_cast<std::uint16_t>(b);
        const double want = oracle::half_decode(bits);
        const float got = half_bits_to_float(bits);
        if (std::isnan(want)) {
            EXPECT_TRUE(std::isnan(got)) << b;
        } else {
            EXPECT_EQ(static_cast<double>(got), want) << b;
        }
    }
}

TEST(Half, EncodeMatchesBruteForceOnEdgeValues) {
    // every half value, the midpoints between neighbours, and one float ulp either side of them
    for (std::uint16_t b = 0; b < 0x7c00; ++b) {
        const double lo = oracle::half_decode(b);
        const double hi = b + 1 < 0x7c00 ? oracle::half_decode(static_cast<std::uint16_t>(b + 1)) : 65536.0;
        const auto mid = static_cast<float>(0.5 * (lo + hi));
        for (float v : {static_cast<float>(lo), mid, std::nextafter(mid, 0.0f), std::nextafter(mid, 1e9f)}) {
            ASSERT_EQ(float_to_half_bits(v), oracle::half_encode(v)) << v;
            ASSERT_EQ(float_to_half_bits(-v), oracle::half_encode(-v)) << -v;
        }
    }
}

TEST(Half, EncodeMatchesBruteForceOnRandomFloats) {
    Rng rng(99);
    for (int i = 0; i < 200000; ++i) {
        const auto bits = static_cast<std::uint32_t>(rng.next_u64());
        const float v = std::bit_cast<float>(bits);
        if (std::isnan(v)) {
            continue;
        }
        ASSERT_EQ(float_to_half_bits(v), oracle::half_encode(v)) << v;
    }
}

TEST(Half, AgreesWithEigenHalf) {
    Rng rng(5);
    for (int i = 0; i < 100000; ++i) {
        const auto v = static_cast<float>(rng.normal() * std::pow(10.0, rng.uniform(-9.0, 5.0)));
        const Eigen::half h(v);
        ASSERT_EQ(float_to_half_bits(v), Eigen::numext::bit_cast<std::uint16_t>(h)) << v;
    }
}

TEST(Half, InfinityAndSignedZero) {
    EXPECT_EQ(float_to_half_bits(std::numeric_limits<float>::infinity()), 0x7c00);
    EXPECT_EQ(float_to_half_bits(-std::numeric_limits<float>::infinity()), 0xfc00);
    EXPECT_EQ(float_to_half_bits(-0.0f), 0x8000);
    EXPECT_TRUE(std::isnan(half_roundtrip(std::numeric_limits<float>::quiet_NaN())));
}

// ---------------------------------------------------------------------------
// rng, hashing

TEST(Rng, SameSeedSameStream) {
    Rng a(1234);
    Rng b(1234);
    for (int i = 0; i < 10000; ++i) {
        ASSERT_EQ(a.next_u64(), b.next_u64());
    }
}

TEST(Rng, DifferentSeedsDiffer) {
    Rng a(1);
    Rng b(2);
    int same = 0;
    for (int i = 0; i < 100; ++i) {
        same += a.next_u64() == b.next_u64() ? 1 : 0;
    }
    EXPECT_EQ(same, 0);
}

TEST(Rng, PinnedFirstDraws) {
    // splitmix64 reference values for seed 0
    std::uint64_t s = 0;
    EXPECT_EQ(Rng::splitmix64(s), 0xe220a8397b1dcdafull);
    EXPECT_EQ(Rng::splitmix64(s), 0x6e789e6aa1b965f4ull);
}

TEST(Rng, UniformAndNormalMoments) {
    Rng rng(42);
    double sum = 0.0;
    double sq = 0.0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double u = rng.uniform();
        ASSERT_GE(u, 0.0);
        ASSERT_LT(u, 1.0);
        const double z = rng.normal();
        sum += z;
        sq += z * z;
    }
    EXPECT_NEAR(sum / n, 0.0, 0.01);
    EXPECT_NEAR(sq / n, 1.0, 0.02);
}

TEST(Rng, UniformIndexCoversRange) {
    Rng rng(8);
    std::vector<int> hits(7, 0);
    for (int i = 0; i < 7000; ++i) {
        const auto k = rng.uniform_index(7);
        ASSERT_LT(k, 7u);
        ++hits[k];
    }
    for (int h : hits) {
        EXPECT_GT(h, 800);
    }
}

TEST(Rng, SampleWithoutReplacementIsDistinct) {
    Rng rng(9);
    auto s = rng.sample_without_replacement(20, 20);
    std::sort(s.begin(), s.end());
    for (std::size_t i = 0; i < 20; ++i) {
        EXPECT_EQ(s[i], i);
    }
}

TEST(Fnv, KnownVectors) {
    EXPECT_EQ(fnv1a64({}), 0xcbf29ce484222325ull);
    const std::uint8_t a[] = {'a'};
    EXPECT_EQ(fnv1a64(a), 0xaf63dc4c8601ec8cull);
    const std::uint8_t foobar[] = {'f', 'o', 'o', 'b', 'a', 'r'};
    EXPECT_EQ(fnv1a64(foobar), 0x85944171f73967e8ull);
    EXPECT_EQ(hex64(0xaf63dc4c8601ec8cull), "af63dc4c8601ec8c");
}

TEST(BinaryIo, RoundTripAndTruncation) {
    ByteWriter w;
    w.u8(7);
    w.u16(0xbeef);
    w.u32(0xdeadbeef);
    w.u64(0x0123456789abcdefull);
    w.f32(1.5f);
    w.text("hi");
    const auto bytes = w.take();
    EXPECT_EQ(bytes[1], 0xef);  // little-endian
    ByteReader r(bytes, "test");
    EXPECT_EQ(r.u8(), 7);
    EXPECT_EQ(r.u16(), 0xbeef);
    EXPECT_EQ(r.u32(), 0xdeadbeefu);
    EXPECT_EQ(r.u64(), 0x0123456789abcdefull);
    EXPECT_EQ(r.f32(), 1.5f);
    EXPECT_EQ(r.text(2), "hi");
    EXPECT_EQ(r.remaining(), 0u);
    try {
        r.u32();
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::truncated);
    }
}
