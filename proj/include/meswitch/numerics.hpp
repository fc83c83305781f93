#pragma once

#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "meswitch/error.hpp"

namespace meswitch {

using RowVector = std::vector<float>;

/// Row-major FP32 matrix. Rows index input channels, columns index output
/// channels, so `x * W` maps an m-vector to an n-vector.
class DenseMatrix {
public:
    DenseMatrix() = default;

    DenseMatrix(std::size_t rows, std::size_t cols, float fill = 0.0f)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    DenseMatrix(std::size_t rows, std::size_t cols, std::vector<float> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        require(data_.size() == rows_ * cols_, ErrorKind::dimension_mismatch,
                "DenseMatrix: " + std::to_string(data_.size()) + " values for a " +
                    std::to_string(rows_) + "x" + std::to_string(cols_) + " matrix");
    }

    static DenseMatrix from_rows(std::initializer_list<std::initializer_list<float>> rows) {
        const std::size_t r = rows.size();
        const std::size_t c = r == 0 ? 0 : rows.begin()->size();
        std::vector<float> data;
        data.reserve(r * c);
        for (const auto& row : rows) {
            require(row.size() == c, ErrorKind::dimension_mismatch, "DenseMatrix::from_rows: ragged rows");
            data.insert(data.end(), row.begin(), row.end());
        }
        return DenseMatrix(r, c, std::move(data));
    }

    static DenseMatrix identity(std::size_t n) {
        DenseMatrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) {
            m(i, i) = 1.0f;
        }
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    float& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    float operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

    std::span<float> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
    std::span<const float> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }

    std::span<float> data() noexcept { return data_; }
    std::span<const float> data() const noexcept { return data_; }

    bool all_finite() const {
        for (float v : data_) {
            if (!std::isfinite(v)) {
                return false;
            }
        }
        return true;
    }

    bool same_shape(const DenseMatrix& other) const noexcept {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }

    friend bool operator==(const DenseMatrix&, const DenseMatrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<float> data_;
};

inline std::string shape_string(const DenseMatrix& m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

/// y = x * W with FP32 accumulation in a fixed row order.
inline RowVector matvec(std::span<const float> x, const DenseMatrix& w) {
    require(x.size() == w.rows(), ErrorKind::dimension_mismatch,
            "matvec: x has " + std::to_string(x.size()) + " entries but W has " + std::to_string(w.rows()) +
                " rows");
    RowVector y(w.cols(), 0.0f);
    for (std::size_t i = 0; i < w.rows(); ++i) {
        const float xi = x[i];
        if (xi == 0.0f) {
            continue;
        }
        const auto wr = w.row(i);
        for (std::size_t j = 0; j < y.size(); ++j) {
            y[j] += xi * wr[j];
        }
    }
    return y;
}

inline DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
    require(a.cols() == b.rows(), ErrorKind::dimension_mismatch,
            "matmul: " + shape_string(a) + " times " + shape_string(b));
    DenseMatrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto out = c.row(i);
        for (std::size_t p = 0; p < a.cols(); ++p) {
            const float aip = a(i, p);
            if (aip == 0.0f) {
                continue;
            }
            const auto br = b.row(p);
            for (std::size_t j = 0; j < out.size(); ++j) {
                out[j] += aip * br[j];
            }
        }
    }
    return c;
}

inline DenseMatrix add(const DenseMatrix& a, const DenseMatrix& b) {
    require(a.same_shape(b), ErrorKind::dimension_mismatch, "add: " + shape_string(a) + " vs " + shape_string(b));
    DenseMatrix c = a;
    auto cd = c.data();
    const auto bd = b.data();
    for (std::size_t i = 0; i < cd.size(); ++i) {
        cd[i] += bd[i];
    }
    return c;
}

inline DenseMatrix subtract(const DenseMatrix& a, const DenseMatrix& b) {
    require(a.same_shape(b), ErrorKind::dimension_mismatch,
            "subtract: " + shape_string(a) + " vs " + shape_string(b));
    DenseMatrix c = a;
    auto cd = c.data();
    const auto bd = b.data();
    for (std::size_t i = 0; i < cd.size(); ++i) {
        cd[i] -= bd[i];
    }
    return c;
}

inline DenseMatrix transpose(const DenseMatrix& a) {
    DenseMatrix t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) {
            t(j, i) = a(i, j);
        }
    }
    return t;
}

inline double frobenius_norm(const DenseMatrix& a) {
    double acc = 0.0;
    for (float v : a.data()) {
        acc += static_cast<double>(v) * v;
    }
    return std::sqrt(acc);
}

inline double squared_distance(std::span<const float> a, std::span<const float> b) {
    require(a.size() == b.size(), ErrorKind::dimension_mismatch, "squared_distance: length mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - b[i];
        acc += d * d;
    }
    return acc;
}

// ---------------------------------------------------------------------------
// binary16 storage

/// IEEE 754 binary16 bit pattern. Storage only; arithmetic happens in FP32.
struct HalfFloat {
    std::uint16_t bits = 0;

    static HalfFloat from_float(float v);
    float to_float() const;

    friend bool operator==(HalfFloat, HalfFloat) = default;
};

inline std::uint16_t float_to_half_bits(float value) {
    const std::uint32_t x = std::bit_cast<std::uint32_t>(value);
    const auto sign = static_cast<std::uint16_t>((x >> 16) & 0x8000u);
    const std::uint32_t exponent = (x >> 23) & 0xffu;
    std::uint32_t mantissa = x & 0x7fffffu;

    if (exponent == 0xffu) {
        if (mantissa == 0) {
            return static_cast<std::uint16_t>(sign | 0x7c00u);
        }
        return static_cast<std::uint16_t>(sign | 0x7e00u | (mantissa >> 13));
    }

    const int half_exponent = static_cast<int>(exponent) - 127 + 15;
    if (half_exponent >= 31) {
        return static_cast<std::uint16_t>(sign | 0x7c00u);
    }
    if (half_exponent <= 0) {
        // below 2^-25 everything rounds to zero
        if (half_exponent < -10) {
            return sign;
        }
        mantissa |= 0x800000u;
        const int shift = 14 - half_exponent;
        std::uint32_t half_mantissa = mantissa >> shift;
        const std::uint32_t remainder = mantissa & ((1u << shift) - 1u);
        const std::uint32_t halfway = 1u << (shift - 1);
        if (remainder > halfway || (remainder == halfway && (half_mantissa & 1u))) {
            ++half_mantissa;
        }
        return static_cast<std::uint16_t>(sign | half_mantissa);
    }

    std::uint32_t half = (static_cast<std::uint32_t>(half_exponent) << 10) | (mantissa >> 13);
    const std::uint32_t remainder = mantissa & 0x1fffu;
    if (remainder > 0x1000u || (remainder == 0x1000u && (half & 1u))) {
        ++half;  // may carry into the exponent, up to infinity
    }
    return static_cast<std::uint16_t>(sign | half);
}

inline float half_bits_to_float(std::uint16_t bits) {
    const std::uint32_t sign = static_cast<std::uint32_t>(bits & 0x8000u) << 16;
    const std::uint32_t exponent = (bits >> 10) & 0x1fu;
    std::uint32_t mantissa = bits & 0x3ffu;

    std::uint32_t out = 0;
    if (exponent == 0) {
        if (mantissa == 0) {
            out = sign;
        } else {
            int e = -1;
            do {
                ++e;
                mantissa <<= 1;
            } while ((mantissa & 0x400u) == 0);
            out = sign | (static_cast<std::uint32_t>(127 - 15 - e) << 23) | ((mantissa & 0x3ffu) << 13);
        }
    } else if (exponent == 0x1fu) {
        out = sign | 0x7f800000u | (mantissa << 13);
    } else {
        out = sign | ((exponent + 127 - 15) << 23) | (mantissa << 13);
    }
    return std::bit_cast<float>(out);
}

inline HalfFloat HalfFloat::from_float(float v) { return HalfFloat{float_to_half_bits(v)}; }
inline float HalfFloat::to_float() const { return half_bits_to_float(bits); }

inline float half_roundtrip(float v) { return half_bits_to_float(float_to_half_bits(v)); }

// ---------------------------------------------------------------------------
// deterministic RNG

/// xoshiro256** seeded through splitmix64. Every derived draw (uniform,
/// gaussian, shuffle) is implemented here so streams match across platforms.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) {
        std::uint64_t sm = seed;
        for (auto& s : state_) {
            s = splitmix64(sm);
        }
    }

    static std::uint64_t splitmix64(std::uint64_t& x) {
        std::uint64_t z = (x += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = std::rotl(state_[1] * 5, 7) * 9;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = std::rotl(state_[3], 45);
        return result;
    }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n) without modulo bias.
    std::uint64_t uniform_index(std::uint64_t n) {
        require(n > 0, ErrorKind::invalid_argument, "Rng::uniform_index: empty range");
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                    std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t r = 0;
        do {
            r = next_u64();
        } while (r >= limit);
        return r % n;
    }

    /// Standard normal via Box-Muller.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = radius * std::sin(theta);
        has_spare_ = true;
        return radius * std::cos(theta);
    }

    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(uniform_index(i));
            std::swap(items[i - 1], items[j]);
        }
    }

    /// k distinct values from [0, n), in draw order.
    std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k) {
        require(k <= n, ErrorKind::invalid_argument, "Rng::sample_without_replacement: k > n");
        std::vector<std::size_t> pool(n);
        for (std::size_t i = 0; i < n; ++i) {
            pool[i] = i;
        }
        for (std::size_t i = 0; i < k; ++i) {
            const auto j = i + static_cast<std::size_t>(uniform_index(n - i));
            std::swap(pool[i], pool[j]);
        }
        pool.resize(k);
        return pool;
    }

private:
    std::uint64_t state_[4]{};
    double spare_ = 0.0;
    bool has_spare_ = false;
};

inline DenseMatrix gaussian_matrix(std::size_t rows, std::size_t cols, double sigma, Rng& rng) {
    DenseMatrix m(rows, cols);
    for (float& v : m.data()) {
        v = static_cast<float>(sigma * rng.normal());
    }
    return m;
}

// ---------------------------------------------------------------------------
// digests

inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ull;
inline constexpr std::uint64_t kFnvPrime = 0x100000001b3ull;

inline std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t hash = kFnvOffset) {
    for (std::uint8_t b : bytes) {
        hash ^= b;
        hash *= kFnvPrime;
    }
    return hash;
}

inline std::string hex64(std::uint64_t value) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[value & 0xf];
        value >>= 4;
    }
    return out;
}

}  // namespace meswitch
