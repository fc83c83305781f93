#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "meswitch/numerics.hpp"

namespace meswitch {

/// Uniform b-bit quantizer settings. For b >= 2 the integer range is
/// [-2^(b-1), 2^(b-1) - 1]; b = 1 is sign quantization with codes {-1, +1}.
struct QuantConfig {
    int bits = 2;

    int qn() const { return bits == 1 ? 1 : 1 << (bits - 1); }
    int qp() const { return bits == 1 ? 1 : (1 << (bits - 1)) - 1; }

    void validate() const {
        require(bits == 1 || bits == 2 || bits == 3 || bits == 4 || bits == 8, ErrorKind::invalid_argument,
                "QuantConfig: unsupported bit width " + std::to_string(bits));
    }

    bool code_valid(int q) const {
        if (bits == 1) {
            return q == -1 || q == 1;
        }
        return q >= -qn() && q <= qp();
    }
};

/// One step size per output channel; doubles as the binary scale when b = 1.
struct StepSizes {
    std::vector<float> values;

    std::size_t size() const noexcept { return values.size(); }
    float operator[](std::size_t j) const { return values[j]; }

    friend bool operator==(const StepSizes&, const StepSizes&) = default;
};

/// Signed integer codes, row-major m x n.
struct CodeMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::int8_t> codes;

    CodeMatrix() = default;
    CodeMatrix(std::size_t r, std::size_t c, std::int8_t fill = 0) : rows(r), cols(c), codes(r * c, fill) {}

    std::int8_t& operator()(std::size_t i, std::size_t j) { return codes[i * cols + j]; }
    std::int8_t operator()(std::size_t i, std::size_t j) const { return codes[i * cols + j]; }

    friend bool operator==(const CodeMatrix&, const CodeMatrix&) = default;
};

/// Column-major bit stream of unsigned offset codes, LSB-first inside each
/// byte, each column padded to a whole byte.
struct PackedCodes {
    int bits = 2;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::uint8_t> bytes;

    static std::size_t column_stride(std::size_t rows, int bits) {
        return (rows * static_cast<std::size_t>(bits) + 7) / 8;
    }
    std::size_t column_stride() const { return column_stride(rows, bits); }
    std::size_t expected_bytes() const { return cols * column_stride(); }

    friend bool operator==(const PackedCodes&, const PackedCodes&) = default;
};

namespace detail {

inline void check_steps(const StepSizes& s, std::size_t cols, const char* who) {
    require(s.size() == cols, ErrorKind::dimension_mismatch,
            std::string(who) + ": " + std::to_string(s.size()) + " step sizes for " + std::to_string(cols) +
                " columns");
    for (std::size_t j = 0; j < s.size(); ++j) {
        if (!(s[j] > 0.0f) || !std::isfinite(s[j])) {
            fail(ErrorKind::invalid_argument,
                 std::string(who) + ": step size " + std::to_string(j) + " is not positive");
        }
    }
}

inline bool row_included(std::span<const std::uint8_t> mask, std::size_t i) {
    return mask.empty() || mask[i] != 0;
}

}  // namespace detail

/// Per-column initialization: max|X| / (2^(b-1) - 1) for b >= 2, mean|X| for
/// b = 1. `row_mask` (when non-empty) restricts the statistics to rows with a
/// nonzero mask entry. Degenerate columns get the smallest normal float and a
/// warning.
inline StepSizes init_step_sizes(const DenseMatrix& x, const QuantConfig& cfg,
                                 std::span<const std::uint8_t> row_mask = {},
                                 std::vector<std::string>* warnings = nullptr) {
    cfg.validate();
    require(!x.empty(), ErrorKind::invalid_argument, "init_step_sizes: empty matrix");
    require(row_mask.empty() || row_mask.size() == x.rows(), ErrorKind::dimension_mismatch,
            "init_step_sizes: row mask length mismatch");

    std::vector<double> stat(x.cols(), 0.0);
    std::size_t counted = 0;
    for (std::size_t i = 0; i < x.rows(); ++i) {
        if (!detail::row_included(row_mask, i)) {
            continue;
        }
        ++counted;
        const auto r = x.row(i);
        for (std::size_t j = 0; j < x.cols(); ++j) {
            const double a = std::abs(static_cast<double>(r[j]));
            if (cfg.bits == 1) {
                stat[j] += a;
            } else {
                stat[j] = std::max(stat[j], a);
            }
        }
    }

    StepSizes s;
    s.values.resize(x.cols());
    for (std::size_t j = 0; j < x.cols(); ++j) {
        double value = 0.0;
        if (cfg.bits == 1) {
            value = counted == 0 ? 0.0 : stat[j] / static_cast<double>(counted);
        } else {
            value = stat[j] / static_cast<double>(cfg.qp());
        }
        auto fv = static_cast<float>(value);
        if (!(fv > 0.0f)) {
            fv = std::numeric_limits<float>::min();
            if (warnings != nullptr) {
                warnings->push_back("column " + std::to_string(j) + " is all zero; step set to FLT_MIN");
            }
        }
        s.values[j] = fv;
    }
    return s;
}

/// Round half away from zero, then clamp to the code range.
inline int quantize_value(float x, float step, const QuantConfig& cfg) {
    if (cfg.bits == 1) {
        return x < 0.0f ? -1 : 1;
    }
    const double u = static_cast<double>(x) / static_cast<double>(step);
    const double r = std::round(u);
    return static_cast<int>(std::clamp(r, static_cast<double>(-cfg.qn()), static_cast<double>(cfg.qp())));
}

inline CodeMatrix quantize_codes(const DenseMatrix& x, const StepSizes& s, const QuantConfig& cfg) {
    cfg.validate();
    detail::check_steps(s, x.cols(), "quantize_codes");
    CodeMatrix q(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const auto r = x.row(i);
        for (std::size_t j = 0; j < x.cols(); ++j) {
            q(i, j) = static_cast<std::int8_t>(quantize_value(r[j], s[j], cfg));
        }
    }
    return q;
}

inline DenseMatrix dequantize(const CodeMatrix& q, const StepSizes& s, const QuantConfig& cfg) {
    cfg.validate();
    require(s.size() == q.cols, ErrorKind::dimension_mismatch, "dequantize: step count does not match columns");
    DenseMatrix x(q.rows, q.cols);
    for (std::size_t i = 0; i < q.rows; ++i) {
        for (std::size_t j = 0; j < q.cols; ++j) {
            const int code = q(i, j);
            if (!cfg.code_valid(code)) {
                fail(ErrorKind::out_of_range, "dequantize: code " + std::to_string(code) + " at (" +
                                                  std::to_string(i) + "," + std::to_string(j) +
                                                  ") outside the " + std::to_string(cfg.bits) + "-bit range");
            }
            x(i, j) = static_cast<float>(code) * s[j];
        }
    }
    return x;
}

/// How d(dequantize(quantize(X, s)))/ds is formed inside the clamp range.
enum class StepGradientRule {
    /// round(u) - u: the learned-step-size estimator that passes the rounding
    /// gradient straight through.
    lsq,
    /// round(u): the exact derivative of q*s with the integer code held fixed,
    /// which is what central differences of the quantizer measure.
    piecewise,
};

/// Local derivative of the dequantized value w.r.t. its column's step size.
inline double step_local_gradient(float x, float step, const QuantConfig& cfg, StepGradientRule rule) {
    if (cfg.bits == 1) {
        return x < 0.0f ? -1.0 : 1.0;
    }
    const double u = static_cast<double>(x) / static_cast<double>(step);
    if (u < -cfg.qn()) {
        return -cfg.qn();
    }
    if (u > cfg.qp()) {
        return cfg.qp();
    }
    const double r = std::round(u);
    return rule == StepGradientRule::lsq ? r - u : r;
}

/// grad_s[j] = sum_i upstream(i,j) * d Xhat(i,j) / d s_j. Rows excluded by a
/// non-empty `row_mask` contribute nothing.
inline std::vector<double> ste_step_gradient(const DenseMatrix& x, const StepSizes& s, const QuantConfig& cfg,
                                             const DenseMatrix& upstream,
                                             StepGradientRule rule = StepGradientRule::lsq,
                                             std::span<const std::uint8_t> row_mask = {}) {
    cfg.validate();
    detail::check_steps(s, x.cols(), "ste_step_gradient");
    require(upstream.same_shape(x), ErrorKind::dimension_mismatch,
            "ste_step_gradient: upstream " + shape_string(upstream) + " vs X " + shape_string(x));
    std::vector<double> grad(x.cols(), 0.0);
    for (std::size_t i = 0; i < x.rows(); ++i) {
        if (!detail::row_included(row_mask, i)) {
            continue;
        }
        const auto xr = x.row(i);
        const auto ur = upstream.row(i);
        for (std::size_t j = 0; j < x.cols(); ++j) {
            if (ur[j] == 0.0f) {
                continue;
            }
            grad[j] += static_cast<double>(ur[j]) * step_local_gradient(xr[j], s[j], cfg, rule);
        }
    }
    return grad;
}

inline std::uint32_t code_to_offset(int q, const QuantConfig& cfg) {
    return cfg.bits == 1 ? static_cast<std::uint32_t>((q + 1) / 2) : static_cast<std::uint32_t>(q + cfg.qn());
}

inline int offset_to_code(std::uint32_t u, const QuantConfig& cfg) {
    return cfg.bits == 1 ? static_cast<int>(2 * u) - 1 : static_cast<int>(u) - cfg.qn();
}

inline PackedCodes pack_codes(const CodeMatrix& q, const QuantConfig& cfg) {
    cfg.validate();
    PackedCodes p{cfg.bits, q.rows, q.cols, {}};
    const std::size_t stride = p.column_stride();
    p.bytes.assign(q.cols * stride, 0);
    const auto b = static_cast<std::size_t>(cfg.bits);
    for (std::size_t j = 0; j < q.cols; ++j) {
        std::uint8_t* col = p.bytes.data() + j * stride;
        for (std::size_t i = 0; i < q.rows; ++i) {
            const int code = q(i, j);
            if (!cfg.code_valid(code)) {
                fail(ErrorKind::out_of_range, "pack_codes: code " + std::to_string(code) + " outside the " +
                                                  std::to_string(cfg.bits) + "-bit range");
            }
            const std::uint32_t u = code_to_offset(code, cfg);
            const std::size_t bit = i * b;
            for (std::size_t k = 0; k < b; ++k) {
                if ((u >> k) & 1u) {
                    col[(bit + k) / 8] |= static_cast<std::uint8_t>(1u << ((bit + k) % 8));
                }
            }
        }
    }
    return p;
}

inline void check_packed_length(const PackedCodes& p) {
    if (p.bytes.size() != p.expected_bytes()) {
        fail(ErrorKind::truncated, "packed codes: expected " + std::to_string(p.expected_bytes()) +
                                       " bytes, got " + std::to_string(p.bytes.size()));
    }
}

inline CodeMatrix unpack_codes(const PackedCodes& p) {
    const QuantConfig cfg{p.bits};
    cfg.validate();
    check_packed_length(p);
    CodeMatrix q(p.rows, p.cols);
    const std::size_t stride = p.column_stride();
    const auto b = static_cast<std::size_t>(p.bits);
    for (std::size_t j = 0; j < p.cols; ++j) {
        const std::uint8_t* col = p.bytes.data() + j * stride;
        for (std::size_t i = 0; i < p.rows; ++i) {
            std::uint32_t u = 0;
            const std::size_t bit = i * b;
            for (std::size_t k = 0; k < b; ++k) {
                u |= static_cast<std::uint32_t>((col[(bit + k) / 8] >> ((bit + k) % 8)) & 1u) << k;
            }
            q(i, j) = static_cast<std::int8_t>(offset_to_code(u, cfg));
        }
    }
    return q;
}

}  // namespace meswitch
