#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "meswitch/compress.hpp"
#include "meswitch/numerics.hpp"

namespace meswitch {

/// Source of the x * Delta~ term for one layer.
class DeltaProvider {
public:
    enum class Kind { zero, exact, compressed, low_rank };

    struct Zero {
        std::size_t rows = 0;
        std::size_t cols = 0;
    };

    DeltaProvider() = default;

    static DeltaProvider zero(std::size_t rows, std::size_t cols) { return DeltaProvider(Zero{rows, cols}); }
    static DeltaProvider exact(DenseMatrix delta) {
        return DeltaProvider(std::make_shared<const DenseMatrix>(std::move(delta)));
    }
    static DeltaProvider compressed(CompressedDelta delta) {
        delta.validate();
        return DeltaProvider(std::make_shared<const CompressedDelta>(std::move(delta)));
    }
    static DeltaProvider compressed(std::shared_ptr<const CompressedDelta> delta) {
        delta->validate();
        return DeltaProvider(std::move(delta));
    }
    static DeltaProvider low_rank(LowRankDelta delta) {
        return DeltaProvider(std::make_shared<const LowRankDelta>(std::move(delta)));
    }

    Kind kind() const { return static_cast<Kind>(impl_.index()); }

    std::size_t rows() const {
        return std::visit(
            [](const auto& p) -> std::size_t {
                using T = std::decay_t<decltype(p)>;
                if constexpr (std::is_same_v<T, Zero>) {
                    return p.rows;
                } else if constexpr (std::is_same_v<T, std::shared_ptr<const DenseMatrix>>) {
                    return p->rows();
                } else if constexpr (std::is_same_v<T, std::shared_ptr<const CompressedDelta>>) {
                    return p->rows;
                } else {
                    return p->a.rows();
                }
            },
            impl_);
    }

    std::size_t cols() const {
        return std::visit(
            [](const auto& p) -> std::size_t {
                using T = std::decay_t<decltype(p)>;
                if constexpr (std::is_same_v<T, Zero>) {
                    return p.cols;
                } else if constexpr (std::is_same_v<T, std::shared_ptr<const DenseMatrix>>) {
                    return p->cols();
                } else if constexpr (std::is_same_v<T, std::shared_ptr<const CompressedDelta>>) {
                    return p->cols;
                } else {
                    return p->b.cols();
                }
            },
            impl_);
    }

    /// Materialized Delta~ (reference path; the kernels never call this).
    DenseMatrix dense() const {
        switch (kind()) {
            case Kind::zero: return DenseMatrix(rows(), cols());
            case Kind::exact: return *std::get<1>(impl_);
            case Kind::compressed: return std::get<2>(impl_)->reconstruct();
            case Kind::low_rank: return std::get<3>(impl_)->reconstruct();
        }
        return {};
    }

    const DenseMatrix* exact_matrix() const { return kind() == Kind::exact ? std::get<1>(impl_).get() : nullptr; }
    const CompressedDelta* compressed_delta() const {
        return kind() == Kind::compressed ? std::get<2>(impl_).get() : nullptr;
    }
    const LowRankDelta* low_rank_delta() const {
        return kind() == Kind::low_rank ? std::get<3>(impl_).get() : nullptr;
    }

private:
    using Impl = std::variant<Zero, std::shared_ptr<const DenseMatrix>, std::shared_ptr<const CompressedDelta>,
                              std::shared_ptr<const LowRankDelta>>;

    explicit DeltaProvider(Impl impl) : impl_(std::move(impl)) {}

    Impl impl_{Zero{}};
};

namespace detail {

// Accumulate sum_i x_i * q_ij for column j straight from its packed bytes.
template <int Bits>
float packed_column_dot(const std::uint8_t* col, std::span<const float> x, const std::array<float, 256>& lut) {
    constexpr int per_byte = 8 / Bits;
    constexpr unsigned mask = (1u << Bits) - 1u;
    float acc = 0.0f;
    const std::size_t m = x.size();
    std::size_t i = 0;
    for (std::size_t byte = 0; i < m; ++byte) {
        const unsigned v = col[byte];
        for (int k = 0; k < per_byte && i < m; ++k, ++i) {
            acc += x[i] * lut[(v >> (k * Bits)) & mask];
        }
    }
    return acc;
}

inline float packed_column_dot_generic(const std::uint8_t* col, std::span<const float> x, int bits,
                                       const std::array<float, 256>& lut) {
    float acc = 0.0f;
    const auto b = static_cast<std::size_t>(bits);
    for (std::size_t i = 0; i < x.size(); ++i) {
        unsigned u = 0;
        const std::size_t bit = i * b;
        for (std::size_t k = 0; k < b; ++k) {
            u |= static_cast<unsigned>((col[(bit + k) / 8] >> ((bit + k) % 8)) & 1u) << k;
        }
        acc += x[i] * lut[u];
    }
    return acc;
}

inline RowVector compressed_matvec(std::span<const float> x, const CompressedDelta& cd) {
    const QuantConfig qc = cd.quant_config();
    std::array<float, 256> lut{};
    for (unsigned u = 0; u < (1u << cd.bits); ++u) {
        lut[u] = static_cast<float>(offset_to_code(u, qc));
    }

    // salient rows are served from binary16, so they drop out of the code sum
    std::vector<float> masked(x.begin(), x.end());
    for (auto i : cd.salient.indices) {
        masked[i] = 0.0f;
    }

    RowVector y(cd.cols, 0.0f);
    const std::size_t stride = cd.packed.column_stride();
    const std::uint8_t* bytes = cd.packed.bytes.data();
    for (std::size_t j = 0; j < cd.cols; ++j) {
        const std::uint8_t* col = bytes + j * stride;
        float acc = 0.0f;
        switch (cd.bits) {
            case 1: acc = packed_column_dot<1>(col, masked, lut); break;
            case 2: acc = packed_column_dot<2>(col, masked, lut); break;
            case 4: acc = packed_column_dot<4>(col, masked, lut); break;
            case 8: acc = packed_column_dot<8>(col, masked, lut); break;
            default: acc = packed_column_dot_generic(col, masked, cd.bits, lut); break;
        }
        y[j] = cd.steps.values[j] * acc;
    }

    if (cd.k() > 0) {
        std::vector<float> widened(cd.salient_rows.size());
        for (std::size_t t = 0; t < widened.size(); ++t) {
            widened[t] = half_bits_to_float(cd.salient_rows[t]);
        }
        for (std::size_t r = 0; r < cd.k(); ++r) {
            const float xi = x[cd.salient.indices[r]];
            if (xi == 0.0f) {
                continue;
            }
            const float* row = widened.data() + r * cd.cols;
            for (std::size_t j = 0; j < cd.cols; ++j) {
                y[j] += xi * row[j];
            }
        }
    }
    return y;
}

}  // namespace detail

/// x * Delta~ without materializing Delta~ for compressed providers.
inline RowVector delta_matvec(std::span<const float> x, const DeltaProvider& p) {
    require(x.size() == p.rows(), ErrorKind::dimension_mismatch,
            "delta_matvec: x has " + std::to_string(x.size()) + " entries but the delta has " +
                std::to_string(p.rows()) + " rows");
    switch (p.kind()) {
        case DeltaProvider::Kind::zero: return RowVector(p.cols(), 0.0f);
        case DeltaProvider::Kind::exact: return matvec(x, *p.exact_matrix());
        case DeltaProvider::Kind::compressed: return detail::compressed_matvec(x, *p.compressed_delta());
        case DeltaProvider::Kind::low_rank: {
            const auto& lr = *p.low_rank_delta();
            const RowVector xa = matvec(x, lr.a);
            return matvec(xa, lr.b);
        }
    }
    return {};
}

}  // namespace meswitch
