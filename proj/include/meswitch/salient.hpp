#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "meswitch/numerics.hpp"

namespace meswitch {

/// Per-input-channel activation energy E_i = sum over calibration tokens of x_i^2.
struct ActivationStats {
    std::vector<float> energy;
    std::size_t sample_count = 0;

    std::size_t size() const noexcept { return energy.size(); }

    static ActivationStats uniform(std::size_t m, float value = 1.0f) {
        return ActivationStats{std::vector<float>(m, value), 1};
    }

    /// Accumulate directly from activation rows (one row per token).
    static ActivationStats from_samples(std::span<const RowVector> samples) {
        require(!samples.empty(), ErrorKind::invalid_argument, "ActivationStats: empty calibration set");
        std::vector<double> acc(samples.front().size(), 0.0);
        for (const auto& x : samples) {
            require(x.size() == acc.size(), ErrorKind::dimension_mismatch, "ActivationStats: ragged samples");
            for (std::size_t i = 0; i < x.size(); ++i) {
                acc[i] += static_cast<double>(x[i]) * x[i];
            }
        }
        ActivationStats out;
        out.energy.assign(acc.begin(), acc.end());
        out.sample_count = samples.size();
        return out;
    }
};

/// One score per input channel; larger means more worth keeping in 16 bits.
struct ChannelScore {
    std::vector<double> values;

    std::size_t size() const noexcept { return values.size(); }
};

/// Salient input channels, sorted ascending.
struct SalientSet {
    std::vector<std::uint32_t> indices;

    std::size_t k() const noexcept { return indices.size(); }
    bool contains(std::size_t i) const {
        return std::binary_search(indices.begin(), indices.end(), static_cast<std::uint32_t>(i));
    }
    /// 1 for non-salient rows, 0 for salient ones.
    std::vector<std::uint8_t> complement_mask(std::size_t m) const {
        std::vector<std::uint8_t> mask(m, 1);
        for (auto i : indices) {
            mask[i] = 0;
        }
        return mask;
    }

    friend bool operator==(const SalientSet&, const SalientSet&) = default;
};

inline std::vector<double> row_squared_error(const DenseMatrix& delta, const DenseMatrix& approx) {
    require(delta.same_shape(approx), ErrorKind::dimension_mismatch,
            "row_squared_error: " + shape_string(delta) + " vs " + shape_string(approx));
    std::vector<double> err(delta.rows(), 0.0);
    for (std::size_t i = 0; i < delta.rows(); ++i) {
        err[i] = squared_distance(delta.row(i), approx.row(i));
    }
    return err;
}

/// Output reconstruction error of each input channel, aggregated over the
/// calibration set: sum_t sum_j (x_i^t (D_ij - Dhat_ij))^2 = E_i * sum_j (D_ij - Dhat_ij)^2.
inline ChannelScore score_reconstruction(const DenseMatrix& delta, const DenseMatrix& approx,
                                         const ActivationStats& stats) {
    require(stats.size() == delta.rows(), ErrorKind::dimension_mismatch,
            "score_reconstruction: " + std::to_string(stats.size()) + " activation energies for " +
                std::to_string(delta.rows()) + " input channels");
    auto err = row_squared_error(delta, approx);
    for (std::size_t i = 0; i < err.size(); ++i) {
        err[i] *= static_cast<double>(stats.energy[i]);
    }
    return ChannelScore{std::move(err)};
}

inline std::vector<double> row_l1(const DenseMatrix& delta) {
    std::vector<double> out(delta.rows(), 0.0);
    for (std::size_t i = 0; i < delta.rows(); ++i) {
        for (float v : delta.row(i)) {
            out[i] += std::abs(static_cast<double>(v));
        }
    }
    return out;
}

/// Row L1 norm.
inline ChannelScore score_magnitude(const DenseMatrix& delta) { return ChannelScore{row_l1(delta)}; }

/// sqrt(E_i) * row L1, the per-channel reduction of |W| * ||x||.
inline ChannelScore score_wanda(const DenseMatrix& delta, const ActivationStats& stats) {
    require(stats.size() == delta.rows(), ErrorKind::dimension_mismatch,
            "score_wanda: activation stats length mismatch");
    auto l1 = row_l1(delta);
    for (std::size_t i = 0; i < l1.size(); ++i) {
        l1[i] *= std::sqrt(static_cast<double>(stats.energy[i]));
    }
    return ChannelScore{std::move(l1)};
}

/// A seeded permutation of 0..m-1.
inline ChannelScore score_random(std::size_t m, std::uint64_t seed) {
    std::vector<double> values(m);
    std::iota(values.begin(), values.end(), 0.0);
    Rng rng(seed);
    rng.shuffle(values);
    return ChannelScore{std::move(values)};
}

/// Indices of the k largest scores (ties to the lower index), returned ascending.
inline SalientSet top_k(const ChannelScore& scores, std::size_t k) {
    require(k <= scores.size(), ErrorKind::invalid_argument,
            "top_k: k=" + std::to_string(k) + " exceeds " + std::to_string(scores.size()) + " channels");
    std::vector<std::uint32_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0u);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::uint32_t a, std::uint32_t b) {
                          if (scores.values[a] != scores.values[b]) {
                              return scores.values[a] > scores.values[b];
                          }
                          return a < b;
                      });
    order.resize(k);
    std::sort(order.begin(), order.end());
    return SalientSet{std::move(order)};
}

}  // namespace meswitch
