#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "meswitch/numerics.hpp"
#include "meswitch/quant.hpp"
#include "meswitch/salient.hpp"
#include "meswitch/svd.hpp"

namespace meswitch {

enum class SalientMetric { reconstruction, magnitude, wanda, random };

inline std::string_view metric_name(SalientMetric m) {
    switch (m) {
        case SalientMetric::reconstruction: return "reconstruction";
        case SalientMetric::magnitude: return "magnitude";
        case SalientMetric::wanda: return "wanda";
        case SalientMetric::random: return "random";
    }
    return "unknown";
}

inline SalientMetric parse_metric(std::string_view name) {
    for (auto m : {SalientMetric::reconstruction, SalientMetric::magnitude, SalientMetric::wanda,
                   SalientMetric::random}) {
        if (metric_name(m) == name) {
            return m;
        }
    }
    fail(ErrorKind::invalid_argument, "unknown salient metric '" + std::string(name) + "'");
}

struct DistillConfig {
    int epochs = 1;
    double lr = 1e-5;
    std::size_t batch = 4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.0;
    StepGradientRule rule = StepGradientRule::lsq;
};

struct CompressionConfig {
    int bits = 2;
    std::size_t salient_k = 8;
    SalientMetric metric = SalientMetric::reconstruction;
    std::uint64_t random_seed = 0;  // only used by SalientMetric::random
    DistillConfig distill;
};

/// One layer's compressed delta: packed low-bit codes for every row (zero
/// codes in salient rows), per-column step sizes, and the salient rows in
/// binary16.
struct CompressedDelta {
    std::size_t rows = 0;
    std::size_t cols = 0;
    int bits = 2;
    SalientSet salient;
    std::vector<std::uint16_t> salient_rows;  // k x cols, row-major
    StepSizes steps;
    PackedCodes packed;

    QuantConfig quant_config() const { return QuantConfig{bits}; }
    std::size_t k() const noexcept { return salient.k(); }

    /// The code stored in salient rows. Sign quantization has no zero code,
    /// so b = 1 keeps +1 there; readers mask salient rows out regardless.
    int salient_fill_code() const { return bits == 1 ? 1 : 0; }

    void validate() const {
        quant_config().validate();
        require(steps.size() == cols, ErrorKind::dimension_mismatch, "CompressedDelta: step count mismatch");
        require(salient_rows.size() == salient.k() * cols, ErrorKind::dimension_mismatch,
                "CompressedDelta: salient row storage mismatch");
        require(packed.rows == rows && packed.cols == cols && packed.bits == bits, ErrorKind::dimension_mismatch,
                "CompressedDelta: packed code shape mismatch");
        check_packed_length(packed);
        for (std::size_t i = 0; i < salient.indices.size(); ++i) {
            require(salient.indices[i] < rows, ErrorKind::out_of_range, "CompressedDelta: salient index out of range");
            require(i == 0 || salient.indices[i - 1] < salient.indices[i], ErrorKind::invalid_argument,
                    "CompressedDelta: salient indices must be strictly ascending");
        }
        for (float s : steps.values) {
            require(s > 0.0f && std::isfinite(s), ErrorKind::invalid_argument,
                    "CompressedDelta: non-positive step size");
        }
    }

    /// Dense reconstruction: salient rows from binary16, the rest q_ij * s_j.
    DenseMatrix reconstruct() const {
        DenseMatrix out = dequantize(unpack_codes(packed), steps, quant_config());
        for (std::size_t r = 0; r < salient.k(); ++r) {
            auto row = out.row(salient.indices[r]);
            for (std::size_t j = 0; j < cols; ++j) {
                row[j] = half_bits_to_float(salient_rows[r * cols + j]);
            }
        }
        return out;
    }

    friend bool operator==(const CompressedDelta&, const CompressedDelta&) = default;
};

/// Delta = W_FT - W.
inline DenseMatrix extract_delta(const DenseMatrix& finetuned, const DenseMatrix& base) {
    require(finetuned.same_shape(base), ErrorKind::dimension_mismatch,
            "extract_delta: fine-tuned " + shape_string(finetuned) + " vs base " + shape_string(base));
    return subtract(finetuned, base);
}

/// sum_i E_i * sum_j (D_ij - approx_ij)^2
inline double weighted_reconstruction_error(const DenseMatrix& delta, const DenseMatrix& approx,
                                            const ActivationStats& stats) {
    const auto s = score_reconstruction(delta, approx, stats);
    double total = 0.0;
    for (double v : s.values) {
        total += v;
    }
    return total;
}

inline ChannelScore score_channels(const DenseMatrix& delta, const DenseMatrix& approx,
                                   const ActivationStats& stats, SalientMetric metric, std::uint64_t seed) {
    switch (metric) {
        case SalientMetric::reconstruction: return score_reconstruction(delta, approx, stats);
        case SalientMetric::magnitude: return score_magnitude(delta);
        case SalientMetric::wanda: return score_wanda(delta, stats);
        case SalientMetric::random: return score_random(delta.rows(), seed);
    }
    fail(ErrorKind::invalid_argument, "score_channels: unknown metric");
}

/// Re-derive the non-salient codes of `cd` from the full-precision delta at
/// the current step sizes. Salient rows keep their fill code.
inline void requantize(CompressedDelta& cd, const DenseMatrix& delta) {
    require(delta.rows() == cd.rows && delta.cols() == cd.cols, ErrorKind::dimension_mismatch,
            "requantize: delta " + shape_string(delta) + " vs compressed " + std::to_string(cd.rows) + "x" +
                std::to_string(cd.cols));
    const QuantConfig qc = cd.quant_config();
    CodeMatrix q = quantize_codes(delta, cd.steps, qc);
    const auto fill = static_cast<std::int8_t>(cd.salient_fill_code());
    for (auto i : cd.salient.indices) {
        for (std::size_t j = 0; j < cd.cols; ++j) {
            q(i, j) = fill;
        }
    }
    cd.packed = pack_codes(q, qc);
}

/// Mixed-precision compression of one delta matrix:
///  1. step sizes on the full delta, quantize every row;
///  2. score input channels against that quantization;
///  3. keep the top-k channels in binary16;
///  4. re-initialize step sizes from the remaining rows and re-quantize them.
inline CompressedDelta compress_layer(const DenseMatrix& delta, const ActivationStats& stats,
                                      const CompressionConfig& cfg, std::vector<std::string>* warnings = nullptr) {
    const QuantConfig qc{cfg.bits};
    qc.validate();
    require(stats.size() == delta.rows(), ErrorKind::dimension_mismatch,
            "compress_layer: " + std::to_string(stats.size()) + " activation energies for " +
                std::to_string(delta.rows()) + " input channels");
    require(cfg.salient_k <= delta.rows(), ErrorKind::invalid_argument,
            "compress_layer: salient_k=" + std::to_string(cfg.salient_k) + " exceeds " +
                std::to_string(delta.rows()) + " input channels");

    const StepSizes initial = init_step_sizes(delta, qc);
    const DenseMatrix first_pass = dequantize(quantize_codes(delta, initial, qc), initial, qc);
    const ChannelScore scores = score_channels(delta, first_pass, stats, cfg.metric, cfg.random_seed);

    CompressedDelta cd;
    cd.rows = delta.rows();
    cd.cols = delta.cols();
    cd.bits = cfg.bits;
    cd.salient = top_k(scores, cfg.salient_k);
    const auto mask = cd.salient.complement_mask(delta.rows());
    cd.steps = init_step_sizes(delta, qc, mask, warnings);

    cd.salient_rows.reserve(cd.salient.k() * cd.cols);
    for (auto i : cd.salient.indices) {
        for (float v : delta.row(i)) {
            cd.salient_rows.push_back(float_to_half_bits(v));
        }
    }
    requantize(cd, delta);
    return cd;
}

// ---------------------------------------------------------------------------
// low-rank baseline

struct LowRankDelta {
    DenseMatrix a;  // m x r
    DenseMatrix b;  // r x n

    std::size_t rank() const noexcept { return a.cols(); }
    DenseMatrix reconstruct() const { return matmul(a, b); }

    /// Storage with both factors in binary16.
    std::size_t storage_bytes() const { return 2 * rank() * (a.rows() + b.cols()); }
};

/// Keep the top-r singular triples: A = U_r sqrt(S_r), B = sqrt(S_r) V_r.
inline LowRankDelta lora_truncate(const DenseMatrix& delta, std::size_t rank) {
    const std::size_t full = std::min(delta.rows(), delta.cols());
    require(rank >= 1 && rank <= full, ErrorKind::invalid_argument,
            "lora_truncate: rank " + std::to_string(rank) + " outside [1, " + std::to_string(full) + "]");
    const SvdResult f = svd(delta);
    LowRankDelta out{DenseMatrix(delta.rows(), rank), DenseMatrix(rank, delta.cols())};
    for (std::size_t r = 0; r < rank; ++r) {
        const double root = std::sqrt(f.s[r]);
        for (std::size_t i = 0; i < delta.rows(); ++i) {
            out.a(i, r) = static_cast<float>(f.u(i, r) * root);
        }
        for (std::size_t j = 0; j < delta.cols(); ++j) {
            out.b(r, j) = static_cast<float>(root * f.v(r, j));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// input-channel rescaling baseline

struct RescaledDelta {
    CompressedDelta delta;        // codes and steps of the rescaled matrix, k = 0
    std::vector<float> row_scale;  // g_i; reconstruction divides row i by g_i
    double alpha = 0.0;
    double weighted_error = 0.0;

    DenseMatrix reconstruct() const {
        DenseMatrix out = delta.reconstruct();
        for (std::size_t i = 0; i < out.rows(); ++i) {
            for (float& v : out.row(i)) {
                v /= row_scale[i];
            }
        }
        return out;
    }
};

/// g_i = sqrt(E_i)^alpha normalized to mean 1 over channels with E_i > 0.
inline std::vector<float> rescale_factors(const ActivationStats& stats, double alpha) {
    std::vector<double> g(stats.size(), 1.0);
    double sum = 0.0;
    std::size_t live = 0;
    for (std::size_t i = 0; i < g.size(); ++i) {
        if (stats.energy[i] > 0.0f) {
            g[i] = std::pow(std::sqrt(static_cast<double>(stats.energy[i])), alpha);
            sum += g[i];
            ++live;
        }
    }
    std::vector<float> out(g.size(), 1.0f);
    if (live == 0) {
        return out;
    }
    const double mean = sum / static_cast<double>(live);
    for (std::size_t i = 0; i < g.size(); ++i) {
        if (stats.energy[i] > 0.0f) {
            out[i] = static_cast<float>(g[i] / mean);
        }
    }
    return out;
}

inline RescaledDelta rescale_quantize_with(const DenseMatrix& delta, const ActivationStats& stats, int bits,
                                           double alpha) {
    RescaledDelta out;
    out.alpha = alpha;
    out.row_scale = rescale_factors(stats, alpha);
    DenseMatrix scaled = delta;
    for (std::size_t i = 0; i < scaled.rows(); ++i) {
        for (float& v : scaled.row(i)) {
            v *= out.row_scale[i];
        }
    }
    CompressionConfig cfg;
    cfg.bits = bits;
    cfg.salient_k = 0;
    out.delta = compress_layer(scaled, stats, cfg);
    out.weighted_error = weighted_reconstruction_error(delta, out.reconstruct(), stats);
    return out;
}

/// Grid search over the rescaling exponent; keeps the alpha with the lowest
/// activation-weighted error (first wins on ties).
inline RescaledDelta rescale_quantize(const DenseMatrix& delta, const ActivationStats& stats, int bits,
                                      const std::vector<double>& grid = {0.0, 0.25, 0.5, 0.75, 1.0}) {
    require(stats.size() == delta.rows(), ErrorKind::dimension_mismatch,
            "rescale_quantize: activation stats length mismatch");
    std::vector<double> alphas = grid;
    if (std::find(alphas.begin(), alphas.end(), 0.0) == alphas.end()) {
        alphas.insert(alphas.begin(), 0.0);
    }
    std::optional<RescaledDelta> best;
    for (double alpha : alphas) {
        RescaledDelta cand = rescale_quantize_with(delta, stats, bits, alpha);
        if (!best || cand.weighted_error < best->weighted_error) {
            best = std::move(cand);
        }
    }
    return std::move(*best);
}

}  // namespace meswitch
