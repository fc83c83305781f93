#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "meswitch/calibration.hpp"
#include "meswitch/compress.hpp"
#include "meswitch/toylm.hpp"

namespace meswitch {

/// A compressed layer together with the frozen full-precision delta its
/// codes are derived from. Only the step sizes are trainable.
struct LayerQuantState {
    DenseMatrix delta;
    CompressedDelta compressed;
};

struct StepGradients {
    std::vector<std::vector<double>> per_layer;  // one vector per layer, length = cols
    double loss = 0.0;                           // mean squared logit error over the batch
};

struct DistillResult {
    std::vector<double> loss_history;  // per optimizer step, batch loss before the update
    double initial_loss = 0.0;         // full calibration set, before training
    double final_loss = 0.0;           // full calibration set, after training
    std::size_t steps = 0;
};

namespace detail {

inline std::vector<DenseMatrix> effective_layers(const ToyLM& base, std::span<const LayerQuantState> layers) {
    require(layers.size() == base.depth(), ErrorKind::dimension_mismatch,
            "distill: " + std::to_string(layers.size()) + " compressed layers for a depth-" +
                std::to_string(base.depth()) + " model");
    std::vector<DenseMatrix> out;
    out.reserve(layers.size());
    for (std::size_t l = 0; l < layers.size(); ++l) {
        require(layers[l].delta.same_shape(base.layers[l]), ErrorKind::dimension_mismatch,
                "distill: layer " + std::to_string(l) + " delta shape");
        out.push_back(add(base.layers[l], layers[l].compressed.reconstruct()));
    }
    return out;
}

inline ToyLM with_layers(const ToyLM& base, std::vector<DenseMatrix> layers) {
    ToyLM m;
    m.embedding = base.embedding;
    m.layers = std::move(layers);
    m.head = base.head;
    return m;
}

}  // namespace detail

/// The fine-tuned model's logits for each calibration sequence.
inline std::vector<DenseMatrix> teacher_logits(const ToyLM& base, std::span<const LayerQuantState> layers,
                                               std::span<const TokenSequence> seqs) {
    std::vector<DenseMatrix> layers_ft;
    for (std::size_t l = 0; l < layers.size(); ++l) {
        layers_ft.push_back(add(base.layers[l], layers[l].delta));
    }
    const ToyLM teacher = detail::with_layers(base, std::move(layers_ft));
    std::vector<DenseMatrix> out;
    out.reserve(seqs.size());
    for (const auto& s : seqs) {
        out.push_back(forward(teacher, s));
    }
    return out;
}

/// Mean squared logit error of the compressed model against `targets`.
inline double calibration_loss(const ToyLM& base, std::span<const LayerQuantState> layers,
                               std::span<const TokenSequence> seqs, std::span<const DenseMatrix> targets) {
    require(seqs.size() == targets.size(), ErrorKind::dimension_mismatch, "calibration_loss: target count");
    const ToyLM student = detail::with_layers(base, detail::effective_layers(base, layers));
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t s = 0; s < seqs.size(); ++s) {
        const DenseMatrix z = forward(student, seqs[s]);
        require(z.same_shape(targets[s]), ErrorKind::dimension_mismatch, "calibration_loss: target shape");
        sum += squared_distance(z.data(), targets[s].data());
        count += z.size();
    }
    return count == 0 ? 0.0 : sum / static_cast<double>(count);
}

/// Reverse-mode gradient of the mean squared logit error w.r.t. every
/// layer's step sizes. Codes are re-derived from the frozen delta at the
/// current steps; the quantizer contributes through `rule`.
inline StepGradients backward_step_sizes(const ToyLM& base, std::span<const LayerQuantState> layers,
                                         std::span<const TokenSequence> batch, std::span<const DenseMatrix> targets,
                                         StepGradientRule rule = StepGradientRule::lsq) {
    require(batch.size() == targets.size(), ErrorKind::dimension_mismatch,
            "backward_step_sizes: " + std::to_string(batch.size()) + " sequences but " +
                std::to_string(targets.size()) + " targets");
    const std::vector<DenseMatrix> weights = detail::effective_layers(base, layers);
    const std::size_t d = base.width();
    const std::size_t vocab = base.vocab();
    const std::size_t depth = base.depth();

    std::size_t tokens = 0;
    for (std::size_t s = 0; s < batch.size(); ++s) {
        require(targets[s].rows() == batch[s].size() && targets[s].cols() == vocab, ErrorKind::dimension_mismatch,
                "backward_step_sizes: target shape for sequence " + std::to_string(s));
        tokens += batch[s].size();
    }
    require(tokens > 0, ErrorKind::invalid_argument, "backward_step_sizes: empty batch");
    const double norm = 1.0 / (static_cast<double>(tokens) * static_cast<double>(vocab));

    std::vector<std::vector<double>> upstream(depth, std::vector<double>(d * d, 0.0));
    double loss = 0.0;

    std::vector<RowVector> inputs(depth);
    std::vector<RowVector> pre(depth);
    std::vector<double> grad_h(d);
    std::vector<double> grad_pre(d);

    for (std::size_t s = 0; s < batch.size(); ++s) {
        for (std::size_t t = 0; t < batch[s].size(); ++t) {
            RowVector h = embed(base, batch[s][t], t);
            for (std::size_t l = 0; l < depth; ++l) {
                inputs[l] = h;
                pre[l] = matvec(h, weights[l]);
                h = pre[l];
                relu_inplace(h);
            }
            const RowVector z = matvec(h, base.head);
            const auto target = targets[s].row(t);

            // dL/dz = 2 (z - target) * norm, then back through the head
            std::fill(grad_h.begin(), grad_h.end(), 0.0);
            for (std::size_t v = 0; v < vocab; ++v) {
                const double diff = static_cast<double>(z[v]) - target[v];
                loss += diff * diff;
                const double gz = 2.0 * diff * norm;
                if (gz == 0.0) {
                    continue;
                }
                for (std::size_t i = 0; i < d; ++i) {
                    grad_h[i] += gz * base.head(i, v);
                }
            }

            for (std::size_t l = depth; l-- > 0;) {
                for (std::size_t j = 0; j < d; ++j) {
                    grad_pre[j] = pre[l][j] > 0.0f ? grad_h[j] : 0.0;
                }
                auto& up = upstream[l];
                const RowVector& x = inputs[l];
                for (std::size_t i = 0; i < d; ++i) {
                    const double xi = x[i];
                    if (xi == 0.0) {
                        continue;
                    }
                    double* row = up.data() + i * d;
                    for (std::size_t j = 0; j < d; ++j) {
                        row[j] += xi * grad_pre[j];
                    }
                }
                if (l == 0) {
                    break;
                }
                for (std::size_t i = 0; i < d; ++i) {
                    const auto wr = weights[l].row(i);
                    double acc = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        acc += grad_pre[j] * wr[j];
                    }
                    grad_h[i] = acc;
                }
            }
        }
    }

    StepGradients out;
    out.loss = loss * norm;
    for (std::size_t l = 0; l < depth; ++l) {
        const auto& cd = layers[l].compressed;
        DenseMatrix up(d, d);
        for (std::size_t k = 0; k < d * d; ++k) {
            up.data()[k] = static_cast<float>(upstream[l][k]);
        }
        const auto mask = cd.salient.complement_mask(cd.rows);
        out.per_layer.push_back(ste_step_gradient(layers[l].delta, cd.steps, cd.quant_config(), up, rule, mask));
    }
    return out;
}

inline constexpr float kStepFloor = 1e-8f;

/// Fit the step sizes of every layer to the fine-tuned model's logits with
/// AdamW over mini-batches of calibration sequences. Deltas, salient rows and
/// the base stay frozen; codes follow the steps.
inline DistillResult distill_step_sizes(const ToyLM& base, std::vector<LayerQuantState>& layers,
                                        std::span<const TokenSequence> calib, const DistillConfig& cfg) {
    require(!calib.empty(), ErrorKind::invalid_argument, "distill_step_sizes: empty calibration set");
    require(cfg.batch > 0, ErrorKind::invalid_argument, "distill_step_sizes: batch size must be positive");
    require(cfg.lr > 0.0, ErrorKind::invalid_argument, "distill_step_sizes: learning rate must be positive");

    const std::vector<DenseMatrix> targets = teacher_logits(base, layers, calib);
    DistillResult result;

    std::vector<double> initial_batch_loss;
    for (std::size_t start = 0; start < calib.size(); start += cfg.batch) {
        const std::size_t n = std::min(cfg.batch, calib.size() - start);
        initial_batch_loss.push_back(
            calibration_loss(base, layers, calib.subspan(start, n), std::span(targets).subspan(start, n)));
    }
    result.initial_loss = calibration_loss(base, layers, calib, targets);

    std::vector<std::vector<double>> m1(layers.size());
    std::vector<std::vector<double>> m2(layers.size());
    for (std::size_t l = 0; l < layers.size(); ++l) {
        m1[l].assign(layers[l].compressed.cols, 0.0);
        m2[l].assign(layers[l].compressed.cols, 0.0);
    }

    std::size_t step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t start = 0, b = 0; start < calib.size(); start += cfg.batch, ++b) {
            const std::size_t n = std::min(cfg.batch, calib.size() - start);
            const StepGradients g = backward_step_sizes(base, layers, calib.subspan(start, n),
                                                        std::span(targets).subspan(start, n), cfg.rule);
            if (!std::isfinite(g.loss) ||
                (initial_batch_loss[b] > 0.0 && g.loss > 10.0 * initial_batch_loss[b])) {
                fail(ErrorKind::divergence, "distill_step_sizes: batch loss " + std::to_string(g.loss) +
                                                " at step " + std::to_string(step) + " exceeds 10x its initial " +
                                                std::to_string(initial_batch_loss[b]));
            }
            result.loss_history.push_back(g.loss);
            ++step;

            const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
            const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
            for (std::size_t l = 0; l < layers.size(); ++l) {
                auto& steps = layers[l].compressed.steps.values;
                for (std::size_t j = 0; j < steps.size(); ++j) {
                    const double grad = g.per_layer[l][j];
                    m1[l][j] = cfg.beta1 * m1[l][j] + (1.0 - cfg.beta1) * grad;
                    m2[l][j] = cfg.beta2 * m2[l][j] + (1.0 - cfg.beta2) * grad * grad;
                    const double mhat = m1[l][j] / bc1;
                    const double vhat = m2[l][j] / bc2;
                    const double current = steps[j];
                    const double update = cfg.lr * (mhat / (std::sqrt(vhat) + cfg.epsilon) + cfg.weight_decay * current);
                    if (update == 0.0) {
                        continue;
                    }
                    auto next = static_cast<float>(current - update);
                    if (!(next >= kStepFloor)) {
                        next = std::min(static_cast<float>(current), kStepFloor);
                    }
                    steps[j] = next;
                }
                requantize(layers[l].compressed, layers[l].delta);
            }
        }
        const double epoch_loss = calibration_loss(base, layers, calib, targets);
        if (result.initial_loss > 0.0 && epoch_loss > 10.0 * result.initial_loss) {
            fail(ErrorKind::divergence, "distill_step_sizes: calibration loss " + std::to_string(epoch_loss) +
                                            " exceeds 10x the initial " + std::to_string(result.initial_loss));
        }
        result.final_loss = epoch_loss;
    }
    if (cfg.epochs <= 0) {
        result.final_loss = result.initial_loss;
    }
    result.steps = step;
    return result;
}

}  // namespace meswitch
