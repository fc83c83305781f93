#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "meswitch/artifact.hpp"
#include "meswitch/calibration.hpp"
#include "meswitch/distill.hpp"

namespace meswitch {

struct CompressionReport {
    ExpertArtifact artifact;
    std::optional<DistillResult> distill;
    std::vector<std::string> warnings;
};

struct CompressExpertOptions {
    CompressionConfig config;
    bool distill = true;
    std::string model_id;
    std::string domain;
};

/// Delta extraction, activation statistics on the fine-tuned model, per-layer
/// mixed-precision compression, and (optionally) step-size distillation.
inline CompressionReport compress_expert(const ToyLM& base, const ToyLM& finetuned,
                                         std::span<const TokenSequence> calib, const CompressExpertOptions& opt) {
    base.validate();
    finetuned.validate();
    require(base.depth() == finetuned.depth() && base.width() == finetuned.width() &&
                base.vocab() == finetuned.vocab(),
            ErrorKind::dimension_mismatch, "compress_expert: base and fine-tuned architectures differ");

    CompressionReport report;
    const auto stats = collect_all_activation_stats(finetuned, calib);
    std::vector<LayerQuantState> layers;
    for (std::size_t l = 0; l < base.depth(); ++l) {
        DenseMatrix delta = extract_delta(finetuned.layers[l], base.layers[l]);
        std::vector<std::string> warnings;
        CompressedDelta cd = compress_layer(delta, stats[l], opt.config, &warnings);
        for (auto& w : warnings) {
            report.warnings.push_back("layer " + std::to_string(l) + ": " + w);
        }
        layers.push_back(LayerQuantState{std::move(delta), std::move(cd)});
    }
    if (opt.distill && opt.config.distill.epochs > 0) {
        report.distill = distill_step_sizes(base, layers, calib, opt.config.distill);
    }

    report.artifact.manifest = ArtifactManifest{opt.model_id, opt.domain, model_digest(base), layers.size()};
    for (auto& l : layers) {
        report.artifact.layers.push_back(std::move(l.compressed));
    }
    return report;
}

inline DeltaSet providers_for(const ExpertArtifact& artifact) {
    DeltaSet d;
    for (const auto& l : artifact.layers) {
        d.layers.push_back(DeltaProvider::compressed(l));
    }
    return d;
}

/// Mean squared logit error between two forward paths over `seqs`.
template <typename ForwardA, typename ForwardB>
double logit_mse(std::span<const TokenSequence> seqs, ForwardA&& fa, ForwardB&& fb) {
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& s : seqs) {
        const DenseMatrix a = fa(s);
        const DenseMatrix b = fb(s);
        sum += squared_distance(a.data(), b.data());
        count += a.size();
    }
    return count == 0 ? 0.0 : sum / static_cast<double>(count);
}

inline double logit_mse(const ToyLM& reference, const ToyLM& base, const DeltaSet& deltas,
                        std::span<const TokenSequence> seqs) {
    return logit_mse(
        seqs, [&](const TokenSequence& s) { return forward(reference, s); },
        [&](const TokenSequence& s) { return forward_with_delta(base, deltas, s); });
}

}  // namespace meswitch
