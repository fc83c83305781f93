#pragma once

#include <cstddef>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "meswitch/salient.hpp"
#include "meswitch/toylm.hpp"

namespace meswitch {

using TokenSequence = std::vector<Token>;

/// Energy of the inputs to every layer, accumulated in FP64 over every
/// position of every calibration sequence.
inline std::vector<ActivationStats> collect_all_activation_stats(const ToyLM& model,
                                                                 std::span<const TokenSequence> calib) {
    require(!calib.empty(), ErrorKind::invalid_argument, "collect_activation_stats: empty calibration set");
    const std::size_t d = model.width();
    std::vector<std::vector<double>> acc(model.depth(), std::vector<double>(d, 0.0));
    std::size_t samples = 0;
    for (const auto& seq : calib) {
        for (std::size_t t = 0; t < seq.size(); ++t) {
            RowVector h = embed(model, seq[t], t);
            for (std::size_t l = 0; l < model.depth(); ++l) {
                for (std::size_t i = 0; i < d; ++i) {
                    acc[l][i] += static_cast<double>(h[i]) * h[i];
                }
                h = matvec(h, model.layers[l]);
                relu_inplace(h);
            }
            ++samples;
        }
    }
    require(samples > 0, ErrorKind::invalid_argument, "collect_activation_stats: calibration has no tokens");
    std::vector<ActivationStats> out(model.depth());
    for (std::size_t l = 0; l < model.depth(); ++l) {
        out[l].energy.assign(acc[l].begin(), acc[l].end());
        out[l].sample_count = samples;
    }
    return out;
}

inline ActivationStats collect_activation_stats(const ToyLM& model, std::size_t layer,
                                                std::span<const TokenSequence> calib) {
    require(layer < model.depth(), ErrorKind::out_of_range, "collect_activation_stats: layer out of range");
    return collect_all_activation_stats(model, calib)[layer];
}

/// Calibration JSONL: one object per line with a "text" (or "query") field.
inline std::vector<TokenSequence> load_calibration(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        fail(ErrorKind::io, "cannot open calibration file " + path.string());
    }
    std::vector<TokenSequence> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception&) {
            fail(ErrorKind::invalid_argument, path.string() + ":" + std::to_string(lineno) + ": malformed JSON");
        }
        std::string text;
        if (j.contains("text")) {
            text = j.at("text").get<std::string>();
        } else if (j.contains("query")) {
            text = j.at("query").get<std::string>();
        } else {
            fail(ErrorKind::invalid_argument, path.string() + ":" + std::to_string(lineno) + ": no text field");
        }
        if (!text.empty()) {
            out.push_back(tokenize(text));
        }
    }
    require(!out.empty(), ErrorKind::invalid_argument, "calibration file " + path.string() + " is empty");
    return out;
}

inline void save_calibration(std::span<const std::string> texts, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        fail(ErrorKind::io, "cannot write " + path.string());
    }
    for (const auto& t : texts) {
        out << nlohmann::json{{"text", t}}.dump() << '\n';
    }
}

}  // namespace meswitch
