#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "meswitch/binary_io.hpp"
#include "meswitch/delta_kernel.hpp"
#include "meswitch/numerics.hpp"

namespace meswitch {

using Token = std::uint32_t;

struct ToyLMConfig {
    std::size_t vocab = 256;
    std::size_t width = 64;
    std::size_t depth = 4;
    /// Output channels [width - dead_channels, width) of every layer but the
    /// last are hard-wired to zero, so those channels never carry activation
    /// into the next layer.
    std::size_t dead_channels = 0;
    std::uint64_t seed = 0;
};

/// Byte-level toy language model without attention:
///   h0 = E[token] + pos(t);  h_l = ReLU(h_{l-1} W_l);  logits = h_L H
struct ToyLM {
    DenseMatrix embedding;            // vocab x width
    std::vector<DenseMatrix> layers;  // width x width each
    DenseMatrix head;                 // width x vocab

    std::size_t vocab() const noexcept { return embedding.rows(); }
    std::size_t width() const noexcept { return embedding.cols(); }
    std::size_t depth() const noexcept { return layers.size(); }

    void validate() const {
        require(vocab() > 0 && width() > 0, ErrorKind::invalid_argument, "ToyLM: empty dimensions");
        for (const auto& w : layers) {
            require(w.rows() == width() && w.cols() == width(), ErrorKind::dimension_mismatch,
                    "ToyLM: layer shape " + shape_string(w) + " does not match width " + std::to_string(width()));
        }
        require(head.rows() == width() && head.cols() == vocab(), ErrorKind::dimension_mismatch,
                "ToyLM: head shape " + shape_string(head));
    }

    friend bool operator==(const ToyLM&, const ToyLM&) = default;
};

inline ToyLM make_toy_model(const ToyLMConfig& cfg) {
    require(cfg.dead_channels < cfg.width, ErrorKind::invalid_argument, "ToyLM: too many dead channels");
    Rng rng(cfg.seed);
    ToyLM m;
    m.embedding = gaussian_matrix(cfg.vocab, cfg.width, 1.0, rng);
    const double layer_sigma = std::sqrt(2.0 / static_cast<double>(cfg.width));
    for (std::size_t l = 0; l < cfg.depth; ++l) {
        DenseMatrix w = gaussian_matrix(cfg.width, cfg.width, layer_sigma, rng);
        if (l + 1 < cfg.depth) {
            for (std::size_t i = 0; i < cfg.width; ++i) {
                for (std::size_t j = cfg.width - cfg.dead_channels; j < cfg.width; ++j) {
                    w(i, j) = 0.0f;
                }
            }
        }
        m.layers.push_back(std::move(w));
    }
    m.head = gaussian_matrix(cfg.width, cfg.vocab, 1.0 / std::sqrt(static_cast<double>(cfg.width)), rng);
    return m;
}

/// Fixed sinusoidal position signal added to the embedding.
inline RowVector positional_bias(std::size_t position, std::size_t width) {
    RowVector pe(width);
    for (std::size_t i = 0; i < width; i += 2) {
        const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(width));
        const double angle = static_cast<double>(position) * freq;
        pe[i] = static_cast<float>(std::sin(angle));
        if (i + 1 < width) {
            pe[i + 1] = static_cast<float>(std::cos(angle));
        }
    }
    return pe;
}

inline std::vector<Token> tokenize(std::string_view text) {
    std::vector<Token> out;
    out.reserve(text.size());
    for (char c : text) {
        out.push_back(static_cast<unsigned char>(c));
    }
    return out;
}

inline std::string detokenize(std::span<const Token> tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (Token t : tokens) {
        require(t < 256, ErrorKind::out_of_range, "detokenize: token " + std::to_string(t) + " is not a byte");
        out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
    }
    return out;
}

// ---------------------------------------------------------------------------
// model files

inline constexpr char kModelMagic[4] = {'T', 'O', 'Y', 'L'};
inline constexpr std::uint16_t kModelVersion = 1;

inline void write_tensors(ByteWriter& w, const ToyLM& m) {
    w.f32s(m.embedding.data());
    for (const auto& l : m.layers) {
        w.f32s(l.data());
    }
    w.f32s(m.head.data());
}

inline std::vector<std::uint8_t> serialize_model(const ToyLM& m) {
    m.validate();
    ByteWriter w;
    w.bytes(std::span(reinterpret_cast<const std::uint8_t*>(kModelMagic), 4));
    w.u16(kModelVersion);
    w.u32(static_cast<std::uint32_t>(m.vocab()));
    w.u32(static_cast<std::uint32_t>(m.width()));
    w.u32(static_cast<std::uint32_t>(m.depth()));
    write_tensors(w, m);
    return w.take();
}

inline ToyLM deserialize_model(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes, "model");
    const auto magic = r.bytes(4);
    if (!std::equal(magic.begin(), magic.end(), reinterpret_cast<const std::uint8_t*>(kModelMagic))) {
        fail(ErrorKind::bad_magic, "model: bad magic");
    }
    const auto version = r.u16();
    if (version != kModelVersion) {
        fail(ErrorKind::bad_version, "model: unsupported version " + std::to_string(version));
    }
    const std::size_t vocab = r.u32();
    const std::size_t width = r.u32();
    const std::size_t depth = r.u32();
    ToyLM m;
    m.embedding = DenseMatrix(vocab, width, r.f32s(vocab * width));
    for (std::size_t l = 0; l < depth; ++l) {
        m.layers.emplace_back(width, width, r.f32s(width * width));
    }
    m.head = DenseMatrix(width, vocab, r.f32s(width * vocab));
    if (r.remaining() != 0) {
        fail(ErrorKind::invalid_argument, "model: trailing bytes");
    }
    m.validate();
    return m;
}

inline void save_model(const ToyLM& m, const std::filesystem::path& path) {
    write_file_bytes(path, serialize_model(m));
}

inline ToyLM load_model(const std::filesystem::path& path) { return deserialize_model(read_file_bytes(path)); }

/// FNV-1a digest of the FP32 tensor bytes in declaration order.
inline std::string model_digest(const ToyLM& m) {
    ByteWriter w;
    write_tensors(w, m);
    return hex64(fnv1a64(w.buffer()));
}

// ---------------------------------------------------------------------------
// forward passes

/// Per-layer delta providers, plus optional embedding and head deltas.
struct DeltaSet {
    std::vector<DeltaProvider> layers;
    std::optional<DeltaProvider> embedding;
    std::optional<DeltaProvider> head;

    static DeltaSet zeros(const ToyLM& base) {
        DeltaSet d;
        for (const auto& w : base.layers) {
            d.layers.push_back(DeltaProvider::zero(w.rows(), w.cols()));
        }
        return d;
    }

    /// Exact deltas between a fine-tuned model and its base.
    static DeltaSet exact(const ToyLM& base, const ToyLM& finetuned) {
        require(base.depth() == finetuned.depth(), ErrorKind::dimension_mismatch, "DeltaSet: depth mismatch");
        DeltaSet d;
        for (std::size_t l = 0; l < base.depth(); ++l) {
            d.layers.push_back(DeltaProvider::exact(subtract(finetuned.layers[l], base.layers[l])));
        }
        if (!(finetuned.embedding == base.embedding)) {
            d.embedding = DeltaProvider::exact(subtract(finetuned.embedding, base.embedding));
        }
        if (!(finetuned.head == base.head)) {
            d.head = DeltaProvider::exact(subtract(finetuned.head, base.head));
        }
        return d;
    }
};

inline void check_alignment(const ToyLM& base, const DeltaSet& deltas) {
    require(deltas.layers.size() == base.depth(), ErrorKind::dimension_mismatch,
            "forward_with_delta: " + std::to_string(deltas.layers.size()) + " delta layers for a depth-" +
                std::to_string(base.depth()) + " model");
    for (std::size_t l = 0; l < base.depth(); ++l) {
        require(deltas.layers[l].rows() == base.width() && deltas.layers[l].cols() == base.width(),
                ErrorKind::dimension_mismatch, "forward_with_delta: layer " + std::to_string(l) + " delta shape");
    }
    if (deltas.embedding) {
        require(deltas.embedding->rows() == base.vocab() && deltas.embedding->cols() == base.width(),
                ErrorKind::dimension_mismatch, "forward_with_delta: embedding delta shape");
    }
    if (deltas.head) {
        require(deltas.head->rows() == base.width() && deltas.head->cols() == base.vocab(),
                ErrorKind::dimension_mismatch, "forward_with_delta: head delta shape");
    }
}

inline void check_token(const ToyLM& m, Token t) {
    require(t < m.vocab(), ErrorKind::out_of_range,
            "token " + std::to_string(t) + " outside vocabulary of " + std::to_string(m.vocab()));
}

inline RowVector embed(const ToyLM& m, Token token, std::size_t position, const DeltaSet* deltas = nullptr) {
    check_token(m, token);
    const auto e = m.embedding.row(token);
    RowVector h(e.begin(), e.end());
    if (deltas != nullptr && deltas->embedding) {
        RowVector onehot(m.vocab(), 0.0f);
        onehot[token] = 1.0f;
        const RowVector de = delta_matvec(onehot, *deltas->embedding);
        for (std::size_t i = 0; i < h.size(); ++i) {
            h[i] += de[i];
        }
    }
    const RowVector pe = positional_bias(position, m.width());
    for (std::size_t i = 0; i < h.size(); ++i) {
        h[i] += pe[i];
    }
    return h;
}

inline void relu_inplace(RowVector& v) {
    for (float& x : v) {
        x = x > 0.0f ? x : 0.0f;
    }
}

inline void add_inplace(RowVector& a, const RowVector& b) {
    for (std::size_t i = 0; i < a.size(); ++i) {
        a[i] += b[i];
    }
}

/// Logits for one position.
inline RowVector forward_position(const ToyLM& m, Token token, std::size_t position) {
    RowVector h = embed(m, token, position);
    for (const auto& w : m.layers) {
        h = matvec(h, w);
        relu_inplace(h);
    }
    return matvec(h, m.head);
}

inline RowVector forward_position(const ToyLM& base, const DeltaSet& deltas, Token token, std::size_t position) {
    RowVector h = embed(base, token, position, &deltas);
    for (std::size_t l = 0; l < base.depth(); ++l) {
        RowVector y = matvec(h, base.layers[l]);
        add_inplace(y, delta_matvec(h, deltas.layers[l]));
        relu_inplace(y);
        h = std::move(y);
    }
    RowVector logits = matvec(h, base.head);
    if (deltas.head) {
        add_inplace(logits, delta_matvec(h, *deltas.head));
    }
    return logits;
}

/// T x vocab logits.
inline DenseMatrix forward(const ToyLM& m, std::span<const Token> tokens) {
    require(!tokens.empty(), ErrorKind::invalid_argument, "forward: empty token sequence");
    DenseMatrix logits(tokens.size(), m.vocab());
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        const RowVector z = forward_position(m, tokens[t], t);
        std::copy(z.begin(), z.end(), logits.row(t).begin());
    }
    return logits;
}

/// Forward pass computing every layer as x W + x Delta~.
inline DenseMatrix forward_with_delta(const ToyLM& base, const DeltaSet& deltas, std::span<const Token> tokens) {
    require(!tokens.empty(), ErrorKind::invalid_argument, "forward_with_delta: empty token sequence");
    check_alignment(base, deltas);
    DenseMatrix logits(tokens.size(), base.vocab());
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        const RowVector z = forward_position(base, deltas, tokens[t], t);
        std::copy(z.begin(), z.end(), logits.row(t).begin());
    }
    return logits;
}

/// W + dense(Delta~) for every provided delta.
inline ToyLM merge(const ToyLM& base, const DeltaSet& deltas) {
    check_alignment(base, deltas);
    ToyLM m = base;
    for (std::size_t l = 0; l < base.depth(); ++l) {
        if (deltas.layers[l].kind() != DeltaProvider::Kind::zero) {
            m.layers[l] = add(base.layers[l], deltas.layers[l].dense());
        }
    }
    if (deltas.embedding) {
        m.embedding = add(base.embedding, deltas.embedding->dense());
    }
    if (deltas.head) {
        m.head = add(base.head, deltas.head->dense());
    }
    return m;
}

inline Token argmax_token(std::span<const float> logits) {
    std::size_t best = 0;
    for (std::size_t v = 1; v < logits.size(); ++v) {
        if (logits[v] > logits[best]) {
            best = v;
        }
    }
    return static_cast<Token>(best);
}

template <typename LogitsAt>
std::vector<Token> greedy_decode_with(std::span<const Token> prompt, std::size_t max_new, LogitsAt&& logits_at) {
    std::vector<Token> seq(prompt.begin(), prompt.end());
    if (max_new == 0) {
        return seq;
    }
    require(!seq.empty(), ErrorKind::invalid_argument, "greedy_decode: empty prompt");
    for (std::size_t step = 0; step < max_new; ++step) {
        const RowVector z = logits_at(seq.back(), seq.size() - 1);
        seq.push_back(argmax_token(z));
    }
    return seq;
}

/// Greedy decoding; returns prompt followed by max_new generated tokens.
inline std::vector<Token> greedy_decode(const ToyLM& m, std::span<const Token> prompt, std::size_t max_new) {
    return greedy_decode_with(prompt, max_new,
                              [&](Token t, std::size_t pos) { return forward_position(m, t, pos); });
}

inline std::vector<Token> greedy_decode(const ToyLM& base, const DeltaSet& deltas, std::span<const Token> prompt,
                                        std::size_t max_new) {
    check_alignment(base, deltas);
    return greedy_decode_with(prompt, max_new,
                              [&](Token t, std::size_t pos) { return forward_position(base, deltas, t, pos); });
}

// ---------------------------------------------------------------------------
// synthetic experts

struct ExpertSpec {
    std::string domain;
    std::uint64_t seed = 0;
    double dense_sigma = 0.01;
    std::size_t planted_rows = 4;
    double planted_amplitude = 0.5;
    std::size_t misleading_rows = 0;
};

struct SyntheticExpert {
    ToyLM model;
    std::string domain;
    std::vector<std::vector<std::uint32_t>> planted;     // per layer, ascending
    std::vector<std::vector<std::uint32_t>> misleading;  // per layer, ascending
};

inline std::vector<bool> zero_columns(const DenseMatrix& w) {
    std::vector<bool> zero(w.cols(), true);
    for (std::size_t i = 0; i < w.rows(); ++i) {
        for (std::size_t j = 0; j < w.cols(); ++j) {
            if (w(i, j) != 0.0f) {
                zero[j] = false;
            }
        }
    }
    return zero;
}

/// Input channels of `layer` that the base model can never activate.
inline std::vector<std::uint32_t> dead_input_channels(const ToyLM& base, std::size_t layer) {
    std::vector<std::uint32_t> out;
    if (layer == 0) {
        return out;
    }
    const auto zero = zero_columns(base.layers[layer - 1]);
    for (std::size_t j = 0; j < zero.size(); ++j) {
        if (zero[j]) {
            out.push_back(static_cast<std::uint32_t>(j));
        }
    }
    return out;
}

/// Stand-in for fine-tuning: W_FT = W + Delta with dense Gaussian noise,
/// `planted_rows` amplified rows on live input channels, and `misleading_rows`
/// amplified rows on input channels the base never activates. Dead output
/// channels of the base stay dead.
inline SyntheticExpert synthesize_expert(const ToyLM& base, const ExpertSpec& recipe) {
    base.validate();
    const std::size_t d = base.width();
    require(recipe.planted_rows + recipe.misleading_rows <= d, ErrorKind::invalid_argument,
            "synthesize_expert: planted + misleading rows exceed width");
    Rng rng(recipe.seed);
    SyntheticExpert out{base, recipe.domain, {}, {}};
    bool hosted_misleading = recipe.misleading_rows == 0;

    for (std::size_t l = 0; l < base.depth(); ++l) {
        DenseMatrix delta = gaussian_matrix(d, d, recipe.dense_sigma, rng);
        const auto dead_in = dead_input_channels(base, l);
        std::vector<bool> is_dead_in(d, false);
        for (auto c : dead_in) {
            is_dead_in[c] = true;
        }
        std::vector<std::uint32_t> live;
        for (std::size_t i = 0; i < d; ++i) {
            if (!is_dead_in[i]) {
                live.push_back(static_cast<std::uint32_t>(i));
            }
        }
        require(recipe.planted_rows <= live.size(), ErrorKind::invalid_argument,
                "synthesize_expert: not enough live channels for planted rows");

        auto pick = [&](const std::vector<std::uint32_t>& pool, std::size_t k) {
            std::vector<std::uint32_t> chosen;
            for (auto idx : rng.sample_without_replacement(pool.size(), k)) {
                chosen.push_back(pool[idx]);
            }
            std::sort(chosen.begin(), chosen.end());
            return chosen;
        };
        auto amplify = [&](const std::vector<std::uint32_t>& rows) {
            for (auto i : rows) {
                for (std::size_t j = 0; j < d; ++j) {
                    delta(i, j) += static_cast<float>(recipe.planted_amplitude * rng.normal());
                }
            }
        };

        auto planted = pick(live, recipe.planted_rows);
        amplify(planted);
        std::vector<std::uint32_t> misleading;
        if (recipe.misleading_rows > 0 && dead_in.size() >= recipe.misleading_rows) {
            misleading = pick(dead_in, recipe.misleading_rows);
            amplify(misleading);
            hosted_misleading = true;
        }

        const auto dead_out = zero_columns(base.layers[l]);
        for (std::size_t j = 0; j < d; ++j) {
            if (dead_out[j]) {
                for (std::size_t i = 0; i < d; ++i) {
                    delta(i, j) = 0.0f;
                }
            }
        }
        out.model.layers[l] = add(base.layers[l], delta);
        out.planted.push_back(std::move(planted));
        out.misleading.push_back(std::move(misleading));
    }
    require(hosted_misleading, ErrorKind::invalid_argument,
            "synthesize_expert: misleading rows need a base with at least that many dead channels");
    return out;
}

}  // namespace meswitch
