#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "meswitch/numerics.hpp"

namespace meswitch {

/// A routing domain: label, display name, option description, and the keyword pool
/// the synthetic query generator draws from.
struct DomainInfo {
    std::string key;  // short routing label, e.g. "math"
    std::string name;
    std::string description;
    std::vector<std::string> keywords;
};

inline std::vector<DomainInfo> standard_domains() {
    return {
        {"instruct",
         "Instruct",
         "For general guidance, explanations, or broad advice.",
         {"explain", "advice", "guide", "summarize", "describe", "recommend", "tips", "overview", "habits",
          "plan", "suggest", "improve", "letter", "essay", "travel", "career", "health", "story", "morning",
          "friendship"}},
        {"code",
         "Code",
         "For programming-related queries, like debugging or coding.",
         {"function", "debug", "compile", "python", "java", "array", "pointer", "segfault", "loop", "class",
          "recursion", "variable", "syntax", "git", "api", "refactor", "stack", "runtime", "bug", "list"}},
        {"math",
         "Math",
         "For mathematical inquiries, such as problems or theories.",
         {"integral", "equation", "prime", "derivative", "matrix", "theorem", "proof", "probability",
          "polynomial", "triangle", "algebra", "geometry", "fraction", "limit", "vector", "sum", "solve",
          "factor", "modulo", "calculus"}},
        {"chinese",
         "Chinese Language Expert",
         "For inquiries related to the Chinese language, including translation, grammar, and usage.",
         {"翻译", "语法", "成语", "汉字", "拼音", "词语", "句子", "意思", "诗歌", "文言文", "声调", "偏旁",
          "量词", "近义词", "造句", "中文", "汉语", "繁体", "书法", "谚语"}},
    };
}

inline const std::vector<std::string>& filler_words() {
    static const std::vector<std::string> words = {"please", "how", "what", "can", "you", "the", "a",
                                                   "about", "my", "with", "for", "is", "do", "i", "need"};
    return words;
}

inline std::string pseudo_word(Rng& rng) {
    static constexpr char consonants[] = "bdfgklmnprstvz";
    static constexpr char vowels[] = "aeiou";
    const std::size_t syllables = 2 + rng.uniform_index(2);
    std::string w;
    for (std::size_t s = 0; s < syllables; ++s) {
        w.push_back(consonants[rng.uniform_index(sizeof(consonants) - 1)]);
        w.push_back(vowels[rng.uniform_index(sizeof(vowels) - 1)]);
    }
    w.push_back(consonants[rng.uniform_index(sizeof(consonants) - 1)]);
    return w;
}

/// The four standard domains followed by generated ones with disjoint
/// pseudo-word keyword pools.
inline std::vector<DomainInfo> synthetic_domains(std::size_t count, std::uint64_t seed = 0) {
    auto out = standard_domains();
    if (count <= out.size()) {
        out.resize(count);
        return out;
    }
    Rng rng(seed ^ 0x5eedd0a1ull);
    std::vector<std::string> used;
    for (std::size_t d = out.size(); d < count; ++d) {
        DomainInfo info;
        info.key = "domain" + std::to_string(d);
        info.name = "Domain " + std::to_string(d);
        info.description = "For queries in synthetic domain " + std::to_string(d) + ".";
        while (info.keywords.size() < 20) {
            std::string w = pseudo_word(rng);
            if (std::find(used.begin(), used.end(), w) == used.end()) {
                used.push_back(w);
                info.keywords.push_back(std::move(w));
            }
        }
        out.push_back(std::move(info));
    }
    return out;
}

/// 3-6 domain keywords interleaved with 2-4 shared filler words.
inline std::string make_query(const DomainInfo& domain, Rng& rng) {
    std::vector<std::string> words;
    const std::size_t nkey = 3 + rng.uniform_index(4);
    const std::size_t nfill = 2 + rng.uniform_index(3);
    for (std::size_t i = 0; i < nkey; ++i) {
        words.push_back(domain.keywords[rng.uniform_index(domain.keywords.size())]);
    }
    const auto& fill = filler_words();
    for (std::size_t i = 0; i < nfill; ++i) {
        words.push_back(fill[rng.uniform_index(fill.size())]);
    }
    rng.shuffle(words);
    std::string q;
    for (const auto& w : words) {
        if (!q.empty()) {
            q.push_back(' ');
        }
        q += w;
    }
    return q;
}

/// Exactly `length` bytes of domain text, cut on a UTF-8 boundary and padded
/// with spaces.
inline std::string make_calibration_text(const DomainInfo& domain, Rng& rng, std::size_t length) {
    std::string text;
    while (text.size() < length) {
        if (!text.empty()) {
            text.push_back(' ');
        }
        text += make_query(domain, rng);
    }
    std::size_t cut = length;
    while (cut > 0 && (static_cast<unsigned char>(text[cut]) & 0xC0u) == 0x80u) {
        --cut;
    }
    text.resize(cut);
    text.append(length - cut, ' ');
    return text;
}

}  // namespace meswitch
