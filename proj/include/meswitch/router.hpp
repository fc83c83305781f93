#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "meswitch/binary_io.hpp"
#include "meswitch/numerics.hpp"
#include "meswitch/synthetic.hpp"

namespace meswitch {

struct DomainLabel {
    std::uint32_t id = 0;
    std::string name;

    friend bool operator==(const DomainLabel&, const DomainLabel&) = default;
};

struct RoutingRecord {
    std::string query;
    std::string domain;
};

using RoutingDataset = std::vector<RoutingRecord>;

inline constexpr unsigned kRouterBucketBits = 16;
inline constexpr std::size_t kRouterBuckets = std::size_t{1} << kRouterBucketBits;

/// Multinomial Naive Bayes over hashed character 2- and 3-grams.
struct RouterModel {
    std::vector<std::string> domains;
    std::uint64_t seed = 0;
    std::vector<float> log_prior;                 // per domain
    std::vector<std::vector<float>> log_likelihood;  // per domain, kRouterBuckets entries

    std::size_t domain_count() const noexcept { return domains.size(); }

    std::uint32_t domain_id(std::string_view name) const {
        for (std::size_t d = 0; d < domains.size(); ++d) {
            if (domains[d] == name) {
                return static_cast<std::uint32_t>(d);
            }
        }
        fail(ErrorKind::not_found, "router: unknown domain '" + std::string(name) + "'");
    }

    /// Same priors, uniform likelihoods: the untrained baseline.
    RouterModel prior_only() const {
        RouterModel m = *this;
        const float uniform = -static_cast<float>(std::log(static_cast<double>(kRouterBuckets)));
        for (auto& l : m.log_likelihood) {
            std::fill(l.begin(), l.end(), uniform);
        }
        return m;
    }

    friend bool operator==(const RouterModel&, const RouterModel&) = default;
};

/// Bucket counts of every 2- and 3-byte window of " " + lowercase(text) + " ".
inline std::vector<std::pair<std::uint32_t, std::uint32_t>> ngram_counts(std::string_view text, std::uint64_t seed) {
    std::map<std::uint32_t, std::uint32_t> counts;
    if (text.empty()) {
        return {};
    }
    std::string padded;
    padded.reserve(text.size() + 2);
    padded.push_back(' ');
    for (char c : text) {
        padded.push_back(c >= 'A' && c <= 'Z' ? static_cast<char>(c - 'A' + 'a') : c);
    }
    padded.push_back(' ');
    std::uint64_t state = seed;
    const std::uint64_t basis = kFnvOffset ^ Rng::splitmix64(state);
    const auto* bytes = reinterpret_cast<const std::uint8_t*>(padded.data());
    for (std::size_t n = 2; n <= 3; ++n) {
        for (std::size_t i = 0; i + n <= padded.size(); ++i) {
            const std::uint64_t h = fnv1a64(std::span(bytes + i, n), basis ^ n);
            ++counts[static_cast<std::uint32_t>(h & (kRouterBuckets - 1))];
        }
    }
    return {counts.begin(), counts.end()};
}

inline RouterModel train_router(const RoutingDataset& data, const std::vector<std::string>& domains,
                                std::uint64_t seed = 0) {
    require(!domains.empty(), ErrorKind::invalid_argument, "train_router: no domains");
    for (std::size_t a = 0; a < domains.size(); ++a) {
        for (std::size_t b = a + 1; b < domains.size(); ++b) {
            require(domains[a] != domains[b], ErrorKind::duplicate, "train_router: duplicate domain " + domains[a]);
        }
    }
    RouterModel m;
    m.domains = domains;
    m.seed = seed;
    std::vector<std::size_t> docs(domains.size(), 0);
    std::vector<std::vector<double>> counts(domains.size(), std::vector<double>(kRouterBuckets, 0.0));
    for (const auto& r : data) {
        const std::uint32_t d = m.domain_id(r.domain);
        ++docs[d];
        for (const auto& [bucket, c] : ngram_counts(r.query, seed)) {
            counts[d][bucket] += c;
        }
    }
    std::string missing;
    for (std::size_t d = 0; d < domains.size(); ++d) {
        if (docs[d] == 0) {
            missing += (missing.empty() ? "" : ", ") + domains[d];
        }
    }
    require(missing.empty(), ErrorKind::missing_coverage, "train_router: no examples for domains: " + missing);

    const double total_docs = static_cast<double>(data.size());
    for (std::size_t d = 0; d < domains.size(); ++d) {
        m.log_prior.push_back(static_cast<float>(std::log(static_cast<double>(docs[d]) / total_docs)));
        double total = 0.0;
        for (double c : counts[d]) {
            total += c;
        }
        const double denom = std::log(total + static_cast<double>(kRouterBuckets));
        std::vector<float> ll(kRouterBuckets);
        for (std::size_t b = 0; b < kRouterBuckets; ++b) {
            ll[b] = static_cast<float>(std::log(counts[d][b] + 1.0) - denom);
        }
        m.log_likelihood.push_back(std::move(ll));
    }
    return m;
}

struct Classification {
    DomainLabel label;
    double confidence = 0.0;
    bool prior_only = false;
    std::vector<double> log_posterior;  // unnormalized
};

inline Classification classify(const RouterModel& m, std::string_view query) {
    require(!m.domains.empty() && m.log_prior.size() == m.domains.size() &&
                m.log_likelihood.size() == m.domains.size(),
            ErrorKind::invalid_argument, "classify: router is not trained");
    const auto grams = ngram_counts(query, m.seed);
    Classification c;
    c.prior_only = grams.empty();
    c.log_posterior.resize(m.domains.size());
    for (std::size_t d = 0; d < m.domains.size(); ++d) {
        double lp = m.log_prior[d];
        for (const auto& [bucket, count] : grams) {
            lp += static_cast<double>(count) * m.log_likelihood[d][bucket];
        }
        c.log_posterior[d] = lp;
    }
    std::size_t best = 0;
    for (std::size_t d = 1; d < m.domains.size(); ++d) {
        if (c.log_posterior[d] > c.log_posterior[best]) {
            best = d;
        }
    }
    double z = 0.0;
    for (double lp : c.log_posterior) {
        z += std::exp(lp - c.log_posterior[best]);
    }
    c.label = DomainLabel{static_cast<std::uint32_t>(best), m.domains[best]};
    c.confidence = 1.0 / z;
    return c;
}

struct RouterEvaluation {
    double accuracy = 0.0;
    std::vector<double> per_domain_accuracy;
    std::vector<std::size_t> per_domain_count;
    std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
};

inline RouterEvaluation evaluate_router(const RouterModel& m, const RoutingDataset& data) {
    require(!data.empty(), ErrorKind::invalid_argument, "evaluate_router: empty dataset");
    const std::size_t n = m.domain_count();
    RouterEvaluation e;
    e.confusion.assign(n, std::vector<std::size_t>(n, 0));
    e.per_domain_count.assign(n, 0);
    std::size_t correct = 0;
    for (const auto& r : data) {
        const std::uint32_t truth = m.domain_id(r.domain);
        const std::uint32_t pred = classify(m, r.query).label.id;
        ++e.confusion[truth][pred];
        ++e.per_domain_count[truth];
        correct += truth == pred ? 1 : 0;
    }
    e.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
    for (std::size_t d = 0; d < n; ++d) {
        e.per_domain_accuracy.push_back(e.per_domain_count[d] == 0 ? 0.0
                                                                   : static_cast<double>(e.confusion[d][d]) /
                                                                         static_cast<double>(e.per_domain_count[d]));
    }
    return e;
}

// ---------------------------------------------------------------------------
// prompt for an external LLM router

inline constexpr std::string_view kPromptInstruction =
    "Classify the query based on the required expertise. Route the query to the appropriate model for a precise "
    "response. Only output the letter corresponding to the best category (A, B, C, …, F).";
inline constexpr std::string_view kPromptResponseRule =
    "Response should be only 'A', 'B', ‘C’, … or ‘F”, with no additional text.";
inline constexpr std::size_t kPromptMaxOptions = 6;

inline std::string render_prompt(std::string_view query, const std::vector<DomainInfo>& domains) {
    require(!domains.empty(), ErrorKind::invalid_argument, "render_prompt: no domains");
    require(domains.size() <= kPromptMaxOptions, ErrorKind::out_of_range,
            "render_prompt: " + std::to_string(domains.size()) + " domains but the template has options A-F");
    std::string out(kPromptInstruction);
    out += "\n\nQuery: ";
    out += query;
    out += "\n\nOptions:";
    for (std::size_t d = 0; d < domains.size(); ++d) {
        out += ' ';
        out.push_back(static_cast<char>('A' + d));
        out += ") " + domains[d].name + " - " + domains[d].description;
    }
    out += "\n\n";
    out += kPromptResponseRule;
    out += '\n';
    return out;
}

/// Option index named by an external router's answer such as "B", "b)" or "'C'".
inline std::size_t parse_route_letter(std::string_view answer, std::size_t option_count) {
    for (char c : answer) {
        if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\'' || c == '"' || c == '(') {
            continue;
        }
        const char upper = c >= 'a' && c <= 'z' ? static_cast<char>(c - 'a' + 'A') : c;
        if (upper >= 'A' && static_cast<std::size_t>(upper - 'A') < option_count) {
            return static_cast<std::size_t>(upper - 'A');
        }
        break;
    }
    fail(ErrorKind::protocol, "router answer '" + std::string(answer) + "' does not name one of " +
                                  std::to_string(option_count) + " options");
}

// ---------------------------------------------------------------------------
// files

inline constexpr char kRouterMagic[4] = {'M', 'E', 'R', 'T'};
inline constexpr std::uint16_t kRouterVersion = 1;

inline std::vector<std::uint8_t> serialize_router(const RouterModel& m) {
    ByteWriter w;
    w.bytes(std::span(reinterpret_cast<const std::uint8_t*>(kRouterMagic), 4));
    w.u16(kRouterVersion);
    w.u64(m.seed);
    w.u32(kRouterBucketBits);
    w.u32(static_cast<std::uint32_t>(m.domains.size()));
    for (std::size_t d = 0; d < m.domains.size(); ++d) {
        w.u32(static_cast<std::uint32_t>(m.domains[d].size()));
        w.text(m.domains[d]);
        w.f32(m.log_prior[d]);
    }
    for (const auto& l : m.log_likelihood) {
        w.f32s(l);
    }
    return w.take();
}

inline RouterModel deserialize_router(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes, "router");
    const auto magic = r.bytes(4);
    if (!std::equal(magic.begin(), magic.end(), reinterpret_cast<const std::uint8_t*>(kRouterMagic))) {
        fail(ErrorKind::bad_magic, "router: bad magic");
    }
    const auto version = r.u16();
    if (version != kRouterVersion) {
        fail(ErrorKind::bad_version, "router: unsupported version " + std::to_string(version));
    }
    RouterModel m;
    m.seed = r.u64();
    const std::uint32_t bits = r.u32();
    require(bits == kRouterBucketBits, ErrorKind::invalid_argument,
            "router: " + std::to_string(bits) + "-bit buckets, expected " + std::to_string(kRouterBucketBits));
    const std::uint32_t n = r.u32();
    for (std::uint32_t d = 0; d < n; ++d) {
        m.domains.push_back(r.text(r.u32()));
        m.log_prior.push_back(r.f32());
    }
    for (std::uint32_t d = 0; d < n; ++d) {
        m.log_likelihood.push_back(r.f32s(kRouterBuckets));
    }
    if (r.remaining() != 0) {
        fail(ErrorKind::invalid_argument, "router: " + std::to_string(r.remaining()) + " trailing bytes");
    }
    return m;
}

inline void save_router(const RouterModel& m, const std::filesystem::path& path) {
    write_file_bytes(path, serialize_router(m));
}

inline RouterModel load_router(const std::filesystem::path& path) { return deserialize_router(read_file_bytes(path)); }

inline RoutingDataset load_routing_dataset(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        fail(ErrorKind::io, "cannot open routing dataset " + path.string());
    }
    RoutingDataset out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        try {
            const auto j = nlohmann::json::parse(line);
            out.push_back(RoutingRecord{j.at("query").get<std::string>(), j.at("domain").get<std::string>()});
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorKind::invalid_argument, path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

inline void save_routing_dataset(const RoutingDataset& data, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        fail(ErrorKind::io, "cannot write " + path.string());
    }
    for (const auto& r : data) {
        out << nlohmann::json{{"query", r.query}, {"domain", r.domain}}.dump() << '\n';
    }
}

/// `per_domain` generated queries for each domain, interleaved round-robin.
inline RoutingDataset make_routing_dataset(const std::vector<DomainInfo>& domains, std::size_t per_domain,
                                           std::uint64_t seed) {
    Rng rng(seed);
    RoutingDataset out;
    for (std::size_t i = 0; i < per_domain; ++i) {
        for (const auto& d : domains) {
            out.push_back(RoutingRecord{make_query(d, rng), d.key});
        }
    }
    return out;
}

inline std::vector<std::string> domain_keys(const std::vector<DomainInfo>& domains) {
    std::vector<std::string> out;
    for (const auto& d : domains) {
        out.push_back(d.key);
    }
    return out;
}

}  // namespace meswitch
