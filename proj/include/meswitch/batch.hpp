#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "meswitch/registry.hpp"
#include "meswitch/toylm.hpp"

namespace meswitch {

struct BatchQuery {
    std::string query_id;
    std::string expert_id;
    std::vector<Token> tokens;
};

struct BatchPlan {
    std::vector<BatchQuery> queries;

    /// Expert id -> query positions, in first-appearance order of the expert
    /// and input order within a group.
    std::vector<std::pair<std::string, std::vector<std::size_t>>> groups() const {
        std::vector<std::pair<std::string, std::vector<std::size_t>>> out;
        std::map<std::string, std::size_t> slot;
        for (std::size_t q = 0; q < queries.size(); ++q) {
            auto [it, inserted] = slot.emplace(queries[q].expert_id, out.size());
            if (inserted) {
                out.push_back({queries[q].expert_id, {}});
            }
            out[it->second].second.push_back(q);
        }
        return out;
    }
};

struct BatchResult {
    std::string query_id;
    std::string expert_id;
    std::optional<DenseMatrix> logits;
    std::string error;

    bool ok() const noexcept { return logits.has_value(); }
};

/// Looks up an expert's deltas; returns nullptr for unknown experts.
using DeltaResolver = std::function<std::shared_ptr<const DeltaSet>(const std::string&)>;

struct BatchOptions {
    /// Process delta groups in reverse order; results must not change.
    bool reverse_groups = false;
};

/// Shared-base stage: one x W over every row of every query per layer.
/// Delta stage: each expert group adds x Delta~ to its own rows.
inline std::vector<BatchResult> batched_multi_model_forward(const ToyLM& base, const DeltaResolver& resolve,
                                                            const BatchPlan& plan, const BatchOptions& opt = {}) {
    base.validate();
    std::vector<BatchResult> results(plan.queries.size());
    for (std::size_t q = 0; q < plan.queries.size(); ++q) {
        results[q].query_id = plan.queries[q].query_id;
        results[q].expert_id = plan.queries[q].expert_id;
    }

    struct Group {
        std::shared_ptr<const DeltaSet> deltas;
        std::vector<std::size_t> queries;
        std::vector<std::size_t> rows;
    };
    std::vector<Group> groups;
    std::vector<std::size_t> row_offset(plan.queries.size(), 0);
    std::size_t total_rows = 0;
    for (const auto& [expert, members] : plan.groups()) {
        std::shared_ptr<const DeltaSet> deltas;
        std::string error;
        try {
            deltas = resolve(expert);
            if (!deltas) {
                error = "unknown expert '" + expert + "'";
            } else {
                check_alignment(base, *deltas);
            }
        } catch (const Error& e) {
            error = e.what();
            deltas.reset();
        }
        Group g;
        g.deltas = deltas;
        for (auto q : members) {
            const auto& tokens = plan.queries[q].tokens;
            std::string qerr = error;
            if (qerr.empty() && tokens.empty()) {
                qerr = "empty token sequence";
            }
            for (auto t : tokens) {
                if (qerr.empty() && t >= base.vocab()) {
                    qerr = "token " + std::to_string(t) + " outside vocabulary";
                }
            }
            if (!qerr.empty()) {
                results[q].error = qerr;
                continue;
            }
            row_offset[q] = total_rows;
            g.queries.push_back(q);
            for (std::size_t t = 0; t < tokens.size(); ++t) {
                g.rows.push_back(total_rows + t);
            }
            total_rows += tokens.size();
        }
        if (g.deltas) {
            groups.push_back(std::move(g));
        }
    }
    if (opt.reverse_groups) {
        std::reverse(groups.begin(), groups.end());
    }

    const std::size_t d = base.width();
    DenseMatrix h(total_rows, d);
    for (const auto& g : groups) {
        for (auto q : g.queries) {
            const auto& tokens = plan.queries[q].tokens;
            for (std::size_t t = 0; t < tokens.size(); ++t) {
                const RowVector e = embed(base, tokens[t], t, g.deltas.get());
                std::copy(e.begin(), e.end(), h.row(row_offset[q] + t).begin());
            }
        }
    }

    for (std::size_t l = 0; l < base.depth(); ++l) {
        DenseMatrix y = matmul(h, base.layers[l]);
        for (const auto& g : groups) {
            const DeltaProvider& p = g.deltas->layers[l];
            if (p.kind() == DeltaProvider::Kind::zero) {
                continue;
            }
            for (auto row : g.rows) {
                const RowVector dy = delta_matvec(h.row(row), p);
                auto out = y.row(row);
                for (std::size_t j = 0; j < d; ++j) {
                    out[j] += dy[j];
                }
            }
        }
        for (auto& v : y.data()) {
            v = v > 0.0f ? v : 0.0f;
        }
        h = std::move(y);
    }

    DenseMatrix logits = matmul(h, base.head);
    for (const auto& g : groups) {
        if (!g.deltas->head) {
            continue;
        }
        for (auto row : g.rows) {
            const RowVector dz = delta_matvec(h.row(row), *g.deltas->head);
            auto out = logits.row(row);
            for (std::size_t j = 0; j < out.size(); ++j) {
                out[j] += dz[j];
            }
        }
    }

    for (std::size_t q = 0; q < plan.queries.size(); ++q) {
        if (!results[q].error.empty()) {
            continue;
        }
        const std::size_t n = plan.queries[q].tokens.size();
        DenseMatrix z(n, base.vocab());
        for (std::size_t t = 0; t < n; ++t) {
            const auto src = logits.row(row_offset[q] + t);
            std::copy(src.begin(), src.end(), z.row(t).begin());
        }
        results[q].logits = std::move(z);
    }
    return results;
}

inline std::vector<BatchResult> batched_multi_model_forward(const ToyLM& base,
                                                            const std::map<std::string, DeltaSet>& experts,
                                                            const BatchPlan& plan, const BatchOptions& opt = {}) {
    return batched_multi_model_forward(
        base,
        [&](const std::string& id) -> std::shared_ptr<const DeltaSet> {
            auto it = experts.find(id);
            if (it == experts.end()) {
                return nullptr;
            }
            return std::shared_ptr<const DeltaSet>(std::shared_ptr<const void>(), &it->second);
        },
        plan, opt);
}

/// Pins every expert of the batch for its whole duration.
inline std::vector<BatchResult> batched_multi_model_forward(const ToyLM& base, ExpertRegistry& registry,
                                                            const BatchPlan& plan, const BatchOptions& opt = {}) {
    std::vector<std::unique_ptr<ExpertPin>> pins;
    std::map<std::string, std::shared_ptr<const DeltaSet>> resolved;
    std::map<std::string, std::string> errors;
    for (const auto& [expert, members] : plan.groups()) {
        try {
            pins.push_back(std::make_unique<ExpertPin>(registry, expert));
            resolved[expert] = pins.back()->handle().deltas;
        } catch (const Error& e) {
            errors[expert] = e.what();
        }
    }
    auto results = batched_multi_model_forward(
        base,
        [&](const std::string& id) -> std::shared_ptr<const DeltaSet> {
            auto it = resolved.find(id);
            if (it == resolved.end()) {
                fail(ErrorKind::not_found, errors.count(id) ? errors.at(id) : "unknown expert '" + id + "'");
            }
            return it->second;
        },
        plan, opt);
    return results;
}

// ---------------------------------------------------------------------------
// latency decomposition

struct TimingSummary {
    double median_ms = 0.0;
    double p90_ms = 0.0;
};

struct BenchResult {
    TimingSummary base_gemm_ms;
    TimingSummary delta_stage_ms;
    TimingSummary total_ms;
    std::size_t samples = 0;
    bool no_variance = false;
};

inline constexpr std::size_t kBenchWarmup = 3;

inline TimingSummary summarize_timings(std::vector<double> ms) {
    require(!ms.empty(), ErrorKind::invalid_argument, "summarize_timings: no samples");
    std::sort(ms.begin(), ms.end());
    const std::size_t n = ms.size();
    TimingSummary s;
    s.median_ms = n % 2 == 1 ? ms[n / 2] : 0.5 * (ms[n / 2 - 1] + ms[n / 2]);
    const auto rank = static_cast<std::size_t>(std::ceil(0.9 * static_cast<double>(n)));
    s.p90_ms = ms[std::max<std::size_t>(rank, 1) - 1];
    return s;
}

/// Time x W (shared base GEMM over every expert's rows) and x Delta~ (one
/// group per expert) across all layers. `batch` sequences of `seq_len` rows
/// per expert. The first three repetitions are warmup and discarded unless
/// that would leave no samples.
inline BenchResult bench_decode(const ToyLM& base, const std::vector<DeltaSet>& experts, std::size_t seq_len,
                                std::size_t batch, std::size_t repetitions, std::uint64_t seed = 0) {
    require(seq_len > 0 && batch > 0 && repetitions > 0, ErrorKind::invalid_argument,
            "bench_decode: seq_len, batch and repetitions must be positive");
    for (const auto& e : experts) {
        check_alignment(base, e);
    }
    const std::size_t groups = std::max<std::size_t>(experts.size(), 1);
    const std::size_t rows_per_group = seq_len * batch;
    const std::size_t d = base.width();
    Rng rng(seed);
    const DenseMatrix x = gaussian_matrix(rows_per_group * groups, d, 1.0, rng);

    using clock = std::chrono::steady_clock;
    auto ms_since = [](clock::time_point t0) {
        return std::chrono::duration<double, std::milli>(clock::now() - t0).count();
    };

    const std::size_t warmup = repetitions > kBenchWarmup ? kBenchWarmup : 0;
    std::vector<double> base_ms, delta_ms, total_ms;
    volatile float sink = 0.0f;
    for (std::size_t rep = 0; rep < repetitions; ++rep) {
        double tb = 0.0;
        double td = 0.0;
        for (std::size_t l = 0; l < base.depth(); ++l) {
            auto t0 = clock::now();
            const DenseMatrix y = matmul(x, base.layers[l]);
            tb += ms_since(t0);
            t0 = clock::now();
            float acc = 0.0f;
            for (std::size_t g = 0; g < experts.size(); ++g) {
                const DeltaProvider& p = experts[g].layers[l];
                for (std::size_t r = g * rows_per_group; r < (g + 1) * rows_per_group; ++r) {
                    acc += delta_matvec(x.row(r), p)[0];
                }
            }
            td += ms_since(t0);
            sink = sink + acc + y(0, 0);
        }
        if (rep >= warmup) {
            base_ms.push_back(tb);
            delta_ms.push_back(td);
            total_ms.push_back(tb + td);
        }
    }
    BenchResult r;
    r.base_gemm_ms = summarize_timings(base_ms);
    r.delta_stage_ms = summarize_timings(delta_ms);
    r.total_ms = summarize_timings(total_ms);
    r.samples = base_ms.size();
    r.no_variance = r.samples == 1;
    return r;
}

}  // namespace meswitch
