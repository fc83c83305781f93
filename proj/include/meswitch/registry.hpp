#pragma once

#include <algorithm>
#include <chrono>
#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "meswitch/artifact.hpp"
#include "meswitch/pipeline.hpp"

namespace meswitch {

struct RegistryConfig {
    std::filesystem::path root;
    std::size_t budget_bytes = 0;
    std::string base_digest;
};

struct ExpertMetadata {
    std::string id;
    std::string domain;
    std::filesystem::path path;
    std::size_t size_bytes = 0;
    std::string artifact_digest;
};

enum class Residency { unloaded, loading, resident };

struct ExpertResidency {
    std::string id;
    Residency state = Residency::unloaded;
    std::size_t bytes = 0;
    std::uint64_t last_use_tick = 0;
    std::size_t pin_count = 0;
};

struct ResidencyState {
    std::vector<ExpertResidency> experts;
    std::size_t budget_bytes = 0;
    std::size_t current_bytes = 0;
    std::size_t peak_bytes = 0;
    std::size_t load_count = 0;
    std::size_t evict_count = 0;
    std::size_t violations = 0;
};

/// One state transition, in the order the registry applied it.
struct RegistryEvent {
    enum class Type { hit, load, evict, release, reject };
    Type type = Type::hit;
    std::string id;
    std::uint64_t tick = 0;
};

inline std::string_view event_name(RegistryEvent::Type t) {
    switch (t) {
        case RegistryEvent::Type::hit: return "hit";
        case RegistryEvent::Type::load: return "load";
        case RegistryEvent::Type::evict: return "evict";
        case RegistryEvent::Type::release: return "release";
        case RegistryEvent::Type::reject: return "reject";
    }
    return "?";
}

/// Delta providers of a resident expert. The artifact stays alive as long as
/// any copy of this handle does, even after eviction.
struct ExpertHandle {
    std::string id;
    std::string domain;
    std::shared_ptr<const DeltaSet> deltas;
};

class ExpertRegistry {
public:
    explicit ExpertRegistry(RegistryConfig cfg) : cfg_(std::move(cfg)) {
        require(cfg_.budget_bytes > 0, ErrorKind::invalid_argument, "registry: budget must be positive");
    }

    ExpertRegistry(const ExpertRegistry&) = delete;
    ExpertRegistry& operator=(const ExpertRegistry&) = delete;

    const RegistryConfig& config() const noexcept { return cfg_; }

    ExpertMetadata register_expert(const std::string& id, const std::filesystem::path& path) {
        const auto bytes = read_file_bytes(path);
        ExpertArtifact artifact;
        try {
            artifact = deserialize_artifact(bytes, cfg_.base_digest);
        } catch (const Error& e) {
            if (e.kind() == ErrorKind::digest_mismatch) {
                fail(ErrorKind::digest_mismatch, "registry: wrong base for expert '" + id + "': " + e.what());
            }
            throw;
        }
        ExpertMetadata meta{id, artifact.manifest.domain, path, compressed_size_bytes(artifact).total(),
                            artifact_digest(bytes)};
        require(meta.size_bytes <= cfg_.budget_bytes, ErrorKind::budget_exceeded,
                "registry: expert '" + id + "' needs " + std::to_string(meta.size_bytes) +
                    " bytes but the budget is " + std::to_string(cfg_.budget_bytes));

        std::lock_guard lock(mu_);
        require(!entries_.count(id), ErrorKind::duplicate, "registry: expert '" + id + "' already registered");
        Entry e;
        e.meta = meta;
        entries_.emplace(id, std::move(e));
        order_.push_back(id);
        return meta;
    }

    std::vector<ExpertMetadata> experts() const {
        std::lock_guard lock(mu_);
        std::vector<ExpertMetadata> out;
        for (const auto& id : order_) {
            out.push_back(entries_.at(id).meta);
        }
        return out;
    }

    std::optional<ExpertMetadata> find(const std::string& id) const {
        std::lock_guard lock(mu_);
        auto it = entries_.find(id);
        if (it == entries_.end()) {
            return std::nullopt;
        }
        return it->second.meta;
    }

    /// First registered expert serving `domain`.
    std::optional<std::string> expert_for_domain(const std::string& domain) const {
        std::lock_guard lock(mu_);
        for (const auto& id : order_) {
            if (entries_.at(id).meta.domain == domain) {
                return id;
            }
        }
        return std::nullopt;
    }

    /// Pin an expert, loading it (and evicting LRU unpinned experts) if needed.
    /// Fails with budget_exceeded, leaving the state unchanged, when pinned
    /// experts leave no room.
    ExpertHandle acquire(const std::string& id) { return acquire_impl(id, std::nullopt); }

    /// Like acquire, but waits for pins to be released instead of failing
    /// when the budget is temporarily full.
    ExpertHandle acquire_wait(const std::string& id,
                              std::chrono::milliseconds timeout = std::chrono::milliseconds(30000)) {
        return acquire_impl(id, timeout);
    }

    void release(const std::string& id) {
        std::lock_guard lock(mu_);
        Entry& e = entry(id);
        require(e.pin_count > 0, ErrorKind::invalid_argument, "registry: release of unpinned expert '" + id + "'");
        --e.pin_count;
        log(RegistryEvent::Type::release, id);
        cv_.notify_all();
    }

    ResidencyState stats() const {
        std::lock_guard lock(mu_);
        ResidencyState s;
        s.budget_bytes = cfg_.budget_bytes;
        s.current_bytes = current_bytes_;
        s.peak_bytes = peak_bytes_;
        s.load_count = load_count_;
        s.evict_count = evict_count_;
        s.violations = violations_;
        for (const auto& id : order_) {
            const Entry& e = entries_.at(id);
            s.experts.push_back(ExpertResidency{id, e.state, e.state == Residency::unloaded ? 0 : e.meta.size_bytes,
                                                e.last_use_tick, e.pin_count});
        }
        return s;
    }

    std::vector<RegistryEvent> events() const {
        std::lock_guard lock(mu_);
        return events_;
    }

private:
    struct Entry {
        ExpertMetadata meta;
        Residency state = Residency::unloaded;
        std::uint64_t last_use_tick = 0;
        std::size_t pin_count = 0;
        std::shared_ptr<const DeltaSet> deltas;
    };

    Entry& entry(const std::string& id) {
        auto it = entries_.find(id);
        require(it != entries_.end(), ErrorKind::not_found, "registry: unknown expert '" + id + "'");
        return it->second;
    }

    void log(RegistryEvent::Type type, const std::string& id) { events_.push_back(RegistryEvent{type, id, tick_}); }

    void touch(Entry& e) { e.last_use_tick = ++tick_; }

    void check_budget() {
        if (current_bytes_ > cfg_.budget_bytes) {
            ++violations_;
        }
        peak_bytes_ = std::max(peak_bytes_, current_bytes_);
    }

    std::size_t pinned_bytes() const {
        std::size_t total = 0;
        for (const auto& [id, e] : entries_) {
            if (e.state != Residency::unloaded && e.pin_count > 0) {
                total += e.meta.size_bytes;
            }
        }
        return total;
    }

    /// Evict least-recently-used unpinned residents until `needed` more bytes
    /// fit. Only called once the fit is known to be possible.
    void make_room(std::size_t needed) {
        while (current_bytes_ + needed > cfg_.budget_bytes) {
            Entry* victim = nullptr;
            for (const auto& id : order_) {
                Entry& e = entries_.at(id);
                if (e.state == Residency::resident && e.pin_count == 0 &&
                    (victim == nullptr || e.last_use_tick < victim->last_use_tick)) {
                    victim = &e;
                }
            }
            if (victim == nullptr) {
                fail(ErrorKind::budget_exceeded, "registry: no evictable expert");
            }
            victim->state = Residency::unloaded;
            victim->deltas.reset();
            current_bytes_ -= victim->meta.size_bytes;
            ++evict_count_;
            log(RegistryEvent::Type::evict, victim->meta.id);
        }
    }

    ExpertHandle pin_resident(Entry& e) {
        ++e.pin_count;
        touch(e);
        log(RegistryEvent::Type::hit, e.meta.id);
        return ExpertHandle{e.meta.id, e.meta.domain, e.deltas};
    }

    ExpertHandle acquire_impl(const std::string& id, std::optional<std::chrono::milliseconds> timeout) {
        const auto deadline = std::chrono::steady_clock::now() + timeout.value_or(std::chrono::milliseconds(0));
        std::unique_lock lock(mu_);
        Entry& e = entry(id);
        for (;;) {
            if (e.state == Residency::resident) {
                return pin_resident(e);
            }
            if (e.state == Residency::loading) {
                cv_.wait(lock);
                continue;
            }
            if (pinned_bytes() + e.meta.size_bytes <= cfg_.budget_bytes) {
                break;
            }
            if (!timeout) {
                log(RegistryEvent::Type::reject, id);
                fail(ErrorKind::budget_exceeded,
                     "registry: cannot fit expert '" + id + "' (" + std::to_string(e.meta.size_bytes) +
                         " bytes) with " + std::to_string(pinned_bytes()) + " of " +
                         std::to_string(cfg_.budget_bytes) + " bytes pinned");
            }
            if (cv_.wait_until(lock, deadline) == std::cv_status::timeout) {
                if (e.state == Residency::resident) {
                    return pin_resident(e);
                }
                fail(ErrorKind::budget_exceeded, "registry: timed out waiting for room for expert '" + id + "'");
            }
        }

        // reserve bytes and pin under the lock, read the file outside it
        make_room(e.meta.size_bytes);
        e.state = Residency::loading;
        e.pin_count = 1;
        touch(e);
        current_bytes_ += e.meta.size_bytes;
        ++load_count_;
        log(RegistryEvent::Type::load, id);
        check_budget();
        const ExpertMetadata meta = e.meta;
        lock.unlock();

        std::shared_ptr<const DeltaSet> deltas;
        try {
            const ExpertArtifact artifact = load_artifact(meta.path, cfg_.base_digest);
            deltas = std::make_shared<const DeltaSet>(providers_for(artifact));
        } catch (...) {
            lock.lock();
            e.state = Residency::unloaded;
            e.pin_count = 0;
            current_bytes_ -= meta.size_bytes;
            cv_.notify_all();
            throw;
        }

        lock.lock();
        e.deltas = deltas;
        e.state = Residency::resident;
        cv_.notify_all();
        return ExpertHandle{meta.id, meta.domain, std::move(deltas)};
    }

    RegistryConfig cfg_;
    mutable std::mutex mu_;
    std::condition_variable cv_;
    std::map<std::string, Entry> entries_;
    std::vector<std::string> order_;
    std::vector<RegistryEvent> events_;
    std::uint64_t tick_ = 0;
    std::size_t current_bytes_ = 0;
    std::size_t peak_bytes_ = 0;
    std::size_t load_count_ = 0;
    std::size_t evict_count_ = 0;
    std::size_t violations_ = 0;
};

/// Acquire on construction, release on destruction.
class ExpertPin {
public:
    ExpertPin(ExpertRegistry& registry, const std::string& id, bool wait = false)
        : registry_(&registry), handle_(wait ? registry.acquire_wait(id) : registry.acquire(id)) {}
    ExpertPin(const ExpertPin&) = delete;
    ExpertPin& operator=(const ExpertPin&) = delete;
    ~ExpertPin() {
        if (registry_ != nullptr) {
            registry_->release(handle_.id);
        }
    }

    const ExpertHandle& handle() const noexcept { return handle_; }
    const DeltaSet& deltas() const { return *handle_.deltas; }

private:
    ExpertRegistry* registry_;
    ExpertHandle handle_;
};

// ---------------------------------------------------------------------------
// registry directory: <root>/<id>.mesw plus registry.json

struct RegistryManifestEntry {
    std::string id;
    std::string domain;
    std::size_t size_bytes = 0;
};

struct RegistryManifest {
    std::string base_digest;
    std::string base_model;  // optional model file name relative to the root
    std::vector<RegistryManifestEntry> experts;
};

inline std::filesystem::path registry_manifest_path(const std::filesystem::path& root) {
    return root / "registry.json";
}

inline void write_registry_manifest(const std::filesystem::path& root, const RegistryManifest& m) {
    nlohmann::json j;
    j["base_digest"] = m.base_digest;
    if (!m.base_model.empty()) {
        j["base_model"] = m.base_model;
    }
    j["experts"] = nlohmann::json::array();
    for (const auto& e : m.experts) {
        j["experts"].push_back({{"id", e.id}, {"domain", e.domain}, {"size_bytes", e.size_bytes}});
    }
    std::ofstream out(registry_manifest_path(root), std::ios::trunc);
    if (!out) {
        fail(ErrorKind::io, "cannot write " + registry_manifest_path(root).string());
    }
    out << j.dump(2) << '\n';
}

inline RegistryManifest read_registry_manifest(const std::filesystem::path& root) {
    const auto path = registry_manifest_path(root);
    std::ifstream in(path);
    if (!in) {
        fail(ErrorKind::io, "cannot open " + path.string());
    }
    RegistryManifest m;
    try {
        const auto j = nlohmann::json::parse(in);
        m.base_digest = j.at("base_digest").get<std::string>();
        m.base_model = j.value("base_model", std::string());
        for (const auto& e : j.at("experts")) {
            m.experts.push_back(RegistryManifestEntry{e.at("id").get<std::string>(), e.value("domain", std::string()),
                                                      e.value("size_bytes", std::size_t{0})});
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::invalid_argument, path.string() + ": " + e.what());
    }
    return m;
}

/// Register every expert listed in `<root>/registry.json`.
inline void register_directory(ExpertRegistry& registry, const std::filesystem::path& root) {
    const RegistryManifest m = read_registry_manifest(root);
    for (const auto& e : m.experts) {
        registry.register_expert(e.id, root / (e.id + ".mesw"));
    }
}

}  // namespace meswitch
