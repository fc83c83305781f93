#include <gtest/gtest.h>

#include <filesystem>
#include <thread>

#include "meswitch/registry.hpp"
#include "oracles.hpp"

using namespace meswitch;

namespace {

struct Fixture {
    std::filesystem::path root;
    ToyLM base;
    std::vector<std::string> ids;
    std::map<std::string, std::size_t> sizes;
    std::size_t max_size = 0;

    explicit Fixture(std::size_t experts, std::uint64_t seed = 1)
        : root(std::filesystem::temp_directory_path() /
               ("meswitch_registry_" + std::to_string(::getpid()) + "_" + std::to_string(seed))),
          base(make_toy_model({.vocab = 32, .width = 12, .depth = 2, .seed = seed})) {
        std::filesystem::remove_all(root);
        std::filesystem::create_directories(root);
        const std::vector<TokenSequence> calib{{1, 2, 3}, {4, 5, 6, 7}};
        for (std::size_t e = 0; e < experts; ++e) {
            const std::string id = "x" + std::to_string(e);
            const auto ex = synthesize_expert(base, {.domain = "d" + std::to_string(e % 4), .seed = seed * 100 + e});
            CompressExpertOptions opt;
            opt.distill = false;
            opt.model_id = id;
            opt.domain = ex.domain;
            const auto report = compress_expert(base, ex.model, calib, opt);
            save_artifact(report.artifact, root / (id + ".mesw"));
            ids.push_back(id);
            sizes[id] = compressed_size_bytes(report.artifact).total();
            max_size = std::max(max_size, sizes[id]);
        }
    }
    ~Fixture() { std::filesystem::remove_all(root); }

    RegistryConfig config(std::size_t budget) const { return RegistryConfig{root, budget, model_digest(base)}; }

    void register_all(ExpertRegistry& r) const {
        for (const auto& id : ids) {
            r.register_expert(id, root / (id + ".mesw"));
        }
    }
};

std::vector<oracle::Event> as_oracle_events(const std::vector<RegistryEvent>& events) {
    std::vector<oracle::Event> out;
    for (const auto& e : events) {
        out.push_back({std::string(event_name(e.type)), e.id, e.tick});
    }
    return out;
}

ErrorKind kind_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.kind();
    }
    ADD_FAILURE() << "no error raised";
    return ErrorKind::invalid_argument;
}

}  // namespace

TEST(Registry, RegisterLeavesNothingResident) {
    const Fixture fx(16);
    ExpertRegistry r(fx.config(4 * fx.max_size));
    fx.register_all(r);
    const auto s = r.stats();
    EXPECT_EQ(s.experts.size(), 16u);
    EXPECT_EQ(s.current_bytes, 0u);
    EXPECT_EQ(s.load_count, 0u);
    for (const auto& e : s.experts) {
        EXPECT_EQ(e.state, Residency::unloaded);
    }
    for (const auto& m : r.experts()) {
        EXPECT_EQ(m.size_bytes, fx.sizes.at(m.id));
        EXPECT_EQ(m.size_bytes, std::filesystem::file_size(m.path));
    }
}

TEST(Registry, RegistrationErrors) {
    const Fixture fx(2);
    ExpertRegistry wrong_base({fx.root, 4 * fx.max_size, "0000000000000000"});
    EXPECT_EQ(kind_of([&] { wrong_base.register_expert("x0", fx.root / "x0.mesw"); }), ErrorKind::digest_mismatch);

    ExpertRegistry r(fx.config(4 * fx.max_size));
    r.register_expert("x0", fx.root / "x0.mesw");
    EXPECT_EQ(kind_of([&] { r.register_expert("x0", fx.root / "x1.mesw"); }), ErrorKind::duplicate);
    EXPECT_EQ(kind_of([&] { r.register_expert("y", fx.root / "missing.mesw"); }), ErrorKind::io);

    ExpertRegistry tiny(fx.config(fx.max_size / 2));
    EXPECT_EQ(kind_of([&] { tiny.register_expert("x0", fx.root / "x0.mesw"); }), ErrorKind::budget_exceeded);
    EXPECT_THROW(ExpertRegistry(fx.config(0)), Error);
}

TEST(Registry, LruEvictsLeastRecentlyUsed) {
    const Fixture fx(3);
    ExpertRegistry r(fx.config(2 * fx.max_size));
    fx.register_all(r);
    for (const auto& id : fx.ids) {
        r.acquire(id);
        r.release(id);
    }
    const auto s = r.stats();
    EXPECT_EQ(s.experts[0].state, Residency::unloaded);
    EXPECT_EQ(s.experts[1].state, Residency::resident);
    EXPECT_EQ(s.experts[2].state, Residency::resident);
    EXPECT_EQ(s.evict_count, 1u);
    bool saw_evict = false;
    for (const auto& e : r.events()) {
        if (e.type == RegistryEvent::Type::evict) {
            EXPECT_EQ(e.id, "x0");
            saw_evict = true;
        }
    }
    EXPECT_TRUE(saw_evict);

    // touching x1 makes x2 the next victim
    r.acquire("x1");
    r.release("x1");
    r.acquire("x0");
    r.release("x0");
    EXPECT_EQ(r.stats().experts[2].state, Residency::unloaded);
    EXPECT_EQ(r.events().back().type, RegistryEvent::Type::release);
}

TEST(Registry, ResidentAcquireDoesNoIo) {
    const Fixture fx(2);
    ExpertRegistry r(fx.config(2 * fx.max_size));
    fx.register_all(r);
    const auto h1 = r.acquire("x0");
    r.release("x0");
    const auto h2 = r.acquire("x0");
    r.release("x0");
    EXPECT_EQ(r.stats().load_count, 1u);
    EXPECT_EQ(h1.deltas.get(), h2.deltas.get());
    EXPECT_EQ(h1.deltas->layers.size(), 2u);
}

TEST(Registry, AllPinnedRejectsAndKeepsState) {
    const Fixture fx(3);
    ExpertRegistry r(fx.config(2 * fx.max_size));
    fx.register_all(r);
    r.acquire("x0");
    r.acquire("x1");
    const auto before = r.stats();
    EXPECT_EQ(kind_of([&] { r.acquire("x2"); }), ErrorKind::budget_exceeded);
    const auto after = r.stats();
    EXPECT_EQ(after.current_bytes, before.current_bytes);
    EXPECT_EQ(after.load_count, before.load_count);
    EXPECT_EQ(after.evict_count, before.evict_count);
    EXPECT_EQ(after.experts[2].state, Residency::unloaded);
    EXPECT_EQ(r.events().back().type, RegistryEvent::Type::reject);
    r.release("x0");
    EXPECT_NO_THROW(r.acquire("x2"));
    EXPECT_EQ(r.stats().experts[0].state, Residency::unloaded);
}

TEST(Registry, ReleaseAndLookupErrors) {
    const Fixture fx(1);
    ExpertRegistry r(fx.config(2 * fx.max_size));
    fx.register_all(r);
    EXPECT_EQ(kind_of([&] { r.release("x0"); }), ErrorKind::invalid_argument);
    EXPECT_EQ(kind_of([&] { r.acquire("nope"); }), ErrorKind::not_found);
    EXPECT_FALSE(r.find("nope").has_value());
    EXPECT_EQ(r.expert_for_domain("d0"), std::optional<std::string>("x0"));
    EXPECT_FALSE(r.expert_for_domain("d3").has_value());
}

TEST(Registry, StatsTrackPeak) {
    const Fixture fx(3);
    ExpertRegistry r(fx.config(2 * fx.max_size));
    fx.register_all(r);
    const auto fresh = r.stats();
    EXPECT_EQ(fresh.current_bytes, 0u);
    EXPECT_EQ(fresh.peak_bytes, 0u);
    EXPECT_EQ(fresh.evict_count, 0u);

    r.acquire("x0");
    auto s = r.stats();
    EXPECT_EQ(s.current_bytes, fx.sizes.at("x0"));
    EXPECT_EQ(s.peak_bytes, fx.sizes.at("x0"));
    r.release("x0");

    r.acquire("x1");
    r.release("x1");
    const std::size_t peak_two = r.stats().peak_bytes;
    EXPECT_EQ(peak_two, fx.sizes.at("x0") + fx.sizes.at("x1"));
    r.acquire("x2");
    r.release("x2");
    s = r.stats();
    EXPECT_EQ(s.evict_count, 1u);
    EXPECT_EQ(s.current_bytes, fx.sizes.at("x1") + fx.sizes.at("x2"));
    EXPECT_GE(s.peak_bytes, peak_two);
    EXPECT_LE(s.peak_bytes, s.budget_bytes);
}

TEST(Registry, PinGuardReleases) {
    const Fixture fx(1);
    ExpertRegistry r(fx.config(2 * fx.max_size));
    fx.register_all(r);
    {
        ExpertPin pin(r, "x0");
        EXPECT_EQ(r.stats().experts[0].pin_count, 1u);
        EXPECT_EQ(pin.deltas().layers.size(), 2u);
    }
    EXPECT_EQ(r.stats().experts[0].pin_count, 0u);
}

TEST(Registry, DirectoryManifestRoundTrip) {
    const Fixture fx(4);
    RegistryManifest m;
    m.base_digest = model_digest(fx.base);
    m.base_model = "base.toyl";
    for (const auto& id : fx.ids) {
        m.experts.push_back({id, "d", fx.sizes.at(id)});
    }
    write_registry_manifest(fx.root, m);
    const auto back = read_registry_manifest(fx.root);
    EXPECT_EQ(back.base_digest, m.base_digest);
    EXPECT_EQ(back.base_model, "base.toyl");
    ASSERT_EQ(back.experts.size(), 4u);
    EXPECT_EQ(back.experts[3].size_bytes, fx.sizes.at("x3"));

    ExpertRegistry r(fx.config(2 * fx.max_size));
    register_directory(r, fx.root);
    EXPECT_EQ(r.experts().size(), 4u);
}

TEST(Registry, ConcurrentStressKeepsBudgetAndMatchesReplay) {
    const Fixture fx(16, 2);
    const std::size_t budget = 4 * fx.max_size;
    ExpertRegistry r(fx.config(budget));
    fx.register_all(r);

    std::atomic<std::size_t> attempts{0};
    std::atomic<std::size_t> rejects{0};
    auto try_pin = [&](Rng& rng, auto&& inner) {
        // skewed access so some experts stay hot
        const std::size_t e = std::min(rng.uniform_index(16), rng.uniform_index(16));
        ++attempts;
        try {
            ExpertPin pin(r, fx.ids[e]);
            if (pin.deltas().layers.size() != 2) {
                ADD_FAILURE() << "bad handle";
            }
            inner();
        } catch (const Error& err) {
            if (err.kind() != ErrorKind::budget_exceeded) {
                ADD_FAILURE() << err.what();
            }
            ++rejects;
        }
    };
    std::vector<std::thread> threads;
    for (int t = 0; t < 8; ++t) {
        threads.emplace_back([&, t] {
            Rng rng(1000 + static_cast<std::uint64_t>(t));
            for (int op = 0; op < 1250; ++op) {
                // half the time hold a second pin while the first is live
                const bool nested = rng.uniform() < 0.5;
                try_pin(rng, [&] {
                    if (nested) {
                        try_pin(rng, [] {});
                    }
                });
            }
        });
    }
    for (auto& t : threads) {
        t.join();
    }

    const auto s = r.stats();
    EXPECT_EQ(s.violations, 0u);
    EXPECT_LE(s.peak_bytes, budget);
    EXPECT_LE(s.current_bytes, budget);
    std::size_t resident = 0;
    for (const auto& e : s.experts) {
        EXPECT_EQ(e.pin_count, 0u);
        resident += e.bytes;
    }
    EXPECT_EQ(resident, s.current_bytes);

    const auto events = as_oracle_events(r.events());
    const auto evictions = static_cast<std::size_t>(
        std::count_if(events.begin(), events.end(), [](const auto& e) { return e.type == "evict"; }));
    EXPECT_GE(attempts.load(), 10000u);
    EXPECT_GT(rejects.load(), 0u);
    EXPECT_EQ(evictions, s.evict_count);
    EXPECT_EQ(events.size() - evictions, 2 * attempts.load() - rejects.load());
    const auto replayed = oracle::LruReplay::replay(events, budget, fx.sizes, fx.ids);
    ASSERT_EQ(replayed.size(), events.size());
    for (std::size_t i = 0; i < events.size(); ++i) {
        ASSERT_EQ(replayed[i].type, events[i].type) << "event " << i;
        ASSERT_EQ(replayed[i].id, events[i].id) << "event " << i;
    }
}
