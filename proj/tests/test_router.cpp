#include <gtest/gtest.h>

#include <filesystem>

#include "meswitch/router.hpp"

using namespace meswitch;

namespace {

/// Two domains with disjoint keyword pools.
std::vector<DomainInfo> two_keyword_domains() {
    return {
        {"fruit", "Fruit", "For fruit.", {"apple", "banana", "cherry", "grape", "mango", "peach", "plum", "kiwi"}},
        {"tools", "Tools", "For tools.", {"hammer", "wrench", "chisel", "drill", "saw", "pliers", "level", "vise"}},
    };
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

TEST(RenderPrompt, StandardDomains) {
    const std::string p = render_prompt("sort a list", standard_domains());
    EXPECT_NE(p.find("Query: sort a list"), std::string::npos);
    EXPECT_NE(p.find("A) Instruct - For general guidance, explanations, or broad advice."), std::string::npos);
    EXPECT_NE(p.find("B) Code - For programming-related queries, like debugging or coding."), std::string::npos);
    EXPECT_NE(p.find("C) Math - For mathematical inquiries, such as problems or theories."), std::string::npos);
    EXPECT_NE(p.find("D) Chinese Language Expert - For inquiries related to the Chinese language, including "
                     "translation, grammar, and usage."),
              std::string::npos);
    EXPECT_LT(p.find("A) "), p.find("B) "));
    EXPECT_LT(p.find("C) "), p.find("D) "));
}

TEST(RenderPrompt, FixedSentencesVerbatim) {
    const std::string p = render_prompt("q", standard_domains());
    for (const char* s : {
             "Classify the query based on the required expertise.",
             "Route the query to the appropriate model for a precise response.",
             "Only output the letter corresponding to the best category (A, B, C, …, F).",
             "Response should be only 'A', 'B', ‘C’, … or ‘F”, with no additional text.",
         }) {
        EXPECT_NE(p.find(s), std::string::npos) << s;
    }
    // the response rule is the last line
    const std::string tail = "with no additional text.\n";
    EXPECT_EQ(p.substr(p.size() - tail.size()), tail);
}

TEST(RenderPrompt, EmptyQueryAndLimits) {
    const std::string p = render_prompt("", standard_domains());
    EXPECT_NE(p.find("Query: \n"), std::string::npos);
    EXPECT_NO_THROW(render_prompt("q", synthetic_domains(6)));
    EXPECT_EQ(kind_of([] { render_prompt("q", synthetic_domains(7)); }), ErrorKind::out_of_range);
    EXPECT_THROW(render_prompt("q", {}), Error);
}

TEST(RouteLetter, Parsing) {
    EXPECT_EQ(parse_route_letter("B", 4), 1u);
    EXPECT_EQ(parse_route_letter(" 'c' ", 4), 2u);
    EXPECT_EQ(parse_route_letter("(D)", 4), 3u);
    EXPECT_EQ(kind_of([] { parse_route_letter("E", 4); }), ErrorKind::protocol);
    EXPECT_EQ(kind_of([] { parse_route_letter("", 4); }), ErrorKind::protocol);
}

TEST(TrainRouter, SingleDomainAlwaysPredicted) {
    const RoutingDataset data{{"anything at all", "only"}, {"more text", "only"}};
    const RouterModel m = train_router(data, {"only"}, 1);
    for (const char* q : {"hello", "integral of x", "翻译", ""}) {
        EXPECT_EQ(classify(m, q).label.name, "only");
    }
}

TEST(TrainRouter, SeparableKeywordDomains) {
    const auto domains = two_keyword_domains();
    const auto train = make_routing_dataset(domains, 100, 1);
    const auto held_out = make_routing_dataset(domains, 100, 2);
    const RouterModel m = train_router(train, domain_keys(domains), 0);
    EXPECT_EQ(evaluate_router(m, held_out).accuracy, 1.0);
    EXPECT_EQ(evaluate_router(m, train).accuracy, 1.0);
}

TEST(TrainRouter, MissingCoverageListsDomains) {
    const RoutingDataset data{{"apple", "fruit"}};
    try {
        train_router(data, {"fruit", "tools", "cars"}, 0);
        FAIL() << "expected an error";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::missing_coverage);
        EXPECT_NE(std::string(e.what()).find("tools, cars"), std::string::npos);
    }
    EXPECT_EQ(kind_of([&] { train_router({{"x", "unknown"}}, {"fruit"}, 0); }), ErrorKind::not_found);
    EXPECT_EQ(kind_of([&] { train_router(data, {"fruit", "fruit"}, 0); }), ErrorKind::duplicate);
}

TEST(TrainRouter, DeterministicBytes) {
    const auto domains = standard_domains();
    const auto data = make_routing_dataset(domains, 30, 5);
    const RouterModel a = train_router(data, domain_keys(domains), 9);
    const RouterModel b = train_router(data, domain_keys(domains), 9);
    EXPECT_EQ(serialize_router(a), serialize_router(b));
    EXPECT_NE(serialize_router(a), serialize_router(train_router(data, domain_keys(domains), 10)));
}

TEST(TrainRouter, LikelihoodsNormalize) {
    const auto domains = two_keyword_domains();
    const RouterModel m = train_router(make_routing_dataset(domains, 20, 3), domain_keys(domains), 0);
    for (const auto& ll : m.log_likelihood) {
        double z = 0.0;
        for (float v : ll) {
            z += std::exp(static_cast<double>(v));
        }
        EXPECT_NEAR(z, 1.0, 1e-4);
    }
    double p = 0.0;
    for (float v : m.log_prior) {
        p += std::exp(static_cast<double>(v));
    }
    EXPECT_NEAR(p, 1.0, 1e-6);
}

TEST(Classify, PureKeywordQuery) {
    const auto domains = standard_domains();
    const RouterModel m = train_router(make_routing_dataset(domains, 100, 1), domain_keys(domains), 0);
    EXPECT_EQ(classify(m, "integral derivative theorem proof").label.name, "math");
    EXPECT_EQ(classify(m, "python segfault pointer debug").label.name, "code");
    EXPECT_EQ(classify(m, "翻译 成语 拼音").label.name, "chinese");
    const auto c = classify(m, "integral derivative theorem proof");
    EXPECT_GT(c.confidence, 0.0);
    EXPECT_LE(c.confidence, 1.0);
    EXPECT_FALSE(c.prior_only);
}

TEST(Classify, EmptyQueryFallsBackToPrior) {
    const auto domains = standard_domains();
    const RouterModel m = train_router(make_routing_dataset(domains, 10, 1), domain_keys(domains), 0);
    const auto c = classify(m, "");
    EXPECT_TRUE(c.prior_only);
    EXPECT_EQ(c.label.id, 0u);
    EXPECT_NEAR(c.confidence, 0.25, 1e-6);
}

TEST(Classify, RepeatingQueryKeepsArgmax) {
    const auto domains = standard_domains();
    const RouterModel m = train_router(make_routing_dataset(domains, 50, 1), domain_keys(domains), 0);
    Rng rng(8);
    for (int i = 0; i < 50; ++i) {
        const std::string q = make_query(domains[rng.uniform_index(4)], rng);
        EXPECT_EQ(classify(m, q).label, classify(m, q + " " + q).label) << q;
    }
}

TEST(Classify, UntrainedRouterRejected) {
    EXPECT_THROW(classify(RouterModel{}, "x"), Error);
}

TEST(EvaluateRouter, ConfusionMatrixCounts) {
    const auto domains = standard_domains();
    const RouterModel m = train_router(make_routing_dataset(domains, 40, 1), domain_keys(domains), 0);
    RoutingDataset test = make_routing_dataset(domains, 25, 2);
    test.push_back({"extra", "math"});
    const auto e = evaluate_router(m, test);
    for (std::size_t d = 0; d < 4; ++d) {
        std::size_t row = 0;
        for (auto c : e.confusion[d]) {
            row += c;
        }
        EXPECT_EQ(row, e.per_domain_count[d]);
    }
    EXPECT_EQ(e.per_domain_count[2], 26u);
    EXPECT_EQ(kind_of([&] { evaluate_router(m, {}); }), ErrorKind::invalid_argument);
}

TEST(EvaluateRouter, TrainedVersusPriorOnly) {
    const auto domains = standard_domains();
    const RouterModel m = train_router(make_routing_dataset(domains, 200, 11), domain_keys(domains), 0);
    const auto held_out = make_routing_dataset(domains, 100, 12);
    EXPECT_GE(evaluate_router(m, held_out).accuracy, 0.95);
    const double prior = evaluate_router(m.prior_only(), held_out).accuracy;
    EXPECT_NEAR(prior, 0.25, 0.10);
}

TEST(RouterFile, RoundTripAndErrors) {
    const auto dir = std::filesystem::temp_directory_path() / ("meswitch_router_" + std::to_string(::getpid()));
    std::filesystem::create_directories(dir);
    const auto domains = standard_domains();
    const auto data = make_routing_dataset(domains, 10, 1);
    const RouterModel m = train_router(data, domain_keys(domains), 3);
    save_router(m, dir / "r.mert");
    EXPECT_EQ(load_router(dir / "r.mert"), m);

    auto bytes = serialize_router(m);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "MERT");
    bytes[0] = 'X';
    EXPECT_EQ(kind_of([&] { deserialize_router(bytes); }), ErrorKind::bad_magic);
    const auto good = serialize_router(m);
    EXPECT_EQ(kind_of([&] { deserialize_router(std::span(good).first(good.size() - 1)); }), ErrorKind::truncated);

    save_routing_dataset(data, dir / "d.jsonl");
    const auto back = load_routing_dataset(dir / "d.jsonl");
    ASSERT_EQ(back.size(), data.size());
    EXPECT_EQ(back[3].query, data[3].query);
    EXPECT_EQ(back[3].domain, data[3].domain);
    std::filesystem::remove_all(dir);
}
