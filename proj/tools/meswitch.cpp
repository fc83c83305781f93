#include <signal.h>

#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "meswitch/meswitch.hpp"

namespace fs = std::filesystem;
using namespace meswitch;

namespace {

std::uint64_t default_seed() {
    const char* env = std::getenv("MESWITCH_SEED");
    if (env == nullptr || *env == '\0') {
        return 0;
    }
    std::uint64_t v = 0;
    const std::string_view s(env);
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    require(res.ec == std::errc() && res.ptr == s.data() + s.size(), ErrorKind::invalid_argument,
            "MESWITCH_SEED must be an unsigned integer, got '" + std::string(s) + "'");
    return v;
}

/// Domain lookup by key, over the standard domains plus generated ones.
DomainInfo find_domain(const std::string& key, std::uint64_t seed) {
    for (const auto& d : synthetic_domains(64, seed)) {
        if (d.key == key) {
            return d;
        }
    }
    fail(ErrorKind::not_found, "unknown domain '" + key + "'");
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream in(s);
    std::string item;
    while (std::getline(in, item, ',')) {
        if (!item.empty()) {
            out.push_back(item);
        }
    }
    return out;
}

std::pair<std::size_t, std::size_t> parse_range(const std::string& s) {
    const auto dots = s.find("..");
    require(dots != std::string::npos, ErrorKind::invalid_argument, "range must look like LO..HI, got '" + s + "'");
    auto num = [&](std::string_view part) {
        std::size_t v = 0;
        const auto res = std::from_chars(part.data(), part.data() + part.size(), v);
        require(res.ec == std::errc() && res.ptr == part.data() + part.size(), ErrorKind::invalid_argument,
                "bad range bound '" + std::string(part) + "'");
        return v;
    };
    const std::string_view v(s);
    return {num(v.substr(0, dots)), num(v.substr(dots + 2))};
}

void print_sizes(std::ostream& out, const ExpertArtifact& a) {
    const ArtifactSize sz = compressed_size_bytes(a);
    out << "layer,rows,cols,bits,k,header,indices,salient,steps,codes,total\n";
    for (std::size_t l = 0; l < a.layers.size(); ++l) {
        const auto& c = a.layers[l];
        const auto& s = sz.layers[l];
        out << l << ',' << c.rows << ',' << c.cols << ',' << c.bits << ',' << c.k() << ',' << s.header << ','
            << s.indices << ',' << s.salient << ',' << s.steps << ',' << s.codes << ',' << s.total() << '\n';
    }
    out << "file_header_bytes " << sz.file_header << '\n';
    out << "total_bytes " << sz.total() << '\n';
}

/// Base model for a registry: explicit path, else the manifest's base_model.
ToyLM registry_base(const fs::path& root, const std::string& explicit_base) {
    if (!explicit_base.empty()) {
        return load_model(explicit_base);
    }
    const auto m = read_registry_manifest(root);
    require(!m.base_model.empty(), ErrorKind::invalid_argument,
            "registry.json names no base_model; pass --base");
    return load_model(root / m.base_model);
}

// ---------------------------------------------------------------------------
// synth

void add_synth(CLI::App& app) {
    auto* synth = app.add_subcommand("synth", "Generate toy models, calibration text and routing data");
    synth->require_subcommand(1);

    {
        auto* c = synth->add_subcommand("base", "Random base toy model");
        auto cfg = std::make_shared<ToyLMConfig>();
        auto out = std::make_shared<std::string>();
        cfg->seed = default_seed();
        c->add_option("--out", *out, "Output .toyl path")->required();
        c->add_option("--vocab", cfg->vocab, "Vocabulary size")->capture_default_str();
        c->add_option("--width", cfg->width, "Hidden width")->capture_default_str();
        c->add_option("--depth", cfg->depth, "Number of layers")->capture_default_str();
        c->add_option("--dead-channels", cfg->dead_channels, "Always-zero output channels per layer");
        c->add_option("--seed", cfg->seed, "RNG seed (default $MESWITCH_SEED or 0)");
        c->callback([cfg, out] {
            const ToyLM m = make_toy_model(*cfg);
            save_model(m, *out);
            std::cout << "model " << *out << "\ndigest " << model_digest(m) << '\n';
        });
    }
    {
        auto* c = synth->add_subcommand("expert", "Fine-tuned expert derived from a base model");
        auto recipe = std::make_shared<ExpertSpec>();
        auto base = std::make_shared<std::string>();
        auto out = std::make_shared<std::string>();
        recipe->seed = default_seed();
        c->add_option("--base", *base, "Base .toyl")->required();
        c->add_option("--domain", recipe->domain, "Domain label")->required();
        c->add_option("--out", *out, "Output .toyl path")->required();
        c->add_option("--seed", recipe->seed, "RNG seed");
        c->add_option("--dense-sigma", recipe->dense_sigma, "Std-dev of the dense delta")->capture_default_str();
        c->add_option("--planted-rows", recipe->planted_rows, "Rows with a large delta")->capture_default_str();
        c->add_option("--planted-amplitude", recipe->planted_amplitude, "Std-dev in planted rows")
            ->capture_default_str();
        c->add_option("--misleading-rows", recipe->misleading_rows, "Large rows on dead input channels");
        c->callback([recipe, base, out] {
            const auto e = synthesize_expert(load_model(*base), *recipe);
            save_model(e.model, *out);
            std::cout << "model " << *out << "\ndigest " << model_digest(e.model) << '\n';
        });
    }
    {
        auto* c = synth->add_subcommand("calib", "Calibration JSONL for one domain");
        auto domain = std::make_shared<std::string>();
        auto out = std::make_shared<std::string>();
        auto count = std::make_shared<std::size_t>(256);
        auto length = std::make_shared<std::size_t>(32);
        auto seed = std::make_shared<std::uint64_t>(default_seed());
        c->add_option("--domain", *domain, "Domain key")->required();
        c->add_option("--out", *out, "Output .jsonl")->required();
        c->add_option("--count", *count, "Number of sequences")->capture_default_str();
        c->add_option("--length", *length, "Bytes per sequence")->capture_default_str();
        c->add_option("--seed", *seed, "RNG seed");
        c->callback([=] {
            const DomainInfo d = find_domain(*domain, *seed);
            Rng rng(*seed);
            std::vector<std::string> texts;
            for (std::size_t i = 0; i < *count; ++i) {
                texts.push_back(make_calibration_text(d, rng, *length));
            }
            save_calibration(texts, *out);
            std::cout << "calibration " << *out << " sequences " << texts.size() << '\n';
        });
    }
    {
        auto* c = synth->add_subcommand("routing", "Routing dataset JSONL");
        auto out = std::make_shared<std::string>();
        auto per_domain = std::make_shared<std::size_t>(100);
        auto domains = std::make_shared<std::size_t>(4);
        auto seed = std::make_shared<std::uint64_t>(default_seed());
        c->add_option("--out", *out, "Output .jsonl")->required();
        c->add_option("--per-domain", *per_domain, "Queries per domain")->capture_default_str();
        c->add_option("--domains", *domains, "Domain count (first four are the standard ones)")
            ->capture_default_str();
        c->add_option("--seed", *seed, "RNG seed");
        c->callback([=] {
            const auto data = make_routing_dataset(synthetic_domains(*domains, *seed), *per_domain, *seed);
            save_routing_dataset(data, *out);
            std::cout << "dataset " << *out << " records " << data.size() << '\n';
        });
    }
}

// ---------------------------------------------------------------------------
// compress / inspect / register

void add_compress(CLI::App& app) {
    auto* c = app.add_subcommand("compress", "Compress a fine-tuned model's delta into an artifact");
    struct Args {
        std::string base, finetuned, calib, out, metric = "reconstruction", model_id, domain;
        CompressionConfig cfg;
        bool no_distill = false;
    };
    auto a = std::make_shared<Args>();
    a->cfg.random_seed = default_seed();
    c->add_option("--base", a->base, "Base .toyl")->required();
    c->add_option("--finetuned", a->finetuned, "Fine-tuned .toyl")->required();
    c->add_option("--calib", a->calib, "Calibration .jsonl")->required();
    c->add_option("--out", a->out, "Output .mesw")->required();
    c->add_option("--bits", a->cfg.bits, "Code width for non-salient rows")->capture_default_str();
    c->add_option("--salient-k", a->cfg.salient_k, "Rows kept in FP16")->capture_default_str();
    c->add_option("--metric", a->metric, "reconstruction | magnitude | wanda | random")->capture_default_str();
    c->add_option("--seed", a->cfg.random_seed, "Seed for the random metric");
    c->add_option("--distill-epochs", a->cfg.distill.epochs, "Step-size distillation epochs")->capture_default_str();
    c->add_option("--lr", a->cfg.distill.lr, "AdamW learning rate")->capture_default_str();
    c->add_option("--batch", a->cfg.distill.batch, "Sequences per step")->capture_default_str();
    c->add_flag("--no-distill", a->no_distill, "Skip step-size distillation");
    c->add_option("--model-id", a->model_id, "Expert id (default: output file stem)");
    c->add_option("--domain", a->domain, "Domain label stored in the manifest");
    c->callback([a] {
        a->cfg.metric = parse_metric(a->metric);
        const ToyLM base = load_model(a->base);
        const ToyLM ft = load_model(a->finetuned);
        const auto calib = load_calibration(a->calib);
        CompressExpertOptions opt;
        opt.config = a->cfg;
        opt.distill = !a->no_distill;
        opt.model_id = a->model_id.empty() ? fs::path(a->out).stem().string() : a->model_id;
        opt.domain = a->domain;
        const auto report = compress_expert(base, ft, calib, opt);
        for (const auto& w : report.warnings) {
            std::cerr << "warning: " << w << '\n';
        }
        const auto bytes = serialize_artifact(report.artifact);
        write_file_bytes(a->out, bytes);
        std::cout << "artifact " << a->out << '\n';
        print_sizes(std::cout, report.artifact);
        std::cout << "digest " << artifact_digest(bytes) << '\n';
        if (report.distill) {
            std::cout << "initial_loss " << format_double(report.distill->initial_loss) << '\n';
            std::cout << "final_loss " << format_double(report.distill->final_loss) << '\n';
        } else {
            const DeltaSet d = providers_for(report.artifact);
            std::cout << "final_loss " << format_double(logit_mse(ft, base, d, calib)) << '\n';
        }
    });
}

void add_inspect(CLI::App& app) {
    auto* c = app.add_subcommand("inspect", "Print an artifact's manifest, layer sizes and digest");
    auto path = std::make_shared<std::string>();
    c->add_option("artifact", *path, "Artifact .mesw")->required();
    c->callback([path] {
        const auto bytes = read_file_bytes(*path);
        const ExpertArtifact a = deserialize_artifact(bytes);
        std::cout << "manifest " << a.manifest.to_json().dump() << '\n';
        print_sizes(std::cout, a);
        std::size_t salient = 0;
        for (const auto& s : compressed_size_bytes(a).layers) {
            salient += s.salient;
        }
        std::cout << "salient_bytes " << salient << '\n';
        std::cout << "digest " << artifact_digest(bytes) << '\n';
    });
}

void add_register(CLI::App& app) {
    auto* c = app.add_subcommand("register", "Add an artifact to a registry directory");
    auto root = std::make_shared<std::string>();
    auto artifact = std::make_shared<std::string>();
    auto id = std::make_shared<std::string>();
    auto base = std::make_shared<std::string>();
    c->add_option("--registry", *root, "Registry directory (created if missing)")->required();
    c->add_option("--artifact", *artifact, "Artifact .mesw")->required();
    c->add_option("--id", *id, "Expert id (default: the manifest's model_id)");
    c->add_option("--base", *base, "Base .toyl to copy into the registry");
    c->callback([=] {
        const fs::path dir(*root);
        fs::create_directories(dir);
        const auto bytes = read_file_bytes(*artifact);
        const ExpertArtifact a = deserialize_artifact(bytes);
        const std::string expert = id->empty() ? a.manifest.model_id : *id;
        require(!expert.empty(), ErrorKind::invalid_argument, "artifact has no model_id; pass --id");

        RegistryManifest m;
        if (fs::exists(registry_manifest_path(dir))) {
            m = read_registry_manifest(dir);
            require(m.base_digest == a.manifest.base_digest, ErrorKind::digest_mismatch,
                    "artifact base " + a.manifest.base_digest + " differs from registry base " + m.base_digest);
        } else {
            m.base_digest = a.manifest.base_digest;
        }
        if (!base->empty()) {
            const ToyLM b = load_model(*base);
            require(model_digest(b) == m.base_digest, ErrorKind::digest_mismatch,
                    "base model digest " + model_digest(b) + " differs from " + m.base_digest);
            save_model(b, dir / "base.toyl");
            m.base_model = "base.toyl";
        }
        std::erase_if(m.experts, [&](const auto& e) { return e.id == expert; });
        m.experts.push_back({expert, a.manifest.domain, compressed_size_bytes(a).total()});
        write_file_bytes(dir / (expert + ".mesw"), bytes);
        write_registry_manifest(dir, m);
        std::cout << "registered " << expert << " domain " << a.manifest.domain << " bytes " << bytes.size()
                  << '\n';
    });
}

// ---------------------------------------------------------------------------
// router

void add_router(CLI::App& app) {
    {
        auto* c = app.add_subcommand("route-train", "Train the n-gram router on a routing dataset");
        auto data = std::make_shared<std::string>();
        auto out = std::make_shared<std::string>();
        auto domains = std::make_shared<std::string>();
        auto seed = std::make_shared<std::uint64_t>(default_seed());
        c->add_option("--data", *data, "Routing .jsonl")->required();
        c->add_option("--out", *out, "Output .mert")->required();
        c->add_option("--domains", *domains, "Comma-separated domain order (default: first appearance)");
        c->add_option("--seed", *seed, "Hash seed");
        c->callback([=] {
            const auto ds = load_routing_dataset(*data);
            std::vector<std::string> names = split_list(*domains);
            if (names.empty()) {
                for (const auto& r : ds) {
                    if (std::find(names.begin(), names.end(), r.domain) == names.end()) {
                        names.push_back(r.domain);
                    }
                }
            }
            const RouterModel m = train_router(ds, names, *seed);
            save_router(m, *out);
            std::cout << "router " << *out << " domains " << m.domain_count() << " records " << ds.size() << '\n';
        });
    }
    {
        auto* c = app.add_subcommand("route-eval", "Accuracy and confusion matrix of a router");
        auto router = std::make_shared<std::string>();
        auto data = std::make_shared<std::string>();
        auto prior = std::make_shared<bool>(false);
        c->add_option("--router", *router, "Router .mert")->required();
        c->add_option("--data", *data, "Routing .jsonl")->required();
        c->add_flag("--prior-only", *prior, "Evaluate the untrained (prior-only) baseline");
        c->callback([=] {
            RouterModel m = load_router(*router);
            if (*prior) {
                m = m.prior_only();
            }
            const auto e = evaluate_router(m, load_routing_dataset(*data));
            std::cout << "accuracy " << format_fixed(e.accuracy, 4) << '\n';
            std::cout << "domain,count,accuracy\n";
            for (std::size_t d = 0; d < m.domain_count(); ++d) {
                std::cout << m.domains[d] << ',' << e.per_domain_count[d] << ','
                          << format_fixed(e.per_domain_accuracy[d], 4) << '\n';
            }
            std::cout << "confusion";
            for (const auto& name : m.domains) {
                std::cout << ',' << name;
            }
            std::cout << '\n';
            for (std::size_t d = 0; d < m.domain_count(); ++d) {
                std::cout << m.domains[d];
                for (auto c : e.confusion[d]) {
                    std::cout << ',' << c;
                }
                std::cout << '\n';
            }
        });
    }
    {
        auto* c = app.add_subcommand("route-prompt", "Render the multiple-choice routing prompt");
        auto query = std::make_shared<std::string>();
        auto domains = std::make_shared<std::size_t>(4);
        c->add_option("--query", *query, "User query")->required();
        c->add_option("--domains", *domains, "Number of options (1-6)")->capture_default_str();
        c->callback([=] { std::cout << render_prompt(*query, synthetic_domains(*domains, default_seed())); });
    }
}

// ---------------------------------------------------------------------------
// serve / query

void add_serve(CLI::App& app) {
    auto* c = app.add_subcommand("serve", "Serve experts over TCP (newline-delimited JSON)");
    struct Args {
        std::string registry, router, base, host = "127.0.0.1", port_file;
        double budget_mb = 0.0;
        std::size_t budget_bytes = 0;
        std::uint16_t port = 0;
        std::size_t max_new = 16;
        std::size_t max_requests = 0;
    };
    auto a = std::make_shared<Args>();
    c->add_option("--registry", a->registry, "Registry directory")->required();
    auto* mb = c->add_option("--budget-mb", a->budget_mb, "Resident delta budget in MiB");
    auto* bytes = c->add_option("--budget-bytes", a->budget_bytes, "Resident delta budget in bytes");
    mb->excludes(bytes);
    c->add_option("--router", a->router, "Router .mert (needed for requests without an expert)");
    c->add_option("--base", a->base, "Base .toyl (default: registry.json base_model)");
    c->add_option("--host", a->host, "Listen address")->capture_default_str();
    c->add_option("--port", a->port, "Listen port (0 picks a free one)")->capture_default_str();
    c->add_option("--port-file", a->port_file, "Write the bound port to this file");
    c->add_option("--max-new", a->max_new, "Default generated tokens per request")->capture_default_str();
    c->add_option("--max-requests", a->max_requests, "Exit after this many responses (0: run until signalled)");
    c->callback([a] {
        std::size_t budget = a->budget_bytes;
        if (budget == 0) {
            require(a->budget_mb > 0.0, ErrorKind::invalid_argument, "serve needs --budget-mb or --budget-bytes");
            budget = static_cast<std::size_t>(a->budget_mb * 1024.0 * 1024.0);
        }
        const fs::path root(a->registry);
        const ToyLM base = registry_base(root, a->base);
        ExpertRegistry registry({root, budget, model_digest(base)});
        register_directory(registry, root);
        std::optional<RouterModel> router;
        if (!a->router.empty()) {
            router = load_router(a->router);
        }
        const ServingContext ctx(base, registry, router ? &*router : nullptr, a->max_new);

        // handle SIGINT/SIGTERM synchronously; worker threads inherit the mask
        sigset_t signals;
        sigemptyset(&signals);
        sigaddset(&signals, SIGINT);
        sigaddset(&signals, SIGTERM);
        pthread_sigmask(SIG_BLOCK, &signals, nullptr);

        JsonlServer server(ctx);
        server.start(a->port, a->host);
        if (!a->port_file.empty()) {
            const std::string tmp = a->port_file + ".tmp";
            std::ofstream(tmp) << server.port() << '\n';
            fs::rename(tmp, a->port_file);
        }
        std::cout << "listening " << a->host << ':' << server.port() << " experts " << registry.experts().size()
                  << " budget_bytes " << budget << std::endl;

        const timespec tick{0, 100'000'000};
        for (;;) {
            const int sig = sigtimedwait(&signals, nullptr, &tick);
            if (sig == SIGINT || sig == SIGTERM) {
                break;
            }
            if (a->max_requests > 0 && server.requests_served() >= a->max_requests) {
                break;
            }
        }
        server.stop();
        const auto s = registry.stats();
        std::cout << "served " << server.requests_served() << " loads " << s.load_count << " evictions "
                  << s.evict_count << " peak_bytes " << s.peak_bytes << " violations " << s.violations << std::endl;
    });
}

void add_query(CLI::App& app) {
    auto* c = app.add_subcommand("query", "Send one request to a running server");
    struct Args {
        std::string host = "127.0.0.1", query, expert, id = "1";
        std::uint16_t port = 0;
        std::optional<std::size_t> max_new;
    };
    auto a = std::make_shared<Args>();
    c->add_option("--host", a->host, "Server address")->capture_default_str();
    c->add_option("--port", a->port, "Server port")->required();
    c->add_option("--query", a->query, "Query text")->required();
    c->add_option("--expert", a->expert, "Expert id (default: routed)");
    c->add_option("--max-new", a->max_new, "Tokens to generate");
    c->add_option("--id", a->id, "Request id")->capture_default_str();
    c->callback([a] {
        JsonlClient client(a->host, a->port);
        ServeRequest req{a->id, a->query, std::nullopt, a->max_new};
        if (!a->expert.empty()) {
            req.expert = a->expert;
        }
        const ServeResponse r = client.request(req);
        auto j = r.to_json();
        std::cout << j.dump() << '\n';
        if (r.error) {
            fail(ErrorKind::protocol, "server error " + r.error->kind + ": " + r.error->message);
        }
    });
}

// ---------------------------------------------------------------------------
// bench / report

void add_bench(CLI::App& app) {
    auto* c = app.add_subcommand("bench", "Time the shared base GEMM against the per-expert delta stage");
    struct Args {
        std::size_t experts = 4, seq = 128, batch = 1, reps = 10, width = 64, depth = 4, salient_k = 8;
        int bits = 2;
        std::uint64_t seed = default_seed();
    };
    auto a = std::make_shared<Args>();
    c->add_option("--experts", a->experts, "Largest expert count")->capture_default_str();
    c->add_option("--seq", a->seq, "Rows per sequence")->capture_default_str();
    c->add_option("--batch", a->batch, "Sequences per expert")->capture_default_str();
    c->add_option("--reps", a->reps, "Repetitions (first 3 are warmup)")->capture_default_str();
    c->add_option("--width", a->width, "Model width")->capture_default_str();
    c->add_option("--depth", a->depth, "Model depth")->capture_default_str();
    c->add_option("--bits", a->bits, "Code width")->capture_default_str();
    c->add_option("--salient-k", a->salient_k, "Salient rows")->capture_default_str();
    c->add_option("--seed", a->seed, "RNG seed");
    c->callback([a] {
        require(a->experts >= 1, ErrorKind::invalid_argument, "bench needs at least one expert");
        const ToyLM base = make_toy_model({.vocab = 256, .width = a->width, .depth = a->depth, .seed = a->seed});
        const auto domains = standard_domains();
        std::vector<DeltaSet> experts;
        Rng rng(a->seed);
        for (std::size_t e = 0; e < a->experts; ++e) {
            const auto& d = domains[e % domains.size()];
            const auto ex = synthesize_expert(base, {.domain = d.key, .seed = a->seed + 1 + e});
            std::vector<TokenSequence> calib;
            for (int i = 0; i < 4; ++i) {
                calib.push_back(tokenize(make_calibration_text(d, rng, 32)));
            }
            CompressExpertOptions opt;
            opt.config.bits = a->bits;
            opt.config.salient_k = std::min(a->salient_k, a->width);
            opt.distill = false;
            experts.push_back(providers_for(compress_expert(base, ex.model, calib, opt).artifact));
        }
        std::cout << "experts,base_gemm_median_ms,base_gemm_p90_ms,delta_median_ms,delta_p90_ms,total_median_ms,"
                     "total_p90_ms,samples\n";
        for (std::size_t n = 1; n <= a->experts; n = n * 2 > a->experts && n != a->experts ? a->experts : n * 2) {
            const std::vector<DeltaSet> group(experts.begin(), experts.begin() + static_cast<std::ptrdiff_t>(n));
            const auto r = bench_decode(base, group, a->seq, a->batch, a->reps, a->seed);
            std::cout << n << ',' << format_fixed(r.base_gemm_ms.median_ms, 4) << ','
                      << format_fixed(r.base_gemm_ms.p90_ms, 4) << ',' << format_fixed(r.delta_stage_ms.median_ms, 4)
                      << ',' << format_fixed(r.delta_stage_ms.p90_ms, 4) << ','
                      << format_fixed(r.total_ms.median_ms, 4) << ',' << format_fixed(r.total_ms.p90_ms, 4) << ','
                      << r.samples << (r.no_variance ? " no-variance" : "") << '\n';
            if (n == a->experts) {
                break;
            }
        }
    });
}

void add_report(CLI::App& app) {
    auto* report = app.add_subcommand("report", "Size and rank analytics");
    report->require_subcommand(1);
    {
        auto* c = report->add_subcommand("ratio", "Compression ratio M*psi/(psi + M*psit + phi) as CSV");
        struct Args {
            double psi = 0.0, psit = 0.0, phi = 0.0;
            std::string range = "1..16", base, artifact, router;
        };
        auto a = std::make_shared<Args>();
        c->add_option("--psi", a->psi, "Base model size (e.g. GB)");
        c->add_option("--psit", a->psit, "Compressed delta size");
        c->add_option("--phi", a->phi, "Router size");
        c->add_option("--m-range", a->range, "Expert counts LO..HI")->capture_default_str();
        c->add_option("--base", a->base, "Base .toyl: psi = 2 bytes per parameter");
        c->add_option("--artifact", a->artifact, "Artifact .mesw: psit = its byte size");
        c->add_option("--router", a->router, "Router .mert: phi = its byte size");
        c->callback([a] {
            SizeModel s{a->psi, a->psit, a->phi, 1};
            if (!a->base.empty()) {
                const ToyLM b = load_model(a->base);
                std::size_t params = b.embedding.size() + b.head.size();
                for (const auto& w : b.layers) {
                    params += w.size();
                }
                s.psi = 2.0 * static_cast<double>(params);
            }
            if (!a->artifact.empty()) {
                s.psi_tilde = static_cast<double>(fs::file_size(a->artifact));
            }
            if (!a->router.empty()) {
                s.phi = static_cast<double>(fs::file_size(a->router));
            }
            const auto [lo, hi] = parse_range(a->range);
            write_ratio_csv(std::cout, ratio_curve(s, lo, hi));
        });
    }
    {
        auto* c = report->add_subcommand("energy", "Cumulative singular-value energy of each layer's delta as CSV");
        auto base = std::make_shared<std::string>();
        auto ft = std::make_shared<std::string>();
        c->add_option("--base", *base, "Base .toyl")->required();
        c->add_option("--finetuned", *ft, "Fine-tuned .toyl")->required();
        c->callback([=] {
            const ToyLM b = load_model(*base);
            const ToyLM f = load_model(*ft);
            require(b.depth() == f.depth(), ErrorKind::dimension_mismatch, "base and fine-tuned depths differ");
            std::vector<DenseMatrix> deltas;
            for (std::size_t l = 0; l < b.depth(); ++l) {
                deltas.push_back(extract_delta(f.layers[l], b.layers[l]));
            }
            write_energy_csv(std::cout, cumulative_energy_report(deltas));
        });
    }
}

void print_error(std::string_view kind, std::string_view message) {
    std::cerr << nlohmann::json{{"error", {{"kind", kind}, {"message", message}}}}.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"meswitch: compressed delta experts on a shared toy base model"};
    app.require_subcommand(1);
    try {
        add_synth(app);
        add_compress(app);
        add_inspect(app);
        add_register(app);
        add_router(app);
        add_serve(app);
        add_query(app);
        add_bench(app);
        add_report(app);
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        print_error("usage", e.what());
        return 2;
    } catch (const Error& e) {
        print_error(kind_name(e.kind()), e.what());
        return 1;
    } catch (const std::exception& e) {
        print_error("internal", e.what());
        return 1;
    }
    return 0;
}
