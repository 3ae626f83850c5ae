// Command-line front end for the retrieval workbench.
#include <malloc.h>

#include <cstdint>
#include <optional>
#include <string>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "trajprior/errors.hpp"
#include "trajprior/workbench.hpp"

using namespace trajprior;

int main(int argc, char** argv) {
    // Training churns through large temporaries; keep them in the heap
    // instead of mmap/munmap on every step.
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);

    CLI::App app{"trajprior: trajectory-prior retrieval workbench"};
    app.require_subcommand(1);

    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> top_k, n_clusters, ef_search;
    std::optional<std::string> protocol, out;
    std::string config_path;
    bool verbose = false, quiet = false;

    app.add_option("--config", config_path, "flat key=value config file")->check(CLI::ExistingFile);
    app.add_option("--seed", seed, "master seed");
    app.add_option("--top-k", top_k, "references retrieved per query (default 2)");
    app.add_option("--n-clusters", n_clusters, "k-means clusters in the index");
    app.add_option("--ef-search", ef_search, "HNSW beam width at query time");
    app.add_option("--protocol", protocol, "evaluation protocol")->check(CLI::IsMember({"noavg", "temavg", "both"}));
    app.add_option("--out", out, "artifact directory");
    app.add_flag("-v,--verbose", verbose, "debug logging");
    app.add_flag("-q,--quiet", quiet, "warnings only");

    const std::pair<const char*, const char*> commands[] = {
        {"gen-data", "generate the synthetic database and query scenes"},
        {"train", "contrastive training of the clip encoder"},
        {"embed", "embed database and query scenes"},
        {"build-index", "k-means + per-cluster HNSW index over the database"},
        {"query", "retrieve Top-K trajectory priors for every query"},
        {"prompt", "assemble prompts from retrieved references"},
        {"bench", "latency table for the four retrieval strategies"},
        {"eval", "L2 / collision report under the open-loop protocols"},
    };
    for (const auto& [name, help] : commands) app.add_subcommand(name, help)->fallthrough();
    app.add_subcommand("run", "all stages in order")->fallthrough();
    auto* show = app.add_subcommand("show-config", "print the effective config")->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }
    spdlog::set_level(verbose ? spdlog::level::debug : quiet ? spdlog::level::warn : spdlog::level::info);

    try {
        PipelineConfig cfg = config_path.empty() ? PipelineConfig{} : load_config(config_path);
        if (seed) cfg.seed = *seed;
        if (top_k) cfg.top_k = *top_k;
        if (n_clusters) cfg.n_clusters = *n_clusters;
        if (ef_search) cfg.ef_search = *ef_search;
        if (protocol) cfg.protocol = *protocol;
        if (out) cfg.out = *out;
        cfg.validate();

        const CLI::App* sub = app.get_subcommands().front();
        if (sub == show) {
            fmt::print("{}", cfg.to_text());
        } else if (sub->get_name() == "run") {
            run_pipeline(cfg);
        } else {
            run_stage(parse_stage(sub->get_name()), cfg);
        }
    } catch (const StageDependencyError& e) {
        spdlog::error("{}", e.what());
        return 3;
    } catch (const ConfigError& e) {
        spdlog::error("config: {}", e.what());
        return 2;
    } catch (const Error& e) {
        spdlog::error("{}", e.what());
        return 1;
    } catch (const std::exception& e) {
        spdlog::error("unexpected: {}", e.what());
        return 1;
    }
    return 0;
}
