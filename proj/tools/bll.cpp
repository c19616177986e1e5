// Command-line driver: bll {stats,fit,evaluate,synth,inspect} [options]

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "bll/pipeline.hpp"

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitRuntime = 3;

struct Flags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> workers;
    std::vector<std::string> family;
    std::vector<std::string> kind;
    std::optional<std::uint32_t> k;
    std::optional<std::size_t> select_k;
    std::optional<std::string> out;
    std::optional<std::string> data;
    std::optional<std::string> eval;
    std::string preset = "signal";
    std::size_t limit = 5;
};

bll::PipelineConfig pipeline_config(const Flags& f) {
    bll::PipelineConfig c;
    if (!f.config.empty()) bll::apply_config_json(c, bll::read_json_file(f.config));
    // flags win over the config file
    if (f.data) c.train = *f.data;
    if (f.eval) c.eval = *f.eval;
    if (f.out) c.out = *f.out;
    if (f.seed) c.cv.seed = *f.seed;
    if (f.workers) c.cv.workers = *f.workers;
    if (f.k) c.rank = *f.k;
    if (f.select_k) c.cv.select_k = *f.select_k;
    if (!f.family.empty()) {
        c.families.clear();
        for (const auto& s : f.family) c.families.push_back(bll::parse_family(s));
    }
    if (!f.kind.empty()) {
        c.kinds.clear();
        for (const auto& s : f.kind) c.kinds.push_back(bll::parse_kind(s));
    }
    if (c.cv.workers == 0) throw bll::ValidationError("--workers must be >= 1");
    return c;
}

bll::synth::SynthConfig synth_config(const Flags& f) {
    bll::synth::SynthConfig c;
    if (f.preset == "null")
        c = bll::synth::null_preset();
    else if (f.preset != "signal")
        throw bll::ValidationError("unknown preset '" + f.preset + "' (expected signal or null)");
    if (!f.config.empty()) {
        const auto j = bll::read_json_file(f.config);
        if (j.contains("synth")) c = bll::synth::config_from_json(j["synth"], c);
    }
    if (f.seed) c.seed = *f.seed;
    c.validate();
    return c;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Per-neuron Bayesian linear models of hidden-state dynamics as correctness features"};
    app.require_subcommand(1);
    Flags f;
    app.add_option("--config", f.config, "JSON config file");
    app.add_option("--seed", f.seed, "CV seed (synth: generator seed)");
    app.add_option("--workers", f.workers, "worker threads");
    app.add_option("--family", f.family, "density, regression, ridge or raw (repeatable)")->expected(1)->take_all();
    app.add_option("--kind", f.kind, "cor, incor, ratio or raw (repeatable)")->expected(1)->take_all();
    app.add_option("--k", f.k, "truncation rank K of the per-layer basis");
    app.add_option("--select-k", f.select_k, "features kept by ANOVA selection");
    app.add_option("--out", f.out, "output directory");
    app.add_option("--data", f.data, "training .blla file");
    app.add_option("--eval", f.eval, "evaluation .blla file (defaults to the training file)");

    auto* stats = app.add_subcommand("stats", "collect sufficient statistics")->fallthrough();
    auto* fit = app.add_subcommand("fit", "fit per-neuron models from the stats cache")->fallthrough();
    auto* evaluate = app.add_subcommand("evaluate", "nested cross-validation report")->fallthrough();
    auto* synth = app.add_subcommand("synth", "write a synthetic train/eval pair with ground truth")->fallthrough();
    synth->add_option("--preset", f.preset, "signal or null");
    auto* inspect = app.add_subcommand("inspect", "print header and record summaries")->fallthrough();
    std::string inspect_path;
    inspect->add_option("file", inspect_path, ".blla file (defaults to --data)");
    inspect->add_option("--limit", f.limit, "records to list");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitValidation;
    }

    try {
        if (stats->parsed()) {
            bll::cmd_stats(pipeline_config(f), std::cout);
        } else if (fit->parsed()) {
            bll::cmd_fit(pipeline_config(f), std::cout, std::cerr);
        } else if (evaluate->parsed()) {
            bll::cmd_evaluate(pipeline_config(f), std::cout);
        } else if (synth->parsed()) {
            bll::cmd_synth(synth_config(f), f.out.value_or("out"), std::cout);
        } else if (inspect->parsed()) {
            const std::string path = !inspect_path.empty() ? inspect_path : f.data.value_or("");
            if (path.empty()) throw bll::ValidationError("inspect: no file given");
            bll::cmd_inspect(path, std::cout, f.limit);
        }
    } catch (const bll::ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return 0;
}
