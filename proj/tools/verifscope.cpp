// verifscope: train a small arithmetic-reasoning transformer and inspect the
// mechanism it uses to verify its own intermediate results.

#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>

#include "verifscope/pipeline.hpp"

using namespace verifscope;

int main(int argc, char** argv) {
    CLI::App app{"verifscope: toy transformer self-verification analysis"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir;
    uint64_t seed = 0;
    bool have_seed = false, have_out = false, force = false;

    app.add_option("--config", config_path, "JSON run configuration file")
        ->check(CLI::ExistingFile);
    app.add_option("--seed", seed, "override the run seed")
        ->each([&](const std::string&) { have_seed = true; });
    app.add_option("--out", out_dir, "override the output directory")
        ->each([&](const std::string&) { have_out = true; });

    struct Cmd {
        const char* name;
        const char* desc;
        std::string (*fn)(const RunConfig&);
    };
    const Cmd cmds[] = {
        {"gen-data", "generate training/validation corpora and eval instances",
         stage_gen_data},
        {"train", "train the transformer on the generated corpus", stage_train},
        {"capture", "record activation traces on validation samples", stage_capture},
        {"probe", "train linear valid/invalid probes on each layer", stage_probe},
        {"lens", "project intermediate states through the unembedding", stage_lens},
        {"glu-select", "select GLU output vectors aligned with the probes",
         stage_glu_select},
        {"heads", "detect previous-token attention heads", stage_heads},
        {"score-heads", "rank candidate heads by several weight-based scores",
         stage_score_heads},
        {"search-subset", "greedy search for a minimal causal head subset",
         stage_search_subset},
        {"intervene", "run targeted ablations against random baselines",
         stage_intervene},
        {"steer", "add the probe direction to the residual stream during generation",
         stage_steer},
        {"transfer", "fit and audit linear embedding-space maps", stage_transfer},
    };
    for (const Cmd& c : cmds) app.add_subcommand(c.name, c.desc)->fallthrough();
    CLI::App* report = app.add_subcommand(
        "report", "aggregate all artifacts into a single report");
    report->fallthrough();
    report->add_flag("--force", force, "allow artifacts from mismatched configs");

    CLI11_PARSE(app, argc, argv);

    try {
        RunConfig cfg =
            config_path.empty() ? default_run_config() : load_run_config(config_path);
        if (have_seed) {
            cfg.seed = seed;
            cfg.train.seed = seed;
            cfg.probe.seed = seed;
        }
        if (have_out) cfg.out_dir = out_dir;

        std::string summary;
        const std::string sub = app.get_subcommands().front()->get_name();
        if (sub == "report") {
            summary = stage_report(cfg, force);
        } else {
            for (const Cmd& c : cmds) {
                if (sub == c.name) {
                    summary = c.fn(cfg);
                    break;
                }
            }
        }
        std::printf("%s\n", summary.c_str());
        return 0;
    } catch (const VsError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return e.exit_code();
    } catch (const std::exception& e) {
        std::fprintf(stderr, "internal error: %s\n", e.what());
        return 1;
    }
}
