#include <CLI11.hpp>

#include "deepm/cli.hpp"

int main(int argc, char** argv) {
    CLI::App app{"deepm: structured deep portfolio manager research engine"};
    app.require_subcommand(1);

    deepm::cli::RunSpec spec;
    std::string seed_str;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", spec.config_path, "run config file (JSON)");
        sub->add_option("--out", spec.out_dir, "output directory (default $DEEPM_OUT or ./deepm_out)");
        sub->add_option("--seed", seed_str, "override the config seed");
        sub->add_flag("--paper-scale", spec.paper_scale,
                      "full-scale hyperparameters (50 seeds, 1000 iterations, batch 64)");
        sub->add_option("--jobs", spec.jobs, "parallel seed workers (default: hardware)");
    };
    for (const char* name : {"synth", "features", "train", "backtest", "ablate", "verify", "report"})
        add_common(app.add_subcommand(name));

    CLI11_PARSE(app, argc, argv);

    spec.command = app.get_subcommands().front()->get_name();
    if (!seed_str.empty()) {
        spec.seed_override = std::stoull(seed_str);
        spec.has_seed_override = true;
    }
    return deepm::cli::run(spec);
}
