#include <cstdio>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "rotaprune/config.hpp"
#include "rotaprune/error.hpp"
#include "rotaprune/pipeline.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

void print_summary(const rotaprune::RunReport& r) {
    std::printf("%-6s %14s %14s %14s %14s\n", "layer", "entropy_before", "entropy_after", "dev_unrotated",
                "dev_rotated");
    for (const auto& l : r.layers) {
        std::printf("%-6zu %14.4f %14.4f %14.6g %14.6g\n", l.layer, l.entropy_before, l.entropy_after,
                    l.heldout_deviation_unrotated, l.heldout_deviation_rotated);
    }
    for (const auto& [k, v] : r.metrics) std::printf("%s = %.10g\n", k.c_str(), v);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Train orthogonal rotations that concentrate importance, then prune toy transformers."};
    app.require_subcommand(1);

    std::string config_path, output_dir;
    const char* stages[] = {"fuse", "calibrate", "denoise", "merge", "prune", "eval", "pipeline", "report"};
    const char* help[] = {
        "load or draw the model and fold its norms",
        "accumulate per-layer Hessians from calibration data",
        "train per-layer rotations",
        "fold the rotations into the weights",
        "prune the rotated model and an unrotated baseline",
        "perplexity and output deviation",
        "run every stage in order and write the report",
        "assemble the report from the stage files",
    };
    for (std::size_t i = 0; i < std::size(stages); ++i) {
        CLI::App* sub = app.add_subcommand(stages[i], help[i]);
        sub->add_option("--config", config_path, "configuration file")->required();
        sub->add_option("--output-dir", output_dir, "overrides output.dir");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitConfig;
    }

    const std::string stage = app.get_subcommands().front()->get_name();
    try {
        rotaprune::PipelineConfig config = rotaprune::load_config(config_path);
        if (!output_dir.empty()) config.output_dir = output_dir;
        if (stage == "pipeline") {
            print_summary(rotaprune::run_pipeline(config));
        } else if (stage == "report") {
            print_summary(rotaprune::run_report(config));
        } else {
            rotaprune::run_stage(stage, config);
        }
        std::printf("%s: done, outputs in %s\n", stage.c_str(), config.output_dir.string().c_str());
        return kExitOk;
    } catch (const rotaprune::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kExitConfig;
    } catch (const rotaprune::NumericalError& e) {
        std::fprintf(stderr, "numerical failure: %s\n", e.what());
        return kExitNumerical;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitFailure;
    }
}
