#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "kmpc/cli.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Koopman MPC transient stabilization pipeline"};
    app.require_subcommand(1);

    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> mode;

    for (const char* name : {"simulate", "collect", "fit", "control"}) {
        auto* sub = app.add_subcommand(name);
        sub->add_option("--config", config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
        sub->add_option("--out", out, "output directory")->required();
        sub->add_option("--seed", seed, "override the config seed");
        sub->add_option("--mode", mode, "none | per-grid | first-grid | centralized");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kmpc::exit_ok : kmpc::exit_config;
    }
    return kmpc::run_command(app.get_subcommands().front()->get_name(), config, out, seed, mode, std::cerr);
}
