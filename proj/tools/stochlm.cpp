// Command-line front end. Exit codes: 0 success, 1 other failure,
// 2 configuration error, 3 numerical failure.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "stochlm/app.hpp"

namespace {

constexpr int kExitOther = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Stochastic landmark dynamics: simulation, moment fitting, bridges and EM"};
    app.require_subcommand(1);
    app.set_version_flag("--version", stochlm::kVersion);

    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out_dir = "out";
    for (const auto& name : stochlm::command_names()) {
        auto* sub = app.add_subcommand(name, "run the " + name + " command");
        sub->add_option("--config", config_path, "run configuration (JSON)")->required();
        sub->add_option("--seed", seed, "overrides the configuration seed");
        sub->add_option("--out", out_dir, "output directory")->capture_default_str();
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }

    const std::string command = app.get_subcommands().front()->get_name();
    try {
        const std::filesystem::path cfg_file(config_path);
        const stochlm::json raw = stochlm::read_json_file(cfg_file);
        const stochlm::RunConfig cfg = stochlm::parse_config(raw, cfg_file.parent_path(), seed);
        stochlm::run_command(command, cfg, out_dir);
    } catch (const stochlm::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const stochlm::NumericalError& e) {
        std::cerr << "numerical failure in " << command << ": " << e.what() << "\n";
        return kExitNumerical;
    } catch (const std::exception& e) {
        std::cerr << "error in " << command << ": " << e.what() << "\n";
        return kExitOther;
    }
    return 0;
}
