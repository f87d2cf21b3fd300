#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "rmm/harness.hpp"

namespace {

enum ExitStatus : int { ok = 0, numerical_failure = 1, config_error = 2, oracle_failure = 3 };

struct Options {
    std::string config;
    std::string preset;
    std::optional<int> steps;
    std::optional<int> paths;
    std::vector<int> agents;
    std::uint64_t seed = 0;
    std::string out = "out";
    bool regression = false;
    std::string target = "major";
    double delta = 0.1;
};

// Per-subcommand defaults: the solver runs on a fine grid, ensembles on a coarse one.
rmm::RunConfig make_config(const Options& o, int default_steps, std::vector<int> default_agents) {
    if (!o.config.empty() && !o.preset.empty()) throw rmm::ConfigError("give either --config or --preset, not both");
    rmm::RunConfig c;
    c.scenario = !o.config.empty() ? o.config : !o.preset.empty() ? o.preset : c.scenario;
    c.steps = o.steps.value_or(default_steps);
    c.paths = o.paths.value_or(c.paths);
    c.agents = o.agents.empty() ? std::move(default_agents) : o.agents;
    c.seed = o.seed;
    c.out_dir = o.out;
    if (o.regression) c.checks.push_back("regression");
    c.deviation_target = o.target;
    c.deviation_delta = o.delta;
    rmm::check_run_config(c);
    return c;
}

void print(const nlohmann::json& j) { std::cout << j.dump(2) << '\n'; }

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Major-minor mean-field game solver and simulation harness"};
    app.require_subcommand(1);
    Options o;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", o.config, "scenario JSON file");
        cmd->add_option("--preset", o.preset, "built-in scenario name");
        cmd->add_option("--steps", o.steps, "time steps");
        cmd->add_option("--seed", o.seed, "RNG seed");
        cmd->add_option("--out", o.out, "output directory");
    };
    auto add_ensemble = [&](CLI::App* cmd) {
        cmd->add_option("--paths", o.paths, "Monte Carlo replications");
        cmd->add_option("--agents", o.agents, "comma-separated minor-agent counts")->delimiter(',');
    };

    auto* validate = app.add_subcommand("validate", "check scenario parameters");
    add_common(validate);
    auto* solve = app.add_subcommand("solve", "solve the limiting problem and write coefficient tables");
    add_common(solve);
    auto* simulate = app.add_subcommand("simulate", "simulate finite-N and limiting populations");
    add_common(simulate);
    add_ensemble(simulate);
    simulate->add_flag("--regression", o.regression, "also estimate payoffs by Picard regression");
    auto* converge = app.add_subcommand("converge", "sweep N and fit convergence rates");
    add_common(converge);
    add_ensemble(converge);
    auto* examples = app.add_subcommand("examples", "run the closed-form oracle checks");
    examples->add_option("--seed", o.seed, "RNG seed");
    examples->add_option("--out", o.out, "output directory");
    auto* deviate = app.add_subcommand("deviate", "payoff change under a unilateral control shift");
    add_common(deviate);
    add_ensemble(deviate);
    deviate->add_option("--target", o.target, "deviating agent: major or minor");
    deviate->add_option("--delta", o.delta, "constant control shift");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int status = app.exit(e);
        return status == 0 ? ok : config_error;
    }

    try {
        if (validate->parsed()) {
            const nlohmann::json report = rmm::run_validate(make_config(o, 1, {1}));
            print(report);
            return report.at("valid").get<bool>() ? ok : config_error;
        }
        if (solve->parsed()) {
            print(rmm::run_solve(make_config(o, 2000, {1})));
            return ok;
        }
        if (simulate->parsed()) {
            print(rmm::run_simulate(make_config(o, 100, {16})));
            return ok;
        }
        if (converge->parsed()) {
            print(rmm::to_json(rmm::run_converge(make_config(o, 100, {4, 8, 16, 32, 64, 128, 256, 512}))));
            return ok;
        }
        if (examples->parsed()) {
            const rmm::ExamplesReport report = rmm::run_examples(make_config(o, 1, {1}));
            for (const auto& c : report.checks) {
                std::cout << (c.passed() ? "PASS " : c.counted ? "FAIL " : "KNOWN ") << c.name
                          << ": max error " << c.max_error << " (tol " << c.tolerance << ")\n";
            }
            return report.passed() ? ok : oracle_failure;
        }
        if (deviate->parsed()) {
            print(rmm::run_deviate(make_config(o, 100, {16})));
            return ok;
        }
    } catch (const rmm::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return config_error;
    } catch (const rmm::NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return numerical_failure;
    }
    return ok;
}
