#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <random>
#include <sstream>
#include <string>

#include <sys/wait.h>

#include <gtest/gtest.h>

#include "rmm/harness.hpp"

namespace {

namespace fs = std::filesystem;
using namespace rmm;

fs::path scratch_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("rmm_harness_test_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& path) {
    std::ifstream file(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(file), std::istreambuf_iterator<char>()};
}

void write_text(const fs::path& path, const std::string& text) { std::ofstream(path, std::ios::binary) << text; }

TEST(Csv, QuotesOnlyWhenNeeded) {
    EXPECT_EQ(csv_field("plain"), "plain");
    EXPECT_EQ(csv_field("a,b"), "\"a,b\"");
    EXPECT_EQ(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
    EXPECT_EQ(csv_field("two\nlines"), "\"two\nlines\"");
    EXPECT_EQ(csv_field("cr\r"), "\"cr\r\"");
}

TEST(Csv, TableLayout) {
    CsvTable table({"t", "name, with comma"});
    table.add_row(std::vector<double>{0.5, -1e-20});
    table.add_row(std::vector<std::string>{"x", "y\"z"});
    EXPECT_EQ(table.str("{\"seed\":1}"), "# {\"seed\":1}\nt,\"name, with comma\"\n0.5,-1e-20\nx,\"y\"\"z\"\n");
    EXPECT_THROW(table.add_row(std::vector<double>{1.0}), NumericalError);
}

TEST(Csv, NumbersRoundTrip) {
    std::mt19937_64 gen(1);
    std::uniform_real_distribution<double> unif(-1e6, 1e6);
    for (int i = 0; i < 1000; ++i) {
        const double x = unif(gen) * std::pow(10.0, static_cast<int>(gen() % 40) - 20);
        EXPECT_EQ(std::stod(format_number(x)), x);
    }
    EXPECT_EQ(format_number(0.1), "0.1");
}

TEST(RunConfig, JsonRoundTrip) {
    RunConfig c;
    c.scenario = "coupled_generic";
    c.agents = {3, 9};
    c.seed = 12345678901234ULL;
    c.checks = {"regression"};
    c.deviation_target = "minor";
    c.deviation_delta = -0.25;
    EXPECT_EQ(run_config_from_json(to_json(c)), c);
    EXPECT_THROW(run_config_from_json(nlohmann::json{{"scenario", "x"}}), ConfigError);
}

TEST(RunConfig, Validation) {
    RunConfig c;
    c.agents = {};
    EXPECT_THROW(check_run_config(c), ConfigError);
    c = RunConfig{};
    c.deviation_target = "everyone";
    EXPECT_THROW(check_run_config(c), ConfigError);
    c = RunConfig{};
    c.steps = 0;
    EXPECT_THROW(check_run_config(c), ConfigError);
}

TEST(Scenario, PresetFileAndOverrides) {
    const fs::path dir = scratch_dir("scenario");
    write_text(dir / "override.json", R"({"preset": "example_eg1", "params": {"f8": 0.0}})");
    write_text(dir / "flat.json", R"({"T": 2.0, "R0": 1.5, "b1": -0.1})");
    write_text(dir / "bad.json", R"({"preset": "example_eg1", "extra": 1})");
    write_text(dir / "broken.json", "{not json");
    const ModelParams overridden = load_scenario((dir / "override.json").string());
    EXPECT_EQ(overridden, make_eg1(1.0, 0.5, 0.0, 0.0, 0.2));
    const ModelParams flat = load_scenario((dir / "flat.json").string());
    EXPECT_EQ(flat.horizon, 2.0);
    EXPECT_EQ(flat.b1, -0.1);
    EXPECT_EQ(load_scenario("forward_cz"), load_preset("forward_cz"));
    EXPECT_THROW(load_scenario((dir / "bad.json").string()), ConfigError);
    EXPECT_THROW(load_scenario((dir / "broken.json").string()), ConfigError);
    EXPECT_THROW(load_scenario("no_such_scenario"), ConfigError);
}

TEST(LineFit, RecoversExactLine) {
    const std::vector<double> x{0, 1, 2, 3}, y{1, 3, 5, 7}, se{0.1, 0.2, 0.1, 0.3};
    const LineFit f = weighted_line_fit(x, y, se);
    ASSERT_TRUE(f.valid);
    EXPECT_NEAR(f.slope, 2.0, 1e-14);
    EXPECT_NEAR(f.intercept, 1.0, 1e-14);
    EXPECT_GT(f.standard_error, 0.0);
    EXPECT_FALSE(weighted_line_fit({1.0}, {1.0}, {0.1}).valid);
}

TEST(LineFit, WeightsFollowInverseVariance) {
    // One precise point pins the line through itself.
    const std::vector<double> x{0, 1, 2}, y{0, 10, 2}, se{1e-6, 10.0, 1e-6};
    const LineFit f = weighted_line_fit(x, y, se);
    EXPECT_NEAR(f.slope, 1.0, 1e-6);
}

std::vector<ConvergencePoint> synthetic_points() {
    std::vector<ConvergencePoint> points;
    for (int n : {4, 8, 16, 32, 64}) {
        ConvergencePoint p;
        p.agents = n;
        p.state_major = {2.0 / n, 0.01 / n};
        p.state_minor = {1.0 / n, 0.02 / n};
        p.payoff_major = {0.5 / std::sqrt(n), 0.05 / std::sqrt(n)};
        p.payoff_minor = {0.3 / n, 0.02 / std::sqrt(n)};
        points.push_back(p);
    }
    return points;
}

TEST(Convergence, VerdictsOnSyntheticRates) {
    const ConvergenceReport r = assess_convergence(RunConfig{}, synthetic_points());
    EXPECT_NEAR(r.state_major_fit.slope, -1.0, 1e-12);
    EXPECT_NEAR(r.state_minor_fit.slope, -1.0, 1e-12);
    EXPECT_EQ(r.state_verdict, Verdict::pass);
    EXPECT_EQ(r.payoff_verdict, Verdict::pass);
    EXPECT_TRUE(r.flags.empty());
}

TEST(Convergence, GrowingScaledPayoffGapFails) {
    auto points = synthetic_points();
    for (auto& p : points) p.payoff_major = {0.5, 0.01};
    EXPECT_EQ(assess_convergence(RunConfig{}, points).payoff_verdict, Verdict::fail);
}

TEST(Convergence, SlowStateRateFails) {
    auto points = synthetic_points();
    for (auto& p : points) p.state_minor = {1.0 / std::sqrt(p.agents), 0.001};
    EXPECT_EQ(assess_convergence(RunConfig{}, points).state_verdict, Verdict::fail);
}

TEST(Convergence, FitsInvariantUnderSweepOrder) {
    auto points = synthetic_points();
    std::mt19937 gen(3);
    const ConvergenceReport sorted = assess_convergence(RunConfig{}, points);
    for (int trial = 0; trial < 5; ++trial) {
        std::shuffle(points.begin(), points.end(), gen);
        const ConvergenceReport shuffled = assess_convergence(RunConfig{}, points);
        EXPECT_EQ(to_json(shuffled).dump(), to_json(sorted).dump());
    }
}

TEST(Convergence, NoiseDominatedGapIsInconclusive) {
    auto points = synthetic_points();
    points.back().payoff_minor = {1e-4, 1e-3};
    const ConvergenceReport r = assess_convergence(RunConfig{}, points);
    ASSERT_FALSE(r.flags.empty());
    EXPECT_NE(r.flags.front().find("inconclusive at N=64"), std::string::npos);
}

TEST(Convergence, DecoupledScenarioIsFlaggedInconclusive) {
    RunConfig c;
    c.scenario = "decoupled";
    c.steps = 20;
    c.paths = 50;
    c.agents = {4, 8, 16};
    c.out_dir = scratch_dir("decoupled").string();
    const ConvergenceReport r = run_converge(c);
    EXPECT_EQ(r.state_verdict, Verdict::inconclusive);
    EXPECT_FALSE(r.flags.empty());
    EXPECT_TRUE(fs::exists(fs::path(c.out_dir) / "convergence.csv"));
}

TEST(Convergence, RequiresDeterministicOffsets) {
    RunConfig c;
    c.scenario = "example_eg4";
    c.out_dir = scratch_dir("eg4conv").string();
    EXPECT_THROW(run_converge(c), PreconditionError);
}

TEST(Solve, Eg1WithoutMajorFeedbackReportsZeroRiccati) {
    const fs::path dir = scratch_dir("solve_eg1");
    write_text(dir / "eg1.json", R"({"preset": "example_eg1", "params": {"f8": 0.0}})");
    RunConfig c;
    c.scenario = (dir / "eg1.json").string();
    c.steps = 200;
    c.out_dir = (dir / "out").string();
    const nlohmann::json summary = run_solve(c);
    EXPECT_LE(summary.at("S_max_abs").get<double>(), 1e-14);
    for (const char* name : {"condition_report.json", "solution.csv", "feedback.csv", "summary.json"}) {
        EXPECT_TRUE(fs::exists(dir / "out" / name)) << name;
    }
    const nlohmann::json written = nlohmann::json::parse(slurp(dir / "out" / "summary.json"));
    EXPECT_EQ(run_config_from_json(written.at("config")), c);
    EXPECT_TRUE(written.contains("git_revision"));
    EXPECT_EQ(slurp(dir / "out" / "solution.csv").rfind("# {", 0), 0u);
}

TEST(Solve, Eg4DeterminantPathInReport) {
    RunConfig c;
    c.scenario = "example_eg4";
    c.steps = 100;
    c.out_dir = scratch_dir("solve_eg4").string();
    run_solve(c);
    const auto report = nlohmann::json::parse(slurp(fs::path(c.out_dir) / "condition_report.json"));
    const auto& path = report.at("report").at("A5_closed_form").at("path");
    ASSERT_EQ(path.size(), 101u);
    for (const auto& node : path) {
        const double t = node[0].get<double>(), det = node[1].get<double>();
        EXPECT_NEAR(det / std::exp(2.0 * t), 1.0, 1e-10);
    }
}

TEST(Solve, InvalidScenarioNamesConstraint) {
    const fs::path dir = scratch_dir("solve_bad");
    write_text(dir / "bad.json", R"({"preset": "coupled_generic", "params": {"R": 0.0}})");
    RunConfig c;
    c.scenario = (dir / "bad.json").string();
    c.out_dir = (dir / "out").string();
    try {
        run_solve(c);
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("R must be strictly positive"), std::string::npos);
    }
}

TEST(Simulate, OutputsAreBitIdenticalAcrossWorkerCounts) {
    RunConfig c;
    c.scenario = "coupled_generic";
    c.steps = 16;
    c.paths = 40;
    c.agents = {3, 5};
    c.seed = 17;
    c.checks = {"regression"};
    c.out_dir = scratch_dir("determinism").string();
    auto run_with = [&](const char* threads) {
        setenv("RMM_THREADS", threads, 1);
        run_simulate(c);
        unsetenv("RMM_THREADS");
        std::map<std::string, std::string> files;
        for (const auto& entry : fs::directory_iterator(c.out_dir)) {
            files[entry.path().filename().string()] = slurp(entry.path());
        }
        return files;
    };
    const auto one = run_with("1");
    const auto three = run_with("3");
    EXPECT_EQ(one.size(), 3u);
    EXPECT_EQ(one, three);
}

TEST(Examples, CountedChecksPass) {
    RunConfig c;
    c.out_dir = scratch_dir("examples").string();
    const ExamplesReport r = run_examples(c);
    EXPECT_TRUE(r.passed());
    EXPECT_TRUE(fs::exists(fs::path(c.out_dir) / "examples.json"));
}

#ifdef RMM_CLI_PATH
int cli_status(const std::string& args) {
    const std::string command = std::string(RMM_CLI_PATH) + " " + args + " > /dev/null 2>&1";
    const int raw = std::system(command.c_str());
    return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
}

TEST(Cli, ExitStatuses) {
    const fs::path dir = scratch_dir("cli");
    write_text(dir / "bad.json", R"({"preset": "coupled_generic", "params": {"R": 0.0}})");
    const std::string out = " --out " + (dir / "out").string();
    EXPECT_EQ(cli_status("validate --preset coupled_generic" + out), 0);
    EXPECT_EQ(cli_status("validate --config " + (dir / "bad.json").string() + out), 2);
    EXPECT_EQ(cli_status("solve --config " + (dir / "bad.json").string() + out), 2);
    EXPECT_EQ(cli_status("solve --preset no_such" + out), 2);
    EXPECT_EQ(cli_status("simulate --preset coupled_generic --steps 8 --paths 4 --agents 2,3" + out), 0);
    EXPECT_TRUE(fs::exists(dir / "out" / "trajectories_N3.csv"));
    EXPECT_EQ(cli_status("simulate --agents x" + out), 2);
    EXPECT_EQ(cli_status("frobnicate"), 2);
}
#endif

} // namespace
