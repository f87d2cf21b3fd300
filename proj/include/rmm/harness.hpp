#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "assembly.hpp"
#include "csv.hpp"
#include "examples.hpp"
#include "model.hpp"
#include "numerics.hpp"
#include "parallel.hpp"
#include "particles.hpp"
#include "solver.hpp"

#ifndef RMM_GIT_REVISION
#define RMM_GIT_REVISION "unknown"
#endif

namespace rmm {

// ---------------------------------------------------------------- run configuration

struct RunConfig {
    std::string scenario = "example_eg4";  // preset name or path to a JSON scenario
    int steps = 2000;
    int paths = 1000;
    std::vector<int> agents{4, 8, 16, 32, 64, 128, 256, 512};
    std::uint64_t seed = 0;
    std::string out_dir = "out";
    std::vector<std::string> checks;  // optional extra checks, e.g. "regression"
    std::string deviation_target = "major";
    double deviation_delta = 0.1;

    bool wants(std::string_view check) const {
        return std::find(checks.begin(), checks.end(), check) != checks.end();
    }
    friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

inline nlohmann::json to_json(const RunConfig& c) {
    return {{"scenario", c.scenario},
            {"steps", c.steps},
            {"paths", c.paths},
            {"agents", c.agents},
            {"seed", c.seed},
            {"out_dir", c.out_dir},
            {"checks", c.checks},
            {"deviation", {{"target", c.deviation_target}, {"delta", c.deviation_delta}}}};
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
    try {
        RunConfig c;
        c.scenario = j.at("scenario").get<std::string>();
        c.steps = j.at("steps").get<int>();
        c.paths = j.at("paths").get<int>();
        c.agents = j.at("agents").get<std::vector<int>>();
        c.seed = j.at("seed").get<std::uint64_t>();
        c.out_dir = j.at("out_dir").get<std::string>();
        c.checks = j.at("checks").get<std::vector<std::string>>();
        c.deviation_target = j.at("deviation").at("target").get<std::string>();
        c.deviation_delta = j.at("deviation").at("delta").get<double>();
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("run config: ") + e.what());
    }
}

inline void check_run_config(const RunConfig& c) {
    if (c.steps < 1) throw ConfigError("steps must be at least 1");
    if (c.paths < 1) throw ConfigError("paths must be at least 1");
    if (c.agents.empty()) throw ConfigError("agent list is empty");
    for (int n : c.agents) {
        if (n < 1) throw ConfigError("agent counts must be at least 1");
    }
    if (c.deviation_target != "major" && c.deviation_target != "minor") {
        throw ConfigError("deviation target must be 'major' or 'minor'");
    }
    if (!std::isfinite(c.deviation_delta)) throw ConfigError("deviation delta must be finite");
}

// Scenario file: either a parameter object, or {"preset": name, "params": overrides}.
inline ModelParams load_scenario(const std::string& scenario) {
    const std::filesystem::path path(scenario);
    if (!std::filesystem::exists(path)) return load_preset(scenario);
    std::ifstream file(path);
    if (!file) throw ConfigError("cannot read scenario " + scenario);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(file);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("scenario " + scenario + ": " + e.what());
    }
    if (!j.is_object()) throw ConfigError("scenario " + scenario + " must be a JSON object");
    if (j.contains("params") || j.contains("preset")) {
        for (const auto& [key, value] : j.items()) {
            if (key != "params" && key != "preset") throw ConfigError("scenario: unknown key '" + key + "'");
        }
        const ModelParams base = j.contains("preset") ? load_preset(j.at("preset").get<std::string>()) : ModelParams{};
        return j.contains("params") ? params_from_json(j.at("params"), base) : base;
    }
    return params_from_json(j, ModelParams{});
}

// ---------------------------------------------------------------- output files

class OutputDir {
public:
    explicit OutputDir(const RunConfig& config) : config_(config), root_(config.out_dir) {
        std::error_code ec;
        std::filesystem::create_directories(root_, ec);
        if (ec) throw ConfigError("cannot create output directory " + config.out_dir + ": " + ec.message());
    }

    // Every JSON file carries the run configuration and build revision.
    void write_json(const std::string& name, nlohmann::json body) const {
        body["config"] = to_json(config_);
        body["git_revision"] = RMM_GIT_REVISION;
        std::ofstream file(root_ / name, std::ios::binary);
        if (!file) throw ConfigError("cannot write " + (root_ / name).string());
        file << body.dump(2) << '\n';
    }

    // CSV files start with one '#' line holding the configuration.
    void write_csv(const std::string& name, const CsvTable& table) const {
        const nlohmann::json meta{{"config", to_json(config_)}, {"git_revision", RMM_GIT_REVISION}};
        table.write((root_ / name).string(), meta.dump());
    }

    std::filesystem::path path(const std::string& name) const { return root_ / name; }

private:
    RunConfig config_;
    std::filesystem::path root_;
};

// ---------------------------------------------------------------- validate

inline nlohmann::json run_validate(const RunConfig& config) {
    const ModelParams p = load_scenario(config.scenario);
    const ValidationReport report = validate(p);
    nlohmann::json j{{"scenario", config.scenario},
                     {"valid", report.ok()},
                     {"violations", report.violations},
                     {"forward_case", is_forward_case(p)},
                     {"backward_case", is_backward_case(p)}};
    return j;
}

// ---------------------------------------------------------------- solve

inline std::vector<std::string> indexed_names(const std::string& stem, int rows, int cols) {
    std::vector<std::string> names;
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) names.push_back(stem + "_" + std::to_string(r) + std::to_string(c));
    }
    return names;
}

inline std::vector<std::string> indexed_names(const std::string& stem, int count) {
    std::vector<std::string> names;
    for (int i = 0; i < count; ++i) names.push_back(stem + "_" + std::to_string(i));
    return names;
}

template <class Matrix>
void append_entries(std::vector<double>& row, const Matrix& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    }
}

inline CsvTable solution_table(const MeanFieldSolution& sol) {
    std::vector<std::string> header{"t"};
    for (auto&& n : indexed_names("S", 5, 5)) header.push_back(n);
    header.push_back("Sigma");
    for (auto&& n : indexed_names("Upsilon", 5, 3)) header.push_back(n);
    for (auto&& n : indexed_names("p_gain", 5)) header.push_back(n);
    for (auto&& n : indexed_names("p_offset", 3)) header.push_back(n);
    header.push_back("log_discount");
    CsvTable table(std::move(header));
    for (int k = 0; k <= sol.grid.steps(); ++k) {
        std::vector<double> row{sol.grid.node(k)};
        append_entries(row, sol.riccati[k]);
        row.push_back(sol.sigma[k]);
        append_entries(row, sol.upsilon[k]);
        append_entries(row, sol.p_gain[k]);
        append_entries(row, sol.p_offsets[k]);
        row.push_back(sol.log_discount[k]);
        table.add_row(row);
    }
    return table;
}

// Feedback kernels: u0 = major_gain . (x0, x1bar, L) + major_offset . (1, E_t xi0, E_t xi),
// u_i = own_gain x_i + minor_gain . (...) + minor_offset . (...).
inline CsvTable feedback_table(const EquilibriumFeedback& fb) {
    std::vector<std::string> header{"t", "own_gain"};
    for (auto&& n : indexed_names("major_gain", 5)) header.push_back(n);
    for (auto&& n : indexed_names("major_offset", 3)) header.push_back(n);
    for (auto&& n : indexed_names("minor_gain", 5)) header.push_back(n);
    for (auto&& n : indexed_names("minor_offset", 3)) header.push_back(n);
    for (auto&& n : indexed_names("mean_gain", 5)) header.push_back(n);
    for (auto&& n : indexed_names("mean_offset", 3)) header.push_back(n);
    CsvTable table(std::move(header));
    for (int k = 0; k <= fb.grid().steps(); ++k) {
        const FeedbackNode& n = fb[k];
        std::vector<double> row{fb.grid().node(k), n.own_gain};
        append_entries(row, n.major_gain);
        append_entries(row, n.major_offsets);
        append_entries(row, n.minor_gain);
        append_entries(row, n.minor_offsets);
        append_entries(row, n.mean_gain);
        append_entries(row, n.mean_offsets);
        table.add_row(row);
    }
    return table;
}

// Writes condition_report.json, solution.csv, feedback.csv and summary.json.
inline nlohmann::json run_solve(const RunConfig& config) {
    check_run_config(config);
    const ModelParams p = load_scenario(config.scenario);
    const AssembledSystem s = assemble(p);
    const TimeGrid grid(p.horizon, config.steps);
    const OutputDir out(config);

    const ConditionReport conditions = check_conditions(s, p, grid);
    out.write_json("condition_report.json", {{"report", to_json(conditions)}});
    const MeanFieldSolution sol = solve_meanfield(s, p, grid);
    const EquilibriumFeedback fb = build_feedback(sol, s, p);
    out.write_csv("solution.csv", solution_table(sol));
    out.write_csv("feedback.csv", feedback_table(fb));

    const Vec5 initial = sol.decoupled(0, sol.initial_state, 0.0, s);
    nlohmann::json summary{{"S_max_abs", riccati_max_abs(sol)},
                           {"Sigma_0", sol.sigma[0]},
                           {"Y0_major", initial(0)},
                           {"Y0_minor", initial(1)},
                           {"conditions_passed", conditions.all_passed()},
                           {"A5_max_condition", conditions.a5.extreme},
                           {"consistency_defect", consistency_defect(s, p)},
                           {"grid", {{"T", grid.horizon()}, {"steps", grid.steps()}, {"dt", grid.step()}}}};
    out.write_json("summary.json", summary);
    return summary;
}

// ---------------------------------------------------------------- simulate

inline CsvTable trajectory_table(const ParticleModel& m, const ReplicationPaths& path, int agents) {
    const int shown = std::min(agents, 3);
    std::vector<std::string> header{"t", "W0", "X0", "XN", "X1_estimate", "u0", "uN"};
    for (int j = 0; j < shown; ++j) {
        header.push_back("X_" + std::to_string(j + 1));
        header.push_back("u_" + std::to_string(j + 1));
    }
    const auto forms = control_forms(m, Population::finite, agents, {});
    CsvTable table(std::move(header));
    double w0 = 0.0;
    for (int k = 0; k <= m.grid().steps(); ++k) {
        const auto ks = static_cast<std::size_t>(k);
        if (k > 0) w0 += path.common_increments[ks - 1];
        const AggregateVec& z = path.aggregate[ks];
        std::vector<double> row{m.grid().node(k),     w0, z(coord::major), z(coord::average), z(coord::mean_estimate),
                                path.major_control[ks], path.average_control[ks]};
        for (int j = 0; j < shown; ++j) {
            const double x = path.agents(k, j);
            row.push_back(x);
            row.push_back(forms[ks].own * x + forms[ks].minor.dot(z) + (j == 0 ? forms[ks].tagged_shift : 0.0));
        }
        table.add_row(row);
    }
    return table;
}

// Writes payoffs.json (one record per N) and trajectories_N<n>.csv for replication 0.
inline nlohmann::json run_simulate(const RunConfig& config) {
    check_run_config(config);
    const ModelParams p = load_scenario(config.scenario);
    const TimeGrid grid(p.horizon, config.steps);
    const ParticleModel m = make_particle_model(p, grid);
    const OutputDir out(config);
    nlohmann::json records = nlohmann::json::array();
    for (int n : config.agents) {
        SimulationConfig sim;
        sim.agents = n;
        sim.replications = config.paths;
        sim.seed = config.seed;
        const bool regression = config.wants("regression");
        sim.record_paths = regression;
        const PairedEnsemble pe = simulate_paired(m, sim);
        nlohmann::json record = to_json(evaluate_payoffs(m, pe, ClosureMode::affine));
        if (regression) record["regression"] = to_json(evaluate_payoffs(m, pe, ClosureMode::regression));
        records.push_back(std::move(record));

        SimulationConfig one = sim;
        one.replications = 1;
        one.record_paths = true;
        const EnsembleState e = simulate_finite_N(m, one);
        out.write_csv("trajectories_N" + std::to_string(n) + ".csv", trajectory_table(m, e.paths.front(), n));
    }
    nlohmann::json body{{"records", records}};
    out.write_json("payoffs.json", body);
    return body;
}

// ---------------------------------------------------------------- convergence

struct GapEstimate {
    double value = 0.0;
    double standard_error = 0.0;
};

struct ConvergencePoint {
    int agents = 0;
    GapEstimate state_major, state_minor, payoff_major, payoff_minor;
};

// Weighted least-squares line y = intercept + slope x.
struct LineFit {
    bool valid = false;
    int points = 0;
    double slope = 0.0;
    double intercept = 0.0;
    double standard_error = 0.0;  // of the slope

    double lower() const { return slope - 1.96 * standard_error; }
    double upper() const { return slope + 1.96 * standard_error; }
};

// Inverse-variance weighted line fit; zero standard errors fall back to equal weights.
inline LineFit weighted_line_fit(const std::vector<double>& x, const std::vector<double>& y,
                                 const std::vector<double>& se) {
    LineFit fit;
    fit.points = static_cast<int>(x.size());
    if (x.size() < 2) return fit;
    const bool weighted = std::all_of(se.begin(), se.end(), [](double s) { return s > 0.0; });
    std::vector<double> w(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) w[i] = weighted ? 1.0 / (se[i] * se[i]) : 1.0;
    double sw = 0.0, sx = 0.0, sy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sw += w[i];
        sx += w[i] * x[i];
        sy += w[i] * y[i];
    }
    const double mx = sx / sw, my = sy / sw;
    double sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxx += w[i] * (x[i] - mx) * (x[i] - mx);
        sxy += w[i] * (x[i] - mx) * (y[i] - my);
    }
    if (!(sxx > 0.0)) return fit;
    fit.valid = true;
    fit.slope = sxy / sxx;
    fit.intercept = my - fit.slope * mx;
    if (weighted) {
        fit.standard_error = std::sqrt(1.0 / sxx);
    } else if (x.size() > 2) {
        double rss = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) rss += std::pow(y[i] - fit.intercept - fit.slope * x[i], 2);
        fit.standard_error = std::sqrt(rss / static_cast<double>(x.size() - 2) / sxx);
    }
    return fit;
}

// log(gap) against log(N), using points resolved above their standard error.
inline LineFit log_log_fit(const std::vector<ConvergencePoint>& points, GapEstimate ConvergencePoint::*gap) {
    std::vector<double> x, y, se;
    for (const auto& p : points) {
        const GapEstimate& g = p.*gap;
        if (!(g.value > g.standard_error)) continue;
        x.push_back(std::log(static_cast<double>(p.agents)));
        y.push_back(std::log(g.value));
        se.push_back(g.standard_error / g.value);
    }
    return weighted_line_fit(x, y, se);
}

// gap * sqrt(N) against log2(N).
inline LineFit scaled_trend_fit(const std::vector<ConvergencePoint>& points, GapEstimate ConvergencePoint::*gap) {
    std::vector<double> x, y, se;
    for (const auto& p : points) {
        const GapEstimate& g = p.*gap;
        const double root = std::sqrt(static_cast<double>(p.agents));
        x.push_back(std::log2(static_cast<double>(p.agents)));
        y.push_back(g.value * root);
        se.push_back(g.standard_error * root);
    }
    return weighted_line_fit(x, y, se);
}

enum class Verdict { pass, fail, inconclusive };

inline const char* to_string(Verdict v) {
    switch (v) {
    case Verdict::pass: return "pass";
    case Verdict::fail: return "fail";
    case Verdict::inconclusive: return "inconclusive";
    }
    return "inconclusive";
}

inline constexpr double kStateSlopeBound = -0.8;
inline constexpr double kTrendSignificance = 3.0;

struct ConvergenceReport {
    RunConfig config;
    std::vector<ConvergencePoint> points;  // sorted by N
    LineFit state_major_fit, state_minor_fit, payoff_major_trend, payoff_minor_trend;
    Verdict state_verdict = Verdict::inconclusive;
    Verdict payoff_verdict = Verdict::inconclusive;
    std::vector<std::string> flags;
};

inline ConvergencePoint convergence_point(const ParticleModel& m, const RunConfig& config, int agents) {
    SimulationConfig sim;
    sim.agents = agents;
    sim.replications = config.paths;
    sim.seed = config.seed;
    const PairedEnsemble pe = simulate_paired(m, sim);
    const PayoffRecord r = evaluate_payoffs(m, pe, ClosureMode::affine);

    ConvergencePoint point;
    point.agents = agents;
    const SampleSummary major_state = summarize(pe.major_gap), minor_state = summarize(pe.minor_gap);
    point.state_major = {major_state.mean, major_state.standard_error};
    point.state_minor = {minor_state.mean, minor_state.standard_error};

    // Payoff gaps on common random numbers: per-replication differences.
    std::vector<double> major_diff(pe.finite.costs.size()), minor_diff(pe.finite.costs.size());
    for (std::size_t i = 0; i < major_diff.size(); ++i) {
        major_diff[i] = pe.limit.costs[i].major - pe.finite.costs[i].major;
        minor_diff[i] = pe.limit.costs[i].minor - pe.finite.costs[i].minor;
    }
    const SampleSummary major_payoff = summarize(major_diff), minor_payoff = summarize(minor_diff);
    point.payoff_major = {std::abs(r.major_finite.initial_term - r.major_limit.initial_term + major_payoff.mean),
                          major_payoff.standard_error};
    point.payoff_minor = {std::abs(r.minor_finite.initial_term - r.minor_limit.initial_term + minor_payoff.mean),
                          minor_payoff.standard_error};
    return point;
}

// State-gap slope <= -0.8 and payoff gap * sqrt(N) without a significant
// upward trend. Points are sorted by N so the sweep order does not matter.
inline ConvergenceReport assess_convergence(const RunConfig& config, std::vector<ConvergencePoint> points) {
    std::sort(points.begin(), points.end(), [](const auto& a, const auto& b) { return a.agents < b.agents; });
    ConvergenceReport r;
    r.config = config;
    r.points = std::move(points);
    r.state_major_fit = log_log_fit(r.points, &ConvergencePoint::state_major);
    r.state_minor_fit = log_log_fit(r.points, &ConvergencePoint::state_minor);
    r.payoff_major_trend = scaled_trend_fit(r.points, &ConvergencePoint::payoff_major);
    r.payoff_minor_trend = scaled_trend_fit(r.points, &ConvergencePoint::payoff_minor);
    if (r.points.empty()) return r;

    const ConvergencePoint& largest = r.points.back();
    auto flag = [&](const GapEstimate& g, const char* what) {
        if (!(g.value > g.standard_error)) {
            r.flags.push_back(std::string(what) + " inconclusive at N=" + std::to_string(largest.agents));
            return true;
        }
        return false;
    };
    const bool state_unresolved = flag(largest.state_major, "state gap (major)") |
                                  flag(largest.state_minor, "state gap (minor)");
    flag(largest.payoff_major, "payoff gap (major)");
    flag(largest.payoff_minor, "payoff gap (minor)");

    const bool fits_valid = r.state_major_fit.valid && r.state_minor_fit.valid &&
                            r.state_major_fit.points == static_cast<int>(r.points.size()) &&
                            r.state_minor_fit.points == static_cast<int>(r.points.size());
    if (state_unresolved || !fits_valid) {
        r.state_verdict = Verdict::inconclusive;
    } else {
        r.state_verdict = r.state_major_fit.slope <= kStateSlopeBound && r.state_minor_fit.slope <= kStateSlopeBound
                              ? Verdict::pass
                              : Verdict::fail;
    }

    auto flat = [](const LineFit& f) { return !f.valid || f.slope <= kTrendSignificance * f.standard_error; };
    if (!r.payoff_major_trend.valid || !r.payoff_minor_trend.valid) {
        r.payoff_verdict = Verdict::inconclusive;
    } else {
        r.payoff_verdict = flat(r.payoff_major_trend) && flat(r.payoff_minor_trend) ? Verdict::pass : Verdict::fail;
    }
    return r;
}

inline nlohmann::json to_json(const GapEstimate& g) { return {{"value", g.value}, {"se", g.standard_error}}; }

inline nlohmann::json to_json(const LineFit& f) {
    return {{"valid", f.valid},     {"points", f.points},      {"slope", f.slope},
            {"intercept", f.intercept}, {"se", f.standard_error}, {"ci95", {f.lower(), f.upper()}}};
}

inline nlohmann::json to_json(const ConvergenceReport& r) {
    nlohmann::json points = nlohmann::json::array();
    for (const auto& p : r.points) {
        points.push_back({{"N", p.agents},
                          {"state_gap_major", to_json(p.state_major)},
                          {"state_gap_minor", to_json(p.state_minor)},
                          {"payoff_gap_major", to_json(p.payoff_major)},
                          {"payoff_gap_minor", to_json(p.payoff_minor)}});
    }
    return {{"points", points},
            {"state_slope_major", to_json(r.state_major_fit)},
            {"state_slope_minor", to_json(r.state_minor_fit)},
            {"payoff_sqrtN_trend_major", to_json(r.payoff_major_trend)},
            {"payoff_sqrtN_trend_minor", to_json(r.payoff_minor_trend)},
            {"state_slope_bound", kStateSlopeBound},
            {"state_verdict", to_string(r.state_verdict)},
            {"payoff_verdict", to_string(r.payoff_verdict)},
            {"flags", r.flags},
            {"environment",
             {{"M", r.config.paths}, {"seed", r.config.seed}, {"steps", r.config.steps}, {"git_revision", RMM_GIT_REVISION}}}};
}

inline CsvTable convergence_table(const ConvergenceReport& r) {
    CsvTable table({"N", "state_gap_major", "se_state_gap_major", "state_gap_minor", "se_state_gap_minor",
                    "payoff_gap_major", "se_payoff_gap_major", "payoff_gap_minor", "se_payoff_gap_minor"});
    for (const auto& p : r.points) {
        table.add_row(std::vector<double>{static_cast<double>(p.agents), p.state_major.value,
                                          p.state_major.standard_error, p.state_minor.value,
                                          p.state_minor.standard_error, p.payoff_major.value,
                                          p.payoff_major.standard_error, p.payoff_minor.value,
                                          p.payoff_minor.standard_error});
    }
    return table;
}

// Writes convergence.json and convergence.csv.
inline ConvergenceReport run_converge(const RunConfig& config) {
    check_run_config(config);
    const ModelParams p = load_scenario(config.scenario);
    if (p.xi0.kind() != TerminalCondition::Kind::deterministic_constant ||
        p.xi.kind() != TerminalCondition::Kind::deterministic_constant) {
        throw PreconditionError("convergence runs need deterministic-constant terminal offsets");
    }
    const TimeGrid grid(p.horizon, config.steps);
    const ParticleModel m = make_particle_model(p, grid);
    std::vector<ConvergencePoint> points;
    for (int n : config.agents) points.push_back(convergence_point(m, config, n));
    ConvergenceReport report = assess_convergence(config, std::move(points));
    const OutputDir out(config);
    out.write_json("convergence.json", to_json(report));
    out.write_csv("convergence.csv", convergence_table(report));
    return report;
}

// ---------------------------------------------------------------- deviations

// Writes deviation.json: the deviating agent's payoff change per N.
inline nlohmann::json run_deviate(const RunConfig& config) {
    check_run_config(config);
    const ModelParams p = load_scenario(config.scenario);
    const TimeGrid grid(p.horizon, config.steps);
    const ParticleModel m = make_particle_model(p, grid);
    const auto target = config.deviation_target == "major" ? Deviation::Target::major : Deviation::Target::tagged_minor;
    const Deviation deviation = Deviation::constant(target, config.deviation_delta, grid);
    nlohmann::json gaps = nlohmann::json::array();
    for (int n : config.agents) {
        SimulationConfig sim;
        sim.agents = n;
        sim.replications = config.paths;
        sim.seed = config.seed;
        nlohmann::json g = to_json(deviation_gap(m, sim, deviation));
        g["N"] = n;
        gaps.push_back(std::move(g));
    }
    nlohmann::json body{{"target", to_string(target)}, {"delta", config.deviation_delta}, {"gaps", gaps}};
    const OutputDir out(config);
    out.write_json("deviation.json", body);
    return body;
}

// ---------------------------------------------------------------- examples

struct ExamplesReport {
    std::vector<OracleCheck> checks;
    bool passed() const {
        return std::all_of(checks.begin(), checks.end(), [](const auto& c) { return !c.counted || c.passed(); });
    }
};

// Writes examples.json.
inline ExamplesReport run_examples(const RunConfig& config) {
    ExamplesReport report{example_checks(config.seed)};
    nlohmann::json checks = nlohmann::json::array();
    for (const auto& c : report.checks) checks.push_back(to_json(c));
    const OutputDir out(config);
    out.write_json("examples.json", {{"checks", checks}, {"passed", report.passed()}});
    return report;
}

} // namespace rmm
