#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "assembly.hpp"
#include "model.hpp"
#include "numerics.hpp"
#include "parallel.hpp"
#include "solver.hpp"

namespace rmm {

// ---------------------------------------------------------------- closed forms

// Closed forms printed for the two worked examples. They hold for the shipped
// presets; `make_eg4` with mu2_0 != 0 or f2 != 0 departs from them.
namespace closed_form {

// Top-right (Y-bar, P-bar) x L block of S for make_eg4; the X block is zero.
inline Mat23 eg4_riccati(const ModelParams& p, double t) {
    const double decay = std::exp(-(p.horizon - t));
    const double e = 1.0 - decay;
    Mat23 s;
    s << -e, p.mu4 * e, -p.mu2_0 * decay * e, 0.0, 0.0, -e;
    return s;
}

inline double eg4_determinant(double t) { return std::exp(2.0 * t); }

namespace detail {

inline double eg4_expectation(const ModelParams& p, double major_weight, double minor_weight) {
    const double T = p.horizon;
    return std::exp(-1.5 * T) * (major_weight * p.xi0.tilted_mean(1.0, T) + minor_weight * p.xi.tilted_mean(1.0, T));
}

inline double eg4_kappa(const ModelParams& p) { return 1.0 / (1.0 - p.mu3 - p.mu2_0 * p.mu4); }

} // namespace detail

// Major intercept M0_t for make_eg4 along W0_t = w.
inline double eg4_major_intercept(const ModelParams& p, double t, double w) {
    const double T = p.horizon;
    const double minor_weight =
        p.mu2_0 * (std::exp(p.f2 * t) - 1.0 + std::exp(-T) + p.mu3 - p.mu3 * std::exp(-T));
    return -detail::eg4_kappa(p) * std::exp(-0.5 * t + w) * detail::eg4_expectation(p, 1.0 - p.mu3, minor_weight);
}

// Minor intercept M_t for make_eg4 along W0_t = w.
inline double eg4_minor_intercept(const ModelParams& p, double t, double w) {
    const double T = p.horizon;
    const double minor_weight = std::exp(p.f2 * t) - p.mu4 * p.mu2_0 + p.mu4 * p.mu2_0 * std::exp(-T);
    return -detail::eg4_kappa(p) * std::exp(-0.5 * t + w) * detail::eg4_expectation(p, p.mu4, minor_weight);
}

// Major intercept for make_eg1 as printed.
inline double eg1_major_intercept_printed(const ModelParams& p, double t) {
    return -p.f8 * p.f6_0 * p.gamma0 * (p.xi0.mean(p.horizon) + p.f6_0 * p.horizon * p.xi.mean(p.horizon)) * t / p.R0;
}

// Major intercept for make_eg1 from the first-order condition: u0_t =
// -gamma0 f6_0 f8 Y0_0 t / R0 with Y0_0 solving the resulting fixed point.
inline double eg1_major_intercept(const ModelParams& p, double t) {
    const double T = p.horizon;
    const double loading = p.f6_0 * p.f8;
    const double y0 = (p.xi0.mean(T) + p.f6_0 * T * p.xi.mean(T)) /
                      (1.0 + p.gamma0 * loading * loading * T * T * T / (3.0 * p.R0));
    return -p.gamma0 * loading * y0 * t / p.R0;
}

} // namespace closed_form

// ---------------------------------------------------------------- oracle checks

struct OracleCheck {
    std::string name;
    double max_error = 0.0;
    double tolerance = 0.0;
    bool counted = true;  // false: reported only (known discrepancy)
    std::string note;

    bool passed() const { return max_error <= tolerance; }
};

inline nlohmann::json to_json(const OracleCheck& c) {
    nlohmann::json j{{"name", c.name},
                     {"max_error", c.max_error},
                     {"tolerance", c.tolerance},
                     {"passed", c.passed()},
                     {"counted", c.counted}};
    if (!c.note.empty()) j["note"] = c.note;
    return j;
}

// W0 path on the grid from a keyed stream; w[k] = W0(t_k).
inline std::vector<double> common_noise_path(const TimeGrid& grid, std::uint64_t seed, std::uint64_t path) {
    GaussianStream stream(seed, path, 0);
    std::vector<double> w(static_cast<std::size_t>(grid.steps()) + 1, 0.0);
    const double root_h = std::sqrt(grid.step());
    for (int k = 1; k <= grid.steps(); ++k) {
        w[static_cast<std::size_t>(k)] = w[static_cast<std::size_t>(k) - 1] + root_h * stream();
    }
    return w;
}

struct InterceptErrors {
    double major = 0.0;
    double minor = 0.0;
    double major_scale = 0.0;  // max |oracle|
};

// Pipeline intercepts (with the exact L path) against closed forms along
// simulated W0 paths.
template <class MajorOracle, class MinorOracle>
InterceptErrors intercept_errors(const AssembledSystem& s, const MeanFieldSolution& sol,
                                 const EquilibriumFeedback& fb, int paths, std::uint64_t seed,
                                 MajorOracle&& major_oracle, MinorOracle&& minor_oracle) {
    const LDynamics d = l_dynamics(s);
    const Vec3 l0 = sol.initial_state.tail<3>();
    InterceptErrors e;
    for (int r = 0; r < paths; ++r) {
        const std::vector<double> w = common_noise_path(sol.grid, seed, static_cast<std::uint64_t>(r));
        for (int k = 0; k <= sol.grid.steps(); ++k) {
            const double t = sol.grid.node(k), wk = w[static_cast<std::size_t>(k)];
            const Vec3 l = l_exact(d, l0, t, wk);
            const double major = major_oracle(t, wk), minor = minor_oracle(t, wk);
            e.major = std::max(e.major, std::abs(fb.major_intercept(k, l, wk) - major));
            e.minor = std::max(e.minor, std::abs(fb.minor_intercept(k, l, wk) - minor));
            e.major_scale = std::max(e.major_scale, std::abs(major));
        }
    }
    return e;
}

inline double riccati_max_abs(const MeanFieldSolution& sol) {
    double m = 0.0;
    for (const Mat5& s : sol.riccati) m = std::max(m, s.cwiseAbs().maxCoeff());
    return m;
}

// Every closed-form oracle shipped with the presets.
inline std::vector<OracleCheck> example_checks(std::uint64_t seed = 0) {
    std::vector<OracleCheck> checks;

    {
        const ModelParams p = load_preset("example_eg4");
        const AssembledSystem s = assemble(p);
        const TimeGrid grid(p.horizon, 2000);
        const MeanFieldSolution sol = solve_meanfield(s, p, grid);
        double err = 0.0;
        for (int k = 0; k <= grid.steps(); k += grid.steps() / 20) {
            const Mat5& S = sol.riccati[k];
            err = std::max({err, S.topLeftCorner<2, 2>().cwiseAbs().maxCoeff(),
                            (S.topRightCorner<2, 3>() - closed_form::eg4_riccati(p, grid.node(k))).cwiseAbs().maxCoeff()});
        }
        checks.push_back({"eg4 S_t at 20 nodes, dt=5e-4", err, 1e-8, true, ""});

        const ConditionReport report = check_conditions(s, p, grid);
        double det_err = report.a5_closed_form.values.empty() ? INFINITY : 0.0;
        for (std::size_t k = 0; k < report.a5_closed_form.values.size(); ++k) {
            const double exact = closed_form::eg4_determinant(grid.node(static_cast<int>(k)));
            det_err = std::max(det_err, std::abs(report.a5_closed_form.values[k] / exact - 1.0));
        }
        checks.push_back({"eg4 determinant path vs e^{2t} (relative)", det_err, 1e-10, true, ""});

        const EquilibriumFeedback fb = build_feedback(sol, s, p);
        const InterceptErrors e = intercept_errors(
            s, sol, fb, 100, seed, [&](double t, double w) { return closed_form::eg4_major_intercept(p, t, w); },
            [&](double t, double w) { return closed_form::eg4_minor_intercept(p, t, w); });
        checks.push_back({"eg4 M0_t along 100 W0 paths", e.major, 1e-8, true, ""});
        checks.push_back({"eg4 M_t along 100 W0 paths", e.minor, 1e-8, true, ""});
    }

    {
        const ModelParams p = load_preset("example_eg1");
        const AssembledSystem s = assemble(p);
        const TimeGrid grid(p.horizon, 1000);
        const MeanFieldSolution sol = solve_meanfield(s, p, grid);
        checks.push_back({"eg1 S_t = 0 (printed)", riccati_max_abs(sol), 1e-12, false,
                          "holds only for f8 = 0; with f8 != 0 the major's control feeds back through L"});
        const ModelParams variant = make_eg1(p.f6_0, p.f8_0, 0.0, 0.0, p.f12);
        const MeanFieldSolution variant_sol = solve_meanfield(assemble(variant), variant, grid);
        checks.push_back({"eg1 with f8 = 0: S_t = 0", riccati_max_abs(variant_sol), 1e-12, true, ""});
        const EquilibriumFeedback fb = build_feedback(sol, s, p);
        const InterceptErrors e = intercept_errors(
            s, sol, fb, 10, seed, [&](double t, double) { return closed_form::eg1_major_intercept(p, t); },
            [](double, double) { return 0.0; });
        checks.push_back({"eg1 M_t = 0", e.minor, 1e-12, true, ""});
        checks.push_back({"eg1 M0_t linear in t (relative, first-order condition)", e.major / e.major_scale, 1e-10,
                          true, ""});
        const InterceptErrors printed = intercept_errors(
            s, sol, fb, 1, seed, [&](double t, double) { return closed_form::eg1_major_intercept_printed(p, t); },
            [](double, double) { return 0.0; });
        checks.push_back({"eg1 M0_t printed form (relative)", printed.major / printed.major_scale, 1e-10, false,
                          "printed form omits the factor 1/(1 + gamma0 (f6_0 f8)^2 T^3 / (3 R0))"});
    }

    {
        const ModelParams p = load_preset("forward_cz");
        const AssembledSystem s = assemble(p);
        const TimeGrid grid(p.horizon, 2000);
        const Path<Mat5> riccati = solve_riccati(s, grid);
        const Mat5 a_hat = build_A_hat(s);
        double err = 0.0;
        for (int k = 0; k <= grid.steps(); ++k) {
            err = std::max(err, (forward_riccati_closed_form(a_hat, p.horizon, grid.node(k)) -
                                 riccati[k].block<3, 2>(2, 0))
                                    .cwiseAbs()
                                    .maxCoeff());
        }
        checks.push_back({"forward S_t: RK4 vs matrix exponential", err, 1e-6, true, ""});

        double residual = 0.0;
        const double h = 1e-5;
        for (int k = 0; k <= 100; ++k) {
            const double t = std::clamp(p.horizon * k / 100.0, h, p.horizon - h);
            const double derivative =
                (sigma_closed_form(p, t + h) - sigma_closed_form(p, t - h)) / (2.0 * h);
            residual = std::max(residual, std::abs(derivative - sigma_riccati_rhs(p, sigma_closed_form(p, t))));
        }
        checks.push_back({"forward Sigma_t: scalar Riccati residual", residual, 1e-6, true, ""});
        checks.push_back({"forward Sigma_T = 0", std::abs(sigma_closed_form(p, p.horizon)), 0.0, true, ""});
    }
    return checks;
}

} // namespace rmm
