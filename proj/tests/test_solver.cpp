#include <cmath>
#include <vector>

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>
#include <gtest/gtest.h>

#include "rmm/examples.hpp"
#include "rmm/parallel.hpp"
#include "rmm/solver.hpp"

namespace {

using namespace rmm;

struct Solved {
    ModelParams params;
    AssembledSystem system;
    MeanFieldSolution solution;
};

Solved solve_preset(const std::string& name, int steps) {
    ModelParams p = load_preset(name);
    AssembledSystem s = assemble(p);
    MeanFieldSolution sol = solve_meanfield(s, p, TimeGrid(p.horizon, steps));
    return {p, std::move(s), std::move(sol)};
}

TEST(Riccati, Eg4MatchesClosedForm) {
    const Solved x = solve_preset("example_eg4", 2000);
    for (int k = 0; k <= 2000; k += 100) {
        const Mat5& S = x.solution.riccati[k];
        const double t = x.solution.grid.node(k);
        EXPECT_LT((Mat23(S.topRightCorner<2, 3>()) - closed_form::eg4_riccati(x.params, t)).cwiseAbs().maxCoeff(),
                  1e-8);
        EXPECT_TRUE(S.leftCols<2>().isZero(1e-12));
        EXPECT_TRUE(S.bottomRows<3>().isZero(1e-12));
    }
}

TEST(Riccati, Eg4DeterminantPath) {
    const Solved x = solve_preset("example_eg4", 200);
    const ConditionReport r = check_conditions(x.system, x.params, x.solution.grid);
    ASSERT_TRUE(r.a5_closed_form.applicable);
    EXPECT_TRUE(r.all_passed());
    for (int k = 0; k <= 200; ++k) {
        EXPECT_NEAR(r.a5_closed_form.values[k] / std::exp(2.0 * x.solution.grid.node(k)), 1.0, 1e-10);
    }
}

TEST(Riccati, BackwardClosedFormMatchesRk4) {
    const Solved x = solve_preset("example_eg4", 1000);
    const Mat5 b = build_B_matrix(x.system, x.params);
    for (int k = 0; k <= 1000; k += 50) {
        const Mat23 closed = backward_riccati_closed_form(b, x.params.horizon, x.solution.grid.node(k));
        EXPECT_LT((closed - Mat23(x.solution.riccati[k].topRightCorner<2, 3>())).cwiseAbs().maxCoeff(), 1e-10);
    }
}

TEST(Riccati, BackwardSpecializationMatchesGeneralSolver) {
    for (const char* name : {"example_eg4", "example_eg1", "backward_generic"}) {
        const Solved x = solve_preset(name, 500);
        const MeanFieldSolution special = solve_backward_case(x.system, x.params, x.solution.grid);
        double err = 0.0;
        for (int k = 0; k <= 500; ++k) {
            err = std::max(err, (special.riccati[k] - x.solution.riccati[k]).cwiseAbs().maxCoeff());
            err = std::max(err, (special.upsilon[k].topRows<2>() - x.solution.upsilon[k].topRows<2>())
                                    .cwiseAbs()
                                    .maxCoeff());
        }
        EXPECT_LT(err, 1e-10) << name;
        EXPECT_LT((special.initial_state - x.solution.initial_state).cwiseAbs().maxCoeff(), 1e-10) << name;
    }
}

TEST(Riccati, InitialLSolvesFixedPoint) {
    const Solved x = solve_preset("backward_generic", 400);
    const Mat23 s0 = x.solution.riccati[0].topRightCorner<2, 3>();
    const Vec2 upsilon0 = x.solution.upsilon_value(0, 0.0).head<2>();
    const Vec3 l0 = backward_initial_l(x.system.rho, s0, upsilon0);
    const Mat2 shift = Mat2::Identity() + s0 * x.system.rho;
    const Vec3 image = x.system.rho * shift.inverse() * (s0 * l0 + upsilon0);
    EXPECT_LT((image - l0).cwiseAbs().maxCoeff(), 1e-13);
    // Unique solution rho Upsilon0 by the push-through identity.
    EXPECT_LT((x.system.rho * upsilon0 - l0).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(Riccati, ForwardMatchesIndependentExponential) {
    const Solved x = solve_preset("forward_cz", 2000);
    const Mat5 a_hat = build_A_hat(x.system);
    for (int k = 0; k <= 2000; k += 100) {
        const Mat5 e = (a_hat * (x.params.horizon - x.solution.grid.node(k))).exp();
        const Mat32 reference = -e.bottomRightCorner<3, 3>().fullPivLu().solve(Mat32(e.bottomLeftCorner<3, 2>()));
        EXPECT_LT((reference - Mat32(x.solution.riccati[k].block<3, 2>(2, 0))).cwiseAbs().maxCoeff(), 1e-6);
    }
}

TEST(Riccati, OwnStateGain) {
    const ModelParams p = load_preset("forward_cz");
    const TimeGrid grid(p.horizon, 1000);
    const Path<double> rk4 = sigma_rk4(p, grid);
    for (int k = 0; k <= 1000; k += 25) EXPECT_NEAR(rk4[k], sigma_closed_form(p, grid.node(k)), 1e-11);
    EXPECT_EQ(sigma_closed_form(p, p.horizon), 0.0);
}

TEST(Riccati, Eg1WithoutMajorFeedbackIsZero) {
    const ModelParams p = make_eg1(1.0, 0.5, 0.0, 0.0, 0.2);
    const AssembledSystem s = assemble(p);
    const MeanFieldSolution sol = solve_meanfield(s, p, TimeGrid(p.horizon, 500));
    EXPECT_LT(riccati_max_abs(sol), 1e-14);
    const Mat5 b = build_B_matrix(s, p);
    EXPECT_TRUE((b * b).isZero(1e-14));
}

TEST(Feedback, Eg1MajorInterceptSatisfiesFirstOrderCondition) {
    const Solved x = solve_preset("example_eg1", 1000);
    const EquilibriumFeedback fb = build_feedback(x.solution, x.system, x.params);
    const LDynamics d = l_dynamics(x.system);
    const Vec3 l0 = x.solution.initial_state.tail<3>();
    for (int k = 0; k <= 1000; k += 50) {
        const double t = x.solution.grid.node(k);
        const double w = 0.3 * std::sin(7.0 * t);
        const double expected = closed_form::eg1_major_intercept(x.params, t);
        EXPECT_NEAR(fb.major_intercept(k, l_exact(d, l0, t, w), w), expected, 1e-10 * std::max(1.0, std::abs(expected)));
        EXPECT_NEAR(fb.minor_intercept(k, l_exact(d, l0, t, w), w), 0.0, 1e-12);
    }
}

TEST(Feedback, Eg1MajorInterceptIsBestResponse) {
    // Variational check: u0 = c t, Y0_0(c) = E xi0 + f6_0 T E xi + f6_0 f8 c T^3/3 (f8-weighted
    // accumulation), cost gamma0 Y0_0^2 + R0 c^2 T^3 / 3. The optimal slope minimizes it.
    const ModelParams p = load_preset("example_eg1");
    const double T = p.horizon;
    auto cost = [&](double c) {
        const double y0 = p.xi0.mean(T) + p.f6_0 * T * p.xi.mean(T) + p.f6_0 * p.f8 * c * T * T * T / 3.0;
        return p.gamma0 * y0 * y0 + p.R0 * c * c * T * T * T / 3.0;
    };
    // Golden-section search on the slope.
    double lo = -10.0, hi = 10.0;
    const double phi = 0.5 * (std::sqrt(5.0) - 1.0);
    for (int i = 0; i < 200; ++i) {
        const double a = hi - phi * (hi - lo), b = lo + phi * (hi - lo);
        if (cost(a) < cost(b)) {
            hi = b;
        } else {
            lo = a;
        }
    }
    EXPECT_NEAR(closed_form::eg1_major_intercept(p, 1.0), 0.5 * (lo + hi), 1e-7);
}

TEST(Feedback, InterceptsOfEg4AlongPaths) {
    const Solved x = solve_preset("example_eg4", 500);
    const EquilibriumFeedback fb = build_feedback(x.solution, x.system, x.params);
    const ModelParams& p = x.params;
    const InterceptErrors e = intercept_errors(
        x.system, x.solution, fb, 10, 1, [&](double t, double w) { return closed_form::eg4_major_intercept(p, t, w); },
        [&](double t, double w) { return closed_form::eg4_minor_intercept(p, t, w); });
    EXPECT_LT(e.major, 1e-8);
    EXPECT_LT(e.minor, 1e-8);
}

// p_t = E_t[ exp(int_t^T alpha) p_T + int_t^T exp(int_t^s alpha) g_s ds ] with
// g = c . (X-bar, L) + sigma Lambda2 (I + S rho~)^-1 Upsilon, estimated by Monte Carlo
// over the conditional-mean dynamics.
TEST(PKernel, MatchesMonteCarloExpectation) {
    const Solved x = solve_preset("coupled_generic", 200);
    const MeanFieldSolution& sol = x.solution;
    const AssembledSystem& s = x.system;
    const TimeGrid& grid = sol.grid;
    const int n = grid.steps();
    const double h = grid.step();
    const int paths = 4000;
    for (int start : {0, 100}) {
        Vec5 theta0;
        theta0 << 0.7, -0.3, 0.2, 0.1, -0.4;
        std::vector<double> samples(paths);
        for (int r = 0; r < paths; ++r) {
            GaussianStream noise(77, static_cast<std::uint64_t>(r), 0);
            Vec5 theta = theta0;
            double w = 0.0, integral = 0.0;
            for (int k = start; k < n; ++k) {
                const Mat5 shift_inv = (Mat5::Identity() + sol.riccati[k] * s.rho_tilde).inverse();
                const Vec5 upsilon = sol.upsilon_value(k, w);
                const RowVec5 c = sol.sigma[k] * s.Lambda1 + sol.sigma[k] * s.Lambda2 * shift_inv * sol.riccati[k] +
                                  s.Lambda4;
                const double g = c.dot(theta.transpose()) + sol.sigma[k] * (s.Lambda2 * shift_inv).dot(upsilon.transpose());
                integral += sol.discount(start, k) * g * h;
                const MeanDrift d = mean_drift(s, sol.riccati[k], shift_inv);
                Vec5 loading;
                loading << x.params.sigma0, 0.0, sum_C56(s) * theta.tail<3>();
                const double dw = std::sqrt(h) * noise();
                theta += (d.mean_state * theta + d.mean_forcing * upsilon) * h + loading * dw;
                w += dw;
            }
            samples[static_cast<std::size_t>(r)] = integral + sol.discount(start, n) * sol.p_value(n, theta, w);
        }
        const SampleSummary mc = summarize(samples);
        const double exact = sol.p_value(start, theta0, 0.0);
        EXPECT_NEAR(mc.mean, exact, 4.0 * mc.standard_error + 0.02 * std::abs(exact)) << "start node " << start;
    }
}

TEST(Decoupling, ErrorHalvesWithStep) {
    const ModelParams p = load_preset("coupled_generic");
    const AssembledSystem s = assemble(p);
    auto mean_error = [&](int steps) {
        const MeanFieldSolution sol = solve_meanfield(s, p, TimeGrid(p.horizon, steps));
        double total = 0.0;
        const int paths = 100;
        for (int r = 0; r < paths; ++r) {
            GaussianStream noise(5, static_cast<std::uint64_t>(r), 0);
            // Coarse increments are sums of fine ones so both grids see the same path.
            std::vector<double> fine(1000);
            for (double& dw : fine) dw = std::sqrt(1e-3 * p.horizon) * noise();
            std::vector<double> increments(static_cast<std::size_t>(steps), 0.0);
            const int ratio = 1000 / steps;
            for (int i = 0; i < 1000; ++i) increments[static_cast<std::size_t>(i / ratio)] += fine[static_cast<std::size_t>(i)];
            total += decoupling_error(s, p, sol, increments);
        }
        return total / paths;
    };
    const double ratio = mean_error(500) / mean_error(1000);
    EXPECT_GT(ratio, 1.6);
    EXPECT_LT(ratio, 2.4);
}

TEST(Conditions, ReportJsonNamesChecks) {
    const Solved x = solve_preset("forward_cz", 100);
    const ConditionReport r = check_conditions(x.system, x.params, x.solution.grid);
    EXPECT_TRUE(r.all_passed());
    EXPECT_TRUE(r.a3.applicable);
    const nlohmann::json j = to_json(r);
    EXPECT_TRUE(j["all_passed"].get<bool>());
    EXPECT_EQ(j["A3"]["path"].size(), 101u);
    EXPECT_FALSE(j["A5_closed_form"]["applicable"].get<bool>());
}

TEST(Solver, GridHorizonMustMatch) {
    const ModelParams p = load_preset("forward_cz");
    EXPECT_THROW(solve_meanfield(assemble(p), p, TimeGrid(2.0 * p.horizon, 10)), ConfigError);
}

TEST(Solver, SpecializationsRejectOtherCases) {
    const ModelParams p = load_preset("coupled_generic");
    EXPECT_THROW(solve_backward_case(assemble(p), p, TimeGrid(p.horizon, 10)), PreconditionError);
}

} // namespace
