#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "assembly.hpp"
#include "model.hpp"
#include "numerics.hpp"

namespace rmm {

// ---------------------------------------------------------------- closed forms

// Generator of the scalar Riccati for the minor's own-state gain.
inline Mat2 sigma_generator(const ModelParams& p) {
    Mat2 m;
    m << p.b1, 0.5 / p.R * p.b2 * p.b2, 2.0 * p.Q, -p.b1;
    return m;
}

// Own-state gain at time t from the exponential representation.
inline double sigma_closed_form(const ModelParams& p, double t) {
    const Mat2 e = expm(Mat2(sigma_generator(p) * (p.horizon - t)));
    if (!(e(1, 1) > 0.0)) {
        throw NumericalError("own-state gain: determinant " + format_double(e(1, 1)) + " <= 0 at t=" +
                             format_double(t));
    }
    return -e(1, 0) / e(1, 1);
}

inline double sigma_riccati_rhs(const ModelParams& p, double sigma) {
    return -(2.0 * p.b1 * sigma + 0.5 / p.R * p.b2 * p.b2 * sigma * sigma - 2.0 * p.Q);
}

inline Path<double> sigma_rk4(const ModelParams& p, const TimeGrid& grid) {
    return integrate_backward([&](double, double s) { return sigma_riccati_rhs(p, s); }, 0.0, grid);
}

// Backward case: S = -[E22]^-1 E21 with E = exp(B (T - t)); 2x3.
inline Mat23 backward_riccati_closed_form(const Mat5& b_matrix, double horizon, double t) {
    const Mat5 e = expm(Mat5(b_matrix * (horizon - t)));
    const Mat2 e22 = e.bottomRightCorner<2, 2>();
    const Mat23 e21 = e.bottomLeftCorner<2, 3>();
    return -solve_linear(e22, e21).solution;
}

// Forward case: S = -[E22]^-1 E21 with E = exp(A_hat (T - t)); 3x2.
inline Mat32 forward_riccati_closed_form(const Mat5& a_hat, double horizon, double t) {
    const Mat5 e = expm(Mat5(a_hat * (horizon - t)));
    const Mat3 e22 = e.bottomRightCorner<3, 3>();
    const Mat32 e21 = e.bottomLeftCorner<3, 2>();
    return -solve_linear(e22, e21).solution;
}

// ---------------------------------------------------------------- conditions

struct ConditionCheck {
    std::string name;
    bool applicable = false;
    bool passed = true;
    double extreme = 0.0;  // min determinant, or max condition number for A5
    std::optional<int> first_failure;
    std::vector<double> values;  // per node
};

struct ConditionReport {
    TimeGrid grid;
    ConditionCheck a5, a5_closed_form, a6, a3;
    std::string a5_error;
    bool all_passed() const { return a5.passed && a5_closed_form.passed && a6.passed && a3.passed; }
};

// ---------------------------------------------------------------- Riccati

namespace detail {

inline Mat5 riccati_derivative(const AssembledSystem& s, const Mat5& riccati, const Mat5& shift_inv) {
    const Mat5 shift = Mat5::Identity() + riccati * s.rho_tilde;
    const Mat5 g = shift * s.H4 * shift_inv;
    return -(riccati * s.H1 + s.H2 * riccati + riccati * s.H3 * riccati +
             g * (riccati * s.H5 + riccati * s.H6 * riccati) + s.H7);
}

inline Mat5 shift_inverse(const AssembledSystem& s, const Mat5& riccati, double t) {
    try {
        return checked_inverse(Mat5(Mat5::Identity() + riccati * s.rho_tilde)).first;
    } catch (const SingularSystemError& e) {
        throw SingularSystemError(std::string("(A5) failure at t=") + format_double(t) + ": " + e.what(),
                                  e.condition());
    }
}

inline Mat5 riccati_terminal(const AssembledSystem& s) {
    try {
        return solve_linear(Mat5(Mat5::Identity() - s.G1), s.G2).solution;
    } catch (const SingularSystemError& e) {
        throw SingularSystemError(std::string("terminal condition: (I - G1) singular: ") + e.what(),
                                  e.condition());
    }
}

} // namespace detail

inline Path<Mat5> solve_riccati(const AssembledSystem& s, const TimeGrid& grid) {
    auto rhs = [&](double t, const Mat5& riccati) {
        return detail::riccati_derivative(s, riccati, detail::shift_inverse(s, riccati, t));
    };
    return integrate_backward(rhs, detail::riccati_terminal(s), grid);
}

// ---------------------------------------------------------------- joint solve

// Everything integrated backward together so that RK4 stages agree.
//   upsilon columns: deterministic part, loading on m0, loading on m1, where
//   m_j(t) = E_t[xi_j] and Upsilon_t = col0 + col1 m0(t) + col2 m1(t).
//   p_t = p_gain (X-bar, L) + p_offsets . (1, m0, m1).
//   log_discount(t) = int_t^T (R^-1 b2^2 Sigma / 2 + b1) dr.
struct BackwardState {
    Mat5 riccati = Mat5::Zero();
    Mat53 upsilon = Mat53::Zero();
    RowVec5 p_gain = RowVec5::Zero();
    Vec3 p_offsets = Vec3::Zero();
    double log_discount = 0.0;

    friend BackwardState operator+(const BackwardState& x, const BackwardState& y) {
        return {x.riccati + y.riccati, x.upsilon + y.upsilon, x.p_gain + y.p_gain, x.p_offsets + y.p_offsets,
                x.log_discount + y.log_discount};
    }
    friend BackwardState operator*(double c, const BackwardState& x) {
        return {c * x.riccati, c * x.upsilon, c * x.p_gain, c * x.p_offsets, c * x.log_discount};
    }
};

inline bool all_finite(const BackwardState& x) {
    return x.riccati.allFinite() && x.upsilon.allFinite() && x.p_gain.allFinite() && x.p_offsets.allFinite() &&
           std::isfinite(x.log_discount);
}

// Closed drift of the conditional means (X-bar, L-bar): d(X-bar, L-bar) =
// [mean_state (X-bar, L-bar) + mean_forcing Upsilon] dt + noise.
struct MeanDrift {
    Mat5 mean_state;
    Mat5 mean_forcing;
};

inline MeanDrift mean_drift(const AssembledSystem& s, const Mat5& riccati, const Mat5& shift_inv) {
    const Mat5 shifted = shift_inv * riccati;
    MeanDrift d;
    d.mean_state = Mat5::Zero();
    d.mean_state.topLeftCorner<2, 2>() = sum_A12(s);
    d.mean_state.topRightCorner<2, 3>() = sum_C12(s);
    d.mean_state.bottomRightCorner<3, 3>() = sum_C34(s);
    d.mean_state.topRows<2>() += sum_B12(s) * shifted.bottomRows<3>();
    d.mean_forcing = Mat5::Zero();
    d.mean_forcing.topRows<2>() = sum_B12(s) * shift_inv.bottomRows<3>();
    return d;
}

struct MeanFieldSolution {
    TimeGrid grid;
    Path<Mat5> riccati;
    Path<Mat53> upsilon;
    Path<double> sigma;
    Path<RowVec5> p_gain;
    Path<Vec3> p_offsets;
    Path<double> log_discount;
    std::array<TerminalCondition, 2> terminal;
    Vec5 initial_state = Vec5::Zero();  // (X-bar_0, L-bar_0)

    double horizon() const { return grid.horizon(); }

    // (1, m0, m1) at node k given W0 = w.
    Vec3 factors(int k, double w) const {
        const double t = grid.node(k);
        return {1.0, terminal[0].conditional_mean(t, w, horizon()), terminal[1].conditional_mean(t, w, horizon())};
    }
    Vec5 upsilon_value(int k, double w) const { return upsilon[k] * factors(k, w); }
    // W0-loading of Upsilon.
    Vec5 upsilon_loading(int k, double w) const {
        const Vec3 f = factors(k, w);
        return upsilon[k].col(1) * terminal[0].noise_loading() * f(1) +
               upsilon[k].col(2) * terminal[1].noise_loading() * f(2);
    }
    // (Y-bar, P-bar) from the decoupling field.
    Vec5 decoupled(int k, const Vec5& forward, double w, const AssembledSystem& s) const {
        const Mat5 shift = Mat5::Identity() + riccati[k] * s.rho_tilde;
        return solve_linear(shift, Vec5(riccati[k] * forward + upsilon_value(k, w))).solution;
    }
    double p_value(int k, const Vec5& forward, double w) const {
        return p_gain[k] * forward + p_offsets[k].dot(factors(k, w));
    }
    // Discount kernel Pi(t_i, t_j).
    double discount(int i, int j) const { return std::exp(log_discount[i] - log_discount[j]); }
};

inline MeanFieldSolution solve_meanfield(const AssembledSystem& s, const ModelParams& p, const TimeGrid& grid) {
    if (std::abs(grid.horizon() - p.horizon) > 1e-15 * p.horizon) throw ConfigError("grid horizon differs from T");
    const std::array<TerminalCondition, 2> terminal{p.xi0, p.xi};
    const std::array<double, 2> loading{p.xi0.noise_loading(), p.xi.noise_loading()};
    Vec5 sigma_hat = Vec5::Zero();
    sigma_hat(0) = p.sigma0;
    const double control_gain = 0.5 / p.R * p.b2;

    auto rhs = [&](double t, const BackwardState& y) {
        const Mat5 shift_inv = detail::shift_inverse(s, y.riccati, t);
        const Mat5 shift = Mat5::Identity() + y.riccati * s.rho_tilde;
        const Mat5 g = shift * s.H4 * shift_inv;
        const Mat5 k = y.riccati * s.H3 + s.H2 + g * y.riccati * s.H6;

        BackwardState d;
        d.riccati = detail::riccati_derivative(s, y.riccati, shift_inv);
        d.upsilon.col(0) = -(k * y.upsilon.col(0) + g * y.riccati * sigma_hat);
        for (int j = 0; j < 2; ++j) d.upsilon.col(j + 1) = -(k + loading[j] * g) * y.upsilon.col(j + 1);

        const double sigma = sigma_closed_form(p, t);
        const double alpha = control_gain * p.b2 * sigma + p.b1;
        const MeanDrift drift = mean_drift(s, y.riccati, shift_inv);
        const RowVec5 c = sigma * s.Lambda1 + sigma * s.Lambda2 * shift_inv * y.riccati + s.Lambda4;
        const RowVec5 forcing = y.p_gain * drift.mean_forcing + sigma * s.Lambda2 * shift_inv;
        d.p_gain = -(alpha * y.p_gain + y.p_gain * drift.mean_state + c);
        d.p_offsets = -(alpha * y.p_offsets + (forcing * y.upsilon).transpose());
        d.log_discount = -alpha;
        return d;
    };

    BackwardState terminal_state;
    terminal_state.riccati = detail::riccati_terminal(s);
    const Mat5 terminal_inv = solve_linear(Mat5(Mat5::Identity() - s.G1), Mat5(Mat5::Identity())).solution;
    terminal_state.upsilon.col(1) = terminal_inv.col(0);
    terminal_state.upsilon.col(2) = terminal_inv.col(1);
    terminal_state.p_gain(4) = -p.Phi1;

    const Path<BackwardState> path = integrate_backward(rhs, terminal_state, grid);

    std::vector<Mat5> riccati;
    std::vector<Mat53> upsilon;
    std::vector<double> sigma, log_discount;
    std::vector<RowVec5> p_gain;
    std::vector<Vec3> p_offsets;
    for (int k = 0; k <= grid.steps(); ++k) {
        riccati.push_back(path[k].riccati);
        upsilon.push_back(path[k].upsilon);
        sigma.push_back(k == grid.steps() ? 0.0 : sigma_closed_form(p, grid.node(k)));
        p_gain.push_back(path[k].p_gain);
        p_offsets.push_back(path[k].p_offsets);
        log_discount.push_back(path[k].log_discount);
    }
    MeanFieldSolution sol{grid,
                          Path<Mat5>(grid, std::move(riccati)),
                          Path<Mat53>(grid, std::move(upsilon)),
                          Path<double>(grid, std::move(sigma)),
                          Path<RowVec5>(grid, std::move(p_gain)),
                          Path<Vec3>(grid, std::move(p_offsets)),
                          Path<double>(grid, std::move(log_discount)),
                          terminal};
    // Initial state: ell_0 = 0, so (Y-bar_0, P-bar_0) = S_0 theta_0 + Upsilon_0 and L-bar_0 = rho Y-bar_0.
    Vec5 theta0 = Vec5::Zero();
    theta0(0) = p.x0_major;
    theta0(1) = p.x0_minor;
    const Vec5 v0 = sol.riccati[0] * theta0 + sol.upsilon_value(0, 0.0);
    sol.initial_state = theta0;
    sol.initial_state.tail<3>() = s.rho * v0.head<2>();
    return sol;
}

// ---------------------------------------------------------------- feedback

// Kernels of the decentralized strategies at one node.
//   u0 = major_gain . (x0, x1bar, L) + major_offsets . (1, m0, m1)
//   ui = minor_gain . (x0, x1bar, L) + own_gain xi + minor_offsets . (1, m0, m1)
struct FeedbackNode {
    RowVec2 A01, A1, C1, k_gain;
    RowVec3 A02, A2, C2;
    double sigma = 0.0;
    double own_gain = 0.0;
    RowVec5 major_gain, minor_gain;
    Vec3 major_offsets, minor_offsets;
    // Conditional-mean drift of X1bar: mean_gain . (x0, x1bar, L) + mean_offsets . (1, m0, m1).
    RowVec5 mean_gain;
    Vec3 mean_offsets;
};

class EquilibriumFeedback {
public:
    EquilibriumFeedback(TimeGrid grid, std::vector<FeedbackNode> nodes, std::array<TerminalCondition, 2> terminal,
                        Vec5 initial_state)
        : grid_(grid), nodes_(std::move(nodes)), terminal_(terminal), initial_state_(initial_state) {}

    const TimeGrid& grid() const { return grid_; }
    const FeedbackNode& operator[](int k) const { return nodes_[static_cast<std::size_t>(k)]; }
    const std::array<TerminalCondition, 2>& terminal() const { return terminal_; }
    const Vec5& initial_state() const { return initial_state_; }

    Vec3 factors(int k, double w) const {
        const double t = grid_.node(k), T = grid_.horizon();
        return {1.0, terminal_[0].conditional_mean(t, w, T), terminal_[1].conditional_mean(t, w, T)};
    }
    // M0_t: everything in u0 except the (x0, x1bar) feedback.
    double major_intercept(int k, const Vec3& l, double w) const {
        const auto& n = (*this)[k];
        return n.major_gain.tail<3>() * l + n.major_offsets.dot(factors(k, w));
    }
    // M_t: everything in ui except the own-state and (x0, x1bar) feedback.
    double minor_intercept(int k, const Vec3& l, double w) const {
        const auto& n = (*this)[k];
        return n.minor_gain.tail<3>() * l + n.minor_offsets.dot(factors(k, w));
    }

private:
    TimeGrid grid_;
    std::vector<FeedbackNode> nodes_;
    std::array<TerminalCondition, 2> terminal_;
    Vec5 initial_state_;
};

inline EquilibriumFeedback build_feedback(const MeanFieldSolution& sol, const AssembledSystem& s,
                                          const ModelParams& p) {
    const auto& c = s.constants;
    RowVec5 major_row = RowVec5::Zero(), minor_row = RowVec5::Zero();
    major_row.tail<3>() = c.a1_0.transpose();
    minor_row.tail<3>() = c.a1.transpose();
    const double control_gain = 0.5 / p.R * p.b2;
    std::vector<FeedbackNode> nodes;
    nodes.reserve(static_cast<std::size_t>(sol.grid.steps()) + 1);
    for (int k = 0; k <= sol.grid.steps(); ++k) {
        const double t = sol.grid.node(k);
        const Mat5& riccati = sol.riccati[k];
        const Mat5 shift_inv = detail::shift_inverse(s, riccati, t);
        const Mat5 shifted = shift_inv * riccati;
        const double sigma = sol.sigma[k];
        const RowVec5 major = major_row * shifted;
        const RowVec5 minor = minor_row * shifted;
        const RowVec5 cc = sigma * s.Lambda1 + sigma * s.Lambda2 * shifted + s.Lambda4;
        const RowVec5& pg = sol.p_gain[k];

        FeedbackNode n;
        n.A01 = major.head<2>();
        n.A02 = major.tail<3>();
        n.A1 = minor.head<2>();
        n.A2 = minor.tail<3>();
        n.C1 = cc.head<2>();
        n.C2 = cc.tail<3>();
        n.sigma = sigma;
        n.own_gain = control_gain * sigma;
        n.k_gain = control_gain * pg.head<2>();
        n.major_gain = major;
        n.major_gain.tail<3>() += c.a3_0.transpose();
        n.minor_gain = minor + control_gain * pg;
        n.minor_gain.tail<3>() += (c.a3 + c.a8).transpose();
        n.major_offsets = (major_row * shift_inv * sol.upsilon[k]).transpose();
        n.minor_offsets = (minor_row * shift_inv * sol.upsilon[k]).transpose() + control_gain * sol.p_offsets[k];
        const MeanDrift drift = mean_drift(s, riccati, shift_inv);
        n.mean_gain = drift.mean_state.row(1);
        n.mean_offsets = (drift.mean_forcing.row(1) * sol.upsilon[k]).transpose();
        nodes.push_back(n);
    }
    return EquilibriumFeedback(sol.grid, std::move(nodes), sol.terminal, sol.initial_state);
}

// ---------------------------------------------------------------- backward case

struct BackwardCaseState {
    Mat23 riccati = Mat23::Zero();
    Mat23 upsilon = Mat23::Zero();  // columns: deterministic part, m0 loading, m1 loading

    friend BackwardCaseState operator+(const BackwardCaseState& x, const BackwardCaseState& y) {
        return {x.riccati + y.riccati, x.upsilon + y.upsilon};
    }
    friend BackwardCaseState operator*(double c, const BackwardCaseState& x) {
        return {c * x.riccati, c * x.upsilon};
    }
};

inline bool all_finite(const BackwardCaseState& x) { return x.riccati.allFinite() && x.upsilon.allFinite(); }

// Dynamics of L-bar: d L = drift L dt + diffusion L dW0 (3x3, block diagonal).
struct LDynamics {
    Mat3 drift;
    Mat3 diffusion;
};

inline LDynamics l_dynamics(const AssembledSystem& s) { return {sum_C34(s), sum_C56(s)}; }

// Exact L_t = exp((drift - diffusion^2/2) t + diffusion W_t) L_0; requires
// commuting coefficient matrices.
inline Vec3 l_exact(const LDynamics& d, const Vec3& l0, double t, double w) {
    const Mat3 drift = d.drift - 0.5 * d.diffusion * d.diffusion;
    if (!(drift * d.diffusion - d.diffusion * drift).isZero(1e-14)) {
        throw PreconditionError("exact L path needs commuting drift and diffusion matrices");
    }
    return expm(Mat3(drift * t + d.diffusion * w)) * l0;
}

// Initial L from the linear fixed point L0 = rho (I + S0 rho)^-1 (S0 L0 + Upsilon0).
inline Vec3 backward_initial_l(const Mat32& rho, const Mat23& riccati0, const Vec2& upsilon0) {
    const Mat2 shift = Mat2::Identity() + riccati0 * rho;
    const Mat3 lhs = Mat3::Identity() - rho * solve_linear(shift, riccati0).solution;
    const Vec3 rhs = rho * solve_linear(shift, upsilon0).solution;
    return solve_linear(lhs, rhs).solution;
}

// Specialized solve with the 2x3 Riccati and the 2-dimensional companion.
inline MeanFieldSolution solve_backward_case(const AssembledSystem& s, const ModelParams& p, const TimeGrid& grid) {
    if (!is_backward_case(p)) {
        throw PreconditionError("backward specialization requires Q0 = Q = 0, f1_0 = f5_0 = f1 = f5 = f9 = 0 and "
                                "zero terminal loadings");
    }
    const Mat32& rho = s.rho;
    const Mat3 C34 = sum_C34(s), C56 = sum_C56(s);
    const Mat23 C78 = sum_C78(s);
    const Mat2 c_tilde = C78 * rho + sum_D12(s);
    const Mat32 b_tilde = C34 * rho + rho * c_tilde;
    const Mat2 f12 = sum_F12(s);
    const std::array<double, 2> loading{p.xi0.noise_loading(), p.xi.noise_loading()};

    auto rhs = [&](double t, const BackwardCaseState& y) {
        const Mat2 shift = Mat2::Identity() + y.riccati * rho;
        Mat2 shift_inv;
        try {
            shift_inv = checked_inverse(shift).first;
        } catch (const SingularSystemError& e) {
            throw SingularSystemError("(A5) failure at t=" + format_double(t) + ": " + e.what(), e.condition());
        }
        const Mat2 g = shift * f12 * shift_inv;
        const Mat23& sr = y.riccati;
        BackwardCaseState d;
        d.riccati = -(sr * (C34 + rho * C78) + c_tilde * sr + sr * b_tilde * sr + g * (sr * C56 + sr * C56 * rho * sr) +
                      C78);
        const Mat2 k = sr * b_tilde + c_tilde + g * sr * C56 * rho;
        d.upsilon.col(0) = -k * y.upsilon.col(0);
        for (int j = 0; j < 2; ++j) d.upsilon.col(j + 1) = -(k + loading[j] * g) * y.upsilon.col(j + 1);
        return d;
    };
    BackwardCaseState terminal_state;
    terminal_state.upsilon(0, 1) = 1.0;
    terminal_state.upsilon(1, 2) = 1.0;
    const Path<BackwardCaseState> path = integrate_backward(rhs, terminal_state, grid);

    std::vector<Mat5> riccati;
    std::vector<Mat53> upsilon;
    for (int k = 0; k <= grid.steps(); ++k) {
        Mat5 full = Mat5::Zero();
        full.block<2, 3>(0, 2) = path[k].riccati;
        riccati.push_back(full);
        Mat53 u = Mat53::Zero();
        u.topRows<2>() = path[k].upsilon;
        upsilon.push_back(u);
    }
    const int nodes = grid.steps() + 1;
    MeanFieldSolution sol{grid,
                          Path<Mat5>(grid, std::move(riccati)),
                          Path<Mat53>(grid, std::move(upsilon)),
                          Path<double>(grid, std::vector<double>(nodes, 0.0)),
                          Path<RowVec5>(grid, std::vector<RowVec5>(nodes, RowVec5::Zero())),
                          Path<Vec3>(grid, std::vector<Vec3>(nodes, Vec3::Zero())),
                          Path<double>(grid, std::vector<double>(nodes, 0.0)),
                          {p.xi0, p.xi}};
    // Pi carries exp(b1 (s - t)) even though p vanishes.
    std::vector<double> log_discount(nodes);
    for (int k = 0; k < nodes; ++k) log_discount[k] = p.b1 * (p.horizon - grid.node(k));
    sol.log_discount = Path<double>(grid, std::move(log_discount));

    const Vec2 upsilon0 = sol.upsilon_value(0, 0.0).head<2>();
    sol.initial_state(0) = p.x0_major;
    sol.initial_state(1) = p.x0_minor;
    sol.initial_state.tail<3>() = backward_initial_l(rho, path[0].riccati, upsilon0);
    return sol;
}

inline bool backward_closed_form_applies(const ModelParams& p) {
    return is_backward_case(p) && std::abs(p.f3_0 - p.f3 - p.f11) <= 1e-14 && p.f7_0 == 0.0 && p.f7 == 0.0;
}

// ---------------------------------------------------------------- conditions

inline ConditionReport check_conditions(const AssembledSystem& s, const ModelParams& p, const TimeGrid& grid) {
    ConditionReport report{grid, {}, {}, {}, {}, {}};
    const int n = grid.steps();

    report.a5.name = "A5";
    report.a5.applicable = true;
    try {
        const Path<Mat5> riccati = solve_riccati(s, grid);
        for (int k = 0; k <= n; ++k) {
            const double cond = checked_inverse(Mat5(Mat5::Identity() + riccati[k] * s.rho_tilde)).second;
            report.a5.values.push_back(cond);
            report.a5.extreme = std::max(report.a5.extreme, cond);
        }
    } catch (const NumericalError& e) {
        report.a5.passed = false;
        report.a5_error = e.what();
    }

    auto scan = [&](ConditionCheck& check, auto&& determinant) {
        check.applicable = true;
        check.extreme = INFINITY;
        for (int k = 0; k <= n; ++k) {
            const double d = determinant(grid.node(k));
            check.values.push_back(d);
            check.extreme = std::min(check.extreme, d);
            if (!(d > 0.0) && !check.first_failure) {
                check.first_failure = k;
                check.passed = false;
            }
        }
    };

    report.a6.name = "A6";
    const Mat2 generator = sigma_generator(p);
    scan(report.a6, [&](double t) { return expm(Mat2(generator * t))(1, 1); });

    report.a5_closed_form.name = "A5 (backward closed form)";
    if (backward_closed_form_applies(p)) {
        const Mat5 b = build_B_matrix(s, p);
        scan(report.a5_closed_form,
             [&](double t) { return expm(Mat5(b * t)).bottomRightCorner<2, 2>().determinant(); });
    }

    report.a3.name = "A3";
    if (is_forward_case(p)) {
        const Mat5 a_hat = build_A_hat(s);
        scan(report.a3, [&](double t) { return expm(Mat5(a_hat * t)).bottomRightCorner<3, 3>().determinant(); });
    }
    return report;
}

inline nlohmann::json to_json(const ConditionCheck& c, const TimeGrid& grid) {
    nlohmann::json j{{"name", c.name}, {"applicable", c.applicable}, {"passed", c.passed}};
    if (!c.applicable) return j;
    j["extreme"] = c.extreme;
    if (c.first_failure) {
        j["first_failure_node"] = *c.first_failure;
        j["first_failure_t"] = grid.node(*c.first_failure);
    }
    nlohmann::json path = nlohmann::json::array();
    for (std::size_t k = 0; k < c.values.size(); ++k) {
        path.push_back({grid.node(static_cast<int>(k)), c.values[k]});
    }
    j["path"] = std::move(path);
    return j;
}

inline nlohmann::json to_json(const ConditionReport& r) {
    nlohmann::json j;
    j["all_passed"] = r.all_passed();
    j["A5"] = to_json(r.a5, r.grid);
    j["A5"]["quantity"] = "1-norm condition number of (I + S rho~)";
    if (!r.a5_error.empty()) j["A5"]["error"] = r.a5_error;
    j["A5_closed_form"] = to_json(r.a5_closed_form, r.grid);
    j["A5_closed_form"]["quantity"] = "det (0,I) exp(B t) (0,I)^T";
    j["A6"] = to_json(r.a6, r.grid);
    j["A6"]["quantity"] = "(0,I) exp(A t) (0,I)^T for the own-state gain";
    j["A3"] = to_json(r.a3, r.grid);
    j["A3"]["quantity"] = "det (0,I) exp(A_hat t) (0,I)^T";
    return j;
}

// ---------------------------------------------------------------- decoupling check

// Simulate the conditional-mean FBSDE forward along one W0 path, with the
// backward part driven by the intensity the decoupling field implies, and
// return sup_k |(Y-bar, P-bar)_k - decoupled(k)|. `increments` holds the W0
// increments on the solution grid.
inline double decoupling_error(const AssembledSystem& s, const ModelParams& p, const MeanFieldSolution& sol,
                               const std::vector<double>& increments) {
    const TimeGrid& grid = sol.grid;
    const int n = grid.steps();
    if (static_cast<int>(increments.size()) != n) throw ConfigError("increment count differs from grid steps");
    const double h = grid.step();
    const Mat5 identity = Mat5::Identity();
    Vec5 sigma_hat = Vec5::Zero();
    sigma_hat(0) = p.sigma0;
    const Mat2 A12 = sum_A12(s), A34 = s.A3 + s.A4, D12 = sum_D12(s), F12 = sum_F12(s);
    const Mat32 A56 = s.A5 + s.A6;
    const Mat23 B12 = sum_B12(s), B34 = s.B3 + s.B4, C12 = sum_C12(s), C78 = sum_C78(s);
    const Mat3 B56 = s.B5 + s.B6, C34 = sum_C34(s), C56 = sum_C56(s), C910 = s.C9 + s.C10;

    Vec5 forward = sol.initial_state;
    double w = 0.0;
    Vec5 theta0 = forward;
    theta0.tail<3>().setZero();
    Vec5 backward = sol.riccati[0] * theta0 + sol.upsilon_value(0, 0.0);
    double error = 0.0;
    for (int k = 0; k < n; ++k) {
        const Mat5& riccati = sol.riccati[k];
        const Mat5 shift = identity + riccati * s.rho_tilde;
        const Vec5 upsilon = sol.upsilon_value(k, w);
        const Vec5 target = solve_linear(shift, Vec5(riccati * forward + upsilon)).solution;
        error = std::max(error, (target - backward).cwiseAbs().maxCoeff());

        const Mat5 coupling = riccati * s.H5 + riccati * s.H6 * riccati;
        const Vec5 theta = solve_linear(Mat5(identity + s.rho_tilde * riccati),
                                        Vec5(forward - s.rho_tilde * upsilon))
                               .solution;
        const Vec5 intensity =
            solve_linear(shift, Vec5(coupling * theta + riccati * s.H6 * upsilon + riccati * sigma_hat +
                                     sol.upsilon_loading(k, w)))
                .solution;

        const Vec2 xbar = forward.head<2>(), ybar = backward.head<2>();
        const Vec3 lbar = forward.tail<3>(), pbar = backward.tail<3>();
        Vec5 forward_drift, forward_noise, backward_drift;
        forward_drift << A12 * xbar + B12 * pbar + C12 * lbar, C34 * lbar;
        forward_noise << sigma_hat.head<2>(), C56 * lbar;
        backward_drift << -(A34 * xbar + D12 * ybar + F12 * intensity.head<2>() + B34 * pbar + C78 * lbar),
            -(A56 * xbar + B56 * pbar + C910 * lbar);
        const double dw = increments[static_cast<std::size_t>(k)];
        forward += forward_drift * h + forward_noise * dw;
        backward += backward_drift * h + intensity * dw;
        w += dw;
    }
    const Vec5 target = solve_linear(Mat5(identity + sol.riccati[n] * s.rho_tilde),
                                     Vec5(sol.riccati[n] * forward + sol.upsilon_value(n, w)))
                            .solution;
    return std::max(error, (target - backward).cwiseAbs().maxCoeff());
}

} // namespace rmm
