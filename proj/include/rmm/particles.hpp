#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "assembly.hpp"
#include "model.hpp"
#include "numerics.hpp"
#include "parallel.hpp"
#include "solver.hpp"

namespace rmm {

// ---------------------------------------------------------------- aggregate coordinates

// Coordinates of the aggregate state z shared by every agent's payoff closure.
namespace coord {
inline constexpr int one = 0;
inline constexpr int major = 1;          // X0
inline constexpr int average = 2;        // X^(N); E_t[X1] in the limit
inline constexpr int mean_estimate = 3;  // E_t[X1] propagated by the mean-field ODE
inline constexpr int l_major = 4;
inline constexpr int l_minor = 5;
inline constexpr int l_dagger = 6;
inline constexpr int offset_major = 7;   // E_t[xi0]
inline constexpr int offset_minor = 8;   // E_t[xi]
inline constexpr int tagged = 9;         // state of minor 0
inline constexpr int size = 10;
} // namespace coord

using AggregateVec = Eigen::Matrix<double, coord::size, 1>;
using AggregateMat = Eigen::Matrix<double, coord::size, coord::size>;

inline AggregateVec unit_vector(int i) { return AggregateVec::Unit(i); }

enum class Population { finite, limit };

inline const char* to_string(Population p) { return p == Population::finite ? "finite" : "limit"; }

// Bounded perturbation of one agent's control: u -> u + shift(t_k).
struct Deviation {
    enum class Target { none, major, tagged_minor };
    Target target = Target::none;
    std::vector<double> shift;  // one value per node; empty means zero

    static Deviation constant(Target target, double delta, const TimeGrid& grid) {
        return {target, std::vector<double>(static_cast<std::size_t>(grid.steps()) + 1, delta)};
    }
    double at(int k) const { return shift.empty() ? 0.0 : shift[static_cast<std::size_t>(k)]; }
    // Same target, zero shift: the baseline for common-random-number comparisons.
    Deviation zeroed() const { return {target, std::vector<double>(shift.size(), 0.0)}; }
};

inline const char* to_string(Deviation::Target t) {
    switch (t) {
    case Deviation::Target::none: return "none";
    case Deviation::Target::major: return "major";
    case Deviation::Target::tagged_minor: return "tagged_minor";
    }
    return "none";
}

// Everything the particle layer needs from the mean-field solution.
struct ParticleModel {
    ModelParams params;
    AssembledSystem system;
    MeanFieldSolution solution;
    EquilibriumFeedback feedback;
    LDynamics l;

    const TimeGrid& grid() const { return solution.grid; }
};

inline ParticleModel make_particle_model(const ModelParams& p, const TimeGrid& grid) {
    AssembledSystem s = assemble(p);
    MeanFieldSolution sol = solve_meanfield(s, p, grid);
    EquilibriumFeedback fb = build_feedback(sol, s, p);
    const LDynamics l = l_dynamics(s);
    return {p, std::move(s), std::move(sol), std::move(fb), l};
}

inline AggregateVec initial_aggregate(const ParticleModel& m) {
    const Vec5& x = m.feedback.initial_state();
    const Vec3 f = m.feedback.factors(0, 0.0);
    AggregateVec z = AggregateVec::Zero();
    z(coord::one) = 1.0;
    z(coord::major) = m.params.x0_major;
    z(coord::average) = m.params.x0_minor;
    z(coord::mean_estimate) = x(1);
    z.segment<3>(coord::l_major) = x.tail<3>();
    z(coord::offset_major) = f(1);
    z(coord::offset_minor) = f(2);
    z(coord::tagged) = m.params.x0_minor;
    return z;
}

// ---------------------------------------------------------------- control forms

// Controls at one node as linear forms in (own state, z).
struct ControlForms {
    AggregateVec major = AggregateVec::Zero();          // u0 = major . z
    AggregateVec minor = AggregateVec::Zero();          // u_j = own x_j + minor . z
    double own = 0.0;
    double tagged_shift = 0.0;                          // extra control of minor 0
    AggregateVec average = AggregateVec::Zero();        // u^(N) = average . z
    AggregateVec mean_estimate = AggregateVec::Zero();  // drift of E_t[X1]
};

namespace detail {

// Places a (x0, x1bar, L) row and (1, m0, m1) offsets into z coordinates.
inline AggregateVec embed(const RowVec5& state_row, const Vec3& offsets) {
    AggregateVec v = AggregateVec::Zero();
    v(coord::major) = state_row(0);
    v(coord::mean_estimate) = state_row(1);
    v.segment<3>(coord::l_major) = state_row.tail<3>().transpose();
    v(coord::one) = offsets(0);
    v(coord::offset_major) = offsets(1);
    v(coord::offset_minor) = offsets(2);
    return v;
}

} // namespace detail

inline double population_weight(Population pop, int agents) {
    return pop == Population::finite ? 1.0 / agents : 0.0;
}

inline std::vector<ControlForms> control_forms(const ParticleModel& m, Population pop, int agents,
                                               const Deviation& deviation) {
    const TimeGrid& grid = m.grid();
    if (!deviation.shift.empty() && static_cast<int>(deviation.shift.size()) != grid.steps() + 1) {
        throw ConfigError("deviation needs one shift per grid node");
    }
    const double weight = population_weight(pop, agents);
    std::vector<ControlForms> forms;
    forms.reserve(static_cast<std::size_t>(grid.steps()) + 1);
    for (int k = 0; k <= grid.steps(); ++k) {
        const FeedbackNode& n = m.feedback[k];
        ControlForms f;
        f.major = detail::embed(n.major_gain, n.major_offsets);
        f.minor = detail::embed(n.minor_gain, n.minor_offsets);
        f.own = n.own_gain;
        f.mean_estimate = detail::embed(n.mean_gain, n.mean_offsets);
        const double shift = deviation.at(k);
        if (deviation.target == Deviation::Target::major) f.major(coord::one) += shift;
        if (deviation.target == Deviation::Target::tagged_minor) f.tagged_shift = shift;
        f.average = f.minor;
        f.average(coord::average) += f.own;
        f.average(coord::one) += weight * f.tagged_shift;
        forms.push_back(f);
    }
    return forms;
}

// ---------------------------------------------------------------- aggregate dynamics

// dz = drift z dt + common z dW0 (+ idiosyncratic noise on X^(N) and minor 0);
// an untagged minor moves by (own_rate x_j + own_drift . z) dt + sigma dW_j.
struct AggregateDynamics {
    AggregateMat drift = AggregateMat::Zero();
    AggregateMat common = AggregateMat::Zero();
    double own_rate = 0.0;
    AggregateVec own_drift = AggregateVec::Zero();
};

inline AggregateDynamics aggregate_dynamics(const ParticleModel& m, const ControlForms& f, Population pop) {
    const ModelParams& p = m.params;
    using coord::average, coord::major, coord::mean_estimate, coord::tagged;
    AggregateDynamics d;
    d.drift.row(major) = (p.b1_0 * unit_vector(major) + p.b2_0 * f.major + p.b3_0 * unit_vector(average) +
                          p.b4_0 * f.average)
                             .transpose();
    d.drift.row(mean_estimate) = f.mean_estimate.transpose();
    if (pop == Population::finite) {
        d.drift.row(average) = ((p.b1 + p.b5) * unit_vector(average) + (p.b2 + p.b6) * f.average +
                                p.b3 * unit_vector(major) + p.b4 * f.major)
                                   .transpose();
    } else {
        d.drift.row(average) = f.mean_estimate.transpose();
    }
    d.drift.block<3, 3>(coord::l_major, coord::l_major) = m.l.drift;
    AggregateVec tagged_control = f.minor;
    tagged_control(tagged) += f.own;
    tagged_control(coord::one) += f.tagged_shift;
    d.drift.row(tagged) = (p.b1 * unit_vector(tagged) + p.b2 * tagged_control + p.b3 * unit_vector(major) +
                           p.b4 * f.major + p.b5 * unit_vector(average) + p.b6 * f.average)
                              .transpose();

    d.common(major, coord::one) = p.sigma0;
    d.common.block<3, 3>(coord::l_major, coord::l_major) = m.l.diffusion;
    d.common(coord::offset_major, coord::offset_major) = p.xi0.noise_loading();
    d.common(coord::offset_minor, coord::offset_minor) = p.xi.noise_loading();

    d.own_rate = p.b1 + p.b2 * f.own;
    d.own_drift = p.b2 * f.minor + p.b3 * unit_vector(major) + p.b4 * f.major + p.b5 * unit_vector(average) +
                  p.b6 * f.average;
    return d;
}

// ---------------------------------------------------------------- affine payoff closure

// Exact solution of the Euler-discretized payoff BSDEs under the affine
// feedback:
//   untagged minor  Y = own_k x + minor_k . z
//   minor 0         Y = tagged_k . z
//   major           Y0 = major_k . z
// Each step is Y_k = E_k[Y_{k+1}] + dt * driver(Y_k, Z_k) with
// Z_k = E_k[Y_{k+1} dW0] / dt.
struct AffineClosure {
    TimeGrid grid;
    double weight = 0.0;  // 1/N, or 0 in the limit
    std::vector<double> own;
    std::vector<AggregateVec> minor;
    std::vector<AggregateVec> tagged;
    std::vector<AggregateVec> major;

    double minor_value(int k, double x, const AggregateVec& z) const {
        return own[static_cast<std::size_t>(k)] * x + minor[static_cast<std::size_t>(k)].dot(z);
    }
    double tagged_value(int k, const AggregateVec& z) const { return tagged[static_cast<std::size_t>(k)].dot(z); }
    double major_value(int k, const AggregateVec& z) const { return major[static_cast<std::size_t>(k)].dot(z); }
};

inline AggregateVec minor_terminal_form(const ModelParams& p) {
    AggregateVec v = AggregateVec::Zero();
    v(coord::major) = p.Phi2;
    v(coord::average) = p.Phi3;
    v(coord::offset_minor) = 1.0;
    return v;
}

inline AggregateVec major_terminal_form(const ModelParams& p) {
    AggregateVec v = AggregateVec::Zero();
    v(coord::major) = p.Phi1_0;
    v(coord::average) = p.Phi2_0;
    v(coord::offset_major) = 1.0;
    return v;
}

// `with_common_noise` = false drops the W0 loadings (zero-diffusion skeleton).
inline AffineClosure solve_closure(const ParticleModel& m, const std::vector<ControlForms>& forms, Population pop,
                                   int agents, bool with_common_noise = true) {
    const ModelParams& p = m.params;
    const TimeGrid& grid = m.grid();
    const int n = grid.steps();
    if (static_cast<int>(forms.size()) != n + 1) throw ConfigError("control forms do not match the grid");
    const double h = grid.step();
    const double w = population_weight(pop, agents);
    using coord::average, coord::major, coord::tagged;

    AffineClosure c{grid, w, {}, {}, {}, {}};
    const auto size = static_cast<std::size_t>(n) + 1;
    c.own.assign(size, 0.0);
    c.minor.assign(size, AggregateVec::Zero());
    c.tagged.assign(size, AggregateVec::Zero());
    c.major.assign(size, AggregateVec::Zero());
    c.own[size - 1] = p.Phi1;
    c.minor[size - 1] = minor_terminal_form(p);
    c.tagged[size - 1] = minor_terminal_form(p) + p.Phi1 * unit_vector(tagged);
    c.major[size - 1] = major_terminal_form(p);

    Mat3 coupling;
    coupling << 1.0 - h * p.f2 - h * p.f10 * (1.0 - w), -h * p.f10 * w, -h * p.f6,
        -h * p.f10 * (1.0 - w), 1.0 - h * p.f2 - h * p.f10 * w, -h * p.f6,
        -h * p.f6_0 * (1.0 - w), -h * p.f6_0 * w, 1.0 - h * p.f2_0;
    const PivotedLu<Mat3> lu(coupling);

    for (int k = n - 1; k >= 0; --k) {
        const auto next = static_cast<std::size_t>(k) + 1;
        const ControlForms& f = forms[static_cast<std::size_t>(k)];
        const AggregateDynamics d = aggregate_dynamics(m, f, pop);
        const AggregateMat common = with_common_noise ? d.common : AggregateMat::Zero();
        const AggregateMat transition = AggregateMat::Identity() + h * d.drift;

        const double own_next = c.own[next];
        const double own_now = (own_next * (1.0 + h * d.own_rate) + h * (p.f1 + p.f4 * f.own)) / (1.0 - h * p.f2);
        c.own[next - 1] = own_now;

        const AggregateVec& minor_next = c.minor[next];
        const AggregateVec& tagged_next = c.tagged[next];
        const AggregateVec& major_next = c.major[next];
        const AggregateVec average_intensity = common.transpose() * (w * tagged_next + (1.0 - w) * minor_next);
        const AggregateVec major_intensity = common.transpose() * major_next;
        const AggregateVec average_known = own_now * (unit_vector(average) - w * unit_vector(tagged));

        AggregateVec tagged_control = f.minor;
        tagged_control(tagged) += f.own;
        tagged_control(coord::one) += f.tagged_shift;

        const AggregateVec shared = p.f5 * unit_vector(major) + p.f7 * major_intensity + p.f8 * f.major +
                                    p.f9 * unit_vector(average) + p.f10 * average_known +
                                    p.f11 * average_intensity + p.f12 * f.average;

        Eigen::Matrix<double, 3, coord::size> rhs;
        rhs.row(0) = (transition.transpose() * minor_next +
                      h * (own_next * d.own_drift + p.f3 * common.transpose() * minor_next + p.f4 * f.minor + shared))
                         .transpose();
        rhs.row(1) = (transition.transpose() * tagged_next +
                      h * (p.f1 * unit_vector(tagged) + p.f3 * common.transpose() * tagged_next +
                           p.f4 * tagged_control + shared))
                         .transpose();
        rhs.row(2) = (transition.transpose() * major_next +
                      h * (p.f1_0 * unit_vector(major) + p.f3_0 * major_intensity + p.f4_0 * f.major +
                           p.f5_0 * unit_vector(average) + p.f6_0 * average_known + p.f7_0 * average_intensity +
                           p.f8_0 * f.average))
                         .transpose();
        const Eigen::Matrix<double, 3, coord::size> solved = lu.solve(rhs);
        c.minor[next - 1] = solved.row(0).transpose();
        c.tagged[next - 1] = solved.row(1).transpose();
        c.major[next - 1] = solved.row(2).transpose();
        if (!c.minor[next - 1].allFinite() || !c.tagged[next - 1].allFinite() || !c.major[next - 1].allFinite() ||
            !std::isfinite(own_now)) {
            throw BlowUpError("payoff closure blow-up at t=" + format_double(grid.node(k)));
        }
    }
    return c;
}

// ---------------------------------------------------------------- ensembles

struct SimulationConfig {
    int agents = 1;
    int replications = 1;
    std::uint64_t seed = 0;
    bool zero_noise = false;    // drop every Brownian increment
    bool record_paths = false;  // keep full paths (small runs only)
    Deviation deviation;
    std::vector<int> agent_streams;  // stream of minor j; default j + 1 (stream 0 is W0)
    int threads = 0;                 // 0: RMM_THREADS or hardware concurrency
};

// Running-cost integrals of one replication (left-point sums, nonnegative).
struct ReplicationCosts {
    double major = 0.0;
    double minor = 0.0;   // mean over minors
    double tagged = 0.0;  // minor 0
};

struct ReplicationPaths {
    std::vector<AggregateVec> aggregate;    // z per node
    Eigen::MatrixXd agents;                 // node x minor
    std::vector<double> common_increments;  // dW0 per step
    std::vector<double> major_control;      // u0 per node
    std::vector<double> average_control;    // u^(N) per node
};

struct EnsembleState {
    TimeGrid grid;
    Population population = Population::finite;
    int agents = 1;
    int replications = 1;
    std::uint64_t seed = 0;
    bool zero_noise = false;
    Deviation deviation;
    std::vector<ReplicationCosts> costs;
    std::vector<ReplicationPaths> paths;  // empty unless recorded
};

struct PairedEnsemble {
    EnsembleState finite;
    EnsembleState limit;
    // Per replication: sup_t |X0^N - X0|^2 and the minors' mean of sup_t |Xi^N - Xi|^2.
    std::vector<double> major_gap;
    std::vector<double> minor_gap;
};

namespace detail {

class PopulationRun {
public:
    PopulationRun(const ParticleModel& m, const std::vector<ControlForms>& forms, Population pop, int agents,
                  bool record, bool zero_noise)
        : model_(m), forms_(forms), pop_(pop), zero_noise_(zero_noise), z_(initial_aggregate(m)),
          agents_(static_cast<std::size_t>(agents), m.params.x0_minor), minor_costs_(agents_.size()) {
        if (record) {
            const int nodes = m.grid().steps() + 1;
            paths_.emplace();
            paths_->aggregate.reserve(static_cast<std::size_t>(nodes));
            paths_->agents.resize(nodes, agents);
            paths_->common_increments.reserve(static_cast<std::size_t>(nodes) - 1);
            paths_->major_control.reserve(static_cast<std::size_t>(nodes));
            paths_->average_control.reserve(static_cast<std::size_t>(nodes));
        }
    }

    const std::vector<double>& agents() const { return agents_; }
    double major() const { return z_(coord::major); }

    // Costs at node k, then one Euler-Maruyama step with the given increments.
    void step(int k, double common, const std::vector<double>& idiosyncratic, double w0_after) {
        const ModelParams& p = model_.params;
        const ControlForms& f = forms_[static_cast<std::size_t>(k)];
        const double h = model_.grid().step();
        const double x0 = z_(coord::major);
        const double xn = z_(coord::average);
        const double u0 = f.major.dot(z_);
        const double un = f.average.dot(z_);
        const double base = f.minor.dot(z_);
        record(k, u0, un);

        costs_.major += h * (p.Q0 * square(x0 - p.mu1_0 * xn) + p.R0 * square(u0 - p.mu2_0 * un));
        const double shared_drift = p.b3 * x0 + p.b4 * u0 + p.b5 * xn + p.b6 * un;
        bool finite = true;
        for (std::size_t j = 0; j < agents_.size(); ++j) {
            const double x = agents_[j];
            const double u = f.own * x + base + (j == 0 ? f.tagged_shift : 0.0);
            minor_costs_[j] = p.Q * square(x - p.mu1 * xn - p.mu2 * x0) + p.R * square(u - p.mu3 * un - p.mu4 * u0);
            const double next = x + (p.b1 * x + p.b2 * u + shared_drift) * h + p.sigma * idiosyncratic[j];
            finite = finite && std::isfinite(next);
            agents_[j] = next;
        }
        costs_.minor += h * pairwise_mean(minor_costs_);
        costs_.tagged += h * minor_costs_.front();

        const double estimate_drift = f.mean_estimate.dot(z_);
        const Vec3 l = z_.segment<3>(coord::l_major);
        z_(coord::major) = x0 + (p.b1_0 * x0 + p.b2_0 * u0 + p.b3_0 * xn + p.b4_0 * un) * h + p.sigma0 * common;
        z_(coord::mean_estimate) += estimate_drift * h;
        z_.segment<3>(coord::l_major) = l + model_.l.drift * l * h + model_.l.diffusion * l * common;
        if (!zero_noise_) {
            const Vec3 factors = model_.feedback.factors(k + 1, w0_after);
            z_(coord::offset_major) = factors(1);
            z_(coord::offset_minor) = factors(2);
        }
        z_(coord::average) = pop_ == Population::finite ? symmetric_mean(agents_, scratch_)
                                                        : z_(coord::mean_estimate);
        z_(coord::tagged) = agents_.front();
        if (paths_) paths_->common_increments.push_back(common);
        if (!finite || !z_.allFinite()) throw BlowUpError("blow-up at t=" + format_double(model_.grid().node(k + 1)));
    }

    void finish() {
        const int n = model_.grid().steps();
        const ControlForms& f = forms_[static_cast<std::size_t>(n)];
        record(n, f.major.dot(z_), f.average.dot(z_));
    }

    const ReplicationCosts& costs() const { return costs_; }
    std::optional<ReplicationPaths>& paths() { return paths_; }

private:
    static double square(double x) { return x * x; }

    void record(int k, double u0, double un) {
        if (!paths_) return;
        paths_->aggregate.push_back(z_);
        for (std::size_t j = 0; j < agents_.size(); ++j) paths_->agents(k, static_cast<Eigen::Index>(j)) = agents_[j];
        paths_->major_control.push_back(u0);
        paths_->average_control.push_back(un);
    }

    const ParticleModel& model_;
    const std::vector<ControlForms>& forms_;
    Population pop_;
    bool zero_noise_;
    AggregateVec z_;
    std::vector<double> agents_;
    std::vector<double> minor_costs_;
    std::vector<double> scratch_;
    ReplicationCosts costs_;
    std::optional<ReplicationPaths> paths_;
};

struct ReplicationOutput {
    std::optional<ReplicationCosts> finite_costs, limit_costs;
    std::optional<ReplicationPaths> finite_paths, limit_paths;
    double major_gap = 0.0;
    double minor_gap = 0.0;
};

inline void check_config(const SimulationConfig& cfg) {
    if (cfg.agents < 1) throw ConfigError("agent count must be at least 1");
    if (cfg.replications < 1) throw ConfigError("replication count must be at least 1");
    if (!cfg.agent_streams.empty()) {
        if (static_cast<int>(cfg.agent_streams.size()) != cfg.agents) {
            throw ConfigError("agent_streams needs one stream per minor");
        }
        for (int s : cfg.agent_streams) {
            if (s < 1) throw ConfigError("minor streams start at 1 (stream 0 is W0)");
        }
    }
}

inline ReplicationOutput run_replication(const ParticleModel& m, const SimulationConfig& cfg,
                                         const std::vector<ControlForms>* finite_forms,
                                         const std::vector<ControlForms>* limit_forms, int replication) {
    const int n = m.grid().steps();
    const double root_h = std::sqrt(m.grid().step());
    const auto agents = static_cast<std::size_t>(cfg.agents);
    const auto rep = static_cast<std::uint64_t>(replication);

    std::optional<PopulationRun> finite, limit;
    if (finite_forms) finite.emplace(m, *finite_forms, Population::finite, cfg.agents, cfg.record_paths, cfg.zero_noise);
    if (limit_forms) limit.emplace(m, *limit_forms, Population::limit, cfg.agents, cfg.record_paths, cfg.zero_noise);

    GaussianStream common_stream(cfg.seed, rep, 0);
    std::vector<GaussianStream> minor_streams;
    minor_streams.reserve(agents);
    for (std::size_t j = 0; j < agents; ++j) {
        const auto stream = cfg.agent_streams.empty() ? j + 1 : static_cast<std::size_t>(cfg.agent_streams[j]);
        minor_streams.emplace_back(cfg.seed, rep, stream);
    }

    std::vector<double> increments(agents, 0.0);
    std::vector<double> minor_sup(agents, 0.0);
    double major_sup = 0.0;
    double w0 = 0.0;
    try {
        for (int k = 0; k < n; ++k) {
            double common = 0.0;
            if (!cfg.zero_noise) {
                common = root_h * common_stream();
                for (std::size_t j = 0; j < agents; ++j) increments[j] = root_h * minor_streams[j]();
            }
            w0 += common;
            if (finite) finite->step(k, common, increments, w0);
            if (limit) limit->step(k, common, increments, w0);
            if (finite && limit) {
                major_sup = std::max(major_sup, std::pow(finite->major() - limit->major(), 2));
                for (std::size_t j = 0; j < agents; ++j) {
                    minor_sup[j] = std::max(minor_sup[j], std::pow(finite->agents()[j] - limit->agents()[j], 2));
                }
            }
        }
    } catch (const BlowUpError& e) {
        throw BlowUpError(std::string(e.what()) + " in replication " + std::to_string(replication));
    }

    ReplicationOutput out;
    if (finite) {
        finite->finish();
        out.finite_costs = finite->costs();
        out.finite_paths = std::move(finite->paths());
    }
    if (limit) {
        limit->finish();
        out.limit_costs = limit->costs();
        out.limit_paths = std::move(limit->paths());
    }
    out.major_gap = major_sup;
    out.minor_gap = pairwise_mean(minor_sup);
    return out;
}

inline EnsembleState empty_ensemble(const ParticleModel& m, const SimulationConfig& cfg, Population pop) {
    EnsembleState e{m.grid(), pop, cfg.agents, cfg.replications, cfg.seed, cfg.zero_noise, cfg.deviation, {}, {}};
    e.costs.resize(static_cast<std::size_t>(cfg.replications));
    if (cfg.record_paths) e.paths.resize(static_cast<std::size_t>(cfg.replications));
    return e;
}

} // namespace detail

// Finite-N system under the decentralized feedback; each minor's control reads
// only its own state and W0-adapted quantities.
inline EnsembleState simulate_finite_N(const ParticleModel& m, const SimulationConfig& cfg) {
    detail::check_config(cfg);
    const auto forms = control_forms(m, Population::finite, cfg.agents, cfg.deviation);
    EnsembleState e = detail::empty_ensemble(m, cfg, Population::finite);
    parallel_for(cfg.replications, worker_count(cfg.threads), [&](int r) {
        auto out = detail::run_replication(m, cfg, &forms, nullptr, r);
        e.costs[static_cast<std::size_t>(r)] = *out.finite_costs;
        if (cfg.record_paths) e.paths[static_cast<std::size_t>(r)] = std::move(*out.finite_paths);
    });
    return e;
}

// Limiting system: X^(N) replaced by the conditional-mean estimate; the
// minors are independent copies of the representative minor.
inline EnsembleState simulate_limit(const ParticleModel& m, const SimulationConfig& cfg) {
    detail::check_config(cfg);
    const auto forms = control_forms(m, Population::limit, cfg.agents, cfg.deviation);
    EnsembleState e = detail::empty_ensemble(m, cfg, Population::limit);
    parallel_for(cfg.replications, worker_count(cfg.threads), [&](int r) {
        auto out = detail::run_replication(m, cfg, nullptr, &forms, r);
        e.costs[static_cast<std::size_t>(r)] = *out.limit_costs;
        if (cfg.record_paths) e.paths[static_cast<std::size_t>(r)] = std::move(*out.limit_paths);
    });
    return e;
}

// Both systems on the same Brownian draws, with pathwise state gaps.
inline PairedEnsemble simulate_paired(const ParticleModel& m, const SimulationConfig& cfg) {
    detail::check_config(cfg);
    const auto finite_forms = control_forms(m, Population::finite, cfg.agents, cfg.deviation);
    const auto limit_forms = control_forms(m, Population::limit, cfg.agents, cfg.deviation);
    PairedEnsemble pe{detail::empty_ensemble(m, cfg, Population::finite),
                      detail::empty_ensemble(m, cfg, Population::limit), {}, {}};
    pe.major_gap.resize(static_cast<std::size_t>(cfg.replications));
    pe.minor_gap.resize(static_cast<std::size_t>(cfg.replications));
    parallel_for(cfg.replications, worker_count(cfg.threads), [&](int r) {
        auto out = detail::run_replication(m, cfg, &finite_forms, &limit_forms, r);
        const auto i = static_cast<std::size_t>(r);
        pe.finite.costs[i] = *out.finite_costs;
        pe.limit.costs[i] = *out.limit_costs;
        pe.major_gap[i] = out.major_gap;
        pe.minor_gap[i] = out.minor_gap;
        if (cfg.record_paths) {
            pe.finite.paths[i] = std::move(*out.finite_paths);
            pe.limit.paths[i] = std::move(*out.limit_paths);
        }
    });
    return pe;
}

// ---------------------------------------------------------------- regression oracle

inline constexpr double kPicardTolerance = 1e-8;
inline constexpr int kPicardMaxSweeps = 50;

struct RegressionValues {
    double minor = 0.0;  // Y_0 of a minor
    double major = 0.0;  // Y0_0
    int sweeps = 0;
    double last_update = 0.0;
};

namespace detail {

// Least squares on column-scaled normal equations; rank-deficient bases
// (constant or duplicated columns) get the minimum-norm fit.
class Regressor {
public:
    explicit Regressor(const Eigen::MatrixXd& basis) : scale_(basis.cols()) {
        for (Eigen::Index c = 0; c < basis.cols(); ++c) {
            const double rms = basis.col(c).norm() / std::sqrt(static_cast<double>(std::max<Eigen::Index>(basis.rows(), 1)));
            scale_(c) = rms > 0.0 ? rms : 1.0;
        }
        const Eigen::MatrixXd scaled = basis * scale_.cwiseInverse().asDiagonal();
        gram_.setThreshold(1e-10);
        gram_.compute(scaled.transpose() * scaled);
    }

    Eigen::VectorXd fit(const Eigen::MatrixXd& basis, const Eigen::VectorXd& target) const {
        const Eigen::VectorXd moments = scale_.cwiseInverse().asDiagonal() * (basis.transpose() * target);
        return scale_.cwiseInverse().asDiagonal() * gram_.solve(moments);
    }

private:
    Eigen::VectorXd scale_;
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> gram_;
};

inline constexpr int kRegressionDim = coord::tagged;  // z without the tagged coordinate

} // namespace detail

// Picard iteration over backward least-squares regressions: each sweep sets
// Y_k = E_k[Y_{k+1} + dt * driver] with the implicit Y terms taken from the
// previous sweep and Z_k = E_k[Y_{k+1} dW0] / dt. Minors are pooled on the
// basis (own state, z); the major regresses on z.
inline RegressionValues regression_payoff_values(const ParticleModel& m, const std::vector<ControlForms>& forms,
                                                 std::span<const ReplicationPaths> paths) {
    const ModelParams& p = m.params;
    const TimeGrid& grid = m.grid();
    const int n = grid.steps();
    const double h = grid.step();
    if (paths.empty()) throw ConfigError("regression needs recorded paths");
    const Eigen::Index reps = static_cast<Eigen::Index>(paths.size());
    const Eigen::Index agents = paths.front().agents.cols();
    const Eigen::Index rows = reps * agents;
    constexpr int dz = detail::kRegressionDim;

    // Per node: minor rows (x_j, z), major rows z, and (X^(N), z) per replication.
    std::vector<Eigen::MatrixXd> minor_basis, major_basis;
    minor_basis.reserve(static_cast<std::size_t>(n) + 1);
    major_basis.reserve(static_cast<std::size_t>(n) + 1);
    std::vector<Eigen::MatrixXd> average_basis;
    average_basis.reserve(static_cast<std::size_t>(n) + 1);
    for (int k = 0; k <= n; ++k) {
        Eigen::MatrixXd mb(rows, 1 + dz), zb(reps, dz), ab(reps, 1 + dz);
        for (Eigen::Index r = 0; r < reps; ++r) {
            const ReplicationPaths& path = paths[static_cast<std::size_t>(r)];
            const AggregateVec& z = path.aggregate[static_cast<std::size_t>(k)];
            zb.row(r) = z.head<dz>().transpose();
            ab(r, 0) = z(coord::average);
            ab.row(r).tail<dz>() = z.head<dz>().transpose();
            for (Eigen::Index j = 0; j < agents; ++j) {
                mb(r * agents + j, 0) = path.agents(k, j);
                mb.row(r * agents + j).tail<dz>() = z.head<dz>().transpose();
            }
        }
        minor_basis.push_back(std::move(mb));
        major_basis.push_back(std::move(zb));
        average_basis.push_back(std::move(ab));
    }
    std::vector<detail::Regressor> minor_fit, major_fit;
    minor_fit.reserve(static_cast<std::size_t>(n));
    major_fit.reserve(static_cast<std::size_t>(n));
    for (int k = 0; k < n; ++k) {
        minor_fit.emplace_back(minor_basis[static_cast<std::size_t>(k)]);
        major_fit.emplace_back(major_basis[static_cast<std::size_t>(k)]);
    }

    // Terminal values.
    Eigen::VectorXd minor_terminal(rows), major_terminal(reps);
    for (Eigen::Index r = 0; r < reps; ++r) {
        const AggregateVec& z = paths[static_cast<std::size_t>(r)].aggregate.back();
        major_terminal(r) = major_terminal_form(p).dot(z);
        for (Eigen::Index j = 0; j < agents; ++j) {
            minor_terminal(r * agents + j) = p.Phi1 * paths[static_cast<std::size_t>(r)].agents(n, j) +
                                             minor_terminal_form(p).dot(z);
        }
    }

    std::vector<Eigen::VectorXd> minor_coef(static_cast<std::size_t>(n), Eigen::VectorXd::Zero(1 + dz));
    std::vector<Eigen::VectorXd> major_coef(static_cast<std::size_t>(n), Eigen::VectorXd::Zero(dz));
    RegressionValues out;
    for (int sweep = 1; sweep <= kPicardMaxSweeps; ++sweep) {
        const auto previous_minor = minor_coef;
        const auto previous_major = major_coef;
        Eigen::VectorXd minor_next = minor_terminal, major_next = major_terminal;
        double change = 0.0, magnitude = 0.0;
        for (int k = n - 1; k >= 0; --k) {
            const auto ks = static_cast<std::size_t>(k);
            const ControlForms& f = forms[ks];
            const Eigen::MatrixXd& mb = minor_basis[ks];
            const Eigen::MatrixXd& zb = major_basis[ks];
            const Eigen::MatrixXd& ab = average_basis[ks];

            Eigen::VectorXd dw_rows(rows), dw_reps(reps);
            for (Eigen::Index r = 0; r < reps; ++r) {
                const double dw = paths[static_cast<std::size_t>(r)].common_increments[ks];
                dw_reps(r) = dw / h;
                dw_rows.segment(r * agents, agents).setConstant(dw / h);
            }
            const Eigen::VectorXd minor_intensity_coef =
                minor_fit[ks].fit(mb, Eigen::VectorXd(minor_next.cwiseProduct(dw_rows)));
            const Eigen::VectorXd major_intensity_coef =
                major_fit[ks].fit(zb, Eigen::VectorXd(major_next.cwiseProduct(dw_reps)));

            const Eigen::VectorXd minor_prev = mb * previous_minor[ks];
            const Eigen::VectorXd major_prev = zb * previous_major[ks];
            const Eigen::VectorXd average_prev = ab * previous_minor[ks];
            const Eigen::VectorXd minor_intensity = mb * minor_intensity_coef;
            const Eigen::VectorXd major_intensity = zb * major_intensity_coef;
            const Eigen::VectorXd average_intensity = ab * minor_intensity_coef;

            Eigen::VectorXd minor_target(rows), major_target(reps);
            for (Eigen::Index r = 0; r < reps; ++r) {
                const AggregateVec& z = paths[static_cast<std::size_t>(r)].aggregate[ks];
                const double x0 = z(coord::major), xn = z(coord::average);
                const double u0 = f.major.dot(z), un = f.average.dot(z), base = f.minor.dot(z);
                major_target(r) = major_next(r) + h * (p.f1_0 * x0 + p.f2_0 * major_prev(r) +
                                                       p.f3_0 * major_intensity(r) + p.f4_0 * u0 + p.f5_0 * xn +
                                                       p.f6_0 * average_prev(r) + p.f7_0 * average_intensity(r) +
                                                       p.f8_0 * un);
                for (Eigen::Index j = 0; j < agents; ++j) {
                    const Eigen::Index row = r * agents + j;
                    const double x = mb(row, 0);
                    const double u = f.own * x + base;
                    minor_target(row) =
                        minor_next(row) +
                        h * (p.f1 * x + p.f2 * minor_prev(row) + p.f3 * minor_intensity(row) + p.f4 * u +
                             p.f5 * x0 + p.f6 * major_prev(r) + p.f7 * major_intensity(r) + p.f8 * u0 +
                             p.f9 * xn + p.f10 * average_prev(r) + p.f11 * average_intensity(r) + p.f12 * un);
                }
            }
            minor_coef[ks] = minor_fit[ks].fit(mb, minor_target);
            major_coef[ks] = major_fit[ks].fit(zb, major_target);
            minor_next = mb * minor_coef[ks];
            major_next = zb * major_coef[ks];
            if (!minor_next.allFinite() || !major_next.allFinite()) {
                throw NumericalError("regression oracle: non-finite values at t=" + format_double(grid.node(k)));
            }
            change = std::max({change, (minor_next - minor_prev).cwiseAbs().maxCoeff(),
                               (major_next - major_prev).cwiseAbs().maxCoeff()});
            magnitude = std::max({magnitude, minor_next.cwiseAbs().maxCoeff(), major_next.cwiseAbs().maxCoeff()});
        }
        out.minor = minor_next(0);
        out.major = major_next(0);
        out.sweeps = sweep;
        out.last_update = change / std::max(1.0, magnitude);
        if (out.last_update <= kPicardTolerance) return out;
    }
    throw NumericalError("Picard regression did not converge after " + std::to_string(kPicardMaxSweeps) +
                         " sweeps: last relative update " + format_double(out.last_update));
}

// ---------------------------------------------------------------- payoffs

enum class ClosureMode { affine, regression };

inline const char* to_string(ClosureMode m) { return m == ClosureMode::affine ? "affine" : "regression"; }

// J = -gamma |Y_0|^2 - E[running cost].
struct PayoffEstimate {
    double initial_value = 0.0;
    double initial_value_error = 0.0;  // standard error of Y_0 (regression only)
    double initial_term = 0.0;
    double running_term = 0.0;
    double standard_error = 0.0;

    double value() const { return initial_term + running_term; }
};

struct PayoffRecord {
    int agents = 0;
    int replications = 0;
    double dt = 0.0;
    std::uint64_t seed = 0;
    ClosureMode mode = ClosureMode::affine;
    PayoffEstimate major_finite, minor_finite, major_limit, minor_limit;
};

inline constexpr int kRegressionBatches = 10;

namespace detail {

inline PayoffEstimate payoff_estimate(double gamma, double y0, double y0_error, std::span<const double> running) {
    const SampleSummary cost = summarize(running);
    PayoffEstimate e;
    e.initial_value = y0;
    e.initial_value_error = y0_error;
    e.initial_term = -gamma * y0 * y0;
    e.running_term = -cost.mean;
    e.standard_error = std::hypot(cost.standard_error, 2.0 * gamma * std::abs(y0) * y0_error);
    return e;
}

struct InitialValues {
    double minor = 0.0, major = 0.0, minor_error = 0.0, major_error = 0.0;
};

inline InitialValues initial_values(const ParticleModel& m, const EnsembleState& e, ClosureMode mode) {
    const auto forms = control_forms(m, e.population, e.agents, e.deviation);
    InitialValues v;
    if (mode == ClosureMode::affine) {
        const AffineClosure c = solve_closure(m, forms, e.population, e.agents, !e.zero_noise);
        const AggregateVec z0 = initial_aggregate(m);
        v.minor = c.minor_value(0, m.params.x0_minor, z0);
        v.major = c.major_value(0, z0);
        return v;
    }
    if (e.deviation.target != Deviation::Target::none) throw ConfigError("regression oracle does not support deviations");
    if (e.paths.size() != e.costs.size()) throw ConfigError("regression mode needs recorded paths");
    const RegressionValues full = regression_payoff_values(m, forms, e.paths);
    v.minor = full.minor;
    v.major = full.major;
    const int batches = std::min<int>(kRegressionBatches, static_cast<int>(e.paths.size()));
    if (batches < 2) return v;
    std::vector<double> minor_batches, major_batches;
    const std::span<const ReplicationPaths> all(e.paths);
    for (int b = 0; b < batches; ++b) {
        const std::size_t begin = all.size() * static_cast<std::size_t>(b) / static_cast<std::size_t>(batches);
        const std::size_t end = all.size() * static_cast<std::size_t>(b + 1) / static_cast<std::size_t>(batches);
        const RegressionValues r = regression_payoff_values(m, forms, all.subspan(begin, end - begin));
        minor_batches.push_back(r.minor);
        major_batches.push_back(r.major);
    }
    v.minor_error = summarize(minor_batches).standard_error;
    v.major_error = summarize(major_batches).standard_error;
    return v;
}

inline std::vector<double> major_costs(const EnsembleState& e) {
    std::vector<double> v;
    v.reserve(e.costs.size());
    for (const auto& c : e.costs) v.push_back(c.major);
    return v;
}

inline std::vector<double> minor_costs(const EnsembleState& e) {
    std::vector<double> v;
    v.reserve(e.costs.size());
    for (const auto& c : e.costs) v.push_back(c.minor);
    return v;
}

} // namespace detail

// Payoffs of one ensemble: (major, minor).
inline std::pair<PayoffEstimate, PayoffEstimate> ensemble_payoffs(const ParticleModel& m, const EnsembleState& e,
                                                                  ClosureMode mode) {
    const auto y0 = detail::initial_values(m, e, mode);
    const auto major = detail::major_costs(e);
    const auto minor = detail::minor_costs(e);
    return {detail::payoff_estimate(m.params.gamma0, y0.major, y0.major_error, major),
            detail::payoff_estimate(m.params.gamma, y0.minor, y0.minor_error, minor)};
}

inline PayoffRecord evaluate_payoffs(const ParticleModel& m, const PairedEnsemble& pe, ClosureMode mode) {
    PayoffRecord r;
    r.agents = pe.finite.agents;
    r.replications = pe.finite.replications;
    r.dt = m.grid().step();
    r.seed = pe.finite.seed;
    r.mode = mode;
    std::tie(r.major_finite, r.minor_finite) = ensemble_payoffs(m, pe.finite, mode);
    std::tie(r.major_limit, r.minor_limit) = ensemble_payoffs(m, pe.limit, mode);
    return r;
}

inline nlohmann::json to_json(const PayoffEstimate& e) {
    return {{"value", e.value()},
            {"Y0", e.initial_value},
            {"se_Y0", e.initial_value_error},
            {"initial_term", e.initial_term},
            {"running_term", e.running_term},
            {"se", e.standard_error}};
}

inline nlohmann::json to_json(const PayoffRecord& r) {
    return {{"N", r.agents},
            {"M", r.replications},
            {"dt", r.dt},
            {"seed", r.seed},
            {"mode", to_string(r.mode)},
            {"J0N", r.major_finite.value()},
            {"JiN", r.minor_finite.value()},
            {"J0", r.major_limit.value()},
            {"Ji", r.minor_limit.value()},
            {"se_J0N", r.major_finite.standard_error},
            {"se_JiN", r.minor_finite.standard_error},
            {"se_J0", r.major_limit.standard_error},
            {"se_Ji", r.minor_limit.standard_error},
            {"terms",
             {{"J0N", to_json(r.major_finite)},
              {"JiN", to_json(r.minor_finite)},
              {"J0", to_json(r.major_limit)},
              {"Ji", to_json(r.minor_limit)}}}};
}

// ---------------------------------------------------------------- deviations

struct DeviationGap {
    double gap = 0.0;             // J(deviated) - J(baseline) of the deviating agent
    double standard_error = 0.0;
    double baseline = 0.0;
    double deviated = 0.0;
};

// Unilateral deviation of the major or minor 0, all others frozen, on common
// random numbers. A zero shift reproduces the baseline exactly.
inline DeviationGap deviation_gap(const ParticleModel& m, SimulationConfig cfg, const Deviation& deviation) {
    if (deviation.target == Deviation::Target::none) throw ConfigError("deviation needs a target agent");
    cfg.record_paths = false;
    cfg.deviation = Deviation{deviation.target, std::vector<double>(static_cast<std::size_t>(m.grid().steps()) + 1, 0.0)};
    const EnsembleState base = simulate_finite_N(m, cfg);
    cfg.deviation = deviation;
    const EnsembleState dev = simulate_finite_N(m, cfg);

    const bool major = deviation.target == Deviation::Target::major;
    auto value = [&](const EnsembleState& e) {
        const auto forms = control_forms(m, Population::finite, e.agents, e.deviation);
        const AffineClosure c = solve_closure(m, forms, Population::finite, e.agents, !e.zero_noise);
        const AggregateVec z0 = initial_aggregate(m);
        const double y0 = major ? c.major_value(0, z0) : c.tagged_value(0, z0);
        return -(major ? m.params.gamma0 : m.params.gamma) * y0 * y0;
    };
    std::vector<double> diff(base.costs.size()), base_costs(base.costs.size()), dev_costs(base.costs.size());
    for (std::size_t r = 0; r < diff.size(); ++r) {
        base_costs[r] = major ? base.costs[r].major : base.costs[r].tagged;
        dev_costs[r] = major ? dev.costs[r].major : dev.costs[r].tagged;
        diff[r] = base_costs[r] - dev_costs[r];
    }
    const double base_initial = value(base), dev_initial = value(dev);
    const SampleSummary d = summarize(diff);
    DeviationGap g;
    g.baseline = base_initial - pairwise_mean(base_costs);
    g.deviated = dev_initial - pairwise_mean(dev_costs);
    g.gap = (dev_initial - base_initial) + d.mean;
    g.standard_error = d.standard_error;
    return g;
}

inline nlohmann::json to_json(const DeviationGap& g) {
    return {{"gap", g.gap}, {"se", g.standard_error}, {"baseline", g.baseline}, {"deviated", g.deviated}};
}

} // namespace rmm
