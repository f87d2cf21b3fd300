#pragma once

#include <array>
#include <cmath>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "errors.hpp"

namespace rmm {

// Terminal offset xi. Either a constant c, or c * exp(a W0_T + b T) for the
// common noise W0.
class TerminalCondition {
public:
    enum class Kind { deterministic_constant, exponential_martingale };

    TerminalCondition() = default;

    static TerminalCondition constant(double c) { return {Kind::deterministic_constant, c, 0.0, 0.0}; }
    static TerminalCondition exponential(double c, double a, double b) {
        return {Kind::exponential_martingale, c, a, b};
    }

    Kind kind() const { return kind_; }
    double scale() const { return scale_; }
    // Loading on W0_T; zero for the constant class.
    double noise_loading() const { return kind_ == Kind::exponential_martingale ? loading_ : 0.0; }
    double drift() const { return kind_ == Kind::exponential_martingale ? drift_ : 0.0; }

    // E_t[xi] given W0_t = w.
    double conditional_mean(double t, double w, double horizon) const {
        const double a = noise_loading();
        return scale_ * std::exp(a * w + drift() * horizon + 0.5 * a * a * (horizon - t));
    }
    double realized(double w_terminal, double horizon) const {
        return scale_ * std::exp(noise_loading() * w_terminal + drift() * horizon);
    }
    double mean(double horizon) const { return conditional_mean(0.0, 0.0, horizon); }

    // E[exp(k W0_T) xi], used by closed-form expectations.
    double tilted_mean(double k, double horizon) const {
        const double a = noise_loading() + k;
        return scale_ * std::exp(drift() * horizon + 0.5 * a * a * horizon);
    }

    bool all_finite() const {
        return std::isfinite(scale_) && std::isfinite(loading_) && std::isfinite(drift_);
    }

    friend bool operator==(const TerminalCondition&, const TerminalCondition&) = default;

private:
    TerminalCondition(Kind kind, double c, double a, double b)
        : kind_(kind), scale_(c), loading_(a), drift_(b) {}

    Kind kind_ = Kind::deterministic_constant;
    double scale_ = 0.0;
    double loading_ = 0.0;
    double drift_ = 0.0;
};

// Coefficients of the scalar LQG major-minor game. Member names follow the
// config keys, except `horizon`, which is stored under "T".
struct ModelParams {
    double horizon = 1.0;
    double x0_major = 0.0, x0_minor = 0.0;
    double b1_0 = 0.0, b2_0 = 0.0, b3_0 = 0.0, b4_0 = 0.0;
    double b1 = 0.0, b2 = 0.0, b3 = 0.0, b4 = 0.0, b5 = 0.0, b6 = 0.0;
    double sigma0 = 0.0, sigma = 0.0;
    double f1_0 = 0.0, f2_0 = 0.0, f3_0 = 0.0, f4_0 = 0.0, f5_0 = 0.0, f6_0 = 0.0, f7_0 = 0.0, f8_0 = 0.0;
    double f1 = 0.0, f2 = 0.0, f3 = 0.0, f4 = 0.0, f5 = 0.0, f6 = 0.0;
    double f7 = 0.0, f8 = 0.0, f9 = 0.0, f10 = 0.0, f11 = 0.0, f12 = 0.0;
    double Phi1_0 = 0.0, Phi2_0 = 0.0, Phi1 = 0.0, Phi2 = 0.0, Phi3 = 0.0;
    double gamma0 = 0.0, gamma = 0.0, Q0 = 0.0, Q = 0.0, R0 = 1.0, R = 1.0;
    double mu1_0 = 0.0, mu2_0 = 0.0, mu1 = 0.0, mu2 = 0.0, mu3 = 0.0, mu4 = 0.0;
    TerminalCondition xi0, xi;

    friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

using ScalarField = std::pair<std::string_view, double ModelParams::*>;

inline const std::array<ScalarField, 52>& scalar_fields() {
    static const std::array<ScalarField, 52> fields{{
        {"T", &ModelParams::horizon},
        {"x0_major", &ModelParams::x0_major}, {"x0_minor", &ModelParams::x0_minor},
        {"b1_0", &ModelParams::b1_0}, {"b2_0", &ModelParams::b2_0},
        {"b3_0", &ModelParams::b3_0}, {"b4_0", &ModelParams::b4_0},
        {"b1", &ModelParams::b1}, {"b2", &ModelParams::b2}, {"b3", &ModelParams::b3},
        {"b4", &ModelParams::b4}, {"b5", &ModelParams::b5}, {"b6", &ModelParams::b6},
        {"sigma0", &ModelParams::sigma0}, {"sigma", &ModelParams::sigma},
        {"f1_0", &ModelParams::f1_0}, {"f2_0", &ModelParams::f2_0}, {"f3_0", &ModelParams::f3_0},
        {"f4_0", &ModelParams::f4_0}, {"f5_0", &ModelParams::f5_0}, {"f6_0", &ModelParams::f6_0},
        {"f7_0", &ModelParams::f7_0}, {"f8_0", &ModelParams::f8_0},
        {"f1", &ModelParams::f1}, {"f2", &ModelParams::f2}, {"f3", &ModelParams::f3},
        {"f4", &ModelParams::f4}, {"f5", &ModelParams::f5}, {"f6", &ModelParams::f6},
        {"f7", &ModelParams::f7}, {"f8", &ModelParams::f8}, {"f9", &ModelParams::f9},
        {"f10", &ModelParams::f10}, {"f11", &ModelParams::f11}, {"f12", &ModelParams::f12},
        {"Phi1_0", &ModelParams::Phi1_0}, {"Phi2_0", &ModelParams::Phi2_0},
        {"Phi1", &ModelParams::Phi1}, {"Phi2", &ModelParams::Phi2}, {"Phi3", &ModelParams::Phi3},
        {"gamma0", &ModelParams::gamma0}, {"gamma", &ModelParams::gamma},
        {"Q0", &ModelParams::Q0}, {"Q", &ModelParams::Q},
        {"R0", &ModelParams::R0}, {"R", &ModelParams::R},
        {"mu1_0", &ModelParams::mu1_0}, {"mu2_0", &ModelParams::mu2_0},
        {"mu1", &ModelParams::mu1}, {"mu2", &ModelParams::mu2},
        {"mu3", &ModelParams::mu3}, {"mu4", &ModelParams::mu4},
    }};
    return fields;
}

struct ValidationReport {
    std::vector<std::string> violations;
    bool ok() const { return violations.empty(); }
};

inline constexpr double kCouplingTolerance = 1e-12;

inline ValidationReport validate(const ModelParams& params) {
    ValidationReport report;
    auto add = [&](std::string msg) { report.violations.push_back(std::move(msg)); };
    for (const auto& [name, member] : scalar_fields()) {
        if (!std::isfinite(params.*member)) add(std::string(name) + " must be finite");
    }
    if (!params.xi0.all_finite()) add("xi0 parameters must be finite");
    if (!params.xi.all_finite()) add("xi parameters must be finite");
    if (!(params.horizon > 0.0)) add("T must be strictly positive");
    if (!(params.R0 > 0.0)) add("R0 must be strictly positive");
    if (!(params.R > 0.0)) add("R must be strictly positive");
    if (!(params.gamma0 >= 0.0)) add("gamma0 must be nonnegative");
    if (!(params.gamma >= 0.0)) add("gamma must be nonnegative");
    if (!(params.Q0 >= 0.0)) add("Q0 must be nonnegative");
    if (!(params.Q >= 0.0)) add("Q must be nonnegative");
    if (std::abs(params.mu3 + params.mu2_0 * params.mu4 - 1.0) <= kCouplingTolerance) {
        add("mu3 + mu2_0*mu4 = 1");
    }
    return report;
}

inline void require_valid(const ModelParams& params) {
    const auto report = validate(params);
    if (report.ok()) return;
    std::string msg = "invalid parameters:";
    for (const auto& v : report.violations) msg += " " + v + ";";
    throw ConfigError(msg);
}

// Structural flags of the two specializations.
inline bool is_forward_case(const ModelParams& p) { return p.gamma0 == 0.0 && p.gamma == 0.0; }

inline bool is_backward_case(const ModelParams& p) {
    return p.Q0 == 0.0 && p.Q == 0.0 && p.f1_0 == 0.0 && p.f5_0 == 0.0 && p.f1 == 0.0 &&
           p.f5 == 0.0 && p.f9 == 0.0 && p.Phi1_0 == 0.0 && p.Phi2_0 == 0.0 && p.Phi1 == 0.0 &&
           p.Phi2 == 0.0 && p.Phi3 == 0.0;
}

// ---------------------------------------------------------------- JSON

inline nlohmann::json to_json(const TerminalCondition& tc) {
    const bool mart = tc.kind() == TerminalCondition::Kind::exponential_martingale;
    return {{"class", mart ? "ExponentialMartingale" : "DeterministicConstant"},
            {"c", tc.scale()},
            {"a", tc.noise_loading()},
            {"b", tc.drift()}};
}

inline TerminalCondition terminal_from_json(const nlohmann::json& j, std::string_view where) {
    if (!j.is_object()) throw ConfigError(std::string(where) + ": terminal condition must be an object");
    const auto cls = j.value("class", std::string("DeterministicConstant"));
    auto num = [&](const char* key) {
        if (!j.contains(key)) return 0.0;
        if (!j.at(key).is_number()) throw ConfigError(std::string(where) + "." + key + " must be a number");
        return j.at(key).get<double>();
    };
    for (const auto& item : j.items()) {
        if (item.key() != "class" && item.key() != "c" && item.key() != "a" && item.key() != "b") {
            throw ConfigError(std::string(where) + ": unknown field '" + item.key() + "'");
        }
    }
    if (cls == "DeterministicConstant") return TerminalCondition::constant(num("c"));
    if (cls == "ExponentialMartingale") return TerminalCondition::exponential(num("c"), num("a"), num("b"));
    throw ConfigError(std::string(where) + ": unsupported terminal class '" + cls + "'");
}

inline nlohmann::json to_json(const ModelParams& params) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [name, member] : scalar_fields()) j[std::string(name)] = params.*member;
    j["xi0"] = to_json(params.xi0);
    j["xi"] = to_json(params.xi);
    return j;
}

// Missing scalar fields keep their defaults; unknown keys are rejected.
inline ModelParams params_from_json(const nlohmann::json& j, ModelParams base = {}) {
    if (!j.is_object()) throw ConfigError("model parameters must be a JSON object");
    for (const auto& item : j.items()) {
        const auto& key = item.key();
        if (key == "xi0") { base.xi0 = terminal_from_json(item.value(), "xi0"); continue; }
        if (key == "xi") { base.xi = terminal_from_json(item.value(), "xi"); continue; }
        bool known = false;
        for (const auto& [name, member] : scalar_fields()) {
            if (name != key) continue;
            if (!item.value().is_number()) throw ConfigError("field '" + key + "' must be a number");
            base.*member = item.value().get<double>();
            known = true;
            break;
        }
        if (!known) throw ConfigError("unknown field '" + key + "'");
    }
    return base;
}

// ---------------------------------------------------------------- presets

// Backward game with weak coupling through control averages.
inline ModelParams make_eg4(double mu2_0, double mu3, double mu4, double f2) {
    ModelParams p;
    p.horizon = 1.0;
    p.gamma0 = p.gamma = 0.5;
    p.R0 = p.R = 0.5;
    p.mu2_0 = mu2_0;
    p.mu3 = mu3;
    p.mu4 = mu4;
    p.f3_0 = 1.0;
    p.f4_0 = 1.0;
    p.f8_0 = -mu2_0;
    p.f2 = f2;
    p.f3 = 1.0 - f2;
    p.f10 = -f2;
    p.f11 = f2;
    p.f4 = 1.0;
    p.f8 = -mu4;
    p.f12 = -mu3;
    p.sigma0 = 0.3;
    p.sigma = 0.2;
    p.xi0 = TerminalCondition::exponential(1.0, 0.5, -0.1);
    p.xi = TerminalCondition::exponential(2.0, 0.3, 0.2);
    return p;
}

// Backward game coupled through (Y^(N), u^(N)) and the major's control.
inline ModelParams make_eg1(double f6_0, double f8_0, double f2, double f8, double f12) {
    ModelParams p;
    p.horizon = 1.0;
    p.gamma0 = p.gamma = 1.0;
    p.R0 = p.R = 1.0;
    p.f6_0 = f6_0;
    p.f8_0 = f8_0;
    p.f2 = f2;
    p.f10 = -f2;
    p.f8 = f8;
    p.f12 = f12;
    p.sigma0 = 0.3;
    p.sigma = 0.2;
    p.xi0 = TerminalCondition::constant(1.0);
    p.xi = TerminalCondition::constant(0.0);
    return p;
}

inline ModelParams make_forward_cz() {
    ModelParams p;
    p.horizon = 1.0;
    p.x0_major = 1.0;
    p.x0_minor = 0.5;
    p.b1_0 = -0.5; p.b2_0 = 1.0; p.b3_0 = 0.3;
    p.b1 = -0.2; p.b2 = 0.8; p.b3 = 0.4; p.b5 = 0.2;
    p.sigma0 = 0.5; p.sigma = 0.3;
    p.Q0 = 1.0; p.Q = 0.8; p.R0 = 1.0; p.R = 0.5;
    p.mu1_0 = 0.5; p.mu1 = 0.4; p.mu2 = 0.3;
    return p;
}

inline ModelParams make_backward_generic() {
    ModelParams p;
    p.horizon = 1.0;
    p.x0_major = 0.5; p.x0_minor = -0.2;
    p.b1_0 = -0.3; p.b2_0 = 0.5; p.b1 = -0.2; p.b2 = 0.6; p.b3 = 0.2;
    p.sigma0 = 0.3; p.sigma = 0.4;
    p.f2_0 = -0.2; p.f3_0 = 0.3; p.f4_0 = 0.5; p.f6_0 = 0.4; p.f7_0 = 0.1; p.f8_0 = -0.3;
    p.f2 = 0.2; p.f3 = 0.25; p.f4 = 0.6; p.f6 = 0.3; p.f7 = -0.1; p.f8 = 0.35;
    p.f10 = -0.15; p.f11 = 0.2; p.f12 = 0.25;
    p.gamma0 = 0.4; p.gamma = 0.3; p.R0 = 1.0; p.R = 0.8;
    p.mu2_0 = 0.3; p.mu3 = 0.2; p.mu4 = 0.25;
    p.xi0 = TerminalCondition::exponential(0.8, 0.3, 0.0);
    p.xi = TerminalCondition::constant(-0.5);
    return p;
}

// Every coupling channel switched on, deterministic terminal offsets.
inline ModelParams make_coupled_generic() {
    ModelParams p;
    p.horizon = 1.0;
    p.x0_major = 1.0; p.x0_minor = 0.5;
    p.b1_0 = -0.4; p.b2_0 = 0.8; p.b3_0 = 0.3; p.b4_0 = 0.2;
    p.b1 = -0.3; p.b2 = 0.7; p.b3 = 0.25; p.b4 = 0.15; p.b5 = 0.4; p.b6 = 0.2;
    p.sigma0 = 0.4; p.sigma = 0.5;
    p.f1_0 = 0.1; p.f2_0 = -0.2; p.f3_0 = 0.1; p.f4_0 = 0.2;
    p.f5_0 = 0.15; p.f6_0 = 0.1; p.f7_0 = 0.05; p.f8_0 = -0.1;
    p.f1 = 0.1; p.f2 = -0.1; p.f3 = 0.15; p.f4 = 0.2; p.f5 = 0.1; p.f6 = 0.05;
    p.f7 = 0.1; p.f8 = 0.1; p.f9 = 0.1; p.f10 = 0.05; p.f11 = 0.05; p.f12 = -0.1;
    p.Phi1_0 = 0.3; p.Phi2_0 = 0.2; p.Phi1 = 0.4; p.Phi2 = 0.1; p.Phi3 = 0.2;
    p.gamma0 = 0.3; p.gamma = 0.2; p.Q0 = 1.0; p.Q = 0.8; p.R0 = 1.0; p.R = 0.8;
    p.mu1_0 = 0.5; p.mu2_0 = 0.2; p.mu1 = 0.6; p.mu2 = 0.3; p.mu3 = 0.2; p.mu4 = 0.3;
    p.xi0 = TerminalCondition::constant(0.5);
    p.xi = TerminalCondition::constant(-0.4);
    return p;
}

// No channel links agents to each other; finite-N and limit coincide.
inline ModelParams make_decoupled() {
    ModelParams p;
    p.horizon = 1.0;
    p.x0_major = 1.0; p.x0_minor = 0.5;
    p.b1_0 = -0.4; p.b2_0 = 0.8; p.b1 = -0.3; p.b2 = 0.7;
    p.sigma0 = 0.4; p.sigma = 0.5;
    p.f2_0 = -0.2; p.f2 = 0.1;
    p.gamma0 = 0.3; p.gamma = 0.2; p.Q0 = 1.0; p.Q = 0.8; p.R0 = 1.0; p.R = 0.8;
    p.xi0 = TerminalCondition::constant(0.5);
    p.xi = TerminalCondition::constant(-0.4);
    return p;
}

inline std::vector<std::string> preset_names() {
    return {"example_eg4", "example_eg1", "forward_cz", "backward_generic", "coupled_generic", "decoupled"};
}

inline ModelParams load_preset(std::string_view name) {
    if (name == "example_eg4") return make_eg4(0.0, 0.2, 0.4, 0.0);
    if (name == "example_eg1") return make_eg1(1.0, 0.5, 0.0, 1.0, 0.2);
    if (name == "forward_cz") return make_forward_cz();
    if (name == "backward_generic") return make_backward_generic();
    if (name == "coupled_generic") return make_coupled_generic();
    if (name == "decoupled") return make_decoupled();
    throw ConfigError("unknown preset '" + std::string(name) + "'");
}

} // namespace rmm
