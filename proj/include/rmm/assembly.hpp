#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include <json.hpp>

#include "model.hpp"
#include "numerics.hpp"

namespace rmm {

// Coefficients of the equilibrium controls as affine maps of (Y-bar, P-bar, L).
struct EquilibriumConstants {
    double a = 0.0;
    Vec3 a1_0 = Vec3::Zero(), a3_0 = Vec3::Zero();
    Vec3 a1 = Vec3::Zero(), a3 = Vec3::Zero();
    Vec3 a7 = Vec3::Zero(), a8 = Vec3::Zero();
};

// Block matrices of the consistency FBSDE. Ordering conventions:
//   X-bar = (X0, X1-bar), L = (L0, L, L_dagger), Y-bar = (Y0, Y1-bar),
//   P-bar = (P0, P, P_dagger); 5-vectors stack (X-bar, L) or (Y-bar, P-bar).
// Shapes are fixed at compile time, so every product is conformable by type.
struct AssembledSystem {
    EquilibriumConstants constants;
    Mat2 A1, A2, A3, A4, A7, A8;
    Mat32 A5, A6;
    Mat23 B1, B2, B3, B4;
    Mat3 B5, B6;
    Mat23 C1, C2, C7, C8;
    Mat3 C3, C4, C5, C6, C9, C10, C11, C12;
    Mat2 D1, D2, F1, F2;
    Mat32 rho;
    Mat5 rho_tilde;
    Mat5 H1, H2, H3, H4, H5, H6, H7, G1, G2;
    RowVec5 Lambda1, Lambda2, Lambda4;
    RowVec3 Lambda3;
};

namespace detail {

inline Mat5 blocks(const Mat2& top_left, const Mat23& top_right, const Mat32& bottom_left,
                   const Mat3& bottom_right) {
    Mat5 m;
    m.topLeftCorner<2, 2>() = top_left;
    m.topRightCorner<2, 3>() = top_right;
    m.bottomLeftCorner<3, 2>() = bottom_left;
    m.bottomRightCorner<3, 3>() = bottom_right;
    return m;
}

inline Mat23 stack_rows(const Vec3& first, const Vec3& second) {
    Mat23 m;
    m.row(0) = first.transpose();
    m.row(1) = second.transpose();
    return m;
}

} // namespace detail

inline EquilibriumConstants equilibrium_constants(const ModelParams& p) {
    EquilibriumConstants k;
    k.a = 0.5 / (1.0 - p.mu3 - p.mu2_0 * p.mu4);
    const double a = k.a;
    const double r0 = 1.0 / p.R0;
    const double r = 1.0 / p.R;
    k.a1_0 = a * Vec3((1.0 - p.mu3) * r0 * p.b2_0, (1.0 - p.mu3) * r0 * p.b4, p.mu2_0 * r * p.b2);
    k.a3_0 = -a * Vec3((1.0 - p.mu3) * r0 * p.f4_0, (1.0 - p.mu3) * r0 * p.f8, p.mu2_0 * r * p.f4);
    k.a1 = a * Vec3(p.mu4 * r0 * p.b2_0, p.mu4 * r0 * p.b4, (p.mu3 + p.mu4 * p.mu2_0) * r * p.b2);
    k.a3 = -Vec3(a * p.mu4 * r0 * p.f4_0, a * p.mu4 * r0 * p.f8, (a - 0.5) * r * p.f4);
    k.a7 = Vec3(0.0, 0.0, 0.5 * r * p.b2);
    k.a8 = Vec3(0.0, 0.0, -0.5 * r * p.f4);
    return k;
}

inline AssembledSystem assemble(const ModelParams& p) {
    require_valid(p);
    using detail::blocks;
    using detail::stack_rows;
    AssembledSystem s;
    s.constants = equilibrium_constants(p);
    const auto& k = s.constants;
    const Vec3 zero3 = Vec3::Zero();

    s.A1 << p.b1_0, 0.0, p.b3, p.b1;
    s.A2 << 0.0, p.b3_0, 0.0, p.b5;
    s.A3 << p.f1_0, 0.0, p.f5, p.f1;
    s.A4 << 0.0, p.f5_0, 0.0, p.f9;
    s.A5 << -2.0 * p.Q0, 0.0, 2.0 * p.mu1_0 * p.Q0, 0.0, 2.0 * p.mu2 * p.Q, -2.0 * p.Q;
    s.A6 << 0.0, 2.0 * p.mu1_0 * p.Q0, 0.0, -2.0 * p.mu1_0 * p.mu1_0 * p.Q0, 0.0, 2.0 * p.mu1 * p.Q;
    s.A7 << p.Phi1_0, 0.0, p.Phi2, p.Phi1;
    s.A8 << 0.0, p.Phi2_0, 0.0, p.Phi3;

    s.B1 = stack_rows(zero3, p.b2 * k.a7);
    s.B2 = stack_rows(p.b2_0 * k.a1_0 + p.b4_0 * k.a1 + p.b4_0 * k.a7,
                      (p.b2 + p.b6) * k.a1 + p.b4 * k.a1_0 + p.b6 * k.a7);
    s.B3 = stack_rows(zero3, p.f4 * k.a7);
    s.B4 = stack_rows(p.f4_0 * k.a1_0 + p.f8_0 * (k.a1 + k.a7),
                      p.f4 * k.a1 + p.f8 * k.a1_0 + p.f12 * (k.a1 + k.a7));
    s.B5 << p.b1_0, p.b3, 0.0, 0.0, p.b1, 0.0, 0.0, 0.0, p.b1;
    s.B6 << 0.0, 0.0, 0.0, p.b3_0, p.b5, 0.0, 0.0, 0.0, 0.0;

    s.C1 = stack_rows(zero3, p.b2 * k.a8);
    s.C2 = stack_rows(p.b2_0 * k.a3_0 + p.b4_0 * k.a3 + p.b4_0 * k.a8,
                      (p.b2 + p.b6) * k.a3 + p.b4 * k.a3_0 + p.b6 * k.a8);
    s.C3 << p.f2_0, p.f6, 0.0, 0.0, p.f2, 0.0, 0.0, 0.0, p.f2;
    s.C4 << 0.0, 0.0, 0.0, p.f6_0, p.f10, 0.0, 0.0, 0.0, 0.0;
    s.C5 << p.f3_0, p.f7, 0.0, 0.0, p.f3, 0.0, 0.0, 0.0, p.f3;
    s.C6 << 0.0, 0.0, 0.0, p.f7_0, p.f11, 0.0, 0.0, 0.0, 0.0;
    s.C7 = stack_rows(zero3, p.f4 * k.a8);
    s.C8 = stack_rows(p.f4_0 * k.a3_0 + p.f8_0 * (k.a3 + k.a8),
                      p.f4 * k.a3 + p.f8 * k.a3_0 + p.f12 * (k.a3 + k.a8));
    s.C9 << -p.f1_0, -p.f5, 0.0, 0.0, -p.f1, 0.0, 0.0, 0.0, -p.f1;
    s.C10 << 0.0, 0.0, 0.0, -p.f5_0, -p.f9, 0.0, 0.0, 0.0, 0.0;
    s.C11 << -p.Phi1_0, -p.Phi2, 0.0, 0.0, -p.Phi1, 0.0, 0.0, 0.0, -p.Phi1;
    s.C12 << 0.0, 0.0, 0.0, -p.Phi2_0, -p.Phi3, 0.0, 0.0, 0.0, 0.0;

    s.D1 << p.f2_0, 0.0, p.f6, p.f2;
    s.D2 << 0.0, p.f6_0, 0.0, p.f10;
    s.F1 << p.f3_0, 0.0, p.f7, p.f3;
    s.F2 << 0.0, p.f7_0, 0.0, p.f11;

    s.rho << 2.0 * p.gamma0, 0.0, 0.0, 0.0, 0.0, 2.0 * p.gamma;
    s.rho_tilde = blocks(Mat2::Zero(), Mat23::Zero(), s.rho, Mat3::Zero());

    const Mat2 A12 = s.A1 + s.A2, A34 = s.A3 + s.A4, A78 = s.A7 + s.A8;
    const Mat32 A56 = s.A5 + s.A6;
    const Mat23 B12 = s.B1 + s.B2, B34 = s.B3 + s.B4, C12 = s.C1 + s.C2, C78 = s.C7 + s.C8;
    const Mat3 B56 = s.B5 + s.B6, C34 = s.C3 + s.C4, C56 = s.C5 + s.C6;
    const Mat3 C910 = s.C9 + s.C10, C1112 = s.C11 + s.C12;
    const Mat2 D12 = s.D1 + s.D2, F12 = s.F1 + s.F2;
    const Mat32& rho = s.rho;

    // The lower-right block carries C3+C4 as well as rho(C7+C8); without it the
    // decoupling field does not reproduce the drift of L - rho Y-bar.
    s.H1 = blocks(A12, C12, rho * A34, C34 + rho * C78);
    s.H2 = blocks(C78 * rho + D12, B34, C910 * rho, B56);
    s.H3 = blocks(C12 * rho, B12, C34 * rho + rho * C78 * rho + rho * D12, rho * B34);
    s.H4 = blocks(F12, Mat23::Zero(), Mat32::Zero(), Mat3::Zero());
    s.H5 = blocks(Mat2::Zero(), Mat23::Zero(), Mat32::Zero(), C56);
    s.H6 = blocks(Mat2::Zero(), Mat23::Zero(), C56 * rho, Mat3::Zero());
    s.H7 = blocks(A34, C78, A56, C910);
    s.G1 = blocks(Mat2::Zero(), Mat23::Zero(), C1112 * rho, Mat3::Zero());
    s.G2 = blocks(A78, Mat23::Zero(), Mat32::Zero(), C1112);

    const double a = k.a;
    const double major_mix = (p.b2 + p.b6) * p.mu4 + p.b4 * (1.0 - p.mu3);
    s.Lambda1 << p.b3, p.b5, -major_mix * a / p.R0 * p.f4_0, -major_mix * a / p.R0 * p.f8,
        -(p.b2 + p.b4 * p.mu2_0 + p.b6) * a / p.R * p.f4;
    const double mix3 = p.b2 * p.mu4 + p.b4 * (1.0 - p.mu3) + p.b6 * p.mu4;
    s.Lambda3 << mix3 * a / p.R0 * p.b2_0, mix3 * a / p.R0 * p.b4,
        (p.b2 * (p.mu3 + p.mu4 * p.mu2_0) + p.b4 * p.mu2_0 + p.b6) * a / p.R * p.b2;
    s.Lambda2 << 0.0, 0.0, s.Lambda3;
    s.Lambda4 << 2.0 * p.Q * p.mu2, 2.0 * p.Q * p.mu1, 0.0, 0.0, -p.f1;
    return s;
}

// Sums used throughout the solver.
inline Mat2 sum_A12(const AssembledSystem& s) { return s.A1 + s.A2; }
inline Mat23 sum_B12(const AssembledSystem& s) { return s.B1 + s.B2; }
inline Mat23 sum_C12(const AssembledSystem& s) { return s.C1 + s.C2; }
inline Mat3 sum_C34(const AssembledSystem& s) { return s.C3 + s.C4; }
inline Mat3 sum_C56(const AssembledSystem& s) { return s.C5 + s.C6; }
inline Mat23 sum_C78(const AssembledSystem& s) { return s.C7 + s.C8; }
inline Mat2 sum_D12(const AssembledSystem& s) { return s.D1 + s.D2; }
inline Mat2 sum_F12(const AssembledSystem& s) { return s.F1 + s.F2; }

// Consistency check: rebuild the drift and driver loadings of (X-bar, Y-bar)
// from the population-average control u-bar = (a1+a7).P + (a3+a8).L and the
// major's control, and compare with the assembled block sums. Returns the max
// entrywise difference.
inline double consistency_defect(const AssembledSystem& s, const ModelParams& p) {
    const auto& k = s.constants;
    const Vec3 avg_p = k.a1 + k.a7;
    const Vec3 avg_l = k.a3 + k.a8;
    const Mat23 drift_p = detail::stack_rows(p.b2_0 * k.a1_0 + p.b4_0 * avg_p,
                                             (p.b2 + p.b6) * avg_p + p.b4 * k.a1_0);
    const Mat23 drift_l = detail::stack_rows(p.b2_0 * k.a3_0 + p.b4_0 * avg_l,
                                             (p.b2 + p.b6) * avg_l + p.b4 * k.a3_0);
    const Mat23 driver_p = detail::stack_rows(p.f4_0 * k.a1_0 + p.f8_0 * avg_p,
                                              (p.f4 + p.f12) * avg_p + p.f8 * k.a1_0);
    const Mat23 driver_l = detail::stack_rows(p.f4_0 * k.a3_0 + p.f8_0 * avg_l,
                                              (p.f4 + p.f12) * avg_l + p.f8 * k.a3_0);
    double defect = (sum_B12(s) - drift_p).cwiseAbs().maxCoeff();
    defect = std::max(defect, (sum_C12(s) - drift_l).cwiseAbs().maxCoeff());
    defect = std::max(defect, (Mat23(s.B3 + s.B4) - driver_p).cwiseAbs().maxCoeff());
    defect = std::max(defect, (sum_C78(s) - driver_l).cwiseAbs().maxCoeff());
    return defect;
}

// ---------------------------------------------------------------- specializations

// Linear-fractional generator for the backward case. Ordering (ell, Y-bar):
// the top-left block is 3x3.
inline Mat5 build_B_matrix(const AssembledSystem& s, const ModelParams& p) {
    auto need = [](bool ok, const std::string& what) {
        if (!ok) throw PreconditionError("backward closed form requires " + what);
    };
    need(p.Q0 == 0.0, "Q0 = 0 (got " + format_double(p.Q0) + ")");
    need(p.Q == 0.0, "Q = 0 (got " + format_double(p.Q) + ")");
    need(p.f1_0 == 0.0, "f1_0 = 0 (got " + format_double(p.f1_0) + ")");
    need(p.f5_0 == 0.0, "f5_0 = 0 (got " + format_double(p.f5_0) + ")");
    need(p.f1 == 0.0, "f1 = 0 (got " + format_double(p.f1) + ")");
    need(p.f5 == 0.0, "f5 = 0 (got " + format_double(p.f5) + ")");
    need(p.f9 == 0.0, "f9 = 0 (got " + format_double(p.f9) + ")");
    need(p.Phi1_0 == 0.0 && p.Phi2_0 == 0.0 && p.Phi1 == 0.0 && p.Phi2 == 0.0 && p.Phi3 == 0.0,
         "all Phi loadings = 0");
    need(std::abs(p.f3_0 - p.f3 - p.f11) <= 1e-14, "f3_0 = f3 + f11 (got f3_0 = " + format_double(p.f3_0) +
                                                       ", f3 + f11 = " + format_double(p.f3 + p.f11) + ")");
    need(p.f7_0 == 0.0, "f7_0 = 0 (got " + format_double(p.f7_0) + ")");
    need(p.f7 == 0.0, "f7 = 0 (got " + format_double(p.f7) + ")");

    const Mat32& rho = s.rho;
    const Mat3 C34 = sum_C34(s), C56 = sum_C56(s);
    const Mat23 C78 = sum_C78(s);
    const Mat2 c_tilde = C78 * rho + sum_D12(s);
    const Mat32 b_tilde = C34 * rho + rho * c_tilde;
    const Mat3 c_hat = C34 + rho * C78 + p.f3_0 * C56;
    Mat5 m;
    m.topLeftCorner<3, 3>() = c_hat;
    m.topRightCorner<3, 2>() = b_tilde + p.f3_0 * C56 * rho;
    m.bottomLeftCorner<2, 3>() = -C78;
    m.bottomRightCorner<2, 2>() = -c_tilde;
    return m;
}

// Forward-case generator; ordering (X-bar, P-bar), so it is 5x5 and the
// Riccati solution it represents is 3x2. The coupling block uses B1+B2 to
// match the conditional-mean drift of X-bar.
inline Mat5 build_A_hat(const AssembledSystem& s) {
    if (!s.rho.isZero(0.0)) {
        throw PreconditionError("forward closed form requires gamma0 = gamma = 0");
    }
    return detail::blocks(sum_A12(s), sum_B12(s), Mat32(-(s.A5 + s.A6)), Mat3(-(s.B5 + s.B6)));
}

// ---------------------------------------------------------------- debug dump

template <class Derived>
nlohmann::json matrix_json(const Eigen::MatrixBase<Derived>& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline nlohmann::json to_json(const AssembledSystem& s) {
    nlohmann::json j;
    const auto& k = s.constants;
    j["a"] = k.a;
    j["a1_0"] = matrix_json(k.a1_0.transpose());
    j["a3_0"] = matrix_json(k.a3_0.transpose());
    j["a1"] = matrix_json(k.a1.transpose());
    j["a3"] = matrix_json(k.a3.transpose());
    j["a7"] = matrix_json(k.a7.transpose());
    j["a8"] = matrix_json(k.a8.transpose());
#define RMM_DUMP(name) j[#name] = matrix_json(s.name)
    RMM_DUMP(A1); RMM_DUMP(A2); RMM_DUMP(A3); RMM_DUMP(A4);
    RMM_DUMP(A5); RMM_DUMP(A6); RMM_DUMP(A7); RMM_DUMP(A8);
    RMM_DUMP(B1); RMM_DUMP(B2); RMM_DUMP(B3); RMM_DUMP(B4); RMM_DUMP(B5); RMM_DUMP(B6);
    RMM_DUMP(C1); RMM_DUMP(C2); RMM_DUMP(C3); RMM_DUMP(C4); RMM_DUMP(C5); RMM_DUMP(C6);
    RMM_DUMP(C7); RMM_DUMP(C8); RMM_DUMP(C9); RMM_DUMP(C10); RMM_DUMP(C11); RMM_DUMP(C12);
    RMM_DUMP(D1); RMM_DUMP(D2); RMM_DUMP(F1); RMM_DUMP(F2);
    RMM_DUMP(rho); RMM_DUMP(rho_tilde);
    RMM_DUMP(H1); RMM_DUMP(H2); RMM_DUMP(H3); RMM_DUMP(H4); RMM_DUMP(H5); RMM_DUMP(H6); RMM_DUMP(H7);
    RMM_DUMP(G1); RMM_DUMP(G2);
    RMM_DUMP(Lambda1); RMM_DUMP(Lambda2); RMM_DUMP(Lambda3); RMM_DUMP(Lambda4);
#undef RMM_DUMP
    j["embedding"] = {
        {"vector_order", "(X0, X1bar, L0, L, Ldagger) and (Y0, Y1bar, P0, P, Pdagger)"},
        {"H1_lower_right", "(C3+C4) + rho(C7+C8)"},
        {"A_hat", "5x5 [[A1+A2, B1+B2], [-(A5+A6), -(B5+B6)]]; forward Riccati solution is 3x2"},
        {"B_matrix", "5x5 over (ell, Y-bar); backward Riccati solution is 2x3"},
    };
    return j;
}

} // namespace rmm
