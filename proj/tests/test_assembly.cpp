#include <random>

#include <gtest/gtest.h>

#include "rmm/assembly.hpp"

namespace {

using rmm::Mat2;
using rmm::Mat23;
using rmm::Mat3;
using rmm::Mat32;

TEST(Assembly, ConsistencyDefectIsRoundoff) {
    for (const auto& name : rmm::preset_names()) {
        const auto p = rmm::load_preset(name);
        EXPECT_LT(rmm::consistency_defect(rmm::assemble(p), p), 1e-14) << name;
    }
}

TEST(Assembly, ConsistencyHoldsOnRandomCoefficients) {
    std::mt19937_64 gen(4);
    std::uniform_real_distribution<double> unif(-1.0, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
        rmm::ModelParams p = rmm::load_preset("coupled_generic");
        for (const auto& [name, member] : rmm::scalar_fields()) {
            if (name == "T" || name == "R0" || name == "R" || name == "gamma0" || name == "gamma" || name == "Q0" ||
                name == "Q") {
                continue;
            }
            p.*member = unif(gen);
        }
        if (!rmm::validate(p).ok()) continue;
        EXPECT_LT(rmm::consistency_defect(rmm::assemble(p), p), 1e-12);
    }
}

TEST(Assembly, RejectsInvalidParameters) {
    auto p = rmm::load_preset("coupled_generic");
    p.R0 = 0.0;
    EXPECT_THROW(rmm::assemble(p), rmm::ConfigError);
}

TEST(Assembly, RhoTildeEmbedsRhoLowerLeft) {
    const auto s = rmm::assemble(rmm::load_preset("coupled_generic"));
    EXPECT_TRUE(s.rho_tilde.topRows<2>().isZero(0.0));
    EXPECT_TRUE((s.rho_tilde.bottomRightCorner<3, 3>().isZero(0.0)));
    EXPECT_EQ(Mat32(s.rho_tilde.bottomLeftCorner<3, 2>()), s.rho);
    EXPECT_EQ(s.rho(0, 0), 0.6);
    EXPECT_EQ(s.rho(2, 1), 0.4);
}

TEST(Assembly, GeneratorLowerRightCarriesOwnDriverTerm) {
    const auto s = rmm::assemble(rmm::load_preset("backward_generic"));
    const Mat3 expected = s.C3 + s.C4 + s.rho * (s.C7 + s.C8);
    EXPECT_LT((Mat3(s.H1.bottomRightCorner<3, 3>()) - expected).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Assembly, DecoupledPresetHasNoCrossAgentBlocks) {
    const auto s = rmm::assemble(rmm::load_preset("decoupled"));
    EXPECT_TRUE(s.A2.isZero(0.0));
    EXPECT_TRUE(s.B6.isZero(0.0));
    EXPECT_TRUE(s.C4.isZero(0.0));
    EXPECT_TRUE(s.C6.isZero(0.0));
    EXPECT_TRUE(s.D2.isZero(0.0));
    EXPECT_TRUE(s.F2.isZero(0.0));
}

TEST(Assembly, SpecializationGuards) {
    const auto coupled = rmm::load_preset("coupled_generic");
    const auto s = rmm::assemble(coupled);
    EXPECT_THROW(rmm::build_A_hat(s), rmm::PreconditionError);
    try {
        rmm::build_B_matrix(s, coupled);
        FAIL() << "expected PreconditionError";
    } catch (const rmm::PreconditionError& e) {
        EXPECT_NE(std::string(e.what()).find("Q0 = 0"), std::string::npos);
    }
    const auto forward = rmm::load_preset("forward_cz");
    EXPECT_NO_THROW(rmm::build_A_hat(rmm::assemble(forward)));
    const auto backward = rmm::load_preset("example_eg4");
    EXPECT_NO_THROW(rmm::build_B_matrix(rmm::assemble(backward), backward));
}

TEST(Assembly, PushThroughIdentity) {
    // (I - rho (I + S rho)^-1 S) = (I + rho S)^-1 for the 2x3 top-right block S.
    std::mt19937_64 gen(2);
    std::uniform_real_distribution<double> unif(-0.5, 0.5);
    const auto s = rmm::assemble(rmm::load_preset("backward_generic"));
    for (int trial = 0; trial < 20; ++trial) {
        Mat23 block;
        for (int i = 0; i < 2; ++i) {
            for (int j = 0; j < 3; ++j) block(i, j) = unif(gen);
        }
        const Mat3 lhs = Mat3::Identity() - s.rho * (Mat2::Identity() + block * s.rho).inverse() * block;
        const Mat3 rhs = (Mat3::Identity() + s.rho * block).inverse();
        EXPECT_LT((lhs - rhs).cwiseAbs().maxCoeff(), 1e-13);
    }
}

TEST(Assembly, DumpListsBlocksAndEmbedding) {
    const auto j = rmm::to_json(rmm::assemble(rmm::load_preset("coupled_generic")));
    for (const char* key : {"H1", "H7", "G1", "G2", "rho_tilde", "Lambda3", "embedding"}) {
        EXPECT_TRUE(j.contains(key)) << key;
    }
    EXPECT_EQ(j["H1"].size(), 5u);
    EXPECT_EQ(j["H1"][0].size(), 5u);
}

} // namespace
