#include <atomic>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>
#include <gtest/gtest.h>

#include "rmm/numerics.hpp"
#include "rmm/parallel.hpp"

namespace {

using rmm::Mat3;
using rmm::Mat5;

Mat5 random_matrix(std::uint64_t seed, double scale) {
    std::mt19937_64 gen(seed);
    std::uniform_real_distribution<double> unif(-1.0, 1.0);
    Mat5 m;
    for (int i = 0; i < 5; ++i) {
        for (int j = 0; j < 5; ++j) m(i, j) = scale * unif(gen);
    }
    return m;
}

TEST(Expm, MatchesEigenReference) {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        for (double scale : {0.01, 0.3, 2.0, 8.0}) {
            const Mat5 a = random_matrix(seed, scale);
            const Mat5 ours = rmm::expm(a);
            const Mat5 reference = a.exp();
            const double rel = (ours - reference).cwiseAbs().maxCoeff() / reference.cwiseAbs().maxCoeff();
            EXPECT_LT(rel, 1e-12) << "seed " << seed << " scale " << scale;
        }
    }
}

TEST(Expm, GroupProperties) {
    const Mat5 a = random_matrix(7, 1.5);
    EXPECT_LT((rmm::expm(Mat5::Zero()) - Mat5::Identity()).cwiseAbs().maxCoeff(), 0.0 + 1e-300);
    EXPECT_LT((rmm::expm(a) * rmm::expm(Mat5(-a)) - Mat5::Identity()).cwiseAbs().maxCoeff(), 1e-12);
    // Commuting arguments: exp(2A) = exp(A)^2.
    const Mat5 e = rmm::expm(a);
    EXPECT_LT((rmm::expm(Mat5(2.0 * a)) - e * e).cwiseAbs().maxCoeff() / (e * e).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Expm, RejectsNonFinite) {
    Mat3 a = Mat3::Identity();
    a(1, 2) = NAN;
    EXPECT_THROW(rmm::expm(a), rmm::NumericalError);
}

TEST(LinearSolve, MatchesFullPivotReference) {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        const Mat5 a = random_matrix(seed, 1.0) + 3.0 * Mat5::Identity();
        const rmm::Vec5 b = random_matrix(seed + 100, 1.0).col(0);
        const auto ours = rmm::solve_linear(a, b);
        const rmm::Vec5 reference = a.fullPivLu().solve(b);
        EXPECT_LT((ours.solution - reference).cwiseAbs().maxCoeff(), 1e-12);
        EXPECT_LT(ours.residual, 1e-12);
        EXPECT_GE(ours.condition, 1.0);
    }
}

TEST(LinearSolve, SingularAndIllConditionedThrow) {
    Mat3 singular;
    singular << 1, 2, 3, 2, 4, 6, 1, 0, 1;
    EXPECT_THROW(rmm::solve_linear(singular, rmm::Vec3(1, 1, 1)), rmm::SingularSystemError);
    Mat3 ill = Mat3::Identity();
    ill(2, 2) = 1e-11;
    EXPECT_THROW(rmm::checked_inverse(ill), rmm::SingularSystemError);
}

TEST(Rk4, FourthOrderOnLinearOde) {
    // y' = a y with y(T) = 1 backward: y(0) = exp(-a T).
    const double a = 1.3, T = 2.0;
    auto error = [&](int steps) {
        const rmm::TimeGrid grid(T, steps);
        const auto path = rmm::integrate_backward([&](double, double y) { return a * y; }, 1.0, grid);
        return std::abs(path.front() - std::exp(-a * T));
    };
    const double ratio = error(20) / error(40);
    EXPECT_NEAR(ratio, 16.0, 1.0);
}

TEST(Rk4, MatrixRiccatiAgainstExpmSolution) {
    // Linear matrix ODE S' = -(A S), S(T) = I has S(t) = exp(A (T - t)).
    const Mat5 a = random_matrix(3, 0.5);
    const rmm::TimeGrid grid(1.0, 400);
    const auto path = rmm::integrate_backward([&](double, const Mat5& s) { return Mat5(-(a * s)); },
                                              Mat5(Mat5::Identity()), grid);
    for (int k = 0; k <= grid.steps(); k += 50) {
        const Mat5 exact = (a * (1.0 - grid.node(k))).exp();
        EXPECT_LT((path[k] - exact).cwiseAbs().maxCoeff(), 1e-10);
    }
}

TEST(Rk4, BlowUpNamesTime) {
    const rmm::TimeGrid grid(1.0, 100);
    try {
        rmm::integrate_backward([](double, double y) { return -y * y; }, 1e200, grid);
        FAIL() << "expected blow-up";
    } catch (const rmm::BlowUpError& e) {
        EXPECT_NE(std::string(e.what()).find("blow-up at t="), std::string::npos);
    }
}

TEST(TimeGrid, NodesHitEndpointsExactly) {
    const rmm::TimeGrid grid(0.7, 3000);
    EXPECT_EQ(grid.node(0), 0.0);
    EXPECT_EQ(grid.node(3000), 0.7);
}

TEST(CounterEngine, ReproducibleAndKeyed) {
    rmm::CounterEngine a(5, 2, 1), b(5, 2, 1), c(5, 2, 2), d(6, 2, 1);
    for (int i = 0; i < 100; ++i) {
        const auto x = a();
        EXPECT_EQ(x, b());
        EXPECT_NE(x, c());
        EXPECT_NE(x, d());
    }
}

TEST(GaussianStream, MomentsAreStandardNormal) {
    rmm::GaussianStream g(1, 0, 0);
    const int n = 200000;
    double sum = 0.0, sq = 0.0;
    for (int i = 0; i < n; ++i) {
        const double x = g();
        sum += x;
        sq += x * x;
    }
    EXPECT_NEAR(sum / n, 0.0, 5.0 / std::sqrt(n));
    EXPECT_NEAR(sq / n, 1.0, 5.0 * std::sqrt(2.0 / n));
}

TEST(Reductions, SymmetricMeanIsPermutationInvariant) {
    std::mt19937_64 gen(9);
    std::normal_distribution<double> normal;
    std::vector<double> v(1001);
    for (double& x : v) x = std::exp(3.0 * normal(gen));
    std::vector<double> scratch;
    const double reference = rmm::symmetric_mean(v, scratch);
    for (int trial = 0; trial < 10; ++trial) {
        std::shuffle(v.begin(), v.end(), gen);
        EXPECT_EQ(rmm::symmetric_mean(v, scratch), reference);
    }
}

TEST(Reductions, PairwiseSumIsAccurate) {
    std::vector<double> v(1 << 20, 0.1);
    EXPECT_NEAR(rmm::pairwise_sum(v), 0.1 * v.size(), 1e-9);
}

TEST(Reductions, SummaryStandardError) {
    const std::vector<double> v{1.0, 2.0, 3.0, 4.0};
    const auto s = rmm::summarize(v);
    EXPECT_DOUBLE_EQ(s.mean, 2.5);
    EXPECT_NEAR(s.standard_error, std::sqrt((5.0 / 3.0) / 4.0), 1e-15);
}

TEST(ParallelFor, VisitsEachIndexOnce) {
    std::vector<std::atomic<int>> hits(1000);
    rmm::parallel_for(1000, 4, [&](int i) { ++hits[static_cast<std::size_t>(i)]; });
    for (const auto& h : hits) EXPECT_EQ(h.load(), 1);
}

TEST(ParallelFor, RethrowsLowestFailingIndex) {
    try {
        rmm::parallel_for(100, 4, [](int i) {
            if (i == 17 || i == 60) throw std::runtime_error(std::to_string(i));
        });
        FAIL() << "expected exception";
    } catch (const std::runtime_error& e) {
        EXPECT_STREQ(e.what(), "17");
    }
}

TEST(WorkerCount, ExplicitRequestWins) { EXPECT_EQ(rmm::worker_count(3), 3); }

} // namespace
