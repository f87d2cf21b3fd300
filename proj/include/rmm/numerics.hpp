#pragma once

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "errors.hpp"

namespace rmm {

using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat5 = Eigen::Matrix<double, 5, 5>;
using Mat23 = Eigen::Matrix<double, 2, 3>;
using Mat32 = Eigen::Matrix<double, 3, 2>;
using Mat53 = Eigen::Matrix<double, 5, 3>;
using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec5 = Eigen::Matrix<double, 5, 1>;
using RowVec2 = Eigen::RowVector2d;
using RowVec3 = Eigen::RowVector3d;
using RowVec5 = Eigen::Matrix<double, 1, 5>;

inline std::string format_double(double x) {
    std::ostringstream out;
    out.precision(6);
    out << x;
    return out.str();
}

// Uniform grid on [0, T]; node(steps()) is exactly T.
class TimeGrid {
public:
    TimeGrid(double horizon, int steps) : horizon_(horizon), steps_(steps) {
        if (!(horizon > 0.0) || !std::isfinite(horizon)) throw ConfigError("grid horizon must be positive");
        if (steps < 1) throw ConfigError("grid needs at least one step");
    }

    double horizon() const { return horizon_; }
    int steps() const { return steps_; }
    double step() const { return horizon_ / steps_; }
    double node(int k) const { return k >= steps_ ? horizon_ : horizon_ * k / steps_; }

    friend bool operator==(const TimeGrid&, const TimeGrid&) = default;

private:
    double horizon_;
    int steps_;
};

inline bool all_finite(double x) { return std::isfinite(x); }

template <class Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
    return m.allFinite();
}

// One value per grid node.
template <class Value>
class Path {
public:
    Path(TimeGrid grid, std::vector<Value> values) : grid_(grid), values_(std::move(values)) {
        if (static_cast<int>(values_.size()) != grid_.steps() + 1) {
            throw NumericalError("path length does not match grid");
        }
    }

    const TimeGrid& grid() const { return grid_; }
    int size() const { return static_cast<int>(values_.size()); }
    const Value& operator[](int k) const { return values_[static_cast<std::size_t>(k)]; }
    const Value& front() const { return values_.front(); }
    const Value& back() const { return values_.back(); }
    auto begin() const { return values_.begin(); }
    auto end() const { return values_.end(); }

private:
    TimeGrid grid_;
    std::vector<Value> values_;
};

template <class Matrix>
using MatrixFunctionPath = Path<Matrix>;

// ---------------------------------------------------------------- linear solves

inline constexpr double kPivotTolerance = 1e-12;
inline constexpr double kConditionLimit = 1e10;

template <class Solution>
struct LinearSolution {
    Solution solution;
    double residual;   // max-norm of A x - b
    double condition;  // 1-norm condition estimate of A
};

// LU with partial pivoting for small dense matrices.
template <class Matrix>
class PivotedLu {
public:
    explicit PivotedLu(const Matrix& a) : lu_(a), perm_(a.rows()) {
        const Eigen::Index n = a.rows();
        if (a.cols() != n) throw NumericalError("LU needs a square matrix");
        if (!a.allFinite()) throw NumericalError("LU input is not finite");
        const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
        for (Eigen::Index i = 0; i < n; ++i) perm_[i] = i;
        for (Eigen::Index k = 0; k < n; ++k) {
            Eigen::Index pivot_row = k;
            for (Eigen::Index i = k + 1; i < n; ++i) {
                if (std::abs(lu_(i, k)) > std::abs(lu_(pivot_row, k))) pivot_row = i;
            }
            if (std::abs(lu_(pivot_row, k)) < kPivotTolerance * scale) {
                throw SingularSystemError("singular system: pivot " + format_double(lu_(pivot_row, k)) +
                                              " in column " + std::to_string(k),
                                          INFINITY);
            }
            if (pivot_row != k) {
                lu_.row(k).swap(lu_.row(pivot_row));
                std::swap(perm_[k], perm_[pivot_row]);
            }
            for (Eigen::Index i = k + 1; i < n; ++i) {
                lu_(i, k) /= lu_(k, k);
                for (Eigen::Index j = k + 1; j < n; ++j) lu_(i, j) -= lu_(i, k) * lu_(k, j);
            }
        }
    }

    template <class Rhs>
    Rhs solve(const Rhs& b) const {
        const Eigen::Index n = lu_.rows();
        Rhs x = b;
        for (Eigen::Index i = 0; i < n; ++i) x.row(i) = b.row(perm_[i]);
        for (Eigen::Index i = 1; i < n; ++i) {
            for (Eigen::Index j = 0; j < i; ++j) x.row(i) -= lu_(i, j) * x.row(j);
        }
        for (Eigen::Index i = n - 1; i >= 0; --i) {
            for (Eigen::Index j = i + 1; j < n; ++j) x.row(i) -= lu_(i, j) * x.row(j);
            x.row(i) /= lu_(i, i);
        }
        return x;
    }

    Matrix inverse() const { return solve(Matrix(Matrix::Identity(lu_.rows(), lu_.cols()))); }

private:
    Matrix lu_;
    std::vector<Eigen::Index> perm_;
};

inline double one_norm(const auto& m) { return m.cwiseAbs().colwise().sum().maxCoeff(); }

// Inverse with the (A5)-style checks: tiny pivot or condition above 1e10
// raise SingularSystemError.
template <class Matrix>
std::pair<Matrix, double> checked_inverse(const Matrix& a) {
    const PivotedLu<Matrix> lu(a);
    Matrix inv = lu.inverse();
    const double condition = one_norm(a) * one_norm(inv);
    if (!(condition <= kConditionLimit)) {
        throw SingularSystemError("singular system: condition estimate " + format_double(condition), condition);
    }
    return {std::move(inv), condition};
}

template <class Matrix, class Rhs>
LinearSolution<Rhs> solve_linear(const Matrix& a, const Rhs& b) {
    const PivotedLu<Matrix> lu(a);
    const Matrix inv = lu.inverse();
    const double condition = one_norm(a) * one_norm(inv);
    if (!(condition <= kConditionLimit)) {
        throw SingularSystemError("singular system: condition estimate " + format_double(condition), condition);
    }
    Rhs x = lu.solve(b);
    const double residual = (a * x - b).cwiseAbs().maxCoeff();
    const double scale = a.cwiseAbs().maxCoeff() * x.cwiseAbs().maxCoeff() + b.cwiseAbs().maxCoeff();
    if (!(residual <= 1e-10 * std::max(scale, 1e-300) * static_cast<double>(a.rows()))) {
        throw NumericalError("linear solve residual " + format_double(residual) + " exceeds bound");
    }
    return {std::move(x), residual, condition};
}

// ---------------------------------------------------------------- expm

// Scaling and squaring with the diagonal Padé approximant of degree 8.
template <class Derived>
auto expm(const Eigen::MatrixBase<Derived>& input) {
    using Matrix = typename Derived::PlainObject;
    const Matrix a = input;
    if (a.rows() != a.cols()) throw NumericalError("expm needs a square matrix");
    if (!a.allFinite()) throw NumericalError("expm: non-finite input");

    constexpr int degree = 8;
    const double norm = a.rows() == 0 ? 0.0 : one_norm(a);
    int squarings = 0;
    if (norm > 0.5) squarings = static_cast<int>(std::ceil(std::log2(norm / 0.5)));
    const Matrix scaled = a / std::ldexp(1.0, squarings);

    const Matrix identity = Matrix::Identity(a.rows(), a.cols());
    Matrix numerator = identity;
    Matrix denominator = identity;
    Matrix power = identity;
    double coefficient = 1.0;
    for (int k = 1; k <= degree; ++k) {
        coefficient *= static_cast<double>(degree - k + 1) / (k * (2.0 * degree - k + 1));
        power = power * scaled;
        numerator += coefficient * power;
        denominator += ((k % 2 == 0) ? coefficient : -coefficient) * power;
    }
    Matrix result = PivotedLu<Matrix>(denominator).solve(numerator);
    for (int i = 0; i < squarings; ++i) result = result * result;
    return result;
}

// ---------------------------------------------------------------- ODEs

// Classical RK4 from the terminal node back to node 0. `rhs(t, y)` returns dy/dt.
template <class State, class Rhs>
Path<State> integrate_backward(Rhs&& rhs, const State& terminal, const TimeGrid& grid) {
    const int n = grid.steps();
    std::vector<State> values(static_cast<std::size_t>(n) + 1, terminal);
    const double h = grid.step();
    for (int k = n; k > 0; --k) {
        const double t = grid.node(k);
        const State& y = values[static_cast<std::size_t>(k)];
        const State k1 = rhs(t, y);
        const State k2 = rhs(t - 0.5 * h, State(y + (-0.5 * h) * k1));
        const State k3 = rhs(t - 0.5 * h, State(y + (-0.5 * h) * k2));
        const State k4 = rhs(grid.node(k - 1), State(y + (-h) * k3));
        State next = y + (-h / 6.0) * State(k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if (!all_finite(next)) {
            throw BlowUpError("blow-up at t=" + format_double(grid.node(k - 1)));
        }
        values[static_cast<std::size_t>(k) - 1] = std::move(next);
    }
    return Path<State>(grid, std::move(values));
}

} // namespace rmm
