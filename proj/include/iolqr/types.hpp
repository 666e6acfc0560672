#pragma once

#include <Eigen/Dense>

#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace iolqr {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Error taxonomy. Argument/shape/config problems are invalid_argument;
// numerical and data failures are runtime_error subclasses so callers can
// distinguish "you called it wrong" from "the data or iteration failed".
// ---------------------------------------------------------------------------

struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Rank deficiency, insufficient excitation, missing trajectory windows.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A spectral radius >= 1 where a stable matrix is required.
struct InstabilityError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConditioningError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct InitializationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NonConvergenceError : std::runtime_error {
    NonConvergenceError(const std::string& what, std::vector<double> residual_history)
        : std::runtime_error(what), residuals(std::move(residual_history)) {}
    std::vector<double> residuals;
};

// ---------------------------------------------------------------------------
// Numerical rank helpers. A singular value counts as nonzero when
// sigma > max(rows, cols) * sigma_max * machine_eps, unless the caller
// overrides the tolerance explicitly (tol > 0).
// ---------------------------------------------------------------------------

inline double rank_tolerance(const MatrixXd& M, double sigma_max) {
    const double dim = static_cast<double>(std::max(M.rows(), M.cols()));
    return dim * sigma_max * std::numeric_limits<double>::epsilon();
}

inline Eigen::Index numeric_rank(const MatrixXd& M, double tol = -1.0) {
    if (M.size() == 0) return 0;
    Eigen::JacobiSVD<MatrixXd> svd(M);
    const VectorXd& sv = svd.singularValues();
    const double threshold = tol > 0.0 ? tol : rank_tolerance(M, sv(0));
    Eigen::Index r = 0;
    while (r < sv.size() && sv(r) > threshold) ++r;
    return r;
}

inline double min_singular_value(const MatrixXd& M) {
    if (M.size() == 0) return 0.0;
    Eigen::JacobiSVD<MatrixXd> svd(M);
    return svd.singularValues().minCoeff();
}

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

// Ground-truth plant x_{t+1} = A x_t + B u_t, y_t = C x_t. Used for
// simulation and oracle validation only; the learning path never sees it.
struct LtiSystem {
    MatrixXd A;  // n x n
    MatrixXd B;  // n x m
    MatrixXd C;  // p x n

    LtiSystem() = default;
    LtiSystem(MatrixXd A_, MatrixXd B_, MatrixXd C_)
        : A(std::move(A_)), B(std::move(B_)), C(std::move(C_)) {
        validate();
    }

    Eigen::Index n() const { return A.rows(); }
    Eigen::Index m() const { return B.cols(); }
    Eigen::Index p() const { return C.rows(); }

    void validate() const {
        if (A.rows() != A.cols()) throw ShapeError("LtiSystem: A must be square");
        if (B.rows() != A.rows()) throw ShapeError("LtiSystem: B row count must equal n");
        if (C.cols() != A.rows()) throw ShapeError("LtiSystem: C column count must equal n");
        if (C.rows() > A.rows()) throw ShapeError("LtiSystem: p must not exceed n");
        if (numeric_rank(C) != C.rows()) throw ShapeError("LtiSystem: C must have full row rank");
    }
};

// Output/input weights of the quadratic cost sum_t (y'Qy + u'Ru).
struct CostWeights {
    MatrixXd Q;  // p x p, symmetric PSD
    MatrixXd R;  // m x m, symmetric PD

    CostWeights() = default;
    CostWeights(MatrixXd Q_, MatrixXd R_) : Q(std::move(Q_)), R(std::move(R_)) { validate(); }

    // State-space weight C'QC.
    MatrixXd state_weight(const LtiSystem& sys) const { return sys.C.transpose() * Q * sys.C; }

    void validate() const {
        if (Q.rows() != Q.cols() || R.rows() != R.cols())
            throw ShapeError("CostWeights: Q and R must be square");
        if (!Q.isApprox(Q.transpose(), 1e-12)) throw ShapeError("CostWeights: Q must be symmetric");
        if (!R.isApprox(R.transpose(), 1e-12)) throw ShapeError("CostWeights: R must be symmetric");
        Eigen::SelfAdjointEigenSolver<MatrixXd> eq(Q), er(R);
        if (eq.eigenvalues().minCoeff() < -1e-12 * std::max(1.0, eq.eigenvalues().cwiseAbs().maxCoeff()))
            throw ShapeError("CostWeights: Q must be positive semi-definite");
        if (er.eigenvalues().minCoeff() <= 0.0)
            throw ShapeError("CostWeights: R must be positive definite");
    }
};

// Bounded uniform noise on [-w_max, w_max] per process-noise entry and
// [-e_max, e_max] per measurement-noise entry. Draw order inside simulate is
// documented there; a fixed seed reproduces the stream bit-for-bit.
struct NoiseSpec {
    double w_max = 0.0;
    double e_max = 0.0;
    std::uint64_t seed = 0;

    void validate() const {
        if (w_max < 0.0 || e_max < 0.0) throw ConfigError("NoiseSpec: bounds must be non-negative");
    }
};

// One experiment's input/output record. Column t of U (resp. Y) holds the
// sample at time t0 + t; t0 may be negative so a pre-window for the delayed
// parameterization can ride along in front of time zero. X, when present,
// has one extra column (the post-final state) and is simulation-only.
struct Trajectory {
    MatrixXd U;  // m x T
    MatrixXd Y;  // p x T
    std::optional<MatrixXd> X;  // n x (T+1), simulation only
    int t0 = 0;

    // Realized disturbances, recorded when simulate runs in noisy mode.
    std::optional<MatrixXd> W;  // n x T
    std::optional<MatrixXd> E;  // p x T

    Eigen::Index samples() const { return U.cols(); }

    void validate() const {
        if (Y.cols() != U.cols()) throw ShapeError("Trajectory: U and Y must have equal sample counts");
        if (X && X->cols() != U.cols() + 1)
            throw ShapeError("Trajectory: X must hold one more column than U");
    }
};

}  // namespace iolqr
