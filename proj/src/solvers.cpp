#include "iolqr/solvers.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <string>

namespace iolqr {

double spectral_radius(const MatrixXd& M) {
    if (M.size() == 0) return 0.0;
    return M.eigenvalues().cwiseAbs().maxCoeff();
}

double spectral_norm(const MatrixXd& M) {
    if (M.size() == 0) return 0.0;
    return Eigen::JacobiSVD<MatrixXd>(M).singularValues()(0);
}

MatrixXd pinv(const MatrixXd& M, double rank_tol) {
    if (M.size() == 0) return MatrixXd(M.cols(), M.rows());
    Eigen::JacobiSVD<MatrixXd> svd(M, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const VectorXd& sv = svd.singularValues();
    const double tol = rank_tol > 0.0 ? rank_tol : rank_tolerance(M, sv(0));
    VectorXd inv = VectorXd::Zero(sv.size());
    for (Eigen::Index i = 0; i < sv.size(); ++i)
        if (sv(i) > tol) inv(i) = 1.0 / sv(i);
    return svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
}

namespace {

MatrixXd stein_kron(const MatrixXd& M, const MatrixXd& G) {
    const Eigen::Index q = G.rows();
    const MatrixXd Mt = M.transpose();
    MatrixXd sys = MatrixXd::Identity(q * q, q * q);
    // I - M' (x) M'
    for (Eigen::Index i = 0; i < q; ++i)
        for (Eigen::Index j = 0; j < q; ++j)
            sys.block(i * q, j * q, q, q) -= Mt(i, j) * Mt;
    Eigen::VectorXd rhs(q * q);
    for (Eigen::Index j = 0; j < q; ++j) rhs.segment(j * q, q) = G.col(j);
    Eigen::PartialPivLU<MatrixXd> lu(sys);
    const VectorXd sol = lu.solve(rhs);
    const double relerr = (sys * sol - rhs).norm() / std::max(rhs.norm(), 1e-300);
    if (!sol.allFinite() || relerr > 1e-6)
        throw ConditioningError("solve_stein: Kronecker system is numerically singular");
    MatrixXd Theta(q, q);
    for (Eigen::Index j = 0; j < q; ++j) Theta.col(j) = sol.segment(j * q, q);
    return Theta;
}

MatrixXd stein_doubling(const MatrixXd& M, const MatrixXd& G, const SteinOptions& opts) {
    MatrixXd Theta = G;
    MatrixXd Pw = M;
    for (int k = 0; k < opts.max_iter; ++k) {
        const MatrixXd incr = Pw.transpose() * Theta * Pw;
        Theta += incr;
        if (incr.norm() <= opts.tol * std::max(1.0, Theta.norm())) return Theta;
        Pw = Pw * Pw;
    }
    throw NonConvergenceError("solve_stein: doubling iteration did not converge", {});
}

}  // namespace

MatrixXd solve_stein(const MatrixXd& M, const MatrixXd& G, const SteinOptions& opts) {
    if (M.rows() != M.cols()) throw ShapeError("solve_stein: M must be square");
    if (G.rows() != G.cols() || G.rows() != M.rows())
        throw ShapeError("solve_stein: G must be square and match M");
    if (!G.isApprox(G.transpose(), 1e-9)) throw ShapeError("solve_stein: G must be symmetric");
    const double rho = spectral_radius(M);
    if (rho >= 1.0)
        throw InstabilityError("solve_stein: spectral radius " + std::to_string(rho) +
                               " >= 1, no unique solution");
    const MatrixXd Gs = symmetrize(G);
    MatrixXd Theta = (M.rows() <= opts.kron_switch) ? stein_kron(M, Gs)
                                                    : stein_doubling(M, Gs, opts);
    return symmetrize(Theta);
}

MatrixXd solve_discrete_lyapunov(const MatrixXd& F, const MatrixXd& Qc,
                                 const SteinOptions& opts) {
    return solve_stein(F, Qc, opts);
}

DareSolution solve_dare(const MatrixXd& A, const MatrixXd& B, const MatrixXd& Qx,
                        const MatrixXd& R, const DareOptions& opts) {
    const Eigen::Index n = A.rows();
    if (A.cols() != n || B.rows() != n || Qx.rows() != n || Qx.cols() != n ||
        R.rows() != B.cols() || R.cols() != B.cols())
        throw ShapeError("solve_dare: inconsistent dimensions");

    DareSolution sol;
    MatrixXd P = symmetrize(Qx);
    std::vector<double> residuals;
    for (int it = 0; it < opts.max_iter; ++it) {
        const MatrixXd BtP = B.transpose() * P;
        Eigen::LDLT<MatrixXd> ldlt(symmetrize(R + BtP * B));
        if (ldlt.info() != Eigen::Success)
            throw ConditioningError("solve_dare: R + B'PB is not positive definite");
        const MatrixXd G = ldlt.solve(BtP * A);  // (R+B'PB)^{-1} B'PA
        MatrixXd Pn = symmetrize(Qx + A.transpose() * P * A - A.transpose() * BtP.transpose() * G);
        const double diff = spectral_norm(Pn - P);
        residuals.push_back(diff);
        P = std::move(Pn);
        if (diff < opts.tol) {
            sol.P = P;
            const MatrixXd BtPc = B.transpose() * P;
            sol.K = -Eigen::LDLT<MatrixXd>(symmetrize(R + BtPc * B)).solve(BtPc * A);
            sol.iterations = it + 1;
            sol.residual = diff;
            return sol;
        }
    }
    throw NonConvergenceError("solve_dare: fixed-point iteration exhausted max_iter",
                              std::move(residuals));
}

}  // namespace iolqr
