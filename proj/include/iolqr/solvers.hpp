#pragma once

#include "iolqr/types.hpp"

namespace iolqr {

inline MatrixXd symmetrize(const MatrixXd& X) { return 0.5 * (X + X.transpose()); }

double spectral_radius(const MatrixXd& M);

// Largest singular value; the norm used by every stop rule in this project.
double spectral_norm(const MatrixXd& M);

// SVD-based Moore-Penrose pseudo-inverse with the module rank tolerance
// (override with rank_tol > 0).
MatrixXd pinv(const MatrixXd& M, double rank_tol = -1.0);

// Solves Theta = G + M' Theta M for symmetric G with rho(M) < 1.
// Small problems go through the Kronecker system
// (I - M'(x)M') vec(Theta) = vec(G); above `kron_switch` unknown rows the
// quadratically convergent doubling iteration takes over.
struct SteinOptions {
    double tol = 1e-12;
    int max_iter = 200;          // doubling steps; 2^k power reach
    Eigen::Index kron_switch = 30;
};

MatrixXd solve_stein(const MatrixXd& M, const MatrixXd& G, const SteinOptions& opts = {});

// Discrete Lyapunov equation P = F' P F + Qc (a Stein problem).
MatrixXd solve_discrete_lyapunov(const MatrixXd& F, const MatrixXd& Qc,
                                 const SteinOptions& opts = {});

struct DareSolution {
    MatrixXd P;      // fixed point, symmetric positive definite
    MatrixXd K;      // greedy gain -(B'PB+R)^{-1} B'PA
    int iterations = 0;
    double residual = 0.0;  // spectral norm of the final iterate difference
};

struct DareOptions {
    double tol = 1e-12;
    int max_iter = 100000;
};

// Fixed-point (value) iteration on
//   P <- Qx + A'PA - A'PB (R + B'PB)^{-1} B'PA
// starting from P = Qx; also the model-based VI reference. Stabilizability of
// (A,B) and observability of (A, Qx^{1/2}) surface as non-convergence.
DareSolution solve_dare(const MatrixXd& A, const MatrixXd& B, const MatrixXd& Qx,
                        const MatrixXd& R, const DareOptions& opts = {});

}  // namespace iolqr
