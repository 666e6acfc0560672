#pragma once

#include "iolqr/solvers.hpp"
#include "iolqr/state_param.hpp"
#include "iolqr/types.hpp"

#include <iosfwd>
#include <vector>

namespace iolqr {

// Q-function parameter over the stacked vector [v; u]:
//   Q(v, u) = [v; u]' [Theta_vv Theta_vu; Theta_vu' Theta_uu] [v; u].
struct QMatrix {
    MatrixXd Theta;      // (n_v + m) x (n_v + m), symmetric
    Eigen::Index n_v = 0;

    Eigen::Index m() const { return Theta.rows() - n_v; }
    MatrixXd vv() const { return Theta.topLeftCorner(n_v, n_v); }
    MatrixXd vu() const { return Theta.topRightCorner(n_v, m()); }
    MatrixXd uu() const { return Theta.bottomRightCorner(m(), m()); }
};

// V-function parameter: V(v) = v' P v.
struct ValueMatrix {
    MatrixXd P;  // n_v x n_v, symmetric
};

// Output-feedback gain u = K v. Stability is a checked property of the data,
// not a constructor invariant.
struct Gain {
    MatrixXd K;  // m x n_v
};

struct IterationRecord {
    int iteration = 0;
    MatrixXd Theta;
    MatrixXd P;          // VI only
    MatrixXd K;
    double residual = 0.0;       // ||K^{i+1}-K^i|| for PI, ||P^{i+1}-P^i|| for VI
    double equation_residual = 0.0;  // certificate: residual of the raw evaluation equation
    double closed_loop_radius = 0.0;  // rho([I; K] V1 Psi0^+), PI only
    double wall_time_ms = 0.0;
};

struct LearnResult {
    Gain K;
    QMatrix theta;
    ValueMatrix P;  // VI: final value matrix; PI: [I;K]' Theta [I;K]
    std::vector<IterationRecord> records;
    bool converged = false;
};

// Initial stabilizing gain by the dead-beat route: with g a kernel basis of
// V0 and K0_d placing the poles of (V1 V0^+, V1 g) at the origin,
// K0 = U0 (V0^+ + g K0_d). Pole placement runs on the rank-compressed input
// matrix through a randomized Sylvester assignment; the reconstructed closed
// loop V1 (V0^+ + g K0_d) is checked to have spectral radius < 1.
Gain deadbeat_initial_gain(const SubstituteData& data, std::uint64_t seed = 1);

// Policy evaluation: the unique symmetric Theta solving
//   Psi0' Theta Psi0 = Y0'QY0 + U0'RU0 + V1' [I;K]' Theta [I;K] V1.
// Pseudo-inverse reduction turns it into the Stein problem
// Theta = G + M' Theta M with M = [I;K] V1 Psi0^+; the raw equation residual
// is reported through `equation_residual` when non-null.
QMatrix pi_policy_evaluation(const SubstituteData& data, const CostWeights& cost,
                             const Gain& K, double* equation_residual = nullptr);

// Greedy gain K = -Theta_uu^{-1} Theta_vu'.
Gain policy_improvement(const QMatrix& theta);

// Q-value evaluation Theta = (Psi0')^+ (Y0'QY0 + U0'RU0 + V1'PV1) Psi0^+.
QMatrix vi_q_evaluation(const SubstituteData& data, const CostWeights& cost,
                        const ValueMatrix& P, double* equation_residual = nullptr);

// Schur complement P = Theta_vv - Theta_vu Theta_uu^{-1} Theta_vu'.
ValueMatrix vi_value_update(const QMatrix& theta);

struct RunOptions {
    double eps = 1e-8;   // stop when the step residual drops to eps; eps <= 0
                         // runs exactly max_iter iterations without erroring
    int max_iter = 100;
    bool record_matrices = true;
};

// Off-policy policy iteration from a stabilizing K0; stop rule
// ||K^{i+1} - K^i|| <= eps (spectral norm).
LearnResult run_pi(const SubstituteData& data, const CostWeights& cost, const Gain& K0,
                   const RunOptions& opts);

// Off-policy value iteration from symmetric positive definite P0; stop rule
// ||P^{i+1} - P^i|| <= eps, then one extra Q-evaluation feeds the final gain.
LearnResult run_vi(const SubstituteData& data, const CostWeights& cost, const ValueMatrix& P0,
                   const RunOptions& opts);

// The learned closed-loop cost from v0: v0' [I; K]' Theta [I; K] v0.
double evaluate_learned_cost(const Gain& K, const QMatrix& theta, const VectorXd& v0);

// --- record serialization ---------------------------------------------------

void write_records_csv(const std::vector<IterationRecord>& records, std::ostream& os);
std::string records_to_json(const std::vector<IterationRecord>& records, bool include_matrices);

}  // namespace iolqr
