#include "iolqr/learn.hpp"

#include "iolqr/lti.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <random>
#include <sstream>

namespace iolqr {

namespace {

using clock_type = std::chrono::steady_clock;

double elapsed_ms(clock_type::time_point t0) {
    return std::chrono::duration<double, std::milli>(clock_type::now() - t0).count();
}

// Shared factorizations for one data set; every evaluation reuses them.
struct EvalWorkspace {
    MatrixXd psi_pinv;    // T x (n_v+m)
    MatrixXd psiT_pinv;   // (n_v+m) x T
    MatrixXd cost_core;   // (Psi0')^+ (Y0'QY0 + U0'RU0) Psi0^+
    MatrixXd quad_data;   // Y0'QY0 + U0'RU0
    MatrixXd v1_psi;      // V1 Psi0^+  (the data estimate of [A_v, B_v])

    EvalWorkspace(const SubstituteData& data, const CostWeights& cost) {
        psi_pinv = pinv(data.Psi0);
        psiT_pinv = psi_pinv.transpose();
        quad_data = data.Y0.transpose() * cost.Q * data.Y0 +
                    data.U0.transpose() * cost.R * data.U0;
        cost_core = symmetrize(psiT_pinv * quad_data * psi_pinv);
        v1_psi = data.V1 * psi_pinv;
    }
};

MatrixXd stack_identity_gain(const MatrixXd& K, Eigen::Index n_v) {
    MatrixXd IK(n_v + K.rows(), n_v);
    IK.topRows(n_v).setIdentity();
    IK.bottomRows(K.rows()) = K;
    return IK;
}

// Residual certificate of the raw evaluation equation
//   Psi0' Theta Psi0 = Y0'QY0 + U0'RU0 + V1' S V1
// relative to the scale of the left-hand side.
double raw_equation_residual(const SubstituteData& data, const EvalWorkspace& ws,
                             const MatrixXd& Theta, const MatrixXd& S) {
    const MatrixXd lhs = data.Psi0.transpose() * Theta * data.Psi0;
    const MatrixXd rhs = ws.quad_data + data.V1.transpose() * S * data.V1;
    return (lhs - rhs).norm() / std::max(1.0, lhs.norm());
}

// Theta_uu must be positive definite with a tame condition number before any
// inversion; it equals B'PB + R in exact arithmetic.
Eigen::LDLT<MatrixXd> factor_theta_uu(const MatrixXd& uu) {
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(uu);
    const double lmin = es.eigenvalues().minCoeff();
    const double lmax = es.eigenvalues().maxCoeff();
    if (lmin <= 0.0 || lmax / lmin > 1e12)
        throw ConditioningError("Theta_uu is singular or badly conditioned");
    return Eigen::LDLT<MatrixXd>(uu);
}

QMatrix pi_evaluate(const SubstituteData& data, const EvalWorkspace& ws, const MatrixXd& K,
                    double* equation_residual, double* closed_loop_radius) {
    const Eigen::Index n_v = data.n_v;
    const MatrixXd IK = stack_identity_gain(K, n_v);
    const MatrixXd M = IK * ws.v1_psi;
    if (closed_loop_radius) *closed_loop_radius = spectral_radius(M);
    QMatrix theta;
    theta.n_v = n_v;
    try {
        theta.Theta = solve_stein(M, ws.cost_core);
    } catch (const InstabilityError&) {
        throw InstabilityError(
            "pi_policy_evaluation: gain is not stabilizing on the data-space closed loop");
    }
    if (equation_residual)
        *equation_residual =
            raw_equation_residual(data, ws, theta.Theta, IK.transpose() * theta.Theta * IK);
    return theta;
}

QMatrix vi_evaluate(const SubstituteData& data, const EvalWorkspace& ws, const MatrixXd& P,
                    double* equation_residual) {
    QMatrix theta;
    theta.n_v = data.n_v;
    theta.Theta = ws.cost_core +
                  symmetrize(ws.psiT_pinv * (data.V1.transpose() * P * data.V1) * ws.psi_pinv);
    theta.Theta = symmetrize(theta.Theta);
    if (equation_residual)
        *equation_residual = raw_equation_residual(data, ws, theta.Theta, P);
    return theta;
}

}  // namespace

QMatrix pi_policy_evaluation(const SubstituteData& data, const CostWeights& cost,
                             const Gain& K, double* equation_residual) {
    if (K.K.cols() != data.n_v || K.K.rows() != data.U0.rows())
        throw ShapeError("pi_policy_evaluation: gain must be m x n_v");
    EvalWorkspace ws(data, cost);
    return pi_evaluate(data, ws, K.K, equation_residual, nullptr);
}

Gain policy_improvement(const QMatrix& theta) {
    auto ldlt = factor_theta_uu(theta.uu());
    return Gain{-ldlt.solve(theta.vu().transpose())};
}

QMatrix vi_q_evaluation(const SubstituteData& data, const CostWeights& cost,
                        const ValueMatrix& P, double* equation_residual) {
    if (P.P.rows() != data.n_v || P.P.cols() != data.n_v)
        throw ShapeError("vi_q_evaluation: P must be n_v x n_v");
    EvalWorkspace ws(data, cost);
    return vi_evaluate(data, ws, P.P, equation_residual);
}

ValueMatrix vi_value_update(const QMatrix& theta) {
    auto ldlt = factor_theta_uu(theta.uu());
    const MatrixXd vu = theta.vu();
    return ValueMatrix{symmetrize(theta.vv() - vu * ldlt.solve(vu.transpose()))};
}

LearnResult run_pi(const SubstituteData& data, const CostWeights& cost, const Gain& K0,
                   const RunOptions& opts) {
    if (K0.K.cols() != data.n_v || K0.K.rows() != data.U0.rows())
        throw ShapeError("run_pi: K0 must be m x n_v");
    EvalWorkspace ws(data, cost);

    LearnResult result;
    MatrixXd K = K0.K;
    std::vector<double> residuals;
    for (int i = 0; opts.eps > 0.0 || i < opts.max_iter; ++i) {
        if (opts.eps > 0.0 && i >= opts.max_iter)
            throw NonConvergenceError("run_pi: max_iter exceeded before the stop rule fired",
                                      std::move(residuals));
        const auto t_start = clock_type::now();
        IterationRecord rec;
        rec.iteration = i;
        QMatrix theta;
        try {
            theta = pi_evaluate(data, ws, K, &rec.equation_residual, &rec.closed_loop_radius);
        } catch (const InstabilityError& e) {
            throw InstabilityError("run_pi iteration " + std::to_string(i) + ": " + e.what());
        } catch (const ConditioningError& e) {
            throw ConditioningError("run_pi iteration " + std::to_string(i) + ": " + e.what());
        }
        const Gain improved = policy_improvement(theta);
        rec.residual = spectral_norm(improved.K - K);
        rec.wall_time_ms = elapsed_ms(t_start);
        if (opts.record_matrices) {
            rec.Theta = theta.Theta;
            rec.K = improved.K;
        }
        residuals.push_back(rec.residual);
        result.records.push_back(std::move(rec));

        K = improved.K;
        result.theta = theta;
        if (opts.eps > 0.0 && residuals.back() <= opts.eps) {
            result.converged = true;
            break;
        }
    }
    result.K = Gain{K};
    const MatrixXd IK = stack_identity_gain(K, data.n_v);
    result.P = ValueMatrix{symmetrize(IK.transpose() * result.theta.Theta * IK)};
    return result;
}

LearnResult run_vi(const SubstituteData& data, const CostWeights& cost, const ValueMatrix& P0,
                   const RunOptions& opts) {
    if (P0.P.rows() != data.n_v || P0.P.cols() != data.n_v)
        throw ShapeError("run_vi: P0 must be n_v x n_v");
    if (!P0.P.isApprox(P0.P.transpose(), 1e-10))
        throw ShapeError("run_vi: P0 must be symmetric");
    EvalWorkspace ws(data, cost);

    LearnResult result;
    MatrixXd P = P0.P;
    std::vector<double> residuals;
    for (int i = 0; opts.eps > 0.0 || i < opts.max_iter; ++i) {
        if (opts.eps > 0.0 && i >= opts.max_iter)
            throw NonConvergenceError("run_vi: max_iter exceeded before the stop rule fired",
                                      std::move(residuals));
        const auto t_start = clock_type::now();
        IterationRecord rec;
        rec.iteration = i;
        QMatrix theta = vi_evaluate(data, ws, P, &rec.equation_residual);
        ValueMatrix Pn;
        try {
            Pn = vi_value_update(theta);
        } catch (const ConditioningError& e) {
            throw ConditioningError("run_vi iteration " + std::to_string(i) + ": " + e.what());
        }
        rec.residual = spectral_norm(Pn.P - P);
        rec.wall_time_ms = elapsed_ms(t_start);
        if (opts.record_matrices) {
            rec.Theta = theta.Theta;
            rec.P = Pn.P;
            auto ldlt = factor_theta_uu(theta.uu());
            rec.K = -ldlt.solve(theta.vu().transpose());
        }
        residuals.push_back(rec.residual);
        result.records.push_back(std::move(rec));

        P = Pn.P;
        if (opts.eps > 0.0 && residuals.back() <= opts.eps) {
            result.converged = true;
            break;
        }
    }
    // Final gain extraction: one more Q-evaluation at the stopped P.
    result.theta = vi_evaluate(data, ws, P, nullptr);
    result.K = policy_improvement(result.theta);
    result.P = ValueMatrix{P};
    return result;
}

Gain deadbeat_initial_gain(const SubstituteData& data, std::uint64_t seed) {
    const Eigen::Index n_v = data.n_v, T = data.V0.cols();
    const MatrixXd V0p = pinv(data.V0);

    Eigen::JacobiSVD<MatrixXd> svd(data.V0, Eigen::ComputeFullV);
    const Eigen::Index kernel_dim = T - n_v;
    const MatrixXd g = svd.matrixV().rightCols(kernel_dim);  // basis of ker(V0)

    const MatrixXd Ad = data.V1 * V0p;
    MatrixXd Bd = kernel_dim > 0 ? MatrixXd(data.V1 * g) : MatrixXd(n_v, 0);

    auto finish = [&](const MatrixXd& Kd) -> Gain {
        const MatrixXd G = V0p + (kernel_dim > 0 ? MatrixXd(g * Kd) : MatrixXd::Zero(T, n_v));
        const double rho = spectral_radius(data.V1 * G);
        if (rho >= 1.0)
            throw InitializationError(
                "deadbeat_initial_gain: reconstructed closed loop has spectral radius " +
                std::to_string(rho));
        return Gain{data.U0 * G};
    };

    if (kernel_dim == 0 || Bd.norm() < 1e-14 * std::max(1.0, Ad.norm()))
        return finish(MatrixXd::Zero(std::max<Eigen::Index>(kernel_dim, 0), n_v));

    // Compress the kernel directions: V1 g = B_v (U0 g), so Bd has rank at
    // most m. Placement runs on the compressed pair and lifts back through
    // the right singular vectors.
    Eigen::JacobiSVD<MatrixXd> bsvd(Bd, Eigen::ComputeThinU | Eigen::ComputeThinV);
    Eigen::Index r = 0;
    while (r < bsvd.singularValues().size() &&
           bsvd.singularValues()(r) > 1e-12 * bsvd.singularValues()(0))
        ++r;
    const MatrixXd Bc = bsvd.matrixU().leftCols(r) *
                        bsvd.singularValues().head(r).asDiagonal();

    // Randomized Sylvester pole assignment against a nilpotent companion
    // target (poles at the origin). Ill-conditioned single-input pairs cannot
    // hold the poles exactly at zero, so the target circle widens until the
    // reconstructed closed loop is at least Schur stable.
    std::mt19937_64 gen(seed);
    MatrixXd bestK;
    double best_rho = std::numeric_limits<double>::infinity();
    for (double delta : {0.0, 1e-6, 1e-3, 1e-1, 0.3}) {
        MatrixXd Gamma = MatrixXd::Zero(n_v, n_v);
        if (n_v > 1) Gamma.topRightCorner(n_v - 1, n_v - 1).setIdentity();
        Gamma(n_v - 1, 0) = -std::pow(delta, static_cast<double>(n_v));  // z^{n_v} + delta^{n_v}

        // I (x) Ad - Gamma' (x) I
        MatrixXd sylv = MatrixXd::Zero(n_v * n_v, n_v * n_v);
        for (Eigen::Index i = 0; i < n_v; ++i) sylv.block(i * n_v, i * n_v, n_v, n_v) = Ad;
        for (Eigen::Index bi = 0; bi < n_v; ++bi)
            for (Eigen::Index bj = 0; bj < n_v; ++bj)
                if (Gamma(bj, bi) != 0.0)
                    sylv.block(bi * n_v, bj * n_v, n_v, n_v) -=
                        Gamma(bj, bi) * MatrixXd::Identity(n_v, n_v);

        Eigen::PartialPivLU<MatrixXd> lu(sylv);
        for (int attempt = 0; attempt < 25; ++attempt) {
            MatrixXd Gm(r, n_v);
            for (Eigen::Index i = 0; i < r; ++i)
                for (Eigen::Index j = 0; j < n_v; ++j) Gm(i, j) = 2.0 * uniform01(gen) - 1.0;
            const MatrixXd rhs = Bc * Gm;
            VectorXd vec_rhs(n_v * n_v);
            for (Eigen::Index c = 0; c < n_v; ++c) vec_rhs.segment(c * n_v, n_v) = rhs.col(c);
            const VectorXd sol = lu.solve(vec_rhs);
            if (!sol.allFinite()) continue;
            MatrixXd X(n_v, n_v);
            for (Eigen::Index c = 0; c < n_v; ++c) X.col(c) = sol.segment(c * n_v, n_v);
            Eigen::JacobiSVD<MatrixXd> xsvd(X, Eigen::ComputeThinU | Eigen::ComputeThinV);
            const VectorXd& sv = xsvd.singularValues();
            if (sv(n_v - 1) <= 1e-14 * sv(0)) continue;
            const MatrixXd Kc = -Gm * xsvd.solve(MatrixXd::Identity(n_v, n_v));
            const MatrixXd Kd = bsvd.matrixV().leftCols(r) * Kc;
            const double rho = spectral_radius(Ad + Bd * Kd);
            if (rho < best_rho) {
                best_rho = rho;
                bestK = Kd;
            }
            if (best_rho <= std::max(1e-6, 1.5 * delta)) break;
        }
        if (best_rho <= std::max(1e-6, 1.5 * delta)) break;
    }
    if (bestK.size() == 0 || best_rho >= 1.0) {
        // The compressed pair can be numerically uncontrollable even though
        // the consistent system is controllable in exact arithmetic; a
        // data-space LQR gain still stabilizes in that regime.
        try {
            const DareSolution fallback =
                solve_dare(Ad, Bc, MatrixXd::Identity(n_v, n_v), MatrixXd::Identity(r, r));
            const MatrixXd Kd = bsvd.matrixV().leftCols(r) * fallback.K;
            if (spectral_radius(Ad + Bd * Kd) < 1.0) return finish(Kd);
        } catch (const std::exception&) {
        }
        throw InitializationError("deadbeat_initial_gain: pole placement infeasible on the data");
    }
    return finish(bestK);
}

double evaluate_learned_cost(const Gain& K, const QMatrix& theta, const VectorXd& v0) {
    if (v0.size() != theta.n_v) throw ShapeError("evaluate_learned_cost: v0 must have n_v entries");
    const MatrixXd IK = stack_identity_gain(K.K, theta.n_v);
    const VectorXd w = IK * v0;
    return w.dot(theta.Theta * w);
}

// --- serialization -----------------------------------------------------------

void write_records_csv(const std::vector<IterationRecord>& records, std::ostream& os) {
    char buf[32];
    os << "iteration,residual,wall_time_ms\n";
    for (const auto& r : records) {
        std::snprintf(buf, sizeof(buf), "%.17g", r.residual);
        os << r.iteration << "," << buf << ",";
        std::snprintf(buf, sizeof(buf), "%.6g", r.wall_time_ms);
        os << buf << "\n";
    }
}

namespace {
nlohmann::json dense_json(const MatrixXd& M) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < M.rows(); ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index j = 0; j < M.cols(); ++j) row.push_back(M(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}
}  // namespace

std::string records_to_json(const std::vector<IterationRecord>& records, bool include_matrices) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& r : records) {
        nlohmann::json j;
        j["iteration"] = r.iteration;
        j["residual"] = r.residual;
        j["equation_residual"] = r.equation_residual;
        j["closed_loop_radius"] = r.closed_loop_radius;
        j["wall_time_ms"] = r.wall_time_ms;
        if (include_matrices) {
            if (r.Theta.size()) j["Theta"] = dense_json(r.Theta);
            if (r.P.size()) j["P"] = dense_json(r.P);
            if (r.K.size()) j["K"] = dense_json(r.K);
        }
        arr.push_back(std::move(j));
    }
    return arr.dump();
}

}  // namespace iolqr
