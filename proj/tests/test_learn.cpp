#include "iolqr/learn.hpp"

#include "iolqr/experiment.hpp"
#include "iolqr/lti.hpp"
#include "iolqr/solvers.hpp"
#include "support/oracles.hpp"

#include <doctest.h>

#include <random>

using namespace iolqr;

namespace {

struct Pipeline {
    LtiSystem sys;
    CostWeights cost;
    SubstituteData data;
    VectorXd x_time_zero;
    ParamConfig param;
};

Pipeline filtered_pipeline(std::uint64_t plant_seed, Eigen::Index n, Eigen::Index m,
                           Eigen::Index p, const std::vector<double>& roots, Eigen::Index T,
                           std::uint64_t input_seed) {
    Pipeline pl{random_plant({.n = n, .m = m, .p = p, .seed = plant_seed, .spectral_radius = 0.85}),
                CostWeights(MatrixXd::Identity(p, p), MatrixXd::Identity(m, m)),
                {},
                {},
                {}};
    std::mt19937_64 gen(plant_seed ^ 0x9e3779b97f4a7c15ull);
    VectorXd x0(n), eta0(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        x0(i) = uniform_in(gen, -0.5, 0.5);
        eta0(i) = uniform_in(gen, -0.5, 0.5);
    }
    pl.param = ParamConfig::filtered(n, roots, eta0);
    const MatrixXd U = generate_pe_input(m, T, 100, input_seed);
    const Trajectory traj = simulate(pl.sys, x0, U);
    pl.data = project(build_filtered(traj, pl.param), U, traj.Y, pl.param);
    pl.x_time_zero = x0;
    return pl;
}

SubstituteData synthetic_data(Eigen::Index n_v, Eigen::Index m, Eigen::Index T,
                              std::uint64_t seed, bool zero_shift) {
    std::mt19937_64 gen(seed);
    SubstituteData d;
    d.n_v = n_v;
    d.n_zeta = n_v;
    d.V0.resize(n_v, T);
    d.U0.resize(m, T);
    d.Y0.resize(1, T);
    for (Eigen::Index i = 0; i < n_v; ++i)
        for (Eigen::Index j = 0; j < T; ++j) d.V0(i, j) = uniform_in(gen, -1, 1);
    for (Eigen::Index i = 0; i < m; ++i)
        for (Eigen::Index j = 0; j < T; ++j) d.U0(i, j) = uniform_in(gen, -1, 1);
    for (Eigen::Index j = 0; j < T; ++j) d.Y0(0, j) = uniform_in(gen, -1, 1);
    d.V1 = zero_shift ? MatrixXd::Zero(n_v, T) : MatrixXd(0.5 * d.V0);
    d.Z0 = d.V0;
    d.Z1 = d.V1;
    d.Psi0.resize(n_v + m, T);
    d.Psi0 << d.V0, d.U0;
    d.Pproj = MatrixXd::Identity(n_v, n_v);
    return d;
}

}  // namespace

TEST_CASE("pi_policy_evaluation: V1 = 0 degenerates to the data quadratic") {
    const SubstituteData d = synthetic_data(3, 1, 20, 1, true);
    const CostWeights cost(MatrixXd::Identity(1, 1), MatrixXd::Identity(1, 1));
    double resid = -1.0;
    const QMatrix theta =
        pi_policy_evaluation(d, cost, Gain{MatrixXd::Zero(1, 3)}, &resid);
    const MatrixXd psi_p = pinv(d.Psi0);
    const MatrixXd expect = psi_p.transpose() *
                            (d.Y0.transpose() * d.Y0 + d.U0.transpose() * d.U0) * psi_p;
    CHECK(spectral_norm(theta.Theta - expect) < 1e-10 * std::max(1.0, spectral_norm(expect)));
    CHECK(resid >= 0.0);  // certificate is reported (nonzero here: synthetic data
                          // is not a consistent-system trajectory)
}

TEST_CASE("pi_policy_evaluation: matches the model-based Lyapunov oracle") {
    const Pipeline pl = filtered_pipeline(51, 3, 1, 1, {-0.3, 0.2, 0.6}, 50, 7);
    const Gain K0{MatrixXd::Zero(1, pl.data.n_v)};
    double resid = -1.0;
    const QMatrix theta = pi_policy_evaluation(pl.data, pl.cost, K0, &resid);
    CHECK(resid < 1e-8);  // consistent data satisfies the raw evaluation equation

    // Model side: Theta_Kx solves Theta = diag(Qx, R) + K_AB' Theta K_AB with
    // K_AB = [I; Kx][A, B], and Theta = Fbar' Theta_Kx Fbar with F = S Pproj.
    const MatrixXd L = -test::place_poles(pl.sys.A.transpose(), pl.sys.C.transpose(),
                                          {-0.3, 0.2, 0.6})
                            .transpose();
    const MatrixXd S = test::filter_param_matrix(pl.sys, L, pl.param, pl.x_time_zero);
    const MatrixXd F = S * pl.data.Pproj;
    const MatrixXd Kx = K0.K * pinv(F);
    MatrixXd AB(3, 4);
    AB << pl.sys.A, pl.sys.B;
    MatrixXd IKx(4, 3);
    IKx << MatrixXd::Identity(3, 3), Kx;
    const MatrixXd K_AB = IKx * AB;
    MatrixXd G = MatrixXd::Zero(4, 4);
    G.topLeftCorner(3, 3) = pl.cost.state_weight(pl.sys);
    G.bottomRightCorner(1, 1) = pl.cost.R;
    const MatrixXd theta_kx = solve_stein(K_AB, G);
    MatrixXd Fbar = MatrixXd::Zero(4, pl.data.n_v + 1);
    Fbar.topLeftCorner(3, pl.data.n_v) = F;
    Fbar(3, pl.data.n_v) = 1.0;
    const MatrixXd mapped = Fbar.transpose() * theta_kx * Fbar;
    CHECK(spectral_norm(theta.Theta - mapped) < 1e-8 * std::max(1.0, spectral_norm(mapped)));
}

TEST_CASE("policy_improvement: trivial block algebra") {
    QMatrix theta;
    theta.n_v = 3;
    theta.Theta = MatrixXd::Identity(5, 5);
    CHECK(policy_improvement(theta).K == MatrixXd::Zero(2, 3));

    QMatrix rank1;
    rank1.n_v = 3;
    rank1.Theta = MatrixXd::Identity(5, 5);
    rank1.Theta(0, 4) = 2.5;  // Theta_vu = 2.5 e_1 e_2'
    rank1.Theta(4, 0) = 2.5;
    const Gain K = policy_improvement(rank1);
    CHECK(K.K(1, 0) == doctest::Approx(-2.5));
    CHECK(std::abs(K.K(0, 0)) < 1e-14);
}

TEST_CASE("policy_improvement: singular Theta_uu is rejected") {
    QMatrix theta;
    theta.n_v = 2;
    theta.Theta = MatrixXd::Identity(3, 3);
    theta.Theta(2, 2) = 0.0;
    CHECK_THROWS_AS(policy_improvement(theta), ConditioningError);
}

TEST_CASE("run_pi: converges to the oracle cost and restarts at the fixed point") {
    const Pipeline pl = filtered_pipeline(52, 3, 1, 1, {-0.4, 0.1, 0.5}, 60, 12);
    RunOptions opts;
    opts.eps = 1e-11;
    opts.max_iter = 40;
    const LearnResult res =
        run_pi(pl.data, pl.cost, Gain{MatrixXd::Zero(1, pl.data.n_v)}, opts);
    REQUIRE(res.converged);

    const MatrixXd Qx = pl.cost.state_weight(pl.sys);
    const DareSolution oracle = solve_dare(pl.sys.A, pl.sys.B, Qx, pl.cost.R);
    const double learned = evaluate_learned_cost(res.K, res.theta, pl.data.V0.col(0));
    const double expect = pl.x_time_zero.dot(oracle.P * pl.x_time_zero);
    CHECK(std::abs(learned - expect) / expect < 1e-6);

    // fixed-point start terminates immediately
    const LearnResult again = run_pi(pl.data, pl.cost, res.K, opts);
    CHECK(again.converged);
    CHECK(again.records.size() == 1);

    // Iterate properties: monotone Theta and stable closed loops.
    for (std::size_t i = 1; i < res.records.size(); ++i) {
        const MatrixXd diff =
            symmetrize(res.records[i - 1].Theta - res.records[i].Theta);
        Eigen::SelfAdjointEigenSolver<MatrixXd> es(diff);
        CHECK(es.eigenvalues().minCoeff() >= -1e-8);
    }
    for (const auto& rec : res.records) CHECK(rec.closed_loop_radius < 1.0);
}

TEST_CASE("run_pi: unstable initial gain raises an annotated instability error") {
    const Pipeline pl = filtered_pipeline(53, 2, 1, 1, {0.3, -0.2}, 40, 5);
    RunOptions opts;
    opts.eps = 1e-8;
    opts.max_iter = 10;
    const MatrixXd bad = 50.0 * MatrixXd::Ones(1, pl.data.n_v);
    CHECK_THROWS_AS(run_pi(pl.data, pl.cost, Gain{bad}, opts), InstabilityError);
}

TEST_CASE("vi_q_evaluation: P = 0 degenerates to the data quadratic") {
    const SubstituteData d = synthetic_data(3, 2, 25, 2, false);
    const CostWeights cost(MatrixXd::Identity(1, 1), MatrixXd::Identity(2, 2));
    const QMatrix theta = vi_q_evaluation(d, cost, ValueMatrix{MatrixXd::Zero(3, 3)});
    const MatrixXd psi_p = pinv(d.Psi0);
    const MatrixXd expect = psi_p.transpose() *
                            (d.Y0.transpose() * d.Y0 + d.U0.transpose() * d.U0) * psi_p;
    CHECK(spectral_norm(theta.Theta - expect) < 1e-10 * std::max(1.0, spectral_norm(expect)));
}

TEST_CASE("vi_q_evaluation: matches the model-based assembly") {
    const Pipeline pl = filtered_pipeline(58, 3, 1, 1, {-0.2, 0.3, 0.5}, 55, 14);
    // Model side: with P = F' Px F, the Q-evaluation must return
    // Fbar' (diag(Qx, R) + [A, B]' Px [A, B]) Fbar.
    const MatrixXd L = -test::place_poles(pl.sys.A.transpose(), pl.sys.C.transpose(),
                                          {-0.2, 0.3, 0.5})
                            .transpose();
    const MatrixXd S = test::filter_param_matrix(pl.sys, L, pl.param, pl.x_time_zero);
    const MatrixXd F = S * pl.data.Pproj;
    const MatrixXd Px = solve_dare(pl.sys.A, pl.sys.B, pl.cost.state_weight(pl.sys), pl.cost.R).P;
    const QMatrix theta =
        vi_q_evaluation(pl.data, pl.cost, ValueMatrix{symmetrize(F.transpose() * Px * F)});

    MatrixXd AB(3, 4);
    AB << pl.sys.A, pl.sys.B;
    MatrixXd core = MatrixXd::Zero(4, 4);
    core.topLeftCorner(3, 3) = pl.cost.state_weight(pl.sys);
    core.bottomRightCorner(1, 1) = pl.cost.R;
    core += AB.transpose() * Px * AB;
    MatrixXd Fbar = MatrixXd::Zero(4, pl.data.n_v + 1);
    Fbar.topLeftCorner(3, pl.data.n_v) = F;
    Fbar(3, pl.data.n_v) = 1.0;
    const MatrixXd expect = Fbar.transpose() * core * Fbar;
    CHECK(spectral_norm(theta.Theta - expect) < 1e-8 * std::max(1.0, spectral_norm(expect)));
}

TEST_CASE("PI and VI agree with each other on the same data") {
    const Pipeline pl = filtered_pipeline(59, 3, 2, 2, {-0.35, 0.1, 0.5}, 70, 22);
    RunOptions opts;
    opts.eps = 1e-11;
    opts.max_iter = 60;
    const LearnResult pi = run_pi(pl.data, pl.cost, Gain{MatrixXd::Zero(2, pl.data.n_v)}, opts);
    RunOptions vi_opts;
    vi_opts.eps = 1e-12;
    vi_opts.max_iter = 8000;
    const LearnResult vi = run_vi(
        pl.data, pl.cost, ValueMatrix{MatrixXd::Identity(pl.data.n_v, pl.data.n_v)}, vi_opts);
    REQUIRE(pi.converged);
    REQUIRE(vi.converged);
    const double cost_pi = evaluate_learned_cost(pi.K, pi.theta, pl.data.V0.col(0));
    const double cost_vi = evaluate_learned_cost(vi.K, vi.theta, pl.data.V0.col(0));
    CHECK(std::abs(cost_pi - cost_vi) / std::abs(cost_pi) < 1e-6);
}

TEST_CASE("vi_value_update: Schur complement identities") {
    QMatrix block_diag;
    block_diag.n_v = 2;
    block_diag.Theta = MatrixXd::Identity(3, 3);
    block_diag.Theta(0, 0) = 4.0;
    CHECK((vi_value_update(block_diag).P - block_diag.Theta.topLeftCorner(2, 2))
              .cwiseAbs()
              .maxCoeff() < 1e-14);

    QMatrix scalar;
    scalar.n_v = 1;
    scalar.Theta.resize(2, 2);
    scalar.Theta << 2.0, 1.0, 1.0, 1.0;
    CHECK(vi_value_update(scalar).P(0, 0) == doctest::Approx(1.0));
}

TEST_CASE("run_vi: one evaluation at the oracle fixed point self-reproduces") {
    const Pipeline pl = filtered_pipeline(54, 2, 1, 1, {0.25, -0.35}, 45, 9);
    RunOptions tight;
    tight.eps = 1e-13;
    tight.max_iter = 4000;
    const LearnResult converged =
        run_vi(pl.data, pl.cost, ValueMatrix{MatrixXd::Identity(pl.data.n_v, pl.data.n_v)}, tight);
    REQUIRE(converged.converged);

    // a sweep from the fixed point stays there
    const QMatrix theta = vi_q_evaluation(pl.data, pl.cost, converged.P);
    const ValueMatrix updated = vi_value_update(theta);
    CHECK(spectral_norm(updated.P - converged.P.P) < 1e-8 * std::max(1.0, spectral_norm(updated.P)));

    RunOptions opts;
    opts.eps = 1e-9;
    opts.max_iter = 5;
    const LearnResult restart = run_vi(pl.data, pl.cost, converged.P, opts);
    CHECK(restart.converged);
    CHECK(restart.records.size() <= 2);

    // matches the DARE oracle at convergence
    const DareSolution oracle =
        solve_dare(pl.sys.A, pl.sys.B, pl.cost.state_weight(pl.sys), pl.cost.R);
    const double learned = evaluate_learned_cost(converged.K, converged.theta, pl.data.V0.col(0));
    const double expect = pl.x_time_zero.dot(oracle.P * pl.x_time_zero);
    CHECK(std::abs(learned - expect) / expect < 1e-6);
}

TEST_CASE("run_vi: exhausting max_iter with a positive eps raises") {
    const Pipeline pl = filtered_pipeline(55, 2, 1, 1, {0.2, 0.4}, 40, 3);
    RunOptions opts;
    opts.eps = 1e-14;
    opts.max_iter = 2;
    try {
        run_vi(pl.data, pl.cost,
               ValueMatrix{1e3 * MatrixXd::Identity(pl.data.n_v, pl.data.n_v)}, opts);
        FAIL("expected NonConvergenceError");
    } catch (const NonConvergenceError& e) {
        CHECK(e.residuals.size() == 2);
    }
}

TEST_CASE("run_vi: eps <= 0 runs a fixed budget without erroring") {
    const Pipeline pl = filtered_pipeline(55, 2, 1, 1, {0.2, 0.4}, 40, 3);
    RunOptions opts;
    opts.eps = 0.0;
    opts.max_iter = 7;
    const LearnResult res = run_vi(
        pl.data, pl.cost, ValueMatrix{MatrixXd::Identity(pl.data.n_v, pl.data.n_v)}, opts);
    CHECK_FALSE(res.converged);
    CHECK(res.records.size() == 7);
}

TEST_CASE("evaluate_learned_cost: zero start costs nothing") {
    QMatrix theta;
    theta.n_v = 2;
    theta.Theta = MatrixXd::Identity(3, 3);
    CHECK(evaluate_learned_cost(Gain{MatrixXd::Zero(1, 2)}, theta, VectorXd::Zero(2)) == 0.0);
}

TEST_CASE("deadbeat_initial_gain: square V0 with V1 = 0 gives the exact dead-beat gain") {
    SubstituteData d;
    d.n_v = 2;
    d.n_zeta = 2;
    d.V0 = MatrixXd::Identity(2, 2);
    d.V1 = MatrixXd::Zero(2, 2);
    d.U0 = (MatrixXd(1, 2) << 0.3, -0.7).finished();
    d.Y0 = MatrixXd::Zero(1, 2);
    d.Psi0.resize(3, 2);
    d.Psi0 << d.V0, d.U0;
    d.Pproj = MatrixXd::Identity(2, 2);
    const Gain K0 = deadbeat_initial_gain(d);
    CHECK((K0.K - d.U0).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("deadbeat_initial_gain: stabilizes the data-space closed loop") {
    const Pipeline pl = filtered_pipeline(56, 3, 1, 1, {-0.25, 0.15, 0.45}, 60, 20);
    const Gain K0 = deadbeat_initial_gain(pl.data);
    const MatrixXd AB = pl.data.V1 * pinv(pl.data.Psi0);
    MatrixXd IK(pl.data.n_v + 1, pl.data.n_v);
    IK << MatrixXd::Identity(pl.data.n_v, pl.data.n_v), K0.K;
    CHECK(spectral_radius(AB * IK) < 1.0);

    // and it is a usable PI initializer
    RunOptions opts;
    opts.eps = 1e-10;
    opts.max_iter = 40;
    const LearnResult res = run_pi(pl.data, pl.cost, K0, opts);
    CHECK(res.converged);
}

TEST_CASE("records: CSV and JSON serialization") {
    const Pipeline pl = filtered_pipeline(57, 2, 1, 1, {0.1, -0.3}, 40, 2);
    RunOptions opts;
    opts.eps = 1e-10;
    opts.max_iter = 30;
    const LearnResult res =
        run_pi(pl.data, pl.cost, Gain{MatrixXd::Zero(1, pl.data.n_v)}, opts);
    std::stringstream ss;
    write_records_csv(res.records, ss);
    const std::string csv = ss.str();
    CHECK(csv.find("iteration,residual,wall_time_ms") == 0);
    const std::string js = records_to_json(res.records, true);
    CHECK(js.find("\"Theta\"") != std::string::npos);
    const std::string js_lean = records_to_json(res.records, false);
    CHECK(js_lean.find("\"Theta\"") == std::string::npos);
}
