#include "iolqr/experiment.hpp"

#include "iolqr/solvers.hpp"

#include <nlohmann/json.hpp>

#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

namespace iolqr {

namespace {

using nlohmann::json;
using clock_type = std::chrono::steady_clock;

json matrix_json(const MatrixXd& M) {
    json rows = json::array();
    for (Eigen::Index i = 0; i < M.rows(); ++i) {
        json row = json::array();
        for (Eigen::Index j = 0; j < M.cols(); ++j) row.push_back(M(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}

MatrixXd matrix_from(const json& j) {
    const auto rows = j.size();
    if (rows == 0) return MatrixXd(0, 0);
    if (!j.at(0).is_array()) {  // accept a flat vector as a single row
        MatrixXd M(1, rows);
        for (std::size_t k = 0; k < rows; ++k) M(0, k) = j.at(k).get<double>();
        return M;
    }
    const auto cols = j.at(0).size();
    MatrixXd M(rows, cols);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t k = 0; k < cols; ++k) M(i, k) = j.at(i).at(k).get<double>();
    return M;
}

VectorXd vector_from(const json& j) {
    VectorXd v(j.size());
    for (std::size_t i = 0; i < j.size(); ++i) v(i) = j.at(i).get<double>();
    return v;
}

json vector_json(const VectorXd& v) {
    json out = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
    return out;
}

VectorXd seeded_uniform_vector(Eigen::Index n, std::uint64_t seed, double lo, double hi) {
    std::mt19937_64 gen(seed);
    VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = uniform_in(gen, lo, hi);
    return v;
}

// Rethrows known error types with a pipeline-stage tag so CLI exit codes can
// distinguish validation from numerical failures.
template <typename Fn>
auto stage(const std::string& tag, Fn&& fn) -> decltype(fn()) {
    try {
        return fn();
    } catch (const ConfigError& e) {
        throw ConfigError(tag + ": " + e.what());
    } catch (const ShapeError& e) {
        throw ShapeError(tag + ": " + e.what());
    } catch (const InstabilityError& e) {
        throw InstabilityError(tag + ": " + e.what());
    } catch (const ConditioningError& e) {
        throw ConditioningError(tag + ": " + e.what());
    } catch (const InitializationError& e) {
        throw InitializationError(tag + ": " + e.what());
    } catch (const NonConvergenceError& e) {
        throw NonConvergenceError(tag + ": " + e.what(), e.residuals);
    } catch (const DataError& e) {
        throw DataError(tag + ": " + e.what());
    }
}

}  // namespace

// --- config serialization -----------------------------------------------------

ExperimentConfig config_from_json(const std::string& text) {
    const json j = json::parse(text);
    ExperimentConfig cfg;
    if (j.contains("plant")) {
        const auto& pl = j.at("plant");
        if (pl.contains("benchmark")) cfg.plant.benchmark = pl.at("benchmark").get<std::string>();
        if (pl.contains("A"))
            cfg.plant.explicit_plant =
                LtiSystem(matrix_from(pl.at("A")), matrix_from(pl.at("B")), matrix_from(pl.at("C")));
        if (pl.contains("random")) {
            const auto& r = pl.at("random");
            RandomPlantRecipe recipe;
            recipe.n = r.at("n").get<Eigen::Index>();
            recipe.m = r.at("m").get<Eigen::Index>();
            recipe.p = r.at("p").get<Eigen::Index>();
            recipe.seed = r.value("seed", 1ull);
            recipe.spectral_radius = r.value("spectral_radius", 0.8);
            cfg.plant.random = recipe;
        }
    }
    if (j.contains("cost"))
        cfg.cost = CostWeights(matrix_from(j.at("cost").at("Q")), matrix_from(j.at("cost").at("R")));
    if (j.contains("input")) {
        const auto& in = j.at("input");
        cfg.input.num_terms = in.value("num_terms", 100);
        cfg.input.T = in.value("T", Eigen::Index{0});
        cfg.input.seed = in.value("seed", 0ull);
    }
    if (j.contains("param")) {
        const auto& pa = j.at("param");
        const std::string mode = pa.value("mode", "filtered");
        if (mode == "delayed")
            cfg.mode = ParamMode::Delayed;
        else if (mode == "filtered")
            cfg.mode = ParamMode::Filtered;
        else
            throw ConfigError("config: param.mode must be 'delayed' or 'filtered'");
        cfg.window = pa.value("N", Eigen::Index{0});
        if (pa.contains("lambda_roots"))
            cfg.lambda_roots = pa.at("lambda_roots").get<std::vector<double>>();
        if (pa.contains("eta0")) cfg.eta0 = vector_from(pa.at("eta0"));
        cfg.eta0_seed = pa.value("eta0_seed", 17ull);
    }
    if (j.contains("x0")) cfg.x0 = vector_from(j.at("x0"));
    cfg.x0_seed = j.value("x0_seed", 13ull);
    if (j.contains("algorithm")) {
        const std::string alg = j.at("algorithm").get<std::string>();
        if (alg == "pi")
            cfg.algorithm = Algorithm::Pi;
        else if (alg == "vi")
            cfg.algorithm = Algorithm::Vi;
        else if (alg == "both")
            cfg.algorithm = Algorithm::Both;
        else
            throw ConfigError("config: algorithm must be pi, vi, or both");
    }
    cfg.eps = j.value("eps", -1.0);
    cfg.max_iter = j.value("max_iter", 2000);
    cfg.p0_scale = j.value("p0_scale", -1.0);
    if (j.contains("k0")) {
        const auto& k0 = j.at("k0");
        const std::string kind = k0.value("type", "zero");
        if (kind == "zero")
            cfg.k0 = InitialGainKind::Zero;
        else if (kind == "deadbeat")
            cfg.k0 = InitialGainKind::Deadbeat;
        else if (kind == "explicit") {
            cfg.k0 = InitialGainKind::Explicit;
            cfg.k0_explicit = matrix_from(k0.at("K"));
        } else
            throw ConfigError("config: k0.type must be zero, deadbeat, or explicit");
    }
    if (j.contains("noise")) {
        NoiseSpec ns;
        ns.w_max = j.at("noise").value("w_max", 0.0);
        ns.e_max = j.at("noise").value("e_max", ns.w_max);
        ns.seed = j.at("noise").value("seed", 100ull);
        cfg.noise = ns;
    }
    cfg.denoise = j.value("denoise", false);
    cfg.closed_loop_steps = j.value("closed_loop_steps", Eigen::Index{100});
    cfg.out_dir = j.value("out", std::string{});
    cfg.record_matrices_json = j.value("record_matrices_json", false);
    return cfg;
}

std::string config_to_json(const ExperimentConfig& cfg) {
    json j;
    if (!cfg.plant.benchmark.empty()) j["plant"]["benchmark"] = cfg.plant.benchmark;
    if (cfg.plant.explicit_plant) {
        j["plant"]["A"] = matrix_json(cfg.plant.explicit_plant->A);
        j["plant"]["B"] = matrix_json(cfg.plant.explicit_plant->B);
        j["plant"]["C"] = matrix_json(cfg.plant.explicit_plant->C);
    }
    if (cfg.plant.random) {
        j["plant"]["random"] = {{"n", cfg.plant.random->n},
                                {"m", cfg.plant.random->m},
                                {"p", cfg.plant.random->p},
                                {"seed", cfg.plant.random->seed},
                                {"spectral_radius", cfg.plant.random->spectral_radius}};
    }
    if (cfg.cost) {
        j["cost"]["Q"] = matrix_json(cfg.cost->Q);
        j["cost"]["R"] = matrix_json(cfg.cost->R);
    }
    j["input"] = {{"num_terms", cfg.input.num_terms}, {"T", cfg.input.T}, {"seed", cfg.input.seed}};
    j["param"]["mode"] = cfg.mode == ParamMode::Delayed ? "delayed" : "filtered";
    j["param"]["N"] = cfg.window;
    j["param"]["lambda_roots"] = cfg.lambda_roots;
    if (cfg.eta0) j["param"]["eta0"] = vector_json(*cfg.eta0);
    j["param"]["eta0_seed"] = cfg.eta0_seed;
    if (cfg.x0) j["x0"] = vector_json(*cfg.x0);
    j["x0_seed"] = cfg.x0_seed;
    j["algorithm"] = cfg.algorithm == Algorithm::Pi ? "pi"
                     : cfg.algorithm == Algorithm::Vi ? "vi"
                                                      : "both";
    j["eps"] = cfg.eps;
    j["max_iter"] = cfg.max_iter;
    j["p0_scale"] = cfg.p0_scale;
    j["k0"]["type"] = cfg.k0 == InitialGainKind::Zero       ? "zero"
                      : cfg.k0 == InitialGainKind::Deadbeat ? "deadbeat"
                                                            : "explicit";
    if (cfg.k0_explicit) j["k0"]["K"] = matrix_json(*cfg.k0_explicit);
    if (cfg.noise)
        j["noise"] = {{"w_max", cfg.noise->w_max}, {"e_max", cfg.noise->e_max},
                      {"seed", cfg.noise->seed}};
    j["denoise"] = cfg.denoise;
    j["closed_loop_steps"] = cfg.closed_loop_steps;
    if (!cfg.out_dir.empty()) j["out"] = cfg.out_dir;
    j["record_matrices_json"] = cfg.record_matrices_json;
    return j.dump(2);
}

// --- benchmark registry --------------------------------------------------------

namespace {

std::map<std::string, Benchmark> build_registry() {
    std::map<std::string, Benchmark> reg;

    {
        Benchmark b;
        b.name = "aircraft";  // third-order SISO aircraft model
        MatrixXd A(3, 3), B(3, 1), C(1, 3);
        A << 0.906488, 0.0816012, -0.0005,
             0.0741349, 0.90121, -0.0007083,
             0.0, 0.0, 0.132655;
        B << -0.00150808, -0.0096, 0.867345;
        C << 1.0, 0.0, 0.0;
        b.sys = LtiSystem(A, B, C);
        b.cost = CostWeights(MatrixXd::Constant(1, 1, 100.0), MatrixXd::Constant(1, 1, 1.0));
        b.lambda_roots = {-0.7, 0.6, 0.8};
        b.T = 60;
        b.input_seed = 6;
        b.eps = 1e-3;
        b.p0_scale = 1e5;
        VectorXd kp(9);
        kp << -0.1029, -0.2900, 0.0377, -30.0794, 264.5387, -286.4849, -37.1708, 39.9982, 32.9480;
        b.published_gain_pi = kp;
        reg[b.name] = b;
    }
    {
        Benchmark b;
        b.name = "mo4";  // controllable/observable two-input two-output system
        MatrixXd A(4, 4), B(4, 2), C(2, 4);
        A << 0.90031, -0.00015, 0.09048, -0.00452,
             -0.00015, 0.90031, 0.00452, -0.09048,
             -0.09048, -0.00452, 0.90483, -0.09033,
             0.00452, 0.09048, -0.09033, 0.90483;
        B << 0.00468, -0.00015,
             0.00015, -0.00468,
             0.09516, -0.00467,
             -0.00467, 0.09516;
        C << 1.0, 1.0, 0.0, 0.0,
             0.0, 1.0, 0.0, 0.0;
        b.sys = LtiSystem(A, B, C);
        b.cost = CostWeights(MatrixXd::Identity(2, 2), MatrixXd::Identity(2, 2));
        b.lambda_roots = {0.8994, -0.6, 0.7, 0.0};
        b.T = 120;
        b.input_seed = 7;
        b.eps = 1e-3;
        b.p0_scale = 1e3;
        b.target_optimal_cost = 0.5506;
        reg[b.name] = b;
    }
    {
        Benchmark b;
        b.name = "uncontrollable4";  // stabilizable but not controllable
        MatrixXd A(4, 4), B(4, 2), C(2, 4);
        A << 0.3706, 0.1537, 0.0, 0.0,
             0.5123, 0.3739, 0.0, 0.0,
             0.0, 0.0, 0.5443, 0.0,
             0.0, 0.0, 0.0, 0.7685;
        B << 0.1174, 0.5487,
             0.8643, 0.8189,
             0.3159, 0.9594,
             0.0, 0.0;
        C << 1.0, 1.0, 1.0, 0.0,
             0.0, 1.0, 0.0, 1.0;
        b.sys = LtiSystem(A, B, C);
        b.cost = CostWeights(MatrixXd::Identity(2, 2), MatrixXd::Identity(2, 2));
        b.lambda_roots = {0.8994, -0.6, 0.7, 0.0};
        b.T = 120;
        b.input_seed = 7;
        b.eps = 1e-3;
        b.p0_scale = 1e3;
        b.target_optimal_cost = 0.1468;
        reg[b.name] = b;
    }
    {
        Benchmark b;
        b.name = "example1";  // seeded random n=5 plant for dimension estimation
        b.sys = random_plant({.n = 5, .m = 2, .p = 2, .seed = 5, .spectral_radius = 0.92});
        b.cost = CostWeights(MatrixXd::Identity(2, 2), MatrixXd::Identity(2, 2));
        b.lambda_roots = {-0.5, -0.2, 0.1, 0.4, 0.6};
        b.T = 400;
        b.input_seed = 5;
        b.eps = 1e-6;
        b.p0_scale = 1.0;
        reg[b.name] = b;
    }
    {
        Benchmark b;
        b.name = "scalar";
        b.sys = LtiSystem(MatrixXd::Constant(1, 1, 0.5), MatrixXd::Constant(1, 1, 1.0),
                          MatrixXd::Constant(1, 1, 1.0));
        b.cost = CostWeights(MatrixXd::Identity(1, 1), MatrixXd::Identity(1, 1));
        b.lambda_roots = {0.3};
        b.T = 40;
        b.input_seed = 2;
        b.eps = 1e-9;
        b.p0_scale = 1.0;
        reg[b.name] = b;
    }
    return reg;
}

const std::map<std::string, Benchmark>& registry() {
    static const std::map<std::string, Benchmark> reg = build_registry();
    return reg;
}

}  // namespace

std::vector<std::string> benchmark_names() {
    std::vector<std::string> names;
    for (const auto& [name, bench] : registry()) names.push_back(name);
    return names;
}

const Benchmark& get_benchmark(const std::string& name) {
    const auto it = registry().find(name);
    if (it == registry().end()) throw ConfigError("unknown benchmark: " + name);
    return it->second;
}

LtiSystem random_plant(const RandomPlantRecipe& recipe) {
    if (recipe.n < 1 || recipe.m < 1 || recipe.p < 1 || recipe.p > recipe.n)
        throw ConfigError("random_plant: need n >= 1, m >= 1, 1 <= p <= n");
    std::mt19937_64 gen(recipe.seed);
    auto draw_matrix = [&](Eigen::Index r, Eigen::Index c) {
        MatrixXd M(r, c);
        for (Eigen::Index i = 0; i < r; ++i)
            for (Eigen::Index j = 0; j < c; ++j) M(i, j) = uniform_in(gen, -1.0, 1.0);
        return M;
    };
    for (int attempt = 0; attempt < 200; ++attempt) {
        MatrixXd A = draw_matrix(recipe.n, recipe.n);
        const double rho = spectral_radius(A);
        if (rho <= 0.0) continue;
        A *= recipe.spectral_radius / rho;
        const MatrixXd B = draw_matrix(recipe.n, recipe.m);
        const MatrixXd C = draw_matrix(recipe.p, recipe.n);
        // controllability / observability checks
        MatrixXd ctrb(recipe.n, recipe.n * recipe.m);
        MatrixXd obsv(recipe.n * recipe.p, recipe.n);
        MatrixXd Ak = MatrixXd::Identity(recipe.n, recipe.n);
        for (Eigen::Index k = 0; k < recipe.n; ++k) {
            ctrb.middleCols(k * recipe.m, recipe.m) = Ak * B;
            obsv.middleRows(k * recipe.p, recipe.p) = C * Ak;
            Ak = A * Ak;
        }
        if (numeric_rank(ctrb) < recipe.n || numeric_rank(obsv) < recipe.n) continue;
        if (numeric_rank(C) < recipe.p) continue;
        return LtiSystem(A, B, C);
    }
    throw DataError("random_plant: could not draw a controllable and observable system");
}

// --- resolution ----------------------------------------------------------------

ResolvedExperiment resolve(const ExperimentConfig& cfg) {
    ResolvedExperiment rex;
    rex.cfg = cfg;

    int sources = 0;
    sources += cfg.plant.benchmark.empty() ? 0 : 1;
    sources += cfg.plant.explicit_plant ? 1 : 0;
    sources += cfg.plant.random ? 1 : 0;
    if (sources != 1)
        throw ConfigError("resolve: exactly one of benchmark, explicit matrices, or a random "
                          "recipe must specify the plant");

    const Benchmark* bench = nullptr;
    if (!cfg.plant.benchmark.empty()) {
        bench = &get_benchmark(cfg.plant.benchmark);
        rex.sys = bench->sys;
    } else if (cfg.plant.explicit_plant) {
        rex.sys = *cfg.plant.explicit_plant;
    } else {
        rex.sys = random_plant(*cfg.plant.random);
    }
    const Eigen::Index n = rex.sys.n(), p = rex.sys.p();

    if (cfg.cost)
        rex.cost = *cfg.cost;
    else if (bench)
        rex.cost = bench->cost;
    else
        rex.cost = CostWeights(MatrixXd::Identity(p, p), MatrixXd::Identity(rex.sys.m(), rex.sys.m()));
    if (rex.cost.Q.rows() != p || rex.cost.R.rows() != rex.sys.m())
        throw ConfigError("resolve: cost weight dimensions do not match the plant");

    if (rex.cfg.input.T <= 0) rex.cfg.input.T = bench ? bench->T : 120;
    if (rex.cfg.input.seed == 0) rex.cfg.input.seed = bench ? bench->input_seed : 1;
    if (rex.cfg.eps <= 0.0) rex.cfg.eps = bench ? bench->eps : 1e-8;
    if (rex.cfg.p0_scale <= 0.0) rex.cfg.p0_scale = bench ? bench->p0_scale : 1e3;

    // Observer spectrum: explicit > benchmark > evenly spread stable defaults.
    std::vector<double> roots = cfg.lambda_roots;
    if (roots.empty() && bench) roots = bench->lambda_roots;
    if (roots.empty()) {
        for (Eigen::Index k = 0; k < n; ++k)
            roots.push_back(-0.5 + 1.3 * (static_cast<double>(k) + 0.5) / static_cast<double>(n));
    }
    if (static_cast<Eigen::Index>(roots.size()) != n)
        throw ConfigError("resolve: need exactly n observer eigenvalues");

    if (cfg.mode == ParamMode::Delayed) {
        rex.param = ParamConfig::delayed(n, cfg.window);
    } else {
        VectorXd eta0 = cfg.eta0 ? *cfg.eta0
                                 : seeded_uniform_vector(n, cfg.eta0_seed, -0.5, 0.5);
        rex.param = ParamConfig::filtered(n, roots, eta0);
    }

    if (cfg.x0) {
        if (cfg.x0->size() != n) throw ConfigError("resolve: x0 must have n entries");
        rex.x0 = *cfg.x0;
    } else {
        rex.x0 = seeded_uniform_vector(n, cfg.x0_seed, -0.5, 0.5);
        if (bench && bench->target_optimal_cost) {
            // Scale the drawn direction so the optimal cost lands on the
            // published value; the registry owns the benchmark's x0.
            const MatrixXd Qx = rex.cost.state_weight(rex.sys);
            const DareSolution oracle = solve_dare(rex.sys.A, rex.sys.B, Qx, rex.cost.R);
            const double quad = rex.x0.dot(oracle.P * rex.x0);
            if (quad <= 0.0) throw DataError("resolve: degenerate x0 draw");
            rex.x0 *= std::sqrt(*bench->target_optimal_cost / quad);
        }
    }
    return rex;
}

// --- pipeline -------------------------------------------------------------------

namespace {

Eigen::Index expected_n_v(const ResolvedExperiment& rex) {
    const Eigen::Index n = rex.sys.n(), m = rex.sys.m();
    if (rex.param.mode == ParamMode::Delayed) return m * rex.param.window() + n;
    return m * n + n + (rex.param.keep_error_block ? n : 0);
}

}  // namespace

PreparedData prepare_data(const ResolvedExperiment& rex) {
    const Eigen::Index m = rex.sys.m(), T = rex.cfg.input.T;
    const Eigen::Index min_T = expected_n_v(rex) + m;
    if (T < min_T)
        throw ConfigError("prepare_data: input T = " + std::to_string(T) +
                          " is too small; the data matrices need T >= n_v + m = " +
                          std::to_string(min_T));

    PreparedData out;
    if (rex.param.mode == ParamMode::Delayed) {
        const Eigen::Index N = rex.param.window();
        const MatrixXd U = generate_pe_input(m, T + N, rex.cfg.input.num_terms, rex.cfg.input.seed);
        out.traj = simulate(rex.sys, rex.x0, U, rex.cfg.noise, -static_cast<int>(N));
        const RawSubstitute raw = build_delayed(out.traj, N);
        out.data = project(raw, U.middleCols(N, T), out.traj.Y.middleCols(N, T), rex.param,
                           rex.cfg.denoise);
        out.x_time_zero = out.traj.X->col(N);
    } else {
        const MatrixXd U = generate_pe_input(m, T, rex.cfg.input.num_terms, rex.cfg.input.seed);
        out.traj = simulate(rex.sys, rex.x0, U, rex.cfg.noise, 0);
        const RawSubstitute raw = build_filtered(out.traj, rex.param);
        out.data = project(raw, U, out.traj.Y, rex.param, rex.cfg.denoise);
        out.x_time_zero = rex.x0;
    }
    return out;
}

PreparedData prepare_data_raw_z0(const ResolvedExperiment& rex) {
    const Eigen::Index m = rex.sys.m(), T = rex.cfg.input.T;
    PreparedData out;
    RawSubstitute raw;
    MatrixXd U0, Y0;
    if (rex.param.mode == ParamMode::Delayed) {
        const Eigen::Index N = rex.param.window();
        const MatrixXd U = generate_pe_input(m, T + N, rex.cfg.input.num_terms, rex.cfg.input.seed);
        out.traj = simulate(rex.sys, rex.x0, U, rex.cfg.noise, -static_cast<int>(N));
        raw = build_delayed(out.traj, N);
        U0 = U.middleCols(N, T);
        Y0 = out.traj.Y.middleCols(N, T);
        out.x_time_zero = out.traj.X->col(N);
    } else {
        const MatrixXd U = generate_pe_input(m, T, rex.cfg.input.num_terms, rex.cfg.input.seed);
        out.traj = simulate(rex.sys, rex.x0, U, rex.cfg.noise, 0);
        raw = build_filtered(out.traj, rex.param);
        U0 = U;
        Y0 = out.traj.Y;
        out.x_time_zero = rex.x0;
    }
    SubstituteData& d = out.data;
    d.Z0 = raw.Z0;
    d.Z1 = raw.Z1;
    d.V0 = raw.Z0;
    d.V1 = raw.Z1;
    d.U0 = U0;
    d.Y0 = Y0;
    d.n_zeta = raw.Z0.rows();
    d.n_v = raw.Z0.rows();
    d.Psi0.resize(d.n_v + m, T);
    d.Psi0.topRows(d.n_v) = d.V0;
    d.Psi0.bottomRows(m) = U0;
    if (numeric_rank(d.Psi0, rex.param.rank_tol) < d.n_v + m)
        throw DataError("raw-Z0 pipeline: [Z0; U0] is rank deficient; only noisy data can "
                        "lift Z0 to full row rank");
    d.min_singular_psi0 = min_singular_value(d.Psi0);
    d.Pproj = MatrixXd::Identity(d.n_zeta, d.n_v);
    return out;
}

namespace {

// Closed-loop rollout under u = K v with the substitute state rebuilt online
// from inputs and outputs only.
Trajectory closed_loop_rollout(const ResolvedExperiment& rex, const PreparedData& prep,
                               const MatrixXd& K, Eigen::Index steps) {
    const LtiSystem& sys = rex.sys;
    const Eigen::Index n = sys.n(), m = sys.m(), p = sys.p();
    Trajectory traj;
    traj.t0 = 0;
    traj.U.resize(m, steps);
    traj.Y.resize(p, steps);
    VectorXd x = prep.x_time_zero;

    const auto& rows = prep.data.selected_output_rows;
    if (rex.param.mode == ParamMode::Delayed) {
        const Eigen::Index N = rex.param.window();
        MatrixXd uwin = MatrixXd::Zero(m, N), ywin = MatrixXd::Zero(p, N);
        for (Eigen::Index t = 0; t < steps; ++t) {
            VectorXd v(prep.data.n_v);
            for (Eigen::Index k = 0; k < N; ++k) v.segment(k * m, m) = uwin.col(k);
            VectorXd ywin_stack(p * N);
            for (Eigen::Index k = 0; k < N; ++k) ywin_stack.segment(k * p, p) = ywin.col(k);
            for (std::size_t i = 0; i < rows.size(); ++i)
                v(m * N + static_cast<Eigen::Index>(i)) = ywin_stack(rows[i]);
            const VectorXd u = K * v;
            const VectorXd y = sys.C * x;
            traj.U.col(t) = u;
            traj.Y.col(t) = y;
            // shift the windows
            for (Eigen::Index k = 0; k + 1 < N; ++k) {
                uwin.col(k) = uwin.col(k + 1);
                ywin.col(k) = ywin.col(k + 1);
            }
            uwin.col(N - 1) = u;
            ywin.col(N - 1) = y;
            x = sys.A * x + sys.B * u;
        }
    } else {
        const MatrixXd A_s = rex.param.companion();
        const MatrixXd A_eps = rex.param.eps_dynamics.size() ? rex.param.eps_dynamics : A_s;
        MatrixXd denoise_basis;
        if (rex.cfg.denoise)
            denoise_basis = svd_denoise(prep.data.Z0.middleRows(m * n, p * n), n).basis;
        VectorXd eta = VectorXd::Zero((m + p + 1) * n);
        eta.tail(n) = rex.param.eta0_eps;
        const bool keep_eps = rex.param.keep_error_block;
        for (Eigen::Index t = 0; t < steps; ++t) {
            VectorXd v(prep.data.n_v);
            v.head(m * n) = eta.head(m * n);
            VectorXd yblock = eta.segment(m * n, p * n);
            if (denoise_basis.size()) yblock = denoise_basis * (denoise_basis.transpose() * yblock);
            for (std::size_t i = 0; i < rows.size(); ++i)
                v(m * n + static_cast<Eigen::Index>(i)) = yblock(rows[i]);
            if (keep_eps) v.tail(n) = eta.tail(n);
            const VectorXd u = K * v;
            const VectorXd y = sys.C * x;
            traj.U.col(t) = u;
            traj.Y.col(t) = y;
            VectorXd next = VectorXd::Zero(eta.size());
            for (Eigen::Index ch = 0; ch < m; ++ch) {
                next.segment(ch * n, n) = A_s * eta.segment(ch * n, n);
                next(ch * n + n - 1) += u(ch);
            }
            for (Eigen::Index ch = 0; ch < p; ++ch) {
                const Eigen::Index s = (m + ch) * n;
                next.segment(s, n) = A_s * eta.segment(s, n);
                next(s + n - 1) += y(ch);
            }
            next.tail(n) = A_eps * eta.tail(n);
            eta = next;
            x = sys.A * x + sys.B * u;
        }
    }
    return traj;
}

AlgorithmReport summarize(const std::string& name, const LearnResult& res, double oracle_cost,
                          const SubstituteData& data, double wall_ms) {
    AlgorithmReport rep;
    rep.algorithm = name;
    rep.converged = res.converged;
    rep.iterations = static_cast<int>(res.records.size());
    rep.final_residual = res.records.empty() ? 0.0 : res.records.back().residual;
    rep.gain = res.K.K;
    rep.learned_cost = evaluate_learned_cost(res.K, res.theta, data.V0.col(0));
    rep.cost_difference = oracle_cost - rep.learned_cost;
    rep.records = res.records;
    rep.wall_time_ms = wall_ms;
    return rep;
}

}  // namespace

ExperimentReport run_experiment(const ExperimentConfig& cfg) {
    const auto t_total = clock_type::now();
    ExperimentReport report;
    report.resolved = stage("resolve", [&] { return resolve(cfg); });
    const ResolvedExperiment& rex = report.resolved;

    const PreparedData prep = stage("data", [&] { return prepare_data(rex); });
    report.n_v = prep.data.n_v;
    report.n_zeta = prep.data.n_zeta;
    report.rank_z0 = numeric_rank(prep.data.Z0, rex.param.rank_tol);
    report.min_singular_psi0 = prep.data.min_singular_psi0;

    const MatrixXd Qx = rex.cost.state_weight(rex.sys);
    const DareSolution oracle =
        stage("oracle", [&] { return solve_dare(rex.sys.A, rex.sys.B, Qx, rex.cost.R); });
    report.oracle_P = oracle.P;
    report.oracle_cost = prep.x_time_zero.dot(oracle.P * prep.x_time_zero);

    Gain K0{MatrixXd::Zero(rex.sys.m(), prep.data.n_v)};
    if (rex.cfg.k0 == InitialGainKind::Deadbeat)
        K0 = stage("k0", [&] { return deadbeat_initial_gain(prep.data); });
    else if (rex.cfg.k0 == InitialGainKind::Explicit) {
        if (!rex.cfg.k0_explicit || rex.cfg.k0_explicit->rows() != rex.sys.m() ||
            rex.cfg.k0_explicit->cols() != prep.data.n_v)
            throw ConfigError("k0: explicit gain must be m x n_v");
        K0 = Gain{*rex.cfg.k0_explicit};
    }

    RunOptions opts;
    opts.eps = rex.cfg.eps;
    opts.max_iter = rex.cfg.max_iter;

    if (rex.cfg.algorithm != Algorithm::Vi) {
        const auto t0 = clock_type::now();
        const LearnResult res =
            stage("learn:pi", [&] { return run_pi(prep.data, rex.cost, K0, opts); });
        const double ms = std::chrono::duration<double, std::milli>(clock_type::now() - t0).count();
        report.runs.push_back(summarize("pi", res, report.oracle_cost, prep.data, ms));
    }
    if (rex.cfg.algorithm != Algorithm::Pi) {
        const auto t0 = clock_type::now();
        const ValueMatrix P0{rex.cfg.p0_scale *
                             MatrixXd::Identity(prep.data.n_v, prep.data.n_v)};
        const LearnResult res =
            stage("learn:vi", [&] { return run_vi(prep.data, rex.cost, P0, opts); });
        const double ms = std::chrono::duration<double, std::milli>(clock_type::now() - t0).count();
        report.runs.push_back(summarize("vi", res, report.oracle_cost, prep.data, ms));
    }
    report.total_wall_ms =
        std::chrono::duration<double, std::milli>(clock_type::now() - t_total).count();

    if (!cfg.out_dir.empty()) {
        namespace fs = std::filesystem;
        fs::create_directories(cfg.out_dir);
        {
            std::ofstream os(fs::path(cfg.out_dir) / "report.json");
            os << report_to_json(report);
        }
        {
            std::ofstream os(fs::path(cfg.out_dir) / "trajectory.csv");
            write_trajectory_csv(prep.traj, os);
        }
        for (const auto& run : report.runs) {
            {
                std::ofstream os(fs::path(cfg.out_dir) / (run.algorithm + "_residuals.csv"));
                write_records_csv(run.records, os);
            }
            const Trajectory cl =
                closed_loop_rollout(rex, prep, run.gain, rex.cfg.closed_loop_steps);
            std::ofstream os(fs::path(cfg.out_dir) / (run.algorithm + "_closed_loop.csv"));
            write_trajectory_csv(cl, os);
        }
    }
    return report;
}

std::string report_to_json(const ExperimentReport& report) {
    json j;
    j["config"] = json::parse(config_to_json(report.resolved.cfg));
    j["plant"]["A"] = matrix_json(report.resolved.sys.A);
    j["plant"]["B"] = matrix_json(report.resolved.sys.B);
    j["plant"]["C"] = matrix_json(report.resolved.sys.C);
    j["cost"]["Q"] = matrix_json(report.resolved.cost.Q);
    j["cost"]["R"] = matrix_json(report.resolved.cost.R);
    j["x0"] = vector_json(report.resolved.x0);
    j["n_v"] = report.n_v;
    j["n_zeta"] = report.n_zeta;
    j["rank_z0"] = report.rank_z0;
    j["min_singular_psi0"] = report.min_singular_psi0;
    j["oracle_cost"] = report.oracle_cost;
    j["oracle_P"] = matrix_json(report.oracle_P);
    j["total_wall_ms"] = report.total_wall_ms;
    json runs = json::array();
    for (const auto& run : report.runs) {
        json r;
        r["algorithm"] = run.algorithm;
        r["converged"] = run.converged;
        r["iterations"] = run.iterations;
        r["final_residual"] = run.final_residual;
        r["learned_cost"] = run.learned_cost;
        r["cost_difference"] = run.cost_difference;
        r["gain"] = matrix_json(run.gain);
        r["wall_time_ms"] = run.wall_time_ms;
        r["records"] =
            json::parse(records_to_json(run.records, report.resolved.cfg.record_matrices_json));
        runs.push_back(std::move(r));
    }
    j["runs"] = std::move(runs);
    if (!report.resolved.cfg.plant.benchmark.empty()) {
        const Benchmark& b = get_benchmark(report.resolved.cfg.plant.benchmark);
        if (b.published_gain_pi)
            j["published_gain_pi"] = vector_json(*b.published_gain_pi);
    }
    return j.dump(2);
}

// --- sweep -----------------------------------------------------------------------

SweepSummary run_sweep(const ExperimentConfig& cfg, int count, int workers) {
    if (count < 1) throw ConfigError("run_sweep: count must be positive");
    struct Slot {
        bool ok = false;
        bool converged = false;
        double pi_iters = 0, vi_iters = 0, pi_ms = 0, vi_ms = 0;
        double sigma_min = 0, rel_err = 0;
        std::string error;
    };
    std::vector<Slot> slots(static_cast<std::size_t>(count));

    auto run_one = [&](int i) {
        Slot& slot = slots[static_cast<std::size_t>(i)];
        try {
            ExperimentConfig c = cfg;
            c.out_dir.clear();
            const auto shift = static_cast<std::uint64_t>(i);
            if (c.plant.random) c.plant.random->seed += shift;
            c.input.seed = (c.input.seed == 0 ? 1 : c.input.seed) + shift;
            c.x0_seed += shift;
            c.eta0_seed += shift;
            if (c.noise) c.noise->seed += shift;
            const ExperimentReport rep = run_experiment(c);
            slot.ok = true;
            slot.converged = true;
            slot.sigma_min = rep.min_singular_psi0;
            for (const auto& run : rep.runs) {
                slot.converged = slot.converged && run.converged;
                const double rel = std::abs(run.cost_difference) /
                                   std::max(std::abs(rep.oracle_cost), 1e-300);
                slot.rel_err = std::max(slot.rel_err, rel);
                if (run.algorithm == "pi") {
                    slot.pi_iters = run.iterations;
                    slot.pi_ms = run.wall_time_ms;
                } else {
                    slot.vi_iters = run.iterations;
                    slot.vi_ms = run.wall_time_ms;
                }
            }
        } catch (const std::exception& e) {
            slot.error = e.what();
        }
    };

    if (workers <= 0)
        workers = static_cast<int>(std::min<unsigned>(std::thread::hardware_concurrency(), 8));
    workers = std::max(1, std::min(workers, count));
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (int i = next.fetch_add(1); i < count; i = next.fetch_add(1)) run_one(i);
        });
    for (auto& th : pool) th.join();

    SweepSummary sum;
    sum.count = count;
    sum.min_singular_psi0 = std::numeric_limits<double>::infinity();
    int ok_runs = 0;
    for (int i = 0; i < count; ++i) {
        const Slot& slot = slots[static_cast<std::size_t>(i)];
        if (!slot.ok) {
            sum.failures.push_back("run " + std::to_string(i) + ": " + slot.error);
            continue;
        }
        ++ok_runs;
        if (slot.converged) ++sum.converged;
        sum.mean_pi_iterations += slot.pi_iters;
        sum.mean_vi_iterations += slot.vi_iters;
        sum.mean_pi_wall_ms += slot.pi_ms;
        sum.mean_vi_wall_ms += slot.vi_ms;
        sum.min_singular_psi0 = std::min(sum.min_singular_psi0, slot.sigma_min);
        sum.max_cost_rel_error = std::max(sum.max_cost_rel_error, slot.rel_err);
    }
    if (ok_runs > 0) {
        sum.mean_pi_iterations /= ok_runs;
        sum.mean_vi_iterations /= ok_runs;
        sum.mean_pi_wall_ms /= ok_runs;
        sum.mean_vi_wall_ms /= ok_runs;
    }
    return sum;
}

// --- noise table -------------------------------------------------------------------

std::vector<NoiseTableRow> run_noise_table(const ExperimentConfig& cfg,
                                           const std::vector<double>& w_max_list,
                                           int pi_iters, int vi_iters) {
    std::vector<NoiseTableRow> rows;
    for (double w : w_max_list) {
        ExperimentConfig c = cfg;
        c.out_dir.clear();
        if (w > 0.0) {
            NoiseSpec ns;
            ns.w_max = w;
            ns.e_max = w;
            ns.seed = cfg.noise ? cfg.noise->seed : 100;
            c.noise = ns;
        } else {
            c.noise.reset();
        }

        for (const std::string pipeline : {"v0_denoised", "v0", "raw_z0"}) {
            ExperimentConfig cp = c;
            cp.denoise = (pipeline == "v0_denoised");
            PreparedData prep;
            ResolvedExperiment rex;
            double oracle_cost = 0.0;
            bool prepared = false;
            std::string prep_error;
            try {
                rex = resolve(cp);
                prep = pipeline == "raw_z0" ? prepare_data_raw_z0(rex) : prepare_data(rex);
                const DareSolution oracle = solve_dare(
                    rex.sys.A, rex.sys.B, rex.cost.state_weight(rex.sys), rex.cost.R);
                oracle_cost = prep.x_time_zero.dot(oracle.P * prep.x_time_zero);
                prepared = true;
            } catch (const std::exception& e) {
                prep_error = e.what();
            }
            for (const std::string alg : {"pi", "vi"}) {
                NoiseTableRow row;
                row.w_max = w;
                row.pipeline = pipeline;
                row.algorithm = alg;
                if (!prepared) {
                    row.note = prep_error;
                    rows.push_back(row);
                    continue;
                }
                try {
                    RunOptions opts;
                    opts.eps = 0.0;  // fixed iteration budget, as in the robustness study
                    opts.max_iter = alg == "pi" ? pi_iters : vi_iters;
                    opts.record_matrices = false;
                    LearnResult res;
                    if (alg == "pi")
                        res = run_pi(prep.data, rex.cost,
                                     Gain{MatrixXd::Zero(rex.sys.m(), prep.data.n_v)}, opts);
                    else
                        res = run_vi(prep.data, rex.cost,
                                     ValueMatrix{rex.cfg.p0_scale * MatrixXd::Identity(
                                                                        prep.data.n_v, prep.data.n_v)},
                                     opts);
                    row.ok = true;
                    row.delta_K = res.records.empty() ? 0.0 : res.records.back().residual;
                    row.delta_xPx =
                        oracle_cost - evaluate_learned_cost(res.K, res.theta, prep.data.V0.col(0));
                } catch (const std::exception& e) {
                    row.note = e.what();
                }
                rows.push_back(row);
            }
        }
    }
    return rows;
}

void write_noise_table_csv(const std::vector<NoiseTableRow>& rows, std::ostream& os) {
    os << "w_max,pipeline,algorithm,ok,delta_K,delta_xPx,note\n";
    char buf[32];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%.17g", r.w_max);
        os << buf << "," << r.pipeline << "," << r.algorithm << "," << (r.ok ? 1 : 0) << ",";
        std::snprintf(buf, sizeof(buf), "%.17g", r.delta_K);
        os << buf << ",";
        std::snprintf(buf, sizeof(buf), "%.17g", r.delta_xPx);
        os << buf << ",\"" << r.note << "\"\n";
    }
}

DimReport run_estimate_dim(const ExperimentConfig& cfg, int N_max) {
    const ResolvedExperiment rex = resolve(cfg);
    const Eigen::Index T = rex.cfg.input.T;
    const MatrixXd U = generate_pe_input(rex.sys.m(), T, rex.cfg.input.num_terms,
                                         rex.cfg.input.seed);
    const Trajectory traj = simulate(rex.sys, rex.x0, U, rex.cfg.noise, 0);
    DimReport rep;
    rep.estimate = estimate_state_dim_curve(traj.U, traj.Y, N_max, rex.param.rank_tol);
    rep.determined = rep.estimate.n_hat.has_value();
    return rep;
}

}  // namespace iolqr
