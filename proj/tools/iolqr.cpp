// Command-line experiment runner: reproduces the benchmark studies, runs
// randomized sweeps, and emits CSV/JSON artifacts for plotting.

#include "iolqr/experiment.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace {

using namespace iolqr;

constexpr int kExitOk = 0;
constexpr int kExitValidation = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitPartialFailure = 4;

struct CliOverrides {
    std::string config_path;
    std::string benchmark;
    std::string out_dir;
    std::string algorithm;
    std::string mode;
    std::string k0;
    Eigen::Index T = 0;
    std::uint64_t input_seed = 0;
    double eps = -1.0;
    int max_iter = 0;
    double p0_scale = -1.0;
    double w_max = -1.0;
    bool denoise = false;
};

void add_common_options(CLI::App* cmd, CliOverrides& ov) {
    cmd->add_option("--config", ov.config_path, "JSON experiment config file");
    cmd->add_option("--benchmark", ov.benchmark, "named benchmark plant");
    cmd->add_option("--out", ov.out_dir, "artifact output directory");
    cmd->add_option("--alg", ov.algorithm, "algorithm: pi, vi, or both");
    cmd->add_option("--mode", ov.mode, "parameterization: delayed or filtered");
    cmd->add_option("--T", ov.T, "number of data columns");
    cmd->add_option("--input-seed", ov.input_seed, "excitation-input seed");
    cmd->add_option("--eps", ov.eps, "stop-rule threshold");
    cmd->add_option("--max-iter", ov.max_iter, "iteration cap");
    cmd->add_option("--p0-scale", ov.p0_scale, "VI initial value P0 = scale * I");
    cmd->add_option("--k0", ov.k0, "initial gain: zero, deadbeat, or explicit");
    cmd->add_option("--w-max", ov.w_max, "uniform noise bound (process and measurement)");
    cmd->add_flag("--denoise", ov.denoise, "SVD-truncate the output block before projection");
}

ExperimentConfig build_config(const CliOverrides& ov) {
    ExperimentConfig cfg;
    if (!ov.config_path.empty()) {
        std::ifstream is(ov.config_path);
        if (!is) throw ConfigError("cannot open config file: " + ov.config_path);
        std::stringstream buffer;
        buffer << is.rdbuf();
        cfg = config_from_json(buffer.str());
    }
    if (!ov.benchmark.empty()) {
        cfg.plant.benchmark = ov.benchmark;
        cfg.plant.explicit_plant.reset();
        cfg.plant.random.reset();
    }
    if (!ov.algorithm.empty()) {
        if (ov.algorithm == "pi")
            cfg.algorithm = Algorithm::Pi;
        else if (ov.algorithm == "vi")
            cfg.algorithm = Algorithm::Vi;
        else if (ov.algorithm == "both")
            cfg.algorithm = Algorithm::Both;
        else
            throw ConfigError("--alg must be pi, vi, or both");
    }
    if (!ov.mode.empty()) {
        if (ov.mode == "delayed")
            cfg.mode = ParamMode::Delayed;
        else if (ov.mode == "filtered")
            cfg.mode = ParamMode::Filtered;
        else
            throw ConfigError("--mode must be delayed or filtered");
    }
    if (!ov.k0.empty()) {
        if (ov.k0 == "zero")
            cfg.k0 = InitialGainKind::Zero;
        else if (ov.k0 == "deadbeat")
            cfg.k0 = InitialGainKind::Deadbeat;
        else
            throw ConfigError("--k0 must be zero or deadbeat (explicit gains go in the config)");
    }
    if (ov.T > 0) cfg.input.T = ov.T;
    if (ov.input_seed != 0) cfg.input.seed = ov.input_seed;
    if (ov.eps > 0) cfg.eps = ov.eps;
    if (ov.max_iter > 0) cfg.max_iter = ov.max_iter;
    if (ov.p0_scale > 0) cfg.p0_scale = ov.p0_scale;
    if (ov.w_max >= 0) {
        NoiseSpec ns;
        ns.w_max = ov.w_max;
        ns.e_max = ov.w_max;
        ns.seed = cfg.noise ? cfg.noise->seed : 100;
        if (ov.w_max > 0)
            cfg.noise = ns;
        else
            cfg.noise.reset();
    }
    if (ov.denoise) cfg.denoise = true;
    if (!ov.out_dir.empty())
        cfg.out_dir = ov.out_dir;
    else if (cfg.out_dir.empty()) {
        if (const char* env = std::getenv("IOLQR_OUT_DIR")) cfg.out_dir = env;
    }
    return cfg;
}

int classify_exit(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ShapeError*>(&e))
        return kExitValidation;
    return kExitNumerical;
}

int cmd_run(const CliOverrides& ov) {
    const ExperimentConfig cfg = build_config(ov);
    const ExperimentReport report = run_experiment(cfg);
    std::cout << "plant: "
              << (cfg.plant.benchmark.empty() ? std::string("custom") : cfg.plant.benchmark)
              << "  n_zeta=" << report.n_zeta << "  n_v=" << report.n_v
              << "  rank(Z0)=" << report.rank_z0
              << "  sigma_min(Psi0)=" << report.min_singular_psi0 << "\n";
    std::cout << "oracle cost: " << report.oracle_cost << "\n";
    for (const auto& run : report.runs) {
        std::cout << run.algorithm << ": iterations=" << run.iterations
                  << " converged=" << (run.converged ? "yes" : "no")
                  << " residual=" << run.final_residual << " learned_cost=" << run.learned_cost
                  << " cost_diff=" << run.cost_difference << " wall_ms=" << run.wall_time_ms
                  << "\n";
    }
    if (!cfg.out_dir.empty()) std::cout << "artifacts written to " << cfg.out_dir << "\n";
    return kExitOk;
}

int cmd_sweep(const CliOverrides& ov, int count, int workers) {
    const ExperimentConfig cfg = build_config(ov);
    const SweepSummary sum = run_sweep(cfg, count, workers);
    std::cout << "runs: " << sum.count << "  converged: " << sum.converged
              << "  failures: " << sum.failures.size() << "\n";
    std::cout << "mean PI iterations: " << sum.mean_pi_iterations
              << "  mean VI iterations: " << sum.mean_vi_iterations << "\n";
    std::cout << "mean PI wall ms: " << sum.mean_pi_wall_ms
              << "  mean VI wall ms: " << sum.mean_vi_wall_ms << "\n";
    std::cout << "min sigma_min(Psi0): " << sum.min_singular_psi0
              << "  max |cost error| rel: " << sum.max_cost_rel_error << "\n";
    for (const auto& f : sum.failures) std::cerr << "failure: " << f << "\n";
    if (!cfg.out_dir.empty()) {
        std::filesystem::create_directories(cfg.out_dir);
        std::ofstream os(std::filesystem::path(cfg.out_dir) / "sweep_summary.json");
        os << "{\n  \"count\": " << sum.count << ",\n  \"converged\": " << sum.converged
           << ",\n  \"failures\": " << sum.failures.size()
           << ",\n  \"mean_pi_iterations\": " << sum.mean_pi_iterations
           << ",\n  \"mean_vi_iterations\": " << sum.mean_vi_iterations
           << ",\n  \"mean_pi_wall_ms\": " << sum.mean_pi_wall_ms
           << ",\n  \"mean_vi_wall_ms\": " << sum.mean_vi_wall_ms
           << ",\n  \"min_singular_psi0\": " << sum.min_singular_psi0
           << ",\n  \"max_cost_rel_error\": " << sum.max_cost_rel_error << "\n}\n";
    }
    return sum.failures.empty() ? kExitOk : kExitPartialFailure;
}

int cmd_noise_table(const CliOverrides& ov, std::vector<double> w_list, int pi_iters,
                    int vi_iters) {
    ExperimentConfig cfg = build_config(ov);
    if (cfg.plant.benchmark.empty() && !cfg.plant.explicit_plant)
        throw ConfigError("noise-table needs a benchmark or explicit plant");
    if (w_list.empty()) w_list = {1e-3, 1e-4, 1e-6};
    const auto rows = run_noise_table(cfg, w_list, pi_iters, vi_iters);
    write_noise_table_csv(rows, std::cout);
    if (!cfg.out_dir.empty()) {
        std::filesystem::create_directories(cfg.out_dir);
        std::ofstream os(std::filesystem::path(cfg.out_dir) / "noise_table.csv");
        write_noise_table_csv(rows, os);
    }
    bool any_failed = false;
    for (const auto& r : rows) any_failed = any_failed || !r.ok;
    return any_failed ? kExitPartialFailure : kExitOk;
}

int cmd_estimate_dim(const CliOverrides& ov, int N_max) {
    const ExperimentConfig cfg = build_config(ov);
    const DimReport rep = run_estimate_dim(cfg, N_max);
    std::cout << "N,rank_minus_mN\n";
    for (std::size_t i = 0; i < rep.estimate.rank_curve.size(); ++i)
        std::cout << i + 1 << "," << rep.estimate.rank_curve[i] << "\n";
    if (!cfg.out_dir.empty()) {
        std::filesystem::create_directories(cfg.out_dir);
        std::ofstream os(std::filesystem::path(cfg.out_dir) / "dim_curve.csv");
        os << "N,rank_minus_mN\n";
        for (std::size_t i = 0; i < rep.estimate.rank_curve.size(); ++i)
            os << i + 1 << "," << rep.estimate.rank_curve[i] << "\n";
    }
    if (rep.determined) {
        std::cout << "estimated state dimension: " << *rep.estimate.n_hat << "\n";
        return kExitOk;
    }
    std::cerr << "no plateau within N_max; curve written\n";
    return kExitNumerical;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"data-driven output-feedback LQR experiment runner"};
    app.require_subcommand(1);

    CliOverrides ov_run, ov_sweep, ov_noise, ov_dim;
    int sweep_count = 50, sweep_workers = 0;
    int nt_pi_iters = 6, nt_vi_iters = 150;
    std::vector<double> w_list;
    int dim_nmax = 8;

    CLI::App* run = app.add_subcommand("run", "one end-to-end learning experiment");
    add_common_options(run, ov_run);

    CLI::App* sweep = app.add_subcommand("sweep", "many randomized experiments");
    add_common_options(sweep, ov_sweep);
    sweep->add_option("--count", sweep_count, "number of runs");
    sweep->add_option("--workers", sweep_workers, "worker threads (0 = auto)");

    CLI::App* noise = app.add_subcommand("noise-table", "robustness table across noise bounds");
    add_common_options(noise, ov_noise);
    noise->add_option("--w-max-list", w_list, "noise bounds to sweep");
    noise->add_option("--pi-iters", nt_pi_iters, "fixed PI iteration budget");
    noise->add_option("--vi-iters", nt_vi_iters, "fixed VI iteration budget");

    CLI::App* dim = app.add_subcommand("estimate-dim", "estimate the plant state dimension");
    add_common_options(dim, ov_dim);
    dim->add_option("--n-max", dim_nmax, "largest window length to try");

    CLI::App* bench = app.add_subcommand("benchmarks", "registry utilities");
    CLI::App* bench_list = bench->add_subcommand("list", "list named benchmarks");

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) return cmd_run(ov_run);
        if (sweep->parsed()) return cmd_sweep(ov_sweep, sweep_count, sweep_workers);
        if (noise->parsed()) return cmd_noise_table(ov_noise, w_list, nt_pi_iters, nt_vi_iters);
        if (dim->parsed()) return cmd_estimate_dim(ov_dim, dim_nmax);
        if (bench->parsed() && bench_list->parsed()) {
            for (const auto& name : iolqr::benchmark_names()) std::cout << name << "\n";
            return kExitOk;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return classify_exit(e);
    }
    return kExitOk;
}
