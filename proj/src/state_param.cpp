#include "iolqr/state_param.hpp"

#include "iolqr/lti.hpp"
#include "iolqr/solvers.hpp"

#include <nlohmann/json.hpp>

#include <Eigen/QR>

#include <algorithm>
#include <cstdio>
#include <ostream>
#include <sstream>

namespace iolqr {

namespace {

nlohmann::json matrix_payload(const MatrixXd& M) {
    nlohmann::json j;
    j["rows"] = M.rows();
    j["cols"] = M.cols();
    nlohmann::json data = nlohmann::json::array();
    for (Eigen::Index c = 0; c < M.cols(); ++c)
        for (Eigen::Index r = 0; r < M.rows(); ++r) data.push_back(M(r, c));
    j["data"] = std::move(data);
    return j;
}

MatrixXd matrix_from_payload(const nlohmann::json& j) {
    const Eigen::Index rows = j.at("rows").get<Eigen::Index>();
    const Eigen::Index cols = j.at("cols").get<Eigen::Index>();
    MatrixXd M(rows, cols);
    const auto& data = j.at("data");
    Eigen::Index k = 0;
    for (Eigen::Index c = 0; c < cols; ++c)
        for (Eigen::Index r = 0; r < rows; ++r) M(r, c) = data.at(k++).get<double>();
    return M;
}

}  // namespace

// --- ParamConfig -------------------------------------------------------------

ParamConfig ParamConfig::delayed(Eigen::Index n, Eigen::Index N) {
    ParamConfig cfg;
    cfg.mode = ParamMode::Delayed;
    cfg.n = n;
    cfg.N = N;
    return cfg;
}

ParamConfig ParamConfig::filtered(Eigen::Index n, const std::vector<double>& lambda_roots,
                                  const VectorXd& eta0_eps) {
    if (static_cast<Eigen::Index>(lambda_roots.size()) != n)
        throw ConfigError("ParamConfig: need exactly n observer eigenvalues");
    // Expand prod (z - r_i); poly[k] is the coefficient of z^k.
    std::vector<double> poly{1.0};
    for (double r : lambda_roots) {
        std::vector<double> next(poly.size() + 1, 0.0);
        for (std::size_t k = 0; k < poly.size(); ++k) {
            next[k + 1] += poly[k];
            next[k] -= r * poly[k];
        }
        poly = std::move(next);
    }
    ParamConfig cfg;
    cfg.mode = ParamMode::Filtered;
    cfg.n = n;
    cfg.lambda_coeffs.assign(poly.begin(), poly.end() - 1);  // a_0 .. a_{n-1}
    cfg.eta0_eps = eta0_eps;
    cfg.keep_error_block = false;
    for (double r : lambda_roots)
        if (std::abs(r) > 0.0) cfg.keep_error_block = true;
    cfg.eps_dynamics = cfg.companion();
    return cfg;
}

MatrixXd ParamConfig::companion() const {
    const Eigen::Index nn = n;
    MatrixXd A_s = MatrixXd::Zero(nn, nn);
    if (nn > 1) A_s.topRightCorner(nn - 1, nn - 1).setIdentity();
    for (Eigen::Index j = 0; j < nn; ++j) A_s(nn - 1, j) = -lambda_coeffs[static_cast<std::size_t>(j)];
    return A_s;
}

void ParamConfig::validate() const {
    if (n < 1) throw ConfigError("ParamConfig: state dimension must be positive");
    if (mode == ParamMode::Delayed) {
        if (N < 0) throw ConfigError("ParamConfig: window length must be non-negative");
        return;
    }
    if (static_cast<Eigen::Index>(lambda_coeffs.size()) != n)
        throw ConfigError("ParamConfig: lambda_coeffs must hold a_0..a_{n-1}");
    if (eta0_eps.size() != n || eta0_eps.norm() == 0.0)
        throw ConfigError("ParamConfig: eta0_eps must be a nonzero n-vector");
    if (eps_dynamics.size() != 0 && (eps_dynamics.rows() != n || eps_dynamics.cols() != n))
        throw ConfigError("ParamConfig: eps_dynamics must be n x n");
    if (keep_error_block) {
        const MatrixXd A_eps = eps_dynamics.size() ? eps_dynamics : companion();
        // A_eps must share Lambda's spectrum: compare against the companion form.
        Eigen::VectorXcd ev_a = A_eps.eigenvalues();
        Eigen::VectorXcd ev_c = companion().eigenvalues();
        std::vector<std::complex<double>> a(ev_a.data(), ev_a.data() + ev_a.size());
        std::vector<std::complex<double>> c(ev_c.data(), ev_c.data() + ev_c.size());
        auto order = [](const std::complex<double>& l, const std::complex<double>& r) {
            return l.real() != r.real() ? l.real() < r.real() : l.imag() < r.imag();
        };
        std::sort(a.begin(), a.end(), order);
        std::sort(c.begin(), c.end(), order);
        for (std::size_t i = 0; i < a.size(); ++i)
            if (std::abs(a[i] - c[i]) > 1e-6)
                throw ConfigError("ParamConfig: eps_dynamics does not share Lambda's eigenvalues");
        // Error-generator reachability: [A_eps^{n-1} eta0, ..., eta0] invertible.
        MatrixXd kry(n, n);
        VectorXd v = eta0_eps;
        for (Eigen::Index k = n - 1; k >= 0; --k) {
            kry.col(k) = v;
            v = A_eps * v;
        }
        if (numeric_rank(kry, rank_tol) < n)
            throw ConfigError(
                "ParamConfig: eta0_eps is not a cyclic vector of eps_dynamics "
                "(error generator cannot span the error space)");
    }
}

// --- substitute-state construction -------------------------------------------

RawSubstitute build_delayed(const Trajectory& traj, Eigen::Index N) {
    traj.validate();
    if (N < 1) throw ConfigError("build_delayed: window length must be positive");
    const Eigen::Index m = traj.U.rows(), p = traj.Y.rows(), samples = traj.samples();
    if (samples <= N)
        throw DataError("build_delayed: trajectory too short to supply the pre-window");
    const Eigen::Index cols = samples - N;  // Z0 columns; Z1 shifts one step further
    const Eigen::Index n_zeta = (m + p) * N;

    RawSubstitute raw;
    raw.first_time = traj.t0 + static_cast<int>(N);
    raw.Z0.resize(n_zeta, cols);
    raw.Z1.resize(n_zeta, cols);
    auto window = [&](Eigen::Index start) {
        VectorXd xi(n_zeta);
        for (Eigen::Index k = 0; k < N; ++k) {
            xi.segment(k * m, m) = traj.U.col(start + k);
            xi.segment(N * m + k * p, p) = traj.Y.col(start + k);
        }
        return xi;
    };
    for (Eigen::Index k = 0; k < cols; ++k) {
        raw.Z0.col(k) = window(k);
        raw.Z1.col(k) = window(k + 1);
    }
    return raw;
}

RawSubstitute build_filtered(const Trajectory& traj, const ParamConfig& cfg) {
    traj.validate();
    cfg.validate();
    if (cfg.mode != ParamMode::Filtered)
        throw ConfigError("build_filtered: config is not in Filtered mode");
    if (traj.t0 != 0)
        throw DataError("build_filtered: trajectory must start at t0 = 0");
    const Eigen::Index m = traj.U.rows(), p = traj.Y.rows(), T = traj.samples(), n = cfg.n;
    const Eigen::Index n_zeta = (m + p + 1) * n;
    const MatrixXd A_s = cfg.companion();
    const MatrixXd A_eps = cfg.eps_dynamics.size() ? cfg.eps_dynamics : A_s;

    MatrixXd H = MatrixXd::Zero(n_zeta, T + 1);
    H.col(0).tail(n) = cfg.eta0_eps;
    for (Eigen::Index t = 0; t < T; ++t) {
        for (Eigen::Index ch = 0; ch < m; ++ch) {
            auto blk = H.col(t).segment(ch * n, n);
            H.col(t + 1).segment(ch * n, n) = A_s * blk;
            H(ch * n + n - 1, t + 1) += traj.U(ch, t);  // b_s = e_n
        }
        for (Eigen::Index ch = 0; ch < p; ++ch) {
            const Eigen::Index s = (m + ch) * n;
            H.col(t + 1).segment(s, n) = A_s * H.col(t).segment(s, n);
            H(s + n - 1, t + 1) += traj.Y(ch, t);
        }
        H.col(t + 1).tail(n) = A_eps * H.col(t).tail(n);
    }

    RawSubstitute raw;
    raw.first_time = 0;
    raw.Z0 = H.leftCols(T);
    raw.Z1 = H.rightCols(T);
    return raw;
}

DenoiseResult svd_denoise(const MatrixXd& Zy, Eigen::Index n, double weak_tol) {
    if (n < 1 || n > Zy.rows()) throw ShapeError("svd_denoise: invalid target rank");
    Eigen::JacobiSVD<MatrixXd> svd(Zy, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const VectorXd& sv = svd.singularValues();
    DenoiseResult out;
    out.basis = svd.matrixU().leftCols(n);
    out.truncated = out.basis * sv.head(n).asDiagonal() *
                    svd.matrixV().leftCols(n).transpose();
    out.sigma_ratio = sv(0) > 0.0 ? sv(n - 1) / sv(0) : 0.0;
    out.weak_signal = out.sigma_ratio < weak_tol;
    return out;
}

SubstituteData project(const RawSubstitute& raw, const MatrixXd& U0, const MatrixXd& Y0,
                       const ParamConfig& cfg, bool denoise) {
    cfg.validate();
    const Eigen::Index T = raw.Z0.cols();
    if (U0.cols() != T || Y0.cols() != T)
        throw ShapeError("project: U0/Y0 must be column-aligned with Z0");
    const Eigen::Index m = U0.rows(), p = Y0.rows(), n = cfg.n;
    const Eigen::Index depth = cfg.mode == ParamMode::Delayed ? cfg.window() : n;
    const Eigen::Index nu = m * depth;
    const Eigen::Index ny = p * depth;
    const bool has_eps = cfg.mode == ParamMode::Filtered;
    const Eigen::Index ne = has_eps ? n : 0;
    if (raw.Z0.rows() != nu + ny + ne)
        throw ShapeError("project: Z0 row count does not match the configuration");
    const bool keep_eps = has_eps && cfg.keep_error_block;

    SubstituteData data;
    data.Z0 = raw.Z0;
    data.Z1 = raw.Z1;
    data.U0 = U0;
    data.Y0 = Y0;
    data.n_zeta = raw.Z0.rows();

    MatrixXd Zy0 = raw.Z0.middleRows(nu, ny);
    MatrixXd Zy1 = raw.Z1.middleRows(nu, ny);
    if (denoise) {
        const DenoiseResult den = svd_denoise(Zy0, n);
        Zy0 = den.truncated;
        Zy1 = den.basis * (den.basis.transpose() * Zy1);
    }

    // Keep every input row (and the error rows when retained); choose n output
    // rows that stay independent after deflating against the kept rows.
    std::vector<Eigen::Index> rows;
    if (ny == n) {
        for (Eigen::Index i = 0; i < n; ++i) rows.push_back(i);
    } else if (ny < n) {
        throw DataError("project: output block holds fewer than n rows");
    } else {
        MatrixXd kept(nu + (keep_eps ? ne : 0), T);
        kept.topRows(nu) = raw.Z0.topRows(nu);
        if (keep_eps) kept.bottomRows(ne) = raw.Z0.bottomRows(ne);
        Eigen::HouseholderQR<MatrixXd> qr(kept.transpose());
        const MatrixXd Qthin =
            qr.householderQ() * MatrixXd::Identity(T, std::min(T, kept.rows()));
        const MatrixXd deflated = Zy0 - (Zy0 * Qthin) * Qthin.transpose();

        Eigen::ColPivHouseholderQR<MatrixXd> piv(deflated.transpose());
        const auto& perm = piv.colsPermutation().indices();
        const MatrixXd& Rm = piv.matrixR();
        const double diag0 = std::abs(Rm(0, 0));
        const double tol = cfg.rank_tol > 0.0
                               ? cfg.rank_tol
                               : rank_tolerance(deflated, diag0);
        if (piv.rank() < n || std::abs(Rm(n - 1, n - 1)) <= tol)
            throw DataError(
                "project: fewer than n independent output rows found "
                "(insufficient excitation)");
        for (Eigen::Index i = 0; i < n; ++i) rows.push_back(perm(i));
        std::sort(rows.begin(), rows.end());
    }

    data.selected_output_rows = rows;
    data.n_v = nu + n + (keep_eps ? ne : 0);
    data.V0.resize(data.n_v, T);
    data.V1.resize(data.n_v, T);
    data.V0.topRows(nu) = raw.Z0.topRows(nu);
    data.V1.topRows(nu) = raw.Z1.topRows(nu);
    for (Eigen::Index i = 0; i < n; ++i) {
        data.V0.row(nu + i) = Zy0.row(rows[static_cast<std::size_t>(i)]);
        data.V1.row(nu + i) = Zy1.row(rows[static_cast<std::size_t>(i)]);
    }
    if (keep_eps) {
        data.V0.bottomRows(ne) = raw.Z0.bottomRows(ne);
        data.V1.bottomRows(ne) = raw.Z1.bottomRows(ne);
    }

    if (numeric_rank(data.V0, cfg.rank_tol) < data.n_v)
        throw DataError("project: V0 is rank deficient after projection");

    data.Psi0.resize(data.n_v + m, T);
    data.Psi0.topRows(data.n_v) = data.V0;
    data.Psi0.bottomRows(m) = U0;
    if (numeric_rank(data.Psi0, cfg.rank_tol) < data.n_v + m)
        throw DataError(
            "project: [V0; U0] is rank deficient (persistency-of-excitation violation)");
    data.min_singular_psi0 = min_singular_value(data.Psi0);

    data.Pproj = raw.Z0 * pinv(data.V0, cfg.rank_tol);
    return data;
}

DimEstimate estimate_state_dim_curve(const MatrixXd& U, const MatrixXd& Y, int N_max,
                                     double rank_tol) {
    if (U.cols() != Y.cols()) throw ShapeError("estimate_state_dim: U and Y must align");
    if (N_max < 2) throw ConfigError("estimate_state_dim: N_max must be at least 2");
    const Eigen::Index m = U.rows(), T = U.cols();
    DimEstimate est;
    for (int N = 1; N <= N_max && N < T; ++N) {
        MatrixXd H(U.rows() * N + Y.rows() * N, T - N + 1);
        H.topRows(U.rows() * N) = hankel(U, N);
        H.bottomRows(Y.rows() * N) = hankel(Y, N);
        const int r = static_cast<int>(numeric_rank(H, rank_tol)) - static_cast<int>(m) * N;
        est.rank_curve.push_back(r);
        if (!est.n_hat && est.rank_curve.size() >= 2 &&
            est.rank_curve[est.rank_curve.size() - 2] == r)
            est.n_hat = r;
    }
    return est;
}

DimEstimate estimate_state_dim(const MatrixXd& U, const MatrixXd& Y, int N_max,
                               double rank_tol) {
    DimEstimate est = estimate_state_dim_curve(U, Y, N_max, rank_tol);
    if (!est.n_hat)
        throw DimensionUndetermined(
            "estimate_state_dim: rank curve did not plateau within N_max", est.rank_curve);
    return est;
}

// --- serialization -----------------------------------------------------------

std::string substitute_to_json(const SubstituteData& data) {
    nlohmann::json j;
    j["n_v"] = data.n_v;
    j["n_zeta"] = data.n_zeta;
    j["selected_output_rows"] = data.selected_output_rows;
    j["min_singular_psi0"] = data.min_singular_psi0;
    j["Z0"] = matrix_payload(data.Z0);
    j["Z1"] = matrix_payload(data.Z1);
    j["V0"] = matrix_payload(data.V0);
    j["V1"] = matrix_payload(data.V1);
    j["Pproj"] = matrix_payload(data.Pproj);
    j["U0"] = matrix_payload(data.U0);
    j["Y0"] = matrix_payload(data.Y0);
    j["Psi0"] = matrix_payload(data.Psi0);
    return j.dump();
}

SubstituteData substitute_from_json(const std::string& text) {
    const nlohmann::json j = nlohmann::json::parse(text);
    SubstituteData data;
    data.n_v = j.at("n_v").get<Eigen::Index>();
    data.n_zeta = j.at("n_zeta").get<Eigen::Index>();
    data.selected_output_rows = j.at("selected_output_rows").get<std::vector<Eigen::Index>>();
    data.min_singular_psi0 = j.at("min_singular_psi0").get<double>();
    data.Z0 = matrix_from_payload(j.at("Z0"));
    data.Z1 = matrix_from_payload(j.at("Z1"));
    data.V0 = matrix_from_payload(j.at("V0"));
    data.V1 = matrix_from_payload(j.at("V1"));
    data.Pproj = matrix_from_payload(j.at("Pproj"));
    data.U0 = matrix_from_payload(j.at("U0"));
    data.Y0 = matrix_from_payload(j.at("Y0"));
    data.Psi0 = matrix_from_payload(j.at("Psi0"));
    return data;
}

void write_matrix_csv(const MatrixXd& M, std::ostream& os) {
    char buf[32];
    for (Eigen::Index i = 0; i < M.rows(); ++i) {
        for (Eigen::Index j = 0; j < M.cols(); ++j) {
            std::snprintf(buf, sizeof(buf), "%.17g", M(i, j));
            os << (j ? "," : "") << buf;
        }
        os << "\n";
    }
}

}  // namespace iolqr
